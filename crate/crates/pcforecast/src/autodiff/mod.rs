//! Reverse-mode automatic differentiation over dense n-d tensors, with the
//! layer set used by the forecasting network: 3D convolution (plain, strided,
//! transposed), batch normalization, leaky ReLU, sigmoid, concatenation, and
//! circular/zero padding.

pub mod conv;
pub mod elem;
pub mod gradcheck;
pub mod norm;
pub mod ops;
pub mod store;
pub mod tensor;

pub use conv::{conv3d, conv3d_transposed, ConvSpec};
pub use elem::Elem;
pub use norm::{batchnorm3d, BnParams, BnState, Phase};
pub use ops::PadMode;
pub use store::{ParamEntry, ParamTable};
pub use tensor::{backward, no_grad, Tensor};
