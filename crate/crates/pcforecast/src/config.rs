//! Run configuration: one merged view of sensor intrinsics, architecture,
//! training hyperparameters, dataset paths, and output directory.
//!
//! Values are resolved in precedence order: built-in defaults, then the TOML
//! config file, then environment variables (`PCF_DATA_ROOT`, `PCF_OUT_ROOT`
//! for path roots), then command-line flags.

use crate::error::{Error, Result};
use crate::lidar_io::synth::SensorSpec;
use crate::network::ArchitectureConfig;
use crate::projection::SensorIntrinsics;
use crate::trainer::TrainConfig;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

pub const ENV_DATA_ROOT: &str = "PCF_DATA_ROOT";
pub const ENV_OUT_ROOT: &str = "PCF_OUT_ROOT";

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelSection {
    pub past: usize,
    pub future: usize,
    pub channels: Vec<usize>,
    pub factors_h: Vec<usize>,
    pub factors_w: Vec<usize>,
    pub temporal: Vec<usize>,
    pub leaky_slope: f64,
    pub skip_connections: bool,
    pub circular_padding: bool,
    pub bn_eps: f64,
    pub bn_momentum: f64,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            past: 5,
            future: 5,
            channels: vec![16, 32, 64, 128],
            factors_h: vec![2, 2, 2, 2],
            factors_w: vec![2, 2, 2, 2],
            temporal: vec![1, 1, 1, 1],
            leaky_slope: 0.2,
            skip_connections: true,
            circular_padding: true,
            bn_eps: 1e-5,
            bn_momentum: 0.1,
        }
    }
}

impl ModelSection {
    pub fn architecture(&self, intrinsics: SensorIntrinsics) -> ArchitectureConfig {
        ArchitectureConfig {
            past: self.past,
            future: self.future,
            channels: self.channels.clone(),
            factors_h: self.factors_h.clone(),
            factors_w: self.factors_w.clone(),
            temporal: self.temporal.clone(),
            leaky_slope: self.leaky_slope,
            skip_connections: self.skip_connections,
            circular_padding: self.circular_padding,
            bn_eps: self.bn_eps,
            bn_momentum: self.bn_momentum,
            intrinsics,
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct DataSection {
    /// Directory of .bin scans.
    pub root: Option<PathBuf>,
    /// KITTI-format pose file aligned with the scans.
    pub poses: Option<PathBuf>,
    /// Optional 3x4 or 4x4 sensor-to-reference calibration matrix file.
    pub calib: Option<PathBuf>,
    /// Validation scan directory.
    pub val_root: Option<PathBuf>,
    /// Validation pose file.
    pub val_poses: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct OutputSection {
    pub dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub sensor: SensorSpec,
    pub model: ModelSection,
    pub train: TrainConfig,
    pub data: DataSection,
    pub output: OutputSection,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            sensor: SensorSpec {
                height: 64,
                width: 2048,
                fov_up_deg: 3.0,
                fov_down_deg: 25.0,
                r_min: 1.0,
                r_max: 85.0,
            },
            model: ModelSection::default(),
            train: TrainConfig::default(),
            data: DataSection::default(),
            output: OutputSection::default(),
            seed: 0,
        }
    }
}

impl RunConfig {
    /// Desk-scale preset: 32x64 sensor and the small channel plan.
    pub fn desk() -> Self {
        RunConfig {
            sensor: SensorSpec {
                height: 32,
                width: 64,
                fov_up_deg: 20.0,
                fov_down_deg: 20.0,
                r_min: 0.5,
                r_max: 40.0,
            },
            model: ModelSection {
                channels: vec![8, 16, 32, 32],
                ..ModelSection::default()
            },
            ..RunConfig::default()
        }
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        toml::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn intrinsics(&self) -> Result<SensorIntrinsics> {
        self.sensor.intrinsics()
    }

    pub fn architecture(&self) -> Result<ArchitectureConfig> {
        Ok(self.model.architecture(self.intrinsics()?))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("run config serializes")
    }
}

/// Applies the data-root environment override to a relative path.
pub fn resolve_data_path(path: &Path) -> PathBuf {
    resolve_with_env(path, ENV_DATA_ROOT)
}

/// Applies the output-root environment override to a relative path.
pub fn resolve_out_path(path: &Path) -> PathBuf {
    resolve_with_env(path, ENV_OUT_ROOT)
}

fn resolve_with_env(path: &Path, var: &str) -> PathBuf {
    if path.is_absolute() {
        return path.to_path_buf();
    }
    match std::env::var_os(var) {
        Some(root) if !root.is_empty() => PathBuf::from(root).join(path),
        _ => path.to_path_buf(),
    }
}

/// Reproducibility record written beside every command's outputs: the exact
/// command line, crate version, seed, and the fully merged configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub tool_version: String,
    pub command: String,
    pub seed: u64,
    pub config: RunConfig,
}

impl Manifest {
    pub fn new(command: String, cfg: &RunConfig) -> Self {
        Manifest {
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            command,
            seed: cfg.seed,
            config: cfg.clone(),
        }
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let text = toml::to_string_pretty(self)
            .map_err(|e| Error::Config(format!("manifest: {e}")))?;
        std::fs::write(dir.join("manifest.toml"), text)?;
        Ok(())
    }
}

/// Reads a whitespace-separated 3x4 or 4x4 matrix file into a 4x4 calibration
/// matrix.
pub fn read_calib_matrix(path: &Path) -> Result<nalgebra::Matrix4<f64>> {
    let text = std::fs::read_to_string(path)?;
    let values: Vec<f64> = text
        .split_whitespace()
        .map(|t| {
            t.parse::<f64>()
                .map_err(|_| Error::Format(format!("{}: bad number '{t}'", path.display())))
        })
        .collect::<Result<_>>()?;
    let mut m = nalgebra::Matrix4::identity();
    match values.len() {
        12 => {
            for r in 0..3 {
                for c in 0..4 {
                    m[(r, c)] = values[r * 4 + c];
                }
            }
        }
        16 => {
            for r in 0..4 {
                for c in 0..4 {
                    m[(r, c)] = values[r * 4 + c];
                }
            }
        }
        n => {
            return Err(Error::Format(format!(
                "{}: expected 12 or 16 matrix values, got {n}",
                path.display()
            )))
        }
    }
    Ok(m)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_build_a_valid_architecture() {
        let cfg = RunConfig::default();
        assert!(cfg.architecture().unwrap().validate().is_ok());
        let desk = RunConfig::desk();
        let arch = desk.architecture().unwrap();
        assert_eq!(arch.channels, vec![8, 16, 32, 32]);
        assert!(arch.validate().is_ok());
    }

    #[test]
    fn toml_round_trip_preserves_config() {
        let mut cfg = RunConfig::desk();
        cfg.train.epochs = 7;
        cfg.seed = 42;
        let text = cfg.to_toml();
        let back: RunConfig = toml::from_str(&text).unwrap();
        assert_eq!(back.train.epochs, 7);
        assert_eq!(back.seed, 42);
        assert_eq!(back.sensor.height, 32);
    }

    #[test]
    fn partial_files_inherit_defaults() {
        let text = "[train]\nepochs = 3\n\n[sensor]\nheight = 32\nwidth = 64\nfov_up_deg = 20.0\nfov_down_deg = 20.0\nr_min = 0.5\nr_max = 40.0\n";
        let cfg: RunConfig = toml::from_str(text).unwrap();
        assert_eq!(cfg.train.epochs, 3);
        assert_eq!(cfg.train.accumulation, 16);
        assert_eq!(cfg.sensor.height, 32);
        assert_eq!(cfg.model.past, 5);
    }

    #[test]
    fn manifest_writes_and_parses() {
        let cfg = RunConfig::desk();
        let manifest = Manifest::new("pcforecast synth --scene s.toml".into(), &cfg);
        let dir = tempfile::tempdir().unwrap();
        manifest.write(dir.path()).unwrap();
        let text = std::fs::read_to_string(dir.path().join("manifest.toml")).unwrap();
        let back: Manifest = toml::from_str(&text).unwrap();
        assert_eq!(back.command, manifest.command);
        assert_eq!(back.config.sensor.width, 64);
    }

    #[test]
    fn calib_matrix_shapes() {
        let dir = tempfile::tempdir().unwrap();
        let p12 = dir.path().join("calib12.txt");
        std::fs::write(&p12, "1 0 0 0.5 0 1 0 0 0 0 1 0").unwrap();
        let m = read_calib_matrix(&p12).unwrap();
        assert_eq!(m[(0, 3)], 0.5);
        assert_eq!(m[(3, 3)], 1.0);

        let bad = dir.path().join("bad.txt");
        std::fs::write(&bad, "1 2 3").unwrap();
        assert!(read_calib_matrix(&bad).is_err());
    }
}
