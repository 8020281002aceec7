//! Range-image projection and re-projection.
//!
//! A point p = (x, y, z) with range r = ‖p‖₂ maps to image coordinates
//!
//!   u = ⌊ ½ (1 − atan2(y, x) / π) · W ⌋
//!   v = ⌊ (1 − (asin(z / r) + f_down) / f) · H ⌋,   f = f_up + f_down,
//!
//! floored and clamped to the image bounds, so row 0 is the top of the
//! vertical field of view (elevation f_up) and row H−1 the bottom (−f_down).
//! Each pixel stores the smallest range among the points that land in it; 0
//! marks pixels with no return. Re-projection evaluates the exact inverse at
//! pixel-center angles,
//!
//!   azimuth = π (1 − 2 (u+½) / W),   elevation = f_up − f (v+½) / H,
//!
//! so that projecting a re-projected image reproduces it bit-exactly on the
//! valid set.

use crate::error::{Error, Result};
use crate::geom::PointCloud;
use nalgebra::{Point3, Vector3};
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use std::path::Path;

/// Sensor geometry plus the predicted range interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SensorIntrinsics {
    /// Image height (rows, laser channels).
    pub height: usize,
    /// Image width (columns).
    pub width: usize,
    /// Upward vertical field of view, radians.
    pub fov_up: f64,
    /// Downward vertical field of view, radians, stored positive.
    pub fov_down: f64,
    /// Lower bound of the predicted range interval, meters.
    pub r_min: f64,
    /// Upper bound of the predicted range interval, meters.
    pub r_max: f64,
}

impl SensorIntrinsics {
    pub fn new(
        height: usize,
        width: usize,
        fov_up: f64,
        fov_down: f64,
        r_min: f64,
        r_max: f64,
    ) -> Result<Self> {
        let intr = SensorIntrinsics {
            height,
            width,
            fov_up,
            fov_down,
            r_min,
            r_max,
        };
        intr.validate()?;
        Ok(intr)
    }

    pub fn validate(&self) -> Result<()> {
        if self.height < 1 {
            return Err(Error::Config("intrinsics: height must be >= 1".into()));
        }
        if self.width < 2 {
            return Err(Error::Config("intrinsics: width must be >= 2".into()));
        }
        if self.fov_up + self.fov_down <= 0.0 {
            return Err(Error::Config("intrinsics: f_up + f_down must be > 0".into()));
        }
        if !(self.r_min > 0.0 && self.r_min < self.r_max) {
            return Err(Error::Config(
                "intrinsics: require 0 < r_min < r_max".into(),
            ));
        }
        Ok(())
    }

    /// Velodyne HDL-64E geometry at 64x2048 with the KITTI range interval.
    pub fn kitti_64x2048() -> Self {
        SensorIntrinsics {
            height: 64,
            width: 2048,
            fov_up: 3.0f64.to_radians(),
            fov_down: 25.0f64.to_radians(),
            r_min: 1.0,
            r_max: 85.0,
        }
    }

    /// Small desk-scale sensor for synthetic experiments.
    pub fn desk_32x64() -> Self {
        SensorIntrinsics {
            height: 32,
            width: 64,
            fov_up: 20.0f64.to_radians(),
            fov_down: 20.0f64.to_radians(),
            r_min: 0.5,
            r_max: 40.0,
        }
    }

    pub fn fov(&self) -> f64 {
        self.fov_up + self.fov_down
    }

    /// Pixel coordinates of a point, or None when its range is zero.
    pub fn pixel_of(&self, p: &Point3<f64>) -> Option<(usize, usize)> {
        let r = p.coords.norm();
        if r <= 0.0 {
            return None;
        }
        let azimuth = p.y.atan2(p.x);
        let elevation = (p.z / r).asin();
        let u = 0.5 * (1.0 - azimuth / PI) * self.width as f64;
        let v = (1.0 - (elevation + self.fov_down) / self.fov()) * self.height as f64;
        let u = (u.floor() as isize).clamp(0, self.width as isize - 1) as usize;
        let v = (v.floor() as isize).clamp(0, self.height as isize - 1) as usize;
        Some((v, u))
    }

    /// Unit ray direction through the center of pixel (v, u).
    pub fn pixel_direction(&self, v: usize, u: usize) -> Vector3<f64> {
        let azimuth = PI * (1.0 - 2.0 * (u as f64 + 0.5) / self.width as f64);
        let elevation = self.fov_up - self.fov() * (v as f64 + 0.5) / self.height as f64;
        Vector3::new(
            elevation.cos() * azimuth.cos(),
            elevation.cos() * azimuth.sin(),
            elevation.sin(),
        )
    }
}

/// H×W grid of range values in meters; 0 denotes an invalid pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct RangeImage {
    pub values: Vec<f32>,
    pub intrinsics: SensorIntrinsics,
}

impl RangeImage {
    pub fn empty(intrinsics: SensorIntrinsics) -> Self {
        RangeImage {
            values: vec![0.0; intrinsics.height * intrinsics.width],
            intrinsics,
        }
    }

    pub fn get(&self, v: usize, u: usize) -> f32 {
        self.values[v * self.intrinsics.width + u]
    }

    pub fn set(&mut self, v: usize, u: usize, r: f32) {
        self.values[v * self.intrinsics.width + u] = r;
    }

    pub fn valid_count(&self) -> usize {
        self.values.iter().filter(|&&r| r > 0.0).count()
    }

    pub fn validate(&self) -> Result<()> {
        if self.values.len() != self.intrinsics.height * self.intrinsics.width {
            return Err(Error::shape(
                format!("{}x{}", self.intrinsics.height, self.intrinsics.width),
                format!("{} values", self.values.len()),
            ));
        }
        if self.values.iter().any(|r| !r.is_finite() || *r < 0.0) {
            return Err(Error::Format("range image holds a non-finite or negative value".into()));
        }
        Ok(())
    }
}

/// Projects a cloud into a range image; on pixel collisions the smaller range
/// wins.
pub fn project(cloud: &PointCloud, intrinsics: &SensorIntrinsics) -> RangeImage {
    let mut img = RangeImage::empty(*intrinsics);
    for p in &cloud.points {
        let r = p.coords.norm();
        if let Some((v, u)) = intrinsics.pixel_of(p) {
            let cell = &mut img.values[v * intrinsics.width + u];
            let r32 = r as f32;
            if *cell == 0.0 || r32 < *cell {
                *cell = r32;
            }
        }
    }
    img
}

/// Re-projects valid pixels (optionally restricted by `mask`) to 3D points at
/// the pixel-center angles. The returned point norms equal the stored ranges
/// up to floating-point rounding.
pub fn unproject(img: &RangeImage, mask: Option<&[bool]>) -> PointCloud {
    let intr = &img.intrinsics;
    if let Some(m) = mask {
        assert_eq!(
            m.len(),
            img.values.len(),
            "mask length must match the image"
        );
    }
    let mut points = Vec::new();
    for v in 0..intr.height {
        for u in 0..intr.width {
            let idx = v * intr.width + u;
            let r = img.values[idx];
            if r <= 0.0 {
                continue;
            }
            if let Some(m) = mask {
                if !m[idx] {
                    continue;
                }
            }
            let dir = intr.pixel_direction(v, u);
            points.push(Point3::from(dir * r as f64));
        }
    }
    PointCloud::new(points)
}

/// Tensor of shape (P, H, W): P range images stacked oldest-first.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameStack {
    pub data: Vec<f32>,
    pub frames: usize,
    pub intrinsics: SensorIntrinsics,
}

impl FrameStack {
    pub fn shape(&self) -> (usize, usize, usize) {
        (
            self.frames,
            self.intrinsics.height,
            self.intrinsics.width,
        )
    }

    pub fn frame(&self, t: usize) -> &[f32] {
        let hw = self.intrinsics.height * self.intrinsics.width;
        &self.data[t * hw..(t + 1) * hw]
    }

    /// Rotates every row of every frame by `shift` columns (panoramic shift).
    pub fn rotated_width(&self, shift: isize) -> FrameStack {
        FrameStack {
            data: rotate_last_axis(&self.data, self.intrinsics.width, shift),
            frames: self.frames,
            intrinsics: self.intrinsics,
        }
    }
}

/// Stacks P range images (oldest first) into the network input tensor.
pub fn stack(images: &[RangeImage]) -> Result<FrameStack> {
    let first = images
        .first()
        .ok_or_else(|| Error::Config("cannot stack an empty image list".into()))?;
    let intr = first.intrinsics;
    let mut data = Vec::with_capacity(images.len() * intr.height * intr.width);
    for img in images {
        if img.intrinsics != intr {
            return Err(Error::shape(
                format!("intrinsics {:?}", intr),
                format!("{:?}", img.intrinsics),
            ));
        }
        data.extend_from_slice(&img.values);
    }
    Ok(FrameStack {
        data,
        frames: images.len(),
        intrinsics: intr,
    })
}

/// Rotates each contiguous row of length `width` by `shift` columns; positive
/// shifts move column j to column (j + shift) mod width.
pub fn rotate_last_axis<T: Copy>(data: &[T], width: usize, shift: isize) -> Vec<T> {
    assert!(width > 0 && data.len() % width == 0);
    let s = shift.rem_euclid(width as isize) as usize;
    let mut out = Vec::with_capacity(data.len());
    for row in data.chunks_exact(width) {
        for j in 0..width {
            // out[(j + s) % width] = row[j]  <=>  out[j] = row[(j + width - s) % width]
            out.push(row[(j + width - s) % width]);
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Range-image file format: magic "RIMG", u8 version, LE u32 rank, u32 dims,
// float32 row-major payload, trailing key=value block with the intrinsics.
// ---------------------------------------------------------------------------

const RIMG_MAGIC: &[u8; 4] = b"RIMG";
const RIMG_VERSION: u8 = 1;

fn encode_rimg(dims: &[u32], payload: &[f32], intr: &SensorIntrinsics) -> Vec<u8> {
    let mut bytes = Vec::new();
    bytes.extend_from_slice(RIMG_MAGIC);
    bytes.push(RIMG_VERSION);
    bytes.extend_from_slice(&(dims.len() as u32).to_le_bytes());
    for d in dims {
        bytes.extend_from_slice(&d.to_le_bytes());
    }
    for v in payload {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    // Float values use the shortest representation that parses back exactly.
    let meta = format!(
        "fov_up={}\nfov_down={}\nr_min={}\nr_max={}\n",
        intr.fov_up, intr.fov_down, intr.r_min, intr.r_max
    );
    bytes.extend_from_slice(&(meta.len() as u32).to_le_bytes());
    bytes.extend_from_slice(meta.as_bytes());
    bytes
}

struct RimgRaw {
    dims: Vec<u32>,
    payload: Vec<f32>,
    intr_fields: [f64; 4],
}

fn decode_rimg(bytes: &[u8]) -> Result<RimgRaw> {
    let fail = |msg: &str| Error::Format(format!("range-image file: {msg}"));
    let mut off = 0usize;
    let take = |off: &mut usize, n: usize| -> Result<&[u8]> {
        if *off + n > bytes.len() {
            return Err(fail("truncated"));
        }
        let s = &bytes[*off..*off + n];
        *off += n;
        Ok(s)
    };
    if take(&mut off, 4)? != RIMG_MAGIC {
        return Err(fail("bad magic"));
    }
    let version = take(&mut off, 1)?[0];
    if version != RIMG_VERSION {
        return Err(fail(&format!("unsupported version {version}")));
    }
    let read_u32 = |off: &mut usize| -> Result<u32> {
        let s = take(off, 4)?;
        Ok(u32::from_le_bytes([s[0], s[1], s[2], s[3]]))
    };
    let rank = read_u32(&mut off)? as usize;
    if rank == 0 || rank > 8 {
        return Err(fail(&format!("implausible rank {rank}")));
    }
    let mut dims = Vec::with_capacity(rank);
    for _ in 0..rank {
        dims.push(read_u32(&mut off)?);
    }
    let numel: usize = dims.iter().map(|&d| d as usize).product();
    let mut payload = Vec::with_capacity(numel);
    for _ in 0..numel {
        let s = take(&mut off, 4)?;
        payload.push(f32::from_le_bytes([s[0], s[1], s[2], s[3]]));
    }
    let meta_len = read_u32(&mut off)? as usize;
    let meta = std::str::from_utf8(take(&mut off, meta_len)?)
        .map_err(|_| fail("metadata is not utf-8"))?;
    let mut fields = [f64::NAN; 4];
    for line in meta.lines() {
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| fail(&format!("bad metadata line '{line}'")))?;
        let slot = match key {
            "fov_up" => 0,
            "fov_down" => 1,
            "r_min" => 2,
            "r_max" => 3,
            _ => continue,
        };
        fields[slot] = value
            .parse()
            .map_err(|_| fail(&format!("bad metadata value '{value}'")))?;
    }
    if fields.iter().any(|f| f.is_nan()) {
        return Err(fail("missing intrinsics key"));
    }
    Ok(RimgRaw {
        dims,
        payload,
        intr_fields: fields,
    })
}

pub fn write_range_image(path: &Path, img: &RangeImage) -> Result<()> {
    let dims = [img.intrinsics.height as u32, img.intrinsics.width as u32];
    std::fs::write(path, encode_rimg(&dims, &img.values, &img.intrinsics))?;
    Ok(())
}

pub fn read_range_image(path: &Path) -> Result<RangeImage> {
    let raw = decode_rimg(&std::fs::read(path)?)?;
    if raw.dims.len() != 2 {
        return Err(Error::Format(format!(
            "range-image file: expected rank 2, got {}",
            raw.dims.len()
        )));
    }
    let [fov_up, fov_down, r_min, r_max] = raw.intr_fields;
    let intrinsics = SensorIntrinsics::new(
        raw.dims[0] as usize,
        raw.dims[1] as usize,
        fov_up,
        fov_down,
        r_min,
        r_max,
    )?;
    Ok(RangeImage {
        values: raw.payload,
        intrinsics,
    })
}

pub fn write_frame_stack(path: &Path, fs: &FrameStack) -> Result<()> {
    let dims = [
        fs.frames as u32,
        fs.intrinsics.height as u32,
        fs.intrinsics.width as u32,
    ];
    std::fs::write(path, encode_rimg(&dims, &fs.data, &fs.intrinsics))?;
    Ok(())
}

pub fn read_frame_stack(path: &Path) -> Result<FrameStack> {
    let raw = decode_rimg(&std::fs::read(path)?)?;
    if raw.dims.len() != 3 {
        return Err(Error::Format(format!(
            "frame-stack file: expected rank 3, got {}",
            raw.dims.len()
        )));
    }
    let [fov_up, fov_down, r_min, r_max] = raw.intr_fields;
    let intrinsics = SensorIntrinsics::new(
        raw.dims[1] as usize,
        raw.dims[2] as usize,
        fov_up,
        fov_down,
        r_min,
        r_max,
    )?;
    Ok(FrameStack {
        data: raw.payload,
        frames: raw.dims[0] as usize,
        intrinsics,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::prelude::*;
    use rand::Rng as _;
    use rand_chacha::ChaCha8Rng;

    fn kitti() -> SensorIntrinsics {
        SensorIntrinsics::kitti_64x2048()
    }

    #[test]
    fn forward_axis_point_lands_at_expected_pixel() {
        // Elevation 0 with f_down = 25°, f = 28°: v = ⌊(1 − 25/28)·64⌋ = 6;
        // azimuth 0: u = ⌊0.5·2048⌋ = 1024.
        let cloud = PointCloud::new(vec![Point3::new(10.0, 0.0, 0.0)]);
        let img = project(&cloud, &kitti());
        assert_eq!(img.get(6, 1024), 10.0);
        assert_eq!(img.valid_count(), 1);
    }

    #[test]
    fn rows_cover_the_vertical_fov() {
        let intr = kitti();
        let at_elevation = |e: f64| Point3::new(10.0 * e.cos(), 0.0, 10.0 * e.sin());
        // Top of the FOV maps to row 0, bottom to the last row.
        let top = at_elevation(2.99f64.to_radians());
        let bottom = at_elevation(-24.99f64.to_radians());
        assert_eq!(intr.pixel_of(&top).unwrap().0, 0);
        assert_eq!(intr.pixel_of(&bottom).unwrap().0, intr.height - 1);
    }

    #[test]
    fn collision_keeps_the_closer_point() {
        let cloud = PointCloud::new(vec![
            Point3::new(10.0, 0.0, 0.0),
            Point3::new(4.0, 0.0, 0.0),
        ]);
        let img = project(&cloud, &kitti());
        assert_eq!(img.get(6, 1024), 4.0);
    }

    #[test]
    fn empty_cloud_projects_to_all_invalid() {
        let img = project(&PointCloud::default(), &kitti());
        assert_eq!(img.valid_count(), 0);
    }

    #[test]
    fn all_invalid_unprojects_to_empty() {
        assert!(unproject(&RangeImage::empty(kitti()), None).is_empty());
    }

    #[test]
    fn unprojected_pixel_keeps_range_and_azimuth_bin() {
        let mut img = RangeImage::empty(kitti());
        img.set(57, 1024, 10.0);
        let cloud = unproject(&img, None);
        assert_eq!(cloud.len(), 1);
        let p = cloud.points[0];
        assert!((p.coords.norm() - 10.0).abs() < 1e-9);
        assert!(p.y.atan2(p.x).abs() <= PI / 2048.0);
    }

    #[test]
    fn azimuth_seam_is_behind_the_sensor() {
        let intr = kitti();
        // Just left of the -x axis: y -> 0+ gives atan2 -> +pi -> column 0.
        let (_, u_pos) = intr
            .pixel_of(&Point3::new(-10.0, 1e-9, 0.0))
            .unwrap();
        assert_eq!(u_pos, 0);
        // y -> 0- gives atan2 -> -pi -> clamped to the last column.
        let (_, u_neg) = intr
            .pixel_of(&Point3::new(-10.0, -1e-9, 0.0))
            .unwrap();
        assert_eq!(u_neg, intr.width - 1);
    }

    fn random_image(seed: u64, intr: SensorIntrinsics, fill: f64) -> RangeImage {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut img = RangeImage::empty(intr);
        for v in img.values.iter_mut() {
            if rng.gen_bool(fill) {
                *v = rng.gen_range(intr.r_min..intr.r_max) as f32;
            }
        }
        img
    }

    #[test]
    fn project_after_unproject_is_bit_exact() {
        let img = random_image(7, kitti(), 0.7);
        let back = project(&unproject(&img, None), &kitti());
        assert_eq!(img.values, back.values);
    }

    #[test]
    fn collision_rule_matches_brute_force() {
        let intr = SensorIntrinsics::desk_32x64();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let points: Vec<Point3<f64>> = (0..4000)
            .map(|_| {
                Point3::new(
                    rng.gen_range(-20.0..20.0),
                    rng.gen_range(-20.0..20.0),
                    rng.gen_range(-5.0..5.0),
                )
            })
            .collect();
        let cloud = PointCloud::new(points.clone());
        let img = project(&cloud, &intr);
        // Brute force: min range per pixel over all points mapping there.
        let mut expected = vec![0.0f32; intr.height * intr.width];
        for p in &points {
            if let Some((v, u)) = intr.pixel_of(p) {
                let r = p.coords.norm() as f32;
                let cell = &mut expected[v * intr.width + u];
                if *cell == 0.0 || r < *cell {
                    *cell = r;
                }
            }
        }
        assert_eq!(img.values, expected);
    }

    #[test]
    fn stack_builds_p_h_w_tensors() {
        let intr = SensorIntrinsics::desk_32x64();
        let imgs = vec![RangeImage::empty(intr); 5];
        let fs = stack(&imgs).unwrap();
        assert_eq!(fs.shape(), (5, 32, 64));
        let single = stack(&imgs[..1]).unwrap();
        assert_eq!(single.shape(), (1, 32, 64));
    }

    #[test]
    fn stack_rejects_mismatched_intrinsics() {
        let a = RangeImage::empty(SensorIntrinsics::desk_32x64());
        let b = RangeImage::empty(kitti());
        assert!(stack(&[a, b]).is_err());
    }

    #[test]
    fn masked_unprojection_skips_pixels() {
        let mut img = RangeImage::empty(kitti());
        img.set(10, 20, 5.0);
        img.set(11, 21, 6.0);
        let mut mask = vec![false; img.values.len()];
        mask[10 * 2048 + 20] = true;
        let cloud = unproject(&img, Some(&mask));
        assert_eq!(cloud.len(), 1);
    }

    #[test]
    fn rimg_round_trip_is_bit_exact() {
        let img = random_image(11, kitti(), 0.4);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("scan.rimg");
        write_range_image(&path, &img).unwrap();
        let bytes_a = std::fs::read(&path).unwrap();
        let back = read_range_image(&path).unwrap();
        assert_eq!(back, img);
        write_range_image(&path, &back).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), bytes_a);
    }

    #[test]
    fn rotate_last_axis_shifts_columns() {
        let data = [1.0f32, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0];
        let rot = rotate_last_axis(&data, 4, 1);
        assert_eq!(rot, vec![4.0, 1.0, 2.0, 3.0, 8.0, 5.0, 6.0, 7.0]);
        let back = rotate_last_axis(&rot, 4, -1);
        assert_eq!(back, data.to_vec());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        // Round trip A over random desk-scale images.
        #[test]
        fn unproject_project_round_trip(seed in 0u64..1000) {
            let intr = SensorIntrinsics::desk_32x64();
            let img = random_image(seed, intr, 0.5);
            let back = project(&unproject(&img, None), &intr);
            prop_assert_eq!(img.values, back.values);
        }

        // Round trip B: angular deviation bounded by one bin, range preserved.
        #[test]
        fn project_unproject_angular_bound(seed in 0u64..1000) {
            let intr = SensorIntrinsics::desk_32x64();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let az = rng.gen_range(-PI..PI);
            let el = rng.gen_range(-intr.fov_down * 0.999..intr.fov_up * 0.999);
            let r = rng.gen_range(1.0..30.0);
            let p = Point3::new(
                r * el.cos() * az.cos(),
                r * el.cos() * az.sin(),
                r * el.sin(),
            );
            let img = project(&PointCloud::new(vec![p]), &intr);
            let cloud = unproject(&img, None);
            prop_assert_eq!(cloud.len(), 1);
            let q = cloud.points[0];
            let az_q = q.y.atan2(q.x);
            let el_q = (q.z / q.coords.norm()).asin();
            let mut d_az = (az_q - az).abs();
            if d_az > PI {
                d_az = 2.0 * PI - d_az;
            }
            prop_assert!(d_az <= 2.0 * PI / intr.width as f64 + 1e-12);
            prop_assert!((el_q - el).abs() <= intr.fov() / intr.height as f64 + 1e-12);
            prop_assert!((q.coords.norm() - img.get(
                intr.pixel_of(&p).unwrap().0,
                intr.pixel_of(&p).unwrap().1
            ) as f64).abs() < 1e-9);
        }
    }
}
