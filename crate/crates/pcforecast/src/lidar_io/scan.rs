//! KITTI-style binary scan files: little-endian float32 (x, y, z, intensity)
//! quadruples, no header.

use crate::error::{Error, Result};
use crate::geom::PointCloud;
use nalgebra::Point3;
use std::fs;
use std::path::Path;

const RECORD_BYTES: usize = 16;

/// Reads one point per consecutive float32 quadruple; intensity is parsed but
/// ignored by the rest of the pipeline.
pub fn read_scan_bin(path: &Path) -> Result<PointCloud> {
    let bytes = fs::read(path)?;
    decode_scan(&bytes).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

pub fn decode_scan(bytes: &[u8]) -> Result<PointCloud> {
    if bytes.len() % RECORD_BYTES != 0 {
        return Err(Error::Format(format!(
            "scan length {} is not a multiple of {RECORD_BYTES} bytes",
            bytes.len()
        )));
    }
    let n = bytes.len() / RECORD_BYTES;
    let mut points = Vec::with_capacity(n);
    let mut intensities = Vec::with_capacity(n);
    for (i, rec) in bytes.chunks_exact(RECORD_BYTES).enumerate() {
        let f = |o: usize| f32::from_le_bytes([rec[o], rec[o + 1], rec[o + 2], rec[o + 3]]);
        let (x, y, z, intens) = (f(0), f(4), f(8), f(12));
        if !(x.is_finite() && y.is_finite() && z.is_finite() && intens.is_finite()) {
            return Err(Error::Format(format!("non-finite value at record {i}")));
        }
        points.push(Point3::new(x as f64, y as f64, z as f64));
        intensities.push(intens);
    }
    Ok(PointCloud {
        points,
        intensities: Some(intensities),
    })
}

/// Inverse of [`read_scan_bin`]; coordinates are stored as float32, so the
/// round trip is bit-exact for clouds that originated from float32 data.
pub fn write_scan_bin(path: &Path, cloud: &PointCloud) -> Result<()> {
    fs::write(path, encode_scan(cloud))?;
    Ok(())
}

pub fn encode_scan(cloud: &PointCloud) -> Vec<u8> {
    let mut bytes = Vec::with_capacity(cloud.len() * RECORD_BYTES);
    for (i, p) in cloud.points.iter().enumerate() {
        let intens = cloud
            .intensities
            .as_ref()
            .and_then(|v| v.get(i).copied())
            .unwrap_or(0.0);
        for v in [p.x as f32, p.y as f32, p.z as f32, intens] {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    bytes
}
