//! Scan sequences and the past/future sample slicing used for training and
//! evaluation: sample i covers scans [i, i+P) as input and [i+P, i+P+F) as
//! ground truth, so subsequent samples are one frame apart.

use crate::error::{Error, Result};
use crate::geom::{PointCloud, PoseSE3};
use crate::lidar_io::scan::read_scan_bin;
use std::path::{Path, PathBuf};

#[derive(Debug, Clone)]
pub enum ScanSource {
    File(PathBuf),
    Memory(PointCloud),
}

/// Ordered scan sequence with optional aligned poses and the (P, F) slicing
/// lengths.
#[derive(Debug, Clone)]
pub struct SequenceDataset {
    scans: Vec<ScanSource>,
    poses: Option<Vec<PoseSE3>>,
    past: usize,
    future: usize,
}

/// Index windows of one training/evaluation sample.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Sample {
    pub past: Vec<usize>,
    pub future: Vec<usize>,
}

impl SequenceDataset {
    pub fn new(
        scans: Vec<ScanSource>,
        poses: Option<Vec<PoseSE3>>,
        past: usize,
        future: usize,
    ) -> Result<Self> {
        if past < 1 || future < 1 {
            return Err(Error::Config(format!(
                "past and future lengths must be >= 1 (got P={past}, F={future})"
            )));
        }
        if let Some(p) = &poses {
            if p.len() != scans.len() {
                return Err(Error::Config(format!(
                    "pose count {} does not match scan count {}",
                    p.len(),
                    scans.len()
                )));
            }
        }
        Ok(SequenceDataset {
            scans,
            poses,
            past,
            future,
        })
    }

    /// Loads all `*.bin` scans of a directory in lexicographic order.
    pub fn from_dir(
        dir: &Path,
        poses: Option<Vec<PoseSE3>>,
        past: usize,
        future: usize,
    ) -> Result<Self> {
        let mut files: Vec<PathBuf> = std::fs::read_dir(dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().map(|e| e == "bin").unwrap_or(false))
            .collect();
        files.sort();
        if files.is_empty() {
            return Err(Error::Config(format!(
                "no .bin scans found in {}",
                dir.display()
            )));
        }
        Self::new(files.into_iter().map(ScanSource::File).collect(), poses, past, future)
    }

    pub fn len(&self) -> usize {
        self.scans.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scans.is_empty()
    }

    pub fn past_len(&self) -> usize {
        self.past
    }

    pub fn future_len(&self) -> usize {
        self.future
    }

    pub fn poses(&self) -> Option<&[PoseSE3]> {
        self.poses.as_deref()
    }

    pub fn pose(&self, index: usize) -> Option<&PoseSE3> {
        self.poses.as_ref().and_then(|p| p.get(index))
    }

    pub fn cloud(&self, index: usize) -> Result<PointCloud> {
        match &self.scans[index] {
            ScanSource::File(path) => read_scan_bin(path),
            ScanSource::Memory(cloud) => Ok(cloud.clone()),
        }
    }

    /// All (past, future) windows; empty (with a warning) when the sequence is
    /// shorter than P + F.
    pub fn slice_samples(&self) -> Vec<Sample> {
        let needed = self.past + self.future;
        if self.scans.len() < needed {
            log::warn!(
                "sequence of {} scans is shorter than P+F = {needed}; no samples",
                self.scans.len()
            );
            return Vec::new();
        }
        let count = self.scans.len() - needed + 1;
        (0..count)
            .map(|i| Sample {
                past: (i..i + self.past).collect(),
                future: (i + self.past..i + needed).collect(),
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mem_dataset(n: usize, past: usize, future: usize) -> SequenceDataset {
        let scans = (0..n)
            .map(|_| ScanSource::Memory(PointCloud::default()))
            .collect();
        SequenceDataset::new(scans, None, past, future).unwrap()
    }

    #[test]
    fn twelve_scans_give_three_samples() {
        let ds = mem_dataset(12, 5, 5);
        let samples = ds.slice_samples();
        assert_eq!(samples.len(), 3);
        assert_eq!(samples[0].past, vec![0, 1, 2, 3, 4]);
        assert_eq!(samples[0].future, vec![5, 6, 7, 8, 9]);
    }

    #[test]
    fn boundary_gives_exactly_one_sample() {
        assert_eq!(mem_dataset(10, 5, 5).slice_samples().len(), 1);
    }

    #[test]
    fn below_minimum_is_empty() {
        assert!(mem_dataset(9, 5, 5).slice_samples().is_empty());
    }

    #[test]
    fn windows_are_contiguous_with_stride_one() {
        let ds = mem_dataset(23, 4, 3);
        let samples = ds.slice_samples();
        assert_eq!(samples.len(), 23 - 4 - 3 + 1);
        for (i, s) in samples.iter().enumerate() {
            assert_eq!(s.past.first(), Some(&i));
            for w in s.past.windows(2).chain(s.future.windows(2)) {
                assert_eq!(w[1], w[0] + 1);
            }
            assert_eq!(s.future[0], s.past[s.past.len() - 1] + 1);
            if i > 0 {
                assert_eq!(s.past[0], samples[i - 1].past[0] + 1);
            }
        }
    }

    #[test]
    fn pose_count_must_match() {
        let scans = vec![ScanSource::Memory(PointCloud::default()); 3];
        let err = SequenceDataset::new(scans, Some(vec![PoseSE3::identity(); 2]), 1, 1);
        assert!(err.is_err());
    }
}
