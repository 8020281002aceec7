//! Exact nearest-neighbor search in 3D: a uniform voxel grid for dense LiDAR
//! clouds with a kd-tree fallback for small or degenerate inputs. Both return
//! the exact minimum squared distance; no approximation anywhere.

use nalgebra::Point3;

pub trait NnIndex: Sync {
    /// Index and squared distance of the closest stored point.
    fn nearest(&self, query: &Point3<f64>) -> (usize, f64);
}

/// Builds the index appropriate for the cloud. Must not be called on an empty
/// slice.
pub fn build_index(points: &[Point3<f64>]) -> Box<dyn NnIndex + '_> {
    assert!(!points.is_empty(), "cannot index an empty cloud");
    let (lo, hi) = bounds(points);
    let extent = hi - lo;
    let diag = extent.norm();
    if points.len() >= GRID_MIN_POINTS && diag > 0.0 {
        Box::new(VoxelGrid::build(points, lo.into(), hi.into()))
    } else {
        Box::new(KdTree3::build(points))
    }
}

const GRID_MIN_POINTS: usize = 1024;

fn bounds(points: &[Point3<f64>]) -> (Point3<f64>, Point3<f64>) {
    let mut lo = points[0];
    let mut hi = points[0];
    for p in points {
        for a in 0..3 {
            lo[a] = lo[a].min(p[a]);
            hi[a] = hi[a].max(p[a]);
        }
    }
    (lo, hi)
}

fn dist_sq(a: &Point3<f64>, b: &Point3<f64>) -> f64 {
    (a - b).norm_squared()
}

// ---------------------------------------------------------------------------
// Uniform voxel grid with ring-expansion search.
// ---------------------------------------------------------------------------

pub struct VoxelGrid<'a> {
    points: &'a [Point3<f64>],
    lo: Point3<f64>,
    cell: f64,
    dims: [usize; 3],
    /// CSR layout: cell c holds points order[starts[c]..starts[c+1]].
    starts: Vec<u32>,
    order: Vec<u32>,
}

impl<'a> VoxelGrid<'a> {
    fn build(points: &'a [Point3<f64>], lo: Point3<f64>, hi: Point3<f64>) -> Self {
        let extent = hi - lo;
        // Aim for a handful of points per occupied cell.
        let volume = extent.x.max(1e-9) * extent.y.max(1e-9) * extent.z.max(1e-9);
        let cell = (volume / points.len() as f64).cbrt().max(1e-9) * 2.0;
        let dims = [
            ((extent.x / cell).floor() as usize + 1).min(512),
            ((extent.y / cell).floor() as usize + 1).min(512),
            ((extent.z / cell).floor() as usize + 1).min(512),
        ];
        let n_cells = dims[0] * dims[1] * dims[2];
        let mut counts = vec![0u32; n_cells + 1];
        let cell_of = |p: &Point3<f64>| -> usize {
            let ix = (((p.x - lo.x) / cell) as usize).min(dims[0] - 1);
            let iy = (((p.y - lo.y) / cell) as usize).min(dims[1] - 1);
            let iz = (((p.z - lo.z) / cell) as usize).min(dims[2] - 1);
            (ix * dims[1] + iy) * dims[2] + iz
        };
        for p in points {
            counts[cell_of(p) + 1] += 1;
        }
        for i in 1..counts.len() {
            counts[i] += counts[i - 1];
        }
        let starts = counts.clone();
        let mut cursor = counts;
        let mut order = vec![0u32; points.len()];
        for (i, p) in points.iter().enumerate() {
            let c = cell_of(p);
            order[cursor[c] as usize] = i as u32;
            cursor[c] += 1;
        }
        VoxelGrid {
            points,
            lo,
            cell,
            dims,
            starts,
            order,
        }
    }

    fn cell_coords(&self, query: &Point3<f64>) -> [isize; 3] {
        let mut c = [0isize; 3];
        for a in 0..3 {
            let raw = ((query[a] - self.lo[a]) / self.cell).floor() as isize;
            c[a] = raw.clamp(0, self.dims[a] as isize - 1);
        }
        c
    }

    fn scan_cell(&self, ix: isize, iy: isize, iz: isize, query: &Point3<f64>, best: &mut (usize, f64)) {
        if ix < 0
            || iy < 0
            || iz < 0
            || ix >= self.dims[0] as isize
            || iy >= self.dims[1] as isize
            || iz >= self.dims[2] as isize
        {
            return;
        }
        let c = (ix as usize * self.dims[1] + iy as usize) * self.dims[2] + iz as usize;
        let (s, e) = (self.starts[c] as usize, self.starts[c + 1] as usize);
        for &idx in &self.order[s..e] {
            let d = dist_sq(query, &self.points[idx as usize]);
            if d < best.1 {
                *best = (idx as usize, d);
            }
        }
    }
}

impl NnIndex for VoxelGrid<'_> {
    fn nearest(&self, query: &Point3<f64>) -> (usize, f64) {
        let center = self.cell_coords(query);
        let mut best = (usize::MAX, f64::INFINITY);
        let max_ring = self.dims.iter().max().copied().unwrap_or(1) as isize + 1;
        for ring in 0..=max_ring {
            // Any point in a cell at Chebyshev ring distance R is at least
            // (R-1) * cell away from the query; once the current best beats
            // that bound the search is complete (exactness guarantee).
            if best.1.is_finite() {
                let lower = (ring - 1).max(0) as f64 * self.cell;
                if lower * lower > best.1 {
                    break;
                }
            }
            if ring == 0 {
                self.scan_cell(center[0], center[1], center[2], query, &mut best);
                continue;
            }
            let (cx, cy, cz) = (center[0], center[1], center[2]);
            for dx in -ring..=ring {
                for dy in -ring..=ring {
                    let on_x_face = dx.abs() == ring;
                    let on_y_face = dy.abs() == ring;
                    if on_x_face || on_y_face {
                        for dz in -ring..=ring {
                            self.scan_cell(cx + dx, cy + dy, cz + dz, query, &mut best);
                        }
                    } else {
                        self.scan_cell(cx + dx, cy + dy, cz - ring, query, &mut best);
                        self.scan_cell(cx + dx, cy + dy, cz + ring, query, &mut best);
                    }
                }
            }
        }
        debug_assert!(best.1.is_finite());
        best
    }
}

// ---------------------------------------------------------------------------
// Median-split kd-tree.
// ---------------------------------------------------------------------------

pub struct KdTree3<'a> {
    points: &'a [Point3<f64>],
    /// Indices arranged so each node's subtree occupies one contiguous block.
    order: Vec<u32>,
}

impl<'a> KdTree3<'a> {
    pub fn build(points: &'a [Point3<f64>]) -> Self {
        let mut order: Vec<u32> = (0..points.len() as u32).collect();
        build_recursive(points, &mut order, 0);
        KdTree3 { points, order }
    }

    fn search(&self, slice: &[u32], depth: usize, query: &Point3<f64>, best: &mut (usize, f64)) {
        if slice.is_empty() {
            return;
        }
        let mid = slice.len() / 2;
        let idx = slice[mid] as usize;
        let d = dist_sq(query, &self.points[idx]);
        if d < best.1 {
            *best = (idx, d);
        }
        let axis = depth % 3;
        let delta = query[axis] - self.points[idx][axis];
        let (near, far) = if delta < 0.0 {
            (&slice[..mid], &slice[mid + 1..])
        } else {
            (&slice[mid + 1..], &slice[..mid])
        };
        self.search(near, depth + 1, query, best);
        if delta * delta < best.1 {
            self.search(far, depth + 1, query, best);
        }
    }
}

fn build_recursive(points: &[Point3<f64>], slice: &mut [u32], depth: usize) {
    if slice.len() <= 1 {
        return;
    }
    let axis = depth % 3;
    let mid = slice.len() / 2;
    slice.select_nth_unstable_by(mid, |&a, &b| {
        points[a as usize][axis]
            .partial_cmp(&points[b as usize][axis])
            .unwrap()
    });
    let (left, rest) = slice.split_at_mut(mid);
    build_recursive(points, left, depth + 1);
    build_recursive(points, &mut rest[1..], depth + 1);
}

impl NnIndex for KdTree3<'_> {
    fn nearest(&self, query: &Point3<f64>) -> (usize, f64) {
        let mut best = (usize::MAX, f64::INFINITY);
        self.search(&self.order, 0, query, &mut best);
        best
    }
}
