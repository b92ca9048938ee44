//! Regular voxel lattice shared by radio maps, masks and rasterized samples.

use serde::{Deserialize, Serialize};

/// Axis-aligned voxel grid. Voxel `(ix, iy, iz)` spans
/// `origin + [i, i+1) * cell_size` on each axis; storage is x-fastest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub origin: [f64; 3],
    /// Voxel counts along x, y, z.
    pub dims: [usize; 3],
    pub cell_size: f64,
}

impl GridSpec {
    pub fn new(origin: [f64; 3], dims: [usize; 3], cell_size: f64) -> Self {
        Self {
            origin,
            dims,
            cell_size,
        }
    }

    pub fn len(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn index(&self, ix: usize, iy: usize, iz: usize) -> usize {
        (iz * self.dims[1] + iy) * self.dims[0] + ix
    }

    #[inline]
    pub fn coords(&self, idx: usize) -> [usize; 3] {
        let nx = self.dims[0];
        let ny = self.dims[1];
        [idx % nx, (idx / nx) % ny, idx / (nx * ny)]
    }

    #[inline]
    pub fn center(&self, ix: usize, iy: usize, iz: usize) -> [f64; 3] {
        [
            self.origin[0] + (ix as f64 + 0.5) * self.cell_size,
            self.origin[1] + (iy as f64 + 0.5) * self.cell_size,
            self.origin[2] + (iz as f64 + 0.5) * self.cell_size,
        ]
    }

    pub fn center_of(&self, idx: usize) -> [f64; 3] {
        let [x, y, z] = self.coords(idx);
        self.center(x, y, z)
    }

    /// Voxel containing `p`, or `None` when `p` lies outside the grid.
    pub fn locate(&self, p: [f64; 3]) -> Option<[usize; 3]> {
        let mut out = [0usize; 3];
        for a in 0..3 {
            let f = (p[a] - self.origin[a]) / self.cell_size;
            if !f.is_finite() || f < 0.0 {
                return None;
            }
            let i = f.floor() as usize;
            if i >= self.dims[a] {
                return None;
            }
            out[a] = i;
        }
        Some(out)
    }

    pub fn locate_index(&self, p: [f64; 3]) -> Option<usize> {
        self.locate(p).map(|[x, y, z]| self.index(x, y, z))
    }

    /// Upper corner of the grid in meters.
    pub fn max_corner(&self) -> [f64; 3] {
        [
            self.origin[0] + self.dims[0] as f64 * self.cell_size,
            self.origin[1] + self.dims[1] as f64 * self.cell_size,
            self.origin[2] + self.dims[2] as f64 * self.cell_size,
        ]
    }

    /// Global lattice index of a voxel (origin snapped to multiples of the cell size).
    pub fn global_index(&self, ix: usize, iy: usize, iz: usize) -> [i64; 3] {
        let o = |a: usize| (self.origin[a] / self.cell_size).round() as i64;
        [o(0) + ix as i64, o(1) + iy as i64, o(2) + iz as i64]
    }
}
