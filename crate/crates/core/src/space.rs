//! Voxel grids and neighbourhoods. Linear indices run x fastest, then y, then z.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Dims {
    pub nx: usize,
    pub ny: usize,
    pub nz: usize,
}

impl Dims {
    pub fn new(nx: usize, ny: usize, nz: usize) -> Result<Self> {
        if nx == 0 || ny == 0 || nz == 0 {
            return Err(Error::invalid("grid dimensions must be positive"));
        }
        Ok(Dims { nx, ny, nz })
    }

    pub fn plane(nx: usize, ny: usize) -> Self {
        Dims { nx, ny, nz: 1 }
    }

    pub fn len(&self) -> usize {
        self.nx * self.ny * self.nz
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_3d(&self) -> bool {
        self.nz > 1
    }

    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        (z * self.ny + y) * self.nx + x
    }

    pub fn coords(&self, i: usize) -> (usize, usize, usize) {
        (i % self.nx, (i / self.nx) % self.ny, i / (self.nx * self.ny))
    }

    fn offset(&self, i: usize, d: (isize, isize, isize)) -> Option<usize> {
        let (x, y, z) = self.coords(i);
        let nx = x as isize + d.0;
        let ny = y as isize + d.1;
        let nz = z as isize + d.2;
        if nx < 0 || ny < 0 || nz < 0 {
            return None;
        }
        let (nx, ny, nz) = (nx as usize, ny as usize, nz as usize);
        (nx < self.nx && ny < self.ny && nz < self.nz).then(|| self.index(nx, ny, nz))
    }

    /// Full 3x3 (or 3x3x3) neighbourhood minus the centre, in ascending
    /// linear-index order.
    pub fn neighbors_full(&self, i: usize) -> Vec<usize> {
        let zr: &[isize] = if self.is_3d() { &[-1, 0, 1] } else { &[0] };
        let mut out = Vec::with_capacity(26);
        for &dz in zr {
            for dy in -1..=1 {
                for dx in -1..=1 {
                    if (dx, dy, dz) == (0, 0, 0) {
                        continue;
                    }
                    if let Some(j) = self.offset(i, (dx, dy, dz)) {
                        out.push(j);
                    }
                }
            }
        }
        out
    }

    /// Face neighbours (4 in 2D, 6 in 3D).
    pub fn neighbors_face(&self, i: usize) -> Vec<usize> {
        let mut dirs = vec![(-1, 0, 0), (1, 0, 0), (0, -1, 0), (0, 1, 0)];
        if self.is_3d() {
            dirs.extend([(0, 0, -1), (0, 0, 1)]);
        }
        dirs.into_iter().filter_map(|d| self.offset(i, d)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn neighbourhood_sizes() {
        let d = Dims::plane(5, 5);
        assert_eq!(d.neighbors_full(d.index(2, 2, 0)).len(), 8);
        assert_eq!(d.neighbors_full(0).len(), 3);
        assert_eq!(d.neighbors_face(0).len(), 2);
        let d3 = Dims::new(3, 3, 3).unwrap();
        assert_eq!(d3.neighbors_full(d3.index(1, 1, 1)).len(), 26);
        assert_eq!(d3.neighbors_face(d3.index(1, 1, 1)).len(), 6);
    }

    #[test]
    fn index_round_trip() {
        let d = Dims::new(4, 3, 2).unwrap();
        for i in 0..d.len() {
            let (x, y, z) = d.coords(i);
            assert_eq!(d.index(x, y, z), i);
        }
    }
}
