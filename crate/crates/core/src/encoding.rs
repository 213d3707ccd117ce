//! Sinusoidal positional encodings.
//!
//! One 1D table over integer timesteps (shared by the future-track decoder,
//! the temporal shift of spatial embeddings, and action tokens) and one 3D
//! table built by concatenating independent 1D encodings of the three grid
//! axes. Both are pure functions of their arguments: identical inputs give
//! bit-identical tables.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Standard sinusoidal encoding of integer positions `0..=horizon`.
///
/// Row `t`: entry `[2i] = sin(t / 10000^(2i/dim))`, `[2i+1] = cos(...)`.
#[derive(Clone)]
pub struct TemporalEncoding<S> {
    rows: usize,
    dim: usize,
    table: Vec<S>,
}

impl<S: Scalar> TemporalEncoding<S> {
    pub fn new(horizon: usize, dim: usize) -> Result<Self> {
        if dim == 0 || dim % 2 != 0 {
            return Err(Error::InvalidArgument {
                op: "temporal_encoding",
                msg: format!("dim {} must be positive and even", dim),
            });
        }
        let rows = horizon + 1;
        let mut table = vec![S::zero(); rows * dim];
        for t in 0..rows {
            fill_sinusoid_row(t as f64, dim, &mut table[t * dim..(t + 1) * dim]);
        }
        Ok(TemporalEncoding { rows, dim, table })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, t: usize) -> &[S] {
        assert!(t < self.rows, "encoding row {} out of {}", t, self.rows);
        &self.table[t * self.dim..(t + 1) * self.dim]
    }

    pub fn as_slice(&self) -> &[S] {
        &self.table
    }
}

/// Factored 3D encoding over a grid: channel blocks `[0..cx)`, `[cx..cx+cy)`,
/// `[cx+cy..dim)` hold independent 1D encodings of the x, y and z indices.
/// Stored flat in token raster order (x fastest, then y, then z).
#[derive(Clone)]
pub struct SpatialEncoding<S> {
    grid: (usize, usize, usize),
    dim: usize,
    split: (usize, usize, usize),
    table: Vec<S>,
}

impl<S: Scalar> SpatialEncoding<S> {
    pub fn new(
        grid: (usize, usize, usize),
        dim: usize,
        split: (usize, usize, usize),
    ) -> Result<Self> {
        let (cx, cy, cz) = split;
        if cx + cy + cz != dim {
            return Err(Error::InvalidArgument {
                op: "spatial_encoding",
                msg: format!("split {:?} does not sum to dim {}", split, dim),
            });
        }
        for (name, c) in [("x", cx), ("y", cy), ("z", cz)] {
            if c == 0 || c % 2 != 0 {
                return Err(Error::InvalidArgument {
                    op: "spatial_encoding",
                    msg: format!("{} channel count {} must be positive and even", name, c),
                });
            }
        }
        let (nx, ny, nz) = grid;
        let n = nx * ny * nz;
        let mut table = vec![S::zero(); n * dim];
        let mut tok = 0usize;
        for iz in 0..nz {
            for iy in 0..ny {
                for ix in 0..nx {
                    let row = &mut table[tok * dim..(tok + 1) * dim];
                    fill_sinusoid_row(ix as f64, cx, &mut row[0..cx]);
                    fill_sinusoid_row(iy as f64, cy, &mut row[cx..cx + cy]);
                    fill_sinusoid_row(iz as f64, cz, &mut row[cx + cy..]);
                    tok += 1;
                }
            }
        }
        Ok(SpatialEncoding {
            grid,
            dim,
            split,
            table,
        })
    }

    /// Equal-thirds channel split; requires `dim` divisible by 6.
    pub fn equal_split(grid: (usize, usize, usize), dim: usize) -> Result<Self> {
        if dim % 6 != 0 {
            return Err(Error::InvalidArgument {
                op: "spatial_encoding",
                msg: format!("dim {} must be divisible by 6 for the equal split", dim),
            });
        }
        let third = dim / 3;
        Self::new(grid, dim, (third, third, third))
    }

    pub fn grid(&self) -> (usize, usize, usize) {
        self.grid
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn split(&self) -> (usize, usize, usize) {
        self.split
    }

    pub fn tokens(&self) -> usize {
        self.grid.0 * self.grid.1 * self.grid.2
    }

    /// Flat token index in raster order (x fastest).
    pub fn token_index(&self, ix: usize, iy: usize, iz: usize) -> usize {
        (iz * self.grid.1 + iy) * self.grid.0 + ix
    }

    pub fn row(&self, tok: usize) -> &[S] {
        &self.table[tok * self.dim..(tok + 1) * self.dim]
    }

    pub fn as_slice(&self) -> &[S] {
        &self.table
    }
}

/// Sinusoidal embedding of a continuous value in `[0, 1]` (the flow-matching
/// interpolation time). Frequencies rise geometrically so nearby times stay
/// distinguishable at every scale.
pub fn flow_time_embedding<S: Scalar>(s: f64, dim: usize) -> Vec<S> {
    assert!(dim % 2 == 0, "flow_time_embedding: odd dim {}", dim);
    let mut out = vec![S::zero(); dim];
    for i in 0..dim / 2 {
        let freq = 10000f64.powf(2.0 * i as f64 / dim as f64);
        out[2 * i] = S::from_f64((s * freq).sin());
        out[2 * i + 1] = S::from_f64((s * freq).cos());
    }
    out
}

fn fill_sinusoid_row<S: Scalar>(pos: f64, dim: usize, row: &mut [S]) {
    debug_assert_eq!(row.len(), dim);
    for i in 0..dim / 2 {
        let denom = 10000f64.powf(2.0 * i as f64 / dim as f64);
        row[2 * i] = S::from_f64((pos / denom).sin());
        row[2 * i + 1] = S::from_f64((pos / denom).cos());
    }
}
