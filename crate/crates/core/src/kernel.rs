//! Reference gather-GEMM for mask-only logits.
//!
//! Computes `logits[i, :] = H[mask_idx[i], :] * W` tile by tile, reading the
//! selected rows of `H` through the index list instead of first copying them
//! into a gathered `[m, d]` buffer. The only working memory is one `H` panel,
//! one `W` panel and one accumulator panel, which [`ScratchAccount`] tracks.
//!
//! Every output element is accumulated over `k` in ascending order starting
//! from zero, so results are bit-identical for every tile shape and match
//! [`gemm_reference`] exactly.

use std::ops::{Add, Mul};

use num_traits::Zero;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum InputError {
    #[error("matrix data has {len} elements, expected {rows}x{cols}")]
    BadShape { rows: usize, cols: usize, len: usize },
    #[error("inner dimensions differ: {left} vs {right}")]
    DimMismatch { left: usize, right: usize },
    #[error("mask index {index} out of range for {rows} rows")]
    IndexOutOfRange { index: usize, rows: usize },
    #[error("mask index {0} appears more than once")]
    DuplicateIndex(usize),
    #[error("tile sizes must be at least 1")]
    ZeroTile,
}

pub trait Element: Copy + Zero + Add<Output = Self> + Mul<Output = Self> + Send + Sync {}

impl<T: Copy + Zero + Add<Output = T> + Mul<Output = T> + Send + Sync> Element for T {}

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Element> Matrix<T> {
    pub fn new(rows: usize, cols: usize, data: Vec<T>) -> Result<Self, InputError> {
        if data.len() != rows * cols {
            return Err(InputError::BadShape { rows, cols, len: data.len() });
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix { rows, cols, data: vec![T::zero(); rows * cols] }
    }

    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self, InputError> {
        let cols = rows.first().map_or(0, Vec::len);
        let data: Vec<T> = rows.iter().flatten().copied().collect();
        Matrix::new(rows.len(), cols, data)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn get(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols + c]
    }

    /// Copies out the listed rows.
    pub fn select_rows(&self, idx: &[usize]) -> Result<Self, InputError> {
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            if i >= self.rows {
                return Err(InputError::IndexOutOfRange { index: i, rows: self.rows });
            }
            data.extend_from_slice(self.row(i));
        }
        Ok(Matrix { rows: idx.len(), cols: self.cols, data })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tiles {
    pub tm: usize,
    pub td: usize,
    pub tv: usize,
}

impl Tiles {
    pub fn new(tm: usize, td: usize, tv: usize) -> Self {
        Tiles { tm, td, tv }
    }

    /// `tm*td + td*tv + tm*tv`.
    pub fn scratch_bound(self) -> usize {
        self.tm * self.td + self.td * self.tv + self.tm * self.tv
    }
}

#[derive(Debug, Clone, Copy)]
pub struct GatherGemmProblem<'a, T> {
    pub h: &'a Matrix<T>,
    pub w: &'a Matrix<T>,
    pub mask_idx: &'a [usize],
    pub tiles: Tiles,
}

impl<T: Element> GatherGemmProblem<'_, T> {
    pub fn check(&self) -> Result<(), InputError> {
        let Tiles { tm, td, tv } = self.tiles;
        if tm == 0 || td == 0 || tv == 0 {
            return Err(InputError::ZeroTile);
        }
        if self.h.cols != self.w.rows {
            return Err(InputError::DimMismatch { left: self.h.cols, right: self.w.rows });
        }
        let mut seen = vec![false; self.h.rows];
        for &i in self.mask_idx {
            if i >= self.h.rows {
                return Err(InputError::IndexOutOfRange { index: i, rows: self.h.rows });
            }
            if std::mem::replace(&mut seen[i], true) {
                return Err(InputError::DuplicateIndex(i));
            }
        }
        Ok(())
    }
}

/// Scratch elements held beyond inputs and output.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ScratchAccount {
    /// Peak held by one worker at once.
    pub peak: usize,
    /// Row tiles processed concurrently; 1 for the sequential kernel.
    pub workers: usize,
}

#[derive(Default)]
struct Meter {
    now: usize,
    peak: usize,
}

impl Meter {
    fn take(&mut self, n: usize) {
        self.now += n;
        self.peak = self.peak.max(self.now);
    }

    fn give(&mut self, n: usize) {
        self.now -= n;
    }
}

/// One row tile: `rows` are indices into `H`; writes `out` (`rows.len() x V`).
fn row_tile<T: Element>(h: &Matrix<T>, w: &Matrix<T>, rows: &[usize], tiles: Tiles, out: &mut [T], meter: &mut Meter) {
    let (d, v) = (h.cols, w.cols);
    let m = rows.len();
    for v0 in (0..v).step_by(tiles.tv) {
        let nv = tiles.tv.min(v - v0);
        meter.take(m * nv);
        let mut acc = vec![T::zero(); m * nv];
        for k0 in (0..d).step_by(tiles.td) {
            let nk = tiles.td.min(d - k0);
            meter.take(m * nk + nk * nv);
            let mut hp = Vec::with_capacity(m * nk);
            for &r in rows {
                hp.extend_from_slice(&h.row(r)[k0..k0 + nk]);
            }
            let mut wp = Vec::with_capacity(nk * nv);
            for k in k0..k0 + nk {
                wp.extend_from_slice(&w.row(k)[v0..v0 + nv]);
            }
            for i in 0..m {
                for k in 0..nk {
                    let a = hp[i * nk + k];
                    for j in 0..nv {
                        acc[i * nv + j] = acc[i * nv + j] + a * wp[k * nv + j];
                    }
                }
            }
            meter.give(m * nk + nk * nv);
        }
        for i in 0..m {
            out[i * v + v0..i * v + v0 + nv].copy_from_slice(&acc[i * nv..(i + 1) * nv]);
        }
        meter.give(m * nv);
    }
}

/// Sequential tiled gather-GEMM.
pub fn gather_gemm<T: Element>(p: &GatherGemmProblem<'_, T>) -> Result<(Matrix<T>, ScratchAccount), InputError> {
    p.check()?;
    let v = p.w.cols;
    let mut out = Matrix::zeros(p.mask_idx.len(), v);
    let mut meter = Meter::default();
    if v > 0 {
        for (rows, chunk) in p.mask_idx.chunks(p.tiles.tm).zip(out.data.chunks_mut(p.tiles.tm * v)) {
            row_tile(p.h, p.w, rows, p.tiles, chunk, &mut meter);
        }
    }
    Ok((out, ScratchAccount { peak: meter.peak, workers: 1 }))
}

/// Gather-GEMM with row tiles spread over the rayon pool. Each output tile
/// is owned by one worker, so results equal [`gather_gemm`] bit for bit.
pub fn gather_gemm_par<T: Element>(p: &GatherGemmProblem<'_, T>) -> Result<(Matrix<T>, ScratchAccount), InputError> {
    p.check()?;
    let v = p.w.cols;
    let mut out = Matrix::zeros(p.mask_idx.len(), v);
    if v == 0 || p.mask_idx.is_empty() {
        return Ok((out, ScratchAccount { peak: 0, workers: 1 }));
    }
    let peaks: Vec<usize> = p
        .mask_idx
        .par_chunks(p.tiles.tm)
        .zip(out.data.par_chunks_mut(p.tiles.tm * v))
        .map(|(rows, chunk)| {
            let mut meter = Meter::default();
            row_tile(p.h, p.w, rows, p.tiles, chunk, &mut meter);
            meter.peak
        })
        .collect();
    let workers = rayon::current_num_threads().min(peaks.len());
    Ok((out, ScratchAccount { peak: peaks.into_iter().max().unwrap_or(0), workers }))
}

/// Naive triple loop, `k` ascending.
pub fn gemm_reference<T: Element>(a: &Matrix<T>, b: &Matrix<T>) -> Result<Matrix<T>, InputError> {
    if a.cols != b.rows {
        return Err(InputError::DimMismatch { left: a.cols, right: b.rows });
    }
    let mut out = Matrix::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        for j in 0..b.cols {
            let mut s = T::zero();
            for k in 0..a.cols {
                s = s + a.get(i, k) * b.get(k, j);
            }
            out.data[i * b.cols + j] = s;
        }
    }
    Ok(out)
}

/// Largest `|x - y| / max(|y|, 1)` over paired elements.
pub fn max_rel_error(x: &Matrix<f64>, y: &Matrix<f64>) -> f64 {
    assert_eq!((x.rows, x.cols), (y.rows, y.cols), "shape mismatch");
    x.data.iter().zip(&y.data).map(|(a, b)| (a - b).abs() / b.abs().max(1.0)).fold(0.0, f64::max)
}
