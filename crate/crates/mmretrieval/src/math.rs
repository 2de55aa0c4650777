//! Small dense linear-algebra helpers shared by the encoder and the losses.
//!
//! Everything is plain `f64` in row-major `Vec`s. Reductions run in a fixed
//! order so results are bit-reproducible across runs.

use crate::error::{Error, Result};

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn l2_norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// `x / ||x||`, failing on zero or non-finite norm.
pub fn normalized(x: &[f64]) -> Result<Vec<f64>> {
    let n = l2_norm(x);
    if !n.is_finite() {
        return Err(Error::NonFinite("l2 norm"));
    }
    if n == 0.0 {
        return Err(Error::Domain("cannot normalize a zero vector".into()));
    }
    Ok(x.iter().map(|v| v / n).collect())
}

/// `y = W x` with `W` stored row-major as `rows x cols`.
pub fn matvec(w: &[f64], rows: usize, cols: usize, x: &[f64]) -> Vec<f64> {
    debug_assert_eq!(w.len(), rows * cols);
    debug_assert_eq!(x.len(), cols);
    let mut y = vec![0.0; rows];
    for r in 0..rows {
        y[r] = dot(&w[r * cols..(r + 1) * cols], x);
    }
    y
}

/// `y = W^T x` with `W` stored row-major as `rows x cols`.
pub fn matvec_t(w: &[f64], rows: usize, cols: usize, x: &[f64]) -> Vec<f64> {
    debug_assert_eq!(w.len(), rows * cols);
    debug_assert_eq!(x.len(), rows);
    let mut y = vec![0.0; cols];
    for r in 0..rows {
        let xr = x[r];
        for c in 0..cols {
            y[c] += w[r * cols + c] * xr;
        }
    }
    y
}

/// `g[r][c] += a[r] * b[c]`, accumulating an outer product into `g`.
pub fn outer_acc(g: &mut [f64], a: &[f64], b: &[f64]) {
    debug_assert_eq!(g.len(), a.len() * b.len());
    for (r, ar) in a.iter().enumerate() {
        let row = &mut g[r * b.len()..(r + 1) * b.len()];
        for (gc, bc) in row.iter_mut().zip(b) {
            *gc += ar * bc;
        }
    }
}

/// `y += alpha * x`.
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yv, xv) in y.iter_mut().zip(x) {
        *yv += alpha * xv;
    }
}

pub fn mean_of(rows: &[Vec<f64>]) -> Vec<f64> {
    debug_assert!(!rows.is_empty());
    let d = rows[0].len();
    let mut m = vec![0.0; d];
    for r in rows {
        axpy(1.0, r, &mut m);
    }
    let inv = 1.0 / rows.len() as f64;
    m.iter_mut().for_each(|v| *v *= inv);
    m
}

/// Dense `n x l x d` tensor, row-major over `(sample, position, channel)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid3 {
    pub n: usize,
    pub l: usize,
    pub d: usize,
    pub data: Vec<f64>,
}

impl Grid3 {
    pub fn zeros(n: usize, l: usize, d: usize) -> Self {
        Grid3 {
            n,
            l,
            d,
            data: vec![0.0; n * l * d],
        }
    }

    #[inline]
    fn offset(&self, i: usize, j: usize) -> usize {
        debug_assert!(i < self.n && j < self.l);
        (i * self.l + j) * self.d
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize) -> &[f64] {
        let o = self.offset(i, j);
        &self.data[o..o + self.d]
    }

    #[inline]
    pub fn at_mut(&mut self, i: usize, j: usize) -> &mut [f64] {
        let o = self.offset(i, j);
        &mut self.data[o..o + self.d]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}
