//! Dense row-major matrices.
//!
//! Shapes are fixed at construction; all arithmetic is f64. Feature sidecars
//! and checkpoints store f32 payloads, converted at the I/O boundary.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor2D {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Tensor2D {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor2D {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "data length must match shape");
        Tensor2D { rows, cols, data }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Tensor2D { rows, cols, data }
    }

    pub fn identity(n: usize) -> Self {
        Tensor2D::from_fn(n, n, |r, c| if r == c { 1.0 } else { 0.0 })
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn shape_str(&self) -> String {
        format!("{}x{}", self.rows, self.cols)
    }

    #[inline]
    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn at_mut(&mut self, r: usize, c: usize) -> &mut f64 {
        &mut self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn check_finite(&self, context: &str) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(Error::State(format!("non-finite values in {context}")))
        }
    }

    /// self @ other.
    pub fn matmul(&self, other: &Tensor2D) -> Tensor2D {
        assert_eq!(
            self.cols, other.rows,
            "matmul shape mismatch: {}x{} @ {}x{}",
            self.rows, self.cols, other.rows, other.cols
        );
        let mut out = Tensor2D::zeros(self.rows, other.cols);
        // ikj order keeps the inner loop contiguous for both operands.
        for i in 0..self.rows {
            let out_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
            for k in 0..self.cols {
                let a = self.data[i * self.cols + k];
                if a == 0.0 {
                    continue;
                }
                let b_row = &other.data[k * other.cols..(k + 1) * other.cols];
                for (o, &b) in out_row.iter_mut().zip(b_row.iter()) {
                    *o += a * b;
                }
            }
        }
        out
    }

    /// self^T @ other (avoids materializing the transpose).
    pub fn matmul_tn(&self, other: &Tensor2D) -> Tensor2D {
        assert_eq!(self.rows, other.rows, "matmul_tn shape mismatch");
        let mut out = Tensor2D::zeros(self.cols, other.cols);
        for k in 0..self.rows {
            let a_row = &self.data[k * self.cols..(k + 1) * self.cols];
            let b_row = &other.data[k * other.cols..(k + 1) * other.cols];
            for (i, &a) in a_row.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let out_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
                for (o, &b) in out_row.iter_mut().zip(b_row.iter()) {
                    *o += a * b;
                }
            }
        }
        out
    }

    /// self @ other^T.
    pub fn matmul_nt(&self, other: &Tensor2D) -> Tensor2D {
        assert_eq!(self.cols, other.cols, "matmul_nt shape mismatch");
        let mut out = Tensor2D::zeros(self.rows, other.rows);
        for i in 0..self.rows {
            let a_row = &self.data[i * self.cols..(i + 1) * self.cols];
            for j in 0..other.rows {
                let b_row = &other.data[j * other.cols..(j + 1) * other.cols];
                let mut acc = 0.0;
                for (&a, &b) in a_row.iter().zip(b_row.iter()) {
                    acc += a * b;
                }
                out.data[i * other.rows + j] = acc;
            }
        }
        out
    }

    pub fn transpose(&self) -> Tensor2D {
        Tensor2D::from_fn(self.cols, self.rows, |r, c| self.at(c, r))
    }

    pub fn add(&self, other: &Tensor2D) -> Tensor2D {
        assert_eq!(self.shape(), other.shape(), "add shape mismatch");
        let data = self
            .data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| a + b)
            .collect();
        Tensor2D {
            rows: self.rows,
            cols: self.cols,
            data,
        }
    }

    pub fn add_assign(&mut self, other: &Tensor2D) {
        assert_eq!(self.shape(), other.shape(), "add_assign shape mismatch");
        for (a, b) in self.data.iter_mut().zip(other.data.iter()) {
            *a += b;
        }
    }

    pub fn scale(&self, s: f64) -> Tensor2D {
        let data = self.data.iter().map(|a| a * s).collect();
        Tensor2D {
            rows: self.rows,
            cols: self.cols,
            data,
        }
    }

    pub fn scale_assign(&mut self, s: f64) {
        for a in self.data.iter_mut() {
            *a *= s;
        }
    }

    /// Add a 1xC row vector to every row.
    pub fn add_row_broadcast(&self, row: &Tensor2D) -> Tensor2D {
        assert_eq!(row.rows, 1, "broadcast row must be 1xC");
        assert_eq!(row.cols, self.cols, "broadcast width mismatch");
        let mut out = self.clone();
        for r in 0..out.rows {
            for (o, &b) in out.row_mut(r).iter_mut().zip(row.data.iter()) {
                *o += b;
            }
        }
        out
    }

    pub fn fill(&mut self, v: f64) {
        self.data.fill(v);
    }

    /// Vertical concatenation.
    pub fn vcat(blocks: &[&Tensor2D]) -> Tensor2D {
        assert!(!blocks.is_empty());
        let cols = blocks[0].cols;
        let rows: usize = blocks.iter().map(|b| b.rows).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for b in blocks {
            assert_eq!(b.cols, cols, "vcat width mismatch");
            data.extend_from_slice(&b.data);
        }
        Tensor2D { rows, cols, data }
    }

    /// Rows [start, start+len).
    pub fn slice_rows(&self, start: usize, len: usize) -> Tensor2D {
        assert!(start + len <= self.rows, "slice_rows out of range");
        Tensor2D {
            rows: len,
            cols: self.cols,
            data: self.data[start * self.cols..(start + len) * self.cols].to_vec(),
        }
    }

    pub fn frobenius_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn approx_eq(&self, other: &Tensor2D, tol: f64) -> bool {
        self.shape() == other.shape()
            && self
                .data
                .iter()
                .zip(other.data.iter())
                .all(|(a, b)| (a - b).abs() <= tol)
    }
}

/// Numerically stable log(sum(exp(xs))).
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    let s: f64 = xs.iter().map(|x| (x - m).exp()).sum();
    m + s.ln()
}

/// log(exp(a) + exp(b)) without overflow.
#[inline]
pub fn log_add(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let (hi, lo) = if a >= b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_small_known() {
        let a = Tensor2D::from_vec(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let b = Tensor2D::from_vec(3, 2, vec![7.0, 8.0, 9.0, 10.0, 11.0, 12.0]);
        let c = a.matmul(&b);
        assert_eq!(c.data(), &[58.0, 64.0, 139.0, 154.0]);
    }

    #[test]
    fn matmul_variants_agree_with_explicit_transpose() {
        let mut rng = crate::rng::Rng::new(3);
        let a = Tensor2D::from_fn(4, 5, |_, _| rng.gaussian());
        let b = Tensor2D::from_fn(4, 6, |_, _| rng.gaussian());
        let c = Tensor2D::from_fn(7, 5, |_, _| rng.gaussian());
        assert!(a
            .matmul_tn(&b)
            .approx_eq(&a.transpose().matmul(&b), 1e-12));
        assert!(a
            .matmul_nt(&c)
            .approx_eq(&a.matmul(&c.transpose()), 1e-12));
    }

    #[test]
    fn identity_matmul_is_noop() {
        let mut rng = crate::rng::Rng::new(9);
        let a = Tensor2D::from_fn(3, 3, |_, _| rng.gaussian());
        assert!(a.matmul(&Tensor2D::identity(3)).approx_eq(&a, 0.0));
    }

    #[test]
    fn log_add_matches_direct() {
        let cases = [(0.0, 0.0), (-1.0, -2.0), (-700.0, -701.0), (3.0, -40.0)];
        for (a, b) in cases {
            let direct = ((a as f64).exp() + (b as f64).exp()).ln();
            assert!((log_add(a, b) - direct).abs() < 1e-12);
        }
        assert_eq!(log_add(f64::NEG_INFINITY, -1.0), -1.0);
    }

    #[test]
    fn log_sum_exp_handles_empty_mass() {
        assert_eq!(
            log_sum_exp(&[f64::NEG_INFINITY, f64::NEG_INFINITY]),
            f64::NEG_INFINITY
        );
        let v = log_sum_exp(&[0.0, 0.0, 0.0]);
        assert!((v - 3.0f64.ln()).abs() < 1e-12);
    }
}
