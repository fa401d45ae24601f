//! A small reverse-mode autodiff engine over dense row-major matrices.
//!
//! Models are generic over [`Scalar`] so the same code trains in `f32` and is
//! gradient-checked in `f64`.

mod checkpoint;
mod optim;
mod tape;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_MAGIC};
pub use optim::{clip_global_norm, AdamW, AdamWConfig};
pub(crate) use tape::gelu;
pub use tape::{Segment, Tape, Var};

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + Default
    + Debug
    + Send
    + Sync
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + 'static
{
    /// `c = alpha * a * b + beta * c` with arbitrary strides.
    ///
    /// # Safety
    /// Every index reachable through the given dimensions and strides must be
    /// in bounds of the respective buffers.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );

    fn of(v: f64) -> Self {
        Self::from_f64(v).expect("representable constant")
    }

    fn f64(self) -> f64 {
        self.to_f64().expect("finite scalar")
    }
}

impl Scalar for f32 {
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

impl Scalar for f64 {
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

/// A strided view used to describe gemm operands.
#[derive(Debug, Clone, Copy)]
pub struct View {
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
    pub rs: usize,
    pub cs: usize,
}

impl View {
    pub fn of<S>(m: &Matrix<S>) -> Self {
        View {
            offset: 0,
            rows: m.rows,
            cols: m.cols,
            rs: m.cols,
            cs: 1,
        }
    }

    pub fn t(self) -> Self {
        View {
            rows: self.cols,
            cols: self.rows,
            rs: self.cs,
            cs: self.rs,
            ..self
        }
    }

    /// Sub-block starting at (`r0`, `c0`).
    pub fn block(self, r0: usize, c0: usize, rows: usize, cols: usize) -> Self {
        debug_assert!(r0 + rows <= self.rows && c0 + cols <= self.cols);
        View {
            offset: self.offset + r0 * self.rs + c0 * self.cs,
            rows,
            cols,
            ..self
        }
    }

    fn last_index(&self) -> usize {
        if self.rows == 0 || self.cols == 0 {
            self.offset
        } else {
            self.offset + (self.rows - 1) * self.rs + (self.cols - 1) * self.cs
        }
    }
}

/// `c[vc] = alpha * a[va] * b[vb] + beta * c[vc]`, bounds-checked.
#[allow(clippy::too_many_arguments)]
pub fn gemm<S: Scalar>(
    alpha: S,
    a: &[S],
    va: View,
    b: &[S],
    vb: View,
    beta: S,
    c: &mut [S],
    vc: View,
) {
    assert_eq!(va.cols, vb.rows, "gemm inner dimension");
    assert_eq!((va.rows, vb.cols), (vc.rows, vc.cols), "gemm output shape");
    if vc.rows == 0 || vc.cols == 0 {
        return;
    }
    if va.cols == 0 {
        for i in 0..vc.rows {
            for j in 0..vc.cols {
                let idx = vc.offset + i * vc.rs + j * vc.cs;
                c[idx] = if beta == S::zero() {
                    S::zero()
                } else {
                    beta * c[idx]
                };
            }
        }
        return;
    }
    assert!(va.last_index() < a.len() && vb.last_index() < b.len() && vc.last_index() < c.len());
    // SAFETY: the asserts above bound every reachable element of each view.
    unsafe {
        S::gemm_raw(
            va.rows,
            va.cols,
            vb.cols,
            alpha,
            a.as_ptr().add(va.offset),
            va.rs as isize,
            va.cs as isize,
            b.as_ptr().add(vb.offset),
            vb.rs as isize,
            vb.cs as isize,
            beta,
            c.as_mut_ptr().add(vc.offset),
            vc.rs as isize,
            vc.cs as isize,
        );
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Matrix<S> {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<S>,
}

impl<S: Scalar> Matrix<S> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![S::zero(); rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, v: S) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![v; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<S>) -> Self {
        assert_eq!(rows * cols, data.len(), "matrix data length");
        Matrix { rows, cols, data }
    }

    pub fn randn(rows: usize, cols: usize, std: f64, rng: &mut impl Rng) -> Self {
        let normal = Normal::new(0.0, std).expect("finite std");
        let data = (0..rows * cols)
            .map(|_| S::of(normal.sample(rng)))
            .collect();
        Matrix { rows, cols, data }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn row(&self, r: usize) -> &[S] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [S] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn at(&self, r: usize, c: usize) -> S {
        self.data[r * self.cols + c]
    }

    pub fn matmul(&self, other: &Matrix<S>) -> Matrix<S> {
        let mut out = Matrix::zeros(self.rows, other.cols);
        let vc = View::of(&out);
        gemm(
            S::one(),
            &self.data,
            View::of(self),
            &other.data,
            View::of(other),
            S::zero(),
            &mut out.data,
            vc,
        );
        out
    }

    pub fn add_assign(&mut self, other: &Matrix<S>) {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += *b;
        }
    }

    pub fn scale(&mut self, c: S) {
        for a in &mut self.data {
            *a *= c;
        }
    }

    pub fn sq_norm(&self) -> S {
        self.data.iter().map(|&x| x * x).sum()
    }

    pub fn cast<T: Scalar>(&self) -> Matrix<T> {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| T::of(x.f64())).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamInfo {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
}

/// Named learnable tensors. Ids are insertion indices.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<S> {
    names: Vec<String>,
    values: Vec<Matrix<S>>,
}

impl<S: Scalar> Default for ParamStore<S> {
    fn default() -> Self {
        ParamStore {
            names: Vec::new(),
            values: Vec::new(),
        }
    }
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Matrix<S>) -> usize {
        self.names.push(name.into());
        self.values.push(value);
        self.values.len() - 1
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: usize) -> &Matrix<S> {
        &self.values[id]
    }

    pub fn get_mut(&mut self, id: usize) -> &mut Matrix<S> {
        &mut self.values[id]
    }

    pub fn name(&self, id: usize) -> &str {
        &self.names[id]
    }

    pub fn id_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn values(&self) -> &[Matrix<S>] {
        &self.values
    }

    pub fn infos(&self) -> Vec<ParamInfo> {
        self.names
            .iter()
            .zip(&self.values)
            .map(|(n, v)| ParamInfo {
                name: n.clone(),
                rows: v.rows,
                cols: v.cols,
            })
            .collect()
    }

    pub fn scalar_count(&self) -> usize {
        self.values.iter().map(Matrix::len).sum()
    }

    pub fn zeros_like(&self) -> Vec<Matrix<S>> {
        self.values
            .iter()
            .map(|v| Matrix::zeros(v.rows, v.cols))
            .collect()
    }

    /// SHA-256 over names, shapes and the little-endian `f64` image of every
    /// value. Equal checksums mean bit-identical parameters.
    pub fn checksum(&self) -> String {
        self.checksum_of(|_| true)
    }

    pub fn checksum_of(&self, include: impl Fn(&str) -> bool) -> String {
        let mut h = Sha256::new();
        for (name, v) in self.names.iter().zip(&self.values) {
            if !include(name) {
                continue;
            }
            h.update(name.as_bytes());
            h.update((v.rows as u64).to_le_bytes());
            h.update((v.cols as u64).to_le_bytes());
            for x in &v.data {
                h.update(x.f64().to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    pub fn cast<T: Scalar>(&self) -> ParamStore<T> {
        ParamStore {
            names: self.names.clone(),
            values: self.values.iter().map(Matrix::cast).collect(),
        }
    }

    /// Overwrites values from `other`, which must have the same layout.
    pub fn copy_from(&mut self, other: &ParamStore<S>) -> Result<()> {
        if self.infos() != other.infos() {
            return Err(Error::InvalidArgument("parameter layouts differ".into()));
        }
        self.values.clone_from(&other.values);
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_handles_transposed_and_block_views() {
        let a = Matrix::from_vec(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let b = Matrix::from_vec(2, 2, vec![1.0, 0.0, 0.0, 1.0]);
        // aᵀ b: 3x2
        let mut c = Matrix::<f64>::zeros(3, 2);
        let vc = View::of(&c);
        gemm(
            1.0,
            &a.data,
            View::of(&a).t(),
            &b.data,
            View::of(&b),
            0.0,
            &mut c.data,
            vc,
        );
        assert_eq!(c.data, vec![1.0, 4.0, 2.0, 5.0, 3.0, 6.0]);

        // block of columns 1..3 times a 2x1 vector.
        let v = Matrix::from_vec(2, 1, vec![1.0, 1.0]);
        let mut out = Matrix::<f64>::zeros(1, 1);
        let vo = View::of(&out);
        let blk = View::of(&a).block(0, 1, 2, 1).t();
        gemm(
            1.0,
            &a.data,
            blk,
            &v.data,
            View::of(&v),
            0.0,
            &mut out.data,
            vo,
        );
        assert_eq!(out.data, vec![7.0]);
    }

    #[test]
    fn checksum_tracks_values() {
        let mut s = ParamStore::<f32>::new();
        s.add("w", Matrix::filled(2, 2, 0.5));
        let before = s.checksum();
        assert_eq!(before, s.clone().checksum());
        s.get_mut(0).data[3] = 0.25;
        assert_ne!(before, s.checksum());
    }
}
