//! Dense row-major matrix, the sole numeric container in this crate.
//!
//! Products accumulate over the inner dimension in ascending index order, so
//! results are bitwise reproducible and any parallel caller must preserve
//! that reduction order.

use crate::error::{Error, Result};
use crate::numerics::scalar::Scalar;
use crate::numerics::rng::RngState;

#[derive(Debug, Clone, PartialEq)]
pub struct Matrix<S> {
    rows: usize,
    cols: usize,
    data: Vec<S>,
}

impl<S: Scalar> Matrix<S> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        assert!(rows > 0 && cols > 0, "matrix dimensions must be positive");
        Matrix { rows, cols, data: vec![S::zero(); rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<S>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::shape("from_vec", "dimensions must be positive"));
        }
        if data.len() != rows * cols {
            return Err(Error::shape(
                "from_vec",
                format!("data length {} != {rows}x{cols}", data.len()),
            ));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<S>]) -> Result<Self> {
        if rows.is_empty() || rows[0].is_empty() {
            return Err(Error::shape("from_rows", "empty row set"));
        }
        let cols = rows[0].len();
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(Error::shape("from_rows", "ragged rows"));
            }
            data.extend_from_slice(r);
        }
        Ok(Matrix { rows: rows.len(), cols, data })
    }

    /// 1xN row vector.
    pub fn row_vector(values: &[S]) -> Self {
        Matrix { rows: 1, cols: values.len(), data: values.to_vec() }
    }

    /// Nx1 column vector.
    pub fn col_vector(values: &[S]) -> Self {
        Matrix { rows: values.len(), cols: 1, data: values.to_vec() }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.set(i, i, S::one());
        }
        m
    }

    pub fn random_gaussian(rows: usize, cols: usize, std: f64, rng: &mut RngState) -> Self {
        let mut m = Matrix::zeros(rows, cols);
        for v in m.data.iter_mut() {
            *v = S::cast(rng.next_gaussian() * std);
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        false // dimensions are always positive
    }

    #[inline]
    pub fn at(&self, r: usize, c: usize) -> S {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: S) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[S] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [S] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    /// Standard product. The inner sum for every output entry runs over k in
    /// ascending order, so the result is bitwise stable across layouts.
    pub fn matmul(&self, other: &Matrix<S>) -> Result<Matrix<S>> {
        if self.cols != other.rows {
            return Err(Error::shape(
                "matmul",
                format!("{}x{} * {}x{}", self.rows, self.cols, other.rows, other.cols),
            ));
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        // i-k-j loop order: each out[i][j] still accumulates over k ascending,
        // identical to the naive i-j-k triple loop, but streams `other` by row.
        for i in 0..self.rows {
            let a_row = &self.data[i * self.cols..(i + 1) * self.cols];
            let o_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
            for (k, &a_ik) in a_row.iter().enumerate() {
                let b_row = &other.data[k * other.cols..(k + 1) * other.cols];
                for (o, &b_kj) in o_row.iter_mut().zip(b_row.iter()) {
                    *o += a_ik * b_kj;
                }
            }
        }
        Ok(out)
    }

    /// `self * other^T` without materializing the transpose. Each output
    /// entry is a dot product of two contiguous rows, accumulated over k in
    /// ascending order: bitwise identical to `matmul(&other.transpose())`.
    pub fn matmul_nt(&self, other: &Matrix<S>) -> Result<Matrix<S>> {
        if self.cols != other.cols {
            return Err(Error::shape(
                "matmul_nt",
                format!("{}x{} * ({}x{})^T", self.rows, self.cols, other.rows, other.cols),
            ));
        }
        let mut out = Matrix::zeros(self.rows, other.rows);
        for i in 0..self.rows {
            let a_row = self.row(i);
            let o_row = &mut out.data[i * other.rows..(i + 1) * other.rows];
            for (j, o) in o_row.iter_mut().enumerate() {
                let b_row = other.row(j);
                let mut acc = S::zero();
                for (&a, &b) in a_row.iter().zip(b_row.iter()) {
                    acc += a * b;
                }
                *o = acc;
            }
        }
        Ok(out)
    }

    pub fn transpose(&self) -> Matrix<S> {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.set(c, r, self.at(r, c));
            }
        }
        out
    }

    pub fn add(&self, other: &Matrix<S>) -> Result<Matrix<S>> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Matrix<S>) -> Result<Matrix<S>> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    pub fn hadamard(&self, other: &Matrix<S>) -> Result<Matrix<S>> {
        self.zip_with(other, "hadamard", |a, b| a * b)
    }

    fn zip_with(
        &self,
        other: &Matrix<S>,
        op: &'static str,
        f: impl Fn(S, S) -> S,
    ) -> Result<Matrix<S>> {
        if self.shape() != other.shape() {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.shape(), other.shape()),
            ));
        }
        let data = self
            .data
            .iter()
            .zip(other.data.iter())
            .map(|(&a, &b)| f(a, b))
            .collect();
        Ok(Matrix { rows: self.rows, cols: self.cols, data })
    }

    /// `self += scale * other`, shape-checked.
    pub fn add_scaled(&mut self, other: &Matrix<S>, scale: S) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::shape(
                "add_scaled",
                format!("{:?} vs {:?}", self.shape(), other.shape()),
            ));
        }
        for (a, &b) in self.data.iter_mut().zip(other.data.iter()) {
            *a += scale * b;
        }
        Ok(())
    }

    pub fn scale(&self, s: S) -> Matrix<S> {
        self.map(|v| v * s)
    }

    pub fn map(&self, f: impl Fn(S) -> S) -> Matrix<S> {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn frobenius_sq(&self) -> S {
        self.data.iter().map(|&v| v * v).sum()
    }

    pub fn l2_norm(&self) -> S {
        self.frobenius_sq().sqrt()
    }

    /// Mean over rows: 1xC result.
    pub fn mean_rows(&self) -> Matrix<S> {
        let mut out = Matrix::zeros(1, self.cols);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c] += self.at(r, c);
            }
        }
        let inv = S::one() / S::cast(self.rows as f64);
        for v in out.data.iter_mut() {
            *v *= inv;
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn check_finite(&self, op: &'static str) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(Error::Numeric(format!("non-finite entry after {op}")))
        }
    }

    /// Max absolute elementwise difference; shapes must match.
    pub fn max_abs_diff(&self, other: &Matrix<S>) -> Result<S> {
        let d = self.sub(other)?;
        Ok(d.data.iter().fold(S::zero(), |m, v| m.max(v.abs())))
    }

    /// Text serialization: `rows cols` header, then one line per row of
    /// 17-significant-digit decimals. Round-trips f64 exactly.
    pub fn to_text(&self) -> String {
        let mut s = format!("{} {}\n", self.rows, self.cols);
        for r in 0..self.rows {
            let line: Vec<String> = self
                .row(r)
                .iter()
                .map(|v| format!("{:.16e}", v.to_f64().expect("scalar fits f64")))
                .collect();
            s.push_str(&line.join(" "));
            s.push('\n');
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Matrix<S>> {
        let mut lines = text.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::Input("empty matrix text".into()))?;
        let mut dims = header.split_whitespace();
        let parse_dim = |tok: Option<&str>| -> Result<usize> {
            tok.ok_or_else(|| Error::Input("missing dimension in matrix header".into()))?
                .parse::<usize>()
                .map_err(|e| Error::Input(format!("bad matrix header: {e}")))
        };
        let rows = parse_dim(dims.next())?;
        let cols = parse_dim(dims.next())?;
        let mut data = Vec::with_capacity(rows * cols);
        for line in lines.take(rows) {
            for tok in line.split_whitespace() {
                let v: f64 = tok
                    .parse()
                    .map_err(|e| Error::Input(format!("bad matrix entry {tok:?}: {e}")))?;
                data.push(S::cast(v));
            }
        }
        Matrix::from_vec(rows, cols, data)
    }

    /// FNV-1a over the f64 bit patterns (plus dimensions); used to certify
    /// that frozen weights were untouched by a training run.
    pub fn bits_hash(&self) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        let mut feed = |bytes: &[u8]| {
            for &b in bytes {
                h ^= b as u64;
                h = h.wrapping_mul(0x100000001b3);
            }
        };
        feed(&(self.rows as u64).to_le_bytes());
        feed(&(self.cols as u64).to_le_bytes());
        for v in &self.data {
            feed(&v.to_f64().expect("scalar fits f64").to_bits().to_le_bytes());
        }
        h
    }
}
