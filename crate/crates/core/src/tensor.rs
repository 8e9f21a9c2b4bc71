//! Dense row-major tensors for convolution weights and feature maps.
//!
//! Weights are laid out `(o, i, h, w)` with `w` innermost; feature maps are
//! `(c, h, w)`. Slices returned by this module are owned copies.

use crate::error::{Error, Result};

/// Rank-4 tensor, typically a convolution kernel `(n_o, n_i, k_h, k_w)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor4 {
    shape: [usize; 4],
    data: Vec<f64>,
}

/// Rank-3 tensor, a single feature map `(c, h, w)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor3 {
    shape: [usize; 3],
    data: Vec<f64>,
}

/// Owned row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

fn check_len(expected: usize, actual: usize, what: &str) -> Result<()> {
    if expected != actual {
        return Err(Error::Shape(format!(
            "{what} expects {expected} elements, got {actual}"
        )));
    }
    Ok(())
}

impl Tensor4 {
    pub fn new(shape: [usize; 4], data: Vec<f64>) -> Result<Self> {
        check_len(
            shape.iter().product(),
            data.len(),
            &format!("tensor {shape:?}"),
        )?;
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: [usize; 4]) -> Self {
        Self {
            shape,
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn from_fn(shape: [usize; 4], mut f: impl FnMut([usize; 4]) -> f64) -> Self {
        let mut data = Vec::with_capacity(shape.iter().product());
        for a in 0..shape[0] {
            for b in 0..shape[1] {
                for c in 0..shape[2] {
                    for d in 0..shape[3] {
                        data.push(f([a, b, c, d]));
                    }
                }
            }
        }
        Self { shape, data }
    }

    pub fn shape(&self) -> [usize; 4] {
        self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn offset(&self, idx: [usize; 4]) -> usize {
        let [_, d1, d2, d3] = self.shape;
        ((idx[0] * d1 + idx[1]) * d2 + idx[2]) * d3 + idx[3]
    }

    #[inline]
    pub fn get(&self, idx: [usize; 4]) -> f64 {
        self.data[self.offset(idx)]
    }

    #[inline]
    pub fn set(&mut self, idx: [usize; 4], value: f64) {
        let off = self.offset(idx);
        self.data[off] = value;
    }

    pub fn scale(&self, factor: f64) -> Self {
        Self {
            shape: self.shape,
            data: self.data.iter().map(|v| v * factor).collect(),
        }
    }

    /// Elementwise difference `self - other`.
    pub fn sub(&self, other: &Tensor4) -> Result<Tensor4> {
        if self.shape != other.shape {
            return Err(Error::Shape(format!(
                "cannot subtract {:?} from {:?}",
                other.shape, self.shape
            )));
        }
        Ok(Self {
            shape: self.shape,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| a - b)
                .collect(),
        })
    }

    /// Returns the first non-finite element, if any.
    pub fn ensure_finite(&self) -> Result<()> {
        match self.data.iter().position(|v| !v.is_finite()) {
            None => Ok(()),
            Some(pos) => {
                let [_, d1, d2, d3] = self.shape;
                let idx = [
                    pos / (d1 * d2 * d3),
                    pos / (d2 * d3) % d1,
                    pos / d3 % d2,
                    pos % d3,
                ];
                Err(Error::NonFinite {
                    location: format!("element {idx:?}"),
                    value: self.data[pos],
                })
            }
        }
    }

    /// Slice `W[:, i, :, :]` reshaped to an `n_o × (k_h·k_w)` matrix.
    pub fn slice_input_channel(&self, i: usize) -> Result<Matrix> {
        let [n_o, n_i, k_h, k_w] = self.shape;
        if i >= n_i {
            return Err(Error::IndexOutOfBounds {
                axis: "input channel",
                index: i,
                bound: n_i,
            });
        }
        let area = k_h * k_w;
        let mut data = Vec::with_capacity(n_o * area);
        for o in 0..n_o {
            let start = self.offset([o, i, 0, 0]);
            data.extend_from_slice(&self.data[start..start + area]);
        }
        Matrix::new(n_o, area, data)
    }

    /// Slice `W[o, :, :, :]` reshaped to an `n_i × (k_h·k_w)` matrix.
    pub fn slice_output_channel(&self, o: usize) -> Result<Matrix> {
        let [n_o, n_i, k_h, k_w] = self.shape;
        if o >= n_o {
            return Err(Error::IndexOutOfBounds {
                axis: "output channel",
                index: o,
                bound: n_o,
            });
        }
        let len = n_i * k_h * k_w;
        let start = self.offset([o, 0, 0, 0]);
        Matrix::new(n_i, k_h * k_w, self.data[start..start + len].to_vec())
    }

    /// Inverse of [`Tensor4::slice_input_channel`] over all `n_i` slices.
    pub fn from_input_channel_slices(slices: &[Matrix], k_h: usize, k_w: usize) -> Result<Self> {
        let n_i = slices.len();
        let n_o = slices.first().map_or(0, Matrix::rows);
        let mut out = Tensor4::zeros([n_o, n_i, k_h, k_w]);
        for (i, s) in slices.iter().enumerate() {
            if s.rows() != n_o || s.cols() != k_h * k_w {
                return Err(Error::Shape(format!(
                    "slice {i} is {}x{}, expected {n_o}x{}",
                    s.rows(),
                    s.cols(),
                    k_h * k_w
                )));
            }
            for o in 0..n_o {
                let start = out.offset([o, i, 0, 0]);
                out.data[start..start + k_h * k_w].copy_from_slice(s.row(o));
            }
        }
        Ok(out)
    }

    /// Inverse of [`Tensor4::slice_output_channel`] over all `n_o` slices.
    pub fn from_output_channel_slices(slices: &[Matrix], k_h: usize, k_w: usize) -> Result<Self> {
        let n_o = slices.len();
        let n_i = slices.first().map_or(0, Matrix::rows);
        let mut data = Vec::with_capacity(n_o * n_i * k_h * k_w);
        for (o, s) in slices.iter().enumerate() {
            if s.rows() != n_i || s.cols() != k_h * k_w {
                return Err(Error::Shape(format!(
                    "slice {o} is {}x{}, expected {n_i}x{}",
                    s.rows(),
                    s.cols(),
                    k_h * k_w
                )));
            }
            data.extend_from_slice(s.data());
        }
        Tensor4::new([n_o, n_i, k_h, k_w], data)
    }
}

impl Tensor3 {
    pub fn new(shape: [usize; 3], data: Vec<f64>) -> Result<Self> {
        check_len(
            shape.iter().product(),
            data.len(),
            &format!("tensor {shape:?}"),
        )?;
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: [usize; 3]) -> Self {
        Self {
            shape,
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }

    pub fn channels(&self) -> usize {
        self.shape[0]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, c: usize, h: usize, w: usize) -> f64 {
        self.data[(c * self.shape[1] + h) * self.shape[2] + w]
    }

    #[inline]
    pub fn set(&mut self, c: usize, h: usize, w: usize, value: f64) {
        let off = (c * self.shape[1] + h) * self.shape[2] + w;
        self.data[off] = value;
    }

    /// Adds `other` elementwise in place.
    pub fn add_assign(&mut self, other: &Tensor3) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::Shape(format!(
                "cannot add {:?} to {:?}",
                other.shape, self.shape
            )));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn sub(&self, other: &Tensor3) -> Result<Tensor3> {
        if self.shape != other.shape {
            return Err(Error::Shape(format!(
                "cannot subtract {:?} from {:?}",
                other.shape, self.shape
            )));
        }
        Ok(Self {
            shape: self.shape,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| a - b)
                .collect(),
        })
    }
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        check_len(rows * cols, data.len(), &format!("{rows}x{cols} matrix"))?;
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for k in 0..n {
            m.data[k * n + k] = 1.0;
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, value: f64) {
        self.data[r * self.cols + c] = value;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn column(&self, c: usize) -> Vec<f64> {
        (0..self.rows).map(|r| self.get(r, c)).collect()
    }

    pub fn transpose(&self) -> Matrix {
        let mut t = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                t.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        t
    }

    pub fn matmul(&self, rhs: &Matrix) -> Result<Matrix> {
        if self.cols != rhs.rows {
            return Err(Error::Shape(format!(
                "cannot multiply {}x{} by {}x{}",
                self.rows, self.cols, rhs.rows, rhs.cols
            )));
        }
        let mut out = Matrix::zeros(self.rows, rhs.cols);
        for r in 0..self.rows {
            for k in 0..self.cols {
                let a = self.data[r * self.cols + k];
                if a == 0.0 {
                    continue;
                }
                let rhs_row = rhs.row(k);
                let out_row = &mut out.data[r * rhs.cols..(r + 1) * rhs.cols];
                for (o, b) in out_row.iter_mut().zip(rhs_row) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        if (self.rows, self.cols) != (other.rows, other.cols) {
            return Err(Error::Shape(format!(
                "cannot subtract {}x{} from {}x{}",
                other.rows, other.cols, self.rows, self.cols
            )));
        }
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| a - b)
                .collect(),
        })
    }
}

/// Frobenius norm over all elements.
pub trait FrobeniusNorm {
    fn frobenius_norm(&self) -> f64;
}

pub(crate) fn l2(data: &[f64]) -> f64 {
    data.iter().map(|v| v * v).sum::<f64>().sqrt()
}

impl FrobeniusNorm for Tensor4 {
    fn frobenius_norm(&self) -> f64 {
        l2(&self.data)
    }
}

impl FrobeniusNorm for Tensor3 {
    fn frobenius_norm(&self) -> f64 {
        l2(&self.data)
    }
}

impl FrobeniusNorm for Matrix {
    fn frobenius_norm(&self) -> f64 {
        l2(&self.data)
    }
}

/// `‖a - b‖_F / ‖b‖_F`, falling back to the absolute error when `b` is zero.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let diff = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt();
    let denom = l2(b);
    if denom == 0.0 {
        diff
    } else {
        diff / denom
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lcg_tensor(shape: [usize; 4], seed: u64) -> Tensor4 {
        let mut s = seed;
        Tensor4::from_fn(shape, |_| {
            s = s
                .wrapping_mul(6364136223846793005)
                .wrapping_add(1442695040888963407);
            ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
        })
    }

    #[test]
    fn slice_input_channel_trivial() {
        let w = Tensor4::new([2, 1, 1, 1], vec![3.0, 5.0]).unwrap();
        let m = w.slice_input_channel(0).unwrap();
        assert_eq!((m.rows(), m.cols()), (2, 1));
        assert_eq!(m.data(), &[3.0, 5.0]);

        let mut w = Tensor4::zeros([1, 2, 2, 2]);
        for (k, v) in [1.0, 2.0, 3.0, 4.0].into_iter().enumerate() {
            w.set([0, 1, k / 2, k % 2], v);
        }
        let m = w.slice_input_channel(1).unwrap();
        assert_eq!((m.rows(), m.cols()), (1, 4));
        assert_eq!(m.data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn slice_output_channel_trivial() {
        let w = Tensor4::new([1, 2, 1, 1], vec![7.0, 9.0]).unwrap();
        let m = w.slice_output_channel(0).unwrap();
        assert_eq!((m.rows(), m.cols()), (2, 1));
        assert_eq!(m.data(), &[7.0, 9.0]);

        let mut w = Tensor4::zeros([2, 1, 2, 1]);
        w.set([1, 0, 0, 0], 4.0);
        w.set([1, 0, 1, 0], 6.0);
        let m = w.slice_output_channel(1).unwrap();
        assert_eq!((m.rows(), m.cols()), (1, 2));
        assert_eq!(m.data(), &[4.0, 6.0]);
    }

    #[test]
    fn slice_entry_layout() {
        let w = lcg_tensor([3, 2, 2, 3], 5);
        let m = w.slice_input_channel(1).unwrap();
        for o in 0..3 {
            for h in 0..2 {
                for x in 0..3 {
                    assert_eq!(m.get(o, h * 3 + x), w.get([o, 1, h, x]));
                }
            }
        }
    }

    #[test]
    fn slice_norms_match_direct_summation() {
        let w = lcg_tensor([4, 3, 3, 3], 11);
        let mut direct = 0.0;
        for o in 0..4 {
            for h in 0..3 {
                for x in 0..3 {
                    direct += w.get([o, 2, h, x]).powi(2);
                }
            }
        }
        let n = w.slice_input_channel(2).unwrap().frobenius_norm();
        assert!((n - direct.sqrt()).abs() <= 1e-14 * direct.sqrt());

        let mut direct = 0.0;
        for i in 0..3 {
            for h in 0..3 {
                for x in 0..3 {
                    direct += w.get([0, i, h, x]).powi(2);
                }
            }
        }
        let n = w.slice_output_channel(0).unwrap().frobenius_norm();
        assert!((n - direct.sqrt()).abs() <= 1e-14 * direct.sqrt());
    }

    #[test]
    fn out_of_bounds_slice() {
        let w = Tensor4::zeros([2, 3, 1, 1]);
        match w.slice_input_channel(3) {
            Err(Error::IndexOutOfBounds {
                index: 3, bound: 3, ..
            }) => {}
            other => panic!("unexpected {other:?}"),
        }
        match w.slice_output_channel(7) {
            Err(Error::IndexOutOfBounds {
                index: 7, bound: 2, ..
            }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn frobenius_examples() {
        assert_eq!(Tensor4::zeros([2, 2, 2, 2]).frobenius_norm(), 0.0);
        assert_eq!(Matrix::new(1, 1, vec![-3.0]).unwrap().frobenius_norm(), 3.0);
        let t = Tensor4::new([1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(t.frobenius_norm(), 30f64.sqrt());
        let t3 = Tensor3::new([1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(t3.frobenius_norm(), 30f64.sqrt());
    }

    #[test]
    fn length_is_checked() {
        assert!(Tensor4::new([2, 2, 1, 1], vec![0.0; 3]).is_err());
        assert!(Tensor3::new([1, 2, 2], vec![0.0; 5]).is_err());
        assert!(Matrix::new(2, 2, vec![0.0; 3]).is_err());
    }

    #[test]
    fn ensure_finite_reports_index() {
        let mut t = Tensor4::zeros([2, 2, 2, 2]);
        t.set([1, 0, 1, 1], f64::NAN);
        let err = t.ensure_finite().unwrap_err().to_string();
        assert!(err.contains("[1, 0, 1, 1]"), "{err}");
    }

    #[test]
    fn transpose_and_matmul() {
        let a = Matrix::new(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let g = a.transpose().matmul(&a).unwrap();
        assert_eq!(
            g.data(),
            &[17.0, 22.0, 27.0, 22.0, 29.0, 36.0, 27.0, 36.0, 45.0]
        );
    }
}
