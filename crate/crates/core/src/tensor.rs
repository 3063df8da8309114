//! Dense row-major tensors of `f64` and the numeric kernels shared by the
//! tape and the value-only helpers.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.iter().product::<usize>() != data.len() || shape.contains(&0) {
            return Err(Error::BadTensor {
                shape,
                len: data.len(),
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    /// A matrix with no rows, used for empty datasets.
    pub fn empty_rows(cols: usize) -> Self {
        Tensor {
            shape: vec![0, cols],
            data: Vec::new(),
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    /// Builds a matrix from equally sized rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Data("ragged rows".into()));
        }
        let data = rows.iter().flatten().copied().collect();
        Tensor::new(vec![rows.len(), cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Leading extent; the batch dimension for matrices.
    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    /// Trailing extent; a vector reports its length.
    pub fn cols(&self) -> usize {
        *self.shape.last().unwrap_or(&1)
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols() + c]
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn fill(&mut self, value: f64) {
        self.data.iter_mut().for_each(|v| *v = value);
    }

    pub(crate) fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.data.len(), other.data.len());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    /// Selects rows by index, preserving the trailing shape.
    pub fn select_rows(&self, indices: &[usize]) -> Tensor {
        debug_assert!(self.shape.len() == 2);
        let c = self.cols();
        let mut data = Vec::with_capacity(indices.len() * c);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        let mut shape = self.shape.clone();
        shape[0] = indices.len();
        Tensor { shape, data }
    }

    pub(crate) fn matrix_dims(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            _ => Err(Error::ShapeMismatch {
                op,
                left: self.shape.clone(),
                right: vec![0, 0],
            }),
        }
    }
}

/// `out[n, o] = x[n, i] · w[i, o] + b[o]`.
///
/// The product is accumulated from zero over the inner index in order and the
/// bias is added last.
pub(crate) fn affine_kernel(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (n, din) = x.matrix_dims("affine")?;
    let (win, dout) = w.matrix_dims("affine")?;
    if win != din {
        return Err(Error::ShapeMismatch {
            op: "affine",
            left: x.shape.clone(),
            right: w.shape.clone(),
        });
    }
    if b.len() != dout {
        return Err(Error::ShapeMismatch {
            op: "affine bias",
            left: w.shape.clone(),
            right: b.shape.clone(),
        });
    }
    let mut out = vec![0.0; n * dout];
    for r in 0..n {
        let xr = &x.data[r * din..(r + 1) * din];
        let or = &mut out[r * dout..(r + 1) * dout];
        for (k, &xv) in xr.iter().enumerate() {
            let wr = &w.data[k * dout..(k + 1) * dout];
            for (o, &wv) in or.iter_mut().zip(wr) {
                *o += xv * wv;
            }
        }
        for (o, &bv) in or.iter_mut().zip(&b.data) {
            *o += bv;
        }
    }
    Ok(Tensor {
        shape: vec![n, dout],
        data: out,
    })
}

/// Gradients of the affine map given the upstream gradient `g[n, o]`.
/// Returns `(dx, dw, db)`.
pub(crate) fn affine_backward(x: &Tensor, w: &Tensor, g: &Tensor) -> (Tensor, Tensor, Tensor) {
    let (n, din) = (x.shape[0], x.shape[1]);
    let dout = w.shape[1];
    let mut dx = vec![0.0; n * din];
    let mut dw = vec![0.0; din * dout];
    let mut db = vec![0.0; dout];
    for r in 0..n {
        let gr = &g.data[r * dout..(r + 1) * dout];
        let xr = &x.data[r * din..(r + 1) * din];
        let dxr = &mut dx[r * din..(r + 1) * din];
        for k in 0..din {
            let wr = &w.data[k * dout..(k + 1) * dout];
            let dwr = &mut dw[k * dout..(k + 1) * dout];
            let xv = xr[k];
            let mut acc = 0.0;
            for o in 0..dout {
                acc += gr[o] * wr[o];
                dwr[o] += xv * gr[o];
            }
            dxr[k] = acc;
        }
        for (d, &gv) in db.iter_mut().zip(gr) {
            *d += gv;
        }
    }
    (
        Tensor {
            shape: x.shape.clone(),
            data: dx,
        },
        Tensor {
            shape: w.shape.clone(),
            data: dw,
        },
        Tensor {
            shape: vec![dout],
            data: db,
        },
    )
}

pub(crate) fn relu_scalar(v: f64) -> f64 {
    if v > 0.0 {
        v
    } else {
        0.0
    }
}

pub(crate) fn sigmoid_scalar(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// Row-wise softmax probabilities and the mean cross-entropy against
/// one-hot targets.
pub(crate) fn softmax_xent_kernel(logits: &Tensor, targets: &Tensor) -> Result<(f64, Tensor)> {
    let (n, c) = logits.matrix_dims("softmax_cross_entropy")?;
    if targets.shape != logits.shape {
        return Err(Error::ShapeMismatch {
            op: "softmax_cross_entropy",
            left: logits.shape.clone(),
            right: targets.shape.clone(),
        });
    }
    let mut probs = vec![0.0; n * c];
    let mut loss = 0.0;
    for r in 0..n {
        let t = targets.row(r);
        let mut hot = None;
        for (j, &v) in t.iter().enumerate() {
            if v == 1.0 && hot.is_none() {
                hot = Some(j);
            } else if v != 0.0 {
                return Err(Error::InvalidTarget { row: r });
            }
        }
        let Some(hot) = hot else {
            return Err(Error::InvalidTarget { row: r });
        };
        let l = logits.row(r);
        let max = l.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = l.iter().map(|&v| (v - max).exp()).sum();
        let log_z = max + sum.ln();
        for j in 0..c {
            probs[r * c + j] = (l[j] - log_z).exp();
        }
        loss += log_z - l[hot];
    }
    Ok((
        loss / n as f64,
        Tensor {
            shape: vec![n, c],
            data: probs,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_inconsistent_shape() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::new(vec![0], vec![]).is_err());
        assert!(Tensor::new(vec![2, 3], vec![0.0; 6]).is_ok());
    }

    #[test]
    fn select_rows_keeps_order() {
        let t = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0]]).unwrap();
        let s = t.select_rows(&[2, 0]);
        assert_eq!(s.shape(), &[2, 2]);
        assert_eq!(s.data(), &[5.0, 6.0, 1.0, 2.0]);
    }

    #[test]
    fn sigmoid_is_stable_at_extremes() {
        assert_eq!(sigmoid_scalar(0.0), 0.5);
        assert!(sigmoid_scalar(-800.0) >= 0.0);
        assert_eq!(sigmoid_scalar(800.0), 1.0);
    }
}
