use crate::error::{Error, Result};

/// Scores at or below this value carry exactly zero softmax mass.
///
/// Masked entries are stored as `f64::NEG_INFINITY`; the threshold also
/// catches scores that were pushed toward `f64::MIN` by finite arithmetic.
pub const MASK_THRESHOLD: f64 = -1e300;

/// Row-major dense tensor with an optional gradient slot.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::shape("Tensor::new", &shape, &[data.len()]));
        }
        Ok(Self {
            shape,
            data,
            grad: None,
            requires_grad: false,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; n],
            grad: None,
            requires_grad: false,
        }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let mut t = Self::zeros(shape);
        t.data.fill(value);
        t
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![],
            data: vec![value],
            grad: None,
            requires_grad: false,
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
            grad: None,
            requires_grad: false,
        }
    }

    /// Builds a 2-D tensor from equal-length rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|row| row.len() != c) {
            return Err(Error::contract("from_rows: ragged rows"));
        }
        Self::new(vec![r, c], rows.concat())
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn with_requires_grad(mut self, flag: bool) -> Self {
        self.requires_grad = flag;
        self
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

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub(crate) fn set_grad(&mut self, grad: Vec<f64>) {
        debug_assert_eq!(grad.len(), self.data.len());
        self.grad = Some(grad);
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    /// Size of the last axis (1 for scalars).
    pub fn last_dim(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    /// Element `(i, j)` of a 2-D tensor.
    pub fn at(&self, i: usize, j: usize) -> f64 {
        debug_assert_eq!(self.shape.len(), 2);
        self.data[i * self.shape[1] + j]
    }

    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn reshaped(mut self, shape: Vec<usize>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::shape("reshape", &self.shape, &shape));
        }
        self.shape = shape;
        self.grad = None;
        Ok(self)
    }

    /// Rows of a 2-D tensor as owned vectors.
    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        let c = self.last_dim();
        self.data.chunks(c.max(1)).map(<[f64]>::to_vec).collect()
    }
}

/// Matrix product of `a: [m, k]` and `b: [k, n]`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape.len() != 2 || b.shape.len() != 2 || a.shape[1] != b.shape[0] {
        return Err(Error::shape("matmul", &a.shape, &b.shape));
    }
    let (m, k, n) = (a.shape[0], a.shape[1], b.shape[1]);
    Tensor::new(vec![m, n], kernels::matmul(&a.data, &b.data, m, k, n))
}

/// Softmax over the last axis; masked entries get exactly zero mass.
pub fn softmax_lastdim(x: &Tensor) -> Tensor {
    let n = x.last_dim();
    let mut out = x.clone();
    out.grad = None;
    out.requires_grad = false;
    if n > 0 {
        for row in out.data.chunks_mut(n) {
            kernels::softmax_row(row);
        }
    }
    out
}

/// Per-row standardization over the last axis followed by `gamma * x + beta`.
pub fn layer_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
    let d = x.last_dim();
    if gamma.shape != [d] || beta.shape != [d] {
        return Err(Error::shape("layer_norm", &x.shape, &gamma.shape));
    }
    let (y, _, _) = kernels::layer_norm(&x.data, &gamma.data, &beta.data, d, eps);
    Tensor::new(x.shape.clone(), y)
}

pub mod kernels {
    use super::MASK_THRESHOLD;

    /// `[m, k] x [k, n]`.
    pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let av = a[i * k + p];
                if av == 0.0 {
                    continue;
                }
                let brow = &b[p * n..(p + 1) * n];
                for (o, bv) in row.iter_mut().zip(brow) {
                    *o += av * bv;
                }
            }
        }
        out
    }

    /// `[m, k] x [n, k]^T`.
    pub fn matmul_bt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let ar = &a[i * k..(i + 1) * k];
            for j in 0..n {
                let br = &b[j * k..(j + 1) * k];
                out[i * n + j] = ar.iter().zip(br).map(|(x, y)| x * y).sum();
            }
        }
        out
    }

    /// `[k, m]^T x [k, n]`.
    pub fn matmul_at(a: &[f64], b: &[f64], k: usize, m: usize, n: usize) -> Vec<f64> {
        let mut out = vec![0.0; m * n];
        for p in 0..k {
            let arow = &a[p * m..(p + 1) * m];
            let brow = &b[p * n..(p + 1) * n];
            for (i, &av) in arow.iter().enumerate() {
                if av == 0.0 {
                    continue;
                }
                let orow = &mut out[i * n..(i + 1) * n];
                for (o, bv) in orow.iter_mut().zip(brow) {
                    *o += av * bv;
                }
            }
        }
        out
    }

    pub fn softmax_row(row: &mut [f64]) {
        let max = row
            .iter()
            .copied()
            .filter(|v| *v > MASK_THRESHOLD)
            .fold(f64::NEG_INFINITY, f64::max);
        if max == f64::NEG_INFINITY {
            row.fill(0.0);
            return;
        }
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = if *v > MASK_THRESHOLD { (*v - max).exp() } else { 0.0 };
            total += *v;
        }
        for v in row.iter_mut() {
            *v /= total;
        }
    }

    /// Returns `(y, xhat, inv_std)`.
    pub fn layer_norm(
        x: &[f64],
        gamma: &[f64],
        beta: &[f64],
        d: usize,
        eps: f64,
    ) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let rows = x.len() / d.max(1);
        let mut y = vec![0.0; x.len()];
        let mut xhat = vec![0.0; x.len()];
        let mut inv_std = vec![0.0; rows];
        for r in 0..rows {
            let xs = &x[r * d..(r + 1) * d];
            let mean = xs.iter().sum::<f64>() / d as f64;
            let var = xs.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let denom = (var + eps).sqrt();
            // zero variance with eps = 0 collapses the row onto beta
            let inv = if denom > 0.0 { 1.0 / denom } else { 0.0 };
            inv_std[r] = inv;
            for c in 0..d {
                let h = (xs[c] - mean) * inv;
                xhat[r * d + c] = h;
                y[r * d + c] = gamma[c] * h + beta[c];
            }
        }
        (y, xhat, inv_std)
    }

    pub fn gelu(x: f64) -> f64 {
        0.5 * x * (1.0 + statrs::function::erf::erf(x / std::f64::consts::SQRT_2))
    }

    pub fn gelu_grad(x: f64) -> f64 {
        let cdf = 0.5 * (1.0 + statrs::function::erf::erf(x / std::f64::consts::SQRT_2));
        let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
        cdf + x * pdf
    }
}
