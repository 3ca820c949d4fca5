use std::fmt;

use super::dense::{kernels, Tensor};
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Backward rule for operations defined outside this module.
///
/// `inputs` are the recorded input values in the order they were passed to
/// [`Tape::custom`]. Returns one gradient buffer per input (`None` when the
/// input receives no gradient).
pub trait CustomBackward: Send + Sync {
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad_out: &[f64]) -> Vec<Option<Vec<f64>>>;
}

enum Op {
    Leaf,
    /// `a: [..., k] x w: [k, n]`
    MatMul(Var, Var),
    /// `[B, m, k] x [B, k, n]`, or `[B, m, k] x [B, n, k]^T` when transposed.
    BatchMatMul { a: Var, b: Var, trans_b: bool },
    Add(Var, Var),
    AddBias(Var, Var),
    /// Second operand broadcast over the leading axes of the first.
    AddBroadcast(Var, Var),
    Mul(Var, Var),
    MulConst(Var, Vec<f64>),
    Scale(Var, f64),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Gelu(Var),
    Reshape(Var),
    ConcatLast(Vec<Var>),
    Sum(Var),
    Mse(Var, Vec<f64>),
    RowAffine { x: Var, scale: Vec<f64> },
    /// Value is a function of a scalar node; stores d(value)/d(scalar).
    Parametric { scalar: Var, dvalue: Vec<f64> },
    Custom { inputs: Vec<Var>, rule: Box<dyn CustomBackward> },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Records tensor operations in topological order and replays them backward.
///
/// A tape is single-owner; build one per forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl fmt::Debug for Tape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tape").field("nodes", &self.nodes.len()).finish()
    }
}

fn check_values(t: &Tensor) {
    debug_assert!(
        t.data().iter().all(|v| !v.is_nan() && *v != f64::INFINITY),
        "non-finite value recorded on tape"
    );
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        check_values(&value);
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    /// Records a leaf; it receives a gradient iff `requires_grad` is set.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        let needs = value.requires_grad();
        self.push(value, Op::Leaf, needs)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value.with_requires_grad(false))
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value.with_requires_grad(true))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Gradient accumulated by the last [`Tape::backward`] call.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad()
    }

    pub fn matmul(&mut self, a: Var, w: Var) -> Result<Var> {
        let (sa, sw) = (self.shape(a), self.shape(w));
        if sa.is_empty() || sw.len() != 2 || *sa.last().unwrap() != sw[0] {
            return Err(Error::shape("matmul", sa, sw));
        }
        let (k, n) = (sw[0], sw[1]);
        let m = self.value(a).len() / k.max(1);
        let mut shape = sa.to_vec();
        *shape.last_mut().unwrap() = n;
        let data = kernels::matmul(self.value(a).data(), self.value(w).data(), m, k, n);
        let needs = self.needs(&[a, w]);
        Ok(self.push(Tensor::new(shape, data)?, Op::MatMul(a, w), needs))
    }

    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let ok = sa.len() == 3
            && sb.len() == 3
            && sa[0] == sb[0]
            && if trans_b { sa[2] == sb[2] } else { sa[2] == sb[1] };
        if !ok {
            return Err(Error::shape("bmm", &sa, &sb));
        }
        let (batch, m, k) = (sa[0], sa[1], sa[2]);
        let n = if trans_b { sb[1] } else { sb[2] };
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        let mut data = Vec::with_capacity(batch * m * n);
        for i in 0..batch {
            let ab = &ad[i * m * k..(i + 1) * m * k];
            let bb = &bd[i * k * n..(i + 1) * k * n];
            if trans_b {
                data.extend(kernels::matmul_bt(ab, bb, m, k, n));
            } else {
                data.extend(kernels::matmul(ab, bb, m, k, n));
            }
        }
        let needs = self.needs(&[a, b]);
        Ok(self.push(
            Tensor::new(vec![batch, m, n], data)?,
            Op::BatchMatMul { a, b, trans_b },
            needs,
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape("add", self.shape(a), self.shape(b)));
        }
        let data = zip_map(self.value(a).data(), self.value(b).data(), |x, y| x + y);
        let needs = self.needs(&[a, b]);
        let shape = self.shape(a).to_vec();
        Ok(self.push(Tensor::new(shape, data)?, Op::Add(a, b), needs))
    }

    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let n = self.value(x).last_dim();
        if self.shape(bias) != [n] {
            return Err(Error::shape("add_bias", self.shape(x), self.shape(bias)));
        }
        let b = self.value(bias).data().to_vec();
        let mut out = self.value(x).clone().with_requires_grad(false);
        out.clear_grad();
        for row in out.data_mut().chunks_mut(n) {
            for (v, bv) in row.iter_mut().zip(&b) {
                *v += bv;
            }
        }
        let needs = self.needs(&[x, bias]);
        Ok(self.push(out, Op::AddBias(x, bias), needs))
    }

    /// Adds `m` to every trailing block of `x` (e.g. `[P, P]` onto `[B, P, P]`).
    pub fn add_broadcast(&mut self, x: Var, m: Var) -> Result<Var> {
        let (sx, sm) = (self.shape(x), self.shape(m));
        if sm.len() > sx.len() || sx[sx.len() - sm.len()..] != *sm {
            return Err(Error::shape("add_broadcast", sx, sm));
        }
        let block = self.value(m).len();
        let md = self.value(m).data().to_vec();
        let mut out = self.value(x).clone().with_requires_grad(false);
        out.clear_grad();
        if block > 0 {
            for chunk in out.data_mut().chunks_mut(block) {
                for (v, mv) in chunk.iter_mut().zip(&md) {
                    *v += mv;
                }
            }
        }
        let needs = self.needs(&[x, m]);
        Ok(self.push(out, Op::AddBroadcast(x, m), needs))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape("mul", self.shape(a), self.shape(b)));
        }
        let data = zip_map(self.value(a).data(), self.value(b).data(), |x, y| x * y);
        let needs = self.needs(&[a, b]);
        let shape = self.shape(a).to_vec();
        Ok(self.push(Tensor::new(shape, data)?, Op::Mul(a, b), needs))
    }

    /// Elementwise product with fixed factors (dropout masks).
    pub fn mul_const(&mut self, x: Var, factors: Vec<f64>) -> Result<Var> {
        if factors.len() != self.value(x).len() {
            return Err(Error::shape("mul_const", self.shape(x), &[factors.len()]));
        }
        let data = zip_map(self.value(x).data(), &factors, |a, b| a * b);
        let needs = self.needs(&[x]);
        let shape = self.shape(x).to_vec();
        Ok(self.push(Tensor::new(shape, data)?, Op::MulConst(x, factors), needs))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let mut out = self.value(x).clone().with_requires_grad(false);
        out.clear_grad();
        out.data_mut().iter_mut().for_each(|v| *v *= c);
        let needs = self.needs(&[x]);
        self.push(out, Op::Scale(x, c), needs)
    }

    pub fn softmax(&mut self, x: Var) -> Var {
        let out = super::dense::softmax_lastdim(self.value(x));
        let needs = self.needs(&[x]);
        self.push(out, Op::Softmax(x), needs)
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let d = self.value(x).last_dim();
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(Error::shape("layer_norm", self.shape(x), self.shape(gamma)));
        }
        let (y, xhat, inv_std) = kernels::layer_norm(
            self.value(x).data(),
            self.value(gamma).data(),
            self.value(beta).data(),
            d,
            eps,
        );
        let shape = self.shape(x).to_vec();
        let needs = self.needs(&[x, gamma, beta]);
        Ok(self.push(
            Tensor::new(shape, y)?,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            needs,
        ))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone().with_requires_grad(false);
        out.clear_grad();
        out.data_mut().iter_mut().for_each(|v| *v = kernels::gelu(*v));
        let needs = self.needs(&[x]);
        self.push(out, Op::Gelu(x), needs)
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let out = self.value(x).clone().with_requires_grad(false).reshaped(shape)?;
        let needs = self.needs(&[x]);
        Ok(self.push(out, Op::Reshape(x), needs))
    }

    /// Concatenates along the last axis; leading axes must agree.
    pub fn concat_last(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Empty("concat_last with no inputs".into()))?;
        let lead = &self.shape(*first)[..self.shape(*first).len() - 1];
        let rows: usize = lead.iter().product();
        let mut width = 0;
        for p in parts {
            let s = self.shape(*p);
            if s.len() != lead.len() + 1 || s[..lead.len()] != *lead {
                return Err(Error::shape("concat_last", self.shape(*first), s));
            }
            width += s[s.len() - 1];
        }
        let mut data = vec![0.0; rows * width];
        let mut offset = 0;
        for p in parts {
            let w = self.value(*p).last_dim();
            let src = self.value(*p).data();
            for r in 0..rows {
                data[r * width + offset..r * width + offset + w].copy_from_slice(&src[r * w..(r + 1) * w]);
            }
            offset += w;
        }
        let mut shape = lead.to_vec();
        shape.push(width);
        let needs = self.needs(parts);
        Ok(self.push(Tensor::new(shape, data)?, Op::ConcatLast(parts.to_vec()), needs))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let needs = self.needs(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), needs)
    }

    /// Mean squared error against a fixed target.
    pub fn mse(&mut self, pred: Var, target: &Tensor) -> Result<Var> {
        if self.shape(pred) != target.shape() {
            return Err(Error::shape("mse", self.shape(pred), target.shape()));
        }
        let n = target.len().max(1) as f64;
        let v = self
            .value(pred)
            .data()
            .iter()
            .zip(target.data())
            .map(|(p, t)| (p - t) * (p - t))
            .sum::<f64>()
            / n;
        let needs = self.needs(&[pred]);
        Ok(self.push(Tensor::scalar(v), Op::Mse(pred, target.data().to_vec()), needs))
    }

    /// `y[r, :] = x[r, :] * scale[r] + shift[r]` for a 2-D `x` with fixed coefficients.
    pub fn row_affine(&mut self, x: Var, scale: Vec<f64>, shift: Vec<f64>) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 || scale.len() != s[0] || shift.len() != s[0] {
            return Err(Error::shape("row_affine", &s, &[scale.len(), shift.len()]));
        }
        let mut out = self.value(x).clone().with_requires_grad(false);
        out.clear_grad();
        for (r, row) in out.data_mut().chunks_mut(s[1].max(1)).enumerate() {
            row.iter_mut().for_each(|v| *v = *v * scale[r] + shift[r]);
        }
        let needs = self.needs(&[x]);
        Ok(self.push(out, Op::RowAffine { x, scale }, needs))
    }

    /// Records a tensor computed from a scalar node, with its derivative.
    pub fn parametric(&mut self, scalar: Var, value: Tensor, dvalue: Vec<f64>) -> Result<Var> {
        if self.value(scalar).len() != 1 || dvalue.len() != value.len() {
            return Err(Error::shape("parametric", self.shape(scalar), value.shape()));
        }
        let needs = self.needs(&[scalar]);
        Ok(self.push(value.with_requires_grad(false), Op::Parametric { scalar, dvalue }, needs))
    }

    /// Records an operation whose forward value was computed by the caller.
    pub fn custom(&mut self, inputs: &[Var], value: Tensor, rule: Box<dyn CustomBackward>) -> Var {
        let needs = self.needs(inputs);
        self.push(
            value.with_requires_grad(false),
            Op::Custom {
                inputs: inputs.to_vec(),
                rule,
            },
            needs,
        )
    }

    /// Reverse sweep from a scalar `loss`.
    ///
    /// Every node that depends on a `requires_grad` leaf gets its gradient
    /// slot filled; fan-out contributions accumulate additively.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        for node in &mut self.nodes {
            node.value.clear_grad();
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            if !self.nodes[idx].needs_grad {
                continue;
            }
            for (target, contrib) in self.backward_node(idx, &g) {
                if !self.nodes[target.0].needs_grad {
                    continue;
                }
                match &mut grads[target.0] {
                    Some(acc) => acc.iter_mut().zip(&contrib).for_each(|(a, c)| *a += c),
                    slot @ None => *slot = Some(contrib),
                }
            }
            self.nodes[idx].value.set_grad(g);
        }
        Ok(())
    }

    fn backward_node(&self, idx: usize, g: &[f64]) -> Vec<(Var, Vec<f64>)> {
        let node = &self.nodes[idx];
        let val = |v: Var| self.nodes[v.0].value.data();
        let wants = |v: Var| self.nodes[v.0].needs_grad;
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, w) => {
                let sw = self.shape(*w);
                let (k, n) = (sw[0], sw[1]);
                let m = self.value(*a).len() / k.max(1);
                if wants(*a) {
                    out.push((*a, kernels::matmul_bt(g, val(*w), m, n, k)));
                }
                if wants(*w) {
                    out.push((*w, kernels::matmul_at(val(*a), g, m, k, n)));
                }
            }
            Op::BatchMatMul { a, b, trans_b } => {
                let sa = self.shape(*a);
                let (batch, m, k) = (sa[0], sa[1], sa[2]);
                let n = node.value.shape()[2];
                let (ad, bd) = (val(*a), val(*b));
                let mut ga = Vec::with_capacity(ad.len());
                let mut gb = Vec::with_capacity(bd.len());
                for i in 0..batch {
                    let gi = &g[i * m * n..(i + 1) * m * n];
                    let ai = &ad[i * m * k..(i + 1) * m * k];
                    let bi = &bd[i * k * n..(i + 1) * k * n];
                    if *trans_b {
                        // c = a b^T: da = g b, db = g^T a
                        ga.extend(kernels::matmul(gi, bi, m, n, k));
                        gb.extend(kernels::matmul_at(gi, ai, m, n, k));
                    } else {
                        ga.extend(kernels::matmul_bt(gi, bi, m, n, k));
                        gb.extend(kernels::matmul_at(ai, gi, m, k, n));
                    }
                }
                if wants(*a) {
                    out.push((*a, ga));
                }
                if wants(*b) {
                    out.push((*b, gb));
                }
            }
            Op::Add(a, b) => {
                out.push((*a, g.to_vec()));
                out.push((*b, g.to_vec()));
            }
            Op::AddBias(x, b) => {
                out.push((*x, g.to_vec()));
                if wants(*b) {
                    let n = self.value(*b).len();
                    let mut gb = vec![0.0; n];
                    for row in g.chunks(n) {
                        gb.iter_mut().zip(row).for_each(|(a, c)| *a += c);
                    }
                    out.push((*b, gb));
                }
            }
            Op::AddBroadcast(x, m) => {
                out.push((*x, g.to_vec()));
                if wants(*m) {
                    let n = self.value(*m).len();
                    let mut gm = vec![0.0; n];
                    for chunk in g.chunks(n.max(1)) {
                        gm.iter_mut().zip(chunk).for_each(|(a, c)| *a += c);
                    }
                    out.push((*m, gm));
                }
            }
            Op::Mul(a, b) => {
                if wants(*a) {
                    out.push((*a, zip_map(g, val(*b), |x, y| x * y)));
                }
                if wants(*b) {
                    out.push((*b, zip_map(g, val(*a), |x, y| x * y)));
                }
            }
            Op::MulConst(x, f) => out.push((*x, zip_map(g, f, |a, b| a * b))),
            Op::Scale(x, c) => out.push((*x, g.iter().map(|v| v * c).collect())),
            Op::Softmax(x) => {
                let y = node.value.data();
                let n = node.value.last_dim();
                let mut gx = vec![0.0; y.len()];
                for ((yr, gr), or) in y.chunks(n).zip(g.chunks(n)).zip(gx.chunks_mut(n)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for ((o, yv), gv) in or.iter_mut().zip(yr).zip(gr) {
                        *o = yv * (gv - dot);
                    }
                }
                out.push((*x, gx));
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let gam = val(*gamma);
                let d = gam.len();
                let rows = xhat.len() / d.max(1);
                if wants(*x) {
                    let mut gx = vec![0.0; xhat.len()];
                    for r in 0..rows {
                        let gr = &g[r * d..(r + 1) * d];
                        let hr = &xhat[r * d..(r + 1) * d];
                        let dh: Vec<f64> = gr.iter().zip(gam).map(|(a, b)| a * b).collect();
                        let mean_dh = dh.iter().sum::<f64>() / d as f64;
                        let mean_dh_h = dh.iter().zip(hr).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                        for c in 0..d {
                            gx[r * d + c] = inv_std[r] * (dh[c] - mean_dh - hr[c] * mean_dh_h);
                        }
                    }
                    out.push((*x, gx));
                }
                if wants(*gamma) || wants(*beta) {
                    let mut gg = vec![0.0; d];
                    let mut gbeta = vec![0.0; d];
                    for r in 0..rows {
                        for c in 0..d {
                            gg[c] += g[r * d + c] * xhat[r * d + c];
                            gbeta[c] += g[r * d + c];
                        }
                    }
                    out.push((*gamma, gg));
                    out.push((*beta, gbeta));
                }
            }
            Op::Gelu(x) => out.push((*x, zip_map(g, val(*x), |a, b| a * kernels::gelu_grad(b)))),
            Op::Reshape(x) => out.push((*x, g.to_vec())),
            Op::ConcatLast(parts) => {
                let width = node.value.last_dim();
                let rows = node.value.len() / width.max(1);
                let mut offset = 0;
                for p in parts {
                    let w = self.value(*p).last_dim();
                    if wants(*p) {
                        let mut gp = vec![0.0; rows * w];
                        for r in 0..rows {
                            gp[r * w..(r + 1) * w]
                                .copy_from_slice(&g[r * width + offset..r * width + offset + w]);
                        }
                        out.push((*p, gp));
                    }
                    offset += w;
                }
            }
            Op::Sum(x) => out.push((*x, vec![g[0]; self.value(*x).len()])),
            Op::Mse(p, t) => {
                let n = t.len().max(1) as f64;
                let c = 2.0 * g[0] / n;
                out.push((*p, zip_map(val(*p), t, |a, b| c * (a - b))));
            }
            Op::RowAffine { x, scale } => {
                let w = node.value.last_dim().max(1);
                let gx = g
                    .chunks(w)
                    .zip(scale)
                    .flat_map(|(row, s)| row.iter().map(move |v| v * s))
                    .collect();
                out.push((*x, gx));
            }
            Op::Parametric { scalar, dvalue } => {
                let s = g.iter().zip(dvalue).map(|(a, b)| a * b).sum();
                out.push((*scalar, vec![s]));
            }
            Op::Custom { inputs, rule } => {
                let vals: Vec<&Tensor> = inputs.iter().map(|v| self.value(*v)).collect();
                for (v, gv) in inputs.iter().zip(rule.backward(&vals, &node.value, g)) {
                    if let Some(gv) = gv {
                        out.push((*v, gv));
                    }
                }
            }
        }
        out
    }
}

fn zip_map(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| f(*x, *y)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Checks the tape gradient of `f` at `x` against central differences.
    fn check<F>(x: Tensor, f: F) -> f64
    where
        F: Fn(&mut Tape, Var) -> Var,
    {
        let mut tape = Tape::new();
        let xv = tape.param(x.clone());
        let loss = f(&mut tape, xv);
        tape.backward(loss).unwrap();
        let analytic = tape.grad(xv).unwrap().to_vec();
        let eval = |data: Vec<f64>| {
            let mut t = Tape::new();
            let v = t.constant(Tensor::new(x.shape().to_vec(), data).unwrap());
            let l = f(&mut t, v);
            t.value(l).item()
        };
        let h = 1e-5;
        let mut worst: f64 = 0.0;
        for i in 0..x.len() {
            let mut up = x.data().to_vec();
            let mut down = x.data().to_vec();
            up[i] += h;
            down[i] -= h;
            let fd = (eval(up) - eval(down)) / (2.0 * h);
            let a = analytic[i];
            let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-6);
            worst = worst.max(rel);
        }
        worst
    }

    #[test]
    fn sum_gives_ones() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::zeros(&[2, 3]));
        let s = tape.sum(x);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0; 6]);
    }

    #[test]
    fn square_gives_two_x() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::vector(vec![1.0, -2.0, 0.5]));
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum(sq);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[2.0, -4.0, 1.0]);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::zeros(&[2]));
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let w = random(&mut rng, &[4, 3]);
        let bias = random(&mut rng, &[3]);
        let gamma = random(&mut rng, &[3]);
        let other = random(&mut rng, &[2, 5, 4]);
        let target = random(&mut rng, &[2, 5, 3]);

        type Chain<'a> = Box<dyn Fn(&mut Tape, Var) -> Var + 'a>;
        let chains: Vec<Chain> = vec![
            Box::new(|t, x| {
                let w = t.constant(w.clone());
                let y = t.matmul(x, w).unwrap();
                let y = t.gelu(y);
                t.mse(y, &target).unwrap()
            }),
            Box::new(|t, x| {
                let o = t.constant(other.clone());
                let s = t.bmm(x, o, true).unwrap();
                let s = t.softmax(s);
                let p = t.bmm(s, o, false).unwrap();
                let p = t.mul(p, p).unwrap();
                t.sum(p)
            }),
            Box::new(|t, x| {
                let g = t.constant(gamma.clone());
                let b = t.constant(bias.clone());
                let w = t.constant(w.clone());
                let y = t.matmul(x, w).unwrap();
                let y = t.layer_norm(y, g, b, 1e-5).unwrap();
                let y = t.add_bias(y, b).unwrap();
                t.mse(y, &target).unwrap()
            }),
            Box::new(|t, x| {
                let w = t.constant(w.clone());
                let a = t.matmul(x, w).unwrap();
                let c = t.concat_last(&[a, x]).unwrap();
                let c = t.reshape(c, vec![10, 7]).unwrap();
                let c = t.scale(c, 0.3);
                let c = t.row_affine(c, (0..10).map(|i| i as f64 * 0.1).collect(), vec![1.0; 10]).unwrap();
                let c = t.mul(c, c).unwrap();
                t.sum(c)
            }),
        ];
        for (i, f) in chains.iter().enumerate() {
            let x = random(&mut rng, &[2, 5, 4]);
            let err = check(x, f);
            assert!(err < 1e-6, "chain {i}: {err}");
        }
    }

    #[test]
    fn layer_norm_sum_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random(&mut rng, &[4, 6]);
        let gamma = random(&mut rng, &[6]);
        let err = check(x, |t, x| {
            let g = t.constant(gamma.clone());
            let b = t.constant(Tensor::zeros(&[6]));
            let y = t.layer_norm(x, g, b, 1e-5).unwrap();
            let y2 = t.mul(y, y).unwrap();
            let s = t.add(y, y2).unwrap();
            t.sum(s)
        });
        assert!(err < 1e-5, "{err}");
    }

    #[test]
    fn masked_softmax_has_zero_gradient_at_masked_entries() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::from_rows(&[vec![0.3, 0.1, 0.2], vec![0.5, -0.2, 0.9]]).unwrap());
        let m = tape.constant(
            Tensor::from_rows(&[vec![0.0, f64::NEG_INFINITY, f64::NEG_INFINITY], vec![0.0, 0.0, f64::NEG_INFINITY]])
                .unwrap(),
        );
        let s = tape.add(x, m).unwrap();
        let y = tape.softmax(s);
        let w = tape.constant(Tensor::from_rows(&[vec![1.0, 2.0, 3.0], vec![-1.0, 4.0, 2.0]]).unwrap());
        let p = tape.mul(y, w).unwrap();
        let l = tape.sum(p);
        tape.backward(l).unwrap();
        let g = tape.grad(x).unwrap();
        assert_eq!(g[1], 0.0);
        assert_eq!(g[2], 0.0);
        assert_eq!(g[5], 0.0);
        assert!(g.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn fan_out_accumulates() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::vector(vec![1.5]));
        let a = tape.scale(x, 2.0);
        let b = tape.scale(x, 3.0);
        let c = tape.add(a, b).unwrap();
        let l = tape.sum(c);
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[5.0]);
    }
}
