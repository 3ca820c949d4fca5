//! Multihead attention with additive causal and decay masks.
//!
//! Scores follow `S_h = K_h Q_h^T / sqrt(d_k)`: row `i` is the query position
//! whose output it normalizes, so the causal mask removes `j > i`. Masks are
//! shared by every head. No dropout is applied to attention weights.

use rand::Rng;

use crate::error::{Error, Result};
use crate::masks::ScoreMask;
use crate::tensor::{kernels, CustomBackward, Tape, Tensor, Var};

/// Projection weights for one attention block.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams {
    /// Per-head `d x d_k` query projections.
    pub wq: Vec<Tensor>,
    pub wk: Vec<Tensor>,
    pub wv: Vec<Tensor>,
    /// `(H * d_k) x d` output projection.
    pub wo: Tensor,
}

impl AttentionParams {
    /// Uniform `(-1/sqrt(fan_in), 1/sqrt(fan_in))` initialization.
    pub fn init<R: Rng>(width: usize, heads: usize, rng: &mut R) -> Result<Self> {
        if heads == 0 || !width.is_multiple_of(heads) {
            return Err(Error::contract(format!(
                "embedding width {width} is not divisible by {heads} heads"
            )));
        }
        let dk = width / heads;
        let mut mat = |rows: usize, cols: usize| {
            let bound = 1.0 / (rows as f64).sqrt();
            let data = (0..rows * cols).map(|_| rng.gen_range(-bound..bound)).collect();
            Tensor::new(vec![rows, cols], data).expect("sized")
        };
        let wq = (0..heads).map(|_| mat(width, dk)).collect();
        let wk = (0..heads).map(|_| mat(width, dk)).collect();
        let wv = (0..heads).map(|_| mat(width, dk)).collect();
        let wo = mat(width, width);
        Ok(Self { wq, wk, wv, wo })
    }

    pub fn heads(&self) -> usize {
        self.wq.len()
    }

    pub fn width(&self) -> usize {
        self.wo.shape()[1]
    }

    pub fn head_dim(&self) -> usize {
        self.wq[0].shape()[1]
    }

    pub fn validate(&self) -> Result<()> {
        let (d, h) = (self.width(), self.heads());
        let dk = self.head_dim();
        if h * dk != d || self.wo.shape() != [h * dk, d] {
            return Err(Error::shape("AttentionParams", &[h, dk], self.wo.shape()));
        }
        for w in self.wq.iter().chain(&self.wk).chain(&self.wv) {
            if w.shape() != [d, dk] {
                return Err(Error::shape("AttentionParams", &[d, dk], w.shape()));
            }
        }
        Ok(())
    }

    /// Records every weight on `tape` as a trainable leaf.
    pub fn record(&self, tape: &mut Tape) -> AttentionVars {
        AttentionVars {
            wq: self.wq.iter().map(|w| tape.param(w.clone())).collect(),
            wk: self.wk.iter().map(|w| tape.param(w.clone())).collect(),
            wv: self.wv.iter().map(|w| tape.param(w.clone())).collect(),
            wo: tape.param(self.wo.clone()),
            head_dim: self.head_dim(),
        }
    }
}

/// Attention weights already recorded on a tape.
#[derive(Debug, Clone)]
pub struct AttentionVars {
    pub wq: Vec<Var>,
    pub wk: Vec<Var>,
    pub wv: Vec<Var>,
    pub wo: Var,
    pub head_dim: usize,
}

/// Score and weight matrices captured from one head of one layer.
///
/// Every tensor is `[batch, P, P]`.
#[derive(Debug, Clone)]
pub struct AttentionTrace {
    pub layer: usize,
    pub head: usize,
    /// `S_h` before any mask.
    pub pre_scores: Tensor,
    /// `S_h` plus causal and decay masks.
    pub post_scores: Tensor,
    /// Softmax of `post_scores`.
    pub weights: Tensor,
    /// Softmax of `S_h` with only the causal mask.
    pub causal_weights: Tensor,
}

impl AttentionTrace {
    pub fn batch(&self) -> usize {
        self.weights.shape()[0]
    }

    pub fn size(&self) -> usize {
        self.weights.shape()[1]
    }

    /// Writes `layer,head,lag,pre_mask_score,post_mask_score,weight` rows
    /// for every causal-valid entry.
    pub fn write_csv<W: std::io::Write>(traces: &[AttentionTrace], out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["layer", "head", "lag", "pre_mask_score", "post_mask_score", "weight"])?;
        for t in traces {
            let p = t.size();
            for b in 0..t.batch() {
                for i in 0..p {
                    for j in 0..=i {
                        let idx = b * p * p + i * p + j;
                        w.write_record([
                            t.layer.to_string(),
                            t.head.to_string(),
                            (i - j).to_string(),
                            t.pre_scores.data()[idx].to_string(),
                            crate::masks::format_score(t.post_scores.data()[idx]),
                            t.weights.data()[idx].to_string(),
                        ])?;
                    }
                }
            }
        }
        w.flush().map_err(|e| Error::io("<csv>", e))?;
        Ok(())
    }
}

fn batched(tape: &mut Tape, x: Var) -> Result<(Var, bool)> {
    match tape.shape(x).len() {
        3 => Ok((x, false)),
        2 => {
            let s = tape.shape(x).to_vec();
            Ok((tape.reshape(x, vec![1, s[0], s[1]])?, true))
        }
        _ => Err(Error::shape("attention input", tape.shape(x), &[0, 0, 0])),
    }
}

/// `(Q_h, K_h, V_h)` for one head.
pub fn project_qkv(tape: &mut Tape, x: Var, vars: &AttentionVars, head: usize) -> Result<(Var, Var, Var)> {
    if head >= vars.wq.len() {
        return Err(Error::contract(format!("head {head} out of range")));
    }
    let q = tape.matmul(x, vars.wq[head])?;
    let k = tape.matmul(x, vars.wk[head])?;
    let v = tape.matmul(x, vars.wv[head])?;
    Ok((q, k, v))
}

/// `K_h Q_h^T / sqrt(d_k)` over `[B, P, d_k]` inputs.
pub fn attention_scores(tape: &mut Tape, q: Var, k: Var) -> Result<Var> {
    if tape.shape(q) != tape.shape(k) {
        return Err(Error::shape("attention_scores", tape.shape(q), tape.shape(k)));
    }
    let (q, _) = batched(tape, q)?;
    let (k, _) = batched(tape, k)?;
    let dk = tape.value(q).last_dim();
    let raw = tape.bmm(k, q, true)?;
    Ok(tape.scale(raw, 1.0 / (dk as f64).sqrt()))
}

/// Output of an attention block and, optionally, its captured traces.
#[derive(Debug)]
pub struct AttentionOutput {
    pub output: Var,
    pub traces: Vec<AttentionTrace>,
}

/// Weighted causal multihead attention.
///
/// `x` is `[B, P, d]` or `[P, d]`; `mask` is a `[P, P]` node holding the
/// combined causal + decay mask.
pub fn wcmha_forward(
    tape: &mut Tape,
    x: Var,
    vars: &AttentionVars,
    mask: Var,
    layer: usize,
    capture: bool,
) -> Result<AttentionOutput> {
    let (xb, squeeze) = batched(tape, x)?;
    let p = tape.shape(xb)[1];
    if tape.shape(mask) != [p, p] {
        return Err(Error::shape("wcmha mask", tape.shape(mask), &[p, p]));
    }
    let mut heads = Vec::with_capacity(vars.wq.len());
    let mut traces = Vec::new();
    for h in 0..vars.wq.len() {
        let (q, k, v) = project_qkv(tape, xb, vars, h)?;
        let scores = attention_scores(tape, q, k)?;
        let masked = tape.add_broadcast(scores, mask)?;
        let weights = tape.softmax(masked);
        heads.push(tape.bmm(weights, v, false)?);
        if capture {
            traces.push(capture_trace(tape, layer, h, scores, masked, weights)?);
        }
    }
    let cat = tape.concat_last(&heads)?;
    let mut out = tape.matmul(cat, vars.wo)?;
    if squeeze {
        let s = tape.shape(out).to_vec();
        out = tape.reshape(out, vec![s[1], s[2]])?;
    }
    Ok(AttentionOutput { output: out, traces })
}

fn capture_trace(tape: &Tape, layer: usize, head: usize, scores: Var, masked: Var, weights: Var) -> Result<AttentionTrace> {
    let pre = tape.value(scores).clone();
    let p = pre.shape()[1];
    let causal = crate::masks::causal_mask(p)?;
    let mut causal_scores = pre.data().to_vec();
    for block in causal_scores.chunks_mut(p * p) {
        block.iter_mut().zip(causal.values()).for_each(|(s, m)| *s += m);
    }
    let causal_weights = crate::tensor::softmax_lastdim(&Tensor::new(pre.shape().to_vec(), causal_scores)?);
    Ok(AttentionTrace {
        layer,
        head,
        pre_scores: pre.with_requires_grad(false),
        post_scores: tape.value(masked).clone().with_requires_grad(false),
        weights: tape.value(weights).clone().with_requires_grad(false),
        causal_weights,
    })
}

/// Work done by the banded kernel.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct BandStats {
    /// Query-key dot products evaluated, summed over heads and batch.
    pub score_ops: u64,
}

/// Band-limited attention core for one head: only lags `0 <= i - j < tau`
/// are scored, in `O(tau * P * d_k)` per sample.
pub fn banded_head(
    tape: &mut Tape,
    q: Var,
    k: Var,
    v: Var,
    mask: Var,
    tau: usize,
    stats: &mut BandStats,
) -> Result<Var> {
    if tau == 0 {
        return Err(Error::contract("band cutoff tau must be at least 1"));
    }
    let shape = tape.shape(q).to_vec();
    if shape.len() != 3 || tape.shape(k) != shape.as_slice() || tape.shape(v) != shape.as_slice() {
        return Err(Error::shape("banded attention", &shape, tape.shape(k)));
    }
    let (batch, p, dk) = (shape[0], shape[1], shape[2]);
    if tape.shape(mask) != [p, p] {
        return Err(Error::shape("banded mask", tape.shape(mask), &[p, p]));
    }
    let scale = 1.0 / (dk as f64).sqrt();
    let (qd, kd, vd, md) = (
        tape.value(q).data(),
        tape.value(k).data(),
        tape.value(v).data(),
        tape.value(mask).data(),
    );
    let mut out = vec![0.0; batch * p * dk];
    let mut weights = vec![0.0; batch * p * tau];
    let mut row = vec![0.0; tau];
    for b in 0..batch {
        let base = b * p * dk;
        for i in 0..p {
            let width = tau.min(i + 1);
            let ki = &kd[base + i * dk..base + (i + 1) * dk];
            for (lag, slot) in row[..width].iter_mut().enumerate() {
                let j = i - lag;
                let qj = &qd[base + j * dk..base + (j + 1) * dk];
                let dot: f64 = ki.iter().zip(qj).map(|(a, c)| a * c).sum();
                *slot = dot * scale + md[i * p + j];
            }
            stats.score_ops += width as u64;
            kernels::softmax_row(&mut row[..width]);
            let oi = &mut out[base + i * dk..base + (i + 1) * dk];
            for (lag, w) in row[..width].iter().enumerate() {
                let j = i - lag;
                let vj = &vd[base + j * dk..base + (j + 1) * dk];
                oi.iter_mut().zip(vj).for_each(|(o, vv)| *o += w * vv);
            }
            weights[(b * p + i) * tau..(b * p + i) * tau + width].copy_from_slice(&row[..width]);
        }
    }
    let rule = BandedRule {
        batch,
        size: p,
        head_dim: dk,
        tau,
        scale,
        weights,
    };
    Ok(tape.custom(&[q, k, v, mask], Tensor::new(shape, out)?, Box::new(rule)))
}

struct BandedRule {
    batch: usize,
    size: usize,
    head_dim: usize,
    tau: usize,
    scale: f64,
    /// `[B, P, tau]` softmax weights indexed by lag.
    weights: Vec<f64>,
}

impl CustomBackward for BandedRule {
    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, g: &[f64]) -> Vec<Option<Vec<f64>>> {
        let (p, dk, tau) = (self.size, self.head_dim, self.tau);
        let (qd, kd, vd) = (inputs[0].data(), inputs[1].data(), inputs[2].data());
        let mut gq = vec![0.0; qd.len()];
        let mut gk = vec![0.0; kd.len()];
        let mut gv = vec![0.0; vd.len()];
        let mut gm = vec![0.0; p * p];
        let mut dweights = vec![0.0; tau];
        for b in 0..self.batch {
            let base = b * p * dk;
            for i in 0..p {
                let width = tau.min(i + 1);
                let w = &self.weights[(b * p + i) * tau..(b * p + i) * tau + width];
                let gi = &g[base + i * dk..base + (i + 1) * dk];
                for lag in 0..width {
                    let j = i - lag;
                    let vj = &vd[base + j * dk..base + (j + 1) * dk];
                    dweights[lag] = gi.iter().zip(vj).map(|(a, c)| a * c).sum();
                    let gvj = &mut gv[base + j * dk..base + (j + 1) * dk];
                    gvj.iter_mut().zip(gi).for_each(|(o, a)| *o += w[lag] * a);
                }
                let dot: f64 = w.iter().zip(&dweights[..width]).map(|(a, c)| a * c).sum();
                for lag in 0..width {
                    let ds = w[lag] * (dweights[lag] - dot);
                    if ds == 0.0 {
                        continue;
                    }
                    let j = i - lag;
                    gm[i * p + j] += ds;
                    let c = ds * self.scale;
                    for t in 0..dk {
                        gk[base + i * dk + t] += c * qd[base + j * dk + t];
                        gq[base + j * dk + t] += c * kd[base + i * dk + t];
                    }
                }
            }
        }
        vec![Some(gq), Some(gk), Some(gv), Some(gm)]
    }
}

/// Banded weighted causal attention over a single `[P, d]` sequence,
/// evaluated without gradients.
pub fn wcmha_banded(x: &Tensor, params: &AttentionParams, mask: &ScoreMask, tau: usize) -> Result<(Tensor, BandStats)> {
    if tau == 0 {
        return Err(Error::contract("band cutoff tau must be at least 1"));
    }
    params.validate()?;
    if x.shape().len() != 2 || x.shape()[1] != params.width() {
        return Err(Error::shape("wcmha_banded", x.shape(), &[mask.size(), params.width()]));
    }
    let p = x.shape()[0];
    if mask.size() != p {
        return Err(Error::shape("wcmha_banded mask", &[mask.size()], &[p]));
    }
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone().reshaped(vec![1, p, params.width()])?);
    let vars = AttentionVars {
        wq: params.wq.iter().map(|w| tape.constant(w.clone())).collect(),
        wk: params.wk.iter().map(|w| tape.constant(w.clone())).collect(),
        wv: params.wv.iter().map(|w| tape.constant(w.clone())).collect(),
        wo: tape.constant(params.wo.clone()),
        head_dim: params.head_dim(),
    };
    let m = tape.constant(mask.to_tensor());
    let mut stats = BandStats::default();
    let out = banded_block(&mut tape, xv, &vars, m, tau, &mut stats)?;
    let t = tape.value(out).clone().reshaped(vec![p, params.width()])?;
    Ok((t, stats))
}

/// Multihead block built on [`banded_head`]; `x` is `[B, P, d]`.
pub fn banded_block(
    tape: &mut Tape,
    x: Var,
    vars: &AttentionVars,
    mask: Var,
    tau: usize,
    stats: &mut BandStats,
) -> Result<Var> {
    let mut heads = Vec::with_capacity(vars.wq.len());
    for h in 0..vars.wq.len() {
        let (q, k, v) = project_qkv(tape, x, vars, h)?;
        heads.push(banded_head(tape, q, k, v, mask, tau, stats)?);
    }
    let cat = tape.concat_last(&heads)?;
    tape.matmul(cat, vars.wo)
}

/// Full weighted causal attention over a single `[P, d]` sequence,
/// evaluated without gradients.
pub fn wcmha_eval(x: &Tensor, params: &AttentionParams, mask: &ScoreMask) -> Result<(Tensor, Vec<AttentionTrace>)> {
    params.validate()?;
    if x.shape().len() != 2 || x.shape()[1] != params.width() || x.shape()[0] != mask.size() {
        return Err(Error::shape("wcmha_forward", x.shape(), &[mask.size(), params.width()]));
    }
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let vars = AttentionVars {
        wq: params.wq.iter().map(|w| tape.constant(w.clone())).collect(),
        wk: params.wk.iter().map(|w| tape.constant(w.clone())).collect(),
        wv: params.wv.iter().map(|w| tape.constant(w.clone())).collect(),
        wo: tape.constant(params.wo.clone()),
        head_dim: params.head_dim(),
    };
    let m = tape.constant(mask.to_tensor());
    let out = wcmha_forward(&mut tape, xv, &vars, m, 0, true)?;
    Ok((tape.value(out.output).clone(), out.traces))
}

/// Largest deviation of any causal-valid weight row sum from 1.
pub fn max_row_sum_error(weights: &Tensor) -> f64 {
    let p = weights.last_dim();
    weights
        .data()
        .chunks(p)
        .filter(|row| row.iter().any(|v| *v > 0.0))
        .map(|row| (row.iter().sum::<f64>() - 1.0).abs())
        .fold(0.0, f64::max)
}
