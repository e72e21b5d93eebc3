use super::{Graph, Var};
use crate::error::{Error, Result};
use crate::rng::mix;
use crate::tensor::{self, conv2d_backward, gemm, Tensor};

pub(crate) enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    MatMul(Var, Var),
    AddRowBias(Var, Var),
    BroadcastRows(Var),
    SliceCols { x: Var, start: usize },
    SelectRows { x: Var, rows: Vec<usize> },
    Reshape(Var),
    Conv2d { x: Var, w: Var, stride: usize, pad: usize },
    BnNormalize { x: Var, inv_std: Vec<f64> },
    ChannelNormalize { x: Var, inv_std: Vec<f64> },
    ChannelAffine { x: Var, scale: Var, shift: Var },
    Relu(Var),
    Silu(Var),
    Selu(Var),
    Sigmoid(Var),
    MaxPool { x: Var, argmax: Vec<usize> },
    AvgPool { x: Var, k: usize, stride: usize },
    GlobalAvgPool(Var),
    ClassMeans { x: Var, labels: Vec<usize>, counts: Vec<usize> },
    SqDist { q: Var, c: Var },
    CosineDist { q: Var, c: Var },
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Tensor },
    MultilabelSoftMargin { logits: Var, targets: Tensor },
    CosineEmbedding { pred: Var, target: Tensor },
    Mean(Var),
    Sum(Var),
    Dot { x: Var, weights: Tensor },
}

pub const SELU_ALPHA: f64 = 1.673_263_242_354_377_2;
pub const SELU_LAMBDA: f64 = 1.050_700_987_355_480_5;

/// Smallest norm used when dividing by a vector length.
pub const NORM_FLOOR: f64 = 1e-12;
/// Floor applied to probabilities before taking a logarithm.
pub const LOG_FLOOR: f64 = 1e-30;

/// Per-channel batch statistics observed during a training-mode normalization.
#[derive(Clone, Debug)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow.
#[inline]
pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn same_shape(g: &Graph, a: Var, b: Var, op: &str) -> Result<()> {
    let (sa, sb) = (g.value(a).shape(), g.value(b).shape());
    if sa != sb {
        return Err(Error::shape(format!("{op}: {sa:?} vs {sb:?}")));
    }
    Ok(())
}

fn finite(t: Tensor, op: &'static str) -> Result<Tensor> {
    t.ensure_finite(op)?;
    Ok(t)
}

impl Graph {
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self, a, b, "add")?;
        let v = self.value(a).add(self.value(b))?;
        Ok(self.push(v, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self, a, b, "sub")?;
        let v = self.value(a).sub(self.value(b))?;
        Ok(self.push(v, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self, a, b, "mul")?;
        let v = self.value(a).mul(self.value(b))?;
        Ok(self.push(v, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let v = self.value(a).scale(c)?;
        Ok(self.push(v, Op::Scale(a, c)))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = tensor::matmul(self.value(a), self.value(b))?;
        Ok(self.push(v, Op::MatMul(a, b)))
    }

    /// `x (R×C) + bias (C)` broadcast over rows.
    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (_, c) = self.value(x).dims2()?;
        if self.value(bias).shape() != [c] {
            return Err(Error::shape(format!(
                "row bias {:?} for {:?}",
                self.value(bias).shape(),
                self.value(x).shape()
            )));
        }
        let v = self.value(x).add(self.value(bias))?;
        Ok(self.push(v, Op::AddRowBias(x, bias)))
    }

    /// Repeats a vector `(C)` into `rows × C`.
    pub fn broadcast_rows(&mut self, v: Var, rows: usize) -> Result<Var> {
        let t = self.value(v);
        if t.rank() != 1 || rows == 0 {
            return Err(Error::shape(format!("broadcast_rows of {:?}", t.shape())));
        }
        let out = t.broadcast_to(&[rows, t.numel()])?;
        Ok(self.push(out, Op::BroadcastRows(v)))
    }

    /// Columns `start..start+len` of a matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.value(x).dims2()?;
        if len == 0 || start + len > c {
            return Err(Error::shape(format!(
                "slice_cols {start}..{} of {c} columns",
                start + len
            )));
        }
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(r * len);
        for i in 0..r {
            data.extend_from_slice(&src[i * c + start..i * c + start + len]);
        }
        let v = Tensor::from_parts(vec![r, len], data);
        Ok(self.push(v, Op::SliceCols { x, start }))
    }

    pub fn select_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let v = self.value(x).select_rows(rows)?;
        Ok(self.push(
            v,
            Op::SelectRows {
                x,
                rows: rows.to_vec(),
            },
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(x).reshape(shape)?;
        Ok(self.push(v, Op::Reshape(x)))
    }

    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let v = tensor::conv2d(self.value(x), self.value(w), stride, pad)?;
        Ok(self.push(v, Op::Conv2d { x, w, stride, pad }))
    }

    /// Training-mode batch normalization without the affine step: standardizes
    /// each channel of `B×C×H×W` (or `B×C`) with statistics over batch and
    /// spatial positions. Gradients flow through the statistics.
    pub fn bn_normalize(&mut self, x: Var, eps: f64) -> Result<(Var, BatchStats)> {
        let t = self.value(x);
        let (b, c, area) = channel_layout(t)?;
        let m = b * area;
        if m < 2 {
            return Err(Error::DegenerateStatistics(format!(
                "training-mode batch norm needs at least 2 values per channel, got {m}"
            )));
        }
        let axes: &[usize] = if t.rank() == 4 { &[0, 2, 3] } else { &[0] };
        let (mean, var) = tensor::reduce_mean_var(t, axes)?;
        let mean = mean.into_data();
        let var = var.into_data();
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let out = normalize_channels(t, b, c, area, &mean, &inv_std)?;
        let stats = BatchStats { mean, var };
        Ok((self.push(out, Op::BnNormalize { x, inv_std }), stats))
    }

    /// Evaluation-mode normalization with fixed per-channel statistics.
    pub fn channel_normalize(&mut self, x: Var, mean: &[f64], var: &[f64], eps: f64) -> Result<Var> {
        let t = self.value(x);
        let (b, c, area) = channel_layout(t)?;
        if mean.len() != c || var.len() != c {
            return Err(Error::shape(format!(
                "running statistics of length {} for {c} channels",
                mean.len()
            )));
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let out = normalize_channels(t, b, c, area, mean, &inv_std)?;
        Ok(self.push(out, Op::ChannelNormalize { x, inv_std }))
    }

    /// Per-sample affine: `y[b,c,..] = x[b,c,..]·scale[b,c] + shift[b,c]`.
    pub fn channel_affine(&mut self, x: Var, scale: Var, shift: Var) -> Result<Var> {
        let t = self.value(x);
        let (b, c, area) = channel_layout(t)?;
        for s in [scale, shift] {
            if self.value(s).shape() != [b, c] {
                return Err(Error::shape(format!(
                    "channel affine term {:?} for input {:?}",
                    self.value(s).shape(),
                    t.shape()
                )));
            }
        }
        let (sc, sh) = (self.value(scale).data(), self.value(shift).data());
        let mut out = t.data().to_vec();
        for (bc, chunk) in out.chunks_mut(area).enumerate() {
            for v in chunk {
                *v = *v * sc[bc] + sh[bc];
            }
        }
        let out = finite(Tensor::from_parts(t.shape().to_vec(), out), "channel_affine")?;
        Ok(self.push(out, Op::ChannelAffine { x, scale, shift }))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let mut sig = self.kink_signature;
        let mut word = 0u64;
        for (i, &v) in t.data().iter().enumerate() {
            word = (word << 1) | (v > 0.0) as u64;
            if i % 64 == 63 {
                sig = mix(sig ^ word);
                word = 0;
            }
        }
        let out = t.map(|v| v.max(0.0));
        self.kink_signature = mix(sig ^ word);
        Ok(self.push(out, Op::Relu(x)))
    }

    pub fn silu(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map_checked("silu", |v| v * sigmoid(v))?;
        Ok(self.push(out, Op::Silu(x)))
    }

    pub fn selu(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map_checked("selu", |v| {
            SELU_LAMBDA * if v > 0.0 { v } else { SELU_ALPHA * v.exp_m1() }
        })?;
        Ok(self.push(out, Op::Selu(x)))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(sigmoid);
        Ok(self.push(out, Op::Sigmoid(x)))
    }

    pub fn max_pool2d(&mut self, x: Var, k: usize, stride: usize) -> Result<Var> {
        let (out, argmax) = tensor::max_pool2d(self.value(x), k, stride)?;
        let mut sig = self.kink_signature;
        for &a in &argmax {
            sig = mix(sig ^ a as u64);
        }
        self.kink_signature = sig;
        Ok(self.push(out, Op::MaxPool { x, argmax }))
    }

    pub fn avg_pool2d(&mut self, x: Var, k: usize, stride: usize) -> Result<Var> {
        let out = tensor::avg_pool2d(self.value(x), k, stride)?;
        Ok(self.push(out, Op::AvgPool { x, k, stride }))
    }

    /// `B×C×H×W → B×C` spatial mean.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let (b, c, h, w) = t.dims4()?;
        let area = h * w;
        let data = t
            .data()
            .chunks(area)
            .map(|p| p.iter().sum::<f64>() / area as f64)
            .collect();
        Ok(self.push(Tensor::from_parts(vec![b, c], data), Op::GlobalAvgPool(x)))
    }

    /// Row means grouped by label: output row `k` is the mean of rows labelled `k`.
    pub fn class_means(&mut self, x: Var, labels: &[usize], classes: usize) -> Result<Var> {
        let t = self.value(x);
        let (r, m) = t.dims2()?;
        if labels.len() != r {
            return Err(Error::shape(format!("{} labels for {r} rows", labels.len())));
        }
        let mut counts = vec![0usize; classes];
        let mut out = vec![0.0; classes * m];
        for (i, &k) in labels.iter().enumerate() {
            if k >= classes {
                return Err(Error::invalid(format!("label {k} out of range for {classes} classes")));
            }
            counts[k] += 1;
            for j in 0..m {
                out[k * m + j] += t.data()[i * m + j];
            }
        }
        if let Some(k) = counts.iter().position(|&n| n == 0) {
            return Err(Error::InsufficientData(format!(
                "class {k} has no support embeddings"
            )));
        }
        for k in 0..classes {
            for j in 0..m {
                out[k * m + j] /= counts[k] as f64;
            }
        }
        let v = Tensor::from_parts(vec![classes, m], out);
        Ok(self.push(
            v,
            Op::ClassMeans {
                x,
                labels: labels.to_vec(),
                counts,
            },
        ))
    }

    /// Pairwise squared Euclidean distances, `q (Bq×M)`, `c (N×M)` → `Bq×N`.
    pub fn sq_dist(&mut self, q: Var, c: Var) -> Result<Var> {
        let (bq, m, n) = pair_dims(self, q, c)?;
        let (qd, cd) = (self.value(q).data(), self.value(c).data());
        let mut out = vec![0.0; bq * n];
        for i in 0..bq {
            for k in 0..n {
                out[i * n + k] = (0..m).map(|j| (qd[i * m + j] - cd[k * m + j]).powi(2)).sum();
            }
        }
        let v = finite(Tensor::from_parts(vec![bq, n], out), "sq_dist")?;
        Ok(self.push(v, Op::SqDist { q, c }))
    }

    /// Pairwise cosine distances `1 − cos(q_i, c_k)`.
    pub fn cosine_dist(&mut self, q: Var, c: Var) -> Result<Var> {
        let (bq, m, n) = pair_dims(self, q, c)?;
        let (qd, cd) = (self.value(q).data(), self.value(c).data());
        let mut out = vec![0.0; bq * n];
        for i in 0..bq {
            let qi = &qd[i * m..(i + 1) * m];
            for k in 0..n {
                out[i * n + k] = 1.0 - cosine(qi, &cd[k * m..(k + 1) * m]).0;
            }
        }
        let v = Tensor::from_parts(vec![bq, n], out);
        Ok(self.push(v, Op::CosineDist { q, c }))
    }

    /// Mean negative log-likelihood of `labels` under `softmax(logits)` (rows).
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let t = self.value(logits);
        let (r, n) = t.dims2()?;
        if labels.len() != r || labels.iter().any(|&l| l >= n) {
            return Err(Error::shape(format!(
                "cross_entropy: {} labels for {r}x{n} logits",
                labels.len()
            )));
        }
        let probs = tensor::softmax(t, 1)?;
        let loss = labels
            .iter()
            .enumerate()
            .map(|(i, &l)| -probs.data()[i * n + l].max(LOG_FLOOR).ln())
            .sum::<f64>()
            / r as f64;
        let v = finite(Tensor::scalar(loss), "cross_entropy")?;
        Ok(self.push(
            v,
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
        ))
    }

    /// Mean per-element sigmoid binary cross-entropy.
    pub fn multilabel_soft_margin(&mut self, logits: Var, targets: &Tensor) -> Result<Var> {
        let t = self.value(logits);
        if t.shape() != targets.shape() {
            return Err(Error::shape(format!(
                "multilabel targets {:?} for logits {:?}",
                targets.shape(),
                t.shape()
            )));
        }
        if targets.data().iter().any(|&y| !(0.0..=1.0).contains(&y)) {
            return Err(Error::invalid("multilabel targets must lie in [0, 1]"));
        }
        // -[y log σ(x) + (1-y) log(1-σ(x))] = y·softplus(-x) + (1-y)·softplus(x)
        let loss = t
            .data()
            .iter()
            .zip(targets.data())
            .map(|(&x, &y)| y * softplus(-x) + (1.0 - y) * softplus(x))
            .sum::<f64>()
            / t.numel() as f64;
        let v = finite(Tensor::scalar(loss), "multilabel_soft_margin")?;
        Ok(self.push(
            v,
            Op::MultilabelSoftMargin {
                logits,
                targets: targets.clone(),
            },
        ))
    }

    /// Mean over rows of `1 − cos(pred_b, target_b)`.
    pub fn cosine_embedding_loss(&mut self, pred: Var, target: &Tensor) -> Result<Var> {
        let t = self.value(pred);
        let (r, e) = t.dims2()?;
        if target.shape() != t.shape() {
            return Err(Error::shape(format!(
                "cosine target {:?} for prediction {:?}",
                target.shape(),
                t.shape()
            )));
        }
        let mut loss = 0.0;
        for b in 0..r {
            let tb = &target.data()[b * e..(b + 1) * e];
            if norm(tb) < NORM_FLOOR {
                return Err(Error::invalid(format!("zero-norm target row {b}")));
            }
            loss += 1.0 - cosine(&t.data()[b * e..(b + 1) * e], tb).0;
        }
        let v = finite(Tensor::scalar(loss / r as f64), "cosine_embedding_loss")?;
        Ok(self.push(
            v,
            Op::CosineEmbedding {
                pred,
                target: target.clone(),
            },
        ))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let v = Tensor::scalar(self.value(x).mean());
        Ok(self.push(v, Op::Mean(x)))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let v = Tensor::scalar(self.value(x).sum());
        Ok(self.push(v, Op::Sum(x)))
    }

    /// `Σ x ⊙ weights` for a constant `weights` of the same shape.
    pub fn dot_const(&mut self, x: Var, weights: &Tensor) -> Result<Var> {
        let t = self.value(x);
        if t.shape() != weights.shape() {
            return Err(Error::shape(format!(
                "dot_const {:?} vs {:?}",
                t.shape(),
                weights.shape()
            )));
        }
        let s = t.data().iter().zip(weights.data()).map(|(a, b)| a * b).sum();
        Ok(self.push(
            Tensor::scalar(s),
            Op::Dot {
                x,
                weights: weights.clone(),
            },
        ))
    }
}

fn channel_layout(t: &Tensor) -> Result<(usize, usize, usize)> {
    match *t.shape() {
        [b, c, h, w] => Ok((b, c, h * w)),
        [b, c] => Ok((b, c, 1)),
        _ => Err(Error::shape(format!(
            "channel op expects B×C×H×W or B×C, got {:?}",
            t.shape()
        ))),
    }
}

fn normalize_channels(
    t: &Tensor,
    b: usize,
    c: usize,
    area: usize,
    mean: &[f64],
    inv_std: &[f64],
) -> Result<Tensor> {
    let mut out = t.data().to_vec();
    for s in 0..b {
        for ch in 0..c {
            let base = (s * c + ch) * area;
            for v in &mut out[base..base + area] {
                *v = (*v - mean[ch]) * inv_std[ch];
            }
        }
    }
    finite(Tensor::from_parts(t.shape().to_vec(), out), "batch_norm")
}

fn pair_dims(g: &Graph, q: Var, c: Var) -> Result<(usize, usize, usize)> {
    let (bq, m) = g.value(q).dims2()?;
    let (n, m2) = g.value(c).dims2()?;
    if m != m2 {
        return Err(Error::shape(format!(
            "embedding dimension {m} vs prototype dimension {m2}"
        )));
    }
    Ok((bq, m, n))
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// `(cos, |a|, |b|)` with both norms floored.
fn cosine(a: &[f64], b: &[f64]) -> (f64, f64, f64) {
    let na = norm(a).max(NORM_FLOOR);
    let nb = norm(b).max(NORM_FLOOR);
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    (dot / (na * nb), na, nb)
}

/// Gradient of `cos(a, b)` with respect to `a`, scaled by `g`, added into `out`.
fn cosine_grad_into(a: &[f64], b: &[f64], g: f64, out: &mut [f64]) {
    let (cos, na, nb) = cosine(a, b);
    for j in 0..a.len() {
        out[j] += g * (b[j] / (na * nb) - cos * a[j] / (na * na));
    }
}

type Contribs = Vec<(Var, Tensor)>;

pub(crate) fn backward(graph: &Graph, op: &Op, out: &Tensor, g: &Tensor) -> Result<Contribs> {
    let val = |v: Var| graph.value(v);
    let gd = g.data();
    Ok(match op {
        Op::Leaf => vec![],
        Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
        Op::Sub(a, b) => vec![(*a, g.clone()), (*b, g.map(|v| -v))],
        Op::Mul(a, b) => vec![(*a, g.mul(val(*b))?), (*b, g.mul(val(*a))?)],
        Op::Scale(a, c) => vec![(*a, g.map(|v| v * c))],
        Op::MatMul(a, b) => {
            let (m, k) = val(*a).dims2()?;
            let (_, n) = val(*b).dims2()?;
            let mut da = vec![0.0; m * k];
            gemm(m, n, k, gd, false, val(*b).data(), true, &mut da, false);
            let mut db = vec![0.0; k * n];
            gemm(k, m, n, val(*a).data(), true, gd, false, &mut db, false);
            vec![
                (*a, Tensor::from_parts(vec![m, k], da)),
                (*b, Tensor::from_parts(vec![k, n], db)),
            ]
        }
        Op::AddRowBias(x, bias) => vec![(*x, g.clone()), (*bias, column_sums(g)?)],
        Op::BroadcastRows(v) => vec![(*v, column_sums(g)?)],
        Op::SliceCols { x, start } => {
            let (r, c) = val(*x).dims2()?;
            let len = g.shape()[1];
            let mut dx = vec![0.0; r * c];
            for i in 0..r {
                dx[i * c + start..i * c + start + len].copy_from_slice(&gd[i * len..(i + 1) * len]);
            }
            vec![(*x, Tensor::from_parts(vec![r, c], dx))]
        }
        Op::SelectRows { x, rows } => {
            let src = val(*x);
            let row_len = src.numel() / src.shape()[0];
            let mut dx = vec![0.0; src.numel()];
            for (o, &i) in rows.iter().enumerate() {
                for j in 0..row_len {
                    dx[i * row_len + j] += gd[o * row_len + j];
                }
            }
            vec![(*x, Tensor::from_parts(src.shape().to_vec(), dx))]
        }
        Op::Reshape(x) => vec![(*x, g.reshape(val(*x).shape())?)],
        Op::Conv2d { x, w, stride, pad } => {
            let (dx, dw) = conv2d_backward(val(*x), val(*w), g, *stride, *pad)?;
            vec![(*x, dx), (*w, dw)]
        }
        Op::BnNormalize { x, inv_std } => {
            let (b, c, area) = channel_layout(out)?;
            let m = (b * area) as f64;
            let xhat = out.data();
            let mut sum_g = vec![0.0; c];
            let mut sum_gx = vec![0.0; c];
            for s in 0..b {
                for ch in 0..c {
                    let base = (s * c + ch) * area;
                    for i in base..base + area {
                        sum_g[ch] += gd[i];
                        sum_gx[ch] += gd[i] * xhat[i];
                    }
                }
            }
            if graph.faults.corrupt_bn_backward {
                sum_g.iter_mut().for_each(|v| *v = 0.0);
            }
            let mut dx = vec![0.0; out.numel()];
            for s in 0..b {
                for ch in 0..c {
                    let base = (s * c + ch) * area;
                    let k = inv_std[ch] / m;
                    for i in base..base + area {
                        dx[i] = k * (m * gd[i] - sum_g[ch] - xhat[i] * sum_gx[ch]);
                    }
                }
            }
            vec![(*x, Tensor::from_parts(out.shape().to_vec(), dx))]
        }
        Op::ChannelNormalize { x, inv_std } => {
            let (_, c, area) = channel_layout(out)?;
            let mut dx = gd.to_vec();
            for (bc, chunk) in dx.chunks_mut(area).enumerate() {
                let s = inv_std[bc % c];
                chunk.iter_mut().for_each(|v| *v *= s);
            }
            vec![(*x, Tensor::from_parts(out.shape().to_vec(), dx))]
        }
        Op::ChannelAffine { x, scale, shift } => {
            let xt = val(*x);
            let (b, c, area) = channel_layout(xt)?;
            let sc = val(*scale).data();
            let mut dx = gd.to_vec();
            let mut dscale = vec![0.0; b * c];
            let mut dshift = vec![0.0; b * c];
            for bc in 0..b * c {
                let r = bc * area..(bc + 1) * area;
                for i in r {
                    dx[i] *= sc[bc];
                    dscale[bc] += gd[i] * xt.data()[i];
                    dshift[bc] += gd[i];
                }
            }
            vec![
                (*x, Tensor::from_parts(xt.shape().to_vec(), dx)),
                (*scale, Tensor::from_parts(vec![b, c], dscale)),
                (*shift, Tensor::from_parts(vec![b, c], dshift)),
            ]
        }
        Op::Relu(x) => vec![(*x, zip_map(val(*x), g, |x, g| if x > 0.0 { g } else { 0.0 }))],
        Op::Silu(x) => vec![(
            *x,
            zip_map(val(*x), g, |x, g| {
                let s = sigmoid(x);
                g * s * (1.0 + x * (1.0 - s))
            }),
        )],
        Op::Selu(x) => vec![(
            *x,
            zip_map(val(*x), g, |x, g| {
                g * SELU_LAMBDA * if x > 0.0 { 1.0 } else { SELU_ALPHA * x.exp() }
            }),
        )],
        Op::Sigmoid(x) => vec![(*x, zip_map(out, g, |s, g| g * s * (1.0 - s)))],
        Op::MaxPool { x, argmax } => {
            let mut dx = vec![0.0; val(*x).numel()];
            for (o, &i) in argmax.iter().enumerate() {
                dx[i] += gd[o];
            }
            vec![(*x, Tensor::from_parts(val(*x).shape().to_vec(), dx))]
        }
        Op::AvgPool { x, k, stride } => {
            let (n, c, h, w) = val(*x).dims4()?;
            let (_, _, oh, ow) = out.dims4()?;
            let norm = 1.0 / (k * k) as f64;
            let mut dx = vec![0.0; n * c * h * w];
            for plane in 0..n * c {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let gv = gd[(plane * oh + oy) * ow + ox] * norm;
                        for ky in 0..*k {
                            for kx in 0..*k {
                                dx[plane * h * w + (oy * stride + ky) * w + ox * stride + kx] += gv;
                            }
                        }
                    }
                }
            }
            vec![(*x, Tensor::from_parts(vec![n, c, h, w], dx))]
        }
        Op::GlobalAvgPool(x) => {
            let (n, c, h, w) = val(*x).dims4()?;
            let area = h * w;
            let mut dx = vec![0.0; n * c * area];
            for (bc, chunk) in dx.chunks_mut(area).enumerate() {
                chunk.fill(gd[bc] / area as f64);
            }
            vec![(*x, Tensor::from_parts(vec![n, c, h, w], dx))]
        }
        Op::ClassMeans { x, labels, counts } => {
            let (r, m) = val(*x).dims2()?;
            let mut dx = vec![0.0; r * m];
            for (i, &k) in labels.iter().enumerate() {
                for j in 0..m {
                    dx[i * m + j] = gd[k * m + j] / counts[k] as f64;
                }
            }
            vec![(*x, Tensor::from_parts(vec![r, m], dx))]
        }
        Op::SqDist { q, c } => {
            let (bq, m, n) = pair_dims(graph, *q, *c)?;
            let (qd, cd) = (val(*q).data(), val(*c).data());
            let mut dq = vec![0.0; bq * m];
            let mut dc = vec![0.0; n * m];
            for i in 0..bq {
                for k in 0..n {
                    let gk = 2.0 * gd[i * n + k];
                    for j in 0..m {
                        let d = gk * (qd[i * m + j] - cd[k * m + j]);
                        dq[i * m + j] += d;
                        dc[k * m + j] -= d;
                    }
                }
            }
            vec![
                (*q, Tensor::from_parts(vec![bq, m], dq)),
                (*c, Tensor::from_parts(vec![n, m], dc)),
            ]
        }
        Op::CosineDist { q, c } => {
            let (bq, m, n) = pair_dims(graph, *q, *c)?;
            let (qd, cd) = (val(*q).data(), val(*c).data());
            let mut dq = vec![0.0; bq * m];
            let mut dc = vec![0.0; n * m];
            for i in 0..bq {
                let qi = &qd[i * m..(i + 1) * m];
                for k in 0..n {
                    let ck = &cd[k * m..(k + 1) * m];
                    let gk = -gd[i * n + k];
                    cosine_grad_into(qi, ck, gk, &mut dq[i * m..(i + 1) * m]);
                    cosine_grad_into(ck, qi, gk, &mut dc[k * m..(k + 1) * m]);
                }
            }
            vec![
                (*q, Tensor::from_parts(vec![bq, m], dq)),
                (*c, Tensor::from_parts(vec![n, m], dc)),
            ]
        }
        Op::CrossEntropy { logits, labels, probs } => {
            let (r, n) = probs.dims2()?;
            let scale = gd[0] / r as f64;
            let mut dl = probs.data().to_vec();
            for (i, &l) in labels.iter().enumerate() {
                dl[i * n + l] -= 1.0;
            }
            dl.iter_mut().for_each(|v| *v *= scale);
            vec![(*logits, Tensor::from_parts(vec![r, n], dl))]
        }
        Op::MultilabelSoftMargin { logits, targets } => {
            let x = val(*logits);
            let scale = gd[0] / x.numel() as f64;
            vec![(*logits, zip_map(x, targets, |x, y| scale * (sigmoid(x) - y)))]
        }
        Op::CosineEmbedding { pred, target } => {
            let p = val(*pred);
            let (r, e) = p.dims2()?;
            let mut dp = vec![0.0; r * e];
            let scale = -gd[0] / r as f64;
            for b in 0..r {
                let span = b * e..(b + 1) * e;
                cosine_grad_into(
                    &p.data()[span.clone()],
                    &target.data()[span.clone()],
                    scale,
                    &mut dp[span],
                );
            }
            vec![(*pred, Tensor::from_parts(vec![r, e], dp))]
        }
        Op::Mean(x) => {
            let t = val(*x);
            vec![(*x, Tensor::full(t.shape(), gd[0] / t.numel() as f64))]
        }
        Op::Sum(x) => vec![(*x, Tensor::full(val(*x).shape(), gd[0]))],
        Op::Dot { x, weights } => vec![(*x, weights.map(|w| w * gd[0]))],
    })
}

fn column_sums(g: &Tensor) -> Result<Tensor> {
    let (r, c) = g.dims2()?;
    let mut out = vec![0.0; c];
    for row in g.data().chunks_exact(c).take(r) {
        for (o, v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
    Ok(Tensor::from_parts(vec![c], out))
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::from_parts(a.shape().to_vec(), data)
}
