//! Batch normalization and its conditional (per-sample modulated) form.
//!
//! Conditioning only touches the affine terms: the effective scale and shift
//! for sample `b` are `γ + Δγ_b` and `β + Δβ_b`. Batch statistics and running
//! statistics are the same whether or not deltas are supplied.

use crate::autodiff::{BatchStats, Graph, Var};
use crate::error::{Error, Result};
use crate::params::{ParamStore, Role};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

pub const DEFAULT_EPSILON: f64 = 1e-5;
pub const DEFAULT_MOMENTUM: f64 = 0.1;

/// Standalone batch-norm state for tensor-level use.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormState {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Tensor,
    pub running_var: Tensor,
    pub epsilon: f64,
    pub momentum: f64,
    pub mode: Mode,
}

impl BatchNormState {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: Tensor::ones(&[channels]),
            beta: Tensor::zeros(&[channels]),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::ones(&[channels]),
            epsilon: DEFAULT_EPSILON,
            momentum: DEFAULT_MOMENTUM,
            mode: Mode::Train,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.numel()
    }

    fn validate(&self) -> Result<()> {
        let c = self.channels();
        for t in [&self.beta, &self.running_mean, &self.running_var] {
            if t.shape() != [c] {
                return Err(Error::shape(format!(
                    "batch-norm state tensor {:?} for {c} channels",
                    t.shape()
                )));
            }
        }
        if self.epsilon.is_nan() || self.epsilon <= 0.0 {
            return Err(Error::invalid("batch-norm epsilon must be positive"));
        }
        if !(self.momentum > 0.0 && self.momentum <= 1.0) {
            return Err(Error::invalid("batch-norm momentum must lie in (0, 1]"));
        }
        if self.running_var.data().iter().any(|&v| v < 0.0) {
            return Err(Error::invalid("negative running variance"));
        }
        Ok(())
    }
}

/// Blends observed batch statistics into running statistics.
pub fn update_running(running_mean: &mut Tensor, running_var: &mut Tensor, stats: &BatchStats, momentum: f64) {
    for (r, m) in running_mean.data_mut().iter_mut().zip(&stats.mean) {
        *r = (1.0 - momentum) * *r + momentum * m;
    }
    for (r, v) in running_var.data_mut().iter_mut().zip(&stats.var) {
        *r = (1.0 - momentum) * *r + momentum * v;
    }
}

/// Graph-level (conditional) batch norm. `delta` holds per-sample `(Δγ, Δβ)`,
/// each `B×C`. Returns the observed batch statistics in training mode.
#[allow(clippy::too_many_arguments)]
pub fn bn_forward(
    g: &mut Graph,
    x: Var,
    gamma: Var,
    beta: Var,
    running: (&[f64], &[f64]),
    epsilon: f64,
    mode: Mode,
    delta: Option<(Var, Var)>,
) -> Result<(Var, Option<BatchStats>)> {
    let batch = *g
        .value(x)
        .shape()
        .first()
        .ok_or_else(|| Error::shape("batch norm on a scalar"))?;
    let (xhat, stats) = match mode {
        Mode::Train => {
            let (v, s) = g.bn_normalize(x, epsilon)?;
            (v, Some(s))
        }
        Mode::Eval => (g.channel_normalize(x, running.0, running.1, epsilon)?, None),
    };
    let mut scale = g.broadcast_rows(gamma, batch)?;
    let mut shift = g.broadcast_rows(beta, batch)?;
    if let Some((dg, db)) = delta {
        let want = g.value(scale).shape().to_vec();
        for d in [dg, db] {
            if g.value(d).shape() != want.as_slice() {
                return Err(Error::shape(format!(
                    "modulation delta {:?} misaligned with layer expecting {want:?}",
                    g.value(d).shape()
                )));
            }
        }
        scale = g.add(scale, dg)?;
        shift = g.add(shift, db)?;
    }
    let y = g.channel_affine(xhat, scale, shift)?;
    Ok((y, stats))
}

fn run_tensor_bn(x: &Tensor, state: &mut BatchNormState, delta: Option<(&Tensor, &Tensor)>) -> Result<Tensor> {
    state.validate()?;
    let c = state.channels();
    if x.rank() < 2 || x.shape()[1] != c {
        return Err(Error::shape(format!(
            "batch norm with {c} channels applied to {:?}",
            x.shape()
        )));
    }
    let mut store = ParamStore::new();
    store.insert("gamma", state.gamma.clone(), Role::BnGamma);
    store.insert("beta", state.beta.clone(), Role::BnBeta);
    let mut g = Graph::new();
    let xv = g.input(x.clone());
    let gamma = g.param(&store, "gamma")?;
    let beta = g.param(&store, "beta")?;
    let delta = delta.map(|(dg, db)| (g.input(dg.clone()), g.input(db.clone())));
    let (y, stats) = bn_forward(
        &mut g,
        xv,
        gamma,
        beta,
        (state.running_mean.data(), state.running_var.data()),
        state.epsilon,
        state.mode,
        delta,
    )?;
    if let Some(stats) = stats {
        update_running(&mut state.running_mean, &mut state.running_var, &stats, state.momentum);
    }
    Ok(g.value(y).clone())
}

/// Channel-wise batch normalization of `B×C×H×W` (or `B×C`). Training mode
/// normalizes with batch statistics (biased variance) and updates the running
/// statistics; evaluation mode uses the running statistics.
pub fn batch_norm(x: &Tensor, state: &mut BatchNormState) -> Result<Tensor> {
    run_tensor_bn(x, state, None)
}

/// [`batch_norm`] followed by per-sample affine terms `γ + Δγ_b`, `β + Δβ_b`.
pub fn conditional_batch_norm(
    x: &Tensor,
    state: &mut BatchNormState,
    delta_gamma: &Tensor,
    delta_beta: &Tensor,
) -> Result<Tensor> {
    run_tensor_bn(x, state, Some((delta_gamma, delta_beta)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeededRng;

    fn channel_stats(y: &Tensor, c: usize) -> Vec<(f64, f64)> {
        let (b, _, h, w) = y.dims4().unwrap();
        (0..c)
            .map(|ch| {
                let vals: Vec<f64> = (0..b)
                    .flat_map(|s| {
                        let base = (s * c + ch) * h * w;
                        y.data()[base..base + h * w].to_vec()
                    })
                    .collect();
                let m = vals.iter().sum::<f64>() / vals.len() as f64;
                let v = vals.iter().map(|x| (x - m).powi(2)).sum::<f64>() / vals.len() as f64;
                (m, v)
            })
            .collect()
    }

    #[test]
    fn training_mode_standardizes_each_channel() {
        let mut rng = SeededRng::new(1);
        let x = Tensor::randn(&[4, 3, 3, 3], 3.0, &mut rng).map(|v| v + 5.0);
        let mut st = BatchNormState::new(3);
        let y = batch_norm(&x, &mut st).unwrap();
        for ((m, v), (_, raw)) in channel_stats(&y, 3).into_iter().zip(channel_stats(&x, 3)) {
            assert!(m.abs() <= 1e-10);
            // epsilon shrinks the variance to raw / (raw + eps)
            assert!((v - raw / (raw + DEFAULT_EPSILON)).abs() <= 1e-6);
        }
    }

    #[test]
    fn hand_case_four_values() {
        let x = Tensor::new(vec![4, 1], vec![1., 2., 3., 4.]).unwrap();
        let mut st = BatchNormState::new(1);
        let y = batch_norm(&x, &mut st).unwrap();
        for (got, want) in y.data().iter().zip([-1.3416, -0.4472, 0.4472, 1.3416]) {
            assert!((got - want).abs() <= 1e-3, "{got} vs {want}");
        }
        // running stats moved by momentum 0.1 toward (2.5, 1.25)
        assert!((st.running_mean.data()[0] - 0.25).abs() < 1e-12);
        assert!((st.running_var.data()[0] - (0.9 + 0.125)).abs() < 1e-12);
    }

    #[test]
    fn affine_on_standardized_input() {
        let mut rng = SeededRng::new(2);
        let raw = Tensor::randn(&[8, 2, 2, 2], 1.0, &mut rng);
        let mut st = BatchNormState::new(2);
        let xs = batch_norm(&raw, &mut st).unwrap();
        let mut st = BatchNormState::new(2);
        st.gamma = Tensor::full(&[2], 2.0);
        st.beta = Tensor::full(&[2], 3.0);
        let y = batch_norm(&xs, &mut st).unwrap();
        let want = xs.map(|v| 2.0 * v + 3.0);
        assert!(y.max_abs_diff(&want) < 1e-4);
    }

    #[test]
    fn zero_deltas_match_plain_batch_norm() {
        let mut rng = SeededRng::new(3);
        let x = Tensor::randn(&[3, 4, 2, 2], 1.0, &mut rng);
        for mode in [Mode::Train, Mode::Eval] {
            let mut a = BatchNormState::new(4);
            a.gamma = Tensor::randn(&[4], 1.0, &mut rng);
            a.beta = Tensor::randn(&[4], 1.0, &mut rng);
            a.running_var = Tensor::full(&[4], 0.7);
            a.mode = mode;
            let mut b = a.clone();
            let plain = batch_norm(&x, &mut a).unwrap();
            let z = Tensor::zeros(&[3, 4]);
            let cond = conditional_batch_norm(&x, &mut b, &z, &z).unwrap();
            assert!(plain.max_abs_diff(&cond) <= 1e-12);
            assert_eq!(a, b);
        }
    }

    #[test]
    fn per_sample_deltas_apply_only_to_their_sample() {
        let mut rng = SeededRng::new(4);
        let x = Tensor::randn(&[2, 1, 3, 3], 1.0, &mut rng);
        let mut st = BatchNormState::new(1);
        let xhat = batch_norm(&x, &mut st.clone()).unwrap();
        let dg = Tensor::new(vec![2, 1], vec![0.0, 1.0]).unwrap();
        let db = Tensor::new(vec![2, 1], vec![0.0, -1.0]).unwrap();
        let y = conditional_batch_norm(&x, &mut st, &dg, &db).unwrap();
        for i in 0..9 {
            assert!((y.data()[i] - xhat.data()[i]).abs() < 1e-12);
            let want = 2.0 * xhat.data()[9 + i] - 1.0;
            assert!((y.data()[9 + i] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn degenerate_and_misaligned_inputs() {
        let mut st = BatchNormState::new(2);
        let single = Tensor::zeros(&[1, 2, 1, 1]);
        assert!(matches!(batch_norm(&single, &mut st), Err(Error::DegenerateStatistics(_))));
        st.mode = Mode::Eval;
        assert!(batch_norm(&single, &mut st).is_ok());
        let x = Tensor::zeros(&[2, 2, 2, 2]);
        let bad = Tensor::zeros(&[2, 3]);
        assert!(matches!(
            conditional_batch_norm(&x, &mut st, &bad, &bad),
            Err(Error::Shape(_))
        ));
        assert!(batch_norm(&Tensor::zeros(&[2, 3, 2, 2]), &mut st).is_err());
    }

    #[test]
    fn constant_channel_is_handled_by_epsilon() {
        let x = Tensor::full(&[4, 1, 2, 2], 3.0);
        let y = batch_norm(&x, &mut BatchNormState::new(1)).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }
}
