use super::{Faults, Graph, Var};
use crate::error::{Error, Result};
use crate::params::ParamStore;

/// Outcome of a finite-difference comparison.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Parameter name and flat index of the worst element.
    pub worst: Option<(String, usize)>,
    pub checked: usize,
    /// Elements whose ±ε evaluations crossed a non-smooth branch.
    pub skipped: usize,
}

/// Compares the tape's gradients of `build`'s scalar output against central
/// differences `(f(θ+ε) − f(θ−ε)) / 2ε`, element by element, for every
/// parameter named in `names` (all parameters when empty).
///
/// Relative error uses the denominator `max(|analytic|, |numeric|, 1e-8)`.
/// Elements whose perturbation flips a ReLU sign or max-pool winner are
/// skipped, since neither side is meaningful there.
pub fn grad_check<F>(
    store: &mut ParamStore,
    names: &[&str],
    epsilon: f64,
    faults: Faults,
    mut build: F,
) -> Result<GradCheckReport>
where
    F: FnMut(&mut Graph, &ParamStore) -> Result<Var>,
{
    if !(epsilon > 0.0 && epsilon <= 1e-2) {
        return Err(Error::invalid(format!("epsilon {epsilon} outside (0, 1e-2]")));
    }
    let mut g = Graph::with_faults(faults);
    let out = build(&mut g, store)?;
    let base_signature = g.kink_signature();
    let grads = g.backward(out)?;
    drop(g);

    let names: Vec<String> = if names.is_empty() {
        store.names()
    } else {
        names.iter().map(|s| s.to_string()).collect()
    };

    let mut eval = |store: &ParamStore| -> Result<(f64, u64)> {
        let mut g = Graph::with_faults(faults);
        let out = build(&mut g, store)?;
        let v = g.value(out).item()?;
        if !v.is_finite() {
            return Err(Error::NonFinite("grad_check perturbed loss"));
        }
        Ok((v, g.kink_signature()))
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
        skipped: 0,
    };
    for name in &names {
        let analytic = grads
            .get(name)
            .ok_or_else(|| Error::Unbound(name.clone()))?
            .clone();
        for i in 0..analytic.numel() {
            let orig = store.get(name)?.value.data()[i];
            store.get_mut(name)?.value.data_mut()[i] = orig + epsilon;
            let plus = eval(store);
            store.get_mut(name)?.value.data_mut()[i] = orig - epsilon;
            let minus = eval(store);
            store.get_mut(name)?.value.data_mut()[i] = orig;
            let ((fp, sp), (fm, sm)) = (plus?, minus?);
            if sp != base_signature || sm != base_signature {
                report.skipped += 1;
                continue;
            }
            let numeric = (fp - fm) / (2.0 * epsilon);
            let a = analytic.data()[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            report.checked += 1;
            if rel > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(rel);
                if rel >= report.max_rel_error {
                    report.worst = Some((name.clone(), i));
                }
            }
        }
    }
    Ok(report)
}
