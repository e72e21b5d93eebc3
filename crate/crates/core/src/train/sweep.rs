use super::eval::{mean_ci, EvalReport};
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct SeedResult {
    pub seed: u64,
    pub outcome: std::result::Result<EvalReport, String>,
}

/// Cross-seed aggregate over the seeds that completed.
#[derive(Clone, Debug)]
pub struct SweepReport {
    pub per_seed: Vec<SeedResult>,
    pub mean: f64,
    /// 95% CI half-width of the per-seed means.
    pub ci95: f64,
    pub std: f64,
    pub min: f64,
    pub max: f64,
    /// Seeds whose mean lies more than two standard deviations from the
    /// other seeds' mean.
    pub outliers: Vec<u64>,
}

impl SweepReport {
    pub fn completed(&self) -> impl Iterator<Item = (u64, &EvalReport)> {
        self.per_seed
            .iter()
            .filter_map(|r| r.outcome.as_ref().ok().map(|rep| (r.seed, rep)))
    }

    pub fn failures(&self) -> impl Iterator<Item = (u64, &str)> {
        self.per_seed
            .iter()
            .filter_map(|r| r.outcome.as_ref().err().map(|e| (r.seed, e.as_str())))
    }
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = if values.len() < 2 {
        0.0
    } else {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    };
    (mean, std)
}

/// Indices of values further than two sample standard deviations from the
/// mean of the remaining values. Needs at least four values, so the
/// reference statistics always come from three or more seeds.
pub fn flag_outliers(values: &[f64]) -> Vec<usize> {
    if values.len() < 4 {
        return Vec::new();
    }
    (0..values.len())
        .filter(|&i| {
            let others: Vec<f64> = values
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != i)
                .map(|(_, &v)| v)
                .collect();
            let (m, s) = mean_std(&others);
            (values[i] - m).abs() > 2.0 * s
        })
        .collect()
}

/// Runs `run` once per seed. Failing seeds are recorded and the sweep
/// continues; the aggregate covers completed seeds.
pub fn seed_sweep<F>(seeds: &[u64], mut run: F) -> Result<SweepReport>
where
    F: FnMut(u64) -> Result<EvalReport>,
{
    if seeds.len() < 2 {
        return Err(Error::Config(format!(
            "a seed sweep needs at least 2 seeds, got {}",
            seeds.len()
        )));
    }
    let per_seed: Vec<SeedResult> = seeds
        .iter()
        .map(|&seed| SeedResult {
            seed,
            outcome: run(seed).map_err(|e| e.to_string()),
        })
        .collect();
    aggregate(per_seed)
}

/// Builds the aggregate from already-computed per-seed results.
pub fn aggregate(per_seed: Vec<SeedResult>) -> Result<SweepReport> {
    let (seeds, means): (Vec<u64>, Vec<f64>) = per_seed
        .iter()
        .filter_map(|r| r.outcome.as_ref().ok().map(|rep| (r.seed, rep.mean)))
        .unzip();
    if means.is_empty() {
        let detail: Vec<String> = per_seed
            .iter()
            .filter_map(|r| r.outcome.as_ref().err().map(|e| format!("seed {}: {e}", r.seed)))
            .collect();
        return Err(Error::InsufficientData(format!(
            "every seed failed ({})",
            detail.join("; ")
        )));
    }
    let (mean, ci95) = mean_ci(&means)?;
    let (_, std) = mean_std(&means);
    Ok(SweepReport {
        mean,
        ci95,
        std,
        min: means.iter().copied().fold(f64::INFINITY, f64::min),
        max: means.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        outliers: flag_outliers(&means).into_iter().map(|i| seeds[i]).collect(),
        per_seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fifth_seed_is_flagged() {
        assert_eq!(flag_outliers(&[0.7, 0.72, 0.71, 0.69, 0.95]), vec![4]);
        assert!(flag_outliers(&[0.5; 5]).is_empty());
        assert!(flag_outliers(&[0.1, 0.9]).is_empty());
        assert!(flag_outliers(&[0.65, 0.5, 0.6]).is_empty());
    }
}
