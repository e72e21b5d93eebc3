use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::error::Result;
use crate::model::Variant;
use crate::train::{aggregate, mean_ci, EvalReport, SeedResult, SweepReport};

/// `"88.5 ± 0.5"` from fractions.
pub fn pct(mean: f64, ci: f64) -> String {
    format!("{:.1} ± {:.1}", 100.0 * mean, 100.0 * ci)
}

fn signed_pct(mean: f64, ci: f64) -> String {
    let m = 100.0 * mean;
    let m = if m.abs() < 0.05 { 0.0 } else { m };
    format!("{}{:.1} ± {:.1}", if m > 0.0 { "+" } else { "" }, m, 100.0 * ci)
}

/// One variant's runs, keyed by training seed.
#[derive(Clone, Debug, Default)]
pub struct VariantRuns {
    pub runs: BTreeMap<u64, std::result::Result<EvalReport, String>>,
}

/// Collected results of a comparison experiment.
#[derive(Clone, Debug, Default)]
pub struct Comparison {
    pub variants: Vec<(Variant, VariantRuns)>,
}

impl Comparison {
    pub fn record(&mut self, variant: Variant, seed: u64, outcome: std::result::Result<EvalReport, String>) {
        let idx = match self.variants.iter().position(|(v, _)| *v == variant) {
            Some(i) => i,
            None => {
                self.variants.push((variant, VariantRuns::default()));
                self.variants.len() - 1
            }
        };
        self.variants[idx].1.runs.insert(seed, outcome);
    }

    pub fn runs(&self, variant: Variant) -> Option<&VariantRuns> {
        self.variants.iter().find(|(v, _)| *v == variant).map(|(_, r)| r)
    }

    fn seeds(&self) -> Vec<u64> {
        let mut s: Vec<u64> = self
            .variants
            .iter()
            .flat_map(|(_, r)| r.runs.keys().copied())
            .collect();
        s.sort_unstable();
        s.dedup();
        s
    }

    pub fn summary(&self, variant: Variant) -> Option<SweepReport> {
        let runs = self.runs(variant)?;
        let per_seed = runs
            .runs
            .iter()
            .map(|(&seed, o)| SeedResult {
                seed,
                outcome: o.clone(),
            })
            .collect();
        aggregate(per_seed).ok()
    }

    /// Pooled per-episode difference `a − b` over every seed where both
    /// variants completed on the same episode stream.
    pub fn paired_delta(&self, a: Variant, b: Variant) -> Option<(f64, f64, usize)> {
        let (ra, rb) = (self.runs(a)?, self.runs(b)?);
        let mut diffs = Vec::new();
        let mut seeds = 0;
        for (seed, oa) in &ra.runs {
            if let (Ok(x), Some(Ok(y))) = (oa, rb.runs.get(seed)) {
                if x.seed == y.seed && x.episodes() == y.episodes() && x.shape == y.shape {
                    diffs.extend(x.accuracies.iter().zip(&y.accuracies).map(|(p, q)| p - q));
                    seeds += 1;
                }
            }
        }
        let (m, ci) = mean_ci(&diffs).ok()?;
        Some((m, ci, seeds))
    }

    /// Aligned text table: one row per variant with the cross-seed mean
    /// accuracy and 95% CI in percent, per-seed detail, and the paired
    /// delta between the auxiliary-fed and constant-fed bridges.
    pub fn render_table(&self) -> String {
        let seeds = self.seeds();
        let mut rows: Vec<Vec<String>> = vec![vec!["variant".into(), "accuracy (%)".into(), "seeds".into()]];
        for (v, runs) in &self.variants {
            let ok = runs.runs.values().filter(|o| o.is_ok()).count();
            let cell = self.summary(*v).map_or("n/a".to_string(), |s| pct(s.mean, s.ci95));
            rows.push(vec![v.to_string(), cell, format!("{ok}/{}", runs.runs.len())]);
        }
        let mut out = align(&rows);

        out.push_str("\nper-seed accuracy (%)\n");
        let mut detail: Vec<Vec<String>> = vec![std::iter::once("variant".to_string())
            .chain(seeds.iter().map(|s| format!("seed {s}")))
            .collect()];
        for (v, runs) in &self.variants {
            let mut row = vec![v.to_string()];
            for s in &seeds {
                row.push(match runs.runs.get(s) {
                    Some(Ok(r)) => pct(r.mean, r.ci95),
                    Some(Err(_)) => "failed".into(),
                    None => "n/a".into(),
                });
            }
            detail.push(row);
        }
        out.push_str(&align(&detail));

        let outliers: Vec<String> = self
            .variants
            .iter()
            .filter_map(|(v, _)| self.summary(*v).map(|s| (v, s)))
            .filter(|(_, s)| !s.outliers.is_empty())
            .map(|(v, s)| format!("{v}: seeds {:?}", s.outliers))
            .collect();
        if !outliers.is_empty() {
            let _ = writeln!(out, "\noutlier seeds (> 2 std from the other seeds): {}", outliers.join("; "));
        }

        let pairs = [(Variant::Auxiliary, Variant::Ablation), (Variant::Oracle, Variant::Ablation)];
        let mut wrote_header = false;
        for (a, b) in pairs {
            if self.runs(a).is_none() || self.runs(b).is_none() {
                continue;
            }
            if !wrote_header {
                out.push_str("\npaired per-episode delta (points)\n");
                wrote_header = true;
            }
            let cell = self
                .paired_delta(a, b)
                .map_or("n/a".to_string(), |(m, ci, n)| format!("{} over {n} seeds", signed_pct(m, ci)));
            let _ = writeln!(out, "{a} - {b}: {cell}");
        }
        let failures: Vec<String> = self
            .variants
            .iter()
            .flat_map(|(v, r)| {
                r.runs
                    .iter()
                    .filter_map(move |(s, o)| o.as_ref().err().map(|e| format!("{v} seed {s}: {e}")))
            })
            .collect();
        if !failures.is_empty() {
            out.push_str("\nfailed runs\n");
            for f in failures {
                let _ = writeln!(out, "{f}");
            }
        }
        out
    }

    /// `variant,mean_pct,ci95_pct,seeds_ok,seeds_total`.
    pub fn render_csv(&self) -> String {
        let mut out = String::from("variant,mean_pct,ci95_pct,seeds_ok,seeds_total\n");
        for (v, runs) in &self.variants {
            let ok = runs.runs.values().filter(|o| o.is_ok()).count();
            let (m, ci) = self
                .summary(*v)
                .map_or((String::new(), String::new()), |s| {
                    (format!("{:.4}", 100.0 * s.mean), format!("{:.4}", 100.0 * s.ci95))
                });
            let _ = writeln!(out, "{v},{m},{ci},{ok},{}", runs.runs.len());
        }
        out
    }

    /// `variant,seed,mean_pct,ci95_pct,episodes,status`.
    pub fn render_seed_csv(&self) -> String {
        let mut out = String::from("variant,seed,mean_pct,ci95_pct,episodes,status\n");
        for (v, runs) in &self.variants {
            for (s, o) in &runs.runs {
                match o {
                    Ok(r) => {
                        let _ = writeln!(
                            out,
                            "{v},{s},{:.4},{:.4},{},ok",
                            100.0 * r.mean,
                            100.0 * r.ci95,
                            r.episodes()
                        );
                    }
                    Err(_) => {
                        let _ = writeln!(out, "{v},{s},,,,failed");
                    }
                }
            }
        }
        out
    }
}

fn align(rows: &[Vec<String>]) -> String {
    let cols = rows.iter().map(Vec::len).max().unwrap_or(0);
    let widths: Vec<usize> = (0..cols)
        .map(|c| rows.iter().filter_map(|r| r.get(c)).map(|s| s.chars().count()).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for (i, row) in rows.iter().enumerate() {
        let line: Vec<String> = row
            .iter()
            .enumerate()
            .map(|(c, s)| format!("{s:<w$}", w = widths[c]))
            .collect();
        let _ = writeln!(out, "{}", line.join("  ").trim_end());
        if i == 0 {
            let rule: Vec<String> = widths.iter().map(|&w| "-".repeat(w)).collect();
            let _ = writeln!(out, "{}", rule.join("  "));
        }
    }
    out
}

/// Mean/CI of a single report list, as a convenience for callers that
/// hold raw reports.
pub fn summarize(reports: &[EvalReport]) -> Result<(f64, f64)> {
    let means: Vec<f64> = reports.iter().map(|r| r.mean).collect();
    mean_ci(&means)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Split;
    use crate::fewshot::EpisodeShape;

    fn report(variant: Variant, accs: &[f64]) -> EvalReport {
        EvalReport::new(variant, Split::Test, EpisodeShape::default(), 9, accs.to_vec()).unwrap()
    }

    #[test]
    fn table_has_one_row_per_variant_with_one_decimal() {
        let mut c = Comparison::default();
        c.record(Variant::Baseline, 1, Ok(report(Variant::Baseline, &[0.88, 0.89])));
        c.record(Variant::Baseline, 2, Ok(report(Variant::Baseline, &[0.885, 0.885])));
        c.record(Variant::Ablation, 1, Err("diverged".into()));
        let t = c.render_table();
        let first: Vec<&str> = t.lines().take(4).collect();
        assert!(first[0].starts_with("variant"));
        assert!(first[2].starts_with("baseline  88.5 ± 0.0"), "{t}");
        assert!(first[3].contains("n/a"));
        assert!(t.contains("ablation seed 1: diverged"));
    }

    #[test]
    fn self_delta_is_zero() {
        let mut c = Comparison::default();
        c.record(Variant::Auxiliary, 1, Ok(report(Variant::Auxiliary, &[0.5, 0.7, 0.9])));
        let (m, ci, n) = c.paired_delta(Variant::Auxiliary, Variant::Auxiliary).unwrap();
        assert_eq!((m, ci, n), (0.0, 0.0, 1));
        assert_eq!(signed_pct(m, ci), "0.0 ± 0.0");
    }
}
