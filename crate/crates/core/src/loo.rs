//! Leave-one-out cross-validation over cells: Pareto-smoothed importance
//! sampling, exact refits for checking it, and model comparison.

use std::io::Write;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::math::{log_sum_exp, quantile_sorted, variance};
use crate::model::{pointwise_cell_loglik, Effects, Measurement, ModelData};
use crate::sampler::{sample_model, DrawsMatrix, SamplerConfig};

/// Pointwise log-likelihood, draw-major: `values[d * cells + j]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogLikMatrix {
    pub draws: usize,
    pub cells: usize,
    pub values: Vec<f64>,
    pub cell_labels: Vec<String>,
    /// Digest of the cell keys and counts, used to refuse comparisons of
    /// fits on different data.
    pub cells_digest: String,
}

impl LogLikMatrix {
    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.draws)
            .map(|d| self.values[d * self.cells + j])
            .collect()
    }
}

/// Labels like `female|18-34|White|48104|3`, one per compiled cell.
pub fn cell_labels(data: &ModelData) -> Vec<String> {
    data.cells
        .iter()
        .map(|c| {
            format!(
                "{}|{}|{}|{}|{}",
                if c.male { "male" } else { "female" },
                data.levels.age[c.age],
                data.levels.race[c.race],
                data.levels.zip[c.zip],
                c.week
            )
        })
        .collect()
}

fn cells_digest(data: &ModelData, keep: &[usize], labels: &[String]) -> String {
    let mut h = Sha256::new();
    for &j in keep {
        h.update(labels[j].as_bytes());
        h.update(format!(":{}:{};", data.n[j], data.y[j]).as_bytes());
    }
    hex::encode(h.finalize())
}

/// Binomial log-pmf (coefficient included) of every cell with tests, for
/// every draw.
pub fn pointwise_loglik(draws: &DrawsMatrix, data: &ModelData) -> Result<LogLikMatrix> {
    if draws.dim() != data.dim() || draws.names != data.layout.labels() {
        return Err(Error::Dimension(format!(
            "draws have {} columns but the model has {} parameters",
            draws.dim(),
            data.dim()
        )));
    }
    let keep: Vec<usize> = (0..data.n_cells()).filter(|&j| data.n[j] > 0).collect();
    let all_labels = cell_labels(data);
    let mut row = vec![0.0; data.n_cells()];
    let mut values = Vec::with_capacity(draws.n_draws() * keep.len());
    for d in 0..draws.n_draws() {
        pointwise_cell_loglik(data, draws.draw(d), &mut row);
        values.extend(keep.iter().map(|&j| row[j]));
    }
    if let Some(v) = values.iter().find(|v| !v.is_finite()) {
        return Err(Error::Invalid(format!("non-finite log-likelihood {v}")));
    }
    Ok(LogLikMatrix {
        draws: draws.n_draws(),
        cells: keep.len(),
        values,
        cell_labels: keep.iter().map(|&j| all_labels[j].clone()).collect(),
        cells_digest: cells_digest(data, &keep, &all_labels),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LooResult {
    pub elpd_loo: f64,
    pub se_elpd_loo: f64,
    pub p_loo: f64,
    /// In-sample log predictive density `Σ_j log mean_d exp ll(d, j)`.
    pub lpd: f64,
    pub pointwise: Vec<f64>,
    pub pareto_k: Vec<f64>,
    pub cell_labels: Vec<String>,
    pub cells_digest: String,
    pub warnings: Vec<String>,
}

/// Shape and scale of a generalized Pareto fit (Zhang–Stephens profile
/// posterior with the weakly informative shrinkage of k toward 0.5).
pub fn gpd_fit(x: &[f64]) -> (f64, f64) {
    let n = x.len();
    let prior = 3.0;
    let m = 30 + (n as f64).sqrt() as usize;
    let xstar = x[((n as f64) / 4.0 + 0.5).floor() as usize - 1];
    let theta: Vec<f64> = (1..=m)
        .map(|j| 1.0 / x[n - 1] + (1.0 - (m as f64 / (j as f64 - 0.5)).sqrt()) / prior / xstar)
        .collect();
    let l_theta: Vec<f64> = theta
        .iter()
        .map(|&t| {
            let a = -t;
            let k = x.iter().map(|v| (a * v).ln_1p()).sum::<f64>() / n as f64;
            n as f64 * ((a / k).ln() - k - 1.0)
        })
        .collect();
    let lse = log_sum_exp(&l_theta);
    let theta_hat: f64 = theta
        .iter()
        .zip(&l_theta)
        .map(|(t, l)| t * (l - lse).exp())
        .sum();
    let k = x.iter().map(|v| (-theta_hat * v).ln_1p()).sum::<f64>() / n as f64;
    let sigma = -k / theta_hat;
    let nf = n as f64;
    let k = k * nf / (nf + 10.0) + 10.0 * 0.5 / (nf + 10.0);
    (if k.is_nan() { f64::INFINITY } else { k }, sigma)
}

/// Quantile function of the generalized Pareto distribution.
pub fn gpd_quantile(p: f64, k: f64, sigma: f64) -> f64 {
    if sigma.is_nan() || sigma <= 0.0 {
        return f64::NAN;
    }
    sigma * (-k * (-p).ln_1p()).exp_m1() / k
}

/// Tail length `ceil(min(0.2 S, 3 √S))`.
pub fn psis_tail_len(s: usize) -> usize {
    let s = s as f64;
    (0.2 * s).min(3.0 * s.sqrt()).ceil() as usize
}

/// Smooths one vector of log importance ratios in place; returns k̂.
///
/// The largest `tail_len` ratios are replaced by expected order statistics
/// of the fitted generalized Pareto, then all weights are truncated at the
/// largest raw weight.
pub fn psis_smooth(log_ratios: &mut [f64], tail_len: usize) -> f64 {
    let s = log_ratios.len();
    let max = log_ratios.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    log_ratios.iter_mut().for_each(|v| *v -= max);
    let mut k = 0.0;
    if tail_len >= 5 && tail_len < s {
        let mut ord: Vec<usize> = (0..s).collect();
        ord.sort_by(|&a, &b| log_ratios[a].total_cmp(&log_ratios[b]));
        let tail_ids = &ord[s - tail_len..];
        let lw_tail: Vec<f64> = tail_ids.iter().map(|&i| log_ratios[i]).collect();
        let spread = lw_tail[tail_len - 1] - lw_tail[0];
        // a flat tail means equal weights: nothing to smooth
        if spread.abs() >= f64::EPSILON / 100.0 {
            let cutoff = log_ratios[ord[s - tail_len - 1]];
            let exp_cutoff = cutoff.exp();
            let x: Vec<f64> = lw_tail.iter().map(|v| v.exp() - exp_cutoff).collect();
            let (khat, sigma) = gpd_fit(&x);
            k = khat;
            if khat.is_finite() {
                for (r, &i) in tail_ids.iter().enumerate() {
                    let p = (r as f64 + 0.5) / tail_len as f64;
                    log_ratios[i] = (gpd_quantile(p, khat, sigma) + exp_cutoff).ln();
                }
            }
        }
    }
    log_ratios.iter_mut().for_each(|v| {
        if *v > 0.0 {
            *v = 0.0;
        }
        *v += max;
    });
    k
}

/// PSIS-LOO over the columns of `ll`.
pub fn psis_loo(ll: &LogLikMatrix) -> Result<LooResult> {
    let s = ll.draws;
    let tail = psis_tail_len(s);
    if s < 100 || tail < 5 {
        return Err(Error::Guard(format!(
            "PSIS-LOO needs at least 100 draws, got {s}"
        )));
    }
    let ln_s = (s as f64).ln();
    let mut pointwise = Vec::with_capacity(ll.cells);
    let mut pareto_k = Vec::with_capacity(ll.cells);
    let mut lpd = 0.0;
    for j in 0..ll.cells {
        let col = ll.column(j);
        lpd += log_sum_exp(&col) - ln_s;
        let mut lw: Vec<f64> = col.iter().map(|v| -v).collect();
        let k = psis_smooth(&mut lw, tail);
        let norm = log_sum_exp(&lw);
        let terms: Vec<f64> = lw.iter().zip(&col).map(|(w, l)| w - norm + l).collect();
        pointwise.push(log_sum_exp(&terms));
        pareto_k.push(k);
    }
    let elpd: f64 = pointwise.iter().sum();
    let n = ll.cells as f64;
    let se = if ll.cells > 1 {
        (n * variance(&pointwise)).sqrt()
    } else {
        0.0
    };
    let mut warnings = Vec::new();
    let bad: Vec<&str> = pareto_k
        .iter()
        .zip(&ll.cell_labels)
        .filter(|(k, _)| **k > 0.7)
        .map(|(_, l)| l.as_str())
        .collect();
    if !bad.is_empty() {
        warnings.push(format!(
            "pareto_k > 0.7 for {} cell(s): {}",
            bad.len(),
            bad.join(", ")
        ));
    }
    Ok(LooResult {
        elpd_loo: elpd,
        se_elpd_loo: se,
        p_loo: lpd - elpd,
        lpd,
        pointwise,
        pareto_k,
        cell_labels: ll.cell_labels.clone(),
        cells_digest: ll.cells_digest.clone(),
        warnings,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExactLoo {
    pub elpd: f64,
    pub se: f64,
    pub pointwise: Vec<f64>,
}

/// Largest cell count [`exact_loo`] accepts.
pub const EXACT_LOO_MAX_CELLS: usize = 50;

/// `Σ_j log p(y_j | y_{−j})` by refitting once per held-out cell.
pub fn exact_loo(data: &ModelData, cfg: &SamplerConfig) -> Result<ExactLoo> {
    if data.n_cells() > EXACT_LOO_MAX_CELLS {
        return Err(Error::Guard(format!(
            "exact LOO refits once per cell; {} cells exceeds the limit of {EXACT_LOO_MAX_CELLS}",
            data.n_cells()
        )));
    }
    let m = Measurement::new(data.spec.outcome.sensitivity, data.spec.outcome.specificity);
    let mut pointwise = Vec::with_capacity(data.n_cells());
    for j in 0..data.n_cells() {
        let held = data.without_cell(j);
        let draws = sample_model(&held, cfg, &())?;
        let (n, y, c) = (data.n[j], data.y[j], data.cells[j]);
        let lls: Vec<f64> = (0..draws.n_draws())
            .map(|d| {
                let e = Effects::from_constrained(data, draws.draw(d));
                m.loglik(n, y, e.eta(data, &c)).0 + crate::math::ln_choose(n as f64, y as f64)
            })
            .collect();
        pointwise.push(log_sum_exp(&lls) - (lls.len() as f64).ln());
    }
    let n = pointwise.len() as f64;
    let se = if pointwise.len() > 1 {
        (n * variance(&pointwise)).sqrt()
    } else {
        0.0
    };
    Ok(ExactLoo {
        elpd: pointwise.iter().sum(),
        se,
        pointwise,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub model: String,
    pub elpd_diff: f64,
    pub se_diff: f64,
    pub elpd_loo: f64,
    pub se_elpd_loo: f64,
    /// Whether `elpd_diff ± 2·se_diff` contains 0.
    pub interval_covers_zero: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub rows: Vec<ComparisonRow>,
}

impl Comparison {
    /// Writes `model, elpd_diff, se_diff`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["model", "elpd_diff", "se_diff"])?;
        for r in &self.rows {
            w.write_record([r.model.clone(), r.elpd_diff.to_string(), r.se_diff.to_string()])?;
        }
        w.flush().map_err(|e| Error::io("<comparison>", e))?;
        Ok(())
    }

    pub fn best(&self) -> &str {
        &self.rows[0].model
    }
}

/// Elpd difference `a − b` and its standard error.
pub fn elpd_diff(a: &LooResult, b: &LooResult) -> Result<(f64, f64)> {
    if a.cells_digest != b.cells_digest || a.pointwise.len() != b.pointwise.len() {
        return Err(Error::Invalid(
            "LOO results were computed on different cell sets".into(),
        ));
    }
    let d: Vec<f64> = a
        .pointwise
        .iter()
        .zip(&b.pointwise)
        .map(|(x, y)| x - y)
        .collect();
    let n = d.len() as f64;
    let se = if d.len() > 1 {
        (n * variance(&d)).max(0.0).sqrt()
    } else {
        0.0
    };
    Ok((d.iter().sum(), se))
}

/// Ranks models by elpd_loo; each row reports its difference from the best.
pub fn loo_compare(results: &[(String, LooResult)]) -> Result<Comparison> {
    if results.is_empty() {
        return Err(Error::Invalid("nothing to compare".into()));
    }
    let mut order: Vec<usize> = (0..results.len()).collect();
    order.sort_by(|&a, &b| results[b].1.elpd_loo.total_cmp(&results[a].1.elpd_loo));
    let best = &results[order[0]].1;
    let rows = order
        .iter()
        .map(|&i| {
            let (label, r) = &results[i];
            let (diff, se) = if i == order[0] {
                (0.0, 0.0)
            } else {
                elpd_diff(r, best)?
            };
            Ok(ComparisonRow {
                model: label.clone(),
                elpd_diff: diff,
                se_diff: se,
                elpd_loo: r.elpd_loo,
                se_elpd_loo: r.se_elpd_loo,
                interval_covers_zero: diff - 2.0 * se <= 0.0 && 0.0 <= diff + 2.0 * se,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Comparison { rows })
}

/// Share of Pareto k values above `threshold`, for reports.
pub fn k_summary(result: &LooResult) -> (f64, f64) {
    let mut k = result.pareto_k.clone();
    k.sort_by(f64::total_cmp);
    let max = k.last().copied().unwrap_or(f64::NAN);
    (quantile_sorted(&k, 0.5), max)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn matrix(draws: usize, cells: usize, f: impl Fn(usize, usize) -> f64) -> LogLikMatrix {
        let mut values = Vec::new();
        for d in 0..draws {
            for j in 0..cells {
                values.push(f(d, j));
            }
        }
        LogLikMatrix {
            draws,
            cells,
            values,
            cell_labels: (0..cells).map(|j| format!("c{j}")).collect(),
            cells_digest: "x".into(),
        }
    }

    #[test]
    fn identical_draws_give_plain_sum() {
        let ll = matrix(200, 3, |_, j| -0.5 - j as f64);
        let r = psis_loo(&ll).unwrap();
        assert_eq!(r.elpd_loo, -0.5 - 1.5 - 2.5);
        assert!(r.pareto_k.iter().all(|k| *k == 0.0));
    }

    #[test]
    fn tail_length() {
        assert_eq!(psis_tail_len(100), 20);
        assert_eq!(psis_tail_len(4000), 190);
    }

    #[test]
    fn gpd_quantile_inverts_cdf() {
        let (k, s) = (0.3, 2.0);
        for p in [0.1, 0.5, 0.9] {
            let q = gpd_quantile(p, k, s);
            let cdf = 1.0 - (1.0 + k * q / s).powf(-1.0 / k);
            assert!((cdf - p).abs() < 1e-12);
        }
    }

    #[test]
    fn too_few_draws_is_fatal() {
        assert!(psis_loo(&matrix(50, 2, |_, _| -1.0)).is_err());
    }

    #[test]
    fn compare_single_and_duplicate() {
        let r = psis_loo(&matrix(200, 4, |d, j| -1.0 - ((d * 7 + j) % 5) as f64 * 0.1)).unwrap();
        let one = loo_compare(&[("A".into(), r.clone())]).unwrap();
        assert_eq!((one.rows[0].elpd_diff, one.rows[0].se_diff), (0.0, 0.0));
        let two = loo_compare(&[("A".into(), r.clone()), ("A2".into(), r)]).unwrap();
        assert_eq!(two.rows[1].elpd_diff, 0.0);
        assert_eq!(two.rows[1].se_diff, 0.0);
    }
}
