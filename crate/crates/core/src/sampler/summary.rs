use std::io::Write;

use serde::{Deserialize, Serialize};

use super::convergence::{ess_bulk, ess_tail, split_rhat};
use super::draws::DrawsMatrix;
use crate::error::{Error, Result};
use crate::math::{mean, quantile_sorted, sorted_copy, variance};
use crate::model::{BlockKind, Layout};

/// Value columns of the fit summary, in order.
pub const SUMMARY_COLUMNS: [&str; 7] = [
    "Estimate",
    "Est.Error",
    "l-95%",
    "u-95%",
    "R-hat",
    "Bulk_ESS",
    "Tail_ESS",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Section {
    NonVarying,
    StandardDeviations,
    Other,
}

/// Which draw column to summarize and how to label it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummarySpec {
    pub label: String,
    pub column: usize,
    pub section: Section,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub parameter: String,
    pub section: Section,
    #[serde(rename = "Estimate")]
    pub estimate: f64,
    #[serde(rename = "Est.Error")]
    pub est_error: f64,
    #[serde(rename = "l-95%")]
    pub l95: f64,
    #[serde(rename = "u-95%")]
    pub u95: f64,
    #[serde(rename = "R-hat")]
    pub rhat: f64,
    #[serde(rename = "Bulk_ESS")]
    pub bulk_ess: f64,
    #[serde(rename = "Tail_ESS")]
    pub tail_ess: f64,
}

impl SummaryRow {
    pub fn values(&self) -> [f64; 7] {
        [
            self.estimate,
            self.est_error,
            self.l95,
            self.u95,
            self.rhat,
            self.bulk_ess,
            self.tail_ess,
        ]
    }

    /// Monte Carlo standard error of the mean, from the bulk ESS.
    pub fn mcse_mean(&self) -> f64 {
        self.est_error / self.bulk_ess.sqrt()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryTable {
    pub rows: Vec<SummaryRow>,
    pub divergences: usize,
    pub draws: usize,
    pub warnings: Vec<String>,
}

impl SummaryTable {
    pub fn row(&self, label: &str) -> Option<&SummaryRow> {
        self.rows.iter().find(|r| r.parameter == label)
    }

    pub fn max_rhat(&self) -> f64 {
        self.rows
            .iter()
            .map(|r| r.rhat)
            .filter(|r| r.is_finite())
            .fold(f64::NAN, f64::max)
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["parameter"];
        header.extend(SUMMARY_COLUMNS);
        w.write_record(&header)?;
        for r in &self.rows {
            let mut rec = vec![r.parameter.clone()];
            rec.extend(r.values().iter().map(|v| format_value(*v)));
            w.write_record(&rec)?;
        }
        w.flush().map_err(|e| Error::io("<summary>", e))?;
        Ok(())
    }
}

fn format_value(v: f64) -> String {
    if v.is_nan() {
        "NA".into()
    } else {
        v.to_string()
    }
}

/// Summarizes the given columns of `draws`.
pub fn summarize(draws: &DrawsMatrix, specs: &[SummarySpec]) -> SummaryTable {
    let rows = specs
        .iter()
        .map(|s| {
            let pooled = draws.param(s.column);
            let sorted = sorted_copy(&pooled);
            let chains = draws.param_chains(s.column);
            SummaryRow {
                parameter: s.label.clone(),
                section: s.section,
                estimate: mean(&pooled),
                est_error: if pooled.len() > 1 {
                    variance(&pooled).max(0.0).sqrt()
                } else {
                    0.0
                },
                l95: quantile_sorted(&sorted, 0.025),
                u95: quantile_sorted(&sorted, 0.975),
                rhat: split_rhat(&chains),
                bulk_ess: ess_bulk(&chains),
                tail_ess: ess_tail(&chains),
            }
        })
        .collect::<Vec<_>>();

    let mut warnings = Vec::new();
    let divergences = draws.divergences();
    if divergences as f64 > 0.01 * draws.n_draws() as f64 {
        warnings.push(format!(
            "{divergences} of {} post-warmup transitions diverged (more than 1%); estimates may be biased",
            draws.n_draws()
        ));
    }
    let high: Vec<&str> = rows
        .iter()
        .filter(|r| r.rhat > 1.01)
        .map(|r| r.parameter.as_str())
        .collect();
    if !high.is_empty() {
        warnings.push(format!("R-hat above 1.01 for: {}", high.join(", ")));
    }
    SummaryTable {
        rows,
        divergences,
        draws: draws.n_draws(),
        warnings,
    }
}

/// Every column of `draws` under its own name.
pub fn summarize_all(draws: &DrawsMatrix) -> SummaryTable {
    let specs: Vec<SummarySpec> = draws
        .names
        .iter()
        .enumerate()
        .map(|(i, n)| SummarySpec {
            label: n.clone(),
            column: i,
            section: Section::Other,
        })
        .collect();
    summarize(draws, &specs)
}

/// Rows for a model fit: non-varying effects first, then the standard
/// deviations of the varying effects labelled `"<factor> (intercept)"`.
pub fn model_summary_rows(layout: &Layout) -> Vec<SummarySpec> {
    let mut fixed = Vec::new();
    let mut sds = Vec::new();
    for b in &layout.blocks {
        for (i, label) in b.labels.iter().enumerate() {
            let column = b.offset + i;
            match b.kind {
                BlockKind::Intercept | BlockKind::Fixed | BlockKind::Slope => {
                    fixed.push(SummarySpec {
                        label: label.clone(),
                        column,
                        section: Section::NonVarying,
                    })
                }
                BlockKind::LogSd => {
                    let f = b.factor.expect("sd block has a factor");
                    let name = match f {
                        crate::model::Factor::Zip => "ZIP".to_string(),
                        other => other.to_string(),
                    };
                    sds.push(SummarySpec {
                        label: format!("{name} (intercept)"),
                        column,
                        section: Section::StandardDeviations,
                    })
                }
                BlockKind::Raw => {}
            }
        }
    }
    fixed.extend(sds);
    fixed
}
