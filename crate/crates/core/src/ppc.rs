//! Posterior predictive replicates of grouped positivity.

use std::collections::BTreeMap;
use std::str::FromStr;

use chrono::{Datelike, Duration, NaiveDate};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{quantile_sorted, sorted_copy};
use crate::model::{adjust_positivity, CellIndex, Effects, ModelData};
use crate::sampler::DrawsMatrix;

/// Default number of replicated data sets.
pub const DEFAULT_REPS: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PpcGroup {
    Week,
    Sex,
    Race,
    Age,
}

impl PpcGroup {
    pub fn as_str(self) -> &'static str {
        match self {
            PpcGroup::Week => "week",
            PpcGroup::Sex => "sex",
            PpcGroup::Race => "race",
            PpcGroup::Age => "age",
        }
    }

    fn key(self, c: &CellIndex) -> usize {
        match self {
            PpcGroup::Week => c.week,
            PpcGroup::Sex => usize::from(c.male),
            PpcGroup::Race => c.race,
            PpcGroup::Age => c.age,
        }
    }

    fn label(self, data: &ModelData, key: usize) -> String {
        match self {
            PpcGroup::Week => key.to_string(),
            PpcGroup::Sex => if key == 1 { "male" } else { "female" }.into(),
            PpcGroup::Race => data.levels.race[key].to_string(),
            PpcGroup::Age => data.levels.age[key].clone(),
        }
    }

    fn n_keys(self, data: &ModelData) -> usize {
        match self {
            PpcGroup::Week => data.levels.weeks as usize,
            PpcGroup::Sex => 2,
            PpcGroup::Race => data.levels.race.len(),
            PpcGroup::Age => data.levels.age.len(),
        }
    }
}

impl FromStr for PpcGroup {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "week" => Ok(PpcGroup::Week),
            "sex" => Ok(PpcGroup::Sex),
            "race" => Ok(PpcGroup::Race),
            "age" => Ok(PpcGroup::Age),
            _ => Err(Error::Invalid(format!("unknown ppc grouping `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PpcRow {
    pub group: String,
    pub key: usize,
    /// First day of the week, for week groupings with a known origin.
    pub week_start: Option<String>,
    pub n_tests: u64,
    pub observed: f64,
    pub replicates: Vec<f64>,
    pub lower: f64,
    pub upper: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateSet {
    pub grouping: PpcGroup,
    pub n_reps: usize,
    /// Posterior draw behind each replicate.
    pub draws: Vec<usize>,
    pub rows: Vec<PpcRow>,
    pub notes: Vec<String>,
}

impl ReplicateSet {
    /// Fills `week_start` from the first day of week 0.
    pub fn with_week_origin(mut self, origin: Option<NaiveDate>) -> Self {
        if let (PpcGroup::Week, Some(o)) = (self.grouping, origin) {
            for r in &mut self.rows {
                r.week_start = Some((o + Duration::days(7 * r.key as i64)).to_string());
            }
        }
        self
    }

    /// Share of groups whose observed rate lies inside the replicate band.
    pub fn coverage(&self) -> f64 {
        let inside = self
            .rows
            .iter()
            .filter(|r| r.lower <= r.observed && r.observed <= r.upper)
            .count();
        inside as f64 / self.rows.len() as f64
    }

    /// Long format: one line per group and replicate, replicate 0 being the
    /// observed rate.
    pub fn write_csv<W: std::io::Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["group", "week_start", "n_tests", "replicate", "rate"])?;
        for r in &self.rows {
            let ws = r.week_start.clone().unwrap_or_default();
            w.write_record([
                r.group.clone(),
                ws.clone(),
                r.n_tests.to_string(),
                "observed".into(),
                r.observed.to_string(),
            ])?;
            for (i, v) in r.replicates.iter().enumerate() {
                w.write_record([
                    r.group.clone(),
                    ws.clone(),
                    r.n_tests.to_string(),
                    (i + 1).to_string(),
                    v.to_string(),
                ])?;
            }
        }
        w.flush().map_err(|e| Error::io("<ppc>", e))?;
        Ok(())
    }
}

/// Simulates `n_reps` replicated data sets, each from one randomly chosen
/// posterior draw, and aggregates positivity by `grouping`.
pub fn ppc_replicates(
    draws: &DrawsMatrix,
    data: &ModelData,
    grouping: PpcGroup,
    n_reps: usize,
    seed: u64,
) -> Result<ReplicateSet> {
    if n_reps == 0 {
        return Err(Error::Invalid("n_reps must be at least 1".into()));
    }
    if draws.n_draws() == 0 || draws.dim() != data.dim() {
        return Err(Error::Dimension(
            "draws do not belong to this model".into(),
        ));
    }
    let (delta, gamma) = (data.spec.outcome.sensitivity, data.spec.outcome.specificity);
    let groups = grouping.n_keys(data);
    let mut n_tests = vec![0u64; groups];
    let mut observed = vec![0u64; groups];
    for (j, c) in data.cells.iter().enumerate() {
        let g = grouping.key(c);
        n_tests[g] += data.n[j];
        observed[g] += data.y[j];
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked = Vec::with_capacity(n_reps);
    let mut reps = vec![vec![0u64; groups]; n_reps];
    for rep in reps.iter_mut() {
        let d = rng.random_range(0..draws.n_draws());
        picked.push(d);
        let e = Effects::from_constrained(data, draws.draw(d));
        for (j, c) in data.cells.iter().enumerate() {
            if data.n[j] == 0 {
                continue;
            }
            let p = adjust_positivity(e.incidence(data, c), delta, gamma).clamp(0.0, 1.0);
            let y = Binomial::new(data.n[j], p)
                .map_err(|e| Error::Invalid(format!("binomial: {e}")))?
                .sample(&mut rng);
            rep[grouping.key(c)] += y;
        }
    }

    let mut rows = Vec::new();
    let mut empty = Vec::new();
    for g in 0..groups {
        let label = grouping.label(data, g);
        if n_tests[g] == 0 {
            empty.push(label);
            continue;
        }
        let n = n_tests[g] as f64;
        let replicates: Vec<f64> = reps.iter().map(|r| r[g] as f64 / n).collect();
        let sorted = sorted_copy(&replicates);
        rows.push(PpcRow {
            group: label,
            key: g,
            week_start: None,
            n_tests: n_tests[g],
            observed: observed[g] as f64 / n,
            lower: quantile_sorted(&sorted, 0.025),
            upper: quantile_sorted(&sorted, 0.975),
            replicates,
        });
    }
    let mut notes = Vec::new();
    if !empty.is_empty() {
        notes.push(format!(
            "{} group(s) without tests excluded: {}",
            empty.len(),
            empty.join(", ")
        ));
    }
    Ok(ReplicateSet {
        grouping,
        n_reps,
        draws: picked,
        rows,
        notes,
    })
}

/// ISO week label such as `2022-W05`.
pub fn iso_week_label(date: NaiveDate) -> String {
    let w = date.iso_week();
    format!("{}-W{:02}", w.year(), w.week())
}

/// Observed positivity per week from cell counts, keyed by week index.
pub fn observed_by_week(data: &ModelData) -> BTreeMap<usize, (u64, u64)> {
    let mut out = BTreeMap::new();
    for (j, c) in data.cells.iter().enumerate() {
        let e = out.entry(c.week).or_insert((0, 0));
        e.0 += data.n[j];
        e.1 += data.y[j];
    }
    out
}
