//! Population-weighted incidence estimates computed per posterior draw.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::str::FromStr;

use chrono::{Duration, NaiveDate};
use serde::{Deserialize, Serialize};

use crate::data::{GeoPredictorTable, PoststratTable, Sex, Zip};
use crate::error::{Error, Result};
use crate::math::{mean, quantile_sorted, sorted_copy, variance};
use crate::model::{CellIndex, Effects, ModelData};
use crate::ppc::iso_week_label;
use crate::sampler::DrawsMatrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GroupBy {
    Overall,
    Sex,
    Race,
    Age,
    County,
    Zip,
}

impl GroupBy {
    pub fn as_str(self) -> &'static str {
        match self {
            GroupBy::Overall => "overall",
            GroupBy::Sex => "sex",
            GroupBy::Race => "race",
            GroupBy::Age => "age",
            GroupBy::County => "county",
            GroupBy::Zip => "zip",
        }
    }
}

/// A grouping, optionally crossed with week. `week` alone is overall by
/// week.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Grouping {
    pub by: GroupBy,
    pub by_week: bool,
}

impl Grouping {
    pub const OVERALL: Grouping = Grouping {
        by: GroupBy::Overall,
        by_week: false,
    };

    pub fn new(by: GroupBy, by_week: bool) -> Self {
        Grouping { by, by_week }
    }

    /// `overall`, `week`, `county`, `county:week`, ...
    pub fn name(&self) -> String {
        match (self.by, self.by_week) {
            (GroupBy::Overall, true) => "week".into(),
            (b, true) => format!("{}:week", b.as_str()),
            (b, false) => b.as_str().into(),
        }
    }
}

impl FromStr for Grouping {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (head, by_week) = match s.split_once(':') {
            Some((h, "week")) => (h, true),
            Some(_) => return Err(Error::Invalid(format!("unknown grouping `{s}`"))),
            None => (s, false),
        };
        let by = match head {
            "overall" => GroupBy::Overall,
            "week" => return Ok(Grouping::new(GroupBy::Overall, true)),
            "sex" => GroupBy::Sex,
            "race" => GroupBy::Race,
            "age" | "age_group" => GroupBy::Age,
            "county" => GroupBy::County,
            "zip" => GroupBy::Zip,
            _ => return Err(Error::Invalid(format!("unknown grouping `{s}`"))),
        };
        Ok(Grouping::new(by, by_week))
    }
}

/// Per-draw estimates: `values[g][d]` for group `g` and draw `d`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupDraws {
    pub grouping: Grouping,
    pub labels: Vec<String>,
    pub weeks: Vec<Option<u32>>,
    pub population: Vec<f64>,
    pub values: Vec<Vec<f64>>,
    pub notes: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateRow {
    pub group: String,
    pub week: Option<u32>,
    pub week_start: Option<String>,
    pub iso_week: Option<String>,
    pub population: f64,
    pub mean: f64,
    pub sd: f64,
    #[serde(rename = "l-95%")]
    pub l95: f64,
    #[serde(rename = "u-95%")]
    pub u95: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateSeries {
    pub grouping: String,
    pub rows: Vec<EstimateRow>,
    pub notes: Vec<String>,
}

const ESTIMATE_COLUMNS: [&str; 9] = [
    "group",
    "week",
    "week_start",
    "iso_week",
    "population",
    "mean",
    "sd",
    "l-95%",
    "u-95%",
];

impl EstimateSeries {
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(ESTIMATE_COLUMNS)?;
        let opt = |v: &Option<String>| v.clone().unwrap_or_default();
        for r in &self.rows {
            w.write_record([
                r.group.clone(),
                r.week.map(|v| v.to_string()).unwrap_or_default(),
                opt(&r.week_start),
                opt(&r.iso_week),
                r.population.to_string(),
                r.mean.to_string(),
                r.sd.to_string(),
                r.l95.to_string(),
                r.u95.to_string(),
            ])?;
        }
        w.flush().map_err(|e| Error::io("<estimates>", e))?;
        Ok(())
    }

    /// Reads back a file written by [`EstimateSeries::write_csv`]. The
    /// grouping name and notes are not part of the file.
    pub fn read_csv<R: Read>(source: R, grouping: &str) -> Result<EstimateSeries> {
        let mut r = csv::Reader::from_reader(source);
        if r.headers()?.iter().ne(ESTIMATE_COLUMNS) {
            return Err(Error::Invalid("not an estimates file".into()));
        }
        let num = |s: &str| -> Result<f64> {
            s.parse()
                .map_err(|_| Error::Invalid(format!("bad number `{s}` in estimates")))
        };
        let opt = |s: &str| (!s.is_empty()).then(|| s.to_string());
        let mut rows = Vec::new();
        for rec in r.records() {
            let rec = rec?;
            rows.push(EstimateRow {
                group: rec[0].to_string(),
                week: match &rec[1] {
                    "" => None,
                    w => Some(num(w)? as u32),
                },
                week_start: opt(&rec[2]),
                iso_week: opt(&rec[3]),
                population: num(&rec[4])?,
                mean: num(&rec[5])?,
                sd: num(&rec[6])?,
                l95: num(&rec[7])?,
                u95: num(&rec[8])?,
            });
        }
        Ok(EstimateSeries {
            grouping: grouping.into(),
            rows,
            notes: Vec::new(),
        })
    }

    /// Rows of one week, matched by index or by a date inside the week.
    pub fn filter_week(&self, week: &str) -> EstimateSeries {
        let date = NaiveDate::parse_from_str(week, "%Y-%m-%d").ok();
        let idx: Option<u32> = week.parse().ok();
        let keep = |r: &EstimateRow| {
            if let Some(i) = idx {
                return r.week == Some(i);
            }
            match (date, r.week_start.as_deref()) {
                (Some(d), Some(s)) => NaiveDate::parse_from_str(s, "%Y-%m-%d")
                    .map(|s| s <= d && d < s + Duration::days(7))
                    .unwrap_or(false),
                _ => r.iso_week.as_deref() == Some(week),
            }
        };
        EstimateSeries {
            grouping: self.grouping.clone(),
            rows: self.rows.iter().filter(|r| keep(r)).cloned().collect(),
            notes: self.notes.clone(),
        }
    }
}

struct PopCell {
    index: CellIndex,
    county: usize,
    population: f64,
}

/// Population cells resolved against one compiled model.
pub struct Poststratifier<'a> {
    data: &'a ModelData,
    cells: Vec<PopCell>,
    counties: Vec<String>,
    week_origin: Option<NaiveDate>,
}

impl<'a> Poststratifier<'a> {
    /// Fails unless the table covers every sex × age × race × zip stratum
    /// the model's cells use, and every table row maps onto model levels.
    pub fn new(
        data: &'a ModelData,
        ps: &PoststratTable,
        geo: &GeoPredictorTable,
        week_origin: Option<NaiveDate>,
    ) -> Result<Self> {
        let county_of: BTreeMap<&Zip, &str> = geo
            .rows
            .iter()
            .map(|r| (&r.zip, r.county_fips.as_str()))
            .collect();
        let counties: Vec<String> = geo.counties().into_iter().collect();
        let mut cells = Vec::with_capacity(ps.rows.len());
        let mut covered = std::collections::BTreeSet::new();
        for r in &ps.rows {
            let index = data
                .index_for(r.sex, &r.age_group, r.race, 0, &r.zip)
                .map_err(|e| Error::Coverage(format!("population row: {e}")))?;
            let county = county_of
                .get(&r.zip)
                .and_then(|c| counties.iter().position(|x| x == c))
                .ok_or_else(|| Error::Coverage(format!("county of zip {}", r.zip)))?;
            covered.insert((index.male, index.age, index.race, index.zip));
            cells.push(PopCell {
                index,
                county,
                population: r.population,
            });
        }
        if let Some(c) = data
            .cells
            .iter()
            .find(|c| !covered.contains(&(c.male, c.age, c.race, c.zip)))
        {
            return Err(Error::Coverage(format!(
                "stratum {}|{}|{}|{}",
                if c.male { Sex::Male } else { Sex::Female },
                data.levels.age[c.age],
                data.levels.race[c.race],
                data.levels.zip[c.zip]
            )));
        }
        Ok(Poststratifier {
            data,
            cells,
            counties,
            week_origin,
        })
    }

    fn group_of(&self, by: GroupBy, c: &PopCell) -> (usize, String) {
        let l = &self.data.levels;
        match by {
            GroupBy::Overall => (0, "overall".into()),
            GroupBy::Sex => (
                usize::from(c.index.male),
                if c.index.male { "male" } else { "female" }.into(),
            ),
            GroupBy::Race => (c.index.race, l.race[c.index.race].to_string()),
            GroupBy::Age => (c.index.age, l.age[c.index.age].clone()),
            GroupBy::County => (c.county, self.counties[c.county].clone()),
            GroupBy::Zip => (c.index.zip, l.zip[c.index.zip].to_string()),
        }
    }

    /// `π̂_g(d) = Σ_{j∈g} N_j π_j(d) / Σ_{j∈g} N_j` for every draw. Without
    /// week crossing, each population cell counts once per week.
    pub fn group_draws(&self, draws: &DrawsMatrix, grouping: Grouping) -> Result<GroupDraws> {
        if draws.dim() != self.data.dim() {
            return Err(Error::Dimension(
                "draws do not belong to this model".into(),
            ));
        }
        let weeks = self.data.levels.weeks.max(1) as usize;
        let n_week_slots = if grouping.by_week { weeks } else { 1 };

        // group slots by (group key, week slot)
        let mut keys: BTreeMap<usize, String> = BTreeMap::new();
        let mut cell_key = Vec::with_capacity(self.cells.len());
        for c in &self.cells {
            let (k, label) = self.group_of(grouping.by, c);
            keys.entry(k).or_insert(label);
            cell_key.push(k);
        }
        let key_slot: BTreeMap<usize, usize> =
            keys.keys().enumerate().map(|(i, k)| (*k, i)).collect();
        let n_groups = keys.len() * n_week_slots;
        let slot = |k: usize, t: usize| key_slot[&k] * n_week_slots + if grouping.by_week { t } else { 0 };

        let mut population = vec![0.0; n_groups];
        for (c, &k) in self.cells.iter().zip(&cell_key) {
            for t in 0..weeks {
                population[slot(k, t)] += c.population;
            }
        }

        let n_draws = draws.n_draws();
        let mut values = vec![vec![0.0; n_draws]; n_groups];
        let mut acc = vec![0.0; n_groups];
        for d in 0..n_draws {
            let e = Effects::from_constrained(self.data, draws.draw(d));
            acc.iter_mut().for_each(|v| *v = 0.0);
            for (c, &k) in self.cells.iter().zip(&cell_key) {
                if c.population == 0.0 {
                    continue;
                }
                for t in 0..weeks {
                    let mut idx = c.index;
                    idx.week = t.min(self.data.levels.weeks.saturating_sub(1) as usize);
                    acc[slot(k, t)] += c.population * e.incidence(self.data, &idx);
                }
            }
            for g in 0..n_groups {
                values[g][d] = acc[g] / population[g];
            }
        }

        let mut out = GroupDraws {
            grouping,
            labels: Vec::new(),
            weeks: Vec::new(),
            population: Vec::new(),
            values: Vec::new(),
            notes: Vec::new(),
        };
        let mut empty = Vec::new();
        let mut g = 0;
        for label in keys.values() {
            for t in 0..n_week_slots {
                let week = grouping.by_week.then_some(t as u32);
                if population[g] > 0.0 {
                    out.labels.push(label.clone());
                    out.weeks.push(week);
                    out.population.push(population[g]);
                    out.values.push(std::mem::take(&mut values[g]));
                } else {
                    empty.push(match week {
                        Some(w) => format!("{label}@{w}"),
                        None => label.clone(),
                    });
                }
                g += 1;
            }
        }
        if !empty.is_empty() {
            out.notes.push(format!(
                "{} group(s) with zero population omitted: {}",
                empty.len(),
                empty.join(", ")
            ));
        }
        Ok(out)
    }

    /// Mean, sd and central 95% interval of each group across draws.
    pub fn estimate(&self, draws: &DrawsMatrix, grouping: Grouping) -> Result<EstimateSeries> {
        let gd = self.group_draws(draws, grouping)?;
        Ok(summarize_groups(&gd, self.week_origin))
    }
}

pub fn summarize_groups(gd: &GroupDraws, week_origin: Option<NaiveDate>) -> EstimateSeries {
    let rows = (0..gd.labels.len())
        .map(|g| {
            let v = &gd.values[g];
            let sorted = sorted_copy(v);
            let start = gd.weeks[g]
                .zip(week_origin)
                .map(|(w, o)| o + Duration::days(7 * i64::from(w)));
            EstimateRow {
                group: gd.labels[g].clone(),
                week: gd.weeks[g],
                week_start: start.map(|d| d.to_string()),
                iso_week: start.map(iso_week_label),
                population: gd.population[g],
                mean: mean(v),
                sd: if v.len() > 1 {
                    variance(v).max(0.0).sqrt()
                } else {
                    0.0
                },
                l95: quantile_sorted(&sorted, 0.025),
                u95: quantile_sorted(&sorted, 0.975),
            }
        })
        .collect();
    EstimateSeries {
        grouping: gd.grouping.name(),
        rows,
        notes: gd.notes.clone(),
    }
}

/// Convenience wrapper for a single grouping.
pub fn poststratify(
    draws: &DrawsMatrix,
    data: &ModelData,
    ps: &PoststratTable,
    geo: &GeoPredictorTable,
    week_origin: Option<NaiveDate>,
    grouping: Grouping,
) -> Result<EstimateSeries> {
    Poststratifier::new(data, ps, geo, week_origin)?.estimate(draws, grouping)
}

/// Groupings written by default.
pub const DEFAULT_GROUPINGS: [&str; 6] = ["overall", "week", "sex:week", "race:week", "age:week", "county:week"];
