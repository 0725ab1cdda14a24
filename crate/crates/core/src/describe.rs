//! Descriptive summaries of the sample: weekly positivity, per-county
//! maxima, and sample vs population demographic shares.

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::data::{CellTable, GeoPredictorTable, PoststratTable};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeeklyRow {
    pub week: u32,
    pub week_start: Option<String>,
    pub n_tests: u64,
    pub n_positive: u64,
    pub positivity: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CountyRow {
    pub county_fips: String,
    pub n_tests: u64,
    /// `None` for counties without tests.
    pub max_weekly_positivity: Option<f64>,
    pub week_of_max: Option<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShareRow {
    pub variable: String,
    pub level: String,
    pub sample_share: f64,
    pub population_share: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Description {
    pub total_tests: u64,
    pub total_positive: u64,
    pub weekly: Vec<WeeklyRow>,
    pub counties: Vec<CountyRow>,
    pub demographics: Vec<ShareRow>,
}

pub fn describe(
    cells: &CellTable,
    ps: &PoststratTable,
    geo: &GeoPredictorTable,
) -> Result<Description> {
    let weeks = cells.n_weeks();
    let mut weekly = vec![(0u64, 0u64); weeks];
    for c in &cells.rows {
        weekly[c.week as usize].0 += c.n_tests;
        weekly[c.week as usize].1 += c.n_positive;
    }
    let weekly = weekly
        .into_iter()
        .enumerate()
        .map(|(w, (n, y))| WeeklyRow {
            week: w as u32,
            week_start: cells.week_start(w as u32).map(|d| d.to_string()),
            n_tests: n,
            n_positive: y,
            positivity: (n > 0).then(|| y as f64 / n as f64),
        })
        .collect();

    let county_of: BTreeMap<_, _> = geo
        .rows
        .iter()
        .map(|r| (r.zip.clone(), r.county_fips.clone()))
        .collect();
    let mut by_county: BTreeMap<String, BTreeMap<u32, (u64, u64)>> =
        geo.counties().into_iter().map(|c| (c, BTreeMap::new())).collect();
    for c in &cells.rows {
        let county = county_of
            .get(&c.zip)
            .ok_or_else(|| Error::Coverage(format!("county of zip {}", c.zip)))?;
        let e = by_county
            .get_mut(county)
            .expect("county listed")
            .entry(c.week)
            .or_insert((0, 0));
        e.0 += c.n_tests;
        e.1 += c.n_positive;
    }
    let counties = by_county
        .into_iter()
        .map(|(fips, weeks)| {
            let n_tests = weeks.values().map(|v| v.0).sum();
            let mut best: Option<(f64, u32)> = None;
            for (&w, &(n, y)) in &weeks {
                if n == 0 {
                    continue;
                }
                let r = y as f64 / n as f64;
                if best.is_none_or(|(b, _)| r > b) {
                    best = Some((r, w));
                }
            }
            CountyRow {
                county_fips: fips,
                n_tests,
                max_weekly_positivity: best.map(|b| b.0),
                week_of_max: best.map(|b| b.1),
            }
        })
        .collect();

    let mut demographics = Vec::new();
    let total_n = cells.total_tests() as f64;
    let total_pop = ps.total();
    type Key = fn(&crate::data::Cell) -> String;
    type PKey = fn(&crate::data::PoststratRow) -> String;
    let vars: [(&str, Key, PKey); 3] = [
        ("sex", |c| c.sex.to_string(), |r| r.sex.to_string()),
        ("age", |c| c.age_group.clone(), |r| r.age_group.clone()),
        ("race", |c| c.race.to_string(), |r| r.race.to_string()),
    ];
    for (name, ck, pk) in vars {
        let mut shares: BTreeMap<String, (f64, f64)> = BTreeMap::new();
        for c in &cells.rows {
            shares.entry(ck(c)).or_default().0 += c.n_tests as f64;
        }
        for r in &ps.rows {
            shares.entry(pk(r)).or_default().1 += r.population;
        }
        for (level, (s, p)) in shares {
            demographics.push(ShareRow {
                variable: name.into(),
                level,
                sample_share: if total_n > 0.0 { s / total_n } else { 0.0 },
                population_share: if total_pop > 0.0 { p / total_pop } else { 0.0 },
            });
        }
    }

    Ok(Description {
        total_tests: cells.total_tests(),
        total_positive: cells.total_positive(),
        weekly,
        counties,
        demographics,
    })
}

fn opt<T: ToString>(v: &Option<T>) -> String {
    v.as_ref().map(T::to_string).unwrap_or_default()
}

impl Description {
    pub fn write_weekly_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["week", "week_start", "n_tests", "n_positive", "positivity"])?;
        for r in &self.weekly {
            w.write_record([
                r.week.to_string(),
                opt(&r.week_start),
                r.n_tests.to_string(),
                r.n_positive.to_string(),
                opt(&r.positivity),
            ])?;
        }
        w.flush().map_err(|e| Error::io("<weekly>", e))?;
        Ok(())
    }

    pub fn write_counties_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["county_fips", "n_tests", "max_weekly_positivity", "week_of_max"])?;
        for r in &self.counties {
            w.write_record([
                r.county_fips.clone(),
                r.n_tests.to_string(),
                opt(&r.max_weekly_positivity),
                opt(&r.week_of_max),
            ])?;
        }
        w.flush().map_err(|e| Error::io("<counties>", e))?;
        Ok(())
    }

    pub fn write_demographics_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["variable", "level", "sample_share", "population_share"])?;
        for r in &self.demographics {
            w.write_record([
                r.variable.clone(),
                r.level.clone(),
                r.sample_share.to_string(),
                r.population_share.to_string(),
            ])?;
        }
        w.flush().map_err(|e| Error::io("<demographics>", e))?;
        Ok(())
    }
}
