use std::collections::{BTreeMap, BTreeSet};

use chrono::{Datelike, Duration, NaiveDate};
use serde::{Deserialize, Serialize};

use super::{AgeBins, Race, RecordSet, Sex, Zip};
use crate::error::{Error, Result};

/// Aggregated tests for one sex × age group × race × zip × week stratum.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Cell {
    pub sex: Sex,
    pub age_group: String,
    pub race: Race,
    pub zip: Zip,
    pub week: u32,
    pub n_tests: u64,
    pub n_positive: u64,
}

impl Cell {
    pub fn id(&self) -> String {
        format!(
            "{}|{}|{}|{}|{}",
            self.sex, self.age_group, self.race, self.zip, self.week
        )
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CellTable {
    /// First day of week 0.
    pub week_origin: Option<NaiveDate>,
    pub rows: Vec<Cell>,
}

impl CellTable {
    pub fn total_tests(&self) -> u64 {
        self.rows.iter().map(|c| c.n_tests).sum()
    }

    pub fn total_positive(&self) -> u64 {
        self.rows.iter().map(|c| c.n_positive).sum()
    }

    pub fn zips(&self) -> BTreeSet<Zip> {
        self.rows.iter().map(|c| c.zip.clone()).collect()
    }

    pub fn n_weeks(&self) -> usize {
        self.rows
            .iter()
            .map(|c| c.week as usize + 1)
            .max()
            .unwrap_or(0)
    }

    pub fn week_start(&self, week: u32) -> Option<NaiveDate> {
        self.week_origin
            .map(|o| o + Duration::days(7 * i64::from(week)))
    }

    /// Checks the table invariants: counts consistent and keys unique.
    pub fn validate(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        for c in &self.rows {
            if c.n_positive > c.n_tests {
                return Err(Error::Invalid(format!(
                    "cell {} has more positives than tests",
                    c.id()
                )));
            }
            if !seen.insert(c.id()) {
                return Err(Error::Invalid(format!("duplicate cell {}", c.id())));
            }
        }
        Ok(())
    }
}

/// Monday on or before `date`.
pub fn monday_on_or_before(date: NaiveDate) -> NaiveDate {
    date - Duration::days(i64::from(date.weekday().num_days_from_monday()))
}

/// Cross-tabulates imputed records into cells.
///
/// `week_origin` defaults to the Monday on or before the earliest result
/// date; the week index is the number of whole weeks since the origin.
pub fn aggregate_to_cells(
    records: &RecordSet,
    age_bins: &AgeBins,
    week_origin: Option<NaiveDate>,
) -> Result<CellTable> {
    let origin = match week_origin {
        Some(o) => o,
        None => match records.earliest_date() {
            Some(d) => monday_on_or_before(d),
            None => {
                return Ok(CellTable {
                    week_origin: None,
                    rows: Vec::new(),
                })
            }
        },
    };

    let mut counts: BTreeMap<(Sex, String, Race, Zip, u32), (u64, u64)> = BTreeMap::new();
    for r in &records.records {
        let (Some(sex), Some(race), Some(age)) = (r.sex, r.race, r.age.as_ref()) else {
            return Err(Error::Invalid(format!(
                "record {} still has missing demographics; impute before aggregating",
                r.record_id
            )));
        };
        let days = (r.result_date - origin).num_days();
        if days < 0 {
            return Err(Error::Invalid(format!(
                "record {} is dated {} before week origin {origin}",
                r.record_id, r.result_date
            )));
        }
        let week = (days / 7) as u32;
        let age_group = age_bins.label_for(age)?;
        let entry = counts
            .entry((sex, age_group, race, r.zip.clone(), week))
            .or_default();
        entry.0 += 1;
        entry.1 += u64::from(r.result);
    }

    let rows = counts
        .into_iter()
        .map(|((sex, age_group, race, zip, week), (n, y))| Cell {
            sex,
            age_group,
            race,
            zip,
            week,
            n_tests: n,
            n_positive: y,
        })
        .collect();
    Ok(CellTable {
        week_origin: Some(origin),
        rows,
    })
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FilterReport {
    pub records_before: u64,
    pub records_after: u64,
    pub rows_before: usize,
    pub rows_after: usize,
    /// Zips dropped for having five or fewer records, with their counts.
    pub dropped_zips: Vec<(String, u64)>,
    /// States dropped for contributing under 1% of the remaining records.
    pub dropped_states: Vec<(String, u64)>,
}

/// Drops zips with five or fewer records, then states holding less than 1%
/// of what remains. The passes run in exactly that order.
pub fn filter_geography(
    cells: &CellTable,
    zip_state: &BTreeMap<Zip, String>,
) -> Result<(CellTable, FilterReport)> {
    let unknown: BTreeSet<String> = cells
        .rows
        .iter()
        .filter(|c| !zip_state.contains_key(&c.zip))
        .map(|c| c.zip.to_string())
        .collect();
    if !unknown.is_empty() {
        return Err(Error::UnknownState(unknown.into_iter().collect()));
    }

    let mut by_zip: BTreeMap<&Zip, u64> = BTreeMap::new();
    for c in &cells.rows {
        *by_zip.entry(&c.zip).or_default() += c.n_tests;
    }
    let dropped_zips: Vec<(String, u64)> = by_zip
        .iter()
        .filter(|(_, &n)| n <= 5)
        .map(|(z, &n)| (z.to_string(), n))
        .collect();
    let zip_pass: Vec<&Cell> = cells
        .rows
        .iter()
        .filter(|c| by_zip[&c.zip] > 5)
        .collect();

    let remaining: u64 = zip_pass.iter().map(|c| c.n_tests).sum();
    let mut by_state: BTreeMap<&str, u64> = BTreeMap::new();
    for c in &zip_pass {
        *by_state.entry(zip_state[&c.zip].as_str()).or_default() += c.n_tests;
    }
    // share < 1%  <=>  100 * n < remaining, kept in integers
    let small_states: BTreeSet<&str> = by_state
        .iter()
        .filter(|(_, &n)| 100 * n < remaining)
        .map(|(s, _)| *s)
        .collect();
    let dropped_states = small_states
        .iter()
        .map(|s| (s.to_string(), by_state[s]))
        .collect();

    let rows: Vec<Cell> = zip_pass
        .into_iter()
        .filter(|c| !small_states.contains(zip_state[&c.zip].as_str()))
        .cloned()
        .collect();
    if rows.is_empty() {
        return Err(Error::EmptyAfterFilter);
    }
    let out = CellTable {
        week_origin: cells.week_origin,
        rows,
    };
    let report = FilterReport {
        records_before: cells.total_tests(),
        records_after: out.total_tests(),
        rows_before: cells.rows.len(),
        rows_after: out.rows.len(),
        dropped_zips,
        dropped_states,
    };
    Ok((out, report))
}
