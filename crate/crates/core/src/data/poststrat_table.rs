use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::{Age, AgeBins, Race, Sex, Zip};
use crate::error::{Error, Result};

/// One row of the population source (e.g. weighted ACS counts).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PopulationRow {
    pub zip: Zip,
    pub sex: Sex,
    pub age: Age,
    pub race: Race,
    pub count: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoststratRow {
    pub sex: Sex,
    pub age_group: String,
    pub race: Race,
    pub zip: Zip,
    pub population: f64,
}

/// Population counts for the full sex × age group × race × zip
/// cross-classification. Counts are taken as constant over the study
/// period.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PoststratTable {
    pub rows: Vec<PoststratRow>,
}

impl PoststratTable {
    pub fn total(&self) -> f64 {
        self.rows.iter().map(|r| r.population).sum()
    }

    pub fn zips(&self) -> BTreeSet<Zip> {
        self.rows.iter().map(|r| r.zip.clone()).collect()
    }

    pub fn age_groups(&self) -> BTreeSet<String> {
        self.rows.iter().map(|r| r.age_group.clone()).collect()
    }
}

/// Bins and sums the population source over the retained zips, zero-filling
/// every combination the source omits.
pub fn build_poststrat_table(
    population: &[PopulationRow],
    retained_zips: &[Zip],
    age_bins: &AgeBins,
) -> Result<PoststratTable> {
    let retained: BTreeSet<&Zip> = retained_zips.iter().collect();
    let covered: BTreeSet<&Zip> = population.iter().map(|r| &r.zip).collect();
    let missing: Vec<String> = retained
        .iter()
        .filter(|z| !covered.contains(*z))
        .map(|z| z.to_string())
        .collect();
    if !missing.is_empty() {
        return Err(Error::MissingPopulation(missing));
    }

    let mut counts: BTreeMap<(Sex, String, Race, &Zip), f64> = BTreeMap::new();
    for z in &retained {
        for sex in Sex::ALL {
            for age in age_bins.labels() {
                for race in Race::ALL {
                    counts.insert((sex, age.clone(), race, *z), 0.0);
                }
            }
        }
    }
    for r in population {
        if !retained.contains(&r.zip) {
            continue;
        }
        if !(r.count >= 0.0) {
            return Err(Error::Invalid(format!(
                "negative or missing population count for zip {}",
                r.zip
            )));
        }
        let age = age_bins.label_for(&r.age)?;
        *counts
            .get_mut(&(r.sex, age, r.race, &r.zip))
            .expect("key pre-filled") += r.count;
    }

    Ok(PoststratTable {
        rows: counts
            .into_iter()
            .map(|((sex, age_group, race, zip), population)| PoststratRow {
                sex,
                age_group,
                race,
                zip: zip.clone(),
                population,
            })
            .collect(),
    })
}
