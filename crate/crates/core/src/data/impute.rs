use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::RecordSet;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImputationReport {
    pub sex: usize,
    pub race: usize,
    pub age: usize,
}

/// Fills missing sex, race and age by drawing, independently per column,
/// from the observed values of that column.
///
/// Each column uses its own stream of a ChaCha generator seeded with `seed`,
/// so results are reproducible and do not depend on how many values other
/// columns needed. Joint structure between columns is not preserved.
pub fn impute_missing(records: &RecordSet, seed: u64) -> Result<(RecordSet, ImputationReport)> {
    let mut out = records.clone();
    let report = ImputationReport {
        sex: impute_column(&mut out, seed, 0, "sex", |r| &mut r.sex)?,
        race: impute_column(&mut out, seed, 1, "race", |r| &mut r.race)?,
        age: impute_column(&mut out, seed, 2, "age", |r| &mut r.age)?,
    };
    Ok((out, report))
}

fn impute_column<T: Clone>(
    set: &mut RecordSet,
    seed: u64,
    stream: u64,
    name: &str,
    slot: impl Fn(&mut super::Record) -> &mut Option<T>,
) -> Result<usize> {
    let observed: Vec<T> = set
        .records
        .iter_mut()
        .filter_map(|r| slot(r).clone())
        .collect();
    let missing = set.records.len() - observed.len();
    if missing == 0 {
        return Ok(0);
    }
    if observed.is_empty() {
        return Err(Error::NothingToImpute(name.to_owned()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    for r in set.records.iter_mut() {
        let value = slot(r);
        if value.is_none() {
            *value = Some(observed[rng.random_range(0..observed.len())].clone());
        }
    }
    Ok(missing)
}
