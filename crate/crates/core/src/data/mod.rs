//! Input ingestion: records, cells, population counts and ZIP-level
//! predictors.
//!
//! The preprocessing order is parse → drop undated rows → impute →
//! aggregate to cells → filter geography → link and standardize ZIP
//! predictors → build the poststratification table.

mod cells;
mod geo;
mod impute;
pub mod io;
mod poststrat_table;
mod records;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use cells::{
    aggregate_to_cells, filter_geography, monday_on_or_before, Cell, CellTable, FilterReport,
};
pub use geo::{
    link_zip_predictors, standardize_predictors, ColumnScale, CrosswalkRow, CrosswalkTable,
    GeoPredictorTable, GeoRow, TractRow, TractTable, DEFAULT_PREDICTORS,
};
pub use impute::{impute_missing, ImputationReport};
pub use poststrat_table::{build_poststrat_table, PopulationRow, PoststratRow, PoststratTable};
pub use records::{parse_records, ParsedRecords, Record, RecordSet, Reject, SchemaConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Sex {
    Female,
    Male,
}

impl Sex {
    pub const ALL: [Sex; 2] = [Sex::Female, Sex::Male];

    pub fn as_str(self) -> &'static str {
        match self {
            Sex::Female => "female",
            Sex::Male => "male",
        }
    }
}

impl fmt::Display for Sex {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Sex {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "female" | "f" => Ok(Sex::Female),
            "male" | "m" => Ok(Sex::Male),
            other => Err(Error::Invalid(format!("unknown sex `{other}`"))),
        }
    }
}

/// Race coding used throughout: White, Black and everything else.
/// Variants are declared in lexicographic order of their labels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Race {
    Black,
    Other,
    White,
}

impl Race {
    pub const ALL: [Race; 3] = [Race::Black, Race::Other, Race::White];

    pub fn as_str(self) -> &'static str {
        match self {
            Race::Black => "Black",
            Race::Other => "Other",
            Race::White => "White",
        }
    }
}

impl fmt::Display for Race {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Race {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "white" => Ok(Race::White),
            "black" => Ok(Race::Black),
            "other" => Ok(Race::Other),
            other => Err(Error::Invalid(format!("unknown race `{other}`"))),
        }
    }
}

/// Five-digit ZIP code.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct Zip(String);

impl Zip {
    pub fn new(s: &str) -> Result<Self> {
        let s = s.trim();
        if s.len() == 5 && s.bytes().all(|b| b.is_ascii_digit()) {
            Ok(Zip(s.to_owned()))
        } else {
            Err(Error::Invalid(format!("invalid zip `{s}`")))
        }
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl TryFrom<String> for Zip {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        Zip::new(&s)
    }
}

impl From<Zip> for String {
    fn from(z: Zip) -> String {
        z.0
    }
}

impl fmt::Display for Zip {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// Age as recorded: whole years, or an already-binned label.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Age {
    Years(u32),
    Group(String),
}

impl fmt::Display for Age {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Age::Years(y) => write!(f, "{y}"),
            Age::Group(g) => f.write_str(g),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AgeBin {
    pub label: String,
    pub lower: u32,
    /// Exclusive upper bound; `None` means open-ended.
    pub upper: Option<u32>,
}

/// Ordered, non-overlapping age bins.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AgeBins(Vec<AgeBin>);

impl Default for AgeBins {
    fn default() -> Self {
        Self::from_breaks(&[0, 18, 35, 50, 65, 75]).expect("default breaks are valid")
    }
}

impl AgeBins {
    /// Bins `[b0, b1), [b1, b2), …, [bk, ∞)` labelled `"b0-(b1-1)"` and `"bk+"`.
    pub fn from_breaks(breaks: &[u32]) -> Result<Self> {
        if breaks.is_empty() || breaks.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(format!(
                "age breaks must be strictly increasing, got {breaks:?}"
            )));
        }
        let bins = breaks
            .iter()
            .enumerate()
            .map(|(i, &lower)| {
                let upper = breaks.get(i + 1).copied();
                let label = match upper {
                    Some(u) => format!("{lower}-{}", u - 1),
                    None => format!("{lower}+"),
                };
                AgeBin {
                    label,
                    lower,
                    upper,
                }
            })
            .collect();
        Ok(AgeBins(bins))
    }

    pub fn bins(&self) -> &[AgeBin] {
        &self.0
    }

    pub fn labels(&self) -> Vec<String> {
        self.0.iter().map(|b| b.label.clone()).collect()
    }

    /// Bin label for an age, or an error naming the offending value.
    pub fn label_for(&self, age: &Age) -> Result<String> {
        match age {
            Age::Years(y) => self
                .0
                .iter()
                .find(|b| *y >= b.lower && b.upper.is_none_or(|u| *y < u))
                .map(|b| b.label.clone())
                .ok_or_else(|| Error::AgeOutOfBins(y.to_string())),
            Age::Group(g) => self
                .0
                .iter()
                .find(|b| &b.label == g)
                .map(|b| b.label.clone())
                .ok_or_else(|| Error::AgeOutOfBins(g.clone())),
        }
    }
}
