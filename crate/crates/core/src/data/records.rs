use std::collections::BTreeMap;
use std::io::Read;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use super::{Age, Race, Sex, Zip};
use crate::error::{Error, Result};

/// Maps input headers and codes onto the record schema.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SchemaConfig {
    /// Single-byte field delimiter; `"\t"` for tab-separated input.
    pub delimiter: String,
    /// Extra date format tried after ISO `%Y-%m-%d`.
    pub date_format: Option<String>,
    /// Cell values treated as missing.
    pub missing: Vec<String>,
    pub study_start: Option<NaiveDate>,
    pub study_end: Option<NaiveDate>,
    pub columns: ColumnMap,
    /// Lower-cased input race value to `White`, `Black` or `Other`.
    /// Unlisted non-missing values map to `Other`.
    pub race_map: BTreeMap<String, Race>,
    /// Lower-cased input sex value to `female` or `male`.
    pub sex_map: BTreeMap<String, Sex>,
    /// Lower-cased input result value to 0 or 1.
    pub result_map: BTreeMap<String, u8>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ColumnMap {
    /// Optional; rows are numbered when absent.
    pub record_id: Option<String>,
    pub sex: String,
    pub race: String,
    pub age: String,
    pub zip: String,
    pub result: String,
    pub result_date: String,
}

impl Default for ColumnMap {
    fn default() -> Self {
        ColumnMap {
            record_id: Some("record_id".into()),
            sex: "sex".into(),
            race: "race".into(),
            age: "age".into(),
            zip: "zip".into(),
            result: "result".into(),
            result_date: "result_date".into(),
        }
    }
}

impl Default for SchemaConfig {
    fn default() -> Self {
        let race_map = [
            ("white", Race::White),
            ("caucasian", Race::White),
            ("black", Race::Black),
            ("black or african american", Race::Black),
            ("african american", Race::Black),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_owned(), v))
        .collect();
        let sex_map = [
            ("female", Sex::Female),
            ("f", Sex::Female),
            ("male", Sex::Male),
            ("m", Sex::Male),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_owned(), v))
        .collect();
        let result_map = [
            ("0", 0),
            ("1", 1),
            ("negative", 0),
            ("positive", 1),
            ("neg", 0),
            ("pos", 1),
            ("not detected", 0),
            ("detected", 1),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_owned(), v))
        .collect();
        SchemaConfig {
            delimiter: ",".into(),
            date_format: None,
            missing: vec!["".into(), "NA".into(), "N/A".into(), "NULL".into()],
            study_start: None,
            study_end: None,
            columns: ColumnMap::default(),
            race_map,
            sex_map,
            result_map,
        }
    }
}

impl SchemaConfig {
    pub fn delimiter_byte(&self) -> Result<u8> {
        match self.delimiter.as_str() {
            "\\t" | "\t" | "tab" => Ok(b'\t'),
            d if d.len() == 1 => Ok(d.as_bytes()[0]),
            d => Err(Error::Config(format!("delimiter must be one byte, got `{d}`"))),
        }
    }

    fn is_missing(&self, value: &str) -> bool {
        let v = value.trim();
        self.missing.iter().any(|m| m.eq_ignore_ascii_case(v))
    }

    fn parse_date(&self, value: &str) -> Option<NaiveDate> {
        let v = value.trim();
        NaiveDate::parse_from_str(v, "%Y-%m-%d").ok().or_else(|| {
            self.date_format
                .as_deref()
                .and_then(|f| NaiveDate::parse_from_str(v, f).ok())
        })
    }

    fn map_race(&self, value: &str) -> Race {
        let key = value.trim().to_ascii_lowercase();
        self.race_map
            .get(&key)
            .copied()
            .or_else(|| key.parse().ok())
            .unwrap_or(Race::Other)
    }
}

/// One validated test record. Only sex, race and age may be missing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub record_id: String,
    pub sex: Option<Sex>,
    pub race: Option<Race>,
    pub age: Option<Age>,
    pub zip: Zip,
    pub result: u8,
    pub result_date: NaiveDate,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RecordSet {
    pub records: Vec<Record>,
}

impl RecordSet {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn earliest_date(&self) -> Option<NaiveDate> {
        self.records.iter().map(|r| r.result_date).min()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Reject {
    /// 1-based line number in the source, counting the header as line 1.
    pub line: usize,
    pub record_id: String,
    pub reason: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ParsedRecords {
    pub records: RecordSet,
    pub rejects: Vec<Reject>,
    pub total_rows: usize,
}

struct ColumnIndex {
    record_id: Option<usize>,
    sex: usize,
    race: usize,
    age: usize,
    zip: usize,
    result: usize,
    result_date: usize,
}

fn resolve_columns(headers: &csv::StringRecord, map: &ColumnMap) -> Result<ColumnIndex> {
    let find = |logical: &str, configured: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h.trim().eq_ignore_ascii_case(configured.trim()))
            .ok_or_else(|| Error::MissingColumn {
                column: logical.to_owned(),
                header: configured.to_owned(),
            })
    };
    let record_id = match &map.record_id {
        Some(c) => headers
            .iter()
            .position(|h| h.trim().eq_ignore_ascii_case(c.trim())),
        None => None,
    };
    Ok(ColumnIndex {
        record_id,
        sex: find("sex", &map.sex)?,
        race: find("race", &map.race)?,
        age: find("age", &map.age)?,
        zip: find("zip", &map.zip)?,
        result: find("result", &map.result)?,
        result_date: find("result_date", &map.result_date)?,
    })
}

/// Parses and validates a delimited records file.
///
/// Rows with an unusable zip, result or date go to the rejects list with a
/// reason; they are never imputed. More than half the rows rejected is
/// fatal.
pub fn parse_records<R: Read>(source: R, schema: &SchemaConfig) -> Result<ParsedRecords> {
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(schema.delimiter_byte()?)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(source);
    let headers = reader.headers()?.clone();
    let cols = resolve_columns(&headers, &schema.columns)?;

    let mut out = ParsedRecords::default();
    for (i, row) in reader.records().enumerate() {
        let row = row?;
        let line = i + 2;
        out.total_rows += 1;
        let field = |idx: usize| row.get(idx).unwrap_or("");
        let record_id = cols
            .record_id
            .map(|c| field(c).to_owned())
            .filter(|s| !s.is_empty())
            .unwrap_or_else(|| format!("row-{}", i + 1));
        match parse_row(&cols, &field, schema) {
            Ok(mut rec) => {
                rec.record_id = record_id;
                out.records.records.push(rec);
            }
            Err(reason) => out.rejects.push(Reject {
                line,
                record_id,
                reason: reason.to_owned(),
            }),
        }
    }

    if out.rejects.len() * 2 > out.total_rows {
        let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
        for r in &out.rejects {
            *counts.entry(r.reason.as_str()).or_default() += 1;
        }
        let summary = counts
            .iter()
            .map(|(k, v)| format!("{k}: {v}"))
            .collect::<Vec<_>>()
            .join(", ");
        return Err(Error::TooManyRejects {
            rejected: out.rejects.len(),
            total: out.total_rows,
            summary,
        });
    }
    Ok(out)
}

fn parse_row<'a>(
    cols: &ColumnIndex,
    field: &dyn Fn(usize) -> &'a str,
    schema: &SchemaConfig,
) -> std::result::Result<Record, &'static str> {
    let zip = Zip::new(field(cols.zip)).map_err(|_| "invalid zip")?;

    let raw_result = field(cols.result);
    if schema.is_missing(raw_result) {
        return Err("missing result");
    }
    let result = *schema
        .result_map
        .get(&raw_result.trim().to_ascii_lowercase())
        .ok_or("invalid result")?;

    let raw_date = field(cols.result_date);
    if schema.is_missing(raw_date) {
        return Err("missing result_date");
    }
    let result_date = schema.parse_date(raw_date).ok_or("invalid result_date")?;
    if schema.study_start.is_some_and(|s| result_date < s)
        || schema.study_end.is_some_and(|e| result_date > e)
    {
        return Err("result_date outside study window");
    }

    let raw_sex = field(cols.sex);
    let sex = if schema.is_missing(raw_sex) {
        None
    } else {
        let key = raw_sex.trim().to_ascii_lowercase();
        Some(*schema.sex_map.get(&key).ok_or("invalid sex")?)
    };

    let raw_race = field(cols.race);
    let race = (!schema.is_missing(raw_race)).then(|| schema.map_race(raw_race));

    let raw_age = field(cols.age);
    let age = if schema.is_missing(raw_age) {
        None
    } else {
        let t = raw_age.trim();
        if t.bytes().all(|b| b.is_ascii_digit()) {
            Some(Age::Years(t.parse().map_err(|_| "invalid age")?))
        } else if t.starts_with('-') {
            return Err("invalid age");
        } else {
            Some(Age::Group(t.to_owned()))
        }
    };

    Ok(Record {
        record_id: String::new(),
        sex,
        race,
        age,
        zip,
        result,
        result_date,
    })
}
