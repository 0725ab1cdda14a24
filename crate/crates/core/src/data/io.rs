//! Delimited-text readers and writers for the tables.

use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use chrono::NaiveDate;

use super::{
    Age, Cell, CellTable, ColumnScale, CrosswalkRow, CrosswalkTable, GeoPredictorTable, GeoRow,
    PopulationRow, PoststratRow, PoststratTable, TractRow, TractTable, Zip,
};
use crate::error::{Error, Result};

pub fn open(path: &Path) -> Result<File> {
    File::open(path).map_err(|e| Error::io(path, e))
}

pub fn create(path: &Path) -> Result<File> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    File::create(path).map_err(|e| Error::io(path, e))
}

fn reader<R: Read>(source: R, delimiter: u8) -> csv::Reader<R> {
    csv::ReaderBuilder::new()
        .delimiter(delimiter)
        .trim(csv::Trim::All)
        .from_reader(source)
}

fn header_index(headers: &csv::StringRecord, names: &[&str]) -> Result<usize> {
    headers
        .iter()
        .position(|h| names.iter().any(|n| h.eq_ignore_ascii_case(n)))
        .ok_or_else(|| Error::MissingColumn {
            column: names[0].to_owned(),
            header: headers.iter().collect::<Vec<_>>().join(","),
        })
}

fn parse_f64(s: &str, what: &str) -> Result<f64> {
    if s.is_empty() || s.eq_ignore_ascii_case("na") {
        return Ok(f64::NAN);
    }
    s.parse()
        .map_err(|_| Error::Invalid(format!("`{s}` is not a number ({what})")))
}

fn parse_u64(s: &str, what: &str) -> Result<u64> {
    s.parse()
        .map_err(|_| Error::Invalid(format!("`{s}` is not a count ({what})")))
}

fn parse_age(s: &str) -> Age {
    match s.parse::<u32>() {
        Ok(y) => Age::Years(y),
        Err(_) => Age::Group(s.to_owned()),
    }
}

pub fn write_cells<W: Write>(out: W, cells: &CellTable) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "cell_id",
        "sex",
        "age_group",
        "race",
        "zip",
        "week_index",
        "week_start",
        "n_tests",
        "n_positive",
    ])?;
    for c in &cells.rows {
        let start = cells
            .week_start(c.week)
            .map(|d| d.to_string())
            .unwrap_or_default();
        w.write_record([
            c.id(),
            c.sex.to_string(),
            c.age_group.clone(),
            c.race.to_string(),
            c.zip.to_string(),
            c.week.to_string(),
            start,
            c.n_tests.to_string(),
            c.n_positive.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io("<cells>", e))?;
    Ok(())
}

pub fn read_cells<R: Read>(source: R) -> Result<CellTable> {
    let mut r = reader(source, b',');
    let h = r.headers()?.clone();
    let idx = |n: &[&str]| header_index(&h, n);
    let (sex, age, race, zip, week, start, n, y) = (
        idx(&["sex"])?,
        idx(&["age_group"])?,
        idx(&["race"])?,
        idx(&["zip"])?,
        idx(&["week_index", "week"])?,
        header_index(&h, &["week_start"]).ok(),
        idx(&["n_tests"])?,
        idx(&["n_positive"])?,
    );
    let mut table = CellTable::default();
    for row in r.records() {
        let row = row?;
        let week_idx: u32 = row[week]
            .parse()
            .map_err(|_| Error::Invalid(format!("bad week index `{}`", &row[week])))?;
        if table.week_origin.is_none() {
            if let Some(s) = start.and_then(|i| row.get(i)).filter(|s| !s.is_empty()) {
                let d = NaiveDate::parse_from_str(s, "%Y-%m-%d")
                    .map_err(|_| Error::Invalid(format!("bad week start `{s}`")))?;
                table.week_origin = Some(d - chrono::Duration::days(7 * i64::from(week_idx)));
            }
        }
        table.rows.push(Cell {
            sex: row[sex].parse()?,
            age_group: row[age].to_owned(),
            race: row[race].parse()?,
            zip: Zip::new(&row[zip])?,
            week: week_idx,
            n_tests: parse_u64(&row[n], "n_tests")?,
            n_positive: parse_u64(&row[y], "n_positive")?,
        });
    }
    table.validate()?;
    Ok(table)
}

pub fn write_poststrat<W: Write>(out: W, table: &PoststratTable) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["sex", "age_group", "race", "zip", "population"])?;
    for r in &table.rows {
        w.write_record([
            r.sex.to_string(),
            r.age_group.clone(),
            r.race.to_string(),
            r.zip.to_string(),
            r.population.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io("<poststrat>", e))?;
    Ok(())
}

pub fn read_poststrat<R: Read>(source: R) -> Result<PoststratTable> {
    let mut r = reader(source, b',');
    let h = r.headers()?.clone();
    let idx = |n: &[&str]| header_index(&h, n);
    let (sex, age, race, zip, pop) = (
        idx(&["sex"])?,
        idx(&["age_group"])?,
        idx(&["race"])?,
        idx(&["zip"])?,
        idx(&["population", "count"])?,
    );
    let mut out = PoststratTable::default();
    for row in r.records() {
        let row = row?;
        out.rows.push(PoststratRow {
            sex: row[sex].parse()?,
            age_group: row[age].to_owned(),
            race: row[race].parse()?,
            zip: Zip::new(&row[zip])?,
            population: parse_f64(&row[pop], "population")?,
        });
    }
    Ok(out)
}

/// Population source rows: `zip, sex, age, race, count` where `age` is
/// either whole years or a bin label.
pub fn read_population<R: Read>(source: R, delimiter: u8) -> Result<Vec<PopulationRow>> {
    let mut r = reader(source, delimiter);
    let h = r.headers()?.clone();
    let idx = |n: &[&str]| header_index(&h, n);
    let (zip, sex, age, race, count) = (
        idx(&["zip"])?,
        idx(&["sex"])?,
        idx(&["age", "age_group"])?,
        idx(&["race"])?,
        idx(&["count", "population", "n"])?,
    );
    let mut out = Vec::new();
    for row in r.records() {
        let row = row?;
        out.push(PopulationRow {
            zip: Zip::new(&row[zip])?,
            sex: row[sex].parse()?,
            age: parse_age(&row[age]),
            race: row[race].parse()?,
            count: parse_f64(&row[count], "count")?,
        });
    }
    Ok(out)
}

pub fn write_population<W: Write>(out: W, rows: &[PopulationRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["zip", "sex", "age", "race", "count"])?;
    for r in rows {
        w.write_record([
            r.zip.to_string(),
            r.sex.to_string(),
            r.age.to_string(),
            r.race.to_string(),
            r.count.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io("<population>", e))?;
    Ok(())
}

pub fn read_crosswalk<R: Read>(source: R, delimiter: u8) -> Result<CrosswalkTable> {
    let mut r = reader(source, delimiter);
    let h = r.headers()?.clone();
    let (zip, tract, ratio) = (
        header_index(&h, &["zip"])?,
        header_index(&h, &["tract", "tract_id", "geoid"])?,
        header_index(&h, &["res_ratio", "residential_ratio"])?,
    );
    let mut out = CrosswalkTable::default();
    for row in r.records() {
        let row = row?;
        out.rows.push(CrosswalkRow {
            zip: Zip::new(&row[zip])?,
            tract_id: row[tract].to_owned(),
            residential_ratio: parse_f64(&row[ratio], "res_ratio")?,
        });
    }
    out.validate()?;
    Ok(out)
}

pub fn write_crosswalk<W: Write>(out: W, table: &CrosswalkTable) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["zip", "tract", "res_ratio"])?;
    for r in &table.rows {
        w.write_record([
            r.zip.to_string(),
            r.tract_id.clone(),
            r.residential_ratio.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io("<crosswalk>", e))?;
    Ok(())
}

/// Tract table: a tract id column, a population column, and every other
/// column taken as a measure.
pub fn read_tracts<R: Read>(source: R, delimiter: u8) -> Result<TractTable> {
    let mut r = reader(source, delimiter);
    let h = r.headers()?.clone();
    let tract = header_index(&h, &["tract", "tract_id", "geoid"])?;
    let pop = header_index(&h, &["population", "pop"])?;
    let measures: Vec<usize> = (0..h.len()).filter(|&i| i != tract && i != pop).collect();
    let mut out = TractTable {
        columns: measures.iter().map(|&i| h[i].to_ascii_lowercase()).collect(),
        rows: Vec::new(),
    };
    for row in r.records() {
        let row = row?;
        out.rows.push(TractRow {
            tract_id: row[tract].to_owned(),
            population: parse_f64(&row[pop], "population")?,
            values: measures
                .iter()
                .map(|&i| parse_f64(&row[i], &h[i]))
                .collect::<Result<_>>()?,
        });
    }
    Ok(out)
}

pub fn write_tracts<W: Write>(out: W, table: &TractTable) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["tract_id".to_owned(), "population".to_owned()];
    header.extend(table.columns.iter().cloned());
    w.write_record(&header)?;
    for r in &table.rows {
        let mut rec = vec![r.tract_id.clone(), r.population.to_string()];
        rec.extend(r.values.iter().map(|v| v.to_string()));
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io("<tracts>", e))?;
    Ok(())
}

/// Writes `zip, county_fips, <predictors…>`; scales go to the JSON sidecar
/// written by [`write_geo_meta`].
pub fn write_geo<W: Write>(out: W, geo: &GeoPredictorTable) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["zip".to_owned(), "county_fips".to_owned()];
    header.extend(geo.columns.iter().cloned());
    w.write_record(&header)?;
    for r in &geo.rows {
        let mut rec = vec![r.zip.to_string(), r.county_fips.clone()];
        rec.extend(r.values.iter().map(|v| v.to_string()));
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io("<geo>", e))?;
    Ok(())
}

#[derive(serde::Serialize, serde::Deserialize)]
struct GeoMeta {
    columns: Vec<String>,
    scales: Vec<Option<ColumnScale>>,
}

pub fn write_geo_meta<W: Write>(out: W, geo: &GeoPredictorTable) -> Result<()> {
    serde_json::to_writer_pretty(
        out,
        &GeoMeta {
            columns: geo.columns.clone(),
            scales: geo.scales.clone(),
        },
    )?;
    Ok(())
}

pub fn read_geo<R: Read, M: Read>(source: R, meta: Option<M>) -> Result<GeoPredictorTable> {
    let mut r = reader(source, b',');
    let h = r.headers()?.clone();
    let zip = header_index(&h, &["zip"])?;
    let county = header_index(&h, &["county_fips", "county"])?;
    let cols: Vec<usize> = (0..h.len()).filter(|&i| i != zip && i != county).collect();
    let mut geo = GeoPredictorTable {
        columns: cols.iter().map(|&i| h[i].to_owned()).collect(),
        rows: Vec::new(),
        scales: vec![None; cols.len()],
    };
    for row in r.records() {
        let row = row?;
        geo.rows.push(GeoRow {
            zip: Zip::new(&row[zip])?,
            county_fips: row[county].to_owned(),
            values: cols
                .iter()
                .map(|&i| parse_f64(&row[i], &h[i]))
                .collect::<Result<_>>()?,
        });
    }
    if let Some(m) = meta {
        let meta: GeoMeta = serde_json::from_reader(m)?;
        if meta.columns != geo.columns {
            return Err(Error::Invalid(
                "geo metadata columns do not match the table".into(),
            ));
        }
        geo.scales = meta.scales;
    }
    Ok(geo)
}
