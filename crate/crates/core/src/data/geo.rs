use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::Zip;
use crate::error::{Error, Result};

/// ZIP-level predictors in their usual order.
pub const DEFAULT_PREDICTORS: [&str; 6] =
    ["urbanicity", "college", "poverty", "employment", "income", "adi"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrosswalkRow {
    pub zip: Zip,
    /// 11-digit census tract GEOID: state (2) + county (3) + tract (6).
    pub tract_id: String,
    pub residential_ratio: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CrosswalkTable {
    pub rows: Vec<CrosswalkRow>,
}

impl CrosswalkTable {
    pub fn validate(&self) -> Result<()> {
        let mut sums: BTreeMap<&Zip, f64> = BTreeMap::new();
        for r in &self.rows {
            if !(0.0..=1.0).contains(&r.residential_ratio) {
                return Err(Error::Invalid(format!(
                    "residential ratio {} for zip {} tract {} is outside [0, 1]",
                    r.residential_ratio, r.zip, r.tract_id
                )));
            }
            if r.tract_id.len() < 5 || !r.tract_id.bytes().all(|b| b.is_ascii_digit()) {
                return Err(Error::Invalid(format!("malformed tract id `{}`", r.tract_id)));
            }
            *sums.entry(&r.zip).or_default() += r.residential_ratio;
        }
        if let Some((z, s)) = sums.iter().find(|(_, &s)| s > 1.0 + 1e-6) {
            return Err(Error::Invalid(format!(
                "residential ratios for zip {z} sum to {s}"
            )));
        }
        Ok(())
    }

    /// County with the largest summed residential ratio per zip; ties go to
    /// the smallest FIPS code.
    pub fn zip_counties(&self) -> BTreeMap<Zip, String> {
        let mut share: BTreeMap<&Zip, BTreeMap<&str, f64>> = BTreeMap::new();
        for r in &self.rows {
            *share
                .entry(&r.zip)
                .or_default()
                .entry(&r.tract_id[..5])
                .or_default() += r.residential_ratio;
        }
        share
            .into_iter()
            .map(|(zip, counties)| {
                // BTreeMap iterates ascending, so a strict `>` keeps the
                // smallest fips among equal shares.
                let mut best: Option<(&str, f64)> = None;
                for (fips, s) in counties {
                    if best.is_none_or(|(_, b)| s > b) {
                        best = Some((fips, s));
                    }
                }
                (zip.clone(), best.expect("non-empty").0.to_owned())
            })
            .collect()
    }

    /// State FIPS of each zip's assigned county.
    pub fn zip_states(&self) -> BTreeMap<Zip, String> {
        self.zip_counties()
            .into_iter()
            .map(|(z, c)| (z, c[..2].to_owned()))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TractRow {
    pub tract_id: String,
    pub population: f64,
    /// One value per entry of [`TractTable::columns`]; NaN when unavailable.
    pub values: Vec<f64>,
}

/// Tract populations and tract-level measures.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TractTable {
    pub columns: Vec<String>,
    pub rows: Vec<TractRow>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ColumnScale {
    pub mean: f64,
    pub sd: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeoRow {
    pub zip: Zip,
    pub county_fips: String,
    pub values: Vec<f64>,
}

/// One row of ZIP-level predictors per retained zip.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GeoPredictorTable {
    pub columns: Vec<String>,
    pub rows: Vec<GeoRow>,
    /// Mapping from current values back to raw units:
    /// `raw = value * sd + mean`. `None` until standardized.
    pub scales: Vec<Option<ColumnScale>>,
}

impl GeoPredictorTable {
    pub fn column_index(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c.eq_ignore_ascii_case(name))
    }

    pub fn row(&self, zip: &Zip) -> Option<&GeoRow> {
        self.rows.iter().find(|r| &r.zip == zip)
    }

    pub fn column(&self, idx: usize) -> Vec<f64> {
        self.rows.iter().map(|r| r.values[idx]).collect()
    }

    pub fn counties(&self) -> BTreeSet<String> {
        self.rows.iter().map(|r| r.county_fips.clone()).collect()
    }

    /// Undoes standardization using the stored scales.
    pub fn unstandardize(&self) -> GeoPredictorTable {
        let mut out = self.clone();
        for row in &mut out.rows {
            for (v, s) in row.values.iter_mut().zip(&self.scales) {
                if let Some(s) = s {
                    *v = *v * s.sd + s.mean;
                }
            }
        }
        out.scales = vec![None; self.columns.len()];
        out
    }
}

/// Aggregates tract measures to zips, weighting each covered tract by its
/// population. Crosswalk ratios are only used to pick each zip's county.
pub fn link_zip_predictors(
    crosswalk: &CrosswalkTable,
    tracts: &TractTable,
    zips: &[Zip],
) -> Result<GeoPredictorTable> {
    crosswalk.validate()?;
    let tract_index: BTreeMap<&str, &TractRow> =
        tracts.rows.iter().map(|t| (t.tract_id.as_str(), t)).collect();
    let mut by_zip: BTreeMap<&Zip, Vec<&TractRow>> = BTreeMap::new();
    for r in &crosswalk.rows {
        if let Some(t) = tract_index.get(r.tract_id.as_str()) {
            if t.population > 0.0 {
                by_zip.entry(&r.zip).or_default().push(t);
            }
        }
    }
    let counties = crosswalk.zip_counties();

    let orphans: Vec<String> = zips
        .iter()
        .filter(|z| !by_zip.contains_key(z) || !counties.contains_key(z))
        .map(|z| z.to_string())
        .collect();
    if !orphans.is_empty() {
        return Err(Error::OrphanZips(orphans));
    }

    let ncol = tracts.columns.len();
    let mut rows = Vec::with_capacity(zips.len());
    let mut unique: Vec<&Zip> = zips.iter().collect();
    unique.sort();
    unique.dedup();
    for zip in unique {
        let covered = &by_zip[zip];
        let mut values = Vec::with_capacity(ncol);
        for k in 0..ncol {
            let (mut num, mut den) = (0.0, 0.0);
            for t in covered {
                let x = t.values[k];
                if x.is_finite() {
                    num += t.population * x;
                    den += t.population;
                }
            }
            if den == 0.0 {
                return Err(Error::Invalid(format!(
                    "zip {zip} has no tract with a value for `{}`",
                    tracts.columns[k]
                )));
            }
            values.push(num / den);
        }
        rows.push(GeoRow {
            zip: zip.clone(),
            county_fips: counties[zip].clone(),
            values,
        });
    }
    Ok(GeoPredictorTable {
        columns: tracts.columns.clone(),
        rows,
        scales: vec![None; ncol],
    })
}

/// Centers each column on its mean and divides by its sample standard
/// deviation (denominator n - 1). Scales compose, so the stored metadata
/// always maps back to raw units.
pub fn standardize_predictors(geo: &GeoPredictorTable) -> Result<GeoPredictorTable> {
    let mut out = geo.clone();
    let n = geo.rows.len();
    for k in 0..geo.columns.len() {
        let col = geo.column(k);
        let distinct = {
            let mut c = col.clone();
            c.sort_by(f64::total_cmp);
            c.dedup();
            c.len()
        };
        if n < 2 || distinct < 2 {
            return Err(Error::ZeroVariance(geo.columns[k].clone()));
        }
        let mean = crate::math::mean(&col);
        let sd = crate::math::variance(&col).sqrt();
        if !(sd > 0.0) {
            return Err(Error::ZeroVariance(geo.columns[k].clone()));
        }
        for row in &mut out.rows {
            row.values[k] = (row.values[k] - mean) / sd;
        }
        out.scales[k] = Some(match geo.scales.get(k).copied().flatten() {
            Some(prev) => ColumnScale {
                mean: prev.mean + mean * prev.sd,
                sd: prev.sd * sd,
            },
            None => ColumnScale { mean, sd },
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn zip(z: &str) -> Zip {
        Zip::new(z).unwrap()
    }

    fn xw(rows: &[(&str, &str, f64)]) -> CrosswalkTable {
        CrosswalkTable {
            rows: rows
                .iter()
                .map(|(z, t, r)| CrosswalkRow {
                    zip: zip(z),
                    tract_id: t.to_string(),
                    residential_ratio: *r,
                })
                .collect(),
        }
    }

    fn tracts(rows: &[(&str, f64, f64)]) -> TractTable {
        TractTable {
            columns: vec!["adi".into()],
            rows: rows
                .iter()
                .map(|(t, p, v)| TractRow {
                    tract_id: t.to_string(),
                    population: *p,
                    values: vec![*v],
                })
                .collect(),
        }
    }

    #[test]
    fn single_tract_passes_through() {
        let geo = link_zip_predictors(
            &xw(&[("48104", "26161000100", 1.0)]),
            &tracts(&[("26161000100", 500.0, 42.0)]),
            &[zip("48104")],
        )
        .unwrap();
        assert_eq!(geo.rows[0].values, vec![42.0]);
        assert_eq!(geo.rows[0].county_fips, "26161");
    }

    #[test]
    fn population_weighted_mean() {
        let geo = link_zip_predictors(
            &xw(&[("48104", "26161000100", 0.9), ("48104", "26163000200", 0.1)]),
            &tracts(&[("26161000100", 100.0, 40.0), ("26163000200", 300.0, 80.0)]),
            &[zip("48104")],
        )
        .unwrap();
        assert!((geo.rows[0].values[0] - 70.0).abs() < 1e-12);
        // ratios decide the county, not population
        assert_eq!(geo.rows[0].county_fips, "26161");
    }

    #[test]
    fn county_ties_go_to_smallest_fips() {
        let c = xw(&[("48104", "26163000200", 0.5), ("48104", "26161000100", 0.5)]).zip_counties();
        assert_eq!(c[&zip("48104")], "26161");
    }

    #[test]
    fn orphan_zips_are_listed() {
        let err = link_zip_predictors(
            &xw(&[("48104", "26161000100", 1.0)]),
            &tracts(&[("26161000100", 100.0, 1.0)]),
            &[zip("48104"), zip("49999")],
        )
        .unwrap_err();
        assert!(matches!(err, Error::OrphanZips(z) if z == vec!["49999".to_string()]));
    }

    fn geo(values: &[f64]) -> GeoPredictorTable {
        GeoPredictorTable {
            columns: vec!["x".into()],
            rows: values
                .iter()
                .enumerate()
                .map(|(i, v)| GeoRow {
                    zip: zip(&format!("{:05}", i)),
                    county_fips: "26161".into(),
                    values: vec![*v],
                })
                .collect(),
            scales: vec![None],
        }
    }

    #[test]
    fn standardize_small_column() {
        let s = standardize_predictors(&geo(&[1.0, 2.0, 3.0])).unwrap();
        assert_eq!(s.column(0), vec![-1.0, 0.0, 1.0]);
        let again = standardize_predictors(&s).unwrap();
        for (a, b) in again.column(0).iter().zip(s.column(0)) {
            assert!((a - b).abs() < 1e-12);
        }
        let back = again.unstandardize();
        for (a, b) in back.column(0).iter().zip([1.0, 2.0, 3.0]) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_variance_names_the_column() {
        let err = standardize_predictors(&geo(&[2.0, 2.0, 2.0])).unwrap_err();
        assert!(matches!(err, Error::ZeroVariance(c) if c == "x"));
    }

    #[test]
    fn ratios_above_one_are_invalid() {
        let t = xw(&[("48104", "26161000100", 0.7), ("48104", "26163000200", 0.5)]);
        assert!(t.validate().is_err());
    }
}
