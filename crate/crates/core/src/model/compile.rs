use std::collections::{BTreeMap, BTreeSet};
use std::ops::Range;

use serde::{Deserialize, Serialize};

use super::spec::{Factor, ModelSpec};
use crate::data::{CellTable, GeoPredictorTable, Race, Sex, Zip};
use crate::error::{Error, Result};

/// Level sets of each grouping factor, in index order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Levels {
    pub age: Vec<String>,
    pub race: Vec<Race>,
    /// Week indices `0..n_weeks`, including weeks with no tests.
    pub weeks: u32,
    pub zip: Vec<Zip>,
}

impl Levels {
    pub fn count(&self, f: Factor) -> usize {
        match f {
            Factor::Age => self.age.len(),
            Factor::Race => self.race.len(),
            Factor::Time => self.weeks as usize,
            Factor::Zip => self.zip.len(),
        }
    }

    pub fn label(&self, f: Factor, i: usize) -> String {
        match f {
            Factor::Age => self.age[i].clone(),
            Factor::Race => self.race[i].to_string(),
            Factor::Time => i.to_string(),
            Factor::Zip => self.zip[i].to_string(),
        }
    }

    pub fn age_index(&self, label: &str) -> Option<usize> {
        self.age.binary_search_by(|a| a.as_str().cmp(label)).ok()
    }

    pub fn race_index(&self, race: Race) -> Option<usize> {
        self.race.iter().position(|r| *r == race)
    }

    pub fn zip_index(&self, zip: &Zip) -> Option<usize> {
        self.zip.binary_search(zip).ok()
    }
}

/// Level indices of one cell (or population cell).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CellIndex {
    pub male: bool,
    pub age: usize,
    pub race: usize,
    pub week: usize,
    pub zip: usize,
}

impl CellIndex {
    pub fn level(&self, f: Factor) -> usize {
        match f {
            Factor::Age => self.age,
            Factor::Race => self.race,
            Factor::Time => self.week,
            Factor::Zip => self.zip,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockKind {
    Intercept,
    Fixed,
    Raw,
    LogSd,
    Slope,
}

/// A contiguous run of parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Block {
    pub kind: BlockKind,
    pub factor: Option<Factor>,
    pub offset: usize,
    /// Unconstrained names.
    pub names: Vec<String>,
    /// Names of the matching constrained quantities.
    pub labels: Vec<String>,
}

impl Block {
    pub fn range(&self) -> Range<usize> {
        self.offset..self.offset + self.names.len()
    }
}

/// Parameter layout. Order: intercept, male, zip-predictor coefficients, raw
/// age/race/time effects, log sds (age, race, time, zip), raw zip errors,
/// raw slopes.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Layout {
    pub dim: usize,
    pub intercept: usize,
    pub male: Option<usize>,
    pub alpha: Range<usize>,
    pub raw: BTreeMap<Factor, Range<usize>>,
    pub log_sd: BTreeMap<Factor, usize>,
    pub slopes: Vec<Range<usize>>,
    pub blocks: Vec<Block>,
}

impl Layout {
    pub fn names(&self) -> Vec<String> {
        self.blocks.iter().flat_map(|b| b.names.clone()).collect()
    }

    /// Constrained-scale labels, one per parameter.
    pub fn labels(&self) -> Vec<String> {
        self.blocks.iter().flat_map(|b| b.labels.clone()).collect()
    }

    pub fn index_of(&self, label: &str) -> Option<usize> {
        self.blocks.iter().find_map(|b| {
            b.labels
                .iter()
                .position(|l| l == label)
                .map(|i| b.offset + i)
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("layout serializes")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlopeData {
    pub group: Factor,
    pub predictor: String,
    /// Predictor value per zip level.
    pub values: Vec<f64>,
}

/// A compiled model: the spec, level sets, per-cell indices and counts, and
/// the zip predictor matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelData {
    pub spec: ModelSpec,
    pub levels: Levels,
    pub cells: Vec<CellIndex>,
    pub n: Vec<u64>,
    pub y: Vec<u64>,
    /// Zip predictor names in spec order, the columns of `z`.
    pub predictors: Vec<String>,
    /// Row-major `zip levels × predictors`.
    pub z: Vec<f64>,
    pub slopes: Vec<SlopeData>,
    pub layout: Layout,
}

impl ModelData {
    pub fn n_cells(&self) -> usize {
        self.cells.len()
    }

    pub fn dim(&self) -> usize {
        self.layout.dim
    }

    pub fn z_row(&self, zip: usize) -> &[f64] {
        let k = self.predictors.len();
        &self.z[zip * k..(zip + 1) * k]
    }

    /// Same model with cell `j` held out. Levels and layout are unchanged.
    pub fn without_cell(&self, j: usize) -> ModelData {
        let mut out = self.clone();
        out.cells.remove(j);
        out.n.remove(j);
        out.y.remove(j);
        out
    }

    /// Same model with the counts scaled by `k`.
    pub fn scaled_counts(&self, k: u64) -> ModelData {
        let mut out = self.clone();
        out.n.iter_mut().for_each(|v| *v *= k);
        out.y.iter_mut().for_each(|v| *v *= k);
        out
    }

    /// Indices for an arbitrary stratum, e.g. a population cell.
    pub fn index_for(
        &self,
        sex: Sex,
        age_group: &str,
        race: Race,
        week: u32,
        zip: &Zip,
    ) -> Result<CellIndex> {
        let unknown = |factor: &str, level: String| Error::UnknownLevel {
            factor: factor.into(),
            level,
        };
        Ok(CellIndex {
            male: sex == Sex::Male,
            age: self
                .levels
                .age_index(age_group)
                .ok_or_else(|| unknown("age", age_group.into()))?,
            race: self
                .levels
                .race_index(race)
                .ok_or_else(|| unknown("race", race.to_string()))?,
            week: if week < self.levels.weeks {
                week as usize
            } else {
                return Err(unknown("time", week.to_string()));
            },
            zip: self
                .levels
                .zip_index(zip)
                .ok_or_else(|| unknown("zip", zip.to_string()))?,
        })
    }
}

/// Compiles a spec against cells and zip predictors. Age levels are the
/// groups seen in the cells.
pub fn compile_spec(
    spec: &ModelSpec,
    cells: &CellTable,
    geo: &GeoPredictorTable,
) -> Result<ModelData> {
    compile_spec_with_ages(spec, cells, geo, &[])
}

/// As [`compile_spec`], with extra age levels (e.g. every configured bin) so
/// population cells in unsampled age groups can be predicted.
pub fn compile_spec_with_ages(
    spec: &ModelSpec,
    cells: &CellTable,
    geo: &GeoPredictorTable,
    extra_ages: &[String],
) -> Result<ModelData> {
    spec.validate()?;

    let ages: BTreeSet<String> = cells
        .rows
        .iter()
        .map(|c| c.age_group.clone())
        .chain(extra_ages.iter().cloned())
        .collect();
    let zips: BTreeSet<Zip> = geo.rows.iter().map(|r| r.zip.clone()).collect();
    if zips.len() != geo.rows.len() {
        return Err(Error::Invalid("geo table has duplicate zip rows".into()));
    }
    let levels = Levels {
        age: ages.into_iter().collect(),
        race: Race::ALL.to_vec(),
        weeks: cells.n_weeks() as u32,
        zip: zips.into_iter().collect(),
    };

    let column = |name: &str| {
        geo.column_index(name).ok_or_else(|| Error::UnknownLevel {
            factor: "zip predictor".into(),
            level: name.into(),
        })
    };
    let predictors: Vec<String> = spec.zip_predictors().map(str::to_owned).collect();
    let cols = predictors
        .iter()
        .map(|p| column(p))
        .collect::<Result<Vec<_>>>()?;
    let mut z = Vec::with_capacity(levels.zip.len() * cols.len());
    for zip in &levels.zip {
        let row = geo.row(zip).expect("zip level comes from geo");
        for &c in &cols {
            let v = row.values[c];
            if !v.is_finite() {
                return Err(Error::Invalid(format!(
                    "zip {zip} has a missing value for predictor `{}`",
                    geo.columns[c]
                )));
            }
            z.push(v);
        }
    }

    let mut slopes = Vec::new();
    for s in &spec.varying_slopes {
        let c = column(&s.predictor)?;
        let values = levels
            .zip
            .iter()
            .map(|zip| geo.row(zip).expect("zip level").values[c])
            .collect();
        slopes.push(SlopeData {
            group: s.group,
            predictor: s.predictor.clone(),
            values,
        });
    }

    let mut data = ModelData {
        spec: spec.clone(),
        layout: Layout::default(),
        levels,
        cells: Vec::with_capacity(cells.rows.len()),
        n: Vec::with_capacity(cells.rows.len()),
        y: Vec::with_capacity(cells.rows.len()),
        predictors,
        z,
        slopes,
    };
    for c in &cells.rows {
        if c.n_positive > c.n_tests {
            return Err(Error::Invalid(format!(
                "cell {} has more positives than tests",
                c.id()
            )));
        }
        let idx = data.index_for(c.sex, &c.age_group, c.race, c.week, &c.zip)?;
        data.cells.push(idx);
        data.n.push(c.n_tests);
        data.y.push(c.n_positive);
    }
    data.layout = build_layout(spec, &data.levels, &data.predictors);
    Ok(data)
}

fn build_layout(spec: &ModelSpec, levels: &Levels, predictors: &[String]) -> Layout {
    let mut layout = Layout::default();
    let push = |layout: &mut Layout,
                    kind: BlockKind,
                    factor: Option<Factor>,
                    names: Vec<String>,
                    labels: Vec<String>|
     -> Range<usize> {
        let offset = layout.dim;
        layout.dim += names.len();
        layout.blocks.push(Block {
            kind,
            factor,
            offset,
            names,
            labels,
        });
        offset..layout.dim
    };

    layout.intercept = push(
        &mut layout,
        BlockKind::Intercept,
        None,
        vec!["Intercept".into()],
        vec!["Intercept".into()],
    )
    .start;
    if spec.has_male() {
        layout.male = Some(
            push(
                &mut layout,
                BlockKind::Fixed,
                None,
                vec!["sex.male".into()],
                vec!["sex.male".into()],
            )
            .start,
        );
    }
    layout.alpha = push(
        &mut layout,
        BlockKind::Fixed,
        None,
        predictors.to_vec(),
        predictors.to_vec(),
    );

    let level_names = |f: Factor, prefix: &str| -> Vec<String> {
        (0..levels.count(f))
            .map(|i| format!("{prefix}_{f}[{}]", levels.label(f, i)))
            .collect()
    };
    for f in [Factor::Age, Factor::Race, Factor::Time] {
        if spec.has_varying(f) {
            let r = push(
                &mut layout,
                BlockKind::Raw,
                Some(f),
                level_names(f, "z"),
                level_names(f, "r"),
            );
            layout.raw.insert(f, r);
        }
    }
    for f in Factor::ALL {
        if spec.has_varying(f) {
            let i = push(
                &mut layout,
                BlockKind::LogSd,
                Some(f),
                vec![format!("log_sd_{f}")],
                vec![format!("sd_{f}")],
            )
            .start;
            layout.log_sd.insert(f, i);
        }
    }
    if spec.has_varying(Factor::Zip) {
        let r = push(
            &mut layout,
            BlockKind::Raw,
            Some(Factor::Zip),
            level_names(Factor::Zip, "z"),
            level_names(Factor::Zip, "e"),
        );
        layout.raw.insert(Factor::Zip, r);
    }
    for s in &spec.varying_slopes {
        let g = s.group;
        let names = (0..levels.count(g))
            .map(|i| format!("z_{}[{}]", s.label(), levels.label(g, i)))
            .collect();
        let labels = (0..levels.count(g))
            .map(|i| format!("b_{}[{}]", s.label(), levels.label(g, i)))
            .collect();
        let r = push(&mut layout, BlockKind::Slope, Some(g), names, labels);
        layout.slopes.push(r);
    }
    layout
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Cell, ColumnScale, GeoRow};

    fn geo(zips: &[&str], k: usize) -> GeoPredictorTable {
        GeoPredictorTable {
            columns: (0..k).map(|i| format!("x{i}")).collect(),
            rows: zips
                .iter()
                .enumerate()
                .map(|(i, z)| GeoRow {
                    zip: Zip::new(z).unwrap(),
                    county_fips: "26161".into(),
                    values: (0..k).map(|c| (i * k + c) as f64 * 0.1).collect(),
                })
                .collect(),
            scales: vec![Some(ColumnScale { mean: 0.0, sd: 1.0 }); k],
        }
    }

    fn cell(zip: &str, week: u32) -> Cell {
        Cell {
            sex: Sex::Male,
            age_group: "18-34".into(),
            race: Race::White,
            zip: Zip::new(zip).unwrap(),
            week,
            n_tests: 3,
            n_positive: 1,
        }
    }

    #[test]
    fn intercept_only_has_one_parameter() {
        let cells = CellTable {
            week_origin: None,
            rows: vec![cell("48104", 0)],
        };
        let d = compile_spec(&ModelSpec::intercept_only(), &cells, &geo(&["48104"], 1)).unwrap();
        assert_eq!(d.dim(), 1);
        assert_eq!(d.layout.names(), vec!["Intercept"]);
    }

    #[test]
    fn unknown_zip_is_fatal() {
        let cells = CellTable {
            week_origin: None,
            rows: vec![cell("48109", 0)],
        };
        let err = compile_spec(&ModelSpec::intercept_only(), &cells, &geo(&["48104"], 1));
        assert!(matches!(err, Err(Error::UnknownLevel { factor, .. }) if factor == "zip"));
    }

    #[test]
    fn weeks_without_tests_still_get_levels() {
        let cells = CellTable {
            week_origin: None,
            rows: vec![cell("48104", 0), cell("48104", 4)],
        };
        let mut spec = ModelSpec::intercept_only();
        spec.varying_intercepts = vec![Factor::Time];
        let d = compile_spec(&spec, &cells, &geo(&["48104"], 1)).unwrap();
        assert_eq!(d.levels.weeks, 5);
        assert_eq!(d.dim(), 1 + 5 + 1);
    }

    #[test]
    fn labels_follow_layout() {
        let cells = CellTable {
            week_origin: None,
            rows: vec![cell("48104", 0), cell("48105", 1)],
        };
        let mut spec = ModelSpec::model_b().with_predictors(&["x0".into(), "x1".into()]);
        spec.varying_slopes[0].predictor = "x1".into();
        let d = compile_spec(&spec, &cells, &geo(&["48104", "48105"], 2)).unwrap();
        let labels = d.layout.labels();
        assert_eq!(labels.len(), d.dim());
        assert_eq!(&labels[..4], &["Intercept", "sex.male", "x0", "x1"]);
        assert!(labels.contains(&"sd_zip".to_string()));
        assert!(labels.contains(&"e_zip[48105]".to_string()));
        assert_eq!(labels.last().unwrap(), "b_race_x1[White]");
        assert_eq!(d.layout.index_of("sd_age"), Some(4 + 1 + 3 + 2));
    }
}
