//! Synthetic data drawn from the model itself, and raw input files built
//! from it.

use std::collections::BTreeMap;
use std::path::Path;

use chrono::{Duration, NaiveDate};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::io::{create, write_crosswalk, write_population, write_tracts};
use crate::data::{
    link_zip_predictors, standardize_predictors, Age, AgeBins, Cell, CellTable, CrosswalkRow,
    CrosswalkTable, GeoPredictorTable, PopulationRow, PoststratRow, PoststratTable, Race, Sex,
    TractRow, TractTable, Zip, DEFAULT_PREDICTORS,
};
use crate::error::{Error, Result};
use crate::model::{
    adjust_positivity, cell_incidence, compile_spec_with_ages, constrain, Factor, ModelData,
    ModelSpec,
};

/// True values of the generating model. Varying effects are drawn from
/// their normal priors with these sds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Truth {
    pub intercept: f64,
    pub male: f64,
    /// One coefficient per zip predictor.
    pub alpha: Vec<f64>,
    pub sd_age: f64,
    pub sd_race: f64,
    pub sd_time: f64,
    pub sd_zip: f64,
}

impl Default for Truth {
    fn default() -> Self {
        Truth {
            intercept: -2.5,
            male: 0.2,
            alpha: vec![-0.1, 0.15, 0.1, -0.05, 0.05, 0.2],
            sd_age: 0.4,
            sd_race: 0.3,
            sd_time: 0.5,
            sd_zip: 0.3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub zips: usize,
    pub counties: usize,
    pub weeks: u32,
    pub predictors: Vec<String>,
    /// Probability that a stratum has any tests in a given week.
    pub tested_share: f64,
    /// Mean tests in a tested stratum-week.
    pub mean_tests: f64,
    pub sensitivity: f64,
    pub specificity: f64,
    pub truth: Truth,
    pub seed: u64,
    pub week_origin: NaiveDate,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            zips: 10,
            counties: 3,
            weeks: 40,
            predictors: DEFAULT_PREDICTORS.iter().map(|s| s.to_string()).collect(),
            tested_share: 0.15,
            mean_tests: 6.0,
            sensitivity: 0.7,
            specificity: 1.0,
            truth: Truth::default(),
            seed: 1,
            week_origin: NaiveDate::from_ymd_opt(2021, 11, 1).expect("valid date"),
        }
    }
}

/// One synthetic data set and the generating parameters.
#[derive(Debug, Clone)]
pub struct Simulated {
    pub cells: CellTable,
    pub geo: GeoPredictorTable,
    pub poststrat: PoststratTable,
    /// Model A compiled on `cells`, with the simulated counts.
    pub data: ModelData,
    /// Generating values on the unconstrained scale of `data.layout`.
    pub truth_unconstrained: Vec<f64>,
    /// Generating values labelled as in the draws.
    pub truth: BTreeMap<String, f64>,
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn zip_code(i: usize) -> Zip {
    Zip::new(&format!("{:05}", 48001 + 2 * i)).expect("five digits")
}

fn county_fips(i: usize) -> String {
    format!("26{:03}", 1 + 2 * i)
}

/// Zip-level predictors drawn iid normal, then standardized.
fn simulate_geo(cfg: &SimConfig, rng: &mut ChaCha8Rng) -> Result<GeoPredictorTable> {
    let rows = (0..cfg.zips)
        .map(|i| crate::data::GeoRow {
            zip: zip_code(i),
            county_fips: county_fips(i % cfg.counties.max(1)),
            values: cfg.predictors.iter().map(|_| normal(rng)).collect(),
        })
        .collect();
    standardize_predictors(&GeoPredictorTable {
        columns: cfg.predictors.clone(),
        rows,
        scales: vec![None; cfg.predictors.len()],
    })
}

fn simulate_population(zips: &[Zip], bins: &AgeBins, rng: &mut ChaCha8Rng) -> PoststratTable {
    let mut rows = Vec::new();
    for zip in zips {
        let size = rng.random_range(0.5..2.0);
        for sex in Sex::ALL {
            for bin in bins.bins() {
                for race in Race::ALL {
                    let base = match race {
                        Race::White => 700.0,
                        Race::Black => 200.0,
                        Race::Other => 100.0,
                    };
                    rows.push(PoststratRow {
                        sex,
                        age_group: bin.label.clone(),
                        race,
                        zip: zip.clone(),
                        population: (base * size * rng.random_range(0.5..1.5f64)).round(),
                    });
                }
            }
        }
    }
    PoststratTable { rows }
}

/// Draws tests per stratum-week, compiles `spec` and draws positives from
/// the model at `truth`.
pub fn simulate_with_geo(
    cfg: &SimConfig,
    geo: GeoPredictorTable,
    rng: &mut ChaCha8Rng,
) -> Result<Simulated> {
    let bins = AgeBins::default();
    let zips: Vec<Zip> = geo.rows.iter().map(|r| r.zip.clone()).collect();
    let poststrat = simulate_population(&zips, &bins, rng);
    let poisson = Poisson::new(cfg.mean_tests.max(1e-9))
        .map_err(|e| Error::Invalid(format!("mean_tests: {e}")))?;

    let mut rows = Vec::new();
    for week in 0..cfg.weeks {
        for r in &poststrat.rows {
            if rng.random::<f64>() >= cfg.tested_share {
                continue;
            }
            let n = 1 + poisson.sample(rng) as u64;
            rows.push(Cell {
                sex: r.sex,
                age_group: r.age_group.clone(),
                race: r.race,
                zip: r.zip.clone(),
                week,
                n_tests: n,
                n_positive: 0,
            });
        }
    }
    rows.sort_by(|a, b| {
        (a.sex, &a.age_group, a.race, &a.zip, a.week).cmp(&(b.sex, &b.age_group, b.race, &b.zip, b.week))
    });
    let mut cells = CellTable {
        week_origin: Some(cfg.week_origin),
        rows,
    };

    let mut spec = ModelSpec::model_a().with_predictors(&cfg.predictors);
    spec.outcome.sensitivity = cfg.sensitivity;
    spec.outcome.specificity = cfg.specificity;
    let mut data = compile_spec_with_ages(&spec, &cells, &geo, &bins.labels())?;
    if data.levels.weeks < cfg.weeks {
        return Err(Error::Invalid("simulation produced no tests in the last week".into()));
    }

    let t = &cfg.truth;
    if t.alpha.len() != cfg.predictors.len() {
        return Err(Error::Dimension(format!(
            "truth has {} predictor coefficients for {} predictors",
            t.alpha.len(),
            cfg.predictors.len()
        )));
    }
    let l = &data.layout;
    let mut x = vec![0.0; l.dim];
    x[l.intercept] = t.intercept;
    if let Some(m) = l.male {
        x[m] = t.male;
    }
    for (i, a) in l.alpha.clone().zip(&t.alpha) {
        x[i] = *a;
    }
    for (f, sd) in [
        (Factor::Age, t.sd_age),
        (Factor::Race, t.sd_race),
        (Factor::Time, t.sd_time),
        (Factor::Zip, t.sd_zip),
    ] {
        if let Some(&k) = l.log_sd.get(&f) {
            x[k] = sd.ln();
        }
        if let Some(r) = l.raw.get(&f) {
            for i in r.clone() {
                x[i] = normal(rng);
            }
        }
    }

    let pi = cell_incidence(&data, &x);
    for (j, cell) in cells.rows.iter_mut().enumerate() {
        let p = adjust_positivity(pi[j], cfg.sensitivity, cfg.specificity).clamp(0.0, 1.0);
        let y = Binomial::new(cell.n_tests, p)
            .map_err(|e| Error::Invalid(format!("binomial: {e}")))?
            .sample(rng);
        cell.n_positive = y;
        data.y[j] = y;
    }

    let truth = data
        .layout
        .labels()
        .into_iter()
        .zip(constrain(&data, &x))
        .collect();
    Ok(Simulated {
        cells,
        geo,
        poststrat,
        data,
        truth_unconstrained: x,
        truth,
    })
}

/// Simulates predictors, population, tests and positives from Model A.
pub fn simulate(cfg: &SimConfig) -> Result<Simulated> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let geo = simulate_geo(cfg, &mut rng)?;
    simulate_with_geo(cfg, geo, &mut rng)
}

/// Raw input files as the preprocessing stage expects them.
#[derive(Debug, Clone)]
pub struct RawFixture {
    /// Records file text, header included.
    pub records: String,
    pub population: Vec<PopulationRow>,
    pub crosswalk: CrosswalkTable,
    pub tracts: TractTable,
    pub n_records: usize,
    /// Rows written with a malformed zip or result.
    pub n_malformed: usize,
}

impl RawFixture {
    /// Writes `records.csv`, `population.csv`, `crosswalk.csv` and
    /// `tracts.csv` into `dir`.
    pub fn write_dir(&self, dir: &Path) -> Result<()> {
        let path = dir.join("records.csv");
        std::io::Write::write_all(&mut create(&path)?, self.records.as_bytes())
            .map_err(|e| Error::io(&path, e))?;
        write_population(create(&dir.join("population.csv"))?, &self.population)?;
        write_crosswalk(create(&dir.join("crosswalk.csv"))?, &self.crosswalk)?;
        write_tracts(create(&dir.join("tracts.csv"))?, &self.tracts)?;
        Ok(())
    }
}

/// Builds tracts, a crosswalk, a population file and individual records.
///
/// Besides the main zips (state FIPS 26) the fixture carries a zip
/// with only three records and a neighbouring-state zip holding well under
/// 1% of tests, so both geographic filters have something to drop. About 2%
/// of records miss a demographic field and about 1% are malformed.
pub fn raw_fixture(cfg: &SimConfig) -> Result<RawFixture> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut tracts = TractTable {
        columns: cfg.predictors.clone(),
        rows: Vec::new(),
    };
    let mut crosswalk = CrosswalkTable::default();
    let extra = [("49001", "39"), ("48901", "26")];
    let mut all_zips: Vec<(Zip, String)> = (0..cfg.zips)
        .map(|i| (zip_code(i), county_fips(i % cfg.counties.max(1))))
        .collect();
    for (z, state) in extra {
        all_zips.push((Zip::new(z).expect("valid"), format!("{state}001")));
    }
    for (i, (zip, county)) in all_zips.iter().enumerate() {
        let n_tracts = 1 + i % 3;
        let mut left = 1.0;
        for t in 0..n_tracts {
            let id = format!("{county}{:04}{:02}", 100 + i, t);
            let ratio = if t + 1 == n_tracts {
                (left * 1e4f64).round() / 1e4
            } else {
                let r = (rng.random_range(0.2..0.5f64) * 1e4).round() / 1e4;
                left -= r;
                r
            };
            crosswalk.rows.push(CrosswalkRow {
                zip: zip.clone(),
                tract_id: id.clone(),
                residential_ratio: ratio,
            });
            tracts.rows.push(TractRow {
                tract_id: id,
                population: rng.random_range(500..5000) as f64,
                values: (0..cfg.predictors.len())
                    .map(|_| (rng.random_range(0.0..100.0f64) * 100.0).round() / 100.0)
                    .collect(),
            });
        }
    }
    let main: Vec<Zip> = all_zips[..cfg.zips].iter().map(|z| z.0.clone()).collect();
    let geo = standardize_predictors(&link_zip_predictors(&crosswalk, &tracts, &main)?)?;
    let sim = simulate_with_geo(cfg, geo, &mut rng)?;

    let bins = AgeBins::default();
    let mut population = Vec::new();
    for r in &sim.poststrat.rows {
        population.push(PopulationRow {
            zip: r.zip.clone(),
            sex: r.sex,
            age: Age::Group(r.age_group.clone()),
            race: r.race,
            count: r.population,
        });
    }
    for (zip, _) in &all_zips[cfg.zips..] {
        for sex in Sex::ALL {
            for bin in bins.bins() {
                for race in Race::ALL {
                    population.push(PopulationRow {
                        zip: zip.clone(),
                        sex,
                        age: Age::Group(bin.label.clone()),
                        race,
                        count: 50.0,
                    });
                }
            }
        }
    }

    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["record_id", "sex", "race", "age", "zip", "result", "result_date"])?;
    let mut id = 0usize;
    let mut malformed = 0usize;
    let race_word = |r: Race, rng: &mut ChaCha8Rng| match r {
        Race::White => ["White", "white", "Caucasian"][rng.random_range(0..3)],
        Race::Black => ["Black", "Black or African American"][rng.random_range(0..2)],
        Race::Other => ["Other", "Asian", "American Indian"][rng.random_range(0..3)],
    };
    let mut emit = |w: &mut csv::Writer<Vec<u8>>,
                    rng: &mut ChaCha8Rng,
                    sex: Sex,
                    age_group: &str,
                    race: Race,
                    zip: &str,
                    week: u32,
                    positive: bool|
     -> Result<()> {
        id += 1;
        let bin = bins
            .bins()
            .iter()
            .find(|b| b.label == age_group)
            .expect("known bin");
        let age = rng.random_range(bin.lower..bin.upper.unwrap_or(bin.lower + 20));
        let date = cfg.week_origin
            + Duration::days(7 * i64::from(week) + rng.random_range(0..7));
        let mut fields = [
            format!("R{id:06}"),
            sex.to_string(),
            race_word(race, rng).to_string(),
            age.to_string(),
            zip.to_string(),
            u8::from(positive).to_string(),
            date.to_string(),
        ];
        let u: f64 = rng.random();
        if u < 0.02 {
            fields[1 + rng.random_range(0..3)] = String::new();
        } else if u < 0.03 {
            malformed += 1;
            if rng.random::<bool>() {
                fields[4] = format!("{}A", &zip[..4]);
            } else {
                fields[5] = "maybe".into();
            }
        }
        w.write_record(&fields)?;
        Ok(())
    };
    for c in &sim.cells.rows {
        for k in 0..c.n_tests {
            emit(
                &mut w,
                &mut rng,
                c.sex,
                &c.age_group,
                c.race,
                c.zip.as_str(),
                c.week,
                k < c.n_positive,
            )?;
        }
    }
    for (k, (zip, _)) in all_zips[cfg.zips..].iter().enumerate() {
        let count = if k == 0 { 8 } else { 3 };
        for i in 0..count {
            emit(
                &mut w,
                &mut rng,
                Sex::ALL[i % 2],
                "35-49",
                Race::White,
                zip.as_str(),
                (i as u32) % cfg.weeks.max(1),
                i == 0,
            )?;
        }
    }
    let records = String::from_utf8(w.into_inner().map_err(|e| Error::Invalid(e.to_string()))?)
        .expect("csv output is utf-8");
    Ok(RawFixture {
        records,
        population,
        crosswalk,
        tracts,
        n_records: id,
        n_malformed: malformed,
    })
}
