#![allow(dead_code)]

use mrp_core::data::{GeoPredictorTable, DEFAULT_PREDICTORS};
use mrp_core::model::{compile_spec_with_ages, ModelData, ModelSpec};
use mrp_core::simulate::{simulate, SimConfig, Simulated};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub const AGES: [&str; 6] = ["0-17", "18-34", "35-49", "50-64", "65-74", "75+"];

/// A few zips and weeks; fast to fit.
pub fn small_config(seed: u64) -> SimConfig {
    SimConfig {
        zips: 5,
        counties: 2,
        weeks: 6,
        tested_share: 0.3,
        seed,
        ..SimConfig::default()
    }
}

pub fn small(seed: u64) -> Simulated {
    simulate(&small_config(seed)).unwrap()
}

/// Compiles a preset against a simulated data set, keeping its predictors.
pub fn compile_preset(sim: &Simulated, name: &str) -> ModelData {
    let mut spec = ModelSpec::preset(name)
        .unwrap()
        .with_predictors(&sim.geo.columns);
    spec.outcome = sim.data.spec.outcome.clone();
    let ages: Vec<String> = AGES.iter().map(|s| s.to_string()).collect();
    compile_spec_with_ages(&spec, &sim.cells, &sim.geo, &ages).unwrap()
}

pub fn default_predictors() -> Vec<String> {
    DEFAULT_PREDICTORS.iter().map(|s| s.to_string()).collect()
}

pub fn normal_vec(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            scale * z
        })
        .collect()
}

pub fn uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    rng.random_range(lo..hi)
}

pub fn geo_value(geo: &GeoPredictorTable, zip: &str, column: &str) -> f64 {
    let c = geo.column_index(column).unwrap();
    geo.rows
        .iter()
        .find(|r| r.zip.as_str() == zip)
        .unwrap()
        .values[c]
}
