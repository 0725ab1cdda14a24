//! Browser demo bindings. Each export takes plain numbers and returns a
//! JSON string, so the page needs no generated type glue beyond strings.
//!
//! Everything runs single-threaded (the core crate is built without its
//! `parallel` feature here).

use mrp_core::model::{adjust_positivity, constrain};
use mrp_core::poststrat::{Grouping, Poststratifier};
use mrp_core::sampler::targets::Bivariate;
use mrp_core::sampler::{run_nuts, sample_model, DrawsMatrix, SamplerConfig};
use mrp_core::simulate::{simulate, SimConfig};
use serde::Serialize;
use wasm_bindgen::prelude::*;

type Out = Result<String, String>;

fn to_json<T: Serialize>(v: &T) -> Out {
    serde_json::to_string(v).map_err(|e| e.to_string())
}

#[derive(Serialize)]
struct Curve {
    pi: Vec<f64>,
    p: Vec<f64>,
    /// p at zero incidence: false positives only.
    floor: f64,
    /// p at full incidence.
    ceiling: f64,
}

/// Observed positivity as a function of true incidence on `points` evenly
/// spaced incidences in [0, 1].
#[wasm_bindgen]
pub fn measurement_curve(sensitivity: f64, specificity: f64, points: usize) -> Out {
    for (name, v) in [("sensitivity", sensitivity), ("specificity", specificity)] {
        if !(v > 0.0 && v <= 1.0) {
            return Err(format!("{name} must be in (0, 1]"));
        }
    }
    if sensitivity <= 1.0 - specificity {
        return Err("sensitivity must exceed 1 - specificity".into());
    }
    let n = points.clamp(2, 10_000);
    let pi: Vec<f64> = (0..n).map(|i| i as f64 / (n - 1) as f64).collect();
    let p = pi
        .iter()
        .map(|&x| adjust_positivity(x, sensitivity, specificity))
        .collect();
    to_json(&Curve {
        pi,
        p,
        floor: 1.0 - specificity,
        ceiling: sensitivity,
    })
}

#[derive(Serialize)]
struct GaussianRun {
    x: Vec<f64>,
    y: Vec<f64>,
    mean: [f64; 2],
    sd: [f64; 2],
    correlation: f64,
    divergences: usize,
}

fn moments(a: &[f64]) -> (f64, f64) {
    let n = a.len() as f64;
    let m = a.iter().sum::<f64>() / n;
    (m, (a.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0)).sqrt())
}

/// NUTS on a standard bivariate normal with correlation `rho`; one chain
/// with as many warmup iterations as draws.
#[wasm_bindgen]
pub fn gaussian_nuts(rho: f64, draws: usize, seed: u32) -> Out {
    if !(rho > -1.0 && rho < 1.0) {
        return Err("rho must be in (-1, 1)".into());
    }
    let cfg = SamplerConfig {
        chains: 1,
        warmup_iters: draws,
        sampling_iters: draws,
        seed: seed as u64,
        ..SamplerConfig::default()
    };
    let target = Bivariate::correlated(rho);
    let d = run_nuts(&target, &cfg, vec!["x".into(), "y".into()], |x| x.to_vec(), &())
        .map_err(|e| e.to_string())?;
    let (x, y) = (d.param(0), d.param(1));
    let ((mx, sx), (my, sy)) = (moments(&x), moments(&y));
    let n = x.len() as f64;
    let cov = x.iter().zip(&y).map(|(a, b)| (a - mx) * (b - my)).sum::<f64>() / (n - 1.0);
    to_json(&GaussianRun {
        divergences: d.divergences(),
        x,
        y,
        mean: [mx, my],
        sd: [sx, sy],
        correlation: cov / (sx * sy),
    })
}

#[derive(Serialize)]
struct Trend {
    week: Vec<u32>,
    truth: Vec<f64>,
    estimate: Vec<f64>,
    lower: Vec<f64>,
    upper: Vec<f64>,
    /// Positives over tests in the sample, per week.
    raw: Vec<f64>,
}

/// Simulates a small region, fits model A and poststratifies by week.
/// Returns the weekly truth, estimate with 95% interval, and raw positivity.
#[wasm_bindgen]
pub fn prevalence_trend(weeks: u32, draws: usize, seed: u32) -> Out {
    if !(2..=52).contains(&weeks) {
        return Err("weeks must be between 2 and 52".into());
    }
    let sim = simulate(&SimConfig {
        zips: 4,
        counties: 2,
        weeks,
        tested_share: 0.3,
        seed: seed as u64,
        ..SimConfig::default()
    })
    .map_err(|e| e.to_string())?;
    let cfg = SamplerConfig {
        chains: 1,
        warmup_iters: draws,
        sampling_iters: draws,
        seed: seed as u64,
        ..SamplerConfig::default()
    };
    let fit = sample_model(&sim.data, &cfg, &()).map_err(|e| e.to_string())?;
    let truth_draws = DrawsMatrix::from_values(
        sim.data.layout.labels(),
        1,
        1,
        constrain(&sim.data, &sim.truth_unconstrained),
    );
    let ps = Poststratifier::new(&sim.data, &sim.poststrat, &sim.geo, sim.cells.week_origin)
        .map_err(|e| e.to_string())?;
    let by_week: Grouping = "week".parse().map_err(|e: mrp_core::Error| e.to_string())?;
    let est = ps.estimate(&fit, by_week).map_err(|e| e.to_string())?;
    let truth = ps.estimate(&truth_draws, by_week).map_err(|e| e.to_string())?;

    let mut tests = vec![(0u64, 0u64); weeks as usize];
    for c in &sim.cells.rows {
        let t = &mut tests[c.week as usize];
        t.0 += c.n_tests;
        t.1 += c.n_positive;
    }
    let week: Vec<u32> = est.rows.iter().map(|r| r.week.unwrap_or(0)).collect();
    to_json(&Trend {
        raw: week
            .iter()
            .map(|&w| {
                let (n, y) = tests.get(w as usize).copied().unwrap_or((0, 0));
                if n == 0 { f64::NAN } else { y as f64 / n as f64 }
            })
            .collect(),
        truth: truth.rows.iter().map(|r| r.mean).collect(),
        estimate: est.rows.iter().map(|r| r.mean).collect(),
        lower: est.rows.iter().map(|r| r.l95).collect(),
        upper: est.rows.iter().map(|r| r.u95).collect(),
        week,
    })
}
