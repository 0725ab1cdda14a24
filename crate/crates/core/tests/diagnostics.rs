mod common;

use mrp_core::data::{Cell, CellTable, GeoPredictorTable, GeoRow, Race, Sex, Zip};
use mrp_core::loo::{
    elpd_diff, exact_loo, gpd_fit, loo_compare, pointwise_loglik, psis_loo, psis_tail_len,
    LogLikMatrix, EXACT_LOO_MAX_CELLS,
};
use mrp_core::math::inv_logit;
use mrp_core::model::{
    binomial_constant, compile_spec, log_likelihood, unconstrain, ModelData, ModelSpec,
};
use mrp_core::ppc::{ppc_replicates, PpcGroup, DEFAULT_REPS};
use mrp_core::sampler::{sample_model, DrawsMatrix, SamplerConfig};
use mrp_core::Error;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{Binomial, Discrete};

fn geo() -> GeoPredictorTable {
    GeoPredictorTable {
        columns: vec!["x".into()],
        rows: ["48104", "48105"]
            .iter()
            .enumerate()
            .map(|(i, z)| GeoRow {
                zip: Zip::new(z).unwrap(),
                county_fips: "26161".into(),
                values: vec![i as f64 - 0.5],
            })
            .collect(),
        scales: vec![None],
    }
}

fn tiny(cells: &[(u32, u64, u64)], delta: f64, gamma: f64) -> ModelData {
    let rows = cells
        .iter()
        .enumerate()
        .map(|(i, &(week, n, y))| Cell {
            sex: if i % 2 == 0 { Sex::Female } else { Sex::Male },
            age_group: "18-34".into(),
            race: Race::White,
            zip: Zip::new(["48104", "48105"][i % 2]).unwrap(),
            week,
            n_tests: n,
            n_positive: y,
        })
        .collect();
    let mut spec = ModelSpec::intercept_only();
    spec.outcome.sensitivity = delta;
    spec.outcome.specificity = gamma;
    compile_spec(&spec, &CellTable { week_origin: None, rows }, &geo()).unwrap()
}

fn point_mass(data: &ModelData, c: &[f64], draws: usize) -> DrawsMatrix {
    let values = (0..draws).flat_map(|_| c.iter().copied()).collect();
    DrawsMatrix::from_values(data.layout.labels(), 1, draws, values)
}

fn matrix(draws: usize, cells: usize, values: Vec<f64>) -> LogLikMatrix {
    LogLikMatrix {
        draws,
        cells,
        values,
        cell_labels: (0..cells).map(|j| format!("c{j}")).collect(),
        cells_digest: "d".into(),
    }
}

#[test]
fn symmetric_case_is_log_half() {
    let data = tiny(&[(0, 1, 0), (0, 1, 1)], 1.0, 1.0);
    let ll = pointwise_loglik(&point_mass(&data, &[0.0], 3), &data).unwrap();
    for v in &ll.values {
        assert!((v - 0.5f64.ln()).abs() < 1e-15);
    }
}

#[test]
fn single_draw_matches_direct_pmf() {
    let data = tiny(&[(0, 12, 3), (1, 7, 0), (1, 30, 29)], 0.7, 0.98);
    let beta = -0.4;
    let ll = pointwise_loglik(&point_mass(&data, &[beta], 1), &data).unwrap();
    let pi = inv_logit(beta);
    let p = 0.02 * (1.0 - pi) + 0.7 * pi;
    for (j, v) in ll.values.iter().enumerate() {
        let expected = Binomial::new(p, data.n[j]).unwrap().ln_pmf(data.y[j]);
        assert!((v - expected).abs() < 1e-12);
    }
}

#[test]
fn row_sums_match_the_model_likelihood() {
    let sim = common::small(2);
    let data = common::compile_preset(&sim, "B");
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let draws: Vec<f64> = (0..3)
        .flat_map(|_| {
            let x = common::normal_vec(&mut rng, data.dim(), 0.7);
            mrp_core::model::constrain(&data, &x)
        })
        .collect();
    let dm = DrawsMatrix::from_values(data.layout.labels(), 1, 3, draws);
    let ll = pointwise_loglik(&dm, &data).unwrap();
    for d in 0..3 {
        let row: f64 = ll.values[d * ll.cells..(d + 1) * ll.cells].iter().sum();
        let x = unconstrain(&data, dm.draw(d));
        let expected = log_likelihood(&data, &x) + binomial_constant(&data);
        assert!((row - expected).abs() < 1e-8 * expected.abs(), "{row} vs {expected}");
    }
}

#[test]
fn cells_without_tests_are_dropped_and_mismatch_is_fatal() {
    let data = tiny(&[(0, 4, 1), (0, 0, 0), (1, 2, 2)], 0.7, 1.0);
    let ll = pointwise_loglik(&point_mass(&data, &[0.1], 2), &data).unwrap();
    assert_eq!(ll.cells, 2);
    let wrong = DrawsMatrix::from_values(vec!["a".into(), "b".into()], 1, 1, vec![0.0, 0.0]);
    assert!(matches!(pointwise_loglik(&wrong, &data), Err(Error::Dimension(_))));
}

#[test]
fn identical_draws_give_in_sample_density() {
    let data = tiny(&[(0, 10, 2), (0, 5, 1), (1, 8, 0), (1, 3, 3)], 0.7, 1.0);
    let ll = pointwise_loglik(&point_mass(&data, &[-1.0], 200), &data).unwrap();
    let r = psis_loo(&ll).unwrap();
    let direct: f64 = (0..ll.cells).map(|j| ll.values[j]).sum();
    assert!((r.elpd_loo - direct).abs() < 1e-10);
    assert!(r.pareto_k.iter().all(|k| *k == 0.0));
    assert!(r.p_loo.abs() < 1e-10);
}

#[test]
fn heavy_tail_triggers_the_k_warning() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let s = 4000;
    // ratio 1/u is Pareto with shape 1
    let mut values = Vec::with_capacity(s * 2);
    for _ in 0..s {
        let u: f64 = rng.random_range(1e-12..1.0);
        values.push(u.ln());
        values.push(-1.0 + 0.01 * rng.random_range(-1.0..1.0));
    }
    let r = psis_loo(&matrix(s, 2, values)).unwrap();
    assert!(r.pareto_k[0] > 0.7, "{:?}", r.pareto_k);
    assert!(r.pareto_k[1] < 0.5);
    assert_eq!(r.warnings.len(), 1);
    assert!(r.warnings[0].contains("c0") && !r.warnings[0].contains("c1"));
}

#[test]
fn gpd_fit_recovers_a_known_shape() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let (k, sigma) = (0.5, 2.0);
    let mut x: Vec<f64> = (0..5000)
        .map(|_| {
            let u: f64 = rng.random_range(0.0..1.0);
            sigma / k * ((1.0 - u).powf(-k) - 1.0)
        })
        .collect();
    x.sort_by(f64::total_cmp);
    let (kh, sh) = gpd_fit(&x);
    assert!((kh - k).abs() < 0.1, "{kh}");
    assert!((sh / sigma - 1.0).abs() < 0.15, "{sh}");
}

#[test]
fn too_few_draws_is_an_error() {
    assert!(matches!(psis_loo(&matrix(50, 1, vec![0.0; 50])), Err(Error::Guard(_))));
    assert_eq!(psis_tail_len(1000), 95);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn loo_never_exceeds_in_sample_density(seed in 0u64..10_000, cells in 1usize..6, spread in 0.01f64..3.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = 200;
        let values: Vec<f64> = (0..s * cells).map(|_| -1.0 - spread * rng.random_range(0.0..1.0f64)).collect();
        let r = psis_loo(&matrix(s, cells, values)).unwrap();
        prop_assert!(r.elpd_loo <= r.lpd + 1e-9);
        prop_assert!((r.pointwise.iter().sum::<f64>() - r.elpd_loo).abs() < 1e-9);
        prop_assert_eq!(r.pareto_k.len(), cells);
    }

    #[test]
    fn pairwise_difference_is_antisymmetric(seed in 0u64..10_000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut one = || {
            let v: Vec<f64> = (0..200 * 4).map(|_| -2.0 * rng.random_range(0.0..1.0f64)).collect();
            psis_loo(&matrix(200, 4, v)).unwrap()
        };
        let (a, b) = (one(), one());
        let (d1, s1) = elpd_diff(&a, &b).unwrap();
        let (d2, s2) = elpd_diff(&b, &a).unwrap();
        prop_assert!((d1 + d2).abs() < 1e-12);
        prop_assert!((s1 - s2).abs() < 1e-12);
        let cmp = loo_compare(&[("a".into(), a), ("b".into(), b)]).unwrap();
        prop_assert_eq!((cmp.rows[0].elpd_diff, cmp.rows[0].se_diff), (0.0, 0.0));
        prop_assert!(cmp.rows[1].elpd_diff <= 0.0);
    }
}

#[test]
fn comparison_rows_and_mismatch() {
    let v: Vec<f64> = (0..600).map(|i| -1.0 - (i % 7) as f64 * 0.1).collect();
    let r = psis_loo(&matrix(200, 3, v)).unwrap();
    let single = loo_compare(&[("A".into(), r.clone())]).unwrap();
    assert_eq!(single.rows.len(), 1);
    assert_eq!((single.rows[0].elpd_diff, single.rows[0].se_diff), (0.0, 0.0));

    let dup = loo_compare(&[("A".into(), r.clone()), ("A2".into(), r.clone())]).unwrap();
    assert!(dup.rows[1].elpd_diff.abs() < 1e-12);
    assert_eq!(dup.rows[1].se_diff, 0.0);
    assert!(dup.rows[1].interval_covers_zero);

    let mut other = r.clone();
    other.cells_digest = "different".into();
    assert!(loo_compare(&[("A".into(), r), ("B".into(), other)]).is_err());

    let mut buf = Vec::new();
    dup.write_csv(&mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    assert_eq!(text.lines().next().unwrap(), "model,elpd_diff,se_diff");
}

/// `log ∫ Binom(y | n, δ·logit⁻¹(β)) N(β; 0, 5) dβ` by Simpson's rule.
fn prior_predictive(n: u64, y: u64, delta: f64) -> f64 {
    let (lo, hi, m) = (-40.0, 40.0, 20_000);
    let h = (hi - lo) / m as f64;
    let f = |b: f64| {
        let p = delta * inv_logit(b);
        let prior = (-0.5 * (b / 5.0).powi(2)).exp() / (5.0 * (2.0 * std::f64::consts::PI).sqrt());
        Binomial::new(p, n).unwrap().pmf(y) * prior
    };
    let mut sum = f(lo) + f(hi);
    for i in 1..m {
        let w = if i % 2 == 1 { 4.0 } else { 2.0 };
        sum += w * f(lo + i as f64 * h);
    }
    (sum * h / 3.0).ln()
}

#[test]
fn exact_loo_of_one_cell_is_the_prior_predictive() {
    let data = tiny(&[(0, 6, 2)], 0.7, 1.0);
    let cfg = SamplerConfig {
        chains: 4,
        warmup_iters: 500,
        sampling_iters: 2000,
        seed: 4,
        ..SamplerConfig::default()
    };
    let e = exact_loo(&data, &cfg).unwrap();
    let expected = prior_predictive(6, 2, 0.7);
    assert!((e.elpd - expected).abs() < 0.05, "{} vs {expected}", e.elpd);
}

#[test]
fn exact_loo_guard() {
    let cells: Vec<(u32, u64, u64)> = (0..=EXACT_LOO_MAX_CELLS as u32).map(|w| (w, 2, 1)).collect();
    let data = tiny(&cells, 0.7, 1.0);
    assert!(matches!(exact_loo(&data, &SamplerConfig::default()), Err(Error::Guard(_))));
}

#[test]
fn ppc_point_mass_at_zero() {
    let data = tiny(&[(0, 50, 0), (1, 40, 0)], 1.0, 1.0);
    let reps = ppc_replicates(&point_mass(&data, &[-60.0], 5), &data, PpcGroup::Week, 20, 1).unwrap();
    assert_eq!(reps.rows.len(), 2);
    assert!(reps.rows.iter().all(|r| r.replicates.iter().all(|v| *v == 0.0)));
}

#[test]
fn ppc_binomial_concentration() {
    let data = tiny(&[(0, 1_000_000, 50_000)], 1.0, 1.0);
    let beta = (0.05f64 / 0.95).ln();
    let reps = ppc_replicates(&point_mass(&data, &[beta], 5), &data, PpcGroup::Week, 50, 2).unwrap();
    for v in &reps.rows[0].replicates {
        assert!((v - 0.05).abs() < 0.001);
    }
}

#[test]
fn ppc_is_seeded_and_notes_empty_weeks() {
    let data = tiny(&[(0, 20, 3), (2, 10, 1)], 0.7, 1.0);
    let draws = point_mass(&data, &[-1.0], 10);
    let a = ppc_replicates(&draws, &data, PpcGroup::Week, DEFAULT_REPS, 9).unwrap();
    let b = ppc_replicates(&draws, &data, PpcGroup::Week, DEFAULT_REPS, 9).unwrap();
    assert_eq!(a, b);
    assert_eq!(DEFAULT_REPS, 10);
    assert_eq!(a.rows[0].replicates.len(), 10);
    assert_eq!(a.rows.len(), 2);
    assert_eq!(a.notes.len(), 1);
    assert!(a.notes[0].contains("without tests"));
    assert!(ppc_replicates(&draws, &data, PpcGroup::Week, 0, 9).is_err());
}

#[test]
fn ppc_groupings_partition_tests() {
    let sim = common::small(5);
    let cfg = SamplerConfig {
        chains: 2,
        warmup_iters: 150,
        sampling_iters: 100,
        ..SamplerConfig::default()
    };
    let draws = sample_model(&sim.data, &cfg, &()).unwrap();
    for g in ["week", "sex", "race", "age"] {
        let group: PpcGroup = g.parse().unwrap();
        let r = ppc_replicates(&draws, &sim.data, group, 5, 1).unwrap();
        let total: u64 = r.rows.iter().map(|r| r.n_tests).sum();
        assert_eq!(total, sim.cells.total_tests(), "{g}");
    }
}
