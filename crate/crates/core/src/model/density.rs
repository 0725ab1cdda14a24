use super::compile::{CellIndex, ModelData};
use super::spec::Factor;
use crate::error::{Error, Result};
use crate::math::{half_normal_lpdf, inv_logit, ln_choose, normal_lpdf};
use crate::sampler::LogDensity;

/// Observed positivity from incidence: `p = (1 − γ)(1 − π) + δπ`.
pub fn adjust_positivity(pi: f64, sensitivity: f64, specificity: f64) -> f64 {
    (1.0 - specificity) * (1.0 - pi) + sensitivity * pi
}

/// Log terms of the measurement model, precomputed once per outcome.
#[derive(Debug, Clone, Copy)]
pub struct Measurement {
    ln_fp: f64,
    ln_tp: f64,
    ln_tn: f64,
    ln_fn: f64,
}

impl Measurement {
    pub fn new(sensitivity: f64, specificity: f64) -> Self {
        Measurement {
            ln_fp: (1.0 - specificity).ln(),
            ln_tp: sensitivity.ln(),
            ln_tn: specificity.ln(),
            ln_fn: (1.0 - sensitivity).ln(),
        }
    }

    /// `(ln p, d ln p/dη, ln(1 − p), d ln(1 − p)/dη)` at linear predictor `eta`.
    ///
    /// Evaluated in log space so neither π nor p needs clamping.
    pub fn log_terms(&self, eta: f64) -> (f64, f64, f64, f64) {
        let t = (-eta.abs()).exp();
        let l1p = t.ln_1p();
        let ln_pi = eta.min(0.0) - l1p;
        let ln_1m_pi = -eta.max(0.0) - l1p;
        let pi = if eta >= 0.0 { 1.0 / (1.0 + t) } else { t / (1.0 + t) };

        // d ln(w_neg (1 − π) + w_pos π)/dη = share of the positive branch − π
        let mix = |ln_neg: f64, ln_pos: f64| {
            if ln_neg == f64::NEG_INFINITY {
                return (ln_pos + ln_pi, 1.0 - pi);
            }
            if ln_pos == f64::NEG_INFINITY {
                return (ln_neg + ln_1m_pi, -pi);
            }
            let a = ln_neg + ln_1m_pi;
            let b = ln_pos + ln_pi;
            let l = a.max(b) + (-(a - b).abs()).exp().ln_1p();
            (l, (b - l).exp() - pi)
        };
        let (lp, dlp) = mix(self.ln_fp, self.ln_tp);
        let (lq, dlq) = mix(self.ln_tn, self.ln_fn);
        (lp, dlp, lq, dlq)
    }

    /// Binomial log-pmf without the coefficient, and its η-derivative.
    pub fn loglik(&self, n: u64, y: u64, eta: f64) -> (f64, f64) {
        if n == 0 {
            return (0.0, 0.0);
        }
        let (lp, dlp, lq, dlq) = self.log_terms(eta);
        let (mut ll, mut d) = (0.0, 0.0);
        if y > 0 {
            ll += y as f64 * lp;
            d += y as f64 * dlp;
        }
        if n > y {
            ll += (n - y) as f64 * lq;
            d += (n - y) as f64 * dlq;
        }
        (ll, d)
    }
}

/// Effects on the constrained scale, assembled from a parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Effects {
    pub intercept: f64,
    pub male: f64,
    pub alpha: Vec<f64>,
    /// Per-level effects for age, race, time and zip (zip = error term only);
    /// empty when the factor has no varying intercept.
    pub varying: [Vec<f64>; 4],
    pub sd: [f64; 4],
    /// Full zip intercept per zip level: predictors plus error.
    pub zip_total: Vec<f64>,
    pub slopes: Vec<Vec<f64>>,
}

fn slot(f: Factor) -> usize {
    match f {
        Factor::Age => 0,
        Factor::Race => 1,
        Factor::Time => 2,
        Factor::Zip => 3,
    }
}

impl Effects {
    pub fn from_unconstrained(data: &ModelData, x: &[f64]) -> Self {
        Self::build(data, x, false)
    }

    pub fn from_constrained(data: &ModelData, c: &[f64]) -> Self {
        Self::build(data, c, true)
    }

    fn build(data: &ModelData, x: &[f64], constrained: bool) -> Self {
        let l = &data.layout;
        let mut varying: [Vec<f64>; 4] = Default::default();
        let mut sd = [0.0; 4];
        for (&f, &i) in &l.log_sd {
            sd[slot(f)] = if constrained { x[i] } else { x[i].exp() };
        }
        for (&f, r) in &l.raw {
            let s = sd[slot(f)];
            varying[slot(f)] = x[r.clone()]
                .iter()
                .map(|v| if constrained { *v } else { s * v })
                .collect();
        }
        let alpha = x[l.alpha.clone()].to_vec();
        let zip_total = (0..data.levels.zip.len())
            .map(|s| {
                let fixed: f64 = data.z_row(s).iter().zip(&alpha).map(|(z, a)| z * a).sum();
                fixed + varying[3].get(s).copied().unwrap_or(0.0)
            })
            .collect();
        let scale = data.spec.priors.slope;
        let slopes = l
            .slopes
            .iter()
            .map(|r| {
                x[r.clone()]
                    .iter()
                    .map(|v| if constrained { *v } else { scale * v })
                    .collect()
            })
            .collect();
        Effects {
            intercept: x[l.intercept],
            male: l.male.map_or(0.0, |i| x[i]),
            alpha,
            varying,
            sd,
            zip_total,
            slopes,
        }
    }

    /// Linear predictor `logit π` for a stratum.
    pub fn eta(&self, data: &ModelData, c: &CellIndex) -> f64 {
        let mut eta = self.intercept + self.zip_total[c.zip];
        if c.male {
            eta += self.male;
        }
        for f in [Factor::Age, Factor::Race, Factor::Time] {
            if let Some(v) = self.varying[slot(f)].get(c.level(f)) {
                eta += v;
            }
        }
        for (b, s) in self.slopes.iter().zip(&data.slopes) {
            eta += b[c.level(s.group)] * s.values[c.zip];
        }
        eta
    }

    pub fn incidence(&self, data: &ModelData, c: &CellIndex) -> f64 {
        inv_logit(self.eta(data, c))
    }
}

/// Maps unconstrained parameters to the reported scale: sds are
/// exponentiated, raw effects multiplied by their scale.
pub fn constrain(data: &ModelData, x: &[f64]) -> Vec<f64> {
    let l = &data.layout;
    let mut c = x.to_vec();
    for (&f, &i) in &l.log_sd {
        c[i] = x[i].exp();
        if let Some(r) = l.raw.get(&f) {
            for j in r.clone() {
                c[j] = c[i] * x[j];
            }
        }
    }
    let scale = data.spec.priors.slope;
    for r in &l.slopes {
        for j in r.clone() {
            c[j] = scale * x[j];
        }
    }
    c
}

pub fn unconstrain(data: &ModelData, c: &[f64]) -> Vec<f64> {
    let l = &data.layout;
    let mut x = c.to_vec();
    for (&f, &i) in &l.log_sd {
        x[i] = c[i].ln();
        if let Some(r) = l.raw.get(&f) {
            for j in r.clone() {
                x[j] = c[j] / c[i];
            }
        }
    }
    let scale = data.spec.priors.slope;
    for r in &l.slopes {
        for j in r.clone() {
            x[j] = c[j] / scale;
        }
    }
    x
}

/// Per-cell incidence π_j.
pub fn cell_incidence(data: &ModelData, x: &[f64]) -> Vec<f64> {
    let e = Effects::from_unconstrained(data, x);
    data.cells.iter().map(|c| e.incidence(data, c)).collect()
}

fn check(data: &ModelData, x: &[f64]) -> Result<()> {
    if x.len() != data.dim() {
        return Err(Error::Dimension(format!(
            "expected {} parameters, got {}",
            data.dim(),
            x.len()
        )));
    }
    match x.iter().position(|v| !v.is_finite()) {
        Some(i) => Err(Error::NonFinite(i)),
        None => Ok(()),
    }
}

/// Prior log density including the log-Jacobian of the log-sd transform.
pub fn log_prior(data: &ModelData, x: &[f64]) -> f64 {
    let l = &data.layout;
    let p = &data.spec.priors;
    let mut lp = normal_lpdf(x[l.intercept], 0.0, p.intercept);
    if let Some(i) = l.male {
        lp += normal_lpdf(x[i], 0.0, p.fixed);
    }
    for &v in &x[l.alpha.clone()] {
        lp += normal_lpdf(v, 0.0, p.fixed);
    }
    for r in l.raw.values().chain(&l.slopes) {
        for &v in &x[r.clone()] {
            lp += normal_lpdf(v, 0.0, 1.0);
        }
    }
    for (&f, &i) in &l.log_sd {
        lp += half_normal_lpdf(x[i].exp(), p.sd_scale(f)) + x[i];
    }
    lp
}

/// Sum of binomial log-pmfs over cells, coefficients dropped.
pub fn log_likelihood(data: &ModelData, x: &[f64]) -> f64 {
    let e = Effects::from_unconstrained(data, x);
    let m = Measurement::new(data.spec.outcome.sensitivity, data.spec.outcome.specificity);
    data.cells
        .iter()
        .zip(data.n.iter().zip(&data.y))
        .map(|(c, (&n, &y))| m.loglik(n, y, e.eta(data, c)).0)
        .sum()
}

/// Sum over cells of `ln C(n_j, y_j)`, the constant dropped from
/// [`log_likelihood`].
pub fn binomial_constant(data: &ModelData) -> f64 {
    data.n.iter().zip(&data.y).map(|(&n, &y)| ln_choose(n as f64, y as f64)).sum()
}

pub fn log_posterior(data: &ModelData, x: &[f64]) -> Result<f64> {
    check(data, x)?;
    Ok(log_prior(data, x) + log_likelihood(data, x))
}

pub fn grad_log_posterior(data: &ModelData, x: &[f64]) -> Result<Vec<f64>> {
    check(data, x)?;
    let mut g = vec![0.0; x.len()];
    value_and_grad(data, x, &mut g);
    Ok(g)
}

/// Log posterior and its gradient in one pass. No input checks.
pub fn value_and_grad(data: &ModelData, x: &[f64], g: &mut [f64]) -> f64 {
    let l = &data.layout;
    let p = &data.spec.priors;
    let e = Effects::from_unconstrained(data, x);
    let m = Measurement::new(data.spec.outcome.sensitivity, data.spec.outcome.specificity);
    g.iter_mut().for_each(|v| *v = 0.0);

    // d/dη accumulated per level; chain rule applied afterwards.
    let mut g_level: [Vec<f64>; 4] = [
        vec![0.0; data.levels.count(Factor::Age)],
        vec![0.0; data.levels.count(Factor::Race)],
        vec![0.0; data.levels.count(Factor::Time)],
        vec![0.0; data.levels.count(Factor::Zip)],
    ];
    let mut g_slope: Vec<Vec<f64>> = data
        .slopes
        .iter()
        .map(|s| vec![0.0; data.levels.count(s.group)])
        .collect();
    let (mut g_icpt, mut g_male, mut ll) = (0.0, 0.0, 0.0);

    for (c, (&n, &y)) in data.cells.iter().zip(data.n.iter().zip(&data.y)) {
        let (v, d) = m.loglik(n, y, e.eta(data, c));
        ll += v;
        g_icpt += d;
        if c.male {
            g_male += d;
        }
        g_level[0][c.age] += d;
        g_level[1][c.race] += d;
        g_level[2][c.week] += d;
        g_level[3][c.zip] += d;
        for (gs, s) in g_slope.iter_mut().zip(&data.slopes) {
            gs[c.level(s.group)] += d * s.values[c.zip];
        }
    }

    g[l.intercept] = g_icpt;
    if let Some(i) = l.male {
        g[i] = g_male;
    }
    for (k, gi) in l.alpha.clone().enumerate() {
        g[gi] = g_level[3]
            .iter()
            .enumerate()
            .map(|(s, d)| d * data.z_row(s)[k])
            .sum();
    }
    for (&f, r) in &l.raw {
        let sd = e.sd[slot(f)];
        let mut g_tau = 0.0;
        for (lvl, gi) in r.clone().enumerate() {
            let d = g_level[slot(f)][lvl];
            g[gi] = d * sd;
            g_tau += d * sd * x[gi];
        }
        g[l.log_sd[&f]] = g_tau;
    }
    for (r, gs) in l.slopes.iter().zip(&g_slope) {
        for (lvl, gi) in r.clone().enumerate() {
            g[gi] = gs[lvl] * p.slope;
        }
    }

    // priors
    g[l.intercept] -= x[l.intercept] / (p.intercept * p.intercept);
    if let Some(i) = l.male {
        g[i] -= x[i] / (p.fixed * p.fixed);
    }
    for i in l.alpha.clone() {
        g[i] -= x[i] / (p.fixed * p.fixed);
    }
    for r in l.raw.values().chain(&l.slopes) {
        for i in r.clone() {
            g[i] -= x[i];
        }
    }
    for (&f, &i) in &l.log_sd {
        let s = p.sd_scale(f);
        let sigma = x[i].exp();
        g[i] += 1.0 - sigma * sigma / (s * s);
    }

    ll + log_prior(data, x)
}

/// Pointwise log-likelihood of every cell, binomial coefficients included.
pub fn pointwise_cell_loglik(data: &ModelData, x_constrained: &[f64], out: &mut [f64]) {
    let e = Effects::from_constrained(data, x_constrained);
    let m = Measurement::new(data.spec.outcome.sensitivity, data.spec.outcome.specificity);
    for (j, c) in data.cells.iter().enumerate() {
        let (n, y) = (data.n[j], data.y[j]);
        out[j] = m.loglik(n, y, e.eta(data, c)).0 + ln_choose(n as f64, y as f64);
    }
}

impl LogDensity for ModelData {
    fn dim(&self) -> usize {
        self.layout.dim
    }

    fn log_density_grad(&self, x: &[f64], grad: &mut [f64]) -> f64 {
        value_and_grad(self, x, grad)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn measurement_examples() {
        assert!((adjust_positivity(0.10, 0.7, 1.0) - 0.07).abs() < 1e-15);
        assert!((adjust_positivity(0.0, 0.7, 0.95) - 0.05).abs() < 1e-15);
        assert_eq!(adjust_positivity(0.37, 1.0, 1.0), 0.37);
    }

    #[test]
    fn log_terms_match_direct_formula() {
        let m = Measurement::new(0.8, 0.97);
        for eta in [-30.0, -4.0, -0.3, 0.0, 1.5, 12.0] {
            let pi = inv_logit(eta);
            let p = adjust_positivity(pi, 0.8, 0.97);
            let (lp, dlp, lq, dlq) = m.log_terms(eta);
            assert!((lp - p.ln()).abs() < 1e-12, "{eta}");
            assert!((lq - (1.0 - p).ln()).abs() < 1e-12, "{eta}");
            let dp = (0.8 + 0.97 - 1.0) * pi * (1.0 - pi);
            assert!((dlp - dp / p).abs() < 1e-12);
            assert!((dlq + dp / (1.0 - p)).abs() < 1e-12);
        }
    }

    #[test]
    fn perfect_test_far_tail_stays_finite() {
        let m = Measurement::new(1.0, 1.0);
        let (lp, dlp, lq, dlq) = m.log_terms(-800.0);
        assert!(lp.is_finite() && dlp.is_finite());
        assert!((lp + 800.0).abs() < 1e-9);
        assert_eq!(lq, 0.0);
        assert!(dlq.abs() < 1e-300);
    }
}
