//! Rank-normalized split R-hat and bulk/tail effective sample size.
//!
//! Degenerate input (non-finite values, a constant parameter, or halves
//! shorter than four draws) yields `NaN`.

use crate::math::{normal_quantile, quantile_sorted, sorted_copy};

/// Splits each chain into halves, dropping the middle draw of odd chains.
pub fn split_chains(chains: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let mut out = Vec::with_capacity(2 * chains.len());
    for c in chains {
        let half = c.len() / 2;
        out.push(c[..half].to_vec());
        out.push(c[c.len() - half..].to_vec());
    }
    out
}

fn degenerate(chains: &[Vec<f64>]) -> bool {
    let mut all = chains.iter().flatten();
    let Some(&first) = all.next() else {
        return true;
    };
    if !first.is_finite() {
        return true;
    }
    let mut constant = true;
    for &v in all {
        if !v.is_finite() {
            return true;
        }
        if v != first {
            constant = false;
        }
    }
    constant
}

fn too_short(split: &[Vec<f64>]) -> bool {
    split.len() < 2 || split.iter().any(|c| c.len() < 4)
}

/// Replaces each value by `Φ⁻¹((r − 3/8) / (S + 1/4))`, `r` its average rank
/// over all chains.
pub fn rank_normalize(chains: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let flat: Vec<f64> = chains.iter().flatten().copied().collect();
    let s = flat.len();
    let mut order: Vec<usize> = (0..s).collect();
    order.sort_by(|&a, &b| flat[a].total_cmp(&flat[b]));
    let mut rank = vec![0.0; s];
    let mut i = 0;
    while i < s {
        let mut j = i;
        while j + 1 < s && flat[order[j + 1]] == flat[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            rank[k] = avg;
        }
        i = j + 1;
    }
    let denom = s as f64 + 0.25;
    let mut it = rank.into_iter();
    chains
        .iter()
        .map(|c| {
            c.iter()
                .map(|_| normal_quantile((it.next().unwrap() - 0.375) / denom))
                .collect()
        })
        .collect()
}

fn rhat_basic(chains: &[Vec<f64>]) -> f64 {
    let n = chains[0].len() as f64;
    let means: Vec<f64> = chains.iter().map(|c| crate::math::mean(c)).collect();
    let vars: Vec<f64> = chains.iter().map(|c| crate::math::variance(c)).collect();
    let b = n * crate::math::variance(&means);
    let w = crate::math::mean(&vars);
    // sampling noise can push the ratio just under 1; report 1 then
    ((b / w + n - 1.0) / n).sqrt().max(1.0)
}

fn median(chains: &[Vec<f64>]) -> f64 {
    let flat: Vec<f64> = chains.iter().flatten().copied().collect();
    quantile_sorted(&sorted_copy(&flat), 0.5)
}

/// Maximum of the bulk (rank-normalized) and tail (folded) split R-hat.
pub fn split_rhat(chains: &[Vec<f64>]) -> f64 {
    let split = split_chains(chains);
    if too_short(&split) || degenerate(&split) {
        return f64::NAN;
    }
    let bulk = rhat_basic(&rank_normalize(&split));
    let med = median(&split);
    let folded: Vec<Vec<f64>> = split
        .iter()
        .map(|c| c.iter().map(|v| (v - med).abs()).collect())
        .collect();
    let tail = if degenerate(&folded) {
        f64::NAN
    } else {
        rhat_basic(&rank_normalize(&folded))
    };
    if tail.is_nan() {
        bulk
    } else {
        bulk.max(tail)
    }
}

/// Effective sample size from the autocovariances of already-split chains,
/// truncated by Geyer's initial monotone sequence. Autocovariances are
/// computed lag by lag only as far as the sequence needs.
fn ess_basic(chains: &[Vec<f64>]) -> f64 {
    let m = chains.len();
    let n = chains[0].len();
    let nf = n as f64;
    let means: Vec<f64> = chains.iter().map(|c| crate::math::mean(c)).collect();
    let acov = |lag: usize| -> f64 {
        chains
            .iter()
            .zip(&means)
            .map(|(c, mu)| {
                (0..n - lag)
                    .map(|i| (c[i] - mu) * (c[i + lag] - mu))
                    .sum::<f64>()
                    / nf
            })
            .sum::<f64>()
            / m as f64
    };

    let mean_var = acov(0) * nf / (nf - 1.0);
    let mut var_plus = mean_var * (nf - 1.0) / nf;
    if m > 1 {
        var_plus += crate::math::variance(&means);
    }
    let rho = |lag: usize| 1.0 - (mean_var - acov(lag)) / var_plus;

    let mut rho_hat = vec![0.0; n];
    let mut rho_even = 1.0;
    rho_hat[0] = rho_even;
    let mut rho_odd = rho(1);
    rho_hat[1] = rho_odd;

    let mut t = 1;
    while t + 3 < n && rho_even + rho_odd > 0.0 {
        rho_even = rho(t + 1);
        rho_odd = rho(t + 2);
        if rho_even + rho_odd >= 0.0 {
            rho_hat[t + 1] = rho_even;
            rho_hat[t + 2] = rho_odd;
        }
        t += 2;
    }
    // max_t is -1 when the first pair already sums to zero or less
    let max_t = t as isize - 2;
    if rho_even > 0.0 {
        rho_hat[(max_t + 1) as usize] = rho_even;
    }

    let mut t = 1;
    while t <= max_t - 2 {
        let u = t as usize;
        if rho_hat[u + 1] + rho_hat[u + 2] > rho_hat[u - 1] + rho_hat[u] {
            rho_hat[u + 1] = (rho_hat[u - 1] + rho_hat[u]) / 2.0;
            rho_hat[u + 2] = rho_hat[u + 1];
        }
        t += 2;
    }

    let total = (m * n) as f64;
    let head: f64 = rho_hat[..(max_t + 1) as usize].iter().sum();
    let tau = -1.0 + 2.0 * head + rho_hat[(max_t + 1) as usize];
    let tau = tau.max(1.0 / total.log10());
    total / tau
}

/// Bulk effective sample size: on rank-normalized split chains.
pub fn ess_bulk(chains: &[Vec<f64>]) -> f64 {
    let split = split_chains(chains);
    if too_short(&split) || degenerate(&split) {
        return f64::NAN;
    }
    ess_basic(&rank_normalize(&split))
}

fn ess_quantile(split: &[Vec<f64>], q: f64) -> f64 {
    let flat: Vec<f64> = split.iter().flatten().copied().collect();
    let cut = quantile_sorted(&sorted_copy(&flat), q);
    let ind: Vec<Vec<f64>> = split
        .iter()
        .map(|c| c.iter().map(|&v| f64::from(u8::from(v <= cut))).collect())
        .collect();
    if degenerate(&ind) {
        return f64::NAN;
    }
    ess_basic(&ind)
}

/// Tail effective sample size: the smaller of the ESS of the 5% and 95%
/// quantile indicators.
pub fn ess_tail(chains: &[Vec<f64>]) -> f64 {
    let split = split_chains(chains);
    if too_short(&split) || degenerate(&split) {
        return f64::NAN;
    }
    ess_quantile(&split, 0.05).min(ess_quantile(&split, 0.95))
}
