use serde::{Deserialize, Serialize};

/// Nesterov dual averaging of the log step size.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DualAveraging {
    pub delta: f64,
    pub gamma: f64,
    pub t0: f64,
    pub kappa: f64,
    pub mu: f64,
    counter: f64,
    s_bar: f64,
    x_bar: f64,
}

impl DualAveraging {
    pub fn new(delta: f64) -> Self {
        DualAveraging {
            delta,
            gamma: 0.05,
            t0: 10.0,
            kappa: 0.75,
            mu: 10f64.ln(),
            counter: 0.0,
            s_bar: 0.0,
            x_bar: 0.0,
        }
    }

    /// Resets the averages and centers the search at `log(10 ε)`.
    pub fn restart(&mut self, epsilon: f64) {
        self.mu = (10.0 * epsilon).ln();
        self.counter = 0.0;
        self.s_bar = 0.0;
        self.x_bar = 0.0;
    }

    /// Updates with the latest acceptance statistic; returns the next ε.
    pub fn learn(&mut self, accept_stat: f64) -> f64 {
        self.counter += 1.0;
        let a = accept_stat.min(1.0);
        let eta = 1.0 / (self.counter + self.t0);
        self.s_bar = (1.0 - eta) * self.s_bar + eta * (self.delta - a);
        let x = self.mu - self.s_bar * self.counter.sqrt() / self.gamma;
        let x_eta = self.counter.powf(-self.kappa);
        self.x_bar = (1.0 - x_eta) * self.x_bar + x_eta * x;
        x.exp()
    }

    /// Final step size after warmup.
    pub fn final_epsilon(&self) -> f64 {
        self.x_bar.exp()
    }
}

/// Warmup phases: an initial fast interval, doubling slow windows that
/// estimate the metric, and a terminal fast interval.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WarmupSchedule {
    pub init_buffer: usize,
    pub term_buffer: usize,
    /// Half-open `[start, end)` iteration ranges of the slow windows.
    pub windows: Vec<(usize, usize)>,
}

/// 15% initial buffer, 10% terminal buffer, slow windows starting at 25
/// iterations and doubling; the last window absorbs the remainder.
pub fn warmup_windows(warmup: usize) -> WarmupSchedule {
    let init_buffer = (0.15 * warmup as f64) as usize;
    let term_buffer = (0.1 * warmup as f64) as usize;
    let end = warmup - term_buffer;
    let mut windows = Vec::new();
    if warmup >= 20 {
        let mut start = init_buffer;
        let mut size = 25.min(end - start);
        while start < end {
            if start + 3 * size >= end {
                size = end - start;
            }
            windows.push((start, start + size));
            start += size;
            size *= 2;
        }
    }
    WarmupSchedule {
        init_buffer,
        term_buffer,
        windows,
    }
}

/// Running mean and variance.
#[derive(Debug, Clone)]
pub(crate) struct Welford {
    n: f64,
    mean: Vec<f64>,
    m2: Vec<f64>,
}

impl Welford {
    pub fn new(dim: usize) -> Self {
        Welford {
            n: 0.0,
            mean: vec![0.0; dim],
            m2: vec![0.0; dim],
        }
    }

    pub fn add(&mut self, x: &[f64]) {
        self.n += 1.0;
        for ((m, s), v) in self.mean.iter_mut().zip(&mut self.m2).zip(x) {
            let d = v - *m;
            *m += d / self.n;
            *s += d * (v - *m);
        }
    }

    /// Sample variances shrunk toward 1e-3 with weight 5 / (n + 5).
    pub fn regularized_variance(&self) -> Vec<f64> {
        let n = self.n;
        self.m2
            .iter()
            .map(|s| {
                let var = s / (n - 1.0);
                (n / (n + 5.0)) * var + 1e-3 * (5.0 / (n + 5.0))
            })
            .collect()
    }
}
