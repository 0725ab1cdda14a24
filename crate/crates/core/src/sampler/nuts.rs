use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::adapt::{warmup_windows, DualAveraging, Welford};
use super::draws::{ChainInfo, DrawStats};
use super::{LogDensity, Progress, SamplerConfig, Stage};
use crate::error::{Error, Result};
use crate::math::log_sum_exp2;

/// Energy error beyond which a trajectory is marked divergent.
const MAX_DELTA_H: f64 = 1000.0;

/// Position, momentum and cached density of one point in phase space.
#[derive(Debug, Clone, PartialEq)]
pub struct PhaseState {
    pub q: Vec<f64>,
    pub p: Vec<f64>,
    pub grad: Vec<f64>,
    pub logp: f64,
}

impl PhaseState {
    pub fn new<D: LogDensity + ?Sized>(target: &D, q: Vec<f64>) -> Self {
        let mut grad = vec![0.0; q.len()];
        let logp = target.log_density_grad(&q, &mut grad);
        PhaseState {
            p: vec![0.0; q.len()],
            q,
            grad,
            logp,
        }
    }

    pub fn kinetic(&self, inv_metric: &[f64]) -> f64 {
        0.5 * self
            .p
            .iter()
            .zip(inv_metric)
            .map(|(p, m)| p * p * m)
            .sum::<f64>()
    }

    pub fn hamiltonian(&self, inv_metric: &[f64]) -> f64 {
        -self.logp + self.kinetic(inv_metric)
    }

    fn velocity(&self, inv_metric: &[f64]) -> Vec<f64> {
        self.p.iter().zip(inv_metric).map(|(p, m)| p * m).collect()
    }
}

/// One leapfrog step of size `eps`.
pub fn leapfrog<D: LogDensity + ?Sized>(
    target: &D,
    z: &mut PhaseState,
    inv_metric: &[f64],
    eps: f64,
) {
    let half = 0.5 * eps;
    for (p, g) in z.p.iter_mut().zip(&z.grad) {
        *p += half * g;
    }
    for ((q, p), m) in z.q.iter_mut().zip(&z.p).zip(inv_metric) {
        *q += eps * m * p;
    }
    z.logp = target.log_density_grad(&z.q, &mut z.grad);
    for (p, g) in z.p.iter_mut().zip(&z.grad) {
        *p += half * g;
    }
}

fn add(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn no_u_turn(p_sharp_minus: &[f64], p_sharp_plus: &[f64], rho: &[f64]) -> bool {
    dot(p_sharp_plus, rho) > 0.0 && dot(p_sharp_minus, rho) > 0.0
}

/// Multinomial NUTS with the generalized no-U-turn criterion, including the
/// extra checks across merged subtrees.
#[derive(Debug, Clone)]
pub struct Nuts<'a, D: LogDensity + ?Sized> {
    pub target: &'a D,
    pub inv_metric: Vec<f64>,
    pub epsilon: f64,
    pub max_depth: usize,
    z: PhaseState,
    // per-transition bookkeeping
    n_leapfrog: usize,
    sum_metro_prob: f64,
    divergent: bool,
    h0: f64,
}

struct Edge {
    p_sharp_beg: Vec<f64>,
    p_sharp_end: Vec<f64>,
    p_beg: Vec<f64>,
    p_end: Vec<f64>,
}

impl<'a, D: LogDensity + ?Sized> Nuts<'a, D> {
    pub fn new(target: &'a D, z: PhaseState, max_depth: usize) -> Self {
        let dim = z.q.len();
        Nuts {
            target,
            inv_metric: vec![1.0; dim],
            epsilon: 1.0,
            max_depth,
            z,
            n_leapfrog: 0,
            sum_metro_prob: 0.0,
            divergent: false,
            h0: 0.0,
        }
    }

    pub fn position(&self) -> &[f64] {
        &self.z.q
    }

    pub fn state(&self) -> &PhaseState {
        &self.z
    }

    fn sample_momentum(&mut self, rng: &mut ChaCha8Rng) {
        for (p, m) in self.z.p.iter_mut().zip(&self.inv_metric) {
            let n: f64 = rng.sample(StandardNormal);
            *p = n / m.sqrt();
        }
    }

    fn energy(&self) -> f64 {
        let h = self.z.hamiltonian(&self.inv_metric);
        if h.is_nan() {
            f64::INFINITY
        } else {
            h
        }
    }

    /// Doubles or halves ε from 1 until a single leapfrog step's
    /// acceptance crosses 0.8.
    pub fn init_stepsize(&mut self, rng: &mut ChaCha8Rng) -> Result<()> {
        let init = self.z.clone();
        let threshold = 0.8f64.ln();
        let mut trial = |s: &mut Self| {
            s.z = init.clone();
            s.sample_momentum(rng);
            let h0 = s.energy();
            leapfrog(s.target, &mut s.z, &s.inv_metric, s.epsilon);
            h0 - s.energy()
        };
        let delta_h = trial(self);
        let up = delta_h > threshold;
        loop {
            let delta_h = trial(self);
            if (up && !(delta_h > threshold)) || (!up && !(delta_h < threshold)) {
                break;
            }
            self.epsilon = if up {
                2.0 * self.epsilon
            } else {
                0.5 * self.epsilon
            };
            if self.epsilon > 1e7 {
                return Err(Error::Sampling(
                    "step size search diverged; the posterior may be improper".into(),
                ));
            }
            if self.epsilon == 0.0 {
                return Err(Error::Sampling(
                    "step size collapsed to zero; check the density and its gradient".into(),
                ));
            }
        }
        self.z = init;
        Ok(())
    }

    /// One NUTS transition from the current position.
    pub fn transition(&mut self, rng: &mut ChaCha8Rng) -> DrawStats {
        self.sample_momentum(rng);
        let v0 = self.z.velocity(&self.inv_metric);
        let mut z_fwd = self.z.clone();
        let mut z_bck = self.z.clone();
        let mut z_sample = self.z.clone();
        let mut z_propose = self.z.clone();

        let mut p_fwd_fwd = self.z.p.clone();
        let mut p_sharp_fwd_fwd = v0.clone();
        let mut p_fwd_bck = self.z.p.clone();
        let mut p_sharp_fwd_bck = v0.clone();
        let mut p_bck_fwd = self.z.p.clone();
        let mut p_sharp_bck_fwd = v0.clone();
        let mut p_bck_bck = self.z.p.clone();
        let mut p_sharp_bck_bck = v0;

        let mut rho = self.z.p.clone();
        let mut log_sum_weight = 0.0;
        self.h0 = self.energy();
        self.n_leapfrog = 0;
        self.sum_metro_prob = 0.0;
        self.divergent = false;
        let dim = rho.len();
        let mut depth = 0;

        while depth < self.max_depth {
            let mut rho_fwd = vec![0.0; dim];
            let mut rho_bck = vec![0.0; dim];
            let mut lsw_subtree = f64::NEG_INFINITY;
            let valid;

            if rng.random::<f64>() > 0.5 {
                self.z = z_fwd.clone();
                rho_bck.clone_from(&rho);
                p_bck_fwd.clone_from(&p_fwd_bck);
                p_sharp_bck_fwd.clone_from(&p_sharp_fwd_bck);
                let mut edge = Edge {
                    p_sharp_beg: p_sharp_fwd_bck.clone(),
                    p_sharp_end: p_sharp_fwd_fwd.clone(),
                    p_beg: p_fwd_bck.clone(),
                    p_end: p_fwd_fwd.clone(),
                };
                valid = self.build_tree(
                    depth,
                    &mut z_propose,
                    &mut edge,
                    &mut rho_fwd,
                    1.0,
                    &mut lsw_subtree,
                    rng,
                );
                p_sharp_fwd_bck = edge.p_sharp_beg;
                p_sharp_fwd_fwd = edge.p_sharp_end;
                p_fwd_bck = edge.p_beg;
                p_fwd_fwd = edge.p_end;
                z_fwd = self.z.clone();
            } else {
                self.z = z_bck.clone();
                rho_fwd.clone_from(&rho);
                p_fwd_bck.clone_from(&p_bck_fwd);
                p_sharp_fwd_bck.clone_from(&p_sharp_bck_fwd);
                let mut edge = Edge {
                    p_sharp_beg: p_sharp_bck_fwd.clone(),
                    p_sharp_end: p_sharp_bck_bck.clone(),
                    p_beg: p_bck_fwd.clone(),
                    p_end: p_bck_bck.clone(),
                };
                valid = self.build_tree(
                    depth,
                    &mut z_propose,
                    &mut edge,
                    &mut rho_bck,
                    -1.0,
                    &mut lsw_subtree,
                    rng,
                );
                p_sharp_bck_fwd = edge.p_sharp_beg;
                p_sharp_bck_bck = edge.p_sharp_end;
                p_bck_fwd = edge.p_beg;
                p_bck_bck = edge.p_end;
                z_bck = self.z.clone();
            }

            if !valid {
                break;
            }
            depth += 1;

            if lsw_subtree > log_sum_weight {
                z_sample = z_propose.clone();
            } else {
                let accept = (lsw_subtree - log_sum_weight).exp();
                if rng.random::<f64>() < accept {
                    z_sample = z_propose.clone();
                }
            }
            log_sum_weight = log_sum_exp2(log_sum_weight, lsw_subtree);

            rho = add(&rho_bck, &rho_fwd);
            let mut persist = no_u_turn(&p_sharp_bck_bck, &p_sharp_fwd_fwd, &rho);
            let rho_ext = add(&rho_bck, &p_fwd_bck);
            persist &= no_u_turn(&p_sharp_bck_bck, &p_sharp_fwd_bck, &rho_ext);
            let rho_ext = add(&rho_fwd, &p_bck_fwd);
            persist &= no_u_turn(&p_sharp_bck_fwd, &p_sharp_fwd_fwd, &rho_ext);
            if !persist {
                break;
            }
        }

        self.z = z_sample;
        let accept_stat = if self.n_leapfrog > 0 {
            self.sum_metro_prob / self.n_leapfrog as f64
        } else {
            0.0
        };
        DrawStats {
            divergent: self.divergent,
            tree_depth: depth as u32,
            accept_stat,
            step_size: self.epsilon,
            n_leapfrog: self.n_leapfrog as u32,
            energy: self.z.hamiltonian(&self.inv_metric),
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn build_tree(
        &mut self,
        depth: usize,
        z_propose: &mut PhaseState,
        edge: &mut Edge,
        rho: &mut [f64],
        sign: f64,
        log_sum_weight: &mut f64,
        rng: &mut ChaCha8Rng,
    ) -> bool {
        if depth == 0 {
            leapfrog(self.target, &mut self.z, &self.inv_metric, sign * self.epsilon);
            self.n_leapfrog += 1;
            let h = self.energy();
            if h - self.h0 > MAX_DELTA_H {
                self.divergent = true;
            }
            *log_sum_weight = log_sum_exp2(*log_sum_weight, self.h0 - h);
            self.sum_metro_prob += if self.h0 - h > 0.0 {
                1.0
            } else {
                (self.h0 - h).exp()
            };
            z_propose.clone_from(&self.z);
            edge.p_sharp_beg = self.z.velocity(&self.inv_metric);
            edge.p_sharp_end.clone_from(&edge.p_sharp_beg);
            for (r, p) in rho.iter_mut().zip(&self.z.p) {
                *r += p;
            }
            edge.p_beg.clone_from(&self.z.p);
            edge.p_end.clone_from(&self.z.p);
            return !self.divergent;
        }

        let dim = rho.len();
        // first half
        let mut init = Edge {
            p_sharp_beg: std::mem::take(&mut edge.p_sharp_beg),
            p_sharp_end: vec![0.0; dim],
            p_beg: std::mem::take(&mut edge.p_beg),
            p_end: vec![0.0; dim],
        };
        let mut rho_init = vec![0.0; dim];
        let mut lsw_init = f64::NEG_INFINITY;
        let valid_init = self.build_tree(
            depth - 1,
            z_propose,
            &mut init,
            &mut rho_init,
            sign,
            &mut lsw_init,
            rng,
        );
        edge.p_sharp_beg = init.p_sharp_beg;
        edge.p_beg = init.p_beg;
        if !valid_init {
            return false;
        }

        // second half
        let mut z_propose_final = self.z.clone();
        let mut fin = Edge {
            p_sharp_beg: vec![0.0; dim],
            p_sharp_end: std::mem::take(&mut edge.p_sharp_end),
            p_beg: vec![0.0; dim],
            p_end: std::mem::take(&mut edge.p_end),
        };
        let mut rho_final = vec![0.0; dim];
        let mut lsw_final = f64::NEG_INFINITY;
        let valid_final = self.build_tree(
            depth - 1,
            &mut z_propose_final,
            &mut fin,
            &mut rho_final,
            sign,
            &mut lsw_final,
            rng,
        );
        edge.p_sharp_end = fin.p_sharp_end;
        edge.p_end = fin.p_end;
        if !valid_final {
            return false;
        }

        let lsw_subtree = log_sum_exp2(lsw_init, lsw_final);
        *log_sum_weight = log_sum_exp2(*log_sum_weight, lsw_subtree);
        if lsw_final > lsw_subtree {
            *z_propose = z_propose_final;
        } else {
            let accept = (lsw_final - lsw_subtree).exp();
            if rng.random::<f64>() < accept {
                *z_propose = z_propose_final;
            }
        }

        let rho_subtree = add(&rho_init, &rho_final);
        for (r, s) in rho.iter_mut().zip(&rho_subtree) {
            *r += s;
        }
        let mut persist = no_u_turn(&edge.p_sharp_beg, &edge.p_sharp_end, &rho_subtree);
        let rho_ext = add(&rho_init, &fin.p_beg);
        persist &= no_u_turn(&edge.p_sharp_beg, &fin.p_sharp_beg, &rho_ext);
        let rho_ext = add(&rho_final, &init.p_end);
        persist &= no_u_turn(&init.p_sharp_end, &edge.p_sharp_end, &rho_ext);
        persist
    }
}

/// Output of one chain: transformed post-warmup draws and their statistics.
#[derive(Debug, Clone)]
pub struct Chain {
    pub draws: Vec<Vec<f64>>,
    pub stats: Vec<DrawStats>,
    pub info: ChainInfo,
}

fn chain_rng(seed: u64, chain: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(chain as u64);
    rng
}

fn initial_point<D: LogDensity + ?Sized>(
    target: &D,
    radius: f64,
    rng: &mut ChaCha8Rng,
) -> Result<PhaseState> {
    for _ in 0..100 {
        let q: Vec<f64> = (0..target.dim())
            .map(|_| rng.random_range(-radius..=radius))
            .collect();
        let z = PhaseState::new(target, q);
        if z.logp.is_finite() && z.grad.iter().all(|g| g.is_finite()) {
            return Ok(z);
        }
    }
    Err(Error::Sampling(
        "no finite initial density after 100 random initializations".into(),
    ))
}

/// Warmup plus sampling for chain `chain`; its random stream is determined
/// by `(cfg.seed, chain)` alone.
pub fn run_chain<D, F>(
    target: &D,
    cfg: &SamplerConfig,
    chain: usize,
    transform: &F,
    progress: &dyn Progress,
) -> Result<Chain>
where
    D: LogDensity + ?Sized,
    F: Fn(&[f64]) -> Vec<f64> + ?Sized,
{
    let mut rng = chain_rng(cfg.seed, chain);
    let z = initial_point(target, cfg.init_radius, &mut rng)?;
    let dim = z.q.len();
    let mut nuts = Nuts::new(target, z, cfg.max_tree_depth);
    let schedule = warmup_windows(cfg.warmup_iters);
    let mut warmup_divergences = 0;

    nuts.init_stepsize(&mut rng)?;
    let mut da = DualAveraging::new(cfg.target_accept);
    da.restart(nuts.epsilon);
    let mut windows = schedule.windows.iter().peekable();
    let mut estimator = Welford::new(dim);

    for it in 0..cfg.warmup_iters {
        progress.update(Stage::Warmup, chain, it);
        let s = nuts.transition(&mut rng);
        warmup_divergences += usize::from(s.divergent);
        nuts.epsilon = da.learn(s.accept_stat);

        if let Some(&&(start, end)) = windows.peek() {
            if it >= start && it < end {
                estimator.add(nuts.position());
            }
            if it + 1 == end {
                nuts.inv_metric = estimator.regularized_variance();
                estimator = Welford::new(dim);
                nuts.init_stepsize(&mut rng)?;
                da.restart(nuts.epsilon);
                windows.next();
            }
        }
    }
    if cfg.warmup_iters > 0 {
        nuts.epsilon = da.final_epsilon();
    }

    let mut draws = Vec::with_capacity(cfg.sampling_iters);
    let mut stats = Vec::with_capacity(cfg.sampling_iters);
    for it in 0..cfg.sampling_iters {
        progress.update(Stage::Sampling, chain, it);
        let s = nuts.transition(&mut rng);
        draws.push(transform(nuts.position()));
        stats.push(s);
    }

    Ok(Chain {
        draws,
        stats,
        info: ChainInfo {
            chain,
            step_size: nuts.epsilon,
            inv_metric: nuts.inv_metric.clone(),
            warmup_divergences,
            schedule,
        },
    })
}
