use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use super::adapt::WarmupSchedule;
use super::nuts::Chain;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DrawStats {
    pub divergent: bool,
    pub tree_depth: u32,
    pub accept_stat: f64,
    pub step_size: f64,
    pub n_leapfrog: u32,
    pub energy: f64,
}

/// Adaptation results of one chain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainInfo {
    pub chain: usize,
    pub step_size: f64,
    pub inv_metric: Vec<f64>,
    pub warmup_divergences: usize,
    pub schedule: WarmupSchedule,
}

/// Post-warmup draws stored chain-major: `values[(c * iters + i) * dim + k]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DrawsMatrix {
    pub names: Vec<String>,
    pub chains: usize,
    pub iters: usize,
    pub values: Vec<f64>,
    pub stats: Vec<DrawStats>,
    pub info: Vec<ChainInfo>,
}

const STAT_COLUMNS: [&str; 8] = [
    "chain",
    "iteration",
    "divergent",
    "tree_depth",
    "accept_stat",
    "step_size",
    "n_leapfrog",
    "energy",
];

impl DrawsMatrix {
    pub fn from_chains(names: Vec<String>, iters: usize, chains: Vec<Chain>) -> Self {
        let mut m = DrawsMatrix {
            names,
            chains: chains.len(),
            iters,
            values: Vec::new(),
            stats: Vec::new(),
            info: Vec::new(),
        };
        for c in chains {
            for d in c.draws {
                m.values.extend(d);
            }
            m.stats.extend(c.stats);
            m.info.push(c.info);
        }
        m
    }

    /// Builds a matrix from raw values, e.g. for tests or plug-in draws.
    pub fn from_values(names: Vec<String>, chains: usize, iters: usize, values: Vec<f64>) -> Self {
        assert_eq!(values.len(), chains * iters * names.len());
        let stats = vec![
            DrawStats {
                divergent: false,
                tree_depth: 0,
                accept_stat: 1.0,
                step_size: 0.0,
                n_leapfrog: 0,
                energy: 0.0,
            };
            chains * iters
        ];
        DrawsMatrix {
            names,
            chains,
            iters,
            values,
            stats,
            info: Vec::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.names.len()
    }

    pub fn n_draws(&self) -> usize {
        self.chains * self.iters
    }

    /// Draw `d` in chain-major order.
    pub fn draw(&self, d: usize) -> &[f64] {
        let k = self.dim();
        &self.values[d * k..(d + 1) * k]
    }

    pub fn get(&self, chain: usize, iter: usize, param: usize) -> f64 {
        self.values[(chain * self.iters + iter) * self.dim() + param]
    }

    /// One parameter, split by chain.
    pub fn param_chains(&self, param: usize) -> Vec<Vec<f64>> {
        (0..self.chains)
            .map(|c| (0..self.iters).map(|i| self.get(c, i, param)).collect())
            .collect()
    }

    /// One parameter, all chains pooled.
    pub fn param(&self, param: usize) -> Vec<f64> {
        (0..self.n_draws())
            .map(|d| self.values[d * self.dim() + param])
            .collect()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn divergences(&self) -> usize {
        self.stats.iter().filter(|s| s.divergent).count()
    }

    pub fn divergences_per_chain(&self) -> Vec<usize> {
        (0..self.chains)
            .map(|c| {
                self.stats[c * self.iters..(c + 1) * self.iters]
                    .iter()
                    .filter(|s| s.divergent)
                    .count()
            })
            .collect()
    }

    pub fn divergent_fraction(&self) -> f64 {
        if self.n_draws() == 0 {
            0.0
        } else {
            self.divergences() as f64 / self.n_draws() as f64
        }
    }

    /// Same draws with chain order permuted.
    pub fn permute_chains(&self, order: &[usize]) -> DrawsMatrix {
        let per = self.iters * self.dim();
        let mut out = self.clone();
        out.values.clear();
        out.stats.clear();
        for &c in order {
            out.values
                .extend_from_slice(&self.values[c * per..(c + 1) * per]);
            out.stats
                .extend_from_slice(&self.stats[c * self.iters..(c + 1) * self.iters]);
        }
        out.info = order.iter().filter_map(|&c| self.info.get(c).cloned()).collect();
        out
    }

    /// Columnar file: sampler statistics then one column per parameter.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header: Vec<&str> = STAT_COLUMNS.to_vec();
        header.extend(self.names.iter().map(String::as_str));
        w.write_record(&header)?;
        for c in 0..self.chains {
            for i in 0..self.iters {
                let d = c * self.iters + i;
                let s = &self.stats[d];
                let mut rec = vec![
                    c.to_string(),
                    i.to_string(),
                    u8::from(s.divergent).to_string(),
                    s.tree_depth.to_string(),
                    s.accept_stat.to_string(),
                    s.step_size.to_string(),
                    s.n_leapfrog.to_string(),
                    s.energy.to_string(),
                ];
                rec.extend(self.draw(d).iter().map(|v| v.to_string()));
                w.write_record(&rec)?;
            }
        }
        w.flush().map_err(|e| Error::io("<draws>", e))?;
        Ok(())
    }

    /// Reads a draws file; chain adaptation info is not part of it.
    pub fn read_csv<R: Read>(source: R) -> Result<DrawsMatrix> {
        let mut r = csv::Reader::from_reader(source);
        let header = r.headers()?.clone();
        if header.len() < STAT_COLUMNS.len()
            || header.iter().zip(STAT_COLUMNS).any(|(a, b)| a != b)
        {
            return Err(Error::Invalid("not a draws file".into()));
        }
        let names: Vec<String> = header
            .iter()
            .skip(STAT_COLUMNS.len())
            .map(str::to_owned)
            .collect();
        let num = |s: &str| -> Result<f64> {
            s.parse()
                .map_err(|_| Error::Invalid(format!("bad number `{s}` in draws")))
        };
        let (mut values, mut stats) = (Vec::new(), Vec::new());
        let mut per_chain: Vec<usize> = Vec::new();
        for row in r.records() {
            let row = row?;
            let c: usize = num(&row[0])? as usize;
            if c == per_chain.len() {
                per_chain.push(0);
            } else if c + 1 != per_chain.len() {
                return Err(Error::Invalid("draws are not grouped by chain".into()));
            }
            per_chain[c] += 1;
            stats.push(DrawStats {
                divergent: &row[2] == "1",
                tree_depth: num(&row[3])? as u32,
                accept_stat: num(&row[4])?,
                step_size: num(&row[5])?,
                n_leapfrog: num(&row[6])? as u32,
                energy: num(&row[7])?,
            });
            for v in row.iter().skip(STAT_COLUMNS.len()) {
                values.push(num(v)?);
            }
        }
        let iters = per_chain.first().copied().unwrap_or(0);
        if per_chain.iter().any(|&n| n != iters) {
            return Err(Error::Invalid("chains have different lengths".into()));
        }
        Ok(DrawsMatrix {
            names,
            chains: per_chain.len(),
            iters,
            values,
            stats,
            info: Vec::new(),
        })
    }
}
