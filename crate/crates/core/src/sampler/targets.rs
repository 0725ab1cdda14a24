//! Plain Gaussian targets for checking and demonstrating the sampler.

use super::LogDensity;

/// Independent standard normals.
#[derive(Debug, Clone, Copy)]
pub struct IsoNormal {
    pub dim: usize,
}

impl LogDensity for IsoNormal {
    fn dim(&self) -> usize {
        self.dim
    }

    fn log_density_grad(&self, x: &[f64], grad: &mut [f64]) -> f64 {
        let mut lp = 0.0;
        for (g, v) in grad.iter_mut().zip(x) {
            *g = -v;
            lp -= 0.5 * v * v;
        }
        lp
    }
}

/// Bivariate normal with unit variances and correlation `rho`, centered at
/// `mean`.
#[derive(Debug, Clone, Copy)]
pub struct Bivariate {
    pub mean: [f64; 2],
    pub sd: [f64; 2],
    pub rho: f64,
}

impl Bivariate {
    pub fn correlated(rho: f64) -> Self {
        Bivariate {
            mean: [0.0, 0.0],
            sd: [1.0, 1.0],
            rho,
        }
    }
}

impl LogDensity for Bivariate {
    fn dim(&self) -> usize {
        2
    }

    fn log_density_grad(&self, x: &[f64], grad: &mut [f64]) -> f64 {
        let u = (x[0] - self.mean[0]) / self.sd[0];
        let v = (x[1] - self.mean[1]) / self.sd[1];
        let k = 1.0 / (1.0 - self.rho * self.rho);
        grad[0] = -k * (u - self.rho * v) / self.sd[0];
        grad[1] = -k * (v - self.rho * u) / self.sd[1];
        -0.5 * k * (u * u - 2.0 * self.rho * u * v + v * v)
    }
}
