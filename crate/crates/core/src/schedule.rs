//! Discrete noise schedule and the sampler sub-grid.
//!
//! Signal coefficients follow a cosine curve with offset `s = 0.008`,
//! normalized so that `alpha_0 = 1` and floored at `1e-2` at `t = n_train`;
//! `sigma_t = sqrt(1 - alpha_t^2)`.

use std::f64::consts::FRAC_PI_2;

use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::{Graph, Tensor, Var};

pub const COSINE_OFFSET: f64 = 0.008;
pub const ALPHA_FLOOR: f64 = 1e-2;

/// Signal coefficient `alpha_t` of the floored cosine curve.
pub fn cosine_alpha(t: usize, n_train: usize) -> f64 {
    if t == 0 {
        return 1.0;
    }
    let f = |t: usize| ((t as f64 / n_train as f64 + COSINE_OFFSET) / (1.0 + COSINE_OFFSET) * FRAC_PI_2).cos();
    // Affine floor rather than a hard clamp keeps the curve strictly
    // decreasing all the way to t = n_train.
    let a = (f(t) / f(0)).max(0.0);
    (ALPHA_FLOOR + (1.0 - ALPHA_FLOOR) * a).max(ALPHA_FLOOR)
}

pub fn sigma_of(alpha: f64) -> f64 {
    (1.0 - alpha * alpha).max(0.0).sqrt()
}

#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    n_train: usize,
    alphas: Vec<f64>,
    sigmas: Vec<f64>,
    grid: Vec<usize>,
}

impl NoiseSchedule {
    /// Cosine schedule over `n_train` training steps with an `steps`-step
    /// uniform sampler grid.
    pub fn new(n_train: usize, steps: usize) -> Result<Self> {
        if n_train == 0 || steps == 0 {
            return Err(Error::invalid("schedule needs n_train >= 1 and steps >= 1"));
        }
        if steps > n_train {
            return Err(Error::invalid(format!(
                "sampler steps ({steps}) exceed training steps ({n_train})"
            )));
        }
        let alphas: Vec<f64> = (0..=n_train).map(|t| cosine_alpha(t, n_train)).collect();
        let sigmas = alphas.iter().map(|&a| sigma_of(a)).collect();
        let grid = (0..=steps)
            .map(|k| ((k * n_train) as f64 / steps as f64).round() as usize)
            .collect();
        Ok(NoiseSchedule {
            n_train,
            alphas,
            sigmas,
            grid,
        })
    }

    pub fn n_train(&self) -> usize {
        self.n_train
    }

    /// Number of sampler steps `S`.
    pub fn steps(&self) -> usize {
        self.grid.len() - 1
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t]
    }

    pub fn sigma(&self, t: usize) -> f64 {
        self.sigmas[t]
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    pub fn grid(&self) -> &[usize] {
        &self.grid
    }

    /// Schedule indices `(t, t_prev)` used by sampler step `k` (`1..=S`).
    pub fn step_indices(&self, k: usize) -> Result<(usize, usize)> {
        if k == 0 || k > self.steps() {
            return Err(Error::invalid(format!("sampler step {k} outside 1..={}", self.steps())));
        }
        Ok((self.grid[k], self.grid[k - 1]))
    }

    pub fn is_on_grid(&self, t: usize) -> bool {
        self.grid.binary_search(&t).is_ok()
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t > self.n_train {
            return Err(Error::invalid(format!("timestep {t} outside 0..={}", self.n_train)));
        }
        Ok(())
    }

    /// `alpha_t * x0 + sigma_t * eps`.
    pub fn forward_noise<R: Real>(&self, x0: &Tensor<R>, t: usize, eps: &Tensor<R>) -> Result<Tensor<R>> {
        self.check_t(t)?;
        if x0.shape() != eps.shape() {
            return Err(Error::Shape {
                op: "forward_noise",
                detail: format!("x0 {:?} vs eps {:?}", x0.shape(), eps.shape()),
            });
        }
        let (a, s) = (R::lit(self.alpha(t)), R::lit(self.sigma(t)));
        Ok(x0.zip_map(eps, |x, e| a * x + s * e))
    }

    /// Differentiable [`NoiseSchedule::forward_noise`].
    pub fn forward_noise_var<R: Real>(&self, g: &mut Graph<'_, R>, x0: Var, t: usize, eps: Var) -> Result<Var> {
        self.check_t(t)?;
        if g.shape(x0) != g.shape(eps) {
            return Err(Error::Shape {
                op: "forward_noise",
                detail: format!("x0 {:?} vs eps {:?}", g.shape(x0), g.shape(eps)),
            });
        }
        let sx = g.scale(x0, R::lit(self.alpha(t)));
        let se = g.scale(eps, R::lit(self.sigma(t)));
        Ok(g.add(sx, se))
    }
}
