//! Forward diffusion processes: the variance-exploding and
//! variance-preserving SDE families, their closed-form Gaussian perturbation
//! kernels, and the matching prior at the horizon.
//!
//! VE: `dy = α^t dw`, kernel `N(y0, (α^{2t}-1)/(2 ln α) I)`.
//! VP: `dy = -β(t) y/2 dt + sqrt(β(t)) dw` with `β(t)` linear in `t`,
//! kernel `N(y0 e^{h(t)/2}, (1 - e^{h(t)}) I)` where
//! `h(t) = -t² (β_max - β_min)/2 - t β_min`.

use ndarray::Array1;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum SdeSpec {
    /// Variance-exploding, diffusion `g(t) = alpha^t`.
    Ve { alpha: f64 },
    /// Variance-preserving, `β(t) = beta_min + (beta_max - beta_min) t`.
    Vp { beta_min: f64, beta_max: f64 },
}

/// Horizon; both families run on `t ∈ [0, 1]`.
pub const HORIZON: f64 = 1.0;

/// Floor for sampled training/integration times, keeping `σ_t` away from the
/// singularity at zero.
pub const T_MIN: f64 = 1e-5;

impl SdeSpec {
    pub fn ve(alpha: f64) -> Result<Self> {
        if !(alpha > 1.0) {
            return Err(Error::invalid("sde.alpha", "VE requires alpha > 1"));
        }
        Ok(SdeSpec::Ve { alpha })
    }

    pub fn vp(beta_min: f64, beta_max: f64) -> Result<Self> {
        if !(beta_min > 0.0 && beta_max > beta_min) {
            return Err(Error::invalid("sde.beta", "VP requires 0 < beta_min < beta_max"));
        }
        Ok(SdeSpec::Vp { beta_min, beta_max })
    }

    /// Paper defaults: VE with alpha 25, VP with betas (0.1, 20).
    pub fn default_ve() -> Self {
        SdeSpec::Ve { alpha: 25.0 }
    }

    pub fn default_vp() -> Self {
        SdeSpec::Vp { beta_min: 0.1, beta_max: 20.0 }
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            SdeSpec::Ve { .. } => "ve",
            SdeSpec::Vp { .. } => "vp",
        }
    }

    fn beta(&self, t: f64) -> f64 {
        match self {
            SdeSpec::Ve { .. } => 0.0,
            SdeSpec::Vp { beta_min, beta_max } => beta_min + (beta_max - beta_min) * t,
        }
    }

    /// `h(t)` of the VP kernel; zero for VE.
    fn h(&self, t: f64) -> f64 {
        match self {
            SdeSpec::Ve { .. } => 0.0,
            SdeSpec::Vp { beta_min, beta_max } => {
                -0.5 * t * t * (beta_max - beta_min) - t * beta_min
            }
        }
    }

    /// Drift `f(y, t)`.
    pub fn drift(&self, y: &Array1<f64>, t: f64) -> Array1<f64> {
        match self {
            SdeSpec::Ve { .. } => Array1::zeros(y.len()),
            SdeSpec::Vp { .. } => y * (-0.5 * self.beta(t)),
        }
    }

    /// Diffusion coefficient `g(t)`.
    pub fn diffusion(&self, t: f64) -> f64 {
        match self {
            SdeSpec::Ve { alpha } => alpha.powf(t),
            SdeSpec::Vp { .. } => self.beta(t).sqrt(),
        }
    }

    /// Variance of the perturbation kernel at time `t`, evaluated in a form
    /// stable near `t = 0`.
    pub fn kernel_variance(&self, t: f64) -> f64 {
        match self {
            SdeSpec::Ve { alpha } => {
                let la = alpha.ln();
                (2.0 * t * la).exp_m1() / (2.0 * la)
            }
            SdeSpec::Vp { .. } => -self.h(t).exp_m1(),
        }
    }

    /// Standard deviation of the perturbation kernel; zero at `t = 0` and
    /// strictly increasing afterwards.
    pub fn sigma(&self, t: f64) -> f64 {
        self.kernel_variance(t).sqrt()
    }

    /// Factor multiplying the clean point in the kernel mean: 1 for VE,
    /// `e^{h(t)/2}` for VP.
    pub fn mean_scale(&self, t: f64) -> f64 {
        match self {
            SdeSpec::Ve { .. } => 1.0,
            SdeSpec::Vp { .. } => (0.5 * self.h(t)).exp(),
        }
    }

    /// Mean and (isotropic) standard deviation of `p_{t|0}(· | y0)`. At
    /// `t = 0` this degenerates to `(y0, 0)`.
    pub fn perturbation_kernel(&self, y0: &Array1<f64>, t: f64) -> (Array1<f64>, f64) {
        (y0 * self.mean_scale(t), self.sigma(t))
    }

    /// Draw from the prior at the horizon: `N(0, I)` for VP and
    /// `N(0, σ_T² I)` for VE.
    pub fn prior_sample<R: Rng>(&self, dim: usize, rng: &mut R) -> Array1<f64> {
        let std = self.prior_std();
        Array1::from_iter((0..dim).map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            z * std
        }))
    }

    pub fn prior_std(&self) -> f64 {
        match self {
            SdeSpec::Ve { .. } => self.sigma(HORIZON),
            SdeSpec::Vp { .. } => 1.0,
        }
    }
}
