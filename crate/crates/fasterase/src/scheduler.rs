//! Noise schedule and deterministic few-step sampling.
//!
//! The forward process follows the standard variance-preserving discrete
//! construction: a linear beta ramp over `T` steps, `alpha_t = 1 - beta_t`,
//! and the running product `alpha_bar_t = prod_{s<=t} alpha_s`. Noising is
//!
//! ```text
//! z_t = sqrt(alpha_bar_t) * z_0 + sqrt(1 - alpha_bar_t) * eps
//! ```
//!
//! and the deterministic (eta = 0) sampler update from timestep `tau` to an
//! earlier `tau_prev` reconstructs the clean estimate and re-noises it:
//!
//! ```text
//! x0_hat  = (z_tau - sqrt(1 - alpha_bar_tau) * eps_hat) / sqrt(alpha_bar_tau)
//! z_prev  = sqrt(alpha_bar_prev) * x0_hat + sqrt(1 - alpha_bar_prev) * eps_hat
//! ```
//!
//! The final step of a plan passes `tau_prev = None`, which stands for the
//! sentinel `alpha_bar = 1`, so the update returns `x0_hat` itself.
//!
//! All schedule scalars live in `f64`; tensor arithmetic is generic over the
//! element type so the same code runs in `f32` for training and `f64` for
//! verification.

use ndarray::ArrayD;

use crate::error::{Error, Result};
use crate::tensor::Scalar;

/// Linear-ramp variance schedule with precomputed running products.
#[derive(Debug, Clone)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    /// Default training horizon.
    pub const DEFAULT_T: usize = 1000;
    /// Default beta ramp endpoints.
    pub const DEFAULT_BETA_START: f64 = 1e-4;
    pub const DEFAULT_BETA_END: f64 = 0.02;

    /// Builds the linear schedule: `beta_i` interpolates `[start, end]`
    /// inclusively over `t_total` steps.
    pub fn linear(t_total: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if t_total == 0 {
            return Err(Error::config("schedule length T must be at least 1"));
        }
        if !(beta_start > 0.0 && beta_start < 1.0 && beta_end > 0.0 && beta_end < 1.0) {
            return Err(Error::config(format!(
                "beta bounds must lie in (0, 1), got [{beta_start}, {beta_end}]"
            )));
        }
        if beta_start > beta_end {
            return Err(Error::config(format!(
                "beta_start {beta_start} exceeds beta_end {beta_end}"
            )));
        }
        let betas: Vec<f64> = if t_total == 1 {
            vec![beta_start]
        } else {
            (0..t_total)
                .map(|i| beta_start + (beta_end - beta_start) * i as f64 / (t_total - 1) as f64)
                .collect()
        };
        Self::from_betas(betas)
    }

    /// Builds a schedule from explicit betas (each in `(0, 1)`).
    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() {
            return Err(Error::config("schedule length T must be at least 1"));
        }
        if let Some(bad) = betas.iter().find(|b| !(**b > 0.0 && **b < 1.0)) {
            return Err(Error::config(format!("beta {bad} outside (0, 1)")));
        }
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = Vec::with_capacity(betas.len());
        let mut running = 1.0f64;
        for &a in &alphas {
            running *= a;
            alpha_bars.push(running);
        }
        Ok(NoiseSchedule {
            betas,
            alphas,
            alpha_bars,
        })
    }

    pub fn default_linear() -> Self {
        Self::linear(Self::DEFAULT_T, Self::DEFAULT_BETA_START, Self::DEFAULT_BETA_END)
            .expect("default schedule parameters are valid")
    }

    pub fn len(&self) -> usize {
        self.betas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.betas.is_empty()
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t]
    }

    /// `alpha_bar_t`, checking the timestep range.
    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        self.alpha_bars
            .get(t)
            .copied()
            .ok_or_else(|| Error::config(format!("timestep {t} outside schedule of length {}", self.len())))
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }
}

/// Descending list of timesteps visited by a few-step run.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TimestepPlan {
    taus: Vec<usize>,
}

impl TimestepPlan {
    /// Trailing-aligned spacing: `tau_i = ceil(T * i / n) - 1` for
    /// `i = n, n-1, ..., 1`. The plan always starts at `T - 1`.
    pub fn trailing(t_total: usize, n_steps: usize) -> Result<Self> {
        if n_steps == 0 {
            return Err(Error::config("plan length must be at least 1"));
        }
        if n_steps > t_total {
            return Err(Error::config(format!(
                "plan length {n_steps} exceeds schedule length {t_total}"
            )));
        }
        let taus: Vec<usize> = (1..=n_steps)
            .rev()
            .map(|i| {
                // ceil(T * i / n) - 1 in integer arithmetic
                (t_total * i).div_ceil(n_steps) - 1
            })
            .collect();
        debug_assert!(taus.windows(2).all(|w| w[0] > w[1]));
        Ok(TimestepPlan { taus })
    }

    pub fn taus(&self) -> &[usize] {
        &self.taus
    }

    pub fn len(&self) -> usize {
        self.taus.len()
    }

    pub fn is_empty(&self) -> bool {
        self.taus.is_empty()
    }

    /// The timestep the sampler moves to after position `i`, or `None` at
    /// the final position (the sentinel `alpha_bar = 1`).
    pub fn next_tau(&self, i: usize) -> Option<usize> {
        self.taus.get(i + 1).copied()
    }
}

/// Closed-form noising at a known `alpha_bar`.
pub fn diffuse_with<F: Scalar>(alpha_bar: f64, z0: &ArrayD<F>, eps: &ArrayD<F>) -> Result<ArrayD<F>> {
    if z0.shape() != eps.shape() {
        return Err(Error::numeric(format!(
            "diffuse shape mismatch: z0 {:?} vs eps {:?}",
            z0.shape(),
            eps.shape()
        )));
    }
    let a = F::from_f64(alpha_bar.sqrt());
    let b = F::from_f64((1.0 - alpha_bar).sqrt());
    Ok(z0.mapv(|v| v * a) + &eps.mapv(|v| v * b))
}

/// Forward noising `z_t = sqrt(ab_t) z_0 + sqrt(1 - ab_t) eps`.
pub fn forward_diffuse<F: Scalar>(
    schedule: &NoiseSchedule,
    z0: &ArrayD<F>,
    t: usize,
    eps: &ArrayD<F>,
) -> Result<ArrayD<F>> {
    diffuse_with(schedule.alpha_bar(t)?, z0, eps)
}

/// The clean-sample estimate implied by a noise prediction at timestep `t`.
pub fn predict_x0<F: Scalar>(
    schedule: &NoiseSchedule,
    z_t: &ArrayD<F>,
    eps_hat: &ArrayD<F>,
    t: usize,
) -> Result<ArrayD<F>> {
    if z_t.shape() != eps_hat.shape() {
        return Err(Error::numeric(format!(
            "predict_x0 shape mismatch: z_t {:?} vs eps_hat {:?}",
            z_t.shape(),
            eps_hat.shape()
        )));
    }
    let ab = schedule.alpha_bar(t)?;
    if ab <= 0.0 {
        return Err(Error::numeric(format!("alpha_bar({t}) = {ab} is not positive")));
    }
    let inv_sqrt_ab = F::from_f64(1.0 / ab.sqrt());
    let sqrt_1m = F::from_f64((1.0 - ab).sqrt());
    Ok((z_t - &eps_hat.mapv(|v| v * sqrt_1m)).mapv(|v| v * inv_sqrt_ab))
}

/// One deterministic sampler update from `tau` to `tau_prev`.
///
/// `tau_prev = None` is the final-step sentinel (`alpha_bar = 1`): the
/// update then returns the clean estimate itself.
pub fn ddim_step<F: Scalar>(
    schedule: &NoiseSchedule,
    z_t: &ArrayD<F>,
    eps_hat: &ArrayD<F>,
    tau: usize,
    tau_prev: Option<usize>,
) -> Result<ArrayD<F>> {
    if let Some(p) = tau_prev {
        if p >= tau {
            return Err(Error::config(format!(
                "sampler must move to an earlier timestep: tau_prev {p} >= tau {tau}"
            )));
        }
    }
    let x0 = predict_x0(schedule, z_t, eps_hat, tau)?;
    let ab_prev = match tau_prev {
        Some(p) => schedule.alpha_bar(p)?,
        None => 1.0,
    };
    diffuse_with(ab_prev, &x0, eps_hat)
}
