//! Noise schedule, forward process, and the deterministic guided sampler.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::embed::TextEmbedding;
use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::tensor::Tensor;

/// Variance-preserving schedule with linearly increasing betas.
/// `alpha_bars` has `T + 1` entries with `alpha_bars[0] = 1`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct NoiseSchedule {
    t_max: usize,
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    pub fn linear(t_max: usize, beta_min: f64, beta_max: f64) -> Result<Self> {
        if t_max < 2 || !(0.0 < beta_min && beta_min < beta_max && beta_max < 1.0) {
            return Err(Error::Configuration {
                context: format!("bad schedule: T={t_max} beta=[{beta_min},{beta_max}]"),
            });
        }
        let betas: Vec<f64> = (0..t_max)
            .map(|i| beta_min + (beta_max - beta_min) * i as f64 / (t_max - 1) as f64)
            .collect();
        let mut alpha_bars = Vec::with_capacity(t_max + 1);
        alpha_bars.push(1.0);
        let mut prod = 1.0;
        for &b in &betas {
            prod *= 1.0 - b;
            alpha_bars.push(prod);
        }
        Ok(NoiseSchedule { t_max, betas, alpha_bars })
    }

    /// Default lab schedule: T = 1000, beta from 1e-4 to 0.02.
    pub fn default_schedule() -> Self {
        NoiseSchedule::linear(1000, 1e-4, 0.02).expect("default schedule is valid")
    }

    pub fn t_max(&self) -> usize {
        self.t_max
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t]
    }

    /// Map a forward-strength fraction to a timestep index.
    pub fn strength_to_t(&self, fraction: f64) -> Result<usize> {
        if !(0.0..=1.0).contains(&fraction) {
            return Err(Error::Domain { context: "forward fraction", value: fraction });
        }
        Ok((fraction * self.t_max as f64).round() as usize)
    }
}

/// Latent paired with its timestep.
#[derive(Clone, Debug)]
pub struct LatentState {
    pub z: Tensor,
    pub t: usize,
}

impl LatentState {
    pub fn clean(z: Tensor) -> Self {
        LatentState { z, t: 0 }
    }
}

/// Epsilon predictor shared by the oracle and neural backends.
/// `cond = None` requests the unconditional prediction.
pub trait Denoiser: Sync {
    fn predict(&self, z: &Tensor, t: usize, cond: Option<&TextEmbedding>) -> Result<Tensor>;
}

/// `z_t = sqrt(abar_t) z0 + sqrt(1 - abar_t) eps` with drawn noise.
pub fn forward(
    schedule: &NoiseSchedule,
    state: &LatentState,
    t: usize,
    rng: &mut RngStream,
) -> Result<LatentState> {
    if state.t != 0 {
        return Err(Error::Contract { context: "forward starts from a clean latent" });
    }
    if t > schedule.t_max() {
        return Err(Error::Domain { context: "forward timestep", value: t as f64 });
    }
    if t == 0 {
        return Ok(state.clone());
    }
    let eps = rng.normal_tensor(state.z.shape());
    forward_given(schedule, state, t, &eps)
}

/// Forward step with explicit noise (tests and marginal checks).
pub fn forward_given(
    schedule: &NoiseSchedule,
    state: &LatentState,
    t: usize,
    eps: &Tensor,
) -> Result<LatentState> {
    if t > schedule.t_max() {
        return Err(Error::Domain { context: "forward timestep", value: t as f64 });
    }
    if t == 0 {
        return Ok(state.clone());
    }
    let abar = schedule.alpha_bar(t);
    let z = state.z.scale(abar.sqrt())?.add(&eps.scale((1.0 - abar).sqrt())?)?;
    Ok(LatentState { z, t })
}

/// Classifier-free guidance: `eps = eps_uncond + w (eps_cond - eps_uncond)`.
/// `w = 1` and `w = 0` return the single prediction untouched.
pub fn guided_eps(
    den: &dyn Denoiser,
    z: &Tensor,
    t: usize,
    cond: &TextEmbedding,
    w: f64,
) -> Result<Tensor> {
    if w < 0.0 || !w.is_finite() {
        return Err(Error::Domain { context: "guidance scale", value: w });
    }
    if w == 1.0 {
        return den.predict(z, t, Some(cond));
    }
    if w == 0.0 {
        return den.predict(z, t, None);
    }
    let uncond = den.predict(z, t, None)?;
    let cond_eps = den.predict(z, t, Some(cond))?;
    uncond.add(&cond_eps.sub(&uncond)?.scale(w)?)
}

/// Clean-latent estimate from a noise prediction.
pub fn predict_clean(schedule: &NoiseSchedule, z: &Tensor, t: usize, eps: &Tensor) -> Result<Tensor> {
    let abar = schedule.alpha_bar(t);
    z.sub(&eps.scale((1.0 - abar).sqrt())?)?.scale(1.0 / abar.sqrt())
}

/// One row of the optional trajectory log.
#[derive(Clone, Debug, Serialize)]
pub struct TrajectoryRow {
    pub step: usize,
    pub t: usize,
    pub z_norm: f64,
    pub eps_norm: f64,
}

pub fn write_trajectory_csv(rows: &[TrajectoryRow], path: &Path) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    writeln!(f, "step,t,z_norm,eps_norm")?;
    for r in rows {
        writeln!(f, "{},{},{:.17e},{:.17e}", r.step, r.t, r.z_norm, r.eps_norm)?;
    }
    Ok(())
}

/// Deterministic reverse sampler. Walks `steps` evenly spaced sub-timesteps
/// from `state.t` down to zero; at each one it forms the clean estimate and
/// re-projects it onto the next timestep's marginal with the same predicted
/// noise (eta = 0, no fresh randomness).
pub fn reverse(
    den: &dyn Denoiser,
    schedule: &NoiseSchedule,
    state: &LatentState,
    cond: Option<&TextEmbedding>,
    steps: usize,
    w: f64,
    log: Option<&mut Vec<TrajectoryRow>>,
) -> Result<LatentState> {
    reverse_bounded(den, schedule, state, cond, steps, w, None, log)
}

/// [`reverse`] with an optional clamp applied to every intermediate clean
/// estimate. Pixel-space backends bound their latents to the valid range,
/// which keeps prediction error at small timesteps from compounding;
/// unbounded latent spaces pass `None`.
#[allow(clippy::too_many_arguments)]
pub fn reverse_bounded(
    den: &dyn Denoiser,
    schedule: &NoiseSchedule,
    state: &LatentState,
    cond: Option<&TextEmbedding>,
    steps: usize,
    w: f64,
    clean_bounds: Option<(f64, f64)>,
    mut log: Option<&mut Vec<TrajectoryRow>>,
) -> Result<LatentState> {
    if steps == 0 {
        return Err(Error::Contract { context: "reverse needs at least one step" });
    }
    if state.t == 0 {
        return Err(Error::Contract { context: "reverse starts from a noised latent" });
    }
    let t0 = state.t;
    let grid: Vec<usize> = (0..=steps)
        .map(|k| ((t0 as f64) * (steps - k) as f64 / steps as f64).round() as usize)
        .collect();
    let mut z = state.z.clone();
    for k in 0..steps {
        let t_cur = grid[k];
        let t_next = grid[k + 1];
        if t_cur == t_next {
            continue;
        }
        let eps = match cond {
            Some(c) => guided_eps(den, &z, t_cur, c, w)?,
            None => den.predict(&z, t_cur, None)?,
        };
        let mut clean = predict_clean(schedule, &z, t_cur, &eps)?;
        if let Some((lo, hi)) = clean_bounds {
            clean = Tensor::new(
                clean.shape().to_vec(),
                clean.data().iter().map(|v| v.clamp(lo, hi)).collect(),
            )?;
        }
        if let Some(rows) = log.as_deref_mut() {
            rows.push(TrajectoryRow { step: k, t: t_cur, z_norm: z.norm(), eps_norm: eps.norm() });
        }
        z = if t_next == 0 {
            clean
        } else {
            let abar_next = schedule.alpha_bar(t_next);
            clean.scale(abar_next.sqrt())?.add(&eps.scale((1.0 - abar_next).sqrt())?)?
        };
    }
    Ok(LatentState { z, t: 0 })
}
