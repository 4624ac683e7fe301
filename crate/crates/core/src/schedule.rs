//! Linear-beta noise schedule, forward noising and deterministic DDIM
//! stepping in both directions.
//!
//! Timesteps are indices into the training schedule. The clean end of a
//! trajectory is written `None` and has `alpha_bar = 1`.

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

pub const DEFAULT_TRAIN_STEPS: usize = 300;
pub const DEFAULT_BETA_START: f64 = 1e-4;
pub const DEFAULT_BETA_END: f64 = 0.02;
pub const DEFAULT_DDIM_STEPS: usize = 60;

#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    /// Linear ramp of `t_train` betas from `beta_start` to `beta_end`.
    pub fn linear(t_train: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if t_train == 0 {
            return Err(Error::param("t_train must be at least 1"));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::param(format!(
                "need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}"
            )));
        }
        let betas: Vec<f64> = if t_train == 1 {
            vec![beta_start]
        } else {
            (0..t_train)
                .map(|i| beta_start + (beta_end - beta_start) * i as f64 / (t_train - 1) as f64)
                .collect()
        };
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let alpha_bars = alphas
            .iter()
            .scan(1.0, |acc, a| {
                *acc *= a;
                Some(*acc)
            })
            .collect();
        Ok(Self {
            betas,
            alphas,
            alpha_bars,
        })
    }

    pub fn t_train(&self) -> usize {
        self.betas.len()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    fn check(&self, t: usize) -> Result<()> {
        if t >= self.t_train() {
            return Err(Error::param(format!(
                "timestep {t} outside schedule of {} steps",
                self.t_train()
            )));
        }
        Ok(())
    }

    /// `alpha_bar` at `t`, with the clean end (`None`) at 1.
    pub fn alpha_bar(&self, t: Option<usize>) -> Result<f64> {
        match t {
            None => Ok(1.0),
            Some(t) => {
                self.check(t)?;
                Ok(self.alpha_bars[t])
            }
        }
    }
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        Self::linear(DEFAULT_TRAIN_STEPS, DEFAULT_BETA_START, DEFAULT_BETA_END)
            .expect("default schedule is valid")
    }
}

/// Strictly increasing training-step indices visited by DDIM.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StepSequence {
    steps: Vec<usize>,
}

impl StepSequence {
    /// `n_steps` indices `i * t_train / n_steps`.
    pub fn uniform(sched: &NoiseSchedule, n_steps: usize) -> Result<Self> {
        let t_train = sched.t_train();
        if n_steps == 0 || n_steps > t_train {
            return Err(Error::param(format!(
                "n_steps must be in 1..={t_train}, got {n_steps}"
            )));
        }
        Ok(Self {
            steps: (0..n_steps).map(|i| i * t_train / n_steps).collect(),
        })
    }

    pub fn steps(&self) -> &[usize] {
        &self.steps
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// Inversion transitions `(from, to)` from the clean end upwards; the
    /// first transition starts at `None`.
    pub fn inversion_pairs(&self) -> Vec<(Option<usize>, usize)> {
        (0..self.steps.len())
            .map(|i| {
                let from = if i == 0 { None } else { Some(self.steps[i - 1]) };
                (from, self.steps[i])
            })
            .collect()
    }

    /// Denoising transitions `(from, to)`, most-noised first; edit step `k`
    /// is the `k`-th entry. The last transition ends at `None`.
    pub fn denoise_pairs(&self) -> Vec<(usize, Option<usize>)> {
        let n = self.steps.len();
        (0..n)
            .map(|k| {
                let from = self.steps[n - 1 - k];
                let to = if k + 1 == n { None } else { Some(self.steps[n - 2 - k]) };
                (from, to)
            })
            .collect()
    }

    /// Timestep at which the denoiser is evaluated for a transition that
    /// starts at `from`; the clean end is evaluated at step 0.
    pub fn model_step(from: Option<usize>) -> usize {
        from.unwrap_or(0)
    }
}

pub fn make_step_sequence(sched: &NoiseSchedule, n_steps: usize) -> Result<StepSequence> {
    StepSequence::uniform(sched, n_steps)
}

fn combine<T: Real>(
    a: &Tensor<T>,
    ka: f64,
    b: &Tensor<T>,
    kb: f64,
) -> Result<Tensor<T>> {
    a.zip_map(b, |x, y| T::cast_from(ka * x.as_f64() + kb * y.as_f64()))
}

/// `sqrt(abar_t) x0 + sqrt(1 - abar_t) eps`.
pub fn q_sample<T: Real>(
    x0: &Tensor<T>,
    t: usize,
    eps: &Tensor<T>,
    sched: &NoiseSchedule,
) -> Result<Tensor<T>> {
    let ab = sched.alpha_bar(Some(t))?;
    combine(x0, ab.sqrt(), eps, (1.0 - ab).sqrt())
}

fn predict_x0_at<T: Real>(xt: &Tensor<T>, ab: f64, eps: &Tensor<T>) -> Result<Tensor<T>> {
    combine(xt, 1.0 / ab.sqrt(), eps, -(1.0 - ab).sqrt() / ab.sqrt())
}

/// `(x_t - sqrt(1 - abar_t) eps) / sqrt(abar_t)`.
pub fn predict_x0<T: Real>(
    xt: &Tensor<T>,
    t: usize,
    eps_pred: &Tensor<T>,
    sched: &NoiseSchedule,
) -> Result<Tensor<T>> {
    predict_x0_at(xt, sched.alpha_bar(Some(t))?, eps_pred)
}

/// Re-noise a predicted clean sample to level `ab_to` along `eps`. Written
/// as a single affine combination of `x` and `eps` so that a fixed `eps`
/// makes opposite steps exact inverses up to rounding.
fn ddim_move<T: Real>(x: &Tensor<T>, ab_from: f64, ab_to: f64, eps: &Tensor<T>) -> Result<Tensor<T>> {
    let ratio = (ab_to / ab_from).sqrt();
    let k_eps = (1.0 - ab_to).sqrt() - ratio * (1.0 - ab_from).sqrt();
    combine(x, ratio, eps, k_eps)
}

/// Deterministic DDIM step towards the clean end (`t_to < t_from`).
pub fn ddim_denoise_step<T: Real>(
    xt: &Tensor<T>,
    t_from: usize,
    t_to: Option<usize>,
    eps_pred: &Tensor<T>,
    sched: &NoiseSchedule,
) -> Result<Tensor<T>> {
    if matches!(t_to, Some(t) if t >= t_from) {
        return Err(Error::Ordering(format!(
            "denoise step must go down: {t_from} -> {t_to:?}"
        )));
    }
    let ab_from = sched.alpha_bar(Some(t_from))?;
    let ab_to = sched.alpha_bar(t_to)?;
    ddim_move(xt, ab_from, ab_to, eps_pred)
}

/// Deterministic DDIM inversion step away from the clean end (`t_next > t_prev`).
pub fn ddim_invert_step<T: Real>(
    x_prev: &Tensor<T>,
    t_prev: Option<usize>,
    t_next: usize,
    eps_pred: &Tensor<T>,
    sched: &NoiseSchedule,
) -> Result<Tensor<T>> {
    if matches!(t_prev, Some(t) if t >= t_next) {
        return Err(Error::Ordering(format!(
            "inversion step must go up: {t_prev:?} -> {t_next}"
        )));
    }
    let ab_prev = sched.alpha_bar(t_prev)?;
    let ab_next = sched.alpha_bar(Some(t_next))?;
    ddim_move(x_prev, ab_prev, ab_next, eps_pred)
}
