//! Noise-prediction training on toy images.

use crate::denoiser::model::ToyDenoiser;
use crate::error::{Error, Result};
use crate::prompts::PromptEmbedding;
use crate::rng::SeededRng;
use crate::schedule::{q_sample, NoiseSchedule};
use crate::tape::Tape;
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct TrainExample {
    /// Clean `S x S x C` latent.
    pub x0: Tensor,
    /// Captions for `x0`; each step draws one uniformly.
    pub prompts: Vec<PromptEmbedding>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Optimizer {
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl Optimizer {
    pub fn adam() -> Self {
        Optimizer::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub optimizer: Optimizer,
    /// Probability of replacing the caption by the empty prompt.
    pub empty_prob: f64,
    /// Clip the global gradient norm to this value; `None` disables clipping.
    pub clip_norm: Option<f64>,
    /// Anneal the learning rate to zero along a half cosine.
    pub cosine_decay: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 60_000,
            lr: 1e-3,
            optimizer: Optimizer::adam(),
            empty_prob: 0.1,
            clip_norm: Some(1.0),
            cosine_decay: true,
        }
    }
}

/// Per-sample losses in step order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossCurve {
    pub losses: Vec<f64>,
}

impl LossCurve {
    /// Mean of the last `n` losses (all of them if fewer).
    pub fn tail_mean(&self, n: usize) -> f64 {
        let tail = &self.losses[self.losses.len().saturating_sub(n)..];
        tail.iter().sum::<f64>() / tail.len().max(1) as f64
    }
}

/// Training loss `mean((eps - eps_theta(x_t, t, c))^2)` and its parameter
/// gradients.
pub fn loss_and_grads(
    model: &ToyDenoiser,
    xt: &Tensor,
    t: usize,
    prompt: &PromptEmbedding,
    eps: &Tensor,
) -> Result<(f64, Vec<Tensor>)> {
    let tape = Tape::new();
    let params = model.tracked_params(&tape);
    let x = tape.constant(xt.clone());
    let out = model.forward_vars(&tape, &params, x, t, prompt)?;
    let target = tape.constant(eps.clone());
    let loss = out
        .eps
        .sub(target)?
        .sum_sq()
        .scale(1.0 / eps.numel() as f32);
    let grads = tape.backward(loss)?;
    let value = loss.value().data()[0] as f64;
    Ok((value, params.vars().iter().map(|&v| grads.wrt(v)).collect()))
}

/// Held-out noise-prediction loss: one draw of `(t, eps)` per example.
pub fn eval_loss(
    model: &ToyDenoiser,
    data: &[TrainExample],
    sched: &NoiseSchedule,
    rng: &mut SeededRng,
) -> Result<f64> {
    let mut total = 0.0;
    for ex in data {
        let t = rng.range(0, sched.t_train());
        let eps = rng.normal_tensor(ex.x0.dims());
        let xt = q_sample(&ex.x0, t, &eps, sched)?;
        let pred = model.eps(&xt, t, &ex.prompts[0])?;
        total += pred.sub(&eps)?.sum_sq() / eps.numel() as f64;
    }
    Ok(total / data.len().max(1) as f64)
}

struct AdamState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: i32,
}

/// Per-sample stochastic training: draw an example, a timestep and a noise
/// map, and take one optimiser step on the squared prediction error.
pub fn train_toy(
    model: &mut ToyDenoiser,
    data: &[TrainExample],
    sched: &NoiseSchedule,
    cfg: &TrainConfig,
    rng: &mut SeededRng,
) -> Result<LossCurve> {
    if data.is_empty() {
        return Err(Error::param("training set is empty"));
    }
    if data.iter().any(|ex| ex.prompts.is_empty()) {
        return Err(Error::param("every training example needs a caption"));
    }
    if cfg.steps == 0 {
        return Err(Error::param("training needs at least one step"));
    }
    let empty = PromptEmbedding::empty();
    let mut adam = AdamState {
        m: model.params().iter().map(|p| vec![0.0; p.value.numel()]).collect(),
        v: model.params().iter().map(|p| vec![0.0; p.value.numel()]).collect(),
        step: 0,
    };
    let mut curve = LossCurve::default();
    for step in 0..cfg.steps {
        let lr = if cfg.cosine_decay {
            let progress = step as f64 / cfg.steps as f64;
            0.5 * cfg.lr * (1.0 + (std::f64::consts::PI * progress).cos())
        } else {
            cfg.lr
        };
        let ex = &data[rng.range(0, data.len())];
        let prompt = if rng.uniform() < cfg.empty_prob {
            &empty
        } else {
            &ex.prompts[rng.range(0, ex.prompts.len())]
        };
        let t = rng.range(0, sched.t_train());
        let eps = rng.normal_tensor(ex.x0.dims());
        let xt = q_sample(&ex.x0, t, &eps, sched)?;
        let (loss, mut grads) = loss_and_grads(model, &xt, t, prompt, &eps)?;
        curve.losses.push(loss);

        if let Some(max) = cfg.clip_norm {
            let norm = grads.iter().map(|g| g.sum_sq()).sum::<f64>().sqrt();
            if norm > max {
                let s = (max / norm) as f32;
                for g in &mut grads {
                    *g = g.scale(s);
                }
            }
        }
        match cfg.optimizer {
            Optimizer::Sgd => {
                for (p, g) in model.params_mut().iter_mut().zip(&grads) {
                    p.value = p.value.axpy(-lr as f32, g)?;
                }
            }
            Optimizer::Adam { beta1, beta2, eps } => {
                adam.step += 1;
                let c1 = 1.0 - beta1.powi(adam.step);
                let c2 = 1.0 - beta2.powi(adam.step);
                for (i, (p, g)) in model.params_mut().iter_mut().zip(&grads).enumerate() {
                    let (m, v) = (&mut adam.m[i], &mut adam.v[i]);
                    for (j, (w, &gj)) in p.value.data_mut().iter_mut().zip(g.data()).enumerate() {
                        let gj = gj as f64;
                        m[j] = beta1 * m[j] + (1.0 - beta1) * gj;
                        v[j] = beta2 * v[j] + (1.0 - beta2) * gj * gj;
                        let update = lr * (m[j] / c1) / ((v[j] / c2).sqrt() + eps);
                        *w = (*w as f64 - update) as f32;
                    }
                }
            }
        }
        if !loss.is_finite() {
            return Err(Error::Contract(format!("training diverged (loss {loss})")));
        }
    }
    Ok(curve)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::ModelConfig;

    fn small() -> ToyDenoiser {
        let cfg = ModelConfig {
            size: 8,
            width: 8,
            time_dim: 8,
            pre_dilations: vec![1, 2],
            post_dilations: vec![1],
            ..ModelConfig::default()
        };
        ToyDenoiser::new(cfg, 5).unwrap()
    }

    fn data() -> Vec<TrainExample> {
        (0..8)
            .map(|i| TrainExample {
                x0: Tensor::from_fn(&[8, 8, 1], |j| if (j / 8 + i) % 4 < 2 { 1.0 } else { -1.0 }),
                prompts: vec![PromptEmbedding::from_sentence(if i % 2 == 0 { "a disc" } else { "a square" }).unwrap()],
            })
            .collect()
    }

    #[test]
    fn zero_predictor_loss_is_unit_variance() {
        let cfg = TrainConfig {
            steps: 200,
            lr: 0.0,
            ..TrainConfig::default()
        };
        let curve = train_toy(&mut small(), &data(), &NoiseSchedule::default(), &cfg, &mut SeededRng::new(1)).unwrap();
        assert!((curve.tail_mean(200) - 1.0).abs() < 0.05, "{}", curve.tail_mean(200));
    }

    #[test]
    fn identical_seeds_give_identical_curves() {
        let cfg = TrainConfig {
            steps: 30,
            ..TrainConfig::default()
        };
        let run = || {
            let mut m = small();
            let c = train_toy(&mut m, &data(), &NoiseSchedule::default(), &cfg, &mut SeededRng::new(2)).unwrap();
            (c, m)
        };
        let ((a, ma), (b, mb)) = (run(), run());
        assert_eq!(a, b);
        assert!(ma.params().iter().zip(mb.params()).all(|(p, q)| p.value.bit_eq(&q.value)));
    }

    #[test]
    fn short_training_beats_the_zero_predictor() {
        let sched = NoiseSchedule::default();
        for optimizer in [Optimizer::adam(), Optimizer::Sgd] {
            let cfg = TrainConfig {
                steps: 600,
                optimizer,
                lr: if optimizer == Optimizer::Sgd { 0.05 } else { 1e-3 },
                ..TrainConfig::default()
            };
            let mut m = small();
            train_toy(&mut m, &data(), &sched, &cfg, &mut SeededRng::new(3)).unwrap();
            let held_out = eval_loss(&m, &data(), &sched, &mut SeededRng::new(99)).unwrap();
            assert!(held_out < 1.0, "{optimizer:?}: {held_out}");
        }
    }

    #[test]
    fn bad_inputs_are_rejected() {
        let sched = NoiseSchedule::default();
        let mut rng = SeededRng::new(0);
        let cfg = TrainConfig::default();
        assert!(train_toy(&mut small(), &[], &sched, &cfg, &mut rng).is_err());
        let zero = TrainConfig { steps: 0, ..cfg.clone() };
        assert!(train_toy(&mut small(), &data(), &sched, &zero, &mut rng).is_err());
        let mut bare = data();
        bare[0].prompts.clear();
        assert!(train_toy(&mut small(), &bare, &sched, &cfg, &mut rng).is_err());
    }
}
