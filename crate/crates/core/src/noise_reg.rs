//! Autocorrelation regularisation of predicted noise during inversion.
//!
//! The pairwise term sums circular spatial correlations over all nonzero
//! offsets on every level of an average-pooling pyramid; the KL term fits a
//! diagonal Gaussian per channel and compares it with `N(0, 1)`.

use crate::error::{Error, Result};
use crate::tape::{value_and_gradient, Tape, Var};
use crate::tensor::{avg_pool2, Real, Tensor};

/// Pooling stops once a level reaches this size.
pub const PYRAMID_MIN_SIZE: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NoiseRegConfig {
    pub k_iters: usize,
    pub step_size: f64,
    pub lambda: f64,
}

impl Default for NoiseRegConfig {
    fn default() -> Self {
        Self {
            k_iters: 5,
            step_size: 1e-4,
            lambda: 1.0,
        }
    }
}

impl NoiseRegConfig {
    pub fn disabled() -> Self {
        Self {
            k_iters: 0,
            ..Self::default()
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NoisePyramid<T: Real = f32> {
    levels: Vec<Tensor<T>>,
}

impl<T: Real> NoisePyramid<T> {
    pub fn levels(&self) -> &[Tensor<T>] {
        &self.levels
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.levels.iter().map(|l| l.dims()[0]).collect()
    }
}

/// Number of pyramid levels for an `S x S` map.
fn level_count(side: usize) -> Result<usize> {
    if !side.is_power_of_two() {
        return Err(Error::param(format!(
            "noise map side must be a power of two, got {side}"
        )));
    }
    let mut count = 1;
    let mut s = side;
    while s > PYRAMID_MIN_SIZE {
        s /= 2;
        count += 1;
    }
    Ok(count)
}

fn check_square<T: Real>(eps: &Tensor<T>) -> Result<usize> {
    eps.expect_rank(3)?;
    let dims = eps.dims();
    if dims[0] != dims[1] {
        return Err(Error::shape(format!(
            "noise map must be square, got {dims:?}"
        )));
    }
    Ok(dims[0])
}

pub fn build_pyramid<T: Real>(eps: &Tensor<T>) -> Result<NoisePyramid<T>> {
    let n = level_count(check_square(eps)?)?;
    let mut levels = vec![eps.clone()];
    for _ in 1..n {
        let next = avg_pool2(levels.last().expect("non-empty"))?;
        levels.push(next);
    }
    Ok(NoisePyramid { levels })
}

pub fn pair_loss<T: Real>(pyr: &NoisePyramid<T>) -> f64 {
    let tape = Tape::<T>::new();
    pyr.levels
        .iter()
        .map(|l| {
            let v = tape.constant(l.clone()).pair_correlation().expect("square level");
            v.value().data()[0].as_f64()
        })
        .sum()
}

pub fn kl_loss<T: Real>(eps: &Tensor<T>) -> f64 {
    let tape = Tape::<T>::new();
    tape.constant(eps.clone()).gaussian_kl().value().data()[0].as_f64()
}

pub fn auto_loss<T: Real>(eps: &Tensor<T>, lambda: f64) -> Result<f64> {
    Ok(pair_loss(&build_pyramid(eps)?) + lambda * kl_loss(eps))
}

/// `L_pair + lambda * L_KL` recorded on a tape.
pub fn auto_loss_var<'t, T: Real>(eps: Var<'t, T>, lambda: f64) -> Result<Var<'t, T>> {
    let dims = eps.dims();
    if dims.len() != 3 || dims[0] != dims[1] {
        return Err(Error::shape(format!("noise map must be S x S x C, got {dims:?}")));
    }
    let n = level_count(dims[0])?;
    let mut level = eps;
    let mut total = level.pair_correlation()?;
    for _ in 1..n {
        level = level.avg_pool2()?;
        total = total.add(level.pair_correlation()?)?;
    }
    total.add(eps.gaussian_kl().scale(T::cast_from(lambda)))
}

/// `k_iters` steps of `eps <- eps - step_size * grad L_auto(eps)`.
pub fn regularize_noise<T: Real>(eps_pred: &Tensor<T>, cfg: &NoiseRegConfig) -> Result<Tensor<T>> {
    regularize_noise_traced(eps_pred, cfg).map(|(eps, _)| eps)
}

/// As [`regularize_noise`], also returning `L_auto` before each update and
/// after the last one.
pub fn regularize_noise_traced<T: Real>(
    eps_pred: &Tensor<T>,
    cfg: &NoiseRegConfig,
) -> Result<(Tensor<T>, Vec<f64>)> {
    check_square(eps_pred)?;
    let mut eps = eps_pred.clone();
    let mut losses = Vec::with_capacity(cfg.k_iters + 1);
    for _ in 0..cfg.k_iters {
        let (loss, grad) = value_and_gradient(&eps, |_, v| auto_loss_var(v, cfg.lambda))?;
        losses.push(loss);
        eps = eps.axpy(T::cast_from(-cfg.step_size), &grad)?;
    }
    if cfg.k_iters > 0 {
        losses.push(auto_loss(&eps, cfg.lambda)?);
    }
    Ok((eps, losses))
}

/// Mean absolute lag-1 circular autocorrelation over both spatial axes and
/// all channels of an `H x W x C` map.
pub fn lag1_autocorrelation<T: Real>(m: &Tensor<T>) -> Result<f64> {
    m.expect_rank(3)?;
    let (h, w, c) = (m.dims()[0], m.dims()[1], m.dims()[2]);
    let at = |y: usize, x: usize, ch: usize| m.data()[(y * w + x) * c + ch].as_f64();
    let mut total = 0.0;
    for ch in 0..c {
        let mean = (0..h * w).map(|i| at(i / w, i % w, ch)).sum::<f64>() / (h * w) as f64;
        let mut var = 0.0;
        let mut horiz = 0.0;
        let mut vert = 0.0;
        for y in 0..h {
            for x in 0..w {
                let v = at(y, x, ch) - mean;
                var += v * v;
                horiz += v * (at(y, (x + 1) % w, ch) - mean);
                vert += v * (at((y + 1) % h, x, ch) - mean);
            }
        }
        if var > 0.0 {
            total += (horiz / var).abs() + (vert / var).abs();
        }
    }
    Ok(total / (2 * c) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeededRng;

    /// The loss as printed: four nested loops with circular indexing.
    fn pair_loss_oracle(level: &Tensor<f64>) -> f64 {
        let (s, c) = (level.dims()[0], level.dims()[2]);
        let at = |x: usize, y: usize, ch: usize| level.data()[(x * s + y) * c + ch];
        let mut total = 0.0;
        for delta in 1..s {
            for x in 0..s {
                for y in 0..s {
                    for ch in 0..c {
                        let xm = (x + s - delta) % s;
                        let ym = (y + s - delta) % s;
                        total += at(x, y, ch) * (at(xm, y, ch) + at(x, ym, ch));
                    }
                }
            }
        }
        total / (s * s) as f64
    }

    #[test]
    fn pyramid_sizes() {
        let sizes = |s: usize| build_pyramid(&Tensor::<f32>::zeros(&[s, s, 1])).unwrap().sizes();
        assert_eq!(sizes(64), vec![64, 32, 16, 8]);
        assert_eq!(sizes(32), vec![32, 16, 8]);
        assert_eq!(sizes(16), vec![16, 8]);
        assert_eq!(sizes(8), vec![8]);
        assert_eq!(sizes(4), vec![4]);
        assert!(build_pyramid(&Tensor::<f32>::zeros(&[12, 12, 1])).is_err());
    }

    #[test]
    fn pyramid_level_zero_is_input() {
        let mut rng = SeededRng::new(1);
        let eps: Tensor = rng.normal_tensor(&[32, 32, 2]);
        let pyr = build_pyramid(&eps).unwrap();
        assert_eq!(pyr.levels()[0], eps);
        assert_eq!(pyr.levels()[1], avg_pool2(&eps).unwrap());
    }

    #[test]
    fn single_pixel_contributes_nothing() {
        let mut m = Tensor::<f64>::zeros(&[8, 8, 1]);
        m.data_mut()[19] = 2.5;
        let pyr = build_pyramid(&m).unwrap();
        assert_eq!(pair_loss(&pyr), 0.0);
    }

    #[test]
    fn constant_map_closed_form() {
        let v = 0.7;
        let m = Tensor::<f64>::full(&[8, 8, 1], v);
        let pyr = build_pyramid(&m).unwrap();
        let want = 2.0 * 7.0 * v * v;
        assert!((pair_loss(&pyr) - want).abs() < 1e-12);
        assert!((pair_loss_oracle(&m) - want).abs() < 1e-12);
    }

    #[test]
    fn pair_loss_matches_quadruple_loop() {
        let mut rng = SeededRng::new(2);
        for side in [8, 16] {
            let eps: Tensor<f64> = rng.normal_tensor(&[side, side, 2]);
            let pyr = build_pyramid(&eps).unwrap();
            let want: f64 = pyr.levels().iter().map(pair_loss_oracle).sum();
            let got = pair_loss(&pyr);
            assert!((got - want).abs() <= 1e-6 * want.abs().max(1.0), "{got} vs {want}");
        }
    }

    #[test]
    fn white_noise_pair_loss_is_centred() {
        let mut rng = SeededRng::new(3);
        let trials = 1000;
        let vals: Vec<f64> = (0..trials)
            .map(|_| {
                let eps: Tensor<f64> = rng.normal_tensor(&[16, 16, 1]);
                pair_loss(&build_pyramid(&eps).unwrap())
            })
            .collect();
        let mean = vals.iter().sum::<f64>() / trials as f64;
        let sd = (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (trials - 1) as f64).sqrt();
        let se = sd / (trials as f64).sqrt();
        assert!(mean.abs() <= 3.0 * se, "mean {mean}, se {se}");
    }

    #[test]
    fn kl_edge_cases() {
        let mut exact = Tensor::<f64>::zeros(&[2, 2, 1]);
        exact.data_mut().copy_from_slice(&[1.0, -1.0, 1.0, -1.0]);
        assert!(kl_loss(&exact).abs() < 1e-15);

        let zeros = Tensor::<f64>::zeros(&[4, 4, 3]);
        let want = 3.0 * 0.5 * (1e-8 + 0.0 - 1.0 - (1e-8f64).ln());
        assert!((kl_loss(&zeros) - want).abs() < 1e-9);

        let mut rng = SeededRng::new(4);
        let big: Tensor<f64> = rng.normal_tensor(&[64, 64, 4]);
        assert!(kl_loss(&big) <= 0.01);
    }

    #[test]
    fn auto_loss_components() {
        let mut rng = SeededRng::new(5);
        let eps: Tensor<f64> = rng.normal_tensor(&[16, 16, 1]);
        let pair = pair_loss(&build_pyramid(&eps).unwrap());
        let kl = kl_loss(&eps);
        assert_eq!(auto_loss(&eps, 0.0).unwrap(), pair);
        assert!((auto_loss(&eps, 1.0).unwrap() - (pair + kl)).abs() < 1e-6);
        let heavy = auto_loss(&eps, 1e9).unwrap();
        assert!((heavy / (1e9 * kl) - 1.0).abs() < 1e-3);
    }

    #[test]
    fn zero_iterations_is_identity() {
        let mut rng = SeededRng::new(6);
        let eps: Tensor = rng.normal_tensor(&[16, 16, 1]);
        let cfg = NoiseRegConfig::disabled();
        assert!(regularize_noise(&eps, &cfg).unwrap().bit_eq(&eps));
    }

    #[test]
    fn small_steps_never_increase_loss() {
        let mut rng = SeededRng::new(7);
        for _ in 0..5 {
            let eps: Tensor<f64> = rng.normal_tensor(&[16, 16, 1]);
            let cfg = NoiseRegConfig {
                k_iters: 5,
                step_size: 1e-4,
                lambda: 1.0,
            };
            let (_, losses) = regularize_noise_traced(&eps, &cfg).unwrap();
            assert!(losses.windows(2).all(|w| w[1] <= w[0]), "{losses:?}");
        }
    }

    fn smoothed_noise(rng: &mut SeededRng, side: usize) -> Tensor<f64> {
        let raw: Tensor<f64> = rng.normal_tensor(&[side, side, 1]);
        Tensor::from_fn(&[side, side, 1], |i| {
            let (y, x) = (i / side, i % side);
            let mut s = 0.0;
            for dy in 0..3 {
                for dx in 0..3 {
                    s += raw.data()[((y + dy) % side) * side + (x + dx) % side];
                }
            }
            s / 3.0
        })
    }

    #[test]
    fn regularisation_reduces_autocorrelation() {
        let mut rng = SeededRng::new(8);
        let eps = smoothed_noise(&mut rng, 32);
        let before = lag1_autocorrelation(&eps).unwrap();
        for step_size in [1e-4, 1e-2, 1.0] {
            let cfg = NoiseRegConfig {
                step_size,
                ..NoiseRegConfig::default()
            };
            let after = lag1_autocorrelation(&regularize_noise(&eps, &cfg).unwrap()).unwrap();
            assert!(after < before, "step {step_size}: {after} vs {before}");
        }
    }

    #[test]
    fn autocorrelation_of_white_noise_is_small() {
        let mut rng = SeededRng::new(9);
        let eps: Tensor<f64> = rng.normal_tensor(&[64, 64, 1]);
        assert!(lag1_autocorrelation(&eps).unwrap() < 0.05);
        let smooth = smoothed_noise(&mut rng, 64);
        assert!(lag1_autocorrelation(&smooth).unwrap() > 0.5);
    }
}
