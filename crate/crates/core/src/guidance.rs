//! Inversion, reconstruction with rich-prompt attention capture, temporal
//! fusion of the captured maps into a reference, and the guided editing loop
//! with its cooperative update.

use crate::denoiser::{CrossAttentionMap, MapTag, ToyDenoiser};
use crate::error::{Error, Result};
use crate::noise_reg::{regularize_noise, NoiseRegConfig};
use crate::prompts::{apply_direction, EditDirection, LadderWeights, PromptEmbedding, RichPromptLadder};
use crate::schedule::{ddim_denoise_step, ddim_invert_step, NoiseSchedule, StepSequence};
use crate::tape::{value_and_gradient, Tape, Var};
use crate::tensor::{Real, Tensor};

/// How the captured maps are combined into the per-step reference.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FusionMode {
    /// Mean of `m_x[k]` and `m_yp`, `m_y` over steps `k-1..=k+1`.
    Sliding,
    /// Mean of `m_x[k]`, `m_yp[k]`, `m_y[k]` only.
    PerStep,
    /// As `Sliding`, but the label and target maps of step `k` itself are
    /// left out.
    SlidingExcludeCurrent,
    /// As `Sliding`, with neighbouring steps at half the weight of step `k`.
    DistanceWeighted,
}

impl FusionMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "sliding" => Ok(FusionMode::Sliding),
            "per-step" | "simple" => Ok(FusionMode::PerStep),
            "sliding-exclude-current" => Ok(FusionMode::SlidingExcludeCurrent),
            "distance-weighted" => Ok(FusionMode::DistanceWeighted),
            other => Err(Error::param(format!(
                "unknown fusion mode {other:?}; expected sliding, per-step, \
                 sliding-exclude-current or distance-weighted"
            ))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            FusionMode::Sliding => "sliding",
            FusionMode::PerStep => "per-step",
            FusionMode::SlidingExcludeCurrent => "sliding-exclude-current",
            FusionMode::DistanceWeighted => "distance-weighted",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EditConfig {
    pub n_steps: usize,
    pub cfg_scale: f64,
    pub lambda_xa: f64,
    pub lambda_rev: f64,
    /// Edit-step indices (0 = most noised) that get a cooperative update.
    pub rev_steps: Vec<usize>,
    pub rev_decay: f64,
    pub ladder: LadderWeights,
    pub fusion: FusionMode,
    pub noise_reg: NoiseRegConfig,
    /// Weight of the edit direction in the editing prompt.
    pub edit_weight: f32,
}

impl Default for EditConfig {
    fn default() -> Self {
        Self {
            n_steps: 60,
            cfg_scale: 3.0,
            lambda_xa: 0.01,
            lambda_rev: 0.01,
            rev_steps: vec![10, 15, 20, 25],
            rev_decay: 0.5,
            ladder: LadderWeights::default(),
            fusion: FusionMode::Sliding,
            noise_reg: NoiseRegConfig::default(),
            edit_weight: 1.0,
        }
    }
}

impl EditConfig {
    pub fn validate(&self) -> Result<()> {
        let scales = [self.cfg_scale, self.lambda_xa, self.lambda_rev, self.rev_decay];
        if scales.iter().any(|s| !s.is_finite() || *s < 0.0) {
            return Err(Error::param("guidance scales must be finite and non-negative"));
        }
        if self.n_steps == 0 {
            return Err(Error::param("n_steps must be positive"));
        }
        if let Some(&k) = self.rev_steps.iter().find(|&&k| k >= self.n_steps) {
            return Err(Error::param(format!(
                "cooperative-update step {k} is outside 0..{}",
                self.n_steps
            )));
        }
        Ok(())
    }

    /// Guidance switched off: no attention loss and no cooperative update.
    pub fn unguided(&self) -> Self {
        Self {
            lambda_xa: 0.0,
            lambda_rev: 0.0,
            ..self.clone()
        }
    }
}

/// The three maps captured at one reconstruction step.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionTriple {
    pub m_x: CrossAttentionMap,
    pub m_yp: CrossAttentionMap,
    pub m_y: CrossAttentionMap,
}

/// Captured maps indexed by edit step.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AttentionTrace {
    pub steps: Vec<AttentionTriple>,
}

impl AttentionTrace {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }
}

/// Fused reference map per edit step.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ReferenceTrace {
    pub maps: Vec<CrossAttentionMap>,
}

impl ReferenceTrace {
    pub fn len(&self) -> usize {
        self.maps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.maps.is_empty()
    }
}

fn check_sequence(sched: &NoiseSchedule, seq: &StepSequence) -> Result<()> {
    match seq.steps().last() {
        None => Err(Error::param("step sequence is empty")),
        Some(&last) if last >= sched.t_train() => Err(Error::param(format!(
            "step sequence reaches {last} but the schedule has {} steps",
            sched.t_train()
        ))),
        _ => Ok(()),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Inversion {
    /// Latent at the most-noised step.
    pub latent: Tensor,
    /// Noise used by the final inversion step (after regularisation).
    pub last_eps: Tensor,
}

/// Deterministic DDIM inversion of `x0` under prompt `c`; each predicted
/// noise map is regularised before it is used.
pub fn invert(
    model: &ToyDenoiser,
    x0: &Tensor,
    c: &PromptEmbedding,
    sched: &NoiseSchedule,
    seq: &StepSequence,
    noise_reg: &NoiseRegConfig,
) -> Result<Inversion> {
    check_sequence(sched, seq)?;
    let mut x = x0.clone();
    let mut last_eps = Tensor::zeros(x0.dims());
    for (from, to) in seq.inversion_pairs() {
        let eps = model.eps(&x, StepSequence::model_step(from), c)?;
        let eps = regularize_noise(&eps, noise_reg)?;
        x = ddim_invert_step(&x, from, to, &eps, sched)?;
        last_eps = eps;
    }
    Ok(Inversion { latent: x, last_eps })
}

/// Plain DDIM denoising of `x_inv` under `c`.
pub fn reconstruct(
    model: &ToyDenoiser,
    x_inv: &Tensor,
    c: &PromptEmbedding,
    sched: &NoiseSchedule,
    seq: &StepSequence,
) -> Result<Tensor> {
    check_sequence(sched, seq)?;
    let mut x = x_inv.clone();
    for (from, to) in seq.denoise_pairs() {
        let eps = model.eps(&x, from, c)?;
        x = ddim_denoise_step(&x, from, to, &eps, sched)?;
    }
    Ok(x)
}

fn tagged(matrix: Tensor, step: usize, tag: MapTag) -> CrossAttentionMap {
    CrossAttentionMap { matrix, step, tag }
}

/// Reconstruction along the base prompt, additionally capturing the
/// attention maps of the two edited ladder prompts at every step.
pub fn reconstruct_with_capture(
    model: &ToyDenoiser,
    x_inv: &Tensor,
    ladder: &RichPromptLadder,
    sched: &NoiseSchedule,
    seq: &StepSequence,
) -> Result<(Tensor, AttentionTrace)> {
    check_sequence(sched, seq)?;
    let mut x = x_inv.clone();
    let mut trace = AttentionTrace::default();
    for (from, to) in seq.denoise_pairs() {
        let (eps, m_x) = model.predict(&x, from, &ladder.base)?;
        let m_yp = attention_map(model, &x, from, &ladder.mid)?;
        let m_y = attention_map(model, &x, from, &ladder.high)?;
        trace.steps.push(AttentionTriple {
            m_x: tagged(m_x, from, MapTag::Input),
            m_yp: tagged(m_yp, from, MapTag::Label),
            m_y: tagged(m_y, from, MapTag::Target),
        });
        x = ddim_denoise_step(&x, from, to, &eps, sched)?;
    }
    Ok((x, trace))
}

/// Attention matrix alone, without evaluating the layers after it.
pub fn attention_map(model: &ToyDenoiser, xt: &Tensor, t: usize, c: &PromptEmbedding) -> Result<Tensor> {
    let tape = Tape::new();
    let params = model.constant_params(&tape);
    let attn = model.attention_var(&tape, &params, tape.constant(xt.clone()), t, c)?;
    Ok((*attn.value()).clone())
}

/// Weighted members `(weight, map)` of the reference at step `k`.
fn fusion_members(trace: &AttentionTrace, k: usize, mode: FusionMode) -> Vec<(f64, &Tensor)> {
    let n = trace.len();
    let mut members = vec![(1.0, &trace.steps[k].m_x.matrix)];
    let window = match mode {
        FusionMode::PerStep => k..=k,
        _ => k.saturating_sub(1)..=(k + 1).min(n - 1),
    };
    for j in window {
        let w = match mode {
            FusionMode::SlidingExcludeCurrent if j == k => continue,
            FusionMode::DistanceWeighted if j != k => 0.5,
            _ => 1.0,
        };
        members.push((w, &trace.steps[j].m_yp.matrix));
        members.push((w, &trace.steps[j].m_y.matrix));
    }
    members
}

/// Number of maps averaged into the reference at each step.
pub fn fusion_counts(trace: &AttentionTrace, mode: FusionMode) -> Vec<usize> {
    (0..trace.len()).map(|k| fusion_members(trace, k, mode).len()).collect()
}

pub fn fuse(trace: &AttentionTrace, mode: FusionMode) -> Result<ReferenceTrace> {
    if trace.is_empty() {
        return Err(Error::param("cannot fuse an empty attention trace"));
    }
    let mut maps = Vec::with_capacity(trace.len());
    for k in 0..trace.len() {
        let members = fusion_members(trace, k, mode);
        let dims = members[0].1.dims().to_vec();
        let total: f64 = members.iter().map(|(w, _)| w).sum();
        let mut acc = vec![0.0f64; members[0].1.numel()];
        for (w, m) in &members {
            if m.dims() != dims.as_slice() {
                return Err(Error::shape(format!(
                    "attention maps at step {k} disagree in shape: {dims:?} vs {:?}",
                    m.dims()
                )));
            }
            for (a, &v) in acc.iter_mut().zip(m.data()) {
                *a += w * v as f64;
            }
        }
        let fused = Tensor::new(dims, acc.into_iter().map(|a| (a / total) as f32).collect())?;
        maps.push(tagged(fused, trace.steps[k].m_x.step, MapTag::Ref));
    }
    Ok(ReferenceTrace { maps })
}

pub fn sliding_fusion(trace: &AttentionTrace) -> Result<ReferenceTrace> {
    fuse(trace, FusionMode::Sliding)
}

/// `||m_edit - m_ref||` (Frobenius).
pub fn xa_loss(m_edit: &Tensor, m_ref: &Tensor) -> Result<f64> {
    Ok(m_edit.sub(m_ref)?.l2_norm())
}

fn attention_distance<'t, T: Real>(
    model: &ToyDenoiser<T>,
    tape: &'t Tape<T>,
    x: Var<'t, T>,
    t: usize,
    c: &PromptEmbedding,
    m_ref: &Tensor<T>,
) -> Result<Var<'t, T>> {
    let params = model.constant_params(tape);
    let attn = model.attention_var(tape, &params, x, t, c)?;
    attn.sub(tape.constant(m_ref.clone())).map(|d| d.l2_norm())
}

/// `||M(x_t, t, c) - m_ref||` and its gradient with respect to `x_t`.
pub fn attention_loss_and_grad<T: Real>(
    model: &ToyDenoiser<T>,
    xt: &Tensor<T>,
    t: usize,
    c: &PromptEmbedding,
    m_ref: &Tensor<T>,
) -> Result<(f64, Tensor<T>)> {
    value_and_gradient(xt, |tape, x| attention_distance(model, tape, x, t, c, m_ref))
}

/// `||M(x_t, t, c) - m_ref||` without a gradient.
pub fn attention_loss(
    model: &ToyDenoiser,
    xt: &Tensor,
    t: usize,
    c: &PromptEmbedding,
    m_ref: &Tensor,
) -> Result<f64> {
    xa_loss(&attention_map(model, xt, t, c)?, m_ref)
}

/// `eps_u + s (eps_c - eps_u)`.
pub fn classifier_free(eps_cond: &Tensor, eps_uncond: &Tensor, scale: f64) -> Result<Tensor> {
    eps_uncond.zip_map(eps_cond, |u, c| {
        (u as f64 + scale * (c as f64 - u as f64)) as f32
    })
}

/// Attention-loss values around one latent update.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossPair {
    pub before: f64,
    /// Present when descent monitoring is on.
    pub after: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub t: usize,
    pub xa: Option<LossPair>,
    pub rev: Option<LossPair>,
    /// Cooperative-update step size used at this step.
    pub lambda_rev: Option<f64>,
}

/// One guided denoising step: pull the editing prompt's attention towards
/// the reference, then take a classifier-free-guided DDIM step from the
/// updated latent.
#[allow(clippy::too_many_arguments)]
pub fn guided_edit_step(
    model: &ToyDenoiser,
    xt: &Tensor,
    pair: (usize, Option<usize>),
    c_edit: &PromptEmbedding,
    m_ref: &Tensor,
    cfg: &EditConfig,
    sched: &NoiseSchedule,
    monitor: bool,
) -> Result<(Tensor, Option<LossPair>)> {
    let (from, to) = pair;
    let mut x = xt.clone();
    let mut record = None;
    if cfg.lambda_xa > 0.0 {
        let (before, grad) = attention_loss_and_grad(model, &x, from, c_edit, m_ref)?;
        x = x.axpy(-cfg.lambda_xa as f32, &grad)?;
        let after = if monitor {
            Some(attention_loss(model, &x, from, c_edit, m_ref)?)
        } else {
            None
        };
        record = Some(LossPair { before, after });
    }
    let eps_c = model.eps(&x, from, c_edit)?;
    let eps = if cfg.cfg_scale == 1.0 {
        eps_c
    } else {
        let eps_u = model.eps(&x, from, &PromptEmbedding::empty())?;
        classifier_free(&eps_c, &eps_u, cfg.cfg_scale)?
    };
    Ok((ddim_denoise_step(&x, from, to, &eps, sched)?, record))
}

/// Latent step pulling the reconstruction prompt's attention at `x_t`
/// towards the reference.
pub fn cooperative_update(
    model: &ToyDenoiser,
    xt: &Tensor,
    t: usize,
    c_base: &PromptEmbedding,
    m_ref: &Tensor,
    lambda_rev: f64,
    monitor: bool,
) -> Result<(Tensor, LossPair)> {
    let (before, grad) = attention_loss_and_grad(model, xt, t, c_base, m_ref)?;
    let x = if lambda_rev == 0.0 {
        xt.clone()
    } else {
        xt.axpy(-lambda_rev as f32, &grad)?
    };
    let after = if monitor {
        Some(attention_loss(model, &x, t, c_base, m_ref)?)
    } else {
        None
    };
    Ok((x, LossPair { before, after }))
}

#[derive(Clone, Debug, PartialEq)]
pub struct EditOutcome {
    pub latent: Tensor,
    pub records: Vec<StepRecord>,
}

/// Full editing loop from the inverted latent.
#[allow(clippy::too_many_arguments)]
pub fn edit(
    model: &ToyDenoiser,
    x_inv: &Tensor,
    c: &PromptEmbedding,
    dir: &EditDirection,
    reference: &ReferenceTrace,
    cfg: &EditConfig,
    sched: &NoiseSchedule,
    seq: &StepSequence,
    monitor: bool,
) -> Result<EditOutcome> {
    cfg.validate()?;
    check_sequence(sched, seq)?;
    if reference.len() != seq.len() {
        return Err(Error::param(format!(
            "reference trace has {} steps but the sequence has {}",
            reference.len(),
            seq.len()
        )));
    }
    let c_edit = apply_direction(c, dir, cfg.edit_weight);
    let mut x = x_inv.clone();
    let mut lambda_rev = cfg.lambda_rev;
    let mut records = Vec::with_capacity(seq.len());
    for (k, pair) in seq.denoise_pairs().into_iter().enumerate() {
        let m_ref = &reference.maps[k].matrix;
        let mut record = StepRecord {
            step: k,
            t: pair.0,
            xa: None,
            rev: None,
            lambda_rev: None,
        };
        if lambda_rev > 0.0 && cfg.rev_steps.contains(&k) {
            let (next, losses) = cooperative_update(model, &x, pair.0, c, m_ref, lambda_rev, monitor)?;
            x = next;
            record.rev = Some(losses);
            record.lambda_rev = Some(lambda_rev);
            lambda_rev *= cfg.rev_decay;
        }
        let (next, xa) = guided_edit_step(model, &x, pair, &c_edit, m_ref, cfg, sched, monitor)?;
        x = next;
        record.xa = xa;
        records.push(record);
    }
    Ok(EditOutcome { latent: x, records })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::ModelConfig;
    use crate::prompts::{make_ladder, SentenceBanks};
    use crate::rng::SeededRng;
    use crate::schedule::make_step_sequence;
    use crate::tensor::softmax_rows;

    fn small_model(seed: u64) -> ToyDenoiser {
        let cfg = ModelConfig {
            size: 8,
            width: 8,
            attn_dim: 8,
            time_dim: 8,
            pre_dilations: vec![1],
            post_dilations: vec![1],
            ..ModelConfig::default()
        };
        let mut m = ToyDenoiser::new(cfg, seed).unwrap();
        let mut rng = SeededRng::new(seed + 1);
        for p in m.params_mut() {
            if p.name.starts_with("conv_out") {
                p.value = rng.normal_tensor::<f32>(p.value.dims()).scale(0.1);
            }
        }
        m
    }

    struct Fixture {
        model: ToyDenoiser,
        sched: NoiseSchedule,
        seq: StepSequence,
        c: PromptEmbedding,
        dir: EditDirection,
        x_inv: Tensor,
        cfg: EditConfig,
    }

    fn fixture() -> Fixture {
        let sched = NoiseSchedule::default();
        let seq = make_step_sequence(&sched, 6).unwrap();
        let cfg = EditConfig {
            n_steps: 6,
            rev_steps: vec![1, 3],
            ..EditConfig::default()
        };
        Fixture {
            model: small_model(3),
            x_inv: SeededRng::new(9).normal_tensor(&[8, 8, 1]),
            c: PromptEmbedding::from_sentence("a solid disc").unwrap(),
            dir: SentenceBanks::builtin().direction("disc", "square").unwrap(),
            sched,
            seq,
            cfg,
        }
    }

    fn random_map(rng: &mut SeededRng, rows: usize, cols: usize) -> Tensor {
        softmax_rows(&rng.normal_tensor::<f32>(&[rows, cols])).unwrap()
    }

    fn random_trace(rng: &mut SeededRng, n: usize) -> AttentionTrace {
        let mut map = |tag| tagged(random_map(rng, 10, 4), 0, tag);
        AttentionTrace {
            steps: (0..n)
                .map(|_| AttentionTriple {
                    m_x: map(MapTag::Input),
                    m_yp: map(MapTag::Label),
                    m_y: map(MapTag::Target),
                })
                .collect(),
        }
    }

    #[test]
    fn capture_is_passive_and_full_length() {
        let f = fixture();
        let ladder = make_ladder(&f.c, &f.dir, f.cfg.ladder).unwrap();
        let plain = reconstruct(&f.model, &f.x_inv, &f.c, &f.sched, &f.seq).unwrap();
        let (rec, trace) = reconstruct_with_capture(&f.model, &f.x_inv, &ladder, &f.sched, &f.seq).unwrap();
        assert!(rec.bit_eq(&plain));
        assert_eq!(trace.len(), f.seq.len());
        for fused in sliding_fusion(&trace).unwrap().maps {
            for row in fused.matrix.data().chunks(f.c.len() + 1) {
                let s: f64 = row.iter().map(|&v| v as f64).sum();
                assert!((s - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn zero_direction_ladder_captures_equal_maps() {
        let f = fixture();
        let ladder = make_ladder(&f.c, &EditDirection::zero("x"), f.cfg.ladder).unwrap();
        let (_, trace) = reconstruct_with_capture(&f.model, &f.x_inv, &ladder, &f.sched, &f.seq).unwrap();
        for s in &trace.steps {
            assert!(s.m_x.matrix.bit_eq(&s.m_yp.matrix));
            assert!(s.m_x.matrix.bit_eq(&s.m_y.matrix));
        }
    }

    #[test]
    fn fusion_window_sizes() {
        let trace = random_trace(&mut SeededRng::new(1), 6);
        assert_eq!(fusion_counts(&trace, FusionMode::Sliding), [5, 7, 7, 7, 7, 5]);
        assert_eq!(fusion_counts(&trace, FusionMode::DistanceWeighted), [5, 7, 7, 7, 7, 5]);
        assert_eq!(fusion_counts(&trace, FusionMode::PerStep), [3; 6]);
        assert_eq!(fusion_counts(&trace, FusionMode::SlidingExcludeCurrent), [3, 5, 5, 5, 5, 3]);
        assert_eq!(fusion_counts(&random_trace(&mut SeededRng::new(1), 1), FusionMode::Sliding), [3]);
    }

    #[test]
    fn sliding_fusion_matches_direct_average() {
        let mut rng = SeededRng::new(4);
        for n in [1, 2, 5] {
            let trace = random_trace(&mut rng, n);
            let fused = sliding_fusion(&trace).unwrap();
            for k in 0..n {
                let mut maps = vec![&trace.steps[k].m_x.matrix];
                for j in k.saturating_sub(1)..=(k + 1).min(n - 1) {
                    maps.push(&trace.steps[j].m_yp.matrix);
                    maps.push(&trace.steps[j].m_y.matrix);
                }
                let got = &fused.maps[k].matrix;
                for i in 0..got.numel() {
                    let want = maps.iter().map(|m| m.data()[i] as f64).sum::<f64>() / maps.len() as f64;
                    assert!((got.data()[i] as f64 - want).abs() < 1e-6);
                }
                for row in got.data().chunks(4) {
                    assert!((row.iter().map(|&v| v as f64).sum::<f64>() - 1.0).abs() < 1e-6);
                }
                assert_eq!(fused.maps[k].tag, MapTag::Ref);
            }
        }
    }

    #[test]
    fn fusing_identical_maps_is_identity() {
        let m = random_map(&mut SeededRng::new(2), 10, 4);
        let triple = AttentionTriple {
            m_x: tagged(m.clone(), 0, MapTag::Input),
            m_yp: tagged(m.clone(), 0, MapTag::Label),
            m_y: tagged(m.clone(), 0, MapTag::Target),
        };
        let trace = AttentionTrace {
            steps: vec![triple; 4],
        };
        for mode in [
            FusionMode::Sliding,
            FusionMode::PerStep,
            FusionMode::SlidingExcludeCurrent,
            FusionMode::DistanceWeighted,
        ] {
            for fused in fuse(&trace, mode).unwrap().maps {
                assert!(fused.matrix.max_abs_diff(&m).unwrap() < 1e-6);
            }
        }
        assert!(fuse(&AttentionTrace::default(), FusionMode::Sliding).is_err());
    }

    #[test]
    fn xa_loss_is_frobenius_distance() {
        let mut rng = SeededRng::new(8);
        let a = random_map(&mut rng, 6, 3);
        assert_eq!(xa_loss(&a, &a).unwrap(), 0.0);
        let mut b = a.clone();
        b.data_mut()[7] += 0.25;
        assert!((xa_loss(&a, &b).unwrap() - 0.25).abs() < 1e-6);
        let b = random_map(&mut rng, 6, 3);
        let want = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(&x, &y)| (x as f64 - y as f64).powi(2))
            .sum::<f64>()
            .sqrt();
        assert!((xa_loss(&a, &b).unwrap() - want).abs() < 1e-6);
        let c = random_map(&mut rng, 6, 4);
        assert!(matches!(xa_loss(&a, &c), Err(Error::Shape(_))));
    }

    #[test]
    fn guidance_off_is_a_plain_conditional_step() {
        let f = fixture();
        let pair = f.seq.denoise_pairs()[2];
        let m_ref = attention_map(&f.model, &f.x_inv, pair.0, &f.c).unwrap();
        let cfg = EditConfig {
            lambda_xa: 0.0,
            cfg_scale: 1.0,
            ..f.cfg.clone()
        };
        let (got, record) = guided_edit_step(&f.model, &f.x_inv, pair, &f.c, &m_ref, &cfg, &f.sched, true).unwrap();
        let eps = f.model.eps(&f.x_inv, pair.0, &f.c).unwrap();
        let want = ddim_denoise_step(&f.x_inv, pair.0, pair.1, &eps, &f.sched).unwrap();
        assert!(got.bit_eq(&want));
        assert!(record.is_none());

        let cfg = EditConfig {
            cfg_scale: 0.0,
            ..cfg
        };
        let (got, _) = guided_edit_step(&f.model, &f.x_inv, pair, &f.c, &m_ref, &cfg, &f.sched, false).unwrap();
        let eps = f.model.eps(&f.x_inv, pair.0, &PromptEmbedding::empty()).unwrap();
        let want = ddim_denoise_step(&f.x_inv, pair.0, pair.1, &eps, &f.sched).unwrap();
        assert!(got.max_abs_diff(&want).unwrap() < 1e-6);
    }

    #[test]
    fn small_guidance_steps_descend() {
        let f = fixture();
        let c_edit = apply_direction(&f.c, &f.dir, 1.0);
        let mut rng = SeededRng::new(12);
        for (k, pair) in f.seq.denoise_pairs().into_iter().enumerate() {
            let x: Tensor = rng.normal_tensor(&[8, 8, 1]);
            let other: Tensor = rng.normal_tensor(&[8, 8, 1]);
            let m_ref = attention_map(&f.model, &other, pair.0, &f.c).unwrap();
            let cfg = EditConfig {
                lambda_xa: 0.01,
                ..f.cfg.clone()
            };
            let (_, xa) = guided_edit_step(&f.model, &x, pair, &c_edit, &m_ref, &cfg, &f.sched, true).unwrap();
            let xa = xa.unwrap();
            assert!(xa.after.unwrap() <= xa.before, "step {k}: {xa:?}");
            let (_, rev) = cooperative_update(&f.model, &x, pair.0, &f.c, &m_ref, 0.01, true).unwrap();
            assert!(rev.after.unwrap() < rev.before, "step {k}: {rev:?}");
        }
    }

    #[test]
    fn cooperative_update_fixed_points() {
        let f = fixture();
        let t = f.seq.steps()[3];
        let m_ref = attention_map(&f.model, &f.x_inv, t, &f.c).unwrap();
        let (x, loss) = cooperative_update(&f.model, &f.x_inv, t, &f.c, &m_ref, 0.05, true).unwrap();
        assert!(x.bit_eq(&f.x_inv));
        assert_eq!(loss.before, 0.0);
        let shifted = attention_map(&f.model, &f.x_inv.scale(0.5), t, &f.c).unwrap();
        let (x, _) = cooperative_update(&f.model, &f.x_inv, t, &f.c, &shifted, 0.0, false).unwrap();
        assert!(x.bit_eq(&f.x_inv));
    }

    #[test]
    fn zero_direction_edit_reproduces_reconstruction() {
        let f = fixture();
        let ladder = make_ladder(&f.c, &EditDirection::zero("x"), f.cfg.ladder).unwrap();
        let (rec, trace) = reconstruct_with_capture(&f.model, &f.x_inv, &ladder, &f.sched, &f.seq).unwrap();
        let reference = sliding_fusion(&trace).unwrap();
        let cfg = EditConfig {
            cfg_scale: 1.0,
            ..f.cfg.unguided()
        };
        let out = edit(&f.model, &f.x_inv, &f.c, &EditDirection::zero("x"), &reference, &cfg, &f.sched, &f.seq, false).unwrap();
        assert!(out.latent.max_abs_diff(&rec).unwrap() < 1e-5);
    }

    #[test]
    fn edit_is_deterministic_and_records_cooperative_steps() {
        let f = fixture();
        let ladder = make_ladder(&f.c, &f.dir, f.cfg.ladder).unwrap();
        let (_, trace) = reconstruct_with_capture(&f.model, &f.x_inv, &ladder, &f.sched, &f.seq).unwrap();
        let reference = sliding_fusion(&trace).unwrap();
        let run = || edit(&f.model, &f.x_inv, &f.c, &f.dir, &reference, &f.cfg, &f.sched, &f.seq, true).unwrap();
        let (a, b) = (run(), run());
        assert!(a.latent.bit_eq(&b.latent));
        assert_eq!(a.records, b.records);
        let rev: Vec<_> = a.records.iter().filter_map(|r| r.lambda_rev.map(|l| (r.step, l))).collect();
        assert_eq!(rev, [(1, f.cfg.lambda_rev), (3, f.cfg.lambda_rev * 0.5)]);

        let short = ReferenceTrace {
            maps: reference.maps[1..].to_vec(),
        };
        let err = edit(&f.model, &f.x_inv, &f.c, &f.dir, &short, &f.cfg, &f.sched, &f.seq, false);
        assert!(matches!(err, Err(Error::Parameter(_))));
    }
}
