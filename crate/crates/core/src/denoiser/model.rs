//! The conditional noise predictor and its single cross-attention block.

use crate::error::{Error, Result};
use crate::prompts::{sentence_vector, token_vector, PromptEmbedding, EMBED_DIM, EMPTY_TOKEN};
use crate::rng::SeededRng;
use crate::tape::{ConvGeom, Tape, Var};
use crate::tensor::{Real, Tensor};

/// Hyperparameters fixing the parameter layout.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    pub size: usize,
    pub channels: usize,
    pub width: usize,
    pub attn_dim: usize,
    pub time_dim: usize,
    /// Dilations of the residual conv blocks before the attention block.
    pub pre_dilations: Vec<usize>,
    /// Dilations of the residual conv blocks after it.
    pub post_dilations: Vec<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            size: 32,
            channels: 1,
            width: 16,
            attn_dim: 16,
            time_dim: 32,
            pre_dilations: vec![1, 2, 4, 8, 16],
            post_dilations: vec![1, 2, 4, 8],
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [self.size, self.channels, self.width, self.attn_dim, self.time_dim];
        if dims.iter().any(|&d| d == 0) || self.time_dim % 2 != 0 {
            return Err(Error::param(format!("invalid model config {self:?}")));
        }
        if self
            .pre_dilations
            .iter()
            .chain(&self.post_dilations)
            .any(|&d| d == 0)
        {
            return Err(Error::param("conv dilations must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy)]
enum Init {
    Zero,
    One,
    /// Normal with standard deviation `gain / sqrt(fan_in)`.
    Normal { fan_in: usize, gain: f64 },
}

/// Ordered parameter specification; forward consumes parameters in this order.
fn layout(cfg: &ModelConfig) -> Vec<(String, Vec<usize>, Init)> {
    let (c, f, d, td) = (cfg.channels, cfg.width, cfg.attn_dim, cfg.time_dim);
    let normal = |fan_in, gain| Init::Normal { fan_in, gain };
    let mut out = vec![
        ("conv_in.w".to_string(), vec![9 * c, f], normal(9 * c, 1.0)),
        ("conv_in.b".to_string(), vec![f], Init::Zero),
        ("time.w".to_string(), vec![td, f], normal(td, 1.0)),
        ("time.b".to_string(), vec![f], Init::Zero),
        ("prompt.w".to_string(), vec![EMBED_DIM, f], normal(EMBED_DIM, 1.0)),
    ];
    let block = |out: &mut Vec<_>, name: String| {
        out.push((format!("{name}.gain"), vec![f], Init::One));
        out.push((format!("{name}.bias"), vec![f], Init::Zero));
        out.push((format!("{name}.time"), vec![f, f], normal(f, 0.5)));
        out.push((format!("{name}.w"), vec![9 * f, f], normal(9 * f, 0.5)));
        out.push((format!("{name}.b"), vec![f], Init::Zero));
    };
    for i in 0..cfg.pre_dilations.len() {
        block(&mut out, format!("pre{i}"));
    }
    out.extend([
        ("attn.gain".to_string(), vec![f], Init::One),
        ("attn.bias".to_string(), vec![f], Init::Zero),
        ("attn.q".to_string(), vec![f, d], normal(f, 1.0)),
        ("attn.k".to_string(), vec![EMBED_DIM, d], normal(EMBED_DIM, 1.0)),
        ("attn.v".to_string(), vec![EMBED_DIM, d], normal(EMBED_DIM, 1.0)),
        ("attn.o".to_string(), vec![d, f], normal(d, 0.5)),
    ]);
    for i in 0..cfg.post_dilations.len() {
        block(&mut out, format!("post{i}"));
    }
    out.extend([
        ("out.gain".to_string(), vec![f], Init::One),
        ("out.bias".to_string(), vec![f], Init::Zero),
        ("conv_out.w".to_string(), vec![9 * f, c], Init::Zero),
        ("conv_out.b".to_string(), vec![c], Init::Zero),
    ]);
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param<T: Real> {
    pub name: String,
    pub value: Tensor<T>,
}

/// Row-stochastic `N x L` attention matrix from the cross-attention block.
#[derive(Clone, Debug, PartialEq)]
pub struct CrossAttentionMap {
    pub matrix: Tensor,
    /// Training-step index of the evaluation.
    pub step: usize,
    pub tag: MapTag,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MapTag {
    Input,
    Label,
    Target,
    Edit,
    Rev,
    Ref,
}

impl MapTag {
    pub fn as_str(self) -> &'static str {
        match self {
            MapTag::Input => "x",
            MapTag::Label => "yp",
            MapTag::Target => "y",
            MapTag::Edit => "edit",
            MapTag::Rev => "rev",
            MapTag::Ref => "ref",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DenoiserOutput {
    pub eps_pred: Tensor,
    pub attention: CrossAttentionMap,
}

/// Parameters placed on a tape, either tracked (training) or constant.
pub struct ParamVars<'t, T: Real> {
    vars: Vec<Var<'t, T>>,
}

impl<'t, T: Real> ParamVars<'t, T> {
    pub fn vars(&self) -> &[Var<'t, T>] {
        &self.vars
    }
}

/// Tape outputs of one forward pass.
pub struct ForwardVars<'t, T: Real> {
    /// `S x S x C` noise prediction.
    pub eps: Var<'t, T>,
    /// `N x L` attention matrix.
    pub attention: Var<'t, T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ToyDenoiser<T: Real = f32> {
    config: ModelConfig,
    params: Vec<Param<T>>,
}

/// `[sin(t w_k), cos(t w_k)]` with geometric frequencies.
/// Rows the attention reads: the `<empty>` token followed by the prompt.
/// The leading row gives pixels a place to attend that prompt edits leave
/// untouched; attention matrices therefore have `L + 1` columns.
pub fn attended_context(c: &PromptEmbedding) -> Tensor {
    let mut data = token_vector(EMPTY_TOKEN).to_vec();
    data.extend_from_slice(c.matrix().data());
    Tensor::new(vec![c.len() + 1, EMBED_DIM], data).expect("rows match the embedding width")
}

pub fn timestep_features<T: Real>(t: usize, dim: usize) -> Tensor<T> {
    let half = dim / 2;
    Tensor::from_fn(&[1, dim], |i| {
        let k = i % half;
        let freq = (-(k as f64) * (1000f64).ln() / half as f64).exp();
        let arg = t as f64 * freq;
        T::cast_from(if i < half { arg.sin() } else { arg.cos() })
    })
}

struct Cursor<'a, 't, T: Real> {
    vars: &'a [Var<'t, T>],
    next: usize,
}

impl<'t, T: Real> Cursor<'_, 't, T> {
    fn take(&mut self) -> Var<'t, T> {
        let v = self.vars[self.next];
        self.next += 1;
        v
    }

    fn skip(&mut self, n: usize) {
        self.next += n;
    }
}

const BLOCK_PARAMS: usize = 5;

impl<T: Real> ToyDenoiser<T> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = SeededRng::new(seed);
        let params = layout(&config)
            .into_iter()
            .map(|(name, dims, init)| {
                let value = match init {
                    Init::Zero => Tensor::zeros(&dims),
                    Init::One => Tensor::full(&dims, T::one()),
                    Init::Normal { fan_in, gain } => {
                        let sd = gain / (fan_in as f64).sqrt();
                        Tensor::from_fn(&dims, |_| T::cast_from(sd * rng.normal()))
                    }
                };
                Param { name, value }
            })
            .collect();
        Ok(Self { config, params })
    }

    /// Rebuilds a model from named tensors, checking them against the layout.
    pub fn from_params(config: ModelConfig, params: Vec<Param<T>>) -> Result<Self> {
        config.validate()?;
        let spec = layout(&config);
        if spec.len() != params.len() {
            return Err(Error::Format(format!(
                "expected {} parameter tensors, found {}",
                spec.len(),
                params.len()
            )));
        }
        for ((name, dims, _), p) in spec.iter().zip(&params) {
            if name != &p.name || dims.as_slice() != p.value.dims() {
                return Err(Error::Format(format!(
                    "parameter {:?} {:?} does not match expected {name:?} {dims:?}",
                    p.name,
                    p.value.dims()
                )));
            }
            if !p.value.all_finite() {
                return Err(Error::Format(format!("parameter {name:?} is not finite")));
            }
        }
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &[Param<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param<T>] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn cast<U: Real>(&self) -> ToyDenoiser<U> {
        ToyDenoiser {
            config: self.config.clone(),
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    value: p.value.cast(),
                })
                .collect(),
        }
    }

    pub fn constant_params<'t>(&self, tape: &'t Tape<T>) -> ParamVars<'t, T> {
        ParamVars {
            vars: self.params.iter().map(|p| tape.constant(p.value.clone())).collect(),
        }
    }

    pub fn tracked_params<'t>(&self, tape: &'t Tape<T>) -> ParamVars<'t, T> {
        ParamVars {
            vars: self.params.iter().map(|p| tape.input(p.value.clone())).collect(),
        }
    }

    fn check_latent(&self, dims: &[usize]) -> Result<()> {
        let (s, c) = (self.config.size, self.config.channels);
        if dims != [s, s, c] {
            return Err(Error::shape(format!(
                "latent must be {s}x{s}x{c}, got {dims:?}"
            )));
        }
        Ok(())
    }

    fn geom(&self, dilation: usize) -> ConvGeom {
        ConvGeom {
            height: self.config.size,
            width: self.config.size,
            dilation,
        }
    }

    /// Everything up to the attention matrix. Returns the pre-attention
    /// features, the time embedding, the value rows and the attention.
    #[allow(clippy::type_complexity)]
    fn front<'t>(
        &self,
        tape: &'t Tape<T>,
        cur: &mut Cursor<'_, 't, T>,
        xt: Var<'t, T>,
        t: usize,
        c: &PromptEmbedding,
    ) -> Result<(Var<'t, T>, Var<'t, T>, Var<'t, T>, Var<'t, T>)> {
        let cfg = &self.config;
        self.check_latent(&xt.dims())?;
        let n = cfg.size * cfg.size;
        let x = xt.reshape(&[n, cfg.channels])?;

        let (w, b) = (cur.take(), cur.take());
        let mut h = x.conv3x3(w, b, self.geom(1))?;
        let (tw, tb, pw) = (cur.take(), cur.take(), cur.take());
        let pooled = tape.constant(sentence_vector(c).reshape(&[1, EMBED_DIM])?.cast::<T>());
        let temb = tape
            .constant(timestep_features(t, cfg.time_dim))
            .matmul(tw)?
            .add(pooled.matmul(pw)?)?
            .add_row(tb)?
            .silu();
        h = h.add_row(temb)?;

        for &d in &cfg.pre_dilations {
            h = self.res_block(cur, h, temb, d)?;
        }

        let (g, bias) = (cur.take(), cur.take());
        let (wq, wk, wv) = (cur.take(), cur.take(), cur.take());
        let q = h.layer_norm_rows()?.mul_row(g)?.add_row(bias)?.matmul(wq)?;
        let ctx = tape.constant(attended_context(c).cast::<T>());
        let k = ctx.layer_norm_rows()?.matmul(wk)?;
        let v = ctx.matmul(wv)?;
        let scale = T::cast_from(1.0 / (cfg.attn_dim as f64).sqrt());
        let attn = q.matmul_t(k)?.scale(scale).softmax_rows()?;
        Ok((h, temb, v, attn))
    }

    fn res_block<'t>(
        &self,
        cur: &mut Cursor<'_, 't, T>,
        h: Var<'t, T>,
        temb: Var<'t, T>,
        dilation: usize,
    ) -> Result<Var<'t, T>> {
        let (g, b, tw, w, wb) = (cur.take(), cur.take(), cur.take(), cur.take(), cur.take());
        let shift = temb.matmul(tw)?;
        let u = h
            .layer_norm_rows()?
            .mul_row(g)?
            .add_row(b)?
            .add_row(shift)?
            .silu();
        h.add(u.conv3x3(w, wb, self.geom(dilation))?)
    }

    /// Full forward pass recorded on `tape`.
    pub fn forward_vars<'t>(
        &self,
        tape: &'t Tape<T>,
        params: &ParamVars<'t, T>,
        xt: Var<'t, T>,
        t: usize,
        c: &PromptEmbedding,
    ) -> Result<ForwardVars<'t, T>> {
        let cfg = &self.config;
        let mut cur = Cursor {
            vars: &params.vars,
            next: 0,
        };
        let (mut h, temb, v, attn) = self.front(tape, &mut cur, xt, t, c)?;
        let wo = cur.take();
        h = h.add(attn.matmul(v)?.matmul(wo)?)?;
        for &d in &cfg.post_dilations {
            h = self.res_block(&mut cur, h, temb, d)?;
        }
        let (g, b, w, wb) = (cur.take(), cur.take(), cur.take(), cur.take());
        let out = h
            .layer_norm_rows()?
            .mul_row(g)?
            .add_row(b)?
            .silu()
            .conv3x3(w, wb, self.geom(1))?
            .reshape(&[cfg.size, cfg.size, cfg.channels])?;
        debug_assert_eq!(cur.next, params.vars.len());
        Ok(ForwardVars { eps: out, attention: attn })
    }

    /// Only the attention matrix; skips everything after the attention
    /// softmax.
    pub fn attention_var<'t>(
        &self,
        tape: &'t Tape<T>,
        params: &ParamVars<'t, T>,
        xt: Var<'t, T>,
        t: usize,
        c: &PromptEmbedding,
    ) -> Result<Var<'t, T>> {
        let mut cur = Cursor {
            vars: &params.vars,
            next: 0,
        };
        let (_, _, _, attn) = self.front(tape, &mut cur, xt, t, c)?;
        cur.skip(1 + BLOCK_PARAMS * self.config.post_dilations.len() + 4);
        debug_assert_eq!(cur.next, params.vars.len());
        Ok(attn)
    }

    /// Noise prediction and attention matrix as plain tensors.
    pub fn predict(&self, xt: &Tensor<T>, t: usize, c: &PromptEmbedding) -> Result<(Tensor<T>, Tensor<T>)> {
        let tape = Tape::new();
        let params = self.constant_params(&tape);
        let x = tape.constant(xt.clone());
        let out = self.forward_vars(&tape, &params, x, t, c)?;
        let eps = (*out.eps.value()).clone();
        let attn = (*out.attention.value()).clone();
        Ok((eps, attn))
    }
}

impl ToyDenoiser<f32> {
    /// `eps_theta(x_t, t, c)` with the captured attention map.
    pub fn denoise(&self, xt: &Tensor, t: usize, c: &PromptEmbedding) -> Result<DenoiserOutput> {
        let (eps_pred, matrix) = self.predict(xt, t, c)?;
        Ok(DenoiserOutput {
            eps_pred,
            attention: CrossAttentionMap {
                matrix,
                step: t,
                tag: MapTag::Input,
            },
        })
    }

    /// Noise prediction alone.
    pub fn eps(&self, xt: &Tensor, t: usize, c: &PromptEmbedding) -> Result<Tensor> {
        self.predict(xt, t, c).map(|(e, _)| e)
    }
}
