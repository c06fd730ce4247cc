//! A toy MM-DiT with seeded weights and a rectified-flow Euler sampler.
//!
//! Each layer pre-normalises text and image tokens (RMS), projects them to
//! per-stream q/k/v, runs joint attention over the concatenated sequence,
//! and adds the output projection back as a residual. A timestep embedding
//! is added to every token before the first layer. Velocity is a single
//! linear head over the final image tokens.
//!
//! The reference stream always uses vanilla attention; target streams share
//! at the layers selected by [`SharingConfig`].

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::position::StreamPositions;
use crate::refcache::RefFeatureCache;
use crate::sharing::{
    layer_policy, mm_attention, shared_attention, AttentionLayout, LayerRole, QkvBundle,
    SharingConfig,
};
use crate::tensor::{derive_seed, matmul, Matrix, Pcg32, TensorData};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub layers: usize,
    pub heads: usize,
    pub model_dim: usize,
    pub text_len: usize,
    pub grid: (usize, usize),
    pub latent_channels: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            layers: 8,
            heads: 4,
            model_dim: 64,
            text_len: 4,
            grid: (8, 8),
            latent_channels: 4,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn head_dim(&self) -> usize {
        self.model_dim / self.heads.max(1)
    }

    pub fn image_len(&self) -> usize {
        self.grid.0 * self.grid.1
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("layers", self.layers),
            ("heads", self.heads),
            ("model_dim", self.model_dim),
            ("text_len", self.text_len),
            ("grid height", self.grid.0),
            ("grid width", self.grid.1),
            ("latent_channels", self.latent_channels),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::validation(format!("{name} must be at least 1")));
        }
        if self.model_dim % self.heads != 0 {
            return Err(Error::validation(format!(
                "model_dim {} is not divisible by {} heads",
                self.model_dim, self.heads
            )));
        }
        if self.head_dim() % 2 != 0 {
            return Err(Error::validation(format!(
                "head dim {} must be even for rotary embeddings",
                self.head_dim()
            )));
        }
        Ok(())
    }

    /// Half-open layer ranges splitting the stack into three groups, the
    /// desk-scale stand-in for the 0-19 / 19-38 / 38-57 block grouping.
    pub fn layer_groups(&self) -> [(usize, usize); 3] {
        let b = |k: usize| k * self.layers / 3;
        [(b(0), b(1)), (b(1), b(2)), (b(2), b(3))]
    }
}

/// Projection matrices for one layer. Each is `d x d`, laid out as `H`
/// column blocks of width `d_k`, one per head.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerWeights {
    pub q_img: Matrix,
    pub k_img: Matrix,
    pub v_img: Matrix,
    pub q_txt: Matrix,
    pub k_txt: Matrix,
    pub v_txt: Matrix,
    pub out_img: Matrix,
    pub out_txt: Matrix,
}

impl LayerWeights {
    /// The six input projections in `q,k,v` x `img,txt` order.
    pub fn projections(&self) -> [&Matrix; 6] {
        [
            &self.q_img,
            &self.k_img,
            &self.v_img,
            &self.q_txt,
            &self.k_txt,
            &self.v_txt,
        ]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ToyDit {
    cfg: ModelConfig,
    layout: AttentionLayout,
    input: Matrix,
    head: Matrix,
    layers: Vec<LayerWeights>,
}

pub fn init_model(cfg: &ModelConfig) -> Result<ToyDit> {
    cfg.validate()?;
    let d = cfg.model_dim;
    let c = cfg.latent_channels;
    let mut rng = Pcg32::new(derive_seed(cfg.seed, "weights", 0));
    let scale = 1.0 / (d as f32).sqrt();
    let input = Matrix::random_normal(c, d, 1.0 / (c as f32).sqrt(), &mut rng);
    let head = Matrix::random_normal(d, c, scale, &mut rng);
    let layers = (0..cfg.layers)
        .map(|_| {
            let mut w = || Matrix::random_normal(d, d, scale, &mut rng);
            LayerWeights {
                q_img: w(),
                k_img: w(),
                v_img: w(),
                q_txt: w(),
                k_txt: w(),
                v_txt: w(),
                out_img: w(),
                out_txt: w(),
            }
        })
        .collect();
    Ok(ToyDit {
        cfg: cfg.clone(),
        layout: AttentionLayout::new(cfg.heads, cfg.head_dim())?,
        input,
        head,
        layers,
    })
}

/// Per-layer reference features consumed by shared layers.
pub trait ReferenceSource: Sync {
    fn bundle(&self, layer: usize) -> Option<&QkvBundle>;
}

impl ReferenceSource for [QkvBundle] {
    fn bundle(&self, layer: usize) -> Option<&QkvBundle> {
        self.get(layer)
    }
}

impl ReferenceSource for Vec<QkvBundle> {
    fn bundle(&self, layer: usize) -> Option<&QkvBundle> {
        self.get(layer)
    }
}

impl ReferenceSource for BTreeMap<usize, QkvBundle> {
    fn bundle(&self, layer: usize) -> Option<&QkvBundle> {
        self.get(&layer)
    }
}

/// How a stream's attention is wired for one forward pass.
#[derive(Clone, Copy)]
pub struct Wiring<'a> {
    pub sharing: &'a SharingConfig,
    pub positions: &'a StreamPositions,
    pub reference: Option<&'a dyn ReferenceSource>,
    /// Keep head-averaged attention weights of every layer.
    pub capture_attention: bool,
}

#[derive(Clone, Debug)]
pub struct ForwardOutput {
    /// Final `(M+N) x d` tokens, text first.
    pub tokens: Matrix,
    /// `N x c` velocity prediction.
    pub velocity: Matrix,
    /// This stream's q/k/v at every layer.
    pub bundles: Vec<QkvBundle>,
    /// Which attention each layer actually ran.
    pub roles: Vec<LayerRole>,
    /// Head-averaged weights per layer when captured.
    pub attention: Vec<Option<Matrix>>,
}

impl ToyDit {
    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn layout(&self) -> &AttentionLayout {
        &self.layout
    }

    pub fn layers(&self) -> &[LayerWeights] {
        &self.layers
    }

    /// Deterministic stand-in for encoded prompt tokens.
    pub fn prompt_tokens(&self, prompt_seed: u64) -> Matrix {
        let mut rng = Pcg32::new(derive_seed(prompt_seed, "prompt", 0));
        Matrix::random_normal(self.cfg.text_len, self.cfg.model_dim, 1.0, &mut rng)
    }

    /// Unconditional (empty prompt) tokens.
    pub fn empty_prompt(&self) -> Matrix {
        Matrix::zeros(self.cfg.text_len, self.cfg.model_dim)
    }

    pub fn forward(
        &self,
        latent: &Matrix,
        text: &Matrix,
        t: f32,
        wiring: &Wiring<'_>,
    ) -> Result<ForwardOutput> {
        let cfg = &self.cfg;
        let (m, n, d) = (cfg.text_len, cfg.image_len(), cfg.model_dim);
        if latent.shape() != (n, cfg.latent_channels) {
            return Err(Error::shape(format!(
                "latent is {:?}, model expects {:?}",
                latent.shape(),
                (n, cfg.latent_channels)
            )));
        }
        if text.shape() != (m, d) {
            return Err(Error::shape(format!(
                "text tokens are {:?}, model expects {:?}",
                text.shape(),
                (m, d)
            )));
        }
        let roles: Vec<LayerRole> = (0..cfg.layers)
            .map(|l| layer_policy(l, wiring.sharing))
            .collect();
        for (l, role) in roles.iter().enumerate() {
            if *role == LayerRole::Shared && wiring.reference.and_then(|r| r.bundle(l)).is_none() {
                return Err(Error::config(format!(
                    "layer {l} shares attention but no reference features were supplied for it"
                )));
            }
        }

        let temb = timestep_embedding(t, d);
        let mut img = matmul(latent, &self.input)?.add_row_vector(&temb)?;
        let mut txt = text.add_row_vector(&temb)?;
        let mut bundles = Vec::with_capacity(cfg.layers);
        let mut attention = Vec::with_capacity(cfg.layers);

        for (l, w) in self.layers.iter().enumerate() {
            let nt = rms_norm(&txt);
            let ni = rms_norm(&img);
            let bundle = QkvBundle::new(
                matmul(&nt, &w.q_txt)?,
                matmul(&nt, &w.k_txt)?,
                matmul(&nt, &w.v_txt)?,
                matmul(&ni, &w.q_img)?,
                matmul(&ni, &w.k_img)?,
                matmul(&ni, &w.v_img)?,
            )?;
            let out = match roles[l] {
                LayerRole::Vanilla => mm_attention(&bundle, wiring.positions, &self.layout)?,
                LayerRole::Shared => shared_attention(
                    &bundle,
                    wiring.reference.and_then(|r| r.bundle(l)),
                    wiring.sharing,
                    wiring.positions,
                    &self.layout,
                )?,
            };
            attention.push(wiring.capture_attention.then(|| out.mean_weights()));
            txt = txt.add(&matmul(&out.output.slice_rows(0, m)?, &w.out_txt)?)?;
            img = img.add(&matmul(&out.output.slice_rows(m, m + n)?, &w.out_img)?)?;
            bundles.push(bundle);
        }

        let velocity = matmul(&rms_norm(&img), &self.head)?;
        velocity.ensure_finite("velocity")?;
        Ok(ForwardOutput {
            tokens: Matrix::vstack(&[&txt, &img])?,
            velocity,
            bundles,
            roles,
            attention,
        })
    }
}

fn rms_norm(x: &Matrix) -> Matrix {
    let mut out = x.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let ms = row.iter().map(|&v| v as f64 * v as f64).sum::<f64>() / row.len() as f64;
        let inv = 1.0 / (ms + 1e-6).sqrt();
        row.iter_mut().for_each(|v| *v = (*v as f64 * inv) as f32);
    }
    out
}

/// Sinusoidal embedding of `1000 t`: sines in the first half, cosines in the
/// second.
pub fn timestep_embedding(t: f32, dim: usize) -> Vec<f32> {
    let half = dim / 2;
    let x = 1000.0 * t as f64;
    let mut out = vec![0.0f32; dim];
    for k in 0..half {
        let freq = 10_000f64.powf(-(k as f64) / half as f64);
        out[k] = (x * freq).sin() as f32;
        out[half + k] = (x * freq).cos() as f32;
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub steps: usize,
    pub cfg_scale: f32,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            steps: 30,
            cfg_scale: 3.5,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::validation("sampler needs at least one step"));
        }
        if !(self.cfg_scale >= 0.0 && self.cfg_scale.is_finite()) {
            return Err(Error::validation(format!(
                "guidance scale must be non-negative, got {}",
                self.cfg_scale
            )));
        }
        Ok(())
    }
}

/// `t_k = 1 - k/T` for `k = 0..=T`.
pub fn time_grid(steps: usize) -> Vec<f32> {
    (0..=steps)
        .map(|k| ((steps - k) as f64 / steps as f64) as f32)
        .collect()
}

/// `v_uncond + s (v_cond - v_uncond)`.
pub fn cfg_combine(v_uncond: &Matrix, v_cond: &Matrix, s: f32) -> Result<Matrix> {
    v_uncond.add(&v_cond.sub(v_uncond)?.scale(s))
}

/// `x - dt * v`.
pub fn euler_step(x: &Matrix, v: &Matrix, dt: f32) -> Result<Matrix> {
    x.sub(&v.scale(dt))
}

/// States `x_{t_0} .. x_{t_T}` of one stream, noise first.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub states: Vec<Matrix>,
}

impl Trajectory {
    pub fn last(&self) -> &Matrix {
        self.states.last().expect("trajectory is never empty")
    }

    /// `[T+1, N, c]` tensor.
    pub fn to_tensor(&self) -> TensorData {
        let (r, c) = self.states[0].shape();
        TensorData::F32 {
            dims: vec![self.states.len(), r, c],
            values: self.states.iter().flat_map(|m| m.data().iter().copied()).collect(),
        }
    }

    pub fn from_tensor(tensor: TensorData) -> Result<Self> {
        let (dims, values) = tensor.into_f32()?;
        if dims.len() != 3 || dims[0] == 0 {
            return Err(Error::Format(format!("trajectory dims {dims:?}")));
        }
        let states = values
            .chunks_exact(dims[1] * dims[2])
            .map(|c| Matrix::new(dims[1], dims[2], c.to_vec()))
            .collect::<Result<_>>()?;
        Ok(Self { states })
    }
}

/// Anything that predicts a velocity for state `x` at time `t` (step index
/// `step` of the grid).
pub trait VelocityField {
    fn velocity(&mut self, x: &Matrix, t: f32, step: usize) -> Result<Matrix>;
}

impl<F> VelocityField for F
where
    F: FnMut(&Matrix, f32, usize) -> Result<Matrix>,
{
    fn velocity(&mut self, x: &Matrix, t: f32, step: usize) -> Result<Matrix> {
        self(x, t, step)
    }
}

/// Euler integration from `t = 1` (noise) to `t = 0` on a uniform grid.
pub fn rf_sample(
    field: &mut impl VelocityField,
    noise: Matrix,
    sampler: &SamplerConfig,
) -> Result<Trajectory> {
    sampler.validate()?;
    let grid = time_grid(sampler.steps);
    let mut states = Vec::with_capacity(grid.len());
    states.push(noise);
    for step in 0..sampler.steps {
        let x = &states[step];
        let v = field.velocity(x, grid[step], step)?;
        let next = euler_step(x, &v, grid[step] - grid[step + 1])?;
        states.push(next);
    }
    Ok(Trajectory { states })
}

/// Where shared layers get their reference features from.
#[derive(Clone, Copy)]
pub enum ReferenceInput<'a> {
    /// A reference stream sampled alongside the targets.
    Live,
    /// Features cached from an external latent.
    Cached(&'a RefFeatureCache),
}

#[derive(Clone, Copy, Debug)]
pub struct GenerateSpec {
    pub targets: usize,
    pub seed: u64,
    /// Capture target 0's conditional attention weights at this step.
    pub capture_step: Option<usize>,
}

#[derive(Clone, Debug)]
pub struct CapturedAttention {
    pub step: usize,
    /// Latents of the reference (if live) and target 0 at the captured step.
    pub target_latent: Matrix,
    /// Head-averaged weights per layer.
    pub layers: Vec<Matrix>,
    pub roles: Vec<LayerRole>,
}

#[derive(Clone, Debug)]
pub struct Generation {
    pub reference: Option<Trajectory>,
    pub targets: Vec<Trajectory>,
    pub captured: Option<CapturedAttention>,
}

/// Seeds of the toy prompts and initial noise. Index 0 is the reference.
pub fn stream_prompt_seed(seed: u64, stream: usize) -> u64 {
    derive_seed(seed, "prompt", stream as u64)
}

pub fn stream_noise(model: &ToyDit, seed: u64, stream: usize) -> Matrix {
    let cfg = model.config();
    let mut rng = Pcg32::new(derive_seed(seed, "noise", stream as u64));
    Matrix::random_normal(cfg.image_len(), cfg.latent_channels, 1.0, &mut rng)
}

/// Samples a reference stream (or replays cached features) and `targets`
/// target streams in lockstep with classifier-free guidance. Deterministic
/// in all inputs; targets are processed in parallel.
pub fn generate(
    model: &ToyDit,
    sampler: &SamplerConfig,
    sharing: &SharingConfig,
    reference: ReferenceInput<'_>,
    spec: &GenerateSpec,
) -> Result<Generation> {
    sampler.validate()?;
    let cfg = model.config();
    sharing.validate(cfg.layers)?;
    if spec.targets == 0 {
        return Err(Error::validation("need at least one target stream"));
    }
    if let ReferenceInput::Cached(cache) = reference {
        if cache.steps() != sampler.steps {
            return Err(Error::config(format!(
                "reference cache covers {} steps, sampler runs {}",
                cache.steps(),
                sampler.steps
            )));
        }
    }
    let positions = StreamPositions::new(cfg.grid, cfg.text_len, sharing.shift)?;
    let vanilla = SharingConfig::vanilla();
    let empty = model.empty_prompt();
    let grid = time_grid(sampler.steps);
    let s = sampler.cfg_scale;

    let mut ref_state = match reference {
        ReferenceInput::Live => Some((
            model.prompt_tokens(stream_prompt_seed(spec.seed, 0)),
            vec![stream_noise(model, spec.seed, 0)],
        )),
        ReferenceInput::Cached(_) => None,
    };
    let mut targets: Vec<(Matrix, Vec<Matrix>)> = (1..=spec.targets)
        .map(|k| {
            (
                model.prompt_tokens(stream_prompt_seed(spec.seed, k)),
                vec![stream_noise(model, spec.seed, k)],
            )
        })
        .collect();
    let mut captured = None;

    for step in 0..sampler.steps {
        let (t, dt) = (grid[step], grid[step] - grid[step + 1]);

        // Reference features for this step: (conditional, unconditional).
        let live_bundles;
        let (ref_cond, ref_uncond): (&dyn ReferenceSource, &dyn ReferenceSource) = match reference {
            ReferenceInput::Live => {
                let (text, states) = ref_state.as_mut().expect("live reference state");
                let x = states.last().unwrap();
                let wiring = Wiring {
                    sharing: &vanilla,
                    positions: &positions,
                    reference: None,
                    capture_attention: false,
                };
                let cond = model.forward(x, text, t, &wiring)?;
                let uncond = model.forward(x, &empty, t, &wiring)?;
                let v = cfg_combine(&uncond.velocity, &cond.velocity, s)?;
                let next = euler_step(x, &v, dt)?;
                states.push(next);
                live_bundles = (cond.bundles, uncond.bundles);
                (&live_bundles.0, &live_bundles.1)
            }
            ReferenceInput::Cached(cache) => {
                let feats = cache.at(sampler.steps - step)?;
                (feats, feats)
            }
        };

        let results: Vec<Result<(Matrix, Option<ForwardOutput>)>> = targets
            .par_iter()
            .enumerate()
            .map(|(k, (text, states))| {
                let x = states.last().unwrap();
                let capture = k == 0 && spec.capture_step == Some(step);
                let cond = model.forward(
                    x,
                    text,
                    t,
                    &Wiring {
                        sharing,
                        positions: &positions,
                        reference: Some(ref_cond),
                        capture_attention: capture,
                    },
                )?;
                let uncond = model.forward(
                    x,
                    &empty,
                    t,
                    &Wiring {
                        sharing,
                        positions: &positions,
                        reference: Some(ref_uncond),
                        capture_attention: false,
                    },
                )?;
                let v = cfg_combine(&uncond.velocity, &cond.velocity, s)?;
                Ok((euler_step(x, &v, dt)?, capture.then_some(cond)))
            })
            .collect();
        for ((_, states), res) in targets.iter_mut().zip(results) {
            let (next, cap) = res?;
            if let Some(out) = cap {
                captured = Some(CapturedAttention {
                    step,
                    target_latent: states.last().unwrap().clone(),
                    layers: out.attention.into_iter().map(|a| a.unwrap()).collect(),
                    roles: out.roles,
                });
            }
            states.push(next);
        }
    }

    Ok(Generation {
        reference: ref_state.map(|(_, states)| Trajectory { states }),
        targets: targets
            .into_iter()
            .map(|(_, states)| Trajectory { states })
            .collect(),
        captured,
    })
}
