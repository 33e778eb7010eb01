//! Toy latent-grid denoiser hosting the extractor and fusion module, the
//! noise schedule, and ancestral sampling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::checkpoint::{Checkpoint, CheckpointError};
use crate::condition::GenerationCondition;
use crate::dfm::{
    assign_visual_membership, build_instance_mask, fuse_grounding, masked_attention_blocksparse,
    masked_gated_attention_with_weights, DfmConfig, DfmLayer, Grounding, InstanceMask,
};
use crate::geometry::BoundingBox;
use crate::ide::{ide_forward_with_weights, IdeConfig, IdeParameters};
use crate::layers::{Attention, FeedForward, Linear};
use crate::params::{Init, ParamStore};
use crate::synth::latent::LatentCodec;
use crate::synth::render::Raster;
use crate::tensor::{no_grad, sinusoidal_embedding, Tensor, TensorError};
use crate::text::{TextConfig, TextEncoder, TextError, TextFeatureBatch, TokenVocab};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Text(#[from] TextError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("checkpoint was written with a different model config: {0}")]
    ConfigMismatch(String),
}

pub type Result<T, E = ModelError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskMode {
    /// Instance-partitioned mask.
    Instance,
    /// All-zero mask (ablation).
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiffusionConfig {
    pub grid_h: usize,
    pub grid_w: usize,
    /// Pixels per latent cell side; latent channels are `3 * patch^2`.
    pub patch: usize,
    pub d_model: usize,
    pub blocks: usize,
    pub heads: usize,
    pub ff_mult: usize,
    pub t_max: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    /// Per-block fusion switch; empty enables every block.
    pub dfm_blocks: Vec<bool>,
    pub mask: MaskMode,
    /// Box flag fed to the grounding (false selects the null embedding).
    pub grounded: bool,
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        Self {
            grid_h: 16,
            grid_w: 16,
            patch: 2,
            d_model: 64,
            blocks: 4,
            heads: 4,
            ff_mult: 2,
            t_max: 200,
            beta_start: 1e-4,
            beta_end: 0.02,
            dfm_blocks: Vec::new(),
            mask: MaskMode::Instance,
            grounded: true,
        }
    }
}

impl DiffusionConfig {
    pub fn n_visual(&self) -> usize {
        self.grid_h * self.grid_w
    }

    pub fn dfm_enabled(&self, block: usize) -> bool {
        self.dfm_blocks.get(block).copied().unwrap_or(self.dfm_blocks.is_empty())
    }
}

/// Everything that shapes the parameter set and the forward pass.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub text_sim: TextConfig,
    pub ide: IdeConfig,
    pub dfm: DfmConfig,
    pub diffusion: DiffusionConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            text_sim: TextConfig::default(),
            ide: IdeConfig::default(),
            dfm: DfmConfig::default(),
            diffusion: DiffusionConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let d = &self.diffusion;
        let fail = |m: String| Err(ModelError::Config(m));
        self.text_sim.validate()?;
        self.ide.validate(self.text_sim.channels, self.text_sim.max_tokens)?;
        if d.d_model != self.text_sim.channels {
            return fail(format!(
                "diffusion.d_model ({}) must equal text_sim.channels ({})",
                d.d_model, self.text_sim.channels
            ));
        }
        if d.grid_h == 0 || d.grid_w == 0 || d.patch == 0 || d.blocks == 0 || d.t_max == 0 {
            return fail("grid, patch, blocks and t_max must be >= 1".into());
        }
        if d.heads == 0 || d.d_model % d.heads != 0 || self.dfm.heads == 0 || d.d_model % self.dfm.heads != 0 {
            return fail("d_model must be divisible by diffusion.heads and dfm.heads".into());
        }
        if d.d_model % 4 != 0 {
            return fail("d_model must be a multiple of 4".into());
        }
        if !(0.0 < d.beta_start && d.beta_start <= d.beta_end && d.beta_end < 1.0) {
            return fail("need 0 < beta_start <= beta_end < 1".into());
        }
        if !d.dfm_blocks.is_empty() && d.dfm_blocks.len() != d.blocks {
            return fail("diffusion.dfm_blocks must be empty or list one flag per block".into());
        }
        if self.dfm.n_freqs == 0 || self.dfm.n_freqs > 30 {
            return fail("dfm.n_freqs must lie in 1..=30".into());
        }
        Ok(())
    }
}

/// Linear beta schedule with cumulative products.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    pub betas: Vec<f64>,
    pub alphas: Vec<f64>,
    pub alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    pub fn linear(t_max: usize, beta_start: f64, beta_end: f64) -> Self {
        let betas: Vec<f64> = (0..t_max)
            .map(|t| {
                if t_max == 1 {
                    beta_start
                } else {
                    beta_start + (beta_end - beta_start) * t as f64 / (t_max - 1) as f64
                }
            })
            .collect();
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let alpha_bars = alphas
            .iter()
            .scan(1.0, |acc, a| {
                *acc *= a;
                Some(*acc)
            })
            .collect();
        Self { betas, alphas, alpha_bars }
    }

    pub fn t_max(&self) -> usize {
        self.betas.len()
    }

    fn check(&self, t: usize) -> Result<(), TensorError> {
        if t >= self.t_max() {
            return Err(TensorError::InvalidArgument {
                op: "noise schedule",
                msg: format!("timestep {t} outside 0..{}", self.t_max()),
            });
        }
        Ok(())
    }

    /// `sqrt(abar_t) * x0 + sqrt(1 - abar_t) * eps`
    pub fn add_noise(&self, x0: &[f64], eps: &[f64], t: usize) -> Result<Vec<f64>, TensorError> {
        self.check(t)?;
        let ab = self.alpha_bars[t];
        let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
        Ok(x0.iter().zip(eps).map(|(x, e)| a * x + b * e).collect())
    }

    /// Inverts [`add_noise`](Self::add_noise) for `x0`.
    pub fn predict_x0(&self, x_t: &[f64], eps: &[f64], t: usize) -> Result<Vec<f64>, TensorError> {
        self.check(t)?;
        let ab = self.alpha_bars[t];
        let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
        Ok(x_t.iter().zip(eps).map(|(x, e)| (x - b * e) / a).collect())
    }
}

#[derive(Debug, Clone)]
pub struct BackboneBlock {
    pub self_attn: Attention,
    pub dfm: DfmLayer,
    pub cross_attn: Attention,
    pub ff: FeedForward,
}

#[derive(Debug, Clone)]
pub struct Backbone {
    pub patch_in: Linear,
    pub time_in: Linear,
    pub time_out: Linear,
    pub blocks: Vec<BackboneBlock>,
    pub unembed: Linear,
    /// Fixed 2-D sinusoidal positions `(1, n_visual, d_model)`.
    pub positions: Tensor,
}

/// Row/column sinusoidal positions, row code in the first half of channels.
fn grid_positions(h: usize, w: usize, d: usize) -> Tensor {
    let half = d / 2;
    let quarter = half / 2;
    let code = |p: usize, out: &mut [f64]| {
        for k in 0..quarter {
            let f = (-(100f64).ln() * k as f64 / quarter as f64).exp();
            out[k] = (p as f64 * f).sin();
            out[quarter + k] = (p as f64 * f).cos();
        }
    };
    let mut data = vec![0.0; h * w * d];
    for r in 0..h {
        for c in 0..w {
            let row = &mut data[(r * w + c) * d..(r * w + c + 1) * d];
            code(r, &mut row[..half]);
            code(c, &mut row[half..]);
        }
    }
    Tensor::new(data, &[1, h * w, d]).expect("position shape")
}

/// A condition with its frozen text features and instance mask resolved.
#[derive(Debug, Clone)]
pub struct PreparedCondition {
    pub text: TextFeatureBatch,
    pub boxes: Vec<BoundingBox>,
    pub flags: Vec<bool>,
    pub mask: InstanceMask,
    /// Global prompt features with padding removed `(1, len, C)`.
    pub global: Tensor,
}

/// Which path the fusion module takes in a forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FusionPath {
    /// Skip the extractor and fusion entirely (closed gates, pretraining).
    Skip,
    Dense,
    /// Block-sparse kernel; only valid without gradients.
    BlockSparse,
}

/// Attention maps captured during one forward pass.
#[derive(Debug, Clone, Default)]
pub struct AttentionTrace {
    /// Per extractor layer `(1, N, heads, S, S + S_tau)`.
    pub ide: Vec<Tensor>,
    /// Per enabled backbone block `(1, heads, L, L)`.
    pub dfm: Vec<(usize, Tensor)>,
    /// Block-skip ratio per block when the sparse path ran.
    pub skip_ratios: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct DeigModel {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub text: TextEncoder,
    pub ide: IdeParameters,
    pub grounding: Grounding,
    pub backbone: Backbone,
    pub schedule: NoiseSchedule,
    pub codec: LatentCodec,
}

pub const VOCAB_ENTRY: &str = "text_sim.vocab";
pub const CONFIG_ENTRY: &str = "model.config";
const FUSION_STREAM: u64 = 0x5eed_f00d_d15c_0001;

impl DeigModel {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        Self::with_vocab(config, seed, TokenVocab::default())
    }

    fn with_vocab(config: ModelConfig, seed: u64, vocab: TokenVocab) -> Result<Self> {
        config.validate()?;
        let d = &config.diffusion;
        let c = config.text_sim.channels;
        let codec = LatentCodec::new(d.grid_h, d.grid_w, d.patch);
        let c_img = codec.channels();
        let mut store = ParamStore::new();
        // separate streams keep the backbone init independent of the ide/dfm configs
        let mut init = Init::new(seed);
        let mut fusion_init = Init::new(seed ^ FUSION_STREAM);
        let ide = IdeParameters::new(&mut store, &mut fusion_init, &config.ide, c, config.text_sim.max_tokens, d.t_max)?;
        let grounding = Grounding::new(&mut store, &mut fusion_init, config.dfm.n_freqs, c)?;
        let dm = d.d_model;
        let patch_in = Linear::new(&mut store, &mut init, "backbone.patch_embed", c_img, dm)?;
        let time_in = Linear::new(&mut store, &mut init, "backbone.time_mlp.0", dm, dm)?;
        let time_out = Linear::new(&mut store, &mut init, "backbone.time_mlp.1", dm, dm)?;
        let blocks = (0..d.blocks)
            .map(|k| {
                let p = format!("backbone.block{k}");
                Ok(BackboneBlock {
                    self_attn: Attention::new(&mut store, &mut init, &format!("{p}.selfattn"), dm, dm, d.heads, false)?,
                    dfm: DfmLayer::new(&mut store, &mut fusion_init, &format!("dfm.block{k}"), dm, config.dfm.heads)?,
                    cross_attn: Attention::new(&mut store, &mut init, &format!("{p}.crossattn"), dm, c, d.heads, false)?,
                    ff: FeedForward::new(&mut store, &mut init, &format!("{p}.ff"), dm, d.ff_mult * dm, false)?,
                })
            })
            .collect::<Result<Vec<_>, TensorError>>()?;
        let unembed = Linear::zeroed(&mut store, "backbone.unembed", dm, c_img)?;
        let backbone = Backbone {
            patch_in,
            time_in,
            time_out,
            blocks,
            unembed,
            positions: grid_positions(d.grid_h, d.grid_w, dm),
        };
        let schedule = NoiseSchedule::linear(d.t_max, d.beta_start, d.beta_end);
        let text = TextEncoder::with_vocab(config.text_sim.clone(), vocab)?;
        Ok(Self {
            config,
            store,
            text,
            ide,
            grounding,
            backbone,
            schedule,
            codec,
        })
    }

    pub fn latent_shape(&self) -> [usize; 4] {
        self.codec.latent_shape()
    }

    pub fn prepare(&self, cond: &GenerationCondition) -> Result<PreparedCondition> {
        let text = self.text.encode_condition(cond)?;
        let d = &self.config.diffusion;
        let boxes = cond.boxes();
        let membership = assign_visual_membership(&boxes, d.grid_h, d.grid_w);
        let mut mask = build_instance_mask(&membership, boxes.len(), self.config.ide.s);
        if d.mask == MaskMode::None {
            mask = mask.unmasked();
        }
        let global = text.global.slice(1, 0, text.global_length)?;
        Ok(PreparedCondition {
            flags: vec![d.grounded; boxes.len()],
            boxes,
            mask,
            global,
            text,
        })
    }

    /// Grounded instance tokens `(1, N, S, C)` at timestep `t`.
    pub fn grounded_tokens(&self, store: &ParamStore, cond: &PreparedCondition, t: usize, trace: Option<&mut AttentionTrace>) -> Result<Tensor> {
        let (e_ase, weights) = ide_forward_with_weights(store, &self.ide, &cond.text.features, Some(&cond.text.lengths), t)?;
        if let Some(tr) = trace {
            tr.ide = weights;
        }
        Ok(fuse_grounding(store, &self.grounding, &e_ase, &cond.boxes, &cond.flags)?)
    }

    /// Predicts the noise in `x_t: (1, grid_h, grid_w, C_img)` using the
    /// parameters in `store`.
    pub fn denoise_with(
        &self,
        store: &ParamStore,
        x_t: &Tensor,
        t: usize,
        cond: &PreparedCondition,
        path: FusionPath,
        mut trace: Option<&mut AttentionTrace>,
    ) -> Result<Tensor> {
        let shape = self.latent_shape();
        if x_t.shape() != shape {
            return Err(TensorError::ShapeMismatch {
                op: "denoiser_forward",
                lhs: x_t.shape().to_vec(),
                rhs: shape.to_vec(),
            }
            .into());
        }
        self.schedule.check(t)?;
        let d = &self.config.diffusion;
        let bb = &self.backbone;
        let n_visual = d.n_visual();
        let tokens = x_t.reshape(&[1, n_visual, shape[3]])?;
        let temb = sinusoidal_embedding(&Tensor::scalar(t as f64), d.d_model)?;
        let temb = bb.time_out.forward(store, &bb.time_in.forward(store, &temb)?.silu())?;
        let mut x = bb.patch_in.forward(store, &tokens)?.add(&bb.positions)?.add(&temb)?;
        let grounded = match path {
            FusionPath::Skip => None,
            _ => Some(self.grounded_tokens(store, cond, t, trace.as_deref_mut())?),
        };
        for (k, block) in bb.blocks.iter().enumerate() {
            let h = x.layer_norm(1e-6);
            x = x.add(&block.self_attn.forward(store, &h, &h, None)?)?;
            if let (Some(g), true) = (&grounded, d.dfm_enabled(k)) {
                x = match path {
                    FusionPath::BlockSparse => {
                        let (out, skip) = masked_attention_blocksparse(store, &block.dfm, &x, g, &cond.mask)?;
                        if let Some(tr) = trace.as_deref_mut() {
                            tr.skip_ratios.push(skip);
                        }
                        out
                    }
                    _ => {
                        let (out, w) = masked_gated_attention_with_weights(store, &block.dfm, &x, g, &cond.mask)?;
                        if let Some(tr) = trace.as_deref_mut() {
                            tr.dfm.push((k, w));
                        }
                        out
                    }
                };
            }
            x = x.add(&block.cross_attn.forward(store, &x.layer_norm(1e-6), &cond.global, None)?)?;
            x = x.add(&block.ff.forward(store, &x.layer_norm(1e-6))?)?;
        }
        let out = bb.unembed.forward(store, &x.layer_norm(1e-6))?;
        Ok(out.reshape(&shape)?)
    }

    pub fn denoise(&self, x_t: &Tensor, t: usize, cond: &PreparedCondition, path: FusionPath) -> Result<Tensor> {
        self.denoise_with(&self.store, x_t, t, cond, path, None)
    }

    /// Gradient-free path used for sampling.
    pub fn inference_path(&self) -> FusionPath {
        if self.config.dfm.use_blocksparse {
            FusionPath::BlockSparse
        } else {
            FusionPath::Dense
        }
    }

    /// Ancestral sampling from pure noise, clipping the predicted clean
    /// image to the valid pixel range at each step.
    pub fn sample(&self, cond: &GenerationCondition, seed: u64) -> Result<Raster> {
        let prepared = self.prepare(cond)?;
        let latent = self.sample_latent(&prepared, seed)?;
        Ok(self.codec.decode(&Tensor::new(latent, &self.latent_shape())?).expect("codec shape"))
    }

    pub fn sample_latent(&self, cond: &PreparedCondition, seed: u64) -> Result<Vec<f64>> {
        let shape = self.latent_shape();
        let numel: usize = shape.iter().product();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut normal = move || -> Vec<f64> { (0..numel).map(|_| StandardNormal.sample(&mut rng)).collect() };
        let mut x = normal();
        let sch = &self.schedule;
        let path = self.inference_path();
        no_grad(|| {
            for t in (0..sch.t_max()).rev() {
                let eps = self.denoise(&Tensor::new(x.clone(), &shape)?, t, cond, path)?;
                let x0 = sch.predict_x0(&x, eps.data(), t)?;
                let pixels: Vec<f64> = self.codec.decode_values(&x0).into_iter().map(|v| v.clamp(-1.0, 1.0)).collect();
                let x0 = self.codec.encode_values(&pixels);
                let (ab, b) = (sch.alpha_bars[t], sch.betas[t]);
                let ab_prev = if t == 0 { 1.0 } else { sch.alpha_bars[t - 1] };
                let c0 = ab_prev.sqrt() * b / (1.0 - ab);
                let ct = sch.alphas[t].sqrt() * (1.0 - ab_prev) / (1.0 - ab);
                let mut next: Vec<f64> = x0.iter().zip(&x).map(|(a, xt)| c0 * a + ct * xt).collect();
                if t > 0 {
                    let sigma = ((1.0 - ab_prev) / (1.0 - ab) * b).sqrt();
                    for (v, z) in next.iter_mut().zip(normal()) {
                        *v += sigma * z;
                    }
                }
                x = next;
            }
            Ok(x)
        })
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::from_store(&self.store);
        ck.push_bytes(VOCAB_ENTRY, &self.text.vocab().to_bytes());
        let cfg = serde_json::to_string(&self.config).expect("config serializes");
        ck.push_bytes(CONFIG_ENTRY, cfg.as_bytes());
        ck
    }

    /// Model config stored in a checkpoint.
    pub fn checkpoint_config(ck: &Checkpoint) -> Result<ModelConfig> {
        let entry = ck
            .get(CONFIG_ENTRY)
            .ok_or_else(|| CheckpointError::Missing(CONFIG_ENTRY.into()))?;
        let bytes = entry.to_bytes()?;
        serde_json::from_slice(&bytes).map_err(|e| ModelError::Config(format!("checkpoint config: {e}")))
    }

    /// Rebuilds a model from a checkpoint. When `expected` is given, it must
    /// match the stored config exactly.
    pub fn from_checkpoint(ck: &Checkpoint, expected: Option<&ModelConfig>) -> Result<Self> {
        let config = Self::checkpoint_config(ck)?;
        if let Some(e) = expected {
            if e != &config {
                return Err(ModelError::ConfigMismatch(config_diff(e, &config)));
            }
        }
        let vocab = match ck.get(VOCAB_ENTRY) {
            Some(v) => TokenVocab::from_bytes(&v.to_bytes()?)?,
            None => return Err(CheckpointError::Missing(VOCAB_ENTRY.into()).into()),
        };
        let mut model = Self::with_vocab(config, 0, vocab)?;
        ck.load_into(&mut model.store)?;
        Ok(model)
    }
}

/// Names the top-level config sections that differ.
fn config_diff(a: &ModelConfig, b: &ModelConfig) -> String {
    let mut out = Vec::new();
    if a.text_sim != b.text_sim {
        out.push("text_sim");
    }
    if a.ide != b.ide {
        out.push("ide");
    }
    if a.dfm != b.dfm {
        out.push("dfm");
    }
    if a.diffusion != b.diffusion {
        out.push("diffusion");
    }
    format!("sections differ: {}", out.join(", "))
}


#[cfg(test)]
mod tests {
    use super::tests_support::tiny_config;
    use super::*;

    fn cond(a: &str, b: &str) -> GenerationCondition {
        GenerationCondition::new(vec![
            (BoundingBox::new(0.0, 0.0, 0.5, 1.0).unwrap(), a.into()),
            (BoundingBox::new(0.5, 0.0, 1.0, 1.0).unwrap(), b.into()),
        ])
    }

    #[test]
    fn schedule_sanity() {
        let s = NoiseSchedule::linear(200, 1e-4, 0.02);
        assert!(s.alpha_bars.windows(2).all(|w| w[1] < w[0]));
        assert!((s.alpha_bars[0] - (1.0 - 1e-4)).abs() < 1e-15);
        for ab in &s.alpha_bars {
            assert!((ab.sqrt().powi(2) + (1.0 - ab) - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn add_noise_inverts() {
        let s = NoiseSchedule::linear(10, 1e-3, 0.3);
        let x0 = [0.3, -0.7, 1.0];
        let eps = [1.2, 0.1, -0.5];
        let xt = s.add_noise(&x0, &eps, 7).unwrap();
        let back = s.predict_x0(&xt, &eps, 7).unwrap();
        for (a, b) in x0.iter().zip(&back) {
            assert!((a - b).abs() < 1e-10);
        }
        assert_eq!(s.add_noise(&[0.0], &[2.0], 3).unwrap()[0], (1.0 - s.alpha_bars[3]).sqrt() * 2.0);
        assert!(s.add_noise(&x0, &eps, 10).is_err());
    }

    #[test]
    fn closed_gates_ignore_condition() {
        let m = DeigModel::new(tiny_config(), 1).unwrap();
        let x = Tensor::new(Init::new(2).normal(12, 1.0), &m.latent_shape()).unwrap();
        let (a, b) = (m.prepare(&cond("a red cup", "a blue box")).unwrap(), m.prepare(&cond("a gold bag", "a pink vase")).unwrap());
        let ya = m.denoise(&x, 3, &a, FusionPath::Dense).unwrap();
        assert_eq!(ya.shape(), x.shape());
        assert_eq!(ya.data(), m.denoise(&x, 3, &b, FusionPath::Dense).unwrap().data());
        assert_eq!(ya.data(), m.denoise(&x, 3, &a, FusionPath::Skip).unwrap().data());
    }

    #[test]
    fn open_gates_see_condition_and_time() {
        let mut m = DeigModel::new(tiny_config(), 1).unwrap();
        let ids: Vec<_> = m.store.ids().collect();
        let mut init = Init::new(9);
        for id in ids {
            let n = m.store.get(id).numel();
            m.store.set_data(id, init.normal(n, 0.5)).unwrap();
        }
        let x = Tensor::new(init.normal(12, 1.0), &m.latent_shape()).unwrap();
        let (a, b) = (m.prepare(&cond("a red cup", "a blue box")).unwrap(), m.prepare(&cond("a gold bag", "a pink vase")).unwrap());
        let ya = m.denoise(&x, 3, &a, FusionPath::Dense).unwrap();
        assert_ne!(ya.data(), m.denoise(&x, 3, &b, FusionPath::Dense).unwrap().data());
        let mut tr = AttentionTrace::default();
        let yb = m.denoise_with(&m.store, &x, 3, &a, FusionPath::BlockSparse, Some(&mut tr)).unwrap();
        let dev = ya.data().iter().zip(yb.data()).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max);
        assert!(dev < 1e-12);
        assert!(tr.skip_ratios.iter().all(|s| *s > 0.0));
        // extractor time-awareness reaches the output through the fused path only
        let g3 = m.grounded_tokens(&m.store, &a, 3, None).unwrap();
        let g4 = m.grounded_tokens(&m.store, &a, 4, None).unwrap();
        assert_ne!(g3.data(), g4.data());
    }

    #[test]
    fn sampling_deterministic_and_single_step() {
        let m = DeigModel::new(tiny_config(), 1).unwrap();
        let c = cond("a red cup", "a blue box");
        assert_eq!(m.sample(&c, 4).unwrap(), m.sample(&c, 4).unwrap());
        let mut cfg = tiny_config();
        cfg.diffusion.t_max = 1;
        let one = DeigModel::new(cfg, 1).unwrap();
        assert_eq!(one.sample(&c, 4).unwrap().pixels.len(), 4);
    }

    #[test]
    fn checkpoint_roundtrip_and_mismatch() {
        let m = DeigModel::new(tiny_config(), 1).unwrap();
        let ck = Checkpoint::from_bytes(&m.to_checkpoint().to_bytes()).unwrap();
        let back = DeigModel::from_checkpoint(&ck, Some(&tiny_config())).unwrap();
        let c = m.prepare(&cond("a red cup", "a blue box")).unwrap();
        let x = Tensor::new(Init::new(2).normal(12, 1.0), &m.latent_shape()).unwrap();
        assert_eq!(
            m.denoise(&x, 2, &c, FusionPath::Dense).unwrap().data(),
            back.denoise(&x, 2, &c, FusionPath::Dense).unwrap().data()
        );
        let mut other = tiny_config();
        other.ide.n_layers = 2;
        assert!(matches!(DeigModel::from_checkpoint(&ck, Some(&other)), Err(ModelError::ConfigMismatch(_))));
    }
}
