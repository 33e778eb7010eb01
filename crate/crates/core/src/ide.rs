//! Instance detail extractor: learnable queries distilled from frozen caption
//! features by time-conditioned self- and cross-attention.

use serde::{Deserialize, Serialize};

use crate::layers::{Attention, FeedForward, Linear};
use crate::params::{Init, ParamId, ParamStore};
use crate::tensor::{sinusoidal_embedding, Result, Tensor, TensorError, MASK_NEG};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IdeConfig {
    /// Tokens per instance in the output.
    pub s: usize,
    pub n_layers: usize,
    pub heads: usize,
    pub time_dim: usize,
}

impl Default for IdeConfig {
    fn default() -> Self {
        Self {
            s: 16,
            n_layers: 6,
            heads: 4,
            time_dim: 64,
        }
    }
}

impl IdeConfig {
    pub fn validate(&self, channels: usize, s_tau: usize) -> Result<()> {
        let fail = |msg: String| Err(TensorError::InvalidArgument { op: "ide config", msg });
        if self.s == 0 || self.s > s_tau {
            return fail(format!("ide.s must lie in 1..={s_tau}, got {}", self.s));
        }
        if self.n_layers == 0 {
            return fail("ide.n_layers must be >= 1".into());
        }
        if self.heads == 0 || channels % self.heads != 0 {
            return fail(format!("channels {channels} not divisible by ide.heads {}", self.heads));
        }
        if self.time_dim < 2 || self.time_dim % 2 != 0 {
            return fail("ide.time_dim must be even and >= 2".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct IdeLayer {
    pub mod_sa: Linear,
    pub mod_ca: Linear,
    pub self_attn: Attention,
    pub cross_attn: Attention,
    pub ff: FeedForward,
}

#[derive(Debug, Clone)]
pub struct IdeParameters {
    pub config: IdeConfig,
    pub channels: usize,
    pub t_max: usize,
    pub queries: ParamId,
    pub time_in: Linear,
    pub time_out: Linear,
    pub layers: Vec<IdeLayer>,
}

impl IdeParameters {
    pub fn new(store: &mut ParamStore, init: &mut Init, config: &IdeConfig, channels: usize, s_tau: usize, t_max: usize) -> Result<Self> {
        config.validate(channels, s_tau)?;
        let (c, td) = (channels, config.time_dim);
        let queries = store.add("ide.queries", init.normal(config.s * c, 0.02), &[1, 1, config.s, c])?;
        let time_in = Linear::new(store, init, "ide.time_mlp.0", td, td)?;
        let time_out = Linear::new(store, init, "ide.time_mlp.1", td, td)?;
        let layers = (0..config.n_layers)
            .map(|l| {
                let p = format!("ide.layer{l}");
                Ok(IdeLayer {
                    mod_sa: Linear::zeroed(store, &format!("{p}.adaln_sa"), td, 2 * c)?,
                    mod_ca: Linear::zeroed(store, &format!("{p}.adaln_ca"), td, 2 * c)?,
                    self_attn: Attention::new(store, init, &format!("{p}.selfattn"), c, c, config.heads, true)?,
                    cross_attn: Attention::new(store, init, &format!("{p}.crossattn"), c, c, config.heads, true)?,
                    ff: FeedForward::new(store, init, &format!("{p}.ff"), c, 2 * c, true)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            config: config.clone(),
            channels,
            t_max,
            queries,
            time_in,
            time_out,
            layers,
        })
    }
}

/// `(1, time_dim)` embedding of integer timestep `t`.
pub fn time_embed(store: &ParamStore, params: &IdeParameters, t: usize) -> Result<Tensor> {
    if t >= params.t_max {
        return Err(TensorError::InvalidArgument {
            op: "time_embed",
            msg: format!("timestep {t} outside 0..{}", params.t_max),
        });
    }
    let s = sinusoidal_embedding(&Tensor::scalar(t as f64), params.config.time_dim)?;
    params.time_out.forward(store, &params.time_in.forward(store, &s)?.silu())
}

/// `layer_norm(x) * (1 + scale) + shift`, with `(scale, shift)` a linear map
/// of the time embedding.
pub fn adaln_modulate(store: &ParamStore, modulation: &Linear, x: &Tensor, t_emb: &Tensor) -> Result<Tensor> {
    let c = x.dim(-1);
    let ss = modulation.forward(store, t_emb)?;
    if ss.dim(-1) != 2 * c {
        return Err(TensorError::ShapeMismatch {
            op: "adaln_modulate",
            lhs: x.shape().to_vec(),
            rhs: ss.shape().to_vec(),
        });
    }
    let scale = ss.slice(-1, 0, c)?;
    let shift = ss.slice(-1, c, 2 * c)?;
    x.layer_norm(1e-6).mul(&scale.add_scalar(1.0))?.add(&shift)
}

/// Key mask `(1, N, S, S + S_tau)` hiding caption padding from the queries.
pub fn cross_attention_mask(lengths: &[usize], s: usize, s_tau: usize) -> Tensor {
    let tk = s + s_tau;
    let mut data = vec![0.0; lengths.len() * s * tk];
    for (i, &len) in lengths.iter().enumerate() {
        for q in 0..s {
            let row = &mut data[(i * s + q) * tk..(i * s + q + 1) * tk];
            row[s + len..].fill(MASK_NEG);
        }
    }
    Tensor::new(data, &[1, lengths.len(), s, tk]).expect("mask shape")
}

/// One extractor layer over `h: (B, N, S, C)` and `e_tau: (B, N, S_tau, C)`.
/// Returns the new tokens and the cross-attention weights
/// `(B, N, heads, S, S + S_tau)`.
pub fn ide_layer_forward(
    store: &ParamStore,
    layer: &IdeLayer,
    h: &Tensor,
    e_tau: &Tensor,
    mask: Option<&Tensor>,
    t_emb: &Tensor,
) -> Result<(Tensor, Tensor)> {
    if h.rank() != 4 || e_tau.rank() != 4 || h.dim(1) != e_tau.dim(1) || h.dim(0) != e_tau.dim(0) {
        return Err(TensorError::ShapeMismatch {
            op: "ide_layer_forward",
            lhs: h.shape().to_vec(),
            rhs: e_tau.shape().to_vec(),
        });
    }
    let x = adaln_modulate(store, &layer.mod_sa, h, t_emb)?;
    let h_sa = h.add(&layer.self_attn.forward(store, &x, &x, None)?)?;
    let q = adaln_modulate(store, &layer.mod_ca, &h_sa, t_emb)?;
    let kv = Tensor::concat(&[h_sa.clone(), e_tau.clone()], 2)?;
    let (ca, weights) = layer.cross_attn.forward_with_weights(store, &q, &kv, mask)?;
    let h_ca = h_sa.add(&ca)?;
    let out = h_ca.add(&layer.ff.forward(store, &h_ca.layer_norm(1e-6))?)?;
    Ok((out, weights))
}

/// Aggregated semantic embeddings `(B, N, S, C)` together with every
/// layer's cross-attention weights.
pub fn ide_forward_with_weights(
    store: &ParamStore,
    params: &IdeParameters,
    e_tau: &Tensor,
    lengths: Option<&[usize]>,
    t: usize,
) -> Result<(Tensor, Vec<Tensor>)> {
    if e_tau.rank() != 4 || e_tau.dim(-1) != params.channels {
        return Err(TensorError::InvalidArgument {
            op: "ide_forward",
            msg: format!("expected (B, N, S_tau, {}) features, got {:?}", params.channels, e_tau.shape()),
        });
    }
    let (b, n) = (e_tau.dim(0), e_tau.dim(1));
    let s = params.config.s;
    let t_emb = time_embed(store, params, t)?;
    let mask = lengths.map(|l| cross_attention_mask(l, s, e_tau.dim(2)));
    let mut h = store.get(params.queries).expand(&[b, n, s, params.channels])?;
    let mut all = Vec::with_capacity(params.layers.len());
    for layer in &params.layers {
        let (next, w) = ide_layer_forward(store, layer, &h, e_tau, mask.as_ref(), &t_emb)?;
        h = next;
        all.push(w);
    }
    Ok((h, all))
}

pub fn ide_forward(store: &ParamStore, params: &IdeParameters, e_tau: &Tensor, lengths: Option<&[usize]>, t: usize) -> Result<Tensor> {
    ide_forward_with_weights(store, params, e_tau, lengths, t).map(|(h, _)| h)
}
