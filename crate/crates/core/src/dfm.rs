//! Detail fusion: box grounding of instance tokens, the instance mask, and
//! masked gated attention over visual plus instance tokens.

use serde::{Deserialize, Serialize};

use crate::geometry::BoundingBox;
use crate::layers::{Attention, Linear};
use crate::params::{Init, ParamId, ParamStore};
use crate::tensor::{fourier_features, no_grad, Result, Tensor, TensorError, MASK_NEG};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DfmConfig {
    pub n_freqs: usize,
    pub heads: usize,
    pub use_blocksparse: bool,
}

impl Default for DfmConfig {
    fn default() -> Self {
        Self {
            n_freqs: 8,
            heads: 4,
            use_blocksparse: false,
        }
    }
}

/// Box Fourier features: per coordinate and frequency `2^k`, a sine then a
/// cosine. Length `8 * n_freqs`.
pub fn fourier_encode_box(b: &BoundingBox, n_freqs: usize) -> Result<Vec<f64>> {
    Ok(fourier_features(&Tensor::new(b.coords().to_vec(), &[4])?, n_freqs)?.to_vec())
}

/// Replicates a `(dim,)` or `(..., dim)` vector `s` times: `(s, dim)`.
pub fn broadcast_grounding(f: &Tensor, s: usize) -> Result<Tensor> {
    let dim = f.dim(-1);
    f.reshape(&[1, dim])?.expand(&[s, dim])
}

/// Spatial projection, null embedding and the fusion MLP.
#[derive(Debug, Clone)]
pub struct Grounding {
    pub n_freqs: usize,
    pub channels: usize,
    pub proj: Linear,
    pub null: ParamId,
    pub mlp_in: Linear,
    pub mlp_out: Linear,
}

impl Grounding {
    pub fn new(store: &mut ParamStore, init: &mut Init, n_freqs: usize, channels: usize) -> Result<Self> {
        let c = channels;
        Ok(Self {
            n_freqs,
            channels,
            proj: Linear::new(store, init, "dfm.grounding.proj", 8 * n_freqs, c)?,
            null: store.add("dfm.grounding.null", init.normal(c, 0.02), &[c])?,
            mlp_in: Linear::new(store, init, "dfm.grounding.mlp.0", 2 * c, 2 * c)?,
            mlp_out: Linear::new(store, init, "dfm.grounding.mlp.1", 2 * c, c)?,
        })
    }
}

/// Grounded embeddings `(1, N, S, C)`: each instance's tokens are joined with
/// its projected box features (or the null embedding when its flag is 0) and
/// passed through a two-layer MLP.
pub fn fuse_grounding(store: &ParamStore, g: &Grounding, e_ase: &Tensor, boxes: &[BoundingBox], m_flags: &[bool]) -> Result<Tensor> {
    if e_ase.rank() != 4 || e_ase.dim(0) != 1 || e_ase.dim(-1) != g.channels {
        return Err(TensorError::InvalidArgument {
            op: "fuse_grounding",
            msg: format!("expected (1, N, S, {}) embeddings, got {:?}", g.channels, e_ase.shape()),
        });
    }
    let (n, s, c) = (e_ase.dim(1), e_ase.dim(2), g.channels);
    if boxes.len() != n || m_flags.len() != n {
        return Err(TensorError::InvalidArgument {
            op: "fuse_grounding",
            msg: format!("{n} instances but {} boxes and {} flags", boxes.len(), m_flags.len()),
        });
    }
    let null = store.get(g.null).reshape(&[1, c])?;
    let coords: Vec<f64> = boxes.iter().flat_map(|b| b.coords()).collect();
    let feats = g.proj.forward(store, &fourier_features(&Tensor::new(coords, &[n, 4])?, g.n_freqs)?)?;
    let rows = (0..n)
        .map(|i| if m_flags[i] { feats.slice(0, i, i + 1) } else { Ok(null.clone()) })
        .collect::<Result<Vec<_>>>()?;
    let spatial = Tensor::concat(&rows, 0)?.reshape(&[1, n, 1, c])?.expand(&[1, n, s, c])?;
    let x = Tensor::concat(&[spatial, e_ase.clone()], -1)?;
    g.mlp_out.forward(store, &g.mlp_in.forward(store, &x)?.silu())
}

/// Instances whose box contains the center of each grid cell (row-major).
pub fn assign_visual_membership(boxes: &[BoundingBox], grid_h: usize, grid_w: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::with_capacity(grid_h * grid_w);
    for r in 0..grid_h {
        for c in 0..grid_w {
            let (x, y) = ((c as f64 + 0.5) / grid_w as f64, (r as f64 + 0.5) / grid_h as f64);
            out.push((0..boxes.len()).filter(|&j| boxes[j].contains(x, y)).collect());
        }
    }
    for j in 0..boxes.len() {
        if !out.iter().any(|m: &Vec<usize>| m.contains(&j)) {
            log::warn!("instance {j} covers no cell center on a {grid_h}x{grid_w} grid");
        }
    }
    out
}

/// Additive `{0, -inf}` mask over `[visual tokens, instance 0 tokens, ...]`.
#[derive(Debug, Clone)]
pub struct InstanceMask {
    /// `(L, L)`
    pub m: Tensor,
    pub n_visual: usize,
    pub n: usize,
    pub s: usize,
    pub membership: Vec<Vec<usize>>,
}

impl InstanceMask {
    pub fn len(&self) -> usize {
        self.n_visual + self.n * self.s
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Instance owning token `i`, if it is an instance token.
    pub fn group_of(&self, i: usize) -> Option<usize> {
        (i >= self.n_visual).then(|| (i - self.n_visual) / self.s)
    }

    /// Whether token `i` may attend to token `j` under the structural rules.
    pub fn allowed(&self, i: usize, j: usize) -> bool {
        match (self.group_of(i), self.group_of(j)) {
            (None, None) => true,
            (None, Some(g)) => self.membership[i].contains(&g),
            (Some(g), None) => self.membership[j].contains(&g),
            (Some(a), Some(b)) => a == b,
        }
    }

    /// Same token layout with every entry 0 (no masking).
    pub fn unmasked(&self) -> InstanceMask {
        let l = self.len();
        InstanceMask {
            m: Tensor::zeros(&[l, l]),
            ..self.clone()
        }
    }
}

pub fn build_instance_mask(membership: &[Vec<usize>], n: usize, s: usize) -> InstanceMask {
    let n_visual = membership.len();
    let l = n_visual + n * s;
    let mut mask = InstanceMask {
        m: Tensor::zeros(&[1, 1]),
        n_visual,
        n,
        s,
        membership: membership.to_vec(),
    };
    let mut data = vec![0.0; l * l];
    for i in 0..l {
        for j in 0..l {
            if !mask.allowed(i, j) {
                data[i * l + j] = MASK_NEG;
            }
        }
    }
    mask.m = Tensor::new(data, &[l, l]).expect("mask shape");
    mask
}

/// Gated attention of one backbone block.
#[derive(Debug, Clone)]
pub struct DfmLayer {
    pub attn: Attention,
    pub gamma: ParamId,
    pub eta: ParamId,
}

impl DfmLayer {
    pub fn new(store: &mut ParamStore, init: &mut Init, name: &str, dim: usize, heads: usize) -> Result<Self> {
        Ok(Self {
            attn: Attention::new(store, init, &format!("{name}.attn"), dim, dim, heads, false)?,
            gamma: store.add(&format!("{name}.gamma"), vec![0.0], &[1])?,
            eta: store.add(&format!("{name}.eta"), vec![1.0], &[1])?,
        })
    }

    /// `eta * tanh(gamma)`
    pub fn gate(&self, store: &ParamStore) -> Result<Tensor> {
        store.get(self.eta).mul(&store.get(self.gamma).tanh())
    }
}

fn check_shapes(v_visual: &Tensor, g_ase: &Tensor, mask: &InstanceMask) -> Result<Tensor> {
    let ok = v_visual.rank() == 3
        && g_ase.rank() == 4
        && v_visual.dim(0) == 1
        && g_ase.dim(0) == 1
        && v_visual.dim(1) == mask.n_visual
        && g_ase.dim(1) == mask.n
        && g_ase.dim(2) == mask.s
        && g_ase.dim(3) == v_visual.dim(2);
    if !ok {
        return Err(TensorError::ShapeMismatch {
            op: "masked_gated_attention",
            lhs: v_visual.shape().to_vec(),
            rhs: g_ase.shape().to_vec(),
        });
    }
    let (d, ns) = (v_visual.dim(2), mask.n * mask.s);
    Tensor::concat(&[v_visual.clone(), g_ase.reshape(&[1, ns, d])?], 1).map(|x| x.layer_norm(1e-6))
}

/// `V + eta * tanh(gamma) * ES(A)` where `A` is masked self-attention over
/// the layer-normed visual and instance tokens and `ES` keeps the visual rows.
/// Also returns the attention weights `(1, heads, L, L)`.
pub fn masked_gated_attention_with_weights(
    store: &ParamStore,
    layer: &DfmLayer,
    v_visual: &Tensor,
    g_ase: &Tensor,
    mask: &InstanceMask,
) -> Result<(Tensor, Tensor)> {
    let x = check_shapes(v_visual, g_ase, mask)?;
    let (a, w) = layer.attn.forward_with_weights(store, &x, &x, Some(&mask.m))?;
    let es = a.slice(1, 0, mask.n_visual)?;
    Ok((v_visual.add(&es.mul(&layer.gate(store)?)?)?, w))
}

pub fn masked_gated_attention(store: &ParamStore, layer: &DfmLayer, v_visual: &Tensor, g_ase: &Tensor, mask: &InstanceMask) -> Result<Tensor> {
    masked_gated_attention_with_weights(store, layer, v_visual, g_ase, mask).map(|(o, _)| o)
}

/// Whether `mask.m` is exactly the structural mask of its membership.
pub fn mask_matches_structure(mask: &InstanceMask) -> bool {
    let l = mask.len();
    let d = mask.m.data();
    mask.m.shape() == [l, l]
        && (0..l).all(|i| (0..l).all(|j| (d[i * l + j] == 0.0) == mask.allowed(i, j)))
}

/// Key lists per query token, shared between tokens with equal signatures.
fn key_lists(mask: &InstanceMask) -> Vec<std::rc::Rc<Vec<usize>>> {
    use std::collections::HashMap;
    use std::rc::Rc;
    let l = mask.len();
    let mut cache: HashMap<(bool, Vec<usize>), Rc<Vec<usize>>> = HashMap::new();
    (0..l)
        .map(|i| {
            let sig = match mask.group_of(i) {
                None => (false, mask.membership[i].clone()),
                Some(g) => (true, vec![g]),
            };
            cache
                .entry(sig)
                .or_insert_with(|| Rc::new((0..l).filter(|&j| mask.allowed(i, j)).collect()))
                .clone()
        })
        .collect()
}

/// Gradient-free equivalent of [`masked_gated_attention`] that only computes
/// scores for unmasked pairs. Returns the output and the fraction of the
/// `L x L` score entries skipped.
///
/// Falls back to the dense path when the mask is not the structural mask of
/// its membership (for example the all-zero ablation mask).
pub fn masked_attention_blocksparse(
    store: &ParamStore,
    layer: &DfmLayer,
    v_visual: &Tensor,
    g_ase: &Tensor,
    mask: &InstanceMask,
) -> Result<(Tensor, f64)> {
    no_grad(|| {
        if !mask_matches_structure(mask) {
            log::info!("block-sparse attention: irregular mask, using the dense path");
            return Ok((masked_gated_attention(store, layer, v_visual, g_ase, mask)?, 0.0));
        }
        let x = check_shapes(v_visual, g_ase, mask)?;
        let attn = &layer.attn;
        let (q, k, v) = (
            attn.wq.forward(store, &x)?,
            attn.wk.forward(store, &x)?,
            attn.wv.forward(store, &x)?,
        );
        let (l, d) = (mask.len(), attn.dim);
        let (heads, hd) = (attn.heads, attn.dim / attn.heads);
        let scale = 1.0 / (hd as f64).sqrt();
        let (qd, kd, vd) = (q.data(), k.data(), v.data());
        let lists = key_lists(mask);
        let mut computed = 0usize;
        let mut out = vec![0.0; mask.n_visual * d];
        let mut w = Vec::with_capacity(l);
        // Only visual rows feed the gated residual.
        for (i, keys) in lists.iter().enumerate().take(mask.n_visual) {
            computed += keys.len();
            for h in 0..heads {
                let qi = &qd[i * d + h * hd..i * d + (h + 1) * hd];
                w.clear();
                w.extend(keys.iter().map(|&j| {
                    let kj = &kd[j * d + h * hd..j * d + (h + 1) * hd];
                    qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale
                }));
                let max = w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for s in w.iter_mut() {
                    *s = (*s - max).exp();
                    total += *s;
                }
                let o = &mut out[i * d + h * hd..i * d + (h + 1) * hd];
                for (&j, wj) in keys.iter().zip(&w) {
                    let p = wj / total;
                    for (ov, vv) in o.iter_mut().zip(&vd[j * d + h * hd..j * d + (h + 1) * hd]) {
                        *ov += p * vv;
                    }
                }
            }
        }
        computed += lists[mask.n_visual..].iter().map(|k| k.len()).sum::<usize>();
        let merged = Tensor::new(out, &[1, mask.n_visual, d])?;
        let es = attn.wo.forward(store, &merged)?;
        let skip = 1.0 - computed as f64 / (l * l) as f64;
        Ok((v_visual.add(&es.mul(&layer.gate(store)?)?)?, skip))
    })
}
