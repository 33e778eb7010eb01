//! Building blocks shared by the extractor, the fusion module and the
//! backbone: affine projections, multi-head attention and feed-forward.

use crate::params::{Init, ParamId, ParamStore};
use crate::tensor::{Result, Tensor, TensorError};

#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, init: &mut Init, name: &str, fan_in: usize, fan_out: usize) -> Result<Self> {
        let w = store.add(&format!("{name}.w"), init.linear(fan_in, fan_out), &[fan_in, fan_out])?;
        let b = store.add(&format!("{name}.b"), vec![0.0; fan_out], &[fan_out])?;
        Ok(Self {
            w,
            b: Some(b),
            fan_in,
            fan_out,
        })
    }

    pub fn zeroed(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize) -> Result<Self> {
        let w = store.add(&format!("{name}.w"), vec![0.0; fan_in * fan_out], &[fan_in, fan_out])?;
        let b = store.add(&format!("{name}.b"), vec![0.0; fan_out], &[fan_out])?;
        Ok(Self {
            w,
            b: Some(b),
            fan_in,
            fan_out,
        })
    }

    pub fn no_bias(store: &mut ParamStore, init: &mut Init, name: &str, fan_in: usize, fan_out: usize) -> Result<Self> {
        let w = store.add(&format!("{name}.w"), init.linear(fan_in, fan_out), &[fan_in, fan_out])?;
        Ok(Self {
            w,
            b: None,
            fan_in,
            fan_out,
        })
    }

    pub fn forward(&self, store: &ParamStore, x: &Tensor) -> Result<Tensor> {
        let y = x.matmul(store.get(self.w))?;
        match self.b {
            Some(b) => y.add(store.get(b)),
            None => Ok(y),
        }
    }
}

/// Two-layer GELU MLP with a hidden width multiplier.
#[derive(Debug, Clone)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn new(
        store: &mut ParamStore,
        init: &mut Init,
        name: &str,
        dim: usize,
        hidden: usize,
        zero_out: bool,
    ) -> Result<Self> {
        let up = Linear::new(store, init, &format!("{name}.up"), dim, hidden)?;
        let down = if zero_out {
            Linear::zeroed(store, &format!("{name}.down"), hidden, dim)?
        } else {
            Linear::new(store, init, &format!("{name}.down"), hidden, dim)?
        };
        Ok(Self { up, down })
    }

    pub fn forward(&self, store: &ParamStore, x: &Tensor) -> Result<Tensor> {
        self.down.forward(store, &self.up.forward(store, x)?.gelu())
    }
}

/// Multi-head scaled dot-product attention with an additive `{0, -inf}` mask.
#[derive(Debug, Clone)]
pub struct Attention {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub heads: usize,
    pub dim: usize,
}

impl Attention {
    /// `dim` is the query/output width, `kv_dim` the width of key/value inputs.
    pub fn new(
        store: &mut ParamStore,
        init: &mut Init,
        name: &str,
        dim: usize,
        kv_dim: usize,
        heads: usize,
        zero_out: bool,
    ) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(TensorError::InvalidArgument {
                op: "attention",
                msg: format!("width {dim} not divisible by {heads} heads"),
            });
        }
        Ok(Self {
            wq: Linear::no_bias(store, init, &format!("{name}.w_q"), dim, dim)?,
            wk: Linear::no_bias(store, init, &format!("{name}.w_k"), kv_dim, dim)?,
            wv: Linear::no_bias(store, init, &format!("{name}.w_v"), kv_dim, dim)?,
            wo: if zero_out {
                Linear::zeroed(store, &format!("{name}.w_o"), dim, dim)?
            } else {
                Linear::new(store, init, &format!("{name}.w_o"), dim, dim)?
            },
            heads,
            dim,
        })
    }

    /// `(..., T, dim)` -> `(..., heads, T, dim / heads)`
    fn split_heads(&self, x: &Tensor) -> Result<Tensor> {
        let r = x.rank();
        let t = x.dim(-2);
        let mut shape = x.shape()[..r - 2].to_vec();
        shape.extend([t, self.heads, self.dim / self.heads]);
        let mut axes: Vec<usize> = (0..r - 2).collect();
        axes.extend([r - 1, r - 2, r]);
        x.reshape(&shape)?.permute(&axes)
    }

    fn merge_heads(&self, x: &Tensor) -> Result<Tensor> {
        let r = x.rank();
        let mut axes: Vec<usize> = (0..r - 3).collect();
        axes.extend([r - 2, r - 3, r - 1]);
        let y = x.permute(&axes)?;
        let mut shape = y.shape()[..r - 2].to_vec();
        shape.push(self.dim);
        y.reshape(&shape)
    }

    /// Returns the attention output and the post-softmax weights
    /// `(..., heads, Tq, Tk)`.
    ///
    /// `mask` is `(Tq, Tk)` or carries the same leading axes as the inputs,
    /// `(..., Tq, Tk)`; it is shared across heads.
    pub fn forward_with_weights(
        &self,
        store: &ParamStore,
        q_in: &Tensor,
        kv_in: &Tensor,
        mask: Option<&Tensor>,
    ) -> Result<(Tensor, Tensor)> {
        let q = self.split_heads(&self.wq.forward(store, q_in)?)?;
        let k = self.split_heads(&self.wk.forward(store, kv_in)?)?;
        let v = self.split_heads(&self.wv.forward(store, kv_in)?)?;
        let head_dim = (self.dim / self.heads) as f64;
        let scores = q.matmul(&k.transpose_last2()?)?.scale(1.0 / head_dim.sqrt());
        let (tq, tk) = (scores.dim(-2), scores.dim(-1));
        let weights = match mask {
            None => scores.masked_softmax(&Tensor::zeros(&[tq, tk]))?,
            Some(m) if m.rank() <= 2 => scores.masked_softmax(m)?,
            Some(m) => {
                let mut shape = m.shape()[..m.rank() - 2].to_vec();
                shape.extend([1, tq, tk]);
                scores.masked_softmax(&m.reshape(&shape)?)?
            }
        };
        let out = self.merge_heads(&weights.matmul(&v)?)?;
        Ok((self.wo.forward(store, &out)?, weights))
    }

    pub fn forward(&self, store: &ParamStore, q_in: &Tensor, kv_in: &Tensor, mask: Option<&Tensor>) -> Result<Tensor> {
        self.forward_with_weights(store, q_in, kv_in, mask).map(|(o, _)| o)
    }
}

/// Sum of squared errors divided by element count.
pub fn mse(pred: &Tensor, target: &Tensor) -> Result<Tensor> {
    Ok(pred.sub(target)?.square().mean())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn attention_shapes_and_rows_sum_to_one() {
        let mut store = ParamStore::new();
        let mut init = Init::new(1);
        let attn = Attention::new(&mut store, &mut init, "a", 8, 6, 2, false).unwrap();
        let q = Tensor::new(init.normal(2 * 3 * 8, 1.0), &[2, 3, 8]).unwrap();
        let kv = Tensor::new(init.normal(2 * 5 * 6, 1.0), &[2, 5, 6]).unwrap();
        let (out, w) = attn.forward_with_weights(&store, &q, &kv, None).unwrap();
        assert_eq!(out.shape(), &[2, 3, 8]);
        assert_eq!(w.shape(), &[2, 2, 3, 5]);
        for row in w.data().chunks(5) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn heads_must_divide_width() {
        let mut store = ParamStore::new();
        let mut init = Init::new(1);
        assert!(Attention::new(&mut store, &mut init, "a", 6, 6, 4, false).is_err());
    }
}
