use super::ops::{broadcast_offsets, broadcast_shape, reduce_to};
use super::{numel, Result, Tensor, TensorError};

fn contiguous_strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// For every flat output index of the permuted tensor, the flat input index.
fn permute_map(shape: &[usize], axes: &[usize]) -> Vec<usize> {
    let in_strides = contiguous_strides(shape);
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let n = numel(shape);
    let rank = shape.len();
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    let mut map = Vec::with_capacity(n);
    for _ in 0..n {
        map.push(off);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            off += strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            off -= strides[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
    map
}

impl Tensor {
    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if numel(shape) != self.numel() {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                lhs: self.shape().to_vec(),
                rhs: shape.to_vec(),
            });
        }
        Ok(Tensor::from_op(
            self.data().to_vec(),
            shape.to_vec(),
            "reshape",
            vec![self.clone()],
            |g, _| vec![Some(g.to_vec())],
        ))
    }

    /// Reorders axes; `axes[i]` names the input axis placed at position `i`.
    pub fn permute(&self, axes: &[usize]) -> Result<Tensor> {
        let rank = self.rank();
        let mut seen = vec![false; rank];
        if axes.len() != rank || axes.iter().any(|&a| a >= rank || std::mem::replace(&mut seen[a], true)) {
            return Err(TensorError::InvalidArgument {
                op: "permute",
                msg: format!("{axes:?} is not a permutation of rank {rank}"),
            });
        }
        let map = permute_map(self.shape(), axes);
        let src = self.data();
        let data: Vec<f64> = map.iter().map(|&i| src[i]).collect();
        let shape: Vec<usize> = axes.iter().map(|&a| self.shape()[a]).collect();
        let n = self.numel();
        Ok(Tensor::from_op(data, shape, "permute", vec![self.clone()], move |g, _| {
            let mut gx = vec![0.0; n];
            for (gv, &i) in g.iter().zip(&map) {
                gx[i] = *gv;
            }
            vec![Some(gx)]
        }))
    }

    /// Swaps the last two axes.
    pub fn transpose_last2(&self) -> Result<Tensor> {
        let r = self.rank();
        if r < 2 {
            return Err(TensorError::InvalidArgument {
                op: "transpose",
                msg: "rank must be at least 2".into(),
            });
        }
        let mut axes: Vec<usize> = (0..r).collect();
        axes.swap(r - 2, r - 1);
        self.permute(&axes).map(|t| t.renamed("transpose"))
    }

    /// Broadcasts to `shape`, materializing the copies.
    pub fn expand(&self, shape: &[usize]) -> Result<Tensor> {
        let out = broadcast_shape("expand", self.shape(), shape)?;
        if out != shape {
            return Err(TensorError::ShapeMismatch {
                op: "expand",
                lhs: self.shape().to_vec(),
                rhs: shape.to_vec(),
            });
        }
        let src = self.data();
        let data: Vec<f64> = broadcast_offsets(self.shape(), shape).iter().map(|&o| src[o]).collect();
        let in_shape = self.shape().to_vec();
        let out_shape = shape.to_vec();
        Ok(Tensor::from_op(data, shape.to_vec(), "expand", vec![self.clone()], move |g, _| {
            vec![Some(reduce_to(g, &in_shape, &out_shape))]
        }))
    }

    /// Half-open slice `[start, end)` along `axis`.
    pub fn slice(&self, axis: isize, start: usize, end: usize) -> Result<Tensor> {
        let ax = self.norm_axis("slice", axis)?;
        let extent = self.shape()[ax];
        if start >= end || end > extent {
            return Err(TensorError::InvalidArgument {
                op: "slice",
                msg: format!("range {start}..{end} invalid for extent {extent}"),
            });
        }
        let outer: usize = self.shape()[..ax].iter().product();
        let inner: usize = self.shape()[ax + 1..].iter().product();
        let len = end - start;
        let src = self.data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * extent + start) * inner;
            data.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut shape = self.shape().to_vec();
        shape[ax] = len;
        let n = self.numel();
        Ok(Tensor::from_op(data, shape, "slice", vec![self.clone()], move |g, _| {
            let mut gx = vec![0.0; n];
            for o in 0..outer {
                let base = (o * extent + start) * inner;
                gx[base..base + len * inner].copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
            }
            vec![Some(gx)]
        }))
    }

    /// Concatenates tensors along `axis`; all other extents must agree.
    pub fn concat(parts: &[Tensor], axis: isize) -> Result<Tensor> {
        let first = parts.first().ok_or_else(|| TensorError::InvalidArgument {
            op: "concat",
            msg: "no tensors given".into(),
        })?;
        let ax = first.norm_axis("concat", axis)?;
        for p in parts {
            let ok = p.rank() == first.rank()
                && p.shape().iter().zip(first.shape()).enumerate().all(|(i, (a, b))| i == ax || a == b);
            if !ok {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: first.shape().to_vec(),
                    rhs: p.shape().to_vec(),
                });
            }
        }
        let outer: usize = first.shape()[..ax].iter().product();
        let inner: usize = first.shape()[ax + 1..].iter().product();
        let extents: Vec<usize> = parts.iter().map(|p| p.shape()[ax]).collect();
        let total: usize = extents.iter().sum();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (p, &e) in parts.iter().zip(&extents) {
                let chunk = e * inner;
                data.extend_from_slice(&p.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = first.shape().to_vec();
        shape[ax] = total;
        Ok(Tensor::from_op(data, shape, "concat", parts.to_vec(), move |g, _| {
            let mut grads: Vec<Vec<f64>> = extents.iter().map(|&e| Vec::with_capacity(outer * e * inner)).collect();
            let mut pos = 0;
            for _ in 0..outer {
                for (gp, &e) in grads.iter_mut().zip(&extents) {
                    gp.extend_from_slice(&g[pos..pos + e * inner]);
                    pos += e * inner;
                }
            }
            grads.into_iter().map(Some).collect()
        }))
    }

    /// Same tensor, relabeled on the tape (keeps gradient-check reports legible).
    fn renamed(self, op: &'static str) -> Tensor {
        if self.op_name().is_none() {
            return self;
        }
        Tensor::from_op(
            self.data().to_vec(),
            self.shape().to_vec(),
            op,
            vec![self],
            |g, _| vec![Some(g.to_vec())],
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn transpose_2x3() {
        let x = Tensor::new((0..6).map(f64::from).collect(), &[2, 3]).unwrap();
        let y = x.transpose_last2().unwrap();
        assert_eq!(y.shape(), &[3, 2]);
        assert_eq!(y.data(), &[0.0, 3.0, 1.0, 4.0, 2.0, 5.0]);
    }

    #[test]
    fn slice_and_concat_roundtrip() {
        let x = Tensor::new((0..24).map(f64::from).collect(), &[2, 3, 4]).unwrap();
        let a = x.slice(1, 0, 1).unwrap();
        let b = x.slice(1, 1, 3).unwrap();
        let y = Tensor::concat(&[a, b], 1).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn expand_rows() {
        let v = Tensor::new(vec![1.0, 2.0], &[1, 2]).unwrap();
        let e = v.expand(&[3, 2]).unwrap();
        assert_eq!(e.data(), &[1.0, 2.0, 1.0, 2.0, 1.0, 2.0]);
    }

    #[test]
    fn bad_slice_rejected() {
        let x = Tensor::zeros(&[2, 3]);
        assert!(x.slice(1, 2, 5).is_err());
        assert!(x.slice(2, 0, 1).is_err());
    }
}
