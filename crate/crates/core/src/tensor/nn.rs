use std::f64::consts::PI;

use super::ops::broadcast_offsets;
use super::{Result, Tensor, TensorError};

/// Finite stand-in for `-inf` in additive attention masks.
pub const MASK_NEG: f64 = -1e30;

fn is_masked(m: f64) -> bool {
    m <= MASK_NEG
}

impl Tensor {
    /// Softmax over the last axis of `self + mask`.
    ///
    /// `mask` holds only `0` or `-inf`/[`MASK_NEG`] and must broadcast to
    /// `self`'s shape while sharing its last two extents. Masked positions
    /// come out exactly zero; rows with no unmasked entry come out all zero.
    pub fn masked_softmax(&self, mask: &Tensor) -> Result<Tensor> {
        let mismatch = || TensorError::ShapeMismatch {
            op: "masked_softmax",
            lhs: self.shape().to_vec(),
            rhs: mask.shape().to_vec(),
        };
        if self.rank() < 2 || mask.rank() < 2 || self.dim(-1) != mask.dim(-1) || self.dim(-2) != mask.dim(-2) {
            return Err(mismatch());
        }
        if let Some(&bad) = mask.data().iter().find(|&&m| m != 0.0 && !is_masked(m)) {
            return Err(TensorError::InvalidMask { value: bad });
        }
        let n = self.dim(-1);
        let row_shape = &self.shape()[..self.rank() - 1];
        let mask_rows = &mask.shape()[..mask.rank() - 1];
        if super::ops::broadcast_shape("masked_softmax", mask_rows, row_shape).map_err(|_| mismatch())? != row_shape {
            return Err(mismatch());
        }
        let row_map = broadcast_offsets(mask_rows, row_shape);
        let src = self.data();
        let md = mask.data();
        let mut data = vec![0.0; src.len()];
        for (r, &mr) in row_map.iter().enumerate() {
            let s = &src[r * n..(r + 1) * n];
            let m = &md[mr * n..(mr + 1) * n];
            let out = &mut data[r * n..(r + 1) * n];
            let mut max = f64::NEG_INFINITY;
            for (sv, mv) in s.iter().zip(m) {
                if !is_masked(*mv) && *sv > max {
                    max = *sv;
                }
            }
            if max == f64::NEG_INFINITY {
                continue;
            }
            let mut total = 0.0;
            for ((o, sv), mv) in out.iter_mut().zip(s).zip(m) {
                if !is_masked(*mv) {
                    *o = (sv - max).exp();
                    total += *o;
                }
            }
            for o in out.iter_mut() {
                *o /= total;
            }
        }
        Ok(Tensor::from_op(data, self.shape().to_vec(), "masked_softmax", vec![self.clone()], move |g, y| {
            let mut gx = vec![0.0; y.len()];
            for r in 0..y.len() / n {
                let yr = &y[r * n..(r + 1) * n];
                let gr = &g[r * n..(r + 1) * n];
                let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                for ((o, yv), gv) in gx[r * n..(r + 1) * n].iter_mut().zip(yr).zip(gr) {
                    *o = yv * (gv - dot);
                }
            }
            vec![Some(gx)]
        }))
    }

    /// Plain softmax over the last axis.
    pub fn softmax(&self) -> Result<Tensor> {
        if self.rank() < 2 {
            return self.reshape(&[1, self.numel()])?.softmax()?.reshape(self.shape());
        }
        self.masked_softmax(&Tensor::zeros(&[self.dim(-2), self.dim(-1)]))
    }

    /// Normalizes the last axis to zero mean and unit (biased) variance.
    /// There is no learned affine; callers modulate the result themselves.
    pub fn layer_norm(&self, eps: f64) -> Tensor {
        let n = self.dim(-1);
        let src = self.data();
        let rows = src.len() / n;
        let mut data = vec![0.0; src.len()];
        let mut inv_std = vec![0.0; rows];
        for r in 0..rows {
            let x = &src[r * n..(r + 1) * n];
            let mean = x.iter().sum::<f64>() / n as f64;
            let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for (o, v) in data[r * n..(r + 1) * n].iter_mut().zip(x) {
                *o = (v - mean) * is;
            }
        }
        Tensor::from_op(data, self.shape().to_vec(), "layer_norm", vec![self.clone()], move |g, y| {
            let mut gx = vec![0.0; y.len()];
            for r in 0..rows {
                let yr = &y[r * n..(r + 1) * n];
                let gr = &g[r * n..(r + 1) * n];
                let gm = gr.iter().sum::<f64>() / n as f64;
                let gy = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                for ((o, yv), gv) in gx[r * n..(r + 1) * n].iter_mut().zip(yr).zip(gr) {
                    *o = inv_std[r] * (gv - gm - yv * gy);
                }
            }
            vec![Some(gx)]
        })
    }
}

/// Transformer-style sinusoidal embedding of (possibly fractional) timesteps.
///
/// `t` has shape `(B,)` or `(B, 1)`; the result is `(B, dim)` with the sine
/// half first. Differentiable with respect to `t`.
pub fn sinusoidal_embedding(t: &Tensor, dim: usize) -> Result<Tensor> {
    if dim < 2 || dim % 2 != 0 {
        return Err(TensorError::InvalidArgument {
            op: "sinusoidal_embedding",
            msg: format!("dim must be even and >= 2, got {dim}"),
        });
    }
    let b = t.numel();
    let half = dim / 2;
    let freqs: Vec<f64> = (0..half)
        .map(|j| (-(10_000f64).ln() * j as f64 / half as f64).exp())
        .collect();
    let mut data = Vec::with_capacity(b * dim);
    for &tv in t.data() {
        data.extend(freqs.iter().map(|f| (tv * f).sin()));
        data.extend(freqs.iter().map(|f| (tv * f).cos()));
    }
    let tc = t.clone();
    Ok(Tensor::from_op(data, vec![b, dim], "sinusoidal_embedding", vec![t.clone()], move |g, _| {
        let gt = tc
            .data()
            .iter()
            .enumerate()
            .map(|(i, &tv)| {
                let row = &g[i * dim..(i + 1) * dim];
                freqs
                    .iter()
                    .enumerate()
                    .map(|(j, f)| row[j] * f * (tv * f).cos() - row[half + j] * f * (tv * f).sin())
                    .sum()
            })
            .collect();
        vec![Some(gt)]
    }))
}

/// Fourier features of coordinates: for every input value `x` along the last
/// axis and every `k < n_freqs`, emits `sin(2π·2^k·x)` then `cos(2π·2^k·x)`.
///
/// Shape `(..., d)` becomes `(..., d·2·n_freqs)`, coordinate-major.
pub fn fourier_features(coords: &Tensor, n_freqs: usize) -> Result<Tensor> {
    if n_freqs == 0 || coords.rank() == 0 {
        return Err(TensorError::InvalidArgument {
            op: "fourier_features",
            msg: "need n_freqs >= 1 and rank >= 1".into(),
        });
    }
    let width = 2 * n_freqs;
    let omegas: Vec<f64> = (0..n_freqs).map(|k| 2.0 * PI * f64::from(1u32 << k)).collect();
    let mut data = Vec::with_capacity(coords.numel() * width);
    for &x in coords.data() {
        for w in &omegas {
            data.push((w * x).sin());
            data.push((w * x).cos());
        }
    }
    let mut shape = coords.shape().to_vec();
    *shape.last_mut().unwrap() *= width;
    let cc = coords.clone();
    Ok(Tensor::from_op(data, shape, "fourier_features", vec![coords.clone()], move |g, _| {
        let gx = cc
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| {
                let row = &g[i * width..(i + 1) * width];
                omegas
                    .iter()
                    .enumerate()
                    .map(|(k, w)| row[2 * k] * w * (w * x).cos() - row[2 * k + 1] * w * (w * x).sin())
                    .sum()
            })
            .collect();
        vec![Some(gx)]
    }))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(data: &[f64], shape: &[usize]) -> Tensor {
        Tensor::new(data.to_vec(), shape).unwrap()
    }

    #[test]
    fn uniform_softmax() {
        let y = t(&[0.0; 3], &[1, 3]).masked_softmax(&t(&[0.0; 3], &[1, 3])).unwrap();
        for v in y.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn masked_entry_is_exactly_zero() {
        let y = t(&[5.0, 2.0, 9.0], &[1, 3])
            .masked_softmax(&t(&[0.0, f64::NEG_INFINITY, 0.0], &[1, 3]))
            .unwrap();
        assert_eq!(y.data()[1], 0.0);
        assert!((y.data()[0] + y.data()[2] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn fully_masked_row_is_zero() {
        let y = t(&[1.0, 1.0], &[1, 2]).masked_softmax(&t(&[MASK_NEG, MASK_NEG], &[1, 2])).unwrap();
        assert_eq!(y.data(), &[0.0, 0.0]);
    }

    #[test]
    fn non_binary_mask_rejected() {
        let err = t(&[1.0, 1.0], &[1, 2]).masked_softmax(&t(&[0.0, -3.0], &[1, 2])).unwrap_err();
        assert_eq!(err, TensorError::InvalidMask { value: -3.0 });
    }

    #[test]
    fn mask_broadcasts_over_heads() {
        let scores = t(&[0.0; 8], &[2, 2, 2]);
        let mask = t(&[0.0, MASK_NEG, 0.0, 0.0], &[2, 2]);
        let y = scores.masked_softmax(&mask).unwrap();
        assert_eq!(y.data(), &[1.0, 0.0, 0.5, 0.5, 1.0, 0.0, 0.5, 0.5]);
    }

    #[test]
    fn layer_norm_constant_row_is_zero() {
        let y = t(&[2.0, 2.0, 2.0], &[1, 3]).layer_norm(1e-5);
        assert_eq!(y.data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn layer_norm_unit_pair() {
        let y = t(&[1.0, -1.0], &[1, 2]).layer_norm(1e-14);
        assert!((y.data()[0] - 1.0).abs() < 1e-12);
        assert!((y.data()[1] + 1.0).abs() < 1e-12);
    }

    #[test]
    fn fourier_unit_coordinates() {
        let f = fourier_features(&t(&[0.0, 1.0], &[2]), 1).unwrap();
        let d = f.data();
        assert_eq!(d[0], 0.0);
        assert_eq!(d[1], 1.0);
        assert!(d[2].abs() < 1e-12);
        assert!((d[3] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn sinusoidal_shape_and_zero() {
        let e = sinusoidal_embedding(&t(&[0.0], &[1]), 8).unwrap();
        assert_eq!(e.shape(), &[1, 8]);
        assert_eq!(&e.data()[..4], &[0.0; 4]);
        assert_eq!(&e.data()[4..], &[1.0; 4]);
    }
}
