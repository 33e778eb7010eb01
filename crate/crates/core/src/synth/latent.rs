//! Fixed orthogonal patchify codec between RGB rasters and latent grids.
//!
//! Pixels map to `[-1, 1]`; each `p x p` patch of each color channel is
//! projected onto an orthonormal DCT-II basis over its `p²` positions, giving
//! `3·p²` latent channels per grid cell (channel-major).

use thiserror::Error;

use super::render::Raster;
use crate::tensor::Tensor;

#[derive(Debug, Error, PartialEq)]
pub enum LatentError {
    #[error("raster {width}x{height} does not match a {grid_w}x{grid_h} grid of {patch}px patches")]
    Resolution {
        width: usize,
        height: usize,
        grid_w: usize,
        grid_h: usize,
        patch: usize,
    },
    #[error("latent of shape {0:?} does not match the codec")]
    Shape(Vec<usize>),
}

#[derive(Debug, Clone)]
pub struct LatentCodec {
    pub grid_h: usize,
    pub grid_w: usize,
    pub patch: usize,
    basis: Vec<f64>,
}

pub fn pixel_to_unit(v: u8) -> f64 {
    f64::from(v) / 127.5 - 1.0
}

pub fn unit_to_pixel(v: f64) -> u8 {
    ((v + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8
}

impl LatentCodec {
    pub fn new(grid_h: usize, grid_w: usize, patch: usize) -> Self {
        let n = patch * patch;
        let mut basis = vec![0.0; n * n];
        for k in 0..n {
            let c = if k == 0 { (1.0 / n as f64).sqrt() } else { (2.0 / n as f64).sqrt() };
            for i in 0..n {
                basis[k * n + i] = c * (std::f64::consts::PI * (i as f64 + 0.5) * k as f64 / n as f64).cos();
            }
        }
        Self {
            grid_h,
            grid_w,
            patch,
            basis,
        }
    }

    pub fn channels(&self) -> usize {
        3 * self.patch * self.patch
    }

    pub fn raster_size(&self) -> (usize, usize) {
        (self.grid_w * self.patch, self.grid_h * self.patch)
    }

    pub fn latent_shape(&self) -> [usize; 4] {
        [1, self.grid_h, self.grid_w, self.channels()]
    }

    /// Encodes unit-range pixel values laid out `(height, width, 3)`.
    pub fn encode_values(&self, values: &[f64]) -> Vec<f64> {
        let (p, n) = (self.patch, self.patch * self.patch);
        let (w, _) = self.raster_size();
        let ch = self.channels();
        let mut out = vec![0.0; self.grid_h * self.grid_w * ch];
        let mut patch = vec![0.0; n];
        for gy in 0..self.grid_h {
            for gx in 0..self.grid_w {
                let cell = (gy * self.grid_w + gx) * ch;
                for c in 0..3 {
                    for dy in 0..p {
                        for dx in 0..p {
                            let (x, y) = (gx * p + dx, gy * p + dy);
                            patch[dy * p + dx] = values[(y * w + x) * 3 + c];
                        }
                    }
                    for k in 0..n {
                        out[cell + c * n + k] = self.basis[k * n..(k + 1) * n].iter().zip(&patch).map(|(a, b)| a * b).sum();
                    }
                }
            }
        }
        out
    }

    pub fn decode_values(&self, latent: &[f64]) -> Vec<f64> {
        let (p, n) = (self.patch, self.patch * self.patch);
        let (w, h) = self.raster_size();
        let ch = self.channels();
        let mut out = vec![0.0; w * h * 3];
        for gy in 0..self.grid_h {
            for gx in 0..self.grid_w {
                let cell = (gy * self.grid_w + gx) * ch;
                for c in 0..3 {
                    let coeffs = &latent[cell + c * n..cell + (c + 1) * n];
                    for i in 0..n {
                        let v: f64 = (0..n).map(|k| self.basis[k * n + i] * coeffs[k]).sum();
                        let (x, y) = (gx * p + i % p, gy * p + i / p);
                        out[(y * w + x) * 3 + c] = v;
                    }
                }
            }
        }
        out
    }

    pub fn encode(&self, raster: &Raster) -> Result<Tensor, LatentError> {
        let (w, h) = self.raster_size();
        if raster.width != w || raster.height != h {
            return Err(LatentError::Resolution {
                width: raster.width,
                height: raster.height,
                grid_w: self.grid_w,
                grid_h: self.grid_h,
                patch: self.patch,
            });
        }
        let values: Vec<f64> = raster.pixels.iter().flat_map(|p| p.map(pixel_to_unit)).collect();
        Ok(Tensor::new(self.encode_values(&values), &self.latent_shape()).expect("codec shape"))
    }

    pub fn decode(&self, latent: &Tensor) -> Result<Raster, LatentError> {
        if latent.numel() != self.grid_h * self.grid_w * self.channels() {
            return Err(LatentError::Shape(latent.shape().to_vec()));
        }
        let (w, h) = self.raster_size();
        let values = self.decode_values(latent.data());
        Ok(Raster {
            width: w,
            height: h,
            pixels: values.chunks_exact(3).map(|c| [unit_to_pixel(c[0]), unit_to_pixel(c[1]), unit_to_pixel(c[2])]).collect(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn random_values(codec: &LatentCodec, seed: u64) -> Vec<f64> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let (w, h) = codec.raster_size();
        (0..w * h * 3).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    #[test]
    fn roundtrip_identity() {
        let codec = LatentCodec::new(4, 3, 2);
        let v = random_values(&codec, 1);
        let back = codec.decode_values(&codec.encode_values(&v));
        for (a, b) in v.iter().zip(&back) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn parseval() {
        let codec = LatentCodec::new(4, 4, 3);
        let v = random_values(&codec, 2);
        let l = codec.encode_values(&v);
        let (a, b): (f64, f64) = (v.iter().map(|x| x * x).sum(), l.iter().map(|x| x * x).sum());
        assert!((a - b).abs() < 1e-8);
    }

    #[test]
    fn constant_image_constant_per_patch() {
        let codec = LatentCodec::new(2, 2, 2);
        let r = Raster::filled(4, 4, [200, 10, 90]);
        let l = codec.encode(&r).unwrap();
        let ch = codec.channels();
        let first = &l.data()[..ch];
        for cell in l.data().chunks(ch) {
            assert_eq!(cell, first);
        }
        // only the DC coefficient of each color channel is nonzero
        for (k, v) in first.iter().enumerate() {
            if k % 4 != 0 {
                assert!(v.abs() < 1e-12);
            }
        }
        assert_eq!(codec.decode(&l).unwrap(), r);
    }

    #[test]
    fn resolution_mismatch() {
        let codec = LatentCodec::new(2, 2, 2);
        assert!(codec.encode(&Raster::filled(5, 4, [0, 0, 0])).is_err());
    }
}
