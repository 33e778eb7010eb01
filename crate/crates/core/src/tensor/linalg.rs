use super::ops::broadcast_shape;
use super::{numel, Result, Tensor, TensorError};

/// out[m,n] += a[m,k] * b[k,n]
fn gemm_nn(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// out[m,k] += g[m,n] * b[k,n]^T
fn gemm_nt(g: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            let mut acc = 0.0;
            for (x, y) in grow.iter().zip(brow) {
                acc += x * y;
            }
            out[i * k + p] += acc;
        }
    }
}

/// out[k,n] += a[m,k]^T * g[m,n]
fn gemm_tn(a: &[f64], g: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &gv) in orow.iter_mut().zip(grow) {
                *o += av * gv;
            }
        }
    }
}

/// Flat batch offsets of `src_batch` against the broadcast `out_batch`.
fn batch_map(src_batch: &[usize], out_batch: &[usize]) -> Vec<usize> {
    super::ops::broadcast_offsets(src_batch, out_batch)
}

impl Tensor {
    /// Batched matrix product over the trailing two axes, broadcasting the
    /// leading axes.
    pub fn matmul(&self, rhs: &Tensor) -> Result<Tensor> {
        let (a, b) = (self, rhs);
        let mismatch = || TensorError::ShapeMismatch {
            op: "matmul",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        };
        if a.rank() < 2 || b.rank() < 2 {
            return Err(mismatch());
        }
        let (m, k) = (a.dim(-2), a.dim(-1));
        let (k2, n) = (b.dim(-2), b.dim(-1));
        if k != k2 {
            return Err(mismatch());
        }
        let a_batch = &a.shape()[..a.rank() - 2];
        let b_batch = &b.shape()[..b.rank() - 2];
        let out_batch = broadcast_shape("matmul", a_batch, b_batch).map_err(|_| mismatch())?;
        let nb = numel(&out_batch);
        let amap = batch_map(a_batch, &out_batch);
        let bmap = batch_map(b_batch, &out_batch);
        let mut data = vec![0.0; nb * m * n];
        let (ad, bd) = (a.data(), b.data());
        for bi in 0..nb {
            let ao = amap[bi] * m * k;
            let bo = bmap[bi] * k * n;
            gemm_nn(
                &ad[ao..ao + m * k],
                &bd[bo..bo + k * n],
                &mut data[bi * m * n..(bi + 1) * m * n],
                m,
                k,
                n,
            );
        }
        let mut shape = out_batch;
        shape.extend([m, n]);
        let (ac, bc) = (a.clone(), b.clone());
        Ok(Tensor::from_op(data, shape, "matmul", vec![a.clone(), b.clone()], move |g, _| {
            let (ad, bd) = (ac.data(), bc.data());
            let ga = ac.requires_grad().then(|| {
                let mut ga = vec![0.0; ad.len()];
                for bi in 0..nb {
                    let ao = amap[bi] * m * k;
                    let bo = bmap[bi] * k * n;
                    gemm_nt(
                        &g[bi * m * n..(bi + 1) * m * n],
                        &bd[bo..bo + k * n],
                        &mut ga[ao..ao + m * k],
                        m,
                        k,
                        n,
                    );
                }
                ga
            });
            let gb = bc.requires_grad().then(|| {
                let mut gb = vec![0.0; bd.len()];
                for bi in 0..nb {
                    let ao = amap[bi] * m * k;
                    let bo = bmap[bi] * k * n;
                    gemm_tn(
                        &ad[ao..ao + m * k],
                        &g[bi * m * n..(bi + 1) * m * n],
                        &mut gb[bo..bo + k * n],
                        m,
                        k,
                        n,
                    );
                }
                gb
            });
            vec![ga, gb]
        }))
    }
}
