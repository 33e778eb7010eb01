//! Elementwise arithmetic with numpy-style broadcasting, pointwise
//! nonlinearities and full reductions.

use super::{numel, Result, Tensor, TensorError};

pub(crate) fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => {
                return Err(TensorError::ShapeMismatch {
                    op,
                    lhs: a.to_vec(),
                    rhs: b.to_vec(),
                })
            }
        };
    }
    Ok(out)
}

/// Strides of `src` laid out against `out`, zero on broadcast axes.
pub(crate) fn broadcast_strides(src: &[usize], out: &[usize]) -> Vec<usize> {
    let rank = out.len();
    let mut strides = vec![0; rank];
    let mut acc = 1;
    for i in (0..src.len()).rev() {
        let oi = i + rank - src.len();
        strides[oi] = if src[i] == 1 && out[oi] != 1 { 0 } else { acc };
        acc *= src[i];
    }
    strides
}

/// Source offset for every flat index of `out`.
pub(crate) fn broadcast_offsets(src: &[usize], out: &[usize]) -> Vec<usize> {
    let n = numel(out);
    if src == out {
        return (0..n).collect();
    }
    let strides = broadcast_strides(src, out);
    let rank = out.len();
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    let mut offsets = Vec::with_capacity(n);
    for _ in 0..n {
        offsets.push(off);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            off += strides[ax];
            if idx[ax] < out[ax] {
                break;
            }
            off -= strides[ax] * out[ax];
            idx[ax] = 0;
        }
    }
    offsets
}

/// Sums `grad` (shaped like `out`) down onto a tensor of shape `src`.
pub(crate) fn reduce_to(grad: &[f64], src: &[usize], out: &[usize]) -> Vec<f64> {
    if src == out {
        return grad.to_vec();
    }
    let mut res = vec![0.0; numel(src)];
    for (g, o) in grad.iter().zip(broadcast_offsets(src, out)) {
        res[o] += g;
    }
    res
}

#[derive(Clone, Copy)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

impl Binary {
    fn name(self) -> &'static str {
        match self {
            Binary::Add => "add",
            Binary::Sub => "sub",
            Binary::Mul => "mul",
            Binary::Div => "div",
        }
    }

    fn apply(self, x: f64, y: f64) -> f64 {
        match self {
            Binary::Add => x + y,
            Binary::Sub => x - y,
            Binary::Mul => x * y,
            Binary::Div => x / y,
        }
    }
}

fn binary(a: &Tensor, b: &Tensor, kind: Binary) -> Result<Tensor> {
    let op = kind.name();
    let out_shape = broadcast_shape(op, a.shape(), b.shape())?;
    let n = numel(&out_shape);
    let (ad, bd) = (a.data(), b.data());
    let data: Vec<f64> = if a.shape() == b.shape() {
        ad.iter().zip(bd).map(|(&x, &y)| kind.apply(x, y)).collect()
    } else {
        let ao = broadcast_offsets(a.shape(), &out_shape);
        let bo = broadcast_offsets(b.shape(), &out_shape);
        (0..n).map(|i| kind.apply(ad[ao[i]], bd[bo[i]])).collect()
    };
    let (ac, bc) = (a.clone(), b.clone());
    let os = out_shape.clone();
    Ok(Tensor::from_op(data, out_shape, op, vec![a.clone(), b.clone()], move |g, _| {
        let need_a = ac.requires_grad();
        let need_b = bc.requires_grad();
        let ao = broadcast_offsets(ac.shape(), &os);
        let bo = broadcast_offsets(bc.shape(), &os);
        let (ad, bd) = (ac.data(), bc.data());
        let (ga, gb): (Vec<f64>, Vec<f64>) = match kind {
            Binary::Add => (g.to_vec(), g.to_vec()),
            Binary::Sub => (g.to_vec(), g.iter().map(|v| -v).collect()),
            Binary::Mul => (
                g.iter().zip(&bo).map(|(gv, &j)| gv * bd[j]).collect(),
                g.iter().zip(&ao).map(|(gv, &i)| gv * ad[i]).collect(),
            ),
            Binary::Div => (
                g.iter().zip(&bo).map(|(gv, &j)| gv / bd[j]).collect(),
                g.iter()
                    .zip(ao.iter().zip(&bo))
                    .map(|(gv, (&i, &j))| -gv * ad[i] / (bd[j] * bd[j]))
                    .collect(),
            ),
        };
        vec![
            need_a.then(|| reduce_to(&ga, ac.shape(), &os)),
            need_b.then(|| reduce_to(&gb, bc.shape(), &os)),
        ]
    }))
}

fn unary(
    x: &Tensor,
    op: &'static str,
    f: impl Fn(f64) -> f64,
    // derivative given (input, output)
    df: impl Fn(f64, f64) -> f64 + 'static,
) -> Tensor {
    let data: Vec<f64> = x.data().iter().map(|&v| f(v)).collect();
    let xc = x.clone();
    Tensor::from_op(data, x.shape().to_vec(), op, vec![x.clone()], move |g, out| {
        let gx = g
            .iter()
            .zip(xc.data().iter().zip(out))
            .map(|(gv, (&xi, &yi))| gv * df(xi, yi))
            .collect();
        vec![Some(gx)]
    })
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

impl Tensor {
    pub fn add(&self, rhs: &Tensor) -> Result<Tensor> {
        binary(self, rhs, Binary::Add)
    }

    pub fn sub(&self, rhs: &Tensor) -> Result<Tensor> {
        binary(self, rhs, Binary::Sub)
    }

    pub fn mul(&self, rhs: &Tensor) -> Result<Tensor> {
        binary(self, rhs, Binary::Mul)
    }

    pub fn div(&self, rhs: &Tensor) -> Result<Tensor> {
        binary(self, rhs, Binary::Div)
    }

    pub fn scale(&self, k: f64) -> Tensor {
        unary(self, "scale", |v| v * k, move |_, _| k)
    }

    pub fn add_scalar(&self, k: f64) -> Tensor {
        unary(self, "add_scalar", |v| v + k, |_, _| 1.0)
    }

    pub fn tanh(&self) -> Tensor {
        unary(self, "tanh", f64::tanh, |_, y| 1.0 - y * y)
    }

    pub fn silu(&self) -> Tensor {
        unary(
            self,
            "silu",
            |v| v / (1.0 + (-v).exp()),
            |x, _| {
                let s = 1.0 / (1.0 + (-x).exp());
                s * (1.0 + x * (1.0 - s))
            },
        )
    }

    /// GELU, tanh approximation.
    pub fn gelu(&self) -> Tensor {
        unary(
            self,
            "gelu",
            |x| 0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh()),
            |x, _| {
                let u = GELU_C * (x + 0.044715 * x * x * x);
                let th = u.tanh();
                let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
                0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * du
            },
        )
    }

    pub fn square(&self) -> Tensor {
        unary(self, "square", |v| v * v, |x, _| 2.0 * x)
    }

    /// Sum of all elements, as a `[1]` tensor.
    pub fn sum(&self) -> Tensor {
        let s: f64 = self.data().iter().sum();
        let n = self.numel();
        Tensor::from_op(vec![s], vec![1], "sum", vec![self.clone()], move |g, _| {
            vec![Some(vec![g[0]; n])]
        })
    }

    /// Mean of all elements, as a `[1]` tensor.
    pub fn mean(&self) -> Tensor {
        let n = self.numel();
        let s: f64 = self.data().iter().sum::<f64>() / n as f64;
        Tensor::from_op(vec![s], vec![1], "mean", vec![self.clone()], move |g, _| {
            vec![Some(vec![g[0] / n as f64; n])]
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(data: &[f64], shape: &[usize]) -> Tensor {
        Tensor::new(data.to_vec(), shape).unwrap()
    }

    #[test]
    fn broadcast_add_bias() {
        let x = t(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0], &[2, 3]);
        let b = t(&[10.0, 20.0, 30.0], &[3]);
        let y = x.add(&b).unwrap();
        assert_eq!(y.data(), &[11.0, 22.0, 33.0, 14.0, 25.0, 36.0]);
    }

    #[test]
    fn broadcast_column() {
        let x = t(&[1.0, 2.0, 3.0, 4.0], &[2, 2]);
        let c = t(&[1.0, 10.0], &[2, 1]);
        assert_eq!(x.mul(&c).unwrap().data(), &[1.0, 2.0, 30.0, 40.0]);
    }

    #[test]
    fn incompatible_shapes_named() {
        let err = t(&[1.0; 6], &[2, 3]).add(&t(&[1.0; 2], &[2])).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[2]"), "{msg}");
    }

    #[test]
    fn broadcast_grad_reduces() {
        let x = Tensor::param(vec![1.0; 6], &[2, 3]).unwrap();
        let b = Tensor::param(vec![0.0; 3], &[3]).unwrap();
        let loss = x.add(&b).unwrap().sum();
        super::super::backward(&loss).unwrap();
        assert_eq!(b.grad().unwrap(), vec![2.0, 2.0, 2.0]);
    }
}
