//! Central finite-difference checks of taped gradients.
//!
//! The error for each element is `|analytic - numeric| / max(|analytic|,
//! |numeric|, REL_FLOOR)`; the floor keeps gradients that are zero up to
//! rounding from producing meaningless ratios.

use crate::dfm::{assign_visual_membership, build_instance_mask, fuse_grounding, masked_gated_attention, DfmLayer, Grounding};
use crate::geometry::BoundingBox;
use crate::ide::{ide_forward, IdeConfig, IdeParameters};
use crate::params::{Init, ParamStore};
use crate::tensor::{backward, fourier_features, sinusoidal_embedding, Result, Tensor, MASK_NEG};

pub const FD_STEP: f64 = 1e-5;
pub const REL_FLOOR: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub name: String,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub elements: usize,
}

impl GradCheck {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err < tol
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Compares the gradient of the scalar `f(inputs)` against central
/// differences for every element of every input.
///
/// `inputs` are treated as leaves; `f` is re-evaluated on perturbed copies.
pub fn check<F>(name: &str, inputs: &[Tensor], f: F) -> Result<GradCheck>
where
    F: Fn(&[Tensor]) -> Result<Tensor>,
{
    check_with_step(name, inputs, FD_STEP, f)
}

pub fn check_with_step<F>(name: &str, inputs: &[Tensor], step: f64, f: F) -> Result<GradCheck>
where
    F: Fn(&[Tensor]) -> Result<Tensor>,
{
    let leaves: Vec<Tensor> = inputs
        .iter()
        .map(|t| Tensor::param(t.to_vec(), t.shape()))
        .collect::<Result<_>>()?;
    let loss = f(&leaves)?;
    let grads = backward(&loss)?;
    let analytic: Vec<Vec<f64>> = leaves
        .iter()
        .map(|l| grads.get(l).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; l.numel()]))
        .collect();

    let eval = |which: usize, idx: usize, delta: f64| -> Result<f64> {
        let perturbed: Vec<Tensor> = leaves
            .iter()
            .enumerate()
            .map(|(i, l)| {
                let mut d = l.to_vec();
                if i == which {
                    d[idx] += delta;
                }
                Tensor::new(d, l.shape())
            })
            .collect::<Result<_>>()?;
        Ok(f(&perturbed)?.item())
    };

    let mut report = GradCheck {
        name: name.to_string(),
        max_rel_err: 0.0,
        max_abs_err: 0.0,
        elements: 0,
    };
    for (i, l) in leaves.iter().enumerate() {
        for j in 0..l.numel() {
            let numeric = (eval(i, j, step)? - eval(i, j, -step)?) / (2.0 * step);
            let a = analytic[i][j];
            report.max_rel_err = report.max_rel_err.max(relative_error(a, numeric));
            report.max_abs_err = report.max_abs_err.max((a - numeric).abs());
            report.elements += 1;
        }
    }
    Ok(report)
}

/// Tolerance for single-op checks.
pub const OP_TOL: f64 = 1e-6;
/// Tolerance for the composed extractor + fusion stack.
pub const STACK_TOL: f64 = 1e-4;

/// One row of the gradient suite.
#[derive(Debug, Clone, PartialEq)]
pub struct SuiteRow {
    pub check: GradCheck,
    pub tol: f64,
}

impl SuiteRow {
    pub fn passed(&self) -> bool {
        self.check.passes(self.tol)
    }
}

fn op_row<F>(name: &str, shapes: &[&[usize]], init: &mut Init, f: F) -> Result<SuiteRow>
where
    F: Fn(&[Tensor]) -> Result<Tensor>,
{
    let inputs: Vec<Tensor> = shapes
        .iter()
        .map(|s| Tensor::new(init.normal(s.iter().product(), 1.0), s))
        .collect::<Result<_>>()?;
    let probe = f(&inputs)?;
    let w = Tensor::new(init.normal(probe.numel(), 1.0), probe.shape())?;
    let check = check(name, &inputs, |ts| f(ts)?.mul(&w).map(|t| t.sum()))?;
    Ok(SuiteRow { check, tol: OP_TOL })
}

/// Finite-difference check of every taped op, one row each.
pub fn op_suite(seed: u64) -> Result<Vec<SuiteRow>> {
    let mut init = Init::new(seed);
    let i = &mut init;
    // one partially and one fully masked row
    let blocked = [false, true, false, false, true, true, true, true, false, false, false, true];
    let mask = Tensor::new(blocked.iter().map(|&b| if b { MASK_NEG } else { 0.0 }).collect(), &[3, 4])?;
    Ok(vec![
        op_row("add", &[&[2, 3], &[3]], i, |t| t[0].add(&t[1]))?,
        op_row("sub", &[&[2, 3], &[2, 1]], i, |t| t[0].sub(&t[1]))?,
        op_row("mul", &[&[2, 3], &[2, 3]], i, |t| t[0].mul(&t[1]))?,
        op_row("div", &[&[2, 3], &[3]], i, |t| t[0].div(&t[1].square().add_scalar(1.0)))?,
        op_row("scale", &[&[4]], i, |t| Ok(t[0].scale(-1.7)))?,
        op_row("add_scalar", &[&[4]], i, |t| Ok(t[0].add_scalar(0.3)))?,
        op_row("tanh", &[&[5]], i, |t| Ok(t[0].tanh()))?,
        op_row("silu", &[&[5]], i, |t| Ok(t[0].silu()))?,
        op_row("gelu", &[&[5]], i, |t| Ok(t[0].gelu()))?,
        op_row("square", &[&[5]], i, |t| Ok(t[0].square()))?,
        op_row("sum", &[&[2, 3]], i, |t| Ok(t[0].sum()))?,
        op_row("mean", &[&[2, 3]], i, |t| Ok(t[0].mean()))?,
        op_row("reshape", &[&[2, 3]], i, |t| t[0].reshape(&[3, 2]))?,
        op_row("permute", &[&[2, 3, 4]], i, |t| t[0].permute(&[2, 0, 1]))?,
        op_row("expand", &[&[1, 3]], i, |t| t[0].expand(&[4, 3]))?,
        op_row("slice", &[&[3, 4]], i, |t| t[0].slice(1, 1, 3))?,
        op_row("concat", &[&[2, 2], &[2, 3]], i, |t| Tensor::concat(&[t[0].clone(), t[1].clone()], 1))?,
        op_row("matmul", &[&[2, 3, 4], &[4, 2]], i, |t| t[0].matmul(&t[1]))?,
        op_row("masked_softmax", &[&[3, 4]], i, |t| t[0].masked_softmax(&mask))?,
        op_row("layer_norm", &[&[3, 4]], i, |t| Ok(t[0].layer_norm(1e-6)))?,
        op_row("sinusoidal_embedding", &[&[2]], i, |t| sinusoidal_embedding(&t[0], 6))?,
        op_row("fourier_features", &[&[2, 2]], i, |t| fourier_features(&t[0].scale(0.2), 3))?,
    ])
}

/// Full extractor + grounding + masked gated attention stack at tiny dims
/// (S = 2, S_tau = 4, C = 8, two layers, two instances on a 2x2 grid).
pub fn stack_check(seed: u64) -> Result<SuiteRow> {
    let (c, s, s_tau) = (8, 2, 4);
    let mut store = ParamStore::new();
    let mut init = Init::new(seed);
    let cfg = IdeConfig {
        s,
        n_layers: 2,
        heads: 2,
        time_dim: 8,
    };
    let ide = IdeParameters::new(&mut store, &mut init, &cfg, c, s_tau, 10)?;
    let grounding = Grounding::new(&mut store, &mut init, 2, c)?;
    let dfm = DfmLayer::new(&mut store, &mut init, "dfm.block0", c, 2)?;
    // zero-initialized tensors and the closed gate would hide most paths
    for id in store.ids().collect::<Vec<_>>() {
        let n = store.get(id).numel();
        store.set_data(id, init.normal(n, 0.3))?;
    }
    let boxes = [
        BoundingBox::new(0.0, 0.0, 0.5, 1.0).expect("valid box"),
        BoundingBox::new(0.5, 0.0, 1.0, 1.0).expect("valid box"),
    ];
    let mask = build_instance_mask(&assign_visual_membership(&boxes, 2, 2), 2, s);
    let e_tau = Tensor::new(init.normal(2 * s_tau * c, 1.0), &[1, 2, s_tau, c])?;
    let x = Tensor::new(init.normal(4 * c, 1.0), &[1, 4, c])?;
    let params: Vec<Tensor> = store.iter().map(|(_, p)| p.tensor.clone()).collect();
    let n_params = params.len();
    let mut inputs = params;
    inputs.push(x);
    let forward = |ts: &[Tensor]| -> Result<Tensor> {
        let st = store.with_tensors(&ts[..n_params]);
        let e_ase = ide_forward(&st, &ide, &e_tau, Some(&[4, 3]), 3)?;
        let g = fuse_grounding(&st, &grounding, &e_ase, &boxes, &[true, false])?;
        masked_gated_attention(&st, &dfm, &ts[n_params], &g, &mask)
    };
    let probe = forward(&inputs)?;
    let w = Tensor::new(init.normal(probe.numel(), 1.0), probe.shape())?;
    let check = check("ide+dfm stack", &inputs, |ts| Ok(forward(ts)?.mul(&w)?.sum()))?;
    Ok(SuiteRow { check, tol: STACK_TOL })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::corrupt_gradient;

    #[test]
    fn every_op_passes() {
        for row in op_suite(11).unwrap() {
            assert!(row.passed(), "{row:?}");
        }
    }

    #[test]
    fn stack_passes() {
        let row = stack_check(5).unwrap();
        assert!(row.passed(), "{row:?}");
        assert!(row.check.elements > 500);
    }

    #[test]
    fn corrupted_op_is_named() {
        let _guard = corrupt_gradient("tanh");
        let failed: Vec<String> = op_suite(11).unwrap().into_iter().filter(|r| !r.passed()).map(|r| r.check.name).collect();
        assert_eq!(failed, ["tanh"]);
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(0.0, 1e-9), 1e-6);
        assert_eq!(relative_error(2.0, 1.0), 0.5);
    }
}
