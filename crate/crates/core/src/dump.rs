//! Inspection artifacts: instance masks as PGM/JSON and attention maps as CSV.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::condition::GenerationCondition;
use crate::dfm::InstanceMask;
use crate::diffusion::{AttentionTrace, DeigModel, FusionPath, Result};
use crate::synth::render::render_scene;
use crate::synth::scene::SceneSpec;
use crate::tensor::{no_grad, Tensor};

/// Binary PGM (P5): 255 where attention is allowed, 0 where blocked.
pub fn mask_pgm(mask: &InstanceMask) -> Vec<u8> {
    let l = mask.len();
    let mut out = format!("P5\n{l} {l}\n255\n").into_bytes();
    out.extend(mask.m.data().iter().map(|&v| if v == 0.0 { 255u8 } else { 0 }));
    out
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MaskSummary {
    pub len: usize,
    pub n_visual: usize,
    pub n: usize,
    pub s: usize,
    pub blocked: usize,
    /// Instances covering each visual token.
    pub membership: Vec<Vec<usize>>,
}

pub fn mask_summary(mask: &InstanceMask) -> MaskSummary {
    MaskSummary {
        len: mask.len(),
        n_visual: mask.n_visual,
        n: mask.n,
        s: mask.s,
        blocked: mask.m.data().iter().filter(|&&v| v != 0.0).count(),
        membership: mask.membership.clone(),
    }
}

/// Runs one dense forward pass at timestep `t` on the scene's ground truth
/// noised with `seed`, recording every attention map.
pub fn trace_attention(model: &DeigModel, scene: &SceneSpec, t: usize, seed: u64) -> Result<AttentionTrace> {
    let cond = model.prepare(&GenerationCondition::from_scene(scene))?;
    let (w, h) = model.codec.raster_size();
    let x0 = model.codec.encode(&render_scene(scene, w, h)).expect("raster sized to the codec");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let eps: Vec<f64> = (0..x0.numel()).map(|_| StandardNormal.sample(&mut rng)).collect();
    let x_t = Tensor::new(model.schedule.add_noise(x0.data(), &eps, t)?, &model.latent_shape())?;
    let mut trace = AttentionTrace::default();
    no_grad(|| model.denoise_with(&model.store, &x_t, t, &cond, FusionPath::Dense, Some(&mut trace)))?;
    Ok(trace)
}

/// Long-format CSV: `module,layer,instance,head,query,key,weight`. The
/// instance column is empty for the fusion maps.
pub fn attention_csv(trace: &AttentionTrace) -> String {
    let mut s = String::from("module,layer,instance,head,query,key,weight\n");
    for (layer, w) in trace.ide.iter().enumerate() {
        let [_, n, heads, q, k] = w.shape()[..] else {
            continue;
        };
        let d = w.data();
        for (i, v) in d.iter().enumerate().take(n * heads * q * k) {
            let (inst, rest) = (i / (heads * q * k), i % (heads * q * k));
            let (head, rest) = (rest / (q * k), rest % (q * k));
            s.push_str(&format!("ide,{layer},{inst},{head},{},{},{v:.9e}\n", rest / k, rest % k));
        }
    }
    for (block, w) in &trace.dfm {
        let [_, heads, q, k] = w.shape()[..] else {
            continue;
        };
        for (i, v) in w.data().iter().enumerate().take(heads * q * k) {
            let (head, rest) = (i / (q * k), i % (q * k));
            s.push_str(&format!("dfm,{block},,{head},{},{},{v:.9e}\n", rest / k, rest % k));
        }
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dfm::{assign_visual_membership, build_instance_mask};
    use crate::diffusion::tests_support::tiny_config;
    use crate::geometry::BoundingBox;
    use crate::synth::bench::{generate_bench, BenchConfig};

    #[test]
    fn pgm_marks_blocked_entries() {
        let b = [BoundingBox::new(0.0, 0.0, 0.5, 1.0).unwrap()];
        let mask = build_instance_mask(&assign_visual_membership(&b, 1, 2), 1, 1);
        let pgm = mask_pgm(&mask);
        let header = b"P5\n3 3\n255\n";
        assert_eq!(&pgm[..header.len()], header);
        // token 1 (right cell) lies outside the box: it and the instance token block each other
        assert_eq!(&pgm[header.len()..], &[255, 255, 255, 255, 255, 0, 255, 0, 255]);
        assert_eq!(mask_summary(&mask).blocked, 2);
    }

    #[test]
    fn csv_has_one_row_per_weight() {
        let model = DeigModel::new(tiny_config(), 2).unwrap();
        let scene = &generate_bench(1, 1, &BenchConfig::training()).unwrap()[0];
        let trace = trace_attention(&model, scene, 1, 0).unwrap();
        let expected: usize = trace.ide.iter().chain(trace.dfm.iter().map(|(_, w)| w)).map(|w| w.numel()).sum();
        assert_eq!(attention_csv(&trace).lines().count(), expected + 1);
        assert!(!trace.dfm.is_empty());
    }
}
