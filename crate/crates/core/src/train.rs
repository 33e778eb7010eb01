//! Two-phase training: backbone pretraining with closed gates, then the
//! extractor and fusion module on a frozen backbone.

use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::condition::GenerationCondition;
use crate::diffusion::{DeigModel, FusionPath, ModelError, PreparedCondition};
use crate::layers::mse;
use crate::optim::AdamW;
use crate::synth::render::render_scene;
use crate::synth::scene::SceneSpec;
use crate::tensor::{backward, Tensor, TensorError};

pub const BACKBONE_PREFIX: &str = "backbone.";
pub const TRAINABLE_PREFIXES: [&str; 2] = ["ide.", "dfm."];

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("loss diverged ({loss}) in phase {phase} at step {step}")]
    Diverged { phase: u8, step: usize, loss: f64 },
    #[error("training set is empty")]
    EmptyDataset,
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

impl From<TensorError> for TrainError {
    fn from(e: TensorError) -> Self {
        TrainError::Model(e.into())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub pretrain_steps: usize,
    pub steps: usize,
    pub batch_size: usize,
    pub pretrain_lr: f64,
    pub lr: f64,
    pub weight_decay: f64,
    pub warmup_steps: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            pretrain_steps: 400,
            steps: 1500,
            batch_size: 4,
            pretrain_lr: 2e-3,
            lr: 1e-3,
            weight_decay: 0.0,
            warmup_steps: 20,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub phase: u8,
    pub step: usize,
    pub loss: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct LossCurve {
    pub records: Vec<LossRecord>,
}

impl LossCurve {
    pub fn phase(&self, phase: u8) -> Vec<f64> {
        self.records.iter().filter(|r| r.phase == phase).map(|r| r.loss).collect()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("phase,step,loss\n");
        for r in &self.records {
            s.push_str(&format!("{},{},{:.17e}\n", r.phase, r.step, r.loss));
        }
        s
    }

    pub fn save_csv(&self, path: &Path) -> std::io::Result<()> {
        std::fs::File::create(path)?.write_all(self.to_csv().as_bytes())
    }
}

/// Means of consecutive non-overlapping windows.
pub fn window_means(values: &[f64], window: usize) -> Vec<f64> {
    values.chunks_exact(window).map(|c| c.iter().sum::<f64>() / window as f64).collect()
}

/// A training scene with its clean latent and resolved condition.
#[derive(Debug, Clone)]
pub struct Example {
    pub x0: Vec<f64>,
    pub cond: PreparedCondition,
}

pub fn prepare_examples(model: &DeigModel, scenes: &[SceneSpec]) -> Result<Vec<Example>, TrainError> {
    let (w, h) = model.codec.raster_size();
    scenes
        .iter()
        .map(|s| {
            let raster = render_scene(s, w, h);
            let x0 = model.codec.encode(&raster).expect("raster sized to the codec").to_vec();
            Ok(Example {
                x0,
                cond: model.prepare(&GenerationCondition::from_scene(s))?,
            })
        })
        .collect()
}

/// Mean denoising loss of one minibatch; `path` selects whether fusion runs.
fn batch_loss(model: &DeigModel, rng: &mut ChaCha8Rng, batch: &[&Example], path: FusionPath) -> Result<Tensor, TrainError> {
    let shape = model.latent_shape();
    let t_max = model.schedule.t_max();
    let mut total: Option<Tensor> = None;
    for ex in batch {
        let t = rng.random_range(0..t_max);
        let eps: Vec<f64> = (0..ex.x0.len()).map(|_| StandardNormal.sample(&mut *rng)).collect();
        let x_t = Tensor::new(model.schedule.add_noise(&ex.x0, &eps, t)?, &shape)?;
        let pred = model.denoise(&x_t, t, &ex.cond, path)?;
        let loss = mse(&pred, &Tensor::new(eps, &shape)?)?;
        total = Some(match total {
            None => loss,
            Some(acc) => acc.add(&loss)?,
        });
    }
    Ok(total.expect("nonempty batch").scale(1.0 / batch.len() as f64))
}

fn run_phase(
    model: &mut DeigModel,
    examples: &[Example],
    rng: &mut ChaCha8Rng,
    phase: u8,
    steps: usize,
    opt: &mut AdamW,
    cfg: &TrainConfig,
    curve: &mut LossCurve,
) -> Result<(), TrainError> {
    let path = if phase == 1 { FusionPath::Skip } else { FusionPath::Dense };
    for step in 0..steps {
        let batch: Vec<&Example> = (0..cfg.batch_size.max(1))
            .map(|_| &examples[rng.random_range(0..examples.len())])
            .collect();
        let loss = batch_loss(model, rng, &batch, path)?;
        let value = loss.item();
        if !value.is_finite() {
            return Err(TrainError::Diverged { phase, step, loss: value });
        }
        curve.records.push(LossRecord { phase, step, loss: value });
        backward(&loss)?;
        opt.step(&mut model.store)?;
        if step % 100 == 0 {
            log::debug!("phase {phase} step {step} loss {value:.5}");
        }
    }
    Ok(())
}

/// Sets which parameter groups receive updates in `phase`.
pub fn configure_phase(model: &mut DeigModel, phase: u8) {
    let pretrain = phase == 1;
    model.store.set_frozen(BACKBONE_PREFIX, !pretrain);
    for p in TRAINABLE_PREFIXES {
        model.store.set_frozen(p, pretrain);
    }
}

/// Phase 1 trains the backbone with fusion skipped; phase 2 trains the
/// extractor, grounding and gated attention with the backbone frozen.
pub fn train(model: &mut DeigModel, scenes: &[SceneSpec], cfg: &TrainConfig, seed: u64) -> Result<LossCurve, TrainError> {
    let examples = prepare_examples(model, scenes)?;
    let mut curve = LossCurve::default();
    pretrain(model, &examples, cfg, seed, &mut curve)?;
    finetune(model, &examples, cfg, seed, &mut curve)?;
    Ok(curve)
}

pub fn pretrain(model: &mut DeigModel, examples: &[Example], cfg: &TrainConfig, seed: u64, curve: &mut LossCurve) -> Result<(), TrainError> {
    if examples.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    configure_phase(model, 1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut opt = AdamW::new(cfg.pretrain_lr, cfg.weight_decay, cfg.warmup_steps);
    run_phase(model, examples, &mut rng, 1, cfg.pretrain_steps, &mut opt, cfg, curve)
}

pub fn finetune(model: &mut DeigModel, examples: &[Example], cfg: &TrainConfig, seed: u64, curve: &mut LossCurve) -> Result<(), TrainError> {
    if examples.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    configure_phase(model, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut opt = AdamW::new(cfg.lr, cfg.weight_decay, cfg.warmup_steps);
    run_phase(model, examples, &mut rng, 2, cfg.steps, &mut opt, cfg, curve)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::tests_support::tiny_config;
    use crate::synth::bench::{generate_bench, BenchConfig};

    fn scenes() -> Vec<SceneSpec> {
        generate_bench(3, 6, &BenchConfig::training()).unwrap()
    }

    fn cfg() -> TrainConfig {
        TrainConfig {
            pretrain_steps: 5,
            steps: 5,
            batch_size: 2,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn deterministic_and_frozen_backbone() {
        let mut a = DeigModel::new(tiny_config(), 1).unwrap();
        let mut b = DeigModel::new(tiny_config(), 1).unwrap();
        let examples = prepare_examples(&a, &scenes()).unwrap();
        let mut curve = LossCurve::default();
        pretrain(&mut a, &examples, &cfg(), 5, &mut curve).unwrap();
        let backbone: Vec<Vec<f64>> = a
            .store
            .iter()
            .filter(|(_, p)| p.name.starts_with(BACKBONE_PREFIX))
            .map(|(_, p)| p.tensor.to_vec())
            .collect();
        finetune(&mut a, &examples, &cfg(), 5, &mut curve).unwrap();
        let after: Vec<Vec<f64>> = a
            .store
            .iter()
            .filter(|(_, p)| p.name.starts_with(BACKBONE_PREFIX))
            .map(|(_, p)| p.tensor.to_vec())
            .collect();
        assert_eq!(backbone, after);
        let curve_b = train(&mut b, &scenes(), &cfg(), 5).unwrap();
        assert_eq!(curve, curve_b);
        assert_eq!(a.to_checkpoint().to_bytes(), b.to_checkpoint().to_bytes());
        // the gates moved off zero in phase 2
        let gamma = a.store.get(a.backbone.blocks[0].dfm.gamma).item();
        assert_ne!(gamma, 0.0);
    }

    #[test]
    fn first_loss_is_unit_scale() {
        let mut m = DeigModel::new(tiny_config(), 1).unwrap();
        let curve = train(&mut m, &scenes(), &TrainConfig { pretrain_steps: 1, steps: 0, batch_size: 4, ..cfg() }, 1).unwrap();
        // unembedding starts at zero, so the first prediction is 0 against unit noise
        let first = curve.records[0].loss;
        assert!((0.3..3.0).contains(&first), "{first}");
    }

    #[test]
    fn empty_dataset_rejected() {
        let mut m = DeigModel::new(tiny_config(), 1).unwrap();
        assert!(matches!(train(&mut m, &[], &cfg(), 1), Err(TrainError::EmptyDataset)));
    }

    #[test]
    fn window_means_chunks() {
        assert_eq!(window_means(&[1.0, 3.0, 5.0, 7.0, 9.0], 2), vec![2.0, 6.0]);
    }
}
