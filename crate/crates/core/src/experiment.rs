//! End-to-end workflows: data sets, training, sampling, evaluation and
//! ablation arms.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::condition::GenerationCondition;
use crate::config::RunConfig;
use crate::diffusion::{DeigModel, MaskMode, ModelError};
use crate::error::{DeigError, Result};
use crate::metrics::{evaluate, EvalReport};
use crate::synth::bench::{generate_bench, read_bench_dir, scene_stem, write_bench_dir};
use crate::synth::render::Raster;
use crate::synth::scene::SceneSpec;
use crate::train::{finetune, prepare_examples, pretrain, LossCurve, BACKBONE_PREFIX};

pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const LOSS_FILE: &str = "loss.csv";
pub const REPORT_FILE: &str = "report.json";

pub fn training_scenes(cfg: &RunConfig) -> Result<Vec<SceneSpec>> {
    Ok(generate_bench(cfg.seed, cfg.experiment.train_scenes, &cfg.bench)?)
}

pub fn held_out_scenes(cfg: &RunConfig) -> Result<Vec<SceneSpec>> {
    let seed = cfg.seed.wrapping_add(cfg.experiment.held_out_offset);
    Ok(generate_bench(seed, cfg.experiment.eval_scenes, &cfg.bench)?)
}

pub struct Trained {
    pub model: DeigModel,
    pub curve: LossCurve,
}

/// Phase 1 only.
pub fn pretrain_backbone(cfg: &RunConfig, scenes: &[SceneSpec]) -> Result<Trained> {
    let mut model = DeigModel::new(cfg.model(), cfg.seed)?;
    let examples = prepare_examples(&model, scenes)?;
    let mut curve = LossCurve::default();
    pretrain(&mut model, &examples, &cfg.train, cfg.seed, &mut curve)?;
    Ok(Trained { model, curve })
}

/// Phase 2 on a fresh model built from `cfg` that inherits the backbone of
/// `base`. The returned curve holds `base`'s phase-1 records followed by
/// phase 2.
pub fn finetune_from(cfg: &RunConfig, base: &Trained, scenes: &[SceneSpec]) -> Result<Trained> {
    let mut model = DeigModel::new(cfg.model(), cfg.seed)?;
    model
        .store
        .copy_prefix_from(&base.model.store, BACKBONE_PREFIX)
        .map_err(ModelError::from)?;
    let examples = prepare_examples(&model, scenes)?;
    let mut curve = base.curve.clone();
    finetune(&mut model, &examples, &cfg.train, cfg.seed, &mut curve)?;
    Ok(Trained { model, curve })
}

pub fn train_model(cfg: &RunConfig, scenes: &[SceneSpec]) -> Result<Trained> {
    let base = pretrain_backbone(cfg, scenes)?;
    finetune_from(cfg, &base, scenes)
}

/// Samples every scene with its own seed. With `jobs > 1`, workers rebuild
/// the model from checkpoint bytes; output order and content do not depend
/// on `jobs`.
pub fn sample_scenes(model: &DeigModel, scenes: &[SceneSpec], jobs: usize) -> Result<Vec<Raster>> {
    let one = |m: &DeigModel, s: &SceneSpec| m.sample(&GenerationCondition::from_scene(s), s.seed);
    if jobs <= 1 || scenes.len() <= 1 {
        return scenes.iter().map(|s| one(model, s).map_err(DeigError::from)).collect();
    }
    let bytes = model.to_checkpoint().to_bytes();
    let chunk = scenes.len().div_ceil(jobs);
    let results: Vec<Result<Vec<Raster>>> = std::thread::scope(|scope| {
        let handles: Vec<_> = scenes
            .chunks(chunk)
            .map(|part| {
                let bytes = &bytes;
                scope.spawn(move || -> Result<Vec<Raster>> {
                    let m = DeigModel::from_checkpoint(&Checkpoint::from_bytes(bytes)?, None)?;
                    part.iter().map(|s| one(&m, s).map_err(DeigError::from)).collect()
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("sampling worker panicked")).collect()
    });
    let mut out = Vec::with_capacity(scenes.len());
    for r in results {
        out.extend(r?);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmResult {
    pub arm: String,
    pub s: usize,
    pub mask: MaskMode,
    pub maa: f64,
    pub leakage: f64,
    pub miou: f64,
    /// Mean phase-2 loss over the last tenth of the steps.
    pub final_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub what: String,
    pub arms: Vec<ArmResult>,
}

impl AblationReport {
    pub fn arm(&self, name: &str) -> Option<&ArmResult> {
        self.arms.iter().find(|a| a.arm == name)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("s,arm,mask,maa,leakage,miou,final_loss\n");
        for a in &self.arms {
            let mask = match a.mask {
                MaskMode::Instance => "instance",
                MaskMode::None => "none",
            };
            s.push_str(&format!(
                "{},{},{},{:.6},{:.6},{:.6},{:.6}\n",
                a.s, a.arm, mask, a.maa, a.leakage, a.miou, a.final_loss
            ));
        }
        s
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Ablation {
    Mask,
    SDim,
}

impl Ablation {
    pub fn name(self) -> &'static str {
        match self {
            Ablation::Mask => "mask",
            Ablation::SDim => "s-dim",
        }
    }
}

/// Arm configs differing from `cfg` only in the ablated factor.
pub fn arm_configs(cfg: &RunConfig, what: Ablation) -> Vec<(String, RunConfig)> {
    match what {
        Ablation::Mask => {
            let mut off = cfg.clone();
            off.diffusion.mask = MaskMode::None;
            let mut on = cfg.clone();
            on.diffusion.mask = MaskMode::Instance;
            vec![("mask_on".into(), on), ("mask_off".into(), off)]
        }
        Ablation::SDim => cfg
            .experiment
            .s_sweep
            .iter()
            .map(|&s| {
                let mut c = cfg.clone();
                c.ide.s = s;
                (format!("s{s}"), c)
            })
            .collect(),
    }
}

fn tail_mean(curve: &LossCurve) -> f64 {
    let losses = curve.phase(2);
    if losses.is_empty() {
        return f64::NAN;
    }
    let tail = &losses[losses.len() - (losses.len() / 10).max(1)..];
    tail.iter().sum::<f64>() / tail.len() as f64
}

/// Trains (or loads) and evaluates each arm. Every arm shares one phase-1
/// backbone trained from the first arm's config. With `dir`, each arm keeps
/// its echoed config, checkpoint, loss curve and report under `dir/<arm>`,
/// and an existing checkpoint with a matching config is reused.
pub fn run_arms(arms: &[(String, RunConfig)], dir: Option<&Path>, jobs: usize) -> Result<Vec<ArmResult>> {
    let Some((_, first)) = arms.first() else {
        return Ok(Vec::new());
    };
    for (name, c) in arms {
        c.validate()?;
        if (c.seed, &c.train, &c.bench, &c.experiment) != (first.seed, &first.train, &first.bench, &first.experiment) {
            return Err(DeigError::Config(format!("arm {name} differs in data, seed or schedule")));
        }
    }
    let scenes = training_scenes(first)?;
    let held_out = held_out_scenes(first)?;
    let mut base: Option<Trained> = None;
    let mut out = Vec::with_capacity(arms.len());
    for (name, c) in arms {
        let arm_dir = dir.map(|d| d.join(name));
        let ckpt = arm_dir.as_ref().map(|d| d.join(CHECKPOINT_FILE));
        let cached = match &ckpt {
            Some(p) if p.exists() => {
                let model = DeigModel::from_checkpoint(&Checkpoint::load(p)?, Some(&c.model()))?;
                let losses = arm_dir.as_ref().map(|d| d.join(LOSS_FILE)).filter(|p| p.exists());
                Some((model, losses.map(|p| read_loss_csv(&p)).transpose()?.unwrap_or_default()))
            }
            _ => None,
        };
        let (model, curve) = match cached {
            Some(found) => {
                log::info!("arm {name}: reusing {}", ckpt.as_ref().expect("cached implies a path").display());
                found
            }
            None => {
                if base.is_none() {
                    base = Some(pretrain_backbone(first, &scenes)?);
                }
                let t = finetune_from(c, base.as_ref().expect("pretrained above"), &scenes)?;
                (t.model, t.curve)
            }
        };
        let images = sample_scenes(&model, &held_out, jobs)?;
        let report = evaluate(&held_out, &images);
        if let Some(d) = &arm_dir {
            c.echo(d)?;
            model.to_checkpoint().save(&d.join(CHECKPOINT_FILE))?;
            curve.save_csv(&d.join(LOSS_FILE)).map_err(|e| DeigError::io(d.join(LOSS_FILE), e))?;
            std::fs::write(d.join(REPORT_FILE), report.to_json()).map_err(|e| DeigError::io(d.join(REPORT_FILE), e))?;
        }
        let result = ArmResult {
            arm: name.clone(),
            s: c.ide.s,
            mask: c.diffusion.mask,
            maa: report.overall_maa(),
            leakage: report.leakage,
            miou: report.miou,
            final_loss: tail_mean(&curve),
        };
        log::info!(
            "arm {name}: maa {:.3} leakage {:.3} miou {:.3}",
            result.maa,
            result.leakage,
            result.miou
        );
        out.push(result);
    }
    Ok(out)
}

pub fn run_ablation(cfg: &RunConfig, what: Ablation, dir: Option<&Path>, jobs: usize) -> Result<AblationReport> {
    let arms = run_arms(&arm_configs(cfg, what), dir, jobs)?;
    Ok(AblationReport {
        what: what.name().into(),
        arms,
    })
}

/// Parses the `phase,step,loss` CSV written by [`LossCurve::save_csv`].
pub fn read_loss_csv(path: &Path) -> Result<LossCurve> {
    let text = std::fs::read_to_string(path).map_err(|e| DeigError::io(path, e))?;
    let bad = |line: &str| DeigError::Config(format!("{}: malformed loss row {line:?}", path.display()));
    let mut curve = LossCurve::default();
    for line in text.lines().skip(1).filter(|l| !l.is_empty()) {
        let f: Vec<&str> = line.split(',').collect();
        let [phase, step, loss] = f[..] else {
            return Err(bad(line));
        };
        curve.records.push(crate::train::LossRecord {
            phase: phase.parse().map_err(|_| bad(line))?,
            step: step.parse().map_err(|_| bad(line))?,
            loss: loss.parse().map_err(|_| bad(line))?,
        });
    }
    Ok(curve)
}

/// Artifacts of one full pipeline run.
pub struct PipelineOutput {
    pub report: EvalReport,
    pub checkpoint: Vec<u8>,
}

/// gen-bench, train, sample and eval in sequence, writing every artifact
/// under `out`:
///
/// ```text
/// out/config.json  out/bench/  out/model.ckpt  out/loss.csv
/// out/samples/scene_NNNNN.ppm  out/report.json
/// ```
pub fn run_pipeline(cfg: &RunConfig, out: &Path, jobs: usize) -> Result<PipelineOutput> {
    cfg.validate()?;
    cfg.echo(out)?;
    let bench_dir = out.join("bench");
    let held_out = held_out_scenes(cfg)?;
    write_bench_dir(&bench_dir, cfg.seed.wrapping_add(cfg.experiment.held_out_offset), &held_out, cfg.bench.resolution)?;

    let trained = train_model(cfg, &training_scenes(cfg)?)?;
    let checkpoint = trained.model.to_checkpoint().to_bytes();
    let ckpt_path = out.join(CHECKPOINT_FILE);
    std::fs::write(&ckpt_path, &checkpoint).map_err(|e| DeigError::io(&ckpt_path, e))?;
    trained
        .curve
        .save_csv(&out.join(LOSS_FILE))
        .map_err(|e| DeigError::io(out.join(LOSS_FILE), e))?;

    let model = DeigModel::from_checkpoint(&Checkpoint::from_bytes(&checkpoint)?, Some(&cfg.model()))?;
    let (_, scenes) = read_bench_dir(&bench_dir)?;
    let images = sample_scenes(&model, &scenes, jobs)?;
    let samples = out.join("samples");
    std::fs::create_dir_all(&samples).map_err(|e| DeigError::io(&samples, e))?;
    for (i, img) in images.iter().enumerate() {
        img.save_ppm(&samples.join(format!("{}.ppm", scene_stem(i))))?;
    }
    let report = evaluate_dirs(&bench_dir, &samples)?;
    let path = out.join(REPORT_FILE);
    std::fs::write(&path, report.to_json()).map_err(|e| DeigError::io(&path, e))?;
    Ok(PipelineOutput { report, checkpoint })
}

/// Evaluates images in `images` named after the scenes of a bench directory.
pub fn evaluate_dirs(bench: &Path, images: &Path) -> Result<EvalReport> {
    let (manifest, scenes) = read_bench_dir(bench)?;
    let rasters = manifest
        .scenes
        .iter()
        .map(|e| Raster::load_ppm(&images.join(&e.image)))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(evaluate(&scenes, &rasters))
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn tiny_run() -> RunConfig {
        let json = r#"{
            "seed": 3,
            "text_sim": {"channels": 8, "max_tokens": 6, "global_max_tokens": 8, "max_instances": 2},
            "ide": {"s": 2, "n_layers": 1, "heads": 2, "time_dim": 8},
            "dfm": {"n_freqs": 2, "heads": 2},
            "diffusion": {"grid_h": 4, "grid_w": 4, "patch": 2, "d_model": 8, "blocks": 1, "heads": 2, "t_max": 4, "beta_end": 0.3},
            "train": {"pretrain_steps": 3, "steps": 3, "batch_size": 2},
            "bench": {"min_instances": 2, "max_instances": 2, "person_fraction": 0.0,
                      "object_level_weights": [1.0, 0.0, 0.0, 0.0], "snap": 8, "resolution": 8},
            "experiment": {"train_scenes": 4, "eval_scenes": 3, "s_sweep": [1, 2]}
        }"#;
        RunConfig::from_json(json).unwrap()
    }

    #[test]
    fn pipeline_is_reproducible() {
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let ra = run_pipeline(&tiny_run(), a.path(), 1).unwrap();
        let rb = run_pipeline(&tiny_run(), b.path(), 2).unwrap();
        assert_eq!(ra.checkpoint, rb.checkpoint);
        let read = |d: &Path, f: &str| std::fs::read(d.join(f)).unwrap();
        assert_eq!(read(a.path(), REPORT_FILE), read(b.path(), REPORT_FILE));
        assert_eq!(ra.report.scenes.len(), 3);
    }

    #[test]
    fn arms_differ_only_in_the_factor() {
        let cfg = tiny_run();
        let arms = arm_configs(&cfg, Ablation::Mask);
        let (mut on, off) = (arms[0].1.clone(), &arms[1].1);
        assert_eq!(off.diffusion.mask, MaskMode::None);
        on.diffusion.mask = MaskMode::None;
        assert_eq!(&on, off);
        let sweep = arm_configs(&RunConfig::default(), Ablation::SDim);
        assert_eq!(sweep.iter().map(|(_, c)| c.ide.s).collect::<Vec<_>>(), [2, 4, 8, 16, 32]);
    }

    #[test]
    fn arms_reuse_checkpoints() {
        let dir = tempfile::tempdir().unwrap();
        let first = run_ablation(&tiny_run(), Ablation::SDim, Some(dir.path()), 1).unwrap();
        assert_eq!(first.arms.len(), 2);
        let ckpt = std::fs::read(dir.path().join("s1").join(CHECKPOINT_FILE)).unwrap();
        let again = run_ablation(&tiny_run(), Ablation::SDim, Some(dir.path()), 1).unwrap();
        assert_eq!(first, again);
        assert_eq!(ckpt, std::fs::read(dir.path().join("s1").join(CHECKPOINT_FILE)).unwrap());
        assert_eq!(first.to_csv().lines().count(), 3);
    }

    #[test]
    fn backbone_init_ignores_fusion_config() {
        let a = tiny_run();
        let mut b = a.clone();
        b.ide.s = 1;
        b.ide.n_layers = 2;
        let (ma, mb) = (DeigModel::new(a.model(), 3).unwrap(), DeigModel::new(b.model(), 3).unwrap());
        let backbone = |m: &DeigModel| -> Vec<Vec<f64>> {
            m.store
                .iter()
                .filter(|(_, p)| p.name.starts_with(BACKBONE_PREFIX))
                .map(|(_, p)| p.tensor.to_vec())
                .collect()
        };
        assert_eq!(backbone(&ma), backbone(&mb));
    }

    #[test]
    fn loss_csv_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let mut curve = LossCurve::default();
        curve.records.push(crate::train::LossRecord {
            phase: 1,
            step: 0,
            loss: 0.1 + 0.2,
        });
        let p = dir.path().join("l.csv");
        curve.save_csv(&p).unwrap();
        assert_eq!(read_loss_csv(&p).unwrap(), curve);
    }
}
