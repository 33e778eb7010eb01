//! Seeded generation of benchmark and training scenes.

use std::path::Path;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::attributes::{Region, COLORS, MATERIALS, OBJECT_NOUNS, TEXTURES};
use super::render::render_scene;
use super::scene::{AttributeSpec, InstanceAttrs, Level, PersonSpec, RegionSpec, SceneError, SceneSpec};
use crate::geometry::BoundingBox;

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("layout retry budget ({budget}) exhausted for {n} instances: {constraint}")]
    RetryBudget {
        budget: usize,
        n: usize,
        constraint: String,
    },
    #[error("invalid bench config: {0}")]
    Config(String),
    #[error(transparent)]
    Scene(#[from] SceneError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Raster(#[from] super::render::RasterError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchConfig {
    pub min_instances: usize,
    pub max_instances: usize,
    pub area_min: f64,
    pub area_max: f64,
    pub max_iou: f64,
    /// Probability that a scene is a person scene (levels C1–C3).
    pub person_fraction: f64,
    /// Sampling weights of object levels L1..L4.
    pub object_level_weights: [f64; 4],
    /// Box coordinates are multiples of `1 / snap`; 0 disables snapping.
    pub snap: usize,
    pub retry_budget: usize,
    /// Resolution of ground-truth renderings.
    pub resolution: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            min_instances: 3,
            max_instances: 8,
            area_min: 0.10,
            area_max: 0.60,
            max_iou: 0.05,
            person_fraction: 0.5,
            object_level_weights: [0.30, 0.25, 0.25, 0.20],
            snap: 32,
            retry_budget: 500,
            resolution: 64,
        }
    }
}

impl BenchConfig {
    /// Training-mode scenes: one or two disjoint color-only objects.
    pub fn training() -> Self {
        Self {
            min_instances: 1,
            max_instances: 2,
            person_fraction: 0.0,
            object_level_weights: [1.0, 0.0, 0.0, 0.0],
            snap: 8,
            resolution: 16,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), BenchError> {
        let fail = |m: &str| Err(BenchError::Config(m.to_string()));
        if self.min_instances == 0 || self.min_instances > self.max_instances {
            return fail("need 1 <= min_instances <= max_instances");
        }
        if self.max_instances > COLORS.len() {
            return fail("at most 13 instances (colors are distinct within a scene)");
        }
        if !(0.0 < self.area_min && self.area_min < self.area_max && self.area_max <= 1.0) {
            return fail("need 0 < area_min < area_max <= 1");
        }
        if !(0.0..=1.0).contains(&self.person_fraction) {
            return fail("person_fraction must lie in [0, 1]");
        }
        if self.object_level_weights.iter().any(|w| *w < 0.0) || self.object_level_weights.iter().sum::<f64>() <= 0.0 {
            return fail("object level weights must be non-negative with a positive sum");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
struct Rect {
    x0: f64,
    y0: f64,
    x1: f64,
    y1: f64,
}

impl Rect {
    fn area(&self) -> f64 {
        (self.x1 - self.x0) * (self.y1 - self.y0)
    }
}

fn snap_value(v: f64, snap: usize) -> f64 {
    if snap == 0 {
        v
    } else {
        (v * snap as f64).round() / snap as f64
    }
}

fn unit(cfg: &BenchConfig) -> f64 {
    if cfg.snap == 0 {
        1.0 / 64.0
    } else {
        1.0 / cfg.snap as f64
    }
}

/// Region area that still fits a minimum-area box after the gap is removed.
fn leaf_min_area(cfg: &BenchConfig) -> f64 {
    let side = cfg.area_min.sqrt() + unit(cfg);
    side * side
}

/// Recursive guillotine split of `r` into `k` regions, each large enough to
/// host one box of at least `area_min`.
fn split(rng: &mut ChaCha8Rng, r: Rect, k: usize, cfg: &BenchConfig, out: &mut Vec<Rect>) -> Result<(), String> {
    if k == 1 {
        out.push(r);
        return Ok(());
    }
    let k1 = rng.random_range(1..k);
    let k2 = k - k1;
    let a = r.area();
    let need = leaf_min_area(cfg);
    let lo = need * k1 as f64 / a;
    let hi = 1.0 - need * k2 as f64 / a;
    if lo > hi {
        return Err("regions too small for the minimum box area".into());
    }
    let f = rng.random_range(lo..=hi);
    let vertical = (r.x1 - r.x0) >= (r.y1 - r.y0);
    let (first, second) = if vertical {
        let x = snap_value(r.x0 + f * (r.x1 - r.x0), cfg.snap);
        (Rect { x1: x, ..r }, Rect { x0: x, ..r })
    } else {
        let y = snap_value(r.y0 + f * (r.y1 - r.y0), cfg.snap);
        (Rect { y1: y, ..r }, Rect { y0: y, ..r })
    };
    if first.area() < need * k1 as f64 || second.area() < need * k2 as f64 {
        return Err("snapped split leaves a region below the minimum area".into());
    }
    split(rng, first, k1, cfg, out)?;
    split(rng, second, k2, cfg, out)
}

/// Places one box inside `r`, keeping a one-unit gap on interior edges so
/// neighbouring boxes never touch.
fn place(rng: &mut ChaCha8Rng, r: Rect, cfg: &BenchConfig) -> Result<BoundingBox, String> {
    let unit = unit(cfg);
    let avail = Rect {
        x1: if r.x1 < 1.0 { r.x1 - unit } else { r.x1 },
        y1: if r.y1 < 1.0 { r.y1 - unit } else { r.y1 },
        ..r
    };
    let (aw, ah) = (avail.x1 - avail.x0, avail.y1 - avail.y0);
    let cap = cfg.area_max.min(aw * ah);
    if aw <= 0.0 || ah <= 0.0 || cap < cfg.area_min {
        return Err("region cannot host a box within the area bounds".into());
    }
    let target = rng.random_range(cfg.area_min..=cap);
    let ratio = target / (aw * ah);
    let sx = rng.random_range(ratio..=1.0);
    let (w, h) = (aw * sx, ah * ratio / sx);
    let x0 = snap_value(avail.x0 + rng.random_range(0.0..=1.0) * (aw - w), cfg.snap);
    let y0 = snap_value(avail.y0 + rng.random_range(0.0..=1.0) * (ah - h), cfg.snap);
    let x1 = snap_value(x0 + w, cfg.snap).min(avail.x1);
    let y1 = snap_value(y0 + h, cfg.snap).min(avail.y1);
    let b = BoundingBox::new(x0.max(avail.x0), y0.max(avail.y0), x1, y1).map_err(|e| e.to_string())?;
    let a = b.area();
    if a < cfg.area_min - 1e-12 || a > cfg.area_max + 1e-12 {
        return Err(format!("snapped box area {a:.4} outside bounds"));
    }
    Ok(b)
}

/// Samples `n` pairwise non-overlapping boxes satisfying the area bounds.
pub fn sample_layout(rng: &mut ChaCha8Rng, n: usize, cfg: &BenchConfig) -> Result<Vec<BoundingBox>, BenchError> {
    let mut last = String::new();
    for _ in 0..cfg.retry_budget {
        let mut regions = Vec::with_capacity(n);
        let full = Rect {
            x0: 0.0,
            y0: 0.0,
            x1: 1.0,
            y1: 1.0,
        };
        let attempt = split(rng, full, n, cfg, &mut regions)
            .and_then(|_| regions.iter().map(|r| place(rng, *r, cfg)).collect::<Result<Vec<_>, _>>());
        match attempt {
            Ok(boxes) => {
                let max_iou = boxes
                    .iter()
                    .enumerate()
                    .flat_map(|(i, a)| boxes[i + 1..].iter().map(move |b| a.iou(b)))
                    .fold(0.0, f64::max);
                if max_iou <= cfg.max_iou {
                    return Ok(boxes);
                }
                last = format!("pairwise IoU {max_iou:.3} above {}", cfg.max_iou);
            }
            Err(e) => last = e,
        }
    }
    Err(BenchError::RetryBudget {
        budget: cfg.retry_budget,
        n,
        constraint: last,
    })
}

fn sample_level(rng: &mut ChaCha8Rng, cfg: &BenchConfig) -> Level {
    if rng.random::<f64>() < cfg.person_fraction {
        return [Level::C1, Level::C2, Level::C3][rng.random_range(0..3)];
    }
    let total: f64 = cfg.object_level_weights.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (w, level) in cfg.object_level_weights.iter().zip([Level::L1, Level::L2, Level::L3, Level::L4]) {
        if u < *w {
            return level;
        }
        u -= w;
    }
    Level::L4
}

fn sample_instance(rng: &mut ChaCha8Rng, level: Level, color: usize) -> InstanceAttrs {
    match level {
        Level::C1 | Level::C2 | Level::C3 => {
            let k = match level {
                Level::C1 => 1,
                Level::C2 => 2,
                _ => 3,
            };
            let mut picked = sample(rng, 3, k).into_vec();
            picked.sort_unstable();
            let regions = picked
                .into_iter()
                .enumerate()
                .map(|(j, ri)| {
                    let region = Region::ALL[ri];
                    RegionSpec {
                        region,
                        color: if j == 0 { color } else { rng.random_range(0..COLORS.len()) },
                        garment: rng.random_range(0..region.garments().len()),
                    }
                })
                .collect();
            InstanceAttrs::Person(PersonSpec { regions })
        }
        _ => {
            let material = matches!(level, Level::L2 | Level::L4).then(|| rng.random_range(0..MATERIALS.len()));
            let texture = matches!(level, Level::L3 | Level::L4).then(|| rng.random_range(0..TEXTURES.len()));
            InstanceAttrs::Object {
                noun: rng.random_range(0..OBJECT_NOUNS.len()),
                attrs: AttributeSpec { color, material, texture },
            }
        }
    }
}

/// Generates one scene from its own seed.
pub fn generate_scene(seed: u64, cfg: &BenchConfig) -> Result<SceneSpec, BenchError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let level = sample_level(&mut rng, cfg);
    let n = rng.random_range(cfg.min_instances..=cfg.max_instances);
    let boxes = sample_layout(&mut rng, n, cfg)?;
    // primary colors are distinct within a scene
    let colors = sample(&mut rng, COLORS.len(), n).into_vec();
    let items = boxes
        .into_iter()
        .zip(colors)
        .map(|(b, c)| (b, sample_instance(&mut rng, level, c)))
        .collect();
    let scene = SceneSpec::new(seed, level, items);
    scene.validate(cfg.min_instances, cfg.max_instances, (cfg.area_min, cfg.area_max))?;
    Ok(scene)
}

/// `count` scenes; scene `i` is drawn from seed `seed + i`.
pub fn generate_bench(seed: u64, count: usize, cfg: &BenchConfig) -> Result<Vec<SceneSpec>, BenchError> {
    cfg.validate()?;
    if count == 0 {
        return Err(BenchError::Config("count must be at least 1".into()));
    }
    (0..count as u64).map(|i| generate_scene(seed.wrapping_add(i), cfg)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub scene: String,
    pub image: String,
    pub level: Level,
    pub instances: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub seed: u64,
    pub count: usize,
    pub resolution: usize,
    pub scenes: Vec<ManifestEntry>,
}

pub fn scene_stem(i: usize) -> String {
    format!("scene_{i:05}")
}

/// Writes scene JSONs, ground-truth PPMs and `manifest.json` into `dir`.
pub fn write_bench_dir(dir: &Path, seed: u64, scenes: &[SceneSpec], resolution: usize) -> Result<Manifest, BenchError> {
    std::fs::create_dir_all(dir)?;
    let mut entries = Vec::with_capacity(scenes.len());
    for (i, s) in scenes.iter().enumerate() {
        let stem = scene_stem(i);
        let (scene, image) = (format!("{stem}.json"), format!("{stem}.ppm"));
        s.save(&dir.join(&scene))?;
        render_scene(s, resolution, resolution).save_ppm(&dir.join(&image))?;
        entries.push(ManifestEntry {
            scene,
            image,
            level: s.level,
            instances: s.instances.len(),
        });
    }
    let manifest = Manifest {
        seed,
        count: scenes.len(),
        resolution,
        scenes: entries,
    };
    std::fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest).map_err(SceneError::from)?)?;
    Ok(manifest)
}

/// Reads a directory written by [`write_bench_dir`].
pub fn read_bench_dir(dir: &Path) -> Result<(Manifest, Vec<SceneSpec>), BenchError> {
    let text = std::fs::read_to_string(dir.join("manifest.json"))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(SceneError::from)?;
    if manifest.count != manifest.scenes.len() {
        return Err(BenchError::Config(format!(
            "manifest lists {} scenes but declares {}",
            manifest.scenes.len(),
            manifest.count
        )));
    }
    let scenes = manifest
        .scenes
        .iter()
        .map(|e| SceneSpec::load(&dir.join(&e.scene)))
        .collect::<Result<Vec<_>, _>>()?;
    Ok((manifest, scenes))
}
