//! Programmatic evaluation: attribute oracle, multi-attribute accuracy,
//! detector IoU and cross-instance color leakage.

use std::collections::{BTreeMap, VecDeque};

use serde::{Deserialize, Serialize};

use crate::geometry::BoundingBox;
use crate::synth::attributes::{
    nearest_color, shade, sq_dist, BACKGROUND, COLORS, INK_OFFSET, MATERIALS, MATERIAL_OFFSET, PERSON_NEUTRAL, TEXTURES,
};
use crate::synth::render::{material_lit, region_box, texture_ink, Raster};
use crate::synth::scene::{InstanceAttrs, Level, SceneSpec};

/// Boxes covering fewer pixel centers than this are not evaluated.
pub const MIN_PIXELS: usize = 4;

/// Detector search margin around the target box, in pixels.
pub const DILATE_PX: usize = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributeEstimate {
    pub color: usize,
    pub material: Option<usize>,
    pub texture: Option<usize>,
    /// Fraction of pixels voting for `color`.
    pub color_confidence: f64,
    /// Agreement of the pixel classes with the chosen material pattern.
    pub material_confidence: f64,
    /// Agreement of the pixel classes with the chosen texture pattern.
    pub texture_confidence: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Unevaluable {
    pub pixels: usize,
}

fn vote<I: Iterator<Item = usize>>(labels: I, classes: usize) -> (usize, f64) {
    let mut counts = vec![0usize; classes];
    let mut total = 0;
    for l in labels {
        counts[l] += 1;
        total += 1;
    }
    let mut best = 0;
    for (i, &c) in counts.iter().enumerate() {
        if c > counts[best] {
            best = i;
        }
    }
    (best, if total == 0 { 0.0 } else { counts[best] as f64 / total as f64 })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Shade {
    Base,
    Lit,
    Ink,
    Other,
}

fn classify_shade(p: [u8; 3], base: [u8; 3]) -> Shade {
    let cands = [
        (Shade::Base, base),
        (Shade::Lit, shade(base, MATERIAL_OFFSET)),
        (Shade::Ink, shade(base, INK_OFFSET)),
    ];
    let (best, d) = cands
        .iter()
        .map(|(s, c)| (*s, sq_dist(p, *c)))
        .min_by_key(|(_, d)| *d)
        .expect("three candidates");
    // farther than half the lit/base spacing from all three anchors
    if d > 3 * (MATERIAL_OFFSET / 2).pow(2) {
        Shade::Other
    } else {
        best
    }
}

/// Best pattern among "absent" and each candidate; ties keep the earlier one.
fn best_pattern(samples: &[((usize, usize), bool)], n: usize, on: impl Fn(usize, usize, usize) -> bool) -> (Option<usize>, f64) {
    if samples.is_empty() {
        return (None, 0.0);
    }
    let total = samples.len() as f64;
    let agree = |pred: &dyn Fn(usize, usize) -> bool| samples.iter().filter(|((x, y), hit)| pred(*x, *y) == *hit).count() as f64 / total;
    let mut best = (None, agree(&|_, _| false));
    for k in 0..n {
        let a = agree(&|x, y| on(k, x, y));
        if a > best.1 {
            best = (Some(k), a);
        }
    }
    best
}

/// Reads color, material and texture of the object drawn in `b`.
pub fn oracle_extract_attributes(image: &Raster, b: &BoundingBox) -> Result<AttributeEstimate, Unevaluable> {
    let coords: Vec<(usize, usize)> = image.pixels_in(b).collect();
    if coords.len() < MIN_PIXELS {
        return Err(Unevaluable { pixels: coords.len() });
    }
    let (color, color_confidence) = vote(coords.iter().map(|&(x, y)| nearest_color(image.get(x, y))), COLORS.len());
    let base = COLORS[color].1;
    let shades: Vec<((usize, usize), Shade)> = coords.iter().map(|&(x, y)| ((x, y), classify_shade(image.get(x, y), base))).collect();
    let ink: Vec<((usize, usize), bool)> = shades.iter().map(|(p, s)| (*p, *s == Shade::Ink)).collect();
    let (texture, texture_confidence) = best_pattern(&ink, TEXTURES.len(), texture_ink);
    let lit: Vec<((usize, usize), bool)> = shades
        .iter()
        .filter(|(_, s)| *s != Shade::Ink)
        .map(|(p, s)| (*p, *s == Shade::Lit))
        .collect();
    let (material, material_confidence) = best_pattern(&lit, MATERIALS.len(), material_lit);
    Ok(AttributeEstimate {
        color,
        material,
        texture,
        color_confidence,
        material_confidence,
        texture_confidence,
    })
}

/// Palette index of the dominant color in `b`, with the neutral person fill
/// reported as `None`.
pub fn dominant_color_or_neutral(image: &Raster, b: &BoundingBox) -> Result<Option<usize>, Unevaluable> {
    let coords: Vec<(usize, usize)> = image.pixels_in(b).collect();
    if coords.len() < MIN_PIXELS {
        return Err(Unevaluable { pixels: coords.len() });
    }
    let neutral = COLORS.len();
    let label = |p: [u8; 3]| {
        let c = nearest_color(p);
        if sq_dist(p, PERSON_NEUTRAL) < sq_dist(p, COLORS[c].1) {
            neutral
        } else {
            c
        }
    };
    let (best, _) = vote(coords.iter().map(|&(x, y)| label(image.get(x, y))), neutral + 1);
    Ok((best != neutral).then_some(best))
}

/// Whether every specified attribute of the instance is read back correctly.
pub fn instance_correct(image: &Raster, b: &BoundingBox, attrs: &InstanceAttrs) -> Result<bool, Unevaluable> {
    match attrs {
        InstanceAttrs::Object { attrs, .. } => {
            let est = oracle_extract_attributes(image, b)?;
            Ok(est.color == attrs.color
                && attrs.material.is_none_or(|m| est.material == Some(m))
                && attrs.texture.is_none_or(|t| est.texture == Some(t)))
        }
        InstanceAttrs::Person(p) => {
            for r in &p.regions {
                if dominant_color_or_neutral(image, &region_box(b, r.region))? != Some(r.color) {
                    return Ok(false);
                }
            }
            Ok(true)
        }
    }
}

/// Segmentation classes used by the detector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum PixelClass {
    Palette(usize),
    Background,
    Neutral,
}

fn pixel_class(p: [u8; 3]) -> PixelClass {
    let c = nearest_color(p);
    let dc = sq_dist(p, COLORS[c].1);
    let (db, dn) = (sq_dist(p, BACKGROUND), sq_dist(p, PERSON_NEUTRAL));
    if db < dc && db <= dn {
        PixelClass::Background
    } else if dn < dc {
        PixelClass::Neutral
    } else {
        PixelClass::Palette(c)
    }
}

/// Tight box of the largest 4-connected component of the instance's colors
/// inside the dilated target box.
pub fn detect_instance(image: &Raster, b: &BoundingBox, attrs: &InstanceAttrs) -> Option<BoundingBox> {
    let target = |c: PixelClass| match (attrs, c) {
        (InstanceAttrs::Object { attrs, .. }, PixelClass::Palette(i)) => i == attrs.color,
        (InstanceAttrs::Person(p), PixelClass::Palette(i)) => p.regions.iter().any(|r| r.color == i),
        (InstanceAttrs::Person(_), PixelClass::Neutral) => true,
        _ => false,
    };
    let (w, h) = (image.width, image.height);
    let (cols, rows) = b.pixel_span(w, h);
    let (x0, x1) = (cols.start.saturating_sub(DILATE_PX), (cols.end + DILATE_PX).min(w));
    let (y0, y1) = (rows.start.saturating_sub(DILATE_PX), (rows.end + DILATE_PX).min(h));
    if x0 >= x1 || y0 >= y1 {
        return None;
    }
    let (ww, hh) = (x1 - x0, y1 - y0);
    let hit: Vec<bool> = (0..hh * ww).map(|i| target(pixel_class(image.get(x0 + i % ww, y0 + i / ww)))).collect();
    let mut seen = vec![false; hh * ww];
    let mut best: Option<(usize, [usize; 4])> = None;
    for start in 0..hh * ww {
        if !hit[start] || seen[start] {
            continue;
        }
        let mut queue = VecDeque::from([start]);
        seen[start] = true;
        let (mut size, mut bb) = (0, [usize::MAX, usize::MAX, 0, 0]);
        while let Some(i) = queue.pop_front() {
            let (x, y) = (i % ww, i / ww);
            size += 1;
            bb = [bb[0].min(x), bb[1].min(y), bb[2].max(x), bb[3].max(y)];
            let mut push = |j: usize| {
                if hit[j] && !seen[j] {
                    seen[j] = true;
                    queue.push_back(j);
                }
            };
            if x > 0 {
                push(i - 1);
            }
            if x + 1 < ww {
                push(i + 1);
            }
            if y > 0 {
                push(i - ww);
            }
            if y + 1 < hh {
                push(i + ww);
            }
        }
        if best.is_none_or(|(s, _)| size > s) {
            best = Some((size, bb));
        }
    }
    let (_, [bx0, by0, bx1, by1]) = best?;
    BoundingBox::new(
        (x0 + bx0) as f64 / w as f64,
        (y0 + by0) as f64 / h as f64,
        (x0 + bx1 + 1) as f64 / w as f64,
        (y0 + by1 + 1) as f64 / h as f64,
    )
    .ok()
}

/// Whether an object's region is dominated by another object's target color.
/// `None` when the instance is not subject to the leakage measure.
pub fn instance_leaked(image: &Raster, scene: &SceneSpec, i: usize) -> Option<bool> {
    let InstanceAttrs::Object { attrs, .. } = &scene.instances[i].attrs else {
        return None;
    };
    let others: Vec<usize> = scene
        .instances
        .iter()
        .enumerate()
        .filter(|(j, _)| *j != i)
        .filter_map(|(_, inst)| match &inst.attrs {
            InstanceAttrs::Object { attrs, .. } => Some(attrs.color),
            InstanceAttrs::Person(_) => None,
        })
        .collect();
    if others.is_empty() || others.contains(&attrs.color) {
        return None;
    }
    let coords: Vec<(usize, usize)> = image.pixels_in(&scene.instances[i].bbox).collect();
    if coords.len() < MIN_PIXELS {
        return None;
    }
    let (dominant, _) = vote(coords.iter().map(|&(x, y)| nearest_color(image.get(x, y))), COLORS.len());
    Some(others.contains(&dominant))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceRecord {
    pub caption: String,
    /// `None` when unevaluable.
    pub correct: Option<bool>,
    pub iou: f64,
    /// `None` when not subject to the leakage measure.
    pub leaked: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneRecord {
    pub index: usize,
    pub seed: u64,
    pub level: Level,
    pub instances: Vec<InstanceRecord>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LevelScore {
    pub maa: Option<f64>,
    pub correct: usize,
    pub evaluated: usize,
    pub unevaluable: usize,
    pub scenes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// C1..C3 plus "average".
    pub maa_human: BTreeMap<String, Option<f64>>,
    /// L1..L4 plus "average".
    pub maa_obj: BTreeMap<String, Option<f64>>,
    pub levels: BTreeMap<String, LevelScore>,
    pub miou: f64,
    pub leakage: f64,
    pub leakage_evaluated: usize,
    pub unevaluable: usize,
    pub scenes: Vec<SceneRecord>,
}

pub fn evaluate_scene(index: usize, scene: &SceneSpec, image: &Raster) -> SceneRecord {
    let instances = scene
        .instances
        .iter()
        .enumerate()
        .map(|(i, inst)| InstanceRecord {
            caption: inst.caption.clone(),
            correct: instance_correct(image, &inst.bbox, &inst.attrs).ok(),
            iou: detect_instance(image, &inst.bbox, &inst.attrs).map_or(0.0, |d| d.iou(&inst.bbox)),
            leaked: instance_leaked(image, scene, i),
        })
        .collect();
    SceneRecord {
        index,
        seed: scene.seed,
        level: scene.level,
        instances,
    }
}

/// Per-level multi-attribute accuracy from scene records.
pub fn compute_maa(records: &[SceneRecord]) -> BTreeMap<Level, LevelScore> {
    let mut out: BTreeMap<Level, LevelScore> = BTreeMap::new();
    for r in records {
        let e = out.entry(r.level).or_default();
        e.scenes += 1;
        for inst in &r.instances {
            match inst.correct {
                Some(c) => {
                    e.evaluated += 1;
                    e.correct += usize::from(c);
                }
                None => e.unevaluable += 1,
            }
        }
    }
    for s in out.values_mut() {
        s.maa = (s.evaluated > 0).then(|| s.correct as f64 / s.evaluated as f64);
    }
    out
}

/// Mean IoU over all instances; undetected instances count as 0.
pub fn compute_miou(records: &[SceneRecord]) -> f64 {
    let ious: Vec<f64> = records.iter().flat_map(|r| r.instances.iter().map(|i| i.iou)).collect();
    if ious.is_empty() {
        0.0
    } else {
        ious.iter().sum::<f64>() / ious.len() as f64
    }
}

/// Fraction of eligible object instances dominated by another instance's color.
pub fn compute_leakage(records: &[SceneRecord]) -> (f64, usize) {
    let flags: Vec<bool> = records.iter().flat_map(|r| r.instances.iter().filter_map(|i| i.leaked)).collect();
    let n = flags.len();
    let leaked = flags.iter().filter(|f| **f).count();
    (if n == 0 { 0.0 } else { leaked as f64 / n as f64 }, n)
}

/// Scene-count-weighted mean of the per-level scores in `levels`.
fn weighted_average(scores: &BTreeMap<Level, LevelScore>, levels: &[Level]) -> Option<f64> {
    let (mut num, mut den) = (0.0, 0usize);
    for l in levels {
        if let Some(s) = scores.get(l) {
            if let Some(m) = s.maa {
                num += m * s.scenes as f64;
                den += s.scenes;
            }
        }
    }
    (den > 0).then(|| num / den as f64)
}

pub fn build_report(records: Vec<SceneRecord>) -> EvalReport {
    let scores = compute_maa(&records);
    let human = [Level::C1, Level::C2, Level::C3];
    let obj = [Level::L1, Level::L2, Level::L3, Level::L4];
    let table = |levels: &[Level]| {
        let mut m: BTreeMap<String, Option<f64>> = levels
            .iter()
            .map(|l| (l.name().to_string(), scores.get(l).and_then(|s| s.maa)))
            .collect();
        m.insert("average".into(), weighted_average(&scores, levels));
        m
    };
    let (leakage, leakage_evaluated) = compute_leakage(&records);
    EvalReport {
        maa_human: table(&human),
        maa_obj: table(&obj),
        levels: scores.iter().map(|(l, s)| (l.name().to_string(), s.clone())).collect(),
        miou: compute_miou(&records),
        leakage,
        leakage_evaluated,
        unevaluable: scores.values().map(|s| s.unevaluable).sum(),
        scenes: records,
    }
}

/// Evaluates aligned scenes and images.
pub fn evaluate(scenes: &[SceneSpec], images: &[Raster]) -> EvalReport {
    assert_eq!(scenes.len(), images.len(), "scenes and images must align");
    build_report(scenes.iter().zip(images).enumerate().map(|(i, (s, im))| evaluate_scene(i, s, im)).collect())
}

impl EvalReport {
    /// Instance-level accuracy over every evaluated instance.
    pub fn overall_maa(&self) -> f64 {
        let (c, n) = self.levels.values().fold((0, 0), |(c, n), s| (c + s.correct, n + s.evaluated));
        if n == 0 {
            0.0
        } else {
            c as f64 / n as f64
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// One CSV row per instance.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("scene,seed,level,instance,caption,correct,iou,leaked\n");
        for r in &self.scenes {
            for (i, inst) in r.instances.iter().enumerate() {
                let opt = |b: Option<bool>| b.map_or("NA".to_string(), |v| u8::from(v).to_string());
                s.push_str(&format!(
                    "{},{},{},{},\"{}\",{},{:.6},{}\n",
                    r.index,
                    r.seed,
                    r.level,
                    i,
                    inst.caption,
                    opt(inst.correct),
                    inst.iou,
                    opt(inst.leaked)
                ));
            }
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::bench::{generate_bench, BenchConfig};
    use crate::synth::render::render_scene;
    use crate::synth::scene::AttributeSpec;

    fn obj(color: usize, material: Option<usize>, texture: Option<usize>) -> InstanceAttrs {
        InstanceAttrs::Object {
            noun: 0,
            attrs: AttributeSpec { color, material, texture },
        }
    }

    #[test]
    fn recovers_red_plastic_striped() {
        let b = BoundingBox::new(0.1, 0.1, 0.8, 0.9).unwrap();
        let s = SceneSpec::new(0, Level::L4, vec![(b, obj(0, Some(4), Some(0)))]);
        let img = render_scene(&s, 64, 64);
        let est = oracle_extract_attributes(&img, &b).unwrap();
        assert_eq!((est.color, est.material, est.texture), (0, Some(4), Some(0)));
    }

    #[test]
    fn background_reads_gray_without_pattern() {
        let img = Raster::filled(32, 32, BACKGROUND);
        let est = oracle_extract_attributes(&img, &BoundingBox::full()).unwrap();
        assert_eq!(COLORS[est.color].0, "gray");
        assert_eq!((est.material, est.texture), (None, None));
    }

    #[test]
    fn tiny_box_unevaluable() {
        let img = Raster::filled(8, 8, BACKGROUND);
        let b = BoundingBox::new(0.0, 0.0, 0.1, 0.1).unwrap();
        assert!(oracle_extract_attributes(&img, &b).is_err());
    }

    #[test]
    fn ground_truth_roundtrip_every_level() {
        let cfg = BenchConfig::default();
        let scenes = generate_bench(40, 300, &cfg).unwrap();
        let images: Vec<Raster> = scenes.iter().map(|s| render_scene(s, cfg.resolution, cfg.resolution)).collect();
        let report = evaluate(&scenes, &images);
        for l in Level::ALL {
            let s = &report.levels[l.name()];
            assert_eq!(s.maa, Some(1.0), "{l}: {s:?}");
        }
        assert!(report.miou >= 0.95, "{}", report.miou);
        assert_eq!(report.leakage, 0.0);
    }

    #[test]
    fn ratio_and_all_attributes_rule() {
        let b = BoundingBox::new(0.0, 0.0, 1.0, 1.0).unwrap();
        let truth = SceneSpec::new(0, Level::L4, vec![(b, obj(1, Some(2), Some(1)))]);
        let wrong = SceneSpec::new(0, Level::L4, vec![(b, obj(1, Some(2), Some(3)))]);
        let img = render_scene(&wrong, 32, 32);
        assert_eq!(instance_correct(&img, &b, &truth.instances[0].attrs), Ok(false));
        let rec = |c: &[bool]| SceneRecord {
            index: 0,
            seed: 0,
            level: Level::L1,
            instances: c
                .iter()
                .map(|&v| InstanceRecord {
                    caption: String::new(),
                    correct: Some(v),
                    iou: 1.0,
                    leaked: None,
                })
                .collect(),
        };
        assert_eq!(compute_maa(&[rec(&[true, true, false, true])])[&Level::L1].maa, Some(0.75));
    }

    #[test]
    fn swapped_colors_leak_and_background_does_not() {
        let l = BoundingBox::new(0.0, 0.0, 0.5, 1.0).unwrap();
        let r = BoundingBox::new(0.5, 0.0, 1.0, 1.0).unwrap();
        let truth = SceneSpec::new(0, Level::L1, vec![(l, obj(0, None, None)), (r, obj(1, None, None))]);
        let swapped = SceneSpec::new(0, Level::L1, vec![(l, obj(1, None, None)), (r, obj(0, None, None))]);
        let rep = evaluate(&[truth.clone()], &[render_scene(&swapped, 16, 16)]);
        assert_eq!(rep.leakage, 1.0);
        let blank = evaluate(&[truth], &[Raster::filled(16, 16, BACKGROUND)]);
        assert_eq!(blank.leakage, 0.0);
        assert_eq!(blank.maa_obj["L1"], Some(0.0));
    }

    #[test]
    fn detector_iou_closed_forms() {
        let b = BoundingBox::new(0.25, 0.25, 0.75, 0.75).unwrap();
        let s = SceneSpec::new(0, Level::L1, vec![(b, obj(2, None, None))]);
        let img = render_scene(&s, 32, 32);
        assert_eq!(detect_instance(&img, &b, &s.instances[0].attrs).unwrap().iou(&b), 1.0);
        let other = BoundingBox::new(0.0, 0.0, 0.2, 0.2).unwrap();
        assert_eq!(detect_instance(&img, &other, &s.instances[0].attrs), None);
    }

    #[test]
    fn averages_weight_by_scene_count() {
        let scenes = generate_bench(1, 60, &BenchConfig::default()).unwrap();
        let images: Vec<Raster> = scenes.iter().map(|s| render_scene(s, 64, 64)).collect();
        let rep = evaluate(&scenes, &images);
        let expect = |levels: &[&str]| {
            let (mut num, mut den) = (0.0, 0.0);
            for l in levels {
                if let Some(s) = rep.levels.get(*l) {
                    num += s.maa.unwrap() * s.scenes as f64;
                    den += s.scenes as f64;
                }
            }
            num / den
        };
        assert_eq!(rep.maa_obj["average"], Some(expect(&["L1", "L2", "L3", "L4"])));
        assert_eq!(rep.maa_human["average"], Some(expect(&["C1", "C2", "C3"])));
    }
}
