//! Scene descriptions, captions and the on-disk scene file.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::attributes::{
    color_index, is_plural, material_index, texture_index, Region, COLORS, MATERIALS, OBJECT_NOUNS, TEXTURES,
};
use crate::geometry::BoundingBox;

pub const SCENE_FILE_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum SceneError {
    #[error("unknown word {0:?}")]
    UnknownWord(String),
    #[error("caption {0:?} does not follow a known template")]
    BadCaption(String),
    #[error("invalid scene: {0}")]
    Invalid(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Level {
    C1,
    C2,
    C3,
    L1,
    L2,
    L3,
    L4,
}

impl Level {
    pub const ALL: [Level; 7] = [Level::C1, Level::C2, Level::C3, Level::L1, Level::L2, Level::L3, Level::L4];

    pub fn is_person(self) -> bool {
        matches!(self, Level::C1 | Level::C2 | Level::C3)
    }

    pub fn name(self) -> &'static str {
        match self {
            Level::C1 => "C1",
            Level::C2 => "C2",
            Level::C3 => "C3",
            Level::L1 => "L1",
            Level::L2 => "L2",
            Level::L3 => "L3",
            Level::L4 => "L4",
        }
    }
}

impl fmt::Display for Level {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Color, optional material and optional texture of an object.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct AttributeSpec {
    pub color: usize,
    pub material: Option<usize>,
    pub texture: Option<usize>,
}

impl AttributeSpec {
    pub fn level(&self) -> Level {
        match (self.material, self.texture) {
            (None, None) => Level::L1,
            (Some(_), None) => Level::L2,
            (None, Some(_)) => Level::L3,
            (Some(_), Some(_)) => Level::L4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct RegionSpec {
    pub region: Region,
    pub color: usize,
    /// Index into `region.garments()`.
    pub garment: usize,
}

/// One to three clothing regions, kept in hat/upper/lower order.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct PersonSpec {
    pub regions: Vec<RegionSpec>,
}

impl PersonSpec {
    pub fn level(&self) -> Level {
        match self.regions.len() {
            1 => Level::C1,
            2 => Level::C2,
            _ => Level::C3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum InstanceAttrs {
    Object { noun: usize, attrs: AttributeSpec },
    Person(PersonSpec),
}

impl InstanceAttrs {
    pub fn level(&self) -> Level {
        match self {
            InstanceAttrs::Object { attrs, .. } => attrs.level(),
            InstanceAttrs::Person(p) => p.level(),
        }
    }

    /// Every palette color named by this instance.
    pub fn colors(&self) -> Vec<usize> {
        match self {
            InstanceAttrs::Object { attrs, .. } => vec![attrs.color],
            InstanceAttrs::Person(p) => p.regions.iter().map(|r| r.color).collect(),
        }
    }

    pub fn caption(&self) -> String {
        caption_from_attrs(self)
    }
}

/// Realizes the caption template for an instance.
///
/// Objects read "a {color} [{texture}] [{material}] {noun}"; persons read
/// "a person wearing {region} and {region} ...", where each region is
/// "[a ]{color} {garment}".
pub fn caption_from_attrs(attrs: &InstanceAttrs) -> String {
    match attrs {
        InstanceAttrs::Object { noun, attrs } => {
            let mut words = vec!["a", COLORS[attrs.color].0];
            if let Some(t) = attrs.texture {
                words.push(TEXTURES[t]);
            }
            if let Some(m) = attrs.material {
                words.push(MATERIALS[m]);
            }
            words.push(OBJECT_NOUNS[*noun]);
            words.join(" ")
        }
        InstanceAttrs::Person(p) => {
            let phrases: Vec<String> = p
                .regions
                .iter()
                .map(|r| {
                    let garment = r.region.garments()[r.garment];
                    let color = COLORS[r.color].0;
                    if is_plural(garment) {
                        format!("{color} {garment}")
                    } else {
                        format!("a {color} {garment}")
                    }
                })
                .collect();
            format!("a person wearing {}", phrases.join(" and "))
        }
    }
}

/// Inverse of [`caption_from_attrs`].
pub fn parse_caption(caption: &str) -> Result<InstanceAttrs, SceneError> {
    let bad = || SceneError::BadCaption(caption.to_string());
    let words: Vec<&str> = caption.split_whitespace().collect();
    if words.len() >= 4 && words[..3] == ["a", "person", "wearing"] {
        let mut regions = Vec::new();
        for phrase in words[3..].split(|w| *w == "and") {
            let phrase = match phrase {
                ["a", rest @ ..] => rest,
                rest => rest,
            };
            let [color, garment] = phrase else { return Err(bad()) };
            let color = color_index(color).ok_or_else(|| SceneError::UnknownWord(color.to_string()))?;
            let (region, g) = Region::ALL
                .iter()
                .find_map(|r| r.garments().iter().position(|x| x == garment).map(|g| (*r, g)))
                .ok_or_else(|| SceneError::UnknownWord(garment.to_string()))?;
            regions.push(RegionSpec { region, color, garment: g });
        }
        if regions.is_empty() || regions.len() > 3 {
            return Err(bad());
        }
        return Ok(InstanceAttrs::Person(PersonSpec { regions }));
    }
    let ["a", color, middle @ .., noun] = words.as_slice() else {
        return Err(bad());
    };
    let color = color_index(color).ok_or_else(|| SceneError::UnknownWord(color.to_string()))?;
    let noun = OBJECT_NOUNS
        .iter()
        .position(|n| n == noun)
        .ok_or_else(|| SceneError::UnknownWord(noun.to_string()))?;
    let (texture, material) = match middle {
        [] => (None, None),
        [w] => match (texture_index(w), material_index(w)) {
            (Some(t), _) => (Some(t), None),
            (None, Some(m)) => (None, Some(m)),
            _ => return Err(SceneError::UnknownWord(w.to_string())),
        },
        [t, m] => (
            Some(texture_index(t).ok_or_else(|| SceneError::UnknownWord(t.to_string()))?),
            Some(material_index(m).ok_or_else(|| SceneError::UnknownWord(m.to_string()))?),
        ),
        _ => return Err(bad()),
    };
    Ok(InstanceAttrs::Object {
        noun,
        attrs: AttributeSpec { color, material, texture },
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneInstance {
    pub bbox: BoundingBox,
    pub caption: String,
    pub attrs: InstanceAttrs,
}

/// A synthetic ground-truth scene.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    pub seed: u64,
    pub level: Level,
    pub global_prompt: String,
    pub instances: Vec<SceneInstance>,
}

/// Instance captions joined with commas.
pub fn global_prompt(captions: &[String]) -> String {
    captions.join(", ")
}

impl SceneSpec {
    pub fn new(seed: u64, level: Level, items: Vec<(BoundingBox, InstanceAttrs)>) -> Self {
        let instances: Vec<SceneInstance> = items
            .into_iter()
            .map(|(bbox, attrs)| SceneInstance {
                bbox,
                caption: caption_from_attrs(&attrs),
                attrs,
            })
            .collect();
        let captions: Vec<String> = instances.iter().map(|i| i.caption.clone()).collect();
        Self {
            seed,
            level,
            global_prompt: global_prompt(&captions),
            instances,
        }
    }

    pub fn boxes(&self) -> Vec<BoundingBox> {
        self.instances.iter().map(|i| i.bbox).collect()
    }

    pub fn captions(&self) -> Vec<String> {
        self.instances.iter().map(|i| i.caption.clone()).collect()
    }

    /// Checks the scene's internal consistency and its bounds on instance
    /// count and per-box relative area.
    pub fn validate(&self, min_instances: usize, max_instances: usize, area: (f64, f64)) -> Result<(), SceneError> {
        let n = self.instances.len();
        if n < min_instances || n > max_instances {
            return Err(SceneError::Invalid(format!(
                "{n} instances outside [{min_instances}, {max_instances}]"
            )));
        }
        for (i, inst) in self.instances.iter().enumerate() {
            let a = inst.bbox.area();
            if a < area.0 - 1e-12 || a > area.1 + 1e-12 {
                return Err(SceneError::Invalid(format!("instance {i} area {a:.4} outside bounds")));
            }
            if inst.caption != caption_from_attrs(&inst.attrs) {
                return Err(SceneError::Invalid(format!("instance {i} caption does not match attrs")));
            }
            if inst.attrs.level() != self.level {
                return Err(SceneError::Invalid(format!("instance {i} level differs from scene level")));
            }
        }
        if self.global_prompt != global_prompt(&self.captions()) {
            return Err(SceneError::Invalid("global prompt is not the joined captions".into()));
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String, SceneError> {
        Ok(serde_json::to_string_pretty(&SceneFile::from(self))?)
    }

    pub fn from_json(s: &str) -> Result<Self, SceneError> {
        let file: SceneFile = serde_json::from_str(s)?;
        file.try_into()
    }

    pub fn save(&self, path: &Path) -> Result<(), SceneError> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, SceneError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SceneFile {
    version: u32,
    seed: u64,
    level: Level,
    global_prompt: String,
    instances: Vec<InstanceFile>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct InstanceFile {
    #[serde(rename = "box")]
    bbox: BoundingBox,
    caption: String,
    attrs: AttrsFile,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
enum AttrsFile {
    Object {
        noun: String,
        color: String,
        material: Option<String>,
        texture: Option<String>,
    },
    Person {
        regions: Vec<RegionFile>,
    },
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RegionFile {
    region: Region,
    color: String,
    garment: String,
}

impl From<&InstanceAttrs> for AttrsFile {
    fn from(a: &InstanceAttrs) -> Self {
        match a {
            InstanceAttrs::Object { noun, attrs } => AttrsFile::Object {
                noun: OBJECT_NOUNS[*noun].into(),
                color: COLORS[attrs.color].0.into(),
                material: attrs.material.map(|m| MATERIALS[m].into()),
                texture: attrs.texture.map(|t| TEXTURES[t].into()),
            },
            InstanceAttrs::Person(p) => AttrsFile::Person {
                regions: p
                    .regions
                    .iter()
                    .map(|r| RegionFile {
                        region: r.region,
                        color: COLORS[r.color].0.into(),
                        garment: r.region.garments()[r.garment].into(),
                    })
                    .collect(),
            },
        }
    }
}

impl TryFrom<AttrsFile> for InstanceAttrs {
    type Error = SceneError;
    fn try_from(a: AttrsFile) -> Result<Self, SceneError> {
        let color = |w: &str| color_index(w).ok_or_else(|| SceneError::UnknownWord(w.into()));
        Ok(match a {
            AttrsFile::Object {
                noun,
                color: c,
                material,
                texture,
            } => InstanceAttrs::Object {
                noun: OBJECT_NOUNS
                    .iter()
                    .position(|n| *n == noun)
                    .ok_or(SceneError::UnknownWord(noun))?,
                attrs: AttributeSpec {
                    color: color(&c)?,
                    material: material
                        .map(|m| material_index(&m).ok_or(SceneError::UnknownWord(m)))
                        .transpose()?,
                    texture: texture
                        .map(|t| texture_index(&t).ok_or(SceneError::UnknownWord(t)))
                        .transpose()?,
                },
            },
            AttrsFile::Person { regions } => InstanceAttrs::Person(PersonSpec {
                regions: regions
                    .into_iter()
                    .map(|r| {
                        let garment = r
                            .region
                            .garments()
                            .iter()
                            .position(|g| *g == r.garment)
                            .ok_or(SceneError::UnknownWord(r.garment))?;
                        Ok(RegionSpec {
                            region: r.region,
                            color: color(&r.color)?,
                            garment,
                        })
                    })
                    .collect::<Result<_, SceneError>>()?,
            }),
        })
    }
}

impl From<&SceneSpec> for SceneFile {
    fn from(s: &SceneSpec) -> Self {
        SceneFile {
            version: SCENE_FILE_VERSION,
            seed: s.seed,
            level: s.level,
            global_prompt: s.global_prompt.clone(),
            instances: s
                .instances
                .iter()
                .map(|i| InstanceFile {
                    bbox: i.bbox,
                    caption: i.caption.clone(),
                    attrs: (&i.attrs).into(),
                })
                .collect(),
        }
    }
}

impl TryFrom<SceneFile> for SceneSpec {
    type Error = SceneError;
    fn try_from(f: SceneFile) -> Result<Self, SceneError> {
        if f.version != SCENE_FILE_VERSION {
            return Err(SceneError::Invalid(format!("unsupported scene version {}", f.version)));
        }
        let instances = f
            .instances
            .into_iter()
            .map(|i| {
                Ok(SceneInstance {
                    bbox: i.bbox,
                    caption: i.caption,
                    attrs: i.attrs.try_into()?,
                })
            })
            .collect::<Result<Vec<_>, SceneError>>()?;
        Ok(SceneSpec {
            seed: f.seed,
            level: f.level,
            global_prompt: f.global_prompt,
            instances,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn obj(color: &str, material: Option<&str>, texture: Option<&str>, noun: &str) -> InstanceAttrs {
        InstanceAttrs::Object {
            noun: OBJECT_NOUNS.iter().position(|n| *n == noun).unwrap(),
            attrs: AttributeSpec {
                color: color_index(color).unwrap(),
                material: material.map(|m| material_index(m).unwrap()),
                texture: texture.map(|t| texture_index(t).unwrap()),
            },
        }
    }

    #[test]
    fn object_templates() {
        assert_eq!(caption_from_attrs(&obj("green", Some("plastic"), None, "bottle")), "a green plastic bottle");
        assert_eq!(
            caption_from_attrs(&obj("red", Some("fabric"), Some("striped"), "pillow")),
            "a red striped fabric pillow"
        );
    }

    #[test]
    fn person_template() {
        let p = InstanceAttrs::Person(PersonSpec {
            regions: vec![
                RegionSpec {
                    region: Region::Hat,
                    color: color_index("red").unwrap(),
                    garment: 0,
                },
                RegionSpec {
                    region: Region::Lower,
                    color: color_index("blue").unwrap(),
                    garment: 0,
                },
            ],
        });
        let c = caption_from_attrs(&p);
        assert_eq!(c, "a person wearing a red hat and blue pants");
        assert_eq!(parse_caption(&c).unwrap(), p);
    }

    #[test]
    fn parse_rejects_junk() {
        assert!(parse_caption("the red bottle").is_err());
        assert!(parse_caption("a mauve bottle").is_err());
        assert!(parse_caption("a person wearing").is_err());
    }

    #[test]
    fn scene_json_roundtrip() {
        let s = SceneSpec::new(
            3,
            Level::L2,
            vec![
                (BoundingBox::new(0.0, 0.0, 0.5, 0.5).unwrap(), obj("gold", Some("glass"), None, "vase")),
                (BoundingBox::new(0.5, 0.5, 1.0, 1.0).unwrap(), obj("pink", Some("rubber"), None, "ball")),
            ],
        );
        assert_eq!(s.global_prompt, "a gold glass vase, a pink rubber ball");
        let back = SceneSpec::from_json(&s.to_json().unwrap()).unwrap();
        assert_eq!(back, s);
        let v: serde_json::Value = serde_json::from_str(&s.to_json().unwrap()).unwrap();
        assert_eq!(v["instances"][0]["box"], serde_json::json!([0.0, 0.0, 0.5, 0.5]));
        assert_eq!(v["version"], 1);
    }
}
