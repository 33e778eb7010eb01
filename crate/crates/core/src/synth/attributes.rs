//! Attribute vocabularies and their pixel anchors.

use serde::{Deserialize, Serialize};

/// The 13 colors with fixed RGB anchors. Pairwise distances stay above
/// `2 * |INK_OFFSET|` so every rendered shade still votes for its base color.
pub const COLORS: [(&str, [u8; 3]); 13] = [
    ("red", [215, 25, 25]),
    ("blue", [25, 60, 215]),
    ("green", [30, 160, 45]),
    ("yellow", [245, 235, 40]),
    ("black", [15, 15, 15]),
    ("white", [245, 245, 245]),
    ("gray", [185, 185, 185]),
    ("brown", [115, 60, 15]),
    ("orange", [250, 125, 0]),
    ("purple", [135, 25, 175]),
    ("pink", [250, 140, 215]),
    ("gold", [185, 150, 30]),
    ("cyan", [20, 215, 220]),
];

pub const MATERIALS: [&str; 8] = [
    "rubber", "fluffy", "metallic", "wooden", "plastic", "fabric", "leather", "glass",
];

pub const TEXTURES: [&str; 4] = ["striped", "plaid", "floral", "polka-dotted"];

pub const OBJECT_NOUNS: [&str; 12] = [
    "bottle", "pillow", "cup", "ball", "vase", "chair", "bag", "box", "lamp", "book", "bowl", "umbrella",
];

/// Mid-gray canvas; its nearest palette entry is "gray".
pub const BACKGROUND: [u8; 3] = [140, 140, 140];

/// Fill for person regions that carry no clothing description.
pub const PERSON_NEUTRAL: [u8; 3] = [245, 0, 245];

/// Per-channel magnitude of the material micro-pattern shift.
pub const MATERIAL_OFFSET: i32 = 10;
/// Per-channel magnitude of the texture ink shift.
pub const INK_OFFSET: i32 = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Region {
    Hat,
    Upper,
    Lower,
}

impl Region {
    pub const ALL: [Region; 3] = [Region::Hat, Region::Upper, Region::Lower];

    pub fn garments(self) -> &'static [&'static str] {
        match self {
            Region::Hat => &["hat", "cap"],
            Region::Upper => &["shirt", "jacket", "sweater"],
            Region::Lower => &["pants", "skirt", "shorts"],
        }
    }

    /// Vertical extent inside the person box, as fractions of its height.
    pub fn band(self) -> (f64, f64) {
        match self {
            Region::Hat => (0.0, 0.25),
            Region::Upper => (0.25, 0.6),
            Region::Lower => (0.6, 1.0),
        }
    }
}

/// Plural garments take no article in captions.
pub fn is_plural(garment: &str) -> bool {
    matches!(garment, "pants" | "shorts")
}

pub fn color_index(word: &str) -> Option<usize> {
    COLORS.iter().position(|(n, _)| *n == word)
}

pub fn material_index(word: &str) -> Option<usize> {
    MATERIALS.iter().position(|n| *n == word)
}

pub fn texture_index(word: &str) -> Option<usize> {
    TEXTURES.iter().position(|n| *n == word)
}

/// Per-channel direction (+1/-1) in which shades of `rgb` are rendered,
/// chosen so shifted values never clip.
pub fn shade_direction(rgb: [u8; 3]) -> [i32; 3] {
    rgb.map(|c| if c >= 128 { -1 } else { 1 })
}

pub fn shade(rgb: [u8; 3], magnitude: i32) -> [u8; 3] {
    let dir = shade_direction(rgb);
    [0, 1, 2].map(|i| (i32::from(rgb[i]) + dir[i] * magnitude) as u8)
}

pub fn sq_dist(a: [u8; 3], b: [u8; 3]) -> i32 {
    (0..3).map(|i| (i32::from(a[i]) - i32::from(b[i])).pow(2)).sum()
}

/// Index of the nearest palette color (ties go to the lower index).
pub fn nearest_color(rgb: [u8; 3]) -> usize {
    let mut best = (i32::MAX, 0);
    for (i, (_, c)) in COLORS.iter().enumerate() {
        let d = sq_dist(rgb, *c);
        if d < best.0 {
            best = (d, i);
        }
    }
    best.1
}
