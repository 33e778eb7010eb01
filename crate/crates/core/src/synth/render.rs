//! Deterministic rasterization of scenes and binary PPM I/O.

use std::io::Write;
use std::path::Path;

use thiserror::Error;

use super::attributes::{shade, Region, BACKGROUND, COLORS, INK_OFFSET, MATERIAL_OFFSET, PERSON_NEUTRAL};
use super::scene::{InstanceAttrs, SceneSpec};
use crate::geometry::BoundingBox;

#[derive(Debug, Error)]
pub enum RasterError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed PPM: {0}")]
    Format(String),
}

/// 8-bit RGB image, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Raster {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<[u8; 3]>,
}

impl Raster {
    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Self {
        Self {
            width,
            height,
            pixels: vec![rgb; width * height],
        }
    }

    pub fn get(&self, x: usize, y: usize) -> [u8; 3] {
        self.pixels[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        self.pixels[y * self.width + x] = rgb;
    }

    pub fn to_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        for p in &self.pixels {
            out.extend_from_slice(p);
        }
        out
    }

    pub fn from_ppm(bytes: &[u8]) -> Result<Self, RasterError> {
        let bad = |m: &str| RasterError::Format(m.to_string());
        let mut fields = Vec::new();
        let mut pos = 0;
        while fields.len() < 4 {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err(bad("truncated header"));
            }
            fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("header not ASCII"))?);
        }
        if fields[0] != "P6" {
            return Err(bad("expected P6"));
        }
        let parse = |s: &str| s.parse::<usize>().map_err(|_| bad("bad number"));
        let (width, height, maxval) = (parse(fields[1])?, parse(fields[2])?, parse(fields[3])?);
        if maxval != 255 {
            return Err(bad("only maxval 255 is supported"));
        }
        pos += 1;
        let body = bytes.get(pos..pos + width * height * 3).ok_or_else(|| bad("truncated pixel data"))?;
        Ok(Self {
            width,
            height,
            pixels: body.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect(),
        })
    }

    pub fn save_ppm(&self, path: &Path) -> Result<(), RasterError> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_ppm())?;
        Ok(())
    }

    pub fn load_ppm(path: &Path) -> Result<Self, RasterError> {
        Self::from_ppm(&std::fs::read(path)?)
    }

    /// Pixel coordinates whose centers fall inside `b`.
    pub fn pixels_in(&self, b: &BoundingBox) -> impl Iterator<Item = (usize, usize)> {
        let (cols, rows) = b.pixel_span(self.width, self.height);
        rows.flat_map(move |y| cols.clone().map(move |x| (x, y)))
    }
}

const BAYER4: [[u8; 4]; 4] = [[0, 8, 2, 10], [12, 4, 14, 6], [3, 11, 1, 9], [15, 7, 13, 5]];

/// Whether pixel `(x, y)` carries the micro-pattern of material `m`.
/// Material `m` lights `2 * (m + 1)` of every 16 pixels.
pub fn material_lit(m: usize, x: usize, y: usize) -> bool {
    usize::from(BAYER4[y % 4][x % 4]) < 2 * (m + 1)
}

/// Whether pixel `(x, y)` is ink for texture `t`
/// (0 stripes, 1 check, 2 diagonal, 3 dots), on an 8-pixel period.
pub fn texture_ink(t: usize, x: usize, y: usize) -> bool {
    let (u, v) = (x % 8, y % 8);
    match t {
        0 => v < 2,
        1 => u == 0 || v == 0,
        2 => (x + y) % 8 < 2,
        _ => {
            let (du, dv) = (u as f64 - 3.5, v as f64 - 3.5);
            du * du + dv * dv < 4.0
        }
    }
}

/// Pixel value of an object with the given attributes at `(x, y)`.
pub fn object_pixel(color: usize, material: Option<usize>, texture: Option<usize>, x: usize, y: usize) -> [u8; 3] {
    let base = COLORS[color].1;
    if texture.is_some_and(|t| texture_ink(t, x, y)) {
        shade(base, INK_OFFSET)
    } else if material.is_some_and(|m| material_lit(m, x, y)) {
        shade(base, MATERIAL_OFFSET)
    } else {
        base
    }
}

/// Sub-box of a person box covering one clothing region.
pub fn region_box(person: &BoundingBox, region: Region) -> BoundingBox {
    let (a, b) = region.band();
    let h = person.height();
    BoundingBox::new(person.x0(), person.y0() + a * h, person.x1(), person.y0() + b * h).expect("band inside a valid box")
}

fn paint_instance(r: &mut Raster, bbox: &BoundingBox, attrs: &InstanceAttrs) {
    let coords: Vec<(usize, usize)> = r.pixels_in(bbox).collect();
    match attrs {
        InstanceAttrs::Object { attrs, .. } => {
            for (x, y) in coords {
                r.set(x, y, object_pixel(attrs.color, attrs.material, attrs.texture, x, y));
            }
        }
        InstanceAttrs::Person(p) => {
            for (x, y) in coords {
                r.set(x, y, PERSON_NEUTRAL);
            }
            for reg in &p.regions {
                let sub = region_box(bbox, reg.region);
                let coords: Vec<(usize, usize)> = r.pixels_in(&sub).collect();
                for (x, y) in coords {
                    r.set(x, y, COLORS[reg.color].1);
                }
            }
        }
    }
}

/// Renders a scene on a mid-gray canvas; later instances paint over
/// earlier ones.
pub fn render_scene(scene: &SceneSpec, width: usize, height: usize) -> Raster {
    let mut r = Raster::filled(width, height, BACKGROUND);
    for inst in &scene.instances {
        paint_instance(&mut r, &inst.bbox, &inst.attrs);
    }
    r
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::scene::{AttributeSpec, Level};

    fn red_full() -> SceneSpec {
        SceneSpec::new(
            0,
            Level::L1,
            vec![(
                BoundingBox::full(),
                InstanceAttrs::Object {
                    noun: 0,
                    attrs: AttributeSpec {
                        color: 0,
                        material: None,
                        texture: None,
                    },
                },
            )],
        )
    }

    #[test]
    fn full_cover_is_all_red() {
        let r = render_scene(&red_full(), 16, 16);
        assert!(r.pixels.iter().all(|p| *p == COLORS[0].1));
    }

    #[test]
    fn outside_boxes_is_background() {
        let mut s = red_full();
        s.instances[0].bbox = BoundingBox::new(0.0, 0.0, 0.5, 0.5).unwrap();
        let r = render_scene(&s, 16, 16);
        assert_eq!(r.get(12, 12), BACKGROUND);
        assert_eq!(r.get(2, 2), COLORS[0].1);
    }

    #[test]
    fn ppm_roundtrip() {
        let r = render_scene(&red_full(), 5, 3);
        let bytes = r.to_ppm();
        assert!(bytes.starts_with(b"P6\n5 3\n255\n"));
        assert_eq!(Raster::from_ppm(&bytes).unwrap(), r);
    }

    #[test]
    fn material_densities_distinct() {
        let counts: Vec<usize> = (0..8)
            .map(|m| (0..4).flat_map(|y| (0..4).map(move |x| (x, y))).filter(|&(x, y)| material_lit(m, x, y)).count())
            .collect();
        assert_eq!(counts, vec![2, 4, 6, 8, 10, 12, 14, 16]);
    }
}
