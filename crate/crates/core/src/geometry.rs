use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
#[error("invalid box [{x0}, {y0}, {x1}, {y1}]: need 0 <= x0 < x1 <= 1 and 0 <= y0 < y1 <= 1")]
pub struct InvalidBox {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

/// Axis-aligned box in normalized image coordinates, origin top-left.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 4]", into = "[f64; 4]")]
pub struct BoundingBox {
    x0: f64,
    y0: f64,
    x1: f64,
    y1: f64,
}

impl BoundingBox {
    pub fn new(x0: f64, y0: f64, x1: f64, y1: f64) -> Result<Self, InvalidBox> {
        let ok = (0.0..=1.0).contains(&x0) && (0.0..=1.0).contains(&x1) && x0 < x1 && (0.0..=1.0).contains(&y0) && (0.0..=1.0).contains(&y1) && y0 < y1;
        if ok {
            Ok(Self { x0, y0, x1, y1 })
        } else {
            Err(InvalidBox { x0, y0, x1, y1 })
        }
    }

    pub fn full() -> Self {
        Self {
            x0: 0.0,
            y0: 0.0,
            x1: 1.0,
            y1: 1.0,
        }
    }

    pub fn x0(&self) -> f64 {
        self.x0
    }
    pub fn y0(&self) -> f64 {
        self.y0
    }
    pub fn x1(&self) -> f64 {
        self.x1
    }
    pub fn y1(&self) -> f64 {
        self.y1
    }

    pub fn coords(&self) -> [f64; 4] {
        [self.x0, self.y0, self.x1, self.y1]
    }

    pub fn width(&self) -> f64 {
        self.x1 - self.x0
    }

    pub fn height(&self) -> f64 {
        self.y1 - self.y0
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    /// Half-open containment: `x0 <= x < x1`, `y0 <= y < y1`.
    pub fn contains(&self, x: f64, y: f64) -> bool {
        self.x0 <= x && x < self.x1 && self.y0 <= y && y < self.y1
    }

    pub fn intersection(&self, other: &Self) -> f64 {
        let w = (self.x1.min(other.x1) - self.x0.max(other.x0)).max(0.0);
        let h = (self.y1.min(other.y1) - self.y0.max(other.y0)).max(0.0);
        w * h
    }

    pub fn iou(&self, other: &Self) -> f64 {
        let inter = self.intersection(other);
        let union = self.area() + other.area() - inter;
        if union <= 0.0 {
            0.0
        } else {
            inter / union
        }
    }

    /// Pixel index ranges `(cols, rows)` whose centers fall inside the box.
    pub fn pixel_span(&self, width: usize, height: usize) -> (std::ops::Range<usize>, std::ops::Range<usize>) {
        let span = |lo: f64, hi: f64, n: usize| {
            let first = ((lo * n as f64) - 0.5).ceil().max(0.0) as usize;
            let end = ((hi * n as f64) - 0.5).ceil().max(0.0) as usize;
            first.min(n)..end.min(n)
        };
        (span(self.x0, self.x1, width), span(self.y0, self.y1, height))
    }
}

impl TryFrom<[f64; 4]> for BoundingBox {
    type Error = InvalidBox;
    fn try_from(c: [f64; 4]) -> Result<Self, InvalidBox> {
        Self::new(c[0], c[1], c[2], c[3])
    }
}

impl From<BoundingBox> for [f64; 4] {
    fn from(b: BoundingBox) -> Self {
        b.coords()
    }
}
