//! Axis-aligned boxes and binary masks on a pixel or patch grid.
//!
//! Boxes are half-open: a box `[x0, x1) x [y0, y1)` covers pixel columns
//! `x0..x1`, so the tight box of a single pixel at `(3, 5)` is `[3, 5, 4, 6]`.

use crate::error::{Result, WwtError};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BBox {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl BBox {
    pub fn new(x0: f64, y0: f64, x1: f64, y1: f64) -> Result<Self> {
        if !(x0.is_finite() && y0.is_finite() && x1.is_finite() && y1.is_finite()) {
            return Err(WwtError::invalid("bbox", "non-finite coordinate"));
        }
        if x1 < x0 || y1 < y0 {
            return Err(WwtError::invalid(
                "bbox",
                format!("inverted box [{x0}, {y0}, {x1}, {y1}]"),
            ));
        }
        Ok(BBox { x0, y0, x1, y1 })
    }

    /// From normalized center/size, clamped into the unit square.
    pub fn from_cxcywh(c: [f64; 4]) -> Self {
        let [cx, cy, w, h] = c;
        BBox {
            x0: (cx - w / 2.0).clamp(0.0, 1.0),
            y0: (cy - h / 2.0).clamp(0.0, 1.0),
            x1: (cx + w / 2.0).clamp(0.0, 1.0),
            y1: (cy + h / 2.0).clamp(0.0, 1.0),
        }
    }

    pub fn to_cxcywh(&self) -> [f64; 4] {
        [
            (self.x0 + self.x1) / 2.0,
            (self.y0 + self.y1) / 2.0,
            self.x1 - self.x0,
            self.y1 - self.y0,
        ]
    }

    pub fn scale(&self, f: f64) -> Self {
        BBox {
            x0: self.x0 * f,
            y0: self.y0 * f,
            x1: self.x1 * f,
            y1: self.y1 * f,
        }
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

    pub fn intersection(&self, o: &BBox) -> f64 {
        let w = (self.x1.min(o.x1) - self.x0.max(o.x0)).max(0.0);
        let h = (self.y1.min(o.y1) - self.y0.max(o.y0)).max(0.0);
        w * h
    }

    /// Intersection over union, 0 when both boxes are empty.
    pub fn iou_or_zero(&self, o: &BBox) -> f64 {
        let inter = self.intersection(o);
        let union = self.area() + o.area() - inter;
        if union > 0.0 {
            inter / union
        } else {
            0.0
        }
    }

    /// Generalized IoU: IoU minus the fraction of the enclosing box not
    /// covered by the union.
    pub fn giou(&self, o: &BBox) -> f64 {
        let inter = self.intersection(o);
        let union = self.area() + o.area() - inter;
        let enc = (self.x1.max(o.x1) - self.x0.min(o.x0)) * (self.y1.max(o.y1) - self.y0.min(o.y0));
        if enc <= 0.0 {
            return if self == o { 1.0 } else { 0.0 };
        }
        let iou = if union > 0.0 { inter / union } else { 0.0 };
        iou - (enc - union) / enc
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BinaryMask {
    pub width: usize,
    pub height: usize,
    /// Row-major.
    pub data: Vec<bool>,
}

impl BinaryMask {
    pub fn new(width: usize, height: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != width * height {
            return Err(WwtError::invalid(
                "mask",
                format!("{} cells for a {width}x{height} mask", data.len()),
            ));
        }
        Ok(BinaryMask {
            width,
            height,
            data,
        })
    }

    pub fn empty(width: usize, height: usize) -> Self {
        BinaryMask {
            width,
            height,
            data: vec![false; width * height],
        }
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, v: bool) {
        self.data[y * self.width + x] = v;
    }

    pub fn area(&self) -> usize {
        self.data.iter().filter(|b| **b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.data.iter().any(|b| *b)
    }

    /// Tight half-open bounds, `None` for an empty mask.
    pub fn bbox(&self) -> Option<BBox> {
        let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(x, y) {
                    x0 = x0.min(x);
                    y0 = y0.min(y);
                    x1 = x1.max(x + 1);
                    y1 = y1.max(y + 1);
                }
            }
        }
        (x0 != usize::MAX).then_some(BBox {
            x0: x0 as f64,
            y0: y0 as f64,
            x1: x1 as f64,
            y1: y1 as f64,
        })
    }

    /// Nearest-neighbor upsampling by an integer factor.
    pub fn upsample(&self, r: usize) -> Self {
        let (w, h) = (self.width * r, self.height * r);
        let mut out = BinaryMask::empty(w, h);
        for y in 0..h {
            for x in 0..w {
                out.data[y * w + x] = self.get(x / r, y / r);
            }
        }
        out
    }

    pub fn intersection(&self, o: &BinaryMask) -> usize {
        self.data
            .iter()
            .zip(&o.data)
            .filter(|(a, b)| **a && **b)
            .count()
    }

    pub fn union(&self, o: &BinaryMask) -> usize {
        self.data
            .iter()
            .zip(&o.data)
            .filter(|(a, b)| **a || **b)
            .count()
    }

    /// Cellwise OR.
    pub fn merge(&mut self, o: &BinaryMask) {
        for (a, b) in self.data.iter_mut().zip(&o.data) {
            *a |= *b;
        }
    }

    pub fn iou_or_zero(&self, o: &BinaryMask) -> f64 {
        let u = self.union(o);
        if u == 0 {
            0.0
        } else {
            self.intersection(o) as f64 / u as f64
        }
    }
}
