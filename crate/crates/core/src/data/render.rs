//! Anti-aliased filled sprites.

use std::fmt;
use std::str::FromStr;

use crate::error::WwtError;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Shape {
    Disk,
    Square,
    Triangle,
    Cross,
    Ring,
    Diamond,
    Ellipse,
    Frame,
}

pub const SHAPES: [Shape; 8] = [
    Shape::Disk,
    Shape::Square,
    Shape::Triangle,
    Shape::Cross,
    Shape::Ring,
    Shape::Diamond,
    Shape::Ellipse,
    Shape::Frame,
];

impl Shape {
    /// Membership test in sprite coordinates, `(u, v)` in `[-1, 1]^2` with
    /// `v` pointing down.
    pub fn contains(self, u: f64, v: f64) -> bool {
        let (au, av) = (u.abs(), v.abs());
        match self {
            Shape::Disk => u * u + v * v <= 1.0,
            Shape::Square => au <= 0.8 && av <= 0.8,
            Shape::Triangle => (-0.9..=0.8).contains(&v) && au <= (v + 0.9) / 1.7 * 0.95,
            Shape::Cross => (au <= 0.3 && av <= 0.95) || (av <= 0.3 && au <= 0.95),
            Shape::Ring => (0.3..=1.0).contains(&(u * u + v * v)),
            Shape::Diamond => au + av <= 1.0,
            Shape::Ellipse => u * u + (v / 0.55).powi(2) <= 1.0,
            Shape::Frame => {
                let m = au.max(av);
                (0.45..=0.85).contains(&m)
            }
        }
    }
}

/// Canonical shape and color of a class.
pub fn class_look(class: usize, num_classes: usize) -> (Shape, [f32; 3]) {
    let hue = class as f64 / num_classes as f64;
    (SHAPES[class % SHAPES.len()], hsv(hue, 0.85, 0.95))
}

fn hsv(h: f64, s: f64, v: f64) -> [f32; 3] {
    let h6 = (h.rem_euclid(1.0)) * 6.0;
    let i = h6.floor() as usize % 6;
    let f = h6 - h6.floor();
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    let (r, g, b) = match i {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    };
    [r as f32, g as f32, b as f32]
}

/// Fractional coverage of a sprite over an image, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Coverage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

/// Rasterize `shape` with its bounding square of side `size` pixels placed
/// at top-left `(x, y)`, sampling `ss x ss` points per pixel.
pub fn rasterize(
    shape: Shape,
    width: usize,
    height: usize,
    x: f64,
    y: f64,
    size: f64,
    ss: usize,
) -> Coverage {
    let mut data = vec![0.0f32; width * height];
    let half = size / 2.0;
    let (cx, cy) = (x + half, y + half);
    let x0 = x.floor().max(0.0) as usize;
    let y0 = y.floor().max(0.0) as usize;
    let x1 = ((x + size).ceil() as usize).min(width);
    let y1 = ((y + size).ceil() as usize).min(height);
    let n = (ss * ss) as f32;
    for py in y0..y1 {
        for px in x0..x1 {
            let mut hit = 0;
            for sy in 0..ss {
                for sx in 0..ss {
                    let fx = px as f64 + (sx as f64 + 0.5) / ss as f64;
                    let fy = py as f64 + (sy as f64 + 0.5) / ss as f64;
                    if shape.contains((fx - cx) / half, (fy - cy) / half) {
                        hit += 1;
                    }
                }
            }
            data[py * width + px] = hit as f32 / n;
        }
    }
    Coverage {
        width,
        height,
        data,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BackgroundMode {
    Flat,
    Noise,
    Texture,
}

impl FromStr for BackgroundMode {
    type Err = WwtError;

    fn from_str(s: &str) -> Result<Self, WwtError> {
        match s {
            "flat" => Ok(BackgroundMode::Flat),
            "noise" => Ok(BackgroundMode::Noise),
            "texture" => Ok(BackgroundMode::Texture),
            _ => Err(WwtError::Config(format!("unknown background mode '{s}'"))),
        }
    }
}

impl fmt::Display for BackgroundMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BackgroundMode::Flat => "flat",
            BackgroundMode::Noise => "noise",
            BackgroundMode::Texture => "texture",
        })
    }
}
