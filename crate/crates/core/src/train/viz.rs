use std::fs;
use std::path::{Path, PathBuf};

use super::infer::infer;
use crate::data::{class_look, write_ppm};
use crate::error::{Result, WwtError};
use crate::geometry::BBox;
use crate::heads::{
    bilinear_upsample, class_activation, discover_regions, segment, Background, DiscoveryParams,
};
use crate::image::Image;
use crate::model::{WwtConfig, WwtParams};

/// Opacity of heat overlays at full mask strength.
pub const OVERLAY_ALPHA: f64 = 0.6;

const HEAT: [f32; 3] = [1.0, 0.15, 0.0];
const BOX: [f32; 3] = [0.0, 1.0, 0.2];

/// `(1 - alpha m) p + alpha m c` per channel, with `m` clamped to `[0, 1]`.
pub fn blend(pixel: [f32; 3], m: f64, colour: [f32; 3], alpha: f64) -> [f32; 3] {
    let w = (alpha * m.clamp(0.0, 1.0)) as f32;
    [0, 1, 2].map(|c| (1.0 - w) * pixel[c] + w * colour[c])
}

fn heat_overlay(image: &Image, map: &[f64]) -> Image {
    let mut out = image.clone();
    for y in 0..image.height {
        for x in 0..image.width {
            let m = map[y * image.width + x];
            out.set_pixel(x, y, blend(image.pixel(x, y), m, HEAT, OVERLAY_ALPHA));
        }
    }
    out
}

fn min_max(v: &[f64]) -> Vec<f64> {
    let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        return vec![0.0; v.len()];
    }
    v.iter().map(|x| (x - lo) / (hi - lo)).collect()
}

fn draw_box(img: &mut Image, b: &BBox) {
    let (x0, y0) = (b.x0 as usize, b.y0 as usize);
    let x1 = (b.x1 as usize).min(img.width).saturating_sub(1);
    let y1 = (b.y1 as usize).min(img.height).saturating_sub(1);
    for x in x0..=x1 {
        img.set_pixel(x, y0, BOX);
        img.set_pixel(x, y1, BOX);
    }
    for y in y0..=y1 {
        img.set_pixel(x0, y, BOX);
        img.set_pixel(x1, y, BOX);
    }
}

/// Per image: one heat overlay per slot (`<name>_slot<k>.ppm`), the class
/// activation of the predicted class (`_ca`), the weakly supervised label
/// map (`_seg`) and discovery boxes (`_boxes`). Slot maps are the rectified
/// head-averaged masks, min-max scaled, so an all-zero mask leaves the image
/// unchanged.
pub fn export_overlays(
    cfg: &WwtConfig,
    params: &WwtParams<f32>,
    images: &[(String, Image)],
    out: &Path,
    discovery: &DiscoveryParams,
    bg_threshold: f64,
) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(out).map_err(|e| WwtError::io(out, e))?;
    let (g, p) = (cfg.grid(), cfg.patch_size);
    let mut written = Vec::new();
    let mut save = |name: String, img: &Image| -> Result<()> {
        let path = out.join(name);
        write_ppm(&path, img)?;
        written.push(path);
        Ok(())
    };
    for (name, image) in images {
        let inf = infer(cfg, params, image)?;
        for s in 0..cfg.slots {
            let col: Vec<f64> = (0..cfg.tokens())
                .map(|t| inf.mean_mask.at2(t, s).max(0.0))
                .collect();
            let map = bilinear_upsample(&min_max(&col), g, p);
            save(format!("{name}_slot{s}.ppm"), &heat_overlay(image, &map))?;
        }
        let class = inf.logits.predicted_class();
        let ca = class_activation(&inf.logits, &inf.mean_mask, g, class)?;
        save(
            format!("{name}_ca.ppm"),
            &heat_overlay(image, &bilinear_upsample(&ca.normalized(), g, p)),
        )?;
        let seg = segment(
            &inf.mean_mask,
            &inf.logits.slot_probs(),
            g,
            p,
            Background::Threshold(bg_threshold),
        )?;
        let mut lab = image.clone();
        for y in 0..image.height {
            for x in 0..image.width {
                let l = seg.label(x, y);
                if l < cfg.num_classes {
                    let colour = class_look(l, cfg.num_classes).1;
                    lab.set_pixel(x, y, blend(image.pixel(x, y), 1.0, colour, OVERLAY_ALPHA));
                }
            }
        }
        save(format!("{name}_seg.ppm"), &lab)?;
        let mut boxes = image.clone();
        for r in discover_regions(&inf.masks, g, discovery)? {
            draw_box(&mut boxes, &r.pixel_box(p));
        }
        save(format!("{name}_boxes.ppm"), &boxes)?;
    }
    Ok(written)
}
