//! Synthetic multi-sprite scenes with labels, instance masks and boxes.

mod io;
mod render;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Result, WwtError};
use crate::geometry::{BBox, BinaryMask};
use crate::image::Image;
use crate::kv_section;

pub use io::{
    load_dataset, read_pgm, read_ppm, read_records, save_dataset, write_pgm, write_ppm,
    write_records, PredictionRecord, MANIFEST_VERSION,
};
pub use render::{class_look, rasterize, BackgroundMode, Coverage, Shape, SHAPES};

/// Largest instance count a scene may hold.
pub const MAX_INSTANCES: usize = 8;
/// Placement attempts before a scene is redrawn from the next sub-seed.
const PLACEMENT_TRIES: usize = 20;
/// Smallest visible mask area of any instance, in pixels.
const MIN_VISIBLE: usize = 24;

#[derive(Clone, Debug, PartialEq)]
pub struct GenSpec {
    pub seed: u64,
    pub image_size: usize,
    pub num_classes: usize,
    pub min_instances: usize,
    pub max_instances: usize,
    /// Sprite side length as a fraction of the image side.
    pub min_scale: f64,
    pub max_scale: f64,
    pub background: BackgroundMode,
    pub train_size: usize,
    pub val_size: usize,
    /// Samples per pixel side when rasterizing.
    pub supersample: usize,
}

kv_section!(GenSpec {
    seed,
    image_size,
    num_classes,
    min_instances,
    max_instances,
    min_scale,
    max_scale,
    background,
    train_size,
    val_size,
    supersample,
});

impl Default for GenSpec {
    fn default() -> Self {
        GenSpec {
            seed: 0,
            image_size: 64,
            num_classes: 8,
            min_instances: 1,
            max_instances: 3,
            min_scale: 0.25,
            max_scale: 0.5,
            background: BackgroundMode::Flat,
            train_size: 5000,
            val_size: 1000,
            supersample: 4,
        }
    }
}

impl GenSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(WwtError::Config(format!("dataset spec: {m}")));
        if self.image_size < 8 {
            return bad("image_size must be >= 8");
        }
        if self.num_classes < 2 {
            return bad("num_classes must be >= 2");
        }
        if self.min_instances < 1
            || self.min_instances > self.max_instances
            || self.max_instances > MAX_INSTANCES
        {
            return bad("need 1 <= min_instances <= max_instances <= 8");
        }
        if !(self.min_scale > 0.0 && self.min_scale <= self.max_scale && self.max_scale <= 1.0) {
            return bad("need 0 < min_scale <= max_scale <= 1");
        }
        if self.supersample == 0 {
            return bad("supersample must be >= 1");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Instance {
    pub class: usize,
    pub mask: BinaryMask,
    /// Tight pixel box of `mask`.
    pub bbox: BBox,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub image: Image,
    /// Class of the largest instance.
    pub label: usize,
    /// In drawing order; later instances occlude earlier ones.
    pub instances: Vec<Instance>,
    /// Label used for pixels outside every instance.
    pub background: usize,
    /// Sub-seed that produced a valid layout.
    pub attempt: u32,
}

impl Scene {
    /// Row-major per-pixel labels with `background` outside instances.
    pub fn label_map(&self) -> Vec<usize> {
        let mut out = vec![self.background; self.image.width * self.image.height];
        for inst in &self.instances {
            for (o, m) in out.iter_mut().zip(&inst.mask.data) {
                if *m {
                    *o = inst.class;
                }
            }
        }
        out
    }

    pub fn boxes(&self) -> Vec<BBox> {
        self.instances.iter().map(|i| i.bbox).collect()
    }

    pub fn largest(&self) -> &Instance {
        let mut best = &self.instances[0];
        for i in &self.instances[1..] {
            if i.mask.area() > best.mask.area() {
                best = i;
            }
        }
        best
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub spec: GenSpec,
    pub train: Vec<Scene>,
    pub val: Vec<Scene>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
}

impl Split {
    fn tag(self) -> u64 {
        match self {
            Split::Train => 0,
            Split::Val => 1,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
        }
    }
}

/// Purposes that key independent random streams.
#[derive(Clone, Copy)]
enum Purpose {
    Label = 1,
    Layout = 2,
    Background = 3,
}

/// Generator for one `(seed, split, index, attempt)` and purpose. Streams
/// never share state, so adding a purpose leaves existing draws unchanged.
fn stream(seed: u64, split: Split, index: u64, attempt: u32, purpose: Purpose) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&split.tag().to_le_bytes());
    key[16..24].copy_from_slice(&index.to_le_bytes());
    key[24..28].copy_from_slice(&attempt.to_le_bytes());
    let mut rng = ChaCha8Rng::from_seed(key);
    rng.set_stream(purpose as u64);
    rng
}

/// Image label for a scene: each consecutive block of `num_classes` indices
/// holds every class once, in a seeded order.
fn stratified_label(spec: &GenSpec, split: Split, index: usize) -> usize {
    let c = spec.num_classes;
    let block = (index / c) as u64;
    let mut perm: Vec<usize> = (0..c).collect();
    perm.shuffle(&mut stream(spec.seed, split, block, 0, Purpose::Label));
    perm[index % c]
}

fn background_image(spec: &GenSpec, rng: &mut ChaCha8Rng) -> Image {
    let n = spec.image_size;
    let base: f32 = rng.gen_range(0.15..0.45);
    let tint: [f32; 3] = [
        rng.gen_range(-0.04..0.04),
        rng.gen_range(-0.04..0.04),
        rng.gen_range(-0.04..0.04),
    ];
    let mut img = Image::filled(n, n, [base + tint[0], base + tint[1], base + tint[2]]);
    match spec.background {
        BackgroundMode::Flat => {}
        BackgroundMode::Noise => {
            for v in img.data.iter_mut() {
                *v += rng.gen_range(-0.06..0.06);
            }
        }
        BackgroundMode::Texture => {
            let freq: f64 = rng.gen_range(0.2..0.6);
            let angle: f64 = rng.gen_range(0.0..std::f64::consts::PI);
            let (ca, sa) = (angle.cos(), angle.sin());
            for y in 0..n {
                for x in 0..n {
                    let s = (0.06 * ((x as f64 * ca + y as f64 * sa) * freq).sin()) as f32;
                    let i = (y * n + x) * 3;
                    for c in 0..3 {
                        img.data[i + c] += s;
                    }
                }
            }
        }
    }
    for v in img.data.iter_mut() {
        *v = v.clamp(0.0, 1.0);
    }
    img
}

/// Round to 8 bits so the image survives a PPM round trip unchanged.
fn quantize(img: &mut Image) {
    let bytes = img.to_rgb8();
    for (v, b) in img.data.iter_mut().zip(bytes) {
        *v = b as f32 / 255.0;
    }
}

struct Placed {
    class: usize,
    cov: Coverage,
}

fn try_layout(
    spec: &GenSpec,
    label: usize,
    rng: &mut ChaCha8Rng,
) -> Option<(Vec<Placed>, Vec<BinaryMask>)> {
    let n = spec.image_size as f64;
    let count = rng.gen_range(spec.min_instances..=spec.max_instances);
    let mid = (spec.min_scale + spec.max_scale) / 2.0;
    let dominant: f64 = rng.gen_range(mid..=spec.max_scale) * n;
    let mut sprites = vec![(label, dominant, true)];
    for _ in 1..count {
        let hi = (0.75 * dominant).max(spec.min_scale * n);
        let size = rng.gen_range(spec.min_scale * n..=hi);
        sprites.push((rng.gen_range(0..spec.num_classes), size, false));
    }
    sprites.shuffle(rng);
    let dom_index = sprites.iter().position(|s| s.2)?;
    let mut placed = Vec::with_capacity(count);
    for &(class, size, _) in &sprites {
        let x = rng.gen_range(0.0..=(n - size));
        let y = rng.gen_range(0.0..=(n - size));
        let (shape, _) = class_look(class, spec.num_classes);
        let cov = rasterize(
            shape,
            spec.image_size,
            spec.image_size,
            x,
            y,
            size,
            spec.supersample,
        );
        placed.push(Placed { class, cov });
    }
    // each pixel belongs to the last sprite covering at least half of it
    let px = spec.image_size * spec.image_size;
    let mut owner = vec![usize::MAX; px];
    for (k, p) in placed.iter().enumerate() {
        for (o, c) in owner.iter_mut().zip(&p.cov.data) {
            if *c >= 0.5 {
                *o = k;
            }
        }
    }
    let masks: Vec<BinaryMask> = (0..placed.len())
        .map(|k| BinaryMask {
            width: spec.image_size,
            height: spec.image_size,
            data: owner.iter().map(|o| *o == k).collect(),
        })
        .collect();
    let areas: Vec<usize> = masks.iter().map(|m| m.area()).collect();
    if areas.iter().any(|a| *a < MIN_VISIBLE) {
        return None;
    }
    if (0..areas.len()).any(|k| k != dom_index && areas[k] >= areas[dom_index]) {
        return None;
    }
    Some((placed, masks))
}

/// Scene `index` of `split`; depends only on the spec and the index.
pub fn generate_scene(spec: &GenSpec, split: Split, index: usize) -> Result<Scene> {
    let label = stratified_label(spec, split, index);
    for attempt in 0..u32::MAX {
        let mut rng = stream(spec.seed, split, index as u64, attempt, Purpose::Layout);
        let mut layout = None;
        for _ in 0..PLACEMENT_TRIES {
            if let Some(l) = try_layout(spec, label, &mut rng) {
                layout = Some(l);
                break;
            }
        }
        let Some((placed, masks)) = layout else {
            if attempt >= 1000 {
                return Err(WwtError::Data(format!("no valid layout for scene {index}")));
            }
            continue;
        };
        let mut bg_rng = stream(spec.seed, split, index as u64, attempt, Purpose::Background);
        let mut image = background_image(spec, &mut bg_rng);
        for p in &placed {
            let (_, color) = class_look(p.class, spec.num_classes);
            for (i, c) in p.cov.data.iter().enumerate() {
                if *c > 0.0 {
                    for ch in 0..3 {
                        let v = &mut image.data[i * 3 + ch];
                        *v = (1.0 - c) * *v + c * color[ch];
                    }
                }
            }
        }
        quantize(&mut image);
        let instances = placed
            .iter()
            .zip(masks)
            .map(|(p, mask)| Instance {
                class: p.class,
                bbox: mask.bbox().expect("visible instance"),
                mask,
            })
            .collect();
        return Ok(Scene {
            image,
            label,
            instances,
            background: spec.num_classes,
            attempt,
        });
    }
    unreachable!("attempt loop returns")
}

pub fn generate_split(spec: &GenSpec, split: Split, count: usize) -> Result<Vec<Scene>> {
    spec.validate()?;
    (0..count)
        .into_par_iter()
        .map(|i| generate_scene(spec, split, i))
        .collect()
}

pub fn generate(spec: &GenSpec) -> Result<Dataset> {
    Ok(Dataset {
        spec: spec.clone(),
        train: generate_split(spec, Split::Train, spec.train_size)?,
        val: generate_split(spec, Split::Val, spec.val_size)?,
    })
}

/// The same sprite translated to several offsets on a fixed flat background.
/// `origin` is the sprite's top-left corner at offset zero; every offset must
/// keep the sprite inside the frame.
pub fn probe_stimuli(
    image_size: usize,
    num_classes: usize,
    class: usize,
    sprite: usize,
    origin: (usize, usize),
    offsets: &[(isize, isize)],
) -> Result<Vec<Image>> {
    if class >= num_classes {
        return Err(WwtError::invalid(
            "probe_stimuli",
            format!("class {class} >= {num_classes}"),
        ));
    }
    let (shape, color) = class_look(class, num_classes);
    let cov = rasterize(shape, sprite, sprite, 0.0, 0.0, sprite as f64, 4);
    let bg = [0.3f32, 0.3, 0.3];
    let mut out = Vec::with_capacity(offsets.len());
    for &(dx, dy) in offsets {
        let x0 = origin.0 as isize + dx;
        let y0 = origin.1 as isize + dy;
        if x0 < 0
            || y0 < 0
            || x0 as usize + sprite > image_size
            || y0 as usize + sprite > image_size
        {
            return Err(WwtError::invalid(
                "probe_stimuli",
                format!("offset ({dx}, {dy}) moves the sprite out of frame"),
            ));
        }
        let mut img = Image::filled(image_size, image_size, bg);
        for y in 0..sprite {
            for x in 0..sprite {
                let c = cov.data[y * sprite + x];
                let px = [0, 1, 2].map(|ch| (1.0 - c) * bg[ch] + c * color[ch]);
                img.set_pixel(x0 as usize + x, y0 as usize + y, px);
            }
        }
        quantize(&mut img);
        out.push(img);
    }
    Ok(out)
}
