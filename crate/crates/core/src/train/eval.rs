use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::infer::{infer, Inference};
use crate::data::{write_pgm, write_records, PredictionRecord, Scene};
use crate::error::{Result, WwtError};
use crate::geometry::{BBox, BinaryMask};
use crate::heads::{
    bilinear_upsample, class_activation, discover_regions, segment, select_single_object,
    Background, DiscoveryParams,
};
use crate::metrics::{
    corloc, drop_increase, mbo, recall_at_iou, EvalReport, MiouAccumulator, OverlapMode,
};
use crate::model::{WwtConfig, WwtParams};
use crate::tensor::Tensor;

const IOU_THRESH: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EvalTask {
    /// Image-level accuracy.
    Classify,
    /// Unsupervised proposals from raw masks: CorLoc, recall, mBO.
    Discover,
    /// Segmentation head label maps: mIoU.
    Segment,
    /// Class-activation label maps from the classification head: mIoU.
    WeakSegment,
    /// Detection head boxes: recall and CorLoc.
    Detect,
    /// Class-activation attribution: Drop and Increase.
    Explain,
    /// Slot masks of the first slots: mBO.
    Ocl,
}

impl FromStr for EvalTask {
    type Err = WwtError;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "classify" => EvalTask::Classify,
            "discover" => EvalTask::Discover,
            "segment" => EvalTask::Segment,
            "weak-segment" => EvalTask::WeakSegment,
            "detect" => EvalTask::Detect,
            "explain" => EvalTask::Explain,
            "ocl" => EvalTask::Ocl,
            _ => return Err(WwtError::Config(format!("unknown evaluation task '{s}'"))),
        })
    }
}

impl fmt::Display for EvalTask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EvalTask::Classify => "classify",
            EvalTask::Discover => "discover",
            EvalTask::Segment => "segment",
            EvalTask::WeakSegment => "weak-segment",
            EvalTask::Detect => "detect",
            EvalTask::Explain => "explain",
            EvalTask::Ocl => "ocl",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalOptions {
    pub discovery: DiscoveryParams,
    /// Class score below which a weakly supervised pixel is background.
    pub bg_threshold: f64,
    /// Slots scored by the object-centric task; 0 uses all.
    pub keep: usize,
    /// Write one PGM per predicted mask next to the records.
    pub export_masks: bool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            discovery: DiscoveryParams::default(),
            bg_threshold: 0.25,
            keep: 0,
            export_masks: false,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScoredBox {
    /// Pixel coordinates, half-open.
    pub bbox: BBox,
    pub score: f64,
    /// -1 for class-agnostic boxes.
    pub class: i64,
}

/// Per-image model output in the form the metrics consume. Fields a task
/// does not produce stay empty.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ImagePrediction {
    pub class: Option<usize>,
    /// Single-object prediction for CorLoc.
    pub best_box: Option<BBox>,
    pub boxes: Vec<ScoredBox>,
    /// Pixel-resolution masks, aligned with `boxes` when both are present.
    pub masks: Vec<BinaryMask>,
    /// Row-major pixel labels, background = number of classes.
    pub labels: Option<Vec<usize>>,
    /// Predicted-class confidence on the full and the explanation-masked image.
    pub confidence: Option<(f64, f64)>,
}

fn grid_mask_to_pixels(cells: &[bool], grid: usize, patch: usize) -> Result<BinaryMask> {
    Ok(BinaryMask::new(grid, grid, cells.to_vec())?.upsample(patch))
}

fn discover(cfg: &WwtConfig, inf: &Inference, opts: &EvalOptions) -> Result<ImagePrediction> {
    let props = discover_regions(&inf.masks, cfg.grid(), &opts.discovery)?;
    let p = cfg.patch_size;
    let best_box = if props.is_empty() {
        None
    } else {
        Some(select_single_object(&props)?.pixel_box(p))
    };
    Ok(ImagePrediction {
        best_box,
        boxes: props
            .iter()
            .map(|r| ScoredBox {
                bbox: r.pixel_box(p),
                score: r.concentration,
                class: -1,
            })
            .collect(),
        masks: props.iter().map(|r| r.mask.upsample(p)).collect(),
        ..Default::default()
    })
}

fn detections(cfg: &WwtConfig, inf: &Inference) -> ImagePrediction {
    let size = cfg.image_size as f64;
    let mut boxes: Vec<ScoredBox> = inf
        .detections
        .iter()
        .filter_map(|d| {
            d.foreground().map(|(c, p)| ScoredBox {
                bbox: d.bbox().scale(size),
                score: p,
                class: c as i64,
            })
        })
        .filter(|b| b.bbox.area() > 0.0)
        .collect();
    boxes.sort_by(|a, b| b.score.total_cmp(&a.score));
    ImagePrediction {
        best_box: boxes.first().map(|b| b.bbox),
        boxes,
        ..Default::default()
    }
}

/// Hard assignment of every token to its strongest slot among the first
/// `keep`, one pixel mask per nonempty slot.
fn slot_masks(cfg: &WwtConfig, inf: &Inference, keep: usize) -> Result<ImagePrediction> {
    let s = if keep == 0 {
        cfg.slots
    } else {
        keep.min(cfg.slots)
    };
    let t = cfg.tokens();
    let mut cells = vec![vec![false; t]; s];
    for ti in 0..t {
        let row = &inf.mean_mask.row(ti)[..s];
        let best = (1..s).fold(0, |b, k| if row[k] > row[b] { k } else { b });
        cells[best][ti] = true;
    }
    let mut out = ImagePrediction::default();
    for c in cells.iter().filter(|c| c.iter().any(|v| *v)) {
        let m = grid_mask_to_pixels(c, cfg.grid(), cfg.patch_size)?;
        out.boxes.push(ScoredBox {
            bbox: m.bbox().expect("nonempty"),
            score: 1.0,
            class: -1,
        });
        out.masks.push(m);
    }
    Ok(out)
}

fn slot_softmax(logits: &Tensor<f64>) -> Result<Tensor<f64>> {
    crate::tensor::softmax_along(logits, 1, 1.0)
}

fn predict_one(
    task: EvalTask,
    cfg: &WwtConfig,
    params: &WwtParams<f32>,
    scene: &Scene,
    opts: &EvalOptions,
) -> Result<ImagePrediction> {
    let inf = infer(cfg, params, &scene.image)?;
    let (g, p) = (cfg.grid(), cfg.patch_size);
    match task {
        EvalTask::Classify => Ok(ImagePrediction {
            class: Some(inf.logits.predicted_class()),
            ..Default::default()
        }),
        EvalTask::Discover => discover(cfg, &inf, opts),
        EvalTask::Detect => Ok(detections(cfg, &inf)),
        EvalTask::Ocl => slot_masks(cfg, &inf, opts.keep),
        EvalTask::Segment => {
            let probs = slot_softmax(&inf.seg_logits)?;
            let seg = segment(&inf.mean_mask, &probs, g, p, Background::Column)?;
            Ok(ImagePrediction {
                labels: Some(seg.labels),
                ..Default::default()
            })
        }
        EvalTask::WeakSegment => {
            let probs = inf.logits.slot_probs();
            let seg = segment(
                &inf.mean_mask,
                &probs,
                g,
                p,
                Background::Threshold(opts.bg_threshold),
            )?;
            Ok(ImagePrediction {
                labels: Some(seg.labels),
                ..Default::default()
            })
        }
        EvalTask::Explain => {
            let class = inf.logits.predicted_class();
            let y = inf.logits.image_probs()[class];
            let ca = class_activation(&inf.logits, &inf.mean_mask, g, class)?;
            let weights: Vec<f32> = bilinear_upsample(&ca.normalized(), g, p)
                .into_iter()
                .map(|v| v.clamp(0.0, 1.0) as f32)
                .collect();
            let masked = scene.image.masked(&weights)?;
            let o = infer(cfg, params, &masked)?.logits.image_probs()[class];
            Ok(ImagePrediction {
                class: Some(class),
                confidence: Some((y, o)),
                ..Default::default()
            })
        }
    }
}

/// Model predictions for every scene, in scene order.
pub fn predict(
    task: EvalTask,
    cfg: &WwtConfig,
    params: &WwtParams<f32>,
    scenes: &[Scene],
    opts: &EvalOptions,
) -> Result<Vec<ImagePrediction>> {
    params.check_against(cfg)?;
    scenes
        .par_iter()
        .map(|s| predict_one(task, cfg, params, s, opts))
        .collect()
}

/// Predictions built from the annotations themselves.
pub fn oracle_predictions(scenes: &[Scene]) -> Vec<ImagePrediction> {
    scenes
        .iter()
        .map(|s| ImagePrediction {
            class: Some(s.label),
            best_box: Some(s.largest().bbox),
            boxes: s
                .instances
                .iter()
                .map(|i| ScoredBox {
                    bbox: i.bbox,
                    score: 1.0,
                    class: i.class as i64,
                })
                .collect(),
            masks: s.instances.iter().map(|i| i.mask.clone()).collect(),
            labels: Some(s.label_map()),
            confidence: None,
        })
        .collect()
}

fn gt_boxes(scenes: &[Scene]) -> Vec<Vec<BBox>> {
    scenes.iter().map(|s| s.boxes()).collect()
}

fn gt_masks(scenes: &[Scene]) -> Vec<Vec<(usize, BinaryMask)>> {
    scenes
        .iter()
        .map(|s| {
            s.instances
                .iter()
                .map(|i| (i.class, i.mask.clone()))
                .collect()
        })
        .collect()
}

fn push_overlap(
    report: &mut EvalReport,
    preds: &[ImagePrediction],
    scenes: &[Scene],
) -> Result<()> {
    let pm: Vec<Vec<BinaryMask>> = preds.iter().map(|p| p.masks.clone()).collect();
    let gm = gt_masks(scenes);
    report.push("mbo_i", mbo(&pm, &gm, OverlapMode::Instance)?);
    report.push("mbo_c", mbo(&pm, &gm, OverlapMode::Class)?);
    Ok(())
}

fn push_boxes(report: &mut EvalReport, preds: &[ImagePrediction], scenes: &[Scene]) -> Result<()> {
    let gts = gt_boxes(scenes);
    let best: Vec<Option<BBox>> = preds.iter().map(|p| p.best_box).collect();
    report.push("corloc", corloc(&best, &gts, IOU_THRESH)?.value);
    let all: Vec<Vec<BBox>> = preds
        .iter()
        .map(|p| p.boxes.iter().map(|b| b.bbox).collect())
        .collect();
    let r = recall_at_iou(&all, &gts, IOU_THRESH)?;
    report.push("recall", r.value);
    report.push("predictions", r.mean_predictions);
    Ok(())
}

/// Apply the metric pipeline of `task` to per-image predictions.
pub fn score_predictions(
    task: EvalTask,
    preds: &[ImagePrediction],
    scenes: &[Scene],
    num_classes: usize,
) -> Result<EvalReport> {
    if preds.len() != scenes.len() || scenes.is_empty() {
        return Err(WwtError::invalid(
            "evaluate",
            "need one prediction per scene and at least one scene",
        ));
    }
    let missing =
        |what: &str| WwtError::invalid("evaluate", format!("predictions carry no {what}"));
    let mut report = EvalReport::new(&task.to_string(), scenes.len());
    match task {
        EvalTask::Classify => {
            let mut hits = 0;
            for (p, s) in preds.iter().zip(scenes) {
                if p.class.ok_or_else(|| missing("class"))? == s.label {
                    hits += 1;
                }
            }
            report.push("accuracy", hits as f64 / scenes.len() as f64);
        }
        EvalTask::Discover => {
            push_boxes(&mut report, preds, scenes)?;
            push_overlap(&mut report, preds, scenes)?;
        }
        EvalTask::Detect => push_boxes(&mut report, preds, scenes)?,
        EvalTask::Ocl => push_overlap(&mut report, preds, scenes)?,
        EvalTask::Segment | EvalTask::WeakSegment => {
            let mut acc = MiouAccumulator::new(num_classes + 1);
            for (p, s) in preds.iter().zip(scenes) {
                acc.add(
                    p.labels.as_ref().ok_or_else(|| missing("label map"))?,
                    &s.label_map(),
                )?;
            }
            report.push("miou", acc.value());
            report.per_class = acc
                .per_class()
                .into_iter()
                .map(|(c, v)| {
                    (
                        if c == num_classes {
                            "background".to_string()
                        } else {
                            c.to_string()
                        },
                        v,
                    )
                })
                .collect();
        }
        EvalTask::Explain => {
            let (full, masked): (Vec<f64>, Vec<f64>) = preds
                .iter()
                .map(|p| p.confidence.ok_or_else(|| missing("confidences")))
                .collect::<Result<Vec<_>>>()?
                .into_iter()
                .unzip();
            let (d, i) = drop_increase(&full, &masked)?;
            report.push("drop", d);
            report.push("increase", i);
        }
    }
    Ok(report)
}

/// Expected CorLoc of a box drawn uniformly among all nonempty integer boxes
/// of a `size x size` image, estimated from `samples` draws per image.
pub fn random_box_corloc(gts: &[Vec<BBox>], size: usize, samples: usize, seed: u64) -> Result<f64> {
    if gts.is_empty() || samples == 0 || size == 0 {
        return Err(WwtError::invalid(
            "random_box_corloc",
            "need images, samples and a size",
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let span = |rng: &mut ChaCha8Rng| loop {
        let a = rng.gen_range(0..=size);
        let b = rng.gen_range(0..=size);
        if a != b {
            return (a.min(b) as f64, a.max(b) as f64);
        }
    };
    let mut hits = 0usize;
    for g in gts {
        for _ in 0..samples {
            let (x0, x1) = span(&mut rng);
            let (y0, y1) = span(&mut rng);
            let b = BBox::new(x0, y0, x1, y1)?;
            if g.iter().any(|gt| b.iou_or_zero(gt) >= IOU_THRESH) {
                hits += 1;
            }
        }
    }
    Ok(hits as f64 / (gts.len() * samples) as f64)
}

fn image_id(i: usize) -> String {
    format!("img{i:06}")
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| WwtError::io(path, e))
}

/// Write `report.txt`, `report.json` and, for box-producing tasks, the
/// interchange files `predictions.txt` (every box) and `best.txt` (one
/// single-object box per image).
pub fn write_outputs(
    out: &Path,
    report: &EvalReport,
    preds: &[ImagePrediction],
    export_masks: bool,
) -> Result<()> {
    fs::create_dir_all(out).map_err(|e| WwtError::io(out, e))?;
    write_text(&out.join("report.txt"), &report.to_text())?;
    write_text(&out.join("report.json"), &report.to_json())?;
    if preds
        .iter()
        .all(|p| p.boxes.is_empty() && p.best_box.is_none())
    {
        return Ok(());
    }
    let mask_dir = out.join("masks");
    if export_masks {
        fs::create_dir_all(&mask_dir).map_err(|e| WwtError::io(&mask_dir, e))?;
    }
    let mut all = Vec::new();
    let mut best = Vec::new();
    for (i, p) in preds.iter().enumerate() {
        let id = image_id(i);
        for (k, b) in p.boxes.iter().enumerate() {
            let mask = match (export_masks, p.masks.get(k)) {
                (true, Some(m)) => {
                    let name = format!("{id}_{k}.pgm");
                    let gray: Vec<u8> = m.data.iter().map(|v| if *v { 255 } else { 0 }).collect();
                    write_pgm(&mask_dir.join(&name), m.width, m.height, &gray)?;
                    Some(format!("masks/{name}"))
                }
                _ => None,
            };
            all.push(PredictionRecord {
                image: id.clone(),
                bbox: b.bbox,
                score: b.score,
                class: b.class,
                mask,
            });
        }
        if let Some(b) = p.best_box {
            best.push(PredictionRecord {
                image: id.clone(),
                bbox: b,
                score: 1.0,
                class: -1,
                mask: None,
            });
        }
    }
    write_records(&out.join("predictions.txt"), &all)?;
    write_records(&out.join("best.txt"), &best)
}

/// Predict, score and optionally write the report and interchange files.
pub fn evaluate(
    task: EvalTask,
    cfg: &WwtConfig,
    params: &WwtParams<f32>,
    scenes: &[Scene],
    opts: &EvalOptions,
    out: Option<&Path>,
) -> Result<EvalReport> {
    let preds = predict(task, cfg, params, scenes, opts)?;
    let report = score_predictions(task, &preds, scenes, cfg.num_classes)?;
    if let Some(dir) = out {
        write_outputs(dir, &report, &preds, opts.export_masks)?;
    }
    Ok(report)
}
