use super::classify::softmax;
use super::hungarian;
use crate::autodiff::{Tape, Var};
use crate::error::{Result, WwtError};
use crate::geometry::BBox;
use crate::model::{Binder, WwtConfig};
use crate::tensor::{Scalar, Tensor};

/// Floor on the mask mass so an all-nonpositive mask pools to zero.
const POOL_EPS: f64 = 1e-6;

#[derive(Clone, Copy, Debug)]
pub struct DetectionVars {
    /// Mask-pooled token features and coordinates, `[S, d+2]`.
    pub pooled: Var,
    /// `(cx, cy, w, h)` in `[0, 1]`, `[S, 4]`.
    pub boxes: Var,
    /// `[S, C+1]`, last column is background.
    pub logits: Var,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DetPrediction {
    pub cxcywh: [f64; 4],
    pub logits: Vec<f64>,
}

impl DetPrediction {
    pub fn bbox(&self) -> BBox {
        BBox::from_cxcywh(self.cxcywh)
    }

    pub fn probs(&self) -> Vec<f64> {
        softmax(&self.logits)
    }

    /// Best non-background class and its probability, or `None` when the
    /// slot predicts background.
    pub fn foreground(&self) -> Option<(usize, f64)> {
        let p = self.probs();
        let bg = p.len() - 1;
        let (best, &pb) =
            p.iter().enumerate().fold(
                (0, &p[0]),
                |acc, (i, v)| if *v > *acc.1 { (i, v) } else { acc },
            );
        (best != bg).then_some((best, pb))
    }
}

/// Ground-truth object with a box normalized to the unit square.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GroundTruth {
    pub bbox: BBox,
    pub class: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub cls: f64,
    pub l1: f64,
    pub giou: f64,
    /// Relative weight of the background class for unmatched slots.
    pub bg: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            cls: 1.0,
            l1: 5.0,
            giou: 2.0,
            bg: 0.1,
        }
    }
}

/// Token centers `(u, v)` in `[0, 1]`, `[T, 2]`, in raster order.
pub fn token_coords(cfg: &WwtConfig) -> Tensor<f64> {
    let g = cfg.grid() as f64;
    let mut data = Vec::with_capacity(cfg.tokens() * 2);
    for t in 0..cfg.tokens() {
        let (col, row) = cfg.token_pos(t);
        data.push((col as f64 + 0.5) / g);
        data.push((row as f64 + 0.5) / g);
    }
    Tensor::from_f64(&[cfg.tokens(), 2], &data).expect("shape")
}

/// Per slot: pool `tokens ++ coords` with weights `relu(mask)` normalized
/// over tokens, regress a box from the pooled vector and classify the slot.
pub fn detect<T: Scalar>(
    tape: &mut Tape<T>,
    cfg: &WwtConfig,
    binder: &mut Binder<T>,
    tokens: Var,
    slots: Var,
    mean_mask: Var,
) -> Result<DetectionVars> {
    let coords = tape.constant(token_coords(cfg).cast());
    let feats = tape.concat_cols(&[tokens, coords])?;
    let r = tape.relu(mean_mask)?;
    let mass = tape.sum_rows(r)?;
    let floor = tape.constant(Tensor::from_f64(&[1, 1], &[POOL_EPS])?);
    let mass = tape.maximum(mass, floor)?;
    let w = tape.div(r, mass)?;
    let pooled = tape.matmul_t(w, true, feats, false)?;
    let raw = binder.mlp(tape, pooled, "det.box")?;
    let boxes = tape.sigmoid(raw)?;
    let logits = binder.mlp(tape, slots, "det.cls")?;
    Ok(DetectionVars {
        pooled,
        boxes,
        logits,
    })
}

pub fn predictions<T: Scalar>(tape: &Tape<T>, vars: &DetectionVars) -> Vec<DetPrediction> {
    let b = tape.value(vars.boxes).to_f64_vec();
    let l = tape.value(vars.logits);
    let k = l.cols();
    let l = l.to_f64_vec();
    (0..b.len() / 4)
        .map(|s| DetPrediction {
            cxcywh: [b[4 * s], b[4 * s + 1], b[4 * s + 2], b[4 * s + 3]],
            logits: l[s * k..(s + 1) * k].to_vec(),
        })
        .collect()
}

/// Matching cost, `[G, S]` row-major.
pub fn matching_cost(preds: &[DetPrediction], gts: &[GroundTruth], w: &LossWeights) -> Vec<f64> {
    let mut out = Vec::with_capacity(gts.len() * preds.len());
    for g in gts {
        let gc = g.bbox.to_cxcywh();
        for p in preds {
            let prob = p.probs()[g.class];
            let l1: f64 = p.cxcywh.iter().zip(gc).map(|(a, b)| (a - b).abs()).sum();
            let giou = p.bbox().giou(&g.bbox);
            out.push(-w.cls * prob + w.l1 * l1 + w.giou * (1.0 - giou));
        }
    }
    out
}

/// Slot assigned to each ground truth.
pub fn match_bipartite(
    preds: &[DetPrediction],
    gts: &[GroundTruth],
    w: &LossWeights,
) -> Result<Vec<usize>> {
    if gts.len() > preds.len() {
        return Err(WwtError::invalid(
            "match_bipartite",
            format!("{} objects but only {} slots", gts.len(), preds.len()),
        ));
    }
    hungarian::assign(&matching_cost(preds, gts, w), gts.len(), preds.len())
}

#[derive(Clone, Copy, Debug)]
pub struct DetectionLoss {
    pub total: Var,
    pub cls: Var,
    /// Present when there is at least one ground truth.
    pub l1: Option<Var>,
    pub giou: Option<Var>,
}

/// `1 - GIoU` summed over rows of two `[K, 4]` center/size box sets.
fn giou_terms<T: Scalar>(tape: &mut Tape<T>, pred: Var, gt: Var) -> Result<Var> {
    fn corners<T: Scalar>(tape: &mut Tape<T>, b: Var) -> Result<[Var; 4]> {
        let cx = tape.slice_cols(b, 0, 1)?;
        let cy = tape.slice_cols(b, 1, 1)?;
        let w = tape.slice_cols(b, 2, 1)?;
        let h = tape.slice_cols(b, 3, 1)?;
        let hw = tape.scale(w, 0.5)?;
        let hh = tape.scale(h, 0.5)?;
        Ok([
            tape.sub(cx, hw)?,
            tape.sub(cy, hh)?,
            tape.add(cx, hw)?,
            tape.add(cy, hh)?,
        ])
    }
    let [px0, py0, px1, py1] = corners(tape, pred)?;
    let [gx0, gy0, gx1, gy1] = corners(tape, gt)?;
    let area = |tape: &mut Tape<T>, x0, y0, x1, y1| -> Result<Var> {
        let w = tape.sub(x1, x0)?;
        let h = tape.sub(y1, y0)?;
        tape.mul(w, h)
    };
    let pa = area(tape, px0, py0, px1, py1)?;
    let ga = area(tape, gx0, gy0, gx1, gy1)?;
    let ix0 = tape.maximum(px0, gx0)?;
    let iy0 = tape.maximum(py0, gy0)?;
    let ix1 = tape.minimum(px1, gx1)?;
    let iy1 = tape.minimum(py1, gy1)?;
    let iw = tape.sub(ix1, ix0)?;
    let iw = tape.relu(iw)?;
    let ih = tape.sub(iy1, iy0)?;
    let ih = tape.relu(ih)?;
    let inter = tape.mul(iw, ih)?;
    let sum = tape.add(pa, ga)?;
    let union = tape.sub(sum, inter)?;
    let iou = tape.div(inter, union)?;
    let ex0 = tape.minimum(px0, gx0)?;
    let ey0 = tape.minimum(py0, gy0)?;
    let ex1 = tape.maximum(px1, gx1)?;
    let ey1 = tape.maximum(py1, gy1)?;
    let enc = area(tape, ex0, ey0, ex1, ey1)?;
    let gap = tape.sub(enc, union)?;
    let frac = tape.div(gap, enc)?;
    let giou = tape.sub(iou, frac)?;
    let k = tape.shape(giou)[0];
    let s = tape.sum(giou)?;
    let neg = tape.scale(s, -1.0)?;
    tape.add_const(neg, k as f64)
}

/// Set-prediction loss: weighted cross-entropy over all slots (unmatched
/// slots target background at weight `w.bg`), plus L1 and GIoU box terms on
/// matched slots, averaged over ground truths.
pub fn detection_loss<T: Scalar>(
    tape: &mut Tape<T>,
    vars: &DetectionVars,
    gts: &[GroundTruth],
    assignment: &[usize],
    w: &LossWeights,
) -> Result<DetectionLoss> {
    let s = tape.shape(vars.logits)[0];
    let k = tape.shape(vars.logits)[1];
    if assignment.len() != gts.len() || assignment.iter().any(|&a| a >= s) {
        return Err(WwtError::invalid(
            "detection_loss",
            "assignment does not fit the predictions",
        ));
    }
    let mut target = vec![(k - 1, w.bg); s];
    for (g, &slot) in gts.iter().zip(assignment) {
        if g.class + 1 >= k {
            return Err(WwtError::invalid(
                "detection_loss",
                format!("class {} out of range", g.class),
            ));
        }
        target[slot] = (g.class, 1.0);
    }
    let norm: f64 = target.iter().map(|t| t.1).sum();
    let mut sel = vec![0.0; s * k];
    for (i, (c, wt)) in target.iter().enumerate() {
        sel[i * k + c] = wt / norm;
    }
    let sel = tape.constant(Tensor::from_f64(&[s, k], &sel)?);
    let lp = tape.log_softmax_rows(vars.logits)?;
    let picked = tape.mul(lp, sel)?;
    let ce = tape.sum(picked)?;
    let cls = tape.scale(ce, -1.0)?;
    let mut total = tape.scale(cls, w.cls)?;
    if gts.is_empty() {
        return Ok(DetectionLoss {
            total,
            cls,
            l1: None,
            giou: None,
        });
    }
    let n = gts.len() as f64;
    let pred = tape.gather_rows(vars.boxes, assignment)?;
    let gt_data: Vec<f64> = gts.iter().flat_map(|g| g.bbox.to_cxcywh()).collect();
    let gt = tape.constant(Tensor::from_f64(&[gts.len(), 4], &gt_data)?);
    let diff = tape.sub(pred, gt)?;
    let ad = tape.abs(diff)?;
    let l1s = tape.sum(ad)?;
    let l1 = tape.scale(l1s, 1.0 / n)?;
    let gs = giou_terms(tape, pred, gt)?;
    let giou = tape.scale(gs, 1.0 / n)?;
    let t1 = tape.scale(l1, w.l1)?;
    let t2 = tape.scale(giou, w.giou)?;
    total = tape.add(total, t1)?;
    total = tape.add(total, t2)?;
    Ok(DetectionLoss {
        total,
        cls,
        l1: Some(l1),
        giou: Some(giou),
    })
}
