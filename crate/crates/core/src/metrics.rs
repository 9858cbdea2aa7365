//! Localization, segmentation and attribution metrics.

use std::fmt::Write as _;

use crate::error::{Result, WwtError};
use crate::geometry::{BBox, BinaryMask};

pub fn box_iou(a: &BBox, b: &BBox) -> Result<f64> {
    let inter = a.intersection(b);
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        return Err(WwtError::invalid("box_iou", "both boxes are empty"));
    }
    Ok(inter / union)
}

pub fn mask_iou(a: &BinaryMask, b: &BinaryMask) -> Result<f64> {
    if (a.width, a.height) != (b.width, b.height) {
        return Err(WwtError::shape(
            "mask_iou",
            &[a.height, a.width],
            &[b.height, b.width],
        ));
    }
    let union = a.union(b);
    if union == 0 {
        return Err(WwtError::invalid("mask_iou", "both masks are empty"));
    }
    Ok(a.intersection(b) as f64 / union as f64)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CorLoc {
    pub value: f64,
    pub hits: usize,
    pub evaluated: usize,
    /// Images without any ground-truth box.
    pub skipped: usize,
}

/// Does `pred` overlap any of `gts` at `thresh` or more?
pub fn localizes(pred: &BBox, gts: &[BBox], thresh: f64) -> bool {
    gts.iter().any(|g| pred.iou_or_zero(g) >= thresh)
}

/// Fraction of images whose single prediction hits any ground-truth box.
/// A missing prediction counts as a miss.
pub fn corloc(preds: &[Option<BBox>], gts: &[Vec<BBox>], thresh: f64) -> Result<CorLoc> {
    if preds.len() != gts.len() {
        return Err(WwtError::invalid(
            "corloc",
            "one prediction slot per image required",
        ));
    }
    let (mut hits, mut evaluated, mut skipped) = (0, 0, 0);
    for (p, g) in preds.iter().zip(gts) {
        if g.is_empty() {
            skipped += 1;
            continue;
        }
        evaluated += 1;
        if p.as_ref().is_some_and(|p| localizes(p, g, thresh)) {
            hits += 1;
        }
    }
    Ok(CorLoc {
        value: if evaluated > 0 {
            hits as f64 / evaluated as f64
        } else {
            0.0
        },
        hits,
        evaluated,
        skipped,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Recall {
    pub value: f64,
    pub matched: usize,
    pub total_gts: usize,
    pub mean_predictions: f64,
}

/// Number of ground truths matched when pairs are taken greedily by
/// descending IoU, each prediction and each ground truth used once.
pub fn greedy_matches(preds: &[BBox], gts: &[BBox], thresh: f64) -> usize {
    let mut pairs = Vec::new();
    for (i, p) in preds.iter().enumerate() {
        for (j, g) in gts.iter().enumerate() {
            let iou = p.iou_or_zero(g);
            if iou >= thresh {
                pairs.push((iou, i, j));
            }
        }
    }
    pairs.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut pu = vec![false; preds.len()];
    let mut gu = vec![false; gts.len()];
    let mut n = 0;
    for (_, i, j) in pairs {
        if !pu[i] && !gu[j] {
            pu[i] = true;
            gu[j] = true;
            n += 1;
        }
    }
    n
}

pub fn recall_at_iou(preds: &[Vec<BBox>], gts: &[Vec<BBox>], thresh: f64) -> Result<Recall> {
    if preds.len() != gts.len() {
        return Err(WwtError::invalid(
            "recall_at_iou",
            "prediction and ground-truth image counts differ",
        ));
    }
    let mut matched = 0;
    let mut total = 0;
    let mut npred = 0;
    for (p, g) in preds.iter().zip(gts) {
        matched += greedy_matches(p, g, thresh);
        total += g.len();
        npred += p.len();
    }
    Ok(Recall {
        value: if total > 0 {
            matched as f64 / total as f64
        } else {
            0.0
        },
        matched,
        total_gts: total,
        mean_predictions: if preds.is_empty() {
            0.0
        } else {
            npred as f64 / preds.len() as f64
        },
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OverlapMode {
    Instance,
    /// Instances of the same class are merged first.
    Class,
}

/// Mean best overlap: best IoU per ground-truth mask, averaged within each
/// image, then over images that have ground truth.
pub fn mbo(
    preds: &[Vec<BinaryMask>],
    gts: &[Vec<(usize, BinaryMask)>],
    mode: OverlapMode,
) -> Result<f64> {
    if preds.len() != gts.len() {
        return Err(WwtError::invalid(
            "mbo",
            "prediction and ground-truth image counts differ",
        ));
    }
    let mut sum = 0.0;
    let mut images = 0;
    for (p, g) in preds.iter().zip(gts) {
        let targets: Vec<BinaryMask> = match mode {
            OverlapMode::Instance => g.iter().map(|(_, m)| m.clone()).collect(),
            OverlapMode::Class => {
                let mut merged: Vec<(usize, BinaryMask)> = Vec::new();
                for (c, m) in g {
                    match merged.iter_mut().find(|(mc, _)| mc == c) {
                        Some((_, acc)) => acc.merge(m),
                        None => merged.push((*c, m.clone())),
                    }
                }
                merged.into_iter().map(|(_, m)| m).collect()
            }
        };
        if targets.is_empty() {
            continue;
        }
        let mut img = 0.0;
        for t in &targets {
            img += p.iter().map(|q| q.iou_or_zero(t)).fold(0.0, f64::max);
        }
        sum += img / targets.len() as f64;
        images += 1;
    }
    Ok(if images > 0 { sum / images as f64 } else { 0.0 })
}

/// Split-level intersection and union counts per label.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MiouAccumulator {
    pub inter: Vec<u64>,
    pub union: Vec<u64>,
    /// Pixels of each label in the ground truth.
    pub gt_count: Vec<u64>,
}

impl MiouAccumulator {
    /// `labels` counts every label including background.
    pub fn new(labels: usize) -> Self {
        MiouAccumulator {
            inter: vec![0; labels],
            union: vec![0; labels],
            gt_count: vec![0; labels],
        }
    }

    pub fn add(&mut self, pred: &[usize], gt: &[usize]) -> Result<()> {
        if pred.len() != gt.len() {
            return Err(WwtError::shape("miou", &[pred.len()], &[gt.len()]));
        }
        let k = self.inter.len();
        for (&p, &g) in pred.iter().zip(gt) {
            if p >= k || g >= k {
                return Err(WwtError::invalid(
                    "miou",
                    format!("label out of range for {k} labels"),
                ));
            }
            self.gt_count[g] += 1;
            if p == g {
                self.inter[p] += 1;
                self.union[p] += 1;
            } else {
                self.union[p] += 1;
                self.union[g] += 1;
            }
        }
        Ok(())
    }

    /// IoU of each label present in the ground truth.
    pub fn per_class(&self) -> Vec<(usize, f64)> {
        (0..self.inter.len())
            .filter(|&c| self.gt_count[c] > 0)
            .map(|c| (c, self.inter[c] as f64 / self.union[c] as f64))
            .collect()
    }

    pub fn value(&self) -> f64 {
        let pc = self.per_class();
        if pc.is_empty() {
            return 0.0;
        }
        pc.iter().map(|(_, v)| v).sum::<f64>() / pc.len() as f64
    }
}

/// Mean IoU over labels present in the ground truth, from split-level counts.
pub fn miou(preds: &[Vec<usize>], gts: &[Vec<usize>], labels: usize) -> Result<f64> {
    if preds.len() != gts.len() {
        return Err(WwtError::invalid(
            "miou",
            "prediction and ground-truth image counts differ",
        ));
    }
    let mut acc = MiouAccumulator::new(labels);
    for (p, g) in preds.iter().zip(gts) {
        acc.add(p, g)?;
    }
    Ok(acc.value())
}

const CONF_EPS: f64 = 1e-12;

/// Drop and Increase in percent from full-image confidences `full` and
/// explanation-masked confidences `masked` of the same class.
pub fn drop_increase(full: &[f64], masked: &[f64]) -> Result<(f64, f64)> {
    if full.len() != masked.len() || full.is_empty() {
        return Err(WwtError::invalid(
            "drop_increase",
            "need equal, nonzero numbers of confidences",
        ));
    }
    let n = full.len() as f64;
    let mut drop = 0.0;
    let mut inc = 0;
    for (&y, &o) in full.iter().zip(masked) {
        drop += (y - o).max(0.0) / y.max(CONF_EPS);
        if o > y {
            inc += 1;
        }
    }
    Ok((100.0 * drop / n, 100.0 * inc as f64 / n))
}

/// Named metric values for one evaluation run.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub task: String,
    pub count: usize,
    pub metrics: Vec<(String, f64)>,
    pub per_class: Vec<(String, f64)>,
}

impl EvalReport {
    pub fn new(task: &str, count: usize) -> Self {
        EvalReport {
            task: task.to_string(),
            count,
            metrics: Vec::new(),
            per_class: Vec::new(),
        }
    }

    pub fn push(&mut self, name: &str, value: f64) {
        self.metrics.push((name.to_string(), value));
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        self.metrics
            .iter()
            .find(|(k, _)| k == name)
            .map(|(_, v)| *v)
    }

    /// One `name value` line per metric.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "task {}", self.task);
        let _ = writeln!(s, "count {}", self.count);
        for (k, v) in &self.metrics {
            let _ = writeln!(s, "{k} {v:.6}");
        }
        for (k, v) in &self.per_class {
            let _ = writeln!(s, "class.{k} {v:.6}");
        }
        s
    }

    /// JSON object with keys in insertion order.
    pub fn to_json(&self) -> String {
        let q = |s: &str| serde_json::to_string(s).expect("string");
        let num = |v: f64| {
            serde_json::Number::from_f64(v).map_or_else(|| "null".to_string(), |n| n.to_string())
        };
        let obj = |items: &[(String, f64)]| {
            let inner: Vec<String> = items
                .iter()
                .map(|(k, v)| format!("{}: {}", q(k), num(*v)))
                .collect();
            format!("{{{}}}", inner.join(", "))
        };
        format!(
            "{{\"task\": {}, \"count\": {}, \"metrics\": {}, \"per_class\": {}}}\n",
            q(&self.task),
            self.count,
            obj(&self.metrics),
            obj(&self.per_class)
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn b(x0: f64, y0: f64, x1: f64, y1: f64) -> BBox {
        BBox::new(x0, y0, x1, y1).unwrap()
    }

    fn cells(x0: usize, y0: usize, x1: usize, y1: usize) -> BinaryMask {
        let mut m = BinaryMask::empty(8, 8);
        for y in y0..y1 {
            for x in x0..x1 {
                m.set(x, y, true);
            }
        }
        m
    }

    #[test]
    fn iou_cases() {
        let a = b(0.0, 0.0, 2.0, 2.0);
        assert_eq!(box_iou(&a, &a).unwrap(), 1.0);
        assert_eq!(box_iou(&a, &b(5.0, 5.0, 6.0, 6.0)).unwrap(), 0.0);
        assert_eq!(box_iou(&a, &b(1.0, 1.0, 3.0, 3.0)).unwrap(), 1.0 / 7.0);
        // same pair counted on the cell grid
        assert_eq!(
            mask_iou(&cells(0, 0, 2, 2), &cells(1, 1, 3, 3)).unwrap(),
            1.0 / 7.0
        );
        assert!(box_iou(&b(1.0, 1.0, 1.0, 1.0), &b(2.0, 2.0, 2.0, 3.0)).is_err());
        assert!(mask_iou(&BinaryMask::empty(2, 2), &BinaryMask::empty(2, 2)).is_err());
    }

    #[test]
    fn corloc_tally() {
        let gts = vec![
            vec![b(0.0, 0.0, 4.0, 4.0)],
            vec![b(0.0, 0.0, 4.0, 4.0)],
            vec![b(4.0, 4.0, 8.0, 8.0)],
            vec![],
        ];
        let preds = vec![
            Some(b(0.0, 0.0, 4.0, 4.0)),
            Some(b(4.0, 4.0, 8.0, 8.0)),
            None,
            None,
        ];
        let c = corloc(&preds, &gts, 0.5).unwrap();
        assert_eq!((c.hits, c.evaluated, c.skipped), (1, 3, 1));
        assert_eq!(c.value, 1.0 / 3.0);
    }

    #[test]
    fn recall_cases() {
        let gts = vec![vec![b(0.0, 0.0, 4.0, 4.0), b(1.0, 0.0, 5.0, 4.0)]];
        let r = recall_at_iou(&[vec![b(0.0, 0.0, 5.0, 4.0)]], &gts, 0.5).unwrap();
        assert_eq!(r.value, 0.5);
        assert_eq!(r.mean_predictions, 1.0);
        assert_eq!(recall_at_iou(&[vec![]], &gts, 0.5).unwrap().value, 0.0);
        assert_eq!(recall_at_iou(&gts, &gts, 0.5).unwrap().value, 1.0);
    }

    #[test]
    fn mbo_cases() {
        let gt = cells(0, 0, 4, 4);
        // IoU 0.3 and 0.6 against a 10-cell ground truth
        let mut g = BinaryMask::empty(10, 1);
        g.data.iter_mut().for_each(|v| *v = true);
        let mut a = BinaryMask::empty(10, 1);
        (0..3).for_each(|i| a.data[i] = true);
        let mut c = BinaryMask::empty(10, 1);
        (0..6).for_each(|i| c.data[i] = true);
        let v = mbo(&[vec![a, c]], &[vec![(0, g)]], OverlapMode::Instance).unwrap();
        assert!((v - 0.6).abs() < 1e-15);
        let gts = vec![vec![(1, gt.clone()), (2, cells(5, 5, 7, 7))]];
        let preds = vec![gts[0].iter().map(|(_, m)| m.clone()).collect::<Vec<_>>()];
        assert_eq!(mbo(&preds, &gts, OverlapMode::Instance).unwrap(), 1.0);
        assert_eq!(
            mbo(
                &[vec![BinaryMask::empty(8, 8)]],
                &gts,
                OverlapMode::Instance
            )
            .unwrap(),
            0.0
        );
    }

    #[test]
    fn class_mode_merges_instances() {
        let gts = vec![vec![(1, cells(0, 0, 2, 2)), (1, cells(4, 4, 6, 6))]];
        let mut both = cells(0, 0, 2, 2);
        both.merge(&cells(4, 4, 6, 6));
        assert_eq!(
            mbo(&[vec![both.clone()]], &gts, OverlapMode::Class).unwrap(),
            1.0
        );
        assert_eq!(
            mbo(&[vec![both]], &gts, OverlapMode::Instance).unwrap(),
            0.5
        );
    }

    #[test]
    fn miou_hand_count() {
        // 4x4 grids, labels 0 = class, 1 = background
        let gt = vec![0, 0, 1, 1, 0, 0, 1, 1, 0, 0, 1, 1, 0, 0, 1, 1];
        let pr = vec![0, 0, 0, 1, 0, 0, 0, 1, 0, 1, 1, 1, 0, 1, 1, 1];
        // class 0: inter 6, union 10; class 1: inter 6, union 10
        assert_eq!(miou(&[pr], std::slice::from_ref(&gt), 2).unwrap(), 0.6);
        assert_eq!(miou(std::slice::from_ref(&gt), std::slice::from_ref(&gt), 2).unwrap(), 1.0);
        let bg = vec![1; 16];
        let mut acc = MiouAccumulator::new(2);
        acc.add(&bg, &gt).unwrap();
        assert_eq!(acc.per_class()[0], (0, 0.0));
        assert!(miou(&[vec![0; 3]], &[gt], 2).is_err());
    }

    #[test]
    fn drop_increase_hand_case() {
        let (d, i) = drop_increase(&[0.8, 0.5], &[0.4, 0.6]).unwrap();
        assert!((d - 25.0).abs() < 1e-12);
        assert_eq!(i, 50.0);
        assert_eq!(drop_increase(&[0.3, 0.9], &[0.3, 0.9]).unwrap(), (0.0, 0.0));
        assert!(drop_increase(&[0.0], &[0.1]).unwrap().0.is_finite());
    }

    #[test]
    fn report_formats_keep_order() {
        let mut r = EvalReport::new("discover", 3);
        r.push("corloc", 0.5);
        r.push("accuracy", 1.0);
        let t = r.to_text();
        assert!(t.find("corloc").unwrap() < t.find("accuracy").unwrap());
        let j: serde_json::Value = serde_json::from_str(&r.to_json()).unwrap();
        assert_eq!(j["metrics"]["corloc"], 0.5);
        assert!(r.to_json().find("corloc").unwrap() < r.to_json().find("accuracy").unwrap());
    }

    proptest! {
        #[test]
        fn miou_aggregate_equals_incremental(
            a in prop::collection::vec(0usize..3, 32),
            g in prop::collection::vec(0usize..3, 32),
        ) {
            let whole = miou(std::slice::from_ref(&a), std::slice::from_ref(&g), 3).unwrap();
            let mut acc = MiouAccumulator::new(3);
            for k in 0..4 {
                acc.add(&a[k * 8..(k + 1) * 8], &g[k * 8..(k + 1) * 8]).unwrap();
            }
            prop_assert_eq!(whole, acc.value());
        }

        #[test]
        fn recall_and_mbo_monotone_in_predictions(
            boxes in prop::collection::vec((0u8..5, 0u8..5, 1u8..4, 1u8..4), 1..6),
            extra in (0u8..5, 0u8..5, 1u8..4, 1u8..4),
        ) {
            let mk = |(x, y, w, h): (u8, u8, u8, u8)| b(x as f64, y as f64, (x + w) as f64, (y + h) as f64);
            let gts: Vec<BBox> = boxes.iter().map(|t| mk(*t)).collect();
            let preds: Vec<BBox> = gts.iter().skip(1).copied().collect();
            let mut more = preds.clone();
            more.push(mk(extra));
            let r0 = recall_at_iou(std::slice::from_ref(&preds), std::slice::from_ref(&gts), 0.5).unwrap().value;
            let r1 = recall_at_iou(&[more.clone()], std::slice::from_ref(&gts), 0.5).unwrap().value;
            prop_assert!(r1 >= r0);
            let tm = |bb: &BBox| cells(bb.x0 as usize, bb.y0 as usize, bb.x1 as usize, bb.y1 as usize);
            let gm = vec![gts.iter().map(|g| (0, tm(g))).collect::<Vec<_>>()];
            let m0 = mbo(&[preds.iter().map(tm).collect()], &gm, OverlapMode::Instance).unwrap();
            let m1 = mbo(&[more.iter().map(tm).collect()], &gm, OverlapMode::Instance).unwrap();
            prop_assert!(m1 >= m0 && (0.0..=1.0).contains(&m1));
            // image order does not matter
            let c0 = corloc(&[preds.first().copied(), Some(gts[0])], &[gts.clone(), gts.clone()], 0.5).unwrap();
            let c1 = corloc(&[Some(gts[0]), preds.first().copied()], &[gts.clone(), gts.clone()], 0.5).unwrap();
            prop_assert_eq!(c0, c1);
        }
    }
}
