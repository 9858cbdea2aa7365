use crate::autodiff::{Tape, Var};
use crate::error::{Result, WwtError};
use crate::model::{Binder, WwtConfig};
use crate::tensor::{softmax_along, Scalar, Tensor};

/// How pixels are assigned to the background label.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Background {
    /// Scores cover the foreground classes only; a pixel whose best score is
    /// below the threshold becomes background (label = number of classes).
    Threshold(f64),
    /// The last score channel is the background class.
    Column,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Segmentation {
    pub width: usize,
    pub height: usize,
    /// Row-major labels; background is the number of foreground classes.
    pub labels: Vec<usize>,
    /// Channel-major scores `[channels][height][width]`.
    pub scores: Vec<f64>,
    pub channels: usize,
}

impl Segmentation {
    pub fn label(&self, x: usize, y: usize) -> usize {
        self.labels[y * self.width + x]
    }

    pub fn score(&self, c: usize, x: usize, y: usize) -> f64 {
        self.scores[(c * self.height + y) * self.width + x]
    }
}

/// Bilinear resampling of a row-major `grid x grid` map to `grid*r` per side,
/// sampling at pixel centers and clamping at the border.
pub fn bilinear_upsample(map: &[f64], grid: usize, r: usize) -> Vec<f64> {
    let n = grid * r;
    let taps: Vec<(usize, usize, f64)> = (0..n)
        .map(|i| {
            let src = ((i as f64 + 0.5) / r as f64 - 0.5).clamp(0.0, (grid - 1) as f64);
            let lo = src.floor() as usize;
            let hi = (lo + 1).min(grid - 1);
            (lo, hi, src - lo as f64)
        })
        .collect();
    let mut out = vec![0.0; n * n];
    for (y, &(y0, y1, fy)) in taps.iter().enumerate() {
        for (x, &(x0, x1, fx)) in taps.iter().enumerate() {
            let top = map[y0 * grid + x0] * (1.0 - fx) + map[y0 * grid + x1] * fx;
            let bot = map[y1 * grid + x0] * (1.0 - fx) + map[y1 * grid + x1] * fx;
            out[y * n + x] = top * (1.0 - fy) + bot * fy;
        }
    }
    out
}

/// Label map from the head-averaged `[T, S]` mask and per-slot class
/// probabilities `[S, K]`. Tokens distribute over slots by a softmax across
/// slots, the slot weights are upsampled by `r`, then mixed into class scores.
pub fn segment(
    mask: &Tensor<f64>,
    slot_probs: &Tensor<f64>,
    grid: usize,
    r: usize,
    background: Background,
) -> Result<Segmentation> {
    let (t, s) = (mask.rows(), mask.cols());
    if r == 0 {
        return Err(WwtError::invalid("segment", "upsample factor must be >= 1"));
    }
    if t != grid * grid || slot_probs.rows() != s {
        return Err(WwtError::shape("segment", mask.shape(), slot_probs.shape()));
    }
    let k = slot_probs.cols();
    let weights = softmax_along(mask, 1, 1.0)?;
    let n = grid * r;
    let mut up = Vec::with_capacity(s);
    for si in 0..s {
        let col: Vec<f64> = (0..t).map(|ti| weights.at2(ti, si)).collect();
        up.push(bilinear_upsample(&col, grid, r));
    }
    let mut scores = vec![0.0; k * n * n];
    for p in 0..n * n {
        for (si, w) in up.iter().enumerate() {
            let wp = w[p];
            for c in 0..k {
                scores[c * n * n + p] += wp * slot_probs.at2(si, c);
            }
        }
    }
    let fg = match background {
        Background::Threshold(_) => k,
        Background::Column => k - 1,
    };
    let labels = (0..n * n)
        .map(|p| {
            let mut best = 0;
            for c in 1..k {
                if scores[c * n * n + p] > scores[best * n * n + p] {
                    best = c;
                }
            }
            match background {
                Background::Threshold(th) if scores[best * n * n + p] < th => fg,
                _ => best,
            }
        })
        .collect();
    Ok(Segmentation {
        width: n,
        height: n,
        labels,
        scores,
        channels: k,
    })
}

/// Pixel-level negative log-likelihood of the segmentation scores, with the
/// dedicated segmentation head providing `[S, C+1]` slot logits. Token scores
/// are replicated to pixels by nearest neighbor; `labels` is row-major at
/// image resolution with background = C.
pub fn segmentation_loss<T: Scalar>(
    tape: &mut Tape<T>,
    cfg: &WwtConfig,
    binder: &mut Binder<T>,
    mean_mask: Var,
    slots: Var,
    labels: &[usize],
) -> Result<Var> {
    let size = cfg.image_size;
    if labels.len() != size * size {
        return Err(WwtError::invalid(
            "segmentation_loss",
            format!("{} labels for a {size}x{size} image", labels.len()),
        ));
    }
    let k = cfg.num_classes + 1;
    let logits = binder.mlp(tape, slots, "seg")?;
    let probs = tape.softmax(logits, 1)?;
    let w = tape.softmax(mean_mask, 1)?;
    let tok = tape.matmul(w, probs)?;
    let p = cfg.patch_size;
    let mut onehot = vec![0.0; cfg.tokens() * k];
    for y in 0..size {
        for x in 0..size {
            let l = labels[y * size + x];
            if l >= k {
                return Err(WwtError::invalid(
                    "segmentation_loss",
                    format!("label {l} >= {k}"),
                ));
            }
            onehot[cfg.token_index(x / p, y / p) * k + l] += 1.0;
        }
    }
    // every pixel of a patch sees the same token score, so the pixel sum
    // collapses to label counts per token
    let counts = tape.constant(Tensor::from_f64(&[cfg.tokens(), k], &onehot)?);
    let eps = tape.add_const(tok, 1e-8)?;
    let lg = tape.log(eps)?;
    let prod = tape.mul(lg, counts)?;
    let s = tape.sum(prod)?;
    tape.scale(s, -1.0 / (size * size) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::WwtParams;
    use proptest::prelude::*;

    #[test]
    fn single_slot_single_class_fills_image() {
        let mask = Tensor::from_f64(&[4, 1], &[0.3, -2.0, 1.0, 0.0]).unwrap();
        let probs = Tensor::from_f64(&[1, 1], &[1.0]).unwrap();
        let seg = segment(&mask, &probs, 2, 3, Background::Threshold(0.25)).unwrap();
        assert_eq!(seg.labels.len(), 36);
        assert!(seg.labels.iter().all(|l| *l == 0));
    }

    #[test]
    fn separable_hard_masks() {
        // left column of tokens -> slot 0 (class 0), right column -> slot 1 (class 1)
        let big = 50.0;
        let mask = Tensor::from_f64(&[4, 2], &[big, 0.0, 0.0, big, big, 0.0, 0.0, big]).unwrap();
        let probs = Tensor::from_f64(&[2, 2], &[1.0, 0.0, 0.0, 1.0]).unwrap();
        let seg = segment(&mask, &probs, 2, 1, Background::Threshold(0.25)).unwrap();
        assert_eq!(seg.labels, vec![0, 1, 0, 1]);
        let seg = segment(&mask, &probs, 2, 4, Background::Threshold(0.25)).unwrap();
        for y in 0..8 {
            for x in 0..8 {
                assert_eq!(seg.label(x, y), usize::from(x >= 4));
            }
        }
    }

    #[test]
    fn background_by_threshold_and_column() {
        let mask = Tensor::from_f64(&[1, 1], &[0.0]).unwrap();
        let probs = Tensor::from_f64(&[1, 2], &[0.2, 0.1]).unwrap();
        let seg = segment(&mask, &probs, 1, 1, Background::Threshold(0.25)).unwrap();
        assert_eq!(seg.labels, vec![2]);
        let probs = Tensor::from_f64(&[1, 3], &[0.2, 0.1, 0.7]).unwrap();
        let seg = segment(&mask, &probs, 1, 1, Background::Column).unwrap();
        assert_eq!(seg.labels, vec![2]);
        assert!(segment(&mask, &probs, 1, 0, Background::Column).is_err());
    }

    #[test]
    fn bilinear_preserves_constants_and_interpolates() {
        let up = bilinear_upsample(&[2.0; 9], 3, 4);
        assert!(up.iter().all(|v| (v - 2.0).abs() < 1e-15));
        // 1x2 ramp at r=2: sample centers at src -0.25 (clamped 0), 0.25, 0.75, 1.25 (clamped 1)
        let up = bilinear_upsample(&[0.0, 1.0, 0.0, 1.0], 2, 2);
        let row: Vec<f64> = up[..4].to_vec();
        assert_eq!(row, vec![0.0, 0.25, 0.75, 1.0]);
    }

    proptest! {
        #[test]
        fn scores_match_loop_oracle(
            m in prop::collection::vec(-3.0f64..3.0, 12),
            p in prop::collection::vec(0.01f64..1.0, 6),
        ) {
            let mask = Tensor::from_f64(&[4, 3], &m).unwrap();
            // normalize probs per slot
            let mut pr = p.clone();
            for s in 0..3 {
                let z = pr[2 * s] + pr[2 * s + 1];
                pr[2 * s] /= z;
                pr[2 * s + 1] /= z;
            }
            let probs = Tensor::from_f64(&[3, 2], &pr).unwrap();
            let seg = segment(&mask, &probs, 2, 3, Background::Threshold(0.25)).unwrap();
            for y in 0..6 {
                for x in 0..6 {
                    let mut w = [0.0; 3];
                    for s in 0..3 {
                        let mut col = [0.0; 4];
                        for t in 0..4 {
                            let row = mask.row(t);
                            let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                            let z: f64 = row.iter().map(|v| (v - mx).exp()).sum();
                            col[t] = (row[s] - mx).exp() / z;
                        }
                        w[s] = bilinear_upsample(&col, 2, 3)[y * 6 + x];
                    }
                    let wsum: f64 = w.iter().sum();
                    prop_assert!((wsum - 1.0).abs() < 1e-12);
                    for c in 0..2 {
                        let want: f64 = (0..3).map(|s| w[s] * pr[2 * s + c]).sum();
                        prop_assert!((seg.score(c, x, y) - want).abs() < 1e-10);
                    }
                    let total: f64 = (0..2).map(|c| seg.score(c, x, y)).sum();
                    prop_assert!((total - 1.0).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn loss_is_finite_and_reaches_parameters() {
        let mut cfg = WwtConfig::micro(3);
        cfg.image_size = 16;
        cfg.patch_size = 8;
        let params = WwtParams::<f64>::init(&cfg, 5).unwrap();
        let mut tape = Tape::new();
        let mut b = Binder::new(&params);
        let mask = tape.var(Tensor::from_f64(&[4, 8], &vec![0.1; 32]).unwrap());
        let z = tape.var(Tensor::from_f64(&[8, 64], &vec![0.3; 512]).unwrap());
        let labels: Vec<usize> = (0..256).map(|i| i % 4).collect();
        let loss = segmentation_loss(&mut tape, &cfg, &mut b, mask, z, &labels).unwrap();
        let v = tape.value(loss).data()[0];
        // near-uniform predictions over 4 channels at init
        assert!((v - 4f64.ln()).abs() < 0.05, "{v}");
        let g = tape.backward(loss).unwrap().by_name();
        assert!(g.contains_key("seg.fc2.weight"));
    }
}
