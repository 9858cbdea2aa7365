use super::classify::SlotClassLogits;
use crate::error::{Result, WwtError};
use crate::tensor::Tensor;

/// Class activation over the patch grid, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassActivation {
    pub grid: usize,
    /// Unnormalized, nonnegative values used by the metrics.
    pub raw: Vec<f64>,
}

impl ClassActivation {
    /// Min-max scaled copy for display; a constant map becomes all zeros.
    pub fn normalized(&self) -> Vec<f64> {
        min_max(&self.raw)
    }
}

pub(crate) fn min_max(v: &[f64]) -> Vec<f64> {
    let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        return vec![0.0; v.len()];
    }
    v.iter().map(|x| (x - lo) / (hi - lo)).collect()
}

/// `CA[t] = (1/S) sum_s w[s] relu(mask[t, s])` for explicit slot weights.
pub fn weighted_activation(
    weights: &[f64],
    mask: &Tensor<f64>,
    grid: usize,
) -> Result<ClassActivation> {
    let (t, s) = (mask.rows(), mask.cols());
    if weights.len() != s || t != grid * grid {
        return Err(WwtError::shape(
            "class_activation",
            mask.shape(),
            &[grid * grid, weights.len()],
        ));
    }
    let mut raw = vec![0.0; t];
    for (ti, out) in raw.iter_mut().enumerate() {
        let row = mask.row(ti);
        let mut acc = 0.0;
        for (w, a) in weights.iter().zip(row) {
            acc += w * a.max(0.0);
        }
        *out = acc / s as f64;
    }
    Ok(ClassActivation { grid, raw })
}

/// Class activation for `class`, weighting each slot's rectified mask by the
/// slot's softmax probability of that class. `mask` is the head-averaged
/// `[T, S]` mask.
pub fn class_activation(
    logits: &SlotClassLogits,
    mask: &Tensor<f64>,
    grid: usize,
    class: usize,
) -> Result<ClassActivation> {
    if class >= logits.classes() {
        return Err(WwtError::invalid(
            "class_activation",
            format!(
                "class {class} out of range for {} classes",
                logits.classes()
            ),
        ));
    }
    let probs = logits.slot_probs();
    let w: Vec<f64> = (0..logits.slots()).map(|s| probs.at2(s, class)).collect();
    weighted_activation(&w, mask, grid)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn zero_weights_give_zero_map() {
        let mask = Tensor::from_f64(&[4, 2], &[1.0, 2.0, -1.0, 0.5, 3.0, 0.0, 0.2, 0.1]).unwrap();
        let ca = weighted_activation(&[0.0, 0.0], &mask, 2).unwrap();
        assert!(ca.raw.iter().all(|v| *v == 0.0));
        assert!(ca.normalized().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn negative_mask_is_rectified() {
        let mask = Tensor::from_f64(&[4, 1], &[-1.0, -0.5, -2.0, -0.1]).unwrap();
        let ca = weighted_activation(&[1.0], &mask, 2).unwrap();
        assert!(ca.raw.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn two_slot_hand_case() {
        // slot logits: slot 0 -> [0, ln 3] gives p(class 1) = 3/4, slot 1 -> [0, 0] gives 1/2
        let logits = SlotClassLogits::from_slot_logits(
            Tensor::from_f64(&[2, 2], &[0.0, 3f64.ln(), 0.0, 0.0]).unwrap(),
        );
        let mask = Tensor::from_f64(&[4, 2], &[1.0, 2.0, -1.0, 0.5, 3.0, 0.0, 0.2, 0.1]).unwrap();
        let ca = class_activation(&logits, &mask, 2, 1).unwrap();
        let want = [
            (0.75 * 1.0 + 0.5 * 2.0) / 2.0,
            (0.75 * 0.0 + 0.5 * 0.5) / 2.0,
            (0.75 * 3.0 + 0.5 * 0.0) / 2.0,
            (0.75 * 0.2 + 0.5 * 0.1) / 2.0,
        ];
        for (a, b) in ca.raw.iter().zip(want) {
            assert!((a - b).abs() < 1e-15);
        }
        assert!(class_activation(&logits, &mask, 2, 2).is_err());
    }

    proptest! {
        #[test]
        fn nonnegative_and_monotone_in_weights(
            m in prop::collection::vec(-2.0f64..2.0, 12),
            w in prop::collection::vec(0.0f64..1.0, 3),
            slot in 0usize..3,
            bump in 0.0f64..1.0,
        ) {
            let mask = Tensor::from_f64(&[4, 3], &m).unwrap();
            let a = weighted_activation(&w, &mask, 2).unwrap();
            let mut w2 = w.clone();
            w2[slot] += bump;
            let b = weighted_activation(&w2, &mask, 2).unwrap();
            for (x, y) in a.raw.iter().zip(&b.raw) {
                prop_assert!(*x >= 0.0);
                prop_assert!(y >= x);
            }
        }
    }
}
