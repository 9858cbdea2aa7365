use crate::autodiff::{Tape, Var};
use crate::error::{Result, WwtError};
use crate::model::{Binder, WwtConfig};
use crate::tensor::{Scalar, Tensor};

/// Per-slot class logits and their slot average.
#[derive(Clone, Copy, Debug)]
pub struct SlotLogitVars {
    /// `[S, C]`
    pub slot: Var,
    /// `[1, C]`, mean of `slot` over slots.
    pub image: Var,
}

/// Plain-value counterpart of [`SlotLogitVars`].
#[derive(Clone, Debug, PartialEq)]
pub struct SlotClassLogits {
    pub slot: Tensor<f64>,
    pub image: Vec<f64>,
}

impl SlotClassLogits {
    pub fn from_slot_logits(slot: Tensor<f64>) -> Self {
        let (s, c) = (slot.rows(), slot.cols());
        let mut image = vec![0.0; c];
        for i in 0..s {
            for (acc, v) in image.iter_mut().zip(slot.row(i)) {
                *acc += v;
            }
        }
        image.iter_mut().for_each(|v| *v /= s as f64);
        SlotClassLogits { slot, image }
    }

    pub fn slots(&self) -> usize {
        self.slot.rows()
    }

    pub fn classes(&self) -> usize {
        self.slot.cols()
    }

    /// Softmax of each slot's logits, `[S, C]`.
    pub fn slot_probs(&self) -> Tensor<f64> {
        softmax_rows(&self.slot)
    }

    pub fn image_probs(&self) -> Vec<f64> {
        softmax(&self.image)
    }

    pub fn predicted_class(&self) -> usize {
        argmax(&self.image)
    }
}

pub(crate) fn softmax(v: &[f64]) -> Vec<f64> {
    let mx = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = v.iter().map(|x| (x - mx).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

pub(crate) fn softmax_rows(t: &Tensor<f64>) -> Tensor<f64> {
    let mut out = Vec::with_capacity(t.numel());
    for i in 0..t.rows() {
        out.extend(softmax(t.row(i)));
    }
    Tensor::from_vec(t.shape(), out).expect("same shape")
}

pub(crate) fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Slot-wise classification: `MLP(norm(z_L))`, then the mean over slots in
/// logit space gives the image prediction.
pub fn classify<T: Scalar>(
    tape: &mut Tape<T>,
    cfg: &WwtConfig,
    binder: &mut Binder<T>,
    slots: Var,
) -> Result<SlotLogitVars> {
    let zn = binder.norm(tape, slots, "cls.norm", cfg.ln_eps)?;
    let slot = binder.mlp(tape, zn, "cls")?;
    let image = tape.mean_rows(slot)?;
    Ok(SlotLogitVars { slot, image })
}

/// Cross-entropy of `[1, C]` logits against `label` with uniform label
/// smoothing `eps`.
pub fn smoothed_cross_entropy<T: Scalar>(
    tape: &mut Tape<T>,
    logits: Var,
    label: usize,
    eps: f64,
) -> Result<Var> {
    let c = tape.shape(logits)[1];
    if label >= c {
        return Err(WwtError::invalid(
            "cross_entropy",
            format!("label {label} out of range for {c} classes"),
        ));
    }
    let mut q = vec![eps / c as f64; c];
    q[label] += 1.0 - eps;
    let q = tape.constant(Tensor::from_f64(&[1, c], &q)?);
    let lp = tape.log_softmax_rows(logits)?;
    let prod = tape.mul(lp, q)?;
    let s = tape.sum(prod)?;
    tape.scale(s, -1.0)
}
