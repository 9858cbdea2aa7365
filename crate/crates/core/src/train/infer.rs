use crate::autodiff::Tape;
use crate::error::Result;
use crate::heads::{classify, detect, predictions, DetPrediction, SlotClassLogits};
use crate::image::Image;
use crate::model::{forward, mean_heads, Binder, WwtConfig, WwtParams};
use crate::tensor::Tensor;

/// Everything the heads read off one forward pass, as plain values.
#[derive(Clone, Debug)]
pub struct Inference {
    /// Final tokens, `[T, d]`.
    pub tokens: Tensor<f64>,
    /// Final slots, `[S, d]`.
    pub slots: Tensor<f64>,
    /// Final mask logits per head, each `[T, S]`.
    pub masks: Vec<Tensor<f64>>,
    /// Head-averaged mask, `[T, S]`.
    pub mean_mask: Tensor<f64>,
    pub logits: SlotClassLogits,
    pub detections: Vec<DetPrediction>,
    /// Segmentation head slot logits, `[S, C+1]`.
    pub seg_logits: Tensor<f64>,
}

fn to_f64(t: &Tensor<f32>) -> Tensor<f64> {
    t.cast()
}

pub fn infer(cfg: &WwtConfig, params: &WwtParams<f32>, image: &Image) -> Result<Inference> {
    let mut tape = Tape::<f32>::new();
    let mut binder = Binder::new(params);
    let out = forward(&mut tape, cfg, &mut binder, image, false)?;
    let st = out.state;
    let mean = mean_heads(&mut tape, &st.masks)?;
    let cls = classify(&mut tape, cfg, &mut binder, st.z)?;
    let det = detect(&mut tape, cfg, &mut binder, st.x, st.z, mean)?;
    let seg = binder.mlp(&mut tape, st.z, "seg")?;
    Ok(Inference {
        tokens: to_f64(tape.value(st.x)),
        slots: to_f64(tape.value(st.z)),
        masks: st.masks.iter().map(|&m| to_f64(tape.value(m))).collect(),
        mean_mask: to_f64(tape.value(mean)),
        logits: SlotClassLogits::from_slot_logits(to_f64(tape.value(cls.slot))),
        detections: predictions(&tape, &det),
        seg_logits: to_f64(tape.value(seg)),
    })
}
