use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{Tape, Var};
use crate::error::{Result, WwtError};
use crate::image::Image;
use crate::model::{patch_matrix, reconstruct_dense, Binder, WwtConfig};
use crate::tensor::{matmul, pointwise, Activation, Scalar, Tensor};

/// What the decoder is asked to reproduce.
#[derive(Clone, Debug, PartialEq)]
pub enum AeTarget {
    /// Normalized RGB at image resolution, `[H*W, 3]` row-major over pixels.
    Pixels(Tensor<f64>),
    /// Teacher features at patch resolution, `[T, teacher_dim]`.
    Features(Tensor<f64>),
}

/// Normalized pixels of `image` as an [`AeTarget::Pixels`] tensor.
pub fn pixel_target(cfg: &WwtConfig, image: &Image) -> Result<Tensor<f64>> {
    let n = image.width * image.height;
    let data: Vec<f64> = image
        .data
        .iter()
        .map(|v| (*v as f64 - cfg.pixel_mean) / cfg.pixel_std)
        .collect();
    Tensor::from_f64(&[n, 3], &data)
}

/// Frozen randomly initialized patch encoder whose features serve as a
/// distillation target.
#[derive(Clone, Debug, PartialEq)]
pub struct Teacher {
    w1: Tensor<f64>,
    b1: Tensor<f64>,
    w2: Tensor<f64>,
}

impl Teacher {
    pub fn new(cfg: &WwtConfig, seed: u64) -> Result<Self> {
        let (p, k) = (cfg.patch_dim(), cfg.teacher_dim);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut draw = |rows: usize, cols: usize| -> Result<Tensor<f64>> {
            let dist = Normal::new(0.0, 1.0 / (rows as f64).sqrt())
                .map_err(|e| WwtError::Config(e.to_string()))?;
            Tensor::from_f64(
                &[rows, cols],
                &(0..rows * cols)
                    .map(|_| dist.sample(&mut rng))
                    .collect::<Vec<_>>(),
            )
        };
        let w1 = draw(p, k)?;
        let b1 = draw(1, k)?;
        let w2 = draw(k, k)?;
        Ok(Teacher { w1, b1, w2 })
    }

    /// `[T, teacher_dim]`
    pub fn features(&self, cfg: &WwtConfig, image: &Image) -> Result<Tensor<f64>> {
        let x: Tensor<f64> = patch_matrix(cfg, image)?;
        let mut h = matmul(&x, &self.w1)?;
        let k = h.cols();
        for r in 0..h.rows() {
            for c in 0..k {
                h.data_mut()[r * k + c] += self.b1.data()[c];
            }
        }
        let h = pointwise(&h, Activation::Gelu);
        matmul(&h, &self.w2)
    }
}

/// Dense features from slots, with every token distributing one unit of
/// weight across the slots: `softmax_S(mask) @ slots`, `[T, d]`. With `keep`
/// only the first `keep` slot/mask pairs take part.
pub fn slot_reconstruction<T: Scalar>(
    tape: &mut Tape<T>,
    cfg: &WwtConfig,
    mean_mask: Var,
    slots: Var,
    keep: Option<usize>,
) -> Result<Var> {
    let (mask, slots) = match keep {
        Some(k) if k < cfg.slots => {
            if k == 0 {
                return Err(WwtError::invalid(
                    "slot_reconstruction",
                    "keep must be >= 1",
                ));
            }
            (
                tape.slice_cols(mean_mask, 0, k)?,
                tape.slice_rows(slots, 0, k)?,
            )
        }
        _ => (mean_mask, slots),
    };
    let w = tape.softmax(mask, 1)?;
    let f = reconstruct_dense(tape, cfg, w, slots)?;
    tape.reshape(f, &[cfg.tokens(), cfg.embed_dim])
}

/// Mean squared error.
pub fn mse<T: Scalar>(tape: &mut Tape<T>, pred: Var, target: Var) -> Result<Var> {
    let d = tape.sub(pred, target)?;
    let sq = tape.mul(d, d)?;
    tape.mean(sq)
}

/// Pixel index to token index under nearest-neighbor upsampling.
pub fn pixel_tokens(cfg: &WwtConfig) -> Vec<usize> {
    let (n, p) = (cfg.image_size, cfg.patch_size);
    (0..n * n)
        .map(|i| cfg.token_index((i % n) / p, (i / n) / p))
        .collect()
}

/// Decoder output before comparison: per-token MLP on the reconstruction,
/// replicated to pixels for an RGB target.
pub fn decode<T: Scalar>(
    tape: &mut Tape<T>,
    cfg: &WwtConfig,
    binder: &mut Binder<T>,
    dense: Var,
    pixels: bool,
) -> Result<Var> {
    if pixels {
        let per_token = binder.mlp(tape, dense, "ae")?;
        tape.gather_rows(per_token, &pixel_tokens(cfg))
    } else {
        binder.mlp(tape, dense, "distill")
    }
}

pub fn autoencode_loss<T: Scalar>(
    tape: &mut Tape<T>,
    cfg: &WwtConfig,
    binder: &mut Binder<T>,
    mean_mask: Var,
    slots: Var,
    target: &AeTarget,
    keep: Option<usize>,
) -> Result<Var> {
    let dense = slot_reconstruction(tape, cfg, mean_mask, slots, keep)?;
    let (tgt, pixels) = match target {
        AeTarget::Pixels(t) => (t, true),
        AeTarget::Features(t) => (t, false),
    };
    let out = decode(tape, cfg, binder, dense, pixels)?;
    if tape.shape(out) != tgt.shape() {
        return Err(WwtError::shape(
            "autoencode_loss",
            tape.shape(out),
            tgt.shape(),
        ));
    }
    let tv = tape.constant(tgt.cast());
    mse(tape, out, tv)
}
