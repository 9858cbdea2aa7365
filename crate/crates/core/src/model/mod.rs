//! The what-where backbone: configuration, parameters, forward pass and
//! analytic cost model.

mod backbone;
mod flops;
mod params;

use std::fmt;
use std::str::FromStr;

pub use backbone::{
    block_mlps, forward, init_state, mean_heads, mu_attn, patch_embed, patch_matrix,
    reconstruct_dense, AttnRecord, BackboneOutput, Binder, LayerTrace, State,
};
pub use flops::{count_flops, tune_mlp_hiddens, FlopReport};
pub use params::{ParamSpec, WwtParams};

use crate::error::{Result, WwtError};
use crate::kv_section;

/// Which axis each direction of mutual attention normalizes over.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AxisMode {
    /// Token update uses a softmax over tokens, slot update a softmax over
    /// slots.
    Literal,
    /// Each update normalizes over its source axis instead.
    Swapped,
}

impl FromStr for AxisMode {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "literal" => Ok(AxisMode::Literal),
            "swapped" => Ok(AxisMode::Swapped),
            _ => Err(format!("unknown softmax axis mode '{s}'")),
        }
    }
}

impl fmt::Display for AxisMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AxisMode::Literal => "literal",
            AxisMode::Swapped => "swapped",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct WwtConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub slots: usize,
    pub heads: usize,
    pub blocks: usize,
    pub mlp_hidden_t: usize,
    pub mlp_hidden_s: usize,
    pub mlp_hidden_a: usize,
    pub num_classes: usize,
    pub softmax_axis_mode: AxisMode,
    /// Layer-norm tokens and slots before projections and MLPs.
    pub pre_norm: bool,
    /// When false the mask path skips `MLP_A` and forwards the updated logits.
    pub mlp_over_attention: bool,
    pub ln_eps: f64,
    pub init_std: f64,
    pub pixel_mean: f64,
    pub pixel_std: f64,
    pub cls_hidden: usize,
    pub ae_hidden: usize,
    pub det_hidden: usize,
    /// Feature width of the frozen random teacher used for distillation.
    pub teacher_dim: usize,
}

kv_section!(WwtConfig {
    image_size,
    patch_size,
    embed_dim,
    slots,
    heads,
    blocks,
    mlp_hidden_t,
    mlp_hidden_s,
    mlp_hidden_a,
    num_classes,
    softmax_axis_mode,
    pre_norm,
    mlp_over_attention,
    ln_eps,
    init_std,
    pixel_mean,
    pixel_std,
    cls_hidden,
    ae_hidden,
    det_hidden,
    teacher_dim,
});

impl Default for WwtConfig {
    fn default() -> Self {
        WwtConfig::micro(8)
    }
}

impl WwtConfig {
    /// Desk-scale reference model: 64x64 input, 8x8 patches, d=64, 8 slots,
    /// 2 heads, 4 blocks. MLP widths keep a block within a few percent of a
    /// ViT block's multiply-accumulates at the same `T` and `d`.
    pub fn micro(num_classes: usize) -> Self {
        WwtConfig {
            image_size: 64,
            patch_size: 8,
            embed_dim: 64,
            slots: 8,
            heads: 2,
            blocks: 4,
            mlp_hidden_t: 256,
            mlp_hidden_s: 256,
            mlp_hidden_a: 128,
            num_classes,
            softmax_axis_mode: AxisMode::Literal,
            pre_norm: true,
            mlp_over_attention: true,
            ln_eps: 1e-5,
            init_std: 0.02,
            pixel_mean: 0.5,
            pixel_std: 0.25,
            cls_hidden: 128,
            ae_hidden: 64,
            det_hidden: 128,
            teacher_dim: 32,
        }
    }

    /// Patches per side.
    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    /// Token count `T = W * H`.
    pub fn tokens(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.heads
    }

    pub fn patch_dim(&self) -> usize {
        3 * self.patch_size * self.patch_size
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(WwtError::Config(m));
        if self.patch_size == 0 || self.image_size == 0 || !self.image_size.is_multiple_of(self.patch_size) {
            return bad(format!(
                "image_size {} must be a positive multiple of patch_size {}",
                self.image_size, self.patch_size
            ));
        }
        if self.heads == 0 || !self.embed_dim.is_multiple_of(self.heads) {
            return bad(format!(
                "embed_dim {} must be divisible by heads {}",
                self.embed_dim, self.heads
            ));
        }
        if self.slots == 0 || self.num_classes == 0 {
            return bad("slots and num_classes must be positive".into());
        }
        if self.mlp_over_attention && self.mlp_hidden_a == 0 {
            return bad("mlp_hidden_a must be positive when mlp_over_attention is on".into());
        }
        if !(self.ln_eps > 0.0) || !(self.pixel_std > 0.0) {
            return bad("ln_eps and pixel_std must be positive".into());
        }
        Ok(())
    }

    /// Token index of the patch at column `col`, row `row` (raster order).
    pub fn token_index(&self, col: usize, row: usize) -> usize {
        row * self.grid() + col
    }

    /// `(col, row)` of token `t`.
    pub fn token_pos(&self, t: usize) -> (usize, usize) {
        (t % self.grid(), t / self.grid())
    }
}
