//! Analytic multiply-accumulate counts for a backbone block and for the ViT
//! block it replaces.

use std::fmt;

use super::WwtConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FlopReport {
    /// Q and V2 on tokens, K and V1 on slots.
    pub projections: u64,
    /// `Q K^T` over all heads.
    pub logits: u64,
    /// Both weighted value products over all heads.
    pub value_products: u64,
    pub mlp_t: u64,
    pub mlp_s: u64,
    pub mlp_a: u64,
    pub per_block: u64,
    pub blocks_total: u64,
    pub patch_embed: u64,
    /// ViT block at the same `T` and `d`, MLP ratio 4.
    pub vit_qk: u64,
    pub vit_per_block: u64,
    pub vit_blocks_total: u64,
}

impl FlopReport {
    pub fn mu_attn(&self) -> u64 {
        self.projections + self.logits + self.value_products
    }

    /// Backbone block cost over the ViT block cost.
    pub fn ratio(&self) -> f64 {
        self.per_block as f64 / self.vit_per_block as f64
    }
}

pub fn count_flops(cfg: &WwtConfig) -> FlopReport {
    let t = cfg.tokens() as u64;
    let s = cfg.slots as u64;
    let d = cfg.embed_dim as u64;
    let m = cfg.heads as u64;
    let projections = 2 * t * d * d + 2 * s * d * d;
    let logits = t * s * d;
    let value_products = 2 * t * s * d;
    let mlp_t = 2 * t * d * cfg.mlp_hidden_t as u64;
    let mlp_s = 2 * s * d * cfg.mlp_hidden_s as u64;
    let mlp_a = if cfg.mlp_over_attention {
        let ha = cfg.mlp_hidden_a as u64;
        t * (m * s + d) * ha + t * ha * m * s
    } else {
        0
    };
    let per_block = projections + logits + value_products + mlp_t + mlp_s + mlp_a;
    let vit_qk = t * t * d;
    let vit_per_block = 4 * t * d * d + 2 * vit_qk + 8 * t * d * d;
    let l = cfg.blocks as u64;
    FlopReport {
        projections,
        logits,
        value_products,
        mlp_t,
        mlp_s,
        mlp_a,
        per_block,
        blocks_total: l * per_block,
        patch_embed: t * cfg.patch_dim() as u64 * d,
        vit_qk,
        vit_per_block,
        vit_blocks_total: l * vit_per_block,
    }
}

/// Pick the token-MLP width so a block matches the ViT block's cost, keeping
/// the slot and mask MLP widths as given. Widths are multiples of 8.
pub fn tune_mlp_hiddens(cfg: &WwtConfig) -> WwtConfig {
    let mut out = cfg.clone();
    out.mlp_hidden_t = 0;
    let rest = count_flops(&out);
    let budget = rest.vit_per_block as i64 - rest.per_block as i64;
    let per_unit = 2 * cfg.tokens() as i64 * cfg.embed_dim as i64;
    let h = (budget as f64 / per_unit as f64 / 8.0).round() as i64 * 8;
    out.mlp_hidden_t = h.max(8) as usize;
    out
}

impl fmt::Display for FlopReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "# multiply-accumulates per image")?;
        writeln!(f, "projections      {}", self.projections)?;
        writeln!(f, "logits           {}", self.logits)?;
        writeln!(f, "value_products   {}", self.value_products)?;
        writeln!(f, "mlp_t            {}", self.mlp_t)?;
        writeln!(f, "mlp_s            {}", self.mlp_s)?;
        writeln!(f, "mlp_a            {}", self.mlp_a)?;
        writeln!(f, "block            {}", self.per_block)?;
        writeln!(f, "blocks_total     {}", self.blocks_total)?;
        writeln!(f, "patch_embed      {}", self.patch_embed)?;
        writeln!(f, "vit_block        {}", self.vit_per_block)?;
        writeln!(f, "vit_blocks_total {}", self.vit_blocks_total)?;
        write!(f, "ratio            {:.4}", self.ratio())
    }
}
