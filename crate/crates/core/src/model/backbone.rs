use std::collections::HashMap;

use super::{AxisMode, WwtConfig, WwtParams};
use crate::autodiff::{Tape, Var};
use crate::error::{Result, WwtError};
use crate::image::Image;
use crate::tensor::{Scalar, Tensor};

/// Lazily places parameters on a tape, once each. Names under a frozen prefix
/// become constants and receive no gradient.
pub struct Binder<'p, T> {
    params: &'p WwtParams<T>,
    bound: HashMap<String, Var>,
    frozen: Vec<String>,
}

impl<'p, T: Scalar> Binder<'p, T> {
    pub fn new(params: &'p WwtParams<T>) -> Self {
        Binder {
            params,
            bound: HashMap::new(),
            frozen: Vec::new(),
        }
    }

    pub fn with_frozen(mut self, prefixes: &[&str]) -> Self {
        self.frozen = prefixes.iter().map(|s| s.to_string()).collect();
        self
    }

    pub fn params(&self) -> &'p WwtParams<T> {
        self.params
    }

    pub fn get(&mut self, tape: &mut Tape<T>, name: &str) -> Result<Var> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let t = self.params.get(name)?.clone();
        let v = if self.frozen.iter().any(|p| name.starts_with(p.as_str())) {
            tape.constant(t)
        } else {
            tape.param(name, t)
        };
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn linear(&mut self, tape: &mut Tape<T>, x: Var, prefix: &str) -> Result<Var> {
        let w = self.get(tape, &format!("{prefix}.weight"))?;
        let b = self.get(tape, &format!("{prefix}.bias"))?;
        tape.linear(x, w, b)
    }

    /// `fc2(gelu(fc1(x)))`
    pub fn mlp(&mut self, tape: &mut Tape<T>, x: Var, prefix: &str) -> Result<Var> {
        let h = self.linear(tape, x, &format!("{prefix}.fc1"))?;
        let h = tape.gelu(h)?;
        self.linear(tape, h, &format!("{prefix}.fc2"))
    }

    pub fn norm(&mut self, tape: &mut Tape<T>, x: Var, prefix: &str, eps: f64) -> Result<Var> {
        let g = self.get(tape, &format!("{prefix}.gain"))?;
        let b = self.get(tape, &format!("{prefix}.bias"))?;
        tape.layer_norm(x, g, b, eps)
    }
}

/// Tokens `x: [T, d]`, slots `z: [S, d]` and one `[T, S]` mask per head.
#[derive(Clone, Debug)]
pub struct State {
    pub x: Var,
    pub z: Var,
    pub masks: Vec<Var>,
}

/// Per-head intermediates of one mutual-attention layer.
#[derive(Clone, Debug)]
pub struct AttnRecord {
    /// Updated logits `A'`, materialized once and shared by both directions.
    pub a_prime: Vec<Var>,
    pub token_update_weights: Vec<Var>,
    pub slot_update_weights: Vec<Var>,
}

#[derive(Clone, Debug)]
pub struct LayerTrace {
    /// State entering the block.
    pub input: State,
    pub attn: AttnRecord,
}

#[derive(Clone, Debug)]
pub struct BackboneOutput {
    pub state: State,
    /// Filled only when tracing was requested.
    pub layers: Vec<LayerTrace>,
    /// Multiply-accumulates spent inside the blocks.
    pub block_macs: u64,
}

/// Flatten an image into one row per patch in raster order, normalized with
/// the configured mean and std. Within a row: patch row, patch column, channel.
pub fn patch_matrix<T: Scalar>(cfg: &WwtConfig, image: &Image) -> Result<Tensor<T>> {
    if image.width != cfg.image_size || image.height != cfg.image_size {
        return Err(WwtError::shape(
            "patch_embed",
            &[image.height, image.width],
            &[cfg.image_size, cfg.image_size],
        ));
    }
    let (p, g) = (cfg.patch_size, cfg.grid());
    let (mean, inv_std) = (cfg.pixel_mean as f32, 1.0 / cfg.pixel_std as f32);
    let mut out = Vec::with_capacity(cfg.tokens() * cfg.patch_dim());
    for t in 0..cfg.tokens() {
        let (col, row) = (t % g, t / g);
        for dy in 0..p {
            for dx in 0..p {
                let px = image.pixel(col * p + dx, row * p + dy);
                for c in px {
                    out.push(T::of(((c - mean) * inv_std) as f64));
                }
            }
        }
    }
    Tensor::from_vec(&[cfg.tokens(), cfg.patch_dim()], out)
}

/// Linear patch embedding, without positional embedding.
pub fn patch_embed<T: Scalar>(
    tape: &mut Tape<T>,
    cfg: &WwtConfig,
    binder: &mut Binder<T>,
    image: &Image,
) -> Result<Var> {
    let patches = tape.constant(patch_matrix(cfg, image)?);
    binder.linear(tape, patches, "patch_embed")
}

/// Initial state: embedded tokens plus positional embedding, the learned slot
/// queries, and all-zero masks.
pub fn init_state<T: Scalar>(
    tape: &mut Tape<T>,
    cfg: &WwtConfig,
    binder: &mut Binder<T>,
    tokens: Var,
) -> Result<State> {
    let pos = binder.get(tape, "pos_embed")?;
    let x = tape.add(tokens, pos)?;
    let z = binder.get(tape, "slot_queries")?;
    let masks = (0..cfg.heads)
        .map(|_| tape.constant(Tensor::zeros(&[cfg.tokens(), cfg.slots])))
        .collect();
    Ok(State { x, z, masks })
}

fn pre_norm<T: Scalar>(
    tape: &mut Tape<T>,
    cfg: &WwtConfig,
    binder: &mut Binder<T>,
    x: Var,
    prefix: &str,
) -> Result<Var> {
    if cfg.pre_norm {
        binder.norm(tape, x, prefix, cfg.ln_eps)
    } else {
        Ok(x)
    }
}

/// Mutual attention between tokens and slots for block `block`.
///
/// Per head, `A' = A + Q(x) K(z)^T / sqrt(d/m)`. Tokens are updated with the
/// slot values weighted by `A'` normalized along the token axis, slots with
/// the token values weighted by `A'` normalized along the slot axis (axes
/// exchanged in [`AxisMode::Swapped`]). There is no token-token or slot-slot
/// product.
pub fn mu_attn<T: Scalar>(
    tape: &mut Tape<T>,
    cfg: &WwtConfig,
    binder: &mut Binder<T>,
    block: usize,
    state: &State,
) -> Result<(State, AttnRecord)> {
    let p = format!("blocks.{block}");
    let xn = pre_norm(tape, cfg, binder, state.x, &format!("{p}.norm_x1"))?;
    let zn = pre_norm(tape, cfg, binder, state.z, &format!("{p}.norm_z1"))?;
    let q = binder.linear(tape, xn, &format!("{p}.q"))?;
    let k = binder.linear(tape, zn, &format!("{p}.k"))?;
    let v1 = binder.linear(tape, zn, &format!("{p}.v1"))?;
    let v2 = binder.linear(tape, xn, &format!("{p}.v2"))?;
    let dh = cfg.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();
    let (tok_axis, slot_axis) = match cfg.softmax_axis_mode {
        AxisMode::Literal => (0, 1),
        AxisMode::Swapped => (1, 0),
    };
    let mut rec = AttnRecord {
        a_prime: Vec::with_capacity(cfg.heads),
        token_update_weights: Vec::with_capacity(cfg.heads),
        slot_update_weights: Vec::with_capacity(cfg.heads),
    };
    let mut x_parts = Vec::with_capacity(cfg.heads);
    let mut z_parts = Vec::with_capacity(cfg.heads);
    for h in 0..cfg.heads {
        let qh = tape.slice_cols(q, h * dh, dh)?;
        let kh = tape.slice_cols(k, h * dh, dh)?;
        let v1h = tape.slice_cols(v1, h * dh, dh)?;
        let v2h = tape.slice_cols(v2, h * dh, dh)?;
        let logits = tape.matmul_t(qh, false, kh, true)?;
        let logits = tape.scale(logits, scale)?;
        let a_prime = tape.add(state.masks[h], logits)?;
        // token <- slots
        let wt = tape.softmax(a_prime, tok_axis)?;
        x_parts.push(tape.matmul(wt, v1h)?);
        // slot <- tokens, through the transpose of the same logits
        let ws = tape.softmax(a_prime, slot_axis)?;
        z_parts.push(tape.matmul_t(ws, true, v2h, false)?);
        rec.a_prime.push(a_prime);
        rec.token_update_weights.push(wt);
        rec.slot_update_weights.push(ws);
    }
    let dx = tape.concat_cols(&x_parts)?;
    let dz = tape.concat_cols(&z_parts)?;
    let x = tape.add(state.x, dx)?;
    let z = tape.add(state.z, dz)?;
    Ok((
        State {
            x,
            z,
            masks: rec.a_prime.clone(),
        },
        rec,
    ))
}

/// Token, slot and mask MLPs. Tokens and slots keep their residuals; the mask
/// path has none: `A_{i+1} = MLP_A([A'_1 .. A'_m, norm(x')])`.
pub fn block_mlps<T: Scalar>(
    tape: &mut Tape<T>,
    cfg: &WwtConfig,
    binder: &mut Binder<T>,
    block: usize,
    state: &State,
) -> Result<State> {
    let p = format!("blocks.{block}");
    let xn = pre_norm(tape, cfg, binder, state.x, &format!("{p}.norm_x2"))?;
    let zn = pre_norm(tape, cfg, binder, state.z, &format!("{p}.norm_z2"))?;
    let dx = binder.mlp(tape, xn, &format!("{p}.mlp_t"))?;
    let dz = binder.mlp(tape, zn, &format!("{p}.mlp_s"))?;
    let x = tape.add(state.x, dx)?;
    let z = tape.add(state.z, dz)?;
    let masks = if cfg.mlp_over_attention {
        let mut parts = state.masks.clone();
        parts.push(xn);
        let input = tape.concat_cols(&parts)?;
        let out = binder.mlp(tape, input, &format!("{p}.mlp_a"))?;
        (0..cfg.heads)
            .map(|h| tape.slice_cols(out, h * cfg.slots, cfg.slots))
            .collect::<Result<Vec<_>>>()?
    } else {
        state.masks.clone()
    };
    Ok(State { x, z, masks })
}

/// Full backbone: embedding, initial state, then `L` blocks.
pub fn forward<T: Scalar>(
    tape: &mut Tape<T>,
    cfg: &WwtConfig,
    binder: &mut Binder<T>,
    image: &Image,
    trace: bool,
) -> Result<BackboneOutput> {
    let tokens = patch_embed(tape, cfg, binder, image)?;
    let mut state = init_state(tape, cfg, binder, tokens)?;
    let macs0 = tape.macs();
    let mut layers = Vec::new();
    for b in 0..cfg.blocks {
        let tag = |e: WwtError| match e {
            WwtError::NonFinite { op } => WwtError::NonFinite {
                op: format!("block {b}: {op}"),
            },
            other => other,
        };
        let (mid, rec) = mu_attn(tape, cfg, binder, b, &state).map_err(tag)?;
        let next = block_mlps(tape, cfg, binder, b, &mid).map_err(tag)?;
        if trace {
            layers.push(LayerTrace {
                input: state.clone(),
                attn: rec,
            });
        }
        state = next;
    }
    Ok(BackboneOutput {
        state,
        layers,
        block_macs: tape.macs() - macs0,
    })
}

/// Unweighted mean of the per-head masks, `[T, S]`.
pub fn mean_heads<T: Scalar>(tape: &mut Tape<T>, masks: &[Var]) -> Result<Var> {
    let mut acc = masks[0];
    for &m in &masks[1..] {
        acc = tape.add(acc, m)?;
    }
    if masks.len() == 1 {
        return Ok(acc);
    }
    tape.scale(acc, 1.0 / masks.len() as f64)
}

/// Dense feature map `F[h, w, :] = sum_s A[t(h, w), s] z[s, :]`, shape
/// `[grid, grid, d]`.
pub fn reconstruct_dense<T: Scalar>(
    tape: &mut Tape<T>,
    cfg: &WwtConfig,
    mask: Var,
    slots: Var,
) -> Result<Var> {
    let f = tape.matmul(mask, slots)?;
    let d = tape.shape(slots)[1];
    tape.reshape(f, &[cfg.grid(), cfg.grid(), d])
}
