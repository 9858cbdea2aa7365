use std::fmt::Write as _;

use super::infer::infer;
use crate::data::probe_stimuli;
use crate::error::{Result, WwtError};
use crate::model::{WwtConfig, WwtParams};

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeRow {
    pub position: usize,
    /// Sprite offset from Pos0 in pixels.
    pub offset: (isize, isize),
    /// Cosine similarity of the concatenated covered tokens to Pos0's.
    pub token_similarity: f64,
    /// Cosine similarity of the sprite's slot to Pos0's.
    pub slot_similarity: f64,
    /// Slot with the largest rectified mask mass over the sprite.
    pub slot: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeReport {
    pub class: usize,
    pub sprite: usize,
    pub rows: Vec<ProbeRow>,
}

impl ProbeReport {
    fn mean_over_moved(&self, f: impl Fn(&ProbeRow) -> f64) -> f64 {
        let moved = &self.rows[1..];
        moved.iter().map(f).sum::<f64>() / moved.len().max(1) as f64
    }

    /// Mean token similarity over every position but the first.
    pub fn mean_token(&self) -> f64 {
        self.mean_over_moved(|r| r.token_similarity)
    }

    /// Mean slot similarity over every position but the first.
    pub fn mean_slot(&self) -> f64 {
        self.mean_over_moved(|r| r.slot_similarity)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "# translation probe: cosine similarity to Pos0, class {}, sprite {} px",
            self.class, self.sprite
        );
        let _ = writeln!(
            s,
            "{:<6} {:>8} {:>8} {:>10} {:>10} {:>5}",
            "pos", "dx", "dy", "tokens", "slot", "slot#"
        );
        for r in &self.rows {
            let _ = writeln!(
                s,
                "Pos{:<3} {:>8} {:>8} {:>10.6} {:>10.6} {:>5}",
                r.position, r.offset.0, r.offset.1, r.token_similarity, r.slot_similarity, r.slot
            );
        }
        let _ = writeln!(
            s,
            "mean_moved tokens {:.6} slot {:.6}",
            self.mean_token(),
            self.mean_slot()
        );
        s
    }

    /// `position,dx,dy,token_similarity,slot_similarity` rows with a header.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("position,dx,dy,token_similarity,slot_similarity\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{},{}",
                r.position, r.offset.0, r.offset.1, r.token_similarity, r.slot_similarity
            );
        }
        s
    }
}

pub(crate) fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return if na == nb { 1.0 } else { 0.0 };
    }
    dot / (na * nb)
}

/// Render one sprite at patch-aligned offsets and compare, against Pos0, the
/// tokens covering the sprite and the slot that claims it. `origin` is the
/// sprite's top-left corner at offset zero.
pub fn probe_invariance(
    cfg: &WwtConfig,
    params: &WwtParams<f32>,
    class: usize,
    sprite: usize,
    origin: (usize, usize),
    offsets: &[(isize, isize)],
) -> Result<ProbeReport> {
    let p = cfg.patch_size;
    if sprite < p {
        return Err(WwtError::invalid(
            "probe_invariance",
            format!("sprite of {sprite} px is smaller than one patch"),
        ));
    }
    let aligned = |v: isize| v.rem_euclid(p as isize) == 0;
    if !origin.0.is_multiple_of(p)
        || !origin.1.is_multiple_of(p)
        || offsets.iter().any(|&(dx, dy)| !aligned(dx) || !aligned(dy))
    {
        return Err(WwtError::invalid(
            "probe_invariance",
            "origin and offsets must be patch aligned",
        ));
    }
    if offsets.first() != Some(&(0, 0)) {
        return Err(WwtError::invalid(
            "probe_invariance",
            "the first offset must be (0, 0)",
        ));
    }
    let images = probe_stimuli(
        cfg.image_size,
        cfg.num_classes,
        class,
        sprite,
        origin,
        offsets,
    )?;
    let cells = sprite.div_ceil(p);
    let mut feats = Vec::with_capacity(images.len());
    for (img, &(dx, dy)) in images.iter().zip(offsets) {
        let inf = infer(cfg, params, img)?;
        let c0 = ((origin.0 as isize + dx) as usize) / p;
        let r0 = ((origin.1 as isize + dy) as usize) / p;
        let covered: Vec<usize> = (0..cells)
            .flat_map(|r| (0..cells).map(move |c| (c, r)))
            .map(|(c, r)| cfg.token_index(c0 + c, r0 + r))
            .collect();
        let tokens: Vec<f64> = covered
            .iter()
            .flat_map(|&t| inf.tokens.row(t).to_vec())
            .collect();
        let energy = |s: usize| {
            covered
                .iter()
                .map(|&t| inf.mean_mask.at2(t, s).max(0.0))
                .sum::<f64>()
        };
        let slot = (1..cfg.slots).fold(0, |b, s| if energy(s) > energy(b) { s } else { b });
        feats.push((tokens, inf.slots.row(slot).to_vec(), slot));
    }
    let rows = feats
        .iter()
        .zip(offsets)
        .enumerate()
        .map(|(i, ((tok, sl, slot), &off))| ProbeRow {
            position: i,
            offset: off,
            token_similarity: cosine(tok, &feats[0].0),
            slot_similarity: cosine(sl, &feats[0].1),
            slot: *slot,
        })
        .collect();
    Ok(ProbeReport {
        class,
        sprite,
        rows,
    })
}
