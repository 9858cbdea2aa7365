use super::activation::min_max;
use crate::error::{Result, WwtError};
use crate::geometry::{BBox, BinaryMask};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Connectivity {
    Four,
    Eight,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DiscoveryParams {
    /// Binarization threshold on min-max normalized mask values.
    pub threshold: f64,
    /// Components smaller than this many cells are dropped.
    pub min_area: usize,
    /// A proposal overlapping a kept one at this IoU or more is a duplicate.
    pub dedup_iou: f64,
    pub connectivity: Connectivity,
}

impl Default for DiscoveryParams {
    fn default() -> Self {
        DiscoveryParams {
            threshold: 0.5,
            min_area: 4,
            dedup_iou: 0.5,
            connectivity: Connectivity::Four,
        }
    }
}

/// A connected region of one slot/head mask on the patch grid.
#[derive(Clone, Debug, PartialEq)]
pub struct RegionProposal {
    pub mask: BinaryMask,
    /// Tight bounds of `mask` in grid cells.
    pub grid_box: BBox,
    pub slot: usize,
    pub head: usize,
    /// Herfindahl concentration of the source mask over the region.
    pub concentration: f64,
}

impl RegionProposal {
    /// Box in pixel coordinates for a given patch size.
    pub fn pixel_box(&self, patch: usize) -> BBox {
        self.grid_box.scale(patch as f64)
    }
}

/// Connected components of `mask`, each as its own mask, ordered by the
/// raster position of their first cell.
pub fn connected_components(mask: &BinaryMask, conn: Connectivity) -> Vec<BinaryMask> {
    let (w, h) = (mask.width, mask.height);
    let mut label = vec![usize::MAX; w * h];
    let mut out = Vec::new();
    let mut stack = Vec::new();
    for start in 0..w * h {
        if !mask.data[start] || label[start] != usize::MAX {
            continue;
        }
        let id = out.len();
        let mut comp = BinaryMask::empty(w, h);
        label[start] = id;
        stack.push(start);
        while let Some(p) = stack.pop() {
            comp.data[p] = true;
            let (x, y) = ((p % w) as isize, (p / w) as isize);
            for dy in -1isize..=1 {
                for dx in -1isize..=1 {
                    if (dx == 0 && dy == 0) || (conn == Connectivity::Four && dx != 0 && dy != 0) {
                        continue;
                    }
                    let (nx, ny) = (x + dx, y + dy);
                    if nx < 0 || ny < 0 || nx >= w as isize || ny >= h as isize {
                        continue;
                    }
                    let q = ny as usize * w + nx as usize;
                    if mask.data[q] && label[q] == usize::MAX {
                        label[q] = id;
                        stack.push(q);
                    }
                }
            }
        }
        out.push(comp);
    }
    out
}

/// Sum of squared shares of the rectified values inside `region`; uniform
/// shares when every value there is nonpositive.
pub fn herfindahl(values: &[f64], region: &BinaryMask) -> f64 {
    let cells: Vec<f64> = values
        .iter()
        .zip(&region.data)
        .filter(|(_, r)| **r)
        .map(|(v, _)| v.max(0.0))
        .collect();
    if cells.is_empty() {
        return 0.0;
    }
    let total: f64 = cells.iter().sum();
    if total <= 0.0 {
        return 1.0 / cells.len() as f64;
    }
    cells.iter().map(|v| v * v).sum::<f64>() / (total * total)
}

/// Region proposals from per-head `[T, S]` masks on a `grid x grid` layout.
pub fn discover_regions(
    masks: &[Tensor<f64>],
    grid: usize,
    params: &DiscoveryParams,
) -> Result<Vec<RegionProposal>> {
    if !(params.dedup_iou > 0.0 && params.dedup_iou <= 1.0) {
        return Err(WwtError::invalid(
            "discover_regions",
            "dedup_iou must be in (0, 1]",
        ));
    }
    let mut cands = Vec::new();
    for (head, m) in masks.iter().enumerate() {
        if m.rows() != grid * grid {
            return Err(WwtError::shape(
                "discover_regions",
                m.shape(),
                &[grid * grid, m.cols()],
            ));
        }
        for slot in 0..m.cols() {
            let vals: Vec<f64> = (0..m.rows()).map(|t| m.at2(t, slot)).collect();
            let norm = min_max(&vals);
            let bin = BinaryMask::new(
                grid,
                grid,
                norm.iter().map(|v| *v >= params.threshold).collect(),
            )?;
            for comp in connected_components(&bin, params.connectivity) {
                if comp.area() < params.min_area {
                    continue;
                }
                let grid_box = comp.bbox().expect("component is nonempty");
                cands.push(RegionProposal {
                    concentration: herfindahl(&vals, &comp),
                    mask: comp,
                    grid_box,
                    slot,
                    head,
                });
            }
        }
    }
    // stable sort keeps (head, slot, raster) order among equal areas
    cands.sort_by(|a, b| b.mask.area().cmp(&a.mask.area()));
    let mut kept: Vec<RegionProposal> = Vec::new();
    for c in cands {
        if kept
            .iter()
            .all(|k| k.mask.iou_or_zero(&c.mask) < params.dedup_iou)
        {
            kept.push(c);
        }
    }
    Ok(kept)
}

/// The most spatially concentrated proposal; ties go to the larger region,
/// then the lower slot id.
pub fn select_single_object(proposals: &[RegionProposal]) -> Result<&RegionProposal> {
    let mut best: Option<&RegionProposal> = None;
    for p in proposals {
        best = match best {
            None => Some(p),
            Some(b) => {
                let better = p.concentration > b.concentration
                    || (p.concentration == b.concentration
                        && (p.mask.area() > b.mask.area()
                            || (p.mask.area() == b.mask.area() && p.slot < b.slot)));
                Some(if better { p } else { b })
            }
        };
    }
    best.ok_or_else(|| WwtError::invalid("select_single_object", "no proposals"))
}
