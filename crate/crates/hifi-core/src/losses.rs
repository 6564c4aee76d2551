//! Training objectives: the metric-learning localization loss around a
//! frozen center/margin, the hierarchy-conditioned per-level probabilities,
//! per-level cross-entropy and the gated composite loss.

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::ops::{self, Reduce};
use crate::taxonomy::TaxonomyTree;
use crate::tensor::Tensor;

pub const DEFAULT_MARGIN_FACTOR: f64 = 2.5;
pub const CROSS_ENTROPY_FLOOR: f64 = 1e-12;

/// Frozen localization reference: center c, margin tau = factor * D_max.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalizationCalibration {
    pub center: Tensor,
    pub tau: f64,
    pub d_max: f64,
    pub margin_factor: f64,
}

impl LocalizationCalibration {
    pub fn dim(&self) -> usize {
        self.center.numel()
    }
}

/// How the level-4 "real" slot participates in parent broadcasting. The
/// hierarchy is defined over forgeries only, so by default real receives no
/// parent evidence (multiplier 1 + 0).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum RealParentMode {
    #[default]
    Zero,
    One,
}

/// Loss weighting and gating flags.
#[derive(Debug, Clone, PartialEq)]
pub struct LossWeights {
    pub lambda_loc: f64,
    pub w4: f64,
    pub hierarchy_on: bool,
    pub levels_on: [bool; 4],
    pub loc_on: bool,
    /// false: forged samples use lambda_loc/w4 while real samples use unit
    /// weights (the more specific published form). true: lambda_loc scales
    /// the localization term for real samples as well.
    pub main_paper_form: bool,
    pub real_parent: RealParentMode,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_loc: 100.0,
            w4: 100.0,
            hierarchy_on: true,
            levels_on: [true; 4],
            loc_on: true,
            main_paper_form: false,
            real_parent: RealParentMode::Zero,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if self.lambda_loc < 0.0 || self.w4 < 0.0 {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        Ok(())
    }

    /// Coefficients (loc, per-level) of the gated objective.
    pub fn coefficients(&self, is_forged: bool) -> (f64, [f64; 4]) {
        let loc = if !self.loc_on {
            0.0
        } else if is_forged || self.main_paper_form {
            self.lambda_loc
        } else {
            1.0
        };
        let mut levels = [0.0; 4];
        if is_forged {
            levels = [1.0, 1.0, 1.0, self.w4];
        } else {
            levels[3] = 1.0;
        }
        for (c, on) in levels.iter_mut().zip(self.levels_on) {
            if !on {
                *c = 0.0;
            }
        }
        (loc, levels)
    }
}

// ---------------------------------------------------------------------------
// Calibration
// ---------------------------------------------------------------------------

/// Mean per-pixel embedding over a stream of [D,H,W] embedding maps.
pub fn compute_center(embeds: impl IntoIterator<Item = Result<Tensor>>) -> Result<Tensor> {
    let mut sum: Option<Vec<f64>> = None;
    let mut pixels = 0usize;
    for embed in embeds {
        let embed = embed?;
        if embed.rank() != 3 {
            return Err(Error::ShapeMismatch {
                op: "compute_center",
                detail: format!("embedding must be [D,H,W], got {:?}", embed.shape()),
            });
        }
        let d = embed.shape()[0];
        let plane = embed.shape()[1] * embed.shape()[2];
        let acc = sum.get_or_insert_with(|| vec![0.0; d]);
        if acc.len() != d {
            return Err(Error::ShapeMismatch {
                op: "compute_center",
                detail: format!("embedding dim changed from {} to {d}", acc.len()),
            });
        }
        for ch in 0..d {
            let plane_data = &embed.data()[ch * plane..(ch + 1) * plane];
            acc[ch] += plane_data.iter().sum::<f64>();
        }
        pixels += plane;
    }
    let Some(mut acc) = sum else {
        return Err(Error::Data("compute_center: empty sample stream".into()));
    };
    let inv = 1.0 / pixels as f64;
    acc.iter_mut().for_each(|v| *v *= inv);
    let center = Tensor::from_vec(acc);
    center.validate_finite("localization center")?;
    Ok(center)
}

/// Largest real-pixel distance to the center and the derived margin.
pub fn compute_margin(
    center: &Tensor,
    embeds: impl IntoIterator<Item = Result<Tensor>>,
    factor: f64,
) -> Result<(f64, f64)> {
    if factor <= 0.0 {
        return Err(Error::Config(format!("margin factor {factor} must be positive")));
    }
    let d = center.numel();
    let mut d_max: Option<f64> = None;
    for embed in embeds {
        let embed = embed?;
        let plane = embed.shape()[1] * embed.shape()[2];
        if embed.shape()[0] != d {
            return Err(Error::ShapeMismatch {
                op: "compute_margin",
                detail: format!("embedding dim {} vs center dim {d}", embed.shape()[0]),
            });
        }
        for p in 0..plane {
            let mut sq = 0.0;
            for ch in 0..d {
                let diff = embed.data()[ch * plane + p] - center.data()[ch];
                sq += diff * diff;
            }
            let dist = sq.sqrt();
            if d_max.map_or(true, |m| dist > m) {
                d_max = Some(dist);
            }
        }
    }
    let Some(d_max) = d_max else {
        return Err(Error::Data("compute_margin: empty sample stream".into()));
    };
    if d_max == 0.0 {
        return Err(Error::Numeric(
            "compute_margin: all embeddings collapse onto the center (D_max = 0)".into(),
        ));
    }
    Ok((factor * d_max, d_max))
}

/// Broadcasts the [D] center over a [D,H,W] grid.
fn center_map(center: &Tensor, h: usize, w: usize) -> Tensor {
    let d = center.numel();
    let mut data = vec![0.0; d * h * w];
    for ch in 0..d {
        let v = center.data()[ch];
        data[ch * h * w..(ch + 1) * h * w].iter_mut().for_each(|o| *o = v);
    }
    Tensor::new(vec![d, h, w], data).expect("center map")
}

// ---------------------------------------------------------------------------
// Localization loss and mask scores
// ---------------------------------------------------------------------------

/// Per-pixel hinge loss: real pixels are pulled onto the center, forged
/// pixels pushed beyond the margin, averaged over the H*W grid.
pub fn localization_loss(
    g: &mut Graph,
    pixel_embed: NodeId,
    gt_mask: &Tensor,
    calib: &LocalizationCalibration,
) -> Result<NodeId> {
    let shape = g.value(pixel_embed).shape().to_vec();
    if shape.len() != 3 || shape[0] != calib.dim() {
        return Err(Error::ShapeMismatch {
            op: "localization_loss",
            detail: format!(
                "embedding {:?} does not match center dim {}",
                shape,
                calib.dim()
            ),
        });
    }
    let (h, w) = (shape[1], shape[2]);
    if gt_mask.shape() != [1, h, w] {
        return Err(Error::ShapeMismatch {
            op: "localization_loss",
            detail: format!("mask {:?} does not match embedding grid {h}x{w}", gt_mask.shape()),
        });
    }
    ops::check_binary_mask(gt_mask)?;

    let c_map = g.constant(center_map(&calib.center, h, w));
    let diff = g.sub(pixel_embed, c_map)?;
    let dist = g.reduce(Reduce::L2Norm, diff, &[0])?; // [H,W]

    let inv = 1.0 / (h * w) as f64;
    let forged: Vec<f64> = gt_mask.data().to_vec();
    let real: Vec<f64> = forged.iter().map(|m| 1.0 - m).collect();
    let real_w = g.constant(Tensor::new(vec![h, w], real)?);
    let forged_w = g.constant(Tensor::new(vec![h, w], forged)?);

    let real_term = g.mul(dist, real_w)?;
    let real_sum = g.reduce(Reduce::Sum, real_term, &[0, 1])?;

    let neg = g.scale(dist, -1.0);
    let hinge = g.add_scalar(neg, calib.tau);
    let hinge = g.relu(hinge);
    let forged_term = g.mul(hinge, forged_w)?;
    let forged_sum = g.reduce(Reduce::Sum, forged_term, &[0, 1])?;

    let total = g.add(real_sum, forged_sum)?;
    Ok(g.scale(total, inv))
}

/// Distance-to-center normalized by tau and clipped to [0,1]; the binary
/// mask thresholds this at 0.5 (distance tau/2) and takes no gradient.
pub fn mask_score(pixel_embed: &Tensor, calib: &LocalizationCalibration) -> Result<Tensor> {
    if calib.tau <= 0.0 {
        return Err(Error::Numeric(format!("mask_score: tau {} must be positive", calib.tau)));
    }
    let (d, h, w) = (
        pixel_embed.shape()[0],
        pixel_embed.shape()[1],
        pixel_embed.shape()[2],
    );
    if d != calib.dim() {
        return Err(Error::ShapeMismatch {
            op: "mask_score",
            detail: format!("embedding dim {d} vs center dim {}", calib.dim()),
        });
    }
    let plane = h * w;
    let mut out = vec![0.0; plane];
    for p in 0..plane {
        let mut sq = 0.0;
        for ch in 0..d {
            let diff = pixel_embed.data()[ch * plane + p] - calib.center.data()[ch];
            sq += diff * diff;
        }
        out[p] = (sq.sqrt() / calib.tau).min(1.0);
    }
    Tensor::new(vec![1, h, w], out)
}

/// Thresholds scores into a binary mask; score >= threshold marks forged.
pub fn binarize_scores(scores: &Tensor, threshold: f64) -> Tensor {
    let data = scores
        .data()
        .iter()
        .map(|&s| if s >= threshold { 1.0 } else { 0.0 })
        .collect();
    Tensor::new(scores.shape().to_vec(), data).expect("same shape")
}

// ---------------------------------------------------------------------------
// Hierarchical probabilities and cross-entropy
// ---------------------------------------------------------------------------

/// Per-level probabilities with each level's logits scaled by one plus the
/// broadcast parent probability; level 1 is a plain softmax. With the
/// hierarchy off every level is a plain softmax.
pub fn hierarchical_probs(
    g: &mut Graph,
    tree: &TaxonomyTree,
    logits: &[NodeId; 4],
    hierarchy_on: bool,
    real_parent: RealParentMode,
) -> Result<[NodeId; 4]> {
    for (b, &l) in logits.iter().enumerate() {
        let k = tree.cardinality(b + 1);
        if g.value(l).numel() != k {
            return Err(Error::ShapeMismatch {
                op: "hierarchical_probs",
                detail: format!(
                    "level {} logits have {} entries, taxonomy has {k}",
                    b + 1,
                    g.value(l).numel()
                ),
            });
        }
    }
    let mut probs = [logits[0]; 4];
    probs[0] = g.softmax(logits[0])?;
    for b in 2..=4 {
        if !hierarchy_on {
            probs[b - 1] = g.softmax(logits[b - 1])?;
            continue;
        }
        let map = tree.parent_map(b)?;
        let gathered = g.gather_map(probs[b - 2], map)?;
        let gathered = match (b, real_parent) {
            (4, RealParentMode::One) => {
                let mut one_hot = vec![0.0; tree.cardinality(4)];
                one_hot[tree.real_index()] = 1.0;
                let oh = g.constant(Tensor::from_vec(one_hot));
                g.add(gathered, oh)?
            }
            _ => gathered,
        };
        let multiplier = g.add_scalar(gathered, 1.0);
        let scaled = g.mul(logits[b - 1], multiplier)?;
        probs[b - 1] = g.softmax(scaled)?;
    }
    Ok(probs)
}

/// Negative log-likelihood of the target class, floored at 1e-12.
pub fn level_cross_entropy(g: &mut Graph, probs: NodeId, target: usize) -> Result<NodeId> {
    let picked = g.pick(probs, target)?;
    let floored = g.clamp_min(picked, CROSS_ENTROPY_FLOOR);
    let log = g.ln(floored);
    Ok(g.scale(log, -1.0))
}

// ---------------------------------------------------------------------------
// Composite loss
// ---------------------------------------------------------------------------

/// Scalar components of one sample's loss, for reporting.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub loc: f64,
    pub levels: [f64; 4],
}

/// Weighted combination of the localization and per-level classification
/// losses, gated on whether the sample is forged.
pub fn total_loss(
    g: &mut Graph,
    is_forged: bool,
    loc: NodeId,
    levels: &[NodeId; 4],
    weights: &LossWeights,
) -> Result<NodeId> {
    for (what, node) in std::iter::once(("loc", loc)).chain(levels.iter().enumerate().map(|(b, &n)| {
        let names = ["level1", "level2", "level3", "level4"];
        (names[b], n)
    })) {
        g.value(node).validate_finite(&format!("total_loss component {what}"))?;
    }
    let (loc_c, level_c) = weights.coefficients(is_forged);
    let mut acc = g.scale(loc, loc_c);
    for (b, &node) in levels.iter().enumerate() {
        if level_c[b] != 0.0 {
            let scaled = g.scale(node, level_c[b]);
            acc = g.add(acc, scaled)?;
        }
    }
    Ok(acc)
}

/// Pure-arithmetic twin of `total_loss` for reports and tests.
pub fn total_loss_value(
    is_forged: bool,
    loc: f64,
    levels: [f64; 4],
    weights: &LossWeights,
) -> Result<f64> {
    for v in std::iter::once(loc).chain(levels) {
        if !v.is_finite() {
            return Err(Error::NonFinite("total_loss component".into()));
        }
    }
    let (loc_c, level_c) = weights.coefficients(is_forged);
    let mut acc = loc_c * loc;
    for (c, l) in level_c.iter().zip(levels) {
        if *c != 0.0 {
            acc += c * l;
        }
    }
    Ok(acc)
}
