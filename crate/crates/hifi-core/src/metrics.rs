//! Evaluation metrics: AUC and F1 for detection and localization, IoU and
//! pixel-wise binary classification accuracy for masks, per-level attribute
//! accuracy and the level-4 confusion matrix.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::taxonomy::{TaxonomyTree, LEVELS};
use crate::tensor::Tensor;

/// Mask binarization threshold used for F1/IoU/PBCA.
pub const MASK_THRESHOLD: f64 = 0.5;

/// ROC area as the Mann-Whitney statistic: the fraction of
/// (positive, negative) pairs ranked correctly, ties counted one half.
pub fn auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::ShapeMismatch {
            op: "auc",
            detail: format!("{} scores vs {} labels", scores.len(), labels.len()),
        });
    }
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::Data(
            "auc: both classes must be present".into(),
        ));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap_or(std::cmp::Ordering::Equal));

    // Average ranks over tie groups keep every pairwise contribution an
    // exact dyadic value, matching the O(n^2) pairwise count bit for bit.
    let mut rank_sum_pos = 0.0f64;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg_rank = (i + 1 + j + 1) as f64 / 2.0;
        for &idx in &order[i..=j] {
            if labels[idx] {
                rank_sum_pos += avg_rank;
            }
        }
        i = j + 1;
    }
    let u = rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}

/// 2TP / (2TP + FP + FN); 0 by convention when the denominator is 0.
pub fn f1_binary(pred: &[bool], gt: &[bool]) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(Error::ShapeMismatch {
            op: "f1",
            detail: format!("{} predictions vs {} labels", pred.len(), gt.len()),
        });
    }
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut fn_ = 0usize;
    for (&p, &g) in pred.iter().zip(gt) {
        match (p, g) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => {}
        }
    }
    let denom = 2 * tp + fp + fn_;
    Ok(if denom == 0 { 0.0 } else { 2.0 * tp as f64 / denom as f64 })
}

/// Intersection-over-union over forged pixels (1.0 when both masks are
/// empty) and the fraction of agreeing pixels.
pub fn iou_pbca(pred_mask: &Tensor, gt_mask: &Tensor) -> Result<(f64, f64)> {
    if pred_mask.shape() != gt_mask.shape() {
        return Err(Error::ShapeMismatch {
            op: "iou_pbca",
            detail: format!("{:?} vs {:?}", pred_mask.shape(), gt_mask.shape()),
        });
    }
    let mut inter = 0usize;
    let mut union = 0usize;
    let mut agree = 0usize;
    for (&p, &g) in pred_mask.data().iter().zip(gt_mask.data()) {
        let (p, g) = (p != 0.0, g != 0.0);
        if p && g {
            inter += 1;
        }
        if p || g {
            union += 1;
        }
        if p == g {
            agree += 1;
        }
    }
    let iou = if union == 0 { 1.0 } else { inter as f64 / union as f64 };
    let pbca = agree as f64 / pred_mask.numel() as f64;
    Ok((iou, pbca))
}

/// Per-level accuracy, level-4 confusion matrix and macro F1 for leaf
/// predictions. Coarser levels are graded by mapping each leaf through its
/// root-to-leaf path; the "real" leaf has no entries at levels 1-3 and two
/// absent entries count as agreement.
#[derive(Debug, Clone, Serialize)]
pub struct AttributeReport {
    pub per_level_accuracy: [f64; LEVELS],
    /// confusion[gt][pred] over level-4 classes.
    pub confusion: Vec<Vec<usize>>,
    pub macro_f1: f64,
    pub samples: usize,
}

pub fn attribute_report(
    predictions: &[usize],
    ground_truth: &[usize],
    tree: &TaxonomyTree,
) -> Result<AttributeReport> {
    if predictions.len() != ground_truth.len() {
        return Err(Error::ShapeMismatch {
            op: "attribute_report",
            detail: format!("{} predictions vs {} labels", predictions.len(), ground_truth.len()),
        });
    }
    if predictions.is_empty() {
        return Err(Error::Data("attribute_report: no samples".into()));
    }
    let k = tree.leaf_count();
    let mut confusion = vec![vec![0usize; k]; k];
    let mut correct = [0usize; LEVELS];
    for (&p, &g) in predictions.iter().zip(ground_truth) {
        let pp = tree.path_of(p)?;
        let gp = tree.path_of(g)?;
        for level in 0..LEVELS {
            if pp.per_level[level] == gp.per_level[level] {
                correct[level] += 1;
            }
        }
        confusion[g][p] += 1;
    }
    let n = predictions.len() as f64;
    let per_level_accuracy = std::array::from_fn(|l| correct[l] as f64 / n);

    // Macro F1 over all level-4 classes; absent classes contribute 0.
    let mut f1_sum = 0.0;
    for class in 0..k {
        let tp = confusion[class][class];
        let fp: usize = (0..k).filter(|&g| g != class).map(|g| confusion[g][class]).sum();
        let fn_: usize = (0..k).filter(|&p| p != class).map(|p| confusion[class][p]).sum();
        let denom = 2 * tp + fp + fn_;
        if denom > 0 {
            f1_sum += 2.0 * tp as f64 / denom as f64;
        }
    }
    Ok(AttributeReport {
        per_level_accuracy,
        confusion,
        macro_f1: f1_sum / k as f64,
        samples: predictions.len(),
    })
}

// ---------------------------------------------------------------------------
// Whole-run evaluation
// ---------------------------------------------------------------------------

/// How pixel scores pool into the localization AUC.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LocPooling {
    /// AUC per image (images with single-class ground truth skipped),
    /// averaged across images.
    #[default]
    PerImage,
    /// One AUC over all pixels of all images.
    Global,
}

/// Everything the evaluator needs from one sample.
#[derive(Debug, Clone)]
pub struct EvalItem {
    pub detection_score: f64,
    pub pred_forged: bool,
    pub gt_forged: bool,
    pub pred_leaf: usize,
    pub gt_leaf: usize,
    /// Continuous localization scores in [0,1].
    pub mask_scores: Tensor,
    /// Binarized prediction at `MASK_THRESHOLD`.
    pub pred_mask: Tensor,
    pub gt_mask: Tensor,
}

#[derive(Debug, Clone, Serialize)]
pub struct DetectionMetrics {
    pub auc: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct LocalizationMetrics {
    pub auc: f64,
    pub f1: f64,
    pub iou: f64,
    pub pbca: f64,
    /// Forged images whose ground truth had both pixel classes.
    pub auc_images: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalReport {
    pub detection: DetectionMetrics,
    /// Pixel metrics over forged samples.
    pub localization: LocalizationMetrics,
    pub attributes: AttributeReport,
    pub samples: usize,
    pub real_samples: usize,
    pub forged_samples: usize,
    pub threshold: f64,
}

/// Aggregates per-sample outputs into the report.
///
/// Detection metrics run over every sample; localization metrics run over
/// forged samples only, per-image averaged, with the AUC restricted to
/// images whose ground truth contains both pixel classes.
pub fn evaluate(items: &[EvalItem], pooling: LocPooling, tree: &TaxonomyTree) -> Result<EvalReport> {
    if items.is_empty() {
        return Err(Error::Data("evaluate: no samples".into()));
    }
    let det_scores: Vec<f64> = items.iter().map(|i| i.detection_score).collect();
    let det_labels: Vec<bool> = items.iter().map(|i| i.gt_forged).collect();
    let det_auc = auc(&det_scores, &det_labels)?;
    let det_pred: Vec<bool> = items.iter().map(|i| i.pred_forged).collect();
    let det_f1 = f1_binary(&det_pred, &det_labels)?;

    let forged: Vec<&EvalItem> = items.iter().filter(|i| i.gt_forged).collect();
    let mut loc_auc_acc = 0.0;
    let mut loc_auc_images = 0usize;
    let mut global_scores = Vec::new();
    let mut global_labels = Vec::new();
    let mut loc_f1_acc = 0.0;
    let mut iou_acc = 0.0;
    let mut pbca_acc = 0.0;
    for item in &forged {
        let labels: Vec<bool> = item.gt_mask.data().iter().map(|&v| v != 0.0).collect();
        let scores = item.mask_scores.data();
        match pooling {
            LocPooling::PerImage => {
                let n_pos = labels.iter().filter(|&&l| l).count();
                if n_pos > 0 && n_pos < labels.len() {
                    loc_auc_acc += auc(scores, &labels)?;
                    loc_auc_images += 1;
                }
            }
            LocPooling::Global => {
                global_scores.extend_from_slice(scores);
                global_labels.extend(labels.iter().copied());
            }
        }
        let pred: Vec<bool> = item.pred_mask.data().iter().map(|&v| v != 0.0).collect();
        loc_f1_acc += f1_binary(&pred, &labels)?;
        let (iou, pbca) = iou_pbca(&item.pred_mask, &item.gt_mask)?;
        iou_acc += iou;
        pbca_acc += pbca;
    }
    let n_forged = forged.len();
    let (loc_auc, auc_images) = match pooling {
        LocPooling::PerImage => {
            if loc_auc_images == 0 {
                (f64::NAN, 0)
            } else {
                (loc_auc_acc / loc_auc_images as f64, loc_auc_images)
            }
        }
        LocPooling::Global => (auc(&global_scores, &global_labels)?, n_forged),
    };

    let preds: Vec<usize> = items.iter().map(|i| i.pred_leaf).collect();
    let gts: Vec<usize> = items.iter().map(|i| i.gt_leaf).collect();
    let attributes = attribute_report(&preds, &gts, tree)?;

    Ok(EvalReport {
        detection: DetectionMetrics {
            auc: det_auc,
            f1: det_f1,
        },
        localization: LocalizationMetrics {
            auc: loc_auc,
            f1: if n_forged == 0 { 0.0 } else { loc_f1_acc / n_forged as f64 },
            iou: if n_forged == 0 { 0.0 } else { iou_acc / n_forged as f64 },
            pbca: if n_forged == 0 { 0.0 } else { pbca_acc / n_forged as f64 },
            auc_images,
        },
        attributes,
        samples: items.len(),
        real_samples: items.len() - n_forged,
        forged_samples: n_forged,
        threshold: MASK_THRESHOLD,
    })
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Confusion matrix as CSV with named rows/columns.
    pub fn confusion_csv(&self, tree: &TaxonomyTree) -> String {
        let names = tree.level_names(LEVELS);
        let mut out = String::from("gt\\pred");
        for n in names {
            out.push(',');
            out.push_str(n);
        }
        out.push('\n');
        for (g, row) in self.attributes.confusion.iter().enumerate() {
            out.push_str(&names[g]);
            for v in row {
                out.push(',');
                out.push_str(&v.to_string());
            }
            out.push('\n');
        }
        out
    }

    /// Human-readable summary table.
    pub fn table(&self) -> String {
        let mut s = String::new();
        s.push_str(&format!(
            "samples: {} ({} real, {} forged), mask threshold {}\n",
            self.samples, self.real_samples, self.forged_samples, self.threshold
        ));
        s.push_str(&format!(
            "detection    auc {:.4}  f1 {:.4}\n",
            self.detection.auc, self.detection.f1
        ));
        s.push_str(&format!(
            "localization auc {:.4}  f1 {:.4}  iou {:.4}  pbca {:.4} ({} auc images)\n",
            self.localization.auc,
            self.localization.f1,
            self.localization.iou,
            self.localization.pbca,
            self.localization.auc_images
        ));
        s.push_str(&format!(
            "attributes   acc l1 {:.4}  l2 {:.4}  l3 {:.4}  l4 {:.4}  macro-f1 {:.4}\n",
            self.attributes.per_level_accuracy[0],
            self.attributes.per_level_accuracy[1],
            self.attributes.per_level_accuracy[2],
            self.attributes.per_level_accuracy[3],
            self.attributes.macro_f1
        ));
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::taxonomy::{mini_taxonomy_config, TaxonomyTree};
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Brute-force pairwise AUC oracle.
    fn auc_pairwise(scores: &[f64], labels: &[bool]) -> f64 {
        let mut acc = 0.0;
        let mut pairs = 0usize;
        for (i, &li) in labels.iter().enumerate() {
            if !li {
                continue;
            }
            for (j, &lj) in labels.iter().enumerate() {
                if lj {
                    continue;
                }
                pairs += 1;
                if scores[i] > scores[j] {
                    acc += 1.0;
                } else if scores[i] == scores[j] {
                    acc += 0.5;
                }
            }
        }
        acc / pairs as f64
    }

    #[test]
    fn auc_trivial_cases() {
        assert_eq!(auc(&[0.9, 0.8, 0.1, 0.2], &[true, true, false, false]).unwrap(), 1.0);
        assert_eq!(auc(&[0.5; 6], &[true, false, true, false, true, false]).unwrap(), 0.5);
        // 2 pairs, 1 ranked correctly.
        assert_eq!(auc(&[0.9, 0.8, 0.3], &[true, false, true]).unwrap(), 0.5);
        assert!(auc(&[0.4, 0.6], &[true, true]).is_err());
    }

    #[test]
    fn auc_equals_pairwise_brute_force_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for n in [2usize, 3, 10, 57, 200] {
            for _ in 0..5 {
                // Quantized scores force plenty of ties.
                let scores: Vec<f64> = (0..n).map(|_| (rng.random_range(0..8) as f64) / 8.0).collect();
                let mut labels: Vec<bool> = (0..n).map(|_| rng.random_bool(0.5)).collect();
                labels[0] = true;
                if n > 1 {
                    labels[1] = false;
                }
                let fast = auc(&scores, &labels).unwrap();
                let slow = auc_pairwise(&scores, &labels);
                assert_eq!(fast, slow, "n={n}");
            }
        }
    }

    #[test]
    fn auc_is_invariant_under_monotone_transforms() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let scores: Vec<f64> = (0..40).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut labels: Vec<bool> = (0..40).map(|_| rng.random_bool(0.4)).collect();
        labels[0] = true;
        labels[1] = false;
        let base = auc(&scores, &labels).unwrap();
        let squashed: Vec<f64> = scores.iter().map(|&s| (3.0 * s).tanh()).collect();
        let shifted: Vec<f64> = scores.iter().map(|&s| 10.0 * s + 4.0).collect();
        assert_eq!(auc(&squashed, &labels).unwrap(), base);
        assert_eq!(auc(&shifted, &labels).unwrap(), base);
    }

    #[test]
    fn f1_cases() {
        assert_eq!(f1_binary(&[true, false, true], &[true, false, true]).unwrap(), 1.0);
        assert_eq!(f1_binary(&[false, false], &[false, false]).unwrap(), 0.0);
        // TP=1, FP=1, FN=1 -> 0.5
        assert_eq!(
            f1_binary(&[true, true, false], &[true, false, true]).unwrap(),
            0.5
        );
        assert!(f1_binary(&[true], &[true, false]).is_err());
    }

    #[test]
    fn iou_pbca_cases() {
        let a = Tensor::new(vec![1, 2, 2], vec![1.0, 1.0, 0.0, 0.0]).unwrap();
        assert_eq!(iou_pbca(&a, &a).unwrap(), (1.0, 1.0));

        // Disjoint equal halves: IoU 0, PBCA 0.
        let b = Tensor::new(vec![1, 2, 2], vec![0.0, 0.0, 1.0, 1.0]).unwrap();
        assert_eq!(iou_pbca(&a, &b).unwrap(), (0.0, 0.0));

        // Half-overlapping equal rectangles: IoU 1/3.
        let p = Tensor::new(vec![1, 1, 4], vec![1.0, 1.0, 0.0, 0.0]).unwrap();
        let q = Tensor::new(vec![1, 1, 4], vec![0.0, 1.0, 1.0, 0.0]).unwrap();
        let (iou, pbca) = iou_pbca(&p, &q).unwrap();
        assert!((iou - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(pbca, 0.5);

        // Both empty.
        let z = Tensor::zeros(&[1, 2, 2]);
        assert_eq!(iou_pbca(&z, &z).unwrap(), (1.0, 1.0));
        assert_eq!(iou_pbca(&z, &z).unwrap().0, iou_pbca(&z, &z).unwrap().0);
    }

    #[test]
    fn iou_pbca_are_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..20 {
            let m1: Vec<f64> = (0..16).map(|_| if rng.random_bool(0.4) { 1.0 } else { 0.0 }).collect();
            let m2: Vec<f64> = (0..16).map(|_| if rng.random_bool(0.4) { 1.0 } else { 0.0 }).collect();
            let a = Tensor::new(vec![1, 4, 4], m1).unwrap();
            let b = Tensor::new(vec![1, 4, 4], m2).unwrap();
            let (iou_ab, pbca_ab) = iou_pbca(&a, &b).unwrap();
            let (iou_ba, pbca_ba) = iou_pbca(&b, &a).unwrap();
            assert_eq!(iou_ab, iou_ba);
            assert_eq!(pbca_ab, pbca_ba);
        }
    }

    fn tree() -> TaxonomyTree {
        TaxonomyTree::parse(&mini_taxonomy_config()).unwrap()
    }

    #[test]
    fn attribute_report_all_correct_is_diagonal() {
        let t = tree();
        let leaves: Vec<usize> = (0..t.leaf_count()).collect();
        let rep = attribute_report(&leaves, &leaves, &t).unwrap();
        assert_eq!(rep.per_level_accuracy, [1.0; 4]);
        for (g, row) in rep.confusion.iter().enumerate() {
            for (p, &v) in row.iter().enumerate() {
                assert_eq!(v, usize::from(g == p));
            }
        }
        assert!((rep.macro_f1 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn sibling_confusion_keeps_coarse_credit() {
        let t = tree();
        // splice vs copy-move share every coarser level.
        let splice = t.leaf_index("splice").unwrap();
        let copy_move = t.leaf_index("copy-move").unwrap();
        let rep = attribute_report(&[copy_move], &[splice], &t).unwrap();
        assert_eq!(rep.per_level_accuracy, [1.0, 1.0, 1.0, 0.0]);
    }

    #[test]
    fn attribute_report_matches_hand_tally() {
        let t = tree();
        let real = t.real_index();
        let splice = t.leaf_index("splice").unwrap();
        let inpaint = t.leaf_index("inpaint").unwrap();
        let tex_a = t.leaf_index("synth-texture-a").unwrap();
        // 10 predictions tallied by hand.
        let gt = vec![real, real, splice, splice, splice, inpaint, inpaint, tex_a, tex_a, tex_a];
        let pr = vec![real, splice, splice, splice, inpaint, inpaint, real, tex_a, tex_a, inpaint];
        let rep = attribute_report(&pr, &gt, &t).unwrap();
        // level-4 correct: idx 0,2,3,5,7,8 -> 6/10
        assert!((rep.per_level_accuracy[3] - 0.6).abs() < 1e-12);
        // confusion rows
        assert_eq!(rep.confusion[real][real], 1);
        assert_eq!(rep.confusion[real][splice], 1);
        assert_eq!(rep.confusion[splice][splice], 2);
        assert_eq!(rep.confusion[splice][inpaint], 1);
        assert_eq!(rep.confusion[inpaint][inpaint], 1);
        assert_eq!(rep.confusion[inpaint][real], 1);
        assert_eq!(rep.confusion[tex_a][tex_a], 2);
        assert_eq!(rep.confusion[tex_a][inpaint], 1);
        // level-3: splice/copy-move share region-transfer, inpaint/retouch
        // share region-edit; real<->forged mismatches stay wrong.
        // hand count: correct at level3 = samples where pred level3 == gt:
        // 1 (real), 0, 1, 1, 0, 1, 0, 1, 1, 0 -> 6... compute:
        // idx1: gt real (None) vs splice path Some -> wrong.
        // idx4: gt splice(region-transfer) vs inpaint(region-edit) -> wrong.
        // idx6: gt inpaint vs real -> wrong. idx9: tex_a(stochastic) vs
        // inpaint(region-edit) -> wrong. So 6/10.
        assert!((rep.per_level_accuracy[2] - 0.6).abs() < 1e-12);
    }

    #[test]
    fn per_level_accuracy_is_monotone_non_increasing() {
        let t = tree();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..50 {
            let n = 30;
            let gt: Vec<usize> = (0..n).map(|_| rng.random_range(0..t.leaf_count())).collect();
            let pr: Vec<usize> = (0..n).map(|_| rng.random_range(0..t.leaf_count())).collect();
            let rep = attribute_report(&pr, &gt, &t).unwrap();
            for l in 1..4 {
                assert!(
                    rep.per_level_accuracy[l] <= rep.per_level_accuracy[l - 1] + 1e-12,
                    "level {l}: {:?}",
                    rep.per_level_accuracy
                );
            }
        }
    }

    #[test]
    fn evaluate_produces_consistent_report() {
        let t = tree();
        let splice = t.leaf_index("splice").unwrap();
        let real = t.real_index();
        let gt_mask = Tensor::new(vec![1, 2, 2], vec![1.0, 1.0, 0.0, 0.0]).unwrap();
        let items = vec![
            EvalItem {
                detection_score: 0.9,
                pred_forged: true,
                gt_forged: true,
                pred_leaf: splice,
                gt_leaf: splice,
                mask_scores: Tensor::new(vec![1, 2, 2], vec![0.9, 0.8, 0.1, 0.2]).unwrap(),
                pred_mask: gt_mask.clone(),
                gt_mask: gt_mask.clone(),
            },
            EvalItem {
                detection_score: 0.2,
                pred_forged: false,
                gt_forged: false,
                pred_leaf: real,
                gt_leaf: real,
                mask_scores: Tensor::zeros(&[1, 2, 2]),
                pred_mask: Tensor::zeros(&[1, 2, 2]),
                gt_mask: Tensor::zeros(&[1, 2, 2]),
            },
        ];
        let report = evaluate(&items, LocPooling::PerImage, &t).unwrap();
        assert_eq!(report.detection.auc, 1.0);
        assert_eq!(report.detection.f1, 1.0);
        assert_eq!(report.localization.auc, 1.0);
        assert_eq!(report.localization.iou, 1.0);
        assert_eq!(report.attributes.per_level_accuracy, [1.0; 4]);
        assert_eq!(report.samples, 2);
        let json = report.to_json();
        assert!(json.contains("\"detection\""));
        let csv = report.confusion_csv(&t);
        assert!(csv.starts_with("gt\\pred,"));
    }
}
