//! Model assembly: parameter initialization, the end-to-end forward pass,
//! center/margin calibration, SGD training with two learning-rate groups
//! and a reduce-on-plateau scheduler, inference rules, and checkpoints.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::blocks::{self, ArchConfig, LoGKernel, ParamBind};
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::losses::{self, LocalizationCalibration, LossBreakdown, LossWeights};
use crate::ops::{self, Reduce};
use crate::taxonomy::{TaxonomyTree, LEVELS};
use crate::tensor::{read_u32, ParamSet, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"HFCK";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    hasher.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

// ---------------------------------------------------------------------------
// Model state
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct ModelState {
    pub params: ParamSet,
    pub calib: Option<LocalizationCalibration>,
    pub tree: TaxonomyTree,
    pub arch: ArchConfig,
    pub weights: LossWeights,
    pub log_kernel: LoGKernel,
}

/// Parameter shapes implied by an architecture and taxonomy; sorted by name
/// so initialization order equals iteration order.
fn param_shapes(arch: &ArchConfig, tree: &TaxonomyTree) -> Vec<(String, Vec<usize>)> {
    let cs = arch.stem_channels;
    let mut shapes: Vec<(String, Vec<usize>)> = vec![
        ("stem.color.conv1.w".into(), vec![cs, 3, 3, 3]),
        ("stem.color.conv1.b".into(), vec![cs]),
        ("stem.color.conv2.w".into(), vec![cs, cs, 3, 3]),
        ("stem.color.conv2.b".into(), vec![cs]),
        ("stem.freq.conv1.w".into(), vec![cs, 3, 3, 3]),
        ("stem.freq.conv1.b".into(), vec![cs]),
        ("stem.freq.conv2.w".into(), vec![cs, cs, 3, 3]),
        ("stem.freq.conv2.b".into(), vec![cs]),
    ];
    let mut c_in = arch.stem_out_channels();
    for branch in (1..=4).rev() {
        let width = arch.width(branch);
        shapes.push((format!("branch.{branch}.conv.w"), vec![width, c_in, 3, 3]));
        shapes.push((format!("branch.{branch}.conv.b"), vec![width]));
        c_in = width;
    }
    for level in 1..=3usize {
        let k = tree.cardinality(level);
        shapes.push((format!("head.{level}.w"), vec![k, arch.width(level)]));
        shapes.push((format!("head.{level}.b"), vec![k]));
    }
    let k4 = tree.cardinality(4);
    let head4_in = arch.width(4) + if arch.pconv_on { arch.pconv_channels } else { 0 };
    shapes.push(("head.4.w".into(), vec![k4, head4_in]));
    shapes.push(("head.4.b".into(), vec![k4]));
    for name in ["g", "phi", "psi"] {
        shapes.push((format!("attn.{name}.w"), vec![arch.attention_channels, arch.width(4), 1, 1]));
        shapes.push((format!("attn.{name}.b"), vec![arch.attention_channels]));
    }
    shapes.push(("attn.proj.w".into(), vec![arch.embed_dim, arch.attention_channels, 1, 1]));
    shapes.push(("attn.proj.b".into(), vec![arch.embed_dim]));
    if arch.pconv_on {
        shapes.push(("pconv.1.w".into(), vec![arch.pconv_channels, 3, 3, 3]));
        shapes.push(("pconv.1.b".into(), vec![arch.pconv_channels]));
        shapes.push(("pconv.2.w".into(), vec![arch.pconv_channels, arch.pconv_channels, 3, 3]));
        shapes.push(("pconv.2.b".into(), vec![arch.pconv_channels]));
    }
    shapes.sort_by(|a, b| a.0.cmp(&b.0));
    shapes
}

/// Closed-form scalar parameter count for a config, used as an init oracle.
pub fn expected_param_count(arch: &ArchConfig, tree: &TaxonomyTree) -> usize {
    param_shapes(arch, tree)
        .iter()
        .map(|(_, s)| s.iter().product::<usize>())
        .sum()
}

/// Deterministic uniform fan-in initialization; biases start at zero.
pub fn init_model(
    arch: ArchConfig,
    tree: TaxonomyTree,
    weights: LossWeights,
    seed: u64,
) -> Result<ModelState> {
    arch.validate()?;
    weights.validate()?;
    let log_kernel = LoGKernel::new(arch.log_size, arch.log_sigma)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ParamSet::new();
    for (name, shape) in param_shapes(&arch, &tree) {
        let n: usize = shape.iter().product();
        let tensor = if name.ends_with(".b") {
            Tensor::zeros(&shape)
        } else {
            let fan_in: usize = shape.iter().skip(1).product();
            let bound = 1.0 / (fan_in as f64).sqrt();
            let data: Vec<f64> = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
            Tensor::new(shape, data)?
        };
        params.insert(&name, tensor)?;
    }
    Ok(ModelState {
        params,
        calib: None,
        tree,
        arch,
        weights,
        log_kernel,
    })
}

// ---------------------------------------------------------------------------
// Forward pass
// ---------------------------------------------------------------------------

/// Which mask overlays the image for the partial-convolution pathway.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OverlayMode {
    /// Thresholded localization prediction (no gradient through it).
    Predicted,
    /// Ground-truth mask (teacher forcing).
    Teacher,
}

/// Nodes and derived tensors of one forward pass.
pub struct Forward {
    pub graph: Graph,
    pub bind: ParamBind,
    pub logits: [NodeId; 4],
    pub probs: [NodeId; 4],
    pub pixel_embed: NodeId,
    /// Continuous localization scores at the input resolution.
    pub mask_scores: Tensor,
    /// Scores thresholded at 0.5.
    pub binary_mask: Tensor,
    /// Mask actually overlaid for the classification pathway.
    pub overlay_mask: Tensor,
}

/// Stems, branches and the attention head; enough for calibration.
struct EmbedPass {
    graph: Graph,
    bind: ParamBind,
    image_node: NodeId,
    branches: [NodeId; 4],
    pixel_embed: NodeId,
}

fn check_image(model: &ModelState, image: &Tensor) -> Result<()> {
    let r = model.arch.input_res;
    if image.shape() != [3, r, r] {
        return Err(Error::ShapeMismatch {
            op: "forward",
            detail: format!("image {:?} does not match config [3,{r},{r}]", image.shape()),
        });
    }
    image.validate_finite("input image")
}

fn embed_pass(model: &ModelState, image: &Tensor, train: bool) -> Result<EmbedPass> {
    check_image(model, image)?;
    let mut graph = Graph::new();
    let mut bind = ParamBind::new(train);
    let image_node = graph.constant(image.clone());
    let stem = blocks::stem_forward(&mut graph, &mut bind, &model.params, &model.arch, &model.log_kernel, image_node)?;
    let branches = blocks::branch_forward(&mut graph, &mut bind, &model.params, &model.arch, stem)?;
    let att_in = if model.arch.attention_factor > 1 {
        graph.down_avg(branches[3], model.arch.attention_factor)?
    } else {
        branches[3]
    };
    let att = blocks::attention_localize(&mut graph, &mut bind, &model.params, &model.arch, att_in)?;
    Ok(EmbedPass {
        graph,
        bind,
        image_node,
        branches,
        pixel_embed: att.pixel_embed,
    })
}

/// Majority-vote downsampling of a binary mask (ties count as forged).
pub fn downsample_mask(mask: &Tensor, factor: usize) -> Result<Tensor> {
    if factor == 1 {
        return Ok(mask.clone());
    }
    let avg = ops::down_avg(mask, factor)?;
    Ok(losses::binarize_scores(&avg, 0.5))
}

impl ModelState {
    pub fn calibration(&self) -> Result<&LocalizationCalibration> {
        self.calib
            .as_ref()
            .ok_or_else(|| Error::Config("model is not calibrated (run compute_center/compute_margin)".into()))
    }

    /// Full forward pass. `gt_mask` supplies the teacher-forcing overlay and
    /// must be given when `overlay` is `Teacher`.
    pub fn forward(
        &self,
        image: &Tensor,
        train: bool,
        overlay: OverlayMode,
        gt_mask: Option<&Tensor>,
    ) -> Result<Forward> {
        let calib = self.calibration()?.clone();
        let pass = embed_pass(self, image, train)?;
        let EmbedPass {
            mut graph,
            mut bind,
            image_node,
            branches,
            pixel_embed,
        } = pass;

        let embed_value = graph.value(pixel_embed).clone();
        let scores_att = losses::mask_score(&embed_value, &calib)?;
        let factor = self.arch.attention_factor;
        let mask_scores = if factor > 1 {
            ops::up_nearest(&scores_att, factor)?
        } else {
            scores_att
        };
        let binary_mask = losses::binarize_scores(&mask_scores, 0.5);
        let overlay_mask = match overlay {
            OverlayMode::Predicted => binary_mask.clone(),
            OverlayMode::Teacher => gt_mask
                .ok_or_else(|| Error::Config("teacher forcing requires a ground-truth mask".into()))?
                .clone(),
        };

        let mut logits = [pixel_embed; 4];
        for level in 1..=3usize {
            logits[level - 1] =
                blocks::classification_head(&mut graph, &mut bind, &self.params, level, branches[level - 1])?;
        }
        let gap4 = graph.reduce(Reduce::Mean, branches[3], &[1, 2])?;
        let head4_in = if self.arch.pconv_on {
            let embed_vec =
                blocks::masked_embed(&mut graph, &mut bind, &self.params, &overlay_mask, image_node)?;
            graph.concat0(&[gap4, embed_vec])?
        } else {
            gap4
        };
        let w4 = bind.node(&mut graph, &self.params, "head.4.w")?;
        let b4 = bind.node(&mut graph, &self.params, "head.4.b")?;
        logits[3] = graph.linear(w4, head4_in, b4)?;

        let probs = losses::hierarchical_probs(
            &mut graph,
            &self.tree,
            &logits,
            self.weights.hierarchy_on,
            self.weights.real_parent,
        )?;

        Ok(Forward {
            graph,
            bind,
            logits,
            probs,
            pixel_embed,
            mask_scores,
            binary_mask,
            overlay_mask,
        })
    }

    /// Pixel embedding map only (no calibration required).
    pub fn pixel_embedding(&self, image: &Tensor) -> Result<Tensor> {
        let pass = embed_pass(self, image, false)?;
        Ok(pass.graph.value(pass.pixel_embed).clone())
    }
}

// ---------------------------------------------------------------------------
// Calibration over real samples
// ---------------------------------------------------------------------------

/// One labeled training/evaluation record in memory.
#[derive(Debug, Clone)]
pub struct TrainSample {
    pub image: Tensor,
    /// [1,H,W] binary ground truth at the input resolution.
    pub mask: Tensor,
    pub leaf: usize,
}

impl TrainSample {
    pub fn is_forged(&self, tree: &TaxonomyTree) -> bool {
        self.leaf != tree.real_index()
    }
}

/// Computes and freezes the localization center and margin from the real
/// samples, using the current (normally freshly initialized) parameters.
pub fn calibrate(model: &mut ModelState, real_samples: &[TrainSample], margin_factor: f64) -> Result<()> {
    let embeds = || real_samples.iter().map(|s| model.pixel_embedding(&s.image));
    let center = losses::compute_center(embeds())?;
    let (tau, d_max) = losses::compute_margin(&center, embeds(), margin_factor)?;
    model.calib = Some(LocalizationCalibration {
        center,
        tau,
        d_max,
        margin_factor,
    });
    Ok(())
}

// ---------------------------------------------------------------------------
// Loss over one sample
// ---------------------------------------------------------------------------

/// Builds the total-loss node for one sample on top of its forward pass.
pub fn sample_loss(
    model: &ModelState,
    fwd: &mut Forward,
    sample: &TrainSample,
) -> Result<(NodeId, LossBreakdown)> {
    let calib = model.calibration()?;
    let is_forged = sample.is_forged(&model.tree);
    let gt_att = downsample_mask(&sample.mask, model.arch.attention_factor)?;
    let loc = losses::localization_loss(&mut fwd.graph, fwd.pixel_embed, &gt_att, calib)?;

    let path = model.tree.path_of(sample.leaf)?;
    let mut level_nodes = [loc; 4];
    let mut level_values = [0.0; 4];
    for level in 1..=LEVELS {
        match path.per_level[level - 1] {
            Some(target) => {
                let ce = losses::level_cross_entropy(&mut fwd.graph, fwd.probs[level - 1], target)?;
                level_nodes[level - 1] = ce;
                level_values[level - 1] = fwd.graph.value(ce).item()?;
            }
            None => {
                // Real sample at levels 1..3: no target, no loss term.
                level_nodes[level - 1] = fwd.graph.constant(Tensor::scalar(0.0));
            }
        }
    }
    let total = losses::total_loss(&mut fwd.graph, is_forged, loc, &level_nodes, &model.weights)?;
    let breakdown = LossBreakdown {
        total: fwd.graph.value(total).item()?,
        loc: fwd.graph.value(loc).item()?,
        levels: level_values,
    };
    Ok((total, breakdown))
}

// ---------------------------------------------------------------------------
// Optimizer and scheduler
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub base_lr: f64,
    pub loc_lr: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub batch_real: usize,
    pub batch_forged: usize,
    /// Epochs without validation improvement before rates halve.
    pub patience: usize,
    pub lr_decay: f64,
    pub margin_factor: f64,
    pub seed: u64,
    pub overlay: OverlayMode,
    /// Worker threads for the per-sample batch loop; 1 is fully serial.
    /// Gradients reduce in sample order either way, so results match.
    pub threads: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            base_lr: 1e-4,
            loc_lr: 3e-4,
            momentum: 0.9,
            epochs: 13,
            batch_real: 8,
            batch_forged: 8,
            patience: 2,
            lr_decay: 0.5,
            margin_factor: losses::DEFAULT_MARGIN_FACTOR,
            seed: 0,
            overlay: OverlayMode::Predicted,
            threads: 0,
        }
    }
}

/// Momentum buffers plus the plateau scheduler state.
#[derive(Debug, Clone, Default)]
pub struct OptState {
    velocity: BTreeMap<String, Vec<f64>>,
    pub lr_scale: f64,
    best_val: Option<f64>,
    stale_epochs: usize,
}

impl OptState {
    pub fn new() -> Self {
        OptState {
            velocity: BTreeMap::new(),
            lr_scale: 1.0,
            best_val: None,
            stale_epochs: 0,
        }
    }

    /// Reduce-on-plateau: halve rates after `patience` epochs without
    /// improvement. Returns true when the rate changed.
    pub fn observe_validation(&mut self, val_loss: f64, cfg: &TrainConfig) -> bool {
        match self.best_val {
            None => {
                self.best_val = Some(val_loss);
                false
            }
            Some(best) if val_loss < best => {
                self.best_val = Some(val_loss);
                self.stale_epochs = 0;
                false
            }
            Some(_) => {
                self.stale_epochs += 1;
                if self.stale_epochs >= cfg.patience {
                    self.lr_scale *= cfg.lr_decay;
                    self.stale_epochs = 0;
                    true
                } else {
                    false
                }
            }
        }
    }
}

/// Learning rate for a parameter: the localization module (attention head)
/// trains at `loc_lr`, everything else at `base_lr`.
fn group_lr(name: &str, cfg: &TrainConfig, scale: f64) -> f64 {
    if name.starts_with("attn.") {
        cfg.loc_lr * scale
    } else {
        cfg.base_lr * scale
    }
}

/// One SGD-with-momentum step over a batch; per-sample gradients reduce in
/// sample order regardless of thread count.
pub fn train_step(
    model: &mut ModelState,
    batch: &[TrainSample],
    opt: &mut OptState,
    cfg: &TrainConfig,
) -> Result<LossBreakdown> {
    if batch.is_empty() {
        return Err(Error::Data("train_step: empty batch".into()));
    }
    let run_one = |(i, sample): (usize, &TrainSample)| -> Result<(Vec<(String, Vec<f64>)>, LossBreakdown)> {
        let gt = if cfg.overlay == OverlayMode::Teacher {
            Some(&sample.mask)
        } else {
            None
        };
        let mut fwd = model.forward(&sample.image, true, cfg.overlay, gt)?;
        let (loss, breakdown) = sample_loss(model, &mut fwd, sample)?;
        if !breakdown.total.is_finite() {
            return Err(Error::NonFinite(format!("loss of batch sample {i}")));
        }
        fwd.graph
            .backward(loss)
            .map_err(|e| Error::Numeric(format!("backward failed on batch sample {i}: {e}")))?;
        Ok((fwd.bind.collect_grads(&fwd.graph), breakdown))
    };
    let results: Vec<Result<(Vec<(String, Vec<f64>)>, LossBreakdown)>> = if cfg.threads > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.threads)
            .build()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
        pool.install(|| batch.par_iter().enumerate().map(run_one).collect())
    } else {
        batch.iter().enumerate().map(run_one).collect()
    };

    let mut grads: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    let mut mean = LossBreakdown::default();
    for result in results {
        let (sample_grads, breakdown) = result?;
        for (name, g) in sample_grads {
            match grads.get_mut(&name) {
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                None => {
                    grads.insert(name, g);
                }
            }
        }
        mean.total += breakdown.total;
        mean.loc += breakdown.loc;
        for (m, l) in mean.levels.iter_mut().zip(breakdown.levels) {
            *m += l;
        }
    }
    let inv = 1.0 / batch.len() as f64;
    mean.total *= inv;
    mean.loc *= inv;
    mean.levels.iter_mut().for_each(|l| *l *= inv);

    for (name, grad) in &grads {
        let lr = group_lr(name, cfg, opt.lr_scale);
        if lr == 0.0 {
            continue;
        }
        let velocity = opt
            .velocity
            .entry(name.clone())
            .or_insert_with(|| vec![0.0; grad.len()]);
        let param = model.params.get_mut(name)?;
        for ((p, v), g) in param.data_mut().iter_mut().zip(velocity.iter_mut()).zip(grad) {
            *v = cfg.momentum * *v + g;
            *p -= lr * *v;
        }
        param.validate_finite(&format!("parameter {name} after update"))?;
    }
    Ok(mean)
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, serde::Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_loc: f64,
    pub train_levels: [f64; 4],
    pub val_loss: f64,
    pub val_det_auc: f64,
    pub val_l4_acc: f64,
    pub lr_scale: f64,
}

#[derive(Debug, Clone)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: usize,
    pub loss: LossBreakdown,
}

#[derive(Debug, Default)]
pub struct TrainOutcome {
    pub history: Vec<EpochRecord>,
    pub steps: Vec<StepRecord>,
}

fn shuffle<T>(items: &mut [T], rng: &mut ChaCha8Rng) {
    for i in (1..items.len()).rev() {
        let j = rng.random_range(0..=i);
        items.swap(i, j);
    }
}

/// Mean validation loss plus quick detection/attribute metrics.
fn validation_pass(
    model: &ModelState,
    val: &[TrainSample],
    cfg: &TrainConfig,
) -> Result<(f64, f64, f64)> {
    if val.is_empty() {
        return Err(Error::Data("validation split is empty".into()));
    }
    let run_one = |sample: &TrainSample| -> Result<(f64, f64, bool, bool)> {
        let gt = if cfg.overlay == OverlayMode::Teacher {
            Some(&sample.mask)
        } else {
            None
        };
        let mut fwd = model.forward(&sample.image, false, cfg.overlay, gt)?;
        let (_, breakdown) = sample_loss(model, &mut fwd, sample)?;
        let p4 = fwd.graph.value(fwd.probs[3]);
        let detection_score = 1.0 - p4.data()[model.tree.real_index()];
        let pred_leaf = argmax(p4.data());
        Ok((
            breakdown.total,
            detection_score,
            pred_leaf == sample.leaf,
            sample.is_forged(&model.tree),
        ))
    };
    let results: Vec<Result<(f64, f64, bool, bool)>> = if cfg.threads > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.threads)
            .build()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
        pool.install(|| val.par_iter().map(run_one).collect())
    } else {
        val.iter().map(run_one).collect()
    };
    let mut loss = 0.0;
    let mut scores = Vec::with_capacity(val.len());
    let mut labels = Vec::with_capacity(val.len());
    let mut correct = 0usize;
    for r in results {
        let (l, score, leaf_ok, forged) = r?;
        loss += l;
        scores.push(score);
        labels.push(forged);
        correct += usize::from(leaf_ok);
    }
    let auc = crate::metrics::auc(&scores, &labels).unwrap_or(f64::NAN);
    Ok((
        loss / val.len() as f64,
        auc,
        correct as f64 / val.len() as f64,
    ))
}

/// Argmax with ties resolved toward the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Full training: calibrate if needed, iterate epochs of balanced batches,
/// validate, schedule rates, and checkpoint per epoch under `out_dir`.
pub fn train_loop(
    model: &mut ModelState,
    train: &[TrainSample],
    val: &[TrainSample],
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    if train.is_empty() {
        return Err(Error::Data("training split is empty".into()));
    }
    let real_pool: Vec<usize> = train
        .iter()
        .enumerate()
        .filter(|(_, s)| !s.is_forged(&model.tree))
        .map(|(i, _)| i)
        .collect();
    let forged_pool: Vec<usize> = train
        .iter()
        .enumerate()
        .filter(|(_, s)| s.is_forged(&model.tree))
        .map(|(i, _)| i)
        .collect();

    if model.calib.is_none() {
        let reals: Vec<TrainSample> = real_pool.iter().map(|&i| train[i].clone()).collect();
        calibrate(model, &reals, cfg.margin_factor)?;
    }

    let mut opt = OptState::new();
    let mut outcome = TrainOutcome::default();
    for epoch in 0..cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(crate::synth::seed_for(cfg.seed, 0x5475 + epoch as u64));
        let mut reals = real_pool.clone();
        let mut forgeds = forged_pool.clone();
        shuffle(&mut reals, &mut rng);
        shuffle(&mut forgeds, &mut rng);
        let batches = if cfg.batch_real == 0 {
            forgeds.len() / cfg.batch_forged.max(1)
        } else if cfg.batch_forged == 0 {
            reals.len() / cfg.batch_real
        } else {
            (reals.len() / cfg.batch_real).min(forgeds.len() / cfg.batch_forged)
        };
        if batches == 0 {
            return Err(Error::Data(format!(
                "not enough samples for one batch of {} real and {} forged",
                cfg.batch_real, cfg.batch_forged
            )));
        }
        let mut train_mean = LossBreakdown::default();
        for step in 0..batches {
            let mut batch = Vec::with_capacity(cfg.batch_real + cfg.batch_forged);
            for i in 0..cfg.batch_real {
                batch.push(train[reals[step * cfg.batch_real + i]].clone());
            }
            for i in 0..cfg.batch_forged {
                batch.push(train[forgeds[step * cfg.batch_forged + i]].clone());
            }
            let breakdown = train_step(model, &batch, &mut opt, cfg)
                .map_err(|e| Error::Numeric(format!("epoch {epoch} step {step}: {e}")))?;
            train_mean.total += breakdown.total;
            train_mean.loc += breakdown.loc;
            for (m, l) in train_mean.levels.iter_mut().zip(breakdown.levels) {
                *m += l;
            }
            outcome.steps.push(StepRecord {
                epoch,
                step,
                loss: breakdown,
            });
        }
        let inv = 1.0 / batches as f64;
        train_mean.total *= inv;
        train_mean.loc *= inv;
        train_mean.levels.iter_mut().for_each(|l| *l *= inv);

        let (val_loss, val_auc, val_acc) = validation_pass(model, val, cfg)?;
        opt.observe_validation(val_loss, cfg);
        outcome.history.push(EpochRecord {
            epoch,
            train_loss: train_mean.total,
            train_loc: train_mean.loc,
            train_levels: train_mean.levels,
            val_loss,
            val_det_auc: val_auc,
            val_l4_acc: val_acc,
            lr_scale: opt.lr_scale,
        });
        if let Some(dir) = out_dir {
            save_checkpoint(model, &dir.join(format!("checkpoint_epoch{epoch:03}.hfck")))?;
        }
    }
    if let Some(dir) = out_dir {
        save_checkpoint(model, &dir.join("checkpoint.hfck"))?;
        fs::write(dir.join("history.csv"), history_csv(&outcome.history))?;
        fs::write(dir.join("steps.csv"), steps_csv(&outcome.steps))?;
    }
    Ok(outcome)
}

pub fn history_csv(history: &[EpochRecord]) -> String {
    let mut out = String::from(
        "epoch,split,loss_total,loss_loc,loss_l1,loss_l2,loss_l3,loss_l4,det_auc,l4_acc,lr_scale\n",
    );
    for r in history {
        let _ = writeln!(
            out,
            "{},train,{},{},{},{},{},{},,,{}",
            r.epoch,
            r.train_loss,
            r.train_loc,
            r.train_levels[0],
            r.train_levels[1],
            r.train_levels[2],
            r.train_levels[3],
            r.lr_scale
        );
        let _ = writeln!(
            out,
            "{},val,{},,,,,,{},{},{}",
            r.epoch, r.val_loss, r.val_det_auc, r.val_l4_acc, r.lr_scale
        );
    }
    out
}

pub fn steps_csv(steps: &[StepRecord]) -> String {
    let mut out = String::from("epoch,step,loss_total,loss_loc,loss_l1,loss_l2,loss_l3,loss_l4\n");
    for s in steps {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            s.epoch,
            s.step,
            s.loss.total,
            s.loss.loc,
            s.loss.levels[0],
            s.loss.levels[1],
            s.loss.levels[2],
            s.loss.levels[3]
        );
    }
    out
}

// ---------------------------------------------------------------------------
// Prediction
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct Prediction {
    pub level_probs: [Vec<f64>; 4],
    pub mask_scores: Tensor,
    pub binary_mask: Tensor,
    pub is_forged: bool,
    /// 1 - p(real) at level 4.
    pub detection_score: f64,
    pub leaf: usize,
    pub path: crate::taxonomy::LabelPath,
}

/// Inference: forged iff the level-4 argmax lands outside the real class;
/// the predicted path follows the taxonomy of the argmax leaf.
pub fn predict(model: &ModelState, image: &Tensor) -> Result<Prediction> {
    let fwd = model.forward(image, false, OverlayMode::Predicted, None)?;
    let level_probs: [Vec<f64>; 4] = std::array::from_fn(|b| fwd.graph.value(fwd.probs[b]).data().to_vec());
    let leaf = argmax(&level_probs[3]);
    let real = model.tree.real_index();
    Ok(Prediction {
        path: model.tree.path_of(leaf)?,
        is_forged: leaf != real,
        detection_score: 1.0 - level_probs[3][real],
        leaf,
        mask_scores: fwd.mask_scores,
        binary_mask: fwd.binary_mask,
        level_probs,
    })
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

fn weights_config_string(w: &LossWeights) -> String {
    format!(
        "lambda_loc = {}\nw4 = {}\nhierarchy_on = {}\nlevels_on = {},{},{},{}\nloc_on = {}\nmain_paper_form = {}\nreal_parent = {}\n",
        w.lambda_loc,
        w.w4,
        w.hierarchy_on,
        w.levels_on[0],
        w.levels_on[1],
        w.levels_on[2],
        w.levels_on[3],
        w.loc_on,
        w.main_paper_form,
        match w.real_parent {
            losses::RealParentMode::Zero => "zero",
            losses::RealParentMode::One => "one",
        }
    )
}

fn parse_bool(v: &str, what: &str) -> Result<bool> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(Error::Format(format!("bad bool {v:?} for {what}"))),
    }
}

fn parse_kv(text: &str) -> BTreeMap<String, String> {
    let mut map = BTreeMap::new();
    for line in text.lines() {
        if let Some((k, v)) = line.split_once('=') {
            map.insert(k.trim().to_string(), v.trim().to_string());
        }
    }
    map
}

fn weights_from_config(text: &str) -> Result<LossWeights> {
    let kv = parse_kv(text);
    let get = |k: &str| kv.get(k).ok_or_else(|| Error::Format(format!("missing weight key {k}")));
    let levels: Vec<&str> = get("levels_on")?.split(',').collect();
    if levels.len() != 4 {
        return Err(Error::Format("levels_on must have 4 entries".into()));
    }
    let mut levels_on = [true; 4];
    for (slot, v) in levels_on.iter_mut().zip(&levels) {
        *slot = parse_bool(v, "levels_on")?;
    }
    Ok(LossWeights {
        lambda_loc: get("lambda_loc")?.parse().map_err(|_| Error::Format("bad lambda_loc".into()))?,
        w4: get("w4")?.parse().map_err(|_| Error::Format("bad w4".into()))?,
        hierarchy_on: parse_bool(get("hierarchy_on")?, "hierarchy_on")?,
        levels_on,
        loc_on: parse_bool(get("loc_on")?, "loc_on")?,
        main_paper_form: parse_bool(get("main_paper_form")?, "main_paper_form")?,
        real_parent: match get("real_parent")?.as_str() {
            "zero" => losses::RealParentMode::Zero,
            "one" => losses::RealParentMode::One,
            other => return Err(Error::Format(format!("bad real_parent {other:?}"))),
        },
    })
}

fn arch_from_config(text: &str) -> Result<ArchConfig> {
    let kv = parse_kv(text);
    let get = |k: &str| kv.get(k).ok_or_else(|| Error::Format(format!("missing arch key {k}")));
    let parse_usize = |k: &str| -> Result<usize> {
        get(k)?.parse().map_err(|_| Error::Format(format!("bad arch value for {k}")))
    };
    let widths: Vec<&str> = get("branch_widths")?.split(',').collect();
    if widths.len() != 4 {
        return Err(Error::Format("branch_widths must have 4 entries".into()));
    }
    let mut branch_widths = [0usize; 4];
    for (slot, v) in branch_widths.iter_mut().zip(&widths) {
        *slot = v.trim().parse().map_err(|_| Error::Format("bad branch width".into()))?;
    }
    Ok(ArchConfig {
        input_res: parse_usize("input_res")?,
        stem_channels: parse_usize("stem_channels")?,
        log_size: parse_usize("log_size")?,
        log_sigma: get("log_sigma")?.parse().map_err(|_| Error::Format("bad log_sigma".into()))?,
        branch_widths,
        attention_channels: parse_usize("attention_channels")?,
        attention_factor: parse_usize("attention_factor")?,
        embed_dim: parse_usize("embed_dim")?,
        pconv_channels: parse_usize("pconv_channels")?,
        pconv_on: parse_bool(get("pconv_on")?, "pconv_on")?,
        attention_budget: parse_usize("attention_budget")?,
    })
}

/// Digest of the architecture + loss-weight configuration.
pub fn config_digest(arch: &ArchConfig, weights: &LossWeights) -> String {
    sha256_hex(format!("{}{}", arch.to_config_string(), weights_config_string(weights)).as_bytes())
}

fn write_block<W: Write>(w: &mut W, bytes: &[u8]) -> Result<()> {
    w.write_all(&(bytes.len() as u32).to_le_bytes())?;
    w.write_all(bytes)?;
    Ok(())
}

fn read_block<R: Read>(r: &mut R) -> Result<Vec<u8>> {
    let len = read_u32(r)? as usize;
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    Ok(buf)
}

fn read_f64<R: Read>(r: &mut R) -> Result<f64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    Ok(f64::from_le_bytes(buf))
}

/// Writes the model: magic, version, config strings and digests, taxonomy,
/// calibration, then named tensors sorted by name.
pub fn save_checkpoint(model: &ModelState, path: &Path) -> Result<()> {
    let mut out = BufWriter::new(fs::File::create(path)?);
    out.write_all(CHECKPOINT_MAGIC)?;
    out.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    let arch_text = model.arch.to_config_string();
    let weights_text = weights_config_string(&model.weights);
    write_block(&mut out, config_digest(&model.arch, &model.weights).as_bytes())?;
    write_block(&mut out, arch_text.as_bytes())?;
    write_block(&mut out, weights_text.as_bytes())?;
    let tax_text = model.tree.to_config_string();
    write_block(&mut out, model.tree.digest().as_bytes())?;
    write_block(&mut out, tax_text.as_bytes())?;
    match &model.calib {
        Some(c) => {
            out.write_all(&[1u8])?;
            c.center.write_record(&mut out)?;
            out.write_all(&c.tau.to_le_bytes())?;
            out.write_all(&c.d_max.to_le_bytes())?;
            out.write_all(&c.margin_factor.to_le_bytes())?;
        }
        None => out.write_all(&[0u8])?,
    }
    out.write_all(&(model.params.len() as u32).to_le_bytes())?;
    for (name, tensor) in model.params.iter() {
        write_block(&mut out, name.as_bytes())?;
        tensor.write_record(&mut out)?;
    }
    out.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<ModelState> {
    let mut r = BufReader::new(fs::File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::Format(format!("bad checkpoint magic {magic:?}")));
    }
    let version = read_u32(&mut r)?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let stored_digest = String::from_utf8(read_block(&mut r)?)
        .map_err(|_| Error::Format("bad digest encoding".into()))?;
    let arch_text = String::from_utf8(read_block(&mut r)?)
        .map_err(|_| Error::Format("bad arch encoding".into()))?;
    let weights_text = String::from_utf8(read_block(&mut r)?)
        .map_err(|_| Error::Format("bad weights encoding".into()))?;
    let arch = arch_from_config(&arch_text)?;
    let weights = weights_from_config(&weights_text)?;
    let actual = config_digest(&arch, &weights);
    if actual != stored_digest {
        return Err(Error::DigestMismatch {
            what: "config",
            expected: stored_digest,
            actual,
        });
    }
    let tax_digest = String::from_utf8(read_block(&mut r)?)
        .map_err(|_| Error::Format("bad taxonomy digest encoding".into()))?;
    let tax_text = String::from_utf8(read_block(&mut r)?)
        .map_err(|_| Error::Format("bad taxonomy encoding".into()))?;
    let tree = TaxonomyTree::parse(&tax_text)?;
    if tree.digest() != tax_digest {
        return Err(Error::DigestMismatch {
            what: "taxonomy",
            expected: tax_digest,
            actual: tree.digest(),
        });
    }
    let mut flag = [0u8; 1];
    r.read_exact(&mut flag)?;
    let calib = if flag[0] == 1 {
        let center = Tensor::read_record(&mut r)?;
        let tau = read_f64(&mut r)?;
        let d_max = read_f64(&mut r)?;
        let margin_factor = read_f64(&mut r)?;
        Some(LocalizationCalibration {
            center,
            tau,
            d_max,
            margin_factor,
        })
    } else {
        None
    };
    let count = read_u32(&mut r)? as usize;
    let mut params = ParamSet::new();
    for _ in 0..count {
        let name = String::from_utf8(read_block(&mut r)?)
            .map_err(|_| Error::Format("bad parameter name".into()))?;
        params.insert(&name, Tensor::read_record(&mut r)?)?;
    }
    let log_kernel = LoGKernel::new(arch.log_size, arch.log_sigma)?;
    Ok(ModelState {
        params,
        calib,
        tree,
        arch,
        weights,
        log_kernel,
    })
}
