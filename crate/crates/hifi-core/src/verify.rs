//! The gradient-verification suite: every differentiable block checked
//! against central finite differences over randomized small shapes, plus an
//! end-to-end check of the tiny model.
//!
//! The end-to-end case uses the teacher-forcing overlay so the loss stays a
//! smooth function of the parameters; the mask-thresholding path is
//! non-differentiable by design and is excluded exactly there.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::blocks::{self, ArchConfig, LoGKernel, ParamBind};
use crate::error::Result;
use crate::gradcheck::{check, CheckReport, DEFAULT_EPS};
use crate::graph::{Graph, NodeId};
use crate::losses::{self, LocalizationCalibration, LossWeights};
use crate::network::{self, OverlayMode, TrainSample};
use crate::ops::Reduce;
use crate::taxonomy::{mini_taxonomy_config, TaxonomyTree};
use crate::tensor::{ParamSet, Tensor};

pub const DEFAULT_SEEDS: usize = 20;
pub const DEFAULT_TOL: f64 = 1e-4;
pub const DEFAULT_E2E_TOL: f64 = 1e-3;

#[derive(Debug)]
pub struct SuiteReport {
    pub checks: Vec<CheckReport>,
    pub pass: bool,
}

impl SuiteReport {
    pub fn lines(&self) -> String {
        let mut out = String::new();
        for c in &self.checks {
            out.push_str(&c.line());
            out.push('\n');
        }
        out
    }
}

fn rng_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

fn rng_mask(h: usize, w: usize, rng: &mut ChaCha8Rng) -> Tensor {
    loop {
        let data: Vec<f64> = (0..h * w)
            .map(|_| if rng.random_bool(0.5) { 1.0 } else { 0.0 })
            .collect();
        // Keep at least one pixel of each class so every path is exercised.
        if data.iter().any(|&v| v == 1.0) && data.iter().any(|&v| v == 0.0) {
            return Tensor::new(vec![1, h, w], data).unwrap();
        }
    }
}

/// Sum of squares over a node; a scalar objective with nontrivial gradients.
fn sum_sq(g: &mut Graph, node: NodeId) -> Result<NodeId> {
    let sq = g.mul(node, node)?;
    let rank = g.value(sq).rank();
    let axes: Vec<usize> = (0..rank).collect();
    g.reduce(Reduce::Sum, sq, &axes)
}

/// Runs one graph-builder as a gradcheck case: the builder inserts every
/// parameter of `params` as a differentiable leaf and returns the loss node.
fn graph_case<F>(name: &str, params: &ParamSet, build: F, eps: f64, tol: f64) -> Result<CheckReport>
where
    F: Fn(&ParamSet, &mut Graph, &mut ParamBind) -> Result<NodeId>,
{
    check(
        name,
        params,
        |p| {
            let mut g = Graph::new();
            let mut bind = ParamBind::new(false);
            let loss = build(p, &mut g, &mut bind)?;
            g.value(loss).item()
        },
        |p| {
            let mut g = Graph::new();
            let mut bind = ParamBind::new(true);
            let loss = build(p, &mut g, &mut bind)?;
            g.backward(loss)?;
            Ok(bind.collect_grads(&g))
        },
        eps,
        tol,
    )
}

fn conv_case(seed: u64, eps: f64, tol: f64) -> Result<CheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (c_in, c_out) = (rng.random_range(1..3usize), rng.random_range(1..3usize));
    let k = [1usize, 3][rng.random_range(0..2usize)];
    let stride = rng.random_range(1..3usize);
    let pad = rng.random_range(0..2usize);
    let h = rng.random_range(k.max(3)..6usize);
    let w = rng.random_range(k.max(3)..6usize);
    let mut params = ParamSet::new();
    params.insert("x", rng_tensor(&[c_in, h, w], &mut rng))?;
    params.insert("w", rng_tensor(&[c_out, c_in, k, k], &mut rng))?;
    params.insert("b", rng_tensor(&[c_out], &mut rng))?;
    graph_case(
        &format!("conv2d[s{seed}]"),
        &params,
        |p, g, bind| {
            let x = bind.node(g, p, "x")?;
            let wt = bind.node(g, p, "w")?;
            let bt = bind.node(g, p, "b")?;
            let out = g.conv2d(x, wt, bt, stride, pad)?;
            sum_sq(g, out)
        },
        eps,
        tol,
    )
}

fn softmax_ce_case(seed: u64, eps: f64, tol: f64) -> Result<CheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = rng.random_range(2..7usize);
    let target = rng.random_range(0..k);
    let mut params = ParamSet::new();
    params.insert("logits", rng_tensor(&[k], &mut rng))?;
    graph_case(
        &format!("softmax_cross_entropy[s{seed}]"),
        &params,
        |p, g, bind| {
            let l = bind.node(g, p, "logits")?;
            let probs = g.softmax(l)?;
            losses::level_cross_entropy(g, probs, target)
        },
        eps,
        tol,
    )
}

fn matmul_case(seed: u64, eps: f64, tol: f64) -> Result<CheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (m, k, n) = (
        rng.random_range(1..4usize),
        rng.random_range(1..4usize),
        rng.random_range(1..4usize),
    );
    let mut params = ParamSet::new();
    params.insert("a", rng_tensor(&[m, k], &mut rng))?;
    params.insert("b", rng_tensor(&[k, n], &mut rng))?;
    graph_case(
        &format!("matmul[s{seed}]"),
        &params,
        |p, g, bind| {
            let a = bind.node(g, p, "a")?;
            let b = bind.node(g, p, "b")?;
            let out = g.matmul(a, b)?;
            sum_sq(g, out)
        },
        eps,
        tol,
    )
}

fn elementwise_case(seed: u64, eps: f64, tol: f64) -> Result<CheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = [2usize, rng.random_range(2..4usize), rng.random_range(2..4usize)];
    let mut params = ParamSet::new();
    params.insert("a", rng_tensor(&shape, &mut rng))?;
    params.insert("b", rng_tensor(&shape, &mut rng))?;
    params.insert("m", rng_tensor(&[1, shape[1], shape[2]], &mut rng))?;
    graph_case(
        &format!("elementwise[s{seed}]"),
        &params,
        |p, g, bind| {
            let a = bind.node(g, p, "a")?;
            let b = bind.node(g, p, "b")?;
            let m = bind.node(g, p, "m")?;
            let prod = g.mul(a, b)?;
            let sum = g.add(prod, a)?;
            let diff = g.sub(sum, b)?;
            let scaled = g.scale(diff, 0.75);
            let act = g.relu(scaled);
            let masked = g.mul_mask(act, m)?;
            sum_sq(g, masked)
        },
        eps,
        tol,
    )
}

fn resample_reduce_case(seed: u64, eps: f64, tol: f64) -> Result<CheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ParamSet::new();
    params.insert("x", rng_tensor(&[2, 4, 4], &mut rng))?;
    graph_case(
        &format!("resample_reduce[s{seed}]"),
        &params,
        |p, g, bind| {
            let x = bind.node(g, p, "x")?;
            let down = g.down_avg(x, 2)?;
            let up = g.up_nearest(down, 2)?;
            let norm = g.reduce(Reduce::L2Norm, up, &[0])?;
            let mean = g.reduce(Reduce::Mean, norm, &[0, 1])?;
            let s = g.reduce(Reduce::Sum, down, &[0, 1, 2])?;
            let combined = g.add(mean, s)?;
            sum_sq(g, combined)
        },
        eps,
        tol,
    )
}

fn log_filter_case(seed: u64, eps: f64, tol: f64) -> Result<CheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let kernel = LoGKernel::new(3, 0.9).unwrap();
    let mut params = ParamSet::new();
    params.insert("x", rng_tensor(&[2, 5, 5], &mut rng))?;
    graph_case(
        &format!("log_filter[s{seed}]"),
        &params,
        move |p, g, bind| {
            let x = bind.node(g, p, "x")?;
            let out = blocks::log_filter(g, x, &kernel)?;
            sum_sq(g, out)
        },
        eps,
        tol,
    )
}

fn partial_conv_case(seed: u64, eps: f64, tol: f64) -> Result<CheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mask = rng_mask(5, 5, &mut rng);
    let mut params = ParamSet::new();
    params.insert("x", rng_tensor(&[2, 5, 5], &mut rng))?;
    params.insert("w", rng_tensor(&[2, 2, 3, 3], &mut rng))?;
    params.insert("b", rng_tensor(&[2], &mut rng))?;
    graph_case(
        &format!("partial_conv[s{seed}]"),
        &params,
        move |p, g, bind| {
            let x = bind.node(g, p, "x")?;
            let w = bind.node(g, p, "w")?;
            let b = bind.node(g, p, "b")?;
            let (out, _) = blocks::partial_conv(g, x, &mask, w, b, 1, 1)?;
            sum_sq(g, out)
        },
        eps,
        tol,
    )
}

fn attention_case(seed: u64, eps: f64, tol: f64) -> Result<CheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cfg = ArchConfig::tiny();
    cfg.branch_widths[3] = 3;
    cfg.attention_channels = 2;
    cfg.embed_dim = 2;
    let mut params = ParamSet::new();
    params.insert("feat", rng_tensor(&[3, 2, 2], &mut rng))?;
    for name in ["g", "phi", "psi"] {
        params.insert(&format!("attn.{name}.w"), rng_tensor(&[2, 3, 1, 1], &mut rng))?;
        params.insert(&format!("attn.{name}.b"), rng_tensor(&[2], &mut rng))?;
    }
    params.insert("attn.proj.w", rng_tensor(&[2, 2, 1, 1], &mut rng))?;
    params.insert("attn.proj.b", rng_tensor(&[2], &mut rng))?;
    graph_case(
        &format!("attention_localize[s{seed}]"),
        &params,
        move |p, g, bind| {
            let feat = bind.node(g, p, "feat")?;
            let out = blocks::attention_localize(g, bind, p, &cfg, feat)?;
            sum_sq(g, out.pixel_embed)
        },
        eps,
        tol,
    )
}

fn masked_embed_case(seed: u64, eps: f64, tol: f64) -> Result<CheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mask = rng_mask(6, 6, &mut rng);
    let mut params = ParamSet::new();
    params.insert("img", rng_tensor(&[3, 6, 6], &mut rng))?;
    params.insert("pconv.1.w", rng_tensor(&[2, 3, 3, 3], &mut rng))?;
    params.insert("pconv.1.b", rng_tensor(&[2], &mut rng))?;
    params.insert("pconv.2.w", rng_tensor(&[2, 2, 3, 3], &mut rng))?;
    params.insert("pconv.2.b", rng_tensor(&[2], &mut rng))?;
    graph_case(
        &format!("masked_embed[s{seed}]"),
        &params,
        move |p, g, bind| {
            let img = bind.node(g, p, "img")?;
            let emb = blocks::masked_embed(g, bind, p, &mask, img)?;
            sum_sq(g, emb)
        },
        eps,
        tol,
    )
}

fn localization_loss_case(seed: u64, eps: f64, tol: f64) -> Result<CheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = 3usize;
    let calib = LocalizationCalibration {
        center: rng_tensor(&[d], &mut rng),
        tau: rng.random_range(0.8..2.0),
        d_max: 1.0,
        margin_factor: 2.5,
    };
    let mask = rng_mask(3, 3, &mut rng);
    let mut params = ParamSet::new();
    params.insert("embed", rng_tensor(&[d, 3, 3], &mut rng))?;
    graph_case(
        &format!("localization_loss[s{seed}]"),
        &params,
        move |p, g, bind| {
            let e = bind.node(g, p, "embed")?;
            losses::localization_loss(g, e, &mask, &calib)
        },
        eps,
        tol,
    )
}

fn hierarchical_ce_case(seed: u64, eps: f64, tol: f64) -> Result<CheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tree = TaxonomyTree::parse(&mini_taxonomy_config()).unwrap();
    let leaf = rng.random_range(0..tree.leaf_count());
    let path = tree.path_of(leaf).unwrap();
    let mut params = ParamSet::new();
    for b in 1..=4usize {
        params.insert(&format!("logits{b}"), rng_tensor(&[tree.cardinality(b)], &mut rng))?;
    }
    graph_case(
        &format!("hierarchical_cross_entropy[s{seed}]"),
        &params,
        move |p, g, bind| {
            let logits: [NodeId; 4] = [
                bind.node(g, p, "logits1")?,
                bind.node(g, p, "logits2")?,
                bind.node(g, p, "logits3")?,
                bind.node(g, p, "logits4")?,
            ];
            let probs = losses::hierarchical_probs(g, &tree, &logits, true, losses::RealParentMode::Zero)?;
            // Sum the cross-entropies along the label path (level 4 always).
            let mut acc = losses::level_cross_entropy(g, probs[3], path.per_level[3].unwrap())?;
            for b in 1..=3usize {
                if let Some(t) = path.per_level[b - 1] {
                    let ce = losses::level_cross_entropy(g, probs[b - 1], t)?;
                    acc = g.add(acc, ce)?;
                }
            }
            Ok(acc)
        },
        eps,
        tol,
    )
}

fn head_case(seed: u64, eps: f64, tol: f64) -> Result<CheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ParamSet::new();
    params.insert("feat", rng_tensor(&[3, 4, 4], &mut rng))?;
    params.insert("head.2.w", rng_tensor(&[4, 3], &mut rng))?;
    params.insert("head.2.b", rng_tensor(&[4], &mut rng))?;
    graph_case(
        &format!("classification_head[s{seed}]"),
        &params,
        |p, g, bind| {
            let f = bind.node(g, p, "feat")?;
            let logits = blocks::classification_head(g, bind, p, 2, f)?;
            sum_sq(g, logits)
        },
        eps,
        tol,
    )
}

/// End-to-end check: the tiny model's full training loss as a function of
/// every parameter, with the teacher overlay so the objective is smooth.
pub fn end_to_end_case(seed: u64, eps: f64, tol: f64) -> Result<CheckReport> {
    let tree = TaxonomyTree::parse(&mini_taxonomy_config()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let base = network::init_model(ArchConfig::tiny(), tree.clone(), LossWeights::default(), seed)?;
    let res = base.arch.input_res;
    let image = {
        let t = rng_tensor(&[3, res, res], &mut rng);
        Tensor::new(
            t.shape().to_vec(),
            t.data().iter().map(|v| (v + 1.0) / 2.0).collect(),
        )?
    };
    let gt_mask = rng_mask(res, res, &mut rng);
    let leaf = tree.leaf_index("inpaint").unwrap();
    let calib = LocalizationCalibration {
        center: rng_tensor(&[base.arch.embed_dim], &mut rng),
        tau: 1.5,
        d_max: 0.6,
        margin_factor: 2.5,
    };
    let sample = TrainSample {
        image,
        mask: gt_mask,
        leaf,
    };

    let eval = |params: &ParamSet, train: bool| -> Result<(f64, Vec<(String, Vec<f64>)>)> {
        let mut model = base.clone();
        model.params = params.clone();
        model.calib = Some(calib.clone());
        let mut fwd = model.forward(&sample.image, train, OverlayMode::Teacher, Some(&sample.mask))?;
        let (loss, _) = network::sample_loss(&model, &mut fwd, &sample)?;
        let value = fwd.graph.value(loss).item()?;
        if !train {
            return Ok((value, vec![]));
        }
        fwd.graph.backward(loss)?;
        Ok((value, fwd.bind.collect_grads(&fwd.graph)))
    };

    check(
        &format!("end_to_end_tiny[s{seed}]"),
        &base.params,
        |p| Ok(eval(p, false)?.0),
        |p| {
            let (_, grads) = eval(p, true)?;
            // The same parameter may be bound more than once; merge by name.
            let mut merged: std::collections::BTreeMap<String, Vec<f64>> = Default::default();
            for (name, g) in grads {
                match merged.get_mut(&name) {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    None => {
                        merged.insert(name, g);
                    }
                }
            }
            Ok(merged.into_iter().collect())
        },
        eps,
        tol,
    )
}

/// Runs the whole suite: per-block checks over `seeds` random seeds plus
/// one end-to-end case.
pub fn run_suite(seeds: usize, tol: f64, e2e_tol: f64) -> Result<SuiteReport> {
    let mut checks = Vec::new();
    for s in 0..seeds as u64 {
        checks.push(conv_case(s, DEFAULT_EPS, tol)?);
        checks.push(softmax_ce_case(s, DEFAULT_EPS, tol)?);
        checks.push(matmul_case(s, DEFAULT_EPS, tol)?);
        checks.push(elementwise_case(s, DEFAULT_EPS, tol)?);
        checks.push(resample_reduce_case(s, DEFAULT_EPS, tol)?);
        checks.push(log_filter_case(s, DEFAULT_EPS, tol)?);
        checks.push(partial_conv_case(s, DEFAULT_EPS, tol)?);
        checks.push(attention_case(s, DEFAULT_EPS, tol)?);
        checks.push(masked_embed_case(s, DEFAULT_EPS, tol)?);
        checks.push(localization_loss_case(s, DEFAULT_EPS, tol)?);
        checks.push(hierarchical_ce_case(s, DEFAULT_EPS, tol)?);
        checks.push(head_case(s, DEFAULT_EPS, tol)?);
    }
    checks.push(end_to_end_case(0, DEFAULT_EPS, e2e_tol)?);
    let pass = checks.iter().all(|c| c.pass);
    Ok(SuiteReport { checks, pass })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn per_block_cases_pass_on_a_few_seeds() {
        let report = run_suite(3, DEFAULT_TOL, DEFAULT_E2E_TOL).unwrap();
        assert!(report.pass, "{}", report.lines());
        assert!(report.checks.len() == 3 * 12 + 1);
    }

    #[test]
    fn absurd_tolerance_fails() {
        let report = run_suite(1, 1e-16, 1e-16).unwrap();
        assert!(!report.pass);
    }
}
