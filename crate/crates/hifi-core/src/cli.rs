//! Command-line entry point: dataset generation, training, evaluation,
//! single-image inference and gradient verification.
//!
//! Every command reads an optional flat key=value config file; explicit
//! command-line flags override file values, and the HIFI_SEED environment
//! variable backstops a missing seed. Exit codes: 0 success, 2 usage,
//! 3 data/digest mismatch, 4 numeric failure, 1 anything else.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{ArgAction, Args, Parser, Subcommand};
use rayon::prelude::*;

use crate::blocks::ArchConfig;
use crate::error::{Error, Result};
use crate::losses::{LossWeights, RealParentMode};
use crate::metrics::{self, EvalItem, LocPooling};
use crate::network::{self, ModelState, OverlayMode, TrainConfig, TrainSample};
use crate::synth::{self, DatasetConfig, DatasetManifest, Postprocess};
use crate::taxonomy::TaxonomyTree;
use crate::tensor::Tensor;

pub const SEED_ENV: &str = "HIFI_SEED";

#[derive(Parser, Debug)]
#[command(
    name = "hifi",
    version,
    about = "Hierarchical fine-grained image forgery detection and localization"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic forgery dataset.
    Generate(GenerateArgs),
    /// Train a model on a generated dataset.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset split.
    Eval(EvalArgs),
    /// Classify and localize a single P6 image.
    Infer(InferArgs),
    /// Run the gradient-verification suite.
    Gradcheck(GradcheckArgs),
}

#[derive(Args, Debug, Default)]
struct CommonArgs {
    /// Flat key=value config file; flags override file values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed (falls back to the config file, then HIFI_SEED).
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
struct GenerateArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Output dataset directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Taxonomy config file (defaults to the built-in 2/4/4/7 tree).
    #[arg(long)]
    taxonomy: Option<PathBuf>,
    #[arg(long)]
    height: Option<usize>,
    #[arg(long)]
    width: Option<usize>,
    /// Images per forgery leaf.
    #[arg(long)]
    per_leaf: Option<usize>,
    /// Real images in total.
    #[arg(long)]
    real_count: Option<usize>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Dataset directory produced by `generate`.
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Output directory for checkpoints, history and plot data.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Architecture preset: desk, tiny or paper.
    #[arg(long)]
    preset: Option<String>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    base_lr: Option<f64>,
    #[arg(long)]
    loc_lr: Option<f64>,
    #[arg(long)]
    momentum: Option<f64>,
    #[arg(long)]
    batch_real: Option<usize>,
    #[arg(long)]
    batch_forged: Option<usize>,
    #[arg(long)]
    lambda_loc: Option<f64>,
    #[arg(long)]
    w4: Option<f64>,
    #[arg(long)]
    margin_factor: Option<f64>,
    #[arg(long)]
    patience: Option<usize>,
    #[arg(long)]
    threads: Option<usize>,
    /// Disable the hierarchical path scaling (ablation).
    #[arg(long, action = ArgAction::SetTrue)]
    no_hierarchy: bool,
    /// Disable the partial-convolution pathway (ablation).
    #[arg(long, action = ArgAction::SetTrue)]
    no_pconv: bool,
    /// Disable the localization loss (ablation).
    #[arg(long, action = ArgAction::SetTrue)]
    no_loc_loss: bool,
    /// Comma list of classification levels to train, e.g. "4" or "1,2,3,4".
    #[arg(long)]
    levels: Option<String>,
    /// Overlay the ground-truth mask instead of the prediction.
    #[arg(long, action = ArgAction::SetTrue)]
    teacher_forcing: bool,
    /// Apply lambda_loc to real samples too (main-paper objective form).
    #[arg(long, action = ArgAction::SetTrue)]
    main_paper_form: bool,
    /// Parent contribution of the level-4 "real" slot: zero or one.
    #[arg(long)]
    real_parent: Option<String>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Dataset split to score: train, val or test.
    #[arg(long)]
    split: Option<String>,
    /// Report output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Quality transform applied before scoring, e.g. blur:5, noise:3,
    /// resize:0.78.
    #[arg(long)]
    postprocess: Option<String>,
    /// Localization AUC pooling: per-image or global.
    #[arg(long)]
    pooling: Option<String>,
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Args, Debug)]
struct InferArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Input image (binary P6).
    image: PathBuf,
    /// Output mask path (defaults to <image>.mask.pgm).
    #[arg(long)]
    mask_out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Random seeds per block check.
    #[arg(long)]
    seeds: Option<usize>,
    #[arg(long)]
    tol: Option<f64>,
    #[arg(long)]
    e2e_tol: Option<f64>,
    /// Test fixture: append a deliberately sign-flipped check.
    #[arg(long, action = ArgAction::SetTrue, hide = true)]
    inject_fault: bool,
}

// ---------------------------------------------------------------------------
// Config file
// ---------------------------------------------------------------------------

#[derive(Debug, Default)]
struct FileConfig(BTreeMap<String, String>);

impl FileConfig {
    fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Usage(format!("cannot read config {}: {e}", path.display())))?;
        let mut map = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::Usage(format!("config line {}: expected key = value", lineno + 1))
            })?;
            map.insert(k.trim().to_string(), v.trim().to_string());
        }
        Ok(FileConfig(map))
    }

    fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>> {
        match self.0.get(key) {
            None => Ok(None),
            Some(v) => v
                .parse()
                .map(Some)
                .map_err(|_| Error::Usage(format!("config value {v:?} invalid for {key}"))),
        }
    }
}

fn pick<T>(cli: Option<T>, file: Option<T>, default: T) -> T {
    cli.or(file).unwrap_or(default)
}

fn require<T>(cli: Option<T>, file: Option<T>, what: &str) -> Result<T> {
    cli.or(file)
        .ok_or_else(|| Error::Usage(format!("missing required --{what}")))
}

fn resolve_seed(cli: Option<u64>, file: &FileConfig) -> Result<u64> {
    if let Some(s) = cli {
        return Ok(s);
    }
    if let Some(s) = file.get::<u64>("seed")? {
        return Ok(s);
    }
    if let Ok(v) = std::env::var(SEED_ENV) {
        return v
            .parse()
            .map_err(|_| Error::Usage(format!("{SEED_ENV}={v:?} is not a valid seed")));
    }
    Err(Error::Usage(format!(
        "a seed is required: pass --seed, set seed= in the config, or export {SEED_ENV}"
    )))
}

fn parse_levels(spec: &str) -> Result<[bool; 4]> {
    let mut on = [false; 4];
    for part in spec.split(',') {
        let level: usize = part
            .trim()
            .parse()
            .map_err(|_| Error::Usage(format!("bad level {part:?} in --levels")))?;
        if !(1..=4).contains(&level) {
            return Err(Error::Usage(format!("level {level} out of range 1..4")));
        }
        on[level - 1] = true;
    }
    Ok(on)
}

fn parse_real_parent(spec: &str) -> Result<RealParentMode> {
    match spec {
        "zero" => Ok(RealParentMode::Zero),
        "one" => Ok(RealParentMode::One),
        other => Err(Error::Usage(format!("--real-parent must be zero or one, got {other:?}"))),
    }
}

fn load_taxonomy(dataset_dir: &Path) -> Result<TaxonomyTree> {
    let path = synth::taxonomy_path(dataset_dir);
    let text = fs::read_to_string(&path)
        .map_err(|e| Error::Data(format!("cannot read {}: {e}", path.display())))?;
    TaxonomyTree::parse(&text)
}

fn load_split_samples(
    dataset_dir: &Path,
    manifest: &DatasetManifest,
    split: &str,
    tree: &TaxonomyTree,
) -> Result<Vec<TrainSample>> {
    let records: Vec<_> = manifest.split(split).collect();
    records
        .iter()
        .map(|r| {
            let image = synth::read_ppm(&dataset_dir.join(&r.path))?;
            let mask = synth::mask_from_map(&synth::read_pgm(&dataset_dir.join(&r.mask_path))?);
            Ok(TrainSample {
                image,
                mask,
                leaf: tree.leaf_index(&r.leaf)?,
            })
        })
        .collect()
}

fn default_threads() -> usize {
    std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)
}

// ---------------------------------------------------------------------------
// Commands
// ---------------------------------------------------------------------------

fn cmd_generate(args: GenerateArgs) -> Result<()> {
    let file = FileConfig::load(args.common.config.as_deref())?;
    let seed = resolve_seed(args.common.seed, &file)?;
    let out = require(args.out, file.get::<PathBuf>("out")?, "out")?;
    let cfg = DatasetConfig {
        height: pick(args.height, file.get("height")?, 32),
        width: pick(args.width, file.get("width")?, 32),
        per_forgery_leaf: pick(args.per_leaf, file.get("per_leaf")?, 400),
        real_count: pick(args.real_count, file.get("real_count")?, 2400),
        ..DatasetConfig::default()
    };
    let tree = match args.taxonomy.or(file.get::<PathBuf>("taxonomy")?) {
        Some(path) => {
            let text = fs::read_to_string(&path)
                .map_err(|e| Error::Usage(format!("cannot read taxonomy {}: {e}", path.display())))?;
            TaxonomyTree::parse(&text)?
        }
        None => TaxonomyTree::parse(&crate::taxonomy::mini_taxonomy_config())?,
    };
    let manifest = synth::build_dataset(&cfg, &tree, seed, &out)?;
    println!(
        "generated {} records ({}x{}) under {}",
        manifest.records.len(),
        cfg.height,
        cfg.width,
        out.display()
    );
    Ok(())
}

fn train_config_from(args: &TrainArgs, file: &FileConfig, seed: u64) -> Result<(TrainConfig, LossWeights, String)> {
    let preset = pick(args.preset.clone(), file.get("preset")?, "desk".to_string());
    let cfg = TrainConfig {
        base_lr: pick(args.base_lr, file.get("base_lr")?, 1e-4),
        loc_lr: pick(args.loc_lr, file.get("loc_lr")?, 3e-4),
        momentum: pick(args.momentum, file.get("momentum")?, 0.9),
        epochs: pick(args.epochs, file.get("epochs")?, 13),
        batch_real: pick(args.batch_real, file.get("batch_real")?, 8),
        batch_forged: pick(args.batch_forged, file.get("batch_forged")?, 8),
        patience: pick(args.patience, file.get("patience")?, 2),
        lr_decay: pick(None, file.get("lr_decay")?, 0.5),
        margin_factor: pick(args.margin_factor, file.get("margin_factor")?, 2.5),
        seed,
        overlay: if args.teacher_forcing || file.get("teacher_forcing")?.unwrap_or(false) {
            OverlayMode::Teacher
        } else {
            OverlayMode::Predicted
        },
        threads: pick(args.threads, file.get("threads")?, default_threads()),
    };
    let hierarchy_on = if args.no_hierarchy {
        false
    } else {
        file.get("hierarchy_on")?.unwrap_or(true)
    };
    let loc_on = if args.no_loc_loss {
        false
    } else {
        file.get("loc_on")?.unwrap_or(true)
    };
    let levels_on = match args.levels.as_deref().map(String::from).or(file.get("levels")?) {
        Some(spec) => parse_levels(&spec)?,
        None => [true; 4],
    };
    let real_parent = match args.real_parent.clone().or(file.get("real_parent")?) {
        Some(spec) => parse_real_parent(&spec)?,
        None => RealParentMode::Zero,
    };
    let weights = LossWeights {
        lambda_loc: pick(args.lambda_loc, file.get("lambda_loc")?, 100.0),
        w4: pick(args.w4, file.get("w4")?, 100.0),
        hierarchy_on,
        levels_on,
        loc_on,
        main_paper_form: args.main_paper_form || file.get("main_paper_form")?.unwrap_or(false),
        real_parent,
    };
    Ok((cfg, weights, preset))
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let file = FileConfig::load(args.common.config.as_deref())?;
    let seed = resolve_seed(args.common.seed, &file)?;
    let dataset = require(args.dataset.clone(), file.get::<PathBuf>("dataset")?, "dataset")?;
    let out = require(args.out.clone(), file.get::<PathBuf>("out")?, "out")?;
    let no_pconv = args.no_pconv || file.get("no_pconv")?.unwrap_or(false);
    let (cfg, weights, preset) = train_config_from(&args, &file, seed)?;

    let tree = load_taxonomy(&dataset)?;
    let manifest = DatasetManifest::load(&synth::manifest_path(&dataset))?;
    manifest.validate(&dataset, &tree)?;
    let train = load_split_samples(&dataset, &manifest, "train", &tree)?;
    let val = load_split_samples(&dataset, &manifest, "val", &tree)?;

    let mut arch = ArchConfig::preset(&preset)?;
    if no_pconv {
        arch.pconv_on = false;
    }
    if let Some(sample) = train.first() {
        if sample.image.shape()[1] != arch.input_res {
            return Err(Error::Data(format!(
                "dataset images are {}px but preset {preset} expects {}px",
                sample.image.shape()[1],
                arch.input_res
            )));
        }
    }
    let mut model = network::init_model(arch, tree, weights, seed)?;
    fs::create_dir_all(&out)?;
    let outcome = network::train_loop(&mut model, &train, &val, &cfg, Some(&out))?;
    if let Some(last) = outcome.history.last() {
        println!(
            "trained {} epochs: train loss {:.4}, val loss {:.4}, val det-auc {:.4}, val l4-acc {:.4}",
            outcome.history.len(),
            last.train_loss,
            last.val_loss,
            last.val_det_auc,
            last.val_l4_acc
        );
    } else {
        // Zero epochs still calibrates and writes the checkpoint.
        network::save_checkpoint(&model, &out.join("checkpoint.hfck"))?;
        fs::write(out.join("history.csv"), network::history_csv(&[]))?;
        fs::write(out.join("steps.csv"), network::steps_csv(&[]))?;
        println!("calibrated initial model written (0 epochs)");
    }
    println!("checkpoint: {}", out.join("checkpoint.hfck").display());
    Ok(())
}

fn parse_pooling(spec: &str) -> Result<LocPooling> {
    match spec {
        "per-image" => Ok(LocPooling::PerImage),
        "global" => Ok(LocPooling::Global),
        other => Err(Error::Usage(format!(
            "--pooling must be per-image or global, got {other:?}"
        ))),
    }
}

/// Runs the model over samples and assembles evaluation items.
pub fn collect_eval_items(
    model: &ModelState,
    samples: &[TrainSample],
    threads: usize,
) -> Result<Vec<EvalItem>> {
    let real = model.tree.real_index();
    let run_one = |s: &TrainSample| -> Result<EvalItem> {
        let pred = network::predict(model, &s.image)?;
        Ok(EvalItem {
            detection_score: pred.detection_score,
            pred_forged: pred.is_forged,
            gt_forged: s.leaf != real,
            pred_leaf: pred.leaf,
            gt_leaf: s.leaf,
            mask_scores: pred.mask_scores,
            pred_mask: pred.binary_mask,
            gt_mask: s.mask.clone(),
        })
    };
    if threads > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
        pool.install(|| samples.par_iter().map(run_one).collect())
    } else {
        samples.iter().map(run_one).collect()
    }
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let file = FileConfig::load(args.common.config.as_deref())?;
    let checkpoint = require(args.checkpoint, file.get::<PathBuf>("checkpoint")?, "checkpoint")?;
    let dataset = require(args.dataset, file.get::<PathBuf>("dataset")?, "dataset")?;
    let split = pick(args.split, file.get("split")?, "test".to_string());
    if !synth::SPLITS.contains(&split.as_str()) {
        return Err(Error::Usage(format!("unknown split {split:?}")));
    }
    let pooling = match args.pooling.or(file.get("pooling")?) {
        Some(spec) => parse_pooling(&spec)?,
        None => LocPooling::PerImage,
    };
    let postprocess = match args.postprocess.or(file.get("postprocess")?) {
        Some(spec) => Some(Postprocess::parse(&spec)?),
        None => None,
    };
    let threads = pick(args.threads, file.get("threads")?, default_threads());

    let model = network::load_checkpoint(&checkpoint)?;
    let tree = load_taxonomy(&dataset)?;
    if tree.digest() != model.tree.digest() {
        return Err(Error::DigestMismatch {
            what: "taxonomy",
            expected: model.tree.digest(),
            actual: tree.digest(),
        });
    }
    let manifest = DatasetManifest::load(&synth::manifest_path(&dataset))?;
    manifest.validate(&dataset, &tree)?;
    let mut samples = load_split_samples(&dataset, &manifest, &split, &tree)?;
    if let Some(t) = postprocess {
        let records: Vec<_> = manifest.split(&split).collect();
        for (sample, record) in samples.iter_mut().zip(records) {
            let as_sample = synth::Sample {
                image: sample.image.clone(),
                mask: sample.mask.clone(),
                leaf: tree.leaf_name(sample.leaf).to_string(),
                seed: record.seed,
                provenance: String::new(),
            };
            let post = synth::apply_postprocess(&as_sample, t, synth::seed_for(record.seed, 0x9057))?;
            sample.image = post.image;
        }
    }

    let items = collect_eval_items(&model, &samples, threads)?;
    let report = metrics::evaluate(&items, pooling, &tree)?;
    print!("{}", report.table());
    if let Some(out) = args.out.or(file.get::<PathBuf>("out")?) {
        fs::create_dir_all(&out)?;
        fs::write(out.join("report.json"), report.to_json())?;
        fs::write(out.join("report.txt"), report.table())?;
        fs::write(out.join("confusion.csv"), report.confusion_csv(&tree))?;
        println!("reports written under {}", out.display());
    }
    Ok(())
}

fn cmd_infer(args: InferArgs) -> Result<()> {
    let file = FileConfig::load(args.common.config.as_deref())?;
    let checkpoint = require(args.checkpoint, file.get::<PathBuf>("checkpoint")?, "checkpoint")?;
    let model = network::load_checkpoint(&checkpoint)?;
    let image = synth::read_ppm(&args.image)?;
    let pred = network::predict(&model, &image)?;

    let path_names: Vec<Option<String>> = (1..=4)
        .map(|level| {
            pred.path.per_level[level - 1]
                .map(|i| model.tree.level_names(level)[i].clone())
        })
        .collect();
    let out = serde_json::json!({
        "is_forged": pred.is_forged,
        "detection_score": pred.detection_score,
        "leaf": model.tree.leaf_name(pred.leaf),
        "path": path_names,
        "level_probs": pred.level_probs,
    });
    println!("{}", serde_json::to_string_pretty(&out).expect("json"));

    let mask_path = args
        .mask_out
        .unwrap_or_else(|| PathBuf::from(format!("{}.mask.pgm", args.image.display())));
    synth::write_pgm(&mask_path, &pred.binary_mask)?;
    Ok(())
}

fn cmd_gradcheck(args: GradcheckArgs) -> Result<()> {
    let file = FileConfig::load(args.common.config.as_deref())?;
    let seeds = pick(args.seeds, file.get("seeds")?, crate::verify::DEFAULT_SEEDS);
    let tol = pick(args.tol, file.get("tol")?, crate::verify::DEFAULT_TOL);
    let e2e_tol = pick(args.e2e_tol, file.get("e2e_tol")?, crate::verify::DEFAULT_E2E_TOL);
    let mut report = crate::verify::run_suite(seeds, tol, e2e_tol)?;
    if args.inject_fault {
        let mut params = crate::tensor::ParamSet::new();
        params.insert("x", Tensor::from_vec(vec![0.5, -0.25]))?;
        let flipped = crate::gradcheck::check(
            "injected_sign_flip",
            &params,
            |p| Ok(p.get("x")?.data().iter().map(|v| v * v).sum()),
            |p| Ok(vec![("x".into(), p.get("x")?.data().iter().map(|v| -2.0 * v).collect())]),
            crate::gradcheck::DEFAULT_EPS,
            tol,
        )?;
        report.pass &= flipped.pass;
        report.checks.push(flipped);
    }
    print!("{}", report.lines());
    if report.pass {
        println!("gradcheck: all {} checks passed", report.checks.len());
        Ok(())
    } else {
        let failing: Vec<&str> = report
            .checks
            .iter()
            .filter(|c| !c.pass)
            .map(|c| c.name.as_str())
            .collect();
        Err(Error::Numeric(format!(
            "gradient checks failed: {}",
            failing.join(", ")
        )))
    }
}

/// Parses and runs; returns the process exit code.
pub fn run_from<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            // clap uses exit code 2 for usage errors and 0 for --help.
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let result = match cli.command {
        Command::Generate(a) => cmd_generate(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Infer(a) => cmd_infer(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn levels_parse() {
        assert_eq!(parse_levels("4").unwrap(), [false, false, false, true]);
        assert_eq!(parse_levels("1,2,3,4").unwrap(), [true; 4]);
        assert!(parse_levels("5").is_err());
        assert!(parse_levels("x").is_err());
    }

    #[test]
    fn help_exits_zero_everywhere() {
        for cmd in ["generate", "train", "eval", "infer", "gradcheck"] {
            assert_eq!(run_from(["hifi", cmd, "--help"]), 0);
        }
        assert_eq!(run_from(["hifi", "--help"]), 0);
    }

    #[test]
    fn missing_seed_is_a_usage_error() {
        let dir = tempfile::tempdir().unwrap();
        std::env::remove_var(SEED_ENV);
        let out = dir.path().join("d");
        assert_eq!(
            run_from(["hifi", "generate", "--out", out.to_str().unwrap()]),
            2
        );
    }

    #[test]
    fn unknown_subcommand_is_usage() {
        assert_eq!(run_from(["hifi", "frobnicate"]), 2);
    }
}
