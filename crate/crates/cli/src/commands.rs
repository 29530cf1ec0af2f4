//! Subcommand wiring. Every command resolves one [`ExperimentConfig`] from
//! defaults, an optional config file, an optional preset, explicit flags,
//! and finally the `INN_SEED` environment variable, then drives the core
//! library. All file emission is atomic.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use innlab_core::checkpoint::{arch_string, atomic_write};
use innlab_core::dataset::{synthetic_glyphs, two_blobs};
use innlab_core::gradcheck::standard_battery;
use innlab_core::interference::Background;
use innlab_core::model::{clean_accuracy, SnapshotMeta};
use innlab_core::rng::split;
use innlab_core::{
    attack_dataset, finetune_inn, generate_backgrounds, load_checkpoint, pretrain,
    robustness_curve, save_checkpoint, transfer_expand, AdversarialSet, AttackConfig,
    Checkpoint, CheckpointMeta, CurveMode, DatasetHandle, Error, EvalInputs,
    InterferenceConfig, Result, SmallConvNet, SnapshotSet, TrainConfig, TrainReport,
};

use crate::cifar::read_cifar_binary;
use crate::config::{parse_epsilon, DatasetFormat, ExperimentConfig, PRESETS};
use crate::idx::read_idx;

/// Worst relative error any battery case may report.
pub const GRADCHECK_TOLERANCE: f64 = 1e-2;

// Seed lanes, split off the master seed so every phase draws an unrelated
// stream.
const LANE_PRETRAIN: u64 = 1;
const LANE_FINETUNE: u64 = 2;
const LANE_ATTACK: u64 = 3;
const LANE_EVAL: u64 = 4;
const LANE_SUBSET: u64 = 5;
const LANE_BACKGROUNDS: u64 = 6;

#[derive(Parser)]
#[command(name = "innlab", version, about = "Interference-network robustness laboratory")]
pub struct Cli {
    /// Worker thread cap; results do not depend on it.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand)]
pub enum Command {
    /// Clean-train the backbone and write snapshots/pretrain.innc.
    Pretrain(ConfigArgs),
    /// Transfer-expand the backbone and fine-tune over interference,
    /// writing snapshots/epoch{1..E}.innc.
    Finetune(ConfigArgs),
    /// Attack the evaluation subset against a fine-tuning snapshot and
    /// write the adversarial set under adv/.
    Attack(ConfigArgs),
    /// Evaluate the defended ensemble (or the undefended backbone) on clean
    /// or adversarial inputs, writing a log under logs/.
    Eval(EvalArgs),
    /// Full pipeline pretrain, transfer, fine-tune, attack, evaluate;
    /// writes curves/robustness.csv.
    Curve(ConfigArgs),
    /// Render the deterministic background set to backgrounds.innc.
    GenBackgrounds(ConfigArgs),
    /// Finite-difference check of every autodiff op and the full network
    /// loss across seeds.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
pub struct ConfigArgs {
    /// Config file of `key = value` lines to start from.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Operating point for (alpha, beta, gamma, K).
    #[arg(long, value_parser = preset_names())]
    pub preset: Option<String>,
    /// Dataset path, or a synthetic spec like glyphs:train=2048,test=512,size=12.
    #[arg(long)]
    pub dataset: Option<String>,
    #[arg(long, value_parser = ["synthetic", "idx", "cifar"])]
    pub format: Option<String>,
    /// Master seed; the INN_SEED environment variable wins over this.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory for snapshots, adversarial sets, curves, and logs.
    #[arg(long)]
    pub out: Option<String>,
    #[arg(long)]
    pub alpha: Option<f32>,
    #[arg(long)]
    pub beta: Option<f32>,
    #[arg(long)]
    pub gamma: Option<f32>,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub pretrain_epochs: Option<usize>,
    #[arg(long)]
    pub finetune_epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f32>,
    #[arg(long)]
    pub momentum: Option<f32>,
    #[arg(long)]
    pub weight_decay: Option<f32>,
    #[arg(long)]
    pub jitter_std: Option<f32>,
    /// Attack radius: `k/255`, a decimal, or a bare integer in /255 units.
    #[arg(long, value_parser = eps_arg)]
    pub eps: Option<f64>,
    #[arg(long)]
    pub iterations: Option<usize>,
    #[arg(long, value_parser = ["inn1", "inn2"])]
    pub mode: Option<String>,
    /// Fine-tuning snapshot index the attacker targets.
    #[arg(long)]
    pub snapshot: Option<usize>,
    /// Size of the seeded evaluation subset.
    #[arg(long)]
    pub eval_count: Option<usize>,
    /// Comma-separated epsilon grid for curves.
    #[arg(long)]
    pub eps_grid: Option<String>,
}

#[derive(Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: ConfigArgs,
    /// Adversarial set to evaluate instead of clean inputs.
    #[arg(long)]
    pub adv: Option<PathBuf>,
    /// Evaluate the raw pretrained backbone instead of the defense.
    #[arg(long)]
    pub undefended: bool,
}

#[derive(Args)]
pub struct GradcheckArgs {
    /// Seeds to sweep.
    #[arg(long, default_value_t = 20)]
    pub seeds: u64,
}

fn preset_names() -> Vec<&'static str> {
    PRESETS.iter().map(|(n, _)| *n).collect()
}

fn eps_arg(s: &str) -> std::result::Result<f64, String> {
    parse_epsilon(s).map_err(|e| e.to_string())
}

impl ConfigArgs {
    /// Defaults, then file, then preset, then flags, then INN_SEED.
    /// Interference flags clear the preset name: the rendered config never
    /// claims a preset it no longer matches.
    pub fn resolve(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(path) => {
                let text = std::fs::read_to_string(path)
                    .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
                ExperimentConfig::parse(&text)?
            }
            None => ExperimentConfig::default(),
        };
        if let Some(name) = &self.preset {
            cfg.apply_preset(name)?;
        }
        if let Some(v) = &self.dataset {
            cfg.dataset = v.clone();
        }
        if let Some(v) = &self.format {
            cfg.format = DatasetFormat::from_tag(v)?;
        }
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = &self.out {
            cfg.out = v.clone();
        }
        for (flag, field) in [
            (self.alpha, &mut cfg.alpha),
            (self.beta, &mut cfg.beta),
            (self.gamma, &mut cfg.gamma),
        ] {
            if let Some(v) = flag {
                *field = v;
                cfg.preset = None;
            }
        }
        if let Some(v) = self.k {
            cfg.k = v;
            cfg.preset = None;
        }
        if let Some(v) = self.pretrain_epochs {
            cfg.pretrain_epochs = v;
        }
        if let Some(v) = self.finetune_epochs {
            cfg.finetune_epochs = v;
        }
        if let Some(v) = self.batch_size {
            cfg.batch_size = v;
        }
        if let Some(v) = self.learning_rate {
            cfg.learning_rate = v;
        }
        if let Some(v) = self.momentum {
            cfg.momentum = v;
        }
        if let Some(v) = self.weight_decay {
            cfg.weight_decay = v;
        }
        if let Some(v) = self.jitter_std {
            cfg.jitter_std = v;
        }
        if let Some(v) = self.eps {
            cfg.attack_epsilon = v;
        }
        if let Some(v) = self.iterations {
            cfg.attack_iterations = v;
        }
        if let Some(v) = &self.mode {
            cfg.attack_mode = crate::config::parse_attack_mode(v)?;
        }
        if let Some(v) = self.snapshot {
            cfg.attack_snapshot = v;
        }
        if let Some(v) = self.eval_count {
            cfg.eval_count = v;
        }
        if let Some(v) = &self.eps_grid {
            cfg.eps_grid = crate::config::parse_eps_grid(v)?;
        }
        if let Ok(env_seed) = std::env::var("INN_SEED") {
            cfg.seed = env_seed
                .parse()
                .map_err(|_| Error::Config(format!("INN_SEED `{env_seed}` is not a u64")))?;
        }
        Ok(cfg)
    }
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Pretrain(args) => cmd_pretrain(&args.resolve()?),
        Command::Finetune(args) => cmd_finetune(&args.resolve()?),
        Command::Attack(args) => cmd_attack(&args.resolve()?),
        Command::Eval(args) => cmd_eval(&args.common.resolve()?, args.adv.as_deref(), args.undefended),
        Command::Curve(args) => cmd_curve(&args.resolve()?),
        Command::GenBackgrounds(args) => cmd_gen_backgrounds(&args.resolve()?),
        Command::Gradcheck(args) => cmd_gradcheck(args.seeds),
    }
}

/// Seed for synthetic data: a fold of the dataset spec only, so the same
/// spec names the same dataset under every master seed.
fn dataset_seed(spec: &str) -> u64 {
    spec.bytes().fold(0x6461_7461, |s, b| split(s, u64::from(b)))
}

fn parse_synthetic_spec(spec: &str) -> Result<(String, usize, usize, usize)> {
    let (kind, rest) = spec
        .split_once(':')
        .ok_or_else(|| Error::Config(format!("synthetic spec `{spec}` has no `kind:`")))?;
    if kind != "glyphs" && kind != "blobs" {
        return Err(Error::Config(format!("unknown synthetic dataset `{kind}`")));
    }
    let (mut train, mut test, mut size) = (2048usize, 512usize, 12usize);
    for part in rest.split(',').filter(|p| !p.is_empty()) {
        let (key, value) = part
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("synthetic spec part `{part}` has no `=`")))?;
        let v: usize = value
            .parse()
            .map_err(|_| Error::Config(format!("synthetic spec `{key}={value}` is not an integer")))?;
        match key {
            "train" => train = v,
            "test" => test = v,
            "size" => size = v,
            other => {
                return Err(Error::Config(format!("unknown synthetic spec key `{other}`")))
            }
        }
    }
    Ok((kind.to_string(), train, test, size))
}

fn first_existing(dir: &Path, candidates: &[&str]) -> Option<PathBuf> {
    candidates.iter().map(|c| dir.join(c)).find(|p| p.exists())
}

/// Loads the configured dataset's train or test split.
pub fn load_split(cfg: &ExperimentConfig, split_tag: &str) -> Result<DatasetHandle> {
    match cfg.format {
        DatasetFormat::Synthetic => {
            let (kind, train, test, size) = parse_synthetic_spec(&cfg.dataset)?;
            let count = if split_tag == "train" { train } else { test };
            let seed = dataset_seed(&cfg.dataset);
            match kind.as_str() {
                "glyphs" => synthetic_glyphs(count, size, split_tag, seed),
                _ => two_blobs(count, size, split_tag, seed),
            }
        }
        DatasetFormat::Idx => {
            let dir = Path::new(&cfg.dataset);
            let (image_names, label_names): (&[&str], &[&str]) = if split_tag == "train" {
                (
                    &["train-images-idx3-ubyte", "train-images.idx3-ubyte"],
                    &["train-labels-idx1-ubyte", "train-labels.idx1-ubyte"],
                )
            } else {
                (
                    &["t10k-images-idx3-ubyte", "t10k-images.idx3-ubyte", "test-images-idx3-ubyte"],
                    &["t10k-labels-idx1-ubyte", "t10k-labels.idx1-ubyte", "test-labels-idx1-ubyte"],
                )
            };
            let images = first_existing(dir, image_names).ok_or_else(|| {
                Error::Config(format!("no {split_tag} images file in {}", dir.display()))
            })?;
            let labels = first_existing(dir, label_names).ok_or_else(|| {
                Error::Config(format!("no {split_tag} labels file in {}", dir.display()))
            })?;
            read_idx(&images, &labels, split_tag)
        }
        DatasetFormat::Cifar => {
            let dir = Path::new(&cfg.dataset);
            let paths: Vec<PathBuf> = if split_tag == "train" {
                (1..=5).map(|i| dir.join(format!("data_batch_{i}.bin"))).filter(|p| p.exists()).collect()
            } else {
                vec![dir.join("test_batch.bin")].into_iter().filter(|p| p.exists()).collect()
            };
            if paths.is_empty() {
                return Err(Error::Config(format!(
                    "no {split_tag} CIFAR batches in {}",
                    dir.display()
                )));
            }
            read_cifar_binary(&paths, split_tag)
        }
    }
}

fn out_path(cfg: &ExperimentConfig, rel: &str) -> PathBuf {
    Path::new(&cfg.out).join(rel)
}

fn backgrounds_for(icfg: &InterferenceConfig, shape: &[usize]) -> Result<Vec<Background>> {
    generate_backgrounds(
        icfg.k,
        shape[0],
        shape[1],
        shape[2],
        split(icfg.master_seed, LANE_BACKGROUNDS),
    )
}

fn eval_subset(cfg: &ExperimentConfig, test: &DatasetHandle) -> Result<DatasetHandle> {
    let count = cfg.eval_count.min(test.len());
    test.subset_seeded(count, split(cfg.seed, LANE_SUBSET))
}

fn print_report(phase: &str, report: &TrainReport) {
    println!("{phase}: initial mean loss {:.4}", report.initial_loss);
    for (i, loss) in report.epoch_mean_losses.iter().enumerate() {
        println!("{phase}: epoch {} mean loss {loss:.4}", i + 1);
    }
}

fn pretrain_meta(cfg: &ExperimentConfig, n: usize, shape: &[usize]) -> CheckpointMeta {
    CheckpointMeta {
        arch: arch_string([shape[0], shape[1], shape[2]]),
        n,
        k: 1,
        alpha: 0.0,
        beta: 0.0,
        gamma: 0.0,
        seed: cfg.seed,
        epoch: cfg.pretrain_epochs,
    }
}

fn write_model(path: &Path, model: &SmallConvNet, meta: CheckpointMeta) -> Result<()> {
    save_checkpoint(path, &Checkpoint::from_model(model, meta))?;
    println!("wrote {}", path.display());
    Ok(())
}

fn load_pretrained(cfg: &ExperimentConfig) -> Result<SmallConvNet> {
    let path = out_path(cfg, "snapshots/pretrain.innc");
    if !path.exists() {
        return Err(Error::Config(format!(
            "{} is missing; run pretrain first",
            path.display()
        )));
    }
    load_checkpoint(&path)?.to_model()
}

/// Rebuilds the snapshot set from snapshots/epoch{i}.innc. The interference
/// configuration is recovered from checkpoint metadata; training
/// hyperparameters are not stored in checkpoints and are filled with
/// defaults, which nothing downstream reads.
fn load_snapshots(cfg: &ExperimentConfig) -> Result<SnapshotSet> {
    let dir = out_path(cfg, "snapshots");
    let mut found: Vec<(usize, Checkpoint)> = Vec::new();
    let entries = std::fs::read_dir(&dir)
        .map_err(|e| Error::Config(format!("{}: {e}; run finetune first", dir.display())))?;
    for entry in entries {
        let path = entry?.path();
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("");
        if name.starts_with("epoch") && name.ends_with(".innc") {
            let ckpt = load_checkpoint(&path)?;
            found.push((ckpt.meta.epoch, ckpt));
        }
    }
    if found.is_empty() {
        return Err(Error::Config(format!(
            "no epoch*.innc snapshots in {}; run finetune first",
            dir.display()
        )));
    }
    found.sort_by_key(|(epoch, _)| *epoch);
    if found.windows(2).any(|w| w[0].0 == w[1].0) {
        return Err(Error::Config("duplicate snapshot epochs".into()));
    }
    let head = &found[0].1.meta;
    let icfg = InterferenceConfig::new(head.alpha, head.beta, head.gamma, head.k, head.seed)?;
    let first_model = found[0].1.to_model()?;
    let meta = SnapshotMeta {
        n: head.n,
        k: head.k,
        icfg,
        tcfg: TrainConfig::desk(found.len(), head.seed),
        dataset_id: cfg.dataset.clone(),
        input_shape: first_model.input_shape,
    };
    let mut snapshots = Vec::with_capacity(found.len());
    for (_, ckpt) in &found {
        if ckpt.meta.n != head.n
            || ckpt.meta.k != head.k
            || ckpt.meta.alpha != head.alpha
            || ckpt.meta.beta != head.beta
            || ckpt.meta.gamma != head.gamma
            || ckpt.meta.seed != head.seed
        {
            return Err(Error::Config("snapshot metadata disagrees across epochs".into()));
        }
        snapshots.push(ckpt.to_model()?.params);
    }
    Ok(SnapshotSet { snapshots, meta })
}

fn adv_file_name(epsilon: f64, mode_tag: &str) -> String {
    format!("eps{epsilon:.6}_{mode_tag}.inna")
}

fn cmd_pretrain(cfg: &ExperimentConfig) -> Result<()> {
    let train = load_split(cfg, "train")?;
    let test = load_split(cfg, "test")?;
    let tcfg = cfg.train_config(cfg.pretrain_epochs, split(cfg.seed, LANE_PRETRAIN))?;
    let (model, report) = pretrain(&train, &tcfg, train.n_classes)?;
    print_report("pretrain", &report);
    let acc = clean_accuracy(&model, &test)?;
    println!("pretrain: clean accuracy {acc:.4} on {} test images", test.len());
    let shape = train.image_shape()?;
    write_model(
        &out_path(cfg, "snapshots/pretrain.innc"),
        &model,
        pretrain_meta(cfg, train.n_classes, shape),
    )
}

fn cmd_finetune(cfg: &ExperimentConfig) -> Result<()> {
    let train = load_split(cfg, "train")?;
    let pretrained = load_pretrained(cfg)?;
    let icfg = cfg.interference()?;
    let shape = train.image_shape()?;
    let backgrounds = backgrounds_for(&icfg, shape)?;
    let expanded = transfer_expand(&pretrained, train.n_classes, icfg.k, cfg.jitter_std, cfg.seed)?;
    let tcfg = cfg.train_config(cfg.finetune_epochs, split(cfg.seed, LANE_FINETUNE))?;
    let (snapshots, report) = finetune_inn(expanded, &train, &icfg, &tcfg, &backgrounds)?;
    print_report("finetune", &report);
    write_snapshots(cfg, &snapshots)
}

fn write_snapshots(cfg: &ExperimentConfig, snapshots: &SnapshotSet) -> Result<()> {
    let meta = &snapshots.meta;
    for index in 0..snapshots.len() {
        let model = snapshots.model_for(index)?;
        let ckpt_meta = CheckpointMeta {
            arch: arch_string(meta.input_shape),
            n: meta.n,
            k: meta.k,
            alpha: meta.icfg.alpha,
            beta: meta.icfg.beta,
            gamma: meta.icfg.gamma,
            seed: meta.icfg.master_seed,
            epoch: index + 1,
        };
        write_model(
            &out_path(cfg, &format!("snapshots/epoch{}.innc", index + 1)),
            &model,
            ckpt_meta,
        )?;
    }
    Ok(())
}

fn cmd_attack(cfg: &ExperimentConfig) -> Result<()> {
    let snapshots = load_snapshots(cfg)?;
    let icfg = snapshots.meta.icfg.clone();
    let test = load_split(cfg, "test")?;
    let subset = eval_subset(cfg, &test)?;
    let shape = subset.image_shape()?;
    let backgrounds = backgrounds_for(&icfg, shape)?;
    let mut acfg = AttackConfig::new(
        cfg.attack_epsilon,
        cfg.attack_iterations,
        cfg.attack_mode,
        split(cfg.seed, LANE_ATTACK),
    )?;
    acfg.attack_snapshot_index = cfg.attack_snapshot;
    let target = snapshots.model_for(cfg.attack_snapshot)?;
    let examples = attack_dataset(&subset, &target, &acfg, &icfg, &backgrounds)?;
    let set = AdversarialSet::from_examples(&acfg, &examples)?;
    let path = out_path(cfg, &format!("adv/{}", adv_file_name(acfg.epsilon, acfg.mode.tag())));
    set.save(&path)?;
    println!(
        "wrote {} ({} examples, eps {:.6}, {} iterations)",
        path.display(),
        examples.len(),
        acfg.epsilon,
        acfg.iterations
    );
    Ok(())
}

fn cmd_eval(cfg: &ExperimentConfig, adv: Option<&Path>, undefended: bool) -> Result<()> {
    let test = load_split(cfg, "test")?;
    let subset = eval_subset(cfg, &test)?;
    let loaded;
    let inputs = match adv {
        Some(path) => {
            loaded = AdversarialSet::load(path)?;
            EvalInputs::Adversarial(&loaded, &subset)
        }
        None => EvalInputs::Clean(&subset),
    };
    let result = if undefended {
        let model = load_pretrained(cfg)?;
        innlab_core::evaluate_undefended(&model, &inputs)?
    } else {
        let snapshots = load_snapshots(cfg)?;
        let icfg = snapshots.meta.icfg.clone();
        let backgrounds = backgrounds_for(&icfg, subset.image_shape()?)?;
        innlab_core::evaluate(&inputs, &snapshots, &icfg, &backgrounds, split(cfg.seed, LANE_EVAL))?
    };
    let stem = match adv {
        Some(path) => path.file_stem().and_then(|s| s.to_str()).unwrap_or("adv").to_string(),
        None => "clean".to_string(),
    };
    let log_name = if undefended {
        format!("logs/eval_{stem}_undefended.txt")
    } else {
        format!("logs/eval_{stem}.txt")
    };
    let log_path = out_path(cfg, &log_name);
    atomic_write(&log_path, result.to_log().as_bytes())?;
    println!(
        "accuracy {:.4} on {} images; wrote {}",
        result.accuracy,
        result.records.len(),
        log_path.display()
    );
    Ok(())
}

fn cmd_curve(cfg: &ExperimentConfig) -> Result<()> {
    let train = load_split(cfg, "train")?;
    let test = load_split(cfg, "test")?;
    let subset = eval_subset(cfg, &test)?;
    let shape = train.image_shape()?;

    let tcfg = cfg.train_config(cfg.pretrain_epochs, split(cfg.seed, LANE_PRETRAIN))?;
    let (baseline, report) = pretrain(&train, &tcfg, train.n_classes)?;
    print_report("pretrain", &report);
    write_model(
        &out_path(cfg, "snapshots/pretrain.innc"),
        &baseline,
        pretrain_meta(cfg, train.n_classes, shape),
    )?;

    let icfg = cfg.interference()?;
    let backgrounds = backgrounds_for(&icfg, shape)?;
    let expanded = transfer_expand(&baseline, train.n_classes, icfg.k, cfg.jitter_std, cfg.seed)?;
    let ftcfg = cfg.train_config(cfg.finetune_epochs, split(cfg.seed, LANE_FINETUNE))?;
    let (snapshots, report) = finetune_inn(expanded, &train, &icfg, &ftcfg, &backgrounds)?;
    print_report("finetune", &report);
    write_snapshots(cfg, &snapshots)?;

    let mut template = AttackConfig::new(
        cfg.attack_epsilon,
        cfg.attack_iterations,
        cfg.attack_mode,
        split(cfg.seed, LANE_ATTACK),
    )?;
    template.attack_snapshot_index = cfg.attack_snapshot;
    let curve = robustness_curve(
        &cfg.eps_grid,
        &[CurveMode::Undefended, CurveMode::Inn1, CurveMode::Inn2],
        &snapshots,
        &icfg,
        &backgrounds,
        &template,
        Some(&baseline),
        &subset,
        split(cfg.seed, LANE_EVAL),
    )?;
    let csv = curve.to_csv();
    print!("{csv}");
    let path = out_path(cfg, "curves/robustness.csv");
    atomic_write(&path, csv.as_bytes())?;
    println!("wrote {}", path.display());
    Ok(())
}

fn cmd_gen_backgrounds(cfg: &ExperimentConfig) -> Result<()> {
    let test = load_split(cfg, "test")?;
    let shape = test.image_shape()?;
    let icfg = cfg.interference()?;
    let backgrounds = backgrounds_for(&icfg, shape)?;
    let tensors = backgrounds
        .iter()
        .map(|bg| (format!("bg{}_{}", bg.index, bg.generator_name), bg.pixels.clone()))
        .collect();
    let ckpt = Checkpoint {
        meta: CheckpointMeta {
            arch: format!("backgrounds-{}x{}x{}", shape[0], shape[1], shape[2]),
            n: 1,
            k: icfg.k,
            alpha: icfg.alpha,
            beta: icfg.beta,
            gamma: icfg.gamma,
            seed: icfg.master_seed,
            epoch: 0,
        },
        tensors,
    };
    let path = out_path(cfg, "backgrounds.innc");
    save_checkpoint(&path, &ckpt)?;
    for bg in &backgrounds {
        println!("background {}: {}", bg.index, bg.generator_name);
    }
    println!("wrote {}", path.display());
    Ok(())
}

fn cmd_gradcheck(seeds: u64) -> Result<()> {
    if seeds == 0 {
        return Err(Error::Config("gradcheck needs at least one seed".into()));
    }
    let mut worst: Vec<(&'static str, f64)> = Vec::new();
    for seed in 0..seeds {
        for case in standard_battery(seed)? {
            match worst.iter_mut().find(|(name, _)| *name == case.name) {
                Some((_, err)) => *err = err.max(case.error),
                None => worst.push((case.name, case.error)),
            }
        }
    }
    let mut failed = false;
    for (name, err) in &worst {
        let ok = *err < GRADCHECK_TOLERANCE;
        failed |= !ok;
        println!(
            "{name:24} max rel err {err:.3e}  {}",
            if ok { "ok" } else { "FAIL" }
        );
    }
    if failed {
        return Err(Error::Contract(format!(
            "gradient check exceeded {GRADCHECK_TOLERANCE:.0e} over {seeds} seeds"
        )));
    }
    println!("gradcheck: {} cases within {GRADCHECK_TOLERANCE:.0e} across {seeds} seeds", worst.len());
    Ok(())
}
