use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use fcnet::ablation::{run_ablation, write_ablation_csv, Study};
use fcnet::checkpoint;
use fcnet::configfile::{read_config, write_config};
use fcnet::dataset::{generate, Dataset};
use fcnet::driver::{run_training, TrainOptions};
use fcnet::pnm::Raster;
use fcnet::tables::{write_eval_csv, write_eval_json, write_matrix_csv, EvalJson};
use fcnet_core::checks::gradient_suite;
use fcnet_core::gradcheck::CheckOptions;
use fcnet_core::graph::Fault;
use fcnet_core::metrics::{iou, mask_bits, EvalReport};
use fcnet_core::model::FcNet;
use fcnet_core::train::Trainer;
use fcnet_core::{Config, Tensor};
use log::{info, warn};

/// Gradient checks pass at or below this relative error.
const GRADCHECK_TOLERANCE: f64 = 1e-4;

#[derive(Parser)]
#[command(name = "fcnet", version, about = "Referring segmentation on synthetic shapes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate train/val manifests (and optionally PPM/PGM files).
    GenData(GenDataArgs),
    /// Train a model and write checkpoints plus a metrics log.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a split.
    Eval(EvalArgs),
    /// Run the ablation grid over several seeds.
    Ablate(AblateArgs),
    /// Segment one image for one expression.
    Predict(PredictArgs),
    /// Finite-difference check of every module and the full model.
    Gradcheck(GradcheckArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    Toy,
    Desk,
    Full,
}

/// Settings shared by commands that build a model. Precedence, lowest
/// first: preset, config file, `--set`, dedicated flags.
#[derive(Args, Clone, Default)]
struct ConfigArgs {
    /// `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Starting preset; defaults to `toy` for gradcheck and `desk` otherwise.
    #[arg(long, value_enum)]
    preset: Option<Preset>,
    /// Override one key, e.g. `--set N_k=8` (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    n_k: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    train_size: Option<usize>,
    #[arg(long)]
    val_size: Option<usize>,
    /// Disable emphasis generation (single-guided fusion instead).
    #[arg(long)]
    no_egm: bool,
    /// Disable emphasis calibration.
    #[arg(long)]
    no_ecm: bool,
}

impl ConfigArgs {
    fn resolve(&self, preset: Config) -> Result<Config> {
        let base = match self.preset {
            Some(Preset::Toy) => Config::toy(),
            Some(Preset::Desk) => Config::desk(),
            Some(Preset::Full) => Config::full_scale(),
            None => preset,
        };
        let mut cfg = match &self.config {
            Some(p) => read_config(p, base)?,
            None => base,
        };
        for kv in &self.overrides {
            let (k, v) = kv
                .split_once('=')
                .with_context(|| format!("--set expects KEY=VALUE, got {kv:?}"))?;
            cfg.set(k.trim(), v.trim())?;
        }
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = self.epochs {
            cfg.epochs = v;
        }
        if let Some(v) = self.lr {
            cfg.lr = v;
        }
        if let Some(v) = self.n_k {
            cfg.n_k = v;
        }
        if let Some(v) = self.batch_size {
            cfg.batch_size = v;
        }
        if let Some(v) = self.train_size {
            cfg.train_size = v;
        }
        if let Some(v) = self.val_size {
            cfg.val_size = v;
        }
        if self.no_egm {
            cfg.use_egm = false;
        }
        if self.no_ecm {
            cfg.use_ecm = false;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, default_value_t = 4000)]
    train: usize,
    #[arg(long, default_value_t = 500)]
    val: usize,
    /// Canvas side in pixels (multiple of 32).
    #[arg(long, default_value_t = 64)]
    size: usize,
    /// Also write every image (PPM) and mask (PGM).
    #[arg(long)]
    images: bool,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Dataset directory from `gen-data`; generated from `data_seed` when absent.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Continue from a checkpoint (its config is used; config flags are ignored).
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Stop once validation IoU reaches this value.
    #[arg(long)]
    early_stop: Option<f64>,
    /// Log every n-th batch.
    #[arg(long, default_value_t = 0)]
    log_every: usize,
    /// Stop at the first epoch end after this many minutes.
    #[arg(long)]
    max_minutes: Option<f64>,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Val,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "val")]
    split: SplitArg,
    #[arg(long)]
    json: Option<PathBuf>,
    #[arg(long)]
    csv: Option<PathBuf>,
    /// Calibration scores, one row per sample.
    #[arg(long)]
    alphas_csv: Option<PathBuf>,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    #[arg(long)]
    data: Option<PathBuf>,
    /// Comma-separated training seeds (at least 3).
    #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
    seeds: Vec<u64>,
    /// Comma-separated studies: modules, nk_sweep, ecm_per_nk.
    #[arg(long, value_delimiter = ',', default_value = "modules,nk_sweep,ecm_per_nk")]
    studies: Vec<String>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// PPM (P6) input image.
    #[arg(long)]
    image: PathBuf,
    #[arg(long)]
    expression: String,
    /// PGM (P5) mask output, 255 = foreground.
    #[arg(long)]
    out: PathBuf,
    /// Emphasis-to-token attention, rows = emphasis, cols = tokens.
    #[arg(long)]
    attn_csv: Option<PathBuf>,
    /// Calibration scores, one row with N_k columns.
    #[arg(long)]
    alphas_csv: Option<PathBuf>,
    /// Ground-truth PGM mask; prints the IoU when given.
    #[arg(long)]
    gt: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum FaultArg {
    ReluLeak,
    BiasGrad,
}

#[derive(Args)]
struct GradcheckArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Corrupt one adjoint rule to confirm the checker notices.
    #[arg(long, value_enum)]
    inject_fault: Option<FaultArg>,
    /// Coordinates checked per tensor (evenly spaced); 0 checks all.
    #[arg(long, default_value_t = 64)]
    max_coords: usize,
}

fn load_data(data: Option<&Path>, cfg: &Config) -> Result<Dataset> {
    let ds = match data {
        Some(dir) => Dataset::load(dir).with_context(|| format!("loading dataset {}", dir.display()))?,
        None => {
            info!(
                "generating {} train / {} val samples from data_seed {}",
                cfg.train_size, cfg.val_size, cfg.data_seed
            );
            generate(cfg.data_seed, cfg.height, cfg.width, cfg.train_size, cfg.val_size)?
        }
    };
    if (ds.info.height, ds.info.width) != (cfg.height, cfg.width) {
        bail!(
            "dataset is {}x{} but the model expects {}x{}",
            ds.info.height,
            ds.info.width,
            cfg.height,
            cfg.width
        );
    }
    Ok(ds)
}

fn gen_data(a: GenDataArgs) -> Result<ExitCode> {
    let ds = generate(a.seed, a.size, a.size, a.train, a.val)?;
    ds.save(&a.out, a.images)?;
    println!(
        "wrote {} train / {} val samples to {} (train digest {}, val digest {})",
        a.train,
        a.val,
        a.out.display(),
        ds.info.train.digest,
        ds.info.val.digest
    );
    Ok(ExitCode::SUCCESS)
}

fn train(a: TrainArgs) -> Result<ExitCode> {
    let trainer = match &a.resume {
        Some(p) => checkpoint::load(p).with_context(|| format!("loading {}", p.display()))?,
        None => Trainer::new(FcNet::new(a.cfg.resolve(Config::desk())?)?),
    };
    let cfg = trainer.model.config.clone();
    let ds = load_data(a.data.as_deref(), &cfg)?;
    std::fs::create_dir_all(&a.out)?;
    write_config(&a.out.join("config.txt"), &cfg)?;
    info!(
        "{} parameters; starting at epoch {}",
        trainer.model.params.num_scalars(),
        trainer.epoch
    );
    let opts = TrainOptions {
        out_dir: Some(a.out.clone()),
        early_stop_iou: a.early_stop,
        log_every: a.log_every,
        max_seconds: a.max_minutes.map(|m| m * 60.0),
    };
    let out = run_training(trainer, &ds.train, &ds.val, &opts)?;
    let secs = out.history.last().map_or(0.0, |e| e.seconds);
    println!(
        "best val IoU {:.4} at epoch {:?}; {} epochs in {:.0}s; checkpoints in {}",
        out.best_iou,
        out.best_epoch,
        out.history.len(),
        secs,
        a.out.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn eval(a: EvalArgs) -> Result<ExitCode> {
    let model = checkpoint::load(&a.checkpoint)?.model;
    let ds = load_data(a.data.as_deref(), &model.config)?;
    let (name, samples) = match a.split {
        SplitArg::Train => ("train", &ds.train),
        SplitArg::Val => ("val", &ds.val),
    };
    let mut ious = Vec::with_capacity(samples.len());
    let mut alphas: Vec<f64> = Vec::new();
    for s in samples.iter() {
        let p = model
            .predict(&s.image, &s.expression)
            .with_context(|| format!("sample seed {:#x}", s.seed))?;
        ious.push(iou(&p.binary_mask(), &mask_bits(&s.mask))?);
        if let Some(al) = &p.alphas {
            alphas.extend_from_slice(al.data());
        }
    }
    let report = EvalReport::from_ious(ious)?;
    println!("{name}: mean IoU {:.4}", report.mean_iou);
    for (t, p) in &report.precision {
        println!("  Pr@{t:.1} {p:.4}");
    }
    if let Some(p) = &a.json {
        write_eval_json(p, &[EvalJson::new(name, &report)])?;
    }
    if let Some(p) = &a.csv {
        write_eval_csv(p, &[(name, &report)])?;
    }
    if let Some(p) = &a.alphas_csv {
        if alphas.is_empty() {
            bail!("this model has no calibration module, so there are no alphas to dump");
        }
        let n_k = model.config.n_k;
        let header: Vec<String> = (0..n_k).map(|i| format!("alpha_{i}")).collect();
        write_matrix_csv(p, &header, &Tensor::new(&[samples.len(), n_k], alphas)?)?;
    }
    Ok(ExitCode::SUCCESS)
}

fn ablate(a: AblateArgs) -> Result<ExitCode> {
    let cfg = a.cfg.resolve(Config::desk())?;
    let studies = a
        .studies
        .iter()
        .map(|s| Study::parse(s.trim()))
        .collect::<Result<Vec<_>, _>>()?;
    let ds = load_data(a.data.as_deref(), &cfg)?;
    let rows = run_ablation(&cfg, &studies, &a.seeds, &ds.train, &ds.val)?;
    write_ablation_csv(&a.out, &rows)?;
    for r in &rows {
        match r.median_iou() {
            Some(m) => println!("{:<16} median IoU {m:.4}", r.variant.name()),
            None => println!("{:<16} failed: {}", r.variant.name(), r.errors().join(" | ")),
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn predict(a: PredictArgs) -> Result<ExitCode> {
    let model = checkpoint::load(&a.checkpoint)?.model;
    let raster = Raster::read(&a.image)?;
    if raster.channels != 3 {
        bail!("{} is not an RGB (P6) image", a.image.display());
    }
    let words: Vec<&str> = a.expression.split_whitespace().collect();
    let p = model.predict(&raster.to_tensor(), &words)?;
    let bits = p.binary_mask();
    Raster::from_mask(&bits, raster.height, raster.width).write(&a.out)?;
    let fg = bits.iter().filter(|&&b| b).count();
    println!("wrote {} ({fg} foreground pixels)", a.out.display());
    if let Some(path) = &a.attn_csv {
        let m = p
            .attn_map
            .as_ref()
            .context("this model has no emphasis generation, so there is no attention map")?;
        let tokens = model.vocab.labels(&model.tokenize(&words)?);
        write_matrix_csv(path, &tokens, m)?;
    }
    if let Some(path) = &a.alphas_csv {
        let al = p
            .alphas
            .as_ref()
            .context("this model has no calibration module, so there are no alphas")?;
        let header: Vec<String> = (0..al.len()).map(|i| format!("alpha_{i}")).collect();
        write_matrix_csv(path, &header, &al.clone().reshape(&[1, al.len()])?)?;
    }
    if let Some(gt) = &a.gt {
        let g = Raster::read(gt)?;
        let gt_bits: Vec<bool> = g.pixels.iter().map(|&v| v >= 128).collect();
        println!("IoU {:.4}", iou(&bits, &gt_bits)?);
    }
    Ok(ExitCode::SUCCESS)
}

fn gradcheck(a: GradcheckArgs) -> Result<ExitCode> {
    let cfg = a.cfg.resolve(Config::toy())?;
    if cfg.c > 16 || cfg.n_k > 4 || cfg.height != 32 || cfg.width != 32 {
        warn!("gradcheck is meant for toy sizes (C<=16, N_k<=4, 32x32); this may be slow");
    }
    let opts = CheckOptions {
        fault: a.inject_fault.map(|f| match f {
            FaultArg::ReluLeak => Fault::ReluLeak,
            FaultArg::BiasGrad => Fault::BiasGradDoubled,
        }),
        max_coords: (a.max_coords > 0).then_some(a.max_coords),
        ..CheckOptions::default()
    };
    let groups = gradient_suite(&cfg, &opts)?;
    let mut worst = 0.0f64;
    for g in &groups {
        let m = g.report.max_rel_error();
        worst = worst.max(m);
        let verdict = if m <= GRADCHECK_TOLERANCE { "ok" } else { "FAIL" };
        println!("{:<18} max_rel_error {m:.3e} {verdict}", g.group);
        if g.group == "end_to_end" {
            for e in &g.report.entries {
                println!("  {:<40} {:>6} coords  {:.3e}", e.name, e.coords, e.max_rel_error);
            }
        }
    }
    if worst > GRADCHECK_TOLERANCE {
        println!("gradient check FAILED: max relative error {worst:.3e} > {GRADCHECK_TOLERANCE:e}");
        return Ok(ExitCode::FAILURE);
    }
    println!("gradient check passed: max relative error {worst:.3e}");
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Ablate(a) => ablate(a),
        Command::Predict(a) => predict(a),
        Command::Gradcheck(a) => gradcheck(a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
