//! `gravis` command-line entry point.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use gravis::analysis::{self, DEFAULT_BASE, DEFAULT_TAUS};
use gravis::augment::{resize, AugmentationSpec};
use gravis::checkpoint::load_checkpoint;
use gravis::eval::{augmented_view_retrieval, embed_images, linear_probe};
use gravis::gradcheck;
use gravis::pretrain::{pretrain_run, LossKind, PretrainConfig};
use gravis::rng::{self, Domain};
use gravis::synth::{generate_synthetic_dataset, load_dataset, SynthConfig};
use gravis::{Error, Result};

#[derive(Parser, Debug)]
#[command(name = "gravis", version, about = "Self-supervised pretraining with the view grouping loss")]
struct Cli {
    /// JSON config for the subcommand; flags override its fields.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    #[arg(long, global = true, value_name = "U64")]
    seed: Option<u64>,
    /// Output file or directory, depending on the subcommand.
    #[arg(long, global = true, value_name = "PATH")]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset and its manifest.
    Synth(SynthArgs),
    /// Run pretraining.
    Pretrain(PretrainArgs),
    /// Loss-geometry curves as CSV.
    #[command(subcommand)]
    Analyze(AnalyzeCommand),
    /// Evaluate a checkpoint.
    #[command(subcommand)]
    Eval(EvalCommand),
    /// Finite-difference checks of every analytic gradient.
    Gradcheck,
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long)]
    num_sources: Option<usize>,
    #[arg(long)]
    num_classes: Option<usize>,
    #[arg(long)]
    image_size: Option<usize>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum LossArg {
    Vgl,
    Triplet,
    Nce,
}

#[derive(Args, Debug)]
struct PretrainArgs {
    #[arg(long, value_name = "PATH")]
    manifest: Option<PathBuf>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    n_aug: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    no_attention: bool,
    #[arg(long)]
    loss: Option<LossArg>,
    #[arg(long)]
    lr: Option<f64>,
    /// Start from the small-batch desk preset instead of the full defaults.
    #[arg(long)]
    desk: bool,
}

#[derive(Args, Debug, Clone)]
struct CurveArgs {
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    no_attention: bool,
    #[arg(long)]
    base: Option<f64>,
}

#[derive(Subcommand, Debug)]
enum AnalyzeCommand {
    /// `gap,grad_diff`
    GradGap(CurveArgs),
    /// `gap,loss`
    LossGap(CurveArgs),
    /// `sim,contribution`
    SigmoidMargin(CurveArgs),
    /// `tau,gap,grad_diff`
    TauSweep {
        #[command(flatten)]
        curve: CurveArgs,
        /// Comma-separated temperatures.
        #[arg(long, value_delimiter = ',')]
        taus: Option<Vec<f64>>,
    },
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long, value_name = "PATH")]
    checkpoint: Option<PathBuf>,
    #[arg(long, value_name = "PATH")]
    manifest: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum EvalCommand {
    /// Augmented-view retrieval precision@k.
    Retrieval {
        #[command(flatten)]
        common: EvalArgs,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        n_aug: Option<usize>,
    },
    /// Linear probe on class labels.
    Probe {
        #[command(flatten)]
        common: EvalArgs,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
    },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct AnalyzeConfig {
    tau: f64,
    attention_enabled: bool,
    base: f64,
    c_grid: Vec<f64>,
    taus: Vec<f64>,
    /// Reference positive and swept grid for the sigmoid margin curve.
    reference_positive: f64,
    sim_grid: Vec<f64>,
}

impl Default for AnalyzeConfig {
    fn default() -> Self {
        Self {
            tau: 0.2,
            attention_enabled: true,
            base: DEFAULT_BASE,
            c_grid: analysis::default_c_grid(),
            taus: DEFAULT_TAUS.to_vec(),
            reference_positive: DEFAULT_BASE,
            sim_grid: (0..=200).map(|k| -1.0 + 0.01 * k as f64).collect(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct EvalConfig {
    checkpoint: Option<PathBuf>,
    manifest: Option<PathBuf>,
    seed: u64,
    k: usize,
    n_aug: usize,
    augmentation: AugmentationSpec,
    probe_steps: usize,
    probe_lr: f64,
    /// Every `test_every`-th source goes to the probe's test split.
    test_every: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            checkpoint: None,
            manifest: None,
            seed: 0,
            k: 1,
            n_aug: 6,
            augmentation: AugmentationSpec::default(),
            probe_steps: 500,
            probe_lr: 1.0,
            test_every: 5,
        }
    }
}

fn read_config<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    match path {
        None => Ok(T::default()),
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::IoFailure { path: p.to_path_buf(), source: e })?;
            Ok(serde_json::from_str(&text)?)
        }
    }
}

fn write_output(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => fs::write(p, text).map_err(|e| Error::IoFailure { path: p.to_path_buf(), source: e }),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn run_synth(cli: &Cli, args: &SynthArgs) -> Result<()> {
    let mut cfg: SynthConfig = read_config(cli.config.as_deref())?;
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(n) = args.num_sources {
        cfg.num_sources = n;
    }
    if let Some(n) = args.num_classes {
        cfg.num_classes = n;
    }
    if let Some(n) = args.image_size {
        cfg.image_size = n;
    }
    let dir = cli.out.clone().unwrap_or_else(|| PathBuf::from("synth"));
    let manifest = generate_synthetic_dataset(&cfg, &dir)?;
    println!(
        "wrote {} images ({} classes) and {}",
        manifest.entries.len(),
        manifest.num_classes,
        dir.join(gravis::synth::MANIFEST_FILE).display()
    );
    Ok(())
}

fn run_pretrain(cli: &Cli, args: &PretrainArgs) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::IoFailure { path: p.clone(), source: e })?;
            let base = if args.desk { PretrainConfig::desk() } else { PretrainConfig::default() };
            // Config keys override the chosen preset.
            let mut merged = serde_json::to_value(base)?;
            let overrides: serde_json::Value = serde_json::from_str(&text)?;
            if let (Some(m), Some(o)) = (merged.as_object_mut(), overrides.as_object()) {
                for (k, v) in o {
                    if !m.contains_key(k) {
                        return Err(Error::InvalidConfig(format!("unknown config key {k:?}")));
                    }
                    m.insert(k.clone(), v.clone());
                }
            }
            serde_json::from_value(merged)?
        }
        None if args.desk => PretrainConfig::desk(),
        None => PretrainConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(m) = &args.manifest {
        cfg.manifest = Some(m.clone());
    }
    if let Some(t) = args.tau {
        cfg.tau = t;
    }
    if let Some(n) = args.n_aug {
        cfg.n_aug = n;
    }
    if let Some(b) = args.batch {
        cfg.batch_size = b;
    }
    if let Some(e) = args.epochs {
        cfg.epochs = e;
    }
    if args.no_attention {
        cfg.attention_enabled = false;
    }
    if let Some(l) = args.loss {
        cfg.loss = match l {
            LossArg::Vgl => LossKind::Vgl,
            LossArg::Triplet => LossKind::Triplet,
            LossArg::Nce => LossKind::Nce,
        };
    }
    if let Some(lr) = args.lr {
        cfg.base_lr = lr;
    }
    if let Some(dir) = &cli.out {
        fs::create_dir_all(dir).map_err(|e| Error::IoFailure { path: dir.clone(), source: e })?;
        cfg.checkpoint_path = Some(dir.join("checkpoint.grvs"));
        cfg.metrics_path = Some(dir.join("metrics.csv"));
        fs::write(dir.join("config.json"), cfg.to_json()).map_err(|e| Error::IoFailure { path: dir.clone(), source: e })?;
    }
    let outcome = pretrain_run(&cfg)?;
    for row in &outcome.metrics.rows {
        println!("epoch {:>4}  loss {:.6}  lr {:.3e}  {:.2}s", row.epoch, row.loss, row.lr, row.seconds);
    }
    if let Some(p) = &cfg.checkpoint_path {
        println!("checkpoint: {}", p.display());
    }
    Ok(())
}

fn run_analyze(cli: &Cli, cmd: &AnalyzeCommand) -> Result<()> {
    let mut cfg: AnalyzeConfig = read_config(cli.config.as_deref())?;
    let curve = match cmd {
        AnalyzeCommand::GradGap(c) | AnalyzeCommand::LossGap(c) | AnalyzeCommand::SigmoidMargin(c) => c,
        AnalyzeCommand::TauSweep { curve, .. } => curve,
    };
    if let Some(t) = curve.tau {
        cfg.tau = t;
    }
    if curve.no_attention {
        cfg.attention_enabled = false;
    }
    if let Some(b) = curve.base {
        cfg.base = b;
        cfg.reference_positive = b;
    }
    let csv = match cmd {
        AnalyzeCommand::GradGap(_) => analysis::curve_csv(
            "gap,grad_diff",
            &analysis::gradient_gap_curve(cfg.tau, cfg.attention_enabled, &cfg.c_grid, cfg.base)?,
        ),
        AnalyzeCommand::LossGap(_) => analysis::curve_csv(
            "gap,loss",
            &analysis::loss_gap_curve(cfg.tau, cfg.attention_enabled, &cfg.c_grid, cfg.base)?,
        ),
        AnalyzeCommand::SigmoidMargin(_) => analysis::curve_csv(
            "sim,contribution",
            &analysis::sigmoid_margin_curve(cfg.tau, cfg.reference_positive, &cfg.sim_grid)?,
        ),
        AnalyzeCommand::TauSweep { taus, .. } => {
            let taus = taus.clone().unwrap_or(cfg.taus);
            analysis::tau_sweep_csv(&analysis::tau_sweep(&taus, cfg.attention_enabled, &cfg.c_grid, cfg.base)?)
        }
    };
    write_output(cli.out.as_deref(), &csv)
}

fn eval_setup(cli: &Cli, common: &EvalArgs) -> Result<EvalConfig> {
    let mut cfg: EvalConfig = read_config(cli.config.as_deref())?;
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(c) = &common.checkpoint {
        cfg.checkpoint = Some(c.clone());
    }
    if let Some(m) = &common.manifest {
        cfg.manifest = Some(m.clone());
    }
    Ok(cfg)
}

fn required<'a>(p: &'a Option<PathBuf>, what: &str) -> Result<&'a Path> {
    p.as_deref().ok_or_else(|| Error::InvalidConfig(format!("eval needs --{what}")))
}

fn run_eval(cli: &Cli, cmd: &EvalCommand) -> Result<()> {
    let report = match cmd {
        EvalCommand::Retrieval { common, k, n_aug } => {
            let mut cfg = eval_setup(cli, common)?;
            if let Some(k) = k {
                cfg.k = *k;
            }
            if let Some(n) = n_aug {
                cfg.n_aug = *n;
            }
            let (params, _) = load_checkpoint(required(&cfg.checkpoint, "checkpoint")?)?;
            let (_, images) = load_dataset(required(&cfg.manifest, "manifest")?)?;
            cfg.augmentation.output_size = params.config().input_size;
            let seed = rng::mix(cfg.seed, Domain::Eval as u64);
            let r = augmented_view_retrieval(&params, &images, cfg.n_aug, &cfg.augmentation, seed, cfg.k)?;
            serde_json::to_string_pretty(&r)?
        }
        EvalCommand::Probe { common, steps, lr } => {
            let mut cfg = eval_setup(cli, common)?;
            if let Some(s) = steps {
                cfg.probe_steps = *s;
            }
            if let Some(lr) = lr {
                cfg.probe_lr = *lr;
            }
            if cfg.test_every < 2 {
                return Err(Error::InvalidConfig("test_every must be at least 2".into()));
            }
            let (params, _) = load_checkpoint(required(&cfg.checkpoint, "checkpoint")?)?;
            let (manifest, images) = load_dataset(required(&cfg.manifest, "manifest")?)?;
            let size = params.config().input_size;
            let images = images.iter().map(|img| resize(img, size)).collect::<Result<Vec<_>>>()?;
            let emb = embed_images(&params, &images)?;
            let (mut tr_x, mut tr_y, mut te_x, mut te_y) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
            for (i, (e, entry)) in emb.into_iter().zip(&manifest.entries).enumerate() {
                if i % cfg.test_every == cfg.test_every - 1 {
                    te_x.push(e);
                    te_y.push(entry.class_id);
                } else {
                    tr_x.push(e);
                    tr_y.push(entry.class_id);
                }
            }
            let r = linear_probe(&tr_x, &tr_y, &te_x, &te_y, cfg.probe_steps, cfg.probe_lr)?;
            serde_json::to_string_pretty(&r)?
        }
    };
    println!("{report}");
    if let Some(out) = &cli.out {
        fs::write(out, format!("{report}\n")).map_err(|e| Error::IoFailure { path: out.clone(), source: e })?;
    }
    Ok(())
}

fn run_gradcheck(cli: &Cli) -> Result<bool> {
    let results = gradcheck::run_suite(cli.seed.unwrap_or(0))?;
    for r in &results {
        println!("{}", r.line());
    }
    Ok(results.iter().all(|r| r.passed))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match &cli.command {
        Command::Synth(a) => run_synth(&cli, a).map(|_| true),
        Command::Pretrain(a) => run_pretrain(&cli, a).map(|_| true),
        Command::Analyze(c) => run_analyze(&cli, c).map(|_| true),
        Command::Eval(c) => run_eval(&cli, c).map(|_| true),
        Command::Gradcheck => run_gradcheck(&cli),
    };
    match outcome {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {}: {e}", e.name());
            ExitCode::from(1)
        }
    }
}
