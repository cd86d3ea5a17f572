use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::parser::ValueSource;
use clap::{ArgGroup, ArgMatches, Args, CommandFactory, FromArgMatches, Parser, Subcommand};

use emifuse::checkpoint::Checkpoint;
use emifuse::config::{parse_dims, Cadence, TrainConfig};
use emifuse::data::emif::read_feature_file;
use emifuse::data::synth::{generate_synthetic, SynthMode, SynthSpec};
use emifuse::data::{Manifest, Split, SplitData};
use emifuse::layers::Activation;
use emifuse::losses::CorrMode;
use emifuse::model::{FusionMode, Modality};
use emifuse::trainer::{self, Dataset, CONFIG_FILE};
use emifuse::Error;

/// Environment variable naming the root under which runs without an explicit
/// `--run-dir` are created.
const RUN_ROOT_ENV: &str = "EMIFUSE_RUN_ROOT";

#[derive(Parser)]
#[command(name = "emifuse", version, about = "Multimodal emotion-intensity regression")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset: feature files, manifest, and sidecar JSON.
    GenSynth(GenSynthArgs),
    /// Train a model; writes config, log, and checkpoints to the run directory.
    Train(TrainArgs),
    /// Score a checkpoint on one split and print the report as JSON.
    Evaluate(EvaluateArgs),
    /// Write per-sample predictions for one manifest split as CSV.
    Predict(PredictArgs),
    /// Train the 2×2×2 fusion × objective × VAD grid and write ablation.csv.
    Ablate(AblateArgs),
    /// Dump a checkpoint's tensors or a feature file's header.
    Inspect(InspectArgs),
}

#[derive(Args)]
struct GenSynthArgs {
    #[arg(long)]
    n: usize,
    /// Feature widths as VISUAL:AUDIO:TEXT.
    #[arg(long, value_parser = dims_arg)]
    dims: [usize; 3],
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Target noise standard deviation.
    #[arg(long, default_value_t = 0.0)]
    noise: f64,
    #[arg(long, default_value = "overlap")]
    mode: SynthMode,
    #[arg(long, default_value_t = 16)]
    min_len: usize,
    #[arg(long, default_value_t = 160)]
    max_len: usize,
    /// Per-frame noise standard deviation.
    #[arg(long, default_value_t = 0.1)]
    jitter: f64,
    #[arg(long, default_value_t = 0.0)]
    missing_text_rate: f64,
    #[arg(long, default_value_t = 0.1)]
    val_fraction: f64,
    #[arg(long, default_value_t = 0.1)]
    test_fraction: f64,
    #[arg(long)]
    out: PathBuf,
}

/// Flags mapping onto the training config. Only flags given on the command
/// line override values from `--config`.
#[derive(Args)]
struct ConfigArgs {
    /// JSON config file; explicit flags take precedence over its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    run_dir: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Feature widths as VISUAL:AUDIO:TEXT.
    #[arg(long, value_parser = dims_arg)]
    dims: Option<[usize; 3]>,
    #[arg(long, default_value_t = 256)]
    hidden_dim: usize,
    #[arg(long, default_value_t = 128)]
    align_len: usize,
    #[arg(long, default_value = "0.2")]
    dropout: f64,
    #[arg(long, default_value = "concat")]
    fusion: FusionMode,
    #[arg(long, default_value = "relu", value_parser = activation_arg)]
    activation: Activation,
    #[arg(long, default_value = "true", action = clap::ArgAction::Set)]
    use_vad: bool,
    #[arg(long, default_value = "true", action = clap::ArgAction::Set)]
    output_sigmoid: bool,
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
    #[arg(long, default_value_t = 30)]
    epochs: usize,
    #[arg(long, default_value = "1e-4")]
    lr: f64,
    #[arg(long, default_value = "0")]
    min_lr: f64,
    #[arg(long, default_value = "epoch")]
    lr_schedule: Cadence,
    #[arg(long, default_value = "1e-4")]
    weight_decay: f64,
    #[arg(long, default_value = "0.9")]
    beta1: f64,
    #[arg(long, default_value = "0.999")]
    beta2: f64,
    #[arg(long, default_value = "1e-8")]
    adam_eps: f64,
    #[arg(long, default_value = "1.0")]
    clip_norm: f64,
    #[arg(long, default_value = "0.999")]
    ema_decay: f64,
    #[arg(long, default_value = "step")]
    ema_update: Cadence,
    #[arg(long, default_value_t = 8)]
    patience: usize,
    #[arg(long, default_value = "true", action = clap::ArgAction::Set)]
    shuffle: bool,
    #[arg(long, default_value = "0.5")]
    lambda_corr: f64,
    #[arg(long, default_value = "0.3")]
    lambda_aux: f64,
    #[arg(long, default_value = "0.1")]
    lambda_vad: f64,
    #[arg(long, default_value = "1.0")]
    lambda_visual: f64,
    #[arg(long, default_value = "1.0")]
    lambda_audio: f64,
    #[arg(long, default_value = "1.0")]
    lambda_text: f64,
    #[arg(long, default_value = "per_dim", value_parser = corr_mode_arg)]
    corr_mode: CorrMode,
    #[arg(long, default_value = "1e-8")]
    pearson_eps: f64,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long, default_value = "val")]
    split: Split,
    /// Use the raw weights instead of the EMA shadows.
    #[arg(long, conflicts_with = "both")]
    no_ema: bool,
    /// Emit both the EMA and the raw report.
    #[arg(long)]
    both: bool,
    /// Run config; defaults to config.json next to the checkpoint.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Manifest to evaluate on; defaults to the one in the run config.
    #[arg(long)]
    manifest: Option<PathBuf>,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = "test")]
    split: Split,
    /// Write pre-sigmoid logits instead of predictions.
    #[arg(long)]
    raw: bool,
    /// Use the raw weights instead of the EMA shadows.
    #[arg(long)]
    no_ema: bool,
    /// Run config; defaults to config.json next to the checkpoint.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Grid to run; only the full fusion × objective × VAD grid is defined.
    #[arg(long, default_value = "default", value_parser = ["default"])]
    grid: String,
    /// Comma-separated seeds; each cell is trained once per seed.
    #[arg(long, value_delimiter = ',')]
    seeds: Vec<u64>,
    /// Output directory for the per-cell runs and ablation.csv.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
#[command(group(ArgGroup::new("target").required(true).args(["ckpt", "emif"])))]
struct InspectArgs {
    #[arg(long)]
    ckpt: Option<PathBuf>,
    #[arg(long)]
    emif: Option<PathBuf>,
    /// Config used to check the parameter count; defaults to config.json next to the checkpoint.
    #[arg(long)]
    config: Option<PathBuf>,
}

fn dims_arg(s: &str) -> Result<[usize; 3], String> {
    parse_dims(s).map_err(|e| e.to_string())
}

fn activation_arg(s: &str) -> Result<Activation, String> {
    serde_json::from_value(serde_json::Value::String(s.into())).map_err(|_| format!("unknown activation {s:?}"))
}

fn corr_mode_arg(s: &str) -> Result<CorrMode, String> {
    serde_json::from_value(serde_json::Value::String(s.into())).map_err(|_| format!("unknown corr mode {s:?}"))
}

/// Failure classes mapped to exit codes.
enum Failure {
    Usage(String),
    Data(String),
    Numeric(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::NonFinite(_) => Failure::Numeric(e.to_string()),
            Error::Config(_) | Error::InvalidArgument(_) => Failure::Usage(e.to_string()),
            _ => Failure::Data(e.to_string()),
        }
    }
}

type CliResult<T = ()> = Result<T, Failure>;

fn main() -> ExitCode {
    let matches = match Cli::command().try_get_matches() {
        Ok(m) => m,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(1);
        }
    };
    let sub = matches.subcommand().map(|(_, m)| m).expect("subcommand required");
    let result = match cli.command {
        Command::GenSynth(a) => gen_synth(a),
        Command::Train(a) => train(a, sub),
        Command::Evaluate(a) => evaluate(a),
        Command::Predict(a) => predict(a),
        Command::Ablate(a) => ablate(a, sub),
        Command::Inspect(a) => inspect(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(Failure::Data(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
        Err(Failure::Numeric(m)) => {
            eprintln!("numeric failure: {m}");
            ExitCode::from(3)
        }
    }
}

fn gen_synth(a: GenSynthArgs) -> CliResult {
    let spec = SynthSpec {
        noise: a.noise,
        mode: a.mode,
        min_len: a.min_len,
        max_len: a.max_len,
        jitter: a.jitter,
        missing_text_rate: a.missing_text_rate,
        val_fraction: a.val_fraction,
        test_fraction: a.test_fraction,
        ..SynthSpec::new(a.n, a.dims, a.seed)
    };
    let side = generate_synthetic(&spec, &a.out)?;
    eprintln!(
        "wrote {} samples to {} (train {}, val {}, test {})",
        spec.n,
        a.out.display(),
        side.counts.train,
        side.counts.val,
        side.counts.test
    );
    Ok(())
}

fn explicit(m: &ArgMatches, id: &str) -> bool {
    m.value_source(id) == Some(ValueSource::CommandLine)
}

/// Config file (or defaults) with every explicitly given flag laid on top.
fn resolve_config(a: &ConfigArgs, m: &ArgMatches) -> CliResult<TrainConfig> {
    let mut cfg = match &a.config {
        Some(path) => TrainConfig::load(path)?,
        None => TrainConfig::default(),
    };
    macro_rules! overlay {
        ($($field:ident),* $(,)?) => {
            $(if explicit(m, stringify!($field)) {
                cfg.$field = a.$field.clone();
            })*
        };
    }
    overlay!(
        seed, hidden_dim, align_len, dropout, fusion, activation, use_vad, output_sigmoid, batch_size, epochs, lr,
        min_lr, lr_schedule, weight_decay, beta1, beta2, adam_eps, clip_norm, ema_decay, ema_update, patience,
        shuffle, lambda_corr, lambda_aux, lambda_vad, lambda_visual, lambda_audio, lambda_text, corr_mode,
        pearson_eps,
    );
    if let Some(p) = &a.manifest {
        cfg.manifest = Some(p.clone());
    }
    if let Some(p) = &a.run_dir {
        cfg.run_dir = Some(p.clone());
    }
    if let Some(d) = a.dims {
        cfg.set_feature_dims(d);
    }
    cfg.validate()?;
    if cfg.manifest.is_none() {
        return Err(Failure::Usage("no manifest given (--manifest or config key \"manifest\")".into()));
    }
    Ok(cfg)
}

fn default_run_dir(cfg: &TrainConfig, kind: &str) -> PathBuf {
    let root = std::env::var_os(RUN_ROOT_ENV).map_or_else(|| PathBuf::from("runs"), PathBuf::from);
    root.join(format!("{kind}-{}", &cfg.hash()[..12]))
}

fn echo_config(cfg: &TrainConfig) {
    eprintln!("resolved config:\n{}", cfg.to_json());
}

fn train(a: TrainArgs, m: &ArgMatches) -> CliResult {
    let mut cfg = resolve_config(&a.cfg, m)?;
    if cfg.run_dir.is_none() {
        cfg.run_dir = Some(default_run_dir(&cfg, "train"));
    }
    echo_config(&cfg);
    let rec = trainer::train(&cfg)?;
    let dir = cfg.run_dir.as_deref().expect("run dir set");
    eprintln!(
        "best epoch {} (p̄ = {:.6}), {} epochs, stop: {:?}; run directory {}",
        rec.summary.best_epoch,
        rec.summary.best_p_mean,
        rec.summary.epochs_run,
        rec.summary.stop_reason,
        dir.display()
    );
    println!("{}", serde_json::to_string_pretty(&rec.summary).expect("summary serializes"));
    Ok(())
}

fn run_config_for(ckpt: &Path, explicit: Option<&Path>) -> CliResult<TrainConfig> {
    let path = match explicit {
        Some(p) => p.to_path_buf(),
        None => ckpt.parent().unwrap_or(Path::new(".")).join(CONFIG_FILE),
    };
    Ok(TrainConfig::load(&path)?)
}

fn evaluate(a: EvaluateArgs) -> CliResult {
    let mut cfg = run_config_for(&a.ckpt, a.config.as_deref())?;
    if let Some(p) = a.manifest {
        cfg.manifest = Some(p);
    }
    echo_config(&cfg);
    let manifest_path = cfg
        .manifest
        .clone()
        .ok_or_else(|| Failure::Usage("run config names no manifest; pass --manifest".into()))?;
    let ckpt = Checkpoint::load(&a.ckpt)?;
    let data = SplitData::load(&Manifest::read(&manifest_path)?, a.split, cfg.feature_dims()?)?;
    let out = if a.both {
        serde_json::json!({
            "ema": trainer::evaluate(&ckpt, &cfg, &data, true)?,
            "raw": trainer::evaluate(&ckpt, &cfg, &data, false)?,
        })
    } else {
        serde_json::to_value(trainer::evaluate(&ckpt, &cfg, &data, !a.no_ema)?).expect("report serializes")
    };
    println!("{}", serde_json::to_string_pretty(&out).expect("report serializes"));
    Ok(())
}

fn predict(a: PredictArgs) -> CliResult {
    let cfg = run_config_for(&a.ckpt, a.config.as_deref())?;
    echo_config(&cfg);
    let ckpt = Checkpoint::load(&a.ckpt)?;
    let mut model = ckpt.restore(&cfg.model_config()?, !a.no_ema)?;
    let data = SplitData::load(&Manifest::read(&a.manifest)?, a.split, cfg.feature_dims()?)?;
    let preds = trainer::predict_split(&mut model, &data, cfg.batch_size)?;
    preds.write_csv(&a.out, a.raw)?;
    eprintln!("wrote {} predictions to {}", preds.ids.len(), a.out.display());
    Ok(())
}

fn ablate(a: AblateArgs, m: &ArgMatches) -> CliResult {
    let cfg = resolve_config(&a.cfg, m)?;
    echo_config(&cfg);
    let out = a.out.unwrap_or_else(|| default_run_dir(&cfg, "ablate"));
    let seeds = if a.seeds.is_empty() { vec![cfg.seed] } else { a.seeds };
    let data = Dataset::from_config(&cfg)?;
    let rows = trainer::ablate(&cfg, &data, &seeds, Some(&out))?;
    for (i, r) in rows.iter().enumerate() {
        let fusion = match r.cell.fusion {
            FusionMode::Concat => "concat",
            FusionMode::Average => "average",
        };
        let score = r.mean().map_or_else(|| "failed".to_string(), |v| format!("{v:.6}"));
        eprintln!("{:>2}  {:<28} {:<8} p̄ {score}", i + 1, r.cell.label(), fusion);
    }
    eprintln!("wrote {}", out.join(trainer::ABLATION_FILE).display());
    Ok(())
}

fn inspect(a: InspectArgs) -> CliResult {
    if let Some(path) = a.emif {
        let file = read_feature_file(&path)?;
        println!("magic EMIF");
        println!("version {}", file.version);
        for (m, b) in Modality::ALL.iter().zip(&file.blocks) {
            if b.present {
                println!("{:<6} {}×{}", m.name(), b.rows, b.dim);
            } else {
                println!("{:<6} absent (dim {})", m.name(), b.dim);
            }
        }
        return Ok(());
    }
    let path = a.ckpt.expect("clap enforces one target");
    let ckpt = Checkpoint::load(&path)?;
    println!("magic EMIC");
    println!("version {}", ckpt.version);
    for (name, t) in &ckpt.records {
        let shape: Vec<String> = t.shape().iter().map(usize::to_string).collect();
        println!("{name:<24} {}", shape.join("×"));
    }
    println!("parameters {}", ckpt.parameter_count());
    let cfg_path = a
        .config
        .unwrap_or_else(|| path.parent().unwrap_or(Path::new(".")).join(CONFIG_FILE));
    if cfg_path.exists() {
        let cfg = TrainConfig::load(&cfg_path)?;
        let expected = cfg.model_config()?.parameter_count();
        println!("expected {expected} from {}", cfg_path.display());
        if expected != ckpt.parameter_count() {
            return Err(Failure::Data(format!(
                "checkpoint holds {} parameters, config implies {expected}",
                ckpt.parameter_count()
            )));
        }
    }
    Ok(())
}
