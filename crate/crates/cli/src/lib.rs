//! Command-line driver: dataset generation, training, evaluation and
//! ablation grids.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use selcon_core::experiment::{self, AblationParam};
use selcon_core::{
    generate_dataset, load_checkpoint, load_dataset, save_checkpoint, save_dataset, Checkpoint,
    Dataset, Error, EvalFeature, RunConfig,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_NUMERICAL: i32 = 4;

#[derive(Parser, Debug)]
#[command(name = "selcon", version, about = "Selective contrastive learning for unsupervised re-identification")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic multi-camera dataset.
    GenData(GenDataArgs),
    /// Train a model and write a checkpoint plus per-epoch metrics.
    Train(TrainArgs),
    /// Evaluate a checkpoint and write a JSON metric report.
    Eval(EvalArgs),
    /// Train and evaluate a grid of settings.
    Ablate(AblateArgs),
}

#[derive(Args, Debug)]
struct Common {
    /// TOML run configuration; defaults apply to anything it omits.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct GenDataArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides `data.seed`.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    /// Dataset file; generated from the config when absent.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    metrics: Option<PathBuf>,
    /// Overrides `train.epochs`.
    #[arg(long)]
    epochs: Option<usize>,
    /// Overrides `train.seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Stop once this many epochs are complete.
    #[arg(long)]
    stop_after: Option<usize>,
    /// Continue from a checkpoint; its configuration is used.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset file; generated from the checkpoint's config when absent.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Report path; printed to stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Retrieval descriptor: global, local or joint.
    #[arg(long)]
    feature: Option<EvalFeature>,
}

#[derive(Args, Debug)]
struct AblateArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    data: Option<PathBuf>,
    /// One of lambda_c, lambda_t, n_plus, n_minus, tau, beta, lambda_p.
    #[arg(long, conflicts_with = "preset", requires = "values")]
    param: Option<AblationParam>,
    #[arg(long, value_delimiter = ',')]
    values: Vec<f64>,
    /// table4 or table5.
    #[arg(long)]
    preset: Option<String>,
    #[arg(long, value_delimiter = ',', default_value = "0")]
    seeds: Vec<u64>,
    /// Overrides `train.epochs`.
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Maps a library error to the process exit code.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) => EXIT_CONFIG,
        Error::NonFinite { .. } => EXIT_NUMERICAL,
        _ => EXIT_DATA,
    }
}

/// Parses `argv` (including the program name), runs the command and returns
/// the exit code.
pub fn run_cli<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    let result = match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Ablate(a) => ablate(a),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn load_config(common: &Common) -> selcon_core::Result<RunConfig> {
    match &common.config {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    }
}

fn dataset(path: Option<&Path>, cfg: &RunConfig) -> selcon_core::Result<Dataset> {
    match path.or(cfg.paths.dataset.as_deref()) {
        Some(p) => load_dataset(p),
        None => {
            log::info!("no dataset given, generating one from the config");
            generate_dataset(&cfg.data)
        }
    }
}

fn write_file(path: &Path, contents: &str) -> selcon_core::Result<()> {
    fs::write(path, contents)?;
    Ok(())
}

fn gen_data(a: GenDataArgs) -> selcon_core::Result<()> {
    let mut cfg = load_config(&a.common)?;
    if let Some(s) = a.seed {
        cfg.data.seed = s;
    }
    cfg.data.validate()?;
    let out = a
        .out
        .or(cfg.paths.dataset.clone())
        .ok_or_else(|| Error::Config("gen-data needs --out or paths.dataset".into()))?;
    let ds = generate_dataset(&cfg.data)?;
    save_dataset(&out, &ds)?;
    println!(
        "wrote {} ({} train, {} query, {} gallery)",
        out.display(),
        ds.train.len(),
        ds.query.len(),
        ds.gallery.len()
    );
    Ok(())
}

fn train(a: TrainArgs) -> selcon_core::Result<()> {
    let resume = a.resume.as_deref().map(load_checkpoint).transpose()?;
    let mut cfg = match &resume {
        Some(ck) => ck.config.clone(),
        None => load_config(&a.common)?,
    };
    if let Some(e) = a.epochs {
        cfg.train.epochs = e;
    }
    if let Some(s) = a.seed {
        cfg.train.seed = s;
    }
    cfg.validate()?;
    let data = dataset(a.data.as_deref(), &cfg)?;
    let checkpoint = a.checkpoint.or(cfg.paths.checkpoint.clone());
    let metrics_path = a.metrics.or(cfg.paths.metrics.clone());

    // A resumed run appends to the metrics it already has.
    let mut csv = match (&resume, &metrics_path) {
        (Some(_), Some(p)) if p.exists() => fs::read_to_string(p)?,
        _ => format!("{}\n", experiment::METRICS_HEADER),
    };
    let trainer = experiment::train(&cfg, &data, resume, a.stop_after, |stats, _| {
        csv.push_str(&experiment::metrics_row(stats));
        csv.push('\n');
        println!("{}", experiment::metrics_row(stats));
        Ok(())
    })?;
    if let Some(p) = &metrics_path {
        write_file(p, &csv)?;
    }
    if let Some(p) = &checkpoint {
        save_checkpoint(p, &Checkpoint::from_trainer(&cfg, &trainer))?;
        println!("checkpoint {} at epoch {}", p.display(), trainer.epoch);
    }
    Ok(())
}

fn eval(a: EvalArgs) -> selcon_core::Result<()> {
    let ck = load_checkpoint(&a.checkpoint)?;
    let mut eval_cfg = ck.config.eval.clone();
    if let Some(f) = a.feature {
        eval_cfg.feature = f;
    }
    let data = dataset(a.data.as_deref(), &ck.config)?;
    let report = experiment::evaluate_model(&ck.params, &data, &eval_cfg)?;
    let json = experiment::report_json(&report);
    match &a.out {
        Some(p) => write_file(p, &json)?,
        None => print!("{json}"),
    }
    Ok(())
}

fn ablate(a: AblateArgs) -> selcon_core::Result<()> {
    let mut base = load_config(&a.common)?;
    if let Some(e) = a.epochs {
        base.train.epochs = e;
    }
    let settings = match (&a.param, &a.preset) {
        (Some(p), None) => experiment::sweep(&base, *p, &a.values)?,
        (None, Some(name)) => experiment::preset(&base, name)?,
        _ => return Err(Error::Config("ablate needs either --param with --values or --preset".into())),
    };
    let data = dataset(a.data.as_deref(), &base)?;
    let rows = experiment::run_ablation(&settings, &data, &a.seeds, |label, seed, r| {
        println!("{label} seed {seed}: rank1 {:.4} mAP {:.4}", r.rank1, r.map);
    })?;
    let csv = experiment::ablation_csv(&rows);
    match &a.out {
        Some(p) => write_file(p, &csv)?,
        None => print!("{csv}"),
    }
    Ok(())
}
