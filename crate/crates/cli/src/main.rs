use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::de::DeserializeOwned;

use ipgphormer::ingest::{load_cohort, synth_cohort, write_cohort, Cohort, SynthConfig};
use ipgphormer::interpret::{
    cell_cox_analysis, median_split_km, patch_risk_map, select_extreme_patches, DEFAULT_EXTREME_K,
};
use ipgphormer::model::{bench_attention, load_checkpoint, Checkpoint};
use ipgphormer::survival::{concordance_index, write_km_csv};
use ipgphormer::train::{cross_validate, prepare_cohort, PreparedSlide, TrainConfig};
use ipgphormer::Error;

/// Output directory used when `--out` is not given.
const OUT_ENV: &str = "IPGPHORMER_OUT";

#[derive(Parser)]
#[command(name = "ipgphormer", version, about = "Multi-scale graph transformer survival analysis")]
struct Cli {
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct OutArg {
    /// Output directory; falls back to $IPGPHORMER_OUT, then `out`.
    #[arg(long)]
    out: Option<PathBuf>,
}

impl OutArg {
    fn dir(&self) -> Result<PathBuf, CliError> {
        let dir = self
            .out
            .clone()
            .or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("out"));
        std::fs::create_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
        Ok(dir)
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Ablation {
    None,
    NoTie,
    NoHie,
    Neither,
}

#[derive(Clone, Copy, ValueEnum)]
enum Split {
    /// Every slide in the manifest.
    All,
    /// The test slides recorded in the checkpoint.
    Test,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic cohort.
    Synth {
        /// JSON synthetic-cohort configuration.
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        n_slides: Option<usize>,
        #[command(flatten)]
        out: OutArg,
    },
    /// Cross-validated training; writes metrics.json and one checkpoint per fold.
    Train {
        #[arg(long)]
        manifest: PathBuf,
        /// JSON training configuration; flags below override it.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        folds: Option<usize>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        hidden: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, value_enum)]
        ablate: Option<Ablation>,
        #[command(flatten)]
        out: OutArg,
    },
    /// Score slides with a checkpoint: C-index, median-split KM and log-rank.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: Split,
        #[command(flatten)]
        out: OutArg,
    },
    /// Patch risk maps and cell-level Cox analysis.
    Interpret {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, value_enum, default_value = "all")]
        split: Split,
        /// Top and bottom patches kept per slide.
        #[arg(long, default_value_t = DEFAULT_EXTREME_K)]
        k: usize,
        #[command(flatten)]
        out: OutArg,
    },
    /// Time dense against linear attention.
    BenchAttention {
        /// Comma-separated node counts.
        #[arg(long, value_delimiter = ',', default_values_t = [512usize, 1024, 2048, 4096])]
        sizes: Vec<usize>,
        #[arg(long, default_value_t = 64)]
        d: usize,
        /// Repetitions per size; the fastest is reported.
        #[arg(long, default_value_t = 3)]
        reps: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[command(flatten)]
        out: OutArg,
    },
}

#[derive(Debug)]
enum CliError {
    Usage(String),
    Lib(Error),
    /// Outputs were written but a fit did not converge.
    NotConverged(String),
}

impl CliError {
    fn io(path: &Path, e: std::io::Error) -> Self {
        CliError::Lib(Error::Io {
            path: path.to_path_buf(),
            source: e,
        })
    }

    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) | CliError::Lib(Error::Config(_)) => 1,
            CliError::NotConverged(_) => 3,
            CliError::Lib(e) if e.is_numeric_error() => 3,
            CliError::Lib(_) => 2,
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Lib(e)
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) | CliError::NotConverged(m) => f.write_str(m),
            CliError::Lib(e) => write!(f, "{e}"),
        }
    }
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::Lib(Error::Config(format!("{}: {e}", path.display()))))
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).expect("serializable");
    std::fs::write(path, text + "\n").map_err(|e| CliError::io(path, e))
}

fn cmd_synth(config: &Path, seed: u64, n_slides: Option<usize>, out: &OutArg) -> Result<(), CliError> {
    let mut cfg: SynthConfig = read_json(config)?;
    if let Some(n) = n_slides {
        cfg.n_slides = n;
    }
    let cohort = synth_cohort(&cfg, seed)?;
    let manifest = write_cohort(&cohort, out.dir()?)?;
    println!("wrote {} slides, manifest {}", cohort.slides.len(), manifest.display());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_train(
    manifest: &Path,
    config: Option<&Path>,
    folds: Option<usize>,
    epochs: Option<usize>,
    hidden: Option<usize>,
    lr: Option<f64>,
    seed: Option<u64>,
    ablate: Option<Ablation>,
    out: &OutArg,
) -> Result<(), CliError> {
    let mut cfg: TrainConfig = match config {
        Some(p) => read_json(p)?,
        None => TrainConfig::default(),
    };
    cfg.n_folds = folds.unwrap_or(cfg.n_folds);
    cfg.epochs = epochs.unwrap_or(cfg.epochs);
    cfg.hidden = hidden.unwrap_or(cfg.hidden);
    cfg.lr = lr.unwrap_or(cfg.lr);
    cfg.seed = seed.unwrap_or(cfg.seed);
    if let Some(a) = ablate {
        (cfg.tie_enabled, cfg.hie_enabled) = match a {
            Ablation::None => (true, true),
            Ablation::NoTie => (false, true),
            Ablation::NoHie => (true, false),
            Ablation::Neither => (false, false),
        };
    }
    cfg.validate()?;
    let cohort = load_cohort(manifest)?;
    let dir = out.dir()?;
    let prepared = prepare_cohort(&cohort, cfg.k_low, cfg.k_high)?;
    let started = Instant::now();
    let cv = cross_validate(&cohort, &prepared, &cfg, Some(&dir.join("checkpoints")))?;
    for f in &cv.folds {
        println!(
            "fold {}: test C-index {:.4} (best epoch {}, val {:.4})",
            f.result.fold, f.result.test_cindex, f.result.best_epoch, f.result.val_cindex
        );
    }
    println!(
        "mean C-index {:.4} ± {:.4} over {} folds in {:.1?}",
        cv.mean,
        cv.std,
        cv.folds.len(),
        started.elapsed()
    );
    write_json(&dir.join("metrics.json"), &cv.metrics_json(&cfg))
}

/// Loads checkpoint and cohort and returns the slides of `split`.
fn load_scored(checkpoint: &Path, manifest: &Path, split: Split) -> Result<(Checkpoint, Cohort, Vec<PreparedSlide>), CliError> {
    let ckpt = load_checkpoint(checkpoint)?;
    let cohort = load_cohort(manifest)?;
    if cohort.d != ckpt.params.config.d_in {
        return Err(Error::Invalid(format!(
            "checkpoint expects d = {}, manifest has d = {}",
            ckpt.params.config.d_in, cohort.d
        ))
        .into());
    }
    let train: TrainConfig = serde_json::from_value(ckpt.meta["train"].clone()).unwrap_or_default();
    let mut prepared = prepare_cohort(&cohort, train.k_low, train.k_high)?;
    if let Split::Test = split {
        let ids: Vec<String> = serde_json::from_value(ckpt.meta["test_slides"].clone())
            .map_err(|_| CliError::Usage("checkpoint records no test split; use --split all".into()))?;
        prepared.retain(|p| ids.contains(&p.slide_id));
        if prepared.len() != ids.len() {
            return Err(Error::Invalid("manifest lacks some of the checkpoint's test slides".into()).into());
        }
    }
    if prepared.is_empty() {
        return Err(Error::Invalid("no slides to score".into()).into());
    }
    Ok((ckpt, cohort, prepared))
}

fn cmd_eval(checkpoint: &Path, manifest: &Path, split: Split, out: &OutArg) -> Result<(), CliError> {
    let (ckpt, _, prepared) = load_scored(checkpoint, manifest, split)?;
    let refs: Vec<&PreparedSlide> = prepared.iter().collect();
    let risks = ipgphormer::train::predict_risks(&refs, &ckpt.params)?;
    let labels: Vec<_> = prepared.iter().map(|p| p.label).collect();
    let cindex = concordance_index(&risks, &labels)?;
    let split_km = median_split_km(&risks, &labels)?;
    let dir = out.dir()?;
    write_km_csv(
        &dir.join("km.csv"),
        &[("high", &split_km.km_high), ("low", &split_km.km_low)],
    )?;
    let slides: Vec<_> = prepared
        .iter()
        .zip(&risks)
        .map(|(p, r)| serde_json::json!({"slide_id": p.slide_id, "risk": r}))
        .collect();
    write_json(
        &dir.join("eval.json"),
        &serde_json::json!({
            "n_slides": prepared.len(),
            "cindex": cindex,
            "median_risk": split_km.median,
            "log_rank": split_km.log_rank,
            "slides": slides,
        }),
    )?;
    println!(
        "C-index {cindex:.4} on {} slides; median split log-rank χ² {:.3}, p = {:.4}",
        prepared.len(),
        split_km.log_rank.statistic,
        split_km.log_rank.p_value
    );
    Ok(())
}

fn cmd_interpret(checkpoint: &Path, manifest: &Path, split: Split, k: usize, out: &OutArg) -> Result<(), CliError> {
    let (ckpt, cohort, prepared) = load_scored(checkpoint, manifest, split)?;
    let dir = out.dir()?;
    let map_dir = dir.join("risk_maps");
    std::fs::create_dir_all(&map_dir).map_err(|e| CliError::io(&map_dir, e))?;
    let mut maps = Vec::with_capacity(prepared.len());
    for p in &prepared {
        let map = patch_risk_map(&ckpt.params, p)?;
        let gap = (map.mean_risk() - map.slide_risk).abs();
        if gap > 1e-12 {
            return Err(Error::Numeric(format!(
                "slide {}: patch risk mean differs from slide risk by {gap:e}",
                map.slide_id
            ))
            .into());
        }
        map.write_csv(&map_dir.join(format!("{}.csv", map.slide_id)))?;
        maps.push(map);
    }
    let pairs: Vec<_> = prepared
        .iter()
        .map(|p| (p, cohort.slide(&p.slide_id).expect("prepared from this cohort")))
        .collect();
    let extreme = select_extreme_patches(&maps, &pairs, &cohort.cell_feature_names, k)?;
    let report = cell_cox_analysis(&extreme)?;
    write_json(&dir.join("cox_report.json"), &report.to_json())?;
    report.write_distribution_csv(&dir.join("feature_distribution.csv"))?;
    for f in &report.features {
        println!("{:<24} γ = {:+.4}  z = {:+.2}  p = {:.3e}", f.name, f.gamma, f.z, f.p);
    }
    if !report.model.converged {
        return Err(CliError::NotConverged(
            "cell-level Cox fit did not converge (possible separation); outputs were written".into(),
        ));
    }
    Ok(())
}

fn cmd_bench(sizes: &[usize], d: usize, reps: usize, seed: u64, out: &OutArg) -> Result<(), CliError> {
    let rows = bench_attention(sizes, d, reps, seed)?;
    let mut body = String::from("n,d,dense_ms,linear_ms\n");
    for r in &rows {
        println!("n = {:>6}: dense {:>10.3} ms, linear {:>8.3} ms", r.n, r.dense_ms, r.linear_ms);
        body.push_str(&format!("{},{},{},{}\n", r.n, r.d, r.dense_ms, r.linear_ms));
    }
    let path = out.dir()?.join("bench_attention.csv");
    std::fs::write(&path, body).map_err(|e| CliError::io(&path, e))
}

fn run(cli: Cli) -> Result<(), CliError> {
    if let Some(t) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build_global()
            .map_err(|e| CliError::Usage(format!("--threads: {e}")))?;
    }
    match &cli.command {
        Command::Synth {
            config,
            seed,
            n_slides,
            out,
        } => cmd_synth(config, *seed, *n_slides, out),
        Command::Train {
            manifest,
            config,
            folds,
            epochs,
            hidden,
            lr,
            seed,
            ablate,
            out,
        } => cmd_train(manifest, config.as_deref(), *folds, *epochs, *hidden, *lr, *seed, *ablate, out),
        Command::Eval {
            checkpoint,
            manifest,
            split,
            out,
        } => cmd_eval(checkpoint, manifest, *split, out),
        Command::Interpret {
            checkpoint,
            manifest,
            split,
            k,
            out,
        } => cmd_interpret(checkpoint, manifest, *split, *k, out),
        Command::BenchAttention {
            sizes,
            d,
            reps,
            seed,
            out,
        } => cmd_bench(sizes, *d, *reps, *seed, out),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
