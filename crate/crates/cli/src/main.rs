mod config;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use xmtrans_core::data::{aggregate_time, synthesize_lagged_pair, SynthConfig, WindowSample};
use xmtrans_core::model::{load_checkpoint, model_forward_batch, AblationWiring, ModelConfig, ModelParams};
use xmtrans_core::train::{
    ablation_table, evaluate_horizons, evenly_spaced, export_results, prepare_data, run_ablation, run_experiment,
    save_run, EvalReport, ExperimentSpec, WindowSpec, REPORT_FILE,
};
use xmtrans_core::{Error, Result};

use config::{next_run_id, RunConfig};

#[derive(Parser)]
#[command(name = "xmtrans", version, about = "Cross-modality fusion transformer for two-modality forecasting")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Writes a lag-coupled synthetic pair as tm.csv, sm.csv and centroids.csv.
    Synth(SynthArgs),
    /// Trains every configured seed and writes a run directory.
    Train(TrainArgs),
    /// Scores a checkpoint on the test split and writes report and exports.
    Eval(EvalArgs),
    /// Trains wirings e1 to e4 on the same data and prints the comparison.
    Ablate(AblateArgs),
    /// Writes prediction and attention exports of a checkpoint.
    Export(ExportArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 8)]
    n: usize,
    #[arg(long, default_value_t = 2000)]
    t: usize,
    /// Interval in minutes.
    #[arg(long, default_value_t = 15)]
    r: u32,
    #[arg(long, default_value_t = 4)]
    lag: usize,
    #[arg(long, default_value_t = 0.9)]
    coupling: f64,
    #[arg(long, default_value_t = 0.5)]
    noise: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = ".")]
    out: PathBuf,
}

#[derive(Args)]
struct CommonArgs {
    /// TOML run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Overrides `model.wiring`.
    #[arg(long)]
    wiring: Option<AblationWiring>,
    /// Comma-separated horizons in hours, overriding `horizons`.
    #[arg(long, value_delimiter = ',')]
    horizons: Option<Vec<u32>>,
    /// Overrides the generated run id.
    #[arg(long)]
    run_id: Option<String>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: CommonArgs,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[arg(long, value_delimiter = ',', default_value = "e1,e2,e3,e4")]
    wirings: Vec<AblationWiring>,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Score only fine-region windows.
    #[arg(long, default_value_t = true, action = clap::ArgAction::Set)]
    fine_only: bool,
    /// Output directory; defaults to `eval` next to the checkpoint.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ExportArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Test windows to export; defaults to `export_samples`.
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let usage = e.use_stderr();
            let _ = e.print();
            return if usage { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.command {
        Command::Synth(a) => synth(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Ablate(a) => ablate(a),
        Command::Export(a) => export(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_usage() { 1 } else { 2 })
        }
    }
}

fn synth(a: SynthArgs) -> Result<()> {
    let cfg = SynthConfig::new(a.n, a.t, a.r, a.lag, a.coupling, a.noise, a.seed);
    let (tm, sm) = synthesize_lagged_pair(&cfg).map_err(|e| match e {
        Error::Config(m) => Error::Usage(m),
        e => e,
    })?;
    fs::create_dir_all(&a.out).map_err(|e| Error::Usage(format!("{}: {e}", a.out.display())))?;
    tm.write_csv(&a.out.join("tm.csv"))?;
    sm.write_csv(&a.out.join("sm.csv"))?;
    tm.write_centroids_csv(&a.out.join("centroids.csv"))?;
    println!("{}", a.out.display());
    Ok(())
}

fn load_config(common: &CommonArgs) -> Result<RunConfig> {
    let mut cfg = RunConfig::from_file(&common.config)?;
    cfg.apply_env()?;
    if let Some(w) = common.wiring {
        cfg.experiment.model.wiring = w;
    }
    if let Some(h) = &common.horizons {
        cfg.experiment.horizons = h.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run_dir(cfg: &RunConfig, common: &CommonArgs) -> Result<PathBuf> {
    let id = match &common.run_id {
        Some(id) => id.clone(),
        None => next_run_id(&cfg.paths.out, &cfg.name),
    };
    let dir = cfg.paths.out.join(id);
    if dir.exists() {
        return Err(Error::Usage(format!("run directory {} already exists", dir.display())));
    }
    fs::create_dir_all(&dir).map_err(|e| Error::Usage(format!("{}: {e}", dir.display())))?;
    Ok(dir)
}

fn write_config(dir: &Path, cfg: &RunConfig) -> Result<()> {
    let p = dir.join("config.toml");
    fs::write(&p, cfg.to_toml()?).map_err(|e| Error::Usage(format!("{}: {e}", p.display())))
}

fn train(a: TrainArgs) -> Result<()> {
    let cfg = load_config(&a.common)?;
    let (tm, sm, holidays) = cfg.load_data()?;
    let dir = run_dir(&cfg, &a.common)?;
    write_config(&dir, &cfg)?;
    let run = run_experiment(&tm, &sm, &holidays, &cfg.experiment)?;
    let seed = cfg.experiment.train.seeds[0];
    let data = prepare_data(&tm, &sm, &holidays, &cfg.experiment, seed)?;
    save_run(&dir, &run, &data[0].test, cfg.experiment.export_samples)?;
    print!("{}", run.report.to_table());
    println!("{}", dir.display());
    Ok(())
}

fn ablate(a: AblateArgs) -> Result<()> {
    let cfg = load_config(&a.common)?;
    if a.wirings.iter().any(|w| w.uses_support()) && cfg.paths.sm.is_none() {
        return Err(Error::Config("wirings e3 and e4 need the support series: set paths.sm".into()));
    }
    let (tm, sm, holidays) = cfg.load_data()?;
    let dir = run_dir(&cfg, &a.common)?;
    write_config(&dir, &cfg)?;
    let rows = run_ablation(&tm, &sm, &holidays, &cfg.experiment, &a.wirings)?;
    let p = dir.join("ablation.json");
    fs::write(&p, serde_json::to_string_pretty(&rows)?).map_err(|e| Error::Usage(format!("{}: {e}", p.display())))?;
    print!("{}", ablation_table(&rows));
    println!("{}", dir.display());
    Ok(())
}

/// Every architectural mismatch between checkpoint and config, naming both
/// sides.
fn compatibility(ckpt: &ModelConfig, cfg: &ModelConfig) -> Vec<String> {
    let mut out = Vec::new();
    let mut check = |name: &str, a: String, b: String| {
        if a != b {
            out.push(format!("{name}: checkpoint has {a}, config has {b}"));
        }
    };
    check("d", ckpt.d.to_string(), cfg.d.to_string());
    check("heads", ckpt.heads.to_string(), cfg.heads.to_string());
    check("layers", ckpt.layers.to_string(), cfg.layers.to_string());
    check("wiring", ckpt.wiring.to_string(), cfg.wiring.to_string());
    check("kernel_size", ckpt.kernel_size.to_string(), cfg.kernel_size.to_string());
    check("readout", format!("{:?}", ckpt.readout), format!("{:?}", cfg.readout));
    check(
        "use_te_self_attention",
        ckpt.use_te_self_attention.to_string(),
        cfg.use_te_self_attention.to_string(),
    );
    out
}

/// Checkpoint plus the test windows of its resolution and window length.
fn checkpoint_with_test(common: &CommonArgs, checkpoint: &Path) -> Result<(RunConfig, ModelParams, Vec<WindowSample>)> {
    let mut cfg = RunConfig::from_file(&common.config)?;
    cfg.apply_env()?;
    if let Some(h) = &common.horizons {
        cfg.experiment.horizons = h.clone();
    }
    if let Some(w) = common.wiring {
        cfg.experiment.model.wiring = w;
    }
    let params = load_checkpoint(checkpoint)?;
    let mcfg = params.config.clone();
    let problems = compatibility(&mcfg, &cfg.experiment.model);
    if !problems.is_empty() {
        return Err(Error::Config(format!("{} does not match the config: {}", checkpoint.display(), problems.join("; "))));
    }
    cfg.validate()?;
    let (tm, sm, holidays) = cfg.load_data()?;
    let r = mcfg.interval_minutes;
    let (tm, sm) = if tm.interval_minutes() == r {
        (tm, sm)
    } else {
        (
            aggregate_time(&tm, r, cfg.experiment.tm_aggregation)?,
            aggregate_time(&sm, r, cfg.experiment.sm_aggregation)?,
        )
    };
    let spec = ExperimentSpec {
        tmr: false,
        window: WindowSpec::Steps {
            input_len: mcfg.input_len,
            horizon: mcfg.horizon,
        },
        ..cfg.experiment.clone()
    };
    let mut data = prepare_data(&tm, &sm, &holidays, &spec, mcfg.seed)?;
    let test = data.swap_remove(0).test;
    Ok((cfg, params, test))
}

fn eval(a: EvalArgs) -> Result<()> {
    let (cfg, params, test) = checkpoint_with_test(&a.common, &a.checkpoint)?;
    let exp = &cfg.experiment;
    let scores = evaluate_horizons(&params, &test, &exp.horizons, a.fine_only, exp.train.eval_batch_size)?;
    let report = EvalReport::from_seeds(params.config.interval_minutes, &exp.horizons, vec![scores])?;
    let out = a
        .out
        .unwrap_or_else(|| a.checkpoint.parent().unwrap_or(Path::new(".")).join("eval"));
    let picked = export_picks(&test, a.fine_only, exp.export_samples);
    let bundles = model_forward_batch(&params, &picked)?;
    export_results(&out, &bundles, &picked, Some(&report))?;
    print!("{}", report.to_table());
    println!("{}", out.join(REPORT_FILE).display());
    Ok(())
}

fn export_picks(test: &[WindowSample], fine_only: bool, n: usize) -> Vec<&WindowSample> {
    let pool: Vec<&WindowSample> = test.iter().filter(|s| !(fine_only && s.is_coarse)).collect();
    evenly_spaced(&pool, Some(n))
}

fn export(a: ExportArgs) -> Result<()> {
    let (cfg, params, test) = checkpoint_with_test(&a.common, &a.checkpoint)?;
    let picked = export_picks(&test, true, a.samples.unwrap_or(cfg.experiment.export_samples));
    if picked.is_empty() {
        return Err(Error::Config("no test windows to export".into()));
    }
    let bundles = model_forward_batch(&params, &picked)?;
    for p in export_results(&a.out, &bundles, &picked, None)? {
        println!("{}", p.display());
    }
    Ok(())
}
