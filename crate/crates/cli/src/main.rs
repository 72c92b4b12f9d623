//! `fd` — synthetic market generation, diffusion training, factor editing,
//! return-ratio forecasting, and evaluation, driven by a sectioned
//! key=value configuration file.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use fd_cli::config::RunConfig;
use fd_cli::pipeline::{self, Workspace};
use fd_core::persist;

#[derive(Parser)]
#[command(
    name = "fd",
    about = "Diffusion-based augmentation for financial factor sequences",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Configuration file (sectioned key=value); defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,

    /// Workspace directory for data, checkpoints and reports
    /// (default: $FD_WORKSPACE or the current directory).
    #[arg(long)]
    workspace: Option<PathBuf>,

    /// Master seed; overrides [run] seed.
    #[arg(long)]
    seed: Option<u64>,

    /// Override any configuration key, e.g. --set edit.t_prime=200
    /// (repeatable).
    #[arg(long = "set", value_name = "SECTION.KEY=VALUE")]
    overrides: Vec<String>,

    /// Worker threads (0 = rayon default); overrides [run] workers.
    #[arg(long)]
    workers: Option<usize>,

    /// Validate configuration and inputs, touch nothing.
    #[arg(long)]
    dry_run: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic market panel and its ground-truth sidecar.
    GenData(Common),
    /// Train the diffusion denoiser on the source universe.
    TrainDiffusion(Common),
    /// Edit the target training split with the trained denoiser.
    Edit {
        #[command(flatten)]
        common: Common,
        /// Editing step override (shorthand for --set edit.t_prime=N).
        #[arg(long)]
        t_prime: Option<usize>,
        /// Output dataset path (default: <workspace>/edited.fdsb).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the return-ratio predictor (augmentation per [augment] mode).
    TrainPredictor(Common),
    /// Score the test split: IC / RankIC / weighted IC, FID, backtest.
    Evaluate {
        #[command(flatten)]
        common: Common,
        /// Edited dataset for the FID column (default: <workspace>/edited.fdsb
        /// when present).
        #[arg(long)]
        edited: Option<PathBuf>,
    },
    /// Run only the daily top-K backtest of the trained predictor.
    Backtest(Common),
    /// Sweep one parameter and emit a flat (param, value, fid, ic, rr) table.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Parameter to sweep: t_prime, omega_free, omega, or sigma.
        #[arg(long)]
        param: String,
        /// Comma-separated values.
        #[arg(long, value_delimiter = ',')]
        values: Vec<f64>,
    },
}

fn resolve(common: &Common) -> fd_core::Result<(RunConfig, Workspace)> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::from_file(path)?,
        None => RunConfig::default(),
    };
    cfg.apply_overrides(&common.overrides)?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(workers) = common.workers {
        cfg.workers = workers;
    }
    cfg.finalize();
    let root = common
        .workspace
        .clone()
        .or_else(|| std::env::var_os("FD_WORKSPACE").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("."));
    if cfg.workers > 0 {
        // ignore the error when a global pool already exists (tests)
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.workers)
            .build_global();
    }
    Ok((cfg, Workspace::new(root)))
}

fn run(cli: Cli) -> fd_core::Result<()> {
    match cli.command {
        Command::GenData(common) => {
            let (cfg, ws) = resolve(&common)?;
            if common.dry_run {
                println!("dry-run ok: would write {:?} and {:?}", ws.panel(), ws.truth());
                return Ok(());
            }
            let (panel, truth) = pipeline::gen_data(&cfg, &ws)?;
            println!(
                "wrote {} ({} stocks x {} days, d={}) and {}",
                ws.panel().display(),
                panel.n_stocks(),
                panel.n_days(),
                panel.d,
                ws.truth().display()
            );
            let _ = truth;
        }
        Command::TrainDiffusion(common) => {
            let (cfg, ws) = resolve(&common)?;
            if common.dry_run {
                println!("dry-run ok: would train on {:?} and write {:?}", ws.panel(), ws.denoiser());
                return Ok(());
            }
            let out = pipeline::train_diffusion_cmd(&cfg, &ws)?;
            let last = out.history.last().map_or(f64::NAN, |s| s.loss);
            println!(
                "trained denoiser for {} steps (final loss {last:.4}); wrote {}",
                out.history.len(),
                ws.denoiser().display()
            );
        }
        Command::Edit { common, t_prime, out } => {
            let (mut cfg, ws) = resolve(&common)?;
            if let Some(tp) = t_prime {
                cfg.edit.t_prime = tp;
            }
            if common.dry_run {
                println!("dry-run ok: would edit at t_prime={}", cfg.edit.t_prime);
                return Ok(());
            }
            let edited = pipeline::edit_cmd(&cfg, &ws, out.as_deref())?;
            println!(
                "edited {} samples at t_prime={}; wrote {}",
                edited.n(),
                cfg.edit.t_prime,
                out.unwrap_or(ws.edited()).display()
            );
        }
        Command::TrainPredictor(common) => {
            let (cfg, ws) = resolve(&common)?;
            if common.dry_run {
                println!("dry-run ok: would train a {} predictor (augment={})", cfg.predictor_backbone, cfg.augment.mode);
                return Ok(());
            }
            let trained = pipeline::train_predictor_cmd(&cfg, &ws)?;
            let best = trained
                .history
                .iter()
                .map(|h| h.valid_mse)
                .fold(f64::INFINITY, f64::min);
            println!(
                "trained predictor over {} epochs (best valid mse {best:.6}); wrote {}",
                trained.history.len(),
                ws.predictor().display()
            );
        }
        Command::Evaluate { common, edited } => {
            let (cfg, ws) = resolve(&common)?;
            if common.dry_run {
                println!("dry-run ok: would evaluate {:?}", ws.predictor());
                return Ok(());
            }
            let edited_batch = pipeline::load_edited_if_present(&ws, edited.as_deref())?;
            let report = pipeline::evaluate_cmd(&cfg, &ws, edited_batch.as_ref())?;
            println!(
                "ic={:.4} rank_ic={:.4} weighted_ic={:.4} fid={} rr={:.4} ir={:.4} ({} samples / {} days); wrote {}",
                report.ic,
                report.rank_ic,
                report.weighted_ic,
                report.fid.map_or("n/a".to_string(), |v| format!("{v:.4}")),
                report.annualized_rr,
                report.information_ratio,
                report.n_samples,
                report.n_days,
                ws.report().display()
            );
        }
        Command::Backtest(common) => {
            let (cfg, ws) = resolve(&common)?;
            if common.dry_run {
                println!("dry-run ok: would backtest {:?}", ws.predictor());
                return Ok(());
            }
            let (panel, truth) = pipeline::load_market(&ws)?;
            let data = pipeline::build_datasets(&cfg, &panel, &truth)?;
            let (model, _) = persist::load_regressor(&ws.predictor())?;
            let preds = model.predict_batch(&data.target_test)?;
            let bt = pipeline::backtest_on(&cfg, &data, &preds)?;
            let json = serde_json::to_string_pretty(&bt).map_err(|e| fd_core::Error::Format {
                what: "backtest".into(),
                detail: e.to_string(),
            })?;
            std::fs::write(ws.backtest(), json)?;
            println!(
                "annualized_rr={:.4} information_ratio={:.4} over {} days{}; wrote {}",
                bt.annualized_rr,
                bt.information_ratio,
                bt.daily.len(),
                if bt.degenerate { " (degenerate)" } else { "" },
                ws.backtest().display()
            );
        }
        Command::Sweep { common, param, values } => {
            let (cfg, ws) = resolve(&common)?;
            if common.dry_run {
                println!("dry-run ok: would sweep {param} over {values:?}");
                return Ok(());
            }
            let rows = pipeline::sweep_cmd(&cfg, &ws, &param, &values)?;
            println!("param,value,fid,ic,annualized_rr");
            for r in &rows {
                println!("{},{},{:.6},{:.6},{:.6}", r.param, r.value, r.fid, r.ic, r.annualized_rr);
            }
            println!("wrote {}", ws.sweep().display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error category={} msg=\"{e}\"", e.category());
            ExitCode::FAILURE
        }
    }
}
