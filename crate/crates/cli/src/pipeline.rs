//! Orchestration shared by the CLI subcommands and the acceptance suite:
//! dataset assembly, training, editing, augmentation sources, evaluation,
//! and parameter sweeps. Everything here is a library function over
//! [`RunConfig`] plus a workspace directory, so tests can drive the same
//! code paths as the binary.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use fd_core::data::{
    chrono_split, drop_extreme_labels, fit_norm_stats, noise_augment_baseline,
    robust_zscore_panel, window_sequences, FactorPanel, NormStats, SequenceBatch,
};
use fd_core::denoiser::DenoiserModel;
use fd_core::engine::{edit_samples, train_diffusion, TrainDiffusionOutput};
use fd_core::error::{Error, Result};
use fd_core::eval::{
    backtest_topk_dropk, frechet_distance, information_coefficient, rank_ic, weighted_ic,
    BacktestReport, EvalReport,
};
use fd_core::guidance::GuidanceMode;
use fd_core::market::{gen_synthetic_market, target_subset, GroundTruth};
use fd_core::persist;
use fd_core::predictor::{
    train_regressor_with, DataSource, RegressorModel, TrainedRegressor,
};
use fd_core::schedule::Schedule;

use crate::config::{AugmentMode, RunConfig};

/// Well-known file names inside a workspace directory.
#[derive(Debug, Clone)]
pub struct Workspace {
    pub root: PathBuf,
}

impl Workspace {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Workspace { root: root.into() }
    }

    pub fn panel(&self) -> PathBuf {
        self.root.join("panel.csv")
    }

    pub fn truth(&self) -> PathBuf {
        self.root.join("panel.meta.json")
    }

    pub fn denoiser(&self) -> PathBuf {
        self.root.join("denoiser.fdck")
    }

    pub fn predictor(&self) -> PathBuf {
        self.root.join("predictor.fdck")
    }

    pub fn losses(&self) -> PathBuf {
        self.root.join("predictor_losses.json")
    }

    pub fn edited(&self) -> PathBuf {
        self.root.join("edited.fdsb")
    }

    pub fn report(&self) -> PathBuf {
        self.root.join("eval_report.json")
    }

    pub fn train_log(&self) -> PathBuf {
        self.root.join("train_log.jsonl")
    }

    pub fn predictor_log(&self) -> PathBuf {
        self.root.join("predictor_log.jsonl")
    }

    pub fn backtest(&self) -> PathBuf {
        self.root.join("backtest.json")
    }

    pub fn sweep(&self) -> PathBuf {
        self.root.join("sweep.csv")
    }
}

/// Generate the synthetic market and write the panel plus its sidecar.
pub fn gen_data(cfg: &RunConfig, ws: &Workspace) -> Result<(FactorPanel, GroundTruth)> {
    let (panel, truth) = gen_synthetic_market(&cfg.data.market, cfg.seed)?;
    persist::save_panel_csv(&panel, &ws.panel())?;
    persist::save_truth(&truth, &ws.truth())?;
    Ok((panel, truth))
}

pub fn load_market(ws: &Workspace) -> Result<(FactorPanel, GroundTruth)> {
    let panel = persist::load_panel_csv(&ws.panel())
        .map_err(|e| wrap_path(e, &ws.panel()))?;
    let truth = persist::load_truth(&ws.truth()).map_err(|e| wrap_path(e, &ws.truth()))?;
    Ok((panel, truth))
}

fn wrap_path(err: Error, path: &Path) -> Error {
    match err {
        Error::Io(e) => Error::Config(format!("{}: {e}", path.display())),
        other => other,
    }
}

/// Windowed, normalized, split datasets shared by the training commands.
#[derive(Debug)]
pub struct Datasets {
    /// Whole-universe training-date windows (diffusion source domain).
    pub source_train: SequenceBatch,
    /// Target-subset training windows with extreme labels dropped.
    pub target_train: SequenceBatch,
    pub target_valid: SequenceBatch,
    pub target_test: SequenceBatch,
    pub stats: Option<NormStats>,
    pub truth: GroundTruth,
    /// Normalized panel (source of realized returns for the backtest).
    pub panel: FactorPanel,
}

/// Assemble datasets from a panel: fit normalization on training dates only,
/// window, split chronologically, and drop extreme labels from the training
/// splits.
pub fn build_datasets(
    cfg: &RunConfig,
    panel: &FactorPanel,
    truth: &GroundTruth,
) -> Result<Datasets> {
    let (normed, stats) = if cfg.data.normalize {
        let stats = fit_norm_stats(panel, |d| d < truth.split.train_end)?;
        (robust_zscore_panel(panel, &stats)?, Some(stats))
    } else {
        (panel.clone(), None)
    };
    let k = truth.lookback;
    let horizon = truth.horizon;
    let source = window_sequences(&normed, k, horizon)?;
    let (mut source_train, _, _) = chrono_split(&source, truth.split);

    let target_panel = target_subset(&normed, truth.target_stocks as usize)?;
    let target = window_sequences(&target_panel, k, horizon)?;
    let (mut target_train, target_valid, target_test) = chrono_split(&target, truth.split);

    if let Some(mode) = cfg.data.drop_extreme {
        source_train = drop_extreme_labels(&source_train, mode)?.0;
        target_train = drop_extreme_labels(&target_train, mode)?.0;
    }
    Ok(Datasets {
        source_train,
        target_train,
        target_valid,
        target_test,
        stats,
        truth: truth.clone(),
        panel: normed,
    })
}

/// Train the denoiser on the source domain and persist checkpoint + log.
pub fn train_diffusion_cmd(cfg: &RunConfig, ws: &Workspace) -> Result<TrainDiffusionOutput> {
    let (panel, truth) = load_market(ws)?;
    let data = build_datasets(cfg, &panel, &truth)?;
    let model = DenoiserModel::new(cfg.denoiser_config())?;
    let out = train_diffusion(&data.source_train, model, &cfg.diffusion)?;
    let final_loss = out.history.last().map_or(f64::NAN, |s| s.loss);
    persist::save_denoiser(
        &out.model,
        &out.sched,
        persist::TrainMeta {
            seed: cfg.seed,
            steps: out.history.len() as u64,
            final_loss,
        },
        &ws.denoiser(),
    )?;
    let mut log = String::new();
    for step in &out.history {
        log.push_str(&serde_json::to_string(step).map_err(|e| Error::Format {
            what: "train log".into(),
            detail: e.to_string(),
        })?);
        log.push('\n');
    }
    std::fs::write(ws.train_log(), log)?;
    if let Some(step) = out.diverged_at {
        return Err(Error::Diverged { step });
    }
    Ok(out)
}

#[derive(Debug, Serialize, Deserialize)]
struct LossEntry {
    stock_id: u32,
    date: u32,
    loss: f64,
}

pub fn save_losses(losses: &BTreeMap<(u32, u32), f64>, path: &Path) -> Result<()> {
    let rows: Vec<LossEntry> = losses
        .iter()
        .map(|(&(stock_id, date), &loss)| LossEntry { stock_id, date, loss })
        .collect();
    let json = serde_json::to_string_pretty(&rows)
        .map_err(|e| Error::Format { what: "losses".into(), detail: e.to_string() })?;
    std::fs::write(path, json)?;
    Ok(())
}

pub fn load_losses(path: &Path) -> Result<BTreeMap<(u32, u32), f64>> {
    let text = std::fs::read_to_string(path).map_err(|e| {
        Error::Config(format!("{}: {e} (train a predictor first for loss guidance)", path.display()))
    })?;
    let rows: Vec<LossEntry> = serde_json::from_str(&text)
        .map_err(|e| Error::Format { what: "losses".into(), detail: e.to_string() })?;
    Ok(rows.into_iter().map(|r| ((r.stock_id, r.date), r.loss)).collect())
}

/// Per-sample editing steps from a loss registry, via rank-based assignment.
pub fn loss_guided_steps(
    batch: &SequenceBatch,
    losses: &BTreeMap<(u32, u32), f64>,
    t_min: usize,
    t_max: usize,
) -> Result<Vec<usize>> {
    let per_sample: Vec<f64> = batch
        .meta
        .iter()
        .map(|m| {
            losses.get(&(m.stock_id, m.date)).copied().ok_or_else(|| {
                Error::InvalidArgument(format!(
                    "no recorded loss for stock {} date {}",
                    m.stock_id, m.date
                ))
            })
        })
        .collect::<Result<Vec<_>>>()?;
    fd_core::engine::assign_editing_steps(&per_sample, t_min, t_max)
}

/// Edit the target training split once and write the `.fdsb` dataset.
pub fn edit_cmd(cfg: &RunConfig, ws: &Workspace, out: Option<&Path>) -> Result<SequenceBatch> {
    let (panel, truth) = load_market(ws)?;
    let data = build_datasets(cfg, &panel, &truth)?;
    let (model, sched, _) =
        persist::load_denoiser(&ws.denoiser()).map_err(|e| wrap_path(e, &ws.denoiser()))?;
    let predictor = load_guidance_predictor(cfg, ws)?;
    let per_sample = if cfg.augment.loss_guided {
        let losses = load_losses(&ws.losses())?;
        Some(loss_guided_steps(&data.target_train, &losses, cfg.augment.t_min, cfg.augment.t_max)?)
    } else {
        None
    };
    let edited = edit_samples(
        &data.target_train,
        &model,
        &sched,
        &cfg.edit,
        predictor.as_ref(),
        per_sample.as_deref(),
    )?;
    persist::save_batch(&edited, out.unwrap_or(&ws.edited()))?;
    Ok(edited)
}

fn load_guidance_predictor(cfg: &RunConfig, ws: &Workspace) -> Result<Option<RegressorModel>> {
    if cfg.guidance.mode != GuidanceMode::Predictor {
        return Ok(None);
    }
    let (model, _) =
        persist::load_regressor(&ws.predictor()).map_err(|e| wrap_path(e, &ws.predictor()))?;
    Ok(Some(model))
}

/// Models and per-sample plans consumed by the augmentation source.
#[derive(Default)]
pub struct AugmentContext<'a> {
    pub denoiser: Option<(&'a DenoiserModel, &'a Schedule)>,
    pub guidance_predictor: Option<&'a RegressorModel>,
    pub per_sample_t: Option<Vec<usize>>,
}

/// Train the downstream predictor with the configured augmentation source.
/// All modes flow through the same training entry point; only the batch
/// source differs.
pub fn train_predictor_cmd(cfg: &RunConfig, ws: &Workspace) -> Result<TrainedRegressor> {
    let (panel, truth) = load_market(ws)?;
    let data = build_datasets(cfg, &panel, &truth)?;
    let needs_denoiser = !matches!(cfg.augment.mode, AugmentMode::Off | AugmentMode::Noise);
    let loaded = if needs_denoiser {
        Some(persist::load_denoiser(&ws.denoiser()).map_err(|e| wrap_path(e, &ws.denoiser()))?)
    } else {
        None
    };
    let guidance_predictor = load_guidance_predictor(cfg, ws)?;
    let per_sample_t = if cfg.augment.loss_guided && needs_denoiser {
        let losses = load_losses(&ws.losses())?;
        Some(loss_guided_steps(
            &data.target_train,
            &losses,
            cfg.augment.t_min,
            cfg.augment.t_max,
        )?)
    } else {
        None
    };
    let ctx = AugmentContext {
        denoiser: loaded.as_ref().map(|(m, s, _)| (m, s)),
        guidance_predictor: guidance_predictor.as_ref(),
        per_sample_t,
    };
    let trained = train_predictor_on(cfg, &data, ctx)?;
    let final_loss = trained.history.last().map_or(f64::NAN, |h| h.valid_mse);
    persist::save_regressor(
        &trained.model,
        persist::TrainMeta {
            seed: cfg.seed,
            steps: trained.history.len() as u64,
            final_loss,
        },
        &ws.predictor(),
    )?;
    save_losses(&trained.per_sample_loss, &ws.losses())?;
    let mut log = String::new();
    for h in &trained.history {
        log.push_str(&serde_json::to_string(h).map_err(|e| Error::Format {
            what: "predictor log".into(),
            detail: e.to_string(),
        })?);
        log.push('\n');
    }
    std::fs::write(ws.predictor_log(), log)?;
    Ok(trained)
}

/// The augmentation-aware trainer used by `train_predictor_cmd` and the
/// acceptance suite (which supplies datasets and models directly).
pub fn train_predictor_on(
    cfg: &RunConfig,
    data: &Datasets,
    ctx: AugmentContext<'_>,
) -> Result<TrainedRegressor> {
    let raw = &data.target_train;
    let model_cfg = cfg.regressor_config();
    let tcfg = &cfg.predictor_train;
    match cfg.augment.mode {
        AugmentMode::Off => {
            train_regressor_with(DataSource::Fixed(raw), &data.target_valid, model_cfg, tcfg)
        }
        AugmentMode::Noise => {
            let base = raw.clone();
            let sigma = cfg.augment.sigma;
            let seed = cfg.seed;
            let source = move |epoch: usize| {
                noise_augment_baseline(&base, sigma, seed.wrapping_add(epoch as u64))
            };
            train_regressor_with(
                DataSource::PerEpoch(&source),
                &data.target_valid,
                model_cfg,
                tcfg,
            )
        }
        AugmentMode::Fixed | AugmentMode::PerEpoch | AugmentMode::Union => {
            let (model, sched) = ctx.denoiser.ok_or_else(|| {
                Error::InvalidArgument(format!(
                    "augment mode {} needs a trained denoiser",
                    cfg.augment.mode
                ))
            })?;
            let mode = cfg.augment.mode;
            let base = raw.clone();
            let edit_cfg = cfg.edit.clone();
            let predictor = ctx.guidance_predictor;
            let per_sample = ctx.per_sample_t;
            let source = move |epoch: usize| -> Result<SequenceBatch> {
                let salt = if mode == AugmentMode::Fixed { 0 } else { epoch as u64 };
                let edited = edit_samples(
                    &base,
                    model,
                    sched,
                    &fd_core::engine::EditRunConfig { salt, ..edit_cfg.clone() },
                    predictor,
                    per_sample.as_deref(),
                )?;
                if mode == AugmentMode::Union {
                    base.concat(&edited)
                } else {
                    Ok(edited)
                }
            };
            train_regressor_with(
                DataSource::PerEpoch(&source),
                &data.target_valid,
                model_cfg,
                tcfg,
            )
        }
    }
}

/// Next-day realized returns per test sample, for the daily backtest.
fn next_day_returns(
    panel: &FactorPanel,
    batch: &SequenceBatch,
) -> (Vec<u32>, Vec<u32>, Vec<usize>) {
    let rr1 = fd_core::data::compute_return_ratio(panel, 1);
    let nd = panel.n_days();
    let mut day_of: BTreeMap<u32, usize> = BTreeMap::new();
    for (i, &d) in panel.dates.iter().enumerate() {
        day_of.insert(d, i);
    }
    let mut stock_of: BTreeMap<u32, usize> = BTreeMap::new();
    for (i, &s) in panel.stock_ids.iter().enumerate() {
        stock_of.insert(s, i);
    }
    let mut days = Vec::new();
    let mut stocks = Vec::new();
    let mut keep = Vec::new();
    for (i, m) in batch.meta.iter().enumerate() {
        let (Some(&ti), Some(&si)) = (day_of.get(&m.date), stock_of.get(&m.stock_id)) else {
            continue;
        };
        if rr1[si * nd + ti].is_some() {
            days.push(m.date);
            stocks.push(m.stock_id);
            keep.push(i);
        }
    }
    (days, stocks, keep)
}

/// Score the test split, compute the metric bundle and the backtest, and
/// optionally the Fréchet distance of an edited set against the raw target
/// training windows.
pub fn evaluate_cmd(
    cfg: &RunConfig,
    ws: &Workspace,
    edited: Option<&SequenceBatch>,
) -> Result<EvalReport> {
    let (panel, truth) = load_market(ws)?;
    let data = build_datasets(cfg, &panel, &truth)?;
    let (model, _) =
        persist::load_regressor(&ws.predictor()).map_err(|e| wrap_path(e, &ws.predictor()))?;
    let report = evaluate_on(cfg, &data, &model, edited)?;
    persist::save_report(&report, &ws.report())?;
    Ok(report)
}

/// Metric computation on prepared datasets (no file IO).
pub fn evaluate_on(
    cfg: &RunConfig,
    data: &Datasets,
    model: &RegressorModel,
    edited: Option<&SequenceBatch>,
) -> Result<EvalReport> {
    let test = &data.target_test;
    if test.is_empty() {
        return Err(Error::EmptyInput("test split".into()));
    }
    let preds = model.predict_batch(test)?;
    let days: Vec<u32> = test.meta.iter().map(|m| m.date).collect();
    let ic = information_coefficient(&preds, &test.y, &days)?;
    let ric = rank_ic(&preds, &test.y, &days)?;
    let half_life = if cfg.eval.half_life > 0.0 { Some(cfg.eval.half_life) } else { None };
    let wic = weighted_ic(&preds, &test.y, &days, half_life)?;

    let fid = match edited {
        Some(e) if cfg.eval.compute_fid => Some(frechet_distance(
            &e.x,
            &data.target_train.x,
            e.k * e.d,
        )?),
        _ => None,
    };

    let bt = backtest_on(cfg, data, &preds)?;
    let n_days = {
        let mut uniq = days.clone();
        uniq.sort_unstable();
        uniq.dedup();
        uniq.len()
    };
    Ok(EvalReport {
        ic,
        rank_ic: ric,
        weighted_ic: wic,
        fid,
        annualized_rr: bt.annualized_rr,
        information_ratio: bt.information_ratio,
        n_days,
        n_samples: test.n(),
        config_echo: cfg.echo(),
    })
}

/// Daily top-K backtest of test-split predictions against next-day returns.
pub fn backtest_on(cfg: &RunConfig, data: &Datasets, preds: &[f64]) -> Result<BacktestReport> {
    let test = &data.target_test;
    let rr1 = fd_core::data::compute_return_ratio(&data.panel, 1);
    let nd = data.panel.n_days();
    let (days, stocks, keep) = next_day_returns(&data.panel, test);
    let kept_preds: Vec<f64> = keep.iter().map(|&i| preds[i]).collect();
    let realized: Vec<f64> = keep
        .iter()
        .map(|&i| {
            let m = &test.meta[i];
            let si = data.panel.stock_ids.iter().position(|&s| s == m.stock_id).unwrap();
            let ti = data.panel.dates.iter().position(|&d| d == m.date).unwrap();
            rr1[si * nd + ti].unwrap()
        })
        .collect();
    let stop = if cfg.eval.stop_loss > 0.0 { Some(cfg.eval.stop_loss) } else { None };
    backtest_topk_dropk(&days, &stocks, &kept_preds, &realized, cfg.eval.top_k, stop)
}

/// One row of a sweep table.
#[derive(Debug, Clone, Serialize)]
pub struct SweepRow {
    pub param: String,
    pub value: f64,
    pub fid: f64,
    pub ic: f64,
    pub annualized_rr: f64,
}

/// Sweep one parameter over several values. For each value the target
/// training split is edited (fixed salt), a fresh predictor is trained on
/// the edited data, and the test metrics plus the edited-vs-raw Fréchet
/// distance are recorded. Emits a flat CSV for plotting.
pub fn sweep_cmd(
    cfg: &RunConfig,
    ws: &Workspace,
    param: &str,
    values: &[f64],
) -> Result<Vec<SweepRow>> {
    if values.is_empty() {
        return Err(Error::InvalidArgument("sweep needs at least one value".into()));
    }
    let (panel, truth) = load_market(ws)?;
    let (model, sched, _) =
        persist::load_denoiser(&ws.denoiser()).map_err(|e| wrap_path(e, &ws.denoiser()))?;
    let mut rows = Vec::with_capacity(values.len());
    for &value in values {
        let mut run = cfg.clone();
        match param {
            "t_prime" => run.edit.t_prime = value as usize,
            "omega_free" => run.guidance.omega_free = value,
            "omega" => run.guidance.omega = value,
            "sigma" => run.augment.sigma = value,
            _ => {
                return Err(Error::InvalidArgument(format!(
                    "unknown sweep parameter '{param}' (t_prime, omega_free, omega, sigma)"
                )))
            }
        }
        run.finalize();
        let data = build_datasets(&run, &panel, &truth)?;
        let predictor = load_guidance_predictor(&run, ws)?;
        let edited = edit_samples(
            &data.target_train,
            &model,
            &sched,
            &run.edit,
            predictor.as_ref(),
            None,
        )?;
        let fid = frechet_distance(&edited.x, &data.target_train.x, edited.k * edited.d)?;
        let cloned = edited.clone();
        let source = move |_epoch: usize| Ok(cloned.clone());
        let trained = train_regressor_with(
            DataSource::PerEpoch(&source),
            &data.target_valid,
            run.regressor_config(),
            &run.predictor_train,
        )?;
        let report = evaluate_on(&run, &data, &trained.model, Some(&edited))?;
        rows.push(SweepRow {
            param: param.to_string(),
            value,
            fid,
            ic: report.ic,
            annualized_rr: report.annualized_rr,
        });
    }
    let mut csv = String::from("param,value,fid,ic,annualized_rr\n");
    for r in &rows {
        csv.push_str(&format!(
            "{},{},{},{},{}\n",
            r.param, r.value, r.fid, r.ic, r.annualized_rr
        ));
    }
    std::fs::write(ws.sweep(), csv)?;
    Ok(rows)
}

/// Load a previously edited dataset if present (for FID in `evaluate`).
pub fn load_edited_if_present(ws: &Workspace, path: Option<&Path>) -> Result<Option<SequenceBatch>> {
    let p = path.map(Path::to_path_buf).unwrap_or(ws.edited());
    if p.exists() {
        Ok(Some(persist::load_batch(&p)?))
    } else {
        Ok(None)
    }
}
