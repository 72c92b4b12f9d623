//! Sectioned key=value run configuration.
//!
//! The file format is plain text: `[section]` headers, `key = value` lines,
//! `#` comments. Unknown sections or keys are rejected so a typo cannot
//! silently fall back to a default. Every field has a documented default
//! (see `RunConfig::default` and the sample config in the repository).

use std::path::Path;

use fd_core::data::ExtremeMode;
use fd_core::denoiser::DenoiserConfig;
use fd_core::engine::{EditRunConfig, TrainRunConfig};
use fd_core::guidance::{GuidanceConfig, GuidanceMode};
use fd_core::market::{EasyRegime, MarketConfig};
use fd_core::predictor::{BackboneKind, RegressorConfig, TrainPredictorConfig};
use fd_core::{Error, Result};

/// How training data is augmented for the downstream predictor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AugmentMode {
    /// Raw data only.
    Off,
    /// One edited copy, fixed across epochs.
    Fixed,
    /// A fresh edited copy every epoch.
    PerEpoch,
    /// Original plus edited, concatenated.
    Union,
    /// Random Gaussian jitter baseline.
    Noise,
}

impl AugmentMode {
    fn parse(v: &str) -> Result<Self> {
        match v {
            "off" => Ok(AugmentMode::Off),
            "fixed" => Ok(AugmentMode::Fixed),
            "per_epoch" => Ok(AugmentMode::PerEpoch),
            "union" => Ok(AugmentMode::Union),
            "noise" => Ok(AugmentMode::Noise),
            _ => Err(Error::Config(format!("unknown augment.mode '{v}'"))),
        }
    }
}

impl std::fmt::Display for AugmentMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            AugmentMode::Off => "off",
            AugmentMode::Fixed => "fixed",
            AugmentMode::PerEpoch => "per_epoch",
            AugmentMode::Union => "union",
            AugmentMode::Noise => "noise",
        };
        write!(f, "{s}")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataSection {
    pub market: MarketConfig,
    pub normalize: bool,
    /// Applied to training labels only.
    pub drop_extreme: Option<ExtremeMode>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalSection {
    pub top_k: usize,
    /// 0 selects the per-day default of N/10.
    pub half_life: f64,
    pub compute_fid: bool,
    /// Optional stop-loss threshold on cumulative price ratio; off when 0.
    pub stop_loss: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AugmentSection {
    pub mode: AugmentMode,
    /// Noise-baseline scale.
    pub sigma: f64,
    pub loss_guided: bool,
    pub t_min: usize,
    pub t_max: usize,
}

/// Complete run configuration; one instance drives every subcommand.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub workers: usize,
    pub data: DataSection,
    pub sched_t_total: usize,
    pub sched_beta_start: f64,
    pub sched_beta_end: f64,
    pub denoiser_width: usize,
    pub denoiser_heads: usize,
    pub denoiser_layers: usize,
    pub denoiser_t_embed_dim: usize,
    pub diffusion: TrainRunConfig,
    pub edit: EditRunConfig,
    pub guidance: GuidanceConfig,
    pub predictor_backbone: BackboneKind,
    pub predictor_hidden: usize,
    pub predictor_width: usize,
    pub predictor_heads: usize,
    pub predictor_layers: usize,
    pub predictor_train: TrainPredictorConfig,
    pub augment: AugmentSection,
    pub eval: EvalSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 7,
            workers: 0,
            data: DataSection {
                market: MarketConfig::default(),
                normalize: true,
                drop_extreme: None,
            },
            sched_t_total: 1000,
            sched_beta_start: 1e-4,
            sched_beta_end: 0.02,
            denoiser_width: 64,
            denoiser_heads: 4,
            denoiser_layers: 6,
            denoiser_t_embed_dim: 64,
            diffusion: TrainRunConfig::default(),
            edit: EditRunConfig::default(),
            guidance: GuidanceConfig::default(),
            predictor_backbone: BackboneKind::Transformer,
            predictor_hidden: 256,
            predictor_width: 64,
            predictor_heads: 4,
            predictor_layers: 2,
            predictor_train: TrainPredictorConfig::default(),
            augment: AugmentSection {
                mode: AugmentMode::Off,
                sigma: 0.1,
                loss_guided: false,
                t_min: 100,
                t_max: 400,
            },
            eval: EvalSection { top_k: 30, half_life: 0.0, compute_fid: true, stop_loss: 0.0 },
        }
    }
}

fn parse_num<T: std::str::FromStr>(section: &str, key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("bad value '{v}' for {section}.{key}")))
}

fn parse_bool(section: &str, key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("bad boolean '{v}' for {section}.{key}"))),
    }
}

impl RunConfig {
    /// Apply one `section.key = value` assignment.
    pub fn set(&mut self, section: &str, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match (section, key) {
            ("run", "seed") => self.seed = parse_num(section, key, v)?,
            ("run", "workers") => self.workers = parse_num(section, key, v)?,

            ("data", "n_stocks") => self.data.market.n_stocks = parse_num(section, key, v)?,
            ("data", "n_days") => self.data.market.n_days = parse_num(section, key, v)?,
            ("data", "n_sectors") => self.data.market.n_sectors = parse_num(section, key, v)?,
            ("data", "n_factors") => self.data.market.n_factors = parse_num(section, key, v)?,
            ("data", "n_signal") => self.data.market.n_signal = parse_num(section, key, v)?,
            ("data", "snr") => self.data.market.snr = parse_num(section, key, v)?,
            ("data", "horizon") => self.data.market.horizon = parse_num(section, key, v)?,
            ("data", "lookback") => self.data.market.lookback = parse_num(section, key, v)?,
            ("data", "target_stocks") => {
                self.data.market.target_stocks = parse_num(section, key, v)?
            }
            ("data", "sector_vol") => self.data.market.sector_vol = parse_num(section, key, v)?,
            ("data", "idio_vol") => self.data.market.idio_vol = parse_num(section, key, v)?,
            ("data", "sector_persistence") => {
                self.data.market.sector_persistence = parse_num(section, key, v)?
            }
            ("data", "signal_jitter") => {
                self.data.market.signal_jitter = parse_num(section, key, v)?
            }
            ("data", "easy_start") => {
                let start: i64 = parse_num(section, key, v)?;
                if start >= 0 {
                    let e = self.data.market.easy.get_or_insert(EasyRegime {
                        start_day: 0,
                        end_day: 0,
                        snr_mult: 1.0,
                    });
                    e.start_day = start as u32;
                } else {
                    self.data.market.easy = None;
                }
            }
            ("data", "easy_end") => {
                let end: i64 = parse_num(section, key, v)?;
                if end >= 0 {
                    let e = self.data.market.easy.get_or_insert(EasyRegime {
                        start_day: 0,
                        end_day: 0,
                        snr_mult: 1.0,
                    });
                    e.end_day = end as u32;
                }
            }
            ("data", "easy_mult") => {
                let m: f64 = parse_num(section, key, v)?;
                if let Some(e) = &mut self.data.market.easy {
                    e.snr_mult = m;
                }
            }
            ("data", "normalize") => self.data.normalize = parse_bool(section, key, v)?,
            ("data", "drop_extreme") => {
                self.data.drop_extreme = match v {
                    "off" => None,
                    "threshold" => Some(ExtremeMode::Threshold { lo: -0.1, hi: 0.1 }),
                    "percentile" => {
                        Some(ExtremeMode::Percentile { lo_pct: 2.5, hi_pct: 97.5 })
                    }
                    _ => return Err(Error::Config(format!("unknown data.drop_extreme '{v}'"))),
                }
            }
            ("data", "drop_lo") => {
                let lo: f64 = parse_num(section, key, v)?;
                match &mut self.data.drop_extreme {
                    Some(ExtremeMode::Threshold { lo: l, .. }) => *l = lo,
                    Some(ExtremeMode::Percentile { lo_pct, .. }) => *lo_pct = lo,
                    None => return Err(Error::Config("set data.drop_extreme first".into())),
                }
            }
            ("data", "drop_hi") => {
                let hi: f64 = parse_num(section, key, v)?;
                match &mut self.data.drop_extreme {
                    Some(ExtremeMode::Threshold { hi: h, .. }) => *h = hi,
                    Some(ExtremeMode::Percentile { hi_pct, .. }) => *hi_pct = hi,
                    None => return Err(Error::Config("set data.drop_extreme first".into())),
                }
            }

            ("schedule", "t_total") => self.sched_t_total = parse_num(section, key, v)?,
            ("schedule", "beta_start") => self.sched_beta_start = parse_num(section, key, v)?,
            ("schedule", "beta_end") => self.sched_beta_end = parse_num(section, key, v)?,

            ("denoiser", "width") => self.denoiser_width = parse_num(section, key, v)?,
            ("denoiser", "heads") => self.denoiser_heads = parse_num(section, key, v)?,
            ("denoiser", "layers") => self.denoiser_layers = parse_num(section, key, v)?,
            ("denoiser", "t_embed_dim") => {
                self.denoiser_t_embed_dim = parse_num(section, key, v)?
            }

            ("diffusion_train", "t_prime") => self.diffusion.t_prime = parse_num(section, key, v)?,
            ("diffusion_train", "epochs") => self.diffusion.epochs = parse_num(section, key, v)?,
            ("diffusion_train", "batch_size") => {
                self.diffusion.batch_size = parse_num(section, key, v)?
            }
            ("diffusion_train", "lr") => self.diffusion.lr = parse_num(section, key, v)?,
            ("diffusion_train", "cond_drop_prob") => {
                self.diffusion.cond_drop_prob = parse_num(section, key, v)?
            }
            ("diffusion_train", "use_label") => {
                self.diffusion.use_label = parse_bool(section, key, v)?
            }
            ("diffusion_train", "use_industry") => {
                self.diffusion.use_industry = parse_bool(section, key, v)?
            }
            ("diffusion_train", "probe_every") => {
                self.diffusion.probe_every = parse_num(section, key, v)?
            }
            ("diffusion_train", "probe_t_max") => {
                self.diffusion.probe_t_max = parse_num(section, key, v)?
            }

            ("edit", "t_prime") => self.edit.t_prime = parse_num(section, key, v)?,
            ("edit", "ddim_steps") => self.edit.ddim_steps = parse_num(section, key, v)?,

            ("guidance", "mode") => {
                self.guidance.mode = match v {
                    "none" => GuidanceMode::None,
                    "predictor" => GuidanceMode::Predictor,
                    "predictor_free" => GuidanceMode::PredictorFree,
                    _ => return Err(Error::Config(format!("unknown guidance.mode '{v}'"))),
                }
            }
            ("guidance", "omega") => self.guidance.omega = parse_num(section, key, v)?,
            ("guidance", "omega_free") => self.guidance.omega_free = parse_num(section, key, v)?,
            ("guidance", "use_label") => self.guidance.use_label = parse_bool(section, key, v)?,
            ("guidance", "use_industry") => {
                self.guidance.use_industry = parse_bool(section, key, v)?
            }

            ("predictor", "backbone") => {
                self.predictor_backbone = match v {
                    "mlp" => BackboneKind::Mlp,
                    "transformer" => BackboneKind::Transformer,
                    _ => return Err(Error::Config(format!("unknown predictor.backbone '{v}'"))),
                }
            }
            ("predictor", "hidden") => self.predictor_hidden = parse_num(section, key, v)?,
            ("predictor", "width") => self.predictor_width = parse_num(section, key, v)?,
            ("predictor", "heads") => self.predictor_heads = parse_num(section, key, v)?,
            ("predictor", "layers") => self.predictor_layers = parse_num(section, key, v)?,
            ("predictor", "epochs") => self.predictor_train.epochs = parse_num(section, key, v)?,
            ("predictor", "batch_size") => {
                self.predictor_train.batch_size = parse_num(section, key, v)?
            }
            ("predictor", "lr") => self.predictor_train.lr = parse_num(section, key, v)?,
            ("predictor", "momentum") => {
                self.predictor_train.momentum = parse_num(section, key, v)?
            }
            ("predictor", "loss_ema_decay") => {
                self.predictor_train.loss_ema_decay = parse_num(section, key, v)?
            }

            ("augment", "mode") => self.augment.mode = AugmentMode::parse(v)?,
            ("augment", "sigma") => self.augment.sigma = parse_num(section, key, v)?,
            ("augment", "loss_guided") => self.augment.loss_guided = parse_bool(section, key, v)?,
            ("augment", "t_min") => self.augment.t_min = parse_num(section, key, v)?,
            ("augment", "t_max") => self.augment.t_max = parse_num(section, key, v)?,

            ("eval", "top_k") => self.eval.top_k = parse_num(section, key, v)?,
            ("eval", "half_life") => self.eval.half_life = parse_num(section, key, v)?,
            ("eval", "compute_fid") => self.eval.compute_fid = parse_bool(section, key, v)?,
            ("eval", "stop_loss") => self.eval.stop_loss = parse_num(section, key, v)?,

            _ => {
                return Err(Error::Config(format!("unknown configuration key {section}.{key}")))
            }
        }
        Ok(())
    }

    /// Parse a sectioned key=value file over the defaults.
    pub fn from_text(text: &str) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        let mut section = String::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if line.starts_with('[') && line.ends_with(']') {
                section = line[1..line.len() - 1].trim().to_string();
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected key = value", lineno + 1))
            })?;
            if section.is_empty() {
                return Err(Error::Config(format!(
                    "line {}: key outside any [section]",
                    lineno + 1
                )));
            }
            cfg.set(&section, key.trim(), value)?;
        }
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_text(&text)
    }

    /// Apply `section.key=value` override strings (CLI `--set`).
    pub fn apply_overrides(&mut self, overrides: &[String]) -> Result<()> {
        for item in overrides {
            let (path, value) = item
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override '{item}' lacks '='")))?;
            let (section, key) = path
                .trim()
                .split_once('.')
                .ok_or_else(|| Error::Config(format!("override '{item}' lacks section.key")))?;
            self.set(section, key, value)?;
        }
        Ok(())
    }

    pub fn denoiser_config(&self) -> DenoiserConfig {
        DenoiserConfig {
            seq_len: self.data.market.lookback,
            input_dim: self.data.market.n_factors,
            width: self.denoiser_width,
            heads: self.denoiser_heads,
            layers: self.denoiser_layers,
            t_embed_dim: self.denoiser_t_embed_dim,
            n_sectors: self.data.market.n_sectors,
            seed: self.seed,
        }
    }

    pub fn regressor_config(&self) -> RegressorConfig {
        RegressorConfig {
            backbone: self.predictor_backbone,
            seq_len: self.data.market.lookback,
            input_dim: self.data.market.n_factors,
            hidden: self.predictor_hidden,
            width: self.predictor_width,
            heads: self.predictor_heads,
            layers: self.predictor_layers,
            seed: self.seed,
        }
    }

    /// Fill cross-section defaults that depend on other fields (seeds, the
    /// schedule carried by training/editing configs).
    pub fn finalize(&mut self) {
        self.diffusion.t_total = self.sched_t_total;
        self.diffusion.beta_start = self.sched_beta_start;
        self.diffusion.beta_end = self.sched_beta_end;
        self.diffusion.seed = self.seed;
        self.edit.seed = self.seed;
        self.edit.guidance = self.guidance;
        self.predictor_train.seed = self.seed;
    }

    /// One-line echo for reports.
    pub fn echo(&self) -> String {
        format!(
            "seed={} market={}x{}d d={} snr={} T={} t_prime={} guidance={} omega_free={} augment={} backbone={}",
            self.seed,
            self.data.market.n_stocks,
            self.data.market.n_days,
            self.data.market.n_factors,
            self.data.market.snr,
            self.sched_t_total,
            self.edit.t_prime,
            self.guidance.mode,
            self.guidance.omega_free,
            self.augment.mode,
            self.predictor_backbone,
        )
    }
}
