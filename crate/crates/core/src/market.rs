//! Synthetic market generation with a planted, SNR-calibrated signal.
//!
//! Prices follow sector-level AR(1) return processes plus idiosyncratic
//! noise plus a planted component: a moving-average of per-(stock, day)
//! signal innovations that spans the full lookback window and label horizon.
//! The signal factor columns expose those innovations (with a small jitter),
//! so the window mean of the signal columns correlates with the forward
//! return ratio at an analytically chosen level:
//!
//! `corr(w . x_bar, y) = sqrt(snr / (1 + snr))`
//!
//! The generator writes the ground-truth weight vector and split boundaries
//! to a sidecar so oracle tests can measure exactly the planted functional.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{FactorPanel, SequenceBatch, SplitBounds};
use crate::error::{Error, Result};

/// Date range (by day index) with a scaled planted SNR.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EasyRegime {
    pub start_day: u32,
    pub end_day: u32,
    pub snr_mult: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarketConfig {
    pub n_stocks: usize,
    pub n_days: usize,
    pub n_sectors: usize,
    /// Total factor columns; the last `n_signal` carry the planted signal.
    pub n_factors: usize,
    pub n_signal: usize,
    /// Planted signal-to-noise ratio of the label-linked factor component.
    pub snr: f64,
    /// Label horizon in days.
    pub horizon: usize,
    /// Lookback window the downstream pipeline will use; the plant is
    /// calibrated against its mean.
    pub lookback: usize,
    /// First `target_stocks` stocks form the editing target subset.
    pub target_stocks: usize,
    pub easy: Option<EasyRegime>,
    pub sector_vol: f64,
    pub idio_vol: f64,
    pub sector_persistence: f64,
    /// Per-column jitter added to signal columns (decorrelates them).
    pub signal_jitter: f64,
}

impl Default for MarketConfig {
    fn default() -> Self {
        MarketConfig {
            n_stocks: 500,
            n_days: 1500,
            n_sectors: 5,
            n_factors: 16,
            n_signal: 4,
            snr: 0.25,
            horizon: 5,
            lookback: 8,
            target_stocks: 100,
            easy: None,
            sector_vol: 0.008,
            idio_vol: 0.012,
            sector_persistence: 0.3,
            signal_jitter: 0.3,
        }
    }
}

/// Generator-known truth written alongside the panel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub seed: u64,
    pub snr: f64,
    /// Weights of the planted functional `w . x_bar` over factor columns.
    pub w: Vec<f64>,
    pub horizon: usize,
    pub lookback: usize,
    pub split: SplitBounds,
    pub target_stocks: u32,
    pub easy: Option<EasyRegime>,
}

/// Per-day plant amplitude solving
/// `corr^2(w . x_bar, y) = snr / (1 + snr)`
/// for the moving-average plant described in the module docs.
fn solve_plant_scale(cfg: &MarketConfig, snr: f64) -> Result<f64> {
    if snr == 0.0 {
        return Ok(0.0);
    }
    let h = cfg.horizon as f64;
    let k = cfg.lookback as f64;
    let l = (cfg.lookback + cfg.horizon - 1) as f64;
    let tau2 = snr / (1.0 + snr);
    let var_f = (1.0 + cfg.signal_jitter.powi(2) / cfg.n_signal as f64) / k;
    // plant weight profile over innovations: trapezoid with plateau h
    let sum_c2 = h * h * (l - h + 1.0) + 2.0 * (1..cfg.horizon).map(|j| (j * j) as f64).sum::<f64>();
    let rho = cfg.sector_persistence;
    let var_sector_sum = cfg.sector_vol.powi(2)
        * (h + 2.0 * (1..cfg.horizon).map(|j| (h - j as f64) * rho.powi(j as i32)).sum::<f64>());
    let v_noise = var_sector_sum + h * cfg.idio_vol.powi(2);
    let denom = h * h - tau2 * var_f * sum_c2;
    if denom <= 0.0 {
        return Err(Error::InvalidArgument(format!(
            "snr {snr} infeasible for lookback {} / horizon {}",
            cfg.lookback, cfg.horizon
        )));
    }
    Ok((tau2 * var_f * v_noise / denom).sqrt())
}

/// Price/volume transform decoy columns, rotated with increasing lags when
/// more are requested than base kinds.
fn decoy_value(kind: usize, lag: usize, day: usize, close: &[f64], volume: &[f64]) -> f64 {
    let t = day - lag;
    let ret = |span: usize| close[t] / close[t - span] - 1.0;
    match kind {
        0 => ret(1),
        1 => ret(5),
        2 => {
            let rets: Vec<f64> = (t - 9..=t).map(|u| close[u] / close[u - 1] - 1.0).collect();
            let mean = rets.iter().sum::<f64>() / 10.0;
            (rets.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / 10.0).sqrt()
        }
        3 => {
            let ma: f64 = volume[t - 4..=t].iter().sum::<f64>() / 5.0;
            (volume[t] / ma).ln()
        }
        4 => {
            let ma: f64 = close[t - 4..=t].iter().sum::<f64>() / 5.0;
            close[t] / ma - 1.0
        }
        5 => {
            let ma: f64 = close[t - 19..=t].iter().sum::<f64>() / 20.0;
            close[t] / ma - 1.0
        }
        6 => ret(2),
        7 => ret(10),
        8 => volume[t] / volume[t - 1] - 1.0,
        _ => ret(3),
    }
}

const DECOY_KINDS: usize = 10;

/// Generate a synthetic factor panel plus its ground-truth sidecar.
pub fn gen_synthetic_market(cfg: &MarketConfig, seed: u64) -> Result<(FactorPanel, GroundTruth)> {
    if cfg.n_stocks == 0 || cfg.n_days == 0 || cfg.n_sectors == 0 {
        return Err(Error::InvalidArgument("market sizes must be positive".into()));
    }
    if cfg.n_signal == 0 || cfg.n_signal > cfg.n_factors {
        return Err(Error::InvalidArgument(format!(
            "n_signal {} must be in 1..={}",
            cfg.n_signal, cfg.n_factors
        )));
    }
    if cfg.horizon == 0 || cfg.lookback == 0 || cfg.target_stocks > cfg.n_stocks {
        return Err(Error::InvalidArgument("bad horizon/lookback/target sizes".into()));
    }
    if cfg.snr < 0.0 {
        return Err(Error::InvalidArgument("snr must be non-negative".into()));
    }
    let phi_base = solve_plant_scale(cfg, cfg.snr)?;
    let phi_easy = match &cfg.easy {
        Some(e) => solve_plant_scale(cfg, cfg.snr * e.snr_mult)?,
        None => phi_base,
    };

    let ma_len = cfg.lookback + cfg.horizon - 1;
    // burn-in covers the plant window and the longest decoy history
    let burn = ma_len + 25 + cfg.n_factors / DECOY_KINDS;
    let total = cfg.n_days + burn;
    let nd = cfg.n_days;
    let d = cfg.n_factors;
    let n_decoy = d - cfg.n_signal;

    // sector AR(1) return paths
    let rho = cfg.sector_persistence;
    let innov_scale = cfg.sector_vol * (1.0 - rho * rho).sqrt();
    let mut sector_paths = Vec::with_capacity(cfg.n_sectors);
    for c in 0..cfg.n_sectors {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(1_000_000 + c as u64);
        let mut path = Vec::with_capacity(total);
        let z0: f64 = StandardNormal.sample(&mut rng);
        let mut s = cfg.sector_vol * z0;
        for _ in 0..total {
            let z: f64 = StandardNormal.sample(&mut rng);
            s = rho * s + innov_scale * z;
            path.push(s);
        }
        sector_paths.push(path);
    }

    let mut close = vec![0.0; cfg.n_stocks * nd];
    let mut factors = vec![0.0; cfg.n_stocks * nd * d];
    let mut sectors = Vec::with_capacity(cfg.n_stocks);

    for j in 0..cfg.n_stocks {
        let sector = (j % cfg.n_sectors) as u32;
        sectors.push(sector);
        let mut rng_sig = ChaCha8Rng::seed_from_u64(seed);
        rng_sig.set_stream(4 * j as u64);
        let mut rng_idio = ChaCha8Rng::seed_from_u64(seed);
        rng_idio.set_stream(4 * j as u64 + 1);
        let mut rng_misc = ChaCha8Rng::seed_from_u64(seed);
        rng_misc.set_stream(4 * j as u64 + 2);
        let mut rng_jit = ChaCha8Rng::seed_from_u64(seed);
        rng_jit.set_stream(4 * j as u64 + 3);

        let zeta: Vec<f64> = (0..total).map(|_| StandardNormal.sample(&mut rng_sig)).collect();

        // log-AR(1) volume around 1e6 shares
        let mut volume = Vec::with_capacity(total);
        let mu_v = (1e6f64).ln();
        let lv0: f64 = StandardNormal.sample(&mut rng_misc);
        let mut lv = mu_v + 0.3 * lv0;
        for _ in 0..total {
            let z: f64 = StandardNormal.sample(&mut rng_misc);
            lv = mu_v + 0.8 * (lv - mu_v) + 0.3 * z;
            volume.push(lv.exp());
        }

        let mut closes_ext = Vec::with_capacity(total);
        let p0: f64 = StandardNormal.sample(&mut rng_misc);
        let mut price = 50.0 * (0.3 * p0).exp();
        closes_ext.push(price);
        let mut running = 0.0; // sum of the last ma_len innovations
        for t in 1..total {
            running += zeta[t - 1];
            if t - 1 >= ma_len {
                running -= zeta[t - 1 - ma_len];
            }
            let exposed = t as i64 - burn as i64;
            let phi = match &cfg.easy {
                Some(e) if exposed >= e.start_day as i64 && exposed < e.end_day as i64 => phi_easy,
                _ => phi_base,
            };
            let zi: f64 = StandardNormal.sample(&mut rng_idio);
            let r = sector_paths[sector as usize][t] + cfg.idio_vol * zi + phi * running;
            price *= 1.0 + r.max(-0.4);
            closes_ext.push(price);
        }

        for t in 0..nd {
            let ext = t + burn;
            close[j * nd + t] = closes_ext[ext];
            let base = (j * nd + t) * d;
            for c in 0..n_decoy {
                factors[base + c] =
                    decoy_value(c % DECOY_KINDS, c / DECOY_KINDS, ext, &closes_ext, &volume);
            }
            for c in 0..cfg.n_signal {
                let jit: f64 = StandardNormal.sample(&mut rng_jit);
                factors[base + n_decoy + c] = zeta[ext] + cfg.signal_jitter * jit;
            }
        }
    }

    let dates: Vec<u32> = (0..nd as u32).collect();
    let panel = FactorPanel {
        dates: dates.clone(),
        stock_ids: (0..cfg.n_stocks as u32).collect(),
        sectors,
        d,
        close,
        factors,
    };
    panel.validate()?;

    let mut w = vec![0.0; d];
    for c in 0..cfg.n_signal {
        w[n_decoy + c] = 1.0 / cfg.n_signal as f64;
    }
    let truth = GroundTruth {
        seed,
        snr: cfg.snr,
        w,
        horizon: cfg.horizon,
        lookback: cfg.lookback,
        split: SplitBounds::by_fraction(&dates),
        target_stocks: cfg.target_stocks as u32,
        easy: cfg.easy,
    };
    Ok((panel, truth))
}

/// Planted linear functional per sample: `w . (mean over window days)`.
pub fn planted_functional(w: &[f64], batch: &SequenceBatch) -> Result<Vec<f64>> {
    if w.len() != batch.d {
        return Err(Error::shape(
            "planted_functional",
            format!("w has {} entries, batch d = {}", w.len(), batch.d),
        ));
    }
    let mut out = Vec::with_capacity(batch.n());
    for i in 0..batch.n() {
        let xs = batch.sample_x(i);
        let mut acc = 0.0;
        for day in 0..batch.k {
            let row = &xs[day * batch.d..(day + 1) * batch.d];
            for (f, wf) in w.iter().enumerate() {
                acc += wf * row[f];
            }
        }
        out.push(acc / batch.k as f64);
    }
    Ok(out)
}

/// Pearson correlation between two slices.
pub fn pearson(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(Error::InvalidArgument("pearson needs two equal slices of len >= 2".into()));
    }
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for (x, y) in a.iter().zip(b.iter()) {
        let (dx, dy) = (x - ma, y - mb);
        cov += dx * dy;
        va += dx * dx;
        vb += dy * dy;
    }
    if va == 0.0 || vb == 0.0 {
        return Err(Error::InvalidArgument("pearson of a constant series".into()));
    }
    Ok(cov / (va * vb).sqrt())
}

/// Restrict a panel to its first `n` stocks (the editing target subset).
pub fn target_subset(panel: &FactorPanel, n: usize) -> Result<FactorPanel> {
    if n == 0 || n > panel.n_stocks() {
        return Err(Error::InvalidArgument(format!(
            "target subset {n} out of 1..={}",
            panel.n_stocks()
        )));
    }
    let nd = panel.n_days();
    Ok(FactorPanel {
        dates: panel.dates.clone(),
        stock_ids: panel.stock_ids[..n].to_vec(),
        sectors: panel.sectors[..n].to_vec(),
        d: panel.d,
        close: panel.close[..n * nd].to_vec(),
        factors: panel.factors[..n * nd * panel.d].to_vec(),
    })
}
