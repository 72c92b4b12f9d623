//! Factor panels, return-ratio labels, sequence windowing, robust z-score
//! normalization, extreme-label filters, and the random-noise augmentation
//! baseline.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Rectangular per-(stock, day) market panel: close prices and `d` raw factor
/// values per cell, a sector per stock, and an ordered trading calendar.
#[derive(Debug, Clone, PartialEq)]
pub struct FactorPanel {
    /// Trading-day identifiers, strictly increasing.
    pub dates: Vec<u32>,
    pub stock_ids: Vec<u32>,
    /// Sector id per stock, parallel to `stock_ids`.
    pub sectors: Vec<u32>,
    /// Factor count per (stock, day) cell.
    pub d: usize,
    /// Close prices, `[stock][day]` row-major.
    pub close: Vec<f64>,
    /// Factors, `[stock][day][factor]` row-major.
    pub factors: Vec<f64>,
}

impl FactorPanel {
    pub fn n_stocks(&self) -> usize {
        self.stock_ids.len()
    }

    pub fn n_days(&self) -> usize {
        self.dates.len()
    }

    pub fn close_at(&self, stock: usize, day: usize) -> f64 {
        self.close[stock * self.n_days() + day]
    }

    pub fn factor_slice(&self, stock: usize, day: usize) -> &[f64] {
        let base = (stock * self.n_days() + day) * self.d;
        &self.factors[base..base + self.d]
    }

    /// Check the structural invariants: positive prices, ordered dates,
    /// a sector per stock, consistent array lengths.
    pub fn validate(&self) -> Result<()> {
        let (ns, nd) = (self.n_stocks(), self.n_days());
        if ns == 0 || nd == 0 {
            return Err(Error::EmptyInput("panel".into()));
        }
        if self.sectors.len() != ns {
            return Err(Error::InvalidArgument("sector per stock required".into()));
        }
        if self.close.len() != ns * nd || self.factors.len() != ns * nd * self.d {
            return Err(Error::InvalidArgument("panel array lengths inconsistent".into()));
        }
        if !self.dates.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::InvalidArgument("dates must be strictly increasing".into()));
        }
        if self.close.iter().any(|p| !(*p > 0.0) || !p.is_finite()) {
            return Err(Error::InvalidArgument("prices must be positive and finite".into()));
        }
        Ok(())
    }
}

/// Identity of one windowed sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleMeta {
    pub stock_id: u32,
    pub date: u32,
    pub sector: u32,
}

/// Per-factor robust location/scale fitted on the training split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub med: Vec<f64>,
    pub mad: Vec<f64>,
    /// Factors with zero MAD; their normalized values are forced to 0.
    pub constant: Vec<bool>,
}

impl NormStats {
    /// Number of degenerate (constant) factors — the warning record.
    pub fn n_constant(&self) -> usize {
        self.constant.iter().filter(|c| **c).count()
    }
}

/// Windowed training tensors: n samples of shape k x d with aligned labels
/// and metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceBatch {
    pub k: usize,
    pub d: usize,
    /// `[sample][day][factor]` row-major, length `n * k * d`.
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub meta: Vec<SampleMeta>,
    pub norm: Option<NormStats>,
}

impl SequenceBatch {
    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn sample_x(&self, i: usize) -> &[f64] {
        let stride = self.k * self.d;
        &self.x[i * stride..(i + 1) * stride]
    }

    pub fn sample_tensor(&self, i: usize) -> Tensor {
        Tensor::new(vec![self.k, self.d], self.sample_x(i).to_vec()).expect("sample shape")
    }

    /// New batch containing the given sample indices, in order.
    pub fn subset(&self, indices: &[usize]) -> SequenceBatch {
        let stride = self.k * self.d;
        let mut x = Vec::with_capacity(indices.len() * stride);
        let mut y = Vec::with_capacity(indices.len());
        let mut meta = Vec::with_capacity(indices.len());
        for &i in indices {
            x.extend_from_slice(self.sample_x(i));
            y.push(self.y[i]);
            meta.push(self.meta[i]);
        }
        SequenceBatch { k: self.k, d: self.d, x, y, meta, norm: self.norm.clone() }
    }

    /// Concatenate two batches with identical geometry.
    pub fn concat(&self, other: &SequenceBatch) -> Result<SequenceBatch> {
        if self.k != other.k || self.d != other.d {
            return Err(Error::shape(
                "batch concat",
                format!("{}x{} vs {}x{}", self.k, self.d, other.k, other.d),
            ));
        }
        let mut out = self.clone();
        out.x.extend_from_slice(&other.x);
        out.y.extend_from_slice(&other.y);
        out.meta.extend_from_slice(&other.meta);
        Ok(out)
    }
}

/// Forward return ratio over `horizon` days per (stock, day):
/// `(close[t+horizon] - close[t]) / close[t]`. Days without a `t+horizon`
/// successor are excluded (None), not an error.
pub fn compute_return_ratio(panel: &FactorPanel, horizon: usize) -> Vec<Option<f64>> {
    let (ns, nd) = (panel.n_stocks(), panel.n_days());
    let mut out = vec![None; ns * nd];
    for s in 0..ns {
        for t in 0..nd.saturating_sub(horizon) {
            let c0 = panel.close_at(s, t);
            let c1 = panel.close_at(s, t + horizon);
            out[s * nd + t] = Some((c1 - c0) / c0);
        }
    }
    out
}

/// One sample per (stock, day) with at least `k` history days and a valid
/// label at `horizon`; `X[j]` holds factors over days `t-k+1 ..= t`.
pub fn window_sequences(panel: &FactorPanel, k: usize, horizon: usize) -> Result<SequenceBatch> {
    if k == 0 {
        return Err(Error::InvalidArgument("lookback k must be positive".into()));
    }
    panel.validate()?;
    let labels = compute_return_ratio(panel, horizon);
    let (ns, nd, d) = (panel.n_stocks(), panel.n_days(), panel.d);
    let mut x = Vec::new();
    let mut y = Vec::new();
    let mut meta = Vec::new();
    for s in 0..ns {
        for t in (k - 1)..nd {
            let Some(label) = labels[s * nd + t] else { continue };
            for day in (t + 1 - k)..=t {
                x.extend_from_slice(panel.factor_slice(s, day));
            }
            y.push(label);
            meta.push(SampleMeta {
                stock_id: panel.stock_ids[s],
                date: panel.dates[t],
                sector: panel.sectors[s],
            });
        }
    }
    let _ = d;
    Ok(SequenceBatch { k, d: panel.d, x, y, meta, norm: None })
}

fn median(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}

/// Fit per-factor median and median-absolute-deviation over the panel rows
/// whose date passes `in_train`. Statistics never see other rows.
pub fn fit_norm_stats(panel: &FactorPanel, in_train: impl Fn(u32) -> bool) -> Result<NormStats> {
    let (ns, nd, d) = (panel.n_stocks(), panel.n_days(), panel.d);
    let train_days: Vec<usize> = (0..nd).filter(|&t| in_train(panel.dates[t])).collect();
    if train_days.is_empty() {
        return Err(Error::EmptyInput("no training rows for normalization".into()));
    }
    let mut med = vec![0.0; d];
    let mut mad = vec![0.0; d];
    let mut constant = vec![false; d];
    let mut col = Vec::with_capacity(ns * train_days.len());
    for f in 0..d {
        col.clear();
        for s in 0..ns {
            for &t in &train_days {
                col.push(panel.factor_slice(s, t)[f]);
            }
        }
        col.sort_by(|a, b| a.partial_cmp(b).unwrap());
        med[f] = median(&col);
        let mut dev: Vec<f64> = col.iter().map(|v| (v - med[f]).abs()).collect();
        dev.sort_by(|a, b| a.partial_cmp(b).unwrap());
        mad[f] = median(&dev);
        if mad[f] == 0.0 {
            constant[f] = true;
            mad[f] = 1.0;
        }
    }
    Ok(NormStats { med, mad, constant })
}

/// Signed robust z-score `(x - MED) / MAD` per factor column; constant
/// factors map to zero.
pub fn robust_zscore_panel(panel: &FactorPanel, stats: &NormStats) -> Result<FactorPanel> {
    if stats.med.len() != panel.d {
        return Err(Error::shape(
            "robust_zscore",
            format!("stats for {} factors, panel has {}", stats.med.len(), panel.d),
        ));
    }
    let mut out = panel.clone();
    let d = panel.d;
    for chunk in out.factors.chunks_mut(d) {
        for f in 0..d {
            chunk[f] = if stats.constant[f] {
                0.0
            } else {
                (chunk[f] - stats.med[f]) / stats.mad[f]
            };
        }
    }
    Ok(out)
}

/// Batch-level application of the same transform.
pub fn robust_zscore_batch(batch: &SequenceBatch, stats: &NormStats) -> Result<SequenceBatch> {
    if stats.med.len() != batch.d {
        return Err(Error::shape(
            "robust_zscore",
            format!("stats for {} factors, batch has {}", stats.med.len(), batch.d),
        ));
    }
    let mut out = batch.clone();
    let d = batch.d;
    for chunk in out.x.chunks_mut(d) {
        for f in 0..d {
            chunk[f] = if stats.constant[f] {
                0.0
            } else {
                (chunk[f] - stats.med[f]) / stats.mad[f]
            };
        }
    }
    out.norm = Some(stats.clone());
    Ok(out)
}

/// Extreme-label filtering mode: fixed bounds or percentile bounds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum ExtremeMode {
    Threshold { lo: f64, hi: f64 },
    /// Drop labels below the `lo_pct` percentile or above the `hi_pct`
    /// percentile, both in `[0, 100]`.
    Percentile { lo_pct: f64, hi_pct: f64 },
}

/// Remove training samples with out-of-bounds labels; returns the kept batch
/// and the drop count.
pub fn drop_extreme_labels(
    batch: &SequenceBatch,
    mode: ExtremeMode,
) -> Result<(SequenceBatch, usize)> {
    let (lo, hi) = match mode {
        ExtremeMode::Threshold { lo, hi } => {
            if lo > hi {
                return Err(Error::InvalidArgument(format!("inverted bounds ({lo}, {hi})")));
            }
            (lo, hi)
        }
        ExtremeMode::Percentile { lo_pct, hi_pct } => {
            if !(0.0..=100.0).contains(&lo_pct) || !(0.0..=100.0).contains(&hi_pct) || lo_pct > hi_pct
            {
                return Err(Error::InvalidArgument(format!(
                    "bad percentile bounds ({lo_pct}, {hi_pct})"
                )));
            }
            if batch.is_empty() {
                return Err(Error::EmptyInput("drop_extreme_labels".into()));
            }
            let mut sorted = batch.y.clone();
            sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let n = sorted.len();
            let lo_idx = ((n as f64) * lo_pct / 100.0).floor() as usize;
            let hi_idx = (((n as f64) * hi_pct / 100.0).ceil() as usize).saturating_sub(1);
            (sorted[lo_idx.min(n - 1)], sorted[hi_idx.min(n - 1)])
        }
    };
    let keep: Vec<usize> = (0..batch.n()).filter(|&i| batch.y[i] >= lo && batch.y[i] <= hi).collect();
    let dropped = batch.n() - keep.len();
    Ok((batch.subset(&keep), dropped))
}

/// Random Gaussian factor jitter: `X + sigma * N(0, 1)` elementwise, labels
/// and metadata untouched.
pub fn noise_augment_baseline(batch: &SequenceBatch, sigma: f64, seed: u64) -> Result<SequenceBatch> {
    if sigma < 0.0 {
        return Err(Error::InvalidArgument("sigma must be non-negative".into()));
    }
    let mut out = batch.clone();
    if sigma == 0.0 {
        return Ok(out);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for v in out.x.iter_mut() {
        let z: f64 = StandardNormal.sample(&mut rng);
        *v += sigma * z;
    }
    Ok(out)
}

/// Chronological split boundaries: train strictly before `train_end`, valid
/// before `valid_end`, test from `valid_end` on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitBounds {
    pub train_end: u32,
    pub valid_end: u32,
}

impl SplitBounds {
    /// 60/20/20 by position in the calendar.
    pub fn by_fraction(dates: &[u32]) -> SplitBounds {
        let n = dates.len();
        SplitBounds {
            train_end: dates[(n * 6 / 10).min(n - 1)],
            valid_end: dates[(n * 8 / 10).min(n - 1)],
        }
    }
}

/// Partition a batch by sample date into (train, valid, test).
pub fn chrono_split(
    batch: &SequenceBatch,
    bounds: SplitBounds,
) -> (SequenceBatch, SequenceBatch, SequenceBatch) {
    let mut train = Vec::new();
    let mut valid = Vec::new();
    let mut test = Vec::new();
    for i in 0..batch.n() {
        let d = batch.meta[i].date;
        if d < bounds.train_end {
            train.push(i);
        } else if d < bounds.valid_end {
            valid.push(i);
        } else {
            test.push(i);
        }
    }
    (batch.subset(&train), batch.subset(&valid), batch.subset(&test))
}
