//! Forecasting and fidelity metrics: daily cross-sectional IC / RankIC /
//! exponentially weighted IC, the Fréchet distance between Gaussian fits of
//! two sample sets, and the top-K daily-rebalance backtest with annualized
//! return ratio and information ratio.

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::TRADING_DAYS_PER_YEAR;

/// Covariance ridge applied to both sides of the Fréchet computation.
const FRECHET_RIDGE: f64 = 1e-6;

fn weighted_pearson(x: &[f64], y: &[f64], w: &[f64]) -> Option<f64> {
    let sw: f64 = w.iter().sum();
    let mx: f64 = x.iter().zip(w).map(|(v, wi)| v * wi).sum::<f64>() / sw;
    let my: f64 = y.iter().zip(w).map(|(v, wi)| v * wi).sum::<f64>() / sw;
    let mut cov = 0.0;
    let mut vx = 0.0;
    let mut vy = 0.0;
    for ((xi, yi), wi) in x.iter().zip(y).zip(w) {
        let (dx, dy) = (xi - mx, yi - my);
        cov += wi * dx * dy;
        vx += wi * dx * dx;
        vy += wi * dy * dy;
    }
    if vx <= 0.0 || vy <= 0.0 {
        return None;
    }
    Some(cov / (vx * vy).sqrt())
}

fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    let w = vec![1.0; x.len()];
    weighted_pearson(x, y, &w)
}

/// Average ranks (1-based, ties averaged).
fn average_ranks(values: &[f64]) -> Vec<f64> {
    let n = values.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| values[a].partial_cmp(&values[b]).unwrap().then(a.cmp(&b)));
    let mut ranks = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j < n && values[order[j]] == values[order[i]] {
            j += 1;
        }
        let avg = (i + j + 1) as f64 / 2.0;
        for &idx in &order[i..j] {
            ranks[idx] = avg;
        }
        i = j;
    }
    ranks
}

fn group_by_day<'a>(
    preds: &'a [f64],
    labels: &'a [f64],
    days: &'a [u32],
) -> Result<BTreeMap<u32, Vec<usize>>> {
    if preds.len() != labels.len() || preds.len() != days.len() {
        return Err(Error::InvalidArgument("preds/labels/days must be parallel".into()));
    }
    let mut groups: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for (i, &d) in days.iter().enumerate() {
        groups.entry(d).or_default().push(i);
    }
    Ok(groups)
}

fn mean_daily_corr(
    preds: &[f64],
    labels: &[f64],
    days: &[u32],
    per_day: impl Fn(&[f64], &[f64]) -> Option<f64>,
) -> Result<f64> {
    let groups = group_by_day(preds, labels, days)?;
    let mut sum = 0.0;
    let mut n_days = 0usize;
    for idx in groups.values() {
        if idx.len() < 3 {
            continue;
        }
        let p: Vec<f64> = idx.iter().map(|&i| preds[i]).collect();
        let l: Vec<f64> = idx.iter().map(|&i| labels[i]).collect();
        if let Some(c) = per_day(&p, &l) {
            sum += c;
            n_days += 1;
        }
    }
    if n_days == 0 {
        return Err(Error::EmptyInput("no valid days for correlation".into()));
    }
    Ok(sum / n_days as f64)
}

/// Mean daily cross-sectional Pearson correlation. Days with fewer than
/// three stocks or a constant side are excluded.
pub fn information_coefficient(preds: &[f64], labels: &[f64], days: &[u32]) -> Result<f64> {
    mean_daily_corr(preds, labels, days, |p, l| pearson(p, l))
}

/// Mean daily Spearman correlation with average ranks for ties.
pub fn rank_ic(preds: &[f64], labels: &[f64], days: &[u32]) -> Result<f64> {
    mean_daily_corr(preds, labels, days, |p, l| {
        pearson(&average_ranks(p), &average_ranks(l))
    })
}

/// Exponentially weighted IC: per day, stocks sorted by descending
/// prediction get weight `0.5^(rank / half_life)` and contribute through a
/// weighted Pearson correlation. `half_life = None` uses N/10 per day.
pub fn weighted_ic(
    preds: &[f64],
    labels: &[f64],
    days: &[u32],
    half_life: Option<f64>,
) -> Result<f64> {
    if let Some(h) = half_life {
        if h <= 0.0 {
            return Err(Error::InvalidArgument("half life must be positive".into()));
        }
    }
    mean_daily_corr(preds, labels, days, |p, l| {
        let n = p.len();
        let h = half_life.unwrap_or((n as f64 / 10.0).max(1.0));
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| p[b].partial_cmp(&p[a]).unwrap().then(a.cmp(&b)));
        let mut w = vec![0.0; n];
        for (rank, &i) in order.iter().enumerate() {
            w[i] = 0.5f64.powf(rank as f64 / h);
        }
        weighted_pearson(p, l, &w)
    })
}

fn mean_and_cov(data: &[f64], dim: usize) -> (DMatrix<f64>, DMatrix<f64>) {
    let n = data.len() / dim;
    let mut mean = vec![0.0; dim];
    for row in data.chunks(dim) {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    for m in mean.iter_mut() {
        *m /= n as f64;
    }
    let mut cov = DMatrix::zeros(dim, dim);
    for row in data.chunks(dim) {
        for i in 0..dim {
            let di = row[i] - mean[i];
            for j in i..dim {
                cov[(i, j)] += di * (row[j] - mean[j]);
            }
        }
    }
    for i in 0..dim {
        for j in i..dim {
            let v = cov[(i, j)] / (n - 1) as f64;
            cov[(i, j)] = v;
            cov[(j, i)] = v;
        }
        cov[(i, i)] += FRECHET_RIDGE;
    }
    (DMatrix::from_vec(dim, 1, mean), cov)
}

fn sqrt_psd(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(m.clone());
    let vals = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose()
}

/// Squared 2-Wasserstein distance between Gaussian fits of two sample sets
/// of `dim`-vectors:
/// `|mu_a - mu_b|^2 + tr(Sa + Sb - 2 (Sa Sb)^(1/2))`,
/// with the cross square root computed through the symmetric form
/// `Sa^(1/2) Sb Sa^(1/2)`.
pub fn frechet_distance(a: &[f64], b: &[f64], dim: usize) -> Result<f64> {
    if dim == 0 || a.len() % dim != 0 || b.len() % dim != 0 {
        return Err(Error::InvalidArgument("frechet inputs must be flat dim-vectors".into()));
    }
    let (na, nb) = (a.len() / dim, b.len() / dim);
    if na <= dim || nb <= dim {
        return Err(Error::InvalidArgument(format!(
            "need more than {dim} samples per side for a rank-{dim} covariance, got {na} and {nb}"
        )));
    }
    let (mu_a, cov_a) = mean_and_cov(a, dim);
    let (mu_b, cov_b) = mean_and_cov(b, dim);
    let diff = &mu_a - &mu_b;
    let mean_term = diff.dot(&diff);
    let root_a = sqrt_psd(&cov_a);
    let inner = &root_a * &cov_b * &root_a;
    let eig = SymmetricEigen::new(inner);
    let tr_cross: f64 = eig.eigenvalues.iter().map(|l| l.max(0.0).sqrt()).sum();
    Ok(mean_term + cov_a.trace() + cov_b.trace() - 2.0 * tr_cross)
}

/// One backtest day: portfolio and benchmark simple returns.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BacktestDay {
    pub day: u32,
    pub portfolio: f64,
    pub benchmark: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BacktestReport {
    pub annualized_rr: f64,
    pub information_ratio: f64,
    /// True when excess returns have zero variance (IR reported as 0).
    pub degenerate: bool,
    pub daily: Vec<BacktestDay>,
}

/// Daily top-K rebalance: hold the K stocks with the highest predictions
/// (ties broken by ascending stock id), equal-weighted; the day's portfolio
/// return is the mean of the held stocks' next-period realized returns, and
/// the benchmark is the equal-weight universe. The drop rule with drop
/// count equal to K collapses to exact top-K replacement, which is what is
/// implemented. `stop_loss` optionally force-exits a held position whose
/// cumulative price ratio since entry falls below the threshold (off by
/// default; inert otherwise).
pub fn backtest_topk_dropk(
    days: &[u32],
    stocks: &[u32],
    preds: &[f64],
    realized: &[f64],
    k: usize,
    stop_loss: Option<f64>,
) -> Result<BacktestReport> {
    if days.len() != stocks.len() || days.len() != preds.len() || days.len() != realized.len() {
        return Err(Error::InvalidArgument("backtest inputs must be parallel arrays".into()));
    }
    if k == 0 {
        return Err(Error::InvalidArgument("k must be positive".into()));
    }
    let mut by_day: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for (i, &d) in days.iter().enumerate() {
        by_day.entry(d).or_default().push(i);
    }
    if by_day.is_empty() {
        return Err(Error::EmptyInput("backtest".into()));
    }
    // cumulative price ratio since entry per held stock (stop-loss state)
    let mut held: BTreeMap<u32, f64> = BTreeMap::new();
    let mut daily = Vec::with_capacity(by_day.len());
    for (&day, idx) in &by_day {
        if idx.len() < k {
            return Err(Error::InvalidArgument(format!(
                "k = {k} exceeds universe of {} stocks on day {day}",
                idx.len()
            )));
        }
        let mut order: Vec<usize> = idx.clone();
        order.sort_by(|&a, &b| {
            preds[b]
                .partial_cmp(&preds[a])
                .unwrap()
                .then(stocks[a].cmp(&stocks[b]))
        });
        let mut today: Vec<usize> = order[..k].to_vec();
        if let Some(thr) = stop_loss {
            today.retain(|&i| held.get(&stocks[i]).map_or(true, |ratio| *ratio >= thr));
        }
        let portfolio = if today.is_empty() {
            0.0
        } else {
            today.iter().map(|&i| realized[i]).sum::<f64>() / today.len() as f64
        };
        let benchmark = idx.iter().map(|&i| realized[i]).sum::<f64>() / idx.len() as f64;
        daily.push(BacktestDay { day, portfolio, benchmark });

        let kept: BTreeMap<u32, f64> = today
            .iter()
            .map(|&i| {
                let prev = held.get(&stocks[i]).copied().unwrap_or(1.0);
                (stocks[i], prev * (1.0 + realized[i]))
            })
            .collect();
        held = kept;
    }
    let n = daily.len() as f64;
    let mean_port: f64 = daily.iter().map(|d| d.portfolio).sum::<f64>() / n;
    let excess: Vec<f64> = daily.iter().map(|d| d.portfolio - d.benchmark).collect();
    let mean_ex: f64 = excess.iter().sum::<f64>() / n;
    let var_ex: f64 = if daily.len() > 1 {
        excess.iter().map(|e| (e - mean_ex) * (e - mean_ex)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    let degenerate = var_ex == 0.0;
    let information_ratio = if degenerate {
        0.0
    } else {
        mean_ex / var_ex.sqrt() * TRADING_DAYS_PER_YEAR.sqrt()
    };
    Ok(BacktestReport {
        annualized_rr: mean_port * TRADING_DAYS_PER_YEAR,
        information_ratio,
        degenerate,
        daily,
    })
}

/// Full metric bundle for one experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub ic: f64,
    pub rank_ic: f64,
    pub weighted_ic: f64,
    pub fid: Option<f64>,
    pub annualized_rr: f64,
    pub information_ratio: f64,
    pub n_days: usize,
    pub n_samples: usize,
    /// Echo of the configuration that produced this report.
    pub config_echo: String,
}
