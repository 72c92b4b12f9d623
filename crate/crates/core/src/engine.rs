//! Diffusion training and editing loops.
//!
//! Training follows the truncated-step recipe: the schedule is built with
//! the full step count T so its coefficients are exact, but training steps
//! are drawn from `Uniform{1..=t_prime}` because inference never corrupts
//! beyond the editing step. Editing corrupts a real sample for `t_prime`
//! steps with the closed-form forward kernel, then walks a strictly
//! increasing timestep sub-sequence back to zero with deterministic DDIM
//! (sigma = 0), applying guidance at each step. Edited samples keep their
//! original label, sector, stock id and date.
//!
//! Per-sample RNG streams are derived from (seed, salt, sample index), so
//! results are bitwise identical for any worker count, and a fresh salt
//! yields a fresh edit of the same data.

use indexmap::IndexMap;
use rand::distributions::Uniform;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::time::Instant;

use crate::data::SequenceBatch;
use crate::denoiser::{Conditions, DenoiserModel, DropMask};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::guidance::{eps_for_step, GuidanceConfig};
use crate::nn::Adam;
use crate::predictor::RegressorModel;
use crate::schedule::{build_schedule, q_sample, Schedule};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainRunConfig {
    /// Full diffusion step count T for the schedule.
    pub t_total: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    /// Editing step; training draws t from `1..=t_prime`.
    pub t_prime: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Probability of replacing each condition with the null vector.
    pub cond_drop_prob: f64,
    pub use_label: bool,
    pub use_industry: bool,
    pub seed: u64,
    /// Evaluate the fixed probe set every this many steps (0 = never).
    pub probe_every: usize,
    /// Probe timesteps are drawn from `1..=probe_t_max` (0 = t_total / 10).
    pub probe_t_max: usize,
}

impl Default for TrainRunConfig {
    fn default() -> Self {
        TrainRunConfig {
            t_total: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
            t_prime: 300,
            epochs: 20,
            batch_size: 64,
            lr: 1e-3,
            cond_drop_prob: 0.1,
            use_label: true,
            use_industry: true,
            seed: 0,
            probe_every: 10,
            probe_t_max: 0,
        }
    }
}

/// One optimizer step of the training log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
    pub wallclock_ms: u64,
    /// Mean loss over the fixed probe set (low-step regime), when sampled.
    pub probe_loss: Option<f64>,
}

#[derive(Debug)]
pub struct TrainDiffusionOutput {
    pub model: DenoiserModel,
    pub sched: Schedule,
    pub history: Vec<StepLog>,
    /// Set when training hit a non-finite loss; `model` then holds the last
    /// good parameters.
    pub diverged_at: Option<usize>,
}

fn diffusion_sample_loss(
    model: &DenoiserModel,
    x0: &Tensor,
    t: usize,
    eps: &Tensor,
    sched: &Schedule,
    conds: Conditions,
    mask: DropMask,
) -> Result<(f64, IndexMap<String, Tensor>)> {
    let x_t = q_sample(x0, t, eps, sched)?;
    let mut g = Graph::new();
    let bind = model.bind(&mut g, true);
    let xn = g.constant(x_t);
    let cond = model.cond_node(&mut g, &bind, t, conds, mask)?;
    let eps_hat = model.eps_node(&mut g, &bind, xn, cond)?;
    let target = g.constant(eps.clone());
    let loss = g.mse(eps_hat, target)?;
    let grads = g.backward(loss)?;
    let value = g.value(loss).item()?;
    Ok((value, bind.named_grads(&grads, &model.params)))
}

fn mean_named(grads: Vec<IndexMap<String, Tensor>>) -> IndexMap<String, Tensor> {
    let n = grads.len() as f64;
    let mut iter = grads.into_iter();
    let mut acc = iter.next().expect("nonempty gradient set");
    for g in iter {
        for (name, t) in g {
            let cur = acc.get(&name).expect("aligned names");
            acc.insert(name, cur.add(&t).expect("aligned shapes"));
        }
    }
    for (_, t) in acc.iter_mut() {
        *t = t.scale(1.0 / n);
    }
    acc
}

/// Fixed (x0, t, eps, conditions) probe triples for comparable loss curves
/// across runs with different training-step ranges.
struct ProbeSet {
    items: Vec<(usize, usize, Tensor, Conditions)>, // (sample idx, t, eps, conds)
}

impl ProbeSet {
    fn draw(source: &SequenceBatch, t_max: usize, seed: u64, count: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(u64::MAX); // never collides with per-step streams
        let idx_dist = Uniform::new(0, source.n());
        let t_dist = Uniform::new_inclusive(1, t_max.max(1));
        let items = (0..count)
            .map(|_| {
                let i = idx_dist.sample(&mut rng);
                let t = t_dist.sample(&mut rng);
                let eps_data: Vec<f64> = (0..source.k * source.d)
                    .map(|_| StandardNormal.sample(&mut rng))
                    .collect();
                let eps = Tensor::new(vec![source.k, source.d], eps_data).expect("probe eps");
                let conds = Conditions {
                    label: Some(source.y[i]),
                    industry: Some(source.meta[i].sector as usize),
                };
                (i, t, eps, conds)
            })
            .collect();
        ProbeSet { items }
    }

    fn loss(&self, model: &DenoiserModel, source: &SequenceBatch, sched: &Schedule) -> Result<f64> {
        let losses: Vec<f64> = self
            .items
            .par_iter()
            .map(|(i, t, eps, conds)| {
                let x_t = q_sample(&source.sample_tensor(*i), *t, eps, sched)?;
                let eps_hat = model.denoise_eps(&x_t, *t, *conds, DropMask::KEEP_ALL)?;
                crate::schedule::diffusion_loss(eps, &eps_hat)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(losses.iter().sum::<f64>() / losses.len() as f64)
    }
}

/// Train the denoiser on the source batch. Non-finite loss aborts with the
/// last good parameters and the divergence step recorded.
pub fn train_diffusion(
    source: &SequenceBatch,
    model: DenoiserModel,
    cfg: &TrainRunConfig,
) -> Result<TrainDiffusionOutput> {
    if source.is_empty() {
        return Err(Error::EmptyInput("diffusion training batch".into()));
    }
    if cfg.t_prime == 0 || cfg.t_prime > cfg.t_total {
        return Err(Error::InvalidArgument(format!(
            "t_prime {} must be in 1..={}",
            cfg.t_prime, cfg.t_total
        )));
    }
    if cfg.batch_size == 0 {
        return Err(Error::InvalidArgument("batch size must be positive".into()));
    }
    if !(0.0..=1.0).contains(&cfg.cond_drop_prob) {
        return Err(Error::InvalidArgument("cond_drop_prob must be in [0,1]".into()));
    }
    let sched = build_schedule(cfg.t_total, cfg.beta_start, cfg.beta_end)?;
    let mut model = model;
    let steps_per_epoch = source.n().div_ceil(cfg.batch_size);
    let total_steps = cfg.epochs * steps_per_epoch;
    let mut opt = Adam::new(cfg.lr);
    let probe_t_max = if cfg.probe_t_max == 0 { (cfg.t_total / 10).max(1) } else { cfg.probe_t_max };
    let probe = if cfg.probe_every > 0 {
        Some(ProbeSet::draw(source, probe_t_max, cfg.seed, 64))
    } else {
        None
    };
    let mut history = Vec::with_capacity(total_steps);
    let started = Instant::now();
    let mut last_good = model.params.clone();

    for step in 0..total_steps {
        let raw: Vec<Result<(f64, IndexMap<String, Tensor>)>> = (0..cfg.batch_size)
            .into_par_iter()
            .map(|slot| {
                let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
                rng.set_stream((step as u64) * cfg.batch_size as u64 + slot as u64);
                let i = rng.sample(Uniform::new(0, source.n()));
                let t = rng.sample(Uniform::new_inclusive(1, cfg.t_prime));
                let eps_data: Vec<f64> = (0..source.k * source.d)
                    .map(|_| StandardNormal.sample(&mut rng))
                    .collect();
                let eps = Tensor::new(vec![source.k, source.d], eps_data)?;
                let mask = DropMask {
                    label: !cfg.use_label || rng.gen::<f64>() < cfg.cond_drop_prob,
                    industry: !cfg.use_industry || rng.gen::<f64>() < cfg.cond_drop_prob,
                };
                let conds = Conditions {
                    label: Some(source.y[i]),
                    industry: Some(source.meta[i].sector as usize),
                };
                diffusion_sample_loss(&model, &source.sample_tensor(i), t, &eps, &sched, conds, mask)
            })
            .collect();
        // numerical blow-up counts as divergence: abort with the last good
        // parameters instead of propagating the overflow
        let diverged = raw.iter().any(|r| matches!(r, Err(Error::NonFinite { .. })));
        let loss = if diverged {
            f64::NAN
        } else {
            let n = raw.len() as f64;
            raw.iter()
                .map(|r| r.as_ref().map(|(l, _)| *l).unwrap_or(f64::NAN))
                .sum::<f64>()
                / n
        };
        if !loss.is_finite() {
            if let Some(err) = raw
                .into_iter()
                .find(|r| matches!(r, Err(e) if !matches!(e, Error::NonFinite { .. })))
            {
                err?;
            }
            model.params = last_good;
            return Ok(TrainDiffusionOutput {
                model,
                sched,
                history,
                diverged_at: Some(step),
            });
        }
        let results: Vec<(f64, IndexMap<String, Tensor>)> =
            raw.into_iter().collect::<Result<Vec<_>>>()?;
        last_good = model.params.clone();
        let grads = mean_named(results.into_iter().map(|(_, g)| g).collect());
        opt.apply(&mut model.params, &grads);

        let probe_loss = match &probe {
            Some(p) if cfg.probe_every > 0 && (step + 1) % cfg.probe_every == 0 => {
                Some(p.loss(&model, source, &sched)?)
            }
            _ => None,
        };
        history.push(StepLog {
            step,
            loss,
            lr: opt.current_lr(),
            wallclock_ms: started.elapsed().as_millis() as u64,
            probe_loss,
        });
    }
    Ok(TrainDiffusionOutput { model, sched, history, diverged_at: None })
}

/// One deterministic DDIM update from `tau_cur` down to `tau_prev`
/// (`tau_prev == 0` returns the denoised estimate itself).
pub fn ddim_step(
    x_cur: &Tensor,
    eps_eff: &Tensor,
    tau_cur: usize,
    tau_prev: usize,
    sched: &Schedule,
) -> Result<Tensor> {
    if tau_prev >= tau_cur || tau_cur > sched.steps() {
        return Err(Error::InvalidArgument(format!(
            "ddim step needs tau_prev < tau_cur <= T, got {tau_prev} >= {tau_cur}"
        )));
    }
    let abar_cur = sched.alpha_bar(tau_cur);
    let x0_hat = x_cur
        .add_scaled(eps_eff, -(1.0 - abar_cur).sqrt())?
        .scale(1.0 / abar_cur.sqrt());
    if tau_prev == 0 {
        return Ok(x0_hat);
    }
    let abar_prev = sched.alpha_bar(tau_prev);
    x0_hat
        .scale(abar_prev.sqrt())
        .add_scaled(eps_eff, (1.0 - abar_prev).sqrt())
}

/// Strictly increasing timestep sub-sequence of length `min(l, t_prime)`
/// ending exactly at `t_prime`, evenly spaced over `[1, t_prime]`.
pub fn tau_subsequence(l: usize, t_prime: usize) -> Result<Vec<usize>> {
    if l == 0 || t_prime == 0 {
        return Err(Error::InvalidArgument("tau sub-sequence needs l, t_prime >= 1".into()));
    }
    let l = l.min(t_prime);
    let taus: Vec<usize> = (1..=l)
        .map(|j| ((j * t_prime) as f64 / l as f64).round() as usize)
        .collect();
    debug_assert!(taus.windows(2).all(|w| w[0] < w[1]) && taus[l - 1] == t_prime);
    Ok(taus)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditRunConfig {
    /// Corruption depth; 0 edits nothing and returns the input unchanged.
    pub t_prime: usize,
    /// DDIM sub-sequence length (clamped per sample to its editing step).
    pub ddim_steps: usize,
    pub guidance: GuidanceConfig,
    pub seed: u64,
    /// Extra stream component; vary per epoch for fresh edits of one batch.
    pub salt: u64,
}

impl Default for EditRunConfig {
    fn default() -> Self {
        EditRunConfig {
            t_prime: 300,
            ddim_steps: 50,
            guidance: GuidanceConfig::default(),
            seed: 0,
            salt: 0,
        }
    }
}

/// Edit every sample of `target`: corrupt to its editing step with the
/// closed-form kernel, then denoise along the DDIM sub-sequence with
/// guidance. Labels and metadata pass through unchanged. `per_sample_t`
/// overrides the uniform editing step (loss-guided assignment).
pub fn edit_samples(
    target: &SequenceBatch,
    model: &DenoiserModel,
    sched: &Schedule,
    cfg: &EditRunConfig,
    predictor: Option<&RegressorModel>,
    per_sample_t: Option<&[usize]>,
) -> Result<SequenceBatch> {
    if let Some(steps) = per_sample_t {
        if steps.len() != target.n() {
            return Err(Error::InvalidArgument(format!(
                "per-sample steps: {} entries for {} samples",
                steps.len(),
                target.n()
            )));
        }
        if let Some(&bad) = steps.iter().find(|&&s| s > sched.steps()) {
            return Err(Error::InvalidArgument(format!(
                "per-sample editing step {bad} exceeds schedule T {}",
                sched.steps()
            )));
        }
    } else if cfg.t_prime > sched.steps() {
        return Err(Error::InvalidArgument(format!(
            "editing step {} exceeds schedule T {}",
            cfg.t_prime,
            sched.steps()
        )));
    }
    if cfg.ddim_steps == 0 {
        return Err(Error::InvalidArgument("ddim_steps must be positive".into()));
    }
    let stream_seed = cfg.seed.wrapping_add(cfg.salt.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    let edited: Vec<Vec<f64>> = (0..target.n())
        .into_par_iter()
        .map(|i| {
            let t_i = per_sample_t.map_or(cfg.t_prime, |s| s[i]);
            let x0 = target.sample_tensor(i);
            if t_i == 0 {
                return Ok(x0.data().to_vec());
            }
            let mut rng = ChaCha8Rng::seed_from_u64(stream_seed);
            rng.set_stream(i as u64);
            let eps_data: Vec<f64> = (0..target.k * target.d)
                .map(|_| StandardNormal.sample(&mut rng))
                .collect();
            let eps = Tensor::new(vec![target.k, target.d], eps_data)?;
            let mut x = q_sample(&x0, t_i, &eps, sched)?;
            let conds = Conditions {
                label: Some(target.y[i]),
                industry: Some(target.meta[i].sector as usize),
            };
            let taus = tau_subsequence(cfg.ddim_steps, t_i)?;
            for idx in (0..taus.len()).rev() {
                let tau_cur = taus[idx];
                let tau_prev = if idx == 0 { 0 } else { taus[idx - 1] };
                let eps_eff =
                    eps_for_step(model, &x, tau_cur, conds, sched, &cfg.guidance, predictor)?;
                x = ddim_step(&x, &eps_eff, tau_cur, tau_prev, sched)?;
            }
            Ok(x.data().to_vec())
        })
        .collect::<Result<Vec<_>>>()?;

    let mut x = Vec::with_capacity(target.x.len());
    for sample in edited {
        x.extend_from_slice(&sample);
    }
    Ok(SequenceBatch {
        k: target.k,
        d: target.d,
        x,
        y: target.y.clone(),
        meta: target.meta.clone(),
        norm: target.norm.clone(),
    })
}

/// Rank-based monotone decreasing map from per-sample training loss to
/// editing step: the lowest-loss sample gets `t_max` (strongest noise), the
/// highest-loss sample `t_min`, linear in fractional rank with tie-averaged
/// ranks, rounded to the nearest step.
pub fn assign_editing_steps(losses: &[f64], t_min: usize, t_max: usize) -> Result<Vec<usize>> {
    if losses.is_empty() {
        return Err(Error::EmptyInput("assign_editing_steps".into()));
    }
    if t_min > t_max {
        return Err(Error::InvalidArgument(format!("t_min {t_min} > t_max {t_max}")));
    }
    if losses.iter().any(|l| !l.is_finite()) {
        return Err(Error::InvalidArgument("losses must be finite".into()));
    }
    let n = losses.len();
    if n == 1 {
        return Ok(vec![((t_min + t_max) as f64 / 2.0).round() as usize]);
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| losses[a].partial_cmp(&losses[b]).unwrap().then(a.cmp(&b)));
    // fractional average ranks over tie groups
    let mut rank = vec![0.0; n];
    let mut pos = 0;
    while pos < n {
        let mut end = pos + 1;
        while end < n && losses[order[end]] == losses[order[pos]] {
            end += 1;
        }
        let avg = (pos + end - 1) as f64 / 2.0;
        for &i in &order[pos..end] {
            rank[i] = avg;
        }
        pos = end;
    }
    let span = (n - 1) as f64;
    Ok(rank
        .iter()
        .map(|r| {
            let v = t_max as f64 + (t_min as f64 - t_max as f64) * r / span;
            v.round() as usize
        })
        .collect())
}
