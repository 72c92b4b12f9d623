//! Return-ratio regression backbones: an MLP and a transformer regressor.
//!
//! Both map a k x d factor sequence to one scalar and are used twice: as the
//! downstream forecaster whose test IC the experiments report, and as the
//! frozen guidance predictor whose input gradient steers sampling.
//!
//! Training is momentum SGD with cosine decay. Raw and augmented runs share
//! one entry point ([`train_regressor_with`]); the data source is the only
//! difference, which a test pins down by checking that a per-epoch source
//! returning the unchanged batch reproduces the fixed-batch run bitwise.

use std::collections::BTreeMap;

use indexmap::IndexMap;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::SequenceBatch;
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::nn::{
    affine, attention, init_affine, init_attention, init_layer_norm, layer_norm_affine, Bind,
    ParamStore, SgdMomentum,
};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BackboneKind {
    Mlp,
    Transformer,
}

impl std::fmt::Display for BackboneKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            BackboneKind::Mlp => write!(f, "mlp"),
            BackboneKind::Transformer => write!(f, "transformer"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressorConfig {
    pub backbone: BackboneKind,
    pub seq_len: usize,
    pub input_dim: usize,
    /// MLP units per hidden layer.
    pub hidden: usize,
    /// Transformer geometry (ignored by the MLP).
    pub width: usize,
    pub heads: usize,
    pub layers: usize,
    pub seed: u64,
}

impl Default for RegressorConfig {
    fn default() -> Self {
        RegressorConfig {
            backbone: BackboneKind::Transformer,
            seq_len: 8,
            input_dim: 16,
            hidden: 256,
            width: 64,
            heads: 4,
            layers: 2,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct RegressorModel {
    pub cfg: RegressorConfig,
    pub params: ParamStore,
}

impl RegressorModel {
    pub fn new(cfg: RegressorConfig) -> Result<Self> {
        if cfg.seq_len == 0 || cfg.input_dim == 0 {
            return Err(Error::InvalidArgument("regressor input dims must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut p = ParamStore::new();
        match cfg.backbone {
            BackboneKind::Mlp => {
                if cfg.hidden == 0 {
                    return Err(Error::InvalidArgument("mlp hidden width must be positive".into()));
                }
                let flat = cfg.seq_len * cfg.input_dim;
                init_affine(&mut p, "l1", flat, cfg.hidden, &mut rng);
                init_affine(&mut p, "l2", cfg.hidden, cfg.hidden, &mut rng);
                init_affine(&mut p, "head", cfg.hidden, 1, &mut rng);
            }
            BackboneKind::Transformer => {
                if cfg.width == 0 || cfg.width % 2 != 0 {
                    return Err(Error::InvalidArgument("transformer width must be even".into()));
                }
                if cfg.heads == 0 || cfg.width % cfg.heads != 0 || cfg.layers == 0 {
                    return Err(Error::InvalidArgument("bad transformer heads/layers".into()));
                }
                init_affine(&mut p, "token_proj", cfg.input_dim, cfg.width, &mut rng);
                for b in 0..cfg.layers {
                    let pre = format!("block{b}");
                    init_layer_norm(&mut p, &format!("{pre}.ln1"), cfg.width);
                    init_attention(&mut p, &format!("{pre}.attn"), cfg.width, &mut rng);
                    init_layer_norm(&mut p, &format!("{pre}.ln2"), cfg.width);
                    init_affine(&mut p, &format!("{pre}.ffn.l1"), cfg.width, 4 * cfg.width, &mut rng);
                    init_affine(&mut p, &format!("{pre}.ffn.l2"), 4 * cfg.width, cfg.width, &mut rng);
                }
                init_layer_norm(&mut p, "ln_out", cfg.width);
                init_affine(&mut p, "head", cfg.width, 1, &mut rng);
            }
        }
        Ok(RegressorModel { cfg, params: p })
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Bind {
        self.params.bind(g, trainable)
    }

    /// Scalar prediction node ([1,1]) from a [k,d] input node.
    pub fn predict_node(&self, g: &mut Graph, bind: &Bind, x: NodeId) -> Result<NodeId> {
        let shape = g.value(x).shape().to_vec();
        if shape != [self.cfg.seq_len, self.cfg.input_dim] {
            return Err(Error::shape(
                "predict",
                format!("expected [{}, {}], got {:?}", self.cfg.seq_len, self.cfg.input_dim, shape),
            ));
        }
        match self.cfg.backbone {
            BackboneKind::Mlp => {
                let flat = g.reshape(x, vec![1, self.cfg.seq_len * self.cfg.input_dim])?;
                let h = affine(g, bind, "l1", flat)?;
                let h = g.silu(h)?;
                let h = affine(g, bind, "l2", h)?;
                let h = g.silu(h)?;
                affine(g, bind, "head", h)
            }
            BackboneKind::Transformer => {
                let pos = g.constant(crate::denoiser::day_position_encoding(
                    self.cfg.seq_len,
                    self.cfg.width,
                )?);
                let tok = affine(g, bind, "token_proj", x)?;
                let mut h = g.add(tok, pos)?;
                for b in 0..self.cfg.layers {
                    let pre = format!("block{b}");
                    let n1 = layer_norm_affine(g, bind, &format!("{pre}.ln1"), h)?;
                    let a = attention(g, bind, &format!("{pre}.attn"), n1, self.cfg.heads)?;
                    h = g.add(h, a)?;
                    let n2 = layer_norm_affine(g, bind, &format!("{pre}.ln2"), h)?;
                    let f1 = affine(g, bind, &format!("{pre}.ffn.l1"), n2)?;
                    let f1 = g.silu(f1)?;
                    let f2 = affine(g, bind, &format!("{pre}.ffn.l2"), f1)?;
                    h = g.add(h, f2)?;
                }
                let pooled = g.mean_rows(h)?;
                let normed = layer_norm_affine(g, bind, "ln_out", pooled)?;
                affine(g, bind, "head", normed)
            }
        }
    }

    /// Deterministic scalar prediction for one sample.
    pub fn predict(&self, x: &Tensor) -> Result<f64> {
        let mut g = Graph::new();
        let bind = self.bind(&mut g, false);
        let xn = g.constant(x.clone());
        let out = self.predict_node(&mut g, &bind, xn)?;
        g.value(out).item()
    }

    /// Predictions for every sample of a batch, in order.
    pub fn predict_batch(&self, batch: &SequenceBatch) -> Result<Vec<f64>> {
        (0..batch.n())
            .into_par_iter()
            .map(|i| self.predict(&batch.sample_tensor(i)))
            .collect()
    }

    /// Gradient of `(p(x) - y)^2` with respect to the input `x`.
    pub fn grad_x_sq_residual(&self, x: &Tensor, y: f64) -> Result<Tensor> {
        let mut g = Graph::new();
        let bind = self.bind(&mut g, false);
        let xn = g.input(x.clone());
        let pred = self.predict_node(&mut g, &bind, xn)?;
        let target = g.constant(Tensor::new(vec![1, 1], vec![y])?);
        let resid = g.sub(pred, target)?;
        let loss = g.mul(resid, resid)?;
        let loss = g.sum_all(loss)?;
        let grads = g.backward(loss)?;
        Ok(grads.wrt_or_zeros(xn, x.shape()))
    }
}

/// Where training batches come from: a fixed batch, or a fresh batch per
/// epoch (the augmentation path).
pub enum DataSource<'a> {
    Fixed(&'a SequenceBatch),
    PerEpoch(&'a (dyn Fn(usize) -> Result<SequenceBatch> + Sync)),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainPredictorConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    /// Per-sample loss EMA decay across epochs.
    pub loss_ema_decay: f64,
    pub seed: u64,
}

impl Default for TrainPredictorConfig {
    fn default() -> Self {
        TrainPredictorConfig {
            epochs: 30,
            batch_size: 64,
            lr: 5e-3,
            momentum: 0.9,
            loss_ema_decay: 0.9,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_mse: f64,
    pub valid_mse: f64,
}

#[derive(Debug)]
pub struct TrainedRegressor {
    /// Valid-best parameters.
    pub model: RegressorModel,
    /// EMA of per-sample squared error keyed by (stock id, date); feeds
    /// loss-guided editing-step assignment.
    pub per_sample_loss: BTreeMap<(u32, u32), f64>,
    pub history: Vec<EpochStats>,
}

fn sample_loss_and_grads(
    model: &RegressorModel,
    x: &Tensor,
    y: f64,
) -> Result<(f64, IndexMap<String, Tensor>)> {
    let mut g = Graph::new();
    let bind = model.bind(&mut g, true);
    let xn = g.constant(x.clone());
    let pred = model.predict_node(&mut g, &bind, xn)?;
    let target = g.constant(Tensor::new(vec![1, 1], vec![y])?);
    let resid = g.sub(pred, target)?;
    let sq = g.mul(resid, resid)?;
    let loss = g.sum_all(sq)?;
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

/// Mean squared error of the model over a batch.
pub fn batch_mse(model: &RegressorModel, batch: &SequenceBatch) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::EmptyInput("batch_mse".into()));
    }
    let losses: Vec<f64> = (0..batch.n())
        .into_par_iter()
        .map(|i| {
            let p = model.predict(&batch.sample_tensor(i))?;
            let r = p - batch.y[i];
            Ok(r * r)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(losses.iter().sum::<f64>() / losses.len() as f64)
}

/// Train on a fixed batch. See [`train_regressor_with`] for the shared loop.
pub fn train_regressor(
    train: &SequenceBatch,
    valid: &SequenceBatch,
    model_cfg: RegressorConfig,
    cfg: &TrainPredictorConfig,
) -> Result<TrainedRegressor> {
    train_regressor_with(DataSource::Fixed(train), valid, model_cfg, cfg)
}

/// The single training entry point used by raw and augmented runs alike.
pub fn train_regressor_with(
    source: DataSource<'_>,
    valid: &SequenceBatch,
    model_cfg: RegressorConfig,
    cfg: &TrainPredictorConfig,
) -> Result<TrainedRegressor> {
    if cfg.epochs == 0 || cfg.batch_size == 0 {
        return Err(Error::InvalidArgument("epochs and batch size must be positive".into()));
    }
    let mut model = RegressorModel::new(model_cfg)?;
    let first = match &source {
        DataSource::Fixed(b) => (*b).clone(),
        DataSource::PerEpoch(f) => f(0)?,
    };
    if first.is_empty() {
        return Err(Error::EmptyInput("training batch".into()));
    }
    if valid.is_empty() {
        return Err(Error::EmptyInput("validation batch".into()));
    }
    let steps_per_epoch = first.n().div_ceil(cfg.batch_size);
    let mut opt = SgdMomentum::new(cfg.lr, cfg.momentum, cfg.epochs * steps_per_epoch);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut per_sample_loss: BTreeMap<(u32, u32), f64> = BTreeMap::new();
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, ParamStore)> = None;

    for epoch in 0..cfg.epochs {
        let batch = match &source {
            DataSource::Fixed(_) if epoch == 0 => first.clone(),
            DataSource::Fixed(b) => (*b).clone(),
            DataSource::PerEpoch(f) if epoch == 0 => first.clone(),
            DataSource::PerEpoch(f) => f(epoch)?,
        };
        if batch.is_empty() {
            return Err(Error::EmptyInput(format!("training batch at epoch {epoch}")));
        }
        let mut order: Vec<usize> = (0..batch.n()).collect();
        order.shuffle(&mut rng);

        let mut epoch_loss = 0.0;
        let mut seen = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let results: Vec<(f64, IndexMap<String, Tensor>)> = chunk
                .par_iter()
                .map(|&i| sample_loss_and_grads(&model, &batch.sample_tensor(i), batch.y[i]))
                .collect::<Result<Vec<_>>>()?;
            let step_loss: f64 =
                results.iter().map(|(l, _)| *l).sum::<f64>() / results.len() as f64;
            if !step_loss.is_finite() {
                return Err(Error::Diverged { step: epoch * steps_per_epoch + seen / cfg.batch_size });
            }
            epoch_loss += step_loss * chunk.len() as f64;
            seen += chunk.len();
            let grads = mean_named(results.into_iter().map(|(_, g)| g).collect());
            opt.apply(&mut model.params, &grads);
        }
        let train_mse = epoch_loss / seen as f64;

        // end-of-epoch per-sample losses folded into the EMA registry
        let sample_losses: Vec<f64> = (0..batch.n())
            .into_par_iter()
            .map(|i| {
                let p = model.predict(&batch.sample_tensor(i))?;
                let r = p - batch.y[i];
                Ok(r * r)
            })
            .collect::<Result<Vec<_>>>()?;
        for (i, l) in sample_losses.iter().enumerate() {
            let key = (batch.meta[i].stock_id, batch.meta[i].date);
            let entry = per_sample_loss.entry(key).or_insert(*l);
            *entry = cfg.loss_ema_decay * *entry + (1.0 - cfg.loss_ema_decay) * l;
        }

        let valid_mse = batch_mse(&model, valid)?;
        if !valid_mse.is_finite() {
            return Err(Error::Diverged { step: (epoch + 1) * steps_per_epoch });
        }
        history.push(EpochStats { epoch, train_mse, valid_mse });
        if best.as_ref().map_or(true, |(b, _)| valid_mse < *b) {
            best = Some((valid_mse, model.params.clone()));
        }
    }
    if let Some((_, params)) = best {
        model.params = params;
    }
    Ok(TrainedRegressor { model, per_sample_loss, history })
}
