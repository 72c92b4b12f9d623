//! Named parameters, shared layer builders, optimizers, and the
//! finite-difference gradient checker.

use indexmap::IndexMap;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::graph::{Gradients, Graph, NodeId};
use crate::tensor::Tensor;

/// Ordered collection of named trainable tensors. Insertion order is fixed by
/// model construction, so iteration (and thus serialization and optimizer
/// updates) is deterministic.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    entries: IndexMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        let name = name.into();
        debug_assert!(!self.entries.contains_key(&name), "duplicate param {name}");
        self.entries.insert(name, t);
    }

    pub fn get(&self, name: &str) -> &Tensor {
        self.entries
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn set(&mut self, name: &str, t: Tensor) {
        debug_assert_eq!(self.get(name).shape(), t.shape());
        self.entries.insert(name.to_string(), t);
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.entries.iter()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total scalar count across all parameters.
    pub fn numel(&self) -> usize {
        self.entries.values().map(Tensor::numel).sum()
    }

    /// Add one element of one parameter; used by the gradient checker.
    pub fn perturb(&mut self, name: &str, index: usize, delta: f64) {
        let t = self.get(name);
        let mut data = t.data().to_vec();
        data[index] += delta;
        let shape = t.shape().to_vec();
        self.entries
            .insert(name.to_string(), Tensor::new(shape, data).expect("perturb"));
    }

    /// Add every parameter to `g` as a leaf and return the name -> node map.
    /// Trainable binds produce tracked inputs; constant binds are cheaper and
    /// used for inference and loss-only evaluation.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Bind {
        let mut ids = IndexMap::with_capacity(self.entries.len());
        for (name, t) in &self.entries {
            let id = if trainable {
                g.input(t.clone())
            } else {
                g.constant(t.clone())
            };
            ids.insert(name.clone(), id);
        }
        Bind { ids }
    }
}

/// Name -> [`NodeId`] map for one graph build.
#[derive(Debug)]
pub struct Bind {
    ids: IndexMap<String, NodeId>,
}

impl Bind {
    pub fn id(&self, name: &str) -> NodeId {
        *self
            .ids
            .get(name)
            .unwrap_or_else(|| panic!("parameter {name} not bound"))
    }

    /// Gradients per parameter name, with zeros for parameters that do not
    /// reach the loss.
    pub fn named_grads(&self, grads: &Gradients, store: &ParamStore) -> IndexMap<String, Tensor> {
        self.ids
            .iter()
            .map(|(name, &id)| {
                let shape = store.get(name).shape();
                (name.clone(), grads.wrt_or_zeros(id, shape))
            })
            .collect()
    }
}

/// Gaussian-initialized tensor with the given standard deviation.
pub fn randn(shape: &[usize], std: f64, rng: &mut impl Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| std * rng.sample::<f64, _>(StandardNormal))
        .collect();
    Tensor::new(shape.to_vec(), data).expect("randn")
}

/// Insert `{prefix}.w` ([in, out], fan-in scaled) and `{prefix}.b` ([out], zero).
pub fn init_affine(store: &mut ParamStore, prefix: &str, inp: usize, out: usize, rng: &mut impl Rng) {
    let std = 1.0 / (inp as f64).sqrt();
    store.insert(format!("{prefix}.w"), randn(&[inp, out], std, rng));
    store.insert(format!("{prefix}.b"), Tensor::zeros(&[out]));
}

/// Insert a zero affine map; its output is identically zero until trained.
pub fn init_affine_zero(store: &mut ParamStore, prefix: &str, inp: usize, out: usize) {
    store.insert(format!("{prefix}.w"), Tensor::zeros(&[inp, out]));
    store.insert(format!("{prefix}.b"), Tensor::zeros(&[out]));
}

/// x @ {prefix}.w + {prefix}.b
pub fn affine(g: &mut Graph, bind: &Bind, prefix: &str, x: NodeId) -> Result<NodeId> {
    let y = g.matmul(x, bind.id(&format!("{prefix}.w")))?;
    g.add(y, bind.id(&format!("{prefix}.b")))
}

/// Layer norm over the last axis followed by the learned affine
/// `{prefix}.g`, `{prefix}.b`.
pub fn layer_norm_affine(g: &mut Graph, bind: &Bind, prefix: &str, x: NodeId) -> Result<NodeId> {
    let n = g.layer_norm(x, crate::LAYER_NORM_EPS)?;
    let scaled = g.mul(n, bind.id(&format!("{prefix}.g")))?;
    g.add(scaled, bind.id(&format!("{prefix}.b")))
}

pub fn init_layer_norm(store: &mut ParamStore, prefix: &str, width: usize) {
    store.insert(format!("{prefix}.g"), Tensor::ones(&[width]));
    store.insert(format!("{prefix}.b"), Tensor::zeros(&[width]));
}

pub fn init_attention(store: &mut ParamStore, prefix: &str, width: usize, rng: &mut impl Rng) {
    for part in ["q", "v", "o"] {
        init_affine(store, &format!("{prefix}.{part}"), width, width, rng);
    }
    // No key bias: a shared shift on every key moves each score row by a
    // constant, which softmax discards, so the parameter would be inert.
    let std = 1.0 / (width as f64).sqrt();
    store.insert(format!("{prefix}.k.w"), randn(&[width, width], std, rng));
}

/// Multi-head self-attention over a [tokens, width] sequence.
pub fn attention(
    g: &mut Graph,
    bind: &Bind,
    prefix: &str,
    x: NodeId,
    heads: usize,
) -> Result<NodeId> {
    let width = g.value(x).shape()[1];
    if width % heads != 0 {
        return Err(Error::InvalidArgument(format!(
            "width {width} not divisible by {heads} heads"
        )));
    }
    let dh = width / heads;
    let q = affine(g, bind, &format!("{prefix}.q"), x)?;
    let k = g.matmul(x, bind.id(&format!("{prefix}.k.w")))?;
    let v = affine(g, bind, &format!("{prefix}.v"), x)?;
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = g.narrow(q, 1, h * dh, dh)?;
        let kh = g.narrow(k, 1, h * dh, dh)?;
        let vh = g.narrow(v, 1, h * dh, dh)?;
        let kt = g.transpose(kh)?;
        let scores = g.matmul(qh, kt)?;
        let scores = g.scale(scores, 1.0 / (dh as f64).sqrt())?;
        let attn = g.softmax_last(scores)?;
        outs.push(g.matmul(attn, vh)?);
    }
    let cat = g.concat(1, &outs)?;
    affine(g, bind, &format!("{prefix}.o"), cat)
}

// ── Optimizers ───────────────────────────────────────────────────────

/// Momentum SGD with cosine learning-rate decay over a fixed horizon.
#[derive(Debug)]
pub struct SgdMomentum {
    base_lr: f64,
    momentum: f64,
    total_steps: usize,
    step: usize,
    velocity: IndexMap<String, Vec<f64>>,
}

impl SgdMomentum {
    pub fn new(base_lr: f64, momentum: f64, total_steps: usize) -> Self {
        SgdMomentum {
            base_lr,
            momentum,
            total_steps: total_steps.max(1),
            step: 0,
            velocity: IndexMap::new(),
        }
    }

    pub fn current_lr(&self) -> f64 {
        let frac = (self.step as f64 / self.total_steps as f64).min(1.0);
        self.base_lr * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos())
    }

    pub fn apply(&mut self, store: &mut ParamStore, grads: &IndexMap<String, Tensor>) {
        let lr = self.current_lr();
        for (name, grad) in grads {
            let v = self
                .velocity
                .entry(name.clone())
                .or_insert_with(|| vec![0.0; grad.numel()]);
            let cur = store.get(name);
            let mut data = cur.data().to_vec();
            for (i, g) in grad.data().iter().enumerate() {
                v[i] = self.momentum * v[i] + g;
                data[i] -= lr * v[i];
            }
            let shape = cur.shape().to_vec();
            store.set(name, Tensor::new(shape, data).expect("sgd update"));
        }
        self.step += 1;
    }
}

/// Adam with fixed hyperparameters; used for denoiser training.
#[derive(Debug)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: usize,
    m: IndexMap<String, Vec<f64>>,
    v: IndexMap<String, Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: IndexMap::new(),
            v: IndexMap::new(),
        }
    }

    pub fn current_lr(&self) -> f64 {
        self.lr
    }

    pub fn apply(&mut self, store: &mut ParamStore, grads: &IndexMap<String, Tensor>) {
        self.step += 1;
        let t = self.step as f64;
        let bc1 = 1.0 - self.beta1.powf(t);
        let bc2 = 1.0 - self.beta2.powf(t);
        for (name, grad) in grads {
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| vec![0.0; grad.numel()]);
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| vec![0.0; grad.numel()]);
            let cur = store.get(name);
            let mut data = cur.data().to_vec();
            for (i, g) in grad.data().iter().enumerate() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                data[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
            let shape = cur.shape().to_vec();
            store.set(name, Tensor::new(shape, data).expect("adam update"));
        }
    }
}

// ── Finite-difference gradient check ─────────────────────────────────

/// Compare analytic gradients of a scalar loss against central differences
/// over every element of every parameter in `store`.
///
/// Returns `max over elements of |analytic - central| / (|analytic| + |central| + 1e-12)`.
/// `build` must construct the loss node from a fresh graph and the bound
/// parameters; it is re-invoked for each perturbed evaluation, so the
/// numerical path is independent of the reverse pass it checks.
pub fn fd_check<F>(store: &ParamStore, eps: f64, build: F) -> Result<f64>
where
    F: Fn(&mut Graph, &Bind) -> Result<NodeId>,
{
    assert!(eps > 0.0, "fd_check requires a positive step");
    let mut g = Graph::new();
    let bind = store.bind(&mut g, true);
    let loss_id = build(&mut g, &bind)?;
    let grads = g.backward(loss_id)?;
    let analytic = bind.named_grads(&grads, store);

    let eval = |s: &ParamStore| -> Result<f64> {
        let mut g = Graph::new();
        let bind = s.bind(&mut g, false);
        let loss_id = build(&mut g, &bind)?;
        g.value(loss_id).item()
    };

    let mut max_rel: f64 = 0.0;
    for (name, base) in store.iter() {
        let a = &analytic[name];
        for i in 0..base.numel() {
            let mut plus = store.clone();
            plus.perturb(name, i, eps);
            let mut minus = store.clone();
            minus.perturb(name, i, -eps);
            let central = (eval(&plus)? - eval(&minus)?) / (2.0 * eps);
            let ai = a.data()[i];
            let rel = (ai - central).abs() / (ai.abs() + central.abs() + 1e-12);
            max_rel = max_rel.max(rel);
        }
    }
    Ok(max_rel)
}
