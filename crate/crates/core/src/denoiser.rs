//! Transformer noise-prediction network over k-token factor sequences.
//!
//! Each block is pre-norm self-attention plus a feed-forward branch. After
//! every standard layer norm an adaptive layer-norm stage rescales channels
//! with a scale and shift regressed from the summed conditioning vector
//! (timestep encoding + label embedding + industry embedding, with dropped
//! conditions replaced by a shared learned null vector). Both residual
//! branches are gated by zero-initialized scalars, and the output projection
//! starts at zero, so a fresh model is an exact identity in the token stream
//! and predicts zero noise everywhere.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::nn::{
    affine, attention, init_affine, init_affine_zero, init_attention, init_layer_norm,
    layer_norm_affine, randn, Bind, ParamStore,
};
use crate::tensor::Tensor;

/// Sinusoidal encoding of a diffusion step: entry `2i` is
/// `sin(t / 10000^(2i/dim))` and entry `2i+1` the matching cosine.
pub fn timestep_embedding(t: usize, dim: usize) -> Result<Tensor> {
    if dim == 0 || dim % 2 != 0 {
        return Err(Error::InvalidArgument(format!(
            "timestep embedding dim must be even and positive, got {dim}"
        )));
    }
    let mut out = vec![0.0; dim];
    for i in 0..dim / 2 {
        let freq = (-(2.0 * i as f64 / dim as f64) * 10000f64.ln()).exp();
        let angle = t as f64 * freq;
        out[2 * i] = angle.sin();
        out[2 * i + 1] = angle.cos();
    }
    Tensor::new(vec![dim], out)
}

/// Sinusoidal encodings over token positions `0..k`, one row per day.
pub fn day_position_encoding(k: usize, width: usize) -> Result<Tensor> {
    let mut data = Vec::with_capacity(k * width);
    for p in 0..k {
        data.extend_from_slice(timestep_embedding(p, width)?.data());
    }
    Tensor::new(vec![k, width], data)
}

/// Per-sample conditioning inputs. Absent entries behave like dropped ones.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Conditions {
    pub label: Option<f64>,
    pub industry: Option<usize>,
}

/// Which conditions are replaced by the null vector for this call. The
/// timestep encoding is always kept.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct DropMask {
    pub label: bool,
    pub industry: bool,
}

impl DropMask {
    pub const KEEP_ALL: DropMask = DropMask { label: false, industry: false };
    pub const DROP_ALL: DropMask = DropMask { label: true, industry: true };
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenoiserConfig {
    /// Tokens per sequence (lookback days).
    pub seq_len: usize,
    /// Channels per token (factor count).
    pub input_dim: usize,
    pub width: usize,
    pub heads: usize,
    pub layers: usize,
    pub t_embed_dim: usize,
    pub n_sectors: usize,
    /// Parameter initialization seed.
    pub seed: u64,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        DenoiserConfig {
            seq_len: 8,
            input_dim: 16,
            width: 64,
            heads: 4,
            layers: 6,
            t_embed_dim: 64,
            n_sectors: 5,
            seed: 0,
        }
    }
}

/// Feed-forward hidden width multiplier.
const FFN_MULT: usize = 4;

#[derive(Debug, Clone)]
pub struct DenoiserModel {
    pub cfg: DenoiserConfig,
    pub params: ParamStore,
}

impl DenoiserModel {
    pub fn new(cfg: DenoiserConfig) -> Result<Self> {
        if cfg.width == 0 || cfg.width % 2 != 0 {
            return Err(Error::InvalidArgument("denoiser width must be even".into()));
        }
        if cfg.heads == 0 || cfg.width % cfg.heads != 0 {
            return Err(Error::InvalidArgument(format!(
                "width {} not divisible by heads {}",
                cfg.width, cfg.heads
            )));
        }
        if cfg.t_embed_dim % 2 != 0 || cfg.t_embed_dim == 0 {
            return Err(Error::InvalidArgument("t_embed_dim must be even".into()));
        }
        if cfg.seq_len == 0 || cfg.input_dim == 0 || cfg.layers == 0 || cfg.n_sectors == 0 {
            return Err(Error::InvalidArgument("denoiser dimensions must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut p = ParamStore::new();
        let w = cfg.width;
        init_affine(&mut p, "token_proj", cfg.input_dim, w, &mut rng);
        init_affine(&mut p, "t_proj", cfg.t_embed_dim, w, &mut rng);
        init_affine(&mut p, "cond.label", 1, w, &mut rng);
        p.insert("cond.industry", randn(&[cfg.n_sectors, w], 1.0 / (w as f64).sqrt(), &mut rng));
        p.insert("cond.null", Tensor::zeros(&[w]));
        for b in 0..cfg.layers {
            let pre = format!("block{b}");
            init_layer_norm(&mut p, &format!("{pre}.ln1"), w);
            init_layer_norm(&mut p, &format!("{pre}.ln2"), w);
            // conditioning is inert until the zero-initialized maps train away from zero
            init_affine_zero(&mut p, &format!("{pre}.aln.f"), w, w);
            init_affine_zero(&mut p, &format!("{pre}.aln.h"), w, w);
            init_attention(&mut p, &format!("{pre}.attn"), w, &mut rng);
            p.insert(format!("{pre}.alpha1"), Tensor::zeros(&[1]));
            init_affine(&mut p, &format!("{pre}.ffn.l1"), w, FFN_MULT * w, &mut rng);
            init_affine(&mut p, &format!("{pre}.ffn.l2"), FFN_MULT * w, w, &mut rng);
            p.insert(format!("{pre}.alpha2"), Tensor::zeros(&[1]));
        }
        init_affine_zero(&mut p, "out_proj", w, cfg.input_dim);
        Ok(DenoiserModel { cfg, params: p })
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Bind {
        self.params.bind(g, trainable)
    }

    /// Conditioning vector node: timestep projection plus each kept condition
    /// embedding; every dropped or absent condition contributes the shared
    /// null vector.
    pub fn cond_node(
        &self,
        g: &mut Graph,
        bind: &Bind,
        t: usize,
        conds: Conditions,
        mask: DropMask,
    ) -> Result<NodeId> {
        let w = self.cfg.width;
        let t_sin = timestep_embedding(t, self.cfg.t_embed_dim)?;
        let t_in = g.constant(t_sin.reshaped(vec![1, self.cfg.t_embed_dim])?);
        let t_part = affine(g, bind, "t_proj", t_in)?;
        let mut acc = g.reshape(t_part, vec![w])?;

        let null = bind.id("cond.null");
        let label_part = match (conds.label, mask.label) {
            (Some(y), false) => {
                let y_in = g.constant(Tensor::new(vec![1, 1], vec![y])?);
                let row = affine(g, bind, "cond.label", y_in)?;
                g.reshape(row, vec![w])?
            }
            _ => null,
        };
        acc = g.add(acc, label_part)?;

        let industry_part = match (conds.industry, mask.industry) {
            (Some(s), false) => {
                if s >= self.cfg.n_sectors {
                    return Err(Error::InvalidArgument(format!(
                        "unknown sector id {s} (model has {})",
                        self.cfg.n_sectors
                    )));
                }
                let row = g.narrow(bind.id("cond.industry"), 0, s, 1)?;
                g.reshape(row, vec![w])?
            }
            _ => null,
        };
        g.add(acc, industry_part)
    }

    /// Token embedding: input projection plus day-position sinusoids.
    pub fn embed_tokens(&self, g: &mut Graph, bind: &Bind, x_t: NodeId) -> Result<NodeId> {
        let shape = g.value(x_t).shape().to_vec();
        if shape != [self.cfg.seq_len, self.cfg.input_dim] {
            return Err(Error::shape(
                "denoise_eps",
                format!("expected [{}, {}], got {:?}", self.cfg.seq_len, self.cfg.input_dim, shape),
            ));
        }
        let tok = affine(g, bind, "token_proj", x_t)?;
        let pos = g.constant(day_position_encoding(self.cfg.seq_len, self.cfg.width)?);
        g.add(tok, pos)
    }

    fn modulate(
        &self,
        g: &mut Graph,
        bind: &Bind,
        block: usize,
        normed: NodeId,
        cond_row: NodeId,
    ) -> Result<NodeId> {
        let gamma = affine(g, bind, &format!("block{block}.aln.f"), cond_row)?;
        let beta = affine(g, bind, &format!("block{block}.aln.h"), cond_row)?;
        let gamma1 = g.add_scalar(gamma, 1.0)?;
        let scaled = g.mul(normed, gamma1)?;
        g.add(scaled, beta)
    }

    /// Hidden token stream after all blocks, before the output projection.
    fn hidden_node(
        &self,
        g: &mut Graph,
        bind: &Bind,
        x_t: NodeId,
        cond: NodeId,
    ) -> Result<NodeId> {
        let cond_row = g.reshape(cond, vec![1, self.cfg.width])?;
        let mut h = self.embed_tokens(g, bind, x_t)?;
        for b in 0..self.cfg.layers {
            let pre = format!("block{b}");
            let n1 = layer_norm_affine(g, bind, &format!("{pre}.ln1"), h)?;
            let m1 = self.modulate(g, bind, b, n1, cond_row)?;
            let att = attention(g, bind, &format!("{pre}.attn"), m1, self.cfg.heads)?;
            let gated1 = g.mul(att, bind.id(&format!("{pre}.alpha1")))?;
            h = g.add(h, gated1)?;

            let n2 = layer_norm_affine(g, bind, &format!("{pre}.ln2"), h)?;
            let m2 = self.modulate(g, bind, b, n2, cond_row)?;
            let f1 = affine(g, bind, &format!("{pre}.ffn.l1"), m2)?;
            let f1 = g.silu(f1)?;
            let f2 = affine(g, bind, &format!("{pre}.ffn.l2"), f1)?;
            let gated2 = g.mul(f2, bind.id(&format!("{pre}.alpha2")))?;
            h = g.add(h, gated2)?;
        }
        Ok(h)
    }

    /// Predicted noise node for a bound graph.
    pub fn eps_node(
        &self,
        g: &mut Graph,
        bind: &Bind,
        x_t: NodeId,
        cond: NodeId,
    ) -> Result<NodeId> {
        let h = self.hidden_node(g, bind, x_t, cond)?;
        affine(g, bind, "out_proj", h)
    }

    /// Predicted noise for one sample; pure function of (parameters, inputs).
    pub fn denoise_eps(
        &self,
        x_t: &Tensor,
        t: usize,
        conds: Conditions,
        mask: DropMask,
    ) -> Result<Tensor> {
        let mut g = Graph::new();
        let bind = self.bind(&mut g, false);
        let x = g.constant(x_t.clone());
        let cond = self.cond_node(&mut g, &bind, t, conds, mask)?;
        let eps = self.eps_node(&mut g, &bind, x, cond)?;
        Ok(g.value(eps).clone())
    }

    /// Conditioning vector as a value (test and inspection helper).
    pub fn embed_conditions(&self, t: usize, conds: Conditions, mask: DropMask) -> Result<Tensor> {
        let mut g = Graph::new();
        let bind = self.bind(&mut g, false);
        let cond = self.cond_node(&mut g, &bind, t, conds, mask)?;
        Ok(g.value(cond).clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_cfg() -> DenoiserConfig {
        DenoiserConfig {
            seq_len: 4,
            input_dim: 6,
            width: 16,
            heads: 2,
            layers: 2,
            t_embed_dim: 8,
            n_sectors: 3,
            seed: 42,
        }
    }

    #[test]
    fn timestep_embedding_at_zero_alternates() {
        let e = timestep_embedding(0, 8).unwrap();
        assert_eq!(e.data(), &[0., 1., 0., 1., 0., 1., 0., 1.]);
    }

    #[test]
    fn timestep_embedding_stays_in_unit_range() {
        for t in [1usize, 13, 999, 100_000] {
            let e = timestep_embedding(t, 12).unwrap();
            assert!(e.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn timestep_embedding_rejects_odd_dim() {
        assert!(timestep_embedding(3, 7).is_err());
    }

    #[test]
    fn timestep_embedding_shift_is_a_rotation() {
        // per frequency pair, embedding(t+k) = R(k*freq) applied to embedding(t)
        let (t, k, dim) = (7usize, 5usize, 8usize);
        let et = timestep_embedding(t, dim).unwrap();
        let etk = timestep_embedding(t + k, dim).unwrap();
        for i in 0..dim / 2 {
            let freq = (-(2.0 * i as f64 / dim as f64) * 10000f64.ln()).exp();
            let (s, c) = (et.data()[2 * i], et.data()[2 * i + 1]);
            let (ks, kc) = ((k as f64 * freq).sin(), (k as f64 * freq).cos());
            let rot_s = s * kc + c * ks;
            let rot_c = c * kc - s * ks;
            assert!((rot_s - etk.data()[2 * i]).abs() < 1e-9);
            assert!((rot_c - etk.data()[2 * i + 1]).abs() < 1e-9);
        }
    }

    #[test]
    fn all_conditions_dropped_gives_t_embedding_plus_two_nulls() {
        let mut model = DenoiserModel::new(toy_cfg()).unwrap();
        // give the null vector a recognizable value
        let null = Tensor::full(&[16], 0.25);
        model.params.set("cond.null", null.clone());
        let got = model
            .embed_conditions(
                11,
                Conditions { label: Some(0.5), industry: Some(1) },
                DropMask::DROP_ALL,
            )
            .unwrap();

        // oracle: t projection alone plus 2 * null
        let mut g = Graph::new();
        let bind = model.bind(&mut g, false);
        let t_sin = timestep_embedding(11, 8).unwrap();
        let t_in = g.constant(t_sin.reshaped(vec![1, 8]).unwrap());
        let t_part = affine(&mut g, &bind, "t_proj", t_in).unwrap();
        let want = g
            .value(t_part)
            .reshaped(vec![16])
            .unwrap()
            .add_scaled(&null, 2.0)
            .unwrap();
        assert!(got.allclose(&want, 1e-12));
    }

    #[test]
    fn zeroed_label_affine_contributes_its_bias() {
        let mut model = DenoiserModel::new(toy_cfg()).unwrap();
        model.params.set("cond.label.w", Tensor::zeros(&[1, 16]));
        let bias = Tensor::full(&[16], -0.125);
        model.params.set("cond.label.b", bias.clone());
        let with_label = model
            .embed_conditions(3, Conditions { label: Some(0.0), industry: None }, DropMask::KEEP_ALL)
            .unwrap();
        let dropped = model
            .embed_conditions(3, Conditions { label: None, industry: None }, DropMask::KEEP_ALL)
            .unwrap();
        // label slot swaps the null vector (zeros at init) for the bias
        let null = model.params.get("cond.null").clone();
        let want = dropped.sub(&null).unwrap().add(&bias).unwrap();
        assert!(with_label.allclose(&want, 1e-12));
    }

    #[test]
    fn embed_conditions_is_deterministic() {
        let model = DenoiserModel::new(toy_cfg()).unwrap();
        let c = Conditions { label: Some(0.3), industry: Some(2) };
        let m = DropMask { label: false, industry: true };
        let a = model.embed_conditions(7, c, m).unwrap();
        let b = model.embed_conditions(7, c, m).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn unknown_sector_is_an_error() {
        let model = DenoiserModel::new(toy_cfg()).unwrap();
        let res = model.embed_conditions(
            1,
            Conditions { label: None, industry: Some(99) },
            DropMask::KEEP_ALL,
        );
        assert!(res.is_err());
    }

    #[test]
    fn fresh_model_predicts_exactly_zero() {
        let model = DenoiserModel::new(toy_cfg()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = randn(&[4, 6], 1.0, &mut rng);
        let eps = model
            .denoise_eps(&x, 37, Conditions { label: Some(1.2), industry: Some(0) }, DropMask::KEEP_ALL)
            .unwrap();
        assert!(eps.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn fresh_model_blocks_are_exact_identity() {
        // pre-out-proj hidden state equals the token embedding untouched
        let model = DenoiserModel::new(toy_cfg()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = randn(&[4, 6], 1.0, &mut rng);
        let mut g = Graph::new();
        let bind = model.bind(&mut g, false);
        let xn = g.constant(x.clone());
        let cond = model
            .cond_node(&mut g, &bind, 5, Conditions::default(), DropMask::DROP_ALL)
            .unwrap();
        let hidden = model.hidden_node(&mut g, &bind, xn, cond).unwrap();
        let embedded = model.embed_tokens(&mut g, &bind, xn).unwrap();
        assert_eq!(g.value(hidden).data(), g.value(embedded).data());
    }

    #[test]
    fn batch_permutation_permutes_outputs() {
        let model = DenoiserModel::new(toy_cfg()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let xs: Vec<Tensor> = (0..5).map(|_| randn(&[4, 6], 1.0, &mut rng)).collect();
        let conds = Conditions { label: Some(0.1), industry: Some(1) };
        let outs: Vec<Tensor> = xs
            .iter()
            .map(|x| model.denoise_eps(x, 9, conds, DropMask::KEEP_ALL).unwrap())
            .collect();
        let perm = [3usize, 0, 4, 1, 2];
        for (slot, &src) in perm.iter().enumerate() {
            let out = model.denoise_eps(&xs[src], 9, conds, DropMask::KEEP_ALL).unwrap();
            assert_eq!(out.data(), outs[src].data(), "slot {slot}");
        }
    }

    #[test]
    fn full_model_gradient_passes_fd_check() {
        // jitter every parameter so no gate or zero-initialized map leaves a
        // structurally dead direction, and route one pass through kept
        // conditions plus one through the null vector so all embeddings
        // contribute to the loss
        let mut cfg = toy_cfg();
        cfg.n_sectors = 1;
        let mut model = DenoiserModel::new(cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let names: Vec<String> = model.params.iter().map(|(n, _)| n.clone()).collect();
        for name in names {
            let cur = model.params.get(&name).clone();
            let noise = randn(cur.shape(), 0.05, &mut rng);
            model.params.set(&name, cur.add(&noise).unwrap());
        }
        let x = randn(&[4, 6], 1.0, &mut rng);
        let target = randn(&[4, 6], 1.0, &mut rng);
        let model_ref = &model;
        let max_rel = crate::nn::fd_check(&model.params, 1e-5, |g, bind| {
            let xn = g.constant(x.clone());
            let tn = g.constant(target.clone());
            let cond_kept = model_ref.cond_node(
                g,
                bind,
                13,
                Conditions { label: Some(0.7), industry: Some(0) },
                DropMask::KEEP_ALL,
            )?;
            let eps_kept = model_ref.eps_node(g, bind, xn, cond_kept)?;
            let cond_null =
                model_ref.cond_node(g, bind, 29, Conditions::default(), DropMask::DROP_ALL)?;
            let eps_null = model_ref.eps_node(g, bind, xn, cond_null)?;
            let l1 = g.mse(eps_kept, tn)?;
            let l2 = g.mse(eps_null, tn)?;
            g.add(l1, l2)
        })
        .unwrap();
        assert!(max_rel < 1e-3, "max_rel = {max_rel}");
    }

    #[test]
    fn rejects_bad_dimensions() {
        let mut cfg = toy_cfg();
        cfg.width = 15;
        assert!(DenoiserModel::new(cfg).is_err());
        let mut cfg = toy_cfg();
        cfg.heads = 3;
        assert!(DenoiserModel::new(cfg).is_err());
        let model = DenoiserModel::new(toy_cfg()).unwrap();
        let bad = Tensor::zeros(&[5, 6]);
        assert!(model
            .denoise_eps(&bad, 1, Conditions::default(), DropMask::DROP_ALL)
            .is_err());
    }

    #[test]
    fn same_seed_rebuilds_identical_parameters() {
        let a = DenoiserModel::new(toy_cfg()).unwrap();
        let b = DenoiserModel::new(toy_cfg()).unwrap();
        for (name, t) in a.params.iter() {
            assert_eq!(t.data(), b.params.get(name).data(), "{name}");
        }
    }
}
