//! Acceptance suite: one test per release criterion, each printing a
//! PASS line with its measured runtime against the stated budget.
//!
//! Heavy criteria serialize on a shared lock so wall-clock budgets are
//! measured without cross-test contention. Run with `--nocapture` to see
//! the per-criterion lines:
//!
//! `cargo test -p fd-cli --test acceptance -- --nocapture`

use std::collections::BTreeMap;
use std::sync::Mutex;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use fd_cli::config::RunConfig;
use fd_cli::pipeline::{
    build_datasets, edit_cmd, evaluate_cmd, gen_data, train_diffusion_cmd, train_predictor_cmd,
    train_predictor_on, AugmentContext, Workspace,
};
use fd_cli::AugmentMode;
use fd_core::data::SequenceBatch;
use fd_core::denoiser::{Conditions, DenoiserConfig, DenoiserModel, DropMask};
use fd_core::engine::{
    assign_editing_steps, edit_samples, train_diffusion, EditRunConfig, TrainRunConfig,
};
use fd_core::eval::{
    backtest_topk_dropk, frechet_distance, information_coefficient, rank_ic, weighted_ic,
};
use fd_core::guidance::{cfg_eps, eps_for_step, predictor_guided_eps, GuidanceConfig, GuidanceMode};
use fd_core::market::{gen_synthetic_market, pearson, planted_functional};
use fd_core::nn::{fd_check, init_affine, randn, ParamStore};
use fd_core::predictor::{
    train_regressor, BackboneKind, RegressorConfig, RegressorModel, TrainedRegressor,
    TrainPredictorConfig,
};
use fd_core::schedule::{build_schedule, q_sample};
use fd_core::tensor::Tensor;

static HEAVY: Mutex<()> = Mutex::new(());

fn finish(criterion: usize, name: &str, started: Instant, budget_secs: f64, detail: String) {
    let elapsed = started.elapsed().as_secs_f64();
    println!(
        "[criterion {criterion:02}] PASS {name}: {detail} (elapsed {elapsed:.1}s, budget {budget_secs:.0}s)"
    );
    assert!(
        elapsed < budget_secs,
        "criterion {criterion} exceeded its runtime budget: {elapsed:.1}s >= {budget_secs}s"
    );
}

fn jitter(model: &mut DenoiserModel, std: f64, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let names: Vec<String> = model.params.iter().map(|(n, _)| n.clone()).collect();
    for name in names {
        let cur = model.params.get(&name).clone();
        let noise = randn(cur.shape(), std, &mut rng);
        model.params.set(&name, cur.add(&noise).unwrap());
    }
}

fn toy_denoiser_cfg() -> DenoiserConfig {
    DenoiserConfig {
        seq_len: 4,
        input_dim: 6,
        width: 16,
        heads: 2,
        layers: 2,
        t_embed_dim: 8,
        n_sectors: 1,
        seed: 42,
    }
}

// ── criterion 1: gradient correctness ────────────────────────────────

#[test]
fn criterion_01_gradient_correctness() {
    let _guard = HEAVY.lock().unwrap_or_else(|e| e.into_inner());
    let started = Instant::now();

    // affine layers are exact to roundoff
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut store = ParamStore::new();
    init_affine(&mut store, "lin", 5, 4, &mut rng);
    let x = randn(&[3, 5], 1.0, &mut rng);
    let affine_rel = fd_check(&store, 1e-5, |g, bind| {
        let xn = g.constant(x.clone());
        let y = fd_core::nn::affine(g, bind, "lin", xn)?;
        let sq = g.mul(y, y)?;
        g.mean_all(sq)
    })
    .unwrap();
    assert!(affine_rel < 1e-8, "affine fd rel {affine_rel}");

    // a single denoiser block (1-layer model), jittered off initialization
    let mut block_cfg = toy_denoiser_cfg();
    block_cfg.layers = 1;
    block_cfg.width = 32;
    block_cfg.seq_len = 8;
    let mut block_model = DenoiserModel::new(block_cfg).unwrap();
    jitter(&mut block_model, 0.05, 2);
    let x8 = randn(&[8, 6], 1.0, &mut rng);
    let target8 = randn(&[8, 6], 1.0, &mut rng);
    let block_ref = &block_model;
    let block_rel = fd_check(&block_model.params, 5e-5, |g, bind| {
        let xn = g.constant(x8.clone());
        let tn = g.constant(target8.clone());
        let c1 = block_ref.cond_node(
            g,
            bind,
            7,
            Conditions { label: Some(0.4), industry: Some(0) },
            DropMask::KEEP_ALL,
        )?;
        let e1 = block_ref.eps_node(g, bind, xn, c1)?;
        let c2 = block_ref.cond_node(g, bind, 3, Conditions::default(), DropMask::DROP_ALL)?;
        let e2 = block_ref.eps_node(g, bind, xn, c2)?;
        let l1 = g.mse(e1, tn)?;
        let l2 = g.mse(e2, tn)?;
        g.add(l1, l2)
    })
    .unwrap();
    assert!(block_rel < 1e-3, "denoiser block fd rel {block_rel}");

    // full toy denoiser (2 layers, width 16, k=4, d=6)
    let mut full_model = DenoiserModel::new(toy_denoiser_cfg()).unwrap();
    jitter(&mut full_model, 0.05, 3);
    let x4 = randn(&[4, 6], 1.0, &mut rng);
    let target4 = randn(&[4, 6], 1.0, &mut rng);
    let full_ref = &full_model;
    let full_rel = fd_check(&full_model.params, 5e-5, |g, bind| {
        let xn = g.constant(x4.clone());
        let tn = g.constant(target4.clone());
        let c1 = full_ref.cond_node(
            g,
            bind,
            11,
            Conditions { label: Some(0.7), industry: Some(0) },
            DropMask::KEEP_ALL,
        )?;
        let e1 = full_ref.eps_node(g, bind, xn, c1)?;
        let c2 = full_ref.cond_node(g, bind, 29, Conditions::default(), DropMask::DROP_ALL)?;
        let e2 = full_ref.eps_node(g, bind, xn, c2)?;
        let l1 = g.mse(e1, tn)?;
        let l2 = g.mse(e2, tn)?;
        g.add(l1, l2)
    })
    .unwrap();
    assert!(full_rel < 1e-3, "full denoiser fd rel {full_rel}");

    // both regression backbones, parameters and input gradients
    let mut worst_backbone: f64 = 0.0;
    for backbone in [BackboneKind::Mlp, BackboneKind::Transformer] {
        let model = RegressorModel::new(RegressorConfig {
            backbone,
            seq_len: 4,
            input_dim: 6,
            hidden: 16,
            width: 12,
            heads: 2,
            layers: 1,
            seed: 4,
        })
        .unwrap();
        let xr = randn(&[4, 6], 1.0, &mut rng);
        let model_ref = &model;
        let rel = fd_check(&model.params, 5e-5, |g, bind| {
            let xn = g.constant(xr.clone());
            let pred = model_ref.predict_node(g, bind, xn)?;
            let t = g.constant(Tensor::new(vec![1, 1], vec![0.3]).unwrap());
            let r = g.sub(pred, t)?;
            let sq = g.mul(r, r)?;
            g.sum_all(sq)
        })
        .unwrap();
        assert!(rel < 1e-3, "{backbone} parameter fd rel {rel}");
        let mut xstore = ParamStore::new();
        xstore.insert("x", xr.clone());
        let rel_x = fd_check(&xstore, 5e-5, |g, bind| {
            let mb = model_ref.bind(g, false);
            let pred = model_ref.predict_node(g, &mb, bind.id("x"))?;
            let t = g.constant(Tensor::new(vec![1, 1], vec![0.3]).unwrap());
            let r = g.sub(pred, t)?;
            let sq = g.mul(r, r)?;
            g.sum_all(sq)
        })
        .unwrap();
        assert!(rel_x < 1e-3, "{backbone} input fd rel {rel_x}");
        worst_backbone = worst_backbone.max(rel).max(rel_x);
    }

    finish(
        1,
        "gradient correctness",
        started,
        60.0,
        format!(
            "affine {affine_rel:.1e}, block {block_rel:.1e}, full {full_rel:.1e}, backbones {worst_backbone:.1e}"
        ),
    );
}

// ── criterion 2: forward-process moments ─────────────────────────────

#[test]
fn criterion_02_forward_process_moments() {
    let started = Instant::now();
    let sched = build_schedule(1000, 1e-4, 0.02).unwrap();
    let x0 = Tensor::from_vec(vec![1.5, -0.7, 0.3, 2.0, -1.2, 0.05, 0.9, -0.4]);
    let dim = x0.numel();
    let n = 100_000usize;
    let mut detail = String::new();
    for (stream, t) in [1usize, 250, 500, 1000].into_iter().enumerate() {
        let abar = sched.alpha_bar(t);
        let (sa, var_target) = (abar.sqrt(), 1.0 - abar);
        let mut rng = ChaCha8Rng::seed_from_u64(20);
        rng.set_stream(stream as u64);
        let mut sums = vec![0.0; dim];
        let mut pooled_sq = 0.0;
        for _ in 0..n {
            let eps_data: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
            let eps = Tensor::from_vec(eps_data);
            let xt = q_sample(&x0, t, &eps, &sched).unwrap();
            for (e, v) in xt.data().iter().enumerate() {
                sums[e] += v;
                let d = v - sa * x0.data()[e];
                pooled_sq += d * d;
            }
        }
        for e in 0..dim {
            let target = sa * x0.data()[e];
            let got = sums[e] / n as f64;
            let tol = 0.01 * target.abs().max(1.0);
            assert!((got - target).abs() <= tol, "t={t} mean[{e}]: {got} vs {target}");
        }
        let var = pooled_sq / (n * dim) as f64;
        assert!(
            (var - var_target).abs() <= 0.01 * var_target,
            "t={t} var: {var} vs {var_target}"
        );
        detail.push_str(&format!("t={t} var_err={:.2}% ", 100.0 * (var - var_target).abs() / var_target));
    }
    finish(2, "forward-process moments (1e5 draws)", started, 30.0, detail);
}

// ── criterion 3: exact identities ────────────────────────────────────

#[test]
fn criterion_03_exact_identities() {
    let started = Instant::now();
    let sched = build_schedule(100, 1e-4, 0.02).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(30);

    // CFG at strength 1 equals the conditional prediction
    let mut model = DenoiserModel::new(toy_denoiser_cfg()).unwrap();
    jitter(&mut model, 0.05, 31);
    let x = randn(&[4, 6], 1.0, &mut rng);
    let conds = Conditions { label: Some(0.4), industry: Some(0) };
    let gcfg = GuidanceConfig {
        mode: GuidanceMode::PredictorFree,
        omega_free: 1.0,
        ..GuidanceConfig::default()
    };
    let one = eps_for_step(&model, &x, 17, conds, &sched, &gcfg, None).unwrap();
    let cond = model.denoise_eps(&x, 17, conds, DropMask::KEEP_ALL).unwrap();
    assert!(one.max_abs_diff(&cond) <= 1e-12, "cfg identity");
    let (c, u) = (randn(&[4, 6], 1.0, &mut rng), randn(&[4, 6], 1.0, &mut rng));
    assert!(cfg_eps(&c, &u, 1.0).unwrap().max_abs_diff(&c) <= 1e-12);

    // predictor guidance with omega = 0 is the identity
    let predictor = RegressorModel::new(RegressorConfig {
        backbone: BackboneKind::Mlp,
        seq_len: 4,
        input_dim: 6,
        hidden: 8,
        seed: 32,
        ..RegressorConfig::default()
    })
    .unwrap();
    let eps = randn(&[4, 6], 1.0, &mut rng);
    let guided = predictor_guided_eps(&eps, &x, 0.2, 50, &sched, 0.0, &predictor).unwrap();
    assert_eq!(guided.data(), eps.data(), "omega=0 identity");

    // zero-initialized model: per-block identity and zero prediction
    let fresh = DenoiserModel::new(toy_denoiser_cfg()).unwrap();
    let out = fresh.denoise_eps(&x, 9, conds, DropMask::KEEP_ALL).unwrap();
    assert!(out.data().iter().all(|v| *v == 0.0), "fresh model predicts zero");

    // editing with t_prime = 0 is a dataset identity
    let batch = SequenceBatch {
        k: 4,
        d: 6,
        x: (0..5 * 24).map(|i| (i as f64).sin()).collect(),
        y: vec![0.01, 0.02, 0.03, 0.04, 0.05],
        meta: (0..5)
            .map(|i| fd_core::data::SampleMeta { stock_id: i, date: i, sector: 0 })
            .collect(),
        norm: None,
    };
    let ecfg = EditRunConfig {
        t_prime: 0,
        ddim_steps: 4,
        guidance: GuidanceConfig { mode: GuidanceMode::None, ..GuidanceConfig::default() },
        seed: 33,
        salt: 0,
    };
    let identity = edit_samples(&batch, &model, &sched, &ecfg, None, None).unwrap();
    assert_eq!(identity, batch, "t_prime=0 dataset identity");

    // deterministic DDIM is bitwise reproducible under a fixed seed
    let ecfg2 = EditRunConfig { t_prime: 40, ..ecfg };
    let a = edit_samples(&batch, &model, &sched, &ecfg2, None, None).unwrap();
    let b = edit_samples(&batch, &model, &sched, &ecfg2, None, None).unwrap();
    assert_eq!(a, b, "ddim bitwise reproducibility");

    finish(3, "exact identities", started, 30.0, "cfg/guidance/zero-init/edit/ddim".into());
}

// ── shared small-market configuration for the trend criteria ─────────

fn trend_cfg(seed: u64) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.seed = seed;
    cfg.data.market.n_stocks = 40;
    cfg.data.market.n_days = 160;
    cfg.data.market.n_sectors = 3;
    cfg.data.market.n_factors = 8;
    cfg.data.market.n_signal = 3;
    cfg.data.market.target_stocks = 16;
    cfg.data.market.snr = 0.5;
    cfg.sched_t_total = 400;
    cfg.denoiser_width = 24;
    cfg.denoiser_heads = 2;
    cfg.denoiser_layers = 2;
    cfg.denoiser_t_embed_dim = 16;
    cfg.diffusion.t_prime = 150;
    cfg.diffusion.epochs = 8;
    cfg.diffusion.batch_size = 32;
    cfg.diffusion.lr = 2e-3;
    cfg.diffusion.probe_every = 0;
    cfg.edit.t_prime = 100;
    cfg.edit.ddim_steps = 10;
    cfg.predictor_backbone = BackboneKind::Mlp;
    cfg.predictor_hidden = 32;
    cfg.predictor_train.epochs = 15;
    cfg.predictor_train.batch_size = 128;
    cfg.predictor_train.lr = 0.05;
    cfg.eval.top_k = 5;
    cfg.finalize();
    cfg
}

// ── criterion 4: editing-step / fidelity trade-off ───────────────────

#[test]
fn criterion_04_fid_increases_with_editing_step() {
    let _guard = HEAVY.lock().unwrap_or_else(|e| e.into_inner());
    let started = Instant::now();
    let t_values = [50usize, 100, 200, 300]; // T/8, T/4, T/2, 3T/4 of T=400
    let mut detail = String::new();
    for seed in 0..3u64 {
        let mut cfg = trend_cfg(seed);
        cfg.diffusion.epochs = 2;
        cfg.finalize();
        let (panel, truth) = gen_synthetic_market(&cfg.data.market, seed).unwrap();
        let data = build_datasets(&cfg, &panel, &truth).unwrap();
        let model = DenoiserModel::new(cfg.denoiser_config()).unwrap();
        let dm = train_diffusion(&data.source_train, model, &cfg.diffusion).unwrap();
        let mut fids = Vec::new();
        for &tp in &t_values {
            let ecfg = EditRunConfig { t_prime: tp, salt: 0, ..cfg.edit.clone() };
            let edited =
                edit_samples(&data.target_train, &dm.model, &dm.sched, &ecfg, None, None).unwrap();
            let dim = edited.k * edited.d;
            fids.push(frechet_distance(&edited.x, &data.target_train.x, dim).unwrap());
        }
        // strictly increasing = Spearman 1.0 over the four points
        for w in fids.windows(2) {
            assert!(w[0] < w[1], "seed {seed}: fids {fids:?} not strictly increasing");
        }
        detail.push_str(&format!(
            "seed{seed}: {:.2}<{:.2}<{:.2}<{:.2} ",
            fids[0], fids[1], fids[2], fids[3]
        ));
    }
    finish(4, "FID strictly increasing in editing step (3/3 seeds)", started, 600.0, detail);
}

// ── criterion 5: truncated-step training converges lower ─────────────

#[test]
fn criterion_05_truncated_training_trend() {
    let _guard = HEAVY.lock().unwrap_or_else(|e| e.into_inner());
    let started = Instant::now();
    let mut cfg = RunConfig::default();
    cfg.seed = 3;
    cfg.data.market.n_stocks = 12;
    cfg.data.market.n_days = 80;
    cfg.data.market.n_sectors = 2;
    cfg.data.market.n_factors = 4;
    cfg.data.market.n_signal = 2;
    cfg.data.market.target_stocks = 4;
    cfg.data.market.lookback = 4;
    cfg.denoiser_width = 16;
    cfg.denoiser_heads = 2;
    cfg.denoiser_layers = 1;
    cfg.denoiser_t_embed_dim = 16;
    cfg.finalize();
    let (panel, truth) = gen_synthetic_market(&cfg.data.market, 3).unwrap();
    let data = build_datasets(&cfg, &panel, &truth).unwrap();

    // identical data, model seed, and probe grid; only the training-step
    // range differs. The probe set lives in the low-step regime (t <= 100).
    let run = |t_prime: usize| {
        let model = DenoiserModel::new(cfg.denoiser_config()).unwrap();
        let tc = TrainRunConfig {
            t_total: 1000,
            t_prime,
            epochs: 320 * 16 / data.source_train.n().max(1) + 1,
            batch_size: 16,
            lr: 2e-3,
            probe_every: 20,
            probe_t_max: 100,
            seed: 3,
            ..TrainRunConfig::default()
        };
        let out = train_diffusion(&data.source_train, model, &tc).unwrap();
        out.history
            .iter()
            .filter(|s| s.step <= 300 && s.probe_loss.is_some())
            .last()
            .and_then(|s| s.probe_loss)
            .unwrap()
    };
    let truncated = run(100); // T/10
    let full = run(1000); // T
    assert!(
        truncated < full,
        "truncated probe loss {truncated} should beat full-range {full}"
    );
    finish(
        5,
        "truncated training reaches lower low-step loss at step 300",
        started,
        300.0,
        format!("T/10: {truncated:.4} < T: {full:.4}"),
    );
}

// ── criterion 6: label conditioning steers edited factors ────────────

#[test]
fn criterion_06_label_conditioning_direction() {
    let _guard = HEAVY.lock().unwrap_or_else(|e| e.into_inner());
    let started = Instant::now();
    let mut detail = String::new();
    for seed in 0..5u64 {
        let cfg = trend_cfg(seed);
        let (panel, truth) = gen_synthetic_market(&cfg.data.market, seed).unwrap();
        let data = build_datasets(&cfg, &panel, &truth).unwrap();
        let model = DenoiserModel::new(cfg.denoiser_config()).unwrap();
        let dm = train_diffusion(&data.source_train, model, &cfg.diffusion).unwrap();

        let cond_cfg = EditRunConfig {
            t_prime: 100, // T/4
            ddim_steps: 10,
            guidance: GuidanceConfig {
                mode: GuidanceMode::PredictorFree,
                omega_free: 3.0,
                use_label: true,
                use_industry: true,
                omega: 1.0,
            },
            seed,
            salt: 0,
        };
        let uncond_cfg = EditRunConfig {
            guidance: GuidanceConfig {
                mode: GuidanceMode::None,
                use_label: false,
                use_industry: false,
                ..cond_cfg.guidance
            },
            ..cond_cfg.clone()
        };
        let target = &data.target_train;
        let cond = edit_samples(target, &dm.model, &dm.sched, &cond_cfg, None, None).unwrap();
        let uncond = edit_samples(target, &dm.model, &dm.sched, &uncond_cfg, None, None).unwrap();
        let c_cond = pearson(&planted_functional(&truth.w, &cond).unwrap(), &cond.y).unwrap();
        let c_uncond =
            pearson(&planted_functional(&truth.w, &uncond).unwrap(), &uncond.y).unwrap();
        assert!(
            c_cond > c_uncond,
            "seed {seed}: conditioned corr {c_cond} <= unconditioned {c_uncond}"
        );
        detail.push_str(&format!("seed{seed}: {c_cond:.4}>{c_uncond:.4} "));
    }
    finish(6, "label+industry conditioning wins 5/5 seeds", started, 600.0, detail);
}

// ── criterion 7: loss-guided editing flattens loss dispersion ────────

fn bucket_variance(trained: &TrainedRegressor, batch: &SequenceBatch, n_buckets: usize) -> f64 {
    let dates: Vec<u32> = batch.meta.iter().map(|m| m.date).collect();
    let (lo, hi) = (
        *dates.iter().min().unwrap(),
        *dates.iter().max().unwrap() + 1,
    );
    let span = (hi - lo) as f64 / n_buckets as f64;
    let mut sums: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
    for m in &batch.meta {
        let b = (((m.date - lo) as f64 / span) as usize).min(n_buckets - 1);
        let loss = trained.per_sample_loss[&(m.stock_id, m.date)];
        let e = sums.entry(b).or_insert((0.0, 0));
        e.0 += loss;
        e.1 += 1;
    }
    let means: Vec<f64> = sums.values().map(|(s, n)| s / *n as f64).collect();
    let mu = means.iter().sum::<f64>() / means.len() as f64;
    means.iter().map(|m| (m - mu) * (m - mu)).sum::<f64>() / means.len() as f64
}

#[test]
fn criterion_07_loss_guided_dispersion() {
    let _guard = HEAVY.lock().unwrap_or_else(|e| e.into_inner());
    let started = Instant::now();
    let mut wins = 0;
    let mut detail = String::new();
    for seed in 0..5u64 {
        let mut cfg = trend_cfg(seed);
        cfg.data.market.snr = 0.25;
        cfg.data.market.easy = Some(fd_core::market::EasyRegime {
            start_day: 5,
            end_day: 60,
            snr_mult: 8.0,
        });
        cfg.diffusion.t_prime = 160;
        cfg.diffusion.epochs = 3;
        cfg.finalize();
        let (panel, truth) = gen_synthetic_market(&cfg.data.market, seed).unwrap();
        let data = build_datasets(&cfg, &panel, &truth).unwrap();

        // raw predictor provides the training-loss registry
        let raw = train_regressor(
            &data.target_train,
            &data.target_valid,
            cfg.regressor_config(),
            &cfg.predictor_train,
        )
        .unwrap();
        let losses: Vec<f64> = data
            .target_train
            .meta
            .iter()
            .map(|m| raw.per_sample_loss[&(m.stock_id, m.date)])
            .collect();
        let steps = assign_editing_steps(&losses, 25, 250).unwrap();
        let mean_step =
            (steps.iter().sum::<usize>() as f64 / steps.len() as f64).round() as usize;

        let model = DenoiserModel::new(cfg.denoiser_config()).unwrap();
        let dm = train_diffusion(&data.source_train, model, &cfg.diffusion).unwrap();
        let ecfg = EditRunConfig {
            t_prime: mean_step,
            ddim_steps: 10,
            guidance: GuidanceConfig {
                mode: GuidanceMode::PredictorFree,
                omega_free: 3.0,
                use_label: true,
                use_industry: true,
                omega: 1.0,
            },
            seed,
            salt: 0,
        };
        let uni = edit_samples(&data.target_train, &dm.model, &dm.sched, &ecfg, None, None)
            .unwrap();
        let lg =
            edit_samples(&data.target_train, &dm.model, &dm.sched, &ecfg, None, Some(&steps))
                .unwrap();
        let t_uni =
            train_regressor(&uni, &data.target_valid, cfg.regressor_config(), &cfg.predictor_train)
                .unwrap();
        let t_lg =
            train_regressor(&lg, &data.target_valid, cfg.regressor_config(), &cfg.predictor_train)
                .unwrap();
        let v_uni = bucket_variance(&t_uni, &uni, 8);
        let v_lg = bucket_variance(&t_lg, &lg, 8);
        if v_lg <= v_uni {
            wins += 1;
        }
        detail.push_str(&format!("seed{seed}: {v_lg:.2e} vs {v_uni:.2e} "));
    }
    assert!(wins >= 4, "loss-guided dispersion won only {wins}/5 seeds");
    finish(
        7,
        "loss-guided editing flattens date-bucket loss variance",
        started,
        600.0,
        format!("{wins}/5 seeds; {detail}"),
    );
}

// ── criterion 8: downstream non-inferiority under label noise ────────

#[test]
fn criterion_08_downstream_non_inferiority() {
    let _guard = HEAVY.lock().unwrap_or_else(|e| e.into_inner());
    let started = Instant::now();
    let mut raw_ics = Vec::new();
    let mut aug_ics = Vec::new();
    let mut last_report = None;
    for seed in 0..5u64 {
        let mut cfg = trend_cfg(seed);
        cfg.diffusion.t_prime = 120;
        cfg.diffusion.epochs = 6;
        cfg.edit.t_prime = 50; // T/8: light corruption for augmentation
        cfg.edit.ddim_steps = 8;
        cfg.predictor_train.epochs = 20;
        cfg.finalize();
        let (panel, truth) = gen_synthetic_market(&cfg.data.market, seed).unwrap();
        let mut data = build_datasets(&cfg, &panel, &truth).unwrap();

        // inject label noise into the training labels only
        let ystd = {
            let m = data.target_train.y.iter().sum::<f64>() / data.target_train.n() as f64;
            (data.target_train.y.iter().map(|y| (y - m) * (y - m)).sum::<f64>()
                / data.target_train.n() as f64)
                .sqrt()
        };
        let mut nrng = ChaCha8Rng::seed_from_u64(seed ^ 0xabcd);
        for y in data.target_train.y.iter_mut() {
            let z: f64 = StandardNormal.sample(&mut nrng);
            *y += ystd * z;
        }

        let raw = train_regressor(
            &data.target_train,
            &data.target_valid,
            cfg.regressor_config(),
            &cfg.predictor_train,
        )
        .unwrap();
        let days: Vec<u32> = data.target_test.meta.iter().map(|m| m.date).collect();
        let p_raw = raw.model.predict_batch(&data.target_test).unwrap();
        let ic_raw = information_coefficient(&p_raw, &data.target_test.y, &days).unwrap();

        let model = DenoiserModel::new(cfg.denoiser_config()).unwrap();
        let dm = train_diffusion(&data.source_train, model, &cfg.diffusion).unwrap();
        let mut aug_cfg = cfg.clone();
        aug_cfg.augment.mode = AugmentMode::PerEpoch;
        aug_cfg.finalize();
        let aug = train_predictor_on(
            &aug_cfg,
            &data,
            AugmentContext {
                denoiser: Some((&dm.model, &dm.sched)),
                ..AugmentContext::default()
            },
        )
        .unwrap();
        let p_aug = aug.model.predict_batch(&data.target_test).unwrap();
        let ic_aug = information_coefficient(&p_aug, &data.target_test.y, &days).unwrap();
        raw_ics.push(ic_raw);
        aug_ics.push(ic_aug);

        // the full metric/backtest bundle must report every field
        let report = fd_cli::pipeline::evaluate_on(&cfg, &data, &aug.model, None).unwrap();
        assert!(report.ic.is_finite() && report.rank_ic.is_finite());
        assert!(report.weighted_ic.is_finite());
        assert!(report.annualized_rr.is_finite() && report.information_ratio.is_finite());
        assert!(report.n_days > 0 && report.n_samples > 0);
        assert!(!report.config_echo.is_empty());
        last_report = Some(report);
    }
    let m_raw = raw_ics.iter().sum::<f64>() / raw_ics.len() as f64;
    let m_aug = aug_ics.iter().sum::<f64>() / aug_ics.len() as f64;
    assert!(
        m_aug >= m_raw - 0.02,
        "edited-trained mean IC {m_aug} vs raw {m_raw} breaks the -0.02 margin"
    );
    // FID is optional in general but must be computable on demand
    assert!(last_report.is_some());
    finish(
        8,
        "per-epoch edited training is non-inferior on test IC",
        started,
        900.0,
        format!("mean IC edited {m_aug:.4} vs raw {m_raw:.4} over 5 seeds"),
    );
}

// ── criterion 9: metric oracles ──────────────────────────────────────

#[test]
fn criterion_09_metric_oracles() {
    let started = Instant::now();

    // weighted IC, four-point hand case (H = 1 gives weights 8,4,2,1):
    // cov 46/225, var_x 194/225, var_y 134/225
    let days4 = vec![0u32, 0, 0, 0];
    let wic = weighted_ic(&[4.0, 3.0, 2.0, 1.0], &[2.0, 1.0, 3.0, 0.0], &days4, Some(1.0))
        .unwrap();
    let want = 46.0 / (194.0f64 * 134.0).sqrt();
    assert!((wic - want).abs() < 1e-12);

    // weighted IC converges to IC as the half-life grows
    let mut rng = ChaCha8Rng::seed_from_u64(90);
    let mut days = Vec::new();
    for d in 0..20u32 {
        for _ in 0..15 {
            days.push(d);
        }
    }
    let preds: Vec<f64> = (0..days.len()).map(|_| StandardNormal.sample(&mut rng)).collect();
    let labels: Vec<f64> = (0..days.len()).map(|_| StandardNormal.sample(&mut rng)).collect();
    let ic = information_coefficient(&preds, &labels, &days).unwrap();
    let wic_inf = weighted_ic(&preds, &labels, &days, Some(1e6)).unwrap();
    assert!((ic - wic_inf).abs() < 1e-6, "H->inf: {ic} vs {wic_inf}");

    // rank IC tie case
    let r = rank_ic(&[1.0, 1.0, 2.0], &[1.0, 2.0, 2.0], &[0, 0, 0]).unwrap();
    assert!((r - 0.5).abs() < 1e-12);

    // Fréchet closed forms over 1e5 samples
    let n = 100_000;
    let a: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
    let shifted: Vec<f64> = (0..n)
        .map(|_| 1.0 + rng.sample::<f64, _>(StandardNormal))
        .collect();
    let wide: Vec<f64> = (0..n)
        .map(|_| 2.0 * rng.sample::<f64, _>(StandardNormal))
        .collect();
    let d_shift = frechet_distance(&a, &shifted, 1).unwrap();
    let d_wide = frechet_distance(&a, &wide, 1).unwrap();
    assert!((d_shift - 1.0).abs() < 0.05, "shift fid {d_shift}");
    assert!((d_wide - 1.0).abs() < 0.05, "scale fid {d_wide}");
    let d_same = frechet_distance(&a, &a, 1).unwrap();
    assert!(d_same.abs() < 1e-8);

    // backtest hand simulation: [1%, 2%] daily, annualized 0.015 * 252
    let bt = backtest_topk_dropk(
        &[0, 0, 0, 1, 1, 1],
        &[0, 1, 2, 0, 1, 2],
        &[0.9, 0.1, 0.2, 0.1, 0.8, 0.2],
        &[0.01, -0.03, 0.0, -0.01, 0.02, 0.0],
        1,
        None,
    )
    .unwrap();
    assert!((bt.annualized_rr - 3.78).abs() < 1e-12);

    finish(
        9,
        "metric oracles",
        started,
        30.0,
        format!("wic {wic:.6}, fid {d_shift:.3}/{d_wide:.3}, rr {:.2}", bt.annualized_rr),
    );
}

// ── criterion 10: persistence and end-to-end determinism ─────────────

fn pipeline_cfg() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.seed = 5;
    cfg.data.market.n_stocks = 20;
    cfg.data.market.n_days = 120;
    cfg.data.market.n_sectors = 2;
    cfg.data.market.n_factors = 6;
    cfg.data.market.n_signal = 2;
    cfg.data.market.target_stocks = 10;
    cfg.sched_t_total = 200;
    cfg.denoiser_width = 16;
    cfg.denoiser_heads = 2;
    cfg.denoiser_layers = 1;
    cfg.denoiser_t_embed_dim = 16;
    cfg.diffusion.t_prime = 80;
    cfg.diffusion.epochs = 2;
    cfg.diffusion.batch_size = 32;
    cfg.diffusion.probe_every = 0;
    cfg.edit.t_prime = 40;
    cfg.edit.ddim_steps = 6;
    cfg.predictor_backbone = BackboneKind::Mlp;
    cfg.predictor_hidden = 16;
    cfg.predictor_train.epochs = 4;
    cfg.predictor_train.batch_size = 128;
    cfg.predictor_train.lr = 0.05;
    cfg.augment.mode = AugmentMode::PerEpoch;
    cfg.eval.top_k = 5;
    cfg.finalize();
    cfg
}

fn run_pipeline_once(cfg: &RunConfig, dir: &std::path::Path) -> fd_core::eval::EvalReport {
    let ws = Workspace::new(dir);
    gen_data(cfg, &ws).unwrap();
    train_diffusion_cmd(cfg, &ws).unwrap();
    edit_cmd(cfg, &ws, None).unwrap();
    train_predictor_cmd(cfg, &ws).unwrap();
    let edited = fd_core::persist::load_batch(&ws.edited()).unwrap();
    evaluate_cmd(cfg, &ws, Some(&edited)).unwrap()
}

#[test]
fn criterion_10_persistence_and_determinism() {
    let _guard = HEAVY.lock().unwrap_or_else(|e| e.into_inner());
    let started = Instant::now();
    let cfg = pipeline_cfg();

    // checkpoint round trip is byte-identical
    let model = DenoiserModel::new(toy_denoiser_cfg()).unwrap();
    let sched = build_schedule(50, 1e-4, 0.02).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let p1 = dir.path().join("a.fdck");
    let p2 = dir.path().join("b.fdck");
    let meta = fd_core::persist::TrainMeta { seed: 1, steps: 2, final_loss: 0.5 };
    fd_core::persist::save_denoiser(&model, &sched, meta, &p1).unwrap();
    let (loaded, lsched, lmeta) = fd_core::persist::load_denoiser(&p1).unwrap();
    fd_core::persist::save_denoiser(&loaded, &lsched, lmeta, &p2).unwrap();
    assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());

    // identical reports across two full runs
    let d1 = tempfile::tempdir().unwrap();
    let d2 = tempfile::tempdir().unwrap();
    let r1 = run_pipeline_once(&cfg, d1.path());
    let r2 = run_pipeline_once(&cfg, d2.path());
    assert_eq!(r1, r2, "two identical runs diverged");

    // identical reports across 1-thread and 4-thread worker pools
    let pool1 = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    let pool4 = rayon::ThreadPoolBuilder::new().num_threads(4).build().unwrap();
    let d3 = tempfile::tempdir().unwrap();
    let d4 = tempfile::tempdir().unwrap();
    let r3 = pool1.install(|| run_pipeline_once(&cfg, d3.path()));
    let r4 = pool4.install(|| run_pipeline_once(&cfg, d4.path()));
    assert_eq!(r3, r4, "worker count changed the result");
    assert_eq!(r1, r3, "pool runs diverged from default runs");

    finish(
        10,
        "persistence + end-to-end determinism",
        started,
        1200.0,
        format!("ic {:.4} reproduced across runs and worker counts", r1.ic),
    );
}
