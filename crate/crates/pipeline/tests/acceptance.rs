//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Runs without the libtest harness so the summary lines always print.
//! Pass criterion numbers as arguments to run a subset, e.g.
//! `cargo test -p parauni-pipeline --test acceptance -- 4 8`.

mod common;

use std::f64::consts::PI;
use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use parauni_core::analysis::{region_ablation, similarity_matrix, single_layer_sweep, EvalPlan, Pooling};
use parauni_core::denoiser::DenoiserConfig;
use parauni_core::flow::{
    fm_loss, forward_corrupt, ode_trajectory, sample_ode, sample_sde, FmDraw, LinearSchedule, ModelVelocity,
    VelocityModel,
};
use parauni_core::grpo::{advantages, policy_update, rollout_group, GrpoConfig};
use parauni_core::ldam::{gamma_schedule, transition, Decision, LdamConfig, LdamController, LdamState};
use parauni_core::lim::LayerMaskSet;
use parauni_core::rewards::{RewardKind, ToyRewards};
use parauni_core::toy::{GaussianVelocity, ToyMlp};
use parauni_core::vlm::VlmConfig;
use parauni_core::{derive_seed, rng_from, LayerSelection, ModelConfig, ParaUniModel};
use parauni_pipeline::checkpoint::Checkpoint;
use parauni_pipeline::config::{Config, LayerSpec};
use parauni_pipeline::data;
use parauni_pipeline::train::{Session, Stage};
use parauni_tensor::gradcheck::{op_rel_error, op_suite, output_shape, param_rel_error};
use parauni_tensor::{AdamW, AdamWConfig, ParamStore, Tape, Tensor};
use rand::Rng;
use rand_distr::StandardNormal;

type Outcome = Result<String, String>;

fn check(ok: bool, msg: impl Into<String>) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg.into())
    }
}

// ---- 1. gradient correctness ----

fn tiny_model(layers: usize) -> ModelConfig {
    let vlm = VlmConfig {
        layers,
        width: 8,
        queries: 3,
        vocab: 10,
        heads: 2,
        max_prompt_len: 4,
        init_std: 0.3,
    };
    let den = DenoiserConfig {
        dim: 8,
        patch: 4,
        width: 8,
        cond_width: 8,
        heads: 2,
        depth: 1,
        init_std: 0.3,
    };
    ModelConfig::from_parts(vlm, 1, false, den)
}

fn fm_loss_fd_error(seed: u64) -> f64 {
    let (model, mut store) = ParaUniModel::init(tiny_model(3), seed).unwrap();
    store.set_trainable_groups(&["queries", "lim", "diffusion"]);
    let ids = store.trainable_ids();
    let prompts: [&[u32]; 2] = [&[1, 2, 3], &[4, 5]];
    let mut rng = rng_from(derive_seed(seed, &[1]));
    let x0: Vec<Tensor> = (0..2).map(|_| Tensor::randn(&[2, 8], 1.0, &mut rng)).collect();
    let draws: Vec<FmDraw> = (0..2).map(|_| FmDraw::sample(2, 8, &mut rng)).collect();
    let items: Vec<(&[u32], &Tensor)> = prompts.iter().copied().zip(x0.iter()).collect();
    let sel = LayerSelection::All;
    let masks = LayerMaskSet::new();

    let mut tape = Tape::new(&store);
    let loss = model.fm_loss(&mut tape, &items, &sel, &masks, &draws).unwrap();
    tape.backward(loss).unwrap();
    let grads = tape.param_grads();
    drop(tape);

    // the loss rebuilt from its definition, squared error summed in f64
    let objective = |s: &ParamStore| -> f64 {
        let mut tape = Tape::new(s);
        let mut sq = 0.0f64;
        for ((tokens, x), d) in items.iter().zip(&draws) {
            let c = model.condition(&mut tape, tokens, &sel, &masks).unwrap();
            let mut xt = Vec::new();
            for i in 0..2 {
                xt.extend(forward_corrupt(&LinearSchedule, x.row(i), d.t[i], &d.eps[i * 8..(i + 1) * 8]).unwrap());
            }
            let xv = tape.constant(Tensor::new(&[2, 8], xt).unwrap());
            let v = model.denoiser.velocity(&mut tape, xv, &d.t, Some(c)).unwrap();
            for (j, &p) in tape.data(v).iter().enumerate() {
                sq += (p as f64 - (d.eps[j] as f64 - x.data()[j] as f64)).powi(2);
            }
        }
        sq / 32.0
    };
    param_rel_error(&store, &ids, &grads, 1e-3, &objective)
}

fn gradients() -> Outcome {
    let suite = op_suite();
    let mut worst = (0.0f64, "");
    for case in &suite {
        let out = output_shape(case);
        for seed in 0..10u64 {
            let inputs: Vec<Tensor> = case
                .shapes
                .iter()
                .enumerate()
                .map(|(i, s)| Tensor::randn(s, 1.0, &mut rng_from(seed * 31 + i as u64)))
                .collect();
            let w = Tensor::randn(&out, 1.0, &mut rng_from(seed ^ 0xabcd));
            let err = op_rel_error(&inputs, &*case.build, &w, 1e-3);
            check(err < 1e-3, format!("{} seed {seed}: relative error {err:.2e}", case.name))?;
            if err > worst.0 {
                worst = (err, case.name);
            }
        }
    }
    let mut e2e = 0.0f64;
    for seed in 0..10 {
        let err = fm_loss_fd_error(seed);
        check(err < 1e-3, format!("end-to-end fm_loss seed {seed}: relative error {err:.2e}"))?;
        e2e = e2e.max(err);
    }
    Ok(format!(
        "{} ops x 10 seeds, worst {:.1e} ({}); end-to-end fm_loss worst {e2e:.1e}",
        suite.len(),
        worst.0,
        worst.1
    ))
}

// ---- 2. flow-matching sanity ----

const GAUSS: GaussianVelocity = GaussianVelocity {
    dim: 1,
    mean: 1.5,
    std: 0.5,
};

fn gaussian_batch(n: usize, rng: &mut impl Rng) -> Tensor {
    let data = (0..n)
        .map(|_| (GAUSS.mean + GAUSS.std * rng.sample::<f64, _>(StandardNormal)) as f32)
        .collect();
    Tensor::new(&[n, 1], data).unwrap()
}

fn flow_matching() -> Outcome {
    // ∫₀¹ s²/((1−t)²s² + t²) dt = s·π/2
    let bayes = GAUSS.std * PI / 2.0;

    // Monte-Carlo cross-check of the closed form with the exact field
    let mut rng = rng_from(1);
    let n = 200_000;
    let mut acc = Vec::with_capacity(n);
    for _ in 0..n {
        let x0 = GAUSS.mean + GAUSS.std * rng.sample::<f64, _>(StandardNormal);
        let eps: f64 = rng.sample(StandardNormal);
        let t: f64 = rng.random();
        let xt = (1.0 - t) * x0 + t * eps;
        acc.push((GAUSS.at(xt, t) - (eps - x0)).powi(2));
    }
    let mc = acc.iter().sum::<f64>() / n as f64;
    let se = (acc.iter().map(|v| (v - mc).powi(2)).sum::<f64>() / (n as f64 - 1.0) / n as f64).sqrt();
    check((mc - bayes).abs() < 4.0 * se, format!("oracle MC {mc:.4} vs closed form {bayes:.4}"))?;

    let mut store = ParamStore::new();
    let mlp = ToyMlp::init(&mut store, 1, 32, "diffusion", 3).map_err(|e| e.to_string())?;
    let mut opt = AdamW::new(AdamWConfig {
        weight_decay: 0.0,
        ..AdamWConfig::default()
    });
    let steps = 3000;
    let mut rng = rng_from(2);
    for step in 0..steps {
        let lr = 3e-3 * (0.5 * (1.0 + (PI * step as f64 / steps as f64).cos())) as f32 + 1e-5;
        let x0 = gaussian_batch(256, &mut rng);
        let mut tape = Tape::new(&store);
        let loss = fm_loss(&mut tape, &mlp, &x0, None, &mut rng).unwrap();
        tape.backward(loss).unwrap();
        let grads = tape.param_grads();
        drop(tape);
        store.zero_grads();
        store.accumulate_grads(&grads);
        opt.step(&mut store, lr);
    }
    // held-out loss on fixed draws
    let mut rng = rng_from(99);
    let (mut total, chunks) = (0.0f64, 20);
    for _ in 0..chunks {
        let x0 = gaussian_batch(10_000, &mut rng);
        let mut tape = Tape::new(&store);
        let loss = fm_loss(&mut tape, &mlp, &x0, None, &mut rng).unwrap();
        total += tape.data(loss)[0] as f64;
    }
    let trained = total / chunks as f64;
    let rel = (trained - bayes) / bayes;
    check(rel.abs() < 0.10, format!("trained loss {trained:.4} vs Bayes {bayes:.4} ({:+.1}%)", 100.0 * rel))?;
    Ok(format!(
        "trained {trained:.4} vs Bayes-optimal {bayes:.4} ({:+.2}%), oracle MC {mc:.4}",
        100.0 * rel
    ))
}

// ---- 3. SDE/ODE consistency ----

fn moments(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    (m, xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0))
}

fn sde_ode() -> Outcome {
    let (model, store) = ParaUniModel::init(tiny_model(2), 8).unwrap();
    let cond = model
        .condition_value(&store, &[3, 1], &LayerSelection::All, &LayerMaskSet::new())
        .unwrap();
    let field = ModelVelocity {
        model: &model.denoiser,
        store: &store,
        cond: Some(&cond),
    };
    for seed in 0..10 {
        let sde = sample_sde(&field, 8, 0.0, seed).unwrap();
        check(sde.states == ode_trajectory(&field, 8, seed).unwrap(), format!("model, seed {seed}: a = 0 differs"))?;
        let g = sample_sde(&GAUSS, 50, 0.0, seed).unwrap();
        check(g.states == ode_trajectory(&GAUSS, 50, seed).unwrap(), format!("Gaussian, seed {seed}: a = 0 differs"))?;
    }
    let n = 10_000;
    let steps = 100;
    let ode: Vec<f64> = (0..n)
        .map(|i| sample_ode(&GAUSS, steps, i as u64).unwrap()[0] as f64)
        .collect();
    let (mo, vo) = moments(&ode);
    let mut worst = 0.0f64;
    for (j, a) in [0.3f32, 0.8].into_iter().enumerate() {
        let sde: Vec<f64> = (0..n)
            .map(|i| {
                sample_sde(&GAUSS, steps, a, 100_000 * (j as u64 + 1) + i as u64)
                    .unwrap()
                    .terminal()[0] as f64
            })
            .collect();
        let (ms, vs) = moments(&sde);
        let zm = (mo - ms).abs() / ((vo + vs) / n as f64).sqrt();
        let zv = (vo - vs).abs() / (2.0 * (vo * vo + vs * vs) / (n as f64 - 1.0)).sqrt();
        check(zm < 3.0 && zv < 3.0, format!("a = {a}: mean z {zm:.2}, variance z {zv:.2}"))?;
        worst = worst.max(zm).max(zv);
    }
    Ok(format!(
        "a = 0 bit-equal on 10 seeds; a ∈ {{0.3, 0.8}} within {worst:.2} SE of the ODE (mean {mo:.3}, var {vo:.3})"
    ))
}

// ---- 4. LDAM state machine ----

/// The controller loop written out independently of the library.
#[derive(Clone, Copy)]
struct Reference {
    g_prev: f32,
    r_prev: f32,
    n_cool: u64,
    r_s: u32,
    g_s: bool,
    n: u64,
}

impl Reference {
    fn step(&mut self, g: f32, r: f32, cfg: &LdamConfig) -> bool {
        self.n += 1;
        self.g_s |= g >= self.g_prev * cfg.spike_factor;
        if r <= self.r_prev {
            self.r_s += 1;
        }
        let fire = self.n_cool == 0
            && cfg.enabled
            && (self.g_s || !cfg.use_grad_guidance)
            && (self.r_s >= cfg.threshold || !cfg.use_reward_guidance);
        if fire {
            self.r_s = 0;
            self.g_s = false;
            self.n_cool = self.n;
        } else if self.n_cool > 0 {
            self.n_cool -= 1;
        }
        self.g_prev = g;
        self.r_prev = r;
        fire
    }
}

struct Walk<'a> {
    cfg: &'a LdamConfig,
    traces: u64,
    fires: u64,
}

impl Walk<'_> {
    fn go(
        &mut self,
        depth: usize,
        state: &LdamState,
        rf: Reference,
        g: f32,
        r: f32,
        last: Option<u64>,
    ) -> Result<(), String> {
        if depth == 0 {
            self.traces += 1;
            return Ok(());
        }
        let cfg = self.cfg;
        for choice in 0..4u8 {
            let (spike, decline) = (choice & 1 == 1, choice & 2 == 2);
            let g_n = if state.epoch == 0 { 1.0 } else if spike { g * 100.0 } else { g * 0.5 };
            let r_n = if decline { r - 1.0 } else { r + 1.0 };
            let before = state.clone();
            let mut s = state.clone();
            let fired = transition(&mut s, g_n, r_n, cfg).map_err(|e| e.to_string())?;
            let mut rf2 = rf;
            let expected = rf2.step(g_n, r_n, cfg);
            let r_s = before.r_s + u32::from(r_n <= before.r_prev);
            let gate = before.n_cool == 0
                && cfg.enabled
                && (before.g_s || g_n >= before.g_prev * cfg.spike_factor || !cfg.use_grad_guidance)
                && (r_s >= cfg.threshold || !cfg.use_reward_guidance);
            check(fired.is_some() == gate && gate == expected, format!("epoch {}: gate mismatch", s.epoch))?;
            let mut next = last;
            if let Some(gamma) = fired {
                self.fires += 1;
                check((s.r_s, s.g_s, s.n_cool) == (0, false, s.epoch), "counters not reset on an event")?;
                check(
                    gamma == gamma_schedule(g_n, before.g_prev, r_s, cfg).unwrap(),
                    "gamma differs from its schedule",
                )?;
                if let Some(e1) = last {
                    check(s.epoch > 2 * e1, format!("events at {e1} and {} violate the cooldown", s.epoch))?;
                }
                next = Some(s.epoch);
            }
            check((s.r_s, s.g_s, s.n_cool) == (rf2.r_s, rf2.g_s, rf2.n_cool), "state differs from reference")?;
            self.go(depth - 1, &s, rf2, g_n, r_n, next)?;
        }
        Ok(())
    }
}

fn ldam() -> Outcome {
    let reference = Reference {
        g_prev: f32::INFINITY,
        r_prev: 0.0,
        n_cool: 0,
        r_s: 0,
        g_s: false,
        n: 0,
    };
    let mut summary = Vec::new();
    for (name, cfg) in [
        ("default", LdamConfig::default()),
        (
            "threshold 2",
            LdamConfig {
                threshold: 2,
                ..LdamConfig::default()
            },
        ),
    ] {
        let mut w = Walk {
            cfg: &cfg,
            traces: 0,
            fires: 0,
        };
        w.go(12, &LdamState::default(), reference, 0.0, 0.0, None)?;
        check(w.traces == 4u64.pow(12) && w.fires > 0, format!("{name}: {} traces", w.traces))?;
        summary.push(format!("{name}: {} traces, {} events", w.traces, w.fires));
    }

    // stagnation then a spike fires exactly once
    let mut c = LdamController::new(LdamConfig::default(), RewardKind::Alignment, 8, &[2, 4], 1).unwrap();
    let mut g = 1.0f32;
    for e in 0..5 {
        g = 1.0 - 0.1 * e as f32;
        check(c.observe(g, 0.0).unwrap() == Decision::NoAction, "fired during stagnation")?;
    }
    let d = c.observe(g * 100.0, 0.0).unwrap();
    check(
        d == Decision::Perturb {
            layers: vec![7, 8],
            gamma: 0.1,
        },
        format!("stagnation + spike gave {d:?}"),
    )?;
    for _ in 0..20 {
        check(!c.observe(1.0, 0.0).unwrap().fired(), "refired without a new spike")?;
    }
    // steadily improving rewards never fire
    let mut c = LdamController::new(LdamConfig::default(), RewardKind::Quality, 8, &[2, 4], 1).unwrap();
    let mut g = 1.0f32;
    for e in 1..=40 {
        g = if g > 1e30 { 1.0 } else { g * 100.0 };
        check(!c.observe(g, e as f32).unwrap().fired(), "fired while rewards improve")?;
    }
    // an event at epoch 10 blocks the next 10 calls
    let cfg = LdamConfig {
        threshold: 10,
        ..LdamConfig::default()
    };
    let mut c = LdamController::new(cfg, RewardKind::Alignment, 8, &[1, 1], 3).unwrap();
    for _ in 0..9 {
        c.observe(1.0, 0.0).unwrap();
    }
    check(c.observe(100.0, 0.0).unwrap().fired() && c.state.epoch == 10, "no event at epoch 10")?;
    let mut g = 100.0f32;
    let mut again = None;
    for call in 1..=30u64 {
        g = if g > 1e20 { 1.0 } else { g * 100.0 };
        if c.observe(g, -(call as f32)).unwrap().fired() {
            again = Some(call);
            break;
        }
    }
    check(again.is_some_and(|c| c > 10), format!("refired after {again:?} calls"))?;
    Ok(format!("{}; 3 scripted traces", summary.join("; ")))
}

// ---- 5. GRPO mechanics ----

fn moving_average(xs: &[f64], end: usize, window: usize) -> f64 {
    xs[end - window..end].iter().sum::<f64>() / window as f64
}

fn grpo() -> Outcome {
    let mut rng = rng_from(5);
    let (mut worst_mean, mut worst_std) = (0.0f64, 0.0f64);
    for _ in 0..2000 {
        let g = rng.random_range(2..=32);
        let rs: Vec<f32> = (0..g).map(|_| rng.random_range(-5.0f32..5.0)).collect();
        if rs.iter().all(|&r| r == rs[0]) {
            continue;
        }
        let a = advantages(&rs).unwrap();
        let n = a.len() as f64;
        let m = a.iter().map(|&x| x as f64).sum::<f64>() / n;
        let sd = (a.iter().map(|&x| (x as f64 - m).powi(2)).sum::<f64>() / n).sqrt();
        worst_mean = worst_mean.max(m.abs());
        worst_std = worst_std.max((sd - 1.0).abs());
    }
    check(worst_mean < 1e-6 && worst_std < 1e-4, format!("advantage mean {worst_mean:.1e}, std error {worst_std:.1e}"))?;

    let cfg = GrpoConfig {
        group_size: 8,
        steps: 5,
        lr: 1e-2,
        ..GrpoConfig::default()
    };
    let mut store = ParamStore::new();
    let mlp = ToyMlp::init(&mut store, 3, 12, "diffusion", 1).unwrap();
    let constant = |_: &[f32], _: usize| 0.5f32;
    let group = rollout_group(&mlp, &store, 0, &cfg, &constant, 4).unwrap();
    let before = store.clone();
    let mut opt = AdamW::new(AdamWConfig::default());
    policy_update(&mlp, &mut store, &mut opt, &group, &cfg).unwrap();
    for id in store.ids() {
        check(store.value(id).data() == before.value(id).data(), "zero-advantage update moved parameters")?;
    }

    let mut wins = 0;
    let mut lines = Vec::new();
    for seed in 0..5u64 {
        let mut store = ParamStore::new();
        let mlp = ToyMlp::init(&mut store, 4, 16, "diffusion", seed).unwrap();
        let rewards = ToyRewards::new(4, derive_seed(seed, &[7]));
        let scorer = rewards.scorer(RewardKind::Alignment);
        let mut opt = AdamW::new(AdamWConfig::default());
        let mut trace = Vec::with_capacity(200);
        for epoch in 0..200u64 {
            let group = rollout_group(&mlp, &store, 0, &cfg, &scorer, derive_seed(seed, &[epoch])).unwrap();
            policy_update(&mlp, &mut store, &mut opt, &group, &cfg).unwrap();
            trace.push(group.mean_reward() as f64);
        }
        let (early, late) = (moving_average(&trace, 20, 20), moving_average(&trace, 200, 20));
        wins += usize::from(late > early);
        lines.push(format!("{early:.2}→{late:.2}"));
    }
    check(wins >= 4, format!("moving average rose on {wins}/5 seeds: {}", lines.join(", ")))?;
    Ok(format!(
        "advantages mean ≤ {worst_mean:.0e}, |std−1| ≤ {worst_std:.0e}; zero-advantage no-op; alignment MA20 rose on {wins}/5 seeds ({})",
        lines.join(", ")
    ))
}

// ---- 6. all layers vs last layer ----

fn stage_two_eval_loss(seed: u64, spec: LayerSpec) -> f64 {
    let mut cfg = Config::default();
    cfg.run.seed = seed;
    cfg.stage1.selection = spec.clone();
    cfg.stage2.selection = spec;
    let ds = data::generate(&cfg.data, seed).unwrap();
    let mut s = Session::new(cfg).unwrap();
    s.run_stage(&ds, |_, _| Ok(())).unwrap();
    s.begin_stage(Stage::Two);
    let m = s.run_stage(&ds, |_, _| Ok(())).unwrap();
    m.last().and_then(|m| m.eval_loss).unwrap()
}

fn all_vs_last() -> Outcome {
    let (mut all, mut last) = (Vec::new(), Vec::new());
    for seed in 0..5 {
        all.push(stage_two_eval_loss(seed, LayerSpec::All));
        last.push(stage_two_eval_loss(seed, LayerSpec::Last));
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (a, l) = (mean(&all), mean(&last));
    let direction = if a < l { "lower" } else { "not lower" };
    check(a <= l * 1.02, format!("all layers {a:.4} > last layer {l:.4} + 2%"))?;
    Ok(format!("eval fm_loss all {a:.4} vs last {l:.4} ({:+.1}%, {direction})", 100.0 * (a / l - 1.0)))
}

// ---- 7. analysis invariants ----

fn analysis() -> Outcome {
    let mut rng = rng_from(11);
    let mut cases = 0;
    for _ in 0..300 {
        let layers = rng.random_range(1..=10);
        let q = rng.random_range(1..=5);
        let d = rng.random_range(1..=8);
        let feats: Vec<Tensor> = (0..layers)
            .map(|_| {
                if rng.random_range(0..10) == 0 {
                    Tensor::zeros(&[q, d])
                } else {
                    Tensor::randn(&[q, d], 1.0, &mut rng)
                }
            })
            .collect();
        for pooling in [Pooling::Mean, Pooling::PerQuery] {
            let s = similarity_matrix(&feats, pooling).map_err(|e| e.to_string())?;
            for i in 0..layers {
                check(s.values[i][i] == 1.0, "diagonal is not 1")?;
                for j in 0..layers {
                    let v = s.values[i][j];
                    check((v - s.values[j][i]).abs() <= 1e-6, "not symmetric")?;
                    check((-1.0..=1.0).contains(&v), format!("entry {v} out of range"))?;
                }
            }
            cases += 1;
        }
    }

    let (model, store) = ParaUniModel::init(tiny_model(4), 3).unwrap();
    let prompts = vec![vec![1, 2, 3], vec![4, 5], vec![6, 7, 8, 9]];
    let rewards = ToyRewards::new(8, 5);
    let plan = EvalPlan {
        samples_per_prompt: 2,
        steps: 6,
        seed: 9,
    };
    let sweep = single_layer_sweep(&model, &store, &prompts, &rewards.scorer(RewardKind::Alignment), &plan)
        .map_err(|e| e.to_string())?;
    check(sweep.scores.len() == 4, format!("sweep has {} entries", sweep.scores.len()))?;
    let regions = vec![("low".to_string(), vec![1, 2]), ("high".to_string(), vec![4])];
    let kinds = [RewardKind::Quality, RewardKind::Alignment];
    let r = region_ablation(&model, &store, &regions, &kinds, &rewards, &prompts, &plan).map_err(|e| e.to_string())?;
    let mean = |xs: &[f32]| xs.iter().map(|&x| x as f64).sum::<f64>() / xs.len() as f64;
    for (k, (kind, base)) in r.baselines.iter().enumerate() {
        check(*base == mean(&r.raw_baseline[k]), format!("{kind} baseline does not match raw scores"))?;
    }
    for (ri, _) in regions.iter().enumerate() {
        for (k, _) in kinds.iter().enumerate() {
            let row = &r.rows[ri * kinds.len() + k];
            let ablated = mean(&r.raw_ablated[ri][k]);
            check(
                row.ablated == ablated && row.delta == ablated - row.baseline,
                format!("{} / {}: delta does not reconcile", row.region, row.kind),
            )?;
        }
    }
    Ok(format!(
        "{cases} similarity matrices valid; sweep length L; {} ablation deltas reconcile exactly",
        r.rows.len()
    ))
}

// ---- 8. checkpoint determinism ----

fn resume_matches(mut s: Session, ds: &data::SyntheticDataset) -> Result<(), String> {
    let bytes = Checkpoint::capture(&s).to_bytes();
    let back = Checkpoint::from_bytes(&bytes).map_err(|e| e.to_string())?;
    check(back.to_bytes() == bytes, "round trip is not bit-exact")?;
    let mut resumed = back.restore().map_err(|e| e.to_string())?;
    check(Checkpoint::capture(&resumed).to_bytes() == bytes, "restored session differs")?;
    let a = s.step_epoch(ds).map_err(|e| e.to_string())?;
    let b = resumed.step_epoch(ds).map_err(|e| e.to_string())?;
    check(a == b, format!("next epoch differs:\n  {}\n  {}", a.to_line(), b.to_line()))?;
    check(
        Checkpoint::capture(&s).to_bytes() == Checkpoint::capture(&resumed).to_bytes(),
        "state after the next epoch differs",
    )
}

fn checkpoints() -> Outcome {
    let cfg = common::tiny("stage1.epochs = 3\n");
    let ds = common::tiny_data(&cfg);
    let mut s = Session::new(cfg).unwrap();
    s.step_epoch(&ds).unwrap();
    resume_matches(s, &ds)?;

    let cfg = common::tiny(
        "stage3.rewards = quality,alignment\nldam.use_grad_guidance = false\nldam.use_reward_guidance = false\n",
    );
    let ds = common::tiny_data(&cfg);
    let mut s = Session::new(cfg).unwrap();
    s.begin_stage(Stage::Three);
    for _ in 0..3 {
        s.step_epoch(&ds).unwrap();
    }
    check(s.ldam.is_some() && !s.carried.is_empty(), "Stage III state has no masks to carry")?;
    let size = Checkpoint::capture(&s).to_bytes().len();
    resume_matches(s, &ds)?;
    Ok(format!("Stage I and Stage III (with LDAM masks, {size} bytes) resume bit-exactly"))
}

// ---- 9. end-to-end smoke ----

fn quintiles(xs: &[f64]) -> (f64, f64) {
    let q = (xs.len() / 5).max(1);
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    (mean(&xs[..q]), mean(&xs[xs.len() - q..]))
}

fn run(dir: &Path, args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_parauni"))
        .args(args)
        .current_dir(dir)
        .env_remove("PARAUNI_SEED")
        .output()
        .map_err(|e| e.to_string())?;
    check(
        out.status.success(),
        format!("`parauni {}` exited with {:?}: {}", args.join(" "), out.status.code(), String::from_utf8_lossy(&out.stderr)),
    )
}

fn smoke() -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let d = tmp.path();
    fs::write(d.join("cfg.txt"), "run.out_dir = out\ndata.dir = data\n").unwrap();
    run(d, &["gen-data", "--config", "cfg.txt"])?;
    run(d, &["train", "--stage", "1", "--config", "cfg.txt"])?;
    run(d, &["train", "--stage", "2", "--config", "cfg.txt", "--resume", "out/stage1.ckpt"])?;
    run(d, &["train", "--stage", "3", "--config", "cfg.txt", "--resume", "out/stage2.ckpt"])?;
    for kind in ["sweep", "similarity", "ablation"] {
        run(d, &["analyze", kind, "--checkpoint", "out/stage3.ckpt", "--out", "out/report"])?;
    }
    let log = fs::read_to_string(d.join("out/metrics.csv")).unwrap();
    let mut order: Vec<String> = Vec::new();
    let mut per: Vec<Vec<f64>> = Vec::new();
    for line in log.lines().skip(1).filter(|l| l.starts_with("3,")) {
        let f: Vec<&str> = line.split(',').collect();
        let r: f64 = f[5].parse().map_err(|_| format!("bad reward in {line}"))?;
        match order.iter().position(|k| k == f[2]) {
            Some(i) => per[i].push(r),
            None => {
                order.push(f[2].to_string());
                per.push(vec![r]);
            }
        }
    }
    check(
        order == ["quality", "preference", "alignment"],
        format!("reward order {order:?}"),
    )?;
    let mut parts = Vec::new();
    for (k, xs) in order.iter().zip(&per) {
        let (first, last) = quintiles(xs);
        check(last >= first, format!("{k}: first quintile {first:.4} > last {last:.4}"))?;
        parts.push(format!("{k} {first:.3}→{last:.3}"));
    }
    Ok(format!("all stages and analyses exit 0; reward quintile means {}", parts.join(", ")))
}

struct Criterion {
    id: u32,
    name: &'static str,
    limit: Duration,
    run: fn() -> Outcome,
}

fn main() {
    let criteria = [
        Criterion { id: 1, name: "gradient correctness", limit: Duration::from_secs(60), run: gradients },
        Criterion { id: 2, name: "flow-matching sanity", limit: Duration::from_secs(120), run: flow_matching },
        Criterion { id: 3, name: "SDE/ODE consistency", limit: Duration::from_secs(120), run: sde_ode },
        Criterion { id: 4, name: "LDAM state machine", limit: Duration::from_secs(10), run: ldam },
        Criterion { id: 5, name: "GRPO mechanics", limit: Duration::from_secs(600), run: grpo },
        Criterion { id: 6, name: "all layers vs last layer", limit: Duration::from_secs(900), run: all_vs_last },
        Criterion { id: 7, name: "analysis invariants", limit: Duration::from_secs(60), run: analysis },
        Criterion { id: 8, name: "checkpoint determinism", limit: Duration::from_secs(60), run: checkpoints },
        Criterion { id: 9, name: "end-to-end smoke", limit: Duration::from_secs(600), run: smoke },
    ];
    let wanted: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    for c in criteria.iter().filter(|c| wanted.is_empty() || wanted.contains(&c.id)) {
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(c.run)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        let took = start.elapsed();
        let outcome = match outcome {
            Ok(msg) if took > c.limit => Err(format!("{msg}; over the {}s budget", c.limit.as_secs())),
            other => other,
        };
        let (tag, msg) = match &outcome {
            Ok(m) => ("PASS", m),
            Err(m) => ("FAIL", m),
        };
        println!("{tag} {}. {} [{:.1}s / {}s]: {msg}", c.id, c.name, took.as_secs_f64(), c.limit.as_secs());
        failed += usize::from(outcome.is_err());
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
