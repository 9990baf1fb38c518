//! Group-relative policy optimisation over SDE denoising trajectories.
//!
//! A group of `G` trajectories is sampled for one prompt and scored; the
//! rewards become standardized advantages, and the policy ascends the
//! clipped-ratio surrogate where the ratio compares the Gaussian transition
//! densities under the current and the rollout parameters.

use parauni_tensor::{AdamW, ParamGrads, ParamStore, Tape, Tensor, Var};

use crate::error::{domain, Error, Result};
use crate::flow::{
    logprob_var, sample_sde, sde_coefficients, transition_mean_var, DenoiseTrajectory, TimeGrid, Velocity,
};
use crate::rewards::Scorer;
use crate::rng::derive_seed;

#[derive(Clone, Debug, PartialEq)]
pub struct GrpoConfig {
    pub group_size: usize,
    pub clip_eps: f32,
    pub lr: f32,
    pub noise_level: f32,
    pub steps: usize,
    /// Optimisation passes over each group.
    pub inner_epochs: usize,
    /// Weight of the Gaussian KL to the rollout policy; 0 disables it.
    pub kl_coef: f32,
}

impl Default for GrpoConfig {
    fn default() -> Self {
        Self {
            group_size: 8,
            clip_eps: 0.2,
            lr: 1e-4,
            noise_level: 0.7,
            steps: 10,
            inner_epochs: 1,
            kl_coef: 0.0,
        }
    }
}

impl GrpoConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("grpo: {m}")));
        if self.group_size < 2 {
            return bad("group_size must be >= 2");
        }
        if !(self.clip_eps > 0.0) {
            return bad("clip_eps must be > 0");
        }
        if self.steps == 0 || self.inner_epochs == 0 {
            return bad("steps and inner_epochs must be >= 1");
        }
        if !(self.noise_level >= 0.0 && self.noise_level.is_finite()) {
            return bad("noise_level must be finite and >= 0");
        }
        if !(self.lr >= 0.0 && self.kl_coef >= 0.0) {
            return bad("lr and kl_coef must be >= 0");
        }
        Ok(())
    }
}

/// What GRPO needs from a generator: an optional prompt condition and a
/// velocity network, both evaluated on a tape.
pub trait Policy {
    fn dim(&self) -> usize;
    fn condition(&self, tape: &mut Tape<'_>, prompt: usize) -> Result<Option<Var>>;
    fn velocity(&self, tape: &mut Tape<'_>, x: Var, t: &[f32], cond: Option<Var>) -> Result<Var>;
}

/// A policy frozen at given parameters and condition, as a sampling field.
pub struct PolicyField<'a, P: ?Sized> {
    pub policy: &'a P,
    pub store: &'a ParamStore,
    pub cond: Option<&'a Tensor>,
}

impl<P: Policy + ?Sized> Velocity for PolicyField<'_, P> {
    fn dim(&self) -> usize {
        self.policy.dim()
    }

    fn eval(&self, x: &[f32], t: f32) -> Result<Vec<f32>> {
        let mut tape = Tape::new(self.store);
        let xv = tape.constant(Tensor::new(&[1, x.len()], x.to_vec())?);
        let cond = self.cond.map(|c| tape.constant(c.clone()));
        let v = self.policy.velocity(&mut tape, xv, &[t], cond)?;
        Ok(tape.data(v).to_vec())
    }
}

/// Condition value for a prompt, detached from any tape.
pub fn condition_value(policy: &(impl Policy + ?Sized), store: &ParamStore, prompt: usize) -> Result<Option<Tensor>> {
    let mut tape = Tape::new(store);
    let c = policy.condition(&mut tape, prompt)?;
    Ok(c.map(|c| tape.value(c).clone()))
}

#[derive(Clone, Debug, PartialEq)]
pub struct RolloutGroup {
    pub prompt: usize,
    pub trajectories: Vec<DenoiseTrajectory>,
    pub rewards: Vec<f32>,
    /// Per step, the rollout-time log-density of each trajectory's sampled
    /// transition; `None` for deterministic steps.
    pub old_logprobs: Vec<Option<Vec<f32>>>,
}

impl RolloutGroup {
    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }

    pub fn mean_reward(&self) -> f32 {
        (self.rewards.iter().map(|&r| r as f64).sum::<f64>() / self.rewards.len().max(1) as f64) as f32
    }
}

/// Samples `G` trajectories with seeds derived from `(seed, prompt, i)` and
/// scores their terminal states.
pub fn rollout_group(
    policy: &(impl Policy + ?Sized),
    store: &ParamStore,
    prompt: usize,
    cfg: &GrpoConfig,
    scorer: &(impl Scorer + ?Sized),
    seed: u64,
) -> Result<RolloutGroup> {
    cfg.validate()?;
    let cond = condition_value(policy, store, prompt)?;
    let field = PolicyField {
        policy,
        store,
        cond: cond.as_ref(),
    };
    let trajectories = (0..cfg.group_size)
        .map(|i| sample_sde(&field, cfg.steps, cfg.noise_level, derive_seed(seed, &[prompt as u64, i as u64])))
        .collect::<Result<Vec<_>>>()?;
    let rewards = trajectories
        .iter()
        .map(|tr| scorer.score(tr.terminal(), prompt))
        .collect::<Result<Vec<_>>>()?;

    let mut tape = Tape::new(store);
    let cond_var = policy.condition(&mut tape, prompt)?;
    let mut old_logprobs = Vec::with_capacity(cfg.steps);
    for k in 0..cfg.steps {
        let std = trajectories[0].steps[k].std;
        if std > 0.0 {
            let lp = step_logprobs(&mut tape, policy, cond_var, &trajectories, k, cfg)?;
            old_logprobs.push(Some(tape.data(lp).to_vec()));
        } else {
            old_logprobs.push(None);
        }
    }
    Ok(RolloutGroup {
        prompt,
        trajectories,
        rewards,
        old_logprobs,
    })
}

/// Log-densities `[G]` of the sampled transition at step `k` under the
/// current parameters.
pub fn step_logprobs(
    tape: &mut Tape<'_>,
    policy: &(impl Policy + ?Sized),
    cond: Option<Var>,
    trajectories: &[DenoiseTrajectory],
    k: usize,
    cfg: &GrpoConfig,
) -> Result<Var> {
    let (x, next) = stack_step(trajectories, k)?;
    let mean = step_mean(tape, policy, cond, &x, k, cfg)?;
    let std = trajectories[0].steps[k].std;
    logprob_var(tape, mean, &next, std).map_err(|e| match e {
        Error::DegenerateDensity { .. } => Error::DegenerateDensity { step: k },
        e => e,
    })
}

fn step_mean(
    tape: &mut Tape<'_>,
    policy: &(impl Policy + ?Sized),
    cond: Option<Var>,
    x: &Tensor,
    k: usize,
    cfg: &GrpoConfig,
) -> Result<Var> {
    let grid = TimeGrid::new(cfg.steps)?;
    let t = grid.t(k);
    let (c, _) = sde_coefficients(&grid, k, cfg.noise_level);
    let g = x.shape()[0];
    let xv = tape.constant(x.clone());
    let v = policy.velocity(tape, xv, &vec![t; g], cond)?;
    transition_mean_var(tape, xv, v, t, grid.h(), c)
}

fn stack_step(trajectories: &[DenoiseTrajectory], k: usize) -> Result<(Tensor, Tensor)> {
    let g = trajectories.len();
    let dim = trajectories[0].states[0].len();
    let mut x = Vec::with_capacity(g * dim);
    let mut next = Vec::with_capacity(g * dim);
    for tr in trajectories {
        if tr.states.len() <= k + 1 {
            return Err(domain(format!("trajectory has no step {k}")));
        }
        x.extend_from_slice(&tr.states[k]);
        next.extend_from_slice(&tr.states[k + 1]);
    }
    Ok((Tensor::new(&[g, dim], x)?, Tensor::new(&[g, dim], next)?))
}

/// `(r - mean) / (std + 1e-8)` with the population standard deviation.
pub fn advantages(rewards: &[f32]) -> Result<Vec<f32>> {
    if rewards.len() < 2 {
        return Err(domain(format!("group of {} rewards; need >= 2", rewards.len())));
    }
    let n = rewards.len() as f64;
    let mean = rewards.iter().map(|&r| r as f64).sum::<f64>() / n;
    let var = rewards.iter().map(|&r| (r as f64 - mean).powi(2)).sum::<f64>() / n;
    let denom = var.sqrt() + 1e-8;
    Ok(rewards.iter().map(|&r| ((r as f64 - mean) / denom) as f32).collect())
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct UpdateReport {
    /// Surrogate objective before the (last) update.
    pub objective: f32,
    pub grad_norm: f32,
    /// Fraction of ratio terms outside the clip range.
    pub clip_fraction: f32,
    pub mean_ratio: f32,
    /// Whether an optimizer step was skipped because the gradient was zero.
    pub skipped: bool,
}

/// Gradient of the negated clipped surrogate averaged over group and
/// stochastic steps, plus diagnostics.
pub fn policy_gradient(
    policy: &(impl Policy + ?Sized),
    store: &ParamStore,
    group: &RolloutGroup,
    cfg: &GrpoConfig,
) -> Result<(ParamGrads, UpdateReport)> {
    cfg.validate()?;
    let adv = advantages(&group.rewards)?;
    let g = group.len();
    let mut tape = Tape::new(store);
    let cond = policy.condition(&mut tape, group.prompt)?;
    let adv_var = tape.constant(Tensor::new(&[g], adv)?);
    let (lo, hi) = (1.0 - cfg.clip_eps, 1.0 + cfg.clip_eps);

    let mut total: Option<Var> = None;
    let mut terms = 0usize;
    let (mut clipped, mut ratio_sum) = (0usize, 0.0f64);
    for k in 0..cfg.steps {
        let step = &group.trajectories[0].steps[k];
        let Some(old) = &group.old_logprobs[k] else {
            if k + 1 < cfg.steps || step.std > 0.0 {
                return Err(Error::DegenerateDensity { step: k });
            }
            continue;
        };
        let (x, next) = stack_step(&group.trajectories, k)?;
        let mean = step_mean(&mut tape, policy, cond, &x, k, cfg)?;
        let lp = logprob_var(&mut tape, mean, &next, step.std)?;
        let old_var = tape.constant(Tensor::new(&[g], old.clone())?);
        let log_ratio = tape.sub(lp, old_var)?;
        let ratio = tape.exp(log_ratio);
        for &r in tape.data(ratio) {
            ratio_sum += r as f64;
            if r < lo || r > hi {
                clipped += 1;
            }
        }
        let unclipped = tape.mul(ratio, adv_var)?;
        let clamped = tape.clamp(ratio, lo, hi);
        let clamped = tape.mul(clamped, adv_var)?;
        let surrogate = tape.minimum(unclipped, clamped)?;
        let mut s = tape.sum(surrogate, None)?;
        if cfg.kl_coef > 0.0 {
            let old_mean: Vec<f32> = group.trajectories.iter().flat_map(|tr| tr.steps[k].mean.clone()).collect();
            let old_mean = tape.constant(Tensor::new(&[g, x.shape()[1]], old_mean)?);
            let d = tape.sub(mean, old_mean)?;
            let sq = tape.mul(d, d)?;
            let kl = tape.sum(sq, None)?;
            let kl = tape.scale(kl, -cfg.kl_coef / (2.0 * step.std * step.std));
            s = tape.add(s, kl)?;
        }
        total = Some(match total {
            Some(acc) => tape.add(acc, s)?,
            None => s,
        });
        terms += g;
    }
    let Some(total) = total else {
        return Err(Error::DegenerateDensity { step: 0 });
    };
    let objective = tape.scale(total, 1.0 / terms as f32);
    let loss = tape.neg(objective);
    tape.backward(loss)?;
    let report = UpdateReport {
        objective: tape.data(objective)[0],
        grad_norm: 0.0,
        clip_fraction: clipped as f32 / terms as f32,
        mean_ratio: (ratio_sum / terms as f64) as f32,
        skipped: false,
    };
    Ok((tape.param_grads(), report))
}

/// One or more ascent steps on the surrogate for a rollout group. A pass
/// whose gradient is exactly zero leaves the parameters untouched.
pub fn policy_update(
    policy: &(impl Policy + ?Sized),
    store: &mut ParamStore,
    opt: &mut AdamW,
    group: &RolloutGroup,
    cfg: &GrpoConfig,
) -> Result<UpdateReport> {
    let mut report = UpdateReport::default();
    for _ in 0..cfg.inner_epochs {
        let (grads, r) = policy_gradient(policy, store, group, cfg)?;
        report = r;
        store.zero_grads();
        store.accumulate_grads(&grads);
        report.grad_norm = store.grad_norm().unwrap_or(0.0);
        if grads.entries.iter().all(|(_, g)| g.iter().all(|&v| v == 0.0)) {
            report.skipped = true;
            continue;
        }
        opt.step(store, cfg.lr);
    }
    Ok(report)
}
