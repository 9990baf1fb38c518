//! Flow matching on the linear path `x_t = (1 - t) x0 + t eps`.
//!
//! `t = 0` is data and `t = 1` is noise. Training regresses the velocity
//! `eps - x0`; sampling integrates from `t = 1` down to `t = 0`, either with
//! plain Euler steps (ODE) or with Euler–Maruyama steps of the
//! score-corrected SDE whose marginals match the ODE.

use parauni_tensor::{ParamStore, Tape, Tensor, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{domain, Error, Result};
use crate::rng::rng_from;

pub trait Schedule {
    fn alpha(&self, t: f32) -> f32;
    fn sigma(&self, t: f32) -> f32;
}

/// `alpha(t) = 1 - t`, `sigma(t) = t`.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LinearSchedule;

impl Schedule for LinearSchedule {
    fn alpha(&self, t: f32) -> f32 {
        1.0 - t
    }

    fn sigma(&self, t: f32) -> f32 {
        t
    }
}

/// `alpha(t)·x0 + sigma(t)·eps`.
pub fn forward_corrupt(schedule: &impl Schedule, x0: &[f32], t: f32, eps: &[f32]) -> Result<Vec<f32>> {
    if !(0.0..=1.0).contains(&t) {
        return Err(domain(format!("time {t} outside [0, 1]")));
    }
    if x0.len() != eps.len() {
        return Err(domain(format!(
            "sample of length {} and noise of length {} differ",
            x0.len(),
            eps.len()
        )));
    }
    let (a, s) = (schedule.alpha(t), schedule.sigma(t));
    Ok(x0.iter().zip(eps).map(|(x, e)| a * x + s * e).collect())
}

/// A velocity network evaluated on a tape: `x` is `[n, dim]` with one time
/// per row.
pub trait VelocityModel {
    fn dim(&self) -> usize;
    fn velocity(&self, tape: &mut Tape<'_>, x: Var, t: &[f32], cond: Option<Var>) -> Result<Var>;
}

/// A velocity field evaluated on a single flat sample.
pub trait Velocity {
    fn dim(&self) -> usize;
    fn eval(&self, x: &[f32], t: f32) -> Result<Vec<f32>>;
}

/// Adapts a [`VelocityModel`] plus its parameters and a fixed condition.
pub struct ModelVelocity<'a, M: ?Sized> {
    pub model: &'a M,
    pub store: &'a ParamStore,
    pub cond: Option<&'a Tensor>,
}

impl<M: VelocityModel + ?Sized> Velocity for ModelVelocity<'_, M> {
    fn dim(&self) -> usize {
        self.model.dim()
    }

    fn eval(&self, x: &[f32], t: f32) -> Result<Vec<f32>> {
        let mut tape = Tape::new(self.store);
        let xv = tape.constant(Tensor::new(&[1, x.len()], x.to_vec())?);
        let cond = self.cond.map(|c| tape.constant(c.clone()));
        let v = self.model.velocity(&mut tape, xv, &[t], cond)?;
        Ok(tape.data(v).to_vec())
    }
}

/// Times and noise for one flow-matching batch.
#[derive(Clone, Debug, PartialEq)]
pub struct FmDraw {
    pub t: Vec<f32>,
    pub eps: Vec<f32>,
}

impl FmDraw {
    /// `t ~ U(0, 1)` per row, standard normal noise per element.
    pub fn sample(n: usize, dim: usize, rng: &mut ChaCha8Rng) -> Self {
        let t = (0..n).map(|_| rng.random::<f32>()).collect();
        let eps = (0..n * dim).map(|_| rng.sample::<f32, _>(StandardNormal)).collect();
        Self { t, eps }
    }
}

/// Rows of clean samples `[n, dim]` sharing one condition.
pub struct FmBatch<'a> {
    pub x0: &'a Tensor,
    pub cond: Option<Var>,
}

/// Mean squared error between predicted velocity and `eps - x0` over every
/// element of every batch.
pub fn fm_loss_with(
    tape: &mut Tape<'_>,
    model: &(impl VelocityModel + ?Sized),
    batches: &[FmBatch<'_>],
    draws: &[FmDraw],
) -> Result<Var> {
    if batches.is_empty() || batches.iter().all(|b| b.x0.numel() == 0) {
        return Err(Error::Empty("batch"));
    }
    if batches.len() != draws.len() {
        return Err(domain("one draw per batch required"));
    }
    let dim = model.dim();
    let mut total: Option<Var> = None;
    let mut count = 0usize;
    for (batch, draw) in batches.iter().zip(draws) {
        let x0 = batch.x0;
        let n = x0.shape().first().copied().unwrap_or(0);
        if n == 0 {
            continue;
        }
        if x0.shape() != [n, dim] || draw.t.len() != n || draw.eps.len() != n * dim {
            return Err(domain(format!("batch {:?} does not match draw or dim {dim}", x0.shape())));
        }
        let mut xt = Vec::with_capacity(n * dim);
        let mut target = Vec::with_capacity(n * dim);
        for i in 0..n {
            let row = &x0.data()[i * dim..(i + 1) * dim];
            let eps = &draw.eps[i * dim..(i + 1) * dim];
            xt.extend(forward_corrupt(&LinearSchedule, row, draw.t[i], eps)?);
            target.extend(eps.iter().zip(row).map(|(e, x)| e - x));
        }
        let xt = tape.constant(Tensor::new(&[n, dim], xt)?);
        let target = tape.constant(Tensor::new(&[n, dim], target)?);
        let v = model.velocity(tape, xt, &draw.t, batch.cond)?;
        let diff = tape.sub(v, target)?;
        let sq = tape.mul(diff, diff)?;
        let s = tape.sum(sq, None)?;
        total = Some(match total {
            Some(acc) => tape.add(acc, s)?,
            None => s,
        });
        count += n * dim;
    }
    let total = total.expect("at least one nonempty batch");
    Ok(tape.scale(total, 1.0 / count as f32))
}

/// [`fm_loss_with`] on a single batch with draws taken from `rng`.
pub fn fm_loss(
    tape: &mut Tape<'_>,
    model: &(impl VelocityModel + ?Sized),
    x0: &Tensor,
    cond: Option<Var>,
    rng: &mut ChaCha8Rng,
) -> Result<Var> {
    let n = x0.shape().first().copied().unwrap_or(0);
    let draw = FmDraw::sample(n, model.dim(), rng);
    fm_loss_with(tape, model, &[FmBatch { x0, cond }], &[draw])
}

/// Uniform time grid `t_k = 1 - k/steps`, `k = 0..=steps`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TimeGrid {
    pub steps: usize,
}

impl TimeGrid {
    pub fn new(steps: usize) -> Result<Self> {
        if steps == 0 {
            return Err(domain("steps must be >= 1"));
        }
        Ok(Self { steps })
    }

    pub fn t(&self, k: usize) -> f32 {
        1.0 - k as f32 / self.steps as f32
    }

    pub fn h(&self) -> f32 {
        1.0 / self.steps as f32
    }
}

/// Drift correction factor `sigma²/(2t)` and per-step standard deviation
/// for step `k` at noise level `a`, where `sigma = a·t`. The last step is
/// deterministic.
pub fn sde_coefficients(grid: &TimeGrid, k: usize, a: f32) -> (f32, f32) {
    let t = grid.t(k);
    let sigma = a * t;
    let c = if sigma == 0.0 { 0.0 } else { sigma * sigma / (2.0 * t) };
    let std = if k + 1 == grid.steps { 0.0 } else { sigma * grid.h().sqrt() };
    (c, std)
}

/// Mean of the next state: `x - h·(v + c·(x + (1 - t)·v))`.
pub fn transition_mean(x: &[f32], v: &[f32], t: f32, h: f32, c: f32) -> Vec<f32> {
    if c == 0.0 {
        return x.iter().zip(v).map(|(x, v)| x - h * v).collect();
    }
    x.iter()
        .zip(v)
        .map(|(x, v)| x - h * (v + c * (x + (1.0 - t) * v)))
        .collect()
}

/// Standard normal noise of length `dim` from a seeded stream.
pub fn initial_noise(dim: usize, rng: &mut ChaCha8Rng) -> Vec<f32> {
    (0..dim).map(|_| rng.sample::<f32, _>(StandardNormal)).collect()
}

/// Euler states from `t = 1` to `t = 0`, `steps + 1` entries.
pub fn ode_trajectory(field: &(impl Velocity + ?Sized), steps: usize, seed: u64) -> Result<Vec<Vec<f32>>> {
    let grid = TimeGrid::new(steps)?;
    let mut rng = rng_from(seed);
    let mut x = initial_noise(field.dim(), &mut rng);
    let mut states = Vec::with_capacity(steps + 1);
    states.push(x.clone());
    for k in 0..steps {
        let v = field.eval(&x, grid.t(k))?;
        x = transition_mean(&x, &v, grid.t(k), grid.h(), 0.0);
        states.push(x.clone());
    }
    Ok(states)
}

pub fn sample_ode(field: &(impl Velocity + ?Sized), steps: usize, seed: u64) -> Result<Vec<f32>> {
    Ok(ode_trajectory(field, steps, seed)?.pop().expect("steps + 1 states"))
}

/// One sampled transition: the Gaussian `N(mean, std²·I)` it was drawn from.
#[derive(Clone, Debug, PartialEq)]
pub struct SdeStep {
    pub t: f32,
    pub mean: Vec<f32>,
    pub std: f32,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DenoiseTrajectory {
    pub states: Vec<Vec<f32>>,
    pub steps: Vec<SdeStep>,
    pub seed: u64,
    pub noise_level: f32,
}

impl DenoiseTrajectory {
    pub fn terminal(&self) -> &[f32] {
        self.states.last().expect("trajectory has states")
    }
}

/// Euler–Maruyama sampling with noise level `a`; `a = 0` reproduces
/// [`ode_trajectory`] exactly.
pub fn sample_sde(field: &(impl Velocity + ?Sized), steps: usize, a: f32, seed: u64) -> Result<DenoiseTrajectory> {
    if !(a >= 0.0 && a.is_finite()) {
        return Err(domain(format!("noise level {a} must be finite and >= 0")));
    }
    let grid = TimeGrid::new(steps)?;
    let mut rng = rng_from(seed);
    let dim = field.dim();
    let mut x = initial_noise(dim, &mut rng);
    let mut states = Vec::with_capacity(steps + 1);
    let mut records = Vec::with_capacity(steps);
    states.push(x.clone());
    for k in 0..steps {
        let t = grid.t(k);
        let v = field.eval(&x, t)?;
        let (c, std) = sde_coefficients(&grid, k, a);
        let mean = transition_mean(&x, &v, t, grid.h(), c);
        x = if std > 0.0 {
            mean.iter()
                .map(|m| m + std * rng.sample::<f32, _>(StandardNormal))
                .collect()
        } else {
            mean.clone()
        };
        records.push(SdeStep { t, mean, std });
        states.push(x.clone());
    }
    Ok(DenoiseTrajectory {
        states,
        steps: records,
        seed,
        noise_level: a,
    })
}

/// `log N(candidate; mean, std²·I)`.
pub fn transition_logprob(step: &SdeStep, candidate: &[f32]) -> Result<f64> {
    if step.std <= 0.0 {
        return Err(Error::DegenerateDensity { step: 0 });
    }
    if candidate.len() != step.mean.len() {
        return Err(domain("candidate and mean lengths differ"));
    }
    let s = step.std as f64;
    let d = candidate.len() as f64;
    let sq: f64 = candidate
        .iter()
        .zip(&step.mean)
        .map(|(x, m)| (*x as f64 - *m as f64).powi(2))
        .sum();
    Ok(-sq / (2.0 * s * s) - d * s.ln() - 0.5 * d * (2.0 * std::f64::consts::PI).ln())
}

/// Tape form of [`transition_mean`] over a batch `[n, dim]`.
pub fn transition_mean_var(tape: &mut Tape<'_>, x: Var, v: Var, t: f32, h: f32, c: f32) -> Result<Var> {
    let xs = tape.scale(x, 1.0 - h * c);
    let vs = tape.scale(v, -h * (1.0 + c * (1.0 - t)));
    Ok(tape.add(xs, vs)?)
}

/// Tape form of [`transition_logprob`]: one log-density per row, shape `[n]`.
pub fn logprob_var(tape: &mut Tape<'_>, mean: Var, next: &Tensor, std: f32) -> Result<Var> {
    if std <= 0.0 {
        return Err(Error::DegenerateDensity { step: 0 });
    }
    let d = *next.shape().last().unwrap_or(&1) as f32;
    let next = tape.constant(next.clone());
    let diff = tape.sub(next, mean)?;
    let sq = tape.mul(diff, diff)?;
    let s = tape.sum(sq, Some(1))?;
    let s = tape.scale(s, -1.0 / (2.0 * std * std));
    let norm = -d * std.ln() - 0.5 * d * (2.0 * std::f32::consts::PI).ln();
    Ok(tape.add_scalar(s, norm))
}
