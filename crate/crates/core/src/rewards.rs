//! Analytic stand-in rewards and the gradient-norm monitor.

use std::fmt;
use std::str::FromStr;

use parauni_tensor::ParamStore;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{domain, Error, Result};
use crate::rng::{derive_seed, rng_from};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum RewardKind {
    Alignment,
    Quality,
    Preference,
}

impl RewardKind {
    pub const ALL: [RewardKind; 3] = [RewardKind::Alignment, RewardKind::Quality, RewardKind::Preference];

    pub fn name(self) -> &'static str {
        match self {
            RewardKind::Alignment => "alignment",
            RewardKind::Quality => "quality",
            RewardKind::Preference => "preference",
        }
    }
}

impl fmt::Display for RewardKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for RewardKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "alignment" => Ok(RewardKind::Alignment),
            "quality" => Ok(RewardKind::Quality),
            "preference" => Ok(RewardKind::Preference),
            other => Err(Error::Config(format!("unknown reward kind {other:?}"))),
        }
    }
}

/// Anything that scores a flat sample for a prompt id.
pub trait Scorer {
    fn score(&self, sample: &[f32], prompt: usize) -> Result<f32>;
}

impl<F: Fn(&[f32], usize) -> f32> Scorer for F {
    fn score(&self, sample: &[f32], prompt: usize) -> Result<f32> {
        Ok(self(sample, prompt))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RewardReport {
    pub kind: RewardKind,
    pub value: f32,
    pub prompt: usize,
    pub sample: usize,
}

/// The three toy rewards over samples of a fixed dimension.
#[derive(Clone, Debug, PartialEq)]
pub struct ToyRewards {
    pub dim: usize,
    pub seed: u64,
    /// Alignment weight inside the preference reward.
    pub preference_weight: f32,
}

impl ToyRewards {
    pub fn new(dim: usize, seed: u64) -> Self {
        Self {
            dim,
            seed,
            preference_weight: 0.5,
        }
    }

    /// Unit-norm target direction for a prompt, a fixed seeded draw.
    pub fn target(&self, prompt: usize) -> Vec<f32> {
        let mut rng = rng_from(derive_seed(self.seed, &[0x7467_74, prompt as u64]));
        let mut v: Vec<f64> = (0..self.dim).map(|_| StandardNormal.sample(&mut rng)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 0.0 {
            v.iter_mut().for_each(|x| *x /= n);
        }
        v.into_iter().map(|x| x as f32).collect()
    }

    pub fn alignment(&self, sample: &[f32], prompt: usize) -> Result<f32> {
        self.check(sample)?;
        Ok(cosine(sample, &self.target(prompt)))
    }

    pub fn quality(&self, sample: &[f32]) -> Result<f32> {
        self.check(sample)?;
        Ok(quality_reward(sample))
    }

    pub fn preference(&self, sample: &[f32], prompt: usize, w: f32) -> Result<f32> {
        if !(0.0..=1.0).contains(&w) {
            return Err(domain(format!("preference weight {w} outside [0, 1]")));
        }
        let a = self.alignment(sample, prompt)?;
        let q = self.quality(sample)?;
        Ok(w * a + (1.0 - w) * q)
    }

    pub fn score_kind(&self, kind: RewardKind, sample: &[f32], prompt: usize) -> Result<f32> {
        match kind {
            RewardKind::Alignment => self.alignment(sample, prompt),
            RewardKind::Quality => self.quality(sample),
            RewardKind::Preference => self.preference(sample, prompt, self.preference_weight),
        }
    }

    /// A [`Scorer`] bound to one reward kind.
    pub fn scorer(&self, kind: RewardKind) -> KindScorer<'_> {
        KindScorer { rewards: self, kind }
    }

    fn check(&self, sample: &[f32]) -> Result<()> {
        if sample.len() != self.dim {
            return Err(domain(format!("sample length {} != {}", sample.len(), self.dim)));
        }
        if !sample.iter().all(|x| x.is_finite()) {
            return Err(domain("sample is not finite"));
        }
        Ok(())
    }
}

pub struct KindScorer<'a> {
    pub rewards: &'a ToyRewards,
    pub kind: RewardKind,
}

impl Scorer for KindScorer<'_> {
    fn score(&self, sample: &[f32], prompt: usize) -> Result<f32> {
        self.rewards.score_kind(self.kind, sample, prompt)
    }
}

/// Cosine similarity in f64, 0 when either vector has zero norm.
pub fn cosine(a: &[f32], b: &[f32]) -> f32 {
    let (mut dot, mut na, mut nb) = (0.0f64, 0.0f64, 0.0f64);
    for (x, y) in a.iter().zip(b) {
        let (x, y) = (*x as f64, *y as f64);
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (dot / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0) as f32
}

/// `exp(-|rms(sample) - 1|)`.
pub fn quality_reward(sample: &[f32]) -> f32 {
    if sample.is_empty() {
        return (-1.0f32).exp();
    }
    let sq: f64 = sample.iter().map(|&x| (x as f64) * (x as f64)).sum();
    let rms = (sq / sample.len() as f64).sqrt();
    (-(rms - 1.0).abs()).exp() as f32
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradNormRecord {
    pub epoch: usize,
    pub g: f32,
}

/// Global L2 norm over every trainable gradient in the store.
pub fn grad_norm(store: &ParamStore) -> Result<f32> {
    let mut any = false;
    let mut sq = 0.0f64;
    for (_, p) in store.iter() {
        if !p.value.requires_grad() {
            continue;
        }
        if let Some(g) = p.value.grad() {
            any = true;
            sq += g.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>();
        }
    }
    if !any {
        return Err(Error::NoGradients);
    }
    Ok(sq.sqrt() as f32)
}
