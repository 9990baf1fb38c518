//! Layer analyses: per-layer conditioning sweeps, cross-layer similarity of
//! the encoded features, and reward sensitivity to removing layer regions.

use std::fmt::Write as _;

use parauni_tensor::{ParamStore, Tensor};

use crate::error::{Error, Result};
use crate::lim::{without, LayerMaskSet};
use crate::model::{LayerSelection, ParaUniModel};
use crate::rewards::{cosine, RewardKind, Scorer, ToyRewards};
use crate::rng::derive_seed;

/// Sampling settings shared by the sweep and the ablation.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalPlan {
    pub samples_per_prompt: usize,
    pub steps: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepReport {
    /// Mean score for layers `1..=L`.
    pub scores: Vec<f64>,
    /// Raw scores per layer in prompt-major, sample-minor order.
    pub raw: Vec<Vec<f32>>,
    pub prompts: usize,
}

impl SweepReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("layer,score\n");
        for (i, s) in self.scores.iter().enumerate() {
            let _ = writeln!(out, "{},{}", i + 1, s);
        }
        out
    }
}

fn scores_for(
    model: &ParaUniModel,
    store: &ParamStore,
    prompts: &[Vec<u32>],
    selection: &LayerSelection,
    scorers: &[&dyn Scorer],
    plan: &EvalPlan,
) -> Result<Vec<Vec<f32>>> {
    let masks = LayerMaskSet::new();
    let mut raw = vec![Vec::new(); scorers.len()];
    for (p, tokens) in prompts.iter().enumerate() {
        for s in 0..plan.samples_per_prompt {
            let seed = derive_seed(plan.seed, &[p as u64, s as u64]);
            let x = model.generate_ode(store, tokens, selection, &masks, plan.steps, seed)?;
            for (out, scorer) in raw.iter_mut().zip(scorers) {
                out.push(scorer.score(&x, p)?);
            }
        }
    }
    Ok(raw)
}

fn mean(xs: &[f32]) -> f64 {
    xs.iter().map(|&x| x as f64).sum::<f64>() / xs.len().max(1) as f64
}

/// Conditions on each layer alone and averages the scorer over prompts and
/// samples. Noise seeds are shared across layers.
pub fn single_layer_sweep(
    model: &ParaUniModel,
    store: &ParamStore,
    prompts: &[Vec<u32>],
    scorer: &dyn Scorer,
    plan: &EvalPlan,
) -> Result<SweepReport> {
    if prompts.is_empty() {
        return Err(Error::Empty("prompts"));
    }
    if plan.samples_per_prompt == 0 {
        return Err(Error::Empty("samples per prompt"));
    }
    let mut raw = Vec::with_capacity(model.layers());
    for layer in 1..=model.layers() {
        let mut r = scores_for(model, store, prompts, &LayerSelection::Single(layer), &[scorer], plan)?;
        raw.push(r.remove(0));
    }
    Ok(SweepReport {
        scores: raw.iter().map(|r| mean(r)).collect(),
        raw,
        prompts: prompts.len(),
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Pooling {
    /// Cosine of the query-averaged vectors.
    #[default]
    Mean,
    /// Cosine per query row, averaged afterwards.
    PerQuery,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityMatrix {
    pub values: Vec<Vec<f64>>,
    /// Layers (1-based) whose pooled vector had zero norm; their
    /// off-diagonal entries are 0.
    pub zero_norm: Vec<usize>,
}

impl SimilarityMatrix {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("i,j,value\n");
        for (i, row) in self.values.iter().enumerate() {
            for (j, v) in row.iter().enumerate() {
                let _ = writeln!(out, "{},{},{}", i + 1, j + 1, v);
            }
        }
        out
    }

    /// Mean of `S[i][i+1]` and mean of all off-diagonal entries.
    pub fn adjacent_vs_offdiag(&self) -> (f64, f64) {
        let n = self.values.len();
        if n < 2 {
            return (1.0, 1.0);
        }
        let adj = (0..n - 1).map(|i| self.values[i][i + 1]).sum::<f64>() / (n - 1) as f64;
        let mut off = 0.0;
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    off += self.values[i][j];
                }
            }
        }
        (adj, off / (n * (n - 1)) as f64)
    }
}

fn pooled(c: &Tensor) -> Vec<f32> {
    let cols = *c.shape().last().unwrap_or(&0);
    let rows = if cols == 0 { 0 } else { c.numel() / cols };
    let mut out = vec![0.0f64; cols];
    for r in 0..rows {
        for (o, &v) in out.iter_mut().zip(c.row(r)) {
            *o += v as f64;
        }
    }
    out.iter().map(|&v| (v / rows.max(1) as f64) as f32).collect()
}

fn norm_is_zero(v: &[f32]) -> bool {
    v.iter().all(|&x| x == 0.0)
}

/// Pairwise cosine similarity of encoded per-layer features `c_i`.
pub fn similarity_matrix(encoded: &[Tensor], pooling: Pooling) -> Result<SimilarityMatrix> {
    if encoded.is_empty() {
        return Err(Error::Empty("layer features"));
    }
    let n = encoded.len();
    for c in encoded {
        if c.shape() != encoded[0].shape() {
            return Err(Error::Domain("layer features differ in shape".into()));
        }
    }
    let mut values = vec![vec![0.0; n]; n];
    let mut zero_norm = Vec::new();
    match pooling {
        Pooling::Mean => {
            let p: Vec<Vec<f32>> = encoded.iter().map(pooled).collect();
            for (i, v) in p.iter().enumerate() {
                if norm_is_zero(v) {
                    zero_norm.push(i + 1);
                }
            }
            for i in 0..n {
                values[i][i] = 1.0;
                for j in i + 1..n {
                    let s = cosine(&p[i], &p[j]) as f64;
                    values[i][j] = s;
                    values[j][i] = s;
                }
            }
        }
        Pooling::PerQuery => {
            let cols = *encoded[0].shape().last().unwrap_or(&0);
            let rows = if cols == 0 { 0 } else { encoded[0].numel() / cols };
            for (i, c) in encoded.iter().enumerate() {
                if (0..rows).any(|r| norm_is_zero(c.row(r))) || rows == 0 {
                    zero_norm.push(i + 1);
                }
            }
            for i in 0..n {
                values[i][i] = 1.0;
                for j in i + 1..n {
                    let s = (0..rows)
                        .map(|r| cosine(encoded[i].row(r), encoded[j].row(r)) as f64)
                        .sum::<f64>()
                        / rows.max(1) as f64;
                    values[i][j] = s;
                    values[j][i] = s;
                }
            }
        }
    }
    Ok(SimilarityMatrix { values, zero_norm })
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub region: String,
    pub kind: RewardKind,
    pub baseline: f64,
    pub ablated: f64,
    pub delta: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationReport {
    pub baselines: Vec<(RewardKind, f64)>,
    pub rows: Vec<AblationRow>,
    /// Raw baseline scores per kind.
    pub raw_baseline: Vec<Vec<f32>>,
    /// Raw ablated scores per region, then per kind.
    pub raw_ablated: Vec<Vec<Vec<f32>>>,
}

impl AblationReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("region,reward,baseline,ablated,delta\n");
        for (kind, b) in &self.baselines {
            let _ = writeln!(out, "baseline,{kind},{b},{b},0");
        }
        for r in &self.rows {
            let _ = writeln!(out, "{},{},{},{},{}", r.region, r.kind, r.baseline, r.ablated, r.delta);
        }
        out
    }
}

/// Baseline integrates all layers; each region is removed in turn and the
/// rewards re-measured with the remaining layers.
pub fn region_ablation(
    model: &ParaUniModel,
    store: &ParamStore,
    regions: &[(String, Vec<usize>)],
    kinds: &[RewardKind],
    rewards: &ToyRewards,
    prompts: &[Vec<u32>],
    plan: &EvalPlan,
) -> Result<AblationReport> {
    if prompts.is_empty() {
        return Err(Error::Empty("prompts"));
    }
    let layers = model.layers();
    let mut complements = Vec::with_capacity(regions.len());
    for (_, region) in regions {
        if region.is_empty() {
            return Err(Error::Empty("region"));
        }
        if let Some(&layer) = region.iter().find(|&&l| l == 0 || l > layers) {
            return Err(Error::LayerIndex { layer, layers });
        }
        let keep = without(layers, region);
        if keep.is_empty() {
            return Err(Error::Empty("region complement"));
        }
        complements.push(keep);
    }
    let scorers: Vec<_> = kinds.iter().map(|&k| rewards.scorer(k)).collect();
    let dyn_scorers: Vec<&dyn Scorer> = scorers.iter().map(|s| s as &dyn Scorer).collect();
    let raw_baseline = scores_for(model, store, prompts, &LayerSelection::All, &dyn_scorers, plan)?;
    let baselines: Vec<(RewardKind, f64)> = kinds.iter().zip(&raw_baseline).map(|(&k, r)| (k, mean(r))).collect();
    let mut rows = Vec::new();
    let mut raw_ablated = Vec::with_capacity(regions.len());
    for ((name, _), keep) in regions.iter().zip(complements) {
        let raw = scores_for(model, store, prompts, &LayerSelection::Subset(keep), &dyn_scorers, plan)?;
        for ((&kind, base), r) in kinds.iter().zip(&baselines).zip(&raw) {
            let ablated = mean(r);
            rows.push(AblationRow {
                region: name.clone(),
                kind,
                baseline: base.1,
                ablated,
                delta: ablated - base.1,
            });
        }
        raw_ablated.push(raw);
    }
    Ok(AblationReport {
        baselines,
        rows,
        raw_baseline,
        raw_ablated,
    })
}
