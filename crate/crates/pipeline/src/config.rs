//! Run configuration: a flat UTF-8 file of `section.key = value` lines.
//!
//! Blank lines and `#` comments are ignored; unknown keys are errors. Every
//! key has a default, and [`Config::to_text`] prints the fully resolved set
//! in a form [`Config::parse`] reads back unchanged.

use std::fmt::Write as _;
use std::path::PathBuf;
use std::str::FromStr;

use parauni_core::analysis::Pooling;
use parauni_core::denoiser::DenoiserConfig;
use parauni_core::grpo::GrpoConfig;
use parauni_core::ldam::LdamConfig;
use parauni_core::lim::subset_preset;
use parauni_core::rewards::RewardKind;
use parauni_core::vlm::VlmConfig;
use parauni_core::{LayerSelection, ModelConfig};
use parauni_tensor::AdamWConfig;

use crate::data::{GRID, PROMPT_LEN, VOCAB};
use crate::error::{config, Result};

/// Env var that overrides `run.seed`.
pub const SEED_ENV: &str = "PARAUNI_SEED";

/// Which layers condition the generator, resolved against the layer count.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum LayerSpec {
    All,
    Last,
    Single(usize),
    Subset(Vec<usize>),
    /// A named preset such as `shallow` or `deep`.
    Preset(String),
}

impl LayerSpec {
    pub fn resolve(&self, layers: usize) -> Result<LayerSelection> {
        let check = |l: usize| {
            if l == 0 || l > layers {
                Err(config(format!("layer {l} outside 1..={layers}")))
            } else {
                Ok(l)
            }
        };
        Ok(match self {
            Self::All => LayerSelection::All,
            Self::Last => LayerSelection::Single(layers),
            Self::Single(l) => LayerSelection::Single(check(*l)?),
            Self::Subset(v) => {
                if v.is_empty() {
                    return Err(config("empty layer subset"));
                }
                LayerSelection::Subset(v.iter().map(|&l| check(l)).collect::<Result<_>>()?)
            }
            Self::Preset(name) => LayerSelection::Subset(subset_preset(name, layers)?),
        })
    }
}

impl std::fmt::Display for LayerSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::All => f.write_str("all"),
            Self::Last => f.write_str("last"),
            Self::Single(l) => write!(f, "single:{l}"),
            Self::Subset(v) => {
                let s: Vec<String> = v.iter().map(usize::to_string).collect();
                write!(f, "subset:{}", s.join(","))
            }
            Self::Preset(p) => f.write_str(p),
        }
    }
}

impl FromStr for LayerSpec {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        let num = |x: &str| x.trim().parse::<usize>().map_err(|e| format!("{x:?}: {e}"));
        Ok(match s {
            "all" => Self::All,
            "last" => Self::Last,
            _ => {
                if let Some(l) = s.strip_prefix("single:") {
                    Self::Single(num(l)?)
                } else if let Some(v) = s.strip_prefix("subset:") {
                    Self::Subset(v.split(',').map(num).collect::<std::result::Result<_, _>>()?)
                } else if ["shallow", "middle", "deep", "interleaved"].contains(&s) {
                    Self::Preset(s.to_string())
                } else {
                    return Err(format!("unknown layer selection {s:?}"));
                }
            }
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunSection {
    pub seed: u64,
    pub out_dir: PathBuf,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataSection {
    pub dir: PathBuf,
    pub train_prompts: usize,
    pub eval_prompts: usize,
    pub targets_per_prompt: usize,
    /// Pixel noise std of the Stage I (pretraining) targets.
    pub pretrain_noise: f32,
    /// Pixel noise std of the Stage II and eval targets.
    pub hq_noise: f32,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelSection {
    pub layers: usize,
    pub width: usize,
    pub queries: usize,
    pub heads: usize,
    pub lim_depth: usize,
    pub layer_embed: bool,
    pub denoiser_width: usize,
    pub denoiser_depth: usize,
    pub patch: usize,
    pub init_std: f32,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FmStage {
    pub epochs: u64,
    pub batch_size: usize,
    pub lr: f32,
    pub selection: LayerSpec,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RlStage {
    pub rewards: Vec<RewardKind>,
    pub epochs_per_reward: u64,
    pub prompts_per_epoch: usize,
    /// RL draws prompts from the first `prompt_pool` training prompts;
    /// 0 means all of them.
    pub prompt_pool: usize,
    pub selection: LayerSpec,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalSection {
    /// ODE steps when sampling for analyses.
    pub steps: usize,
    pub samples_per_prompt: usize,
    /// Fixed `(t, ε)` draws per eval target for the held-out loss.
    pub draws: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AnalysisSection {
    pub pooling: Pooling,
    pub regions: Vec<String>,
    pub reward: RewardKind,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Config {
    pub run: RunSection,
    pub data: DataSection,
    pub model: ModelSection,
    pub optim: AdamWConfig,
    pub stage1: FmStage,
    pub stage2: FmStage,
    pub stage3: RlStage,
    pub grpo: GrpoConfig,
    pub ldam: LdamConfig,
    pub eval: EvalSection,
    pub analysis: AnalysisSection,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            run: RunSection {
                seed: 0,
                out_dir: "runs/default".into(),
            },
            data: DataSection {
                dir: "data".into(),
                train_prompts: 48,
                eval_prompts: 16,
                targets_per_prompt: 4,
                pretrain_noise: 0.15,
                hq_noise: 0.03,
            },
            model: ModelSection {
                layers: 8,
                width: 32,
                queries: 8,
                heads: 2,
                lim_depth: 1,
                layer_embed: false,
                denoiser_width: 32,
                denoiser_depth: 2,
                patch: 8,
                init_std: 0.08,
            },
            optim: AdamWConfig::default(),
            stage1: FmStage {
                epochs: 20,
                batch_size: 8,
                lr: 3e-3,
                selection: LayerSpec::All,
            },
            stage2: FmStage {
                epochs: 30,
                batch_size: 8,
                lr: 2e-3,
                selection: LayerSpec::All,
            },
            stage3: RlStage {
                rewards: vec![RewardKind::Quality, RewardKind::Preference, RewardKind::Alignment],
                epochs_per_reward: 40,
                prompts_per_epoch: 4,
                prompt_pool: 4,
                selection: LayerSpec::All,
            },
            grpo: GrpoConfig {
                lr: 1e-3,
                group_size: 16,
                inner_epochs: 3,
                ..GrpoConfig::default()
            },
            ldam: LdamConfig::default(),
            eval: EvalSection {
                steps: 10,
                samples_per_prompt: 2,
                draws: 4,
            },
            analysis: AnalysisSection {
                pooling: Pooling::Mean,
                regions: vec!["shallow".into(), "middle".into(), "deep".into()],
                reward: RewardKind::Alignment,
            },
        }
    }
}

/// Text form of one config value.
trait Value: Sized {
    fn parse_value(s: &str) -> std::result::Result<Self, String>;
    fn render(&self) -> String;
}

macro_rules! plain_value {
    ($($t:ty),*) => {$(
        impl Value for $t {
            fn parse_value(s: &str) -> std::result::Result<Self, String> {
                s.parse().map_err(|e| format!("{e}"))
            }
            fn render(&self) -> String {
                self.to_string()
            }
        }
    )*};
}

plain_value!(u64, u32, usize, f32, bool, String, LayerSpec, RewardKind);

impl Value for PathBuf {
    fn parse_value(s: &str) -> std::result::Result<Self, String> {
        if s.is_empty() {
            return Err("empty path".into());
        }
        Ok(PathBuf::from(s))
    }
    fn render(&self) -> String {
        self.display().to_string()
    }
}

impl Value for Vec<RewardKind> {
    fn parse_value(s: &str) -> std::result::Result<Self, String> {
        s.split(',')
            .map(|k| k.trim().parse::<RewardKind>().map_err(|e| e.to_string()))
            .collect()
    }
    fn render(&self) -> String {
        self.iter().map(|k| k.name()).collect::<Vec<_>>().join(",")
    }
}

impl Value for Vec<String> {
    fn parse_value(s: &str) -> std::result::Result<Self, String> {
        Ok(s.split(',').map(|x| x.trim().to_string()).filter(|x| !x.is_empty()).collect())
    }
    fn render(&self) -> String {
        self.join(",")
    }
}

impl Value for (usize, usize) {
    fn parse_value(s: &str) -> std::result::Result<Self, String> {
        let (a, b) = s.split_once('-').ok_or_else(|| format!("expected lo-hi, got {s:?}"))?;
        let p = |x: &str| x.trim().parse::<usize>().map_err(|e| e.to_string());
        Ok((p(a)?, p(b)?))
    }
    fn render(&self) -> String {
        format!("{}-{}", self.0, self.1)
    }
}

impl Value for Pooling {
    fn parse_value(s: &str) -> std::result::Result<Self, String> {
        match s {
            "mean" => Ok(Pooling::Mean),
            "per_query" => Ok(Pooling::PerQuery),
            _ => Err(format!("unknown pooling {s:?}")),
        }
    }
    fn render(&self) -> String {
        match self {
            Pooling::Mean => "mean".into(),
            Pooling::PerQuery => "per_query".into(),
        }
    }
}

macro_rules! keys {
    ($($key:literal => $($field:ident).+;)*) => {
        impl Config {
            /// Every recognised key, in file order.
            pub const KEYS: &'static [&'static str] = &[$($key),*];

            fn set(&mut self, key: &str, value: &str) -> Result<()> {
                match key {
                    $($key => {
                        self.$($field).+ = Value::parse_value(value)
                            .map_err(|e| config(format!("{key} = {value:?}: {e}")))?;
                    })*
                    _ => return Err(config(format!("unknown key {key:?}"))),
                }
                Ok(())
            }

            fn entries(&self) -> Vec<(&'static str, String)> {
                vec![$(($key, self.$($field).+.render())),*]
            }
        }
    };
}

keys! {
    "run.seed" => run.seed;
    "run.out_dir" => run.out_dir;
    "data.dir" => data.dir;
    "data.train_prompts" => data.train_prompts;
    "data.eval_prompts" => data.eval_prompts;
    "data.targets_per_prompt" => data.targets_per_prompt;
    "data.pretrain_noise" => data.pretrain_noise;
    "data.hq_noise" => data.hq_noise;
    "model.layers" => model.layers;
    "model.width" => model.width;
    "model.queries" => model.queries;
    "model.heads" => model.heads;
    "model.lim_depth" => model.lim_depth;
    "model.layer_embed" => model.layer_embed;
    "model.denoiser_width" => model.denoiser_width;
    "model.denoiser_depth" => model.denoiser_depth;
    "model.patch" => model.patch;
    "model.init_std" => model.init_std;
    "optim.beta1" => optim.beta1;
    "optim.beta2" => optim.beta2;
    "optim.eps" => optim.eps;
    "optim.weight_decay" => optim.weight_decay;
    "stage1.epochs" => stage1.epochs;
    "stage1.batch_size" => stage1.batch_size;
    "stage1.lr" => stage1.lr;
    "stage1.selection" => stage1.selection;
    "stage2.epochs" => stage2.epochs;
    "stage2.batch_size" => stage2.batch_size;
    "stage2.lr" => stage2.lr;
    "stage2.selection" => stage2.selection;
    "stage3.rewards" => stage3.rewards;
    "stage3.epochs_per_reward" => stage3.epochs_per_reward;
    "stage3.prompts_per_epoch" => stage3.prompts_per_epoch;
    "stage3.prompt_pool" => stage3.prompt_pool;
    "stage3.selection" => stage3.selection;
    "grpo.group_size" => grpo.group_size;
    "grpo.clip_eps" => grpo.clip_eps;
    "grpo.lr" => grpo.lr;
    "grpo.noise_level" => grpo.noise_level;
    "grpo.steps" => grpo.steps;
    "grpo.inner_epochs" => grpo.inner_epochs;
    "grpo.kl_coef" => grpo.kl_coef;
    "ldam.enabled" => ldam.enabled;
    "ldam.spike_factor" => ldam.spike_factor;
    "ldam.threshold" => ldam.threshold;
    "ldam.gamma0" => ldam.gamma0;
    "ldam.alignment_band" => ldam.alignment_band;
    "ldam.quality_band" => ldam.quality_band;
    "ldam.preference_band" => ldam.preference_band;
    "ldam.use_grad_guidance" => ldam.use_grad_guidance;
    "ldam.use_reward_guidance" => ldam.use_reward_guidance;
    "ldam.resample_per_pass" => ldam.resample_per_pass;
    "eval.steps" => eval.steps;
    "eval.samples_per_prompt" => eval.samples_per_prompt;
    "eval.draws" => eval.draws;
    "analysis.pooling" => analysis.pooling;
    "analysis.regions" => analysis.regions;
    "analysis.reward" => analysis.reward;
}

impl Config {
    /// Defaults overridden by the lines of `text`, then validated.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen = std::collections::HashSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| config(format!("line {}: expected `key = value`", i + 1)))?;
            let key = key.trim();
            if !seen.insert(key.to_string()) {
                return Err(config(format!("line {}: duplicate key {key:?}", i + 1)));
            }
            cfg.set(key, value.trim())
                .map_err(|e| config(format!("line {}: {e}", i + 1)))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// The resolved configuration, one key per line.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let mut section = "";
        for (key, value) in self.entries() {
            let s = key.split('.').next().unwrap_or("");
            if s != section {
                if !section.is_empty() {
                    out.push('\n');
                }
                section = s;
            }
            let _ = writeln!(out, "{key} = {value}");
        }
        out
    }

    /// Applies the seed override from the environment, if set.
    pub fn apply_env(&mut self) -> Result<()> {
        if let Ok(v) = std::env::var(SEED_ENV) {
            self.run.seed = v
                .trim()
                .parse()
                .map_err(|e| config(format!("{SEED_ENV}={v:?}: {e}")))?;
        }
        Ok(())
    }

    pub fn model_config(&self) -> ModelConfig {
        let m = &self.model;
        let vlm = VlmConfig {
            layers: m.layers,
            width: m.width,
            queries: m.queries,
            vocab: VOCAB,
            heads: m.heads,
            max_prompt_len: PROMPT_LEN,
            init_std: m.init_std,
        };
        let denoiser = DenoiserConfig {
            dim: GRID * GRID,
            patch: m.patch,
            width: m.denoiser_width,
            cond_width: m.denoiser_width,
            heads: m.heads,
            depth: m.denoiser_depth,
            init_std: m.init_std,
        };
        ModelConfig::from_parts(vlm, m.lim_depth, m.layer_embed, denoiser)
    }

    pub fn validate(&self) -> Result<()> {
        self.model_config().validate()?;
        self.grpo.validate()?;
        self.ldam.validate()?;
        let d = &self.data;
        if d.train_prompts == 0 || d.eval_prompts == 0 || d.targets_per_prompt == 0 {
            return Err(config("data: prompt and target counts must be >= 1"));
        }
        if !(d.pretrain_noise >= 0.0 && d.hq_noise >= 0.0) {
            return Err(config("data: noise levels must be >= 0"));
        }
        for (name, s) in [("stage1", &self.stage1), ("stage2", &self.stage2)] {
            if s.batch_size == 0 || !(s.lr >= 0.0) {
                return Err(config(format!("{name}: batch_size must be >= 1 and lr >= 0")));
            }
            s.selection.resolve(self.model.layers)?;
        }
        let s3 = &self.stage3;
        if s3.rewards.is_empty() || s3.prompts_per_epoch == 0 {
            return Err(config("stage3: rewards and prompts_per_epoch must be nonempty"));
        }
        s3.selection.resolve(self.model.layers)?;
        if self.eval.steps == 0 || self.eval.samples_per_prompt == 0 || self.eval.draws == 0 {
            return Err(config("eval: steps, samples and draws must be >= 1"));
        }
        for r in &self.analysis.regions {
            subset_preset(r, self.model.layers)?;
        }
        let o = &self.optim;
        if !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) || !(o.eps > 0.0) || !(o.weight_decay >= 0.0)
        {
            return Err(config("optim: need 0 <= beta < 1, eps > 0, weight_decay >= 0"));
        }
        Ok(())
    }
}
