//! What each CLI subcommand does, as library calls.

use std::collections::BTreeMap;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use parauni_core::analysis::{region_ablation, similarity_matrix, single_layer_sweep, EvalPlan, SimilarityMatrix};
use parauni_core::flow::{sample_ode, sample_sde, ModelVelocity};
use parauni_core::lim::subset_preset;
use parauni_core::rewards::RewardKind;
use parauni_core::derive_seed;
use serde::Serialize;

use crate::checkpoint::Checkpoint;
use crate::config::Config;
use crate::data::{self, Manifest, SyntheticDataset};
use crate::error::{config, PipelineError, Result};
use crate::svg;
use crate::train::{EpochMetrics, Session, Stage, METRICS_HEADER};

pub const METRICS_FILE: &str = "metrics.csv";
pub const CONFIG_FILE: &str = "config.txt";

/// Reads, parses and validates a config file, then applies the
/// environment seed override.
pub fn load_config(path: &Path) -> Result<Config> {
    let text = fs::read_to_string(path).map_err(PipelineError::io(path))?;
    let mut cfg = Config::parse(&text)?;
    cfg.apply_env()?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn checkpoint_path(cfg: &Config, stage: Stage) -> PathBuf {
    cfg.run.out_dir.join(format!("stage{stage}.ckpt"))
}

pub fn gen_data(cfg: &Config, dir: &Path) -> Result<Manifest> {
    let ds = data::generate(&cfg.data, cfg.run.seed)?;
    data::write(dir, &ds, cfg.run.seed)
}

fn load_data(cfg: &Config) -> Result<SyntheticDataset> {
    Ok(data::load(&cfg.data.dir)?.0)
}

/// Session to train `stage` from: fresh for Stage I, otherwise the previous
/// stage's finished checkpoint or a partial checkpoint of `stage` itself.
pub fn prepare_session(cfg: Config, stage: Stage, resume: Option<&Path>) -> Result<Session> {
    let Some(path) = resume else {
        return match stage {
            Stage::One => Session::new(cfg),
            _ => Err(config(format!("stage {stage} needs --resume with a stage {} checkpoint", stage.number() - 1))),
        };
    };
    let ck = Checkpoint::load(path)?;
    let mut s = ck.restore_with(cfg)?;
    if ck.stage == stage {
        return Ok(s);
    }
    if Some(ck.stage) != stage.previous() {
        return Err(config(format!(
            "{}: stage {} checkpoint cannot start stage {stage}",
            path.display(),
            ck.stage
        )));
    }
    if !s.finished() {
        return Err(config(format!(
            "{}: stage {} stopped at epoch {} of {}; finish it first",
            path.display(),
            ck.stage,
            s.epoch,
            s.stage_epochs()
        )));
    }
    s.begin_stage(stage);
    Ok(s)
}

fn append_line(path: &Path, line: &str) -> Result<()> {
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(PipelineError::io(path))?;
    writeln!(f, "{line}").map_err(PipelineError::io(path))
}

pub struct TrainOutcome {
    pub checkpoint: PathBuf,
    pub metrics: Vec<EpochMetrics>,
}

/// Runs `stage` to completion, checkpointing and logging after every epoch.
pub fn train(
    cfg: Config,
    stage: Stage,
    resume: Option<&Path>,
    mut on_epoch: impl FnMut(&EpochMetrics),
) -> Result<TrainOutcome> {
    let mut session = prepare_session(cfg, stage, resume)?;
    let data = load_data(&session.config)?;
    let out = session.config.run.out_dir.clone();
    fs::create_dir_all(&out).map_err(PipelineError::io(&out))?;
    let cfg_path = out.join(CONFIG_FILE);
    fs::write(&cfg_path, session.config.to_text()).map_err(PipelineError::io(&cfg_path))?;
    let metrics_path = out.join(METRICS_FILE);
    if !metrics_path.exists() {
        append_line(&metrics_path, METRICS_HEADER)?;
    }
    let ckpt = checkpoint_path(&session.config, stage);
    // a resumed finished stage still leaves its checkpoint in place
    Checkpoint::capture(&session).save(&ckpt)?;
    let metrics = session.run_stage(&data, |s, m| {
        Checkpoint::capture(s).save(&ckpt)?;
        append_line(&metrics_path, &m.to_line())?;
        on_epoch(m);
        Ok(())
    })?;
    Ok(TrainOutcome { checkpoint: ckpt, metrics })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SampleMode {
    Ode,
    Sde,
}

#[derive(Clone, Debug, Serialize)]
pub struct SampleOutput {
    pub prompt: usize,
    pub tokens: Vec<u32>,
    pub mode: String,
    pub steps: usize,
    pub seed: u64,
    pub sample: Vec<f32>,
    pub rewards: BTreeMap<String, f32>,
}

/// Draws one sample for training prompt `prompt` with the checkpoint's
/// layer selection and masks.
pub fn sample(ckpt: &Path, prompt: usize, mode: SampleMode, steps: usize, seed: u64) -> Result<SampleOutput> {
    let s = Checkpoint::load(ckpt)?.restore()?;
    let data = load_data(&s.config)?;
    let tokens = data.hq.prompts.get(prompt).cloned().ok_or_else(|| {
        config(format!("prompt {prompt} out of range, {} training prompts", data.hq.len()))
    })?;
    let cond = s
        .model
        .condition_value(&s.store, &tokens, &s.selection(s.stage)?, &s.condition_masks(0)?)?;
    let field = ModelVelocity {
        model: &s.model.denoiser,
        store: &s.store,
        cond: Some(&cond),
    };
    let x = match mode {
        SampleMode::Ode => sample_ode(&field, steps, seed)?,
        SampleMode::Sde => sample_sde(&field, steps, s.config.grpo.noise_level, seed)?
            .terminal()
            .to_vec(),
    };
    let rewards = s.rewards();
    let mut scores = BTreeMap::new();
    for kind in [RewardKind::Alignment, RewardKind::Quality, RewardKind::Preference] {
        scores.insert(kind.name().to_string(), rewards.score_kind(kind, &x, prompt)?);
    }
    Ok(SampleOutput {
        prompt,
        tokens,
        mode: match mode {
            SampleMode::Ode => "ode".into(),
            SampleMode::Sde => "sde".into(),
        },
        steps,
        seed,
        sample: x,
        rewards: scores,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Analysis {
    Sweep,
    Similarity,
    Ablation,
}

impl Analysis {
    pub fn file_name(self) -> &'static str {
        match self {
            Self::Sweep => "sweep.csv",
            Self::Similarity => "similarity.csv",
            Self::Ablation => "ablation.csv",
        }
    }
}

fn eval_plan(cfg: &Config) -> EvalPlan {
    EvalPlan {
        samples_per_prompt: cfg.eval.samples_per_prompt,
        steps: cfg.eval.steps,
        seed: derive_seed(cfg.run.seed, &[0x616e_616c]),
    }
}

/// Similarity of encoded layer features averaged over prompts; layers are
/// reported as zero-norm if they are for any prompt.
pub fn mean_similarity(s: &Session, prompts: &[Vec<u32>]) -> Result<SimilarityMatrix> {
    let mut acc: Option<SimilarityMatrix> = None;
    for tokens in prompts {
        let feats = s.model.vlm.layer_features(&s.store, tokens)?;
        let encoded = s.model.lim.encode_all(&s.store, &feats)?;
        let m = similarity_matrix(&encoded, s.config.analysis.pooling)?;
        match &mut acc {
            None => acc = Some(m),
            Some(a) => {
                for (ra, rm) in a.values.iter_mut().zip(&m.values) {
                    for (x, y) in ra.iter_mut().zip(rm) {
                        *x += y;
                    }
                }
                a.zero_norm.extend(m.zero_norm);
            }
        }
    }
    let mut m = acc.ok_or(parauni_core::Error::Empty("prompts"))?;
    let n = prompts.len() as f64;
    for (i, row) in m.values.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            *v = if i == j { 1.0 } else { *v / n };
        }
    }
    m.zero_norm.sort_unstable();
    m.zero_norm.dedup();
    Ok(m)
}

/// Runs one analysis on the training prompts (the rewards' prompt ids) and
/// writes its CSV into `out`. Returns the CSV path and a one-line summary.
pub fn analyze(kind: Analysis, ckpt: &Path, out: &Path) -> Result<(PathBuf, String)> {
    let s = Checkpoint::load(ckpt)?.restore()?;
    let data = load_data(&s.config)?;
    let prompts = &data.hq.prompts;
    let plan = eval_plan(&s.config);
    let rewards = s.rewards();
    let (csv, summary) = match kind {
        Analysis::Sweep => {
            let reward = s.config.analysis.reward;
            let r = single_layer_sweep(&s.model, &s.store, prompts, &rewards.scorer(reward), &plan)?;
            let best = r
                .scores
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1))
                .map(|(i, v)| format!("best layer {} ({reward} {v:.4})", i + 1))
                .unwrap_or_default();
            (r.to_csv(), format!("sweep over {} layers, {best}", r.scores.len()))
        }
        Analysis::Similarity => {
            let m = mean_similarity(&s, prompts)?;
            let (adj, off) = m.adjacent_vs_offdiag();
            (
                m.to_csv(),
                format!("similarity {0}x{0}: adjacent mean {adj:.4}, off-diagonal mean {off:.4}", m.len()),
            )
        }
        Analysis::Ablation => {
            let layers = s.model.layers();
            let regions = s
                .config
                .analysis
                .regions
                .iter()
                .map(|r| Ok((r.clone(), subset_preset(r, layers)?)))
                .collect::<Result<Vec<_>>>()?;
            let kinds = [RewardKind::Quality, RewardKind::Preference, RewardKind::Alignment];
            let r = region_ablation(&s.model, &s.store, &regions, &kinds, &rewards, prompts, &plan)?;
            (r.to_csv(), format!("ablation of {} regions x {} rewards", regions.len(), kinds.len()))
        }
    };
    fs::create_dir_all(out).map_err(PipelineError::io(out))?;
    let path = out.join(kind.file_name());
    fs::write(&path, csv).map_err(PipelineError::io(&path))?;
    Ok((path, summary))
}

/// Renders a report CSV: heatmaps for similarity and ablation, otherwise a
/// line chart of the last column against the first.
pub fn plot(input: &Path, output: &Path) -> Result<()> {
    let text = fs::read_to_string(input).map_err(PipelineError::io(input))?;
    let table = svg::Table::parse(&text).map_err(|msg| PipelineError::Data {
        path: input.to_path_buf(),
        msg,
    })?;
    let title = input
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let doc = svg::render(&table, &title).map_err(|msg| PipelineError::Data {
        path: input.to_path_buf(),
        msg,
    })?;
    if let Some(dir) = output.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(PipelineError::io(dir))?;
    }
    fs::write(output, doc).map_err(PipelineError::io(output))
}
