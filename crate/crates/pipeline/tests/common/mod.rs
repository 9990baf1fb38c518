#![allow(dead_code)]

use std::path::Path;

use parauni_pipeline::config::Config;
use parauni_pipeline::data::{self, SyntheticDataset};

/// A model and schedule small enough for a few seconds per full pipeline.
pub const TINY: &str = "\
model.layers = 6
model.width = 16
model.queries = 4
model.heads = 2
model.denoiser_width = 16
model.denoiser_depth = 1
data.train_prompts = 8
data.eval_prompts = 4
data.targets_per_prompt = 2
stage1.epochs = 2
stage1.batch_size = 4
stage2.epochs = 3
stage2.batch_size = 4
stage3.epochs_per_reward = 2
stage3.prompts_per_epoch = 2
grpo.group_size = 4
grpo.steps = 4
grpo.inner_epochs = 1
eval.steps = 4
eval.samples_per_prompt = 1
eval.draws = 1
";

/// [`TINY`] with the lines of `extra` replacing any base line of the same key.
pub fn with_overrides(extra: &str) -> String {
    let key = |l: &str| l.split('=').next().unwrap_or("").trim().to_string();
    let overridden: Vec<String> = extra.lines().map(key).collect();
    let mut out: String = TINY
        .lines()
        .filter(|l| !overridden.contains(&key(l)))
        .map(|l| format!("{l}\n"))
        .collect();
    out.push_str(extra);
    out
}

pub fn tiny(extra: &str) -> Config {
    Config::parse(&with_overrides(extra)).unwrap()
}

pub fn tiny_data(cfg: &Config) -> SyntheticDataset {
    data::generate(&cfg.data, cfg.run.seed).unwrap()
}

/// Tiny config text with output and data under `dir`.
pub fn tiny_text_in(dir: &Path, extra: &str) -> String {
    format!(
        "{}run.out_dir = {}\ndata.dir = {}\n",
        with_overrides(extra),
        dir.join("out").display(),
        dir.join("data").display()
    )
}
