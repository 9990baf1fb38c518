//! Synthetic prompt → image data: each prompt is four tokens quantizing the
//! centre, width and amplitude of a Gaussian bump on an 8×8 grid, and its
//! targets are noisy renders of that bump.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use parauni_core::{derive_seed, rng_from};
use parauni_tensor::Tensor;
use rand::seq::index::sample;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::DataSection;
use crate::error::{config, PipelineError, Result};

pub const GRID: usize = 8;
/// Quantization levels per bump parameter.
pub const LEVELS: u32 = 8;
/// Tokens per prompt: x, y, width, amplitude.
pub const PROMPT_LEN: usize = 4;
pub const VOCAB: usize = PROMPT_LEN * LEVELS as usize;

pub const MANIFEST: &str = "manifest.json";
const SPLITS: [&str; 3] = ["pretrain", "hq", "eval"];

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Bump {
    pub cx: f32,
    pub cy: f32,
    pub width: f32,
    pub amp: f32,
}

impl Bump {
    /// Decodes prompt tokens; field `i` owns tokens `8i..8i+8`.
    pub fn from_tokens(tokens: &[u32]) -> Option<Self> {
        if tokens.len() != PROMPT_LEN {
            return None;
        }
        let mut lv = [0f32; PROMPT_LEN];
        for (i, &t) in tokens.iter().enumerate() {
            let field = t / LEVELS;
            if field as usize != i {
                return None;
            }
            lv[i] = (t % LEVELS) as f32 / (LEVELS - 1) as f32;
        }
        Some(Self {
            cx: 1.0 + 5.0 * lv[0],
            cy: 1.0 + 5.0 * lv[1],
            width: 0.8 + 1.6 * lv[2],
            amp: 0.5 + 0.5 * lv[3],
        })
    }

    /// `2·amp·exp(−d²/2w²) − 1` per pixel, row-major.
    pub fn render(&self) -> Vec<f32> {
        let mut out = Vec::with_capacity(GRID * GRID);
        for y in 0..GRID {
            for x in 0..GRID {
                let d2 = (x as f32 - self.cx).powi(2) + (y as f32 - self.cy).powi(2);
                out.push(2.0 * self.amp * (-d2 / (2.0 * self.width * self.width)).exp() - 1.0);
            }
        }
        out
    }
}

pub fn prompt_tokens(levels: [u32; PROMPT_LEN]) -> Vec<u32> {
    levels.iter().enumerate().map(|(i, &l)| i as u32 * LEVELS + l).collect()
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Split {
    pub prompts: Vec<Vec<u32>>,
    /// Per prompt, its `[targets_per_prompt][64]` targets.
    pub targets: Vec<Vec<Vec<f32>>>,
}

impl Split {
    pub fn len(&self) -> usize {
        self.prompts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.prompts.is_empty()
    }

    /// Targets of prompt `i` as a `[n, 64]` tensor.
    pub fn target_tensor(&self, i: usize) -> Tensor {
        let rows = &self.targets[i];
        let data: Vec<f32> = rows.iter().flatten().copied().collect();
        Tensor::new(&[rows.len(), GRID * GRID], data).expect("targets are 64 wide")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticDataset {
    /// Noisier, centre-jittered targets for Stage I.
    pub pretrain: Split,
    /// Low-noise targets for Stage II and RL prompts.
    pub hq: Split,
    /// Held-out prompts with low-noise targets.
    pub eval: Split,
}

impl SyntheticDataset {
    pub fn split(&self, name: &str) -> Option<&Split> {
        match name {
            "pretrain" => Some(&self.pretrain),
            "hq" => Some(&self.hq),
            "eval" => Some(&self.eval),
            _ => None,
        }
    }
}

fn render_split(prompts: &[Vec<u32>], per_prompt: usize, noise: f32, jitter: f32, seed: u64) -> Split {
    let targets = prompts
        .iter()
        .enumerate()
        .map(|(p, tokens)| {
            let bump = Bump::from_tokens(tokens).expect("generated prompts decode");
            (0..per_prompt)
                .map(|k| {
                    let mut rng = rng_from(derive_seed(seed, &[p as u64, k as u64]));
                    let b = Bump {
                        cx: bump.cx + jitter * rng.random_range(-1.0f32..=1.0),
                        cy: bump.cy + jitter * rng.random_range(-1.0f32..=1.0),
                        ..bump
                    };
                    b.render()
                        .into_iter()
                        .map(|v| v + noise * rng.sample::<f32, _>(StandardNormal))
                        .collect()
                })
                .collect()
        })
        .collect();
    Split {
        prompts: prompts.to_vec(),
        targets,
    }
}

/// Deterministic in `(cfg, seed)`. Train and eval prompts are distinct
/// level combinations.
pub fn generate(cfg: &DataSection, seed: u64) -> Result<SyntheticDataset> {
    let total = cfg.train_prompts + cfg.eval_prompts;
    let space = (LEVELS as usize).pow(PROMPT_LEN as u32);
    if cfg.train_prompts == 0 || cfg.eval_prompts == 0 || cfg.targets_per_prompt == 0 {
        return Err(config("data: prompt and target counts must be >= 1"));
    }
    if total > space {
        return Err(config(format!("data: {total} prompts requested, only {space} exist")));
    }
    let mut rng = rng_from(derive_seed(seed, &[0x6461_7461]));
    let prompts: Vec<Vec<u32>> = sample(&mut rng, space, total)
        .into_iter()
        .map(|code| {
            let mut levels = [0u32; PROMPT_LEN];
            let mut c = code as u32;
            for l in levels.iter_mut() {
                *l = c % LEVELS;
                c /= LEVELS;
            }
            prompt_tokens(levels)
        })
        .collect();
    let (train, eval) = prompts.split_at(cfg.train_prompts);
    let n = cfg.targets_per_prompt;
    Ok(SyntheticDataset {
        pretrain: render_split(train, n, cfg.pretrain_noise, 0.3, derive_seed(seed, &[1])),
        hq: render_split(train, n, cfg.hq_noise, 0.0, derive_seed(seed, &[2])),
        eval: render_split(eval, n, cfg.hq_noise, 0.0, derive_seed(seed, &[3])),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub seed: u64,
    pub counts: BTreeMap<String, usize>,
    pub files: BTreeMap<String, String>,
    /// SHA-256 over the per-file digests in name order.
    pub checksum: String,
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn combined(files: &BTreeMap<String, String>) -> String {
    let mut h = Sha256::new();
    for (name, digest) in files {
        h.update(name.as_bytes());
        h.update(digest.as_bytes());
    }
    hex::encode(h.finalize())
}

/// Writes one JSON file per split plus the manifest.
pub fn write(dir: &Path, ds: &SyntheticDataset, seed: u64) -> Result<Manifest> {
    fs::create_dir_all(dir).map_err(PipelineError::io(dir))?;
    let mut files = BTreeMap::new();
    let mut counts = BTreeMap::new();
    for name in SPLITS {
        let split = ds.split(name).expect("known split");
        let bytes = serde_json::to_vec(split).expect("splits serialize");
        let path = dir.join(format!("{name}.json"));
        fs::write(&path, &bytes).map_err(PipelineError::io(&path))?;
        files.insert(format!("{name}.json"), sha256_hex(&bytes));
        counts.insert(name.to_string(), split.len());
    }
    let manifest = Manifest {
        seed,
        counts,
        checksum: combined(&files),
        files,
    };
    let path = dir.join(MANIFEST);
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, text).map_err(PipelineError::io(&path))?;
    Ok(manifest)
}

fn data_err(path: &Path, msg: impl Into<String>) -> PipelineError {
    PipelineError::Data {
        path: path.to_path_buf(),
        msg: msg.into(),
    }
}

/// Reads a dataset written by [`write`], verifying every digest.
pub fn load(dir: &Path) -> Result<(SyntheticDataset, Manifest)> {
    let mpath = dir.join(MANIFEST);
    let text = fs::read_to_string(&mpath).map_err(PipelineError::io(&mpath))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| data_err(&mpath, e.to_string()))?;
    if combined(&manifest.files) != manifest.checksum {
        return Err(data_err(&mpath, "manifest checksum mismatch"));
    }
    let mut splits = Vec::new();
    for name in SPLITS {
        let file = format!("{name}.json");
        let path: PathBuf = dir.join(&file);
        let bytes = fs::read(&path).map_err(PipelineError::io(&path))?;
        if manifest.files.get(&file) != Some(&sha256_hex(&bytes)) {
            return Err(data_err(&path, "digest does not match the manifest"));
        }
        let split: Split = serde_json::from_slice(&bytes).map_err(|e| data_err(&path, e.to_string()))?;
        if split.prompts.len() != split.targets.len()
            || split.targets.iter().any(|t| t.is_empty() || t.iter().any(|r| r.len() != GRID * GRID))
        {
            return Err(data_err(&path, "malformed split"));
        }
        splits.push(split);
    }
    let eval = splits.pop().unwrap();
    let hq = splits.pop().unwrap();
    let pretrain = splits.pop().unwrap();
    Ok((SyntheticDataset { pretrain, hq, eval }, manifest))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Config;

    #[test]
    fn tokens_decode_to_bump_parameters() {
        let b = Bump::from_tokens(&prompt_tokens([0, 7, 0, 7])).unwrap();
        assert_eq!((b.cx, b.cy, b.width, b.amp), (1.0, 6.0, 0.8, 1.0));
        assert!(Bump::from_tokens(&[8, 8, 16, 24]).is_none());
        assert!(Bump::from_tokens(&[0, 8]).is_none());
        let img = b.render();
        assert_eq!(img.len(), 64);
        // peak at (x=1, y=6)
        let peak = img.iter().cloned().fold(f32::MIN, f32::max);
        assert_eq!(img[6 * 8 + 1], peak);
        assert!((peak - 1.0).abs() < 1e-6);
    }

    #[test]
    fn generation_is_deterministic_and_disjoint() {
        let cfg = Config::default().data;
        let a = generate(&cfg, 3).unwrap();
        assert_eq!(a, generate(&cfg, 3).unwrap());
        assert_ne!(a.hq, generate(&cfg, 4).unwrap().hq);
        for p in &a.eval.prompts {
            assert!(!a.hq.prompts.contains(p));
        }
        let all: Vec<_> = a.hq.prompts.iter().chain(&a.eval.prompts).collect();
        for i in 0..all.len() {
            for j in i + 1..all.len() {
                assert_ne!(all[i], all[j]);
            }
        }
        for i in 0..a.hq.len() {
            for j in i + 1..a.hq.len() {
                assert_ne!(a.hq.targets[i], a.hq.targets[j]);
            }
        }
        assert_eq!(a.pretrain.prompts, a.hq.prompts);
        assert!(generate(&DataSection { train_prompts: 0, ..cfg }, 0).is_err());
    }
}
