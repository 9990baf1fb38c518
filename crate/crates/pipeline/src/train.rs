//! The three training stages over one model and optimizer.
//!
//! Stage I trains the learnable queries and the integration module against
//! the frozen transformer and denoiser; Stage II adds the denoiser and
//! switches to the low-noise data; Stage III runs GRPO over the reward list
//! in order, each reward with its own LDAM controller, carrying installed
//! masks forward.

use std::fmt;

use parauni_core::flow::FmDraw;
use parauni_core::grpo::{policy_update, rollout_group};
use parauni_core::ldam::{Decision, LdamController};
use parauni_core::lim::{LayerMaskSet, GROUP_LIM};
use parauni_core::denoiser::GROUP_DIFFUSION;
use parauni_core::rewards::{RewardKind, ToyRewards};
use parauni_core::vlm::GROUP_QUERIES;
use parauni_core::{derive_seed, rng_from, LayerSelection, ModelPolicy, ParaUniModel};
use parauni_tensor::{AdamW, ParamStore, Tape, Tensor};
use rand::seq::index::sample;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::config::Config;
use crate::data::{Split, SyntheticDataset, GRID};
use crate::error::{config, PipelineError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Stage {
    One,
    Two,
    Three,
}

impl Stage {
    pub fn from_number(n: u8) -> Result<Self> {
        match n {
            1 => Ok(Self::One),
            2 => Ok(Self::Two),
            3 => Ok(Self::Three),
            _ => Err(config(format!("stage must be 1, 2 or 3, got {n}"))),
        }
    }

    pub fn number(self) -> u8 {
        match self {
            Self::One => 1,
            Self::Two => 2,
            Self::Three => 3,
        }
    }

    pub fn trainable_groups(self) -> &'static [&'static str] {
        match self {
            Self::One => &[GROUP_QUERIES, GROUP_LIM],
            Self::Two | Self::Three => &[GROUP_QUERIES, GROUP_LIM, GROUP_DIFFUSION],
        }
    }

    pub fn previous(self) -> Option<Self> {
        match self {
            Self::One => None,
            Self::Two => Some(Self::One),
            Self::Three => Some(Self::Two),
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.number())
    }
}

pub const METRICS_HEADER: &str = "stage,epoch,reward_kind,loss,eval_loss,reward,grad_norm,decision,gamma";

/// One metrics record per epoch.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochMetrics {
    pub stage: Stage,
    /// 1-based epoch within the stage.
    pub epoch: u64,
    pub reward_kind: Option<RewardKind>,
    pub loss: Option<f64>,
    pub eval_loss: Option<f64>,
    pub reward: Option<f64>,
    pub grad_norm: f64,
    pub perturbed: bool,
    pub gamma: f32,
}

impl EpochMetrics {
    pub fn to_line(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.stage,
            self.epoch,
            self.reward_kind.map(RewardKind::name).unwrap_or(""),
            opt(self.loss),
            opt(self.eval_loss),
            opt(self.reward),
            self.grad_norm,
            if self.perturbed { "perturb" } else { "none" },
            self.gamma
        )
    }
}

/// Everything a run needs to continue bit-exactly.
#[derive(Clone, Debug)]
pub struct Session {
    pub config: Config,
    pub model: ParaUniModel,
    pub store: ParamStore,
    pub opt: AdamW,
    pub rng: ChaCha8Rng,
    pub stage: Stage,
    /// Completed epochs in the current stage.
    pub epoch: u64,
    pub ldam: Option<LdamController>,
    /// Masks kept from rewards already trained.
    pub carried: LayerMaskSet,
}

impl Session {
    /// Fresh model at the start of Stage I.
    pub fn new(config: Config) -> Result<Self> {
        config.validate()?;
        let (model, store) = ParaUniModel::init(config.model_config(), derive_seed(config.run.seed, &[0x6d6f_6465_6c]))?;
        let mut s = Self {
            opt: AdamW::new(config.optim.clone()),
            rng: rng_from(0),
            config,
            model,
            store,
            stage: Stage::One,
            epoch: 0,
            ldam: None,
            carried: LayerMaskSet::new(),
        };
        s.begin_stage(Stage::One);
        Ok(s)
    }

    /// Resets the optimizer, the data stream and the controllers for `stage`.
    pub fn begin_stage(&mut self, stage: Stage) {
        self.stage = stage;
        self.epoch = 0;
        self.store.set_trainable_groups(stage.trainable_groups());
        self.store.zero_grads();
        self.opt = AdamW::new(self.config.optim.clone());
        self.rng = rng_from(derive_seed(self.config.run.seed, &[0x7374_6167_65, stage.number() as u64]));
        self.ldam = None;
        self.carried = LayerMaskSet::new();
    }

    pub fn stage_epochs(&self) -> u64 {
        let c = &self.config;
        match self.stage {
            Stage::One => c.stage1.epochs,
            Stage::Two => c.stage2.epochs,
            Stage::Three => c.stage3.epochs_per_reward * c.stage3.rewards.len() as u64,
        }
    }

    pub fn finished(&self) -> bool {
        self.epoch >= self.stage_epochs()
    }

    pub fn selection(&self, stage: Stage) -> Result<LayerSelection> {
        let c = &self.config;
        let spec = match stage {
            Stage::One => &c.stage1.selection,
            Stage::Two => &c.stage2.selection,
            Stage::Three => &c.stage3.selection,
        };
        spec.resolve(c.model.layers)
    }

    pub fn rewards(&self) -> ToyRewards {
        ToyRewards::new(GRID * GRID, derive_seed(self.config.run.seed, &[0x7265_7761_7264]))
    }

    /// Masks the condition currently uses: carried ones overlaid with the
    /// active controller's.
    pub fn condition_masks(&self, pass: u64) -> Result<LayerMaskSet> {
        let mut m = self.carried.clone();
        if let Some(c) = &self.ldam {
            m.overlay(&c.masks_for_pass(pass)?);
        }
        Ok(m)
    }

    /// Names of frozen parameters holding any gradient buffer.
    pub fn frozen_violations(&self) -> Vec<String> {
        self.store
            .iter()
            .filter(|(_, p)| !p.value.requires_grad() && p.value.grad().is_some())
            .map(|(_, p)| p.name.clone())
            .collect()
    }

    fn check_frozen(&self, extra: Vec<String>) -> Result<()> {
        let mut v = extra;
        v.extend(self.frozen_violations());
        if v.is_empty() {
            Ok(())
        } else {
            v.sort();
            v.dedup();
            Err(PipelineError::Invariant(format!(
                "stage {}: gradient reached frozen parameters: {}",
                self.stage,
                v.join(", ")
            )))
        }
    }

    /// Runs the next epoch of the current stage.
    pub fn step_epoch(&mut self, data: &SyntheticDataset) -> Result<EpochMetrics> {
        if self.finished() {
            return Err(PipelineError::Invariant(format!("stage {} already finished", self.stage)));
        }
        match self.stage {
            Stage::One => self.fm_epoch(&data.pretrain, &data.eval),
            Stage::Two => self.fm_epoch(&data.hq, &data.eval),
            Stage::Three => self.rl_epoch(&data.hq),
        }
    }

    fn fm_epoch(&mut self, train: &Split, eval: &Split) -> Result<EpochMetrics> {
        if train.is_empty() {
            return Err(parauni_core::Error::Empty("training prompts").into());
        }
        let (batch, lr) = match self.stage {
            Stage::One => (self.config.stage1.batch_size, self.config.stage1.lr),
            _ => (self.config.stage2.batch_size, self.config.stage2.lr),
        };
        let selection = self.selection(self.stage)?;
        let masks = LayerMaskSet::new();
        let mut order: Vec<usize> = (0..train.len()).collect();
        for i in (1..order.len()).rev() {
            order.swap(i, self.rng.random_range(0..=i));
        }
        let targets: Vec<Tensor> = (0..train.len()).map(|i| train.target_tensor(i)).collect();
        let (mut loss_sum, mut norm_sum, mut batches) = (0.0f64, 0.0f64, 0usize);
        for chunk in order.chunks(batch) {
            let items: Vec<(&[u32], &Tensor)> = chunk
                .iter()
                .map(|&i| (train.prompts[i].as_slice(), &targets[i]))
                .collect();
            let draws: Vec<FmDraw> = items
                .iter()
                .map(|(_, x)| FmDraw::sample(x.shape()[0], GRID * GRID, &mut self.rng))
                .collect();
            let mut tape = Tape::new(&self.store);
            let loss = self.model.fm_loss(&mut tape, &items, &selection, &masks, &draws)?;
            tape.backward(loss).map_err(parauni_core::Error::from)?;
            let violations = tape.frozen_grad_violations();
            let grads = tape.param_grads();
            loss_sum += tape.data(loss)[0] as f64;
            drop(tape);
            self.store.zero_grads();
            self.store.accumulate_grads(&grads);
            self.check_frozen(violations)?;
            norm_sum += self.store.grad_norm().unwrap_or(0.0) as f64;
            self.opt.step(&mut self.store, lr);
            batches += 1;
        }
        self.epoch += 1;
        Ok(EpochMetrics {
            stage: self.stage,
            epoch: self.epoch,
            reward_kind: None,
            loss: Some(loss_sum / batches as f64),
            eval_loss: Some(self.eval_loss(eval, &selection)?),
            reward: None,
            grad_norm: norm_sum / batches as f64,
            perturbed: false,
            gamma: 0.0,
        })
    }

    /// Flow-matching loss on `split` under fixed, seed-derived draws.
    pub fn eval_loss(&self, split: &Split, selection: &LayerSelection) -> Result<f64> {
        if split.is_empty() {
            return Err(parauni_core::Error::Empty("eval prompts").into());
        }
        let reps = self.config.eval.draws;
        let masks = LayerMaskSet::new();
        let mut total = 0.0f64;
        let mut rows = 0usize;
        for (i, tokens) in split.prompts.iter().enumerate() {
            let one = split.target_tensor(i);
            let n = one.shape()[0];
            let data: Vec<f32> = (0..reps).flat_map(|_| one.data().iter().copied()).collect();
            let x0 = Tensor::new(&[n * reps, GRID * GRID], data).map_err(parauni_core::Error::from)?;
            let mut rng = rng_from(derive_seed(self.config.run.seed, &[0x6576_616c, i as u64]));
            let draws = [FmDraw::sample(n * reps, GRID * GRID, &mut rng)];
            let mut tape = Tape::new(&self.store);
            let loss = self.model.fm_loss(&mut tape, &[(tokens.as_slice(), &x0)], selection, &masks, &draws)?;
            total += tape.data(loss)[0] as f64 * (n * reps) as f64;
            rows += n * reps;
        }
        Ok(total / rows as f64)
    }

    /// Reward of the current Stage III epoch, creating the controller on a
    /// reward boundary and folding the previous reward's masks into the
    /// carried set.
    fn active_reward(&mut self) -> Result<(usize, RewardKind)> {
        let c = &self.config.stage3;
        let idx = (self.epoch / c.epochs_per_reward) as usize;
        let kind = c.rewards[idx];
        let current = self.ldam.as_ref().map(|l| l.kind);
        let stale = match (&self.ldam, current) {
            (Some(_), Some(k)) => k != kind || self.epoch % c.epochs_per_reward == 0,
            _ => true,
        };
        if stale {
            if let Some(prev) = self.ldam.take() {
                self.carried.overlay(prev.apply_masks());
            }
            let shape = self.model.condition_shape();
            self.ldam = Some(LdamController::new(
                self.config.ldam.clone(),
                kind,
                self.model.layers(),
                &shape,
                derive_seed(self.config.run.seed, &[0x6c64_616d, idx as u64]),
            )?);
        }
        Ok((idx, kind))
    }

    fn rl_epoch(&mut self, prompts: &Split) -> Result<EpochMetrics> {
        if prompts.is_empty() {
            return Err(parauni_core::Error::Empty("RL prompts").into());
        }
        let (_, kind) = self.active_reward()?;
        let rewards = self.rewards();
        let scorer = rewards.scorer(kind);
        let grpo = self.config.grpo.clone();
        let per_epoch = self.config.stage3.prompts_per_epoch;
        let pool = match self.config.stage3.prompt_pool {
            0 => prompts.len(),
            n => n.min(prompts.len()),
        };
        let picks: Vec<usize> = if per_epoch <= pool {
            sample(&mut self.rng, pool, per_epoch).into_vec()
        } else {
            (0..per_epoch).map(|_| self.rng.random_range(0..pool)).collect()
        };
        let selection = self.selection(Stage::Three)?;
        let (mut reward_sum, mut norm_sum) = (0.0f64, 0.0f64);
        for (j, &pid) in picks.iter().enumerate() {
            let pass = self.epoch * per_epoch as u64 + j as u64;
            let policy = ModelPolicy {
                model: &self.model,
                prompts: &prompts.prompts,
                selection: selection.clone(),
                masks: self.condition_masks(pass)?,
            };
            let seed = self.rng.random::<u64>();
            let group = rollout_group(&policy, &self.store, pid, &grpo, &scorer, seed)?;
            let report = policy_update(&policy, &mut self.store, &mut self.opt, &group, &grpo)?;
            self.check_frozen(Vec::new())?;
            reward_sum += group.mean_reward() as f64;
            norm_sum += report.grad_norm as f64;
        }
        let r_n = reward_sum / picks.len() as f64;
        let g_n = norm_sum / picks.len() as f64;
        let ctl = self.ldam.as_mut().expect("controller is created per reward");
        let decision = ctl.observe(g_n as f32, r_n as f32)?;
        self.epoch += 1;
        let gamma = match &decision {
            Decision::Perturb { gamma, .. } => *gamma,
            Decision::NoAction => 0.0,
        };
        if self.finished() {
            // keep the last reward's masks with the model
            if let Some(prev) = self.ldam.take() {
                self.carried.overlay(prev.apply_masks());
            }
        }
        Ok(EpochMetrics {
            stage: self.stage,
            epoch: self.epoch,
            reward_kind: Some(kind),
            loss: None,
            eval_loss: None,
            reward: Some(r_n),
            grad_norm: g_n,
            perturbed: decision.fired(),
            gamma,
        })
    }

    /// Runs the current stage to completion, handing each epoch to `on_epoch`.
    pub fn run_stage(
        &mut self,
        data: &SyntheticDataset,
        mut on_epoch: impl FnMut(&Session, &EpochMetrics) -> Result<()>,
    ) -> Result<Vec<EpochMetrics>> {
        let mut all = Vec::new();
        while !self.finished() {
            let m = self.step_epoch(data)?;
            on_epoch(self, &m)?;
            all.push(m);
        }
        Ok(all)
    }
}
