//! The full generator: prompt transformer, layer integration and denoiser.

use parauni_tensor::{ParamStore, Tape, Tensor, Var};

use crate::denoiser::{Denoiser, DenoiserConfig};
use crate::error::{Error, Result};
use crate::flow::{fm_loss_with, sample_ode, FmBatch, FmDraw, ModelVelocity, VelocityModel};
use crate::grpo::Policy;
use crate::lim::{LayerMaskSet, Lim, LimConfig};
use crate::vlm::{MiniVlm, VlmConfig};

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub vlm: VlmConfig,
    pub lim: LimConfig,
    pub denoiser: DenoiserConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::from_parts(VlmConfig::default(), 1, false, DenoiserConfig::default())
    }
}

impl ModelConfig {
    /// Derives the integration widths from the transformer and denoiser.
    pub fn from_parts(vlm: VlmConfig, lim_depth: usize, layer_embed: bool, denoiser: DenoiserConfig) -> Self {
        let lim = LimConfig {
            width: vlm.width,
            cond_width: denoiser.cond_width,
            heads: vlm.heads,
            depth: lim_depth,
            layers: vlm.layers,
            layer_embed,
            init_std: vlm.init_std,
        };
        Self { vlm, lim, denoiser }
    }

    pub fn validate(&self) -> Result<()> {
        self.vlm.validate()?;
        self.lim.validate()?;
        self.denoiser.validate()?;
        if self.lim.width != self.vlm.width || self.lim.layers != self.vlm.layers {
            return Err(Error::Config("lim width/layers must match the vlm".into()));
        }
        if self.lim.cond_width != self.denoiser.cond_width {
            return Err(Error::Config("lim cond_width must match the denoiser".into()));
        }
        Ok(())
    }
}

/// Which layers feed the condition.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum LayerSelection {
    All,
    Single(usize),
    Subset(Vec<usize>),
}

#[derive(Clone, Debug)]
pub struct ParaUniModel {
    pub config: ModelConfig,
    pub vlm: MiniVlm,
    pub lim: Lim,
    pub denoiser: Denoiser,
}

impl ParaUniModel {
    pub fn init(config: ModelConfig, seed: u64) -> Result<(Self, ParamStore)> {
        config.validate()?;
        let mut store = ParamStore::new();
        let vlm = MiniVlm::init(&mut store, config.vlm.clone(), seed)?;
        let lim = Lim::init(&mut store, config.lim.clone(), seed)?;
        let denoiser = Denoiser::init(&mut store, config.denoiser.clone(), seed)?;
        Ok((
            Self {
                config,
                vlm,
                lim,
                denoiser,
            },
            store,
        ))
    }

    pub fn layers(&self) -> usize {
        self.config.vlm.layers
    }

    pub fn dim(&self) -> usize {
        self.config.denoiser.dim
    }

    /// `[N_q, D_c]`.
    pub fn condition_shape(&self) -> [usize; 2] {
        [self.config.vlm.queries, self.config.lim.cond_width]
    }

    pub fn condition(
        &self,
        tape: &mut Tape<'_>,
        tokens: &[u32],
        selection: &LayerSelection,
        masks: &LayerMaskSet,
    ) -> Result<Var> {
        let features = self.vlm.forward_collect(tape, tokens)?;
        self.integrate(tape, &features, selection, masks)
    }

    pub fn integrate(
        &self,
        tape: &mut Tape<'_>,
        features: &[Var],
        selection: &LayerSelection,
        masks: &LayerMaskSet,
    ) -> Result<Var> {
        match selection {
            LayerSelection::All => self.lim.integrate(tape, features, masks),
            LayerSelection::Single(l) => self.lim.integrate_single(tape, features, *l),
            LayerSelection::Subset(keep) => self.lim.integrate_subset(tape, features, keep, masks),
        }
    }

    pub fn condition_value(
        &self,
        store: &ParamStore,
        tokens: &[u32],
        selection: &LayerSelection,
        masks: &LayerMaskSet,
    ) -> Result<Tensor> {
        let mut tape = Tape::new(store);
        let c = self.condition(&mut tape, tokens, selection, masks)?;
        Ok(tape.value(c).clone())
    }

    /// Flow-matching loss over prompt groups: each entry pairs a prompt with
    /// its `[n, dim]` targets.
    pub fn fm_loss(
        &self,
        tape: &mut Tape<'_>,
        items: &[(&[u32], &Tensor)],
        selection: &LayerSelection,
        masks: &LayerMaskSet,
        draws: &[FmDraw],
    ) -> Result<Var> {
        let mut batches = Vec::with_capacity(items.len());
        for (tokens, x0) in items {
            let cond = self.condition(tape, tokens, selection, masks)?;
            batches.push(FmBatch { x0, cond: Some(cond) });
        }
        fm_loss_with(tape, &self.denoiser, &batches, draws)
    }

    /// Deterministic sample for a prompt.
    pub fn generate_ode(
        &self,
        store: &ParamStore,
        tokens: &[u32],
        selection: &LayerSelection,
        masks: &LayerMaskSet,
        steps: usize,
        seed: u64,
    ) -> Result<Vec<f32>> {
        let cond = self.condition_value(store, tokens, selection, masks)?;
        let field = ModelVelocity {
            model: &self.denoiser,
            store,
            cond: Some(&cond),
        };
        sample_ode(&field, steps, seed)
    }
}

/// The model as a GRPO policy over a fixed prompt table.
pub struct ModelPolicy<'a> {
    pub model: &'a ParaUniModel,
    pub prompts: &'a [Vec<u32>],
    pub selection: LayerSelection,
    pub masks: LayerMaskSet,
}

impl Policy for ModelPolicy<'_> {
    fn dim(&self) -> usize {
        self.model.dim()
    }

    fn condition(&self, tape: &mut Tape<'_>, prompt: usize) -> Result<Option<Var>> {
        let tokens = self
            .prompts
            .get(prompt)
            .ok_or_else(|| Error::Domain(format!("unknown prompt id {prompt}")))?;
        Ok(Some(self.model.condition(tape, tokens, &self.selection, &self.masks)?))
    }

    fn velocity(&self, tape: &mut Tape<'_>, x: Var, t: &[f32], cond: Option<Var>) -> Result<Var> {
        self.model.denoiser.velocity(tape, x, t, cond)
    }
}
