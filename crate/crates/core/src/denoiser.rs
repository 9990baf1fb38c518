//! Small cross-attention velocity network.
//!
//! A flat sample of `dim` values is cut into `dim / patch` tokens, embedded,
//! shifted by a sinusoidal time embedding and passed through cross-attention
//! blocks that read the condition.

use parauni_tensor::{ParamId, ParamStore, Tape, Tensor, Var};

use crate::error::{Error, Result};
use crate::flow::VelocityModel;
use crate::nn::{Builder, CrossBlock, Linear, Norm};
use crate::rng::{derive_seed, rng_from};

pub const GROUP_DIFFUSION: &str = "diffusion";

#[derive(Clone, Debug, PartialEq)]
pub struct DenoiserConfig {
    pub dim: usize,
    pub patch: usize,
    pub width: usize,
    pub cond_width: usize,
    pub heads: usize,
    pub depth: usize,
    pub init_std: f32,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            dim: 64,
            patch: 8,
            width: 32,
            cond_width: 32,
            heads: 2,
            depth: 2,
            init_std: 0.08,
        }
    }
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.patch == 0 || self.dim % self.patch != 0 {
            return Err(Error::Config("denoiser: dim must be a positive multiple of patch".into()));
        }
        if self.heads == 0 || self.width == 0 || self.width % self.heads != 0 || self.width % 2 != 0 {
            return Err(Error::Config("denoiser: width must be even and a multiple of heads".into()));
        }
        Ok(())
    }

    pub fn tokens(&self) -> usize {
        self.dim / self.patch
    }
}

#[derive(Clone, Debug)]
pub struct Denoiser {
    pub config: DenoiserConfig,
    pub embed: Linear,
    pub pos: ParamId,
    pub time: Linear,
    pub blocks: Vec<CrossBlock>,
    pub norm: Norm,
    pub head: Linear,
}

impl Denoiser {
    pub fn init(store: &mut ParamStore, config: DenoiserConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = rng_from(derive_seed(seed, &[0x6469_66]));
        let mut b = Builder {
            store,
            rng: &mut rng,
            group: GROUP_DIFFUSION,
            std: config.init_std,
        };
        let w = config.width;
        let embed = Linear::new(&mut b, "dit.embed", config.patch, w)?;
        let pos = b.normal("dit.pos", &[config.tokens(), w])?;
        let time = Linear::new(&mut b, "dit.time", w, w)?;
        let blocks = (0..config.depth)
            .map(|i| CrossBlock::new(&mut b, &format!("dit.block{}", i + 1), w, config.cond_width, config.heads))
            .collect::<Result<Vec<_>>>()?;
        let norm = Norm::new(&mut b, "dit.norm", w)?;
        let head = Linear::new(&mut b, "dit.head", w, config.patch)?;
        store.set_group_trainable(GROUP_DIFFUSION, true);
        Ok(Self {
            config,
            embed,
            pos,
            time,
            blocks,
            norm,
            head,
        })
    }

    fn forward_one(&self, tape: &mut Tape<'_>, x: Var, t: f32, cond: Option<Var>) -> Result<Var> {
        let c = &self.config;
        let tokens = tape.reshape(x, &[c.tokens(), c.patch])?;
        let h = self.embed.forward(tape, tokens)?;
        let pos = tape.param(self.pos);
        let h = tape.add(h, pos)?;
        let temb = tape.constant(Tensor::new(&[1, c.width], time_embedding(t, c.width))?);
        let temb = self.time.forward(tape, temb)?;
        let temb = tape.reshape(temb, &[c.width])?;
        let mut h = tape.add_row(h, temb)?;
        for block in &self.blocks {
            h = block.forward(tape, h, cond)?;
        }
        let h = self.norm.forward(tape, h)?;
        let out = self.head.forward(tape, h)?;
        Ok(tape.reshape(out, &[1, c.dim])?)
    }
}

impl VelocityModel for Denoiser {
    fn dim(&self) -> usize {
        self.config.dim
    }

    fn velocity(&self, tape: &mut Tape<'_>, x: Var, t: &[f32], cond: Option<Var>) -> Result<Var> {
        let n = check_batch(tape, x, t, self.config.dim)?;
        if n == 1 {
            return self.forward_one(tape, x, t[0], cond);
        }
        let mut rows = Vec::with_capacity(n);
        for (i, &ti) in t.iter().enumerate() {
            let xi = tape.narrow(x, 0, i, 1)?;
            rows.push(self.forward_one(tape, xi, ti, cond)?);
        }
        Ok(tape.concat(&rows, 0)?)
    }
}

/// Checks `x` is `[n, dim]` with one time per row; returns `n`.
pub(crate) fn check_batch(tape: &Tape<'_>, x: Var, t: &[f32], dim: usize) -> Result<usize> {
    let shape = tape.shape(x);
    if shape.len() != 2 || shape[1] != dim || shape[0] != t.len() {
        return Err(Error::Config(format!(
            "velocity input {shape:?} does not match {} times of dim {dim}",
            t.len()
        )));
    }
    if shape[0] == 0 {
        return Err(Error::Empty("batch"));
    }
    Ok(shape[0])
}

/// Sinusoidal embedding of `t` in `[0, 1]`: `width/2` sines then cosines
/// over geometrically spaced frequencies.
pub fn time_embedding(t: f32, width: usize) -> Vec<f32> {
    let half = width / 2;
    let mut out = vec![0.0; width];
    for i in 0..half {
        let freq = (-(10_000f64.ln()) * i as f64 / half.max(1) as f64).exp();
        let arg = 1000.0 * t as f64 * freq;
        out[i] = arg.sin() as f32;
        out[half + i] = arg.cos() as f32;
    }
    out
}
