//! Transformer building blocks shared by the VLM, the LIM and the denoiser.

use parauni_tensor::{ParamId, ParamStore, Tape, Tensor, Var, LN_EPS};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;

/// Registers parameters under a name prefix and group.
pub struct Builder<'a> {
    pub store: &'a mut ParamStore,
    pub rng: &'a mut ChaCha8Rng,
    pub group: &'a str,
    pub std: f32,
}

impl Builder<'_> {
    pub fn normal(&mut self, name: &str, shape: &[usize]) -> Result<ParamId> {
        let t = Tensor::randn(shape, self.std, self.rng);
        Ok(self.store.add(name, self.group, t)?)
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize]) -> Result<ParamId> {
        Ok(self.store.add(name, self.group, Tensor::zeros(shape))?)
    }

    pub fn ones(&mut self, name: &str, shape: &[usize]) -> Result<ParamId> {
        Ok(self.store.add(name, self.group, Tensor::ones(shape))?)
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new(b: &mut Builder<'_>, name: &str, fan_in: usize, fan_out: usize) -> Result<Self> {
        Ok(Self {
            weight: b.normal(&format!("{name}.weight"), &[fan_in, fan_out])?,
            bias: b.zeros(&format!("{name}.bias"), &[fan_out])?,
        })
    }

    pub fn forward(&self, tape: &mut Tape<'_>, x: Var) -> Result<Var> {
        let (w, b) = (tape.param(self.weight), tape.param(self.bias));
        let y = tape.matmul(x, w)?;
        Ok(tape.add_row(y, b)?)
    }
}

#[derive(Clone, Debug)]
pub struct Norm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl Norm {
    pub fn new(b: &mut Builder<'_>, name: &str, width: usize) -> Result<Self> {
        Ok(Self {
            gain: b.ones(&format!("{name}.gain"), &[width])?,
            bias: b.zeros(&format!("{name}.bias"), &[width])?,
        })
    }

    pub fn forward(&self, tape: &mut Tape<'_>, x: Var) -> Result<Var> {
        let (g, b) = (tape.param(self.gain), tape.param(self.bias));
        Ok(tape.layernorm(x, g, b, LN_EPS)?)
    }
}

/// Multi-head attention from `x` (queries) to `ctx` (keys/values).
#[derive(Clone, Debug)]
pub struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub heads: usize,
}

impl Attention {
    pub fn new(b: &mut Builder<'_>, name: &str, width: usize, ctx_width: usize, heads: usize) -> Result<Self> {
        Ok(Self {
            q: Linear::new(b, &format!("{name}.q"), width, width)?,
            k: Linear::new(b, &format!("{name}.k"), ctx_width, width)?,
            v: Linear::new(b, &format!("{name}.v"), ctx_width, width)?,
            out: Linear::new(b, &format!("{name}.out"), width, width)?,
            heads,
        })
    }

    pub fn forward(&self, tape: &mut Tape<'_>, x: Var, ctx: Var, mask: Option<&[f32]>) -> Result<Var> {
        let q = self.q.forward(tape, x)?;
        let k = self.k.forward(tape, ctx)?;
        let v = self.v.forward(tape, ctx)?;
        let width = tape.shape(q)[1];
        let mixed = if self.heads == 1 {
            tape.attention(q, k, v, mask)?
        } else {
            let hd = width / self.heads;
            let mut outs = Vec::with_capacity(self.heads);
            for h in 0..self.heads {
                let qh = tape.narrow(q, 1, h * hd, hd)?;
                let kh = tape.narrow(k, 1, h * hd, hd)?;
                let vh = tape.narrow(v, 1, h * hd, hd)?;
                outs.push(tape.attention(qh, kh, vh, mask)?);
            }
            tape.concat(&outs, 1)?
        };
        self.out.forward(tape, mixed)
    }
}

#[derive(Clone, Debug)]
pub struct Mlp {
    pub up: Linear,
    pub down: Linear,
}

impl Mlp {
    pub fn new(b: &mut Builder<'_>, name: &str, width: usize, hidden: usize) -> Result<Self> {
        Ok(Self {
            up: Linear::new(b, &format!("{name}.up"), width, hidden)?,
            down: Linear::new(b, &format!("{name}.down"), hidden, width)?,
        })
    }

    pub fn forward(&self, tape: &mut Tape<'_>, x: Var) -> Result<Var> {
        let h = self.up.forward(tape, x)?;
        let h = tape.gelu(h);
        self.down.forward(tape, h)
    }
}

/// Pre-norm self-attention + MLP block with residual connections.
#[derive(Clone, Debug)]
pub struct Block {
    pub norm1: Norm,
    pub attn: Attention,
    pub norm2: Norm,
    pub mlp: Mlp,
}

impl Block {
    pub fn new(b: &mut Builder<'_>, name: &str, width: usize, heads: usize) -> Result<Self> {
        Ok(Self {
            norm1: Norm::new(b, &format!("{name}.norm1"), width)?,
            attn: Attention::new(b, &format!("{name}.attn"), width, width, heads)?,
            norm2: Norm::new(b, &format!("{name}.norm2"), width)?,
            mlp: Mlp::new(b, &format!("{name}.mlp"), width, 4 * width)?,
        })
    }

    pub fn forward(&self, tape: &mut Tape<'_>, x: Var, mask: Option<&[f32]>) -> Result<Var> {
        let h = self.norm1.forward(tape, x)?;
        let a = self.attn.forward(tape, h, h, mask)?;
        let x = tape.add(x, a)?;
        let h = self.norm2.forward(tape, x)?;
        let m = self.mlp.forward(tape, h)?;
        Ok(tape.add(x, m)?)
    }
}

/// Pre-norm block with self-attention, cross-attention to a condition and MLP.
#[derive(Clone, Debug)]
pub struct CrossBlock {
    pub norm1: Norm,
    pub self_attn: Attention,
    pub norm2: Norm,
    pub cross_attn: Attention,
    pub norm3: Norm,
    pub mlp: Mlp,
}

impl CrossBlock {
    pub fn new(b: &mut Builder<'_>, name: &str, width: usize, cond_width: usize, heads: usize) -> Result<Self> {
        Ok(Self {
            norm1: Norm::new(b, &format!("{name}.norm1"), width)?,
            self_attn: Attention::new(b, &format!("{name}.self_attn"), width, width, heads)?,
            norm2: Norm::new(b, &format!("{name}.norm2"), width)?,
            cross_attn: Attention::new(b, &format!("{name}.cross_attn"), width, cond_width, heads)?,
            norm3: Norm::new(b, &format!("{name}.norm3"), width)?,
            mlp: Mlp::new(b, &format!("{name}.mlp"), width, 4 * width)?,
        })
    }

    pub fn forward(&self, tape: &mut Tape<'_>, x: Var, cond: Option<Var>) -> Result<Var> {
        let h = self.norm1.forward(tape, x)?;
        let a = self.self_attn.forward(tape, h, h, None)?;
        let mut x = tape.add(x, a)?;
        if let Some(c) = cond {
            let h = self.norm2.forward(tape, x)?;
            let a = self.cross_attn.forward(tape, h, c, None)?;
            x = tape.add(x, a)?;
        }
        let h = self.norm3.forward(tape, x)?;
        let m = self.mlp.forward(tape, h)?;
        Ok(tape.add(x, m)?)
    }
}

