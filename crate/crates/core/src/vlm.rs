//! Frozen prompt transformer with appended learnable queries.
//!
//! The queries ride behind the prompt under a causal mask, so every query
//! row can read the whole prompt. After each block the query slice of the
//! hidden state is recorded; those slices are the per-layer features.

use parauni_tensor::{ParamId, ParamStore, Tape, Tensor, Var, MASKED};

use crate::error::{Error, Result};
use crate::nn::{Block, Builder};
use crate::rng::{derive_seed, rng_from};

pub const GROUP_VLM: &str = "vlm";
pub const GROUP_QUERIES: &str = "queries";

#[derive(Clone, Debug, PartialEq)]
pub struct VlmConfig {
    pub layers: usize,
    pub width: usize,
    pub queries: usize,
    pub vocab: usize,
    pub heads: usize,
    pub max_prompt_len: usize,
    pub init_std: f32,
}

impl Default for VlmConfig {
    fn default() -> Self {
        Self {
            layers: 8,
            width: 32,
            queries: 8,
            vocab: 32,
            heads: 2,
            max_prompt_len: 8,
            init_std: 0.08,
        }
    }
}

impl VlmConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("vlm: {m}")));
        if self.layers == 0 {
            return bad("layers must be >= 1");
        }
        if self.queries == 0 {
            return bad("queries must be >= 1");
        }
        if self.heads == 0 || self.width == 0 || self.width % self.heads != 0 {
            return bad("width must be a positive multiple of heads");
        }
        if self.vocab == 0 || self.max_prompt_len == 0 {
            return bad("vocab and max_prompt_len must be >= 1");
        }
        if !(self.init_std.is_finite() && self.init_std >= 0.0) {
            return bad("init_std must be finite and >= 0");
        }
        Ok(())
    }
}

/// Query slice of the hidden state after each block, `per_layer[i - 1]`
/// for layer `i`.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerFeatures {
    pub per_layer: Vec<Tensor>,
}

impl LayerFeatures {
    pub fn len(&self) -> usize {
        self.per_layer.len()
    }

    pub fn is_empty(&self) -> bool {
        self.per_layer.is_empty()
    }

    /// Layer `i`, 1-based.
    pub fn layer(&self, i: usize) -> Result<&Tensor> {
        if i == 0 || i > self.per_layer.len() {
            return Err(Error::LayerIndex {
                layer: i,
                layers: self.per_layer.len(),
            });
        }
        Ok(&self.per_layer[i - 1])
    }
}

#[derive(Clone, Debug)]
pub struct MiniVlm {
    pub config: VlmConfig,
    pub tok_embed: ParamId,
    pub pos_embed: ParamId,
    pub query_pos: ParamId,
    pub queries: ParamId,
    pub blocks: Vec<Block>,
}

impl MiniVlm {
    /// Registers the transformer (group `vlm`, frozen) and the query
    /// embeddings (group `queries`, trainable).
    pub fn init(store: &mut ParamStore, config: VlmConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = rng_from(derive_seed(seed, &[0x766c_6d]));
        let d = config.width;
        let mut b = Builder {
            store,
            rng: &mut rng,
            group: GROUP_VLM,
            std: config.init_std,
        };
        let tok_embed = b.normal("vlm.tok_embed", &[config.vocab, d])?;
        let pos_embed = b.normal("vlm.pos_embed", &[config.max_prompt_len, d])?;
        let query_pos = b.normal("vlm.query_pos", &[d])?;
        let blocks = (0..config.layers)
            .map(|i| Block::new(&mut b, &format!("vlm.block{}", i + 1), d, config.heads))
            .collect::<Result<Vec<_>>>()?;
        b.group = GROUP_QUERIES;
        let queries = b.normal("queries", &[config.queries, d])?;
        store.set_group_trainable(GROUP_VLM, false);
        store.set_group_trainable(GROUP_QUERIES, true);
        Ok(Self {
            config,
            tok_embed,
            pos_embed,
            query_pos,
            queries,
            blocks,
        })
    }

    pub fn check_prompt(&self, tokens: &[u32]) -> Result<()> {
        if tokens.is_empty() || tokens.len() > self.config.max_prompt_len {
            return Err(Error::PromptLength {
                len: tokens.len(),
                max: self.config.max_prompt_len,
            });
        }
        if let Some(&token) = tokens.iter().find(|&&t| t as usize >= self.config.vocab) {
            return Err(Error::Vocabulary {
                token,
                vocab: self.config.vocab,
            });
        }
        Ok(())
    }

    /// Runs the prompt plus the stored query embeddings; one var per layer.
    pub fn forward_collect(&self, tape: &mut Tape<'_>, tokens: &[u32]) -> Result<Vec<Var>> {
        let queries = tape.param(self.queries);
        self.forward_collect_with(tape, tokens, queries)
    }

    /// Same as [`forward_collect`](Self::forward_collect) with explicit
    /// query embeddings `[N_q, D]`.
    pub fn forward_collect_with(&self, tape: &mut Tape<'_>, tokens: &[u32], queries: Var) -> Result<Vec<Var>> {
        self.check_prompt(tokens)?;
        let (p, nq, vocab) = (tokens.len(), self.config.queries, self.config.vocab);
        let mut one_hot = vec![0.0; p * vocab];
        for (i, &t) in tokens.iter().enumerate() {
            one_hot[i * vocab + t as usize] = 1.0;
        }
        let one_hot = tape.constant(Tensor::new(&[p, vocab], one_hot)?);
        let tok = tape.param(self.tok_embed);
        let prompt = tape.matmul(one_hot, tok)?;
        let pos = tape.param(self.pos_embed);
        let pos = tape.narrow(pos, 0, 0, p)?;
        let prompt = tape.add(prompt, pos)?;
        let qpos = tape.param(self.query_pos);
        let q = tape.add_row(queries, qpos)?;
        let mut x = tape.concat(&[prompt, q], 0)?;

        let mask = causal_mask(p + nq);
        let mut out = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            x = block.forward(tape, x, Some(&mask))?;
            out.push(tape.narrow(x, 0, p, nq)?);
        }
        Ok(out)
    }

    /// Forward pass without gradient bookkeeping of interest; returns plain
    /// tensors.
    pub fn layer_features(&self, store: &ParamStore, tokens: &[u32]) -> Result<LayerFeatures> {
        let mut tape = Tape::new(store);
        let vars = self.forward_collect(&mut tape, tokens)?;
        Ok(LayerFeatures {
            per_layer: vars.iter().map(|&v| tape.value(v).clone()).collect(),
        })
    }
}

/// Additive `[n, n]` mask that blocks attention to later positions.
pub fn causal_mask(n: usize) -> Vec<f32> {
    let mut m = vec![0.0; n * n];
    for i in 0..n {
        for j in i + 1..n {
            m[i * n + j] = MASKED;
        }
    }
    m
}
