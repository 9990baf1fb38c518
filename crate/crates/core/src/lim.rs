//! Layer integration: one shared encoder applied to every layer's query
//! features, a layernorm, optional multiplicative masks, then a mean.

use std::collections::BTreeMap;

use parauni_tensor::{ParamId, ParamStore, Tape, Tensor, Var};

use crate::error::{Error, Result};
use crate::nn::{Block, Builder, Linear, Norm};
use crate::rng::{derive_seed, rng_from};
use crate::vlm::LayerFeatures;

pub const GROUP_LIM: &str = "lim";

#[derive(Clone, Debug, PartialEq)]
pub struct LimConfig {
    /// Width of the incoming query features.
    pub width: usize,
    /// Width of the condition; a projection is added when it differs.
    pub cond_width: usize,
    pub heads: usize,
    /// Number of shared transformer blocks.
    pub depth: usize,
    pub layers: usize,
    /// Learned per-layer offsets added before encoding.
    pub layer_embed: bool,
    pub init_std: f32,
}

impl Default for LimConfig {
    fn default() -> Self {
        Self {
            width: 32,
            cond_width: 32,
            heads: 2,
            depth: 1,
            layers: 8,
            layer_embed: false,
            init_std: 0.08,
        }
    }
}

impl LimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.width == 0 || self.cond_width == 0 {
            return Err(Error::Config("lim: layers and widths must be >= 1".into()));
        }
        if self.heads == 0 || self.width % self.heads != 0 {
            return Err(Error::Config("lim: width must be a multiple of heads".into()));
        }
        Ok(())
    }
}

/// Per-layer multiplicative masks keyed by 1-based layer index. Absent
/// layers use the identity.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LayerMaskSet {
    pub masks: BTreeMap<usize, Tensor>,
}

impl LayerMaskSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn is_empty(&self) -> bool {
        self.masks.is_empty()
    }

    pub fn get(&self, layer: usize) -> Option<&Tensor> {
        self.masks.get(&layer)
    }

    pub fn insert(&mut self, layer: usize, mask: Tensor) {
        self.masks.insert(layer, mask);
    }

    /// Copies every mask of `other` over this set.
    pub fn overlay(&mut self, other: &LayerMaskSet) {
        for (&l, m) in &other.masks {
            self.masks.insert(l, m.clone());
        }
    }

    fn check(&self, layers: usize) -> Result<()> {
        match self.masks.keys().find(|&&l| l == 0 || l > layers) {
            Some(&layer) => Err(Error::LayerIndex { layer, layers }),
            None => Ok(()),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Lim {
    pub config: LimConfig,
    pub blocks: Vec<Block>,
    pub proj: Option<Linear>,
    pub norm: Norm,
    pub layer_embed: Option<ParamId>,
}

impl Lim {
    pub fn init(store: &mut ParamStore, config: LimConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = rng_from(derive_seed(seed, &[0x6c69_6d]));
        let mut b = Builder {
            store,
            rng: &mut rng,
            group: GROUP_LIM,
            std: config.init_std,
        };
        let blocks = (0..config.depth)
            .map(|i| Block::new(&mut b, &format!("lim.block{}", i + 1), config.width, config.heads))
            .collect::<Result<Vec<_>>>()?;
        let proj = if config.cond_width != config.width {
            Some(Linear::new(&mut b, "lim.proj", config.width, config.cond_width)?)
        } else {
            None
        };
        let norm = Norm::new(&mut b, "lim.norm", config.cond_width)?;
        let layer_embed = if config.layer_embed {
            Some(b.normal("lim.layer_embed", &[config.layers, config.width])?)
        } else {
            None
        };
        store.set_group_trainable(GROUP_LIM, true);
        Ok(Self {
            config,
            blocks,
            proj,
            norm,
            layer_embed,
        })
    }

    /// `c_i = LN(f(q_i))` for 1-based layer `layer`.
    pub fn encode_layer(&self, tape: &mut Tape<'_>, q: Var, layer: usize) -> Result<Var> {
        if layer == 0 || layer > self.config.layers {
            return Err(Error::LayerIndex {
                layer,
                layers: self.config.layers,
            });
        }
        let mut h = q;
        if let Some(id) = self.layer_embed {
            let table = tape.param(id);
            let row = tape.narrow(table, 0, layer - 1, 1)?;
            let row = tape.reshape(row, &[self.config.width])?;
            h = tape.add_row(h, row)?;
        }
        for block in &self.blocks {
            h = block.forward(tape, h, None)?;
        }
        if let Some(p) = &self.proj {
            h = p.forward(tape, h)?;
        }
        self.norm.forward(tape, h)
    }

    /// Mean over all layers of the masked encodings.
    pub fn integrate(&self, tape: &mut Tape<'_>, features: &[Var], masks: &LayerMaskSet) -> Result<Var> {
        let keep: Vec<usize> = (1..=features.len()).collect();
        self.integrate_subset(tape, features, &keep, masks)
    }

    /// Unmasked encoding of one layer.
    pub fn integrate_single(&self, tape: &mut Tape<'_>, features: &[Var], layer: usize) -> Result<Var> {
        self.check_features(features)?;
        if layer == 0 || layer > features.len() {
            return Err(Error::LayerIndex {
                layer,
                layers: features.len(),
            });
        }
        self.encode_layer(tape, features[layer - 1], layer)
    }

    /// Mean over the kept layers only, divisor `|keep|`.
    pub fn integrate_subset(
        &self,
        tape: &mut Tape<'_>,
        features: &[Var],
        keep: &[usize],
        masks: &LayerMaskSet,
    ) -> Result<Var> {
        self.check_features(features)?;
        masks.check(self.config.layers)?;
        if keep.is_empty() {
            return Err(Error::Empty("layer subset"));
        }
        let mut sum: Option<Var> = None;
        for &layer in keep {
            if layer == 0 || layer > self.config.layers {
                return Err(Error::LayerIndex {
                    layer,
                    layers: self.config.layers,
                });
            }
            let mut c = self.encode_layer(tape, features[layer - 1], layer)?;
            if let Some(m) = masks.get(layer) {
                let m = tape.constant(m.clone());
                c = tape.mul(c, m)?;
            }
            sum = Some(match sum {
                Some(s) => tape.add(s, c)?,
                None => c,
            });
        }
        let sum = sum.expect("keep is nonempty");
        Ok(tape.scale(sum, 1.0 / keep.len() as f32))
    }

    /// Encoded `c_i` for every layer as plain tensors.
    pub fn encode_all(&self, store: &ParamStore, features: &LayerFeatures) -> Result<Vec<Tensor>> {
        let mut tape = Tape::new(store);
        let vars = self.feature_vars(&mut tape, features)?;
        vars.iter()
            .enumerate()
            .map(|(i, &q)| {
                let c = self.encode_layer(&mut tape, q, i + 1)?;
                Ok(tape.value(c).clone())
            })
            .collect()
    }

    /// Feeds detached feature tensors into a tape.
    pub fn feature_vars(&self, tape: &mut Tape<'_>, features: &LayerFeatures) -> Result<Vec<Var>> {
        if features.len() != self.config.layers {
            return Err(Error::LayerCount {
                expected: self.config.layers,
                got: features.len(),
            });
        }
        Ok(features.per_layer.iter().map(|t| tape.constant(t.clone())).collect())
    }

    fn check_features(&self, features: &[Var]) -> Result<()> {
        if features.len() != self.config.layers {
            return Err(Error::LayerCount {
                expected: self.config.layers,
                got: features.len(),
            });
        }
        Ok(())
    }
}

/// Named layer subsets used by the ablation harness: thirds of `1..=L` and
/// the even layers.
pub fn subset_preset(name: &str, layers: usize) -> Result<Vec<usize>> {
    let third = layers.div_ceil(3);
    let all = 1..=layers;
    let v: Vec<usize> = match name {
        "all" => all.collect(),
        "shallow" => all.filter(|&l| l <= third).collect(),
        "middle" => all.filter(|&l| l > third && l <= layers - third).collect(),
        "deep" => all.filter(|&l| l > layers - third).collect(),
        "interleaved" => all.filter(|l| l % 2 == 0).collect(),
        "last" => vec![layers],
        other => return Err(Error::Config(format!("unknown layer subset {other:?}"))),
    };
    if v.is_empty() {
        return Err(Error::Empty("layer subset"));
    }
    Ok(v)
}

/// Complement of a subset within `1..=layers`.
pub fn without(layers: usize, removed: &[usize]) -> Vec<usize> {
    (1..=layers).filter(|l| !removed.contains(l)).collect()
}
