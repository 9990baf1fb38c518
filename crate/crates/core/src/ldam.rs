//! Layer-wise dynamic adjustment: a per-epoch controller that watches the
//! gradient norm and reward streams and, on a gradient spike during a reward
//! plateau outside its cooldown, installs Gaussian multiplicative masks on
//! the layers tied to the active reward.

use rand_distr::{Distribution, StandardNormal};

use crate::error::{domain, Error, Result};
use crate::lim::LayerMaskSet;
use crate::rewards::RewardKind;
use crate::rng::{derive_seed, rng_from};
use parauni_tensor::Tensor;

/// Layer count the band boundaries are expressed against.
pub const REFERENCE_LAYERS: usize = 28;

#[derive(Clone, Debug, PartialEq)]
pub struct LdamConfig {
    pub enabled: bool,
    pub spike_factor: f32,
    pub threshold: u32,
    pub gamma0: f32,
    /// Inclusive bands on the 28-layer reference scale.
    pub alignment_band: (usize, usize),
    pub quality_band: (usize, usize),
    pub preference_band: (usize, usize),
    pub use_grad_guidance: bool,
    pub use_reward_guidance: bool,
    /// Redraw the noise on every forward pass instead of holding it.
    pub resample_per_pass: bool,
}

impl Default for LdamConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            spike_factor: 100.0,
            threshold: 5,
            gamma0: 0.1,
            alignment_band: (24, 28),
            quality_band: (12, 23),
            preference_band: (12, 23),
            use_grad_guidance: true,
            use_reward_guidance: true,
            resample_per_pass: false,
        }
    }
}

impl LdamConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.spike_factor > 1.0 && self.spike_factor.is_finite()) {
            return Err(Error::Config("ldam: spike_factor must be > 1".into()));
        }
        if self.threshold < 1 {
            return Err(Error::Config("ldam: threshold must be >= 1".into()));
        }
        if !(self.gamma0 >= 0.0 && self.gamma0.is_finite()) {
            return Err(Error::Config("ldam: gamma0 must be finite and >= 0".into()));
        }
        for (lo, hi) in [self.alignment_band, self.quality_band, self.preference_band] {
            if lo == 0 || lo > hi || hi > REFERENCE_LAYERS {
                return Err(Error::Config(format!("ldam: band [{lo}, {hi}] outside 1..=28")));
            }
        }
        Ok(())
    }

    pub fn band(&self, kind: RewardKind) -> (usize, usize) {
        match kind {
            RewardKind::Alignment => self.alignment_band,
            RewardKind::Quality => self.quality_band,
            RewardKind::Preference => self.preference_band,
        }
    }
}

/// Layers for a reward kind, rescaled from the reference depth to `layers`:
/// `⌈lo·L/28⌉ ..= ⌊hi·L/28⌋`.
pub fn select_layers(kind: RewardKind, layers: usize, cfg: &LdamConfig) -> Result<Vec<usize>> {
    if layers == 0 {
        return Err(Error::Config("layer count must be >= 1".into()));
    }
    let (lo, hi) = cfg.band(kind);
    let r = REFERENCE_LAYERS;
    let lo = (lo * layers).div_ceil(r).max(1);
    let hi = (hi * layers) / r;
    if lo > hi {
        return Err(Error::Empty("rescaled layer band"));
    }
    Ok((lo..=hi).collect())
}

/// `γ0 · min(1, log10(g_n/g_prev)/2 · r_s/threshold)` clamped to `[0, γ0]`;
/// `γ0` when `g_prev` is infinite.
pub fn gamma_schedule(g_n: f32, g_prev: f32, r_s: u32, cfg: &LdamConfig) -> Result<f32> {
    if g_n.is_nan() || g_prev.is_nan() || g_n < 0.0 || g_prev < 0.0 {
        return Err(domain(format!("gamma inputs must be >= 0, got g={g_n}, g_prev={g_prev}")));
    }
    if g_prev.is_infinite() {
        return Ok(cfg.gamma0);
    }
    if r_s == 0 || g_n == 0.0 {
        return Ok(0.0);
    }
    let ratio = g_n as f64 / g_prev as f64;
    let factor = ratio.log10() / 2.0 * (r_s as f64 / cfg.threshold as f64);
    let gamma = cfg.gamma0 as f64 * factor.min(1.0);
    Ok(gamma.clamp(0.0, cfg.gamma0 as f64) as f32)
}

#[derive(Clone, Debug, PartialEq)]
pub enum Decision {
    NoAction,
    Perturb { layers: Vec<usize>, gamma: f32 },
}

impl Decision {
    pub fn fired(&self) -> bool {
        matches!(self, Decision::Perturb { .. })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LdamState {
    pub g_prev: f32,
    pub r_prev: f32,
    pub n_cool: u64,
    pub r_s: u32,
    pub g_s: bool,
    /// Number of completed `observe` calls; the next call is epoch `epoch + 1`.
    pub epoch: u64,
    /// Epoch and γ of the last event.
    pub last_event: Option<(u64, f32)>,
    pub active_masks: LayerMaskSet,
}

impl Default for LdamState {
    fn default() -> Self {
        Self {
            g_prev: f32::INFINITY,
            r_prev: 0.0,
            n_cool: 0,
            r_s: 0,
            g_s: false,
            epoch: 0,
            last_event: None,
            active_masks: LayerMaskSet::default(),
        }
    }
}

/// One epoch of the controller's state machine, everything except drawing
/// the masks. Returns γ when a perturbation fires.
pub fn transition(state: &mut LdamState, g_n: f32, r_n: f32, cfg: &LdamConfig) -> Result<Option<f32>> {
    state.epoch += 1;
    if g_n >= state.g_prev * cfg.spike_factor {
        state.g_s = true;
    }
    if r_n <= state.r_prev {
        state.r_s += 1;
    }
    let mut fired = None;
    if state.n_cool == 0 {
        let grad_ok = !cfg.use_grad_guidance || state.g_s;
        let reward_ok = !cfg.use_reward_guidance || state.r_s >= cfg.threshold;
        if cfg.enabled && grad_ok && reward_ok {
            let gamma = gamma_schedule(g_n, state.g_prev, state.r_s, cfg)?;
            state.r_s = 0;
            state.g_s = false;
            state.n_cool = state.epoch;
            state.last_event = Some((state.epoch, gamma));
            fired = Some(gamma);
        }
    } else {
        state.n_cool -= 1;
    }
    state.g_prev = g_n;
    state.r_prev = r_n;
    Ok(fired)
}

/// One log line per observed epoch.
#[derive(Clone, Debug, PartialEq)]
pub struct LdamRecord {
    pub epoch: u64,
    pub g: f32,
    pub r: f32,
    pub r_s: u32,
    pub g_s: bool,
    pub n_cool: u64,
    pub fired: bool,
    pub gamma: f32,
}

impl LdamRecord {
    pub fn to_line(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.epoch,
            self.g,
            self.r,
            self.r_s,
            self.g_s,
            self.n_cool,
            if self.fired { "perturb" } else { "none" },
            self.gamma
        )
    }
}

pub const LOG_HEADER: &str = "epoch,g,r,r_s,g_s,n_cool,decision,gamma";

#[derive(Clone, Debug, PartialEq)]
pub struct LdamController {
    pub config: LdamConfig,
    pub kind: RewardKind,
    pub layers: Vec<usize>,
    /// `[N_q, D_c]`.
    pub mask_shape: Vec<usize>,
    pub seed: u64,
    pub state: LdamState,
    pub log: Vec<LdamRecord>,
}

impl LdamController {
    pub fn new(config: LdamConfig, kind: RewardKind, num_layers: usize, mask_shape: &[usize], seed: u64) -> Result<Self> {
        config.validate()?;
        let layers = select_layers(kind, num_layers, &config)?;
        Ok(Self {
            config,
            kind,
            layers,
            mask_shape: mask_shape.to_vec(),
            seed,
            state: LdamState::default(),
            log: Vec::new(),
        })
    }

    /// Feeds one epoch's gradient norm and reward.
    pub fn observe(&mut self, g_n: f32, r_n: f32) -> Result<Decision> {
        let fired = transition(&mut self.state, g_n, r_n, &self.config)?;
        if let Some(gamma) = fired {
            self.state.active_masks = self.event_masks(gamma, self.state.epoch)?;
        }
        self.log.push(LdamRecord {
            epoch: self.state.epoch,
            g: g_n,
            r: r_n,
            r_s: self.state.r_s,
            g_s: self.state.g_s,
            n_cool: self.state.n_cool,
            fired: fired.is_some(),
            gamma: fired.unwrap_or(0.0),
        });
        Ok(match fired {
            Some(gamma) => Decision::Perturb {
                layers: self.layers.clone(),
                gamma,
            },
            None => Decision::NoAction,
        })
    }

    /// Masks held since the last event; identity (empty) before any.
    pub fn apply_masks(&self) -> &LayerMaskSet {
        &self.state.active_masks
    }

    /// Masks for a given forward pass: fresh noise per pass when
    /// `resample_per_pass` is set, otherwise the held masks.
    pub fn masks_for_pass(&self, pass: u64) -> Result<LayerMaskSet> {
        match (self.config.resample_per_pass, self.state.last_event) {
            (true, Some((n, gamma))) => self.draw_masks(gamma, &[n, pass + 1]),
            _ => Ok(self.state.active_masks.clone()),
        }
    }

    /// `1 + γ·ε` on every controlled layer, with noise seeded by the event
    /// epoch.
    pub fn event_masks(&self, gamma: f32, epoch: u64) -> Result<LayerMaskSet> {
        self.draw_masks(gamma, &[epoch])
    }

    fn draw_masks(&self, gamma: f32, path: &[u64]) -> Result<LayerMaskSet> {
        let mut set = LayerMaskSet::new();
        let numel: usize = self.mask_shape.iter().product();
        for &layer in &self.layers {
            let mut full = vec![0x6d61_736b, layer as u64];
            full.extend_from_slice(path);
            let mut rng = rng_from(derive_seed(self.seed, &full));
            let data = (0..numel)
                .map(|_| {
                    let e: f32 = StandardNormal.sample(&mut rng);
                    1.0 + gamma * e
                })
                .collect();
            set.insert(layer, Tensor::new(&self.mask_shape, data)?);
        }
        Ok(set)
    }
}
