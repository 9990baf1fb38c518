//! Low-dimensional Gaussian test bed: the exact velocity field for Gaussian
//! data and a small MLP velocity model that learns it.

use parauni_tensor::{ParamStore, Tape, Tensor, Var};

use crate::error::{domain, Result};
use crate::flow::{Velocity, VelocityModel};
use crate::grpo::Policy;
use crate::nn::{Builder, Linear};
use crate::rng::{derive_seed, rng_from};

/// Exact velocity `E[eps - x0 | x_t]` when every coordinate of the data is
/// i.i.d. `N(mean, std²)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GaussianVelocity {
    pub dim: usize,
    pub mean: f64,
    pub std: f64,
}

impl GaussianVelocity {
    pub fn at(&self, x: f64, t: f64) -> f64 {
        let s2 = self.std * self.std;
        let var = (1.0 - t).powi(2) * s2 + t * t;
        let b = (t - (1.0 - t) * s2) / var;
        -self.mean + b * (x - (1.0 - t) * self.mean)
    }

    /// `E‖v* - (eps - x0)‖²` per coordinate at time `t`.
    pub fn residual_variance(&self, t: f64) -> f64 {
        let s2 = self.std * self.std;
        s2 / ((1.0 - t).powi(2) * s2 + t * t)
    }
}

impl Velocity for GaussianVelocity {
    fn dim(&self) -> usize {
        self.dim
    }

    fn eval(&self, x: &[f32], t: f32) -> Result<Vec<f32>> {
        if x.len() != self.dim {
            return Err(domain("sample length does not match field"));
        }
        Ok(x.iter().map(|&xi| self.at(xi as f64, t as f64) as f32).collect())
    }
}

/// Features fed to the MLP alongside the sample.
const TIME_FEATURES: usize = 5;

fn time_features(t: f32) -> [f32; TIME_FEATURES] {
    let a = std::f32::consts::PI * t;
    [t, a.sin(), a.cos(), (2.0 * a).sin(), (2.0 * a).cos()]
}

/// `[x, φ(t)] → hidden → hidden → dim` with GELU activations.
#[derive(Clone, Debug)]
pub struct ToyMlp {
    pub dim: usize,
    pub layers: Vec<Linear>,
}

impl ToyMlp {
    pub fn init(store: &mut ParamStore, dim: usize, hidden: usize, group: &str, seed: u64) -> Result<Self> {
        let mut rng = rng_from(derive_seed(seed, &[0x746f_79]));
        let mut b = Builder {
            store,
            rng: &mut rng,
            group,
            std: (1.0 / hidden as f32).sqrt(),
        };
        let layers = vec![
            Linear::new(&mut b, "toy.l1", dim + TIME_FEATURES, hidden)?,
            Linear::new(&mut b, "toy.l2", hidden, hidden)?,
            Linear::new(&mut b, "toy.l3", hidden, dim)?,
        ];
        store.set_group_trainable(group, true);
        Ok(Self { dim, layers })
    }
}

impl VelocityModel for ToyMlp {
    fn dim(&self) -> usize {
        self.dim
    }

    fn velocity(&self, tape: &mut Tape<'_>, x: Var, t: &[f32], _cond: Option<Var>) -> Result<Var> {
        let n = t.len();
        if tape.shape(x) != [n, self.dim] {
            return Err(domain(format!("toy input {:?} vs {n} times", tape.shape(x))));
        }
        let feats: Vec<f32> = t.iter().flat_map(|&ti| time_features(ti)).collect();
        let feats = tape.constant(Tensor::new(&[n, TIME_FEATURES], feats)?);
        let mut h = tape.concat(&[x, feats], 1)?;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(tape, h)?;
            if i + 1 < self.layers.len() {
                h = tape.gelu(h);
            }
        }
        Ok(h)
    }
}

impl Policy for ToyMlp {
    fn dim(&self) -> usize {
        self.dim
    }

    fn condition(&self, _tape: &mut Tape<'_>, _prompt: usize) -> Result<Option<Var>> {
        Ok(None)
    }

    fn velocity(&self, tape: &mut Tape<'_>, x: Var, t: &[f32], cond: Option<Var>) -> Result<Var> {
        VelocityModel::velocity(self, tape, x, t, cond)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn standard_normal_data_field() {
        // N(0, 1) data: at t = 1/2 the noisy sample carries equal parts, so
        // the expected velocity is 0.
        let f = GaussianVelocity {
            dim: 1,
            mean: 0.0,
            std: 1.0,
        };
        assert_eq!(f.at(0.7, 0.5), 0.0);
        assert!((f.residual_variance(0.5) - 2.0).abs() < 1e-12);
    }
}
