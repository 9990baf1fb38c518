use crate::params::{ParamId, ParamStore};

#[derive(Clone, Debug, PartialEq)]
pub struct AdamWConfig {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub weight_decay: f32,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.05,
        }
    }
}

/// First and second moment buffers for one parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct Moments {
    pub m: Vec<f32>,
    pub v: Vec<f32>,
}

/// Adam with decoupled weight decay.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub config: AdamWConfig,
    steps: u64,
    state: Vec<Option<Moments>>,
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Self {
        Self {
            config,
            steps: 0,
            state: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Applies one update at learning rate `lr` to every trainable parameter
    /// holding a gradient.
    pub fn step(&mut self, store: &mut ParamStore, lr: f32) {
        if self.state.len() < store.len() {
            self.state.resize(store.len(), None);
        }
        self.steps += 1;
        let c = &self.config;
        let bc1 = 1.0 - (c.beta1 as f64).powi(self.steps as i32);
        let bc2 = 1.0 - (c.beta2 as f64).powi(self.steps as i32);
        let ids: Vec<ParamId> = store.ids().collect();
        for id in ids {
            let t = store.value_mut(id);
            if !t.requires_grad() {
                continue;
            }
            let Some(g) = t.grad().map(<[f32]>::to_vec) else { continue };
            let st = self.state[id.index()].get_or_insert_with(|| Moments {
                m: vec![0.0; g.len()],
                v: vec![0.0; g.len()],
            });
            let data = t.data_mut();
            for i in 0..g.len() {
                st.m[i] = c.beta1 * st.m[i] + (1.0 - c.beta1) * g[i];
                st.v[i] = c.beta2 * st.v[i] + (1.0 - c.beta2) * g[i] * g[i];
                let mhat = st.m[i] as f64 / bc1;
                let vhat = st.v[i] as f64 / bc2;
                let decayed = data[i] as f64 * (1.0 - lr as f64 * c.weight_decay as f64);
                data[i] = (decayed - lr as f64 * mhat / (vhat.sqrt() + c.eps as f64)) as f32;
            }
        }
    }

    pub fn moments(&self, id: ParamId) -> Option<&Moments> {
        self.state.get(id.index()).and_then(Option::as_ref)
    }

    /// Restores optimizer state captured with [`AdamW::moments`] / [`AdamW::steps`].
    pub fn restore(&mut self, steps: u64, state: Vec<(ParamId, Moments)>) {
        self.steps = steps;
        self.state.clear();
        for (id, m) in state {
            if self.state.len() <= id.index() {
                self.state.resize(id.index() + 1, None);
            }
            self.state[id.index()] = Some(m);
        }
    }
}
