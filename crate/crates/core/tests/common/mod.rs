#![allow(dead_code)]

use parauni_core::denoiser::DenoiserConfig;
use parauni_core::vlm::VlmConfig;
use parauni_core::ModelConfig;
use parauni_tensor::{ParamGrads, ParamId, ParamStore};

pub fn tiny_vlm(layers: usize) -> VlmConfig {
    VlmConfig {
        layers,
        width: 8,
        queries: 3,
        vocab: 10,
        heads: 2,
        max_prompt_len: 4,
        init_std: 0.3,
    }
}

pub fn tiny_model(layers: usize) -> ModelConfig {
    let den = DenoiserConfig {
        dim: 8,
        patch: 4,
        width: 8,
        cond_width: 8,
        heads: 2,
        depth: 1,
        init_std: 0.3,
    };
    ModelConfig::from_parts(tiny_vlm(layers), 1, false, den)
}

pub fn fd_rel_error(
    store: &ParamStore,
    ids: &[ParamId],
    analytic: &ParamGrads,
    h: f32,
    f: &dyn Fn(&ParamStore) -> f64,
) -> f64 {
    parauni_tensor::gradcheck::param_rel_error(store, ids, analytic, h, f)
}

// f64 reference forward of a pre-norm block, read straight from the store
// by parameter name.

pub type Mat = Vec<Vec<f64>>;

pub fn mat(store: &ParamStore, name: &str) -> Mat {
    let t = store.value(store.id(name).unwrap_or_else(|| panic!("no param {name}")));
    let cols = *t.shape().last().unwrap();
    t.data()
        .chunks(cols)
        .map(|r| r.iter().map(|&v| v as f64).collect())
        .collect()
}

pub fn vector(store: &ParamStore, name: &str) -> Vec<f64> {
    let t = store.value(store.id(name).unwrap());
    t.data().iter().map(|&v| v as f64).collect()
}

pub fn linear(store: &ParamStore, name: &str, x: &Mat) -> Mat {
    let w = mat(store, &format!("{name}.weight"));
    let b = vector(store, &format!("{name}.bias"));
    x.iter()
        .map(|row| {
            (0..b.len())
                .map(|j| b[j] + row.iter().enumerate().map(|(k, v)| v * w[k][j]).sum::<f64>())
                .collect()
        })
        .collect()
}

pub fn layernorm(store: &ParamStore, name: &str, x: &Mat) -> Mat {
    let g = vector(store, &format!("{name}.gain"));
    let b = vector(store, &format!("{name}.bias"));
    x.iter()
        .map(|row| {
            let n = row.len() as f64;
            let mu = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / n;
            row.iter()
                .enumerate()
                .map(|(i, v)| (v - mu) / (var + 1e-5).sqrt() * g[i] + b[i])
                .collect()
        })
        .collect()
}

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
}

pub fn attention(store: &ParamStore, name: &str, x: &Mat, ctx: &Mat, heads: usize, causal: bool) -> Mat {
    let q = linear(store, &format!("{name}.q"), x);
    let k = linear(store, &format!("{name}.k"), ctx);
    let v = linear(store, &format!("{name}.v"), ctx);
    let width = q[0].len();
    let hd = width / heads;
    let mut out = vec![vec![0.0; width]; x.len()];
    for h in 0..heads {
        let cols = h * hd..(h + 1) * hd;
        for i in 0..x.len() {
            let scores: Vec<f64> = (0..ctx.len())
                .map(|j| {
                    if causal && j > i {
                        f64::NEG_INFINITY
                    } else {
                        cols.clone().map(|c| q[i][c] * k[j][c]).sum::<f64>() / (hd as f64).sqrt()
                    }
                })
                .collect();
            let m = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
            let z: f64 = e.iter().sum();
            for c in cols.clone() {
                out[i][c] = (0..ctx.len()).map(|j| e[j] / z * v[j][c]).sum();
            }
        }
    }
    linear(store, &format!("{name}.out"), &out)
}

pub fn add(a: &Mat, b: &Mat) -> Mat {
    a.iter()
        .zip(b)
        .map(|(r, s)| r.iter().zip(s).map(|(x, y)| x + y).collect())
        .collect()
}

pub fn block(store: &ParamStore, name: &str, x: &Mat, heads: usize, causal: bool) -> Mat {
    let h = layernorm(store, &format!("{name}.norm1"), x);
    let a = attention(store, &format!("{name}.attn"), &h, &h, heads, causal);
    let x = add(x, &a);
    let h = layernorm(store, &format!("{name}.norm2"), &x);
    let u = linear(store, &format!("{name}.mlp.up"), &h);
    let u: Mat = u.iter().map(|r| r.iter().map(|&v| gelu(v)).collect()).collect();
    let d = linear(store, &format!("{name}.mlp.down"), &u);
    add(&x, &d)
}

pub fn to_mat(t: &parauni_tensor::Tensor) -> Mat {
    let cols = *t.shape().last().unwrap();
    t.data()
        .chunks(cols)
        .map(|r| r.iter().map(|&v| v as f64).collect())
        .collect()
}

pub fn max_diff(a: &Mat, b: &Mat) -> f64 {
    a.iter()
        .flatten()
        .zip(b.iter().flatten())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}
