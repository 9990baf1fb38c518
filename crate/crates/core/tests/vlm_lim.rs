mod common;

use common::*;
use parauni_core::lim::{LayerMaskSet, Lim, LimConfig};
use parauni_core::vlm::{MiniVlm, VlmConfig};
use parauni_core::{Error, LayerSelection, ParaUniModel};
use parauni_tensor::{ParamStore, Tape, Tensor, Var};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn vlm(layers: usize, seed: u64) -> (MiniVlm, ParamStore) {
    let mut store = ParamStore::new();
    let v = MiniVlm::init(&mut store, tiny_vlm(layers), seed).unwrap();
    (v, store)
}

fn lim(layers: usize, seed: u64) -> (Lim, ParamStore) {
    let mut store = ParamStore::new();
    let cfg = LimConfig {
        width: 8,
        cond_width: 8,
        heads: 2,
        depth: 1,
        layers,
        layer_embed: false,
        init_std: 0.3,
    };
    let l = Lim::init(&mut store, cfg, seed).unwrap();
    (l, store)
}

fn randn(shape: &[usize], seed: u64) -> Tensor {
    Tensor::randn(shape, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

fn consts(tape: &mut Tape<'_>, ts: &[Tensor]) -> Vec<Var> {
    ts.iter().map(|t| tape.constant(t.clone())).collect()
}

// ---- prompt transformer ----

#[test]
fn same_seed_gives_identical_parameters() {
    assert_eq!(vlm(3, 11).1, vlm(3, 11).1);
    assert_ne!(vlm(3, 11).1, vlm(3, 12).1);
}

#[test]
fn one_layer_has_one_block() {
    let (v, store) = vlm(1, 0);
    assert_eq!(v.blocks.len(), 1);
    assert!(store.id("vlm.block1.attn.q.weight").is_some());
    assert!(store.id("vlm.block2.attn.q.weight").is_none());
}

#[test]
fn parameter_census() {
    // L=2, D=8, vocab=10, max_len=4, N_q=3. Per block: two norms (2·16),
    // four D×D projections with bias (4·72), MLP 8→32→8 (288 + 264) = 872.
    // Embeddings: tokens 80, positions 32, shared query position 8.
    let (_, store) = vlm(2, 0);
    assert_eq!(store.count(Some("vlm")), 2 * 872 + 80 + 32 + 8);
    assert_eq!(store.count(Some("queries")), 24);
    assert_eq!(store.count(None), 1888);
}

#[test]
fn transformer_frozen_queries_trainable() {
    let (_, store) = vlm(2, 0);
    for (_, p) in store.iter() {
        assert_eq!(p.value.requires_grad(), p.group == "queries", "{}", p.name);
    }
}

#[test]
fn single_layer_matches_f64_reference_block() {
    let (v, store) = vlm(1, 5);
    let tokens = [3u32, 7, 1];
    let feats = v.layer_features(&store, &tokens).unwrap();
    assert_eq!(feats.len(), 1);

    let tok = mat(&store, "vlm.tok_embed");
    let pos = mat(&store, "vlm.pos_embed");
    let qpos = vector(&store, "vlm.query_pos");
    let mut x: Mat = tokens
        .iter()
        .enumerate()
        .map(|(i, &t)| tok[t as usize].iter().zip(&pos[i]).map(|(a, b)| a + b).collect())
        .collect();
    for q in mat(&store, "queries") {
        x.push(q.iter().zip(&qpos).map(|(a, b)| a + b).collect());
    }
    let out = block(&store, "vlm.block1", &x, 2, true);
    let expected: Mat = out[3..].to_vec();
    assert!(max_diff(&to_mat(&feats.per_layer[0]), &expected) < 1e-5);
}

#[test]
fn prompt_information_reaches_queries() {
    let (v, store) = vlm(3, 2);
    let a = v.layer_features(&store, &[1, 2, 3]).unwrap();
    let b = v.layer_features(&store, &[4, 2, 3]).unwrap();
    assert_eq!(a.len(), 3);
    for l in 0..3 {
        assert!(a.per_layer[l].max_abs_diff(&b.per_layer[l]) > 0.0);
    }
}

#[test]
fn zero_blocks_are_residual_identity() {
    let (v, mut store) = vlm(3, 4);
    let ids: Vec<_> = store
        .iter()
        .filter(|(_, p)| p.name.starts_with("vlm.block"))
        .map(|(id, _)| id)
        .collect();
    for id in ids {
        store.value_mut(id).data_mut().fill(0.0);
    }
    let feats = v.layer_features(&store, &[5, 6]).unwrap();
    let q = mat(&store, "queries");
    let qpos = vector(&store, "vlm.query_pos");
    let expected: Mat = q
        .iter()
        .map(|r| r.iter().zip(&qpos).map(|(a, b)| ((*a as f32) + (*b as f32)) as f64).collect())
        .collect();
    for layer in &feats.per_layer {
        assert_eq!(to_mat(layer), expected);
    }
}

#[test]
fn prompt_errors() {
    let (v, store) = vlm(1, 0);
    assert_eq!(
        v.layer_features(&store, &[10]).unwrap_err(),
        Error::Vocabulary { token: 10, vocab: 10 }
    );
    assert!(matches!(
        v.layer_features(&store, &[]),
        Err(Error::PromptLength { len: 0, .. })
    ));
    assert!(matches!(
        v.layer_features(&store, &[1; 5]),
        Err(Error::PromptLength { len: 5, max: 4 })
    ));
    assert!(VlmConfig {
        layers: 0,
        ..tiny_vlm(1)
    }
    .validate()
    .is_err());
}

#[test]
fn frozen_transformer_gets_no_gradient() {
    let (model, store) = ParaUniModel::init(tiny_model(2), 3).unwrap();
    let mut tape = Tape::new(&store);
    let c = model
        .condition(&mut tape, &[1, 2], &LayerSelection::All, &LayerMaskSet::new())
        .unwrap();
    let x = tape.constant(randn(&[2, 8], 1));
    let v = parauni_core::flow::VelocityModel::velocity(&model.denoiser, &mut tape, x, &[0.3, 0.8], Some(c)).unwrap();
    let sq = tape.mul(v, v).unwrap();
    let loss = tape.sum(sq, None).unwrap();
    tape.backward(loss).unwrap();
    assert!(tape.frozen_grad_violations().is_empty());
    let grads = tape.param_grads();
    for (id, _) in &grads.entries {
        assert_ne!(store.get(*id).group, "vlm");
    }
    assert!(grads.entries.iter().any(|(id, _)| store.get(*id).group == "queries"));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn features_have_one_entry_per_layer(
        layers in 1usize..4,
        tokens in prop::collection::vec(0u32..10, 1..=4),
        seed in 0u64..1000,
    ) {
        let (v, store) = vlm(layers, seed);
        let f = v.layer_features(&store, &tokens).unwrap();
        prop_assert_eq!(f.len(), layers);
        for t in &f.per_layer {
            prop_assert_eq!(t.shape(), &[3, 8]);
            prop_assert!(t.is_finite());
        }
    }

    #[test]
    fn last_layer_depends_on_prompt(
        a in prop::collection::vec(0u32..10, 1..=4),
        b in prop::collection::vec(0u32..10, 1..=4),
    ) {
        prop_assume!(a != b);
        let (v, store) = vlm(2, 9);
        let fa = v.layer_features(&store, &a).unwrap();
        let fb = v.layer_features(&store, &b).unwrap();
        prop_assert!(fa.per_layer[1].max_abs_diff(&fb.per_layer[1]) > 0.0);
    }
}

// ---- layer integration ----

#[test]
fn shared_encoder_maps_equal_inputs_equally() {
    let (l, store) = lim(3, 1);
    let q = randn(&[3, 8], 7);
    let mut tape = Tape::new(&store);
    let qv = tape.constant(q);
    let c1 = l.encode_layer(&mut tape, qv, 1).unwrap();
    let c3 = l.encode_layer(&mut tape, qv, 3).unwrap();
    assert_eq!(tape.data(c1), tape.data(c3));
}

#[test]
fn encoded_rows_are_normalised() {
    let (l, store) = lim(1, 2);
    let mut tape = Tape::new(&store);
    let qv = tape.constant(randn(&[5, 8], 3));
    let c = l.encode_layer(&mut tape, qv, 1).unwrap();
    for r in 0..5 {
        let row = tape.value(c).row(r);
        let mu = row.iter().map(|&v| v as f64).sum::<f64>() / 8.0;
        let var = row.iter().map(|&v| (v as f64 - mu).powi(2)).sum::<f64>() / 8.0;
        assert!(mu.abs() < 1e-5);
        assert!((var - 1.0).abs() < 1e-3);
    }
}

#[test]
fn encode_matches_f64_reference() {
    let (l, store) = lim(2, 8);
    let q = randn(&[3, 8], 4);
    let mut tape = Tape::new(&store);
    let qv = tape.constant(q.clone());
    let c = l.encode_layer(&mut tape, qv, 2).unwrap();
    let h = block(&store, "lim.block1", &to_mat(&q), 2, false);
    let expected = layernorm(&store, "lim.norm", &h);
    assert!(max_diff(&to_mat(tape.value(c)), &expected) < 1e-5);
}

#[test]
fn integrate_examples() {
    let (l, store) = lim(2, 3);
    let q1 = randn(&[3, 8], 1);
    let q2 = randn(&[3, 8], 2);
    let mut tape = Tape::new(&store);
    let f = consts(&mut tape, &[q1.clone(), q1.clone()]);
    let c = l.integrate(&mut tape, &f, &LayerMaskSet::new()).unwrap();
    let c1 = l.encode_layer(&mut tape, f[0], 1).unwrap();
    assert!(tape.value(c).max_abs_diff(tape.value(c1)) < 1e-7);

    let f = consts(&mut tape, &[q1, q2]);
    let c = l.integrate(&mut tape, &f, &LayerMaskSet::new()).unwrap();
    let a = l.encode_layer(&mut tape, f[0], 1).unwrap();
    let b = l.encode_layer(&mut tape, f[1], 2).unwrap();
    let avg: Vec<f32> = tape.data(a).iter().zip(tape.data(b)).map(|(x, y)| 0.5 * (x + y)).collect();
    for (x, y) in tape.data(c).iter().zip(&avg) {
        assert!((x - y).abs() < 1e-6);
    }

    let mut ones = LayerMaskSet::new();
    ones.insert(1, Tensor::ones(&[3, 8]));
    ones.insert(2, Tensor::ones(&[3, 8]));
    let cm = l.integrate(&mut tape, &f, &ones).unwrap();
    assert_eq!(tape.data(cm), tape.data(c));

    let mut bad = LayerMaskSet::new();
    bad.insert(3, Tensor::ones(&[3, 8]));
    assert_eq!(
        l.integrate(&mut tape, &f, &bad).unwrap_err(),
        Error::LayerIndex { layer: 3, layers: 2 }
    );
    assert!(matches!(
        l.integrate(&mut tape, &f[..1], &LayerMaskSet::new()),
        Err(Error::LayerCount { expected: 2, got: 1 })
    ));
}

#[test]
fn single_and_subset() {
    let (l1, store1) = lim(1, 5);
    let mut tape = Tape::new(&store1);
    let f = consts(&mut tape, &[randn(&[3, 8], 1)]);
    let s = l1.integrate_single(&mut tape, &f, 1).unwrap();
    let a = l1.integrate(&mut tape, &f, &LayerMaskSet::new()).unwrap();
    assert_eq!(tape.data(s), tape.data(a));

    let (l, store) = lim(4, 5);
    let mut tape = Tape::new(&store);
    let f = consts(&mut tape, &(0..4).map(|i| randn(&[3, 8], 10 + i)).collect::<Vec<_>>());
    let last = l.integrate_single(&mut tape, &f, 4).unwrap();
    let enc4 = l.encode_layer(&mut tape, f[3], 4).unwrap();
    assert_eq!(tape.data(last), tape.data(enc4));
    let s1 = l.integrate_single(&mut tape, &f, 1).unwrap();
    assert!(tape.value(s1).max_abs_diff(tape.value(last)) > 1e-3);
    assert!(matches!(
        l.integrate_single(&mut tape, &f, 5),
        Err(Error::LayerIndex { layer: 5, layers: 4 })
    ));
    assert!(l.integrate_single(&mut tape, &f, 0).is_err());

    let none = LayerMaskSet::new();
    let all = l.integrate_subset(&mut tape, &f, &[1, 2, 3, 4], &none).unwrap();
    let full = l.integrate(&mut tape, &f, &none).unwrap();
    assert_eq!(tape.data(all), tape.data(full));
    let one = l.integrate_subset(&mut tape, &f, &[3], &none).unwrap();
    let single = l.integrate_single(&mut tape, &f, 3).unwrap();
    assert_eq!(tape.data(one), tape.data(single));

    let even = l.integrate_subset(&mut tape, &f, &[2, 4], &none).unwrap();
    let e2 = l.encode_layer(&mut tape, f[1], 2).unwrap();
    let e4 = l.encode_layer(&mut tape, f[3], 4).unwrap();
    for ((x, a), b) in tape.data(even).iter().zip(tape.data(e2)).zip(tape.data(e4)) {
        assert!((x - (a + b) / 2.0).abs() < 1e-6);
    }
    assert_eq!(
        l.integrate_subset(&mut tape, &f, &[], &none).unwrap_err(),
        Error::Empty("layer subset")
    );
}

#[test]
fn gradient_reaches_shared_encoder() {
    let (l, store) = lim(3, 6);
    let mut tape = Tape::new(&store);
    let f = consts(&mut tape, &(0..3).map(|i| randn(&[3, 8], i)).collect::<Vec<_>>());
    let c = l.integrate(&mut tape, &f, &LayerMaskSet::new()).unwrap();
    let w = tape.constant(randn(&[3, 8], 99));
    let y = tape.mul(c, w).unwrap();
    let loss = tape.sum(y, None).unwrap();
    tape.backward(loss).unwrap();
    let grads = tape.param_grads();
    let qw = store.id("lim.block1.attn.q.weight").unwrap();
    let g = &grads.entries.iter().find(|(id, _)| *id == qw).unwrap().1;
    assert!(g.iter().any(|&v| v != 0.0));
}

#[test]
fn layer_embedding_breaks_sharing() {
    let mut store = ParamStore::new();
    let cfg = LimConfig {
        width: 8,
        cond_width: 6,
        heads: 2,
        depth: 2,
        layers: 2,
        layer_embed: true,
        init_std: 0.3,
    };
    let l = Lim::init(&mut store, cfg, 0).unwrap();
    let mut tape = Tape::new(&store);
    let q = tape.constant(randn(&[3, 8], 0));
    let a = l.encode_layer(&mut tape, q, 1).unwrap();
    let b = l.encode_layer(&mut tape, q, 2).unwrap();
    assert_eq!(tape.shape(a), &[3, 6]);
    assert!(tape.value(a).max_abs_diff(tape.value(b)) > 1e-4);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn mean_is_order_free(seed in 0u64..500, rot in 1usize..4) {
        let (l, store) = lim(4, seed);
        let feats: Vec<Tensor> = (0..4).map(|i| randn(&[3, 8], seed * 7 + i)).collect();
        let mut masks = LayerMaskSet::new();
        masks.insert(2, Tensor::randn(&[3, 8], 0.5, &mut ChaCha8Rng::seed_from_u64(seed)));
        let perm: Vec<usize> = (0..4).map(|i| (i + rot) % 4).collect();
        let permuted: Vec<Tensor> = perm.iter().map(|&p| feats[p].clone()).collect();
        let mut pmasks = LayerMaskSet::new();
        for (new, &old) in perm.iter().enumerate() {
            if let Some(m) = masks.get(old + 1) {
                pmasks.insert(new + 1, m.clone());
            }
        }
        let mut tape = Tape::new(&store);
        let f = consts(&mut tape, &feats);
        let pf = consts(&mut tape, &permuted);
        let a = l.integrate(&mut tape, &f, &masks).unwrap();
        let b = l.integrate(&mut tape, &pf, &pmasks).unwrap();
        prop_assert!(tape.value(a).max_abs_diff(tape.value(b)) < 1e-5);
    }

    #[test]
    fn integration_is_linear_in_masks(seed in 0u64..500) {
        let (l, store) = lim(3, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut m1 = LayerMaskSet::new();
        let mut m2 = LayerMaskSet::new();
        let mut mid = LayerMaskSet::new();
        for layer in 1..=3 {
            let a = Tensor::randn(&[3, 8], 1.0, &mut rng);
            let b = Tensor::randn(&[3, 8], 1.0, &mut rng);
            let avg: Vec<f32> = a.data().iter().zip(b.data()).map(|(x, y)| (x + y) / 2.0).collect();
            mid.insert(layer, Tensor::new(&[3, 8], avg).unwrap());
            m1.insert(layer, a);
            m2.insert(layer, b);
        }
        let mut tape = Tape::new(&store);
        let f = consts(&mut tape, &(0..3).map(|i| randn(&[3, 8], seed + i)).collect::<Vec<_>>());
        let c1 = l.integrate(&mut tape, &f, &m1).unwrap();
        let c2 = l.integrate(&mut tape, &f, &m2).unwrap();
        let cm = l.integrate(&mut tape, &f, &mid).unwrap();
        for ((a, b), m) in tape.data(c1).iter().zip(tape.data(c2)).zip(tape.data(cm)) {
            prop_assert!(((a + b) / 2.0 - m).abs() < 1e-5);
        }
    }
}
