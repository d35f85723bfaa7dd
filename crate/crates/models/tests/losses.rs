mod common;

use common::*;
use ppm_core::{model_grad_check, Graph, ParamStore, Tensor};
use ppm_models::encoders::{ep_loss, qm_loss, ModEncConfig, ModalityEncoders};
use ppm_models::ppm::{ctr_loss, PpmModel};
use ppm_models::urm::{multitask_loss, Arch, IdCatalog, UrmModel};

fn qm(q: &[Vec<f64>], d: &[Vec<f64>], tau: f64) -> Result<f64, ppm_models::ModelError> {
    let store = ParamStore::<f64>::new(0);
    let mut g = Graph::new(&store);
    let q = g.constant_tensor(&Tensor::from_rows(q).unwrap());
    let d = g.constant_tensor(&Tensor::from_rows(d).unwrap());
    let l = qm_loss(&mut g, q, d, tau)?;
    Ok(g.scalar(l))
}

fn ep(logits: &[Vec<f64>], targets: &[u32]) -> f64 {
    let store = ParamStore::<f64>::new(0);
    let mut g = Graph::new(&store);
    let z = g.constant_tensor(&Tensor::from_rows(logits).unwrap());
    let l = ep_loss(&mut g, z, targets).unwrap();
    g.scalar(l)
}

fn ctr(p: &[f64], y: &[f64]) -> f64 {
    let store = ParamStore::<f64>::new(0);
    let mut g = Graph::new(&store);
    let pv = g.constant(p.len(), 1, p.to_vec()).unwrap();
    let l = ctr_loss(&mut g, pv, y).unwrap();
    g.scalar(l)
}

#[test]
fn qm_single_pair_is_zero() {
    let v = qm(&[vec![0.3, -1.0, 2.0]], &[vec![5.0, 1.0, 0.0]], 0.05).unwrap();
    assert!(v.abs() < 1e-6, "{v}");
}

#[test]
fn qm_identical_embeddings_is_log_batch() {
    for b in [2usize, 5, 64] {
        let rows = vec![vec![1.0, 2.0, -0.5]; b];
        let v = qm(&rows, &rows, 0.05).unwrap();
        assert!((v - (b as f64).ln()).abs() < 1e-6, "B={b}: {v}");
    }
}

#[test]
fn qm_orthogonal_pairs_match_hand_value() {
    let e = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
    let v = qm(&e, &e, 1.0).unwrap();
    let want = (1.0 + (-1.0f64).exp()).ln();
    assert!((v - want).abs() < 1e-9, "{v} vs {want}");
}

#[test]
fn qm_rejects_zero_norm_rows() {
    assert!(qm(&[vec![0.0, 0.0], vec![1.0, 0.0]], &[vec![1.0, 0.0], vec![0.0, 1.0]], 0.1).is_err());
}

#[test]
fn qm_is_permutation_equivariant() {
    let q = vec![vec![0.2, 1.0, -0.3], vec![1.5, -0.2, 0.1], vec![-0.4, 0.3, 0.9]];
    let d = vec![vec![0.1, 0.8, 0.0], vec![1.0, 0.1, 0.2], vec![0.0, -0.1, 1.0]];
    let base = qm(&q, &d, 0.1).unwrap();
    let perm = [2, 0, 1];
    let qp: Vec<_> = perm.iter().map(|&i| q[i].clone()).collect();
    let dp: Vec<_> = perm.iter().map(|&i| d[i].clone()).collect();
    assert!((qm(&qp, &dp, 0.1).unwrap() - base).abs() < 1e-12);
}

#[test]
fn qm_decreases_as_positive_similarity_grows() {
    let d = vec![vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0]];
    let mut last = f64::INFINITY;
    for a in [0.0f64, 0.2, 0.4, 0.6, 0.8, 1.0] {
        let q = vec![vec![a, 0.0, (1.0 - a * a).sqrt()], vec![0.0, 1.0, 0.0]];
        let v = qm(&q, &d, 0.5).unwrap();
        assert!(v < last, "a={a}: {v} !< {last}");
        last = v;
    }
}

#[test]
fn ep_uniform_logits_is_log_k() {
    for k in [2usize, 10, 200] {
        let v = ep(&[vec![0.7; k], vec![0.7; k]], &[0, (k - 1) as u32]);
        assert!((v - (k as f64).ln()).abs() < 1e-6, "K={k}: {v}");
    }
}

#[test]
fn ep_hand_value() {
    let v = ep(&[vec![2.0, 0.0, 0.0]], &[0]);
    let want = (1.0 + 2.0 * (-2.0f64).exp()).ln();
    assert!((v - want).abs() < 1e-9);
}

#[test]
fn ctr_hand_values() {
    assert!((ctr(&[0.5, 0.5, 0.5], &[1.0, 0.0, 1.0]) - 2f64.ln()).abs() < 1e-6);
    let want = -(0.8f64.ln() + 0.7f64.ln()) / 2.0;
    assert!((ctr(&[0.8, 0.3], &[1.0, 0.0]) - want).abs() < 1e-9);
    assert!((want - 0.2899).abs() < 1e-4);
}

#[test]
fn ctr_constant_predictor_minimized_at_base_rate() {
    let y = [1.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0];
    let rate = 0.3;
    let best = (1..100)
        .map(|i| i as f64 / 100.0)
        .min_by(|&a, &b| ctr(&[a; 10], &y).total_cmp(&ctr(&[b; 10], &y)))
        .unwrap();
    assert!((best - rate).abs() < 1e-9, "{best}");
}

#[test]
fn ctr_rejects_empty_batch() {
    let store = ParamStore::<f64>::new(0);
    let mut g = Graph::new(&store);
    let p = g.constant(0, 1, vec![]).unwrap();
    assert!(ctr_loss(&mut g, p, &[]).is_err());
}

const TOL: f64 = 1e-3;
const H: f64 = 1e-4;

#[test]
fn qm_and_ep_gradients() {
    let d = tiny_world(1);
    let cfg = ModEncConfig { text_dim: 4, vision_dim: 3, vision_hidden: 5, ..ModEncConfig::default() };
    for seed in 0..10 {
        let enc = ModalityEncoders::for_catalog(&cfg, &d.items, 20, 4, seed).unwrap();
        let mut store = enc.store.cast::<f64>();
        perturb(&mut store, seed, 0.3);
        let pairs = &d.queries[..4];
        let (err, name) = model_grad_check(&store, H, |g| {
            (|| {
            let q: Vec<&[u32]> = pairs.iter().map(|p| p.query_tokens.as_slice()).collect();
            let t: Vec<&[u32]> = pairs.iter().map(|p| d.items[p.item_id as usize].title_tokens.as_slice()).collect();
            let qv = enc.text.forward(g, &q)?;
            let tv = enc.text.forward(g, &t)?;
            qm_loss(g, qv, tv, 0.5)
            })()
            .map_err(core)
        })
        .unwrap();
        assert!(err <= TOL, "qm seed {seed}: {err} at {name}");

        let items = &d.items[..5];
        let (err, name) = model_grad_check(&store, H, |g| {
            (|| {
            let images: Vec<f32> = items.iter().flat_map(|i| i.image_feature.iter().copied()).collect();
            let ids: Vec<u32> = items.iter().map(|i| i.entity_id).collect();
            let v = enc.vision.forward(g, &images)?;
            let z = enc.vision.entity_logits(g, v)?;
            ep_loss(g, z, &ids)
            })()
            .map_err(core)
        })
        .unwrap();
        assert!(err <= TOL, "ep seed {seed}: {err} at {name}");
    }
}

fn core(e: ppm_models::ModelError) -> ppm_core::CoreError {
    ppm_core::CoreError::Invalid(e.to_string())
}

#[test]
fn ctr_loss_gradient_through_full_ppm() {
    let d = tiny_world(2);
    let feats = random_features(d.items.len(), 5, 3);
    let cfg = tiny_ppm();
    let batch = first_batch(&d, 3, limits(&cfg));
    for seed in 0..10 {
        let model = PpmModel::new(5, &cfg, seed).unwrap();
        let mut store = model.store.cast::<f64>();
        perturb(&mut store, seed, 0.3);
        let (err, name) = model_grad_check(&store, H, |g| model.loss(g, &batch, &feats).map_err(core)).unwrap();
        assert!(err <= TOL, "seed {seed}: {err} at {name}");
    }
}

#[test]
fn multitask_gradient_through_full_urm() {
    let d = tiny_world(3);
    let feats = random_features(d.items.len(), 5, 4);
    let cfg = tiny_urm();
    let batch = first_batch(&d, 3, limits(&cfg.ppm));
    for seed in 0..10 {
        let m = UrmModel::new(Arch::Unified { plugin: true }, IdCatalog::from_dataset(&d), 5, d.config.context_dim, &cfg, seed)
            .unwrap();
        let mut store = m.store.cast::<f64>();
        perturb(&mut store, seed, 0.3);
        let (err, name) =
            model_grad_check(&store, H, |g| m.net.loss(g, &batch, &feats, &cfg.task_weights).map_err(core)).unwrap();
        assert!(err <= TOL, "seed {seed}: {err} at {name}");
    }
}

#[test]
fn zero_weight_task_gets_no_gradient() {
    let d = tiny_world(4);
    let feats = random_features(d.items.len(), 5, 5);
    let cfg = tiny_urm();
    let batch = first_batch(&d, 2, limits(&cfg.ppm));
    let m = UrmModel::new(Arch::Unified { plugin: false }, IdCatalog::from_dataset(&d), 5, d.config.context_dim, &cfg, 9)
        .unwrap();
    let mut store = m.store.cast::<f64>();
    perturb(&mut store, 9, 0.3);
    let weights = [1.0, 0.5, 0.0];
    let (err, name) = model_grad_check(&store, H, |g| m.net.loss(g, &batch, &feats, &weights).map_err(core)).unwrap();
    assert!(err <= TOL, "{err} at {name}");

    let mut g = Graph::new(&store);
    let loss = m.net.loss(&mut g, &batch, &feats, &weights).unwrap();
    let grads = g.backward(loss).unwrap();
    for (id, p) in store.iter().filter(|(_, p)| p.name.starts_with("mmoe.tower2.") || p.name.starts_with("mmoe.gate2.")) {
        if let Some(gr) = grads.param(id) {
            assert!(gr.iter().all(|&v| v == 0.0), "{} has gradient", p.name);
        }
    }
}

#[test]
fn multitask_loss_is_weighted_sum() {
    let store = ParamStore::<f64>::new(0);
    let mut g = Graph::new(&store);
    let p: Vec<_> = [[0.9, 0.2], [0.4, 0.5], [0.1, 0.6]]
        .iter()
        .map(|r| g.constant(2, 1, r.to_vec()).unwrap())
        .collect();
    let labels = [
        ppm_data::Labels { click: 1, order: 0, cart: 0 },
        ppm_data::Labels { click: 1, order: 1, cart: 1 },
    ];
    let l = multitask_loss(&mut g, &p, &labels, &[1.0, 2.0, 0.5]).unwrap();
    let bce = |a: f64, b: f64, ya: f64, yb: f64| {
        -((ya * a.ln() + (1.0 - ya) * (1.0 - a).ln()) + (yb * b.ln() + (1.0 - yb) * (1.0 - b).ln())) / 2.0
    };
    let want = bce(0.9, 0.2, 1.0, 1.0) + 2.0 * bce(0.4, 0.5, 0.0, 1.0) + 0.5 * bce(0.1, 0.6, 0.0, 1.0);
    assert!((g.scalar(l) - want).abs() < 1e-12);
}
