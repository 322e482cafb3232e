//! Probe estimator against the exact brute-force oracle.

use std::collections::BTreeMap;
use std::sync::Arc;

use fslr::autograd::Graph;
use fslr::data::{make_streams, synthetic_classification, Batch, BatchInput};
use fslr::estimator::{
    compute_z, delta_phi, kron_of_stats, sample_phi, z_stats, CorrectedStats, EmaState,
};
use fslr::models::{Model, ModelConfig};
use fslr::optim::{snapshot_and_unit_delta, LrPlan, OptimHyper, OptimKind, OptimState};
use fslr::oracle::{cholesky2, exact_delta_f, sample_matrix_normal, sample_tensor_normal};
use fslr::rng::Rng;
use fslr::tensor::Tensor;

/// Width-8 ResMLP one Adam step in: the measurement target everywhere below.
fn desk_setup() -> (Model, BTreeMap<String, Tensor>, Batch) {
    let mut cfg = ModelConfig::resmlp(4, 3);
    cfg.resmlp_hidden = 8;
    cfg.resmlp_blocks = 2;
    let mut model = Model::build(&cfg, &mut Rng::new(10)).unwrap();
    let ds = Arc::new(synthetic_classification(&mut Rng::new(11), 400, 4, 3, 2.0).unwrap());
    let (mut train, mut probe) = make_streams(ds, 4, &Rng::new(12)).unwrap();

    let batch = train.next_batch().unwrap();
    let mut g = Graph::new();
    let fp = model.forward(&mut g, &batch.input).unwrap();
    let loss = g.cross_entropy(fp.logits, &batch.targets).unwrap();
    g.backward(loss).unwrap();
    let grads: BTreeMap<String, Tensor> = fp
        .params
        .iter()
        .map(|(n, id)| (n.clone(), g.grad_or_zeros(*id)))
        .collect();
    let before = model.snapshot();
    let plan = LrPlan::uniform(1e-3, model.param_names());
    let mut opt = OptimState::new(OptimKind::Adam, OptimHyper::default());
    opt.step(&mut model, &grads, &plan).unwrap();
    let deltas = snapshot_and_unit_delta(&before, &model, &plan).unwrap();

    let probe_batch = probe.next_batch().unwrap();
    (model, deltas, probe_batch)
}

#[test]
fn probe_variance_matches_exact_oracle() {
    let (model, deltas, probe_batch) = desk_setup();
    let exact = exact_delta_f(&model, &probe_batch.input, &deltas, false).unwrap();

    // delta-phi draws with fresh omega on the fixed probe batch
    let n_draws = 10_000;
    let mut rng = Rng::new(13);
    let mut samples: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for _ in 0..n_draws {
        let (_, grads_phi) = sample_phi(&model, &probe_batch, &mut rng).unwrap();
        for (name, delta) in &deltas {
            let z = compute_z(delta, &grads_phi[name]).unwrap();
            samples.entry(name.clone()).or_default().push(delta_phi(&z));
        }
    }
    for (name, s) in &samples {
        let var: f64 = s.iter().map(|v| v * v).sum::<f64>() / s.len() as f64;
        let target = exact.rms[name] * exact.rms[name];
        if target == 0.0 {
            assert!(var == 0.0, "{name}: zero target but var {var}");
            continue;
        }
        let rel = (var - target).abs() / target;
        assert!(
            rel < 0.05,
            "{name}: probe variance {var} vs exact {target} (rel {rel:.4})"
        );
    }
}

#[test]
fn z_sum_equals_delta_phi_on_linear_model() {
    // f = x W is linear in W, so the first-order change is exact:
    // sum of Z must equal phi(W + dW) - phi(W) to round-off.
    let mut rng = Rng::new(14);
    let x = rng.standard_normal(&[3, 4]);
    let w0 = rng.standard_normal(&[4, 2]);
    let dw = rng.standard_normal(&[4, 2]).scale(0.37);
    let omega = rng.standard_normal(&[3, 2]);
    let numel = 6.0f64;

    let phi_at = |w: &Tensor| {
        let mut g = Graph::new();
        let xn = g.constant(x.clone());
        let wn = g.param(w.clone());
        let f = g.matmul(xn, wn).unwrap();
        let om = g.constant(omega.clone());
        let weighted = g.mul(f, om).unwrap();
        let s = g.sum_all(weighted);
        let phi = g.scale(s, 1.0 / numel.sqrt());
        (g.value(phi).item(), {
            g.backward(phi).unwrap();
            g.grad(wn).unwrap().clone()
        })
    };
    let (phi0, grad) = phi_at(&w0);
    let (phi1, _) = phi_at(&w0.add(&dw).unwrap());
    let z = compute_z(&dw, &grad).unwrap();
    assert!(
        ((phi1 - phi0) - delta_phi(&z)).abs() < 1e-10,
        "taylor identity violated: {} vs {}",
        phi1 - phi0,
        delta_phi(&z)
    );
}

#[test]
fn kron_estimate_consistent_on_rank3_tensor_normal() {
    // Factors L_d with known covariances; the target is
    // prod_d (sum of all entries of U_d).
    let l1 = cholesky2(2.0, 1.0, 2.0); // U1, sum 6
    let l2 = cholesky2(1.0, 0.0, 3.0); // U2, sum 4
    let l3 = cholesky2(1.0, 0.5, 1.0); // U3, sum 3
    let target = 6.0 * 4.0 * 3.0;

    let mut rng = Rng::new(15);
    let n = 60_000;
    let mut ema = EmaState::new(1e-7);
    for _ in 0..n {
        let z = sample_tensor_normal(&mut rng, &[l1.clone(), l2.clone(), l3.clone()]).unwrap();
        ema.update("w", &z_stats(&z));
    }
    let est2 = {
        let c = ema.corrected("w").unwrap();
        let stats = CorrectedStats {
            rank: c.rank,
            frob2: c.frob2,
            dim_sumsq: c.dim_sumsq,
        };
        kron_of_stats(&stats, "w").unwrap().powi(2)
    };
    let rel = (est2 - target).abs() / target;
    assert!(rel < 0.05, "rank-3 kron estimate {est2} vs {target} (rel {rel:.4})");
}

#[test]
fn matrix_normal_kron_direction() {
    // Quick version of the 2x2 consistency run (full-size in acceptance):
    // U = [[2,1],[1,2]], V = [[1,0],[0,3]] -> squared target 6 * 4 = 24.
    let l_u = cholesky2(2.0, 1.0, 2.0);
    let l_v = cholesky2(1.0, 0.0, 3.0);
    let mut rng = Rng::new(16);
    let mut ema = EmaState::new(1e-7);
    for _ in 0..20_000 {
        let z = sample_matrix_normal(&mut rng, &l_u, &l_v).unwrap();
        ema.update("w", &z_stats(&z));
    }
    let c = ema.corrected("w").unwrap();
    let est2 = kron_of_stats(
        &CorrectedStats {
            rank: c.rank,
            frob2: c.frob2,
            dim_sumsq: c.dim_sumsq,
        },
        "w",
    )
    .unwrap()
    .powi(2);
    let rel = (est2 - 24.0).abs() / 24.0;
    assert!(rel < 0.05, "kron estimate {est2} vs 24 (rel {rel:.4})");
}

#[test]
fn deterministic_training_trajectories() {
    // identical seeds -> bit-identical parameters after several steps
    let run = || {
        let mut cfg = ModelConfig::resmlp(4, 3);
        cfg.resmlp_hidden = 8;
        cfg.resmlp_blocks = 2;
        let mut model = Model::build(&cfg, &mut Rng::new(20)).unwrap();
        let ds = Arc::new(synthetic_classification(&mut Rng::new(21), 400, 4, 3, 2.0).unwrap());
        let (mut train, _) = make_streams(ds, 4, &Rng::new(22)).unwrap();
        let plan = LrPlan::uniform(1e-3, model.param_names());
        let mut opt = OptimState::new(OptimKind::Adam, OptimHyper::default());
        for _ in 0..20 {
            let batch = train.next_batch().unwrap();
            let mut g = Graph::new();
            let fp = model.forward(&mut g, &batch.input).unwrap();
            let loss = g.cross_entropy(fp.logits, &batch.targets).unwrap();
            g.backward(loss).unwrap();
            let grads: BTreeMap<String, Tensor> = fp
                .params
                .iter()
                .map(|(n, id)| (n.clone(), g.grad_or_zeros(*id)))
                .collect();
            opt.step(&mut model, &grads, &plan).unwrap();
        }
        model.snapshot()
    };
    let a = run();
    let b = run();
    for (name, t) in &a {
        let u = &b[name];
        assert_eq!(t.shape(), u.shape());
        for (x, y) in t.data().iter().zip(u.data()) {
            assert_eq!(x.to_bits(), y.to_bits(), "trajectory diverged at {name}");
        }
    }
}

#[test]
fn optimizers_reduce_loss_over_first_steps() {
    // every optimizer at its smallest swept learning rate
    let swept: [(OptimKind, f64); 6] = [
        (OptimKind::Sgd, 1e-2),
        (OptimKind::SignSgd, 1e-3),
        (OptimKind::Adam, 1e-3),
        (OptimKind::AdamW, 1e-3),
        (OptimKind::Adamax, 1e-3),
        (OptimKind::Adagrad, 1e-2),
    ];
    for (kind, eta) in swept {
        let mut cfg = ModelConfig::resmlp(8, 4);
        cfg.resmlp_hidden = 16;
        cfg.resmlp_blocks = 2;
        let mut model = Model::build(&cfg, &mut Rng::new(30)).unwrap();
        let ds = Arc::new(synthetic_classification(&mut Rng::new(31), 2000, 8, 4, 2.5).unwrap());
        let (mut train, _) = make_streams(ds, 16, &Rng::new(32)).unwrap();
        let plan = LrPlan::uniform(eta, model.param_names());
        let mut opt = OptimState::new(kind, OptimHyper::default());
        let mut losses = Vec::new();
        for _ in 0..50 {
            let batch = train.next_batch().unwrap();
            let mut g = Graph::new();
            let fp = model.forward(&mut g, &batch.input).unwrap();
            let loss = g.cross_entropy(fp.logits, &batch.targets).unwrap();
            losses.push(g.value(loss).item());
            g.backward(loss).unwrap();
            let grads: BTreeMap<String, Tensor> = fp
                .params
                .iter()
                .map(|(n, id)| (n.clone(), g.grad_or_zeros(*id)))
                .collect();
            opt.step(&mut model, &grads, &plan).unwrap();
        }
        let head: f64 = losses[..5].iter().sum::<f64>() / 5.0;
        let tail: f64 = losses[45..].iter().sum::<f64>() / 5.0;
        assert!(
            tail < head,
            "{kind:?} at eta {eta}: loss did not decrease ({head} -> {tail})"
        );
    }
}
