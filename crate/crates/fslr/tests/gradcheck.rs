//! Backward-pass gradients against central finite differences.

use std::collections::BTreeMap;

use fslr::autograd::Graph;
use fslr::data::{Batch, BatchInput};
use fslr::models::{Model, ModelConfig, NormVariant};
use fslr::oracle::finite_diff_grad;
use fslr::rng::Rng;
use fslr::tensor::Tensor;
use fslr::Result;

const H: f64 = 1e-5;
const TOL: f64 = 1e-5;

/// Per-layer relative error in the l2 norm: ||ad - fd|| / ||fd||. A
/// per-coordinate ratio is not meaningful at h = 1e-5 in f64, where the
/// difference quotient itself carries ~1e-9 absolute cancellation noise
/// that swamps near-zero coordinates.
fn max_rel_err(ad: &BTreeMap<String, Tensor>, fd: &BTreeMap<String, Tensor>) -> (f64, String) {
    let mut worst = (0.0, String::new());
    for (name, a) in ad {
        let diff2: f64 = a
            .data()
            .iter()
            .zip(fd[name].data())
            .map(|(x, y)| (x - y) * (x - y))
            .sum();
        let e = diff2.sqrt() / fd[name].data().iter().map(|y| y * y).sum::<f64>().sqrt().max(1e-12);
        if e > worst.0 {
            worst = (e, name.clone());
        }
    }
    worst
}

/// Loss gradients of a model on a batch, by backward pass.
fn backward_grads(model: &Model, batch: &Batch) -> Result<BTreeMap<String, Tensor>> {
    let mut g = Graph::new();
    let fp = model.forward(&mut g, &batch.input)?;
    let loss = g.cross_entropy(fp.logits, &batch.targets)?;
    g.backward(loss)?;
    Ok(fp
        .params
        .iter()
        .map(|(n, id)| (n.clone(), g.grad_or_zeros(*id)))
        .collect())
}

/// Same loss as a function of raw parameter values, for finite differences.
fn loss_of(model: &Model, batch: &Batch, params: &BTreeMap<String, Tensor>) -> Result<f64> {
    let mut m = model.clone();
    for (name, t) in params {
        m.set(name, t.clone())?;
    }
    let mut g = Graph::new();
    let fp = m.forward(&mut g, &batch.input)?;
    let loss = g.cross_entropy(fp.logits, &batch.targets)?;
    Ok(g.value(loss).item())
}

/// The probe scalar phi as a function of parameter values.
fn phi_of(
    model: &Model,
    batch: &Batch,
    omega: &Tensor,
    params: &BTreeMap<String, Tensor>,
) -> Result<f64> {
    let mut m = model.clone();
    for (name, t) in params {
        m.set(name, t.clone())?;
    }
    let (sample, _) = fslr::estimator::sample_phi_with_omega(&m, batch, omega.clone())?;
    Ok(sample.phi)
}

fn check_model(model: &Model, batch: &Batch, label: &str) {
    let params = model.snapshot();

    let ad = backward_grads(model, batch).unwrap();
    let fd = finite_diff_grad(|p| loss_of(model, batch, p), &params, H).unwrap();
    let (err, layer) = max_rel_err(&ad, &fd);
    assert!(err < TOL, "{label}: loss gradcheck failed at {layer}: rel err {err:.3e}");

    // phi gradients: same reverse pass through the probe scalar
    let out_shape = {
        let mut g = Graph::new();
        let fp = model.forward(&mut g, &batch.input).unwrap();
        g.value(fp.logits).shape().to_vec()
    };
    let omega = Rng::new(99).standard_normal(&out_shape);
    let (_, ad_phi) = fslr::estimator::sample_phi_with_omega(model, batch, omega.clone()).unwrap();
    let fd_phi = finite_diff_grad(|p| phi_of(model, batch, &omega, p), &params, H).unwrap();
    let (err, layer) = max_rel_err(&ad_phi, &fd_phi);
    assert!(err < TOL, "{label}: phi gradcheck failed at {layer}: rel err {err:.3e}");
}

#[test]
fn two_layer_mlp_50_params() {
    // 2 blocks at hidden 4 with a 5-feature input: ~50-ish weights
    let mut cfg = ModelConfig::resmlp(5, 2);
    cfg.resmlp_hidden = 4;
    cfg.resmlp_blocks = 2;
    let model = Model::build(&cfg, &mut Rng::new(1)).unwrap();
    let x = Rng::new(2).standard_normal(&[3, 5]);
    let batch = Batch {
        input: BatchInput::Dense(x),
        targets: vec![0, 1, 1],
        id: 0,
    };
    check_model(&model, &batch, "mlp-50");
}

#[test]
fn resmlp_width8() {
    let mut cfg = ModelConfig::resmlp(6, 3);
    cfg.resmlp_hidden = 8;
    let model = Model::build(&cfg, &mut Rng::new(3)).unwrap();
    let x = Rng::new(4).standard_normal(&[4, 6]);
    let batch = Batch {
        input: BatchInput::Dense(x),
        targets: vec![0, 2, 1, 1],
        id: 0,
    };
    check_model(&model, &batch, "resmlp-w8");
}

fn transformer_batch(vocab: usize, n: usize, t: usize, seed: u64) -> Batch {
    let mut rng = Rng::new(seed);
    let ids: Vec<usize> = (0..n * t).map(|_| rng.gen_range(vocab)).collect();
    let targets: Vec<usize> = (0..n * t).map(|_| rng.gen_range(vocab)).collect();
    Batch {
        input: BatchInput::Tokens { ids, n, t },
        targets,
        id: 0,
    }
}

fn transformer_width8(variant: NormVariant, affine: bool, seed: u64) -> Model {
    let mut cfg = ModelConfig::transformer(11, 8, variant);
    cfg.d_model = 8;
    cfg.d_ff = 16;
    cfg.heads = 2;
    cfg.blocks = 2;
    cfg.affine_layernorm = affine;
    Model::build(&cfg, &mut Rng::new(seed)).unwrap()
}

#[test]
fn transformer_postnorm_width8() {
    let model = transformer_width8(NormVariant::PostNorm, false, 5);
    check_model(&model, &transformer_batch(11, 2, 6, 6), "postnorm-w8");
}

#[test]
fn transformer_prenorm_width8() {
    let model = transformer_width8(NormVariant::PreNorm, false, 7);
    check_model(&model, &transformer_batch(11, 2, 6, 8), "prenorm-w8");
}

#[test]
fn transformer_prenormpostmod_width8() {
    let model = transformer_width8(NormVariant::PreNormPostMod, false, 9);
    check_model(&model, &transformer_batch(11, 2, 6, 10), "prenormpostmod-w8");
}

#[test]
fn transformer_affine_layernorm_width8() {
    let model = transformer_width8(NormVariant::PostNorm, true, 11);
    check_model(&model, &transformer_batch(11, 2, 5, 12), "postnorm-affine-w8");
}
