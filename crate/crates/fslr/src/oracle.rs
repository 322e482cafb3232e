//! Brute-force reference computations that ground the estimators.
//!
//! The exact per-layer change in the outputs costs one backward pass per
//! output element, which is exactly the cost the probe estimator avoids; a
//! hard N*K cap keeps it a test-only tool. Finite differences validate the
//! autodiff engine, and the matrix/tensor-normal samplers provide synthetic
//! Z with known separable covariance for estimator consistency checks.

use std::collections::BTreeMap;

use crate::autograd::Graph;
use crate::data::BatchInput;
use crate::error::{Error, Result};
use crate::models::Model;
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Output-count cap for the exact oracle.
pub const ORACLE_NK_CAP: usize = 256;

/// Exact first-order output changes and their RMS norms.
#[derive(Debug, Clone)]
pub struct ExactFslr {
    /// layer name -> exact RMS of the first-order output change.
    pub rms: BTreeMap<String, f64>,
    /// layer name -> the full delta-f tensor (logit shape), if retained.
    pub delta_f: Option<BTreeMap<String, Tensor>>,
}

/// Exact delta-f per layer via one backward pass per output element.
pub fn exact_delta_f(
    model: &Model,
    input: &BatchInput,
    unit_deltas: &BTreeMap<String, Tensor>,
    retain: bool,
) -> Result<ExactFslr> {
    let mut g = Graph::new();
    let fp = model.forward(&mut g, input)?;
    exact_delta_f_graph(&mut g, fp.logits, &fp.params, unit_deltas, retain)
}

/// Same oracle on an already-built graph: `params` names the leaves whose
/// first-order output change is wanted.
pub fn exact_delta_f_graph(
    g: &mut Graph,
    logits: crate::autograd::NodeId,
    params: &[(String, crate::autograd::NodeId)],
    unit_deltas: &BTreeMap<String, Tensor>,
    retain: bool,
) -> Result<ExactFslr> {
    let out_shape = g.value(logits).shape().to_vec();
    let nk = g.value(logits).numel();
    if nk > ORACLE_NK_CAP {
        return Err(Error::OracleCap {
            nk,
            cap: ORACLE_NK_CAP,
        });
    }
    for (name, _) in params {
        if !unit_deltas.contains_key(name) {
            return Err(Error::MissingLayer {
                layer: name.clone(),
                what: "unit deltas",
            });
        }
    }

    let mut delta_f: BTreeMap<String, Tensor> = params
        .iter()
        .map(|(name, _)| (name.clone(), Tensor::zeros(&out_shape)))
        .collect();

    for e in 0..nk {
        let mut seed = Tensor::zeros(&out_shape);
        seed.data_mut()[e] = 1.0;
        g.backward_seeded(logits, seed)?;
        for (name, id) in params {
            let grad = g.grad_or_zeros(*id);
            let contrib: f64 = unit_deltas[name]
                .data()
                .iter()
                .zip(grad.data())
                .map(|(d, g)| d * g)
                .sum();
            delta_f.get_mut(name).expect("prefilled").data_mut()[e] = contrib;
        }
    }

    let rms = delta_f
        .iter()
        .map(|(name, df)| (name.clone(), df.rms()))
        .collect();
    Ok(ExactFslr {
        rms,
        delta_f: if retain { Some(delta_f) } else { None },
    })
}

/// Central finite differences of a scalar function of named parameters.
pub fn finite_diff_grad<F>(
    mut f: F,
    params: &BTreeMap<String, Tensor>,
    h: f64,
) -> Result<BTreeMap<String, Tensor>>
where
    F: FnMut(&BTreeMap<String, Tensor>) -> Result<f64>,
{
    assert!(h > 0.0, "finite differences need h > 0");
    let mut work = params.clone();
    let mut grads = BTreeMap::new();
    let names: Vec<String> = params.keys().cloned().collect();
    for name in names {
        let mut grad = Tensor::zeros(params[&name].shape());
        for i in 0..grad.numel() {
            let orig = params[&name].data()[i];
            work.get_mut(&name).expect("cloned").data_mut()[i] = orig + h;
            let up = f(&work)?;
            work.get_mut(&name).expect("cloned").data_mut()[i] = orig - h;
            let down = f(&work)?;
            work.get_mut(&name).expect("cloned").data_mut()[i] = orig;
            grad.data_mut()[i] = (up - down) / (2.0 * h);
        }
        grads.insert(name, grad);
    }
    Ok(grads)
}

/// Z = L_u G L_v^T with G IID standard normal; row covariance L_u L_u^T,
/// column covariance L_v L_v^T.
pub fn sample_matrix_normal(rng: &mut Rng, l_u: &Tensor, l_v: &Tensor) -> Result<Tensor> {
    sample_tensor_normal(rng, &[l_u.clone(), l_v.clone()])
}

/// Tensor-normal sample: mode-d multiply an IID normal tensor by each
/// square factor; the covariance of any two entries factorizes across
/// dimensions as prod_d (L_d L_d^T)_{i_d j_d}.
pub fn sample_tensor_normal(rng: &mut Rng, factors: &[Tensor]) -> Result<Tensor> {
    if factors.is_empty() {
        return Err(Error::Config("tensor-normal needs at least one factor".into()));
    }
    for f in factors {
        if f.rank() != 2 || f.shape()[0] != f.shape()[1] {
            return Err(Error::InvalidShape {
                shape: f.shape().to_vec(),
                reason: "covariance factors must be square matrices".into(),
            });
        }
    }
    let shape: Vec<usize> = factors.iter().map(|f| f.shape()[0]).collect();
    let mut x = rng.standard_normal(&shape);
    for (d, f) in factors.iter().enumerate() {
        x = mode_mul(&x, f, d);
    }
    Ok(x)
}

/// Mode-d product: out[.., i, ..] = sum_k m[i, k] * x[.., k, ..].
fn mode_mul(x: &Tensor, m: &Tensor, axis: usize) -> Tensor {
    let shape = x.shape();
    let n = shape[axis];
    let strides = x.strides();
    let block = strides[axis] * n;
    let mut out = Tensor::zeros(shape);
    for flat in 0..x.numel() {
        let hi = flat / block;
        let lo = flat % strides[axis];
        let i = (flat / strides[axis]) % n;
        let base = hi * block + lo;
        let mut acc = 0.0;
        for k in 0..n {
            acc += m.data()[i * n + k] * x.data()[base + k * strides[axis]];
        }
        out.data_mut()[flat] = acc;
    }
    out
}

/// 2x2 lower Cholesky factor, for tests that specify covariances directly.
pub fn cholesky2(a: f64, b: f64, c: f64) -> Tensor {
    let l11 = a.sqrt();
    let l21 = b / l11;
    let l22 = (c - l21 * l21).sqrt();
    Tensor::from_vec(vec![2, 2], vec![l11, 0.0, l21, l22]).expect("2x2")
}
