//! Monte-Carlo estimation of per-layer function-space learning rates.
//!
//! One probe costs a single extra forward/backward pass: draw omega ~ N(0,1)
//! over the logits, form the probe scalar phi (a scaled random combination
//! of outputs), differentiate, and multiply elementwise with the LR=1 update
//! to get Z. The change in phi from layer l is sum(Z), which is exactly
//! Gaussian with variance equal to the squared function-space learning rate,
//! so everything reduces to variance estimation over Z. A menu of covariance
//! assumptions trades bias for variance:
//!
//! - raw: no assumption, mean of squared sum(Z) samples (unbiased, noisy)
//! - iid: all Z entries independent, only needs E[sum Z^2] (low variance,
//!   badly biased when rows/columns are correlated)
//! - kron: Kronecker-factored covariance; for a rank-D parameter the whole
//!   estimate reduces to D+1 scalar expectations tracked as bias-corrected
//!   exponential moving averages
//! - readout weight/bias: the last layer's Z has independent class slices,
//!   so one contraction suffices (lower variance than kron there)

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autograd::Graph;
use crate::data::Batch;
use crate::error::{Error, Result};
use crate::models::{Model, ParamMeta, Role};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Floor applied before logs in the Kronecker quotient.
const LOG_FLOOR: f64 = 1e-300;

/// One probe draw: the omega weights, the resulting scalar phi, and which
/// batch produced it.
#[derive(Debug, Clone)]
pub struct ProbeSample {
    pub omega: Tensor,
    pub phi: f64,
    pub batch_id: u64,
}

/// The D+1 scalar statistics of one Z sample for a rank-D parameter:
/// the squared Frobenius norm and, per axis d, the sum over the remaining
/// index of the squared axis-d sums. For matrices these are the entry sums
/// of Z Z^T and Z^T Z.
#[derive(Debug, Clone, PartialEq)]
pub struct ZStats {
    pub rank: usize,
    pub frob2: f64,
    pub dim_sumsq: Vec<f64>,
}

/// Z = unit_delta (.) grad_phi, elementwise.
pub fn compute_z(unit_delta: &Tensor, grad_phi: &Tensor) -> Result<Tensor> {
    unit_delta.mul(grad_phi)
}

/// Change in phi contributed by one layer: sum of its Z entries.
pub fn delta_phi(z: &Tensor) -> f64 {
    z.sum_all()
}

/// The D+1 scalar contractions of a Z sample, in linear time per axis.
pub fn z_stats(z: &Tensor) -> ZStats {
    let rank = z.rank();
    assert!(rank >= 1, "z_stats needs rank >= 1");
    let frob2 = z.frob2();
    let shape = z.shape();
    let strides = z.strides();
    let mut dim_sumsq = Vec::with_capacity(rank);
    for d in 0..rank {
        // accumulate axis-d sums indexed by the complement of axis d
        let mut acc = vec![0.0f64; z.numel() / shape[d]];
        let block = strides[d] * shape[d];
        for (flat, &v) in z.data().iter().enumerate() {
            let hi = flat / block;
            let lo = flat % strides[d];
            acc[hi * strides[d] + lo] += v;
        }
        dim_sumsq.push(acc.iter().map(|s| s * s).sum());
    }
    ZStats {
        rank,
        frob2,
        dim_sumsq,
    }
}

// ---- exponential moving averages --------------------------------------

/// One scalar EMA accumulator; reads are zero-bias corrected.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ScalarEma {
    acc: f64,
    count: u64,
}

impl ScalarEma {
    /// acc <- (1-beta)*acc + beta*x; the NEW sample carries weight beta.
    pub fn update(&mut self, x: f64, beta: f64) {
        self.acc = (1.0 - beta) * self.acc + beta * x;
        self.count += 1;
    }

    /// Bias-corrected read: acc / (1 - (1-beta)^count).
    pub fn corrected(&self, beta: f64) -> f64 {
        if self.count == 0 {
            return 0.0;
        }
        self.acc / (1.0 - (1.0 - beta).powi(self.count as i32))
    }

    pub fn count(&self) -> u64 {
        self.count
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LayerEmas {
    pub rank: usize,
    frob2: ScalarEma,
    dim_sumsq: Vec<ScalarEma>,
}

/// Corrected EMA reads for one layer, same shape as a `ZStats`.
#[derive(Debug, Clone)]
pub struct CorrectedStats {
    pub rank: usize,
    pub frob2: f64,
    pub dim_sumsq: Vec<f64>,
}

/// Per-layer EMA bank with a shared decay weight.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EmaState {
    pub beta: f64,
    layers: BTreeMap<String, LayerEmas>,
}

impl EmaState {
    pub fn new(beta: f64) -> Self {
        assert!(beta > 0.0 && beta <= 1.0, "beta must be in (0, 1]");
        EmaState {
            beta,
            layers: BTreeMap::new(),
        }
    }

    pub fn update(&mut self, layer: &str, stats: &ZStats) {
        let beta = self.beta;
        let entry = self.layers.entry(layer.to_string()).or_insert_with(|| LayerEmas {
            rank: stats.rank,
            frob2: ScalarEma::default(),
            dim_sumsq: vec![ScalarEma::default(); stats.rank],
        });
        debug_assert_eq!(entry.rank, stats.rank);
        entry.frob2.update(stats.frob2, beta);
        for (ema, &x) in entry.dim_sumsq.iter_mut().zip(&stats.dim_sumsq) {
            ema.update(x, beta);
        }
    }

    pub fn corrected(&self, layer: &str) -> Option<CorrectedStats> {
        let e = self.layers.get(layer)?;
        Some(CorrectedStats {
            rank: e.rank,
            frob2: e.frob2.corrected(self.beta),
            dim_sumsq: e.dim_sumsq.iter().map(|s| s.corrected(self.beta)).collect(),
        })
    }

    pub fn count(&self, layer: &str) -> u64 {
        self.layers.get(layer).map_or(0, |e| e.frob2.count())
    }

    pub fn layer_names(&self) -> impl Iterator<Item = &String> {
        self.layers.keys()
    }
}

// ---- estimators --------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimatorKind {
    Raw,
    Iid,
    Kron,
    ReadoutWeight,
    ReadoutBias,
}

impl EstimatorKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            EstimatorKind::Raw => "raw",
            EstimatorKind::Iid => "iid",
            EstimatorKind::Kron => "kron",
            EstimatorKind::ReadoutWeight => "readout_weight",
            EstimatorKind::ReadoutBias => "readout_bias",
        }
    }
}

/// Per-layer function-space learning-rate estimates.
#[derive(Debug, Clone)]
pub struct FslrEstimate {
    pub choice: EstimatorChoice,
    pub values: BTreeMap<String, f64>,
}

impl FslrEstimate {
    /// Which estimator produced the value for a layer with this meta.
    pub fn kind_for(&self, meta: &ParamMeta) -> EstimatorKind {
        layer_kind(self.choice, meta)
    }
}

/// Estimator actually used for a layer under a given choice.
pub fn layer_kind(choice: EstimatorChoice, meta: &ParamMeta) -> EstimatorKind {
    match (choice, meta.role, meta.is_bias) {
        (EstimatorChoice::KronReadout, Role::Readout, false) => EstimatorKind::ReadoutWeight,
        (EstimatorChoice::KronReadout, Role::Readout, true) => EstimatorKind::ReadoutBias,
        _ => EstimatorKind::Kron,
    }
}

fn check_finite(layer: &str, what: &str, x: f64) -> Result<f64> {
    if x.is_finite() {
        Ok(x)
    } else {
        Err(Error::NonFinite {
            layer: layer.to_string(),
            reason: format!("{what} is {x}"),
        })
    }
}

/// Kronecker quotient sqrt(prod_d E_d / F^(D-1)) in the log domain.
pub fn kron_of_stats(stats: &CorrectedStats, layer: &str) -> Result<f64> {
    let frob2 = check_finite(layer, "frob2 ema", stats.frob2)?;
    if frob2 <= 0.0 {
        return Err(Error::DegenerateLayer {
            layer: layer.to_string(),
            reason: format!("frob2 ema {frob2} <= 0 (zero update?)"),
        });
    }
    let mut log_est2 = -((stats.rank as f64) - 1.0) * frob2.ln();
    for (d, &s) in stats.dim_sumsq.iter().enumerate() {
        let s = check_finite(layer, &format!("axis-{d} contraction ema"), s)?;
        log_est2 += s.max(LOG_FLOOR).ln();
    }
    Ok((0.5 * log_est2).exp())
}

/// IID assumption: sqrt(E[sum Z^2]).
pub fn iid_of_stats(stats: &CorrectedStats, layer: &str) -> Result<f64> {
    let frob2 = check_finite(layer, "frob2 ema", stats.frob2)?;
    Ok(frob2.max(0.0).sqrt())
}

/// Readout-weight contraction: independent class slices leave a single
/// dim statistic, the one summing over the non-class axis.
pub fn readout_weight_of_stats(
    stats: &CorrectedStats,
    class_axis: usize,
    layer: &str,
) -> Result<f64> {
    if stats.rank != 2 || class_axis > 1 {
        return Err(Error::Config(format!(
            "readout weight estimator needs a rank-2 layer and class axis 0/1, got rank {} axis {class_axis} for '{layer}'",
            stats.rank
        )));
    }
    let hidden_axis = 1 - class_axis;
    let s = check_finite(layer, "readout contraction ema", stats.dim_sumsq[hidden_axis])?;
    Ok(s.max(0.0).sqrt())
}

pub fn fslr_kron(state: &EmaState, layer: &str) -> Result<f64> {
    let stats = state.corrected(layer).ok_or_else(|| Error::MissingLayer {
        layer: layer.to_string(),
        what: "ema state",
    })?;
    kron_of_stats(&stats, layer)
}

pub fn fslr_iid(state: &EmaState, layer: &str) -> Result<f64> {
    let stats = state.corrected(layer).ok_or_else(|| Error::MissingLayer {
        layer: layer.to_string(),
        what: "ema state",
    })?;
    iid_of_stats(&stats, layer)
}

/// No-assumption estimator from raw delta-phi samples: sqrt of the mean of
/// squares (the mean is known to be zero, so none is subtracted).
pub fn fslr_raw(samples: &[f64]) -> Result<f64> {
    if samples.len() < 2 {
        return Err(Error::InsufficientSamples {
            need: 2,
            got: samples.len(),
        });
    }
    Ok((samples.iter().map(|s| s * s).sum::<f64>() / samples.len() as f64).sqrt())
}

pub fn fslr_readout_weight(state: &EmaState, layer: &str, meta: &ParamMeta) -> Result<f64> {
    if meta.role != Role::Readout || meta.is_bias {
        return Err(Error::Config(format!(
            "layer '{layer}' is not tagged as a readout weight"
        )));
    }
    let class_axis = meta.readout_class_axis.ok_or_else(|| {
        Error::Config(format!("readout weight '{layer}' is missing its class axis"))
    })?;
    let stats = state.corrected(layer).ok_or_else(|| Error::MissingLayer {
        layer: layer.to_string(),
        what: "ema state",
    })?;
    readout_weight_of_stats(&stats, class_axis, layer)
}

/// Readout-bias estimator. Independent entries leave sqrt(E[sum z^2]),
/// which is the same formula as the IID estimator; it shares that code path.
pub fn fslr_readout_bias(state: &EmaState, layer: &str, meta: &ParamMeta) -> Result<f64> {
    if meta.role != Role::Readout || !meta.is_bias {
        return Err(Error::Config(format!(
            "layer '{layer}' is not tagged as a readout bias"
        )));
    }
    fslr_iid(state, layer)
}

/// Which estimator backs the measurement loop.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum EstimatorChoice {
    /// Kronecker-factored estimate for every layer.
    #[default]
    Kron,
    /// Kronecker everywhere except the readout layer, which uses the
    /// independence contractions.
    KronReadout,
}

/// Estimate every layer in `metas` from the EMA bank.
pub fn estimate_all(
    state: &EmaState,
    metas: &[(String, ParamMeta)],
    choice: EstimatorChoice,
) -> Result<FslrEstimate> {
    let mut values = BTreeMap::new();
    for (name, meta) in metas {
        let v = match layer_kind(choice, meta) {
            EstimatorKind::ReadoutWeight => fslr_readout_weight(state, name, meta)?,
            EstimatorKind::ReadoutBias => fslr_readout_bias(state, name, meta)?,
            _ => fslr_kron(state, name)?,
        };
        let v = check_finite(name, "fslr estimate", v)?;
        values.insert(name.clone(), v);
    }
    Ok(FslrEstimate { choice, values })
}

// ---- probe sampling ----------------------------------------------------

/// One probe: forward on a fresh batch, phi = sum(omega . f) / sqrt(numel),
/// one backward pass, gradients keyed by layer name.
pub fn sample_phi(
    model: &Model,
    batch: &Batch,
    rng: &mut Rng,
) -> Result<(ProbeSample, BTreeMap<String, Tensor>)> {
    if batch.input.rows() == 0 {
        return Err(Error::Data("probe batch is empty".into()));
    }
    let mut g = Graph::new();
    let fp = model.forward(&mut g, &batch.input)?;
    let omega = rng.standard_normal(g.value(fp.logits).shape());
    probe_with_omega(&mut g, fp, omega, batch.id)
}

/// Probe with caller-supplied omega (tests inject specific weights).
pub fn sample_phi_with_omega(
    model: &Model,
    batch: &Batch,
    omega: Tensor,
) -> Result<(ProbeSample, BTreeMap<String, Tensor>)> {
    if batch.input.rows() == 0 {
        return Err(Error::Data("probe batch is empty".into()));
    }
    let mut g = Graph::new();
    let fp = model.forward(&mut g, &batch.input)?;
    probe_with_omega(&mut g, fp, omega, batch.id)
}

fn probe_with_omega(
    g: &mut Graph,
    fp: crate::models::ForwardPass,
    omega: Tensor,
    batch_id: u64,
) -> Result<(ProbeSample, BTreeMap<String, Tensor>)> {
    let numel = g.value(fp.logits).numel();
    let om = g.constant(omega.clone());
    let weighted = g.mul(fp.logits, om)?;
    let total = g.sum_all(weighted);
    let phi = g.scale(total, 1.0 / (numel as f64).sqrt());
    let phi_value = g.value(phi).item();
    g.backward(phi)?;
    let grads = fp
        .params
        .iter()
        .map(|(name, id)| (name.clone(), g.grad_or_zeros(*id)))
        .collect();
    Ok((
        ProbeSample {
            omega,
            phi: phi_value,
            batch_id,
        },
        grads,
    ))
}

/// Fold one probe of a fixed set of unit deltas into the EMA bank.
/// Returns the per-layer delta-phi contributions (sum of Z per layer).
pub fn accumulate_probe(
    state: &mut EmaState,
    unit_deltas: &BTreeMap<String, Tensor>,
    grads: &BTreeMap<String, Tensor>,
) -> Result<BTreeMap<String, f64>> {
    let mut dphi = BTreeMap::new();
    for (name, delta) in unit_deltas {
        let grad = grads.get(name).ok_or_else(|| Error::MissingLayer {
            layer: name.clone(),
            what: "phi gradients",
        })?;
        let z = compute_z(delta, grad)?;
        let stats = z_stats(&z);
        state.update(name, &stats);
        dphi.insert(name.clone(), delta_phi(&z));
    }
    Ok(dphi)
}
