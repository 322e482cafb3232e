//! Optimizers with per-layer learning rates and the snapshot / unit-delta
//! mechanism that exposes every update at learning rate 1.
//!
//! The unit delta (W_after - W_before) / eta keeps the estimator's moving
//! averages consistent when learning rates change mid-run (schedules,
//! per-layer matching): the statistics always describe the LR=1 update.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::Model;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimKind {
    Sgd,
    SignSgd,
    Adam,
    AdamW,
    Adamax,
    Adagrad,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct OptimHyper {
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
    /// Momentum for sgd / signsgd.
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    /// Decoupled weight decay for adamw.
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
}

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}
fn default_momentum() -> f64 {
    0.9
}
fn default_weight_decay() -> f64 {
    0.1
}

impl Default for OptimHyper {
    fn default() -> Self {
        OptimHyper {
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
            momentum: default_momentum(),
            weight_decay: default_weight_decay(),
        }
    }
}

/// Per-layer learning rates; every model parameter must have an entry.
#[derive(Debug, Clone, PartialEq)]
pub struct LrPlan {
    pub eta0: f64,
    values: BTreeMap<String, f64>,
}

impl LrPlan {
    pub fn uniform(eta0: f64, names: impl IntoIterator<Item = String>) -> Self {
        LrPlan {
            eta0,
            values: names.into_iter().map(|n| (n, eta0)).collect(),
        }
    }

    pub fn from_map(eta0: f64, values: BTreeMap<String, f64>) -> Result<Self> {
        for (name, &v) in &values {
            if !v.is_finite() || v <= 0.0 {
                return Err(Error::Config(format!(
                    "learning rate for layer '{name}' must be positive and finite, got {v}"
                )));
            }
        }
        Ok(LrPlan { eta0, values })
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        self.values.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &f64)> {
        self.values.iter()
    }

    /// Plan with every rate multiplied by `mult` (scheduler replay).
    pub fn scaled(&self, mult: f64) -> LrPlan {
        LrPlan {
            eta0: self.eta0 * mult,
            values: self.values.iter().map(|(k, v)| (k.clone(), v * mult)).collect(),
        }
    }

    pub fn validate_covers(&self, model: &Model) -> Result<()> {
        for e in model.entries() {
            if !self.values.contains_key(&e.name) {
                return Err(Error::MissingLayer {
                    layer: e.name.clone(),
                    what: "learning-rate plan",
                });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct OptimState {
    pub kind: OptimKind,
    pub hyper: OptimHyper,
    step: u64,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
}

impl OptimState {
    pub fn new(kind: OptimKind, hyper: OptimHyper) -> Self {
        OptimState {
            kind,
            hyper,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One optimizer step over every model parameter.
    pub fn step(
        &mut self,
        model: &mut Model,
        grads: &BTreeMap<String, Tensor>,
        plan: &LrPlan,
    ) -> Result<()> {
        self.step += 1;
        let t = self.step;
        let h = self.hyper;
        let names = model.param_names();
        for name in names {
            let grad = grads.get(&name).ok_or_else(|| Error::MissingLayer {
                layer: name.clone(),
                what: "gradients",
            })?;
            let eta = plan.get(&name).ok_or_else(|| Error::MissingLayer {
                layer: name.clone(),
                what: "learning-rate plan",
            })?;
            let kind = self.kind;
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(grad.shape()));
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(grad.shape()));
            model.update_param(&name, |w| {
                apply_rule(kind, h, t, eta, w, grad, m, v);
            })?;
        }
        Ok(())
    }
}

fn apply_rule(
    kind: OptimKind,
    h: OptimHyper,
    t: u64,
    eta: f64,
    w: &mut Tensor,
    grad: &Tensor,
    m: &mut Tensor,
    v: &mut Tensor,
) {
    let g = grad.data();
    let w = w.data_mut();
    let m = m.data_mut();
    let v = v.data_mut();
    match kind {
        OptimKind::Sgd => {
            if h.momentum > 0.0 {
                for i in 0..w.len() {
                    m[i] = h.momentum * m[i] + g[i];
                    w[i] -= eta * m[i];
                }
            } else {
                for i in 0..w.len() {
                    w[i] -= eta * g[i];
                }
            }
        }
        OptimKind::SignSgd => {
            for i in 0..w.len() {
                m[i] = h.momentum * m[i] + g[i];
                w[i] -= eta * sign(m[i]);
            }
        }
        OptimKind::Adam | OptimKind::AdamW => {
            let bc1 = 1.0 - h.beta1.powi(t as i32);
            let bc2 = 1.0 - h.beta2.powi(t as i32);
            let decay = if kind == OptimKind::AdamW {
                h.weight_decay
            } else {
                0.0
            };
            for i in 0..w.len() {
                m[i] = h.beta1 * m[i] + (1.0 - h.beta1) * g[i];
                v[i] = h.beta2 * v[i] + (1.0 - h.beta2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                w[i] -= eta * (m_hat / (v_hat.sqrt() + h.eps) + decay * w[i]);
            }
        }
        OptimKind::Adamax => {
            let bc1 = 1.0 - h.beta1.powi(t as i32);
            for i in 0..w.len() {
                m[i] = h.beta1 * m[i] + (1.0 - h.beta1) * g[i];
                v[i] = (h.beta2 * v[i]).max(g[i].abs());
                w[i] -= eta * m[i] / (bc1 * (v[i] + h.eps));
            }
        }
        OptimKind::Adagrad => {
            for i in 0..w.len() {
                v[i] += g[i] * g[i];
                w[i] -= eta * g[i] / (v[i].sqrt() + h.eps);
            }
        }
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// LR=1 update implied by a step: (after - before) / eta per layer.
pub fn snapshot_and_unit_delta(
    before: &BTreeMap<String, Tensor>,
    after: &Model,
    plan: &LrPlan,
) -> Result<BTreeMap<String, Tensor>> {
    let mut out = BTreeMap::new();
    for e in after.entries() {
        let prev = before.get(&e.name).ok_or_else(|| Error::MissingLayer {
            layer: e.name.clone(),
            what: "snapshot",
        })?;
        let eta = plan.get(&e.name).ok_or_else(|| Error::MissingLayer {
            layer: e.name.clone(),
            what: "learning-rate plan",
        })?;
        if eta == 0.0 {
            return Err(Error::Config(format!(
                "unit delta undefined at eta = 0 for layer '{}'",
                e.name
            )));
        }
        let delta = e.tensor.sub(prev)?.scale(1.0 / eta);
        out.insert(e.name.clone(), delta);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::ModelConfig;
    use crate::rng::Rng;

    fn one_param_model() -> Model {
        let mut cfg = ModelConfig::resmlp(2, 2);
        cfg.resmlp_hidden = 2;
        Model::build(&cfg, &mut Rng::new(1)).unwrap()
    }

    fn grads_like(model: &Model, value: f64) -> BTreeMap<String, Tensor> {
        model
            .entries()
            .iter()
            .map(|e| (e.name.clone(), Tensor::full(e.tensor.shape(), value)))
            .collect()
    }

    #[test]
    fn adam_first_step_is_signed_unit() {
        let mut model = one_param_model();
        let before = model.snapshot();
        let grads = grads_like(&model, 1.0);
        let plan = LrPlan::uniform(0.1, model.param_names());
        let mut opt = OptimState::new(OptimKind::Adam, OptimHyper::default());
        opt.step(&mut model, &grads, &plan).unwrap();
        let delta = model.get("block0.w").unwrap().data()[0] - before["block0.w"].data()[0];
        let want = -0.1 * 1.0 / (1.0 + 1e-8);
        assert!((delta - want).abs() < 1e-15, "delta {delta} != {want}");
    }

    #[test]
    fn sgd_without_momentum_is_definitional() {
        let mut model = one_param_model();
        let before = model.snapshot();
        let grads = grads_like(&model, 2.0);
        let plan = LrPlan::uniform(0.5, model.param_names());
        let mut opt = OptimState::new(
            OptimKind::Sgd,
            OptimHyper {
                momentum: 0.0,
                ..OptimHyper::default()
            },
        );
        opt.step(&mut model, &grads, &plan).unwrap();
        let delta = model.get("input.w").unwrap().data()[0] - before["input.w"].data()[0];
        assert_eq!(delta, -1.0);
    }

    #[test]
    fn signsgd_moves_by_eta_against_sign() {
        let mut model = one_param_model();
        let before = model.snapshot();
        let grads = grads_like(&model, -3.7);
        let plan = LrPlan::uniform(0.01, model.param_names());
        let mut opt = OptimState::new(OptimKind::SignSgd, OptimHyper::default());
        opt.step(&mut model, &grads, &plan).unwrap();
        let delta = model.get("input.w").unwrap().data()[0] - before["input.w"].data()[0];
        assert!((delta - 0.01).abs() < 1e-16);
    }

    #[test]
    fn unit_delta_examples() {
        // before 1.0, after 0.9, eta 0.1 -> unit delta -1.0
        let mut model = one_param_model();
        let mut before = model.snapshot();
        before.insert(
            "input.w".to_string(),
            Tensor::full(model.get("input.w").unwrap().shape(), 1.0),
        );
        model
            .update_param("input.w", |w| w.data_mut().fill(0.9))
            .unwrap();
        let plan = LrPlan::uniform(0.1, model.param_names());
        let deltas = snapshot_and_unit_delta(&before, &model, &plan).unwrap();
        for &v in deltas["input.w"].data() {
            assert!((v - (-1.0)).abs() < 1e-12);
        }
        // after == before -> zero
        let same = model.snapshot();
        let zero = snapshot_and_unit_delta(&same, &model, &plan).unwrap();
        assert!(zero["input.w"].data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn unit_delta_rejects_zero_eta() {
        let model = one_param_model();
        let before = model.snapshot();
        let mut values: BTreeMap<String, f64> = model
            .param_names()
            .into_iter()
            .map(|n| (n, 0.1))
            .collect();
        values.insert("input.w".into(), 1.0);
        let plan = LrPlan { eta0: 0.1, values };
        let mut broken = plan.clone();
        broken.values.insert("input.w".into(), 0.0);
        assert!(snapshot_and_unit_delta(&before, &model, &broken).is_err());
    }

    #[test]
    fn sgd_unit_delta_is_minus_grad_for_any_eta() {
        for eta in [0.3, 0.001, 7.0] {
            let mut model = one_param_model();
            let before = model.snapshot();
            let mut grads = grads_like(&model, 0.0);
            grads.insert(
                "input.w".into(),
                Tensor::full(model.get("input.w").unwrap().shape(), 2.0),
            );
            let plan = LrPlan::uniform(eta, model.param_names());
            let mut opt = OptimState::new(
                OptimKind::Sgd,
                OptimHyper {
                    momentum: 0.0,
                    ..OptimHyper::default()
                },
            );
            opt.step(&mut model, &grads, &plan).unwrap();
            let deltas = snapshot_and_unit_delta(&before, &model, &plan).unwrap();
            for &v in deltas["input.w"].data() {
                assert!((v - (-2.0)).abs() < 1e-12, "eta={eta}: unit delta {v}");
            }
        }
    }

    #[test]
    fn adam_unit_delta_is_eta_invariant() {
        let mut grads_rng = Rng::new(2);
        let reference = {
            let mut model = one_param_model();
            let grads: BTreeMap<String, Tensor> = model
                .entries()
                .iter()
                .map(|e| (e.name.clone(), grads_rng.standard_normal(e.tensor.shape())))
                .collect();
            let before = model.snapshot();
            let plan = LrPlan::uniform(0.001, model.param_names());
            let mut opt = OptimState::new(OptimKind::Adam, OptimHyper::default());
            opt.step(&mut model, &grads, &plan).unwrap();
            (grads, snapshot_and_unit_delta(&before, &model, &plan).unwrap())
        };
        let (grads, unit_a) = reference;
        let mut model = one_param_model();
        let before = model.snapshot();
        let plan = LrPlan::uniform(0.37, model.param_names());
        let mut opt = OptimState::new(OptimKind::Adam, OptimHyper::default());
        opt.step(&mut model, &grads, &plan).unwrap();
        let unit_b = snapshot_and_unit_delta(&before, &model, &plan).unwrap();
        for (name, da) in &unit_a {
            for (x, y) in da.data().iter().zip(unit_b[name].data()) {
                assert!((x - y).abs() < 1e-12, "{name}: {x} vs {y}");
            }
        }
    }

    #[test]
    fn plan_must_cover_every_layer() {
        let mut model = one_param_model();
        let grads = grads_like(&model, 1.0);
        let mut values: BTreeMap<String, f64> = BTreeMap::new();
        values.insert("input.w".into(), 0.1);
        let plan = LrPlan { eta0: 0.1, values };
        let mut opt = OptimState::new(OptimKind::Adam, OptimHyper::default());
        assert!(opt.step(&mut model, &grads, &plan).is_err());
        assert!(plan.validate_covers(&model).is_err());
    }
}
