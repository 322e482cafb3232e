//! Recording and matching function-space learning rates across model scales.
//!
//! A base run records, every `cadence` steps, the per-layer RMS function
//! change implied by an LR=1 update (warming the EMAs up on several probe
//! batches first). A scaled run then sets each layer's parameter-space
//! learning rate to eta0 * base / current, so its function-space updates
//! track the base model's. When the scaled model is deeper, each base
//! block's value is shared equally among the blocks that replicate it;
//! embedding and readout layers are never split.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autograd::Graph;
use crate::data::BatchStream;
use crate::error::{Error, Result};
use crate::estimator::{
    accumulate_probe, estimate_all, sample_phi, EmaState, EstimatorChoice, FslrEstimate,
};
use crate::models::{block_param_name, Model, ModelConfig, ParamMeta, Role};
use crate::optim::{snapshot_and_unit_delta, LrPlan, OptimState};
use crate::rng::Rng;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScheduleMeta {
    pub base_config: ModelConfig,
    pub eta0: f64,
    pub seeds: Vec<u64>,
    pub beta: f64,
    pub cadence: u64,
    pub warmup: u64,
}

/// Time-indexed per-layer base function-space learning rates.
#[derive(Debug, Clone)]
pub struct FslrSchedule {
    pub entries: Vec<(u64, BTreeMap<String, f64>)>,
    pub meta: ScheduleMeta,
}

impl FslrSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.entries.is_empty() {
            return Err(Error::Config("schedule has no entries".into()));
        }
        let layers: Vec<&String> = self.entries[0].1.keys().collect();
        let mut prev: Option<u64> = None;
        for (step, values) in &self.entries {
            if let Some(p) = prev {
                if *step <= p {
                    return Err(Error::Config(format!(
                        "schedule steps not strictly increasing at {step}"
                    )));
                }
            }
            prev = Some(*step);
            if values.keys().collect::<Vec<_>>() != layers {
                return Err(Error::Config(format!(
                    "schedule entry at step {step} covers a different layer set"
                )));
            }
        }
        Ok(())
    }

    /// Latest entry at or before `step` (step-function lookup).
    pub fn latest_at(&self, step: u64) -> Option<&BTreeMap<String, f64>> {
        self.entries
            .iter()
            .rev()
            .find(|(s, _)| *s <= step)
            .map(|(_, v)| v)
    }

    pub fn save(&self, csv_path: &Path, sidecar_path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(csv_path)?;
        writeln!(f, "step,layer,fslr")?;
        for (step, values) in &self.entries {
            for (layer, v) in values {
                writeln!(f, "{step},{layer},{v}")?;
            }
        }
        std::fs::write(sidecar_path, serde_json::to_string_pretty(&self.meta)?)?;
        Ok(())
    }

    pub fn load(csv_path: &Path, sidecar_path: &Path) -> Result<FslrSchedule> {
        let meta: ScheduleMeta = serde_json::from_str(&std::fs::read_to_string(sidecar_path)?)?;
        let text = std::fs::read_to_string(csv_path)?;
        let mut by_step: BTreeMap<u64, BTreeMap<String, f64>> = BTreeMap::new();
        for (i, line) in text.lines().enumerate() {
            if i == 0 {
                if line != "step,layer,fslr" {
                    return Err(Error::Data(format!("unexpected schedule header '{line}'")));
                }
                continue;
            }
            if line.is_empty() {
                continue;
            }
            let mut parts = line.splitn(3, ',');
            let (step, layer, v) = match (parts.next(), parts.next(), parts.next()) {
                (Some(s), Some(l), Some(v)) => (s, l, v),
                _ => return Err(Error::Data(format!("malformed schedule row '{line}'"))),
            };
            let step: u64 = step
                .parse()
                .map_err(|_| Error::Data(format!("bad step '{step}'")))?;
            let v: f64 = v
                .parse()
                .map_err(|_| Error::Data(format!("bad fslr value '{v}'")))?;
            if by_step
                .entry(step)
                .or_default()
                .insert(layer.to_string(), v)
                .is_some()
            {
                return Err(Error::Data(format!(
                    "duplicate schedule cell at step {step}, layer {layer}"
                )));
            }
        }
        let schedule = FslrSchedule {
            entries: by_step.into_iter().collect(),
            meta,
        };
        schedule.validate()?;
        Ok(schedule)
    }
}

/// Arithmetic per-cell mean of several recordings with identical structure.
pub fn seed_average(schedules: &[FslrSchedule]) -> Result<FslrSchedule> {
    let first = schedules
        .first()
        .ok_or_else(|| Error::Config("seed_average needs at least one schedule".into()))?;
    first.validate()?;
    let steps: Vec<u64> = first.entries.iter().map(|(s, _)| *s).collect();
    for s in &schedules[1..] {
        s.validate()?;
        let other: Vec<u64> = s.entries.iter().map(|(st, _)| *st).collect();
        if other != steps {
            return Err(Error::Config("schedules have different step sets".into()));
        }
        for ((_, a), (_, b)) in first.entries.iter().zip(&s.entries) {
            if a.keys().ne(b.keys()) {
                return Err(Error::Config("schedules cover different layer sets".into()));
            }
        }
    }
    let n = schedules.len() as f64;
    let entries = first
        .entries
        .iter()
        .enumerate()
        .map(|(i, (step, values))| {
            let avg = values
                .keys()
                .map(|layer| {
                    let total: f64 = schedules.iter().map(|s| s.entries[i].1[layer]).sum();
                    (layer.clone(), total / n)
                })
                .collect();
            (*step, avg)
        })
        .collect();
    let mut meta = first.meta.clone();
    meta.seeds = schedules.iter().flat_map(|s| s.meta.seeds.clone()).collect();
    Ok(FslrSchedule { entries, meta })
}

// ---- layer mapping -----------------------------------------------------

/// Scaled layer -> (base layer, mass fraction). Fractions are exact
/// rationals so that the per-block mass invariant can hold exactly.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MapEntry {
    pub base: String,
    pub num: u64,
    pub den: u64,
}

impl MapEntry {
    pub fn fraction(&self) -> f64 {
        self.num as f64 / self.den as f64
    }
}

#[derive(Debug, Clone, Default)]
pub struct LayerMap {
    entries: BTreeMap<String, MapEntry>,
}

impl LayerMap {
    pub fn identity(model: &Model) -> LayerMap {
        LayerMap {
            entries: model
                .entries()
                .iter()
                .map(|e| {
                    (
                        e.name.clone(),
                        MapEntry {
                            base: e.name.clone(),
                            num: 1,
                            den: 1,
                        },
                    )
                })
                .collect(),
        }
    }

    pub fn get(&self, scaled: &str) -> Option<&MapEntry> {
        self.entries.get(scaled)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &MapEntry)> {
        self.entries.iter()
    }
}

/// Block-sharing heuristic: base block i maps to scaled blocks
/// i*m..(i+1)*m-1 with fraction 1/m; embedding and readout map one-to-one.
pub fn depth_split(base: &Model, scaled: &Model) -> Result<LayerMap> {
    let bb = base.num_blocks();
    let sb = scaled.num_blocks();
    if bb == 0 || sb % bb != 0 {
        return Err(Error::Config(format!(
            "scaled block count {sb} is not an integer multiple of base {bb}"
        )));
    }
    let m = (sb / bb) as u64;
    let mut entries = BTreeMap::new();
    for e in scaled.entries() {
        let entry = match e.meta.role {
            Role::Embedding | Role::Readout => {
                if base.get(&e.name).is_none() {
                    return Err(Error::MissingLayer {
                        layer: e.name.clone(),
                        what: "base model",
                    });
                }
                MapEntry {
                    base: e.name.clone(),
                    num: 1,
                    den: 1,
                }
            }
            Role::Hidden { block } => {
                let suffix = e.meta.suffix.as_deref().ok_or_else(|| {
                    Error::Config(format!("hidden layer '{}' missing block suffix", e.name))
                })?;
                let base_name = block_param_name(block / m as usize, suffix);
                if base.get(&base_name).is_none() {
                    return Err(Error::MissingLayer {
                        layer: base_name,
                        what: "base model",
                    });
                }
                MapEntry {
                    base: base_name,
                    num: 1,
                    den: m,
                }
            }
        };
        entries.insert(e.name.clone(), entry);
    }
    Ok(LayerMap { entries })
}

/// eta^l = eta0 * (fraction * base fslr) / current fslr, using the latest
/// schedule entry at or before `step`.
pub fn set_lrs(
    schedule: &FslrSchedule,
    map: &LayerMap,
    current: &FslrEstimate,
    eta0: f64,
    step: u64,
) -> Result<LrPlan> {
    let entry = schedule.latest_at(step).ok_or_else(|| {
        Error::Config(format!("schedule has no entry at or before step {step}"))
    })?;
    let mut values = BTreeMap::new();
    for (scaled, m) in map.iter() {
        let base = entry.get(&m.base).ok_or_else(|| Error::MissingLayer {
            layer: m.base.clone(),
            what: "base schedule",
        })?;
        let cur = *current.values.get(scaled).ok_or_else(|| Error::MissingLayer {
            layer: scaled.clone(),
            what: "current estimates",
        })?;
        if !cur.is_finite() {
            return Err(Error::NonFinite {
                layer: scaled.clone(),
                reason: format!("current fslr is {cur}"),
            });
        }
        if cur <= 0.0 {
            return Err(Error::DegenerateLayer {
                layer: scaled.clone(),
                reason: format!("current fslr {cur} <= 0"),
            });
        }
        values.insert(scaled.clone(), eta0 * (m.fraction() * base) / cur);
    }
    LrPlan::from_map(eta0, values)
}

/// Per-step multipliers that replay a recorded base learning-rate trace:
/// multiplier(t) = base_lr(t) / base_lr(0).
pub fn replay_scheduler(base_lr_trace: &[f64]) -> Result<Vec<f64>> {
    let first = *base_lr_trace
        .first()
        .ok_or_else(|| Error::Config("empty base learning-rate trace".into()))?;
    if base_lr_trace.iter().any(|&v| !(v > 0.0) || !v.is_finite()) {
        return Err(Error::Config("base learning-rate trace must be positive".into()));
    }
    Ok(base_lr_trace.iter().map(|&v| v / first).collect())
}

/// Cosine annealing multipliers over `steps`: 0.5 * (1 + cos(pi t / T)).
pub fn cosine_multipliers(steps: u64) -> Vec<f64> {
    (0..steps)
        .map(|t| 0.5 * (1.0 + (std::f64::consts::PI * t as f64 / steps as f64).cos()))
        .collect()
}

/// Ablation schedule: one entry at step 0, equal values over the base
/// model's layers summing to 1 (depth splitting still applies downstream).
pub fn uniform_split_schedule(base: &Model, meta: ScheduleMeta) -> FslrSchedule {
    let p = base.entries().len() as f64;
    FslrSchedule {
        entries: vec![(
            0,
            base.entries()
                .iter()
                .map(|e| (e.name.clone(), 1.0 / p))
                .collect(),
        )],
        meta,
    }
}

/// Ablation schedule: equal values over ALL scaled layers summing to 1,
/// used with an identity map; embedding/readout mass dilutes with depth.
pub fn uniform_flat_schedule(scaled: &Model, meta: ScheduleMeta) -> FslrSchedule {
    uniform_split_schedule(scaled, meta)
}

// ---- training loops ----------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FlermMode {
    /// Fix the per-layer plan once, right after EMA warmup at step 0.
    SetOnce,
    /// Re-measure with one probe batch and re-set the plan every cadence.
    Periodic,
}

#[derive(Debug, Clone)]
pub struct TrainSettings {
    pub steps: u64,
    pub cadence: u64,
    pub warmup: u64,
    pub beta: f64,
    pub estimator: EstimatorChoice,
    /// Per-step learning-rate multipliers (scheduler); empty = constant.
    pub lr_multipliers: Vec<f64>,
}

impl TrainSettings {
    pub fn new(steps: u64) -> Self {
        TrainSettings {
            steps,
            cadence: 100,
            warmup: 40,
            beta: 0.9,
            estimator: EstimatorChoice::Kron,
            lr_multipliers: Vec::new(),
        }
    }

    fn multiplier(&self, t: u64) -> f64 {
        self.lr_multipliers.get(t as usize).copied().unwrap_or(1.0)
    }
}

pub struct RunOutput {
    pub model: Model,
    pub losses: Vec<f64>,
    pub diverged: bool,
    pub steps_run: u64,
    /// Estimates at each measured step.
    pub fslr_trace: Vec<(u64, FslrEstimate)>,
    /// Plan revisions: (step, plan), starting with the initial uniform plan.
    pub lr_trace: Vec<(u64, LrPlan)>,
    pub schedule: Option<FslrSchedule>,
}

enum LoopKind<'a> {
    Standard,
    Record,
    Flerm {
        base: &'a FslrSchedule,
        map: &'a LayerMap,
        mode: FlermMode,
    },
}

impl LoopKind<'_> {
    fn measures(&self) -> bool {
        !matches!(self, LoopKind::Standard)
    }
}

/// Plain training at a uniform learning rate; no measurement.
pub fn run_standard(
    model: Model,
    optim: OptimState,
    eta0: f64,
    settings: &TrainSettings,
    train: &mut BatchStream,
    probe: &mut BatchStream,
    rng: &Rng,
) -> Result<RunOutput> {
    train_loop(model, optim, eta0, settings, train, probe, rng, LoopKind::Standard)
}

/// Standard training that records the base function-space learning rates.
pub fn record(
    model: Model,
    optim: OptimState,
    eta0: f64,
    settings: &TrainSettings,
    train: &mut BatchStream,
    probe: &mut BatchStream,
    rng: &Rng,
) -> Result<RunOutput> {
    train_loop(model, optim, eta0, settings, train, probe, rng, LoopKind::Record)
}

/// Scaled-model training with per-layer rates matched to a base schedule.
#[allow(clippy::too_many_arguments)]
pub fn run_flerm(
    model: Model,
    optim: OptimState,
    eta0: f64,
    settings: &TrainSettings,
    train: &mut BatchStream,
    probe: &mut BatchStream,
    rng: &Rng,
    base: &FslrSchedule,
    map: &LayerMap,
    mode: FlermMode,
) -> Result<RunOutput> {
    base.validate()?;
    train_loop(
        model,
        optim,
        eta0,
        settings,
        train,
        probe,
        rng,
        LoopKind::Flerm { base, map, mode },
    )
}

fn measurement_failed(e: &Error) -> bool {
    matches!(e, Error::DegenerateLayer { .. } | Error::NonFinite { .. })
}

#[allow(clippy::too_many_arguments)]
fn train_loop(
    mut model: Model,
    mut optim: OptimState,
    eta0: f64,
    settings: &TrainSettings,
    train: &mut BatchStream,
    probe: &mut BatchStream,
    rng: &Rng,
    kind: LoopKind<'_>,
) -> Result<RunOutput> {
    let metas: Vec<(String, ParamMeta)> = model
        .entries()
        .iter()
        .map(|e| (e.name.clone(), e.meta.clone()))
        .collect();
    let mut plan = LrPlan::uniform(eta0, model.param_names());
    let mut ema = EmaState::new(settings.beta);
    let mut probe_rng = rng.derive("probe-omega", 0);
    let mut losses = Vec::new();
    let mut diverged = false;
    let mut fslr_trace = Vec::new();
    let mut lr_trace = vec![(0u64, plan.clone())];
    let mut schedule_entries: Vec<(u64, BTreeMap<String, f64>)> = Vec::new();
    let mut steps_run = 0u64;

    'steps: for t in 0..settings.steps {
        let batch = train
            .next_batch()
            .ok_or_else(|| Error::Data("training stream has no batches".into()))?;
        let mut g = Graph::new();
        let fp = model.forward(&mut g, &batch.input)?;
        let loss = g.cross_entropy(fp.logits, &batch.targets)?;
        let loss_value = g.value(loss).item();
        if !loss_value.is_finite() {
            diverged = true;
            break 'steps;
        }
        losses.push(loss_value);
        g.backward(loss)?;
        let grads: BTreeMap<String, crate::tensor::Tensor> = fp
            .params
            .iter()
            .map(|(n, id)| (n.clone(), g.grad_or_zeros(*id)))
            .collect();
        drop(g);

        let measuring = kind.measures() && t % settings.cadence == 0;
        let before = if measuring { Some(model.snapshot()) } else { None };
        let mult = settings.multiplier(t);
        let plan_eff = if mult == 1.0 { plan.clone() } else { plan.scaled(mult) };
        optim.step(&mut model, &grads, &plan_eff)?;
        steps_run = t + 1;

        if let Some(before) = before {
            let unit = snapshot_and_unit_delta(&before, &model, &plan_eff)?;
            let n_probes = if t == 0 { settings.warmup.max(1) } else { 1 };
            for _ in 0..n_probes {
                let pb = probe
                    .next_batch()
                    .ok_or_else(|| Error::Data("probe stream has no batches".into()))?;
                let (_, grads_phi) = sample_phi(&model, &pb, &mut probe_rng)?;
                accumulate_probe(&mut ema, &unit, &grads_phi)?;
            }
            match estimate_all(&ema, &metas, settings.estimator) {
                Ok(est) => {
                    fslr_trace.push((t, est.clone()));
                    match &kind {
                        LoopKind::Record => schedule_entries.push((t, est.values.clone())),
                        LoopKind::Flerm { base, map, mode } => {
                            if t == 0 || *mode == FlermMode::Periodic {
                                match set_lrs(base, map, &est, eta0, t) {
                                    Ok(p) => {
                                        p.validate_covers(&model)?;
                                        plan = p;
                                        lr_trace.push((t, plan.clone()));
                                    }
                                    Err(e) if measurement_failed(&e) => {
                                        diverged = true;
                                        break 'steps;
                                    }
                                    Err(e) => return Err(e),
                                }
                            }
                        }
                        LoopKind::Standard => {}
                    }
                }
                Err(e) if matches!(kind, LoopKind::Flerm { .. }) && measurement_failed(&e) => {
                    diverged = true;
                    break 'steps;
                }
                Err(e) => return Err(e),
            }
        }
    }

    let schedule = if matches!(kind, LoopKind::Record) {
        let s = FslrSchedule {
            entries: schedule_entries,
            meta: ScheduleMeta {
                base_config: model.config.clone(),
                eta0,
                seeds: vec![rng.seed()],
                beta: settings.beta,
                cadence: settings.cadence,
                warmup: settings.warmup,
            },
        };
        s.validate()?;
        Some(s)
    } else {
        None
    };

    Ok(RunOutput {
        model,
        losses,
        diverged,
        steps_run,
        fslr_trace,
        lr_trace,
        schedule,
    })
}

/// Measure the per-layer fslr of a FIXED set of deltas with fresh probes.
///
/// Used by closed-loop checks and the oracle comparisons: the deltas do not
/// move while `n_probes` fresh (batch, omega) draws accumulate into a new
/// EMA bank, which is then read out once.
pub fn measure_deltas(
    model: &Model,
    unit_deltas: &BTreeMap<String, crate::tensor::Tensor>,
    probe: &mut BatchStream,
    probe_rng: &mut Rng,
    n_probes: u64,
    beta: f64,
    choice: EstimatorChoice,
) -> Result<FslrEstimate> {
    let metas: Vec<(String, ParamMeta)> = model
        .entries()
        .iter()
        .map(|e| (e.name.clone(), e.meta.clone()))
        .collect();
    let mut ema = EmaState::new(beta);
    for _ in 0..n_probes {
        let pb = probe
            .next_batch()
            .ok_or_else(|| Error::Data("probe stream has no batches".into()))?;
        let (_, grads_phi) = sample_phi(model, &pb, probe_rng)?;
        accumulate_probe(&mut ema, unit_deltas, &grads_phi)?;
    }
    estimate_all(&ema, &metas, choice)
}
