//! Sweep execution: grid cells over (scale, eta0, seed), schedule
//! recording, and the CSV shapes of everything.
//!
//! Cells are independent and run in parallel; results merge in a fixed
//! cell order so reruns of one config are byte-identical.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use fslr::data::{make_streams, Dataset};
use fslr::error::{Error, Result};
use fslr::flerm::{
    self, cosine_multipliers, depth_split, replay_scheduler, seed_average, FlermMode,
    FslrSchedule, LayerMap, RunOutput, ScheduleMeta, TrainSettings,
};
use fslr::models::Model;
use fslr::optim::OptimState;
use fslr::rng::Rng;

use crate::config::{ExperimentConfig, LrSchedule, RunMode};

#[derive(Debug, Clone, PartialEq)]
pub struct ResultRow {
    pub scale: f64,
    pub eta0: f64,
    pub seed: u64,
    pub mode: String,
    pub final_loss: f64,
    pub steps_run: u64,
    pub diverged: bool,
}

/// Traces captured from one cell when trace output is requested.
pub struct CellTraces {
    pub tag: String,
    pub lr_trace: Vec<(u64, fslr::optim::LrPlan)>,
    pub fslr_trace: Vec<(u64, fslr::estimator::FslrEstimate)>,
    pub metas: Vec<(String, fslr::models::ParamMeta)>,
}

pub struct RunArtifacts {
    pub rows: Vec<ResultRow>,
    pub traces: Vec<CellTraces>,
}

fn all_problems(config: &ExperimentConfig) -> Result<()> {
    let problems = config.validate();
    if problems.is_empty() {
        Ok(())
    } else {
        Err(Error::Config(format!(
            "configuration invalid:\n  - {}",
            problems.join("\n  - ")
        )))
    }
}

fn settings_for(config: &ExperimentConfig, multipliers: Vec<f64>) -> TrainSettings {
    TrainSettings {
        steps: config.steps,
        cadence: config.cadence,
        warmup: config.warmup,
        beta: config.beta,
        estimator: config.estimator,
        lr_multipliers: multipliers,
    }
}

/// Per-step multipliers for this config's scheduler shape.
fn base_multipliers(config: &ExperimentConfig) -> Vec<f64> {
    match config.lr_schedule {
        LrSchedule::Constant => Vec::new(),
        LrSchedule::Cosine => cosine_multipliers(config.steps),
    }
}

/// FLeRM cells replay the ratio trace of the base scheduler.
fn replayed_multipliers(config: &ExperimentConfig, eta0: f64) -> Result<Vec<f64>> {
    match config.lr_schedule {
        LrSchedule::Constant => Ok(Vec::new()),
        LrSchedule::Cosine => {
            let base_trace: Vec<f64> = cosine_multipliers(config.steps)
                .iter()
                .map(|m| eta0 * m)
                .collect();
            replay_scheduler(&base_trace)
        }
    }
}

fn final_loss(out: &RunOutput, steps: u64) -> f64 {
    if out.losses.is_empty() {
        return f64::NAN;
    }
    if out.diverged {
        return *out.losses.last().expect("non-empty");
    }
    let window = (steps / 2).clamp(1, 200) as usize;
    let window = window.min(out.losses.len());
    let tail = &out.losses[out.losses.len() - window..];
    tail.iter().sum::<f64>() / tail.len() as f64
}

/// Run the full (scale x eta0 x seed) grid for this config.
pub fn run(config: &ExperimentConfig, keep_traces: bool) -> Result<RunArtifacts> {
    all_problems(config)?;
    let dataset = config.build_dataset()?;
    let schedules = if config.mode.needs_schedule_files() {
        Some(load_schedules(config)?)
    } else {
        None
    };

    let mut cells = Vec::new();
    for (si, &scale) in config.scale_multipliers.iter().enumerate() {
        for (ei, &eta0) in config.eta0_grid.iter().enumerate() {
            for &seed in &config.seeds {
                cells.push((si, ei, scale, eta0, seed));
            }
        }
    }

    let outputs: Vec<Result<(ResultRow, Option<CellTraces>)>> = cells
        .par_iter()
        .map(|&(_si, ei, scale, eta0, seed)| {
            run_cell(
                config,
                &dataset,
                schedules.as_ref().map(|s| &s[ei]),
                scale,
                eta0,
                seed,
                keep_traces,
            )
        })
        .collect();

    let mut rows = Vec::with_capacity(outputs.len());
    let mut traces = Vec::new();
    for out in outputs {
        let (row, trace) = out?;
        rows.push(row);
        if let Some(t) = trace {
            traces.push(t);
        }
    }
    Ok(RunArtifacts { rows, traces })
}

#[allow(clippy::too_many_arguments)]
fn run_cell(
    config: &ExperimentConfig,
    dataset: &std::sync::Arc<Dataset>,
    schedule: Option<&FslrSchedule>,
    scale: f64,
    eta0: f64,
    seed: u64,
    keep_traces: bool,
) -> Result<(ResultRow, Option<CellTraces>)> {
    let cell_cfg = config.cell_model(scale, dataset)?;
    let rng = Rng::new(seed);
    let model = Model::build(&cell_cfg, &mut rng.derive("init", 0))?;
    let metas: Vec<(String, fslr::models::ParamMeta)> = model
        .entries()
        .iter()
        .map(|e| (e.name.clone(), e.meta.clone()))
        .collect();
    let (mut train, mut probe) = make_streams(
        std::sync::Arc::clone(dataset),
        config.batch_size,
        &rng.derive("data", 0),
    )?;
    let optim = OptimState::new(config.optimizer.kind, config.optimizer.hyper);

    let out = match config.mode {
        RunMode::Standard => {
            let settings = settings_for(config, base_multipliers(config));
            flerm::run_standard(model, optim, eta0, &settings, &mut train, &mut probe, &rng)?
        }
        RunMode::FlermSetOnce | RunMode::FlermPeriodic => {
            let base = schedule.expect("schedules loaded for flerm modes");
            let base_model = Model::build(&base.meta.base_config, &mut rng.derive("base-map", 0))?;
            let map = depth_split(&base_model, &model)?;
            let settings = settings_for(config, replayed_multipliers(config, eta0)?);
            let mode = if config.mode == RunMode::FlermPeriodic {
                FlermMode::Periodic
            } else {
                FlermMode::SetOnce
            };
            flerm::run_flerm(
                model, optim, eta0, &settings, &mut train, &mut probe, &rng, base, &map, mode,
            )?
        }
        RunMode::AblationUniformSplit | RunMode::AblationUniformFlat => {
            let meta = ScheduleMeta {
                base_config: cell_cfg.clone(),
                eta0,
                seeds: vec![seed],
                beta: config.beta,
                cadence: config.cadence,
                warmup: config.warmup,
            };
            let (synth, map) = if config.mode == RunMode::AblationUniformSplit {
                let base_cfg = config.cell_model(config.scale_multipliers[0], dataset)?;
                let base_model = Model::build(&base_cfg, &mut rng.derive("base-map", 0))?;
                let mut meta = meta;
                meta.base_config = base_cfg.clone();
                (
                    flerm::uniform_split_schedule(&base_model, meta),
                    depth_split(&base_model, &model)?,
                )
            } else {
                (
                    flerm::uniform_flat_schedule(&model, meta),
                    LayerMap::identity(&model),
                )
            };
            let settings = settings_for(config, replayed_multipliers(config, eta0)?);
            flerm::run_flerm(
                model,
                optim,
                eta0,
                &settings,
                &mut train,
                &mut probe,
                &rng,
                &synth,
                &map,
                FlermMode::SetOnce,
            )?
        }
    };

    let row = ResultRow {
        scale,
        eta0,
        seed,
        mode: config.mode.as_str().to_string(),
        final_loss: final_loss(&out, config.steps),
        steps_run: out.steps_run,
        diverged: out.diverged,
    };
    let traces = keep_traces.then(|| CellTraces {
        tag: format!("scale{scale}_eta{eta0}_seed{seed}"),
        lr_trace: out.lr_trace,
        fslr_trace: out.fslr_trace,
        metas,
    });
    Ok((row, traces))
}

/// One schedule per eta0 grid point, matched by the sidecar's eta0 value.
fn load_schedules(config: &ExperimentConfig) -> Result<Vec<FslrSchedule>> {
    let dir = config
        .schedule_dir
        .as_ref()
        .expect("validated: schedule_dir present");
    let mut sidecars: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension().is_some_and(|x| x == "json")
                && p.file_stem()
                    .and_then(|s| s.to_str())
                    .is_some_and(|s| s.starts_with("avg_"))
        })
        .collect();
    sidecars.sort();
    let mut available = Vec::new();
    for sidecar in &sidecars {
        let csv = sidecar.with_extension("csv");
        available.push(FslrSchedule::load(&csv, sidecar)?);
    }
    let mut out = Vec::new();
    for &eta in &config.eta0_grid {
        let found = available
            .iter()
            .find(|s| (s.meta.eta0 - eta).abs() <= 1e-9 * eta.abs().max(1e-300));
        match found {
            Some(s) => out.push(s.clone()),
            None => {
                return Err(Error::Config(format!(
                    "no averaged schedule for eta0 {eta} in {}",
                    dir.display()
                )))
            }
        }
    }
    Ok(out)
}

pub struct RecordedFiles {
    pub raw: Vec<PathBuf>,
    pub averaged: Vec<PathBuf>,
}

/// Record base schedules: one per (eta0, seed) plus a seed-averaged
/// schedule per eta0, all at the base scale (the first multiplier).
pub fn record_base(config: &ExperimentConfig, out_dir: &Path) -> Result<RecordedFiles> {
    all_problems(config)?;
    if config.mode != RunMode::Standard {
        return Err(Error::Config(format!(
            "record expects mode standard, got {}",
            config.mode.as_str()
        )));
    }
    std::fs::create_dir_all(out_dir)?;
    let dataset = config.build_dataset()?;
    let base_scale = config.scale_multipliers[0];

    let mut cells = Vec::new();
    for (ei, &eta0) in config.eta0_grid.iter().enumerate() {
        for &seed in &config.seeds {
            cells.push((ei, eta0, seed));
        }
    }
    let recorded: Vec<Result<(usize, u64, FslrSchedule)>> = cells
        .par_iter()
        .map(|&(ei, eta0, seed)| {
            let cell_cfg = config.cell_model(base_scale, &dataset)?;
            let rng = Rng::new(seed);
            let model = Model::build(&cell_cfg, &mut rng.derive("init", 0))?;
            let (mut train, mut probe) = make_streams(
                std::sync::Arc::clone(&dataset),
                config.batch_size,
                &rng.derive("data", 0),
            )?;
            let optim = OptimState::new(config.optimizer.kind, config.optimizer.hyper);
            let settings = settings_for(config, base_multipliers(config));
            let out = flerm::record(model, optim, eta0, &settings, &mut train, &mut probe, &rng)?;
            if out.diverged {
                return Err(Error::Config(format!(
                    "base run diverged at eta0 {eta0}, seed {seed}; record aborted"
                )));
            }
            Ok((ei, seed, out.schedule.expect("record returns a schedule")))
        })
        .collect();

    let mut by_eta: BTreeMap<usize, Vec<(u64, FslrSchedule)>> = BTreeMap::new();
    for r in recorded {
        let (ei, seed, schedule) = r?;
        by_eta.entry(ei).or_default().push((seed, schedule));
    }

    let mut files = RecordedFiles {
        raw: Vec::new(),
        averaged: Vec::new(),
    };
    for (ei, mut seeds) in by_eta {
        seeds.sort_by_key(|(s, _)| *s);
        for (seed, schedule) in &seeds {
            let csv = out_dir.join(format!("raw_eta{ei:02}_seed{seed}.csv"));
            let json = csv.with_extension("json");
            schedule.save(&csv, &json)?;
            write_fslr_trace(
                &out_dir.join(format!("trace_eta{ei:02}_seed{seed}.csv")),
                schedule,
            )?;
            files.raw.push(csv);
        }
        let avg = seed_average(&seeds.iter().map(|(_, s)| s.clone()).collect::<Vec<_>>())?;
        let csv = out_dir.join(format!("avg_eta{ei:02}.csv"));
        let json = csv.with_extension("json");
        avg.save(&csv, &json)?;
        files.averaged.push(csv);
    }
    Ok(files)
}

/// FSLR trace in its external shape: `step,layer,estimator,fslr`.
fn write_fslr_trace(path: &Path, schedule: &FslrSchedule) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    writeln!(f, "step,layer,estimator,fslr")?;
    for (step, values) in &schedule.entries {
        for (layer, v) in values {
            writeln!(f, "{step},{layer},kron,{v}")?;
        }
    }
    Ok(())
}

pub fn write_cell_traces(dir: &Path, traces: &[CellTraces]) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    for t in traces {
        let metas: BTreeMap<&str, &fslr::models::ParamMeta> = t
            .metas
            .iter()
            .map(|(n, m)| (n.as_str(), m))
            .collect();
        let mut f = std::fs::File::create(dir.join(format!("lr_trace_{}.csv", t.tag)))?;
        writeln!(f, "step,layer,eta")?;
        for (step, plan) in &t.lr_trace {
            for (layer, eta) in plan.iter() {
                writeln!(f, "{step},{layer},{eta}")?;
            }
        }
        let mut f = std::fs::File::create(dir.join(format!("fslr_trace_{}.csv", t.tag)))?;
        writeln!(f, "step,layer,estimator,fslr")?;
        for (step, est) in &t.fslr_trace {
            for (layer, v) in &est.values {
                let kind = est.kind_for(metas[layer.as_str()]).as_str();
                writeln!(f, "{step},{layer},{kind},{v}")?;
            }
        }
    }
    Ok(())
}

// ---- results csv -------------------------------------------------------

pub fn write_results(path: &Path, rows: &[ResultRow]) -> Result<()> {
    let mut out = String::from("scale,eta0,seed,mode,final_loss,steps_run,diverged\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.scale, r.eta0, r.seed, r.mode, r.final_loss, r.steps_run, r.diverged
        ));
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn read_results(path: &Path) -> Result<Vec<ResultRow>> {
    let text = std::fs::read_to_string(path)?;
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if i == 0 {
            if line != "scale,eta0,seed,mode,final_loss,steps_run,diverged" {
                return Err(Error::Data(format!("unexpected results header '{line}'")));
            }
            continue;
        }
        if line.is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != 7 {
            return Err(Error::Data(format!("malformed results row '{line}'")));
        }
        let parse_f = |s: &str| -> Result<f64> {
            s.parse()
                .map_err(|_| Error::Data(format!("bad float '{s}' in results row")))
        };
        rows.push(ResultRow {
            scale: parse_f(parts[0])?,
            eta0: parse_f(parts[1])?,
            seed: parts[2]
                .parse()
                .map_err(|_| Error::Data(format!("bad seed '{}'", parts[2])))?,
            mode: parts[3].to_string(),
            final_loss: parse_f(parts[4])?,
            steps_run: parts[5]
                .parse()
                .map_err(|_| Error::Data(format!("bad steps '{}'", parts[5])))?,
            diverged: parts[6]
                .parse()
                .map_err(|_| Error::Data(format!("bad diverged flag '{}'", parts[6])))?,
        });
    }
    Ok(rows)
}
