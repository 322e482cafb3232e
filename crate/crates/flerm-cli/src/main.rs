//! `flerm` command line: record base schedules, run sweeps, summarize
//! results, and sanity-check the estimator against its oracle.

use std::path::PathBuf;
use std::time::Instant;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};

use flerm_cli::{config::ExperimentConfig, runner, summary};

#[derive(Parser)]
#[command(name = "flerm", about = "Function-space learning-rate experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Overrides {
    /// Override config steps.
    #[arg(long)]
    steps: Option<u64>,
    /// Override config seeds (comma separated).
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    /// Override eta0 grid (comma separated).
    #[arg(long, value_delimiter = ',')]
    eta0_grid: Option<Vec<f64>>,
    /// Override scale multipliers (comma separated).
    #[arg(long, value_delimiter = ',')]
    multipliers: Option<Vec<f64>>,
    /// Override measurement cadence.
    #[arg(long)]
    cadence: Option<u64>,
    /// Override EMA warmup sample count.
    #[arg(long)]
    warmup: Option<u64>,
    /// Override EMA new-sample weight.
    #[arg(long)]
    beta: Option<f64>,
    /// Override schedule directory.
    #[arg(long)]
    schedule_dir: Option<PathBuf>,
}

impl Overrides {
    fn apply(&self, config: &mut ExperimentConfig) {
        if let Some(s) = self.steps {
            config.steps = s;
        }
        if let Some(s) = &self.seeds {
            config.seeds = s.clone();
        }
        if let Some(g) = &self.eta0_grid {
            config.eta0_grid = g.clone();
        }
        if let Some(m) = &self.multipliers {
            config.scale_multipliers = m.clone();
        }
        if let Some(c) = self.cadence {
            config.cadence = c;
        }
        if let Some(w) = self.warmup {
            config.warmup = w;
        }
        if let Some(b) = self.beta {
            config.beta = b;
        }
        if let Some(d) = &self.schedule_dir {
            config.schedule_dir = Some(d.clone());
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Record base-model function-space learning-rate schedules.
    Record {
        /// Experiment config (JSON).
        #[arg(long)]
        config: PathBuf,
        /// Directory for raw and averaged schedule files.
        #[arg(long)]
        out_dir: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Run the (scale, eta0, seed) sweep and write a results CSV.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Results CSV path.
        #[arg(long)]
        out: PathBuf,
        /// Also write per-cell learning-rate and fslr traces here.
        #[arg(long)]
        trace_dir: Option<PathBuf>,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Reduce a results CSV to per-scale optimal learning rates.
    Summarize {
        #[arg(long)]
        results: PathBuf,
        /// Optional summary CSV output.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Quick estimator-vs-oracle and gradient checks.
    OracleCheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn main() -> anyhow::Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::Record {
            config,
            out_dir,
            overrides,
        } => {
            let mut cfg = ExperimentConfig::from_file(&config)
                .with_context(|| format!("reading {}", config.display()))?;
            overrides.apply(&mut cfg);
            let started = Instant::now();
            let files = runner::record_base(&cfg, &out_dir)?;
            eprintln!(
                "recorded {} raw + {} averaged schedules in {:.1}s",
                files.raw.len(),
                files.averaged.len(),
                started.elapsed().as_secs_f64()
            );
        }
        Command::Run {
            config,
            out,
            trace_dir,
            overrides,
        } => {
            let mut cfg = ExperimentConfig::from_file(&config)
                .with_context(|| format!("reading {}", config.display()))?;
            overrides.apply(&mut cfg);
            let started = Instant::now();
            let artifacts = runner::run(&cfg, trace_dir.is_some())?;
            runner::write_results(&out, &artifacts.rows)?;
            if let Some(dir) = trace_dir {
                runner::write_cell_traces(&dir, &artifacts.traces)?;
            }
            let diverged = artifacts.rows.iter().filter(|r| r.diverged).count();
            eprintln!(
                "{} cells ({} diverged) in {:.1}s -> {}",
                artifacts.rows.len(),
                diverged,
                started.elapsed().as_secs_f64(),
                out.display()
            );
        }
        Command::Summarize { results, out } => {
            let rows = runner::read_results(&results)?;
            let table = summary::summarize(&rows)?;
            print!("{}", summary::render_summary(&table));
            if let Some(path) = out {
                summary::write_summary(&path, &table)?;
            }
        }
        Command::OracleCheck { seed } => {
            if !oracle_check(seed) {
                bail!("oracle check failed");
            }
        }
    }
    Ok(())
}

/// Small always-on sanity suite: gradients against finite differences and
/// the raw probe estimator against the exact per-output oracle.
fn oracle_check(seed: u64) -> bool {
    use std::collections::BTreeMap;

    use fslr::autograd::Graph;
    use fslr::data::{make_streams, synthetic_classification};
    use fslr::estimator::{compute_z, delta_phi, sample_phi};
    use fslr::models::{Model, ModelConfig};
    use fslr::optim::{snapshot_and_unit_delta, LrPlan, OptimHyper, OptimKind, OptimState};
    use fslr::oracle::{exact_delta_f, finite_diff_grad};
    use fslr::rng::Rng;
    use fslr::tensor::Tensor;

    let mut ok = true;
    let mut report = |name: &str, pass: bool, detail: String| {
        println!("{}: {name} ({detail})", if pass { "PASS" } else { "FAIL" });
        ok &= pass;
    };

    let mut cfg = ModelConfig::resmlp(4, 3);
    cfg.resmlp_hidden = 8;
    cfg.resmlp_blocks = 2;
    let mut model = Model::build(&cfg, &mut Rng::new(seed)).unwrap();
    let ds = std::sync::Arc::new(
        synthetic_classification(&mut Rng::new(seed ^ 1), 400, 4, 3, 2.0).unwrap(),
    );
    let (mut train, mut probe) = make_streams(ds, 4, &Rng::new(seed ^ 2)).unwrap();

    // gradient check on the training loss
    let batch = train.next_batch().unwrap();
    let mut g = Graph::new();
    let fp = model.forward(&mut g, &batch.input).unwrap();
    let loss = g.cross_entropy(fp.logits, &batch.targets).unwrap();
    g.backward(loss).unwrap();
    let ad: BTreeMap<String, Tensor> = fp
        .params
        .iter()
        .map(|(n, id)| (n.clone(), g.grad_or_zeros(*id)))
        .collect();
    let grads = ad.clone();
    let params = model.snapshot();
    let fd = finite_diff_grad(
        |p: &BTreeMap<String, Tensor>| {
            let mut m = model.clone();
            for (name, t) in p {
                m.set(name, t.clone())?;
            }
            let mut g = Graph::new();
            let fp = m.forward(&mut g, &batch.input)?;
            let l = g.cross_entropy(fp.logits, &batch.targets)?;
            Ok(g.value(l).item())
        },
        &params,
        1e-5,
    )
    .unwrap();
    let mut worst = 0.0f64;
    for (name, a) in &ad {
        let d2: f64 = a
            .data()
            .iter()
            .zip(fd[name].data())
            .map(|(x, y)| (x - y) * (x - y))
            .sum();
        let n2: f64 = fd[name].data().iter().map(|y| y * y).sum();
        worst = worst.max(d2.sqrt() / n2.sqrt().max(1e-12));
    }
    report("gradients vs finite differences", worst < 1e-5, format!("max rel err {worst:.2e}"));

    // raw probe variance vs exact oracle after one Adam step
    let before = model.snapshot();
    let plan = LrPlan::uniform(1e-3, model.param_names());
    let mut opt = OptimState::new(OptimKind::Adam, OptimHyper::default());
    opt.step(&mut model, &grads, &plan).unwrap();
    let deltas = snapshot_and_unit_delta(&before, &model, &plan).unwrap();
    let pb = probe.next_batch().unwrap();
    let exact = exact_delta_f(&model, &pb.input, &deltas, false).unwrap();
    let mut rng = Rng::new(seed ^ 3);
    let n_draws = 4000;
    let mut sq: BTreeMap<String, f64> = BTreeMap::new();
    for _ in 0..n_draws {
        let (_, grads_phi) = sample_phi(&model, &pb, &mut rng).unwrap();
        for (name, delta) in &deltas {
            let z = compute_z(delta, &grads_phi[name]).unwrap();
            *sq.entry(name.clone()).or_default() += delta_phi(&z).powi(2);
        }
    }
    let mut worst = 0.0f64;
    for (name, total) in &sq {
        let var = total / n_draws as f64;
        let target = exact.rms[name].powi(2);
        if target > 0.0 {
            worst = worst.max((var - target).abs() / target);
        }
    }
    let bound = 4.0 * (2.0 / n_draws as f64).sqrt();
    report(
        "probe variance vs exact oracle",
        worst < bound,
        format!("max rel dev {worst:.3} (bound {bound:.3})"),
    );

    ok
}
