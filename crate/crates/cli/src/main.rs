use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use nalgebra::DVector;
use serde_json::json;

use qrnet_core::evaluation::{
    evaluate_policy, linear_stability, simulate_closed_loop, termination_name,
};
use qrnet_core::experiment::{emit_report, run_experiment};
use qrnet_core::lqr::{design_lqr, lqr_policy};
use qrnet_core::models::{design_model, equilibrium_residual, sample_initial_conditions};
use qrnet_core::ocp::generate_dataset;
use qrnet_core::training::{fit, Optimizer};
use qrnet_core::{
    ArchitectureKind, ControlSystem, Dataset, Error, EvalSpec, ExperimentConfig, Method, ModelConfig, NeuralPolicy,
    OcpSettings, Policy, PolicyCheckpoint, RunOptions, SamplingDomain, SimSettings, TrainSpec,
};

#[derive(Parser)]
#[command(name = "qrnet", version, about = "LQR-anchored neural feedback control toolkit")]
struct Cli {
    /// Model config (experiment config for `run`).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, default_value_t = 1)]
    workers: usize,
    /// Omit wall-clock times from written files.
    #[arg(long, global = true)]
    deterministic: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print the trim (equilibrium) state and control.
    Trim {
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Solve the LQR problem at the equilibrium.
    Lqr {
        #[arg(long)]
        model: Option<PathBuf>,
        /// Write the solution as JSON.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate an open-loop optimal control dataset.
    Datagen {
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        n: usize,
        #[arg(long, value_enum, default_value_t = MethodArg::Indirect)]
        method: MethodArg,
        /// Sampling domain as JSON (or a file holding it).
        #[arg(long)]
        domain: String,
        /// Solver settings file.
        #[arg(long)]
        ocp: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a policy on a dataset.
    Train {
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        arch: String,
        #[arg(long)]
        data: PathBuf,
        /// Held-out dataset for the test error.
        #[arg(long)]
        test: Option<PathBuf>,
        #[arg(long, default_value = "adam")]
        optimizer: String,
        #[arg(long, default_value_t = 1e-3)]
        lr: f64,
        #[arg(long, default_value_t = 256)]
        batch: usize,
        #[arg(long, default_value_t = 1500)]
        epochs: usize,
        /// Hidden layer widths, comma separated.
        #[arg(long, default_value = "32,32,32,32,32", value_delimiter = ',')]
        hidden: Vec<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Simulate the closed loop from one initial condition.
    Simulate {
        #[arg(long)]
        model: Option<PathBuf>,
        /// Checkpoint file, or `lqr`.
        #[arg(long)]
        policy: String,
        /// Full-state initial condition, comma separated; otherwise drawn
        /// from `--domain` with `--seed`.
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        x0: Option<Vec<f64>>,
        #[arg(long)]
        domain: Option<String>,
        #[arg(long)]
        t_max: Option<f64>,
        /// Trajectory CSV.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Linear stability or Monte Carlo evaluation of a policy.
    Eval {
        #[arg(value_enum)]
        mode: EvalMode,
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        policy: String,
        #[arg(long, default_value_t = 100)]
        n: usize,
        #[arg(long)]
        domain: Option<String>,
        /// Dataset whose values.csv provides optimal costs.
        #[arg(long)]
        values: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run an experiment grid and emit its report.
    Run,
    /// Emit the report tables of a run directory.
    Report { dir: PathBuf },
}

#[derive(Clone, Copy, ValueEnum)]
enum MethodArg {
    Indirect,
    Direct,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum EvalMode {
    Linear,
    Mc,
}

struct Loaded {
    full: Arc<dyn ControlSystem>,
    design: Arc<dyn ControlSystem>,
}

fn load_model(cli: &Cli, model: &Option<PathBuf>) -> Result<Loaded> {
    let path = model
        .as_ref()
        .or(cli.config.as_ref())
        .ok_or_else(|| Error::Config("a model config is required (--model or --config)".into()))?;
    let (config, base) = ModelConfig::load(path)?;
    let full = config.build(&base)?;
    let design = design_model(&full);
    Ok(Loaded { full, design })
}

fn parse_domain(text: &str) -> Result<SamplingDomain> {
    let body = if Path::new(text).is_file() {
        fs::read_to_string(text)?
    } else {
        text.to_string()
    };
    let d: SamplingDomain =
        serde_json::from_str(&body).map_err(|e| Error::Config(format!("sampling domain: {e}")))?;
    d.validate()?;
    Ok(d)
}

fn load_policy(spec: &str, m: &Loaded) -> Result<Box<dyn Policy>> {
    if spec == "lqr" {
        let sol = design_lqr(m.design.as_ref())?;
        return Ok(Box::new(lqr_policy(&sol, m.design.equilibrium())?.saturated(m.design.bounds())));
    }
    let ckpt = PolicyCheckpoint::load(Path::new(spec)).with_context(|| format!("loading {spec}"))?;
    let model = ckpt.kind.is_lambda().then(|| m.design.clone());
    Ok(Box::new(NeuralPolicy::new(ckpt, model)?))
}

/// Writes to stdout; a closed pipe is not an error.
fn emit(text: &str) -> Result<()> {
    match writeln!(io::stdout().lock(), "{text}") {
        Err(e) if e.kind() == io::ErrorKind::BrokenPipe => Ok(()),
        r => Ok(r?),
    }
}

fn print_json(v: &serde_json::Value) -> Result<()> {
    emit(&serde_json::to_string_pretty(v)?)
}

fn run(cli: &Cli) -> Result<()> {
    let seed = cli.seed.unwrap_or(0);
    match &cli.command {
        Command::Trim { model } => {
            let m = load_model(cli, model)?;
            let eq = m.full.equilibrium();
            print_json(&json!({
                "model": m.full.id(),
                "x_f": eq.x_f.as_slice(),
                "u_f": eq.u_f.as_slice(),
                "residual": equilibrium_residual(m.full.as_ref()),
            }))
        }
        Command::Lqr { model, out } => {
            let m = load_model(cli, model)?;
            let sol = design_lqr(m.design.as_ref())?;
            if let Some(path) = out {
                fs::write(path, serde_json::to_string_pretty(&sol)?)?;
            }
            let row_norms: Vec<f64> = sol.k.row_iter().map(|r| r.norm()).collect();
            print_json(&json!({
                "model": m.design.id(),
                "state_dim": m.design.state_dim(),
                "control_dim": m.design.control_dim(),
                "riccati_residual": sol.riccati_residual,
                "closed_loop_abscissa": sol.closed_loop_abscissa,
                "gain_row_norms": row_norms,
                "gain_max_abs": sol.k.amax(),
            }))
        }
        Command::Datagen {
            model,
            n,
            method,
            domain,
            ocp,
            out,
        } => {
            let m = load_model(cli, model)?;
            let domain = parse_domain(domain)?;
            let settings: OcpSettings = match ocp {
                Some(p) => serde_json::from_str(&fs::read_to_string(p)?)
                    .map_err(|e| Error::Config(format!("solver settings: {e}")))?,
                None => OcpSettings::default(),
            };
            let method = match method {
                MethodArg::Indirect => Method::Indirect,
                MethodArg::Direct => Method::Direct,
            };
            let data = generate_dataset(&m.full, &domain, *n, method, seed, &settings, cli.workers)?;
            data.save(out)?;
            print_json(&json!({
                "n_traj": data.meta.n_traj,
                "n_converged": data.meta.n_converged,
                "n_records": data.meta.n_records,
                "degraded": data.meta.degraded,
            }))
        }
        Command::Train {
            model,
            arch,
            data,
            test,
            optimizer,
            lr,
            batch,
            epochs,
            hidden,
            out,
        } => {
            let m = load_model(cli, model)?;
            let kind = ArchitectureKind::parse(arch)
                .ok_or_else(|| Error::Config(format!("unknown architecture {arch}")))?;
            let optimizer = Optimizer::parse(optimizer)
                .ok_or_else(|| Error::Config(format!("unknown optimizer {optimizer}")))?;
            let spec = TrainSpec {
                kind,
                hidden: hidden.clone(),
                optimizer,
                learning_rate: *lr,
                batch_size: *batch,
                epochs: *epochs,
                seed,
                ..TrainSpec::default()
            };
            let train = Dataset::load(data)?;
            let test = test.as_ref().map(|p| Dataset::load(p)).transpose()?;
            let lqr = design_lqr(m.design.as_ref())?;
            let (ckpt, mut report) = fit(&spec, &train, m.design.clone(), &lqr, test.as_ref())?;
            if cli.deterministic {
                report.wall_time_s = None;
            }
            ckpt.save(out)?;
            let report_path = out.with_file_name("report.json");
            report.save(&report_path)?;
            if let Some(why) = &report.aborted {
                return Err(Error::NonFinite(format!("training aborted: {why}")).into());
            }
            print_json(&json!({
                "checkpoint": out,
                "report": report_path,
                "final_loss": report.final_loss,
                "rm_l2": report.rm_l2,
            }))
        }
        Command::Simulate {
            model,
            policy,
            x0,
            domain,
            t_max,
            out,
        } => {
            let m = load_model(cli, model)?;
            let pol = load_policy(policy, &m)?;
            let x0 = match (x0, domain) {
                (Some(v), _) => DVector::from_column_slice(v),
                (None, Some(d)) => sample_initial_conditions(m.full.as_ref(), &parse_domain(d)?, 1, seed)?.remove(0),
                (None, None) => bail!(Error::Config("give --x0 or --domain".into())),
            };
            let settings = SimSettings {
                t_max: *t_max,
                ..SimSettings::default()
            };
            let sim = simulate_closed_loop(m.full.as_ref(), pol.as_ref(), &x0, &settings)?;
            if let Some(path) = out {
                write_trajectory(path, &sim)?;
            }
            print_json(&json!({
                "termination": termination_name(sim.termination),
                "t_final": sim.t_final,
                "cost": sim.cost,
                "final_error": sim.final_error,
                "projection_drift": sim.projection_drift,
                "detail": sim.detail,
            }))
        }
        Command::Eval {
            mode,
            model,
            policy,
            n,
            domain,
            values,
            out,
        } => {
            let m = load_model(cli, model)?;
            let pol = load_policy(policy, &m)?;
            if *mode == EvalMode::Linear {
                let ls = linear_stability(m.design.as_ref(), pol.as_ref())?;
                let text = serde_json::to_string_pretty(&ls)? + "\n";
                fs::write(out, &text)?;
                return emit(text.trim_end());
            }
            let mut spec = EvalSpec {
                linear: false,
                n_mc: *n,
                ..EvalSpec::default()
            };
            if let Some(d) = domain {
                spec.domain = parse_domain(d)?;
            }
            let reference = values.as_ref().map(|p| Dataset::load(p)).transpose()?;
            let dir = out.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
            fs::create_dir_all(dir)?;
            let report = evaluate_policy(
                policy,
                m.full.as_ref(),
                m.design.as_ref(),
                pol.as_ref(),
                &spec,
                seed,
                reference.as_ref().map(|d| d.values.as_slice()),
                cli.workers,
                Some(dir),
            )?;
            report.save(out)?;
            print_json(&serde_json::to_value(&report)?)
        }
        Command::Run => {
            let path = cli
                .config
                .as_ref()
                .ok_or_else(|| Error::Config("run needs --config <experiment.json>".into()))?;
            let (mut cfg, base) = ExperimentConfig::load(path)?;
            if let Some(s) = cli.seed {
                cfg.seed = s;
            }
            let opts = RunOptions {
                workers: cli.workers,
                deterministic: cli.deterministic,
            };
            let dir = run_experiment(&cfg, &base, &opts)?;
            match emit_report(&dir) {
                Ok(files) => {
                    for f in files {
                        emit(&f.display().to_string())?;
                    }
                }
                Err(Error::InvalidArgument(msg)) => log::warn!("no report: {msg}"),
                Err(e) => return Err(e.into()),
            }
            emit(&dir.display().to_string())
        }
        Command::Report { dir } => {
            for f in emit_report(dir)? {
                emit(&f.display().to_string())?;
            }
            Ok(())
        }
    }
}

fn write_trajectory(path: &Path, sim: &qrnet_core::SimResult) -> Result<()> {
    let mut s = String::from("t");
    let n = sim.x.first().map_or(0, |x| x.len());
    let m = sim.u.first().map_or(0, |u| u.len());
    for i in 0..n {
        s += &format!(",x_{i}");
    }
    for i in 0..m {
        s += &format!(",u_{i}");
    }
    s += ",cost\n";
    for k in 0..sim.t.len() {
        s += &format!("{:.16e}", sim.t[k]);
        for v in sim.x[k].iter().chain(sim.u[k].iter()) {
            s += &format!(",{v:.16e}");
        }
        s += &format!(",{:.16e}\n", sim.cost_history[k]);
    }
    fs::write(path, s)?;
    Ok(())
}

fn exit_code(e: &anyhow::Error) -> u8 {
    match e.downcast_ref::<Error>() {
        Some(err) if err.is_numerical() => 3,
        _ => 2,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
