//! Config-driven experiment grid: datasets, training and evaluation per
//! (size, trial, architecture) cell, plus the summary tables.
//!
//! Run directory layout:
//!
//! ```text
//! manifest.json             cells, statuses and the sha256 of every artifact
//! config.json               normalized experiment config
//! datasets/n{N}_t{T}/       training data shared by all architectures of a cell row
//! reference/                optimal values from the Monte Carlo initial conditions
//! baseline/lqr/             saturated LQR evaluated on the same Monte Carlo set
//! cells/n{N}_t{T}_{arch}/   checkpoint.json, train_report.json, eval.json, per-run CSVs
//! timings.json              wall-clock times (not written in deterministic mode)
//! report/                   cells.csv, summary.csv (and timings.csv)
//! ```
//!
//! Every stage directory holds a `stamp.json` with the hash of its inputs and
//! of its outputs; a stage whose stamp matches is not recomputed.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::evaluation::{evaluate_policy, quartiles, quantile, EvalReport, EvalSpec};
use crate::lqr::{design_lqr, lqr_policy, LqrSolution};
use crate::models::config::ModelConfig;
use crate::models::{design_model, ControlSystem, SamplingDomain};
use crate::ocp::{generate_dataset, Dataset, Method, OcpSettings};
use crate::parallel::map_indexed;
use crate::policies::{ArchitectureKind, NeuralPolicy, PolicyCheckpoint};
use crate::training::{fit, TrainReport, TrainSpec};

pub const MANIFEST_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Model config file, relative to the experiment config.
    pub model: String,
    pub dataset_sizes: Vec<usize>,
    #[serde(default = "one")]
    pub trials: usize,
    pub architectures: Vec<ArchitectureKind>,
    #[serde(default = "indirect")]
    pub method: Method,
    /// Initial conditions of the training trajectories.
    pub train_domain: SamplingDomain,
    #[serde(default)]
    pub ocp: OcpSettings,
    /// `kind` and `seed` are set per cell.
    #[serde(default)]
    pub train: TrainSpec,
    #[serde(default)]
    pub eval: EvalSpec,
    /// Solve the optimal control problems from the Monte Carlo initial
    /// conditions for the optimality study and the test error.
    #[serde(default = "yes")]
    pub optimality: bool,
    /// Also evaluate the saturated LQR controller.
    #[serde(default = "yes")]
    pub baseline: bool,
    /// Run directory, relative to the experiment config.
    pub output_dir: String,
    #[serde(default)]
    pub seed: u64,
}

fn one() -> usize {
    1
}
fn yes() -> bool {
    true
}
fn indirect() -> Method {
    Method::Indirect
}

impl ExperimentConfig {
    /// Reads a config; the returned directory anchors relative paths.
    pub fn load(path: &Path) -> Result<(Self, PathBuf)> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let cfg: Self =
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("experiment config: {e}")))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok((cfg, base))
    }

    pub fn validate(&self, base: &Path) -> Result<()> {
        if self.trials == 0 {
            return Err(Error::Config("trials must be at least 1".into()));
        }
        if self.dataset_sizes.contains(&0) {
            return Err(Error::Config("dataset sizes must be positive".into()));
        }
        for (i, a) in self.architectures.iter().enumerate() {
            if self.architectures[..i].contains(a) {
                return Err(Error::Config(format!("architecture {a} listed twice")));
            }
        }
        let model = base.join(&self.model);
        if !model.is_file() {
            return Err(Error::Config(format!("model config {} does not exist", model.display())));
        }
        self.train_domain.validate().map_err(config_error)?;
        self.eval.domain.validate().map_err(config_error)?;
        self.ocp.validate().map_err(config_error)?;
        self.train.validate().map_err(config_error)
    }
}

fn config_error(e: Error) -> Error {
    match e {
        Error::Config(_) => e,
        other => Error::Config(other.to_string()),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RunOptions {
    pub workers: usize,
    /// Leave wall-clock times out of the run directory.
    pub deterministic: bool,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self {
            workers: 1,
            deterministic: false,
        }
    }
}

/// Seed of one stage: the first eight bytes (little endian) of
/// `sha256(master_le ‖ tag ‖ index_le…)`.
pub fn derive_seed(master: u64, tag: &str, indices: &[usize]) -> u64 {
    let mut h = Sha256::new();
    h.update(master.to_le_bytes());
    h.update(tag.as_bytes());
    for i in indices {
        h.update((*i as u64).to_le_bytes());
    }
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("digest has 32 bytes"))
}

pub fn sha256_file(path: &Path) -> Result<String> {
    Ok(hex::encode(Sha256::digest(fs::read(path)?)))
}

fn sha256_json<T: Serialize>(v: &T) -> Result<String> {
    Ok(hex::encode(Sha256::digest(serde_json::to_vec(v)?)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Ok,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Stamp {
    input_hash: String,
    status: Status,
    error: Option<String>,
    /// File name → sha256.
    outputs: BTreeMap<String, String>,
}

fn read_stamp(dir: &Path, input_hash: &str) -> Option<Stamp> {
    let text = fs::read_to_string(dir.join("stamp.json")).ok()?;
    let stamp: Stamp = serde_json::from_str(&text).ok()?;
    if stamp.input_hash != input_hash {
        return None;
    }
    for (file, hash) in &stamp.outputs {
        if sha256_file(&dir.join(file)).ok().as_deref() != Some(hash.as_str()) {
            return None;
        }
    }
    Some(stamp)
}

fn write_stamp(dir: &Path, input_hash: &str, outcome: Result<Vec<&str>>) -> Result<Stamp> {
    fs::create_dir_all(dir)?;
    let stamp = match outcome {
        Ok(files) => {
            let mut outputs = BTreeMap::new();
            for f in files {
                outputs.insert(f.to_string(), sha256_file(&dir.join(f))?);
            }
            Stamp {
                input_hash: input_hash.into(),
                status: Status::Ok,
                error: None,
                outputs,
            }
        }
        Err(e) => Stamp {
            input_hash: input_hash.into(),
            status: Status::Failed,
            error: Some(e.to_string()),
            outputs: BTreeMap::new(),
        },
    };
    write_json(&dir.join("stamp.json"), &stamp)?;
    Ok(stamp)
}

fn write_json<T: Serialize>(path: &Path, v: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(v)?;
    s.push('\n');
    fs::write(path, s)?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellEntry {
    pub id: String,
    /// `None` for the baseline.
    pub size: Option<usize>,
    pub trial: Option<usize>,
    pub architecture: String,
    pub train_seed: Option<u64>,
    pub status: Status,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Artifact {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub config_sha256: String,
    pub seed: u64,
    pub mc_seed: u64,
    pub cells: Vec<CellEntry>,
    pub artifacts: Vec<Artifact>,
}

impl Manifest {
    pub fn load(run_dir: &Path) -> Result<Self> {
        let text = fs::read_to_string(run_dir.join("manifest.json"))
            .map_err(|e| Error::Config(format!("no manifest in {}: {e}", run_dir.display())))?;
        let m: Self = serde_json::from_str(&text)?;
        if m.schema_version != MANIFEST_SCHEMA_VERSION {
            return Err(Error::Config(format!("unsupported manifest schema {}", m.schema_version)));
        }
        Ok(m)
    }

    fn hash_of(&self, path: &str) -> Option<&str> {
        self.artifacts.iter().find(|a| a.path == path).map(|a| a.sha256.as_str())
    }

    /// Reads an artifact after checking it against its recorded hash.
    fn read(&self, run_dir: &Path, path: &str) -> Result<String> {
        let expect = self
            .hash_of(path)
            .ok_or_else(|| Error::Config(format!("{path} is not in the manifest")))?;
        let bytes = fs::read(run_dir.join(path))?;
        if hex::encode(Sha256::digest(&bytes)) != expect {
            return Err(Error::Config(format!("{path} does not match its manifest hash")));
        }
        String::from_utf8(bytes).map_err(|e| Error::Config(format!("{path}: {e}")))
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
struct Timings {
    /// Stage directory → seconds.
    stages: BTreeMap<String, f64>,
    /// Cell id → training seconds.
    training: BTreeMap<String, f64>,
}

struct Context {
    model_config: ModelConfig,
    full: Arc<dyn ControlSystem>,
    design: Arc<dyn ControlSystem>,
    lqr: LqrSolution,
}

struct Prepared {
    hash: String,
    ok: bool,
    error: Option<String>,
}

/// Runs (or resumes) the experiment grid and returns the run directory.
/// Stage failures are recorded per cell; the run continues past them.
pub fn run_experiment(config: &ExperimentConfig, base: &Path, opts: &RunOptions) -> Result<PathBuf> {
    config.validate(base)?;
    let workers = opts.workers.max(1);
    let out = base.join(&config.output_dir);
    fs::create_dir_all(&out)?;
    let (model_config, model_base) = ModelConfig::load(&base.join(&config.model))?;
    let full = model_config.build(&model_base)?;
    let design = design_model(&full);
    let lqr = design_lqr(design.as_ref())?;
    let ctx = Context {
        model_config,
        full,
        design,
        lqr,
    };
    write_json(&out.join("config.json"), config)?;
    let config_hash = sha256_file(&out.join("config.json"))?;
    let mut timings = Timings::default();
    let mc_seed = derive_seed(config.seed, "mc", &[]);

    // Reference values for the Monte Carlo set.
    // An empty architecture list runs nothing, the baseline included.
    let active = !config.architectures.is_empty();
    let reference = if active && config.optimality && config.eval.n_mc > 0 {
        let dir = out.join("reference");
        Some(prepare_dataset(&ctx, config, &dir, &config.eval.domain, config.eval.n_mc, mc_seed, workers, &mut timings, "reference")?)
    } else {
        None
    };
    let reference_values = match &reference {
        Some(p) if p.ok => Some(Dataset::load(&out.join("reference"))?),
        _ => None,
    };

    let mut datasets = BTreeMap::new();
    if active {
        for (si, &size) in config.dataset_sizes.iter().enumerate() {
            for trial in 0..config.trials {
                let id = format!("n{size}_t{trial}");
                let seed = derive_seed(config.seed, "data", &[si, trial]);
                let dir = out.join("datasets").join(&id);
                let p = prepare_dataset(&ctx, config, &dir, &config.train_domain, size, seed, workers, &mut timings, &format!("datasets/{id}"))?;
                datasets.insert((si, trial), p);
            }
        }
    }

    struct CellPlan {
        id: String,
        si: usize,
        size: usize,
        trial: usize,
        kind: ArchitectureKind,
        seed: u64,
    }
    let mut plans = Vec::new();
    for (si, &size) in config.dataset_sizes.iter().enumerate() {
        for trial in 0..config.trials {
            for (ai, &kind) in config.architectures.iter().enumerate() {
                plans.push(CellPlan {
                    id: format!("n{size}_t{trial}_{kind}"),
                    si,
                    size,
                    trial,
                    kind,
                    seed: derive_seed(config.seed, "train", &[si, trial, ai]),
                });
            }
        }
    }
    let ref_hash = reference.as_ref().map(|p| p.hash.clone());
    let results = map_indexed(plans.len(), workers, |i| {
        let plan = &plans[i];
        let data = &datasets[&(plan.si, plan.trial)];
        let dir = out.join("cells").join(&plan.id);
        let spec = TrainSpec {
            kind: plan.kind,
            seed: plan.seed,
            ..config.train.clone()
        };
        let input = sha256_json(&(&spec, &config.eval, &data.hash, &ref_hash, mc_seed, &ctx.model_config))?;
        if let Some(stamp) = read_stamp(&dir, &input) {
            return Ok((stamp, None));
        }
        let start = Instant::now();
        let outcome = if data.ok {
            run_cell(&ctx, &spec, &out.join("datasets").join(format!("n{}_t{}", plan.size, plan.trial)), reference_values.as_ref(), config, mc_seed, &dir)
        } else {
            Err(Error::NonConvergence(format!(
                "dataset unavailable: {}",
                data.error.clone().unwrap_or_default()
            )))
        };
        let train_time = outcome.as_ref().ok().copied();
        let outcome = outcome.map(|_| {
            let mut files = vec!["checkpoint.json", "train_report.json", "eval.json"];
            if config.eval.n_mc > 0 {
                files.push("stability.csv");
            }
            if reference_values.is_some() {
                files.push("optimality.csv");
            }
            files
        });
        if let Err(e) = &outcome {
            log::warn!("cell {} failed: {e}", plan.id);
        }
        let stamp = write_stamp(&dir, &input, outcome)?;
        Ok::<_, Error>((stamp, Some((start.elapsed().as_secs_f64(), train_time))))
    });

    let mut cells = Vec::new();
    for (plan, r) in plans.iter().zip(results) {
        let (stamp, time) = r?;
        if let Some((total, train)) = time {
            timings.stages.insert(format!("cells/{}", plan.id), total);
            if let Some(t) = train {
                timings.training.insert(plan.id.clone(), t);
            }
        }
        cells.push(CellEntry {
            id: plan.id.clone(),
            size: Some(plan.size),
            trial: Some(plan.trial),
            architecture: plan.kind.name().into(),
            train_seed: Some(plan.seed),
            status: stamp.status,
            error: stamp.error,
        });
    }

    if active && config.baseline {
        let dir = out.join("baseline").join("lqr");
        let input = sha256_json(&("lqr", &config.eval, &ref_hash, mc_seed, &ctx.model_config))?;
        let stamp = match read_stamp(&dir, &input) {
            Some(s) => s,
            None => {
                let start = Instant::now();
                fs::create_dir_all(&dir)?;
                let outcome = (|| {
                    let pol = lqr_policy(&ctx.lqr, ctx.design.equilibrium())?.saturated(ctx.design.bounds());
                    let values = reference_values.as_ref().map(|d| d.values.as_slice());
                    let report = evaluate_policy(
                        "lqr",
                        ctx.full.as_ref(),
                        ctx.design.as_ref(),
                        &pol,
                        &config.eval,
                        mc_seed,
                        values,
                        workers,
                        Some(&dir),
                    )?;
                    report.save(&dir.join("eval.json"))?;
                    let mut files = vec!["eval.json"];
                    if config.eval.n_mc > 0 {
                        files.push("stability.csv");
                    }
                    if values.is_some() {
                        files.push("optimality.csv");
                    }
                    Ok(files)
                })();
                timings.stages.insert("baseline/lqr".into(), start.elapsed().as_secs_f64());
                write_stamp(&dir, &input, outcome)?
            }
        };
        cells.push(CellEntry {
            id: "baseline_lqr".into(),
            size: None,
            trial: None,
            architecture: "lqr".into(),
            train_seed: None,
            status: stamp.status,
            error: stamp.error,
        });
    }

    let mut artifacts = vec![Artifact {
        path: "config.json".into(),
        sha256: config_hash.clone(),
    }];
    let mut stage_dirs: Vec<String> = Vec::new();
    if reference.is_some() {
        stage_dirs.push("reference".into());
    }
    for (si, &size) in config.dataset_sizes.iter().enumerate() {
        for trial in 0..config.trials {
            if datasets.contains_key(&(si, trial)) {
                stage_dirs.push(format!("datasets/n{size}_t{trial}"));
            }
        }
    }
    for c in &cells {
        stage_dirs.push(match c.size {
            Some(_) => format!("cells/{}", c.id),
            None => "baseline/lqr".into(),
        });
    }
    for d in &stage_dirs {
        let stamp_path = out.join(d).join("stamp.json");
        let stamp: Stamp = serde_json::from_str(&fs::read_to_string(&stamp_path)?)?;
        artifacts.push(Artifact {
            path: format!("{d}/stamp.json"),
            sha256: sha256_file(&stamp_path)?,
        });
        for (f, h) in stamp.outputs {
            artifacts.push(Artifact {
                path: format!("{d}/{f}"),
                sha256: h,
            });
        }
    }
    artifacts.sort_by(|a, b| a.path.cmp(&b.path));
    let manifest = Manifest {
        schema_version: MANIFEST_SCHEMA_VERSION,
        config_sha256: config_hash,
        seed: config.seed,
        mc_seed,
        cells,
        artifacts,
    };
    write_json(&out.join("manifest.json"), &manifest)?;
    let timing_path = out.join("timings.json");
    if opts.deterministic {
        if timing_path.exists() {
            fs::remove_file(&timing_path)?;
        }
    } else {
        write_json(&timing_path, &timings)?;
    }
    Ok(out)
}

#[allow(clippy::too_many_arguments)]
fn prepare_dataset(
    ctx: &Context,
    config: &ExperimentConfig,
    dir: &Path,
    domain: &SamplingDomain,
    n: usize,
    seed: u64,
    workers: usize,
    timings: &mut Timings,
    label: &str,
) -> Result<Prepared> {
    let input = sha256_json(&(&ctx.model_config, domain, config.method, &config.ocp, n, seed))?;
    if let Some(stamp) = read_stamp(dir, &input) {
        return Ok(Prepared {
            hash: input,
            ok: stamp.status == Status::Ok,
            error: stamp.error,
        });
    }
    log::info!("generating {label}: {n} trajectories");
    let start = Instant::now();
    let outcome = generate_dataset(&ctx.full, domain, n, config.method, seed, &config.ocp, workers).and_then(|d| {
        d.save(dir)?;
        Ok(vec!["meta.json", "points.csv", "values.csv"])
    });
    timings.stages.insert(label.into(), start.elapsed().as_secs_f64());
    let stamp = write_stamp(dir, &input, outcome)?;
    Ok(Prepared {
        hash: input,
        ok: stamp.status == Status::Ok,
        error: stamp.error,
    })
}

/// Trains and evaluates one cell; returns the training time.
fn run_cell(
    ctx: &Context,
    spec: &TrainSpec,
    data_dir: &Path,
    reference: Option<&Dataset>,
    config: &ExperimentConfig,
    mc_seed: u64,
    dir: &Path,
) -> Result<f64> {
    fs::create_dir_all(dir)?;
    let train = Dataset::load(data_dir)?;
    let start = Instant::now();
    let (ckpt, mut report): (PolicyCheckpoint, TrainReport) =
        fit(spec, &train, ctx.design.clone(), &ctx.lqr, reference)?;
    let train_time = start.elapsed().as_secs_f64();
    report.wall_time_s = None;
    ckpt.save(&dir.join("checkpoint.json"))?;
    report.save(&dir.join("train_report.json"))?;
    if let Some(why) = &report.aborted {
        return Err(Error::NonFinite(format!("training aborted: {why}")));
    }
    let model = spec.kind.is_lambda().then(|| ctx.design.clone());
    let policy = NeuralPolicy::new(ckpt, model)?;
    let eval = evaluate_policy(
        spec.kind.name(),
        ctx.full.as_ref(),
        ctx.design.as_ref(),
        &policy,
        &config.eval,
        mc_seed,
        reference.map(|d| d.values.as_slice()),
        1,
        Some(dir),
    )?;
    eval.save(&dir.join("eval.json"))?;
    Ok(train_time)
}

const METRICS: [&str; 6] = [
    "final_loss",
    "rm_l2",
    "abscissa",
    "equilibrium_offset",
    "worst_case_failure",
    "median_suboptimality_pct",
];

fn metrics_of(train: Option<&TrainReport>, eval: Option<&EvalReport>) -> [Option<f64>; 6] {
    let lin = eval.and_then(|e| e.linear.as_ref());
    [
        train.map(|t| t.final_loss),
        train.and_then(|t| t.rm_l2),
        lin.map(|l| l.abscissa),
        lin.and_then(|l| l.equilibrium.as_ref()).map(|e| e.offset),
        eval.and_then(|e| e.stability.as_ref()).and_then(|s| s.worst_case_failure),
        eval.and_then(|e| e.optimality.as_ref())
            .and_then(|o| o.quartiles.as_ref())
            .map(|q| q.median),
    ]
}

fn num(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.16e}")).unwrap_or_default()
}

/// Writes `report/cells.csv` (one row per cell) and `report/summary.csv`
/// (count, min, quartiles and max of each metric per size and architecture,
/// over completed trials), reading only artifacts listed in the manifest.
/// Quartiles interpolate linearly between order statistics.
pub fn emit_report(run_dir: &Path) -> Result<Vec<PathBuf>> {
    let manifest = Manifest::load(run_dir)?;
    if !manifest.cells.iter().any(|c| c.status == Status::Ok) {
        return Err(Error::InvalidArgument(format!(
            "{} has no completed cells",
            run_dir.display()
        )));
    }
    let report_dir = run_dir.join("report");
    fs::create_dir_all(&report_dir)?;
    let cells_path = report_dir.join("cells.csv");
    let mut w = csv::Writer::from_path(&cells_path).map_err(csv_err)?;
    let mut header = vec!["id", "size", "trial", "architecture", "status"];
    header.extend(METRICS);
    header.extend(["mc_steady_state", "optimality_included", "optimality_failed", "error"]);
    w.write_record(&header).map_err(csv_err)?;
    // (size, architecture) → metric values over trials.
    let mut groups: BTreeMap<(String, String), Vec<[Option<f64>; 6]>> = BTreeMap::new();
    for c in &manifest.cells {
        let dir = match c.size {
            Some(_) => format!("cells/{}", c.id),
            None => "baseline/lqr".into(),
        };
        let (train, eval) = if c.status == Status::Ok {
            let train: Option<TrainReport> = match c.size {
                Some(_) => Some(serde_json::from_str(&manifest.read(run_dir, &format!("{dir}/train_report.json"))?)?),
                None => None,
            };
            let eval: EvalReport = serde_json::from_str(&manifest.read(run_dir, &format!("{dir}/eval.json"))?)?;
            (train, Some(eval))
        } else {
            (None, None)
        };
        let m = metrics_of(train.as_ref(), eval.as_ref());
        let stab = eval.as_ref().and_then(|e| e.stability.as_ref());
        let opt = eval.as_ref().and_then(|e| e.optimality.as_ref());
        let status = match c.status {
            Status::Ok => "ok",
            Status::Failed => "failed",
        };
        let mut row = vec![
            c.id.clone(),
            c.size.map(|s| s.to_string()).unwrap_or_default(),
            c.trial.map(|s| s.to_string()).unwrap_or_default(),
            c.architecture.clone(),
            status.into(),
        ];
        row.extend(m.iter().map(|v| num(*v)));
        row.push(stab.map(|s| s.steady_state.to_string()).unwrap_or_default());
        row.push(opt.map(|o| o.included.to_string()).unwrap_or_default());
        row.push(opt.map(|o| o.failed.to_string()).unwrap_or_default());
        row.push(c.error.clone().unwrap_or_default());
        w.write_record(&row).map_err(csv_err)?;
        if c.status == Status::Ok {
            let size = c.size.map(|s| s.to_string()).unwrap_or_default();
            groups.entry((size, c.architecture.clone())).or_default().push(m);
        }
    }
    w.flush()?;

    let summary_path = report_dir.join("summary.csv");
    let mut w = csv::Writer::from_path(&summary_path).map_err(csv_err)?;
    w.write_record(["size", "architecture", "metric", "count", "min", "q1", "median", "q3", "max"])
        .map_err(csv_err)?;
    for ((size, arch), rows) in &groups {
        for (k, name) in METRICS.iter().enumerate() {
            let mut v: Vec<f64> = rows.iter().filter_map(|r| r[k]).collect();
            if v.is_empty() {
                continue;
            }
            v.sort_by(f64::total_cmp);
            let q = quartiles(&v).expect("non-empty");
            w.write_record([
                size.clone(),
                arch.clone(),
                name.to_string(),
                v.len().to_string(),
                num(quantile(&v, 0.0)),
                num(Some(q.q1)),
                num(Some(q.median)),
                num(Some(q.q3)),
                num(quantile(&v, 1.0)),
            ])
            .map_err(csv_err)?;
        }
    }
    w.flush()?;
    let mut written = vec![cells_path, summary_path];

    let timing_path = run_dir.join("timings.json");
    let timings_csv = report_dir.join("timings.csv");
    if timing_path.exists() {
        let t: Timings = serde_json::from_str(&fs::read_to_string(&timing_path)?)?;
        let mut w = csv::Writer::from_path(&timings_csv).map_err(csv_err)?;
        w.write_record(["stage", "seconds", "training_seconds"]).map_err(csv_err)?;
        for (stage, s) in &t.stages {
            let train = stage.strip_prefix("cells/").and_then(|id| t.training.get(id)).copied();
            w.write_record([stage.clone(), num(Some(*s)), num(train)]).map_err(csv_err)?;
        }
        w.flush()?;
        written.push(timings_csv);
    } else if timings_csv.exists() {
        fs::remove_file(&timings_csv)?;
    }
    Ok(written)
}

fn csv_err(e: csv::Error) -> Error {
    Error::Config(format!("csv: {e}"))
}

#[cfg(test)]
mod tests {
    use super::*;

    const LINEAR: &str = r#"{"model": "linear", "a": [[0, 1], [0, 0]], "b": [[0], [1]], "q": [[1, 0], [0, 1]], "r": [[1]]}"#;

    fn setup(archs: &str) -> (tempfile::TempDir, ExperimentConfig) {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("model.json"), LINEAR).unwrap();
        let cfg = format!(
            r#"{{
                "model": "model.json",
                "dataset_sizes": [3],
                "trials": 2,
                "architectures": {archs},
                "train_domain": {{"kind": "ball", "radius": 1.0}},
                "train": {{"hidden": [6, 6], "epochs": 5, "batch_size": 64}},
                "eval": {{"n_mc": 3, "domain": {{"kind": "sphere", "radius": 1.0}}}},
                "output_dir": "run",
                "seed": 11
            }}"#
        );
        fs::write(dir.path().join("exp.json"), &cfg).unwrap();
        let (cfg, _) = ExperimentConfig::load(&dir.path().join("exp.json")).unwrap();
        (dir, cfg)
    }

    #[test]
    fn seeds_are_stable_and_distinct() {
        assert_eq!(derive_seed(1, "train", &[0, 1, 2]), derive_seed(1, "train", &[0, 1, 2]));
        assert_ne!(derive_seed(1, "train", &[0, 1, 2]), derive_seed(1, "train", &[0, 2, 1]));
        assert_ne!(derive_seed(1, "train", &[0]), derive_seed(2, "train", &[0]));
        assert_ne!(derive_seed(1, "data", &[0]), derive_seed(1, "train", &[0]));
    }

    #[test]
    fn empty_architecture_list_only_writes_a_manifest() {
        let (dir, cfg) = setup("[]");
        let out = run_experiment(&cfg, dir.path(), &RunOptions::default()).unwrap();
        let m = Manifest::load(&out).unwrap();
        assert!(m.cells.is_empty());
        assert_eq!(m.artifacts.len(), 1);
        assert!(!out.join("datasets").exists() && !out.join("reference").exists());
        assert!(emit_report(&out).is_err());
    }

    #[test]
    fn invalid_configs_are_config_errors() {
        let (dir, mut cfg) = setup(r#"["u_mat"]"#);
        cfg.trials = 0;
        assert!(matches!(run_experiment(&cfg, dir.path(), &RunOptions::default()), Err(Error::Config(_))));
        cfg.trials = 1;
        cfg.model = "missing.json".into();
        assert!(matches!(run_experiment(&cfg, dir.path(), &RunOptions::default()), Err(Error::Config(_))));
    }

    #[test]
    fn rerun_is_idempotent_and_report_is_stable() {
        let (dir, cfg) = setup(r#"["u_mat", "lambda_mat"]"#);
        let opts = RunOptions {
            workers: 2,
            deterministic: false,
        };
        let out = run_experiment(&cfg, dir.path(), &opts).unwrap();
        let m = Manifest::load(&out).unwrap();
        assert_eq!(m.cells.len(), 5);
        assert!(m.cells.iter().all(|c| c.status == Status::Ok), "{:?}", m.cells);
        for a in &m.artifacts {
            assert_eq!(sha256_file(&out.join(&a.path)).unwrap(), a.sha256, "{}", a.path);
        }
        let t: Timings = serde_json::from_str(&fs::read_to_string(out.join("timings.json")).unwrap()).unwrap();
        assert_eq!(t.stages.len(), 1 + 2 + 4 + 1);
        emit_report(&out).unwrap();
        let cells = fs::read(out.join("report/cells.csv")).unwrap();
        let summary = fs::read(out.join("report/summary.csv")).unwrap();
        assert_eq!(String::from_utf8_lossy(&cells).lines().count(), 6);

        let manifest = fs::read(out.join("manifest.json")).unwrap();
        run_experiment(&cfg, dir.path(), &opts).unwrap();
        let t: Timings = serde_json::from_str(&fs::read_to_string(out.join("timings.json")).unwrap()).unwrap();
        assert!(t.stages.is_empty(), "{:?}", t.stages);
        assert_eq!(fs::read(out.join("manifest.json")).unwrap(), manifest);
        emit_report(&out).unwrap();
        assert_eq!(fs::read(out.join("report/cells.csv")).unwrap(), cells);
        assert_eq!(fs::read(out.join("report/summary.csv")).unwrap(), summary);

        // A tampered artifact is recomputed.
        let eval = out.join("cells/n3_t0_u_mat/eval.json");
        fs::write(&eval, "{}").unwrap();
        run_experiment(&cfg, dir.path(), &opts).unwrap();
        let t: Timings = serde_json::from_str(&fs::read_to_string(out.join("timings.json")).unwrap()).unwrap();
        assert_eq!(t.stages.keys().collect::<Vec<_>>(), ["cells/n3_t0_u_mat"]);
        assert_eq!(fs::read(out.join("manifest.json")).unwrap(), manifest);
    }

    #[test]
    fn report_reads_only_manifest_artifacts() {
        let (dir, mut cfg) = setup(r#"["u_jac"]"#);
        cfg.trials = 1;
        cfg.baseline = false;
        let out = run_experiment(&cfg, dir.path(), &RunOptions { workers: 1, deterministic: true }).unwrap();
        assert!(!out.join("timings.json").exists());
        let written = emit_report(&out).unwrap();
        assert_eq!(written.len(), 2);
        let summary = fs::read_to_string(out.join("report/summary.csv")).unwrap();
        assert!(summary.lines().skip(1).all(|l| l.starts_with("3,u_jac,")), "{summary}");
        fs::write(out.join("cells/n3_t0_u_jac/train_report.json"), "{}").unwrap();
        assert!(matches!(emit_report(&out), Err(Error::Config(_))));
    }
}
