//! Supervised fitting of policy networks to open-loop optimal data.

pub mod optim;

use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lqr::LqrSolution;
use crate::models::ControlSystem;
use crate::ocp::Dataset;
use crate::policies::{finalize_checkpoint, Architecture, ArchitectureKind, Mlp, Policy, PolicyCheckpoint, Scaling};
pub use optim::{lbfgs, Adam, LbfgsResult, LbfgsSettings};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Optimizer {
    Adam,
    Lbfgs,
}

impl Optimizer {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "adam" => Some(Self::Adam),
            "lbfgs" => Some(Self::Lbfgs),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSpec {
    pub kind: ArchitectureKind,
    pub hidden: Vec<usize>,
    pub optimizer: Optimizer,
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Adam epochs; L-BFGS uses `lbfgs_iterations`.
    pub epochs: usize,
    pub lbfgs_iterations: usize,
    pub lbfgs_rel_tol: f64,
    /// Weight of the value-gradient term (λ-kinds with costate data only).
    pub lam_weight: f64,
    pub seed: u64,
}

impl Default for TrainSpec {
    fn default() -> Self {
        Self {
            kind: ArchitectureKind::UMat,
            hidden: vec![32; 5],
            optimizer: Optimizer::Adam,
            learning_rate: 1e-3,
            batch_size: 256,
            epochs: 1500,
            lbfgs_iterations: 5000,
            lbfgs_rel_tol: 1e-9,
            lam_weight: 0.0,
            seed: 0,
        }
    }
}

impl TrainSpec {
    pub fn validate(&self) -> Result<()> {
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return Err(Error::Config("hidden widths must be positive".into()));
        }
        if self.batch_size == 0 || self.epochs == 0 || self.lbfgs_iterations == 0 {
            return Err(Error::Config("epochs, iterations and batch size must be positive".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        if !(self.lam_weight >= 0.0 && self.lam_weight.is_finite()) {
            return Err(Error::Config("value-gradient weight must be non-negative".into()));
        }
        if self.lam_weight > 0.0 && !self.kind.is_lambda() {
            return Err(Error::Config(format!(
                "value-gradient loss needs a λ architecture, not {}",
                self.kind.name()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub kind: ArchitectureKind,
    pub seed: u64,
    pub optimizer: Optimizer,
    /// Mean batch loss per Adam epoch, or the loss after each L-BFGS step.
    pub loss_history: Vec<f64>,
    /// Loss over the whole training set with the returned parameters.
    pub final_loss: f64,
    pub rm_l2: Option<f64>,
    pub train_records: usize,
    pub test_records: usize,
    /// Set when training stopped on a non-finite loss; the checkpoint then
    /// holds the last finite parameters.
    pub aborted: Option<String>,
    /// Omitted from files written in deterministic mode.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub wall_time_s: Option<f64>,
}

impl TrainReport {
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        std::fs::write(path, s)?;
        Ok(())
    }
}

struct Batchable {
    xs: DMatrix<f64>,
    us: DMatrix<f64>,
    lams: Option<DMatrix<f64>>,
}

impl Batchable {
    fn columns(&self, idx: &[usize]) -> Batchable {
        let pick = |m: &DMatrix<f64>| DMatrix::from_fn(m.nrows(), idx.len(), |r, c| m[(r, idx[c])]);
        Batchable {
            xs: pick(&self.xs),
            us: pick(&self.us),
            lams: self.lams.as_ref().map(pick),
        }
    }
}

/// Mean squared control error of the architecture on `(xs, us)` plus the
/// weighted value-gradient error when costate targets are given.
pub fn loss(
    arch: &Architecture,
    net: &Mlp,
    xs: &DMatrix<f64>,
    us: &DMatrix<f64>,
    lams: Option<&DMatrix<f64>>,
    lam_weight: f64,
) -> Result<f64> {
    Ok(arch.loss_and_gradient(net, xs, us, lams, lam_weight)?.0)
}

/// Relative mean ℓ² error: `mean ‖π(x) − u*‖₂ / max ‖u*‖₂`.
pub fn rm_l2(policy: &dyn Policy, xs: &DMatrix<f64>, us: &DMatrix<f64>) -> Result<f64> {
    if xs.ncols() == 0 || xs.ncols() != us.ncols() {
        return Err(Error::InvalidArgument("test set is empty or ragged".into()));
    }
    let denom = us.column_iter().map(|u| u.norm()).fold(0.0, f64::max);
    if denom == 0.0 {
        return Err(Error::InvalidArgument("every test control is zero".into()));
    }
    let total: f64 = xs
        .column_iter()
        .zip(us.column_iter())
        .map(|(x, u)| (policy.control(&x.clone_owned()) - u).norm())
        .sum();
    Ok(total / xs.ncols() as f64 / denom)
}

/// Fits `spec.kind` to `train` and finalizes the checkpoint. `model` is the
/// design model the data lives on; `test` (if any) gives the reported RMℓ².
pub fn fit(
    spec: &TrainSpec,
    train: &Dataset,
    model: Arc<dyn ControlSystem>,
    lqr: &LqrSolution,
    test: Option<&Dataset>,
) -> Result<(PolicyCheckpoint, TrainReport)> {
    fit_from(spec, train, model, lqr, test, None)
}

/// As [`fit`], starting from `init` instead of a random network.
pub fn fit_from(
    spec: &TrainSpec,
    train: &Dataset,
    model: Arc<dyn ControlSystem>,
    lqr: &LqrSolution,
    test: Option<&Dataset>,
    init: Option<&PolicyCheckpoint>,
) -> Result<(PolicyCheckpoint, TrainReport)> {
    spec.validate()?;
    if train.is_empty() {
        return Err(Error::InvalidArgument("training set is empty".into()));
    }
    if train.meta.state_dim != model.state_dim() || train.meta.control_dim != model.control_dim() {
        return Err(Error::InvalidArgument(format!(
            "dataset dimensions ({}, {}) do not match model ({}, {})",
            train.meta.state_dim,
            train.meta.control_dim,
            model.state_dim(),
            model.control_dim()
        )));
    }
    let lams = if spec.lam_weight > 0.0 {
        Some(train.costates().ok_or_else(|| {
            Error::InvalidArgument("value-gradient loss needs a dataset with costates".into())
        })?)
    } else {
        None
    };
    let start = Instant::now();
    let eq = model.equilibrium().clone();
    let bounds = model.bounds().clone();
    let data = Batchable {
        xs: train.states(),
        us: train.controls(),
        lams,
    };
    let scaling = match init {
        Some(c) => c.scaling()?,
        None => Scaling::fit(train.records.iter().map(|r| &r.x), model.state_dim())?,
    };
    let arch = Architecture::new(
        spec.kind,
        eq.x_f.clone(),
        eq.u_f.clone(),
        bounds.clone(),
        lqr.p.clone(),
        lqr.k.clone(),
        scaling.clone(),
        Some(model.clone()),
    )?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut net = match init {
        Some(c) => {
            if c.kind != spec.kind {
                return Err(Error::InvalidArgument("initial checkpoint has a different kind".into()));
            }
            c.network()?
        }
        None => Mlp::random(&arch.network_sizes(&spec.hidden), &mut rng)?,
    };
    let lam_w = spec.lam_weight;
    let evaluate = |net: &Mlp, b: &Batchable| arch.loss_and_gradient(net, &b.xs, &b.us, b.lams.as_ref(), lam_w);

    let mut history = Vec::new();
    let mut aborted = None;
    match spec.optimizer {
        Optimizer::Adam => {
            let mut theta = net.to_flat();
            let mut opt = Adam::new(theta.len(), spec.learning_rate);
            let count = data.xs.ncols();
            let mut order: Vec<usize> = (0..count).collect();
            'epochs: for epoch in 0..spec.epochs {
                let mut shuffle = ChaCha8Rng::seed_from_u64(epoch_seed(spec.seed, epoch));
                order.shuffle(&mut shuffle);
                let mut total = 0.0;
                for chunk in order.chunks(spec.batch_size) {
                    let batch = data.columns(chunk);
                    let (l, g) = evaluate(&net, &batch)?;
                    if !l.is_finite() || g.iter().any(|v| !v.is_finite()) {
                        aborted = Some(format!("non-finite loss in epoch {epoch}"));
                        break 'epochs;
                    }
                    total += l * chunk.len() as f64;
                    let last_good = theta.clone();
                    opt.step(&mut theta, &g);
                    if theta.iter().any(|v| !v.is_finite()) {
                        net.set_flat(&last_good)?;
                        aborted = Some(format!("non-finite parameters in epoch {epoch}"));
                        break 'epochs;
                    }
                    net.set_flat(&theta)?;
                }
                history.push(total / count as f64);
            }
        }
        Optimizer::Lbfgs => {
            let settings = LbfgsSettings {
                max_iterations: spec.lbfgs_iterations,
                rel_tol: spec.lbfgs_rel_tol,
                ..LbfgsSettings::default()
            };
            let mut work = net.clone();
            let res = lbfgs(net.to_flat(), &settings, |theta| {
                work.set_flat(theta)?;
                let (l, g) = evaluate(&work, &data)?;
                Ok(if g.iter().all(|v| v.is_finite()) { (l, g) } else { (f64::INFINITY, g) })
            });
            match res {
                Ok(r) => {
                    net.set_flat(&r.theta)?;
                    history = r.history;
                    log::info!("L-BFGS stopped after {} iterations: {}", r.iterations, r.stop);
                }
                Err(e) if e.is_numerical() => aborted = Some(e.to_string()),
                Err(e) => return Err(e),
            }
        }
    }
    if history.is_empty() {
        history.push(evaluate(&net, &data)?.0);
    }
    let final_loss = evaluate(&net, &data)?.0;
    let ckpt = finalize_checkpoint(spec.kind, &net, lqr, &eq, &bounds, &scaling)?;
    let rm = match test {
        Some(t) if !t.is_empty() => {
            let policy = crate::policies::NeuralPolicy::new(ckpt.clone(), Some(model.clone()))?;
            Some(rm_l2(&policy, &t.states(), &t.controls())?)
        }
        _ => None,
    };
    let report = TrainReport {
        kind: spec.kind,
        seed: spec.seed,
        optimizer: spec.optimizer,
        loss_history: history,
        final_loss,
        rm_l2: rm,
        train_records: train.len(),
        test_records: test.map_or(0, |t| t.len()),
        aborted,
        wall_time_s: Some(start.elapsed().as_secs_f64()),
    };
    Ok((ckpt, report))
}

/// Per-epoch shuffle seed derived from the master seed (SplitMix64 step).
fn epoch_seed(seed: u64, epoch: usize) -> u64 {
    let mut z = seed.wrapping_add((epoch as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
