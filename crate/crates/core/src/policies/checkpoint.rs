//! Self-contained trained controllers: weights plus the frozen LQR-side constants.

use std::path::Path;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::arch::{Architecture, Frozen};
use super::mlp::{LayerParams, Mlp};
use super::scaling::Scaling;
use super::{ArchitectureKind, Policy};
use crate::error::{check_dim, Error, Result};
use crate::lqr::LqrSolution;
use crate::models::{ControlBounds, ControlSystem, EquilibriumPair};

pub const SCHEMA_VERSION: u32 = 1;
pub const ACTIVATION: &str = "tanh";

/// Agreement required between stored caches and a fresh evaluation.
const FROZEN_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Dims {
    pub n: usize,
    pub m: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
#[allow(non_snake_case)]
pub struct PolicyCheckpoint {
    pub schema_version: u32,
    pub kind: ArchitectureKind,
    pub dims: Dims,
    pub activation: String,
    pub layers: Vec<LayerParams>,
    pub x_f: Vec<f64>,
    pub u_f: Vec<f64>,
    pub bounds: ControlBounds,
    pub P: Vec<Vec<f64>>,
    pub K: Vec<Vec<f64>>,
    pub scale_center: Vec<f64>,
    pub scale_half_range: Vec<f64>,
    pub frozen_N_xf: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub frozen_J_xf: Option<Vec<Vec<f64>>>,
}

fn to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

fn from_rows(rows: &[Vec<f64>], nrows: usize, ncols: usize, what: &str) -> Result<DMatrix<f64>> {
    check_dim(what, rows.len(), nrows)?;
    for r in rows {
        check_dim(what, r.len(), ncols)?;
    }
    Ok(DMatrix::from_fn(nrows, ncols, |i, j| rows[i][j]))
}

/// Builds a checkpoint from network weights, computing and freezing `N(x_f)`
/// and, for Jacobian kinds, `∂N/∂x(x_f)`.
pub fn finalize_checkpoint(
    kind: ArchitectureKind,
    net: &Mlp,
    lqr: &LqrSolution,
    eq: &EquilibriumPair,
    bounds: &ControlBounds,
    scaling: &Scaling,
) -> Result<PolicyCheckpoint> {
    let arch = Architecture::new(
        kind,
        eq.x_f.clone(),
        eq.u_f.clone(),
        bounds.clone(),
        lqr.p.clone(),
        lqr.k.clone(),
        scaling.clone(),
        None,
    )?;
    let frozen = arch.freeze(net)?;
    let ckpt = PolicyCheckpoint {
        schema_version: SCHEMA_VERSION,
        kind,
        dims: Dims {
            n: arch.n,
            m: arch.m,
        },
        activation: ACTIVATION.to_string(),
        layers: net.to_params(),
        x_f: eq.x_f.iter().copied().collect(),
        u_f: eq.u_f.iter().copied().collect(),
        bounds: bounds.clone(),
        P: to_rows(&lqr.p),
        K: to_rows(&lqr.k),
        scale_center: scaling.center.iter().copied().collect(),
        scale_half_range: scaling.half_range.iter().copied().collect(),
        frozen_N_xf: frozen.n_f.iter().copied().collect(),
        frozen_J_xf: frozen.j_f.as_ref().map(to_rows),
    };
    Ok(ckpt)
}

impl PolicyCheckpoint {
    pub fn network(&self) -> Result<Mlp> {
        let net = Mlp::from_params(&self.layers)?;
        check_dim("network input", net.input_dim(), self.dims.n)?;
        check_dim(
            "network output",
            net.output_dim(),
            self.kind.network_output_dim(self.dims.n, self.dims.m),
        )?;
        Ok(net)
    }

    pub fn equilibrium(&self) -> EquilibriumPair {
        EquilibriumPair {
            x_f: DVector::from_column_slice(&self.x_f),
            u_f: DVector::from_column_slice(&self.u_f),
        }
    }

    pub fn scaling(&self) -> Result<Scaling> {
        Scaling::new(
            DVector::from_column_slice(&self.scale_center),
            DVector::from_column_slice(&self.scale_half_range),
        )
    }

    pub fn p(&self) -> Result<DMatrix<f64>> {
        from_rows(&self.P, self.dims.n, self.dims.n, "P")
    }

    pub fn k(&self) -> Result<DMatrix<f64>> {
        from_rows(&self.K, self.dims.m, self.dims.n, "K")
    }

    pub fn frozen(&self) -> Result<Frozen> {
        let d = self.kind.network_output_dim(self.dims.n, self.dims.m);
        check_dim("frozen_N_xf", self.frozen_N_xf.len(), d)?;
        let j_f = match (&self.frozen_J_xf, self.kind.is_jac()) {
            (Some(rows), true) => Some(from_rows(rows, d, self.dims.n, "frozen_J_xf")?),
            (None, false) => None,
            (Some(_), false) => {
                return Err(Error::InvalidArgument(format!("{} checkpoint must not carry frozen_J_xf", self.kind)))
            }
            (None, true) => return Err(Error::InvalidArgument(format!("{} checkpoint lacks frozen_J_xf", self.kind))),
        };
        Ok(Frozen {
            n_f: DVector::from_column_slice(&self.frozen_N_xf),
            j_f,
        })
    }

    pub fn architecture(&self, model: Option<Arc<dyn ControlSystem>>) -> Result<Architecture> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::InvalidArgument(format!(
                "unsupported checkpoint schema version {}",
                self.schema_version
            )));
        }
        if self.activation != ACTIVATION {
            return Err(Error::InvalidArgument(format!("unsupported activation {:?}", self.activation)));
        }
        check_dim("x_f", self.x_f.len(), self.dims.n)?;
        check_dim("u_f", self.u_f.len(), self.dims.m)?;
        let eq = self.equilibrium();
        Architecture::new(
            self.kind,
            eq.x_f,
            eq.u_f,
            self.bounds.clone(),
            self.p()?,
            self.k()?,
            self.scaling()?,
            model,
        )
    }

    /// Largest deviation between the stored caches and a fresh evaluation.
    pub fn frozen_discrepancy(&self) -> Result<f64> {
        let arch = self.architecture(None)?;
        let fresh = arch.freeze(&self.network()?)?;
        let stored = self.frozen()?;
        let mut d = (&fresh.n_f - &stored.n_f).amax();
        if let (Some(a), Some(b)) = (&fresh.j_f, &stored.j_f) {
            d = d.max((a - b).amax());
        }
        Ok(d)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let ckpt: Self = serde_json::from_str(s)?;
        let d = ckpt.frozen_discrepancy()?;
        if !(d <= FROZEN_TOL) {
            return Err(Error::InvalidArgument(format!("frozen caches disagree with the weights by {d:e}")));
        }
        Ok(ckpt)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

/// A checkpoint ready for evaluation. λ-kinds need the design model.
pub struct NeuralPolicy {
    pub checkpoint: PolicyCheckpoint,
    pub net: Mlp,
    pub arch: Architecture,
    pub frozen: Frozen,
}

impl NeuralPolicy {
    pub fn new(checkpoint: PolicyCheckpoint, model: Option<Arc<dyn ControlSystem>>) -> Result<Self> {
        let arch = checkpoint.architecture(model)?;
        if !arch.has_control_map() {
            return Err(Error::InvalidArgument(format!(
                "{} needs the system model to produce controls",
                checkpoint.kind
            )));
        }
        let net = checkpoint.network()?;
        let frozen = checkpoint.frozen()?;
        Ok(Self {
            checkpoint,
            net,
            arch,
            frozen,
        })
    }

    pub fn kind(&self) -> ArchitectureKind {
        self.checkpoint.kind
    }

    pub fn value_gradient(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        self.arch.value_gradient(&self.net, &self.frozen, x)
    }
}

impl Policy for NeuralPolicy {
    fn state_dim(&self) -> usize {
        self.arch.n
    }

    fn control_dim(&self) -> usize {
        self.arch.m
    }

    fn control(&self, x: &DVector<f64>) -> DVector<f64> {
        self.arch.control(&self.net, &self.frozen, x)
    }

    fn jacobian(&self, x: &DVector<f64>) -> DMatrix<f64> {
        self.arch.control_and_jacobian(&self.net, &self.frozen, x).1
    }
}

/// `λ̂(x)` of a λ-kind checkpoint.
pub fn eval_value_gradient_model(ckpt: &PolicyCheckpoint, x: &DVector<f64>) -> Result<DVector<f64>> {
    let arch = ckpt.architecture(None)?;
    arch.value_gradient(&ckpt.network()?, &ckpt.frozen()?, x)
}

/// `û(x)` of a u-kind checkpoint.
pub fn eval_control_model(ckpt: &PolicyCheckpoint, x: &DVector<f64>) -> Result<DVector<f64>> {
    if ckpt.kind.is_lambda() {
        return Err(Error::InvalidArgument(format!(
            "{} is a value-gradient model; use control_from_value_gradient",
            ckpt.kind
        )));
    }
    check_dim("state", x.len(), ckpt.dims.n)?;
    let arch = ckpt.architecture(None)?;
    Ok(arch.control(&ckpt.network()?, &ckpt.frozen()?, x))
}

/// Analytic `∂u/∂x` of any policy.
pub fn policy_state_jacobian(policy: &dyn Policy, x: &DVector<f64>) -> Result<DMatrix<f64>> {
    check_dim("state", x.len(), policy.state_dim())?;
    let j = policy.jacobian(x);
    crate::error::check_finite("policy Jacobian", j.as_slice())?;
    Ok(j)
}
