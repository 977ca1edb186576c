//! Feedback policies: the MLP core, saturation, and the eight architectures.
//!
//! | kind          | network output | feedback                                              |
//! |---------------|----------------|-------------------------------------------------------|
//! | `lambda_nn`   | n              | λ̂ = N                                                 |
//! | `lambda_qrnet`| n              | λ̂ = 2Pδ + N − N_f                                     |
//! | `lambda_jac`  | n              | λ̂ = 2Pδ − J_f δ + N − N_f                             |
//! | `lambda_mat`  | n·n            | λ̂ = 2Pδ + [N − N_f] δ̃                                |
//! | `u_nn`        | m              | û = σ(N)                                              |
//! | `u_qrnet`     | m              | û = σ(sat(u_f − Kδ) + N − N_f)                        |
//! | `u_jac`       | m              | û = σ(sat(u_f − Kδ) − J_f δ + N − N_f)                |
//! | `u_mat`       | m·n            | û = σ(sat(u_f − Kδ) + [N − N_f] δ̃)                   |
//!
//! Here `δ = x − x_f`, `δ̃ = δ / h` with the input half-ranges `h`, `N = N(ζ)`
//! on scaled inputs `ζ = (x − c)/h`, `N_f = N(ζ_f)`, and `J_f = ∂N/∂x(x_f)`.
//! Matrix outputs are reshaped row-major. λ-kinds map to controls through
//! `u = clip(u_f − ½R⁻¹B(x)ᵀλ̂)`.

pub mod arch;
pub mod checkpoint;
pub mod mlp;
pub mod saturation;
pub mod scaling;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

pub use arch::{control_from_value_gradient, Architecture, Frozen};
pub use checkpoint::{
    eval_control_model, eval_value_gradient_model, finalize_checkpoint, policy_state_jacobian, NeuralPolicy,
    PolicyCheckpoint,
};
pub use mlp::{mlp_forward, mlp_input_jacobian, mlp_param_gradient, Mlp};
pub use saturation::{smooth_saturation, SmoothSat};
pub use scaling::Scaling;

/// A state-feedback law `u = π(x)` with its state Jacobian.
pub trait Policy: Send + Sync {
    fn state_dim(&self) -> usize;
    fn control_dim(&self) -> usize;
    fn control(&self, x: &DVector<f64>) -> DVector<f64>;
    fn jacobian(&self, x: &DVector<f64>) -> DMatrix<f64>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArchitectureKind {
    LambdaNn,
    UNn,
    LambdaQrnet,
    UQrnet,
    LambdaJac,
    UJac,
    LambdaMat,
    UMat,
}

impl ArchitectureKind {
    pub const ALL: [ArchitectureKind; 8] = [
        Self::LambdaNn,
        Self::UNn,
        Self::LambdaQrnet,
        Self::UQrnet,
        Self::LambdaJac,
        Self::UJac,
        Self::LambdaMat,
        Self::UMat,
    ];

    /// The kinds whose closed-loop linearization at `x_f` is `A − BK` for any weights.
    pub const GUARANTEED: [ArchitectureKind; 4] = [Self::LambdaJac, Self::LambdaMat, Self::UJac, Self::UMat];

    pub fn is_lambda(self) -> bool {
        matches!(self, Self::LambdaNn | Self::LambdaQrnet | Self::LambdaJac | Self::LambdaMat)
    }

    pub fn is_guaranteed(self) -> bool {
        matches!(self, Self::LambdaJac | Self::LambdaMat | Self::UJac | Self::UMat)
    }

    /// True for every kind built around the LQR term.
    pub fn uses_lqr(self) -> bool {
        !matches!(self, Self::LambdaNn | Self::UNn)
    }

    pub fn is_jac(self) -> bool {
        matches!(self, Self::LambdaJac | Self::UJac)
    }

    pub fn is_mat(self) -> bool {
        matches!(self, Self::LambdaMat | Self::UMat)
    }

    /// Dimension of the formula's head: `n` for λ-kinds, `m` for u-kinds.
    pub fn head_dim(self, n: usize, m: usize) -> usize {
        if self.is_lambda() {
            n
        } else {
            m
        }
    }

    pub fn network_output_dim(self, n: usize, m: usize) -> usize {
        let d = self.head_dim(n, m);
        if self.is_mat() {
            d * n
        } else {
            d
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::LambdaNn => "lambda_nn",
            Self::UNn => "u_nn",
            Self::LambdaQrnet => "lambda_qrnet",
            Self::UQrnet => "u_qrnet",
            Self::LambdaJac => "lambda_jac",
            Self::UJac => "u_jac",
            Self::LambdaMat => "lambda_mat",
            Self::UMat => "u_mat",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == s)
    }
}

impl std::fmt::Display for ArchitectureKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Trainable parameter count for `hidden` layers of the given widths,
/// including biases.
pub fn parameter_count(kind: ArchitectureKind, n: usize, m: usize, hidden: &[usize]) -> usize {
    let mut sizes = vec![n];
    sizes.extend_from_slice(hidden);
    sizes.push(kind.network_output_dim(n, m));
    sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_round_trip() {
        for k in ArchitectureKind::ALL {
            assert_eq!(ArchitectureKind::parse(k.name()), Some(k));
            let json = serde_json::to_string(&k).unwrap();
            assert_eq!(json, format!("\"{}\"", k.name()));
        }
        assert_eq!(ArchitectureKind::parse("v_nn"), None);
    }

    #[test]
    fn parameter_counts_have_table_leading_terms() {
        // L hidden layers of width w: u_mat has w·m·n output weights and
        // w·n input weights, plus (L − 1) w² between hidden layers.
        let (n, m, w, l) = (64, 2, 32, 5);
        let hidden = vec![w; l];
        let weights_only = |kind: ArchitectureKind| {
            let out = kind.network_output_dim(n, m);
            w * n + (l - 1) * w * w + w * out
        };
        let biases = |kind: ArchitectureKind| l * w + kind.network_output_dim(n, m);
        for kind in ArchitectureKind::ALL {
            assert_eq!(parameter_count(kind, n, m, &hidden), weights_only(kind) + biases(kind));
        }
        assert_eq!(weights_only(ArchitectureKind::UMat), w * m * n + w * n + (l - 1) * w * w);
        assert_eq!(weights_only(ArchitectureKind::LambdaMat), w * n * n + w * n + (l - 1) * w * w);
        assert_eq!(weights_only(ArchitectureKind::UJac), w * m + w * n + (l - 1) * w * w);
    }
}
