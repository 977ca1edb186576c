//! Evaluation, state Jacobians and training gradients of the eight architectures.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use super::mlp::Mlp;
use super::saturation::SmoothSat;
use super::scaling::Scaling;
use super::ArchitectureKind;
use crate::error::{check_dim, Error, Result};
use crate::linalg::{fd_jacobian, invert};
use crate::models::{cost_quadratic, ControlBounds, ControlSystem};

/// Network quantities at `x_f` that the formulas hold fixed.
#[derive(Debug, Clone, PartialEq)]
pub struct Frozen {
    /// `N(ζ_f)`.
    pub n_f: DVector<f64>,
    /// `∂N/∂x(x_f)` in unscaled coordinates (Jacobian kinds only).
    pub j_f: Option<DMatrix<f64>>,
}

struct LambdaMap {
    half_r_inv: DMatrix<f64>,
    model: Arc<dyn ControlSystem>,
    b_const: Option<DMatrix<f64>>,
}

impl LambdaMap {
    fn control_matrix(&self, x: &DVector<f64>) -> DMatrix<f64> {
        match &self.b_const {
            Some(b) => b.clone(),
            None => self.model.control_matrix(x),
        }
    }
}

/// Everything but the network weights: kind, equilibrium, LQR data, scaling.
pub struct Architecture {
    pub kind: ArchitectureKind,
    pub n: usize,
    pub m: usize,
    pub x_f: DVector<f64>,
    pub u_f: DVector<f64>,
    pub bounds: ControlBounds,
    pub p: DMatrix<f64>,
    pub k: DMatrix<f64>,
    pub scaling: Scaling,
    sat: SmoothSat,
    lam: Option<LambdaMap>,
}

/// Head value (λ̂ or pre-saturation control) and optionally its state Jacobian.
struct Head {
    out: DVector<f64>,
    jac: Option<DMatrix<f64>>,
}

impl Architecture {
    /// `model` (in the same coordinates as `x_f`) is needed by λ-kinds to turn
    /// a value gradient into a control; without it only `value_gradient` works.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        kind: ArchitectureKind,
        x_f: DVector<f64>,
        u_f: DVector<f64>,
        bounds: ControlBounds,
        p: DMatrix<f64>,
        k: DMatrix<f64>,
        scaling: Scaling,
        model: Option<Arc<dyn ControlSystem>>,
    ) -> Result<Self> {
        let n = x_f.len();
        let m = u_f.len();
        check_dim("P rows", p.nrows(), n)?;
        check_dim("P columns", p.ncols(), n)?;
        check_dim("K rows", k.nrows(), m)?;
        check_dim("K columns", k.ncols(), n)?;
        check_dim("bounds", bounds.dim(), m)?;
        check_dim("scaling", scaling.center.len(), n)?;
        let sat = SmoothSat::new(&bounds, u_f.as_slice())?;
        let lam = match model {
            Some(model) if kind.is_lambda() => {
                check_dim("model state", model.state_dim(), n)?;
                check_dim("model control", model.control_dim(), m)?;
                let r = cost_quadratic(&*model)?.r;
                let half_r_inv = invert(&r, "R")? * 0.5;
                let b_const = model.constant_control_matrix().then(|| model.control_matrix(&x_f));
                Some(LambdaMap {
                    half_r_inv,
                    model,
                    b_const,
                })
            }
            _ => None,
        };
        Ok(Self {
            kind,
            n,
            m,
            x_f,
            u_f,
            bounds,
            p,
            k,
            scaling,
            sat,
            lam,
        })
    }

    /// False for a λ-kind built without a model.
    pub fn has_control_map(&self) -> bool {
        !self.kind.is_lambda() || self.lam.is_some()
    }

    fn require_control_map(&self) -> Result<()> {
        if self.has_control_map() {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!(
                "{} needs the system model to map value gradients to controls",
                self.kind
            )))
        }
    }

    pub fn network_sizes(&self, hidden: &[usize]) -> Vec<usize> {
        let mut s = vec![self.n];
        s.extend_from_slice(hidden);
        s.push(self.kind.network_output_dim(self.n, self.m));
        s
    }

    fn check_net(&self, net: &Mlp) -> Result<()> {
        check_dim("network input", net.input_dim(), self.n)?;
        check_dim("network output", net.output_dim(), self.kind.network_output_dim(self.n, self.m))
    }

    pub fn freeze(&self, net: &Mlp) -> Result<Frozen> {
        self.check_net(net)?;
        let zf = self.scaling.scale(&self.x_f);
        if self.kind.is_jac() {
            let (n_f, jz) = net.forward_and_jacobian(&zf);
            Ok(Frozen {
                n_f,
                j_f: Some(self.unscale_columns(jz)),
            })
        } else {
            Ok(Frozen {
                n_f: net.forward(&zf),
                j_f: None,
            })
        }
    }

    fn unscale_columns(&self, mut j: DMatrix<f64>) -> DMatrix<f64> {
        for (c, mut col) in j.column_iter_mut().enumerate() {
            col /= self.scaling.half_range[c];
        }
        j
    }

    fn lqr_base(&self, delta: &DVector<f64>, want_jac: bool) -> (DVector<f64>, Option<DMatrix<f64>>) {
        if self.kind.is_lambda() {
            let base = &self.p * delta * 2.0;
            (base, want_jac.then(|| &self.p * 2.0))
        } else {
            let v = &self.u_f - &self.k * delta;
            let mut base = v.clone();
            self.bounds.clip(base.as_mut_slice());
            let jac = want_jac.then(|| {
                let mask = self.bounds.clip_mask(v.as_slice());
                let mut j = -&self.k;
                for (i, mi) in mask.iter().enumerate() {
                    if *mi == 0.0 {
                        j.row_mut(i).fill(0.0);
                    }
                }
                j
            });
            (base, jac)
        }
    }

    fn head(&self, net: &Mlp, frozen: &Frozen, x: &DVector<f64>, want_jac: bool) -> Head {
        let z = self.scaling.scale(x);
        let delta = x - &self.x_f;
        let delta_s = delta.component_div(&self.scaling.half_range);
        let (nv, jn) = if want_jac {
            let (v, j) = net.forward_and_jacobian(&z);
            (v, Some(self.unscale_columns(j)))
        } else {
            (net.forward(&z), None)
        };
        if !self.kind.uses_lqr() {
            return Head { out: nv, jac: jn };
        }
        let (mut out, mut jac) = self.lqr_base(&delta, want_jac);
        let dn = nv - &frozen.n_f;
        if self.kind.is_mat() {
            let d = out.len();
            let n = self.n;
            let mat = DMatrix::from_row_slice(d, n, dn.as_slice());
            out += &mat * &delta_s;
            if let (Some(j), Some(jn)) = (jac.as_mut(), jn.as_ref()) {
                *j += self.unscale_columns(mat);
                for k in 0..d {
                    for jj in 0..n {
                        let w = delta_s[jj];
                        if w != 0.0 {
                            for i in 0..n {
                                j[(k, i)] += w * jn[(k * n + jj, i)];
                            }
                        }
                    }
                }
            }
        } else {
            out += dn;
            if let Some(j_f) = &frozen.j_f {
                out -= j_f * &delta;
            }
            if let (Some(j), Some(jn)) = (jac.as_mut(), jn.as_ref()) {
                *j += jn;
                if let Some(j_f) = &frozen.j_f {
                    *j -= j_f;
                }
            }
        }
        Head { out, jac }
    }

    /// Value-gradient approximation `λ̂(x)` (λ-kinds only).
    pub fn value_gradient(&self, net: &Mlp, frozen: &Frozen, x: &DVector<f64>) -> Result<DVector<f64>> {
        if !self.kind.is_lambda() {
            return Err(Error::InvalidArgument(format!("{} does not model the value gradient", self.kind)));
        }
        check_dim("state", x.len(), self.n)?;
        Ok(self.head(net, frozen, x, false).out)
    }

    fn lambda_to_control(&self, x: &DVector<f64>, lam: &DVector<f64>) -> (DVector<f64>, DVector<f64>, DMatrix<f64>) {
        let map = self.lam.as_ref().expect("lambda map present for lambda kinds");
        let b = map.control_matrix(x);
        let v = &self.u_f - &map.half_r_inv * (b.transpose() * lam);
        let mut u = v.clone();
        self.bounds.clip(u.as_mut_slice());
        (u, v, b)
    }

    pub fn control(&self, net: &Mlp, frozen: &Frozen, x: &DVector<f64>) -> DVector<f64> {
        let h = self.head(net, frozen, x, false);
        if self.kind.is_lambda() {
            self.lambda_to_control(x, &h.out).0
        } else {
            self.sat.apply(&h.out)
        }
    }

    pub fn control_and_jacobian(&self, net: &Mlp, frozen: &Frozen, x: &DVector<f64>) -> (DVector<f64>, DMatrix<f64>) {
        let h = self.head(net, frozen, x, true);
        let dh = h.jac.expect("jacobian requested");
        if self.kind.is_lambda() {
            let (u, v, b) = self.lambda_to_control(x, &h.out);
            let map = self.lam.as_ref().expect("lambda map");
            let mut inner = b.transpose() * &dh;
            if map.b_const.is_none() {
                let lam = h.out.clone();
                inner += fd_jacobian(x, 1e-6, |xp| map.model.control_matrix(xp).transpose() * &lam);
            }
            let mut j = -(&map.half_r_inv * inner);
            let mask = self.bounds.clip_mask(v.as_slice());
            for (i, mi) in mask.iter().enumerate() {
                if *mi == 0.0 {
                    j.row_mut(i).fill(0.0);
                }
            }
            (u, j)
        } else {
            let d = self.sat.derivative(&h.out);
            let mut j = dh;
            for (i, mut row) in j.row_iter_mut().enumerate() {
                row *= d[i];
            }
            (self.sat.apply(&h.out), j)
        }
    }

    /// Mean squared control error over the batch (columns of `xs`, `us`) plus
    /// `lam_weight` times the mean squared value-gradient error when costate
    /// targets are given, with its gradient in flat parameter order. The
    /// frozen quantities are recomputed from `net` and differentiated through.
    pub fn loss_and_gradient(
        &self,
        net: &Mlp,
        xs: &DMatrix<f64>,
        us: &DMatrix<f64>,
        lams: Option<&DMatrix<f64>>,
        lam_weight: f64,
    ) -> Result<(f64, Vec<f64>)> {
        self.check_net(net)?;
        self.require_control_map()?;
        let batch = xs.ncols();
        if batch == 0 {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        check_dim("control targets", us.ncols(), batch)?;
        check_dim("control target rows", us.nrows(), self.m)?;
        let use_lam = lam_weight > 0.0 && self.kind.is_lambda();
        if use_lam {
            let l = lams.ok_or_else(|| Error::InvalidArgument("value-gradient loss needs costate data".into()))?;
            check_dim("costate targets", l.ncols(), batch)?;
        }
        let n = self.n;
        let frozen = self.freeze(net)?;
        let mut zs = xs.clone();
        for mut col in zs.column_iter_mut() {
            let z = self.scaling.scale(&col.clone_owned());
            col.copy_from(&z);
        }
        let cache = net.forward_batch(&zs);
        let d_out = net.output_dim();
        let d_head = self.kind.head_dim(n, self.m);
        let mut seeds = DMatrix::zeros(d_out, batch);
        let mut seed_f = DVector::<f64>::zeros(d_out);
        let mut g_jac = DMatrix::<f64>::zeros(d_head, n);
        let inv_b = 1.0 / batch as f64;
        let mut loss = 0.0;

        for i in 0..batch {
            let x = xs.column(i).clone_owned();
            let delta = &x - &self.x_f;
            let delta_s = delta.component_div(&self.scaling.half_range);
            let nv = cache.output.column(i).clone_owned();
            let out = if !self.kind.uses_lqr() {
                nv
            } else {
                let (mut out, _) = self.lqr_base(&delta, false);
                let dn = nv - &frozen.n_f;
                if self.kind.is_mat() {
                    out += DMatrix::from_row_slice(d_head, n, dn.as_slice()) * &delta_s;
                } else {
                    out += dn;
                    if let Some(j_f) = &frozen.j_f {
                        out -= j_f * &delta;
                    }
                }
                out
            };
            // Gradient of the loss with respect to the head output.
            let mut g_out;
            if self.kind.is_lambda() {
                let (u, v, b) = self.lambda_to_control(&x, &out);
                let mut r = u - us.column(i);
                loss += r.norm_squared() * inv_b;
                let mask = self.bounds.clip_mask(v.as_slice());
                for (ri, mi) in r.iter_mut().zip(mask) {
                    *ri *= 2.0 * inv_b * mi;
                }
                let map = self.lam.as_ref().expect("lambda map");
                g_out = -(b * (map.half_r_inv.transpose() * r));
                if use_lam {
                    let lr = &out - lams.expect("checked").column(i);
                    loss += lam_weight * lr.norm_squared() * inv_b;
                    g_out += lr * (2.0 * lam_weight * inv_b);
                }
            } else {
                let u = self.sat.apply(&out);
                let r = u - us.column(i);
                loss += r.norm_squared() * inv_b;
                let d = self.sat.derivative(&out);
                g_out = r.component_mul(&d) * (2.0 * inv_b);
            }
            // Back into network seeds.
            if self.kind.is_mat() {
                for k in 0..d_head {
                    for j in 0..n {
                        let s = g_out[k] * delta_s[j];
                        seeds[(k * n + j, i)] = s;
                        seed_f[k * n + j] -= s;
                    }
                }
            } else {
                seeds.set_column(i, &g_out);
                if self.kind.uses_lqr() {
                    seed_f -= &g_out;
                }
                if self.kind.is_jac() {
                    g_jac.ger(-1.0, &g_out, &delta_s, 1.0);
                }
            }
        }
        if !loss.is_finite() {
            return Err(Error::NonFinite("training loss".into()));
        }
        let mut grad = Mlp::zeros(&net.sizes())?;
        net.backward_batch(&cache, &seeds, &mut grad);
        if self.kind.uses_lqr() {
            let zf = self.scaling.scale(&self.x_f);
            let cf = net.forward_batch(&DMatrix::from_column_slice(n, 1, zf.as_slice()));
            net.backward_batch(&cf, &DMatrix::from_column_slice(d_out, 1, seed_f.as_slice()), &mut grad);
            if self.kind.is_jac() {
                net.jacobian_param_gradient(&zf, &g_jac, &mut grad);
            }
        }
        Ok((loss, grad.to_flat()))
    }
}

/// `u = clip(u_f − ½R⁻¹B(x)ᵀλ)`: the Hamiltonian minimizer for control-affine
/// dynamics with quadratic control cost.
pub fn control_from_value_gradient(
    model: &dyn ControlSystem,
    x: &DVector<f64>,
    lam: &DVector<f64>,
) -> Result<DVector<f64>> {
    check_dim("state", x.len(), model.state_dim())?;
    check_dim("value gradient", lam.len(), model.state_dim())?;
    let r = cost_quadratic(model)?.r;
    let b = model.control_matrix(x);
    let rhs = b.transpose() * lam * 0.5;
    let step = r
        .cholesky()
        .ok_or_else(|| Error::InvalidArgument("R is not positive definite".into()))?
        .solve(&rhs);
    let mut u = &model.equilibrium().u_f - step;
    model.bounds().clip(u.as_mut_slice());
    Ok(u)
}
