//! Fully connected tanh network with a linear output layer.
//!
//! Besides the forward pass this provides the exact input Jacobian, the
//! parameter gradient of `⟨seed, N(x)⟩`, and the parameter gradient of
//! `⟨G, ∂N/∂x(x)⟩` (forward-over-reverse), all batched over columns.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub w: DMatrix<f64>,
    pub b: DVector<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Layer>,
}

/// JSON form of one layer: weights as rows (`out × in`), biases.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerParams {
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<f64>,
}

#[inline]
fn dtanh(a: f64) -> f64 {
    1.0 - a * a
}

/// Activations of a batched forward pass; column `j` is sample `j`.
pub struct ForwardCache {
    /// `acts[0]` is the input, `acts[l]` the output of hidden layer `l`.
    pub acts: Vec<DMatrix<f64>>,
    pub output: DMatrix<f64>,
}

impl Mlp {
    pub fn zeros(sizes: &[usize]) -> Result<Self> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(Error::InvalidArgument(format!("invalid layer sizes {sizes:?}")));
        }
        Ok(Self {
            layers: sizes
                .windows(2)
                .map(|w| Layer {
                    w: DMatrix::zeros(w[1], w[0]),
                    b: DVector::zeros(w[1]),
                })
                .collect(),
        })
    }

    /// Uniform fan-in initialization: entries of layer `l` drawn from
    /// `U(−1/√fan_in, 1/√fan_in)`.
    pub fn random<R: Rng>(sizes: &[usize], rng: &mut R) -> Result<Self> {
        let mut net = Self::zeros(sizes)?;
        for layer in &mut net.layers {
            let bound = 1.0 / (layer.w.ncols() as f64).sqrt();
            for v in layer.w.iter_mut() {
                *v = rng.random_range(-bound..bound);
            }
            for v in layer.b.iter_mut() {
                *v = rng.random_range(-bound..bound);
            }
        }
        Ok(net)
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut s = vec![self.layers[0].w.ncols()];
        s.extend(self.layers.iter().map(|l| l.w.nrows()));
        s
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].w.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.w.nrows())
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.w.len() + l.b.len()).sum()
    }

    /// Flat parameter vector: per layer, weights row-major then biases.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            for i in 0..l.w.nrows() {
                out.extend(l.w.row(i).iter());
            }
            out.extend(l.b.iter());
        }
        out
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        check_dim("flat parameters", flat.len(), self.param_count())?;
        let mut k = 0;
        for l in &mut self.layers {
            let (r, c) = l.w.shape();
            for i in 0..r {
                for j in 0..c {
                    l.w[(i, j)] = flat[k];
                    k += 1;
                }
            }
            for i in 0..r {
                l.b[i] = flat[k];
                k += 1;
            }
        }
        Ok(())
    }

    pub fn to_params(&self) -> Vec<LayerParams> {
        self.layers
            .iter()
            .map(|l| LayerParams {
                weights: l.w.row_iter().map(|r| r.iter().copied().collect()).collect(),
                biases: l.b.iter().copied().collect(),
            })
            .collect()
    }

    pub fn from_params(layers: &[LayerParams]) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::InvalidArgument("network has no layers".into()));
        }
        let mut out = Vec::with_capacity(layers.len());
        let mut prev: Option<usize> = None;
        for (idx, lp) in layers.iter().enumerate() {
            let rows = lp.weights.len();
            let cols = lp.weights.first().map_or(0, |r| r.len());
            if rows == 0 || cols == 0 || lp.weights.iter().any(|r| r.len() != cols) {
                return Err(Error::Dimension(format!("layer {idx} weights are ragged or empty")));
            }
            check_dim(&format!("layer {idx} biases"), lp.biases.len(), rows)?;
            if let Some(p) = prev {
                check_dim(&format!("layer {idx} input"), cols, p)?;
            }
            prev = Some(rows);
            out.push(Layer {
                w: DMatrix::from_row_iterator(rows, cols, lp.weights.iter().flatten().copied()),
                b: DVector::from_column_slice(&lp.biases),
            });
        }
        Ok(Self { layers: out })
    }

    fn last(&self) -> usize {
        self.layers.len() - 1
    }

    pub fn forward(&self, x: &DVector<f64>) -> DVector<f64> {
        let mut a = x.clone();
        for (l, layer) in self.layers.iter().enumerate() {
            let mut z = layer.b.clone();
            z.gemv(1.0, &layer.w, &a, 1.0);
            if l < self.last() {
                z.apply(|v| *v = v.tanh());
            }
            a = z;
        }
        a
    }

    pub fn forward_batch(&self, x: &DMatrix<f64>) -> ForwardCache {
        let mut acts = Vec::with_capacity(self.layers.len());
        acts.push(x.clone());
        let mut output = DMatrix::zeros(0, 0);
        for (l, layer) in self.layers.iter().enumerate() {
            let prev = acts.last().expect("input present");
            let mut z = &layer.w * prev;
            for mut col in z.column_iter_mut() {
                col += &layer.b;
            }
            if l < self.last() {
                z.apply(|v| *v = v.tanh());
                acts.push(z);
            } else {
                output = z;
            }
        }
        ForwardCache { acts, output }
    }

    /// `∂N/∂x` at `x`, shape `out × in`.
    pub fn input_jacobian(&self, x: &DVector<f64>) -> DMatrix<f64> {
        self.forward_and_jacobian(x).1
    }

    pub fn forward_and_jacobian(&self, x: &DVector<f64>) -> (DVector<f64>, DMatrix<f64>) {
        let mut a = x.clone();
        let mut jac = DMatrix::<f64>::identity(x.len(), x.len());
        for (l, layer) in self.layers.iter().enumerate() {
            let mut z = layer.b.clone();
            z.gemv(1.0, &layer.w, &a, 1.0);
            jac = &layer.w * jac;
            if l < self.last() {
                z.apply(|v| *v = v.tanh());
                for (i, mut row) in jac.row_iter_mut().enumerate() {
                    row *= dtanh(z[i]);
                }
            }
            a = z;
        }
        (a, jac)
    }

    /// Gradient of `Σ_j ⟨seeds[:, j], N(x_j)⟩` with respect to every parameter,
    /// accumulated into `grad` (same shapes as `self`).
    pub fn backward_batch(&self, cache: &ForwardCache, seeds: &DMatrix<f64>, grad: &mut Mlp) {
        let mut delta = seeds.clone();
        for l in (0..self.layers.len()).rev() {
            let a_prev = &cache.acts[l];
            grad.layers[l].w.gemm(1.0, &delta, &a_prev.transpose(), 1.0);
            for col in delta.column_iter() {
                grad.layers[l].b += col;
            }
            if l == 0 {
                break;
            }
            let mut back = self.layers[l].w.transpose() * &delta;
            for (v, a) in back.iter_mut().zip(a_prev.iter()) {
                *v *= dtanh(*a);
            }
            delta = back;
        }
    }

    pub fn param_gradient(&self, x: &DVector<f64>, seed: &DVector<f64>) -> Result<Vec<f64>> {
        check_dim("network input", x.len(), self.input_dim())?;
        check_dim("seed", seed.len(), self.output_dim())?;
        let cache = self.forward_batch(&DMatrix::from_column_slice(x.len(), 1, x.as_slice()));
        let mut grad = Mlp::zeros(&self.sizes())?;
        self.backward_batch(&cache, &DMatrix::from_column_slice(seed.len(), 1, seed.as_slice()), &mut grad);
        Ok(grad.to_flat())
    }

    /// Gradient of `⟨G, ∂N/∂x(x)⟩ = Σ_{k,j} G[k,j] ∂N_k/∂x_j` with respect to
    /// every parameter, accumulated into `grad`. One tangent sweep per input
    /// direction with a nonzero column of `G`.
    pub fn jacobian_param_gradient(&self, x: &DVector<f64>, g: &DMatrix<f64>, grad: &mut Mlp) {
        let n_layers = self.layers.len();
        // Primal pass, shared by every direction.
        let mut acts: Vec<DVector<f64>> = Vec::with_capacity(n_layers);
        acts.push(x.clone());
        for layer in &self.layers[..n_layers - 1] {
            let mut z = layer.b.clone();
            z.gemv(1.0, &layer.w, acts.last().expect("input"), 1.0);
            z.apply(|v| *v = v.tanh());
            acts.push(z);
        }
        for j in 0..self.input_dim() {
            let c = g.column(j);
            if c.iter().all(|v| *v == 0.0) {
                continue;
            }
            // Tangent pass along e_j.
            let mut tans: Vec<DVector<f64>> = Vec::with_capacity(n_layers);
            let mut e = DVector::zeros(self.input_dim());
            e[j] = 1.0;
            tans.push(e);
            for (l, layer) in self.layers[..n_layers - 1].iter().enumerate() {
                let mut zdot = &layer.w * tans.last().expect("tangent");
                for (v, a) in zdot.iter_mut().zip(acts[l + 1].iter()) {
                    *v *= dtanh(*a);
                }
                tans.push(zdot);
            }
            // Reverse sweep of φ = cᵀ (W_L ȧ_{L−1}).
            let last = n_layers - 1;
            grad.layers[last].w.ger(1.0, &c, &tans[last], 1.0);
            let mut tan_bar = self.layers[last].w.tr_mul(&c);
            let mut act_bar = DVector::zeros(tan_bar.len());
            for l in (0..last).rev() {
                let a = &acts[l + 1];
                let zdot_lin: DVector<f64> = &self.layers[l].w * &tans[l];
                let mut zdot_bar = tan_bar.clone();
                let mut z_bar = act_bar.clone();
                for i in 0..a.len() {
                    let d1 = dtanh(a[i]);
                    let d2 = -2.0 * a[i] * d1;
                    zdot_bar[i] = d1 * tan_bar[i];
                    z_bar[i] = d1 * act_bar[i] + d2 * zdot_lin[i] * tan_bar[i];
                }
                grad.layers[l].w.ger(1.0, &zdot_bar, &tans[l], 1.0);
                grad.layers[l].w.ger(1.0, &z_bar, &acts[l], 1.0);
                grad.layers[l].b += &z_bar;
                if l > 0 {
                    tan_bar = self.layers[l].w.tr_mul(&zdot_bar);
                    act_bar = self.layers[l].w.tr_mul(&z_bar);
                }
            }
        }
    }
}

/// Evaluates the network. See [`Mlp::forward`].
pub fn mlp_forward(net: &Mlp, x: &DVector<f64>) -> Result<DVector<f64>> {
    check_dim("network input", x.len(), net.input_dim())?;
    Ok(net.forward(x))
}

pub fn mlp_input_jacobian(net: &Mlp, x: &DVector<f64>) -> Result<DMatrix<f64>> {
    check_dim("network input", x.len(), net.input_dim())?;
    Ok(net.input_jacobian(x))
}

pub fn mlp_param_gradient(net: &Mlp, x: &DVector<f64>, seed: &DVector<f64>) -> Result<Vec<f64>> {
    net.param_gradient(x, seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::fd_jacobian;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn net(sizes: &[usize], seed: u64) -> Mlp {
        Mlp::random(sizes, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
    }

    #[test]
    fn zero_network_and_linear_layer() {
        let z = Mlp::zeros(&[3, 4, 2]).unwrap();
        let x = DVector::from_vec(vec![0.1, -0.2, 0.3]);
        assert_eq!(z.forward(&x), DVector::zeros(2));
        assert_eq!(z.input_jacobian(&x), DMatrix::zeros(2, 3));

        let lin = net(&[3, 2], 1);
        let w = &lin.layers[0].w;
        let b = &lin.layers[0].b;
        assert!((lin.forward(&x) - (w * &x + b)).amax() < 1e-15);
        assert_eq!(lin.input_jacobian(&x), *w);
        let seed = DVector::from_vec(vec![2.0, -1.0]);
        let g = lin.param_gradient(&x, &seed).unwrap();
        // Weight gradient s xᵀ (row-major), then bias gradient s.
        let expect = [0.2, -0.4, 0.6, -0.1, 0.2, -0.3, 2.0, -1.0];
        for (a, e) in g.iter().zip(expect) {
            assert!((a - e).abs() < 1e-15);
        }
        assert!(lin.param_gradient(&x, &DVector::zeros(2)).unwrap().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn output_bounded_by_last_affine_layer() {
        let n = net(&[2, 8, 8, 3], 5);
        let last = n.layers.last().unwrap();
        for k in 0..20 {
            let x = DVector::from_vec(vec![(k as f64).sin() * 5.0, (k as f64).cos() * 5.0]);
            let y = n.forward(&x);
            for i in 0..3 {
                let bound = last.w.row(i).iter().map(|v| v.abs()).sum::<f64>() + last.b[i].abs();
                assert!(y[i].abs() <= bound);
            }
        }
    }

    #[test]
    fn input_jacobian_matches_finite_differences() {
        let n = net(&[3, 6, 6, 2], 9);
        for k in 0..5 {
            let x = DVector::from_vec(vec![0.3 * k as f64 - 0.6, 0.5, -0.2 * k as f64]);
            let j = n.input_jacobian(&x);
            let fd = fd_jacobian(&x, 1e-6, |xp| n.forward(xp));
            assert!((j - fd).amax() < 1e-8);
        }
    }

    #[test]
    fn flat_and_json_round_trip() {
        let n = net(&[3, 5, 2], 2);
        let mut m = Mlp::zeros(&[3, 5, 2]).unwrap();
        m.set_flat(&n.to_flat()).unwrap();
        assert_eq!(m, n);
        assert_eq!(Mlp::from_params(&n.to_params()).unwrap(), n);
        assert_eq!(n.param_count(), 3 * 5 + 5 + 5 * 2 + 2);
    }

    #[test]
    fn parameter_gradient_matches_finite_differences() {
        let n = net(&[3, 5, 4, 2], 3);
        let x = DVector::from_vec(vec![0.4, -0.7, 0.1]);
        let seed = DVector::from_vec(vec![0.8, -1.3]);
        let g = n.param_gradient(&x, &seed).unwrap();
        let flat = n.to_flat();
        let f = |p: &[f64]| {
            let mut m = n.clone();
            m.set_flat(p).unwrap();
            m.forward(&x).dot(&seed)
        };
        for k in 0..flat.len() {
            let h = 1e-6;
            let mut p = flat.clone();
            p[k] += h;
            let fp = f(&p);
            p[k] -= 2.0 * h;
            let fm = f(&p);
            assert!(((fp - fm) / (2.0 * h) - g[k]).abs() < 1e-8);
        }
    }

    #[test]
    fn jacobian_gradient_matches_finite_differences() {
        let n = net(&[3, 5, 4, 2], 4);
        let x = DVector::from_vec(vec![0.2, 0.5, -0.9]);
        let gmat = DMatrix::from_row_slice(2, 3, &[0.3, -1.0, 0.7, 1.1, 0.0, -0.4]);
        let mut grad = Mlp::zeros(&n.sizes()).unwrap();
        n.jacobian_param_gradient(&x, &gmat, &mut grad);
        let g = grad.to_flat();
        let flat = n.to_flat();
        let f = |p: &[f64]| {
            let mut m = n.clone();
            m.set_flat(p).unwrap();
            m.input_jacobian(&x).component_mul(&gmat).sum()
        };
        for k in 0..flat.len() {
            let h = 1e-6;
            let mut p = flat.clone();
            p[k] += h;
            let fp = f(&p);
            p[k] -= 2.0 * h;
            let fm = f(&p);
            assert!(((fp - fm) / (2.0 * h) - g[k]).abs() < 1e-7, "param {k}");
        }
    }
}
