//! Scalar-output action-value network `Q(s, a)`.
//!
//! A fully connected rectifier network fed with the observation vector and
//! the action (divided by `a_max`). The network is generic over the float
//! type: `f64` is the reference precision, `f32` a faster training mode.

use std::fmt::Debug;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;

use crate::station::ActionSet;

pub trait Scalar:
    ndarray::LinalgScalar + num_traits::Float + Debug + Send + Sync + Default + 'static
{
    fn from_real(x: f64) -> Self;
    fn to_real(self) -> f64;
}

impl Scalar for f64 {
    fn from_real(x: f64) -> Self {
        x
    }
    fn to_real(self) -> f64 {
        self
    }
}

impl Scalar for f32 {
    fn from_real(x: f64) -> Self {
        x as f32
    }
    fn to_real(self) -> f64 {
        self as f64
    }
}

pub const DEFAULT_HIDDEN: [usize; 3] = [256, 128, 64];

#[derive(Debug, Clone, PartialEq)]
pub struct Dense<F> {
    /// `in x out`
    pub weights: Array2<F>,
    pub bias: Array1<F>,
}

impl<F: Scalar> Dense<F> {
    pub fn zeros(n_in: usize, n_out: usize) -> Self {
        Self { weights: Array2::zeros((n_in, n_out)), bias: Array1::zeros(n_out) }
    }

    pub fn shape(&self) -> (usize, usize) {
        self.weights.dim()
    }

    fn affine(&self, x: &ArrayView2<F>) -> Array2<F> {
        let mut z = x.dot(&self.weights);
        for mut row in z.rows_mut() {
            row.zip_mut_with(&self.bias, |a, &b| *a = *a + b);
        }
        z
    }
}

/// Parameters of the online network.
#[derive(Debug, Clone, PartialEq)]
pub struct QNetwork<F = f64> {
    layers: Vec<Dense<F>>,
}

/// Frozen copy used for bootstrap targets.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetNetwork<F = f64>(QNetwork<F>);

impl<F> std::ops::Deref for TargetNetwork<F> {
    type Target = QNetwork<F>;
    fn deref(&self) -> &QNetwork<F> {
        &self.0
    }
}

pub fn sync_target<F: Clone>(net: &QNetwork<F>) -> TargetNetwork<F> {
    TargetNetwork(net.clone())
}

/// Gradient with the same layout as the network.
#[derive(Debug, Clone)]
pub struct Gradient<F> {
    pub layers: Vec<Dense<F>>,
}

impl<F: Scalar> Gradient<F> {
    pub fn scale(&mut self, k: f64) {
        let k = F::from_real(k);
        for l in &mut self.layers {
            l.weights.mapv_inplace(|g| g * k);
            l.bias.mapv_inplace(|g| g * k);
        }
    }

    pub fn norm(&self) -> f64 {
        self.layers
            .iter()
            .map(|l| {
                l.weights.iter().chain(l.bias.iter()).map(|g| g.to_real().powi(2)).sum::<f64>()
            })
            .sum::<f64>()
            .sqrt()
    }

    pub fn to_vec(&self) -> Vec<f64> {
        flatten(&self.layers)
    }
}

fn flatten<F: Scalar>(layers: &[Dense<F>]) -> Vec<f64> {
    let mut out = Vec::new();
    for l in layers {
        out.extend(l.weights.iter().map(|w| w.to_real()));
        out.extend(l.bias.iter().map(|b| b.to_real()));
    }
    out
}

impl<F: Scalar> QNetwork<F> {
    /// Layer sizes `[input, hidden.., 1]`, weights drawn uniformly from
    /// `+-sqrt(6 / fan_in)`, zero biases.
    pub fn new<R: Rng + ?Sized>(n_inputs: usize, hidden: &[usize], rng: &mut R) -> Self {
        let mut sizes = vec![n_inputs];
        sizes.extend_from_slice(hidden);
        sizes.push(1);
        let layers = sizes
            .windows(2)
            .map(|w| {
                let bound = (6.0 / w[0] as f64).sqrt();
                let weights = Array2::from_shape_simple_fn((w[0], w[1]), || {
                    F::from_real(rng.random_range(-bound..bound))
                });
                Dense { weights, bias: Array1::zeros(w[1]) }
            })
            .collect();
        Self { layers }
    }

    pub fn from_layers(layers: Vec<Dense<F>>) -> Self {
        assert!(!layers.is_empty());
        for w in layers.windows(2) {
            assert_eq!(w[0].shape().1, w[1].shape().0, "layer shapes do not chain");
        }
        assert_eq!(layers.last().unwrap().shape().1, 1, "output layer must be scalar");
        Self { layers }
    }

    pub fn layers(&self) -> &[Dense<F>] {
        &self.layers
    }

    pub fn n_inputs(&self) -> usize {
        self.layers[0].shape().0
    }

    /// `[input, hidden.., 1]`
    pub fn architecture(&self) -> Vec<usize> {
        let mut v = vec![self.n_inputs()];
        v.extend(self.layers.iter().map(|l| l.shape().1));
        v
    }

    pub fn n_params(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    pub fn params_to_vec(&self) -> Vec<f64> {
        flatten(&self.layers)
    }

    pub fn set_params(&mut self, values: &[f64]) {
        assert_eq!(values.len(), self.n_params());
        let mut it = values.iter();
        for l in &mut self.layers {
            for w in l.weights.iter_mut().chain(l.bias.iter_mut()) {
                *w = F::from_real(*it.next().unwrap());
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().all(|l| l.weights.iter().chain(l.bias.iter()).all(|w| w.is_finite()))
    }

    pub fn cast<G: Scalar>(&self) -> QNetwork<G> {
        QNetwork {
            layers: self
                .layers
                .iter()
                .map(|l| Dense {
                    weights: l.weights.mapv(|w| G::from_real(w.to_real())),
                    bias: l.bias.mapv(|b| G::from_real(b.to_real())),
                })
                .collect(),
        }
    }

    /// Q-values for a batch of input rows (`n x n_inputs`).
    pub fn forward(&self, x: ArrayView2<F>) -> Array1<F> {
        assert_eq!(x.ncols(), self.n_inputs(), "input width");
        let mut a = self.layers[0].affine(&x);
        for layer in &self.layers[1..] {
            a.mapv_inplace(relu);
            a = layer.affine(&a.view());
        }
        a.column(0).to_owned()
    }

    /// Mean squared error against `targets` and its gradient.
    pub fn loss_and_gradient(&self, x: ArrayView2<F>, targets: &[F]) -> (f64, Gradient<F>) {
        let n = x.nrows();
        assert_eq!(targets.len(), n);
        assert!(n > 0, "empty batch");
        // forward, keeping every layer's pre-activation
        let mut pre: Vec<Array2<F>> = Vec::with_capacity(self.layers.len());
        let mut act: Vec<Array2<F>> = Vec::with_capacity(self.layers.len());
        let mut input = x.to_owned();
        for (k, layer) in self.layers.iter().enumerate() {
            let z = layer.affine(&input.view());
            let next = if k + 1 < self.layers.len() { z.mapv(relu) } else { z.clone() };
            act.push(input);
            pre.push(z);
            input = next;
        }
        let out = pre.last().unwrap();
        let two_over_n = F::from_real(2.0 / n as f64);
        let mut loss = 0.0;
        let mut delta = Array2::<F>::zeros((n, 1));
        for i in 0..n {
            let err = out[[i, 0]] - targets[i];
            loss += err.to_real().powi(2);
            delta[[i, 0]] = err * two_over_n;
        }
        loss /= n as f64;
        let mut grads: Vec<Dense<F>> = Vec::with_capacity(self.layers.len());
        for k in (0..self.layers.len()).rev() {
            let dw = act[k].t().dot(&delta);
            let db = delta.sum_axis(Axis(0));
            if k > 0 {
                let mut da = delta.dot(&self.layers[k].weights.t());
                ndarray::Zip::from(&mut da).and(&pre[k - 1]).for_each(|d, &z| {
                    if z <= F::zero() {
                        *d = F::zero();
                    }
                });
                delta = da;
            }
            grads.push(Dense { weights: dw, bias: db });
        }
        grads.reverse();
        (loss, Gradient { layers: grads })
    }

    /// `theta <- theta - lr * grad`
    pub fn apply_gradient(&mut self, grad: &Gradient<F>, lr: f64) {
        let lr = F::from_real(lr);
        for (l, g) in self.layers.iter_mut().zip(&grad.layers) {
            l.weights.scaled_add(-lr, &g.weights);
            l.bias.scaled_add(-lr, &g.bias);
        }
    }

    /// Value of one observation/action pair.
    pub fn q_value(&self, features: &[f64], action: f64, a_max: f64) -> f64 {
        let x = input_rows(&[(features, &[action][..])], a_max, self.n_inputs());
        self.forward(x.view())[0].to_real()
    }

    /// Q over every action of a set, in set order.
    pub fn q_values(&self, features: &[f64], actions: &ActionSet, a_max: f64) -> Vec<f64> {
        let acts: Vec<f64> = actions.iter().collect();
        let x = input_rows(&[(features, &acts[..])], a_max, self.n_inputs());
        self.forward(x.view()).iter().map(|q| q.to_real()).collect()
    }

    /// Best action of a feasible set; see [`better`] for tie-breaking.
    pub fn best_action(&self, features: &[f64], actions: &ActionSet, a_max: f64) -> (f64, f64) {
        self.best_actions(&[(features, *actions)], a_max)[0]
    }

    /// Batched [`QNetwork::best_action`]: a single forward pass over every
    /// `(observation, action)` pair of every query.
    pub fn best_actions(&self, queries: &[(&[f64], ActionSet)], a_max: f64) -> Vec<(f64, f64)> {
        if queries.is_empty() {
            return Vec::new();
        }
        let acts: Vec<Vec<f64>> = queries.iter().map(|(_, s)| s.iter().collect()).collect();
        let pairs: Vec<(&[f64], &[f64])> =
            queries.iter().zip(&acts).map(|((f, _), a)| (*f, a.as_slice())).collect();
        let x = input_rows(&pairs, a_max, self.n_inputs());
        let q = self.forward(x.view());
        let mut out = Vec::with_capacity(queries.len());
        let mut row = 0;
        for a in &acts {
            let mut best = (a[0], q[row].to_real());
            for (k, &action) in a.iter().enumerate().skip(1) {
                let v = q[row + k].to_real();
                if better((action, v), best) {
                    best = (action, v);
                }
            }
            row += a.len();
            out.push(best);
        }
        out
    }
}

/// Candidate beats incumbent on higher value; exact ties go to the smaller
/// `|a|`, then to the discharging action.
pub fn better(candidate: (f64, f64), incumbent: (f64, f64)) -> bool {
    let (a, q) = candidate;
    let (b, r) = incumbent;
    if q != r {
        return q > r;
    }
    if a.abs() != b.abs() {
        return a.abs() < b.abs();
    }
    a < b
}

fn relu<F: Scalar>(z: F) -> F {
    if z > F::zero() {
        z
    } else {
        F::zero()
    }
}

/// Stacks `[features, action / a_max]` rows for every action of every query.
pub fn input_rows<F: Scalar>(queries: &[(&[f64], &[f64])], a_max: f64, width: usize) -> Array2<F> {
    let n: usize = queries.iter().map(|(_, a)| a.len()).sum();
    let mut x = Array2::<F>::zeros((n, width));
    let mut row = 0;
    for (features, actions) in queries {
        assert_eq!(features.len() + 1, width, "observation length does not match network input");
        for &a in actions.iter() {
            let mut r = x.row_mut(row);
            for (dst, &src) in r.iter_mut().zip(features.iter()) {
                *dst = F::from_real(src);
            }
            r[width - 1] = F::from_real(a / a_max);
            row += 1;
        }
    }
    x
}
