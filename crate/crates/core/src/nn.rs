//! Minimal dense layers with hand-written backward passes.
//!
//! Every trainable model in the crate is a handful of affine maps and
//! pointwise nonlinearities, so the layers here keep both directions
//! explicit: `forward` returns activations, `backward` accumulates parameter
//! gradients into a gradient structure of the same shape and returns the
//! gradient with respect to the input.

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

pub type Mat = DMatrix<f64>;

/// Affine map `y = x W + b` applied row-wise.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    /// `input × output`
    pub weight: Mat,
    /// `1 × output`
    pub bias: Mat,
}

impl Linear {
    /// Uniform init in `±1/sqrt(input)`, zero bias.
    pub fn new<R: Rng + ?Sized>(input: usize, output: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (input.max(1) as f64).sqrt();
        Self::uniform(input, output, bound, rng)
    }

    pub fn uniform<R: Rng + ?Sized>(input: usize, output: usize, bound: f64, rng: &mut R) -> Self {
        let weight = if bound > 0.0 {
            let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
            Mat::from_fn(input, output, |_, _| dist.sample(rng))
        } else {
            Mat::zeros(input, output)
        };
        Self {
            weight,
            bias: Mat::zeros(1, output),
        }
    }

    pub fn zeros(input: usize, output: usize) -> Self {
        Self {
            weight: Mat::zeros(input, output),
            bias: Mat::zeros(1, output),
        }
    }

    pub fn identity(width: usize) -> Self {
        Self {
            weight: Mat::identity(width, width),
            bias: Mat::zeros(1, width),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.nrows()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.ncols()
    }

    pub fn forward(&self, x: &Mat) -> Mat {
        let mut y = x * &self.weight;
        for mut row in y.row_iter_mut() {
            row += &self.bias;
        }
        y
    }

    /// Accumulates `dL/dW`, `dL/db` into `grad` and returns `dL/dx`.
    pub fn backward(&self, x: &Mat, grad_out: &Mat, grad: &mut Linear) -> Mat {
        grad.weight.gemm_tr(1.0, x, grad_out, 1.0);
        for row in grad_out.row_iter() {
            grad.bias += row;
        }
        grad_out * self.weight.transpose()
    }

    pub fn tensors(&self) -> [&Mat; 2] {
        [&self.weight, &self.bias]
    }

    pub fn tensors_mut(&mut self) -> [&mut Mat; 2] {
        [&mut self.weight, &mut self.bias]
    }
}

/// Pointwise nonlinearity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Silu,
    Tanh,
    Identity,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Silu => x * sigmoid(x),
            Activation::Tanh => x.tanh(),
            Activation::Identity => x,
        }
    }

    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Silu => {
                let s = sigmoid(x);
                s * (1.0 + x * (1.0 - s))
            }
            Activation::Tanh => 1.0 - x.tanh().powi(2),
            Activation::Identity => 1.0,
        }
    }

    pub fn forward(self, pre: &Mat) -> Mat {
        pre.map(|x| self.apply(x))
    }

    /// `pre` is the input the activation saw during `forward`.
    pub fn backward(self, pre: &Mat, grad_out: &Mat) -> Mat {
        pre.zip_map(grad_out, |x, g| g * self.derivative(x))
    }
}

/// Numerically stable softmax of one row.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Anything that exposes an ordered list of named trainable tensors.
///
/// The order is part of the contract: flattening, optimizers, finite
/// differences and checkpoints all walk tensors in this order.
pub trait Parameters {
    fn tensors(&self) -> Vec<(String, &Mat)>;
    fn tensors_mut(&mut self) -> Vec<&mut Mat>;

    fn num_parameters(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_parameters());
        for (_, t) in self.tensors() {
            out.extend(t.iter());
        }
        out
    }

    fn assign_flat(&mut self, flat: &[f64]) {
        let mut offset = 0;
        for t in self.tensors_mut() {
            let n = t.len();
            t.as_mut_slice().copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        assert_eq!(offset, flat.len(), "flat parameter length mismatch");
    }

    fn fill_zero(&mut self) {
        for t in self.tensors_mut() {
            t.fill(0.0);
        }
    }

    fn all_finite(&self) -> bool {
        self.tensors()
            .iter()
            .all(|(_, t)| t.iter().all(|v| v.is_finite()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerKind {
    /// Heavy-ball gradient descent; weight decay enters as an L2 term.
    Momentum { momentum: f64 },
    /// Adam with decoupled weight decay.
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    #[serde(flatten)]
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    pub weight_decay: f64,
}

impl OptimizerConfig {
    pub fn momentum(learning_rate: f64, momentum: f64, weight_decay: f64) -> Self {
        Self {
            kind: OptimizerKind::Momentum { momentum },
            learning_rate,
            weight_decay,
        }
    }

    pub fn adam(learning_rate: f64, weight_decay: f64) -> Self {
        Self {
            kind: OptimizerKind::Adam {
                beta1: 0.9,
                beta2: 0.999,
                eps: 1e-8,
            },
            learning_rate,
            weight_decay,
        }
    }
}

/// Optimizer state shaped after a particular parameter set.
#[derive(Debug, Clone)]
pub struct Optimizer {
    config: OptimizerConfig,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
    steps: u64,
}

impl Optimizer {
    pub fn new<P: Parameters + ?Sized>(config: OptimizerConfig, params: &P) -> Self {
        let shapes: Vec<usize> = params.tensors().iter().map(|(_, t)| t.len()).collect();
        let second = match config.kind {
            OptimizerKind::Adam { .. } => shapes.iter().map(|&n| vec![0.0; n]).collect(),
            OptimizerKind::Momentum { .. } => Vec::new(),
        };
        Self {
            config,
            first: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            second,
            steps: 0,
        }
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.config
    }

    pub fn set_learning_rate(&mut self, lr: f64) {
        self.config.learning_rate = lr;
    }

    pub fn step<P: Parameters + ?Sized, G: Parameters + ?Sized>(&mut self, params: &mut P, grads: &G) {
        self.steps += 1;
        let lr = self.config.learning_rate;
        let wd = self.config.weight_decay;
        let grads = grads.tensors();
        for (i, p) in params.tensors_mut().into_iter().enumerate() {
            let g = grads[i].1;
            let m = &mut self.first[i];
            match self.config.kind {
                OptimizerKind::Momentum { momentum } => {
                    for ((pv, gv), mv) in p.iter_mut().zip(g.iter()).zip(m.iter_mut()) {
                        let grad = gv + wd * *pv;
                        *mv = momentum * *mv + grad;
                        *pv -= lr * *mv;
                    }
                }
                OptimizerKind::Adam { beta1, beta2, eps } => {
                    let v = &mut self.second[i];
                    let bc1 = 1.0 - beta1.powi(self.steps as i32);
                    let bc2 = 1.0 - beta2.powi(self.steps as i32);
                    for (((pv, gv), mv), vv) in
                        p.iter_mut().zip(g.iter()).zip(m.iter_mut()).zip(v.iter_mut())
                    {
                        *mv = beta1 * *mv + (1.0 - beta1) * gv;
                        *vv = beta2 * *vv + (1.0 - beta2) * gv * gv;
                        let mhat = *mv / bc1;
                        let vhat = *vv / bc2;
                        *pv -= lr * (mhat / (vhat.sqrt() + eps) + wd * *pv);
                    }
                }
            }
        }
    }
}

/// Central finite-difference gradient of `loss` at `params`.
pub fn finite_difference<P, F>(params: &P, step: f64, indices: &[usize], mut loss: F) -> Vec<f64>
where
    P: Parameters + Clone,
    F: FnMut(&P) -> f64,
{
    let base = params.flatten();
    let mut probe = params.clone();
    let mut out = Vec::with_capacity(indices.len());
    for &i in indices {
        let mut flat = base.clone();
        flat[i] = base[i] + step;
        probe.assign_flat(&flat);
        let plus = loss(&probe);
        flat[i] = base[i] - step;
        probe.assign_flat(&flat);
        let minus = loss(&probe);
        out.push((plus - minus) / (2.0 * step));
    }
    out
}

/// `|a - b| / max(|a|, |b|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[derive(Clone)]
    struct One(Linear);

    impl Parameters for One {
        fn tensors(&self) -> Vec<(String, &Mat)> {
            vec![("w".into(), &self.0.weight), ("b".into(), &self.0.bias)]
        }
        fn tensors_mut(&mut self) -> Vec<&mut Mat> {
            let [w, b] = self.0.tensors_mut();
            vec![w, b]
        }
    }

    #[test]
    fn linear_gradient_is_exact_for_linear_objective() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let layer = One(Linear::new(4, 3, &mut rng));
        let x = Mat::from_fn(5, 4, |i, j| (i as f64 * 0.3 - j as f64 * 0.7).sin());
        let coef = Mat::from_fn(5, 3, |i, j| (i + 2 * j) as f64 * 0.1 - 0.4);
        let objective = |p: &One| p.0.forward(&x).component_mul(&coef).sum();

        let mut grad = One(Linear::zeros(4, 3));
        layer.0.backward(&x, &coef, &mut grad.0);
        let analytic = grad.flatten();
        let idx: Vec<usize> = (0..analytic.len()).collect();
        let numeric = finite_difference(&layer, 1e-4, &idx, objective);
        for (a, n) in analytic.iter().zip(&numeric) {
            assert!(relative_error(*a, *n, 1e-6) < 1e-8, "{a} vs {n}");
        }
    }

    #[test]
    fn activation_derivatives_match_finite_differences() {
        for act in [Activation::Silu, Activation::Tanh, Activation::Identity] {
            for &x in &[-2.5, -0.3, 0.0, 0.7, 3.1] {
                let h = 1e-5;
                let fd = (act.apply(x + h) - act.apply(x - h)) / (2.0 * h);
                assert!((fd - act.derivative(x)).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let p = softmax(&[0.0; 4]);
        assert!(p.iter().all(|&v| (v - 0.25).abs() < 1e-15));
    }

    #[test]
    fn optimizers_minimize_quadratic() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut p = One(Linear::new(2, 2, &mut rng));
        let mut opt = Optimizer::new(OptimizerConfig::adam(0.01, 0.0), &p);
        for _ in 0..3000 {
            let mut g = p.clone();
            for t in g.tensors_mut() {
                t.iter_mut().for_each(|v| *v *= 2.0);
            }
            opt.step(&mut p, &g);
        }
        assert!(p.flatten().iter().all(|v| v.abs() < 2e-2));

        let mut q = One(Linear::new(2, 2, &mut rng));
        let mut opt = Optimizer::new(OptimizerConfig::momentum(0.01, 0.9, 0.0), &q);
        for _ in 0..2000 {
            let mut g = q.clone();
            for t in g.tensors_mut() {
                t.iter_mut().for_each(|v| *v *= 2.0);
            }
            opt.step(&mut q, &g);
        }
        assert!(q.flatten().iter().all(|v| v.abs() < 1e-6));
    }
}
