//! Desk-scale trainable binary classifiers with hand-written backprop.
//!
//! Every kind ends in a single sigmoid unit and is trained with plain
//! mini-batch SGD on binary cross-entropy.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{NnError, Tensor};

pub const MLP_HIDDEN: usize = 16;
pub const CNN_FILTERS: usize = 4;
pub const CNN_KERNEL: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Logreg,
    Mlp,
    TinyCnn,
}

impl ModelKind {
    pub const ALL: [ModelKind; 3] = [ModelKind::Logreg, ModelKind::Mlp, ModelKind::TinyCnn];

    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Logreg => "logreg",
            ModelKind::Mlp => "mlp",
            ModelKind::TinyCnn => "tiny_cnn",
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ModelKind {
    type Err = NnError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        ModelKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| NnError::UnknownModel(s.to_string()))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Hyperparams {
    pub learning_rate: f64,
    pub batch_size: usize,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Hyperparams {
            learning_rate: 0.1,
            batch_size: 16,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainableModel {
    kind: ModelKind,
    input_dim: usize,
    parameters: Vec<Tensor>,
    hyperparams: Hyperparams,
    shuffle_seed: u64,
    epochs_trained: u64,
}

/// Side length of the square image a tiny CNN expects for `input_dim`.
fn cnn_side(input_dim: usize) -> Result<usize, NnError> {
    let side = (input_dim as f64).sqrt().round() as usize;
    if side * side != input_dim || side < CNN_KERNEL {
        return Err(NnError::InvalidInputDim {
            kind: ModelKind::TinyCnn,
            input_dim,
        });
    }
    Ok(side)
}

fn sigmoid(z: f64) -> f64 {
    let p = if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    };
    // Keep the probability strictly inside (0, 1).
    p.clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON / 2.0)
}

/// Binary cross-entropy of a logit, `softplus(z) - y·z`.
fn bce_from_logit(z: f64, y: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p() - y * z
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

impl TrainableModel {
    /// Uniform(±1/√fan_in) weights, zero biases, fully determined by `seed`.
    pub fn init(
        kind: ModelKind,
        input_dim: usize,
        seed: u64,
        hyperparams: Hyperparams,
    ) -> Result<Self, NnError> {
        if input_dim == 0 {
            return Err(NnError::InvalidInputDim { kind, input_dim });
        }
        if !(hyperparams.learning_rate >= 0.0 && hyperparams.learning_rate.is_finite())
            || hyperparams.batch_size == 0
        {
            return Err(NnError::InvalidHyperparams);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut uniform = |shape: Vec<usize>, fan_in: usize| -> Result<Tensor, NnError> {
            let bound = 1.0 / (fan_in as f64).sqrt();
            let len = shape.iter().product();
            let data = (0..len).map(|_| rng.random_range(-bound..bound)).collect();
            Tensor::new(shape, data)
        };
        let parameters = match kind {
            ModelKind::Logreg => vec![uniform(vec![input_dim], input_dim)?, Tensor::zeros(vec![1])?],
            ModelKind::Mlp => vec![
                uniform(vec![MLP_HIDDEN, input_dim], input_dim)?,
                Tensor::zeros(vec![MLP_HIDDEN])?,
                uniform(vec![MLP_HIDDEN], MLP_HIDDEN)?,
                Tensor::zeros(vec![1])?,
            ],
            ModelKind::TinyCnn => {
                let side = cnn_side(input_dim)?;
                let out = side - CNN_KERNEL + 1;
                let dense_in = CNN_FILTERS * out * out;
                vec![
                    uniform(vec![CNN_FILTERS, CNN_KERNEL, CNN_KERNEL], CNN_KERNEL * CNN_KERNEL)?,
                    Tensor::zeros(vec![CNN_FILTERS])?,
                    uniform(vec![dense_in], dense_in)?,
                    Tensor::zeros(vec![1])?,
                ]
            }
        };
        Ok(TrainableModel {
            kind,
            input_dim,
            parameters,
            hyperparams,
            shuffle_seed: seed,
            epochs_trained: 0,
        })
    }

    pub fn kind(&self) -> ModelKind {
        self.kind
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn parameters(&self) -> &[Tensor] {
        &self.parameters
    }

    pub fn hyperparams(&self) -> &Hyperparams {
        &self.hyperparams
    }

    pub fn shuffle_seed(&self) -> u64 {
        self.shuffle_seed
    }

    pub fn epochs_trained(&self) -> u64 {
        self.epochs_trained
    }

    pub fn with_shuffle_seed(mut self, seed: u64) -> Self {
        self.shuffle_seed = seed;
        self
    }

    pub fn with_epochs_trained(mut self, epochs: u64) -> Self {
        self.epochs_trained = epochs;
        self
    }

    /// Replaces the parameters, keeping everything else. Shapes must match.
    pub fn with_parameters(mut self, parameters: Vec<Tensor>) -> Result<Self, NnError> {
        if parameters.len() != self.parameters.len()
            || parameters
                .iter()
                .zip(&self.parameters)
                .any(|(a, b)| a.shape() != b.shape())
        {
            return Err(NnError::ParameterLayout);
        }
        if parameters.iter().any(|t| !t.is_finite()) {
            return Err(NnError::NonFinite);
        }
        self.parameters = parameters;
        Ok(self)
    }

    fn check_input(&self, x: &[f64]) -> Result<(), NnError> {
        if x.len() != self.input_dim {
            return Err(NnError::ShapeMismatch {
                expected: self.input_dim,
                got: x.len(),
            });
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(NnError::NonFinite);
        }
        Ok(())
    }

    /// Probability of class 1.
    pub fn forward(&self, x: &[f64]) -> Result<f64, NnError> {
        self.check_input(x)?;
        Ok(sigmoid(self.pass(x, None).0))
    }

    pub fn predict_proba<X: AsRef<[f64]>>(&self, xs: &[X]) -> Result<Vec<f64>, NnError> {
        xs.iter().map(|x| self.forward(x.as_ref())).collect()
    }

    /// Loss of one sample as a function of the parameters.
    pub fn loss(&self, x: &[f64], y: u8) -> Result<f64, NnError> {
        self.check_input(x)?;
        let y = label_value(y)?;
        Ok(bce_from_logit(self.pass(x, None).0, y))
    }

    /// Single-sample BCE loss and its gradient for every parameter tensor.
    pub fn loss_and_gradient(&self, x: &[f64], y: u8) -> Result<(f64, Vec<Tensor>), NnError> {
        self.check_input(x)?;
        let y = label_value(y)?;
        let (z, grads) = self.pass(x, Some(y));
        Ok((bce_from_logit(z, y), grads.expect("gradient requested")))
    }

    /// Forward pass returning the logit; with a label, also backpropagates.
    fn pass(&self, x: &[f64], label: Option<f64>) -> (f64, Option<Vec<Tensor>>) {
        let p = &self.parameters;
        match self.kind {
            ModelKind::Logreg => {
                let w = p[0].data();
                let z = dot(w, x) + p[1].data()[0];
                let grads = label.map(|y| {
                    let dz = sigmoid(z) - y;
                    vec![
                        tensor_like(&p[0], x.iter().map(|v| dz * v).collect()),
                        tensor_like(&p[1], vec![dz]),
                    ]
                });
                (z, grads)
            }
            ModelKind::Mlp => {
                let d = self.input_dim;
                let (w1, b1, w2) = (p[0].data(), p[1].data(), p[2].data());
                let hidden: Vec<f64> = (0..MLP_HIDDEN)
                    .map(|j| (dot(&w1[j * d..(j + 1) * d], x) + b1[j]).tanh())
                    .collect();
                let z = dot(w2, &hidden) + p[3].data()[0];
                let grads = label.map(|y| {
                    let dz = sigmoid(z) - y;
                    let da: Vec<f64> = hidden
                        .iter()
                        .zip(w2)
                        .map(|(h, w)| dz * w * (1.0 - h * h))
                        .collect();
                    let mut gw1 = Vec::with_capacity(MLP_HIDDEN * d);
                    for &daj in &da {
                        gw1.extend(x.iter().map(|xi| daj * xi));
                    }
                    vec![
                        tensor_like(&p[0], gw1),
                        tensor_like(&p[1], da),
                        tensor_like(&p[2], hidden.iter().map(|h| dz * h).collect()),
                        tensor_like(&p[3], vec![dz]),
                    ]
                });
                (z, grads)
            }
            ModelKind::TinyCnn => {
                let side = cnn_side(self.input_dim).expect("validated at init");
                let out = side - CNN_KERNEL + 1;
                let (kernels, kbias, w) = (p[0].data(), p[1].data(), p[2].data());
                let kk = CNN_KERNEL * CNN_KERNEL;
                let mut act = vec![0.0; CNN_FILTERS * out * out];
                for f in 0..CNN_FILTERS {
                    let k = &kernels[f * kk..(f + 1) * kk];
                    for r in 0..out {
                        for c in 0..out {
                            let mut s = kbias[f];
                            for u in 0..CNN_KERNEL {
                                let row = (r + u) * side + c;
                                for v in 0..CNN_KERNEL {
                                    s += k[u * CNN_KERNEL + v] * x[row + v];
                                }
                            }
                            act[(f * out + r) * out + c] = s.tanh();
                        }
                    }
                }
                let z = dot(w, &act) + p[3].data()[0];
                let grads = label.map(|y| {
                    let dz = sigmoid(z) - y;
                    let mut gk = vec![0.0; CNN_FILTERS * kk];
                    let mut gkb = vec![0.0; CNN_FILTERS];
                    for f in 0..CNN_FILTERS {
                        for r in 0..out {
                            for c in 0..out {
                                let i = (f * out + r) * out + c;
                                let dconv = dz * w[i] * (1.0 - act[i] * act[i]);
                                gkb[f] += dconv;
                                for u in 0..CNN_KERNEL {
                                    let row = (r + u) * side + c;
                                    for v in 0..CNN_KERNEL {
                                        gk[f * kk + u * CNN_KERNEL + v] += dconv * x[row + v];
                                    }
                                }
                            }
                        }
                    }
                    vec![
                        tensor_like(&p[0], gk),
                        tensor_like(&p[1], gkb),
                        tensor_like(&p[2], act.iter().map(|a| dz * a).collect()),
                        tensor_like(&p[3], vec![dz]),
                    ]
                });
                (z, grads)
            }
        }
    }

    /// One pass of mini-batch SGD. The sample order is a deterministic
    /// shuffle keyed by the shuffle seed and the epoch counter. The returned
    /// loss is the mean over samples, each measured before its batch's step.
    pub fn train_epoch<X: AsRef<[f64]>>(
        &self,
        xs: &[X],
        ys: &[u8],
    ) -> Result<(TrainableModel, f64), NnError> {
        if xs.is_empty() {
            return Err(NnError::EmptyDataset);
        }
        if xs.len() != ys.len() {
            return Err(NnError::ShapeMismatch {
                expected: xs.len(),
                got: ys.len(),
            });
        }
        for (x, &y) in xs.iter().zip(ys) {
            self.check_input(x.as_ref())?;
            label_value(y)?;
        }

        let mut order: Vec<usize> = (0..xs.len()).collect();
        let mut rng =
            ChaCha8Rng::seed_from_u64(splitmix(self.shuffle_seed ^ splitmix(self.epochs_trained)));
        order.shuffle(&mut rng);

        let mut model = self.clone();
        let lr = self.hyperparams.learning_rate;
        let mut total_loss = 0.0;
        for batch in order.chunks(self.hyperparams.batch_size) {
            let mut acc: Vec<Vec<f64>> = model.parameters.iter().map(|t| vec![0.0; t.len()]).collect();
            for &i in batch {
                let (loss, grads) = model.loss_and_gradient(xs[i].as_ref(), ys[i])?;
                total_loss += loss;
                for (a, g) in acc.iter_mut().zip(&grads) {
                    for (ai, gi) in a.iter_mut().zip(g.data()) {
                        *ai += gi;
                    }
                }
            }
            let scale = lr / batch.len() as f64;
            for (param, a) in model.parameters.iter_mut().zip(&acc) {
                for (pi, ai) in param.data_mut().iter_mut().zip(a) {
                    *pi -= scale * ai;
                }
            }
        }
        if model.parameters.iter().any(|t| !t.is_finite()) {
            return Err(NnError::NonFinite);
        }
        model.epochs_trained += 1;
        Ok((model, total_loss / xs.len() as f64))
    }
}

fn label_value(y: u8) -> Result<f64, NnError> {
    match y {
        0 => Ok(0.0),
        1 => Ok(1.0),
        other => Err(NnError::InvalidLabel(other)),
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn tensor_like(like: &Tensor, data: Vec<f64>) -> Tensor {
    Tensor::new(like.shape().to_vec(), data).expect("gradient matches parameter shape")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, Normal};

    fn hp(lr: f64) -> Hyperparams {
        Hyperparams {
            learning_rate: lr,
            batch_size: 8,
        }
    }

    fn blobs(n: usize, dim: usize, seed: u64) -> (Vec<Vec<f64>>, Vec<u8>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise = Normal::new(0.0, 1.0).unwrap();
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for i in 0..n {
            let y = (i % 2) as u8;
            let centre = if y == 1 { 3.0 } else { -3.0 };
            xs.push((0..dim).map(|_| centre + noise.sample(&mut rng)).collect());
            ys.push(y);
        }
        (xs, ys)
    }

    #[test]
    fn init_is_deterministic_with_zero_biases() {
        for kind in ModelKind::ALL {
            let a = TrainableModel::init(kind, 16, 1, hp(0.1)).unwrap();
            let b = TrainableModel::init(kind, 16, 1, hp(0.1)).unwrap();
            assert_eq!(a, b);
            let biases: Vec<&Tensor> = match kind {
                ModelKind::Logreg => vec![&a.parameters()[1]],
                _ => vec![&a.parameters()[1], &a.parameters()[3]],
            };
            for t in biases {
                assert!(t.data().iter().all(|&v| v == 0.0));
            }
        }
    }

    #[test]
    fn init_bound_follows_fan_in() {
        let m = TrainableModel::init(ModelKind::Logreg, 100, 9, hp(0.1)).unwrap();
        assert!(m.parameters()[0].data().iter().all(|v| v.abs() < 0.1));
    }

    #[test]
    fn tiny_cnn_needs_square_input() {
        assert!(matches!(
            TrainableModel::init(ModelKind::TinyCnn, 10, 0, hp(0.1)),
            Err(NnError::InvalidInputDim { .. })
        ));
        assert!(TrainableModel::init(ModelKind::TinyCnn, 4, 0, hp(0.1)).is_err());
        assert!(TrainableModel::init(ModelKind::TinyCnn, 9, 0, hp(0.1)).is_ok());
    }

    #[test]
    fn forward_examples() {
        let m = TrainableModel::init(ModelKind::Logreg, 1, 0, hp(0.1)).unwrap();
        let zero = m.clone().with_parameters(vec![
            Tensor::vector(vec![0.0]).unwrap(),
            Tensor::vector(vec![0.0]).unwrap(),
        ]).unwrap();
        assert_eq!(zero.forward(&[123.0]).unwrap(), 0.5);
        let unit = m.with_parameters(vec![
            Tensor::vector(vec![1.0]).unwrap(),
            Tensor::vector(vec![0.0]).unwrap(),
        ]).unwrap();
        assert_eq!(unit.forward(&[0.0]).unwrap(), 0.5);
        let big = unit.forward(&[1e6]).unwrap();
        assert!(big > 0.999_999 && big < 1.0);
        let small = unit.forward(&[-1e6]).unwrap();
        assert!(small > 0.0 && small < 1e-6);
        assert!(matches!(unit.forward(&[0.0, 1.0]), Err(NnError::ShapeMismatch { .. })));
    }

    #[test]
    fn logreg_gradient_is_residual_times_input() {
        let m = TrainableModel::init(ModelKind::Logreg, 3, 4, hp(0.1)).unwrap();
        let x = [0.5, -1.25, 2.0];
        let p = m.forward(&x).unwrap();
        let (_, g) = m.loss_and_gradient(&x, 1).unwrap();
        for (gi, xi) in g[0].data().iter().zip(&x) {
            assert!((gi - (p - 1.0) * xi).abs() < 1e-15);
        }
        assert!((g[1].data()[0] - (p - 1.0)).abs() < 1e-15);
    }

    #[test]
    fn zero_learning_rate_leaves_parameters() {
        let (xs, ys) = blobs(20, 9, 1);
        for kind in ModelKind::ALL {
            let m = TrainableModel::init(kind, 9, 3, hp(0.0)).unwrap();
            let (trained, loss) = m.train_epoch(&xs, &ys).unwrap();
            assert_eq!(trained.parameters(), m.parameters());
            assert!(loss > 0.0);
        }
    }

    #[test]
    fn train_rejects_bad_inputs() {
        let m = TrainableModel::init(ModelKind::Logreg, 2, 3, hp(0.1)).unwrap();
        let empty: Vec<Vec<f64>> = vec![];
        assert!(matches!(m.train_epoch(&empty, &[]), Err(NnError::EmptyDataset)));
        assert!(matches!(
            m.train_epoch(&[vec![f64::NAN, 0.0]], &[1]),
            Err(NnError::NonFinite)
        ));
        assert!(matches!(
            m.train_epoch(&[vec![0.0, 0.0]], &[2]),
            Err(NnError::InvalidLabel(2))
        ));
    }

    #[test]
    fn separable_blobs_are_learned() {
        let (xs, ys) = blobs(200, 2, 11);
        let mut m = TrainableModel::init(ModelKind::Logreg, 2, 5, hp(0.1)).unwrap();
        for _ in 0..50 {
            m = m.train_epoch(&xs, &ys).unwrap().0;
        }
        let probs = m.predict_proba(&xs).unwrap();
        let correct = probs
            .iter()
            .zip(&ys)
            .filter(|(p, &y)| (**p >= 0.5) == (y == 1))
            .count();
        assert!(correct as f64 / xs.len() as f64 >= 0.99);
    }

    #[test]
    fn loss_non_increasing_early_epochs() {
        let (xs, ys) = blobs(200, 9, 17);
        for kind in ModelKind::ALL {
            let mut m = TrainableModel::init(kind, 9, 2, hp(0.01)).unwrap();
            let mut last = f64::INFINITY;
            for _ in 0..5 {
                let (next, loss) = m.train_epoch(&xs, &ys).unwrap();
                assert!(loss <= last, "{kind}: {loss} > {last}");
                last = loss;
                m = next;
            }
        }
    }

    #[test]
    fn training_is_bit_reproducible() {
        let (xs, ys) = blobs(64, 9, 3);
        let run = || {
            let mut m = TrainableModel::init(ModelKind::TinyCnn, 9, 8, hp(0.05)).unwrap();
            for _ in 0..3 {
                m = m.train_epoch(&xs, &ys).unwrap().0;
            }
            m
        };
        assert_eq!(run(), run());
    }
}
