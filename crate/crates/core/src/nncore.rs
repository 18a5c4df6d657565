//! Dense feed-forward networks with hand-written analytic gradients.
//!
//! Convention: activations are row vectors, a batch is the matrix x of shape
//! (B, in_dim), and a layer computes act(x W + b) with W of shape (in, out).
//! Gradients returned by [`DenseNet::backward`] are sums over the batch; any
//! 1/B averaging belongs to the loss that produced the upstream gradient.

use ndarray::{Array1, Array2, Axis};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use std::io::{Read, Write};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("{context}: expected {expected}, got {got}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("invalid probability distribution: {0}")]
    InvalidDistribution(String),
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Tanh,
    Identity,
}

impl Activation {
    fn apply(self, x: &mut Array2<f64>) {
        match self {
            Activation::Relu => x.mapv_inplace(|v| v.max(0.0)),
            Activation::Tanh => x.mapv_inplace(f64::tanh),
            Activation::Identity => {}
        }
    }

    fn apply_slice(self, x: &mut [f64]) {
        match self {
            Activation::Relu => x.iter_mut().for_each(|v| *v = v.max(0.0)),
            Activation::Tanh => x.iter_mut().for_each(|v| *v = v.tanh()),
            Activation::Identity => {}
        }
    }

    /// Derivative expressed through the activation output y = act(z).
    fn grad_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Relu => {
                if y > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - y * y,
            Activation::Identity => 1.0,
        }
    }

    fn tag(self) -> u8 {
        match self {
            Activation::Relu => 0,
            Activation::Tanh => 1,
            Activation::Identity => 2,
        }
    }

    fn from_tag(tag: u8) -> Result<Self, NnError> {
        match tag {
            0 => Ok(Activation::Relu),
            1 => Ok(Activation::Tanh),
            2 => Ok(Activation::Identity),
            other => Err(NnError::Corrupt(format!("activation tag {other}"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Layer {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
    pub activation: Activation,
}

#[derive(Debug, Clone)]
pub struct DenseNet {
    pub layers: Vec<Layer>,
}

/// Per-layer inputs and outputs retained for the backward pass;
/// `values[0]` is the network input, `values[i + 1]` the output of layer i.
#[derive(Debug)]
pub struct ForwardCache {
    pub values: Vec<Array2<f64>>,
}

impl ForwardCache {
    pub fn output(&self) -> &Array2<f64> {
        self.values.last().expect("cache never empty")
    }
}

#[derive(Debug, Clone)]
pub struct LayerGrad {
    pub d_weight: Array2<f64>,
    pub d_bias: Array1<f64>,
}

/// Gradient accumulators mirroring one [`DenseNet`]'s parameters.
#[derive(Debug, Clone)]
pub struct GradientTape {
    pub layers: Vec<LayerGrad>,
}

impl GradientTape {
    pub fn zeros_like(net: &DenseNet) -> Self {
        GradientTape {
            layers: net
                .layers
                .iter()
                .map(|l| LayerGrad {
                    d_weight: Array2::zeros(l.weight.raw_dim()),
                    d_bias: Array1::zeros(l.bias.raw_dim()),
                })
                .collect(),
        }
    }

    pub fn add(&mut self, other: &GradientTape) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.d_weight += &b.d_weight;
            a.d_bias += &b.d_bias;
        }
    }

    pub fn scale(&mut self, s: f64) {
        for l in &mut self.layers {
            l.d_weight *= s;
            l.d_bias *= s;
        }
    }

    /// Adds the gradient of c * ||theta||^2, i.e. 2c * theta.
    pub fn add_l2(&mut self, net: &DenseNet, c: f64) {
        for (g, l) in self.layers.iter_mut().zip(&net.layers) {
            g.d_weight.scaled_add(2.0 * c, &l.weight);
            g.d_bias.scaled_add(2.0 * c, &l.bias);
        }
    }
}

impl DenseNet {
    /// He-style uniform fan-in initialization: weights in
    /// (-sqrt(6/fan_in), +sqrt(6/fan_in)), biases zero.
    pub fn new(dims: &[usize], activations: &[Activation], rng: &mut ChaCha8Rng) -> DenseNet {
        assert!(dims.len() >= 2, "need at least one layer");
        assert_eq!(dims.len() - 1, activations.len());
        let layers = dims
            .windows(2)
            .zip(activations)
            .map(|(d, &activation)| {
                let (fan_in, fan_out) = (d[0], d[1]);
                let s = (6.0 / fan_in as f64).sqrt();
                Layer {
                    weight: Array2::from_shape_fn((fan_in, fan_out), |_| rng.gen_range(-s..s)),
                    bias: Array1::zeros(fan_out),
                    activation,
                }
            })
            .collect();
        DenseNet { layers }
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].weight.nrows()
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().unwrap().weight.ncols()
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.len() + l.bias.len())
            .sum()
    }

    pub fn l2_norm_sq(&self) -> f64 {
        self.layers
            .iter()
            .map(|l| {
                l.weight.iter().map(|w| w * w).sum::<f64>()
                    + l.bias.iter().map(|b| b * b).sum::<f64>()
            })
            .sum()
    }

    fn check_input(&self, x: &Array2<f64>) -> Result<(), NnError> {
        if x.ncols() != self.in_dim() {
            return Err(NnError::DimensionMismatch {
                context: "forward input",
                expected: self.in_dim(),
                got: x.ncols(),
            });
        }
        Ok(())
    }

    pub fn forward(&self, x: &Array2<f64>) -> Result<Array2<f64>, NnError> {
        self.check_input(x)?;
        let mut h = x.clone();
        for l in &self.layers {
            let mut z = h.dot(&l.weight);
            z += &l.bias;
            l.activation.apply(&mut z);
            h = z;
        }
        Ok(h)
    }

    pub fn forward_cached(&self, x: &Array2<f64>) -> Result<ForwardCache, NnError> {
        self.check_input(x)?;
        let mut values = Vec::with_capacity(self.layers.len() + 1);
        values.push(x.clone());
        for l in &self.layers {
            let mut z = values.last().unwrap().dot(&l.weight);
            z += &l.bias;
            l.activation.apply(&mut z);
            values.push(z);
        }
        Ok(ForwardCache { values })
    }

    /// Single-sample forward pass on vector-matrix products, avoiding the
    /// batch-matrix allocations of [`DenseNet::forward`].
    pub fn forward_one(&self, x: &[f64]) -> Result<Vec<f64>, NnError> {
        if x.len() != self.in_dim() {
            return Err(NnError::DimensionMismatch {
                context: "forward input",
                expected: self.in_dim(),
                got: x.len(),
            });
        }
        let l0 = &self.layers[0];
        let mut h: Array1<f64> = ndarray::ArrayView1::from(x).dot(&l0.weight);
        h += &l0.bias;
        l0.activation.apply_slice(h.as_slice_mut().expect("standard layout"));
        for l in &self.layers[1..] {
            let mut z = h.dot(&l.weight);
            z += &l.bias;
            l.activation.apply_slice(z.as_slice_mut().expect("standard layout"));
            h = z;
        }
        Ok(h.to_vec())
    }

    /// Single-sample forward pass for an input that is `prefix` followed by
    /// a one-hot suffix with `hot` set, equivalent to [`Self::forward_one`]
    /// on the materialized concatenation; the first layer adds one weight
    /// row instead of multiplying the one-hot block.
    pub fn forward_one_hot(&self, prefix: &[f64], hot: usize) -> Result<Vec<f64>, NnError> {
        let d = prefix.len();
        if d >= self.in_dim() {
            return Err(NnError::DimensionMismatch {
                context: "one-hot forward prefix",
                expected: self.in_dim(),
                got: d,
            });
        }
        let suffix = self.in_dim() - d;
        if hot >= suffix {
            return Err(NnError::DimensionMismatch {
                context: "one-hot forward index",
                expected: suffix,
                got: hot,
            });
        }
        let l0 = &self.layers[0];
        let mut h: Array1<f64> =
            ndarray::ArrayView1::from(prefix).dot(&l0.weight.slice(ndarray::s![..d, ..]));
        h += &l0.weight.row(d + hot);
        h += &l0.bias;
        l0.activation.apply_slice(h.as_slice_mut().expect("standard layout"));
        for l in &self.layers[1..] {
            let mut z = h.dot(&l.weight);
            z += &l.bias;
            l.activation.apply_slice(z.as_slice_mut().expect("standard layout"));
            h = z;
        }
        Ok(h.to_vec())
    }

    /// Batched form of [`Self::forward_one_hot`]: row i of `prefix` is
    /// followed by a one-hot suffix with `hot[i]` set. Row count and
    /// `hot.len()` must agree.
    pub fn forward_batch_hot(
        &self,
        prefix: &Array2<f64>,
        hot: &[usize],
    ) -> Result<Array2<f64>, NnError> {
        let d = prefix.ncols();
        if d >= self.in_dim() {
            return Err(NnError::DimensionMismatch {
                context: "one-hot forward prefix",
                expected: self.in_dim(),
                got: d,
            });
        }
        if prefix.nrows() != hot.len() {
            return Err(NnError::DimensionMismatch {
                context: "one-hot forward batch",
                expected: prefix.nrows(),
                got: hot.len(),
            });
        }
        let suffix = self.in_dim() - d;
        if let Some(&bad) = hot.iter().find(|&&h| h >= suffix) {
            return Err(NnError::DimensionMismatch {
                context: "one-hot forward index",
                expected: suffix,
                got: bad,
            });
        }
        let l0 = &self.layers[0];
        let mut h = prefix.dot(&l0.weight.slice(ndarray::s![..d, ..]));
        for (mut row, &hi) in h.rows_mut().into_iter().zip(hot) {
            row += &l0.weight.row(d + hi);
        }
        h += &l0.bias;
        l0.activation.apply(&mut h);
        for l in &self.layers[1..] {
            let mut z = h.dot(&l.weight);
            z += &l.bias;
            l.activation.apply(&mut z);
            h = z;
        }
        Ok(h)
    }

    /// Backpropagates `upstream` (shape of the output) through the cached
    /// forward pass; returns parameter gradients and the input gradient.
    pub fn backward(
        &self,
        cache: &ForwardCache,
        upstream: &Array2<f64>,
    ) -> Result<(GradientTape, Array2<f64>), NnError> {
        if upstream.ncols() != self.out_dim() {
            return Err(NnError::DimensionMismatch {
                context: "backward upstream",
                expected: self.out_dim(),
                got: upstream.ncols(),
            });
        }
        let mut tape = GradientTape::zeros_like(self);
        let mut grad = upstream.clone();
        for (i, l) in self.layers.iter().enumerate().rev() {
            let y = &cache.values[i + 1];
            let x = &cache.values[i];
            let mut dz = grad;
            dz.zip_mut_with(y, |g, &yv| *g *= l.activation.grad_from_output(yv));
            tape.layers[i].d_weight = x.t().dot(&dz);
            tape.layers[i].d_bias = dz.sum_axis(Axis(0));
            grad = dz.dot(&l.weight.t());
        }
        Ok((tape, grad))
    }
}

/// Momentum SGD. The l2 coefficient is carried here as configuration (it is
/// Eq.-style weight decay c), but the 2c*theta gradient is produced by the
/// loss via [`GradientTape::add_l2`] so finite-difference checks cover it;
/// `step` applies exactly the tape it is given.
#[derive(Debug, Clone)]
pub struct SgdMomentum {
    pub learning_rate: f64,
    pub momentum: f64,
    pub l2_coeff: f64,
    velocity: Vec<LayerGrad>,
}

impl SgdMomentum {
    pub fn new(net: &DenseNet, learning_rate: f64, momentum: f64, l2_coeff: f64) -> Self {
        assert!(learning_rate > 0.0);
        assert!(l2_coeff >= 0.0);
        SgdMomentum {
            learning_rate,
            momentum,
            l2_coeff,
            velocity: GradientTape::zeros_like(net).layers,
        }
    }

    pub fn step(&mut self, net: &mut DenseNet, tape: &GradientTape) {
        for ((l, v), g) in net
            .layers
            .iter_mut()
            .zip(&mut self.velocity)
            .zip(&tape.layers)
        {
            v.d_weight *= self.momentum;
            v.d_weight += &g.d_weight;
            v.d_bias *= self.momentum;
            v.d_bias += &g.d_bias;
            l.weight.scaled_add(-self.learning_rate, &v.d_weight);
            l.bias.scaled_add(-self.learning_rate, &v.d_bias);
        }
    }
}

// ---------------------------------------------------------------------------
// Losses. Each returns (value, gradient w.r.t. the prediction argument).

/// (pred - target)^2 and its derivative w.r.t. pred.
pub fn loss_mse(pred: f64, target: f64) -> (f64, f64) {
    let d = pred - target;
    (d * d, 2.0 * d)
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&l| (l - m).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.iter().map(|e| e / z).collect()
}

pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = logits.iter().map(|&l| (l - m).exp()).sum();
    let log_z = z.ln() + m;
    logits.iter().map(|&l| l - log_z).collect()
}

/// Shannon entropy of a distribution, in nats.
pub fn entropy(dist: &[f64]) -> f64 {
    dist.iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| -p * p.ln())
        .sum()
}

fn validate_distribution(target: &[f64]) -> Result<(), NnError> {
    let sum: f64 = target.iter().sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(NnError::InvalidDistribution(format!("sums to {sum}")));
    }
    if target.iter().any(|&p| p < 0.0) {
        return Err(NnError::InvalidDistribution("negative entry".into()));
    }
    Ok(())
}

/// -sum target * log softmax(pred_logits); gradient w.r.t. the logits is
/// softmax(pred_logits) - target.
pub fn loss_cross_entropy(
    pred_logits: &[f64],
    target: &[f64],
) -> Result<(f64, Vec<f64>), NnError> {
    if pred_logits.len() != target.len() {
        return Err(NnError::DimensionMismatch {
            context: "cross_entropy",
            expected: target.len(),
            got: pred_logits.len(),
        });
    }
    validate_distribution(target)?;
    let ls = log_softmax(pred_logits);
    let value = -target.iter().zip(&ls).map(|(t, l)| t * l).sum::<f64>();
    let grad = softmax(pred_logits)
        .iter()
        .zip(target)
        .map(|(p, t)| p - t)
        .collect();
    Ok((value, grad))
}

/// KL(target || softmax(pred_logits)); same logits gradient as cross-entropy
/// because they differ by the constant entropy(target).
pub fn loss_kl(target: &[f64], pred_logits: &[f64]) -> Result<(f64, Vec<f64>), NnError> {
    let (ce, grad) = loss_cross_entropy(pred_logits, target)?;
    Ok((ce - entropy(target), grad))
}

// ---------------------------------------------------------------------------
// Checkpoint encoding: little-endian, layout-tagged, bit-exact round trip.

pub fn write_net<W: Write>(w: &mut W, net: &DenseNet) -> Result<(), NnError> {
    w.write_all(&(net.layers.len() as u32).to_le_bytes())?;
    for l in &net.layers {
        w.write_all(&(l.weight.nrows() as u32).to_le_bytes())?;
        w.write_all(&(l.weight.ncols() as u32).to_le_bytes())?;
        w.write_all(&[l.activation.tag()])?;
        for v in l.weight.iter() {
            w.write_all(&v.to_le_bytes())?;
        }
        for v in l.bias.iter() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32, NnError> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

fn read_f64<R: Read>(r: &mut R) -> Result<f64, NnError> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    Ok(f64::from_le_bytes(buf))
}

pub fn read_net<R: Read>(r: &mut R) -> Result<DenseNet, NnError> {
    let n_layers = read_u32(r)? as usize;
    if n_layers == 0 || n_layers > 64 {
        return Err(NnError::Corrupt(format!("layer count {n_layers}")));
    }
    let mut layers = Vec::with_capacity(n_layers);
    for _ in 0..n_layers {
        let rows = read_u32(r)? as usize;
        let cols = read_u32(r)? as usize;
        if rows == 0 || cols == 0 || rows * cols > 16_000_000 {
            return Err(NnError::Corrupt(format!("layer shape {rows}x{cols}")));
        }
        let mut tag = [0u8; 1];
        r.read_exact(&mut tag)?;
        let activation = Activation::from_tag(tag[0])?;
        let mut weight = Array2::zeros((rows, cols));
        for v in weight.iter_mut() {
            *v = read_f64(r)?;
        }
        let mut bias = Array1::zeros(cols);
        for v in bias.iter_mut() {
            *v = read_f64(r)?;
        }
        layers.push(Layer {
            weight,
            bias,
            activation,
        });
    }
    Ok(DenseNet { layers })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn identity_layer_passes_input_through() {
        let net = DenseNet {
            layers: vec![Layer {
                weight: Array2::eye(2),
                bias: Array1::zeros(2),
                activation: Activation::Identity,
            }],
        };
        let y = net.forward(&array![[1.0, 2.0]]).unwrap();
        assert_eq!(y, array![[1.0, 2.0]]);
    }

    #[test]
    fn zero_weights_return_bias() {
        let net = DenseNet {
            layers: vec![Layer {
                weight: Array2::zeros((3, 2)),
                bias: array![0.5, -0.25],
                activation: Activation::Identity,
            }],
        };
        let y = net.forward(&array![[7.0, -4.0, 2.0]]).unwrap();
        assert_eq!(y, array![[0.5, -0.25]]);
    }

    #[test]
    fn forward_matches_hand_arithmetic() {
        let net = DenseNet::new(
            &[3, 4, 2],
            &[Activation::Relu, Activation::Identity],
            &mut rng(12),
        );
        let x = array![[0.3, -0.7, 1.1]];
        let y = net.forward(&x).unwrap();

        // Independent naive evaluation with explicit loops.
        let mut h = vec![0.0; 4];
        for j in 0..4 {
            let mut z = net.layers[0].bias[j];
            for i in 0..3 {
                z += x[(0, i)] * net.layers[0].weight[(i, j)];
            }
            h[j] = z.max(0.0);
        }
        for j in 0..2 {
            let mut z = net.layers[1].bias[j];
            for i in 0..4 {
                z += h[i] * net.layers[1].weight[(i, j)];
            }
            assert!((y[(0, j)] - z).abs() < 1e-12);
        }
    }

    #[test]
    fn forward_one_matches_batch_forward() {
        let net = DenseNet::new(
            &[6, 5, 3],
            &[Activation::Tanh, Activation::Identity],
            &mut rng(9),
        );
        let x = [0.4, -1.2, 0.0, 2.5, -0.3, 0.7];
        let batch = Array2::from_shape_vec((1, 6), x.to_vec()).unwrap();
        let y_batch = net.forward(&batch).unwrap();
        let y_one = net.forward_one(&x).unwrap();
        for j in 0..3 {
            assert!((y_one[j] - y_batch[(0, j)]).abs() < 1e-12);
        }
        assert!(net.forward_one(&x[..4]).is_err());
    }

    #[test]
    fn one_hot_forward_matches_materialized_input() {
        let net = DenseNet::new(
            &[10, 7, 4],
            &[Activation::Relu, Activation::Identity],
            &mut rng(11),
        );
        let prefix = [0.3, -0.9, 1.4];
        for hot in 0..7 {
            let mut full = vec![0.0; 10];
            full[..3].copy_from_slice(&prefix);
            full[3 + hot] = 1.0;
            let expect = net.forward_one(&full).unwrap();
            let got = net.forward_one_hot(&prefix, hot).unwrap();
            for (a, b) in got.iter().zip(&expect) {
                assert!((a - b).abs() < 1e-12, "{a} vs {b}");
            }
        }
        assert!(net.forward_one_hot(&prefix, 7).is_err());
        assert!(net.forward_one_hot(&vec![0.0; 10], 0).is_err());
    }

    #[test]
    fn batched_one_hot_forward_matches_per_row_calls() {
        let net = DenseNet::new(
            &[12, 9, 5],
            &[Activation::Tanh, Activation::Identity],
            &mut rng(17),
        );
        let mut r = rng(18);
        let prefix = Array2::from_shape_fn((6, 4), |_| r.gen_range(-1.0..1.0));
        let hot: Vec<usize> = (0..6).map(|_| r.gen_range(0..8)).collect();
        let batch = net.forward_batch_hot(&prefix, &hot).unwrap();
        for row in 0..6 {
            let single = net
                .forward_one_hot(prefix.row(row).as_slice().unwrap(), hot[row])
                .unwrap();
            for (a, b) in batch.row(row).iter().zip(&single) {
                assert!((a - b).abs() < 1e-12, "{a} vs {b}");
            }
        }
        assert!(net.forward_batch_hot(&prefix, &hot[..5]).is_err());
        assert!(net.forward_batch_hot(&prefix, &vec![8usize; 6]).is_err());
        let wide = Array2::zeros((2, 12));
        assert!(net.forward_batch_hot(&wide, &[0, 0]).is_err());
    }

    #[test]
    fn linear_backward_is_outer_product() {
        let net = DenseNet {
            layers: vec![Layer {
                weight: Array2::zeros((3, 2)),
                bias: Array1::zeros(2),
                activation: Activation::Identity,
            }],
        };
        let x = array![[0.5, -1.5, 2.0]];
        let cache = net.forward_cached(&x).unwrap();
        let (tape, dx) = net.backward(&cache, &array![[1.0, 0.0]]).unwrap();
        for i in 0..3 {
            assert_eq!(tape.layers[0].d_weight[(i, 0)], x[(0, i)]);
            assert_eq!(tape.layers[0].d_weight[(i, 1)], 0.0);
        }
        assert_eq!(tape.layers[0].d_bias, array![1.0, 0.0]);
        // Zero weights mean zero input gradient.
        assert!(dx.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn relu_blocks_gradient_at_negative_preactivation() {
        let net = DenseNet {
            layers: vec![Layer {
                weight: array![[1.0], [1.0]],
                bias: array![-10.0],
                activation: Activation::Relu,
            }],
        };
        let x = array![[1.0, 2.0]];
        let cache = net.forward_cached(&x).unwrap();
        assert_eq!(cache.output()[(0, 0)], 0.0);
        let (tape, dx) = net.backward(&cache, &array![[1.0]]).unwrap();
        assert!(tape.layers[0].d_weight.iter().all(|&v| v == 0.0));
        assert!(dx.iter().all(|&v| v == 0.0));
    }

    /// Central finite differences over every parameter of a small random net
    /// against the analytic tape, for the scalar loss sum(c_j * y_j).
    #[test]
    fn backward_matches_finite_differences() {
        let mut net = DenseNet::new(
            &[3, 5, 4, 2],
            &[Activation::Relu, Activation::Tanh, Activation::Identity],
            &mut rng(42),
        );
        let x = array![[0.4, -0.2, 0.9], [-1.3, 0.5, 0.1]];
        let coef = array![[0.7, -1.2], [0.3, 0.8]];

        let cache = net.forward_cached(&x).unwrap();
        let (tape, _) = net.backward(&cache, &coef).unwrap();

        let loss = |net: &DenseNet| -> f64 {
            let y = net.forward(&x).unwrap();
            (&y * &coef).sum()
        };

        let h = 1e-5;
        for li in 0..net.layers.len() {
            let shape = net.layers[li].weight.raw_dim();
            for i in 0..shape[0] {
                for j in 0..shape[1] {
                    let orig = net.layers[li].weight[(i, j)];
                    net.layers[li].weight[(i, j)] = orig + h;
                    let up = loss(&net);
                    net.layers[li].weight[(i, j)] = orig - h;
                    let down = loss(&net);
                    net.layers[li].weight[(i, j)] = orig;
                    let fd = (up - down) / (2.0 * h);
                    let an = tape.layers[li].d_weight[(i, j)];
                    let denom = an.abs().max(fd.abs()).max(1e-6);
                    assert!(
                        ((an - fd) / denom).abs() <= 1e-4,
                        "layer {li} w[{i},{j}]: analytic {an} vs fd {fd}"
                    );
                }
            }
            for j in 0..net.layers[li].bias.len() {
                let orig = net.layers[li].bias[j];
                net.layers[li].bias[j] = orig + h;
                let up = loss(&net);
                net.layers[li].bias[j] = orig - h;
                let down = loss(&net);
                net.layers[li].bias[j] = orig;
                let fd = (up - down) / (2.0 * h);
                let an = tape.layers[li].d_bias[j];
                let denom = an.abs().max(fd.abs()).max(1e-6);
                assert!(
                    ((an - fd) / denom).abs() <= 1e-4,
                    "layer {li} b[{j}]: analytic {an} vs fd {fd}"
                );
            }
        }
    }

    #[test]
    fn mse_cases() {
        assert_eq!(loss_mse(1.5, 1.5), (0.0, 0.0));
        let (v, g) = loss_mse(0.0, 1.0);
        assert_eq!(v, 1.0);
        assert_eq!(g, -2.0);
    }

    #[test]
    fn cross_entropy_of_own_softmax_is_entropy() {
        let logits = [0.2, -1.0, 0.7, 0.0];
        let target = softmax(&logits);
        let (v, g) = loss_cross_entropy(&logits, &target).unwrap();
        assert!((v - entropy(&target)).abs() < 1e-12);
        assert!(g.iter().all(|&x| x.abs() < 1e-12));
    }

    #[test]
    fn peaked_logits_drive_cross_entropy_to_zero() {
        let logits = [30.0, 0.0, 0.0];
        let target = [1.0, 0.0, 0.0];
        let (v, _) = loss_cross_entropy(&logits, &target).unwrap();
        assert!(v < 1e-9);
    }

    #[test]
    fn cross_entropy_gradient_matches_finite_differences() {
        let mut r = rng(3);
        for _ in 0..20 {
            let logits: Vec<f64> = (0..5).map(|_| r.gen_range(-2.0..2.0)).collect();
            let raw: Vec<f64> = (0..5).map(|_| r.gen_range(0.01..1.0)).collect();
            let z: f64 = raw.iter().sum();
            let target: Vec<f64> = raw.iter().map(|v| v / z).collect();
            let (_, grad) = loss_cross_entropy(&logits, &target).unwrap();
            let h = 1e-6;
            for i in 0..5 {
                let mut up = logits.clone();
                up[i] += h;
                let mut down = logits.clone();
                down[i] -= h;
                let fd = (loss_cross_entropy(&up, &target).unwrap().0
                    - loss_cross_entropy(&down, &target).unwrap().0)
                    / (2.0 * h);
                assert!((grad[i] - fd).abs() < 1e-6, "{} vs {}", grad[i], fd);
            }
        }
    }

    #[test]
    fn kl_identity_and_zero_cases() {
        let logits = [0.1, 0.4, -0.3];
        let target = softmax(&logits);
        let (v, _) = loss_kl(&target, &logits).unwrap();
        assert!(v.abs() < 1e-12);

        let uniform = [1.0 / 3.0; 3];
        let (v, _) = loss_kl(&uniform, &[0.0, 0.0, 0.0]).unwrap();
        assert!(v.abs() < 1e-12);

        let mut r = rng(9);
        for _ in 0..50 {
            let logits: Vec<f64> = (0..4).map(|_| r.gen_range(-3.0..3.0)).collect();
            let raw: Vec<f64> = (0..4).map(|_| r.gen_range(0.01..1.0)).collect();
            let z: f64 = raw.iter().sum();
            let target: Vec<f64> = raw.iter().map(|v| v / z).collect();
            let (kl, _) = loss_kl(&target, &logits).unwrap();
            let (ce, _) = loss_cross_entropy(&logits, &target).unwrap();
            assert!((kl - (ce - entropy(&target))).abs() <= 1e-9);
            assert!(kl >= -1e-12);
        }
    }

    #[test]
    fn invalid_target_is_rejected() {
        assert!(loss_cross_entropy(&[0.0, 0.0], &[0.7, 0.7]).is_err());
        assert!(loss_cross_entropy(&[0.0, 0.0], &[1.5, -0.5]).is_err());
    }

    #[test]
    fn sgd_momentum_moves_parameters() {
        let mut net = DenseNet::new(&[2, 2], &[Activation::Identity], &mut rng(1));
        let mut opt = SgdMomentum::new(&net, 0.1, 0.9, 0.0);
        let mut tape = GradientTape::zeros_like(&net);
        tape.layers[0].d_weight[(0, 0)] = 1.0;
        let before = net.layers[0].weight[(0, 0)];
        opt.step(&mut net, &tape);
        assert!((net.layers[0].weight[(0, 0)] - (before - 0.1)).abs() < 1e-12);
        // Momentum keeps moving even with a zero tape.
        let zero = GradientTape::zeros_like(&net);
        opt.step(&mut net, &zero);
        assert!((net.layers[0].weight[(0, 0)] - (before - 0.1 - 0.09)).abs() < 1e-12);
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let net = DenseNet::new(
            &[4, 6, 3],
            &[Activation::Tanh, Activation::Identity],
            &mut rng(77),
        );
        let mut buf = Vec::new();
        write_net(&mut buf, &net).unwrap();
        let back = read_net(&mut buf.as_slice()).unwrap();
        assert_eq!(net.layers.len(), back.layers.len());
        for (a, b) in net.layers.iter().zip(&back.layers) {
            assert_eq!(a.activation, b.activation);
            assert!(a
                .weight
                .iter()
                .zip(b.weight.iter())
                .all(|(x, y)| x.to_bits() == y.to_bits()));
            assert!(a
                .bias
                .iter()
                .zip(b.bias.iter())
                .all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }

    #[test]
    fn seeded_init_is_reproducible() {
        let a = DenseNet::new(&[3, 3], &[Activation::Relu], &mut rng(5));
        let b = DenseNet::new(&[3, 3], &[Activation::Relu], &mut rng(5));
        assert_eq!(a.layers[0].weight, b.layers[0].weight);
    }
}
