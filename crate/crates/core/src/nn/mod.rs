//! Networks that run forward and backward directly on sketched weights.
//!
//! Two architectures are supported: a fully connected ReLU stack and a
//! convolutional residual network expressed through patch matrices. In both,
//! every hidden weight `W` (shape `d x n`) can be replaced by its count
//! sketch `S = H W` (shape `c x n`, `c < d`); the forward pass computes
//! `relu(H^T (S x))` and the backward pass produces gradients with respect
//! to `S` itself, so a client holding only sketched weights never forms a
//! full `d x n` matrix. The final output layer stays unsketched: it is the
//! size of the label space, not of the model.
//!
//! Gradient recovery rests on the chain rule through `S = H W`: the full
//! gradient is `H^T` applied to the sketched gradient, which
//! [`recover_full_gradient`] implements and the finite-difference oracles in
//! the tests confirm.

mod conv;
mod fc;
mod fd;
mod multi;

pub use conv::{conv_forward, conv_forward_sketched, patchify, patchify_transpose, ConvTape};
pub use fc::{fc_forward, fc_forward_sketched, FcTape};
pub use fd::finite_difference_gradient;
pub use multi::{MultiTape, SelectionPicks};

use crate::error::{Error, Result};
use crate::numerics::{Matrix, Vector};
use crate::sketch::{entrywise_median, SketchOperator, SketchedWeight};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

/// Architecture description. Weight shapes derive from this; see
/// [`NetworkSpec::sketched_layer_dims`].
#[derive(Debug, Clone, PartialEq)]
pub enum NetworkSpec {
    Fc(FcSpec),
    ConvResNet(ConvSpec),
}

/// Fully connected ReLU network: input -> hidden[0] -> ... -> hidden[L-1]
/// with ReLU after every hidden layer, then a linear output layer of
/// `output_dim` rows. The hidden weights are the sketchable ones.
#[derive(Debug, Clone, PartialEq)]
pub struct FcSpec {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub output_dim: usize,
}

/// Convolutional residual network over patch matrices.
///
/// The input is `input_channels x pixels` with pixels on a square grid.
/// Layer 1 maps it to `channels x pixels` scaled by
/// `sqrt(activation_scale / channels)`; layers `2..=depth` are residual
/// blocks `x + (residual_scale / (depth * sqrt(channels))) * relu(W phi(x))`.
/// The prediction is the Frobenius inner product of an unsketched
/// `channels x pixels` output weight with the last activation.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvSpec {
    pub input_channels: usize,
    pub channels: usize,
    /// Pixel count; must be a perfect square.
    pub pixels: usize,
    /// Patch area; must be a perfect square (1, 4, 9, ...).
    pub patch: usize,
    /// Number of convolutional layers, all sketchable.
    pub depth: usize,
    /// Numerator of the first-layer scale `sqrt(activation_scale/channels)`.
    pub activation_scale: f64,
    /// Numerator of the residual scale; must sit in `[0, 1)`. Zero is a
    /// degenerate setting used by tests to cut the residual branches.
    pub residual_scale: f64,
}

fn is_perfect_square(n: usize) -> bool {
    let r = (n as f64).sqrt().round() as usize;
    r * r == n
}

impl NetworkSpec {
    /// Validates dimensional and scale constraints.
    pub fn validate(&self) -> Result<()> {
        match self {
            NetworkSpec::Fc(fc) => {
                if fc.input_dim == 0 || fc.output_dim == 0 {
                    return Err(Error::arg("NetworkSpec", "zero input or output dimension"));
                }
                if fc.hidden_dims.is_empty() {
                    return Err(Error::arg("NetworkSpec", "at least one hidden layer required"));
                }
                if fc.hidden_dims.iter().any(|&d| d == 0) {
                    return Err(Error::arg("NetworkSpec", "zero hidden dimension"));
                }
            }
            NetworkSpec::ConvResNet(cv) => {
                if cv.input_channels == 0 || cv.channels == 0 || cv.depth == 0 {
                    return Err(Error::arg("NetworkSpec", "zero channels or depth"));
                }
                if cv.pixels == 0 || !is_perfect_square(cv.pixels) {
                    return Err(Error::arg("NetworkSpec", "pixels must be a positive square"));
                }
                if cv.patch == 0 || !is_perfect_square(cv.patch) {
                    return Err(Error::arg("NetworkSpec", "patch must be a positive square"));
                }
                if cv.activation_scale <= 0.0 {
                    return Err(Error::arg("NetworkSpec", "activation scale must be positive"));
                }
                if !(0.0..1.0).contains(&cv.residual_scale) {
                    return Err(Error::arg("NetworkSpec", "residual scale must be in [0, 1)"));
                }
            }
        }
        Ok(())
    }

    /// `(rows, cols)` of every sketchable layer, in forward order. Rows are
    /// the dimension the sketch compresses.
    pub fn sketched_layer_dims(&self) -> Vec<(usize, usize)> {
        match self {
            NetworkSpec::Fc(fc) => {
                let mut dims = Vec::with_capacity(fc.hidden_dims.len());
                let mut prev = fc.input_dim;
                for &d in &fc.hidden_dims {
                    dims.push((d, prev));
                    prev = d;
                }
                dims
            }
            NetworkSpec::ConvResNet(cv) => {
                let mut dims = Vec::with_capacity(cv.depth);
                dims.push((cv.channels, cv.patch * cv.input_channels));
                for _ in 1..cv.depth {
                    dims.push((cv.channels, cv.patch * cv.channels));
                }
                dims
            }
        }
    }

    /// `(rows, cols)` of the unsketched output layer.
    pub fn output_dims(&self) -> (usize, usize) {
        match self {
            NetworkSpec::Fc(fc) => (fc.output_dim, *fc.hidden_dims.last().unwrap()),
            NetworkSpec::ConvResNet(cv) => (cv.channels, cv.pixels),
        }
    }

    pub(crate) fn conv(&self) -> Option<&ConvSpec> {
        match self {
            NetworkSpec::ConvResNet(cv) => Some(cv),
            _ => None,
        }
    }
}

/// Full (server-side) weights for a [`NetworkSpec`].
#[derive(Debug, Clone)]
pub struct NetworkState {
    pub spec: NetworkSpec,
    /// Sketchable layers, shapes from `spec.sketched_layer_dims()`.
    pub weights: Vec<Matrix>,
    /// Unsketched output layer, shape from `spec.output_dims()`.
    pub output: Matrix,
}

impl NetworkState {
    /// Seeded Gaussian init with standard deviation `sqrt(2 / fan_in)`.
    pub fn init(spec: NetworkSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut weights = Vec::new();
        for (rows, cols) in spec.sketched_layer_dims() {
            weights.push(gaussian_matrix(&mut rng, rows, cols)?);
        }
        let (orows, ocols) = spec.output_dims();
        let output = gaussian_matrix(&mut rng, orows, ocols)?;
        Ok(NetworkState { spec, weights, output })
    }

    /// Number of sketchable layers.
    pub fn depth(&self) -> usize {
        self.weights.len()
    }

    /// Dense network whose hidden weights are the median recovery of this
    /// network's weights under the given operators: what a client's sketched
    /// view "looks like" at full size. One operator per layer reduces to
    /// `H^T H W`.
    pub fn surrogate(&self, ops: &[Vec<SketchOperator>]) -> Result<NetworkState> {
        if ops.len() != self.weights.len() {
            return Err(Error::shape(
                "NetworkState::surrogate",
                format!("{} operator groups for {} layers", ops.len(), self.weights.len()),
            ));
        }
        let mut weights = Vec::with_capacity(self.weights.len());
        for (w, layer_ops) in self.weights.iter().zip(ops) {
            if layer_ops.is_empty() {
                return Err(Error::EmptyInput { op: "NetworkState::surrogate" });
            }
            let expansions = layer_ops
                .iter()
                .map(|o| o.unsketch_matrix(&o.sketch_matrix(w)?))
                .collect::<Result<Vec<_>>>()?;
            weights.push(entrywise_median(&expansions)?);
        }
        Ok(NetworkState { spec: self.spec.clone(), weights, output: self.output.clone() })
    }
}

fn gaussian_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Result<Matrix> {
    let std = (2.0 / cols as f64).sqrt();
    let normal = Normal::new(0.0, std)
        .map_err(|e| Error::arg("NetworkState::init", e.to_string()))?;
    let data = (0..rows * cols).map(|_| normal.sample(rng)).collect();
    Matrix::from_vec(rows, cols, data)
}

/// Client-side view of a network: every hidden layer as one or more sketched
/// weights, plus the unsketched output layer.
#[derive(Debug, Clone)]
pub struct SketchedNetwork {
    pub spec: NetworkSpec,
    pub layers: Vec<SketchedLayer>,
    pub output: Matrix,
}

/// One hidden layer's sketches. Single-sketch training keeps exactly one
/// entry; median-recovery training keeps `k` independent ones.
#[derive(Debug, Clone)]
pub struct SketchedLayer {
    pub sketches: Vec<SketchedWeight>,
}

impl SketchedNetwork {
    /// Sketches `net` under the given operators (outer index: layer, inner:
    /// sketch). Errors if group sizes differ across layers or shapes clash.
    pub fn sketch(net: &NetworkState, ops: Vec<Vec<SketchOperator>>) -> Result<Self> {
        if ops.len() != net.weights.len() {
            return Err(Error::shape(
                "SketchedNetwork::sketch",
                format!("{} operator groups for {} layers", ops.len(), net.weights.len()),
            ));
        }
        let count = ops.first().map(|g| g.len()).unwrap_or(0);
        if count == 0 || ops.iter().any(|g| g.len() != count) {
            return Err(Error::arg(
                "SketchedNetwork::sketch",
                "every layer needs the same positive number of operators",
            ));
        }
        let mut layers = Vec::with_capacity(ops.len());
        for (w, group) in net.weights.iter().zip(ops) {
            let sketches = group
                .into_iter()
                .map(|op| SketchedWeight::sketch(op, w))
                .collect::<Result<Vec<_>>>()?;
            layers.push(SketchedLayer { sketches });
        }
        Ok(SketchedNetwork { spec: net.spec.clone(), layers, output: net.output.clone() })
    }

    /// Sketches per layer (uniform across layers).
    pub fn sketch_count(&self) -> usize {
        self.layers.first().map(|l| l.sketches.len()).unwrap_or(0)
    }

    pub(crate) fn single(&self, layer: usize) -> Result<&SketchedWeight> {
        let l = &self.layers[layer];
        if l.sketches.len() != 1 {
            return Err(Error::Unsupported(format!(
                "layer {layer} holds {} sketches; this path expects exactly one",
                l.sketches.len()
            )));
        }
        Ok(&l.sketches[0])
    }
}

/// Training target for one example.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Label {
    /// Regression target; requires a 1-dimensional prediction.
    Scalar(f64),
    /// Class index into the prediction vector.
    Class(usize),
}

/// Input features for one example.
#[derive(Debug, Clone, PartialEq)]
pub enum Features {
    /// Flat vector, for fully connected networks.
    Flat(Vector),
    /// `channels x pixels` image, for convolutional networks.
    Image(Matrix),
}

impl Features {
    pub fn flat(&self) -> Result<&Vector> {
        match self {
            Features::Flat(v) => Ok(v),
            Features::Image(_) => {
                Err(Error::shape("Features::flat", "image features given to an fc network"))
            }
        }
    }

    pub fn image(&self) -> Result<&Matrix> {
        match self {
            Features::Image(m) => Ok(m),
            Features::Flat(_) => {
                Err(Error::shape("Features::image", "flat features given to a conv network"))
            }
        }
    }
}

/// One labeled example.
#[derive(Debug, Clone)]
pub struct Example {
    pub x: Features,
    pub y: Label,
}

/// Loss functions over the prediction vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Loss {
    /// `0.5 * (pred - y)^2` on a scalar prediction.
    SquaredError,
    /// Softmax cross entropy over logits with an integer class target.
    SoftmaxCrossEntropy,
}

impl Loss {
    pub fn value(&self, pred: &Vector, target: &Label) -> Result<f64> {
        match (self, target) {
            (Loss::SquaredError, Label::Scalar(y)) => {
                let p = scalar_pred(pred)?;
                Ok(0.5 * (p - y) * (p - y))
            }
            (Loss::SoftmaxCrossEntropy, Label::Class(k)) => {
                check_class(pred, *k)?;
                let lse = log_sum_exp(pred.data());
                Ok(lse - pred.get(*k))
            }
            _ => Err(Error::arg("Loss::value", "loss and label kinds do not match")),
        }
    }

    /// Gradient with respect to the prediction vector.
    pub fn grad(&self, pred: &Vector, target: &Label) -> Result<Vector> {
        match (self, target) {
            (Loss::SquaredError, Label::Scalar(y)) => {
                let p = scalar_pred(pred)?;
                Ok(Vector::from_vec(vec![p - y]))
            }
            (Loss::SoftmaxCrossEntropy, Label::Class(k)) => {
                check_class(pred, *k)?;
                let mx = pred.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = pred.data().iter().map(|v| (v - mx).exp()).collect();
                let z: f64 = exps.iter().sum();
                let mut g: Vec<f64> = exps.iter().map(|e| e / z).collect();
                g[*k] -= 1.0;
                Ok(Vector::from_vec(g))
            }
            _ => Err(Error::arg("Loss::grad", "loss and label kinds do not match")),
        }
    }
}

fn scalar_pred(pred: &Vector) -> Result<f64> {
    if pred.len() != 1 {
        return Err(Error::shape(
            "Loss",
            format!("squared error needs a 1-dim prediction, got {}", pred.len()),
        ));
    }
    Ok(pred.get(0))
}

fn check_class(pred: &Vector, k: usize) -> Result<()> {
    if k >= pred.len() {
        return Err(Error::arg(
            "Loss",
            format!("class {k} out of range for {} logits", pred.len()),
        ));
    }
    Ok(())
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let mx = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    mx + v.iter().map(|x| (x - mx).exp()).sum::<f64>().ln()
}

/// Everything the backward pass needs from a forward pass.
#[derive(Debug, Clone)]
pub enum Tape {
    Fc(FcTape),
    Conv(ConvTape),
}

impl Tape {
    pub fn prediction(&self) -> &Vector {
        match self {
            Tape::Fc(t) => &t.logits,
            Tape::Conv(t) => &t.prediction,
        }
    }
}

/// Full-size gradients (server side or uncompressed baseline).
#[derive(Debug, Clone)]
pub struct DenseGradients {
    pub layers: Vec<Matrix>,
    pub output: Matrix,
}

/// Gradients with respect to each layer's sketched weight (`c x n` each),
/// plus the ordinary gradient of the unsketched output layer.
#[derive(Debug, Clone)]
pub struct SketchedGradients {
    pub layers: Vec<Matrix>,
    pub output: Matrix,
}

/// Gradients with respect to every sketch of every layer (outer: layer,
/// inner: sketch index), plus the output-layer gradient.
#[derive(Debug, Clone)]
pub struct MultiGradients {
    pub layers: Vec<Vec<Matrix>>,
    pub output: Matrix,
}

/// Dense forward pass, dispatching on architecture.
pub fn forward(net: &NetworkState, x: &Features) -> Result<(Vector, Tape)> {
    match &net.spec {
        NetworkSpec::Fc(_) => {
            let (pred, tape) = fc::fc_forward(net, x.flat()?)?;
            Ok((pred, Tape::Fc(tape)))
        }
        NetworkSpec::ConvResNet(_) => {
            let (pred, tape) = conv::conv_forward(net, x.image()?)?;
            Ok((pred, Tape::Conv(tape)))
        }
    }
}

/// Sketched forward pass (single sketch per layer).
pub fn forward_sketched(sknet: &SketchedNetwork, x: &Features) -> Result<(Vector, Tape)> {
    match &sknet.spec {
        NetworkSpec::Fc(_) => {
            let (pred, tape) = fc::fc_forward_sketched(sknet, x.flat()?)?;
            Ok((pred, Tape::Fc(tape)))
        }
        NetworkSpec::ConvResNet(_) => {
            let (pred, tape) = conv::conv_forward_sketched(sknet, x.image()?)?;
            Ok((pred, Tape::Conv(tape)))
        }
    }
}

/// Dense backward pass against a tape from [`forward`].
pub fn backward(net: &NetworkState, tape: &Tape, target: &Label, loss: Loss) -> Result<DenseGradients> {
    match (&net.spec, tape) {
        (NetworkSpec::Fc(_), Tape::Fc(t)) => fc::fc_backward(net, t, target, loss),
        (NetworkSpec::ConvResNet(_), Tape::Conv(t)) => conv::conv_backward(net, t, target, loss),
        _ => Err(Error::shape("backward", "tape does not match network kind")),
    }
}

/// Backward pass producing gradients with respect to the sketched weights.
/// The `c x n` gradient of layer `l` is exactly `H_l` applied to the dense
/// chain-rule gradient; no full-size weight or gradient is formed.
pub fn backward_sketched(
    sknet: &SketchedNetwork,
    tape: &Tape,
    target: &Label,
    loss: Loss,
) -> Result<SketchedGradients> {
    match (&sknet.spec, tape) {
        (NetworkSpec::Fc(_), Tape::Fc(t)) => fc::fc_backward_sketched(sknet, t, target, loss),
        (NetworkSpec::ConvResNet(_), Tape::Conv(t)) => {
            conv::conv_backward_sketched(sknet, t, target, loss)
        }
        _ => Err(Error::shape("backward_sketched", "tape does not match network kind")),
    }
}

/// Median-recovery forward pass over `k` sketches per layer.
pub fn forward_multi(sknet: &SketchedNetwork, x: &Features) -> Result<(Vector, MultiTape)> {
    multi::forward_multi(sknet, x)
}

/// Backward pass for the median-recovery forward: each coordinate's upstream
/// gradient flows only through the sketch(es) the median selected there.
pub fn backward_multi(
    sknet: &SketchedNetwork,
    tape: &MultiTape,
    target: &Label,
    loss: Loss,
) -> Result<MultiGradients> {
    multi::backward_multi(sknet, tape, target, loss)
}

/// `H^T g`: expands a sketched-weight gradient to full size. By the chain
/// rule through `S = H W` this is the gradient with respect to `W` itself.
pub fn recover_full_gradient(op: &SketchOperator, g: &Matrix) -> Result<Matrix> {
    op.unsketch_matrix(g)
}

/// `H1^T g H2`: expands a gradient taken with respect to a two-sided sketch
/// `H1 W H2^T` back to the full weight shape. Equals the Kronecker-form
/// product `(H2 (x) H1^T) vec(g)` reshaped, which the tests materialize.
pub fn two_sided_backward(
    row_op: &SketchOperator,
    col_op: &SketchOperator,
    g: &Matrix,
) -> Result<Matrix> {
    crate::sketch::two_sided_recover(row_op, col_op, g)
}

pub(crate) fn relu_vec(v: &Vector) -> Vector {
    Vector::from_vec(v.data().iter().map(|&x| if x > 0.0 { x } else { 0.0 }).collect())
}

/// Elementwise product with the ReLU mask of `pre` (derivative 1 for
/// `pre > 0`, else 0; the kink at 0 takes the 0 branch).
pub(crate) fn relu_mask_vec(upstream: &Vector, pre: &Vector) -> Vector {
    Vector::from_vec(
        upstream
            .data()
            .iter()
            .zip(pre.data())
            .map(|(&u, &p)| if p > 0.0 { u } else { 0.0 })
            .collect(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spec_validation_catches_bad_shapes() {
        let bad = NetworkSpec::Fc(FcSpec { input_dim: 0, hidden_dims: vec![4], output_dim: 1 });
        assert!(bad.validate().is_err());
        let bad = NetworkSpec::Fc(FcSpec { input_dim: 4, hidden_dims: vec![], output_dim: 1 });
        assert!(bad.validate().is_err());
        let bad = NetworkSpec::ConvResNet(ConvSpec {
            input_channels: 1,
            channels: 4,
            pixels: 10,
            patch: 4,
            depth: 2,
            activation_scale: 1.0,
            residual_scale: 0.5,
        });
        assert!(bad.validate().is_err(), "pixels=10 is not a square");
        let bad = NetworkSpec::ConvResNet(ConvSpec {
            input_channels: 1,
            channels: 4,
            pixels: 9,
            patch: 4,
            depth: 2,
            activation_scale: 1.0,
            residual_scale: 1.0,
        });
        assert!(bad.validate().is_err(), "residual scale 1.0 is out of range");
    }

    #[test]
    fn layer_dims_follow_architecture() {
        let fc = NetworkSpec::Fc(FcSpec { input_dim: 6, hidden_dims: vec![4, 3], output_dim: 2 });
        assert_eq!(fc.sketched_layer_dims(), vec![(4, 6), (3, 4)]);
        assert_eq!(fc.output_dims(), (2, 3));
        let cv = NetworkSpec::ConvResNet(ConvSpec {
            input_channels: 2,
            channels: 4,
            pixels: 9,
            patch: 4,
            depth: 3,
            activation_scale: 1.0,
            residual_scale: 0.5,
        });
        assert_eq!(cv.sketched_layer_dims(), vec![(4, 8), (4, 16), (4, 16)]);
        assert_eq!(cv.output_dims(), (4, 9));
    }

    #[test]
    fn init_is_seed_deterministic_with_fan_in_scaling() {
        let spec = NetworkSpec::Fc(FcSpec {
            input_dim: 200,
            hidden_dims: vec![100],
            output_dim: 1,
        });
        let a = NetworkState::init(spec.clone(), 9).unwrap();
        let b = NetworkState::init(spec, 9).unwrap();
        assert_eq!(a.weights[0], b.weights[0]);
        assert_eq!(a.output, b.output);
        let w = &a.weights[0];
        let n = (w.rows() * w.cols()) as f64;
        let mean: f64 = w.data().iter().sum::<f64>() / n;
        let var: f64 = w.data().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let want_std = (2.0f64 / 200.0).sqrt();
        assert!(mean.abs() < 0.01, "mean {mean}");
        assert!((var.sqrt() - want_std).abs() / want_std < 0.1);
    }

    #[test]
    fn loss_values_and_grads_match_hand_math() {
        let sq = Loss::SquaredError;
        let pred = Vector::from_vec(vec![3.0]);
        assert_eq!(sq.value(&pred, &Label::Scalar(1.0)).unwrap(), 2.0);
        assert_eq!(sq.grad(&pred, &Label::Scalar(1.0)).unwrap().data(), &[2.0]);

        let ce = Loss::SoftmaxCrossEntropy;
        let logits = Vector::from_vec(vec![0.0, 0.0]);
        let v = ce.value(&logits, &Label::Class(0)).unwrap();
        assert!((v - (2.0f64).ln()).abs() <= 1e-12);
        let g = ce.grad(&logits, &Label::Class(0)).unwrap();
        assert!((g.get(0) - (-0.5)).abs() <= 1e-12);
        assert!((g.get(1) - 0.5).abs() <= 1e-12);
        // Softmax gradient always sums to zero.
        let logits = Vector::from_vec(vec![1.0, -2.0, 0.5]);
        let g = ce.grad(&logits, &Label::Class(2)).unwrap();
        assert!(g.data().iter().sum::<f64>().abs() <= 1e-12);
    }

    #[test]
    fn loss_rejects_mismatched_labels() {
        let pred = Vector::from_vec(vec![1.0, 2.0]);
        assert!(Loss::SquaredError.value(&pred, &Label::Scalar(0.0)).is_err());
        assert!(Loss::SoftmaxCrossEntropy.value(&pred, &Label::Scalar(0.0)).is_err());
        assert!(Loss::SoftmaxCrossEntropy.value(&pred, &Label::Class(5)).is_err());
    }

    #[test]
    fn surrogate_with_identity_operators_is_the_network_itself() {
        let spec = NetworkSpec::Fc(FcSpec { input_dim: 6, hidden_dims: vec![5, 4], output_dim: 1 });
        let net = NetworkState::init(spec, 3).unwrap();
        let ops = vec![
            vec![SketchOperator::identity(5)],
            vec![SketchOperator::identity(4)],
        ];
        let sur = net.surrogate(&ops).unwrap();
        assert_eq!(sur.weights[0], net.weights[0]);
        assert_eq!(sur.weights[1], net.weights[1]);
    }
}
