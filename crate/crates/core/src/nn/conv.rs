//! Convolutional residual network over patch matrices.
//!
//! Convolution is expressed as a plain matrix product: `patchify` unrolls an
//! activation image into a patch matrix whose column `u` stacks, channel by
//! channel, the window around pixel `u`, so `W phi(x)` applies a `channels`
//! wide convolution with kernel area `patch`. Sketching then works exactly as
//! in the fully connected case, replacing `W phi` with `H^T (S phi)`.
//!
//! Patch layout: row `ch * patch + t` of `phi(x)` holds channel `ch` at
//! window position `t`, with `t` running row-major over the window. The
//! window anchor offset is `-((w - 1) / 2)` for window side `w` (integer
//! division), so odd sides are centered and even sides extend down-right.
//! Out-of-image positions read as zero.

use super::{DenseGradients, Label, Loss, NetworkState, SketchedGradients, SketchedNetwork};
use crate::error::{Error, Result};
use crate::numerics::{Matrix, Vector};

/// Forward record for a convolutional pass.
#[derive(Debug, Clone)]
pub struct ConvTape {
    /// `x^0 ..= x^L`: input image and every layer activation.
    pub activations: Vec<Matrix>,
    /// `u^1 ..= u^L`: pre-activations `W phi(x)` before ReLU and scaling.
    pub preacts: Vec<Matrix>,
    /// `phi(x^0) ..= phi(x^{L-1})`: patch matrices consumed by each layer.
    pub patches: Vec<Matrix>,
    /// One-element prediction vector.
    pub prediction: Vector,
}

fn square_side(n: usize, what: &str, op: &'static str) -> Result<usize> {
    let side = (n as f64).sqrt().round() as usize;
    if side * side != n || n == 0 {
        return Err(Error::arg(op, format!("{what} {n} is not a positive perfect square")));
    }
    Ok(side)
}

/// Unrolls `x` (`channels x pixels`) into its patch matrix
/// (`channels * patch x pixels`).
pub fn patchify(x: &Matrix, patch: usize) -> Result<Matrix> {
    if x.rows() == 0 {
        return Err(Error::EmptyInput { op: "patchify" });
    }
    let side = square_side(x.cols(), "pixel count", "patchify")?;
    let w = square_side(patch, "patch area", "patchify")?;
    let start = -((w as isize - 1) / 2);
    let mut out = Matrix::zeros(x.rows() * patch, x.cols());
    for ch in 0..x.rows() {
        for t in 0..patch {
            let dy = start + (t / w) as isize;
            let dx = start + (t % w) as isize;
            let row_out = ch * patch + t;
            for u in 0..x.cols() {
                let py = (u / side) as isize + dy;
                let px = (u % side) as isize + dx;
                if py >= 0 && py < side as isize && px >= 0 && px < side as isize {
                    out.set(row_out, u, x.get(ch, py as usize * side + px as usize));
                }
            }
        }
    }
    Ok(out)
}

/// Adjoint of [`patchify`]: scatter-adds a `channels * patch x pixels`
/// gradient back onto a `channels x pixels` image, so that
/// `<patchify(x), g> == <x, patchify_transpose(g)>` for all `x`, `g`.
pub fn patchify_transpose(g: &Matrix, channels: usize, patch: usize) -> Result<Matrix> {
    if channels == 0 {
        return Err(Error::EmptyInput { op: "patchify_transpose" });
    }
    if g.rows() != channels * patch {
        return Err(Error::shape(
            "patchify_transpose",
            format!("{} rows for {channels} channels of patch {patch}", g.rows()),
        ));
    }
    let side = square_side(g.cols(), "pixel count", "patchify_transpose")?;
    let w = square_side(patch, "patch area", "patchify_transpose")?;
    let start = -((w as isize - 1) / 2);
    let mut out = Matrix::zeros(channels, g.cols());
    for ch in 0..channels {
        for t in 0..patch {
            let dy = start + (t / w) as isize;
            let dx = start + (t % w) as isize;
            let row_in = ch * patch + t;
            for u in 0..g.cols() {
                let py = (u / side) as isize + dy;
                let px = (u % side) as isize + dx;
                if py >= 0 && py < side as isize && px >= 0 && px < side as isize {
                    let v = py as usize * side + px as usize;
                    out.set(ch, v, out.get(ch, v) + g.get(row_in, u));
                }
            }
        }
    }
    Ok(out)
}

fn conv_spec<'a>(net_spec: &'a super::NetworkSpec, op: &'static str) -> Result<&'a super::ConvSpec> {
    net_spec.conv().ok_or_else(|| Error::shape(op, "network is not convolutional"))
}

fn check_image(spec: &super::ConvSpec, x: &Matrix, op: &'static str) -> Result<()> {
    if x.rows() != spec.input_channels || x.cols() != spec.pixels {
        return Err(Error::shape(
            op,
            format!(
                "input {}x{} for a {}x{} image",
                x.rows(),
                x.cols(),
                spec.input_channels,
                spec.pixels
            ),
        ));
    }
    Ok(())
}

/// `(first-layer scale, residual scale)` for a spec.
pub(crate) fn layer_scales(spec: &super::ConvSpec) -> (f64, f64) {
    let m = spec.channels as f64;
    let a_first = (spec.activation_scale / m).sqrt();
    let a_res = spec.residual_scale / (spec.depth as f64 * m.sqrt());
    (a_first, a_res)
}

pub(crate) fn relu_mat(m: &Matrix) -> Matrix {
    let data = m.data().iter().map(|&x| if x > 0.0 { x } else { 0.0 }).collect();
    Matrix::from_vec(m.rows(), m.cols(), data).expect("shape preserved")
}

/// Entrywise product with the ReLU mask of `pre`; the kink takes 0.
pub(crate) fn relu_mask_mat(upstream: &Matrix, pre: &Matrix) -> Matrix {
    let data = upstream
        .data()
        .iter()
        .zip(pre.data())
        .map(|(&u, &p)| if p > 0.0 { u } else { 0.0 })
        .collect();
    Matrix::from_vec(upstream.rows(), upstream.cols(), data).expect("shape preserved")
}

/// Applies the post-ReLU combination for layer `l` (0-based): the first layer
/// is a plain scaled activation, later layers are residual updates.
pub(crate) fn layer_output(
    prev: &Matrix,
    pre: &Matrix,
    layer: usize,
    a_first: f64,
    a_res: f64,
) -> Result<Matrix> {
    let mut s = relu_mat(pre);
    if layer == 0 {
        s.scale(a_first);
        Ok(s)
    } else {
        s.scale(a_res);
        s.add_assign(prev)?;
        Ok(s)
    }
}

/// Dense forward pass; the prediction is `<W_out, x^L>_F`.
pub fn conv_forward(net: &NetworkState, x: &Matrix) -> Result<(Vector, ConvTape)> {
    let spec = conv_spec(&net.spec, "conv_forward")?;
    check_image(spec, x, "conv_forward")?;
    let (a_first, a_res) = layer_scales(spec);
    let mut activations = Vec::with_capacity(spec.depth + 1);
    activations.push(x.clone());
    let mut preacts = Vec::with_capacity(spec.depth);
    let mut patches = Vec::with_capacity(spec.depth);
    for l in 0..spec.depth {
        let phi = patchify(activations.last().unwrap(), spec.patch)?;
        let u = net.weights[l].matmul(&phi)?;
        let next = layer_output(activations.last().unwrap(), &u, l, a_first, a_res)?;
        patches.push(phi);
        preacts.push(u);
        activations.push(next);
    }
    let yhat = net.output.frob_inner(activations.last().unwrap())?;
    let prediction = Vector::from_vec(vec![yhat]);
    Ok((prediction.clone(), ConvTape { activations, preacts, patches, prediction }))
}

/// Sketched forward pass: each layer computes `H^T (S phi(x))` without ever
/// forming the full `channels x (patch * channels)` weight.
pub fn conv_forward_sketched(sknet: &SketchedNetwork, x: &Matrix) -> Result<(Vector, ConvTape)> {
    let spec = conv_spec(&sknet.spec, "conv_forward_sketched")?;
    check_image(spec, x, "conv_forward_sketched")?;
    let (a_first, a_res) = layer_scales(spec);
    let mut activations = Vec::with_capacity(spec.depth + 1);
    activations.push(x.clone());
    let mut preacts = Vec::with_capacity(spec.depth);
    let mut patches = Vec::with_capacity(spec.depth);
    for l in 0..spec.depth {
        let sw = sknet.single(l)?;
        let phi = patchify(activations.last().unwrap(), spec.patch)?;
        let compressed = sw.payload.matmul(&phi)?;
        let u = sw.op.unsketch_matrix(&compressed)?;
        let next = layer_output(activations.last().unwrap(), &u, l, a_first, a_res)?;
        patches.push(phi);
        preacts.push(u);
        activations.push(next);
    }
    let yhat = sknet.output.frob_inner(activations.last().unwrap())?;
    let prediction = Vector::from_vec(vec![yhat]);
    Ok((prediction.clone(), ConvTape { activations, preacts, patches, prediction }))
}

/// Dense backward pass. Layer scaling folds into the upstream signal, so the
/// per-layer gradient is `scale * (dx . mask) phi^T`.
pub fn conv_backward(
    net: &NetworkState,
    tape: &ConvTape,
    target: &Label,
    loss: Loss,
) -> Result<DenseGradients> {
    let spec = conv_spec(&net.spec, "conv_backward")?;
    let gval = loss.grad(&tape.prediction, target)?.get(0);
    let output_grad = tape.activations.last().unwrap().scaled(gval);
    let mut dx = net.output.scaled(gval);
    let (a_first, a_res) = layer_scales(spec);
    let mut layers = vec![None; spec.depth];
    for l in (0..spec.depth).rev() {
        let mut r = relu_mask_mat(&dx, &tape.preacts[l]);
        r.scale(if l == 0 { a_first } else { a_res });
        layers[l] = Some(r.matmul_nt(&tape.patches[l])?);
        if l > 0 {
            let dphi = net.weights[l].matmul_tn(&r)?;
            dx.add_assign(&patchify_transpose(&dphi, spec.channels, spec.patch)?)?;
        }
    }
    Ok(DenseGradients {
        layers: layers.into_iter().map(Option::unwrap).collect(),
        output: output_grad,
    })
}

/// Backward pass with respect to the sketched weights: layer `l` yields
/// `(H r) phi^T`, and the downstream image gradient flows through
/// `S^T (H r)` plus the residual identity path.
pub fn conv_backward_sketched(
    sknet: &SketchedNetwork,
    tape: &ConvTape,
    target: &Label,
    loss: Loss,
) -> Result<SketchedGradients> {
    let spec = conv_spec(&sknet.spec, "conv_backward_sketched")?;
    let gval = loss.grad(&tape.prediction, target)?.get(0);
    let output_grad = tape.activations.last().unwrap().scaled(gval);
    let mut dx = sknet.output.scaled(gval);
    let (a_first, a_res) = layer_scales(spec);
    let mut layers = vec![None; spec.depth];
    for l in (0..spec.depth).rev() {
        let sw = sknet.single(l)?;
        let mut r = relu_mask_mat(&dx, &tape.preacts[l]);
        r.scale(if l == 0 { a_first } else { a_res });
        let hr = sw.op.sketch_matrix(&r)?;
        layers[l] = Some(hr.matmul_nt(&tape.patches[l])?);
        if l > 0 {
            let dphi = sw.payload.matmul_tn(&hr)?;
            dx.add_assign(&patchify_transpose(&dphi, spec.channels, spec.patch)?)?;
        }
    }
    Ok(SketchedGradients {
        layers: layers.into_iter().map(Option::unwrap).collect(),
        output: output_grad,
    })
}

#[cfg(test)]
mod tests {
    use super::super::{
        finite_difference_gradient, recover_full_gradient, ConvSpec, NetworkSpec, NetworkState,
        SketchedLayer, SketchedNetwork,
    };
    use super::*;
    use crate::numerics::alloc_watch;
    use crate::sketch::{SketchOperator, SketchedWeight};
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn conv_spec_of(
        input_channels: usize,
        channels: usize,
        pixels: usize,
        patch: usize,
        depth: usize,
        residual_scale: f64,
    ) -> NetworkSpec {
        NetworkSpec::ConvResNet(ConvSpec {
            input_channels,
            channels,
            pixels,
            patch,
            depth,
            activation_scale: 2.0,
            residual_scale,
        })
    }

    fn random_image(rng: &mut ChaCha8Rng, channels: usize, pixels: usize) -> Matrix {
        let data = (0..channels * pixels).map(|_| rng.random_range(-1.0..1.0)).collect();
        Matrix::from_vec(channels, pixels, data).unwrap()
    }

    fn sketch_conv(net: &NetworkState, sketch_len: usize, seed: u64) -> SketchedNetwork {
        let ops = net
            .spec
            .sketched_layer_dims()
            .iter()
            .enumerate()
            .map(|(l, &(d, _))| {
                vec![SketchOperator::new(d, sketch_len.min(d), crate::seeding::derive(seed, l as u64))
                    .unwrap()]
            })
            .collect();
        SketchedNetwork::sketch(net, ops).unwrap()
    }

    #[test]
    fn patch_area_one_is_the_identity() {
        let x = Matrix::from_rows(&[
            vec![1.0, 2.0, 3.0, 4.0],
            vec![-1.0, -2.0, -3.0, -4.0],
        ])
        .unwrap();
        assert_eq!(patchify(&x, 1).unwrap(), x);
    }

    #[test]
    fn corner_pixel_of_a_2x2_image_sees_four_neighbors() {
        // 3x3 window on a 2x2 image: every pixel has exactly 4 in-bounds
        // neighbors, the rest of the column is zero padding.
        let x = Matrix::from_vec(1, 4, vec![1.0; 4]).unwrap();
        let phi = patchify(&x, 9).unwrap();
        assert_eq!(phi.rows(), 9);
        for u in 0..4 {
            let nonzero = (0..9).filter(|&t| phi.get(t, u) != 0.0).count();
            assert_eq!(nonzero, 4, "pixel {u}");
        }
        // Top-left pixel: the window rows -1 and columns -1 fall outside, so
        // positions 4 (self), 5 (right), 7 (down), 8 (down-right) remain.
        let col0: Vec<f64> = (0..9).map(|t| phi.get(t, 0)).collect();
        assert_eq!(col0, vec![0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 0.0, 1.0, 1.0]);
    }

    /// Direct per-entry gather with explicit 2-d coordinates, arranged
    /// differently from the implementation.
    fn patchify_oracle(x: &Matrix, patch: usize) -> Matrix {
        let side = (x.cols() as f64).sqrt() as usize;
        let w = (patch as f64).sqrt() as usize;
        let anchor = (w as isize - 1) / 2;
        let mut out = Matrix::zeros(x.rows() * patch, x.cols());
        for row_out in 0..x.rows() * patch {
            let ch = row_out / patch;
            let t = row_out % patch;
            for u in 0..x.cols() {
                let ny = u as isize / side as isize + t as isize / w as isize - anchor;
                let nx = u as isize % side as isize + t as isize % w as isize - anchor;
                let inside = (0..side as isize).contains(&ny) && (0..side as isize).contains(&nx);
                if inside {
                    out.set(row_out, u, x.get(ch, (ny * side as isize + nx) as usize));
                }
            }
        }
        out
    }

    #[test]
    fn patchify_matches_gather_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for &(channels, pixels, patch) in &[(1, 9, 9), (2, 9, 4), (3, 16, 9), (2, 4, 1)] {
            let x = random_image(&mut rng, channels, pixels);
            assert_eq!(patchify(&x, patch).unwrap(), patchify_oracle(&x, patch));
        }
    }

    #[test]
    fn patchify_transpose_is_the_adjoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for &(channels, pixels, patch) in &[(1, 4, 9), (2, 9, 9), (2, 16, 4)] {
            let x = random_image(&mut rng, channels, pixels);
            let g = random_image(&mut rng, channels * patch, pixels);
            let lhs = patchify(&x, patch).unwrap().frob_inner(&g).unwrap();
            let rhs = x
                .frob_inner(&patchify_transpose(&g, channels, patch).unwrap())
                .unwrap();
            assert!((lhs - rhs).abs() <= 1e-12 * lhs.abs().max(1.0));
        }
    }

    #[test]
    fn patchify_rejects_non_square_dimensions() {
        let x = Matrix::zeros(1, 6);
        assert!(patchify(&x, 4).is_err());
        let x = Matrix::zeros(1, 4);
        assert!(patchify(&x, 6).is_err());
        assert!(patchify_transpose(&Matrix::zeros(8, 4), 1, 4).is_err());
    }

    #[test]
    fn one_pixel_network_matches_hand_computation() {
        // All dims 1: pred = w_out * sqrt(2) * relu(w1 * x).
        let spec = conv_spec_of(1, 1, 1, 1, 1, 0.0);
        let mut net = NetworkState::init(spec, 0).unwrap();
        net.weights[0] = Matrix::from_vec(1, 1, vec![3.0]).unwrap();
        net.output = Matrix::from_vec(1, 1, vec![7.0]).unwrap();
        let x = Matrix::from_vec(1, 1, vec![5.0]).unwrap();
        let (pred, _) = conv_forward(&net, &x).unwrap();
        let want = 7.0 * 2.0f64.sqrt() * 15.0;
        assert!((pred.get(0) - want).abs() <= 1e-12);
    }

    #[test]
    fn residual_layer_matches_hand_computation() {
        // Dims 1, depth 2: x1 = sqrt(2) relu(w1 x); x2 = x1 + (res/2) relu(w2 x1).
        let spec = conv_spec_of(1, 1, 1, 1, 2, 0.5);
        let mut net = NetworkState::init(spec, 0).unwrap();
        net.weights[0] = Matrix::from_vec(1, 1, vec![2.0]).unwrap();
        net.weights[1] = Matrix::from_vec(1, 1, vec![4.0]).unwrap();
        net.output = Matrix::from_vec(1, 1, vec![3.0]).unwrap();
        let x = Matrix::from_vec(1, 1, vec![1.5]).unwrap();
        let (pred, tape) = conv_forward(&net, &x).unwrap();
        let x1 = 2.0f64.sqrt() * 3.0;
        let x2 = x1 + 0.25 * (4.0 * x1);
        assert!((pred.get(0) - 3.0 * x2).abs() <= 1e-12);
        assert!((tape.activations[1].get(0, 0) - x1).abs() <= 1e-12);
    }

    #[test]
    fn zero_residual_scale_freezes_deep_activations() {
        let spec = conv_spec_of(2, 3, 9, 4, 4, 0.0);
        let net = NetworkState::init(spec, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = random_image(&mut rng, 2, 9);
        let (_, tape) = conv_forward(&net, &x).unwrap();
        for l in 2..=4 {
            assert_eq!(tape.activations[l], tape.activations[1]);
        }
    }

    #[test]
    fn zero_input_predicts_zero() {
        let spec = conv_spec_of(1, 3, 4, 4, 3, 0.3);
        let net = NetworkState::init(spec, 9).unwrap();
        let (pred, _) = conv_forward(&net, &Matrix::zeros(1, 4)).unwrap();
        assert_eq!(pred.get(0), 0.0);
    }

    #[test]
    fn identity_operators_reproduce_dense_forward_and_backward() {
        let spec = conv_spec_of(2, 3, 9, 4, 3, 0.4);
        let net = NetworkState::init(spec, 21).unwrap();
        let ops = net
            .spec
            .sketched_layer_dims()
            .iter()
            .map(|&(d, _)| vec![SketchOperator::identity(d)])
            .collect();
        let sknet = SketchedNetwork::sketch(&net, ops).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let x = random_image(&mut rng, 2, 9);
        let (dense_pred, dense_tape) = conv_forward(&net, &x).unwrap();
        let (sk_pred, sk_tape) = conv_forward_sketched(&sknet, &x).unwrap();
        assert_eq!(dense_pred, sk_pred);
        let y = Label::Scalar(0.8);
        let dg = conv_backward(&net, &dense_tape, &y, Loss::SquaredError).unwrap();
        let sg = conv_backward_sketched(&sknet, &sk_tape, &y, Loss::SquaredError).unwrap();
        for l in 0..3 {
            assert_eq!(dg.layers[l], sg.layers[l]);
        }
        assert_eq!(dg.output, sg.output);
    }

    #[test]
    fn sketched_forward_equals_dense_surrogate() {
        for seed in 0..5u64 {
            let spec = conv_spec_of(1, 4, 9, 4, 3, 0.5);
            let net = NetworkState::init(spec, 100 + seed).unwrap();
            let sknet = sketch_conv(&net, 2, 200 + seed);
            let ops: Vec<Vec<SketchOperator>> = sknet
                .layers
                .iter()
                .map(|l| vec![l.sketches[0].op.clone()])
                .collect();
            let sur = net.surrogate(&ops).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(300 + seed);
            let x = random_image(&mut rng, 1, 9);
            let (a, _) = conv_forward_sketched(&sknet, &x).unwrap();
            let (b, _) = conv_forward(&sur, &x).unwrap();
            assert!((a.get(0) - b.get(0)).abs() <= 1e-12 * a.get(0).abs().max(1.0));
        }
    }

    fn kink_margin(tape: &ConvTape) -> f64 {
        tape.preacts
            .iter()
            .flat_map(|m| m.data().iter())
            .fold(f64::INFINITY, |acc, &v| acc.min(v.abs()))
    }

    #[test]
    fn dense_gradient_matches_finite_differences() {
        let h = 1e-5;
        let mut checked = 0;
        let mut seed = 0u64;
        while checked < 3 {
            seed += 1;
            let spec = conv_spec_of(1, 3, 4, 4, 2, 0.6);
            let net = NetworkState::init(spec, 400 + seed).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(500 + seed);
            let x = random_image(&mut rng, 1, 4);
            let y = Label::Scalar(0.2);
            let (_, tape) = conv_forward(&net, &x).unwrap();
            if kink_margin(&tape) < 1e-3 {
                continue; // pre-activation too close to the ReLU kink
            }
            let grads = conv_backward(&net, &tape, &y, Loss::SquaredError).unwrap();
            for l in 0..net.weights.len() {
                let fd = finite_difference_gradient(
                    &mut |w: &Matrix| {
                        let mut alt = net.clone();
                        alt.weights[l] = w.clone();
                        let (_, t) = conv_forward(&alt, &x)?;
                        Loss::SquaredError.value(&t.prediction, &y)
                    },
                    &net.weights[l],
                    h,
                )
                .unwrap();
                let mut diff = grads.layers[l].clone();
                diff.sub_assign(&fd).unwrap();
                let rel = diff.frobenius_norm() / fd.frobenius_norm().max(1e-9);
                assert!(rel <= 1e-5, "layer {l}: rel err {rel}");
            }
            checked += 1;
        }
    }

    #[test]
    fn sketched_gradient_matches_finite_differences_on_payload() {
        let h = 1e-5;
        let mut checked = 0;
        let mut seed = 0u64;
        while checked < 3 {
            seed += 1;
            let spec = conv_spec_of(1, 4, 4, 4, 2, 0.5);
            let net = NetworkState::init(spec, 600 + seed).unwrap();
            let sknet = sketch_conv(&net, 2, 700 + seed);
            let mut rng = ChaCha8Rng::seed_from_u64(800 + seed);
            let x = random_image(&mut rng, 1, 4);
            let y = Label::Scalar(-0.4);
            let (_, tape) = conv_forward_sketched(&sknet, &x).unwrap();
            if kink_margin(&tape) < 1e-3 {
                continue;
            }
            let analytic =
                conv_backward_sketched(&sknet, &tape, &y, Loss::SquaredError).unwrap();
            for l in 0..sknet.layers.len() {
                let base = sknet.layers[l].sketches[0].payload.clone();
                let op = sknet.layers[l].sketches[0].op.clone();
                let fd = finite_difference_gradient(
                    &mut |p: &Matrix| {
                        let mut alt = sknet.clone();
                        alt.layers[l] = SketchedLayer {
                            sketches: vec![SketchedWeight::new(op.clone(), p.clone())?],
                        };
                        let (_, t) = conv_forward_sketched(&alt, &x)?;
                        Loss::SquaredError.value(&t.prediction, &y)
                    },
                    &base,
                    h,
                )
                .unwrap();
                let mut diff = analytic.layers[l].clone();
                diff.sub_assign(&fd).unwrap();
                let rel = diff.frobenius_norm() / fd.frobenius_norm().max(1e-9);
                assert!(rel <= 1e-5, "layer {l}: rel err {rel}");
            }
            checked += 1;
        }
    }

    #[test]
    fn recovered_gradient_matches_finite_differences_on_full_weight() {
        let h = 1e-5;
        let mut checked = 0;
        let mut seed = 0u64;
        while checked < 2 {
            seed += 1;
            let spec = conv_spec_of(1, 4, 4, 4, 2, 0.5);
            let net = NetworkState::init(spec, 900 + seed).unwrap();
            let sknet = sketch_conv(&net, 2, 950 + seed);
            let mut rng = ChaCha8Rng::seed_from_u64(970 + seed);
            let x = random_image(&mut rng, 1, 4);
            let y = Label::Scalar(0.1);
            let (_, tape) = conv_forward_sketched(&sknet, &x).unwrap();
            if kink_margin(&tape) < 1e-3 {
                continue;
            }
            let g = conv_backward_sketched(&sknet, &tape, &y, Loss::SquaredError).unwrap();
            for l in 0..net.weights.len() {
                let op = sknet.layers[l].sketches[0].op.clone();
                let recovered = recover_full_gradient(&op, &g.layers[l]).unwrap();
                let fd = finite_difference_gradient(
                    &mut |w: &Matrix| {
                        let mut alt = sknet.clone();
                        alt.layers[l] = SketchedLayer {
                            sketches: vec![SketchedWeight::sketch(op.clone(), w)?],
                        };
                        let (_, t) = conv_forward_sketched(&alt, &x)?;
                        Loss::SquaredError.value(&t.prediction, &y)
                    },
                    &net.weights[l],
                    h,
                )
                .unwrap();
                let mut diff = recovered.clone();
                diff.sub_assign(&fd).unwrap();
                let rel = diff.frobenius_norm() / fd.frobenius_norm().max(1e-9);
                assert!(rel <= 1e-5, "layer {l}: rel err {rel}");
            }
            checked += 1;
        }
    }

    #[test]
    fn forward_rejects_wrong_image_shape() {
        let spec = conv_spec_of(2, 3, 9, 4, 2, 0.5);
        let net = NetworkState::init(spec, 1).unwrap();
        assert!(conv_forward(&net, &Matrix::zeros(1, 9)).is_err());
        assert!(conv_forward(&net, &Matrix::zeros(2, 4)).is_err());
    }

    #[test]
    fn sketched_path_never_materializes_a_full_weight() {
        // channels 4, patch 4, 1 input channel: full weights are 4x4 (layer 1)
        // and 4x16 (deeper); neither shape may be allocated while training on
        // sketches, nor their transposes.
        let spec = conv_spec_of(1, 4, 9, 4, 3, 0.5);
        let net = NetworkState::init(spec, 33).unwrap();
        let sknet = sketch_conv(&net, 2, 34);
        let mut rng = ChaCha8Rng::seed_from_u64(35);
        let x = random_image(&mut rng, 1, 9);
        alloc_watch::start();
        let (_, tape) = conv_forward_sketched(&sknet, &x).unwrap();
        let _ = conv_backward_sketched(&sknet, &tape, &Label::Scalar(0.5), Loss::SquaredError)
            .unwrap();
        let log = alloc_watch::stop();
        assert!(!log.is_empty());
        for (r, c) in log {
            assert!(!(r == 4 && c == 16), "allocated a full 4x16 weight");
            assert!(!(r == 16 && c == 4), "allocated a transposed full weight");
            assert!(!(r == 4 && c == 4), "allocated a full first-layer weight");
        }
    }
}
