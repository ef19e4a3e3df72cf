//! Fully connected forward/backward passes, dense and sketched.
//!
//! Sketched evaluation order is fixed: for a layer with payload `S = H W`,
//! compute `p = S x` (compressed, length `c`) first, then `v = H^T p`
//! (length `d`), then ReLU. The full product `H^T S` is never formed, so
//! peak memory stays at vectors of length `d` plus the `c x n` payload.

use super::{
    relu_mask_vec, relu_vec, DenseGradients, Label, Loss, NetworkState, SketchedGradients,
    SketchedNetwork,
};
use crate::error::{Error, Result};
use crate::numerics::{outer, Vector};

/// Forward record for a fully connected pass.
#[derive(Debug, Clone)]
pub struct FcTape {
    /// `x^0 ..= x^L`: input and every post-activation.
    pub activations: Vec<Vector>,
    /// `v^1 ..= v^L`: pre-activations at full width.
    pub preacts: Vec<Vector>,
    /// `p^1 ..= p^L`: compressed products `S x`, sketched passes only.
    pub compressed: Option<Vec<Vector>>,
    /// Output-layer logits.
    pub logits: Vector,
}

fn check_input(dim: usize, x: &Vector, op: &'static str) -> Result<()> {
    if x.len() != dim {
        return Err(Error::shape(op, format!("input len {} for dimension {dim}", x.len())));
    }
    Ok(())
}

/// Dense forward pass: ReLU after every hidden layer, linear output.
pub fn fc_forward(net: &NetworkState, x: &Vector) -> Result<(Vector, FcTape)> {
    let fc = match &net.spec {
        super::NetworkSpec::Fc(fc) => fc,
        _ => return Err(Error::shape("fc_forward", "network is not fully connected")),
    };
    check_input(fc.input_dim, x, "fc_forward")?;
    let mut activations = vec![x.clone()];
    let mut preacts = Vec::with_capacity(net.weights.len());
    for w in &net.weights {
        let v = w.matvec(activations.last().unwrap())?;
        activations.push(relu_vec(&v));
        preacts.push(v);
    }
    let logits = net.output.matvec(activations.last().unwrap())?;
    Ok((logits.clone(), FcTape { activations, preacts, compressed: None, logits }))
}

/// Sketched forward pass over single-sketch layers.
pub fn fc_forward_sketched(sknet: &SketchedNetwork, x: &Vector) -> Result<(Vector, FcTape)> {
    let fc = match &sknet.spec {
        super::NetworkSpec::Fc(fc) => fc,
        _ => return Err(Error::shape("fc_forward_sketched", "network is not fully connected")),
    };
    check_input(fc.input_dim, x, "fc_forward_sketched")?;
    let mut activations = vec![x.clone()];
    let mut preacts = Vec::with_capacity(sknet.layers.len());
    let mut compressed = Vec::with_capacity(sknet.layers.len());
    for l in 0..sknet.layers.len() {
        let sw = sknet.single(l)?;
        let p = sw.payload.matvec(activations.last().unwrap())?;
        let v = sw.op.apply_transpose(&p)?;
        activations.push(relu_vec(&v));
        preacts.push(v);
        compressed.push(p);
    }
    let logits = sknet.output.matvec(activations.last().unwrap())?;
    Ok((
        logits.clone(),
        FcTape { activations, preacts, compressed: Some(compressed), logits },
    ))
}

/// Dense backward pass; gradients for every hidden weight and the output.
pub fn fc_backward(
    net: &NetworkState,
    tape: &FcTape,
    target: &Label,
    loss: Loss,
) -> Result<DenseGradients> {
    let dlogits = loss.grad(&tape.logits, target)?;
    let output_grad = outer(&dlogits, tape.activations.last().unwrap());
    let mut delta = net.output.matvec_transposed(&dlogits)?;
    let depth = net.weights.len();
    let mut layers = vec![None; depth];
    for l in (0..depth).rev() {
        let r = relu_mask_vec(&delta, &tape.preacts[l]);
        layers[l] = Some(outer(&r, &tape.activations[l]));
        if l > 0 {
            delta = net.weights[l].matvec_transposed(&r)?;
        }
    }
    Ok(DenseGradients {
        layers: layers.into_iter().map(Option::unwrap).collect(),
        output: output_grad,
    })
}

/// Backward pass with respect to the sketched weights: for each layer,
/// `g = (H r) x_prev^T`, a `c x n` matrix. `r` is the upstream gradient
/// after the ReLU mask; the downstream signal continues through `S^T (H r)`.
pub fn fc_backward_sketched(
    sknet: &SketchedNetwork,
    tape: &FcTape,
    target: &Label,
    loss: Loss,
) -> Result<SketchedGradients> {
    let dlogits = loss.grad(&tape.logits, target)?;
    let output_grad = outer(&dlogits, tape.activations.last().unwrap());
    let mut delta = sknet.output.matvec_transposed(&dlogits)?;
    let depth = sknet.layers.len();
    let mut layers = vec![None; depth];
    for l in (0..depth).rev() {
        let sw = sknet.single(l)?;
        let r = relu_mask_vec(&delta, &tape.preacts[l]);
        let hr = sw.op.apply(&r)?;
        layers[l] = Some(outer(&hr, &tape.activations[l]));
        if l > 0 {
            delta = sw.payload.matvec_transposed(&hr)?;
        }
    }
    Ok(SketchedGradients {
        layers: layers.into_iter().map(Option::unwrap).collect(),
        output: output_grad,
    })
}
