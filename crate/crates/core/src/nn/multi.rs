//! Forward and backward passes over several sketches per layer.
//!
//! Each layer holds `k` independently hashed sketches of the same weight.
//! The forward pass recovers each pre-activation entry as the entrywise
//! median of the `k` candidate recoveries; the backward pass routes each
//! entry's upstream gradient only through the sketch(es) whose candidate the
//! median selected there (both middle candidates at weight 1/2 when `k` is
//! even). With `k = 1` every entry selects the only sketch at weight 1, and
//! both passes reduce to the single-sketch code paths bit for bit.
//!
//! The median is piecewise smooth: its derivative jumps where two candidates
//! cross. [`MultiTape::min_selection_margin`] reports the smallest gap
//! between a selected candidate and its nearest competitor across the whole
//! pass, so callers probing with finite differences can tell whether the
//! selection is stable around the evaluation point.

use super::{
    conv, Features, Label, Loss, MultiGradients, NetworkSpec, SketchedNetwork,
};
use crate::error::{Error, Result};
use crate::numerics::{median_with_sources, outer, Matrix, Vector};

/// Which sketches the entrywise median chose for one layer.
#[derive(Debug, Clone)]
pub struct SelectionPicks {
    /// Per pre-activation entry (row-major for image layers): the
    /// `(sketch index, weight)` pairs that formed the median there.
    pub entries: Vec<Vec<(usize, f64)>>,
}

#[derive(Debug, Clone)]
enum MultiTapeKind {
    Fc {
        activations: Vec<Vector>,
        preacts: Vec<Vector>,
        logits: Vector,
    },
    Conv {
        activations: Vec<Matrix>,
        preacts: Vec<Matrix>,
        patches: Vec<Matrix>,
        prediction: Vector,
    },
}

/// Forward record for a multi-sketch pass.
#[derive(Debug, Clone)]
pub struct MultiTape {
    kind: MultiTapeKind,
    picks: Vec<SelectionPicks>,
    min_selection_margin: f64,
}

impl MultiTape {
    pub fn prediction(&self) -> &Vector {
        match &self.kind {
            MultiTapeKind::Fc { logits, .. } => logits,
            MultiTapeKind::Conv { prediction, .. } => prediction,
        }
    }

    /// Smallest gap between a median-selected candidate and its nearest
    /// competitor over every entry of every layer. Infinite for `k <= 2`,
    /// where the recovery is globally smooth.
    pub fn min_selection_margin(&self) -> f64 {
        self.min_selection_margin
    }

    /// Per-layer selection record.
    pub fn picks(&self) -> &[SelectionPicks] {
        &self.picks
    }

    /// Final hidden activation before the output layer, for fully connected
    /// passes.
    pub(crate) fn fc_hidden_output(&self) -> Option<&Vector> {
        match &self.kind {
            MultiTapeKind::Fc { activations, .. } => activations.last(),
            MultiTapeKind::Conv { .. } => None,
        }
    }
}

/// Gap between the selected order statistic(s) and the nearest unselected
/// candidate; the selection cannot change under perturbations smaller than
/// half this gap.
fn selection_margin(vals: &[f64]) -> f64 {
    let k = vals.len();
    if k <= 1 {
        return f64::INFINITY;
    }
    let mut sorted = vals.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("selection_margin: finite values"));
    if k % 2 == 1 {
        let mid = k / 2;
        (sorted[mid] - sorted[mid - 1]).min(sorted[mid + 1] - sorted[mid])
    } else {
        let lo = k / 2 - 1;
        let hi = k / 2;
        let mut margin = f64::INFINITY;
        if lo > 0 {
            margin = margin.min(sorted[lo] - sorted[lo - 1]);
        }
        if hi + 1 < k {
            margin = margin.min(sorted[hi + 1] - sorted[hi]);
        }
        margin
    }
}

pub(crate) fn forward_multi(
    sknet: &SketchedNetwork,
    x: &Features,
) -> Result<(Vector, MultiTape)> {
    let k = sknet.sketch_count();
    if k == 0 {
        return Err(Error::EmptyInput { op: "forward_multi" });
    }
    let mut min_margin = f64::INFINITY;
    let mut picks_all = Vec::with_capacity(sknet.layers.len());
    match &sknet.spec {
        NetworkSpec::Fc(fc) => {
            let x = x.flat()?;
            if x.len() != fc.input_dim {
                return Err(Error::shape(
                    "forward_multi",
                    format!("input len {} for dimension {}", x.len(), fc.input_dim),
                ));
            }
            let mut activations = vec![x.clone()];
            let mut preacts = Vec::with_capacity(sknet.layers.len());
            for layer in &sknet.layers {
                let prev = activations.last().unwrap();
                let mut cands = Vec::with_capacity(k);
                for sw in &layer.sketches {
                    cands.push(sw.op.apply_transpose(&sw.payload.matvec(prev)?)?);
                }
                let dim = cands[0].len();
                let mut v = Vector::zeros(dim);
                let mut entries = Vec::with_capacity(dim);
                let mut vals = vec![0.0; k];
                for i in 0..dim {
                    for (j, c) in cands.iter().enumerate() {
                        vals[j] = c.get(i);
                    }
                    let (med, picks) = median_with_sources(&vals)?;
                    min_margin = min_margin.min(selection_margin(&vals));
                    v.set(i, med);
                    entries.push(picks);
                }
                activations.push(super::relu_vec(&v));
                preacts.push(v);
                picks_all.push(SelectionPicks { entries });
            }
            let logits = sknet.output.matvec(activations.last().unwrap())?;
            Ok((
                logits.clone(),
                MultiTape {
                    kind: MultiTapeKind::Fc { activations, preacts, logits },
                    picks: picks_all,
                    min_selection_margin: min_margin,
                },
            ))
        }
        NetworkSpec::ConvResNet(spec) => {
            let ximg = x.image()?;
            if ximg.rows() != spec.input_channels || ximg.cols() != spec.pixels {
                return Err(Error::shape(
                    "forward_multi",
                    format!(
                        "input {}x{} for a {}x{} image",
                        ximg.rows(),
                        ximg.cols(),
                        spec.input_channels,
                        spec.pixels
                    ),
                ));
            }
            let (a_first, a_res) = conv::layer_scales(spec);
            let mut activations = vec![ximg.clone()];
            let mut preacts = Vec::with_capacity(spec.depth);
            let mut patches = Vec::with_capacity(spec.depth);
            for (l, layer) in sknet.layers.iter().enumerate() {
                let phi = super::patchify(activations.last().unwrap(), spec.patch)?;
                let mut cands = Vec::with_capacity(k);
                for sw in &layer.sketches {
                    cands.push(sw.op.unsketch_matrix(&sw.payload.matmul(&phi)?)?);
                }
                let (rows, cols) = (cands[0].rows(), cands[0].cols());
                let mut u = Matrix::zeros(rows, cols);
                let mut entries = Vec::with_capacity(rows * cols);
                let mut vals = vec![0.0; k];
                for i in 0..rows {
                    for jc in 0..cols {
                        for (j, c) in cands.iter().enumerate() {
                            vals[j] = c.get(i, jc);
                        }
                        let (med, picks) = median_with_sources(&vals)?;
                        min_margin = min_margin.min(selection_margin(&vals));
                        u.set(i, jc, med);
                        entries.push(picks);
                    }
                }
                let next = conv::layer_output(activations.last().unwrap(), &u, l, a_first, a_res)?;
                patches.push(phi);
                preacts.push(u);
                activations.push(next);
                picks_all.push(SelectionPicks { entries });
            }
            let yhat = sknet.output.frob_inner(activations.last().unwrap())?;
            let prediction = Vector::from_vec(vec![yhat]);
            Ok((
                prediction.clone(),
                MultiTape {
                    kind: MultiTapeKind::Conv { activations, preacts, patches, prediction },
                    picks: picks_all,
                    min_selection_margin: min_margin,
                },
            ))
        }
    }
}

fn route_vector(r: &Vector, picks: &SelectionPicks, sketch: usize) -> Result<Vector> {
    if picks.entries.len() != r.len() {
        return Err(Error::shape(
            "backward_multi",
            format!("{} picks for {} entries", picks.entries.len(), r.len()),
        ));
    }
    let mut out = Vector::zeros(r.len());
    for (i, entry) in picks.entries.iter().enumerate() {
        for &(src, w) in entry {
            if src == sketch {
                out.set(i, r.get(i) * w);
            }
        }
    }
    Ok(out)
}

fn route_matrix(r: &Matrix, picks: &SelectionPicks, sketch: usize) -> Result<Matrix> {
    if picks.entries.len() != r.rows() * r.cols() {
        return Err(Error::shape(
            "backward_multi",
            format!(
                "{} picks for {} entries",
                picks.entries.len(),
                r.rows() * r.cols()
            ),
        ));
    }
    let mut out = Matrix::zeros(r.rows(), r.cols());
    for (idx, entry) in picks.entries.iter().enumerate() {
        let (i, j) = (idx / r.cols(), idx % r.cols());
        for &(src, w) in entry {
            if src == sketch {
                out.set(i, j, r.get(i, j) * w);
            }
        }
    }
    Ok(out)
}

pub(crate) fn backward_multi(
    sknet: &SketchedNetwork,
    tape: &MultiTape,
    target: &Label,
    loss: Loss,
) -> Result<MultiGradients> {
    let k = sknet.sketch_count();
    match (&sknet.spec, &tape.kind) {
        (NetworkSpec::Fc(_), MultiTapeKind::Fc { activations, preacts, logits }) => {
            let dlogits = loss.grad(logits, target)?;
            let output_grad = outer(&dlogits, activations.last().unwrap());
            let mut delta = sknet.output.matvec_transposed(&dlogits)?;
            let depth = sknet.layers.len();
            let mut layers = vec![Vec::new(); depth];
            for l in (0..depth).rev() {
                let r = super::relu_mask_vec(&delta, &preacts[l]);
                let mut per_sketch = Vec::with_capacity(k);
                let mut next_delta: Option<Vector> = None;
                for (j, sw) in sknet.layers[l].sketches.iter().enumerate() {
                    let rj = route_vector(&r, &tape.picks[l], j)?;
                    let hr = sw.op.apply(&rj)?;
                    per_sketch.push(outer(&hr, &activations[l]));
                    if l > 0 {
                        let contrib = sw.payload.matvec_transposed(&hr)?;
                        next_delta = Some(match next_delta {
                            None => contrib,
                            Some(mut d) => {
                                d.add_assign(&contrib)?;
                                d
                            }
                        });
                    }
                }
                layers[l] = per_sketch;
                if l > 0 {
                    delta = next_delta.expect("at least one sketch");
                }
            }
            Ok(MultiGradients { layers, output: output_grad })
        }
        (
            NetworkSpec::ConvResNet(spec),
            MultiTapeKind::Conv { activations, preacts, patches, prediction },
        ) => {
            let gval = loss.grad(prediction, target)?.get(0);
            let output_grad = activations.last().unwrap().scaled(gval);
            let mut dx = sknet.output.scaled(gval);
            let (a_first, a_res) = conv::layer_scales(spec);
            let depth = spec.depth;
            let mut layers = vec![Vec::new(); depth];
            for l in (0..depth).rev() {
                let mut r = conv::relu_mask_mat(&dx, &preacts[l]);
                r.scale(if l == 0 { a_first } else { a_res });
                let mut per_sketch = Vec::with_capacity(k);
                let mut dphi: Option<Matrix> = None;
                for (j, sw) in sknet.layers[l].sketches.iter().enumerate() {
                    let rj = route_matrix(&r, &tape.picks[l], j)?;
                    let hr = sw.op.sketch_matrix(&rj)?;
                    per_sketch.push(hr.matmul_nt(&patches[l])?);
                    if l > 0 {
                        let contrib = sw.payload.matmul_tn(&hr)?;
                        dphi = Some(match dphi {
                            None => contrib,
                            Some(mut d) => {
                                d.add_assign(&contrib)?;
                                d
                            }
                        });
                    }
                }
                layers[l] = per_sketch;
                if l > 0 {
                    let spread = super::patchify_transpose(
                        &dphi.expect("at least one sketch"),
                        spec.channels,
                        spec.patch,
                    )?;
                    dx.add_assign(&spread)?;
                }
            }
            Ok(MultiGradients { layers, output: output_grad })
        }
        _ => Err(Error::shape("backward_multi", "tape does not match network kind")),
    }
}
