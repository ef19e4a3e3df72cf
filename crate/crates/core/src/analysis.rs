//! Executable checks for the compressed model's formal guarantees.
//!
//! Three oracles live here. [`prediction_error_bound`] evaluates a layered
//! bound on how far the sketched forward pass can drift from the dense one,
//! alongside the measured drift. [`hcs_recovery_check`] measures the
//! empirical per-entry failure rate of median-of-sketches recovery at a
//! given tolerance. [`convergence_report`] condenses a training run's
//! gradient-norm series into a running minimum and a log-log trend slope.
//!
//! All three are pure functions; the Monte-Carlo check derives one child
//! seed per trial, so trials could be distributed without changing results.

use crate::error::{Error, Result};
use crate::nn::{forward, forward_multi, forward_sketched, Features, NetworkSpec, NetworkState, SketchedNetwork, Tape};
use crate::numerics::{spectral_norm, Matrix, Vector};
use crate::seeding::child_seed;
use crate::sketch::{MultiSketch, SketchMode, SketchOperator};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

const SPECTRAL_ITERS: usize = 1000;
const SPECTRAL_TOL: f64 = 1e-12;

/// A layered worst-case bound on the sketched forward pass's output error,
/// next to the error actually measured at the final hidden activation.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ErrorBoundReport {
    /// Largest singular value of each hidden weight matrix.
    pub lambda: Vec<f64>,
    /// Largest singular value of the recovery map `H^T H`, maximized over
    /// each layer's operators.
    pub lambda_hat: Vec<f64>,
    /// Per-layer bound contributions; the bound is their sum.
    pub terms: Vec<f64>,
    /// The bound with the quadratic-in-dimension per-layer error term.
    pub bound: f64,
    /// The same sum with a linear-in-dimension per-layer error term, logged
    /// alongside as the tighter variant the layer recursion supports.
    pub bound_linear_dim: f64,
    /// Measured `||y_sketched - y_dense||` over the hidden stack.
    pub empirical: f64,
    /// Per-entry recovery tolerance the sketch width was sized for.
    pub eps: f64,
    /// Per-layer failure probability budget behind that sizing.
    pub delta: f64,
    /// Whether the measured error sits within the (quadratic) bound.
    pub holds: bool,
}

impl ErrorBoundReport {
    fn check(&self) -> Result<()> {
        let all = self
            .lambda
            .iter()
            .chain(&self.lambda_hat)
            .chain(&self.terms)
            .chain([&self.bound, &self.bound_linear_dim, &self.empirical]);
        for v in all {
            if !v.is_finite() {
                return Err(Error::non_finite("ErrorBoundReport"));
            }
        }
        if self.bound < 0.0 {
            return Err(Error::arg("ErrorBoundReport", "bound must be nonnegative"));
        }
        Ok(())
    }
}

/// Per-layer bound contributions from the spectral data: term `j` is
/// `(prod_{i>=j} lambda_i) * ||x|| * d_j^p * eps^2 * (prod_{n<j} lhat_n)`
/// with `p = 2` for the quadratic variant and `p = 1` for the linear one.
fn bound_terms(
    lambda: &[f64],
    lambda_hat: &[f64],
    dims: &[usize],
    x_norm: f64,
    eps: f64,
    quadratic: bool,
) -> Vec<f64> {
    (0..lambda.len())
        .map(|j| {
            let tail: f64 = lambda[j..].iter().product();
            let head: f64 = lambda_hat[..j].iter().product();
            let dim = dims[j] as f64;
            let dim_factor = if quadratic { dim * dim } else { dim };
            tail * x_norm * dim_factor * eps * eps * head
        })
        .collect()
}

/// Evaluates the layered error bound for a fully connected network against
/// the measured sketched-versus-dense drift on input `x`.
///
/// `eps` is the per-entry recovery tolerance the sketch width was chosen
/// for and `delta` the failure probability budget behind it; both are
/// recorded in the report, and `eps` scales the bound. The per-layer
/// dimension entering the bound is the sketched (row) dimension of that
/// layer's weights. Networks with image inputs are not supported.
pub fn prediction_error_bound(
    net: &NetworkState,
    sknet: &SketchedNetwork,
    x: &Vector,
    eps: f64,
    delta: f64,
) -> Result<ErrorBoundReport> {
    if !matches!(net.spec, NetworkSpec::Fc(_)) {
        return Err(Error::Unsupported(
            "prediction_error_bound covers fully connected networks only".into(),
        ));
    }
    if sknet.layers.len() != net.weights.len() {
        return Err(Error::shape(
            "prediction_error_bound",
            format!("{} sketched layers for {} weight matrices", sknet.layers.len(), net.weights.len()),
        ));
    }
    if !(eps.is_finite() && eps > 0.0) {
        return Err(Error::arg("prediction_error_bound", format!("tolerance {eps} not positive")));
    }
    if !(delta > 0.0 && delta <= 1.0) {
        return Err(Error::arg("prediction_error_bound", format!("probability {delta} outside (0, 1]")));
    }
    let lambda: Vec<f64> = net
        .weights
        .iter()
        .map(|w| spectral_norm(w, SPECTRAL_ITERS, SPECTRAL_TOL).value)
        .collect();
    let mut lambda_hat = Vec::with_capacity(sknet.layers.len());
    for layer in &sknet.layers {
        let mut worst = 0.0f64;
        for sw in &layer.sketches {
            let h = sw.op.materialize();
            let gram = h.matmul_tn(&h)?;
            worst = worst.max(spectral_norm(&gram, SPECTRAL_ITERS, SPECTRAL_TOL).value);
        }
        lambda_hat.push(worst);
    }
    let dims: Vec<usize> = net.weights.iter().map(|w| w.rows()).collect();
    let x_norm = x.l2_norm();
    let terms = bound_terms(&lambda, &lambda_hat, &dims, x_norm, eps, true);
    let bound: f64 = terms.iter().sum();
    let bound_linear_dim: f64 =
        bound_terms(&lambda, &lambda_hat, &dims, x_norm, eps, false).iter().sum();

    let features = Features::Flat(x.clone());
    let (_, dense_tape) = forward(net, &features)?;
    let dense_hidden = match &dense_tape {
        Tape::Fc(t) => t.activations.last().expect("fc tape has activations").clone(),
        Tape::Conv(_) => unreachable!("spec checked above"),
    };
    let sketched_hidden = if sknet.sketch_count() > 1 {
        let (_, tape) = forward_multi(sknet, &features)?;
        tape.fc_hidden_output().expect("fc network").clone()
    } else {
        let (_, tape) = forward_sketched(sknet, &features)?;
        match &tape {
            Tape::Fc(t) => t.activations.last().expect("fc tape has activations").clone(),
            Tape::Conv(_) => unreachable!("spec checked above"),
        }
    };
    let empirical = sketched_hidden.sub(&dense_hidden)?.l2_norm();

    let report = ErrorBoundReport {
        holds: empirical <= bound,
        lambda,
        lambda_hat,
        terms,
        bound,
        bound_linear_dim,
        empirical,
        eps,
        delta,
    };
    report.check()?;
    Ok(report)
}

/// Columns of the random matrices the recovery check draws.
const RECOVERY_COLS: usize = 4;

/// Measures how often median-of-`k` recovery misses an entry by more than
/// `eps`, over `trials` random unit-Frobenius-norm `d x 4` matrices
/// sketched to length `c`. Returns the failing fraction of all entries.
///
/// Identity mode demands `c == d` and recovers exactly. Trials are seeded
/// individually from `seed`, and a trial's first operators are shared
/// across different `k` at the same seed, so failure rates for growing `k`
/// are directly comparable.
pub fn hcs_recovery_check(
    d: usize,
    c: usize,
    k: usize,
    trials: usize,
    eps: f64,
    mode: SketchMode,
    seed: u64,
) -> Result<f64> {
    if trials < 100 {
        return Err(Error::arg(
            "hcs_recovery_check",
            format!("{trials} trials cannot resolve a failure rate; use at least 100"),
        ));
    }
    if k == 0 {
        return Err(Error::arg("hcs_recovery_check", "at least one sketch required"));
    }
    if mode == SketchMode::Identity && c != d {
        return Err(Error::arg(
            "hcs_recovery_check",
            "identity hashing fixes the sketch length to the input dimension",
        ));
    }
    if eps.is_nan() || eps <= 0.0 {
        return Err(Error::arg("hcs_recovery_check", format!("tolerance {eps} not positive")));
    }
    let mut failures = 0u64;
    let mut total = 0u64;
    for t in 0..trials {
        let ms = match mode {
            SketchMode::Identity => {
                MultiSketch::from_ops(vec![SketchOperator::identity(d); k])?
            }
            SketchMode::Random => {
                MultiSketch::new(d, c, k, child_seed(seed, &[1, t as u64]))?
            }
        };
        let mut rng = ChaCha8Rng::seed_from_u64(child_seed(seed, &[2, t as u64]));
        let mut data: Vec<f64> =
            (0..d * RECOVERY_COLS).map(|_| StandardNormal.sample(&mut rng)).collect();
        let norm: f64 = data.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            for v in &mut data {
                *v /= norm;
            }
        }
        let target = Matrix::from_vec(d, RECOVERY_COLS, data)?;
        let sketches = ms.sketch_matrix(&target)?;
        let recovered = ms.recover_median(&sketches)?;
        for (a, b) in recovered.data().iter().zip(target.data()) {
            total += 1;
            if (a - b).abs() > eps {
                failures += 1;
            }
        }
    }
    Ok(failures as f64 / total as f64)
}

/// A gradient-norm series condensed into its running minimum and the
/// least-squares slope of `log(min)` against `log(round)`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConvergenceReport {
    /// The input series: squared gradient norms, one per round.
    pub series: Vec<f64>,
    /// Running minimum of the series; nonincreasing by construction.
    pub running_min: Vec<f64>,
    /// Log-log trend slope of the running minimum over rounds counted from
    /// one. Zero when fewer than two positive points are available.
    pub slope: f64,
}

/// Builds a [`ConvergenceReport`] from per-round squared gradient norms.
pub fn convergence_report(series: &[f64]) -> Result<ConvergenceReport> {
    if series.is_empty() {
        return Err(Error::EmptyInput { op: "convergence_report" });
    }
    for v in series {
        if !v.is_finite() {
            return Err(Error::non_finite("convergence_report"));
        }
        if *v < 0.0 {
            return Err(Error::arg("convergence_report", "squared norms cannot be negative"));
        }
    }
    let mut running_min = Vec::with_capacity(series.len());
    let mut min = f64::INFINITY;
    for &v in series {
        min = min.min(v);
        running_min.push(min);
    }
    for pair in running_min.windows(2) {
        assert!(pair[1] <= pair[0], "running minimum must not increase");
    }
    let points: Vec<(f64, f64)> = running_min
        .iter()
        .enumerate()
        .filter(|&(_, &m)| m > 0.0)
        .map(|(t, &m)| (((t + 1) as f64).ln(), m.ln()))
        .collect();
    let slope = least_squares_slope(&points);
    Ok(ConvergenceReport { series: series.to_vec(), running_min, slope })
}

fn least_squares_slope(points: &[(f64, f64)]) -> f64 {
    if points.len() < 2 {
        return 0.0;
    }
    let n = points.len() as f64;
    let mean_x = points.iter().map(|p| p.0).sum::<f64>() / n;
    let mean_y = points.iter().map(|p| p.1).sum::<f64>() / n;
    let mut cov = 0.0;
    let mut var = 0.0;
    for &(x, y) in points {
        cov += (x - mean_x) * (y - mean_y);
        var += (x - mean_x) * (x - mean_x);
    }
    if var == 0.0 {
        0.0
    } else {
        cov / var
    }
}
