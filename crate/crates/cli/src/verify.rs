//! The `verify` subcommand: a curated battery of self-checks that exercise
//! the library's core identities end to end, without the test harness.
//!
//! Each check recomputes its expectation independently (hand recursions,
//! materialized operators, closed forms) rather than trusting the code
//! under test. All checks are deterministic given the seed.

use sketchfed::analysis::{convergence_report, hcs_recovery_check};
use sketchfed::fed::{
    self, partition, run_round, ClientDataset, DistributionTag, FedConfig, PartitionStrategy,
    Server, ServerOptState, TopkBudget,
};
use sketchfed::nn::{
    fc_forward_sketched, finite_difference_gradient, forward_sketched, recover_full_gradient,
    Example, FcSpec, Features, Label, Loss, NetworkSpec, NetworkState, SketchedNetwork, Tape,
};
use sketchfed::numerics::{Matrix, Vector};
use sketchfed::seeding::child_seed;
use sketchfed::sketch::{
    two_sided_recover, two_sided_sketch, SketchMode, SketchOperator, SketchedWeight,
};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// One named check and whether it held.
#[derive(Debug)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn outcome(name: &'static str, passed: bool, detail: String) -> CheckOutcome {
    CheckOutcome { name, passed, detail }
}

fn fc_spec(input: usize, hidden: Vec<usize>) -> NetworkSpec {
    NetworkSpec::Fc(FcSpec { input_dim: input, hidden_dims: hidden, output_dim: 1 })
}

fn random_sketched(net: &NetworkState, ratio: f64, seed: u64) -> SketchedNetwork {
    let ops = net
        .spec
        .sketched_layer_dims()
        .iter()
        .enumerate()
        .map(|(l, &(d, _))| {
            let c = ((d as f64 * ratio).round() as usize).clamp(1, d);
            vec![SketchOperator::new(d, c, child_seed(seed, &[l as u64])).unwrap()]
        })
        .collect();
    SketchedNetwork::sketch(net, ops).expect("valid dims")
}

fn teacher_data(seed: u64, dim: usize, count: usize) -> ClientDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
    let examples = (0..count)
        .map(|_| {
            let x: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
            let y = w.iter().zip(&x).map(|(a, b)| a * b).sum();
            Example { x: Features::Flat(Vector::from_vec(x)), y: Label::Scalar(y) }
        })
        .collect();
    ClientDataset::new(examples, DistributionTag::Full).unwrap()
}

fn check_recovery(seed: u64) -> CheckOutcome {
    match hcs_recovery_check(128, 64, 5, 200, 0.3, SketchMode::Random, seed) {
        Ok(rate) => outcome(
            "hash-recovery",
            rate <= 0.01,
            format!("failure rate {rate:.5} at width 64 of 128, 5-way median"),
        ),
        Err(e) => outcome("hash-recovery", false, e.to_string()),
    }
}

fn check_gradient_identity(seed: u64) -> CheckOutcome {
    let h = 1e-5;
    for attempt in 0..50u64 {
        let net = match NetworkState::init(fc_spec(6, vec![5, 4]), child_seed(seed, &[3, attempt]))
        {
            Ok(n) => n,
            Err(e) => return outcome("gradient-identity", false, e.to_string()),
        };
        let sknet = random_sketched(&net, 0.5, child_seed(seed, &[4, attempt]));
        let mut rng = ChaCha8Rng::seed_from_u64(child_seed(seed, &[5, attempt]));
        let x = Vector::from_vec((0..6).map(|_| rng.random_range(-1.0..1.0)).collect());
        let y = Label::Scalar(rng.random_range(-1.0..1.0));
        let features = Features::Flat(x.clone());
        let (_, tape) = match forward_sketched(&sknet, &features) {
            Ok(t) => t,
            Err(e) => return outcome("gradient-identity", false, e.to_string()),
        };
        let margin = match &tape {
            Tape::Fc(t) => t
                .preacts
                .iter()
                .flat_map(|v| v.data().iter())
                .fold(f64::INFINITY, |m, &v| m.min(v.abs())),
            Tape::Conv(_) => unreachable!("fc spec"),
        };
        if margin < 1e-3 {
            continue;
        }
        let grads =
            match sketchfed::nn::backward_sketched(&sknet, &tape, &y, Loss::SquaredError) {
                Ok(g) => g,
                Err(e) => return outcome("gradient-identity", false, e.to_string()),
            };
        let op = sknet.layers[0].sketches[0].op.clone();
        let recovered = recover_full_gradient(&op, &grads.layers[0]).unwrap();
        let fd = finite_difference_gradient(
            &mut |w: &Matrix| {
                let mut alt = sknet.clone();
                alt.layers[0].sketches = vec![SketchedWeight::sketch(op.clone(), w)?];
                let (_, t) = fc_forward_sketched(&alt, &x)?;
                Loss::SquaredError.value(&t.logits, &y)
            },
            &net.weights[0],
            h,
        )
        .unwrap();
        let mut diff = recovered.clone();
        diff.sub_assign(&fd).unwrap();
        let rel = diff.frobenius_norm() / fd.frobenius_norm().max(1e-9);
        return outcome(
            "gradient-identity",
            rel <= 1e-4,
            format!("relative error {rel:.2e} against central differences"),
        );
    }
    outcome("gradient-identity", false, "no kink-free draw in 50 attempts".into())
}

fn kron(a: &Matrix, b: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(a.rows() * b.rows(), a.cols() * b.cols());
    for i in 0..a.rows() {
        for j in 0..a.cols() {
            for k in 0..b.rows() {
                for l in 0..b.cols() {
                    out.set(i * b.rows() + k, j * b.cols() + l, a.get(i, j) * b.get(k, l));
                }
            }
        }
    }
    out
}

fn vec_of(m: &Matrix) -> Vector {
    // Column stacking.
    let mut out = Vec::with_capacity(m.rows() * m.cols());
    for j in 0..m.cols() {
        for i in 0..m.rows() {
            out.push(m.get(i, j));
        }
    }
    Vector::from_vec(out)
}

fn check_two_sided(seed: u64) -> CheckOutcome {
    let (d, c) = (6, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let op1 = SketchOperator::new(d, c, child_seed(seed, &[6])).unwrap();
    let op2 = SketchOperator::new(d, c, child_seed(seed, &[7])).unwrap();
    let w = Matrix::from_vec(d, d, (0..d * d).map(|_| rng.random_range(-1.0..1.0)).collect())
        .unwrap();
    let s = two_sided_sketch(&op1, &op2, &w).unwrap();
    let direct = two_sided_recover(&op1, &op2, &s).unwrap();
    // Oracle: vec(H1^T s H2) = (H2^T (x) H1^T) vec(s) with column stacking.
    let m1t = op1.materialize().transpose();
    let m2t = op2.materialize().transpose();
    let big = kron(&m2t, &m1t);
    let flat = big.matvec(&vec_of(&s)).unwrap();
    let mut worst = 0.0f64;
    for j in 0..d {
        for i in 0..d {
            worst = worst.max((direct.get(i, j) - flat.get(j * d + i)).abs());
        }
    }
    outcome(
        "two-sided-kronecker",
        worst <= 1e-12,
        format!("max deviation {worst:.2e} from the materialized product"),
    )
}

fn check_conservation(seed: u64) -> CheckOutcome {
    let net0 = NetworkState::init(fc_spec(5, vec![4]), seed).unwrap();
    let mut net = net0.clone();
    let (eta, rho) = (0.1, 0.9);
    let mut state = ServerOptState::new(&net, eta, rho, TopkBudget::Fraction(0.25)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(child_seed(seed, &[8]));
    let mut u = vec![0.0; 20];
    let mut e = vec![0.0; 20];
    for _ in 0..4 {
        let gdata: Vec<f64> = (0..20).map(|_| rng.random_range(-1.0..1.0)).collect();
        let g = Matrix::from_vec(4, 5, gdata.clone()).unwrap();
        if let Err(err) = fed::ef_topk_step(&mut net, &mut state, &[g]) {
            return outcome("update-conservation", false, err.to_string());
        }
        for i in 0..20 {
            u[i] = rho * u[i] + gdata[i];
        }
        let z: Vec<f64> = (0..20).map(|i| eta * u[i] + e[i]).collect();
        let mut idx: Vec<usize> = (0..20).collect();
        idx.sort_by(|&a, &b| z[b].abs().partial_cmp(&z[a].abs()).unwrap().then(a.cmp(&b)));
        let keep = &idx[..5];
        for i in 0..20 {
            e[i] = if keep.contains(&i) { 0.0 } else { z[i] };
        }
        for i in 0..20 {
            if state.error[0].data()[i] != e[i] {
                return outcome(
                    "update-conservation",
                    false,
                    format!("retained error diverged at entry {i}"),
                );
            }
        }
    }
    outcome("update-conservation", true, "kept + retained reproduces the raw update".into())
}

fn check_sgd_degeneracy(seed: u64) -> CheckOutcome {
    let net = NetworkState::init(fc_spec(4, vec![4]), seed).unwrap();
    let config = FedConfig {
        eta: 0.1,
        rho: 0.0,
        budget: TopkBudget::Full,
        sketch_ratio: 1.0,
        sketch_mode: SketchMode::Identity,
        train_output: false,
        ..FedConfig::default()
    };
    let mut server = Server::new(net.clone(), config, child_seed(seed, &[9])).unwrap();
    let data = teacher_data(child_seed(seed, &[10]), 4, 6);
    let (sknet, ops) = server.broadcast().unwrap();
    let upload = fed::client_update(&sknet, &data, Loss::SquaredError, 0, 0).unwrap();
    let agg =
        fed::aggregate(&ops, std::slice::from_ref(&upload), 0, fed::Weighting::Uniform).unwrap();
    let mut want = net.clone();
    for (w, g) in want.weights.iter_mut().zip(&agg.layers) {
        w.sub_assign(&g.scaled(0.1)).unwrap();
    }
    if run_round(&mut server, &[data], 1).is_err() {
        return outcome("sgd-degeneracy", false, "round failed".into());
    }
    let same = server
        .net
        .weights
        .iter()
        .zip(&want.weights)
        .all(|(a, b)| a == b);
    outcome(
        "sgd-degeneracy",
        same,
        "full budget with zero momentum reproduces plain gradient descent".into(),
    )
}

fn check_ledger(_seed: u64) -> CheckOutcome {
    let dims = [(8, 8), (8, 8)];
    match fed::sketched_round_charges(&dims, &[4, 4], 1, 3) {
        Ok(c) => outcome(
            "ledger-closed-form",
            c.down_values == 240 && c.up_values == 192 && c.baseline_down_values == 384,
            format!("down {} up {} baseline {}", c.down_values, c.up_values, c.baseline_down_values),
        ),
        Err(e) => outcome("ledger-closed-form", false, e.to_string()),
    }
}

fn check_replay(seed: u64) -> CheckOutcome {
    let net = NetworkState::init(fc_spec(6, vec![5]), child_seed(seed, &[11])).unwrap();
    let data = teacher_data(child_seed(seed, &[12]), 6, 24);
    let clients = partition(&data, 4, PartitionStrategy::Iid, child_seed(seed, &[13])).unwrap();
    let config = FedConfig { eta: 0.05, ..FedConfig::default() };
    let mut a = Server::new(net.clone(), config.clone(), seed).unwrap();
    let mut b = Server::new(net, config, seed).unwrap();
    for _ in 0..3 {
        let ra = run_round(&mut a, &clients, 2);
        let rb = run_round(&mut b, &clients, 2);
        match (ra, rb) {
            (Ok(x), Ok(y)) if x == y => {}
            _ => return outcome("replay-determinism", false, "rounds diverged".into()),
        }
    }
    outcome("replay-determinism", true, "three rounds replayed identically".into())
}

fn check_trend(_seed: u64) -> CheckOutcome {
    let series: Vec<f64> = (1..=100).map(|t| 1.0 / t as f64).collect();
    match convergence_report(&series) {
        Ok(r) => outcome(
            "trend-slope",
            (r.slope + 1.0).abs() <= 0.05,
            format!("reciprocal series slope {:.4}", r.slope),
        ),
        Err(e) => outcome("trend-slope", false, e.to_string()),
    }
}

/// Runs every check. All pass on a healthy build, for any seed.
pub fn run_verification(seed: u64) -> Vec<CheckOutcome> {
    vec![
        check_recovery(seed),
        check_gradient_identity(seed),
        check_two_sided(seed),
        check_conservation(seed),
        check_sgd_degeneracy(seed),
        check_ledger(seed),
        check_replay(seed),
        check_trend(seed),
    ]
}
