#![allow(dead_code)]

use flexgate::curriculum::{sample_batch, BatchSpec, TaskSpec, TeacherSet};
use flexgate::deep::TwoLayerNet;
use flexgate::model::{Batch, GateMode, GatedStudent, NormGroup, RegularizerConfig};
use ndarray::Array2;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

const H: f64 = 1e-6;

/// Regulariser settings the gradient oracle is run under.
pub fn reg_cases() -> Vec<(&'static str, RegularizerConfig)> {
    let base = RegularizerConfig::none();
    vec![
        ("none", base),
        ("nonneg+l1", RegularizerConfig { lambda_nonneg: 0.3, lambda_norm_l1: 0.7, ..base }),
        ("nonneg+l2", RegularizerConfig { lambda_nonneg: 0.4, lambda_norm_l2: 0.9, ..base }),
        ("l1+l2+w", RegularizerConfig { lambda_norm_l1: 0.5, lambda_norm_l2: 0.6, lambda_w: 0.8, ..base }),
        (
            "global",
            RegularizerConfig { lambda_nonneg: 0.2, lambda_norm_l1: 0.3, lambda_norm_l2: 0.5, lambda_w: 0.1, norm_group: NormGroup::Global },
        ),
    ]
}

fn gaussian(rng: &mut ChaCha8Rng, r: usize, c: usize, s: f64) -> Array2<f64> {
    Array2::from_shape_simple_fn((r, c), || s * rng.sample::<f64, _>(StandardNormal))
}

/// A gate value at least 0.1 away from every kink of the penalties.
fn gate_value(rng: &mut ChaCha8Rng) -> f64 {
    let m = rng.gen_range(0.1..1.5);
    if rng.gen_bool(0.3) {
        -m
    } else {
        m
    }
}

fn random_batch(rng: &mut ChaCha8Rng, d_in: usize, d_out: usize, sampled: bool) -> Batch {
    let t = TeacherSet::from_matrices(vec![gaussian(rng, d_out, d_in, 1.0)]).unwrap();
    let task = TaskSpec::single(&t, 0).unwrap();
    let spec = if sampled { BatchSpec::Sampled(7) } else { BatchSpec::Expectation };
    sample_batch(&task, spec, rng)
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let scale: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt().max(1e-8);
    diff / scale
}

/// Largest relative error between analytic and central-difference gradients
/// of the gated student over `n` random instances.
pub fn gated_gradient_error(mode: GateMode, reg: &RegularizerConfig, n: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for k in 0..n {
        let p = rng.gen_range(1..=3);
        let d_in = rng.gen_range(1..=5);
        let d_out = rng.gen_range(1..=4);
        let g = match mode {
            GateMode::PerPath => 1,
            GateMode::PerNeuron => d_out,
        };
        let weights = (0..p).map(|_| gaussian(&mut rng, d_out, d_in, 0.7)).collect();
        let gates = Array2::from_shape_simple_fn((p, g), || gate_value(&mut rng));
        let s = GatedStudent::from_parts(weights, gates, mode, 1.0, 1.0).unwrap();
        let batch = random_batch(&mut rng, d_in, d_out, k % 2 == 0);

        let gw = s.grad_weights(&batch, reg).unwrap();
        let gc = s.grad_gates(&batch, reg).unwrap();
        let mut analytic: Vec<f64> = gw.iter().flat_map(|w| w.iter().copied()).collect();
        analytic.extend(gc.iter().copied());

        let mut fd = Vec::with_capacity(analytic.len());
        for q in 0..p {
            for ix in 0..d_out * d_in {
                let (i, j) = (ix / d_in, ix % d_in);
                let mut a = s.clone();
                a.weights_mut()[q][[i, j]] += H;
                let mut b = s.clone();
                b.weights_mut()[q][[i, j]] -= H;
                fd.push((a.total_loss(&batch, reg).unwrap() - b.total_loss(&batch, reg).unwrap()) / (2.0 * H));
            }
        }
        for q in 0..p {
            for c in 0..g {
                let mut a = s.clone();
                a.gates_mut()[[q, c]] += H;
                let mut b = s.clone();
                b.gates_mut()[[q, c]] -= H;
                fd.push((a.total_loss(&batch, reg).unwrap() - b.total_loss(&batch, reg).unwrap()) / (2.0 * H));
            }
        }
        worst = worst.max(rel_err(&analytic, &fd));
    }
    worst
}

/// As [`gated_gradient_error`] for the two-layer network.
pub fn deep_gradient_error(reg: &RegularizerConfig, n: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for k in 0..n {
        let d_in = rng.gen_range(1..=5);
        let d_hid = rng.gen_range(1..=6);
        let d_out = rng.gen_range(1..=4);
        let mut net = TwoLayerNet::init(d_in, d_hid, d_out, 1.0, 1.0, 1.0, &mut rng).unwrap();
        net.w2 = Array2::from_shape_simple_fn((d_out, d_hid), || gate_value(&mut rng));
        let batch = random_batch(&mut rng, d_in, d_out, k % 2 == 0);
        let g = net.grads(&batch, reg).unwrap();
        let mut analytic: Vec<f64> = g.w1.iter().copied().collect();
        analytic.extend(g.w2.iter().copied());
        let mut fd = Vec::new();
        for layer in 0..2 {
            let len = if layer == 0 { net.w1.len() } else { net.w2.len() };
            for ix in 0..len {
                let mut a = net.clone();
                let mut b = net.clone();
                if layer == 0 {
                    a.w1.as_slice_mut().unwrap()[ix] += H;
                    b.w1.as_slice_mut().unwrap()[ix] -= H;
                } else {
                    a.w2.as_slice_mut().unwrap()[ix] += H;
                    b.w2.as_slice_mut().unwrap()[ix] -= H;
                }
                fd.push((a.total_loss(&batch, reg).unwrap() - b.total_loss(&batch, reg).unwrap()) / (2.0 * H));
            }
        }
        worst = worst.max(rel_err(&analytic, &fd));
    }
    worst
}
