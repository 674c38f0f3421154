//! Test-only oracles shared by the integration suites.
#![allow(dead_code)]

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use reflearn::nn::ModelParams;
use reflearn::Matrix;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Matrix {
    Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.random_range(-scale..scale)).collect())
        .unwrap()
}

/// Central finite differences of `loss` w.r.t. every flat parameter.
pub fn numeric_grad(params: &ModelParams, step: f64, loss: impl Fn(&ModelParams) -> f64) -> Vec<f64> {
    let base = params.flatten();
    let mut probe = params.clone();
    let mut flat = base.clone();
    (0..base.len())
        .map(|i| {
            flat[i] = base[i] + step;
            probe.unflatten(&flat).unwrap();
            let up = loss(&probe);
            flat[i] = base[i] - step;
            probe.unflatten(&flat).unwrap();
            let down = loss(&probe);
            flat[i] = base[i];
            (up - down) / (2.0 * step)
        })
        .collect()
}

/// Largest per-entry relative error; entries where both sides are below
/// `floor` in magnitude are compared absolutely against `floor`.
pub fn max_rel_err(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| {
            let scale = a.abs().max(n.abs());
            if scale < floor {
                (a - n).abs() / floor
            } else {
                (a - n).abs() / scale
            }
        })
        .fold(0.0, f64::max)
}

/// Hidden pre-activations of a one-hidden-layer model, for kink avoidance.
pub fn hidden_preactivations(params: &ModelParams, x: &Matrix) -> Vec<f64> {
    if params.hidden_dim() == 0 {
        return Vec::new();
    }
    let (w, b) = (params.weight(0), params.bias(0));
    let d = params.input_dim();
    let mut out = Vec::new();
    for row in x.row_iter() {
        for (j, bj) in b.iter().enumerate() {
            out.push(bj + (0..d).map(|k| w[j * d + k] * row[k]).sum::<f64>());
        }
    }
    out
}
