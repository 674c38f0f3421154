//! Oracles used by the acceptance suite.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use reflearn::nn::ModelParams;
use reflearn::Matrix;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Matrix {
    Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.random_range(-scale..scale)).collect())
        .expect("shape matches data")
}

/// Central finite differences of `loss` w.r.t. every flat parameter.
pub fn numeric_grad(params: &ModelParams, step: f64, loss: impl Fn(&ModelParams) -> f64) -> Vec<f64> {
    let base = params.flatten();
    let mut probe = params.clone();
    let mut flat = base.clone();
    (0..base.len())
        .map(|i| {
            flat[i] = base[i] + step;
            probe.unflatten(&flat).expect("same length");
            let up = loss(&probe);
            flat[i] = base[i] - step;
            probe.unflatten(&flat).expect("same length");
            let down = loss(&probe);
            flat[i] = base[i];
            (up - down) / (2.0 * step)
        })
        .collect()
}

/// Largest per-entry relative error, measured absolutely against `floor`
/// where both sides are tiny.
pub fn max_rel_err(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max)
}

/// Hidden pre-activations of a one-hidden-layer model (empty for linear models).
pub fn hidden_preactivations(params: &ModelParams, x: &Matrix) -> Vec<f64> {
    if params.hidden_dim() == 0 {
        return Vec::new();
    }
    let (w, b) = (params.weight(0), params.bias(0));
    let d = params.input_dim();
    x.row_iter()
        .flat_map(|row| b.iter().enumerate().map(move |(j, bj)| bj + (0..d).map(|k| w[j * d + k] * row[k]).sum::<f64>()))
        .collect()
}
