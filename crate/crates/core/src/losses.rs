//! Scalar losses over logit batches together with their logit gradients.
//!
//! Every loss averages over the rows of the batch, and `dlogits` is the
//! gradient of that mean.

use crate::error::{Error, Result};
use crate::matrix::Matrix;

#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput {
    pub value: f64,
    pub dlogits: Matrix,
}

impl LossOutput {
    pub fn zero(rows: usize, cols: usize) -> Self {
        Self {
            value: 0.0,
            dlogits: Matrix::zeros(rows, cols),
        }
    }
}

fn check_tau(tau: f64) -> Result<()> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::Parameter(format!("temperature must be positive, got {tau}")));
    }
    Ok(())
}

fn check_batch(logits: &Matrix) -> Result<()> {
    if logits.rows() == 0 || logits.cols() == 0 {
        return Err(Error::Parameter("empty batch".into()));
    }
    Ok(())
}

fn check_labels(labels: &[usize], logits: &Matrix) -> Result<()> {
    if labels.len() != logits.rows() {
        return Err(Error::dim("labels", logits.rows(), labels.len()));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= logits.cols()) {
        return Err(Error::Parameter(format!(
            "label {bad} out of range for {} classes",
            logits.cols()
        )));
    }
    Ok(())
}

/// Writes `log softmax(row / tau)` into `out`.
fn log_softmax_into(row: &[f64], tau: f64, out: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    for (o, &v) in out.iter_mut().zip(row) {
        *o = (v - max) / tau;
    }
    let lse = out.iter().map(|z| z.exp()).sum::<f64>().ln();
    for o in out.iter_mut() {
        *o -= lse;
    }
}

pub fn log_softmax_temp(logits: &Matrix, tau: f64) -> Result<Matrix> {
    check_tau(tau)?;
    let mut out = Matrix::zeros(logits.rows(), logits.cols());
    for r in 0..logits.rows() {
        log_softmax_into(logits.row(r), tau, out.row_mut(r));
    }
    Ok(out)
}

/// Temperature softmax, computed with max-subtraction.
pub fn softmax_temp(logits: &Matrix, tau: f64) -> Result<Matrix> {
    check_tau(tau)?;
    let mut out = Matrix::zeros(logits.rows(), logits.cols());
    for r in 0..logits.rows() {
        let row = logits.row(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let o = out.row_mut(r);
        for (p, &v) in o.iter_mut().zip(row) {
            *p = ((v - max) / tau).exp();
        }
        let z: f64 = o.iter().sum();
        o.iter_mut().for_each(|p| *p /= z);
    }
    Ok(out)
}

/// Softmax cross-entropy at unit temperature.
pub fn ce_loss(logits: &Matrix, labels: &[usize]) -> Result<LossOutput> {
    check_batch(logits)?;
    check_labels(labels, logits)?;
    let b = logits.rows() as f64;
    let mut dlogits = softmax_temp(logits, 1.0)?;
    let mut logp = vec![0.0; logits.cols()];
    let mut total = 0.0;
    for (r, &y) in labels.iter().enumerate() {
        log_softmax_into(logits.row(r), 1.0, &mut logp);
        total -= logp[y];
        let d = dlogits.row_mut(r);
        d[y] -= 1.0;
        d.iter_mut().for_each(|v| *v /= b);
    }
    Ok(LossOutput {
        value: total / b,
        dlogits,
    })
}

/// Balanced softmax: CE on logits shifted by the log class prior.
///
/// The shift is taken relative to the largest class so equal counts add an
/// exact zero and reproduce [`ce_loss`] bit for bit.
pub fn bsce_loss(logits: &Matrix, labels: &[usize], class_counts: &[usize]) -> Result<LossOutput> {
    if class_counts.len() != logits.cols() {
        return Err(Error::dim("bsce class_counts", logits.cols(), class_counts.len()));
    }
    if let Some(c) = class_counts.iter().position(|&n| n == 0) {
        return Err(Error::Parameter(format!("class {c} has zero training samples")));
    }
    let n_max = *class_counts.iter().max().unwrap_or(&1) as f64;
    let shift: Vec<f64> = class_counts.iter().map(|&n| (n as f64 / n_max).ln()).collect();
    let mut adjusted = logits.clone();
    for r in 0..adjusted.rows() {
        for (v, s) in adjusted.row_mut(r).iter_mut().zip(&shift) {
            *v += s;
        }
    }
    ce_loss(&adjusted, labels)
}

/// Per-row temperature distillation terms, unnormalised by batch size.
///
/// Returns `tau^2 * KL(p_prev || p_cur)` per row and the matching row
/// gradient `tau * (p_cur - p_prev)`.
pub(crate) fn kl_rows(prev: &Matrix, cur: &Matrix, tau: f64) -> Result<(Vec<f64>, Matrix)> {
    check_tau(tau)?;
    cur.ensure_shape("kl_distill logits", prev.rows(), prev.cols())?;
    let c = cur.cols();
    let mut values = Vec::with_capacity(cur.rows());
    let mut grad = Matrix::zeros(cur.rows(), c);
    let mut lp = vec![0.0; c];
    let mut lq = vec![0.0; c];
    for r in 0..cur.rows() {
        log_softmax_into(prev.row(r), tau, &mut lp);
        log_softmax_into(cur.row(r), tau, &mut lq);
        let mut kl = 0.0;
        for k in 0..c {
            let p = lp[k].exp();
            if p > 0.0 {
                kl += p * (lp[k] - lq[k]);
            }
            grad[(r, k)] = tau * (lq[k].exp() - p);
        }
        values.push(tau * tau * kl);
    }
    Ok((values, grad))
}

/// Distillation KL from the (constant) previous logits to the current ones.
pub fn kl_distill(prev_logits: &Matrix, cur_logits: &Matrix, tau: f64) -> Result<LossOutput> {
    let (values, mut dlogits) = kl_rows(prev_logits, cur_logits, tau)?;
    let b = cur_logits.rows().max(1) as f64;
    dlogits.as_mut_slice().iter_mut().for_each(|v| *v /= b);
    Ok(LossOutput {
        value: values.iter().sum::<f64>() / b,
        dlogits,
    })
}

/// Cross-entropy against non-negative, possibly unnormalised soft targets.
pub fn soft_ce(logits: &Matrix, soft_labels: &Matrix) -> Result<LossOutput> {
    check_batch(logits)?;
    soft_labels.ensure_shape("soft_ce targets", logits.rows(), logits.cols())?;
    if let Some(v) = soft_labels.as_slice().iter().find(|v| !(**v >= 0.0)) {
        return Err(Error::Parameter(format!("soft label entry {v} is negative")));
    }
    let b = logits.rows() as f64;
    let mut dlogits = Matrix::zeros(logits.rows(), logits.cols());
    let mut logp = vec![0.0; logits.cols()];
    let mut total = 0.0;
    for r in 0..logits.rows() {
        log_softmax_into(logits.row(r), 1.0, &mut logp);
        let y = soft_labels.row(r);
        let mass: f64 = y.iter().sum();
        for k in 0..logits.cols() {
            if y[k] > 0.0 {
                total -= y[k] * logp[k];
            }
            dlogits[(r, k)] = (mass * logp[k].exp() - y[k]) / b;
        }
    }
    Ok(LossOutput {
        value: total / b,
        dlogits,
    })
}

/// Half squared distance between logit vectors; the previous logits are constant.
pub fn mse_logits(prev_logits: &Matrix, cur_logits: &Matrix) -> Result<LossOutput> {
    cur_logits.ensure_shape("mse_logits", prev_logits.rows(), prev_logits.cols())?;
    let b = cur_logits.rows().max(1) as f64;
    let mut dlogits = Matrix::zeros(cur_logits.rows(), cur_logits.cols());
    let mut total = 0.0;
    for ((d, c), p) in dlogits
        .as_mut_slice()
        .iter_mut()
        .zip(cur_logits.as_slice())
        .zip(prev_logits.as_slice())
    {
        let diff = c - p;
        total += 0.5 * diff * diff;
        *d = diff / b;
    }
    Ok(LossOutput {
        value: total / b,
        dlogits,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn m(rows: &[&[f64]]) -> Matrix {
        Matrix::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn softmax_examples() {
        let p = softmax_temp(&m(&[&[0.0, 0.0]]), 3.0).unwrap();
        assert_eq!(p.row(0), &[0.5, 0.5]);

        let p = softmax_temp(&m(&[&[2.0, 0.0]]), 2.0).unwrap();
        let e = std::f64::consts::E;
        assert_abs_diff_eq!(p[(0, 0)], e / (e + 1.0), epsilon = 1e-15);
        assert_abs_diff_eq!(p[(0, 0)], 0.73106, epsilon = 1e-5);
        assert_abs_diff_eq!(p[(0, 1)], 0.26894, epsilon = 1e-5);

        let p = softmax_temp(&m(&[&[1.0, 0.0, -1.0]]), 1e6).unwrap();
        for &v in p.row(0) {
            assert_abs_diff_eq!(v, 1.0 / 3.0, epsilon = 1e-6);
        }
        assert!(matches!(softmax_temp(&p, 0.0), Err(Error::Parameter(_))));
    }

    #[test]
    fn softmax_is_stable_for_huge_logits() {
        let p = softmax_temp(&m(&[&[1e300, 0.0, -1e300]]), 1.0).unwrap();
        assert_eq!(p.row(0), &[1.0, 0.0, 0.0]);
        let s: f64 = softmax_temp(&m(&[&[0.3, 7.0, -2.0, 1.0]]), 1.5)
            .unwrap()
            .row(0)
            .iter()
            .sum();
        assert_abs_diff_eq!(s, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn ce_examples() {
        let out = ce_loss(&m(&[&[0.3; 4]]), &[2]).unwrap();
        assert_abs_diff_eq!(out.value, 4f64.ln(), epsilon = 1e-15);

        let out = ce_loss(&m(&[&[2.0, 0.0]]), &[0]).unwrap();
        let e2 = 2f64.exp();
        assert_abs_diff_eq!(out.value, -(e2 / (e2 + 1.0)).ln(), epsilon = 1e-15);
        assert_abs_diff_eq!(out.value, 0.12693, epsilon = 1e-5);

        let out = ce_loss(&m(&[&[60.0, 0.0]]), &[0]).unwrap();
        assert!(out.value < 1e-20);

        assert!(matches!(ce_loss(&Matrix::zeros(0, 3), &[]), Err(Error::Parameter(_))));
        assert!(ce_loss(&m(&[&[0.0, 0.0]]), &[2]).is_err());
    }

    #[test]
    fn bsce_examples() {
        let logits = m(&[&[0.2, -1.0, 0.7], &[1.5, 0.0, -0.3]]);
        let a = bsce_loss(&logits, &[1, 2], &[7, 7, 7]).unwrap();
        let b = ce_loss(&logits, &[1, 2]).unwrap();
        assert_eq!(a, b);

        let eq = m(&[&[0.0, 0.0]]);
        let tail = bsce_loss(&eq, &[1], &[100, 1]).unwrap();
        assert_abs_diff_eq!(tail.value, -(1.0f64 / 101.0).ln(), epsilon = 1e-12);
        assert_abs_diff_eq!(tail.value, 4.6151, epsilon = 1e-4);
        let head = bsce_loss(&eq, &[0], &[100, 1]).unwrap();
        assert_abs_diff_eq!(head.value, 0.00995, epsilon = 1e-5);

        assert!(bsce_loss(&eq, &[0], &[100, 0]).is_err());
    }

    #[test]
    fn kl_examples() {
        let a = m(&[&[0.4, -0.1, 2.0], &[1.0, 1.0, -3.0]]);
        let out = kl_distill(&a, &a, 2.0).unwrap();
        assert_eq!(out.value, 0.0);
        assert!(out.dlogits.as_slice().iter().all(|&v| v == 0.0));

        let prev = m(&[&[1000.0, 0.0]]);
        let cur = m(&[&[0.0, 0.0]]);
        let out = kl_distill(&prev, &cur, 1.0).unwrap();
        assert_abs_diff_eq!(out.value, 2f64.ln(), epsilon = 1e-15);

        assert!(matches!(
            kl_distill(&prev, &a, 1.0),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn soft_ce_examples() {
        let logits = m(&[&[0.5, -0.2, 1.1], &[2.0, 0.0, 0.0]]);
        let onehot = m(&[&[0.0, 0.0, 1.0], &[1.0, 0.0, 0.0]]);
        let a = soft_ce(&logits, &onehot).unwrap();
        let b = ce_loss(&logits, &[2, 0]).unwrap();
        assert_abs_diff_eq!(a.value, b.value, epsilon = 1e-15);
        for (x, y) in a.dlogits.as_slice().iter().zip(b.dlogits.as_slice()) {
            assert_abs_diff_eq!(x, y, epsilon = 1e-15);
        }

        let uniform = m(&[&[0.0; 4]]);
        let y = m(&[&[1.0, 0.3, 0.2, 0.0]]);
        let out = soft_ce(&uniform, &y).unwrap();
        assert_abs_diff_eq!(out.value, 1.5 * 4f64.ln(), epsilon = 1e-12);

        let out = soft_ce(&logits, &Matrix::zeros(2, 3)).unwrap();
        assert_eq!(out.value, 0.0);

        let neg = m(&[&[0.0, -0.1, 1.0], &[1.0, 0.0, 0.0]]);
        assert!(matches!(soft_ce(&logits, &neg), Err(Error::Parameter(_))));
    }

    #[test]
    fn mse_examples() {
        let a = m(&[&[1.0, 2.0]]);
        assert_eq!(mse_logits(&a, &a).unwrap().value, 0.0);
        let out = mse_logits(&m(&[&[1.0, 0.0]]), &m(&[&[0.0, 0.0]])).unwrap();
        assert_eq!(out.value, 0.5);
        let flip = mse_logits(&m(&[&[-1.0, 0.0]]), &m(&[&[0.0, 0.0]])).unwrap();
        assert_eq!(flip.value, out.value);
        assert!(mse_logits(&a, &Matrix::zeros(2, 2)).is_err());
    }
}
