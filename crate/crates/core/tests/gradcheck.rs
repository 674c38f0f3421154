//! Analytic gradients of every loss, through the model, against central
//! finite differences.

mod common;

use common::{hidden_preactivations, max_rel_err, numeric_grad, random_matrix, rng};
use rand::Rng;
use reflearn::losses::{bsce_loss, ce_loss, kl_distill, mse_logits, soft_ce, LossOutput};
use reflearn::nn::{backward, forward, ModelParams};
use reflearn::reflect::{kr_batch_loss, EpochCache};
use reflearn::{Matrix, Result};

const STEP: f64 = 1e-5;
const TOL: f64 = 1e-4;
const FLOOR: f64 = 1e-6;

fn check<F>(name: &str, hidden: usize, cases: u64, loss: F)
where
    F: Fn(&mut rand_chacha::ChaCha8Rng, usize) -> Box<dyn Fn(&Matrix) -> Result<LossOutput>>,
{
    let mut worst: f64 = 0.0;
    let mut case = 0;
    let mut seed = 0;
    while case < cases {
        seed += 1;
        let mut r = rng(seed * 7919 + hidden as u64);
        let params = ModelParams::init(4, hidden, 3, &mut r).unwrap();
        let mut params = params;
        let mut flat = params.flatten();
        flat.iter_mut().for_each(|v| *v += r.random_range(-0.3..0.3));
        params.unflatten(&flat).unwrap();
        let batch = 1 + (seed as usize % 4);
        let x = random_matrix(&mut r, batch, 4, 2.0);
        if hidden_preactivations(&params, &x).iter().any(|z| z.abs() < 1e-3) {
            continue;
        }
        let f = loss(&mut r, batch);
        let rec = forward(&params, &x).unwrap();
        let out = f(&rec.logits).unwrap();
        let analytic = backward(&params, &rec, &out.dlogits).unwrap();
        let numeric = numeric_grad(&params, STEP, |p| f(&forward(p, &x).unwrap().logits).unwrap().value);
        let err = max_rel_err(&analytic, &numeric, FLOOR);
        assert!(err < TOL, "{name} (hidden {hidden}) case {case}: rel err {err:e}");
        worst = worst.max(err);
        case += 1;
    }
    eprintln!("{name:10} hidden {hidden:2}: worst rel err {worst:.2e} over {cases} cases");
}

fn labels(r: &mut rand_chacha::ChaCha8Rng, n: usize) -> Vec<usize> {
    (0..n).map(|_| r.random_range(0..3)).collect()
}

#[test]
fn ce_gradient() {
    for hidden in [0, 5] {
        check("ce", hidden, 50, |r, b| {
            let y = labels(r, b);
            Box::new(move |l| ce_loss(l, &y))
        });
    }
}

#[test]
fn bsce_gradient() {
    for hidden in [0, 5] {
        check("bsce", hidden, 50, |r, b| {
            let y = labels(r, b);
            let counts = vec![100, r.random_range(10..100), r.random_range(1..10)];
            Box::new(move |l| bsce_loss(l, &y, &counts))
        });
    }
}

#[test]
fn soft_ce_gradient() {
    for hidden in [0, 5] {
        check("soft_ce", hidden, 50, |r, b| {
            let t = Matrix::from_vec(b, 3, (0..3 * b).map(|_| r.random_range(0.0..1.5)).collect()).unwrap();
            Box::new(move |l| soft_ce(l, &t))
        });
    }
}

#[test]
fn kl_distill_gradient() {
    for hidden in [0, 5] {
        check("kl", hidden, 50, |r, b| {
            let prev = random_matrix(r, b, 3, 3.0);
            let tau = r.random_range(1.0..5.0);
            Box::new(move |l| kl_distill(&prev, l, tau))
        });
    }
}

#[test]
fn mse_gradient() {
    for hidden in [0, 5] {
        check("mse", hidden, 50, |r, b| {
            let prev = random_matrix(r, b, 3, 3.0);
            Box::new(move |l| mse_logits(&prev, l))
        });
    }
}

#[test]
fn masked_review_gradient() {
    check("kr_batch", 5, 50, |r, b| {
        let prev = random_matrix(r, b, 3, 3.0);
        let y = labels(r, b);
        let mut cache = EpochCache::new(b, 3, 0);
        let idx: Vec<usize> = (0..b).collect();
        cache.update(&idx, &prev, &y).unwrap();
        let tau = r.random_range(1.0..4.0);
        Box::new(move |l| kr_batch_loss(Some(&cache), &idx, l, tau))
    });
}
