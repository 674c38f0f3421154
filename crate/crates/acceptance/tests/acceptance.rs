//! End-to-end acceptance suite. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any criterion fails.

use std::collections::HashMap;
use std::fs;
use std::path::Path;
use std::time::{Duration, Instant};

use reflearn_acceptance::{hidden_preactivations, max_rel_err, numeric_grad, random_matrix, rng};
use rand::seq::SliceRandom;
use rand::Rng;
use reflearn::data::{augment, next_seed, stream_rng, synth_train_test, Dataset, SynthConfig};
use reflearn::kc::{cos_angle, project_if_conflict, ProjectionRule};
use reflearn::losses::{bsce_loss, ce_loss, kl_distill, mse_logits, soft_ce, LossOutput};
use reflearn::matrix::{dot, norm};
use reflearn::nn::{backward, forward, ModelParams, Sgd};
use reflearn::par::Execution;
use reflearn::reflect::{reconstruct_labels, similarity_matrix, spearman, ClassCenters, EpochCache};
use reflearn::trainer::{
    ablation_grid, run, LtrLoss, RunRecord, TrainConfig, Trainer, AUGMENT_STREAM, INIT_STREAM, SHUFFLE_STREAM,
};
use reflearn::{Matrix, Result};

const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];
const TEST_PER_CLASS: usize = 100;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict { pass, detail: detail.into() }
}

fn gradient_oracle() -> Verdict {
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    let mut cases = 0;
    let mut seed = 0u64;
    while cases < 100 {
        seed += 1;
        let mut r = rng(0xACCE + seed);
        let hidden = if seed % 2 == 0 { 5 } else { 0 };
        let params = ModelParams::init(4, hidden, 3, &mut r).unwrap();
        let b = 1 + r.random_range(0..4);
        let x = random_matrix(&mut r, b, 4, 2.0);
        if hidden_preactivations(&params, &x).iter().any(|z| z.abs() < 1e-3) {
            continue;
        }
        let labels: Vec<usize> = (0..b).map(|_| r.random_range(0..3)).collect();
        let prev = random_matrix(&mut r, b, 3, 3.0);
        let soft = Matrix::from_vec(b, 3, (0..3 * b).map(|_| r.random_range(0.0..1.5)).collect()).unwrap();
        let counts = vec![200, r.random_range(20..200), r.random_range(1..20)];
        let tau = r.random_range(1.0..5.0);
        let loss: Box<dyn Fn(&Matrix) -> Result<LossOutput>> = match cases % 5 {
            0 => Box::new(|l| ce_loss(l, &labels)),
            1 => Box::new(|l| bsce_loss(l, &labels, &counts)),
            2 => Box::new(|l| soft_ce(l, &soft)),
            3 => Box::new(|l| kl_distill(&prev, l, tau)),
            _ => Box::new(|l| mse_logits(&prev, l)),
        };
        let rec = forward(&params, &x).unwrap();
        let analytic = backward(&params, &rec, &loss(&rec.logits).unwrap().dlogits).unwrap();
        let numeric = numeric_grad(&params, 1e-5, |p| loss(&forward(p, &x).unwrap().logits).unwrap().value);
        worst = worst.max(max_rel_err(&analytic, &numeric, 1e-6));
        cases += 1;
    }
    let took = start.elapsed();
    verdict(
        worst < 1e-4 && took < Duration::from_secs(10),
        format!("100 cases, max rel err {worst:.2e} (< 1e-4), {:.2}s (< 10s)", took.as_secs_f64()),
    )
}

fn projection_suite() -> Verdict {
    let mut r = rng(0x9E0);
    let mut ortho: f64 = 0.0;
    let mut idem: f64 = 0.0;
    let mut longer = 0;
    let mut passthrough_ok = true;
    let mut not_flagged = 0;
    for k in 0..1000 {
        let n = 2 + k % 50;
        let g: Vec<f64> = (0..n).map(|_| r.random_range(-1.0..1.0)).collect();
        let mut a: Vec<f64> = (0..n).map(|_| r.random_range(-1.0..1.0)).collect();
        if dot(&a, &g) >= 0.0 {
            a.iter_mut().for_each(|v| *v = -*v);
        }
        let p = project_if_conflict(&g, &a, ProjectionRule::Orthogonal);
        not_flagged += usize::from(!p.conflicted);
        ortho = ortho.max(dot(&p.g_aux_hat, &g).abs() / (norm(&p.g_aux_hat) * norm(&g)).max(f64::MIN_POSITIVE));
        let again = project_if_conflict(&g, &p.g_aux_hat, ProjectionRule::Orthogonal);
        let diff: Vec<f64> = again.g_aux_hat.iter().zip(&p.g_aux_hat).map(|(x, y)| x - y).collect();
        idem = idem.max(norm(&diff) / norm(&a));
        longer += usize::from(norm(&p.g_aux_hat) > norm(&a));

        let aligned: Vec<f64> = a.iter().map(|v| -v).collect();
        let q = project_if_conflict(&g, &aligned, ProjectionRule::Orthogonal);
        let plain: Vec<f64> = aligned.iter().zip(&g).map(|(x, y)| x + y).collect();
        passthrough_ok &= !q.conflicted && q.g_rl == plain && q.g_aux_hat == aligned;
    }
    verdict(
        ortho <= 1e-9 && idem <= 1e-12 && longer == 0 && passthrough_ok && not_flagged == 0,
        format!(
            "1000 pairs: max |g_hat.g|/(|g_hat||g|) {ortho:.1e}, idempotence drift {idem:.1e}, \
             lengthened {longer}, pass-through bit-exact {passthrough_ok}"
        ),
    )
}

fn high_temperature() -> Verdict {
    let mut r = rng(0x7E3);
    let mut worst: f64 = 1.0;
    for _ in 0..100 {
        let b = 1 + r.random_range(0..8);
        let c = 2 + r.random_range(0..8);
        let zero_mean = |r: &mut rand_chacha::ChaCha8Rng| {
            let mut m = random_matrix(r, b, c, 3.0);
            for i in 0..b {
                let mean = m.row(i).iter().sum::<f64>() / c as f64;
                m.row_mut(i).iter_mut().for_each(|v| *v -= mean);
            }
            m
        };
        let prev = zero_mean(&mut r);
        let cur = zero_mean(&mut r);
        let kl = kl_distill(&prev, &cur, 100.0).unwrap();
        let mse = mse_logits(&prev, &cur).unwrap();
        worst = worst.min(cos_angle(kl.dlogits.as_slice(), mse.dlogits.as_slice()));
    }
    verdict(worst > 0.999, format!("tau=100, 100 trials, min cosine {worst:.6} (> 0.999)"))
}

fn small_longtail(seed: u64) -> (Dataset, Dataset) {
    let mut cfg = SynthConfig::default_longtail(seed);
    cfg.counts = reflearn::data::longtail_counts(8, 120, 20.0).unwrap();
    cfg.pairs = reflearn::data::SimilarityPair::mirrored(8, 2, 0.8);
    cfg.dim = 12;
    synth_train_test(&cfg, 30).unwrap()
}

fn cci_end_to_end() -> Verdict {
    let (train, _) = small_longtail(11);
    let cfg = TrainConfig { use_kr: true, epochs: 3, hidden_dim: 16, ..TrainConfig::default() };
    let mut trainer = Trainer::new(cfg, &train).unwrap();
    let c = train.classes();
    let mut logits = Matrix::zeros(train.len(), c);
    for (i, &y) in train.labels().iter().enumerate() {
        let target = if i % 2 == 0 { y } else { (y + 1) % c };
        logits[(i, target)] = 4.0;
    }
    let mut cache = EpochCache::new(train.len(), c, 0);
    let all: Vec<usize> = (0..train.len()).collect();
    cache.update(&all, &logits, train.labels()).unwrap();
    let half = cache.num_correct() * 2 == train.len() + train.len() % 2;
    let mask = cache.correct_mask().to_vec();
    trainer.set_cache(cache).unwrap();

    let (mut leaked, mut zero_rows, mut live_rows) = (0usize, 0usize, 0usize);
    trainer
        .train_epoch_observed(&train, |t| {
            for (row, &i) in t.indices.iter().enumerate() {
                let g = t.review.dlogits.row(row);
                if mask[i] {
                    live_rows += usize::from(g.iter().any(|&v| v != 0.0));
                } else if g.iter().all(|&v| v == 0.0) {
                    zero_rows += 1;
                } else {
                    leaked += 1;
                }
            }
        })
        .unwrap();
    verdict(
        half && leaked == 0 && live_rows > 0,
        format!("{zero_rows} misclassified rows all exactly zero, {leaked} leaked, {live_rows} correct rows active"),
    )
}

fn similarity_suite() -> Verdict {
    let mut r = rng(0x5A);
    let mut ok = true;
    let mut worst_affine: f64 = 0.0;
    for trial in 0..200 {
        let c = 2 + trial % 10;
        let d = 1 + trial % 7;
        let rectified = trial % 2 == 0;
        let mut raw = random_matrix(&mut r, c, d, 2.0);
        if rectified {
            raw.as_mut_slice().iter_mut().for_each(|v| *v = v.max(0.0));
        }
        let centers = ClassCenters::new(raw.clone(), vec![true; c]).unwrap();
        let m = similarity_matrix(&centers).unwrap();
        for i in 0..c {
            if norm(raw.row(i)) > 1e-12 {
                ok &= (m[(i, i)] - 1.0).abs() <= 1e-12;
            }
            for j in 0..c {
                ok &= m[(i, j)] == m[(j, i)] && (-1.0..=1.0).contains(&m[(i, j)]);
                ok &= !rectified || m[(i, j)] >= 0.0;
            }
        }
        for alpha in [0.0, 0.5, 1.0] {
            let sl = reconstruct_labels(&m, alpha, false).unwrap();
            for i in 0..c {
                for j in 0..c {
                    let eye = if i == j { 1.0 } else { 0.0 };
                    let want = alpha * eye + (1.0 - alpha) * m[(i, j)];
                    worst_affine = worst_affine.max((sl.targets[(i, j)] - want).abs());
                }
            }
        }
    }
    verdict(
        ok && worst_affine <= 1e-15,
        format!("200 random center sets: symmetry/diagonal/bounds/rectified >= 0 {ok}; alpha in {{0, 0.5, 1}} max deviation {worst_affine:.1e}"),
    )
}

fn baseline_by_hand(cfg: &TrainConfig, train: &Dataset) -> ModelParams {
    let mut params =
        ModelParams::init(train.dim(), cfg.hidden_dim, train.classes(), &mut stream_rng(cfg.seed, INIT_STREAM)).unwrap();
    let mut opt = Sgd::new(params.num_params(), cfg.momentum).unwrap();
    let mut shuffle = stream_rng(cfg.seed, SHUFFLE_STREAM);
    let mut aug = stream_rng(cfg.seed, AUGMENT_STREAM);
    let total = train.len().div_ceil(cfg.batch_size) * cfg.epochs;
    let mut step = 0;
    for _ in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut shuffle);
        for idx in order.chunks(cfg.batch_size) {
            let labels: Vec<usize> = idx.iter().map(|&i| train.labels()[i]).collect();
            let x = augment(&train.features().gather_rows(idx), cfg.sigma_aug, next_seed(&mut aug));
            let rec = forward(&params, &x).unwrap();
            let g = backward(&params, &rec, &ce_loss(&rec.logits, &labels).unwrap().dlogits).unwrap();
            let lr = cfg.lr * (1.0 - step as f64 / total as f64);
            opt.step(&mut params, &g, lr).unwrap();
            step += 1;
        }
    }
    params
}

fn reduction() -> Verdict {
    let (train, _) = small_longtail(5);
    let cfg = TrainConfig { epochs: 5, hidden_dim: 16, seed: 9, ..TrainConfig::default() };
    let mut trainer = Trainer::new(cfg.clone(), &train).unwrap();
    let mut exact_updates = true;
    for _ in 0..cfg.epochs {
        trainer
            .train_epoch_observed(&train, |t| exact_updates &= t.g_aux.is_none() && t.update == t.g_ltr)
            .unwrap();
    }
    let by_hand = baseline_by_hand(&cfg, &train);
    let same = trainer.params().as_flat() == by_hand.as_flat();
    verdict(
        same && exact_updates,
        format!("{} epochs, {} params bit-identical {same}, updates equal g_ltr {exact_updates}", cfg.epochs, by_hand.num_params()),
    )
}

fn mean(xs: impl IntoIterator<Item = f64>) -> f64 {
    let v: Vec<f64> = xs.into_iter().collect();
    v.iter().sum::<f64>() / v.len() as f64
}

struct Runs {
    data: Vec<(Dataset, Dataset)>,
    records: HashMap<&'static str, Vec<RunRecord>>,
}

fn variants() -> Vec<(&'static str, TrainConfig)> {
    let base = TrainConfig::default();
    let bsce = TrainConfig { ltr_loss: LtrLoss::Bsce, ..base.clone() };
    vec![
        ("ce", base.clone()),
        ("ce+kr", TrainConfig { use_kr: true, ..base.clone() }),
        ("ce+kr+ks", TrainConfig { use_kr: true, use_ks: true, ..base.clone() }),
        ("ce+rl", TrainConfig::reflective(LtrLoss::Ce)),
        ("bsce", bsce),
        ("bsce+rl", TrainConfig::reflective(LtrLoss::Bsce)),
    ]
}

fn train_variants() -> Runs {
    let data: Vec<_> = SEEDS
        .iter()
        .map(|&s| synth_train_test(&SynthConfig::default_longtail(s), TEST_PER_CLASS).unwrap())
        .collect();
    let vs = variants();
    let n = SEEDS.len();
    let flat = Execution::default().map(vs.len() * n, |k| {
        let (v, s) = (k / n, k % n);
        let (train, test) = &data[s];
        run(&vs[v].1.clone().with_seed(SEEDS[s]), train, test).unwrap()
    });
    let mut flat = flat.into_iter();
    let records = vs.iter().map(|(name, _)| (*name, flat.by_ref().take(n).collect())).collect();
    Runs { data, records }
}

fn final_mean(rs: &[RunRecord], f: fn(&reflearn::trainer::EpochMetrics) -> f64) -> f64 {
    mean(rs.iter().map(|r| f(r.last())))
}

fn trend(runs: &Runs) -> Verdict {
    let mut lines = Vec::new();
    let mut pass = true;
    for (base, rl) in [("ce", "ce+rl"), ("bsce", "bsce+rl")] {
        let (b, r) = (&runs.records[base], &runs.records[rl]);
        let (all_b, all_r) = (final_mean(b, |m| m.acc_all), final_mean(r, |m| m.acc_all));
        let (few_b, few_r) = (final_mean(b, |m| m.acc_few), final_mean(r, |m| m.acc_few));
        let ok = all_r >= all_b && (few_r - few_b) * 100.0 >= 1.0;
        pass &= ok;
        lines.push(format!(
            "{base} all {:.2} -> {:.2}, few {:.2} -> {:.2} ({:+.2} pts)",
            all_b * 100.0,
            all_r * 100.0,
            few_b * 100.0,
            few_r * 100.0,
            (few_r - few_b) * 100.0
        ));
    }
    verdict(pass, format!("5 seeds: {}; need all >= and few +1.0 pt", lines.join("; ")))
}

fn mean_class_kl(r: &RunRecord) -> f64 {
    mean(r.class_kl.iter().flat_map(|e| e.iter().map(|v| v.expect("balanced test set covers every class"))))
}

fn rarity_spearman(r: &RunRecord) -> f64 {
    let c = r.class_kl[0].len();
    let per_class: Vec<f64> = (0..c).map(|j| mean(r.class_kl.iter().map(|e| e[j].unwrap()))).collect();
    let rarity: Vec<f64> = (0..c).map(|j| j as f64).collect();
    spearman(&rarity, &per_class)
}

fn divergence(runs: &Runs) -> Verdict {
    let ce = &runs.records["ce"];
    let kr = &runs.records["ce+kr"];
    let rho = mean(ce.iter().map(rarity_spearman));
    let (kl_ce, kl_kr) = (mean(ce.iter().map(mean_class_kl)), mean(kr.iter().map(mean_class_kl)));
    verdict(
        rho > 0.3 && kl_kr < kl_ce,
        format!("CE spearman(KL, rarity) {rho:.3} (> 0.3); mean per-class KL CE {kl_ce:.5} vs CE+KR {kl_kr:.5}"),
    )
}

fn conflicts(runs: &Runs) -> Verdict {
    let off = &runs.records["ce+kr+ks"];
    let shares: Vec<f64> = off
        .iter()
        .map(|r| r.stats.iter().filter(|s| s.conflict_fraction > 0.0).count() as f64 / r.stats.len() as f64)
        .collect();
    let worst_share = shares.iter().cloned().fold(f64::INFINITY, f64::min);
    let mut min_align: Option<f64> = None;
    let mut projected = 0;
    for r in runs.records["ce+rl"].iter().chain(&runs.records["bsce+rl"]) {
        for s in &r.stats {
            if let Some(a) = s.min_aux_alignment {
                min_align = Some(min_align.map_or(a, |m: f64| m.min(a)));
                projected += s.conflicted_batches;
            }
        }
    }
    let ok_align = min_align.is_none_or(|a| a >= -1e-9);
    verdict(
        worst_share >= 0.5 && ok_align,
        format!(
            "KC off: epochs with conflicts per seed {shares:.2?} (>= 0.50); KC on: {projected} projected steps, \
             min cos(applied aux, g_ltr) {}",
            min_align.map_or("n/a".into(), |a| format!("{a:.2e}"))
        ),
    )
}

fn ablation(runs: &Runs) -> Verdict {
    let jobs: Vec<(&Dataset, &Dataset, u64)> = runs.data.iter().zip(SEEDS).map(|((tr, te), s)| (tr, te, s)).collect();
    let cells = match ablation_grid(&TrainConfig::default(), &jobs) {
        Ok(c) => c,
        Err(e) => return verdict(false, format!("grid failed: {e}")),
    };
    let full = cells.iter().find(|c| c.components() == 3).unwrap().acc_all * 100.0;
    let singles: Vec<String> = cells
        .iter()
        .filter(|c| c.components() == 1)
        .map(|c| {
            let name = if c.use_kr { "KR" } else if c.use_ks { "KS" } else { "KC" };
            format!("{name} {:.2}", c.acc_all * 100.0)
        })
        .collect();
    let best_single = cells.iter().filter(|c| c.components() == 1).map(|c| c.acc_all * 100.0).fold(f64::MIN, f64::max);
    verdict(
        cells.len() == 8 && full >= best_single - 0.3,
        format!("{} cells; full RL {full:.2} vs singles [{}] (need >= each - 0.3)", cells.len(), singles.join(", ")),
    )
}

fn cli(args: &[&str]) -> bool {
    let argv = std::iter::once("reflearn").chain(args.iter().copied());
    reflearn::cli::parse_and_dispatch(argv) == reflearn::cli::EXIT_OK
}

fn read_all(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.is_file() && p.file_name().unwrap() != "config.echo")
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap()))
        .collect();
    files.sort();
    files
}

fn determinism() -> Verdict {
    let tmp = tempfile::tempdir().unwrap();
    let mut compared = 0;
    let mut ok = true;
    let mut sets = Vec::new();
    for tag in ["a", "b"] {
        let dir = tmp.path().join(tag);
        let data = dir.join("lt.ltds");
        let s = |p: &Path| p.to_str().unwrap().to_string();
        let (d, r, g) = (s(&data), s(&dir.join("run")), s(&dir.join("grid")));
        ok &= cli(&["synth", "--classes", "8", "--dim", "12", "--n-max", "120", "--if", "20", "--pairs", "2",
            "--test-per-class", "30", "--seed", "4", "--out", &d]);
        ok &= cli(&["train", "--data", &d, "--out", &r, "--epochs", "6", "--hidden", "16", "--kr", "--ks", "--kc"]);
        ok &= cli(&["analyze-kl", "--run", &r, "--data", &d]);
        ok &= cli(&["analyze-conflicts", "--run", &r]);
        ok &= cli(&["ablate", "--data", &d, "--out", &g, "--epochs", "3", "--hidden", "8", "--seeds", "2", "--ltr", "bsce"]);
        sets.push([read_all(&dir), read_all(&dir.join("run")), read_all(&dir.join("grid"))]);
    }
    for (a, b) in sets[0].iter().zip(&sets[1]) {
        compared += a.len();
        ok &= a == b && !a.is_empty();
    }
    verdict(ok, format!("synth, train, analyze-kl, analyze-conflicts, ablate run twice: {compared} files byte-identical {ok}"))
}

fn main() {
    let start = Instant::now();
    let mut results: Vec<(usize, &str, Verdict)> = Vec::new();
    let mut report = |id, name, v: Verdict| {
        println!("criterion {id:2} {} {name}: {}", if v.pass { "PASS" } else { "FAIL" }, v.detail);
        results.push((id, name, v));
    };
    report(1, "gradient oracle", gradient_oracle());
    report(2, "projection suite", projection_suite());
    report(3, "high-temperature equivalence", high_temperature());
    report(4, "CCI end-to-end", cci_end_to_end());
    report(5, "similarity and soft labels", similarity_suite());
    report(6, "reduction to baseline", reduction());
    let runs = train_variants();
    report(7, "trend reproduction", trend(&runs));
    report(8, "divergence diagnostic", divergence(&runs));
    report(9, "conflict diagnostic", conflicts(&runs));
    report(10, "ablation grid", ablation(&runs));
    report(11, "determinism", determinism());
    let took = start.elapsed();
    report(
        12,
        "suite wall time",
        verdict(took < Duration::from_secs(300), format!("acceptance suite {:.1}s (< 300s)", took.as_secs_f64())),
    );
    let failed: Vec<String> = results.iter().filter(|r| !r.2.pass).map(|r| r.0.to_string()).collect();
    println!(
        "acceptance: {} passed, {} failed{}",
        results.len() - failed.len(),
        failed.len(),
        if failed.is_empty() { String::new() } else { format!(" (criteria {})", failed.join(", ")) }
    );
    if !failed.is_empty() {
        std::process::exit(1);
    }
}
