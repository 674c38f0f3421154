//! Compares the baseline losses with their reflective variants over several
//! seeds of the default synthetic long-tail set.
//!
//!     cargo run --release --example sweep -- --lr 0.02 --alpha 0.99

use clap::Parser;
use reflearn::data::{synth_train_test, SynthConfig};
use reflearn::par::Execution;
use reflearn::reflect::spearman;
use reflearn::trainer::{run, LtrLoss, RunRecord, TrainConfig};

#[derive(Parser)]
struct Args {
    #[arg(long, default_value_t = 5)]
    seeds: u64,
    #[arg(long, default_value_t = 60)]
    epochs: usize,
    #[arg(long, default_value_t = 0.1)]
    lr: f64,
    #[arg(long, default_value_t = 0.5)]
    sigma_aug: f64,
    #[arg(long, default_value_t = 64)]
    hidden: usize,
    #[arg(long, default_value_t = 64)]
    batch: usize,
    #[arg(long, default_value_t = 2.0)]
    tau: f64,
    #[arg(long, default_value_t = 0.9)]
    alpha: f64,
    #[arg(long)]
    normalize_soft_labels: bool,
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = xs.collect();
    v.iter().sum::<f64>() / v.len() as f64
}

fn rarity_spearman(r: &RunRecord) -> f64 {
    let c = r.class_kl[0].len();
    let per: Vec<f64> = (0..c).map(|j| mean(r.class_kl.iter().map(|e| e[j].unwrap_or(0.0)))).collect();
    spearman(&(0..c).map(|j| j as f64).collect::<Vec<_>>(), &per)
}

fn main() {
    let a = Args::parse();
    let base = TrainConfig {
        epochs: a.epochs,
        lr: a.lr,
        sigma_aug: a.sigma_aug,
        hidden_dim: a.hidden,
        batch_size: a.batch,
        tau: a.tau,
        alpha: a.alpha,
        normalize_soft_labels: a.normalize_soft_labels,
        ..TrainConfig::default()
    };
    let variants = [
        ("ce", base.clone()),
        ("ce+kr", TrainConfig { use_kr: true, ..base.clone() }),
        ("ce+ks", TrainConfig { use_ks: true, ..base.clone() }),
        ("ce+rl", TrainConfig { use_kr: true, use_ks: true, use_kc: true, ..base.clone() }),
        ("bsce", TrainConfig { ltr_loss: LtrLoss::Bsce, ..base.clone() }),
        ("bsce+rl", TrainConfig { ltr_loss: LtrLoss::Bsce, use_kr: true, use_ks: true, use_kc: true, ..base.clone() }),
    ];
    let seeds: Vec<u64> = (0..a.seeds).collect();
    let data: Vec<_> = seeds
        .iter()
        .map(|&s| synth_train_test(&SynthConfig::default_longtail(s), 100).expect("default synth config is valid"))
        .collect();
    let n = seeds.len();
    let records = Execution::default().map(variants.len() * n, |k| {
        let (train, test) = &data[k % n];
        run(&variants[k / n].1.clone().with_seed(seeds[k % n]), train, test).expect("training run")
    });
    println!("variant    acc_all  many    medium  few     mean_kl  spearman  conflict_epochs");
    for (v, (name, _)) in variants.iter().enumerate() {
        let rs = &records[v * n..(v + 1) * n];
        let last = |f: fn(&RunRecord) -> f64| mean(rs.iter().map(f));
        println!(
            "{name:10} {:.4}   {:.4}  {:.4}  {:.4}  {:.5}  {:+.3}    {:.2}",
            last(|r| r.last().acc_all),
            last(|r| r.last().acc_many),
            last(|r| r.last().acc_medium),
            last(|r| r.last().acc_few),
            last(|r| mean(r.class_kl.iter().flatten().map(|v| v.unwrap_or(0.0)))),
            last(rarity_spearman),
            last(|r| r.stats.iter().filter(|s| s.conflict_fraction > 0.0).count() as f64 / r.stats.len() as f64),
        );
    }
}
