use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use reflearn::data::{synth_train_test, SynthConfig};
use reflearn::nn::{forward, ModelParams};
use reflearn::par::Execution;
use reflearn::reflect::{class_centers_median, FeatureStore};
use reflearn::trainer::{run, TrainConfig};
use reflearn::Matrix;

const STRATEGIES: [(&str, Execution); 2] = [("sequential", Execution::Sequential), ("parallel", Execution::Parallel)];

fn batch_forward(c: &mut Criterion) {
    let (train, _) = synth_train_test(&SynthConfig::default_longtail(0), 1).unwrap();
    let params = ModelParams::init(train.dim(), 256, train.classes(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let chunk = 256;
    let chunks: Vec<Matrix> = (0..train.len())
        .collect::<Vec<_>>()
        .chunks(chunk)
        .map(|idx| train.features().gather_rows(idx))
        .collect();
    let mut group = c.benchmark_group("forward_full_train_set");
    for (name, exec) in STRATEGIES {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| exec.map(chunks.len(), |k| forward(&params, &chunks[k]).unwrap().logits))
        });
    }
    group.finish();
}

fn class_medians(c: &mut Criterion) {
    let (train, _) = synth_train_test(&SynthConfig::default_longtail(0), 1).unwrap();
    let stores: Vec<FeatureStore> = (0..8)
        .map(|_| {
            let mut s = FeatureStore::new(train.classes(), train.dim());
            s.push_batch(train.features(), train.labels()).unwrap();
            s
        })
        .collect();
    let mut group = c.benchmark_group("median_centers_8_stores");
    for (name, exec) in STRATEGIES {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| exec.map(stores.len(), |k| class_centers_median(&stores[k])))
        });
    }
    group.finish();
}

fn seed_sweep(c: &mut Criterion) {
    let data: Vec<_> = (0..4).map(|s| synth_train_test(&SynthConfig::default_longtail(s), 20).unwrap()).collect();
    let cfg = TrainConfig { epochs: 3, ..TrainConfig::reflective(reflearn::trainer::LtrLoss::Ce) };
    let mut group = c.benchmark_group("four_seed_runs");
    group.sample_size(10);
    for (name, exec) in STRATEGIES {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| {
                exec.map(data.len(), |k| {
                    let (train, test) = &data[k];
                    run(&cfg.clone().with_seed(k as u64), train, test).unwrap().last().acc_all
                })
            })
        });
    }
    group.finish();
}

criterion_group!(benches, batch_forward, class_medians, seed_sweep);
criterion_main!(benches);
