use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;

use wdno::diffusion::{train_step, NoiseSchedule, Samples, ScheduleConfig};
use wdno::nn::{init_params, Batch, Denoiser, DenoiserConfig, NormStats};
use wdno::par::{map_indexed, Execution};
use wdno::pde::{generate_one, BurgersConfig, System};
use wdno::rng;
use wdno::wavelet::{dwt_nd, Mode, WaveletName, WaveletSpec};
use wdno::{AxisRole, GridTensor};

const MODES: [(&str, Execution); 2] = [("sequential", Execution::Sequential), ("parallel", Execution::Parallel)];

fn gaussian(n: usize, seed: u64) -> Vec<f64> {
    use rand_distr::{Distribution, StandardNormal};
    let mut r = rng::stream(seed, "bench", 0);
    (0..n).map(|_| StandardNormal.sample(&mut r)).collect()
}

fn dataset_generation(c: &mut Criterion) {
    let cfg = BurgersConfig::with_refinement(1);
    let mut g = c.benchmark_group("dataset_generation");
    g.sample_size(10);
    for (name, exec) in MODES {
        g.bench_function(BenchmarkId::new(name, 8), |b| {
            b.iter(|| map_indexed(exec, 8, |i| generate_one(System::Burgers, 1, i, &cfg).unwrap()))
        });
    }
    g.finish();
}

fn denoiser_passes(c: &mut Criterion) {
    let cfg = DenoiserConfig::desk(4, 6);
    let mut store = init_params(&cfg, 1).unwrap();
    store.stats = Some(NormStats::identity(4, 6));
    let (n, h, w) = (16, 21, 30);
    let batch = Batch {
        n,
        h,
        w,
        x: gaussian(n * 4 * h * w, 1),
        cond: gaussian(n * 6 * h * w, 2),
        null: vec![false; n],
        steps: (1..=n).map(|i| i * 50).collect(),
    };
    let schedule = NoiseSchedule::new(&ScheduleConfig::default()).unwrap();
    let x0 = Samples::new(n, 4, h, w, batch.x.clone()).unwrap();
    let cond = Samples::new(n, 6, h, w, batch.cond.clone()).unwrap();
    let mut g = c.benchmark_group("denoiser");
    for (name, exec) in MODES {
        g.bench_function(BenchmarkId::new("forward", name), |b| {
            b.iter(|| Denoiser::new(&store, exec).predict(black_box(&batch)).unwrap())
        });
        g.bench_function(BenchmarkId::new("train_step", name), |b| {
            let mut r = rng::stream(3, "bench", 0);
            b.iter(|| {
                store.zero_grad();
                train_step(&mut store, exec, &schedule, &x0, &cond, 0.1, &mut r).unwrap()
            })
        });
    }
    g.finish();
}

fn wavelet_batch(c: &mut Criterion) {
    let spec = WaveletSpec::new(WaveletName::Bior24, Mode::Periodization);
    let tensors: Vec<GridTensor> = (0..64)
        .map(|i| GridTensor::new(vec![81, 120], vec![AxisRole::Time, AxisRole::Space], gaussian(81 * 120, i)).unwrap())
        .collect();
    let mut g = c.benchmark_group("wavelet_batch");
    for (name, exec) in MODES {
        g.bench_function(BenchmarkId::new(name, tensors.len()), |b| {
            b.iter(|| map_indexed(exec, tensors.len(), |i| dwt_nd(&tensors[i], &spec, &[0, 1]).unwrap()))
        });
    }
    g.finish();
}

criterion_group!(benches, dataset_generation, denoiser_passes, wavelet_batch);
criterion_main!(benches);
