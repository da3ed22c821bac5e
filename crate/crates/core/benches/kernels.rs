//! Parallel vs sequential kernel benchmarks.
//!
//! The hot kernels keep their `_seq`/`_par` bodies public so both can be
//! timed from one binary (built with the default `parallel` feature). The
//! higher-level benches run whichever mode the feature selected; rebuild
//! with `--no-default-features` to time the sequential fallback there.

use afford_core::collab::{e_step, m_step, normalize_rows};
use afford_core::episodes::generate_synthetic;
use afford_core::model::{Model, ModelConfig};
use afford_core::tensor::{kernels, Tape, Tensor};
use criterion::{black_box, criterion_group, criterion_main, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rand_vec(n: usize, rng: &mut ChaCha8Rng) -> Vec<f32> {
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

fn bench_matmul(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (m, k, n) = (128, 128, 128);
    let a = rand_vec(m * k, &mut rng);
    let b = rand_vec(k * n, &mut rng);
    let mut group = c.benchmark_group("matmul_128");
    group.bench_function("sequential", |bench| {
        bench.iter(|| {
            let mut out = vec![0.0f32; m * n];
            kernels::matmul_seq(&mut out, black_box(&a), black_box(&b), k, n);
            out
        })
    });
    #[cfg(feature = "parallel")]
    group.bench_function("parallel", |bench| {
        bench.iter(|| {
            let mut out = vec![0.0f32; m * n];
            kernels::matmul_par(&mut out, black_box(&a), black_box(&b), k, n);
            out
        })
    });
    group.finish();
}

fn bench_conv2d(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (cin, h, w, cout) = (16, 32, 32, 16);
    let x = rand_vec(cin * h * w, &mut rng);
    let k = rand_vec(cout * cin * 9, &mut rng);
    let b = rand_vec(cout, &mut rng);
    let mut group = c.benchmark_group("conv2d_16x32x32");
    group.bench_function("sequential", |bench| {
        bench.iter(|| {
            let mut out = vec![0.0f32; cout * h * w];
            kernels::conv2d_seq(&mut out, black_box(&x), &k, &b, cin, h, w, 3, 1);
            out
        })
    });
    #[cfg(feature = "parallel")]
    group.bench_function("parallel", |bench| {
        bench.iter(|| {
            let mut out = vec![0.0f32; cout * h * w];
            kernels::conv2d_par(&mut out, black_box(&x), &k, &b, cin, h, w, 3, 1);
            out
        })
    });
    group.finish();
}

fn bench_em_iteration(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let features: Vec<Tensor<f32>> = (0..5)
        .map(|_| Tensor::new(vec![64, 32], rand_vec(64 * 32, &mut rng)))
        .collect();
    let mu0 = normalize_rows(&Tensor::new(vec![16, 32], rand_vec(16 * 32, &mut rng)));
    c.bench_function("em_iteration_n5_N64_K16", |bench| {
        bench.iter(|| {
            let z = e_step(black_box(&features), black_box(&mu0));
            m_step(&features, &z)
        })
    });
}

fn bench_episode_forward(c: &mut Criterion) {
    let model = Model::<f32>::init(ModelConfig::default(), 7);
    let episode = generate_synthetic(11, 0, 5).unwrap();
    c.bench_function("episode_forward_n5", |bench| {
        bench.iter(|| {
            let tape = Tape::new();
            let vars = model.bind(&tape, false);
            let fwd = vars
                .forward_episode(black_box(&episode.support), &episode.queries)
                .unwrap();
            fwd.stacks[0].final_prediction().value()
        })
    });
}

criterion_group!(
    benches,
    bench_matmul,
    bench_conv2d,
    bench_em_iteration,
    bench_episode_forward
);
criterion_main!(benches);
