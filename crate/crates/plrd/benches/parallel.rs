//! Sequential vs rayon kernels on the workloads that dominate runtime:
//! matrix products, whole-model factorization, and batched forward passes.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::{Rng, SeedableRng};

use plrd::linalg::{kernels, DenseMatrix};
use plrd::model::{AttentionMode, Checkpoint, GraphDims, ModelGraph};
use plrd::planner::PlanStep;

fn random_matrix(rng: &mut rand_chacha::ChaCha8Rng, rows: usize, cols: usize) -> DenseMatrix {
    let data: Vec<f64> = (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect();
    DenseMatrix::new(rows, cols, data).unwrap()
}

fn bench_matmul(c: &mut Criterion) {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
    let mut group = c.benchmark_group("matmul");
    for &n in &[64usize, 128, 256] {
        let a = random_matrix(&mut rng, n, n);
        let b = random_matrix(&mut rng, n, n);
        group.bench_with_input(BenchmarkId::new("seq", n), &n, |bench, _| {
            bench.iter(|| {
                let mut out = vec![0.0; n * n];
                kernels::matmul_seq(a.data(), b.data(), n, n, n, &mut out);
                out
            })
        });
        #[cfg(feature = "parallel")]
        group.bench_with_input(BenchmarkId::new("par", n), &n, |bench, _| {
            bench.iter(|| {
                let mut out = vec![0.0; n * n];
                kernels::matmul_par(a.data(), b.data(), n, n, n, &mut out);
                out
            })
        });
    }
    group.finish();
}

fn desk_model() -> Checkpoint {
    let graph = ModelGraph::new(
        GraphDims { d_model: 64, d_ff: 256, n_heads: 4, n_layers: 2, vocab: 64, max_seq_len: 64 },
        AttentionMode::Full,
    )
    .unwrap();
    Checkpoint::new_seeded(graph, 9, 0.05).unwrap()
}

fn bench_apply_step(c: &mut Criterion) {
    let ckpt = desk_model();
    let step = PlanStep { step_index: 1, r_attn: Some(16), r_mlp: Some(32), token_budget: 0 };
    // apply_plan_step factors every targeted layer; with the `parallel`
    // feature the layers run on the rayon pool, otherwise in sequence.
    c.bench_function("apply_plan_step/all_layers", |bench| {
        bench.iter(|| ckpt.apply_plan_step(&step).unwrap())
    });
}

fn bench_forward_batch(c: &mut Criterion) {
    let ckpt = desk_model();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
    let batch: Vec<Vec<u32>> = (0..8)
        .map(|_| (0..64).map(|_| rng.gen_range(0..64u32)).collect())
        .collect();
    c.bench_function("forward_batch/8x64", |bench| {
        bench.iter(|| ckpt.forward_batch(&batch).unwrap())
    });
}

criterion_group!(benches, bench_matmul, bench_apply_step, bench_forward_batch);
criterion_main!(benches);
