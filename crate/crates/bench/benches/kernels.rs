// SPDX-License-Identifier: MIT OR Apache-2.0

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use unlearn_core::capsule::{Capsule, CapsuleMeta};
use unlearn_core::linalg::svd;
use unlearn_core::probe::AlignMode;
use unlearn_core::{ModelConfig, Tensor, ToyModel};

fn filled(rows: usize, cols: usize, salt: u64) -> Tensor {
    // Cheap deterministic fill; values only need to be non-degenerate.
    let data = (0..rows * cols)
        .map(|i| {
            let x = (i as u64).wrapping_mul(6364136223846793005).wrapping_add(salt) >> 33;
            (x % 2001) as f64 / 1000.0 - 1.0
        })
        .collect();
    Tensor::matrix(rows, cols, data).unwrap()
}

fn matmul(c: &mut Criterion) {
    let mut group = c.benchmark_group("matmul");
    for n in [32, 64, 128] {
        let (a, b) = (filled(n, n, 1), filled(n, n, 2));
        group.bench_with_input(BenchmarkId::from_parameter(n), &n, |bch, _| bch.iter(|| a.matmul(black_box(&b)).unwrap()));
    }
    group.finish();
}

fn decomposition(c: &mut Criterion) {
    let mut group = c.benchmark_group("svd");
    for (m, n) in [(40, 16), (128, 64)] {
        let a = filled(m, n, 3);
        group.bench_function(format!("{m}x{n}"), |b| b.iter(|| svd(black_box(&a)).unwrap()));
    }
    group.finish();
}

fn model() -> ToyModel {
    let cfg = ModelConfig { n_layers: 4, d_model: 64, n_heads: 4, d_mlp: 256, vocab_size: 512, max_seq_len: 32, seed: 0 };
    ToyModel::new(cfg).unwrap()
}

fn forward(c: &mut Criterion) {
    let m = model();
    let tokens: Vec<u32> = (1..25).collect();
    c.bench_function("forward/24 tokens", |b| b.iter(|| m.logits(black_box(&tokens)).unwrap()));
    c.bench_function("generate/10 steps", |b| b.iter(|| m.generate(black_box(&tokens[..8]), 10, &[3, 4]).unwrap()));
}

fn capsule_apply(c: &mut Criterion) {
    let d = 64;
    let mut direction = vec![0.0; d];
    direction[5] = 0.6;
    direction[17] = 0.8;
    let cap = Capsule {
        subject: "s".into(),
        target_layers: vec![0],
        direction,
        alpha: -1.0,
        tau: 3.0,
        k: 1.6,
        calib_mean: 0.0,
        calib_std: 1.0,
        align_mode: AlignMode::Truncate,
        meta: CapsuleMeta { effect_size: 2.0, source_signature: "s/L0/down".into(), signature_dim: d, created_at: None },
    };
    let h: Vec<f64> = filled(1, d, 9).data().to_vec();
    c.bench_function("capsule/gated", |b| b.iter(|| cap.apply(black_box(&h), true).unwrap()));
}

criterion_group!(benches, matmul, decomposition, forward, capsule_apply);
criterion_main!(benches);
