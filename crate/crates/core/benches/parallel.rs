//! Sequential vs rayon execution of the per-item batch work.

use candle_core::{DType, Tensor};
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use mptp_core::data::{load_manifest, load_samples, ManifestMode};
use mptp_core::metrics::{evaluate_batch, BinaryMask};
use mptp_core::pretrain::{augment_batch, AugmentConfig, AugmentationPolicy};
use mptp_core::synthetic::{shapes_dataset, write_dataset};
use mptp_core::text_encoder::{embed_batch, Caption, ToyEmbedder};
use mptp_core::Exec;

const MODES: [(&str, Exec); 2] = [("sequential", Exec::Sequential), ("parallel", Exec::Parallel)];

fn loading(c: &mut Criterion) {
    let dir = tempfile::tempdir().unwrap();
    let manifest = write_dataset(dir.path(), &shapes_dataset(32, 128, 1).unwrap()).unwrap();
    let manifest = load_manifest(manifest, ManifestMode::Segmentation).unwrap();
    let mut g = c.benchmark_group("load_samples");
    for (name, exec) in MODES {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| load_samples(&manifest, (64, 64), exec).unwrap())
        });
    }
    g.finish();
}

fn embedding(c: &mut Criterion) {
    let emb = ToyEmbedder::default();
    let caps: Vec<Caption> = (0..64)
        .map(|i| Caption::new(&format!("irregular mass number {i} near the lower right border")).unwrap())
        .collect();
    let mut g = c.benchmark_group("embed_batch");
    for (name, exec) in MODES {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| embed_batch(&emb, &caps, 32, DType::F32, exec).unwrap())
        });
    }
    g.finish();
}

fn augmentation(c: &mut Criterion) {
    let policy = AugmentationPolicy::from_config(&AugmentConfig::default()).unwrap();
    let images = Tensor::rand(0f32, 1.0, (16, 3, 96, 96), &candle_core::Device::Cpu).unwrap();
    let streams: Vec<u64> = (0..16).collect();
    let mut g = c.benchmark_group("augment_batch");
    for (name, exec) in MODES {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| augment_batch(&images, &policy, &streams, exec).unwrap())
        });
    }
    g.finish();
}

fn metrics(c: &mut Criterion) {
    let masks: Vec<BinaryMask> = shapes_dataset(64, 224, 2)
        .unwrap()
        .into_iter()
        .map(|s| s.mask.unwrap())
        .collect();
    let shifted: Vec<BinaryMask> = masks.iter().rev().cloned().collect();
    let mut g = c.benchmark_group("evaluate_batch");
    for (name, exec) in MODES {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| evaluate_batch(&shifted, &masks, exec).unwrap())
        });
    }
    g.finish();
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(10);
    targets = loading, embedding, augmentation, metrics
}
criterion_main!(benches);
