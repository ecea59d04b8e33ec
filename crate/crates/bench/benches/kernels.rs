use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use hazefuse::config::TrainConfig;
use hazefuse::haze::{haze_density, HazeConfig};
use hazefuse::nn::{Model, ModelConfig};
use hazefuse::synth;
use hazefuse::tensor::conv2d;
use hazefuse::train::{Dataset, Trainer};
use hazefuse::{ConvParams, Shape, Tape, Tensor};

fn random(shape: Shape, rng: &mut ChaCha8Rng) -> Tensor<f32> {
    Tensor::from_fn(shape, |_, _, _| rng.gen_range(-1.0..1.0))
}

fn conv(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut group = c.benchmark_group("conv2d 16->16 3x3");
    for size in [32, 64] {
        let x = random(Shape::new(16, size, size), &mut rng);
        let w = random(Shape::new(16, 16, 9), &mut rng);
        let mut p = ConvParams::new(16, 16, 3, w.data().to_vec(), vec![0.0; 16]).unwrap();
        p.padding = 1;
        group.bench_with_input(BenchmarkId::new("forward", size), &x, |b, x| b.iter(|| conv2d(black_box(x), &p).unwrap()));
        group.bench_with_input(BenchmarkId::new("forward+backward", size), &x, |b, x| {
            b.iter(|| {
                let tape = Tape::new();
                let (xv, wv) = (tape.leaf(x.clone()), tape.leaf(w.clone()));
                let y = tape.conv2d(&xv, &wv, None, 3, 1, 1, 1).unwrap();
                tape.backward(&tape.sum(&y))
            })
        });
    }
    group.finish();
}

fn haze(c: &mut Criterion) {
    let scene = synth::scene(synth::DepthFamily::Radial, 128, 128, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let cfg = HazeConfig::image();
    c.bench_function("haze_density 3x128x128", |b| b.iter(|| haze_density(black_box(&scene.hazy), &cfg).unwrap()));
}

fn model(c: &mut Criterion) {
    let scenes = synth::suite(4, 64, 64, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
    let data = Dataset::from_scenes(&scenes);
    let net = Model::<f32>::new(ModelConfig::default(), 0).unwrap();
    let s = &data.samples[0];
    c.bench_function("inference 64x64", |b| b.iter(|| net.infer(black_box(&s.ir), &s.hazy).unwrap()));

    let cfg = TrainConfig { crop_size: 32, ..TrainConfig::default() };
    let mut trainer = Trainer::new(cfg, &data).unwrap();
    let mut group = c.benchmark_group("training");
    group.sample_size(10);
    group.bench_function("step batch 6 crop 32", |b| b.iter(|| trainer.step(&data).unwrap()));
    group.finish();
}

criterion_group!(benches, conv, haze, model);
criterion_main!(benches);
