use criterion::{black_box, criterion_group, criterion_main, BatchSize, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use r2i_core::codec::{Codec, CodecConfig};
use r2i_core::denoiser::{Denoiser, DenoiserConfig, Template};
use r2i_core::eval::{fid, kid, Classifier};
use r2i_core::numerics::{Tape, Tensor};
use r2i_core::sampler::{guided_eps, Guidance};

fn random(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0f32..1.0))
}

fn kernels(c: &mut Criterion) {
    let a = random(&[128, 128], 1);
    let b = random(&[128, 128], 2);
    c.bench_function("matmul 128x128x128", |bench| {
        bench.iter(|| {
            let mut t = Tape::<f32>::inference();
            let (x, y) = (t.constant(a.clone()), t.constant(b.clone()));
            black_box(t.matmul(x, y).unwrap());
        })
    });
    let x = random(&[8, 16, 32, 32], 3);
    let w = random(&[32, 16, 3, 3], 4);
    c.bench_function("conv3x3 8x16x32x32 -> 32, forward", |bench| {
        bench.iter(|| {
            let mut t = Tape::<f32>::inference();
            let (xv, wv) = (t.constant(x.clone()), t.constant(w.clone()));
            black_box(t.conv2d(xv, wv, 1, 1).unwrap());
        })
    });
    c.bench_function("conv3x3 8x16x32x32 -> 32, forward and backward", |bench| {
        bench.iter(|| {
            let mut t = Tape::<f32>::new();
            let xv = t.leaf(x.clone(), true);
            let wv = t.leaf(w.clone(), true);
            let y = t.conv2d(xv, wv, 1, 1).unwrap();
            let loss = t.mean(y).unwrap();
            black_box(t.backward(loss).unwrap());
        })
    });
}

fn models(c: &mut Criterion) {
    let den = Denoiser::new(DenoiserConfig::default(), 0).unwrap();
    let z = random(&[8, 4, 8, 8], 5);
    let cond = den.template_condition(Template::HeadOfClass, 2).unwrap();
    let null = den.null_condition();
    c.bench_function("unet noise prediction, batch 8", |bench| {
        bench.iter(|| black_box(den.predict_noise_batch(&z, &[50.0; 8], &[&cond; 8], 100).unwrap()))
    });
    let g = Guidance {
        conds: vec![&cond; 8],
        null: &null,
        scale: 7.5,
    };
    c.bench_function("guided noise estimate, batch 8, s=7.5", |bench| {
        bench.iter(|| black_box(guided_eps(&den, &z, 50.0, &g, 100).unwrap()))
    });
    let codec = Codec::new(CodecConfig::toy(), 0).unwrap();
    let images = random(&[8, 3, 32, 32], 6);
    c.bench_function("codec encode and decode, batch 8", |bench| {
        bench.iter(|| {
            let z = codec.encode(&images).unwrap();
            black_box(codec.decode(&z).unwrap())
        })
    });
    let clf = Classifier::new(0);
    let list: Vec<Tensor> = (0..8).map(|i| random(&[3, 32, 32], 10 + i)).collect();
    c.bench_function("classifier features, batch 8", |bench| {
        bench.iter(|| black_box(clf.features(&list).unwrap()))
    });
}

fn metrics(c: &mut Criterion) {
    let a = random(&[1000, 64], 7);
    let b = random(&[1000, 64], 8);
    c.bench_function("fid 1000x64", |bench| bench.iter(|| black_box(fid(&a, &b).unwrap())));
    c.bench_function("kid 1000x64", |bench| {
        bench.iter_batched(|| (a.clone(), b.clone()), |(x, y)| black_box(kid(&x, &y).unwrap()), BatchSize::SmallInput)
    });
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(10);
    targets = kernels, models, metrics
}
criterion_main!(benches);
