//! Sequential fallback vs the rayon path on the same inputs.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use chestwsl::data::{preprocess, synthetic_dataset, SyntheticSpec};
use chestwsl::nn::{self, Conv2dSpec, Mode};
use chestwsl::train::{batch_gradients, compute_heatmaps, Model, TrainConfig};
use chestwsl::{par, Tape, Tensor};

const MODES: [(&str, bool); 2] = [("sequential", false), ("parallel", true)];

fn conv(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let spec = Conv2dSpec::same(32, 32, 3, 1);
    let x = Tensor::randn(&[16, 32, 28, 28], 1.0, &mut rng);
    let w = Tensor::randn(&spec.weight_shape(), 0.1, &mut rng);
    let mut g = c.benchmark_group("conv2d_forward_backward");
    for (name, on) in MODES {
        par::set_parallel(on);
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| {
                let mut tape = Tape::new();
                let xv = tape.leaf(x.clone().with_requires_grad(true));
                let wv = tape.leaf(w.clone().with_requires_grad(true));
                let y = nn::conv2d(&mut tape, xv, wv, None, &spec).unwrap();
                let s = tape.sum_all(y);
                tape.backward(s).unwrap();
            })
        });
    }
    g.finish();
    par::set_parallel(true);
}

fn toy_setup(n: usize) -> (Model, Tensor, Tensor, chestwsl::data::Dataset) {
    let spec = SyntheticSpec::two_discs(1);
    let data = synthetic_dataset(&spec, n).unwrap();
    let mut cfg = TrainConfig::toy(spec.class_names());
    cfg.workers = 4;
    let model = Model::new(&cfg).unwrap();
    let p = &cfg.preprocess;
    let xs: Vec<Tensor> = data.samples.iter().map(|s| preprocess(&s.image, p, p.center_offset()).unwrap()).collect();
    let ys: Vec<f64> = data.samples.iter().flat_map(|s| s.labels.iter().map(|&l| f64::from(u8::from(l)))).collect();
    (model, Tensor::stack(&xs).unwrap(), Tensor::new(&[n, 2], ys).unwrap(), data)
}

fn train_step(c: &mut Criterion) {
    let (model, x, y, _) = toy_setup(16);
    let w = (&[0.5, 0.5][..], &[0.5, 0.5][..]);
    let mut g = c.benchmark_group("toy_batch_gradients_16x4_shards");
    for (name, on) in MODES {
        par::set_parallel(on);
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| batch_gradients(&model, &x, &y, w, Mode::Train, 4, 7).unwrap())
        });
    }
    g.finish();
    par::set_parallel(true);
}

fn eval(c: &mut Criterion) {
    let (model, _, _, data) = toy_setup(64);
    let mut g = c.benchmark_group("toy_heatmaps_64_images");
    for (name, on) in MODES {
        par::set_parallel(on);
        g.bench_function(BenchmarkId::from_parameter(name), |b| b.iter(|| compute_heatmaps(&model, &data).unwrap()));
    }
    g.finish();
    par::set_parallel(true);
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(20);
    targets = conv, train_step, eval
}
criterion_main!(benches);
