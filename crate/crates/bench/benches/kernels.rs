use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};
use tinydetr::boxgeom::{expanded_iou, expanded_siou, iou, siou};
use tinydetr::matching::hungarian;
use tinydetr::numerics::fft::fft2;
use tinydetr::numerics::kernels::{conv2d_forward, ConvGeom};
use tinydetr::pipeline::scene::{gen_scene, SceneConfig};
use tinydetr::{Model, ModelConfig};
use tinydetr_bench::{box_pairs, cost_matrix, signal};

fn overlap(c: &mut Criterion) {
    let pairs = box_pairs(1000, 0);
    let m = ModelConfig::default();
    let (e, s) = (m.expand(), m.siou());
    let mut g = c.benchmark_group("overlap_1000_pairs");
    g.bench_function("iou", |b| b.iter(|| pairs.iter().map(|(x, y)| iou(x, y).unwrap()).sum::<f64>()));
    g.bench_function("expanded_iou", |b| {
        b.iter(|| pairs.iter().map(|(x, y)| expanded_iou(x, y, e).unwrap()).sum::<f64>())
    });
    g.bench_function("siou", |b| b.iter(|| pairs.iter().map(|(x, y)| siou(x, y, s).unwrap()).sum::<f64>()));
    g.bench_function("expanded_siou", |b| {
        b.iter(|| pairs.iter().map(|(x, y)| expanded_siou(x, y, e, s).unwrap()).sum::<f64>())
    });
    g.finish();
}

fn fft(c: &mut Criterion) {
    let mut g = c.benchmark_group("fft2");
    for n in [8usize, 16, 32] {
        let x = signal(n * n, n as u64);
        g.bench_with_input(BenchmarkId::from_parameter(n), &x, |b, x| b.iter(|| fft2(n, n, black_box(x)).unwrap()));
    }
    g.finish();
}

fn conv(c: &mut Criterion) {
    let mut g = c.benchmark_group("conv3x3");
    for (c_in, hw) in [(16usize, 48usize), (32, 24), (64, 12)] {
        let geom = ConvGeom {
            c_in,
            h: hw,
            w: hw,
            k: 3,
            stride: 1,
            pad: 1,
        };
        let x = signal(c_in * hw * hw, 1);
        let w = signal(c_in * c_in * 9, 2);
        g.bench_function(format!("{c_in}x{hw}x{hw}"), |b| {
            b.iter(|| conv2d_forward(black_box(&x), &w, None, c_in, &geom))
        });
    }
    g.finish();
}

fn assignment(c: &mut Criterion) {
    let mut g = c.benchmark_group("hungarian");
    for (rows, cols) in [(7usize, 7usize), (12, 60), (60, 60)] {
        let m = cost_matrix(rows, cols, 3);
        g.bench_function(format!("{rows}x{cols}"), |b| b.iter(|| hungarian(black_box(&m))));
    }
    g.finish();
}

fn forward(c: &mut Criterion) {
    let model = Model::new(ModelConfig::default(), 0).unwrap();
    let image = gen_scene(&SceneConfig::default(), 0).to_tensor();
    let mut g = c.benchmark_group("model");
    g.sample_size(10);
    g.bench_function("student_predict", |b| b.iter(|| model.predict(black_box(&image), 100).unwrap()));
    g.finish();
}

criterion_group!(benches, overlap, fft, conv, assignment, forward);
criterion_main!(benches);
