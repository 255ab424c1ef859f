use cast_core::graphpool::{fps, graph_pool, init_graph_pool, CentroidSelector};
use cast_core::learn::synth_dataset;
use cast_core::model::{forward_cast, forward_vit, init_cast, init_vit, prepare, ModelConfig};
use cast_core::rng::Stream;
use cast_core::superpixel::{superpixels, SuperpixelAlgorithm, SuperpixelConfig};
use cast_core::tensorcore::nn::cross_entropy;
use cast_core::{Graph, ParamStore, Tensor};
use criterion::{black_box, criterion_group, criterion_main, Criterion};

fn bench_superpixels(c: &mut Criterion) {
    let image = synth_dataset(0, 1, 64).unwrap().remove(0).image;
    for algorithm in [SuperpixelAlgorithm::Seeds, SuperpixelAlgorithm::Slic] {
        let cfg = SuperpixelConfig { algorithm, ..Default::default() };
        c.bench_function(&format!("superpixels/{algorithm:?}"), |b| {
            b.iter(|| superpixels(black_box(&image), &cfg).unwrap())
        });
    }
}

fn bench_pooling(c: &mut Criterion) {
    let mut rng = Stream::new(0, "bench");
    let z = Tensor::matrix(50, 32, (0..50 * 32).map(|_| rng.normal()).collect()).unwrap();
    c.bench_function("fps/49x32->16", |b| b.iter(|| fps(black_box(&z), 16, 0).unwrap()));
    let mut store = ParamStore::new();
    init_graph_pool(&mut store, "pool", 32, 64, &mut rng);
    c.bench_function("graph_pool/49->16", |b| {
        b.iter(|| {
            let mut g = Graph::new();
            let zv = g.constant(z.clone()).unwrap();
            graph_pool(&mut g, &store, "pool", zv, 16, 2, CentroidSelector::Fps, &mut Stream::new(0, "x")).unwrap();
        })
    });
}

fn bench_models(c: &mut Criterion) {
    let cfg = ModelConfig::default();
    let sample = synth_dataset(1, 1, 64).unwrap().remove(0);
    let input = prepare(&sample.image, &cfg).unwrap();
    let cast = init_cast(&cfg, 0);
    let vit = init_vit(&cfg, 0);
    c.bench_function("cast/forward_backward", |b| {
        b.iter(|| {
            let mut g = Graph::new();
            let f = forward_cast(&mut g, &cast, &cfg, &input, &mut Stream::new(0, "f")).unwrap();
            let loss = cross_entropy(&mut g, f.logits, &[sample.class_label]).unwrap();
            g.backward(loss).unwrap()
        })
    });
    c.bench_function("vit/forward_backward", |b| {
        b.iter(|| {
            let mut g = Graph::new();
            let f = forward_vit(&mut g, &vit, &cfg, &sample.image).unwrap();
            let loss = cross_entropy(&mut g, f.logits, &[sample.class_label]).unwrap();
            g.backward(loss).unwrap()
        })
    });
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(10);
    targets = bench_superpixels, bench_pooling, bench_models
}
criterion_main!(benches);
