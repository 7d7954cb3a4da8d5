use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};

use audiomamba::bench::naive_attention;
use audiomamba::model::{Mode, Model, ModelConfig};
use audiomamba::scan::{scan_chunked, scan_sequential};
use audiomamba::{Tape, Tensor};
use audiomamba_bench::{attention_inputs, scan_terms};

const DIM: usize = 64;
const STATE: usize = 16;

fn scan_vs_attention(c: &mut Criterion) {
    let mut g = c.benchmark_group("sequence_mixing");
    g.sample_size(10);
    for len in [1024usize, 2048, 4096] {
        g.throughput(Throughput::Elements(len as u64));
        let terms = scan_terms(len, DIM, STATE, 0);
        g.bench_with_input(BenchmarkId::new("scan_sequential", len), &terms, |b, t| b.iter(|| scan_sequential(black_box(t))));
        g.bench_with_input(BenchmarkId::new("scan_chunked", len), &terms, |b, t| b.iter(|| scan_chunked(black_box(t), 64)));
        let (x, w) = attention_inputs(len, DIM, 0);
        g.bench_with_input(BenchmarkId::new("attention", len), &len, |b, &l| {
            b.iter(|| naive_attention(black_box(x.data()), [w[0].data(), w[1].data(), w[2].data(), w[3].data()], l, DIM))
        });
    }
    g.finish();
}

fn chunk_sizes(c: &mut Criterion) {
    let mut g = c.benchmark_group("scan_chunk");
    let terms = scan_terms(2048, DIM, STATE, 1);
    for chunk in [16usize, 64, 256] {
        g.bench_with_input(BenchmarkId::from_parameter(chunk), &chunk, |b, &k| b.iter(|| scan_chunked(black_box(&terms), k)));
    }
    g.finish();
}

fn toy_backbone(c: &mut Criterion) {
    let model = Model::<f32>::new(ModelConfig::toy(8), 0).expect("valid toy config");
    let mel = Tensor::zeros(&[model.config.frames, model.config.n_mels]);
    let mut g = c.benchmark_group("toy_backbone");
    g.sample_size(20);
    g.bench_function("predict", |b| b.iter(|| model.predict(black_box(&mel))));
    g.bench_function("forward_backward", |b| {
        b.iter(|| {
            let tape = Tape::new();
            let vars = model.bind(&tape);
            let out = model.forward(&vars, &mel, &mut Mode::Eval).expect("forward");
            let loss = out.logits.sum().expect("sum");
            tape.backward(loss).expect("backward");
            tape.param_grads().len()
        })
    });
    g.finish();
}

criterion_group!(benches, scan_vs_attention, chunk_sizes, toy_backbone);
criterion_main!(benches);
