use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use lst_bench::{corpus, model_and_batch, random_matrix};
use lst_core::model::Architecture;
use lst_core::patching::{aligned_patch, static_patch, SilenceMode};
use lst_core::tensor::Graph;
use std::hint::black_box;

fn matmul(c: &mut Criterion) {
    let mut group = c.benchmark_group("matmul");
    for n in [64, 128, 256] {
        let a = random_matrix(n, n, 1);
        let b = random_matrix(n, n, 2);
        group.bench_with_input(BenchmarkId::new("forward_backward", n), &n, |bench, _| {
            bench.iter(|| {
                let mut g = Graph::new();
                let x = g.leaf(a.clone(), true);
                let y = g.leaf(b.clone(), true);
                let z = g.matmul(x, y).unwrap();
                let s = g.sum(z).unwrap();
                g.backward(s).unwrap();
                black_box(g.grad(x).unwrap()[0])
            })
        });
    }
    group.finish();
}

fn patching(c: &mut Criterion) {
    let utts = corpus(200);
    c.bench_function("patching/static_p4", |b| {
        b.iter(|| utts.iter().map(|u| static_patch(u.speech_tokens.len(), 4).unwrap().len()).sum::<usize>())
    });
    c.bench_function("patching/aligned", |b| {
        b.iter(|| {
            utts.iter()
                .map(|u| aligned_patch(u.speech_tokens.len(), &u.spans, SilenceMode::Separate).unwrap().len())
                .sum::<usize>()
        })
    });
}

fn train_step(c: &mut Criterion) {
    let mut group = c.benchmark_group("loss_forward_backward");
    group.sample_size(10);
    for arch in [Architecture::Lst, Architecture::Base] {
        let (model, rows) = model_and_batch(arch, 4, 128);
        group.bench_function(arch.to_string(), |b| {
            b.iter(|| {
                let mut g = Graph::new();
                let p = model.params.bind(&mut g, true);
                let l = model.batch_loss(&mut g, &p, &rows).unwrap();
                g.backward(l.total).unwrap();
                black_box(g.value(l.total).item())
            })
        });
    }
    group.finish();
}

criterion_group!(benches, matmul, patching, train_step);
criterion_main!(benches);
