use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use qfuse_core::autodiff::Tape;
use qfuse_core::data::{scene_input, Dataset, SyntheticScene};
use qfuse_core::model::{task_loss_tape, ModelConfig, ToyDetector};
use qfuse_core::par::{map_indexed, Execution};

fn modes() -> [(&'static str, Execution); 2] {
    [
        ("sequential", Execution::Sequential),
        ("parallel", Execution::available()),
    ]
}

/// One minibatch of per-sample forward and backward passes, as the trainer runs them.
fn batch_gradients(model: &ToyDetector, batch: &[SyntheticScene], exec: Execution) -> f64 {
    let losses = map_indexed(exec, batch.len(), |i| {
        let mut tape = Tape::new();
        let b = model.bind(&mut tape, true);
        let x = tape.constant(scene_input(&batch[i]));
        let (_, head) = model.forward(&mut tape, &b, x).unwrap();
        let loss = task_loss_tape(&mut tape, &head, &[&batch[i]], 10.0).unwrap();
        let grads = tape.backward(loss.total).unwrap();
        grads.get(b.params["stem.w"]).data()[0]
    });
    losses.iter().sum()
}

fn gradients(c: &mut Criterion) {
    let model = ToyDetector::new(ModelConfig::default(), 0).unwrap();
    let batch = Dataset::generate(0, 0, 16, Execution::Sequential).scenes;
    let mut group = c.benchmark_group("batch_gradients");
    group.sample_size(10);
    for (name, exec) in modes() {
        group.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &exec| {
            b.iter(|| batch_gradients(&model, &batch, exec))
        });
    }
    group.finish();
}

fn scenes(c: &mut Criterion) {
    let mut group = c.benchmark_group("scene_generation");
    for (name, exec) in modes() {
        group.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &exec| {
            b.iter(|| Dataset::generate(1, 0, 256, exec))
        });
    }
    group.finish();
}

criterion_group!(benches, gradients, scenes);
criterion_main!(benches);
