//! Sequential vs rayon execution of the three hot loops: per-layer probe
//! fits, per-example gradients and per-prompt residual traces.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use gapscope::exec::Exec;
use gapscope::probe::{layer_curve_with, ProbeOptions};
use gapscope::residual::residual_profile;
use gapscope::store::{ActivationDump, DumpMode};
use gapscope::toy::{loss_and_gradients, SyntheticTask, SyntheticTaskSpec, TaskPhase, ToyCheckpoint, ToyConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const POLICIES: [(&str, Exec); 2] = [("sequential", Exec::Sequential), ("parallel", Exec::Parallel)];

fn dump(seed: u64, n_questions: usize, n_layers: usize, d: usize) -> ActivationDump {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut dump = ActivationDump::zeros(DumpMode::Pair, n_questions * 4, n_layers, d);
    for q in 0..n_questions {
        for c in 0..4 {
            let correct = c == q % 4;
            dump.labels.push(u32::from(correct));
            dump.group_ids.push(format!("q{q}"));
            for l in 0..n_layers {
                for (k, v) in dump.vector_mut(q * 4 + c, l).iter_mut().enumerate() {
                    let shift = if correct && k == 0 { 1.0 } else { 0.0 };
                    *v = shift + rng.random_range(-1.0..1.0);
                }
            }
        }
    }
    dump
}

fn probes(c: &mut Criterion) {
    let train = dump(1, 200, 16, 64);
    let test = dump(2, 200, 16, 64);
    let opts = ProbeOptions::default();
    let mut g = c.benchmark_group("layer_curve");
    for (name, exec) in POLICIES {
        g.bench_function(name, |b| b.iter(|| layer_curve_with(&train, &test, &opts, exec).unwrap()));
    }
    g.finish();
}

fn gradients(c: &mut Criterion) {
    let task = SyntheticTask::new(SyntheticTaskSpec::default()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let batch: Vec<_> = (0..32).map(|_| task.example(TaskPhase::Pretrain, &mut rng)).collect();
    let mut g = c.benchmark_group("loss_and_gradients");
    g.sample_size(20);
    for hidden in [32, 64] {
        let config = ToyConfig::new(task.vocab_size(), hidden, 4, 4, 64, 7);
        let ckpt = ToyCheckpoint::init_random(&config).unwrap();
        for (name, exec) in POLICIES {
            g.bench_with_input(BenchmarkId::new(name, hidden), &ckpt, |b, ck| {
                b.iter(|| loss_and_gradients(ck, &batch, exec).unwrap())
            });
        }
    }
    g.finish();
}

fn residual(c: &mut Criterion) {
    let config = ToyConfig::new(64, 64, 32, 4, 16, 11);
    let ckpt = ToyCheckpoint::init_random(&config).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let prompts: Vec<Vec<usize>> = (0..64).map(|_| (0..8).map(|_| rng.random_range(0..64)).collect()).collect();
    let mut g = c.benchmark_group("residual_profile");
    g.sample_size(20);
    for (name, exec) in POLICIES {
        g.bench_function(name, |b| b.iter(|| residual_profile(&ckpt, &prompts, None, exec).unwrap()));
    }
    g.finish();
}

criterion_group!(benches, probes, gradients, residual);
criterion_main!(benches);
