// SPDX-License-Identifier: Apache-2.0

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use tmebox_core::fuzz::{run_fuzz, FuzzConfig};
use tmebox_core::instrument::Mode;
use tmebox_core::montecarlo::{wrong_key_trials, TrialConfig};
use tmebox_core::parallel::Executor;

const EXECUTORS: [(&str, Executor); 2] = [("sequential", Executor::Sequential), ("parallel", Executor::Parallel)];

fn trials(c: &mut Criterion) {
    let cfg = TrialConfig { keyid_bits: 6, mac_bits: 28, trials: 65_536, seed: 1 };
    let mut group = c.benchmark_group("wrong_key_trials");
    group.sample_size(10);
    for (name, exec) in EXECUTORS {
        group.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &exec| {
            b.iter(|| wrong_key_trials(&cfg, exec).unwrap())
        });
    }
    group.finish();
}

fn fuzz(c: &mut Criterion) {
    let cfg = FuzzConfig::new(Mode::Gs, 512, 1);
    let mut group = c.benchmark_group("fuzz");
    group.sample_size(10);
    for (name, exec) in EXECUTORS {
        group.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &exec| b.iter(|| run_fuzz(&cfg, exec).unwrap()));
    }
    group.finish();
}

criterion_group!(benches, trials, fuzz);
criterion_main!(benches);
