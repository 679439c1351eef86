use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use hbeacon_core::analysis::{expected_two_wave, LineDeployment, SweepParams};
use hbeacon_core::energy::{EnergyState, OpClass, StorageParams};
use hbeacon_core::radio::{resolve_reception, RadioParams, Transmission};
use hbeacon_core::{run_scenario, Codebooks, RunOptions, ScenarioConfig};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn codec(c: &mut Criterion) {
    let books = Codebooks::for_ids(16).unwrap();
    let mut mixed = books.encode(3).unwrap();
    let other = books.encode(9).unwrap();
    for i in (0..books.encoded_bits()).step_by(3) {
        mixed.set_bit(i, other.bit(i));
    }
    c.bench_function("decode_16_ids", |b| b.iter(|| books.decode(black_box(&mixed))));
}

fn radio(c: &mut Criterion) {
    let books = Codebooks::for_ids(4).unwrap();
    let group: Vec<Transmission> = (0..4u16)
        .map(|i| Transmission { sender: i as u32, payload: books.encode(i).unwrap(), start_time: 0.0, rss: -60.0 - i as f64 })
        .collect();
    let params = RadioParams::default();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    c.bench_function("resolve_four_way_collision", |b| {
        b.iter(|| resolve_reception(black_box(&group), &params, &mut rng))
    });
}

fn energy(c: &mut Criterion) {
    let mut s = EnergyState::new(StorageParams::default()).unwrap();
    let loads = [(OpClass::Rx, 20e-3), (OpClass::Sleep, 2e-6)];
    c.bench_function("energy_advance", |b| b.iter(|| s.advance(black_box(3e-3), &loads, black_box(0.01))));
}

fn analysis(c: &mut Criterion) {
    let params = SweepParams::line_default();
    let dep = LineDeployment::new(10, params.d_v).unwrap();
    let times = params.charge_times(&dep);
    c.bench_function("two_wave_r10_w5", |b| {
        b.iter(|| expected_two_wave(&dep, &params.radio, black_box(5), &times).unwrap())
    });
}

fn simulation(c: &mut Criterion) {
    let path = concat!(env!("CARGO_MANIFEST_DIR"), "/../../scenarios/corridor_border2.toml");
    let mut cfg = ScenarioConfig::load(path).unwrap();
    cfg.rounds = 50;
    let mut g = c.benchmark_group("simulation");
    g.sample_size(10);
    g.bench_function("corridor_50_rounds", |b| b.iter(|| run_scenario(black_box(&cfg), RunOptions::default()).unwrap()));
    g.finish();
}

criterion_group!(benches, codec, radio, energy, analysis, simulation);
criterion_main!(benches);
