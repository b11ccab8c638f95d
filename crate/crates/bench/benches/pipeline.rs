use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use xrid_core::autodiff::Tape;
use xrid_core::identification::{k_nearest, Query, RefFilter, ReferenceRow, ReferenceStore};
use xrid_core::kinematics::{encode_recording, make_windows, EncodingConfig};
use xrid_core::model::{Mode, ModelConfig, SequenceModel};
use xrid_core::motion_io::{AppLabel, SynthConfig, SyntheticDataset, UserId};

fn encoding(c: &mut Criterion) {
    let cfg = SynthConfig { apps: vec![AppLabel::BeatSaber], ..SynthConfig::new(2, 1.0, 1) };
    let rec = SyntheticDataset::generate(&cfg).unwrap().recordings.remove(0);
    c.bench_function("encode 1 min recording", |b| b.iter(|| encode_recording(black_box(&rec), None).unwrap()));
}

fn model(c: &mut Criterion) {
    let cfg = SynthConfig { apps: vec![AppLabel::BeatSaber], ..SynthConfig::new(2, 1.0, 1) };
    let rec = SyntheticDataset::generate(&cfg).unwrap().recordings.remove(0);
    let stream = encode_recording(&rec, None).unwrap();
    let windows = make_windows(&stream, &EncodingConfig::similarity()).unwrap();
    let frames: Vec<&[f32]> = windows.iter().take(8).map(|w| w.frames()).collect();
    let mcfg = ModelConfig { window_size: 450, frame_step: 50, ..ModelConfig::slm_tiny() };
    let m = SequenceModel::new(mcfg, 0).unwrap();

    let mut g = c.benchmark_group("tiny slm, 8 × 450 frames");
    g.sample_size(10);
    g.bench_function("forward", |b| b.iter(|| m.forward_batch(black_box(&frames), Mode::Eval).unwrap()));
    g.bench_function("forward + backward", |b| {
        b.iter(|| {
            let mut tape = Tape::new();
            let (out, _) = m.trace(&mut tape, &frames, Mode::Train { seed: 1, step: 0 }).unwrap();
            let loss = tape.mean(out).unwrap();
            tape.backward(loss).unwrap()
        })
    });
    g.finish();
}

fn scan(c: &mut Criterion) {
    let dim = 480;
    let mut store = ReferenceStore::new(dim);
    for i in 0..20_000usize {
        let mut e: Vec<f32> = (0..dim).map(|j| ((i * 31 + j * 17) % 97) as f32 - 48.0).collect();
        let n = e.iter().map(|v| v * v).sum::<f32>().sqrt();
        e.iter_mut().for_each(|v| *v /= n);
        let row = ReferenceRow {
            user: UserId::numbered(i % 49),
            app: AppLabel::PLAY_ORDER[i % 5].clone(),
            session: "s1".into(),
            window_start: i,
        };
        store.push(row, &e).unwrap();
    }
    let q = store.embedding(123).to_vec();
    c.bench_function("nearest of 20k × 480", |b| {
        b.iter(|| k_nearest(&store, Query::new(black_box(&q)), 1, &RefFilter::all()).unwrap())
    });
}

criterion_group!(benches, encoding, model, scan);
criterion_main!(benches);
