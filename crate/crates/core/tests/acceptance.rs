//! Acceptance suite. Each test prints one `criterion N ... PASS|FAIL` line
//! to stderr (outside the test harness capture) and then asserts it.
//!
//! Run alone with `cargo test -p xrid-core --test acceptance`. The tests
//! hold a shared lock so timed criteria never compete for the CPU.

use std::collections::BTreeSet;
use std::f64::consts::PI;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, MutexGuard};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use statrs::distribution::{ContinuousCDF, FisherSnedecor, StudentsT};

use xrid_core::autodiff::{grad_check, DropoutKey, ParamSet, Tape, Tensor, Var};
use xrid_core::evaluation::{build_reference_store, eval_cross_app, CellMetric, EmbeddedSet};
use xrid_core::identification::{
    classifier_identify, k_nearest, topk_users, vote_identify, Candidate, Query, RankedCandidates,
    RefFilter, ReferenceRow, ReferenceStore,
};
use xrid_core::kinematics::quat::{add3, Quat};
use xrid_core::kinematics::{
    encode_body_relative, encode_brv, encode_recording, make_windows, resample_to_30fps,
    EncodingConfig, FeatureFrame, FeatureStream, FeatureWindow, N_FEATURES,
};
use xrid_core::model::{forward_graph, Bound, Mode, ModelConfig, ModelKind, SequenceModel};
use xrid_core::motion_io::{
    AppLabel, Device, DevicePose, Frame, Recording, SynthConfig, SyntheticDataset, UserId,
};
use xrid_core::pipeline::{preprocess, run_all, RunConfig};
use xrid_core::stats::{paired_t, pitch_stats, posthoc_bonferroni, rm_anova, travel_distance};
use xrid_core::training::{classification_loss, similarity_loss, train, TrainConfig};
use xrid_core::Result;

static GATE: Mutex<()> = Mutex::new(());

fn gate() -> MutexGuard<'static, ()> {
    GATE.lock().unwrap_or_else(|e| e.into_inner())
}

fn report(n: u32, title: &str, ok: bool, detail: &str) {
    let line = format!(
        "criterion {n:>2} {title:<36} {}  {detail}\n",
        if ok { "PASS" } else { "FAIL" }
    );
    let _ = std::io::stderr().write_all(line.as_bytes());
    assert!(ok, "criterion {n} failed: {detail}");
}

fn suffix(problems: &[String]) -> String {
    if problems.is_empty() {
        String::new()
    } else {
        format!("; {}", problems.join("; "))
    }
}

// ---------------------------------------------------------------- 1

fn rand_params(rng: &mut ChaCha8Rng, shapes: &[&[usize]]) -> ParamSet<f64> {
    let mut p = ParamSet::new();
    for (i, s) in shapes.iter().enumerate() {
        p.add(&format!("p{i}"), Tensor::from_fn(s, |_| rng.random_range(-1.0..1.0)), true)
            .unwrap();
    }
    p
}

/// Sum of `y` against fixed random weights.
fn weighted_sum(t: &mut Tape<f64>, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = Tensor::from_fn(t.value(y).shape(), |_| rng.random_range(-1.0..1.0));
    let w = t.leaf(w)?;
    let p = t.mul(y, w)?;
    t.sum(p)
}

type Op = Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>>;

fn primitive_cases() -> Vec<(&'static str, Vec<Vec<usize>>, Op)> {
    let key = DropoutKey { seed: 1, layer: 2, step: 3 };
    let s = |v: &[&[usize]]| v.iter().map(|x| x.to_vec()).collect::<Vec<_>>();
    vec![
        ("matmul", s(&[&[3, 4], &[4, 5]]), Box::new(|t, v| t.matmul(v[0], v[1]))),
        ("matmul_nt", s(&[&[3, 4], &[5, 4]]), Box::new(|t, v| t.matmul_nt(v[0], v[1]))),
        ("transpose", s(&[&[3, 4]]), Box::new(|t, v| t.transpose(v[0]))),
        ("add", s(&[&[3, 4], &[3, 4]]), Box::new(|t, v| t.add(v[0], v[1]))),
        ("sub", s(&[&[3, 4], &[3, 4]]), Box::new(|t, v| t.sub(v[0], v[1]))),
        ("mul", s(&[&[3, 4], &[3, 4]]), Box::new(|t, v| t.mul(v[0], v[1]))),
        ("add_row", s(&[&[3, 4], &[4]]), Box::new(|t, v| t.add_row(v[0], v[1]))),
        ("mul_row", s(&[&[3, 4], &[4]]), Box::new(|t, v| t.mul_row(v[0], v[1]))),
        ("scale", s(&[&[3, 4]]), Box::new(|t, v| t.scale(v[0], -2.5))),
        ("add_scalar", s(&[&[3, 4]]), Box::new(|t, v| t.add_scalar(v[0], 0.5))),
        ("tanh", s(&[&[3, 4]]), Box::new(|t, v| t.tanh(v[0]))),
        ("sigmoid", s(&[&[3, 4]]), Box::new(|t, v| t.sigmoid(v[0]))),
        ("relu", s(&[&[3, 4]]), Box::new(|t, v| t.relu(v[0]))),
        ("softmax/0", s(&[&[3, 4]]), Box::new(|t, v| t.softmax(v[0], 0))),
        ("softmax/1", s(&[&[3, 4]]), Box::new(|t, v| t.softmax(v[0], 1))),
        ("log_softmax/0", s(&[&[3, 4]]), Box::new(|t, v| t.log_softmax(v[0], 0))),
        ("log_softmax/1", s(&[&[3, 4]]), Box::new(|t, v| t.log_softmax(v[0], 1))),
        ("layer_norm/0", s(&[&[3, 4]]), Box::new(|t, v| t.layer_norm(v[0], 0, 1e-5))),
        ("layer_norm/1", s(&[&[3, 4]]), Box::new(|t, v| t.layer_norm(v[0], 1, 1e-5))),
        ("concat/0", s(&[&[2, 4], &[3, 4]]), Box::new(|t, v| t.concat(&[v[0], v[1]], 0))),
        ("concat/1", s(&[&[3, 2], &[3, 4]]), Box::new(|t, v| t.concat(&[v[0], v[1]], 1))),
        ("slice", s(&[&[4, 5]]), Box::new(|t, v| t.slice(v[0], 1..3, 2..5))),
        ("slice_cols", s(&[&[4, 5]]), Box::new(|t, v| t.slice_cols(v[0], 1..4))),
        ("gather_rows", s(&[&[4, 3]]), Box::new(|t, v| t.gather_rows(v[0], &[3, 0, 3]))),
        ("gather", s(&[&[4, 3]]), Box::new(|t, v| t.gather(v[0], &[11, 0, 5, 5]))),
        ("dropout", s(&[&[4, 3]]), Box::new(move |t, v| t.dropout(v[0], 0.4, true, key))),
        ("dropout_rows", s(&[&[4, 3]]), Box::new(move |t, v| t.dropout_rows(v[0], 0.4, true, key))),
        ("mean", s(&[&[4, 3]]), Box::new(|t, v| t.mean(v[0]))),
        ("sum", s(&[&[4, 3]]), Box::new(|t, v| t.sum(v[0]))),
        ("cosine_similarity", s(&[&[4, 3], &[4, 3]]), Box::new(|t, v| t.cosine_similarity(v[0], v[1]))),
        ("normalize_rows", s(&[&[4, 3]]), Box::new(|t, v| t.normalize_rows(v[0]))),
        ("cross_entropy", s(&[&[4, 3]]), Box::new(|t, v| classification_loss(t, v[0], &[2, 0, 1, 2]))),
        (
            "triplet",
            s(&[&[5, 3]]),
            Box::new(|t, v| {
                let e = t.normalize_rows(v[0])?;
                similarity_loss(t, e, &[0, 0, 1, 1, 2], 0.3)
            }),
        ),
    ]
}

/// Max relative error of a tiny model with its training loss on top and
/// dropout active.
fn model_grad_error(kind: ModelKind) -> f64 {
    let cfg = match kind {
        ModelKind::Slm => ModelConfig::slm_tiny(),
        ModelKind::Clm => ModelConfig::clm_tiny(3),
    };
    let w = cfg.window_size;
    let model = SequenceModel::new(cfg.clone(), 21).unwrap();
    let params: ParamSet<f64> = model.params.cast();
    let labels: Vec<usize> = match kind {
        ModelKind::Slm => vec![0, 0, 1, 1],
        ModelKind::Clm => vec![0, 1, 2, 1],
    };
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let windows: Vec<Vec<f32>> = labels
        .iter()
        .map(|_| (0..w * N_FEATURES).map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect();
    let wins: Vec<&[f32]> = windows.iter().map(Vec::as_slice).collect();
    let report = grad_check(
        |tape, vars| {
            let bound = Bound { params: &params, vars };
            let out = forward_graph(&cfg, tape, &bound, &wins, Mode::Train { seed: 5, step: 2 })?;
            match kind {
                ModelKind::Slm => similarity_loss(tape, out, &labels, 0.3),
                ModelKind::Clm => classification_loss(tape, out, &labels),
            }
        },
        &params,
        1e-5,
    )
    .unwrap();
    report.max_error()
}

#[test]
fn criterion_01_gradient_correctness() {
    let _g = gate();
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mut worst = ("", 0.0f64);
    let mut bad = Vec::new();
    let cases = primitive_cases();
    for (name, shapes, op) in &cases {
        let shapes: Vec<&[usize]> = shapes.iter().map(Vec::as_slice).collect();
        let ps = rand_params(&mut rng, &shapes);
        let r = grad_check(
            |t, v| {
                let y = op(t, v)?;
                weighted_sum(t, y, 99)
            },
            &ps,
            1e-5,
        )
        .unwrap();
        let e = r.max_error();
        if e > worst.1 {
            worst = (name, e);
        }
        if e >= 1e-4 {
            bad.push(format!("{name} {e:.1e}"));
        }
    }
    let slm = model_grad_error(ModelKind::Slm);
    let clm = model_grad_error(ModelKind::Clm);
    let secs = start.elapsed().as_secs_f64();
    let ok = bad.is_empty() && slm < 1e-3 && clm < 1e-3 && secs < 60.0;
    report(
        1,
        "gradient correctness",
        ok,
        &format!(
            "{} ops, worst {} {:.1e}{}; slm {slm:.1e}, clm {clm:.1e}; {secs:.1}s",
            cases.len(),
            worst.0,
            worst.1,
            if bad.is_empty() { String::new() } else { format!(" (over 1e-4: {})", bad.join(", ")) }
        ),
    );
}

// ---------------------------------------------------------------- 2

fn brv(rec: &Recording) -> Vec<FeatureFrame> {
    encode_brv(&encode_body_relative(&resample_to_30fps(rec).unwrap())).unwrap()
}

#[test]
fn criterion_02_encoding_invariance() {
    let _g = gate();
    let mut cfg = SynthConfig::new(20, 0.05, 41);
    cfg.rate_hz = 72.0;
    let ds = SyntheticDataset::generate(&cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let mut worst = 0.0f64;
    for rec in &ds.recordings {
        let shift = [rng.random_range(-50.0..50.0), rng.random_range(-3.0..3.0), rng.random_range(-50.0..50.0)];
        let q = Quat::from_yaw(rng.random_range(-PI..PI));
        let mv = |p: &DevicePose| DevicePose::new(add3(q.rotate_vec(p.pos), shift), q * p.rot);
        let moved = Recording {
            frames: rec
                .frames
                .iter()
                .map(|f| Frame { t: f.t, hmd: mv(&f.hmd), left: mv(&f.left), right: mv(&f.right) })
                .collect(),
            ..rec.clone()
        };
        let (a, b) = (brv(rec), brv(&moved));
        assert_eq!(a.len(), b.len());
        for (fa, fb) in a.iter().zip(&b) {
            for (x, y) in fa.iter().zip(fb) {
                worst = worst.max((x - y).abs());
            }
        }
    }
    report(
        2,
        "encoding invariance",
        worst < 1e-6,
        &format!("{} recordings, max |Δ| {worst:.1e}", ds.recordings.len()),
    );
}

// ---------------------------------------------------------------- 3

fn brute_force_starts(l: usize, w: usize, s: usize) -> Vec<usize> {
    let mut out = Vec::new();
    let mut st = 0;
    while st + w <= l {
        out.push(st);
        st += s;
    }
    out
}

#[test]
fn criterion_03_feature_contract() {
    let _g = gate();
    let dir = tempfile::tempdir().unwrap();
    let ds = SyntheticDataset::generate(&SynthConfig::new(3, 0.5, 5)).unwrap();
    let manifest = ds.write(&dir.path().join("data")).unwrap();
    let cfg = RunConfig::default().resolve(3).unwrap();
    let mut problems = Vec::new();
    let mut n_windows = 0;
    let mut sizes = BTreeSet::new();
    for kind in [ModelKind::Slm, ModelKind::Clm] {
        let full = match kind {
            ModelKind::Slm => ModelConfig::slm(),
            ModelKind::Clm => ModelConfig::clm(3),
        };
        let enc = cfg.model_config(kind).unwrap().encoding().unwrap();
        if enc.window_size != full.window_size {
            problems.push(format!("{kind:?} desk window {} vs {}", enc.window_size, full.window_size));
        }
        let p = preprocess(&manifest, &enc, &dir.path().join("cache")).unwrap();
        let expected: usize = p
            .streams
            .iter()
            .map(|s| brute_force_starts(s.len(), enc.window_size, enc.frame_step).len())
            .sum();
        if expected != p.windows.len() {
            problems.push(format!("{kind:?}: {} windows, enumerator {expected}", p.windows.len()));
        }
        for w in &p.windows {
            sizes.insert(w.size);
            if w.frames().len() != w.size * N_FEATURES || w.size != enc.window_size {
                problems.push(format!("{kind:?} window of {} values", w.frames().len()));
            }
        }
        n_windows += p.windows.len();
    }
    if sizes != BTreeSet::from([450, 600]) {
        problems.push(format!("window sizes {sizes:?}"));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..200 {
        let (l, w, s) = (rng.random_range(1..2500), rng.random_range(1..700), rng.random_range(1..250));
        let stream = Arc::new(FeatureStream {
            user: UserId::numbered(0),
            app: AppLabel::BeatSaber,
            session: "s1".into(),
            frame_offset: 0,
            data: vec![0.0; l * N_FEATURES],
        });
        let got = match make_windows(&stream, &EncodingConfig::new(w, s).unwrap()) {
            Ok(ws) => ws.iter().map(|x| x.start).collect(),
            Err(_) => Vec::new(),
        };
        if got != brute_force_starts(l, w, s) {
            problems.push(format!("(L={l}, W={w}, S={s})"));
        }
    }
    report(
        3,
        "feature contract",
        problems.is_empty(),
        &format!("{n_windows} windows of {sizes:?}×18, 200 (L,W,S) triples{}", suffix(&problems)),
    );
}

// ---------------------------------------------------------------- 4

fn stream_windows(recs: &[Recording], range: Option<[usize; 2]>, enc: &EncodingConfig) -> Vec<FeatureWindow> {
    recs.iter()
        .flat_map(|r| make_windows(&encode_recording(r, range).unwrap(), enc).unwrap())
        .collect()
}

fn classifier_accuracy(model: &SequenceModel, users: &[UserId], windows: &[FeatureWindow]) -> f64 {
    let logits = model.infer_windows(windows).unwrap();
    let hits = windows
        .iter()
        .zip(&logits)
        .filter(|(w, l)| users[classifier_identify(l).unwrap()] == *w.user())
        .count();
    hits as f64 / windows.len() as f64
}

#[test]
fn criterion_04_overfit_sanity() {
    let _g = gate();
    let mut sc = SynthConfig::new(5, 1.5, 11);
    sc.apps = vec![AppLabel::BeatSaber];
    let ds = SyntheticDataset::generate(&sc).unwrap();
    let cfg = ModelConfig::clm_tiny(5);
    let enc = cfg.encoding().unwrap();
    let train_w = stream_windows(&ds.recordings, Some([0, 1800]), &enc);
    let test_w = stream_windows(&ds.recordings, Some([1800, 2700]), &enc);
    let tc = TrainConfig { epochs: 50, patience: 50, seed: 3, ..TrainConfig::default() };

    let start = Instant::now();
    let out = train(SequenceModel::new(cfg.clone(), 1).unwrap(), &train_w, &[], &tc).unwrap();
    let secs = start.elapsed().as_secs_f64();
    let train_acc = classifier_accuracy(&out.model, &out.class_users, &train_w);

    // same windows, labels shuffled across windows
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut labels: Vec<UserId> = train_w.iter().map(|w| w.user().clone()).collect();
    labels.shuffle(&mut rng);
    let permuted: Vec<FeatureWindow> = train_w
        .iter()
        .zip(labels)
        .map(|(w, user)| FeatureWindow {
            stream: Arc::new(FeatureStream {
                user,
                app: w.app().clone(),
                session: w.session().to_string(),
                frame_offset: w.start_frame(),
                data: w.frames().to_vec(),
            }),
            start: 0,
            size: w.size,
        })
        .collect();
    let null = train(SequenceModel::new(cfg, 1).unwrap(), &permuted, &[], &tc).unwrap();
    let null_acc = classifier_accuracy(&null.model, &null.class_users, &test_w);
    let n = test_w.len() as f64;
    let sigma = (0.2 * 0.8 / n).sqrt();

    let ok = train_acc >= 0.95 && secs < 300.0 && (null_acc - 0.2).abs() <= 3.0 * sigma;
    report(
        4,
        "overfit sanity",
        ok,
        &format!(
            "train acc {train_acc:.3} after {} epochs in {secs:.0}s; permuted-label acc {null_acc:.3} on {n} held-out windows (0.2 ± {:.3})",
            out.history.iter().map(|r| r.epoch).max().unwrap_or(0) + 1,
            3.0 * sigma
        ),
    );
}

// ---------------------------------------------------------------- 5, 6

struct SlmRun {
    model: SequenceModel,
    test: EmbeddedSet,
    apps: Vec<AppLabel>,
}

/// Trains a tiny similarity model on `n_train` synthetic users and embeds
/// `n_test` different synthetic users. Test windows do not overlap.
fn slm_run(modulation: f64, n_train: usize, n_test: usize, test_minutes: f64, seed: u64) -> SlmRun {
    let cfg = ModelConfig::slm_tiny();
    let enc = cfg.encoding().unwrap();
    let mut sc = SynthConfig::new(n_train, 2.0, seed);
    sc.rate_hz = 30.0;
    sc.app_modulation = modulation;
    let apps = sc.apps.clone();
    let train_ds = SyntheticDataset::generate(&sc).unwrap();
    let train_w = stream_windows(&train_ds.recordings, None, &enc);
    drop(train_ds);
    let val_w: Vec<FeatureWindow> = train_w.iter().step_by(8).cloned().collect();
    let tc = TrainConfig {
        epochs: 12,
        patience: 12,
        max_batches_per_epoch: Some(25),
        seed,
        ..TrainConfig::default()
    };
    let out = train(SequenceModel::new(cfg.clone(), seed).unwrap(), &train_w, &val_w, &tc).unwrap();

    let test_enc = EncodingConfig::new(cfg.window_size, cfg.window_size).unwrap();
    let mut tc = SynthConfig { n_users: n_test, minutes_per_app: test_minutes, seed: seed ^ 0xA5A5, ..sc };
    tc.rate_hz = 30.0;
    let mut test_ds = SyntheticDataset::generate(&tc).unwrap();
    for r in &mut test_ds.recordings {
        r.user = UserId::new(format!("held{}", &r.user.as_str()[1..]));
    }
    let test_w = stream_windows(&test_ds.recordings, None, &test_enc);
    drop(test_ds);
    let test = build_reference_store(&out.model, &test_w, &apps).unwrap();
    SlmRun { model: out.model, test, apps }
}

#[test]
fn criterion_05_similarity_separation() {
    let _g = gate();
    let run = slm_run(1.0, 8, 4, 2.0, 31);
    let m = eval_cross_app(&run.test, &run.apps, CellMetric::NnAccuracy).unwrap();
    let diag = m.diagonal_mean();
    let chance = 1.0 / run.test.users().len() as f64;
    report(
        5,
        "similarity separation",
        diag >= 3.0 * chance,
        &format!(
            "same-app NN {diag:.3} on {} unseen users (chance {chance:.3}, {} embedding dims)",
            run.test.users().len(),
            run.model.config.output_size()
        ),
    );
}

/// Spearman rank correlation with average ranks for ties.
fn spearman(x: &[f64], y: &[f64]) -> f64 {
    fn ranks(v: &[f64]) -> Vec<f64> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|a, b| v[*a].total_cmp(&v[*b]));
        let mut r = vec![0.0; v.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
                j += 1;
            }
            for k in i..=j {
                r[idx[k]] = (i + j) as f64 / 2.0;
            }
            i = j + 1;
        }
        r
    }
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum::<f64>().sqrt();
    let sy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum::<f64>().sqrt();
    cov / (sx * sy)
}

#[test]
fn criterion_06_cross_app_phenomenon() {
    let _g = gate();
    let levels = [0.0, 0.5, 1.0, 2.0, 3.0];
    let span = CellMetric::SequenceAccuracy { span_seconds: 600.0 };
    let top3 = CellMetric::Top3SequenceAccuracy { span_seconds: 600.0 };
    let mut off = Vec::new();
    let mut problems = Vec::new();
    let mut rows = Vec::new();
    let start = Instant::now();
    for (i, &level) in levels.iter().enumerate() {
        let run = slm_run(level, 8, 6, 10.2, 50 + i as u64);
        let chance = 1.0 / run.test.users().len() as f64;
        let nn = eval_cross_app(&run.test, &run.apps, CellMetric::NnAccuracy).unwrap();
        let seq = eval_cross_app(&run.test, &run.apps, span).unwrap();
        let t3 = eval_cross_app(&run.test, &run.apps, top3).unwrap();
        let (d, o, sd) = (nn.diagonal_mean(), nn.off_diagonal_mean(), seq.diagonal_mean());
        if d < 3.0 * chance {
            problems.push(format!("diagonal {d:.3} at {level}"));
        }
        if sd <= d {
            problems.push(format!("sequence {sd:.3} ≤ window {d:.3} at {level}"));
        }
        for (r, row) in seq.mean.iter().enumerate() {
            for (c, v) in row.iter().enumerate() {
                if t3.mean[r][c] < *v {
                    problems.push(format!("top3 < top1 in cell ({r},{c}) at {level}"));
                }
            }
        }
        rows.push(format!("{level}: diag {d:.3} off {o:.3} seq {sd:.3}"));
        off.push(o);
    }
    let rho = spearman(&levels, &off);
    if rho >= -0.8 {
        problems.push(format!("spearman {rho:.2}"));
    }
    report(
        6,
        "cross-app phenomenon",
        problems.is_empty(),
        &format!(
            "[{}] spearman {rho:.2}; {:.0}s{}",
            rows.join(" | "),
            start.elapsed().as_secs_f64(),
            suffix(&problems)
        ),
    );
}

// ---------------------------------------------------------------- 7

fn user(s: &str) -> UserId {
    UserId::new(s)
}

fn cand(u: &str, votes: usize, cum: f64) -> Candidate {
    Candidate { user: user(u), votes, cum_similarity: cum }
}

fn order(r: &RankedCandidates) -> Vec<&str> {
    r.candidates.iter().map(|c| c.user.as_str()).collect()
}

fn unit(v: &[f32]) -> Vec<f32> {
    let n = v.iter().map(|x| x * x).sum::<f32>().sqrt();
    v.iter().map(|x| x / n).collect()
}

fn row(u: &str, app: AppLabel, start: usize) -> ReferenceRow {
    ReferenceRow { user: user(u), app, session: "s1".into(), window_start: start }
}

#[test]
fn criterion_07_identification_ordering() {
    let _g = gate();
    let mut problems = Vec::new();

    // votes, then cumulative similarity, then user id; independent of input order
    let fixture = vec![
        cand("u3", 2, 1.5),
        cand("u1", 2, 1.5),
        cand("u2", 2, 1.7),
        cand("u0", 1, 0.99),
        cand("u5", 3, 0.1),
        cand("u4", 0, 0.0),
        cand("u6", 0, 0.0),
    ];
    let expect = ["u5", "u2", "u1", "u3", "u0", "u4", "u6"];
    let mut rng = ChaCha8Rng::seed_from_u64(70);
    for _ in 0..200 {
        let mut c = fixture.clone();
        c.shuffle(&mut rng);
        if order(&RankedCandidates::from_unsorted(c, 4)) != expect {
            problems.push("fixture order depends on input order".to_string());
            break;
        }
    }

    // identical references: the earlier row wins the nearest slot
    let e = unit(&[1.0, 0.0, 0.0]);
    let mut store = ReferenceStore::new(3);
    for (i, u) in ["u2", "u1", "u2", "u0"].iter().enumerate() {
        store.push(row(u, AppLabel::BeatSaber, 30 * i), &e).unwrap();
    }
    let nn = k_nearest(&store, Query::new(&e), 4, &RefFilter::all()).unwrap();
    if nn.iter().map(|(i, _)| *i).collect::<Vec<_>>() != [0, 1, 2, 3] {
        problems.push(format!("tied k_nearest order {nn:?}"));
    }
    let key = store.rows()[0].key();
    let nn = k_nearest(&store, Query::excluding(&e, &key), 1, &RefFilter::all()).unwrap();
    if nn[0].0 != 1 {
        problems.push("self-exclusion did not skip row 0".into());
    }

    // equal votes and equal similarity sums fall back to the user id
    let mut store = ReferenceStore::new(2);
    let (a, b) = (unit(&[1.0, 0.2]), unit(&[0.2, 1.0]));
    store.push(row("u9", AppLabel::SocialVr, 0), &a).unwrap();
    store.push(row("u4", AppLabel::SocialVr, 0), &b).unwrap();
    store.push(row("u7", AppLabel::SocialVr, 0), &unit(&[-1.0, -1.0])).unwrap();
    let qs = [Query::new(&a), Query::new(&b)];
    let r = vote_identify(&store, &qs, 1, &RefFilter::all()).unwrap();
    if order(&r) != ["u4", "u9", "u7"] {
        problems.push(format!("symmetric tie order {:?}", order(&r)));
    }
    if r.candidates.iter().map(|c| c.votes).collect::<Vec<_>>() != [1, 1, 0] {
        problems.push("zero-vote user missing from ranking".into());
    }

    // prefix property on random rankings with many ties
    for _ in 0..1000 {
        let n = rng.random_range(0..12);
        let c: Vec<Candidate> = (0..n)
            .map(|i| {
                let votes = rng.random_range(0..4);
                let cum = [0.0, 0.5, 1.0][rng.random_range(0..3)] * votes as f64;
                cand(&format!("u{i:02}"), votes, cum)
            })
            .collect();
        let r = RankedCandidates::from_unsorted(c, 5);
        for k in 0..=n + 2 {
            let a = topk_users(&r, k);
            let b = topk_users(&r, k + 1);
            if a.len() != k.min(n) || b[..a.len()] != a[..] {
                problems.push(format!("prefix broken at k={k}, n={n}"));
            }
        }
        if r.winner() != topk_users(&r, 1).first() {
            problems.push("winner is not top-1".into());
        }
        for pair in r.candidates.windows(2) {
            let key = |c: &Candidate| (std::cmp::Reverse(c.votes), -c.cum_similarity, c.user.clone());
            let (x, y) = (key(&pair[0]), key(&pair[1]));
            if x.0.cmp(&y.0).then(x.1.total_cmp(&y.1)).then(x.2.cmp(&y.2)).is_ge() {
                problems.push("adjacent candidates not strictly ordered".into());
            }
        }
    }
    problems.dedup();
    report(
        7,
        "identification ordering",
        problems.is_empty(),
        &format!("adversarial fixtures and 1000 random rankings{}", suffix(&problems)),
    );
}

// ---------------------------------------------------------------- 8

/// F and p from explicit residuals `x − row mean − col mean + grand`.
fn anova_oracle(x: &[Vec<f64>]) -> (f64, f64) {
    let (n, a) = (x.len(), x[0].len());
    let grand: f64 = x.iter().flatten().sum::<f64>() / (n * a) as f64;
    let rm: Vec<f64> = x.iter().map(|r| r.iter().sum::<f64>() / a as f64).collect();
    let cm: Vec<f64> = (0..a).map(|j| x.iter().map(|r| r[j]).sum::<f64>() / n as f64).collect();
    let (mut ss_t, mut ss_e) = (0.0, 0.0);
    for i in 0..n {
        for j in 0..a {
            ss_t += (cm[j] - grand).powi(2);
            ss_e += (x[i][j] - rm[i] - cm[j] + grand).powi(2);
        }
    }
    let (d1, d2) = ((a - 1) as f64, ((a - 1) * (n - 1)) as f64);
    let f = (ss_t / d1) / (ss_e / d2);
    (f, FisherSnedecor::new(d1, d2).unwrap().sf(f))
}

fn still_recording(n: usize, pose: impl Fn(usize) -> ([f64; 3], Quat)) -> Recording {
    let frames = (0..n)
        .map(|i| {
            let (p, q) = pose(i);
            let d = DevicePose::new(p, q);
            Frame { t: i as f64 / 30.0, hmd: d, left: d, right: d }
        })
        .collect();
    Recording {
        user: UserId::numbered(0),
        app: AppLabel::BeatSaber,
        session: "s1".into(),
        frames,
        nominal_rate: 30.0,
    }
}

#[test]
fn criterion_08_statistics_oracles() {
    let _g = gate();
    let mut rng = ChaCha8Rng::seed_from_u64(80);
    let mut worst_f = 0.0f64;
    let mut worst_t = 0.0f64;
    for _ in 0..100 {
        let n = rng.random_range(3..30);
        let a = rng.random_range(2..7);
        let x: Vec<Vec<f64>> = (0..n).map(|_| (0..a).map(|_| rng.random_range(-5.0..5.0)).collect()).collect();
        let r = rm_anova(&x).unwrap();
        let (f, p) = anova_oracle(&x);
        worst_f = worst_f.max((r.f - f).abs() / f.max(1.0)).max((r.p - p).abs());

        let (c0, c1) = (rng.random_range(0..a), rng.random_range(0..a));
        let col = |j: usize| x.iter().map(|r| r[j]).collect::<Vec<_>>();
        if c0 != c1 {
            let d: Vec<f64> = x.iter().map(|r| r[c0] - r[c1]).collect();
            let m = n as f64;
            let (sum, sum_sq) = (d.iter().sum::<f64>(), d.iter().map(|v| v * v).sum::<f64>());
            let sd = ((sum_sq - sum * sum / m) / (m - 1.0)).sqrt();
            let t = sum / m / (sd / m.sqrt());
            let p = 2.0 * StudentsT::new(0.0, 1.0, m - 1.0).unwrap().sf(t.abs());
            let (t2, p2) = paired_t(&col(c0), &col(c1));
            worst_t = worst_t.max((t - t2).abs()).max((p - p2).abs());
        }
        let c = (a * (a - 1) / 2) as f64;
        for ph in posthoc_bonferroni(&x, 0.05).unwrap() {
            if ph.p_adjusted != (ph.p_raw * c).min(1.0) {
                worst_t = f64::INFINITY;
            }
        }
    }

    let rejected = (0..1000)
        .filter(|_| {
            let x: Vec<Vec<f64>> = (0..12)
                .map(|_| {
                    let s = 3.0 * rng.sample::<f64, _>(StandardNormal);
                    (0..5).map(|_| s + rng.sample::<f64, _>(StandardNormal)).collect()
                })
                .collect();
            rm_anova(&x).unwrap().p < 0.05
        })
        .count();
    let rate = rejected as f64 / 1000.0;

    let line = still_recording(1801, |i| ([0.5 * i as f64 / 30.0, 1.6, 0.0], Quat::IDENTITY));
    let travel = travel_distance(&line, Device::Hmd).unwrap()[0];
    let amp = 20.0f64;
    let sine = still_recording(1800, |i| {
        let th = amp * (2.0 * PI * i as f64 / 45.0).sin();
        ([0.0, 1.6, 0.0], Quat::from_yaw_pitch_roll(0.4, th.to_radians(), 0.0))
    });
    let pitch_sd = pitch_stats(&sine).std_deg;
    let pitch_rel = (pitch_sd / (amp / 2f64.sqrt()) - 1.0).abs();

    let ok = worst_f < 1e-6
        && worst_t < 1e-6
        && (rate - 0.05).abs() <= 0.015
        && (travel - 30.0).abs() < 1e-9
        && pitch_rel < 0.01;
    report(
        8,
        "statistics oracles",
        ok,
        &format!(
            "anova Δ {worst_f:.1e}, paired-t Δ {worst_t:.1e}, null rate {rate:.3}, travel {travel:.6} m/min, pitch sd {pitch_sd:.3}° (rel {pitch_rel:.1e})"
        ),
    );
}

// ---------------------------------------------------------------- 9

fn files_with_ext(root: &Path, ext: &str) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else if p.extension().is_some_and(|x| x == ext) {
                out.push(p.strip_prefix(root).unwrap().to_path_buf());
            }
        }
    }
    out.sort();
    out
}

#[test]
fn criterion_09_end_to_end() {
    let _g = gate();
    let dir = tempfile::tempdir().unwrap();
    let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    let mut times = Vec::new();
    for run in ["a", "b"] {
        let cfg = RunConfig { seed: 7, cache_dir: Some(dir.path().join(format!("cache_{run}"))), ..RunConfig::default() };
        let out = dir.path().join(run);
        let start = Instant::now();
        pool.install(|| run_all(cfg, &out, |_| {})).unwrap();
        times.push(start.elapsed().as_secs_f64());
    }
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let expected = [
        "eval/overall_per_user.csv",
        "eval/cross_app_nn_accuracy.csv",
        "eval/cross_app_sequence_accuracy.csv",
        "eval/cross_app_top3_sequence_accuracy.csv",
        "eval/classifier_per_user.csv",
        "stats/movement_pitch.csv",
        "stats/anova.csv",
        "stats/posthoc.csv",
    ];
    let mut problems: Vec<String> = expected
        .iter()
        .filter(|f| !a.join(f).is_file())
        .map(|f| format!("missing {f}"))
        .collect();
    let csvs = files_with_ext(&a, "csv");
    let mut compared = 0;
    for f in csvs.iter().chain(&files_with_ext(&a, "ckpt")) {
        if f.starts_with("data") {
            continue;
        }
        compared += 1;
        if fs::read(a.join(f)).unwrap() != fs::read(b.join(f)).ok().unwrap_or_default() {
            problems.push(format!("{} differs", f.display()));
        }
    }
    for (i, t) in times.iter().enumerate() {
        if *t >= 600.0 {
            problems.push(format!("run {i} took {t:.0}s"));
        }
    }
    report(
        9,
        "end to end",
        problems.is_empty(),
        &format!(
            "runs {:.0}s and {:.0}s at 1 thread; {compared} outputs byte-identical{}",
            times[0],
            times[1],
            suffix(&problems)
        ),
    );
}

// ---------------------------------------------------------------- 10

#[test]
fn criterion_10_full_dataset_targets() {
    let _g = gate();
    let line = "criterion 10 full dataset targets                    SKIP  optional; needs the released recordings and a full-scale training budget\n";
    let _ = std::io::stderr().write_all(line.as_bytes());
}
