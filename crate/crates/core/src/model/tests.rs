use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::autodiff::{grad_check, ParamSet, Tape, Tensor};
use crate::kinematics::N_FEATURES;

fn tiny(kind: ModelKind, w: usize) -> ModelConfig {
    let base = match kind {
        ModelKind::Slm => ModelConfig::slm_tiny(),
        ModelKind::Clm => ModelConfig::clm_tiny(3),
    };
    ModelConfig {
        d_model: 8,
        n_heads: 2,
        ff_dim: 12,
        gru_hidden: 8,
        gru_layers: 2,
        embedding_size: (kind == ModelKind::Slm).then_some(8),
        window_size: w,
        ..base
    }
}

fn random_windows(n: usize, w: usize, seed: u64) -> Vec<Vec<f32>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| (0..w * N_FEATURES).map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect()
}

fn refs(w: &[Vec<f32>]) -> Vec<&[f32]> {
    w.iter().map(Vec::as_slice).collect()
}

#[test]
fn positional_table_closed_form() {
    let t = positional_table(5, 6).unwrap();
    for c in 0..6 {
        let expect = if c % 2 == 0 { 0.0 } else { 1.0 };
        assert_eq!(t.at(0, c), expect);
    }
    assert!((t.at(3, 2) - (3.0 / 10000f64.powf(2.0 / 6.0)).sin()).abs() < 1e-12);
    assert!(positional_table(601, 4).is_err());

    let mut tape = Tape::<f64>::new();
    let zero = tape.leaf(Tensor::zeros(&[10, 6])).unwrap();
    let z = positional_encode(&mut tape, zero, 5).unwrap();
    assert_eq!(&tape.value(z).data()[..30], t.data());
    assert_eq!(&tape.value(z).data()[30..], t.data());

    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = tape.leaf(Tensor::from_fn(&[5, 6], |_| rng.random_range(-1.0..1.0))).unwrap();
    let y = tape.leaf(Tensor::from_fn(&[5, 6], |_| rng.random_range(-1.0..1.0))).unwrap();
    let xy = tape.add(x, y).unwrap();
    let a = positional_encode(&mut tape, xy, 5).unwrap();
    let b = positional_encode(&mut tape, x, 5).unwrap();
    for i in 0..30 {
        let d = tape.value(a).data()[i] - tape.value(b).data()[i];
        assert!((d - tape.value(y).data()[i]).abs() < 1e-12);
    }
}

#[test]
fn attention_rows_are_distributions() {
    let cfg = tiny(ModelKind::Slm, 7);
    let model = SequenceModel::new(cfg.clone(), 1).unwrap();
    let mut tape = Tape::new();
    let vars = tape.bind(&model.params).unwrap();
    let bound = Bound { params: &model.params, vars: &vars };
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x = tape.leaf(Tensor::from_fn(&[14, 8], |_| rng.random_range(-2.0..2.0))).unwrap();
    let mut attn = Vec::new();
    transformer_layer(&mut tape, &bound, 0, x, 2, 7, 2, Some(&mut attn)).unwrap();
    assert_eq!(attn.len(), 4);
    for a in attn {
        for row in tape.value(a).data().chunks(7) {
            assert!((row.iter().sum::<f32>() - 1.0).abs() < 1e-5);
        }
    }
}

#[test]
fn single_head_attention_is_permutation_equivariant() {
    let mut cfg = tiny(ModelKind::Slm, 4);
    cfg.n_heads = 1;
    let model = SequenceModel::new(cfg, 4).unwrap();
    let params: ParamSet<f64> = model.params.cast();
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let x: Vec<f64> = (0..32).map(|_| rng.random_range(-1.0..1.0)).collect();
    let perm = [2usize, 0, 3, 1];
    let xp: Vec<f64> = perm.iter().flat_map(|r| x[r * 8..(r + 1) * 8].to_vec()).collect();
    let run = |data: Vec<f64>| {
        let mut tape = Tape::<f64>::new();
        let vars = tape.bind(&params).unwrap();
        let bound = Bound { params: &params, vars: &vars };
        let x = tape.leaf(Tensor::matrix(4, 8, data).unwrap()).unwrap();
        let y = transformer_layer(&mut tape, &bound, 0, x, 1, 4, 1, None).unwrap();
        tape.value(y).data().to_vec()
    };
    let (y, yp) = (run(x), run(xp));
    for (k, r) in perm.iter().enumerate() {
        for c in 0..8 {
            assert!((yp[k * 8 + c] - y[r * 8 + c]).abs() < 1e-12);
        }
    }
}

#[test]
fn zero_sublayers_leave_normalized_input() {
    let cfg = tiny(ModelKind::Slm, 5);
    let mut model = SequenceModel::new(cfg, 2).unwrap();
    for p in model.params.iter_mut() {
        if p.name.starts_with("encoder0.") && !p.name.contains(".ln") {
            p.value = Tensor::zeros(p.value.shape());
        }
    }
    // rows already at zero mean, unit variance: layer norm is the identity
    let row = [1.0f32, -1.0, 1.0, -1.0, 2.0, -2.0, 0.5, -0.5];
    let var = row.iter().map(|v| v * v).sum::<f32>() / 8.0;
    let row: Vec<f32> = row.iter().map(|v| v / var.sqrt()).collect();
    let data: Vec<f32> = (0..5).flat_map(|_| row.clone()).collect();
    let mut tape = Tape::new();
    let vars = tape.bind(&model.params).unwrap();
    let bound = Bound { params: &model.params, vars: &vars };
    let x = tape.leaf(Tensor::matrix(5, 8, data.clone()).unwrap()).unwrap();
    let y = transformer_layer(&mut tape, &bound, 0, x, 1, 5, 2, None).unwrap();
    for (a, b) in tape.value(y).data().iter().zip(&data) {
        assert!((a - b).abs() < 1e-4);
    }
}

#[test]
fn eval_forward_is_deterministic_and_unit_norm() {
    let cfg = tiny(ModelKind::Slm, 9);
    let model = SequenceModel::new(cfg, 3).unwrap();
    let w = random_windows(3, 9, 1);
    let a = model.forward_batch(&refs(&w), Mode::Eval).unwrap();
    let b = model.forward_batch(&refs(&w), Mode::Eval).unwrap();
    assert_eq!(a, b);
    for e in &a {
        assert_eq!(e.len(), 8);
        let n = e.iter().map(|v| v * v).sum::<f32>().sqrt();
        assert!((n - 1.0).abs() < 1e-5);
    }
    // batching does not change a window's output
    let single = model.forward(&w[1], Mode::Eval).unwrap();
    for (x, y) in single.iter().zip(&a[1]) {
        assert!((x - y).abs() < 1e-6);
    }
    let t = model.forward_batch(&refs(&w), Mode::Train { seed: 1, step: 0 }).unwrap();
    assert_ne!(t, a);
}

#[test]
fn dropout_knobs_do_not_affect_eval() {
    let mut cfg = tiny(ModelKind::Clm, 6);
    let w = random_windows(2, 6, 5);
    cfg.dropout_frames = 0.0;
    cfg.dropout_global = 0.0;
    cfg.gru_dropout = 0.0;
    let a = SequenceModel::new(cfg.clone(), 8).unwrap();
    cfg.dropout_frames = 0.9;
    cfg.dropout_global = 0.5;
    cfg.gru_dropout = 0.5;
    let b = SequenceModel::new(cfg, 8).unwrap();
    assert_eq!(
        a.forward_batch(&refs(&w), Mode::Eval).unwrap(),
        b.forward_batch(&refs(&w), Mode::Eval).unwrap()
    );
}

#[test]
fn rejects_malformed_windows() {
    let model = SequenceModel::new(tiny(ModelKind::Slm, 6), 0).unwrap();
    assert!(model.forward(&[0.0; 5 * N_FEATURES], Mode::Eval).is_err());
    assert!(model.forward_batch(&[], Mode::Eval).is_err());
}

// ---------------------------------------------------------------------------
// Straight-line reference implementation over plain nested vectors.

type M = Vec<Vec<f64>>;

fn get(p: &ParamSet<f64>, name: &str) -> M {
    let t = &p.get(name).unwrap().value;
    let (r, c) = t.dims().unwrap();
    (0..r).map(|i| t.data()[i * c..(i + 1) * c].to_vec()).collect()
}

fn vec1(p: &ParamSet<f64>, name: &str) -> Vec<f64> {
    p.get(name).unwrap().value.data().to_vec()
}

fn affine(x: &M, p: &ParamSet<f64>, name: &str) -> M {
    let w = get(p, &format!("{name}.w"));
    let b = vec1(p, &format!("{name}.b"));
    x.iter()
        .map(|row| {
            (0..b.len())
                .map(|j| b[j] + row.iter().enumerate().map(|(k, v)| v * w[k][j]).sum::<f64>())
                .collect()
        })
        .collect()
}

fn norm_rows(x: &M, g: &[f64], b: &[f64]) -> M {
    x.iter()
        .map(|row| {
            let n = row.len() as f64;
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            row.iter()
                .enumerate()
                .map(|(i, v)| (v - mean) / (var + 1e-5).sqrt() * g[i] + b[i])
                .collect()
        })
        .collect()
}

fn sig(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

fn reference_forward(cfg: &ModelConfig, p: &ParamSet<f64>, window: &[f32]) -> Vec<f64> {
    let w = cfg.window_size;
    let d = cfg.d_model;
    let shift = vec1(p, "input.shift");
    let gain = vec1(p, "input.gain");
    let x: M = (0..w)
        .map(|t| (0..18).map(|f| (window[t * 18 + f] as f64 + shift[f]) * gain[f]).collect())
        .collect();
    let mut x = affine(&x, p, "proj");
    for (t, row) in x.iter_mut().enumerate() {
        for (c, v) in row.iter_mut().enumerate() {
            let freq = 10000f64.powf((c - c % 2) as f64 / d as f64);
            *v += if c % 2 == 0 { (t as f64 / freq).sin() } else { (t as f64 / freq).cos() };
        }
    }
    for l in 0..cfg.n_transformer_layers {
        let pre = format!("encoder{l}");
        let q = affine(&x, p, &format!("{pre}.q"));
        let k = affine(&x, p, &format!("{pre}.k"));
        let v = affine(&x, p, &format!("{pre}.v"));
        let dh = d / cfg.n_heads;
        let mut ctx = vec![vec![0.0; d]; w];
        for h in 0..cfg.n_heads {
            for i in 0..w {
                let scores: Vec<f64> = (0..w)
                    .map(|j| {
                        (0..dh).map(|c| q[i][h * dh + c] * k[j][h * dh + c]).sum::<f64>()
                            / (dh as f64).sqrt()
                    })
                    .collect();
                let m = scores.iter().cloned().fold(f64::MIN, f64::max);
                let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
                let z: f64 = e.iter().sum();
                for c in 0..dh {
                    ctx[i][h * dh + c] = (0..w).map(|j| e[j] / z * v[j][h * dh + c]).sum();
                }
            }
        }
        let o = affine(&ctx, p, &format!("{pre}.o"));
        let s: M = x.iter().zip(&o).map(|(a, b)| a.iter().zip(b).map(|(u, v)| u + v).collect()).collect();
        x = norm_rows(&s, &vec1(p, &format!("{pre}.ln1.g")), &vec1(p, &format!("{pre}.ln1.b")));
        let f = affine(&x, p, &format!("{pre}.ff1"));
        let f: M = f.into_iter().map(|r| r.into_iter().map(|v| v.max(0.0)).collect()).collect();
        let f = affine(&f, p, &format!("{pre}.ff2"));
        let s: M = x.iter().zip(&f).map(|(a, b)| a.iter().zip(b).map(|(u, v)| u + v).collect()).collect();
        x = norm_rows(&s, &vec1(p, &format!("{pre}.ln2.g")), &vec1(p, &format!("{pre}.ln2.b")));
    }
    let hdim = cfg.gru_hidden;
    let mut seq = x;
    let mut h = vec![0.0; hdim];
    for l in 0..cfg.gru_layers {
        let xg = affine(&seq, p, &format!("gru{l}.x"));
        let wh = get(p, &format!("gru{l}.h.w"));
        let bh = vec1(p, &format!("gru{l}.h.b"));
        h = vec![0.0; hdim];
        let mut out = Vec::with_capacity(w);
        for xt in &xg {
            let hg: Vec<f64> = (0..3 * hdim)
                .map(|j| bh[j] + (0..hdim).map(|k| h[k] * wh[k][j]).sum::<f64>())
                .collect();
            let mut next = vec![0.0; hdim];
            for i in 0..hdim {
                let r = sig(xt[i] + hg[i]);
                let z = sig(xt[hdim + i] + hg[hdim + i]);
                let n = (xt[2 * hdim + i] + r * hg[2 * hdim + i]).tanh();
                next[i] = (1.0 - z) * n + z * h[i];
            }
            h = next;
            out.push(h.clone());
        }
        seq = out;
    }
    match cfg.kind {
        ModelKind::Slm => {
            let n = h.iter().map(|v| v * v).sum::<f64>().sqrt();
            h.iter().map(|v| v / n).collect()
        }
        ModelKind::Clm => affine(&vec![h], p, "head").remove(0),
    }
}

#[test]
fn forward_matches_reference_implementation() {
    for kind in [ModelKind::Slm, ModelKind::Clm] {
        let mut cfg = tiny(kind, 6);
        cfg.n_transformer_layers = 2;
        let mut model = SequenceModel::new(cfg.clone(), 21).unwrap();
        let mean: Vec<f32> = (0..18).map(|i| i as f32 * 0.01).collect();
        let std: Vec<f32> = (0..18).map(|i| 0.5 + i as f32 * 0.1).collect();
        model.set_input_normalization(&mean, &std).unwrap();
        let windows = random_windows(3, 6, 7);
        let got = model.forward_batch(&refs(&windows), Mode::Eval).unwrap();
        let p64: ParamSet<f64> = model.params.cast();
        for (win, out) in windows.iter().zip(&got) {
            let expect = reference_forward(&cfg, &p64, win);
            assert_eq!(expect.len(), out.len());
            for (a, b) in out.iter().zip(&expect) {
                assert!((*a as f64 - b).abs() < 1e-5, "{kind:?}: {a} vs {b}");
            }
        }
    }
}

#[test]
fn end_to_end_gradients_match_finite_differences() {
    let cfg = tiny(ModelKind::Slm, 12);
    let model = SequenceModel::new(cfg.clone(), 6).unwrap();
    let params: ParamSet<f64> = model.params.cast();
    let windows = random_windows(2, 12, 3);
    let wins = refs(&windows);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let weights = Tensor::from_fn(&[2, 8], |_| rng.random_range(-1.0..1.0));
    let report = grad_check(
        |tape, vars| {
            let bound = Bound { params: &params, vars };
            let out = forward_graph(&cfg, tape, &bound, &wins, Mode::Eval)?;
            let w = tape.leaf(weights.clone())?;
            let y = tape.mul(out, w)?;
            tape.sum(y)
        },
        &params,
        1e-4,
    )
    .unwrap();
    assert!(report.passes(1e-3), "{:?}", report.per_param);
}

#[test]
fn checkpoint_round_trip_reproduces_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    let model = SequenceModel::new(tiny(ModelKind::Clm, 6), 5).unwrap();
    model.save(&path, serde_json::json!({"users": ["a", "b", "c"]})).unwrap();
    let (back, extra) = SequenceModel::load(&path).unwrap();
    assert_eq!(back.config, model.config);
    assert_eq!(extra["users"][2], "c");
    let w = random_windows(2, 6, 1);
    assert_eq!(
        model.forward_batch(&refs(&w), Mode::Eval).unwrap(),
        back.forward_batch(&refs(&w), Mode::Eval).unwrap()
    );

    // a header whose config disagrees with the tensors is refused
    let mut other = model.clone();
    other.config.ff_dim = 13;
    other.save(&path, serde_json::Value::Null).unwrap();
    assert!(SequenceModel::load(&path).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]
    #[test]
    fn output_shape_follows_config(
        heads in 1usize..3, per_head in 1usize..4, layers in 0usize..3,
        gru_layers in 1usize..3, hidden in 1usize..6, w in 1usize..8, clm in any::<bool>(),
    ) {
        let kind = if clm { ModelKind::Clm } else { ModelKind::Slm };
        let cfg = ModelConfig {
            d_model: heads * per_head,
            n_heads: heads,
            n_transformer_layers: layers,
            gru_layers,
            gru_hidden: hidden,
            embedding_size: (!clm).then_some(hidden),
            ..tiny(kind, w)
        };
        let model = SequenceModel::new(cfg.clone(), 0).unwrap();
        let out = model.forward_batch(&refs(&random_windows(2, w, 0)), Mode::Eval).unwrap();
        prop_assert_eq!(out.len(), 2);
        prop_assert_eq!(out[0].len(), cfg.output_size());
    }
}
