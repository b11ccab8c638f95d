use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::autodiff::{
    load_checkpoint, save_checkpoint, DropoutKey, ParamSet, Real, Tape, Tensor, Var,
};
use crate::error::{Error, Result};
use crate::kinematics::{FeatureWindow, N_FEATURES};

use super::config::{ModelConfig, ModelKind, MAX_POSITIONS};

pub const LAYER_NORM_EPS: f64 = 1e-5;
/// Windows per forward pass during batched inference.
pub const INFER_CHUNK: usize = 32;

/// Dropout call-site ids; combined with the seed and step into mask keys.
const SITE_FRAMES: u64 = 1;
const SITE_EMBED: u64 = 2;
const SITE_ENCODER: u64 = 3;
const SITE_GRU: u64 = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Eval,
    /// `step` distinguishes dropout masks between optimizer steps.
    Train { seed: u64, step: u64 },
}

impl Mode {
    fn key(self, site: u64) -> (bool, DropoutKey) {
        match self {
            Mode::Eval => (false, DropoutKey { seed: 0, layer: site, step: 0 }),
            Mode::Train { seed, step } => (true, DropoutKey { seed, layer: site, step }),
        }
    }
}

/// Sinusoidal position table: `PE[t, 2i] = sin(t / 10000^(2i/d))`,
/// `PE[t, 2i+1] = cos(t / 10000^(2i/d))`.
pub fn positional_table(rows: usize, d_model: usize) -> Result<Tensor<f64>> {
    if rows > MAX_POSITIONS {
        return Err(Error::WindowTooLong { len: rows, max: MAX_POSITIONS });
    }
    Ok(Tensor::from_fn(&[rows, d_model], |k| {
        let (t, c) = ((k / d_model) as f64, k % d_model);
        let angle = t / 10000f64.powf((c - c % 2) as f64 / d_model as f64);
        if c % 2 == 0 {
            angle.sin()
        } else {
            angle.cos()
        }
    }))
}

/// Adds the positional table to every `w`-row window of a stacked
/// `(batch·w) × d` matrix.
pub fn positional_encode<T: Real>(tape: &mut Tape<T>, x: Var, w: usize) -> Result<Var> {
    let (rows, d) = tape.value(x).dims()?;
    if w == 0 || rows % w != 0 {
        return Err(Error::ShapeMismatch(format!("{rows} rows are not whole {w}-frame windows")));
    }
    let table = positional_table(w, d)?;
    let mut data = Vec::with_capacity(rows * d);
    for _ in 0..rows / w {
        data.extend(table.data().iter().map(|v| T::lit(*v)));
    }
    let pe = tape.leaf(Tensor::matrix(rows, d, data)?)?;
    tape.add(x, pe)
}

/// Parameter lookup by name on a bound tape.
pub struct Bound<'a, T: Real> {
    pub params: &'a ParamSet<T>,
    pub vars: &'a [Var],
}

impl<T: Real> Bound<'_, T> {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.params
            .position(name)
            .map(|i| self.vars[i])
            .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")))
    }
}

fn linear<T: Real>(tape: &mut Tape<T>, p: &Bound<T>, x: Var, prefix: &str) -> Result<Var> {
    let w = p.get(&format!("{prefix}.w"))?;
    let b = p.get(&format!("{prefix}.b"))?;
    let y = tape.matmul(x, w)?;
    tape.add_row(y, b)
}

fn add_norm<T: Real>(tape: &mut Tape<T>, p: &Bound<T>, x: Var, y: Var, prefix: &str) -> Result<Var> {
    let s = tape.add(x, y)?;
    let n = tape.layer_norm(s, 1, T::lit(LAYER_NORM_EPS))?;
    let n = tape.mul_row(n, p.get(&format!("{prefix}.g"))?)?;
    tape.add_row(n, p.get(&format!("{prefix}.b"))?)
}

/// One post-norm encoder layer over `batch` stacked windows of `w` rows.
/// Attention weight matrices are appended to `attn` when given.
#[allow(clippy::too_many_arguments)]
pub fn transformer_layer<T: Real>(
    tape: &mut Tape<T>,
    p: &Bound<T>,
    layer: usize,
    x: Var,
    batch: usize,
    w: usize,
    n_heads: usize,
    mut attn: Option<&mut Vec<Var>>,
) -> Result<Var> {
    let pre = format!("encoder{layer}");
    let (rows, d) = tape.value(x).dims()?;
    if rows != batch * w || d % n_heads != 0 {
        return Err(Error::ShapeMismatch(format!(
            "encoder input {rows}×{d} for {batch} windows of {w}, {n_heads} heads"
        )));
    }
    let dh = d / n_heads;
    let q = linear(tape, p, x, &format!("{pre}.q"))?;
    let k = linear(tape, p, x, &format!("{pre}.k"))?;
    let v = linear(tape, p, x, &format!("{pre}.v"))?;
    let scale = T::lit(1.0 / (dh as f64).sqrt());
    let mut windows = Vec::with_capacity(batch);
    for b in 0..batch {
        let rows = b * w..(b + 1) * w;
        let mut heads = Vec::with_capacity(n_heads);
        for h in 0..n_heads {
            let cols = h * dh..(h + 1) * dh;
            let qh = tape.slice(q, rows.clone(), cols.clone())?;
            let kh = tape.slice(k, rows.clone(), cols.clone())?;
            let vh = tape.slice(v, rows.clone(), cols)?;
            let s = tape.matmul_nt(qh, kh)?;
            let s = tape.scale(s, scale)?;
            let a = tape.softmax(s, 1)?;
            if let Some(list) = attn.as_deref_mut() {
                list.push(a);
            }
            heads.push(tape.matmul(a, vh)?);
        }
        windows.push(if n_heads == 1 { heads[0] } else { tape.concat(&heads, 1)? });
    }
    let ctx = if batch == 1 { windows[0] } else { tape.concat(&windows, 0)? };
    let att = linear(tape, p, ctx, &format!("{pre}.o"))?;
    let x = add_norm(tape, p, x, att, &format!("{pre}.ln1"))?;
    let f = linear(tape, p, x, &format!("{pre}.ff1"))?;
    let f = tape.relu(f)?;
    let f = linear(tape, p, f, &format!("{pre}.ff2"))?;
    add_norm(tape, p, x, f, &format!("{pre}.ln2"))
}

/// Runs one GRU layer. `row_of(b, t)` gives the input row of window `b` at
/// time `t`; the output stacks hidden states time-major (`t·batch + b`).
/// Returns (all states, last state).
#[allow(clippy::too_many_arguments)]
fn gru_layer<T: Real>(
    tape: &mut Tape<T>,
    p: &Bound<T>,
    layer: usize,
    x: Var,
    batch: usize,
    w: usize,
    hidden: usize,
    row_of: impl Fn(usize, usize) -> usize,
) -> Result<(Var, Var)> {
    let pre = format!("gru{layer}");
    let xg = linear(tape, p, x, &format!("{pre}.x"))?;
    let wh = p.get(&format!("{pre}.h.w"))?;
    let bh = p.get(&format!("{pre}.h.b"))?;
    let mut h = tape.leaf(Tensor::zeros(&[batch, hidden]))?;
    let mut states = Vec::with_capacity(w);
    let (r, z, n) = (0..hidden, hidden..2 * hidden, 2 * hidden..3 * hidden);
    for t in 0..w {
        let idx: Vec<usize> = (0..batch).map(|b| row_of(b, t)).collect();
        let xt = tape.gather_rows(xg, &idx)?;
        let hg = tape.matmul(h, wh)?;
        let hg = tape.add_row(hg, bh)?;
        let (xr, hr) = (tape.slice_cols(xt, r.clone())?, tape.slice_cols(hg, r.clone())?);
        let rg = tape.add(xr, hr)?;
        let rg = tape.sigmoid(rg)?;
        let (xz, hz) = (tape.slice_cols(xt, z.clone())?, tape.slice_cols(hg, z.clone())?);
        let zg = tape.add(xz, hz)?;
        let zg = tape.sigmoid(zg)?;
        let (xn, hn) = (tape.slice_cols(xt, n.clone())?, tape.slice_cols(hg, n.clone())?);
        let rn = tape.mul(rg, hn)?;
        let ng = tape.add(xn, rn)?;
        let ng = tape.tanh(ng)?;
        // h' = (1 − z)·n + z·h = n + z·(h − n)
        let diff = tape.sub(h, ng)?;
        let zd = tape.mul(zg, diff)?;
        h = tape.add(ng, zd)?;
        states.push(h);
    }
    let all = if w == 1 { states[0] } else { tape.concat(&states, 0)? };
    Ok((all, h))
}

/// Full forward pass over a batch of windows (each `window_size × 18`,
/// row-major). Returns `batch × output_size`.
pub fn forward_graph<T: Real>(
    cfg: &ModelConfig,
    tape: &mut Tape<T>,
    p: &Bound<T>,
    windows: &[&[f32]],
    mode: Mode,
) -> Result<Var> {
    let (batch, w) = (windows.len(), cfg.window_size);
    if batch == 0 {
        return Err(Error::ShapeMismatch("empty batch".into()));
    }
    if w > MAX_POSITIONS {
        return Err(Error::WindowTooLong { len: w, max: MAX_POSITIONS });
    }
    let mut data = Vec::with_capacity(batch * w * N_FEATURES);
    for win in windows {
        if win.len() != w * N_FEATURES {
            return Err(Error::ShapeMismatch(format!(
                "window has {} values, expected {w}×{N_FEATURES}",
                win.len()
            )));
        }
        data.extend(win.iter().map(|v| T::lit(*v as f64)));
    }
    let x = tape.leaf(Tensor::matrix(batch * w, N_FEATURES, data)?)?;
    let x = tape.add_row(x, p.get("input.shift")?)?;
    let x = tape.mul_row(x, p.get("input.gain")?)?;

    let (train, key) = mode.key(SITE_FRAMES);
    let x = tape.dropout_rows(x, cfg.dropout_frames, train, key)?;
    let x = linear(tape, p, x, "proj")?;
    let x = positional_encode(tape, x, w)?;
    let (train, key) = mode.key(SITE_EMBED);
    let mut x = tape.dropout(x, cfg.dropout_global, train, key)?;
    for l in 0..cfg.n_transformer_layers {
        x = transformer_layer(tape, p, l, x, batch, w, cfg.n_heads, None)?;
    }
    let (train, key) = mode.key(SITE_ENCODER);
    let mut seq = tape.dropout(x, cfg.dropout_global, train, key)?;

    let mut last = seq;
    for l in 0..cfg.gru_layers {
        let (all, h) = if l == 0 {
            gru_layer(tape, p, l, seq, batch, w, cfg.gru_hidden, |b, t| b * w + t)?
        } else {
            let (train, key) = mode.key(SITE_GRU + l as u64);
            seq = tape.dropout(seq, cfg.gru_dropout, train, key)?;
            gru_layer(tape, p, l, seq, batch, w, cfg.gru_hidden, |b, t| t * batch + b)?
        };
        seq = all;
        last = h;
    }
    match cfg.kind {
        ModelKind::Slm => tape.normalize_rows(last),
        ModelKind::Clm => linear(tape, p, last, "head"),
    }
}

/// Parameter names and shapes, in registration order, derived from the
/// configuration alone.
pub fn parameter_layout(cfg: &ModelConfig) -> Vec<(String, Vec<usize>, bool)> {
    let d = cfg.d_model;
    let mut out: Vec<(String, Vec<usize>, bool)> = vec![
        ("input.shift".into(), vec![N_FEATURES], false),
        ("input.gain".into(), vec![N_FEATURES], false),
    ];
    let lin = |out: &mut Vec<_>, name: String, i: usize, o: usize| {
        out.push((format!("{name}.w"), vec![i, o], true));
        out.push((format!("{name}.b"), vec![o], true));
    };
    lin(&mut out, "proj".into(), N_FEATURES, d);
    for l in 0..cfg.n_transformer_layers {
        for part in ["q", "k", "v", "o"] {
            lin(&mut out, format!("encoder{l}.{part}"), d, d);
        }
        out.push((format!("encoder{l}.ln1.g"), vec![d], true));
        out.push((format!("encoder{l}.ln1.b"), vec![d], true));
        lin(&mut out, format!("encoder{l}.ff1"), d, cfg.ff_dim);
        lin(&mut out, format!("encoder{l}.ff2"), cfg.ff_dim, d);
        out.push((format!("encoder{l}.ln2.g"), vec![d], true));
        out.push((format!("encoder{l}.ln2.b"), vec![d], true));
    }
    let h = cfg.gru_hidden;
    for l in 0..cfg.gru_layers {
        let input = if l == 0 { d } else { h };
        lin(&mut out, format!("gru{l}.x"), input, 3 * h);
        lin(&mut out, format!("gru{l}.h"), h, 3 * h);
    }
    if cfg.kind == ModelKind::Clm {
        lin(&mut out, "head".into(), h, cfg.output_size());
    }
    out
}

/// Transformer + GRU identification network with its parameters.
#[derive(Debug, Clone)]
pub struct SequenceModel {
    pub config: ModelConfig,
    pub params: ParamSet,
}

impl SequenceModel {
    /// Fresh model: weights and biases uniform in ±1/√fan_in, layer-norm
    /// gains 1, offsets 0, identity input normalization.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let mut fan_in = 1;
        for (name, shape, trainable) in parameter_layout(&config) {
            let value = if name == "input.gain" || name.ends_with(".g") {
                Tensor::full(&shape, 1.0)
            } else if name == "input.shift" || name.contains(".ln") {
                Tensor::zeros(&shape)
            } else {
                if shape.len() == 2 {
                    fan_in = shape[0];
                }
                let bound = 1.0 / (fan_in as f32).sqrt();
                Tensor::from_fn(&shape, |_| rng.random_range(-bound..bound))
            };
            params.add(&name, value, trainable)?;
        }
        Ok(Self { config, params })
    }

    /// Sets the per-feature standardization applied before projection.
    pub fn set_input_normalization(&mut self, mean: &[f32], std: &[f32]) -> Result<()> {
        if mean.len() != N_FEATURES || std.len() != N_FEATURES {
            return Err(Error::ShapeMismatch("normalization needs 18 values".into()));
        }
        let shift = mean.iter().map(|m| -m).collect();
        let gain = std.iter().map(|s| if *s > 1e-8 { 1.0 / s } else { 1.0 }).collect();
        self.params.get_mut("input.shift").unwrap().value = Tensor::new(vec![N_FEATURES], shift)?;
        self.params.get_mut("input.gain").unwrap().value = Tensor::new(vec![N_FEATURES], gain)?;
        Ok(())
    }

    /// Records the forward pass on `tape` with freshly bound parameters;
    /// returns (output, bound parameter vars).
    pub fn trace(&self, tape: &mut Tape, windows: &[&[f32]], mode: Mode) -> Result<(Var, Vec<Var>)> {
        let vars = tape.bind(&self.params)?;
        let bound = Bound { params: &self.params, vars: &vars };
        let out = forward_graph(&self.config, tape, &bound, windows, mode)?;
        Ok((out, vars))
    }

    /// Batched forward; one output row per window.
    pub fn forward_batch(&self, windows: &[&[f32]], mode: Mode) -> Result<Vec<Vec<f32>>> {
        let mut tape = Tape::new();
        let (out, _) = self.trace(&mut tape, windows, mode)?;
        let n = self.config.output_size();
        Ok(tape.value(out).data().chunks(n).map(<[f32]>::to_vec).collect())
    }

    pub fn forward(&self, window: &[f32], mode: Mode) -> Result<Vec<f32>> {
        Ok(self.forward_batch(&[window], mode)?.remove(0))
    }

    /// Eval-mode outputs for many windows, computed in parallel over fixed
    /// chunks; the result does not depend on the thread count.
    pub fn infer_windows(&self, windows: &[FeatureWindow]) -> Result<Vec<Vec<f32>>> {
        let chunks: Vec<Result<Vec<Vec<f32>>>> = windows
            .par_chunks(INFER_CHUNK)
            .map(|c| {
                let frames: Vec<&[f32]> = c.iter().map(FeatureWindow::frames).collect();
                self.forward_batch(&frames, Mode::Eval)
            })
            .collect();
        let mut out = Vec::with_capacity(windows.len());
        for c in chunks {
            out.extend(c?);
        }
        Ok(out)
    }

    pub fn save(&self, path: &Path, extra: serde_json::Value) -> Result<()> {
        let meta = serde_json::json!({ "model_config": self.config, "extra": extra });
        save_checkpoint(path, &self.params, &meta)
    }

    /// Loads a checkpoint, checking its tensors against the layout its own
    /// configuration implies. Returns the model and the caller's metadata.
    pub fn load(path: &Path) -> Result<(Self, serde_json::Value)> {
        let (params, mut meta) = load_checkpoint(path)?;
        let config: ModelConfig = serde_json::from_value(
            meta.get_mut("model_config")
                .map(serde_json::Value::take)
                .ok_or_else(|| Error::Checkpoint("header has no model_config".into()))?,
        )?;
        config.validate()?;
        let layout = parameter_layout(&config);
        if layout.len() != params.len()
            || layout
                .iter()
                .zip(params.iter())
                .any(|((n, s, _), p)| *n != p.name || s.as_slice() != p.value.shape())
        {
            return Err(Error::Checkpoint("tensors do not match model_config".into()));
        }
        let extra = meta.get_mut("extra").map(serde_json::Value::take).unwrap_or_default();
        Ok((Self { config, params }, extra))
    }
}
