//! Training loops for both model kinds: cross-entropy for the classifier,
//! batch-all triplet loss with P×K sampling for the similarity model,
//! validation-based early stopping and seeded determinism.

mod losses;

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::identification::{
    classifier_identify, leave_one_out_accuracy, ReferenceRow, ReferenceStore,
};
use crate::kinematics::{FeatureWindow, N_FEATURES};
use crate::model::{Mode, ModelKind, SequenceModel};
use crate::motion_io::UserId;
use crate::util::mix_seed;

pub use losses::{
    classification_loss, cross_entropy_value, similarity_loss, triplet_loss_value, valid_triplets,
};

/// Upper bound on the fixed batches used for the similarity model's
/// validation loss.
const VAL_LOSS_BATCHES: usize = 8;
const VAL_STREAM: u64 = 0x7A1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Classifier batch size.
    pub batch_size: usize,
    /// Similarity batches hold `p_users × k_windows` windows.
    pub p_users: usize,
    pub k_windows: usize,
    pub seed: u64,
    pub margin: f64,
    pub patience: usize,
    pub checkpoint: Option<PathBuf>,
    /// Caps optimizer steps per epoch; `None` runs full epochs.
    pub max_batches_per_epoch: Option<usize>,
    /// Fit per-feature standardization on the training windows.
    pub normalize_inputs: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 32,
            p_users: 8,
            k_windows: 4,
            seed: 0,
            margin: 0.3,
            patience: 10,
            checkpoint: None,
            max_batches_per_epoch: None,
            normalize_inputs: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch_size must be positive");
        }
        if self.p_users < 2 || self.k_windows < 2 {
            return bad("similarity batches need P ≥ 2 users and K ≥ 2 windows");
        }
        if self.patience == 0 {
            return bad("patience must be at least 1");
        }
        if !(self.margin >= 0.0 && self.margin.is_finite()) {
            return bad("margin must be finite and non-negative");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

/// One line of the training log. `loss` is absent when the split cannot
/// form a valid loss (a single-user validation set for triplets).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub epoch: usize,
    pub split: Split,
    pub loss: Option<f64>,
    pub accuracy: f64,
}

pub fn write_history(path: &Path, history: &[LossRecord]) -> Result<()> {
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    for r in history {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters of the best validation epoch.
    pub model: SequenceModel,
    pub history: Vec<LossRecord>,
    pub best_epoch: usize,
    pub best_val_accuracy: f64,
    /// Label order: user of class/label index `i`.
    pub class_users: Vec<UserId>,
    /// Set when the validation split was empty and the training windows
    /// were scored instead.
    pub validated_on_train: bool,
}

fn label_users(windows: &[FeatureWindow]) -> Vec<UserId> {
    let mut users: Vec<UserId> = windows.iter().map(|w| w.user().clone()).collect();
    users.sort();
    users.dedup();
    users
}

fn labels_for(windows: &[FeatureWindow], users: &[UserId]) -> Result<Vec<usize>> {
    windows
        .iter()
        .map(|w| {
            users.binary_search(w.user()).map_err(|_| Error::IndexOutOfRange {
                index: users.len(),
                classes: users.len(),
            })
        })
        .collect()
}

/// Per-feature mean and population standard deviation over all frames of
/// the given windows.
pub fn input_statistics(windows: &[FeatureWindow]) -> ([f32; N_FEATURES], [f32; N_FEATURES]) {
    let mut sum = [0.0f64; N_FEATURES];
    let mut sq = [0.0f64; N_FEATURES];
    let mut n = 0usize;
    for w in windows {
        for row in w.frames().chunks(N_FEATURES) {
            for (j, v) in row.iter().enumerate() {
                sum[j] += *v as f64;
                sq[j] += (*v as f64) * (*v as f64);
            }
            n += 1;
        }
    }
    let mut mean = [0.0f32; N_FEATURES];
    let mut std = [1.0f32; N_FEATURES];
    if n > 0 {
        for j in 0..N_FEATURES {
            let m = sum[j] / n as f64;
            mean[j] = m as f32;
            std[j] = (sq[j] / n as f64 - m * m).max(0.0).sqrt() as f32;
        }
    }
    (mean, std)
}

/// Shuffled fixed-size batches of window indices.
fn classifier_batches(n: usize, batch: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx.chunks(batch).map(<[usize]>::to_vec).collect()
}

/// P×K batches: each batch draws `p` distinct users and `k` windows from
/// each user's reshuffled queue. An epoch has ⌈n / (p·k)⌉ batches.
fn pk_batches(labels: &[usize], p: usize, k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut by_label: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, l) in labels.iter().enumerate() {
        by_label.entry(*l).or_default().push(i);
    }
    let pools: Vec<Vec<usize>> = by_label.into_values().collect();
    let p = p.min(pools.len());
    let mut queues: Vec<Vec<usize>> = vec![Vec::new(); pools.len()];
    let n_batches = labels.len().div_ceil(p * k);
    let mut out = Vec::with_capacity(n_batches);
    for _ in 0..n_batches {
        let mut chosen = index::sample(rng, pools.len(), p).into_vec();
        chosen.sort_unstable();
        let mut batch = Vec::with_capacity(p * k);
        for u in chosen {
            for _ in 0..k {
                if queues[u].is_empty() {
                    queues[u] = pools[u].clone();
                    queues[u].shuffle(rng);
                }
                batch.push(queues[u].pop().unwrap());
            }
        }
        out.push(batch);
    }
    out
}

fn frames_of<'a>(windows: &'a [FeatureWindow], idx: &[usize]) -> Vec<&'a [f32]> {
    idx.iter().map(|i| windows[*i].frames()).collect()
}

/// In-batch leave-one-out nearest-neighbour hits for unit embeddings.
fn batch_nn_hits(emb: &[f32], dim: usize, labels: &[usize]) -> usize {
    let n = labels.len();
    let row = |i: usize| &emb[i * dim..(i + 1) * dim];
    (0..n)
        .filter(|&i| {
            let mut best = (usize::MAX, f32::NEG_INFINITY);
            for j in (0..n).filter(|j| *j != i) {
                let s: f32 = row(i).iter().zip(row(j)).map(|(a, b)| a * b).sum();
                if s > best.1 {
                    best = (j, s);
                }
            }
            best.0 != usize::MAX && labels[best.0] == labels[i]
        })
        .count()
}

struct Scored {
    loss: Option<f64>,
    accuracy: f64,
}

fn evaluate_split(
    model: &SequenceModel,
    windows: &[FeatureWindow],
    labels: &[usize],
    cfg: &TrainConfig,
) -> Result<Scored> {
    let outputs = model.infer_windows(windows)?;
    match model.config.kind {
        ModelKind::Clm => {
            let mut hits = 0;
            for (o, y) in outputs.iter().zip(labels) {
                if classifier_identify(o)? == *y {
                    hits += 1;
                }
            }
            Ok(Scored {
                loss: Some(cross_entropy_value(&outputs, labels)),
                accuracy: hits as f64 / windows.len() as f64,
            })
        }
        ModelKind::Slm => {
            let mut store = ReferenceStore::new(model.config.output_size());
            for (w, e) in windows.iter().zip(&outputs) {
                let row = ReferenceRow {
                    user: w.user().clone(),
                    app: w.app().clone(),
                    session: w.session().to_string(),
                    window_start: w.start_frame(),
                };
                store.push(row, e)?;
            }
            let accuracy = if store.len() < 2 { 0.0 } else { leave_one_out_accuracy(&store)? };
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[cfg.seed, VAL_STREAM]));
            let mut losses = Vec::new();
            if label_count(labels) >= 2 {
                for batch in pk_batches(labels, cfg.p_users, cfg.k_windows, &mut rng)
                    .into_iter()
                    .take(VAL_LOSS_BATCHES)
                {
                    let e: Vec<Vec<f32>> = batch.iter().map(|i| outputs[*i].clone()).collect();
                    let l: Vec<usize> = batch.iter().map(|i| labels[*i]).collect();
                    losses.extend(triplet_loss_value(&e, &l, cfg.margin));
                }
            }
            let loss = (!losses.is_empty()).then(|| losses.iter().sum::<f64>() / losses.len() as f64);
            Ok(Scored { loss, accuracy })
        }
    }
}

fn label_count(labels: &[usize]) -> usize {
    let mut l = labels.to_vec();
    l.sort_unstable();
    l.dedup();
    l.len()
}

/// Trains `model` on `train` windows, scoring `val` after every epoch and
/// keeping the parameters of the best validation accuracy.
pub fn train(
    mut model: SequenceModel,
    train: &[FeatureWindow],
    val: &[FeatureWindow],
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::EmptyTrainingSet);
    }
    let users = label_users(train);
    let kind = model.config.kind;
    if kind == ModelKind::Clm && model.config.n_classes != Some(users.len()) {
        return Err(Error::InvalidConfig(format!(
            "classifier has {:?} classes but the training set holds {} users",
            model.config.n_classes,
            users.len()
        )));
    }
    if kind == ModelKind::Slm && users.len() < 2 {
        return Err(Error::DegenerateBatch("similarity training needs at least two users".into()));
    }
    let labels = labels_for(train, &users)?;
    let validated_on_train = val.is_empty();
    let (val, val_labels) = if validated_on_train {
        (train, labels.clone())
    } else {
        (val, labels_for(val, &users).or_else(|e| {
            // similarity validation may hold unseen users; label them apart
            if kind == ModelKind::Slm {
                let vu = label_users(val);
                labels_for(val, &vu)
            } else {
                Err(e)
            }
        })?)
    };

    if cfg.normalize_inputs {
        let (mean, std) = input_statistics(train);
        model.set_input_normalization(&mean, &std)?;
    }
    let lr = model.config.learning_rate;
    let mut history = Vec::new();
    let mut best = (0usize, f64::NEG_INFINITY, model.params.clone());
    let mut stale = 0;
    let mut step = 0u64;
    for epoch in 1..=cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[cfg.seed, epoch as u64]));
        let mut batches = match kind {
            ModelKind::Clm => classifier_batches(train.len(), cfg.batch_size, &mut rng),
            ModelKind::Slm => pk_batches(&labels, cfg.p_users, cfg.k_windows, &mut rng),
        };
        if let Some(cap) = cfg.max_batches_per_epoch {
            batches.truncate(cap.max(1));
        }
        let (mut loss_sum, mut hits, mut seen) = (0.0, 0usize, 0usize);
        for batch in &batches {
            let frames = frames_of(train, batch);
            let y: Vec<usize> = batch.iter().map(|i| labels[*i]).collect();
            let mut tape = Tape::new();
            let (out, vars) = model.trace(&mut tape, &frames, Mode::Train { seed: cfg.seed, step })?;
            let loss = match kind {
                ModelKind::Clm => classification_loss(&mut tape, out, &y)?,
                ModelKind::Slm => similarity_loss(&mut tape, out, &y, cfg.margin)?,
            };
            let grads = tape.backward(loss)?.for_params(&tape, &vars);
            loss_sum += tape.value(loss).item()? as f64;
            let o = tape.value(out);
            let dim = o.dims()?.1;
            hits += match kind {
                ModelKind::Clm => o
                    .data()
                    .chunks(dim)
                    .zip(&y)
                    .filter(|(l, t)| classifier_identify(l).ok() == Some(**t))
                    .count(),
                ModelKind::Slm => batch_nn_hits(o.data(), dim, &y),
            };
            seen += batch.len();
            model.params.adam_step(&grads, lr)?;
            step += 1;
        }
        history.push(LossRecord {
            epoch,
            split: Split::Train,
            loss: Some(loss_sum / batches.len() as f64),
            accuracy: hits as f64 / seen as f64,
        });
        let scored = evaluate_split(&model, val, &val_labels, cfg)?;
        history.push(LossRecord {
            epoch,
            split: Split::Val,
            loss: scored.loss,
            accuracy: scored.accuracy,
        });
        if scored.accuracy > best.1 {
            best = (epoch, scored.accuracy, model.params.clone());
            stale = 0;
            if let Some(path) = &cfg.checkpoint {
                model.save(path, checkpoint_extra(&users, epoch, scored.accuracy))?;
            }
        } else {
            stale += 1;
            if stale >= cfg.patience {
                break;
            }
        }
    }
    model.params = best.2;
    Ok(TrainOutcome {
        model,
        history,
        best_epoch: best.0,
        best_val_accuracy: best.1,
        class_users: users,
        validated_on_train,
    })
}

/// Metadata stored next to trained weights.
pub fn checkpoint_extra(users: &[UserId], epoch: usize, val_accuracy: f64) -> serde_json::Value {
    serde_json::json!({
        "class_users": users,
        "best_epoch": epoch,
        "val_accuracy": val_accuracy,
    })
}

/// Reads the label order back from checkpoint metadata.
pub fn class_users_from(extra: &serde_json::Value) -> Result<Vec<UserId>> {
    serde_json::from_value(extra.get("class_users").cloned().unwrap_or_default())
        .map_err(|e| Error::Checkpoint(format!("class_users: {e}")))
}
