//! Dataset splits, the reference-application × query-application
//! experiment grid, overall and classifier metrics, and CSV/JSON exports.

mod heatmap;
mod split;

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::identification::{
    classifier_identify, classifier_sequence_identify, csv_err, nearest_reference,
    sequence_identify, span_window_starts, Query, RefFilter, ReferenceRow, ReferenceStore,
    WindowKey,
};
use crate::kinematics::{encode_recording, make_windows, EncodingConfig, FeatureStream, FeatureWindow, TARGET_FPS};
use crate::model::{ModelKind, SequenceModel};
use crate::motion_io::{AppLabel, DatasetManifest, UserId};

pub use heatmap::{export_heatmap, read_heatmap_raw};
pub use split::{
    split_users, temporal_boundaries, user_split_sizes, SplitManifests, SplitSpec, ROSTER,
    TEMPORAL_CUTS,
};

/// Reads and encodes every manifest entry (honouring frame ranges), in
/// manifest order.
pub fn load_streams(manifest: &DatasetManifest) -> Result<Vec<Arc<FeatureStream>>> {
    manifest
        .entries
        .par_iter()
        .map(|e| encode_recording(&manifest.read_entry(e)?, e.frame_range))
        .collect()
}

pub fn windows_of(streams: &[Arc<FeatureStream>], enc: &EncodingConfig) -> Result<Vec<FeatureWindow>> {
    let mut out = Vec::new();
    for s in streams {
        out.extend(make_windows(s, enc)?);
    }
    Ok(out)
}

/// Embedded test windows; `store` row `i` belongs to `windows[i]`.
#[derive(Debug, Clone)]
pub struct EmbeddedSet {
    pub windows: Vec<FeatureWindow>,
    pub store: ReferenceStore,
}

impl EmbeddedSet {
    pub fn users(&self) -> Vec<UserId> {
        self.store.users()
    }

    pub fn apps(&self) -> Vec<AppLabel> {
        self.store.apps()
    }
}

/// Embeds every window whose application is in `apps`.
pub fn build_reference_store(
    model: &SequenceModel,
    windows: &[FeatureWindow],
    apps: &[AppLabel],
) -> Result<EmbeddedSet> {
    if model.config.kind != ModelKind::Slm {
        return Err(Error::InvalidConfig("reference stores need a similarity model".into()));
    }
    let selected: Vec<FeatureWindow> =
        windows.iter().filter(|w| apps.contains(w.app())).cloned().collect();
    if selected.is_empty() {
        return Err(Error::NoWindows(format!("no windows for applications {apps:?}")));
    }
    let embeddings = model.infer_windows(&selected)?;
    let mut store = ReferenceStore::new(model.config.output_size());
    for (w, e) in selected.iter().zip(&embeddings) {
        store.push(row_of(w), e)?;
    }
    Ok(EmbeddedSet { windows: selected, store })
}

pub fn row_of(w: &FeatureWindow) -> ReferenceRow {
    ReferenceRow {
        user: w.user().clone(),
        app: w.app().clone(),
        session: w.session().to_string(),
        window_start: w.start_frame(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "metric", rename_all = "snake_case")]
pub enum CellMetric {
    NnAccuracy,
    SequenceAccuracy { span_seconds: f64 },
    Top3SequenceAccuracy { span_seconds: f64 },
}

impl CellMetric {
    pub fn tag(&self) -> &'static str {
        match self {
            CellMetric::NnAccuracy => "nn_accuracy",
            CellMetric::SequenceAccuracy { .. } => "sequence_accuracy",
            CellMetric::Top3SequenceAccuracy { .. } => "top3_sequence_accuracy",
        }
    }
}

/// Square grid indexed (reference app, query app). Cells are means of
/// per-user accuracies with the population standard deviation across users.
/// Diagonal cells exclude each query's own window from the references.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossAppMatrix {
    pub metric: CellMetric,
    pub apps: Vec<AppLabel>,
    pub mean: Vec<Vec<f64>>,
    pub std: Vec<Vec<f64>>,
}

impl CrossAppMatrix {
    pub fn diagonal_mean(&self) -> f64 {
        let n = self.apps.len();
        (0..n).map(|i| self.mean[i][i]).sum::<f64>() / n as f64
    }

    pub fn off_diagonal_mean(&self) -> f64 {
        let n = self.apps.len();
        let mut s = 0.0;
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    s += self.mean[i][j];
                }
            }
        }
        s / (n * n - n) as f64
    }
}

pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let m = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n;
    (m, var.sqrt())
}

fn span_frames(span_seconds: f64) -> usize {
    (span_seconds * TARGET_FPS).round() as usize
}

/// Windows of one stream grouped into disjoint spans, as indices into
/// `idx` (which lists the set's rows belonging to that stream).
fn spans_of(set: &EmbeddedSet, idx: &[usize], span_seconds: f64) -> Result<Vec<Vec<usize>>> {
    let w0 = &set.windows[idx[0]];
    let step = if idx.len() > 1 {
        set.windows[idx[1]].start - w0.start
    } else {
        w0.size
    };
    let starts = span_window_starts(w0.stream.len(), span_frames(span_seconds), w0.size, step.max(1))?;
    let by_start: BTreeMap<usize, usize> = idx.iter().map(|i| (set.windows[*i].start, *i)).collect();
    Ok(starts
        .into_iter()
        .map(|s| s.iter().filter_map(|st| by_start.get(st).copied()).collect())
        .collect())
}

/// Rows of `set` grouped by (user, stream), in a stable order.
fn streams_by_user(set: &EmbeddedSet, app: &AppLabel) -> BTreeMap<UserId, Vec<Vec<usize>>> {
    let mut groups: BTreeMap<(UserId, String, usize), Vec<usize>> = BTreeMap::new();
    for (i, w) in set.windows.iter().enumerate() {
        if w.app() == app {
            groups
                .entry((w.user().clone(), w.session().to_string(), w.stream.frame_offset))
                .or_default()
                .push(i);
        }
    }
    let mut out: BTreeMap<UserId, Vec<Vec<usize>>> = BTreeMap::new();
    for ((user, _, _), mut rows) in groups {
        rows.sort_by_key(|i| set.windows[*i].start);
        out.entry(user).or_default().push(rows);
    }
    out
}

/// Per-user accuracies of one (reference app, query app) cell.
fn cell_user_accuracies(
    set: &EmbeddedSet,
    ref_app: &AppLabel,
    query_app: &AppLabel,
    metric: CellMetric,
) -> Result<Vec<f64>> {
    let apps = [ref_app.clone()];
    let filter = RefFilter::apps(&apps);
    let diagonal = ref_app == query_app;
    let keys: Vec<WindowKey> = set.store.rows().iter().map(ReferenceRow::key).collect();
    let query = |i: usize| {
        if diagonal {
            Query::excluding(set.store.embedding(i), &keys[i])
        } else {
            Query::new(set.store.embedding(i))
        }
    };
    let mut out = Vec::new();
    for (user, streams) in streams_by_user(set, query_app) {
        let (mut hits, mut total) = (0usize, 0usize);
        for rows in &streams {
            match metric {
                CellMetric::NnAccuracy => {
                    for i in rows {
                        total += 1;
                        if nearest_reference(&set.store, query(*i), &filter)?.0 == user {
                            hits += 1;
                        }
                    }
                }
                CellMetric::SequenceAccuracy { span_seconds }
                | CellMetric::Top3SequenceAccuracy { span_seconds } => {
                    let k = if matches!(metric, CellMetric::SequenceAccuracy { .. }) { 1 } else { 3 };
                    for span in spans_of(set, rows, span_seconds)? {
                        let qs: Vec<Query> = span.iter().map(|i| query(*i)).collect();
                        let d = sequence_identify(&set.store, &qs, span_seconds, &filter)?;
                        total += 1;
                        if d.ranking.rank_of(&user).is_some_and(|r| r < k) {
                            hits += 1;
                        }
                    }
                }
            }
        }
        if total > 0 {
            out.push(hits as f64 / total as f64);
        }
    }
    Ok(out)
}

/// Fills the application grid. Every application in `apps` must occur in
/// the embedded set.
pub fn eval_cross_app(set: &EmbeddedSet, apps: &[AppLabel], metric: CellMetric) -> Result<CrossAppMatrix> {
    let present = set.apps();
    if let Some(missing) = apps.iter().find(|a| !present.contains(a)) {
        return Err(Error::MissingApp(missing.to_string()));
    }
    let n = apps.len();
    let cells: Vec<Result<(f64, f64)>> = (0..n * n)
        .into_par_iter()
        .map(|c| {
            let accs = cell_user_accuracies(set, &apps[c / n], &apps[c % n], metric)?;
            Ok(mean_std(&accs))
        })
        .collect();
    let mut mean = vec![vec![0.0; n]; n];
    let mut std = vec![vec![0.0; n]; n];
    for (c, r) in cells.into_iter().enumerate() {
        let (m, s) = r?;
        mean[c / n][c % n] = m;
        std[c / n][c % n] = s;
    }
    Ok(CrossAppMatrix { metric, apps: apps.to_vec(), mean, std })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupAccuracy {
    pub name: String,
    pub accuracy: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceSummary {
    pub span_seconds: f64,
    pub accuracy: Option<f64>,
    pub top3_accuracy: Option<f64>,
    pub n_spans: usize,
    /// Streams shorter than one span.
    pub skipped_streams: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub model: ModelKind,
    pub n_users: usize,
    pub n_queries: usize,
    pub overall_accuracy: f64,
    pub per_app: Vec<GroupAccuracy>,
    pub per_user: Vec<GroupAccuracy>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sequence: Option<SequenceSummary>,
    pub chance_level: f64,
}

impl MetricsReport {
    pub fn save_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    /// `user,accuracy,queries` rows for box plots.
    pub fn write_per_user_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
        w.write_record(["user", "accuracy", "queries"]).map_err(|e| csv_err(path, e))?;
        for g in &self.per_user {
            w.write_record([g.name.clone(), format!("{:.6}", g.accuracy), g.count.to_string()])
                .map_err(|e| csv_err(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// Accumulates hit counts per application and per user.
#[derive(Default)]
struct Tally {
    apps: BTreeMap<AppLabel, (usize, usize)>,
    users: BTreeMap<UserId, (usize, usize)>,
}

impl Tally {
    fn add(&mut self, w: &FeatureWindow, hit: bool) {
        for e in [
            self.apps.entry(w.app().clone()).or_default(),
            self.users.entry(w.user().clone()).or_default(),
        ] {
            e.0 += hit as usize;
            e.1 += 1;
        }
    }

    fn report(self, model: ModelKind, n_users: usize, sequence: Option<SequenceSummary>) -> MetricsReport {
        let group = |name: String, (h, n): (usize, usize)| GroupAccuracy {
            name,
            accuracy: h as f64 / n as f64,
            count: n,
        };
        let (hits, n) = self.apps.values().fold((0, 0), |a, b| (a.0 + b.0, a.1 + b.1));
        MetricsReport {
            model,
            n_users,
            n_queries: n,
            overall_accuracy: if n > 0 { hits as f64 / n as f64 } else { 0.0 },
            per_app: self.apps.into_iter().map(|(a, v)| group(a.to_string(), v)).collect(),
            per_user: self.users.into_iter().map(|(u, v)| group(u.to_string(), v)).collect(),
            sequence,
            chance_level: 1.0 / n_users as f64,
        }
    }
}

/// Nearest-neighbour accuracy against references from every application
/// (each query's own window excluded), overall, per application and per
/// user. With `span_seconds`, adds same-application sequence accuracies.
pub fn eval_overall(set: &EmbeddedSet, span_seconds: Option<f64>) -> Result<MetricsReport> {
    let users = set.users();
    let hits: Vec<Result<bool>> = (0..set.windows.len())
        .into_par_iter()
        .map(|i| {
            let key = set.store.rows()[i].key();
            let q = Query::excluding(set.store.embedding(i), &key);
            Ok(nearest_reference(&set.store, q, &RefFilter::all())?.0 == *set.windows[i].user())
        })
        .collect();
    let mut tally = Tally::default();
    for (w, h) in set.windows.iter().zip(hits) {
        tally.add(w, h?);
    }
    let sequence = match span_seconds {
        None => None,
        Some(span) => Some(sequence_summary(set, span)?),
    };
    Ok(tally.report(ModelKind::Slm, users.len(), sequence))
}

/// Same-application sequence and top-3 sequence accuracy pooled over all
/// spans; streams shorter than a span are counted and skipped.
fn sequence_summary(set: &EmbeddedSet, span_seconds: f64) -> Result<SequenceSummary> {
    let (mut hits, mut hits3, mut n, mut skipped) = (0, 0, 0, 0);
    let keys: Vec<WindowKey> = set.store.rows().iter().map(ReferenceRow::key).collect();
    for app in set.apps() {
        let apps = [app.clone()];
        let filter = RefFilter::apps(&apps);
        for (user, streams) in streams_by_user(set, &app) {
            for rows in streams {
                let spans = match spans_of(set, &rows, span_seconds) {
                    Ok(s) => s,
                    Err(Error::InsufficientSpan(_)) => {
                        skipped += 1;
                        continue;
                    }
                    Err(e) => return Err(e),
                };
                for span in spans {
                    let qs: Vec<Query> = span
                        .iter()
                        .map(|i| Query::excluding(set.store.embedding(*i), &keys[*i]))
                        .collect();
                    let d = sequence_identify(&set.store, &qs, span_seconds, &filter)?;
                    let rank = d.ranking.rank_of(&user);
                    n += 1;
                    hits += (rank == Some(0)) as usize;
                    hits3 += rank.is_some_and(|r| r < 3) as usize;
                }
            }
        }
    }
    let frac = |h: usize| (n > 0).then(|| h as f64 / n as f64);
    Ok(SequenceSummary {
        span_seconds,
        accuracy: frac(hits),
        top3_accuracy: frac(hits3),
        n_spans: n,
        skipped_streams: skipped,
    })
}

/// Per-window argmax accuracy of a classifier, plus plurality accuracy over
/// contiguous spans of `span_seconds` within each test stream.
pub fn eval_classifier(
    model: &SequenceModel,
    class_users: &[UserId],
    windows: &[FeatureWindow],
    span_seconds: f64,
) -> Result<MetricsReport> {
    if model.config.kind != ModelKind::Clm || model.config.output_size() != class_users.len() {
        return Err(Error::ShapeMismatch(format!(
            "classifier with {} outputs for {} users",
            model.config.output_size(),
            class_users.len()
        )));
    }
    if windows.is_empty() {
        return Err(Error::NoWindows("classifier test set is empty".into()));
    }
    let logits = model.infer_windows(windows)?;
    let mut tally = Tally::default();
    let mut streams: BTreeMap<(UserId, AppLabel, String, usize), Vec<usize>> = BTreeMap::new();
    for (i, (w, l)) in windows.iter().zip(&logits).enumerate() {
        tally.add(w, class_users[classifier_identify(l)?] == *w.user());
        streams
            .entry((w.user().clone(), w.app().clone(), w.session().to_string(), w.stream.frame_offset))
            .or_default()
            .push(i);
    }
    let (mut hits, mut n, mut skipped) = (0, 0, 0);
    for ((user, ..), mut rows) in streams {
        rows.sort_by_key(|i| windows[*i].start);
        let w0 = &windows[rows[0]];
        let step = model.config.frame_step;
        let spans = match span_window_starts(w0.stream.len(), span_frames(span_seconds), w0.size, step) {
            Ok(s) => s,
            Err(Error::InsufficientSpan(_)) => {
                skipped += 1;
                continue;
            }
            Err(e) => return Err(e),
        };
        let by_start: BTreeMap<usize, usize> = rows.iter().map(|i| (windows[*i].start, *i)).collect();
        for span in spans {
            let l: Vec<Vec<f32>> = span
                .iter()
                .filter_map(|s| by_start.get(s))
                .map(|i| logits[*i].clone())
                .collect();
            if l.is_empty() {
                continue;
            }
            n += 1;
            hits += (classifier_sequence_identify(&l, class_users)? == user) as usize;
        }
    }
    let sequence = SequenceSummary {
        span_seconds,
        accuracy: (n > 0).then(|| hits as f64 / n as f64),
        top3_accuracy: None,
        n_spans: n,
        skipped_streams: skipped,
    };
    let n_users = tally.users.len();
    Ok(tally.report(ModelKind::Clm, n_users, Some(sequence)))
}
