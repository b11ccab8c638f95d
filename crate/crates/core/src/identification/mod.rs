//! Identity decisions from embeddings or logits: exact nearest-reference
//! search, k-NN voting with a total tie-break order, span-level plurality
//! decisions, and top-k candidate lists.

mod store;

use std::collections::BTreeMap;
use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::kinematics::FeatureWindow;
use crate::motion_io::{AppLabel, UserId};

pub use store::{ReferenceRow, ReferenceStore, STORE_MAGIC};

/// Identifies one window of one recording; used to keep a query from
/// matching its own reference row.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub struct WindowKey {
    pub user: UserId,
    pub app: AppLabel,
    pub session: String,
    pub start: usize,
}

impl WindowKey {
    pub fn of(w: &FeatureWindow) -> Self {
        Self {
            user: w.user().clone(),
            app: w.app().clone(),
            session: w.session().to_string(),
            start: w.start_frame(),
        }
    }
}

/// Which reference rows a query may match.
#[derive(Debug, Clone, Default)]
pub struct RefFilter<'a> {
    /// Restrict to these applications; `None` admits all.
    pub apps: Option<&'a [AppLabel]>,
}

impl<'a> RefFilter<'a> {
    pub fn all() -> Self {
        Self { apps: None }
    }

    pub fn apps(apps: &'a [AppLabel]) -> Self {
        Self { apps: Some(apps) }
    }

    fn admits(&self, row: &ReferenceRow) -> bool {
        self.apps.is_none_or(|a| a.contains(&row.app))
    }
}

/// One embedding to identify, optionally tagged with its own window so the
/// identical reference row is skipped.
#[derive(Debug, Clone, Copy)]
pub struct Query<'a> {
    pub embedding: &'a [f32],
    pub exclude: Option<&'a WindowKey>,
}

impl<'a> Query<'a> {
    pub fn new(embedding: &'a [f32]) -> Self {
        Self { embedding, exclude: None }
    }

    pub fn excluding(embedding: &'a [f32], key: &'a WindowKey) -> Self {
        Self { embedding, exclude: Some(key) }
    }
}

/// Reference rows sorted by cosine similarity to the query (descending,
/// ties by lower row index), truncated to `k`.
pub fn k_nearest(
    store: &ReferenceStore,
    query: Query,
    k: usize,
    filter: &RefFilter,
) -> Result<Vec<(usize, f64)>> {
    if k == 0 {
        return Err(Error::InvalidConfig("k must be at least 1".into()));
    }
    if query.embedding.len() != store.dim() {
        return Err(Error::ShapeMismatch(format!(
            "query of length {} against {}-dimensional references",
            query.embedding.len(),
            store.dim()
        )));
    }
    let qn = query
        .embedding
        .iter()
        .map(|v| (*v as f64) * (*v as f64))
        .sum::<f64>()
        .sqrt();
    let inv = if qn > 0.0 { 1.0 / qn } else { 0.0 };
    let mut best: Vec<(usize, f64)> = Vec::with_capacity(k + 1);
    for (i, row) in store.rows().iter().enumerate() {
        if !filter.admits(row) || query.exclude.is_some_and(|key| row.key() == *key) {
            continue;
        }
        let sim = store.dot(i, query.embedding) * inv;
        // insertion into a short sorted list; equal similarity keeps the
        // earlier row first
        if best.len() == k && sim <= best[k - 1].1 {
            continue;
        }
        let pos = best.partition_point(|(_, s)| *s >= sim);
        best.insert(pos, (i, sim));
        best.truncate(k);
    }
    if best.is_empty() {
        return Err(Error::EmptyStore);
    }
    Ok(best)
}

/// Single most similar reference: (user, cosine similarity).
pub fn nearest_reference(
    store: &ReferenceStore,
    query: Query,
    filter: &RefFilter,
) -> Result<(UserId, f64)> {
    let (row, sim) = k_nearest(store, query, 1, filter)?[0];
    Ok((store.rows()[row].user.clone(), sim))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Candidate {
    pub user: UserId,
    pub votes: usize,
    pub cum_similarity: f64,
}

/// Candidates ordered by votes (desc), cumulative similarity of the votes
/// (desc), then user id (asc).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RankedCandidates {
    pub candidates: Vec<Candidate>,
    pub n_queries: usize,
}

impl RankedCandidates {
    pub fn from_unsorted(mut candidates: Vec<Candidate>, n_queries: usize) -> Self {
        candidates.sort_by(|a, b| {
            b.votes
                .cmp(&a.votes)
                .then(b.cum_similarity.total_cmp(&a.cum_similarity))
                .then_with(|| a.user.cmp(&b.user))
        });
        Self { candidates, n_queries }
    }

    pub fn winner(&self) -> Option<&UserId> {
        self.candidates.first().map(|c| &c.user)
    }

    /// Rank (0-based) of `user`, if listed.
    pub fn rank_of(&self, user: &UserId) -> Option<usize> {
        self.candidates.iter().position(|c| c.user == *user)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
        w.write_record(["rank", "user", "votes", "cum_similarity"])
            .map_err(|e| csv_err(path, e))?;
        for (i, c) in self.candidates.iter().enumerate() {
            w.write_record([
                (i + 1).to_string(),
                c.user.to_string(),
                c.votes.to_string(),
                format!("{:.6}", c.cum_similarity),
            ])
            .map_err(|e| csv_err(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

pub(crate) fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::io(path, std::io::Error::other(e))
}

/// First `min(k, n)` users of the ranking.
pub fn topk_users(ranked: &RankedCandidates, k: usize) -> Vec<UserId> {
    ranked.candidates.iter().take(k).map(|c| c.user.clone()).collect()
}

/// Each query's `k` nearest references vote for their users; votes are
/// pooled across queries. Every user admitted by the filter is listed,
/// including those with no votes.
pub fn vote_identify(
    store: &ReferenceStore,
    queries: &[Query],
    k: usize,
    filter: &RefFilter,
) -> Result<RankedCandidates> {
    let mut tally: BTreeMap<&UserId, (usize, f64)> = store
        .rows()
        .iter()
        .filter(|r| filter.admits(r))
        .map(|r| (&r.user, (0, 0.0)))
        .collect();
    if tally.is_empty() {
        return Err(Error::EmptyStore);
    }
    for q in queries {
        for (row, sim) in k_nearest(store, *q, k, filter)? {
            let t = tally.get_mut(&store.rows()[row].user).unwrap();
            t.0 += 1;
            t.1 += sim;
        }
    }
    let candidates = tally
        .into_iter()
        .map(|(user, (votes, cum_similarity))| Candidate {
            user: user.clone(),
            votes,
            cum_similarity,
        })
        .collect();
    Ok(RankedCandidates::from_unsorted(candidates, queries.len()))
}

#[derive(Debug, Clone, Serialize)]
pub struct SequenceDecision {
    pub window_decisions: Vec<UserId>,
    pub final_user: UserId,
    pub span_seconds: f64,
    pub ranking: RankedCandidates,
}

/// Plurality over the per-window nearest references of one span (k = 1 per
/// window, ties per [`RankedCandidates`]).
pub fn sequence_identify(
    store: &ReferenceStore,
    queries: &[Query],
    span_seconds: f64,
    filter: &RefFilter,
) -> Result<SequenceDecision> {
    if queries.is_empty() {
        return Err(Error::InsufficientSpan("no windows in span".into()));
    }
    let window_decisions = queries
        .iter()
        .map(|q| nearest_reference(store, *q, filter).map(|(u, _)| u))
        .collect::<Result<Vec<_>>>()?;
    let ranking = vote_identify(store, queries, 1, filter)?;
    Ok(SequenceDecision {
        window_decisions,
        final_user: ranking.winner().unwrap().clone(),
        span_seconds,
        ranking,
    })
}

/// Start offsets (within a stream of `len` frames) of the windows lying
/// fully inside each disjoint span of `span_frames` frames. Spans start at
/// 0, F, 2F, …; a trailing partial span is dropped.
pub fn span_window_starts(
    len: usize,
    span_frames: usize,
    window: usize,
    step: usize,
) -> Result<Vec<Vec<usize>>> {
    if span_frames < window || window == 0 || step == 0 {
        return Err(Error::InsufficientSpan(format!(
            "span of {span_frames} frames cannot hold a {window}-frame window"
        )));
    }
    if len < span_frames {
        return Err(Error::InsufficientSpan(format!(
            "{len} frames available, span needs {span_frames}"
        )));
    }
    Ok((0..len / span_frames)
        .map(|k| {
            let (lo, hi) = (k * span_frames, (k + 1) * span_frames);
            // windows are laid out on the stream's own stride grid
            (lo.div_ceil(step) * step..=hi - window)
                .step_by(step)
                .collect()
        })
        .collect())
}

/// Index of the largest logit; ties go to the lower index.
pub fn classifier_identify(logits: &[f32]) -> Result<usize> {
    if logits.is_empty() {
        return Err(Error::ShapeMismatch("empty logits".into()));
    }
    let mut best = 0;
    for (i, v) in logits.iter().enumerate() {
        if *v > logits[best] {
            best = i;
        }
    }
    Ok(best)
}

fn softmax(logits: &[f32]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f32::NEG_INFINITY, f32::max) as f64;
    let e: Vec<f64> = logits.iter().map(|v| (*v as f64 - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

/// Plurality of per-window argmax predictions over a span. Ties are broken
/// by summed softmax probability over the span, then by user id.
pub fn classifier_sequence_identify(logits: &[Vec<f32>], classes: &[UserId]) -> Result<UserId> {
    if logits.is_empty() {
        return Err(Error::InsufficientSpan("no windows in span".into()));
    }
    let mut votes = vec![0usize; classes.len()];
    let mut mass = vec![0.0f64; classes.len()];
    for l in logits {
        if l.len() != classes.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} logits for {} classes",
                l.len(),
                classes.len()
            )));
        }
        votes[classifier_identify(l)?] += 1;
        for (m, p) in mass.iter_mut().zip(softmax(l)) {
            *m += p;
        }
    }
    let best = (0..classes.len())
        .min_by(|a, b| {
            votes[*b]
                .cmp(&votes[*a])
                .then(mass[*b].total_cmp(&mass[*a]))
                .then_with(|| classes[*a].cmp(&classes[*b]))
        })
        .unwrap();
    Ok(classes[best].clone())
}

/// Leave-one-out nearest-neighbour accuracy of labelled embeddings: each
/// row is matched against all others.
pub fn leave_one_out_accuracy(store: &ReferenceStore) -> Result<f64> {
    let n = store.len();
    if n < 2 {
        return Err(Error::EmptyStore);
    }
    let mut hits = 0;
    for i in 0..n {
        let key = store.rows()[i].key();
        let q = Query::excluding(store.embedding(i), &key);
        if nearest_reference(store, q, &RefFilter::all())?.0 == store.rows()[i].user {
            hits += 1;
        }
    }
    Ok(hits as f64 / n as f64)
}
