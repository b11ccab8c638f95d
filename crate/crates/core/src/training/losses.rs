use crate::autodiff::{Real, Tape, Var};
use crate::error::{Error, Result};

/// Mean softmax cross-entropy of `batch × classes` logits.
pub fn classification_loss<T: Real>(tape: &mut Tape<T>, logits: Var, labels: &[usize]) -> Result<Var> {
    let (b, c) = tape.value(logits).dims()?;
    if labels.len() != b {
        return Err(Error::ShapeMismatch(format!("{} labels for {b} rows", labels.len())));
    }
    if let Some(bad) = labels.iter().find(|l| **l >= c) {
        return Err(Error::IndexOutOfRange { index: *bad, classes: c });
    }
    let lp = tape.log_softmax(logits, 1)?;
    let idx: Vec<usize> = labels.iter().enumerate().map(|(i, l)| i * c + l).collect();
    let picked = tape.gather(lp, &idx)?;
    let m = tape.mean(picked)?;
    tape.scale(m, -T::one())
}

/// Every (anchor, positive, negative) index triple of a labelled batch.
pub fn valid_triplets(labels: &[usize]) -> Vec<(usize, usize, usize)> {
    let n = labels.len();
    let mut out = Vec::new();
    for a in 0..n {
        for p in 0..n {
            if p == a || labels[p] != labels[a] {
                continue;
            }
            for (ng, l) in labels.iter().enumerate() {
                if *l != labels[a] {
                    out.push((a, p, ng));
                }
            }
        }
    }
    out
}

/// Batch-all triplet loss on cosine distance `d = 1 − cos` over unit-norm
/// embeddings: mean over all valid triplets of `max(0, d(a,p) − d(a,n) + margin)`.
pub fn similarity_loss<T: Real>(
    tape: &mut Tape<T>,
    embeddings: Var,
    labels: &[usize],
    margin: f64,
) -> Result<Var> {
    let (b, _) = tape.value(embeddings).dims()?;
    if labels.len() != b {
        return Err(Error::ShapeMismatch(format!("{} labels for {b} rows", labels.len())));
    }
    let triplets = valid_triplets(labels);
    if triplets.is_empty() {
        return Err(Error::DegenerateBatch(
            "need two labels, at least one with two members".into(),
        ));
    }
    let sims = tape.matmul_nt(embeddings, embeddings)?;
    let ap: Vec<usize> = triplets.iter().map(|(a, p, _)| a * b + p).collect();
    let an: Vec<usize> = triplets.iter().map(|(a, _, n)| a * b + n).collect();
    let s_ap = tape.gather(sims, &ap)?;
    let s_an = tape.gather(sims, &an)?;
    // d(a,p) − d(a,n) = s(a,n) − s(a,p)
    let diff = tape.sub(s_an, s_ap)?;
    let shifted = tape.add_scalar(diff, T::lit(margin))?;
    let hinge = tape.relu(shifted)?;
    tape.mean(hinge)
}

/// Value-only batch-all triplet loss on rows of unit embeddings.
pub fn triplet_loss_value(embeddings: &[Vec<f32>], labels: &[usize], margin: f64) -> Option<f64> {
    let triplets = valid_triplets(labels);
    if triplets.is_empty() {
        return None;
    }
    let dot = |i: usize, j: usize| -> f64 {
        embeddings[i].iter().zip(&embeddings[j]).map(|(a, b)| *a as f64 * *b as f64).sum()
    };
    let total: f64 = triplets
        .iter()
        .map(|(a, p, n)| (dot(*a, *n) - dot(*a, *p) + margin).max(0.0))
        .sum();
    Some(total / triplets.len() as f64)
}

/// Value-only mean cross-entropy.
pub fn cross_entropy_value(logits: &[Vec<f32>], labels: &[usize]) -> f64 {
    let total: f64 = logits
        .iter()
        .zip(labels)
        .map(|(l, y)| {
            let m = l.iter().cloned().fold(f32::NEG_INFINITY, f32::max) as f64;
            let lse = m + l.iter().map(|v| (*v as f64 - m).exp()).sum::<f64>().ln();
            lse - l[*y] as f64
        })
        .sum();
    total / logits.len() as f64
}
