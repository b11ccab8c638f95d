use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kinematics::resampled_len;
use crate::motion_io::{DatasetManifest, ManifestEntry, UserId};

/// Reference roster proportions: 23 train, 9 validation, 17 test of 49.
pub const ROSTER: (usize, usize, usize) = (23, 9, 49);
/// Temporal cut points as percentages of a recording's frames.
pub const TEMPORAL_CUTS: (usize, usize) = (45, 65);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum SplitSpec {
    /// Users sorted by id; first ⌊n·23/49⌋ train, next ⌊n·9/49⌋
    /// validation, the rest test.
    UserDisjoint,
    /// Every recording cut chronologically at 45 % / 65 % of its frames,
    /// rounded down to the window stride.
    Temporal { window_size: usize, frame_step: usize },
}

#[derive(Debug, Clone)]
pub struct SplitManifests {
    pub train: DatasetManifest,
    pub val: DatasetManifest,
    pub test: DatasetManifest,
}

/// Train/validation/test user counts for a roster of `n`.
pub fn user_split_sizes(n: usize) -> (usize, usize, usize) {
    let train = n * ROSTER.0 / ROSTER.2;
    let val = n * ROSTER.1 / ROSTER.2;
    (train, val, n - train - val)
}

/// Segment boundaries `[b1, b2]` of an `n`-frame recording.
pub fn temporal_boundaries(n: usize, frame_step: usize) -> [usize; 2] {
    let cut = |pct: usize| (n * pct / 100) / frame_step * frame_step;
    [cut(TEMPORAL_CUTS.0), cut(TEMPORAL_CUTS.1)]
}

fn subset(m: &DatasetManifest, entries: Vec<ManifestEntry>) -> DatasetManifest {
    DatasetManifest::new(entries, m.base_dir.clone())
}

pub fn split_users(manifest: &DatasetManifest, spec: SplitSpec) -> Result<SplitManifests> {
    match spec {
        SplitSpec::UserDisjoint => {
            let users = manifest.users();
            let (n_train, n_val, _) = user_split_sizes(users.len());
            if users.len() < 3 || n_train == 0 {
                return Err(Error::RosterTooSmall(users.len()));
            }
            let train: BTreeSet<&UserId> = users[..n_train].iter().collect();
            let val: BTreeSet<&UserId> = users[n_train..n_train + n_val].iter().collect();
            let pick = |f: &dyn Fn(&UserId) -> bool| {
                manifest.entries.iter().filter(|e| f(&e.user)).cloned().collect::<Vec<_>>()
            };
            Ok(SplitManifests {
                train: subset(manifest, pick(&|u| train.contains(u))),
                val: subset(manifest, pick(&|u| val.contains(u))),
                test: subset(manifest, pick(&|u| !train.contains(u) && !val.contains(u))),
            })
        }
        SplitSpec::Temporal { window_size, frame_step } => {
            if window_size == 0 || frame_step == 0 {
                return Err(Error::InvalidConfig("window_size and frame_step must be positive".into()));
            }
            let (mut train, mut val, mut test) = (Vec::new(), Vec::new(), Vec::new());
            for e in &manifest.entries {
                let n = resampled_len(e.duration_s);
                let [b1, b2] = temporal_boundaries(n, frame_step);
                // a segment of m frames yields m − 1 feature frames
                for (lo, hi) in [(0, b1), (b1, b2), (b2, n)] {
                    if hi <= lo || hi - lo - 1 < window_size {
                        return Err(Error::RecordingTooShort(format!(
                            "{} {} {}: segment {lo}..{hi} cannot hold a {window_size}-frame window",
                            e.user, e.app, e.session
                        )));
                    }
                }
                let with = |lo, hi| ManifestEntry { frame_range: Some([lo, hi]), ..e.clone() };
                train.push(with(0, b1));
                val.push(with(b1, b2));
                test.push(with(b2, n));
            }
            Ok(SplitManifests {
                train: subset(manifest, train),
                val: subset(manifest, val),
                test: subset(manifest, test),
            })
        }
    }
}
