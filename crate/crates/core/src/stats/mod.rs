//! Descriptive dataset analyses: device travel per minute, head pitch,
//! repeated-measures ANOVA across applications and Bonferroni-corrected
//! paired post-hoc tests.

mod dist;

use std::collections::BTreeMap;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use dist::{beta_reg, f_sf, ln_gamma, t_two_sided};

use crate::error::{Error, Result};
use crate::identification::csv_err;
use crate::kinematics::resample_to_30fps;
use crate::motion_io::{AppLabel, Device, Recording, UserId};

/// Frames per one-minute bin at 30 FPS.
pub const FRAMES_PER_MINUTE: usize = 1800;
pub const ALPHA: f64 = 0.05;

/// Distance covered by `device` in each full minute of a 30 FPS recording.
/// The delta between frames `i` and `i + 1` belongs to minute `i / 1800`;
/// a trailing partial minute is dropped.
pub fn travel_distance(rec: &Recording, device: Device) -> Result<Vec<f64>> {
    let minutes = rec.frames.len().saturating_sub(1) / FRAMES_PER_MINUTE;
    if minutes == 0 {
        return Err(Error::TooShort(format!(
            "{} frames hold no full minute of motion",
            rec.frames.len()
        )));
    }
    let mut out = vec![0.0; minutes];
    for (i, pair) in rec.frames.windows(2).take(minutes * FRAMES_PER_MINUTE).enumerate() {
        let (a, b) = (pair[0].device(device).pos, pair[1].device(device).pos);
        let d = ((b[0] - a[0]).powi(2) + (b[1] - a[1]).powi(2) + (b[2] - a[2]).powi(2)).sqrt();
        out[i / FRAMES_PER_MINUTE] += d;
    }
    Ok(out)
}

/// Session-level mean per-minute travel (m) of each device.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MovementStats {
    pub user: UserId,
    pub app: AppLabel,
    pub hmd: f64,
    pub left: f64,
    pub right: f64,
}

pub fn movement_stats(rec: &Recording) -> Result<MovementStats> {
    let mean = |d| travel_distance(rec, d).map(|v| v.iter().sum::<f64>() / v.len() as f64);
    Ok(MovementStats {
        user: rec.user.clone(),
        app: rec.app.clone(),
        hmd: mean(Device::Hmd)?,
        left: mean(Device::Left)?,
        right: mean(Device::Right)?,
    })
}

/// Head pitch in degrees over a session; positive looks up.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PitchStats {
    pub user: UserId,
    pub app: AppLabel,
    pub mean_deg: f64,
    /// Population standard deviation.
    pub std_deg: f64,
}

pub fn pitch_stats(rec: &Recording) -> PitchStats {
    let deg: Vec<f64> = rec.frames.iter().map(|f| f.hmd.rot.pitch_of().to_degrees()).collect();
    let n = deg.len().max(1) as f64;
    let mean = deg.iter().sum::<f64>() / n;
    let var = deg.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / n;
    PitchStats {
        user: rec.user.clone(),
        app: rec.app.clone(),
        mean_deg: mean,
        std_deg: var.sqrt(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnovaResult {
    pub f: f64,
    pub df_between: usize,
    pub df_within: usize,
    pub p: f64,
}

fn check_matrix(values: &[Vec<f64>]) -> Result<(usize, usize)> {
    let n = values.len();
    let a = values.first().map_or(0, Vec::len);
    if n < 2 || a < 2 {
        return Err(Error::IncompleteMatrix(format!("need ≥2 users and ≥2 apps, got {n}×{a}")));
    }
    for (i, row) in values.iter().enumerate() {
        if row.len() != a {
            return Err(Error::IncompleteMatrix(format!("row {i} has {} of {a} cells", row.len())));
        }
        if let Some(j) = row.iter().position(|v| !v.is_finite()) {
            return Err(Error::IncompleteMatrix(format!("cell ({i}, {j}) is missing")));
        }
    }
    Ok((n, a))
}

/// One-way repeated-measures ANOVA over a users × apps matrix, without
/// sphericity correction. A zero error term yields `F = 0` when the
/// treatment effect is also zero and `F = ∞` otherwise.
pub fn rm_anova(values: &[Vec<f64>]) -> Result<AnovaResult> {
    let (n, a) = check_matrix(values)?;
    let grand = values.iter().flatten().sum::<f64>() / (n * a) as f64;
    let ss_total: f64 = values.iter().flatten().map(|v| (v - grand).powi(2)).sum();
    let ss_subj: f64 = values
        .iter()
        .map(|r| (r.iter().sum::<f64>() / a as f64 - grand).powi(2))
        .sum::<f64>()
        * a as f64;
    let ss_treat: f64 = (0..a)
        .map(|j| (values.iter().map(|r| r[j]).sum::<f64>() / n as f64 - grand).powi(2))
        .sum::<f64>()
        * n as f64;
    let ss_err = (ss_total - ss_subj - ss_treat).max(0.0);
    let (df_b, df_w) = (a - 1, (a - 1) * (n - 1));
    let scale = ss_total.max(grand * grand).max(f64::MIN_POSITIVE);
    let f = if ss_treat <= 1e-14 * scale {
        0.0
    } else if ss_err <= 1e-14 * scale {
        f64::INFINITY
    } else {
        (ss_treat / df_b as f64) / (ss_err / df_w as f64)
    };
    Ok(AnovaResult { f, df_between: df_b, df_within: df_w, p: f_sf(f, df_b as f64, df_w as f64) })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosthocResult {
    /// Column indices of the compared conditions.
    pub a: usize,
    pub b: usize,
    pub t: f64,
    pub df: usize,
    pub p_raw: f64,
    pub p_adjusted: f64,
    pub significant: bool,
}

/// Paired t statistic and two-sided p for `x − y`.
pub fn paired_t(x: &[f64], y: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let d: Vec<f64> = x.iter().zip(y).map(|(a, b)| a - b).collect();
    let mean = d.iter().sum::<f64>() / n;
    let var = d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    let t = if mean == 0.0 {
        0.0
    } else if var == 0.0 {
        f64::INFINITY.copysign(mean)
    } else {
        mean / (var / n).sqrt()
    };
    (t, t_two_sided(t, n - 1.0))
}

/// All pairwise paired t-tests between columns, Bonferroni-adjusted.
pub fn posthoc_bonferroni(values: &[Vec<f64>], alpha: f64) -> Result<Vec<PosthocResult>> {
    let (n, a) = check_matrix(values)?;
    let comparisons = (a * (a - 1) / 2) as f64;
    let col = |j: usize| values.iter().map(|r| r[j]).collect::<Vec<_>>();
    let mut out = Vec::new();
    for i in 0..a {
        for j in i + 1..a {
            let (t, p) = paired_t(&col(i), &col(j));
            let adj = (p * comparisons).min(1.0);
            out.push(PosthocResult { a: i, b: j, t, df: n - 1, p_raw: p, p_adjusted: adj, significant: adj < alpha });
        }
    }
    Ok(out)
}

/// Quantities compared across applications.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Measure {
    HmdDistance,
    LeftDistance,
    RightDistance,
    PitchMean,
}

impl Measure {
    pub const ALL: [Measure; 4] =
        [Measure::HmdDistance, Measure::LeftDistance, Measure::RightDistance, Measure::PitchMean];

    pub fn as_str(self) -> &'static str {
        match self {
            Measure::HmdDistance => "hmd_distance",
            Measure::LeftDistance => "left_distance",
            Measure::RightDistance => "right_distance",
            Measure::PitchMean => "pitch_mean",
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MeasureTest {
    pub measure: Measure,
    pub anova: AnovaResult,
    pub posthoc: Vec<PosthocResult>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StatsReport {
    pub apps: Vec<AppLabel>,
    pub users: Vec<UserId>,
    pub movement: Vec<MovementStats>,
    pub pitch: Vec<PitchStats>,
    pub tests: Vec<MeasureTest>,
}

/// Resamples every recording and runs the full analysis. Sessions of the
/// same user and app are averaged before testing.
pub fn analyze(recordings: &[Recording]) -> Result<StatsReport> {
    let per: Vec<(MovementStats, PitchStats)> = recordings
        .par_iter()
        .map(|r| {
            let r = resample_to_30fps(r)?;
            Ok((movement_stats(&r)?, pitch_stats(&r)))
        })
        .collect::<Result<_>>()?;
    let (movement, pitch): (Vec<_>, Vec<_>) = per.into_iter().unzip();
    let mut apps: Vec<AppLabel> = movement.iter().map(|m| m.app.clone()).collect();
    apps.sort();
    apps.dedup();
    let mut users: Vec<UserId> = movement.iter().map(|m| m.user.clone()).collect();
    users.sort();
    users.dedup();

    let mut tests = Vec::new();
    for measure in Measure::ALL {
        let mut cells: BTreeMap<(&UserId, &AppLabel), (f64, usize)> = BTreeMap::new();
        for (m, p) in movement.iter().zip(&pitch) {
            let v = match measure {
                Measure::HmdDistance => m.hmd,
                Measure::LeftDistance => m.left,
                Measure::RightDistance => m.right,
                Measure::PitchMean => p.mean_deg,
            };
            let c = cells.entry((&m.user, &m.app)).or_insert((0.0, 0));
            c.0 += v;
            c.1 += 1;
        }
        let mut matrix = Vec::with_capacity(users.len());
        for u in &users {
            let mut row = Vec::with_capacity(apps.len());
            for a in &apps {
                let (s, k) = cells
                    .get(&(u, a))
                    .ok_or_else(|| Error::IncompleteMatrix(format!("no {a} recording for {u}")))?;
                row.push(s / *k as f64);
            }
            matrix.push(row);
        }
        tests.push(MeasureTest {
            measure,
            anova: rm_anova(&matrix)?,
            posthoc: posthoc_bonferroni(&matrix, ALPHA)?,
        });
    }
    Ok(StatsReport { apps, users, movement, pitch, tests })
}

impl StatsReport {
    /// Per-application means across users: distances in m/min, pitch in
    /// degrees (std column is the mean within-session std).
    pub fn write_table(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
        w.write_record([
            "app",
            "n_sessions",
            "hmd_m_per_min",
            "left_m_per_min",
            "right_m_per_min",
            "pitch_mean_deg",
            "pitch_std_deg",
        ])
        .map_err(|e| csv_err(path, e))?;
        for app in &self.apps {
            let idx: Vec<usize> = (0..self.movement.len()).filter(|&i| &self.movement[i].app == app).collect();
            let n = idx.len() as f64;
            let avg = |f: &dyn Fn(usize) -> f64| idx.iter().map(|&i| f(i)).sum::<f64>() / n;
            w.write_record([
                app.display_name().to_string(),
                idx.len().to_string(),
                format!("{:.2}", avg(&|i| self.movement[i].hmd)),
                format!("{:.2}", avg(&|i| self.movement[i].left)),
                format!("{:.2}", avg(&|i| self.movement[i].right)),
                format!("{:.2}", avg(&|i| self.pitch[i].mean_deg)),
                format!("{:.2}", avg(&|i| self.pitch[i].std_deg)),
            ])
            .map_err(|e| csv_err(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn write_anova(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
        w.write_record(["measure", "f", "df_between", "df_within", "p"]).map_err(|e| csv_err(path, e))?;
        for t in &self.tests {
            let a = &t.anova;
            w.write_record([
                t.measure.as_str().to_string(),
                format!("{:.4}", a.f),
                a.df_between.to_string(),
                a.df_within.to_string(),
                format!("{:.6e}", a.p),
            ])
            .map_err(|e| csv_err(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn write_posthoc(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
        w.write_record(["measure", "app_a", "app_b", "t", "df", "p_raw", "p_adjusted", "significant"])
            .map_err(|e| csv_err(path, e))?;
        for t in &self.tests {
            for r in &t.posthoc {
                w.write_record([
                    t.measure.as_str().to_string(),
                    self.apps[r.a].to_string(),
                    self.apps[r.b].to_string(),
                    format!("{:.4}", r.t),
                    r.df.to_string(),
                    format!("{:.6e}", r.p_raw),
                    format!("{:.6e}", r.p_adjusted),
                    r.significant.to_string(),
                ])
                .map_err(|e| csv_err(path, e))?;
            }
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}
