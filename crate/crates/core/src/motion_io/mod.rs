//! Tracking-data model: three tracked devices (headset and two
//! controllers) sampled over time, labelled by user, application and
//! session.

mod manifest;
mod recording;
pub mod synth;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kinematics::quat::Quat;

pub use manifest::{DatasetManifest, ManifestEntry, MANIFEST_SCHEMA_VERSION};
pub use recording::{parse_recording, write_recording, RECORDING_HEADER};
pub use synth::{
    generate_synthetic_dataset, AppModulation, SynthConfig, SynthProfile, SyntheticDataset,
    UserSignature,
};

/// Lowest native capture rate accepted on ingest, in Hz (1% slack).
pub const MIN_NATIVE_RATE: f64 = 29.7;

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct UserId(pub String);

impl UserId {
    pub fn new(s: impl Into<String>) -> Self {
        Self(s.into())
    }

    /// Zero-padded synthetic id so lexicographic order equals numeric order.
    pub fn numbered(i: usize) -> Self {
        Self(format!("u{i:03}"))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for UserId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// Application a recording was captured in. The five built-in labels are
/// declared in play order, which is also their sort order.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub enum AppLabel {
    SynthRiders,
    SuperhotVr,
    BeatSaber,
    HalfLifeAlyx,
    SocialVr,
    Custom(String),
}

/// Broad movement character of an application.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Archetype {
    Rhythm,
    Shooter,
    Social,
}

impl AppLabel {
    pub const PLAY_ORDER: [AppLabel; 5] = [
        AppLabel::SynthRiders,
        AppLabel::SuperhotVr,
        AppLabel::BeatSaber,
        AppLabel::HalfLifeAlyx,
        AppLabel::SocialVr,
    ];

    pub fn as_str(&self) -> &str {
        match self {
            AppLabel::SynthRiders => "synth_riders",
            AppLabel::SuperhotVr => "superhot_vr",
            AppLabel::BeatSaber => "beat_saber",
            AppLabel::HalfLifeAlyx => "half_life_alyx",
            AppLabel::SocialVr => "social_vr",
            AppLabel::Custom(s) => s,
        }
    }

    pub fn display_name(&self) -> &str {
        match self {
            AppLabel::SynthRiders => "Synth Riders",
            AppLabel::SuperhotVr => "Superhot VR",
            AppLabel::BeatSaber => "Beat Saber",
            AppLabel::HalfLifeAlyx => "Half-Life: Alyx",
            AppLabel::SocialVr => "Social VR",
            AppLabel::Custom(s) => s,
        }
    }

    pub fn archetype(&self) -> Archetype {
        match self {
            AppLabel::SynthRiders | AppLabel::BeatSaber => Archetype::Rhythm,
            AppLabel::SuperhotVr | AppLabel::HalfLifeAlyx => Archetype::Shooter,
            AppLabel::SocialVr | AppLabel::Custom(_) => Archetype::Social,
        }
    }
}

impl fmt::Display for AppLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AppLabel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let label = match s {
            "synth_riders" => AppLabel::SynthRiders,
            "superhot_vr" => AppLabel::SuperhotVr,
            "beat_saber" => AppLabel::BeatSaber,
            "half_life_alyx" => AppLabel::HalfLifeAlyx,
            "social_vr" => AppLabel::SocialVr,
            "" => return Err(Error::InvalidManifest("empty app label".into())),
            other => AppLabel::Custom(other.to_string()),
        };
        Ok(label)
    }
}

impl From<AppLabel> for String {
    fn from(a: AppLabel) -> String {
        a.as_str().to_string()
    }
}

impl TryFrom<String> for AppLabel {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct DevicePose {
    /// Meters.
    pub pos: [f64; 3],
    pub rot: Quat,
}

impl DevicePose {
    pub fn new(pos: [f64; 3], rot: Quat) -> Self {
        Self { pos, rot }
    }

    fn validated(self) -> Result<Self> {
        if !self.pos.iter().all(|p| p.is_finite()) || !self.rot.is_finite() {
            return Err(Error::InvalidRecording("non-finite pose component".into()));
        }
        Ok(Self {
            pos: self.pos,
            rot: self.rot.normalize()?,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Frame {
    /// Seconds since recording start.
    pub t: f64,
    pub hmd: DevicePose,
    pub left: DevicePose,
    pub right: DevicePose,
}

/// Which tracked device a per-device statistic refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Device {
    Hmd,
    Left,
    Right,
}

impl Frame {
    pub fn device(&self, d: Device) -> &DevicePose {
        match d {
            Device::Hmd => &self.hmd,
            Device::Left => &self.left,
            Device::Right => &self.right,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Recording {
    pub user: UserId,
    pub app: AppLabel,
    pub session: String,
    pub frames: Vec<Frame>,
    /// Hz.
    pub nominal_rate: f64,
}

impl Recording {
    pub fn duration(&self) -> f64 {
        match (self.frames.first(), self.frames.last()) {
            (Some(a), Some(b)) => b.t - a.t,
            _ => 0.0,
        }
    }

    /// Normalizes quaternions, time-sorts frames, collapses duplicate
    /// timestamps to their first occurrence and re-estimates the nominal
    /// rate. Rejects streams where more than 1% of rows step backwards in
    /// time. Validating an already valid recording is a no-op.
    pub fn validate(self) -> Result<Recording> {
        let Recording {
            user,
            app,
            session,
            frames,
            ..
        } = self;
        if frames.is_empty() {
            return Err(Error::EmptyRecording);
        }
        let rows = frames.len();
        let regressions = frames.windows(2).filter(|w| w[1].t < w[0].t).count();
        if regressions * 100 > rows {
            return Err(Error::NonMonotonicTime { regressions, rows });
        }
        let mut out = Vec::with_capacity(rows);
        for f in frames {
            if !f.t.is_finite() || f.t < 0.0 {
                return Err(Error::InvalidRecording(format!("bad timestamp {}", f.t)));
            }
            out.push(Frame {
                t: f.t,
                hmd: f.hmd.validated()?,
                left: f.left.validated()?,
                right: f.right.validated()?,
            });
        }
        // Stable sort keeps the first occurrence of a duplicated timestamp first.
        if regressions > 0 {
            out.sort_by(|a, b| a.t.total_cmp(&b.t));
        }
        out.dedup_by(|later, earlier| later.t == earlier.t);
        let nominal_rate = estimate_rate(&out);
        if out.len() >= 2 && nominal_rate < MIN_NATIVE_RATE {
            return Err(Error::InvalidRecording(format!(
                "capture rate {nominal_rate:.2} Hz is below 30 Hz"
            )));
        }
        Ok(Recording {
            user,
            app,
            session,
            frames: out,
            nominal_rate,
        })
    }
}

/// Reciprocal of the median inter-frame interval; 0 for single frames.
fn estimate_rate(frames: &[Frame]) -> f64 {
    let mut dts: Vec<f64> = frames.windows(2).map(|w| w[1].t - w[0].t).collect();
    if dts.is_empty() {
        return 0.0;
    }
    dts.sort_by(f64::total_cmp);
    let mid = dts.len() / 2;
    let median = if dts.len().is_multiple_of(2) {
        0.5 * (dts[mid - 1] + dts[mid])
    } else {
        dts[mid]
    };
    1.0 / median
}
