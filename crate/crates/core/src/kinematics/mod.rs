//! Preprocessing from raw tracking streams to model input: resampling to
//! 30 FPS, body-relative (BR) re-expression in the head's heading frame,
//! per-frame differencing (BRV) and sliding windows.

pub mod quat;

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::motion_io::{AppLabel, DevicePose, Frame, Recording, UserId};
use quat::{lerp3, sub3, Quat};

pub const TARGET_FPS: f64 = 30.0;
pub const N_FEATURES: usize = 18;
/// Heading is held from the last usable frame above this head pitch.
pub const GIMBAL_LIMIT_DEG: f64 = 89.0;

/// Feature column names in model-input order.
pub const FEATURE_NAMES: [&str; N_FEATURES] = [
    "hmd_rx", "hmd_ry", "hmd_rz", "hmd_rw", "l_px", "l_py", "l_pz", "l_rx", "l_ry", "l_rz", "l_rw",
    "r_px", "r_py", "r_pz", "r_rx", "r_ry", "r_rz", "r_rw",
];

pub type FeatureFrame = [f64; N_FEATURES];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncodingConfig {
    pub target_fps: u32,
    /// Frames per window.
    pub window_size: usize,
    /// Stride between window starts, in frames.
    pub frame_step: usize,
}

impl EncodingConfig {
    pub fn new(window_size: usize, frame_step: usize) -> Result<Self> {
        if window_size == 0 || frame_step == 0 {
            return Err(Error::InvalidConfig(
                "window_size and frame_step must be positive".into(),
            ));
        }
        Ok(Self {
            target_fps: TARGET_FPS as u32,
            window_size,
            frame_step,
        })
    }

    pub fn similarity() -> Self {
        Self::new(450, 50).unwrap()
    }

    pub fn classification() -> Self {
        Self::new(600, 100).unwrap()
    }
}

/// Pose of all devices relative to the head's position and heading.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BrFrame {
    /// Head rotation with heading removed (pitch and roll only).
    pub hmd_rot: Quat,
    pub left: DevicePose,
    pub right: DevicePose,
}

/// Number of 30 FPS frames a recording of `duration` seconds resamples to.
pub fn resampled_len(duration: f64) -> usize {
    (duration * TARGET_FPS + 1e-9).floor() as usize + 1
}

/// Resamples onto the grid t = k/30 s, k = 0..=floor(duration·30), measured
/// from the first frame. Positions are interpolated linearly, rotations by
/// slerp.
pub fn resample_to_30fps(recording: &Recording) -> Result<Recording> {
    let src = &recording.frames;
    if src.len() < 2 {
        return Err(Error::TooShort(format!(
            "resampling needs at least 2 frames, got {}",
            src.len()
        )));
    }
    let t0 = src[0].t;
    let duration = recording.duration();
    let n = resampled_len(duration);
    if n < 2 {
        return Err(Error::TooShort(format!(
            "{duration:.4} s is shorter than one 30 FPS frame"
        )));
    }
    let mut frames = Vec::with_capacity(n);
    let mut j = 0;
    for k in 0..n {
        let t = k as f64 / TARGET_FPS;
        let abs = t0 + t;
        while j + 2 < src.len() && src[j + 1].t <= abs {
            j += 1;
        }
        let (a, b) = (&src[j], &src[j + 1]);
        let alpha = ((abs - a.t) / (b.t - a.t)).clamp(0.0, 1.0);
        let mix = |p: &DevicePose, q: &DevicePose| {
            DevicePose::new(lerp3(p.pos, q.pos, alpha), p.rot.slerp(q.rot, alpha))
        };
        frames.push(Frame {
            t,
            hmd: mix(&a.hmd, &b.hmd),
            left: mix(&a.left, &b.left),
            right: mix(&a.right, &b.right),
        });
    }
    Ok(Recording {
        user: recording.user.clone(),
        app: recording.app.clone(),
        session: recording.session.clone(),
        frames,
        nominal_rate: TARGET_FPS,
    })
}

/// Heading angle per frame; frames looking (nearly) straight up or down
/// reuse the most recent usable heading, or the first usable one if none
/// came before.
fn headings(frames: &[Frame]) -> Vec<f64> {
    let limit = GIMBAL_LIMIT_DEG.to_radians();
    let usable = |f: &Frame| f.hmd.rot.pitch_of().abs() <= limit;
    let first = frames
        .iter()
        .find(|f| usable(f))
        .map(|f| f.hmd.rot.yaw_of())
        .unwrap_or(0.0);
    let mut last = first;
    frames
        .iter()
        .map(|f| {
            if usable(f) {
                last = f.hmd.rot.yaw_of();
            }
            last
        })
        .collect()
}

/// Re-expresses every frame in the head's frame: origin at the head
/// position, rotated by the head's heading (yaw only). The head position
/// itself is dropped; its residual rotation keeps pitch and roll.
pub fn encode_body_relative(recording: &Recording) -> Vec<BrFrame> {
    let yaws = headings(&recording.frames);
    recording
        .frames
        .iter()
        .zip(yaws)
        .map(|(f, yaw)| {
            let inv = Quat::from_yaw(yaw).conjugate();
            let rel = |d: &DevicePose| {
                DevicePose::new(inv.rotate_vec(sub3(d.pos, f.hmd.pos)), inv * d.rot)
            };
            BrFrame {
                hmd_rot: inv * f.hmd.rot,
                left: rel(&f.left),
                right: rel(&f.right),
            }
        })
        .collect()
}

/// Makes a quaternion track sign-continuous: the first sample goes to the
/// `w ≥ 0` hemisphere and each later one is flipped to agree with its
/// predecessor.
fn continuous(track: impl Iterator<Item = Quat>) -> Vec<Quat> {
    let mut out: Vec<Quat> = Vec::new();
    for q in track {
        let q = match out.last() {
            None => q.canonical(),
            Some(prev) if prev.dot(q) < 0.0 => -q,
            Some(_) => q,
        };
        out.push(q);
    }
    out
}

/// Per-frame differences of BR frames: output `i` is `BR(i+1) − BR(i)`,
/// componentwise, on sign-continuous rotation tracks. Not divided by Δt.
pub fn encode_brv(br: &[BrFrame]) -> Result<Vec<FeatureFrame>> {
    if br.len() < 2 {
        return Err(Error::TooShort(format!(
            "velocity encoding needs at least 2 frames, got {}",
            br.len()
        )));
    }
    let hmd = continuous(br.iter().map(|f| f.hmd_rot));
    let left = continuous(br.iter().map(|f| f.left.rot));
    let right = continuous(br.iter().map(|f| f.right.rot));
    let out = (0..br.len() - 1)
        .map(|i| {
            let mut f = [0.0; N_FEATURES];
            let dq = |t: &[Quat]| {
                let (a, b) = (t[i].to_array(), t[i + 1].to_array());
                [b[0] - a[0], b[1] - a[1], b[2] - a[2], b[3] - a[3]]
            };
            let dp = |a: [f64; 3], b: [f64; 3]| sub3(b, a);
            f[0..4].copy_from_slice(&dq(&hmd));
            f[4..7].copy_from_slice(&dp(br[i].left.pos, br[i + 1].left.pos));
            f[7..11].copy_from_slice(&dq(&left));
            f[11..14].copy_from_slice(&dp(br[i].right.pos, br[i + 1].right.pos));
            f[14..18].copy_from_slice(&dq(&right));
            f
        })
        .collect();
    Ok(out)
}

/// Encoded feature sequence of one recording (or one segment of it).
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureStream {
    pub user: UserId,
    pub app: AppLabel,
    pub session: String,
    /// Index of this stream's first frame within the full 30 FPS recording.
    pub frame_offset: usize,
    /// Row-major `len × 18`.
    pub data: Vec<f32>,
}

impl FeatureStream {
    pub fn from_frames(
        user: UserId,
        app: AppLabel,
        session: String,
        frame_offset: usize,
        frames: &[FeatureFrame],
    ) -> Self {
        let data = frames
            .iter()
            .flat_map(|f| f.iter().map(|v| *v as f32))
            .collect();
        Self {
            user,
            app,
            session,
            frame_offset,
            data,
        }
    }

    pub fn len(&self) -> usize {
        self.data.len() / N_FEATURES
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

/// Fixed-length slice of a [`FeatureStream`]; shares the stream's buffer.
#[derive(Debug, Clone)]
pub struct FeatureWindow {
    pub stream: Arc<FeatureStream>,
    /// First row within the stream.
    pub start: usize,
    pub size: usize,
}

impl FeatureWindow {
    /// Row-major `size × 18` view.
    pub fn frames(&self) -> &[f32] {
        &self.stream.data[self.start * N_FEATURES..(self.start + self.size) * N_FEATURES]
    }

    pub fn user(&self) -> &UserId {
        &self.stream.user
    }

    pub fn app(&self) -> &AppLabel {
        &self.stream.app
    }

    pub fn session(&self) -> &str {
        &self.stream.session
    }

    /// Start index within the full resampled recording.
    pub fn start_frame(&self) -> usize {
        self.stream.frame_offset + self.start
    }
}

/// Windows starting at 0, S, 2S, … that fit entirely in the stream; the
/// trailing partial window is dropped.
pub fn make_windows(
    stream: &Arc<FeatureStream>,
    config: &EncodingConfig,
) -> Result<Vec<FeatureWindow>> {
    let (len, w, s) = (stream.len(), config.window_size, config.frame_step);
    if len < w {
        return Err(Error::TooShort(format!(
            "{len} feature frames cannot hold a {w}-frame window"
        )));
    }
    Ok((0..=(len - w) / s)
        .map(|k| FeatureWindow {
            stream: Arc::clone(stream),
            start: k * s,
            size: w,
        })
        .collect())
}

/// Resample, BR-encode and difference a whole recording, optionally
/// restricted to a half-open range of 30 FPS frames.
pub fn encode_recording(
    recording: &Recording,
    frame_range: Option<[usize; 2]>,
) -> Result<Arc<FeatureStream>> {
    let resampled = resample_to_30fps(recording)?;
    let [lo, hi] = frame_range.unwrap_or([0, resampled.frames.len()]);
    let hi = hi.min(resampled.frames.len());
    if lo >= hi {
        return Err(Error::TooShort(format!("empty frame range {lo}..{hi}")));
    }
    let segment = Recording {
        frames: resampled.frames[lo..hi].to_vec(),
        ..resampled
    };
    let brv = encode_brv(&encode_body_relative(&segment))?;
    Ok(Arc::new(FeatureStream::from_frames(
        segment.user,
        segment.app,
        segment.session,
        lo,
        &brv,
    )))
}

/// Debug dump: `window,frame,<18 feature columns>`.
pub fn write_windows_csv(windows: &[FeatureWindow], path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    writeln!(w, "window,frame,{}", FEATURE_NAMES.join(",")).map_err(io)?;
    for (id, win) in windows.iter().enumerate() {
        for (r, row) in win.frames().chunks(N_FEATURES).enumerate() {
            write!(w, "{id},{}", win.start_frame() + r).map_err(io)?;
            for v in row {
                write!(w, ",{v}").map_err(io)?;
            }
            w.write_all(b"\n").map_err(io)?;
        }
    }
    w.flush().map_err(io)
}
