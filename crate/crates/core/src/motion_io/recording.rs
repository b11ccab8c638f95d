use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::kinematics::quat::Quat;

use super::{AppLabel, DevicePose, Frame, Recording, UserId};

pub const RECORDING_HEADER: [&str; 22] = [
    "t", "hmd_px", "hmd_py", "hmd_pz", "hmd_rx", "hmd_ry", "hmd_rz", "hmd_rw", "l_px", "l_py",
    "l_pz", "l_rx", "l_ry", "l_rz", "l_rw", "r_px", "r_py", "r_pz", "r_rx", "r_ry", "r_rz", "r_rw",
];

/// Reads a wide-CSV recording and validates it (see [`Recording::validate`]).
/// Row numbers in errors are 1-based file lines, the header being line 1.
pub fn parse_recording(
    path: &Path,
    user: UserId,
    app: AppLabel,
    session: impl Into<String>,
) -> Result<Recording> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(file);
    let header = reader
        .headers()
        .map_err(|e| Error::SchemaMismatch(e.to_string()))?;
    if header.iter().map(str::trim).ne(RECORDING_HEADER.iter().copied()) {
        return Err(Error::SchemaMismatch(header.iter().collect::<Vec<_>>().join(",")));
    }

    let mut frames = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let row = i + 2;
        let record = record.map_err(|e| Error::MalformedRow {
            row,
            reason: e.to_string(),
        })?;
        if record.len() != RECORDING_HEADER.len() {
            return Err(Error::MalformedRow {
                row,
                reason: format!("expected 22 columns, found {}", record.len()),
            });
        }
        let mut v = [0.0f64; 22];
        for (slot, field) in v.iter_mut().zip(record.iter()) {
            *slot = field.trim().parse().map_err(|_| Error::MalformedRow {
                row,
                reason: format!("cannot parse {field:?} as a number"),
            })?;
        }
        let pose = |o: usize| {
            DevicePose::new(
                [v[o], v[o + 1], v[o + 2]],
                Quat::new(v[o + 3], v[o + 4], v[o + 5], v[o + 6]),
            )
        };
        frames.push(Frame {
            t: v[0],
            hmd: pose(1),
            left: pose(8),
            right: pose(15),
        });
    }

    Recording {
        user,
        app,
        session: session.into(),
        frames,
        nominal_rate: 0.0,
    }
    .validate()
}

/// Writes `recording` as wide CSV. Values use the shortest decimal form
/// that parses back to the identical `f64`.
pub fn write_recording(recording: &Recording, path: &Path) -> Result<()> {
    if recording.frames.is_empty() {
        return Err(Error::EmptyRecording);
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    writeln!(w, "{}", RECORDING_HEADER.join(",")).map_err(io)?;
    for f in &recording.frames {
        write!(w, "{}", f.t).map_err(io)?;
        for pose in [&f.hmd, &f.left, &f.right] {
            for p in pose.pos {
                write!(w, ",{p}").map_err(io)?;
            }
            for q in pose.rot.to_array() {
                write!(w, ",{q}").map_err(io)?;
            }
        }
        w.write_all(b"\n").map_err(io)?;
    }
    w.flush().map_err(io)
}
