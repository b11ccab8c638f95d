//! Content-addressed store of encoded feature streams. The key covers the
//! bytes of every input recording, the manifest identities and frame
//! ranges, and the encoding parameters.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::kinematics::{EncodingConfig, FeatureStream, N_FEATURES};
use crate::motion_io::{AppLabel, DatasetManifest, UserId};

pub const CACHE_MAGIC: &[u8; 8] = b"XRIDWIN1";
pub const CACHE_ENV: &str = "XRID_CACHE_DIR";

#[derive(Serialize, Deserialize)]
struct StreamHeader {
    user: UserId,
    app: AppLabel,
    session: String,
    frame_offset: usize,
    len: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    encoding: EncodingConfig,
    streams: Vec<StreamHeader>,
}

/// Hex SHA-256 over the manifest contents and `enc`.
pub fn cache_key(manifest: &DatasetManifest, enc: &EncodingConfig) -> Result<String> {
    let mut h = Sha256::new();
    h.update(CACHE_MAGIC);
    h.update(serde_json::to_vec(enc)?);
    for e in &manifest.entries {
        h.update(serde_json::to_vec(&(&e.user, &e.app, &e.session, e.frame_range))?);
        let path = manifest.resolve(e);
        let mut f = fs::File::open(&path).map_err(|err| Error::io(&path, err))?;
        let mut file_hash = Sha256::new();
        let mut buf = vec![0u8; 1 << 16];
        loop {
            let n = f.read(&mut buf).map_err(|err| Error::io(&path, err))?;
            if n == 0 {
                break;
            }
            file_hash.update(&buf[..n]);
        }
        h.update(file_hash.finalize());
    }
    Ok(hex::encode(h.finalize()))
}

pub fn cache_path(dir: &Path, key: &str) -> PathBuf {
    dir.join(format!("{key}.xwin"))
}

pub fn write_streams(path: &Path, enc: &EncodingConfig, streams: &[Arc<FeatureStream>]) -> Result<()> {
    let header = Header {
        encoding: *enc,
        streams: streams
            .iter()
            .map(|s| StreamHeader {
                user: s.user.clone(),
                app: s.app.clone(),
                session: s.session.clone(),
                frame_offset: s.frame_offset,
                len: s.len(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut bytes = Vec::with_capacity(16 + json.len() + streams.iter().map(|s| s.data.len() * 4).sum::<usize>());
    bytes.extend_from_slice(CACHE_MAGIC);
    bytes.extend_from_slice(&(json.len() as u64).to_le_bytes());
    bytes.extend_from_slice(&json);
    for s in streams {
        for v in &s.data {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    // write-then-rename so a crashed run never leaves a torn entry
    let tmp = path.with_extension("xwin.tmp");
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn read_streams(path: &Path, enc: &EncodingConfig) -> Result<Vec<Arc<FeatureStream>>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |m: &str| Error::CorruptCache(format!("{}: {m}", path.display()));
    if bytes.len() < 16 || &bytes[..8] != CACHE_MAGIC {
        return Err(bad("not a window cache file"));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let body = bytes.get(16..16 + hlen).ok_or_else(|| bad("truncated header"))?;
    let header: Header = serde_json::from_slice(body)?;
    if header.encoding != *enc {
        return Err(bad("encoding parameters differ"));
    }
    let mut off = 16 + hlen;
    let mut out = Vec::with_capacity(header.streams.len());
    for s in header.streams {
        let n = s.len * N_FEATURES * 4;
        let raw = bytes.get(off..off + n).ok_or_else(|| bad("truncated payload"))?;
        off += n;
        out.push(Arc::new(FeatureStream {
            user: s.user,
            app: s.app,
            session: s.session,
            frame_offset: s.frame_offset,
            data: raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect(),
        }));
    }
    if off != bytes.len() {
        return Err(bad("trailing bytes"));
    }
    Ok(out)
}
