use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::motion_io::{AppLabel, UserId};

use super::WindowKey;

pub const STORE_MAGIC: &[u8; 8] = b"XRIDREFS";
const STORE_SCHEMA_VERSION: u32 = 1;
/// Allowed deviation of a stored embedding's norm from 1.
const UNIT_TOL: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReferenceRow {
    pub user: UserId,
    pub app: AppLabel,
    pub session: String,
    pub window_start: usize,
}

impl ReferenceRow {
    pub fn key(&self) -> WindowKey {
        WindowKey {
            user: self.user.clone(),
            app: self.app.clone(),
            session: self.session.clone(),
            start: self.window_start,
        }
    }
}

/// Labelled unit-length embeddings, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceStore {
    dim: usize,
    rows: Vec<ReferenceRow>,
    data: Vec<f32>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    schema_version: u32,
    dim: usize,
    users: Vec<UserId>,
    apps: Vec<AppLabel>,
    counts: BTreeMap<String, usize>,
    rows: Vec<ReferenceRow>,
}

impl ReferenceStore {
    pub fn new(dim: usize) -> Self {
        Self { dim, rows: Vec::new(), data: Vec::new() }
    }

    pub fn push(&mut self, row: ReferenceRow, embedding: &[f32]) -> Result<()> {
        if embedding.len() != self.dim {
            return Err(Error::ShapeMismatch(format!(
                "embedding of length {} in a {}-dimensional store",
                embedding.len(),
                self.dim
            )));
        }
        let norm = embedding.iter().map(|v| (*v as f64).powi(2)).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > UNIT_TOL {
            return Err(Error::InvalidConfig(format!("reference embedding has norm {norm}")));
        }
        self.rows.push(row);
        self.data.extend_from_slice(embedding);
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn rows(&self) -> &[ReferenceRow] {
        &self.rows
    }

    pub fn embedding(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub(crate) fn dot(&self, i: usize, q: &[f32]) -> f64 {
        self.embedding(i)
            .iter()
            .zip(q)
            .map(|(a, b)| *a as f64 * *b as f64)
            .sum()
    }

    pub fn users(&self) -> Vec<UserId> {
        let mut u: Vec<UserId> = self.rows.iter().map(|r| r.user.clone()).collect();
        u.sort();
        u.dedup();
        u
    }

    pub fn apps(&self) -> Vec<AppLabel> {
        let mut a: Vec<AppLabel> = self.rows.iter().map(|r| r.app.clone()).collect();
        a.sort();
        a.dedup();
        a
    }

    /// Rows whose application is in `apps`, in original order.
    pub fn filtered(&self, apps: &[AppLabel]) -> Self {
        let mut out = Self::new(self.dim);
        for (i, r) in self.rows.iter().enumerate() {
            if apps.contains(&r.app) {
                out.rows.push(r.clone());
                out.data.extend_from_slice(self.embedding(i));
            }
        }
        out
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut counts = BTreeMap::new();
        for r in &self.rows {
            *counts.entry(r.user.to_string()).or_insert(0) += 1;
        }
        let header = Header {
            schema_version: STORE_SCHEMA_VERSION,
            dim: self.dim,
            users: self.users(),
            apps: self.apps(),
            counts,
            rows: self.rows.clone(),
        };
        let json = serde_json::to_vec(&header)?;
        let mut buf = Vec::with_capacity(16 + json.len() + 4 * self.data.len());
        buf.extend_from_slice(STORE_MAGIC);
        buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
        buf.extend_from_slice(&json);
        for v in &self.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        Ok(buf)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(format!("reference store: {m}"));
        if bytes.len() < 16 || &bytes[..8] != STORE_MAGIC {
            return Err(bad("missing magic"));
        }
        let len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let body = bytes.get(16..16usize.saturating_add(len)).ok_or_else(|| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(body)?;
        if header.schema_version != STORE_SCHEMA_VERSION {
            return Err(bad("unsupported schema version"));
        }
        let payload = &bytes[16 + len..];
        if payload.len() != 4 * header.dim * header.rows.len() {
            return Err(bad("payload size does not match header"));
        }
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Ok(Self { dim: header.dim, rows: header.rows, data })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path).map_err(|e| Error::io(path, e))?)
    }
}
