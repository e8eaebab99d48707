//! Dataset records, line-delimited container files, sequence-identity
//! filtering and checkpoint persistence.
//!
//! All container files are UTF-8 text: a one-line JSON header carrying the
//! schema name, version and conventions, then one JSON record per line.
//! Writes are atomic (temp file + rename) and byte-deterministic given
//! identical inputs. Checkpoints are a binary container with a SHA-256
//! trailer so truncation and corruption are detected, never misread.

use serde::{de::DeserializeOwned, Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use thiserror::Error;

use crate::denoiser::{ArchConfig, ParamVector};
use crate::kernels::{CdrState, ComplexContext, ResidueState};
use crate::so3::Rotation;

pub const DATASET_SCHEMA: &str = "cdrflow/dataset";
pub const REWARDS_SCHEMA: &str = "cdrflow/rewards";
pub const SAMPLES_SCHEMA: &str = "cdrflow/samples";
pub const EVAL_SCHEMA: &str = "cdrflow/eval";
pub const CONTAINER_VERSION: u32 = 1;
const CHECKPOINT_MAGIC: &[u8; 8] = b"CDRFCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Region tags in canonical order.
pub const REGIONS: [&str; 6] = ["H1", "H2", "H3", "L1", "L2", "L3"];

#[derive(Debug, Error)]
pub enum DataError {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}:{line}: malformed record: {msg}")]
    Malformed {
        path: PathBuf,
        line: usize,
        msg: String,
    },
    #[error("{path}:{line}: invalid field `{field}`: {msg}")]
    Invalid {
        path: PathBuf,
        line: usize,
        field: &'static str,
        msg: String,
    },
    #[error("{path}: header schema mismatch: found {found:?}, expected {expected:?}")]
    Schema {
        path: PathBuf,
        found: String,
        expected: String,
    },
    #[error("checkpoint {path}: digest mismatch (file corrupt or truncated)")]
    ChecksumMismatch { path: PathBuf },
    #[error("checkpoint {path}: format version {found}, expected {expected}")]
    Version {
        path: PathBuf,
        found: u32,
        expected: u32,
    },
    #[error(
        "checkpoint {path}: architecture mismatch: file has {file:?}, runtime expects {runtime:?}"
    )]
    ArchMismatch {
        path: PathBuf,
        file: ArchConfig,
        runtime: ArchConfig,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Write `bytes` atomically: temp file in the same directory, then rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), DataError> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    std::fs::create_dir_all(dir).map_err(io_err(path))?;
    let tmp = dir.join(format!(
        ".{}.tmp",
        path.file_name().map(|s| s.to_string_lossy()).unwrap_or_default()
    ));
    {
        let mut f = std::fs::File::create(&tmp).map_err(io_err(&tmp))?;
        f.write_all(bytes).map_err(io_err(&tmp))?;
        f.sync_all().map_err(io_err(&tmp))?;
    }
    std::fs::rename(&tmp, path).map_err(io_err(path))?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Container files
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContainerHeader {
    pub schema: String,
    pub version: u32,
    /// Free-form convention notes (centering, units, alpha, digests...).
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub meta: BTreeMap<String, String>,
}

impl ContainerHeader {
    pub fn new(schema: &str) -> ContainerHeader {
        ContainerHeader {
            schema: schema.to_string(),
            version: CONTAINER_VERSION,
            meta: BTreeMap::new(),
        }
    }

    pub fn with(mut self, key: &str, value: impl ToString) -> ContainerHeader {
        self.meta.insert(key.to_string(), value.to_string());
        self
    }
}

/// Serialize a header plus records as JSON lines.
pub fn write_container<T: Serialize>(
    path: &Path,
    header: &ContainerHeader,
    records: &[T],
) -> Result<(), DataError> {
    let mut out = String::new();
    out.push_str(&serde_json::to_string(header).expect("header serializes"));
    out.push('\n');
    for r in records {
        out.push_str(&serde_json::to_string(r).expect("record serializes"));
        out.push('\n');
    }
    write_atomic(path, out.as_bytes())
}

/// Read a container, checking the schema name.
pub fn read_container<T: DeserializeOwned>(
    path: &Path,
    expected_schema: &str,
) -> Result<(ContainerHeader, Vec<T>), DataError> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    let mut lines = text.lines().enumerate();
    let (_, header_line) = lines.next().ok_or_else(|| DataError::Malformed {
        path: path.to_path_buf(),
        line: 1,
        msg: "empty file; expected a header line".into(),
    })?;
    let header: ContainerHeader =
        serde_json::from_str(header_line).map_err(|e| DataError::Malformed {
            path: path.to_path_buf(),
            line: 1,
            msg: e.to_string(),
        })?;
    if header.schema != expected_schema {
        return Err(DataError::Schema {
            path: path.to_path_buf(),
            found: header.schema,
            expected: expected_schema.to_string(),
        });
    }
    let mut records = Vec::new();
    for (idx, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let record: T = serde_json::from_str(line).map_err(|e| DataError::Malformed {
            path: path.to_path_buf(),
            line: idx + 1,
            msg: e.to_string(),
        })?;
        records.push(record);
    }
    Ok((header, records))
}

// ---------------------------------------------------------------------------
// Dataset records
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidueRecord {
    pub chain: String,
    pub aa: char,
    pub pos: [f64; 3],
    /// Unit quaternion (w, x, y, z), w ≥ 0.
    pub quat: [f64; 4],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComplexRecord {
    pub id: String,
    pub residues: Vec<ResidueRecord>,
    /// Region tag → (l, m): the CDR occupies 0-based indices l..l+m.
    pub cdr_regions: BTreeMap<String, (usize, usize)>,
    /// Reference binding energies per region, when known.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub ref_energies: BTreeMap<String, f64>,
}

impl ComplexRecord {
    /// Reference CDR sequence of a region.
    pub fn region_sequence(&self, region: &str) -> Option<String> {
        let &(l, m) = self.cdr_regions.get(region)?;
        Some(self.residues[l..l + m].iter().map(|r| r.aa).collect())
    }

    /// Split into the frozen context and the reference CDR state for one
    /// region.
    pub fn split_region(&self, region: &str) -> Option<(ComplexContext, CdrState)> {
        let &(l, m) = self.cdr_regions.get(region)?;
        let to_state = |r: &ResidueRecord| ResidueState {
            dtype: crate::aa_index(r.aa).expect("validated alphabet"),
            pos: nalgebra::Vector3::new(r.pos[0], r.pos[1], r.pos[2]),
            ori: Rotation::from_quaternion(r.quat).expect("validated quaternion"),
        };
        let cdr = CdrState {
            t: 0,
            residues: self.residues[l..l + m].iter().map(to_state).collect(),
        };
        let mut context = Vec::with_capacity(self.residues.len() - m);
        for (i, r) in self.residues.iter().enumerate() {
            if i < l || i >= l + m {
                context.push(to_state(r));
            }
        }
        Some((
            ComplexContext {
                residues: context,
                cdr_span: (l, m),
            },
            cdr,
        ))
    }

    /// The two anchor residues flanking a region, if both exist.
    pub fn region_anchors(&self, region: &str) -> Option<(ResidueState, ResidueState)> {
        let &(l, m) = self.cdr_regions.get(region)?;
        if l == 0 || l + m >= self.residues.len() {
            return None;
        }
        let to_state = |r: &ResidueRecord| ResidueState {
            dtype: crate::aa_index(r.aa).expect("validated alphabet"),
            pos: nalgebra::Vector3::new(r.pos[0], r.pos[1], r.pos[2]),
            ori: Rotation::from_quaternion(r.quat).expect("validated quaternion"),
        };
        Some((
            to_state(&self.residues[l - 1]),
            to_state(&self.residues[l + m]),
        ))
    }

    fn validate(&self, path: &Path, line: usize) -> Result<(), DataError> {
        let n = self.residues.len();
        let bad = |field: &'static str, msg: String| DataError::Invalid {
            path: path.to_path_buf(),
            line,
            field,
            msg,
        };
        if n == 0 {
            return Err(bad("residues", "record has no residues".into()));
        }
        for r in &self.residues {
            if crate::aa_index(r.aa).is_none() {
                return Err(bad(
                    "aa",
                    format!("{:?} not in the 20-letter alphabet", r.aa),
                ));
            }
            let norm2: f64 = r.quat.iter().map(|q| q * q).sum();
            if (norm2.sqrt() - 1.0).abs() > 1e-6 {
                return Err(bad(
                    "quat",
                    format!("norm {} deviates from 1 by more than 1e-6", norm2.sqrt()),
                ));
            }
            if r.pos.iter().any(|v| !v.is_finite()) {
                return Err(bad("pos", "non-finite coordinate".into()));
            }
        }
        let mut spans: Vec<(usize, usize, &str)> = Vec::new();
        for (tag, &(l, m)) in &self.cdr_regions {
            if m == 0 || l + m > n {
                return Err(bad(
                    "cdr_regions",
                    format!("region {tag}: span ({l}, {m}) out of bounds for {n} residues"),
                ));
            }
            spans.push((l, l + m, tag));
        }
        spans.sort();
        for pair in spans.windows(2) {
            if pair[0].1 > pair[1].0 {
                return Err(bad(
                    "cdr_regions",
                    format!("regions {} and {} overlap", pair[0].2, pair[1].2),
                ));
            }
        }
        Ok(())
    }
}

/// Write a dataset with the standard header (centering convention, units).
pub fn write_dataset(path: &Path, records: &[ComplexRecord]) -> Result<(), DataError> {
    let header = ContainerHeader::new(DATASET_SCHEMA)
        .with("centering", "complex centroid at origin")
        .with("units", "angstrom")
        .with("prior_frame", "CDR anchor midpoint");
    write_container(path, &header, records)
}

/// Parse and validate a dataset. Positions are re-centered so each complex
/// centroid sits at the origin (a no-op when already centered, preserving
/// byte-level round trips).
pub fn parse_dataset(path: &Path) -> Result<Vec<ComplexRecord>, DataError> {
    let (_, mut records): (_, Vec<ComplexRecord>) = read_container(path, DATASET_SCHEMA)?;
    for (i, rec) in records.iter_mut().enumerate() {
        // Header occupies line 1; record i sits on line i+2.
        rec.validate(path, i + 2)?;
        let n = rec.residues.len() as f64;
        let mut centroid = [0.0f64; 3];
        for r in &rec.residues {
            for k in 0..3 {
                centroid[k] += r.pos[k];
            }
        }
        for c in &mut centroid {
            *c /= n;
        }
        let norm = centroid.iter().map(|c| c * c).sum::<f64>().sqrt();
        if norm > 1e-9 {
            for r in &mut rec.residues {
                for k in 0..3 {
                    r.pos[k] -= centroid[k];
                }
            }
        }
    }
    Ok(records)
}

// ---------------------------------------------------------------------------
// Sequence identity
// ---------------------------------------------------------------------------

/// Ungapped sliding identity: best match count over all offsets, divided by
/// the shorter length. Symmetric by construction.
pub fn sequence_identity(a: &str, b: &str) -> f64 {
    let (a, b): (Vec<char>, Vec<char>) = (a.chars().collect(), b.chars().collect());
    if a.is_empty() || b.is_empty() {
        return 0.0;
    }
    let denom = a.len().min(b.len()) as f64;
    let mut best = 0usize;
    let (na, nb) = (a.len() as isize, b.len() as isize);
    for offset in -(nb - 1)..na {
        let mut matches = 0usize;
        for j in 0..nb {
            let i = offset + j;
            if i >= 0 && i < na && a[i as usize] == b[j as usize] {
                matches += 1;
            }
        }
        best = best.max(matches);
    }
    best as f64 / denom
}

/// Drop any record whose region sequence has identity ≥ `threshold` with
/// any query sequence.
pub fn sequence_identity_filter(
    records: Vec<ComplexRecord>,
    queries: &[String],
    region: &str,
    threshold: f64,
) -> Vec<ComplexRecord> {
    assert!(threshold > 0.0 && threshold <= 1.0);
    records
        .into_iter()
        .filter(|rec| {
            let Some(seq) = rec.region_sequence(region) else {
                return true;
            };
            !queries
                .iter()
                .any(|q| sequence_identity(&seq, q) >= threshold)
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Reward cache and sample records
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardRecord {
    pub id: String,
    pub region: String,
    pub energy: f64,
    pub reward: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub id: String,
    pub region: String,
    pub seed: u64,
    pub sequence: String,
    pub positions: Vec<[f64; 3]>,
    pub quats: Vec<[f64; 4]>,
    /// Interface (binding) energy ΔG of the sample.
    pub energy: f64,
    /// ΔG plus intra-CDR clash terms.
    pub e_total: f64,
    pub reward: f64,
}

impl SampleRecord {
    pub fn to_cdr_state(&self) -> CdrState {
        CdrState {
            t: 0,
            residues: self
                .sequence
                .chars()
                .zip(self.positions.iter().zip(&self.quats))
                .map(|(aa, (pos, quat))| ResidueState {
                    dtype: crate::aa_index(aa).expect("sample uses the alphabet"),
                    pos: nalgebra::Vector3::new(pos[0], pos[1], pos[2]),
                    ori: Rotation::from_quaternion(*quat).expect("unit quaternion"),
                })
                .collect(),
        }
    }
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub arch: ArchConfig,
    pub t_total: usize,
    pub schedule_digest: String,
    /// Next training step index (for exact resume).
    pub next_step: u64,
    pub tb_steps_done: u64,
}

/// Versioned binary container: magic, format version, JSON header
/// (arch + metadata), raw little-endian f64 parameters, SHA-256 trailer
/// over everything before it.
pub fn save_checkpoint(
    path: &Path,
    params: &ParamVector,
    meta: &CheckpointMeta,
) -> Result<(), DataError> {
    assert_eq!(meta.arch, params.arch, "metadata arch must match params");
    let header = serde_json::to_vec(meta).expect("meta serializes");
    let mut bytes = Vec::with_capacity(header.len() + params.data.len() * 8 + 64);
    bytes.extend_from_slice(CHECKPOINT_MAGIC);
    bytes.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    bytes.extend_from_slice(&(header.len() as u64).to_le_bytes());
    bytes.extend_from_slice(&header);
    bytes.extend_from_slice(&(params.data.len() as u64).to_le_bytes());
    for v in &params.data {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    let digest = Sha256::digest(&bytes);
    bytes.extend_from_slice(&digest);
    write_atomic(path, &bytes)
}

/// Bit-exact reload; rejects corrupt files, wrong format versions and
/// architecture mismatches.
pub fn load_checkpoint(
    path: &Path,
    expected_arch: &ArchConfig,
) -> Result<(ParamVector, CheckpointMeta), DataError> {
    let bytes = std::fs::read(path).map_err(io_err(path))?;
    let corrupt = || DataError::ChecksumMismatch {
        path: path.to_path_buf(),
    };
    if bytes.len() < CHECKPOINT_MAGIC.len() + 4 + 8 + 8 + 32 {
        return Err(corrupt());
    }
    let (body, trailer) = bytes.split_at(bytes.len() - 32);
    let digest = Sha256::digest(body);
    if digest.as_slice() != trailer {
        return Err(corrupt());
    }
    let mut at = 0usize;
    if &body[..8] != CHECKPOINT_MAGIC {
        return Err(corrupt());
    }
    at += 8;
    let version = u32::from_le_bytes(body[at..at + 4].try_into().expect("4 bytes"));
    at += 4;
    if version != CHECKPOINT_VERSION {
        return Err(DataError::Version {
            path: path.to_path_buf(),
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let header_len = u64::from_le_bytes(body[at..at + 8].try_into().expect("8 bytes")) as usize;
    at += 8;
    if body.len() < at + header_len + 8 {
        return Err(corrupt());
    }
    let meta: CheckpointMeta =
        serde_json::from_slice(&body[at..at + header_len]).map_err(|_| corrupt())?;
    at += header_len;
    let n = u64::from_le_bytes(body[at..at + 8].try_into().expect("8 bytes")) as usize;
    at += 8;
    if body.len() != at + n * 8 {
        return Err(corrupt());
    }
    if meta.arch != *expected_arch {
        return Err(DataError::ArchMismatch {
            path: path.to_path_buf(),
            file: meta.arch,
            runtime: *expected_arch,
        });
    }
    let mut data = Vec::with_capacity(n);
    for i in 0..n {
        data.push(f64::from_le_bytes(
            body[at + i * 8..at + (i + 1) * 8].try_into().expect("8 bytes"),
        ));
    }
    let params = ParamVector {
        arch: meta.arch,
        data,
    };
    params.validate().map_err(|_| DataError::ArchMismatch {
        path: path.to_path_buf(),
        file: meta.arch,
        runtime: *expected_arch,
    })?;
    Ok((params, meta))
}
