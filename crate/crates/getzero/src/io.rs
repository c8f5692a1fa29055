//! On-disk formats: embodiment and split JSON, the demo dataset, model
//! checkpoints, run directories and JSON-lines logs.
//!
//! Demo dataset record file (`demos.bin`), little-endian throughout:
//!
//! ```text
//! magic         8 bytes "GETZDEMO"
//! version       u32     DATASET_FORMAT_VERSION
//! history       u32     H, frames per record minus one
//! record_count  u64
//! repeated record_count times, J = joint count of the record's embodiment:
//!   embodiment  u32     index into the manifest's embodiment list
//!   reserved    u32     zero
//!   H + 1 frames, newest first:
//!     joint_angles   f64 * J
//!     target_states  f64 * J
//!     phase          f64
//!   actions     f64 * J
//!   fk          f64 * 2J, joint positions (x, y) in joint order
//! ```
//!
//! Every record of an embodiment has the same width. The manifest
//! (`demos.json`) carries the embodiment graphs, counts, the hash of the
//! generating config and the SHA-256 of `demos.bin`.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use getzero_core::bench::{DemoDataset, DemoRecord, Splits};
use getzero_core::numerics::checkpoint;
use getzero_core::tokenizer::ObservationFrame;
use getzero_core::{EmbodimentGraph, GetConfig, GetModel};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::error::CliError;

pub const DATASET_MAGIC: &[u8; 8] = b"GETZDEMO";
pub const DATASET_FORMAT_VERSION: u32 = 1;
pub const DATASET_BIN: &str = "demos.bin";
pub const DATASET_MANIFEST: &str = "demos.json";
pub const SPLITS_FILE: &str = "splits.json";
pub const EMBODIMENTS_FILE: &str = "embodiments.json";
pub const MODEL_CONFIG: &str = "model.json";
pub const CHECKPOINT_BEST: &str = "best.ckpt";
pub const CHECKPOINT_FINAL: &str = "final.ckpt";
/// Largest difference tolerated when re-deriving FK targets on load.
pub const FK_TOLERANCE: f64 = 1e-9;

/// `git describe`-style build identifier.
pub fn version() -> &'static str {
    match option_env!("GETZERO_GIT_DESCRIBE") {
        Some(v) if !v.is_empty() => v,
        _ => concat!("v", env!("CARGO_PKG_VERSION")),
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn read_bytes(path: &Path) -> Result<Vec<u8>, CliError> {
    fs::read(path).map_err(|e| CliError::io(path, e))
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| CliError::io(path, e))
}

pub fn to_json_bytes<T: Serialize>(value: &T) -> Vec<u8> {
    let mut v = serde_json::to_vec_pretty(value).expect("value serializes");
    v.push(b'\n');
    v
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    write_bytes(path, &to_json_bytes(value))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let bytes = read_bytes(path)?;
    serde_json::from_slice(&bytes).map_err(|e| CliError::Format(format!("{}: {e}", path.display())))
}

pub fn read_config(path: &Path) -> Result<RunConfig, CliError> {
    let bytes = read_bytes(path)?;
    let text = String::from_utf8(bytes).map_err(|_| CliError::Config(format!("{}: not utf-8", path.display())))?;
    RunConfig::from_json(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

/// Provenance written next to every run's outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunInfo {
    pub command: String,
    pub version: String,
    pub config_hash: String,
    pub checkpoint_format: u8,
    pub dataset_format: u32,
}

/// Creates `dir` and writes `config.json` and `run.json` into it.
pub fn prepare_run_dir(dir: &Path, command: &str, config: &RunConfig) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    let json = config.to_json();
    write_bytes(&dir.join("config.json"), json.as_bytes())?;
    let info = RunInfo {
        command: command.to_string(),
        version: version().to_string(),
        config_hash: sha256_hex(json.as_bytes()),
        checkpoint_format: checkpoint::FORMAT_VERSION,
        dataset_format: DATASET_FORMAT_VERSION,
    };
    write_json(&dir.join("run.json"), &info)
}

/// Everything `gen-embodiments` decides.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub pre_filter: usize,
    pub post_filter: usize,
    /// Candidates skipped because the expert could not track on them.
    pub rejected: Vec<String>,
    pub splits: Splits,
}

pub fn write_embodiments(path: &Path, graphs: &[EmbodimentGraph]) -> Result<(), CliError> {
    write_json(path, &graphs)
}

pub fn read_embodiments(path: &Path) -> Result<Vec<EmbodimentGraph>, CliError> {
    read_json(path)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExcludedEmbodiment {
    pub name: String,
    pub probe_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub history: usize,
    pub record_count: usize,
    pub records_per_embodiment: Vec<usize>,
    pub embodiments: Vec<EmbodimentGraph>,
    pub expert_errors: Vec<f64>,
    pub excluded: Vec<ExcludedEmbodiment>,
    pub config_hash: String,
    pub records_sha256: String,
}

fn put_f64s(out: &mut Vec<u8>, xs: &[f64]) {
    for x in xs {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

pub fn encode_records(dataset: &DemoDataset) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(DATASET_MAGIC);
    out.extend_from_slice(&DATASET_FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(dataset.history as u32).to_le_bytes());
    out.extend_from_slice(&(dataset.records.len() as u64).to_le_bytes());
    for r in &dataset.records {
        out.extend_from_slice(&(r.embodiment as u32).to_le_bytes());
        out.extend_from_slice(&0u32.to_le_bytes());
        for f in &r.history {
            put_f64s(&mut out, &f.joint_angles);
            put_f64s(&mut out, &f.target_states);
            put_f64s(&mut out, &[f.phase]);
        }
        put_f64s(&mut out, &r.actions);
        put_f64s(&mut out, &r.fk);
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8], CliError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| CliError::Format("dataset record file truncated".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, CliError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, CliError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>, CliError> {
        let raw = self.take(n.checked_mul(8).ok_or_else(|| CliError::Format("record too large".into()))?)?;
        Ok(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect())
    }
}

pub fn decode_records(bytes: &[u8], embodiments: &[EmbodimentGraph]) -> Result<DemoDataset, CliError> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8)? != DATASET_MAGIC {
        return Err(CliError::Format("not a demo record file (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != DATASET_FORMAT_VERSION {
        return Err(CliError::Format(format!("unsupported dataset format {version}")));
    }
    let history = r.u32()? as usize;
    let count = r.u64()? as usize;
    let mut records = Vec::with_capacity(count.min(bytes.len() / 8));
    for i in 0..count {
        let embodiment = r.u32()? as usize;
        r.u32()?;
        let g = embodiments
            .get(embodiment)
            .ok_or_else(|| CliError::Format(format!("record {i} refers to missing embodiment {embodiment}")))?;
        let n = g.num_joints();
        let mut frames = Vec::with_capacity(history + 1);
        for _ in 0..=history {
            let joint_angles = r.f64s(n)?;
            let target_states = r.f64s(n)?;
            let phase = r.f64s(1)?[0];
            frames.push(ObservationFrame { joint_angles, target_states, phase });
        }
        let actions = r.f64s(n)?;
        let fk = r.f64s(2 * n)?;
        records.push(DemoRecord { embodiment, history: frames, actions, fk });
    }
    if r.pos != bytes.len() {
        return Err(CliError::Format(format!("{} trailing bytes in record file", bytes.len() - r.pos)));
    }
    Ok(DemoDataset { history, embodiments: embodiments.to_vec(), records })
}

pub fn write_dataset(
    dir: &Path,
    dataset: &DemoDataset,
    expert_errors: &[f64],
    excluded: Vec<ExcludedEmbodiment>,
    config_hash: String,
) -> Result<DatasetManifest, CliError> {
    let bin = encode_records(dataset);
    let manifest = DatasetManifest {
        format_version: DATASET_FORMAT_VERSION,
        history: dataset.history,
        record_count: dataset.records.len(),
        records_per_embodiment: dataset.records_per_embodiment(),
        embodiments: dataset.embodiments.clone(),
        expert_errors: expert_errors.to_vec(),
        excluded,
        config_hash,
        records_sha256: sha256_hex(&bin),
    };
    write_bytes(&dir.join(DATASET_BIN), &bin)?;
    write_json(&dir.join(DATASET_MANIFEST), &manifest)?;
    Ok(manifest)
}

/// Loads a dataset, checks its digest and counts, and re-derives every FK
/// target from the stored angles.
pub fn read_dataset(dir: &Path) -> Result<(DatasetManifest, DemoDataset), CliError> {
    let manifest: DatasetManifest = read_json(&dir.join(DATASET_MANIFEST))?;
    let bin = read_bytes(&dir.join(DATASET_BIN))?;
    if sha256_hex(&bin) != manifest.records_sha256 {
        return Err(CliError::Format(format!("{}: digest does not match manifest", dir.join(DATASET_BIN).display())));
    }
    let dataset = decode_records(&bin, &manifest.embodiments)?;
    if dataset.history != manifest.history || dataset.records.len() != manifest.record_count {
        return Err(CliError::Format("dataset header disagrees with manifest".into()));
    }
    dataset.verify(FK_TOLERANCE).map_err(|e| CliError::Format(format!("{}: {e}", dir.display())))?;
    Ok((manifest, dataset))
}

pub fn write_checkpoint(dir: &Path, file: &str, model: &GetModel) -> Result<(), CliError> {
    write_json(&dir.join(MODEL_CONFIG), model.config())?;
    write_bytes(&dir.join(file), &checkpoint::encode(model.params()))
}

/// Loads `file` from a training run directory; the model config comes from
/// the `model.json` next to it.
pub fn read_checkpoint(dir: &Path, file: &str) -> Result<GetModel, CliError> {
    let config: GetConfig = read_json(&dir.join(MODEL_CONFIG))?;
    let path = dir.join(file);
    let store = checkpoint::decode(&read_bytes(&path)?).map_err(|e| CliError::Format(format!("{}: {e}", path.display())))?;
    GetModel::from_params(config, &store).map_err(|e| CliError::Format(format!("{}: {e}", path.display())))
}

/// Append-only JSON-lines writer.
pub struct JsonlWriter {
    path: PathBuf,
    out: BufWriter<fs::File>,
}

impl JsonlWriter {
    pub fn create(path: &Path) -> Result<Self, CliError> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
        }
        let f = fs::OpenOptions::new().create(true).append(true).open(path).map_err(|e| CliError::io(path, e))?;
        Ok(Self { path: path.to_path_buf(), out: BufWriter::new(f) })
    }

    pub fn write<T: Serialize>(&mut self, value: &T) -> Result<(), CliError> {
        serde_json::to_writer(&mut self.out, value).map_err(|e| CliError::Format(e.to_string()))?;
        self.out.write_all(b"\n").map_err(|e| CliError::io(&self.path, e))
    }

    pub fn flush(&mut self) -> Result<(), CliError> {
        self.out.flush().map_err(|e| CliError::io(&self.path, e))
    }
}
