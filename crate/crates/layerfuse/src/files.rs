//! Device, plan and weight files, digests and atomic output.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use layerfuse_core::sim::{ConvWeights, WeightSet};
use layerfuse_core::{DeviceSpec, Graph, TilingPlan};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, thiserror::Error)]
pub enum FileError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: line {line}, column {column}: {message}")]
    Syntax { path: PathBuf, line: usize, column: usize, message: String },
    #[error("{path}: {message}")]
    Invalid { path: PathBuf, message: String },
}

impl FileError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        FileError::Io { path: path.to_path_buf(), source }
    }

    fn syntax(path: &Path, text: &str, e: &toml::de::Error) -> Self {
        let at = e.span().map_or(0, |s| s.start).min(text.len());
        let line = text[..at].matches('\n').count() + 1;
        let column = at - text[..at].rfind('\n').map_or(0, |i| i + 1) + 1;
        FileError::Syntax { path: path.to_path_buf(), line, column, message: e.message().to_string() }
    }

    fn invalid(path: &Path, message: impl Into<String>) -> Self {
        FileError::Invalid { path: path.to_path_buf(), message: message.into() }
    }
}

pub fn read_text(path: &Path) -> Result<String, FileError> {
    fs::read_to_string(path).map_err(|e| FileError::io(path, e))
}

/// Hex SHA-256 of a byte string.
pub fn digest(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Writes through a temporary file in the destination directory and
/// renames it into place, so readers never see a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), FileError> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    fs::create_dir_all(dir).map_err(|e| FileError::io(dir, e))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| FileError::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| FileError::io(path, e))?;
    tmp.as_file().sync_all().map_err(|e| FileError::io(path, e))?;
    tmp.persist(path).map_err(|e| FileError::io(path, e.error))?;
    Ok(())
}

pub fn parse_device(path: &Path, text: &str) -> Result<DeviceSpec, FileError> {
    let d: DeviceSpec = toml::from_str(text).map_err(|e| FileError::syntax(path, text, &e))?;
    d.check().map_err(|e| FileError::invalid(path, e.to_string()))?;
    Ok(d)
}

pub fn serialize_device(d: &DeviceSpec) -> String {
    toml::to_string(d).expect("device specs always serialize")
}

/// Provenance recorded with every plan.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlanMeta {
    pub tool_version: String,
    pub graph_digest: String,
    pub device_digest: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanFile {
    pub meta: PlanMeta,
    pub plan: TilingPlan,
}

impl PlanFile {
    /// `<graph>.block<id>.plan`, with the graph name made file-safe.
    pub fn file_name(&self) -> String {
        format!("{}.block{}.plan", safe_name(&self.plan.graph), self.plan.block_id)
    }
}

pub fn safe_name(name: &str) -> String {
    name.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' }).collect()
}

pub fn serialize_plan(p: &PlanFile) -> String {
    toml::to_string(p).expect("plans always serialize")
}

pub fn parse_plan(path: &Path, text: &str) -> Result<PlanFile, FileError> {
    toml::from_str(text).map_err(|e| FileError::syntax(path, text, &e))
}

/// Reads one plan file, or every `*.plan` file of a directory in name order.
pub fn read_plans(path: &Path) -> Result<Vec<PlanFile>, FileError> {
    let files = if path.is_dir() {
        let mut v: Vec<PathBuf> = fs::read_dir(path)
            .map_err(|e| FileError::io(path, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "plan"))
            .collect();
        v.sort();
        v
    } else {
        vec![path.to_path_buf()]
    };
    files.iter().map(|f| parse_plan(f, &read_text(f)?)).collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WeightEntry {
    pub layer: String,
    /// `filter` or `bias`.
    pub role: String,
    pub dims: Vec<usize>,
    /// Offset into the data file, in elements.
    pub offset: usize,
}

/// Manifest of a weight file: the data file is a little-endian f32 stream
/// holding the listed tensors back to back.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WeightManifest {
    pub format: String,
    pub data: String,
    pub elements: usize,
    pub tensors: Vec<WeightEntry>,
}

const WEIGHT_FORMAT: &str = "f32-le";

/// Writes `<stem>.weights` (data) and `<stem>.weights.toml` (manifest).
pub fn write_weights(g: &Graph, w: &WeightSet, dir: &Path, stem: &str) -> Result<PathBuf, FileError> {
    let data_name = format!("{stem}.weights");
    let mut bytes = Vec::new();
    let mut tensors = Vec::new();
    let mut offset = 0;
    for l in &g.layers {
        let (Some(c), Some(cw)) = (l.conv(), w.get(&l.name)) else { continue };
        let filter_dims = vec![c.out_channels, c.in_per_group(), c.kernel_h, c.kernel_w];
        for (role, dims, vals) in [("filter", filter_dims, &cw.filter), ("bias", vec![cw.bias.len()], &cw.bias)] {
            if vals.is_empty() {
                continue;
            }
            tensors.push(WeightEntry { layer: l.name.clone(), role: role.into(), dims, offset });
            offset += vals.len();
            for v in vals {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    let manifest = WeightManifest { format: WEIGHT_FORMAT.into(), data: data_name.clone(), elements: offset, tensors };
    write_atomic(&dir.join(&data_name), &bytes)?;
    let mpath = dir.join(format!("{stem}.weights.toml"));
    write_atomic(&mpath, toml::to_string(&manifest).expect("manifests serialize").as_bytes())?;
    Ok(mpath)
}

/// Reads a weight manifest and its data file, checking every tensor
/// against the graph's conv parameters.
pub fn read_weights(manifest_path: &Path, g: &Graph) -> Result<WeightSet, FileError> {
    let text = read_text(manifest_path)?;
    let m: WeightManifest = toml::from_str(&text).map_err(|e| FileError::syntax(manifest_path, &text, &e))?;
    if m.format != WEIGHT_FORMAT {
        return Err(FileError::invalid(manifest_path, format!("unsupported format `{}`", m.format)));
    }
    let data_path = manifest_path.parent().unwrap_or(Path::new(".")).join(&m.data);
    let bytes = fs::read(&data_path).map_err(|e| FileError::io(&data_path, e))?;
    if bytes.len() != m.elements * 4 {
        return Err(FileError::invalid(
            &data_path,
            format!("expected {} bytes, found {}", m.elements * 4, bytes.len()),
        ));
    }
    let values: Vec<f32> = bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
    let mut w = WeightSet::default();
    for t in &m.tensors {
        let n: usize = t.dims.iter().product();
        let slice = values
            .get(t.offset..t.offset + n)
            .ok_or_else(|| FileError::invalid(manifest_path, format!("`{}` {} runs past the data", t.layer, t.role)))?;
        let entry = w
            .layers
            .entry(t.layer.clone())
            .or_insert_with(|| ConvWeights { filter: Vec::new(), bias: Vec::new() });
        match t.role.as_str() {
            "filter" => entry.filter = slice.to_vec(),
            "bias" => entry.bias = slice.to_vec(),
            other => return Err(FileError::invalid(manifest_path, format!("unknown tensor role `{other}`"))),
        }
    }
    let bad = w.mismatches(g);
    if !bad.is_empty() {
        return Err(FileError::invalid(manifest_path, format!("weights missing or mis-sized for {bad:?}")));
    }
    Ok(w)
}
