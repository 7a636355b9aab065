//! On-disk cache of hidden-state tensors.
//!
//! A store is a directory holding `manifest.json` and `data.bin`. The data file
//! starts with the 8-byte magic `HSTORE01` followed by one contiguous
//! little-endian payload per record, laid out row-major as
//! `[layer, token, dim]`. Token counts, labels and splits live in the manifest;
//! padding never touches disk; masks are synthesized at batch time.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use half::f16;
use serde::{Deserialize, Serialize};

use crate::error::{ProbeError, Result};
use crate::real::Real;

pub const FORMAT_VERSION: u32 = 1;
pub const MAGIC: &[u8; 8] = b"HSTORE01";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const DATA_FILE: &str = "data.bin";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    F16,
}

impl DType {
    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F16 => 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

impl std::str::FromStr for Split {
    type Err = ProbeError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(ProbeError::Config(format!("unknown split {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordIndex {
    pub id: String,
    pub t: usize,
    pub label: usize,
    pub byte_offset: u64,
    pub byte_length: u64,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HStoreManifest {
    pub format_version: u32,
    pub d: usize,
    pub n_layers: usize,
    pub dtype: DType,
    pub label_names: Vec<String>,
    pub records: Vec<RecordIndex>,
    /// Free-form notes from whoever produced the store (backbone, norm
    /// convention, synthetic oracle estimates). Never interpreted by the engine.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub provenance: BTreeMap<String, serde_json::Value>,
}

impl HStoreManifest {
    /// A manifest header with no records yet.
    pub fn new(d: usize, n_layers: usize, dtype: DType, label_names: Vec<String>) -> Self {
        HStoreManifest {
            format_version: FORMAT_VERSION,
            d,
            n_layers,
            dtype,
            label_names,
            records: Vec::new(),
            provenance: BTreeMap::new(),
        }
    }

    pub fn n_classes(&self) -> usize {
        self.label_names.len()
    }

    pub fn record_bytes(&self, t: usize) -> u64 {
        (self.n_layers * t * self.d * self.dtype.size()) as u64
    }

    fn validate_header(&self) -> Result<()> {
        if self.format_version != FORMAT_VERSION {
            return Err(ProbeError::UnsupportedVersion {
                found: self.format_version,
                expected: FORMAT_VERSION,
            });
        }
        if self.d == 0 || self.n_layers == 0 {
            return Err(ProbeError::Config(format!(
                "store dims must be positive (d = {}, n_layers = {})",
                self.d, self.n_layers
            )));
        }
        if self.label_names.len() < 2 {
            return Err(ProbeError::Config(
                "a store needs at least two label names".into(),
            ));
        }
        Ok(())
    }

    /// Checks every record entry against the header and the data file length.
    pub fn validate(&self, file_len: u64) -> Result<()> {
        self.validate_header()?;
        let mut seen = HashSet::with_capacity(self.records.len());
        for rec in &self.records {
            if !seen.insert(rec.id.as_str()) {
                return Err(ProbeError::DuplicateId(rec.id.clone()));
            }
            if rec.t == 0 {
                return Err(ProbeError::Shape(format!("record {} has t = 0", rec.id)));
            }
            if rec.label >= self.n_classes() {
                return Err(ProbeError::Shape(format!(
                    "record {} has label {} but only {} classes",
                    rec.id,
                    rec.label,
                    self.n_classes()
                )));
            }
            if rec.byte_length != self.record_bytes(rec.t) {
                return Err(ProbeError::Shape(format!(
                    "record {}: byte_length {} does not match n_layers*t*d*dtype = {}",
                    rec.id,
                    rec.byte_length,
                    self.record_bytes(rec.t)
                )));
            }
            if rec.byte_offset < MAGIC.len() as u64 {
                return Err(ProbeError::OffsetOutOfRange {
                    id: rec.id.clone(),
                    offset: rec.byte_offset,
                });
            }
            let end = rec.byte_offset + rec.byte_length;
            if end > file_len {
                return Err(ProbeError::Truncated {
                    id: rec.id.clone(),
                    end,
                    file_len,
                });
            }
        }
        Ok(())
    }
}

/// One example's activations: `[n_layers, t, d]` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct HiddenStateRecord {
    pub id: String,
    pub split: Split,
    pub label: usize,
    pub n_layers: usize,
    pub t: usize,
    pub d: usize,
    pub tensor: Vec<f32>,
    pub valid_mask: Vec<bool>,
}

impl HiddenStateRecord {
    /// Builds a record where every position is a real token.
    pub fn new(
        id: impl Into<String>,
        split: Split,
        label: usize,
        n_layers: usize,
        t: usize,
        d: usize,
        tensor: Vec<f32>,
    ) -> Result<Self> {
        let rec = HiddenStateRecord {
            id: id.into(),
            split,
            label,
            n_layers,
            t,
            d,
            tensor,
            valid_mask: vec![true; t],
        };
        rec.validate()?;
        Ok(rec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.tensor.len() != self.n_layers * self.t * self.d {
            return Err(ProbeError::Shape(format!(
                "record {}: tensor has {} values, expected {}x{}x{}",
                self.id,
                self.tensor.len(),
                self.n_layers,
                self.t,
                self.d
            )));
        }
        if self.valid_mask.len() != self.t {
            return Err(ProbeError::Shape(format!(
                "record {}: mask length {} != t {}",
                self.id,
                self.valid_mask.len(),
                self.t
            )));
        }
        if !self.valid_mask.iter().any(|&v| v) {
            return Err(ProbeError::EmptyMask(format!("record {}", self.id)));
        }
        if let Some(pos) = self.tensor.iter().position(|v| !v.is_finite()) {
            return Err(ProbeError::NonFinite(format!(
                "record {} at flat index {pos}",
                self.id
            )));
        }
        Ok(())
    }

    pub fn layer(&self, l: usize) -> &[f32] {
        let n = self.t * self.d;
        &self.tensor[l * n..(l + 1) * n]
    }
}

/// Streams records into a new store. Single writer; the manifest is written on
/// [`StoreWriter::finish`].
pub struct StoreWriter {
    dir: PathBuf,
    data: BufWriter<File>,
    manifest: HStoreManifest,
    offset: u64,
    ids: HashSet<String>,
}

impl StoreWriter {
    pub fn create(dir: impl AsRef<Path>, mut header: HStoreManifest) -> Result<Self> {
        let dir = dir.as_ref().to_path_buf();
        header.format_version = FORMAT_VERSION;
        header.records.clear();
        header.validate_header()?;
        std::fs::create_dir_all(&dir).map_err(|e| ProbeError::io(&dir, e))?;
        let path = dir.join(DATA_FILE);
        let file = File::create(&path).map_err(|e| ProbeError::io(&path, e))?;
        let mut data = BufWriter::new(file);
        data.write_all(MAGIC).map_err(|e| ProbeError::io(&path, e))?;
        Ok(StoreWriter {
            dir,
            data,
            manifest: header,
            offset: MAGIC.len() as u64,
            ids: HashSet::new(),
        })
    }

    pub fn manifest_mut(&mut self) -> &mut HStoreManifest {
        &mut self.manifest
    }

    pub fn push(&mut self, rec: &HiddenStateRecord) -> Result<()> {
        if rec.n_layers != self.manifest.n_layers || rec.d != self.manifest.d {
            return Err(ProbeError::Shape(format!(
                "record {} is [{}, {}, {}] but the store is [{}, _, {}]",
                rec.id, rec.n_layers, rec.t, rec.d, self.manifest.n_layers, self.manifest.d
            )));
        }
        rec.validate()?;
        if rec.valid_mask.iter().any(|&v| !v) {
            return Err(ProbeError::Shape(format!(
                "record {}: stores hold real tokens only, strip padding before writing",
                rec.id
            )));
        }
        if rec.label >= self.manifest.n_classes() {
            return Err(ProbeError::Shape(format!(
                "record {}: label {} out of range",
                rec.id, rec.label
            )));
        }
        if !self.ids.insert(rec.id.clone()) {
            return Err(ProbeError::DuplicateId(rec.id.clone()));
        }

        let bytes = encode_payload(&rec.tensor, self.manifest.dtype, &rec.id)?;
        let path = self.dir.join(DATA_FILE);
        self.data
            .write_all(&bytes)
            .map_err(|e| ProbeError::io(&path, e))?;
        self.manifest.records.push(RecordIndex {
            id: rec.id.clone(),
            t: rec.t,
            label: rec.label,
            byte_offset: self.offset,
            byte_length: bytes.len() as u64,
            split: rec.split,
        });
        self.offset += bytes.len() as u64;
        Ok(())
    }

    pub fn finish(mut self) -> Result<HStoreManifest> {
        let data_path = self.dir.join(DATA_FILE);
        self.data
            .flush()
            .map_err(|e| ProbeError::io(&data_path, e))?;
        let path = self.dir.join(MANIFEST_FILE);
        let json = serde_json::to_string_pretty(&self.manifest)
            .map_err(|e| ProbeError::json(&path, e))?;
        std::fs::write(&path, json).map_err(|e| ProbeError::io(&path, e))?;
        Ok(self.manifest)
    }
}

fn encode_payload(values: &[f32], dtype: DType, id: &str) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(values.len() * dtype.size());
    match dtype {
        DType::F32 => {
            for v in values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        DType::F16 => {
            for (i, &v) in values.iter().enumerate() {
                let h = f16::from_f32(v);
                if !h.is_finite() {
                    return Err(ProbeError::NonFinite(format!(
                        "record {id}: value {v} at flat index {i} overflows f16"
                    )));
                }
                out.extend_from_slice(&h.to_le_bytes());
            }
        }
    }
    Ok(out)
}

fn decode_payload(bytes: &[u8], dtype: DType) -> Vec<f32> {
    match dtype {
        DType::F32 => bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect(),
        DType::F16 => bytes
            .chunks_exact(2)
            .map(|c| f16::from_le_bytes([c[0], c[1]]).to_f32())
            .collect(),
    }
}

/// Writes a complete store from a header and a record stream.
pub fn write_store(
    dir: impl AsRef<Path>,
    header: HStoreManifest,
    records: impl IntoIterator<Item = HiddenStateRecord>,
) -> Result<HStoreManifest> {
    let mut writer = StoreWriter::create(dir, header)?;
    for rec in records {
        writer.push(&rec)?;
    }
    writer.finish()
}

/// Read-only handle on a store. Records are decoded on demand with positional
/// reads, so a `&Store` can be shared across threads.
#[derive(Debug)]
pub struct Store {
    dir: PathBuf,
    manifest: HStoreManifest,
    data: File,
    by_id: HashMap<String, usize>,
}

impl Store {
    pub fn open(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref().to_path_buf();
        let manifest_path = dir.join(MANIFEST_FILE);
        let text =
            std::fs::read_to_string(&manifest_path).map_err(|e| ProbeError::io(&manifest_path, e))?;
        let manifest: HStoreManifest =
            serde_json::from_str(&text).map_err(|e| ProbeError::json(&manifest_path, e))?;

        let data_path = dir.join(DATA_FILE);
        let data = File::open(&data_path).map_err(|e| ProbeError::io(&data_path, e))?;
        let file_len = data
            .metadata()
            .map_err(|e| ProbeError::io(&data_path, e))?
            .len();
        let mut magic = [0u8; 8];
        if file_len < MAGIC.len() as u64 {
            return Err(ProbeError::BadMagic(data_path));
        }
        read_at(&data, &mut magic, 0).map_err(|e| ProbeError::io(&data_path, e))?;
        if &magic != MAGIC {
            return Err(ProbeError::BadMagic(data_path));
        }
        manifest.validate(file_len)?;

        let by_id = manifest
            .records
            .iter()
            .enumerate()
            .map(|(i, r)| (r.id.clone(), i))
            .collect();
        Ok(Store {
            dir,
            manifest,
            data,
            by_id,
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn manifest(&self) -> &HStoreManifest {
        &self.manifest
    }

    pub fn len(&self) -> usize {
        self.manifest.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.manifest.records.is_empty()
    }

    /// Indices of the records belonging to `split`, in manifest order.
    pub fn split_indices(&self, split: Split) -> Vec<usize> {
        self.manifest
            .records
            .iter()
            .enumerate()
            .filter(|(_, r)| r.split == split)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn record(&self, index: usize) -> Result<HiddenStateRecord> {
        let entry = self.manifest.records.get(index).ok_or_else(|| {
            ProbeError::UnknownRecord(format!("#{index} (store has {})", self.len()))
        })?;
        let mut buf = vec![0u8; entry.byte_length as usize];
        read_at(&self.data, &mut buf, entry.byte_offset)
            .map_err(|e| ProbeError::io(self.dir.join(DATA_FILE), e))?;
        let tensor = decode_payload(&buf, self.manifest.dtype);
        let rec = HiddenStateRecord {
            id: entry.id.clone(),
            split: entry.split,
            label: entry.label,
            n_layers: self.manifest.n_layers,
            t: entry.t,
            d: self.manifest.d,
            tensor,
            valid_mask: vec![true; entry.t],
        };
        rec.validate()?;
        Ok(rec)
    }

    pub fn record_by_id(&self, id: &str) -> Result<HiddenStateRecord> {
        let index = *self
            .by_id
            .get(id)
            .ok_or_else(|| ProbeError::UnknownRecord(id.to_string()))?;
        self.record(index)
    }

    pub fn load(&self, indices: &[usize]) -> Result<Vec<HiddenStateRecord>> {
        indices.iter().map(|&i| self.record(i)).collect()
    }

    pub fn load_split(&self, split: Split) -> Result<Vec<HiddenStateRecord>> {
        self.load(&self.split_indices(split))
    }
}

#[cfg(unix)]
fn read_at(file: &File, buf: &mut [u8], offset: u64) -> std::io::Result<()> {
    use std::os::unix::fs::FileExt;
    file.read_exact_at(buf, offset)
}

#[cfg(windows)]
fn read_at(file: &File, mut buf: &mut [u8], mut offset: u64) -> std::io::Result<()> {
    use std::os::windows::fs::FileExt;
    while !buf.is_empty() {
        match file.seek_read(buf, offset)? {
            0 => return Err(std::io::ErrorKind::UnexpectedEof.into()),
            n => {
                buf = &mut buf[n..];
                offset += n as u64;
            }
        }
    }
    Ok(())
}

/// Padded mini-batch: tensor `[b, n_layers, t, d]`, mask `[b, t]`, labels `[b]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch<F = f32> {
    pub b: usize,
    pub n_layers: usize,
    pub t: usize,
    pub d: usize,
    pub data: Vec<F>,
    pub mask: Vec<bool>,
    pub labels: Vec<usize>,
}

impl<F: Real> Batch<F> {
    pub fn example_len(&self) -> usize {
        self.n_layers * self.t * self.d
    }

    /// The `[n_layers, t, d]` block of example `i`.
    pub fn example(&self, i: usize) -> &[F] {
        let n = self.example_len();
        &self.data[i * n..(i + 1) * n]
    }

    pub fn mask_row(&self, i: usize) -> &[bool] {
        &self.mask[i * self.t..(i + 1) * self.t]
    }

    /// Overwrites every padded position with `value`.
    pub fn fill_padding(&mut self, value: F) {
        let (t, d, n_layers) = (self.t, self.d, self.n_layers);
        for b in 0..self.b {
            for tok in 0..t {
                if self.mask[b * t + tok] {
                    continue;
                }
                for l in 0..n_layers {
                    let start = ((b * n_layers + l) * t + tok) * d;
                    self.data[start..start + d].fill(value);
                }
            }
        }
    }

    pub fn cast<G: Real>(&self) -> Batch<G> {
        Batch {
            b: self.b,
            n_layers: self.n_layers,
            t: self.t,
            d: self.d,
            data: self
                .data
                .iter()
                .map(|&v| G::from_f64(v.to_f64().unwrap_or(f64::NAN)).unwrap_or(G::nan()))
                .collect(),
            mask: self.mask.clone(),
            labels: self.labels.clone(),
        }
    }
}

/// Stacks records into a zero-padded batch of token length `pad_to`.
pub fn batch_records(records: &[HiddenStateRecord], pad_to: usize) -> Result<Batch<f32>> {
    let first = records
        .first()
        .ok_or_else(|| ProbeError::Shape("cannot batch zero records".into()))?;
    let (n_layers, d) = (first.n_layers, first.d);
    for r in records {
        if r.n_layers != n_layers || r.d != d {
            return Err(ProbeError::Shape(format!(
                "record {} is [{}, _, {}], batch is [{}, _, {}]",
                r.id, r.n_layers, r.d, n_layers, d
            )));
        }
        if r.t > pad_to {
            return Err(ProbeError::Shape(format!(
                "record {} has t = {} > pad_to = {}",
                r.id, r.t, pad_to
            )));
        }
    }

    let b = records.len();
    let mut data = vec![0.0f32; b * n_layers * pad_to * d];
    let mut mask = vec![false; b * pad_to];
    for (bi, r) in records.iter().enumerate() {
        for l in 0..n_layers {
            let src = r.layer(l);
            let dst = ((bi * n_layers + l) * pad_to) * d;
            data[dst..dst + r.t * d].copy_from_slice(src);
        }
        mask[bi * pad_to..bi * pad_to + r.t].copy_from_slice(&r.valid_mask);
    }
    Ok(Batch {
        b,
        n_layers,
        t: pad_to,
        d,
        data,
        mask,
        labels: records.iter().map(|r| r.label).collect(),
    })
}

/// Batch padded to the longest record.
pub fn batch_tight(records: &[HiddenStateRecord]) -> Result<Batch<f32>> {
    let t = records.iter().map(|r| r.t).max().unwrap_or(0);
    batch_records(records, t)
}
