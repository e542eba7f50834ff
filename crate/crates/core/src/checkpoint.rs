//! MPCK-v1 checkpoint files and block-granular access.
//!
//! Layout:
//!
//! ```text
//! [0..8)        b"MPCKPT01"
//! [8..16)       u64 LE, header length N
//! [16..16+N)    canonical JSON header {"model_id", "tensors": [...]}
//! [16+N..)      raw little-endian tensor payloads, contiguous, in header order
//! ```
//!
//! Tensors are partitioned into blocks over the flattened row-major element
//! array; block `i` covers elements `[i*S, min((i+1)*S, n))`.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Read, Write};
use std::ops::Range;
use std::os::unix::fs::FileExt;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};

use half::{bf16, f16};
use serde::{Deserialize, Serialize};
use sha2::{Digest as _, Sha256};

use crate::canonical::{to_canonical_json, Digest};
use crate::error::{Error, IoContext, Result};

pub const MAGIC: &[u8; 8] = b"MPCKPT01";
pub const PREAMBLE_BYTES: u64 = 16;
pub const DEFAULT_BLOCK_SIZE: u64 = 128 * 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum DType {
    F32,
    F16,
    BF16,
}

impl DType {
    pub const fn size(self) -> u64 {
        match self {
            DType::F32 => 4,
            DType::F16 | DType::BF16 => 2,
        }
    }

    /// Decode little-endian payload bytes to `f32`.
    pub fn decode(self, bytes: &[u8]) -> Vec<f32> {
        match self {
            DType::F32 => bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect(),
            DType::F16 => bytes
                .chunks_exact(2)
                .map(|c| f16::from_le_bytes([c[0], c[1]]).to_f32())
                .collect(),
            DType::BF16 => bytes
                .chunks_exact(2)
                .map(|c| bf16::from_le_bytes([c[0], c[1]]).to_f32())
                .collect(),
        }
    }

    /// Encode `f32` values (round-to-nearest-even for the 16-bit types).
    pub fn encode_into(self, values: &[f32], out: &mut Vec<u8>) {
        out.reserve(values.len() * self.size() as usize);
        match self {
            DType::F32 => values.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
            DType::F16 => values
                .iter()
                .for_each(|v| out.extend_from_slice(&f16::from_f32(*v).to_le_bytes())),
            DType::BF16 => values
                .iter()
                .for_each(|v| out.extend_from_slice(&bf16::from_f32(*v).to_le_bytes())),
        }
    }

    pub fn encode(self, values: &[f32]) -> Vec<u8> {
        let mut out = Vec::new();
        self.encode_into(values, &mut out);
        out
    }

    /// Round a value through this dtype.
    pub fn quantize(self, v: f32) -> f32 {
        match self {
            DType::F32 => v,
            DType::F16 => f16::from_f32(v).to_f32(),
            DType::BF16 => bf16::from_f32(v).to_f32(),
        }
    }
}

impl std::str::FromStr for DType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "F32" => Ok(DType::F32),
            "F16" => Ok(DType::F16),
            "BF16" => Ok(DType::BF16),
            _ => Err(Error::MalformedRecord(format!("unknown dtype `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorMeta {
    pub name: String,
    pub dtype: DType,
    pub shape: Vec<u64>,
    pub offset_bytes: u64,
    pub length_bytes: u64,
}

impl TensorMeta {
    pub fn elements(&self) -> u64 {
        self.shape.iter().product()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub model_id: String,
    pub tensors: Vec<TensorMeta>,
}

impl CheckpointHeader {
    /// Lay tensors out contiguously in the given order.
    pub fn layout<'a, I>(model_id: &str, tensors: I) -> Result<Self>
    where
        I: IntoIterator<Item = (&'a str, DType, &'a [u64])>,
    {
        let mut offset = 0u64;
        let mut metas = Vec::new();
        let mut seen = std::collections::HashSet::new();
        for (name, dtype, shape) in tensors {
            if !seen.insert(name.to_string()) {
                return Err(Error::DuplicateTensor(name.to_string()));
            }
            let elements: u64 = shape.iter().product();
            if elements == 0 {
                return Err(Error::ShapeDataMismatch {
                    name: name.to_string(),
                    shape: shape.to_vec(),
                    expected: 1,
                    actual: 0,
                });
            }
            let length_bytes = elements * dtype.size();
            metas.push(TensorMeta {
                name: name.to_string(),
                dtype,
                shape: shape.to_vec(),
                offset_bytes: offset,
                length_bytes,
            });
            offset += length_bytes;
        }
        Ok(CheckpointHeader {
            model_id: model_id.to_string(),
            tensors: metas,
        })
    }

    pub fn payload_bytes(&self) -> u64 {
        self.tensors.iter().map(|t| t.length_bytes).sum()
    }

    pub fn tensor_index(&self, name: &str) -> Option<usize> {
        self.tensors.iter().position(|t| t.name == name)
    }

    /// Same tensor names, order, dtypes and shapes.
    pub fn same_structure(&self, other: &CheckpointHeader) -> bool {
        self.tensors.len() == other.tensors.len()
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|(a, b)| a.name == b.name && a.dtype == b.dtype && a.shape == b.shape)
    }

    pub fn to_json(&self) -> Result<String> {
        to_canonical_json(self)
    }

    fn validate(&self, path: &Path) -> Result<()> {
        let mut expected_offset = 0u64;
        let mut seen = std::collections::HashSet::new();
        for t in &self.tensors {
            if !seen.insert(t.name.as_str()) {
                return Err(Error::corrupt(path, format!("duplicate tensor `{}`", t.name)));
            }
            if t.shape.contains(&0) {
                return Err(Error::corrupt(path, format!("empty tensor `{}`", t.name)));
            }
            if t.length_bytes != t.elements() * t.dtype.size() {
                return Err(Error::corrupt(
                    path,
                    format!("tensor `{}` length_bytes inconsistent with shape", t.name),
                ));
            }
            if t.offset_bytes != expected_offset {
                return Err(Error::corrupt(path, format!("tensor `{}` is not contiguous", t.name)));
            }
            expected_offset += t.length_bytes;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct BlockRef {
    pub model_id: String,
    pub tensor_id: String,
    pub block_idx: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockData {
    pub block_ref: BlockRef,
    pub values: Vec<f32>,
    pub raw_bytes: u64,
}

/// A tensor's values, to be written by [`write_checkpoint`].
#[derive(Debug, Clone, PartialEq)]
pub struct TensorData {
    pub name: String,
    pub dtype: DType,
    pub shape: Vec<u64>,
    pub values: Vec<f32>,
}

pub fn block_count(tensor: &TensorMeta, block_size: u64) -> Result<u64> {
    if block_size == 0 {
        return Err(Error::ZeroBlockSize);
    }
    Ok(tensor.elements().div_ceil(block_size))
}

/// Element range covered by a block.
pub fn block_elements(tensor: &TensorMeta, block_size: u64, block_idx: u64) -> Result<Range<u64>> {
    let blocks = block_count(tensor, block_size)?;
    if block_idx >= blocks {
        return Err(Error::BlockOutOfRange {
            tensor: tensor.name.clone(),
            block_idx,
            blocks,
        });
    }
    let start = block_idx * block_size;
    Ok(start..(start + block_size).min(tensor.elements()))
}

/// Payload bytes of one block.
pub fn block_bytes(tensor: &TensorMeta, block_size: u64, block_idx: u64) -> Result<u64> {
    let r = block_elements(tensor, block_size, block_idx)?;
    Ok((r.end - r.start) * tensor.dtype.size())
}

fn preamble(header: &CheckpointHeader) -> Result<Vec<u8>> {
    let json = header.to_json()?;
    let mut out = Vec::with_capacity(16 + json.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(json.as_bytes());
    Ok(out)
}

/// Write a complete checkpoint and return the SHA-256 of the file.
pub fn write_checkpoint(path: &Path, model_id: &str, tensors: &[TensorData]) -> Result<Digest> {
    for t in tensors {
        let expected: u64 = t.shape.iter().product();
        if expected != t.values.len() as u64 || expected == 0 {
            return Err(Error::ShapeDataMismatch {
                name: t.name.clone(),
                shape: t.shape.clone(),
                expected,
                actual: t.values.len() as u64,
            });
        }
    }
    let header = CheckpointHeader::layout(
        model_id,
        tensors.iter().map(|t| (t.name.as_str(), t.dtype, t.shape.as_slice())),
    )?;

    let file = File::create(path).at(path)?;
    let mut out = BufWriter::with_capacity(1 << 20, file);
    let mut hasher = Sha256::new();
    let pre = preamble(&header)?;
    hasher.update(&pre);
    out.write_all(&pre).at(path)?;
    let mut buf = Vec::new();
    for t in tensors {
        for chunk in t.values.chunks(1 << 18) {
            buf.clear();
            t.dtype.encode_into(chunk, &mut buf);
            hasher.update(&buf);
            out.write_all(&buf).at(path)?;
        }
    }
    let file = out.into_inner().map_err(|e| Error::io(path, e.into_error()))?;
    file.sync_all().at(path)?;
    Ok(Digest(hasher.finalize().into()))
}

/// SHA-256 of a whole file.
pub fn file_digest(path: &Path) -> Result<Digest> {
    let mut f = File::open(path).at(path)?;
    let mut hasher = Sha256::new();
    let mut buf = vec![0u8; 1 << 20];
    loop {
        let n = f.read(&mut buf).at(path)?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    Ok(Digest(hasher.finalize().into()))
}

/// Read-only handle to a checkpoint. Safe for concurrent block reads.
#[derive(Debug)]
pub struct Checkpoint {
    path: PathBuf,
    file: File,
    header: CheckpointHeader,
    data_start: u64,
    index: HashMap<String, usize>,
    payload_read: AtomicU64,
}

impl Checkpoint {
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        let file = File::open(&path).at(&path)?;
        let file_len = file.metadata().at(&path)?.len();
        if file_len < PREAMBLE_BYTES {
            return Err(Error::corrupt(&path, "file shorter than preamble"));
        }
        let mut pre = [0u8; 16];
        file.read_exact_at(&mut pre, 0).at(&path)?;
        if &pre[..8] != MAGIC {
            return Err(Error::corrupt(&path, "bad magic"));
        }
        let header_len = u64::from_le_bytes(pre[8..16].try_into().expect("8 bytes"));
        if header_len > file_len - PREAMBLE_BYTES {
            return Err(Error::corrupt(&path, "header length exceeds file"));
        }
        let mut json = vec![0u8; header_len as usize];
        file.read_exact_at(&mut json, PREAMBLE_BYTES).at(&path)?;
        let header: CheckpointHeader =
            serde_json::from_slice(&json).map_err(|e| Error::corrupt(&path, format!("header: {e}")))?;
        header.validate(&path)?;
        let data_start = PREAMBLE_BYTES + header_len;
        if data_start + header.payload_bytes() != file_len {
            return Err(Error::corrupt(
                &path,
                format!(
                    "payload is {} bytes but header describes {}",
                    file_len - data_start,
                    header.payload_bytes()
                ),
            ));
        }
        let index = header
            .tensors
            .iter()
            .enumerate()
            .map(|(i, t)| (t.name.clone(), i))
            .collect();
        Ok(Checkpoint {
            path,
            file,
            header,
            data_start,
            index,
            payload_read: AtomicU64::new(0),
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn header(&self) -> &CheckpointHeader {
        &self.header
    }

    pub fn model_id(&self) -> &str {
        &self.header.model_id
    }

    /// Size of magic, length prefix and JSON header.
    pub fn header_bytes(&self) -> u64 {
        self.data_start
    }

    /// Payload bytes read through this handle so far.
    pub fn payload_bytes_read(&self) -> u64 {
        self.payload_read.load(Ordering::Relaxed)
    }

    pub fn tensor_index(&self, name: &str) -> Result<usize> {
        self.index
            .get(name)
            .copied()
            .ok_or_else(|| Error::UnknownTensor(name.to_string()))
    }

    pub fn read_block(&self, block_ref: &BlockRef, block_size: u64) -> Result<BlockData> {
        let t = self.tensor_index(&block_ref.tensor_id)?;
        self.read_block_at(t, block_ref.block_idx, block_size)
    }

    pub fn read_block_at(&self, tensor: usize, block_idx: u64, block_size: u64) -> Result<BlockData> {
        let meta = &self.header.tensors[tensor];
        let raw = self.read_block_raw(tensor, block_idx, block_size)?;
        Ok(BlockData {
            block_ref: BlockRef {
                model_id: self.header.model_id.clone(),
                tensor_id: meta.name.clone(),
                block_idx,
            },
            values: meta.dtype.decode(&raw),
            raw_bytes: raw.len() as u64,
        })
    }

    /// Raw little-endian bytes of a block.
    pub fn read_block_raw(&self, tensor: usize, block_idx: u64, block_size: u64) -> Result<Vec<u8>> {
        let meta = self
            .header
            .tensors
            .get(tensor)
            .ok_or_else(|| Error::UnknownTensor(format!("#{tensor}")))?;
        let range = block_elements(meta, block_size, block_idx)?;
        let dsize = meta.dtype.size();
        self.read_payload(
            meta.offset_bytes + range.start * dsize,
            (range.end - range.start) * dsize,
        )
    }

    /// All elements of a tensor.
    pub fn read_tensor(&self, tensor: usize) -> Result<Vec<f32>> {
        let meta = &self.header.tensors[tensor];
        let raw = self.read_payload(meta.offset_bytes, meta.length_bytes)?;
        Ok(meta.dtype.decode(&raw))
    }

    fn read_payload(&self, offset: u64, len: u64) -> Result<Vec<u8>> {
        let mut buf = vec![0u8; len as usize];
        self.file
            .read_exact_at(&mut buf, self.data_start + offset)
            .map_err(|e| {
                if e.kind() == std::io::ErrorKind::UnexpectedEof {
                    Error::corrupt(&self.path, "truncated payload")
                } else {
                    Error::io(&self.path, e)
                }
            })?;
        self.payload_read.fetch_add(len, Ordering::Relaxed);
        Ok(buf)
    }
}

/// Positioned writer for a checkpoint whose header is known up front.
///
/// The file is preallocated so blocks can be written in any order, from
/// several threads, at their final offsets.
#[derive(Debug)]
pub struct CheckpointWriter {
    path: PathBuf,
    file: File,
    header: CheckpointHeader,
    data_start: u64,
}

impl CheckpointWriter {
    pub fn create(path: &Path, header: CheckpointHeader) -> Result<Self> {
        let file = OpenOptions::new()
            .read(true)
            .write(true)
            .create_new(true)
            .open(path)
            .at(path)?;
        let pre = preamble(&header)?;
        file.write_all_at(&pre, 0).at(path)?;
        let data_start = pre.len() as u64;
        file.set_len(data_start + header.payload_bytes()).at(path)?;
        Ok(CheckpointWriter {
            path: path.to_path_buf(),
            file,
            header,
            data_start,
        })
    }

    pub fn header(&self) -> &CheckpointHeader {
        &self.header
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    /// Absolute file offset of a block.
    pub fn block_file_offset(&self, tensor: usize, block_idx: u64, block_size: u64) -> Result<u64> {
        let meta = &self.header.tensors[tensor];
        let range = block_elements(meta, block_size, block_idx)?;
        Ok(self.data_start + meta.offset_bytes + range.start * meta.dtype.size())
    }

    pub fn write_block(&self, tensor: usize, block_idx: u64, block_size: u64, bytes: &[u8]) -> Result<u64> {
        let expected = block_bytes(&self.header.tensors[tensor], block_size, block_idx)?;
        if expected != bytes.len() as u64 {
            return Err(Error::LengthMismatch {
                expected: expected as usize,
                actual: bytes.len(),
            });
        }
        let offset = self.block_file_offset(tensor, block_idx, block_size)?;
        self.file.write_all_at(bytes, offset).at(&self.path)?;
        Ok(offset)
    }

    pub fn read_at(&self, offset: u64, len: u64) -> Result<Vec<u8>> {
        let mut buf = vec![0u8; len as usize];
        self.file.read_exact_at(&mut buf, offset).at(&self.path)?;
        Ok(buf)
    }

    pub fn sync(&self) -> Result<()> {
        self.file.sync_all().at(&self.path)
    }
}
