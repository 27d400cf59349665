//! On-disk formats: TARC tensor archives, FBNK filter banks with a JSON-lines
//! metadata sidecar, and the text format for mixture models.
//!
//! All binary integers and reals are little-endian. Reals in TARC and FBNK are
//! IEEE-754 `f32`; mixture files print `f64` with 17 significant digits so a
//! read/write cycle is exact.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gmm::GaussianMixture;
use crate::tensor::trailing_3x3;

pub const TARC_MAGIC: &[u8; 4] = b"TARC";
pub const FBNK_MAGIC: &[u8; 4] = b"FBNK";
pub const FORMAT_VERSION: u32 = 1;
pub const GMM_VERSION: u32 = 1;
/// Flattened 3×3 kernel.
pub const FILTER_DIM: usize = 9;

#[derive(Debug, Clone, PartialEq)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Row-major values.
    pub data: Vec<f32>,
}

impl TensorEntry {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TensorArchive {
    pub entries: Vec<TensorEntry>,
}

impl TensorArchive {
    pub fn new(entries: Vec<TensorEntry>) -> Result<Self> {
        let a = Self { entries };
        a.validate()?;
        Ok(a)
    }

    pub fn get(&self, name: &str) -> Option<&TensorEntry> {
        self.entries.iter().find(|e| e.name == name)
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for e in &self.entries {
            if !seen.insert(e.name.as_str()) {
                return Err(Error::Validation(format!("duplicate tensor name {:?}", e.name)));
            }
            if e.name.len() > u16::MAX as usize {
                return Err(Error::Validation(format!("tensor name too long ({} bytes)", e.name.len())));
            }
            if e.shape.len() > u8::MAX as usize {
                return Err(Error::Validation(format!("rank {} of {:?} exceeds 255", e.shape.len(), e.name)));
            }
            if e.shape.iter().any(|&d| d == 0 || d > u32::MAX as usize) {
                return Err(Error::Validation(format!("invalid dimension in shape {:?} of {:?}", e.shape, e.name)));
            }
            if e.numel() != e.data.len() {
                return Err(Error::Validation(format!(
                    "tensor {:?}: shape {:?} holds {} values but data has {}",
                    e.name,
                    e.shape,
                    e.numel(),
                    e.data.len()
                )));
            }
        }
        Ok(())
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Truncated(format!(
                "needed {n} bytes for {what} at offset {}, {} left",
                self.pos,
                self.buf.len() - self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn f32s(&mut self, n: usize, what: &str) -> Result<Vec<f32>> {
        let bytes = n
            .checked_mul(4)
            .ok_or_else(|| Error::Format(format!("{what}: element count overflows")))?;
        let raw = self.take(bytes, what)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    fn header(&mut self, magic: &[u8; 4]) -> Result<()> {
        let m = self.take(4, "magic")?;
        if m != magic {
            return Err(Error::Format(format!(
                "bad magic {:?}, expected {:?}",
                String::from_utf8_lossy(m),
                String::from_utf8_lossy(magic)
            )));
        }
        let version = self.u32("version")?;
        if version != FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported version {version}")));
        }
        Ok(())
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::Format(format!(
                "{} trailing bytes after payload",
                self.buf.len() - self.pos
            )));
        }
        Ok(())
    }
}

pub fn encode_tarc(archive: &TensorArchive) -> Result<Vec<u8>> {
    archive.validate()?;
    let mut out = Vec::new();
    out.extend_from_slice(TARC_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(archive.entries.len() as u32).to_le_bytes());
    for e in &archive.entries {
        out.extend_from_slice(&(e.name.len() as u16).to_le_bytes());
        out.extend_from_slice(e.name.as_bytes());
        out.push(e.shape.len() as u8);
        for &d in &e.shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in &e.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_tarc(bytes: &[u8]) -> Result<TensorArchive> {
    let mut r = Reader::new(bytes);
    r.header(TARC_MAGIC)?;
    let count = r.u32("tensor count")?;
    let mut entries = Vec::new();
    for _ in 0..count {
        let name_len = r.u16("name length")? as usize;
        let name = std::str::from_utf8(r.take(name_len, "name")?)
            .map_err(|e| Error::Format(format!("tensor name is not UTF-8: {e}")))?
            .to_owned();
        let rank = r.u8("rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32("dimension")? as usize);
        }
        let numel = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::Format(format!("shape {shape:?} overflows")))?;
        let data = r.f32s(numel, "tensor data")?;
        entries.push(TensorEntry { name, shape, data });
    }
    r.finish()?;
    TensorArchive::new(entries)
}

pub fn write_tarc(archive: &TensorArchive, path: impl AsRef<Path>) -> Result<()> {
    let bytes = encode_tarc(archive)?;
    fs::write(path.as_ref(), bytes).map_err(|e| Error::io(path.as_ref(), e))
}

pub fn read_tarc(path: impl AsRef<Path>) -> Result<TensorArchive> {
    let bytes = fs::read(path.as_ref()).map_err(|e| Error::io(path.as_ref(), e))?;
    decode_tarc(&bytes)
}

/// Where a filter came from: tensor name plus output/input channel.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilterMeta {
    pub name: String,
    #[serde(rename = "out")]
    pub out_index: usize,
    #[serde(rename = "in")]
    pub in_index: usize,
}

/// `N` flattened kernels stored row-major as `f32`.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterBank {
    dim: usize,
    vectors: Vec<f32>,
    meta: Vec<FilterMeta>,
}

impl FilterBank {
    pub fn new(dim: usize, vectors: Vec<f32>, meta: Vec<FilterMeta>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Validation("filter dimension must be positive".into()));
        }
        if !vectors.len().is_multiple_of(dim) {
            return Err(Error::Validation(format!(
                "{} values do not form rows of length {dim}",
                vectors.len()
            )));
        }
        if meta.len() != vectors.len() / dim {
            return Err(Error::Validation(format!(
                "{} metadata rows for {} filters",
                meta.len(),
                vectors.len() / dim
            )));
        }
        Ok(Self { dim, vectors, meta })
    }

    /// Bank without provenance, e.g. for synthetic data.
    pub fn from_rows(dim: usize, vectors: Vec<f32>) -> Result<Self> {
        let n = vectors.len().checked_div(dim).unwrap_or(0);
        let meta = (0..n)
            .map(|i| FilterMeta {
                name: String::new(),
                out_index: i,
                in_index: 0,
            })
            .collect();
        Self::new(dim, vectors, meta)
    }

    pub fn from_f64_rows(dim: usize, vectors: &[f64]) -> Result<Self> {
        Self::from_rows(dim, vectors.iter().map(|&v| v as f32).collect())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.meta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.meta.is_empty()
    }

    pub fn has_standard_dim(&self) -> bool {
        self.dim == FILTER_DIM
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.vectors[i * self.dim..(i + 1) * self.dim]
    }

    pub fn vectors(&self) -> &[f32] {
        &self.vectors
    }

    pub fn meta(&self) -> &[FilterMeta] {
        &self.meta
    }

    /// All rows widened to `f64`, row-major.
    pub fn to_f64(&self) -> Vec<f64> {
        self.vectors.iter().map(|&v| v as f64).collect()
    }

    /// Concatenates banks of equal dimension.
    pub fn concat(banks: &[FilterBank]) -> Result<Self> {
        let dim = banks.first().map_or(FILTER_DIM, |b| b.dim);
        let mut vectors = Vec::new();
        let mut meta = Vec::new();
        for b in banks {
            if b.dim != dim {
                return Err(Error::DimMismatch {
                    expected: dim,
                    got: b.dim,
                });
            }
            vectors.extend_from_slice(&b.vectors);
            meta.extend_from_slice(&b.meta);
        }
        Self::new(dim, vectors, meta)
    }
}

/// Number of 3×3 slices a tensor of this shape contributes (0 if none).
pub fn slice_count(shape: &[usize]) -> usize {
    if trailing_3x3(shape) {
        shape[..shape.len() - 2].iter().product()
    } else {
        0
    }
}

/// `(out, in)` channel indices of leading slice `s`.
pub(crate) fn slice_channels(shape: &[usize], s: usize) -> (usize, usize) {
    let leading = &shape[..shape.len() - 2];
    match leading.len() {
        0 => (0, 0),
        1 => (s, 0),
        _ => {
            let inner: usize = leading[1..].iter().product();
            (s / inner, s % inner)
        }
    }
}

/// Every 3×3 slice of every qualifying tensor, in archive order.
pub fn extract_filters(archive: &TensorArchive) -> Result<FilterBank> {
    extract_filters_where(archive, |_| true)
}

/// Like [`extract_filters`], restricted to tensors whose name passes `keep`.
pub fn extract_filters_where(
    archive: &TensorArchive,
    keep: impl Fn(&str) -> bool,
) -> Result<FilterBank> {
    let mut vectors = Vec::new();
    let mut meta = Vec::new();
    for e in archive.entries.iter().filter(|e| keep(&e.name)) {
        let n = slice_count(&e.shape);
        for s in 0..n {
            vectors.extend_from_slice(&e.data[s * FILTER_DIM..(s + 1) * FILTER_DIM]);
            let (out_index, in_index) = slice_channels(&e.shape, s);
            meta.push(FilterMeta {
                name: e.name.clone(),
                out_index,
                in_index,
            });
        }
    }
    if meta.is_empty() {
        return Err(Error::EmptyBank);
    }
    FilterBank::new(FILTER_DIM, vectors, meta)
}

pub fn encode_fbank(bank: &FilterBank) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + 4 * bank.vectors.len());
    out.extend_from_slice(FBNK_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(bank.len() as u32).to_le_bytes());
    out.extend_from_slice(&(bank.dim as u32).to_le_bytes());
    for &v in &bank.vectors {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// Decodes the numeric payload; metadata is filled with placeholders.
pub fn decode_fbank(bytes: &[u8]) -> Result<FilterBank> {
    let mut r = Reader::new(bytes);
    r.header(FBNK_MAGIC)?;
    let n = r.u32("filter count")? as usize;
    let dim = r.u32("dimension")? as usize;
    if dim == 0 {
        return Err(Error::Format("filter dimension is zero".into()));
    }
    let total = n
        .checked_mul(dim)
        .ok_or_else(|| Error::Format("filter count overflows".into()))?;
    let vectors = r.f32s(total, "filter data")?;
    r.finish()?;
    if dim != FILTER_DIM {
        log::warn!("filter bank has dimension {dim}, not {FILTER_DIM}");
    }
    FilterBank::from_rows(dim, vectors)
}

/// Path of the metadata sidecar for a bank file.
pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".meta.jsonl");
    PathBuf::from(s)
}

pub fn encode_meta(meta: &[FilterMeta]) -> String {
    let mut out = String::new();
    for m in meta {
        out.push_str(&serde_json::to_string(m).expect("metadata serializes"));
        out.push('\n');
    }
    out
}

pub fn decode_meta(text: &str) -> Result<Vec<FilterMeta>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| {
            serde_json::from_str(l)
                .map_err(|e| Error::Format(format!("metadata line {}: {e}", i + 1)))
        })
        .collect()
}

/// Writes the bank and its `<path>.meta.jsonl` sidecar.
pub fn write_fbank(bank: &FilterBank, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_fbank(bank)).map_err(|e| Error::io(path, e))?;
    let side = sidecar_path(path);
    fs::write(&side, encode_meta(&bank.meta)).map_err(|e| Error::io(side, e))
}

/// Reads a bank; a missing sidecar yields placeholder metadata.
pub fn read_fbank(path: impl AsRef<Path>) -> Result<FilterBank> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bank = decode_fbank(&bytes)?;
    let side = sidecar_path(path);
    if !side.exists() {
        log::warn!("no metadata sidecar at {}", side.display());
        return Ok(bank);
    }
    let text = fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
    let meta = decode_meta(&text)?;
    FilterBank::new(bank.dim, bank.vectors, meta)
}

/// Serialized form of a [`GaussianMixture`].
#[derive(Debug, Clone, PartialEq, Deserialize)]
pub struct GmmFile {
    pub version: u32,
    pub dim: usize,
    pub k: usize,
    pub weights: Vec<f64>,
    pub means: Vec<Vec<f64>>,
    pub variances: Vec<Vec<f64>>,
}

fn fmt_real(v: f64) -> String {
    format!("{v:.16e}")
}

fn fmt_row(row: &[f64]) -> String {
    let items: Vec<String> = row.iter().map(|&v| fmt_real(v)).collect();
    format!("[{}]", items.join(", "))
}

/// TOML-compatible text with 17 significant digits per real.
pub fn encode_gmm(m: &GaussianMixture) -> String {
    let mut out = String::new();
    out.push_str("# diagonal gaussian mixture\n");
    out.push_str(&format!("version = {GMM_VERSION}\n"));
    out.push_str(&format!("dim = {}\n", m.dim()));
    out.push_str(&format!("k = {}\n", m.k()));
    out.push_str(&format!("weights = {}\n", fmt_row(m.weights())));
    for (key, rows) in [("means", m.means()), ("variances", m.variances())] {
        out.push_str(&format!("{key} = [\n"));
        for row in rows.chunks(m.dim()) {
            out.push_str(&format!("  {},\n", fmt_row(row)));
        }
        out.push_str("]\n");
    }
    out
}

pub fn decode_gmm(text: &str) -> Result<GaussianMixture> {
    let file: GmmFile =
        toml::from_str(text).map_err(|e| Error::Format(format!("mixture file: {e}")))?;
    if file.version != GMM_VERSION {
        return Err(Error::Format(format!("unsupported mixture version {}", file.version)));
    }
    if file.k == 0 || file.dim == 0 {
        return Err(Error::Validation("k and dim must be positive".into()));
    }
    if file.weights.len() != file.k || file.means.len() != file.k || file.variances.len() != file.k {
        return Err(Error::Validation(format!("expected {} components in every field", file.k)));
    }
    if file
        .means
        .iter()
        .chain(&file.variances)
        .any(|r| r.len() != file.dim)
    {
        return Err(Error::Validation(format!("every row must have {} entries", file.dim)));
    }
    let sum: f64 = file.weights.iter().sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(Error::Validation(format!("weights sum to {sum}, not 1")));
    }
    if let Some(v) = file.variances.iter().flatten().find(|v| !(**v > 0.0)) {
        return Err(Error::Validation(format!("nonpositive variance {v}")));
    }
    GaussianMixture::new(
        file.weights,
        file.means.concat(),
        file.variances.concat(),
    )
}

pub fn write_gmm(m: &GaussianMixture, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path.as_ref(), encode_gmm(m)).map_err(|e| Error::io(path.as_ref(), e))
}

pub fn read_gmm(path: impl AsRef<Path>) -> Result<GaussianMixture> {
    let text = fs::read_to_string(path.as_ref()).map_err(|e| Error::io(path.as_ref(), e))?;
    decode_gmm(&text)
}
