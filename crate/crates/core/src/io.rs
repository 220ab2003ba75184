//! File formats: the binary stack container, an MRC mode-2 subset, CSV
//! stacks and matrices, the model container and run manifests.
//!
//! Stack container layout (all integers little-endian):
//!
//! | offset | size | field |
//! |-------:|-----:|-------|
//! | 0  | 4 | magic `2SDR` |
//! | 4  | 2 | version (1) |
//! | 6  | 1 | dtype: 0 = f32, 1 = f64 |
//! | 7  | 8 | n |
//! | 15 | 8 | p |
//! | 23 | 8 | q |
//! | 31 | n·p·q·size | samples, each row-major |
//! | end-4 | 4 | CRC32 of everything before it |

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::ImageStack;
use crate::pipeline::{FitConfig, Hybrid2SdrModel};

pub const STACK_MAGIC: &[u8; 4] = b"2SDR";
pub const MODEL_MAGIC: &[u8; 4] = b"2SDM";
pub const FORMAT_VERSION: u16 = 1;
pub const STACK_HEADER_LEN: usize = 31;
pub const MRC_HEADER_LEN: usize = 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    pub fn code(self) -> u8 {
        match self {
            Dtype::F32 => 0,
            Dtype::F64 => 1,
        }
    }

    pub fn size(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }

    fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Dtype::F32),
            1 => Some(Dtype::F64),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StackFormat {
    Container,
    Mrc,
    Csv,
}

impl StackFormat {
    /// `.mrc`/`.mrcs` is MRC, `.csv` is CSV, anything else the container.
    pub fn from_path(path: &Path) -> Self {
        match path
            .extension()
            .and_then(|e| e.to_str())
            .map(|e| e.to_ascii_lowercase())
        {
            Some(e) if e == "mrc" || e == "mrcs" => StackFormat::Mrc,
            Some(e) if e == "csv" => StackFormat::Csv,
            _ => StackFormat::Container,
        }
    }
}

impl FromStr for StackFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "container" | "stk" => Ok(StackFormat::Container),
            "mrc" => Ok(StackFormat::Mrc),
            "csv" => Ok(StackFormat::Csv),
            other => Err(Error::invalid(format!("unknown stack format '{other}'"))),
        }
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    fn take(&mut self, len: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(len).filter(|e| *e <= self.bytes.len());
        match end {
            Some(end) => {
                let out = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(out)
            }
            None => Err(Error::format(
                self.bytes.len() as u64,
                format!("truncated: {what} needs {len} bytes at offset {}", self.pos),
            )),
        }
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(
            self.take(2, what)?.try_into().expect("2 bytes"),
        ))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8, what)?.try_into().expect("8 bytes"),
        ))
    }
}

fn read_i32(bytes: &[u8], offset: usize) -> i32 {
    i32::from_le_bytes(bytes[offset..offset + 4].try_into().expect("4 bytes"))
}

/// Checks the trailing CRC32 and returns the body it covers.
fn split_crc(bytes: &[u8], min_body: usize) -> Result<&[u8]> {
    if bytes.len() < min_body + 4 {
        return Err(Error::format(
            bytes.len() as u64,
            "truncated: file shorter than header and checksum",
        ));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
    let actual = crc32fast::hash(body);
    if stored != actual {
        return Err(Error::format(
            body.len() as u64,
            format!("checksum mismatch: stored {stored:08x}, computed {actual:08x}"),
        ));
    }
    Ok(body)
}

pub fn encode_container(stack: &ImageStack, dtype: Dtype) -> Vec<u8> {
    let (p, q) = stack.dims();
    let n = stack.len();
    let mut out = Vec::with_capacity(STACK_HEADER_LEN + n * p * q * dtype.size() + 4);
    out.extend_from_slice(STACK_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.push(dtype.code());
    for d in [n, p, q] {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for v in stack.to_row_major() {
        match dtype {
            Dtype::F32 => out.extend_from_slice(&(v as f32).to_le_bytes()),
            Dtype::F64 => out.extend_from_slice(&v.to_le_bytes()),
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

/// Decodes a container, returning the stack and the stored dtype.
pub fn decode_container(bytes: &[u8]) -> Result<(ImageStack, Dtype)> {
    let mut cur = Cursor::new(bytes);
    if cur.take(4, "magic")? != STACK_MAGIC {
        return Err(Error::format(0, "bad magic: not a 2SDR stack container"));
    }
    let version = cur.u16("version")?;
    if version != FORMAT_VERSION {
        return Err(Error::format(
            4,
            format!("unsupported container version {version}"),
        ));
    }
    let code = cur.take(1, "dtype")?[0];
    let dtype = Dtype::from_code(code)
        .ok_or_else(|| Error::format(6, format!("unknown dtype code {code}")))?;
    let n = cur.u64("n")?;
    let p = cur.u64("p")?;
    let q = cur.u64("q")?;
    if n == 0 {
        return Err(Error::format(7, "empty stack: n = 0"));
    }
    if p == 0 || q == 0 {
        return Err(Error::format(
            15,
            format!("image dimensions must be positive, got {p} x {q}"),
        ));
    }
    let count = n
        .checked_mul(p)
        .and_then(|v| v.checked_mul(q))
        .and_then(|v| usize::try_from(v).ok())
        .ok_or_else(|| Error::format(7, "dimensions overflow"))?;
    let payload_len = count
        .checked_mul(dtype.size())
        .ok_or_else(|| Error::format(7, "dimensions overflow"))?;
    let expected = STACK_HEADER_LEN + payload_len + 4;
    if bytes.len() < expected {
        return Err(Error::format(
            bytes.len() as u64,
            format!(
                "truncated: expected {expected} bytes, found {}",
                bytes.len()
            ),
        ));
    }
    if bytes.len() > expected {
        return Err(Error::format(
            expected as u64,
            "trailing bytes after checksum",
        ));
    }
    let body = split_crc(bytes, STACK_HEADER_LEN)?;
    let payload = &body[STACK_HEADER_LEN..];
    let values: Vec<f64> = match dtype {
        Dtype::F32 => payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect(),
        Dtype::F64 => payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect(),
    };
    let stack = ImageStack::from_row_major(n as usize, p as usize, q as usize, &values)?;
    Ok((stack, dtype))
}

/// MRC mode-2 bytes: `nx = q`, `ny = p`, `nz = n`, little-endian float32 data.
pub fn encode_mrc(stack: &ImageStack) -> Vec<u8> {
    let (p, q) = stack.dims();
    let n = stack.len();
    let data = stack.to_row_major();
    let mut header = vec![0u8; MRC_HEADER_LEN];
    let mut put_i32 =
        |offset: usize, v: i32| header[offset..offset + 4].copy_from_slice(&v.to_le_bytes());
    let dims = [q as i32, p as i32, n as i32];
    for (k, d) in dims.iter().enumerate() {
        put_i32(4 * k, *d);
        put_i32(28 + 4 * k, *d);
    }
    put_i32(12, 2);
    put_i32(64, 1);
    put_i32(68, 2);
    put_i32(72, 3);
    let mut put_f32 =
        |offset: usize, v: f32| header[offset..offset + 4].copy_from_slice(&v.to_le_bytes());
    for (k, d) in dims.iter().enumerate() {
        put_f32(40 + 4 * k, *d as f32);
        put_f32(52 + 4 * k, 90.0);
    }
    let as32: Vec<f32> = data.iter().map(|v| *v as f32).collect();
    let (lo, hi, sum) = as32.iter().fold(
        (f32::INFINITY, f32::NEG_INFINITY, 0.0f64),
        |(lo, hi, s), v| (lo.min(*v), hi.max(*v), s + *v as f64),
    );
    let mean = sum / as32.len() as f64;
    let rms =
        (as32.iter().map(|v| (*v as f64 - mean).powi(2)).sum::<f64>() / as32.len() as f64).sqrt();
    put_f32(76, lo);
    put_f32(80, hi);
    put_f32(84, mean as f32);
    put_f32(216, rms as f32);
    header[208..212].copy_from_slice(b"MAP ");
    header[212..216].copy_from_slice(&[0x44, 0x44, 0x00, 0x00]);
    let mut out = header;
    out.reserve(as32.len() * 4);
    for v in as32 {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// Reads an MRC mode-2 stack; the extended header (`NSYMBT` bytes) is skipped.
pub fn decode_mrc(bytes: &[u8]) -> Result<ImageStack> {
    if bytes.len() < MRC_HEADER_LEN {
        return Err(Error::format(
            bytes.len() as u64,
            format!(
                "truncated: MRC header needs {MRC_HEADER_LEN} bytes, found {}",
                bytes.len()
            ),
        ));
    }
    if bytes[212] == 0x11 && bytes[213] == 0x11 {
        return Err(Error::format(212, "big-endian MRC files are not supported"));
    }
    let (nx, ny, nz, mode) = (
        read_i32(bytes, 0),
        read_i32(bytes, 4),
        read_i32(bytes, 8),
        read_i32(bytes, 12),
    );
    if mode != 2 {
        return Err(Error::format(
            12,
            format!("unsupported mode {mode}: only mode 2 (float32) is read"),
        ));
    }
    for (offset, v) in [(0, nx), (4, ny), (8, nz)] {
        if v <= 0 {
            return Err(Error::format(
                offset,
                format!("dimension must be positive, got {v}"),
            ));
        }
    }
    let ext = read_i32(bytes, 92);
    if ext < 0 {
        return Err(Error::format(
            92,
            format!("negative extended header size {ext}"),
        ));
    }
    let start = MRC_HEADER_LEN + ext as usize;
    let (p, q, n) = (ny as usize, nx as usize, nz as usize);
    let count = n * p * q;
    let end = start + 4 * count;
    if bytes.len() < end {
        return Err(Error::format(
            bytes.len() as u64,
            format!(
                "truncated: {count} float32 values need {end} bytes, found {}",
                bytes.len()
            ),
        ));
    }
    let values: Vec<f64> = bytes[start..end]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
        .collect();
    ImageStack::from_row_major(n, p, q, &values)
}

/// First line `n,p,q`, then one line per sample holding its `p*q` values row-major.
pub fn encode_csv_stack(stack: &ImageStack) -> String {
    let (p, q) = stack.dims();
    let mut out = format!("{},{},{}\n", stack.len(), p, q);
    for m in stack.samples() {
        let mut first = true;
        for i in 0..p {
            for j in 0..q {
                if !first {
                    out.push(',');
                }
                first = false;
                let _ = write!(out, "{}", m[(i, j)]);
            }
        }
        out.push('\n');
    }
    out
}

/// Numeric CSV records with the byte offset where each starts.
fn numeric_records(text: &str, allow_header: bool) -> Result<Vec<(u64, Vec<f64>)>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let mut rows = Vec::new();
    for (k, record) in reader.records().enumerate() {
        let record = record.map_err(|e| {
            let offset = e.position().map_or(0, |p| p.byte());
            Error::format(offset, format!("CSV: {e}"))
        })?;
        let offset = record.position().map_or(0, |p| p.byte());
        if record.iter().all(|f| f.is_empty()) {
            continue;
        }
        let parsed: std::result::Result<Vec<f64>, _> =
            record.iter().map(|f| f.parse::<f64>()).collect();
        match parsed {
            Ok(r) => rows.push((offset, r)),
            Err(_) if allow_header && k == 0 => continue,
            Err(_) => {
                let bad = record
                    .iter()
                    .find(|f| f.parse::<f64>().is_err())
                    .unwrap_or("");
                return Err(Error::format(offset, format!("not a number: '{bad}'")));
            }
        }
    }
    Ok(rows)
}

pub fn decode_csv_stack(text: &str) -> Result<ImageStack> {
    let rows = numeric_records(text, false)?;
    let Some((off, dims)) = rows.first() else {
        return Err(Error::format(0, "empty CSV stack"));
    };
    if dims.len() != 3 || dims.iter().any(|d| *d < 1.0 || d.fract() != 0.0) {
        return Err(Error::format(
            *off,
            "first line must be 'n,p,q' with positive integers",
        ));
    }
    let (n, p, q) = (dims[0] as usize, dims[1] as usize, dims[2] as usize);
    if rows.len() - 1 != n {
        return Err(Error::format(
            text.len() as u64,
            format!("expected {n} sample lines, found {}", rows.len() - 1),
        ));
    }
    let mut values = Vec::with_capacity(n * p * q);
    for (off, row) in &rows[1..] {
        if row.len() != p * q {
            return Err(Error::format(
                *off,
                format!("expected {} values, found {}", p * q, row.len()),
            ));
        }
        values.extend(row);
    }
    ImageStack::from_row_major(n, p, q, &values)
}

fn with_path(path: &Path, e: std::io::Error) -> Error {
    Error::Io(std::io::Error::new(
        e.kind(),
        format!("{}: {e}", path.display()),
    ))
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| with_path(path, e))
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| with_path(path, e))
}

pub fn read_stack(path: &Path, format: StackFormat) -> Result<ImageStack> {
    match format {
        StackFormat::Container => decode_container(&read_bytes(path)?).map(|(s, _)| s),
        StackFormat::Mrc => decode_mrc(&read_bytes(path)?),
        StackFormat::Csv => decode_csv_stack(&read_text(path)?),
    }
}

/// Writes `stack`; the container uses f64 unless `dtype` says otherwise.
pub fn write_stack(
    stack: &ImageStack,
    path: &Path,
    format: StackFormat,
    dtype: Option<Dtype>,
) -> Result<()> {
    let bytes = match format {
        StackFormat::Container => encode_container(stack, dtype.unwrap_or(Dtype::F64)),
        StackFormat::Mrc => encode_mrc(stack),
        StackFormat::Csv => encode_csv_stack(stack).into_bytes(),
    };
    std::fs::write(path, bytes)?;
    Ok(())
}

/// CSV matrix with an optional header line.
pub fn encode_matrix_csv(m: &DMatrix<f64>, header: Option<&[&str]>) -> String {
    let mut out = String::new();
    if let Some(h) = header {
        out.push_str(&h.join(","));
        out.push('\n');
    }
    for i in 0..m.nrows() {
        let row: Vec<String> = m.row(i).iter().map(|v| v.to_string()).collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}

/// Parses a numeric CSV matrix. A first line that does not parse as numbers is
/// taken as a header and skipped.
pub fn decode_matrix_csv(text: &str) -> Result<DMatrix<f64>> {
    let rows = numeric_records(text, true)?;
    let Some((_, first)) = rows.first() else {
        return Err(Error::format(0, "CSV matrix has no numeric rows"));
    };
    let d = first.len();
    if let Some((off, r)) = rows.iter().find(|(_, r)| r.len() != d) {
        return Err(Error::format(
            *off,
            format!("expected {d} columns, found {}", r.len()),
        ));
    }
    Ok(DMatrix::from_fn(rows.len(), d, |i, j| rows[i].1[j]))
}

pub fn read_labels_csv(path: &Path) -> Result<Vec<usize>> {
    decode_labels_csv(&read_text(path)?)
}

pub fn read_matrix_csv(path: &Path) -> Result<DMatrix<f64>> {
    decode_matrix_csv(&read_text(path)?)
}

pub fn write_matrix_csv(m: &DMatrix<f64>, path: &Path, header: Option<&[&str]>) -> Result<()> {
    std::fs::write(path, encode_matrix_csv(m, header))?;
    Ok(())
}

pub fn encode_labels_csv(labels: &[usize]) -> String {
    let mut out = String::from("index,label\n");
    for (i, l) in labels.iter().enumerate() {
        let _ = writeln!(out, "{i},{l}");
    }
    out
}

/// Reads the last column of an `index,label` (or single-column) CSV.
pub fn decode_labels_csv(text: &str) -> Result<Vec<usize>> {
    let m = decode_matrix_csv(text)?;
    let last = m.ncols() - 1;
    m.column(last)
        .iter()
        .enumerate()
        .map(|(i, v)| {
            if *v >= 0.0 && v.fract() == 0.0 {
                Ok(*v as usize)
            } else {
                Err(Error::invalid(format!(
                    "label {i} is not a non-negative integer: {v}"
                )))
            }
        })
        .collect()
}

/// Where a fitted model came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    /// Path of the stack the model was fitted on, as given on the command line.
    pub input: Option<String>,
    pub config: FitConfig,
    pub version: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelFile {
    pub model: Hybrid2SdrModel,
    pub provenance: Provenance,
}

/// `2SDM`, version u16, JSON length u64, JSON body, CRC32 of everything before it.
pub fn encode_model(file: &ModelFile) -> Result<Vec<u8>> {
    let json = serde_json::to_vec(file)?;
    let mut out = Vec::with_capacity(14 + json.len() + 4);
    out.extend_from_slice(MODEL_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

pub fn decode_model(bytes: &[u8]) -> Result<ModelFile> {
    let mut cur = Cursor::new(bytes);
    if cur.take(4, "magic")? != MODEL_MAGIC {
        return Err(Error::format(0, "bad magic: not a 2SDM model file"));
    }
    let version = cur.u16("version")?;
    if version != FORMAT_VERSION {
        return Err(Error::format(
            4,
            format!("unsupported model version {version}"),
        ));
    }
    let len = cur.u64("length")? as usize;
    let expected = 14usize.saturating_add(len).saturating_add(4);
    if bytes.len() != expected {
        return Err(Error::format(
            bytes.len().min(expected) as u64,
            format!(
                "model length mismatch: header says {expected} bytes, file has {}",
                bytes.len()
            ),
        ));
    }
    let body = split_crc(bytes, 14)?;
    let file: ModelFile = serde_json::from_slice(&body[14..])?;
    file.model.validate()?;
    Ok(file)
}

pub fn read_model(path: &Path) -> Result<ModelFile> {
    decode_model(&read_bytes(path)?)
}

pub fn write_model(file: &ModelFile, path: &Path) -> Result<()> {
    std::fs::write(path, encode_model(file)?)?;
    Ok(())
}

/// A file written by a run, with its checksum.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OutputRecord {
    pub path: String,
    pub bytes: u64,
    pub crc32: String,
}

impl OutputRecord {
    pub fn of(path: &Path) -> Result<Self> {
        let bytes = read_bytes(path)?;
        Ok(Self {
            path: path.display().to_string(),
            bytes: bytes.len() as u64,
            crc32: format!("{:08x}", crc32fast::hash(&bytes)),
        })
    }
}

/// Everything needed to rerun a command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub argv: Vec<String>,
    pub seed: Option<u64>,
    pub rng: String,
    pub spec: serde_json::Value,
    pub outputs: Vec<OutputRecord>,
}

/// A run record plus its checksum; the creation time sits outside both.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub run: RunRecord,
    pub run_crc32: String,
    pub created_unix: u64,
}

impl Manifest {
    pub fn new(run: RunRecord) -> Result<Self> {
        let run_crc32 = format!("{:08x}", crc32fast::hash(&serde_json::to_vec(&run)?));
        let created_unix = std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0);
        Ok(Self {
            run,
            run_crc32,
            created_unix,
        })
    }

    pub fn verify(&self) -> Result<bool> {
        Ok(format!("{:08x}", crc32fast::hash(&serde_json::to_vec(&self.run)?)) == self.run_crc32)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_stack() -> ImageStack {
        let data: Vec<f64> = (0..18).map(|k| k as f64 * 0.5 - 3.25).collect();
        ImageStack::from_row_major(2, 3, 3, &data).unwrap()
    }

    #[test]
    fn container_header_layout() {
        let bytes = encode_container(&small_stack(), Dtype::F64);
        assert_eq!(&bytes[0..4], b"2SDR");
        assert_eq!(u16::from_le_bytes([bytes[4], bytes[5]]), 1);
        assert_eq!(bytes[6], 1);
        assert_eq!(u64::from_le_bytes(bytes[7..15].try_into().unwrap()), 2);
        assert_eq!(u64::from_le_bytes(bytes[15..23].try_into().unwrap()), 3);
        assert_eq!(bytes.len(), STACK_HEADER_LEN + 18 * 8 + 4);
        // second sample, row 0, column 1 is the 11th value
        let at = STACK_HEADER_LEN + 10 * 8;
        assert_eq!(
            f64::from_le_bytes(bytes[at..at + 8].try_into().unwrap()),
            10.0 * 0.5 - 3.25
        );
    }

    #[test]
    fn container_errors_carry_offsets() {
        let good = encode_container(&small_stack(), Dtype::F32);
        let mut bad = good.clone();
        bad[0] = b'X';
        assert!(matches!(
            decode_container(&bad),
            Err(Error::Format { offset: 0, .. })
        ));
        let mut bad = good.clone();
        bad[6] = 9;
        assert!(matches!(
            decode_container(&bad),
            Err(Error::Format { offset: 6, .. })
        ));
        let cut = &good[..good.len() - 7];
        assert!(
            matches!(decode_container(cut), Err(Error::Format { offset, .. }) if offset == cut.len() as u64)
        );
        let mut bad = good.clone();
        bad[STACK_HEADER_LEN + 2] ^= 0x01;
        assert!(matches!(decode_container(&bad), Err(Error::Format { .. })));
    }

    #[test]
    fn mrc_layout() {
        let bytes = encode_mrc(&small_stack());
        assert_eq!(read_i32(&bytes, 0), 3);
        assert_eq!(read_i32(&bytes, 8), 2);
        assert_eq!(read_i32(&bytes, 12), 2);
        assert_eq!(bytes.len(), 1024 + 18 * 4);
        assert_eq!(decode_mrc(&bytes).unwrap(), small_stack());
    }

    #[test]
    fn csv_round_trips() {
        let s = small_stack();
        assert_eq!(decode_csv_stack(&encode_csv_stack(&s)).unwrap(), s);
        let m = DMatrix::from_row_slice(2, 2, &[0.1, -2.0, 1e-300, 3.5]);
        assert_eq!(
            decode_matrix_csv(&encode_matrix_csv(&m, Some(&["a", "b"]))).unwrap(),
            m
        );
        assert_eq!(
            decode_labels_csv(&encode_labels_csv(&[3, 0, 7])).unwrap(),
            vec![3, 0, 7]
        );
        assert!(decode_csv_stack("2,1,1\n1\n").is_err());
        assert!(matches!(
            decode_matrix_csv("1,2\n3,x\n"),
            Err(Error::Format { offset: 4, .. })
        ));
    }

    #[test]
    fn format_from_path() {
        assert_eq!(
            StackFormat::from_path(Path::new("a.mrcs")),
            StackFormat::Mrc
        );
        assert_eq!(StackFormat::from_path(Path::new("a.CSV")), StackFormat::Csv);
        assert_eq!(
            StackFormat::from_path(Path::new("a.stk")),
            StackFormat::Container
        );
    }

    #[test]
    fn manifest_checksum_ignores_time() {
        let run = RunRecord {
            tool: "tsdr".into(),
            version: "0".into(),
            command: "synth".into(),
            argv: vec![],
            seed: Some(1),
            rng: "chacha20".into(),
            spec: serde_json::json!({"n": 3}),
            outputs: vec![],
        };
        let a = Manifest::new(run.clone()).unwrap();
        let mut b = Manifest::new(run).unwrap();
        b.created_unix += 100;
        assert_eq!(a.run_crc32, b.run_crc32);
        assert!(b.verify().unwrap());
        b.run.seed = Some(2);
        assert!(!b.verify().unwrap());
    }
}
