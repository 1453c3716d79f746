//! Datasets (IDX files and synthetic blobs), the checksummed binary
//! container used for checkpoints and eigenvector sidecars, and CSV reports.

use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{ensure_dim, Error, Result};
use crate::nn::{ModelConfig, ParamVector};
use crate::tensor::{Rng, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum Provenance {
    Idx {
        images_sha256: String,
        labels_sha256: String,
    },
    Synthetic {
        seed: u64,
        split: u64,
        n_per_class: usize,
        separation: f64,
        noise: f64,
    },
    Adversarial(AdversarialManifest),
    Subset {
        parent: Box<Provenance>,
        count: usize,
        seed: u64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdversarialManifest {
    pub attack: String,
    pub epsilon: f64,
    pub seed: u64,
    pub source_checkpoint: String,
    pub pre_clamp_max_norm: f64,
}

/// Inputs `[N, C, H, W]` in `[0, 1]` with class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub inputs: Tensor,
    pub labels: Vec<usize>,
    pub classes: usize,
    pub provenance: Provenance,
}

impl Dataset {
    pub fn new(inputs: Tensor, labels: Vec<usize>, classes: usize, provenance: Provenance) -> Result<Self> {
        ensure_dim!(
            inputs.shape().len() == 4 && inputs.shape()[0] == labels.len(),
            "inputs {:?} for {} labels",
            inputs.shape(),
            labels.len()
        );
        ensure_dim!(!labels.is_empty(), "dataset must hold at least one sample");
        if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
            return Err(Error::Contract(format!("label {bad} outside [0, {classes})")));
        }
        if inputs.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Contract("inputs must lie in [0, 1]".into()));
        }
        Ok(Dataset {
            inputs,
            labels,
            classes,
            provenance,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `(C, H, W)` of one sample.
    pub fn sample_shape(&self) -> [usize; 3] {
        let s = self.inputs.shape();
        [s[1], s[2], s[3]]
    }

    pub fn sample_len(&self) -> usize {
        self.sample_shape().iter().product()
    }

    /// One sample shaped `[C, H, W]` and its label.
    pub fn sample(&self, i: usize) -> (Tensor, usize) {
        let d = self.sample_len();
        let x = Tensor::new(self.sample_shape().to_vec(), self.inputs.data()[i * d..(i + 1) * d].to_vec())
            .expect("sample shape");
        (x, self.labels[i])
    }

    pub fn batch(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        (
            self.inputs.select_leading(indices),
            indices.iter().map(|&i| self.labels[i]).collect(),
        )
    }

    /// First `count` samples after a seeded shuffle.
    pub fn subset(&self, count: usize, seed: u64) -> Result<Dataset> {
        ensure_dim!(count >= 1 && count <= self.len(), "subset of {count} from {}", self.len());
        let mut idx = Rng::new(seed).sample_indices(self.len(), count);
        idx.sort_unstable();
        let (inputs, labels) = self.batch(&idx);
        Ok(Dataset {
            inputs,
            labels,
            classes: self.classes,
            provenance: Provenance::Subset {
                parent: Box::new(self.provenance.clone()),
                count,
                seed,
            },
        })
    }

    pub fn with_inputs(&self, inputs: Tensor, provenance: Provenance) -> Result<Dataset> {
        Dataset::new(inputs, self.labels.clone(), self.classes, provenance)
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn format_err(path: &Path, offset: usize, msg: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        offset: offset as u64,
        msg: msg.into(),
    }
}

fn be_u32(bytes: &[u8], offset: usize, path: &Path) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes(b.try_into().expect("4 bytes")))
        .ok_or_else(|| format_err(path, offset, "truncated header"))
}

const IDX_UBYTE: u8 = 0x08;
const IDX_F64: u8 = 0x0E;

struct IdxArray {
    dims: Vec<usize>,
    values: Vec<f64>,
}

fn parse_idx(bytes: &[u8], path: &Path) -> Result<IdxArray> {
    let magic = be_u32(bytes, 0, path)?;
    let [z0, z1, ty, ndim] = magic.to_be_bytes();
    if z0 != 0 || z1 != 0 || !(ty == IDX_UBYTE || ty == IDX_F64) || ndim == 0 {
        return Err(format_err(path, 0, format!("bad magic 0x{magic:08x}")));
    }
    let mut dims = Vec::with_capacity(ndim as usize);
    for i in 0..ndim as usize {
        dims.push(be_u32(bytes, 4 + 4 * i, path)? as usize);
    }
    let start = 4 + 4 * ndim as usize;
    let count: usize = dims.iter().product();
    let width = if ty == IDX_UBYTE { 1 } else { 8 };
    let need = start + count * width;
    if bytes.len() < need {
        return Err(format_err(
            path,
            bytes.len(),
            format!("truncated data: need {need} bytes, file has {}", bytes.len()),
        ));
    }
    let body = &bytes[start..need];
    let values = if ty == IDX_UBYTE {
        body.iter().map(|&b| f64::from(b) / 255.0).collect()
    } else {
        body.chunks_exact(8)
            .map(|c| f64::from_be_bytes(c.try_into().expect("8 bytes")))
            .collect()
    };
    Ok(IdxArray { dims, values })
}

/// Reads an IDX image file (`0x00000803`/`0x00000804` unsigned bytes scaled
/// by 1/255, or `0x00000E03`/`0x00000E04` big-endian doubles) and an IDX
/// label file (`0x00000801`).
pub fn load_idx(images: &Path, labels: &Path) -> Result<Dataset> {
    let img_bytes = read_file(images)?;
    let lab_bytes = read_file(labels)?;
    let img = parse_idx(&img_bytes, images)?;
    let shape = match img.dims.as_slice() {
        &[n, h, w] => vec![n, 1, h, w],
        &[n, c, h, w] => vec![n, c, h, w],
        _ => return Err(format_err(images, 3, format!("images need 3 or 4 dimensions, got {}", img.dims.len()))),
    };
    let lab_magic = be_u32(&lab_bytes, 0, labels)?;
    if lab_magic != 0x0000_0801 {
        return Err(format_err(labels, 0, format!("bad label magic 0x{lab_magic:08x}")));
    }
    let n = be_u32(&lab_bytes, 4, labels)? as usize;
    if lab_bytes.len() < 8 + n {
        return Err(format_err(labels, lab_bytes.len(), format!("truncated labels: expected {n}")));
    }
    if n != shape[0] {
        return Err(format_err(labels, 4, format!("{n} labels for {} images", shape[0])));
    }
    let label_vals: Vec<usize> = lab_bytes[8..8 + n].iter().map(|&b| b as usize).collect();
    let classes = label_vals.iter().max().map_or(1, |m| m + 1).max(10);
    if img.values.iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(format_err(images, 0, "pixel values outside [0, 1]"));
    }
    Dataset::new(
        Tensor::new(shape, img.values)?,
        label_vals,
        classes,
        Provenance::Idx {
            images_sha256: sha256_hex(&img_bytes),
            labels_sha256: sha256_hex(&lab_bytes),
        },
    )
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Writes inputs as IDX doubles and labels as IDX bytes.
pub fn save_idx(dataset: &Dataset, images: &Path, labels: &Path) -> Result<()> {
    let s = dataset.inputs.shape();
    let mut img = vec![0u8, 0, IDX_F64, 4];
    for &d in s {
        img.extend_from_slice(&(d as u32).to_be_bytes());
    }
    for v in dataset.inputs.data() {
        img.extend_from_slice(&v.to_be_bytes());
    }
    let mut lab = 0x0000_0801u32.to_be_bytes().to_vec();
    lab.extend_from_slice(&(dataset.len() as u32).to_be_bytes());
    for &y in &dataset.labels {
        ensure_dim!(y < 256, "label {y} does not fit the IDX byte format");
        lab.push(y as u8);
    }
    write_bytes(images, &img)?;
    write_bytes(labels, &lab)
}

/// Gaussian class blobs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlobSpec {
    pub n_per_class: usize,
    pub classes: usize,
    /// (channels, height, width)
    pub shape: [usize; 3],
    /// Scale of the per-pixel spread of class centres around 0.5.
    pub separation: f64,
    /// Per-pixel noise standard deviation.
    #[serde(default = "BlobSpec::default_noise")]
    pub noise: f64,
    pub seed: u64,
}

impl BlobSpec {
    fn default_noise() -> f64 {
        0.5
    }

    /// Ten classes on 28×28×1 with saturated, MNIST-like class centres.
    pub fn mnist_like(n_per_class: usize, seed: u64) -> Self {
        Self::new(n_per_class, 10, [1, 28, 28], 2.0, seed)
    }

    pub fn new(n_per_class: usize, classes: usize, shape: [usize; 3], separation: f64, seed: u64) -> Self {
        BlobSpec {
            n_per_class,
            classes,
            shape,
            separation,
            noise: Self::default_noise(),
            seed,
        }
    }
}

pub fn synth_blobs(spec: &BlobSpec) -> Result<Dataset> {
    synth_blobs_split(spec, 0)
}

/// Draws from the same class centres as [`synth_blobs`] (centres depend on
/// the seed only) with an independent noise stream per `split`.
pub fn synth_blobs_split(spec: &BlobSpec, split: u64) -> Result<Dataset> {
    if !(spec.separation > 0.0) || !(spec.noise >= 0.0) {
        return Err(Error::Contract("blob separation must be positive and noise nonnegative".into()));
    }
    ensure_dim!(
        spec.n_per_class >= 1 && spec.classes >= 2,
        "blobs need at least one sample per class and two classes"
    );
    let d: usize = spec.shape.iter().product();
    let mut centre_rng = Rng::derive(spec.seed, 0);
    let centres: Vec<Vec<f64>> = (0..spec.classes)
        .map(|_| {
            (0..d)
                .map(|_| (0.5 + spec.separation * (centre_rng.uniform() - 0.5)).clamp(0.0, 1.0))
                .collect()
        })
        .collect();
    let mut noise_rng = Rng::derive(spec.seed, 1 + split);
    let n = spec.n_per_class * spec.classes;
    let mut inputs = Vec::with_capacity(n * d);
    let mut labels = Vec::with_capacity(n);
    for i in 0..spec.n_per_class {
        for (k, c) in centres.iter().enumerate() {
            let _ = i;
            inputs.extend(c.iter().map(|&m| (m + spec.noise * noise_rng.normal()).clamp(0.0, 1.0)));
            labels.push(k);
        }
    }
    let [ch, h, w] = spec.shape;
    Dataset::new(
        Tensor::new(vec![n, ch, h, w], inputs)?,
        labels,
        spec.classes,
        Provenance::Synthetic {
            seed: spec.seed,
            split,
            n_per_class: spec.n_per_class,
            separation: spec.separation,
            noise: spec.noise,
        },
    )
}

pub const FORMAT_VERSION: u32 = 1;
pub const CHECKPOINT_MAGIC: &[u8; 8] = b"HSLNCKPT";
pub const VECTORS_MAGIC: &[u8; 8] = b"HSLNVECS";

#[derive(Serialize, Deserialize)]
struct ContainerHeader<H> {
    arrays: Vec<usize>,
    meta: H,
}

/// Binary container: magic, version (u32 LE), JSON header length (u64 LE),
/// JSON header, little-endian f64 arrays, SHA-256 of all preceding bytes.
/// Returns the hex content hash.
pub fn write_container<H: Serialize>(path: &Path, magic: &[u8; 8], meta: &H, arrays: &[&[f64]]) -> Result<String> {
    let header = ContainerHeader {
        arrays: arrays.iter().map(|a| a.len()).collect(),
        meta,
    };
    let json = serde_json::to_vec(&header).map_err(|e| Error::Contract(format!("header encoding: {e}")))?;
    let mut bytes = Vec::with_capacity(32 + json.len() + 8 * arrays.iter().map(|a| a.len()).sum::<usize>());
    bytes.extend_from_slice(magic);
    bytes.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    bytes.extend_from_slice(&(json.len() as u64).to_le_bytes());
    bytes.extend_from_slice(&json);
    for a in arrays {
        for v in *a {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    let digest = Sha256::digest(&bytes);
    bytes.extend_from_slice(&digest);
    write_bytes(path, &bytes)?;
    Ok(hex::encode(digest))
}

pub struct Container<H> {
    pub meta: H,
    pub arrays: Vec<Vec<f64>>,
    pub hash: String,
}

pub fn read_container<H: DeserializeOwned>(path: &Path, magic: &[u8; 8]) -> Result<Container<H>> {
    let bytes = read_file(path)?;
    if bytes.len() < 20 + 32 {
        return Err(format_err(path, bytes.len(), "file too short"));
    }
    if &bytes[..8] != magic {
        return Err(format_err(path, 0, "bad magic"));
    }
    let (body, trailer) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != trailer {
        return Err(Error::Corrupt { path: path.to_path_buf() });
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(Error::Version {
            path: path.to_path_buf(),
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let json = body
        .get(20..20 + hlen)
        .ok_or_else(|| format_err(path, 12, "header length exceeds file"))?;
    let header: ContainerHeader<H> =
        serde_json::from_slice(json).map_err(|e| format_err(path, 20, format!("header: {e}")))?;
    let mut offset = 20 + hlen;
    let mut arrays = Vec::with_capacity(header.arrays.len());
    for &len in &header.arrays {
        let end = offset + 8 * len;
        let raw = body
            .get(offset..end)
            .ok_or_else(|| format_err(path, offset, "array exceeds file"))?;
        arrays.push(
            raw.chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect(),
        );
        offset = end;
    }
    if offset != body.len() {
        return Err(format_err(path, offset, "trailing bytes after arrays"));
    }
    Ok(Container {
        meta: header.meta,
        arrays,
        hash: hex::encode(trailer),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub model: ModelConfig,
    pub seed: u64,
    pub epochs_completed: usize,
    /// Free-form provenance (training configuration and the like).
    #[serde(default)]
    pub info: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub theta: ParamVector,
    /// Heavy-ball velocity; empty when not saved.
    pub momentum: Vec<f64>,
    pub bn_stats: Vec<f64>,
}

/// Saves and returns the content hash.
pub fn save_checkpoint(path: &Path, ck: &Checkpoint) -> Result<String> {
    write_container(
        path,
        CHECKPOINT_MAGIC,
        &ck.meta,
        &[ck.theta.as_slice(), &ck.momentum, &ck.bn_stats],
    )
}

pub fn load_checkpoint(path: &Path) -> Result<(Checkpoint, String)> {
    let c: Container<CheckpointMeta> = read_container(path, CHECKPOINT_MAGIC)?;
    let [theta, momentum, bn_stats]: [Vec<f64>; 3] = c
        .arrays
        .try_into()
        .map_err(|_| format_err(path, 20, "checkpoint must hold three arrays"))?;
    Ok((
        Checkpoint {
            meta: c.meta,
            theta: ParamVector(theta),
            momentum,
            bn_stats,
        },
        c.hash,
    ))
}

#[derive(Debug, Clone, PartialEq)]
pub enum Cell {
    Real(f64),
    Int(i64),
    Text(String),
    Bool(bool),
    Missing,
}

impl Cell {
    pub fn render(&self) -> String {
        match self {
            // Debug formatting is the shortest string that parses back to
            // the same bits.
            Cell::Real(v) => format!("{v:?}"),
            Cell::Int(v) => v.to_string(),
            Cell::Text(s) => s.clone(),
            Cell::Bool(b) => b.to_string(),
            Cell::Missing => String::new(),
        }
    }
}

impl From<f64> for Cell {
    fn from(v: f64) -> Self {
        Cell::Real(v)
    }
}

impl From<usize> for Cell {
    fn from(v: usize) -> Self {
        Cell::Int(v as i64)
    }
}

impl From<bool> for Cell {
    fn from(v: bool) -> Self {
        Cell::Bool(v)
    }
}

impl From<&str> for Cell {
    fn from(v: &str) -> Self {
        Cell::Text(v.to_string())
    }
}

impl From<Option<f64>> for Cell {
    fn from(v: Option<f64>) -> Self {
        v.map_or(Cell::Missing, Cell::Real)
    }
}

/// A CSV table with `# key: value` provenance lines above the header.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Report {
    pub comments: Vec<String>,
    pub columns: Vec<String>,
    pub rows: Vec<Vec<Cell>>,
}

impl Report {
    pub fn new(columns: &[&str]) -> Self {
        Report {
            comments: Vec::new(),
            columns: columns.iter().map(|c| c.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn comment(&mut self, key: &str, value: impl std::fmt::Display) {
        self.comments.push(format!("{key}: {value}"));
    }

    pub fn push(&mut self, row: Vec<Cell>) {
        self.rows.push(row);
    }
}

fn csv_line(fields: impl IntoIterator<Item = String>) -> Result<Vec<u8>> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(Vec::new());
    w.write_record(fields.into_iter())
        .map_err(|e| Error::Contract(format!("csv encoding: {e}")))?;
    w.into_inner().map_err(|e| Error::Contract(format!("csv encoding: {e}")))
}

fn comment_block(comments: &[String]) -> Vec<u8> {
    let mut out = Vec::new();
    for c in comments {
        for line in c.lines() {
            out.extend_from_slice(b"# ");
            out.extend_from_slice(line.as_bytes());
            out.push(b'\n');
        }
    }
    out
}

pub fn render_report(report: &Report) -> Result<Vec<u8>> {
    let mut out = comment_block(&report.comments);
    out.extend(csv_line(report.columns.iter().cloned())?);
    for (i, row) in report.rows.iter().enumerate() {
        if row.len() != report.columns.len() {
            return Err(Error::Contract(format!(
                "row {i} has {} cells for {} columns",
                row.len(),
                report.columns.len()
            )));
        }
        out.extend(csv_line(row.iter().map(Cell::render))?);
    }
    Ok(out)
}

pub fn write_report(report: &Report, path: &Path) -> Result<()> {
    let bytes = render_report(report)?;
    write_bytes(path, &bytes)
}

/// Reads a report back: comment lines, header, and raw string cells.
pub fn read_report(path: &Path) -> Result<Report> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut comments = Vec::new();
    let mut body_start = 0;
    for line in text.split_inclusive('\n') {
        match line.strip_prefix("# ") {
            Some(c) => {
                comments.push(c.trim_end_matches('\n').to_string());
                body_start += line.len();
            }
            None => break,
        }
    }
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_reader(text[body_start..].as_bytes());
    let columns = rdr
        .headers()
        .map_err(|e| format_err(path, body_start, e.to_string()))?
        .iter()
        .map(str::to_string)
        .collect();
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| format_err(path, body_start, e.to_string()))?;
        rows.push(rec.iter().map(|s| Cell::Text(s.to_string())).collect());
    }
    Ok(Report {
        comments,
        columns,
        rows,
    })
}

/// Appends CSV rows to a file as they arrive, flushing after each one.
pub struct CsvAppender {
    path: PathBuf,
    out: BufWriter<File>,
    columns: usize,
}

impl CsvAppender {
    /// Creates (truncating) `path` and writes the comments and header once.
    pub fn create(path: &Path, comments: &[String], columns: &[&str]) -> Result<Self> {
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut app = CsvAppender {
            path: path.to_path_buf(),
            out: BufWriter::new(file),
            columns: columns.len(),
        };
        let mut head = comment_block(comments);
        head.extend(csv_line(columns.iter().map(|c| c.to_string()))?);
        app.write(&head)?;
        Ok(app)
    }

    /// Opens an existing file for further rows.
    pub fn append(path: &Path, columns: usize) -> Result<Self> {
        let file = OpenOptions::new()
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        Ok(CsvAppender {
            path: path.to_path_buf(),
            out: BufWriter::new(file),
            columns,
        })
    }

    fn write(&mut self, bytes: &[u8]) -> Result<()> {
        self.out
            .write_all(bytes)
            .and_then(|_| self.out.flush())
            .map_err(|e| Error::io(&self.path, e))
    }

    pub fn row(&mut self, cells: &[Cell]) -> Result<()> {
        if cells.len() != self.columns {
            return Err(Error::Contract(format!(
                "row has {} cells for {} columns",
                cells.len(),
                self.columns
            )));
        }
        let line = csv_line(cells.iter().map(Cell::render))?;
        self.write(&line)
    }
}

pub fn file_sha256(path: &Path) -> Result<String> {
    Ok(sha256_hex(&read_file(path)?))
}
