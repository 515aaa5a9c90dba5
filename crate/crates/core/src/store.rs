//! Binary tensor files, per-image feature bundles and dataset manifests.
//!
//! Tensor file layout (little-endian throughout):
//!
//! ```text
//! magic "MLFV" (4 bytes) | version u16 = 1 | dtype u8 = 1 (f32) | ndim u8
//! | ndim x u64 dims | row-major f32 payload
//! ```
//!
//! A bundle is three such files (penultimate layer, last layer, FC
//! descriptor) referenced from one manifest entry.

use std::collections::HashSet;
use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const MAGIC: [u8; 4] = *b"MLFV";
pub const FORMAT_VERSION: u16 = 1;
pub const DTYPE_F32: u8 = 1;

/// Header size for a tensor of `ndim` dimensions.
pub const fn header_len(ndim: usize) -> usize {
    4 + 2 + 1 + 1 + 8 * ndim
}

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("bad magic bytes {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported format version {0}")]
    UnsupportedVersion(u16),
    #[error("unsupported dtype tag {0}")]
    UnsupportedDtype(u8),
    #[error("tensor must have at least one dimension")]
    ScalarShape,
    #[error("dimension {axis} has size zero")]
    ZeroDim { axis: usize },
    #[error("shape {shape:?} implies {expected} elements but data has {actual}")]
    ShapeMismatch {
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },
    #[error("element count overflows for shape {0:?}")]
    ShapeOverflow(Vec<u64>),
    #[error("payload truncated: expected {expected} bytes, got {actual}")]
    Truncated { expected: usize, actual: usize },
    #[error("{0} trailing bytes after payload")]
    TrailingBytes(usize),
    #[error("non-finite value {value} at element {index}")]
    NonFinite { index: usize, value: f32 },
    #[error("{path}: {source}")]
    File {
        path: PathBuf,
        #[source]
        source: Box<StoreError>,
    },
    #[error("invalid bundle {image_id}: {reason}")]
    InvalidBundle { image_id: String, reason: String },
    #[error("manifest parse error: {0}")]
    ManifestParse(#[from] serde_json::Error),
    #[error("duplicate image_id {0:?} in manifest")]
    DuplicateImageId(String),
    #[error("entry {image_id:?} has unknown class label {label:?}")]
    UnknownClass { image_id: String, label: String },
    #[error("entry {image_id:?} references missing file {path}")]
    MissingFile { image_id: String, path: PathBuf },
}

impl StoreError {
    fn at(path: &Path, err: StoreError) -> StoreError {
        StoreError::File {
            path: path.to_path_buf(),
            source: Box::new(err),
        }
    }

    /// Unwraps `File` context to the underlying cause.
    pub fn root_cause(&self) -> &StoreError {
        match self {
            StoreError::File { source, .. } => source.root_cause(),
            other => other,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DType {
    F32,
}

/// Dense row-major f32 tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self, StoreError> {
        validate_shape(&shape, data.len())?;
        Ok(Tensor { shape, data })
    }

    pub fn from_matrix(m: &Array2<f64>) -> Result<Self, StoreError> {
        let (r, c) = m.dim();
        Tensor::new(vec![r, c], m.iter().map(|&v| v as f32).collect())
    }

    pub fn from_vector(v: &[f64]) -> Result<Self, StoreError> {
        Tensor::new(vec![v.len()], v.iter().map(|&x| x as f32).collect())
    }

    pub fn dtype(&self) -> DType {
        DType::F32
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    /// Widens a 2-D tensor into an f64 matrix.
    pub fn to_matrix(&self) -> Option<Array2<f64>> {
        match self.shape[..] {
            [r, c] => {
                Array2::from_shape_vec((r, c), self.data.iter().map(|&v| v as f64).collect()).ok()
            }
            _ => None,
        }
    }

    pub fn to_vector(&self) -> Array1<f64> {
        self.data.iter().map(|&v| v as f64).collect()
    }
}

fn validate_shape(shape: &[usize], len: usize) -> Result<(), StoreError> {
    if shape.is_empty() {
        return Err(StoreError::ScalarShape);
    }
    if shape.len() > u8::MAX as usize {
        return Err(StoreError::ShapeOverflow(
            shape.iter().map(|&d| d as u64).collect(),
        ));
    }
    if let Some(axis) = shape.iter().position(|&d| d == 0) {
        return Err(StoreError::ZeroDim { axis });
    }
    let expected = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| StoreError::ShapeOverflow(shape.iter().map(|&d| d as u64).collect()))?;
    if expected != len {
        return Err(StoreError::ShapeMismatch {
            shape: shape.to_vec(),
            expected,
            actual: len,
        });
    }
    Ok(())
}

/// Serializes `t` into `sink`. Shape problems are reported before any byte is written.
pub fn write_tensor<W: Write>(t: &Tensor, sink: &mut W) -> Result<(), StoreError> {
    validate_shape(&t.shape, t.data.len())?;
    let mut header = Vec::with_capacity(header_len(t.shape.len()));
    header.extend_from_slice(&MAGIC);
    header.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    header.push(DTYPE_F32);
    header.push(t.shape.len() as u8);
    for &d in &t.shape {
        header.extend_from_slice(&(d as u64).to_le_bytes());
    }
    sink.write_all(&header)?;
    let mut payload = Vec::with_capacity(t.data.len() * 4);
    for v in &t.data {
        payload.extend_from_slice(&v.to_le_bytes());
    }
    sink.write_all(&payload)?;
    Ok(())
}

fn read_exact_or_truncated<R: Read>(source: &mut R, buf: &mut [u8]) -> Result<(), StoreError> {
    let mut filled = 0;
    while filled < buf.len() {
        match source.read(&mut buf[filled..]) {
            Ok(0) => {
                return Err(StoreError::Truncated {
                    expected: buf.len(),
                    actual: filled,
                })
            }
            Ok(n) => filled += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e.into()),
        }
    }
    Ok(())
}

/// Reads only the header and returns the shape.
pub fn read_tensor_header<R: Read>(source: &mut R) -> Result<Vec<usize>, StoreError> {
    let mut fixed = [0u8; 8];
    read_exact_or_truncated(source, &mut fixed)?;
    let magic = [fixed[0], fixed[1], fixed[2], fixed[3]];
    if magic != MAGIC {
        return Err(StoreError::BadMagic(magic));
    }
    let version = u16::from_le_bytes([fixed[4], fixed[5]]);
    if version != FORMAT_VERSION {
        return Err(StoreError::UnsupportedVersion(version));
    }
    if fixed[6] != DTYPE_F32 {
        return Err(StoreError::UnsupportedDtype(fixed[6]));
    }
    let ndim = fixed[7] as usize;
    if ndim == 0 {
        return Err(StoreError::ScalarShape);
    }
    let mut dims_raw = vec![0u8; 8 * ndim];
    read_exact_or_truncated(source, &mut dims_raw)?;
    let dims: Vec<u64> = dims_raw
        .chunks_exact(8)
        .map(|c| u64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect();
    let mut shape = Vec::with_capacity(ndim);
    for (axis, &d) in dims.iter().enumerate() {
        if d == 0 {
            return Err(StoreError::ZeroDim { axis });
        }
        shape.push(usize::try_from(d).map_err(|_| StoreError::ShapeOverflow(dims.clone()))?);
    }
    shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| StoreError::ShapeOverflow(dims.clone()))?;
    Ok(shape)
}

/// Reads one tensor. Rejects NaN and infinite payload values.
pub fn read_tensor<R: Read>(source: &mut R) -> Result<Tensor, StoreError> {
    let shape = read_tensor_header(source)?;
    let count: usize = shape.iter().product();
    let expected = count * 4;
    // Read through `take` so a lying header cannot force a huge allocation up front.
    let mut payload = Vec::new();
    source.take(expected as u64).read_to_end(&mut payload)?;
    if payload.len() != expected {
        return Err(StoreError::Truncated {
            expected,
            actual: payload.len(),
        });
    }
    let mut data = Vec::with_capacity(count);
    for (index, c) in payload.chunks_exact(4).enumerate() {
        let value = f32::from_le_bytes(c.try_into().expect("chunk of 4"));
        if !value.is_finite() {
            return Err(StoreError::NonFinite { index, value });
        }
        data.push(value);
    }
    Ok(Tensor { shape, data })
}

/// Reads a tensor file, additionally rejecting bytes past the payload.
pub fn read_tensor_file(path: &Path) -> Result<Tensor, StoreError> {
    let inner = || -> Result<Tensor, StoreError> {
        let mut reader = BufReader::new(File::open(path)?);
        let t = read_tensor(&mut reader)?;
        let mut rest = Vec::new();
        reader.read_to_end(&mut rest)?;
        if !rest.is_empty() {
            return Err(StoreError::TrailingBytes(rest.len()));
        }
        Ok(t)
    };
    inner().map_err(|e| StoreError::at(path, e))
}

pub fn read_tensor_file_shape(path: &Path) -> Result<Vec<usize>, StoreError> {
    File::open(path)
        .map_err(StoreError::from)
        .and_then(|f| read_tensor_header(&mut BufReader::new(f)))
        .map_err(|e| StoreError::at(path, e))
}

/// Writes a tensor file atomically (temp file in the same directory, then rename).
pub fn write_tensor_file(t: &Tensor, path: &Path) -> Result<(), StoreError> {
    let inner = || -> Result<(), StoreError> {
        let dir = path.parent().filter(|p| !p.as_os_str().is_empty());
        let dir = dir.unwrap_or_else(|| Path::new("."));
        let tmp = tempfile::NamedTempFile::new_in(dir)?;
        {
            let mut w = BufWriter::new(tmp.as_file());
            write_tensor(t, &mut w)?;
            w.flush()?;
        }
        tmp.persist(path).map_err(|e| e.error)?;
        Ok(())
    };
    inner().map_err(|e| StoreError::at(path, e))
}

/// Writes `contents` to `path` through a temp file and rename.
pub fn write_atomic(path: &Path, contents: &[u8]) -> io::Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty());
    let dir = dir.unwrap_or_else(|| Path::new("."));
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(contents)?;
    tmp.flush()?;
    tmp.persist(path).map_err(|e| e.error)?;
    Ok(())
}

/// Local features and FC descriptor of one image.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureBundle {
    pub image_id: String,
    /// T1 x D1 local features of the penultimate convolutional layer.
    pub penultimate: Array2<f64>,
    /// T2 x D2 local features of the last convolutional layer.
    pub last: Array2<f64>,
    pub fc: Array1<f64>,
}

impl FeatureBundle {
    pub fn new(
        image_id: impl Into<String>,
        penultimate: Array2<f64>,
        last: Array2<f64>,
        fc: Array1<f64>,
    ) -> Result<Self, StoreError> {
        let b = FeatureBundle {
            image_id: image_id.into(),
            penultimate,
            last,
            fc,
        };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<(), StoreError> {
        let bad = |reason: String| StoreError::InvalidBundle {
            image_id: self.image_id.clone(),
            reason,
        };
        let (t1, d1) = self.penultimate.dim();
        let (t2, d2) = self.last.dim();
        if t1 == 0 || d1 == 0 || t2 == 0 || d2 == 0 || self.fc.is_empty() {
            return Err(bad("empty layer".into()));
        }
        if t1 < t2 {
            return Err(bad(format!("penultimate rows {t1} < last rows {t2}")));
        }
        if d1 > d2 {
            return Err(bad(format!(
                "penultimate channels {d1} > last channels {d2}"
            )));
        }
        let finite = self.penultimate.iter().all(|v| v.is_finite())
            && self.last.iter().all(|v| v.is_finite())
            && self.fc.iter().all(|v| v.is_finite());
        if !finite {
            return Err(bad("non-finite entry".into()));
        }
        Ok(())
    }

    pub fn load(manifest: &DatasetManifest, entry: &ManifestEntry) -> Result<Self, StoreError> {
        let matrix = |p: &Path, what: &str| -> Result<Array2<f64>, StoreError> {
            let t = read_tensor_file(p)?;
            t.to_matrix().ok_or_else(|| StoreError::InvalidBundle {
                image_id: entry.image_id.clone(),
                reason: format!("{what} tensor has shape {:?}, expected 2-D", t.shape()),
            })
        };
        let penultimate = matrix(&manifest.resolve(&entry.penultimate_path), "penultimate")?;
        let last = matrix(&manifest.resolve(&entry.last_path), "last")?;
        let fc_t = read_tensor_file(&manifest.resolve(&entry.fc_path))?;
        if fc_t.shape().len() != 1 {
            return Err(StoreError::InvalidBundle {
                image_id: entry.image_id.clone(),
                reason: format!("fc tensor has shape {:?}, expected 1-D", fc_t.shape()),
            });
        }
        FeatureBundle::new(entry.image_id.clone(), penultimate, last, fc_t.to_vector())
    }

    /// Writes the three tensors into `dir` and returns the matching manifest entry.
    pub fn save(
        &self,
        dir: &Path,
        class_label: &str,
        sample_tag: Option<String>,
        split_tag: Option<String>,
    ) -> Result<ManifestEntry, StoreError> {
        let stem = sanitize_file_stem(&self.image_id);
        let names = [
            format!("{stem}.penultimate.mlfv"),
            format!("{stem}.last.mlfv"),
            format!("{stem}.fc.mlfv"),
        ];
        write_tensor_file(
            &Tensor::from_matrix(&self.penultimate)?,
            &dir.join(&names[0]),
        )?;
        write_tensor_file(&Tensor::from_matrix(&self.last)?, &dir.join(&names[1]))?;
        write_tensor_file(
            &Tensor::from_vector(self.fc.as_slice().expect("contiguous"))?,
            &dir.join(&names[2]),
        )?;
        let [p, l, f] = names;
        Ok(ManifestEntry {
            image_id: self.image_id.clone(),
            penultimate_path: PathBuf::from(p),
            last_path: PathBuf::from(l),
            fc_path: PathBuf::from(f),
            class_label: class_label.to_string(),
            sample_tag,
            split_tag,
        })
    }
}

fn sanitize_file_stem(id: &str) -> String {
    id.chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '-' || c == '_' {
                c
            } else {
                '_'
            }
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub image_id: String,
    pub penultimate_path: PathBuf,
    pub last_path: PathBuf,
    pub fc_path: PathBuf,
    pub class_label: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sample_tag: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split_tag: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub class_names: Vec<String>,
    pub entries: Vec<ManifestEntry>,
    /// Directory relative bundle paths are resolved against.
    #[serde(skip)]
    pub root: PathBuf,
}

impl DatasetManifest {
    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root.join(p)
        }
    }

    pub fn class_index(&self, label: &str) -> Option<usize> {
        self.class_names.iter().position(|c| c == label)
    }

    pub fn entry(&self, image_id: &str) -> Option<&ManifestEntry> {
        self.entries.iter().find(|e| e.image_id == image_id)
    }

    /// Checks id uniqueness and class labels; bundle files are checked by `check_files`.
    pub fn validate(&self) -> Result<(), StoreError> {
        let mut seen = HashSet::new();
        for e in &self.entries {
            if !seen.insert(e.image_id.as_str()) {
                return Err(StoreError::DuplicateImageId(e.image_id.clone()));
            }
            if self.class_index(&e.class_label).is_none() {
                return Err(StoreError::UnknownClass {
                    image_id: e.image_id.clone(),
                    label: e.class_label.clone(),
                });
            }
        }
        Ok(())
    }

    pub fn check_files(&self) -> Result<(), StoreError> {
        for e in &self.entries {
            for p in [&e.penultimate_path, &e.last_path, &e.fc_path] {
                let full = self.resolve(p);
                if !full.is_file() {
                    return Err(StoreError::MissingFile {
                        image_id: e.image_id.clone(),
                        path: full,
                    });
                }
            }
        }
        Ok(())
    }

    pub fn write(&self, path: &Path) -> Result<(), StoreError> {
        let json = serde_json::to_vec_pretty(self)?;
        write_atomic(path, &json).map_err(|e| StoreError::at(path, e.into()))
    }
}

/// Loads and validates a manifest. Entry order follows the file.
pub fn load_manifest(path: &Path) -> Result<DatasetManifest, StoreError> {
    let bytes = std::fs::read(path).map_err(|e| StoreError::at(path, e.into()))?;
    let mut m: DatasetManifest = serde_json::from_slice(&bytes)?;
    m.root = path
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."));
    m.validate()?;
    m.check_files()?;
    Ok(m)
}
