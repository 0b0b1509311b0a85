//! Vector datasets, the synthetic class/mode generator, and the `SCNV`
//! (dataset) and `SCNE` (embedding) file formats.
//!
//! ```text
//! SCNV: "SCNV" | 0x01 | u32 n | u32 d | u8 flags (bit0 = has modes)
//!       | n*d f32 | n i32 class | [n i32 mode]
//! SCNE: "SCNE" | 0x01 | u32 n | u32 d | n*d f32
//! ```
//! All little-endian.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::binfmt::{self, ByteReader};
use crate::embedding::{EmbeddingMatrix, LabelVector};
use crate::error::{Error, Result};

const DATASET_MAGIC: &[u8; 4] = b"SCNV";
const EMBEDDING_MAGIC: &[u8; 4] = b"SCNE";
const FLAG_MODES: u8 = 0x01;

#[derive(Debug, Clone, PartialEq)]
pub struct VectorDataset {
    n: usize,
    d: usize,
    features: Vec<f32>,
    labels: Vec<u32>,
    modes: Option<Vec<u32>>,
    /// Free-form origin note; not persisted.
    pub provenance: String,
}

impl VectorDataset {
    pub fn new(
        d: usize,
        features: Vec<f32>,
        labels: Vec<u32>,
        modes: Option<Vec<u32>>,
    ) -> Result<Self> {
        if d == 0 {
            return Err(Error::BadShape("dataset dimension must be >= 1".into()));
        }
        let n = labels.len();
        if features.len() != n * d {
            return Err(Error::BadShape(format!(
                "{} feature values for {n} rows of dim {d}",
                features.len()
            )));
        }
        if let Some(m) = &modes {
            if m.len() != n {
                return Err(Error::LabelMismatch {
                    labels: m.len(),
                    rows: n,
                });
            }
        }
        if let Some(i) = features.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(i));
        }
        Ok(Self {
            n,
            d,
            features,
            labels,
            modes,
            provenance: String::new(),
        })
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn features(&self) -> &[f32] {
        &self.features
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.features[i * self.d..(i + 1) * self.d]
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn modes(&self) -> Option<&[u32]> {
        self.modes.as_deref()
    }

    pub fn label_vector(&self) -> LabelVector {
        LabelVector {
            labels: self.labels.clone(),
            modes: self.modes.clone(),
        }
    }

    /// Features widened to f64.
    pub fn to_matrix(&self) -> EmbeddingMatrix {
        EmbeddingMatrix::new(
            self.n,
            self.d,
            self.features.iter().map(|&v| v as f64).collect(),
        )
        .expect("dataset invariants guarantee a valid matrix")
    }

    pub fn num_classes(&self) -> usize {
        self.labels.iter().max().map_or(0, |&m| m as usize + 1)
    }
}

/// Two-level mixture: classes on a sphere, modes offset from their class
/// center, isotropic Gaussian samples around each mode.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub modes_per_class: usize,
    pub dim: usize,
    pub per_mode: usize,
    pub class_radius: f64,
    pub mode_radius: f64,
    pub noise: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            classes: 10,
            modes_per_class: 4,
            dim: 64,
            per_mode: 200,
            class_radius: 1.0,
            mode_radius: 1.5,
            noise: 0.35,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.classes == 0 || self.modes_per_class == 0 || self.dim == 0 || self.per_mode == 0 {
            return Err(Error::InvalidConfig(
                "synthetic counts must all be >= 1".into(),
            ));
        }
        if !(self.class_radius > 0.0 && self.mode_radius > 0.0) {
            return Err(Error::InvalidConfig("radii must be > 0".into()));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::InvalidConfig("noise must be finite and >= 0".into()));
        }
        Ok(())
    }
}

fn random_direction(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-9 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

struct Split {
    features: Vec<f32>,
    labels: Vec<u32>,
    modes: Vec<u32>,
}

fn generate_parts(spec: &SyntheticSpec, holdout_per_mode: usize) -> Result<(Split, Split)> {
    spec.validate()?;
    let d = spec.dim;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let noise = Normal::new(0.0, spec.noise).unwrap();
    let mut train = Split {
        features: Vec::new(),
        labels: Vec::new(),
        modes: Vec::new(),
    };
    let mut test = Split {
        features: Vec::new(),
        labels: Vec::new(),
        modes: Vec::new(),
    };
    for c in 0..spec.classes {
        let center: Vec<f64> = random_direction(&mut rng, d)
            .into_iter()
            .map(|x| x * spec.class_radius)
            .collect();
        for m in 0..spec.modes_per_class {
            let offset = random_direction(&mut rng, d);
            let mode_center: Vec<f64> = center
                .iter()
                .zip(&offset)
                .map(|(c, o)| c + spec.mode_radius * o)
                .collect();
            let mode_id = (c * spec.modes_per_class + m) as u32;
            for s in 0..spec.per_mode + holdout_per_mode {
                let dst = if s < spec.per_mode { &mut train } else { &mut test };
                for &mc in &mode_center {
                    let x: f64 = mc + noise.sample(&mut rng);
                    dst.features.push(x as f32);
                }
                dst.labels.push(c as u32);
                dst.modes.push(mode_id);
            }
        }
    }
    Ok((train, test))
}

fn into_dataset(s: Split, d: usize, note: String) -> Result<VectorDataset> {
    let mut ds = VectorDataset::new(d, s.features, s.labels, Some(s.modes))?;
    ds.provenance = note;
    Ok(ds)
}

/// Samples are emitted class by class, mode by mode. Mode ids are global
/// (`class * modes_per_class + mode`).
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<VectorDataset> {
    let (train, _) = generate_parts(spec, 0)?;
    into_dataset(train, spec.dim, format!("synthetic {spec:?}"))
}

/// Like [`generate_synthetic`] but draws `holdout_per_mode` extra samples
/// per mode from the same centers into a separate test set.
pub fn generate_synthetic_split(
    spec: &SyntheticSpec,
    holdout_per_mode: usize,
) -> Result<(VectorDataset, VectorDataset)> {
    if holdout_per_mode == 0 {
        return Err(Error::InvalidConfig("holdout_per_mode must be >= 1".into()));
    }
    let (train, test) = generate_parts(spec, holdout_per_mode)?;
    Ok((
        into_dataset(train, spec.dim, format!("synthetic train {spec:?}"))?,
        into_dataset(test, spec.dim, format!("synthetic holdout {spec:?}"))?,
    ))
}

fn put_f32s(buf: &mut Vec<u8>, vals: impl Iterator<Item = f32>) {
    for v in vals {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

fn put_ids(buf: &mut Vec<u8>, ids: &[u32]) -> Result<()> {
    for &v in ids {
        let v = i32::try_from(v).map_err(|_| Error::BadShape(format!("label {v} exceeds i32")))?;
        buf.extend_from_slice(&v.to_le_bytes());
    }
    Ok(())
}

pub fn write_dataset(ds: &VectorDataset, path: &Path) -> Result<()> {
    binfmt::write_file(path, |buf| {
        binfmt::put_header(buf, DATASET_MAGIC);
        binfmt::put_u32(buf, ds.n, "n")?;
        binfmt::put_u32(buf, ds.d, "d")?;
        buf.push(if ds.modes.is_some() { FLAG_MODES } else { 0 });
        put_f32s(buf, ds.features.iter().copied());
        put_ids(buf, &ds.labels)?;
        if let Some(m) = &ds.modes {
            put_ids(buf, m)?;
        }
        Ok(())
    })
}

fn read_dims(r: &mut ByteReader) -> Result<(usize, usize)> {
    let (n, d) = (r.u32()? as usize, r.u32()? as usize);
    if d == 0 {
        return Err(Error::Corrupt("dimension 0".into()));
    }
    Ok((n, d))
}

fn expect_payload(r: &ByteReader, want: Option<usize>) -> Result<()> {
    match want {
        Some(w) if w == r.remaining() => Ok(()),
        _ => Err(Error::Corrupt(format!(
            "header implies {} payload bytes, file has {}",
            want.map_or_else(|| "overflowing".to_string(), |w| w.to_string()),
            r.remaining()
        ))),
    }
}

fn read_ids(r: &mut ByteReader, n: usize, what: &str) -> Result<Vec<u32>> {
    (0..n)
        .map(|i| {
            let v = r.i32()?;
            u32::try_from(v).map_err(|_| Error::Corrupt(format!("{what} {i} is negative ({v})")))
        })
        .collect()
}

fn read_f32s(r: &mut ByteReader, count: usize) -> Result<Vec<f32>> {
    let vals = (0..count).map(|_| r.f32()).collect::<Result<Vec<_>>>()?;
    if let Some(i) = vals.iter().position(|v| !v.is_finite()) {
        return Err(Error::Corrupt(format!("non-finite feature at {i}")));
    }
    Ok(vals)
}

pub fn read_dataset(path: &Path) -> Result<VectorDataset> {
    let bytes = binfmt::read_file(path)?;
    let mut r = ByteReader::new(&bytes);
    r.header(DATASET_MAGIC)?;
    let (n, d) = read_dims(&mut r)?;
    let flags = r.u8()?;
    if flags & !FLAG_MODES != 0 {
        return Err(Error::FormatVersion(format!("unknown flags {flags:#04x}")));
    }
    let has_modes = flags & FLAG_MODES != 0;
    let label_cols = if has_modes { 2 } else { 1 };
    let want = n
        .checked_mul(d)
        .and_then(|nd| nd.checked_add(n * label_cols))
        .and_then(|v| v.checked_mul(4));
    expect_payload(&r, want)?;
    let features = read_f32s(&mut r, n * d)?;
    let labels = read_ids(&mut r, n, "label")?;
    let modes = if has_modes {
        Some(read_ids(&mut r, n, "mode")?)
    } else {
        None
    };
    r.finish()?;
    let mut ds = VectorDataset::new(d, features, labels, modes)?;
    ds.provenance = format!("read from {}", path.display());
    Ok(ds)
}

/// Stores the matrix at 32-bit precision.
pub fn write_embeddings(m: &EmbeddingMatrix, path: &Path) -> Result<()> {
    binfmt::write_file(path, |buf| {
        binfmt::put_header(buf, EMBEDDING_MAGIC);
        binfmt::put_u32(buf, m.rows(), "n")?;
        binfmt::put_u32(buf, m.dim(), "d")?;
        put_f32s(buf, m.values().iter().map(|&v| v as f32));
        Ok(())
    })
}

/// Reads an embedding file. The result is not flagged normalized; callers
/// renormalize at 64-bit precision before similarity work.
pub fn read_embeddings(path: &Path) -> Result<EmbeddingMatrix> {
    let bytes = binfmt::read_file(path)?;
    let mut r = ByteReader::new(&bytes);
    r.header(EMBEDDING_MAGIC)?;
    let (n, d) = read_dims(&mut r)?;
    expect_payload(&r, n.checked_mul(d).and_then(|v| v.checked_mul(4)))?;
    let vals = read_f32s(&mut r, n * d)?;
    r.finish()?;
    EmbeddingMatrix::new(n, d, vals.into_iter().map(f64::from).collect())
}
