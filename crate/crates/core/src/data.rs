//! Dataset container for the seen/unseen classification protocol, a
//! deterministic synthetic-benchmark generator, and bundle I/O.
//!
//! The on-disk format (`GZB1`) is a flat little-endian layout: magic, u32
//! header, seen/unseen class ids, attribute matrix, labels, features and the
//! three index arrays. Floats are stored as f32; bundles quantize their
//! values to f32 on construction so a save/load round trip is bitwise.

use std::io::{Read, Write};
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::named_rng;
use crate::tensor::{kernels, Tensor};

/// Low-level little-endian framing shared by the bundle and checkpoint
/// containers.
pub(crate) mod container {
    use thiserror::Error;

    #[derive(Debug, Error)]
    pub enum ContainerError {
        #[error("bad magic bytes")]
        BadMagic,
        #[error("truncated file: needed {needed} more bytes at offset {offset}")]
        Truncated { offset: usize, needed: usize },
        #[error("unsupported container version {0}")]
        UnsupportedVersion(u32),
        #[error("corrupt container: {0}")]
        Corrupt(String),
    }

    pub fn put_u32(buf: &mut Vec<u8>, v: u32) {
        buf.extend_from_slice(&v.to_le_bytes());
    }

    pub struct Reader<'a> {
        bytes: &'a [u8],
        pos: usize,
    }

    impl<'a> Reader<'a> {
        pub fn new(bytes: &'a [u8]) -> Self {
            Reader { bytes, pos: 0 }
        }

        pub fn bytes(&mut self, n: usize) -> Result<&'a [u8], ContainerError> {
            if self.pos + n > self.bytes.len() {
                return Err(ContainerError::Truncated {
                    offset: self.pos,
                    needed: self.pos + n - self.bytes.len(),
                });
            }
            let out = &self.bytes[self.pos..self.pos + n];
            self.pos += n;
            Ok(out)
        }

        pub fn expect_magic(&mut self, magic: &[u8; 4]) -> Result<(), ContainerError> {
            match self.bytes(4) {
                Ok(b) if b == magic => Ok(()),
                Ok(_) => Err(ContainerError::BadMagic),
                Err(_) => Err(ContainerError::BadMagic),
            }
        }

        pub fn u32(&mut self) -> Result<u32, ContainerError> {
            let b = self.bytes(4)?;
            Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        }

        pub fn u32_vec(&mut self, n: usize) -> Result<Vec<u32>, ContainerError> {
            (0..n).map(|_| self.u32()).collect()
        }

        pub fn f32_vec(&mut self, n: usize) -> Result<Vec<f64>, ContainerError> {
            let b = self.bytes(4 * n)?;
            Ok(b.chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                .collect())
        }

        pub fn finished(&self) -> bool {
            self.pos == self.bytes.len()
        }
    }
}

pub use container::ContainerError;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("bad magic bytes in bundle file")]
    BadMagic,
    #[error("truncated bundle file: needed {needed} more bytes at offset {offset}")]
    Truncated { offset: usize, needed: usize },
    #[error("unsupported bundle version {0}")]
    UnsupportedVersion(u32),
    #[error("bundle violates invariants: {}", format_violations(.0))]
    InvariantViolation(Vec<Violation>),
    #[error("io error at {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("parse error in {path}: {detail}")]
    Parse { path: String, detail: String },
}

impl From<ContainerError> for DataError {
    fn from(e: ContainerError) -> Self {
        match e {
            ContainerError::BadMagic => DataError::BadMagic,
            ContainerError::Truncated { offset, needed } => DataError::Truncated { offset, needed },
            ContainerError::UnsupportedVersion(v) => DataError::UnsupportedVersion(v),
            ContainerError::Corrupt(d) => DataError::Parse {
                path: String::new(),
                detail: d,
            },
        }
    }
}

fn format_violations(v: &[Violation]) -> String {
    v.iter()
        .map(|x| x.to_string())
        .collect::<Vec<_>>()
        .join("; ")
}

/// One failed invariant, naming the rule and the offending ids.
#[derive(Clone, Debug, PartialEq)]
pub struct Violation {
    pub invariant: &'static str,
    pub detail: String,
}

impl std::fmt::Display for Violation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}: {}", self.invariant, self.detail)
    }
}

/// Statistics of the reference benchmarks: `(name, attr_dim, seen, unseen,
/// synthesized features per unseen class)`.
pub const DATASET_PROFILES: [(&str, usize, usize, usize, usize); 5] = [
    ("CUB", 312, 150, 50, 700),
    ("SUN", 102, 645, 72, 300),
    ("FLO", 1024, 82, 20, 2400),
    ("AWA1", 85, 40, 10, 4600),
    ("AWA2", 85, 40, 10, 4600),
];

/// Profile matching a bundle name like `"CUB"` or `"CUB-like"`, if any.
/// `AWA1`/`AWA2` are matched before the bare prefix would be ambiguous.
pub fn dataset_profile(name: &str) -> Option<(&'static str, usize, usize, usize, usize)> {
    let upper = name.to_ascii_uppercase();
    DATASET_PROFILES
        .iter()
        .find(|(p, ..)| upper == *p || upper.starts_with(&format!("{p}-")))
        .copied()
}

/// Default number of synthesized features per unseen class for a bundle
/// name, falling back to `fallback` for unknown datasets.
pub fn n_syn_default(name: &str, fallback: usize) -> usize {
    dataset_profile(name)
        .map(|(_, _, _, _, n)| n)
        .unwrap_or(fallback)
}

/// Features, labels, per-class attributes and the seen/unseen split of one
/// benchmark. Immutable after construction; reads of unseen-test features
/// are counted so the inductive training contract can be asserted.
#[derive(Debug)]
pub struct DatasetBundle {
    name: String,
    features: Tensor,
    labels: Vec<u32>,
    attributes: Tensor,
    seen_classes: Vec<u32>,
    unseen_classes: Vec<u32>,
    train_idx: Vec<u32>,
    test_seen_idx: Vec<u32>,
    test_unseen_idx: Vec<u32>,
    unseen_test_reads: Arc<AtomicU64>,
}

impl Clone for DatasetBundle {
    fn clone(&self) -> Self {
        DatasetBundle {
            name: self.name.clone(),
            features: self.features.clone(),
            labels: self.labels.clone(),
            attributes: self.attributes.clone(),
            seen_classes: self.seen_classes.clone(),
            unseen_classes: self.unseen_classes.clone(),
            train_idx: self.train_idx.clone(),
            test_seen_idx: self.test_seen_idx.clone(),
            test_unseen_idx: self.test_unseen_idx.clone(),
            unseen_test_reads: Arc::clone(&self.unseen_test_reads),
        }
    }
}

impl PartialEq for DatasetBundle {
    fn eq(&self, other: &Self) -> bool {
        self.name == other.name
            && self.features == other.features
            && self.labels == other.labels
            && self.attributes == other.attributes
            && self.seen_classes == other.seen_classes
            && self.unseen_classes == other.unseen_classes
            && self.train_idx == other.train_idx
            && self.test_seen_idx == other.test_seen_idx
            && self.test_unseen_idx == other.test_unseen_idx
    }
}

/// Raw fields of a bundle before validation.
#[derive(Clone, Debug)]
pub struct BundleParts {
    pub name: String,
    pub features: Tensor,
    pub labels: Vec<u32>,
    pub attributes: Tensor,
    pub seen_classes: Vec<u32>,
    pub unseen_classes: Vec<u32>,
    pub train_idx: Vec<u32>,
    pub test_seen_idx: Vec<u32>,
    pub test_unseen_idx: Vec<u32>,
}

impl DatasetBundle {
    /// Validating constructor; rejects any invariant violation.
    pub fn new(parts: BundleParts) -> Result<Self, DataError> {
        let bundle = Self::new_unchecked(parts);
        let violations = bundle.validate();
        if violations.is_empty() {
            Ok(bundle)
        } else {
            Err(DataError::InvariantViolation(violations))
        }
    }

    /// Constructor without validation, for building fixtures that are
    /// deliberately broken. Floats are still quantized to f32 to match the
    /// container format.
    pub fn new_unchecked(parts: BundleParts) -> Self {
        let quantize = |t: Tensor| {
            let shape = t.shape().to_vec();
            Tensor::new(shape, t.data().iter().map(|&v| v as f32 as f64).collect())
                .expect("shape preserved")
        };
        DatasetBundle {
            name: parts.name,
            features: quantize(parts.features),
            labels: parts.labels,
            attributes: quantize(parts.attributes),
            seen_classes: parts.seen_classes,
            unseen_classes: parts.unseen_classes,
            train_idx: parts.train_idx,
            test_seen_idx: parts.test_seen_idx,
            test_unseen_idx: parts.test_unseen_idx,
            unseen_test_reads: Arc::new(AtomicU64::new(0)),
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn n_samples(&self) -> usize {
        self.labels.len()
    }

    pub fn feat_dim(&self) -> usize {
        self.features.dims2().map(|(_, c)| c).unwrap_or(0)
    }

    pub fn attr_dim(&self) -> usize {
        self.attributes.dims2().map(|(_, c)| c).unwrap_or(0)
    }

    pub fn n_classes(&self) -> usize {
        self.attributes.dims2().map(|(r, _)| r).unwrap_or(0)
    }

    pub fn attributes(&self) -> &Tensor {
        &self.attributes
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn seen_classes(&self) -> &[u32] {
        &self.seen_classes
    }

    pub fn unseen_classes(&self) -> &[u32] {
        &self.unseen_classes
    }

    pub fn train_idx(&self) -> &[u32] {
        &self.train_idx
    }

    pub fn test_seen_idx(&self) -> &[u32] {
        &self.test_seen_idx
    }

    pub fn test_unseen_idx(&self) -> &[u32] {
        &self.test_unseen_idx
    }

    /// Attribute rows for the given class ids.
    pub fn attributes_for(&self, classes: &[u32]) -> Tensor {
        self.attributes
            .gather_rows(&classes.iter().map(|&c| c as usize).collect::<Vec<_>>())
    }

    /// Feature rows and labels for sample indices in the training split.
    pub fn train_rows(&self, indices: &[u32]) -> (Tensor, Vec<u32>) {
        self.rows(indices)
    }

    /// Feature rows and labels of the seen-class test split.
    pub fn test_seen_rows(&self) -> (Tensor, Vec<u32>) {
        self.rows(&self.test_seen_idx.clone())
    }

    /// Feature rows and labels of the unseen-class test split. Every call
    /// counts as a read of unseen test data.
    pub fn test_unseen_rows(&self) -> (Tensor, Vec<u32>) {
        self.unseen_test_reads.fetch_add(1, Ordering::SeqCst);
        self.rows(&self.test_unseen_idx.clone())
    }

    /// How many times unseen-test features have been read through this
    /// bundle (shared across clones).
    pub fn unseen_test_reads(&self) -> u64 {
        self.unseen_test_reads.load(Ordering::SeqCst)
    }

    fn rows(&self, indices: &[u32]) -> (Tensor, Vec<u32>) {
        let idx: Vec<usize> = indices.iter().map(|&i| i as usize).collect();
        let feats = self.features.gather_rows(&idx);
        let labels = idx.iter().map(|&i| self.labels[i]).collect();
        (feats, labels)
    }

    /// Check every bundle invariant; returns an empty list iff all hold.
    pub fn validate(&self) -> Vec<Violation> {
        let mut out = Vec::new();
        let m = self.labels.len();
        let n_classes = self.n_classes();

        if self.features.dims2().map(|(r, _)| r) != Some(m) {
            out.push(Violation {
                invariant: "features/labels aligned",
                detail: format!("{m} labels but feature shape {:?}", self.features.shape()),
            });
        }
        for &s in &self.seen_classes {
            if self.unseen_classes.contains(&s) {
                out.push(Violation {
                    invariant: "seen and unseen classes disjoint",
                    detail: format!("class {s} appears in both lists"),
                });
            }
        }
        let class_known = |c: u32| (c as usize) < n_classes;
        for &c in self.seen_classes.iter().chain(&self.unseen_classes) {
            if !class_known(c) {
                out.push(Violation {
                    invariant: "every class has an attribute row",
                    detail: format!("class {c} outside attribute matrix with {n_classes} rows"),
                });
            }
        }
        for (i, &l) in self.labels.iter().enumerate() {
            if !class_known(l) {
                out.push(Violation {
                    invariant: "every label has an attribute row",
                    detail: format!(
                        "sample {i} labeled {l}, attribute matrix has {n_classes} rows"
                    ),
                });
                break;
            }
        }
        let check_split =
            |name: &'static str, idx: &[u32], expect_seen: bool, out: &mut Vec<Violation>| {
                for &i in idx {
                    if (i as usize) >= m {
                        out.push(Violation {
                            invariant: "split indices within bounds",
                            detail: format!("{name} index {i} out of {m} samples"),
                        });
                        continue;
                    }
                    let label = self.labels[i as usize];
                    let is_seen = self.seen_classes.contains(&label);
                    let is_unseen = self.unseen_classes.contains(&label);
                    if expect_seen && !is_seen {
                        out.push(Violation {
                            invariant: "seen splits contain only seen classes",
                            detail: format!("{name} index {i} has label {label}"),
                        });
                    } else if !expect_seen && !is_unseen {
                        out.push(Violation {
                            invariant: "unseen split contains only unseen classes",
                            detail: format!("{name} index {i} has label {label}"),
                        });
                    }
                }
            };
        check_split("train", &self.train_idx, true, &mut out);
        check_split("test_seen", &self.test_seen_idx, true, &mut out);
        check_split("test_unseen", &self.test_unseen_idx, false, &mut out);

        let mut all: Vec<u32> = Vec::new();
        all.extend(&self.train_idx);
        all.extend(&self.test_seen_idx);
        all.extend(&self.test_unseen_idx);
        let mut sorted = all.clone();
        sorted.sort_unstable();
        for w in sorted.windows(2) {
            if w[0] == w[1] {
                out.push(Violation {
                    invariant: "split index lists pairwise disjoint",
                    detail: format!("index {} appears in more than one split", w[0]),
                });
                break;
            }
        }

        if let Some((profile, attr_dim, seen, unseen, _)) = dataset_profile(&self.name) {
            if self.attr_dim() != attr_dim {
                out.push(Violation {
                    invariant: "named dataset attribute dimension",
                    detail: format!(
                        "bundle '{}' has attr_dim {}, {profile} requires {attr_dim}",
                        self.name,
                        self.attr_dim()
                    ),
                });
            }
            if self.seen_classes.len() != seen || self.unseen_classes.len() != unseen {
                out.push(Violation {
                    invariant: "named dataset class split",
                    detail: format!(
                        "bundle '{}' has {}/{} seen/unseen, {profile} requires {seen}/{unseen}",
                        self.name,
                        self.seen_classes.len(),
                        self.unseen_classes.len()
                    ),
                });
            }
        }
        out
    }
}

/// List of invariant violations for a bundle (empty when valid).
pub fn validate_bundle(bundle: &DatasetBundle) -> Vec<Violation> {
    bundle.validate()
}

// ---- synthetic benchmark ----------------------------------------------------

/// Desk-scale synthetic benchmark layout.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub n_seen: usize,
    pub n_unseen: usize,
    pub feat_dim: usize,
    pub attr_dim: usize,
    pub samples_per_class: usize,
    /// Noise scale sigma around each class's mean feature.
    pub noise: f64,
    /// Seed of the fixed random linear map from attributes to features.
    pub mix_seed: u64,
    pub name: String,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            n_seen: 8,
            n_unseen: 4,
            feat_dim: 64,
            attr_dim: 16,
            samples_per_class: 60,
            noise: 0.1,
            mix_seed: 0,
            name: "synthetic".to_string(),
        }
    }
}

/// Deterministic synthetic bundle: class attributes uniform in `[0, 1]`,
/// features `x = W a_c + sigma * eps` under a fixed random linear map `W`,
/// 70% of each seen class to train and 30% to the seen test split, all
/// unseen samples to the unseen test split.
pub fn generate_synthetic_bundle(spec: &SyntheticSpec, seed: u64) -> DatasetBundle {
    let n_classes = spec.n_seen + spec.n_unseen;
    let mut attr_rng = named_rng(seed, "data.attrs");
    let attributes = Tensor::matrix(
        n_classes,
        spec.attr_dim,
        (0..n_classes * spec.attr_dim)
            .map(|_| attr_rng.gen::<f64>())
            .collect(),
    );

    let mut mix_rng = named_rng(spec.mix_seed, "data.mix");
    let mixing = Tensor::matrix(
        spec.feat_dim,
        spec.attr_dim,
        (0..spec.feat_dim * spec.attr_dim)
            .map(|_| mix_rng.sample::<f64, _>(StandardNormal))
            .collect(),
    );

    let mut noise_rng = named_rng(seed, "data.noise");
    let mut features = Vec::with_capacity(n_classes * spec.samples_per_class * spec.feat_dim);
    let mut labels = Vec::with_capacity(n_classes * spec.samples_per_class);
    for c in 0..n_classes {
        let a_c = attributes.gather_rows(&[c]);
        let mean = kernels::matmul(&a_c, &mixing, false, true);
        for _ in 0..spec.samples_per_class {
            for &mu in mean.data() {
                let eps: f64 = noise_rng.sample(StandardNormal);
                features.push(mu + spec.noise * eps);
            }
            labels.push(c as u32);
        }
    }
    let features = Tensor::matrix(n_classes * spec.samples_per_class, spec.feat_dim, features);

    let seen_classes: Vec<u32> = (0..spec.n_seen as u32).collect();
    let unseen_classes: Vec<u32> = (spec.n_seen as u32..n_classes as u32).collect();

    let mut split_rng = named_rng(seed, "data.split");
    let mut train_idx = Vec::new();
    let mut test_seen_idx = Vec::new();
    let mut test_unseen_idx = Vec::new();
    for c in 0..n_classes {
        let base = c * spec.samples_per_class;
        let mut idx: Vec<u32> = (base as u32..(base + spec.samples_per_class) as u32).collect();
        if c < spec.n_seen {
            idx.shuffle(&mut split_rng);
            let cut = (spec.samples_per_class as f64 * 0.7).round() as usize;
            train_idx.extend(&idx[..cut]);
            test_seen_idx.extend(&idx[cut..]);
        } else {
            test_unseen_idx.extend(&idx);
        }
    }

    // structural invariants hold by construction; name-profile checks stay
    // with validate() so callers may build profile-named fixtures
    DatasetBundle::new_unchecked(BundleParts {
        name: spec.name.clone(),
        features,
        labels,
        attributes,
        seen_classes,
        unseen_classes,
        train_idx,
        test_seen_idx,
        test_unseen_idx,
    })
}

// ---- GZB1 container ---------------------------------------------------------

const GZB_MAGIC: &[u8; 4] = b"GZB1";
const GZB_VERSION: u32 = 1;

/// Serialize a bundle to the `GZB1` layout.
pub fn save_bundle(bundle: &DatasetBundle, path: &Path) -> Result<(), DataError> {
    let mut buf = Vec::new();
    buf.extend_from_slice(GZB_MAGIC);
    for v in [
        GZB_VERSION,
        bundle.n_samples() as u32,
        bundle.feat_dim() as u32,
        bundle.n_classes() as u32,
        bundle.attr_dim() as u32,
        bundle.seen_classes.len() as u32,
        bundle.unseen_classes.len() as u32,
        bundle.train_idx.len() as u32,
        bundle.test_seen_idx.len() as u32,
        bundle.test_unseen_idx.len() as u32,
    ] {
        container::put_u32(&mut buf, v);
    }
    container::put_u32(&mut buf, bundle.name.len() as u32);
    buf.extend_from_slice(bundle.name.as_bytes());
    for &c in &bundle.seen_classes {
        container::put_u32(&mut buf, c);
    }
    for &c in &bundle.unseen_classes {
        container::put_u32(&mut buf, c);
    }
    for &v in bundle.attributes.data() {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    for &l in &bundle.labels {
        container::put_u32(&mut buf, l);
    }
    for &v in bundle.features.data() {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    for idx in [
        &bundle.train_idx,
        &bundle.test_seen_idx,
        &bundle.test_unseen_idx,
    ] {
        for &i in idx {
            container::put_u32(&mut buf, i);
        }
    }
    std::fs::File::create(path)
        .and_then(|mut f| f.write_all(&buf))
        .map_err(|source| DataError::Io {
            path: path.display().to_string(),
            source,
        })
}

/// Parse and validate a `GZB1` file.
pub fn load_bundle(path: &Path) -> Result<DatasetBundle, DataError> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|source| DataError::Io {
            path: path.display().to_string(),
            source,
        })?;
    let mut r = container::Reader::new(&bytes);
    r.expect_magic(GZB_MAGIC)?;
    let version = r.u32()?;
    if version != GZB_VERSION {
        return Err(DataError::UnsupportedVersion(version));
    }
    let m_total = r.u32()? as usize;
    let feat_dim = r.u32()? as usize;
    let n_classes = r.u32()? as usize;
    let attr_dim = r.u32()? as usize;
    let n_seen = r.u32()? as usize;
    let n_unseen = r.u32()? as usize;
    let n_train = r.u32()? as usize;
    let n_test_seen = r.u32()? as usize;
    let n_test_unseen = r.u32()? as usize;
    let name_len = r.u32()? as usize;
    let name = String::from_utf8(r.bytes(name_len)?.to_vec()).map_err(|_| DataError::Parse {
        path: path.display().to_string(),
        detail: "bundle name is not utf-8".to_string(),
    })?;
    let seen_classes = r.u32_vec(n_seen)?;
    let unseen_classes = r.u32_vec(n_unseen)?;
    let attributes = Tensor::matrix(n_classes, attr_dim, r.f32_vec(n_classes * attr_dim)?);
    let labels = r.u32_vec(m_total)?;
    let features = Tensor::matrix(m_total, feat_dim, r.f32_vec(m_total * feat_dim)?);
    let train_idx = r.u32_vec(n_train)?;
    let test_seen_idx = r.u32_vec(n_test_seen)?;
    let test_unseen_idx = r.u32_vec(n_test_unseen)?;
    if !r.finished() {
        return Err(DataError::Parse {
            path: path.display().to_string(),
            detail: "trailing bytes after bundle payload".to_string(),
        });
    }
    DatasetBundle::new(BundleParts {
        name,
        features,
        labels,
        attributes,
        seen_classes,
        unseen_classes,
        train_idx,
        test_seen_idx,
        test_unseen_idx,
    })
}

// ---- CSV import -------------------------------------------------------------

/// Import a bundle from a directory of hand-editable CSV files:
///
/// * `features.csv` — one sample per line, comma-separated floats
/// * `labels.csv` — one class id per line
/// * `attributes.csv` — one class per line, comma-separated floats
/// * `splits.csv` — lines `seen,<class>`, `unseen,<class>`, `train,<idx>`,
///   `test_seen,<idx>`, `test_unseen,<idx>`; `#` starts a comment
///
/// The bundle name is the directory's file name.
pub fn load_csv_dir(dir: &Path) -> Result<DatasetBundle, DataError> {
    let read = |file: &str| -> Result<String, DataError> {
        let p = dir.join(file);
        std::fs::read_to_string(&p).map_err(|source| DataError::Io {
            path: p.display().to_string(),
            source,
        })
    };
    let parse_matrix = |text: &str, file: &str| -> Result<Tensor, DataError> {
        let mut rows: Vec<Vec<f64>> = Vec::new();
        for (ln, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let row: Result<Vec<f64>, _> =
                line.split(',').map(|v| v.trim().parse::<f64>()).collect();
            rows.push(row.map_err(|e| DataError::Parse {
                path: dir.join(file).display().to_string(),
                detail: format!("line {}: {e}", ln + 1),
            })?);
        }
        let cols = rows.first().map(|r| r.len()).unwrap_or(0);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(DataError::Parse {
                path: dir.join(file).display().to_string(),
                detail: "ragged rows".to_string(),
            });
        }
        Ok(Tensor::matrix(
            rows.len(),
            cols,
            rows.into_iter().flatten().collect(),
        ))
    };

    let features = parse_matrix(&read("features.csv")?, "features.csv")?;
    let attributes = parse_matrix(&read("attributes.csv")?, "attributes.csv")?;
    let labels_text = read("labels.csv")?;
    let mut labels = Vec::new();
    for (ln, line) in labels_text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        labels.push(line.parse::<u32>().map_err(|e| DataError::Parse {
            path: dir.join("labels.csv").display().to_string(),
            detail: format!("line {}: {e}", ln + 1),
        })?);
    }

    let splits_text = read("splits.csv")?;
    let mut seen_classes = Vec::new();
    let mut unseen_classes = Vec::new();
    let mut train_idx = Vec::new();
    let mut test_seen_idx = Vec::new();
    let mut test_unseen_idx = Vec::new();
    for (ln, line) in splits_text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut parts = line.splitn(2, ',');
        let section = parts.next().unwrap_or("").trim();
        let value = parts.next().unwrap_or("").trim();
        let v: u32 = value.parse().map_err(|e| DataError::Parse {
            path: dir.join("splits.csv").display().to_string(),
            detail: format!("line {}: {e}", ln + 1),
        })?;
        match section {
            "seen" => seen_classes.push(v),
            "unseen" => unseen_classes.push(v),
            "train" => train_idx.push(v),
            "test_seen" => test_seen_idx.push(v),
            "test_unseen" => test_unseen_idx.push(v),
            other => {
                return Err(DataError::Parse {
                    path: dir.join("splits.csv").display().to_string(),
                    detail: format!("line {}: unknown section '{other}'", ln + 1),
                })
            }
        }
    }

    let name = dir
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "csv-import".to_string());
    DatasetBundle::new(BundleParts {
        name,
        features,
        labels,
        attributes,
        seen_classes,
        unseen_classes,
        train_idx,
        test_seen_idx,
        test_unseen_idx,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn synthetic_counts_and_determinism() {
        let spec = SyntheticSpec::default();
        let b1 = generate_synthetic_bundle(&spec, 3);
        let b2 = generate_synthetic_bundle(&spec, 3);
        let b3 = generate_synthetic_bundle(&spec, 4);
        assert_eq!(b1, b2);
        assert_ne!(b1, b3);
        // 8 seen + 4 unseen classes at 60 samples each
        assert_eq!(b1.n_samples(), 720);
        assert_eq!(b1.train_idx().len() + b1.test_seen_idx().len(), 480);
        assert_eq!(b1.train_idx().len(), 336);
        assert_eq!(b1.test_unseen_idx().len(), 240);
        assert!(b1.validate().is_empty());
    }

    #[test]
    fn zero_noise_collapses_each_class() {
        let spec = SyntheticSpec {
            noise: 0.0,
            samples_per_class: 5,
            ..SyntheticSpec::default()
        };
        let b = generate_synthetic_bundle(&spec, 1);
        let (rows, labels) = b.rows(&(0..5u32).collect::<Vec<_>>());
        assert!(labels.iter().all(|&l| l == 0));
        for i in 1..5 {
            assert_eq!(rows.row(i), rows.row(0));
        }
    }

    #[test]
    fn zero_noise_class_means_recover_labels_by_nearest_mean() {
        let spec = SyntheticSpec {
            noise: 0.0,
            ..SyntheticSpec::default()
        };
        let b = generate_synthetic_bundle(&spec, 7);
        // class means in feature space, one per class
        let n_classes = b.n_classes();
        let per = spec.samples_per_class;
        for c in 0..n_classes {
            let sample = b.features.gather_rows(&[c * per]);
            let mut best = (f64::INFINITY, usize::MAX);
            for c2 in 0..n_classes {
                let other = b.features.gather_rows(&[c2 * per]);
                let d: f64 = sample
                    .data()
                    .iter()
                    .zip(other.data())
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum();
                if d < best.0 {
                    best = (d, c2);
                }
            }
            assert_eq!(best.1, c, "class {c} not recovered");
        }
    }

    #[test]
    fn roundtrip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("b.gzb");
        let b = generate_synthetic_bundle(&SyntheticSpec::default(), 11);
        save_bundle(&b, &path).unwrap();
        let loaded = load_bundle(&path).unwrap();
        assert_eq!(b, loaded);
    }

    #[test]
    fn corrupt_magic_is_bad_magic() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("b.gzb");
        let b = generate_synthetic_bundle(&SyntheticSpec::default(), 1);
        save_bundle(&b, &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] = b'X';
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(load_bundle(&path), Err(DataError::BadMagic)));
    }

    #[test]
    fn truncated_file_is_truncated() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("b.gzb");
        let b = generate_synthetic_bundle(&SyntheticSpec::default(), 1);
        save_bundle(&b, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
        assert!(matches!(
            load_bundle(&path),
            Err(DataError::Truncated { .. })
        ));
    }

    #[test]
    fn overlapping_split_fails_on_load() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("b.gzb");
        let b = generate_synthetic_bundle(&SyntheticSpec::default(), 1);
        let mut parts = BundleParts {
            name: b.name().to_string(),
            features: b.features.clone(),
            labels: b.labels.clone(),
            attributes: b.attributes.clone(),
            seen_classes: b.seen_classes.clone(),
            unseen_classes: b.unseen_classes.clone(),
            train_idx: b.train_idx.clone(),
            test_seen_idx: b.test_seen_idx.clone(),
            test_unseen_idx: b.test_unseen_idx.clone(),
        };
        parts.test_seen_idx[0] = parts.train_idx[0];
        let broken = DatasetBundle::new_unchecked(parts);
        save_bundle(&broken, &path).unwrap();
        assert!(matches!(
            load_bundle(&path),
            Err(DataError::InvariantViolation(_))
        ));
    }

    #[test]
    fn validate_reports_specific_violations() {
        let b = generate_synthetic_bundle(&SyntheticSpec::default(), 1);
        assert!(validate_bundle(&b).is_empty());

        let mut parts = BundleParts {
            name: b.name().to_string(),
            features: b.features.clone(),
            labels: b.labels.clone(),
            attributes: b.attributes.clone(),
            seen_classes: b.seen_classes.clone(),
            unseen_classes: b.unseen_classes.clone(),
            train_idx: b.train_idx.clone(),
            test_seen_idx: b.test_seen_idx.clone(),
            test_unseen_idx: b.test_unseen_idx.clone(),
        };
        parts.unseen_classes.push(parts.seen_classes[0]);
        let broken = DatasetBundle::new_unchecked(parts.clone());
        let v = broken.validate();
        assert!(v.iter().any(|x| x.invariant.contains("disjoint")
            && x.detail.contains(&parts.seen_classes[0].to_string())));

        // label referencing a class with no attribute row
        let mut parts2 = parts.clone();
        parts2.unseen_classes.pop();
        parts2.labels[0] = 999;
        let broken2 = DatasetBundle::new_unchecked(parts2);
        assert!(broken2
            .validate()
            .iter()
            .any(|x| x.invariant.contains("attribute row")));
    }

    #[test]
    fn named_dataset_profile_is_enforced() {
        assert_eq!(dataset_profile("CUB-like").map(|p| p.1), Some(312));
        assert_eq!(n_syn_default("SUN-like", 42), 300);
        assert_eq!(n_syn_default("FLO", 42), 2400);
        assert_eq!(n_syn_default("AWA2-mini", 42), 4600);
        assert_eq!(n_syn_default("synthetic", 42), 42);

        // a CUB-named bundle must carry 312 attributes and a 150/50 split
        let spec = SyntheticSpec {
            name: "CUB-like".to_string(),
            ..SyntheticSpec::default()
        };
        let b = generate_synthetic_bundle(&spec, 1);
        let v = b.validate();
        assert!(v
            .iter()
            .any(|x| x.invariant.contains("attribute dimension")));
        assert!(v.iter().any(|x| x.invariant.contains("class split")));
    }

    #[test]
    fn csv_import_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(
            dir.path().join("features.csv"),
            "1.0,2.0\n3.0,4.0\n5.0,6.0\n7.0,8.0\n",
        )
        .unwrap();
        std::fs::write(dir.path().join("labels.csv"), "0\n0\n1\n1\n").unwrap();
        std::fs::write(dir.path().join("attributes.csv"), "0.1,0.2\n0.3,0.4\n").unwrap();
        std::fs::write(
            dir.path().join("splits.csv"),
            "# fixture\nseen,0\nunseen,1\ntrain,0\ntest_seen,1\ntest_unseen,2\ntest_unseen,3\n",
        )
        .unwrap();
        let b = load_csv_dir(dir.path()).unwrap();
        assert_eq!(b.n_samples(), 4);
        assert_eq!(b.seen_classes(), &[0]);
        assert_eq!(b.unseen_classes(), &[1]);
        assert!(b.validate().is_empty());
    }

    #[test]
    fn unseen_read_counter_counts() {
        let b = generate_synthetic_bundle(&SyntheticSpec::default(), 5);
        assert_eq!(b.unseen_test_reads(), 0);
        let _ = b.test_seen_rows();
        assert_eq!(b.unseen_test_reads(), 0);
        let _ = b.test_unseen_rows();
        assert_eq!(b.unseen_test_reads(), 1);
        let clone = b.clone();
        let _ = clone.test_unseen_rows();
        assert_eq!(b.unseen_test_reads(), 2);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]
        #[test]
        fn random_bundles_roundtrip(
            n_seen in 1usize..5,
            n_unseen in 1usize..4,
            feat in 1usize..6,
            attr in 1usize..5,
            per_class in 2usize..6,
            seed in 0u64..500,
        ) {
            let spec = SyntheticSpec {
                n_seen,
                n_unseen,
                feat_dim: feat,
                attr_dim: attr,
                samples_per_class: per_class,
                noise: 0.05,
                mix_seed: seed / 2,
                name: format!("prop-{seed}"),
            };
            let b = generate_synthetic_bundle(&spec, seed);
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("p.gzb");
            save_bundle(&b, &path).unwrap();
            let loaded = load_bundle(&path).unwrap();
            prop_assert_eq!(&b, &loaded);
        }
    }
}
