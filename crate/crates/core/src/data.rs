//! Long-tail datasets: count profiles, Gaussian-blob synthesis, the binary
//! `LTDS` file format, shot-bucket partitioning and noise augmentation.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::matrix::Matrix;

pub const MAGIC: &[u8; 4] = b"LTDS";
pub const FORMAT_VERSION: u32 = 1;
const HEADER_LEN: usize = 20;

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: Matrix,
    labels: Vec<usize>,
    class_counts: Vec<usize>,
    name: String,
}

impl Dataset {
    /// Validates labels against `classes` and derives the per-class counts.
    ///
    /// Classes must already be ordered by non-increasing frequency.
    pub fn new(
        features: Matrix,
        labels: Vec<usize>,
        classes: usize,
        name: impl Into<String>,
    ) -> Result<Self> {
        if labels.len() != features.rows() {
            return Err(Error::dim("Dataset labels", features.rows(), labels.len()));
        }
        let mut counts = vec![0usize; classes];
        for &y in &labels {
            let slot = counts.get_mut(y).ok_or_else(|| {
                Error::Parameter(format!("label {y} out of range for {classes} classes"))
            })?;
            *slot += 1;
        }
        if let Some(j) = counts.windows(2).position(|w| w[0] < w[1]) {
            return Err(Error::Parameter(format!(
                "classes must be sorted by decreasing count: n[{j}]={} < n[{}]={}",
                counts[j],
                j + 1,
                counts[j + 1]
            )));
        }
        Ok(Self {
            features,
            labels,
            class_counts: counts,
            name: name.into(),
        })
    }

    pub fn features(&self) -> &Matrix {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn class_counts(&self) -> &[usize] {
        &self.class_counts
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn classes(&self) -> usize {
        self.class_counts.len()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let (n, d) = self.features.shape();
        let c = self.classes();
        let mut out = Vec::with_capacity(HEADER_LEN + 4 * (n * d + n + c));
        out.extend_from_slice(MAGIC);
        for v in [FORMAT_VERSION, n as u32, d as u32, c as u32] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for &x in self.features.as_slice() {
            out.extend_from_slice(&(x as f32).to_le_bytes());
        }
        for &y in &self.labels {
            out.extend_from_slice(&(y as u32).to_le_bytes());
        }
        for &n in &self.class_counts {
            out.extend_from_slice(&(n as u32).to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], name: impl Into<String>) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(4, "magic")?;
        if magic != MAGIC {
            return Err(Error::Format {
                offset: 0,
                reason: format!("bad magic {magic:?}, expected \"LTDS\""),
            });
        }
        let version = r.u32("version")?;
        if version != FORMAT_VERSION {
            return Err(Error::Format {
                offset: 4,
                reason: format!("unsupported version {version}"),
            });
        }
        let n = r.u32("N")? as usize;
        let d = r.u32("D")? as usize;
        let c = r.u32("C")? as usize;
        let expected = n
            .checked_mul(d)
            .and_then(|nd| nd.checked_add(n + c))
            .and_then(|w| w.checked_mul(4))
            .and_then(|w| w.checked_add(HEADER_LEN))
            .ok_or(Error::Format {
                offset: 8,
                reason: "header sizes overflow".into(),
            })?;
        if bytes.len() < expected {
            return Err(Error::Format {
                offset: bytes.len(),
                reason: format!("truncated payload: need {expected} bytes, have {}", bytes.len()),
            });
        }

        let mut features = Vec::with_capacity(n * d);
        for _ in 0..n * d {
            features.push(r.f32("features")? as f64);
        }
        let labels_at = r.pos;
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let y = r.u32("labels")? as usize;
            if y >= c {
                return Err(Error::Format {
                    offset: labels_at + 4 * i,
                    reason: format!("label {y} out of range for {c} classes"),
                });
            }
            labels.push(y);
        }
        let counts_at = r.pos;
        let mut counts = Vec::with_capacity(c);
        for _ in 0..c {
            counts.push(r.u32("class counts")? as usize);
        }
        if r.pos != bytes.len() {
            return Err(Error::Format {
                offset: r.pos,
                reason: format!("{} trailing bytes", bytes.len() - r.pos),
            });
        }
        let total: usize = counts.iter().sum();
        if total != n {
            return Err(Error::Format {
                offset: counts_at,
                reason: format!("class counts sum to {total} but N = {n}"),
            });
        }
        let features = Matrix::from_vec(n, d, features)?;
        let ds = Dataset::new(features, labels, c, name).map_err(|e| Error::Format {
            offset: labels_at,
            reason: e.to_string(),
        })?;
        if let Some(j) = (0..c).find(|&j| ds.class_counts[j] != counts[j]) {
            return Err(Error::Format {
                offset: counts_at + 4 * j,
                reason: format!(
                    "class {j} count {} disagrees with label frequency {}",
                    counts[j], ds.class_counts[j]
                ),
            });
        }
        Ok(ds)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let name = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        Self::from_bytes(&bytes, name)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize, what: &str) -> Result<&[u8]> {
        let end = self.pos + n;
        if end > self.bytes.len() {
            return Err(Error::Format {
                offset: self.pos,
                reason: format!("truncated while reading {what}"),
            });
        }
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn f32(&mut self, what: &str) -> Result<f32> {
        let b = self.take(4, what)?;
        Ok(f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

/// Exponential long-tail profile: `n_j = round(n_max * IF^(-j/(C-1)))`, at least 1.
pub fn longtail_counts(classes: usize, n_max: usize, imbalance: f64) -> Result<Vec<usize>> {
    if !(imbalance >= 1.0 && imbalance.is_finite()) {
        return Err(Error::Parameter(format!(
            "imbalance factor must be >= 1, got {imbalance}"
        )));
    }
    if classes < 2 {
        return Err(Error::Parameter(format!("need at least 2 classes, got {classes}")));
    }
    if (n_max as f64) < imbalance {
        return Err(Error::Parameter(format!(
            "n_max {n_max} is smaller than the imbalance factor {imbalance}"
        )));
    }
    let last = (classes - 1) as f64;
    Ok((0..classes)
        .map(|j| {
            let n = (n_max as f64 * imbalance.powf(-(j as f64) / last)).round();
            (n as usize).max(1)
        })
        .collect())
}

/// A tail class whose center is pulled toward a head class.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimilarityPair {
    pub head: usize,
    pub tail: usize,
    pub overlap: f64,
}

impl SimilarityPair {
    /// Pairs head class `i` with tail class `classes - 1 - i` for `i < count`.
    pub fn mirrored(classes: usize, count: usize, overlap: f64) -> Vec<Self> {
        (0..count.min(classes / 2))
            .map(|i| SimilarityPair {
                head: i,
                tail: classes - 1 - i,
                overlap,
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub dim: usize,
    pub counts: Vec<usize>,
    pub class_sep: f64,
    pub noise_sigma: f64,
    pub pairs: Vec<SimilarityPair>,
    pub seed: u64,
}

impl SynthConfig {
    /// C=20, D=32, IF=100, n_max=500, separation 3, unit noise, 4 pairs at 0.8.
    pub fn default_longtail(seed: u64) -> Self {
        let classes = 20;
        Self {
            dim: 32,
            counts: longtail_counts(classes, 500, 100.0).expect("valid defaults"),
            class_sep: 3.0,
            noise_sigma: 1.0,
            pairs: SimilarityPair::mirrored(classes, 4, 0.8),
            seed,
        }
    }

    pub fn classes(&self) -> usize {
        self.counts.len()
    }

    fn validate(&self) -> Result<()> {
        if self.dim < 2 {
            return Err(Error::Parameter(format!("feature dim must be >= 2, got {}", self.dim)));
        }
        if self.counts.is_empty() {
            return Err(Error::Parameter("no classes".into()));
        }
        if !(self.noise_sigma >= 0.0) || !(self.class_sep >= 0.0) {
            return Err(Error::Parameter("class_sep and noise_sigma must be >= 0".into()));
        }
        let c = self.classes();
        for p in &self.pairs {
            if !(0.0..=1.0).contains(&p.overlap) {
                return Err(Error::Parameter(format!("overlap {} outside [0, 1]", p.overlap)));
            }
            if p.head >= c || p.tail >= c {
                return Err(Error::Parameter(format!(
                    "pair ({}, {}) out of range for {c} classes",
                    p.head, p.tail
                )));
            }
        }
        Ok(())
    }

    /// Class centers: random directions scaled by `class_sep`, then pairs pulled together.
    pub fn centers(&self) -> Result<Matrix> {
        self.validate()?;
        let mut rng = stream_rng(self.seed, 0);
        let mut centers = Matrix::zeros(self.classes(), self.dim);
        for c in 0..self.classes() {
            let row = centers.row_mut(c);
            loop {
                row.iter_mut().for_each(|v| *v = StandardNormal.sample(&mut rng));
                let n = crate::matrix::norm(row);
                if n > 1e-12 {
                    row.iter_mut().for_each(|v| *v *= self.class_sep / n);
                    break;
                }
            }
        }
        for p in &self.pairs {
            let head = centers.row(p.head).to_vec();
            for (t, h) in centers.row_mut(p.tail).iter_mut().zip(head) {
                *t = (1.0 - p.overlap) * *t + p.overlap * h;
            }
        }
        Ok(centers)
    }
}

fn sample_blobs(
    centers: &Matrix,
    counts: &[usize],
    noise_sigma: f64,
    rng: &mut ChaCha8Rng,
    name: &str,
) -> Result<Dataset> {
    let d = centers.cols();
    let n: usize = counts.iter().sum();
    let mut features = Vec::with_capacity(n * d);
    let mut labels = Vec::with_capacity(n);
    for (c, &count) in counts.iter().enumerate() {
        for _ in 0..count {
            for &mu in centers.row(c) {
                let z: f64 = StandardNormal.sample(rng);
                // stored as f32 on disk; keep the in-memory copy identical
                features.push((mu + noise_sigma * z) as f32 as f64);
            }
            labels.push(c);
        }
    }
    Dataset::new(Matrix::from_vec(n, d, features)?, labels, counts.len(), name)
}

/// Samples the long-tail training set described by `cfg`.
pub fn synth_gaussians(cfg: &SynthConfig) -> Result<Dataset> {
    let centers = cfg.centers()?;
    sample_blobs(&centers, &cfg.counts, cfg.noise_sigma, &mut stream_rng(cfg.seed, 1), "train")
}

/// Training set plus a balanced test set drawn around the same centers.
pub fn synth_train_test(cfg: &SynthConfig, test_per_class: usize) -> Result<(Dataset, Dataset)> {
    if test_per_class == 0 {
        return Err(Error::Parameter("test_per_class must be positive".into()));
    }
    let centers = cfg.centers()?;
    let train = sample_blobs(&centers, &cfg.counts, cfg.noise_sigma, &mut stream_rng(cfg.seed, 1), "train")?;
    let balanced = vec![test_per_class; cfg.classes()];
    let test = sample_blobs(&centers, &balanced, cfg.noise_sigma, &mut stream_rng(cfg.seed, 2), "test")?;
    Ok((train, test))
}

/// Independent deterministic stream `stream` under `seed`.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SplitSpec {
    pub many_threshold: usize,
    pub few_threshold: usize,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            many_threshold: 100,
            few_threshold: 20,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Shot {
    Many,
    Medium,
    Few,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ClassSplit {
    pub many: Vec<usize>,
    pub medium: Vec<usize>,
    pub few: Vec<usize>,
}

impl ClassSplit {
    pub fn bucket(&self, class: usize) -> Option<Shot> {
        if self.many.contains(&class) {
            Some(Shot::Many)
        } else if self.medium.contains(&class) {
            Some(Shot::Medium)
        } else if self.few.contains(&class) {
            Some(Shot::Few)
        } else {
            None
        }
    }

    /// Bucket of every class in order.
    pub fn per_class(&self) -> Vec<Shot> {
        let n = self.many.len() + self.medium.len() + self.few.len();
        (0..n).map(|c| self.bucket(c).expect("partition covers all classes")).collect()
    }
}

/// Many: more than `many_threshold`; few: fewer than `few_threshold`; medium otherwise.
pub fn split_classes(counts: &[usize], spec: SplitSpec) -> ClassSplit {
    let mut split = ClassSplit::default();
    for (c, &n) in counts.iter().enumerate() {
        if n > spec.many_threshold {
            split.many.push(c);
        } else if n < spec.few_threshold {
            split.few.push(c);
        } else {
            split.medium.push(c);
        }
    }
    split
}

/// Adds isotropic Gaussian noise with standard deviation `sigma`.
pub fn augment(batch: &Matrix, sigma: f64, seed: u64) -> Matrix {
    if sigma == 0.0 {
        return batch.clone();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = batch.clone();
    for v in out.as_mut_slice() {
        let z: f64 = StandardNormal.sample(&mut rng);
        *v += sigma * z;
    }
    out
}

/// Draws a fresh per-batch seed from an augmentation stream.
pub fn next_seed<R: Rng + ?Sized>(rng: &mut R) -> u64 {
    rng.random()
}
