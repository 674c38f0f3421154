//! Review and summary state carried from one epoch to the next.
//!
//! [`EpochCache`] keeps the raw logits and correctness mask of the previous
//! epoch, indexed by dataset position. [`FeatureStore`] collects penultimate
//! features per class during an epoch and is drained into median
//! [`ClassCenters`], from which the cosine similarity matrix and the soft
//! targets are built.

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::losses::{kl_rows, mse_logits, LossOutput};
use crate::matrix::{argmax, dot, norm, Matrix};
use crate::par::Execution;

#[derive(Debug, Clone, PartialEq)]
pub struct EpochCache {
    prev_logits: Matrix,
    correct_mask: Vec<bool>,
    epoch_index: usize,
}

impl EpochCache {
    pub fn new(samples: usize, classes: usize, epoch_index: usize) -> Self {
        Self {
            prev_logits: Matrix::zeros(samples, classes),
            correct_mask: vec![false; samples],
            epoch_index,
        }
    }

    pub fn logits(&self) -> &Matrix {
        &self.prev_logits
    }

    pub fn correct_mask(&self) -> &[bool] {
        &self.correct_mask
    }

    pub fn epoch_index(&self) -> usize {
        self.epoch_index
    }

    /// Number of cached samples currently in the correctly-classified set.
    pub fn num_correct(&self) -> usize {
        self.correct_mask.iter().filter(|&&m| m).count()
    }

    /// Stores `logits` rows at the dataset positions in `indices` and
    /// recomputes their correctness against `labels`.
    pub fn update(&mut self, indices: &[usize], logits: &Matrix, labels: &[usize]) -> Result<()> {
        if indices.len() != logits.rows() || labels.len() != logits.rows() {
            return Err(Error::dim(
                "EpochCache::update rows",
                logits.rows(),
                format!("{} indices / {} labels", indices.len(), labels.len()),
            ));
        }
        if logits.cols() != self.prev_logits.cols() {
            return Err(Error::dim("EpochCache::update classes", self.prev_logits.cols(), logits.cols()));
        }
        let n = self.correct_mask.len();
        if let Some(&bad) = indices.iter().find(|&&i| i >= n) {
            return Err(Error::Parameter(format!("cache index {bad} out of range for {n} samples")));
        }
        for (r, (&i, &y)) in indices.iter().zip(labels).enumerate() {
            let row = logits.row(r);
            self.prev_logits.row_mut(i).copy_from_slice(row);
            self.correct_mask[i] = argmax(row) == y;
        }
        Ok(())
    }
}

/// Which consistency term the review step applies to correctly classified rows.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReviewKind {
    Distill,
    LogitMse,
}

/// Review loss over the rows of a batch that were correctly classified last epoch.
///
/// Averages over the qualifying rows; returns zero loss and gradient when none
/// qualify. Non-qualifying rows get exactly zero gradient.
pub fn kr_batch_loss(
    cache: Option<&EpochCache>,
    indices: &[usize],
    cur_logits: &Matrix,
    tau: f64,
) -> Result<LossOutput> {
    review_batch_loss(cache, indices, cur_logits, tau, ReviewKind::Distill)
}

pub fn review_batch_loss(
    cache: Option<&EpochCache>,
    indices: &[usize],
    cur_logits: &Matrix,
    tau: f64,
    kind: ReviewKind,
) -> Result<LossOutput> {
    let cache = cache.ok_or_else(|| {
        Error::State("no previous-epoch cache; the first epoch trains on the base loss only".into())
    })?;
    if indices.len() != cur_logits.rows() {
        return Err(Error::dim("kr_batch_loss indices", cur_logits.rows(), indices.len()));
    }
    cur_logits.ensure_shape("kr_batch_loss logits", indices.len(), cache.prev_logits.cols())?;
    let n = cache.correct_mask.len();
    if let Some(&bad) = indices.iter().find(|&&i| i >= n) {
        return Err(Error::Parameter(format!("cache index {bad} out of range for {n} samples")));
    }

    let rows: Vec<usize> = (0..indices.len()).filter(|&r| cache.correct_mask[indices[r]]).collect();
    let mut out = LossOutput::zero(cur_logits.rows(), cur_logits.cols());
    if rows.is_empty() {
        return Ok(out);
    }
    let prev = cache.prev_logits.gather_rows(&rows.iter().map(|&r| indices[r]).collect::<Vec<_>>());
    let cur = cur_logits.gather_rows(&rows);
    let count = rows.len() as f64;
    let (value, grad) = match kind {
        ReviewKind::Distill => {
            let (values, grad) = kl_rows(&prev, &cur, tau)?;
            (values.iter().sum::<f64>() / count, grad)
        }
        ReviewKind::LogitMse => {
            let o = mse_logits(&prev, &cur)?;
            let mut g = o.dlogits;
            // undo the per-call mean so both kinds scale by 1/count below
            g.as_mut_slice().iter_mut().for_each(|v| *v *= count);
            (o.value, g)
        }
    };
    out.value = value;
    for (k, &r) in rows.iter().enumerate() {
        for (d, g) in out.dlogits.row_mut(r).iter_mut().zip(grad.row(k)) {
            *d = g / count;
        }
    }
    Ok(out)
}

/// Per-class buffers of penultimate features gathered during one epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureStore {
    dim: usize,
    per_class: Vec<Vec<f64>>,
}

impl FeatureStore {
    pub fn new(classes: usize, dim: usize) -> Self {
        Self {
            dim,
            per_class: vec![Vec::new(); classes],
        }
    }

    pub fn classes(&self) -> usize {
        self.per_class.len()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn count(&self, class: usize) -> usize {
        self.per_class[class].len() / self.dim.max(1)
    }

    pub fn push(&mut self, class: usize, feature: &[f64]) -> Result<()> {
        if feature.len() != self.dim {
            return Err(Error::dim("FeatureStore::push", self.dim, feature.len()));
        }
        let slot = self.per_class.get_mut(class).ok_or_else(|| {
            Error::Parameter(format!("class {class} out of range for feature store"))
        })?;
        slot.extend_from_slice(feature);
        Ok(())
    }

    pub fn push_batch(&mut self, features: &Matrix, labels: &[usize]) -> Result<()> {
        for (row, &y) in features.row_iter().zip(labels) {
            self.push(y, row)?;
        }
        Ok(())
    }

    /// Computes median centers and empties the buffers.
    pub fn drain_centers(&mut self) -> ClassCenters {
        let centers = class_centers_median(self);
        self.per_class.iter_mut().for_each(Vec::clear);
        centers
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassCenters {
    centers: Matrix,
    valid: Vec<bool>,
}

impl ClassCenters {
    pub fn new(centers: Matrix, valid: Vec<bool>) -> Result<Self> {
        if valid.len() != centers.rows() {
            return Err(Error::dim("ClassCenters valid", centers.rows(), valid.len()));
        }
        Ok(Self { centers, valid })
    }

    /// Center of `class`, or `None` if the class had no samples.
    pub fn center(&self, class: usize) -> Option<&[f64]> {
        self.valid[class].then(|| self.centers.row(class))
    }

    pub fn valid(&self) -> &[bool] {
        &self.valid
    }

    pub fn classes(&self) -> usize {
        self.valid.len()
    }
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_unstable_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Per-class, per-dimension median of the stored features.
pub fn class_centers_median(store: &FeatureStore) -> ClassCenters {
    let dim = store.dim;
    let work: usize = store.per_class.iter().map(Vec::len).sum();
    let exec = Execution::for_work(work * 8);
    let rows = exec.map(store.classes(), |c| {
        let buf = &store.per_class[c];
        let n = buf.len() / dim.max(1);
        if n == 0 {
            return None;
        }
        let mut col = vec![0.0; n];
        let center = (0..dim)
            .map(|d| {
                for (s, v) in col.iter_mut().enumerate() {
                    *v = buf[s * dim + d];
                }
                median(&mut col)
            })
            .collect::<Vec<_>>();
        Some(center)
    });
    let mut centers = Matrix::zeros(rows.len(), dim);
    let mut valid = vec![false; rows.len()];
    for (c, row) in rows.into_iter().enumerate() {
        if let Some(row) = row {
            centers.row_mut(c).copy_from_slice(&row);
            valid[c] = true;
        }
    }
    ClassCenters { centers, valid }
}

/// Cosine similarity between class centers.
///
/// Zero-norm centers get similarity 0 to every other class and 1 to themselves.
pub fn similarity_matrix(centers: &ClassCenters) -> Result<Matrix> {
    let invalid: Vec<usize> = (0..centers.classes()).filter(|&c| !centers.valid[c]).collect();
    if !invalid.is_empty() {
        return Err(Error::State(format!("class centers missing for classes {invalid:?}")));
    }
    let c = centers.classes();
    let norms: Vec<f64> = centers.centers.row_iter().map(norm).collect();
    let mut m = Matrix::identity(c);
    for i in 0..c {
        for j in i + 1..c {
            let s = if norms[i] < 1e-12 || norms[j] < 1e-12 {
                0.0
            } else {
                let cos = dot(centers.centers.row(i), centers.centers.row(j)) / (norms[i] * norms[j]);
                cos.clamp(-1.0, 1.0)
            };
            m[(i, j)] = s;
            m[(j, i)] = s;
        }
    }
    Ok(m)
}

/// Similarity matrix together with the soft targets built from it.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftLabels {
    pub similarity: Matrix,
    /// Row `r` is the target for ground-truth class `r`.
    pub targets: Matrix,
    pub alpha: f64,
}

impl SoftLabels {
    /// Target rows for a batch of labels.
    pub fn targets_for(&self, labels: &[usize]) -> Matrix {
        self.targets.gather_rows(labels)
    }
}

/// `alpha * I + (1 - alpha) * M`, optionally rescaled so each row sums to one.
pub fn reconstruct_labels(similarity: &Matrix, alpha: f64, normalize: bool) -> Result<SoftLabels> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Parameter(format!("alpha must lie in [0, 1], got {alpha}")));
    }
    let (r, c) = similarity.shape();
    if r != c {
        return Err(Error::dim("reconstruct_labels", format!("{r}x{r}"), format!("{r}x{c}")));
    }
    let mut targets = Matrix::zeros(c, c);
    for i in 0..c {
        for j in 0..c {
            let eye = if i == j { 1.0 } else { 0.0 };
            targets[(i, j)] = alpha * eye + (1.0 - alpha) * similarity[(i, j)];
        }
        if normalize {
            let s: f64 = targets.row(i).iter().sum();
            if s > 0.0 {
                targets.row_mut(i).iter_mut().for_each(|v| *v /= s);
            }
        }
    }
    Ok(SoftLabels {
        similarity: similarity.clone(),
        targets,
        alpha,
    })
}

/// Mean `KL(prev || cur)` per ground-truth class; `None` for classes without samples.
pub fn per_class_adjacent_kl(
    prev_logits: &Matrix,
    cur_logits: &Matrix,
    labels: &[usize],
    classes: usize,
    tau: f64,
) -> Result<Vec<Option<f64>>> {
    if labels.len() != cur_logits.rows() {
        return Err(Error::dim("per_class_adjacent_kl labels", cur_logits.rows(), labels.len()));
    }
    let (values, _) = kl_rows(prev_logits, cur_logits, tau)?;
    let mut sums = vec![0.0; classes];
    let mut counts = vec![0usize; classes];
    for (v, &y) in values.iter().zip(labels) {
        if y >= classes {
            return Err(Error::Parameter(format!("label {y} out of range")));
        }
        sums[y] += v / (tau * tau);
        counts[y] += 1;
    }
    Ok(sums
        .into_iter()
        .zip(counts)
        .map(|(s, n)| (n > 0).then(|| s / n as f64))
        .collect())
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    fn ranks(v: &[f64]) -> Vec<f64> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
        let mut r = vec![0.0; v.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
                j += 1;
            }
            let avg = (i + j) as f64 / 2.0 + 1.0;
            for k in i..=j {
                r[idx[k]] = avg;
            }
            i = j + 1;
        }
        r
    }
    let (rx, ry) = (ranks(x), ranks(y));
    let n = rx.len() as f64;
    let mx = rx.iter().sum::<f64>() / n;
    let my = ry.iter().sum::<f64>() / n;
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    if vx == 0.0 || vy == 0.0 {
        0.0
    } else {
        cov / (vx * vy).sqrt()
    }
}

/// Writes a square matrix as CSV with class indices as the header row.
pub fn write_matrix_csv(path: &Path, m: &Matrix) -> Result<()> {
    let mut out = String::new();
    out.push_str(&(0..m.cols()).map(|c| c.to_string()).collect::<Vec<_>>().join(","));
    out.push('\n');
    for row in m.row_iter() {
        out.push_str(&row.iter().map(|v| format!("{v}")).collect::<Vec<_>>().join(","));
        out.push('\n');
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
}
