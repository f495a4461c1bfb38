//! Labelled datasets with split lineage, synthetic generation, CSV input and
//! deterministic stratified splits.

use std::collections::HashSet;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attacks::BoxDomain;
use crate::error::{Error, Result};
use crate::linalg::{spectral_norm, svd_bruteforce, Matrix, Vector, BRUTEFORCE_LIMIT};

/// Where a dataset's samples came from: the root source, the chain of splits
/// applied to it, and the root indices it holds.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Lineage {
    pub source: String,
    pub path: String,
    pub seed: u64,
    pub indices: Vec<usize>,
}

impl Lineage {
    pub fn root(source: impl Into<String>, seed: u64, n: usize) -> Self {
        Lineage {
            source: source.into(),
            path: "root".into(),
            seed,
            indices: (0..n).collect(),
        }
    }

    /// Whether both datasets hold at least one common root sample.
    pub fn overlaps(&self, other: &Lineage) -> bool {
        if self.source != other.source {
            return false;
        }
        let mine: HashSet<usize> = self.indices.iter().copied().collect();
        other.indices.iter().any(|i| mine.contains(i))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: Vec<Vector>,
    labels: Vec<usize>,
    classes: usize,
    domain: Option<BoxDomain>,
    lineage: Lineage,
}

impl Dataset {
    pub fn new(
        features: Vec<Vector>,
        labels: Vec<usize>,
        classes: usize,
        lineage: Lineage,
    ) -> Result<Self> {
        if features.len() != labels.len() {
            return Err(Error::Dimension(format!(
                "{} feature rows but {} labels",
                features.len(),
                labels.len()
            )));
        }
        if lineage.indices.len() != labels.len() {
            return Err(Error::Dimension("lineage does not match the sample count".into()));
        }
        if let Some(first) = features.first() {
            if let Some(bad) = features.iter().position(|f| f.dim() != first.dim()) {
                return Err(Error::Dimension(format!(
                    "sample {bad} has {} features, expected {}",
                    features[bad].dim(),
                    first.dim()
                )));
            }
        }
        if features.iter().any(|f| !f.is_finite()) {
            return Err(Error::NonFinite("dataset features".into()));
        }
        if let Some(&l) = labels.iter().find(|l| **l >= classes) {
            return Err(Error::InvalidArgument(format!(
                "label {l} out of range for {classes} classes"
            )));
        }
        Ok(Dataset {
            features,
            labels,
            classes,
            domain: None,
            lineage,
        })
    }

    pub fn with_domain(mut self, domain: Option<BoxDomain>) -> Result<Self> {
        if let Some(d) = &domain {
            if d.lo.len() != self.dim() || d.hi.len() != self.dim() {
                return Err(Error::Dimension("domain does not match the feature count".into()));
            }
            if d.lo.iter().zip(&d.hi).any(|(l, h)| !(l <= h)) {
                return Err(Error::InvalidArgument("domain has lo > hi".into()));
            }
        }
        self.domain = domain;
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.first().map_or(0, |f| f.dim())
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn features(&self) -> &[Vector] {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn domain(&self) -> Option<&BoxDomain> {
        self.domain.as_ref()
    }

    pub fn lineage(&self) -> &Lineage {
        &self.lineage
    }

    pub fn samples(&self) -> Vec<(&[f64], usize)> {
        self.features
            .iter()
            .zip(&self.labels)
            .map(|(x, y)| (x.as_ref(), *y))
            .collect()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.classes];
        for l in &self.labels {
            c[*l] += 1;
        }
        c
    }

    /// The samples at `positions`, in that order, with lineage extended by
    /// `name`.
    pub fn subset(&self, positions: &[usize], name: &str, seed: u64) -> Dataset {
        Dataset {
            features: positions.iter().map(|&p| self.features[p].clone()).collect(),
            labels: positions.iter().map(|&p| self.labels[p]).collect(),
            classes: self.classes,
            domain: self.domain.clone(),
            lineage: Lineage {
                source: self.lineage.source.clone(),
                path: format!("{}/{}", self.lineage.path, name),
                seed,
                indices: positions.iter().map(|&p| self.lineage.indices[p]).collect(),
            },
        }
    }

    /// `E‖x‖₂` over the samples.
    pub fn mean_norm(&self) -> f64 {
        if self.is_empty() {
            return 0.0;
        }
        self.features.iter().map(|f| f.norm_l2()).sum::<f64>() / self.len() as f64
    }

    /// Stacked `n × d` feature matrix.
    pub fn matrix(&self) -> Matrix {
        let data = self.features.iter().flat_map(|f| f.iter().copied()).collect();
        Matrix::new(self.len(), self.dim(), data).expect("validated features")
    }
}

/// Norm summaries of a dataset's feature matrix.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DataNorm {
    /// Spectral norm of the stacked feature matrix.
    pub spectral: f64,
    /// Mean per-sample L2 norm.
    pub mean_norm: f64,
}

/// Spectral norm of the `n × d` data matrix, computed exactly through the
/// `d × d` Gram matrix when `d` is small.
pub fn data_norm_bound(data: &Dataset) -> Result<DataNorm> {
    if data.is_empty() {
        return Err(Error::EmptyDataset("data norm of an empty dataset".into()));
    }
    let x = data.matrix();
    let spectral = if data.dim() <= BRUTEFORCE_LIMIT {
        let gram = x.transpose().matmul(&x)?;
        svd_bruteforce(&gram)?.sqrt()
    } else {
        spectral_norm(&x, 1e-12, 20_000)?.value
    };
    Ok(DataNorm {
        spectral,
        mean_norm: data.mean_norm(),
    })
}

fn gram_schmidt(vectors: Vec<Vec<f64>>) -> Vec<Vec<f64>> {
    let mut basis: Vec<Vec<f64>> = Vec::new();
    for mut v in vectors {
        for b in &basis {
            let d: f64 = v.iter().zip(b).map(|(a, c)| a * c).sum();
            v.iter_mut().zip(b).for_each(|(a, c)| *a -= d * c);
        }
        let n = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if n > 1e-12 {
            basis.push(v.into_iter().map(|a| a / n).collect());
        }
    }
    basis
}

/// Class means at the vertices of a regular simplex with pairwise distance
/// `separation`, rotated into `dim` dimensions by a seeded orthogonal map.
/// When `dim < classes − 1` the simplex is projected and no longer regular.
pub fn mixture_means(classes: usize, dim: usize, separation: f64, seed: u64) -> Vec<Vec<f64>> {
    let k = classes;
    // Orthonormal basis of the hyperplane orthogonal to the all-ones vector.
    let plane = gram_schmidt(
        (0..k)
            .map(|i| {
                (0..k)
                    .map(|j| if i == j { 1.0 } else { 0.0 } - 1.0 / k as f64)
                    .collect()
            })
            .collect(),
    );
    let scale = separation / std::f64::consts::SQRT_2;
    let coords: Vec<Vec<f64>> = (0..k)
        .map(|c| {
            plane
                .iter()
                .map(|b| scale * (b[c] - b.iter().sum::<f64>() / k as f64))
                .collect()
        })
        .collect();

    let m = plane.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut gauss = |len: usize| -> Vec<f64> {
        (0..len).map(|_| StandardNormal.sample(&mut rng)).collect()
    };
    // rotation[r][c] maps simplex coordinate c to feature r.
    let rotation: Vec<Vec<f64>> = if dim >= m {
        let cols = gram_schmidt((0..m).map(|_| gauss(dim)).collect());
        (0..dim).map(|r| cols.iter().map(|c| c[r]).collect()).collect()
    } else {
        gram_schmidt((0..dim).map(|_| gauss(m)).collect())
    };
    coords
        .iter()
        .map(|c| {
            rotation
                .iter()
                .map(|row| row.iter().zip(c).map(|(a, b)| a * b).sum())
                .collect()
        })
        .collect()
}

/// Balanced Gaussian mixture: sample `i` has label `i mod classes` and
/// features `μ_label + N(0, I)`.
pub fn gen_gaussian_mixture(
    classes: usize,
    dim: usize,
    separation: f64,
    n: usize,
    seed: u64,
) -> Result<Dataset> {
    if classes < 2 || dim == 0 || n < classes {
        return Err(Error::InvalidArgument(format!(
            "mixture needs classes >= 2, dim >= 1 and n >= classes (got {classes}, {dim}, {n})"
        )));
    }
    if !(separation >= 0.0 && separation.is_finite()) {
        return Err(Error::InvalidArgument(format!("bad separation {separation}")));
    }
    let means = mixture_means(classes, dim, separation, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(0x9E37_79B9_7F4A_7C15));
    let labels: Vec<usize> = (0..n).map(|i| i % classes).collect();
    let features = labels
        .iter()
        .map(|&y| {
            means[y]
                .iter()
                .map(|m| m + Distribution::<f64>::sample(&StandardNormal, &mut rng))
                .collect::<Vec<f64>>()
                .into()
        })
        .collect();
    let source = format!("gm:{classes}x{dim}:sep{separation}:n{n}:seed{seed}");
    Dataset::new(features, labels, classes, Lineage::root(source, seed, n))
}

/// Reads `feature,…,feature,label` rows. When `classes` is `None` it is one
/// more than the largest label.
pub fn load_csv(
    path: &Path,
    classes: Option<usize>,
    domain: Option<BoxDomain>,
    has_header: bool,
) -> Result<Dataset> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let shown = path.display().to_string();
    let parse_err = |line: u64, msg: String| Error::Parse {
        path: shown.clone(),
        line: line as usize,
        msg,
    };
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(has_header)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(bytes.as_slice());
    let mut features: Vec<Vector> = Vec::new();
    let mut labels = Vec::new();
    let mut lines = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            parse_err(line, e.to_string())
        })?;
        let line = record.position().map_or(0, |p| p.line());
        if record.len() < 2 {
            return Err(parse_err(line, "expected at least one feature and a label".into()));
        }
        let (label_field, feature_fields) = (record.len() - 1, record.len() - 1);
        let row = record
            .iter()
            .take(feature_fields)
            .map(|f| {
                f.parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| parse_err(line, format!("bad feature `{f}`")))
            })
            .collect::<Result<Vec<f64>>>()?;
        if let Some(first) = features.first() {
            if first.dim() != row.len() {
                return Err(parse_err(
                    line,
                    format!("{} features, expected {}", row.len(), first.dim()),
                ));
            }
        }
        let raw = &record[label_field];
        let label = raw
            .parse::<usize>()
            .map_err(|_| parse_err(line, format!("bad label `{raw}`")))?;
        features.push(row.into());
        labels.push(label);
        lines.push(line as usize);
    }
    if labels.is_empty() {
        return Err(Error::EmptyDataset(shown));
    }
    let max = labels.iter().copied().max().unwrap_or(0);
    let classes = match classes {
        Some(c) => {
            if let Some(i) = labels.iter().position(|l| *l >= c) {
                return Err(Error::LabelRange {
                    label: labels[i],
                    classes: c,
                    line: lines[i],
                });
            }
            c
        }
        None => max + 1,
    };
    let digest = hex::encode(Sha256::digest(&bytes));
    let n = labels.len();
    Dataset::new(features, labels, classes, Lineage::root(format!("csv:{digest}"), 0, n))?
        .with_domain(domain)
}

/// Writes `feature,…,feature,label` rows without a header. Values use the
/// shortest representation that parses back to the same bits.
pub fn write_csv(data: &Dataset, path: &Path) -> Result<()> {
    let mut out = String::new();
    for (x, y) in data.features.iter().zip(&data.labels) {
        for v in x.iter() {
            out.push_str(&format!("{v:?},"));
        }
        out.push_str(&format!("{y}\n"));
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Per-class sample counts for the first part of a stratified split:
/// largest-remainder rounding of the proportional quota, with singleton
/// classes forced into the first part while room remains.
fn allocate(counts: &[usize], first: usize, n: usize) -> Vec<usize> {
    let quota: Vec<f64> = counts
        .iter()
        .map(|&c| c as f64 * first as f64 / n as f64)
        .collect();
    let forced: Vec<usize> = counts.iter().map(|&c| usize::from(c == 1)).collect();
    let mut alloc: Vec<usize> = quota
        .iter()
        .zip(counts)
        .zip(&forced)
        .map(|((q, &c), &f)| (q.floor() as usize).clamp(f, c))
        .collect();
    let residual = |a: &[usize], k: usize| quota[k] - a[k] as f64;
    let mut total: usize = alloc.iter().sum();
    while total < first {
        let pick = (0..counts.len())
            .filter(|&k| alloc[k] < counts[k])
            .max_by(|&a, &b| {
                residual(&alloc, a)
                    .total_cmp(&residual(&alloc, b))
                    .then(b.cmp(&a))
            });
        let Some(k) = pick else { break };
        alloc[k] += 1;
        total += 1;
    }
    while total > first {
        let pick = (0..counts.len())
            .filter(|&k| alloc[k] > forced[k])
            .min_by(|&a, &b| {
                residual(&alloc, a)
                    .total_cmp(&residual(&alloc, b))
                    .then(b.cmp(&a))
            });
        let Some(k) = pick else { break };
        alloc[k] -= 1;
        total -= 1;
    }
    alloc
}

/// Stratified split into parts of sizes `first` and `n − first` (singleton
/// classes permitting). Positions within each part keep their input order.
pub fn split_stratified(
    data: &Dataset,
    first: usize,
    seed: u64,
    names: (&str, &str),
) -> Result<(Dataset, Dataset)> {
    let n = data.len();
    if n < 2 || first > n {
        return Err(Error::InvalidArgument(format!(
            "cannot take {first} of {n} samples in a two-way split"
        )));
    }
    let counts = data.class_counts();
    for (c, _) in counts.iter().enumerate().filter(|(_, k)| **k == 1) {
        log::warn!("class {c} has a single sample; it goes to the `{}` part", names.0);
    }
    let alloc = allocate(&counts, first, n);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut take = vec![false; n];
    for (class, &count) in alloc.iter().enumerate() {
        let mut members: Vec<usize> = (0..n).filter(|&i| data.labels[i] == class).collect();
        members.shuffle(&mut rng);
        for &i in &members[..count] {
            take[i] = true;
        }
    }
    let a: Vec<usize> = (0..n).filter(|&i| take[i]).collect();
    let b: Vec<usize> = (0..n).filter(|&i| !take[i]).collect();
    Ok((data.subset(&a, names.0, seed), data.subset(&b, names.1, seed)))
}

/// Halves for the substitute (`⌈n/2⌉` samples) and the target (`⌊n/2⌋`).
pub fn split_half(data: &Dataset, seed: u64) -> Result<(Dataset, Dataset)> {
    split_stratified(data, data.len().div_ceil(2), seed, ("substitute", "target"))
}

/// Validation part of `round(fraction·n)` samples and the remainder.
pub fn split_validation(data: &Dataset, fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "validation fraction must lie in (0, 1), got {fraction}"
        )));
    }
    let k = (fraction * data.len() as f64).round() as usize;
    split_stratified(data, k, seed, ("validation", "evaluation"))
}

/// Training part and a test part of `round(test_fraction·n)` samples.
pub fn split_train_test(
    data: &Dataset,
    test_fraction: f64,
    seed: u64,
) -> Result<(Dataset, Dataset)> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "test fraction must lie in (0, 1), got {test_fraction}"
        )));
    }
    let test = (test_fraction * data.len() as f64).round() as usize;
    split_stratified(data, data.len() - test, seed, ("train", "test"))
}
