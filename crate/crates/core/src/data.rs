//! Datasets and their federation across clients.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Matrix;

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Features plus one-hot labels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub features: Matrix,
    pub labels: Matrix,
}

impl Dataset {
    pub fn new(features: Matrix, labels: Matrix) -> Result<Self> {
        if features.rows() != labels.rows() {
            return Err(Error::shape(format!(
                "{} feature rows but {} label rows",
                features.rows(),
                labels.rows()
            )));
        }
        for i in 0..labels.rows() {
            let row = labels.row(i);
            let ones = row.iter().filter(|&&v| v == 1.0).count();
            let zeros = row.iter().filter(|&&v| v == 0.0).count();
            if ones != 1 || ones + zeros != row.len() {
                return Err(Error::domain(format!("label row {i} is not one-hot")));
            }
        }
        features.ensure_finite("features")?;
        Ok(Dataset { features, labels })
    }

    /// Builds one-hot labels from class indices.
    pub fn from_classes(features: Matrix, classes: &[usize], class_count: usize) -> Result<Self> {
        if let Some(&bad) = classes.iter().find(|&&c| c >= class_count) {
            return Err(Error::domain(format!("class {bad} outside 0..{class_count}")));
        }
        let labels = Matrix::from_fn(classes.len(), class_count, |i, j| {
            if classes[i] == j {
                1.0
            } else {
                0.0
            }
        });
        Dataset::new(features, labels)
    }

    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn class_count(&self) -> usize {
        self.labels.cols()
    }

    pub fn feature_dim(&self) -> usize {
        self.features.cols()
    }

    pub fn class_of(&self, i: usize) -> usize {
        self.labels
            .row(i)
            .iter()
            .position(|&v| v == 1.0)
            .expect("one-hot row")
    }

    pub fn classes(&self) -> Vec<usize> {
        (0..self.len()).map(|i| self.class_of(i)).collect()
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            features: self.features.select_rows(indices),
            labels: self.labels.select_rows(indices),
        }
    }

    pub fn concat(parts: &[&Dataset]) -> Result<Dataset> {
        let f: Vec<&Matrix> = parts.iter().map(|d| &d.features).collect();
        let l: Vec<&Matrix> = parts.iter().map(|d| &d.labels).collect();
        Ok(Dataset {
            features: Matrix::vstack(&f)?,
            labels: Matrix::vstack(&l)?,
        })
    }

    /// Applies `(x − mean) / std` to every feature.
    pub fn standardize(&mut self, mean: f64, std: f64) -> Result<()> {
        if !(std > 0.0) || !mean.is_finite() || !std.is_finite() {
            return Err(Error::domain(format!("cannot standardize with mean {mean}, std {std}")));
        }
        self.features.map_inplace(|v| (v - mean) / std);
        Ok(())
    }

    /// Number of samples per class.
    pub fn class_histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.class_count()];
        for i in 0..self.len() {
            h[self.class_of(i)] += 1;
        }
        h
    }
}

fn be_u32(bytes: &[u8], at: usize) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Format("header truncated".into()))
}

/// Parses an IDX image file (magic `0x00000803`), scaling bytes to `[0, 1]`.
///
/// Returns the pixel matrix (one flattened image per row) and the image
/// height and width.
pub fn parse_idx_images(bytes: &[u8]) -> Result<(Matrix, usize, usize)> {
    let magic = be_u32(bytes, 0)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::Format(format!("image magic {magic:#010x}, expected {IDX_IMAGES_MAGIC:#010x}")));
    }
    let n = be_u32(bytes, 4)? as usize;
    let rows = be_u32(bytes, 8)? as usize;
    let cols = be_u32(bytes, 12)? as usize;
    let body = &bytes[16..];
    if body.len() != n * rows * cols {
        return Err(Error::Format(format!(
            "header declares {n} images of {rows}x{cols} but the payload has {} bytes",
            body.len()
        )));
    }
    let data = body.iter().map(|&b| b as f64 / 255.0).collect();
    Ok((Matrix::from_vec(n, rows * cols, data)?, rows, cols))
}

/// Parses an IDX label file (magic `0x00000801`).
pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<usize>> {
    let magic = be_u32(bytes, 0)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::Format(format!("label magic {magic:#010x}, expected {IDX_LABELS_MAGIC:#010x}")));
    }
    let n = be_u32(bytes, 4)? as usize;
    let body = &bytes[8..];
    if body.len() != n {
        return Err(Error::Format(format!(
            "header declares {n} labels but the payload has {} bytes",
            body.len()
        )));
    }
    Ok(body.iter().map(|&b| b as usize).collect())
}

/// Loads an IDX image/label pair as a 10-class dataset.
pub fn load_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<Dataset> {
    let (features, _, _) = parse_idx_images(&fs::read(images_path)?)?;
    let labels = parse_idx_labels(&fs::read(labels_path)?)?;
    if labels.len() != features.rows() {
        return Err(Error::Format(format!(
            "{} images but {} labels",
            features.rows(),
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&c| c >= 10) {
        return Err(Error::Format(format!("label {bad} outside 0..10")));
    }
    Dataset::from_classes(features, &labels, 10)
}

/// Knobs of the synthetic federated dataset.
///
/// Client `i` draws `u_i ~ N(0, alpha²)` and `B_i ~ N(0, beta²)`; its model is
/// `W_i ~ N(u_i, 1)`, `b_i ~ N(u_i, 1)` and its features `x ~ N(v_i, Σ)` with
/// `v_i ~ N(B_i, 1)` per coordinate and `Σ = diag(j^−1.2)`. Labels are
/// `argmax(W_iᵀx + b_i)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticParams {
    pub alpha: f64,
    pub beta: f64,
    pub clients: usize,
    #[serde(default = "default_dim")]
    pub dim: usize,
    #[serde(default = "default_classes")]
    pub classes: usize,
    /// Samples summed over all clients.
    #[serde(default = "default_total")]
    pub total_samples: usize,
    /// Floor on any client's sample count.
    #[serde(default = "default_min_samples")]
    pub min_samples: usize,
    /// Client of rank `r` (1-based) gets a share proportional to `r^−exponent`.
    #[serde(default = "default_exponent")]
    pub power_exponent: f64,
}

fn default_dim() -> usize {
    60
}
fn default_classes() -> usize {
    10
}
fn default_total() -> usize {
    10_000
}
fn default_min_samples() -> usize {
    20
}
fn default_exponent() -> f64 {
    1.2
}

impl SyntheticParams {
    pub fn new(alpha: f64, beta: f64, clients: usize) -> Self {
        SyntheticParams {
            alpha,
            beta,
            clients,
            dim: default_dim(),
            classes: default_classes(),
            total_samples: default_total(),
            min_samples: default_min_samples(),
            power_exponent: default_exponent(),
        }
    }
}

/// Largest-remainder rounding of `weights · total` to integers summing to `total`.
///
/// Remainder ties go to the lower index.
pub fn largest_remainder(weights: &[f64], total: usize) -> Vec<usize> {
    let sum: f64 = weights.iter().sum();
    let raw: Vec<f64> = weights.iter().map(|w| w / sum * total as f64).collect();
    let mut counts: Vec<usize> = raw.iter().map(|r| r.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let (ra, rb) = (raw[a] - counts[a] as f64, raw[b] - counts[b] as f64);
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    for &i in order.iter().take(total.saturating_sub(assigned)) {
        counts[i] += 1;
    }
    counts
}

/// Per-client sample counts: `min_samples` each, plus the remainder shared in
/// proportion to `rank^−exponent` (client 0 has rank 1).
pub fn power_law_counts(clients: usize, total: usize, exponent: f64, min_samples: usize) -> Result<Vec<usize>> {
    if clients == 0 {
        return Err(Error::domain("need at least one client"));
    }
    let floor = clients * min_samples;
    if total < floor {
        return Err(Error::domain(format!(
            "{total} samples cannot give {clients} clients {min_samples} each"
        )));
    }
    let weights: Vec<f64> = (1..=clients).map(|r| (r as f64).powf(-exponent)).collect();
    Ok(largest_remainder(&weights, total - floor)
        .into_iter()
        .map(|c| c + min_samples)
        .collect())
}

pub fn generate_synthetic(params: &SyntheticParams, seed: u64) -> Result<Vec<Dataset>> {
    let SyntheticParams {
        alpha,
        beta,
        clients,
        dim,
        classes,
        ..
    } = *params;
    if !(alpha >= 0.0) || !(beta >= 0.0) {
        return Err(Error::domain(format!("alpha {alpha} and beta {beta} must be non-negative")));
    }
    if dim == 0 || classes == 0 {
        return Err(Error::domain("feature and class dimensions must be positive"));
    }
    let counts = power_law_counts(clients, params.total_samples, params.power_exponent, params.min_samples)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let std_normal = Normal::new(0.0, 1.0).expect("unit normal");
    let sd: Vec<f64> = (1..=dim).map(|j| (j as f64).powf(-1.2).sqrt()).collect();

    let mut out = Vec::with_capacity(clients);
    for &n in &counts {
        let u = alpha * std_normal.sample(&mut rng);
        let b_mean = beta * std_normal.sample(&mut rng);
        let v: Vec<f64> = (0..dim).map(|_| b_mean + std_normal.sample(&mut rng)).collect();
        let w = Matrix::from_fn(dim, classes, |_, _| u + std_normal.sample(&mut rng));
        let bias: Vec<f64> = (0..classes).map(|_| u + std_normal.sample(&mut rng)).collect();

        let x = Matrix::from_fn(n, dim, |_, j| v[j] + sd[j] * std_normal.sample(&mut rng));
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let row = x.row(i);
            let mut best = 0;
            let mut best_score = f64::NEG_INFINITY;
            for c in 0..classes {
                let score: f64 = bias[c] + row.iter().enumerate().map(|(j, xj)| xj * w.get(j, c)).sum::<f64>();
                if score > best_score {
                    best = c;
                    best_score = score;
                }
            }
            labels.push(best);
        }
        out.push(Dataset::from_classes(x, &labels, classes)?);
    }
    Ok(out)
}

/// Disjoint per-client index sets over a parent dataset.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FederatedSplit {
    pub clients: Vec<Vec<usize>>,
}

impl FederatedSplit {
    pub fn client_count(&self) -> usize {
        self.clients.len()
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.clients.iter().map(Vec::len).collect()
    }

    /// Checks pairwise disjointness and that every index is below `parent_len`.
    pub fn validate(&self, parent_len: usize) -> Result<()> {
        let mut seen = vec![false; parent_len];
        for (c, idx) in self.clients.iter().enumerate() {
            for &i in idx {
                if i >= parent_len {
                    return Err(Error::domain(format!("client {c} holds index {i} beyond {parent_len}")));
                }
                if std::mem::replace(&mut seen[i], true) {
                    return Err(Error::domain(format!("index {i} assigned twice")));
                }
            }
        }
        Ok(())
    }
}

/// Draws `Dir(beta, …, beta)` over `n` categories from normalized gamma draws.
pub fn sample_dirichlet(rng: &mut ChaCha8Rng, beta: f64, n: usize) -> Result<Vec<f64>> {
    let gamma = Gamma::new(beta, 1.0).map_err(|e| Error::domain(format!("dirichlet({beta}): {e}")))?;
    loop {
        let draws: Vec<f64> = (0..n).map(|_| gamma.sample(rng)).collect();
        let sum: f64 = draws.iter().sum();
        if sum > 0.0 && sum.is_finite() {
            return Ok(draws.into_iter().map(|g| g / sum).collect());
        }
    }
}

/// Label-skewed partition: each class's samples are spread over the clients by
/// a fresh `Dir(beta)` draw, rounded with largest remainders.
///
/// Afterwards any client below `min_samples` receives samples, one at a time,
/// from the currently largest client.
pub fn partition_dirichlet(
    classes: &[usize],
    class_count: usize,
    clients: usize,
    beta: f64,
    min_samples: usize,
    seed: u64,
) -> Result<FederatedSplit> {
    if !(beta > 0.0) || !beta.is_finite() {
        return Err(Error::domain(format!("dirichlet concentration must be positive, got {beta}")));
    }
    if clients == 0 {
        return Err(Error::domain("need at least one client"));
    }
    if clients * min_samples.max(1) > classes.len() {
        return Err(Error::domain(format!(
            "{} samples cannot give {clients} clients {min_samples} each",
            classes.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut parts: Vec<Vec<usize>> = vec![Vec::new(); clients];
    for class in 0..class_count {
        let mut members: Vec<usize> = (0..classes.len()).filter(|&i| classes[i] == class).collect();
        if members.is_empty() {
            continue;
        }
        members.shuffle(&mut rng);
        let props = sample_dirichlet(&mut rng, beta, clients)?;
        let counts = largest_remainder(&props, members.len());
        let mut start = 0;
        for (c, &k) in counts.iter().enumerate() {
            parts[c].extend_from_slice(&members[start..start + k]);
            start += k;
        }
    }
    let floor = min_samples.max(1);
    while let Some(short) = (0..clients).find(|&c| parts[c].len() < floor) {
        let donor = (0..clients)
            .max_by(|&a, &b| parts[a].len().cmp(&parts[b].len()).then(b.cmp(&a)))
            .expect("clients");
        let moved = parts[donor].pop().expect("donor has samples");
        parts[short].push(moved);
    }
    for p in &mut parts {
        p.sort_unstable();
    }
    Ok(FederatedSplit { clients: parts })
}

/// Seeded shuffle then split; the first `floor(train_fraction · n)` shuffled
/// indices form the training side.
pub fn split_train_test(indices: &[usize], train_fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::domain(format!("train fraction {train_fraction} outside (0, 1)")));
    }
    let n = indices.len();
    let n_train = (train_fraction * n as f64).floor() as usize;
    if n_train == 0 || n_train == n {
        return Err(Error::domain(format!(
            "splitting {n} samples at {train_fraction} leaves one side empty"
        )));
    }
    let mut shuffled = indices.to_vec();
    shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let test = shuffled.split_off(n_train);
    Ok((shuffled, test))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn idx_images(n: u32, rows: u32, cols: u32, pixels: &[u8]) -> Vec<u8> {
        let mut b = Vec::new();
        for v in [IDX_IMAGES_MAGIC, n, rows, cols] {
            b.extend_from_slice(&v.to_be_bytes());
        }
        b.extend_from_slice(pixels);
        b
    }

    fn idx_labels(labels: &[u8]) -> Vec<u8> {
        let mut b = Vec::new();
        b.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
        b.extend_from_slice(&(labels.len() as u32).to_be_bytes());
        b.extend_from_slice(labels);
        b
    }

    #[test]
    fn idx_fixture_round_trip() {
        let pixels: Vec<u8> = (0..32).map(|v| (v * 8) as u8).collect();
        let dir = tempfile::tempdir().unwrap();
        let img = dir.path().join("img");
        let lab = dir.path().join("lab");
        fs::write(&img, idx_images(2, 4, 4, &pixels)).unwrap();
        fs::write(&lab, idx_labels(&[7, 0])).unwrap();
        let ds = load_idx(&img, &lab).unwrap();
        assert_eq!(ds.features.shape(), (2, 16));
        for (i, v) in ds.features.as_slice().iter().enumerate() {
            assert_eq!(*v, (i * 8) as f64 / 255.0);
        }
        assert_eq!(ds.classes(), vec![7, 0]);
        assert_eq!(ds.class_count(), 10);
    }

    #[test]
    fn idx_rejects_bad_files() {
        let good = idx_images(2, 4, 4, &[0; 32]);
        assert!(matches!(parse_idx_images(&good[..20]), Err(Error::Format(_))));
        assert!(matches!(parse_idx_images(&good[..10]), Err(Error::Format(_))));
        let mut wrong = good.clone();
        wrong[3] = 0x01;
        assert!(matches!(parse_idx_images(&wrong), Err(Error::Format(_))));
        assert!(matches!(parse_idx_labels(&good), Err(Error::Format(_))));
        let labels = idx_labels(&[1, 2, 3]);
        assert!(matches!(parse_idx_labels(&labels[..9]), Err(Error::Format(_))));
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            load_idx(dir.path().join("nope"), dir.path().join("nope")),
            Err(Error::Io(_))
        ));
    }

    #[test]
    fn dataset_rejects_non_one_hot() {
        let f = Matrix::zeros(2, 3);
        let l = Matrix::from_rows(&[[1.0, 0.0], [1.0, 1.0]]);
        assert!(Dataset::new(f, l).is_err());
    }

    #[test]
    fn power_law_counts_sum_and_floor() {
        let c = power_law_counts(100, 10_000, 1.2, 20).unwrap();
        assert_eq!(c.iter().sum::<usize>(), 10_000);
        assert!(c.iter().all(|&n| n >= 20));
        assert!(c.windows(2).all(|w| w[0] >= w[1]));
        assert!(power_law_counts(10, 100, 1.2, 20).is_err());
    }

    #[test]
    fn synthetic_structure() {
        let p = SyntheticParams::new(0.5, 0.5, 10);
        let sets = generate_synthetic(&SyntheticParams { total_samples: 1000, ..p }, 3).unwrap();
        let counts = power_law_counts(10, 1000, 1.2, 20).unwrap();
        assert_eq!(sets.iter().map(Dataset::len).collect::<Vec<_>>(), counts);
        for d in &sets {
            assert_eq!(d.feature_dim(), 60);
            assert_eq!(d.class_count(), 10);
            assert!(d.classes().iter().all(|&c| c < 10));
        }
        assert_eq!(sets, generate_synthetic(&SyntheticParams { total_samples: 1000, ..p }, 3).unwrap());
        assert!(generate_synthetic(&SyntheticParams::new(-1.0, 0.0, 3), 0).is_err());
    }

    // Spread across clients of the mean feature vector; driven by B_i.
    fn client_mean_dispersion(sets: &[Dataset]) -> f64 {
        let means: Vec<Vec<f64>> = sets
            .iter()
            .map(|d| {
                (0..d.feature_dim())
                    .map(|j| (0..d.len()).map(|i| d.features.get(i, j)).sum::<f64>() / d.len() as f64)
                    .collect()
            })
            .collect();
        let dim = means[0].len();
        let mut total = 0.0;
        for j in 0..dim {
            let mu = means.iter().map(|m| m[j]).sum::<f64>() / means.len() as f64;
            total += means.iter().map(|m| (m[j] - mu).powi(2)).sum::<f64>() / means.len() as f64;
        }
        total / dim as f64
    }

    #[test]
    fn synthetic_heterogeneity_grows_with_beta() {
        for seed in [1, 2, 3] {
            let mk = |a: f64, b: f64| SyntheticParams {
                total_samples: 30 * 200,
                min_samples: 200,
                ..SyntheticParams::new(a, b, 30)
            };
            let flat = client_mean_dispersion(&generate_synthetic(&mk(0.0, 0.0), seed).unwrap());
            let skew = client_mean_dispersion(&generate_synthetic(&mk(1.0, 1.0), seed).unwrap());
            // v_i ~ N(B_i, 1) per coordinate: about 1 without B_i, about 2 with beta = 1.
            assert!(flat < 1.5 && skew > 1.5, "seed {seed}: {flat} vs {skew}");
        }
    }

    #[test]
    fn dirichlet_proportions_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for beta in [0.01, 0.1, 1.0, 1e6] {
            let p = sample_dirichlet(&mut rng, beta, 100).unwrap();
            assert!((p.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn dirichlet_partition_covers_every_index_once() {
        let classes: Vec<usize> = (0..2000).map(|i| (i * 7 + i / 13) % 10).collect();
        let split = partition_dirichlet(&classes, 10, 20, 0.1, 2, 5).unwrap();
        split.validate(classes.len()).unwrap();
        assert_eq!(split.sizes().iter().sum::<usize>(), 2000);
        assert!(split.sizes().iter().all(|&n| n >= 2));
        assert_eq!(split, partition_dirichlet(&classes, 10, 20, 0.1, 2, 5).unwrap());
    }

    #[test]
    fn dirichlet_partition_rejects_bad_params() {
        let classes = vec![0, 1, 0, 1];
        assert!(partition_dirichlet(&classes, 2, 2, 0.0, 1, 0).is_err());
        assert!(partition_dirichlet(&classes, 2, 0, 1.0, 1, 0).is_err());
        assert!(partition_dirichlet(&classes, 2, 5, 1.0, 1, 0).is_err());
    }

    #[test]
    fn split_sizes_and_determinism() {
        let idx = [10, 11, 12, 13];
        let (train, test) = split_train_test(&idx, 0.75, 9).unwrap();
        assert_eq!((train.len(), test.len()), (3, 1));
        assert_eq!((train.clone(), test.clone()), split_train_test(&idx, 0.75, 9).unwrap());
        let mut all: Vec<usize> = train.into_iter().chain(test).collect();
        all.sort();
        assert_eq!(all, idx);
        assert!(split_train_test(&idx, 1.0, 0).is_err());
        assert!(split_train_test(&idx, 0.0, 0).is_err());
        assert!(split_train_test(&[1], 0.75, 0).is_err());
    }
}
