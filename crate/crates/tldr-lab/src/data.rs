//! Dataset generation/ingestion and the perturbation-set algebra.

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::io::{BufRead, BufReader, Read};
use std::path::Path;

use crate::matrix::RealMatrix;
use crate::{Error, Result};

const IDX_IMAGE_MAGIC: u32 = 0x0000_0803;
const IDX_LABEL_MAGIC: u32 = 0x0000_0801;

/// A labeled dataset: features are n x d, labels are class indices.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub features: RealMatrix,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl Dataset {
    pub fn new(features: RealMatrix, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if features.rows() != labels.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} feature rows vs {} labels",
                features.rows(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::LabelOutOfRange {
                label: bad,
                classes: num_classes,
            });
        }
        Ok(Dataset {
            features,
            labels,
            num_classes,
        })
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

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            features: self.features.select_rows(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
        }
    }

    /// Persists as CSV with header `x0,...,xd-1,label`.
    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        let d = self.dim();
        for i in 0..d {
            out.push_str(&format!("x{i},"));
        }
        out.push_str("label\n");
        for (row, &label) in self.features.iter_rows().zip(self.labels.iter()) {
            for v in row {
                out.push_str(&format!("{v},"));
            }
            out.push_str(&format!("{label}\n"));
        }
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    pub fn load_csv(path: &Path) -> Result<Dataset> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut lines = BufReader::new(file).lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::InvalidArgument(format!("{}: empty csv", path.display())))?
            .map_err(|e| Error::io(path, e))?;
        let cols: Vec<&str> = header.split(',').collect();
        if cols.last() != Some(&"label") {
            return Err(Error::InvalidArgument(format!(
                "{}: csv header must end with 'label'",
                path.display()
            )));
        }
        let d = cols.len() - 1;
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for line in lines {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let parts: Vec<&str> = line.split(',').collect();
            if parts.len() != d + 1 {
                return Err(Error::InvalidArgument(format!(
                    "{}: row has {} fields, expected {}",
                    path.display(),
                    parts.len(),
                    d + 1
                )));
            }
            let mut row = Vec::with_capacity(d);
            for p in &parts[..d] {
                row.push(p.parse::<f64>().map_err(|e| {
                    Error::InvalidArgument(format!("{}: bad number {p}: {e}", path.display()))
                })?);
            }
            labels.push(parts[d].parse::<usize>().map_err(|e| {
                Error::InvalidArgument(format!("{}: bad label: {e}", path.display()))
            })?);
            rows.push(row);
        }
        let num_classes = labels.iter().max().map_or(1, |&m| m + 1);
        Dataset::new(RealMatrix::from_rows(&rows)?, labels, num_classes)
    }
}

/// The closed l∞ ball of radius `epsilon`, with an optional [0,1] domain box.
///
/// `power(k)` scales the radius by k; for l∞, `U^{-1} = U`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PerturbationSet {
    pub epsilon: f64,
    pub clip_domain: bool,
}

impl PerturbationSet {
    pub fn linf(epsilon: f64) -> Self {
        PerturbationSet {
            epsilon,
            clip_domain: false,
        }
    }

    pub fn linf_clipped(epsilon: f64) -> Self {
        PerturbationSet {
            epsilon,
            clip_domain: true,
        }
    }

    /// `U^k`: radius scaled by `k` (rational k > 0; exact for dyadic and
    /// third powers used here up to floating point).
    pub fn power(&self, k: f64) -> PerturbationSet {
        PerturbationSet {
            epsilon: self.epsilon * k,
            clip_domain: self.clip_domain,
        }
    }

    /// Componentwise clamp to [center-ε, center+ε], then to [0,1] if the
    /// domain box is active. Idempotent.
    pub fn project(&self, point: &[f64], center: &[f64]) -> Vec<f64> {
        debug_assert_eq!(point.len(), center.len());
        point
            .iter()
            .zip(center.iter())
            .map(|(&p, &c)| {
                let mut v = p.clamp(c - self.epsilon, c + self.epsilon);
                if self.clip_domain {
                    v = v.clamp(0.0, 1.0);
                }
                v
            })
            .collect()
    }

    /// True iff the l∞ distance is ≤ ε (closed ball, 1e-9 slack).
    pub fn contains(&self, point: &[f64], center: &[f64]) -> bool {
        point
            .iter()
            .zip(center.iter())
            .all(|(&p, &c)| (p - c).abs() <= self.epsilon + 1e-9)
    }
}

/// Places `num_classes` Gaussian clusters on an axis-aligned integer lattice
/// scaled by `separation`, drawing `samples_per_class` points per class.
pub fn gen_gaussian_grid(
    num_classes: usize,
    separation: f64,
    samples_per_class: usize,
    dim: usize,
    sigma: f64,
    seed: u64,
) -> Result<Dataset> {
    if num_classes < 1 {
        return Err(Error::InvalidArgument("num_classes must be >= 1".into()));
    }
    if separation <= 0.0 || dim == 0 {
        return Err(Error::InvalidArgument(
            "separation must be > 0 and dim >= 1".into(),
        ));
    }
    // Side length of the smallest lattice cube holding all class means.
    let side = (num_classes as f64).powf(1.0 / dim as f64).ceil() as usize;
    if side.checked_pow(dim as u32).map_or(true, |c| c < num_classes) {
        return Err(Error::InvalidArgument(format!(
            "grid of side {side} in {dim} dims cannot hold {num_classes} means"
        )));
    }
    let mut means = Vec::with_capacity(num_classes);
    for c in 0..num_classes {
        let mut mean = vec![0.0; dim];
        let mut rem = c;
        for m in mean.iter_mut() {
            *m = (rem % side) as f64 * separation;
            rem /= side;
        }
        means.push(mean);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = Vec::with_capacity(num_classes * samples_per_class);
    let mut labels = Vec::with_capacity(num_classes * samples_per_class);
    for (c, mean) in means.iter().enumerate() {
        for _ in 0..samples_per_class {
            let row: Vec<f64> = mean.iter().map(|&m| m + sigma * gauss(&mut rng)).collect();
            rows.push(row);
            labels.push(c);
        }
    }
    Dataset::new(RealMatrix::from_rows(&rows)?, labels, num_classes)
}

/// Standard normal draw via Box-Muller (two uniforms per call keeps the
/// stream position deterministic).
fn gauss<R: Rng>(rng: &mut R) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Loads a paired IDX image/label file set; pixels scaled to [0,1].
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let images = read_idx_images(images_path)?;
    let labels = read_idx_labels(labels_path)?;
    if images.rows() != labels.len() {
        return Err(Error::CountMismatch {
            images: images.rows(),
            labels: labels.len(),
        });
    }
    let num_classes = labels.iter().max().map_or(1, |&m| m as usize + 1).max(10);
    Dataset::new(
        images,
        labels.into_iter().map(|l| l as usize).collect(),
        num_classes,
    )
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    Ok(bytes)
}

fn be_u32(path: &Path, bytes: &[u8], offset: usize) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|s| u32::from_be_bytes(s.try_into().unwrap()))
        .ok_or_else(|| Error::TruncatedPayload {
            path: path.into(),
            needed: offset + 4,
            available: bytes.len(),
        })
}

fn read_idx_images(path: &Path) -> Result<RealMatrix> {
    let bytes = read_file(path)?;
    let magic = be_u32(path, &bytes, 0)?;
    if magic != IDX_IMAGE_MAGIC {
        return Err(Error::BadMagic {
            path: path.into(),
            expected: IDX_IMAGE_MAGIC,
            found: magic,
        });
    }
    let count = be_u32(path, &bytes, 4)? as usize;
    let rows = be_u32(path, &bytes, 8)? as usize;
    let cols = be_u32(path, &bytes, 12)? as usize;
    let pixels = count * rows * cols;
    let payload = bytes.get(16..16 + pixels).ok_or(Error::TruncatedPayload {
        path: path.into(),
        needed: 16 + pixels,
        available: bytes.len(),
    })?;
    let data: Vec<f64> = payload.iter().map(|&b| b as f64 / 255.0).collect();
    RealMatrix::from_vec(count, rows * cols, data)
}

fn read_idx_labels(path: &Path) -> Result<Vec<u8>> {
    let bytes = read_file(path)?;
    let magic = be_u32(path, &bytes, 0)?;
    if magic != IDX_LABEL_MAGIC {
        return Err(Error::BadMagic {
            path: path.into(),
            expected: IDX_LABEL_MAGIC,
            found: magic,
        });
    }
    let count = be_u32(path, &bytes, 4)? as usize;
    bytes
        .get(8..8 + count)
        .map(|s| s.to_vec())
        .ok_or(Error::TruncatedPayload {
            path: path.into(),
            needed: 8 + count,
            available: bytes.len(),
        })
}

/// Seeded disjoint train/test split.
pub fn split(dataset: &Dataset, n_train: usize, m_test: usize, seed: u64) -> Result<(Dataset, Dataset)> {
    if n_train + m_test > dataset.len() {
        return Err(Error::InvalidArgument(format!(
            "split {}+{} exceeds {} rows",
            n_train,
            m_test,
            dataset.len()
        )));
    }
    let mut indices: Vec<usize> = (0..dataset.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    indices.shuffle(&mut rng);
    let train = dataset.subset(&indices[..n_train]);
    let test = dataset.subset(&indices[n_train..n_train + m_test]);
    Ok((train, test))
}

/// Persists an adversarial test-set batch: features, clean index, and a
/// perturbed/clean flag per point.
pub fn save_adversarial_csv(
    path: &Path,
    perturbed: &RealMatrix,
    clean_index: &[usize],
    is_perturbed: &[bool],
) -> Result<()> {
    let mut out = String::new();
    let d = perturbed.cols();
    for i in 0..d {
        out.push_str(&format!("x{i},"));
    }
    out.push_str("clean_index,perturbed\n");
    for ((row, &idx), &flag) in perturbed
        .iter_rows()
        .zip(clean_index.iter())
        .zip(is_perturbed.iter())
    {
        for v in row {
            out.push_str(&format!("{v},"));
        }
        out.push_str(&format!("{idx},{}\n", flag as u8));
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Loads an adversarial batch saved by [`save_adversarial_csv`].
pub fn load_adversarial_csv(path: &Path) -> Result<(RealMatrix, Vec<usize>, Vec<bool>)> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut lines = BufReader::new(file).lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::InvalidArgument(format!("{}: empty csv", path.display())))?
        .map_err(|e| Error::io(path, e))?;
    let cols: Vec<&str> = header.split(',').collect();
    if cols.len() < 3 || cols[cols.len() - 2] != "clean_index" || cols[cols.len() - 1] != "perturbed"
    {
        return Err(Error::InvalidArgument(format!(
            "{}: not an adversarial batch csv",
            path.display()
        )));
    }
    let d = cols.len() - 2;
    let mut rows = Vec::new();
    let mut indices = Vec::new();
    let mut flags = Vec::new();
    for line in lines {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split(',').collect();
        let mut row = Vec::with_capacity(d);
        for p in &parts[..d] {
            row.push(p.parse::<f64>().map_err(|e| {
                Error::InvalidArgument(format!("{}: bad number: {e}", path.display()))
            })?);
        }
        indices.push(parts[d].parse::<usize>().map_err(|e| {
            Error::InvalidArgument(format!("{}: bad index: {e}", path.display()))
        })?);
        flags.push(parts[d + 1].trim() == "1");
        rows.push(row);
    }
    Ok((RealMatrix::from_rows(&rows)?, indices, flags))
}
