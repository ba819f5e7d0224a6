//! Labeled datasets: IDX ingestion, a synthetic Gaussian-mixture task, and the
//! label-skewed per-device partition.

use std::fs::File;
use std::io::{BufReader, ErrorKind, Read};
use std::path::Path;

use rand::seq::index;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::rng::SimRng;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// A borrowed view of one sample.
#[derive(Debug, Clone, Copy)]
pub struct LabeledSample<'a> {
    pub features: &'a [f32],
    pub label: usize,
}

/// Row-major feature matrix with one label per row.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    dim: usize,
    num_classes: usize,
    features: Vec<f32>,
    labels: Vec<u16>,
}

impl Dataset {
    pub fn new(dim: usize, num_classes: usize, features: Vec<f32>, labels: Vec<u16>) -> Result<Self> {
        if dim == 0 || labels.is_empty() {
            return Err(Error::invalid("dataset must be non-empty with dim >= 1"));
        }
        if features.len() != dim * labels.len() {
            return Err(Error::DimensionMismatch {
                expected: dim * labels.len(),
                got: features.len(),
            });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l as usize >= num_classes) {
            return Err(Error::invalid(format!("label {bad} >= num_classes {num_classes}")));
        }
        Ok(Self {
            dim,
            num_classes,
            features,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn features(&self, i: usize) -> &[f32] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i] as usize
    }

    pub fn sample(&self, i: usize) -> LabeledSample<'_> {
        LabeledSample {
            features: self.features(i),
            label: self.label(i),
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = LabeledSample<'_>> + '_ {
        (0..self.len()).map(move |i| self.sample(i))
    }

    /// Count of samples per label.
    pub fn histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.num_classes];
        for &l in &self.labels {
            h[l as usize] += 1;
        }
        h
    }

    /// Indices of samples grouped by label.
    pub fn indices_by_label(&self) -> Vec<Vec<usize>> {
        let mut by = vec![Vec::new(); self.num_classes];
        for (i, &l) in self.labels.iter().enumerate() {
            by[l as usize].push(i);
        }
        by
    }

    pub fn subset(&self, idx: &[usize]) -> Dataset {
        let mut features = Vec::with_capacity(idx.len() * self.dim);
        let mut labels = Vec::with_capacity(idx.len());
        for &i in idx {
            features.extend_from_slice(self.features(i));
            labels.push(self.labels[i]);
        }
        Dataset {
            dim: self.dim,
            num_classes: self.num_classes,
            features,
            labels,
        }
    }
}

fn read_u32_be(r: &mut impl Read, path: &Path) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf).map_err(|e| Error::io(path, e))?;
    Ok(u32::from_be_bytes(buf))
}

fn read_exact_vec(r: &mut impl Read, len: usize, path: &Path) -> Result<Vec<u8>> {
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf).map_err(|e| Error::io(path, e))?;
    Ok(buf)
}

fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| Error::io(path, e))
}

/// Loads an IDX image file (magic 0x803) and its IDX label file (magic 0x801).
///
/// Pixels are scaled to `[0, 1]`. The class count is one past the largest label.
pub fn load_idx(image_path: &Path, label_path: &Path) -> Result<Dataset> {
    let mut images = open(image_path)?;
    let magic = read_u32_be(&mut images, image_path)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::Format(format!(
            "{}: magic {magic:#010x}, expected {IDX_IMAGES_MAGIC:#010x}",
            image_path.display()
        )));
    }
    let count = read_u32_be(&mut images, image_path)? as usize;
    let rows = read_u32_be(&mut images, image_path)? as usize;
    let cols = read_u32_be(&mut images, image_path)? as usize;
    let dim = rows * cols;
    let pixels = read_exact_vec(&mut images, count * dim, image_path)?;

    let mut labels_r = open(label_path)?;
    let magic = read_u32_be(&mut labels_r, label_path)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::Format(format!(
            "{}: magic {magic:#010x}, expected {IDX_LABELS_MAGIC:#010x}",
            label_path.display()
        )));
    }
    let label_count = read_u32_be(&mut labels_r, label_path)? as usize;
    if label_count != count {
        return Err(Error::Format(format!(
            "{count} images but {label_count} labels"
        )));
    }
    let raw_labels = read_exact_vec(&mut labels_r, count, label_path)?;
    if count == 0 {
        return Err(Error::io(
            image_path,
            std::io::Error::new(ErrorKind::UnexpectedEof, "IDX file holds no items"),
        ));
    }

    let features = pixels.iter().map(|&p| p as f32 / 255.0).collect();
    let labels: Vec<u16> = raw_labels.iter().map(|&l| l as u16).collect();
    let num_classes = *labels.iter().max().unwrap() as usize + 1;
    Dataset::new(dim, num_classes, features, labels)
}

/// A Gaussian-mixture classification task with fixed class centres.
///
/// Each class owns `modes` centres drawn in `[0.2, 0.8]^dim`; samples are a
/// centre plus isotropic noise of standard deviation `spread`, clamped to
/// `[0, 1]`.
#[derive(Debug, Clone)]
pub struct SyntheticTask {
    dim: usize,
    num_classes: usize,
    spread: f32,
    centres: Vec<Vec<Vec<f32>>>,
}

impl SyntheticTask {
    pub fn new(rng: &mut SimRng, num_classes: usize, dim: usize, modes: usize, spread: f32) -> Result<Self> {
        if num_classes < 2 || dim == 0 || modes == 0 {
            return Err(Error::invalid("synthetic task needs C >= 2, dim >= 1, modes >= 1"));
        }
        if !(spread >= 0.0) {
            return Err(Error::invalid("spread must be non-negative"));
        }
        let centres = (0..num_classes)
            .map(|_| {
                (0..modes)
                    .map(|_| (0..dim).map(|_| rng.random_range(0.2f32..0.8)).collect())
                    .collect()
            })
            .collect();
        Ok(Self {
            dim,
            num_classes,
            spread,
            centres,
        })
    }

    /// Draws `per_class` samples of every class, grouped by label.
    pub fn draw(&self, rng: &mut SimRng, per_class: usize) -> Result<Dataset> {
        if per_class == 0 {
            return Err(Error::invalid("per_class must be >= 1"));
        }
        let noise = Normal::new(0.0f32, self.spread.max(f32::MIN_POSITIVE))
            .map_err(|e| Error::invalid(e.to_string()))?;
        let n = per_class * self.num_classes;
        let mut features = Vec::with_capacity(n * self.dim);
        let mut labels = Vec::with_capacity(n);
        for (class, modes) in self.centres.iter().enumerate() {
            for _ in 0..per_class {
                let centre = &modes[rng.random_range(0..modes.len())];
                features.extend(centre.iter().map(|&c| {
                    let v = if self.spread > 0.0 { c + noise.sample(rng) } else { c };
                    v.clamp(0.0, 1.0)
                }));
                labels.push(class as u16);
            }
        }
        Dataset::new(self.dim, self.num_classes, features, labels)
    }
}

/// `C` Gaussian clusters with `per_class` members each, deterministic in `seed`.
pub fn synth_dataset(seed: u64, num_classes: usize, dim: usize, per_class: usize) -> Result<Dataset> {
    let mut rng = crate::rng::stream(seed, crate::rng::Stream::Dataset);
    let task = SyntheticTask::new(&mut rng, num_classes, dim, 1, 0.1)?;
    task.draw(&mut rng, per_class)
}

/// Per-device label skew: `minority_labels_per_user` labels with
/// `minority_count` samples each, every other label with `majority_count`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PartitionSpec {
    pub num_users: usize,
    pub minority_labels_per_user: usize,
    pub minority_count: usize,
    pub majority_count: usize,
    pub seed: u64,
    /// Allow the same source sample to appear on several devices.
    pub replacement_across_users: bool,
}

impl PartitionSpec {
    pub fn samples_per_user(&self, num_classes: usize) -> usize {
        self.minority_labels_per_user * self.minority_count
            + num_classes.saturating_sub(self.minority_labels_per_user) * self.majority_count
    }
}

/// Splits `d` into `spec.num_users` label-skewed local datasets.
///
/// Minority labels are chosen uniformly without replacement for each user,
/// independently across users, so two users may share minority labels.
pub fn partition_non_iid(d: &Dataset, spec: &PartitionSpec) -> Result<Vec<Dataset>> {
    let c = d.num_classes();
    if spec.num_users == 0 {
        return Err(Error::invalid("num_users must be >= 1"));
    }
    if spec.minority_labels_per_user > c {
        return Err(Error::invalid(format!(
            "{} minority labels requested but only {c} classes",
            spec.minority_labels_per_user
        )));
    }
    let mut rng = crate::rng::stream(spec.seed, crate::rng::Stream::Partition);
    let mut pools = d.indices_by_label();
    let mut users = Vec::with_capacity(spec.num_users);
    for _ in 0..spec.num_users {
        let minority = index::sample(&mut rng, c, spec.minority_labels_per_user).into_vec();
        let mut picked = Vec::with_capacity(spec.samples_per_user(c));
        for (label, pool) in pools.iter_mut().enumerate() {
            let needed = if minority.contains(&label) {
                spec.minority_count
            } else {
                spec.majority_count
            };
            if needed > pool.len() {
                return Err(Error::Capacity {
                    label,
                    needed,
                    available: pool.len(),
                });
            }
            let chosen = index::sample(&mut rng, pool.len(), needed).into_vec();
            if spec.replacement_across_users {
                picked.extend(chosen.iter().map(|&j| pool[j]));
            } else {
                let mut chosen = chosen;
                chosen.sort_unstable_by(|a, b| b.cmp(a));
                for j in chosen {
                    picked.push(pool.swap_remove(j));
                }
            }
        }
        users.push(d.subset(&picked));
    }
    Ok(users)
}
