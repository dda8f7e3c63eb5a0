//! Dataset ingestion and task-stream construction.
//!
//! Sources are IDX files (the MNIST binary layout) or synthetic Gaussian
//! blobs. A task stream splits the classes into disjoint groups, subsamples
//! the training data, removes the global training mean, and relabels
//! according to the scenario: class-incremental streams map classes to head
//! slots in stream order, domain-incremental streams relabel every task to
//! the shared space 0..k−1.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Environment variable overriding the dataset manifest root.
pub const DATA_DIR_ENV: &str = "RECL_DATA_DIR";

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Scenario {
    Cil,
    Dil,
}

impl Scenario {
    pub fn as_str(&self) -> &'static str {
        match self {
            Scenario::Cil => "cil",
            Scenario::Dil => "dil",
        }
    }

    pub fn parse(s: &str) -> Option<Scenario> {
        match s {
            "cil" | "CIL" => Some(Scenario::Cil),
            "dil" | "DIL" => Some(Scenario::Dil),
            _ => None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct LabeledDataset {
    features: Tensor,
    labels: Vec<usize>,
    class_set: Vec<usize>,
}

impl LabeledDataset {
    pub fn new(features: Tensor, labels: Vec<usize>) -> Result<Self> {
        let n = features.rows()?;
        if n != labels.len() {
            return Err(Error::contract(format!(
                "{n} feature rows vs {} labels",
                labels.len()
            )));
        }
        let mut class_set: Vec<usize> = labels.clone();
        class_set.sort_unstable();
        class_set.dedup();
        Ok(LabeledDataset {
            features,
            labels,
            class_set,
        })
    }

    /// Zero-sample dataset over a known feature dimension (replay buffers
    /// start this way).
    pub fn empty(dim: usize) -> LabeledDataset {
        LabeledDataset {
            features: Tensor::from_raw(vec![0, dim], vec![]),
            labels: vec![],
            class_set: vec![],
        }
    }

    pub fn features(&self) -> &Tensor {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn class_set(&self) -> &[usize] {
        &self.class_set
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols().unwrap()
    }

    pub fn sample_row(&self, i: usize) -> &[f64] {
        self.features.row_slice(i)
    }

    /// Rows picked by index, in the given order.
    pub fn subset(&self, indices: &[usize]) -> Result<LabeledDataset> {
        let d = self.dim();
        if indices.is_empty() {
            return Ok(LabeledDataset::empty(d));
        }
        let mut data = Vec::with_capacity(indices.len() * d);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::contract(format!(
                    "subset index {i} out of range for {} samples",
                    self.len()
                )));
            }
            data.extend_from_slice(self.sample_row(i));
            labels.push(self.labels[i]);
        }
        LabeledDataset::new(Tensor::matrix(indices.len(), d, data)?, labels)
    }

    /// Concatenate two datasets over the same feature dimension.
    pub fn concat(&self, other: &LabeledDataset) -> Result<LabeledDataset> {
        if self.dim() != other.dim() {
            return Err(Error::shape(
                "dataset concat",
                self.features.shape(),
                other.features.shape(),
            ));
        }
        if self.is_empty() {
            return Ok(other.clone());
        }
        if other.is_empty() {
            return Ok(self.clone());
        }
        let mut data = self.features.data().to_vec();
        data.extend_from_slice(other.features.data());
        let mut labels = self.labels.clone();
        labels.extend_from_slice(&other.labels);
        LabeledDataset::new(
            Tensor::matrix(self.len() + other.len(), self.dim(), data)?,
            labels,
        )
    }

    pub fn shuffled(&self, seed: u64) -> LabeledDataset {
        let mut idx: Vec<usize> = (0..self.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        idx.shuffle(&mut rng);
        self.subset(&idx).expect("indices in range")
    }

    fn relabel(&self, map: &BTreeMap<usize, usize>) -> Result<LabeledDataset> {
        let labels = self
            .labels
            .iter()
            .map(|l| {
                map.get(l).copied().ok_or_else(|| {
                    Error::contract(format!("label {l} missing from relabel map"))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        LabeledDataset::new(self.features.clone(), labels)
    }

    fn sub_mean(&self, mean: &Tensor) -> Result<LabeledDataset> {
        let d = self.dim();
        if mean.shape() != [d] {
            return Err(Error::shape("mean removal", self.features.shape(), mean.shape()));
        }
        let mut data = self.features.data().to_vec();
        for row in data.chunks_exact_mut(d) {
            for (v, m) in row.iter_mut().zip(mean.data()) {
                *v -= m;
            }
        }
        LabeledDataset::new(Tensor::matrix(self.len(), d, data)?, self.labels.clone())
    }
}

/// One task of a stream. `train`/`test` labels are already in model space
/// (head slots); `original_classes` keeps the source-dataset class ids.
#[derive(Clone, Debug)]
pub struct Task {
    pub train: LabeledDataset,
    pub test: LabeledDataset,
    pub original_classes: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct TaskStream {
    pub scenario: Scenario,
    pub tasks: Vec<Task>,
    pub normalization_mean: Tensor,
}

impl TaskStream {
    /// Head width required once all tasks up to `t` (inclusive) are seen.
    pub fn head_size_after(&self, t: usize) -> usize {
        match self.scenario {
            Scenario::Cil => self.tasks[..=t]
                .iter()
                .map(|task| task.original_classes.len())
                .sum(),
            Scenario::Dil => self.tasks[0].original_classes.len(),
        }
    }
}

// ---------------------------------------------------------------------------
// IDX parsing and writing
// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
pub enum IdxData {
    /// n×(rows·cols) pixels scaled to [0, 1].
    Images(Tensor),
    Labels(Vec<usize>),
}

fn read_be_u32(bytes: &[u8], off: usize) -> Result<u32> {
    let end = off
        .checked_add(4)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| Error::parse(off, "truncated u32"))?;
    Ok(u32::from_be_bytes(bytes[off..end].try_into().unwrap()))
}

pub fn parse_idx(bytes: &[u8]) -> Result<IdxData> {
    let magic = read_be_u32(bytes, 0)?;
    match magic {
        IDX_LABELS_MAGIC => {
            let n = read_be_u32(bytes, 4)? as usize;
            let payload = bytes
                .get(8..8 + n)
                .ok_or_else(|| Error::parse(8, format!("label payload needs {n} bytes")))?;
            if bytes.len() != 8 + n {
                return Err(Error::parse(8 + n, "trailing bytes after labels"));
            }
            Ok(IdxData::Labels(payload.iter().map(|&b| b as usize).collect()))
        }
        IDX_IMAGES_MAGIC => {
            let n = read_be_u32(bytes, 4)? as usize;
            let rows = read_be_u32(bytes, 8)? as usize;
            let cols = read_be_u32(bytes, 12)? as usize;
            let per = rows
                .checked_mul(cols)
                .ok_or_else(|| Error::parse(8, "image dimensions overflow"))?;
            let total = n
                .checked_mul(per)
                .ok_or_else(|| Error::parse(4, "image count overflows"))?;
            let payload = bytes
                .get(16..16 + total)
                .ok_or_else(|| Error::parse(16, format!("image payload needs {total} bytes")))?;
            if bytes.len() != 16 + total {
                return Err(Error::parse(16 + total, "trailing bytes after images"));
            }
            let data: Vec<f64> = payload.iter().map(|&b| b as f64 / 255.0).collect();
            Ok(IdxData::Images(Tensor::matrix(n, per, data)?))
        }
        other => Err(Error::parse(0, format!("bad IDX magic 0x{other:08x}"))),
    }
}

/// Inverse of `parse_idx` for images whose values lie on the k/255 grid.
pub fn write_idx_images(images: &Tensor, rows: usize, cols: usize) -> Result<Vec<u8>> {
    let n = images.rows()?;
    if images.cols()? != rows * cols {
        return Err(Error::contract(format!(
            "image width {} does not match {rows}x{cols}",
            images.cols()?
        )));
    }
    let mut out = Vec::with_capacity(16 + images.len());
    out.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
    out.extend_from_slice(&(n as u32).to_be_bytes());
    out.extend_from_slice(&(rows as u32).to_be_bytes());
    out.extend_from_slice(&(cols as u32).to_be_bytes());
    for v in images.data() {
        out.push((v * 255.0).round().clamp(0.0, 255.0) as u8);
    }
    Ok(out)
}

pub fn write_idx_labels(labels: &[usize]) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    for &l in labels {
        if l > 255 {
            return Err(Error::contract(format!("label {l} does not fit in a byte")));
        }
        out.push(l as u8);
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Synthetic sources
// ---------------------------------------------------------------------------

fn unit_direction(k: usize, dim: usize) -> Vec<f64> {
    let mut v = vec![0.0; dim];
    let sign = if k % 2 == 0 { 1.0 } else { -1.0 };
    v[(k / 2) % dim] = sign;
    v
}

/// Gaussian class blobs: class k is N(separation·direction(k), I).
pub fn make_blobs(
    n_per_class: usize,
    classes: usize,
    dim: usize,
    separation: f64,
    seed: u64,
) -> Result<LabeledDataset> {
    if n_per_class == 0 || classes == 0 || dim == 0 {
        return Err(Error::contract(
            "make_blobs needs positive n_per_class, classes and dim",
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = Vec::with_capacity(n_per_class * classes * dim);
    let mut labels = Vec::with_capacity(n_per_class * classes);
    for k in 0..classes {
        let center = unit_direction(k, dim);
        for _ in 0..n_per_class {
            for c in &center {
                let z: f64 = StandardNormal.sample(&mut rng);
                data.push(separation * c + z);
            }
            labels.push(k);
        }
    }
    LabeledDataset::new(Tensor::matrix(n_per_class * classes, dim, data)?, labels)
}

/// Deterministic 28×28 10-class image set used when no real MNIST files
/// are around: each class is a smoothed random template plus pixel noise,
/// quantized to the u8 grid so IDX round-trips exactly.
pub fn make_synthetic_digits(
    n_train_per_class: usize,
    n_test_per_class: usize,
    seed: u64,
) -> Result<(LabeledDataset, LabeledDataset)> {
    let side = 28usize;
    let d = side * side;
    let classes = 10usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut templates = Vec::with_capacity(classes);
    for _ in 0..classes {
        let raw: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
        templates.push(smooth_field(&raw, side));
    }

    let mut gen_split = |n_per_class: usize| -> Result<LabeledDataset> {
        let mut data = Vec::with_capacity(n_per_class * classes * d);
        let mut labels = Vec::with_capacity(n_per_class * classes);
        for (k, tpl) in templates.iter().enumerate() {
            for _ in 0..n_per_class {
                let gain = 0.8 + 0.4 * rand::Rng::random_range(&mut rng, 0.0..1.0);
                for &t in tpl {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    let v = (t * gain + 0.08 * z).clamp(0.0, 1.0);
                    data.push((v * 255.0).round() / 255.0);
                }
                labels.push(k);
            }
        }
        LabeledDataset::new(
            Tensor::matrix(n_per_class * classes, d, data)?,
            labels,
        )
    };

    let train = gen_split(n_train_per_class)?;
    let test = gen_split(n_test_per_class)?;
    Ok((train, test))
}

fn smooth_field(raw: &[f64], side: usize) -> Vec<f64> {
    // three box-blur passes, then rescale into [0, 0.9]
    let mut cur = raw.to_vec();
    for _ in 0..3 {
        let mut next = vec![0.0; cur.len()];
        for r in 0..side {
            for c in 0..side {
                let mut acc = 0.0;
                let mut cnt = 0.0;
                for dr in -1i64..=1 {
                    for dc in -1i64..=1 {
                        let rr = r as i64 + dr;
                        let cc = c as i64 + dc;
                        if rr >= 0 && rr < side as i64 && cc >= 0 && cc < side as i64 {
                            acc += cur[rr as usize * side + cc as usize];
                            cnt += 1.0;
                        }
                    }
                }
                next[r * side + c] = acc / cnt;
            }
        }
        cur = next;
    }
    let lo = cur.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = cur.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = (hi - lo).max(1e-12);
    cur.iter().map(|v| 0.9 * (v - lo) / span).collect()
}

/// Write a synthetic stand-in dataset as real IDX files plus a manifest
/// mapping "splitmnist" to them. Returns the manifest path.
pub fn write_synthetic_mnist(
    dir: &Path,
    n_train_per_class: usize,
    n_test_per_class: usize,
    seed: u64,
) -> Result<PathBuf> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    let (train, test) = make_synthetic_digits(n_train_per_class, n_test_per_class, seed)?;
    let files = [
        ("train-images-idx3-ubyte", write_idx_images(train.features(), 28, 28)?),
        ("train-labels-idx1-ubyte", write_idx_labels(train.labels())?),
        ("t10k-images-idx3-ubyte", write_idx_images(test.features(), 28, 28)?),
        ("t10k-labels-idx1-ubyte", write_idx_labels(test.labels())?),
    ];
    for (name, bytes) in &files {
        let p = dir.join(name);
        std::fs::write(&p, bytes).map_err(|e| Error::io(p.display().to_string(), e))?;
    }
    let manifest = dir.join("datasets.manifest");
    let text = "\
splitmnist.train_images = train-images-idx3-ubyte
splitmnist.train_labels = train-labels-idx1-ubyte
splitmnist.test_images = t10k-images-idx3-ubyte
splitmnist.test_labels = t10k-labels-idx1-ubyte
";
    std::fs::write(&manifest, text).map_err(|e| Error::io(manifest.display().to_string(), e))?;
    Ok(manifest)
}

// ---------------------------------------------------------------------------
// Manifest
// ---------------------------------------------------------------------------

/// `name.role = relative/path` lines; '#' comments. Paths resolve against
/// the manifest's directory, or against RECL_DATA_DIR when set.
pub fn load_manifest(path: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    let root = match std::env::var(DATA_DIR_ENV) {
        Ok(dir) if !dir.is_empty() => PathBuf::from(dir),
        _ => path.parent().unwrap_or(Path::new(".")).to_path_buf(),
    };
    let mut out = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| Error::config(i + 1, "manifest lines are `name.role = path`"))?;
        out.insert(key.trim().to_string(), root.join(value.trim()));
    }
    Ok(out)
}

/// Load the train/test pair registered under `name` in the manifest.
pub fn load_idx_dataset(name: &str, manifest: &Path) -> Result<(LabeledDataset, LabeledDataset)> {
    let map = load_manifest(manifest)?;
    let fetch = |role: &str| -> Result<Vec<u8>> {
        let key = format!("{name}.{role}");
        let path = map
            .get(&key)
            .ok_or_else(|| Error::config(0, format!("manifest has no entry for {key}")))?;
        std::fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))
    };
    let images = |bytes: Vec<u8>| -> Result<Tensor> {
        match parse_idx(&bytes)? {
            IdxData::Images(t) => Ok(t),
            IdxData::Labels(_) => Err(Error::parse(0, "expected images, found labels")),
        }
    };
    let labels = |bytes: Vec<u8>| -> Result<Vec<usize>> {
        match parse_idx(&bytes)? {
            IdxData::Labels(l) => Ok(l),
            IdxData::Images(_) => Err(Error::parse(0, "expected labels, found images")),
        }
    };
    let train = LabeledDataset::new(
        images(fetch("train_images")?)?,
        labels(fetch("train_labels")?)?,
    )?;
    let test = LabeledDataset::new(
        images(fetch("test_images")?)?,
        labels(fetch("test_labels")?)?,
    )?;
    Ok((train, test))
}

// ---------------------------------------------------------------------------
// Task streams
// ---------------------------------------------------------------------------

/// Shuffle classes by seed, split them contiguously into `n_tasks` groups,
/// subsample `n_per_class` training rows per class, keep the full test
/// split per task, remove the global selected-train mean everywhere, then
/// relabel for the scenario.
pub fn build_task_stream(
    train: &LabeledDataset,
    test: &LabeledDataset,
    scenario: Scenario,
    n_tasks: usize,
    n_per_class: usize,
    seed: u64,
) -> Result<TaskStream> {
    let classes = train.class_set().to_vec();
    if n_tasks == 0 || classes.len() % n_tasks != 0 {
        return Err(Error::config(
            0,
            format!(
                "n_tasks {} must divide the class count {}",
                n_tasks,
                classes.len()
            ),
        ));
    }
    let per_task = classes.len() / n_tasks;

    let mut shuffled = classes;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    shuffled.shuffle(&mut rng);

    // per-class training subsample, drawn without replacement
    let mut selected: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for &class in &shuffled {
        let pool: Vec<usize> = (0..train.len())
            .filter(|&i| train.labels()[i] == class)
            .collect();
        if pool.len() < n_per_class {
            return Err(Error::config(
                0,
                format!(
                    "class {class} has {} training samples, need {n_per_class}",
                    pool.len()
                ),
            ));
        }
        let mut pool = pool;
        pool.shuffle(&mut rng);
        pool.truncate(n_per_class);
        pool.sort_unstable();
        selected.insert(class, pool);
    }

    // global mean over every selected training sample
    let d = train.dim();
    let mut mean = vec![0.0; d];
    let mut count = 0usize;
    for idx in selected.values() {
        for &i in idx {
            for (m, v) in mean.iter_mut().zip(train.sample_row(i)) {
                *m += v;
            }
            count += 1;
        }
    }
    for m in &mut mean {
        *m /= count as f64;
    }
    let mean = Tensor::vector(mean)?;

    let mut tasks = Vec::with_capacity(n_tasks);
    let mut next_slot = 0usize;
    for t in 0..n_tasks {
        let group: Vec<usize> = shuffled[t * per_task..(t + 1) * per_task].to_vec();
        let mut sorted_group = group.clone();
        sorted_group.sort_unstable();

        let mut train_idx = Vec::new();
        for &class in &group {
            train_idx.extend_from_slice(&selected[&class]);
        }
        let task_train = train.subset(&train_idx)?.sub_mean(&mean)?;

        let test_idx: Vec<usize> = (0..test.len())
            .filter(|&i| group.contains(&test.labels()[i]))
            .collect();
        let task_test = test.subset(&test_idx)?.sub_mean(&mean)?;

        // model-space labels: stream-order slots for CIL, 0..k−1 for DIL
        let map: BTreeMap<usize, usize> = match scenario {
            Scenario::Cil => sorted_group
                .iter()
                .enumerate()
                .map(|(j, &c)| (c, next_slot + j))
                .collect(),
            Scenario::Dil => sorted_group
                .iter()
                .enumerate()
                .map(|(j, &c)| (c, j))
                .collect(),
        };
        next_slot += per_task;

        tasks.push(Task {
            train: task_train.relabel(&map)?,
            test: task_test.relabel(&map)?,
            original_classes: sorted_group,
        });
    }

    Ok(TaskStream {
        scenario,
        tasks,
        normalization_mean: mean,
    })
}

/// One mini-batch; `indices` point back into the source dataset.
#[derive(Clone, Debug)]
pub struct Batch {
    pub features: Tensor,
    pub labels: Vec<usize>,
    pub indices: Vec<usize>,
}

/// Deterministic per-(seed, epoch) shuffle; the final short batch is kept.
pub fn batch_iter(
    dataset: &LabeledDataset,
    batch_size: usize,
    seed: u64,
    epoch: u64,
) -> Result<Vec<Batch>> {
    if batch_size == 0 {
        return Err(Error::contract("batch_size must be at least 1"));
    }
    if dataset.is_empty() {
        return Ok(Vec::new());
    }
    let mut idx: Vec<usize> = (0..dataset.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, epoch));
    idx.shuffle(&mut rng);

    idx.chunks(batch_size)
        .map(|chunk| {
            let sub = dataset.subset(chunk)?;
            Ok(Batch {
                features: sub.features().clone(),
                labels: sub.labels().to_vec(),
                indices: chunk.to_vec(),
            })
        })
        .collect()
}

/// splitmix64-style stream derivation so nested seeds stay decorrelated.
pub fn mix_seed(base: u64, salt: u64) -> u64 {
    let mut z = base ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    #[test]
    fn idx_label_example() {
        let mut bytes = IDX_LABELS_MAGIC.to_be_bytes().to_vec();
        bytes.extend_from_slice(&2u32.to_be_bytes());
        bytes.extend_from_slice(&[7, 3]);
        match parse_idx(&bytes).unwrap() {
            IdxData::Labels(l) => assert_eq!(l, vec![7, 3]),
            _ => panic!("expected labels"),
        }
    }

    #[test]
    fn idx_image_example_scales_to_unit() {
        let mut bytes = IDX_IMAGES_MAGIC.to_be_bytes().to_vec();
        for v in [1u32, 2, 2] {
            bytes.extend_from_slice(&v.to_be_bytes());
        }
        bytes.extend_from_slice(&[0, 255, 0, 255]);
        match parse_idx(&bytes).unwrap() {
            IdxData::Images(t) => {
                assert_eq!(t.shape(), &[1, 4]);
                assert_eq!(t.data(), &[0.0, 1.0, 0.0, 1.0]);
            }
            _ => panic!("expected images"),
        }
    }

    #[test]
    fn idx_errors_carry_byte_offsets() {
        let err = parse_idx(&[0, 0]).unwrap_err();
        assert!(matches!(err, Error::Parse { offset: 0, .. }));

        let mut bytes = IDX_LABELS_MAGIC.to_be_bytes().to_vec();
        bytes.extend_from_slice(&10u32.to_be_bytes());
        bytes.extend_from_slice(&[1, 2]);
        let err = parse_idx(&bytes).unwrap_err();
        assert!(matches!(err, Error::Parse { offset: 8, .. }));

        let mut bytes = 0x42u32.to_be_bytes().to_vec();
        bytes.extend_from_slice(&[0; 4]);
        assert!(parse_idx(&bytes).is_err());
    }

    #[test]
    fn idx_round_trip() {
        let (train, _) = make_synthetic_digits(2, 1, 9).unwrap();
        let bytes = write_idx_images(train.features(), 28, 28).unwrap();
        match parse_idx(&bytes).unwrap() {
            IdxData::Images(t) => assert_eq!(t.data(), train.features().data()),
            _ => panic!(),
        }
        let lbytes = write_idx_labels(train.labels()).unwrap();
        match parse_idx(&lbytes).unwrap() {
            IdxData::Labels(l) => assert_eq!(l, train.labels()),
            _ => panic!(),
        }
    }

    #[test]
    fn blobs_counts_and_degenerate_separation() {
        let ds = make_blobs(1, 2, 3, 4.0, 5).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.labels(), &[0, 1]);

        // separation 0: per-class means coincide up to sampling noise
        let ds = make_blobs(2000, 2, 2, 0.0, 5).unwrap();
        let mut means = [[0.0; 2]; 2];
        for i in 0..ds.len() {
            let k = ds.labels()[i];
            for (j, v) in ds.sample_row(i).iter().enumerate() {
                means[k][j] += v / 2000.0;
            }
        }
        for j in 0..2 {
            assert!((means[0][j] - means[1][j]).abs() < 0.1);
        }
    }

    #[test]
    fn stream_tasks_are_disjoint_and_mean_removed() {
        let train = make_blobs(30, 6, 4, 3.0, 1).unwrap();
        let test = make_blobs(10, 6, 4, 3.0, 2).unwrap();
        let stream = build_task_stream(&train, &test, Scenario::Cil, 3, 20, 7).unwrap();
        assert_eq!(stream.tasks.len(), 3);

        let mut seen: HashSet<usize> = HashSet::new();
        for task in &stream.tasks {
            for &c in &task.original_classes {
                assert!(seen.insert(c), "class {c} appears twice");
            }
            // train/test share the model-space label set
            let tr: HashSet<_> = task.train.labels().iter().collect();
            let te: HashSet<_> = task.test.labels().iter().collect();
            assert_eq!(tr, te);
            assert!(task.train.features().all_finite());
        }
        assert_eq!(seen.len(), 6);

        // selected training features have zero global mean
        let d = train.dim();
        let mut mean = vec![0.0; d];
        let mut n = 0.0;
        for task in &stream.tasks {
            for i in 0..task.train.len() {
                for (m, v) in mean.iter_mut().zip(task.train.sample_row(i)) {
                    *m += v;
                }
                n += 1.0;
            }
        }
        for m in &mean {
            assert!((m / n).abs() < 1e-9);
        }

        // CIL slots grow with the stream
        assert_eq!(stream.head_size_after(0), 2);
        assert_eq!(stream.head_size_after(2), 6);
    }

    #[test]
    fn dil_relabels_to_zero_based_contiguous() {
        let train = make_blobs(10, 4, 3, 3.0, 11).unwrap();
        let test = make_blobs(5, 4, 3, 3.0, 12).unwrap();
        let stream = build_task_stream(&train, &test, Scenario::Dil, 2, 8, 3).unwrap();
        for task in &stream.tasks {
            let set: HashSet<_> = task.train.labels().iter().cloned().collect();
            assert_eq!(set, HashSet::from([0, 1]));
        }
        assert_eq!(stream.head_size_after(1), 2);
    }

    #[test]
    fn stream_config_errors() {
        let train = make_blobs(10, 4, 3, 3.0, 11).unwrap();
        let test = make_blobs(5, 4, 3, 3.0, 12).unwrap();
        assert!(build_task_stream(&train, &test, Scenario::Cil, 3, 5, 0).is_err());
        assert!(build_task_stream(&train, &test, Scenario::Cil, 2, 99, 0).is_err());
    }

    #[test]
    fn batch_iter_contract() {
        let ds = make_blobs(5, 2, 3, 1.0, 4).unwrap();

        // short batch kept
        let batches = batch_iter(&ds, 64, 0, 0).unwrap();
        assert_eq!(batches.len(), 1);
        assert_eq!(batches[0].labels.len(), 10);

        // determinism per (seed, epoch)
        let a = batch_iter(&ds, 3, 5, 2).unwrap();
        let b = batch_iter(&ds, 3, 5, 2).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.indices, y.indices);
        }
        let c = batch_iter(&ds, 3, 5, 3).unwrap();
        assert_ne!(
            a.iter().flat_map(|b| b.indices.clone()).collect::<Vec<_>>(),
            c.iter().flat_map(|b| b.indices.clone()).collect::<Vec<_>>()
        );

        // union of all batches is the dataset exactly once
        let mut all: Vec<usize> = a.iter().flat_map(|b| b.indices.clone()).collect();
        all.sort_unstable();
        assert_eq!(all, (0..10).collect::<Vec<_>>());

        // empty dataset -> empty iterator
        let empty = LabeledDataset::empty(3);
        assert!(batch_iter(&empty, 4, 0, 0).unwrap().is_empty());
    }

    #[test]
    fn manifest_and_idx_loading() {
        let dir = std::env::temp_dir().join("recl_data_test");
        let manifest = write_synthetic_mnist(&dir, 3, 2, 77).unwrap();
        let (train, test) = load_idx_dataset("splitmnist", &manifest).unwrap();
        assert_eq!(train.len(), 30);
        assert_eq!(test.len(), 20);
        assert_eq!(train.dim(), 784);
        assert_eq!(train.class_set(), (0..10).collect::<Vec<_>>());
    }
}
