//! Task streams for incremental classification: class partitioning of a
//! source dataset, dataset file ingestion (IDX and CIFAR binary), a synthetic
//! blob generator, and the two evaluation protocols.
//!
//! Task identity is available at test time in `TaskIl` mode (the matching
//! head is used); in `ClassIl` mode prediction runs over the concatenated
//! logits of every head seen so far.

use std::io::Read;
use std::path::Path;

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{Affine, Model, ModelError};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("bad magic in {path}: {detail}")]
    BadMagic { path: String, detail: String },
    #[error("unsupported element type {dtype:#x} in {path}")]
    UnsupportedType { path: String, dtype: u8 },
    #[error("truncated file {path}: {detail}")]
    Truncated { path: String, detail: String },
    #[error("dimension mismatch: {0}")]
    DimMismatch(String),
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("class count {classes} not divisible into {tasks} tasks")]
    NotDivisible { classes: usize, tasks: usize },
    #[error("empty dataset: {0}")]
    Empty(String),
    #[error("i/o error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Evaluation protocol.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    TaskIl,
    ClassIl,
}

/// A labeled sample set: one row per sample, integer labels in `[0, num_classes)`.
#[derive(Debug, Clone)]
pub struct LabeledSet {
    pub inputs: Array2<f64>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl LabeledSet {
    pub fn new(inputs: Array2<f64>, labels: Vec<usize>, num_classes: usize) -> Result<Self, DataError> {
        if inputs.nrows() == 0 {
            return Err(DataError::Empty("labeled set must hold at least one sample".into()));
        }
        if inputs.nrows() != labels.len() {
            return Err(DataError::DimMismatch(format!(
                "{} rows vs {} labels",
                inputs.nrows(),
                labels.len()
            )));
        }
        for &l in &labels {
            if l >= num_classes {
                return Err(DataError::LabelOutOfRange { label: l, classes: num_classes });
            }
        }
        Ok(LabeledSet { inputs, labels, num_classes })
    }

    pub fn len(&self) -> usize {
        self.inputs.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn input_dim(&self) -> usize {
        self.inputs.ncols()
    }

    /// Owned copy of the listed rows.
    pub fn subset(&self, rows: &[usize]) -> LabeledSet {
        let inputs = self.inputs.select(Axis(0), rows);
        let labels = rows.iter().map(|&r| self.labels[r]).collect();
        LabeledSet { inputs, labels, num_classes: self.num_classes }
    }
}

/// A raw dataset with its source train/test split, before task partitioning.
#[derive(Debug, Clone)]
pub struct SourceDataset {
    pub train: LabeledSet,
    pub test: LabeledSet,
    pub num_classes: usize,
}

impl SourceDataset {
    pub fn new(train: LabeledSet, test: LabeledSet) -> Result<Self, DataError> {
        if train.input_dim() != test.input_dim() {
            return Err(DataError::DimMismatch(format!(
                "train width {} vs test width {}",
                train.input_dim(),
                test.input_dim()
            )));
        }
        let num_classes = train.num_classes.max(test.num_classes);
        Ok(SourceDataset { train, test, num_classes })
    }
}

/// One task of a stream; labels are local to the task (`0..class_ids.len()`).
#[derive(Debug, Clone)]
pub struct TaskData {
    pub train: LabeledSet,
    pub test: LabeledSet,
    /// Global class ids covered by this task; position = local label.
    pub class_ids: Vec<usize>,
}

impl TaskData {
    pub fn num_classes(&self) -> usize {
        self.class_ids.len()
    }
}

/// Ordered task sequence with disjoint class sets.
#[derive(Debug, Clone)]
pub struct TaskStream {
    pub tasks: Vec<TaskData>,
    pub mode: Mode,
}

impl TaskStream {
    pub fn num_tasks(&self) -> usize {
        self.tasks.len()
    }

    pub fn input_dim(&self) -> usize {
        self.tasks[0].train.input_dim()
    }

    /// Column offset of each task's logits in the concatenated head layout.
    pub fn head_offsets(&self) -> Vec<usize> {
        let mut offsets = Vec::with_capacity(self.tasks.len());
        let mut acc = 0;
        for t in &self.tasks {
            offsets.push(acc);
            acc += t.num_classes();
        }
        offsets
    }
}

/// Bijective map from global dataset label to (task index, within-head index).
#[derive(Debug, Clone)]
pub struct LabelMap {
    global_to_local: Vec<Option<(usize, usize)>>,
}

impl LabelMap {
    pub fn from_stream(stream: &TaskStream) -> Self {
        let max_class = stream
            .tasks
            .iter()
            .flat_map(|t| t.class_ids.iter())
            .max()
            .copied()
            .unwrap_or(0);
        let mut global_to_local = vec![None; max_class + 1];
        for (task, t) in stream.tasks.iter().enumerate() {
            for (local, &global) in t.class_ids.iter().enumerate() {
                global_to_local[global] = Some((task, local));
            }
        }
        LabelMap { global_to_local }
    }

    pub fn lookup(&self, global: usize) -> Option<(usize, usize)> {
        self.global_to_local.get(global).copied().flatten()
    }
}

/// Partitions the classes of a dataset into `num_tasks` equal disjoint
/// groups (order shuffled by `seed`) and carves per-task train/test subsets
/// out of the source split.
pub fn split_classes(
    dataset: &SourceDataset,
    num_tasks: usize,
    mode: Mode,
    seed: u64,
) -> Result<TaskStream, DataError> {
    if num_tasks == 0 || dataset.num_classes % num_tasks != 0 {
        return Err(DataError::NotDivisible { classes: dataset.num_classes, tasks: num_tasks });
    }
    let per_task = dataset.num_classes / num_tasks;
    let mut order: Vec<usize> = (0..dataset.num_classes).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);

    let mut tasks = Vec::with_capacity(num_tasks);
    for chunk in order.chunks(per_task) {
        let class_ids: Vec<usize> = chunk.to_vec();
        let local_of = |global: usize| class_ids.iter().position(|&c| c == global);
        let carve = |set: &LabeledSet| -> Result<LabeledSet, DataError> {
            let rows: Vec<usize> = (0..set.len())
                .filter(|&r| local_of(set.labels[r]).is_some())
                .collect();
            if rows.is_empty() {
                return Err(DataError::Empty(format!("no samples for classes {class_ids:?}")));
            }
            let mut sub = set.subset(&rows);
            sub.labels = sub.labels.iter().map(|&g| local_of(g).unwrap()).collect();
            sub.num_classes = class_ids.len();
            Ok(sub)
        };
        tasks.push(TaskData {
            train: carve(&dataset.train)?,
            test: carve(&dataset.test)?,
            class_ids,
        });
    }
    Ok(TaskStream { tasks, mode })
}

// ---------------------------------------------------------------------------
// Synthetic Gaussian blobs
// ---------------------------------------------------------------------------

/// Settings for the synthetic blob dataset: one Gaussian cluster per class.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BlobConfig {
    pub classes: usize,
    pub dim: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    /// Standard deviation of the class-center coordinates.
    pub center_scale: f64,
    /// Sample noise around each center.
    pub noise_std: f64,
}

impl Default for BlobConfig {
    fn default() -> Self {
        BlobConfig {
            classes: 4,
            dim: 16,
            train_per_class: 100,
            test_per_class: 50,
            center_scale: 1.0,
            noise_std: 0.5,
        }
    }
}

/// Deterministic blob dataset: class centers and samples drawn from seeded
/// Gaussians, samples interleaved per class in a fixed order.
pub fn gen_blobs(cfg: &BlobConfig, seed: u64) -> Result<SourceDataset, DataError> {
    if cfg.classes == 0 || cfg.dim == 0 || cfg.train_per_class == 0 || cfg.test_per_class == 0 {
        return Err(DataError::Empty("blob config must be positive in every dimension".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let center_dist = Normal::new(0.0, cfg.center_scale).expect("finite scale");
    let noise = Normal::new(0.0, cfg.noise_std).expect("finite noise");

    let centers: Vec<Vec<f64>> = (0..cfg.classes)
        .map(|_| (0..cfg.dim).map(|_| center_dist.sample(&mut rng)).collect())
        .collect();

    let mut make = |per_class: usize| {
        let n = per_class * cfg.classes;
        let mut inputs = Array2::zeros((n, cfg.dim));
        let mut labels = Vec::with_capacity(n);
        for i in 0..per_class {
            for (c, center) in centers.iter().enumerate() {
                let row = i * cfg.classes + c;
                for (d, &cv) in center.iter().enumerate() {
                    inputs[[row, d]] = cv + noise.sample(&mut rng);
                }
                labels.push(c);
            }
        }
        LabeledSet::new(inputs, labels, cfg.classes)
    };
    let train = make(cfg.train_per_class)?;
    let test = make(cfg.test_per_class)?;
    SourceDataset::new(train, test)
}

// ---------------------------------------------------------------------------
// IDX ingestion (big-endian header: magic, dims; u8 payload)
// ---------------------------------------------------------------------------

const IDX_DTYPE_U8: u8 = 0x08;

struct IdxTensor {
    dims: Vec<usize>,
    data: Vec<u8>,
}

fn parse_idx(bytes: &[u8], path: &str) -> Result<IdxTensor, DataError> {
    if bytes.len() < 4 {
        return Err(DataError::Truncated { path: path.into(), detail: "missing magic".into() });
    }
    if bytes[0] != 0 || bytes[1] != 0 {
        return Err(DataError::BadMagic {
            path: path.into(),
            detail: format!("leading bytes {:#04x} {:#04x}", bytes[0], bytes[1]),
        });
    }
    let dtype = bytes[2];
    if dtype != IDX_DTYPE_U8 {
        return Err(DataError::UnsupportedType { path: path.into(), dtype });
    }
    let ndims = bytes[3] as usize;
    if ndims == 0 {
        return Err(DataError::BadMagic { path: path.into(), detail: "zero dimensions".into() });
    }
    let header_len = 4 + 4 * ndims;
    if bytes.len() < header_len {
        return Err(DataError::Truncated { path: path.into(), detail: "dims cut short".into() });
    }
    let dims: Vec<usize> = (0..ndims)
        .map(|i| {
            let off = 4 + 4 * i;
            u32::from_be_bytes([bytes[off], bytes[off + 1], bytes[off + 2], bytes[off + 3]]) as usize
        })
        .collect();
    let expected: usize = dims.iter().product();
    let data = &bytes[header_len..];
    if data.len() != expected {
        return Err(DataError::Truncated {
            path: path.into(),
            detail: format!("payload {} bytes, header promises {expected}", data.len()),
        });
    }
    Ok(IdxTensor { dims, data: data.to_vec() })
}

fn read_file(path: &Path) -> Result<Vec<u8>, DataError> {
    let mut buf = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut buf))
        .map_err(|source| DataError::Io { path: path.display().to_string(), source })?;
    Ok(buf)
}

/// Loads an IDX image/label file pair into a labeled set. Pixels are scaled
/// to `[0, 1]`; images are flattened row-major.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<LabeledSet, DataError> {
    let images = parse_idx(&read_file(images_path)?, &images_path.display().to_string())?;
    let labels = parse_idx(&read_file(labels_path)?, &labels_path.display().to_string())?;
    if labels.dims.len() != 1 {
        return Err(DataError::DimMismatch(format!(
            "label file has {} dims, expected 1",
            labels.dims.len()
        )));
    }
    let n = images.dims[0];
    if labels.dims[0] != n {
        return Err(DataError::DimMismatch(format!(
            "{n} images vs {} labels",
            labels.dims[0]
        )));
    }
    let row_len: usize = images.dims[1..].iter().product();
    if row_len == 0 {
        return Err(DataError::DimMismatch("image rows have zero elements".into()));
    }
    let inputs = Array2::from_shape_vec(
        (n, row_len),
        images.data.iter().map(|&b| b as f64 / 255.0).collect(),
    )
    .expect("shape covers the payload");
    let label_vec: Vec<usize> = labels.data.iter().map(|&b| b as usize).collect();
    let num_classes = label_vec.iter().max().map(|&m| m + 1).unwrap_or(0);
    LabeledSet::new(inputs, label_vec, num_classes)
}

/// Writes a `(N, rows, cols)` u8 image tensor in IDX layout.
pub fn write_idx_images(path: &Path, images: &[u8], n: usize, rows: usize, cols: usize) -> Result<(), DataError> {
    assert_eq!(images.len(), n * rows * cols);
    let mut bytes = vec![0u8, 0, IDX_DTYPE_U8, 3];
    for d in [n, rows, cols] {
        bytes.extend_from_slice(&(d as u32).to_be_bytes());
    }
    bytes.extend_from_slice(images);
    std::fs::write(path, bytes)
        .map_err(|source| DataError::Io { path: path.display().to_string(), source })
}

/// Writes a u8 label vector in IDX layout.
pub fn write_idx_labels(path: &Path, labels: &[u8]) -> Result<(), DataError> {
    let mut bytes = vec![0u8, 0, IDX_DTYPE_U8, 1];
    bytes.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    bytes.extend_from_slice(labels);
    std::fs::write(path, bytes)
        .map_err(|source| DataError::Io { path: path.display().to_string(), source })
}

// ---------------------------------------------------------------------------
// CIFAR-100 binary ingestion (fixed-stride records: coarse byte, fine byte,
// 3072 pixel bytes)
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CifarLabel {
    Coarse,
    Fine,
}

const CIFAR_PIXELS: usize = 3 * 32 * 32;
const CIFAR_STRIDE: usize = 2 + CIFAR_PIXELS;

fn parse_cifar100(bytes: &[u8], kind: CifarLabel, path: &str) -> Result<LabeledSet, DataError> {
    if bytes.is_empty() || bytes.len() % CIFAR_STRIDE != 0 {
        return Err(DataError::Truncated {
            path: path.into(),
            detail: format!("{} bytes is not a multiple of the {CIFAR_STRIDE}-byte record", bytes.len()),
        });
    }
    let n = bytes.len() / CIFAR_STRIDE;
    let (label_offset, num_classes) = match kind {
        CifarLabel::Coarse => (0, 20),
        CifarLabel::Fine => (1, 100),
    };
    let mut inputs = Array2::zeros((n, CIFAR_PIXELS));
    let mut labels = Vec::with_capacity(n);
    for r in 0..n {
        let rec = &bytes[r * CIFAR_STRIDE..(r + 1) * CIFAR_STRIDE];
        let label = rec[label_offset] as usize;
        if label >= num_classes {
            return Err(DataError::LabelOutOfRange { label, classes: num_classes });
        }
        labels.push(label);
        for (d, &b) in rec[2..].iter().enumerate() {
            inputs[[r, d]] = b as f64 / 255.0;
        }
    }
    LabeledSet::new(inputs, labels, num_classes)
}

/// Loads one CIFAR-100 binary split file.
pub fn load_cifar_binary(path: &Path, kind: CifarLabel) -> Result<LabeledSet, DataError> {
    parse_cifar100(&read_file(path)?, kind, &path.display().to_string())
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

fn argmax(row: ndarray::ArrayView1<f64>) -> usize {
    let mut best = 0;
    let mut best_v = f64::NEG_INFINITY;
    for (i, &v) in row.iter().enumerate() {
        if v > best_v {
            best_v = v;
            best = i;
        }
    }
    best
}

/// Accuracy of head `task`'s argmax on that task's test data.
pub fn task_il_accuracy(model: &Model, task: &TaskData, head: usize) -> Result<f64, DataError> {
    let logits = model.forward(&task.test.inputs, &[head])?.pop().expect("one head requested");
    let correct = logits
        .rows()
        .into_iter()
        .zip(&task.test.labels)
        .filter(|(row, label)| argmax(*row) == **label)
        .count();
    Ok(correct as f64 / task.test.len() as f64)
}

/// Accuracy of the argmax over the concatenated logits of heads `0..seen`
/// against the sample's global position in that layout.
pub fn class_il_accuracy(model: &Model, stream: &TaskStream, task_idx: usize, seen: usize) -> Result<f64, DataError> {
    let offsets = stream.head_offsets();
    let task = &stream.tasks[task_idx];
    let heads: Vec<usize> = (0..seen).collect();
    let per_head = model.forward(&task.test.inputs, &heads)?;
    let concat = ndarray::concatenate(
        Axis(1),
        &per_head.iter().map(|a| a.view()).collect::<Vec<_>>(),
    )
    .expect("equal row counts");
    let correct = concat
        .rows()
        .into_iter()
        .zip(&task.test.labels)
        .filter(|(row, local)| argmax(*row) == offsets[task_idx] + **local)
        .count();
    Ok(correct as f64 / task.test.len() as f64)
}

/// Accuracy row over the tasks seen so far (one entry per learned head).
/// Never mutates the model.
pub fn evaluate(model: &Model, stream: &TaskStream, mode: Mode) -> Result<Vec<f64>, DataError> {
    let seen = model.num_heads().min(stream.num_tasks());
    let mut row = Vec::with_capacity(seen);
    for j in 0..seen {
        let acc = match mode {
            Mode::TaskIl => task_il_accuracy(model, &stream.tasks[j], j)?,
            Mode::ClassIl => class_il_accuracy(model, stream, j, seen)?,
        };
        row.push(acc);
    }
    Ok(row)
}

/// Accuracy on a not-yet-learned task, read out through a fresh random head
/// attached to the current trunk. Used to fill forward-transfer probes.
pub fn probe_future_accuracy(model: &Model, task: &TaskData, seed: u64) -> Result<f64, DataError> {
    let features = model.features(&task.test.inputs)?;
    let head = Affine::random_readout(model.feature_dim(), task.num_classes(), seed);
    let logits = head.forward(&features);
    let correct = logits
        .rows()
        .into_iter()
        .zip(&task.test.labels)
        .filter(|(row, label)| argmax(*row) == **label)
        .count();
    Ok(correct as f64 / task.test.len() as f64)
}
