//! Accuracy-matrix bookkeeping and the evaluation metric suite: average
//! accuracy, forward/backward transfer, average forgetting, intransigence,
//! the plasticity-stability ratio, the random-baseline reference accuracy
//! and memory-footprint accounting.
//!
//! Accuracies are fractions in `[0, 1]` internally; percentage formatting is
//! left to report emission. Metric definitions are written 1-based
//! (`A[i][j]`, `i, j = 1..T`) in the docs below and mapped onto 0-based
//! storage where row `i` holds the accuracies measured after training stage
//! `i + 1`.

use ndarray::Array2;
use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::model::{build_model, ModelError, ModelSpec};
use crate::scenarios::LabeledSet;
use crate::train::derive_seed;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("matrix entry A[{i}][{j}] (1-based) is missing")]
    MissingEntry { i: usize, j: usize },
    #[error("metric needs at least {needed} tasks, matrix has {got}")]
    TooFewTasks { needed: usize, got: usize },
    #[error("accuracy {0} outside [0, 1]")]
    BadValue(f64),
    #[error("baseline vector has length {got}, expected {expected}")]
    BaselineLength { expected: usize, got: usize },
    #[error("cannot parse accuracy matrix: {0}")]
    Parse(String),
    #[error("empty test set")]
    EmptyTestSet,
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// T x T accuracy matrix. `A[i][j]` (1-based) is the accuracy on task `j`
/// after training task `i`; row `i` is filled for `j <= i`, plus the
/// superdiagonal entry `j = i + 1` when forward-transfer probes run.
#[derive(Debug, Clone, PartialEq)]
pub struct AccuracyMatrix {
    t: usize,
    cells: Vec<Vec<Option<f64>>>,
}

impl AccuracyMatrix {
    pub fn new(t: usize) -> Self {
        AccuracyMatrix { t, cells: vec![vec![None; t]; t] }
    }

    pub fn num_tasks(&self) -> usize {
        self.t
    }

    /// Sets a cell using 0-based indices.
    pub fn set(&mut self, stage: usize, task: usize, value: f64) -> Result<(), MetricsError> {
        if !(0.0..=1.0).contains(&value) {
            return Err(MetricsError::BadValue(value));
        }
        self.cells[stage][task] = Some(value);
        Ok(())
    }

    pub fn get(&self, stage: usize, task: usize) -> Option<f64> {
        self.cells.get(stage).and_then(|r| r.get(task)).copied().flatten()
    }

    fn require(&self, stage: usize, task: usize) -> Result<f64, MetricsError> {
        self.get(stage, task).ok_or(MetricsError::MissingEntry { i: stage + 1, j: task + 1 })
    }

    /// Serializes one row per training stage, comma-separated with six
    /// fractional digits; unfilled cells stay empty.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for row in &self.cells {
            let line: Vec<String> = row
                .iter()
                .map(|c| c.map(|v| format!("{v:.6}")).unwrap_or_default())
                .collect();
            out.push_str(&line.join(","));
            out.push('\n');
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self, MetricsError> {
        let lines: Vec<&str> = text.lines().collect();
        let t = lines.len();
        if t == 0 {
            return Err(MetricsError::Parse("no rows".into()));
        }
        let mut m = AccuracyMatrix::new(t);
        for (i, line) in lines.iter().enumerate() {
            let cells: Vec<&str> = line.split(',').collect();
            if cells.len() != t {
                return Err(MetricsError::Parse(format!(
                    "row {} has {} cells, expected {t}",
                    i + 1,
                    cells.len()
                )));
            }
            for (j, cell) in cells.iter().enumerate() {
                if cell.is_empty() {
                    continue;
                }
                let v: f64 = cell
                    .parse()
                    .map_err(|e| MetricsError::Parse(format!("cell ({},{}): {e}", i + 1, j + 1)))?;
                m.set(i, j, v)?;
            }
        }
        Ok(m)
    }

    /// Copy with every filled cell passed through the six-digit CSV
    /// formatting, so metrics computed on it agree exactly with metrics
    /// recomputed from the persisted file.
    pub fn rounded(&self) -> Self {
        let mut out = AccuracyMatrix::new(self.t);
        for i in 0..self.t {
            for j in 0..self.t {
                if let Some(v) = self.cells[i][j] {
                    let r: f64 = format!("{v:.6}").parse().expect("formatted float");
                    out.cells[i][j] = Some(r);
                }
            }
        }
        out
    }
}

/// `ACC_T = (1/T) sum_k A[T][k]`: mean of the last row.
pub fn avg_accuracy(a: &AccuracyMatrix) -> Result<f64, MetricsError> {
    let t = a.num_tasks();
    let mut sum = 0.0;
    for k in 0..t {
        sum += a.require(t - 1, k)?;
    }
    Ok(sum / t as f64)
}

/// `FWT_T = (1/(T-1)) sum_{k=2..T} (A[k-1][k] - b_k)`: how much training on
/// earlier tasks helps the next task before it is trained, against the
/// accuracy `b_k` of a randomly initialized reference model.
pub fn fwt(a: &AccuracyMatrix, b: &[f64]) -> Result<f64, MetricsError> {
    let t = a.num_tasks();
    if t < 2 {
        return Err(MetricsError::TooFewTasks { needed: 2, got: t });
    }
    if b.len() != t {
        return Err(MetricsError::BaselineLength { expected: t, got: b.len() });
    }
    let mut sum = 0.0;
    for i in 0..t - 1 {
        sum += a.require(i, i + 1)? - b[i + 1];
    }
    Ok(sum / (t - 1) as f64)
}

/// `BWT_T = (1/(T-1)) sum_{k=1..T-1} (A[T][k] - A[k][k])`: influence of
/// learning the last task on all previous tasks.
pub fn bwt(a: &AccuracyMatrix) -> Result<f64, MetricsError> {
    let t = a.num_tasks();
    if t < 2 {
        return Err(MetricsError::TooFewTasks { needed: 2, got: t });
    }
    let mut sum = 0.0;
    for k in 0..t - 1 {
        sum += a.require(t - 1, k)? - a.require(k, k)?;
    }
    Ok(sum / (t - 1) as f64)
}

/// `AF_T = (1/(T-1)) sum_{j<T} (max_{i<=T-1} A[i][j] - A[T][j])`, the mean
/// gap between each task's best historical accuracy and its final accuracy.
/// The maximum runs over the filled entries of column `j` in rows `1..T-1`.
pub fn avg_forgetting(a: &AccuracyMatrix) -> Result<f64, MetricsError> {
    let t = a.num_tasks();
    if t < 2 {
        return Err(MetricsError::TooFewTasks { needed: 2, got: t });
    }
    let mut sum = 0.0;
    for j in 0..t - 1 {
        let mut best: Option<f64> = None;
        for i in 0..t - 1 {
            if let Some(v) = a.get(i, j) {
                best = Some(best.map_or(v, |b: f64| b.max(v)));
            }
        }
        let best = best.ok_or(MetricsError::MissingEntry { i: j + 1, j: j + 1 })?;
        sum += best - a.require(t - 1, j)?;
    }
    Ok(sum / (t - 1) as f64)
}

/// `I_T = A*_T - A[T][T]`: shortfall of the final-task accuracy versus a
/// reference model trained jointly on every task's data.
pub fn intransigence(a: &AccuracyMatrix, a_star: f64) -> Result<f64, MetricsError> {
    if !(0.0..=1.0).contains(&a_star) {
        return Err(MetricsError::BadValue(a_star));
    }
    let t = a.num_tasks();
    Ok(a_star - a.require(t - 1, t - 1)?)
}

/// Plasticity-stability ratio, or the no-forgetting sentinel when the
/// accumulated forgetting magnitude falls below `eps`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PsValue {
    Ratio(f64),
    NoForgetting,
}

impl Serialize for PsValue {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            PsValue::Ratio(v) => s.serialize_f64(*v),
            PsValue::NoForgetting => s.serialize_str("no_forgetting"),
        }
    }
}

impl<'de> Deserialize<'de> for PsValue {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Text(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(v) => Ok(PsValue::Ratio(v)),
            Raw::Text(s) if s == "no_forgetting" => Ok(PsValue::NoForgetting),
            Raw::Text(s) => Err(D::Error::custom(format!("unknown ps sentinel {s:?}"))),
        }
    }
}

/// `PS_T = (1/(T-1)) * [sum_{k=2..T} (A[k][k] - A[k-1][k])]
///         / |sum_{k=1..T-1} (A[T][k] - A[k][k])|`.
///
/// The numerator accumulates per-task learning gains over the pre-training
/// probe; the denominator is the accumulated forgetting magnitude.
pub fn plasticity_stability(a: &AccuracyMatrix, eps: f64) -> Result<PsValue, MetricsError> {
    let t = a.num_tasks();
    if t < 2 {
        return Err(MetricsError::TooFewTasks { needed: 2, got: t });
    }
    let mut num = 0.0;
    for k in 1..t {
        num += a.require(k, k)? - a.require(k - 1, k)?;
    }
    let mut denom = 0.0;
    for k in 0..t - 1 {
        denom += a.require(t - 1, k)? - a.require(k, k)?;
    }
    if denom.abs() < eps {
        return Ok(PsValue::NoForgetting);
    }
    Ok(PsValue::Ratio(num / denom.abs() / (t - 1) as f64))
}

/// Mean test accuracy of freshly He-initialized models over `num_seeds`
/// seeds: the `b_k` reference for forward transfer.
pub fn random_baseline_accuracy(
    trunk_template: &ModelSpec,
    test: &LabeledSet,
    num_seeds: usize,
    base_seed: u64,
) -> Result<f64, MetricsError> {
    if test.is_empty() {
        return Err(MetricsError::EmptyTestSet);
    }
    if num_seeds == 0 {
        return Err(MetricsError::TooFewTasks { needed: 1, got: 0 });
    }
    let spec = ModelSpec {
        input_dim: test.input_dim(),
        trunk_layers: trunk_template.trunk_layers.clone(),
        head_dims: vec![test.num_classes],
    };
    let mut total = 0.0;
    for s in 0..num_seeds {
        let model = build_model(&spec, derive_seed(base_seed, s as u64))?;
        let logits = model.forward(&test.inputs, &[0])?.pop().expect("one head");
        let correct = logits
            .rows()
            .into_iter()
            .zip(&test.labels)
            .filter(|(row, label)| row_argmax(row) == **label)
            .count();
        total += correct as f64 / test.len() as f64;
    }
    Ok(total / num_seeds as f64)
}

fn row_argmax(row: &ndarray::ArrayView1<f64>) -> usize {
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

/// Total storage in bytes: each parameter as a 32-bit float (4 bytes) plus
/// raw exemplar payloads.
pub fn memory_footprint(param_count: u64, exemplar_count: u64, bytes_per_exemplar: u64) -> u64 {
    param_count * 4 + exemplar_count * bytes_per_exemplar
}

/// Decimal megabytes (1 MB = 10^6 bytes), matching the reporting convention.
pub fn bytes_to_mb(bytes: u64) -> f64 {
    bytes as f64 / 1e6
}

/// Flat metrics report persisted as `metrics.json`; auxiliaries (`b_k`,
/// `a_star`) are echoed so every value is recomputable from the accuracy
/// matrix CSV plus this file.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct MetricsReport {
    pub acc: f64,
    pub fwt: Option<f64>,
    pub bwt: Option<f64>,
    pub af: Option<f64>,
    pub intransigence: Option<f64>,
    pub ps: Option<PsValue>,
    pub b_k: Option<Vec<f64>>,
    pub a_star: Option<f64>,
}

/// Computes every metric the matrix supports. FWT needs `b_k`;
/// intransigence needs `a_star`; BWT/AF/PS need at least two tasks and the
/// probe entries PS depends on.
pub fn compute_report(
    a: &AccuracyMatrix,
    b_k: Option<&[f64]>,
    a_star: Option<f64>,
    ps_eps: f64,
) -> Result<MetricsReport, MetricsError> {
    let t = a.num_tasks();
    let acc = avg_accuracy(a)?;
    let fwt_v = match b_k {
        Some(b) if t >= 2 => Some(fwt(a, b)?),
        _ => None,
    };
    let (bwt_v, af_v) = if t >= 2 { (Some(bwt(a)?), Some(avg_forgetting(a)?)) } else { (None, None) };
    let ps_v = if t >= 2 && (0..t - 1).all(|i| a.get(i, i + 1).is_some()) {
        Some(plasticity_stability(a, ps_eps)?)
    } else {
        None
    };
    let i_v = match a_star {
        Some(s) => Some(intransigence(a, s)?),
        None => None,
    };
    Ok(MetricsReport {
        acc,
        fwt: fwt_v,
        bwt: bwt_v,
        af: af_v,
        intransigence: i_v,
        ps: ps_v,
        b_k: b_k.map(|b| b.to_vec()),
        a_star,
    })
}

/// Fills a matrix from a dense array (test helper and oracle input).
pub fn matrix_from_dense(a: &Array2<f64>) -> AccuracyMatrix {
    let t = a.nrows();
    let mut m = AccuracyMatrix::new(t);
    for i in 0..t {
        for j in 0..t {
            m.set(i, j, a[[i, j]]).expect("dense matrix entries are valid accuracies");
        }
    }
    m
}
