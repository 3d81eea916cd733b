//! Differentiable classifier substrate: a dense MLP split into a shared
//! trunk and per-task classification heads, with block-level freezing,
//! parameter snapshots and classical-momentum SGD.
//!
//! Blocks are indexed as `0 = trunk`, `1.. = heads in task order`. A block
//! whose trainable flag is false is bit-identical before and after any
//! optimizer step.

use std::io::{Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model spec: {0}")]
    InvalidSpec(String),
    #[error("input width {got} does not match expected {expected}")]
    DimMismatch { expected: usize, got: usize },
    #[error("unknown head id {0}")]
    UnknownHead(usize),
    #[error("trainable mask has length {got}, model has {expected} blocks")]
    MaskLength { expected: usize, got: usize },
    #[error("snapshot does not match model architecture: {0}")]
    SnapshotMismatch(String),
    #[error("non-finite value encountered in {0}")]
    NonFinite(&'static str),
    #[error("optimizer setting out of range: {0}")]
    OptimizerSetting(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("corrupt parameter file: {0}")]
    CorruptParams(String),
}

/// Elementwise nonlinearity applied after a trunk affine layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Identity,
}

impl Activation {
    fn apply(self, x: &Array2<f64>) -> Array2<f64> {
        match self {
            Activation::Relu => x.mapv(|v| if v > 0.0 { v } else { 0.0 }),
            Activation::Identity => x.clone(),
        }
    }

    /// Derivative expressed in terms of the layer output.
    fn grad_from_output(self, out: &Array2<f64>) -> Array2<f64> {
        match self {
            Activation::Relu => out.mapv(|v| if v > 0.0 { 1.0 } else { 0.0 }),
            Activation::Identity => Array2::ones(out.raw_dim()),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LayerSpec {
    pub width: usize,
    pub activation: Activation,
}

impl LayerSpec {
    pub fn relu(width: usize) -> Self {
        LayerSpec { width, activation: Activation::Relu }
    }
}

/// Architecture description: input width, trunk layers, one class count per head.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelSpec {
    pub input_dim: usize,
    pub trunk_layers: Vec<LayerSpec>,
    pub head_dims: Vec<usize>,
}

impl ModelSpec {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.input_dim == 0 {
            return Err(ModelError::InvalidSpec("input_dim must be positive".into()));
        }
        if self.trunk_layers.is_empty() {
            return Err(ModelError::InvalidSpec("at least one trunk layer required".into()));
        }
        if self.trunk_layers.iter().any(|l| l.width == 0) {
            return Err(ModelError::InvalidSpec("trunk layer width must be positive".into()));
        }
        if self.head_dims.iter().any(|&d| d == 0) {
            return Err(ModelError::InvalidSpec("head dims must be >= 1".into()));
        }
        Ok(())
    }

    /// Width of the trunk output that every head reads.
    pub fn feature_dim(&self) -> usize {
        self.trunk_layers.last().map(|l| l.width).unwrap_or(0)
    }
}

/// One affine transform `y = x W + b` with `W: in_dim x out_dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct Affine {
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

impl Affine {
    fn he_init(in_dim: usize, out_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        let std = (2.0 / in_dim as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("std is finite and positive");
        let mut w = Array2::zeros((in_dim, out_dim));
        for v in w.iter_mut() {
            *v = normal.sample(rng);
        }
        Affine { w, b: Array1::zeros(out_dim) }
    }

    pub fn in_dim(&self) -> usize {
        self.w.nrows()
    }

    pub fn out_dim(&self) -> usize {
        self.w.ncols()
    }

    pub fn forward(&self, x: &Array2<f64>) -> Array2<f64> {
        x.dot(&self.w) + &self.b
    }

    /// Standalone He-initialized readout, used for forward-transfer probes
    /// and random-baseline reference models.
    pub fn random_readout(in_dim: usize, out_dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Affine::he_init(in_dim, out_dim, &mut rng)
    }

    pub fn param_count(&self) -> usize {
        self.w.len() + self.b.len()
    }

    fn bits_into(&self, out: &mut Vec<u64>) {
        out.extend(self.w.iter().map(|v| v.to_bits()));
        out.extend(self.b.iter().map(|v| v.to_bits()));
    }
}

/// Gradient of one affine block.
#[derive(Debug, Clone)]
pub struct BlockGrad {
    pub dw: Array2<f64>,
    pub db: Array1<f64>,
}

impl BlockGrad {
    fn zeros_like(a: &Affine) -> Self {
        BlockGrad { dw: Array2::zeros(a.w.raw_dim()), db: Array1::zeros(a.b.raw_dim()) }
    }

    fn is_finite(&self) -> bool {
        self.dw.iter().all(|v| v.is_finite()) && self.db.iter().all(|v| v.is_finite())
    }
}

/// Gradients for a subset of model blocks; absent entries mean "no gradient".
#[derive(Debug, Clone)]
pub struct Gradients {
    pub trunk: Option<Vec<BlockGrad>>,
    pub heads: Vec<Option<BlockGrad>>,
}

impl Gradients {
    pub fn none(model: &Model) -> Self {
        Gradients { trunk: None, heads: vec![None; model.num_heads()] }
    }
}

/// Activations cached by a trunk forward pass, consumed by `Model::backward`.
pub struct TrunkCache {
    /// Input to each trunk affine; `inputs[0]` is the batch itself.
    inputs: Vec<Array2<f64>>,
    /// Post-activation output of each trunk layer; last entry is the feature matrix.
    outputs: Vec<Array2<f64>>,
}

impl TrunkCache {
    pub fn features(&self) -> &Array2<f64> {
        self.outputs.last().expect("trunk has at least one layer")
    }
}

/// Value copy of just the trunk, usable as a frozen feature extractor after
/// the live trunk has moved on.
#[derive(Debug, Clone)]
pub struct FrozenTrunk {
    layers: Vec<Affine>,
    activations: Vec<Activation>,
    input_dim: usize,
}

impl FrozenTrunk {
    pub fn features(&self, inputs: &Array2<f64>) -> Result<Array2<f64>, ModelError> {
        if inputs.ncols() != self.input_dim {
            return Err(ModelError::DimMismatch { expected: self.input_dim, got: inputs.ncols() });
        }
        let mut x = inputs.to_owned();
        for (layer, act) in self.layers.iter().zip(&self.activations) {
            x = act.apply(&layer.forward(&x));
        }
        Ok(x)
    }

    pub fn feature_dim(&self) -> usize {
        self.layers.last().map(Affine::out_dim).unwrap_or(0)
    }
}

/// Stage label attached to parameter snapshots and snapshot files.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SnapshotTag {
    Random,
    Trained,
    Updated,
    FineTuned,
    FineTunedPlus,
}

impl SnapshotTag {
    /// Short form used in snapshot file names (`params_<tag>.bin`).
    pub fn as_str(self) -> &'static str {
        match self {
            SnapshotTag::Random => "r",
            SnapshotTag::Trained => "trained",
            SnapshotTag::Updated => "u",
            SnapshotTag::FineTuned => "f",
            SnapshotTag::FineTunedPlus => "f+",
        }
    }
}

/// Value copy of all model parameters. Never aliases live parameters.
#[derive(Debug, Clone)]
pub struct ParameterSnapshot {
    pub tag: SnapshotTag,
    pub trunk: Vec<Affine>,
    pub heads: Vec<Affine>,
}

#[derive(Debug, Clone)]
pub struct Model {
    spec: ModelSpec,
    trunk: Vec<Affine>,
    heads: Vec<Affine>,
    trainable: Vec<bool>,
}

/// Builds a model with He-initialized weights and zero biases.
/// Deterministic given `(spec, seed)`.
pub fn build_model(spec: &ModelSpec, seed: u64) -> Result<Model, ModelError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut trunk = Vec::with_capacity(spec.trunk_layers.len());
    let mut in_dim = spec.input_dim;
    for layer in &spec.trunk_layers {
        trunk.push(Affine::he_init(in_dim, layer.width, &mut rng));
        in_dim = layer.width;
    }
    let feature_dim = in_dim;
    let heads: Vec<Affine> = spec
        .head_dims
        .iter()
        .map(|&d| Affine::he_init(feature_dim, d, &mut rng))
        .collect();
    let trainable = vec![true; 1 + heads.len()];
    Ok(Model { spec: spec.clone(), trunk, heads, trainable })
}

impl Model {
    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn input_dim(&self) -> usize {
        self.spec.input_dim
    }

    pub fn feature_dim(&self) -> usize {
        self.spec.feature_dim()
    }

    pub fn num_heads(&self) -> usize {
        self.heads.len()
    }

    pub fn num_blocks(&self) -> usize {
        1 + self.heads.len()
    }

    pub fn head(&self, id: usize) -> Result<&Affine, ModelError> {
        self.heads.get(id).ok_or(ModelError::UnknownHead(id))
    }

    pub fn head_dim(&self, id: usize) -> Result<usize, ModelError> {
        Ok(self.head(id)?.out_dim())
    }

    pub fn trunk_layers(&self) -> &[Affine] {
        &self.trunk
    }

    pub fn param_count(&self) -> usize {
        self.trunk.iter().map(Affine::param_count).sum::<usize>()
            + self.heads.iter().map(Affine::param_count).sum::<usize>()
    }

    /// Appends a fresh He-initialized, trainable head; existing blocks untouched.
    pub fn add_head(&mut self, num_classes: usize, seed: u64) -> Result<usize, ModelError> {
        if num_classes == 0 {
            return Err(ModelError::InvalidSpec("head dims must be >= 1".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.heads.push(Affine::he_init(self.feature_dim(), num_classes, &mut rng));
        self.spec.head_dims.push(num_classes);
        self.trainable.push(true);
        Ok(self.heads.len() - 1)
    }

    /// One flag per block: `[trunk, head 0, head 1, ..]`.
    pub fn set_trainable(&mut self, mask: &[bool]) -> Result<(), ModelError> {
        if mask.len() != self.num_blocks() {
            return Err(ModelError::MaskLength { expected: self.num_blocks(), got: mask.len() });
        }
        self.trainable.copy_from_slice(mask);
        // keep the mask length in sync even though copy_from_slice needs equal lengths
        Ok(())
    }

    pub fn trainable(&self) -> &[bool] {
        &self.trainable
    }

    /// Raw parameter bits of one block, for exact freeze-contract checks.
    pub fn block_bits(&self, block: usize) -> Vec<u64> {
        let mut out = Vec::new();
        if block == 0 {
            for a in &self.trunk {
                a.bits_into(&mut out);
            }
        } else {
            self.heads[block - 1].bits_into(&mut out);
        }
        out
    }

    /// Trunk forward pass with cached activations for backprop.
    pub fn forward_trunk(&self, inputs: &Array2<f64>) -> Result<TrunkCache, ModelError> {
        if inputs.ncols() != self.spec.input_dim {
            return Err(ModelError::DimMismatch { expected: self.spec.input_dim, got: inputs.ncols() });
        }
        let mut cache = TrunkCache { inputs: Vec::new(), outputs: Vec::new() };
        let mut x = inputs.to_owned();
        for (layer, spec) in self.trunk.iter().zip(&self.spec.trunk_layers) {
            cache.inputs.push(x.clone());
            let pre = layer.forward(&x);
            let out = spec.activation.apply(&pre);
            cache.outputs.push(out.clone());
            x = out;
        }
        Ok(cache)
    }

    /// Trunk features without the backprop cache.
    pub fn features(&self, inputs: &Array2<f64>) -> Result<Array2<f64>, ModelError> {
        Ok(self.forward_trunk(inputs)?.features().clone())
    }

    /// Pre-softmax logits for each requested head, in request order.
    pub fn forward(&self, inputs: &Array2<f64>, heads: &[usize]) -> Result<Vec<Array2<f64>>, ModelError> {
        for &h in heads {
            if h >= self.heads.len() {
                return Err(ModelError::UnknownHead(h));
            }
        }
        let cache = self.forward_trunk(inputs)?;
        let features = cache.features();
        Ok(heads.iter().map(|&h| self.heads[h].forward(features)).collect())
    }

    /// Logits of one head given precomputed trunk features.
    pub fn head_logits(&self, features: &Array2<f64>, head: usize) -> Result<Array2<f64>, ModelError> {
        let h = self.head(head)?;
        if features.ncols() != h.in_dim() {
            return Err(ModelError::DimMismatch { expected: h.in_dim(), got: features.ncols() });
        }
        Ok(h.forward(features))
    }

    /// Backpropagates logit-space gradients into parameter gradients.
    ///
    /// `head_dlogits` carries dLoss/dlogits per live head id. `external_heads`
    /// are affine readouts that are not model blocks (e.g. frozen snapshot
    /// heads); their weights route gradient into the trunk but receive none
    /// themselves. `extra_feature_grad` is added directly to the feature
    /// gradient (losses defined on trunk features).
    pub fn backward(
        &self,
        cache: &TrunkCache,
        head_dlogits: &[(usize, Array2<f64>)],
        external_heads: &[(&Affine, Array2<f64>)],
        extra_feature_grad: Option<&Array2<f64>>,
    ) -> Result<Gradients, ModelError> {
        let features = cache.features();
        let mut dfeat: Array2<f64> = Array2::zeros(features.raw_dim());
        let mut heads: Vec<Option<BlockGrad>> = vec![None; self.heads.len()];

        for (id, dlogits) in head_dlogits {
            let head = self.head(*id)?;
            if dlogits.ncols() != head.out_dim() || dlogits.nrows() != features.nrows() {
                return Err(ModelError::DimMismatch { expected: head.out_dim(), got: dlogits.ncols() });
            }
            let g = BlockGrad {
                dw: features.t().dot(dlogits),
                db: dlogits.sum_axis(Axis(0)),
            };
            dfeat = dfeat + dlogits.dot(&head.w.t());
            match &mut heads[*id] {
                Some(existing) => {
                    existing.dw = &existing.dw + &g.dw;
                    existing.db = &existing.db + &g.db;
                }
                slot => *slot = Some(g),
            }
        }
        for (affine, dlogits) in external_heads {
            dfeat = dfeat + dlogits.dot(&affine.w.t());
        }
        if let Some(extra) = extra_feature_grad {
            dfeat = dfeat + extra;
        }

        let mut trunk_grads: Vec<BlockGrad> =
            self.trunk.iter().map(BlockGrad::zeros_like).collect();
        let mut dout = dfeat;
        for i in (0..self.trunk.len()).rev() {
            let act = self.spec.trunk_layers[i].activation;
            let dpre = &dout * &act.grad_from_output(&cache.outputs[i]);
            trunk_grads[i].dw = cache.inputs[i].t().dot(&dpre);
            trunk_grads[i].db = dpre.sum_axis(Axis(0));
            if i > 0 {
                dout = dpre.dot(&self.trunk[i].w.t());
            }
        }
        Ok(Gradients { trunk: Some(trunk_grads), heads })
    }

    /// Value copy of all parameters.
    pub fn snapshot(&self, tag: SnapshotTag) -> ParameterSnapshot {
        ParameterSnapshot { tag, trunk: self.trunk.clone(), heads: self.heads.clone() }
    }

    /// Value copy of one head's parameters.
    pub fn head_snapshot(&self, id: usize) -> Result<Affine, ModelError> {
        Ok(self.head(id)?.clone())
    }

    /// Value copy of the trunk as a standalone feature extractor.
    pub fn frozen_trunk(&self) -> FrozenTrunk {
        FrozenTrunk {
            layers: self.trunk.clone(),
            activations: self.spec.trunk_layers.iter().map(|l| l.activation).collect(),
            input_dim: self.spec.input_dim,
        }
    }

    /// Restores a snapshot taken from a model of the same architecture.
    pub fn restore(&mut self, snap: &ParameterSnapshot) -> Result<(), ModelError> {
        if snap.trunk.len() != self.trunk.len() || snap.heads.len() != self.heads.len() {
            return Err(ModelError::SnapshotMismatch(format!(
                "block counts differ: snapshot {}+{}, model {}+{}",
                snap.trunk.len(),
                snap.heads.len(),
                self.trunk.len(),
                self.heads.len()
            )));
        }
        for (live, saved) in self.trunk.iter().zip(&snap.trunk).chain(self.heads.iter().zip(&snap.heads)) {
            if live.w.raw_dim() != saved.w.raw_dim() {
                return Err(ModelError::SnapshotMismatch(format!(
                    "block shape differs: snapshot {:?}, model {:?}",
                    saved.w.shape(),
                    live.w.shape()
                )));
            }
        }
        for (live, saved) in self.trunk.iter_mut().zip(&snap.trunk) {
            live.w.assign(&saved.w);
            live.b.assign(&saved.b);
        }
        for (live, saved) in self.heads.iter_mut().zip(&snap.heads) {
            live.w.assign(&saved.w);
            live.b.assign(&saved.b);
        }
        Ok(())
    }

    /// Re-initializes the trunk and the listed heads in place with fresh He draws.
    pub fn reinit_blocks(&mut self, trunk: bool, heads: &[usize], seed: u64) -> Result<(), ModelError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        if trunk {
            let mut in_dim = self.spec.input_dim;
            for (layer, spec) in self.trunk.iter_mut().zip(&self.spec.trunk_layers) {
                *layer = Affine::he_init(in_dim, spec.width, &mut rng);
                in_dim = spec.width;
            }
        }
        let feature_dim = self.feature_dim();
        for &h in heads {
            if h >= self.heads.len() {
                return Err(ModelError::UnknownHead(h));
            }
            let dim = self.heads[h].out_dim();
            self.heads[h] = Affine::he_init(feature_dim, dim, &mut rng);
        }
        Ok(())
    }

    fn blocks_mut(&mut self) -> Vec<&mut Affine> {
        self.trunk.iter_mut().chain(self.heads.iter_mut()).collect()
    }
}

/// Classical-momentum SGD over model blocks: `v <- m*v + g; w <- w - lr*v`.
/// Frozen blocks are skipped entirely, velocities included.
#[derive(Debug)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    v_trunk: Vec<BlockGrad>,
    v_heads: Vec<BlockGrad>,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64) -> Result<Self, ModelError> {
        if !(lr >= 0.0) || !lr.is_finite() {
            return Err(ModelError::OptimizerSetting(format!("lr = {lr}")));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(ModelError::OptimizerSetting(format!("momentum = {momentum}")));
        }
        Ok(Sgd { lr, momentum, v_trunk: Vec::new(), v_heads: Vec::new() })
    }

    pub fn step(&mut self, model: &mut Model, grads: &Gradients) -> Result<(), ModelError> {
        if self.v_trunk.is_empty() {
            self.v_trunk = model.trunk.iter().map(BlockGrad::zeros_like).collect();
        }
        while self.v_heads.len() < model.heads.len() {
            let i = self.v_heads.len();
            self.v_heads.push(BlockGrad::zeros_like(&model.heads[i]));
        }

        if model.trainable[0] {
            if let Some(trunk_grads) = &grads.trunk {
                for (i, g) in trunk_grads.iter().enumerate() {
                    if !g.is_finite() {
                        return Err(ModelError::NonFinite("trunk gradient"));
                    }
                    let v = &mut self.v_trunk[i];
                    v.dw = &v.dw * self.momentum + &g.dw;
                    v.db = &v.db * self.momentum + &g.db;
                    let layer = &mut model.trunk[i];
                    layer.w = &layer.w - &(&v.dw * self.lr);
                    layer.b = &layer.b - &(&v.db * self.lr);
                }
            }
        }
        for (i, maybe_grad) in grads.heads.iter().enumerate() {
            if !model.trainable[1 + i] {
                continue;
            }
            if let Some(g) = maybe_grad {
                if !g.is_finite() {
                    return Err(ModelError::NonFinite("head gradient"));
                }
                let v = &mut self.v_heads[i];
                v.dw = &v.dw * self.momentum + &g.dw;
                v.db = &v.db * self.momentum + &g.db;
                let head = &mut model.heads[i];
                head.w = &head.w - &(&v.dw * self.lr);
                head.b = &head.b - &(&v.db * self.lr);
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Binary parameter files: a u64 header (tensor count, then rows/cols per
// tensor) followed by all values as little-endian f64, row-major.
// ---------------------------------------------------------------------------

fn write_u64<W: Write>(w: &mut W, v: u64) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64, ModelError> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf).map_err(|_| ModelError::CorruptParams("truncated header".into()))?;
    Ok(u64::from_le_bytes(buf))
}

/// Writes a list of 2-D tensors (vectors as a single row).
pub fn write_tensors<W: Write>(w: &mut W, tensors: &[(usize, usize, &[f64])]) -> Result<(), ModelError> {
    write_u64(w, tensors.len() as u64)?;
    for &(rows, cols, data) in tensors {
        debug_assert_eq!(rows * cols, data.len());
        write_u64(w, rows as u64)?;
        write_u64(w, cols as u64)?;
    }
    for &(_, _, data) in tensors {
        for v in data {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

/// Reads a tensor list written by [`write_tensors`].
pub fn read_tensors<R: Read>(r: &mut R) -> Result<Vec<Array2<f64>>, ModelError> {
    let count = read_u64(r)? as usize;
    let mut shapes = Vec::with_capacity(count);
    for _ in 0..count {
        let rows = read_u64(r)? as usize;
        let cols = read_u64(r)? as usize;
        shapes.push((rows, cols));
    }
    let mut out = Vec::with_capacity(count);
    for (rows, cols) in shapes {
        let mut data = vec![0f64; rows * cols];
        for v in data.iter_mut() {
            let mut buf = [0u8; 8];
            r.read_exact(&mut buf)
                .map_err(|_| ModelError::CorruptParams("truncated payload".into()))?;
            *v = f64::from_le_bytes(buf);
        }
        out.push(
            Array2::from_shape_vec((rows, cols), data)
                .map_err(|e| ModelError::CorruptParams(e.to_string()))?,
        );
    }
    Ok(out)
}

impl ParameterSnapshot {
    fn tensor_list(&self) -> Vec<(usize, usize, &[f64])> {
        let mut v = Vec::new();
        for a in self.trunk.iter().chain(self.heads.iter()) {
            v.push((a.w.nrows(), a.w.ncols(), a.w.as_slice().expect("standard layout")));
            v.push((1, a.b.len(), a.b.as_slice().expect("standard layout")));
        }
        v
    }

    /// Writes this snapshot as `params_<tag>.bin` under `dir`; returns the path.
    pub fn save(&self, dir: &Path) -> Result<std::path::PathBuf, ModelError> {
        std::fs::create_dir_all(dir)?;
        let path = dir.join(format!("params_{}.bin", self.tag.as_str()));
        let mut f = std::io::BufWriter::new(std::fs::File::create(&path)?);
        write_tensors(&mut f, &self.tensor_list())?;
        Ok(path)
    }

    /// Reads a snapshot written by [`save`]; `trunk_layer_count` splits the
    /// flat tensor list back into trunk and head blocks.
    pub fn load(path: &Path, tag: SnapshotTag, trunk_layer_count: usize) -> Result<Self, ModelError> {
        let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
        let tensors = read_tensors(&mut f)?;
        if tensors.len() % 2 != 0 || tensors.len() / 2 < trunk_layer_count {
            return Err(ModelError::CorruptParams(format!(
                "expected affine pairs covering {trunk_layer_count} trunk layers, got {} tensors",
                tensors.len()
            )));
        }
        let mut affines = Vec::with_capacity(tensors.len() / 2);
        let mut it = tensors.into_iter();
        while let (Some(w), Some(b)) = (it.next(), it.next()) {
            if b.nrows() != 1 || b.ncols() != w.ncols() {
                return Err(ModelError::CorruptParams("bias row does not match weight".into()));
            }
            affines.push(Affine { b: b.row(0).to_owned(), w });
        }
        let heads = affines.split_off(trunk_layer_count);
        Ok(ParameterSnapshot { tag, trunk: affines, heads })
    }
}
