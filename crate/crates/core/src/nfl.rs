//! The memory-free five-stage procedure for learning one new task on top of
//! a model trained on prior tasks.
//!
//! Per task transition: record soft targets for every existing head on the
//! new data, train a fresh head behind a frozen trunk, retrain the shared
//! trunk and old heads from scratch against the recorded targets, fine-tune
//! trunk and new head together, then run a final stage distilling toward
//! both the recorded and the recomputed targets at once. No stage ever reads
//! a previous task's samples; knowledge flows only through the recorded
//! logits and the frozen per-task head snapshots.

use ndarray::{concatenate, Array2, Axis};

use crate::losses::{
    cross_entropy, cross_entropy_grad, dual_distill_loss, finetune_loss, kd_grad, kd_loss,
    shared_retrain_loss, Hyperparams, LogitRecord,
};
use crate::model::{Affine, BlockGrad, Gradients, Model, SnapshotTag};
use crate::scenarios::LabeledSet;
use crate::train::{derive_seed, run_phase, PhaseStats, TrainError, TrainSettings};

// Stage tags feeding seed derivation; distinct per stage so shuffling and
// re-initialization streams never collide.
const SEED_HEAD: u64 = 0x01;
const SEED_NEW_HEAD_PHASE: u64 = 0x02;
const SEED_RETRAIN_INIT: u64 = 0x03;
const SEED_RETRAIN_PHASE: u64 = 0x04;
const SEED_FINETUNE_PHASE: u64 = 0x05;
const SEED_JOINT_PHASE: u64 = 0x06;
const SEED_FIRST_TASK: u64 = 0x07;

/// Concatenated logits of the listed heads, in list order.
pub(crate) fn concat_head_logits(
    model: &Model,
    features: &Array2<f64>,
    heads: &[usize],
) -> Result<Array2<f64>, TrainError> {
    let mut parts = Vec::with_capacity(heads.len());
    for &h in heads {
        parts.push(model.head_logits(features, h)?);
    }
    let views: Vec<_> = parts.iter().map(|a| a.view()).collect();
    Ok(concatenate(Axis(1), &views).expect("equal row counts"))
}

/// Splits a column-concatenated gradient back into per-head pieces.
pub(crate) fn split_columns(grad: &Array2<f64>, dims: &[usize]) -> Vec<Array2<f64>> {
    let mut out = Vec::with_capacity(dims.len());
    let mut start = 0;
    for &d in dims {
        out.push(grad.slice(ndarray::s![.., start..start + d]).to_owned());
        start += d;
    }
    out
}

/// Cross-entropy training step against one head; shared by several stages
/// and baselines.
pub(crate) fn ce_step(
    model: &Model,
    data: &LabeledSet,
    idx: &[usize],
    head: usize,
) -> Result<(f64, Gradients), TrainError> {
    let x = data.inputs.select(Axis(0), idx);
    let y: Vec<usize> = idx.iter().map(|&r| data.labels[r]).collect();
    let cache = model.forward_trunk(&x)?;
    let logits = model.head_logits(cache.features(), head)?;
    let loss = cross_entropy(&logits, &y)?;
    let dlogits = cross_entropy_grad(&logits, &y)?;
    let grads = model.backward(&cache, &[(head, dlogits)], &[], None)?;
    Ok((loss, grads))
}

/// State carried across tasks: the live model plus a value snapshot of each
/// head as it was at the end of its own task.
#[derive(Debug, Clone)]
pub struct NflState {
    pub model: Model,
    frozen_head_snapshots: Vec<Affine>,
    task_count: usize,
}

impl NflState {
    pub fn task_count(&self) -> usize {
        self.task_count
    }

    pub fn frozen_head_snapshots(&self) -> &[Affine] {
        &self.frozen_head_snapshots
    }

    fn old_head_ids(&self) -> Vec<usize> {
        (0..self.task_count).collect()
    }

    fn old_head_dims(&self) -> Vec<usize> {
        self.frozen_head_snapshots.iter().map(Affine::out_dim).collect()
    }

    fn total_old_classes(&self) -> usize {
        self.old_head_dims().iter().sum()
    }

    /// Trains a fresh single-head model on the first task with plain
    /// cross-entropy and snapshots its head.
    pub fn train_first_task(
        mut model: Model,
        data: &LabeledSet,
        settings: &TrainSettings,
    ) -> Result<Self, TrainError> {
        if model.num_heads() != 1 {
            return Err(TrainError::Procedure(format!(
                "first task expects a single-head model, got {} heads",
                model.num_heads()
            )));
        }
        if model.head_dim(0)? != data.num_classes {
            return Err(TrainError::Procedure(format!(
                "head width {} does not match {} task classes",
                model.head_dim(0)?,
                data.num_classes
            )));
        }
        model.set_trainable(&[true, true])?;
        let phase_seed = derive_seed(settings.seed, SEED_FIRST_TASK);
        run_phase(&mut model, data.len(), settings, phase_seed, |m, idx| {
            ce_step(m, data, idx, 0)
        })?;
        let head = model.head_snapshot(0)?;
        Ok(NflState { model, frozen_head_snapshots: vec![head], task_count: 1 })
    }

    /// Records the soft targets: logits of every existing head on the new
    /// data, concatenated in task order. Pure read.
    pub fn record_soft_targets(&self, inputs: &Array2<f64>) -> Result<LogitRecord, TrainError> {
        if self.task_count == 0 {
            return Err(TrainError::Procedure("no trained task to record targets from".into()));
        }
        if inputs.nrows() == 0 {
            return Err(TrainError::Procedure("cannot record targets on an empty batch".into()));
        }
        let features = self.model.features(inputs)?;
        let logits = concat_head_logits(&self.model, &features, &self.old_head_ids())?;
        Ok(LogitRecord::new(logits)?)
    }

    /// Recomputed targets: current trunk composed with the stored head
    /// snapshots. Pure read.
    pub fn recompute_soft_targets(&self, inputs: &Array2<f64>) -> Result<Array2<f64>, TrainError> {
        if self.frozen_head_snapshots.is_empty() {
            return Err(TrainError::Procedure("no head snapshots stored".into()));
        }
        let features = self.model.features(inputs)?;
        let parts: Vec<Array2<f64>> =
            self.frozen_head_snapshots.iter().map(|h| h.forward(&features)).collect();
        let views: Vec<_> = parts.iter().map(|a| a.view()).collect();
        Ok(concatenate(Axis(1), &views).expect("equal row counts"))
    }

    /// New-head stage: everything frozen except the freshly added head,
    /// trained with cross-entropy on the new labels. The trunk is frozen, so
    /// features are computed once up front.
    pub fn train_new_head(
        &mut self,
        data: &LabeledSet,
        settings: &TrainSettings,
    ) -> Result<PhaseStats, TrainError> {
        let new_head = self.expect_new_head(data)?;
        let mut mask = vec![false; self.model.num_blocks()];
        mask[1 + new_head] = true;
        self.model.set_trainable(&mask)?;

        let features = self.model.features(&data.inputs)?;
        let phase_seed = derive_seed(settings.seed, SEED_NEW_HEAD_PHASE);
        run_phase(&mut self.model, data.len(), settings, phase_seed, |m, idx| {
            let f = features.select(Axis(0), idx);
            let y: Vec<usize> = idx.iter().map(|&r| data.labels[r]).collect();
            let logits = m.head_logits(&f, new_head)?;
            let loss = cross_entropy(&logits, &y)?;
            let dlogits = cross_entropy_grad(&logits, &y)?;
            let mut grads = Gradients::none(m);
            grads.heads[new_head] = Some(BlockGrad {
                dw: f.t().dot(&dlogits),
                db: dlogits.sum_axis(Axis(0)),
            });
            Ok((loss, grads))
        })
    }

    /// Shared-retraining stage: trunk and old heads are re-initialized
    /// (or kept, with `warm_start`) and trained against the recorded targets
    /// plus `lambda`-weighted cross-entropy through the frozen new head.
    pub fn retrain_shared(
        &mut self,
        data: &LabeledSet,
        record: &LogitRecord,
        hp: &Hyperparams,
        settings: &TrainSettings,
        warm_start: bool,
    ) -> Result<PhaseStats, TrainError> {
        let new_head = self.expect_new_head(data)?;
        self.check_record(record, data)?;
        let old_ids = self.old_head_ids();
        let old_dims = self.old_head_dims();

        if !warm_start {
            let init_seed = derive_seed(settings.seed, SEED_RETRAIN_INIT);
            self.model.reinit_blocks(true, &old_ids, init_seed)?;
        }
        let mut mask = vec![true; self.model.num_blocks()];
        mask[1 + new_head] = false;
        self.model.set_trainable(&mask)?;

        let p = hp.temperature;
        let lambda = hp.lambda;
        let phase_seed = derive_seed(settings.seed, SEED_RETRAIN_PHASE);
        run_phase(&mut self.model, data.len(), settings, phase_seed, |m, idx| {
            let x = data.inputs.select(Axis(0), idx);
            let y: Vec<usize> = idx.iter().map(|&r| data.labels[r]).collect();
            let h_rows = record.h.select(Axis(0), idx);
            let cache = m.forward_trunk(&x)?;
            let old_logits = concat_head_logits(m, cache.features(), &old_ids)?;
            let new_logits = m.head_logits(cache.features(), new_head)?;
            let loss = shared_retrain_loss(&h_rows, &old_logits, &y, &new_logits, hp)?;

            let d_old = kd_grad(&h_rows, &old_logits, p)?;
            let mut head_dlogits: Vec<(usize, Array2<f64>)> = old_ids
                .iter()
                .copied()
                .zip(split_columns(&d_old, &old_dims))
                .collect();
            let d_new = cross_entropy_grad(&new_logits, &y)?.mapv(|v| v * lambda);
            head_dlogits.push((new_head, d_new));
            let grads = m.backward(&cache, &head_dlogits, &[], None)?;
            Ok((loss, grads))
        })
    }

    /// Fine-tuning stage: old heads frozen, trunk and new head trained
    /// together; the distillation term reaches the trunk through the frozen
    /// old heads.
    pub fn finetune_shared(
        &mut self,
        data: &LabeledSet,
        record: &LogitRecord,
        hp: &Hyperparams,
        settings: &TrainSettings,
    ) -> Result<PhaseStats, TrainError> {
        let new_head = self.expect_new_head(data)?;
        self.check_record(record, data)?;
        let old_ids = self.old_head_ids();
        let old_dims = self.old_head_dims();

        let mut mask = vec![false; self.model.num_blocks()];
        mask[0] = true;
        mask[1 + new_head] = true;
        self.model.set_trainable(&mask)?;

        let p = hp.temperature;
        let omega = hp.omega;
        let phase_seed = derive_seed(settings.seed, SEED_FINETUNE_PHASE);
        run_phase(&mut self.model, data.len(), settings, phase_seed, |m, idx| {
            let x = data.inputs.select(Axis(0), idx);
            let y: Vec<usize> = idx.iter().map(|&r| data.labels[r]).collect();
            let h_rows = record.h.select(Axis(0), idx);
            let cache = m.forward_trunk(&x)?;
            let old_logits = concat_head_logits(m, cache.features(), &old_ids)?;
            let new_logits = m.head_logits(cache.features(), new_head)?;
            let loss = finetune_loss(&h_rows, &old_logits, &y, &new_logits, hp)?;

            let d_old = kd_grad(&h_rows, &old_logits, p)?;
            let mut head_dlogits: Vec<(usize, Array2<f64>)> = old_ids
                .iter()
                .copied()
                .zip(split_columns(&d_old, &old_dims))
                .collect();
            let d_new = cross_entropy_grad(&new_logits, &y)?.mapv(|v| v * omega);
            head_dlogits.push((new_head, d_new));
            let grads = m.backward(&cache, &head_dlogits, &[], None)?;
            Ok((loss, grads))
        })
    }

    /// Final stage: trunk, old heads and new head all train. One
    /// distillation term targets the recorded logits through the frozen head
    /// snapshots; the other targets the recomputed logits through the live
    /// old heads. Ends the task: bumps the task count and snapshots the new
    /// head.
    pub fn joint_distill(
        &mut self,
        data: &LabeledSet,
        record: &LogitRecord,
        hp: &Hyperparams,
        settings: &TrainSettings,
    ) -> Result<PhaseStats, TrainError> {
        let new_head = self.expect_new_head(data)?;
        self.check_record(record, data)?;
        let h_tilde = record
            .h_tilde
            .as_ref()
            .ok_or_else(|| TrainError::Procedure("recomputed targets missing".into()))?;
        if h_tilde.raw_dim() != record.h.raw_dim() {
            return Err(TrainError::Procedure("recomputed targets shape differs from recorded".into()));
        }
        let old_ids = self.old_head_ids();
        let old_dims = self.old_head_dims();
        let snapshots = self.frozen_head_snapshots.clone();

        self.model.set_trainable(&vec![true; self.model.num_blocks()])?;

        let p = hp.temperature;
        let stats = {
            let phase_seed = derive_seed(settings.seed, SEED_JOINT_PHASE);
            run_phase(&mut self.model, data.len(), settings, phase_seed, |m, idx| {
                let x = data.inputs.select(Axis(0), idx);
                let y: Vec<usize> = idx.iter().map(|&r| data.labels[r]).collect();
                let h_rows = record.h.select(Axis(0), idx);
                let ht_rows = h_tilde.select(Axis(0), idx);
                let cache = m.forward_trunk(&x)?;
                let feat = cache.features();

                let snap_parts: Vec<Array2<f64>> =
                    snapshots.iter().map(|s| s.forward(feat)).collect();
                let snap_views: Vec<_> = snap_parts.iter().map(|a| a.view()).collect();
                let snap_logits = concatenate(Axis(1), &snap_views).expect("equal rows");
                let old_logits = concat_head_logits(m, feat, &old_ids)?;
                let new_logits = m.head_logits(feat, new_head)?;
                let loss =
                    dual_distill_loss(&h_rows, &snap_logits, &ht_rows, &old_logits, &y, &new_logits, hp)?;

                let d_snap = kd_grad(&h_rows, &snap_logits, p)?.mapv(|v| v * hp.alpha);
                let external: Vec<(&Affine, Array2<f64>)> = snapshots
                    .iter()
                    .zip(split_columns(&d_snap, &old_dims))
                    .collect();
                let d_old = kd_grad(&ht_rows, &old_logits, p)?.mapv(|v| v * (1.0 - hp.alpha));
                let mut head_dlogits: Vec<(usize, Array2<f64>)> = old_ids
                    .iter()
                    .copied()
                    .zip(split_columns(&d_old, &old_dims))
                    .collect();
                let d_new = cross_entropy_grad(&new_logits, &y)?.mapv(|v| v * hp.beta);
                head_dlogits.push((new_head, d_new));
                let grads = m.backward(&cache, &head_dlogits, &external, None)?;
                Ok((loss, grads))
            })?
        };

        self.complete_task_bookkeeping(new_head)?;
        Ok(stats)
    }

    /// Ends a task transition: snapshots the new head at its trained value
    /// and bumps the task count.
    pub(crate) fn complete_task_bookkeeping(&mut self, new_head: usize) -> Result<(), TrainError> {
        self.frozen_head_snapshots.push(self.model.head_snapshot(new_head)?);
        self.task_count += 1;
        Ok(())
    }

    /// Full task transition: record targets, add a head, run the four
    /// training stages, recompute targets between the fine-tuning and the
    /// final stage. Deterministic given (state, data, hyperparams, settings).
    pub fn learn_task(
        &mut self,
        data: &LabeledSet,
        hp: &Hyperparams,
        settings: &TrainSettings,
        step3_warm_start: bool,
    ) -> Result<(), TrainError> {
        hp.validate()?;
        let mut record = self.record_soft_targets(&data.inputs)?;
        let head_seed = derive_seed(settings.seed, SEED_HEAD);
        self.model.add_head(data.num_classes, head_seed)?;
        self.train_new_head(data, settings)?;
        self.retrain_shared(data, &record, hp, settings, step3_warm_start)?;
        self.finetune_shared(data, &record, hp, settings)?;
        record.h_tilde = Some(self.recompute_soft_targets(&data.inputs)?);
        self.joint_distill(data, &record, hp, settings)?;
        Ok(())
    }

    /// Saves the live model under `dir` as `params_<tag>.bin`.
    pub fn save_snapshot(&self, dir: &std::path::Path, tag: SnapshotTag) -> Result<std::path::PathBuf, TrainError> {
        Ok(self.model.snapshot(tag).save(dir)?)
    }

    fn expect_new_head(&self, data: &LabeledSet) -> Result<usize, TrainError> {
        if self.model.num_heads() != self.task_count + 1 {
            return Err(TrainError::Procedure(format!(
                "expected {} heads (a new head for the incoming task), model has {}",
                self.task_count + 1,
                self.model.num_heads()
            )));
        }
        let new_head = self.task_count;
        if self.model.head_dim(new_head)? != data.num_classes {
            return Err(TrainError::Procedure(format!(
                "new head width {} does not match {} task classes",
                self.model.head_dim(new_head)?,
                data.num_classes
            )));
        }
        Ok(new_head)
    }

    fn check_record(&self, record: &LogitRecord, data: &LabeledSet) -> Result<(), TrainError> {
        if record.h.ncols() != self.total_old_classes() {
            return Err(TrainError::Procedure(format!(
                "recorded targets have {} columns, old heads cover {} classes",
                record.h.ncols(),
                self.total_old_classes()
            )));
        }
        if record.h.nrows() != data.len() {
            return Err(TrainError::Procedure(format!(
                "recorded targets have {} rows, task data has {}",
                record.h.nrows(),
                data.len()
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::{avg_accuracy, bwt, matrix_from_dense};
    use crate::model::{build_model, LayerSpec, ModelSpec};
    use crate::scenarios::{evaluate, gen_blobs, split_classes, BlobConfig, Mode};
    use ndarray::Array2;

    fn toy_spec(input_dim: usize, classes: usize) -> ModelSpec {
        ModelSpec {
            input_dim,
            trunk_layers: vec![LayerSpec::relu(32), LayerSpec::relu(32)],
            head_dims: vec![classes],
        }
    }

    fn toy_settings(seed: u64) -> TrainSettings {
        TrainSettings { lr: 0.05, momentum: 0.9, batch_size: 16, epochs: 20, seed, ..Default::default() }
    }

    fn two_task_stream(seed: u64) -> crate::scenarios::TaskStream {
        let cfg = BlobConfig {
            classes: 4,
            dim: 8,
            train_per_class: 60,
            test_per_class: 40,
            center_scale: 1.0,
            noise_std: 0.4,
        };
        let data = gen_blobs(&cfg, seed).unwrap();
        split_classes(&data, 2, Mode::TaskIl, seed).unwrap()
    }

    #[test]
    fn first_task_fits_separable_blobs() {
        let stream = two_task_stream(1);
        let task = &stream.tasks[0];
        let model = build_model(&toy_spec(8, 2), 3).unwrap();
        let state = NflState::train_first_task(model, &task.train, &toy_settings(3)).unwrap();
        assert_eq!(state.task_count(), 1);
        assert_eq!(state.frozen_head_snapshots().len(), 1);
        let row = evaluate(&state.model, &stream, Mode::TaskIl).unwrap();
        assert!(row[0] >= 0.95, "train-side separable task reached only {}", row[0]);
    }

    #[test]
    fn zero_epochs_first_task_is_identity() {
        let stream = two_task_stream(2);
        let model = build_model(&toy_spec(8, 2), 4).unwrap();
        let before: Vec<u64> = (0..2).flat_map(|b| model.block_bits(b)).collect();
        let settings = TrainSettings { epochs: 0, ..toy_settings(4) };
        let state = NflState::train_first_task(model, &stream.tasks[0].train, &settings).unwrap();
        let after: Vec<u64> = (0..2).flat_map(|b| state.model.block_bits(b)).collect();
        assert_eq!(before, after);
    }

    #[test]
    fn first_task_is_deterministic() {
        let stream = two_task_stream(5);
        let run = || {
            let model = build_model(&toy_spec(8, 2), 9).unwrap();
            let st = NflState::train_first_task(model, &stream.tasks[0].train, &toy_settings(9)).unwrap();
            (0..2).flat_map(|b| st.model.block_bits(b)).collect::<Vec<u64>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn record_soft_targets_shape_and_purity() {
        let stream = two_task_stream(6);
        let model = build_model(&toy_spec(8, 2), 11).unwrap();
        let state =
            NflState::train_first_task(model, &stream.tasks[0].train, &toy_settings(11)).unwrap();
        let x = &stream.tasks[1].train.inputs;
        let rec1 = state.record_soft_targets(x).unwrap();
        let rec2 = state.record_soft_targets(x).unwrap();
        assert_eq!(rec1.h.nrows(), x.nrows());
        assert_eq!(rec1.h.ncols(), 2);
        assert_eq!(
            rec1.h.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            rec2.h.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn record_on_zero_model_gives_zero_targets() {
        let stream = two_task_stream(7);
        let mut model = build_model(&toy_spec(8, 2), 12).unwrap();
        let zero = model.snapshot(SnapshotTag::Random);
        let mut zeroed = zero.clone();
        for a in zeroed.trunk.iter_mut().chain(zeroed.heads.iter_mut()) {
            a.w.fill(0.0);
            a.b.fill(0.0);
        }
        model.restore(&zeroed).unwrap();
        let settings = TrainSettings { epochs: 0, ..toy_settings(0) };
        let state = NflState::train_first_task(model, &stream.tasks[0].train, &settings).unwrap();
        let rec = state.record_soft_targets(&stream.tasks[1].train.inputs).unwrap();
        assert!(rec.h.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn new_head_stage_freezes_trunk_and_old_heads() {
        let stream = two_task_stream(8);
        let model = build_model(&toy_spec(8, 2), 13).unwrap();
        let mut state =
            NflState::train_first_task(model, &stream.tasks[0].train, &toy_settings(13)).unwrap();
        state.model.add_head(2, 77).unwrap();
        let trunk_before = state.model.block_bits(0);
        let head0_before = state.model.block_bits(1);
        state.train_new_head(&stream.tasks[1].train, &toy_settings(13)).unwrap();
        assert_eq!(state.model.block_bits(0), trunk_before);
        assert_eq!(state.model.block_bits(1), head0_before);

        // the new head fits its separable task through frozen features
        let acc = crate::scenarios::task_il_accuracy(&state.model, &stream.tasks[1], 1).unwrap();
        assert!(acc >= 0.9, "new-head accuracy {acc}");
    }

    #[test]
    fn retrain_stage_freezes_new_head_and_reinitializes_shared() {
        let stream = two_task_stream(9);
        let model = build_model(&toy_spec(8, 2), 14).unwrap();
        let mut state =
            NflState::train_first_task(model, &stream.tasks[0].train, &toy_settings(14)).unwrap();
        let data = &stream.tasks[1].train;
        let record = state.record_soft_targets(&data.inputs).unwrap();
        state.model.add_head(2, 78).unwrap();
        state.train_new_head(data, &toy_settings(14)).unwrap();

        let trunk_before = state.model.block_bits(0);
        let new_head_before = state.model.block_bits(2);
        let stats = state
            .retrain_shared(data, &record, &Hyperparams::default(), &toy_settings(14), false)
            .unwrap();
        assert_eq!(state.model.block_bits(2), new_head_before);
        assert_ne!(state.model.block_bits(0), trunk_before);
        // best-so-far objective does not exceed the first epoch's value
        assert!(stats.best_loss <= stats.epoch_losses[0] + 1e-12);
    }

    #[test]
    fn finetune_stage_freezes_old_heads() {
        let stream = two_task_stream(10);
        let model = build_model(&toy_spec(8, 2), 15).unwrap();
        let mut state =
            NflState::train_first_task(model, &stream.tasks[0].train, &toy_settings(15)).unwrap();
        let data = &stream.tasks[1].train;
        let record = state.record_soft_targets(&data.inputs).unwrap();
        state.model.add_head(2, 79).unwrap();
        state.train_new_head(data, &toy_settings(15)).unwrap();
        state.retrain_shared(data, &record, &Hyperparams::default(), &toy_settings(15), false).unwrap();

        let old_head_before = state.model.block_bits(1);
        let new_head_before = state.model.block_bits(2);
        state.finetune_shared(data, &record, &Hyperparams::default(), &toy_settings(15)).unwrap();
        assert_eq!(state.model.block_bits(1), old_head_before);
        assert_ne!(state.model.block_bits(2), new_head_before);
    }

    #[test]
    fn recompute_equals_record_while_nothing_changed() {
        let stream = two_task_stream(11);
        let model = build_model(&toy_spec(8, 2), 16).unwrap();
        let state =
            NflState::train_first_task(model, &stream.tasks[0].train, &toy_settings(16)).unwrap();
        let x = &stream.tasks[1].train.inputs;
        let rec = state.record_soft_targets(x).unwrap();
        let h_tilde = state.recompute_soft_targets(x).unwrap();
        assert_eq!(rec.h.raw_dim(), h_tilde.raw_dim());
        assert_eq!(
            rec.h.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            h_tilde.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn joint_stage_keeps_snapshots_frozen_and_bumps_bookkeeping() {
        let stream = two_task_stream(12);
        let model = build_model(&toy_spec(8, 2), 17).unwrap();
        let mut state =
            NflState::train_first_task(model, &stream.tasks[0].train, &toy_settings(17)).unwrap();
        let data = &stream.tasks[1].train;
        let mut record = state.record_soft_targets(&data.inputs).unwrap();
        state.model.add_head(2, 80).unwrap();
        state.train_new_head(data, &toy_settings(17)).unwrap();
        state.retrain_shared(data, &record, &Hyperparams::default(), &toy_settings(17), false).unwrap();
        state.finetune_shared(data, &record, &Hyperparams::default(), &toy_settings(17)).unwrap();
        record.h_tilde = Some(state.recompute_soft_targets(&data.inputs).unwrap());

        let snap_bits: Vec<u64> = state.frozen_head_snapshots()[0]
            .w
            .iter()
            .chain(state.frozen_head_snapshots()[0].b.iter())
            .map(|v| v.to_bits())
            .collect();
        state.joint_distill(data, &record, &Hyperparams::default(), &toy_settings(17)).unwrap();
        let snap_after: Vec<u64> = state.frozen_head_snapshots()[0]
            .w
            .iter()
            .chain(state.frozen_head_snapshots()[0].b.iter())
            .map(|v| v.to_bits())
            .collect();
        assert_eq!(snap_bits, snap_after);
        assert_eq!(state.task_count(), 2);
        assert_eq!(state.frozen_head_snapshots().len(), 2);
    }

    #[test]
    fn joint_stage_reduces_drift_from_recorded_targets() {
        // distillation-only configuration: the old-task logits on a fixed
        // probe batch move toward the recorded targets
        let stream = two_task_stream(13);
        let model = build_model(&toy_spec(8, 2), 18).unwrap();
        let mut state =
            NflState::train_first_task(model, &stream.tasks[0].train, &toy_settings(18)).unwrap();
        let data = &stream.tasks[1].train;
        let mut record = state.record_soft_targets(&data.inputs).unwrap();
        state.model.add_head(2, 81).unwrap();
        state.train_new_head(data, &toy_settings(18)).unwrap();
        let hp = Hyperparams::default();
        state.retrain_shared(data, &record, &hp, &toy_settings(18), false).unwrap();
        state.finetune_shared(data, &record, &hp, &toy_settings(18)).unwrap();
        record.h_tilde = Some(state.recompute_soft_targets(&data.inputs).unwrap());

        let drift = |st: &NflState| {
            let feats = st.model.features(&data.inputs).unwrap();
            let out = st.frozen_head_snapshots()[0].forward(&feats);
            (&out - &record.h).mapv(f64::abs).mean().unwrap()
        };
        let before = drift(&state);
        let hp_kd_only = Hyperparams { alpha: 1.0, beta: 0.0, ..hp };
        state.joint_distill(data, &record, &hp_kd_only, &toy_settings(18)).unwrap();
        let after = drift(&state);
        assert!(after <= before, "drift grew from {before} to {after}");
    }

    #[test]
    fn learn_task_two_blob_tasks_reaches_golden_bounds() {
        let stream = two_task_stream(21);
        let model = build_model(&toy_spec(8, 2), 22).unwrap();
        let mut state =
            NflState::train_first_task(model, &stream.tasks[0].train, &toy_settings(22)).unwrap();
        let mut dense = Array2::zeros((2, 2));
        let row = evaluate(&state.model, &stream, Mode::TaskIl).unwrap();
        dense[[0, 0]] = row[0];
        dense[[0, 1]] = 0.5; // probe placeholder; BWT/ACC ignore it
        state
            .learn_task(&stream.tasks[1].train, &Hyperparams::default(), &toy_settings(22), false)
            .unwrap();
        let row = evaluate(&state.model, &stream, Mode::TaskIl).unwrap();
        dense[[1, 0]] = row[0];
        dense[[1, 1]] = row[1];
        let m = matrix_from_dense(&dense);
        let acc = avg_accuracy(&m).unwrap();
        let b = bwt(&m).unwrap();
        assert!(acc >= 0.9, "ACC {acc}");
        assert!(b >= -0.1, "BWT {b}");
    }

    #[test]
    fn learn_task_is_deterministic_and_counts_heads() {
        let stream = two_task_stream(23);
        let run = || {
            let model = build_model(&toy_spec(8, 2), 24).unwrap();
            let mut state =
                NflState::train_first_task(model, &stream.tasks[0].train, &toy_settings(24)).unwrap();
            state
                .learn_task(&stream.tasks[1].train, &Hyperparams::default(), &toy_settings(24), false)
                .unwrap();
            state
        };
        let a = run();
        let b = run();
        assert_eq!(a.model.num_heads(), 2);
        for blk in 0..a.model.num_blocks() {
            assert_eq!(a.model.block_bits(blk), b.model.block_bits(blk));
        }
        let ra = evaluate(&a.model, &stream, Mode::TaskIl).unwrap();
        let rb = evaluate(&b.model, &stream, Mode::TaskIl).unwrap();
        assert_eq!(ra, rb);
    }

    #[test]
    fn stages_reject_contract_violations() {
        let stream = two_task_stream(25);
        let model = build_model(&toy_spec(8, 2), 26).unwrap();
        let mut state =
            NflState::train_first_task(model, &stream.tasks[0].train, &toy_settings(26)).unwrap();
        // stage needs the new head added first
        assert!(matches!(
            state.train_new_head(&stream.tasks[1].train, &toy_settings(26)),
            Err(TrainError::Procedure(_))
        ));
        // mismatched record shape
        state.model.add_head(2, 1).unwrap();
        let bad = LogitRecord::new(Array2::zeros((3, 5))).unwrap();
        assert!(matches!(
            state.retrain_shared(&stream.tasks[1].train, &bad, &Hyperparams::default(), &toy_settings(26), false),
            Err(TrainError::Procedure(_))
        ));
    }
}
