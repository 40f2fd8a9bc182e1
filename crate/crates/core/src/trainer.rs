//! Mini-batch training with Adam and a step learning-rate schedule,
//! per-epoch checkpoints, resumption and top-1 evaluation.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datamodel::{DataError, Dataset, SplitSpec};
use crate::losses::{total_loss, AlignAudioTo, LossBreakdown, LossConfig};
use crate::model::{
    argmax_rows, forward, init_params, read_checkpoint, write_checkpoint, Batch, BatchNeeds,
    Checkpoint, ForwardMode, LayerOrder, ModelConfig, ModelError, ModelParams, Streams,
};
use crate::numerics::{adam_step, AdamState, NumericsError, Tape};

pub const CHECKPOINT_FILE: &str = "last.ckpt";
pub const METRICS_FILE: &str = "metrics.jsonl";
const EVAL_CHUNK: usize = 1024;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("non-finite loss at epoch {epoch}, batch {batch}; last good checkpoint kept")]
    NonFinite { epoch: usize, batch: usize },
    #[error("{path}: {msg}")]
    Io { path: PathBuf, msg: String },
    #[error("checkpoint does not match this run: {0}")]
    Resume(String),
}

/// Which streams and training signals are active.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModeFlags {
    pub use_appearance: bool,
    pub use_motion: bool,
    pub use_audio: bool,
    pub fuse_early_ap_mo: bool,
    pub use_alignment: bool,
    pub align_audio_to: AlignAudioTo,
    pub use_consistency_weighting: bool,
}

impl Default for ModeFlags {
    fn default() -> Self {
        Self {
            use_appearance: true,
            use_motion: true,
            use_audio: true,
            fuse_early_ap_mo: false,
            use_alignment: true,
            align_audio_to: AlignAudioTo::AudioNarration,
            use_consistency_weighting: true,
        }
    }
}

impl ModeFlags {
    /// All three streams, no alignment, no weighting.
    pub fn baseline() -> Self {
        Self {
            use_alignment: false,
            use_consistency_weighting: false,
            ..Self::default()
        }
    }

    /// A single stream with no auxiliary signals.
    pub fn single(appearance: bool, motion: bool, audio: bool) -> Self {
        Self {
            use_appearance: appearance,
            use_motion: motion,
            use_audio: audio,
            ..Self::baseline()
        }
    }

    pub fn streams(&self) -> Streams {
        Streams {
            appearance: self.use_appearance,
            motion: self.use_motion,
            audio: self.use_audio,
            early_ap_mo: self.fuse_early_ap_mo,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f64,
    pub lr_decay_epochs: Vec<usize>,
    pub lr_decay_factor: f64,
    pub lambda: f64,
    pub mode: ModeFlags,
    pub seed: u64,
    pub out_dim: usize,
    pub layer_order: LayerOrder,
    /// Held-in fraction of the training clips used for per-epoch validation.
    pub validation_fraction: f64,
    pub checkpoint_dir: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 128,
            epochs: 50,
            lr: 2e-4,
            lr_decay_epochs: vec![30, 40],
            lr_decay_factor: 10.0,
            lambda: 0.1,
            mode: ModeFlags::default(),
            seed: 0,
            out_dim: 256,
            layer_order: LayerOrder::ReluThenBn,
            validation_fraction: 0.0,
            checkpoint_dir: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let err = |m: String| Err(TrainError::Config(m));
        if self.batch_size < 2 {
            return err(format!("batch_size must be >= 2, got {}", self.batch_size));
        }
        if self.epochs == 0 {
            return err("epochs must be >= 1".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return err(format!("lr must be positive, got {}", self.lr));
        }
        if !(self.lr_decay_factor >= 1.0 && self.lr_decay_factor.is_finite()) {
            return err(format!(
                "lr_decay_factor must be >= 1, got {}",
                self.lr_decay_factor
            ));
        }
        if self.lr_decay_epochs.windows(2).any(|w| w[0] >= w[1]) {
            return err(format!(
                "lr_decay_epochs must be strictly increasing, got {:?}",
                self.lr_decay_epochs
            ));
        }
        if let Some(&last) = self.lr_decay_epochs.last() {
            if last >= self.epochs {
                return err(format!(
                    "decay epoch {last} is not below epochs = {}",
                    self.epochs
                ));
            }
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return err(format!("lambda must be >= 0, got {}", self.lambda));
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return err(format!(
                "validation_fraction must lie in [0, 1), got {}",
                self.validation_fraction
            ));
        }
        let m = self.mode;
        if m.use_consistency_weighting && !m.use_audio {
            return err("consistency weighting needs the audio stream".into());
        }
        self.model_config(crate::datamodel::Dims::default(), 2)
            .validate()
            .map_err(|e| TrainError::Config(e.to_string()))
    }

    pub fn model_config(&self, dims: crate::datamodel::Dims, num_classes: usize) -> ModelConfig {
        ModelConfig {
            dims,
            num_classes,
            out_dim: self.out_dim,
            layer_order: self.layer_order,
            streams: self.mode.streams(),
        }
    }

    fn loss_config(&self) -> LossConfig {
        LossConfig {
            lambda: self.lambda,
            alignment: self.mode.use_alignment,
            align_audio_to: self.mode.align_audio_to,
        }
    }

    fn batch_needs(&self) -> BatchNeeds {
        let m = self.mode;
        BatchNeeds {
            streams: m.streams(),
            vis_narration: m.use_alignment,
            aud_narration: m.use_alignment
                && m.use_audio
                && m.align_audio_to == AlignAudioTo::AudioNarration,
            consistency: m.use_consistency_weighting && m.use_audio,
        }
    }
}

/// Learning rate for `epoch`: the base rate divided by the decay factor once
/// for every decay epoch already reached.
pub fn lr_at(epoch: usize, cfg: &TrainConfig) -> f64 {
    let k = cfg.lr_decay_epochs.iter().filter(|&&e| e <= epoch).count();
    cfg.lr / cfg.lr_decay_factor.powi(k as i32)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr: f64,
    #[serde(rename = "L_c")]
    pub l_c: f64,
    #[serde(rename = "L_align")]
    pub l_align: f64,
    pub total: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub val_top1: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub params: ModelParams<f32>,
    pub adam: AdamState<f32>,
    /// Epochs completed.
    pub epoch: usize,
    pub history: Vec<EpochMetrics>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct StateExtra {
    split: String,
    adam_step: u64,
    train_config: TrainConfig,
    history: Vec<EpochMetrics>,
}

impl TrainState {
    pub fn fresh(cfg: &TrainConfig, dataset: &Dataset) -> Result<Self, TrainError> {
        let model = cfg.model_config(dataset.manifest.dims, dataset.manifest.num_classes);
        let params = init_params::<f32>(&model, cfg.seed)?;
        let sizes: Vec<usize> = params
            .named_trainable()
            .iter()
            .map(|(_, t)| t.len())
            .collect();
        Ok(Self {
            params,
            adam: AdamState::new(&sizes),
            epoch: 0,
            history: Vec::new(),
        })
    }

    pub fn to_checkpoint(&self, cfg: &TrainConfig, split: &str, dataset_hash: &str) -> Checkpoint {
        let mut ck = Checkpoint::from_params(&self.params, self.epoch, cfg.seed, dataset_hash);
        let names: Vec<(String, Vec<usize>)> = self
            .params
            .named_trainable()
            .into_iter()
            .map(|(n, t)| (n, t.shape().to_vec()))
            .collect();
        for ((name, shape), m) in names.iter().zip(self.adam.first_moments()) {
            ck.push(format!("adam.m.{name}"), shape.clone(), m.clone());
        }
        for ((name, shape), v) in names.iter().zip(self.adam.second_moments()) {
            ck.push(format!("adam.v.{name}"), shape.clone(), v.clone());
        }
        let extra = StateExtra {
            split: split.to_string(),
            adam_step: self.adam.step(),
            // Where the file lives is not part of the run.
            train_config: TrainConfig {
                checkpoint_dir: None,
                ..cfg.clone()
            },
            history: self.history.clone(),
        };
        ck.header.extra = serde_json::to_value(extra).expect("serializable state");
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self, TrainError> {
        let params = ck.to_params()?;
        let extra: StateExtra = serde_json::from_value(ck.header.extra.clone())
            .map_err(|e| TrainError::Resume(format!("checkpoint lacks training state: {e}")))?;
        let mut first = Vec::new();
        let mut second = Vec::new();
        for (name, _) in params.named_trainable() {
            let get = |prefix: &str| {
                ck.get(&format!("{prefix}.{name}"))
                    .map(|(_, d)| d.to_vec())
                    .ok_or_else(|| {
                        TrainError::Resume(format!("missing optimizer moment for {name}"))
                    })
            };
            first.push(get("adam.m")?);
            second.push(get("adam.v")?);
        }
        Ok(Self {
            adam: AdamState::from_parts(extra.adam_step, first, second)?,
            params,
            epoch: ck.header.epoch,
            history: extra.history,
        })
    }
}

/// Reads a checkpoint written by [`train`] and returns its state, its
/// training config and the split it was trained on.
pub fn load_state(path: &Path) -> Result<(TrainState, TrainConfig, String, String), TrainError> {
    let ck = read_checkpoint(path)?;
    let extra: StateExtra = serde_json::from_value(ck.header.extra.clone())
        .map_err(|e| TrainError::Resume(format!("checkpoint lacks training state: {e}")))?;
    let state = TrainState::from_checkpoint(&ck)?;
    Ok((
        state,
        extra.train_config,
        extra.split,
        ck.header.dataset_hash,
    ))
}

fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64 + 1);
    rng
}

/// Splits the usable training clips into (train, validation).
fn training_indices(
    dataset: &Dataset,
    split: &SplitSpec,
    cfg: &TrainConfig,
) -> Result<(Vec<usize>, Vec<usize>), TrainError> {
    let mut idx = dataset.indices(&split.train_ids)?;
    if cfg.mode.use_audio {
        idx.retain(|&i| dataset.records[i].has_audio());
    }
    if cfg.batch_needs().consistency {
        if let Some(&i) = idx
            .iter()
            .find(|&&i| dataset.records[i].consistency.is_none())
        {
            return Err(TrainError::Config(format!(
                "consistency weighting is on but clip {} has no rating",
                dataset.records[i].clip_id
            )));
        }
    }
    let mut val = Vec::new();
    if cfg.validation_fraction > 0.0 {
        let n_val = (idx.len() as f64 * cfg.validation_fraction).round() as usize;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut order = idx.clone();
        order.shuffle(&mut rng);
        val = order[..n_val].to_vec();
        val.sort_unstable();
        idx.retain(|i| val.binary_search(i).is_err());
    }
    if idx.len() < 2 {
        return Err(TrainError::Config(format!(
            "split {} leaves {} usable training clips; at least 2 are needed",
            split.name(),
            idx.len()
        )));
    }
    Ok((idx, val))
}

/// One optimizer step on the given clips. Returns the loss breakdown.
fn train_step(
    state: &mut TrainState,
    dataset: &Dataset,
    batch_idx: &[usize],
    cfg: &TrainConfig,
    lr: f64,
) -> Result<LossBreakdown, TrainError> {
    let needs = cfg.batch_needs();
    let batch = Batch::<f32>::gather(dataset, batch_idx, needs)?;
    let mut tape = Tape::new();
    let vars = state.params.register(&mut tape, true);
    let mode = ForwardMode::Train {
        weight_audio: needs.consistency,
        vis_narration: needs.vis_narration,
        aud_narration: needs.aud_narration,
    };
    let out = forward(&mut tape, &state.params, &vars, &batch, mode)?;
    let (loss, breakdown) = total_loss(
        &mut tape,
        &out,
        &batch.labels,
        vars.log_tau,
        &cfg.loss_config(),
    )?;
    if !breakdown.is_finite() {
        return Err(TrainError::NonFinite { epoch: 0, batch: 0 });
    }
    tape.backward(loss)?;
    state.params.pull_grads(&tape, &vars)?;
    let mut slots = state.params.named_trainable_mut();
    adam_step(&mut slots, &mut state.adam, lr as f32)?;
    drop(slots);
    state.params.clamp_temperature();
    state.params.update_running_stats(&out.bn_updates);
    Ok(breakdown)
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> TrainError + '_ {
    move |e| TrainError::Io {
        path: path.to_path_buf(),
        msg: e.to_string(),
    }
}

fn write_metrics(path: &Path, history: &[EpochMetrics]) -> Result<(), TrainError> {
    let mut buf = Vec::new();
    for m in history {
        serde_json::to_writer(&mut buf, m).expect("serializable metrics");
        buf.push(b'\n');
    }
    let mut f = fs::File::create(path).map_err(io_err(path))?;
    f.write_all(&buf).map_err(io_err(path))
}

/// Trains on `split.train_ids` from scratch, or continues `resume` until
/// `cfg.epochs` epochs are complete.
///
/// With a checkpoint directory, the full state and the metrics log are
/// rewritten after every completed epoch.
pub fn train(
    dataset: &Dataset,
    split: &SplitSpec,
    cfg: &TrainConfig,
    resume: Option<TrainState>,
) -> Result<TrainState, TrainError> {
    cfg.validate()?;
    let (train_idx, val_idx) = training_indices(dataset, split, cfg)?;
    let mut state = match resume {
        Some(s) => {
            let want = cfg.model_config(dataset.manifest.dims, dataset.manifest.num_classes);
            if s.params.config != want {
                return Err(TrainError::Resume(format!(
                    "model config {:?} differs from {:?}",
                    s.params.config, want
                )));
            }
            s
        }
        None => TrainState::fresh(cfg, dataset)?,
    };
    let hash = dataset.content_hash();
    if let Some(dir) = &cfg.checkpoint_dir {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }

    while state.epoch < cfg.epochs {
        let epoch = state.epoch;
        let lr = lr_at(epoch, cfg);
        let mut order = train_idx.clone();
        order.shuffle(&mut epoch_rng(cfg.seed, epoch));
        let mut sums = [0.0f64; 3];
        let mut batches = 0usize;
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            if chunk.len() < 2 {
                continue;
            }
            let br = match train_step(&mut state, dataset, chunk, cfg, lr) {
                Err(TrainError::NonFinite { .. }) => {
                    return Err(TrainError::NonFinite { epoch, batch: b })
                }
                Err(TrainError::Numerics(NumericsError::NonFinite(_)))
                | Err(TrainError::Model(ModelError::Numerics(NumericsError::NonFinite(_)))) => {
                    return Err(TrainError::NonFinite { epoch, batch: b })
                }
                other => other?,
            };
            sums[0] += br.l_c;
            sums[1] += br.l_align;
            sums[2] += br.total;
            batches += 1;
        }
        let n = batches.max(1) as f64;
        let val_top1 = if val_idx.is_empty() {
            None
        } else {
            Some(evaluate_indices(&state.params, dataset, &val_idx)?.top1)
        };
        state.history.push(EpochMetrics {
            epoch,
            lr,
            l_c: sums[0] / n,
            l_align: sums[1] / n,
            total: sums[2] / n,
            val_top1,
        });
        state.epoch += 1;
        log::info!(
            "split {} epoch {epoch}: total {:.4} (L_c {:.4})",
            split.name(),
            sums[2] / n,
            sums[0] / n
        );
        if let Some(dir) = &cfg.checkpoint_dir {
            let ck = state.to_checkpoint(cfg, &split.name(), &hash);
            write_checkpoint(&dir.join(CHECKPOINT_FILE), &ck)?;
            write_metrics(&dir.join(METRICS_FILE), &state.history)?;
        }
    }
    Ok(state)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub clip_id: String,
    pub predicted: usize,
    pub label: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub predictions: Vec<Prediction>,
    /// Fraction in [0, 1].
    pub top1: f64,
}

/// Eval-mode predictions for `test_ids`.
pub fn evaluate(
    params: &ModelParams<f32>,
    dataset: &Dataset,
    test_ids: &[String],
) -> Result<Evaluation, TrainError> {
    let idx = dataset.indices(test_ids)?;
    evaluate_indices(params, dataset, &idx)
}

pub fn evaluate_indices(
    params: &ModelParams<f32>,
    dataset: &Dataset,
    idx: &[usize],
) -> Result<Evaluation, TrainError> {
    if idx.is_empty() {
        return Err(TrainError::Config(
            "cannot evaluate an empty test set".into(),
        ));
    }
    let needs = BatchNeeds {
        streams: params.config.streams,
        ..BatchNeeds::default()
    };
    let mut predictions = Vec::with_capacity(idx.len());
    for chunk in idx.chunks(EVAL_CHUNK) {
        let batch = Batch::<f32>::gather(dataset, chunk, needs)?;
        let mut tape = Tape::new();
        let vars = params.register(&mut tape, false);
        let out = forward(&mut tape, params, &vars, &batch, ForwardMode::Eval)?;
        let preds = argmax_rows(tape.value(out.logits));
        for ((&i, p), &label) in chunk.iter().zip(preds).zip(&batch.labels) {
            predictions.push(Prediction {
                clip_id: dataset.records[i].clip_id.clone(),
                predicted: p,
                label,
            });
        }
    }
    let correct = predictions
        .iter()
        .filter(|p| p.predicted == p.label)
        .count();
    Ok(Evaluation {
        top1: correct as f64 / predictions.len() as f64,
        predictions,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_steps_down_by_factor() {
        let cfg = TrainConfig::default();
        assert_eq!(lr_at(0, &cfg), 2e-4);
        assert_eq!(lr_at(29, &cfg), 2e-4);
        assert_eq!(lr_at(30, &cfg), 2e-5);
        assert_eq!(lr_at(40, &cfg), 2e-6);
    }

    #[test]
    fn config_rejects_bad_decay_epochs() {
        let cfg = TrainConfig {
            epochs: 10,
            ..TrainConfig::default()
        };
        assert!(cfg.validate().is_err());
        let cfg = TrainConfig {
            lr_decay_epochs: vec![4, 4],
            epochs: 10,
            ..TrainConfig::default()
        };
        assert!(cfg.validate().is_err());
        let cfg = TrainConfig {
            batch_size: 1,
            ..TrainConfig::default()
        };
        assert!(cfg.validate().is_err());
    }
}
