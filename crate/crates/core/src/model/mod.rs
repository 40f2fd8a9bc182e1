//! Per-modality encoders, consistency-weighted fusion, the linear classifier
//! and the learnable alignment temperature.

mod checkpoint;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datamodel::{Dataset, Dims};
use crate::numerics::{
    BnBatchStats, BnMode, BnRunningStats, NumericsError, Scalar, Tape, Tensor, Var, BN_MOMENTUM,
};

pub use checkpoint::{
    read_checkpoint, write_checkpoint, Checkpoint, CheckpointHeader, TensorEntry,
};

pub const TAU_MIN: f64 = 0.01;
pub const TAU_MAX: f64 = 1.0;
pub const TAU_INIT: f64 = 0.07;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("model configuration error: {0}")]
    Config(String),
    #[error("invalid input: {0}")]
    Input(String),
    #[error("checkpoint {path}: {msg}")]
    Checkpoint { path: String, msg: String },
}

/// Position of BatchNorm relative to the ReLU inside each encoder layer.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerOrder {
    /// Linear → ReLU → BatchNorm.
    #[default]
    ReluThenBn,
    /// Linear → BatchNorm → ReLU.
    BnThenRelu,
}

/// Which visual/audio streams feed the classifier.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Streams {
    pub appearance: bool,
    pub motion: bool,
    pub audio: bool,
    /// Concatenate raw appearance and motion into a single encoder.
    pub early_ap_mo: bool,
}

impl Default for Streams {
    fn default() -> Self {
        Self {
            appearance: true,
            motion: true,
            audio: true,
            early_ap_mo: false,
        }
    }
}

impl Streams {
    pub fn validate(&self) -> Result<(), ModelError> {
        if !(self.appearance || self.motion || self.audio) {
            return Err(ModelError::Config(
                "at least one modality must be enabled".into(),
            ));
        }
        if self.early_ap_mo && !(self.appearance && self.motion) {
            return Err(ModelError::Config(
                "early appearance-motion fusion needs both appearance and motion".into(),
            ));
        }
        Ok(())
    }

    /// Number of encoded streams concatenated before the classifier.
    pub fn fused_count(&self) -> usize {
        let visual = match (self.appearance, self.motion, self.early_ap_mo) {
            (true, true, true) => 1,
            (a, m, _) => a as usize + m as usize,
        };
        visual + self.audio as usize
    }

    /// Short label such as `"Ap, Mo, Au"` or `"Ap-Mo"`.
    pub fn label(&self) -> String {
        let mut parts = Vec::new();
        if self.early_ap_mo {
            parts.push("Ap-Mo".to_string());
        } else {
            if self.appearance {
                parts.push("Ap".into());
            }
            if self.motion {
                parts.push("Mo".into());
            }
        }
        if self.audio {
            parts.push("Au".into());
        }
        parts.join(", ")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub dims: Dims,
    pub num_classes: usize,
    /// Encoder output width, shared by every encoder; also the hidden width.
    pub out_dim: usize,
    pub layer_order: LayerOrder,
    pub streams: Streams,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        self.streams.validate()?;
        if self.out_dim == 0 || self.num_classes < 2 {
            return Err(ModelError::Config(format!(
                "out_dim must be >= 1 and num_classes >= 2, got {} and {}",
                self.out_dim, self.num_classes
            )));
        }
        Ok(())
    }
}

/// Two fully connected layers, each with a ReLU and a BatchNorm.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams<T> {
    pub w1: Tensor<T>,
    pub b1: Tensor<T>,
    pub gamma1: Tensor<T>,
    pub beta1: Tensor<T>,
    pub stats1: BnRunningStats<T>,
    pub w2: Tensor<T>,
    pub b2: Tensor<T>,
    pub gamma2: Tensor<T>,
    pub beta2: Tensor<T>,
    pub stats2: BnRunningStats<T>,
}

fn he_uniform<T: Scalar>(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> Tensor<T> {
    let bound = (6.0 / fan_in as f64).sqrt();
    let data = (0..fan_in * fan_out)
        .map(|_| T::lit(rng.random_range(-bound..bound)))
        .collect();
    Tensor::matrix(fan_in, fan_out, data).expect("consistent shape")
}

impl<T: Scalar> EncoderParams<T> {
    pub fn init(rng: &mut ChaCha8Rng, d_in: usize, hidden: usize, d_out: usize) -> Self {
        Self {
            w1: he_uniform(rng, d_in, hidden),
            b1: Tensor::zeros(&[hidden]),
            gamma1: Tensor::full(&[hidden], T::one()),
            beta1: Tensor::zeros(&[hidden]),
            stats1: BnRunningStats::new(hidden),
            w2: he_uniform(rng, hidden, d_out),
            b2: Tensor::zeros(&[d_out]),
            gamma2: Tensor::full(&[d_out], T::one()),
            beta2: Tensor::zeros(&[d_out]),
            stats2: BnRunningStats::new(d_out),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.w1.rows()
    }

    fn trainable(&self) -> [&Tensor<T>; 8] {
        [
            &self.w1,
            &self.b1,
            &self.gamma1,
            &self.beta1,
            &self.w2,
            &self.b2,
            &self.gamma2,
            &self.beta2,
        ]
    }

    fn trainable_mut(&mut self) -> [&mut Tensor<T>; 8] {
        [
            &mut self.w1,
            &mut self.b1,
            &mut self.gamma1,
            &mut self.beta1,
            &mut self.w2,
            &mut self.b2,
            &mut self.gamma2,
            &mut self.beta2,
        ]
    }

    fn cast<U: Scalar>(&self) -> EncoderParams<U> {
        let stats = |s: &BnRunningStats<T>| BnRunningStats {
            mean: s.mean.iter().map(|v| U::lit(v.as_f64())).collect(),
            var: s.var.iter().map(|v| U::lit(v.as_f64())).collect(),
        };
        EncoderParams {
            w1: self.w1.cast(),
            b1: self.b1.cast(),
            gamma1: self.gamma1.cast(),
            beta1: self.beta1.cast(),
            stats1: stats(&self.stats1),
            w2: self.w2.cast(),
            b2: self.b2.cast(),
            gamma2: self.gamma2.cast(),
            beta2: self.beta2.cast(),
            stats2: stats(&self.stats2),
        }
    }
}

const ENCODER_FIELDS: [&str; 8] = ["w1", "b1", "gamma1", "beta1", "w2", "b2", "gamma2", "beta2"];

/// Identifies an encoder inside [`ModelParams`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EncoderId {
    Appearance,
    Motion,
    Audio,
    Text,
}

impl EncoderId {
    pub fn name(self) -> &'static str {
        match self {
            EncoderId::Appearance => "enc_ap",
            EncoderId::Motion => "enc_m",
            EncoderId::Audio => "enc_au",
            EncoderId::Text => "enc_text",
        }
    }
}

/// All trainable state plus BatchNorm running statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T> {
    pub config: ModelConfig,
    /// Takes raw appearance, or appearance ⧺ motion under early fusion.
    pub enc_ap: Option<EncoderParams<T>>,
    pub enc_m: Option<EncoderParams<T>>,
    pub enc_au: Option<EncoderParams<T>>,
    pub enc_text: EncoderParams<T>,
    pub cls_w: Tensor<T>,
    pub cls_b: Tensor<T>,
    /// Temperature in log space.
    pub log_tau: Tensor<T>,
}

/// He-uniform weights, zero biases, identity BatchNorm, τ = 0.07.
pub fn init_params<T: Scalar>(
    config: &ModelConfig,
    seed: u64,
) -> Result<ModelParams<T>, ModelError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = config.dims;
    let h = config.out_dim;
    let s = config.streams;
    let ap_in = if s.early_ap_mo {
        d.appearance + d.motion
    } else {
        d.appearance
    };
    let enc_ap = s
        .appearance
        .then(|| EncoderParams::init(&mut rng, ap_in, h, h));
    let enc_m = (s.motion && !s.early_ap_mo).then(|| EncoderParams::init(&mut rng, d.motion, h, h));
    let enc_au = s
        .audio
        .then(|| EncoderParams::init(&mut rng, d.audio, h, h));
    let enc_text = EncoderParams::init(&mut rng, d.text, h, h);
    let fused = s.fused_count() * h;
    Ok(ModelParams {
        config: *config,
        enc_ap,
        enc_m,
        enc_au,
        enc_text,
        cls_w: he_uniform(&mut rng, fused, config.num_classes),
        cls_b: Tensor::zeros(&[config.num_classes]),
        log_tau: Tensor::scalar(T::lit(TAU_INIT.ln())),
    })
}

impl<T: Scalar> ModelParams<T> {
    pub fn encoder(&self, id: EncoderId) -> Option<&EncoderParams<T>> {
        match id {
            EncoderId::Appearance => self.enc_ap.as_ref(),
            EncoderId::Motion => self.enc_m.as_ref(),
            EncoderId::Audio => self.enc_au.as_ref(),
            EncoderId::Text => Some(&self.enc_text),
        }
    }

    fn encoder_mut(&mut self, id: EncoderId) -> Option<&mut EncoderParams<T>> {
        match id {
            EncoderId::Appearance => self.enc_ap.as_mut(),
            EncoderId::Motion => self.enc_m.as_mut(),
            EncoderId::Audio => self.enc_au.as_mut(),
            EncoderId::Text => Some(&mut self.enc_text),
        }
    }

    fn encoders(&self) -> Vec<(EncoderId, &EncoderParams<T>)> {
        [
            EncoderId::Appearance,
            EncoderId::Motion,
            EncoderId::Audio,
            EncoderId::Text,
        ]
        .into_iter()
        .filter_map(|id| self.encoder(id).map(|e| (id, e)))
        .collect()
    }

    /// Trainable tensors with stable names, in optimizer order.
    pub fn named_trainable(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        for (id, enc) in self.encoders() {
            for (field, t) in ENCODER_FIELDS.iter().zip(enc.trainable()) {
                out.push((format!("{}.{field}", id.name()), t));
            }
        }
        out.push(("cls.w".into(), &self.cls_w));
        out.push(("cls.b".into(), &self.cls_b));
        out.push(("log_tau".into(), &self.log_tau));
        out
    }

    pub fn named_trainable_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut out = Vec::new();
        let ModelParams {
            enc_ap,
            enc_m,
            enc_au,
            enc_text,
            cls_w,
            cls_b,
            log_tau,
            ..
        } = self;
        let encs = [
            (EncoderId::Appearance, enc_ap.as_mut()),
            (EncoderId::Motion, enc_m.as_mut()),
            (EncoderId::Audio, enc_au.as_mut()),
            (EncoderId::Text, Some(enc_text)),
        ];
        for (id, enc) in encs {
            if let Some(enc) = enc {
                for (field, t) in ENCODER_FIELDS.iter().zip(enc.trainable_mut()) {
                    out.push((format!("{}.{field}", id.name()), t));
                }
            }
        }
        out.push(("cls.w".into(), cls_w));
        out.push(("cls.b".into(), cls_b));
        out.push(("log_tau".into(), log_tau));
        out
    }

    /// Running statistics with stable names: `(name, values)`.
    pub fn named_buffers(&self) -> Vec<(String, &[T])> {
        let mut out = Vec::new();
        for (id, enc) in self.encoders() {
            let n = id.name();
            out.push((format!("{n}.bn1.mean"), enc.stats1.mean.as_slice()));
            out.push((format!("{n}.bn1.var"), enc.stats1.var.as_slice()));
            out.push((format!("{n}.bn2.mean"), enc.stats2.mean.as_slice()));
            out.push((format!("{n}.bn2.var"), enc.stats2.var.as_slice()));
        }
        out
    }

    pub fn named_buffers_mut(&mut self) -> Vec<(String, &mut Vec<T>)> {
        let mut out = Vec::new();
        let ModelParams {
            enc_ap,
            enc_m,
            enc_au,
            enc_text,
            ..
        } = self;
        let encs = [
            (EncoderId::Appearance, enc_ap.as_mut()),
            (EncoderId::Motion, enc_m.as_mut()),
            (EncoderId::Audio, enc_au.as_mut()),
            (EncoderId::Text, Some(enc_text)),
        ];
        for (id, enc) in encs {
            if let Some(enc) = enc {
                let n = id.name();
                let EncoderParams { stats1, stats2, .. } = enc;
                out.push((format!("{n}.bn1.mean"), &mut stats1.mean));
                out.push((format!("{n}.bn1.var"), &mut stats1.var));
                out.push((format!("{n}.bn2.mean"), &mut stats2.mean));
                out.push((format!("{n}.bn2.var"), &mut stats2.var));
            }
        }
        out
    }

    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        ModelParams {
            config: self.config,
            enc_ap: self.enc_ap.as_ref().map(EncoderParams::cast),
            enc_m: self.enc_m.as_ref().map(EncoderParams::cast),
            enc_au: self.enc_au.as_ref().map(EncoderParams::cast),
            enc_text: self.enc_text.cast(),
            cls_w: self.cls_w.cast(),
            cls_b: self.cls_b.cast(),
            log_tau: self.log_tau.cast(),
        }
    }

    /// Current temperature, clamped to its allowed range.
    pub fn temperature(&self) -> f64 {
        self.log_tau.item().as_f64().exp().clamp(TAU_MIN, TAU_MAX)
    }

    /// Projects `log_tau` back into `[ln 0.01, ln 1]`.
    pub fn clamp_temperature(&mut self) {
        let v = self.log_tau.data()[0]
            .max(T::lit(TAU_MIN.ln()))
            .min(T::lit(TAU_MAX.ln()));
        self.log_tau.data_mut()[0] = v;
    }

    /// Folds train-mode batch statistics into the running statistics.
    pub fn update_running_stats(&mut self, stats: &[BnUpdate<T>]) {
        let momentum = T::lit(BN_MOMENTUM);
        for u in stats {
            if let Some(enc) = self.encoder_mut(u.encoder) {
                let target = if u.layer == 0 {
                    &mut enc.stats1
                } else {
                    &mut enc.stats2
                };
                target.update(&u.stats, momentum);
            }
        }
    }

    /// Registers every trainable tensor on the tape. Frozen registration
    /// records them as constants.
    pub fn register(&self, tape: &mut Tape<T>, trainable: bool) -> ParamVars {
        let mut reg = |t: &Tensor<T>| {
            if trainable {
                tape.param(t.clone())
            } else {
                tape.constant(t.clone())
            }
        };
        let mut enc = |e: &EncoderParams<T>| EncoderVars {
            w1: reg(&e.w1),
            b1: reg(&e.b1),
            gamma1: reg(&e.gamma1),
            beta1: reg(&e.beta1),
            w2: reg(&e.w2),
            b2: reg(&e.b2),
            gamma2: reg(&e.gamma2),
            beta2: reg(&e.beta2),
        };
        let enc_ap = self.enc_ap.as_ref().map(&mut enc);
        let enc_m = self.enc_m.as_ref().map(&mut enc);
        let enc_au = self.enc_au.as_ref().map(&mut enc);
        let enc_text = enc(&self.enc_text);
        ParamVars {
            enc_ap,
            enc_m,
            enc_au,
            enc_text,
            cls_w: reg(&self.cls_w),
            cls_b: reg(&self.cls_b),
            log_tau: reg(&self.log_tau),
        }
    }

    /// Copies tape gradients into each trainable tensor's grad slot.
    pub fn pull_grads(&mut self, tape: &Tape<T>, vars: &ParamVars) -> Result<(), ModelError> {
        let handles = vars.trainable();
        let mut slots = self.named_trainable_mut();
        if handles.len() != slots.len() {
            return Err(ModelError::Config(
                "parameter registration out of sync".into(),
            ));
        }
        for ((name, t), v) in slots.iter_mut().zip(handles) {
            let g = tape
                .grad(v)
                .ok_or_else(|| ModelError::Config(format!("no gradient recorded for {name}")))?;
            t.set_grad(g.to_vec())?;
        }
        Ok(())
    }

    /// Order-sensitive FNV-1a digest over every parameter and buffer bit pattern.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |v: f64| {
            for b in v.to_bits().to_le_bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        };
        for (_, t) in self.named_trainable() {
            t.data().iter().for_each(|v| eat(v.as_f64()));
        }
        for (_, b) in self.named_buffers() {
            b.iter().for_each(|v| eat(v.as_f64()));
        }
        h
    }
}

#[derive(Clone, Copy, Debug)]
pub struct EncoderVars {
    pub w1: Var,
    pub b1: Var,
    pub gamma1: Var,
    pub beta1: Var,
    pub w2: Var,
    pub b2: Var,
    pub gamma2: Var,
    pub beta2: Var,
}

impl EncoderVars {
    fn all(&self) -> [Var; 8] {
        [
            self.w1,
            self.b1,
            self.gamma1,
            self.beta1,
            self.w2,
            self.b2,
            self.gamma2,
            self.beta2,
        ]
    }
}

/// Tape handles for a registered [`ModelParams`].
#[derive(Clone, Debug)]
pub struct ParamVars {
    pub enc_ap: Option<EncoderVars>,
    pub enc_m: Option<EncoderVars>,
    pub enc_au: Option<EncoderVars>,
    pub enc_text: EncoderVars,
    pub cls_w: Var,
    pub cls_b: Var,
    pub log_tau: Var,
}

impl ParamVars {
    /// Rebuilds handles from a flat list in [`ModelParams::named_trainable`] order.
    pub fn from_list<T: Scalar>(params: &ModelParams<T>, vars: &[Var]) -> Result<Self, ModelError> {
        let want = params.named_trainable().len();
        if vars.len() != want {
            return Err(ModelError::Config(format!(
                "expected {want} parameter handles, got {}",
                vars.len()
            )));
        }
        let mut it = vars.iter().copied();
        let mut enc = |present: bool| {
            present.then(|| {
                let mut n = || it.next().expect("length checked");
                EncoderVars {
                    w1: n(),
                    b1: n(),
                    gamma1: n(),
                    beta1: n(),
                    w2: n(),
                    b2: n(),
                    gamma2: n(),
                    beta2: n(),
                }
            })
        };
        let enc_ap = enc(params.enc_ap.is_some());
        let enc_m = enc(params.enc_m.is_some());
        let enc_au = enc(params.enc_au.is_some());
        let enc_text = enc(true).expect("text encoder always present");
        let rest: Vec<Var> = it.collect();
        Ok(Self {
            enc_ap,
            enc_m,
            enc_au,
            enc_text,
            cls_w: rest[0],
            cls_b: rest[1],
            log_tau: rest[2],
        })
    }

    /// Handles in the same order as [`ModelParams::named_trainable`].
    pub fn trainable(&self) -> Vec<Var> {
        let mut out = Vec::new();
        for e in [self.enc_ap, self.enc_m, self.enc_au, Some(self.enc_text)]
            .into_iter()
            .flatten()
        {
            out.extend(e.all());
        }
        out.extend([self.cls_w, self.cls_b, self.log_tau]);
        out
    }
}

/// One train-mode BatchNorm call's statistics, tagged with its location.
#[derive(Clone, Debug, PartialEq)]
pub struct BnUpdate<T> {
    pub encoder: EncoderId,
    pub layer: usize,
    pub stats: BnBatchStats<T>,
}

/// Runs one encoder: two rounds of Linear, ReLU and BatchNorm.
#[allow(clippy::too_many_arguments)]
pub fn encode<T: Scalar>(
    tape: &mut Tape<T>,
    id: EncoderId,
    params: &EncoderParams<T>,
    vars: &EncoderVars,
    x: Var,
    mode: BnMode,
    order: LayerOrder,
    updates: &mut Vec<BnUpdate<T>>,
) -> Result<Var, ModelError> {
    let x_cols = tape.value(x).cols();
    if x_cols != params.input_dim() {
        return Err(ModelError::Input(format!(
            "{} expects inputs of width {}, got {x_cols}",
            id.name(),
            params.input_dim()
        )));
    }
    let layers = [
        (vars.w1, vars.b1, vars.gamma1, vars.beta1, &params.stats1),
        (vars.w2, vars.b2, vars.gamma2, vars.beta2, &params.stats2),
    ];
    let mut h = x;
    for (layer, (w, b, gamma, beta, stats)) in layers.into_iter().enumerate() {
        let z = tape.matmul(h, w)?;
        let z = tape.add_bias(z, b)?;
        let (out, batch_stats) = match order {
            LayerOrder::ReluThenBn => {
                let a = tape.relu(z);
                tape.batchnorm(a, gamma, beta, stats, mode)?
            }
            LayerOrder::BnThenRelu => {
                let (n, s) = tape.batchnorm(z, gamma, beta, stats, mode)?;
                (tape.relu(n), s)
            }
        };
        if let Some(stats) = batch_stats {
            updates.push(BnUpdate {
                encoder: id,
                layer,
                stats,
            });
        }
        h = out;
    }
    Ok(h)
}

/// Concatenates the present streams, optionally scaling audio rows by `r`,
/// and applies the linear classifier.
pub fn fuse_and_classify<T: Scalar>(
    tape: &mut Tape<T>,
    vars: &ParamVars,
    appearance: Option<Var>,
    motion: Option<Var>,
    audio: Option<Var>,
    consistency: Option<&[T]>,
) -> Result<Var, ModelError> {
    let audio = match (audio, consistency) {
        (Some(a), Some(r)) => {
            if let Some(bad) = r.iter().find(|v| !(**v >= T::zero() && **v <= T::one())) {
                return Err(ModelError::Input(format!(
                    "consistency weight {bad} outside [0, 1]"
                )));
            }
            Some(tape.scale_rows(a, r)?)
        }
        (Some(a), None) => Some(a),
        (None, Some(_)) => {
            return Err(ModelError::Input(
                "consistency weights given without an audio stream".into(),
            ))
        }
        (None, None) => None,
    };
    let parts: Vec<Var> = [appearance, motion, audio].into_iter().flatten().collect();
    let fused = tape.concat_cols(&parts)?;
    let z = tape.matmul(fused, vars.cls_w)?;
    Ok(tape.add_bias(z, vars.cls_b)?)
}

/// Gathered model inputs for a set of clips.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch<T> {
    pub appearance: Option<Tensor<T>>,
    pub motion: Option<Tensor<T>>,
    pub audio: Option<Tensor<T>>,
    pub vis_narration: Option<Tensor<T>>,
    pub aud_narration: Option<Tensor<T>>,
    pub consistency: Option<Vec<T>>,
    pub labels: Vec<usize>,
}

/// What [`Batch::gather`] must collect.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct BatchNeeds {
    pub streams: Streams,
    pub vis_narration: bool,
    pub aud_narration: bool,
    pub consistency: bool,
}

fn stack<T: Scalar>(rows: &[&[f32]]) -> Result<Tensor<T>, ModelError> {
    let cols = rows.first().map(|r| r.len()).unwrap_or(0);
    let data = rows
        .iter()
        .flat_map(|r| r.iter().map(|v| T::lit(*v as f64)))
        .collect();
    Ok(Tensor::matrix(rows.len(), cols, data)?)
}

impl<T: Scalar> Batch<T> {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Collects rows `indices` of `dataset`. Missing audio, narration or
    /// rating on a needed path is an error.
    pub fn gather(
        dataset: &Dataset,
        indices: &[usize],
        needs: BatchNeeds,
    ) -> Result<Self, ModelError> {
        if indices.is_empty() {
            return Err(ModelError::Input("empty batch".into()));
        }
        let recs: Vec<_> = indices.iter().map(|&i| &dataset.records[i]).collect();
        let s = needs.streams;
        let appearance = if s.early_ap_mo {
            let rows: Vec<Vec<f32>> = recs
                .iter()
                .map(|r| r.appearance.iter().chain(&r.motion).copied().collect())
                .collect();
            let refs: Vec<&[f32]> = rows.iter().map(Vec::as_slice).collect();
            Some(stack(&refs)?)
        } else if s.appearance {
            let rows: Vec<&[f32]> = recs.iter().map(|r| r.appearance.as_slice()).collect();
            Some(stack(&rows)?)
        } else {
            None
        };
        let motion = if s.motion && !s.early_ap_mo {
            let rows: Vec<&[f32]> = recs.iter().map(|r| r.motion.as_slice()).collect();
            Some(stack(&rows)?)
        } else {
            None
        };
        let require = |what: &str, rows: Vec<Option<&[f32]>>| -> Result<Tensor<T>, ModelError> {
            let rows = rows
                .into_iter()
                .zip(&recs)
                .map(|(row, r)| {
                    row.ok_or_else(|| {
                        ModelError::Input(format!("clip {} has no {what}", r.clip_id))
                    })
                })
                .collect::<Result<Vec<_>, _>>()?;
            stack(&rows)
        };
        let audio = if s.audio {
            Some(require(
                "audio",
                recs.iter().map(|r| r.audio.as_deref()).collect(),
            )?)
        } else {
            None
        };
        let vis_narration = if needs.vis_narration {
            Some(require(
                "visual narration",
                recs.iter()
                    .map(|r| Some(r.vis_narration.as_slice()))
                    .collect(),
            )?)
        } else {
            None
        };
        let aud_narration = if needs.aud_narration {
            Some(require(
                "audio narration",
                recs.iter().map(|r| r.aud_narration.as_deref()).collect(),
            )?)
        } else {
            None
        };
        let consistency = if needs.consistency {
            Some(
                recs.iter()
                    .map(|r| {
                        r.consistency.map(|c| T::lit(c as f64)).ok_or_else(|| {
                            ModelError::Input(format!(
                                "clip {} has no consistency rating",
                                r.clip_id
                            ))
                        })
                    })
                    .collect::<Result<Vec<_>, _>>()?,
            )
        } else {
            None
        };
        Ok(Self {
            appearance,
            motion,
            audio,
            vis_narration,
            aud_narration,
            consistency,
            labels: recs.iter().map(|r| r.label).collect(),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ForwardMode {
    /// Running statistics, no narrations, raw audio.
    Eval,
    Train {
        weight_audio: bool,
        vis_narration: bool,
        aud_narration: bool,
    },
}

/// Encoded features and logits of one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardOutput<T> {
    /// Appearance features; under early fusion, the joint appearance-motion features.
    pub ap: Option<Var>,
    pub m: Option<Var>,
    pub a: Option<Var>,
    pub t: Option<Var>,
    pub t_hat: Option<Var>,
    pub logits: Var,
    pub bn_updates: Vec<BnUpdate<T>>,
}

/// Full pipeline: encoders, optional narration encoding, weighted fusion, classifier.
pub fn forward<T: Scalar>(
    tape: &mut Tape<T>,
    params: &ModelParams<T>,
    vars: &ParamVars,
    batch: &Batch<T>,
    mode: ForwardMode,
) -> Result<ForwardOutput<T>, ModelError> {
    let order = params.config.layer_order;
    let bn = match mode {
        ForwardMode::Eval => BnMode::Eval,
        ForwardMode::Train { .. } => BnMode::Train,
    };
    let mut updates = Vec::new();
    let mut run = |tape: &mut Tape<T>,
                   id: EncoderId,
                   enc_vars: Option<&EncoderVars>,
                   input: Option<&Tensor<T>>|
     -> Result<Option<Var>, ModelError> {
        match (params.encoder(id), enc_vars, input) {
            (Some(p), Some(v), Some(x)) => {
                let x = tape.constant(x.clone());
                encode(tape, id, p, v, x, bn, order, &mut updates).map(Some)
            }
            (None, None, None) => Ok(None),
            (Some(_), _, None) => Err(ModelError::Input(format!(
                "batch lacks the input for {}",
                id.name()
            ))),
            _ => Err(ModelError::Config(format!(
                "{} is not part of this model",
                id.name()
            ))),
        }
    };

    let ap = run(
        tape,
        EncoderId::Appearance,
        vars.enc_ap.as_ref(),
        batch.appearance.as_ref(),
    )?;
    let m = run(
        tape,
        EncoderId::Motion,
        vars.enc_m.as_ref(),
        batch.motion.as_ref(),
    )?;
    let a = run(
        tape,
        EncoderId::Audio,
        vars.enc_au.as_ref(),
        batch.audio.as_ref(),
    )?;

    let (weights, t, t_hat) = match mode {
        ForwardMode::Eval => (None, None, None),
        ForwardMode::Train {
            weight_audio,
            vis_narration,
            aud_narration,
        } => {
            let weights = if weight_audio {
                Some(batch.consistency.as_deref().ok_or_else(|| {
                    ModelError::Input("consistency weighting needs ratings in the batch".into())
                })?)
            } else {
                None
            };
            let mut text =
                |tape: &mut Tape<T>, want: bool, input: Option<&Tensor<T>>, what: &str| {
                    if !want {
                        return Ok(None);
                    }
                    let x =
                        input.ok_or_else(|| ModelError::Input(format!("batch lacks {what}")))?;
                    run(tape, EncoderId::Text, Some(&vars.enc_text), Some(x))
                };
            let t = text(
                tape,
                vis_narration,
                batch.vis_narration.as_ref(),
                "visual narrations",
            )?;
            let t_hat = text(
                tape,
                aud_narration,
                batch.aud_narration.as_ref(),
                "audio narrations",
            )?;
            (weights, t, t_hat)
        }
    };
    let logits = fuse_and_classify(tape, vars, ap, m, a, weights)?;
    if !tape.value(logits).is_finite() {
        return Err(ModelError::Numerics(NumericsError::NonFinite(
            "logits".into(),
        )));
    }
    Ok(ForwardOutput {
        ap,
        m,
        a,
        t,
        t_hat,
        logits,
        bn_updates: updates,
    })
}

/// Index of the largest value in each row; ties go to the lowest index.
pub fn argmax_rows<T: Scalar>(logits: &Tensor<T>) -> Vec<usize> {
    (0..logits.rows())
        .map(|i| {
            let row = logits.row(i);
            let mut best = 0;
            for (j, v) in row.iter().enumerate() {
                if *v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}
