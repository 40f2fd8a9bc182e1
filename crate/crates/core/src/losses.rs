//! Classification loss, contrastive feature-narration alignment and their
//! weighted sum.

use serde::{Deserialize, Serialize};

use crate::model::{ForwardOutput, ModelError};
use crate::numerics::{NumericsError, Scalar, Tape, Var};

pub const DEFAULT_LAMBDA: f64 = 0.1;

/// Which narration the audio features are pulled towards.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlignAudioTo {
    VisualNarration,
    #[default]
    AudioNarration,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub lambda: f64,
    pub alignment: bool,
    pub align_audio_to: AlignAudioTo,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda: DEFAULT_LAMBDA,
            alignment: true,
            align_audio_to: AlignAudioTo::AudioNarration,
        }
    }
}

/// Scalar values of one objective evaluation. Pair terms hold both directions.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_c: f64,
    pub l_ap_t: f64,
    pub l_m_t: f64,
    pub l_a_t: f64,
    pub l_align: f64,
    pub total: f64,
    pub lambda: f64,
}

impl LossBreakdown {
    fn assemble(l_c: f64, l_ap_t: f64, l_m_t: f64, l_a_t: f64, lambda: f64) -> Self {
        let l_align = l_ap_t + l_m_t + l_a_t;
        Self {
            l_c,
            l_ap_t,
            l_m_t,
            l_a_t,
            l_align,
            total: l_c + lambda * l_align,
            lambda,
        }
    }

    pub fn is_finite(&self) -> bool {
        [self.l_c, self.l_align, self.total]
            .iter()
            .all(|v| v.is_finite())
    }
}

/// Mean over anchors of `-log softmax_j(cos(x_i, y_j) / τ)[i]`.
pub fn infonce_directional<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    y: Var,
    log_tau: Var,
) -> Result<Var, NumericsError> {
    let (bx, by) = (tape.value(x).rows(), tape.value(y).rows());
    if bx != by || tape.value(x).shape().len() != 2 || tape.value(y).shape().len() != 2 {
        return Err(NumericsError::Shape(format!(
            "alignment needs two matrices with equal row counts, got {:?} and {:?}",
            tape.value(x).shape(),
            tape.value(y).shape()
        )));
    }
    let s = tape.cosine(x, y)?;
    let logits = tape.inv_temperature(s, log_tau)?;
    let labels: Vec<usize> = (0..bx).collect();
    tape.softmax_cross_entropy(logits, &labels)
}

/// Sum of both alignment directions between `x` and `y`.
pub fn alignment_pair_loss<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    y: Var,
    log_tau: Var,
) -> Result<Var, NumericsError> {
    let forward = infonce_directional(tape, x, y, log_tau)?;
    let backward = infonce_directional(tape, y, x, log_tau)?;
    tape.add(forward, backward)
}

/// Builds `L_c + λ·L_align` on the tape and returns it with its breakdown.
///
/// With alignment disabled the objective is the classification loss alone.
pub fn total_loss<T: Scalar>(
    tape: &mut Tape<T>,
    out: &ForwardOutput<T>,
    labels: &[usize],
    log_tau: Var,
    cfg: &LossConfig,
) -> Result<(Var, LossBreakdown), ModelError> {
    if !(cfg.lambda >= 0.0 && cfg.lambda.is_finite()) {
        return Err(ModelError::Config(format!(
            "lambda must be finite and >= 0, got {}",
            cfg.lambda
        )));
    }
    let l_c = tape.softmax_cross_entropy(out.logits, labels)?;
    let l_c_value = tape.value(l_c).item().as_f64();
    if !cfg.alignment {
        return Ok((
            l_c,
            LossBreakdown::assemble(l_c_value, 0.0, 0.0, 0.0, cfg.lambda),
        ));
    }
    let missing = |what: &str| ModelError::Input(format!("alignment needs {what} features"));
    let t = out.t.ok_or_else(|| missing("visual narration"))?;
    let audio_target = match cfg.align_audio_to {
        AlignAudioTo::VisualNarration => Some(t),
        AlignAudioTo::AudioNarration => out.t_hat,
    };

    let mut terms = Vec::new();
    let mut values = [0.0f64; 3];
    for (slot, (feat, target)) in [(out.ap, Some(t)), (out.m, Some(t)), (out.a, audio_target)]
        .into_iter()
        .enumerate()
    {
        let Some(feat) = feat else { continue };
        let target = target.ok_or_else(|| missing("audio narration"))?;
        let term = alignment_pair_loss(tape, feat, target, log_tau)?;
        values[slot] = tape.value(term).item().as_f64();
        terms.push(term);
    }
    let mut l_align = terms[0];
    for &term in &terms[1..] {
        l_align = tape.add(l_align, term)?;
    }
    let weighted = tape.scale(l_align, T::lit(cfg.lambda));
    let total = tape.add(l_c, weighted)?;

    let breakdown = LossBreakdown::assemble(l_c_value, values[0], values[1], values[2], cfg.lambda);
    debug_assert!({
        let taped = tape.value(total).item().as_f64();
        !taped.is_finite()
            || (taped - breakdown.total).abs() <= 1e-4 * breakdown.total.abs().max(1.0)
    });
    Ok((total, breakdown))
}
