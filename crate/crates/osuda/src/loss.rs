//! Segmentation losses, assembled from tape primitives.
//!
//! Both losses are a masked sum over log-probabilities: the mask is a
//! constant (C,H,W) tensor holding the pixel weight at the true-class slot
//! and zero elsewhere, so the backward pass comes entirely from the
//! primitive ops and the confidence weights stay out of the gradient.

use crate::benchdata::{LabelMap, IGNORE};
use crate::error::{Error, Result};
use crate::protomatch::ConfidenceMap;
use crate::tensor::{Tape, Tensor, Val};

/// Probabilities are floored here before the log.
pub const PROB_FLOOR: f64 = 1e-12;

/// Default balance between the plain and confidence-weighted terms.
pub const DEFAULT_ALPHA: f64 = 0.5;

/// Tape handles for one step's loss, plus the numbers worth logging.
pub struct LossTerms {
    pub l_ce: Val,
    pub l_pce: Val,
    pub total: Val,
    pub alpha: f64,
}

impl LossTerms {
    pub fn values(&self, tape: &Tape) -> (f64, f64, f64) {
        (
            tape.data(self.l_ce)[0],
            tape.data(self.l_pce)[0],
            tape.data(self.total)[0],
        )
    }
}

fn masked_nll(tape: &mut Tape, p: Val, y: &LabelMap, weights: Option<&ConfidenceMap>) -> Result<Val> {
    let shape = tape.shape(p).to_vec();
    if shape.len() != 3 {
        return Err(Error::Invalid(format!(
            "loss expects (C,H,W) probabilities, got shape {shape:?}"
        )));
    }
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    if y.h != h || y.w != w {
        return Err(Error::ShapeMismatch {
            op: "loss labels-vs-probabilities",
            left: vec![y.h, y.w],
            right: vec![h, w],
        });
    }
    if let Some(cm) = weights {
        if cm.h != h || cm.w != w {
            return Err(Error::ShapeMismatch {
                op: "loss weights-vs-probabilities",
                left: vec![cm.h, cm.w],
                right: vec![h, w],
            });
        }
    }
    let hw = h * w;
    let mut mask = vec![0.0; c * hw];
    let mut valid = 0usize;
    for pos in 0..hw {
        let label = y.data[pos];
        if label == IGNORE {
            continue;
        }
        if label as usize >= c {
            return Err(Error::Invalid(format!(
                "label {label} outside {c} classes at pixel {pos}"
            )));
        }
        mask[label as usize * hw + pos] = weights.map_or(1.0, |cm| cm.values[pos]);
        valid += 1;
    }
    if valid == 0 {
        return Err(Error::Invalid(
            "cross entropy over zero valid pixels (all ignored)".into(),
        ));
    }
    let mask = tape.constant(Tensor::new(vec![c, h, w], mask)?);
    let floored = tape.clamp_min(p, PROB_FLOOR);
    let logp = tape.ln(floored);
    let picked = tape.mul(logp, mask)?;
    let summed = tape.sum_all(picked);
    Ok(tape.mul_scalar(summed, -1.0 / valid as f64))
}

/// -(1/|valid|) sum over valid pixels of log p[y]; ignore pixels leave
/// both the sum and the denominator.
pub fn cross_entropy(tape: &mut Tape, p: Val, y: &LabelMap) -> Result<Val> {
    masked_nll(tape, p, y, None)
}

/// Same sum with a per-pixel constant weight; weights of exactly 1
/// reproduce `cross_entropy` bit for bit because the mask construction is
/// identical.
pub fn weighted_cross_entropy(
    tape: &mut Tape,
    p: Val,
    y: &LabelMap,
    conf: &ConfidenceMap,
) -> Result<Val> {
    masked_nll(tape, p, y, Some(conf))
}

/// total = alpha * l_ce + l_pce, assembled on the tape.
pub fn total_loss(tape: &mut Tape, l_ce: Val, l_pce: Val, alpha: f64) -> Result<LossTerms> {
    let scaled = tape.mul_scalar(l_ce, alpha);
    let total = tape.add(scaled, l_pce)?;
    Ok(LossTerms {
        l_ce,
        l_pce,
        total,
        alpha,
    })
}
