//! Action-aware composite loss.
//!
//! Every prediction is labelled with the action of the sample that supplied
//! its temporal feature. With `d` the intra prediction of the original
//! sample (label `y`), `d′` that of its SADP partner (label `y`) and `d′*`
//! that of its DASP partner (label `y′`):
//!
//! ```text
//! L_intra = CE(d, y) + CE(d′, y) + CE(d′*, y′)
//! L_dasp  = CE(d̃, y) + CE(d̃′, y′)
//! L_sadp  = CE(d̃s, y) + CE(d̃s′, y)
//! L       = L_intra + w_x · (L_dasp + L_sadp)
//! ```
//!
//! where `d̃` crosses the original's temporal feature with the DASP
//! partner's spatial feature and `d̃′` the reverse; `d̃s`, `d̃s′` are the two
//! SADP crossings.

use std::ops::{Add, Mul};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::Session;
use crate::scalar::Scalar;
use crate::tape::Var;

pub const PROB_FLOOR: f64 = 1e-12;

/// Mean over rows of `−ln max(p[label], 1e-12)`.
pub fn cross_entropy<S: Scalar>(probs: &Array2<S>, labels: &[usize]) -> Result<S> {
    if probs.nrows() != labels.len() {
        return Err(Error::Shape(format!(
            "{} predictions for {} labels",
            probs.nrows(),
            labels.len()
        )));
    }
    let k = probs.ncols();
    let floor = S::of(PROB_FLOOR);
    let mut total = S::zero();
    for (row, &y) in probs.rows().into_iter().zip(labels) {
        if y >= k {
            return Err(Error::Invalid(format!("label {y} out of range for {k} classes")));
        }
        total -= row[y].max(floor).ln();
    }
    Ok(total / S::of(labels.len().max(1) as f64))
}

/// `CE(d̃, y) + CE(d̃′, y′)`.
pub fn loss_dasp<S: Scalar>(
    crossed: &Array2<S>,
    crossed_rev: &Array2<S>,
    y: &[usize],
    y_partner: &[usize],
) -> Result<S> {
    Ok(cross_entropy(crossed, y)? + cross_entropy(crossed_rev, y_partner)?)
}

/// `CE(d̃s, y) + CE(d̃s′, y)`.
pub fn loss_sadp<S: Scalar>(crossed: &Array2<S>, crossed_rev: &Array2<S>, y: &[usize]) -> Result<S> {
    Ok(cross_entropy(crossed, y)? + cross_entropy(crossed_rev, y)?)
}

/// `CE(d, y) + CE(d′, y) + CE(d′*, y′)`.
pub fn loss_intra<S: Scalar>(
    d: &Array2<S>,
    d_sadp: &Array2<S>,
    d_dasp: &Array2<S>,
    y: &[usize],
    y_partner: &[usize],
) -> Result<S> {
    Ok(cross_entropy(d, y)? + cross_entropy(d_sadp, y)? + cross_entropy(d_dasp, y_partner)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown<T = f64> {
    pub intra: T,
    pub dasp: T,
    pub sadp: T,
    pub total: T,
    pub w_x: T,
}

pub fn total_loss<T>(intra: T, dasp: T, sadp: T, w_x: T) -> LossBreakdown<T>
where
    T: Clone + Add<Output = T> + Mul<Output = T>,
{
    let total = intra.clone() + w_x.clone() * (dasp.clone() + sadp.clone());
    LossBreakdown {
        intra,
        dasp,
        sadp,
        total,
        w_x,
    }
}

/// Logits of the seven predictions of one step, each `N × K`.
#[derive(Clone, Copy, Debug)]
pub struct StepLogits {
    pub intra: Var,
    pub intra_sadp: Var,
    pub intra_dasp: Var,
    /// temporal from the original, spatial from the DASP partner
    pub dasp_cross: Var,
    /// temporal from the DASP partner, spatial from the original
    pub dasp_cross_rev: Var,
    pub sadp_cross: Var,
    pub sadp_cross_rev: Var,
}

/// Builds the composite loss on the tape. `targets` are the original
/// batch's label rows, `partner_targets` the DASP partners'.
pub fn composite_loss<S: Scalar>(
    sess: &mut Session<'_, S>,
    logits: &StepLogits,
    targets: &Array2<S>,
    partner_targets: &Array2<S>,
    w_x: f64,
) -> (Var, LossBreakdown) {
    let t = &mut sess.tape;
    let ce = |t: &mut crate::tape::Tape<S>, z: Var, y: &Array2<S>| t.softmax_cross_entropy(z, y.clone());
    let i0 = ce(t, logits.intra, targets);
    let i1 = ce(t, logits.intra_sadp, targets);
    let i2 = ce(t, logits.intra_dasp, partner_targets);
    let d0 = ce(t, logits.dasp_cross, targets);
    let d1 = ce(t, logits.dasp_cross_rev, partner_targets);
    let s0 = ce(t, logits.sadp_cross, targets);
    let s1 = ce(t, logits.sadp_cross_rev, targets);
    let intra = t.add(i0, i1);
    let intra = t.add(intra, i2);
    let dasp = t.add(d0, d1);
    let sadp = t.add(s0, s1);
    let cross = t.add(dasp, sadp);
    let cross = t.scale(cross, S::of(w_x));
    let total = t.add(intra, cross);
    let breakdown = LossBreakdown {
        intra: t.scalar(intra).f64(),
        dasp: t.scalar(dasp).f64(),
        sadp: t.scalar(sadp).f64(),
        total: t.scalar(total).f64(),
        w_x,
    };
    (total, breakdown)
}

/// One-hot rows for `labels`.
pub fn one_hot<S: Scalar>(labels: &[usize], classes: usize) -> Array2<S> {
    let mut t = Array2::zeros((labels.len(), classes));
    for (i, &y) in labels.iter().enumerate() {
        t[[i, y]] = S::one();
    }
    t
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr2;

    #[test]
    fn uniform_is_ln_k() {
        let p = Array2::from_elem((3, 5), 0.2f64);
        let ce = cross_entropy(&p, &[0, 4, 2]).unwrap();
        assert!((ce - 5f64.ln()).abs() < 1e-9);
        let two = loss_dasp(&p, &p, &[0, 1, 2], &[3, 4, 0]).unwrap();
        assert!((two - 2.0 * 5f64.ln()).abs() < 1e-9);
        let three = loss_intra(&p, &p, &p, &[0, 1, 2], &[3, 4, 0]).unwrap();
        assert!((three - 3.0 * 5f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn correct_one_hot_is_zero() {
        let p = arr2(&[[1.0f64, 0.0], [0.0, 1.0]]);
        assert!(cross_entropy(&p, &[0, 1]).unwrap().abs() < 1e-9);
        assert!(loss_sadp(&p, &p, &[0, 1]).unwrap().abs() < 1e-9);
    }

    #[test]
    fn clamp_keeps_wrong_one_hot_finite() {
        let p = arr2(&[[1.0f64, 0.0]]);
        let ce = cross_entropy(&p, &[1]).unwrap();
        assert!((ce + PROB_FLOOR.ln()).abs() < 1e-9);
    }

    #[test]
    fn label_out_of_range() {
        let p = Array2::from_elem((1, 2), 0.5f64);
        assert!(cross_entropy(&p, &[2]).is_err());
        assert!(cross_entropy(&p, &[0, 1]).is_err());
    }

    #[test]
    fn total_arithmetic() {
        let b = total_loss(3.0, 2.0, 1.0, 0.1);
        assert!((b.total - 3.3f64).abs() < 1e-12);
        let z = total_loss(1.25, 7.0, 9.0, 0.0);
        assert_eq!(z.total, 1.25);
    }
}
