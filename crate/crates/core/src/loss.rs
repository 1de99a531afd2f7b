//! Training objective: cosine similarity of hash activations regressed onto
//! a label-affinity target, plus a squared-error linear classifier on `h`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nd::{Tape, Tensor, Var};

/// `2 / (1 + exp(-dot)) - 1`, the affinity of two label rows with dot
/// product `dot`.
///
/// Evaluated as `tanh(dot / 2)`. For large `dot` the exact value lies within
/// 2⁻⁵³ of 1 and would round up to 1.0; it is rounded toward zero instead so
/// the result stays strictly below 1.
pub fn affinity_value(dot: f64) -> f64 {
    let v = (0.5 * dot).tanh();
    if v >= 1.0 {
        1.0 - f64::EPSILON / 2.0
    } else {
        v
    }
}

/// S×S affinity matrix of a batch of 0/1 label rows.
pub fn affinity(labels: &Tensor) -> Result<Tensor> {
    if let Some(pos) = labels.data().iter().position(|&v| v != 0.0 && v != 1.0) {
        return Err(Error::Validation(format!(
            "label ({}, {}) is {}, expected 0 or 1",
            pos / labels.cols().max(1),
            pos % labels.cols().max(1),
            labels.data()[pos]
        )));
    }
    let s = labels.rows();
    let mut phi = Tensor::zeros(s, s);
    for i in 0..s {
        for j in i..s {
            let dot: f64 = labels.row(i).iter().zip(labels.row(j)).map(|(a, b)| a * b).sum();
            let v = affinity_value(dot);
            phi.set(i, j, v);
            phi.set(j, i, v);
        }
    }
    Ok(phi)
}

/// Mean squared gap between pairwise cosines of `h` and `phi` over all
/// ordered pairs of the batch; diagonal pairs are skipped unless
/// `include_diagonal`.
pub fn sim_loss(tape: &mut Tape, h: Var, phi: &Tensor, include_diagonal: bool) -> Result<Var> {
    let s = tape.value(h).rows();
    if phi.shape() != (s, s) {
        return Err(Error::Shape(format!(
            "affinity is {}x{}, batch has {s} rows",
            phi.rows(),
            phi.cols()
        )));
    }
    let cos = tape.rowwise_cosine(h)?;
    let weights = if include_diagonal {
        Tensor::filled(s, s, 1.0 / (s * s) as f64)
    } else if s < 2 {
        Tensor::zeros(s, s)
    } else {
        let w = 1.0 / (s * (s - 1)) as f64;
        Tensor::from_fn(s, s, |i, j| if i == j { 0.0 } else { w })
    };
    tape.weighted_sq_err(cos, phi.clone(), weights)
}

/// Mean over samples of `|y'_i - y_i|²`.
pub fn clf_loss(tape: &mut Tape, y_pred: Var, y_true: &Tensor) -> Result<Var> {
    let (s, c) = tape.value(y_pred).shape();
    if y_true.shape() != (s, c) {
        return Err(Error::Shape(format!(
            "prediction is {s}x{c}, target is {}x{}",
            y_true.rows(),
            y_true.cols()
        )));
    }
    let w = if s == 0 { 0.0 } else { 1.0 / s as f64 };
    tape.weighted_sq_err(y_pred, y_true.clone(), Tensor::filled(s, c, w))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_sim: f64,
    pub l_clf: f64,
    pub mu: f64,
    pub l_total: f64,
}

impl LossBreakdown {
    pub fn new(l_sim: f64, l_clf: f64, mu: f64) -> Result<Self> {
        check_mu(mu)?;
        Ok(Self {
            l_sim,
            l_clf,
            mu,
            l_total: l_sim + mu * l_clf,
        })
    }
}

fn check_mu(mu: f64) -> Result<()> {
    if !(mu >= 0.0 && mu.is_finite()) {
        return Err(Error::Config(format!(
            "classifier weight mu must be finite and non-negative, got {mu}"
        )));
    }
    Ok(())
}

/// `l_sim + mu * l_clf` on the tape, with the scalar breakdown.
pub fn total_loss(tape: &mut Tape, l_sim: Var, l_clf: Var, mu: f64) -> Result<(Var, LossBreakdown)> {
    check_mu(mu)?;
    let weighted = tape.scale(l_clf, mu);
    let total = tape.add(l_sim, weighted)?;
    let breakdown = LossBreakdown::new(tape.value(l_sim).item()?, tape.value(l_clf).item()?, mu)?;
    debug_assert_eq!(breakdown.l_total, tape.value(total).item()?);
    Ok((total, breakdown))
}
