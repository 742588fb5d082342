//! Training losses: cross-entropy, clamped KL, symmetric KL, and the
//! supervised + guide composition.
//!
//! The KL here is mean-over-batch of the per-sample divergence, with both
//! probability arguments floored at [`PROB_EPS`] before the log ratio so
//! degenerate rows stay finite. `kl(p, p)` is exactly 0 by construction: the
//! graph computes `pc * (ln pc - ln qc)` from one shared clamped tensor per
//! side.

use crate::tensor::{softmax_rows, Tape, TensorId};
use crate::{Error, Result};

/// Floor applied to probabilities before any log.
pub const PROB_EPS: f64 = 1e-8;

/// A validated batch of probability rows (plain data, not graph-connected).
///
/// This is what inference paths hand around; push it onto a [`Tape`] with
/// [`ProbBatch::constant`] when it should enter a loss as a frozen term.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbBatch {
    data: Vec<f64>,
    batch: usize,
    classes: usize,
}

impl ProbBatch {
    /// Validates that every row is a probability vector (entries in [0, 1],
    /// sum within 1e-6 of 1).
    pub fn new(data: Vec<f64>, batch: usize, classes: usize) -> Result<Self> {
        if data.len() != batch * classes {
            return Err(Error::ShapeMismatch {
                op: "ProbBatch::new",
                left: vec![data.len()],
                right: vec![batch, classes],
            });
        }
        for r in 0..batch {
            let row = &data[r * classes..(r + 1) * classes];
            let mut sum = 0.0;
            for &p in row {
                if !(0.0..=1.0 + 1e-9).contains(&p) {
                    return Err(Error::contract(format!(
                        "probability {p} in row {r} is outside [0, 1]"
                    )));
                }
                sum += p;
            }
            if (sum - 1.0).abs() > 1e-6 {
                return Err(Error::contract(format!("probability row {r} sums to {sum}")));
            }
        }
        Ok(ProbBatch { data, batch, classes })
    }

    /// Softmax of raw logits; infallible by construction.
    pub fn from_logits(logits: &[f64], batch: usize, classes: usize) -> Self {
        ProbBatch { data: softmax_rows(logits, batch, classes), batch, classes }
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.classes..(i + 1) * self.classes]
    }

    /// Inserts the batch as a no-gradient leaf, e.g. a frozen dual model's
    /// predictions entering a guide loss.
    pub fn constant(&self, tape: &mut Tape) -> Result<TensorId> {
        tape.constant(self.data.clone(), vec![self.batch, self.classes])
    }
}

/// Mean negative log-likelihood of `labels` under row-wise softmax of
/// `logits` (shape `[b, K]` on the tape).
pub fn cross_entropy(tape: &mut Tape, logits: TensorId, labels: &[usize]) -> Result<TensorId> {
    let ls = tape.log_softmax(logits)?;
    let picked = tape.gather_labels(ls, labels)?;
    let mean = tape.mean_all(picked)?;
    Ok(tape.scale(mean, -1.0))
}

/// Row-wise softmax as a graph op; the differentiable counterpart of
/// [`ProbBatch::from_logits`].
pub fn softmax_probs(tape: &mut Tape, logits: TensorId) -> Result<TensorId> {
    tape.softmax(logits)
}

/// Mean-over-batch KL divergence `KL(p || q)` between two `[b, K]`
/// probability tensors, both floored at [`PROB_EPS`] before the log ratio.
pub fn kl_divergence(tape: &mut Tape, p: TensorId, q: TensorId) -> Result<TensorId> {
    let ps = tape.shape(p).to_vec();
    let qs = tape.shape(q).to_vec();
    if ps != qs || ps.len() != 2 {
        return Err(Error::ShapeMismatch { op: "kl_divergence", left: ps, right: qs });
    }
    let b = ps[0];
    let pc = tape.clamp_min(p, PROB_EPS);
    let qc = tape.clamp_min(q, PROB_EPS);
    let lp = tape.ln(pc)?;
    let lq = tape.ln(qc)?;
    let diff = tape.sub(lp, lq)?;
    let terms = tape.mul(pc, diff)?;
    let total = tape.sum_all(terms);
    Ok(tape.scale(total, 1.0 / b as f64))
}

/// `KL(p || q) + KL(q || p)`; invariant under swapping the arguments.
pub fn symmetric_kl(tape: &mut Tape, p: TensorId, q: TensorId) -> Result<TensorId> {
    let forward = kl_divergence(tape, p, q)?;
    let backward = kl_divergence(tape, q, p)?;
    tape.add(forward, backward)
}

/// Off-tape value of [`symmetric_kl`] for metric reporting: same clamping
/// and same mean-over-batch reduction, no gradient bookkeeping.
pub fn symmetric_kl_value(p: &ProbBatch, q: &ProbBatch) -> Result<f64> {
    if p.batch() != q.batch() || p.classes() != q.classes() {
        return Err(Error::ShapeMismatch {
            op: "symmetric_kl_value",
            left: vec![p.batch(), p.classes()],
            right: vec![q.batch(), q.classes()],
        });
    }
    let mut total = 0.0;
    for (&pv, &qv) in p.data().iter().zip(q.data()) {
        let pc = pv.max(PROB_EPS);
        let qc = qv.max(PROB_EPS);
        total += (pc - qc) * (pc.ln() - qc.ln());
    }
    Ok(total / p.batch() as f64)
}

/// The scalar pieces of one training objective.
#[derive(Debug, Clone, Copy)]
pub struct LossBundle {
    pub super_loss: TensorId,
    pub guide_loss: Option<TensorId>,
    /// `super + beta * guide`; equals `super_loss` exactly when the guide is
    /// absent or beta is 0 (no zero-scaled node is added in that case).
    pub total: TensorId,
}

/// Composes the supervised term with an optional beta-weighted guide term.
pub fn total_loss(
    tape: &mut Tape,
    super_loss: TensorId,
    guide_loss: Option<TensorId>,
    beta: f64,
) -> Result<LossBundle> {
    if !beta.is_finite() || beta < 0.0 {
        return Err(Error::invalid(format!("beta must be finite and >= 0, got {beta}")));
    }
    for (name, id) in [("supervised", Some(super_loss)), ("guide", guide_loss)] {
        if let Some(id) = id {
            let shape = tape.shape(id);
            if shape.iter().product::<usize>() != 1 {
                return Err(Error::contract(format!(
                    "{name} loss must be scalar, got shape {shape:?}"
                )));
            }
        }
    }
    let total = match guide_loss {
        Some(g) if beta != 0.0 => {
            let scaled = tape.scale(g, beta);
            tape.add(super_loss, scaled)?
        }
        _ => super_loss,
    };
    Ok(LossBundle { super_loss, guide_loss, total })
}
