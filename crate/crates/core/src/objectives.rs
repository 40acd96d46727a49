//! Loss terms for adversarial volume synthesis with a task branch.
//!
//! Losses are built as tape nodes so training backpropagates through them;
//! [`total_objective`] composes already-evaluated scalars for reporting.

use thiserror::Error;

use crate::diffgrid::{DiffError, NodeId, Tape};
use crate::Scalar;

/// Failure modes for loss construction.
#[derive(Debug, Error)]
pub enum ObjError {
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error("batch sizes differ: {left} vs {right}")]
    BatchMismatch { left: usize, right: usize },
    #[error("shapes differ: {left:?} vs {right:?}")]
    ShapeMismatch { left: Vec<usize>, right: Vec<usize> },
    #[error("bad mixing coefficients: {0}")]
    BadMix(String),
    #[error("{term} is not finite")]
    NonFinite { term: &'static str },
    #[error("critic closure: {0}")]
    Closure(String),
}

/// Coefficients combining the loss terms.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LossWeights<S> {
    /// Weight on the reconstruction term.
    pub alpha: S,
    /// Weight on the task term.
    pub beta: S,
    /// Gradient-penalty coefficient.
    pub gp_lambda: S,
}

impl<S: Scalar> Default for LossWeights<S> {
    fn default() -> Self {
        Self {
            alpha: S::lit(10.0),
            beta: S::lit(0.1),
            gp_lambda: S::lit(10.0),
        }
    }
}

impl<S: Scalar> LossWeights<S> {
    /// Rejects negative or non-finite coefficients.
    pub fn validate(&self) -> Result<(), ObjError> {
        for (term, v) in [
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("gp_lambda", self.gp_lambda),
        ] {
            if !v.is_finite() || v < S::zero() {
                return Err(ObjError::NonFinite { term });
            }
        }
        Ok(())
    }
}

/// Evaluated loss terms for one step, before weighting.
#[derive(Debug, Clone, Copy)]
pub struct LossParts<S> {
    /// Critic-side adversarial loss, mean score on fake minus mean on real.
    pub critic_loss: S,
    /// Generator-side adversarial loss, negated mean score on fake.
    pub gen_loss: S,
    pub l_l1: S,
    pub l_task: S,
    pub gp: S,
}

/// Weighted totals alongside the raw terms, one training step's record.
#[derive(Debug, Clone, Copy)]
pub struct LossBreakdown<S> {
    /// Critic-side adversarial loss (the generator part is recoverable as
    /// `total_g - alpha*l_l1 - beta*l_task`).
    pub l_gan: S,
    pub l_l1: S,
    pub l_task: S,
    pub gp: S,
    pub total_g: S,
    pub total_d: S,
}

const CSV_HEADER: &str = "step,l_gan,gp,l_l1,l_task,total_g,total_d";

impl<S: Scalar> LossBreakdown<S> {
    /// Column names for the per-step loss log.
    pub fn csv_header() -> &'static str {
        CSV_HEADER
    }

    /// One loss-log row matching [`LossBreakdown::csv_header`].
    pub fn csv_row(&self, step: u64) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            step,
            self.l_gan.to_f64_lossy(),
            self.gp.to_f64_lossy(),
            self.l_l1.to_f64_lossy(),
            self.l_task.to_f64_lossy(),
            self.total_g.to_f64_lossy(),
            self.total_d.to_f64_lossy(),
        )
    }
}

/// Combines evaluated parts into weighted totals, rejecting non-finite
/// terms by name.
pub fn total_objective<S: Scalar>(
    weights: &LossWeights<S>,
    parts: &LossParts<S>,
) -> Result<LossBreakdown<S>, ObjError> {
    weights.validate()?;
    for (term, v) in [
        ("critic_loss", parts.critic_loss),
        ("gen_loss", parts.gen_loss),
        ("l_l1", parts.l_l1),
        ("l_task", parts.l_task),
        ("gp", parts.gp),
    ] {
        if !v.is_finite() {
            return Err(ObjError::NonFinite { term });
        }
    }
    let total_g = parts.gen_loss + weights.alpha * parts.l_l1 + weights.beta * parts.l_task;
    let total_d = parts.critic_loss + parts.gp;
    for (term, v) in [("total_g", total_g), ("total_d", total_d)] {
        if !v.is_finite() {
            return Err(ObjError::NonFinite { term });
        }
    }
    Ok(LossBreakdown {
        l_gan: parts.critic_loss,
        l_l1: parts.l_l1,
        l_task: parts.l_task,
        gp: parts.gp,
        total_g,
        total_d,
    })
}

fn check_scores<S: Scalar>(
    tape: &Tape<S>,
    d_real: NodeId,
    d_fake: NodeId,
) -> Result<(), ObjError> {
    let (sr, sf) = (tape.shape(d_real), tape.shape(d_fake));
    if sr.len() != 1 || sf.len() != 1 {
        return Err(ObjError::ShapeMismatch {
            left: sr.to_vec(),
            right: sf.to_vec(),
        });
    }
    if sr[0] != sf[0] {
        return Err(ObjError::BatchMismatch {
            left: sr[0],
            right: sf[0],
        });
    }
    Ok(())
}

/// Adversarial losses from per-sample critic scores.
///
/// Returns `(critic_loss, gen_loss)`: the critic minimizes
/// `mean(scores_fake) - mean(scores_real)`, the generator minimizes
/// `-mean(scores_fake)`.
pub fn loss_gan<S: Scalar>(
    tape: &mut Tape<S>,
    d_real: NodeId,
    d_fake: NodeId,
) -> Result<(NodeId, NodeId), ObjError> {
    check_scores(tape, d_real, d_fake)?;
    let mf = tape.mean(d_fake)?;
    let mr = tape.mean(d_real)?;
    let critic = tape.sub(mf, mr)?;
    let gen = tape.neg(mf);
    Ok((critic, gen))
}

/// Mean absolute voxel difference.
pub fn loss_l1<S: Scalar>(tape: &mut Tape<S>, x: NodeId, x_hat: NodeId) -> Result<NodeId, ObjError> {
    if tape.shape(x) != tape.shape(x_hat) {
        return Err(ObjError::ShapeMismatch {
            left: tape.shape(x).to_vec(),
            right: tape.shape(x_hat).to_vec(),
        });
    }
    let d = tape.sub(x, x_hat)?;
    let a = tape.abs(d);
    tape.mean(a).map_err(Into::into)
}

/// Mean squared error between predicted and true ages.
pub fn loss_task<S: Scalar>(
    tape: &mut Tape<S>,
    y_true: NodeId,
    y_pred: NodeId,
) -> Result<NodeId, ObjError> {
    check_scores(tape, y_true, y_pred)?;
    let d = tape.sub(y_pred, y_true)?;
    let sq = tape.mul(d, d)?;
    tape.mean(sq).map_err(Into::into)
}

/// Penalizes the critic's input-gradient norm away from 1 on random
/// per-sample mixes of real and fake volumes.
///
/// `t` holds one mixing coefficient in `[0,1]` per sample; the mix
/// `t*real + (1-t)*fake` enters the critic as a fresh leaf, so the penalty
/// backpropagates into critic parameters only. The critic's input gradient
/// is built as tape nodes by an inner backward pass, which is what lets the
/// penalty itself be differentiated.
pub fn gradient_penalty<S, F>(
    tape: &mut Tape<S>,
    x_real: NodeId,
    x_fake: NodeId,
    t: &[S],
    gp_lambda: S,
    mut critic: F,
) -> Result<NodeId, ObjError>
where
    S: Scalar,
    F: FnMut(&mut Tape<S>, NodeId) -> Result<NodeId, ObjError>,
{
    let shape = tape.shape(x_real).to_vec();
    if shape != tape.shape(x_fake) {
        return Err(ObjError::ShapeMismatch {
            left: shape,
            right: tape.shape(x_fake).to_vec(),
        });
    }
    let n = *shape.first().ok_or_else(|| ObjError::BadMix("empty shape".into()))?;
    if t.len() != n {
        return Err(ObjError::BadMix(format!(
            "need {n} coefficients, got {}",
            t.len()
        )));
    }
    if let Some(bad) = t.iter().find(|v| !(S::zero()..=S::one()).contains(v)) {
        return Err(ObjError::BadMix(format!("coefficient {bad} outside [0,1]")));
    }

    let per_sample: usize = shape[1..].iter().product();
    let real = tape.values(x_real).to_vec();
    let fake = tape.values(x_fake).to_vec();
    let mixed: Vec<S> = (0..real.len())
        .map(|i| {
            let ti = t[i / per_sample];
            ti * real[i] + (S::one() - ti) * fake[i]
        })
        .collect();
    let xt = tape.leaf_from(&shape, &mixed, true);

    let scores = critic(tape, xt)?;
    if tape.shape(scores) != [n] {
        return Err(ObjError::BatchMismatch {
            left: n,
            right: tape.values(scores).len(),
        });
    }
    let root = tape.sum_all(scores);
    let grads = tape.backward_graph(root, &[xt])?;
    let g = match grads.grad_of(xt) {
        Some(g) => g,
        // A critic that ignores its input has zero gradient everywhere.
        None => tape.leaf_from(&shape, &vec![S::zero(); mixed.len()], false),
    };
    let sq = tape.mul(g, g)?;
    let ssq = tape.sum_per_sample(sq)?;
    let eased = tape.offset(ssq, S::lit(1e-12));
    let norm = tape.sqrt(eased);
    let dev = tape.offset(norm, -S::one());
    let dev2 = tape.mul(dev, dev)?;
    let m = tape.mean(dev2)?;
    Ok(tape.scale(m, gp_lambda))
}

/// Generator-side total: `gen_loss + alpha*l_l1 + beta*l_task`.
///
/// With `beta = 0` the task term is scaled to zero, so no gradient reaches
/// the regressor through this objective.
pub fn compose_generator_objective<S: Scalar>(
    tape: &mut Tape<S>,
    weights: &LossWeights<S>,
    gen_loss: NodeId,
    l_l1: NodeId,
    l_task: NodeId,
) -> Result<NodeId, ObjError> {
    let a = tape.scale(l_l1, weights.alpha);
    let b = tape.scale(l_task, weights.beta);
    let ab = tape.add(a, b)?;
    tape.add(gen_loss, ab).map_err(Into::into)
}

/// Critic-side total: `critic_loss + gp`.
pub fn compose_critic_objective<S: Scalar>(
    tape: &mut Tape<S>,
    critic_loss: NodeId,
    gp: NodeId,
) -> Result<NodeId, ObjError> {
    tape.add(critic_loss, gp).map_err(Into::into)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn weight_defaults_and_validation() {
        let w = LossWeights::<f64>::default();
        assert_eq!((w.alpha, w.beta, w.gp_lambda), (10.0, 0.1, 10.0));
        w.validate().unwrap();
        let bad = LossWeights { alpha: -1.0, ..w };
        assert!(matches!(
            bad.validate(),
            Err(ObjError::NonFinite { term: "alpha" })
        ));
    }

    #[test]
    fn csv_row_matches_header() {
        let b = LossBreakdown {
            l_gan: -0.5f64,
            l_l1: 0.25,
            l_task: 4.0,
            gp: 1.5,
            total_g: 2.6,
            total_d: 1.0,
        };
        assert_eq!(
            LossBreakdown::<f64>::csv_header().split(',').count(),
            b.csv_row(3).split(',').count()
        );
        assert_eq!(b.csv_row(3), "3,-0.5,1.5,0.25,4,2.6,1");
    }
}
