//! Central-difference verification of tape gradients.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::tape::{NodeId, Tape};
use super::{DiffError, ParamSet, TapeBinding};

/// Settings for [`gradcheck`].
#[derive(Debug, Clone)]
pub struct GradCheckConfig {
    /// Finite-difference step.
    pub step: f64,
    /// Largest accepted relative error.
    pub tolerance: f64,
    /// Entries sampled per parameter block; blocks at or under this size are
    /// checked exhaustively.
    pub max_entries_per_block: usize,
    /// Seed for the entry sampler.
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-5,
            tolerance: 1e-4,
            max_entries_per_block: 12,
            seed: 0x5eed,
        }
    }
}

/// Outcome for one parameter block.
#[derive(Debug, Clone)]
pub struct GradCheckRow {
    pub name: String,
    /// Largest entry difference, relative to the gradient's global scale.
    pub max_rel_err: f64,
    pub pass: bool,
}

/// Outcome of a whole check.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub rows: Vec<GradCheckRow>,
    pub pass: bool,
}

/// Compares tape gradients of `loss` against central differences.
///
/// `loss` must rebuild the same computation on any tape it is handed; it is
/// re-evaluated twice per sampled entry with that entry nudged by
/// `cfg.step`. Per-entry differences are normalized by the gradient's
/// overall scale (the largest analytic or numeric magnitude seen anywhere,
/// with an absolute floor of `1e-4`), not entry by entry: on a deep relu
/// network near-zero entries sit next to kinks, and per-entry ratios there
/// measure subgradient bookkeeping rather than the engine. A defective
/// adjoint distorts gradients at their own magnitude and stays detectable
/// under this normalization.
///
/// Entries whose difference exceeds the tolerance are re-measured at steps
/// shrunk by 8x up to three times, keeping the smallest difference seen. A
/// finite step on a piecewise-smooth network occasionally carries a
/// pre-activation or a pooling argmax across its boundary (an early-layer
/// bias shifts every downstream pre-activation at once, so at the base
/// step a few crossings are near certain), and the centered quotient then
/// estimates a chord across two pieces, not the derivative the tape
/// reports. That discrepancy vanishes once the step no longer straddles
/// the boundary, while a wrong adjoint disagrees by the same amount at
/// every step, so taking the minimum cannot hide one. Callers should still
/// evaluate at generic parameter points (zero biases put dead maps exactly
/// on the kink).
pub fn gradcheck<F>(
    params: &mut ParamSet<f64>,
    cfg: &GradCheckConfig,
    mut loss: F,
) -> Result<GradCheckReport, DiffError>
where
    F: FnMut(&mut Tape<f64>, &TapeBinding) -> Result<NodeId, DiffError>,
{
    let analytic = {
        let mut tape = Tape::new();
        let binding = params.bind(&mut tape);
        let root = loss(&mut tape, &binding)?;
        let v = tape.scalar(root);
        if !v.is_finite() {
            return Err(DiffError::GradCheck(format!("loss is not finite: {v}")));
        }
        let grads = tape.backward(root)?;
        binding
            .ids
            .iter()
            .map(|&id| match grads.grad_of(id) {
                Some(gid) => tape.values(gid).to_vec(),
                None => vec![0.0; tape.values(id).len()],
            })
            .collect::<Vec<_>>()
    };

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let scale0 = analytic
        .iter()
        .flat_map(|g| g.iter())
        .fold(0.0f64, |m, a| m.max(a.abs()));
    // Refine to comfortably inside the tolerance, not just across it.
    let refine_above = 0.25 * cfg.tolerance * scale0.max(1e-4);
    let mut scale = scale0;
    let mut diffs = Vec::with_capacity(params.len());
    for bi in 0..params.len() {
        let len = params.blocks()[bi].value.values.len();
        let entries: Vec<usize> = if len <= cfg.max_entries_per_block {
            (0..len).collect()
        } else {
            rand::seq::index::sample(&mut rng, len, cfg.max_entries_per_block).into_vec()
        };
        let mut max_abs_diff = 0.0f64;
        for e in entries {
            let orig = params.blocks()[bi].value.values[e];
            let mut central = |h: f64, params: &mut ParamSet<f64>| -> Result<f64, DiffError> {
                let mut eval_at = |v: f64, params: &mut ParamSet<f64>| -> Result<f64, DiffError> {
                    params.blocks_mut()[bi].value.values[e] = v;
                    let mut tape = Tape::new();
                    let binding = params.bind(&mut tape);
                    let root = loss(&mut tape, &binding)?;
                    Ok(tape.scalar(root))
                };
                let up = eval_at(orig + h, params)?;
                let down = eval_at(orig - h, params)?;
                Ok((up - down) / (2.0 * h))
            };
            let a = analytic[bi][e];
            let mut h = cfg.step;
            let mut numeric = central(h, params)?;
            let mut diff = (a - numeric).abs();
            for _ in 0..3 {
                if diff < refine_above {
                    break;
                }
                h /= 8.0;
                let refined = central(h, params)?;
                let refined_diff = (a - refined).abs();
                if refined_diff < diff {
                    numeric = refined;
                    diff = refined_diff;
                }
            }
            params.blocks_mut()[bi].value.values[e] = orig;
            max_abs_diff = max_abs_diff.max(diff);
            scale = scale.max(numeric.abs());
        }
        diffs.push(max_abs_diff);
    }
    let denom = scale.max(1e-4);
    let rows: Vec<GradCheckRow> = params
        .blocks()
        .iter()
        .zip(diffs)
        .map(|(b, d)| GradCheckRow {
            name: b.name.clone(),
            max_rel_err: d / denom,
            pass: d / denom < cfg.tolerance,
        })
        .collect();
    let pass = rows.iter().all(|r| r.pass);
    Ok(GradCheckReport { rows, pass })
}
