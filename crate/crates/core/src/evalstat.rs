//! Prediction metrics, per-age-group breakdowns, the Wilcoxon
//! signed-rank test, and cohort-average difference maps.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use statrs::distribution::{ContinuousCDF, Normal};
use thiserror::Error;

use crate::diffgrid::Tape;
use crate::latentsynth::SynthesisSource;
use crate::nets::{clamp_unit, NetError};
use crate::phantom::{Dataset, PhanError, Provenance, Sample, Split, Volume};
use crate::scalar::Scalar;
use crate::trainer::Prediction;

/// Largest pair count handled by the exact sign-assignment distribution;
/// larger inputs fall back to the normal approximation.
pub const WILCOXON_EXACT_LIMIT: usize = 20;

/// Cohort membership window around a target age, in years.
pub const COHORT_HALF_WIDTH: f64 = 0.5;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("no predictions to summarize")]
    Empty,
    #[error("prediction {0:?} has no sample in the dataset")]
    UnknownId(String),
    #[error("paired inputs differ in length: {a} vs {b}")]
    LengthMismatch { a: usize, b: usize },
    #[error("{n} nonzero pairs after dropping ties, need at least 5")]
    InsufficientPairs { n: usize },
    #[error("cohort near age {age}: {available} test samples within half a year, need {needed}")]
    CohortShort {
        age: f64,
        available: usize,
        needed: usize,
    },
    #[error("cohort size must be positive")]
    ZeroCohort,
    #[error("generator has no recorded training")]
    Untrained,
    #[error("non-finite {0}")]
    NonFinite(&'static str),
    #[error("axis {0} out of range, volume axes are 0..3")]
    BadAxis(usize),
    #[error("slice {index} out of range for axis {axis} of extent {extent}")]
    BadSlice {
        axis: usize,
        index: usize,
        extent: usize,
    },
    #[error("volume: {0}")]
    Volume(#[from] PhanError),
    #[error("net: {0}")]
    Net(#[from] NetError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

/// Mean and population standard deviation of one error series.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricSummary {
    pub mean: f64,
    pub std: f64,
}

impl MetricSummary {
    fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        Self {
            mean,
            std: var.sqrt(),
        }
    }
}

impl fmt::Display for MetricSummary {
    /// Renders as `mean ± std` with four decimals, e.g. `5.1922 ± 9.0424`.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.4} ± {:.4}", self.mean, self.std)
    }
}

/// Global squared- and absolute-error summaries over one prediction set.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub n: usize,
    pub mse: MetricSummary,
    pub mae: MetricSummary,
}

/// Summarizes per-sample squared and absolute errors.
pub fn mse_mae(predictions: &[Prediction]) -> Result<MetricReport, EvalError> {
    if predictions.is_empty() {
        return Err(EvalError::Empty);
    }
    let mut sq = Vec::with_capacity(predictions.len());
    let mut ab = Vec::with_capacity(predictions.len());
    for p in predictions {
        let e = p.age_pred - p.age_true;
        if !e.is_finite() {
            return Err(EvalError::NonFinite("prediction error"));
        }
        sq.push(e * e);
        ab.push(e.abs());
    }
    let report = MetricReport {
        n: predictions.len(),
        mse: MetricSummary::of(&sq),
        mae: MetricSummary::of(&ab),
    };
    debug_assert!(report.mae.mean <= report.mse.mean.sqrt() + 1e-12);
    Ok(report)
}

/// Error summaries for one 1-year age group `[year, year + 1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupMetrics {
    /// Lower bound of the group's half-open age interval.
    pub year: i64,
    pub n_train_real: usize,
    pub n_test: usize,
    pub mse: MetricSummary,
    pub mae: MetricSummary,
}

impl GroupMetrics {
    pub fn label(&self) -> String {
        format!("{}-{}", self.year, self.year + 1)
    }
}

/// Per-group metrics plus the groups that had no test predictions.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupBreakdown {
    pub groups: Vec<GroupMetrics>,
    /// Years with real training samples but no test predictions; they get
    /// no metrics row.
    pub empty_bins: Vec<i64>,
}

/// Splits predictions into 1-year age groups by the true age recorded in
/// the dataset and summarizes each group.
pub fn group_breakdown<S: Scalar>(
    predictions: &[Prediction],
    dataset: &Dataset<S>,
) -> Result<GroupBreakdown, EvalError> {
    let by_id: HashMap<&str, &Sample<S>> = dataset
        .samples
        .iter()
        .map(|s| (s.id.as_str(), s))
        .collect();
    let mut bins: BTreeMap<i64, Vec<&Prediction>> = BTreeMap::new();
    for p in predictions {
        let s = by_id
            .get(p.id.as_str())
            .ok_or_else(|| EvalError::UnknownId(p.id.clone()))?;
        bins.entry(s.age.floor() as i64).or_default().push(p);
    }
    let mut train_counts: BTreeMap<i64, usize> = BTreeMap::new();
    for s in &dataset.samples {
        if s.split == Split::Train && s.provenance == Provenance::Real {
            *train_counts.entry(s.age.floor() as i64).or_insert(0) += 1;
        }
    }

    let years: BTreeSet<i64> = bins.keys().chain(train_counts.keys()).copied().collect();
    let mut groups = Vec::new();
    let mut empty_bins = Vec::new();
    for year in years {
        match bins.get(&year) {
            Some(preds) => {
                let sq: Vec<f64> = preds
                    .iter()
                    .map(|p| (p.age_pred - p.age_true) * (p.age_pred - p.age_true))
                    .collect();
                let ab: Vec<f64> = preds.iter().map(|p| (p.age_pred - p.age_true).abs()).collect();
                groups.push(GroupMetrics {
                    year,
                    n_train_real: train_counts.get(&year).copied().unwrap_or(0),
                    n_test: preds.len(),
                    mse: MetricSummary::of(&sq),
                    mae: MetricSummary::of(&ab),
                });
            }
            None => empty_bins.push(year),
        }
    }
    Ok(GroupBreakdown { groups, empty_bins })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WilcoxonMethod {
    /// Exact distribution up to [`WILCOXON_EXACT_LIMIT`] pairs, normal
    /// approximation beyond.
    Auto,
    Exact,
    Normal,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WilcoxonResult {
    /// Smaller of the positive and negative rank sums.
    pub w: f64,
    /// Two-sided p-value.
    pub p: f64,
    /// Pairs remaining after zero differences are dropped.
    pub n: usize,
    pub exact: bool,
}

/// Two-sided Wilcoxon signed-rank test on paired error series.
///
/// Zero differences are dropped and tied absolute differences share
/// average ranks. The exact p-value weights all sign assignments
/// equally; the normal approximation applies the tie and continuity
/// corrections.
pub fn wilcoxon_signed_rank(a: &[f64], b: &[f64]) -> Result<WilcoxonResult, EvalError> {
    wilcoxon_signed_rank_with(a, b, WilcoxonMethod::Auto)
}

/// [`wilcoxon_signed_rank`] with the method forced, for calibration.
pub fn wilcoxon_signed_rank_with(
    a: &[f64],
    b: &[f64],
    method: WilcoxonMethod,
) -> Result<WilcoxonResult, EvalError> {
    if a.len() != b.len() {
        return Err(EvalError::LengthMismatch {
            a: a.len(),
            b: b.len(),
        });
    }
    let mut diffs = Vec::with_capacity(a.len());
    for (&x, &y) in a.iter().zip(b) {
        let d = x - y;
        if !d.is_finite() {
            return Err(EvalError::NonFinite("difference"));
        }
        if d != 0.0 {
            diffs.push(d);
        }
    }
    let n = diffs.len();
    if n < 5 {
        return Err(EvalError::InsufficientPairs { n });
    }

    let (ranks, ties) = signed_ranks(&diffs);
    let w_plus: f64 = ranks
        .iter()
        .zip(&diffs)
        .filter(|&(_, &d)| d > 0.0)
        .map(|(&r, _)| r)
        .sum();
    let total = (n * (n + 1)) as f64 / 2.0;
    let w = w_plus.min(total - w_plus);

    let exact = match method {
        WilcoxonMethod::Auto => n <= WILCOXON_EXACT_LIMIT,
        WilcoxonMethod::Exact => true,
        WilcoxonMethod::Normal => false,
    };
    let p = if exact {
        exact_p(&ranks, (2.0 * w).round() as u64)
    } else {
        normal_p(n, &ties, w)
    };
    Ok(WilcoxonResult { w, p, n, exact })
}

/// Average ranks of `|d|` aligned to `diffs`, plus tie-group sizes.
fn signed_ranks(diffs: &[f64]) -> (Vec<f64>, Vec<usize>) {
    let n = diffs.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| diffs[i].abs().partial_cmp(&diffs[j].abs()).unwrap());
    let mut ranks = vec![0.0; n];
    let mut ties = Vec::new();
    let mut i = 0;
    while i < n {
        let mut j = i + 1;
        while j < n && diffs[order[j]].abs() == diffs[order[i]].abs() {
            j += 1;
        }
        // Positions i+1 ..= j share their average rank.
        let avg = (i + 1 + j) as f64 / 2.0;
        for &k in &order[i..j] {
            ranks[k] = avg;
        }
        ties.push(j - i);
        i = j;
    }
    (ranks, ties)
}

/// Exact two-sided p over all equally likely sign assignments.
///
/// Works on doubled ranks so ties (half-integer ranks) stay integral.
/// The subset-sum table counts how many assignments reach each positive
/// rank sum; the p-value is the mass with min(sum, total - sum) at or
/// below the observed doubled statistic.
fn exact_p(ranks: &[f64], w2_obs: u64) -> f64 {
    let doubled: Vec<usize> = ranks.iter().map(|&r| (2.0 * r).round() as usize).collect();
    let t2: usize = doubled.iter().sum();
    let mut count = vec![0u128; t2 + 1];
    count[0] = 1;
    for &r2 in &doubled {
        for s in (r2..=t2).rev() {
            count[s] += count[s - r2];
        }
    }
    let favorable: u128 = count
        .iter()
        .enumerate()
        .filter(|&(s, _)| (s as u64).min((t2 - s) as u64) <= w2_obs)
        .map(|(_, &c)| c)
        .sum();
    favorable as f64 / 2f64.powi(ranks.len() as i32)
}

/// Normal approximation with tie and continuity corrections.
fn normal_p(n: usize, ties: &[usize], w: f64) -> f64 {
    let nf = n as f64;
    let mu = nf * (nf + 1.0) / 4.0;
    let tie_term: f64 = ties
        .iter()
        .map(|&t| {
            let t = t as f64;
            t * t * t - t
        })
        .sum::<f64>()
        / 48.0;
    let sigma = (nf * (nf + 1.0) * (2.0 * nf + 1.0) / 24.0 - tie_term).sqrt();
    // w is the smaller rank sum, so it sits at or below the mean and the
    // continuity correction moves it half a step up.
    let z = (w - mu + 0.5) / sigma;
    let std_normal = Normal::new(0.0, 1.0).expect("unit normal");
    (2.0 * std_normal.cdf(z)).min(1.0)
}

/// Where cohort volumes come from: stored data or generator output.
pub enum DiffSource<'a, S> {
    Real,
    Reconstructed(&'a SynthesisSource<S>),
}

/// Mean intensity inside and outside a spherical region of a map.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RegionContrast {
    pub mean_in: f64,
    pub mean_out: f64,
    /// `mean_in / mean_out`; infinite when the outside mean is zero.
    pub ratio: f64,
}

/// Voxelwise absolute difference between two cohort-average volumes.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffMap {
    pub volume: Volume<f64>,
    pub age_lo: f64,
    pub age_hi: f64,
    /// Samples averaged per cohort.
    pub n_per_cohort: usize,
    pub peak_value: f64,
    pub peak_index: [usize; 3],
    /// Split the cohorts were drawn from.
    pub split_used: Split,
}

impl DiffMap {
    /// Whether the peak voxel lies within `radius` of `center`.
    pub fn peak_in_region(&self, center: [usize; 3], radius: f64) -> bool {
        let d2: f64 = self
            .peak_index
            .iter()
            .zip(&center)
            .map(|(&p, &c)| {
                let d = p as f64 - c as f64;
                d * d
            })
            .sum();
        d2 <= radius * radius
    }

    /// Mean map intensity inside vs outside the spherical region.
    pub fn region_contrast(&self, center: [usize; 3], radius: f64) -> RegionContrast {
        let d = self.volume.dims;
        let r2 = radius * radius;
        let (mut sum_in, mut n_in) = (0.0, 0usize);
        let (mut sum_out, mut n_out) = (0.0, 0usize);
        for x in 0..d[0] {
            for y in 0..d[1] {
                for z in 0..d[2] {
                    let dist2: f64 = [x, y, z]
                        .iter()
                        .zip(&center)
                        .map(|(&p, &c)| {
                            let dd = p as f64 - c as f64;
                            dd * dd
                        })
                        .sum();
                    let v = self.volume.values[(x * d[1] + y) * d[2] + z];
                    if dist2 <= r2 {
                        sum_in += v;
                        n_in += 1;
                    } else {
                        sum_out += v;
                        n_out += 1;
                    }
                }
            }
        }
        let mean_in = sum_in / n_in.max(1) as f64;
        let mean_out = sum_out / n_out.max(1) as f64;
        let ratio = if mean_out == 0.0 {
            f64::INFINITY
        } else {
            mean_in / mean_out
        };
        RegionContrast {
            mean_in,
            mean_out,
            ratio,
        }
    }
}

/// Absolute difference of the average test volume near `age_lo` vs near
/// `age_hi`.
///
/// Each cohort takes the first `n_per_cohort` test samples within
/// [`COHORT_HALF_WIDTH`] of its target age, in dataset order. Real mode
/// averages stored volumes; reconstructed mode averages generator
/// outputs clamped to the unit range and requires a trained source.
pub fn avg_diff_map<S: Scalar>(
    source: DiffSource<'_, S>,
    dataset: &Dataset<S>,
    age_lo: f64,
    age_hi: f64,
    n_per_cohort: usize,
) -> Result<DiffMap, EvalError> {
    if n_per_cohort == 0 {
        return Err(EvalError::ZeroCohort);
    }
    if let DiffSource::Reconstructed(src) = &source {
        if src.trained_epochs == 0 {
            return Err(EvalError::Untrained);
        }
    }
    let lo = cohort_mean(&source, dataset, age_lo, n_per_cohort)?;
    let hi = cohort_mean(&source, dataset, age_hi, n_per_cohort)?;
    if lo.dims != hi.dims {
        return Err(EvalError::Volume(PhanError::Malformed(format!(
            "cohort dims differ: {:?} vs {:?}",
            lo.dims, hi.dims
        ))));
    }

    let values: Vec<f64> = lo
        .values
        .iter()
        .zip(&hi.values)
        .map(|(a, b)| (a - b).abs())
        .collect();
    let mut peak_value = 0.0;
    let mut peak_flat = 0usize;
    for (i, &v) in values.iter().enumerate() {
        if v > peak_value {
            peak_value = v;
            peak_flat = i;
        }
    }
    let d = lo.dims;
    let peak_index = [
        peak_flat / (d[1] * d[2]),
        (peak_flat / d[2]) % d[1],
        peak_flat % d[2],
    ];
    Ok(DiffMap {
        volume: Volume::new(d, values)?,
        age_lo,
        age_hi,
        n_per_cohort,
        peak_value,
        peak_index,
        split_used: Split::Test,
    })
}

fn cohort_mean<S: Scalar>(
    source: &DiffSource<'_, S>,
    dataset: &Dataset<S>,
    target: f64,
    n: usize,
) -> Result<Volume<f64>, EvalError> {
    let picks: Vec<&Sample<S>> = dataset
        .samples
        .iter()
        .filter(|s| s.split == Split::Test && (s.age - target).abs() <= COHORT_HALF_WIDTH)
        .collect();
    if picks.len() < n {
        return Err(EvalError::CohortShort {
            age: target,
            available: picks.len(),
            needed: n,
        });
    }
    let picks = &picks[..n];
    let dims = picks[0].volume.dims;
    let mut acc = vec![0.0f64; picks[0].volume.numel()];
    for s in picks {
        if s.volume.dims != dims {
            return Err(EvalError::Volume(PhanError::Malformed(format!(
                "sample {} dims {:?} differ from {:?}",
                s.id, s.volume.dims, dims
            ))));
        }
        match source {
            DiffSource::Real => {
                for (a, v) in acc.iter_mut().zip(&s.volume.values) {
                    *a += v.to_f64_lossy();
                }
            }
            DiffSource::Reconstructed(src) => {
                let g = &src.generator;
                let side = g.cfg.input_side;
                if dims != [side; 3] {
                    return Err(EvalError::Volume(PhanError::Malformed(format!(
                        "sample {} dims {dims:?}, generator expects {:?}",
                        s.id,
                        [side; 3]
                    ))));
                }
                let mut tape = Tape::new();
                let enc = g.enc.bind_const(&mut tape);
                let dec = g.dec.bind_const(&mut tape);
                let x = tape.leaf_from(&[1, 1, side, side, side], &s.volume.values, false);
                let out = g.generate(&mut tape, &enc, &dec, x)?;
                let mut recon = tape.values(out).to_vec();
                clamp_unit(&mut recon);
                for (a, v) in acc.iter_mut().zip(&recon) {
                    *a += v.to_f64_lossy();
                }
            }
        }
    }
    for a in &mut acc {
        *a /= n as f64;
    }
    Ok(Volume::new(dims, acc)?)
}

/// Writes one `metrics.csv` row per arm.
pub fn write_metrics_csv(path: &Path, rows: &[(&str, &MetricReport)]) -> Result<(), EvalError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["arm", "n", "mse_mean", "mse_std", "mae_mean", "mae_std"])?;
    for (arm, r) in rows {
        w.write_record([
            arm.to_string(),
            r.n.to_string(),
            r.mse.mean.to_string(),
            r.mse.std.to_string(),
            r.mae.mean.to_string(),
            r.mae.std.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Writes one `groups.csv` row per arm and populated age group.
pub fn write_groups_csv(path: &Path, rows: &[(&str, &GroupBreakdown)]) -> Result<(), EvalError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "arm",
        "group",
        "n_train_real",
        "n_test",
        "mse_mean",
        "mse_std",
        "mae_mean",
        "mae_std",
    ])?;
    for (arm, b) in rows {
        for g in &b.groups {
            w.write_record([
                arm.to_string(),
                g.label(),
                g.n_train_real.to_string(),
                g.n_test.to_string(),
                g.mse.mean.to_string(),
                g.mse.std.to_string(),
                g.mae.mean.to_string(),
                g.mae.std.to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Writes one `wilcoxon.csv` row per arm pair.
pub fn write_wilcoxon_csv(
    path: &Path,
    rows: &[(&str, &str, &WilcoxonResult)],
) -> Result<(), EvalError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["arm_a", "arm_b", "n", "w", "p", "exact"])?;
    for (a, b, r) in rows {
        w.write_record([
            a.to_string(),
            b.to_string(),
            r.n.to_string(),
            r.w.to_string(),
            r.p.to_string(),
            r.exact.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Writes one axis-aligned slice as a binary 8-bit PGM.
///
/// Intensities scale linearly by the volume's maximum, recorded in a
/// `# max=` header comment so absolute values can be recovered. Rows run
/// along the lower remaining axis and columns along the higher one.
pub fn write_pgm_slice(
    path: &Path,
    vol: &Volume<f64>,
    axis: usize,
    index: usize,
) -> Result<(), EvalError> {
    if axis >= 3 {
        return Err(EvalError::BadAxis(axis));
    }
    if index >= vol.dims[axis] {
        return Err(EvalError::BadSlice {
            axis,
            index,
            extent: vol.dims[axis],
        });
    }
    let max = vol.values.iter().cloned().fold(0.0f64, f64::max);
    if !max.is_finite() {
        return Err(EvalError::NonFinite("volume maximum"));
    }
    let [rows_axis, cols_axis] = match axis {
        0 => [1, 2],
        1 => [0, 2],
        _ => [0, 1],
    };
    let (rows, cols) = (vol.dims[rows_axis], vol.dims[cols_axis]);
    let d = vol.dims;
    let mut body = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            let mut p = [0usize; 3];
            p[axis] = index;
            p[rows_axis] = r;
            p[cols_axis] = c;
            let v = vol.values[(p[0] * d[1] + p[1]) * d[2] + p[2]];
            let scaled = if max > 0.0 { v / max * 255.0 } else { 0.0 };
            body.push(scaled.round().clamp(0.0, 255.0) as u8);
        }
    }
    let mut w = BufWriter::new(File::create(path)?);
    write!(w, "P5\n# max={max}\n{cols} {rows}\n255\n")?;
    w.write_all(&body)?;
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pred(id: &str, age_true: f64, age_pred: f64) -> Prediction {
        Prediction {
            id: id.to_string(),
            age_true,
            age_pred,
        }
    }

    #[test]
    fn summary_formats_like_the_reference_table() {
        let s = MetricSummary {
            mean: 5.1922,
            std: 9.0424,
        };
        assert_eq!(s.to_string(), "5.1922 ± 9.0424");
    }

    #[test]
    fn unit_errors_give_unit_metrics() {
        let preds = [pred("a", 9.0, 8.0), pred("b", 9.0, 10.0)];
        let r = mse_mae(&preds).unwrap();
        assert_eq!(r.mse.mean, 1.0);
        assert_eq!(r.mae.mean, 1.0);
        assert_eq!(r.mse.std, 0.0);

        let perfect = [pred("a", 9.0, 9.0), pred("b", 12.0, 12.0)];
        let r = mse_mae(&perfect).unwrap();
        assert_eq!(r.mse.mean, 0.0);
        assert_eq!(r.mae.mean, 0.0);
    }

    #[test]
    fn group_labels_span_one_year() {
        let g = GroupMetrics {
            year: 9,
            n_train_real: 0,
            n_test: 1,
            mse: MetricSummary { mean: 0.0, std: 0.0 },
            mae: MetricSummary { mean: 0.0, std: 0.0 },
        };
        assert_eq!(g.label(), "9-10");
    }
}
