use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tgb_core::evalstat::{
    avg_diff_map, group_breakdown, mse_mae, wilcoxon_signed_rank, wilcoxon_signed_rank_with,
    write_groups_csv, write_metrics_csv, write_pgm_slice, write_wilcoxon_csv, DiffSource,
    EvalError, WilcoxonMethod,
};
use tgb_core::latentsynth::SynthesisSource;
use tgb_core::nets::{ArchConfig, Generator};
use tgb_core::phantom::{
    generate_phantom, Dataset, PhantomSpec, Provenance, Sample, Split, Volume,
};
use tgb_core::trainer::Prediction;

fn pred(id: &str, age_true: f64, age_pred: f64) -> Prediction {
    Prediction {
        id: id.to_string(),
        age_true,
        age_pred,
    }
}

fn flat_sample(id: &str, age: f64, split: Split, dims: [usize; 3], level: f64) -> Sample<f64> {
    Sample {
        id: id.to_string(),
        volume: Volume::new(dims, vec![level; dims.iter().product()]).unwrap(),
        age,
        sex_analog: 0,
        split,
        provenance: Provenance::Real,
    }
}

#[test]
fn metrics_use_the_population_standard_deviation() {
    // Errors 1 and 3: squared errors {1, 9}, absolute errors {1, 3}.
    let preds = [pred("a", 10.0, 11.0), pred("b", 10.0, 13.0)];
    let r = mse_mae(&preds).unwrap();
    assert_eq!(r.n, 2);
    assert_eq!(r.mse.mean, 5.0);
    assert_eq!(r.mse.std, 4.0);
    assert_eq!(r.mae.mean, 2.0);
    assert_eq!(r.mae.std, 1.0);
    assert_eq!(format!("{}", r.mse), "5.0000 ± 4.0000");
}

#[test]
fn mae_never_exceeds_the_root_of_mse() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..200 {
        let n = rng.gen_range(1..40);
        let preds: Vec<Prediction> = (0..n)
            .map(|k| {
                let t = rng.gen_range(6.0..24.0);
                pred(&format!("s{k}"), t, t + rng.gen_range(-8.0..8.0))
            })
            .collect();
        let r = mse_mae(&preds).unwrap();
        assert!(r.mae.mean <= r.mse.mean.sqrt() + 1e-12);
        assert!(r.mse.std >= 0.0 && r.mae.std >= 0.0);
    }
}

#[test]
fn degenerate_prediction_sets_are_rejected() {
    assert!(matches!(mse_mae(&[]), Err(EvalError::Empty)));
    let bad = [pred("a", 10.0, f64::NAN)];
    assert!(matches!(mse_mae(&bad), Err(EvalError::NonFinite(_))));
}

#[test]
fn groups_are_half_open_one_year_bins() {
    let dims = [8, 8, 8];
    let ds = Dataset {
        samples: vec![
            flat_sample("t0", 6.999, Split::Test, dims, 0.5),
            flat_sample("t1", 7.0, Split::Test, dims, 0.5),
            flat_sample("t2", 7.9, Split::Test, dims, 0.5),
            flat_sample("r0", 7.3, Split::Train, dims, 0.5),
            flat_sample("r1", 7.6, Split::Train, dims, 0.5),
            flat_sample("v0", 7.2, Split::Val, dims, 0.5),
            Sample {
                provenance: Provenance::Synthetic,
                ..flat_sample("syn0", 7.5, Split::Train, dims, 0.5)
            },
        ],
    };
    let preds = [
        pred("t0", 6.999, 7.5),
        pred("t1", 7.0, 7.5),
        pred("t2", 7.9, 7.5),
    ];
    let b = group_breakdown(&preds, &ds).unwrap();
    assert_eq!(b.groups.len(), 2);
    assert_eq!(b.groups[0].year, 6);
    assert_eq!(b.groups[0].n_test, 1);
    assert_eq!(b.groups[0].n_train_real, 0);
    assert_eq!(b.groups[1].year, 7);
    assert_eq!(b.groups[1].label(), "7-8");
    assert_eq!(b.groups[1].n_test, 2);
    // Real training samples only: the synthetic and the val sample do
    // not count.
    assert_eq!(b.groups[1].n_train_real, 2);
    assert!(b.empty_bins.is_empty());
}

#[test]
fn group_means_recombine_to_the_global_mean() {
    let dims = [8, 8, 8];
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut samples = Vec::new();
    let mut preds = Vec::new();
    for k in 0..60 {
        let age = rng.gen_range(6.0..24.0);
        let id = format!("t{k}");
        samples.push(flat_sample(&id, age, Split::Test, dims, 0.5));
        preds.push(pred(&id, age, age + rng.gen_range(-5.0..5.0)));
    }
    let ds = Dataset { samples };
    let breakdown = group_breakdown(&preds, &ds).unwrap();
    let global = mse_mae(&preds).unwrap();

    let n_total: usize = breakdown.groups.iter().map(|g| g.n_test).sum();
    assert_eq!(n_total, 60);
    let weighted_mse: f64 = breakdown
        .groups
        .iter()
        .map(|g| g.n_test as f64 * g.mse.mean)
        .sum::<f64>()
        / n_total as f64;
    let weighted_mae: f64 = breakdown
        .groups
        .iter()
        .map(|g| g.n_test as f64 * g.mae.mean)
        .sum::<f64>()
        / n_total as f64;
    assert!((weighted_mse - global.mse.mean).abs() < 1e-12);
    assert!((weighted_mae - global.mae.mean).abs() < 1e-12);
}

#[test]
fn unknown_prediction_ids_are_rejected() {
    let ds = Dataset {
        samples: vec![flat_sample("t0", 8.0, Split::Test, [8, 8, 8], 0.5)],
    };
    let preds = [pred("ghost", 8.0, 8.5)];
    assert!(matches!(
        group_breakdown(&preds, &ds),
        Err(EvalError::UnknownId(id)) if id == "ghost"
    ));
}

#[test]
fn bins_without_predictions_are_noted_and_omitted() {
    let dims = [8, 8, 8];
    let ds = Dataset {
        samples: vec![
            flat_sample("t0", 8.2, Split::Test, dims, 0.5),
            flat_sample("r0", 12.4, Split::Train, dims, 0.5),
            flat_sample("r1", 12.7, Split::Train, dims, 0.5),
        ],
    };
    let preds = [pred("t0", 8.2, 8.0)];
    let b = group_breakdown(&preds, &ds).unwrap();
    assert_eq!(b.groups.len(), 1);
    assert_eq!(b.groups[0].year, 8);
    assert_eq!(b.empty_bins, vec![12]);
}

/// Brute-force two-sided p: every one of the 2^n sign assignments is
/// equally likely under the null, and the observed statistic is the
/// smaller rank sum.
fn enumerate_p(diffs: &[f64]) -> (f64, f64) {
    let n = diffs.len();
    let mut sorted: Vec<f64> = diffs.iter().map(|d| d.abs()).collect();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let rank_of = |v: f64| -> f64 {
        let below = sorted.partition_point(|&x| x < v);
        let through = sorted.partition_point(|&x| x <= v);
        (below + 1 + through) as f64 / 2.0
    };
    let ranks: Vec<f64> = diffs.iter().map(|d| rank_of(d.abs())).collect();
    let total: f64 = ranks.iter().sum();
    let w_plus: f64 = ranks
        .iter()
        .zip(diffs)
        .filter(|&(_, &d)| d > 0.0)
        .map(|(&r, _)| r)
        .sum();
    let w_obs = w_plus.min(total - w_plus);

    let mut favorable = 0u64;
    for mask in 0u64..(1u64 << n) {
        let wp: f64 = (0..n).filter(|&i| mask >> i & 1 == 1).map(|i| ranks[i]).sum();
        if wp.min(total - wp) <= w_obs + 1e-9 {
            favorable += 1;
        }
    }
    (w_obs, favorable as f64 / (1u64 << n) as f64)
}

#[test]
fn five_positive_pairs_hit_the_reference_p() {
    let a = [1.2, 2.1, 0.8, 1.5, 3.0];
    let b = [0.0; 5];
    let r = wilcoxon_signed_rank(&a, &b).unwrap();
    assert_eq!(r.n, 5);
    assert_eq!(r.w, 0.0);
    assert!(r.exact);
    assert!((r.p - 0.0625).abs() < 1e-15);
}

#[test]
fn antisymmetric_differences_are_maximally_insignificant() {
    // The multiset of differences is closed under negation, so the
    // statistic sits exactly at its null center.
    let a = [1.0, -1.0, 2.0, -2.0, 3.0, -3.0];
    let b = [0.0; 6];
    let r = wilcoxon_signed_rank(&a, &b).unwrap();
    assert_eq!(r.p, 1.0);
}

#[test]
fn exact_p_matches_full_enumeration() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let grid = [0.5, 1.0, 1.5, 2.0, 2.5, 3.0];
    for case in 0..100 {
        let n = rng.gen_range(5..=15);
        // Draws from a coarse grid so tied magnitudes are common.
        let diffs: Vec<f64> = (0..n)
            .map(|_| {
                let mag = grid[rng.gen_range(0..grid.len())];
                if rng.gen::<bool>() {
                    mag
                } else {
                    -mag
                }
            })
            .collect();
        let zeros = vec![0.0; n];
        let r = wilcoxon_signed_rank(&diffs, &zeros).unwrap();
        let (w_ref, p_ref) = enumerate_p(&diffs);
        assert!(r.exact);
        assert!((r.w - w_ref).abs() < 1e-12, "case {case}: w {} vs {w_ref}", r.w);
        assert!((r.p - p_ref).abs() < 1e-12, "case {case}: p {} vs {p_ref}", r.p);
    }
}

#[test]
fn p_is_scale_invariant_and_in_range() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for _ in 0..50 {
        let n = rng.gen_range(5..=18);
        let a: Vec<f64> = (0..n).map(|_| rng.gen_range(-4.0..4.0)).collect();
        let b: Vec<f64> = (0..n).map(|_| rng.gen_range(-4.0..4.0)).collect();
        let r = match wilcoxon_signed_rank(&a, &b) {
            Ok(r) => r,
            Err(EvalError::InsufficientPairs { .. }) => continue,
            Err(e) => panic!("{e}"),
        };
        assert!(r.p > 0.0 && r.p <= 1.0);
        assert!(r.w >= 0.0 && r.w <= (r.n * (r.n + 1)) as f64 / 2.0);

        let scaled_a: Vec<f64> = a.iter().map(|v| 37.5 * v).collect();
        let scaled_b: Vec<f64> = b.iter().map(|v| 37.5 * v).collect();
        let s = wilcoxon_signed_rank(&scaled_a, &scaled_b).unwrap();
        assert_eq!(r.w, s.w);
        assert_eq!(r.p, s.p);
    }
}

#[test]
fn normal_approximation_tracks_the_exact_p() {
    // At 30 untied pairs the exact two-sided distribution is fine
    // enough for the corrected normal approximation to land within
    // 0.01 everywhere. The exact path here is the subset-sum table,
    // itself checked against brute-force enumeration above.
    let mut rng = ChaCha8Rng::seed_from_u64(30);
    for case in 0..20 {
        let n = 30;
        let diffs: Vec<f64> = (0..n).map(|_| rng.gen_range(-4.0..4.0)).collect();
        let zeros = vec![0.0; n];
        let exact = wilcoxon_signed_rank_with(&diffs, &zeros, WilcoxonMethod::Exact).unwrap();
        let normal = wilcoxon_signed_rank_with(&diffs, &zeros, WilcoxonMethod::Normal).unwrap();
        assert!(exact.exact && !normal.exact);
        assert_eq!(exact.w, normal.w);
        assert!(
            (exact.p - normal.p).abs() < 0.01,
            "case {case}: exact {} vs normal {}",
            exact.p,
            normal.p
        );
    }

    // Past the exact limit the default dispatch goes normal.
    let n = 30;
    let a: Vec<f64> = (0..n).map(|k| (k as f64 * 0.37).sin() * 3.0 + 0.4).collect();
    let b = vec![0.0; n];
    let r = wilcoxon_signed_rank(&a, &b).unwrap();
    assert!(!r.exact);
    assert!(r.p > 0.0 && r.p <= 1.0);
}

#[test]
fn degenerate_pairings_are_rejected() {
    assert!(matches!(
        wilcoxon_signed_rank(&[1.0, 2.0], &[0.0]),
        Err(EvalError::LengthMismatch { a: 2, b: 1 })
    ));
    // Six pairs, two of them exactly tied: four nonzero differences left.
    let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
    let b = [1.0, 2.0, 2.0, 3.0, 4.0, 5.0];
    assert!(matches!(
        wilcoxon_signed_rank(&a, &b),
        Err(EvalError::InsufficientPairs { n: 4 })
    ));
}

fn cohort_dataset(dims: [usize; 3]) -> Dataset<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut samples = Vec::new();
    for k in 0..6 {
        let mut s = flat_sample(&format!("lo{k}"), 7.8 + 0.07 * k as f64, Split::Test, dims, 0.0);
        s.volume.values.iter_mut().for_each(|v| *v = rng.gen());
        samples.push(s);
    }
    for k in 0..6 {
        let mut s = flat_sample(&format!("hi{k}"), 19.8 + 0.07 * k as f64, Split::Test, dims, 0.0);
        s.volume.values.iter_mut().for_each(|v| *v = rng.gen());
        samples.push(s);
    }
    Dataset { samples }
}

#[test]
fn identical_cohorts_produce_a_zero_map() {
    let dims = [6, 6, 6];
    let mut ds = cohort_dataset(dims);
    // Make every volume identical, so the cohort averages coincide.
    let reference = ds.samples[0].volume.values.clone();
    for s in &mut ds.samples {
        s.volume.values = reference.clone();
    }
    let map = avg_diff_map(DiffSource::Real, &ds, 8.0, 20.0, 6).unwrap();
    assert!(map.volume.values.iter().all(|&v| v == 0.0));
    assert_eq!(map.peak_value, 0.0);
    assert_eq!(map.split_used, Split::Test);
}

#[test]
fn diff_map_is_symmetric_in_cohort_order() {
    let ds = cohort_dataset([6, 6, 6]);
    let ab = avg_diff_map(DiffSource::Real, &ds, 8.0, 20.0, 6).unwrap();
    let ba = avg_diff_map(DiffSource::Real, &ds, 20.0, 8.0, 6).unwrap();
    assert_eq!(ab.volume, ba.volume);
    assert_eq!(ab.peak_value, ba.peak_value);
    assert_eq!(ab.peak_index, ba.peak_index);
}

#[test]
fn diff_map_localizes_a_planted_contrast() {
    let dims = [4, 5, 6];
    let mut ds = cohort_dataset(dims);
    for s in &mut ds.samples {
        s.volume.values = vec![0.2; dims.iter().product()];
        if s.id.starts_with("lo") {
            // One bright voxel at (2, 1, 3) in the young cohort only.
            s.volume.values[(2 * dims[1] + 1) * dims[2] + 3] = 0.9;
        }
    }
    let map = avg_diff_map(DiffSource::Real, &ds, 8.0, 20.0, 6).unwrap();
    assert_eq!(map.peak_index, [2, 1, 3]);
    assert!((map.peak_value - 0.7).abs() < 1e-12);
    assert_eq!(map.n_per_cohort, 6);
    let elsewhere = map
        .volume
        .values
        .iter()
        .filter(|&&v| v != map.peak_value)
        .all(|&v| v == 0.0);
    assert!(elsewhere);
    assert!(map.peak_in_region([2, 1, 3], 0.5));
    assert!(!map.peak_in_region([0, 0, 0], 2.0));
    let contrast = map.region_contrast([2, 1, 3], 0.5);
    assert!(contrast.ratio > 100.0);
}

#[test]
fn short_cohorts_report_their_counts() {
    let ds = cohort_dataset([6, 6, 6]);
    match avg_diff_map(DiffSource::Real, &ds, 8.0, 20.0, 7) {
        Err(EvalError::CohortShort {
            age,
            available,
            needed,
        }) => {
            assert_eq!(age, 8.0);
            assert_eq!(available, 6);
            assert_eq!(needed, 7);
        }
        other => panic!("expected cohort shortfall, got {other:?}"),
    }
    assert!(matches!(
        avg_diff_map(DiffSource::Real, &ds, 8.0, 20.0, 0),
        Err(EvalError::ZeroCohort)
    ));
    // Nothing near age 14 at all.
    match avg_diff_map(DiffSource::Real, &ds, 14.0, 20.0, 1) {
        Err(EvalError::CohortShort { available: 0, .. }) => {}
        other => panic!("expected empty cohort, got {other:?}"),
    }
}

#[test]
fn real_phantom_difference_peaks_in_the_age_region() {
    // Subjects only in the year groups around ages 8 and 20.
    let mut counts = vec![0usize; 18];
    counts[1] = 12;
    counts[2] = 12;
    counts[13] = 12;
    counts[14] = 12;
    let spec = PhantomSpec {
        group_counts: counts,
        ..Default::default()
    };
    let mut ds = generate_phantom::<f64>(&spec).unwrap();
    for s in &mut ds.samples {
        s.split = Split::Test;
    }
    let map = avg_diff_map(DiffSource::Real, &ds, 8.0, 20.0, 6).unwrap();
    assert!(
        map.peak_in_region(spec.region_center, spec.region_radius),
        "peak at {:?} outside the age-coding region",
        map.peak_index
    );
    // The planted contrast is 0.4 * 12/18 before per-volume rescaling.
    assert!(map.peak_value > 0.1 && map.peak_value < 0.4);
    let contrast = map.region_contrast(spec.region_center, spec.region_radius);
    assert!(
        contrast.ratio > 2.0,
        "in/out contrast {} too weak",
        contrast.ratio
    );
}

#[test]
fn reconstructed_mode_attests_generator_training() {
    let side = 32;
    let ds = cohort_dataset([side; 3]);
    let arch = ArchConfig::new(side, 1.0 / 64.0).unwrap();
    let fresh = SynthesisSource::new(Generator::<f64>::new(arch.clone(), 4).unwrap(), 0);
    assert!(matches!(
        avg_diff_map(DiffSource::Reconstructed(&fresh), &ds, 8.0, 20.0, 2),
        Err(EvalError::Untrained)
    ));

    let trained = SynthesisSource::new(Generator::<f64>::new(arch, 4).unwrap(), 1);
    let map = avg_diff_map(DiffSource::Reconstructed(&trained), &ds, 8.0, 20.0, 2).unwrap();
    assert_eq!(map.volume.dims, [side; 3]);
    assert!(map.volume.values.iter().all(|v| v.is_finite() && *v >= 0.0));
    // Reconstructions are clamped to the unit range first.
    assert!(map.peak_value <= 1.0);
}

#[test]
fn csv_writers_emit_documented_headers() {
    let dir = tempfile::tempdir().unwrap();
    let preds = [pred("a", 9.0, 8.0), pred("b", 9.0, 10.0)];
    let report = mse_mae(&preds).unwrap();
    let metrics_path = dir.path().join("metrics.csv");
    write_metrics_csv(&metrics_path, &[("REG", &report)]).unwrap();
    let text = std::fs::read_to_string(&metrics_path).unwrap();
    assert!(text.starts_with("arm,n,mse_mean,mse_std,mae_mean,mae_std"));
    assert_eq!(text.lines().count(), 2);
    assert!(text.lines().nth(1).unwrap().starts_with("REG,2,1,"));

    let ds = Dataset {
        samples: vec![
            flat_sample("a", 9.2, Split::Test, [8, 8, 8], 0.5),
            flat_sample("b", 9.4, Split::Test, [8, 8, 8], 0.5),
        ],
    };
    let breakdown = group_breakdown(&preds, &ds).unwrap();
    let groups_path = dir.path().join("groups.csv");
    write_groups_csv(&groups_path, &[("REG", &breakdown)]).unwrap();
    let text = std::fs::read_to_string(&groups_path).unwrap();
    assert!(text.starts_with("arm,group,n_train_real,n_test,mse_mean,mse_std,mae_mean,mae_std"));
    assert!(text.lines().nth(1).unwrap().starts_with("REG,9-10,0,2,"));

    let w = wilcoxon_signed_rank(&[1.0, 2.0, 3.0, 4.0, 5.0], &[0.0; 5]).unwrap();
    let wilcoxon_path = dir.path().join("wilcoxon.csv");
    write_wilcoxon_csv(&wilcoxon_path, &[("REG", "REG_GAN_TGB", &w)]).unwrap();
    let text = std::fs::read_to_string(&wilcoxon_path).unwrap();
    assert!(text.starts_with("arm_a,arm_b,n,w,p,exact"));
    assert!(text.contains("REG,REG_GAN_TGB,5,0,0.0625,true"));
}

#[test]
fn pgm_slices_scale_linearly_with_a_recorded_max() {
    let dims = [3, 4, 5];
    let values: Vec<f64> = (0..60).map(|i| i as f64 / 118.0).collect();
    let vol = Volume::new(dims, values).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("slice.pgm");
    write_pgm_slice(&path, &vol, 0, 1).unwrap();

    let bytes = std::fs::read(&path).unwrap();
    let header_end = bytes
        .windows(4)
        .position(|w| w == b"255\n")
        .map(|p| p + 4)
        .unwrap();
    let header = std::str::from_utf8(&bytes[..header_end]).unwrap();
    let mut lines = header.lines();
    assert_eq!(lines.next(), Some("P5"));
    let max_line = lines.next().unwrap();
    let max: f64 = max_line.strip_prefix("# max=").unwrap().parse().unwrap();
    assert_eq!(max, 59.0 / 118.0);
    // Slice of axis 0: rows along axis 1, columns along axis 2.
    assert_eq!(lines.next(), Some("5 4"));
    assert_eq!(lines.next(), Some("255"));

    let body = &bytes[header_end..];
    assert_eq!(body.len(), 20);
    for r in 0..4 {
        for c in 0..5 {
            let v = vol.values[(1 * dims[1] + r) * dims[2] + c];
            let expect = (v / max * 255.0).round() as u8;
            assert_eq!(body[r * 5 + c], expect, "pixel ({r},{c})");
        }
    }

    assert!(matches!(
        write_pgm_slice(&path, &vol, 3, 0),
        Err(EvalError::BadAxis(3))
    ));
    assert!(matches!(
        write_pgm_slice(&path, &vol, 1, 4),
        Err(EvalError::BadSlice {
            axis: 1,
            index: 4,
            extent: 4
        })
    ));
}
