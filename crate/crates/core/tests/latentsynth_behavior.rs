use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tgb_core::diffgrid::Tape;
use tgb_core::latentsynth::{
    balance_dataset, interpolate, mix_latents, read_manifest, sample_plan, write_manifest,
    BalancingPolicy, InterpolationPlan, ManifestRow, SynthError, SynthesisSource,
};
use tgb_core::nets::{clamp_unit, ArchConfig, Generator};
use tgb_core::phantom::{Dataset, Provenance, Sample, Split, Volume};

const SIDE: usize = 32;

/// Narrowest architecture the volume side admits, to keep decoding cheap.
fn thin_arch() -> ArchConfig {
    ArchConfig::new(SIDE, 1.0 / 64.0).unwrap()
}

fn unit_volume(seed: u64) -> Volume<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let values = (0..SIDE * SIDE * SIDE).map(|_| rng.gen::<f64>()).collect();
    Volume::new([SIDE; 3], values).unwrap()
}

fn sample(id: &str, age: f64, split: Split, seed: u64) -> Sample<f64> {
    Sample {
        id: id.to_string(),
        volume: unit_volume(seed),
        age,
        sex_analog: (seed % 2) as u8,
        split,
        provenance: Provenance::Real,
    }
}

/// Six training donors around age 8 plus held-out decoys at eligible ages.
fn donor_fixture() -> Dataset<f64> {
    let ages = [7.2, 7.6, 7.9, 8.1, 8.4, 8.8];
    let mut samples: Vec<Sample<f64>> = ages
        .iter()
        .enumerate()
        .map(|(k, &age)| sample(&format!("t{k}"), age, Split::Train, k as u64))
        .collect();
    samples.push(sample("v0", 8.0, Split::Val, 90));
    samples.push(sample("x0", 8.2, Split::Test, 91));
    Dataset { samples }
}

/// The donor pairs eligible for target 8.0 in `donor_fixture`: one donor
/// on each side of the target, both within a year of it, spread under a
/// year.
const ELIGIBLE_PAIRS: [(&str, &str); 6] = [
    ("t0", "t3"),
    ("t1", "t3"),
    ("t1", "t4"),
    ("t2", "t3"),
    ("t2", "t4"),
    ("t2", "t5"),
];

#[test]
fn sampled_plans_respect_screening_and_bounds() {
    let ds = donor_fixture();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..500 {
        let plan = sample_plan(&mut rng, 8.0, &ds, 1.0).unwrap();
        plan.validate().unwrap();
        assert!(plan.donor_i.starts_with('t') && plan.donor_j.starts_with('t'));
        assert!(plan.age_i <= 8.0 && plan.age_j >= 8.0);
        assert!((plan.age_i - 8.0).abs() < 1.0 && (plan.age_j - 8.0).abs() < 1.0);
        assert!((plan.age_i - plan.age_j).abs() < 1.0);
        assert!(plan.target_age >= plan.age_i && plan.target_age <= plan.age_j);
        assert!((0.0..=1.0).contains(&plan.epsilon));
        let key = (plan.donor_i.as_str().to_string(), plan.donor_j.clone());
        assert!(
            ELIGIBLE_PAIRS.iter().any(|&(a, b)| a == key.0 && b == key.1),
            "unexpected pair {key:?}"
        );
    }
}

#[test]
fn plan_draws_are_uniform_over_eligible_pairs() {
    let ds = donor_fixture();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let n = 10_000usize;
    let mut counts: HashMap<(String, String), usize> = HashMap::new();
    let mut eps_sum = 0.0;
    for _ in 0..n {
        let plan = sample_plan(&mut rng, 8.0, &ds, 1.0).unwrap();
        *counts.entry((plan.donor_i, plan.donor_j)).or_insert(0) += 1;
        eps_sum += plan.epsilon;
    }
    assert_eq!(counts.len(), ELIGIBLE_PAIRS.len());
    let p = 1.0 / ELIGIBLE_PAIRS.len() as f64;
    let expected = n as f64 * p;
    let sigma = (n as f64 * p * (1.0 - p)).sqrt();
    for (pair, count) in &counts {
        let dev = (*count as f64 - expected).abs();
        assert!(
            dev <= 3.0 * sigma,
            "pair {pair:?} drawn {count} times, expected {expected:.1} +- {:.1}",
            3.0 * sigma
        );
    }
    let eps_mean = eps_sum / n as f64;
    let mean_sigma = (1.0f64 / 12.0).sqrt() / (n as f64).sqrt();
    assert!(
        (eps_mean - 0.5).abs() <= 3.0 * mean_sigma,
        "mixing weight mean {eps_mean} too far from 0.5"
    );
}

#[test]
fn missing_donors_is_an_error() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let empty: Dataset<f64> = Dataset::default();
    assert!(matches!(
        sample_plan(&mut rng, 8.0, &empty, 1.0),
        Err(SynthError::NoDonors { .. })
    ));

    let lone = Dataset {
        samples: vec![sample("a", 8.3, Split::Train, 0)],
    };
    assert!(matches!(
        sample_plan(&mut rng, 8.3, &lone, 1.0),
        Err(SynthError::NoDonors { .. })
    ));

    let one_sided = Dataset {
        samples: vec![
            sample("a", 10.1, Split::Train, 0),
            sample("b", 10.2, Split::Train, 1),
        ],
    };
    assert!(matches!(
        sample_plan(&mut rng, 10.5, &one_sided, 1.0),
        Err(SynthError::NoDonors { .. })
    ));

    // Both donors sit within a year of the target, but their mutual
    // spread would let the realized age drift a year from one of them.
    let spread = Dataset {
        samples: vec![
            sample("a", 7.1, Split::Train, 0),
            sample("b", 8.9, Split::Train, 1),
        ],
    };
    assert!(matches!(
        sample_plan(&mut rng, 8.0, &spread, 1.0),
        Err(SynthError::NoDonors { .. })
    ));
}

#[test]
fn endpoint_mixing_reproduces_a_donor_exactly() {
    let g = Generator::<f64>::new(thin_arch(), 11).unwrap();
    let ds = Dataset {
        samples: vec![
            sample("a", 8.2, Split::Train, 5),
            sample("b", 8.6, Split::Train, 6),
        ],
    };
    let plan = InterpolationPlan::new("a", 8.2, "b", 8.6, 1.0).unwrap();
    let synth = interpolate(&g, &plan, &ds, "syn0000").unwrap();

    let mut tape = Tape::new();
    let enc = g.enc.bind_const(&mut tape);
    let dec = g.dec.bind_const(&mut tape);
    let x = tape.leaf_from(&[1, 1, SIDE, SIDE, SIDE], &ds.samples[0].volume.values, false);
    let out = g.generate(&mut tape, &enc, &dec, x).unwrap();
    let mut expected = tape.values(out).to_vec();
    clamp_unit(&mut expected);

    assert_eq!(synth.volume.values, expected);
    assert_eq!(synth.age, 8.2);
    assert_eq!(synth.sex_analog, ds.samples[0].sex_analog);
    assert_eq!(synth.split, Split::Train);
    assert_eq!(synth.provenance, Provenance::Synthetic);
    assert!(synth.volume.values.iter().all(|v| (0.0..=1.0).contains(v)));
}

#[test]
fn half_mixing_averages_latents_elementwise() {
    assert_eq!(mix_latents(&[1.0, 2.0], &[3.0, 4.0], 0.25).unwrap(), [2.5, 3.5]);
    assert!(mix_latents(&[1.0], &[1.0, 2.0], 0.5).is_err());

    let g = Generator::<f64>::new(thin_arch(), 3).unwrap();
    let (va, vb) = (unit_volume(20), unit_volume(21));
    let mut tape = Tape::new();
    let enc = g.enc.bind_const(&mut tape);
    let shape = [1, 1, SIDE, SIDE, SIDE];
    let xa = tape.leaf_from(&shape, &va.values, false);
    let za_node = g.encode(&mut tape, &enc, xa).unwrap();
    let za = tape.values(za_node).to_vec();
    let xb = tape.leaf_from(&shape, &vb.values, false);
    let zb_node = g.encode(&mut tape, &enc, xb).unwrap();
    let zb = tape.values(zb_node).to_vec();

    let mixed = mix_latents(&za, &zb, 0.5).unwrap();
    for ((&m, &a), &b) in mixed.iter().zip(&za).zip(&zb) {
        assert!((m - (a + b) / 2.0).abs() <= 1e-12);
    }
}

#[test]
fn interpolation_rejects_leaked_and_unknown_donors() {
    let g = Generator::<f64>::new(thin_arch(), 11).unwrap();
    let ds = Dataset {
        samples: vec![
            sample("a", 8.2, Split::Train, 5),
            sample("v", 8.6, Split::Val, 6),
            sample("x", 8.4, Split::Test, 7),
        ],
    };

    let leak_val = InterpolationPlan::new("a", 8.2, "v", 8.6, 0.5).unwrap();
    assert!(matches!(
        interpolate(&g, &leak_val, &ds, "s"),
        Err(SynthError::Leakage { id }) if id == "v"
    ));

    let leak_test = InterpolationPlan::new("x", 8.4, "a", 8.2, 0.5).unwrap();
    assert!(matches!(
        interpolate(&g, &leak_test, &ds, "s"),
        Err(SynthError::Leakage { id }) if id == "x"
    ));

    let unknown = InterpolationPlan::new("a", 8.2, "ghost", 8.4, 0.5).unwrap();
    assert!(matches!(
        interpolate(&g, &unknown, &ds, "s"),
        Err(SynthError::UnknownDonor { id }) if id == "ghost"
    ));

    // Plan built against stale donor ages.
    let stale = InterpolationPlan::new("a", 8.3, "v", 8.6, 1.0).unwrap();
    assert!(matches!(
        interpolate(&g, &stale, &ds, "s"),
        Err(SynthError::BadPlan(_))
    ));
}

fn trained_source(seed: u64) -> SynthesisSource<f64> {
    SynthesisSource::new(Generator::new(thin_arch(), seed).unwrap(), 1)
}

/// Twelve training donors spread across one age group, plus held-out
/// samples at eligible ages that count toward neither the group nor
/// the donor pool.
fn sparse_group_fixture() -> Dataset<f64> {
    let mut samples = Vec::new();
    for k in 0..12 {
        let age = 10.05 + 0.08 * k as f64;
        samples.push(sample(&format!("r{k:02}"), age, Split::Train, k as u64));
    }
    samples.push(sample("v0", 10.4, Split::Val, 80));
    samples.push(sample("x0", 10.6, Split::Test, 81));
    Dataset { samples }
}

#[test]
fn balancing_tops_up_sparse_groups() {
    let ds = sparse_group_fixture();
    let policy = BalancingPolicy::default();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (out, report) = balance_dataset(&trained_source(9), &ds, &policy, &mut rng).unwrap();

    // 12 real training samples in the group, so 38 synthetics reach the
    // target; the val and test decoys count toward nothing.
    assert_eq!(out.len(), 52);
    assert_eq!(report.total_added(), 38);
    assert_eq!(report.total_shortfall(), 0);
    assert_eq!(report.groups.len(), 1);
    assert_eq!(report.groups[0].bin, 10);
    assert_eq!(report.groups[0].real, 12);
    assert_eq!(report.groups[0].added, 38);
    assert_eq!(report.manifest.len(), 38);

    // Original samples survive untouched, in order.
    assert_eq!(&out.samples[..ds.len()], &ds.samples[..]);

    let train_ids: Vec<&str> = ds
        .samples
        .iter()
        .filter(|s| s.split == Split::Train)
        .map(|s| s.id.as_str())
        .collect();
    for (k, row) in report.manifest.iter().enumerate() {
        assert_eq!(row.synthetic_id, format!("syn{k:04}"));
        assert!(train_ids.contains(&row.donor_i.as_str()));
        assert!(train_ids.contains(&row.donor_j.as_str()));
        assert_eq!(row.age_s, row.epsilon * row.age_i + (1.0 - row.epsilon) * row.age_j);
    }
    for s in &out.samples[ds.len()..] {
        assert_eq!(s.provenance, Provenance::Synthetic);
        assert_eq!(s.split, Split::Train);
        assert!(s.volume.values.iter().all(|v| (0.0..=1.0).contains(v)));
        assert!(s.age > 10.0 && s.age < 11.0);
    }
}

#[test]
fn balancing_leaves_satisfied_groups_alone() {
    let ds = sparse_group_fixture();
    let policy = BalancingPolicy {
        target_per_group: 3,
        ..Default::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (out, report) = balance_dataset(&trained_source(9), &ds, &policy, &mut rng).unwrap();
    assert_eq!(out, ds);
    assert!(report.manifest.is_empty());
    assert_eq!(report.total_added(), 0);
    assert_eq!(report.total_shortfall(), 0);
}

#[test]
fn balancing_records_shortfall_when_donors_run_out() {
    // Both donors sit below the group center, so no older donor exists.
    let ds = Dataset {
        samples: vec![
            sample("a", 10.1, Split::Train, 0),
            sample("b", 10.2, Split::Train, 1),
        ],
    };
    let policy = BalancingPolicy {
        target_per_group: 5,
        ..Default::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (out, report) = balance_dataset(&trained_source(9), &ds, &policy, &mut rng).unwrap();
    assert_eq!(out.len(), ds.len());
    assert_eq!(report.groups.len(), 1);
    assert_eq!(report.groups[0].real, 2);
    assert_eq!(report.groups[0].added, 0);
    assert_eq!(report.groups[0].shortfall, 3);
}

#[test]
fn untrained_generator_is_rejected() {
    let ds = sparse_group_fixture();
    let source = SynthesisSource::new(Generator::<f64>::new(thin_arch(), 9).unwrap(), 0);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    assert!(matches!(
        balance_dataset(&source, &ds, &BalancingPolicy::default(), &mut rng),
        Err(SynthError::Untrained)
    ));
}

#[test]
fn balancing_reproduces_reference_group_arithmetic() {
    // Stored group-count fixture: eighteen one-year training groups
    // summing to 640 real samples, denser at younger ages. Topping each
    // deficient group up to 50 adds 300 synthetics for 940 in total.
    let counts = [
        50usize, 50, 56, 64, 60, 56, 54, 50, 32, 30, 26, 25, 22, 20, 16, 15, 10, 4,
    ];
    let mut samples = Vec::new();
    for (group, &count) in counts.iter().enumerate() {
        for k in 0..count {
            // Evenly spaced within the group, straddling its center.
            let age = 6.0 + group as f64 + (k as f64 + 0.5) / count as f64;
            let id = format!("g{group:02}k{k:02}");
            samples.push(sample(&id, age, Split::Train, (group * 100 + k) as u64));
        }
    }
    let ds = Dataset { samples };
    assert_eq!(ds.len(), 640);

    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let (out, report) =
        balance_dataset(&trained_source(13), &ds, &BalancingPolicy::default(), &mut rng).unwrap();

    assert_eq!(report.total_shortfall(), 0);
    assert_eq!(report.total_added(), 300);
    assert_eq!(out.len(), 940);

    let added: Vec<usize> = report.groups.iter().map(|g| g.added).collect();
    let expected = [0usize, 0, 0, 0, 0, 0, 0, 0, 18, 20, 24, 25, 28, 30, 34, 35, 40, 46];
    assert_eq!(added, expected);
    assert_eq!(
        out.samples
            .iter()
            .filter(|s| s.provenance == Provenance::Real)
            .count(),
        640
    );
}

#[test]
fn balancing_is_reproducible_bit_for_bit() {
    let ds = Dataset {
        samples: vec![
            sample("a", 9.1, Split::Train, 0),
            sample("b", 9.3, Split::Train, 1),
            sample("c", 9.6, Split::Train, 2),
            sample("d", 9.8, Split::Train, 3),
        ],
    };
    let policy = BalancingPolicy {
        target_per_group: 7,
        ..Default::default()
    };
    let source = trained_source(9);

    let mut rng_a = ChaCha8Rng::seed_from_u64(42);
    let (out_a, report_a) = balance_dataset(&source, &ds, &policy, &mut rng_a).unwrap();
    let mut rng_b = ChaCha8Rng::seed_from_u64(42);
    let (out_b, report_b) = balance_dataset(&source, &ds, &policy, &mut rng_b).unwrap();
    assert_eq!(report_a, report_b);
    assert_eq!(out_a, out_b);

    let mut rng_c = ChaCha8Rng::seed_from_u64(43);
    let (_, report_c) = balance_dataset(&source, &ds, &policy, &mut rng_c).unwrap();
    assert_ne!(report_a.manifest, report_c.manifest);
}

#[test]
fn manifest_round_trips_through_csv() {
    let rows = vec![
        ManifestRow {
            synthetic_id: "syn0000".into(),
            donor_i: "s0001".into(),
            donor_j: "s0002".into(),
            epsilon: 0.123_456_789_012_345_67,
            age_i: 8.099_999_999_999_999,
            age_j: 8.9,
            age_s: 8.801_234_567_890_123,
        },
        ManifestRow {
            synthetic_id: "syn0001".into(),
            donor_i: "s0003".into(),
            donor_j: "s0004".into(),
            epsilon: 1.0,
            age_i: 9.0,
            age_j: 9.5,
            age_s: 9.0,
        },
    ];
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("manifest.csv");
    write_manifest(&path, &rows).unwrap();

    let text = std::fs::read_to_string(&path).unwrap();
    assert!(text.starts_with("synthetic_id,donor_i,donor_j,epsilon,age_i,age_j,age_s"));

    let back = read_manifest(&path).unwrap();
    assert_eq!(back, rows);

    let bad = dir.path().join("bad.csv");
    std::fs::write(&bad, "id,donor\nx,y\n").unwrap();
    assert!(matches!(read_manifest(&bad), Err(SynthError::Manifest(_))));
}
