//! Age-targeted volume synthesis by latent interpolation between donor
//! samples, plus the balancing policy that tops up sparse age groups.

use std::collections::{BTreeMap, HashSet};
use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::diffgrid::Tape;
use crate::nets::{clamp_unit, Generator, NetError};
use crate::phantom::{Dataset, PhanError, Provenance, Sample, Split, Volume};
use crate::scalar::Scalar;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("no eligible donor pair near age {target}")]
    NoDonors { target: f64 },
    #[error("donor {id} is outside the training split")]
    Leakage { id: String },
    #[error("donor {id} is not in the dataset")]
    UnknownDonor { id: String },
    #[error("generator has no training behind it")]
    Untrained,
    #[error("invalid balancing policy: {0}")]
    BadPolicy(String),
    #[error("invalid interpolation plan: {0}")]
    BadPlan(String),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Volume(#[from] PhanError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error("manifest: {0}")]
    Manifest(String),
}

/// Recipe for one synthetic sample: two donors and a mixing weight.
///
/// The synthetic age is the weight-matched mix of the donor ages, so the
/// label is exact by construction. Both donors must sit strictly within
/// one year of the synthetic age, one at or below it and one at or above.
#[derive(Debug, Clone, PartialEq)]
pub struct InterpolationPlan {
    /// Realized synthetic age: `epsilon * age_i + (1 - epsilon) * age_j`.
    pub target_age: f64,
    pub donor_i: String,
    pub age_i: f64,
    pub donor_j: String,
    pub age_j: f64,
    /// Mixing weight on donor `i`, in [0, 1].
    pub epsilon: f64,
}

impl InterpolationPlan {
    /// Builds a plan from donors and a mixing weight, deriving the
    /// synthetic age from the weighted donor ages.
    pub fn new(
        donor_i: impl Into<String>,
        age_i: f64,
        donor_j: impl Into<String>,
        age_j: f64,
        epsilon: f64,
    ) -> Result<Self, SynthError> {
        let plan = Self {
            target_age: epsilon * age_i + (1.0 - epsilon) * age_j,
            donor_i: donor_i.into(),
            age_i,
            donor_j: donor_j.into(),
            age_j,
            epsilon,
        };
        plan.validate()?;
        Ok(plan)
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |msg: String| Err(SynthError::BadPlan(msg));
        if ![self.target_age, self.age_i, self.age_j, self.epsilon]
            .iter()
            .all(|v| v.is_finite())
        {
            return bad("ages and mixing weight must be finite".into());
        }
        if !(0.0..=1.0).contains(&self.epsilon) {
            return bad(format!("mixing weight {} outside [0, 1]", self.epsilon));
        }
        if self.donor_i == self.donor_j {
            return bad(format!("donors must be distinct, both are {}", self.donor_i));
        }
        let (lo, hi) = (self.age_i.min(self.age_j), self.age_i.max(self.age_j));
        if !(lo <= self.target_age && self.target_age <= hi) {
            return bad(format!(
                "synthetic age {} outside the donor interval [{lo}, {hi}]",
                self.target_age
            ));
        }
        if (self.age_i - self.target_age).abs() >= 1.0
            || (self.age_j - self.target_age).abs() >= 1.0
        {
            return bad(format!(
                "a donor is a year or more from the synthetic age {}",
                self.target_age
            ));
        }
        let derived = self.epsilon * self.age_i + (1.0 - self.epsilon) * self.age_j;
        if self.target_age != derived {
            return bad(format!(
                "synthetic age {} does not match the weighted donor ages {derived}",
                self.target_age
            ));
        }
        Ok(())
    }
}

/// How many samples every age group should reach after augmentation.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct BalancingPolicy {
    /// Minimum real-plus-synthetic count per group.
    pub target_per_group: usize,
    /// Width of one age group in years.
    pub group_width: f64,
}

impl Default for BalancingPolicy {
    fn default() -> Self {
        Self {
            target_per_group: 50,
            group_width: 1.0,
        }
    }
}

impl BalancingPolicy {
    pub fn validate(&self) -> Result<(), SynthError> {
        if self.target_per_group == 0 {
            return Err(SynthError::BadPolicy("target per group must be positive".into()));
        }
        if !(self.group_width.is_finite() && self.group_width > 0.0) {
            return Err(SynthError::BadPolicy(format!(
                "group width {} must be positive and finite",
                self.group_width
            )));
        }
        Ok(())
    }
}

/// Generator paired with a record of how much training it received.
///
/// Balancing refuses a source with zero trained epochs: a fresh
/// initialization decodes noise, and labeling noise with ages would
/// poison downstream regression training.
#[derive(Debug, Clone)]
pub struct SynthesisSource<S> {
    pub generator: Generator<S>,
    pub trained_epochs: usize,
}

impl<S: Scalar> SynthesisSource<S> {
    pub fn new(generator: Generator<S>, trained_epochs: usize) -> Self {
        Self {
            generator,
            trained_epochs,
        }
    }
}

/// One synthetic sample's provenance line in the augmentation manifest.
#[derive(Debug, Clone, PartialEq)]
pub struct ManifestRow {
    pub synthetic_id: String,
    pub donor_i: String,
    pub donor_j: String,
    pub epsilon: f64,
    pub age_i: f64,
    pub age_j: f64,
    pub age_s: f64,
}

/// Outcome of balancing one age group.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupBalance {
    /// Group index: `floor(age / group_width)`.
    pub bin: i64,
    /// Real samples already in the group.
    pub real: usize,
    /// Synthetic samples appended.
    pub added: usize,
    /// Requested synthetics no donor pair could provide.
    pub shortfall: usize,
}

/// Per-group bookkeeping plus one manifest row per synthetic sample.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct BalanceReport {
    pub groups: Vec<GroupBalance>,
    pub manifest: Vec<ManifestRow>,
}

impl BalanceReport {
    pub fn total_added(&self) -> usize {
        self.groups.iter().map(|g| g.added).sum()
    }

    pub fn total_shortfall(&self) -> usize {
        self.groups.iter().map(|g| g.shortfall).sum()
    }
}

/// Elementwise `epsilon * z_i + (1 - epsilon) * z_j` over two equal-length
/// latents. With `epsilon` 1 the result is exactly `z_i`, with 0 exactly
/// `z_j`.
pub fn mix_latents<S: Scalar>(z_i: &[S], z_j: &[S], epsilon: S) -> Result<Vec<S>, SynthError> {
    if z_i.len() != z_j.len() {
        return Err(SynthError::BadPlan(format!(
            "latent lengths {} and {} differ",
            z_i.len(),
            z_j.len()
        )));
    }
    let rest = S::one() - epsilon;
    Ok(z_i
        .iter()
        .zip(z_j)
        .map(|(&a, &b)| epsilon * a + rest * b)
        .collect())
}

/// Draws a uniformly random eligible donor pair near `target_age` and a
/// uniform mixing weight, then derives the synthetic age exactly.
///
/// Eligible donors are real training samples strictly within
/// `group_width` years of `target_age`. A pair takes one donor at or
/// below the target and one at or above it, distinct samples, with an
/// age spread under one year so the realized age stays within a year of
/// both donors for every mixing weight.
pub fn sample_plan<S: Scalar>(
    rng: &mut ChaCha8Rng,
    target_age: f64,
    dataset: &Dataset<S>,
    group_width: f64,
) -> Result<InterpolationPlan, SynthError> {
    if !(group_width.is_finite() && group_width > 0.0) {
        return Err(SynthError::BadPolicy(format!(
            "group width {group_width} must be positive and finite"
        )));
    }
    let mut younger = Vec::new();
    let mut older = Vec::new();
    for (idx, s) in dataset.samples.iter().enumerate() {
        if s.split != Split::Train || s.provenance != Provenance::Real {
            continue;
        }
        if (s.age - target_age).abs() >= group_width {
            continue;
        }
        if s.age <= target_age {
            younger.push(idx);
        }
        if s.age >= target_age {
            older.push(idx);
        }
    }
    let mut pairs = Vec::new();
    for &i in &younger {
        for &j in &older {
            if i == j {
                continue;
            }
            if (dataset.samples[i].age - dataset.samples[j].age).abs() >= 1.0 {
                continue;
            }
            pairs.push((i, j));
        }
    }
    if pairs.is_empty() {
        return Err(SynthError::NoDonors { target: target_age });
    }
    let (i, j) = pairs[rng.gen_range(0..pairs.len())];
    let epsilon: f64 = rng.gen();
    InterpolationPlan::new(
        dataset.samples[i].id.clone(),
        dataset.samples[i].age,
        dataset.samples[j].id.clone(),
        dataset.samples[j].age,
        epsilon,
    )
}

/// Decodes the weighted mix of two donor latents into a synthetic sample
/// labeled with the realized age.
///
/// Donors must come from the training split; validation or test donors
/// are rejected so synthetic volumes can never carry held-out content.
/// The decoded volume is clamped to [0, 1] like any exported volume, and
/// the sample keeps the sex analog of the donor with the larger weight.
pub fn interpolate<S: Scalar>(
    g: &Generator<S>,
    plan: &InterpolationPlan,
    dataset: &Dataset<S>,
    synthetic_id: &str,
) -> Result<Sample<S>, SynthError> {
    plan.validate()?;
    let donor_i = find_donor(dataset, &plan.donor_i)?;
    let donor_j = find_donor(dataset, &plan.donor_j)?;
    for (donor, age) in [(donor_i, plan.age_i), (donor_j, plan.age_j)] {
        if donor.split != Split::Train {
            return Err(SynthError::Leakage {
                id: donor.id.clone(),
            });
        }
        if donor.age != age {
            return Err(SynthError::BadPlan(format!(
                "donor {} has age {}, plan says {age}",
                donor.id, donor.age
            )));
        }
    }
    if donor_i.volume.dims != donor_j.volume.dims {
        return Err(SynthError::BadPlan(format!(
            "donor volumes have different shapes {:?} and {:?}",
            donor_i.volume.dims, donor_j.volume.dims
        )));
    }
    let volume = decode_mix(g, &donor_i.volume, &donor_j.volume, plan.epsilon)?;
    let sex_analog = if plan.epsilon >= 0.5 {
        donor_i.sex_analog
    } else {
        donor_j.sex_analog
    };
    Ok(Sample {
        id: synthetic_id.to_string(),
        volume,
        age: plan.target_age,
        sex_analog,
        split: Split::Train,
        provenance: Provenance::Synthetic,
    })
}

fn find_donor<'d, S: Scalar>(
    dataset: &'d Dataset<S>,
    id: &str,
) -> Result<&'d Sample<S>, SynthError> {
    dataset
        .samples
        .iter()
        .find(|s| s.id == id)
        .ok_or_else(|| SynthError::UnknownDonor { id: id.to_string() })
}

fn decode_mix<S: Scalar>(
    g: &Generator<S>,
    v_i: &Volume<S>,
    v_j: &Volume<S>,
    epsilon: f64,
) -> Result<Volume<S>, SynthError> {
    let [w, h, d] = v_i.dims;
    let shape = [1, 1, w, h, d];
    let mut tape = Tape::new();
    let enc = g.enc.bind_const(&mut tape);
    let x_i = tape.leaf_from(&shape, &v_i.values, false);
    let z_i = g.encode(&mut tape, &enc, x_i)?;
    let x_j = tape.leaf_from(&shape, &v_j.values, false);
    let z_j = g.encode(&mut tape, &enc, x_j)?;
    let mixed = mix_latents(tape.values(z_i), tape.values(z_j), S::lit(epsilon))?;
    let latent_shape = tape.shape(z_i).to_vec();
    let z = tape.leaf_from(&latent_shape, &mixed, false);
    let dec = g.dec.bind_const(&mut tape);
    let out = g.decode(&mut tape, &dec, z)?;
    let mut values = tape.values(out).to_vec();
    clamp_unit(&mut values);
    Ok(Volume::new(v_i.dims, values)?)
}

/// Tops up every age group to the policy target with synthetic samples.
///
/// Groups are `group_width`-year bins over the ages of real training
/// samples; validation and test samples never count toward a group and
/// never serve as donors. Real samples are never removed or altered;
/// synthetics are appended with fresh `syn` ids, so a group whose donors
/// cannot supply a valid pair keeps its shortfall, recorded in the
/// report. The same rng seed reproduces every plan and volume bit for
/// bit.
pub fn balance_dataset<S: Scalar>(
    source: &SynthesisSource<S>,
    dataset: &Dataset<S>,
    policy: &BalancingPolicy,
    rng: &mut ChaCha8Rng,
) -> Result<(Dataset<S>, BalanceReport), SynthError> {
    policy.validate()?;
    if source.trained_epochs == 0 {
        return Err(SynthError::Untrained);
    }
    let width = policy.group_width;
    let mut bins: BTreeMap<i64, usize> = BTreeMap::new();
    for s in &dataset.samples {
        if s.provenance == Provenance::Real && s.split == Split::Train {
            *bins.entry((s.age / width).floor() as i64).or_insert(0) += 1;
        }
    }
    let taken: HashSet<&str> = dataset.samples.iter().map(|s| s.id.as_str()).collect();
    let mut next_id = 0usize;
    let mut out = dataset.clone();
    let mut report = BalanceReport::default();
    for (&bin, &real) in &bins {
        let deficit = policy.target_per_group.saturating_sub(real);
        let center = (bin as f64 + 0.5) * width;
        let mut added = 0;
        let mut shortfall = 0;
        for _ in 0..deficit {
            let plan = match sample_plan(rng, center, dataset, width) {
                Ok(plan) => plan,
                Err(SynthError::NoDonors { .. }) => {
                    shortfall = deficit - added;
                    break;
                }
                Err(e) => return Err(e),
            };
            let id = loop {
                let candidate = format!("syn{next_id:04}");
                next_id += 1;
                if !taken.contains(candidate.as_str()) {
                    break candidate;
                }
            };
            let sample = interpolate(&source.generator, &plan, dataset, &id)?;
            report.manifest.push(ManifestRow {
                synthetic_id: id,
                donor_i: plan.donor_i,
                donor_j: plan.donor_j,
                epsilon: plan.epsilon,
                age_i: plan.age_i,
                age_j: plan.age_j,
                age_s: plan.target_age,
            });
            out.samples.push(sample);
            added += 1;
        }
        report.groups.push(GroupBalance {
            bin,
            real,
            added,
            shortfall,
        });
    }
    Ok((out, report))
}

const MANIFEST_HEADER: [&str; 7] = [
    "synthetic_id",
    "donor_i",
    "donor_j",
    "epsilon",
    "age_i",
    "age_j",
    "age_s",
];

/// Writes the augmentation manifest, one line per synthetic sample.
pub fn write_manifest<P: AsRef<Path>>(path: P, rows: &[ManifestRow]) -> Result<(), SynthError> {
    let mut w = csv::Writer::from_writer(BufWriter::new(File::create(path)?));
    w.write_record(MANIFEST_HEADER)?;
    for r in rows {
        w.write_record([
            r.synthetic_id.as_str(),
            r.donor_i.as_str(),
            r.donor_j.as_str(),
            &r.epsilon.to_string(),
            &r.age_i.to_string(),
            &r.age_j.to_string(),
            &r.age_s.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Reads an augmentation manifest written by [`write_manifest`].
pub fn read_manifest<P: AsRef<Path>>(path: P) -> Result<Vec<ManifestRow>, SynthError> {
    let mut r = csv::Reader::from_reader(BufReader::new(File::open(path)?));
    let headers = r.headers()?.clone();
    if headers.iter().ne(MANIFEST_HEADER) {
        return Err(SynthError::Manifest(format!(
            "expected header {:?}, found {:?}",
            MANIFEST_HEADER.join(","),
            headers.iter().collect::<Vec<_>>().join(",")
        )));
    }
    let mut rows = Vec::new();
    for record in r.records() {
        let record = record?;
        if record.len() != MANIFEST_HEADER.len() {
            return Err(SynthError::Manifest(format!(
                "row has {} fields, expected {}",
                record.len(),
                MANIFEST_HEADER.len()
            )));
        }
        let num = |idx: usize| -> Result<f64, SynthError> {
            record[idx].parse().map_err(|_| {
                SynthError::Manifest(format!(
                    "bad {} value {:?}",
                    MANIFEST_HEADER[idx], &record[idx]
                ))
            })
        };
        rows.push(ManifestRow {
            synthetic_id: record[0].to_string(),
            donor_i: record[1].to_string(),
            donor_j: record[2].to_string(),
            epsilon: num(3)?,
            age_i: num(4)?,
            age_j: num(5)?,
            age_s: num(6)?,
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plan_derives_age_from_weighted_donors() {
        let plan = InterpolationPlan::new("a", 8.0, "b", 9.0, 0.5).unwrap();
        assert_eq!(plan.target_age, 8.5);
        let plan = InterpolationPlan::new("a", 8.0, "b", 8.6, 1.0).unwrap();
        assert_eq!(plan.target_age, 8.0);
    }

    #[test]
    fn plan_rejects_out_of_range_weights_and_far_donors() {
        assert!(InterpolationPlan::new("a", 8.0, "b", 9.0, 1.2).is_err());
        assert!(InterpolationPlan::new("a", 6.0, "b", 7.8, 0.05).is_err());
        assert!(InterpolationPlan::new("a", 8.0, "a", 9.0, 0.5).is_err());
    }

    #[test]
    fn policy_rejects_degenerate_values() {
        assert!(BalancingPolicy::default().validate().is_ok());
        let zero = BalancingPolicy {
            target_per_group: 0,
            ..Default::default()
        };
        assert!(zero.validate().is_err());
        let width = BalancingPolicy {
            group_width: 0.0,
            ..Default::default()
        };
        assert!(width.validate().is_err());
    }
}
