//! Procedural volumetric dataset with a planted, localized age signal,
//! plus normalization, stratified splitting, and dataset I/O.
//!
//! Each volume is an ellipsoidal body: a bright boundary shell pinned at
//! intensity 1 over a zero background (anchoring the normalization range),
//! a textured interior, and one spherical region whose mean intensity is an
//! affine function of age. The signal is therefore known in closed form,
//! which is what downstream recovery checks lean on.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::Scalar;

const MAGIC: &[u8; 4] = b"VOL1";
/// Ellipsoid semi-axes as fractions of the cube side.
const AXES: [f64; 3] = [0.42, 0.46, 0.40];
/// Interior/shell boundary on the normalized ellipsoid metric.
const SHELL_INNER: f64 = 0.85;
const INTERIOR_BASE: f64 = 0.5;
const TEXTURE_AMP: f64 = 0.08;
const SEX_OFFSET: f64 = 0.015;
/// Texture grid spacing in voxels.
const TEXTURE_CELL: usize = 8;
/// Voxel-count guard for declared dimensions.
const MAX_VOXELS: u64 = 1 << 31;

/// Failure modes for dataset generation and I/O.
#[derive(Debug, Error)]
pub enum PhanError {
    #[error("volume file does not start with the expected magic")]
    BadMagic,
    #[error("file ended before the declared payload")]
    Truncated,
    #[error("malformed volume or index: {0}")]
    Malformed(String),
    #[error("volume is constant, nothing to normalize")]
    ConstantInput,
    #[error("bad dataset settings: {0}")]
    BadSpec(String),
    #[error("age region leaves the textured interior of the body")]
    RegionOutsideMask,
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("index: {0}")]
    Index(#[from] csv::Error),
}

/// Dataset partition a sample belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Result<Self, PhanError> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(PhanError::Malformed(format!("unknown split {other:?}"))),
        }
    }
}

/// Whether a sample was generated as data or synthesized later.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provenance {
    Real,
    Synthetic,
}

impl Provenance {
    pub fn as_str(self) -> &'static str {
        match self {
            Provenance::Real => "real",
            Provenance::Synthetic => "synthetic",
        }
    }

    pub fn parse(s: &str) -> Result<Self, PhanError> {
        match s {
            "real" => Ok(Provenance::Real),
            "synthetic" => Ok(Provenance::Synthetic),
            other => Err(PhanError::Malformed(format!("unknown provenance {other:?}"))),
        }
    }
}

/// Dense rank-3 volume in row-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume<S> {
    pub dims: [usize; 3],
    pub values: Vec<S>,
}

impl<S: Scalar> Volume<S> {
    pub fn new(dims: [usize; 3], values: Vec<S>) -> Result<Self, PhanError> {
        let n: usize = dims.iter().product();
        if values.len() != n {
            return Err(PhanError::Malformed(format!(
                "dims {dims:?} need {n} voxels, got {}",
                values.len()
            )));
        }
        Ok(Self { dims, values })
    }

    pub fn numel(&self) -> usize {
        self.values.len()
    }

    fn min_max(&self) -> (S, S) {
        let mut lo = S::infinity();
        let mut hi = S::neg_infinity();
        for &v in &self.values {
            if v < lo {
                lo = v;
            }
            if v > hi {
                hi = v;
            }
        }
        (lo, hi)
    }

    /// Mean intensity over voxels within `radius` of `center` (Euclidean,
    /// voxel coordinates).
    pub fn region_mean(&self, center: [usize; 3], radius: f64) -> f64 {
        let mut acc = 0.0;
        let mut n = 0usize;
        let r2 = radius * radius;
        for x in 0..self.dims[0] {
            for y in 0..self.dims[1] {
                for z in 0..self.dims[2] {
                    let d2 = [x, y, z]
                        .iter()
                        .zip(&center)
                        .map(|(&p, &c)| {
                            let d = p as f64 - c as f64;
                            d * d
                        })
                        .sum::<f64>();
                    if d2 <= r2 {
                        let i = (x * self.dims[1] + y) * self.dims[2] + z;
                        acc += self.values[i].to_f64_lossy();
                        n += 1;
                    }
                }
            }
        }
        acc / n.max(1) as f64
    }
}

/// One labeled volume.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample<S> {
    pub id: String,
    pub volume: Volume<S>,
    pub age: f64,
    /// Binary nuisance covariate, 0 or 1.
    pub sex_analog: u8,
    pub split: Split,
    pub provenance: Provenance,
}

/// A collection of samples sharing one generation context.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Dataset<S> {
    pub samples: Vec<Sample<S>>,
}

impl<S: Scalar> Dataset<S> {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Indices of samples in the given split.
    pub fn split_indices(&self, split: Split) -> Vec<usize> {
        (0..self.samples.len())
            .filter(|&i| self.samples[i].split == split)
            .collect()
    }
}

/// Settings for [`generate_phantom`].
#[derive(Debug, Clone, PartialEq)]
pub struct PhantomSpec {
    /// Cube side in voxels; must be a multiple of the texture cell.
    pub side: usize,
    /// Closed age range in years; width must equal the group count.
    pub age_range: [f64; 2],
    /// Subjects per 1-year age group, deliberately imbalanced by default.
    pub group_counts: Vec<usize>,
    /// Alternate the sex analog within each group so counts differ by <= 1.
    pub sex_balanced: bool,
    /// Standard deviation of voxelwise Gaussian noise.
    pub noise_sigma: f64,
    /// Center of the age-coding sphere, voxel coordinates.
    pub region_center: [usize; 3],
    /// Radius of the age-coding sphere in voxels.
    pub region_radius: f64,
    pub seed: u64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self {
            side: 32,
            age_range: [6.0, 24.0],
            group_counts: vec![6, 14, 18, 9, 22, 7, 15, 11, 19, 8, 12, 16, 10, 13, 5, 6, 4, 5],
            sex_balanced: true,
            noise_sigma: 0.02,
            region_center: [20, 16, 16],
            region_radius: 3.5,
            seed: 7,
        }
    }
}

impl PhantomSpec {
    pub fn n_subjects(&self) -> usize {
        self.group_counts.iter().sum()
    }

    pub fn validate(&self) -> Result<(), PhanError> {
        if self.side == 0 || self.side % TEXTURE_CELL != 0 {
            return Err(PhanError::BadSpec(format!(
                "side {} must be a positive multiple of {TEXTURE_CELL}",
                self.side
            )));
        }
        let span = self.age_range[1] - self.age_range[0];
        if !(span > 0.0) || span.fract() != 0.0 {
            return Err(PhanError::BadSpec(format!(
                "age range {:?} must span a positive whole number of years",
                self.age_range
            )));
        }
        if self.group_counts.len() != span as usize {
            return Err(PhanError::BadSpec(format!(
                "{} groups for a {span}-year range",
                self.group_counts.len()
            )));
        }
        if self.group_counts.iter().all(|&c| c == 0) {
            return Err(PhanError::BadSpec("no subjects requested".into()));
        }
        if !self.noise_sigma.is_finite() || self.noise_sigma < 0.0 {
            return Err(PhanError::BadSpec(format!(
                "noise sigma {} must be finite and nonnegative",
                self.noise_sigma
            )));
        }
        if !(self.region_radius > 0.0) {
            return Err(PhanError::BadSpec(format!(
                "region radius {} must be positive",
                self.region_radius
            )));
        }
        if !self.region_fits() {
            return Err(PhanError::RegionOutsideMask);
        }
        Ok(())
    }

    /// Normalized ellipsoid metric at a voxel: <= 1 inside the body,
    /// <= SHELL_INNER in the textured interior.
    fn metric(&self, p: [f64; 3]) -> f64 {
        let c = (self.side as f64 - 1.0) / 2.0;
        p.iter()
            .zip(&AXES)
            .map(|(&x, &a)| {
                let d = (x - c) / (a * self.side as f64);
                d * d
            })
            .sum::<f64>()
            .sqrt()
    }

    fn region_fits(&self) -> bool {
        let r = self.region_radius;
        let c = self.region_center.map(|v| v as f64);
        let lo = |i: usize| (c[i] - r).floor().max(0.0) as usize;
        let hi = |i: usize| ((c[i] + r).ceil() as usize).min(self.side.saturating_sub(1));
        for x in lo(0)..=hi(0) {
            for y in lo(1)..=hi(1) {
                for z in lo(2)..=hi(2) {
                    let d2 = [x, y, z]
                        .iter()
                        .zip(&c)
                        .map(|(&p, &cc)| {
                            let d = p as f64 - cc;
                            d * d
                        })
                        .sum::<f64>();
                    if d2 <= r * r && self.metric([x as f64, y as f64, z as f64]) > SHELL_INNER {
                        return false;
                    }
                }
            }
        }
        true
    }
}

/// Target mean intensity of the age-coding region: 0.3 at the range floor
/// rising linearly to 0.7 at the ceiling.
pub fn age_region_level(age_range: [f64; 2], age: f64) -> f64 {
    0.3 + 0.4 * (age - age_range[0]) / (age_range[1] - age_range[0])
}

fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Decorrelated per-subject seed derived from the master seed and index.
fn subject_seed(master: u64, index: usize) -> u64 {
    mix(master ^ mix(0x9e37_79b9_7f4a_7c15_u64.wrapping_mul(index as u64 + 1)))
}

/// Builds one body volume for the given age and sex analog.
///
/// Deterministic in `(spec geometry, age, sex_analog, seed)`; the seed
/// drives the interior texture and the voxel noise. The result is
/// normalized, so its min is 0 and max is 1.
pub fn synthesize_volume<S: Scalar>(
    spec: &PhantomSpec,
    age: f64,
    sex_analog: u8,
    seed: u64,
) -> Result<Volume<S>, PhanError> {
    let side = spec.side;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // Smooth texture: random nodes on a coarse lattice, trilinear in between.
    let g = side / TEXTURE_CELL + 1;
    let nodes: Vec<f64> = (0..g * g * g).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let node = |x: usize, y: usize, z: usize| nodes[(x * g + y) * g + z];
    let texture = |p: [usize; 3]| -> f64 {
        let f = p.map(|v| v as f64 / TEXTURE_CELL as f64);
        let i = f.map(|v| (v.floor() as usize).min(g - 2));
        let t = [f[0] - i[0] as f64, f[1] - i[1] as f64, f[2] - i[2] as f64];
        let mut acc = 0.0;
        for dx in 0..2 {
            for dy in 0..2 {
                for dz in 0..2 {
                    let w = (if dx == 0 { 1.0 - t[0] } else { t[0] })
                        * (if dy == 0 { 1.0 - t[1] } else { t[1] })
                        * (if dz == 0 { 1.0 - t[2] } else { t[2] });
                    acc += w * node(i[0] + dx, i[1] + dy, i[2] + dz);
                }
            }
        }
        acc
    };

    let occ = age_region_level(spec.age_range, age);
    let sex = if sex_analog == 0 { -SEX_OFFSET } else { SEX_OFFSET };
    let rc = spec.region_center.map(|v| v as f64);
    let r2 = spec.region_radius * spec.region_radius;

    let mut values = Vec::with_capacity(side * side * side);
    for x in 0..side {
        for y in 0..side {
            for z in 0..side {
                let p = [x as f64, y as f64, z as f64];
                let d2 = p.iter().zip(&rc).map(|(&a, &b)| (a - b) * (a - b)).sum::<f64>();
                let m = spec.metric(p);
                let v = if d2 <= r2 {
                    occ
                } else if m <= SHELL_INNER {
                    INTERIOR_BASE + TEXTURE_AMP * texture([x, y, z]) + sex
                } else if m <= 1.0 {
                    1.0
                } else {
                    0.0
                };
                values.push(v);
            }
        }
    }
    if spec.noise_sigma > 0.0 {
        for v in &mut values {
            let n: f64 = rng.sample(StandardNormal);
            *v += spec.noise_sigma * n;
        }
    }
    let vol = Volume::new(
        [side, side, side],
        values.iter().map(|&v| S::lit(v)).collect(),
    )?;
    normalize(vol)
}

/// Generates the full dataset: per-group subject counts, ages uniform
/// within each 1-year group, sex analogs balanced per group when asked.
pub fn generate_phantom<S: Scalar>(spec: &PhantomSpec) -> Result<Dataset<S>, PhanError> {
    spec.validate()?;
    let mut samples = Vec::with_capacity(spec.n_subjects());
    let mut index = 0usize;
    for (group, &count) in spec.group_counts.iter().enumerate() {
        for within in 0..count {
            let mut rng = ChaCha8Rng::seed_from_u64(subject_seed(spec.seed, index));
            let age = spec.age_range[0] + group as f64 + rng.gen::<f64>();
            let sex_analog = if spec.sex_balanced {
                (within % 2) as u8
            } else {
                rng.gen_range(0..2u8)
            };
            let vol_seed = rng.gen::<u64>();
            let volume = synthesize_volume(spec, age, sex_analog, vol_seed)?;
            samples.push(Sample {
                id: format!("s{index:04}"),
                volume,
                age,
                sex_analog,
                split: Split::Train,
                provenance: Provenance::Real,
            });
            index += 1;
        }
    }
    Ok(Dataset { samples })
}

/// Mean-subtracts, then rescales to [0,1] by min-max.
///
/// The mean shift cancels inside the min-max, so the result equals
/// `(v - min) / (max - min)` exactly; a constant volume has no range to
/// rescale and is rejected.
pub fn normalize<S: Scalar>(mut vol: Volume<S>) -> Result<Volume<S>, PhanError> {
    let n = S::lit(vol.numel() as f64);
    let mean = vol.values.iter().copied().sum::<S>() / n;
    for v in &mut vol.values {
        *v = *v - mean;
    }
    let (lo, hi) = vol.min_max();
    if !(hi > lo) {
        return Err(PhanError::ConstantInput);
    }
    let range = hi - lo;
    for v in &mut vol.values {
        *v = (*v - lo) / range;
    }
    Ok(vol)
}

/// Ratios and shuffle seed for [`assign_splits`].
#[derive(Debug, Clone, PartialEq)]
pub struct SplitSpec {
    /// Train/val/test fractions; must be nonnegative and sum to 1.
    pub ratios: [f64; 3],
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            ratios: [0.75, 0.05, 0.20],
            seed: 0,
        }
    }
}

/// Split sizes and any stratification warnings.
#[derive(Debug, Clone)]
pub struct SplitOutcome {
    pub counts: [usize; 3],
    pub warnings: Vec<String>,
}

/// Labels every sample with a split, stratified by 1-year age group.
///
/// Within each group, counts follow the ratios with largest-remainder
/// rounding (ties go train, then val, then test), so every group lands
/// within one sample of its exact share. Groups smaller than 3 go entirely
/// to train with a warning.
pub fn assign_splits<S: Scalar>(
    ds: &mut Dataset<S>,
    spec: &SplitSpec,
) -> Result<SplitOutcome, PhanError> {
    if ds.is_empty() {
        return Err(PhanError::BadSpec("empty dataset".into()));
    }
    if spec.ratios.iter().any(|r| !r.is_finite() || *r < 0.0)
        || (spec.ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9
    {
        return Err(PhanError::BadSpec(format!(
            "ratios {:?} must be nonnegative and sum to 1",
            spec.ratios
        )));
    }

    let mut groups: BTreeMap<i64, Vec<usize>> = BTreeMap::new();
    for (i, s) in ds.samples.iter().enumerate() {
        groups.entry(s.age.floor() as i64).or_default().push(i);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut counts = [0usize; 3];
    let mut warnings = Vec::new();
    for (year, mut members) in groups {
        members.shuffle(&mut rng);
        if members.len() < 3 {
            warnings.push(format!(
                "age group {year} has {} subjects, too few to stratify; assigned to train",
                members.len()
            ));
            counts[0] += members.len();
            for i in members {
                ds.samples[i].split = Split::Train;
            }
            continue;
        }
        let alloc = largest_remainder(members.len(), &spec.ratios);
        let mut it = members.into_iter();
        for (si, &take) in alloc.iter().enumerate() {
            let split = [Split::Train, Split::Val, Split::Test][si];
            counts[si] += take;
            for i in it.by_ref().take(take) {
                ds.samples[i].split = split;
            }
        }
    }
    Ok(SplitOutcome { counts, warnings })
}

fn largest_remainder(n: usize, ratios: &[f64; 3]) -> [usize; 3] {
    let exact: Vec<f64> = ratios.iter().map(|r| r * n as f64).collect();
    let mut alloc = [
        exact[0].floor() as usize,
        exact[1].floor() as usize,
        exact[2].floor() as usize,
    ];
    let mut leftover = n - alloc.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..3).collect();
    order.sort_by(|&a, &b| {
        let (fa, fb) = (exact[a] - exact[a].floor(), exact[b] - exact[b].floor());
        fb.partial_cmp(&fa).unwrap().then(a.cmp(&b))
    });
    for i in order {
        if leftover == 0 {
            break;
        }
        alloc[i] += 1;
        leftover -= 1;
    }
    alloc
}

fn read_u32(r: &mut impl Read) -> Result<Option<u32>, PhanError> {
    let mut buf = [0u8; 4];
    let mut filled = 0;
    while filled < 4 {
        let n = r.read(&mut buf[filled..])?;
        if n == 0 {
            return if filled == 0 {
                Ok(None)
            } else {
                Err(PhanError::Truncated)
            };
        }
        filled += n;
    }
    Ok(Some(u32::from_le_bytes(buf)))
}

/// Writes a volume in the binary interchange format.
pub fn write_volume<S: Scalar>(w: &mut impl Write, vol: &Volume<S>) -> Result<(), PhanError> {
    w.write_all(MAGIC)?;
    w.write_all(&3u32.to_le_bytes())?;
    for &d in &vol.dims {
        w.write_all(&(d as u32).to_le_bytes())?;
    }
    for v in &vol.values {
        w.write_all(&v.to_f64_lossy().to_le_bytes())?;
    }
    Ok(())
}

/// Reads a volume written by [`write_volume`], rejecting bad magic,
/// truncation, oversized dimensions, and trailing bytes distinctly.
pub fn read_volume<S: Scalar>(r: &mut impl Read) -> Result<Volume<S>, PhanError> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            PhanError::Truncated
        } else {
            PhanError::Io(e)
        }
    })?;
    if &magic != MAGIC {
        return Err(PhanError::BadMagic);
    }
    let rank = read_u32(r)?.ok_or(PhanError::Truncated)?;
    if rank != 3 {
        return Err(PhanError::Malformed(format!("rank {rank}, expected 3")));
    }
    let mut dims = [0usize; 3];
    let mut total = 1u64;
    for d in &mut dims {
        let v = read_u32(r)?.ok_or(PhanError::Truncated)?;
        if v == 0 {
            return Err(PhanError::Malformed("zero dimension".into()));
        }
        total = total.saturating_mul(v as u64);
        *d = v as usize;
    }
    if total > MAX_VOXELS {
        return Err(PhanError::Malformed(format!(
            "dimensions {dims:?} overflow the voxel budget"
        )));
    }
    let mut values = Vec::with_capacity(total as usize);
    let mut buf = [0u8; 8];
    for _ in 0..total {
        r.read_exact(&mut buf).map_err(|e| {
            if e.kind() == std::io::ErrorKind::UnexpectedEof {
                PhanError::Truncated
            } else {
                PhanError::Io(e)
            }
        })?;
        values.push(S::lit(f64::from_le_bytes(buf)));
    }
    if r.read(&mut buf)? != 0 {
        return Err(PhanError::Malformed("trailing data after voxels".into()));
    }
    Volume::new(dims, values)
}

pub fn save_volume<S: Scalar>(path: &Path, vol: &Volume<S>) -> Result<(), PhanError> {
    let mut f = std::io::BufWriter::new(fs::File::create(path)?);
    write_volume(&mut f, vol)?;
    f.flush()?;
    Ok(())
}

pub fn load_volume<S: Scalar>(path: &Path) -> Result<Volume<S>, PhanError> {
    let mut f = std::io::BufReader::new(fs::File::open(path)?);
    read_volume(&mut f)
}

/// Writes `index.csv` plus one volume file per sample under `dir/volumes/`.
pub fn save_dataset<S: Scalar>(dir: &Path, ds: &Dataset<S>) -> Result<(), PhanError> {
    let voldir = dir.join("volumes");
    fs::create_dir_all(&voldir)?;
    let mut w = csv::Writer::from_path(dir.join("index.csv"))?;
    w.write_record(["id", "age", "sex_analog", "split", "provenance", "path"])?;
    for s in &ds.samples {
        let rel = format!("volumes/{}.vol", s.id);
        save_volume(&dir.join(&rel), &s.volume)?;
        w.write_record([
            s.id.as_str(),
            &s.age.to_string(),
            &s.sex_analog.to_string(),
            s.split.as_str(),
            s.provenance.as_str(),
            &rel,
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Loads a dataset saved by [`save_dataset`], validating the index against
/// the stored volumes.
pub fn load_dataset<S: Scalar>(dir: &Path) -> Result<Dataset<S>, PhanError> {
    let mut r = csv::Reader::from_path(dir.join("index.csv"))?;
    {
        let hdr = r.headers()?;
        let want = ["id", "age", "sex_analog", "split", "provenance", "path"];
        if hdr.len() != want.len() || hdr.iter().zip(want).any(|(a, b)| a != b) {
            return Err(PhanError::Malformed(format!("unexpected index header {hdr:?}")));
        }
    }
    let mut samples = Vec::new();
    let mut seen = std::collections::HashSet::new();
    for row in r.records() {
        let row = row?;
        if row.len() != 6 {
            return Err(PhanError::Malformed(format!("index row {row:?}")));
        }
        let id = row[0].to_string();
        if !seen.insert(id.clone()) {
            return Err(PhanError::Malformed(format!("duplicate id {id:?}")));
        }
        let age: f64 = row[1]
            .parse()
            .map_err(|_| PhanError::Malformed(format!("age {:?} for id {id:?}", &row[1])))?;
        let sex_analog: u8 = row[2]
            .parse()
            .ok()
            .filter(|v| *v <= 1)
            .ok_or_else(|| PhanError::Malformed(format!("sex analog {:?}", &row[2])))?;
        let split = Split::parse(&row[3])?;
        let provenance = Provenance::parse(&row[4])?;
        let volume = load_volume(&dir.join(&row[5]))?;
        samples.push(Sample {
            id,
            volume,
            age,
            sex_analog,
            split,
            provenance,
        });
    }
    Ok(Dataset { samples })
}
