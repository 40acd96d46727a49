//! The three networks: generator (encoder + decoder), critic, and regressor.
//!
//! All three share one architecture knob, [`ArchConfig`]: the cube side of
//! the input volume and a channel scale that multiplies every base channel
//! count, so full-size and desk-size models run the same code path. Layers
//! are plain convolutions and relus; there are no normalization layers.
//! Parameters live in [`ParamSet`]s and are bound to a [`Tape`] per forward
//! pass, so the same model can serve concurrent read-only evaluations.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::diffgrid::{DiffError, DiffTensor, NodeId, ParamSet, Tape, TapeBinding};
use crate::scalar::Scalar;

/// Base channel widths of the encoder stages; the decoder mirrors them.
const ENC_BASE: [usize; 5] = [64, 128, 256, 512, 512];
const DEC_BASE: [usize; 5] = [512, 512, 256, 128, 64];
const REG_BASE: [usize; 5] = [16, 32, 64, 128, 256];
const FC_BASE: [usize; 2] = [2048, 1024];

/// Checkpoint file magic.
const MAGIC: &[u8; 4] = b"TGB1";

/// Errors raised by network construction, evaluation, and checkpointing.
#[derive(Debug, Error)]
pub enum NetError {
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error("arch: {0}")]
    BadArch(String),
    #[error("{op}: spatial dims {dims:?} must be divisible by {div}")]
    BadSide {
        op: &'static str,
        dims: [usize; 3],
        div: usize,
    },
    #[error("{op}: expected a rank-5 [n, c, d, h, w] input, got shape {shape:?}")]
    BadRank { op: &'static str, shape: Vec<usize> },
    #[error("encode: input value {found} at index {index} lies outside [0, 1]")]
    UnnormalizedInput { found: f64, index: usize },
    #[error("checkpoint: bad magic")]
    BadMagic,
    #[error("checkpoint: unexpected end of file")]
    Truncated,
    #[error("checkpoint: {0}")]
    Malformed(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Shared architecture knobs for all three networks.
///
/// `channel_scale` multiplies every base channel count (floored, minimum 1)
/// and the first two fully connected widths (floored, minimum 4); the last
/// two stay at 64 and 1 so the regression head keeps its shape. At scale 1
/// and side 96 the widths equal the full-size reference architecture.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ArchConfig {
    /// Cube side of the input volume in voxels; must be divisible by 32.
    pub input_side: usize,
    /// Multiplier in (0, 1] applied to every base channel count.
    pub channel_scale: f64,
    /// Widths of the four regression head layers; the last must be 1.
    pub fc_units: [usize; 4],
}

impl ArchConfig {
    /// Config with the fully connected widths derived from `channel_scale`.
    pub fn new(input_side: usize, channel_scale: f64) -> Result<Self, NetError> {
        let cfg = Self {
            input_side,
            channel_scale,
            fc_units: [
                scaled_units(FC_BASE[0], channel_scale, 4),
                scaled_units(FC_BASE[1], channel_scale, 4),
                64,
                1,
            ],
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Desk-size default: side 32, channel scale 1/8.
    pub fn desk() -> Self {
        Self::new(32, 0.125).expect("desk config is valid")
    }

    /// Full-size reference: side 96, channel scale 1.
    pub fn paper_size() -> Self {
        Self::new(96, 1.0).expect("full-size config is valid")
    }

    pub fn validate(&self) -> Result<(), NetError> {
        if self.input_side == 0 || self.input_side % 32 != 0 {
            return Err(NetError::BadArch(format!(
                "input_side {} must be a positive multiple of 32",
                self.input_side
            )));
        }
        if !(self.channel_scale > 0.0 && self.channel_scale <= 1.0) {
            return Err(NetError::BadArch(format!(
                "channel_scale {} must lie in (0, 1]",
                self.channel_scale
            )));
        }
        if self.fc_units.iter().any(|&u| u == 0) {
            return Err(NetError::BadArch(format!(
                "fc_units {:?} must all be positive",
                self.fc_units
            )));
        }
        if self.fc_units[3] != 1 {
            return Err(NetError::BadArch(format!(
                "final fc width must be 1 (one predicted age per sample), got {}",
                self.fc_units[3]
            )));
        }
        Ok(())
    }

    /// Encoder stage widths after channel scaling.
    pub fn encoder_channels(&self) -> [usize; 5] {
        ENC_BASE.map(|c| scaled_units(c, self.channel_scale, 1))
    }

    /// Decoder stage widths after channel scaling.
    pub fn decoder_channels(&self) -> [usize; 5] {
        DEC_BASE.map(|c| scaled_units(c, self.channel_scale, 1))
    }

    /// Regressor stage widths after channel scaling.
    pub fn regressor_channels(&self) -> [usize; 5] {
        REG_BASE.map(|c| scaled_units(c, self.channel_scale, 1))
    }

    /// Shape of the latent produced by encoding a batch of `n` volumes
    /// with side `self.input_side`: four poolings shrink each spatial dim
    /// by 16, and the channel count is the last encoder width.
    pub fn latent_shape(&self, n: usize) -> [usize; 5] {
        let s = self.input_side / 16;
        [n, self.encoder_channels()[4], s, s, s]
    }

    /// Length of the flattened feature entering the regression head.
    pub fn flatten_len(&self) -> usize {
        let s = self.input_side / 32;
        self.regressor_channels()[4] * s * s * s
    }
}

fn scaled_units(base: usize, scale: f64, min: usize) -> usize {
    (((base as f64) * scale).floor() as usize).max(min)
}

/// Encoder plus decoder; `generate` runs them back to back.
#[derive(Debug, Clone)]
pub struct Generator<S> {
    pub cfg: ArchConfig,
    /// Five conv3+relu stages with a 2x pooling between consecutive stages.
    pub enc: ParamSet<S>,
    /// Five conv3+relu stages with a 2x upsampling between consecutive
    /// stages, closed by a 1x1x1 convolution back to one channel.
    pub dec: ParamSet<S>,
}

/// Scores volumes with the encoder topology plus a scalar head.
#[derive(Debug, Clone)]
pub struct Critic<S> {
    pub cfg: ArchConfig,
    pub params: ParamSet<S>,
}

/// Predicts one age per volume: five pooled residual stages, then four
/// fully connected layers.
#[derive(Debug, Clone)]
pub struct Regressor<S> {
    pub cfg: ArchConfig,
    pub params: ParamSet<S>,
}

/// Draws weights from N(0, 2/fan_in) and zeros biases, consuming the rng
/// in block insertion order so a seed pins every parameter.
struct Init<'r, S> {
    rng: &'r mut ChaCha8Rng,
    _marker: std::marker::PhantomData<S>,
}

impl<'r, S: Scalar> Init<'r, S> {
    fn new(rng: &'r mut ChaCha8Rng) -> Self {
        Self {
            rng,
            _marker: std::marker::PhantomData,
        }
    }

    fn weight(&mut self, set: &mut ParamSet<S>, name: &str, shape: Vec<usize>, fan_in: usize) {
        let std = (2.0 / fan_in as f64).sqrt();
        let n: usize = shape.iter().product();
        let values: Vec<S> = (0..n)
            .map(|_| {
                let z: f64 = self.rng.sample(StandardNormal);
                S::lit(z * std)
            })
            .collect();
        let t = DiffTensor::new(shape, values).expect("init shape matches value count");
        set.add(name, t).expect("init names are unique");
    }

    fn bias(&mut self, set: &mut ParamSet<S>, name: &str, len: usize) {
        set.add(name, DiffTensor::zeros(vec![len]))
            .expect("init names are unique");
    }
}

impl<S: Scalar> Generator<S> {
    pub fn new(cfg: ArchConfig, seed: u64) -> Result<Self, NetError> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut init = Init::new(&mut rng);

        let ec = cfg.encoder_channels();
        let mut enc = ParamSet::new();
        let mut cin = 1;
        for (i, &cout) in ec.iter().enumerate() {
            init.weight(&mut enc, &format!("e{}.k", i + 1), vec![cout, cin, 3, 3, 3], cin * 27);
            init.bias(&mut enc, &format!("e{}.b", i + 1), cout);
            cin = cout;
        }

        let dc = cfg.decoder_channels();
        let mut dec = ParamSet::new();
        let mut cin = ec[4];
        for (i, &cout) in dc.iter().enumerate() {
            init.weight(&mut dec, &format!("d{}.k", i + 1), vec![cout, cin, 3, 3, 3], cin * 27);
            init.bias(&mut dec, &format!("d{}.b", i + 1), cout);
            if i < 4 {
                // Upsampling kernels are 2x2x2 with stride 2, so each output
                // voxel sees exactly one tap per input channel.
                init.weight(&mut dec, &format!("u{}.k", i + 1), vec![cout, cout, 2, 2, 2], cout);
                init.bias(&mut dec, &format!("u{}.b", i + 1), cout);
            }
            cin = cout;
        }
        init.weight(&mut dec, "out.k", vec![1, dc[4], 1, 1, 1], dc[4]);
        init.bias(&mut dec, "out.b", 1);

        Ok(Self { cfg, enc, dec })
    }

    /// Maps a `[n, 1, side, side, side]` batch in [0, 1] to its latent
    /// `[n, c5, side/16, side/16, side/16]`.
    pub fn encode(
        &self,
        tape: &mut Tape<S>,
        enc: &TapeBinding,
        x: NodeId,
    ) -> Result<NodeId, NetError> {
        check_volume("encode", tape, x, 16)?;
        check_unit_range(tape, x)?;
        let mut h = x;
        for i in 1..=5 {
            let k = enc.id(&self.enc, &format!("e{i}.k"))?;
            let b = enc.id(&self.enc, &format!("e{i}.b"))?;
            let c = tape.conv3(h, k, Some(b))?;
            h = tape.relu(c);
            if i < 5 {
                h = tape.maxpool2(h)?;
            }
        }
        Ok(h)
    }

    /// Maps a latent back to a `[n, 1, side, side, side]` volume. The
    /// output is left unclamped so losses see the raw values; exporters
    /// clamp to [0, 1].
    pub fn decode(
        &self,
        tape: &mut Tape<S>,
        dec: &TapeBinding,
        z: NodeId,
    ) -> Result<NodeId, NetError> {
        let shape = tape.shape(z);
        if shape.len() != 5 {
            return Err(NetError::BadRank {
                op: "decode",
                shape: shape.to_vec(),
            });
        }
        let c5 = self.cfg.encoder_channels()[4];
        if shape[1] != c5 {
            return Err(NetError::Diff(DiffError::Shape {
                op: "decode",
                msg: format!("latent has {} channels, architecture expects {c5}", shape[1]),
            }));
        }
        let mut h = z;
        for i in 1..=5 {
            let k = dec.id(&self.dec, &format!("d{i}.k"))?;
            let b = dec.id(&self.dec, &format!("d{i}.b"))?;
            let c = tape.conv3(h, k, Some(b))?;
            h = tape.relu(c);
            if i < 5 {
                let uk = dec.id(&self.dec, &format!("u{i}.k"))?;
                let ub = dec.id(&self.dec, &format!("u{i}.b"))?;
                h = tape.upconv2(h, uk, Some(ub))?;
            }
        }
        let ok = dec.id(&self.dec, "out.k")?;
        let ob = dec.id(&self.dec, "out.b")?;
        Ok(tape.conv1(h, ok, Some(ob))?)
    }

    /// Reconstruction `decode(encode(x))`.
    pub fn generate(
        &self,
        tape: &mut Tape<S>,
        enc: &TapeBinding,
        dec: &TapeBinding,
        x: NodeId,
    ) -> Result<NodeId, NetError> {
        let z = self.encode(tape, enc, x)?;
        self.decode(tape, dec, z)
    }
}

impl<S: Scalar> Critic<S> {
    pub fn new(cfg: ArchConfig, seed: u64) -> Result<Self, NetError> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut init = Init::new(&mut rng);
        let ec = cfg.encoder_channels();
        let mut params = ParamSet::new();
        let mut cin = 1;
        for (i, &cout) in ec.iter().enumerate() {
            init.weight(&mut params, &format!("c{}.k", i + 1), vec![cout, cin, 3, 3, 3], cin * 27);
            init.bias(&mut params, &format!("c{}.b", i + 1), cout);
            cin = cout;
        }
        init.weight(&mut params, "head.k", vec![1, ec[4], 1, 1, 1], ec[4]);
        init.bias(&mut params, "head.b", 1);
        Ok(Self { cfg, params })
    }

    /// One unbounded score per batch element; shape `[n]`.
    pub fn criticize(
        &self,
        tape: &mut Tape<S>,
        binding: &TapeBinding,
        x: NodeId,
    ) -> Result<NodeId, NetError> {
        check_volume("criticize", tape, x, 16)?;
        let n = tape.shape(x)[0];
        let mut h = x;
        for i in 1..=5 {
            let k = binding.id(&self.params, &format!("c{i}.k"))?;
            let b = binding.id(&self.params, &format!("c{i}.b"))?;
            let c = tape.conv3(h, k, Some(b))?;
            h = tape.relu(c);
            if i < 5 {
                h = tape.maxpool2(h)?;
            }
        }
        let hk = binding.id(&self.params, "head.k")?;
        let hb = binding.id(&self.params, "head.b")?;
        let s = tape.conv1(h, hk, Some(hb))?;
        let m = tape.global_mean_spatial(s)?;
        Ok(tape.reshape(m, vec![n])?)
    }
}

impl<S: Scalar> Regressor<S> {
    pub fn new(cfg: ArchConfig, seed: u64) -> Result<Self, NetError> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut init = Init::new(&mut rng);
        let rc = cfg.regressor_channels();
        let mut params = ParamSet::new();
        let mut cin = 1;
        for (i, &cout) in rc.iter().enumerate() {
            init.weight(&mut params, &format!("r{}.a.k", i + 1), vec![cout, cin, 3, 3, 3], cin * 27);
            init.bias(&mut params, &format!("r{}.a.b", i + 1), cout);
            init.weight(&mut params, &format!("r{}.b.k", i + 1), vec![cout, cout, 3, 3, 3], cout * 27);
            init.bias(&mut params, &format!("r{}.b.b", i + 1), cout);
            if cin != cout {
                init.weight(&mut params, &format!("r{}.p.k", i + 1), vec![cout, cin, 1, 1, 1], cin);
            }
            cin = cout;
        }
        let mut fin = cfg.flatten_len();
        for (i, &fout) in cfg.fc_units.iter().enumerate() {
            init.weight(&mut params, &format!("fc{}.w", i + 1), vec![fin, fout], fin);
            init.bias(&mut params, &format!("fc{}.b", i + 1), fout);
            fin = fout;
        }
        Ok(Self { cfg, params })
    }

    /// One predicted age per batch element; shape `[n]`.
    pub fn regress(
        &self,
        tape: &mut Tape<S>,
        binding: &TapeBinding,
        x: NodeId,
    ) -> Result<NodeId, NetError> {
        check_volume("regress", tape, x, 32)?;
        let n = tape.shape(x)[0];
        let mut h = x;
        for i in 1..=5 {
            let ka = binding.id(&self.params, &format!("r{i}.a.k"))?;
            let ba = binding.id(&self.params, &format!("r{i}.a.b"))?;
            let kb = binding.id(&self.params, &format!("r{i}.b.k"))?;
            let bb = binding.id(&self.params, &format!("r{i}.b.b"))?;
            let proj = match binding.id(&self.params, &format!("r{i}.p.k")) {
                Ok(p) => Some(p),
                Err(DiffError::UnknownParam(_)) => None,
                Err(e) => return Err(e.into()),
            };
            h = residual_block(tape, h, ka, ba, kb, bb, proj)?;
            h = tape.maxpool2(h)?;
        }
        let mut f = tape.flatten(h)?;
        for i in 1..=4 {
            let w = binding.id(&self.params, &format!("fc{i}.w"))?;
            let b = binding.id(&self.params, &format!("fc{i}.b"))?;
            f = tape.fc(f, w, b)?;
            if i < 4 {
                f = tape.relu(f);
            }
        }
        Ok(tape.reshape(f, vec![n])?)
    }
}

/// Residual stage: `relu(conv3_b(relu(conv3_a(x))) + skip)`, where `skip`
/// is a 1x1x1 projection of `x` when `proj` is given and `x` itself
/// otherwise. With zero conv weights and biases and no projection this
/// reduces to `relu(x)`.
pub fn residual_block<S: Scalar>(
    tape: &mut Tape<S>,
    x: NodeId,
    ka: NodeId,
    ba: NodeId,
    kb: NodeId,
    bb: NodeId,
    proj: Option<NodeId>,
) -> Result<NodeId, NetError> {
    let a = tape.conv3(x, ka, Some(ba))?;
    let a = tape.relu(a);
    let m = tape.conv3(a, kb, Some(bb))?;
    let skip = match proj {
        Some(p) => tape.conv1(x, p, None)?,
        None => x,
    };
    let s = tape.add(m, skip)?;
    Ok(tape.relu(s))
}

/// Clamps exported volume values into [0, 1]; never used in loss paths.
pub fn clamp_unit<S: Scalar>(values: &mut [S]) {
    for v in values {
        *v = (*v).max(S::zero()).min(S::one());
    }
}

fn check_volume<S: Scalar>(
    op: &'static str,
    tape: &Tape<S>,
    x: NodeId,
    div: usize,
) -> Result<(), NetError> {
    let shape = tape.shape(x);
    if shape.len() != 5 {
        return Err(NetError::BadRank {
            op,
            shape: shape.to_vec(),
        });
    }
    let dims = [shape[2], shape[3], shape[4]];
    if dims.iter().any(|&d| d == 0 || d % div != 0) {
        return Err(NetError::BadSide { op, dims, div });
    }
    Ok(())
}

fn check_unit_range<S: Scalar>(tape: &Tape<S>, x: NodeId) -> Result<(), NetError> {
    let lo = S::lit(-1e-6);
    let hi = S::lit(1.0 + 1e-6);
    for (index, &v) in tape.values(x).iter().enumerate() {
        if !(v >= lo && v <= hi) {
            return Err(NetError::UnnormalizedInput {
                found: v.to_f64_lossy(),
                index,
            });
        }
    }
    Ok(())
}

/// Writes parameter sets to a checkpoint stream: the magic, then one record
/// per block holding the prefixed name, rank, dims, and values, all
/// little-endian with 64-bit lengths and 64-bit float values.
pub fn write_checkpoint<S: Scalar, W: Write>(
    w: &mut W,
    sets: &[(&str, &ParamSet<S>)],
) -> Result<(), NetError> {
    w.write_all(MAGIC)?;
    for (prefix, set) in sets {
        for block in set.blocks() {
            let name = prefixed(prefix, &block.name);
            w.write_all(&(name.len() as u64).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&(block.value.shape.len() as u64).to_le_bytes())?;
            for &d in &block.value.shape {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            for &v in &block.value.values {
                w.write_all(&v.to_f64_lossy().to_le_bytes())?;
            }
        }
    }
    Ok(())
}

/// Reads a checkpoint stream written by [`write_checkpoint`] back into the
/// given sets. Every stored block must match an existing block's name and
/// shape, and every expected block must be present.
pub fn read_checkpoint<S: Scalar, R: Read>(
    r: &mut R,
    sets: &mut [(&str, &mut ParamSet<S>)],
) -> Result<(), NetError> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(eof_as_truncated)?;
    if &magic != MAGIC {
        return Err(NetError::BadMagic);
    }
    let mut records: HashMap<String, (Vec<usize>, Vec<f64>)> = HashMap::new();
    while let Some(name_len) = read_u64_or_eof(r)? {
        let name_len = usize::try_from(name_len)
            .map_err(|_| NetError::Malformed("name length overflows".into()))?;
        if name_len > 4096 {
            return Err(NetError::Malformed(format!(
                "name length {name_len} exceeds the 4096-byte limit"
            )));
        }
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name).map_err(eof_as_truncated)?;
        let name = String::from_utf8(name)
            .map_err(|_| NetError::Malformed("block name is not utf-8".into()))?;
        let rank = read_u64(r)? as usize;
        if rank > 8 {
            return Err(NetError::Malformed(format!(
                "rank {rank} exceeds the supported maximum of 8"
            )));
        }
        let mut shape = Vec::with_capacity(rank);
        let mut count: usize = 1;
        for _ in 0..rank {
            let d = usize::try_from(read_u64(r)?)
                .map_err(|_| NetError::Malformed("dimension overflows".into()))?;
            count = count
                .checked_mul(d)
                .filter(|&c| c <= (1 << 33))
                .ok_or_else(|| NetError::Malformed("element count overflows".into()))?;
            shape.push(d);
        }
        let mut values = Vec::with_capacity(count);
        let mut buf = [0u8; 8];
        for _ in 0..count {
            r.read_exact(&mut buf).map_err(eof_as_truncated)?;
            values.push(f64::from_le_bytes(buf));
        }
        if records.insert(name.clone(), (shape, values)).is_some() {
            return Err(NetError::Malformed(format!("duplicate block {name:?}")));
        }
    }
    for (prefix, set) in sets.iter_mut() {
        for block in set.blocks_mut() {
            let name = prefixed(prefix, &block.name);
            let (shape, values) = records
                .remove(&name)
                .ok_or_else(|| NetError::Malformed(format!("missing block {name:?}")))?;
            if shape != block.value.shape {
                return Err(NetError::Malformed(format!(
                    "block {name:?} has shape {shape:?}, expected {:?}",
                    block.value.shape
                )));
            }
            for (dst, v) in block.value.values.iter_mut().zip(values) {
                *dst = S::lit(v);
            }
        }
    }
    if let Some(name) = records.into_keys().next() {
        return Err(NetError::Malformed(format!("unexpected block {name:?}")));
    }
    Ok(())
}

/// [`write_checkpoint`] to a buffered file.
pub fn save_checkpoint<S: Scalar>(
    path: impl AsRef<Path>,
    sets: &[(&str, &ParamSet<S>)],
) -> Result<(), NetError> {
    let mut w = BufWriter::new(File::create(path)?);
    write_checkpoint(&mut w, sets)?;
    w.flush()?;
    Ok(())
}

/// [`read_checkpoint`] from a buffered file.
pub fn load_checkpoint<S: Scalar>(
    path: impl AsRef<Path>,
    sets: &mut [(&str, &mut ParamSet<S>)],
) -> Result<(), NetError> {
    let mut r = BufReader::new(File::open(path)?);
    read_checkpoint(&mut r, sets)
}

fn prefixed(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64, NetError> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf).map_err(eof_as_truncated)?;
    Ok(u64::from_le_bytes(buf))
}

/// Reads a u64, mapping a clean end of stream to `None` and a partial read
/// to [`NetError::Truncated`].
fn read_u64_or_eof<R: Read>(r: &mut R) -> Result<Option<u64>, NetError> {
    let mut buf = [0u8; 8];
    let mut filled = 0;
    while filled < 8 {
        let n = r.read(&mut buf[filled..])?;
        if n == 0 {
            return if filled == 0 {
                Ok(None)
            } else {
                Err(NetError::Truncated)
            };
        }
        filled += n;
    }
    Ok(Some(u64::from_le_bytes(buf)))
}

fn eof_as_truncated(e: std::io::Error) -> NetError {
    if e.kind() == std::io::ErrorKind::UnexpectedEof {
        NetError::Truncated
    } else {
        NetError::Io(e)
    }
}
