//! Optimization machinery (Adam, step-decay schedule) and the three
//! experiment arms: plain regression, regression on GAN-augmented data,
//! and regression on data from the task-guided GAN.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::diffgrid::{DiffError, NodeId, ParamSet, Tape};
use crate::latentsynth::{
    balance_dataset, write_manifest, BalancingPolicy, SynthError, SynthesisSource,
};
use crate::nets::{save_checkpoint, ArchConfig, Critic, Generator, NetError, Regressor};
use crate::objectives::{
    compose_critic_objective, compose_generator_objective, gradient_penalty, loss_gan, loss_l1,
    loss_task, total_objective, LossBreakdown, LossParts, LossWeights, ObjError,
};
use crate::phantom::{Dataset, Provenance, Split};
use crate::scalar::Scalar;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Any logged loss whose magnitude crosses this aborts GAN training.
pub const DIVERGENCE_GUARD: f64 = 1e6;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("{0} split is empty")]
    EmptySplit(&'static str),
    #[error("invalid training config: {0}")]
    BadConfig(String),
    #[error("training data: {0}")]
    Data(String),
    #[error("optimizer state does not match parameters: {0}")]
    StateMismatch(String),
    #[error("no gradient for block {0}; run a backward pass first")]
    GradMissing(String),
    #[error("loss {term} reached {value:e} at step {step}, past the divergence guard")]
    Diverged {
        step: u64,
        term: &'static str,
        value: f64,
    },
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Obj(#[from] ObjError),
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("config serialization: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

/// Hyperparameters shared by every arm. Defaults: 100 GAN epochs and 200
/// regression epochs at batch size 20, learning rate 1e-4 multiplied by
/// 0.8 every 10 epochs, one critic step per generator step.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TrainConfig {
    pub epochs_gan: usize,
    pub epochs_reg: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub decay_factor: f64,
    pub decay_every: usize,
    pub critic_steps: usize,
    pub weights: LossWeights<f64>,
    pub balance: BalancingPolicy,
    pub seed: u64,
    pub arch: ArchConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs_gan: 100,
            epochs_reg: 200,
            batch_size: 20,
            lr: 1e-4,
            decay_factor: 0.8,
            decay_every: 10,
            critic_steps: 1,
            weights: LossWeights::default(),
            balance: BalancingPolicy::default(),
            seed: 0,
            arch: ArchConfig::desk(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |msg: String| Err(TrainError::BadConfig(msg));
        if self.epochs_gan == 0 || self.epochs_reg == 0 {
            return bad("epoch counts must be positive".into());
        }
        if self.batch_size == 0 {
            return bad("batch size must be positive".into());
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return bad(format!("learning rate {} must be positive", self.lr));
        }
        if !(self.decay_factor > 0.0 && self.decay_factor <= 1.0) {
            return bad(format!("decay factor {} must lie in (0, 1]", self.decay_factor));
        }
        if self.decay_every == 0 {
            return bad("decay interval must be positive".into());
        }
        if self.critic_steps == 0 {
            return bad("critic steps must be positive".into());
        }
        let weights = cast_weights::<f64>(&self.weights);
        weights.validate()?;
        self.balance.validate()?;
        self.arch.validate()?;
        Ok(())
    }
}

/// Learning rate for `epoch`: the base rate decayed once per
/// `decay_every` completed epochs.
pub fn lr_at(epoch: usize, cfg: &TrainConfig) -> f64 {
    cfg.lr * cfg.decay_factor.powi((epoch / cfg.decay_every) as i32)
}

fn cast_weights<S: Scalar>(w: &LossWeights<f64>) -> LossWeights<S> {
    LossWeights {
        alpha: S::lit(w.alpha),
        beta: S::lit(w.beta),
        gp_lambda: S::lit(w.gp_lambda),
    }
}

/// splitmix64-style finalizer deriving stream seeds from (master, index).
fn mix64(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// First and second moment accumulators for one parameter set.
#[derive(Debug, Clone)]
pub struct AdamState<S> {
    m: Vec<Vec<S>>,
    v: Vec<Vec<S>>,
    step: u64,
}

impl<S: Scalar> AdamState<S> {
    /// Zeroed moments shaped like `params`.
    pub fn new(params: &ParamSet<S>) -> Self {
        let zeros: Vec<Vec<S>> = params
            .blocks()
            .iter()
            .map(|b| vec![S::zero(); b.value.numel()])
            .collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }

    /// Update steps taken so far.
    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// One bias-corrected Adam update from the gradients stored in `params`.
///
/// Gradients must have been absorbed into the blocks (see
/// `ParamSet::absorb_grads`); a missing gradient is an error rather than
/// a silent skip. A zero gradient leaves a parameter bitwise unchanged.
pub fn adam_step<S: Scalar>(
    params: &mut ParamSet<S>,
    state: &mut AdamState<S>,
    lr: S,
) -> Result<(), TrainError> {
    if state.m.len() != params.blocks().len() {
        return Err(TrainError::StateMismatch(format!(
            "state has {} blocks, parameters have {}",
            state.m.len(),
            params.blocks().len()
        )));
    }
    state.step += 1;
    let b1 = S::lit(ADAM_BETA1);
    let b2 = S::lit(ADAM_BETA2);
    let eps = S::lit(ADAM_EPS);
    let c1 = S::one() - b1.powi(state.step as i32);
    let c2 = S::one() - b2.powi(state.step as i32);
    for (bi, block) in params.blocks_mut().iter_mut().enumerate() {
        let n = block.value.numel();
        if state.m[bi].len() != n {
            return Err(TrainError::StateMismatch(format!(
                "state block {bi} holds {} moments, block {:?} has {n} parameters",
                state.m[bi].len(),
                block.name
            )));
        }
        let grad = block
            .value
            .grad
            .as_ref()
            .ok_or_else(|| TrainError::GradMissing(block.name.clone()))?;
        let values = &mut block.value.values;
        let (m, v) = (&mut state.m[bi], &mut state.v[bi]);
        for k in 0..n {
            let g = grad[k];
            m[k] = b1 * m[k] + (S::one() - b1) * g;
            v[k] = b2 * v[k] + (S::one() - b2) * g * g;
            let m_hat = m[k] / c1;
            let v_hat = v[k] / c2;
            values[k] = values[k] - lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

/// One row of the regression training curve.
#[derive(Debug, Clone, PartialEq)]
pub struct RegEpoch {
    pub epoch: usize,
    pub lr: f64,
    pub train_mse: f64,
    pub val_mse: f64,
}

/// Regression training result: the best-on-validation model plus the
/// full curve.
#[derive(Debug, Clone)]
pub struct RegOutcome<S> {
    pub regressor: Regressor<S>,
    pub curve: Vec<RegEpoch>,
    pub best_epoch: usize,
    pub best_val_mse: f64,
}

fn split_batch<S: Scalar>(
    ds: &Dataset<S>,
    idx: &[usize],
    side: usize,
) -> Result<(Vec<S>, Vec<S>, [usize; 5]), TrainError> {
    let mut xs = Vec::with_capacity(idx.len() * side * side * side);
    let mut ys = Vec::with_capacity(idx.len());
    for &i in idx {
        let s = &ds.samples[i];
        if s.volume.dims != [side; 3] {
            return Err(TrainError::Data(format!(
                "sample {} has dims {:?}, architecture expects {:?}",
                s.id,
                s.volume.dims,
                [side; 3]
            )));
        }
        xs.extend_from_slice(&s.volume.values);
        ys.push(S::lit(s.age));
    }
    Ok((xs, ys, [idx.len(), 1, side, side, side]))
}

fn nonempty(indices: Vec<usize>, name: &'static str) -> Result<Vec<usize>, TrainError> {
    if indices.is_empty() {
        return Err(TrainError::EmptySplit(name));
    }
    Ok(indices)
}

/// Mean squared prediction error of `r` over the given samples, computed
/// without gradients in `batch`-sized chunks.
fn eval_mse<S: Scalar>(
    r: &Regressor<S>,
    ds: &Dataset<S>,
    idx: &[usize],
    batch: usize,
    side: usize,
) -> Result<f64, TrainError> {
    let mut sq = 0.0;
    for chunk in idx.chunks(batch) {
        let (xs, _, shape) = split_batch(ds, chunk, side)?;
        let mut tape = Tape::new();
        let binding = r.params.bind_const(&mut tape);
        let x = tape.leaf_from(&shape, &xs, false);
        let pred = r.regress(&mut tape, &binding, x)?;
        for (&p, &i) in tape.values(pred).iter().zip(chunk) {
            let d = p.to_f64_lossy() - ds.samples[i].age;
            sq += d * d;
        }
    }
    Ok(sq / idx.len() as f64)
}

/// Trains a regressor on the training split (real and synthetic alike),
/// keeping the parameters of the epoch with the lowest validation MSE.
pub fn train_reg<S: Scalar>(
    dataset: &Dataset<S>,
    cfg: &TrainConfig,
) -> Result<RegOutcome<S>, TrainError> {
    cfg.validate()?;
    let side = cfg.arch.input_side;
    let train = nonempty(dataset.split_indices(Split::Train), "train")?;
    let val = nonempty(dataset.split_indices(Split::Val), "val")?;

    let mut reg = Regressor::<S>::new(cfg.arch.clone(), cfg.seed)?;
    let mut adam = AdamState::new(&reg.params);
    let mut curve = Vec::with_capacity(cfg.epochs_reg);
    let mut best: Option<(usize, f64, ParamSet<S>)> = None;

    let mut order = train;
    for epoch in 0..cfg.epochs_reg {
        let lr = lr_at(epoch, cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(mix64(cfg.seed, epoch as u64));
        order.shuffle(&mut rng);
        let mut sq_sum = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let (xs, ys, shape) = split_batch(dataset, chunk, side)?;
            let mut tape = Tape::new();
            let binding = reg.params.bind(&mut tape);
            let x = tape.leaf_from(&shape, &xs, false);
            let y = tape.leaf_from(&[chunk.len()], &ys, false);
            let pred = reg.regress(&mut tape, &binding, x)?;
            let loss = loss_task(&mut tape, y, pred)?;
            let grads = tape.backward_graph(loss, &binding.ids)?;
            reg.params.absorb_grads(&tape, &binding, &grads);
            adam_step(&mut reg.params, &mut adam, S::lit(lr))?;
            sq_sum += tape.scalar(loss).to_f64_lossy() * chunk.len() as f64;
        }
        let train_mse = sq_sum / order.len() as f64;
        let val_mse = eval_mse(&reg, dataset, &val, cfg.batch_size, side)?;
        curve.push(RegEpoch {
            epoch,
            lr,
            train_mse,
            val_mse,
        });
        if best.as_ref().map_or(true, |(_, b, _)| val_mse < *b) {
            best = Some((epoch, val_mse, reg.params.clone()));
        }
    }

    let (best_epoch, best_val_mse, params) = best.expect("at least one epoch ran");
    reg.params = params;
    Ok(RegOutcome {
        regressor: reg,
        curve,
        best_epoch,
        best_val_mse,
    })
}

/// GAN training result. The regressor is present only when the task
/// branch was trained alongside the generator.
#[derive(Debug, Clone)]
pub struct GanOutcome<S> {
    pub generator: Generator<S>,
    pub critic: Critic<S>,
    pub regressor: Option<Regressor<S>>,
    /// One logged breakdown per completed critic/generator alternation.
    pub steps: Vec<LossBreakdown<f64>>,
    /// Mean reconstruction L1 over the validation split after training.
    pub val_recon_l1: f64,
}

fn guard_breakdown(step: u64, b: &LossBreakdown<f64>) -> Result<(), TrainError> {
    for (term, v) in [
        ("l_gan", b.l_gan),
        ("gp", b.gp),
        ("l_l1", b.l_l1),
        ("l_task", b.l_task),
        ("total_g", b.total_g),
        ("total_d", b.total_d),
    ] {
        if v.abs() > DIVERGENCE_GUARD {
            return Err(TrainError::Diverged {
                step,
                term,
                value: v,
            });
        }
    }
    Ok(())
}

/// Adversarial training with Wasserstein losses and gradient penalty:
/// `critic_steps` critic updates per generator update, the generator
/// objective combining the adversarial term with weighted reconstruction
/// and (optionally) task terms. With the task branch the regressor is
/// updated jointly with the generator on reconstructed volumes.
pub fn train_gan<S: Scalar>(
    dataset: &Dataset<S>,
    cfg: &TrainConfig,
    with_task_branch: bool,
) -> Result<GanOutcome<S>, TrainError> {
    cfg.validate()?;
    let side = cfg.arch.input_side;
    let train = nonempty(dataset.split_indices(Split::Train), "train")?;
    let val = nonempty(dataset.split_indices(Split::Val), "val")?;
    let weights = cast_weights::<S>(&cfg.weights);

    let mut gen = Generator::<S>::new(cfg.arch.clone(), mix64(cfg.seed, 1))?;
    let mut critic = Critic::<S>::new(cfg.arch.clone(), mix64(cfg.seed, 2))?;
    let mut reg = if with_task_branch {
        Some(Regressor::<S>::new(cfg.arch.clone(), mix64(cfg.seed, 3))?)
    } else {
        None
    };

    let mut adam_enc = AdamState::new(&gen.enc);
    let mut adam_dec = AdamState::new(&gen.dec);
    let mut adam_critic = AdamState::new(&critic.params);
    let mut adam_reg = reg.as_ref().map(|r| AdamState::new(&r.params));

    let mut steps: Vec<LossBreakdown<f64>> = Vec::new();
    let mut order = train;
    for epoch in 0..cfg.epochs_gan {
        let lr = S::lit(lr_at(epoch, cfg));
        let mut rng = ChaCha8Rng::seed_from_u64(mix64(cfg.seed, 0x6A17 ^ epoch as u64));
        order.shuffle(&mut rng);
        for (bi, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let (xs, ys, shape) = split_batch(dataset, chunk, side)?;

            // Critic update: generator frozen, penalty on mixed inputs.
            let (critic_scalar, gp_scalar) = {
                let mut tape = Tape::new();
                let enc_b = gen.enc.bind_const(&mut tape);
                let dec_b = gen.dec.bind_const(&mut tape);
                let critic_b = critic.params.bind(&mut tape);
                let x = tape.leaf_from(&shape, &xs, false);
                let z = gen.encode(&mut tape, &enc_b, x)?;
                let fake = gen.decode(&mut tape, &dec_b, z)?;
                let d_real = critic.criticize(&mut tape, &critic_b, x)?;
                let d_fake = critic.criticize(&mut tape, &critic_b, fake)?;
                let (critic_loss, _) = loss_gan(&mut tape, d_real, d_fake)?;
                let t: Vec<S> = (0..chunk.len()).map(|_| S::lit(rng.gen())).collect();
                let gp = gradient_penalty(
                    &mut tape,
                    x,
                    fake,
                    &t,
                    weights.gp_lambda,
                    |tape, mixed| {
                        critic
                            .criticize(tape, &critic_b, mixed)
                            .map_err(|e| ObjError::Closure(e.to_string()))
                    },
                )?;
                let total_d = compose_critic_objective(&mut tape, critic_loss, gp)?;
                let grads = tape.backward_graph(total_d, &critic_b.ids)?;
                critic.params.absorb_grads(&tape, &critic_b, &grads);
                adam_step(&mut critic.params, &mut adam_critic, lr)?;
                (
                    tape.scalar(critic_loss).to_f64_lossy(),
                    tape.scalar(gp).to_f64_lossy(),
                )
            };

            // Generator (and task branch) update on the same batch, once
            // per `critic_steps` batches.
            if (bi + 1) % cfg.critic_steps == 0 {
                let mut tape = Tape::new();
                let enc_b = gen.enc.bind(&mut tape);
                let dec_b = gen.dec.bind(&mut tape);
                let critic_b = critic.params.bind_const(&mut tape);
                let x = tape.leaf_from(&shape, &xs, false);
                let z = gen.encode(&mut tape, &enc_b, x)?;
                let fake = gen.decode(&mut tape, &dec_b, z)?;
                let d_fake = critic.criticize(&mut tape, &critic_b, fake)?;
                let mean_fake = tape.mean(d_fake)?;
                let gen_loss = tape.neg(mean_fake);
                let l1 = loss_l1(&mut tape, x, fake)?;
                let (task, reg_b) = match reg.as_ref() {
                    Some(r) => {
                        let reg_b = r.params.bind(&mut tape);
                        let y = tape.leaf_from(&[chunk.len()], &ys, false);
                        let pred = r.regress(&mut tape, &reg_b, fake)?;
                        (loss_task(&mut tape, y, pred)?, Some(reg_b))
                    }
                    None => (tape.leaf_from(&[], &[S::zero()], false), None),
                };
                let total_g = compose_generator_objective(&mut tape, &weights, gen_loss, l1, task)?;

                let mut wrt: Vec<NodeId> = Vec::new();
                wrt.extend_from_slice(&enc_b.ids);
                wrt.extend_from_slice(&dec_b.ids);
                if let Some(rb) = &reg_b {
                    wrt.extend_from_slice(&rb.ids);
                }
                let grads = tape.backward_graph(total_g, &wrt)?;
                gen.enc.absorb_grads(&tape, &enc_b, &grads);
                gen.dec.absorb_grads(&tape, &dec_b, &grads);
                adam_step(&mut gen.enc, &mut adam_enc, lr)?;
                adam_step(&mut gen.dec, &mut adam_dec, lr)?;
                if let (Some(r), Some(rb)) = (reg.as_mut(), reg_b.as_ref()) {
                    r.params.absorb_grads(&tape, rb, &grads);
                    adam_step(&mut r.params, adam_reg.as_mut().expect("state with branch"), lr)?;
                }

                let parts = LossParts {
                    critic_loss: critic_scalar,
                    gen_loss: tape.scalar(gen_loss).to_f64_lossy(),
                    l_l1: tape.scalar(l1).to_f64_lossy(),
                    l_task: tape.scalar(task).to_f64_lossy(),
                    gp: gp_scalar,
                };
                let breakdown = total_objective(&cast_weights::<f64>(&cfg.weights), &parts)?;
                guard_breakdown(steps.len() as u64, &breakdown)?;
                steps.push(breakdown);
            }
        }
    }

    let val_recon_l1 = eval_recon_l1(&gen, dataset, &val, cfg.batch_size, side)?;
    Ok(GanOutcome {
        generator: gen,
        critic,
        regressor: reg,
        steps,
        val_recon_l1,
    })
}

/// Mean absolute reconstruction error of `g` over the given samples.
fn eval_recon_l1<S: Scalar>(
    g: &Generator<S>,
    ds: &Dataset<S>,
    idx: &[usize],
    batch: usize,
    side: usize,
) -> Result<f64, TrainError> {
    let mut sum = 0.0;
    for chunk in idx.chunks(batch) {
        let (xs, _, shape) = split_batch(ds, chunk, side)?;
        let mut tape = Tape::new();
        let enc_b = g.enc.bind_const(&mut tape);
        let dec_b = g.dec.bind_const(&mut tape);
        let x = tape.leaf_from(&shape, &xs, false);
        let recon = g.generate(&mut tape, &enc_b, &dec_b, x)?;
        let l1 = loss_l1(&mut tape, x, recon)?;
        sum += tape.scalar(l1).to_f64_lossy() * chunk.len() as f64;
    }
    Ok(sum / idx.len() as f64)
}

/// The three experiment arms.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Arm {
    Reg,
    RegGan,
    RegGanTgb,
}

impl Arm {
    pub fn as_str(&self) -> &'static str {
        match self {
            Arm::Reg => "REG",
            Arm::RegGan => "REG_GAN",
            Arm::RegGanTgb => "REG_GAN_TGB",
        }
    }

    /// Whether this arm trains a GAN and augments the dataset.
    pub fn augments(&self) -> bool {
        !matches!(self, Arm::Reg)
    }

    /// Whether the GAN stage carries the task branch.
    pub fn task_branch(&self) -> bool {
        matches!(self, Arm::RegGanTgb)
    }
}

/// One test-set prediction.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub id: String,
    pub age_true: f64,
    pub age_pred: f64,
}

/// Everything an arm reports after training and evaluation.
#[derive(Debug, Clone)]
pub struct ExperimentReport {
    pub arm: Arm,
    /// Hash of the regression-stage configuration; equal across arms fed
    /// the same config, pinning the "only the data differs" guarantee.
    pub config_hash: String,
    pub test_ids: Vec<String>,
    pub test_mse: f64,
    pub test_mae: f64,
    pub best_epoch: usize,
    pub best_val_mse: f64,
    pub synthetic_added: usize,
    /// Validation reconstruction L1 of the GAN stage, when one ran.
    pub val_recon_l1: Option<f64>,
    pub predictions: Vec<Prediction>,
}

fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Hash of the fields that shape the regression stage. Arms sharing a
/// config share this value no matter which data they trained on.
pub fn reg_stage_hash(cfg: &TrainConfig) -> String {
    let key = format!(
        "epochs_reg={};batch={};lr={};decay={}x{};seed={};side={};scale={};fc={:?}",
        cfg.epochs_reg,
        cfg.batch_size,
        cfg.lr,
        cfg.decay_factor,
        cfg.decay_every,
        cfg.seed,
        cfg.arch.input_side,
        cfg.arch.channel_scale,
        cfg.arch.fc_units,
    );
    format!("{:016x}", fnv1a64(key.as_bytes()))
}

#[derive(serde::Serialize)]
struct ConfigRecord<'c> {
    arm: &'static str,
    config_hash: &'c str,
    config: &'c TrainConfig,
}

#[derive(serde::Serialize)]
struct SummaryRecord<'c> {
    arm: &'static str,
    config_hash: &'c str,
    n_test: usize,
    test_mse: f64,
    test_mae: f64,
    best_epoch: usize,
    best_val_mse: f64,
    synthetic_added: usize,
    val_recon_l1: Option<f64>,
    train_real_by_year: &'c BTreeMap<i64, usize>,
    test_by_year: &'c BTreeMap<i64, usize>,
}

fn write_reg_curve(path: &Path, curve: &[RegEpoch]) -> Result<(), TrainError> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "epoch,lr,train_mse,val_mse")?;
    for row in curve {
        writeln!(w, "{},{},{},{}", row.epoch, row.lr, row.train_mse, row.val_mse)?;
    }
    w.flush()?;
    Ok(())
}

fn write_gan_steps(path: &Path, steps: &[LossBreakdown<f64>]) -> Result<(), TrainError> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "{}", LossBreakdown::<f64>::csv_header())?;
    for (step, b) in steps.iter().enumerate() {
        writeln!(w, "{}", b.csv_row(step as u64))?;
    }
    w.flush()?;
    Ok(())
}

fn write_predictions(path: &Path, preds: &[Prediction]) -> Result<(), TrainError> {
    let mut w = csv::Writer::from_writer(BufWriter::new(File::create(path)?));
    w.write_record(["id", "age_true", "age_pred"])?;
    for p in preds {
        w.write_record([
            p.id.as_str(),
            &p.age_true.to_string(),
            &p.age_pred.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Runs one experiment arm end to end and writes its artifacts into
/// `out_dir`: `config.json`, `losses.csv`, `checkpoint.tgb1` (the final
/// regressor), `predictions.csv`, `summary.json` (headline metrics plus
/// per-year sample counts), and for augmented arms additionally
/// `generator.tgb1`, `manifest.csv`, and `reg_losses.csv` (the
/// regression curve; `losses.csv` then holds the GAN step log).
///
/// Augmented arms train the GAN on the dataset, synthesize until every
/// age group reaches the configured target, then run the identical
/// regression stage on the augmented data.
pub fn run_arm<S: Scalar>(
    arm: Arm,
    dataset: &Dataset<S>,
    cfg: &TrainConfig,
    out_dir: impl AsRef<Path>,
) -> Result<ExperimentReport, TrainError> {
    cfg.validate()?;
    let dir = out_dir.as_ref();
    std::fs::create_dir_all(dir)?;
    let side = cfg.arch.input_side;
    let test = nonempty(dataset.split_indices(Split::Test), "test")?;

    let config_hash = reg_stage_hash(cfg);
    let record = ConfigRecord {
        arm: arm.as_str(),
        config_hash: &config_hash,
        config: cfg,
    };
    std::fs::write(dir.join("config.json"), serde_json::to_string_pretty(&record)?)?;

    let mut synthetic_added = 0;
    let mut val_recon_l1 = None;
    let reg_dataset = if arm.augments() {
        let gan = train_gan(dataset, cfg, arm.task_branch())?;
        write_gan_steps(&dir.join("losses.csv"), &gan.steps)?;
        save_checkpoint(
            dir.join("generator.tgb1"),
            &[("enc", &gan.generator.enc), ("dec", &gan.generator.dec)],
        )?;
        val_recon_l1 = Some(gan.val_recon_l1);
        let source = SynthesisSource::new(gan.generator, cfg.epochs_gan);
        let mut rng = ChaCha8Rng::seed_from_u64(mix64(cfg.seed, 0xBA1A));
        let (augmented, report) = balance_dataset(&source, dataset, &cfg.balance, &mut rng)?;
        write_manifest(dir.join("manifest.csv"), &report.manifest)?;
        synthetic_added = report.total_added();
        augmented
    } else {
        dataset.clone()
    };

    let reg = train_reg(&reg_dataset, cfg)?;
    let curve_path = if arm.augments() {
        dir.join("reg_losses.csv")
    } else {
        dir.join("losses.csv")
    };
    write_reg_curve(&curve_path, &reg.curve)?;
    save_checkpoint(dir.join("checkpoint.tgb1"), &[("regressor", &reg.regressor.params)])?;

    let mut predictions = Vec::with_capacity(test.len());
    for chunk in test.chunks(cfg.batch_size) {
        let (xs, _, shape) = split_batch(dataset, chunk, side)?;
        let mut tape = Tape::new();
        let binding = reg.regressor.params.bind_const(&mut tape);
        let x = tape.leaf_from(&shape, &xs, false);
        let pred = reg.regressor.regress(&mut tape, &binding, x)?;
        for (&p, &i) in tape.values(pred).iter().zip(chunk) {
            predictions.push(Prediction {
                id: dataset.samples[i].id.clone(),
                age_true: dataset.samples[i].age,
                age_pred: p.to_f64_lossy(),
            });
        }
    }
    write_predictions(&dir.join("predictions.csv"), &predictions)?;

    let n = predictions.len() as f64;
    let test_mse = predictions
        .iter()
        .map(|p| (p.age_pred - p.age_true).powi(2))
        .sum::<f64>()
        / n;
    let test_mae = predictions
        .iter()
        .map(|p| (p.age_pred - p.age_true).abs())
        .sum::<f64>()
        / n;

    let mut train_real_by_year = BTreeMap::new();
    let mut test_by_year = BTreeMap::new();
    for s in &dataset.samples {
        let year = s.age.floor() as i64;
        if s.provenance == Provenance::Real && s.split == Split::Train {
            *train_real_by_year.entry(year).or_insert(0) += 1;
        } else if s.split == Split::Test {
            *test_by_year.entry(year).or_insert(0) += 1;
        }
    }
    let summary = SummaryRecord {
        arm: arm.as_str(),
        config_hash: &config_hash,
        n_test: predictions.len(),
        test_mse,
        test_mae,
        best_epoch: reg.best_epoch,
        best_val_mse: reg.best_val_mse,
        synthetic_added,
        val_recon_l1,
        train_real_by_year: &train_real_by_year,
        test_by_year: &test_by_year,
    };
    std::fs::write(dir.join("summary.json"), serde_json::to_string_pretty(&summary)?)?;

    Ok(ExperimentReport {
        arm,
        config_hash,
        test_ids: test.iter().map(|&i| dataset.samples[i].id.clone()).collect(),
        test_mse,
        test_mae,
        best_epoch: reg.best_epoch,
        best_val_mse: reg.best_val_mse,
        synthetic_added,
        val_recon_l1,
        predictions,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_decays_stepwise() {
        let cfg = TrainConfig::default();
        assert_eq!(lr_at(0, &cfg), 1e-4);
        assert_eq!(lr_at(9, &cfg), 1e-4);
        assert!((lr_at(10, &cfg) - 8e-5).abs() < 1e-18);
        assert!((lr_at(25, &cfg) - 6.4e-5).abs() < 1e-18);
        for e in 1..100 {
            assert!(lr_at(e, &cfg) <= lr_at(e - 1, &cfg));
        }
    }

    #[test]
    fn config_defaults_and_validation() {
        let cfg = TrainConfig::default();
        assert_eq!(cfg.epochs_gan, 100);
        assert_eq!(cfg.epochs_reg, 200);
        assert_eq!(cfg.batch_size, 20);
        assert_eq!(cfg.lr, 1e-4);
        assert_eq!(cfg.decay_factor, 0.8);
        assert_eq!(cfg.decay_every, 10);
        assert_eq!(cfg.critic_steps, 1);
        cfg.validate().unwrap();

        let bad = TrainConfig {
            batch_size: 0,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn arm_labels_and_structure() {
        assert_eq!(Arm::Reg.as_str(), "REG");
        assert_eq!(Arm::RegGan.as_str(), "REG_GAN");
        assert_eq!(Arm::RegGanTgb.as_str(), "REG_GAN_TGB");
        assert!(!Arm::Reg.augments());
        assert!(Arm::RegGan.augments() && !Arm::RegGan.task_branch());
        assert!(Arm::RegGanTgb.task_branch());
    }
}
