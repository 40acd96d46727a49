//! Loss-term behavior: closed-form values, batch guards, penalty oracles,
//! and gradient flow through composed objectives.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tgb_core::diffgrid::{
    gradcheck, DiffError, DiffTensor, GradCheckConfig, NodeId, ParamSet, TapeBinding,
};
use tgb_core::objectives::{
    compose_critic_objective, compose_generator_objective, gradient_penalty, loss_gan, loss_l1,
    loss_task, total_objective, LossBreakdown, LossParts, LossWeights, ObjError,
};
use tgb_core::Tape64;

fn randn(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let (a, b): (f64, f64) = (rng.gen::<f64>().max(1e-12), rng.gen());
            (-2.0 * a.ln()).sqrt() * (std::f64::consts::TAU * b).cos()
        })
        .collect()
}

fn leaf(tape: &mut Tape64, shape: &[usize], values: &[f64]) -> NodeId {
    tape.leaf_from(shape, values, false)
}

#[test]
fn gan_values_match_hand_arithmetic() {
    let mut tape = Tape64::new();
    let real = leaf(&mut tape, &[1], &[0.8]);
    let fake = leaf(&mut tape, &[1], &[0.3]);
    let (critic, gen) = loss_gan(&mut tape, real, fake).unwrap();
    assert_eq!(tape.scalar(critic), -0.5);
    assert_eq!(tape.scalar(gen), -0.3);

    let same = leaf(&mut tape, &[3], &[0.2, -0.1, 0.6]);
    let (zero, _) = loss_gan(&mut tape, same, same).unwrap();
    assert_eq!(tape.scalar(zero), 0.0);

    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (rv, fv) = (randn(&mut rng, 7), randn(&mut rng, 7));
    let hand = fv.iter().sum::<f64>() / 7.0 - rv.iter().sum::<f64>() / 7.0;
    let real = leaf(&mut tape, &[7], &rv);
    let fake = leaf(&mut tape, &[7], &fv);
    let (critic, gen) = loss_gan(&mut tape, real, fake).unwrap();
    assert!((tape.scalar(critic) - hand).abs() < 1e-12);
    assert!((tape.scalar(gen) + fv.iter().sum::<f64>() / 7.0).abs() < 1e-12);

    // Swapping the batches negates the critic loss exactly.
    let (swapped, _) = loss_gan(&mut tape, fake, real).unwrap();
    assert_eq!(tape.scalar(swapped), -tape.scalar(critic));
}

#[test]
fn gan_rejects_mismatched_scores() {
    let mut tape = Tape64::new();
    let a = leaf(&mut tape, &[2], &[0.0, 1.0]);
    let b = leaf(&mut tape, &[3], &[0.0, 1.0, 2.0]);
    assert!(matches!(
        loss_gan(&mut tape, a, b),
        Err(ObjError::BatchMismatch { left: 2, right: 3 })
    ));
    let m = leaf(&mut tape, &[2, 1], &[0.0, 1.0]);
    assert!(matches!(
        loss_gan(&mut tape, m, a),
        Err(ObjError::ShapeMismatch { .. })
    ));
}

#[test]
fn l1_matches_hand_values() {
    let mut tape = Tape64::new();
    let x = leaf(&mut tape, &[2], &[0.2, 0.4]);
    let xh = leaf(&mut tape, &[2], &[0.1, 0.6]);
    let l = loss_l1(&mut tape, x, xh).unwrap();
    assert!((tape.scalar(l) - 0.15).abs() < 1e-12);

    let same = loss_l1(&mut tape, x, x).unwrap();
    assert_eq!(tape.scalar(same), 0.0);

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (a, b) = (randn(&mut rng, 40), randn(&mut rng, 40));
    let hand = a.iter().zip(&b).map(|(p, q)| (p - q).abs()).sum::<f64>() / 40.0;
    let an = leaf(&mut tape, &[2, 1, 20], &a);
    let bn = leaf(&mut tape, &[2, 1, 20], &b);
    let l = loss_l1(&mut tape, an, bn).unwrap();
    assert!((tape.scalar(l) - hand).abs() < 1e-12);
    assert!(tape.scalar(l) >= 0.0);

    let short = leaf(&mut tape, &[39], &a[..39]);
    assert!(matches!(
        loss_l1(&mut tape, an, short),
        Err(ObjError::ShapeMismatch { .. })
    ));
}

#[test]
fn task_loss_is_mean_squared_error() {
    let mut tape = Tape64::new();
    let y = leaf(&mut tape, &[1], &[10.0]);
    let p = leaf(&mut tape, &[1], &[12.0]);
    let l = loss_task(&mut tape, y, p).unwrap();
    assert_eq!(tape.scalar(l), 4.0);

    let same = loss_task(&mut tape, y, y).unwrap();
    assert_eq!(tape.scalar(same), 0.0);

    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (a, b) = (randn(&mut rng, 9), randn(&mut rng, 9));
    let hand = a.iter().zip(&b).map(|(p, q)| (q - p) * (q - p)).sum::<f64>() / 9.0;
    let an = leaf(&mut tape, &[9], &a);
    let bn = leaf(&mut tape, &[9], &b);
    let l = loss_task(&mut tape, an, bn).unwrap();
    assert!((tape.scalar(l) - hand).abs() < 1e-12);

    let short = leaf(&mut tape, &[8], &a[..8]);
    assert!(matches!(
        loss_task(&mut tape, an, short),
        Err(ObjError::BatchMismatch { .. })
    ));
}

#[test]
fn total_objective_composes_weighted_terms() {
    let w = LossWeights::<f64>::default();
    let parts = LossParts {
        critic_loss: -0.5,
        gen_loss: 0.5,
        l_l1: 0.02,
        l_task: 4.0,
        gp: 1.5,
    };
    let b = total_objective(&w, &parts).unwrap();
    assert!((b.total_g - 1.1).abs() < 1e-12);
    assert_eq!(b.total_d, -0.5 + 1.5);
    assert_eq!(b.l_gan, parts.critic_loss);

    let no_task = LossWeights { beta: 0.0, ..w };
    let b0 = total_objective(&no_task, &parts).unwrap();
    assert_eq!(b0.total_g, parts.gen_loss + 10.0 * parts.l_l1);

    let bare = LossWeights {
        alpha: 0.0,
        beta: 0.0,
        ..w
    };
    let bg = total_objective(&bare, &parts).unwrap();
    assert_eq!(bg.total_g, parts.gen_loss);

    let nan = LossParts {
        l_task: f64::NAN,
        ..parts
    };
    assert!(matches!(
        total_objective(&w, &nan),
        Err(ObjError::NonFinite { term: "l_task" })
    ));
}

#[test]
fn csv_round_trips_breakdown_fields() {
    let b = LossBreakdown {
        l_gan: -0.125f64,
        l_l1: 0.0625,
        l_task: 2.5,
        gp: 0.75,
        total_g: 1.375,
        total_d: 0.625,
    };
    let row = b.csv_row(42);
    let fields: Vec<f64> = row.split(',').skip(1).map(|s| s.parse().unwrap()).collect();
    assert_eq!(row.split(',').next(), Some("42"));
    assert_eq!(
        fields,
        vec![b.l_gan, b.gp, b.l_l1, b.l_task, b.total_g, b.total_d]
    );
    assert_eq!(
        LossBreakdown::<f64>::csv_header().split(',').count(),
        row.split(',').count()
    );
}

/// Critic whose score is `scale`*(sum of voxels)/sqrt(voxel count), so the
/// input gradient has constant norm `scale` everywhere.
fn linear_critic(scale: f64) -> impl FnMut(&mut Tape64, NodeId) -> Result<NodeId, ObjError> {
    move |tape, x| {
        let per: usize = tape.shape(x)[1..].iter().product();
        let s = tape.sum_per_sample(x)?;
        Ok(tape.scale(s, scale / (per as f64).sqrt()))
    }
}

#[test]
fn penalty_is_zero_for_unit_gradient_critic() {
    let mut tape = Tape64::new();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let shape = [2usize, 1, 4, 4, 4];
    let rv: Vec<f64> = (0..128).map(|_| rng.gen()).collect();
    let fv: Vec<f64> = (0..128).map(|_| rng.gen()).collect();
    let real = leaf(&mut tape, &shape, &rv);
    let fake = leaf(&mut tape, &shape, &fv);
    let gp = gradient_penalty(&mut tape, real, fake, &[0.3, 0.7], 10.0, linear_critic(1.0)).unwrap();
    assert!(tape.scalar(gp).abs() < 1e-10, "got {}", tape.scalar(gp));
}

#[test]
fn penalty_hits_lambda_for_gradient_norm_two() {
    let mut tape = Tape64::new();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let shape = [2usize, 1, 4, 4, 4];
    let rv: Vec<f64> = (0..128).map(|_| rng.gen()).collect();
    let fv: Vec<f64> = (0..128).map(|_| rng.gen()).collect();
    let real = leaf(&mut tape, &shape, &rv);
    let fake = leaf(&mut tape, &shape, &fv);
    let gp = gradient_penalty(&mut tape, real, fake, &[0.1, 0.9], 10.0, linear_critic(2.0)).unwrap();
    assert!((tape.scalar(gp) - 10.0).abs() < 1e-8, "got {}", tape.scalar(gp));
}

#[test]
fn penalty_rejects_bad_inputs() {
    let mut tape = Tape64::new();
    let a = leaf(&mut tape, &[2, 1, 2, 2, 2], &[0.5; 16]);
    let b = leaf(&mut tape, &[1, 1, 2, 2, 2], &[0.5; 8]);
    assert!(matches!(
        gradient_penalty(&mut tape, a, b, &[0.5, 0.5], 10.0, linear_critic(1.0)),
        Err(ObjError::ShapeMismatch { .. })
    ));
    assert!(matches!(
        gradient_penalty(&mut tape, a, a, &[0.5], 10.0, linear_critic(1.0)),
        Err(ObjError::BadMix(_))
    ));
    assert!(matches!(
        gradient_penalty(&mut tape, a, a, &[0.5, 1.5], 10.0, linear_critic(1.0)),
        Err(ObjError::BadMix(_))
    ));
}

/// Small convolutional critic: conv3 1->2, relu, maxpool2, conv1 2->1,
/// spatial mean. 63 parameters across four named blocks.
fn conv_critic_params(seed: u64) -> ParamSet<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = ParamSet::new();
    let t = |shape: Vec<usize>, scale: f64, rng: &mut ChaCha8Rng| {
        let n = shape.iter().product();
        DiffTensor::new(shape, randn(rng, n).iter().map(|v| scale * v).collect()).unwrap()
    };
    p.add("k1", t(vec![2, 1, 3, 3, 3], 0.3, &mut rng)).unwrap();
    p.add("b1", t(vec![2], 0.1, &mut rng)).unwrap();
    p.add("k2", t(vec![1, 2, 1, 1, 1], 0.3, &mut rng)).unwrap();
    p.add("b2", t(vec![1], 0.1, &mut rng)).unwrap();
    p
}

fn conv_critic_scores(
    tape: &mut Tape64,
    params: &ParamSet<f64>,
    binding: &TapeBinding,
    x: NodeId,
) -> Result<NodeId, ObjError> {
    let n = tape.shape(x)[0];
    let k1 = binding.id(params, "k1")?;
    let b1 = binding.id(params, "b1")?;
    let k2 = binding.id(params, "k2")?;
    let b2 = binding.id(params, "b2")?;
    let c = tape.conv3(x, k1, Some(b1))?;
    let r = tape.relu(c);
    let p = tape.maxpool2(r)?;
    let h = tape.conv1(p, k2, Some(b2))?;
    let m = tape.global_mean_spatial(h)?;
    Ok(tape.reshape(m, vec![n])?)
}

#[test]
fn penalty_matches_finite_difference_gradient_norms() {
    let params = conv_critic_params(21);
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let shape = [2usize, 1, 4, 4, 4];
    let per = 64usize;
    let rv: Vec<f64> = (0..128).map(|_| rng.gen()).collect();
    let fv: Vec<f64> = (0..128).map(|_| rng.gen()).collect();
    let t = [0.25, 0.9];
    let lambda = 10.0;

    let mut tape = Tape64::new();
    let binding = params.bind(&mut tape);
    let real = leaf(&mut tape, &shape, &rv);
    let fake = leaf(&mut tape, &shape, &fv);
    let gp = gradient_penalty(&mut tape, real, fake, &t, lambda, |tape, x| {
        conv_critic_scores(tape, &params, &binding, x)
    })
    .unwrap();
    let analytic = tape.scalar(gp);

    // Oracle: finite-difference input gradients on the mixed volumes, then
    // the penalty formula on their norms.
    let mixed: Vec<f64> = (0..rv.len())
        .map(|i| {
            let ti = t[i / per];
            ti * rv[i] + (1.0 - ti) * fv[i]
        })
        .collect();
    let eval = |vals: &[f64], sample: usize| -> f64 {
        let mut tape = Tape64::new();
        let binding = params.bind(&mut tape);
        let x = tape.leaf_from(&shape, vals, false);
        let s = conv_critic_scores(&mut tape, &params, &binding, x).unwrap();
        tape.values(s)[sample]
    };
    let h = 1e-6;
    let mut hand = 0.0;
    for i in 0..2 {
        let mut ssq = 0.0;
        for v in 0..per {
            let idx = i * per + v;
            let mut up = mixed.clone();
            up[idx] += h;
            let mut dn = mixed.clone();
            dn[idx] -= h;
            let g = (eval(&up, i) - eval(&dn, i)) / (2.0 * h);
            ssq += g * g;
        }
        let norm = (ssq + 1e-12).sqrt();
        hand += (norm - 1.0) * (norm - 1.0);
    }
    hand = lambda * hand / 2.0;
    assert!(
        (analytic - hand).abs() / hand.abs().max(1e-12) < 1e-3,
        "analytic {analytic} vs finite-difference {hand}"
    );
}

#[test]
fn penalty_gradients_reach_critic_parameters() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let shape = [2usize, 1, 4, 4, 4];
    let rv: Vec<f64> = (0..128).map(|_| rng.gen()).collect();
    let fv: Vec<f64> = (0..128).map(|_| rng.gen()).collect();
    let t = [0.35, 0.65];

    let mut params = conv_critic_params(32);
    let snapshot = params.clone();
    let cfg = GradCheckConfig::default();
    let report = gradcheck(&mut params, &cfg, |tape, binding| {
        let real = tape.leaf_from(&shape, &rv, false);
        let fake = tape.leaf_from(&shape, &fv, false);
        let sr = conv_critic_scores(tape, &snapshot, binding, real)
            .map_err(|e| DiffError::GradCheck(e.to_string()))?;
        let sf = conv_critic_scores(tape, &snapshot, binding, fake)
            .map_err(|e| DiffError::GradCheck(e.to_string()))?;
        let (critic_loss, _) =
            loss_gan(tape, sr, sf).map_err(|e| DiffError::GradCheck(e.to_string()))?;
        let gp = gradient_penalty(tape, real, fake, &t, 10.0, |tape, x| {
            conv_critic_scores(tape, &snapshot, binding, x)
        })
        .map_err(|e| DiffError::GradCheck(e.to_string()))?;
        compose_critic_objective(tape, critic_loss, gp)
            .map_err(|e| DiffError::GradCheck(e.to_string()))
    })
    .unwrap();
    for row in &report.rows {
        assert!(row.pass, "{} rel err {}", row.name, row.max_rel_err);
    }
}

#[test]
fn penalty_stays_nonnegative_across_random_critics() {
    for seed in 0..10u64 {
        let params = conv_critic_params(400 + seed);
        let mut rng = ChaCha8Rng::seed_from_u64(500 + seed);
        let shape = [2usize, 1, 4, 4, 4];
        let rv: Vec<f64> = (0..128).map(|_| rng.gen()).collect();
        let fv: Vec<f64> = (0..128).map(|_| rng.gen()).collect();
        let t: Vec<f64> = (0..2).map(|_| rng.gen()).collect();
        let mut tape = Tape64::new();
        let binding = params.bind(&mut tape);
        let real = leaf(&mut tape, &shape, &rv);
        let fake = leaf(&mut tape, &shape, &fv);
        let gp = gradient_penalty(&mut tape, real, fake, &t, 10.0, |tape, x| {
            conv_critic_scores(tape, &params, &binding, x)
        })
        .unwrap();
        assert!(tape.scalar(gp) >= 0.0, "seed {seed}: {}", tape.scalar(gp));
    }
}

#[test]
fn task_branch_gradient_follows_beta() {
    let mut params = ParamSet::new();
    params
        .add("w", DiffTensor::new(vec![4, 1], vec![0.3, -0.2, 0.5, 0.1]).unwrap())
        .unwrap();
    params
        .add("b", DiffTensor::new(vec![1], vec![0.05]).unwrap())
        .unwrap();

    let run = |beta: f64| -> Vec<Vec<f64>> {
        let mut tape = Tape64::new();
        let binding = params.bind(&mut tape);
        let x = leaf(&mut tape, &[3, 4], &[0.1, 0.7, 0.3, 0.9, 0.4, 0.2, 0.8, 0.6, 0.5, 0.5, 0.1, 0.3]);
        let w = binding.id(&params, "w").unwrap();
        let b = binding.id(&params, "b").unwrap();
        let yp = tape.fc(x, w, b).unwrap();
        let yp = tape.reshape(yp, vec![3]).unwrap();
        let yt = leaf(&mut tape, &[3], &[8.0, 9.0, 10.0]);
        let task = loss_task(&mut tape, yt, yp).unwrap();
        let recon = leaf(&mut tape, &[4], &[0.2, 0.4, 0.6, 0.8]);
        let recon_hat = leaf(&mut tape, &[4], &[0.1, 0.5, 0.5, 0.7]);
        let l1 = loss_l1(&mut tape, recon, recon_hat).unwrap();
        let gen = leaf(&mut tape, &[2], &[0.4, 0.6]);
        let gen = tape.mean(gen).unwrap();
        let weights = LossWeights {
            beta,
            ..LossWeights::default()
        };
        let total = compose_generator_objective(&mut tape, &weights, gen, l1, task).unwrap();
        let grads = tape.backward(total).unwrap();
        binding
            .ids
            .iter()
            .map(|&id| match grads.grad_of(id) {
                Some(g) => tape.values(g).to_vec(),
                None => vec![0.0; tape.values(id).len()],
            })
            .collect()
    };

    let zero = run(0.0);
    assert!(zero.iter().flatten().all(|g| *g == 0.0), "{zero:?}");
    let live = run(0.1);
    assert!(live.iter().flatten().any(|g| g.abs() > 1e-9), "{live:?}");
}
