//! Helpers shared by the integration tests: tiny hand-built scenes and
//! finite-difference checks for kernels, the actor and the critic.
#![allow(dead_code)]

use std::sync::Arc;

use acis::actor::{ActionMode, Actor, ArchConfig};
use acis::compute::gradcheck::{relative_error, DEFAULT_EPS};
use acis::compute::{finite_difference_check, lstm_cell, LstmVars, Tape, Tensor, Var};
use acis::critic::{BnMode, Critic, CriticConfig};
use acis::environment::{Scene, SceneContext};
use acis::scoring::BinaryMask;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())
}

/// Gradient check of `Σ R ⊙ build(x)` with respect to each listed input.
pub fn check_op(
    inputs: &[Tensor],
    build: impl Fn(&mut Tape, &[Var]) -> Var,
    seed: u64,
) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let probe = {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        let out = build(&mut tape, &vars);
        random(&mut rng, tape.value(out).shape())
    };
    let mut worst: f64 = 0.0;
    for which in 0..inputs.len() {
        let err = finite_difference_check(
            |point| {
                let mut tape = Tape::new();
                let vars: Vec<Var> = inputs
                    .iter()
                    .enumerate()
                    .map(|(i, t)| {
                        if i == which {
                            tape.leaf(point.clone())
                        } else {
                            tape.constant(t.clone())
                        }
                    })
                    .collect();
                let out = build(&mut tape, &vars);
                let r = tape.constant(probe.clone());
                let prod = tape.mul(out, r);
                let loss = tape.sum(prod);
                let g = tape.backward(loss);
                (tape.value(loss).item(), g.get_or_zeros(vars[which], point))
            },
            &inputs[which],
            DEFAULT_EPS,
        );
        worst = worst.max(err);
    }
    worst
}

/// Worst finite-difference error of every differentiable tape operation,
/// on small random inputs.
pub fn kernel_gradchecks() -> Vec<(String, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut out = Vec::new();
    let mut push = |name: &str, err: f64| out.push((name.to_string(), err));
    for stride in [1, 2] {
        let ins = [random(&mut rng, &[2, 3, 6, 6]), random(&mut rng, &[4, 3, 3, 3]), random(&mut rng, &[4])];
        push(&format!("conv2d/s{stride}"), check_op(&ins, |t, v| t.conv2d(v[0], v[1], Some(v[2]), stride), 10));
        let ins = [random(&mut rng, &[2, 3, 4, 4]), random(&mut rng, &[3, 2, 3, 3]), random(&mut rng, &[2])];
        push(
            &format!("conv_transpose2d/s{stride}"),
            check_op(&ins, |t, v| t.conv_transpose2d(v[0], v[1], Some(v[2]), stride), 11),
        );
    }
    let x = random(&mut rng, &[2, 3, 4, 6]);
    push("maxpool2d", check_op(std::slice::from_ref(&x), |t, v| t.maxpool2d(v[0]), 12));
    push("avgpool2d", check_op(std::slice::from_ref(&x), |t, v| t.avgpool2d(v[0]), 13));
    push("global_maxpool", check_op(std::slice::from_ref(&x), |t, v| t.global_maxpool(v[0]), 14));
    push("reshape", check_op(std::slice::from_ref(&x), |t, v| t.reshape(v[0], &[6, 24]), 15));
    push("relu", check_op(std::slice::from_ref(&x), |t, v| t.relu(v[0]), 16));
    push("leaky_relu", check_op(std::slice::from_ref(&x), |t, v| t.leaky_relu(v[0]), 17));
    push("sigmoid", check_op(std::slice::from_ref(&x), |t, v| t.sigmoid(v[0]), 18));
    push("tanh", check_op(std::slice::from_ref(&x), |t, v| t.tanh(v[0]), 19));
    push("scale", check_op(std::slice::from_ref(&x), |t, v| t.scale(v[0], -2.5), 20));
    push("clamp", check_op(std::slice::from_ref(&x), |t, v| t.clamp(v[0], -0.5, 0.5), 21));
    push("sum", check_op(std::slice::from_ref(&x), |t, v| t.sum(v[0]), 22));
    push("mean", check_op(&[x], |t, v| t.mean(v[0]), 23));
    let ins = [random(&mut rng, &[3, 5]), random(&mut rng, &[4, 5]), random(&mut rng, &[4])];
    push("linear", check_op(&ins, |t, v| t.linear(v[0], v[1], Some(v[2])), 24));
    let ins = [random(&mut rng, &[2, 2, 3, 3]), random(&mut rng, &[2, 1, 3, 3])];
    push("concat", check_op(&ins, |t, v| t.concat(&[v[0], v[1]]), 25));
    push("slice_cols", check_op(&[random(&mut rng, &[3, 8])], |t, v| t.slice_cols(v[0], 2, 3), 26));
    let ins = [random(&mut rng, &[3, 4]), random(&mut rng, &[3, 4])];
    push("add", check_op(&ins, |t, v| t.add(v[0], v[1]), 27));
    push("sub", check_op(&ins, |t, v| t.sub(v[0], v[1]), 28));
    push("mul", check_op(&ins, |t, v| t.mul(v[0], v[1]), 29));
    push("maximum", check_op(&ins, |t, v| t.maximum(v[0], v[1]), 30));
    let ins = [random(&mut rng, &[3, 2, 3, 3]), random(&mut rng, &[2]), random(&mut rng, &[2])];
    push("batchnorm_train", check_op(&ins, |t, v| t.batchnorm_train(v[0], v[1], v[2]).0, 31));
    push(
        "batchnorm_eval",
        check_op(&ins, |t, v| t.batchnorm_eval(v[0], v[1], v[2], &[0.1, -0.3], &[0.5, 2.0]), 32),
    );
    let pred = uniform(&mut rng, &[12], 0.05, 0.95);
    let target = uniform(&mut rng, &[12], 0.0, 1.0);
    let weight = uniform(&mut rng, &[12], 0.1, 2.0);
    push("bce", check_op(std::slice::from_ref(&pred), |t, v| t.bce(v[0], &target), 33));
    push("bce_weighted", check_op(std::slice::from_ref(&pred), |t, v| t.bce_weighted(v[0], &target, Some(&weight)), 34));
    push("mse", check_op(&[pred], |t, v| t.mse(v[0], &target), 35));
    let ins = [random(&mut rng, &[2, 3]), random(&mut rng, &[2, 3])];
    push("kl_diag_gaussian", check_op(&ins, |t, v| t.kl_diag_gaussian(v[0], v[1]), 36));
    let noise = random(&mut rng, &[2, 3]);
    push("reparameterize", check_op(&ins, |t, v| t.reparameterize(v[0], v[1], &noise), 37));
    let (inp, hid) = (3, 4);
    let ins = [
        random(&mut rng, &[2, inp]),
        random(&mut rng, &[2, hid]),
        random(&mut rng, &[2, hid]),
        random(&mut rng, &[4 * hid, inp]),
        random(&mut rng, &[4 * hid, hid]),
        random(&mut rng, &[4 * hid]),
    ];
    let lstm = |t: &mut Tape, v: &[Var]| {
        let p = LstmVars {
            w_ih: v[3],
            w_hh: v[4],
            bias: v[5],
        };
        let (h, c) = lstm_cell(t, v[0], v[1], v[2], &p);
        t.concat(&[h, c])
    };
    push("lstm_cell", check_op(&ins, lstm, 38));
    out
}

pub fn tiny_arch(state_pyramid: bool) -> ArchConfig {
    ArchConfig {
        height: 8,
        width: 8,
        encoder_channels: vec![3, 4],
        hidden: 5,
        z: 4,
        latent: 2,
        decoder_channels: vec![4, 3],
        state_pyramid,
    }
}

/// Two overlapping rectangles on a noisy background.
pub fn actor_scene(seed: u64) -> Arc<SceneContext> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a = BinaryMask::from_fn(8, 8, |y, x| (1..4).contains(&y) && (1..5).contains(&x));
    let b = BinaryMask::from_fn(8, 8, |y, x| (3..7).contains(&y) && (4..7).contains(&x));
    let a = BinaryMask::from_fn(8, 8, |y, x| a.get(y, x) && !b.get(y, x));
    let image = (0..64)
        .map(|i| {
            let (y, x) = (i / 8, i % 8);
            let base = if b.get(y, x) { 0.8 } else if a.get(y, x) { 0.5 } else { 0.1 };
            base + rng.gen_range(-0.03..0.03)
        })
        .collect();
    let scene = Scene {
        seed,
        image: Tensor::new(vec![1, 8, 8], image),
        gt_masks: vec![a, b],
    };
    SceneContext::new(scene)
}

pub fn normal(rng: &mut ChaCha8Rng, shape: &[usize], sd: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| sd * rng.sample::<f64, _>(StandardNormal)).collect())
}

/// Moves every parameter away from its initial value so zero-initialised
/// heads also carry gradient signal.
pub fn jitter_actor(actor: &mut Actor, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for p in actor.params.params_mut() {
        let n = normal(&mut rng, p.value.shape(), 0.2);
        p.value.add_assign(&n);
    }
}

/// Two sampled steps with a soft transition in between; every head
/// contributes to the scalar.
pub fn two_step_loss(actor: &Actor, ctx: &SceneContext, noise: &[Tensor], weights: &Tensor) -> (f64, Actor) {
    let mut tape = Tape::new();
    let p = actor.bind(&mut tape);
    let mut m = tape.constant(Tensor::zeros(&[1, 1, 8, 8]));
    let mut h = tape.constant(Tensor::zeros(&[1, actor.arch.hidden]));
    let mut c = tape.constant(Tensor::zeros(&[1, actor.arch.hidden]));
    let mut terms = Vec::new();
    for n in noise {
        let input = Actor::input_var(&mut tape, &[ctx], m);
        let pyramid = actor.pyramid(&mut tape, &[ctx], m);
        let v = actor.step(&mut tape, &p, input, &pyramid, h, c, ActionMode::Sample(n));
        let w = tape.constant(weights.clone());
        let weighted = tape.mul(v.mask, w);
        terms.push(tape.sum(weighted));
        terms.push(tape.sum(v.term_logit));
        terms.push(tape.kl_diag_gaussian(v.mu, v.log_var));
        m = tape.maximum(m, v.mask);
        h = v.h;
        c = v.c;
    }
    let mut loss = terms[0];
    for &t in &terms[1..] {
        loss = tape.add(loss, t);
    }
    let value = tape.value(loss).item();
    let grads = tape.backward(loss);
    let mut out = actor.clone();
    out.params.zero_grad();
    out.params.accumulate(&grads, &p);
    (value, out)
}

pub fn actor_gradcheck(state_pyramid: bool) -> f64 {
    let ctx = actor_scene(5);
    let mut actor = Actor::new(tiny_arch(state_pyramid), 1).unwrap();
    jitter_actor(&mut actor, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let noise = vec![normal(&mut rng, &[1, 2], 1.0), normal(&mut rng, &[1, 2], 1.0)];
    let weights = normal(&mut rng, &[1, 1, 8, 8], 1.0);
    let (_, analytic) = two_step_loss(&actor, &ctx, &noise, &weights);
    let eps = 1e-5;
    let mut worst: f64 = 0.0;
    for i in 0..actor.params.len() {
        let len = actor.params.params()[i].value.len();
        let coords: Vec<usize> = (0..len).step_by(len.div_ceil(6).max(1)).collect();
        for k in coords {
            let mut probe = actor.clone();
            probe.params.params_mut()[i].value.data_mut()[k] += eps;
            let (plus, _) = two_step_loss(&probe, &ctx, &noise, &weights);
            probe.params.params_mut()[i].value.data_mut()[k] -= 2.0 * eps;
            let (minus, _) = two_step_loss(&probe, &ctx, &noise, &weights);
            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic.params.params()[i].grad.data()[k];
            worst = worst.max(relative_error(a, numeric));
        }
    }
    worst
}

pub fn tiny_critic_config() -> CriticConfig {
    CriticConfig {
        height: 8,
        width: 8,
        conv_channels: vec![3, 4],
        fc: vec![6, 5],
        bn_momentum: 0.9,
    }
}

pub fn critic_scene(seed: u64) -> Arc<SceneContext> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a = BinaryMask::from_fn(8, 8, |y, x| (1..5).contains(&y) && (1..4).contains(&x));
    let b = BinaryMask::from_fn(8, 8, |y, x| (4..7).contains(&y) && (3..7).contains(&x));
    let image = (0..64)
        .map(|i| {
            let (y, x) = (i / 8, i % 8);
            let base = if b.get(y, x) { 0.7 } else if a.get(y, x) { 0.4 } else { 0.1 };
            base + rng.gen_range(-0.03..0.03)
        })
        .collect();
    let a = BinaryMask::from_fn(8, 8, |y, x| a.get(y, x) && !b.get(y, x));
    SceneContext::new(Scene {
        seed,
        image: Tensor::new(vec![1, 8, 8], image),
        gt_masks: vec![a, b],
    })
}

pub fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect())
}

pub fn jitter_critic(critic: &mut Critic, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for p in critic.params.params_mut() {
        if p.trainable {
            let n = uniform(&mut rng, p.value.shape(), -0.2, 0.2);
            p.value.add_assign(&n);
        } else {
            // Running statistics: keep variances positive.
            let n = uniform(&mut rng, p.value.shape(), 0.1, 0.5);
            p.value.add_assign(&n);
        }
    }
}

/// Sum of Q over a batch of two, returning value and gradients for every
/// parameter plus the predicted-mask input.
pub fn q_sum(critic: &Critic, ctxs: &[&SceneContext], state: &Tensor, pred: &Tensor, mode: BnMode) -> (f64, Vec<Tensor>, Tensor) {
    let mut tape = Tape::new();
    let p = critic.bind(&mut tape);
    let sm = tape.constant(state.clone());
    let pm = tape.leaf(pred.clone());
    let input = Critic::input_var(&mut tape, ctxs, sm, pm);
    let (q, _) = critic.forward(&mut tape, &p, input, mode);
    let loss = tape.sum(q);
    let grads = tape.backward(loss);
    let mut c = critic.clone();
    c.params.zero_grad();
    c.params.accumulate(&grads, &p);
    let pg = c.params.params().iter().map(|p| p.grad.clone()).collect();
    (tape.value(loss).item(), pg, grads.get_or_zeros(pm, pred))
}

pub fn critic_gradcheck(mode: BnMode) -> f64 {
    let (c1, c2) = (critic_scene(1), critic_scene(2));
    let ctxs = [c1.as_ref(), c2.as_ref()];
    let mut critic = Critic::new(tiny_critic_config(), 3).unwrap();
    jitter_critic(&mut critic, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let state = uniform(&mut rng, &[2, 1, 8, 8], 0.0, 1.0);
    let pred = uniform(&mut rng, &[2, 1, 8, 8], 0.0, 1.0);
    let (_, pgrads, mgrad) = q_sum(&critic, &ctxs, &state, &pred, mode);
    let eps = 1e-5;
    let mut worst: f64 = 0.0;
    for k in 0..pred.len() {
        let mut probe = pred.clone();
        probe.data_mut()[k] += eps;
        let plus = q_sum(&critic, &ctxs, &state, &probe, mode).0;
        probe.data_mut()[k] -= 2.0 * eps;
        let minus = q_sum(&critic, &ctxs, &state, &probe, mode).0;
        let numeric = (plus - minus) / (2.0 * eps);
        worst = worst.max(relative_error(mgrad.data()[k], numeric));
    }
    for i in 0..critic.params.len() {
        if !critic.params.params()[i].trainable {
            continue;
        }
        for k in 0..critic.params.params()[i].value.len() {
            let mut probe = critic.clone();
            probe.params.params_mut()[i].value.data_mut()[k] += eps;
            let plus = q_sum(&probe, &ctxs, &state, &pred, mode).0;
            probe.params.params_mut()[i].value.data_mut()[k] -= 2.0 * eps;
            let minus = q_sum(&probe, &ctxs, &state, &pred, mode).0;
            let numeric = (plus - minus) / (2.0 * eps);
            worst = worst.max(relative_error(pgrads[i].data()[k], numeric));
        }
    }
    worst
}
