mod common;
use common::*;

use acis::compute::gradcheck::DEFAULT_EPS;
use acis::compute::kernels;
use acis::compute::{
    adam_step, finite_difference_check, lstm_cell, AdamState, LstmVars, Parameter, Tape, Tensor, Var,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn at4(t: &Tensor, a: usize, b: usize, c: usize, d: usize) -> f64 {
    let s = t.shape();
    t.data()[((a * s[1] + b) * s[2] + c) * s[3] + d]
}

/// Direct summation: out[n,co,oy,ox] = b[co] + Σ w[co,ci,ky,kx]·x[n,ci,oy·s+ky−1,ox·s+kx−1].
fn naive_conv(x: &Tensor, w: &Tensor, b: &Tensor, stride: usize) -> Tensor {
    let (n, ci, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let co = w.shape()[0];
    let (ho, wo) = (h.div_ceil(stride), wd.div_ceil(stride));
    let mut out = Tensor::zeros(&[n, co, ho, wo]);
    let mut k = 0;
    for s in 0..n {
        for o in 0..co {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = b.data()[o];
                    for i in 0..ci {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let iy = (oy * stride + ky) as isize - 1;
                                let ix = (ox * stride + kx) as isize - 1;
                                if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                                    acc += at4(w, o, i, ky, kx) * at4(x, s, i, iy as usize, ix as usize);
                                }
                            }
                        }
                    }
                    out.data_mut()[k] = acc;
                    k += 1;
                }
            }
        }
    }
    out
}

/// Scatter definition: out[n,co,i·s−1+ky, j·s−1+kx] += x[n,ci,i,j]·w[ci,co,ky,kx].
fn naive_conv_transpose(x: &Tensor, w: &Tensor, b: &Tensor, stride: usize) -> Tensor {
    let (n, ci, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let co = w.shape()[1];
    let (ho, wo) = (h * stride, wd * stride);
    let mut out = Tensor::zeros(&[n, co, ho, wo]);
    for s in 0..n {
        for o in 0..co {
            for y in 0..ho {
                for xx in 0..wo {
                    out.data_mut()[((s * co + o) * ho + y) * wo + xx] = b.data()[o];
                }
            }
        }
        for i in 0..ci {
            for y in 0..h {
                for xx in 0..wd {
                    for o in 0..co {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let oy = (y * stride + ky) as isize - 1;
                                let ox = (xx * stride + kx) as isize - 1;
                                if oy >= 0 && ox >= 0 && (oy as usize) < ho && (ox as usize) < wo {
                                    out.data_mut()[((s * co + o) * ho + oy as usize) * wo + ox as usize] +=
                                        at4(x, s, i, y, xx) * at4(w, i, o, ky, kx);
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

fn max_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.data().iter().zip(b.data()).fold(0.0, |m, (x, y)| m.max((x - y).abs()))
}

#[test]
fn conv2d_identity_kernel() {
    let x = Tensor::new(vec![1, 1, 3, 3], (1..=9).map(f64::from).collect());
    let mut w = Tensor::zeros(&[1, 1, 3, 3]);
    w.data_mut()[4] = 1.0;
    assert_eq!(kernels::conv2d(&x, &w, None, 1), x);
}

#[test]
fn conv2d_zero_kernel() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = random(&mut rng, &[1, 2, 5, 5]);
    let y = kernels::conv2d(&x, &Tensor::zeros(&[3, 2, 3, 3]), None, 1);
    assert!(y.data().iter().all(|&v| v == 0.0));
    assert_eq!(y.shape(), &[1, 3, 5, 5]);
}

#[test]
#[should_panic(expected = "channels")]
fn conv2d_channel_mismatch_panics() {
    kernels::conv2d(&Tensor::zeros(&[1, 2, 4, 4]), &Tensor::zeros(&[1, 3, 3, 3]), None, 1);
}

#[test]
fn conv2d_matches_naive_summation() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for &(n, ci, co, h, w, s) in &[(1, 2, 4, 8, 8, 2), (2, 4, 3, 16, 16, 1), (1, 3, 2, 7, 5, 2), (1, 4, 4, 16, 16, 2)] {
        let x = random(&mut rng, &[n, ci, h, w]);
        let k = random(&mut rng, &[co, ci, 3, 3]);
        let b = random(&mut rng, &[co]);
        let got = kernels::conv2d(&x, &k, Some(&b), s);
        let want = naive_conv(&x, &k, &b, s);
        assert!(max_abs_diff(&got, &want) < 1e-12, "conv {n}x{ci}x{h}x{w} s{s}");
    }
}

#[test]
fn conv_transpose_identity_and_zero() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = random(&mut rng, &[1, 1, 4, 4]);
    let mut w = Tensor::zeros(&[1, 1, 3, 3]);
    w.data_mut()[4] = 1.0;
    assert_eq!(kernels::conv_transpose2d(&x, &w, None, 1), x);
    let k = random(&mut rng, &[2, 3, 3, 3]);
    let y = kernels::conv_transpose2d(&Tensor::zeros(&[1, 2, 4, 4]), &k, None, 2);
    assert_eq!(y.shape(), &[1, 3, 8, 8]);
    assert!(y.data().iter().all(|&v| v == 0.0));
}

#[test]
fn conv_transpose_matches_naive_scatter() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for &(n, ci, co, h, w, s) in &[(1, 2, 4, 4, 4, 2), (2, 3, 2, 8, 8, 1), (1, 4, 4, 8, 8, 2), (1, 1, 3, 3, 5, 2)] {
        let x = random(&mut rng, &[n, ci, h, w]);
        let k = random(&mut rng, &[ci, co, 3, 3]);
        let b = random(&mut rng, &[co]);
        let got = kernels::conv_transpose2d(&x, &k, Some(&b), s);
        let want = naive_conv_transpose(&x, &k, &b, s);
        assert!(max_abs_diff(&got, &want) < 1e-12, "convT {n}x{ci}x{h}x{w} s{s}");
    }
}

#[test]
fn maxpool_examples_and_scan_oracle() {
    let x = Tensor::new(vec![1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]);
    assert_eq!(kernels::maxpool2d(&x).0.data(), &[4.0]);
    let c = Tensor::filled(&[1, 2, 4, 6], 0.7);
    let (p, _) = kernels::maxpool2d(&c);
    assert_eq!(p, Tensor::filled(&[1, 2, 2, 3], 0.7));

    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = random(&mut rng, &[2, 4, 16, 16]);
    let (p, _) = kernels::maxpool2d(&x);
    for n in 0..2 {
        for ch in 0..4 {
            for oy in 0..8 {
                for ox in 0..8 {
                    let mut m = f64::NEG_INFINITY;
                    for dy in 0..2 {
                        for dx in 0..2 {
                            m = m.max(at4(&x, n, ch, 2 * oy + dy, 2 * ox + dx));
                        }
                    }
                    assert_eq!(at4(&p, n, ch, oy, ox), m);
                }
            }
        }
    }
}

#[test]
fn maxpool_ties_route_to_first_index() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::filled(&[1, 1, 2, 2], 1.0));
    let y = tape.maxpool2d(x);
    let s = tape.sum(y);
    let g = tape.backward(s);
    assert_eq!(g.get(x).unwrap().data(), &[1.0, 0.0, 0.0, 0.0]);
}

#[test]
#[should_panic(expected = "even")]
fn maxpool_rejects_odd_dims() {
    kernels::maxpool2d(&Tensor::zeros(&[1, 1, 3, 4]));
}

#[test]
fn conv_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for stride in [1, 2] {
        let ins = [random(&mut rng, &[2, 3, 6, 6]), random(&mut rng, &[4, 3, 3, 3]), random(&mut rng, &[4])];
        let err = check_op(&ins, |t, v| t.conv2d(v[0], v[1], Some(v[2]), stride), 10 + stride as u64);
        assert!(err < 1e-4, "conv2d stride {stride}: {err}");
        let ins = [random(&mut rng, &[2, 3, 4, 4]), random(&mut rng, &[3, 2, 3, 3]), random(&mut rng, &[2])];
        let err = check_op(&ins, |t, v| t.conv_transpose2d(v[0], v[1], Some(v[2]), stride), 20 + stride as u64);
        assert!(err < 1e-4, "transposed_conv2d stride {stride}: {err}");
    }
}

#[test]
fn pooling_linear_and_concat_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x = random(&mut rng, &[2, 3, 4, 6]);
    assert!(check_op(std::slice::from_ref(&x), |t, v| t.maxpool2d(v[0]), 1) < 1e-4);
    assert!(check_op(std::slice::from_ref(&x), |t, v| t.global_maxpool(v[0]), 2) < 1e-4);
    assert!(check_op(std::slice::from_ref(&x), |t, v| t.avgpool2d(v[0]), 12) < 1e-4);
    let ins = [random(&mut rng, &[3, 5]), random(&mut rng, &[4, 5]), random(&mut rng, &[4])];
    assert!(check_op(&ins, |t, v| t.linear(v[0], v[1], Some(v[2])), 3) < 1e-4);
    let ins = [random(&mut rng, &[2, 2, 3, 3]), random(&mut rng, &[2, 1, 3, 3])];
    assert!(check_op(&ins, |t, v| t.concat(&[v[0], v[1]]), 4) < 1e-4);
    let ins = [random(&mut rng, &[3, 8])];
    assert!(check_op(&ins, |t, v| t.slice_cols(v[0], 2, 3), 5) < 1e-4);
    let ins = [random(&mut rng, &[3, 4]), random(&mut rng, &[3, 4])];
    assert!(check_op(&ins, |t, v| t.maximum(v[0], v[1]), 6) < 1e-4);
}

#[test]
fn activation_values_and_gradients() {
    let mut tape = Tape::new();
    let z = tape.constant(Tensor::new(vec![3], vec![0.0, -2.0, 3.0]));
    let s = tape.sigmoid(z);
    assert_eq!(tape.value(s).data()[0], 0.5);
    let r = tape.relu(z);
    assert_eq!(tape.value(r).data(), &[0.0, 0.0, 3.0]);
    let l = tape.leaky_relu(z);
    assert_eq!(tape.value(l).data(), &[0.0, -0.02, 3.0]);

    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let x = random(&mut rng, &[4, 7]);
    assert!(check_op(std::slice::from_ref(&x), |t, v| t.relu(v[0]), 1) < 1e-4);
    assert!(check_op(std::slice::from_ref(&x), |t, v| t.leaky_relu(v[0]), 2) < 1e-4);
    assert!(check_op(std::slice::from_ref(&x), |t, v| t.sigmoid(v[0]), 3) < 1e-4);
    assert!(check_op(std::slice::from_ref(&x), |t, v| t.tanh(v[0]), 4) < 1e-4);
}

#[test]
fn batchnorm_behaviour_and_gradients() {
    // Zero-mean, unit-variance channel with identity affine passes through.
    let x = Tensor::new(vec![2, 1, 1, 2], vec![1.0, -1.0, 1.0, -1.0]);
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let g = tape.constant(Tensor::filled(&[1], 1.0));
    let b = tape.constant(Tensor::zeros(&[1]));
    let (y, mean, var) = tape.batchnorm_train(xv, g, b);
    assert_eq!(mean, vec![0.0]);
    assert_eq!(var, vec![1.0]);
    assert!(max_abs_diff(tape.value(y), &x) < 1e-5);

    // Constant channel normalises to zero, then the affine shift applies.
    let mut tape = Tape::new();
    let xv = tape.constant(Tensor::filled(&[3, 1, 2, 2], 4.2));
    let g = tape.constant(Tensor::filled(&[1], 2.0));
    let b = tape.constant(Tensor::filled(&[1], 0.5));
    let (y, _, _) = tape.batchnorm_train(xv, g, b);
    assert!(tape.value(y).data().iter().all(|&v| (v - 0.5).abs() < 1e-12));

    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let ins = [random(&mut rng, &[3, 2, 3, 3]), random(&mut rng, &[2]), random(&mut rng, &[2])];
    assert!(check_op(&ins, |t, v| t.batchnorm_train(v[0], v[1], v[2]).0, 1) < 1e-4);
    assert!(check_op(&ins, |t, v| t.batchnorm_eval(v[0], v[1], v[2], &[0.1, -0.3], &[0.5, 2.0]), 2) < 1e-4);
}

#[test]
fn bce_values_and_gradient() {
    let mut tape = Tape::new();
    let p = tape.constant(Tensor::scalar(0.5));
    let l = tape.bce(p, &Tensor::scalar(1.0));
    assert!((tape.value(l).item() - std::f64::consts::LN_2).abs() < 1e-12);
    let p = tape.constant(Tensor::new(vec![2], vec![0.0, 1.0]));
    let l = tape.bce(p, &Tensor::new(vec![2], vec![0.0, 1.0]));
    assert!(tape.value(l).item() < 1e-6);

    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let pred = Tensor::new(vec![12], (0..12).map(|_| rng.gen_range(0.05..0.95)).collect());
    let target = Tensor::new(vec![12], (0..12).map(|_| rng.gen_range(0.0..1.0)).collect());
    let direct: f64 = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(p, t)| -(t * p.ln() + (1.0 - t) * (1.0 - p).ln()))
        .sum::<f64>()
        / 12.0;
    let mut tape = Tape::new();
    let pv = tape.constant(pred.clone());
    let l = tape.bce(pv, &target);
    assert!((tape.value(l).item() - direct).abs() < 1e-12);

    let err = finite_difference_check(
        |x| {
            let mut tape = Tape::new();
            let v = tape.leaf(x.clone());
            let l = tape.bce(v, &target);
            (tape.value(l).item(), tape.backward(l).get(v).unwrap().clone())
        },
        &pred,
        DEFAULT_EPS,
    );
    assert!(err < 1e-4);
}

#[test]
fn kl_values_and_gradient() {
    let eval = |mu: Vec<f64>, lv: Vec<f64>| {
        let mut tape = Tape::new();
        let n = mu.len();
        let m = tape.constant(Tensor::new(vec![1, n], mu));
        let l = tape.constant(Tensor::new(vec![1, n], lv));
        let k = tape.kl_diag_gaussian(m, l);
        tape.value(k).item()
    };
    assert_eq!(eval(vec![0.0; 4], vec![0.0; 4]), 0.0);
    assert_eq!(eval(vec![1.0], vec![0.0]), 0.5);

    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let ins = [random(&mut rng, &[2, 3]), random(&mut rng, &[2, 3])];
    for which in 0..2 {
        let err = finite_difference_check(
            |x| {
                let mut tape = Tape::new();
                let vars: Vec<Var> = (0..2)
                    .map(|i| if i == which { tape.leaf(x.clone()) } else { tape.constant(ins[i].clone()) })
                    .collect();
                let k = tape.kl_diag_gaussian(vars[0], vars[1]);
                (tape.value(k).item(), tape.backward(k).get(vars[which]).unwrap().clone())
            },
            &ins[which],
            DEFAULT_EPS,
        );
        assert!(err < 1e-4);
    }
}

#[test]
fn reparameterize_semantics() {
    let mu = Tensor::new(vec![1, 3], vec![0.5, -1.0, 2.0]);
    let noise = Tensor::new(vec![1, 3], vec![1.0, -2.0, 0.3]);
    // Zero noise returns the mean.
    let mut tape = Tape::new();
    let m = tape.leaf(mu.clone());
    let l = tape.leaf(Tensor::zeros(&[1, 3]));
    let a = tape.reparameterize(m, l, &Tensor::zeros(&[1, 3]));
    assert_eq!(tape.value(a), &mu);
    // Clamped minimum log-variance makes the sample collapse onto the mean.
    let mut tape = Tape::new();
    let m = tape.leaf(mu.clone());
    let raw = tape.leaf(Tensor::filled(&[1, 3], -1e6));
    let l = tape.clamp(raw, -20.0, 2.0);
    let a = tape.reparameterize(m, l, &noise);
    assert!(max_abs_diff(tape.value(a), &mu) < 1e-4);
    // d a / d mu is the identity: each output depends on its own mean only.
    for k in 0..3 {
        let mut tape = Tape::new();
        let m = tape.leaf(mu.clone());
        let l = tape.leaf(Tensor::filled(&[1, 3], 0.4));
        let a = tape.reparameterize(m, l, &noise);
        let pick = tape.slice_cols(a, k, 1);
        let s = tape.sum(pick);
        let g = tape.backward(s);
        let mut e = [0.0; 3];
        e[k] = 1.0;
        assert_eq!(g.get(m).unwrap().data(), &e[..]);
    }
}

#[test]
fn lstm_cell_behaviour_and_gradients() {
    let (inp, hid) = (3, 4);
    let run = |tape: &mut Tape, x: Tensor, h: Tensor, c: Tensor, wi: Tensor, wh: Tensor, b: Tensor| {
        let x = tape.leaf(x);
        let h = tape.leaf(h);
        let c = tape.leaf(c);
        let p = LstmVars {
            w_ih: tape.leaf(wi),
            w_hh: tape.leaf(wh),
            bias: tape.leaf(b),
        };
        let (h2, c2) = lstm_cell(tape, x, h, c, &p);
        (h2, c2, [x, h, c, p.w_ih, p.w_hh, p.bias])
    };
    // All-zero weights and states give zero outputs.
    let mut tape = Tape::new();
    let (h, c, _) = run(
        &mut tape,
        Tensor::zeros(&[1, inp]),
        Tensor::zeros(&[1, hid]),
        Tensor::zeros(&[1, hid]),
        Tensor::zeros(&[4 * hid, inp]),
        Tensor::zeros(&[4 * hid, hid]),
        Tensor::zeros(&[4 * hid]),
    );
    assert!(tape.value(h).data().iter().all(|&v| v == 0.0));
    assert!(tape.value(c).data().iter().all(|&v| v == 0.0));

    // Saturated forget gate with zero input keeps the cell state.
    let mut bias = Tensor::zeros(&[4 * hid]);
    for k in hid..2 * hid {
        bias.data_mut()[k] = 50.0;
    }
    for k in 0..hid {
        bias.data_mut()[k] = -50.0;
    }
    let c_prev = Tensor::new(vec![1, hid], vec![0.3, -0.7, 1.1, 0.0]);
    let mut tape = Tape::new();
    let (_, c, _) = run(
        &mut tape,
        Tensor::zeros(&[1, inp]),
        Tensor::zeros(&[1, hid]),
        c_prev.clone(),
        Tensor::zeros(&[4 * hid, inp]),
        Tensor::zeros(&[4 * hid, hid]),
        bias,
    );
    assert!(max_abs_diff(tape.value(c), &c_prev) < 1e-9);

    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let ins = [
        random(&mut rng, &[2, inp]),
        random(&mut rng, &[2, hid]),
        random(&mut rng, &[2, hid]),
        random(&mut rng, &[4 * hid, inp]),
        random(&mut rng, &[4 * hid, hid]),
        random(&mut rng, &[4 * hid]),
    ];
    let r1 = random(&mut rng, &[2, hid]);
    let r2 = random(&mut rng, &[2, hid]);
    for which in 0..ins.len() {
        let err = finite_difference_check(
            |point| {
                let mut args = ins.clone();
                args[which] = point.clone();
                let mut tape = Tape::new();
                let [a, b, c, d, e, f] = args;
                let (h, cc, vars) = run(&mut tape, a, b, c, d, e, f);
                let w1 = tape.constant(r1.clone());
                let w2 = tape.constant(r2.clone());
                let p1 = tape.mul(h, w1);
                let p2 = tape.mul(cc, w2);
                let s = tape.add(p1, p2);
                let loss = tape.sum(s);
                let g = tape.backward(loss);
                (tape.value(loss).item(), g.get(vars[which]).unwrap().clone())
            },
            &ins[which],
            DEFAULT_EPS,
        );
        assert!(err < 1e-4, "lstm input {which}: {err}");
    }
}

#[test]
#[should_panic(expected = "lstm")]
fn lstm_rejects_hidden_mismatch() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::zeros(&[1, 2]));
    let h = tape.constant(Tensor::zeros(&[1, 3]));
    let c = tape.constant(Tensor::zeros(&[1, 3]));
    let p = LstmVars {
        w_ih: tape.constant(Tensor::zeros(&[16, 2])),
        w_hh: tape.constant(Tensor::zeros(&[16, 4])),
        bias: tape.constant(Tensor::zeros(&[16])),
    };
    lstm_cell(&mut tape, x, h, c, &p);
}

#[test]
fn adam_zero_gradient_keeps_parameter() {
    let mut params = vec![Parameter::new(Tensor::new(vec![2], vec![0.4, -1.3]), true)];
    let mut st = AdamState::new(&params, 0.01, 0.0);
    for _ in 0..5 {
        adam_step(&mut params, &mut st);
    }
    assert_eq!(params[0].value.data(), &[0.4, -1.3]);
    assert_eq!(st.step_count(), 5);
}

#[test]
fn adam_first_step_moves_by_learning_rate() {
    for g in [0.37, -4.0, 1e-3] {
        let mut params = vec![Parameter::new(Tensor::scalar(1.0), true)];
        params[0].grad = Tensor::scalar(g);
        let mut st = AdamState::new(&params, 0.05, 0.0);
        adam_step(&mut params, &mut st);
        let delta = params[0].value.item() - 1.0;
        assert!((delta + 0.05 * g.signum()).abs() < 1e-6, "g={g} delta={delta}");
    }
}

#[test]
fn adam_ten_step_trajectory_matches_hand_computation() {
    // Quadratic f(θ) = (θ − 3)², gradient 2(θ − 3); reference recomputed
    // step by step from the Adam update rule with decoupled decay.
    let (lr, wd) = (0.1, 0.01);
    let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
    let mut theta_ref = 0.5f64;
    let (mut m, mut v) = (0.0, 0.0);
    let mut expected = Vec::new();
    for t in 1..=10 {
        let g = 2.0 * (theta_ref - 3.0);
        m = b1 * m + (1.0 - b1) * g;
        v = b2 * v + (1.0 - b2) * g * g;
        let mh = m / (1.0 - b1.powi(t));
        let vh = v / (1.0 - b2.powi(t));
        theta_ref -= lr * (mh / (vh.sqrt() + eps) + wd * theta_ref);
        expected.push(theta_ref);
    }

    let mut params = vec![Parameter::new(Tensor::scalar(0.5), true)];
    let mut st = AdamState::new(&params, lr, wd);
    for want in expected {
        let theta = params[0].value.item();
        params[0].grad = Tensor::scalar(2.0 * (theta - 3.0));
        adam_step(&mut params, &mut st);
        assert!((params[0].value.item() - want).abs() < 1e-12);
    }
}

#[test]
fn adam_skips_frozen_parameters_bit_exactly() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let frozen = random(&mut rng, &[3, 3]);
    let mut params = vec![
        Parameter::new(frozen.clone(), false),
        Parameter::new(random(&mut rng, &[2]), true),
    ];
    let mut st = AdamState::new(&params, 0.1, 0.1);
    for _ in 0..20 {
        params[0].grad = random(&mut rng, &[3, 3]);
        params[1].grad = random(&mut rng, &[2]);
        adam_step(&mut params, &mut st);
    }
    let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&params[0].value), bits(&frozen));
}

#[test]
fn detach_blocks_gradient() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::scalar(2.0));
    let y = tape.scale(x, 3.0);
    let d = tape.detach(y);
    let z = tape.mul(d, x);
    let g = tape.backward(z);
    assert_eq!(g.get(x).unwrap().item(), 6.0);
}

#[test]
fn every_tape_operation_passes_gradient_check() {
    for (name, err) in kernel_gradchecks() {
        assert!(err < 1e-4, "{name}: {err}");
    }
}
