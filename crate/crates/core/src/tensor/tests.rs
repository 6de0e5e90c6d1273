use std::cell::Cell;
use std::rc::Rc;
use std::sync::Arc;

use proptest::prelude::*;

use super::gradcheck::{finite_diff_check, max_rel_err, numeric_gradient};
use super::{memstats, Graph, SegmentBody, SegmentOutputs, Tensor, Var};
use crate::error::Error;
use crate::rng::{normal_tensor, KeyedRng, Purpose};

fn t64(shape: &[usize], data: &[f64]) -> Tensor<f64> {
    Tensor::from_f64(shape, data).unwrap()
}

#[test]
fn square_has_derivative_two_x() {
    let mut g = Graph::<f64>::new();
    let x = g.param(Tensor::scalar(3.0));
    let y = g.mul(x, x);
    let grads = g.backward(y).unwrap();
    assert_eq!(grads.wrt(x).item(), 6.0);
}

#[test]
fn stop_grad_blocks_one_path() {
    let mut g = Graph::<f64>::new();
    let x = g.param(Tensor::scalar(3.0));
    let sx = g.stop_grad(x);
    let y = g.mul(sx, x);
    assert_eq!(g.value(sx), g.value(x));
    let grads = g.backward(y).unwrap();
    assert_eq!(grads.wrt(x).item(), 3.0);
}

#[test]
fn stop_grad_of_sum_is_zero() {
    let mut g = Graph::<f64>::new();
    let x = g.param(t64(&[3], &[1.0, -2.0, 0.5]));
    let s = g.stop_grad(x);
    let y = g.sum(s);
    let grads = g.backward(y).unwrap();
    assert_eq!(grads.wrt(x).data(), &[0.0, 0.0, 0.0]);
}

#[test]
fn untouched_leaf_gets_zeros() {
    let mut g = Graph::<f64>::new();
    let x = g.param(Tensor::scalar(2.0));
    let unused = g.param(Tensor::zeros(&[2, 2]));
    let y = g.scale(x, 5.0);
    let grads = g.backward(y).unwrap();
    assert_eq!(grads.wrt(x).item(), 5.0);
    assert_eq!(grads.wrt(unused), &Tensor::zeros(&[2, 2]));
}

#[test]
fn backward_rejects_non_scalar_and_foreign_loss() {
    let mut g = Graph::<f64>::new();
    let x = g.param(Tensor::zeros(&[2]));
    let y = g.scale(x, 2.0);
    assert!(matches!(g.backward(y), Err(Error::NotScalar(_))));

    let mut other = Graph::<f64>::new();
    let z = other.param(Tensor::scalar(1.0));
    let mut g = Graph::<f64>::new();
    let _ = g.param(Tensor::scalar(1.0));
    assert!(matches!(g.backward(z), Err(Error::ForeignVar)));
}

#[test]
fn non_finite_values_are_surfaced() {
    let mut g = Graph::<f64>::new();
    let x = g.param(Tensor::scalar(0.0));
    let y = g.div_scalar(x, 0.0);
    assert!(g.fault().is_some());
    assert!(g.check().unwrap_err().is_numerical());
    assert!(g.backward(y).is_err());
}

/// Dense `tanh`-free three layer MLP built from tape primitives.
fn mlp(g: &mut Graph<'_, f64>, x: Var, ws: &[Var]) -> Var {
    let h1 = g.matmul(ws[0], x);
    let h1 = g.silu(h1);
    let h2 = g.matmul(ws[1], h1);
    let h2 = g.silu(h2);
    let o = g.matmul(ws[2], h2);
    let sq = g.mul(o, o);
    g.mean(sq)
}

#[test]
fn three_layer_net_matches_finite_differences() {
    let rng = KeyedRng::new(11);
    let x: Tensor<f64> = rng.normal(&[5, 1], Purpose::Probe, 0, 0);
    let w0: Tensor<f64> = rng.normal(&[6, 5], Purpose::Probe, 0, 1);
    let w1: Tensor<f64> = rng.normal(&[4, 6], Purpose::Probe, 0, 2);
    let w2: Tensor<f64> = rng.normal(&[3, 4], Purpose::Probe, 0, 3);
    // Check every layer's weights in turn.
    for which in 0..3 {
        let ws = [w0.scale_copy(0.5), w1.scale_copy(0.5), w2.scale_copy(0.5)];
        let target = ws[which].clone();
        let chk = finite_diff_check(
            |g, p| {
                let xv = g.constant(x.clone());
                let vars: Vec<Var> = (0..3)
                    .map(|i| if i == which { p } else { g.constant(ws[i].clone()) })
                    .collect();
                Ok(mlp(g, xv, &vars))
            },
            &target,
            1e-4,
        )
        .unwrap();
        assert!(chk.max_rel_err <= 1e-6, "layer {which}: {}", chk.max_rel_err);
    }
}

#[test]
fn conv_and_channel_bias_match_finite_differences() {
    let rng = KeyedRng::new(5);
    let x: Tensor<f64> = rng.normal(&[2, 5, 4], Purpose::Probe, 1, 0);
    let w: Tensor<f64> = rng.normal(&[3, 18], Purpose::Probe, 1, 1);
    let b: Tensor<f64> = rng.normal(&[3], Purpose::Probe, 1, 2);
    let probe: Tensor<f64> = rng.normal(&[3, 5, 4], Purpose::Probe, 1, 3);
    let build = |g: &mut Graph<'_, f64>, x: Var, w: Var, b: Var| {
        let y = g.conv3x3(x, w);
        let y = g.add_channel(y, b);
        let p = g.constant(probe.clone());
        let y = g.mul(y, p);
        g.sum(y)
    };
    let cx = finite_diff_check(
        |g, xv| {
            let (wv, bv) = (g.constant(w.clone()), g.constant(b.clone()));
            Ok(build(g, xv, wv, bv))
        },
        &x,
        1e-5,
    )
    .unwrap();
    let cw = finite_diff_check(
        |g, wv| {
            let (xv, bv) = (g.constant(x.clone()), g.constant(b.clone()));
            Ok(build(g, xv, wv, bv))
        },
        &w,
        1e-5,
    )
    .unwrap();
    let cb = finite_diff_check(
        |g, bv| {
            let (xv, wv) = (g.constant(x.clone()), g.constant(w.clone()));
            Ok(build(g, xv, wv, bv))
        },
        &b,
        1e-5,
    )
    .unwrap();
    assert!(cx.max_rel_err <= 1e-6, "x: {}", cx.max_rel_err);
    assert!(cw.max_rel_err <= 1e-6, "w: {}", cw.max_rel_err);
    assert!(cb.max_rel_err <= 1e-6, "b: {}", cb.max_rel_err);
}

#[test]
fn round_has_zero_gradient() {
    let mut g = Graph::<f64>::new();
    let x = g.param(t64(&[3], &[0.2, 1.7, -2.4]));
    let r = g.round(x);
    assert_eq!(g.value(r).data(), &[0.0, 2.0, -2.0]);
    assert!(!g.requires_grad(r));
    let s = g.sum(r);
    let xs = g.sum(x);
    let y = g.add(s, xs);
    let grads = g.backward(y).unwrap();
    assert_eq!(grads.wrt(x).data(), &[1.0, 1.0, 1.0]);
}

/// One step of a toy recurrent chain: `x' = silu(W x) * 0.5 + x`.
fn chain_step<'a>(g: &mut Graph<'a, f32>, x: Var, w: Var) -> Var {
    let h = g.matmul(w, x);
    let h = g.silu(h);
    let h = g.scale(h, 0.5);
    g.add(h, x)
}

fn chain_grad(steps: usize, checkpointed: bool) -> (Tensor<f32>, Tensor<f32>) {
    let rng = KeyedRng::new(2);
    let w0: Tensor<f32> = rng.normal(&[8, 8], Purpose::Probe, 2, 0);
    let x0: Tensor<f32> = rng.normal(&[8, 1], Purpose::Probe, 2, 1);
    let mut g = Graph::<f32>::new();
    let w = g.param(w0);
    let mut x = g.param(x0);
    let x_leaf = x;
    for _ in 0..steps {
        if checkpointed {
            let body: SegmentBody<'_, f32> =
                Rc::new(|g: &mut Graph<'_, f32>, ins: &[Var]| Ok(SegmentOutputs::new(vec![chain_step(g, ins[0], ins[1])])));
            x = g.checkpoint(&[x, w], body).unwrap().0[0];
        } else {
            x = chain_step(&mut g, x, w);
        }
    }
    let sq = g.mul(x, x);
    let loss = g.sum(sq);
    let grads = g.backward(loss).unwrap();
    (grads.wrt(w).clone(), grads.wrt(x_leaf).clone())
}

#[test]
fn checkpointed_chain_matches_plain_chain() {
    let (gw_plain, gx_plain) = chain_grad(5, false);
    let (gw_ckpt, gx_ckpt) = chain_grad(5, true);
    assert!(gw_plain.max_abs_diff(&gw_ckpt) <= 1e-6);
    assert!(gx_plain.max_abs_diff(&gx_ckpt) <= 1e-6);
    // Same op order and precision: the two paths agree bit for bit.
    assert!(gw_plain.bit_eq(&gw_ckpt));
    assert!(gx_plain.bit_eq(&gx_ckpt));
}

#[test]
fn zero_step_segment_passes_gradient_through() {
    let mut g = Graph::<f64>::new();
    let x = g.param(t64(&[2], &[1.5, -0.5]));
    let body: SegmentBody<'_, f64> = Rc::new(|_g: &mut Graph<'_, f64>, ins: &[Var]| Ok(SegmentOutputs::new(vec![ins[0]])));
    let (outs, _) = g.checkpoint(&[x], body).unwrap();
    let y = g.mul(outs[0], outs[0]);
    let y = g.sum(y);
    let grads = g.backward(y).unwrap();
    assert_eq!(grads.wrt(x).data(), &[3.0, -1.0]);
}

#[test]
fn nondeterministic_segment_is_detected_on_replay() {
    let calls = Cell::new(0u32);
    let mut g = Graph::<f64>::new();
    let x = g.param(Tensor::scalar(1.0));
    let body: SegmentBody<'_, f64> = Rc::new(|g: &mut Graph<'_, f64>, ins: &[Var]| {
        calls.set(calls.get() + 1);
        let y = g.scale(ins[0], calls.get() as f64);
        Ok(SegmentOutputs::new(vec![y]))
    });
    let (outs, _) = g.checkpoint(&[x], body).unwrap();
    assert!(matches!(g.backward(outs[0]), Err(Error::ReplayMismatch)));
}

#[test]
fn segment_aux_values_are_copied_out() {
    let mut g = Graph::<f64>::new();
    let x = g.param(Tensor::scalar(2.0));
    let body: SegmentBody<'_, f64> = Rc::new(|g: &mut Graph<'_, f64>, ins: &[Var]| {
        let y = g.mul(ins[0], ins[0]);
        let side = g.scale(ins[0], 10.0);
        Ok(SegmentOutputs {
            outputs: vec![y],
            aux: vec![side],
        })
    });
    let (outs, aux) = g.checkpoint(&[x], body).unwrap();
    assert_eq!(aux[0].item(), 20.0);
    assert_eq!(g.value(outs[0]).item(), 4.0);
    assert_eq!(g.backward(outs[0]).unwrap().wrt(x).item(), 4.0);
}

#[test]
fn checkpointing_bounds_live_activations() {
    // Each plain step records 4 nodes of 64 elements; a checkpointed step
    // keeps only its 64-element output.
    fn peak_for(steps: usize, checkpointed: bool) -> usize {
        let rng = KeyedRng::new(3);
        let w0: Tensor<f32> = rng.normal(&[64, 64], Purpose::Probe, 0, 0);
        let x0: Tensor<f32> = rng.normal(&[64, 1], Purpose::Probe, 0, 1);
        let base = memstats::live();
        memstats::reset_peak();
        {
            let mut g = Graph::<'_, f32>::new();
            let w = g.param(w0.scale_copy(0.05));
            let mut x = g.constant(x0);
            for _ in 0..steps {
                if checkpointed {
                    let body: SegmentBody<'_, f32> =
                        Rc::new(|g: &mut Graph<'_, f32>, ins: &[Var]| Ok(SegmentOutputs::new(vec![chain_step(g, ins[0], ins[1])])));
                    x = g.checkpoint(&[x, w], body).unwrap().0[0];
                } else {
                    x = chain_step(&mut g, x, w);
                }
            }
            let loss = g.sum(x);
            g.backward(loss).unwrap();
        }
        assert_eq!(memstats::live(), base);
        memstats::peak() - base
    }
    let step_cost = 4 * 64;
    for steps in [5, 20] {
        let plain = peak_for(steps, false);
        let ckpt = peak_for(steps, true);
        assert!(plain >= steps * step_cost, "plain {plain}");
        // One replayed interior plus one latent per step plus the loss.
        assert!(ckpt <= step_cost + (steps + 1) * 64 + 1, "checkpointed {ckpt} for {steps} steps");
    }
}

#[test]
fn backward_is_linear() {
    let x0 = t64(&[4], &[0.3, -1.2, 0.8, 1.9]);
    let (a, b) = (2.5, -0.75);
    let grad_of = |which: u8| {
        let mut g = Graph::<f64>::new();
        let x = g.param(x0.clone());
        let f = {
            let s = g.silu(x);
            g.sum(s)
        };
        let h = {
            let sq = g.mul(x, x);
            let sm = g.softmax(sq);
            let p = g.constant(t64(&[4], &[1.0, 2.0, 3.0, 4.0]));
            let d = g.mul(sm, p);
            g.sum(d)
        };
        let loss = match which {
            0 => f,
            1 => h,
            _ => {
                let fa = g.scale(f, a);
                let hb = g.scale(h, b);
                g.add(fa, hb)
            }
        };
        g.backward(loss).unwrap().wrt(x).clone()
    };
    let (gf, gh, gc) = (grad_of(0), grad_of(1), grad_of(2));
    let mut expect = gf.scale_copy(a);
    expect.axpy(b, &gh);
    assert!(gc.max_abs_diff(&expect) <= 1e-12);
}

#[test]
fn numeric_gradient_of_quadratic() {
    let x = t64(&[3], &[1.0, -2.0, 0.5]);
    let n = numeric_gradient(|p| Ok(p.norm_sq()), &x, 1e-4).unwrap();
    let a = x.scale_copy(2.0);
    assert!(max_rel_err(&a, &n) < 1e-8);
}

// Each primitive, wrapped as sum(probe * op(x)), against central differences.

fn inputs(seed: u64, n: usize) -> Vec<f64> {
    let rng = KeyedRng::new(seed);
    let mut s = rng.stream(Purpose::Probe, 99, 0);
    let t: Tensor<f64> = normal_tensor(&[n], &mut s);
    t.data().iter().map(|v| (v * 0.9).clamp(-2.0, 2.0)).collect()
}

fn check_unary(seed: u64, shape: &[usize], op: impl for<'g> Fn(&mut Graph<'g, f64>, Var) -> Var) -> f64 {
    let n: usize = shape.iter().product();
    let x = t64(shape, &inputs(seed, n));
    let out_shape = {
        let mut g = Graph::new();
        let v = g.constant(x.clone());
        let y = op(&mut g, v);
        g.shape(y).to_vec()
    };
    let probe = t64(&out_shape, &inputs(seed + 1000, out_shape.iter().product()));
    finite_diff_check(
        |g, v| {
            let y = op(g, v);
            let p = g.constant(probe.clone());
            let m = g.mul(y, p);
            Ok(g.sum(m))
        },
        &x,
        1e-5,
    )
    .unwrap()
    .max_rel_err
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn elementwise_primitives_match_fd(seed in 0u64..10_000) {
        let other = t64(&[6], &inputs(seed + 7, 6));
        let denom = t64(&[6], &inputs(seed + 9, 6).iter().map(|v| v.signum() * (v.abs() + 0.5)).collect::<Vec<_>>());
        let tol = 1e-6;
        let e = check_unary(seed, &[6], |g, x| { let o = g.constant(other.clone()); g.add(x, o) });
        prop_assert!(e <= tol, "rel err {}", e);
        let e = check_unary(seed, &[6], |g, x| { let o = g.constant(other.clone()); g.sub(o, x) });
        prop_assert!(e <= tol, "rel err {}", e);
        let e = check_unary(seed, &[6], |g, x| { let o = g.constant(other.clone()); g.mul(x, o) });
        prop_assert!(e <= tol, "rel err {}", e);
        let e = check_unary(seed, &[6], |g, x| { let d = g.constant(denom.clone()); g.div(x, d) });
        prop_assert!(e <= tol, "rel err {}", e);
        let e = check_unary(seed, &[6], |g, x| g.scale(x, -1.7));
        prop_assert!(e <= tol, "rel err {}", e);
        let e = check_unary(seed, &[6], |g, x| g.add_scalar(x, 0.3));
        prop_assert!(e <= tol, "rel err {}", e);
        let e = check_unary(seed, &[6], |g, x| g.div_scalar(x, 0.7));
        prop_assert!(e <= tol, "rel err {}", e);
        let e = check_unary(seed, &[6], |g, x| g.silu(x));
        prop_assert!(e <= tol, "rel err {}", e);
        let e = check_unary(seed, &[2, 3], |g, x| g.softmax(x));
        prop_assert!(e <= tol, "rel err {}", e);
        let e = check_unary(seed, &[2, 3], |g, x| g.log_softmax(x));
        prop_assert!(e <= tol, "rel err {}", e);
        let e = check_unary(seed, &[6], |g, x| g.reshape(x, &[3, 2]));
        prop_assert!(e <= tol, "rel err {}", e);
        let e = check_unary(seed, &[6], |g, x| { let s = g.sum(x); g.reshape(s, &[1]) });
        prop_assert!(e <= tol, "rel err {}", e);
        let e = check_unary(seed, &[6], |g, x| { let s = g.mean(x); g.reshape(s, &[1]) });
        prop_assert!(e <= tol, "rel err {}", e);
        let e = check_unary(seed, &[6], |g, x| { let idx: Arc<[usize]> = Arc::from(vec![5, 0, 0, 3]); g.gather(x, idx, &[4]) });
        prop_assert!(e <= tol, "rel err {}", e);
    }

    #[test]
    fn tensor_primitives_match_fd(seed in 0u64..10_000) {
        let tol = 1e-6;
        let right = t64(&[3, 2], &inputs(seed + 3, 6));
        let left = t64(&[4, 3], &inputs(seed + 4, 12));
        let bias = t64(&[2], &inputs(seed + 5, 2));
        let wconv = t64(&[2, 18], &inputs(seed + 6, 36));
        let e = check_unary(seed, &[2, 3], |g, x| { let r = g.constant(right.clone()); g.matmul(x, r) });
        prop_assert!(e <= tol, "rel err {}", e);
        let e = check_unary(seed, &[3, 2], |g, x| { let l = g.constant(left.clone()); g.matmul(l, x) });
        prop_assert!(e <= tol, "rel err {}", e);
        let e = check_unary(seed, &[2, 3], |g, x| { let b = g.constant(bias.clone()); g.add_channel(x, b) });
        prop_assert!(e <= tol, "rel err {}", e);
        let e = check_unary(seed, &[2, 4, 3], |g, x| { let w = g.constant(wconv.clone()); g.conv3x3(x, w) });
        prop_assert!(e <= tol, "rel err {}", e);
        let e = check_unary(seed, &[3, 2], |g, t| g.embedding(t, 1));
        prop_assert!(e <= tol, "rel err {}", e);
        let e = check_unary(seed, &[6], |g, x| g.clamp(x, -5.0, 5.0));
        prop_assert!(e <= tol, "rel err {}", e);
    }
}

