//! Finite-difference verification for every tape operation, plus
//! higher-order differentiation checks.

use emogan_autograd::gradcheck;
use emogan_autograd::ops::ConvGeom;
use emogan_autograd::{par, Data, Tape, Var};
use ndarray::IxDyn;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::sync::Arc;

fn rand_data(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Data<f64> {
    Data::from_shape_fn(IxDyn(shape), |_| rng.random_range(lo..hi))
}

/// Builds `sum(f(params) * r)` for a fixed random `r`, giving every output
/// element a distinct adjoint.
fn weighted_sum(tape: &Tape<f64>, out: Var, seed: u64) -> Var {
    let shape = tape.shape(out);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = tape.constant(rand_data(&mut rng, &shape, -1.0, 1.0));
    tape.sum_all(tape.mul(out, r))
}

fn assert_check<F>(params: &[Data<f64>], build: F, label: &str)
where
    F: Fn(&Tape<f64>, &[Var]) -> Var,
{
    let report = gradcheck::check(params, build, 1e-5, 1e-6, 40, 99);
    assert!(
        report.passes(1e-5),
        "{label}: max rel err {} at {:?}",
        report.max_rel_err,
        report.worst
    );
}

#[test]
fn elementwise_ops_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = rand_data(&mut rng, &[3, 4], -2.0, 2.0);
    let b = rand_data(&mut rng, &[3, 4], -2.0, 2.0);
    // Kinked ops get inputs bounded away from zero.
    let pos = rand_data(&mut rng, &[3, 4], 0.5, 2.0);
    let off = rand_data(&mut rng, &[3, 4], 0.2, 1.5);

    assert_check(&[a.clone(), b.clone()], |t, v| weighted_sum(t, t.add(v[0], v[1]), 2), "add");
    assert_check(&[a.clone(), b.clone()], |t, v| weighted_sum(t, t.sub(v[0], v[1]), 3), "sub");
    assert_check(&[a.clone(), b.clone()], |t, v| weighted_sum(t, t.mul(v[0], v[1]), 4), "mul");
    assert_check(&[a.clone()], |t, v| weighted_sum(t, t.scale(v[0], -1.7), 5), "scale");
    assert_check(&[a.clone()], |t, v| weighted_sum(t, t.add_scalar(v[0], 0.3), 6), "add_scalar");
    assert_check(&[pos.clone()], |t, v| weighted_sum(t, t.pow_const(v[0], 0.5), 7), "sqrt");
    assert_check(&[pos.clone()], |t, v| weighted_sum(t, t.pow_const(v[0], -1.0), 8), "recip");
    assert_check(&[a.clone()], |t, v| weighted_sum(t, t.pow_const(v[0], 2.0), 9), "square");
    assert_check(&[a.clone()], |t, v| weighted_sum(t, t.exp(v[0]), 10), "exp");
    assert_check(&[pos.clone()], |t, v| weighted_sum(t, t.ln(v[0]), 11), "ln");
    assert_check(&[off.clone()], |t, v| weighted_sum(t, t.abs(v[0]), 12), "abs");
    assert_check(&[off.clone()], |t, v| weighted_sum(t, t.relu(v[0]), 13), "relu");
    assert_check(&[off.clone()], |t, v| weighted_sum(t, t.leaky_relu(v[0], 0.01), 14), "leaky_relu");
    assert_check(&[a.clone()], |t, v| weighted_sum(t, t.sigmoid(v[0]), 15), "sigmoid");
}

#[test]
fn matmul_matches_finite_differences_for_all_transpose_flags() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for (ta, tb) in [(false, false), (true, false), (false, true), (true, true)] {
        let a_shape = if ta { [4, 3] } else { [3, 4] };
        let b_shape = if tb { [5, 4] } else { [4, 5] };
        let a = rand_data(&mut rng, &a_shape, -1.0, 1.0);
        let b = rand_data(&mut rng, &b_shape, -1.0, 1.0);
        assert_check(
            &[a, b],
            |t, v| weighted_sum(t, t.matmul(v[0], v[1], ta, tb), 20),
            &format!("matmul ta={ta} tb={tb}"),
        );
    }
}

#[test]
fn structural_ops_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = rand_data(&mut rng, &[2, 3, 5, 4], -1.0, 1.0);
    let flat = rand_data(&mut rng, &[2, 12], -1.0, 1.0);
    let small = rand_data(&mut rng, &[1, 3, 1, 1], -1.0, 1.0);

    assert_check(&[flat.clone()], |t, v| weighted_sum(t, t.reshape(v[0], &[4, 6]), 30), "reshape");
    assert_check(&[x.clone()], |t, v| weighted_sum(t, t.sum_axes(v[0], &[2, 3]), 31), "sum_axes");
    assert_check(&[x.clone()], |t, v| t.sum_all(v[0]), "sum_all");
    assert_check(
        &[small.clone()],
        |t, v| weighted_sum(t, t.broadcast(v[0], &[2, 3, 4, 5]), 32),
        "broadcast",
    );
    assert_check(&[x.clone()], |t, v| weighted_sum(t, t.pad_reflect(v[0], 2), 33), "pad_reflect");
    assert_check(&[x.clone()], |t, v| weighted_sum(t, t.pad_reflect_adj(v[0], 1), 34), "pad_reflect_adj");
    assert_check(&[x.clone()], |t, v| weighted_sum(t, t.channel_slice(v[0], 1, 2), 35), "channel_slice");
    assert_check(&[x.clone()], |t, v| weighted_sum(t, t.channel_embed(v[0], 2, 7), 36), "channel_embed");
}

#[test]
fn convolution_family_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for (in_ch, out_ch, k, s, p, h, w) in
        [(2usize, 3usize, 3usize, 1usize, 1usize, 5usize, 6usize), (2, 3, 4, 2, 1, 8, 8), (1, 2, 7, 1, 3, 8, 7)]
    {
        let geom = Arc::new(ConvGeom::new(in_ch, out_ch, k, s, p, h, w));
        let x = rand_data(&mut rng, &[2, in_ch, h, w], -1.0, 1.0);
        let wgt = rand_data(&mut rng, &[out_ch, in_ch, k, k], -1.0, 1.0);
        let z = rand_data(&mut rng, &[2, out_ch, geom.oh, geom.ow], -1.0, 1.0);

        let g1 = Arc::clone(&geom);
        assert_check(
            &[x.clone(), wgt.clone()],
            move |t, v| weighted_sum(t, t.conv(v[0], v[1], &g1), 40),
            &format!("conv_fwd k{k} s{s}"),
        );
        let g2 = Arc::clone(&geom);
        assert_check(
            &[z.clone(), wgt.clone()],
            move |t, v| weighted_sum(t, t.conv_igrad(v[0], v[1], &g2), 41),
            &format!("conv_igrad k{k} s{s}"),
        );
        let g3 = Arc::clone(&geom);
        assert_check(
            &[x.clone(), z.clone()],
            move |t, v| weighted_sum(t, t.conv_wgrad(v[0], v[1], &g3), 42),
            &format!("conv_wgrad k{k} s{s}"),
        );
    }
}

#[test]
fn second_derivatives_flow_through_backward() {
    // y = x^2 at x = 3: dy/dx = 6, d2y/dx2 = 2, d3y/dx3 absent (zero).
    let tape = Tape::<f64>::new();
    let x = tape.leaf(Data::from_elem(IxDyn(&[]), 3.0));
    let y = tape.mul(x, x);
    let g = tape.backward(y, &[x]).var(x).expect("first derivative");
    assert_eq!(tape.scalar(g), 6.0);
    let gg = tape.backward(g, &[x]).var(x).expect("second derivative");
    assert_eq!(tape.scalar(gg), 2.0);
    assert!(tape.backward(gg, &[x]).var(x).is_none(), "third derivative path should vanish");
}

#[test]
fn gradient_norm_penalty_has_correct_weight_gradient() {
    // Critic c(x) = w . x. Then grad_x c = w, and the penalty
    // p = (|w| - 1)^2 has dp/dw = 2 (|w| - 1) w / |w|, independent of x.
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let w0 = rand_data(&mut rng, &[1, 6], -1.0, 1.0);
    let x0 = rand_data(&mut rng, &[6, 1], -1.0, 1.0);

    let tape = Tape::<f64>::new();
    let w = tape.leaf(w0.clone());
    let x = tape.leaf(x0.clone());
    let score = tape.matmul(w, x, false, false);
    let t = tape.sum_all(score);
    let gx = tape.backward(t, &[x]).var(x).expect("input gradient");
    let norm = tape.pow_const(tape.sum_all(tape.mul(gx, gx)), 0.5);
    let penalty = tape.pow_const(tape.add_scalar(norm, -1.0), 2.0);
    let gw = tape.backward(penalty, &[w]).var(w).expect("penalty gradient");

    let norm_w = w0.iter().map(|v| v * v).sum::<f64>().sqrt();
    let coef = 2.0 * (norm_w - 1.0) / norm_w;
    let got = tape.value(gw);
    for (g, w) in got.iter().zip(w0.iter()) {
        assert!((g - coef * w).abs() < 1e-10, "{g} vs {}", coef * w);
    }
}

#[test]
fn gradient_penalty_through_conv_matches_finite_differences() {
    // Same construction as the WGAN-GP term, but through a conv +
    // leaky-relu + conv critic so the double backward exercises the full
    // convolution trio.
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let geom1 = Arc::new(ConvGeom::new(2, 3, 3, 2, 1, 8, 8));
    let geom2 = Arc::new(ConvGeom::new(3, 1, 3, 1, 1, 4, 4));
    let x0 = rand_data(&mut rng, &[2, 2, 8, 8], -1.0, 1.0);
    let w1 = rand_data(&mut rng, &[3, 2, 3, 3], -0.5, 0.5);
    let w2 = rand_data(&mut rng, &[1, 3, 3, 3], -0.5, 0.5);

    let build = |t: &Tape<f64>, v: &[Var]| {
        let x = t.constant(x0.clone());
        let xg = t.leaf((*t.value(x)).clone());
        let h = t.leaky_relu(t.conv(xg, v[0], &geom1), 0.01);
        let score = t.conv(h, v[1], &geom2);
        let total = t.sum_all(score);
        let gx = t.backward(total, &[xg]).var(xg).expect("input grad");
        let sq = t.mul(gx, gx);
        let per_sample = t.sum_axes(sq, &[1, 2, 3]);
        let norm = t.pow_const(per_sample, 0.5);
        let dev = t.add_scalar(norm, -1.0);
        t.mean_all(t.mul(dev, dev))
    };
    let report = gradcheck::check(&[w1, w2], build, 1e-5, 1e-6, 60, 7);
    assert!(report.passes(1e-4), "max rel err {} at {:?}", report.max_rel_err, report.worst);
}

#[test]
fn parallel_and_sequential_execution_are_bit_identical() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let geom = Arc::new(ConvGeom::new(3, 4, 4, 2, 1, 16, 16));
    let x0 = rand_data(&mut rng, &[4, 3, 16, 16], -1.0, 1.0);
    let w0 = rand_data(&mut rng, &[4, 3, 4, 4], -0.5, 0.5);

    let run = || {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(x0.clone());
        let w = tape.leaf(w0.clone());
        let y = tape.leaky_relu(tape.conv(tape.pad_reflect(x, 1), w, &Arc::new(ConvGeom::new(3, 4, 4, 2, 1, 18, 18))), 0.2);
        let loss = tape.mean_all(tape.mul(y, y));
        let grads = tape.backward(loss, &[x, w]);
        (
            tape.scalar(loss),
            (*tape.value(grads.var(x).unwrap())).clone(),
            (*tape.value(grads.var(w).unwrap())).clone(),
        )
    };
    let _ = geom;

    let (l_par, gx_par, gw_par) = run();
    par::force_sequential(true);
    let (l_seq, gx_seq, gw_seq) = run();
    par::force_sequential(false);

    assert_eq!(l_par.to_bits(), l_seq.to_bits());
    assert!(gx_par.iter().zip(gx_seq.iter()).all(|(a, b)| a.to_bits() == b.to_bits()));
    assert!(gw_par.iter().zip(gw_seq.iter()).all(|(a, b)| a.to_bits() == b.to_bits()));
}
