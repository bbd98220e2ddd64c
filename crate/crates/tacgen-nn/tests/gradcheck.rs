//! Finite-difference validation for every tape operation, plus bit-level
//! determinism of forward/backward/optimizer.

use ndarray::{Array1, Array2, Array4};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tacgen_nn::init::{linear_init, uniform2, xavier_init};
use tacgen_nn::{check_gradients, AdamW, ParamStore, Tape};

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn rand4(rng: &mut ChaCha8Rng, n: usize, c: usize, h: usize, w: usize, amp: f64) -> Array4<f64> {
    let mut a = Array4::zeros((n, c, h, w));
    for v in a.iter_mut() {
        *v = rng.random_range(-amp..amp);
    }
    a
}

const SMOOTH_TOL: f64 = 1e-6;
const KINKED_TOL: f64 = 1e-5;
const H: f64 = 1e-5;

#[test]
fn linear_relu_mse() {
    let mut r = rng(1);
    let mut store = ParamStore::new();
    let (w, b) = linear_init(&mut r, 6, 4);
    let w = store.add("w", w);
    let b = store.add("b", b);
    let x = uniform2(&mut r, 3, 6, 1.0);
    let target = uniform2(&mut r, 3, 4, 1.0).into_dyn();
    let report = check_gradients(
        &mut store,
        move |tape, store| {
            let xn = tape.constant(x.clone());
            let wn = tape.param(store, w);
            let bn = tape.param(store, b);
            let y = tape.linear(xn, wn, bn);
            let y = tape.relu(y);
            tape.mse_loss(y, &target, None)
        },
        16,
        H,
        7,
    );
    assert!(report.max_rel_err < KINKED_TOL, "{report:?}");
}

#[test]
fn smooth_activation_chain() {
    let mut r = rng(2);
    let mut store = ParamStore::new();
    let w = store.add("w", uniform2(&mut r, 5, 5, 0.6));
    let x = uniform2(&mut r, 4, 5, 1.2);
    let target = uniform2(&mut r, 4, 5, 0.8).into_dyn();
    let report = check_gradients(
        &mut store,
        move |tape, store| {
            let xn = tape.constant(x.clone());
            let wn = tape.param(store, w);
            let h1 = tape.matmul(xn, wn);
            let h2 = tape.silu(h1);
            let h3 = tape.gelu(h2);
            let h4 = tape.sigmoid_op(h3);
            tape.mse_loss(h4, &target, None)
        },
        25,
        H,
        8,
    );
    assert!(report.max_rel_err < SMOOTH_TOL, "{report:?}");
}

#[test]
fn layer_norm_grad() {
    let mut r = rng(3);
    let mut store = ParamStore::new();
    let w = store.add("w", uniform2(&mut r, 6, 6, 0.9));
    let x = uniform2(&mut r, 5, 6, 1.5);
    let target = uniform2(&mut r, 5, 6, 1.0).into_dyn();
    let report = check_gradients(
        &mut store,
        move |tape, store| {
            let xn = tape.constant(x.clone());
            let wn = tape.param(store, w);
            let h1 = tape.matmul(xn, wn);
            let h2 = tape.layer_norm(h1);
            tape.mse_loss(h2, &target, None)
        },
        36,
        H,
        9,
    );
    assert!(report.max_rel_err < SMOOTH_TOL, "{report:?}");
}

#[test]
fn modulation_and_column_slicing() {
    // The adaLN pattern: project a conditioning row to shift/scale/gate,
    // modulate normalized tokens, gate the output.
    let mut r = rng(4);
    let mut store = ParamStore::new();
    let d = 6;
    let (w, b) = linear_init(&mut r, d, 3 * d);
    let w = store.add("cond.w", w);
    let b = store.add("cond.b", b);
    let tokens = uniform2(&mut r, 4, d, 1.0);
    let cond = uniform2(&mut r, 1, d, 1.0);
    let target = uniform2(&mut r, 4, d, 1.0).into_dyn();
    let report = check_gradients(
        &mut store,
        move |tape, store| {
            let t = tape.constant(tokens.clone());
            let c = tape.constant(cond.clone());
            let wn = tape.param(store, w);
            let bn = tape.param(store, b);
            let act = tape.silu(c);
            let params3 = tape.linear(act, wn, bn);
            let shift = tape.slice_cols(params3, 0, d);
            let scale = tape.slice_cols(params3, d, d);
            let gate = tape.slice_cols(params3, 2 * d, d);
            let normed = tape.layer_norm(t);
            let m = tape.modulate(normed, shift, scale);
            let gated = tape.mul_vec(m, gate);
            let res = tape.add(t, gated);
            tape.mse_loss(res, &target, None)
        },
        40,
        H,
        10,
    );
    assert!(report.max_rel_err < SMOOTH_TOL, "{report:?}");
}

#[test]
fn attention_grad() {
    let mut r = rng(5);
    let mut store = ParamStore::new();
    let d = 8;
    let wq = store.add("wq", xavier_init(&mut r, d, d));
    let wk = store.add("wk", xavier_init(&mut r, d, d));
    let wv = store.add("wv", xavier_init(&mut r, d, d));
    let x = uniform2(&mut r, 5, d, 1.0);
    let target = uniform2(&mut r, 5, d, 0.7).into_dyn();
    let report = check_gradients(
        &mut store,
        move |tape, store| {
            let xn = tape.constant(x.clone());
            let wqn = tape.param(store, wq);
            let wkn = tape.param(store, wk);
            let wvn = tape.param(store, wv);
            let q = tape.matmul(xn, wqn);
            let k = tape.matmul(xn, wkn);
            let v = tape.matmul(xn, wvn);
            let o = tape.attention(q, k, v, 2);
            tape.mse_loss(o, &target, None)
        },
        24,
        H,
        11,
    );
    assert!(report.max_rel_err < SMOOTH_TOL, "{report:?}");
}

#[test]
fn pooling_and_mean_rows_with_l1() {
    let mut r = rng(6);
    let mut store = ParamStore::new();
    let w = store.add("w", uniform2(&mut r, 4, 3, 1.0));
    let x = uniform2(&mut r, 6, 4, 1.0);
    let target = uniform2(&mut r, 1, 3, 2.0).into_dyn();
    let report = check_gradients(
        &mut store,
        move |tape, store| {
            let xn = tape.constant(x.clone());
            let wn = tape.param(store, w);
            let h1 = tape.matmul(xn, wn);
            let pooled = tape.mean_rows(h1);
            tape.l1_loss(pooled, &target, None)
        },
        12,
        H,
        12,
    );
    assert!(report.max_rel_err < KINKED_TOL, "{report:?}");
}

#[test]
fn conv_stack_grad() {
    let mut r = rng(7);
    let mut store = ParamStore::new();
    let (cw, cb) = tacgen_nn::init::conv_init(&mut r, 2, 3, 3);
    let cw = store.add("conv.w", cw);
    let cb = store.add("conv.b", cb);
    let gamma = store.add("bn.g", Array1::from_elem(3, 1.0) + uniform2(&mut r, 1, 3, 0.2).row(0).to_owned());
    let beta = store.add("bn.b", uniform2(&mut r, 1, 3, 0.2).row(0).to_owned());
    let x = rand4(&mut r, 2, 2, 6, 6, 1.0);
    let mut tr = rng(70);
    let target = rand4(&mut tr, 2, 3, 6, 6, 1.0).into_dyn();
    let report = check_gradients(
        &mut store,
        move |tape, store| {
            let xn = tape.constant(x.clone());
            let cwn = tape.param(store, cw);
            let cbn = tape.param(store, cb);
            let gn = tape.param(store, gamma);
            let bn = tape.param(store, beta);
            let conv_out = tape.conv2d(xn, cwn, cbn, 1);
            let y = tape.batch_norm_train(conv_out, gn, bn);
            let y = tape.relu(y);
            let y = tape.max_pool2(y);
            let y = tape.upsample2(y);
            let main = tape.mse_loss(y, &target, None);
            // Batch norm cancels the conv bias, which would leave it with an
            // exactly-zero gradient; tap the pre-norm activations so every
            // parameter stays live.
            let tap = tape.mean_all(conv_out);
            tape.add_scaled(main, tap, 1.0, 0.25)
        },
        20,
        H,
        13,
    );
    assert!(report.max_rel_err < KINKED_TOL, "{report:?}");
}

#[test]
fn batch_norm_eval_grad() {
    let mut r = rng(8);
    let mut store = ParamStore::new();
    let gamma = store.add("bn.g", Array1::from_elem(2, 0.9));
    let beta = store.add("bn.b", Array1::from_elem(2, 0.1));
    let x = rand4(&mut r, 2, 2, 4, 4, 1.0);
    let running_mean = Array1::from_vec(vec![0.1, -0.2]);
    let running_var = Array1::from_vec(vec![0.8, 1.3]);
    let mut tr = rng(80);
    let target = rand4(&mut tr, 2, 2, 4, 4, 1.0).into_dyn();
    let report = check_gradients(
        &mut store,
        move |tape, store| {
            let xn = tape.constant(x.clone());
            let gn = tape.param(store, gamma);
            let bn = tape.param(store, beta);
            let y = tape.batch_norm_eval(xn, gn, bn, &running_mean, &running_var);
            tape.mse_loss(y, &target, None)
        },
        16,
        H,
        14,
    );
    assert!(report.max_rel_err < SMOOTH_TOL, "{report:?}");
}

#[test]
fn cross_entropy_grad() {
    let mut r = rng(9);
    let mut store = ParamStore::new();
    let (w, b) = linear_init(&mut r, 5, 4);
    let w = store.add("w", w);
    let b = store.add("b", b);
    let x = uniform2(&mut r, 6, 5, 1.0);
    let labels = vec![0usize, 3, 1, 2, 3, 0];
    let report = check_gradients(
        &mut store,
        move |tape, store| {
            let xn = tape.constant(x.clone());
            let wn = tape.param(store, w);
            let bn = tape.param(store, b);
            let logits = tape.linear(xn, wn, bn);
            tape.cross_entropy(logits, &labels)
        },
        24,
        H,
        15,
    );
    assert!(report.max_rel_err < SMOOTH_TOL, "{report:?}");
}

#[test]
fn weighted_losses_respect_masks() {
    let mut r = rng(10);
    let mut store = ParamStore::new();
    let w = store.add("w", uniform2(&mut r, 3, 4, 1.0));
    let x = uniform2(&mut r, 2, 3, 1.0);
    let target = uniform2(&mut r, 2, 4, 0.9).into_dyn();
    // Half the outputs are masked out.
    let mut weight = ndarray::ArrayD::zeros(target.raw_dim());
    for (i, v) in weight.iter_mut().enumerate() {
        *v = (i % 2) as f64;
    }
    let wt = weight.clone();
    let report = check_gradients(
        &mut store,
        move |tape, store| {
            let xn = tape.constant(x.clone());
            let wn = tape.param(store, w);
            let y = tape.matmul(xn, wn);
            let l_mse = tape.mse_loss(y, &target, Some(&wt));
            let l_l1 = tape.l1_loss(y, &target, Some(&wt));
            tape.add_scaled(l_mse, l_l1, 0.5, 0.5)
        },
        12,
        H,
        16,
    );
    assert!(report.max_rel_err < KINKED_TOL, "{report:?}");

    // Masked outputs must carry zero gradient.
    let mut tape = Tape::new();
    let mut r2 = rng(11);
    let x2 = uniform2(&mut r2, 2, 3, 1.0);
    let t2 = uniform2(&mut r2, 2, 4, 1.0).into_dyn();
    let xn = tape.constant(x2);
    let wi = store.id_of("w").unwrap();
    let wn = tape.param(&store, wi);
    let y = tape.matmul(xn, wn);
    let zero_weight = ndarray::ArrayD::zeros(t2.raw_dim());
    let loss = tape.mse_loss(y, &t2, Some(&zero_weight));
    assert_eq!(tape.scalar(loss), 0.0);
    let grads = tape.backward(loss, store.len());
    let g = grads.get(wi).unwrap();
    assert!(g.iter().all(|&v| v == 0.0));
}

#[test]
fn elementwise_and_reshape_composite() {
    let mut r = rng(12);
    let mut store = ParamStore::new();
    let a = store.add("a", uniform2(&mut r, 3, 4, 1.0));
    let vb = store.add("vb", uniform2(&mut r, 1, 4, 1.0));
    let target = uniform2(&mut r, 2, 6, 0.4).into_dyn();
    let report = check_gradients(
        &mut store,
        move |tape, store| {
            let an = tape.param(store, a);
            let vn = tape.param(store, vb);
            let s = tape.add_vec(an, vn);
            let s = tape.mul_vec(s, vn);
            let sc = tape.scale(s, 0.7);
            let sum = tape.add_scaled(s, sc, 0.4, 0.6);
            let rs = tape.reshape(sum, &[2, 6]);
            let l1 = tape.mse_loss(rs, &target, None);
            let m = tape.mean_all(rs);
            tape.add(l1, m)
        },
        16,
        H,
        17,
    );
    assert!(report.max_rel_err < SMOOTH_TOL, "{report:?}");
}

#[test]
fn forward_backward_and_optimizer_are_bit_deterministic() {
    let run = || {
        let mut r = rng(42);
        let mut store = ParamStore::new();
        let (w1, b1) = linear_init(&mut r, 8, 8);
        let w1 = store.add("w1", w1);
        let b1 = store.add("b1", b1);
        let (w2, b2) = linear_init(&mut r, 8, 2);
        let w2 = store.add("w2", w2);
        let b2 = store.add("b2", b2);
        let x = uniform2(&mut r, 4, 8, 1.0);
        let target = uniform2(&mut r, 4, 2, 1.0).into_dyn();
        let mut opt = AdamW::new(&store, 1e-3, 1e-2);
        let mut last_loss = 0.0;
        for _ in 0..5 {
            let mut tape = Tape::new();
            let xn = tape.constant(x.clone());
            let w1n = tape.param(&store, w1);
            let b1n = tape.param(&store, b1);
            let h1 = tape.linear(xn, w1n, b1n);
            let h1 = tape.gelu(h1);
            let w2n = tape.param(&store, w2);
            let b2n = tape.param(&store, b2);
            let y = tape.linear(h1, w2n, b2n);
            let loss = tape.mse_loss(y, &target, None);
            last_loss = tape.scalar(loss);
            let grads = tape.backward(loss, store.len());
            opt.step(&mut store, &grads);
        }
        (last_loss.to_bits(), store.fingerprint())
    };
    let (loss_a, fp_a) = run();
    let (loss_b, fp_b) = run();
    assert_eq!(loss_a, loss_b);
    assert_eq!(fp_a, fp_b);
}
