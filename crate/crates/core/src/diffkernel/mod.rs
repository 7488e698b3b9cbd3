//! Small reverse-mode differentiation kernel: dense layers, an LSTM cell,
//! the VAE losses and an Adam optimizer, all in `f64`.

mod adam;
pub mod gradcheck;
mod layers;
mod params;
mod tape;
mod tensor;

pub use adam::{adam_step, Adam};
pub use layers::{dense_forward, kl_standard_normal, mse_loss, reparameterize, BoundLstm, Dense, LstmCell};
pub use params::{ParamId, ParamSet};
pub(crate) use tape::mse_value;
pub use tape::{Activation, Tape, Var};
pub use tensor::Tensor2;

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::gradcheck::{max_param_grad_error, relative_error, DEFAULT_STEP};
    use super::*;
    use crate::error::Error;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn dense_params(w: Tensor2, b: Tensor2) -> (ParamSet, Dense) {
        let mut p = ParamSet::new();
        let wi = p.add("w", w);
        let bi = p.add("b", b);
        (p, Dense::from_ids(wi, bi, Activation::Identity))
    }

    #[test]
    fn dense_identity_weights() {
        let (p, layer) = dense_params(Tensor2::identity(2), Tensor2::zeros(1, 2));
        let mut tape = Tape::new();
        let x = tape.input(Tensor2::row_vector(&[3.0, 4.0]));
        let y = layer.forward(&mut tape, &p, x).unwrap();
        assert_eq!(tape.value(y).as_slice(), &[3.0, 4.0]);
    }

    #[test]
    fn dense_bias_only_relu() {
        let (p, mut layer) = dense_params(Tensor2::zeros(3, 2), Tensor2::row_vector(&[1.0, 1.0]));
        layer.activation = Activation::Relu;
        let mut tape = Tape::new();
        let x = tape.input(Tensor2::row_vector(&[-7.0, 0.5, 100.0]));
        let y = layer.forward(&mut tape, &p, x).unwrap();
        assert_eq!(tape.value(y).as_slice(), &[1.0, 1.0]);
    }

    #[test]
    fn dense_tanh_selects_first_row() {
        let mut r = rng(3);
        let w = Tensor2::uniform(3, 2, 1.0, &mut r);
        let (p, mut layer) = dense_params(w.clone(), Tensor2::zeros(1, 2));
        layer.activation = Activation::Tanh;
        let mut tape = Tape::new();
        let x = tape.input(Tensor2::row_vector(&[1.0, 0.0, 0.0]));
        let y = layer.forward(&mut tape, &p, x).unwrap();
        // independent oracle: explicit dot products
        for c in 0..2 {
            let dot: f64 = (0..3).map(|k| [1.0, 0.0, 0.0][k] * w.get(k, c)).sum();
            assert_eq!(tape.value(y).get(0, c), dot.tanh());
        }
    }

    #[test]
    fn dense_shape_error_reports_both_shapes() {
        let (p, layer) = dense_params(Tensor2::zeros(3, 2), Tensor2::zeros(1, 2));
        let mut tape = Tape::new();
        let x = tape.input(Tensor2::zeros(1, 4));
        match layer.forward(&mut tape, &p, x) {
            Err(Error::Shape { left, right, .. }) => {
                assert_eq!(left, (1, 4));
                assert_eq!(right, (3, 2));
            }
            other => panic!("expected shape error, got {other:?}"),
        }
    }

    #[test]
    fn lstm_zero_parameters_give_zero_hidden() {
        let mut p = ParamSet::new();
        let cell = LstmCell::new(&mut p, "lstm", 3, 4, &mut rng(0));
        for id in p.ids().collect::<Vec<_>>() {
            p.value_mut(id).fill(0.0);
        }
        let mut tape = Tape::new();
        let x = tape.input(Tensor2::row_vector(&[0.3, -0.2, 0.9]));
        let h0 = tape.input(Tensor2::zeros(1, 4));
        let c0 = tape.input(Tensor2::zeros(1, 4));
        let (h, c) = cell.step(&mut tape, &p, x, h0, c0).unwrap();
        assert!(tape.value(h).as_slice().iter().all(|&v| v == 0.0));
        assert!(tape.value(c).as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn lstm_saturated_gates_carry_cell_state() {
        let hidden = 3;
        let mut p = ParamSet::new();
        let cell = LstmCell::new(&mut p, "lstm", 2, hidden, &mut rng(1));
        let b = p.value_mut(cell.bias);
        for c in 0..hidden {
            b.set(0, c, -50.0);
            b.set(0, hidden + c, 50.0);
        }
        let mut tape = Tape::new();
        let x = tape.input(Tensor2::row_vector(&[0.5, -0.5]));
        let h0 = tape.input(Tensor2::row_vector(&[0.1, 0.2, 0.3]));
        let c_prev = Tensor2::row_vector(&[0.7, -1.2, 2.0]);
        let c0 = tape.input(c_prev.clone());
        let (_, c) = cell.step(&mut tape, &p, x, h0, c0).unwrap();
        for (got, want) in tape.value(c).as_slice().iter().zip(c_prev.as_slice()) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    /// Scalar re-implementation of the gate equations.
    fn lstm_scalar_oracle(
        x: &[f64],
        h: &[f64],
        c: &[f64],
        wx: &Tensor2,
        wh: &Tensor2,
        b: &Tensor2,
    ) -> (Vec<f64>, Vec<f64>) {
        let n = h.len();
        let pre = |gate: usize, j: usize| {
            let col = gate * n + j;
            let mut s = b.get(0, col);
            for (k, xv) in x.iter().enumerate() {
                s += xv * wx.get(k, col);
            }
            for (k, hv) in h.iter().enumerate() {
                s += hv * wh.get(k, col);
            }
            s
        };
        let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
        let mut h_out = vec![0.0; n];
        let mut c_out = vec![0.0; n];
        for j in 0..n {
            let i = sig(pre(0, j));
            let f = sig(pre(1, j));
            let g = pre(2, j).tanh();
            let o = sig(pre(3, j));
            c_out[j] = f * c[j] + i * g;
            h_out[j] = o * c_out[j].tanh();
        }
        (h_out, c_out)
    }

    #[test]
    fn lstm_matches_scalar_oracle() {
        let mut r = rng(11);
        let mut p = ParamSet::new();
        let cell = LstmCell::new(&mut p, "lstm", 3, 4, &mut r);
        let x: Vec<f64> = (0..3).map(|_| r.gen_range(-1.0..1.0)).collect();
        let h: Vec<f64> = (0..4).map(|_| r.gen_range(-1.0..1.0)).collect();
        let c: Vec<f64> = (0..4).map(|_| r.gen_range(-1.0..1.0)).collect();
        let mut tape = Tape::new();
        let xv = tape.input(Tensor2::row_vector(&x));
        let hv = tape.input(Tensor2::row_vector(&h));
        let cv = tape.input(Tensor2::row_vector(&c));
        let (h1, c1) = cell.step(&mut tape, &p, xv, hv, cv).unwrap();
        let (ho, co) = lstm_scalar_oracle(
            &x,
            &h,
            &c,
            p.value(cell.w_input),
            p.value(cell.w_hidden),
            p.value(cell.bias),
        );
        for (a, b) in tape.value(h1).as_slice().iter().zip(&ho) {
            assert!((a - b).abs() < 1e-12);
        }
        for (a, b) in tape.value(c1).as_slice().iter().zip(&co) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn lstm_hidden_size_mismatch() {
        let mut p = ParamSet::new();
        let cell = LstmCell::new(&mut p, "lstm", 2, 3, &mut rng(0));
        let mut tape = Tape::new();
        let x = tape.input(Tensor2::zeros(1, 2));
        let h = tape.input(Tensor2::zeros(1, 4));
        let c = tape.input(Tensor2::zeros(1, 4));
        assert!(matches!(cell.step(&mut tape, &p, x, h, c), Err(Error::Shape { .. })));
    }

    #[test]
    fn mse_examples() {
        let cases: [(&[f64], &[f64], f64); 3] = [
            (&[0.5, -1.0], &[0.5, -1.0], 0.0),
            (&[0.0, 0.0, 0.0], &[1.0, 1.0, 1.0], 1.0),
            (&[1.0, 3.0], &[2.0, 1.0], 2.5),
        ];
        for (p, t, want) in cases {
            let mut tape = Tape::new();
            let a = tape.input(Tensor2::row_vector(p));
            let b = tape.input(Tensor2::row_vector(t));
            let l = mse_loss(&mut tape, a, b).unwrap();
            assert_eq!(tape.value(l).item(), want);
        }
        let mut tape = Tape::new();
        let a = tape.input(Tensor2::zeros(1, 2));
        let b = tape.input(Tensor2::zeros(2, 1));
        assert!(mse_loss(&mut tape, a, b).is_err());
    }

    fn kl(mu: &[f64], logvar: &[f64]) -> f64 {
        let mut tape = Tape::new();
        let m = tape.input(Tensor2::row_vector(mu));
        let l = tape.input(Tensor2::row_vector(logvar));
        let k = kl_standard_normal(&mut tape, m, l).unwrap();
        tape.value(k).item()
    }

    #[test]
    fn kl_examples() {
        assert_eq!(kl(&[0.0, 0.0], &[0.0, 0.0]), 0.0);
        assert_eq!(kl(&[1.0], &[0.0]), 0.5);
    }

    /// KL(N(m, s²) ‖ N(0,1)) by numerically integrating q·log(q/p).
    fn kl_quadrature(m: f64, logvar: f64) -> f64 {
        let s = (0.5 * logvar).exp();
        let (lo, hi) = (m - 12.0 * s, m + 12.0 * s);
        let n = 20_000;
        let dx = (hi - lo) / n as f64;
        let log_q = |x: f64| -0.5 * ((x - m) / s).powi(2) - s.ln() - 0.5 * (2.0 * std::f64::consts::PI).ln();
        let log_p = |x: f64| -0.5 * x * x - 0.5 * (2.0 * std::f64::consts::PI).ln();
        // Simpson's rule
        let f = |x: f64| log_q(x).exp() * (log_q(x) - log_p(x));
        let mut acc = f(lo) + f(hi);
        for k in 1..n {
            let x = lo + k as f64 * dx;
            acc += if k % 2 == 1 { 4.0 } else { 2.0 } * f(x);
        }
        acc * dx / 3.0
    }

    #[test]
    fn kl_matches_quadrature() {
        let mut r = rng(5);
        for _ in 0..10 {
            let mu: Vec<f64> = (0..3).map(|_| r.gen_range(-1.0..1.0)).collect();
            let lv: Vec<f64> = (0..3).map(|_| r.gen_range(-1.0..1.0)).collect();
            let want: f64 = mu.iter().zip(&lv).map(|(&m, &l)| kl_quadrature(m, l)).sum();
            assert!((kl(&mu, &lv) - want).abs() < 1e-8, "{} vs {want}", kl(&mu, &lv));
        }
    }

    #[test]
    fn kl_is_nonnegative_and_zero_only_at_prior() {
        let mut r = rng(6);
        for _ in 0..200 {
            let mu: Vec<f64> = (0..4).map(|_| r.gen_range(-1.0..1.0)).collect();
            let lv: Vec<f64> = (0..4).map(|_| r.gen_range(-1.0..1.0)).collect();
            assert!(kl(&mu, &lv) > 1e-12);
        }
        assert!(kl(&[0.0; 4], &[0.0; 4]).abs() <= 1e-12);
    }

    #[test]
    fn reparameterize_examples() {
        let mut tape = Tape::new();
        let mu = tape.input(Tensor2::row_vector(&[2.0, -1.0]));
        let lv = tape.input(Tensor2::row_vector(&[0.3, 0.7]));
        let z = reparameterize(&mut tape, mu, lv, Tensor2::zeros(1, 2)).unwrap();
        assert_eq!(tape.value(z).as_slice(), &[2.0, -1.0]);

        let mut tape = Tape::new();
        let mu = tape.input(Tensor2::row_vector(&[2.0]));
        let lv = tape.input(Tensor2::row_vector(&[0.0]));
        let z = reparameterize(&mut tape, mu, lv, Tensor2::row_vector(&[1.0])).unwrap();
        assert_eq!(tape.value(z).as_slice(), &[3.0]);
    }

    #[test]
    fn reparameterize_gradient_matches_finite_differences() {
        let mut r = rng(8);
        let mut p = ParamSet::new();
        let mu = p.add("mu", Tensor2::uniform(2, 3, 1.0, &mut r));
        let lv = p.add("logvar", Tensor2::uniform(2, 3, 1.0, &mut r));
        let noise = Tensor2::uniform(2, 3, 1.0, &mut r);
        let target = Tensor2::uniform(2, 3, 1.0, &mut r);
        let loss = |p: &ParamSet, grads: Option<&mut ParamSet>| {
            let mut tape = Tape::new();
            let m = tape.param(p, mu);
            let l = tape.param(p, lv);
            let z = reparameterize(&mut tape, m, l, noise.clone()).unwrap();
            let t = tape.input(target.clone());
            let loss = mse_loss(&mut tape, z, t).unwrap();
            if let Some(g) = grads {
                tape.backward(loss, g).unwrap();
            }
            tape.value(loss).item()
        };
        let mut with_grads = p.clone();
        loss(&p, Some(&mut with_grads));
        let err = max_param_grad_error(&with_grads, DEFAULT_STEP, |q| loss(q, None));
        assert!(err <= 1e-4, "relative error {err}");
    }

    #[test]
    fn backward_square() {
        let mut p = ParamSet::new();
        let w = p.add("w", Tensor2::scalar(3.0));
        let mut tape = Tape::new();
        let a = tape.param(&p, w);
        let b = tape.param(&p, w);
        let sq = tape.mul(a, b).unwrap();
        tape.backward(sq, &mut p).unwrap();
        assert_eq!(p.grad(w).item(), 6.0);
    }

    #[test]
    fn backward_on_empty_tape_errors() {
        let mut p = ParamSet::new();
        let tape = Tape::new();
        let mut other = Tape::new();
        let v = other.input(Tensor2::scalar(1.0));
        assert!(matches!(tape.backward(v, &mut p), Err(Error::EmptyTape)));
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut p = ParamSet::new();
        let mut tape = Tape::new();
        let v = tape.input(Tensor2::zeros(2, 2));
        assert!(matches!(tape.backward(v, &mut p), Err(Error::NonScalarLoss((2, 2)))));
    }

    #[test]
    fn repeated_backward_does_not_accumulate() {
        let mut p = ParamSet::new();
        let w = p.add("w", Tensor2::scalar(3.0));
        let mut tape = Tape::new();
        let a = tape.param(&p, w);
        let sq = tape.mul(a, a).unwrap();
        tape.backward(sq, &mut p).unwrap();
        tape.backward(sq, &mut p).unwrap();
        assert_eq!(p.grad(w).item(), 6.0);
    }

    #[test]
    fn dense_tanh_mse_gradients_match_finite_differences() {
        let mut r = rng(21);
        let mut p = ParamSet::new();
        let l1 = Dense::new(&mut p, "l1", 4, 3, Activation::Tanh, &mut r);
        let l2 = Dense::new(&mut p, "l2", 3, 2, Activation::Identity, &mut r);
        for id in p.ids().collect::<Vec<_>>() {
            let (rr, cc) = p.value(id).shape();
            *p.value_mut(id) = Tensor2::uniform(rr, cc, 1.0, &mut r);
        }
        let x = Tensor2::uniform(5, 4, 1.0, &mut r);
        let y = Tensor2::uniform(5, 2, 1.0, &mut r);
        let eval = |p: &ParamSet, grads: Option<&mut ParamSet>| {
            let mut tape = Tape::new();
            let xi = tape.input(x.clone());
            let h = l1.forward(&mut tape, p, xi).unwrap();
            let o = l2.forward(&mut tape, p, h).unwrap();
            let t = tape.input(y.clone());
            let loss = mse_loss(&mut tape, o, t).unwrap();
            if let Some(g) = grads {
                tape.backward(loss, g).unwrap();
            }
            tape.value(loss).item()
        };
        let mut g = p.clone();
        eval(&p, Some(&mut g));
        let err = max_param_grad_error(&g, DEFAULT_STEP, |q| eval(q, None));
        assert!(err <= 1e-4, "relative error {err}");
    }

    #[test]
    fn every_activation_has_correct_derivative() {
        for act in [
            Activation::Identity,
            Activation::Tanh,
            Activation::Relu,
            Activation::Sigmoid,
            Activation::Softplus,
        ] {
            let mut p = ParamSet::new();
            // avoid the relu kink at 0
            let x = p.add("x", Tensor2::row_vector(&[-0.8, -0.3, 0.2, 0.9]));
            let mut tape = Tape::new();
            let xv = tape.param(&p, x);
            let y = tape.activation(xv, act);
            let t = tape.input(Tensor2::row_vector(&[0.1, 0.2, 0.3, 0.4]));
            let loss = tape.mse(y, t).unwrap();
            let mut g = p.clone();
            tape.backward(loss, &mut g).unwrap();
            let err = max_param_grad_error(&g, DEFAULT_STEP, |q| {
                let v = q.value(x);
                let pred: Vec<f64> = v.as_slice().iter().map(|&z| act.apply(z)).collect();
                mse_value(&pred, &[0.1, 0.2, 0.3, 0.4])
            });
            assert!(err <= 1e-6, "{act:?}: {err}");
        }
    }

    /// Scalar Adam with the same constants.
    fn scalar_adam(w: f64, g: f64, m: &mut f64, v: &mut f64, t: i32, lr: f64) -> f64 {
        *m = 0.9 * *m + 0.1 * g;
        *v = 0.999 * *v + 0.001 * g * g;
        let mh = *m / (1.0 - 0.9f64.powi(t));
        let vh = *v / (1.0 - 0.999f64.powi(t));
        w - lr * mh / (vh.sqrt() + 1e-8)
    }

    #[test]
    fn adam_zero_gradient_is_stationary() {
        let mut p = ParamSet::new();
        let w = p.add("w", Tensor2::row_vector(&[1.5, -2.0]));
        let mut opt = Adam::new(&p, 0.1);
        for _ in 0..10 {
            adam_step(&mut p, &mut opt);
        }
        assert_eq!(p.value(w).as_slice(), &[1.5, -2.0]);
        assert_eq!(opt.steps(), 10);
    }

    #[test]
    fn adam_first_step_matches_scalar_oracle() {
        let mut p = ParamSet::new();
        let w = p.add("w", Tensor2::scalar(0.5));
        p.grad_mut(w).set(0, 0, 0.3);
        let mut opt = Adam::new(&p, 0.001);
        adam_step(&mut p, &mut opt);
        let (mut m, mut v) = (0.0, 0.0);
        let want = scalar_adam(0.5, 0.3, &mut m, &mut v, 1, 0.001);
        assert_eq!(p.value(w).item(), want);
        // first bias-corrected step moves by ~lr against the gradient sign
        assert!((0.5 - p.value(w).item() - 0.001).abs() < 1e-7);
        // gradients are untouched
        assert_eq!(p.grad(w).item(), 0.3);
    }

    #[test]
    fn adam_converges_on_quadratic() {
        let mut p = ParamSet::new();
        let w = p.add("w", Tensor2::scalar(0.0));
        let mut opt = Adam::new(&p, 0.1);
        let five = Tensor2::scalar(5.0);
        for _ in 0..200 {
            let mut tape = Tape::new();
            let wv = tape.param(&p, w);
            let t = tape.input(five.clone());
            let d = tape.sub(wv, t).unwrap();
            let l = tape.mul(d, d).unwrap();
            tape.backward(l, &mut p).unwrap();
            opt.step(&mut p);
        }
        assert!((p.value(w).item() - 5.0).abs() < 0.1, "w = {}", p.value(w).item());
    }

    #[test]
    fn forward_is_deterministic() {
        let build = || {
            let mut p = ParamSet::new();
            let cell = LstmCell::new(&mut p, "lstm", 3, 5, &mut rng(42));
            let mut tape = Tape::new();
            let x = tape.input(Tensor2::row_vector(&[0.1, 0.2, 0.3]));
            let h = tape.input(Tensor2::zeros(1, 5));
            let c = tape.input(Tensor2::zeros(1, 5));
            let (h, _) = cell.step(&mut tape, &p, x, h, c).unwrap();
            tape.value(h).clone()
        };
        assert_eq!(build(), build());
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert!(relative_error(1.0, 1.0 + 1e-9) < 1e-9);
    }
}
