//! Checks reverse-mode gradients of a dense layer and an LSTM Q-network
//! against central finite differences.
//!
//! ```bash
//! cargo run --release --example gradient_check
//! ```

use drsmt::agent::QNet;
use drsmt::diffkernel::gradcheck::{max_param_grad_error, DEFAULT_STEP};
use drsmt::diffkernel::{dense_forward, Activation, Dense, ParamSet, Tape, Tensor2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> drsmt::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);

    let mut params = ParamSet::new();
    let layer = Dense::new(&mut params, "dense", 4, 3, Activation::Tanh, &mut rng);
    let x = Tensor2::uniform(2, 4, 1.0, &mut rng);
    let y = Tensor2::uniform(2, 3, 1.0, &mut rng);
    let loss = |p: &ParamSet, grads: Option<&mut ParamSet>| -> drsmt::Result<f64> {
        let mut tape = Tape::new();
        let xi = tape.input(x.clone());
        let out = dense_forward(&mut tape, p, layer.weight, layer.bias, xi, Activation::Tanh)?;
        let yi = tape.input(y.clone());
        let l = tape.mse(out, yi)?;
        if let Some(g) = grads {
            tape.backward(l, g)?;
        }
        Ok(tape.value(l).item())
    };
    let mut grads = params.clone();
    loss(&params, Some(&mut grads))?;
    let err = max_param_grad_error(&grads, DEFAULT_STEP, |p| loss(p, None).unwrap());
    println!("dense tanh layer: max relative error {err:.2e}");

    // 6 timesteps of 3 features plus the action indicator column.
    let net = QNet::new(6, 4, 8, 2, &mut rng)?;
    let states: Vec<Tensor2> = (0..3).map(|_| Tensor2::uniform(6, 4, 1.0, &mut rng)).collect();
    let refs: Vec<&Tensor2> = states.iter().collect();
    let targets = Tensor2::from_rows(&[&[0.5, -0.5], &[0.2, 1.0], &[-0.3, 0.0]]);
    let (value, grads) = net.loss_and_grads(&refs, &targets)?;
    let err = max_param_grad_error(&grads, DEFAULT_STEP, |p| {
        let mut n = net.clone();
        n.params = p.clone();
        n.loss_and_grads(&refs, &targets).unwrap().0
    });
    println!(
        "2-layer LSTM Q-network ({} parameters): loss {value:.4}, max relative error {err:.2e}",
        net.params.numel()
    );
    Ok(())
}
