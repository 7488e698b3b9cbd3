use rand::Rng;

use super::{Activation, ParamId, ParamSet, Tape, Tensor2, Var};
use crate::error::{Error, Result};

/// Fully connected layer `activation(x·W + b)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Dense {
    pub weight: ParamId,
    pub bias: ParamId,
    pub activation: Activation,
}

impl Dense {
    /// Registers `{name}.weight` (`inputs x outputs`) and `{name}.bias` with
    /// uniform fan-in initialization.
    pub fn new<R: Rng + ?Sized>(
        params: &mut ParamSet,
        name: &str,
        inputs: usize,
        outputs: usize,
        activation: Activation,
        rng: &mut R,
    ) -> Self {
        let bound = 1.0 / (inputs.max(1) as f64).sqrt();
        let weight = params.add(format!("{name}.weight"), Tensor2::uniform(inputs, outputs, bound, rng));
        let bias = params.add(format!("{name}.bias"), Tensor2::zeros(1, outputs));
        Self {
            weight,
            bias,
            activation,
        }
    }

    pub fn from_ids(weight: ParamId, bias: ParamId, activation: Activation) -> Self {
        Self {
            weight,
            bias,
            activation,
        }
    }

    pub fn forward(&self, tape: &mut Tape, params: &ParamSet, input: Var) -> Result<Var> {
        dense_forward(tape, params, self.weight, self.bias, input, self.activation)
    }
}

pub fn dense_forward(
    tape: &mut Tape,
    params: &ParamSet,
    weight: ParamId,
    bias: ParamId,
    input: Var,
    activation: Activation,
) -> Result<Var> {
    let w_shape = params.value(weight).shape();
    let in_shape = tape.value(input).shape();
    if in_shape.1 != w_shape.0 {
        return Err(Error::shape("dense_forward", in_shape, w_shape));
    }
    let w = tape.param(params, weight);
    let b = tape.param(params, bias);
    let z = tape.matmul(input, w)?;
    let z = tape.add_bias(z, b)?;
    Ok(tape.activation(z, activation))
}

/// LSTM cell with gate blocks laid out `[input, forget, candidate, output]`
/// along the columns of its weight matrices.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LstmCell {
    pub w_input: ParamId,
    pub w_hidden: ParamId,
    pub bias: ParamId,
    pub input_size: usize,
    pub hidden_size: usize,
}

/// An [`LstmCell`]'s parameters bound to a tape once per forward pass.
#[derive(Clone, Copy, Debug)]
pub struct BoundLstm {
    w_input: Var,
    w_hidden: Var,
    bias: Var,
    hidden_size: usize,
}

impl LstmCell {
    pub fn new<R: Rng + ?Sized>(
        params: &mut ParamSet,
        name: &str,
        input_size: usize,
        hidden_size: usize,
        rng: &mut R,
    ) -> Self {
        let bound = 1.0 / (hidden_size.max(1) as f64).sqrt();
        let w_input = params.add(
            format!("{name}.w_input"),
            Tensor2::uniform(input_size, 4 * hidden_size, bound, rng),
        );
        let w_hidden = params.add(
            format!("{name}.w_hidden"),
            Tensor2::uniform(hidden_size, 4 * hidden_size, bound, rng),
        );
        let mut b = Tensor2::zeros(1, 4 * hidden_size);
        // forget gate starts open
        for c in hidden_size..2 * hidden_size {
            b.set(0, c, 1.0);
        }
        let bias = params.add(format!("{name}.bias"), b);
        Self {
            w_input,
            w_hidden,
            bias,
            input_size,
            hidden_size,
        }
    }

    pub fn bind(&self, tape: &mut Tape, params: &ParamSet) -> BoundLstm {
        BoundLstm {
            w_input: tape.param(params, self.w_input),
            w_hidden: tape.param(params, self.w_hidden),
            bias: tape.param(params, self.bias),
            hidden_size: self.hidden_size,
        }
    }

    /// One step `(x_t, h_prev, c_prev) -> (h_t, c_t)`.
    pub fn step(&self, tape: &mut Tape, params: &ParamSet, x_t: Var, h_prev: Var, c_prev: Var) -> Result<(Var, Var)> {
        let bound = self.bind(tape, params);
        bound.step(tape, x_t, h_prev, c_prev)
    }
}

impl BoundLstm {
    pub fn step(&self, tape: &mut Tape, x_t: Var, h_prev: Var, c_prev: Var) -> Result<(Var, Var)> {
        let h = self.hidden_size;
        let (hs, cs) = (tape.value(h_prev).shape(), tape.value(c_prev).shape());
        if hs.1 != h || cs != hs {
            return Err(Error::shape("lstm_step", hs, cs));
        }
        let xs = tape.value(x_t).shape();
        if xs.0 != hs.0 || xs.1 != tape.value(self.w_input).rows() {
            return Err(Error::shape("lstm_step", xs, tape.value(self.w_input).shape()));
        }
        let xw = tape.matmul(x_t, self.w_input)?;
        let hw = tape.matmul(h_prev, self.w_hidden)?;
        let z = tape.add(xw, hw)?;
        let z = tape.add_bias(z, self.bias)?;

        let i = tape.slice_cols(z, 0, h)?;
        let f = tape.slice_cols(z, h, 2 * h)?;
        let g = tape.slice_cols(z, 2 * h, 3 * h)?;
        let o = tape.slice_cols(z, 3 * h, 4 * h)?;
        let i = tape.activation(i, Activation::Sigmoid);
        let f = tape.activation(f, Activation::Sigmoid);
        let g = tape.activation(g, Activation::Tanh);
        let o = tape.activation(o, Activation::Sigmoid);

        let keep = tape.mul(f, c_prev)?;
        let write = tape.mul(i, g)?;
        let c = tape.add(keep, write)?;
        let c_act = tape.activation(c, Activation::Tanh);
        let h_next = tape.mul(o, c_act)?;
        Ok((h_next, c))
    }
}

pub fn mse_loss(tape: &mut Tape, pred: Var, target: Var) -> Result<Var> {
    tape.mse(pred, target)
}

pub fn kl_standard_normal(tape: &mut Tape, mu: Var, logvar: Var) -> Result<Var> {
    tape.kl_standard_normal(mu, logvar)
}

/// `z = mu + exp(logvar / 2) ⊙ noise`, with `noise` supplied by the caller.
pub fn reparameterize(tape: &mut Tape, mu: Var, logvar: Var, noise: Tensor2) -> Result<Var> {
    let (ms, ls) = (tape.value(mu).shape(), tape.value(logvar).shape());
    if ms != ls || ms != noise.shape() {
        return Err(Error::shape("reparameterize", ms, noise.shape()));
    }
    let half = tape.scale(logvar, 0.5);
    let std = tape.exp(half);
    let eps = tape.input(noise);
    let spread = tape.mul(std, eps)?;
    tape.add(mu, spread)
}
