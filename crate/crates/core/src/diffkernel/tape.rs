//! Reverse-mode tape over [`Tensor2`] values.
//!
//! Every primitive appends one node holding its output value and the
//! handles of its inputs. [`Tape::backward`] walks the nodes in exact
//! reverse order, so any node's gradient is complete before it is
//! propagated to its inputs.

use super::{ParamId, ParamSet, Tensor2};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Identity,
    Tanh,
    Relu,
    Sigmoid,
    Softplus,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Identity => x,
            Activation::Tanh => x.tanh(),
            Activation::Relu => x.max(0.0),
            Activation::Sigmoid => sigmoid(x),
            Activation::Softplus => x.max(0.0) + (-x.abs()).exp().ln_1p(),
        }
    }

    /// Derivative expressed through the activation's output `y`.
    fn derivative_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Tanh => 1.0 - y * y,
            Activation::Relu => {
                if y > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Sigmoid => y * (1.0 - y),
            // softplus'(x) = sigmoid(x) = 1 - exp(-y)
            Activation::Softplus => -(-y).exp_m1(),
        }
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Clone, Debug)]
enum Op {
    Input,
    Param(ParamId),
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Exp(Var),
    Act(Var, Activation),
    SliceCols(Var, usize),
    Mse(Var, Var),
    KlStdNormal(Var, Var),
}

#[derive(Clone, Debug)]
struct Node {
    value: Tensor2,
    op: Op,
    /// Whether any parameter feeds into this node.
    needs_grad: bool,
}

/// Ordered record of the forward pass.
#[derive(Clone, Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn reset(&mut self) {
        self.nodes.clear();
    }

    pub fn value(&self, v: Var) -> &Tensor2 {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor2, op: Op) -> Var {
        let needs = |v: &Var| self.nodes[v.0].needs_grad;
        let needs_grad = match &op {
            Op::Input => false,
            Op::Param(_) => true,
            Op::MatMul(a, b) | Op::AddBias(a, b) | Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => {
                needs(a) || needs(b)
            }
            Op::Mse(a, b) | Op::KlStdNormal(a, b) => needs(a) || needs(b),
            Op::Scale(a, _) | Op::Exp(a) | Op::Act(a, _) | Op::SliceCols(a, _) => needs(a),
        };
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    /// Constant input; receives no gradient outside the tape.
    pub fn input(&mut self, value: Tensor2) -> Var {
        self.push(value, Op::Input)
    }

    /// Binds a parameter tensor; its gradient lands in the set's buffer on backward.
    pub fn param(&mut self, params: &ParamSet, id: ParamId) -> Var {
        self.push(params.value(id).clone(), Op::Param(id))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        Ok(self.push(value, Op::MatMul(a, b)))
    }

    /// `a + bias` with a `1 x cols` bias broadcast over rows.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(bias));
        if bv.rows() != 1 || bv.cols() != av.cols() {
            return Err(Error::shape("add_bias", av.shape(), bv.shape()));
        }
        let mut value = av.clone();
        for r in 0..value.rows() {
            for (o, b) in value.row_mut(r).iter_mut().zip(bv.as_slice()) {
                *o += b;
            }
        }
        Ok(self.push(value, Op::AddBias(a, bias)))
    }

    fn zip_with(&mut self, op_name: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor2> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(Error::shape(op_name, av.shape(), bv.shape()));
        }
        let data = av
            .as_slice()
            .iter()
            .zip(bv.as_slice())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor2::from_vec(av.rows(), av.cols(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_with("add", a, b, |x, y| x + y)?;
        Ok(self.push(value, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_with("sub", a, b, |x, y| x - y)?;
        Ok(self.push(value, Op::Sub(a, b)))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_with("mul", a, b, |x, y| x * y)?;
        Ok(self.push(value, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let value = self.value(a).map(|x| x * k);
        self.push(value, Op::Scale(a, k))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::exp);
        self.push(value, Op::Exp(a))
    }

    pub fn activation(&mut self, a: Var, act: Activation) -> Var {
        if act == Activation::Identity {
            return a;
        }
        let value = self.value(a).map(|x| act.apply(x));
        self.push(value, Op::Act(a, act))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let av = self.value(a);
        if start > end || end > av.cols() {
            return Err(Error::shape("slice_cols", av.shape(), (start, end)));
        }
        let value = av.slice_cols(start, end);
        Ok(self.push(value, Op::SliceCols(a, start)))
    }

    /// Mean over all elements of `(pred - target)²`, as a 1x1 node.
    pub fn mse(&mut self, pred: Var, target: Var) -> Result<Var> {
        let (p, t) = (self.value(pred), self.value(target));
        if p.shape() != t.shape() {
            return Err(Error::shape("mse_loss", p.shape(), t.shape()));
        }
        let value = mse_value(p.as_slice(), t.as_slice());
        Ok(self.push(Tensor2::scalar(value), Op::Mse(pred, target)))
    }

    /// KL(N(mu, exp(logvar)) ‖ N(0, I)) summed over columns, averaged over rows.
    pub fn kl_standard_normal(&mut self, mu: Var, logvar: Var) -> Result<Var> {
        let (m, lv) = (self.value(mu), self.value(logvar));
        if m.shape() != lv.shape() {
            return Err(Error::shape("kl_standard_normal", m.shape(), lv.shape()));
        }
        let total: f64 = m
            .as_slice()
            .iter()
            .zip(lv.as_slice())
            .map(|(&mu, &lv)| -0.5 * (1.0 + lv - mu * mu - lv.exp()))
            .sum();
        let value = total / m.rows().max(1) as f64;
        Ok(self.push(Tensor2::scalar(value), Op::KlStdNormal(mu, logvar)))
    }

    /// Computes ∂loss/∂param for every parameter reachable from `loss`.
    ///
    /// The gradient buffers in `params` are zeroed first and then written, so
    /// repeated calls never accumulate across passes. A parameter bound more
    /// than once on the tape receives the sum of its contributions.
    pub fn backward(&self, loss: Var, params: &mut ParamSet) -> Result<()> {
        if self.nodes.is_empty() {
            return Err(Error::EmptyTape);
        }
        let loss_shape = self.value(loss).shape();
        if loss_shape != (1, 1) {
            return Err(Error::NonScalarLoss(loss_shape));
        }
        params.zero_grads();

        let mut grads: Vec<Option<Tensor2>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor2::scalar(1.0));

        let need = |v: Var| self.nodes[v.0].needs_grad;
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            match node.op {
                Op::Input => {}
                Op::Param(id) => params.grad_mut(id).add_assign(&g),
                Op::MatMul(a, b) => {
                    if need(a) {
                        accumulate(&mut grads, a, g.matmul_t(self.value(b))?);
                    }
                    if need(b) {
                        accumulate(&mut grads, b, self.value(a).t_matmul(&g)?);
                    }
                }
                Op::AddBias(a, bias) => {
                    if need(bias) {
                        let mut gb = Tensor2::zeros(1, g.cols());
                        for r in 0..g.rows() {
                            for (o, v) in gb.as_mut_slice().iter_mut().zip(g.row(r)) {
                                *o += v;
                            }
                        }
                        accumulate(&mut grads, bias, gb);
                    }
                    if need(a) {
                        accumulate(&mut grads, a, g);
                    }
                }
                Op::Add(a, b) => {
                    if need(b) {
                        accumulate(&mut grads, b, g.clone());
                    }
                    if need(a) {
                        accumulate(&mut grads, a, g);
                    }
                }
                Op::Sub(a, b) => {
                    if need(b) {
                        accumulate(&mut grads, b, g.map(|x| -x));
                    }
                    if need(a) {
                        accumulate(&mut grads, a, g);
                    }
                }
                Op::Mul(a, b) => {
                    if need(a) {
                        accumulate(&mut grads, a, elementwise(&g, self.value(b), |x, y| x * y));
                    }
                    if need(b) {
                        accumulate(&mut grads, b, elementwise(&g, self.value(a), |x, y| x * y));
                    }
                }
                Op::Scale(a, k) => accumulate(&mut grads, a, g.map(|x| x * k)),
                Op::Exp(a) => {
                    let ga = elementwise(&g, &node.value, |x, y| x * y);
                    accumulate(&mut grads, a, ga);
                }
                Op::Act(a, act) => {
                    let ga = elementwise(&g, &node.value, |x, y| x * act.derivative_from_output(y));
                    accumulate(&mut grads, a, ga);
                }
                Op::SliceCols(a, start) => {
                    let src = self.value(a);
                    let mut ga = Tensor2::zeros(src.rows(), src.cols());
                    for r in 0..g.rows() {
                        ga.row_mut(r)[start..start + g.cols()].copy_from_slice(g.row(r));
                    }
                    accumulate(&mut grads, a, ga);
                }
                Op::Mse(pred, target) => {
                    let scale = 2.0 * g.item() / self.value(pred).len() as f64;
                    let gp = elementwise(self.value(pred), self.value(target), |p, t| scale * (p - t));
                    if need(target) {
                        accumulate(&mut grads, target, gp.map(|x| -x));
                    }
                    if need(pred) {
                        accumulate(&mut grads, pred, gp);
                    }
                }
                Op::KlStdNormal(mu, logvar) => {
                    let scale = g.item() / self.value(mu).rows().max(1) as f64;
                    if need(mu) {
                        accumulate(&mut grads, mu, self.value(mu).map(|m| scale * m));
                    }
                    if need(logvar) {
                        accumulate(
                            &mut grads,
                            logvar,
                            self.value(logvar).map(|lv| -0.5 * scale * (1.0 - lv.exp())),
                        );
                    }
                }
            }
        }
        Ok(())
    }
}

fn accumulate(grads: &mut [Option<Tensor2>], v: Var, g: Tensor2) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn elementwise(a: &Tensor2, b: &Tensor2, f: impl Fn(f64, f64) -> f64) -> Tensor2 {
    let data = a.as_slice().iter().zip(b.as_slice()).map(|(&x, &y)| f(x, y)).collect();
    Tensor2::from_vec(a.rows(), a.cols(), data).expect("shapes checked on forward")
}

pub(crate) fn mse_value(pred: &[f64], target: &[f64]) -> f64 {
    let n = pred.len().max(1) as f64;
    pred.iter().zip(target).map(|(p, t)| (p - t) * (p - t)).sum::<f64>() / n
}
