//! Reverse-mode automatic differentiation over a recorded tape.
//!
//! Every operation appends a node holding its forward value. `backward`
//! walks the tape in reverse, accumulating gradients into the inputs of
//! each node, then clears the tape. A cleared tape refuses a second
//! backward until a new graph is recorded.

use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::kernels;
use crate::tensor::{Element, Tensor};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    index: usize,
    tape: u64,
    generation: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnMode {
    Train,
    Eval,
}

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Abs(Var),
    Sum(Var),
    Mean(Var),
    Tanh(Var),
    LeakyRelu(Var, T),
    Reshape(Var),
    Concat(Vec<Var>),
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        pad: usize,
    },
    ConvTranspose2d {
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        pad: usize,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        mode: BnMode,
        xhat: Tensor<T>,
        inv_std: Vec<T>,
    },
    ImageGradient(Var, bool),
    BceWithLogits {
        logits: Var,
        targets: Tensor<T>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    requires_grad: bool,
    op: Op<T>,
}

pub struct Tape<T: Element> {
    id: u64,
    generation: u64,
    nodes: Vec<Node<T>>,
    consumed: bool,
}

/// Gradients produced by one backward pass, keyed by the recorded vars.
pub struct Gradients<T> {
    tape: u64,
    generation: u64,
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Element> Gradients<T> {
    pub fn get(&self, var: Var) -> Option<&Tensor<T>> {
        if var.tape != self.tape || var.generation != self.generation {
            return None;
        }
        self.grads.get(var.index).and_then(|g| g.as_ref())
    }
}

/// Result of a batch-norm forward in train mode, for running-stat updates.
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    /// Unbiased variance, as used for running estimates.
    pub var_unbiased: Vec<T>,
}

impl<T: Element> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Tape {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            generation: 0,
            nodes: Vec::new(),
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn check(&self, v: Var) -> Result<&Node<T>> {
        if v.tape != self.id || v.generation != self.generation {
            return Err(Error::NotOnTape);
        }
        self.nodes.get(v.index).ok_or(Error::NotOnTape)
    }

    pub fn value(&self, v: Var) -> Result<&Tensor<T>> {
        Ok(&self.check(v)?.value)
    }

    pub fn requires_grad(&self, v: Var) -> Result<bool> {
        Ok(self.check(v)?.requires_grad)
    }

    fn push(&mut self, value: Tensor<T>, requires_grad: bool, op: Op<T>) -> Var {
        self.consumed = false;
        self.nodes.push(Node { value, requires_grad, op });
        Var {
            index: self.nodes.len() - 1,
            tape: self.id,
            generation: self.generation,
        }
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|&v| self.nodes[v.index].requires_grad)
    }

    /// Records a leaf. Trainable leaves receive gradients.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, requires_grad, Op::Leaf)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    /// Copy of `v` cut off from the graph.
    pub fn detach(&mut self, v: Var) -> Result<Var> {
        let value = self.value(v)?.clone();
        Ok(self.constant(value))
    }

    fn binary(&mut self, a: Var, b: Var, op: &'static str, f: impl Fn(T, T) -> T, mk: fn(Var, Var) -> Op<T>) -> Result<Var> {
        let va = &self.check(a)?.value;
        let vb = &self.check(b)?.value;
        let out = va.zip_map(vb, op, f)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, rg, mk(a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul)
    }

    pub fn scale(&mut self, a: Var, s: T) -> Result<Var> {
        let out = self.check(a)?.value.map(|x| x * s);
        let rg = self.any_grad(&[a]);
        Ok(self.push(out, rg, Op::Scale(a, s)))
    }

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        let out = self.check(a)?.value.map(|x| x.abs());
        let rg = self.any_grad(&[a]);
        Ok(self.push(out, rg, Op::Abs(a)))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let out = Tensor::scalar(self.check(a)?.value.sum());
        let rg = self.any_grad(&[a]);
        Ok(self.push(out, rg, Op::Sum(a)))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let out = Tensor::scalar(self.check(a)?.value.mean());
        let rg = self.any_grad(&[a]);
        Ok(self.push(out, rg, Op::Mean(a)))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let out = self.check(a)?.value.map(|x| x.tanh());
        let rg = self.any_grad(&[a]);
        Ok(self.push(out, rg, Op::Tanh(a)))
    }

    pub fn leaky_relu(&mut self, a: Var, alpha: T) -> Result<Var> {
        if !(alpha >= T::zero() && alpha < T::one()) {
            return Err(Error::invalid("leaky_relu", format!("alpha {alpha} outside [0, 1)")));
        }
        let out = self.check(a)?.value.map(|x| if x > T::zero() { x } else { alpha * x });
        let rg = self.any_grad(&[a]);
        Ok(self.push(out, rg, Op::LeakyRelu(a, alpha)))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.check(a)?.value.reshape(shape)?;
        let rg = self.any_grad(&[a]);
        Ok(self.push(out, rg, Op::Reshape(a)))
    }

    /// Concatenation along axis 1 (channels for images, features for vectors).
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let values = parts.iter().map(|&v| self.check(v).map(|n| &n.value)).collect::<Result<Vec<_>>>()?;
        let out = kernels::concat_axis1(&values)?;
        let rg = self.any_grad(parts);
        Ok(self.push(out, rg, Op::Concat(parts.to_vec())))
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let out = kernels::linear(&self.check(x)?.value, &self.check(w)?.value, &self.check(b)?.value)?;
        let rg = self.any_grad(&[x, w, b]);
        Ok(self.push(out, rg, Op::Linear { x, w, b }))
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let out = kernels::conv2d(&self.check(x)?.value, &self.check(w)?.value, &self.check(b)?.value, stride, pad)?;
        let rg = self.any_grad(&[x, w, b]);
        Ok(self.push(out, rg, Op::Conv2d { x, w, b, stride, pad }))
    }

    pub fn conv_transpose2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let out = kernels::conv_transpose2d(&self.check(x)?.value, &self.check(w)?.value, &self.check(b)?.value, stride, pad)?;
        let rg = self.any_grad(&[x, w, b]);
        Ok(self.push(out, rg, Op::ConvTranspose2d { x, w, b, stride, pad }))
    }

    /// Batch normalization over `[N, C, ...]`. In train mode the batch
    /// statistics are used and returned; in eval mode the supplied running
    /// statistics are used.
    #[allow(clippy::too_many_arguments)]
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[T],
        running_var: &[T],
        mode: BnMode,
        eps: T,
    ) -> Result<(Var, Option<BatchStats<T>>)> {
        let xv = &self.check(x)?.value;
        let g = &self.check(gamma)?.value;
        let bt = &self.check(beta)?.value;
        if xv.ndim() < 2 {
            return Err(Error::invalid("batchnorm2d", format!("expected [N, C, ...], got {:?}", xv.shape())));
        }
        let c = xv.shape()[1];
        g.expect_shape("batchnorm2d", &[c])?;
        bt.expect_shape("batchnorm2d", &[c])?;
        let (mean, inv_std, stats) = match mode {
            BnMode::Train => {
                let st = kernels::channel_stats(xv)?;
                if st.count < 2 {
                    return Err(Error::DegenerateVariance(st.count));
                }
                let inv_std: Vec<T> = st.var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
                let corr = T::from_f64(st.count as f64 / (st.count - 1) as f64);
                let var_unbiased = st.var.iter().map(|&v| v * corr).collect();
                let mean = st.mean.clone();
                (st.mean, inv_std, Some(BatchStats { mean, var_unbiased }))
            }
            BnMode::Eval => {
                if running_mean.len() != c || running_var.len() != c {
                    return Err(Error::shape("batchnorm2d", &[c], &[running_mean.len()]));
                }
                let inv_std = running_var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
                (running_mean.to_vec(), inv_std, None)
            }
        };
        let (y, xhat) = kernels::batchnorm_apply(xv, &mean, &inv_std, g.data(), bt.data());
        let rg = self.any_grad(&[x, gamma, beta]);
        let var = self.push(
            y,
            rg,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mode,
                xhat,
                inv_std,
            },
        );
        Ok((var, stats))
    }

    /// Forward differences `(d/dx, d/dy)`, trailing edge zero.
    pub fn image_gradient(&mut self, x: Var) -> Result<(Var, Var)> {
        let gx = kernels::image_gradient(&self.check(x)?.value, true)?;
        let gy = kernels::image_gradient(&self.check(x)?.value, false)?;
        let rg = self.any_grad(&[x]);
        let a = self.push(gx, rg, Op::ImageGradient(x, true));
        let b = self.push(gy, rg, Op::ImageGradient(x, false));
        Ok((a, b))
    }

    /// Mean of `max(z,0) − z·t + log(1 + exp(−|z|))`.
    pub fn bce_with_logits(&mut self, logits: Var, targets: Tensor<T>) -> Result<Var> {
        let z = &self.check(logits)?.value;
        targets.expect_shape("bce_with_logits", z.shape())?;
        if let Some(t) = targets.data().iter().find(|&&t| !(t >= T::zero() && t <= T::one())) {
            return Err(Error::invalid("bce_with_logits", format!("target {t} outside [0, 1]")));
        }
        let total: T = z
            .data()
            .iter()
            .zip(targets.data())
            .map(|(&z, &t)| z.max(T::zero()) - z * t + (-z.abs()).exp().ln_1p())
            .sum();
        let out = Tensor::scalar(total / T::from_f64(z.len() as f64));
        let rg = self.any_grad(&[logits]);
        Ok(self.push(out, rg, Op::BceWithLogits { logits, targets }))
    }

    /// Mean absolute difference.
    pub fn l1_loss(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.sub(a, b)?;
        let d = self.abs(d)?;
        self.mean(d)
    }

    /// Runs reverse accumulation from a scalar `loss` and clears the tape.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        let shape = self.check(loss)?.value.shape().to_vec();
        if shape.iter().product::<usize>() != 1 {
            return Err(Error::NonScalarLoss(shape));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.index] = Some(Tensor::ones(&shape));

        for i in (0..=loss.index).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            for (input, dx) in self.local_grads(node, &g)? {
                if !self.nodes[input.index].requires_grad {
                    continue;
                }
                match &mut grads[input.index] {
                    Some(acc) => acc.add_assign(&dx),
                    slot @ None => *slot = Some(dx),
                }
            }
            // Leaves keep their gradient for the caller.
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(g);
            }
        }

        let out = Gradients {
            tape: self.id,
            generation: self.generation,
            grads,
        };
        self.nodes.clear();
        self.generation += 1;
        self.consumed = true;
        Ok(out)
    }

    fn val(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.index].value
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.index].requires_grad
    }

    fn local_grads(&self, node: &Node<T>, g: &Tensor<T>) -> Result<Vec<(Var, Tensor<T>)>> {
        let out = match &node.op {
            Op::Leaf => vec![],
            Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
            Op::Sub(a, b) => vec![(*a, g.clone()), (*b, g.map(|v| -v))],
            Op::Mul(a, b) => vec![
                (*a, g.zip_map(self.val(*b), "mul", |u, v| u * v)?),
                (*b, g.zip_map(self.val(*a), "mul", |u, v| u * v)?),
            ],
            Op::Scale(a, s) => {
                let s = *s;
                vec![(*a, g.map(|v| v * s))]
            }
            Op::Abs(a) => vec![(*a, g.zip_map(self.val(*a), "abs", |u, x| u * signum(x))?)],
            Op::Sum(a) => vec![(*a, Tensor::full(self.val(*a).shape(), g.item()))],
            Op::Mean(a) => {
                let n = T::from_f64(self.val(*a).len() as f64);
                vec![(*a, Tensor::full(self.val(*a).shape(), g.item() / n))]
            }
            Op::Tanh(a) => vec![(*a, g.zip_map(&node.value, "tanh", |u, y| u * (T::one() - y * y))?)],
            Op::LeakyRelu(a, alpha) => {
                let alpha = *alpha;
                vec![(
                    *a,
                    g.zip_map(self.val(*a), "leaky_relu", |u, x| if x > T::zero() { u } else { alpha * u })?,
                )]
            }
            Op::Reshape(a) => vec![(*a, g.reshape(self.val(*a).shape())?)],
            Op::Concat(parts) => {
                let widths: Vec<usize> = parts.iter().map(|&p| self.val(p).shape()[1]).collect();
                parts.iter().copied().zip(kernels::split_axis1(g, &widths)?).collect()
            }
            Op::Linear { x, w, b } => {
                let need = [self.wants(*x), self.wants(*w), self.wants(*b)];
                let gr = kernels::linear_backward(self.val(*x), self.val(*w), g, need)?;
                collect_three((*x, *w, *b), gr)
            }
            Op::Conv2d { x, w, b, stride, pad } => {
                let need = [self.wants(*x), self.wants(*w), self.wants(*b)];
                let gr = kernels::conv2d_backward(self.val(*x), self.val(*w), g, *stride, *pad, need)?;
                collect_three((*x, *w, *b), gr)
            }
            Op::ConvTranspose2d { x, w, b, stride, pad } => {
                let need = [self.wants(*x), self.wants(*w), self.wants(*b)];
                let gr = kernels::conv_transpose2d_backward(self.val(*x), self.val(*w), g, *stride, *pad, need)?;
                collect_three((*x, *w, *b), gr)
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mode,
                xhat,
                inv_std,
            } => {
                let gamma_v = self.val(*gamma).data();
                let c = gamma_v.len();
                let (dx, dgamma, dbeta) = match mode {
                    BnMode::Train => kernels::batchnorm_train_backward(g, xhat, gamma_v, inv_std),
                    BnMode::Eval => {
                        let n = g.shape()[0];
                        let s: usize = g.shape()[2..].iter().product();
                        let mut dx = g.clone();
                        let mut dgamma = vec![T::zero(); c];
                        let mut dbeta = vec![T::zero(); c];
                        for ni in 0..n {
                            for ci in 0..c {
                                let off = (ni * c + ci) * s;
                                for i in off..off + s {
                                    dbeta[ci] += g.data()[i];
                                    dgamma[ci] += g.data()[i] * xhat.data()[i];
                                    dx.data_mut()[i] = g.data()[i] * gamma_v[ci] * inv_std[ci];
                                }
                            }
                        }
                        (dx, dgamma, dbeta)
                    }
                };
                vec![(*x, dx), (*gamma, Tensor::new(&[c], dgamma)?), (*beta, Tensor::new(&[c], dbeta)?)]
            }
            Op::ImageGradient(a, axis_w) => vec![(*a, kernels::image_gradient_backward(g, *axis_w)?)],
            Op::BceWithLogits { logits, targets } => {
                let z = self.val(*logits);
                let scale = g.item() / T::from_f64(z.len() as f64);
                let dz = z.zip_map(targets, "bce_with_logits", |z, t| (sigmoid(z) - t) * scale)?;
                vec![(*logits, dz)]
            }
        };
        Ok(out)
    }
}

fn signum<T: Element>(x: T) -> T {
    if x > T::zero() {
        T::one()
    } else if x < T::zero() {
        -T::one()
    } else {
        T::zero()
    }
}

pub(crate) fn sigmoid<T: Element>(z: T) -> T {
    if z >= T::zero() {
        T::one() / (T::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (T::one() + e)
    }
}

fn collect_three<T>((x, w, b): (Var, Var, Var), g: kernels::ConvGrads<T>) -> Vec<(Var, Tensor<T>)> {
    [(x, g.input), (w, g.kernel), (b, g.bias)]
        .into_iter()
        .filter_map(|(v, t)| t.map(|t| (v, t)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gradient_is_ones() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(Tensor::new(&[3], vec![1.0, -2.0, 3.0]).unwrap());
        let s = tape.sum(x).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn half_square_gradient_is_identity() {
        let mut tape = Tape::<f64>::new();
        let xv = Tensor::new(&[4], vec![0.5, -1.5, 2.0, 0.0]).unwrap();
        let x = tape.param(xv.clone());
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum(sq).unwrap();
        let loss = tape.scale(s, 0.5).unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(x).unwrap(), &xv);
    }

    #[test]
    fn second_backward_is_rejected() {
        let mut tape = Tape::<f32>::new();
        let x = tape.param(Tensor::ones(&[2]));
        let s = tape.sum(x).unwrap();
        tape.backward(s).unwrap();
        assert!(matches!(tape.backward(s), Err(Error::TapeConsumed)));
        // re-recording re-arms the tape, but the stale var is not on it
        let y = tape.param(Tensor::ones(&[2]));
        let _ = tape.sum(y).unwrap();
        assert!(matches!(tape.backward(s), Err(Error::NotOnTape)));
    }

    #[test]
    fn foreign_var_is_rejected() {
        let mut a = Tape::<f32>::new();
        let mut b = Tape::<f32>::new();
        let x = a.param(Tensor::ones(&[1]));
        let _ = b.param(Tensor::ones(&[1]));
        assert!(matches!(b.backward(x), Err(Error::NotOnTape)));
        assert!(b.sum(x).is_err());
    }

    #[test]
    fn backward_needs_scalar() {
        let mut tape = Tape::<f32>::new();
        let x = tape.param(Tensor::ones(&[2]));
        assert!(matches!(tape.backward(x), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(Tensor::ones(&[2]));
        let c = tape.constant(Tensor::ones(&[2]));
        let d = tape.detach(x).unwrap();
        let s = tape.mul(x, c).unwrap();
        let s = tape.mul(s, d).unwrap();
        let s = tape.sum(s).unwrap();
        let g = tape.backward(s).unwrap();
        assert!(g.get(x).is_some());
        assert!(g.get(c).is_none());
        assert!(g.get(d).is_none());
    }

    #[test]
    fn leaky_relu_definition() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::new(&[3], vec![-1.0, 0.0, 2.0]).unwrap());
        let y = tape.leaky_relu(x, 0.2).unwrap();
        assert_eq!(tape.value(y).unwrap().data(), &[-0.2, 0.0, 2.0]);
        let r = tape.leaky_relu(x, 0.0).unwrap();
        assert_eq!(tape.value(r).unwrap().data(), &[0.0, 0.0, 2.0]);
        assert!(tape.leaky_relu(x, 1.0).is_err());
    }

    #[test]
    fn l1_loss_values() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::new(&[2], vec![1.0, 1.0]).unwrap());
        let b = tape.constant(Tensor::new(&[2], vec![0.0, 2.0]).unwrap());
        let l = tape.l1_loss(a, b).unwrap();
        assert_eq!(tape.value(l).unwrap().item(), 1.0);
        let z = tape.l1_loss(a, a).unwrap();
        assert_eq!(tape.value(z).unwrap().item(), 0.0);
        let c = tape.constant(Tensor::zeros(&[3]));
        assert!(tape.l1_loss(a, c).is_err());
    }

    #[test]
    fn bce_with_logits_values() {
        let mut tape = Tape::<f64>::new();
        let z = tape.constant(Tensor::scalar(0.0));
        let l = tape.bce_with_logits(z, Tensor::scalar(0.5)).unwrap();
        assert!((tape.value(l).unwrap().item() - std::f64::consts::LN_2).abs() < 1e-12);
        let big = tape.constant(Tensor::scalar(40.0));
        let l = tape.bce_with_logits(big, Tensor::scalar(1.0)).unwrap();
        let v = tape.value(l).unwrap().item();
        assert!(v.is_finite() && v < 1e-15);
        let huge = tape.constant(Tensor::scalar(-1e4));
        let l = tape.bce_with_logits(huge, Tensor::scalar(1.0)).unwrap();
        assert!((tape.value(l).unwrap().item() - 1e4).abs() < 1e-9);
        assert!(tape.bce_with_logits(z, Tensor::scalar(1.5)).is_err());
    }

    #[test]
    fn batchnorm_train_normalizes() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let mut tape = Tape::<f64>::new();
        let xv = Tensor::<f64>::randn(&[4, 3, 5, 5], 3.0, &mut rng).map(|v| v + 2.0);
        let x = tape.constant(xv);
        let gamma = tape.constant(Tensor::ones(&[3]));
        let beta = tape.constant(Tensor::zeros(&[3]));
        let (y, stats) = tape.batch_norm(x, gamma, beta, &[], &[], BnMode::Train, 1e-12).unwrap();
        assert!(stats.is_some());
        let st = kernels::channel_stats(tape.value(y).unwrap()).unwrap();
        for c in 0..3 {
            assert!(st.mean[c].abs() < 1e-5);
            assert!((st.var[c] - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn batchnorm_constant_and_zero_gamma() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::full(&[2, 2, 3, 3], 4.0));
        let gamma = tape.constant(Tensor::ones(&[2]));
        let beta = tape.constant(Tensor::zeros(&[2]));
        let (y, _) = tape.batch_norm(x, gamma, beta, &[], &[], BnMode::Train, 1e-5).unwrap();
        assert!(tape.value(y).unwrap().data().iter().all(|&v| v == 0.0));

        let xr = tape.constant(Tensor::from_fn(&[2, 2, 3, 3], |i| (i as f32).sin()));
        let zero = tape.constant(Tensor::zeros(&[2]));
        let beta = tape.constant(Tensor::new(&[2], vec![0.25, -0.5]).unwrap());
        let (y, _) = tape.batch_norm(xr, zero, beta, &[], &[], BnMode::Train, 1e-5).unwrap();
        for (i, &v) in tape.value(y).unwrap().data().iter().enumerate() {
            assert_eq!(v, if (i / 9) % 2 == 0 { 0.25 } else { -0.5 });
        }
    }

    #[test]
    fn batchnorm_single_element_is_degenerate() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::ones(&[1, 2, 1, 1]));
        let gamma = tape.constant(Tensor::ones(&[2]));
        let beta = tape.constant(Tensor::zeros(&[2]));
        let err = tape.batch_norm(x, gamma, beta, &[], &[], BnMode::Train, 1e-5);
        assert!(matches!(err, Err(Error::DegenerateVariance(1))));
        // eval mode is fine with a single element
        assert!(tape
            .batch_norm(x, gamma, beta, &[0.0, 0.0], &[1.0, 1.0], BnMode::Eval, 1e-5)
            .is_ok());
    }
}
