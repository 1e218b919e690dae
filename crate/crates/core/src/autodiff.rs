//! Reverse-mode differentiation over `f64` tensors.
//!
//! A [`Tape`] is an append-only list of nodes. Each operation method computes
//! its value eagerly, records the operation with its inputs, and returns a
//! [`Var`] handle. [`Tape::backward`] walks the list once in reverse and can
//! only run once per tape.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::tensor::{self, Tensor};
use crate::wkv::{self, KernelInputs, Mode, WkvState};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    MatMul(Var, Var),
    Sigmoid(Var),
    Reshape(Var),
    TimeShift(Var),
    PadSeq(Var, usize),
    L2Normalize(Var, f64),
    GroupNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        groups: usize,
        eps: f64,
    },
    SumLastKeepdim(Var),
    Sum(Var),
    Mean(Var),
    Square(Var),
    Wkv(Box<WkvNode>),
    /// Final state of the `Wkv` node it points at.
    WkvState(Var),
}

#[derive(Debug, Clone)]
struct WkvNode {
    streams: [Var; 6],
    s0: Option<Var>,
    bonus: Option<Var>,
}

struct Node {
    value: Tensor<f64>,
    op: Op,
    trainable: bool,
    needs_grad: bool,
}

/// Operands of [`Tape::wkv`].
#[derive(Debug, Clone, Copy)]
pub struct WkvArgs {
    pub r: Var,
    pub w: Var,
    pub k: Var,
    pub v: Var,
    pub a_hat: Var,
    pub b_hat: Var,
    pub s0: Option<Var>,
    pub bonus: Option<Var>,
    pub mode: Mode,
    pub training: bool,
    pub chunk: usize,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    spent: bool,
}

/// Gradients of trainable leaves, keyed by their [`Var`].
#[derive(Debug, Default)]
pub struct Gradients {
    grads: HashMap<Var, Tensor<f64>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor<f64>> {
        self.grads.get(&var)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
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

    fn push(&mut self, value: Tensor<f64>, op: Op, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            trainable: false,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Constant input; receives no gradient.
    pub fn constant(&mut self, value: Tensor<f64>) -> Var {
        self.push(value, Op::Leaf, &[])
    }

    /// Trainable leaf; [`Tape::backward`] always returns a gradient for it.
    pub fn param(&mut self, value: Tensor<f64>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            trainable: true,
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, var: Var) -> &Tensor<f64> {
        &self.nodes[var.0].value
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        self.nodes[var.0].value.shape()
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = tensor::add(self.value(a), self.value(b))?;
        Ok(self.push(value, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = tensor::sub(self.value(a), self.value(b))?;
        Ok(self.push(value, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = tensor::mul(self.value(a), self.value(b))?;
        Ok(self.push(value, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let value = tensor::scale(self.value(a), s);
        self.push(value, Op::Scale(a, s), &[a])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = tensor::matmul(self.value(a), self.value(b))?;
        Ok(self.push(value, Op::MatMul(a, b), &[a, b]))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = tensor::sigmoid(self.value(a));
        self.push(value, Op::Sigmoid(a), &[a])
    }

    /// `a + t·(b − a)`
    pub fn lerp(&mut self, a: Var, b: Var, t: Var) -> Result<Var> {
        let diff = self.sub(b, a)?;
        let step = self.mul(t, diff)?;
        self.add(a, step)
    }

    pub fn reshape(&mut self, a: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let value = self.value(a).reshape(shape)?;
        Ok(self.push(value, Op::Reshape(a), &[a]))
    }

    pub fn time_shift(&mut self, a: Var) -> Result<Var> {
        let value = tensor::time_shift(self.value(a))?;
        Ok(self.push(value, Op::TimeShift(a), &[a]))
    }

    pub fn pad_seq(&mut self, a: Var, target_len: usize) -> Result<Var> {
        let len = self.shape(a).get(1).copied().unwrap_or(0);
        let value = tensor::pad_seq(self.value(a), target_len)?;
        Ok(self.push(value, Op::PadSeq(a, len), &[a]))
    }

    pub fn l2_normalize_last(&mut self, a: Var, eps: f64) -> Var {
        let value = tensor::l2_normalize_last(self.value(a), eps);
        self.push(value, Op::L2Normalize(a, eps), &[a])
    }

    pub fn group_norm(
        &mut self,
        x: Var,
        groups: usize,
        eps: f64,
        gamma: Var,
        beta: Var,
    ) -> Result<Var> {
        let value = tensor::group_norm(
            self.value(x),
            groups,
            eps,
            self.value(gamma),
            self.value(beta),
        )?;
        Ok(self.push(
            value,
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                eps,
            },
            &[x, gamma, beta],
        ))
    }

    pub fn sum_last_keepdim(&mut self, a: Var) -> Var {
        let value = tensor::sum_last_keepdim(self.value(a));
        self.push(value, Op::SumLastKeepdim(a), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).sum());
        self.push(value, Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let value = Tensor::scalar(x.sum() / x.numel() as f64);
        self.push(value, Op::Mean(a), &[a])
    }

    pub fn square(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x * x);
        self.push(value, Op::Square(a), &[a])
    }

    fn kernel_inputs(&self, streams: &[Var; 6], s0: Option<Var>) -> KernelInputs<f64> {
        let [r, w, k, v, a_hat, b_hat] = streams.map(|x| self.value(x).clone());
        KernelInputs {
            r,
            w,
            k,
            v,
            a_hat,
            b_hat,
            s0: s0.map(|s| WkvState {
                s: self.value(s).clone(),
            }),
        }
    }

    /// WKV recurrence; returns `(y, final_state)`.
    pub fn wkv(&mut self, args: WkvArgs) -> Result<(Var, Var)> {
        let streams = [args.r, args.w, args.k, args.v, args.a_hat, args.b_hat];
        let inputs = self.kernel_inputs(&streams, args.s0);
        let bonus = args.bonus.map(|p| self.value(p).clone());
        let out = wkv::dispatch(
            &inputs,
            bonus.as_ref(),
            args.mode,
            args.training,
            args.chunk,
        )?;
        let mut deps = streams.to_vec();
        deps.extend(args.s0);
        deps.extend(args.bonus);
        let y = self.push(
            out.y,
            Op::Wkv(Box::new(WkvNode {
                streams,
                s0: args.s0,
                bonus: args.bonus,
            })),
            &deps,
        );
        let state = self.push(out.state.s, Op::WkvState(y), &[y]);
        Ok((y, state))
    }

    /// Reverse accumulation from the scalar `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.spent {
            return Err(Error::Tape(
                "backward already ran on this tape; rebuild it".into(),
            ));
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::Tape(format!(
                "loss must be a scalar, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.spent = true;

        let mut grads: Vec<Option<Tensor<f64>>> = vec![None; self.nodes.len()];
        let mut state_grads: Vec<Option<Tensor<f64>>> = vec![None; self.nodes.len()];
        let mut out = Gradients::default();
        grads[loss.0] = Some(Tensor::ones(self.shape(loss).to_vec()));

        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.needs_grad {
                continue;
            }
            let g = grads[id].take();
            if let Op::Wkv(wkv_node) = &node.op {
                let gs = state_grads[id].take();
                if g.is_some() || gs.is_some() {
                    self.backward_wkv(id, wkv_node, g, gs, &mut grads)?;
                }
                continue;
            }
            let Some(g) = g else { continue };
            self.backward_node(id, g, &mut grads, &mut state_grads, &mut out)?;
        }
        for (id, node) in self.nodes.iter().enumerate() {
            if node.trainable {
                out.grads
                    .entry(Var(id))
                    .or_insert_with(|| Tensor::zeros(node.value.shape().to_vec()));
            }
        }
        Ok(out)
    }

    fn accumulate(
        &self,
        grads: &mut [Option<Tensor<f64>>],
        var: Var,
        g: Tensor<f64>,
    ) -> Result<()> {
        if !self.nodes[var.0].needs_grad {
            return Ok(());
        }
        let slot = &mut grads[var.0];
        *slot = Some(match slot.take() {
            Some(prev) => tensor::add(&prev, &g)?,
            None => g,
        });
        Ok(())
    }

    fn backward_node(
        &self,
        id: usize,
        g: Tensor<f64>,
        grads: &mut [Option<Tensor<f64>>],
        state_grads: &mut [Option<Tensor<f64>>],
        out: &mut Gradients,
    ) -> Result<()> {
        let node = &self.nodes[id];
        match node.op {
            Op::Leaf => {
                if node.trainable {
                    out.grads.insert(Var(id), g);
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, a, tensor::sum_to_shape(&g, self.shape(a))?)?;
                self.accumulate(grads, b, tensor::sum_to_shape(&g, self.shape(b))?)?;
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, a, tensor::sum_to_shape(&g, self.shape(a))?)?;
                let gb = tensor::sum_to_shape(&g, self.shape(b))?;
                self.accumulate(grads, b, tensor::scale(&gb, -1.0))?;
            }
            Op::Mul(a, b) => {
                if self.nodes[a.0].needs_grad {
                    let ga = tensor::mul(&g, self.value(b))?;
                    self.accumulate(grads, a, tensor::sum_to_shape(&ga, self.shape(a))?)?;
                }
                if self.nodes[b.0].needs_grad {
                    let gb = tensor::mul(&g, self.value(a))?;
                    self.accumulate(grads, b, tensor::sum_to_shape(&gb, self.shape(b))?)?;
                }
            }
            Op::Scale(a, s) => self.accumulate(grads, a, tensor::scale(&g, s))?,
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(a), self.value(b));
                if self.nodes[a.0].needs_grad {
                    let ga = tensor::matmul(&g, &tensor::transpose_last2(bv)?)?;
                    self.accumulate(grads, a, tensor::sum_to_shape(&ga, av.shape())?)?;
                }
                if self.nodes[b.0].needs_grad {
                    let b_rank = bv.rank();
                    let gb = if bv.shape()[..b_rank - 2].iter().all(|&d| d == 1) {
                        // weight matrix: fold the batch axes of `a` into rows
                        let k = av.last_dim();
                        let p = g.last_dim();
                        let a2 = av.reshape([av.numel() / k, k])?;
                        let g2 = g.reshape([g.numel() / p, p])?;
                        tensor::matmul(&tensor::transpose_last2(&a2)?, &g2)?
                            .into_reshaped(bv.shape().to_vec())?
                    } else {
                        let gb = tensor::matmul(&tensor::transpose_last2(av)?, &g)?;
                        tensor::sum_to_shape(&gb, bv.shape())?
                    };
                    self.accumulate(grads, b, gb)?;
                }
            }
            Op::Sigmoid(a) => {
                let ga = g.zip_map(&node.value, |g, y| g * y * (1.0 - y))?;
                self.accumulate(grads, a, ga)?;
            }
            Op::Reshape(a) => {
                let ga = g.into_reshaped(self.shape(a).to_vec())?;
                self.accumulate(grads, a, ga)?;
            }
            Op::TimeShift(a) => {
                let [b, t, d] = g.shape()[..] else {
                    unreachable!()
                };
                let mut ga = vec![0.0; g.numel()];
                for bi in 0..b {
                    let base = bi * t * d;
                    ga[base..base + (t - 1) * d].copy_from_slice(&g.data()[base + d..base + t * d]);
                }
                self.accumulate(grads, a, Tensor::new(g.shape().to_vec(), ga)?)?;
            }
            Op::PadSeq(a, len) => self.accumulate(grads, a, tensor::narrow(&g, 1, 0, len)?)?,
            Op::L2Normalize(a, eps) => {
                let x = self.value(a);
                let n = x.last_dim();
                let mut ga = vec![0.0; x.numel()];
                for ((gr, xr), (yr, out)) in g
                    .data()
                    .chunks(n)
                    .zip(x.data().chunks(n))
                    .zip(node.value.data().chunks(n).zip(ga.chunks_mut(n)))
                {
                    let norm = xr.iter().map(|v| v * v).sum::<f64>().sqrt();
                    if norm > eps {
                        let proj: f64 = yr.iter().zip(gr).map(|(y, g)| y * g).sum();
                        for ((o, &gi), &yi) in out.iter_mut().zip(gr).zip(yr) {
                            *o = (gi - yi * proj) / norm;
                        }
                    } else {
                        for (o, &gi) in out.iter_mut().zip(gr) {
                            *o = gi / eps;
                        }
                    }
                }
                self.accumulate(grads, a, Tensor::new(x.shape().to_vec(), ga)?)?;
            }
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                eps,
            } => {
                let xv = self.value(x);
                let gam = self.value(gamma).data();
                let c = xv.last_dim();
                let gs = c / groups;
                let mut gx = vec![0.0; xv.numel()];
                let mut ggamma = vec![0.0; c];
                let mut gbeta = vec![0.0; c];
                let mut xhat = vec![0.0; gs];
                let mut dxhat = vec![0.0; gs];
                for ((xr, gr), out) in xv
                    .data()
                    .chunks(c)
                    .zip(g.data().chunks(c))
                    .zip(gx.chunks_mut(c))
                {
                    for grp in 0..groups {
                        let range = grp * gs..(grp + 1) * gs;
                        let xs = &xr[range.clone()];
                        let mean = xs.iter().sum::<f64>() / gs as f64;
                        let var = xs.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / gs as f64;
                        let inv_std = 1.0 / (var + eps).sqrt();
                        for j in 0..gs {
                            let ch = grp * gs + j;
                            xhat[j] = (xs[j] - mean) * inv_std;
                            dxhat[j] = gr[ch] * gam[ch];
                            ggamma[ch] += gr[ch] * xhat[j];
                            gbeta[ch] += gr[ch];
                        }
                        let m1 = dxhat.iter().sum::<f64>() / gs as f64;
                        let m2 =
                            dxhat.iter().zip(&xhat).map(|(d, h)| d * h).sum::<f64>() / gs as f64;
                        for j in 0..gs {
                            out[grp * gs + j] = inv_std * (dxhat[j] - m1 - xhat[j] * m2);
                        }
                    }
                }
                self.accumulate(grads, x, Tensor::new(xv.shape().to_vec(), gx)?)?;
                self.accumulate(grads, gamma, Tensor::new([c], ggamma)?)?;
                self.accumulate(grads, beta, Tensor::new([c], gbeta)?)?;
            }
            Op::SumLastKeepdim(a) => {
                let n = self.value(a).last_dim();
                let data = g
                    .data()
                    .iter()
                    .flat_map(|&x| std::iter::repeat_n(x, n))
                    .collect();
                self.accumulate(grads, a, Tensor::new(self.shape(a).to_vec(), data)?)?;
            }
            Op::Sum(a) => {
                let ga = Tensor::full(self.shape(a).to_vec(), g.data()[0]);
                self.accumulate(grads, a, ga)?;
            }
            Op::Mean(a) => {
                let n = self.value(a).numel() as f64;
                let ga = Tensor::full(self.shape(a).to_vec(), g.data()[0] / n);
                self.accumulate(grads, a, ga)?;
            }
            Op::Square(a) => {
                let ga = g.zip_map(self.value(a), |g, x| 2.0 * g * x)?;
                self.accumulate(grads, a, ga)?;
            }
            Op::WkvState(src) => {
                let slot = &mut state_grads[src.0];
                *slot = Some(match slot.take() {
                    Some(prev) => tensor::add(&prev, &g)?,
                    None => g,
                });
            }
            Op::Wkv(_) => unreachable!("handled by backward_wkv"),
        }
        Ok(())
    }

    fn backward_wkv(
        &self,
        id: usize,
        node: &WkvNode,
        gy: Option<Tensor<f64>>,
        gs: Option<Tensor<f64>>,
        grads: &mut [Option<Tensor<f64>>],
    ) -> Result<()> {
        let inputs = self.kernel_inputs(&node.streams, node.s0);
        let bonus = node.bonus.map(|p| self.value(p).clone());
        let gy = gy.unwrap_or_else(|| Tensor::zeros(self.nodes[id].value.shape().to_vec()));
        let g = wkv::wkv_backward(&inputs, bonus.as_ref(), &gy, gs.as_ref())?;
        for (var, grad) in node
            .streams
            .iter()
            .zip([g.r, g.w, g.k, g.v, g.a_hat, g.b_hat])
        {
            self.accumulate(grads, *var, grad)?;
        }
        if let Some(s0) = node.s0 {
            self.accumulate(grads, s0, g.s0)?;
        }
        if let (Some(p), Some(gp)) = (node.bonus, g.bonus) {
            self.accumulate(grads, p, gp)?;
        }
        Ok(())
    }
}

/// Worst relative error between the tape gradient of `f` at `x` and central
/// differences with step `h`, measured per coordinate as
/// `|analytic − numeric| / (|analytic| + 1e-8)`.
pub fn finite_diff_check<F>(f: F, x: &Tensor<f64>, h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let errs = finite_diff_check_all(|tape, vars| f(tape, vars[0]), std::slice::from_ref(x), h)?;
    Ok(errs[0])
}

/// [`finite_diff_check`] over several inputs at once; one error per input.
pub fn finite_diff_check_all<F>(f: F, xs: &[Tensor<f64>], h: f64) -> Result<Vec<f64>>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |inputs: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|x| tape.constant(x.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out).data()[0])
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = xs.iter().map(|x| tape.param(x.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;

    let mut perturbed = xs.to_vec();
    let mut errors = Vec::with_capacity(xs.len());
    for (which, var) in vars.iter().enumerate() {
        let analytic = grads.get(*var).expect("every param has a gradient");
        let mut worst: f64 = 0.0;
        for i in 0..xs[which].numel() {
            let orig = xs[which].data()[i];
            perturbed[which].data_mut()[i] = orig + h;
            let plus = eval(&perturbed)?;
            perturbed[which].data_mut()[i] = orig - h;
            let minus = eval(&perturbed)?;
            perturbed[which].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic.data()[i];
            worst = worst.max((a - numeric).abs() / (a.abs() + 1e-8));
        }
        errors.push(worst);
    }
    Ok(errors)
}
