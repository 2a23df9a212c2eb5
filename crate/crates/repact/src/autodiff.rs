//! Minimal reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Tape`] records operations eagerly (define-by-run): every method that
//! builds a node computes its forward value immediately and appends a record
//! with the backward rule's saved state. [`Tape::backward`] walks the records
//! in reverse, so each node's gradient is fully accumulated before its own
//! rule fires. A tape is a single-use, single-context object; distinct tapes
//! are independent.
//!
//! Gradient accumulation and every reduction are fixed-order serial sums:
//! identical seeds and inputs give bit-identical values and gradients on the
//! same build.

use crate::error::{Error, Result};
use crate::kernels::{self, Bn2dStats, ConvSpec};
use crate::layers::{
    self, BnChain, BranchKind, Mode, RepActParams, RepActVariant,
};
use crate::piecewise::{PiecewisePoly, PwEval};
use crate::scalar::Element;
use crate::tensor::Tensor;

/// Handle to a node on a tape. Only valid for the tape that produced it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

struct Node<T> {
    value: Tensor<T>,
    grad: Option<Tensor<T>>,
    requires_grad: bool,
    op: Op<T>,
}

/// Per-channel batch-norm buffers owned by the model and updated by the tape
/// in train mode.
#[derive(Debug, Clone, PartialEq)]
pub struct BnRunning<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

impl<T: Element> BnRunning<T> {
    pub fn identity(channels: usize) -> Self {
        BnRunning {
            mean: vec![T::zero(); channels],
            var: vec![T::one(); channels],
        }
    }
}

/// Var handles for the trainable scalars of one adaptive activation layer.
#[derive(Debug, Clone, Copy)]
pub struct RepActVars {
    /// Shape `[K]`: one weight per branch.
    pub alphas: Var,
    /// Shape `[1]`.
    pub slope: Var,
    /// `(γ, β)`, each shape `[1]`; present exactly for variant III.
    pub bn: Option<(Var, Var)>,
}

enum Op<T> {
    Leaf,
    Add {
        a: Var,
        b: Var,
    },
    Sum {
        x: Var,
    },
    Flatten {
        x: Var,
    },
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    Conv2d {
        x: Var,
        k: Var,
        b: Var,
        spec: ConvSpec,
    },
    BatchNorm2d {
        x: Var,
        gamma: Var,
        beta: Var,
        stats: Bn2dStats<T>,
        through_batch_stats: bool,
        eps: T,
    },
    GlobalAvgPool {
        x: Var,
    },
    SoftmaxCrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        smoothing: f64,
        probs: Tensor<T>,
    },
    PwActivation {
        x: Var,
        eval: PwEval<T>,
    },
    RepAct {
        x: Var,
        vars: RepActVars,
        variant: RepActVariant,
        branches: Vec<BranchKind>,
        bn_saved: Option<BnChain<T>>,
    },
    MapUnary {
        x: Var,
        df: Box<dyn Fn(T) -> T + Send + Sync>,
    },
}

pub struct Tape<T: Element> {
    nodes: Vec<Node<T>>,
    act_sig: u64,
}

impl<T: Element> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            act_sig: 0xcbf2_9ce4_8422_2325, // FNV-1a basis
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Non-trainable leaf.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, false, Op::Leaf)
    }

    /// Trainable leaf: `backward` will populate its gradient.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(value, true, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.nodes[v.0].grad.as_ref()
    }

    /// Hash of every activation's per-element segment decisions this tape
    /// made during recording. Two forward passes whose signatures differ
    /// straddled at least one piecewise kink, so a finite difference across
    /// them is invalid.
    pub fn activation_signature(&self) -> u64 {
        self.act_sig
    }

    fn fold_sig(&mut self, id: u8) {
        self.act_sig ^= id as u64;
        self.act_sig = self.act_sig.wrapping_mul(0x0000_0100_0000_01b3);
    }

    fn push(&mut self, value: Tensor<T>, requires_grad: bool, op: Op<T>) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_requires(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    // -- operators ----------------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::invalid(format!(
                "add shape mismatch: {:?} vs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x + y)
            .collect();
        let value = Tensor::new(self.value(a).shape().to_vec(), data)?;
        let rg = self.any_requires(&[a, b]);
        Ok(self.push(value, rg, Op::Add { a, b }))
    }

    /// Full reduction to a scalar (shape `[1]`), fixed summation order.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let total = self.value(x).data().iter().copied().sum();
        let rg = self.any_requires(&[x]);
        Ok(self.push(Tensor::scalar(total), rg, Op::Sum { x }))
    }

    /// Collapse everything after the batch dimension: `[N, ...] → [N, rest]`.
    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let shape = self.value(x).shape();
        let n = shape[0];
        let rest: usize = shape[1..].iter().product();
        if rest == 0 {
            return Err(Error::invalid("flatten needs at least rank 2"));
        }
        let value = self.value(x).reshape(&[n, rest])?;
        let rg = self.any_requires(&[x]);
        Ok(self.push(value, rg, Op::Flatten { x }))
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let value = kernels::linear_forward(self.value(x), self.value(w), self.value(b))?;
        let rg = self.any_requires(&[x, w, b]);
        Ok(self.push(value, rg, Op::Linear { x, w, b }))
    }

    pub fn conv2d(&mut self, x: Var, k: Var, b: Var, spec: ConvSpec) -> Result<Var> {
        let value = kernels::conv2d_forward(self.value(x), self.value(k), self.value(b), spec)?;
        let rg = self.any_requires(&[x, k, b]);
        Ok(self.push(value, rg, Op::Conv2d { x, k, b, spec }))
    }

    /// Per-channel batch norm. Train mode normalises with batch statistics
    /// and updates `running` in place (momentum convention
    /// `new = (1−m)·old + m·batch`, unbiased variance in the buffer).
    #[allow(clippy::too_many_arguments)]
    pub fn batchnorm2d(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running: &mut BnRunning<T>,
        mode: Mode,
        eps: T,
        momentum: T,
    ) -> Result<Var> {
        let (value, stats, through) = match mode {
            Mode::Train => {
                let stats = kernels::batchnorm2d_stats(self.value(x))?;
                let value = kernels::batchnorm2d_apply(
                    self.value(x),
                    self.value(gamma),
                    self.value(beta),
                    &stats.mean,
                    &stats.var,
                    eps,
                )?;
                if running.mean.len() != stats.mean.len() {
                    return Err(Error::invalid(format!(
                        "batchnorm2d running buffers cover {} channels, input has {}",
                        running.mean.len(),
                        stats.mean.len()
                    )));
                }
                let n = T::from_f64(stats.count as f64);
                let unbiased_scale = n / (n - T::one());
                for (r, &m) in running.mean.iter_mut().zip(&stats.mean) {
                    *r = (T::one() - momentum) * *r + momentum * m;
                }
                for (r, &v) in running.var.iter_mut().zip(&stats.var) {
                    *r = (T::one() - momentum) * *r + momentum * v * unbiased_scale;
                }
                (value, stats, true)
            }
            Mode::Eval => {
                let value = kernels::batchnorm2d_apply(
                    self.value(x),
                    self.value(gamma),
                    self.value(beta),
                    &running.mean,
                    &running.var,
                    eps,
                )?;
                let stats = Bn2dStats {
                    mean: running.mean.clone(),
                    var: running.var.clone(),
                    count: 0,
                };
                (value, stats, false)
            }
        };
        let rg = self.any_requires(&[x, gamma, beta]);
        Ok(self.push(
            value,
            rg,
            Op::BatchNorm2d {
                x,
                gamma,
                beta,
                stats,
                through_batch_stats: through,
                eps,
            },
        ))
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let value = kernels::global_avg_pool_forward(self.value(x))?;
        let rg = self.any_requires(&[x]);
        Ok(self.push(value, rg, Op::GlobalAvgPool { x }))
    }

    pub fn softmax_cross_entropy(
        &mut self,
        logits: Var,
        labels: &[usize],
        smoothing: f64,
    ) -> Result<Var> {
        let (loss, probs) =
            kernels::softmax_ce_forward(self.value(logits), labels, smoothing)?;
        let rg = self.any_requires(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            rg,
            Op::SoftmaxCrossEntropy {
                logits,
                labels: labels.to_vec(),
                smoothing,
                probs,
            },
        ))
    }

    /// Elementwise fixed activation evaluated from its piecewise form; the
    /// backward rule is the poly's own segment derivative, so training and
    /// fused inference share one definition of σ and σ′.
    pub fn pw_activation(&mut self, x: Var, poly: &PiecewisePoly) -> Result<Var> {
        let eval = PwEval::<T>::new(poly);
        let mut data = Vec::with_capacity(self.value(x).numel());
        let mut sig = Vec::with_capacity(self.value(x).numel());
        for &v in self.value(x).data() {
            sig.push(eval.segment_index(v) as u8);
            data.push(eval.eval(v));
        }
        let value = Tensor::new(self.value(x).shape().to_vec(), data)?;
        for id in sig {
            self.fold_sig(id);
        }
        let rg = self.any_requires(&[x]);
        Ok(self.push(value, rg, Op::PwActivation { x, eval }))
    }

    /// Adaptive multi-branch activation. Branch weights, slope, and (variant
    /// III) γ/β are read from the leaf vars in `vars`; `layer` supplies the
    /// topology and owns the running statistics, which train mode updates.
    pub fn repact(
        &mut self,
        x: Var,
        vars: RepActVars,
        layer: &mut RepActParams<T>,
        mode: Mode,
    ) -> Result<Var> {
        layer.validate()?;
        let k = layer.branches.len();
        if self.value(vars.alphas).shape() != [k] {
            return Err(Error::invalid(format!(
                "repact alphas var must have shape [{k}], got {:?}",
                self.value(vars.alphas).shape()
            )));
        }
        if self.value(vars.slope).numel() != 1 {
            return Err(Error::invalid("repact slope var must be a scalar"));
        }
        if vars.bn.is_some() != (layer.variant == RepActVariant::IiiBn) {
            return Err(Error::invalid(
                "γ/β vars must be supplied exactly for variant III",
            ));
        }

        let alphas = self.value(vars.alphas).data().to_vec();
        let slope = self.value(vars.slope).item();
        let xs = self.value(x).data().to_vec();

        let weights = match layer.variant {
            RepActVariant::IiSoftmax => layers::softmax(&alphas),
            _ => alphas.clone(),
        };
        let mut data = layers::multi_branch_sum(&layer.branches, &weights, slope, &xs);

        let bn_saved = if let Some((gamma_var, beta_var)) = vars.bn {
            let gamma = self.value(gamma_var).item();
            let beta = self.value(beta_var).item();
            let bn = layer.bn.as_mut().expect("validated");
            let (mean, var, through) = match mode {
                Mode::Train => {
                    if data.len() < 2 {
                        return Err(Error::invalid(
                            "variant III train mode needs at least 2 elements to define a variance",
                        ));
                    }
                    let (mean, var) = layers::mean_and_biased_var(&data);
                    let n = T::from_f64(data.len() as f64);
                    let unbiased = var * n / (n - T::one());
                    let m = bn.momentum;
                    bn.running_mean = (T::one() - m) * bn.running_mean + m * mean;
                    bn.running_var = (T::one() - m) * bn.running_var + m * unbiased;
                    (mean, var, true)
                }
                Mode::Eval => (bn.running_mean, bn.running_var, false),
            };
            let inv = T::one() / (var + bn.eps).sqrt();
            let scale = gamma * inv;
            let shift = beta - scale * mean;
            for v in &mut data {
                *v = scale * *v + shift;
            }
            Some(BnChain {
                gamma,
                mean,
                var,
                eps: bn.eps,
                through_batch_stats: through,
            })
        } else {
            None
        };

        for &v in &xs {
            let id = layers::branch_region(v);
            self.fold_sig(id);
        }

        let value = Tensor::new(self.value(x).shape().to_vec(), data)?;
        let mut inputs = vec![x, vars.alphas, vars.slope];
        if let Some((g, b)) = vars.bn {
            inputs.push(g);
            inputs.push(b);
        }
        let rg = self.any_requires(&inputs);
        Ok(self.push(
            value,
            rg,
            Op::RepAct {
                x,
                vars,
                variant: layer.variant,
                branches: layer.branches.clone(),
                bn_saved,
            },
        ))
    }

    /// Elementwise map with a caller-supplied derivative. The escape hatch
    /// for custom scalar ops; also what gradient-check negative controls use
    /// to install a deliberately wrong backward rule.
    pub fn map_unary(
        &mut self,
        x: Var,
        f: impl Fn(T) -> T,
        df: impl Fn(T) -> T + Send + Sync + 'static,
    ) -> Result<Var> {
        let value = self.value(x).map(f);
        let rg = self.any_requires(&[x]);
        Ok(self.push(value, rg, Op::MapUnary { x, df: Box::new(df) }))
    }

    // -- backward -----------------------------------------------------------

    /// Populate the gradient of every trainable node reachable from `loss`,
    /// which must be a scalar. Deterministic for a fixed tape.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.value(loss).is_scalar() {
            return Err(Error::invalid(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        for node in &mut self.nodes {
            node.grad = None;
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.nodes[loss.0].grad = Some(Tensor::scalar(T::one()));
        for i in (0..=loss.0).rev() {
            if self.nodes[i].grad.is_none() {
                continue;
            }
            let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
            let gout = self.nodes[i]
                .grad
                .clone()
                .expect("grad present by the check above");
            self.backward_step(&op, &gout)?;
            self.nodes[i].op = op;
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, g: Tensor<T>) {
        let node = &mut self.nodes[v.0];
        if !node.requires_grad {
            return;
        }
        match &mut node.grad {
            Some(acc) => {
                debug_assert_eq!(acc.shape(), g.shape());
                for (a, &b) in acc.data_mut().iter_mut().zip(g.data()) {
                    *a += b;
                }
            }
            slot @ None => *slot = Some(g),
        }
    }

    fn backward_step(&mut self, op: &Op<T>, gout: &Tensor<T>) -> Result<()> {
        match op {
            Op::Leaf => {}
            Op::Add { a, b } => {
                self.accumulate(*a, gout.clone());
                self.accumulate(*b, gout.clone());
            }
            Op::Sum { x } => {
                let g = Tensor::full(self.value(*x).shape(), gout.item())?;
                self.accumulate(*x, g);
            }
            Op::Flatten { x } => {
                let g = gout.reshape(self.value(*x).shape())?;
                self.accumulate(*x, g);
            }
            Op::Linear { x, w, b } => {
                let (gx, gw, gb) =
                    kernels::linear_backward(self.value(*x), self.value(*w), gout)?;
                self.accumulate(*x, gx);
                self.accumulate(*w, gw);
                self.accumulate(*b, gb);
            }
            Op::Conv2d { x, k, b, spec } => {
                let (gx, gk, gb) = kernels::conv2d_backward(
                    self.value(*x),
                    self.value(*k),
                    self.value(*b),
                    *spec,
                    gout,
                )?;
                self.accumulate(*x, gx);
                self.accumulate(*k, gk);
                self.accumulate(*b, gb);
            }
            Op::BatchNorm2d {
                x,
                gamma,
                beta,
                stats,
                through_batch_stats,
                eps,
            } => {
                let (gx, ggamma, gbeta) = kernels::batchnorm2d_backward(
                    self.value(*x),
                    self.value(*gamma),
                    &stats.mean,
                    &stats.var,
                    *eps,
                    *through_batch_stats,
                    gout,
                )?;
                self.accumulate(*x, gx);
                self.accumulate(*gamma, ggamma);
                self.accumulate(*beta, gbeta);
            }
            Op::GlobalAvgPool { x } => {
                let gx = kernels::global_avg_pool_backward(self.value(*x).shape(), gout)?;
                self.accumulate(*x, gx);
            }
            Op::SoftmaxCrossEntropy {
                logits,
                labels,
                smoothing,
                probs,
            } => {
                let g =
                    kernels::softmax_ce_backward(probs, labels, *smoothing, gout.item())?;
                self.accumulate(*logits, g);
            }
            Op::PwActivation { x, eval } => {
                let xs = self.value(*x);
                let data = xs
                    .data()
                    .iter()
                    .zip(gout.data())
                    .map(|(&v, &g)| eval.derivative(v) * g)
                    .collect();
                let g = Tensor::new(xs.shape().to_vec(), data)?;
                self.accumulate(*x, g);
            }
            Op::RepAct {
                x,
                vars,
                variant,
                branches,
                bn_saved,
            } => {
                let alphas = self.value(vars.alphas).data().to_vec();
                let slope = self.value(vars.slope).item();
                let parts = layers::repact_backward_parts(
                    branches,
                    *variant,
                    &alphas,
                    slope,
                    self.value(*x).data(),
                    gout.data(),
                    *bn_saved,
                );
                let gx = Tensor::new(self.value(*x).shape().to_vec(), parts.input)?;
                self.accumulate(*x, gx);
                let galphas = Tensor::new(vec![alphas.len()], parts.alphas)?;
                self.accumulate(vars.alphas, galphas);
                self.accumulate(vars.slope, Tensor::scalar(parts.prelu_slope));
                if let (Some((gamma, beta)), Some(bn)) = (vars.bn, parts.bn) {
                    self.accumulate(gamma, Tensor::scalar(bn.gamma));
                    self.accumulate(beta, Tensor::scalar(bn.beta));
                }
            }
            Op::MapUnary { x, df } => {
                let xs = self.value(*x);
                let data = xs
                    .data()
                    .iter()
                    .zip(gout.data())
                    .map(|(&v, &g)| df(v) * g)
                    .collect();
                let g = Tensor::new(xs.shape().to_vec(), data)?;
                self.accumulate(*x, g);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_graph_has_unit_gradient() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(Tensor::scalar(3.5));
        tape.backward(x).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[1.0]);
    }

    #[test]
    fn two_paths_accumulate_additively() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(Tensor::new(vec![2], vec![1.0, -2.0]).unwrap());
        let doubled = tape.map_unary(x, |v| v + v, |_| 2.0).unwrap();
        let both = tape.add(x, doubled).unwrap();
        let loss = tape.sum(both).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[3.0, 3.0]);
    }

    #[test]
    fn accumulation_is_order_independent_for_independent_branches() {
        let run = |swap: bool| {
            let mut tape = Tape::<f64>::new();
            let x = tape.param(Tensor::new(vec![3], vec![0.5, -1.0, 2.0]).unwrap());
            let a = tape.map_unary(x, |v| v * v, |v| 2.0 * v).unwrap();
            let b = tape.map_unary(x, |v| 3.0 * v, |_| 3.0).unwrap();
            let joined = if swap {
                tape.add(b, a).unwrap()
            } else {
                tape.add(a, b).unwrap()
            };
            let loss = tape.sum(joined).unwrap();
            tape.backward(loss).unwrap();
            tape.grad(x).unwrap().data().to_vec()
        };
        assert_eq!(run(false), run(true));
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
        assert!(tape.backward(x).is_err());
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
        let loss = tape.sum(x).unwrap();
        tape.backward(loss).unwrap();
        assert!(tape.grad(x).is_none());
        assert!(tape.grad(loss).is_none());
    }

    #[test]
    fn pw_activation_uses_poly_derivative() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(Tensor::new(vec![3], vec![-5.0, 1.0, 4.0]).unwrap());
        let y = tape.pw_activation(x, &PiecewisePoly::hardswish()).unwrap();
        let loss = tape.sum(y).unwrap();
        tape.backward(loss).unwrap();
        let g = tape.grad(x).unwrap().data();
        assert_eq!(g[0], 0.0);
        assert!((g[1] - (1.0 / 3.0 + 0.5)).abs() < 1e-15);
        assert_eq!(g[2], 1.0);
    }

    #[test]
    fn signatures_detect_segment_changes() {
        let poly = PiecewisePoly::hardswish();
        let sig_of = |v: f64| {
            let mut tape = Tape::<f64>::new();
            let x = tape.param(Tensor::scalar(v));
            tape.pw_activation(x, &poly).unwrap();
            tape.activation_signature()
        };
        assert_eq!(sig_of(1.0), sig_of(2.0));
        assert_ne!(sig_of(1.0), sig_of(4.0));
    }

    #[test]
    fn repact_identity_weights_pass_gradient_through() {
        let mut layer =
            RepActParams::<f64>::init(RepActVariant::I, &layers::DEFAULT_BRANCHES).unwrap();
        layer.alphas = vec![1.0, 0.0, 0.0, 0.0];
        let mut tape = Tape::<f64>::new();
        let x = tape.param(Tensor::new(vec![3], vec![-4.0, 0.0, 2.0]).unwrap());
        let alphas = tape.param(Tensor::new(vec![4], layer.alphas.clone()).unwrap());
        let slope = tape.param(Tensor::scalar(layer.prelu_slope));
        let y = tape
            .repact(
                x,
                RepActVars {
                    alphas,
                    slope,
                    bn: None,
                },
                &mut layer,
                Mode::Eval,
            )
            .unwrap();
        assert_eq!(tape.value(y).data(), &[-4.0, 0.0, 2.0]);
        let loss = tape.sum(y).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[1.0, 1.0, 1.0]);
        // Identity branch gradient is Σx, ReLU branch and HardSwish branches
        // see only their own activations.
        let ga = tape.grad(alphas).unwrap().data();
        assert_eq!(ga[0], -2.0);
        assert_eq!(ga[1], 2.0);
    }
}
