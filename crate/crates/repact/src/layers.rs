//! Adaptive multi-branch activation layers and their single-branch fusion.
//!
//! During training a layer computes `Σ αₖ · branchₖ(x)` with the branch
//! weights (and the leaky slope of the PReLU branch) as trainable scalars.
//! For deployment [`RepActParams::fuse`] folds the weights into the segment
//! coefficients of one [`PiecewisePoly`].
//!
//! Three variants:
//! * `I` — raw weights, used as-is.
//! * `II` (softmax gate) — the trainable weights are logits; the forward pass
//!   applies a softmax so the effective weights are positive and sum to one.
//!   Fusing snapshots the softmaxed weights, which lands back on the same
//!   single-branch form as variant I.
//! * `III` (single-channel BN) — the raw weighted sum is pushed through a
//!   one-channel batch norm over the whole map. At fusion time the norm's
//!   affine transform folds into the branch weights (`ε = γ/√(σ² + eps)`)
//!   plus a constant offset `β′ = β − γμ/√(σ² + eps)` absorbed into every
//!   segment's zero-power coefficient.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::piecewise::PiecewisePoly;
use crate::scalar::Element;
use crate::tensor::Tensor;

pub const PRELU_SLOPE_INIT: f64 = 0.25;
/// The one-channel batch norm inside variant III pins this epsilon.
pub const REPACT_BN_EPS: f64 = 1e-6;
pub const REPACT_BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// The activation branches a layer may combine. All are piecewise power
/// functions of degree ≤ 2 with breakpoints inside {−3, 0, 3}.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BranchKind {
    Identity,
    Relu,
    PRelu,
    HardSwish,
}

pub const DEFAULT_BRANCHES: [BranchKind; 4] = [
    BranchKind::Identity,
    BranchKind::Relu,
    BranchKind::PRelu,
    BranchKind::HardSwish,
];

impl BranchKind {
    pub fn name(self) -> &'static str {
        match self {
            BranchKind::Identity => "identity",
            BranchKind::Relu => "relu",
            BranchKind::PRelu => "prelu",
            BranchKind::HardSwish => "hard_swish",
        }
    }

    /// Branch value. Segment membership follows the half-open convention of
    /// the fused form, so the training path and the fused path agree exactly
    /// on breakpoints.
    #[inline]
    pub fn value<T: Element>(self, x: T, slope: T) -> T {
        let zero = T::zero();
        match self {
            BranchKind::Identity => x,
            BranchKind::Relu => {
                if x < zero {
                    zero
                } else {
                    x
                }
            }
            BranchKind::PRelu => {
                if x < zero {
                    slope * x
                } else {
                    x
                }
            }
            BranchKind::HardSwish => {
                let three = T::from_f64(3.0);
                if x < -three {
                    zero
                } else if x < three {
                    x * (x * T::from_f64(1.0 / 6.0) + T::from_f64(0.5))
                } else {
                    x
                }
            }
        }
    }

    /// Right derivative with respect to `x`.
    #[inline]
    pub fn derivative<T: Element>(self, x: T, slope: T) -> T {
        let zero = T::zero();
        let one = T::one();
        match self {
            BranchKind::Identity => one,
            BranchKind::Relu => {
                if x < zero {
                    zero
                } else {
                    one
                }
            }
            BranchKind::PRelu => {
                if x < zero {
                    slope
                } else {
                    one
                }
            }
            BranchKind::HardSwish => {
                let three = T::from_f64(3.0);
                if x < -three {
                    zero
                } else if x < three {
                    x * T::from_f64(1.0 / 3.0) + T::from_f64(0.5)
                } else {
                    one
                }
            }
        }
    }

    /// Derivative of the branch value with respect to the PReLU slope.
    /// Zero for every branch except PReLU on the negative half.
    #[inline]
    pub fn slope_gradient<T: Element>(self, x: T) -> T {
        match self {
            BranchKind::PRelu if x < T::zero() => x,
            _ => T::zero(),
        }
    }

    pub fn poly(self, slope: f64) -> Result<PiecewisePoly> {
        match self {
            BranchKind::Identity => Ok(PiecewisePoly::identity()),
            BranchKind::Relu => Ok(PiecewisePoly::relu()),
            BranchKind::PRelu => PiecewisePoly::prelu(slope),
            BranchKind::HardSwish => Ok(PiecewisePoly::hardswish()),
        }
    }
}

/// Region of the default breakpoint set {−3, 0, 3} a point falls in. Used by
/// gradient checks to detect finite-difference probes that straddle a kink.
#[inline]
pub(crate) fn branch_region<T: Element>(x: T) -> u8 {
    let three = T::from_f64(3.0);
    if x < -three {
        0
    } else if x < T::zero() {
        1
    } else if x < three {
        2
    } else {
        3
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RepActVariant {
    /// Raw branch weights.
    I,
    /// Softmax-gated branch weights.
    IiSoftmax,
    /// Single-channel batch norm over the fused map.
    IiiBn,
}

impl RepActVariant {
    pub fn name(self) -> &'static str {
        match self {
            RepActVariant::I => "repact_i",
            RepActVariant::IiSoftmax => "repact_ii",
            RepActVariant::IiiBn => "repact_iii",
        }
    }
}

/// Single-channel batch-norm state for variant III: one (γ, β, μ, σ²) tuple
/// applied over the whole fused map.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BnState<T> {
    pub gamma: T,
    pub beta: T,
    pub running_mean: T,
    pub running_var: T,
    pub momentum: T,
    pub eps: T,
}

impl<T: Element> BnState<T> {
    pub fn identity() -> Self {
        BnState {
            gamma: T::one(),
            beta: T::zero(),
            running_mean: T::zero(),
            running_var: T::one(),
            momentum: T::from_f64(REPACT_BN_MOMENTUM),
            eps: T::from_f64(REPACT_BN_EPS),
        }
    }

    fn validate(&self) -> Result<()> {
        if self.running_var < T::zero() {
            return Err(Error::invalid("bn running variance must be >= 0"));
        }
        if self.eps <= T::zero() {
            return Err(Error::invalid("bn eps must be > 0"));
        }
        if self.momentum <= T::zero() || self.momentum > T::one() {
            return Err(Error::invalid("bn momentum must be in (0, 1]"));
        }
        Ok(())
    }

    /// `ε = γ / √(σ² + eps)` using the running statistics.
    pub fn scale(&self) -> Result<T> {
        let denom = self.running_var + self.eps;
        if denom <= T::zero() {
            return Err(Error::invalid(
                "bn running_var + eps must be positive to fold",
            ));
        }
        Ok(self.gamma / denom.sqrt())
    }

    /// `β′ = β − γμ / √(σ² + eps)` using the running statistics.
    pub fn folded_offset(&self) -> Result<T> {
        Ok(self.beta - self.scale()? * self.running_mean)
    }
}

/// Gradients of one layer application: with respect to the input map, each
/// branch weight, the PReLU slope, and (variant III) the norm's γ and β.
#[derive(Debug, Clone)]
pub struct RepActGrads<T> {
    pub input: Tensor<T>,
    pub alphas: Vec<T>,
    pub prelu_slope: T,
    pub bn: Option<BnParamGrads<T>>,
}

#[derive(Debug, Clone, Copy)]
pub struct BnParamGrads<T> {
    pub gamma: T,
    pub beta: T,
}

/// Per-layer trainable state of one adaptive activation.
#[derive(Debug, Clone, PartialEq)]
pub struct RepActParams<T> {
    pub alphas: Vec<T>,
    pub prelu_slope: T,
    pub variant: RepActVariant,
    pub bn: Option<BnState<T>>,
    pub branches: Vec<BranchKind>,
}

impl<T: Element> RepActParams<T> {
    /// Even weight split (`Σ α = 1` at the start of training), PReLU slope
    /// 0.25, and identity-initialised batch norm for variant III.
    pub fn init(variant: RepActVariant, branches: &[BranchKind]) -> Result<Self> {
        if branches.is_empty() {
            return Err(Error::invalid("branch set must not be empty"));
        }
        let even = T::one() / T::from_f64(branches.len() as f64);
        Ok(RepActParams {
            alphas: vec![even; branches.len()],
            prelu_slope: T::from_f64(PRELU_SLOPE_INIT),
            variant,
            bn: (variant == RepActVariant::IiiBn).then(BnState::identity),
            branches: branches.to_vec(),
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.branches.is_empty() || self.alphas.len() != self.branches.len() {
            return Err(Error::invalid(format!(
                "expected one weight per branch, got {} weights for {} branches",
                self.alphas.len(),
                self.branches.len()
            )));
        }
        if self.alphas.iter().any(|a| !a.is_finite()) || !self.prelu_slope.is_finite() {
            return Err(Error::invalid("branch weights and slope must be finite"));
        }
        match (self.variant, &self.bn) {
            (RepActVariant::IiiBn, Some(bn)) => bn.validate(),
            (RepActVariant::IiiBn, None) => {
                Err(Error::invalid("variant III requires batch-norm state"))
            }
            (_, Some(_)) => Err(Error::invalid(
                "batch-norm state is only valid for variant III",
            )),
            (_, None) => Ok(()),
        }
    }

    /// The weights actually applied to the branches in inference form:
    /// variant I passes `α` through, II softmaxes it, III scales it by
    /// `ε = γ/√(running_var + eps)`.
    pub fn effective_alphas(&self) -> Result<Vec<T>> {
        self.validate()?;
        match self.variant {
            RepActVariant::I => Ok(self.alphas.clone()),
            RepActVariant::IiSoftmax => Ok(softmax(&self.alphas)),
            RepActVariant::IiiBn => {
                let eps = self.bn.as_ref().expect("validated").scale()?;
                Ok(self.alphas.iter().map(|&a| eps * a).collect())
            }
        }
    }

    /// Multi-branch forward. `Train` mode on variant III normalises with the
    /// batch statistics of the fused map and updates the running buffers;
    /// every other combination is pure.
    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        self.validate()?;
        match self.variant {
            RepActVariant::I | RepActVariant::IiSoftmax => self.forward_inference_inner(x),
            RepActVariant::IiiBn => {
                let s = multi_branch_sum(&self.branches, &self.alphas, self.prelu_slope, x.data());
                let bn = self.bn.as_mut().expect("validated");
                match mode {
                    Mode::Eval => {
                        let scale = bn.gamma / (bn.running_var + bn.eps).sqrt();
                        let shift = bn.beta - scale * bn.running_mean;
                        let data = s.into_iter().map(|v| scale * v + shift).collect();
                        Tensor::new(x.shape().to_vec(), data)
                    }
                    Mode::Train => {
                        let n = s.len();
                        if n < 2 {
                            return Err(Error::invalid(
                                "variant III train mode needs at least 2 elements to define a variance",
                            ));
                        }
                        let (mean, var) = mean_and_biased_var(&s);
                        let inv = T::one() / (var + bn.eps).sqrt();
                        let scale = bn.gamma * inv;
                        let shift = bn.beta - scale * mean;
                        // Biased variance normalises the batch; the unbiased
                        // estimate feeds the running buffer.
                        let unbiased =
                            var * T::from_f64(n as f64) / T::from_f64((n - 1) as f64);
                        let m = bn.momentum;
                        bn.running_mean = (T::one() - m) * bn.running_mean + m * mean;
                        bn.running_var = (T::one() - m) * bn.running_var + m * unbiased;
                        let data = s.into_iter().map(|v| scale * v + shift).collect();
                        Tensor::new(x.shape().to_vec(), data)
                    }
                }
            }
        }
    }

    /// Inference-mode forward without touching any state.
    pub fn forward_inference(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.validate()?;
        match self.variant {
            RepActVariant::I | RepActVariant::IiSoftmax => self.forward_inference_inner(x),
            RepActVariant::IiiBn => {
                let s = multi_branch_sum(&self.branches, &self.alphas, self.prelu_slope, x.data());
                let bn = self.bn.as_ref().expect("validated");
                let scale = bn.gamma / (bn.running_var + bn.eps).sqrt();
                let shift = bn.beta - scale * bn.running_mean;
                Tensor::new(x.shape().to_vec(), s.into_iter().map(|v| scale * v + shift).collect())
            }
        }
    }

    fn forward_inference_inner(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let weights = match self.variant {
            RepActVariant::IiSoftmax => softmax(&self.alphas),
            _ => self.alphas.clone(),
        };
        let data = multi_branch_sum(&self.branches, &weights, self.prelu_slope, x.data());
        Tensor::new(x.shape().to_vec(), data)
    }

    /// Fold the layer into a single piecewise polynomial (64-bit coefficient
    /// algebra). Variant III additionally absorbs `β′` into every segment's
    /// zero-power coefficient. For the default branch set the result's
    /// breakpoints are a subset of {−3, 0, 3}.
    pub fn fuse(&self) -> Result<PiecewisePoly> {
        self.validate()?;
        let slope = self.prelu_slope.as_f64();
        let weights: Vec<f64> = match self.variant {
            RepActVariant::I => self.alphas.iter().map(|a| a.as_f64()).collect(),
            RepActVariant::IiSoftmax => {
                softmax(&self.alphas.iter().map(|a| a.as_f64()).collect::<Vec<_>>())
            }
            RepActVariant::IiiBn => {
                let eps = self.bn.as_ref().expect("validated").scale()?.as_f64();
                self.alphas.iter().map(|a| eps * a.as_f64()).collect()
            }
        };
        let polys: Vec<PiecewisePoly> = self
            .branches
            .iter()
            .map(|b| b.poly(slope))
            .collect::<Result<_>>()?;
        let terms: Vec<(f64, &PiecewisePoly)> =
            weights.iter().copied().zip(polys.iter()).collect();
        let fused = PiecewisePoly::weighted_sum(&terms)?;
        match &self.bn {
            Some(bn) => fused.offset(bn.folded_offset()?.as_f64()),
            None => Ok(fused),
        }
    }

    /// Gradients of `Σ upstream ⊙ layer(x)` with respect to the input and
    /// every trainable scalar. `mode` selects which statistics the variant
    /// III chain differentiates through: batch statistics (full batch-norm
    /// backward) in `Train`, frozen running statistics in `Eval`.
    pub fn backward(
        &self,
        x: &Tensor<T>,
        upstream: &Tensor<T>,
        mode: Mode,
    ) -> Result<RepActGrads<T>> {
        self.validate()?;
        if x.shape() != upstream.shape() {
            return Err(Error::invalid(format!(
                "backward shape mismatch: x {:?} vs upstream {:?}",
                x.shape(),
                upstream.shape()
            )));
        }
        let bn_ctx = match (&self.bn, mode) {
            (Some(bn), Mode::Train) => {
                let s = multi_branch_sum(&self.branches, &self.alphas, self.prelu_slope, x.data());
                if s.len() < 2 {
                    return Err(Error::invalid(
                        "variant III train mode needs at least 2 elements to define a variance",
                    ));
                }
                let (mean, var) = mean_and_biased_var(&s);
                Some(BnChain {
                    gamma: bn.gamma,
                    mean,
                    var,
                    eps: bn.eps,
                    through_batch_stats: true,
                })
            }
            (Some(bn), Mode::Eval) => Some(BnChain {
                gamma: bn.gamma,
                mean: bn.running_mean,
                var: bn.running_var,
                eps: bn.eps,
                through_batch_stats: false,
            }),
            (None, _) => None,
        };
        let grads = repact_backward_parts(
            &self.branches,
            self.variant,
            &self.alphas,
            self.prelu_slope,
            x.data(),
            upstream.data(),
            bn_ctx,
        );
        Ok(RepActGrads {
            input: Tensor::new(x.shape().to_vec(), grads.input)?,
            alphas: grads.alphas,
            prelu_slope: grads.prelu_slope,
            bn: grads.bn,
        })
    }
}

/// `out[i] = Σₖ weights[k] · branchₖ(xs[i])`, summed in branch order.
pub(crate) fn multi_branch_sum<T: Element>(
    branches: &[BranchKind],
    weights: &[T],
    slope: T,
    xs: &[T],
) -> Vec<T> {
    xs.iter()
        .map(|&x| {
            let mut acc = T::zero();
            for (kind, &w) in branches.iter().zip(weights) {
                acc += w * kind.value(x, slope);
            }
            acc
        })
        .collect()
}

pub(crate) fn softmax<T: Element>(logits: &[T]) -> Vec<T> {
    let max = logits
        .iter()
        .copied()
        .fold(T::neg_infinity(), |a, b| if b > a { b } else { a });
    let exps: Vec<T> = logits.iter().map(|&v| (v - max).exp()).collect();
    let total: T = exps.iter().copied().sum();
    exps.into_iter().map(|e| e / total).collect()
}

pub(crate) fn mean_and_biased_var<T: Element>(xs: &[T]) -> (T, T) {
    let n = T::from_f64(xs.len() as f64);
    let mean = xs.iter().copied().sum::<T>() / n;
    let var = xs
        .iter()
        .map(|&v| {
            let d = v - mean;
            d * d
        })
        .sum::<T>()
        / n;
    (mean, var)
}

/// Statistics the variant III chain differentiates against.
#[derive(Debug, Clone, Copy)]
pub(crate) struct BnChain<T> {
    pub gamma: T,
    pub mean: T,
    pub var: T,
    pub eps: T,
    /// True when `mean`/`var` were computed from this batch, which adds the
    /// batch-norm backward terms; false for frozen running statistics.
    pub through_batch_stats: bool,
}

pub(crate) struct RepActGradParts<T> {
    pub input: Vec<T>,
    pub alphas: Vec<T>,
    pub prelu_slope: T,
    pub bn: Option<BnParamGrads<T>>,
}

/// Shared backward chain for the standalone layer and the autodiff operator.
pub(crate) fn repact_backward_parts<T: Element>(
    branches: &[BranchKind],
    variant: RepActVariant,
    alphas: &[T],
    slope: T,
    xs: &[T],
    upstream: &[T],
    bn: Option<BnChain<T>>,
) -> RepActGradParts<T> {
    debug_assert_eq!(xs.len(), upstream.len());

    // Effective weights seen by the branch sum, and the gradient reaching it.
    let (weights, bn_grads, gs): (Vec<T>, Option<BnParamGrads<T>>, Vec<T>) = match variant {
        RepActVariant::IiiBn => {
            let chain = bn.expect("variant III backward requires bn statistics");
            let s = multi_branch_sum(branches, alphas, slope, xs);
            let inv = T::one() / (chain.var + chain.eps).sqrt();
            let n = T::from_f64(s.len() as f64);
            let xhat: Vec<T> = s.iter().map(|&v| (v - chain.mean) * inv).collect();
            let g_beta: T = upstream.iter().copied().sum();
            let g_gamma: T = upstream
                .iter()
                .zip(xhat.iter())
                .map(|(&g, &h)| g * h)
                .sum();
            let gs = if chain.through_batch_stats {
                let mean_g = g_beta / n;
                let mean_gx = g_gamma / n;
                upstream
                    .iter()
                    .zip(xhat.iter())
                    .map(|(&g, &h)| chain.gamma * inv * (g - mean_g - h * mean_gx))
                    .collect()
            } else {
                upstream.iter().map(|&g| chain.gamma * inv * g).collect()
            };
            (
                alphas.to_vec(),
                Some(BnParamGrads {
                    gamma: g_gamma,
                    beta: g_beta,
                }),
                gs,
            )
        }
        RepActVariant::IiSoftmax => (softmax(alphas), None, upstream.to_vec()),
        RepActVariant::I => (alphas.to_vec(), None, upstream.to_vec()),
    };

    // Per-branch weight gradients against the effective weights.
    let mut branch_sums = vec![T::zero(); branches.len()];
    let mut g_slope = T::zero();
    let mut g_input = vec![T::zero(); xs.len()];
    for (i, (&x, &g)) in xs.iter().zip(gs.iter()).enumerate() {
        let mut dx = T::zero();
        for (k, (kind, &w)) in branches.iter().zip(weights.iter()).enumerate() {
            branch_sums[k] += kind.value(x, slope) * g;
            dx += w * kind.derivative(x, slope);
            g_slope += w * kind.slope_gradient(x) * g;
        }
        g_input[i] = dx * g;
    }

    // Variant II composes with the softmax Jacobian to reach the raw logits.
    let g_alphas = match variant {
        RepActVariant::IiSoftmax => {
            let dot: T = weights
                .iter()
                .zip(branch_sums.iter())
                .map(|(&w, &s)| w * s)
                .sum();
            weights
                .iter()
                .zip(branch_sums.iter())
                .map(|(&w, &s)| w * (s - dot))
                .collect()
        }
        _ => branch_sums,
    };

    RepActGradParts {
        input: g_input,
        alphas: g_alphas,
        prelu_slope: g_slope,
        bn: bn_grads,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tensor(values: &[f64]) -> Tensor<f64> {
        Tensor::new(vec![values.len()], values.to_vec()).unwrap()
    }

    #[test]
    fn init_distributes_weights_evenly() {
        let p = RepActParams::<f64>::init(RepActVariant::I, &DEFAULT_BRANCHES).unwrap();
        assert_eq!(p.alphas, vec![0.25; 4]);
        assert_eq!(p.prelu_slope, 0.25);
        assert!(p.bn.is_none());

        let two = RepActParams::<f64>::init(
            RepActVariant::I,
            &[BranchKind::Identity, BranchKind::Relu],
        )
        .unwrap();
        assert_eq!(two.alphas, vec![0.5, 0.5]);

        let bn = RepActParams::<f64>::init(RepActVariant::IiiBn, &DEFAULT_BRANCHES).unwrap();
        let state = bn.bn.unwrap();
        assert_eq!(state.gamma, 1.0);
        assert_eq!(state.beta, 0.0);
        assert_eq!(state.running_mean, 0.0);
        assert_eq!(state.running_var, 1.0);
        assert_eq!(state.momentum, 0.1);
        assert_eq!(state.eps, 1e-6);

        assert!(RepActParams::<f64>::init(RepActVariant::I, &[]).is_err());
    }

    #[test]
    fn effective_alphas_per_variant() {
        let mut p = RepActParams::<f64>::init(RepActVariant::IiSoftmax, &DEFAULT_BRANCHES).unwrap();
        assert_eq!(p.effective_alphas().unwrap(), vec![0.25; 4]);

        p.alphas = vec![2.0f64.ln(), 0.0, f64::NEG_INFINITY, f64::NEG_INFINITY];
        // restrict to the 2-branch case of the hand example
        let two = RepActParams::<f64> {
            alphas: vec![2.0f64.ln(), 0.0],
            prelu_slope: 0.25,
            variant: RepActVariant::IiSoftmax,
            bn: None,
            branches: vec![BranchKind::Identity, BranchKind::Relu],
        };
        let eff = two.effective_alphas().unwrap();
        assert!((eff[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((eff[1] - 1.0 / 3.0).abs() < 1e-15);

        let mut three = RepActParams::<f64>::init(RepActVariant::IiiBn, &DEFAULT_BRANCHES).unwrap();
        {
            let bn = three.bn.as_mut().unwrap();
            bn.gamma = 2.0;
            bn.running_var = 3.999999;
        }
        // ε = 2/√(3.999999 + 1e-6) = 2/2 = 1
        assert_eq!(three.effective_alphas().unwrap(), vec![0.25; 4]);
    }

    #[test]
    fn forward_examples() {
        let mut pure_identity =
            RepActParams::<f64>::init(RepActVariant::I, &DEFAULT_BRANCHES).unwrap();
        pure_identity.alphas = vec![1.0, 0.0, 0.0, 0.0];
        let x = tensor(&[-7.5, -0.3, 0.0, 2.5]);
        let y = pure_identity.forward(&x, Mode::Eval).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn forward_hardswish_only_branch() {
        let mut p = RepActParams::<f64>::init(RepActVariant::I, &DEFAULT_BRANCHES).unwrap();
        p.alphas = vec![0.0, 0.0, 0.0, 1.0];
        let y = p.forward(&tensor(&[1.0]), Mode::Eval).unwrap();
        assert!((y.data()[0] - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn forward_uniform_init_value() {
        let mut p = RepActParams::<f64>::init(RepActVariant::I, &DEFAULT_BRANCHES).unwrap();
        let y = p.forward(&tensor(&[1.0]), Mode::Train).unwrap();
        assert!((y.data()[0] - 0.9166666666666666).abs() < 1e-15);
    }

    #[test]
    fn fuse_single_relu_branch_is_relu() {
        let mut p = RepActParams::<f64>::init(RepActVariant::I, &DEFAULT_BRANCHES).unwrap();
        p.alphas = vec![0.0, 1.0, 0.0, 0.0];
        let fused = p.fuse().unwrap();
        for &x in &[-2.0, -0.5, 0.0, 0.5, 4.0] {
            assert_eq!(
                fused.eval(x).unwrap(),
                PiecewisePoly::relu().eval(x).unwrap()
            );
        }
    }

    #[test]
    fn fuse_variant_iii_hand_example() {
        let mut p = RepActParams::<f64>::init(RepActVariant::IiiBn, &DEFAULT_BRANCHES).unwrap();
        {
            let bn = p.bn.as_mut().unwrap();
            bn.gamma = 2.0;
            bn.beta = 1.0;
            bn.running_mean = 0.5;
            bn.running_var = 4.0 - bn.eps; // σ² + eps = 4 exactly
        }
        let bn = p.bn.as_ref().unwrap();
        assert_eq!(bn.scale().unwrap(), 1.0);
        assert_eq!(bn.folded_offset().unwrap(), 0.5);

        let fused = p.fuse().unwrap();
        let plain = RepActParams::<f64> {
            bn: None,
            variant: RepActVariant::I,
            ..p.clone()
        }
        .fuse()
        .unwrap();
        assert_eq!(fused.breakpoints(), plain.breakpoints());
        for (a, b) in fused.segments().iter().zip(plain.segments()) {
            assert_eq!(a.c2, b.c2);
            assert_eq!(a.c1, b.c1);
            assert_eq!(a.c0, b.c0 + 0.5);
        }
    }

    #[test]
    fn backward_hand_examples() {
        // 2-branch on all-positive inputs: identity and relu gradients agree.
        let p = RepActParams::<f64> {
            alphas: vec![0.5, 0.5],
            prelu_slope: 0.25,
            variant: RepActVariant::I,
            bn: None,
            branches: vec![BranchKind::Identity, BranchKind::Relu],
        };
        let x = tensor(&[0.5, 1.5, 2.0]);
        let g = tensor(&[1.0, 1.0, 1.0]);
        let grads = p.backward(&x, &g, Mode::Eval).unwrap();
        assert_eq!(grads.alphas[0], grads.alphas[1]);

        // Single element x = −2, upstream 1, uniform variant I, t = 0.25:
        // slope gradient = α₂ · x = 0.25 · (−2).
        let p = RepActParams::<f64>::init(RepActVariant::I, &DEFAULT_BRANCHES).unwrap();
        let grads = p
            .backward(&tensor(&[-2.0]), &tensor(&[1.0]), Mode::Eval)
            .unwrap();
        assert_eq!(grads.prelu_slope, -0.5);

        // Pure identity weights: grad_x equals upstream exactly.
        let mut id = RepActParams::<f64>::init(RepActVariant::I, &DEFAULT_BRANCHES).unwrap();
        id.alphas = vec![1.0, 0.0, 0.0, 0.0];
        let upstream = tensor(&[0.3, -1.2, 7.0]);
        let grads = id
            .backward(&tensor(&[-5.0, 0.0, 2.0]), &upstream, Mode::Eval)
            .unwrap();
        assert_eq!(grads.input, upstream);
    }

    #[test]
    fn backward_rejects_shape_mismatch() {
        let p = RepActParams::<f64>::init(RepActVariant::I, &DEFAULT_BRANCHES).unwrap();
        let err = p.backward(&tensor(&[1.0, 2.0]), &tensor(&[1.0]), Mode::Eval);
        assert!(err.is_err());
    }

    #[test]
    fn variant_iii_train_needs_two_elements() {
        let mut p = RepActParams::<f64>::init(RepActVariant::IiiBn, &DEFAULT_BRANCHES).unwrap();
        assert!(p.forward(&tensor(&[1.0]), Mode::Train).is_err());
        assert!(p.forward(&tensor(&[1.0]), Mode::Eval).is_ok());
    }

    #[test]
    fn running_stats_update_with_momentum() {
        let mut p = RepActParams::<f64>::init(RepActVariant::IiiBn, &DEFAULT_BRANCHES).unwrap();
        p.alphas = vec![1.0, 0.0, 0.0, 0.0]; // fused map equals the input
        let x = tensor(&[0.0, 2.0]);
        p.forward(&x, Mode::Train).unwrap();
        let bn = p.bn.as_ref().unwrap();
        // batch mean 1, biased var 1, unbiased var 2
        assert!((bn.running_mean - 0.1).abs() < 1e-12);
        assert!((bn.running_var - (0.9 + 0.1 * 2.0)).abs() < 1e-12);
    }
}
