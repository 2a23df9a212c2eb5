//! Re-parameterizable adaptive activations: layers that train as a weighted
//! sum of activation branches and deploy as a single piecewise polynomial.
//!
//! During training every activation layer computes
//! `Σ αₖ · branchₖ(x)` over a small branch set (identity, relu, prelu,
//! hard-swish by default), with the weights `αₖ` and the prelu slope learned
//! by gradient descent like any other parameter. Because each branch is a
//! piecewise power function of degree ≤ 2 and the combination is linear, the
//! whole layer folds into one [`piecewise::PiecewisePoly`] for inference —
//! same outputs, one branch, a handful of static coefficients.
//!
//! The crate ships the full loop needed to exercise that idea end to end:
//!
//! * [`piecewise`] — the fused representation and its coefficient algebra;
//! * [`layers`] — the trainable multi-branch layers (plain, softmax-gated,
//!   and batch-norm variants) with forward, fusion, and analytic gradients;
//! * [`autodiff`] + [`kernels`] — a minimal reverse-mode tape over dense
//!   tensors (conv2d, batch norm, pooling, linear, cross-entropy);
//! * [`gradcheck`] — finite-difference verification with breakpoint-aware
//!   probe exclusion;
//! * [`data`], [`model`], [`train`], [`checkpoint`] — a deterministic
//!   desk-scale training harness for small CNNs.
//!
//! ```
//! use repact::layers::{RepActParams, RepActVariant, DEFAULT_BRANCHES};
//! use repact::tensor::Tensor;
//!
//! // A freshly initialised layer weights its four branches evenly…
//! let mut layer = RepActParams::<f64>::init(RepActVariant::I, &DEFAULT_BRANCHES)?;
//! let x = Tensor::new(vec![3], vec![-5.0, 1.0, 4.0])?;
//! let trained_form = layer.forward(&x, repact::layers::Mode::Eval)?;
//!
//! // …and fuses into a single piecewise polynomial with identical values.
//! let fused = layer.fuse()?;
//! for (&xi, &yi) in x.data().iter().zip(trained_form.data()) {
//!     assert!((fused.eval(xi)? - yi).abs() < 1e-12);
//! }
//! # Ok::<(), repact::Error>(())
//! ```

pub mod autodiff;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod kernels;
pub mod layers;
pub mod model;
pub mod piecewise;
pub mod scalar;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use layers::{BnState, BranchKind, Mode, RepActParams, RepActVariant};
pub use piecewise::{OpCount, PiecewisePoly, PwEval, Segment};
pub use scalar::Element;
pub use tensor::Tensor;

// The guide's code blocks double as doctests so the book cannot drift from
// the API. `cargo test --doc` compiles and runs them.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/piecewise.md")]
    mod piecewise {}
    #[doc = include_str!("../../../book/src/activations.md")]
    mod activations {}
    #[doc = include_str!("../../../book/src/autodiff.md")]
    mod autodiff {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
