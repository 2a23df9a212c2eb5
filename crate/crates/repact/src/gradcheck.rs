//! Finite-difference verification of analytic gradients.
//!
//! Always runs in `f64`: central differences in `f32` drown in rounding
//! noise. For each parameter element the harness rebuilds the forward pass
//! at `p ± h` and compares `(f₊ − f₋)/2h` against the recorded backward
//! gradient.
//!
//! Piecewise activations have measure-zero kinks where a finite difference
//! straddling a breakpoint measures nothing meaningful. The tape hashes every
//! activation's per-element segment decisions into a signature; a probe pair
//! whose signatures differ crossed a kink and is excluded (and counted)
//! rather than reported as an error.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub step: f64,
    /// Absolute denominator floor for the relative error, guarding
    /// true-zero gradients where a relative measure is undefined.
    pub rel_floor: f64,
    /// The denominator is also floored at this fraction of the group's
    /// largest analytic gradient. Central differences carry an O(h²)
    /// truncation term; on an element whose own gradient is a vanishing
    /// fraction of its group's scale, that term would otherwise read as a
    /// huge relative error while the gradient is numerically irrelevant.
    /// Errors on any element at or above this fraction of the group scale
    /// are still measured fully relatively.
    pub group_scale_fraction: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            step: 1e-3,
            rel_floor: 1e-6,
            group_scale_fraction: 1e-2,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GroupReport {
    pub name: String,
    pub elements: usize,
    /// Probes excluded because they straddled an activation breakpoint.
    pub excluded: usize,
    pub max_rel_err: f64,
    /// Flat index of the worst element, if any element was measured.
    pub worst_index: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub groups: Vec<GroupReport>,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.groups
            .iter()
            .map(|g| g.max_rel_err)
            .fold(0.0, f64::max)
    }

    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err() <= tol
    }
}

/// Check the analytic gradients of a rebuildable graph.
///
/// `build` receives a fresh tape plus one trainable leaf per entry of
/// `params` (same order) and returns the scalar loss. It is invoked once for
/// the analytic pass and twice per parameter element for the differences, so
/// it must be re-enterable; forward-only state drift (batch-norm running
/// buffers) is harmless because it never feeds the loss within a pass.
pub fn grad_check<F>(
    mut build: F,
    params: &[(String, Tensor<f64>)],
    opts: &GradCheckOptions,
) -> Result<GradCheckReport>
where
    F: FnMut(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    if opts.step <= 0.0 || !opts.step.is_finite() {
        return Err(Error::invalid(format!(
            "grad_check step must be positive and finite, got {}",
            opts.step
        )));
    }

    type Pass = (f64, u64, Vec<Option<Tensor<f64>>>);
    let run = |build: &mut F, values: &[Tensor<f64>], want_grads: bool| -> Result<Pass> {
            let mut tape = Tape::new();
            let vars: Vec<Var> = values.iter().map(|t| tape.param(t.clone())).collect();
            let loss = build(&mut tape, &vars)?;
            if !tape.value(loss).is_scalar() {
                return Err(Error::invalid("grad_check loss must be a scalar"));
            }
            let value = tape.value(loss).item();
            let sig = tape.activation_signature();
            let grads = if want_grads {
                tape.backward(loss)?;
                vars.iter().map(|&v| tape.grad(v).cloned()).collect()
            } else {
                Vec::new()
            };
            Ok((value, sig, grads))
        };

    let base_values: Vec<Tensor<f64>> = params.iter().map(|(_, t)| t.clone()).collect();
    let (_, _, analytic) = run(&mut build, &base_values, true)?;

    let mut groups = Vec::with_capacity(params.len());
    for (gi, (name, base)) in params.iter().enumerate() {
        let analytic_g = analytic[gi].clone();
        let group_scale = analytic_g
            .as_ref()
            .map_or(0.0, |g| g.data().iter().fold(0.0f64, |m, v| m.max(v.abs())));
        let floor = opts
            .rel_floor
            .max(opts.group_scale_fraction * group_scale);
        let mut max_rel = 0.0f64;
        let mut worst = None;
        let mut excluded = 0usize;
        for j in 0..base.numel() {
            let mut work = base_values.to_vec();
            let orig = work[gi].data()[j];
            work[gi].data_mut()[j] = orig + opts.step;
            let (f_plus, sig_plus, _) = run(&mut build, &work, false)?;
            work[gi].data_mut()[j] = orig - opts.step;
            let (f_minus, sig_minus, _) = run(&mut build, &work, false)?;
            if sig_plus != sig_minus {
                excluded += 1;
                continue;
            }
            let numeric = (f_plus - f_minus) / (2.0 * opts.step);
            let a = analytic_g.as_ref().map_or(0.0, |g| g.data()[j]);
            let denom = a.abs().max(numeric.abs()).max(floor);
            let rel = (a - numeric).abs() / denom;
            if rel > max_rel {
                max_rel = rel;
                worst = Some(j);
            }
        }
        groups.push(GroupReport {
            name: name.clone(),
            elements: base.numel(),
            excluded,
            max_rel_err: max_rel,
            worst_index: worst,
        });
    }
    Ok(GradCheckReport { groups })
}
