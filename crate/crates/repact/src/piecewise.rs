//! Piecewise polynomials of degree ≤ 2 over ordered breakpoints.
//!
//! This is the inference-time form of every activation in the crate: a sorted
//! breakpoint list `b_1 < … < b_m` and `m + 1` coefficient triples
//! `(c2, c1, c0)`, segment `i` covering `[b_i, b_{i+1})` with `b_0 = −∞` and
//! `b_{m+1} = +∞`. A point exactly on a breakpoint belongs to the segment on
//! its right.
//!
//! The key operation is [`PiecewisePoly::weighted_sum`]: the linear fusion
//! that collapses a multi-branch weighted activation into a single piecewise
//! polynomial. Coefficient algebra always runs in `f64`; evaluation is
//! available in both widths through [`PwEval`].

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Element;

/// Breakpoints closer than this are merged during fusion (leftmost wins), so
/// float noise on shared constants like −3, 0, 3 cannot create micro-segments.
pub const BREAKPOINT_MERGE_EPS: f64 = 1e-9;

pub const POLY_FORMAT_VERSION: u32 = 1;

/// One quadratic segment, evaluated in Horner form `x·(x·c2 + c1) + c0`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub c2: f64,
    pub c1: f64,
    pub c0: f64,
}

impl Segment {
    pub const ZERO: Segment = Segment {
        c2: 0.0,
        c1: 0.0,
        c0: 0.0,
    };

    pub fn new(c2: f64, c1: f64, c0: f64) -> Self {
        Segment { c2, c1, c0 }
    }

    #[inline]
    pub fn eval(&self, x: f64) -> f64 {
        x * (x * self.c2 + self.c1) + self.c0
    }

    #[inline]
    pub fn derivative(&self, x: f64) -> f64 {
        2.0 * self.c2 * x + self.c1
    }

    fn is_finite(&self) -> bool {
        self.c2.is_finite() && self.c1.is_finite() && self.c0.is_finite()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PiecewisePoly {
    breakpoints: Vec<f64>,
    segments: Vec<Segment>,
}

/// Worst-case per-element cost of evaluating a poly: segment lookup compares
/// plus the Horner multiplies/adds of the densest segment.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct OpCount {
    pub compares: u32,
    pub mults: u32,
    pub adds: u32,
}

impl PiecewisePoly {
    /// Build from raw parts, validating the representation invariants:
    /// finite coefficients, strictly increasing breakpoints separated by more
    /// than [`BREAKPOINT_MERGE_EPS`], and `segments.len() == breakpoints.len() + 1`.
    pub fn new(breakpoints: Vec<f64>, segments: Vec<Segment>) -> Result<Self> {
        if segments.len() != breakpoints.len() + 1 {
            return Err(Error::invalid(format!(
                "piecewise poly needs {} segments for {} breakpoints, got {}",
                breakpoints.len() + 1,
                breakpoints.len(),
                segments.len()
            )));
        }
        if breakpoints.iter().any(|b| !b.is_finite()) {
            return Err(Error::invalid("breakpoints must be finite"));
        }
        for pair in breakpoints.windows(2) {
            if pair[1] - pair[0] <= BREAKPOINT_MERGE_EPS {
                return Err(Error::invalid(format!(
                    "breakpoints must be strictly increasing with gaps > {BREAKPOINT_MERGE_EPS:e}, got {} then {}",
                    pair[0], pair[1]
                )));
            }
        }
        if segments.iter().any(|s| !s.is_finite()) {
            return Err(Error::invalid("segment coefficients must be finite"));
        }
        Ok(PiecewisePoly {
            breakpoints,
            segments,
        })
    }

    /// `f(x) = x` everywhere: a single segment, no breakpoints.
    pub fn identity() -> Self {
        PiecewisePoly {
            breakpoints: vec![],
            segments: vec![Segment::new(0.0, 1.0, 0.0)],
        }
    }

    /// `f(x) = max(0, x)`.
    pub fn relu() -> Self {
        PiecewisePoly {
            breakpoints: vec![0.0],
            segments: vec![Segment::ZERO, Segment::new(0.0, 1.0, 0.0)],
        }
    }

    /// Leaky linear unit with slope `t` on the negative half.
    pub fn prelu(t: f64) -> Result<Self> {
        if !t.is_finite() {
            return Err(Error::invalid(format!("prelu slope must be finite, got {t}")));
        }
        Ok(PiecewisePoly {
            breakpoints: vec![0.0],
            segments: vec![Segment::new(0.0, t, 0.0), Segment::new(0.0, 1.0, 0.0)],
        })
    }

    /// 0 below −3, `x²/6 + x/2` on [−3, 3), `x` from 3 up.
    pub fn hardswish() -> Self {
        PiecewisePoly {
            breakpoints: vec![-3.0, 3.0],
            segments: vec![
                Segment::ZERO,
                Segment::new(1.0 / 6.0, 0.5, 0.0),
                Segment::new(0.0, 1.0, 0.0),
            ],
        }
    }

    pub fn breakpoints(&self) -> &[f64] {
        &self.breakpoints
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    /// Index of the segment containing `x` under the half-open convention:
    /// `x == b_i` lands in segment `i`, the one on the right.
    #[inline]
    pub fn segment_index(&self, x: f64) -> usize {
        self.breakpoints.partition_point(|&b| b <= x)
    }

    pub fn eval(&self, x: f64) -> Result<f64> {
        if !x.is_finite() {
            return Err(Error::invalid(format!("eval requires finite x, got {x}")));
        }
        Ok(self.segments[self.segment_index(x)].eval(x))
    }

    /// Right derivative at breakpoints, ordinary derivative elsewhere.
    pub fn eval_derivative(&self, x: f64) -> Result<f64> {
        if !x.is_finite() {
            return Err(Error::invalid(format!(
                "eval_derivative requires finite x, got {x}"
            )));
        }
        Ok(self.segments[self.segment_index(x)].derivative(x))
    }

    /// Value approached from the left at breakpoint `i`, i.e. the left
    /// segment evaluated at the breakpoint. Used for continuity checks.
    pub fn left_limit(&self, i: usize) -> f64 {
        self.segments[i].eval(self.breakpoints[i])
    }

    /// Linear fusion: `Σ wᵢ · pᵢ` as a single poly over the refined
    /// breakpoint union. On every interval of the refined partition the
    /// result's coefficients are the weighted sums of each input's covering
    /// segment, so evaluation distributes exactly over the terms.
    pub fn weighted_sum(terms: &[(f64, &PiecewisePoly)]) -> Result<PiecewisePoly> {
        if terms.is_empty() {
            return Err(Error::invalid("weighted_sum requires at least one term"));
        }
        if terms.iter().any(|(w, _)| !w.is_finite()) {
            return Err(Error::invalid("weighted_sum weights must be finite"));
        }

        let mut union: Vec<f64> = terms
            .iter()
            .flat_map(|(_, p)| p.breakpoints.iter().copied())
            .collect();
        union.sort_by(|a, b| a.partial_cmp(b).expect("finite breakpoints"));
        union.dedup_by(|next, kept| *next - *kept <= BREAKPOINT_MERGE_EPS);

        let mut segments = Vec::with_capacity(union.len() + 1);
        for i in 0..=union.len() {
            // A representative point inside interval i. Interval i >= 1 starts
            // at union[i-1], which itself belongs to the interval under the
            // half-open convention; the leftmost interval is unbounded below.
            let probe = if i == 0 {
                union.first().map_or(0.0, |b| b - 1.0)
            } else {
                union[i - 1]
            };
            let mut acc = Segment::ZERO;
            for (w, p) in terms {
                let s = &p.segments[p.segment_index(probe)];
                acc.c2 += w * s.c2;
                acc.c1 += w * s.c1;
                acc.c0 += w * s.c0;
            }
            segments.push(acc);
        }
        PiecewisePoly::new(union, segments)
    }

    /// Add a constant to every segment's zero-power coefficient.
    pub fn offset(&self, c0: f64) -> Result<PiecewisePoly> {
        if !c0.is_finite() {
            return Err(Error::invalid(format!("offset must be finite, got {c0}")));
        }
        let segments = self
            .segments
            .iter()
            .map(|s| Segment::new(s.c2, s.c1, s.c0 + c0))
            .collect();
        PiecewisePoly::new(self.breakpoints.clone(), segments)
    }

    /// Static worst-case cost of one `eval`: `ceil(log2(segments))` boundary
    /// compares for the lookup, then the densest segment in Horner form — a
    /// quadratic segment costs 2 mults and 2 adds, a linear one 1 and 1.
    pub fn op_count(&self) -> OpCount {
        let segs = self.segments.len() as u32;
        let compares = if segs <= 1 { 0 } else { 32 - (segs - 1).leading_zeros() };
        let (mults, adds) = self
            .segments
            .iter()
            .map(|s| {
                if s.c2 != 0.0 {
                    (2, 2)
                } else if s.c1 != 0.0 {
                    (1, 1)
                } else {
                    (0, 0)
                }
            })
            .max()
            .unwrap_or((0, 0));
        OpCount {
            compares,
            mults,
            adds,
        }
    }

    pub fn to_json(&self) -> String {
        let doc = PolyDoc {
            breakpoints: self.breakpoints.clone(),
            segments: self.segments.iter().map(|s| [s.c2, s.c1, s.c0]).collect(),
            format_version: POLY_FORMAT_VERSION,
        };
        serde_json::to_string(&doc).expect("poly serialization cannot fail")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: PolyDoc = serde_json::from_str(text)
            .map_err(|e| Error::invalid(format!("piecewise poly document: {e}")))?;
        doc.into_poly()
    }
}

/// On-disk form: `{"breakpoints": [...], "segments": [[c2,c1,c0], ...],
/// "format_version": 1}`. serde_json prints floats in shortest round-trip
/// decimal, so serialize → parse is value-exact for every finite `f64`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PolyDoc {
    pub breakpoints: Vec<f64>,
    pub segments: Vec<[f64; 3]>,
    pub format_version: u32,
}

impl PolyDoc {
    pub fn from_poly(p: &PiecewisePoly) -> Self {
        PolyDoc {
            breakpoints: p.breakpoints.clone(),
            segments: p.segments.iter().map(|s| [s.c2, s.c1, s.c0]).collect(),
            format_version: POLY_FORMAT_VERSION,
        }
    }

    pub fn into_poly(self) -> Result<PiecewisePoly> {
        if self.format_version != POLY_FORMAT_VERSION {
            return Err(Error::invalid(format!(
                "unsupported piecewise poly format_version {} (expected {POLY_FORMAT_VERSION})",
                self.format_version
            )));
        }
        PiecewisePoly::new(
            self.breakpoints,
            self.segments
                .into_iter()
                .map(|[c2, c1, c0]| Segment::new(c2, c1, c0))
                .collect(),
        )
    }
}

/// Width-specific evaluator snapshot for hot loops. No finiteness checks:
/// NaN inputs propagate NaN per ordinary float semantics.
#[derive(Debug, Clone)]
pub struct PwEval<T> {
    breakpoints: Vec<T>,
    segments: Vec<[T; 3]>,
}

impl<T: Element> PwEval<T> {
    pub fn new(poly: &PiecewisePoly) -> Self {
        PwEval {
            breakpoints: poly.breakpoints.iter().map(|&b| T::from_f64(b)).collect(),
            segments: poly
                .segments
                .iter()
                .map(|s| [T::from_f64(s.c2), T::from_f64(s.c1), T::from_f64(s.c0)])
                .collect(),
        }
    }

    #[inline]
    pub fn segment_index(&self, x: T) -> usize {
        self.breakpoints.partition_point(|&b| b <= x)
    }

    #[inline]
    pub fn eval(&self, x: T) -> T {
        let [c2, c1, c0] = self.segments[self.segment_index(x)];
        x * (x * c2 + c1) + c0
    }

    #[inline]
    pub fn derivative(&self, x: T) -> T {
        let [c2, c1, _] = self.segments[self.segment_index(x)];
        (c2 + c2) * x + c1
    }

    pub fn map_in_place(&self, xs: &mut [T]) {
        for x in xs {
            *x = self.eval(*x);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_evaluates_everywhere() {
        let p = PiecewisePoly::identity();
        assert_eq!(p.eval(5.0).unwrap(), 5.0);
        assert_eq!(p.eval(-3.0).unwrap(), -3.0);
        assert_eq!(p.eval_derivative(0.7).unwrap(), 1.0);
    }

    #[test]
    fn relu_halves() {
        let p = PiecewisePoly::relu();
        assert_eq!(p.eval(-2.0).unwrap(), 0.0);
        assert_eq!(p.eval(2.0).unwrap(), 2.0);
        // breakpoint belongs to the right segment: 1·0 = 0
        assert_eq!(p.eval(0.0).unwrap(), 0.0);
        assert_eq!(p.segment_index(0.0), 1);
        assert_eq!(p.eval_derivative(-1.0).unwrap(), 0.0);
    }

    #[test]
    fn prelu_slope_and_relu_degeneration() {
        let p = PiecewisePoly::prelu(0.25).unwrap();
        assert_eq!(p.eval(-4.0).unwrap(), -1.0);
        assert_eq!(p.eval(4.0).unwrap(), 4.0);
        let degenerate = PiecewisePoly::prelu(0.0).unwrap();
        assert_eq!(degenerate, PiecewisePoly::relu());
        assert!(PiecewisePoly::prelu(f64::NAN).is_err());
    }

    #[test]
    fn hardswish_segments() {
        let p = PiecewisePoly::hardswish();
        assert_eq!(p.eval(3.0).unwrap(), 3.0);
        assert_eq!(p.eval(-3.0).unwrap(), 0.0);
        assert!((p.eval(1.0).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(p.eval(-10.0).unwrap(), 0.0);
        assert_eq!(p.eval_derivative(0.0).unwrap(), 0.5);
    }

    #[test]
    fn eval_rejects_non_finite() {
        let p = PiecewisePoly::hardswish();
        assert!(p.eval(f64::NAN).is_err());
        assert!(p.eval(f64::INFINITY).is_err());
        assert!(p.eval_derivative(f64::NEG_INFINITY).is_err());
    }

    #[test]
    fn weighted_sum_single_unit_term_is_identity() {
        let id = PiecewisePoly::identity();
        let fused = PiecewisePoly::weighted_sum(&[(1.0, &id)]).unwrap();
        assert_eq!(fused, id);
    }

    #[test]
    fn weighted_sum_rejects_empty_and_non_finite() {
        assert!(PiecewisePoly::weighted_sum(&[]).is_err());
        let id = PiecewisePoly::identity();
        assert!(PiecewisePoly::weighted_sum(&[(f64::NAN, &id)]).is_err());
    }

    #[test]
    fn uniform_four_branch_fusion_table() {
        // 0.25 · (Identity + ReLU + PReLU(0.25) + HardSwish)
        let prelu = PiecewisePoly::prelu(0.25).unwrap();
        let fused = PiecewisePoly::weighted_sum(&[
            (0.25, &PiecewisePoly::identity()),
            (0.25, &PiecewisePoly::relu()),
            (0.25, &prelu),
            (0.25, &PiecewisePoly::hardswish()),
        ])
        .unwrap();
        assert_eq!(fused.breakpoints(), &[-3.0, 0.0, 3.0]);
        let s = fused.segments();
        let close = |a: f64, b: f64| (a - b).abs() < 1e-12;
        // x < −3
        assert!(close(s[0].c2, 0.0) && close(s[0].c1, 0.3125) && close(s[0].c0, 0.0));
        // −3 ≤ x < 0
        assert!(close(s[1].c2, 1.0 / 24.0) && close(s[1].c1, 0.4375) && close(s[1].c0, 0.0));
        // 0 ≤ x < 3
        assert!(close(s[2].c2, 1.0 / 24.0) && close(s[2].c1, 0.875) && close(s[2].c0, 0.0));
        // x ≥ 3
        assert!(close(s[3].c2, 0.0) && close(s[3].c1, 1.0) && close(s[3].c0, 0.0));
        // Spot value: 1/24 + 7/8 at x = 1.
        assert!((fused.eval(1.0).unwrap() - 0.9166666666666666).abs() < 1e-15);
    }

    #[test]
    fn pure_hardswish_weights_reproduce_hardswish() {
        let prelu = PiecewisePoly::prelu(0.25).unwrap();
        let fused = PiecewisePoly::weighted_sum(&[
            (0.0, &PiecewisePoly::identity()),
            (0.0, &PiecewisePoly::relu()),
            (0.0, &prelu),
            (1.0, &PiecewisePoly::hardswish()),
        ])
        .unwrap();
        let hs = PiecewisePoly::hardswish();
        // Same breakpoints as hardswish plus the PReLU/ReLU knee at 0, which
        // carries zero-weight coefficients identical to its neighbours.
        for &x in &[-5.0, -3.0, -1.0, 0.0, 0.5, 1.0, 2.99, 3.0, 7.0] {
            assert_eq!(fused.eval(x).unwrap(), hs.eval(x).unwrap());
        }
        assert_eq!(fused.segments()[1], fused.segments()[2]);
    }

    #[test]
    fn merge_tolerance_collapses_near_duplicates() {
        let a = PiecewisePoly::new(vec![0.0], vec![Segment::ZERO, Segment::new(0.0, 1.0, 0.0)])
            .unwrap();
        let b = PiecewisePoly::new(
            vec![1e-10],
            vec![Segment::ZERO, Segment::new(0.0, 2.0, 0.0)],
        )
        .unwrap();
        let fused = PiecewisePoly::weighted_sum(&[(1.0, &a), (1.0, &b)]).unwrap();
        assert_eq!(fused.breakpoints(), &[0.0]);
        assert_eq!(fused.segments().len(), 2);
    }

    #[test]
    fn constructor_rejects_malformed_input() {
        assert!(PiecewisePoly::new(vec![1.0, 1.0], vec![Segment::ZERO; 3]).is_err());
        assert!(PiecewisePoly::new(vec![2.0, 1.0], vec![Segment::ZERO; 3]).is_err());
        assert!(PiecewisePoly::new(vec![0.0], vec![Segment::ZERO; 3]).is_err());
        assert!(PiecewisePoly::new(vec![f64::NAN], vec![Segment::ZERO; 2]).is_err());
        assert!(
            PiecewisePoly::new(vec![0.0], vec![Segment::new(f64::NAN, 0.0, 0.0), Segment::ZERO])
                .is_err()
        );
    }

    #[test]
    fn op_count_examples() {
        let id = PiecewisePoly::identity();
        assert_eq!(
            id.op_count(),
            OpCount {
                compares: 0,
                mults: 1,
                adds: 1
            }
        );
        let hs = PiecewisePoly::hardswish();
        assert_eq!(
            hs.op_count(),
            OpCount {
                compares: 2,
                mults: 2,
                adds: 2
            }
        );
        let relu = PiecewisePoly::relu();
        assert_eq!(
            relu.op_count(),
            OpCount {
                compares: 1,
                mults: 1,
                adds: 1
            }
        );
    }

    #[test]
    fn json_round_trip_is_value_exact() {
        let prelu = PiecewisePoly::prelu(0.1234567890123456789).unwrap();
        let fused = PiecewisePoly::weighted_sum(&[
            (0.7071067811865476, &PiecewisePoly::hardswish()),
            (-1.2345678901234567, &prelu),
        ])
        .unwrap();
        let text = fused.to_json();
        assert!(text.contains("\"format_version\":1"));
        let back = PiecewisePoly::from_json(&text).unwrap();
        assert_eq!(fused, back);
    }

    #[test]
    fn json_rejects_wrong_version_and_bad_shape() {
        let mut doc: serde_json::Value =
            serde_json::from_str(&PiecewisePoly::hardswish().to_json()).unwrap();
        doc["format_version"] = 2.into();
        assert!(PiecewisePoly::from_json(&doc.to_string()).is_err());
        assert!(PiecewisePoly::from_json("{\"breakpoints\":[0.0],\"segments\":[[0,0,0]],\"format_version\":1}").is_err());
    }

    #[test]
    fn offset_shifts_every_segment() {
        let p = PiecewisePoly::hardswish().offset(0.5).unwrap();
        assert_eq!(p.eval(-10.0).unwrap(), 0.5);
        assert_eq!(p.eval(10.0).unwrap(), 10.5);
        assert!(PiecewisePoly::identity().offset(f64::INFINITY).is_err());
    }

    #[test]
    fn f32_evaluator_tracks_f64_form() {
        let prelu = PiecewisePoly::prelu(0.25).unwrap();
        let fused = PiecewisePoly::weighted_sum(&[
            (0.25, &PiecewisePoly::identity()),
            (0.25, &PiecewisePoly::relu()),
            (0.25, &prelu),
            (0.25, &PiecewisePoly::hardswish()),
        ])
        .unwrap();
        let ev = PwEval::<f32>::new(&fused);
        for i in 0..100 {
            let x = -10.0 + 0.2 * i as f64;
            let want = fused.eval(x).unwrap();
            assert!((ev.eval(x as f32) as f64 - want).abs() < 1e-5);
        }
        // NaN propagates instead of erroring in the hot path.
        assert!(ev.eval(f32::NAN).is_nan());
    }
}
