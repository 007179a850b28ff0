//! Gaussian-path schedulers `(α_t, σ_t)`.
//!
//! A scheduler defines the conditional path `N(x | α_t x_1, σ_t² I)`; the
//! signal-to-noise ratio `α_t/σ_t` is strictly increasing for every kind
//! provided here, which makes SNR inversion (and so scheduler changes)
//! well defined.

use std::f64::consts::FRAC_PI_2;

use crate::error::{Error, Result};
use crate::scalar::{Real, Scalar};
use crate::transform::TransformedScheduler;

/// Interior clamp used wherever finite SNR or `σ > 0` is required.
pub const CLAMP_EPS: f64 = 1e-6;

/// Lower end of the analytic continuation used for VP (`t < 0` means
/// `s = 1 - t > 1` in `ξ_s`). Far enough that `α` is below `1e-150`.
const VP_EXTENDED_START: f64 = -5.0;

/// Scheduler value and time derivatives at one time.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SchedulePoint<S> {
    pub alpha: S,
    pub sigma: S,
    pub dalpha: S,
    pub dsigma: S,
}

impl<S: Scalar> SchedulePoint<S> {
    pub fn snr(&self) -> S {
        self.alpha / self.sigma
    }

    /// `α̇σ - ασ̇`, positive exactly when SNR increases.
    pub fn snr_numerator(&self) -> S {
        self.dalpha * self.sigma - self.alpha * self.dsigma
    }

    pub fn norm_sq(&self) -> S {
        self.alpha * self.alpha + self.sigma * self.sigma
    }
}

/// Validation mode for [`Scheduler::validate`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Validation {
    /// Training-scheduler endpoint conditions plus SNR monotonicity.
    Strict,
    /// SNR monotonicity only (post-training targets such as EDM).
    Relaxed,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Scheduler<R: Real> {
    /// Conditional optimal transport: `(t, 1 - t)`.
    Ot,
    /// Cosine: `(sin(πt/2), cos(πt/2))`.
    CosineCs,
    /// Variance preserving with `α_t = ξ_{1-t}`, `σ_t = sqrt(1 - ξ²_{1-t})`,
    /// `ξ_s = exp(-s²(B-b)/4 - sb/2)`.
    Vp { big_b: R, small_b: R },
    /// Variance exploding: `(1, σ_max(1 - t))`.
    EdmVe { sigma_max: R },
    /// `(α_t, σ0·σ_t)` on top of another scheduler.
    ScaledSigma { base: Box<Scheduler<R>>, sigma0: R },
    /// Scheduler induced by a scale-time transform of a source scheduler.
    Custom(Box<TransformedScheduler<R>>),
}

impl<R: Real> Scheduler<R> {
    pub fn vp() -> Self {
        Scheduler::Vp { big_b: R::lit(20.0), small_b: R::lit(0.1) }
    }

    pub fn edm_ve() -> Self {
        Scheduler::EdmVe { sigma_max: R::lit(80.0) }
    }

    pub fn scaled_sigma(base: Scheduler<R>, sigma0: R) -> Self {
        Scheduler::ScaledSigma { base: Box::new(base), sigma0 }
    }

    pub fn name(&self) -> String {
        match self {
            Scheduler::Ot => "ot".into(),
            Scheduler::CosineCs => "cosine".into(),
            Scheduler::Vp { .. } => "vp".into(),
            Scheduler::EdmVe { .. } => "edm_ve".into(),
            Scheduler::ScaledSigma { base, sigma0 } => format!("scaled_sigma({},{})", base.name(), sigma0),
            Scheduler::Custom(c) => format!("custom({})", c.source().name()),
        }
    }

    /// Left end of the time interval on which the closed form is usable.
    /// `0` except for VP, whose formula continues analytically to `t < 0`.
    pub fn extended_start(&self) -> R {
        match self {
            Scheduler::Vp { .. } => R::lit(VP_EXTENDED_START),
            Scheduler::ScaledSigma { base, .. } => base.extended_start(),
            _ => R::zero(),
        }
    }

    /// `(α_t, σ_t, α̇_t, σ̇_t)` for `t ∈ [0, 1]`.
    pub fn eval<S: Scalar<Real = R>>(&self, t: S) -> Result<SchedulePoint<S>> {
        let tp = t.primal();
        if !tp.is_finite() || tp < R::zero() || tp > R::one() {
            return Err(Error::Domain(format!("scheduler time {tp} outside [0, 1]")));
        }
        Ok(self.point(t))
    }

    /// Evaluation without the `[0, 1]` check; valid on `[extended_start, 1]`.
    pub fn point<S: Scalar<Real = R>>(&self, t: S) -> SchedulePoint<S> {
        match self {
            Scheduler::Ot => SchedulePoint {
                alpha: t,
                sigma: S::one() - t,
                dalpha: S::one(),
                dsigma: -S::one(),
            },
            Scheduler::CosineCs => {
                let w = S::lit(FRAC_PI_2);
                let (sin, cos) = (w * t).sin_cos();
                // cos(π/2) is 6e-17 in floating point; pin the endpoint.
                let cos = if t.primal() == R::one() { cos - S::from_real(cos.primal()) } else { cos };
                SchedulePoint { alpha: sin, sigma: cos, dalpha: w * cos, dsigma: -w * sin }
            }
            Scheduler::Vp { big_b, small_b } => {
                let bb = S::from_real(*big_b);
                let sb = S::from_real(*small_b);
                let s = S::one() - t;
                let half = S::lit(0.5);
                let log_xi = -S::lit(0.25) * s * s * (bb - sb) - half * s * sb;
                let xi = log_xi.exp();
                // dξ/ds = ξ·(-s(B-b)/2 - b/2) and t = 1 - s.
                let dalpha = xi * (half * s * (bb - sb) + half * sb);
                let sigma = (-(log_xi + log_xi).exp_m1()).sqrt();
                let dsigma = if sigma.primal() > R::zero() {
                    -xi * dalpha / sigma
                } else {
                    S::neg_infinity()
                };
                SchedulePoint { alpha: xi, sigma, dalpha, dsigma }
            }
            Scheduler::EdmVe { sigma_max } => {
                let m = S::from_real(*sigma_max);
                SchedulePoint { alpha: S::one(), sigma: m * (S::one() - t), dalpha: S::zero(), dsigma: -m }
            }
            Scheduler::ScaledSigma { base, sigma0 } => {
                let p = base.point(t);
                let k = S::from_real(*sigma0);
                SchedulePoint { alpha: p.alpha, sigma: k * p.sigma, dalpha: p.dalpha, dsigma: k * p.dsigma }
            }
            Scheduler::Custom(c) => c.point(t),
        }
    }

    pub fn snr(&self, t: R) -> Result<R> {
        Ok(self.eval(t)?.snr())
    }

    /// `ln(α_t/σ_t)`, `-∞` where `α = 0` and `+∞` where `σ = 0`.
    pub fn log_snr(&self, t: R) -> R {
        let p = self.point(t);
        p.alpha.ln() - p.sigma.ln()
    }

    /// Time with `snr(t) = v` for `v` in the open interval `(snr(ε), snr(1-ε))`.
    pub fn snr_inverse(&self, v: R) -> Result<R> {
        let eps = R::lit(CLAMP_EPS);
        let lo = self.snr(eps)?;
        let hi = self.snr(R::one() - eps)?;
        if !(v > lo && v < hi) {
            return Err(Error::Range {
                what: format!("snr inverse for {}", self.name()),
                requested: format!("{v}"),
                lo: lo.to_f64().unwrap_or(f64::NAN),
                hi: hi.to_f64().unwrap_or(f64::NAN),
            });
        }
        if matches!(self, Scheduler::Ot) {
            return Ok(v / (R::one() + v));
        }
        self.invert_log_snr(v.ln(), eps, R::one() - eps)
    }

    /// Solve `log_snr(t) = target` by bisection on `[lo, hi]`.
    ///
    /// Infinite targets map to the endpoint where the log-SNR is infinite.
    pub(crate) fn invert_log_snr(&self, target: R, lo: R, hi: R) -> Result<R> {
        let f_lo = self.log_snr(lo);
        let f_hi = self.log_snr(hi);
        if target == R::neg_infinity() && f_lo == R::neg_infinity() {
            return Ok(lo);
        }
        if target == R::infinity() && f_hi == R::infinity() {
            return Ok(hi);
        }
        if target.is_nan() || target < f_lo || target > f_hi {
            return Err(Error::Range {
                what: format!("log-snr inverse for {}", self.name()),
                requested: format!("{target}"),
                lo: f_lo.to_f64().unwrap_or(f64::NAN),
                hi: f_hi.to_f64().unwrap_or(f64::NAN),
            });
        }
        let (mut a, mut b) = (lo, hi);
        for _ in 0..200 {
            let mid = (a + b) * R::lit(0.5);
            if mid <= a || mid >= b {
                break;
            }
            if self.log_snr(mid) < target {
                a = mid;
            } else {
                b = mid;
            }
        }
        let ea = (self.log_snr(a) - target).abs();
        let eb = (self.log_snr(b) - target).abs();
        Ok(if ea.is_nan() || eb <= ea { b } else { a })
    }

    /// Endpoint conditions (strict) and SNR monotonicity (both modes).
    pub fn validate(&self, mode: Validation) -> Result<()> {
        if mode == Validation::Strict {
            let tol = R::lit(1e-15);
            let alpha0_tol = match self {
                // ξ_1 = exp(-(B-b)/4 - b/2) ≈ 6.6e-3 for the standard constants.
                Scheduler::Vp { .. } => R::lit(1e-2),
                Scheduler::Ot | Scheduler::CosineCs => tol,
                _ => {
                    return Err(Error::Domain(format!(
                        "{} is not a training scheduler (use relaxed validation)",
                        self.name()
                    )))
                }
            };
            let p0 = self.point(R::zero());
            let p1 = self.point(R::one());
            if p0.alpha.abs() > alpha0_tol
                || p1.sigma.abs() > tol
                || (p1.alpha - R::one()).abs() > tol
                || p0.sigma <= R::zero()
            {
                return Err(Error::Domain(format!(
                    "{} violates endpoint conditions: alpha_0={}, sigma_0={}, alpha_1={}, sigma_1={}",
                    self.name(),
                    p0.alpha,
                    p0.sigma,
                    p1.alpha,
                    p1.sigma
                )));
            }
        }
        let n = 100;
        let mut prev = R::neg_infinity();
        for i in 1..=n {
            let t = R::lit(i as f64 / (n + 1) as f64);
            let l = self.log_snr(t);
            if !(l > prev) {
                return Err(Error::Domain(format!("{}: snr not strictly increasing at t={t}", self.name())));
            }
            prev = l;
        }
        Ok(())
    }
}
