//! Scale-time transforms `x̄(r) = s_r·x(t_r)`.
//!
//! A transform turns a field `u` into
//! `ū_r(x) = (ṡ_r/s_r)·x + ṫ_r·s_r·u_{t_r}(x/s_r)`, and for schedulers with
//! strictly increasing SNR it is equivalent to a scheduler change
//! `(α, σ) → (ᾱ, σ̄)` with `ᾱ_r = s_r α_{t_r}`, `σ̄_r = s_r σ_{t_r}`.

use std::collections::HashMap;
use std::fmt;
use std::sync::{Arc, RwLock};

use crate::error::{Error, Result};
use crate::field::{counted, Parameterization, SharedField, SmoothField};
use crate::scalar::{Real, Scalar};
use crate::scheduler::{SchedulePoint, Scheduler, CLAMP_EPS};

/// `(s_r, t_r, ṡ_r, ṫ_r)` at one `r`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StPoint<S> {
    pub s: S,
    pub t: S,
    pub ds: S,
    pub dt: S,
}

impl<S: Scalar> StPoint<S> {
    fn is_finite(&self) -> bool {
        self.s.is_finite() && self.t.is_finite() && self.ds.is_finite() && self.dt.is_finite()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum STTransform<R: Real> {
    Identity,
    /// `s ≡ c`, `t_r = r`.
    Scale(R),
    /// `t_r = snr⁻¹(s̄nr(r))`, `s_r = σ̄_r/σ_{t_r}`.
    SchedulerChange(Arc<SchedulerChange<R>>),
    /// Exponential-integrator scale `s_r = 1/ψ_r` with `t_r = r`.
    Exponential { param: Parameterization, scheduler: Scheduler<R> },
    /// Exponential-integrator scale with the time warp that makes
    /// `ρ = e^{ηλ}` affine in `r` (`ρ = σ/α` for ε-prediction, `α/σ` for
    /// x-prediction). Euler on this transform is DDIM.
    ExponentialSnrLinear { param: Parameterization, scheduler: Scheduler<R>, rho_start: R, rho_end: R },
}

/// Scheduler change with a memoized time map.
pub struct SchedulerChange<R: Real> {
    source: Scheduler<R>,
    target: Scheduler<R>,
    cache: RwLock<HashMap<u64, R>>,
}

impl<R: Real> SchedulerChange<R> {
    pub fn source(&self) -> &Scheduler<R> {
        &self.source
    }

    pub fn target(&self) -> &Scheduler<R> {
        &self.target
    }

    /// `t_r` for a real `r`, by bisection on the source log-SNR.
    fn time_of(&self, r: R) -> Result<R> {
        let key = r.to_f64().unwrap_or(f64::NAN).to_bits();
        if let Some(&t) = self.cache.read().expect("cache poisoned").get(&key) {
            return Ok(t);
        }
        let t = if r == R::zero() && self.target.point(r).alpha == R::zero() && self.source.point(R::zero()).alpha == R::zero() {
            R::zero()
        } else if r == R::one() {
            R::one()
        } else {
            self.source.invert_log_snr(self.target.log_snr(r), self.source.extended_start(), R::one())?
        };
        self.cache.write().expect("cache poisoned").insert(key, t);
        Ok(t)
    }

    fn point<S: Scalar<Real = R>>(&self, r: S) -> Result<StPoint<S>> {
        let rp = r.primal();
        let tp = self.time_of(rp)?;
        let tgt = self.target.point(r);
        let src_real = self.source.point(tp);
        let tgt_real = self.target.point(rp);
        let s_real = (tgt_real.norm_sq() / src_real.norm_sq()).sqrt();
        let slope = tgt_real.snr_numerator() / (s_real * s_real * src_real.snr_numerator());
        let t = r.chain(tp, slope);
        let src = self.source.point(t);
        Ok(change_point(&tgt, &src, t))
    }
}

/// Scale and derivatives of a scheduler change, given the target point at
/// `r` and the source point at `t_r` (both carrying any tangents).
fn change_point<S: Scalar>(tgt: &SchedulePoint<S>, src: &SchedulePoint<S>, t: S) -> StPoint<S> {
    let n = src.norm_sq();
    let s = (tgt.norm_sq() / n).sqrt();
    let dt = tgt.snr_numerator() / (s * s * src.snr_numerator());
    let ds = (tgt.dalpha * src.alpha + tgt.dsigma * src.sigma
        - s * dt * (src.alpha * src.dalpha + src.sigma * src.dsigma))
        / n;
    StPoint { s, t, ds, dt }
}

impl<R: Real> Clone for SchedulerChange<R> {
    fn clone(&self) -> Self {
        let cache = self.cache.read().expect("cache poisoned").clone();
        Self { source: self.source.clone(), target: self.target.clone(), cache: RwLock::new(cache) }
    }
}

impl<R: Real> PartialEq for SchedulerChange<R> {
    fn eq(&self, o: &Self) -> bool {
        self.source == o.source && self.target == o.target
    }
}

impl<R: Real> fmt::Debug for SchedulerChange<R> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SchedulerChange").field("source", &self.source).field("target", &self.target).finish()
    }
}

fn psi<S: Scalar>(param: Parameterization, p: &SchedulePoint<S>) -> (S, S) {
    match param {
        Parameterization::XPred => (p.sigma, p.dsigma),
        _ => (p.alpha, p.dalpha),
    }
}

/// `ρ = e^{ηλ}` for the exponential-integrator parameterization.
fn rho<R: Real>(param: Parameterization, p: &SchedulePoint<R>) -> R {
    match param {
        Parameterization::XPred => p.alpha / p.sigma,
        _ => p.sigma / p.alpha,
    }
}

/// `dt/dr` of the affine-ρ time warp with `ρ_1 - ρ_0 = span`.
fn warp_rate<S: Scalar>(param: Parameterization, span: S, p: &SchedulePoint<S>) -> S {
    let l = p.snr_numerator();
    match param {
        Parameterization::XPred => span * p.sigma * p.sigma / l,
        _ => -span * p.alpha * p.alpha / l,
    }
}

impl<R: Real> STTransform<R> {
    fn raw_point<S: Scalar<Real = R>>(&self, r: S) -> Result<StPoint<S>> {
        match self {
            STTransform::Identity => Ok(StPoint { s: S::one(), t: r, ds: S::zero(), dt: S::one() }),
            STTransform::Scale(c) => Ok(StPoint { s: S::from_real(*c), t: r, ds: S::zero(), dt: S::one() }),
            STTransform::SchedulerChange(c) => c.point(r),
            STTransform::Exponential { param, scheduler } => {
                let (v, dv) = psi(*param, &scheduler.point(r));
                Ok(StPoint { s: v.recip(), t: r, ds: -dv / (v * v), dt: S::one() })
            }
            STTransform::ExponentialSnrLinear { param, scheduler, rho_start, rho_end } => {
                let rp = r.primal();
                let span = *rho_end - *rho_start;
                let tp = if rp == R::zero() {
                    R::zero()
                } else if rp == R::one() {
                    R::one()
                } else {
                    let target = *rho_start + span * rp;
                    // ρ = e^{ηλ}: λ = -ln ρ for ε-prediction, ln ρ for x-prediction.
                    let lambda = match param {
                        Parameterization::XPred => target.ln(),
                        _ => -target.ln(),
                    };
                    scheduler.invert_log_snr(lambda, R::zero(), R::one())?
                };
                let slope = warp_rate(*param, span, &scheduler.point(tp));
                let t = r.chain(tp, slope);
                let p = scheduler.point(t);
                let dt = warp_rate(*param, S::from_real(span), &p);
                let (v, dv) = psi(*param, &p);
                Ok(StPoint { s: v.recip(), t, ds: -dv * dt / (v * v), dt })
            }
        }
    }

    /// `(s_r, t_r, ṡ_r, ṫ_r)` for `r ∈ [0, 1]`.
    ///
    /// Where a derivative is singular at an endpoint (σ = 0 with infinite
    /// σ̇, as for VP at `t = 1`) the derivatives are taken at the nearest
    /// point of `[ε, 1-ε]`; values stay exact.
    pub fn eval<S: Scalar<Real = R>>(&self, r: S) -> Result<StPoint<S>> {
        let rp = r.primal();
        if !rp.is_finite() || rp < R::zero() || rp > R::one() {
            return Err(Error::Domain(format!("transform time {rp} outside [0, 1]")));
        }
        let mut p = self.raw_point(r)?;
        if p.is_finite() {
            return Ok(p);
        }
        let eps = R::lit(CLAMP_EPS);
        let clamped = rp.max(eps).min(R::one() - eps);
        let q = self.raw_point(r + S::from_real(clamped - rp))?;
        if !(p.s.is_finite() && p.s > S::zero()) {
            p.s = q.s;
        }
        p.ds = q.ds;
        p.dt = q.dt;
        if !p.is_finite() {
            return Err(Error::Domain(format!("transform singular at r = {rp}")));
        }
        Ok(p)
    }

    /// `t` at `r = 0`. Zero for transforms usable as solver embeddings.
    pub fn start_time(&self) -> Result<R> {
        Ok(self.eval(R::zero())?.t)
    }

    pub fn scale_at(&self, r: R) -> Result<R> {
        Ok(self.eval(r)?.s)
    }

    /// Check `t_1 = 1`, `s > 0` and strict increase of `t` on a 100-point
    /// grid; `t_0 = 0` is required only when `require_zero_start`.
    pub fn validate(&self, require_zero_start: bool) -> Result<()> {
        let p0 = self.eval(R::zero())?;
        let p1 = self.eval(R::one())?;
        if require_zero_start && p0.t != R::zero() {
            return Err(Error::Domain(format!("transform starts at t = {}, expected 0", p0.t)));
        }
        if (p1.t - R::one()).abs() > R::lit(1e-12) {
            return Err(Error::Domain(format!("transform ends at t = {}, expected 1", p1.t)));
        }
        let mut prev = R::neg_infinity();
        for i in 0..=100 {
            let p = self.eval(R::lit(i as f64 / 100.0))?;
            if !(p.s > R::zero()) || !(p.t > prev) {
                return Err(Error::Domain(format!("transform not a valid scale-time map near r = {}", i as f64 / 100.0)));
            }
            prev = p.t;
        }
        Ok(())
    }

    pub fn name(&self) -> String {
        match self {
            STTransform::Identity => "identity".into(),
            STTransform::Scale(c) => format!("scale({c})"),
            STTransform::SchedulerChange(c) => format!("{}->{}", c.source.name(), c.target.name()),
            STTransform::Exponential { param, scheduler } => format!("ei({param},{})", scheduler.name()),
            STTransform::ExponentialSnrLinear { param, scheduler, .. } => format!("ei-lin({param},{})", scheduler.name()),
        }
    }
}

fn is_identity_change<R: Real>(source: &Scheduler<R>, target: &Scheduler<R>) -> bool {
    if source == target {
        return true;
    }
    matches!(target, Scheduler::ScaledSigma { base, sigma0 } if **base == *source && *sigma0 == R::one())
}

/// Scale-time transform realising the scheduler change `source → target`.
pub fn st_from_scheduler_change<R: Real>(source: &Scheduler<R>, target: &Scheduler<R>) -> Result<STTransform<R>> {
    if is_identity_change(source, target) {
        return Ok(STTransform::Identity);
    }
    let eps = R::lit(CLAMP_EPS);
    let (lo, hi) = (target.log_snr(eps), target.log_snr(R::one() - eps));
    let (src_lo, src_hi) = (source.log_snr(source.extended_start()), source.log_snr(R::one()));
    if !(lo >= src_lo && hi <= src_hi) {
        let f = |v: R| v.exp().to_f64().unwrap_or(f64::NAN);
        return Err(Error::Range {
            what: format!(
                "target {} snr range [{}, {}] on the clamped interval exceeds source {}",
                target.name(),
                f(lo),
                f(hi),
                source.name()
            ),
            requested: format!("[{}, {}]", f(lo), f(hi)),
            lo: f(src_lo),
            hi: f(src_hi),
        });
    }
    Ok(STTransform::SchedulerChange(Arc::new(SchedulerChange {
        source: source.clone(),
        target: target.clone(),
        cache: RwLock::new(HashMap::new()),
    })))
}

/// Scheduler `(s_r α_{t_r}, s_r σ_{t_r})` induced by a transform.
#[derive(Clone, Debug, PartialEq)]
pub struct TransformedScheduler<R: Real> {
    source: Scheduler<R>,
    transform: STTransform<R>,
}

impl<R: Real> TransformedScheduler<R> {
    pub fn source(&self) -> &Scheduler<R> {
        &self.source
    }

    pub fn transform(&self) -> &STTransform<R> {
        &self.transform
    }

    pub(crate) fn point<S: Scalar<Real = R>>(&self, r: S) -> SchedulePoint<S> {
        let Ok(p) = self.transform.eval(r) else {
            let nan = S::nan();
            return SchedulePoint { alpha: nan, sigma: nan, dalpha: nan, dsigma: nan };
        };
        let q = self.source.point(p.t);
        SchedulePoint {
            alpha: p.s * q.alpha,
            sigma: p.s * q.sigma,
            dalpha: p.ds * q.alpha + p.s * q.dalpha * p.dt,
            dsigma: p.ds * q.sigma + p.s * q.dsigma * p.dt,
        }
    }
}

/// Left-to-right direction of the conversion: the scheduler a transform
/// produces from `source`.
pub fn scheduler_from_st<R: Real>(transform: &STTransform<R>, source: &Scheduler<R>) -> Scheduler<R> {
    Scheduler::Custom(Box::new(TransformedScheduler { source: source.clone(), transform: transform.clone() }))
}

/// The field `ū` generating the transformed trajectories.
pub struct TransformedField<R: Real> {
    inner: SharedField<R>,
    transform: STTransform<R>,
}

impl<R: Real> TransformedField<R> {
    pub fn transform(&self) -> &STTransform<R> {
        &self.transform
    }
}

impl<R: Real> SmoothField<R> for TransformedField<R> {
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn eval_generic<S: Scalar<Real = R>>(&self, r: S, x: &[S], out: &mut [S]) -> Result<()> {
        let p = self.transform.eval(r)?;
        let y: Vec<S> = x.iter().map(|&v| v / p.s).collect();
        S::eval_field(&*self.inner, p.t, &y, out)?;
        let rate = p.ds / p.s;
        let gain = p.dt * p.s;
        for (o, &xi) in out.iter_mut().zip(x) {
            *o = rate * xi + gain * *o;
        }
        Ok(())
    }

    fn name(&self) -> String {
        format!("st[{}]({})", self.transform.name(), self.inner.name())
    }

    fn cost(&self) -> u64 {
        self.inner.cost()
    }
}

/// `ū_r(x) = (ṡ_r/s_r)·x + ṫ_r·s_r·u_{t_r}(x/s_r)`. Samples are recovered
/// as `x(1) = x̄(1)/s_1`.
pub fn apply_st_to_field<R: Real>(u: SharedField<R>, transform: &STTransform<R>) -> SharedField<R> {
    if *transform == STTransform::Identity {
        return u;
    }
    counted(TransformedField { inner: u, transform: transform.clone() })
}

/// Preconditioning: change `scheduler` to `(α, σ0·σ)`. Returns the
/// transformed field and the transform (for `s_0`, `s_1`).
pub fn precondition<R: Real>(u: SharedField<R>, scheduler: &Scheduler<R>, sigma0: R) -> Result<(SharedField<R>, STTransform<R>)> {
    if !(sigma0 > R::zero()) || !sigma0.is_finite() {
        return Err(Error::Config(format!("sigma0 must be positive, got {sigma0}")));
    }
    let target = Scheduler::scaled_sigma(scheduler.clone(), sigma0);
    let transform = st_from_scheduler_change(scheduler, &target)?;
    Ok((apply_st_to_field(u, &transform), transform))
}

fn check_param(param: Parameterization) -> Result<()> {
    if param == Parameterization::Velocity {
        return Err(Error::Config("exponential integrators need eps_pred or x_pred".into()));
    }
    Ok(())
}

/// Exponential-integrator transform `s_r = 1/ψ_r`, `t_r = r` with
/// `ψ = α` (ε-prediction) or `σ` (x-prediction).
pub fn ei_transform<R: Real>(param: Parameterization, scheduler: &Scheduler<R>) -> Result<STTransform<R>> {
    check_param(param)?;
    let eps = R::lit(CLAMP_EPS);
    for i in 0..=100 {
        let r = eps + (R::one() - eps - eps) * R::lit(i as f64 / 100.0);
        let (v, _) = psi(param, &scheduler.point(r));
        if !(v.abs() > R::zero()) {
            return Err(Error::Domain(format!("psi vanishes at r = {r} for {}", scheduler.name())));
        }
    }
    Ok(STTransform::Exponential { param, scheduler: scheduler.clone() })
}

/// Exponential-integrator transform with the DDIM time warp: same scale as
/// [`ei_transform`], with `t_r` chosen so `e^{ηλ(t_r)}` is affine in `r`.
/// Requires `e^{ηλ}` finite at both ends of `[0, 1]`.
pub fn ei_transform_snr_linear<R: Real>(param: Parameterization, scheduler: &Scheduler<R>) -> Result<STTransform<R>> {
    ei_transform(param, scheduler)?;
    let rho_start = rho(param, &scheduler.point(R::zero()));
    let rho_end = rho(param, &scheduler.point(R::one()));
    if !rho_start.is_finite() || !rho_end.is_finite() || rho_start == rho_end {
        return Err(Error::Domain(format!(
            "exp(eta*lambda) must be finite and non-constant on [0, 1] for {} ({param}): {rho_start}..{rho_end}",
            scheduler.name()
        )));
    }
    Ok(STTransform::ExponentialSnrLinear { param, scheduler: scheduler.clone(), rho_start, rho_end })
}

/// The `r`-grid on which Euler over [`ei_transform_snr_linear`] visits the
/// given `t`-grid.
pub fn ddim_r_grid<R: Real>(transform: &STTransform<R>, t_grid: &[R]) -> Result<Vec<R>> {
    let STTransform::ExponentialSnrLinear { param, scheduler, rho_start, rho_end } = transform else {
        return Err(Error::Config("ddim_r_grid needs an ExponentialSnrLinear transform".into()));
    };
    let n = t_grid.len();
    Ok(t_grid
        .iter()
        .enumerate()
        .map(|(i, &t)| {
            if i == 0 && t == R::zero() {
                R::zero()
            } else if i + 1 == n && t == R::one() {
                R::one()
            } else {
                (rho(*param, &scheduler.point(t)) - *rho_start) / (*rho_end - *rho_start)
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::{gmm_marginal_velocity, GaussianMixture, PolynomialField, VelocityField};
    use crate::scalar::Dual;

    fn eval(f: &dyn VelocityField<f64>, t: f64, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; x.len()];
        f.eval(t, x, &mut out).unwrap();
        out
    }

    /// Independent reference for a scheduler change: plain bisection on
    /// the SNR ratio, no log domain, no shared helpers.
    fn reference_change(src: &Scheduler<f64>, tgt: &Scheduler<f64>, r: f64) -> (f64, f64) {
        let snr = |s: &Scheduler<f64>, t: f64| {
            let p = s.point(t);
            p.alpha / p.sigma
        };
        let v = snr(tgt, r);
        let (mut a, mut b) = (-5.0, 1.0);
        for _ in 0..200 {
            let m = 0.5 * (a + b);
            if snr(src, m) < v {
                a = m
            } else {
                b = m
            }
        }
        let t = 0.5 * (a + b);
        (tgt.point(r).sigma / src.point(t).sigma, t)
    }

    #[test]
    fn identity_changes_collapse() {
        assert_eq!(st_from_scheduler_change::<f64>(&Scheduler::vp(), &Scheduler::vp()).unwrap(), STTransform::Identity);
        let t = st_from_scheduler_change(&Scheduler::Ot, &Scheduler::scaled_sigma(Scheduler::Ot, 1.0)).unwrap();
        assert_eq!(t, STTransform::Identity);
        for i in 0..=10 {
            let r = i as f64 / 10.0;
            let p = t.eval(r).unwrap();
            assert_eq!((p.s, p.t), (1.0, r));
        }
    }

    #[test]
    fn vp_scaled_sigma_matches_bisection_reference() {
        let src = Scheduler::vp();
        let tgt = Scheduler::scaled_sigma(Scheduler::vp(), 5.0);
        let tr = st_from_scheduler_change(&src, &tgt).unwrap();
        for &r in &[0.3, 0.5, 0.7, 0.95] {
            let p = tr.eval(r).unwrap();
            let (s, t) = reference_change(&src, &tgt, r);
            assert!((p.t - t).abs() < 1e-8, "r={r}: {} vs {t}", p.t);
            assert!((p.s - s).abs() < 1e-8 * s, "r={r}: {} vs {s}", p.s);
        }
    }

    #[test]
    fn ot_scaled_sigma_closed_form() {
        // t_r = r / (σ0(1-r) + r), s_r = σ0(1-r) + r.
        let k = 5.0;
        let tr = st_from_scheduler_change(&Scheduler::Ot, &Scheduler::scaled_sigma(Scheduler::Ot, k)).unwrap();
        for i in 0..=20 {
            let r = i as f64 / 20.0;
            let p = tr.eval(r).unwrap();
            let den = k * (1.0 - r) + r;
            assert!((p.t - r / den).abs() < 1e-14, "r={r}");
            assert!((p.s - den).abs() < 1e-12, "r={r}");
            assert!((p.dt - k / (den * den)).abs() < 1e-9, "r={r}");
            assert!((p.ds - (1.0 - k)).abs() < 1e-9, "r={r}");
        }
    }

    #[test]
    fn transform_derivatives_match_finite_differences() {
        let transforms = vec![
            st_from_scheduler_change(&Scheduler::vp(), &Scheduler::scaled_sigma(Scheduler::vp(), 5.0)).unwrap(),
            st_from_scheduler_change(&Scheduler::CosineCs, &Scheduler::Ot).unwrap(),
            st_from_scheduler_change(&Scheduler::Ot, &Scheduler::scaled_sigma(Scheduler::Ot, 10.0)).unwrap(),
            ei_transform(Parameterization::EpsPred, &Scheduler::vp()).unwrap(),
            ei_transform(Parameterization::XPred, &Scheduler::Ot).unwrap(),
            ei_transform_snr_linear(Parameterization::EpsPred, &Scheduler::vp()).unwrap(),
        ];
        let h = 1e-6;
        for tr in transforms {
            for i in 1..20 {
                let r = i as f64 / 20.0;
                let p = tr.eval(r).unwrap();
                let (a, b) = (tr.eval(r + h).unwrap(), tr.eval(r - h).unwrap());
                let fs = (a.s - b.s) / (2.0 * h);
                let ft = (a.t - b.t) / (2.0 * h);
                assert!((p.ds - fs).abs() <= 1e-4 * fs.abs().max(1e-3), "{} ds r={r}: {} vs {fs}", tr.name(), p.ds);
                assert!((p.dt - ft).abs() <= 1e-4 * ft.abs().max(1e-3), "{} dt r={r}: {} vs {ft}", tr.name(), p.dt);
                // Dual evaluation carries the same first derivatives.
                let q = tr.eval(Dual::variable(r)).unwrap();
                assert!((q.t.eps - p.dt).abs() <= 1e-9 * p.dt.abs().max(1.0));
                assert!((q.s.eps - p.ds).abs() <= 1e-9 * p.ds.abs().max(1.0));
            }
        }
    }

    #[test]
    fn valid_transforms_pass_validation() {
        st_from_scheduler_change(&Scheduler::Ot, &Scheduler::scaled_sigma(Scheduler::Ot, 5.0)).unwrap().validate(true).unwrap();
        ei_transform(Parameterization::EpsPred, &Scheduler::<f64>::vp()).unwrap().validate(true).unwrap();
        ei_transform_snr_linear(Parameterization::EpsPred, &Scheduler::<f64>::vp()).unwrap().validate(true).unwrap();
        // VP has positive SNR at t = 0, so inflating σ pushes the start before 0.
        let tr = st_from_scheduler_change(&Scheduler::vp(), &Scheduler::scaled_sigma(Scheduler::vp(), 5.0)).unwrap();
        assert!(tr.start_time().unwrap() < 0.0);
        tr.validate(false).unwrap();
        assert!(tr.validate(true).is_err());
    }

    #[test]
    fn ei_transform_scales() {
        let tr = ei_transform(Parameterization::XPred, &Scheduler::Ot).unwrap();
        for &r in &[1e-6f64, 0.25, 0.5, 1.0 - 1e-6] {
            assert!((tr.eval(r).unwrap().s - 1.0 / (1.0 - r)).abs() < 1e-9 / (1.0 - r));
        }
        let tr = ei_transform(Parameterization::EpsPred, &Scheduler::vp()).unwrap();
        assert_eq!(tr.eval(1.0).unwrap().s, 1.0);
        assert!(ei_transform(Parameterization::Velocity, &Scheduler::<f64>::Ot).is_err());
    }

    #[test]
    fn ei_snr_linear_needs_finite_rho() {
        assert!(ei_transform_snr_linear(Parameterization::EpsPred, &Scheduler::<f64>::Ot).is_err());
        let tr = ei_transform_snr_linear(Parameterization::EpsPred, &Scheduler::vp()).unwrap();
        let grid: Vec<f64> = (0..=8).map(|i| i as f64 / 8.0).collect();
        let r = ddim_r_grid(&tr, &grid).unwrap();
        for (ri, ti) in r.iter().zip(&grid) {
            assert!((tr.eval(*ri).unwrap().t - ti).abs() < 1e-10);
        }
    }

    #[test]
    fn range_mismatch_names_both_intervals() {
        let err = st_from_scheduler_change(&Scheduler::<f64>::edm_ve(), &Scheduler::Ot).unwrap_err();
        match err {
            Error::Range { what, .. } => assert!(what.contains("ot") && what.contains("edm_ve"), "{what}"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn scheduler_round_trip_through_transform() {
        let cases = vec![
            (Scheduler::vp(), Scheduler::scaled_sigma(Scheduler::vp(), 5.0)),
            (Scheduler::CosineCs, Scheduler::Ot),
            (Scheduler::Ot, Scheduler::CosineCs),
            (Scheduler::Ot, Scheduler::scaled_sigma(Scheduler::Ot, 0.5)),
        ];
        for (a, b) in cases {
            let tr = st_from_scheduler_change(&a, &b).unwrap();
            let back = scheduler_from_st(&tr, &a);
            for i in 0..=50 {
                let r = i as f64 / 50.0;
                let (p, q) = (back.point(r), b.point(r));
                assert!((p.alpha - q.alpha).abs() < 1e-8, "{} alpha r={r}", b.name());
                assert!((p.sigma - q.sigma).abs() < 1e-8 * q.sigma.abs().max(1.0), "{} sigma r={r}", b.name());
            }
        }
    }

    #[test]
    fn constant_scale_of_linear_field_is_itself() {
        let u = counted(PolynomialField::<f64>::scaled_identity(2, 1.0));
        let ubar = apply_st_to_field(u, &STTransform::Scale(2.0));
        assert_eq!(eval(&*ubar, 0.3, &[1.0, -2.0]), vec![1.0, -2.0]);
    }

    #[test]
    fn identity_transform_returns_same_field() {
        let gmm = GaussianMixture::single(vec![0.5], 0.3).unwrap();
        let u = gmm_marginal_velocity(gmm, Scheduler::Ot).unwrap();
        let ubar = apply_st_to_field(u.clone(), &STTransform::Identity);
        assert_eq!(eval(&*ubar, 0.4, &[0.2]), eval(&*u, 0.4, &[0.2]));
    }

    #[test]
    fn preconditioning_inflates_source_scale() {
        let u = counted(PolynomialField::<f64>::zero(1));
        let (_, tr) = precondition(u.clone(), &Scheduler::Ot, 5.0).unwrap();
        assert!((tr.scale_at(0.0).unwrap() - 5.0).abs() < 1e-12);
        assert!((tr.scale_at(1.0).unwrap() - 1.0).abs() < 1e-12);
        let (_, tr) = precondition(u.clone(), &Scheduler::Ot, 1.0).unwrap();
        assert_eq!(tr, STTransform::Identity);
        assert!(precondition(u, &Scheduler::Ot, 0.0).is_err());
    }
}
