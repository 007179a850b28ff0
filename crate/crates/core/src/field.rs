//! Velocity fields `u_t(x)`.
//!
//! [`VelocityField`] is the object-safe contract solvers consume. Concrete
//! fields implement [`SmoothField`], whose evaluation is generic over the
//! scalar type, and are wrapped in [`Counted`] which adds dimension checks
//! and NFE accounting. Because the generic evaluation also runs on dual
//! numbers, every field built here can report `∂u/∂t` and `∂u/∂x`.

use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::{Dual, Real, Scalar};
use crate::scheduler::{SchedulePoint, Scheduler, Validation, CLAMP_EPS};

pub trait VelocityField<R: Real>: Send + Sync {
    fn dim(&self) -> usize;

    /// Evaluate `u_t(x)` into `out`. Counts toward [`VelocityField::nfe`].
    fn eval(&self, t: R, x: &[R], out: &mut [R]) -> Result<()>;

    /// Evaluate on dual numbers (one tangent direction). Not counted.
    fn eval_dual(&self, t: Dual<R>, x: &[Dual<R>], out: &mut [Dual<R>]) -> Result<()>;

    /// Function evaluations so far. Each call adds [`VelocityField::cost`].
    fn nfe(&self) -> u64;

    fn reset_nfe(&self);

    /// NFE charged per call (2 for guided fields).
    fn cost(&self) -> u64 {
        1
    }

    fn name(&self) -> String;
}

pub type SharedField<R> = Arc<dyn VelocityField<R>>;

/// A field whose evaluation is written once for every scalar type.
pub trait SmoothField<R: Real>: Send + Sync {
    fn dim(&self) -> usize;
    fn eval_generic<S: Scalar<Real = R>>(&self, t: S, x: &[S], out: &mut [S]) -> Result<()>;
    fn name(&self) -> String;
    fn cost(&self) -> u64 {
        1
    }
}

/// Adds dimension checks and an atomic NFE counter to a [`SmoothField`].
pub struct Counted<F> {
    inner: F,
    calls: AtomicU64,
}

impl<F> Counted<F> {
    pub fn new(inner: F) -> Self {
        Self { inner, calls: AtomicU64::new(0) }
    }

    pub fn inner(&self) -> &F {
        &self.inner
    }
}

/// Wrap a smooth field into a shareable [`VelocityField`].
pub fn counted<R: Real, F: SmoothField<R> + 'static>(f: F) -> SharedField<R> {
    Arc::new(Counted::new(f))
}

fn check_dims(dim: usize, x: usize, out: usize) -> Result<()> {
    if x != dim {
        return Err(Error::DimensionMismatch { expected: dim, got: x });
    }
    if out != dim {
        return Err(Error::DimensionMismatch { expected: dim, got: out });
    }
    Ok(())
}

impl<R: Real, F: SmoothField<R>> VelocityField<R> for Counted<F> {
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn eval(&self, t: R, x: &[R], out: &mut [R]) -> Result<()> {
        check_dims(self.inner.dim(), x.len(), out.len())?;
        self.calls.fetch_add(self.inner.cost(), Ordering::Relaxed);
        self.inner.eval_generic(t, x, out)
    }

    fn eval_dual(&self, t: Dual<R>, x: &[Dual<R>], out: &mut [Dual<R>]) -> Result<()> {
        check_dims(self.inner.dim(), x.len(), out.len())?;
        self.inner.eval_generic(t, x, out)
    }

    fn nfe(&self) -> u64 {
        self.calls.load(Ordering::Relaxed)
    }

    fn reset_nfe(&self) {
        self.calls.store(0, Ordering::Relaxed)
    }

    fn cost(&self) -> u64 {
        self.inner.cost()
    }

    fn name(&self) -> String {
        self.inner.name()
    }
}

/// Field from a plain closure over reals. Has no dual evaluation, so it
/// cannot be used for gradients.
pub struct FnField<R, F> {
    dim: usize,
    f: F,
    calls: AtomicU64,
    label: String,
    _r: std::marker::PhantomData<fn() -> R>,
}

impl<R: Real, F> FnField<R, F>
where
    F: Fn(R, &[R], &mut [R]) + Send + Sync,
{
    pub fn new(dim: usize, label: &str, f: F) -> Self {
        Self { dim, f, calls: AtomicU64::new(0), label: label.into(), _r: Default::default() }
    }
}

impl<R: Real, F> VelocityField<R> for FnField<R, F>
where
    F: Fn(R, &[R], &mut [R]) + Send + Sync,
{
    fn dim(&self) -> usize {
        self.dim
    }

    fn eval(&self, t: R, x: &[R], out: &mut [R]) -> Result<()> {
        check_dims(self.dim, x.len(), out.len())?;
        self.calls.fetch_add(1, Ordering::Relaxed);
        (self.f)(t, x, out);
        Ok(())
    }

    fn eval_dual(&self, _t: Dual<R>, _x: &[Dual<R>], _out: &mut [Dual<R>]) -> Result<()> {
        Err(Error::NotDifferentiable(self.label.clone()))
    }

    fn nfe(&self) -> u64 {
        self.calls.load(Ordering::Relaxed)
    }

    fn reset_nfe(&self) {
        self.calls.store(0, Ordering::Relaxed)
    }

    fn name(&self) -> String {
        self.label.clone()
    }
}

/// Value and first derivatives of a field at one point.
#[derive(Clone, Debug, PartialEq)]
pub struct FieldJet<R> {
    pub value: Vec<R>,
    /// `∂u/∂t`
    pub dt: Vec<R>,
    /// `∂u_i/∂x_j` stored row-major at `i * d + j`.
    pub dx: Vec<R>,
}

/// Evaluate `u`, `∂u/∂t` and `∂u/∂x` with `d + 1` dual evaluations.
pub fn jet<R: Real>(field: &dyn VelocityField<R>, t: R, x: &[R]) -> Result<FieldJet<R>> {
    let d = field.dim();
    if x.len() != d {
        return Err(Error::DimensionMismatch { expected: d, got: x.len() });
    }
    let mut xs: Vec<Dual<R>> = x.iter().map(|&v| Dual::constant(v)).collect();
    let mut out = vec![Dual::constant(R::zero()); d];

    field.eval_dual(Dual::variable(t), &xs, &mut out)?;
    let value: Vec<R> = out.iter().map(|v| v.re).collect();
    let dt: Vec<R> = out.iter().map(|v| v.eps).collect();

    let mut dx = vec![R::zero(); d * d];
    for j in 0..d {
        xs[j].eps = R::one();
        field.eval_dual(Dual::constant(t), &xs, &mut out)?;
        xs[j].eps = R::zero();
        for i in 0..d {
            dx[i * d + j] = out[i].eps;
        }
    }
    Ok(FieldJet { value, dt, dx })
}

/// Polynomial test field
/// `u_i = c_i + e_i·t + Σ_j (A_ij + t·B_ij) x_j + q_i x_i²`.
#[derive(Clone, Debug, PartialEq)]
pub struct PolynomialField<R> {
    pub dim: usize,
    pub constant: Vec<R>,
    pub time: Vec<R>,
    pub linear: Vec<R>,
    pub time_linear: Vec<R>,
    pub quadratic: Vec<R>,
}

impl<R: Real> PolynomialField<R> {
    pub fn zero(dim: usize) -> Self {
        let z = vec![R::zero(); dim];
        Self {
            dim,
            constant: z.clone(),
            time: z.clone(),
            linear: vec![R::zero(); dim * dim],
            time_linear: vec![R::zero(); dim * dim],
            quadratic: z,
        }
    }

    /// `u(t, x) = k·x`.
    pub fn scaled_identity(dim: usize, k: R) -> Self {
        let mut f = Self::zero(dim);
        for i in 0..dim {
            f.linear[i * dim + i] = k;
        }
        f
    }

    /// `u ≡ c`.
    pub fn constant(c: Vec<R>) -> Self {
        let mut f = Self::zero(c.len());
        f.constant = c;
        f
    }

    /// `u(t, x) = t` in every coordinate.
    pub fn time_ramp(dim: usize) -> Self {
        let mut f = Self::zero(dim);
        f.time = vec![R::one(); dim];
        f
    }

    /// Random smooth field with coefficients of size `scale`. Kept mild so
    /// trajectories stay bounded on `[0, 1]`.
    pub fn random<G: Rng + ?Sized>(dim: usize, scale: f64, rng: &mut G) -> Self {
        let mut draw = |k: f64| -> R {
            let z: f64 = StandardNormal.sample(rng);
            R::lit(z * scale * k)
        };
        let constant = (0..dim).map(|_| draw(1.0)).collect();
        let time = (0..dim).map(|_| draw(1.0)).collect();
        let linear = (0..dim * dim).map(|_| draw(0.5)).collect();
        let time_linear = (0..dim * dim).map(|_| draw(0.5)).collect();
        let quadratic = (0..dim).map(|_| draw(0.2)).collect();
        Self { dim, constant, time, linear, time_linear, quadratic }
    }
    /// The same field with the quadratic term dropped.
    pub fn affine_part(&self) -> Self {
        Self { quadratic: vec![R::zero(); self.dim], ..self.clone() }
    }
}

impl<R: Real> SmoothField<R> for PolynomialField<R> {
    fn dim(&self) -> usize {
        self.dim
    }

    fn eval_generic<S: Scalar<Real = R>>(&self, t: S, x: &[S], out: &mut [S]) -> Result<()> {
        let d = self.dim;
        for i in 0..d {
            let mut acc = S::from_real(self.constant[i]) + S::from_real(self.time[i]) * t;
            for j in 0..d {
                let k = S::from_real(self.linear[i * d + j]) + t * S::from_real(self.time_linear[i * d + j]);
                acc = acc + k * x[j];
            }
            out[i] = acc + S::from_real(self.quadratic[i]) * x[i] * x[i];
        }
        Ok(())
    }

    fn name(&self) -> String {
        "polynomial".into()
    }
}

/// Model output parameterizations.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Parameterization {
    Velocity,
    EpsPred,
    XPred,
}

impl fmt::Display for Parameterization {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Parameterization::Velocity => "velocity",
            Parameterization::EpsPred => "eps_pred",
            Parameterization::XPred => "x_pred",
        })
    }
}

/// `(β_t, γ_t)` with `u_t(x) = β_t x + γ_t f_t(x)`.
pub fn velocity_coefficients<S: Scalar>(
    param: Parameterization,
    p: &SchedulePoint<S>,
    t: S,
) -> Result<(S, S)> {
    match param {
        Parameterization::Velocity => Ok((S::zero(), S::one())),
        Parameterization::EpsPred => {
            if p.alpha.primal() == <S::Real as num_traits::Zero>::zero() {
                return Err(Error::Domain(format!("beta = dalpha/alpha undefined: alpha_t = 0 at t = {}", t.primal())));
            }
            Ok((p.dalpha / p.alpha, (p.dsigma * p.alpha - p.sigma * p.dalpha) / p.alpha))
        }
        Parameterization::XPred => {
            if p.sigma.primal() == <S::Real as num_traits::Zero>::zero() {
                return Err(Error::Domain(format!("beta = dsigma/sigma undefined: sigma_t = 0 at t = {}", t.primal())));
            }
            Ok((p.dsigma / p.sigma, (p.sigma * p.dalpha - p.dsigma * p.alpha) / p.sigma))
        }
    }
}

/// Coefficients at `t`, or at the nearest point of `[ε, 1 - ε]` when a
/// derivative blows up at an endpoint (`σ̇ → ∞` for VP at `t = 1`). A zero
/// divisor is still an error.
fn model_coefficients<R: Real, S: Scalar<Real = R>>(param: Parameterization, scheduler: &Scheduler<R>, t: S) -> Result<(S, S)> {
    let tp = t.primal();
    // same domain as the mixture oracle, so VP preconditioning may start below 0
    if !tp.is_finite() || tp < scheduler.extended_start() || tp > R::one() {
        return Err(Error::Domain(format!("scheduler time {tp} outside [{}, 1]", scheduler.extended_start())));
    }
    let (b, g) = velocity_coefficients(param, &scheduler.point(t), t)?;
    if b.is_finite() && g.is_finite() {
        return Ok((b, g));
    }
    let lo = R::lit(CLAMP_EPS);
    let hi = R::one() - lo;
    let tc = S::from_real(tp.max(lo).min(hi));
    let p = scheduler.point(tc);
    velocity_coefficients(param, &p, tc)
}

/// Velocity field obtained from a model output `f`.
pub struct ModelVelocity<R: Real> {
    model: SharedField<R>,
    param: Parameterization,
    scheduler: Scheduler<R>,
}

impl<R: Real> SmoothField<R> for ModelVelocity<R> {
    fn dim(&self) -> usize {
        self.model.dim()
    }

    fn eval_generic<S: Scalar<Real = R>>(&self, t: S, x: &[S], out: &mut [S]) -> Result<()> {
        let (beta, gamma) = model_coefficients(self.param, &self.scheduler, t)?;
        S::eval_field(&*self.model, t, x, out)?;
        for (o, &xi) in out.iter_mut().zip(x) {
            *o = beta * xi + gamma * *o;
        }
        Ok(())
    }

    fn name(&self) -> String {
        format!("{}[{}]", self.param, self.model.name())
    }

    fn cost(&self) -> u64 {
        self.model.cost()
    }
}

/// `u_t(x) = β_t x + γ_t f_t(x)` for a model `f` in parameterization `param`.
pub fn to_velocity<R: Real>(model: SharedField<R>, param: Parameterization, scheduler: Scheduler<R>) -> SharedField<R> {
    if param == Parameterization::Velocity {
        return model;
    }
    counted(ModelVelocity { model, param, scheduler })
}

/// Inverse of the velocity conversion: the model output `f = (u - βx)/γ`.
struct ModelOutput<R: Real> {
    velocity: SharedField<R>,
    param: Parameterization,
    scheduler: Scheduler<R>,
}

impl<R: Real> SmoothField<R> for ModelOutput<R> {
    fn dim(&self) -> usize {
        self.velocity.dim()
    }

    fn eval_generic<S: Scalar<Real = R>>(&self, t: S, x: &[S], out: &mut [S]) -> Result<()> {
        let (beta, gamma) = model_coefficients(self.param, &self.scheduler, t)?;
        S::eval_field(&*self.velocity, t, x, out)?;
        for (o, &xi) in out.iter_mut().zip(x) {
            *o = (*o - beta * xi) / gamma;
        }
        Ok(())
    }

    fn name(&self) -> String {
        format!("{}-of[{}]", self.param, self.velocity.name())
    }
}

/// Express a velocity field as a model output in `param` form.
pub fn from_velocity<R: Real>(velocity: SharedField<R>, param: Parameterization, scheduler: Scheduler<R>) -> SharedField<R> {
    if param == Parameterization::Velocity {
        return velocity;
    }
    counted(ModelOutput { velocity, param, scheduler })
}

/// Classifier-free guidance combination `(1 + w)·u_cond - w·u_uncond`.
pub struct Guided<R: Real> {
    cond: SharedField<R>,
    uncond: SharedField<R>,
    weight: R,
}

impl<R: Real> SmoothField<R> for Guided<R> {
    fn dim(&self) -> usize {
        self.cond.dim()
    }

    fn eval_generic<S: Scalar<Real = R>>(&self, t: S, x: &[S], out: &mut [S]) -> Result<()> {
        let mut un = vec![S::zero(); x.len()];
        S::eval_field(&*self.cond, t, x, out)?;
        S::eval_field(&*self.uncond, t, x, &mut un)?;
        let w = S::from_real(self.weight);
        for (o, u) in out.iter_mut().zip(un) {
            *o = (S::one() + w) * *o - w * u;
        }
        Ok(())
    }

    fn name(&self) -> String {
        format!("cfg({}, {}, w={})", self.cond.name(), self.uncond.name(), self.weight)
    }

    fn cost(&self) -> u64 {
        self.cond.cost() + self.uncond.cost()
    }
}

pub fn cfg_combine<R: Real>(cond: SharedField<R>, uncond: SharedField<R>, weight: R) -> Result<SharedField<R>> {
    if cond.dim() != uncond.dim() {
        return Err(Error::DimensionMismatch { expected: cond.dim(), got: uncond.dim() });
    }
    Ok(counted(Guided { cond, uncond, weight }))
}

/// Isotropic Gaussian mixture `Σ_k w_k N(μ_k, s_k² I)`.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianMixture<R> {
    weights: Vec<R>,
    means: Vec<Vec<R>>,
    stds: Vec<R>,
}

impl<R: Real> GaussianMixture<R> {
    /// Zero standard deviations are allowed (point masses).
    pub fn new(weights: Vec<R>, means: Vec<Vec<R>>, stds: Vec<R>) -> Result<Self> {
        let k = weights.len();
        if k == 0 || means.len() != k || stds.len() != k {
            return Err(Error::Shape(format!(
                "mixture needs matching nonempty weights/means/stds, got {}/{}/{}",
                k,
                means.len(),
                stds.len()
            )));
        }
        let d = means[0].len();
        if d == 0 || means.iter().any(|m| m.len() != d) {
            return Err(Error::Shape("mixture means must share a nonzero dimension".into()));
        }
        if weights.iter().any(|&w| !(w > R::zero())) || stds.iter().any(|&s| !(s >= R::zero()) || !s.is_finite()) {
            return Err(Error::Shape("mixture weights must be positive and stds non-negative".into()));
        }
        let total: R = weights.iter().copied().sum();
        if (total - R::one()).abs() > R::lit(1e-12) {
            return Err(Error::Shape(format!("mixture weights sum to {total}, expected 1")));
        }
        Ok(Self { weights, means, stds })
    }

    pub fn single(mean: Vec<R>, std: R) -> Result<Self> {
        Self::new(vec![R::one()], vec![mean], vec![std])
    }

    pub fn dim(&self) -> usize {
        self.means[0].len()
    }

    pub fn weights(&self) -> &[R] {
        &self.weights
    }

    pub fn means(&self) -> &[Vec<R>] {
        &self.means
    }

    pub fn stds(&self) -> &[R] {
        &self.stds
    }

    /// Mixture mean `Σ w_k μ_k`.
    pub fn mean(&self) -> Vec<R> {
        let mut m = vec![R::zero(); self.dim()];
        for (w, mu) in self.weights.iter().zip(&self.means) {
            for (a, &b) in m.iter_mut().zip(mu) {
                *a = *a + *w * b;
            }
        }
        m
    }
}

/// Exact marginal velocity of the Gaussian path whose data distribution
/// is a [`GaussianMixture`].
pub struct GmmVelocity<R: Real> {
    gmm: GaussianMixture<R>,
    scheduler: Scheduler<R>,
    log_weights: Vec<R>,
}

impl<R: Real> GmmVelocity<R> {
    pub fn mixture(&self) -> &GaussianMixture<R> {
        &self.gmm
    }

    pub fn scheduler(&self) -> &Scheduler<R> {
        &self.scheduler
    }

    /// Posterior mean `E[x_1 | x_t = x]` at a scheduler point.
    fn posterior_mean<S: Scalar<Real = R>>(&self, p: &SchedulePoint<S>, x: &[S], out: &mut [S]) {
        let d = x.len();
        let k = self.gmm.weights.len();
        let sigma2 = p.sigma * p.sigma;
        let half = S::lit(0.5);
        let mut logits = Vec::with_capacity(k);
        let mut best = R::neg_infinity();
        for c in 0..k {
            let s = S::from_real(self.gmm.stds[c]);
            let var = p.alpha * p.alpha * s * s + sigma2;
            let mut sq = S::zero();
            for (xi, &mi) in x.iter().zip(&self.gmm.means[c]) {
                let r = *xi - p.alpha * S::from_real(mi);
                sq = sq + r * r;
            }
            let l = S::from_real(self.log_weights[c]) - half * S::lit(d as f64) * var.ln() - half * sq / var;
            best = best.max(l.primal());
            logits.push((l, var));
        }
        let shift = S::from_real(best);
        let mut norm = S::zero();
        for (l, _) in logits.iter_mut() {
            *l = (*l - shift).exp();
            norm = norm + *l;
        }
        out.iter_mut().for_each(|o| *o = S::zero());
        for (c, (w, var)) in logits.into_iter().enumerate() {
            let g = w / norm;
            let s = S::from_real(self.gmm.stds[c]);
            let shrink = p.alpha * s * s / var;
            for i in 0..d {
                let mu = S::from_real(self.gmm.means[c][i]);
                out[i] = out[i] + g * (mu + shrink * (x[i] - p.alpha * mu));
            }
        }
    }
}

impl<R: Real> SmoothField<R> for GmmVelocity<R> {
    fn dim(&self) -> usize {
        self.gmm.dim()
    }

    fn eval_generic<S: Scalar<Real = R>>(&self, t: S, x: &[S], out: &mut [S]) -> Result<()> {
        let tp = t.primal();
        if !tp.is_finite() || tp < self.scheduler.extended_start() || tp > R::one() {
            return Err(Error::Domain(format!("oracle time {tp} outside the scheduler domain")));
        }
        let cap = R::one() - R::lit(CLAMP_EPS);
        let t = if tp > cap { S::from_real(cap) } else { t };
        let p = self.scheduler.point(t);
        self.posterior_mean(&p, x, out);
        let rate = p.dsigma / p.sigma;
        let drift = p.dalpha - rate * p.alpha;
        for (o, &xi) in out.iter_mut().zip(x) {
            *o = rate * xi + drift * *o;
        }
        Ok(())
    }

    fn name(&self) -> String {
        format!("gmm{}[{}]", self.gmm.weights.len(), self.scheduler.name())
    }
}

/// Closed-form marginal velocity for mixture data on `scheduler`'s path.
pub fn gmm_marginal_velocity<R: Real>(gmm: GaussianMixture<R>, scheduler: Scheduler<R>) -> Result<SharedField<R>> {
    Ok(Arc::new(gmm_velocity(gmm, scheduler)?))
}

/// Typed variant of [`gmm_marginal_velocity`].
pub fn gmm_velocity<R: Real>(gmm: GaussianMixture<R>, scheduler: Scheduler<R>) -> Result<Counted<GmmVelocity<R>>> {
    scheduler.validate(Validation::Strict)?;
    let log_weights = gmm.weights.iter().map(|w| w.ln()).collect();
    Ok(Counted::new(GmmVelocity { gmm, scheduler, log_weights }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn eval(f: &dyn VelocityField<f64>, t: f64, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; x.len()];
        f.eval(t, x, &mut out).unwrap();
        out
    }

    #[test]
    fn table_one_coefficients_on_ot_midpoint() {
        let p = Scheduler::Ot.eval(0.5).unwrap();
        let (b, g) = velocity_coefficients(Parameterization::EpsPred, &p, 0.5).unwrap();
        assert_eq!((b, g), (2.0, -2.0));
        let (b, g) = velocity_coefficients(Parameterization::XPred, &p, 0.5).unwrap();
        assert_eq!((b, g), (-2.0, 2.0));
        let (b, g) = velocity_coefficients(Parameterization::Velocity, &p, 0.5).unwrap();
        assert_eq!((b, g), (0.0, 1.0));
    }

    #[test]
    fn velocity_parameterization_is_identity() {
        let model = counted(PolynomialField::<f64>::random(3, 0.5, &mut ChaCha8Rng::seed_from_u64(1)));
        let u = to_velocity(model.clone(), Parameterization::Velocity, Scheduler::Ot);
        let x = [0.3, -0.2, 0.9];
        assert_eq!(eval(&*u, 0.4, &x), eval(&*model, 0.4, &x));
    }

    #[test]
    fn endpoint_division_guard_names_coefficient() {
        let model = counted(PolynomialField::<f64>::scaled_identity(1, 1.0));
        let u = to_velocity(model.clone(), Parameterization::EpsPred, Scheduler::Ot);
        let err = u.eval(0.0, &[1.0], &mut [0.0]).unwrap_err();
        assert!(err.to_string().contains("alpha_t = 0"), "{err}");
        let u = to_velocity(model, Parameterization::XPred, Scheduler::Ot);
        let err = u.eval(1.0, &[1.0], &mut [0.0]).unwrap_err();
        assert!(err.to_string().contains("sigma_t = 0"), "{err}");
    }

    #[test]
    fn vp_eps_model_is_finite_at_the_data_end() {
        // σ̇ is infinite at t = 1 on VP; the coefficients are taken at 1 - ε
        let model = counted(PolynomialField::<f64>::scaled_identity(2, 0.5));
        let vp = Scheduler::vp();
        let u = to_velocity(model, Parameterization::EpsPred, vp.clone());
        let x = [0.4, -0.1];
        let at_end = eval(&*u, 1.0, &x);
        assert!(at_end.iter().all(|v| v.is_finite()));
        assert_eq!(at_end, eval(&*u, 1.0 - CLAMP_EPS, &x));
        let back = to_velocity(from_velocity(u.clone(), Parameterization::EpsPred, vp.clone()), Parameterization::EpsPred, vp);
        for (a, b) in eval(&*back, 1.0, &x).iter().zip(&at_end) {
            assert!((a - b).abs() < 1e-9 * (1.0 + b.abs()));
        }
    }

    #[test]
    fn vp_model_conversion_accepts_the_extended_start() {
        let gmm = GaussianMixture::single(vec![0.5, -0.5], 0.3).unwrap();
        let vp = Scheduler::vp();
        let u = gmm_marginal_velocity(gmm, vp.clone()).unwrap();
        let back = to_velocity(from_velocity(u.clone(), Parameterization::EpsPred, vp.clone()), Parameterization::EpsPred, vp);
        let x = [0.2, 0.7];
        for (a, b) in eval(&*back, -0.15, &x).iter().zip(&eval(&*u, -0.15, &x)) {
            assert!((a - b).abs() < 1e-9 * (1.0 + b.abs()), "{a} vs {b}");
        }
        assert!(back.eval(-6.0, &x, &mut [0.0; 2]).is_err());
    }

    #[test]
    fn conversion_round_trip_reproduces_velocity() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let gmm = GaussianMixture::new(vec![0.3, 0.7], vec![vec![1.0, 0.0], vec![-0.5, 0.5]], vec![0.2, 0.4]).unwrap();
        for sched in [Scheduler::Ot, Scheduler::CosineCs, Scheduler::vp()] {
            let u = gmm_marginal_velocity(gmm.clone(), sched.clone()).unwrap();
            for param in [Parameterization::EpsPred, Parameterization::XPred] {
                let f = from_velocity(u.clone(), param, sched.clone());
                let back = to_velocity(f, param, sched.clone());
                for _ in 0..20 {
                    let t: f64 = rng.random_range(0.01..0.99);
                    let x = [rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)];
                    let a = eval(&*u, t, &x);
                    let b = eval(&*back, t, &x);
                    for (p, q) in a.iter().zip(&b) {
                        assert!((p - q).abs() <= 1e-12 * (1.0 + p.abs()), "{param} {}: {p} vs {q}", sched.name());
                    }
                }
            }
        }
    }

    #[test]
    fn cfg_linear_combination() {
        let cond = counted(PolynomialField::<f64>::scaled_identity(2, 1.0));
        let uncond = counted(PolynomialField::<f64>::zero(2));
        let x = [0.5, -1.5];
        let g = cfg_combine(cond.clone(), uncond.clone(), 0.0).unwrap();
        assert_eq!(eval(&*g, 0.3, &x), eval(&*cond, 0.3, &x));
        let g = cfg_combine(cond.clone(), cond.clone(), 1.0).unwrap();
        assert_eq!(eval(&*g, 0.3, &x), x.to_vec());
        let g = cfg_combine(cond, uncond, 2.0).unwrap();
        assert_eq!(eval(&*g, 0.3, &x), vec![1.5, -4.5]);
        assert_eq!(g.cost(), 2);
        assert_eq!(g.nfe(), 2);
    }

    #[test]
    fn cfg_rejects_dimension_mismatch() {
        let a = counted(PolynomialField::<f64>::zero(2));
        let b = counted(PolynomialField::<f64>::zero(3));
        assert!(matches!(cfg_combine(a, b, 1.0), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn mismatched_state_is_an_error() {
        let u = counted(PolynomialField::<f64>::zero(2));
        assert!(matches!(u.eval(0.1, &[1.0], &mut [0.0]), Err(Error::DimensionMismatch { .. })));
        assert_eq!(u.nfe(), 0);
    }

    #[test]
    fn nfe_counter_increments_once_per_call() {
        let u = counted(PolynomialField::<f64>::zero(1));
        for i in 1..=5 {
            u.eval(0.1, &[1.0], &mut [0.0]).unwrap();
            assert_eq!(u.nfe(), i);
        }
        jet(&*u, 0.2, &[1.0]).unwrap();
        assert_eq!(u.nfe(), 5);
        u.reset_nfe();
        assert_eq!(u.nfe(), 0);
    }

    #[test]
    fn mixture_validation() {
        assert!(GaussianMixture::new(vec![0.5, 0.6], vec![vec![0.0], vec![1.0]], vec![1.0, 1.0]).is_err());
        assert!(GaussianMixture::new(vec![1.0], vec![vec![0.0]], vec![-1.0]).is_err());
        assert!(GaussianMixture::new(vec![0.5, 0.5], vec![vec![0.0], vec![1.0, 2.0]], vec![1.0, 1.0]).is_err());
        assert!(GaussianMixture::<f64>::new(vec![], vec![], vec![]).is_err());
    }

    #[test]
    fn delta_data_ot_velocity_points_at_target() {
        let target = vec![0.7, -1.2];
        let u = gmm_marginal_velocity(GaussianMixture::single(target.clone(), 0.0).unwrap(), Scheduler::Ot).unwrap();
        let x = [0.1, 0.4];
        for &t in &[0.0, 0.2, 0.5, 0.9] {
            let v = eval(&*u, t, &x);
            for i in 0..2 {
                let expect = (target[i] - x[i]) / (1.0 - t);
                assert!((v[i] - expect).abs() < 1e-12 * expect.abs().max(1.0));
            }
        }
    }

    #[test]
    fn standard_normal_ot_velocity_closed_form() {
        let u = gmm_marginal_velocity(GaussianMixture::single(vec![0.0], 1.0).unwrap(), Scheduler::Ot).unwrap();
        for &t in &[0.1, 0.3, 0.5, 0.8] {
            let x = 1.3;
            let v = eval(&*u, t, &[x])[0];
            let expect = x * (2.0 * t - 1.0) / (t * t + (1.0 - t) * (1.0 - t));
            assert!((v - expect).abs() < 1e-13, "t={t}");
        }
        assert_eq!(eval(&*u, 0.5, &[2.0])[0], 0.0);
    }

    #[test]
    fn standard_normal_on_vp_is_stationary() {
        // α² + σ² ≡ 1 on VP, so N(0, I) data gives p_t = N(0, I) for all t.
        let u = gmm_marginal_velocity(GaussianMixture::single(vec![0.0, 0.0], 1.0).unwrap(), Scheduler::vp()).unwrap();
        for &t in &[0.0, 0.3, 0.9] {
            let v = eval(&*u, t, &[0.8, -0.4]);
            assert!(v.iter().all(|c| c.abs() < 1e-12), "{v:?}");
        }
    }

    #[test]
    fn jet_matches_finite_differences() {
        let gmm = GaussianMixture::new(vec![0.4, 0.6], vec![vec![1.0, -0.5], vec![-1.0, 0.3]], vec![0.3, 0.5]).unwrap();
        let u = gmm_marginal_velocity(gmm, Scheduler::CosineCs).unwrap();
        let (t, x) = (0.6, [0.2, -0.1]);
        let j = jet(&*u, t, &x).unwrap();
        let h = 1e-6;
        let fd_t: Vec<f64> = eval(&*u, t + h, &x).iter().zip(eval(&*u, t - h, &x)).map(|(a, b)| (a - b) / (2.0 * h)).collect();
        for i in 0..2 {
            assert!((j.dt[i] - fd_t[i]).abs() < 1e-6 * (1.0 + fd_t[i].abs()));
        }
        for c in 0..2 {
            let mut xp = x;
            let mut xm = x;
            xp[c] += h;
            xm[c] -= h;
            let (a, b) = (eval(&*u, t, &xp), eval(&*u, t, &xm));
            for i in 0..2 {
                let fd = (a[i] - b[i]) / (2.0 * h);
                assert!((j.dx[i * 2 + c] - fd).abs() < 1e-6 * (1.0 + fd.abs()));
            }
        }
        assert_eq!(j.value, eval(&*u, t, &x));
    }

    #[test]
    fn fn_field_has_no_dual_evaluation() {
        let f = FnField::new(1, "closure", |_t: f64, x: &[f64], o: &mut [f64]| o[0] = x[0]);
        assert!(matches!(jet(&f, 0.1, &[1.0]), Err(Error::NotDifferentiable(_))));
    }

    #[test]
    fn oracle_is_finite_near_data_end() {
        let gmm = GaussianMixture::new(vec![0.5, 0.5], vec![vec![3.0], vec![-3.0]], vec![0.0, 0.01]).unwrap();
        let u = gmm_marginal_velocity(gmm, Scheduler::Ot).unwrap();
        for &t in &[1.0 - 1e-6, 1.0] {
            for &x in &[-50.0, 0.0, 2.9, 50.0] {
                assert!(eval(&*u, t, &[x])[0].is_finite());
            }
        }
    }
}
