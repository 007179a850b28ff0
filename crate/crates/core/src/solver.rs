//! Explicit integrators: Runge–Kutta from a Butcher tableau, linear
//! multistep, an adaptive Dormand–Prince oracle and the non-stationary
//! sampler.
//!
//! Every integrator returns a [`SolveTrace`] recording each point at which
//! the field was evaluated, so traces of different solvers that visit the
//! same points can be compared entry by entry.

use rayon::prelude::*;
use serde_json::json;

use crate::error::{Error, Result};
use crate::field::VelocityField;
use crate::nsparams::NSSolverParams;
use crate::scalar::Real;

/// States whose components leave `[-DIVERGENCE_LIMIT, DIVERGENCE_LIMIT]` abort the solve.
pub const DIVERGENCE_LIMIT: f64 = 1e12;

/// Times `t_0 = 0 ≤ t_1 ≤ … ≤ t_n = 1`.
///
/// Grids built with [`TimeGrid::new`] are strictly increasing. Grids of
/// embedded Runge–Kutta schemes contain repeated stage times and are built
/// with [`TimeGrid::non_decreasing`].
#[derive(Clone, Debug, PartialEq)]
pub struct TimeGrid<R> {
    times: Vec<R>,
}

impl<R: Real> TimeGrid<R> {
    pub fn new(times: Vec<R>) -> Result<Self> {
        Self::check(&times, true)?;
        Ok(Self { times })
    }

    pub fn non_decreasing(times: Vec<R>) -> Result<Self> {
        Self::check(&times, false)?;
        Ok(Self { times })
    }

    pub fn uniform(n: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::InvalidGrid("need at least one interval".into()));
        }
        let nr = R::from_usize(n).unwrap();
        let mut times: Vec<R> = (0..=n).map(|i| R::from_usize(i).unwrap() / nr).collect();
        times[n] = R::one();
        Self::new(times)
    }

    fn check(times: &[R], strict: bool) -> Result<()> {
        if times.len() < 2 {
            return Err(Error::InvalidGrid(format!("need at least 2 times, got {}", times.len())));
        }
        if times[0] != R::zero() || times[times.len() - 1] != R::one() {
            return Err(Error::InvalidGrid(format!(
                "endpoints must be exactly 0 and 1, got {} and {}",
                times[0],
                times[times.len() - 1]
            )));
        }
        for (i, w) in times.windows(2).enumerate() {
            let ok = if strict { w[1] > w[0] } else { w[1] >= w[0] };
            if !ok || !w[1].is_finite() {
                return Err(Error::InvalidGrid(format!("times not increasing at index {}: {} then {}", i + 1, w[0], w[1])));
            }
        }
        Ok(())
    }

    pub fn times(&self) -> &[R] {
        &self.times
    }

    /// Number of intervals.
    pub fn n(&self) -> usize {
        self.times.len() - 1
    }

    pub fn is_strict(&self) -> bool {
        self.times.windows(2).all(|w| w[1] > w[0])
    }
}

/// Explicit Runge–Kutta scheme `(c, a, b)`; row `q` of `a` holds the
/// `q` coefficients of the stages before it.
#[derive(Clone, Debug, PartialEq)]
pub struct ButcherTableau<R> {
    name: String,
    c: Vec<R>,
    a: Vec<Vec<R>>,
    b: Vec<R>,
}

impl<R: Real> ButcherTableau<R> {
    pub fn new(name: &str, c: Vec<R>, a: Vec<Vec<R>>, b: Vec<R>) -> Result<Self> {
        let m = c.len();
        if m == 0 || b.len() != m || a.len() != m {
            return Err(Error::Shape(format!("tableau needs matching c, a, b lengths (got {}, {}, {})", m, a.len(), b.len())));
        }
        for (q, row) in a.iter().enumerate() {
            if row.len() != q {
                return Err(Error::Shape(format!("row {q} of an explicit tableau needs {q} entries, got {}", row.len())));
            }
        }
        Ok(Self { name: name.into(), c, a, b })
    }

    pub fn euler() -> Self {
        Self::new("euler", vec![R::zero()], vec![vec![]], vec![R::one()]).unwrap()
    }

    pub fn midpoint() -> Self {
        let half = R::lit(0.5);
        Self::new("midpoint", vec![R::zero(), half], vec![vec![], vec![half]], vec![R::zero(), R::one()]).unwrap()
    }

    pub fn rk4() -> Self {
        let (z, h, o) = (R::zero(), R::lit(0.5), R::one());
        let (sixth, third) = (R::lit(1.0 / 6.0), R::lit(1.0 / 3.0));
        Self::new(
            "rk4",
            vec![z, h, h, o],
            vec![vec![], vec![h], vec![z, h], vec![z, z, o]],
            vec![sixth, third, third, sixth],
        )
        .unwrap()
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn stages(&self) -> usize {
        self.c.len()
    }

    pub fn c(&self) -> &[R] {
        &self.c
    }

    pub fn a(&self) -> &[Vec<R>] {
        &self.a
    }

    pub fn b(&self) -> &[R] {
        &self.b
    }
}

/// Coefficients of a linear multistep scheme over the last `m` points.
#[derive(Clone, Debug, PartialEq)]
pub enum Multistep<R> {
    /// Adams–Bashforth of order `m`, coefficients recomputed on every
    /// interval from the actual node spacing.
    Adams(usize),
    /// `x_{i+1} = Σ_j a_j x_{i-m+1+j} + h Σ_j b_j u_{i-m+1+j}` with the
    /// oldest point first and `h` the current interval.
    Fixed { a: Vec<R>, b: Vec<R> },
}

impl<R: Real> Multistep<R> {
    pub fn order(&self) -> usize {
        match self {
            Multistep::Adams(m) => *m,
            Multistep::Fixed { a, .. } => a.len(),
        }
    }

    /// `(a, b)` for the interval `[t_i, t_{i+1}]` with history nodes `nodes`
    /// (oldest first, ending at `t_i`).
    pub(crate) fn coefficients(&self, nodes: &[R], t_next: R) -> (Vec<R>, Vec<R>) {
        match self {
            Multistep::Fixed { a, b } => (a.clone(), b.clone()),
            Multistep::Adams(m) => {
                let mut a = vec![R::zero(); *m];
                a[m - 1] = R::one();
                (a, adams_weights(nodes, t_next))
            }
        }
    }
}

const GAUSS_NODES: [f64; 5] = [-0.906_179_845_938_664, -0.538_469_310_105_683_1, 0.0, 0.538_469_310_105_683_1, 0.906_179_845_938_664];
const GAUSS_WEIGHTS: [f64; 5] =
    [0.236_926_885_056_189_1, 0.478_628_670_499_366_5, 0.568_888_888_888_888_9, 0.478_628_670_499_366_5, 0.236_926_885_056_189_1];

/// `(1/h)∫_{t_i}^{t_next} ℓ_j(t) dt` for the Lagrange basis on `nodes`.
/// Five Gauss–Legendre points integrate the basis exactly up to degree 9.
fn adams_weights<R: Real>(nodes: &[R], t_next: R) -> Vec<R> {
    let ti = nodes[nodes.len() - 1];
    let half = R::lit(0.5) * (t_next - ti);
    let mid = ti + half;
    (0..nodes.len())
        .map(|j| {
            let mut acc = R::zero();
            for (&g, &w) in GAUSS_NODES.iter().zip(&GAUSS_WEIGHTS) {
                let t = mid + half * R::lit(g);
                let mut l = R::one();
                for (k, &tk) in nodes.iter().enumerate() {
                    if k != j {
                        l = l * (t - tk) / (nodes[j] - tk);
                    }
                }
                acc = acc + R::lit(w) * l;
            }
            // ∫ = half·Σ w l, divided by h = 2·half.
            acc * R::lit(0.5)
        })
        .collect()
}

/// Points visited by a solve.
#[derive(Clone, Debug, PartialEq)]
pub struct SolveTrace<R> {
    /// Times of `states`.
    pub times: Vec<R>,
    /// Grid-point states, `x_0` first and the sample last.
    pub states: Vec<Vec<R>>,
    /// Times of the field evaluations, in order.
    pub eval_times: Vec<R>,
    /// States at which the field was evaluated (RK stage states included).
    pub eval_states: Vec<Vec<R>>,
    pub velocities: Vec<Vec<R>>,
    pub nfe: u64,
}

impl<R: Real> SolveTrace<R> {
    fn start(x0: &[R], t0: R) -> Self {
        Self {
            times: vec![t0],
            states: vec![x0.to_vec()],
            eval_times: Vec::new(),
            eval_states: Vec::new(),
            velocities: Vec::new(),
            nfe: 0,
        }
    }

    pub fn final_state(&self) -> &[R] {
        self.states.last().expect("trace has a start state")
    }

    fn evaluate(&mut self, u: &dyn VelocityField<R>, t: R, x: Vec<R>) -> Result<Vec<R>> {
        let mut v = vec![R::zero(); x.len()];
        u.eval(t, &x, &mut v)?;
        if v.iter().any(|c| !c.is_finite()) {
            return Err(Error::Divergence { step: self.states.len() - 1, detail: format!("non-finite velocity at t = {t}") });
        }
        self.nfe += u.cost();
        self.eval_times.push(t);
        self.eval_states.push(x);
        self.velocities.push(v.clone());
        Ok(v)
    }

    fn push_state(&mut self, t: R, x: Vec<R>) -> Result<()> {
        check_finite(&x, self.states.len(), "state")?;
        self.times.push(t);
        self.states.push(x);
        Ok(())
    }

    /// JSON summary: times, per-step norms, NFE and the final sample.
    pub fn to_json(&self) -> serde_json::Value {
        let f = |v: &R| v.to_f64().unwrap_or(f64::NAN);
        let norm = |x: &Vec<R>| x.iter().map(|v| f(v) * f(v)).sum::<f64>().sqrt();
        json!({
            "times": self.times.iter().map(f).collect::<Vec<_>>(),
            "state_norms": self.states.iter().map(norm).collect::<Vec<_>>(),
            "eval_times": self.eval_times.iter().map(f).collect::<Vec<_>>(),
            "velocity_norms": self.velocities.iter().map(norm).collect::<Vec<_>>(),
            "nfe": self.nfe,
            "final": self.final_state().iter().map(f).collect::<Vec<_>>(),
        })
    }
}

pub(crate) fn check_finite<R: Real>(x: &[R], step: usize, what: &str) -> Result<()> {
    let limit = R::lit(DIVERGENCE_LIMIT);
    if let Some(v) = x.iter().find(|v| !(v.abs() <= limit)) {
        return Err(Error::Divergence { step, detail: format!("{what} component {v} is non-finite or exceeds {DIVERGENCE_LIMIT:e}") });
    }
    Ok(())
}

fn check_dim<R: Real>(u: &dyn VelocityField<R>, x0: &[R]) -> Result<()> {
    if x0.len() != u.dim() {
        return Err(Error::DimensionMismatch { expected: u.dim(), got: x0.len() });
    }
    Ok(())
}

fn axpy<R: Real>(y: &mut [R], a: R, x: &[R]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi = *yi + a * xi;
    }
}

/// One Runge–Kutta interval from `(t, x)` with step `h`, recording stages.
fn rk_interval<R: Real>(trace: &mut SolveTrace<R>, u: &dyn VelocityField<R>, tab: &ButcherTableau<R>, t: R, x: &[R], h: R) -> Result<Vec<R>> {
    let mut k: Vec<Vec<R>> = Vec::with_capacity(tab.stages());
    for q in 0..tab.stages() {
        let mut y = x.to_vec();
        for (p, &apq) in tab.a[q].iter().enumerate() {
            if apq != R::zero() {
                axpy(&mut y, h * apq, &k[p]);
            }
        }
        check_finite(&y, trace.states.len() - 1, "stage state")?;
        k.push(trace.evaluate(u, t + tab.c[q] * h, y)?);
    }
    let mut next = x.to_vec();
    for (q, &bq) in tab.b.iter().enumerate() {
        if bq != R::zero() {
            axpy(&mut next, h * bq, &k[q]);
        }
    }
    Ok(next)
}

/// Runge–Kutta over each interval of `grid`: `m·n` evaluations, no reuse
/// between stages or intervals.
pub fn solve_rk<R: Real>(u: &dyn VelocityField<R>, x0: &[R], grid: &TimeGrid<R>, tab: &ButcherTableau<R>) -> Result<SolveTrace<R>> {
    check_dim(u, x0)?;
    let t = grid.times();
    let mut trace = SolveTrace::start(x0, t[0]);
    let mut x = x0.to_vec();
    for i in 0..grid.n() {
        x = rk_interval(&mut trace, u, tab, t[i], &x, t[i + 1] - t[i])?;
        trace.push_state(t[i + 1], x.clone())?;
    }
    Ok(trace)
}

/// Linear multistep over a strictly increasing grid. The first `m - 1`
/// intervals are bootstrapped with classic RK4 (four evaluations each);
/// the RK4 first stage at each grid point doubles as that point's history
/// velocity.
pub fn solve_multistep<R: Real>(u: &dyn VelocityField<R>, x0: &[R], grid: &TimeGrid<R>, scheme: &Multistep<R>) -> Result<SolveTrace<R>> {
    check_dim(u, x0)?;
    let m = scheme.order();
    if let Multistep::Fixed { a, b } = scheme {
        if a.len() != b.len() {
            return Err(Error::Shape(format!("multistep a and b lengths differ ({} vs {})", a.len(), b.len())));
        }
    }
    if m == 0 || m > grid.n() {
        return Err(Error::Shape(format!("a {m}-step scheme needs at least {m} intervals, grid has {}", grid.n())));
    }
    if !grid.is_strict() {
        return Err(Error::InvalidGrid("multistep needs strictly increasing times".into()));
    }
    let t = grid.times();
    let rk4 = ButcherTableau::rk4();
    let mut trace = SolveTrace::start(x0, t[0]);
    let mut xs: Vec<Vec<R>> = vec![x0.to_vec()];
    let mut us: Vec<Vec<R>> = Vec::new();
    for i in 0..grid.n() {
        let h = t[i + 1] - t[i];
        let next = if i + 1 < m {
            let first = trace.velocities.len();
            let next = rk_interval(&mut trace, u, &rk4, t[i], &xs[i], h)?;
            us.push(trace.velocities[first].clone());
            next
        } else {
            let ui = trace.evaluate(u, t[i], xs[i].clone())?;
            us.push(ui);
            let lo = i + 1 - m;
            let (a, b) = scheme.coefficients(&t[lo..=i], t[i + 1]);
            let mut next = vec![R::zero(); x0.len()];
            for j in 0..m {
                axpy(&mut next, a[j], &xs[lo + j]);
                axpy(&mut next, h * b[j], &us[lo + j]);
            }
            next
        };
        trace.push_state(t[i + 1], next.clone())?;
        xs.push(next);
    }
    Ok(trace)
}

/// Options for [`solve_adaptive_rk45`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Rk45Options {
    pub rtol: f64,
    pub atol: f64,
    pub t0: f64,
    pub t1: f64,
    /// Hard cap on accepted + rejected steps.
    pub max_steps: usize,
}

impl Default for Rk45Options {
    fn default() -> Self {
        Self { rtol: 1e-5, atol: 1e-5, t0: 0.0, t1: 1.0, max_steps: 1_000_000 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdaptiveSolution<R> {
    pub state: Vec<R>,
    pub nfe: u64,
    pub accepted: usize,
    pub rejected: usize,
}

const DP_C: [f64; 7] = [0.0, 1.0 / 5.0, 3.0 / 10.0, 4.0 / 5.0, 8.0 / 9.0, 1.0, 1.0];
const DP_A: [&[f64]; 7] = [
    &[],
    &[1.0 / 5.0],
    &[3.0 / 40.0, 9.0 / 40.0],
    &[44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0],
    &[19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0],
    &[9017.0 / 3168.0, -355.0 / 33.0, 46732.0 / 5247.0, 49.0 / 176.0, -5103.0 / 18656.0],
    &[35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0],
];
/// Fifth-order weights minus the embedded fourth-order weights.
const DP_E: [f64; 7] = [
    71.0 / 57600.0,
    0.0,
    -71.0 / 16695.0,
    71.0 / 1920.0,
    -17253.0 / 339200.0,
    22.0 / 525.0,
    -1.0 / 40.0,
];

/// Dormand–Prince 5(4) with PI step-size control and first-same-as-last
/// reuse. Used as the reference solver, so it always runs in `f64`
/// internally whatever `R` is.
pub fn solve_adaptive_rk45<R: Real>(u: &dyn VelocityField<R>, x0: &[R], opts: &Rk45Options) -> Result<AdaptiveSolution<R>> {
    check_dim(u, x0)?;
    if !(opts.rtol > 0.0 && opts.atol > 0.0) {
        return Err(Error::Config(format!("rtol and atol must be positive, got {} and {}", opts.rtol, opts.atol)));
    }
    if !(opts.t1 > opts.t0) {
        return Err(Error::Config(format!("need t1 > t0, got [{}, {}]", opts.t0, opts.t1)));
    }
    let d = x0.len();
    let mut nfe = 0u64;
    let mut f = |t: f64, y: &[f64]| -> Result<Vec<f64>> {
        let yr: Vec<R> = y.iter().map(|&v| R::lit(v)).collect();
        let mut out = vec![R::zero(); d];
        u.eval(R::lit(t), &yr, &mut out)?;
        nfe += u.cost();
        let out: Vec<f64> = out.iter().map(|v| v.to_f64().unwrap_or(f64::NAN)).collect();
        if out.iter().any(|c| !c.is_finite()) {
            return Err(Error::Divergence { step: 0, detail: format!("non-finite velocity at t = {t}") });
        }
        Ok(out)
    };
    let scale = |y: &[f64], z: &[f64], i: usize| opts.atol + opts.rtol * y[i].abs().max(z[i].abs());
    let norm = |v: &[f64], y: &[f64], z: &[f64]| -> f64 {
        if d == 0 {
            return 0.0;
        }
        (v.iter().enumerate().map(|(i, e)| (e / scale(y, z, i)).powi(2)).sum::<f64>() / d as f64).sqrt()
    };

    let mut t = opts.t0;
    let mut y: Vec<f64> = x0.iter().map(|v| v.to_f64().unwrap_or(f64::NAN)).collect();
    let mut k0 = f(t, &y)?;

    // Initial step from the local scale of the solution and its derivative.
    let span = opts.t1 - opts.t0;
    let d0 = norm(&y, &y, &y);
    let d1 = norm(&k0, &y, &y);
    let mut h = if d0 < 1e-5 || d1 < 1e-5 { 1e-6 } else { 0.01 * d0 / d1 };
    h = h.min(span);
    let probe: Vec<f64> = y.iter().zip(&k0).map(|(a, b)| a + h * b).collect();
    let k_probe = f(t + h, &probe)?;
    let diff: Vec<f64> = k_probe.iter().zip(&k0).map(|(a, b)| a - b).collect();
    let d2 = norm(&diff, &y, &y) / h;
    let h1 = if d1.max(d2) <= 1e-15 { (h * 1e-3).max(1e-6) } else { (0.01 / d1.max(d2)).powf(0.2) };
    h = (100.0 * h).min(h1).min(span);

    const SAFETY: f64 = 0.9;
    const FAC_MIN: f64 = 0.2;
    const FAC_MAX: f64 = 10.0;
    const ALPHA: f64 = 0.7 / 5.0;
    const BETA: f64 = 0.4 / 5.0;
    let mut err_prev: f64 = 1e-4;
    let (mut accepted, mut rejected) = (0usize, 0usize);
    let mut last_rejected = false;
    let mut k = vec![vec![0.0; d]; 7];
    while t < opts.t1 {
        if accepted + rejected >= opts.max_steps {
            return Err(Error::Stiffness { t, h });
        }
        if h < 1e-12 {
            return Err(Error::Stiffness { t, h });
        }
        let last = t + h >= opts.t1;
        if last {
            h = opts.t1 - t;
        }
        k[0].clone_from(&k0);
        for s in 1..7 {
            let mut ys = y.clone();
            for (p, &a) in DP_A[s].iter().enumerate() {
                if a != 0.0 {
                    for i in 0..d {
                        ys[i] += h * a * k[p][i];
                    }
                }
            }
            check_finite(&ys, accepted, "stage state")?;
            k[s] = f(if s == 6 { t + h } else { t + DP_C[s] * h }, &ys)?;
            if s == 6 {
                // The last stage point is the fifth-order solution.
                let mut err = vec![0.0; d];
                for (s2, &e) in DP_E.iter().enumerate() {
                    for i in 0..d {
                        err[i] += h * e * k[s2][i];
                    }
                }
                let en = norm(&err, &y, &ys);
                if en <= 1.0 {
                    let en = en.max(1e-10);
                    let mut fac = SAFETY * en.powf(-ALPHA) * err_prev.powf(BETA);
                    fac = fac.clamp(FAC_MIN, FAC_MAX);
                    if last_rejected {
                        fac = fac.min(1.0);
                    }
                    err_prev = en;
                    t = if last { opts.t1 } else { t + h };
                    y = ys;
                    k0 = k[6].clone();
                    accepted += 1;
                    last_rejected = false;
                    h *= fac;
                } else {
                    rejected += 1;
                    last_rejected = true;
                    h *= (SAFETY * en.powf(-0.2)).max(FAC_MIN);
                }
            }
        }
    }
    Ok(AdaptiveSolution { state: y.into_iter().map(R::lit).collect(), nfe, accepted, rejected })
}

/// Non-stationary sampling: `x_{i+1} = a_i x_0 + Σ_{j≤i} b_ij u_{t_j}(x_j)`.
/// Exactly `n` field evaluations.
pub fn solve_ns<R: Real>(theta: &NSSolverParams<R>, u: &dyn VelocityField<R>, x0: &[R]) -> Result<SolveTrace<R>> {
    check_dim(u, x0)?;
    let t = theta.grid().times();
    let mut trace = SolveTrace::start(x0, t[0]);
    let mut x = x0.to_vec();
    for (i, step) in theta.steps().iter().enumerate() {
        trace.evaluate(u, t[i], x)?;
        let mut next: Vec<R> = x0.iter().map(|&v| step.a * v).collect();
        for (j, &b) in step.b.iter().enumerate() {
            axpy(&mut next, b, &trace.velocities[j]);
        }
        if let Err(Error::Divergence { detail, .. }) = check_finite(&next, i + 1, "state") {
            return Err(Error::Divergence { step: i + 1, detail: format!("{detail} (n = {}, a_{i} = {})", theta.n(), step.a) });
        }
        trace.push_state(t[i + 1], next.clone())?;
        x = next;
    }
    Ok(trace)
}

/// Final samples of [`solve_ns`] for many starting points, in parallel.
pub fn solve_ns_batch<R: Real>(theta: &NSSolverParams<R>, u: &dyn VelocityField<R>, x0s: &[Vec<R>]) -> Result<Vec<Vec<R>>> {
    x0s.par_iter().map(|x0| solve_ns(theta, u, x0).map(|tr| tr.final_state().to_vec())).collect()
}

/// A fixed-step method as a function of its evaluation budget.
#[derive(Clone, Debug, PartialEq)]
pub enum Method<R> {
    Rk(ButcherTableau<R>),
    Multistep(Multistep<R>),
}

impl<R: Real> Method<R> {
    pub fn euler() -> Self {
        Method::Rk(ButcherTableau::euler())
    }

    pub fn midpoint() -> Self {
        Method::Rk(ButcherTableau::midpoint())
    }

    pub fn rk4() -> Self {
        Method::Rk(ButcherTableau::rk4())
    }

    pub fn adams(m: usize) -> Self {
        Method::Multistep(Multistep::Adams(m))
    }

    pub fn name(&self) -> String {
        match self {
            Method::Rk(tab) => tab.name().to_string(),
            Method::Multistep(Multistep::Adams(m)) => format!("ab{m}"),
            Method::Multistep(Multistep::Fixed { a, .. }) => format!("lms{}", a.len()),
        }
    }

    /// Evaluations used over `k` intervals.
    pub fn nfe_for(&self, k: usize) -> usize {
        match self {
            Method::Rk(tab) => tab.stages() * k,
            Method::Multistep(ms) => k + 3 * (ms.order().min(k + 1).saturating_sub(1)),
        }
    }

    /// Intervals that spend exactly `nfe` evaluations.
    pub fn intervals(&self, nfe: usize) -> Result<usize> {
        let k = match self {
            Method::Rk(tab) => {
                if nfe % tab.stages() != 0 {
                    None
                } else {
                    Some(nfe / tab.stages())
                }
            }
            Method::Multistep(ms) => nfe.checked_sub(3 * (ms.order().saturating_sub(1))),
        };
        match k {
            Some(k) if k >= 1 && self.nfe_for(k) == nfe && self.min_intervals() <= k => Ok(k),
            _ => Err(Error::Config(format!("{} cannot spend exactly {nfe} evaluations", self.name()))),
        }
    }

    fn min_intervals(&self) -> usize {
        match self {
            Method::Rk(_) => 1,
            Method::Multistep(ms) => ms.order().max(1),
        }
    }

    /// Solve on the uniform grid that spends `nfe` evaluations.
    pub fn solve(&self, u: &dyn VelocityField<R>, x0: &[R], nfe: usize) -> Result<SolveTrace<R>> {
        let grid = TimeGrid::uniform(self.intervals(nfe)?)?;
        self.solve_on(u, x0, &grid)
    }

    pub fn solve_on(&self, u: &dyn VelocityField<R>, x0: &[R], grid: &TimeGrid<R>) -> Result<SolveTrace<R>> {
        match self {
            Method::Rk(tab) => solve_rk(u, x0, grid, tab),
            Method::Multistep(ms) => solve_multistep(u, x0, grid, ms),
        }
    }
}
