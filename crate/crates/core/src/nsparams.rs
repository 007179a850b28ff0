//! Non-stationary solver parameters θ = (grid, {(a_i, b_i)}).
//!
//! Step `i` of an `n`-step solver evaluates `u_i = u(t_i, x_i)` and sets
//! `x_{i+1} = a_i x_0 + Σ_{j≤i} b_ij u_j`. Every update rule that combines
//! previous points and velocities linearly reduces to this form
//! ([`canonicalize`]); Runge–Kutta, multistep, scale-time and exponential
//! integrator schemes embed into it exactly ([`embed_st_solver`]).

use std::fmt::Write as _;
use std::path::Path;

use serde::Deserialize;

use crate::error::{Error, Result};
use crate::field::VelocityField;
use crate::scalar::{softplus, softplus_inv, Real};
use crate::solver::{Method, TimeGrid};
use crate::transform::STTransform;

#[derive(Clone, Debug, PartialEq)]
pub struct NsStep<R> {
    pub a: R,
    pub b: Vec<R>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NSSolverParams<R> {
    grid: TimeGrid<R>,
    steps: Vec<NsStep<R>>,
}

/// Serialized size: all `n + 1` grid times, `n` values `a_i` and the
/// `n(n+1)/2` entries of the `b_i`.
pub fn param_count(n: usize) -> Result<usize> {
    if n < 1 {
        return Err(Error::Config("an NS solver needs at least one step".into()));
    }
    Ok(n * (n + 5) / 2 + 1)
}

/// Free parameters seen by the optimizer: `n` raw time increments (their
/// overall scale is not identified, so one of them is redundant), `n`
/// values `a_i` and `n(n+1)/2` entries `b_ij`.
pub fn free_param_count(n: usize) -> usize {
    2 * n + n * (n + 1) / 2
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ThetaFile {
    n: usize,
    grid: Vec<f64>,
    steps: Vec<StepFile>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct StepFile {
    a: f64,
    b: Vec<f64>,
}

fn f64_of<R: Real>(v: R) -> f64 {
    v.to_f64().unwrap_or(f64::NAN)
}

impl<R: Real> NSSolverParams<R> {
    pub fn new(grid: TimeGrid<R>, steps: Vec<NsStep<R>>) -> Result<Self> {
        if steps.len() != grid.n() {
            return Err(Error::Shape(format!("{} steps for a grid with {} intervals", steps.len(), grid.n())));
        }
        for (i, s) in steps.iter().enumerate() {
            if s.b.len() != i + 1 {
                return Err(Error::Shape(format!("b_{i} needs {} entries, got {}", i + 1, s.b.len())));
            }
            if !s.a.is_finite() || s.b.iter().any(|v| !v.is_finite()) {
                return Err(Error::Shape(format!("step {i} has non-finite coefficients")));
            }
        }
        Ok(Self { grid, steps })
    }

    pub fn n(&self) -> usize {
        self.steps.len()
    }

    pub fn grid(&self) -> &TimeGrid<R> {
        &self.grid
    }

    pub fn steps(&self) -> &[NsStep<R>] {
        &self.steps
    }

    /// `[t_0..t_n, a_0..a_{n-1}, b_0, b_1, …]`, of length [`param_count`].
    pub fn flatten(&self) -> Vec<R> {
        let mut v = self.grid.times().to_vec();
        v.extend(self.steps.iter().map(|s| s.a));
        for s in &self.steps {
            v.extend_from_slice(&s.b);
        }
        v
    }

    pub fn unflatten(n: usize, v: &[R]) -> Result<Self> {
        let want = param_count(n)?;
        if v.len() != want {
            return Err(Error::Shape(format!("expected {want} values for n = {n}, got {}", v.len())));
        }
        let grid = TimeGrid::non_decreasing(v[..=n].to_vec())?;
        let a = &v[n + 1..2 * n + 1];
        let mut off = 2 * n + 1;
        let steps = (0..n)
            .map(|i| {
                let b = v[off..off + i + 1].to_vec();
                off += i + 1;
                NsStep { a: a[i], b }
            })
            .collect();
        Self::new(grid, steps)
    }

    /// `{"n", "grid", "steps": [{"a", "b"}]}` with 17 significant digits.
    pub fn to_json(&self) -> String {
        let num = |v: R| format!("{:.16e}", f64_of(v));
        let list = |xs: &[R]| xs.iter().map(|&v| num(v)).collect::<Vec<_>>().join(", ");
        let mut s = String::new();
        let _ = writeln!(s, "{{\n  \"n\": {},\n  \"grid\": [{}],\n  \"steps\": [", self.n(), list(self.grid.times()));
        for (i, st) in self.steps.iter().enumerate() {
            let sep = if i + 1 == self.n() { "" } else { "," };
            let _ = writeln!(s, "    {{\"a\": {}, \"b\": [{}]}}{sep}", num(st.a), list(&st.b));
        }
        s.push_str("  ]\n}\n");
        s
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let f: ThetaFile = serde_json::from_str(text)?;
        if f.grid.len() != f.n + 1 {
            return Err(Error::Shape(format!("n = {} needs {} grid times, got {}", f.n, f.n + 1, f.grid.len())));
        }
        let grid = TimeGrid::non_decreasing(f.grid.into_iter().map(R::lit).collect())?;
        let steps = f.steps.into_iter().map(|s| NsStep { a: R::lit(s.a), b: s.b.into_iter().map(R::lit).collect() }).collect();
        Self::new(grid, steps)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

/// `x_{i+1} = Σ_{j≤i} c_ij x_j + Σ_{j≤i} d_ij u_j`.
#[derive(Clone, Debug, PartialEq)]
pub struct GeneralUpdateRule<R> {
    c: Vec<Vec<R>>,
    d: Vec<Vec<R>>,
}

impl<R: Real> GeneralUpdateRule<R> {
    pub fn new(c: Vec<Vec<R>>, d: Vec<Vec<R>>) -> Result<Self> {
        if c.len() != d.len() {
            return Err(Error::Shape(format!("{} c rows but {} d rows", c.len(), d.len())));
        }
        for (i, (ci, di)) in c.iter().zip(&d).enumerate() {
            if ci.len() != i + 1 || di.len() != i + 1 {
                return Err(Error::Shape(format!("step {i} needs {} coefficients, got c: {}, d: {}", i + 1, ci.len(), di.len())));
            }
        }
        Ok(Self { c, d })
    }

    pub fn n(&self) -> usize {
        self.c.len()
    }

    pub fn c(&self) -> &[Vec<R>] {
        &self.c
    }

    pub fn d(&self) -> &[Vec<R>] {
        &self.d
    }

    /// Run the rule directly on `grid`.
    pub fn solve(&self, grid: &TimeGrid<R>, u: &dyn VelocityField<R>, x0: &[R]) -> Result<Vec<Vec<R>>> {
        if grid.n() != self.n() {
            return Err(Error::Shape(format!("rule has {} steps, grid {} intervals", self.n(), grid.n())));
        }
        let t = grid.times();
        let mut xs = vec![x0.to_vec()];
        let mut us: Vec<Vec<R>> = Vec::new();
        for i in 0..self.n() {
            let mut v = vec![R::zero(); x0.len()];
            u.eval(t[i], &xs[i], &mut v)?;
            us.push(v);
            let mut next = vec![R::zero(); x0.len()];
            for j in 0..=i {
                for k in 0..x0.len() {
                    next[k] = next[k] + self.c[i][j] * xs[j][k] + self.d[i][j] * us[j][k];
                }
            }
            crate::solver::check_finite(&next, i + 1, "state")?;
            xs.push(next);
        }
        Ok(xs)
    }
}

/// Rewrite a general rule in terms of `x_0` and velocities only.
pub fn canonicalize<R: Real>(rule: &GeneralUpdateRule<R>, grid: &TimeGrid<R>) -> Result<NSSolverParams<R>> {
    if grid.n() != rule.n() {
        return Err(Error::Shape(format!("rule has {} steps, grid {} intervals", rule.n(), grid.n())));
    }
    let mut steps: Vec<NsStep<R>> = Vec::with_capacity(rule.n());
    for k in 0..rule.n() {
        let (c, d) = (&rule.c[k], &rule.d[k]);
        // x_{j+1} = a_j x_0 + Σ b_j u, so its coefficient c_{j+1} distributes over step j.
        let mut a = c[0];
        let mut b = d.clone();
        for (j, prev) in steps.iter().enumerate() {
            let w = c[j + 1];
            a = a + w * prev.a;
            for (l, &bl) in prev.b.iter().enumerate() {
                b[l] = b[l] + w * bl;
            }
        }
        steps.push(NsStep { a, b });
    }
    NSSolverParams::new(grid.clone(), steps)
}

/// A method written as a general rule over its own evaluation points, with
/// the times of those points (the sample at time 1 last).
fn method_rule<R: Real>(method: &Method<R>, grid: &[R]) -> Result<(GeneralUpdateRule<R>, Vec<R>)> {
    let mut c: Vec<Vec<R>> = Vec::new();
    let mut d: Vec<Vec<R>> = Vec::new();
    let mut times: Vec<R> = Vec::new();
    // Adds the point produced by combining `xs` (point index, weight) and `us`.
    let mut push = |c: &mut Vec<Vec<R>>, d: &mut Vec<Vec<R>>, xs: &[(usize, R)], us: &[(usize, R)]| {
        let len = c.len() + 1;
        let (mut ci, mut di) = (vec![R::zero(); len], vec![R::zero(); len]);
        for &(j, w) in xs {
            ci[j] = ci[j] + w;
        }
        for &(j, w) in us {
            di[j] = di[j] + w;
        }
        c.push(ci);
        d.push(di);
    };
    let rk_interval = |c: &mut Vec<Vec<R>>, d: &mut Vec<Vec<R>>, times: &mut Vec<R>, tab: &crate::solver::ButcherTableau<R>, t: R, h: R, push: &mut dyn FnMut(&mut Vec<Vec<R>>, &mut Vec<Vec<R>>, &[(usize, R)], &[(usize, R)])| -> Result<()> {
        if tab.c()[0] != R::zero() || tab.c().windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::Config(format!("{} needs c_0 = 0 and non-decreasing nodes to embed", tab.name())));
        }
        let base = c.len();
        for q in 0..tab.stages() {
            times.push(t + tab.c()[q] * h);
            let us: Vec<(usize, R)> = if q + 1 < tab.stages() {
                tab.a()[q + 1].iter().enumerate().map(|(p, &a)| (base + p, h * a)).collect()
            } else {
                tab.b().iter().enumerate().map(|(p, &b)| (base + p, h * b)).collect()
            };
            push(c, d, &[(base, R::one())], &us);
        }
        Ok(())
    };
    let k = grid.len() - 1;
    match method {
        Method::Rk(tab) => {
            for i in 0..k {
                rk_interval(&mut c, &mut d, &mut times, tab, grid[i], grid[i + 1] - grid[i], &mut push)?;
            }
        }
        Method::Multistep(ms) => {
            let m = ms.order();
            if m == 0 || m > k {
                return Err(Error::Shape(format!("a {m}-step scheme needs at least {m} intervals, grid has {k}")));
            }
            let rk4 = crate::solver::ButcherTableau::rk4();
            // Point index of each grid state.
            let mut at: Vec<usize> = vec![0];
            for i in 0..k {
                let h = grid[i + 1] - grid[i];
                if i + 1 < m {
                    rk_interval(&mut c, &mut d, &mut times, &rk4, grid[i], h, &mut push)?;
                } else {
                    times.push(grid[i]);
                    let lo = i + 1 - m;
                    let (a, b) = ms.coefficients(&grid[lo..=i], grid[i + 1]);
                    let xs: Vec<(usize, R)> = (0..m).map(|j| (at[lo + j], a[j])).collect();
                    let us: Vec<(usize, R)> = (0..m).map(|j| (at[lo + j], h * b[j])).collect();
                    push(&mut c, &mut d, &xs, &us);
                }
                at.push(c.len());
            }
        }
    }
    times.push(grid[k]);
    Ok((GeneralUpdateRule::new(c, d)?, times))
}

/// Embed `method` run on the given grid of the original time.
pub fn embed_generic_on<R: Real>(method: &Method<R>, grid: &TimeGrid<R>) -> Result<NSSolverParams<R>> {
    embed_st_solver_on(method, &STTransform::Identity, grid)
}

/// Embed `method` on the uniform grid that spends `nfe` evaluations.
pub fn embed_generic<R: Real>(method: &Method<R>, nfe: usize) -> Result<NSSolverParams<R>> {
    embed_generic_on(method, &TimeGrid::uniform(method.intervals(nfe)?)?)
}

pub fn embed_euler<R: Real>(n: usize) -> Result<NSSolverParams<R>> {
    embed_generic(&Method::euler(), n)
}

pub fn embed_midpoint<R: Real>(nfe: usize) -> Result<NSSolverParams<R>> {
    embed_generic(&Method::midpoint(), nfe)
}

/// Embed "scale `x_0` by `s_0`, run `method` on the transformed field over
/// a uniform `r`-grid, divide by `s_1`".
pub fn embed_st_solver<R: Real>(method: &Method<R>, transform: &STTransform<R>, nfe: usize) -> Result<NSSolverParams<R>> {
    embed_st_solver_on(method, transform, &TimeGrid::uniform(method.intervals(nfe)?)?)
}

/// As [`embed_st_solver`] with an explicit `r`-grid.
///
/// With `x̄_j = s_j x_j` and `ū_j = ṡ_j x_j + ṫ_j s_j u_j`, a rule
/// `x̄_{i+1} = Σ c̄_ij x̄_j + Σ d̄_ij ū_j` becomes
/// `c_ij = (c̄_ij s_j + d̄_ij ṡ_j)/s_{i+1}`, `d_ij = d̄_ij ṫ_j s_j/s_{i+1}`.
pub fn embed_st_solver_on<R: Real>(method: &Method<R>, transform: &STTransform<R>, r_grid: &TimeGrid<R>) -> Result<NSSolverParams<R>> {
    let (rule, r_times) = method_rule(method, r_grid.times())?;
    let pts = r_times.iter().map(|&r| transform.eval(r)).collect::<Result<Vec<_>>>()?;
    let snap = R::lit(1e-12);
    let n = rule.n();
    if pts[0].t.abs() > snap {
        return Err(Error::Domain(format!(
            "transform {} starts at t = {}; NS solvers start at t = 0",
            transform.name(),
            pts[0].t
        )));
    }
    let mut times: Vec<R> = pts.iter().map(|p| p.t).collect();
    times[0] = R::zero();
    if (times[n] - R::one()).abs() > snap {
        return Err(Error::Domain(format!("transform {} ends at t = {}", transform.name(), times[n])));
    }
    times[n] = R::one();
    let grid = TimeGrid::non_decreasing(times)?;
    let mut c = rule.c.clone();
    let mut d = rule.d.clone();
    for i in 0..n {
        let s_next = pts[i + 1].s;
        for j in 0..=i {
            let p = &pts[j];
            c[i][j] = (rule.c[i][j] * p.s + rule.d[i][j] * p.ds) / s_next;
            d[i][j] = rule.d[i][j] * p.dt * p.s / s_next;
        }
    }
    canonicalize(&GeneralUpdateRule::new(c, d)?, &grid)
}

/// Unconstrained training parameters: `[raw_0..raw_{n-1}, a_0..a_{n-1}, b_0, b_1, …]`.
/// Time increments are `softplus(raw_j)`, normalized to sum to one.
#[derive(Clone, Debug, PartialEq)]
pub struct RawNSParams<R> {
    pub n: usize,
    pub values: Vec<R>,
}

impl<R: Real> RawNSParams<R> {
    pub fn new(n: usize, values: Vec<R>) -> Result<Self> {
        if n == 0 || values.len() != free_param_count(n) {
            return Err(Error::Shape(format!("expected {} raw values for n = {n}, got {}", free_param_count(n), values.len())));
        }
        Ok(Self { n, values })
    }

    pub fn time_raw(&self) -> &[R] {
        &self.values[..self.n]
    }
}

/// Cumulative softplus increments normalized to `[0, 1]`.
pub fn raw_times<R: Real>(raw: &[R]) -> Vec<R> {
    let inc: Vec<R> = raw.iter().map(|&v| softplus(v)).collect();
    let total: R = inc.iter().copied().sum();
    let mut times = Vec::with_capacity(raw.len() + 1);
    let mut acc = R::zero();
    times.push(R::zero());
    for (j, &h) in inc.iter().enumerate() {
        acc = acc + h;
        times.push(if j + 1 == raw.len() { R::one() } else { acc / total });
    }
    times
}

pub fn raw_to_constrained<R: Real>(raw: &RawNSParams<R>) -> Result<NSSolverParams<R>> {
    if raw.values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Shape("raw parameters must be finite".into()));
    }
    let n = raw.n;
    let times = raw_times(raw.time_raw());
    let mut off = 2 * n;
    let steps = (0..n)
        .map(|i| {
            let b = raw.values[off..off + i + 1].to_vec();
            off += i + 1;
            NsStep { a: raw.values[n + i], b }
        })
        .collect();
    NSSolverParams::new(TimeGrid::non_decreasing(times)?, steps)
}

/// Inverse of [`raw_to_constrained`], choosing the representative whose
/// increments average `ln 2` (so an all-zero raw vector is the uniform grid).
/// Needs a strictly increasing grid.
pub fn constrained_to_raw<R: Real>(theta: &NSSolverParams<R>) -> Result<RawNSParams<R>> {
    let t = theta.grid().times();
    let n = theta.n();
    let scale = R::from_usize(n).unwrap() * R::lit(std::f64::consts::LN_2);
    let mut values = Vec::with_capacity(free_param_count(n));
    for w in t.windows(2) {
        let h = w[1] - w[0];
        if !(h > R::zero()) {
            return Err(Error::InvalidGrid("raw parameterization needs strictly increasing times".into()));
        }
        values.push(softplus_inv(h * scale));
    }
    values.extend(theta.steps().iter().map(|s| s.a));
    for s in theta.steps() {
        values.extend_from_slice(&s.b);
    }
    RawNSParams::new(n, values)
}

/// Pull coincident grid times apart by `frac` of the neighbouring interval
/// so the grid can be reparameterized. Coefficients are unchanged.
pub fn separate_ties<R: Real>(theta: &NSSolverParams<R>, frac: R) -> Result<NSSolverParams<R>> {
    let mut t = theta.grid().times().to_vec();
    let n = t.len() - 1;
    let mut a = 0;
    while a < n {
        let mut b = a;
        while b < n && t[b + 1] == t[a] {
            b += 1;
        }
        if b > a {
            let step = |k: usize| R::from_usize(k).unwrap() * frac;
            if b < n {
                // Spread forward into the next interval.
                let (base, gap) = (t[a], t[b + 1] - t[a]);
                for k in 1..=b - a {
                    t[a + k] = base + gap * step(k);
                }
            } else {
                // The run ends at t_n = 1, which stays fixed; spread backward.
                let (base, gap) = (t[b], t[b] - t[a - 1]);
                for k in 0..b - a {
                    t[a + k] = base - gap * step(b - a - k);
                }
            }
        }
        a = b + 1;
    }
    NSSolverParams::new(TimeGrid::new(t)?, theta.steps().to_vec())
}
