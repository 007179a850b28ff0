//! Metrics, NFE sweeps and the solver-taxonomy certification suite.

use std::fmt::Write as _;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::field::{counted, to_velocity, Parameterization, PolynomialField, SharedField, VelocityField};
use crate::nsparams::{canonicalize, embed_generic, embed_st_solver, GeneralUpdateRule, NSSolverParams, NsStep};
use crate::scalar::Real;
use crate::scheduler::Scheduler;
use crate::solver::{solve_ns, Method, SolveTrace, TimeGrid};
use crate::train::{ddim_params, Preconditioned, TrajectoryPair, MSE_CAP};
use crate::transform::STTransform;

pub const DEFAULT_PSNR_RANGE: f64 = 2.0;
pub const PSNR_CAP_DB: f64 = 200.0;

fn to64<R: Real>(v: R) -> f64 {
    v.to_f64().unwrap_or(f64::NAN)
}

fn mse64<R: Real>(a: &[R], b: &[R]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| (to64(x) - to64(y)).powi(2)).sum::<f64>() / a.len().max(1) as f64
}

fn psnr_from_mse(mse: f64, range: f64) -> f64 {
    if !(mse >= range * range * 1e-20) {
        if mse.is_nan() {
            return 10.0 * (range * range / MSE_CAP).log10();
        }
        return PSNR_CAP_DB;
    }
    10.0 * (range * range / mse).log10()
}

/// `10·log10(range²/MSE)`, capped at [`PSNR_CAP_DB`].
pub fn psnr_db<R: Real>(approx: &[R], reference: &[R], range: f64) -> Result<f64> {
    if approx.len() != reference.len() {
        return Err(Error::DimensionMismatch { expected: reference.len(), got: approx.len() });
    }
    if !(range > 0.0) {
        return Err(Error::Config(format!("PSNR range must be positive, got {range}")));
    }
    Ok(psnr_from_mse(mse64(approx, reference), range))
}

pub fn rmse<R: Real>(approx: &[R], reference: &[R]) -> Result<f64> {
    if approx.len() != reference.len() {
        return Err(Error::DimensionMismatch { expected: reference.len(), got: approx.len() });
    }
    Ok(mse64(approx, reference).sqrt())
}

/// Mean PSNR, root of the mean MSE, and whether any sample hit the cap.
/// Missing predictions (divergent solves) count with the capped MSE.
pub fn mean_psnr<R: Real>(preds: &[Option<Vec<R>>], data: &[TrajectoryPair<R>], range: f64) -> Result<(f64, f64, bool)> {
    if preds.len() != data.len() || data.is_empty() {
        return Err(Error::Shape(format!("{} predictions for {} pairs", preds.len(), data.len())));
    }
    let (mut p, mut m, mut capped) = (0.0, 0.0, false);
    for (pred, pair) in preds.iter().zip(data) {
        let mse = match pred {
            Some(x) => {
                if x.len() != pair.x1.len() {
                    return Err(Error::DimensionMismatch { expected: pair.x1.len(), got: x.len() });
                }
                mse64(x, &pair.x1).min(MSE_CAP)
            }
            None => MSE_CAP,
        };
        let v = psnr_from_mse(mse, range);
        capped |= v == PSNR_CAP_DB;
        p += v;
        m += mse;
    }
    let k = data.len() as f64;
    Ok((p / k, (m / k).sqrt(), capped))
}

/// A sampler in a sweep.
#[derive(Clone)]
pub enum SweepSolver<R: Real> {
    Method(Method<R>),
    /// DDIM for ε-prediction on the scheduler.
    Ddim(Scheduler<R>),
    /// Trained NS solvers on a (possibly preconditioned) field; the one
    /// with `n` equal to the NFE is used.
    Bns { name: String, field: Preconditioned<R>, thetas: Vec<NSSolverParams<R>> },
}

impl<R: Real> SweepSolver<R> {
    pub fn name(&self) -> String {
        match self {
            SweepSolver::Method(m) => m.name(),
            SweepSolver::Ddim(_) => "ddim".into(),
            SweepSolver::Bns { name, .. } => name.clone(),
        }
    }

    fn sampler(&self, u: &SharedField<R>, nfe: usize) -> Result<Box<dyn Fn(&[R]) -> Result<Vec<R>> + Sync + '_>> {
        match self {
            SweepSolver::Method(m) => {
                m.intervals(nfe)?;
                let (m, u) = (m.clone(), u.clone());
                Ok(Box::new(move |x0| Ok(m.solve(&*u, x0, nfe)?.final_state().to_vec())))
            }
            SweepSolver::Ddim(s) => {
                let theta = ddim_params(s, nfe)?;
                let u = u.clone();
                Ok(Box::new(move |x0| Ok(solve_ns(&theta, &*u, x0)?.final_state().to_vec())))
            }
            SweepSolver::Bns { field, thetas, name } => {
                let theta = thetas
                    .iter()
                    .find(|t| t.n() == nfe)
                    .ok_or_else(|| Error::Config(format!("no {name} parameters with n = {nfe}")))?
                    .clone();
                Ok(Box::new(move |x0| field.sample(&theta, x0)))
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub solver: String,
    pub nfe: usize,
    pub psnr_db: f64,
    pub rmse: f64,
    pub capped: bool,
    pub wall_ms: f64,
    /// Why the cell could not be computed.
    pub error: Option<String>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SweepReport {
    pub rows: Vec<SweepRow>,
}

impl SweepReport {
    /// CSV with header `solver,nfe,psnr_db,rmse,capped,status`; wall time is
    /// added only with `timing` so repeated runs produce identical files.
    pub fn to_csv(&self, timing: bool) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["solver", "nfe", "psnr_db", "rmse", "capped", "status"];
        if timing {
            header.push("wall_ms");
        }
        w.write_record(&header)?;
        for r in &self.rows {
            let mut rec = vec![
                r.solver.clone(),
                r.nfe.to_string(),
                format!("{:.6}", r.psnr_db),
                format!("{:.6e}", r.rmse),
                r.capped.to_string(),
                r.error.clone().unwrap_or_else(|| "ok".into()),
            ];
            if timing {
                rec.push(format!("{:.3}", r.wall_ms));
            }
            w.write_record(&rec)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
        Ok(String::from_utf8(bytes).expect("csv is utf-8"))
    }

    /// Aligned table; capped cells are starred, wall time only with `timing`.
    pub fn to_table(&self, timing: bool) -> String {
        let mut s = format!("{:<14} {:>5} {:>12} {:>12}", "solver", "nfe", "psnr_db", "rmse");
        s.push_str(if timing { format!(" {:>10}\n", "wall_ms") } else { "\n".to_string() }.as_str());
        for r in &self.rows {
            match &r.error {
                None => {
                    let mark = if r.capped { "*" } else { "" };
                    let _ = write!(s, "{:<14} {:>5} {:>11.3}{mark:1} {:>12.4e}", r.solver, r.nfe, r.psnr_db, r.rmse);
                    if timing {
                        let _ = write!(s, " {:>10.1}", r.wall_ms);
                    }
                    s.push('\n');
                }
                Some(e) => {
                    let _ = writeln!(s, "{:<14} {:>5}  failed: {e}", r.solver, r.nfe);
                }
            }
        }
        s
    }

    pub fn get(&self, solver: &str, nfe: usize) -> Option<&SweepRow> {
        self.rows.iter().find(|r| r.solver == solver && r.nfe == nfe)
    }
}

/// Mean PSNR of every solver at every NFE over `dataset`. Cells that cannot
/// run (budget not divisible, no parameters, numerical failure) are
/// recorded with their error.
pub fn nfe_sweep<R: Real>(u: &SharedField<R>, dataset: &[TrajectoryPair<R>], solvers: &[SweepSolver<R>], nfes: &[usize], range: f64) -> Result<SweepReport> {
    if dataset.is_empty() {
        return Err(Error::Config("sweep dataset is empty".into()));
    }
    let mut rows = Vec::new();
    for solver in solvers {
        for &nfe in nfes {
            let started = Instant::now();
            let cell = solver.sampler(u, nfe).and_then(|sample| {
                let preds: Vec<Option<Vec<R>>> = dataset
                    .par_iter()
                    .map(|p| match sample(&p.x0) {
                        Ok(x) => Ok(Some(x)),
                        Err(Error::Divergence { .. }) => Ok(None),
                        Err(e) => Err(e),
                    })
                    .collect::<Result<_>>()?;
                mean_psnr(&preds, dataset, range)
            });
            let wall_ms = started.elapsed().as_secs_f64() * 1e3;
            let row = match cell {
                Ok((psnr_db, rmse, capped)) => SweepRow { solver: solver.name(), nfe, psnr_db, rmse, capped, wall_ms, error: None },
                Err(e) => SweepRow { solver: solver.name(), nfe, psnr_db: f64::NAN, rmse: f64::NAN, capped: false, wall_ms, error: Some(e.to_string()) },
            };
            rows.push(row);
        }
    }
    Ok(SweepReport { rows })
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaxonomyOptions {
    pub fields: usize,
    pub dim: usize,
    pub rules: usize,
    pub rule_steps: usize,
    pub nfe: usize,
    pub tol: f64,
    pub seed: u64,
    /// Perturb one embedded coefficient by this much to check that the
    /// harness notices.
    pub corrupt: Option<f64>,
}

impl Default for TaxonomyOptions {
    fn default() -> Self {
        Self { fields: 20, dim: 3, rules: 50, rule_steps: 6, nfe: 8, tol: 1e-9, seed: 0, corrupt: None }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaxonomyRow {
    pub field: usize,
    pub check: String,
    pub max_deviation: f64,
    pub pass: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaxonomyReport {
    pub tol: f64,
    pub rows: Vec<TaxonomyRow>,
}

impl TaxonomyReport {
    pub fn passed(&self) -> bool {
        self.rows.iter().all(|r| r.pass)
    }

    pub fn worst(&self, check: &str) -> f64 {
        self.rows.iter().filter(|r| r.check == check).map(|r| r.max_deviation).fold(0.0, f64::max)
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["field", "check", "max_deviation", "tol", "pass"])?;
        for r in &self.rows {
            w.write_record([r.field.to_string(), r.check.clone(), format!("{:.6e}", r.max_deviation), format!("{:e}", self.tol), r.pass.to_string()])?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
        Ok(String::from_utf8(bytes).expect("csv is utf-8"))
    }

    /// Worst deviation per check.
    pub fn to_table(&self) -> String {
        let mut checks: Vec<&str> = Vec::new();
        for r in &self.rows {
            if !checks.contains(&r.check.as_str()) {
                checks.push(&r.check);
            }
        }
        let mut s = format!("{:<14} {:>8} {:>14}  result (tol {:e})\n", "check", "fields", "max_dev", self.tol);
        for c in checks {
            let rows: Vec<_> = self.rows.iter().filter(|r| r.check == c).collect();
            let ok = rows.iter().all(|r| r.pass);
            let _ = writeln!(s, "{:<14} {:>8} {:>14.3e}  {}", c, rows.len(), self.worst(c), if ok { "PASS" } else { "FAIL" });
        }
        s
    }
}

/// Relative max-norm deviation between corresponding points.
fn deviation<R: Real>(a: &[Vec<R>], b: &[Vec<R>]) -> f64 {
    if a.len() != b.len() {
        return f64::INFINITY;
    }
    let mut worst: f64 = 0.0;
    for (x, y) in a.iter().zip(b) {
        for (&p, &q) in x.iter().zip(y) {
            let dev = (to64(p) - to64(q)).abs() / (1.0 + to64(q).abs());
            worst = worst.max(if dev.is_nan() { f64::INFINITY } else { dev });
        }
    }
    worst
}

/// Trajectory deviation between an NS solve and a native one: every
/// evaluation point and the final sample.
fn trace_deviation<R: Real>(ns: &SolveTrace<R>, native: &SolveTrace<R>) -> f64 {
    let mut a = ns.eval_states.clone();
    a.push(ns.final_state().to_vec());
    let mut b = native.eval_states.clone();
    b.push(native.final_state().to_vec());
    deviation(&a, &b)
}

fn corrupted<R: Real>(theta: NSSolverParams<R>, by: Option<f64>) -> Result<NSSolverParams<R>> {
    let Some(by) = by else { return Ok(theta) };
    let mut steps = theta.steps().to_vec();
    let last = steps.len() - 1;
    let NsStep { b, .. } = &mut steps[last];
    b[0] = b[0] + R::lit(by);
    NSSolverParams::new(theta.grid().clone(), steps)
}

/// Closed-form DDIM on an ε-model: `x_{i+1} = (α_{i+1}/α_i)x_i + (σ_{i+1} - σ_i α_{i+1}/α_i)ε_i`.
fn ddim_reference<R: Real>(eps: &dyn VelocityField<R>, scheduler: &Scheduler<R>, grid: &TimeGrid<R>, x0: &[R]) -> Result<Vec<Vec<R>>> {
    let t = grid.times();
    let mut xs = vec![x0.to_vec()];
    for i in 0..grid.n() {
        let (p, q) = (scheduler.eval(t[i])?, scheduler.eval(t[i + 1])?);
        let mut e = vec![R::zero(); x0.len()];
        eps.eval(t[i], &xs[i], &mut e)?;
        let ratio = q.alpha / p.alpha;
        let next = xs[i].iter().zip(&e).map(|(&x, &ei)| ratio * x + (q.sigma - p.sigma * ratio) * ei).collect();
        xs.push(next);
    }
    Ok(xs)
}

/// Certify that generic, scale-time and exponential-integrator solvers are
/// reproduced by their non-stationary embeddings on random smooth fields.
pub fn taxonomy_check(opts: &TaxonomyOptions) -> Result<TaxonomyReport> {
    if opts.fields == 0 {
        return Err(Error::Config("taxonomy suite needs at least one field".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let d = opts.dim;
    let seeds: Vec<u64> = (0..opts.fields).map(|_| rng.random()).collect();
    let per_field: Vec<Vec<TaxonomyRow>> = seeds
        .par_iter()
        .enumerate()
        .map(|(fi, &seed)| -> Result<Vec<TaxonomyRow>> {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let poly = PolynomialField::random(d, 0.5, &mut rng);
            let u: SharedField<f64> = counted(poly.clone());
            let x0: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
            let mut rows = Vec::new();
            let mut push = |check: &str, dev: f64| rows.push(TaxonomyRow { field: fi, check: check.into(), max_deviation: dev, pass: dev <= opts.tol });

            // General linear rules against their canonical form.
            let mut worst: f64 = 0.0;
            for _ in 0..opts.rules {
                let n = opts.rule_steps;
                let c: Vec<Vec<f64>> = (0..n).map(|i| (0..=i).map(|_| rng.random_range(-0.6..0.6)).collect()).collect();
                let dd: Vec<Vec<f64>> = (0..n).map(|i| (0..=i).map(|_| rng.random_range(-0.3..0.3)).collect()).collect();
                let rule = GeneralUpdateRule::new(c, dd)?;
                let mut inner: Vec<f64> = (0..n - 1).map(|_| rng.random_range(0.0..1.0)).collect();
                inner.sort_by(f64::total_cmp);
                let mut times = vec![0.0];
                times.extend(inner);
                times.push(1.0);
                let grid = TimeGrid::non_decreasing(times)?;
                let direct = rule.solve(&grid, &*u, &x0)?;
                let theta = corrupted(canonicalize(&rule, &grid)?, opts.corrupt)?;
                worst = worst.max(deviation(&solve_ns(&theta, &*u, &x0)?.states, &direct));
            }
            push("canonicalize", worst);

            for (label, method) in [("euler", Method::euler()), ("midpoint", Method::midpoint()), ("rk4", Method::rk4()), ("ab2", Method::adams(2))] {
                let theta = corrupted(embed_generic(&method, opts.nfe)?, opts.corrupt)?;
                let dev = trace_deviation(&solve_ns(&theta, &*u, &x0)?, &method.solve(&*u, &x0, opts.nfe)?);
                push(label, dev);
            }

            let theta = embed_st_solver(&Method::midpoint(), &STTransform::Identity, opts.nfe)?;
            let dev = trace_deviation(&solve_ns(&corrupted(theta, opts.corrupt)?, &*u, &x0)?, &Method::midpoint().solve(&*u, &x0, opts.nfe)?);
            push("identity_st", dev);

            // The affine part read as an ε-model on VP; DDIM grows x by
            // α_1/α_0 ≈ 150, which quadratic terms would amplify without bound.
            let vp = Scheduler::vp();
            let eps: SharedField<f64> = counted(poly.affine_part());
            let v = to_velocity(eps.clone(), Parameterization::EpsPred, vp.clone());
            let theta = corrupted(ddim_params(&vp, opts.nfe)?, opts.corrupt)?;
            let ns = solve_ns(&theta, &*v, &x0)?;
            let reference = ddim_reference(&*eps, &vp, &TimeGrid::uniform(opts.nfe)?, &x0)?;
            push("ei_ddim", deviation(&ns.states, &reference));
            Ok(rows)
        })
        .collect::<Result<_>>()?;
    Ok(TaxonomyReport { tol: opts.tol, rows: per_field.into_iter().flatten().collect() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::{gmm_marginal_velocity, GaussianMixture};
    use crate::solver::Rk45Options;
    use crate::train::generate_dataset;

    #[test]
    fn psnr_examples() {
        assert_eq!(psnr_db(&[0.3, 0.1], &[0.3, 0.1], 2.0).unwrap(), PSNR_CAP_DB);
        assert!((psnr_db(&[2.0], &[0.0], 2.0).unwrap()).abs() < 1e-12);
        assert!((psnr_db(&[0.02; 5], &[0.0; 5], 2.0).unwrap() - 40.0).abs() < 1e-9);
        assert!(psnr_db(&[0.0], &[0.0, 1.0], 2.0).is_err());
        assert!(psnr_db(&[0.0], &[0.0], 0.0).is_err());
    }

    #[test]
    fn psnr_symmetry_and_permutation_invariance() {
        let a = [0.1, -0.4, 0.9];
        let b = [0.3, 0.2, 0.5];
        let p = psnr_db(&a, &b, 2.0).unwrap();
        assert_eq!(p, psnr_db(&b, &a, 2.0).unwrap());
        assert!((p - psnr_db(&[0.9, 0.1, -0.4], &[0.5, 0.3, 0.2], 2.0).unwrap()).abs() < 1e-12);
        assert!((rmse(&a, &b).unwrap() - (0.56f64 / 3.0).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn delta_data_sweep_is_capped() {
        let u = gmm_marginal_velocity(GaussianMixture::single(vec![0.4, 0.1], 0.0).unwrap(), Scheduler::Ot).unwrap();
        let data: Vec<_> = generate_dataset(&*u, 1.0, 10, &Rk45Options::default(), 3)
            .unwrap()
            .into_iter()
            .map(|p| TrajectoryPair { x0: p.x0, x1: vec![0.4, 0.1] })
            .collect();
        let rep = nfe_sweep(&u, &data, &[SweepSolver::Method(Method::euler())], &[1, 2, 4], 2.0).unwrap();
        assert!(rep.rows.iter().all(|r| r.psnr_db > 150.0), "{rep:?}");
    }

    #[test]
    fn midpoint_beats_euler_on_exponential() {
        let u: SharedField<f64> = counted(PolynomialField::scaled_identity(1, 1.0));
        let data = vec![TrajectoryPair { x0: vec![1.0], x1: vec![std::f64::consts::E] }];
        let solvers = [SweepSolver::Method(Method::euler()), SweepSolver::Method(Method::midpoint())];
        let rep = nfe_sweep(&u, &data, &solvers, &[2, 4, 8, 16], 2.0).unwrap();
        for nfe in [2, 4, 8, 16] {
            assert!(rep.get("midpoint", nfe).unwrap().psnr_db > rep.get("euler", nfe).unwrap().psnr_db);
        }
        // Odd budgets fail for midpoint without aborting the sweep.
        let rep = nfe_sweep(&u, &data, &solvers, &[3], 2.0).unwrap();
        assert!(rep.get("midpoint", 3).unwrap().error.is_some());
        assert!(rep.get("euler", 3).unwrap().error.is_none());
        let csv = rep.to_csv(false).unwrap();
        assert!(csv.starts_with("solver,nfe,psnr_db,rmse,capped,status\n"));
        assert!(!csv.contains("wall_ms"));
    }

    #[test]
    fn taxonomy_passes_and_detects_corruption() {
        let opts = TaxonomyOptions { fields: 3, rules: 5, ..Default::default() };
        let rep = taxonomy_check(&opts).unwrap();
        assert!(rep.passed(), "{}", rep.to_table());
        assert!(rep.worst("identity_st") < 1e-15);
        let bad = taxonomy_check(&TaxonomyOptions { corrupt: Some(1e-3), ..opts }).unwrap();
        assert!(!bad.passed());
        for check in ["canonicalize", "euler", "midpoint", "rk4", "ab2", "ei_ddim"] {
            assert!(bad.worst(check) > 1e-9, "{check}");
        }
    }
}
