//! Bespoke non-stationary solver optimization.
//!
//! θ is trained on the preconditioned field `ū` (scheduler `(α, σ0·σ)`):
//! samples start at `x̄_0 = s_0·x_0` and are recovered as `x_n/s_1`, so the
//! loss always compares against the original targets.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{mean_psnr, DEFAULT_PSNR_RANGE};
use crate::field::{jet, SharedField, VelocityField};
use crate::nsparams::{constrained_to_raw, embed_generic, embed_st_solver_on, raw_times, raw_to_constrained, separate_ties, NSSolverParams, RawNSParams};
use crate::scalar::{sigmoid, Real};
use crate::scheduler::Scheduler;
use crate::solver::{solve_adaptive_rk45, solve_ns, Method, Rk45Options, TimeGrid};
use crate::transform::{ddim_r_grid, ei_transform_snr_linear, precondition, STTransform};
use crate::field::Parameterization;

/// Floor on the per-sample MSE inside the log.
pub const MSE_FLOOR: f64 = 1e-20;
/// Per-sample MSE assigned to divergent forward passes.
pub const MSE_CAP: f64 = 1e12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryPair<R> {
    pub x0: Vec<R>,
    pub x1: Vec<R>,
}

/// Oracle work per generated pair.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OracleStats {
    pub min_nfe: u64,
    pub max_nfe: u64,
    pub mean_nfe: f64,
}

/// Draw `count` sources `x_0 ~ N(0, source_std² I)` and solve each with the
/// adaptive oracle. Sources are drawn sequentially from one seeded stream;
/// solves run in parallel.
pub fn generate_dataset<R: Real>(
    u: &dyn VelocityField<R>,
    source_std: R,
    count: usize,
    opts: &Rk45Options,
    seed: u64,
) -> Result<Vec<TrajectoryPair<R>>> {
    Ok(generate_dataset_with_stats(u, source_std, count, opts, seed)?.0)
}

pub fn generate_dataset_with_stats<R: Real>(
    u: &dyn VelocityField<R>,
    source_std: R,
    count: usize,
    opts: &Rk45Options,
    seed: u64,
) -> Result<(Vec<TrajectoryPair<R>>, OracleStats)> {
    if count == 0 {
        return Err(Error::Config("dataset count must be at least 1".into()));
    }
    let d = u.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sources: Vec<Vec<R>> = (0..count)
        .map(|_| (0..d).map(|_| source_std * R::lit(StandardNormal.sample(&mut rng))).collect())
        .collect();
    let solved: Vec<(TrajectoryPair<R>, u64)> = sources
        .into_par_iter()
        .enumerate()
        .map(|(i, x0)| match solve_adaptive_rk45(u, &x0, opts) {
            Ok(sol) => Ok((TrajectoryPair { x0, x1: sol.state }, sol.nfe)),
            Err(e) => Err(Error::Divergence { step: i, detail: format!("oracle failed on sample {i}: {e}") }),
        })
        .collect::<Result<_>>()?;
    let nfes: Vec<u64> = solved.iter().map(|s| s.1).collect();
    let stats = OracleStats {
        min_nfe: *nfes.iter().min().unwrap(),
        max_nfe: *nfes.iter().max().unwrap(),
        mean_nfe: nfes.iter().sum::<u64>() as f64 / count as f64,
    };
    Ok((solved.into_iter().map(|s| s.0).collect(), stats))
}

/// Source standard deviation `σ_0` of a scheduler.
pub fn source_std<R: Real>(scheduler: &Scheduler<R>) -> Result<R> {
    Ok(scheduler.eval(R::zero())?.sigma)
}

/// JSON array of `{"x0": [...], "x1": [...]}` with 17 significant digits.
pub fn dataset_to_json<R: Real>(pairs: &[TrajectoryPair<R>]) -> String {
    let list = |xs: &[R]| xs.iter().map(|v| format!("{:.16e}", v.to_f64().unwrap_or(f64::NAN))).collect::<Vec<_>>().join(", ");
    let rows: Vec<String> = pairs.iter().map(|p| format!("  {{\"x0\": [{}], \"x1\": [{}]}}", list(&p.x0), list(&p.x1))).collect();
    format!("[\n{}\n]\n", rows.join(",\n"))
}

pub fn dataset_from_json<R: Real>(text: &str) -> Result<Vec<TrajectoryPair<R>>> {
    #[derive(Deserialize)]
    #[serde(deny_unknown_fields)]
    struct Row {
        x0: Vec<f64>,
        x1: Vec<f64>,
    }
    let rows: Vec<Row> = serde_json::from_str(text)?;
    if rows.is_empty() {
        return Err(Error::Config("dataset is empty".into()));
    }
    let d = rows[0].x0.len();
    rows.into_iter()
        .enumerate()
        .map(|(i, r)| {
            if r.x0.len() != d || r.x1.len() != d {
                return Err(Error::Shape(format!("record {i} has dimensions {}/{}, expected {d}", r.x0.len(), r.x1.len())));
            }
            if r.x0.iter().chain(&r.x1).any(|v| !v.is_finite()) {
                return Err(Error::Shape(format!("record {i} is not finite")));
            }
            Ok(TrajectoryPair { x0: r.x0.into_iter().map(R::lit).collect(), x1: r.x1.into_iter().map(R::lit).collect() })
        })
        .collect()
}

pub fn save_dataset<R: Real>(path: &Path, pairs: &[TrajectoryPair<R>]) -> Result<()> {
    std::fs::write(path, dataset_to_json(pairs))?;
    Ok(())
}

pub fn load_dataset<R: Real>(path: &Path) -> Result<Vec<TrajectoryPair<R>>> {
    dataset_from_json(&std::fs::read_to_string(path)?)
}

/// A field together with the scale change that preconditions it.
#[derive(Clone)]
pub struct Preconditioned<R: Real> {
    pub field: SharedField<R>,
    pub transform: STTransform<R>,
    pub s0: R,
    pub s1: R,
}

impl<R: Real> Preconditioned<R> {
    pub fn new(u: SharedField<R>, scheduler: &Scheduler<R>, sigma0: R) -> Result<Self> {
        let (field, transform) = precondition(u, scheduler, sigma0)?;
        let s0 = transform.eval(R::zero())?.s;
        let s1 = transform.eval(R::one())?.s;
        Ok(Self { field, transform, s0, s1 })
    }

    /// No preconditioning.
    pub fn identity(u: SharedField<R>) -> Self {
        Self { field: u, transform: STTransform::Identity, s0: R::one(), s1: R::one() }
    }

    pub fn start(&self, x0: &[R]) -> Vec<R> {
        x0.iter().map(|&v| v * self.s0).collect()
    }

    pub fn finish(&self, xn: &[R]) -> Vec<R> {
        xn.iter().map(|&v| v / self.s1).collect()
    }

    /// Sample with θ trained for this field.
    pub fn sample(&self, theta: &NSSolverParams<R>, x0: &[R]) -> Result<Vec<R>> {
        let tr = solve_ns(theta, &*self.field, &self.start(x0))?;
        Ok(self.finish(tr.final_state()))
    }
}

fn mse<R: Real>(a: &[R], b: &[R]) -> R {
    let d = R::from_usize(a.len()).unwrap();
    a.iter().zip(b).map(|(&x, &y)| (x - y) * (x - y)).sum::<R>() / d
}

/// Per-sample loss `-ln max(MSE, floor)`, with divergent passes at the cap.
fn sample_loss<R: Real>(pred: Option<&[R]>, target: &[R]) -> (R, R) {
    let m = match pred {
        Some(p) => mse(p, target),
        None => R::lit(MSE_CAP),
    };
    let m = if m.is_finite() { m.min(R::lit(MSE_CAP)) } else { R::lit(MSE_CAP) };
    (-m.max(R::lit(MSE_FLOOR)).ln(), m)
}

/// `-mean ln ‖x_n^θ - x(1)‖²` over `batch`, with `‖v‖² = (1/d)Σ v_i²`.
pub fn loss<R: Real>(theta: &NSSolverParams<R>, pre: &Preconditioned<R>, batch: &[TrajectoryPair<R>]) -> Result<R> {
    if batch.is_empty() {
        return Err(Error::Config("empty batch".into()));
    }
    let losses: Vec<R> = batch
        .par_iter()
        .map(|p| {
            let pred = pre.sample(theta, &p.x0)?;
            Ok(sample_loss(Some(&pred), &p.x1).0)
        })
        .collect::<Result<_>>()?;
    Ok(losses.into_iter().sum::<R>() / R::from_usize(batch.len()).unwrap())
}

/// Loss and gradient for one pair with respect to the constrained θ:
/// `(loss, d/dt_k for every grid time, d/da_i, d/db_ij row by row)`.
/// Divergent passes return the capped loss and a zero gradient.
struct SampleGrad<R> {
    loss: R,
    diverged: bool,
    dt: Vec<R>,
    da: Vec<R>,
    db: Vec<R>,
}

fn sample_grad<R: Real>(theta: &NSSolverParams<R>, pre: &Preconditioned<R>, pair: &TrajectoryPair<R>) -> Result<SampleGrad<R>> {
    let n = theta.n();
    let d = pair.x0.len();
    let zero = |len| vec![R::zero(); len];
    let nb = n * (n + 1) / 2;
    let x0 = pre.start(&pair.x0);
    let trace = match solve_ns(theta, &*pre.field, &x0) {
        Ok(tr) => tr,
        Err(Error::Divergence { .. }) => {
            let (l, _) = sample_loss::<R>(None, &pair.x1);
            return Ok(SampleGrad { loss: l, diverged: true, dt: zero(n + 1), da: zero(n), db: zero(nb) });
        }
        Err(e) => return Err(e),
    };
    let pred = pre.finish(trace.final_state());
    let (l, m) = sample_loss(Some(&pred), &pair.x1);
    if !(m > R::lit(MSE_FLOOR)) || m >= R::lit(MSE_CAP) {
        return Ok(SampleGrad { loss: l, diverged: m >= R::lit(MSE_CAP), dt: zero(n + 1), da: zero(n), db: zero(nb) });
    }
    // dℓ/dx_n for ℓ = -ln((1/d)Σ(x_n/s_1 - x1)²).
    let scale = -R::lit(2.0) / (R::from_usize(d).unwrap() * m * pre.s1);
    let mut lam: Vec<R> = pred.iter().zip(&pair.x1).map(|(&p, &y)| scale * (p - y)).collect();

    let t = theta.grid().times();
    let us = &trace.velocities;
    let xs = &trace.states;
    let mut gu: Vec<Vec<R>> = vec![zero(d); n];
    let (mut dt, mut da, mut db) = (zero(n + 1), zero(n), zero(nb));
    let row = |i: usize| i * (i + 1) / 2;
    for i in (0..n).rev() {
        if i + 1 < n {
            // x_{i+1} also feeds u_{i+1} = u(t_{i+1}, x_{i+1}).
            let k = i + 1;
            let j = jet(&*pre.field, t[k], &xs[k])?;
            for (q, &g) in gu[k].iter().enumerate() {
                dt[k] = dt[k] + g * j.dt[q];
            }
            for (p, lp) in lam.iter_mut().enumerate() {
                let mut acc = R::zero();
                for q in 0..d {
                    acc = acc + j.dx[q * d + p] * gu[k][q];
                }
                *lp = *lp + acc;
            }
        }
        let step = &theta.steps()[i];
        da[i] = lam.iter().zip(&x0).map(|(&a, &b)| a * b).sum();
        for (jj, &b) in step.b.iter().enumerate() {
            db[row(i) + jj] = lam.iter().zip(&us[jj]).map(|(&a, &v)| a * v).sum();
            for (g, &lp) in gu[jj].iter_mut().zip(&lam) {
                *g = *g + b * lp;
            }
        }
        // λ now belongs to x_i, which enters later steps only through u_i.
        lam = zero(d);
    }
    Ok(SampleGrad { loss: l, diverged: false, dt, da, db })
}

/// Batch loss and gradient with respect to the raw parameters.
/// Per-sample work runs in parallel; reduction is sequential in batch order.
pub fn loss_and_grad<R: Real>(raw: &RawNSParams<R>, pre: &Preconditioned<R>, batch: &[TrajectoryPair<R>]) -> Result<(R, Vec<R>, usize)> {
    if batch.is_empty() {
        return Err(Error::Config("empty batch".into()));
    }
    let theta = raw_to_constrained(raw)?;
    let n = raw.n;
    let per: Vec<SampleGrad<R>> = batch.par_iter().map(|p| sample_grad(&theta, pre, p)).collect::<Result<_>>()?;
    let inv = R::one() / R::from_usize(batch.len()).unwrap();
    let mut total = R::zero();
    let mut diverged = 0;
    let mut dt = vec![R::zero(); n + 1];
    let mut g = vec![R::zero(); raw.values.len()];
    for s in &per {
        total = total + s.loss;
        diverged += s.diverged as usize;
        for (a, &b) in dt.iter_mut().zip(&s.dt) {
            *a = *a + b * inv;
        }
        for (a, &b) in g[n..2 * n].iter_mut().zip(&s.da) {
            *a = *a + b * inv;
        }
        for (a, &b) in g[2 * n..].iter_mut().zip(&s.db) {
            *a = *a + b * inv;
        }
    }
    // t_k = C_k / C_n with C_k = Σ_{j<k} δ_j and δ_j = softplus(raw_j).
    let times = raw_times(raw.time_raw());
    let total_inc: R = raw.time_raw().iter().map(|&r| crate::scalar::softplus(r)).sum();
    for j in 0..n {
        let mut acc = R::zero();
        for k in 1..n {
            let ind = if j < k { R::one() } else { R::zero() };
            acc = acc + dt[k] * (ind - times[k]);
        }
        g[j] = acc / total_inc * sigmoid(raw.values[j]);
    }
    Ok((total * inv, g, diverged))
}

pub fn grad_loss<R: Real>(raw: &RawNSParams<R>, pre: &Preconditioned<R>, batch: &[TrajectoryPair<R>]) -> Result<Vec<R>> {
    Ok(loss_and_grad(raw, pre, batch)?.1)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum OptimizerConfig {
    Adam {
        #[serde(default = "default_beta1")]
        beta1: f64,
        #[serde(default = "default_beta2")]
        beta2: f64,
        #[serde(default = "default_adam_eps")]
        eps: f64,
    },
    Sgd {
        #[serde(default)]
        momentum: f64,
    },
}

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_adam_eps() -> f64 {
    1e-8
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig::Adam { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// First-order optimizer state.
pub struct Optimizer<R> {
    cfg: OptimizerConfig,
    m: Vec<R>,
    v: Vec<R>,
    t: i32,
}

impl<R: Real> Optimizer<R> {
    pub fn new(cfg: OptimizerConfig, len: usize) -> Self {
        Self { cfg, m: vec![R::zero(); len], v: vec![R::zero(); len], t: 0 }
    }

    pub fn step(&mut self, params: &mut [R], grad: &[R], lr: R) {
        self.t += 1;
        match self.cfg {
            OptimizerConfig::Adam { beta1, beta2, eps } => {
                let (b1, b2) = (R::lit(beta1), R::lit(beta2));
                let c1 = R::one() - b1.powi(self.t);
                let c2 = R::one() - b2.powi(self.t);
                for i in 0..params.len() {
                    self.m[i] = b1 * self.m[i] + (R::one() - b1) * grad[i];
                    self.v[i] = b2 * self.v[i] + (R::one() - b2) * grad[i] * grad[i];
                    let mh = self.m[i] / c1;
                    let vh = self.v[i] / c2;
                    params[i] = params[i] - lr * mh / (vh.sqrt() + R::lit(eps));
                }
            }
            OptimizerConfig::Sgd { momentum } => {
                for i in 0..params.len() {
                    self.m[i] = R::lit(momentum) * self.m[i] + grad[i];
                    params[i] = params[i] - lr * self.m[i];
                }
            }
        }
    }
}

/// Solver θ starts from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitMethod {
    Euler,
    Midpoint,
    Rk4,
    Ab2,
    /// DDIM, i.e. Euler after the exponential-integrator transform for
    /// ε-prediction on the training scheduler (needs `sigma0 = 1`).
    Ddim,
}

impl InitMethod {
    pub fn method<R: Real>(self) -> Method<R> {
        match self {
            InitMethod::Euler | InitMethod::Ddim => Method::euler(),
            InitMethod::Midpoint => Method::midpoint(),
            InitMethod::Rk4 => Method::rk4(),
            InitMethod::Ab2 => Method::adams(2),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            InitMethod::Euler => "euler",
            InitMethod::Midpoint => "midpoint",
            InitMethod::Rk4 => "rk4",
            InitMethod::Ab2 => "ab2",
            InitMethod::Ddim => "ddim",
        }
    }
}

/// θ for the DDIM sampler with `nfe` steps on `scheduler`.
pub fn ddim_params<R: Real>(scheduler: &Scheduler<R>, nfe: usize) -> Result<NSSolverParams<R>> {
    let tr = ei_transform_snr_linear(Parameterization::EpsPred, scheduler)?;
    let t = TimeGrid::<R>::uniform(nfe)?;
    let r = TimeGrid::new(ddim_r_grid(&tr, t.times())?)?;
    embed_st_solver_on(&Method::euler(), &tr, &r)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub nfe: usize,
    #[serde(default = "default_init")]
    pub init: InitMethod,
    #[serde(default = "default_one")]
    pub sigma0: f64,
    #[serde(default = "default_lr")]
    pub lr: f64,
    /// Exponent of the polynomial learning-rate decay to zero.
    #[serde(default = "default_one")]
    pub lr_decay_power: f64,
    #[serde(default = "default_batch")]
    pub batch: usize,
    #[serde(default = "default_iters")]
    pub iters: usize,
    #[serde(default = "default_val_every")]
    pub val_every: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    #[serde(default = "default_range")]
    pub psnr_range: f64,
}

fn default_init() -> InitMethod {
    InitMethod::Midpoint
}
fn default_one() -> f64 {
    1.0
}
fn default_lr() -> f64 {
    5e-4
}
fn default_batch() -> usize {
    40
}
fn default_iters() -> usize {
    2000
}
fn default_val_every() -> usize {
    100
}
fn default_range() -> f64 {
    DEFAULT_PSNR_RANGE
}

impl Default for TrainConfig {
    fn default() -> Self {
        serde_json::from_str(r#"{"nfe": 8}"#).expect("defaults parse")
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::Config(what.to_string()));
        if self.nfe < 1 {
            return bad("nfe must be at least 1");
        }
        if !(self.sigma0 > 0.0 && self.sigma0.is_finite()) {
            return bad("sigma0 must be positive");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be positive");
        }
        if !(self.lr_decay_power >= 0.0) {
            return bad("lr_decay_power must be non-negative");
        }
        if self.batch == 0 || self.val_every == 0 {
            return bad("batch and val_every must be positive");
        }
        if !(self.psnr_range > 0.0) {
            return bad("psnr_range must be positive");
        }
        if self.init == InitMethod::Ddim && self.sigma0 != 1.0 {
            return bad("ddim initialization needs sigma0 = 1");
        }
        Ok(())
    }

    fn learning_rate(&self, iter: usize) -> f64 {
        let frac = 1.0 - iter as f64 / self.iters.max(1) as f64;
        self.lr * frac.max(0.0).powf(self.lr_decay_power)
    }
}

/// θ of the initial solver for the preconditioned field.
pub fn init_params<R: Real>(cfg: &TrainConfig, scheduler: &Scheduler<R>) -> Result<NSSolverParams<R>> {
    match cfg.init {
        InitMethod::Ddim => ddim_params(scheduler, cfg.nfe),
        m => embed_generic(&m.method(), cfg.nfe),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HistoryRow {
    pub iter: usize,
    pub train_loss: f64,
    pub val_psnr: f64,
    pub best_val_psnr: f64,
}

#[derive(Clone, Debug)]
pub struct TrainResult<R> {
    pub theta: NSSolverParams<R>,
    pub init: NSSolverParams<R>,
    pub history: Vec<HistoryRow>,
    pub best_iter: usize,
    /// Training iterations in which every sample of the batch diverged.
    pub divergent_batches: usize,
}

/// History as CSV with header `iter,train_loss,val_psnr,best_val_psnr`.
pub fn history_csv(rows: &[HistoryRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["iter", "train_loss", "val_psnr", "best_val_psnr"])?;
    for r in rows {
        w.write_record([r.iter.to_string(), format!("{:.10e}", r.train_loss), format!("{:.10e}", r.val_psnr), format!("{:.10e}", r.best_val_psnr)])?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv is utf-8"))
}

fn val_psnr<R: Real>(theta: &NSSolverParams<R>, pre: &Preconditioned<R>, val: &[TrajectoryPair<R>], range: f64) -> Result<f64> {
    let preds: Vec<Option<Vec<R>>> = val
        .par_iter()
        .map(|p| match pre.sample(theta, &p.x0) {
            Ok(x) => Ok(Some(x)),
            Err(Error::Divergence { .. }) => Ok(None),
            Err(e) => Err(e),
        })
        .collect::<Result<_>>()?;
    Ok(mean_psnr(&preds, val, range)?.0)
}

/// Algorithm: initialize θ from the embedded init solver on the
/// preconditioned field, then mini-batch optimize the PSNR loss, logging
/// validation PSNR every `val_every` iterations and keeping the best θ.
pub fn train_bns<R: Real>(
    u: SharedField<R>,
    scheduler: &Scheduler<R>,
    train: &[TrajectoryPair<R>],
    val: &[TrajectoryPair<R>],
    cfg: &TrainConfig,
) -> Result<TrainResult<R>> {
    cfg.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::Config("training and validation sets must be nonempty".into()));
    }
    let pre = if cfg.sigma0 == 1.0 { Preconditioned::identity(u) } else { Preconditioned::new(u, scheduler, R::lit(cfg.sigma0))? };
    let init = init_params(cfg, scheduler)?;
    let start = if init.grid().is_strict() { init.clone() } else { separate_ties(&init, R::lit(1e-9))? };
    let mut raw = constrained_to_raw(&start)?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut cursor = order.len();
    let mut opt = Optimizer::new(cfg.optimizer, raw.values.len());
    let batch_size = cfg.batch.min(train.len());
    let batches_per_epoch = train.len().div_ceil(batch_size);

    let mut history = Vec::new();
    let mut best = (f64::NEG_INFINITY, 0usize, start.clone());
    let mut divergent_batches = 0;
    let mut streak = 0;
    let mut log = |iter: usize, theta: &NSSolverParams<R>, history: &mut Vec<HistoryRow>| -> Result<()> {
        let train_loss = loss(theta, &pre, train)?.to_f64().unwrap_or(f64::NAN);
        let psnr = val_psnr(theta, &pre, val, cfg.psnr_range)?;
        if psnr > best.0 {
            best = (psnr, iter, theta.clone());
        }
        history.push(HistoryRow { iter, train_loss, val_psnr: psnr, best_val_psnr: best.0 });
        Ok(())
    };
    log(0, &start, &mut history)?;
    for iter in 0..cfg.iters {
        if cursor + batch_size > order.len() {
            order.shuffle(&mut rng);
            cursor = 0;
        }
        let batch: Vec<TrajectoryPair<R>> = order[cursor..cursor + batch_size].iter().map(|&i| train[i].clone()).collect();
        cursor += batch_size;
        let (_, grad, diverged) = loss_and_grad(&raw, &pre, &batch)?;
        if diverged == batch.len() {
            divergent_batches += 1;
            streak += 1;
            if streak >= batches_per_epoch {
                return Err(Error::Divergence { step: iter, detail: format!("every sample diverged for {streak} consecutive batches") });
            }
        } else {
            streak = 0;
        }
        // the loss is PSNR-like, so ascend it
        let ascent: Vec<R> = grad.iter().map(|&g| -g).collect();
        opt.step(&mut raw.values, &ascent, R::lit(cfg.learning_rate(iter)));
        if (iter + 1) % cfg.val_every == 0 || iter + 1 == cfg.iters {
            log(iter + 1, &raw_to_constrained(&raw)?, &mut history)?;
        }
    }
    Ok(TrainResult { theta: best.2, init, history, best_iter: best.1, divergent_batches })
}
