//! `bns`: dataset generation, BNS training, NFE sweeps and taxonomy checks
//! on closed-form Gaussian-mixture fields.
//!
//! Exit codes: 0 ok, 2 usage or configuration error, 3 numerical failure,
//! 4 taxonomy verification failure.

mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context};
use bns_core::eval::{nfe_sweep, taxonomy_check, SweepSolver, TaxonomyOptions};
use bns_core::nsparams::{free_param_count, param_count};
use bns_core::solver::Method;
use bns_core::train::{
    generate_dataset_with_stats, history_csv, init_params, load_dataset, save_dataset, source_std, train_bns, Preconditioned,
};
use bns_core::NSSolverParams64;
use clap::{Parser, Subcommand};

use config::RunConfig;

#[derive(Parser, Debug)]
#[command(name = "bns", version, about = "Bespoke non-stationary solvers for Gaussian-mixture flows")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Sample sources and solve them with the adaptive oracle.
    GenData {
        /// Run configuration (JSON).
        config: PathBuf,
        /// Number of pairs [default: data.train_count].
        #[arg(long)]
        count: Option<usize>,
        /// Dataset file to write.
        #[arg(long)]
        out: PathBuf,
        /// Source seed [default: config seed].
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Optimize an NS solver against training pairs, keeping the best θ on
    /// the validation pairs.
    Train {
        config: PathBuf,
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        val: PathBuf,
        /// Number of steps (overrides train.nfe).
        #[arg(long)]
        nfe: Option<usize>,
        /// Initial solver: euler, midpoint, rk4, ab2 or ddim.
        #[arg(long)]
        init: Option<String>,
        /// Preconditioning scale (1 disables it).
        #[arg(long)]
        sigma0: Option<f64>,
        /// Shuffling seed (overrides train.seed).
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory for theta_n<N>.json and history_n<N>.csv [default: out_dir].
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Mean PSNR of every solver at every NFE on a dataset.
    Sweep {
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Comma-separated: euler, midpoint, rk4, ab2, ab3, ddim, bns.
        #[arg(long, value_delimiter = ',')]
        solvers: Option<Vec<String>>,
        #[arg(long, value_delimiter = ',')]
        nfes: Option<Vec<usize>>,
        /// Trained θ files for the bns rows; repeatable.
        #[arg(long)]
        theta: Vec<PathBuf>,
        /// Preconditioning the θ files were trained with.
        #[arg(long)]
        sigma0: Option<f64>,
        /// Report CSV.
        #[arg(long)]
        out: PathBuf,
        /// Add wall time to the report (makes it non-reproducible).
        #[arg(long)]
        timing: bool,
    },
    /// Certify the solver taxonomy: generic and exponential-integrator
    /// solvers reproduced exactly by their NS embeddings.
    CheckTaxonomy {
        #[arg(long, default_value_t = 20)]
        fields: usize,
        #[arg(long, default_value_t = 3)]
        dim: usize,
        #[arg(long, default_value_t = 50)]
        rules: usize,
        #[arg(long, default_value_t = 8)]
        nfe: usize,
        #[arg(long, default_value_t = 1e-9)]
        tol: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Perturb one embedded coefficient, to see the check fail.
        #[arg(long)]
        corrupt: Option<f64>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        timing: bool,
    },
    /// Parameter counts of NS solvers.
    ParamCount {
        #[arg(long, value_delimiter = ',', default_value = "4,8,16")]
        nfe: Vec<usize>,
    },
}

/// Marks a failed verification (exit 4).
#[derive(Debug)]
struct TaxonomyFailed;

impl std::fmt::Display for TaxonomyFailed {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("taxonomy check failed")
    }
}

impl std::error::Error for TaxonomyFailed {}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<TaxonomyFailed>() {
            return 4;
        }
        if let Some(e) = cause.downcast_ref::<bns_core::Error>() {
            return if e.is_numeric() { 3 } else { 2 };
        }
    }
    2
}

fn write_file(path: &Path, contents: &str) -> anyhow::Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    std::fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn gen_data(config: &Path, count: Option<usize>, out: &Path, seed: Option<u64>) -> anyhow::Result<()> {
    let cfg = RunConfig::load(config)?;
    let count = count.unwrap_or(cfg.data.train_count);
    if count == 0 {
        bail!("--count must be at least 1");
    }
    let u = cfg.field.velocity()?;
    let scheduler = cfg.field.scheduler.build();
    let (pairs, stats) = generate_dataset_with_stats(&*u, source_std(&scheduler)?, count, &cfg.data.oracle(), seed.unwrap_or(cfg.seed))?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    save_dataset(out, &pairs)?;
    println!("wrote {} pairs of dimension {} to {}", pairs.len(), u.dim(), out.display());
    println!("oracle nfe per pair: min {} mean {:.1} max {}", stats.min_nfe, stats.mean_nfe, stats.max_nfe);
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn train(
    config: &Path,
    train: &Path,
    val: &Path,
    nfe: Option<usize>,
    init: Option<&str>,
    sigma0: Option<f64>,
    seed: Option<u64>,
    out: Option<PathBuf>,
) -> anyhow::Result<()> {
    let cfg = RunConfig::load(config)?;
    let mut tc = cfg.train_config(nfe, init, sigma0)?;
    if let Some(s) = seed {
        tc.seed = s;
    }
    let scheduler = cfg.field.scheduler.build();
    // reject budgets the initial solver cannot spend before loading data
    init_params(&tc, &scheduler)?;
    let train_set = load_dataset(train).with_context(|| format!("loading {}", train.display()))?;
    let val_set = load_dataset(val).with_context(|| format!("loading {}", val.display()))?;
    let u = cfg.field.velocity()?;
    let res = train_bns(u, &scheduler, &train_set, &val_set, &tc)?;

    let dir = out.unwrap_or(cfg.out_dir);
    let theta_path = dir.join(format!("theta_n{}.json", tc.nfe));
    let hist_path = dir.join(format!("history_n{}.csv", tc.nfe));
    write_file(&theta_path, &res.theta.to_json())?;
    write_file(&hist_path, &history_csv(&res.history)?)?;
    let first = res.history.first().map_or(f64::NAN, |r| r.val_psnr);
    let best = res.history.last().map_or(f64::NAN, |r| r.best_val_psnr);
    println!(
        "nfe {} init {} sigma0 {}: validation PSNR {:.3} dB -> {:.3} dB (best at iteration {})",
        tc.nfe,
        tc.init.name(),
        tc.sigma0,
        first,
        best,
        res.best_iter
    );
    if res.divergent_batches > 0 {
        println!("{} batches diverged entirely", res.divergent_batches);
    }
    println!("wrote {} and {}", theta_path.display(), hist_path.display());
    Ok(())
}

fn solver_by_name(name: &str, cfg: &RunConfig, bns: &Option<SweepSolver<f64>>) -> anyhow::Result<SweepSolver<f64>> {
    Ok(match name {
        "euler" => SweepSolver::Method(Method::euler()),
        "midpoint" => SweepSolver::Method(Method::midpoint()),
        "rk4" => SweepSolver::Method(Method::rk4()),
        "ab2" => SweepSolver::Method(Method::adams(2)),
        "ab3" => SweepSolver::Method(Method::adams(3)),
        "ddim" => SweepSolver::Ddim(cfg.field.scheduler.build()),
        "bns" => match bns {
            Some(s) => s.clone(),
            None => bail!("the bns solver needs at least one --theta file"),
        },
        other => bail!("unknown solver '{other}'"),
    })
}

#[allow(clippy::too_many_arguments)]
fn sweep(
    config: &Path,
    data: &Path,
    solvers: Option<Vec<String>>,
    nfes: Option<Vec<usize>>,
    theta: Vec<PathBuf>,
    sigma0: Option<f64>,
    out: &Path,
    timing: bool,
) -> anyhow::Result<()> {
    let cfg = RunConfig::load(config)?;
    let solvers = solvers.unwrap_or_else(|| cfg.sweep.solvers.clone());
    let nfes = nfes.unwrap_or_else(|| cfg.sweep.nfes.clone());
    if solvers.is_empty() || nfes.is_empty() || nfes.contains(&0) {
        bail!("need at least one solver and positive NFE budgets");
    }
    let theta = if theta.is_empty() { cfg.sweep.thetas.clone() } else { theta };
    let u = cfg.field.velocity()?;
    let scheduler = cfg.field.scheduler.build();
    let bns = if theta.is_empty() {
        None
    } else {
        let thetas = theta
            .iter()
            .map(|p| NSSolverParams64::load(p).with_context(|| format!("loading θ file {}", p.display())))
            .collect::<anyhow::Result<Vec<_>>>()?;
        let sigma0 = sigma0.or(cfg.field.sigma0).unwrap_or(1.0);
        let field = if sigma0 == 1.0 { Preconditioned::identity(u.clone()) } else { Preconditioned::new(u.clone(), &scheduler, sigma0)? };
        Some(SweepSolver::Bns { name: "bns".into(), field, thetas })
    };
    let list = solvers.iter().map(|s| solver_by_name(s.trim(), &cfg, &bns)).collect::<anyhow::Result<Vec<_>>>()?;
    let dataset = load_dataset(data).with_context(|| format!("loading {}", data.display()))?;
    let report = nfe_sweep(&u, &dataset, &list, &nfes, cfg.sweep.psnr_range)?;
    write_file(out, &report.to_csv(timing)?)?;
    print!("{}", report.to_table(timing));
    println!("wrote {} rows to {}", report.rows.len(), out.display());
    Ok(())
}

fn check_taxonomy(opts: TaxonomyOptions, out: &Path, timing: bool) -> anyhow::Result<()> {
    let start = Instant::now();
    let report = taxonomy_check(&opts)?;
    write_file(out, &report.to_csv()?)?;
    print!("{}", report.to_table());
    if timing {
        println!("elapsed {:.3} s", start.elapsed().as_secs_f64());
    }
    if !report.passed() {
        return Err(TaxonomyFailed.into());
    }
    println!("all {} checks passed", report.rows.len());
    Ok(())
}

fn param_counts(nfes: &[usize]) -> anyhow::Result<()> {
    println!("{:>4} {:>8} {:>10} {:>6}", "n", "formula", "table", "free");
    for &n in nfes {
        let p = param_count(n)?;
        println!("{:>4} {:>8} {:>10} {:>6}", n, p, p - 1, free_param_count(n));
    }
    println!("formula: n(n+5)/2 + 1 = n+1 grid times + n values a_i + n(n+1)/2 values b_ij");
    println!("table: the published table lists one fewer (18/52/168 for n = 4/8/16), consistent with");
    println!("       leaving out one fixed endpoint of the time grid");
    println!("free: trained values (both endpoints fixed, increments normalized; one increment is redundant)");
    Ok(())
}

fn configure_threads() -> anyhow::Result<()> {
    if let Ok(v) = std::env::var("BNS_THREADS") {
        let n: usize = v.trim().parse().ok().filter(|&n| n > 0).with_context(|| format!("BNS_THREADS must be a positive integer, got '{v}'"))?;
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    configure_threads()?;
    match cli.cmd {
        Cmd::GenData { config, count, out, seed } => gen_data(&config, count, &out, seed),
        Cmd::Train { config, train: t, val, nfe, init, sigma0, seed, out } => train(&config, &t, &val, nfe, init.as_deref(), sigma0, seed, out),
        Cmd::Sweep { config, data, solvers, nfes, theta, sigma0, out, timing } => sweep(&config, &data, solvers, nfes, theta, sigma0, &out, timing),
        Cmd::CheckTaxonomy { fields, dim, rules, nfe, tol, seed, corrupt, out, timing } => {
            let opts = TaxonomyOptions { fields, dim, rules, nfe, tol, seed, corrupt, ..TaxonomyOptions::default() };
            check_taxonomy(opts, &out, timing)
        }
        Cmd::ParamCount { nfe } => param_counts(&nfe),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
