use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use bns_core::field::{cfg_combine, from_velocity, gmm_marginal_velocity, to_velocity, GaussianMixture};
use bns_core::scheduler::Scheduler;
use bns_core::solver::Rk45Options;
use bns_core::train::TrainConfig;
use bns_core::{Field64, Parameterization, Scheduler64};
use serde::Deserialize;
use serde_json::{Map, Value};

/// One run, as a single JSON document. Unknown keys anywhere are rejected.
#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub field: FieldSpec,
    #[serde(default)]
    pub data: DataSpec,
    /// Keys of the training configuration; `nfe`, `init` and `sigma0` may
    /// be overridden on the command line.
    #[serde(default)]
    pub train: Map<String, Value>,
    #[serde(default)]
    pub sweep: SweepSpec,
    #[serde(default = "default_out")]
    pub out_dir: PathBuf,
    #[serde(default)]
    pub seed: u64,
}

fn default_out() -> PathBuf {
    PathBuf::from("out")
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixtureSpec {
    pub weights: Vec<f64>,
    pub means: Vec<Vec<f64>>,
    pub stds: Vec<f64>,
}

impl MixtureSpec {
    fn build(&self) -> bns_core::Result<GaussianMixture<f64>> {
        GaussianMixture::new(self.weights.clone(), self.means.clone(), self.stds.clone())
    }
}

#[derive(Clone, Debug, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SchedulerSpec {
    Ot,
    Cosine,
    Vp {
        #[serde(default = "default_big_b")]
        big_b: f64,
        #[serde(default = "default_small_b")]
        small_b: f64,
    },
    EdmVe {
        #[serde(default = "default_sigma_max")]
        sigma_max: f64,
    },
}

fn default_big_b() -> f64 {
    20.0
}
fn default_small_b() -> f64 {
    0.1
}
fn default_sigma_max() -> f64 {
    80.0
}

impl SchedulerSpec {
    pub fn build(&self) -> Scheduler64 {
        match *self {
            SchedulerSpec::Ot => Scheduler::Ot,
            SchedulerSpec::Cosine => Scheduler::CosineCs,
            SchedulerSpec::Vp { big_b, small_b } => Scheduler::Vp { big_b, small_b },
            SchedulerSpec::EdmVe { sigma_max } => Scheduler::EdmVe { sigma_max },
        }
    }
}

/// Classifier-free guidance: `(1 + weight)·cond − weight·uncond`.
#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GuidanceSpec {
    pub weight: f64,
    pub uncond: MixtureSpec,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FieldSpec {
    pub mixture: MixtureSpec,
    pub scheduler: SchedulerSpec,
    /// The oracle is exposed through this model parameterization and
    /// converted back to a velocity.
    #[serde(default = "default_param")]
    pub parameterization: Parameterization,
    #[serde(default)]
    pub guidance: Option<GuidanceSpec>,
    /// Default preconditioning for training and BNS sweep rows.
    #[serde(default)]
    pub sigma0: Option<f64>,
}

fn default_param() -> Parameterization {
    Parameterization::Velocity
}

impl FieldSpec {
    pub fn velocity(&self) -> bns_core::Result<Field64> {
        let scheduler = self.scheduler.build();
        let oracle = |m: &MixtureSpec| -> bns_core::Result<Field64> {
            let v = gmm_marginal_velocity(m.build()?, scheduler.clone())?;
            Ok(match self.parameterization {
                Parameterization::Velocity => v,
                p => to_velocity(from_velocity(v, p, scheduler.clone()), p, scheduler.clone()),
            })
        };
        let cond = oracle(&self.mixture)?;
        match &self.guidance {
            None => Ok(cond),
            Some(g) => cfg_combine(cond, oracle(&g.uncond)?, g.weight),
        }
    }
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSpec {
    #[serde(default = "default_train_count")]
    pub train_count: usize,
    #[serde(default = "default_tol")]
    pub rtol: f64,
    #[serde(default = "default_tol")]
    pub atol: f64,
}

fn default_train_count() -> usize {
    520
}
fn default_tol() -> f64 {
    1e-5
}

impl Default for DataSpec {
    fn default() -> Self {
        Self { train_count: default_train_count(), rtol: default_tol(), atol: default_tol() }
    }
}

impl DataSpec {
    pub fn oracle(&self) -> Rk45Options {
        Rk45Options { rtol: self.rtol, atol: self.atol, ..Rk45Options::default() }
    }
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    #[serde(default = "default_solvers")]
    pub solvers: Vec<String>,
    #[serde(default = "default_nfes")]
    pub nfes: Vec<usize>,
    #[serde(default)]
    pub thetas: Vec<PathBuf>,
    #[serde(default = "default_range")]
    pub psnr_range: f64,
}

fn default_solvers() -> Vec<String> {
    ["euler", "midpoint", "ddim"].map(String::from).to_vec()
}
fn default_nfes() -> Vec<usize> {
    vec![4, 8, 16]
}
fn default_range() -> f64 {
    bns_core::eval::DEFAULT_PSNR_RANGE
}

impl Default for SweepSpec {
    fn default() -> Self {
        Self { solvers: default_solvers(), nfes: default_nfes(), thetas: Vec::new(), psnr_range: default_range() }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let cfg: RunConfig = serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        cfg.field.velocity().context("building the field")?;
        cfg.train_config(None, None, None)?;
        if cfg.data.train_count == 0 {
            bail!("data.train_count must be at least 1");
        }
        Ok(cfg)
    }

    /// Training configuration with command-line overrides applied. The
    /// field's σ0 is the default preconditioning.
    pub fn train_config(&self, nfe: Option<usize>, init: Option<&str>, sigma0: Option<f64>) -> anyhow::Result<TrainConfig> {
        let mut m = self.train.clone();
        if let Some(n) = nfe {
            m.insert("nfe".into(), n.into());
        }
        m.entry("nfe").or_insert(8.into());
        if let Some(i) = init {
            m.insert("init".into(), i.into());
        }
        if let Some(s) = sigma0.or(self.field.sigma0) {
            m.insert("sigma0".into(), s.into());
        }
        m.entry("seed").or_insert(self.seed.into());
        let cfg: TrainConfig = serde_json::from_value(Value::Object(m)).context("invalid train section")?;
        cfg.validate()?;
        Ok(cfg)
    }
}
