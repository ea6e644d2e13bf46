//! Scenario files.
//!
//! ```toml
//! [model]
//! family = "poisson"
//! params = { rate = 1.0 }
//!
//! [grid]
//! integers = [0, 40]          # or: lower = [-6.0], upper = [6.0], cells = [401]
//!
//! [mesh]
//! horizon = 1.0
//! steps = 64
//!
//! [rho0]
//! family = "point"            # point | gaussian | poisson | uniform | csv
//! params = { x = 0.0 }
//!
//! [rho_t]
//! family = "poisson"
//! params = { mean = 2.0 }
//!
//! [solver]                    # optional
//! tol = 1e-12
//! max_iter = 100000
//! eta = 1e-12
//!
//! [simulation]                # optional
//! n_paths = 100000
//! seed = 7
//! ```
//!
//! Unknown keys anywhere are rejected.

use jumpbridge::htransform::DEFAULT_ETA;
use jumpbridge::model::{builtin_model, Builtin, Grid, MarginalVector, Model};
use jumpbridge::schrodinger::SinkhornOptions;
use jumpbridge::sim::{EstimateOptions, KernelMethod, TimeMesh};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Read {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("invalid scenario file: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Model(#[from] jumpbridge::Error),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub model: ModelSpec,
    pub grid: GridSpec,
    pub mesh: MeshSpec,
    pub rho0: MarginalSpec,
    pub rho_t: MarginalSpec,
    /// Reference law of `X_0`; defaults to `rho0`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference_initial: Option<MarginalSpec>,
    #[serde(default)]
    pub solver: SolverSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub simulation: Option<SimulationSpec>,
    #[serde(default)]
    pub extras: ExtrasSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub family: String,
    #[serde(default)]
    pub params: BTreeMap<String, f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub integers: Option<[i64; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lower: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub upper: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cells: Option<Vec<usize>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MeshSpec {
    pub horizon: f64,
    pub steps: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MarginalSpec {
    pub family: String,
    #[serde(default)]
    pub params: BTreeMap<String, f64>,
    /// For `family = "csv"`: a file with columns `cell,mass`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelKind {
    ClosedForm,
    MonteCarlo,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverSpec {
    #[serde(default = "default_tol")]
    pub tol: f64,
    #[serde(default = "default_max_iter")]
    pub max_iter: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub log_domain: Option<bool>,
    #[serde(default = "default_eta")]
    pub eta: f64,
    #[serde(default = "default_kernel")]
    pub kernel: KernelKind,
    /// Monte Carlo kernels only.
    #[serde(default = "default_n_per_source")]
    pub n_per_source: usize,
    #[serde(default)]
    pub kernel_seed: u64,
    #[serde(default)]
    pub summary_seed: u64,
}

fn default_tol() -> f64 {
    1e-12
}
fn default_max_iter() -> usize {
    100_000
}
fn default_eta() -> f64 {
    DEFAULT_ETA
}
fn default_kernel() -> KernelKind {
    KernelKind::ClosedForm
}
fn default_n_per_source() -> usize {
    10_000
}

impl Default for SolverSpec {
    fn default() -> Self {
        Self {
            tol: default_tol(),
            max_iter: default_max_iter(),
            log_domain: None,
            eta: default_eta(),
            kernel: default_kernel(),
            n_per_source: default_n_per_source(),
            kernel_seed: 0,
            summary_seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulationSpec {
    pub n_paths: usize,
    pub seed: u64,
    /// Also write `paths.csv`, `jumps.csv` and `weights.csv`.
    #[serde(default)]
    pub write_paths: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExtrasSpec {
    /// Approximation levels for the convergence table.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub convergence_levels: Vec<usize>,
    /// Residuals of the backward and forward equations on the grid fields.
    #[serde(default)]
    pub pide: bool,
}

impl ScenarioConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let cfg: ScenarioConfig = toml::from_str(text)?;
        cfg.check()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        let mut cfg = Self::from_toml(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        for m in [Some(&mut cfg.rho0), Some(&mut cfg.rho_t), cfg.reference_initial.as_mut()]
            .into_iter()
            .flatten()
        {
            if let Some(p) = &m.path {
                if p.is_relative() {
                    m.path = Some(base.join(p));
                }
            }
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("scenario config serializes")
    }

    /// Structural checks that need no numerics.
    pub fn check(&self) -> Result<(), ConfigError> {
        self.grid()?;
        self.mesh()?;
        self.model()?;
        if !(self.solver.tol > 0.0) {
            return Err(ConfigError::Invalid("solver.tol must be positive".into()));
        }
        if self.solver.max_iter == 0 {
            return Err(ConfigError::Invalid("solver.max_iter must be >= 1".into()));
        }
        if !(self.solver.eta > 0.0) {
            return Err(ConfigError::Invalid("solver.eta must be positive".into()));
        }
        if let Some(s) = &self.simulation {
            if s.n_paths == 0 {
                return Err(ConfigError::Invalid("simulation.n_paths must be >= 1".into()));
            }
        }
        if self.extras.convergence_levels.contains(&0) {
            return Err(ConfigError::Invalid("convergence levels must be >= 1".into()));
        }
        for (name, m) in [("rho0", Some(&self.rho0)), ("rho_t", Some(&self.rho_t))]
            .into_iter()
            .chain([("reference_initial", self.reference_initial.as_ref())])
        {
            if let Some(m) = m {
                m.check().map_err(|e| ConfigError::Invalid(format!("{name}: {e}")))?;
            }
        }
        Ok(())
    }

    pub fn model(&self) -> Result<Model, ConfigError> {
        let b = Builtin::from_params(&self.model.family, &self.model.params)?;
        Ok(builtin_model(&b)?)
    }

    pub fn grid(&self) -> Result<Grid, ConfigError> {
        let g = &self.grid;
        match (&g.integers, &g.lower, &g.upper, &g.cells) {
            (Some([lo, hi]), None, None, None) => Ok(Grid::integers(*lo, *hi)?),
            (None, Some(l), Some(u), Some(c)) => Ok(Grid::new(l.clone(), u.clone(), c.clone())?),
            _ => Err(ConfigError::Invalid(
                "grid: give either `integers = [lo, hi]` or all of `lower`, `upper`, `cells`".into(),
            )),
        }
    }

    pub fn mesh(&self) -> Result<TimeMesh, ConfigError> {
        Ok(TimeMesh::uniform(self.mesh.horizon, self.mesh.steps)?)
    }

    pub fn sinkhorn(&self) -> SinkhornOptions {
        SinkhornOptions {
            tol: self.solver.tol,
            max_iter: self.solver.max_iter,
            log_domain: self.solver.log_domain,
        }
    }

    pub fn kernel_method(&self) -> KernelMethod {
        match self.solver.kernel {
            KernelKind::ClosedForm => KernelMethod::ClosedForm,
            KernelKind::MonteCarlo => KernelMethod::MonteCarlo {
                n_per_source: self.solver.n_per_source,
                seed: self.solver.kernel_seed,
                options: EstimateOptions::default(),
            },
        }
    }
}

impl MarginalSpec {
    fn allowed(&self) -> Result<&'static [&'static str], String> {
        Ok(match self.family.as_str() {
            "point" => &["x"],
            "gaussian" => &["mean", "var"],
            "poisson" => &["mean"],
            "uniform" | "csv" => &[],
            other => return Err(format!("unknown marginal family `{other}`")),
        })
    }

    fn check(&self) -> Result<(), String> {
        let allowed = self.allowed()?;
        if let Some(k) = self.params.keys().find(|k| !allowed.contains(&k.as_str())) {
            return Err(format!("unknown parameter `{k}` for `{}`", self.family));
        }
        if let Some(k) = allowed.iter().find(|k| !self.params.contains_key(**k)) {
            return Err(format!("missing parameter `{k}` for `{}`", self.family));
        }
        match (self.family.as_str(), &self.path) {
            ("csv", None) => Err("family `csv` needs `path`".into()),
            ("csv", Some(_)) | (_, None) => Ok(()),
            (_, Some(_)) => Err("`path` is only used with family `csv`".into()),
        }
    }

    pub fn build(&self, grid: &Grid) -> Result<MarginalVector, ConfigError> {
        self.check().map_err(ConfigError::Invalid)?;
        let p = |k: &str| self.params[k];
        let m = match self.family.as_str() {
            "point" => MarginalVector::point(grid.clone(), &[p("x")])?,
            "gaussian" => MarginalVector::gaussian(grid.clone(), p("mean"), p("var"))?,
            "poisson" => MarginalVector::poisson(grid.clone(), p("mean"))?,
            "uniform" => MarginalVector::uniform(grid.clone()),
            _ => read_marginal_csv(self.path.as_deref().expect("checked"), grid)?,
        };
        Ok(m)
    }
}

#[derive(Deserialize)]
struct MassRow {
    cell: usize,
    mass: f64,
}

/// `cell,mass` rows; missing cells get mass 0 and the vector is renormalized.
fn read_marginal_csv(path: &Path, grid: &Grid) -> Result<MarginalVector, ConfigError> {
    let mut rdr = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| ConfigError::Invalid(format!("{}: {e}", path.display())))?;
    let mut w = vec![0.0; grid.len()];
    for rec in rdr.deserialize::<MassRow>() {
        let r = rec.map_err(|e| ConfigError::Invalid(format!("{}: {e}", path.display())))?;
        if r.cell >= grid.len() {
            return Err(ConfigError::Invalid(format!(
                "{}: cell {} outside a grid of {} cells",
                path.display(),
                r.cell,
                grid.len()
            )));
        }
        if !(r.mass >= 0.0 && r.mass.is_finite()) {
            return Err(ConfigError::Invalid(format!(
                "{}: cell {} has mass {}",
                path.display(),
                r.cell,
                r.mass
            )));
        }
        w[r.cell] += r.mass;
    }
    Ok(MarginalVector::from_weights(grid.clone(), w)?)
}
