//! `run`: solve a configured scenario, compute the requested extras and
//! write the bundle.

use crate::bundle::{self, Bundle};
use crate::config::{ConfigError, ScenarioConfig};
use jumpbridge::bridge::{
    convergence_experiment, pide_residual, solve_sbp, BridgeOptions, BridgeSolution,
    ConvergenceRow, PideResidual,
};
use jumpbridge::htransform::{
    girsanov_weights, retained_mass, reweighted_marginal, simulate_transformed, GirsanovWeight,
    TransformedRun,
};
use jumpbridge::metrics::tv_distance;
use jumpbridge::model::MarginalVector;
use jumpbridge::schrodinger::{dynamic_from_static, DynamicSolution};
use jumpbridge::sim::{empirical_marginal, simulate_paths, InitialLaw, PathEnsemble, SimOptions};
use jumpbridge::Error;
use std::path::{Path, PathBuf};

#[derive(Debug, thiserror::Error)]
pub enum RunError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Solve(#[from] Error),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
}

impl RunError {
    /// 2: no solution exists, 3: solver gave up, 1: anything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            RunError::Solve(Error::Infeasible { .. }) => 2,
            RunError::Solve(Error::NotConverged { .. }) => 3,
            _ => 1,
        }
    }
}

/// Everything computed from a configured scenario.
pub struct Outcome {
    pub config: ScenarioConfig,
    pub solution: BridgeSolution,
    pub dynamic: DynamicSolution,
    pub pide: Option<PideResidual>,
    pub convergence: Vec<ConvergenceRow>,
    pub simulation: Option<SimulationOutcome>,
}

/// Reference and transformed ensembles with the derived estimators.
pub struct SimulationOutcome {
    pub reference: PathEnsemble,
    pub weights: Vec<GirsanovWeight>,
    pub transformed: TransformedRun,
    pub r0: f64,
    /// Mesh node used for the intermediate comparisons.
    pub mid: usize,
    pub reweighted_mid: MarginalVector,
    pub reweighted_terminal: MarginalVector,
    pub transformed_mid: MarginalVector,
    pub transformed_terminal: MarginalVector,
}

impl SimulationOutcome {
    /// Mean and standard error of `Z_T/r0` over all paths (0 for paths that left the support).
    pub fn weight_mean(&self) -> (f64, f64) {
        let n = self.weights.len() as f64;
        let w: Vec<f64> = self.weights.iter().map(|w| w.weight()).collect();
        let mean = w.iter().sum::<f64>() / n;
        let var = w.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
        (mean, (var / n).sqrt())
    }

    pub fn invalid(&self) -> usize {
        self.weights.iter().filter(|w| !w.valid()).count()
    }
}

/// Solves the scenario and runs every extra it asks for.
pub fn analyze(config: &ScenarioConfig) -> Result<Outcome, RunError> {
    config.check()?;
    let model = config.model()?;
    let grid = config.grid()?;
    let mesh = config.mesh()?;
    let rho0 = config.rho0.build(&grid)?;
    let rho_t = config.rho_t.build(&grid)?;
    let reference_initial = config
        .reference_initial
        .as_ref()
        .map(|m| m.build(&grid))
        .transpose()?;
    let opts = BridgeOptions {
        sinkhorn: config.sinkhorn(),
        eta: config.solver.eta,
        method: config.kernel_method(),
        reference_initial,
        summary_points: 100,
        seed: config.solver.summary_seed,
    };
    let solution = solve_sbp(&model, &rho0, &rho_t, &mesh, &grid, &opts)?;
    let dynamic = dynamic_from_static(&solution.coupling, &solution.chain)?;
    let pide = if config.extras.pide {
        Some(pide_residual(&model, &solution.pair)?)
    } else {
        None
    };
    let convergence = convergence_experiment(&solution, &config.extras.convergence_levels, opts.eta)?;
    let simulation = match &config.simulation {
        Some(s) => Some(simulate(&solution, config, s.n_paths, s.seed)?),
        None => None,
    };
    Ok(Outcome {
        config: config.clone(),
        solution,
        dynamic,
        pide,
        convergence,
        simulation,
    })
}

/// Reference paths from `ρ0` with Girsanov weights for `h = H`, and paths of
/// the transformed SDE. Both ensembles share the mesh of the solution.
pub fn simulate(
    sol: &BridgeSolution,
    config: &ScenarioConfig,
    n_paths: usize,
    seed: u64,
) -> Result<SimulationOutcome, RunError> {
    let model = config.model()?;
    let eta = config.solver.eta;
    let h = sol.h.field();
    let mesh = &sol.mesh;
    let opts = SimOptions {
        store_increments: true,
    };
    let reference = simulate_paths(
        &model,
        &InitialLaw::Marginal(sol.rho0.clone()),
        mesh,
        n_paths,
        seed,
        &opts,
    )?;
    let r0 = retained_mass(&h, &sol.rho0, eta)?;
    let weights = girsanov_weights(&model, &reference, &h, eta, r0)?;
    let transformed = simulate_transformed(
        &model,
        &h,
        &sol.rho0,
        mesh,
        n_paths,
        seed.wrapping_add(1),
        eta,
        &SimOptions::default(),
    )?;
    let mid = mesh.steps() / 2;
    let (t_mid, t_end) = (mesh.time(mid), mesh.horizon());
    Ok(SimulationOutcome {
        reweighted_mid: reweighted_marginal(&reference, &weights, t_mid, &sol.grid)?,
        reweighted_terminal: reweighted_marginal(&reference, &weights, t_end, &sol.grid)?,
        transformed_mid: empirical_marginal(&transformed.paths, t_mid, &sol.grid)?.normalized()?,
        transformed_terminal: empirical_marginal(&transformed.paths, t_end, &sol.grid)?
            .normalized()?,
        reference,
        weights,
        transformed,
        r0,
        mid,
    })
}

/// Pairwise TV between the product, glued-bridge and reweighted estimators at node `mid`.
pub fn estimator_distances(out: &Outcome) -> Option<[f64; 3]> {
    let s = out.simulation.as_ref()?;
    let a = out.solution.marginals[s.mid].mass();
    let b = out.dynamic.marginals[s.mid].mass();
    let c = s.reweighted_mid.mass();
    Some([tv_distance(a, b), tv_distance(a, c), tv_distance(b, c)])
}

#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    pub seed: Option<u64>,
    pub out_dir: Option<PathBuf>,
}

/// Applies command-line overrides to a loaded config.
pub fn apply_overrides(mut config: ScenarioConfig, opts: &RunOptions) -> ScenarioConfig {
    if let Some(seed) = opts.seed {
        if let Some(s) = config.simulation.as_mut() {
            s.seed = seed;
        }
        config.solver.summary_seed = seed;
        config.solver.kernel_seed = seed;
    }
    if let Some(dir) = &opts.out_dir {
        config.output_dir = Some(dir.clone());
    }
    config
}

pub fn output_dir(config: &ScenarioConfig) -> PathBuf {
    config
        .output_dir
        .clone()
        .unwrap_or_else(|| PathBuf::from("bundle"))
}

/// `run <config>`: solve, write the bundle and return its location. On
/// non-convergence the residual trace is still written.
pub fn run(config_path: &Path, opts: &RunOptions) -> Result<(PathBuf, Outcome), RunError> {
    let config = apply_overrides(ScenarioConfig::load(config_path)?, opts);
    let dir = output_dir(&config);
    match analyze(&config) {
        Ok(out) => {
            Bundle::from_outcome(&out, None).write(&dir)?;
            Ok((dir, out))
        }
        Err(RunError::Solve(Error::NotConverged {
            iterations,
            residual,
            residuals,
        })) => {
            std::fs::create_dir_all(&dir)?;
            bundle::write_trace_file(&dir, &residuals)?;
            Err(RunError::Solve(Error::NotConverged {
                iterations,
                residual,
                residuals,
            }))
        }
        Err(e) => Err(e),
    }
}
