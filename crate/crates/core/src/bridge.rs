//! End-to-end assembly of a Schrödinger bridge on a grid.
//!
//! [`solve_sbp`] runs the pipeline: reference chain, joint kernel
//! `J = diag(R0)·P_{0,T}`, Sinkhorn potentials `(f, g)`, the field
//! `H = P_{t,T} g`, and the marginals `P̂_t = φ(t,·) φ̂(t,·)` with
//! `φ(t,·) = P_{t,T} g` and `φ̂(t,·) = P_{0,t}ᵀ (f ⊙ R0)`.

use crate::error::{Error, Result};
use crate::htransform::{
    approx_sequence, h_field, transformed_transition, CoefficientRow, HField, TransformedModel,
    DEFAULT_ETA,
};
use crate::metrics::tv_distance;
use crate::model::{Grid, MarginalVector, Model};
use crate::operator::{
    apply_adjoint_space_time, apply_space_time, mean_value_residual, Field, OperatorResidual,
};
use crate::schrodinger::{
    kl_divergence, sinkhorn_solve, static_bridge, system_residual, Coupling, JointKernel,
    Potentials, SinkhornOptions, SolveTrace,
};
use crate::sim::{compose, reference_chain, KernelMatrix, KernelMethod, TimeMesh};
use ndarray::Array2;
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use statrs::function::gamma::digamma;

/// `dρ0/dR0` cellwise, with `support[i] = true` off `S0 = {dρ0/dR0 = 0}`.
#[derive(Clone, Debug, PartialEq)]
pub struct ReferenceWeights {
    pub weights: Vec<f64>,
    pub support: Vec<bool>,
}

/// Cellwise ratio `ρ0/R0` with `0/0 = 0`.
pub fn reweight_reference(r0: &MarginalVector, rho0: &MarginalVector) -> Result<ReferenceWeights> {
    if r0.grid() != rho0.grid() {
        return Err(Error::GridMismatch("reference initial law vs rho0".into()));
    }
    let bad: Vec<usize> = (0..r0.len())
        .filter(|&i| rho0.mass()[i] > 0.0 && r0.mass()[i] == 0.0)
        .collect();
    if !bad.is_empty() {
        return Err(Error::Infeasible {
            side: "source",
            cells: bad,
        });
    }
    let weights: Vec<f64> = r0
        .mass()
        .iter()
        .zip(rho0.mass())
        .map(|(r, p)| if *p == 0.0 { 0.0 } else { p / r })
        .collect();
    let support = weights.iter().map(|w| *w > 0.0).collect();
    Ok(ReferenceWeights { weights, support })
}

#[derive(Clone, Debug)]
pub struct BridgeOptions {
    pub sinkhorn: SinkhornOptions,
    pub eta: f64,
    pub method: KernelMethod,
    /// Law of `X_0` under the reference; `None` uses `ρ0`.
    pub reference_initial: Option<MarginalVector>,
    /// Number of `(t, x)` points at which transformed coefficients are dumped.
    pub summary_points: usize,
    /// Seed for drawing the summary points.
    pub seed: u64,
}

impl Default for BridgeOptions {
    fn default() -> Self {
        Self {
            sinkhorn: SinkhornOptions::default(),
            eta: DEFAULT_ETA,
            method: KernelMethod::ClosedForm,
            reference_initial: None,
            summary_points: 100,
            seed: 0,
        }
    }
}

/// Backward and forward potentials on a mesh × grid.
///
/// `phi_hat` is a density: cell mass divided by cell volume.
#[derive(Clone)]
pub struct PhiPair {
    pub phi: Field,
    pub phi_hat: Field,
    pub mesh: TimeMesh,
    pub grid: Grid,
}

impl PhiPair {
    pub fn new(phi: Field, phi_hat: Field, mesh: TimeMesh, grid: Grid) -> Self {
        Self {
            phi,
            phi_hat,
            mesh,
            grid,
        }
    }

    /// Closed forms for the Poisson reference of rate `λ` started at 0 and
    /// conditioned to end with law Poisson(`μ·T`):
    /// `φ(t,x) = e^{(λ−μ)t}(μ/λ)^x`, `φ̂(t,x) = e^{−λt}(λt)^x/x!`.
    /// Derivatives are exact.
    pub fn poisson_closed_form(lambda: f64, mu: f64, mesh: TimeMesh, grid: Grid) -> Self {
        let r = (mu / lambda).ln();
        let phi_v = move |t: f64, x: f64| ((lambda - mu) * t + x * r).exp();
        let phi = Field::closed(move |t, x| phi_v(t, x[0]))
            .with_time_derivative(move |t, x| (lambda - mu) * phi_v(t, x[0]))
            .with_gradient(move |t, x, g| g[0] = r * phi_v(t, x[0]))
            .with_hessian(move |t, x, h| h[0] = r * r * phi_v(t, x[0]));
        let hat_v = move |t: f64, x: f64| {
            if x + 1.0 <= 0.0 {
                0.0
            } else if t == 0.0 {
                if x == 0.0 {
                    1.0
                } else {
                    0.0
                }
            } else {
                (-lambda * t + x * (lambda * t).ln() - libm::lgamma(x + 1.0)).exp()
            }
        };
        let phi_hat = Field::closed(move |t, x| hat_v(t, x[0]))
            .with_time_derivative(move |t, x| hat_v(t, x[0]) * (x[0] / t - lambda))
            .with_gradient(move |t, x, g| {
                g[0] = hat_v(t, x[0]) * ((lambda * t).ln() - digamma(x[0] + 1.0))
            });
        Self::new(phi, phi_hat, mesh, grid)
    }
}

/// `φ`, `φ̂` and the product marginals at every mesh node.
#[derive(Clone)]
pub struct MarginalDensity {
    pub pair: PhiPair,
    pub marginals: Vec<MarginalVector>,
    /// `max_t |Σ_x φ(t,x)φ̂(t,x)|dx| − 1|` before normalization.
    pub mass_defect: f64,
}

/// Backward products of `g` and forward products of `f ⊙ R0`.
pub fn marginal_density(
    pot: &Potentials,
    chain: &[KernelMatrix],
    r0: &MarginalVector,
) -> Result<MarginalDensity> {
    let mesh = crate::htransform::chain_mesh(chain)?;
    let grid = chain[0].source.clone();
    let n = grid.len();
    if pot.f.len() != n || pot.g.len() != n || r0.grid() != &grid {
        return Err(Error::ShapeMismatch("potentials / reference law vs chain grid".into()));
    }
    let steps = chain.len();
    let mut phi = Array2::zeros((steps + 1, n));
    let mut cur = pot.g.clone();
    phi.row_mut(steps).assign(&ndarray::ArrayView1::from(&cur[..]));
    for j in (0..steps).rev() {
        cur = chain[j].apply(&cur);
        phi.row_mut(j).assign(&ndarray::ArrayView1::from(&cur[..]));
    }
    let mut hat = Array2::zeros((steps + 1, n));
    let mut cur: Vec<f64> = pot.f.iter().zip(r0.mass()).map(|(f, r)| f * r).collect();
    hat.row_mut(0).assign(&ndarray::ArrayView1::from(&cur[..]));
    for j in 0..steps {
        cur = chain[j].apply_transpose(&cur);
        hat.row_mut(j + 1).assign(&ndarray::ArrayView1::from(&cur[..]));
    }
    let mut marginals = Vec::with_capacity(steps + 1);
    let mut mass_defect: f64 = 0.0;
    for j in 0..=steps {
        let m: Vec<f64> = phi.row(j).iter().zip(hat.row(j)).map(|(a, b)| a * b).collect();
        mass_defect = mass_defect.max((m.iter().sum::<f64>() - 1.0).abs());
        marginals.push(MarginalVector::from_weights(grid.clone(), m)?);
    }
    let vol = grid.cell_volume();
    hat.mapv_inplace(|v| v / vol);
    let pair = PhiPair::new(
        Field::grid(mesh.clone(), grid.clone(), phi)?,
        Field::grid(mesh.clone(), grid.clone(), hat)?,
        mesh,
        grid,
    );
    Ok(MarginalDensity {
        pair,
        marginals,
        mass_defect,
    })
}

/// `∂_tφ + Lφ` and `∂_tφ̂ − L*φ̂` over interior mesh nodes × cell centers.
#[derive(Clone, Debug, PartialEq)]
pub struct PideResidual {
    pub backward: OperatorResidual,
    pub forward: OperatorResidual,
    /// Points dropped because a stencil or jump target left the field's domain.
    pub skipped: usize,
}

pub fn pide_residual(model: &Model, pair: &PhiPair) -> Result<PideResidual> {
    let steps = pair.mesh.steps();
    let points: Vec<(f64, Vec<f64>)> = (1..steps)
        .flat_map(|j| {
            let t = pair.mesh.time(j);
            pair.grid.centers().into_iter().map(move |x| (t, x))
        })
        .collect();
    let eval = |r: Result<f64>| -> Result<Option<f64>> {
        match r {
            Ok(v) => Ok(Some(v)),
            Err(Error::Domain { .. }) => Ok(None),
            Err(e) => Err(e),
        }
    };
    let rows: Vec<(Option<f64>, Option<f64>)> = points
        .par_iter()
        .map(|(t, x)| {
            let b = eval(apply_space_time(model, &pair.phi, *t, x))?;
            let f = eval(apply_adjoint_space_time(model, &pair.phi_hat, *t, x))?;
            Ok((b, f.map(|v| -v)))
        })
        .collect::<Result<_>>()?;
    let mut back = Vec::new();
    let mut fwd = Vec::new();
    let mut skipped = 0;
    for ((t, x), (b, f)) in points.into_iter().zip(rows) {
        match (b, f) {
            (Some(b), Some(f)) => {
                back.push((t, x.clone(), b));
                fwd.push((t, x, f));
            }
            _ => skipped += 1,
        }
    }
    Ok(PideResidual {
        backward: OperatorResidual::from_table(back),
        forward: OperatorResidual::from_table(fwd),
        skipped,
    })
}

/// Scalar diagnostics of a solved bridge.
#[derive(Clone, Debug, PartialEq)]
pub struct Diagnostics {
    /// Largest mass-form residuals of the Schrödinger system at `t = 0` and `t = T`.
    pub system_residual: (f64, f64),
    /// `KL(π̂ ‖ J)`.
    pub kl: f64,
    pub mean_value_residual: f64,
    pub mass_defect: f64,
    /// Largest `|row sum − 1|` over the chain kernels.
    pub kernel_row_defect: f64,
    pub kernel_warnings: Vec<String>,
}

#[derive(Clone)]
pub struct BridgeSolution {
    pub mesh: TimeMesh,
    pub grid: Grid,
    pub chain: Vec<KernelMatrix>,
    pub reference_initial: MarginalVector,
    pub rho0: MarginalVector,
    pub rho_t: MarginalVector,
    pub joint: JointKernel,
    pub potentials: Potentials,
    pub coupling: Coupling,
    pub h: HField,
    pub pair: PhiPair,
    /// `P̂_t` at every mesh node.
    pub marginals: Vec<MarginalVector>,
    /// `b^h` and `h(t,x+γ)/h(t,x)` at points drawn from the bridge marginals.
    pub coefficients: Vec<CoefficientRow>,
    pub trace: SolveTrace,
    pub diagnostics: Diagnostics,
}

/// Full bridge on `grid` × `mesh`. Non-convergence of the Sinkhorn loop is
/// an error carrying the residual trace.
pub fn solve_sbp(
    model: &Model,
    rho0: &MarginalVector,
    rho_t: &MarginalVector,
    mesh: &TimeMesh,
    grid: &Grid,
    opts: &BridgeOptions,
) -> Result<BridgeSolution> {
    if rho0.grid() != grid || rho_t.grid() != grid {
        return Err(Error::GridMismatch("target marginals vs solver grid".into()));
    }
    let r0 = opts.reference_initial.clone().unwrap_or_else(|| rho0.clone());
    reweight_reference(&r0, rho0)?;
    let chain = reference_chain(model, mesh, grid, &opts.method)?;
    let p0t = compose(&chain)?;
    let joint = JointKernel::new(&r0, &p0t)?;
    let (potentials, trace) = sinkhorn_solve(&joint, rho0, rho_t, &opts.sinkhorn)?;
    if !trace.converged {
        return Err(Error::NotConverged {
            iterations: trace.iterations,
            residual: trace.residuals.last().copied().unwrap_or(f64::NAN),
            residuals: trace.residuals,
        });
    }
    let coupling = static_bridge(&joint, &potentials);
    let h = h_field(&potentials.g, &chain)?.with_threshold(opts.eta)?;
    let density = marginal_density(&potentials, &chain, &r0)?;
    let samples = summary_points(&density.marginals, mesh, opts.summary_points, opts.seed)?;
    let coefficients =
        TransformedModel::new(model.clone(), h.field(), opts.eta).dump(&samples)?;
    let (res0, res_t) = system_residual(&joint, &potentials, rho0, rho_t)?;
    let sup = |v: &[f64]| v.iter().fold(0.0f64, |a, b| a.max(b.abs()));
    let diagnostics = Diagnostics {
        system_residual: (sup(&res0), sup(&res_t)),
        kl: kl_divergence(coupling.as_slice(), joint_slice(&joint)),
        mean_value_residual: mean_value_residual(&chain, h.grid_field())?.max_abs,
        mass_defect: density.mass_defect,
        kernel_row_defect: chain.iter().map(|k| k.max_row_defect()).fold(0.0, f64::max),
        kernel_warnings: chain.iter().filter_map(|k| k.warning.clone()).collect(),
    };
    Ok(BridgeSolution {
        mesh: mesh.clone(),
        grid: grid.clone(),
        chain,
        reference_initial: r0,
        rho0: rho0.clone(),
        rho_t: rho_t.clone(),
        joint,
        potentials,
        coupling,
        h,
        pair: density.pair,
        marginals: density.marginals,
        coefficients,
        trace,
        diagnostics,
    })
}

fn joint_slice(j: &JointKernel) -> &[f64] {
    j.matrix().as_slice().expect("standard layout")
}

/// `n` points: a uniform mesh node, then a cell drawn from the bridge marginal there.
fn summary_points(
    marginals: &[MarginalVector],
    mesh: &TimeMesh,
    n: usize,
    seed: u64,
) -> Result<Vec<(f64, Vec<f64>)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pickers = marginals
        .iter()
        .map(|m| WeightedIndex::new(m.mass()).map_err(|e| Error::InvalidParameter(e.to_string())))
        .collect::<Result<Vec<_>>>()?;
    Ok((0..n)
        .map(|_| {
            let j = rng.random_range(0..=mesh.steps());
            let c = pickers[j].sample(&mut rng);
            (mesh.time(j), marginals[j].grid().center(c))
        })
        .collect())
}

/// One approximation level of [`convergence_experiment`].
#[derive(Clone, Debug, PartialEq)]
pub struct ConvergenceRow {
    pub k: usize,
    pub tv_terminal: f64,
    pub tv_mid: f64,
    /// `ρ0`-mass of `{h_k(0,·) > η}`.
    pub r_k: f64,
}

/// For each `k`: `g_k = approx_sequence(g, k)`, `h_k = P_{t,T} g_k`, and the
/// marginals of `P^{h_k}` started from `ρ0·1{h_k(0,·) > η}/r_k` and pushed
/// through the transformed kernels. Distances are to the bridge marginals at
/// `T` and at the middle mesh node.
pub fn convergence_experiment(
    solution: &BridgeSolution,
    k_levels: &[usize],
    eta: f64,
) -> Result<Vec<ConvergenceRow>> {
    let steps = solution.mesh.steps();
    let mid = steps / 2;
    k_levels
        .iter()
        .map(|&k| {
            let gk = approx_sequence(&solution.potentials.g, &solution.grid, k)?;
            let hk = h_field(&gk, &solution.chain)?;
            let h0 = hk.node(0);
            let mut m: Vec<f64> = solution
                .rho0
                .mass()
                .iter()
                .zip(&h0)
                .map(|(p, h)| if *h > eta { *p } else { 0.0 })
                .collect();
            let r_k: f64 = m.iter().sum();
            if r_k > 0.0 {
                m.iter_mut().for_each(|v| *v /= r_k);
            }
            let mut tv_mid = tv_distance(&m, solution.marginals[0].mass());
            let mut prev = h0;
            for (j, ker) in solution.chain.iter().enumerate() {
                let next = hk.node(j + 1);
                let (ph, _) = transformed_transition(ker, &prev, &next, eta)?;
                m = ph.apply_transpose(&m);
                prev = next;
                if j + 1 == mid {
                    tv_mid = tv_distance(&m, solution.marginals[mid].mass());
                }
            }
            Ok(ConvergenceRow {
                k,
                tv_terminal: tv_distance(&m, solution.marginals[steps].mass()),
                tv_mid,
                r_k,
            })
        })
        .collect()
}

/// `KL(P̂ ‖ R)`, which equals `KL(π̂ ‖ J)` because the bridge shares the
/// reference's pinned laws.
pub fn kl_path_budget(solution: &BridgeSolution) -> f64 {
    kl_divergence(solution.coupling.as_slice(), joint_slice(&solution.joint))
}
