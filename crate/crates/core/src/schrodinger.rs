//! Static Schrödinger system on grids.
//!
//! Given the reference joint law `J = diag(r0)·P_{0T}` and targets `(ρ0, ρT)`,
//! find `f, g ≥ 0` with `f ⊙ (J g) = ρ0` and `g ⊙ (Jᵀ f) = ρT`. The optimal
//! coupling is `π̂ = diag(f)·J·diag(g)`. Divisions use `0/0 = 0`.

use crate::error::{Error, Result};
use crate::model::{Grid, MarginalVector};
use crate::numerics::log_sum_exp;
use crate::sim::{chain_kernels, KernelMatrix};
use ndarray::{Array1, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

/// Reference joint law of `(X_0, X_T)` on source × target cells.
#[derive(Clone, Debug, PartialEq)]
pub struct JointKernel {
    source: Grid,
    target: Grid,
    j: Array2<f64>,
    r0: Vec<f64>,
}

impl JointKernel {
    /// `J[i][j] = r0[i]·P[i][j]`.
    pub fn new(r0: &MarginalVector, kernel: &KernelMatrix) -> Result<Self> {
        if r0.grid() != &kernel.source {
            return Err(Error::GridMismatch("initial law vs kernel source grid".into()));
        }
        let mut j = kernel.p.clone();
        for (mut row, w) in j.rows_mut().into_iter().zip(r0.mass()) {
            row *= *w;
        }
        Self::from_matrix(kernel.source.clone(), kernel.target.clone(), j)
    }

    /// Takes `J` directly; it must be nonnegative with total mass 1.
    pub fn from_matrix(source: Grid, target: Grid, j: Array2<f64>) -> Result<Self> {
        if j.shape() != [source.len(), target.len()] {
            return Err(Error::ShapeMismatch(format!(
                "joint kernel {:?} vs grids {}×{}",
                j.shape(),
                source.len(),
                target.len()
            )));
        }
        if j.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::InvalidParameter(
                "joint kernel entries must be finite and nonnegative".into(),
            ));
        }
        let total = j.sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidParameter(format!(
                "joint kernel total mass {total} differs from 1"
            )));
        }
        let r0 = j.sum_axis(Axis(1)).to_vec();
        Ok(Self { source, target, j, r0 })
    }

    pub fn source(&self) -> &Grid {
        &self.source
    }

    pub fn target(&self) -> &Grid {
        &self.target
    }

    pub fn matrix(&self) -> &Array2<f64> {
        &self.j
    }

    /// Row marginal, i.e. the reference initial law.
    pub fn row_mass(&self) -> &[f64] {
        &self.r0
    }

    pub fn col_mass(&self) -> Vec<f64> {
        self.j.sum_axis(Axis(0)).to_vec()
    }

    /// `P[i][j] = J[i][j] / r0[i]`, rows with `r0 = 0` left at 0.
    pub fn kernel(&self) -> Array2<f64> {
        let mut p = self.j.clone();
        for (mut row, w) in p.rows_mut().into_iter().zip(&self.r0) {
            if *w > 0.0 {
                row /= *w;
            }
        }
        p
    }
}

/// Label of the scaling used to fix `(c·f, g/c)`.
pub const NORMALIZATION_TAG: &str = "sum_i f[i]*rowmass[i] = 1";

#[derive(Clone, Debug, PartialEq)]
pub struct Potentials {
    pub f: Vec<f64>,
    pub g: Vec<f64>,
    pub tag: &'static str,
}

impl Potentials {
    /// `(c·f, g/c)`.
    pub fn rescaled(&self, c: f64) -> Self {
        Self {
            f: self.f.iter().map(|v| v * c).collect(),
            g: self.g.iter().map(|v| v / c).collect(),
            tag: self.tag,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Coupling {
    pub source: Grid,
    pub target: Grid,
    pub pi: Array2<f64>,
}

impl Coupling {
    pub fn row_sums(&self) -> Vec<f64> {
        self.pi.sum_axis(Axis(1)).to_vec()
    }

    pub fn col_sums(&self) -> Vec<f64> {
        self.pi.sum_axis(Axis(0)).to_vec()
    }

    pub fn as_slice(&self) -> &[f64] {
        self.pi.as_slice().expect("standard layout")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SolveTrace {
    /// L∞ marginal error of the implied coupling after each iteration.
    pub residuals: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub log_domain: bool,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SinkhornOptions {
    pub tol: f64,
    pub max_iter: usize,
    /// `None` picks log-domain above 1000 cells or when some entry is below 1e-300.
    pub log_domain: Option<bool>,
}

impl Default for SinkhornOptions {
    fn default() -> Self {
        Self {
            tol: 1e-12,
            max_iter: 100_000,
            log_domain: None,
        }
    }
}

fn check_marginals(j: &JointKernel, rho0: &MarginalVector, rho_t: &MarginalVector) -> Result<()> {
    if rho0.grid() != j.source() || rho_t.grid() != j.target() {
        return Err(Error::GridMismatch("target marginals vs joint kernel grids".into()));
    }
    let bad: Vec<usize> = (0..j.source().len())
        .filter(|&i| rho0.mass()[i] > 0.0 && j.row_mass()[i] == 0.0)
        .collect();
    if !bad.is_empty() {
        return Err(Error::Infeasible {
            side: "source",
            cells: bad,
        });
    }
    let cols = j.col_mass();
    let bad: Vec<usize> = (0..j.target().len())
        .filter(|&k| rho_t.mass()[k] > 0.0 && cols[k] == 0.0)
        .collect();
    if !bad.is_empty() {
        return Err(Error::Infeasible {
            side: "target",
            cells: bad,
        });
    }
    Ok(())
}

fn matvec(j: &Array2<f64>, v: &[f64]) -> Vec<f64> {
    if j.nrows() * j.ncols() > 1 << 16 {
        (0..j.nrows())
            .into_par_iter()
            .map(|i| j.row(i).iter().zip(v).map(|(a, b)| a * b).sum())
            .collect()
    } else {
        j.dot(&Array1::from(v.to_vec())).to_vec()
    }
}

/// `ratio = num / den` with `0/0 = 0`; a positive numerator over zero is
/// reported as infeasible on that cell.
fn update(num: &[f64], den: &[f64], side: &'static str) -> Result<Vec<f64>> {
    let bad: Vec<usize> = (0..num.len())
        .filter(|&i| num[i] > 0.0 && den[i] == 0.0)
        .collect();
    if !bad.is_empty() {
        return Err(Error::Infeasible { side, cells: bad });
    }
    Ok(num
        .iter()
        .zip(den)
        .map(|(n, d)| if *n == 0.0 { 0.0 } else { n / d })
        .collect())
}

fn linf_err(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Iterative proportional fitting for the Schrödinger system.
///
/// Non-convergence is not an error: the trace comes back with
/// `converged = false` together with the last iterate.
pub fn sinkhorn_solve(
    j: &JointKernel,
    rho0: &MarginalVector,
    rho_t: &MarginalVector,
    opts: &SinkhornOptions,
) -> Result<(Potentials, SolveTrace)> {
    if !(opts.tol > 0.0) {
        return Err(Error::InvalidParameter("tol must be positive".into()));
    }
    check_marginals(j, rho0, rho_t)?;
    let cells = j.source().len().max(j.target().len());
    let tiny = j.matrix().iter().any(|v| *v > 0.0 && *v < 1e-300);
    let log_domain = opts.log_domain.unwrap_or(cells > 1000 || tiny);
    let (f, g, trace) = if log_domain {
        solve_log(j, rho0.mass(), rho_t.mass(), opts)?
    } else {
        solve_plain(j, rho0.mass(), rho_t.mass(), opts)?
    };
    let c: f64 = f.iter().zip(j.row_mass()).map(|(a, b)| a * b).sum();
    let pot = Potentials {
        f: f.iter().map(|v| v / c).collect(),
        g: g.iter().map(|v| v * c).collect(),
        tag: NORMALIZATION_TAG,
    };
    Ok((
        pot,
        SolveTrace {
            log_domain,
            ..trace
        },
    ))
}

fn solve_plain(
    j: &JointKernel,
    a: &[f64],
    b: &[f64],
    opts: &SinkhornOptions,
) -> Result<(Vec<f64>, Vec<f64>, SolveTrace)> {
    let jt = j.matrix().t().to_owned();
    let mut g = vec![1.0; b.len()];
    let mut f = vec![0.0; a.len()];
    let mut residuals = Vec::new();
    let mut converged = false;
    for _ in 0..opts.max_iter {
        f = update(a, &matvec(j.matrix(), &g), "source")?;
        let jtf = matvec(&jt, &f);
        g = update(b, &jtf, "target")?;
        let col: Vec<f64> = g.iter().zip(&jtf).map(|(x, y)| x * y).collect();
        let row: Vec<f64> = f
            .iter()
            .zip(matvec(j.matrix(), &g))
            .map(|(x, y)| x * y)
            .collect();
        let r = linf_err(&row, a).max(linf_err(&col, b));
        residuals.push(r);
        if r < opts.tol {
            converged = true;
            break;
        }
    }
    let iterations = residuals.len();
    Ok((
        f,
        g,
        SolveTrace {
            residuals,
            iterations,
            converged,
            log_domain: false,
        },
    ))
}

fn log_matvec(logj: &Array2<f64>, v: &[f64]) -> Vec<f64> {
    let row = |r: ndarray::ArrayView1<f64>| log_sum_exp(r.iter().zip(v).map(|(a, b)| a + b));
    if logj.nrows() * logj.ncols() > 1 << 16 {
        (0..logj.nrows()).into_par_iter().map(|i| row(logj.row(i))).collect()
    } else {
        logj.axis_iter(Axis(0)).map(row).collect()
    }
}

fn log_update(loga: &[f64], den: &[f64], side: &'static str) -> Result<Vec<f64>> {
    let bad: Vec<usize> = (0..loga.len())
        .filter(|&i| loga[i] > f64::NEG_INFINITY && den[i] == f64::NEG_INFINITY)
        .collect();
    if !bad.is_empty() {
        return Err(Error::Infeasible { side, cells: bad });
    }
    Ok(loga
        .iter()
        .zip(den)
        .map(|(n, d)| if *n == f64::NEG_INFINITY { f64::NEG_INFINITY } else { n - d })
        .collect())
}

fn solve_log(
    j: &JointKernel,
    a: &[f64],
    b: &[f64],
    opts: &SinkhornOptions,
) -> Result<(Vec<f64>, Vec<f64>, SolveTrace)> {
    let logj = j.matrix().mapv(f64::ln);
    let logjt = logj.t().to_owned();
    let loga: Vec<f64> = a.iter().map(|v| v.ln()).collect();
    let logb: Vec<f64> = b.iter().map(|v| v.ln()).collect();
    let mut v = vec![0.0; b.len()];
    let mut u = vec![f64::NEG_INFINITY; a.len()];
    let mut residuals = Vec::new();
    let mut converged = false;
    for _ in 0..opts.max_iter {
        u = log_update(&loga, &log_matvec(&logj, &v), "source")?;
        let ltu = log_matvec(&logjt, &u);
        v = log_update(&logb, &ltu, "target")?;
        let col: Vec<f64> = v.iter().zip(&ltu).map(|(x, y)| (x + y).exp()).collect();
        let row: Vec<f64> = u
            .iter()
            .zip(log_matvec(&logj, &v))
            .map(|(x, y)| (x + y).exp())
            .collect();
        let r = linf_err(&row, a).max(linf_err(&col, b));
        residuals.push(r);
        if r < opts.tol {
            converged = true;
            break;
        }
    }
    let iterations = residuals.len();
    Ok((
        u.iter().map(|x| x.exp()).collect(),
        v.iter().map(|x| x.exp()).collect(),
        SolveTrace {
            residuals,
            iterations,
            converged,
            log_domain: true,
        },
    ))
}

/// Cellwise defects in mass form: `res0[i] = f[i](Jg)[i] − ρ0[i]`,
/// `resT[j] = g[j](Jᵀf)[j] − ρT[j]`.
pub fn system_residual(
    j: &JointKernel,
    pot: &Potentials,
    rho0: &MarginalVector,
    rho_t: &MarginalVector,
) -> Result<(Vec<f64>, Vec<f64>)> {
    if pot.f.len() != j.source().len()
        || pot.g.len() != j.target().len()
        || rho0.len() != pot.f.len()
        || rho_t.len() != pot.g.len()
    {
        return Err(Error::ShapeMismatch("potentials, marginals and kernel".into()));
    }
    let jg = matvec(j.matrix(), &pot.g);
    let jtf = matvec(&j.matrix().t().to_owned(), &pot.f);
    let res0 = (0..pot.f.len())
        .map(|i| pot.f[i] * jg[i] - rho0.mass()[i])
        .collect();
    let res_t = (0..pot.g.len())
        .map(|k| pot.g[k] * jtf[k] - rho_t.mass()[k])
        .collect();
    Ok((res0, res_t))
}

/// `π̂[i][j] = f[i]·J[i][j]·g[j]`.
pub fn static_bridge(j: &JointKernel, pot: &Potentials) -> Coupling {
    let mut pi = j.matrix().clone();
    for ((r, c), v) in pi.indexed_iter_mut() {
        *v *= pot.f[r] * pot.g[c];
    }
    Coupling {
        source: j.source().clone(),
        target: j.target().clone(),
        pi,
    }
}

/// `Σ p log(p/q)` with `0·log(0/q) = 0`; `+∞` when `p` charges a `q`-null cell.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> f64 {
    assert_eq!(p.len(), q.len(), "kl_divergence shape mismatch");
    let mut acc = 0.0;
    for (a, b) in p.iter().zip(q) {
        if *a == 0.0 {
            continue;
        }
        if *b == 0.0 {
            return f64::INFINITY;
        }
        acc += a * (a / b).ln();
    }
    acc
}

fn kl_term(p: f64, q: f64) -> f64 {
    if p == 0.0 {
        0.0
    } else if q == 0.0 {
        f64::INFINITY
    } else {
        p * (p / q).ln()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimalityReport {
    pub tested: usize,
    /// Smallest `KL(perturbed) − KL(coupling)` seen; `+∞` when nothing was tested.
    pub min_margin: f64,
    pub passed: bool,
    /// No marginal-preserving move exists (e.g. both marginals point masses).
    pub vacuous: bool,
}

/// Random 2×2 exchange moves `±δ` on rows `i, i'` and columns `j, j'` keep
/// both marginals; each must not lower `KL(·‖J)` by more than 1e-12.
pub fn kl_optimality_check(
    j: &JointKernel,
    coupling: &Coupling,
    rho0: &MarginalVector,
    rho_t: &MarginalVector,
    n_perturbations: usize,
    seed: u64,
) -> Result<OptimalityReport> {
    let pi = &coupling.pi;
    if pi.shape() != j.matrix().shape() {
        return Err(Error::ShapeMismatch("coupling vs joint kernel".into()));
    }
    let feas = linf_err(&coupling.row_sums(), rho0.mass()).max(linf_err(&coupling.col_sums(), rho_t.mass()));
    if feas > 1e-8 {
        return Err(Error::InvalidParameter(format!(
            "coupling is not feasible (marginal error {feas:.3e})"
        )));
    }
    let (n, m) = (pi.nrows(), pi.ncols());
    let rows: Vec<usize> = (0..n).filter(|&i| rho0.mass()[i] > 0.0).collect();
    let cols: Vec<usize> = (0..m).filter(|&k| rho_t.mass()[k] > 0.0).collect();
    if rows.len() < 2 || cols.len() < 2 {
        return Ok(OptimalityReport {
            tested: 0,
            min_margin: f64::INFINITY,
            passed: true,
            vacuous: true,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let jm = j.matrix();
    let mut tested = 0;
    let mut min_margin = f64::INFINITY;
    let mut attempts = 0;
    while tested < n_perturbations && attempts < 100 * n_perturbations.max(1) {
        attempts += 1;
        let i1 = rows[rng.random_range(0..rows.len())];
        let i2 = rows[rng.random_range(0..rows.len())];
        let k1 = cols[rng.random_range(0..cols.len())];
        let k2 = cols[rng.random_range(0..cols.len())];
        if i1 == i2 || k1 == k2 {
            continue;
        }
        let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
        // +δ on (i1,k1),(i2,k2); −δ on (i1,k2),(i2,k1)
        let room = if sign > 0.0 {
            pi[[i1, k2]].min(pi[[i2, k1]])
        } else {
            pi[[i1, k1]].min(pi[[i2, k2]])
        };
        if room <= 0.0 {
            continue;
        }
        let delta = sign * room * rng.random_range(0.01..0.5);
        let cells = [(i1, k1, delta), (i2, k2, delta), (i1, k2, -delta), (i2, k1, -delta)];
        let mut diff = 0.0;
        for (r, c, d) in cells {
            let q = jm[[r, c]];
            let new = (pi[[r, c]] + d).max(0.0);
            diff += kl_term(new, q) - kl_term(pi[[r, c]], q);
        }
        tested += 1;
        if diff.is_nan() {
            continue;
        }
        min_margin = min_margin.min(diff);
    }
    Ok(OptimalityReport {
        tested,
        min_margin,
        passed: min_margin >= -1e-12,
        vacuous: tested == 0,
    })
}

/// Bridge marginals at every mesh node plus the endpoint pairs that had to be
/// dropped because the chain cannot connect them.
#[derive(Clone, Debug, PartialEq)]
pub struct DynamicSolution {
    pub marginals: Vec<MarginalVector>,
    pub excluded_pairs: Vec<(usize, usize)>,
    pub excluded_mass: f64,
}

/// Glues reference bridges onto `π̂`:
/// `P̂_{t_k}(z) = Σ_x P_{0k}[x,z]·Σ_y W[x,y]·P_{kT}[z,y]` with `W = π̂ ⊘ P_{0T}`.
pub fn dynamic_from_static(coupling: &Coupling, chain: &[KernelMatrix]) -> Result<DynamicSolution> {
    if chain.is_empty() {
        return Err(Error::InvalidParameter("empty kernel chain".into()));
    }
    for (k, pair) in chain.windows(2).enumerate() {
        if pair[0].target != pair[1].source || (pair[0].t - pair[1].s).abs() > 1e-12 {
            return Err(Error::GridMismatch(format!("chain breaks between kernels {k} and {}", k + 1)));
        }
    }
    if chain[0].source != coupling.source || chain[chain.len() - 1].target != coupling.target {
        return Err(Error::GridMismatch("chain endpoints vs coupling grids".into()));
    }
    let mut full = chain[0].clone();
    for k in &chain[1..] {
        full = chain_kernels(&full, k)?;
    }
    let p0t = &full.p;
    let mut w = Array2::zeros(coupling.pi.raw_dim());
    let mut excluded_pairs = Vec::new();
    let mut excluded_mass = 0.0;
    for ((x, y), v) in coupling.pi.indexed_iter() {
        if *v == 0.0 {
            continue;
        }
        if p0t[[x, y]] == 0.0 {
            excluded_pairs.push((x, y));
            excluded_mass += v;
        } else {
            w[[x, y]] = v / p0t[[x, y]];
        }
    }
    // B_k = W·P_{kT}ᵀ, backward: B_T = W, B_k = B_{k+1}·P_kᵀ
    let steps = chain.len();
    let mut b = vec![w.clone()];
    for k in (0..steps).rev() {
        let next = b.last().expect("nonempty").dot(&chain[k].p.t());
        b.push(next);
    }
    b.reverse();
    let mut a = Array2::<f64>::eye(coupling.source.len());
    let mut marginals = Vec::with_capacity(steps + 1);
    for k in 0..=steps {
        if k > 0 {
            a = a.dot(&chain[k - 1].p);
        }
        let grid = if k == 0 { &chain[0].source } else { &chain[k - 1].target };
        let mass = (&a * &b[k]).sum_axis(Axis(0)).to_vec();
        marginals.push(MarginalVector::from_weights(grid.clone(), mass)?);
    }
    Ok(DynamicSolution {
        marginals,
        excluded_pairs,
        excluded_mass,
    })
}

/// Transition matrices of the chain pinned at `X_T = cell y`:
/// `Q_k(z,w) = P_k(z,w)·P_{k+1,T}(w,y) / P_{k,T}(z,y)`. Rows that cannot reach
/// `y` are zero.
pub fn pinned_chain(chain: &[KernelMatrix], y: usize) -> Result<Vec<KernelMatrix>> {
    let last = chain
        .last()
        .ok_or_else(|| Error::InvalidParameter("empty kernel chain".into()))?;
    if y >= last.target.len() {
        return Err(Error::InvalidParameter(format!("target cell {y} out of range")));
    }
    let mut c = vec![0.0; last.target.len()];
    c[y] = 1.0;
    let mut out = Vec::with_capacity(chain.len());
    for k in chain.iter().rev() {
        let prev = k.apply(&c);
        let mut q = k.p.clone();
        for ((z, wi), v) in q.indexed_iter_mut() {
            *v = if prev[z] > 0.0 { *v * c[wi] / prev[z] } else { 0.0 };
        }
        out.push(KernelMatrix {
            p: q,
            leakage: None,
            warning: None,
            ..k.clone()
        });
        c = prev;
    }
    out.reverse();
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{builtin_model, Builtin};
    use crate::sim::{closed_form_kernel, compose, reference_chain, KernelMethod, TimeMesh};
    use crate::metrics::tv_distance;
    use crate::numerics::poisson_pmf;
    use proptest::{prop_assert, proptest};

    fn unit_grid(n: usize) -> Grid {
        Grid::uniform(0.0, n as f64, n).unwrap()
    }

    fn random_instance(seed: u64) -> (JointKernel, MarginalVector, MarginalVector) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.random_range(3..=8);
        let m = rng.random_range(3..=8);
        let mut j = Array2::from_shape_fn((n, m), |_| rng.random_range(0.05..1.0));
        j /= j.sum();
        let a: Vec<f64> = (0..n).map(|_| rng.random_range(0.1..1.0)).collect();
        let b: Vec<f64> = (0..m).map(|_| rng.random_range(0.1..1.0)).collect();
        (
            JointKernel::from_matrix(unit_grid(n), unit_grid(m), j).unwrap(),
            MarginalVector::from_weights(unit_grid(n), a).unwrap(),
            MarginalVector::from_weights(unit_grid(m), b).unwrap(),
        )
    }

    /// Minimizes KL(π‖J) over {π ≥ 0, π1 = a, πᵀ1 = b} by damped Newton steps
    /// on the primal KKT system, started from the feasible point a ⊗ b.
    fn kl_oracle(j: &Array2<f64>, a: &[f64], b: &[f64]) -> Array2<f64> {
        use nalgebra::{DMatrix, DVector};
        let (n, m) = j.dim();
        let nv = n * m;
        // row constraints plus all but the last column constraint
        let nc = n + m - 1;
        let mut pi: Vec<f64> = (0..nv).map(|k| a[k / m] * b[k % m]).collect();
        let obj = |p: &[f64]| -> f64 {
            p.iter().zip(j.iter()).map(|(x, q)| x * (x / q).ln()).sum()
        };
        for _ in 0..200 {
            let mut kkt = DMatrix::<f64>::zeros(nv + nc, nv + nc);
            let mut rhs = DVector::<f64>::zeros(nv + nc);
            for k in 0..nv {
                let (r, c) = (k / m, k % m);
                kkt[(k, k)] = 1.0 / pi[k];
                rhs[k] = -((pi[k] / j[[r, c]]).ln() + 1.0);
                kkt[(k, nv + r)] = 1.0;
                kkt[(nv + r, k)] = 1.0;
                if c + 1 < m {
                    kkt[(k, nv + n + c)] = 1.0;
                    kkt[(nv + n + c, k)] = 1.0;
                }
            }
            let sol = kkt.lu().solve(&rhs).expect("nonsingular KKT system");
            let d: Vec<f64> = (0..nv).map(|k| sol[k]).collect();
            let decrement: f64 = d.iter().zip(&pi).map(|(x, p)| x * x / p).sum();
            if decrement < 1e-30 {
                break;
            }
            let f0 = obj(&pi);
            let mut step = 1.0;
            loop {
                let cand: Vec<f64> = pi.iter().zip(&d).map(|(p, x)| p + step * x).collect();
                if cand.iter().all(|v| *v > 0.0) && obj(&cand) <= f0 - 0.25 * step * decrement {
                    pi = cand;
                    break;
                }
                step *= 0.5;
                assert!(step > 1e-20, "line search failed");
            }
        }
        Array2::from_shape_vec((n, m), pi).unwrap()
    }

    #[test]
    fn uniform_two_by_two() {
        let g = unit_grid(2);
        let j = JointKernel::from_matrix(g.clone(), g.clone(), Array2::from_elem((2, 2), 0.25)).unwrap();
        let half = MarginalVector::uniform(g);
        let (pot, trace) = sinkhorn_solve(&j, &half, &half, &SinkhornOptions::default()).unwrap();
        assert!(trace.converged);
        assert!(pot.f.iter().chain(&pot.g).all(|v| (v - 1.0).abs() < 1e-15));
        let c = static_bridge(&j, &pot);
        assert_eq!(c.pi, *j.matrix());
    }

    fn poisson_golden() -> (JointKernel, MarginalVector, MarginalVector) {
        let g = Grid::integers(0, 40).unwrap();
        let m = builtin_model(&Builtin::Poisson { rate: 1.0, cutoff: 1e-3 }).unwrap();
        let k = closed_form_kernel(&m, 0.0, 1.0, &g, &g).unwrap();
        let r0 = MarginalVector::point(g.clone(), &[0.0]).unwrap();
        let j = JointKernel::new(&r0, &k).unwrap();
        let rho_t = MarginalVector::poisson(g, 2.0).unwrap();
        (j, r0, rho_t)
    }

    #[test]
    fn poisson_golden_potentials() {
        let (j, r0, rho_t) = poisson_golden();
        for log in [false, true] {
            let opts = SinkhornOptions {
                log_domain: Some(log),
                ..Default::default()
            };
            let (pot, trace) = sinkhorn_solve(&j, &r0, &rho_t, &opts).unwrap();
            assert!(trace.converged);
            assert_eq!(trace.log_domain, log);
            for (y, g) in pot.g.iter().enumerate() {
                if rho_t.mass()[y] > 1e-12 {
                    let exp = (-1.0f64).exp() * 2f64.powi(y as i32);
                    assert!((g / exp - 1.0).abs() < 1e-6, "y={y} g={g} exp={exp}");
                }
            }
            assert!(pot.f[1..].iter().all(|v| *v == 0.0));
            let (r0s, rts) = system_residual(&j, &pot, &r0, &rho_t).unwrap();
            assert!(r0s.iter().chain(&rts).all(|v| v.abs() < 1e-10));
            let c = static_bridge(&j, &pot);
            assert!(linf_err(&c.pi.row(0).to_vec(), rho_t.mass()) < 1e-12);
            assert!(c.pi.rows().into_iter().skip(1).all(|r| r.iter().all(|v| *v == 0.0)));
        }
    }

    #[test]
    fn closed_form_golden_potentials_satisfy_system() {
        let (j, r0, rho_t) = poisson_golden();
        let mut f = vec![0.0; 41];
        f[0] = 1.0;
        let g: Vec<f64> = (0..41).map(|y| (-1.0f64).exp() * 2f64.powi(y)).collect();
        let pot = Potentials { f, g, tag: NORMALIZATION_TAG };
        let (a, b) = system_residual(&j, &pot, &r0, &rho_t).unwrap();
        assert!(a.iter().chain(&b).all(|v| v.abs() < 1e-10));
    }

    #[test]
    fn zero_potential_residual_is_minus_target() {
        let (j, r0, rho_t) = poisson_golden();
        let pot = Potentials {
            f: vec![0.0; 41],
            g: vec![1.0; 41],
            tag: NORMALIZATION_TAG,
        };
        let (a, _) = system_residual(&j, &pot, &r0, &rho_t).unwrap();
        for (x, m) in a.iter().zip(r0.mass()) {
            assert_eq!(*x, -m);
        }
    }

    #[test]
    fn random_instances_match_kl_oracle() {
        for seed in 0..10 {
            let (j, a, b) = random_instance(seed);
            let (pot, trace) = sinkhorn_solve(&j, &a, &b, &SinkhornOptions::default()).unwrap();
            assert!(trace.converged);
            let c = static_bridge(&j, &pot);
            let oracle = kl_oracle(j.matrix(), a.mass(), b.mass());
            let err = (&c.pi - &oracle).iter().map(|v| v.abs()).fold(0.0, f64::max);
            assert!(err < 1e-6, "seed {seed}: {err}");
            let rep = kl_optimality_check(&j, &c, &a, &b, 100, seed).unwrap();
            assert!(rep.passed && rep.tested == 100, "{rep:?}");
        }
    }

    #[test]
    fn log_domain_residuals_nonincreasing() {
        for seed in 0..20 {
            let (j, a, b) = random_instance(100 + seed);
            let opts = SinkhornOptions {
                log_domain: Some(true),
                ..Default::default()
            };
            let (_, trace) = sinkhorn_solve(&j, &a, &b, &opts).unwrap();
            for w in trace.residuals[1..].windows(2) {
                assert!(w[1] <= w[0] * (1.0 + 1e-9) + 1e-15, "{:?}", trace.residuals);
            }
        }
    }

    #[test]
    fn perturbed_coupling_fails_check() {
        let (j, a, b) = random_instance(7);
        let (pot, _) = sinkhorn_solve(&j, &a, &b, &SinkhornOptions::default()).unwrap();
        let mut c = static_bridge(&j, &pot);
        let d = 0.3 * c.pi[[0, 1]].min(c.pi[[1, 0]]);
        c.pi[[0, 0]] += d;
        c.pi[[1, 1]] += d;
        c.pi[[0, 1]] -= d;
        c.pi[[1, 0]] -= d;
        let rep = kl_optimality_check(&j, &c, &a, &b, 100, 1).unwrap();
        assert!(!rep.passed && rep.min_margin < 0.0);
    }

    #[test]
    fn point_masses_are_vacuous() {
        let g = unit_grid(3);
        let mut jm = Array2::from_elem((3, 3), 1.0 / 9.0);
        jm[[0, 0]] = 1.0 / 9.0;
        let j = JointKernel::from_matrix(g.clone(), g.clone(), jm).unwrap();
        let a = MarginalVector::point(g.clone(), &[0.5]).unwrap();
        let b = MarginalVector::point(g, &[2.5]).unwrap();
        let (pot, trace) = sinkhorn_solve(&j, &a, &b, &SinkhornOptions::default()).unwrap();
        assert!(trace.converged);
        let c = static_bridge(&j, &pot);
        let rep = kl_optimality_check(&j, &c, &a, &b, 100, 0).unwrap();
        assert!(rep.passed && rep.vacuous);
    }

    #[test]
    fn infeasible_support_lists_cells() {
        let g = unit_grid(3);
        let mut jm = Array2::from_elem((3, 3), 1.0 / 6.0);
        jm.column_mut(2).fill(0.0);
        let j = JointKernel::from_matrix(g.clone(), g.clone(), jm).unwrap();
        let a = MarginalVector::uniform(g.clone());
        let b = MarginalVector::uniform(g);
        match sinkhorn_solve(&j, &a, &b, &SinkhornOptions::default()) {
            Err(Error::Infeasible { side, cells }) => {
                assert_eq!(side, "target");
                assert_eq!(cells, vec![2]);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn non_convergence_is_reported() {
        let (j, a, b) = random_instance(3);
        let opts = SinkhornOptions {
            max_iter: 1,
            ..Default::default()
        };
        let (_, trace) = sinkhorn_solve(&j, &a, &b, &opts).unwrap();
        assert!(!trace.converged);
        assert_eq!(trace.iterations, 1);
    }

    #[test]
    fn kl_examples() {
        let g = Grid::integers(0, 40).unwrap();
        let p = MarginalVector::poisson(g.clone(), 2.0).unwrap();
        let q = MarginalVector::poisson(g, 1.0).unwrap();
        assert_eq!(kl_divergence(q.mass(), q.mass()), 0.0);
        let exp = 2.0 * 2f64.ln() - 1.0;
        // direct summation oracle
        let direct: f64 = (0..100u64)
            .map(|k| {
                let a = poisson_pmf(k, 2.0);
                if a == 0.0 {
                    0.0
                } else {
                    a * (a / poisson_pmf(k, 1.0)).ln()
                }
            })
            .sum();
        assert!((direct - exp).abs() < 1e-12);
        assert!((kl_divergence(p.mass(), q.mass()) - exp).abs() < 1e-4);
        assert_eq!(kl_divergence(&[0.5, 0.5], &[1.0, 0.0]), f64::INFINITY);
    }

    #[test]
    fn kl_equals_potential_sums() {
        let (j, a, b) = random_instance(11);
        let (pot, _) = sinkhorn_solve(&j, &a, &b, &SinkhornOptions::default()).unwrap();
        let c = static_bridge(&j, &pot);
        let lhs = kl_divergence(c.as_slice(), j.matrix().as_slice().unwrap());
        let rhs: f64 = a.mass().iter().zip(&pot.f).map(|(m, f)| m * f.ln()).sum::<f64>()
            + b.mass().iter().zip(&pot.g).map(|(m, g)| m * g.ln()).sum::<f64>();
        assert!((lhs - rhs).abs() < 1e-10);
    }

    fn three_state_chain() -> Vec<KernelMatrix> {
        let g = unit_grid(3);
        let mk = |s: f64, p: [[f64; 3]; 3]| KernelMatrix {
            source: g.clone(),
            target: g.clone(),
            s,
            t: s + 1.0,
            p: Array2::from_shape_fn((3, 3), |(i, j)| p[i][j]),
            leakage: None,
            warning: None,
        };
        vec![
            mk(0.0, [[0.5, 0.3, 0.2], [0.1, 0.6, 0.3], [0.0, 0.4, 0.6]]),
            mk(1.0, [[0.7, 0.2, 0.1], [0.2, 0.5, 0.3], [0.3, 0.3, 0.4]]),
        ]
    }

    #[test]
    fn dynamic_matches_path_enumeration() {
        let chain = three_state_chain();
        let g = unit_grid(3);
        let p0t = compose(&chain).unwrap();
        let r0 = MarginalVector::new(g.clone(), vec![0.2, 0.5, 0.3]).unwrap();
        let j = JointKernel::new(&r0, &p0t).unwrap();
        let a = MarginalVector::new(g.clone(), vec![0.6, 0.1, 0.3]).unwrap();
        let b = MarginalVector::new(g.clone(), vec![0.25, 0.25, 0.5]).unwrap();
        let (pot, _) = sinkhorn_solve(&j, &a, &b, &SinkhornOptions::default()).unwrap();
        let c = static_bridge(&j, &pot);
        let dynamic = dynamic_from_static(&c, &chain).unwrap();
        assert!(dynamic.excluded_pairs.is_empty());
        // exhaustive enumeration of the bridge path measure
        let mut mid = [0.0; 3];
        let mut path_prob = Array2::<f64>::zeros((9, 3));
        for x0 in 0..3 {
            for x1 in 0..3 {
                for x2 in 0..3 {
                    let w = c.pi[[x0, x2]] * chain[0].p[[x0, x1]] * chain[1].p[[x1, x2]]
                        / p0t.p[[x0, x2]];
                    mid[x1] += w;
                    path_prob[[x0 * 3 + x2, x1]] += w;
                }
            }
        }
        for z in 0..3 {
            assert!((dynamic.marginals[1].mass()[z] - mid[z]).abs() < 1e-14);
        }
        assert!(linf_err(dynamic.marginals[0].mass(), a.mass()) < 1e-12);
        assert!(linf_err(dynamic.marginals[2].mass(), b.mass()) < 1e-12);
        // pinned transitions reproduce the enumerated conditional laws
        for y in 0..3 {
            let q = pinned_chain(&chain, y).unwrap();
            for x0 in 0..3 {
                let tot: f64 = path_prob.row(x0 * 3 + y).sum();
                for x1 in 0..3 {
                    let cond = path_prob[[x0 * 3 + y, x1]] / tot;
                    assert!((q[0].p[[x0, x1]] - cond).abs() < 1e-14);
                }
                assert!((q[1].p.row(x0).sum() - 1.0).abs() < 1e-14);
                assert_eq!(q[1].p[[x0, y]], if chain[1].p[[x0, y]] > 0.0 { 1.0 } else { 0.0 });
            }
        }
    }

    #[test]
    fn poisson_golden_midpoint() {
        let (j, r0, rho_t) = poisson_golden();
        let (pot, _) = sinkhorn_solve(&j, &r0, &rho_t, &SinkhornOptions::default()).unwrap();
        let c = static_bridge(&j, &pot);
        let g = j.source().clone();
        let mesh = TimeMesh::uniform(1.0, 64).unwrap();
        let m = builtin_model(&Builtin::Poisson { rate: 1.0, cutoff: 1e-3 }).unwrap();
        let chain = reference_chain(&m, &mesh, &g, &KernelMethod::ClosedForm).unwrap();
        let dynamic = dynamic_from_static(&c, &chain).unwrap();
        for mv in &dynamic.marginals {
            assert!((mv.mass().iter().sum::<f64>() - 1.0).abs() < 1e-10);
        }
        let target = MarginalVector::poisson(g, 1.0).unwrap();
        assert!(tv_distance(dynamic.marginals[32].mass(), target.mass()) < 1e-3);
        assert!(linf_err(dynamic.marginals[0].mass(), r0.mass()) < 1e-12);
        assert!(linf_err(dynamic.marginals[64].mass(), rho_t.mass()) < 1e-10);
    }

    #[test]
    fn unreachable_pairs_are_excluded() {
        let chain = three_state_chain();
        let g = unit_grid(3);
        let mut pi = Array2::zeros((3, 3));
        pi[[2, 0]] = 0.5;
        pi[[0, 0]] = 0.5;
        let mut chain = chain;
        chain[0].p = Array2::eye(3);
        chain[1].p = Array2::eye(3);
        let c = Coupling { source: g.clone(), target: g, pi };
        let d = dynamic_from_static(&c, &chain).unwrap();
        assert_eq!(d.excluded_pairs, vec![(2, 0)]);
        assert_eq!(d.excluded_mass, 0.5);
        assert_eq!(d.marginals[1].mass(), &[1.0, 0.0, 0.0]);
    }

    proptest! {
        #[test]
        fn scaling_leaves_coupling_unchanged(seed in 0u64..1000, c in 0.01f64..100.0) {
            let (j, a, b) = random_instance(seed);
            let (pot, _) = sinkhorn_solve(&j, &a, &b, &SinkhornOptions::default()).unwrap();
            let p1 = static_bridge(&j, &pot);
            let p2 = static_bridge(&j, &pot.rescaled(c));
            for (x, y) in p1.pi.iter().zip(p2.pi.iter()) {
                prop_assert!((x - y).abs() <= 1e-12 * x.abs().max(1e-300) + 1e-18);
            }
        }

        #[test]
        fn converged_solutions_are_feasible(seed in 0u64..1000) {
            let (j, a, b) = random_instance(seed);
            let opts = SinkhornOptions { tol: 1e-11, ..Default::default() };
            let (pot, trace) = sinkhorn_solve(&j, &a, &b, &opts).unwrap();
            prop_assert!(trace.converged);
            let (r0, rt) = system_residual(&j, &pot, &a, &b).unwrap();
            prop_assert!(r0.iter().chain(&rt).all(|v| v.abs() < 1e-11));
            let c = static_bridge(&j, &pot);
            prop_assert!(linf_err(&c.row_sums(), a.mass()) < 1e-11);
            prop_assert!(linf_err(&c.col_sums(), b.mass()) < 1e-11);
        }
    }
}
