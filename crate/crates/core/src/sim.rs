//! Path simulation, empirical marginals and discrete transition kernels.
//!
//! Jumps arrive on exact exponential clocks at the truncated rate
//! `ν({|z| > ε})`; between arrivals the continuous part takes one Euler step
//! with left-endpoint coefficients. Every path owns a ChaCha stream selected by
//! its index, so results do not depend on how work is scheduled.

use crate::error::{Error, Result};
use crate::model::{compensator_drift, Builtin, Grid, MarginalVector, Model};
use crate::numerics::{normal_interval_mass, poisson_pmf};
use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Exp1, StandardNormal};
use rayon::prelude::*;

/// Time nodes `0 = t_0 < … < t_J = T`.
#[derive(Clone, Debug, PartialEq)]
pub struct TimeMesh {
    times: Vec<f64>,
}

impl TimeMesh {
    /// Uniform mesh with `steps` steps on `[0, horizon]`.
    pub fn uniform(horizon: f64, steps: usize) -> Result<Self> {
        if !(horizon > 0.0 && horizon.is_finite()) || steps == 0 {
            return Err(Error::InvalidParameter(
                "mesh needs a positive horizon and at least one step".into(),
            ));
        }
        let mut times: Vec<f64> = (0..=steps)
            .map(|j| horizon * j as f64 / steps as f64)
            .collect();
        times[steps] = horizon;
        Ok(Self { times })
    }

    pub fn from_times(times: Vec<f64>) -> Result<Self> {
        if times.len() < 2 || times[0] != 0.0 {
            return Err(Error::InvalidParameter(
                "mesh must start at 0 and have at least two nodes".into(),
            ));
        }
        if times.windows(2).any(|w| !(w[1] > w[0]) || !w[1].is_finite()) {
            return Err(Error::InvalidParameter(
                "mesh times must be strictly increasing".into(),
            ));
        }
        Ok(Self { times })
    }

    pub fn horizon(&self) -> f64 {
        *self.times.last().unwrap()
    }

    pub fn steps(&self) -> usize {
        self.times.len() - 1
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn time(&self, j: usize) -> f64 {
        self.times[j]
    }

    pub fn dt(&self, j: usize) -> f64 {
        self.times[j + 1] - self.times[j]
    }

    /// Index of the node equal to `t` up to a relative tolerance of 1e-12.
    pub fn index_of(&self, t: f64) -> Result<usize> {
        let tol = 1e-12 * self.horizon().max(1.0);
        self.times
            .iter()
            .position(|&s| (s - t).abs() <= tol)
            .ok_or(Error::NotOnMesh(t))
    }

    /// Last node index `j` with `t_j <= t`.
    pub fn floor_index(&self, t: f64) -> usize {
        match self.times.partition_point(|&s| s <= t) {
            0 => 0,
            k => (k - 1).min(self.steps()),
        }
    }
}

/// Law of `X_0`.
#[derive(Clone, Debug)]
pub enum InitialLaw {
    Point(Vec<f64>),
    /// Draws cell centers with the vector's masses.
    Marginal(MarginalVector),
}

impl InitialLaw {
    pub(crate) fn dim(&self) -> usize {
        match self {
            InitialLaw::Point(x) => x.len(),
            InitialLaw::Marginal(m) => m.grid().dim(),
        }
    }

    fn sampler(&self) -> InitialSampler<'_> {
        match self {
            InitialLaw::Point(x) => InitialSampler::Point(x),
            InitialLaw::Marginal(m) => {
                let mut acc = 0.0;
                let cdf = m
                    .mass()
                    .iter()
                    .map(|p| {
                        acc += p;
                        acc
                    })
                    .collect();
                InitialSampler::Table { law: m, cdf }
            }
        }
    }
}

enum InitialSampler<'a> {
    Point(&'a [f64]),
    Table {
        law: &'a MarginalVector,
        cdf: Vec<f64>,
    },
}

impl InitialSampler<'_> {
    fn draw(&self, rng: &mut ChaCha8Rng) -> Vec<f64> {
        match self {
            InitialSampler::Point(x) => x.to_vec(),
            InitialSampler::Table { law, cdf } => {
                let u: f64 = rng.random::<f64>() * cdf[cdf.len() - 1];
                let mut k = cdf.partition_point(|&c| c <= u).min(cdf.len() - 1);
                while law.mass()[k] == 0.0 && k > 0 {
                    k -= 1;
                }
                law.grid().center(k)
            }
        }
    }
}

/// One realized jump of a path.
#[derive(Clone, Debug, PartialEq)]
pub struct JumpRecord {
    pub time: f64,
    pub mark: Vec<f64>,
    /// `X_{s−}`.
    pub pre_state: Vec<f64>,
    /// `γ(s, X_{s−}, mark)`.
    pub displacement: Vec<f64>,
}

/// Why a path was dropped from an ensemble.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StopReason {
    NonFinite,
    /// Entered `{h <= η}` during transformed simulation.
    LeftSupport,
    /// Left the domain of a grid-backed field.
    LeftDomain,
}

/// Per-step integrals kept for Girsanov weights and bookkeeping checks.
#[derive(Clone, Debug)]
pub struct Increments {
    /// `ΔB` over each mesh step, shape `(paths, steps, m)`.
    pub brownian: Array3<f64>,
    /// `∫ b_eff dt` over each mesh step (compensator included), shape `(paths, steps, n)`.
    pub drift: Array3<f64>,
    /// `∫ σ dB` over each mesh step, shape `(paths, steps, n)`.
    pub diffusion: Array3<f64>,
}

/// Simulated paths sampled at the mesh nodes.
#[derive(Clone, Debug)]
pub struct PathEnsemble {
    mesh: TimeMesh,
    ids: Vec<usize>,
    states: Array3<f64>,
    jumps: Vec<Vec<JumpRecord>>,
    increments: Option<Increments>,
    seed: u64,
    requested: usize,
    excluded: Vec<(usize, StopReason)>,
}

impl PathEnsemble {
    pub fn mesh(&self) -> &TimeMesh {
        &self.mesh
    }

    /// Number of retained paths.
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.states.shape()[2]
    }

    /// Original path indices of the retained paths.
    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    /// States with shape `(paths, nodes, n)`.
    pub fn states(&self) -> &Array3<f64> {
        &self.states
    }

    pub fn state(&self, path: usize, node: usize) -> Vec<f64> {
        self.states
            .slice(ndarray::s![path, node, ..])
            .iter()
            .copied()
            .collect()
    }

    pub fn jumps(&self, path: usize) -> &[JumpRecord] {
        &self.jumps[path]
    }

    pub fn increments(&self) -> Option<&Increments> {
        self.increments.as_ref()
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn requested(&self) -> usize {
        self.requested
    }

    /// Dropped paths with the reason.
    pub fn excluded(&self) -> &[(usize, StopReason)] {
        &self.excluded
    }

    pub fn excluded_count(&self, reason: StopReason) -> usize {
        self.excluded.iter().filter(|(_, r)| *r == reason).count()
    }
}

/// Simulation switches.
#[derive(Clone, Debug, Default)]
pub struct SimOptions {
    /// Keep per-step Brownian, drift and diffusion integrals.
    pub store_increments: bool,
}

/// Hooks used by transformed simulation. The plain reference dynamics is
/// the identity tilt.
pub(crate) trait Tilt: Sync {
    /// Errors if `(t, x)` is outside the region where the tilt is defined.
    fn check(&self, t: f64, x: &[f64]) -> std::result::Result<(), StopReason>;
    /// Effective drift, compensator included.
    fn drift(
        &self,
        model: &Model,
        t: f64,
        x: &[f64],
        out: &mut [f64],
    ) -> std::result::Result<(), StopReason>;
    /// Multiplier of the reference rate for the candidate clock.
    fn bound(&self) -> f64;
    /// Intensity ratio for the node with index `node` in `LevyMeasure::nodes` order.
    fn ratio(
        &self,
        t: f64,
        x: &[f64],
        node: usize,
    ) -> std::result::Result<f64, StopReason>;
}

struct NoTilt;

impl Tilt for NoTilt {
    fn check(&self, _t: f64, _x: &[f64]) -> std::result::Result<(), StopReason> {
        Ok(())
    }

    fn drift(
        &self,
        model: &Model,
        t: f64,
        x: &[f64],
        out: &mut [f64],
    ) -> std::result::Result<(), StopReason> {
        reference_drift(model, t, x, out);
        Ok(())
    }

    fn bound(&self) -> f64 {
        1.0
    }

    fn ratio(&self, _t: f64, _x: &[f64], _node: usize) -> std::result::Result<f64, StopReason> {
        Ok(1.0)
    }
}

/// `b + compensator` at `(t, x)`.
pub(crate) fn reference_drift(model: &Model, t: f64, x: &[f64], out: &mut [f64]) {
    model.drift_into(t, x, out);
    let c = compensator_drift(model, t, x).unwrap_or_else(|_| vec![f64::NAN; out.len()]);
    for (o, ci) in out.iter_mut().zip(&c) {
        *o += ci;
    }
}

struct PathOutcome {
    states: Vec<f64>,
    jumps: Vec<JumpRecord>,
    incs: Option<(Vec<f64>, Vec<f64>, Vec<f64>)>,
    stop: Option<StopReason>,
}

/// Path generator for `path` under root `seed`.
pub fn path_rng(seed: u64, path: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(path);
    rng
}

#[allow(clippy::too_many_arguments)]
fn simulate_one(
    model: &Model,
    tilt: &dyn Tilt,
    x0: Vec<f64>,
    t_offset: f64,
    mesh: &TimeMesh,
    rng: &mut ChaCha8Rng,
    store: bool,
    large: &[(usize, Vec<f64>, f64)],
    total_rate: f64,
) -> PathOutcome {
    let n = model.state_dim();
    let m = model.noise_dim();
    let steps = mesh.steps();
    let mut states = Vec::with_capacity((steps + 1) * n);
    let mut jumps = Vec::new();
    let mut incs = store.then(|| {
        (
            vec![0.0; steps * m],
            vec![0.0; steps * n],
            vec![0.0; steps * n],
        )
    });
    let cand_rate = total_rate * tilt.bound();
    let mut x = x0;
    states.extend_from_slice(&x);
    let mut b = vec![0.0; n];
    let mut sig = vec![0.0; n * m];
    let mut db = vec![0.0; m];
    let mut g = vec![0.0; n];
    let draw_exp = |rng: &mut ChaCha8Rng| -> f64 {
        if cand_rate > 0.0 {
            let e: f64 = rng.sample(Exp1);
            e / cand_rate
        } else {
            f64::INFINITY
        }
    };
    let stop = |states, jumps, incs, r| PathOutcome {
        states,
        jumps,
        incs,
        stop: Some(r),
    };
    let mut next = t_offset + draw_exp(rng);
    if let Err(r) = tilt.check(t_offset, &x) {
        return stop(states, jumps, incs, r);
    }
    for j in 0..steps {
        let mut t = t_offset + mesh.time(j);
        let end = t_offset + mesh.time(j + 1);
        loop {
            let seg_end = next.min(end);
            let dt = seg_end - t;
            if dt > 0.0 {
                if let Err(r) = tilt.drift(model, t, &x, &mut b) {
                    return stop(states, jumps, incs, r);
                }
                if m > 0 {
                    model.dispersion_into(t, &x, &mut sig);
                    let sd = dt.sqrt();
                    for v in db.iter_mut() {
                        let z: f64 = rng.sample(StandardNormal);
                        *v = sd * z;
                    }
                }
                for i in 0..n {
                    let mut diff = 0.0;
                    for k in 0..m {
                        diff += sig[i * m + k] * db[k];
                    }
                    let drift = b[i] * dt;
                    x[i] += drift + diff;
                    if let Some((_, di, si)) = incs.as_mut() {
                        di[j * n + i] += drift;
                        si[j * n + i] += diff;
                    }
                }
                if let Some((bi, _, _)) = incs.as_mut() {
                    for k in 0..m {
                        bi[j * m + k] += db[k];
                    }
                }
            }
            t = seg_end;
            if next > end {
                break;
            }
            // candidate jump at `next`
            let u: f64 = rng.random::<f64>() * total_rate;
            let mut acc = 0.0;
            let mut pick = large.len() - 1;
            for (k, (_, _, w)) in large.iter().enumerate() {
                acc += w;
                if u < acc {
                    pick = k;
                    break;
                }
            }
            let (node, z, _) = &large[pick];
            let accept = match tilt.ratio(t, &x, *node) {
                Ok(r) => {
                    let p = r / tilt.bound();
                    p >= 1.0 || rng.random::<f64>() < p
                }
                Err(r) => return stop(states, jumps, incs, r),
            };
            if accept {
                model.jump_into(t, &x, z, &mut g);
                let pre = x.clone();
                for i in 0..n {
                    x[i] += g[i];
                }
                jumps.push(JumpRecord {
                    time: t,
                    mark: z.clone(),
                    pre_state: pre,
                    displacement: g.clone(),
                });
                if let Err(r) = tilt.check(t, &x) {
                    return stop(states, jumps, incs, r);
                }
            }
            next = t + draw_exp(rng);
        }
        if x.iter().any(|v| !v.is_finite()) {
            return stop(states, jumps, incs, StopReason::NonFinite);
        }
        if let Err(r) = tilt.check(end, &x) {
            return stop(states, jumps, incs, r);
        }
        states.extend_from_slice(&x);
    }
    PathOutcome {
        states,
        jumps,
        incs,
        stop: None,
    }
}

/// Support points with `|z| > ε`, tagged with their index in `nodes()` order.
pub(crate) fn large_marks(model: &Model) -> (Vec<(usize, Vec<f64>, f64)>, f64) {
    let levy = model.levy();
    let eps = levy.cutoff();
    let large: Vec<(usize, Vec<f64>, f64)> = levy
        .nodes()
        .into_iter()
        .enumerate()
        .filter(|(_, (z, w))| z.iter().map(|v| v * v).sum::<f64>().sqrt() > eps && *w > 0.0)
        .map(|(k, (z, w))| (k, z.to_vec(), w))
        .collect();
    let rate = large.iter().map(|(_, _, w)| w).sum();
    (large, rate)
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn simulate_with(
    model: &Model,
    tilt: &dyn Tilt,
    initial: &InitialLaw,
    t_offset: f64,
    mesh: &TimeMesh,
    n_paths: usize,
    seed: u64,
    opts: &SimOptions,
) -> Result<PathEnsemble> {
    if n_paths == 0 {
        return Err(Error::InvalidParameter("n_paths must be >= 1".into()));
    }
    let n = model.state_dim();
    let m = model.noise_dim();
    if initial.dim() != n {
        return Err(Error::ShapeMismatch(format!(
            "initial law has dimension {}, model {}",
            initial.dim(),
            n
        )));
    }
    let (large, rate) = large_marks(model);
    if !rate.is_finite() {
        return Err(Error::UnsupportedModel("infinite truncated jump rate".into()));
    }
    let sampler = initial.sampler();
    let store = opts.store_increments;
    let outcomes: Vec<PathOutcome> = (0..n_paths)
        .into_par_iter()
        .map(|p| {
            let mut rng = path_rng(seed, p as u64);
            let x0 = sampler.draw(&mut rng);
            simulate_one(model, tilt, x0, t_offset, mesh, &mut rng, store, &large, rate)
        })
        .collect();

    let steps = mesh.steps();
    let kept: Vec<usize> = (0..n_paths).filter(|&p| outcomes[p].stop.is_none()).collect();
    let excluded = outcomes
        .iter()
        .enumerate()
        .filter_map(|(p, o)| o.stop.map(|r| (p, r)))
        .collect();
    let mut states = Array3::zeros((kept.len(), steps + 1, n));
    let mut increments = store.then(|| Increments {
        brownian: Array3::zeros((kept.len(), steps, m)),
        drift: Array3::zeros((kept.len(), steps, n)),
        diffusion: Array3::zeros((kept.len(), steps, n)),
    });
    let mut jumps = Vec::with_capacity(kept.len());
    let mut outcomes = outcomes;
    for (row, &p) in kept.iter().enumerate() {
        let o = &mut outcomes[p];
        for (k, v) in o.states.iter().enumerate() {
            states[[row, k / n, k % n]] = *v;
        }
        if let (Some(inc), Some((bi, di, si))) = (increments.as_mut(), o.incs.as_ref()) {
            for (k, v) in bi.iter().enumerate() {
                inc.brownian[[row, k / m, k % m]] = *v;
            }
            for (k, v) in di.iter().enumerate() {
                inc.drift[[row, k / n, k % n]] = *v;
            }
            for (k, v) in si.iter().enumerate() {
                inc.diffusion[[row, k / n, k % n]] = *v;
            }
        }
        jumps.push(std::mem::take(&mut o.jumps));
    }
    Ok(PathEnsemble {
        mesh: mesh.clone(),
        ids: kept,
        states,
        jumps,
        increments,
        seed,
        requested: n_paths,
        excluded,
    })
}

/// Simulates `n_paths` paths of the reference SDE on `mesh`.
pub fn simulate_paths(
    model: &Model,
    initial: &InitialLaw,
    mesh: &TimeMesh,
    n_paths: usize,
    seed: u64,
    opts: &SimOptions,
) -> Result<PathEnsemble> {
    simulate_with(model, &NoTilt, initial, 0.0, mesh, n_paths, seed, opts)
}

/// Weighted histogram over grid cells. `mass` is a fraction of the total
/// weight; the weight falling outside the grid is kept in `outside`.
#[derive(Clone, Debug, PartialEq)]
pub struct Histogram {
    pub grid: Grid,
    pub mass: Vec<f64>,
    pub outside: f64,
}

impl Histogram {
    /// Probability vector conditioned on landing inside the grid.
    pub fn normalized(&self) -> Result<MarginalVector> {
        MarginalVector::from_weights(self.grid.clone(), self.mass.clone())
    }
}

pub(crate) fn weighted_histogram(
    paths: &PathEnsemble,
    node: usize,
    grid: &Grid,
    weights: Option<&[f64]>,
) -> Result<Histogram> {
    if grid.dim() != paths.dim() {
        return Err(Error::GridMismatch("histogram grid dimension".into()));
    }
    let mut mass = vec![0.0; grid.len()];
    let mut outside = 0.0;
    let mut total = 0.0;
    for p in 0..paths.len() {
        let w = weights.map_or(1.0, |w| w[p]);
        if w == 0.0 {
            continue;
        }
        total += w;
        let x = paths.states.slice(ndarray::s![p, node, ..]);
        match grid.locate(x.as_slice().unwrap()) {
            Some(k) => mass[k] += w,
            None => outside += w,
        }
    }
    if total <= 0.0 {
        return Err(Error::DegenerateWeights);
    }
    mass.iter_mut().for_each(|m| *m /= total);
    Ok(Histogram {
        grid: grid.clone(),
        mass,
        outside: outside / total,
    })
}

/// Histogram of `X_t` over the cells of `grid`; `t` must be a mesh node.
pub fn empirical_marginal(paths: &PathEnsemble, t: f64, grid: &Grid) -> Result<Histogram> {
    let node = paths.mesh.index_of(t)?;
    weighted_histogram(paths, node, grid, None)
}

/// Discrete transition matrix `P[i][j] ≈ P_{s,t}(x_i, cell_j)`.
#[derive(Clone, Debug, PartialEq)]
pub struct KernelMatrix {
    pub source: Grid,
    pub target: Grid,
    pub s: f64,
    pub t: f64,
    pub p: Array2<f64>,
    /// Fraction of simulated mass that left the target grid, per row (Monte Carlo only).
    pub leakage: Option<Vec<f64>>,
    pub warning: Option<String>,
}

impl KernelMatrix {
    pub fn identity(grid: &Grid, t: f64) -> Self {
        Self {
            source: grid.clone(),
            target: grid.clone(),
            s: t,
            t,
            p: Array2::eye(grid.len()),
            leakage: None,
            warning: None,
        }
    }

    /// Largest `|row sum − 1|` over rows.
    pub fn max_row_defect(&self) -> f64 {
        self.p
            .rows()
            .into_iter()
            .map(|r| (r.sum() - 1.0).abs())
            .fold(0.0, f64::max)
    }

    pub fn apply(&self, v: &[f64]) -> Vec<f64> {
        self.p.dot(&ndarray::ArrayView1::from(v)).to_vec()
    }

    pub fn apply_transpose(&self, v: &[f64]) -> Vec<f64> {
        self.p.t().dot(&ndarray::ArrayView1::from(v)).to_vec()
    }
}

/// How mass that leaves the target grid is handled.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Boundary {
    /// Drop it and rescale the row.
    Renormalize,
    /// Assign it to the nearest boundary cell.
    Clamp,
}

fn clamp_locate(grid: &Grid, x: &[f64]) -> usize {
    let idx: Vec<usize> = (0..grid.dim())
        .map(|d| {
            let k = ((x[d] - grid.lower()[d]) / grid.spacing(d)).floor();
            k.clamp(0.0, (grid.cells()[d] - 1) as f64) as usize
        })
        .collect();
    grid.ravel(&idx)
}

fn check_times(s: f64, t: f64) -> Result<()> {
    if !(t >= s) || !s.is_finite() || !t.is_finite() {
        return Err(Error::InvalidParameter(format!("need s <= t, got s={s}, t={t}")));
    }
    Ok(())
}

fn identity_like(source: &Grid, target: &Grid, s: f64) -> Result<KernelMatrix> {
    let mut p = Array2::zeros((source.len(), target.len()));
    for i in 0..source.len() {
        let k = target.locate(&source.center(i)).ok_or(Error::EmptyRow(i))?;
        p[[i, k]] = 1.0;
    }
    Ok(KernelMatrix {
        source: source.clone(),
        target: target.clone(),
        s,
        t: s,
        p,
        leakage: None,
        warning: None,
    })
}

/// Exact kernels for the builtin Poisson and Brownian families.
///
/// Poisson: `pmf_{λ(t−s)}(k)` is assigned to the cell of `x_i + k`, with the
/// tail beyond the grid lumped into the top cell (the law of `min(x + N, top)`,
/// which keeps Chapman–Kolmogorov exact on integer grids). Brownian: Gaussian
/// cell masses with mean `x_i + b(t−s)` and variance `σ²(t−s)`, renormalized.
pub fn closed_form_kernel(
    model: &Model,
    s: f64,
    t: f64,
    source: &Grid,
    target: &Grid,
) -> Result<KernelMatrix> {
    check_times(s, t)?;
    let family = model.builtin().cloned();
    match family {
        Some(Builtin::Poisson { .. }) | Some(Builtin::Brownian { .. }) => {}
        _ => {
            return Err(Error::UnsupportedModel(
                "no closed-form kernel for this model; use estimate_kernel".into(),
            ))
        }
    }
    if source.dim() != 1 || target.dim() != 1 {
        return Err(Error::GridMismatch("closed-form kernels are one-dimensional".into()));
    }
    if t == s {
        return identity_like(source, target, s);
    }
    let dt = t - s;
    let (ns, nt) = (source.len(), target.len());
    let mut p = Array2::zeros((ns, nt));
    let h = target.spacing(0);
    let lo = target.lower()[0];
    let hi = target.upper()[0];
    match family.unwrap() {
        Builtin::Poisson { rate, .. } => {
            let mean = rate * dt;
            for i in 0..ns {
                let x = source.center_coord(0, i);
                let mut k: u64 = 0;
                while x + k as f64 <= hi {
                    let pk = poisson_pmf(k, mean);
                    p[[i, clamp_locate(target, &[x + k as f64])]] += pk;
                    k += 1;
                }
                // tail, summed directly so tiny values keep their size
                let mut tail = 0.0;
                loop {
                    let pk = poisson_pmf(k, mean);
                    tail += pk;
                    if pk == 0.0 || (pk < 1e-17 * tail && k as f64 > mean) {
                        break;
                    }
                    k += 1;
                }
                p[[i, nt - 1]] += tail;
            }
        }
        Builtin::Brownian { drift, sigma } => {
            let sd = sigma * dt.sqrt();
            for i in 0..ns {
                let mu = source.center_coord(0, i) + drift * dt;
                if sd == 0.0 {
                    let k = target.locate(&[mu]).ok_or(Error::EmptyRow(i))?;
                    p[[i, k]] = 1.0;
                    continue;
                }
                let mut row = 0.0;
                for j in 0..nt {
                    let a = lo + j as f64 * h;
                    let v = normal_interval_mass((a - mu) / sd, (a + h - mu) / sd);
                    p[[i, j]] = v;
                    row += v;
                }
                if !(row > 0.0) {
                    return Err(Error::EmptyRow(i));
                }
                p.row_mut(i).mapv_inplace(|v| v / row);
            }
        }
        _ => unreachable!(),
    }
    Ok(KernelMatrix {
        source: source.clone(),
        target: target.clone(),
        s,
        t,
        p,
        leakage: None,
        warning: None,
    })
}

/// Settings for [`estimate_kernel`].
#[derive(Clone, Debug)]
pub struct EstimateOptions {
    /// Euler steps between `s` and `t`.
    pub substeps: usize,
    pub boundary: Boundary,
    /// Leakage fraction above which a warning is attached.
    pub max_leakage: f64,
}

impl Default for EstimateOptions {
    fn default() -> Self {
        Self {
            substeps: 16,
            boundary: Boundary::Renormalize,
            max_leakage: 0.01,
        }
    }
}

/// Monte Carlo kernel: `n_per_source` paths from every source cell center.
/// Row `i`, path `k` uses stream `(i << 32) | k` of the root seed.
#[allow(clippy::too_many_arguments)]
pub fn estimate_kernel(
    model: &Model,
    s: f64,
    t: f64,
    source: &Grid,
    target: &Grid,
    n_per_source: usize,
    seed: u64,
    opts: &EstimateOptions,
) -> Result<KernelMatrix> {
    check_times(s, t)?;
    if t == s {
        return identity_like(source, target, s);
    }
    if n_per_source == 0 || opts.substeps == 0 {
        return Err(Error::InvalidParameter(
            "need at least one path and one substep per row".into(),
        ));
    }
    if source.dim() != model.state_dim() || target.dim() != model.state_dim() {
        return Err(Error::GridMismatch("kernel grids vs model dimension".into()));
    }
    let mesh = TimeMesh::uniform(t - s, opts.substeps)?;
    let (large, rate) = large_marks(model);
    let n = model.state_dim();
    let rows: Vec<(Vec<f64>, f64)> = (0..source.len())
        .into_par_iter()
        .map(|i| {
            let x0 = source.center(i);
            let mut counts = vec![0.0; target.len()];
            let mut leaked = 0usize;
            for k in 0..n_per_source {
                let mut rng = path_rng(seed, ((i as u64) << 32) | k as u64);
                let o = simulate_one(
                    model,
                    &NoTilt,
                    x0.clone(),
                    s,
                    &mesh,
                    &mut rng,
                    false,
                    &large,
                    rate,
                );
                if o.stop.is_some() {
                    leaked += 1;
                    continue;
                }
                let x = &o.states[o.states.len() - n..];
                match target.locate(x) {
                    Some(c) => counts[c] += 1.0,
                    None => {
                        leaked += 1;
                        if opts.boundary == Boundary::Clamp {
                            counts[clamp_locate(target, x)] += 1.0;
                        }
                    }
                }
            }
            (counts, leaked as f64 / n_per_source as f64)
        })
        .collect();
    let mut p = Array2::zeros((source.len(), target.len()));
    let mut leakage = Vec::with_capacity(rows.len());
    for (i, (counts, leak)) in rows.into_iter().enumerate() {
        let total: f64 = counts.iter().sum();
        if total <= 0.0 {
            return Err(Error::EmptyRow(i));
        }
        for (j, c) in counts.iter().enumerate() {
            p[[i, j]] = c / total;
        }
        leakage.push(leak);
    }
    let worst = leakage.iter().cloned().fold(0.0, f64::max);
    let warning = (worst > opts.max_leakage).then(|| {
        format!(
            "out-of-grid leakage up to {:.4} exceeds {:.4}",
            worst, opts.max_leakage
        )
    });
    Ok(KernelMatrix {
        source: source.clone(),
        target: target.clone(),
        s,
        t,
        p,
        leakage: Some(leakage),
        warning,
    })
}

/// Chapman–Kolmogorov composition `P_{s,u}·P_{u,t}`.
pub fn chain_kernels(k1: &KernelMatrix, k2: &KernelMatrix) -> Result<KernelMatrix> {
    if k1.target != k2.source {
        return Err(Error::GridMismatch(
            "first kernel's target grid differs from second kernel's source grid".into(),
        ));
    }
    if (k1.t - k2.s).abs() > 1e-12 * k1.t.abs().max(1.0) {
        return Err(Error::GridMismatch(format!(
            "kernel times do not meet: {} vs {}",
            k1.t, k2.s
        )));
    }
    Ok(KernelMatrix {
        source: k1.source.clone(),
        target: k2.target.clone(),
        s: k1.s,
        t: k2.t,
        p: k1.p.dot(&k2.p),
        leakage: None,
        warning: None,
    })
}

/// How the per-step kernels of a reference chain are obtained.
#[derive(Clone, Debug)]
pub enum KernelMethod {
    ClosedForm,
    MonteCarlo {
        n_per_source: usize,
        seed: u64,
        options: EstimateOptions,
    },
}

/// One kernel per mesh step on a common grid.
pub fn reference_chain(
    model: &Model,
    mesh: &TimeMesh,
    grid: &Grid,
    method: &KernelMethod,
) -> Result<Vec<KernelMatrix>> {
    (0..mesh.steps())
        .map(|j| {
            let (s, t) = (mesh.time(j), mesh.time(j + 1));
            match method {
                KernelMethod::ClosedForm => closed_form_kernel(model, s, t, grid, grid),
                KernelMethod::MonteCarlo {
                    n_per_source,
                    seed,
                    options,
                } => estimate_kernel(
                    model,
                    s,
                    t,
                    grid,
                    grid,
                    *n_per_source,
                    seed.wrapping_add(j as u64),
                    options,
                ),
            }
        })
        .collect()
}

/// Product of a chain of kernels.
pub fn compose(chain: &[KernelMatrix]) -> Result<KernelMatrix> {
    let first = chain
        .first()
        .ok_or_else(|| Error::InvalidParameter("empty kernel chain".into()))?;
    let mut acc = first.clone();
    acc.leakage = None;
    acc.warning = None;
    for k in &chain[1..] {
        acc = chain_kernels(&acc, k)?;
    }
    Ok(acc)
}
