//! Doob h-transform of the reference dynamics.
//!
//! For `h > 0` with the mean-value property the tilted law has drift
//! `b^h = b + σσᵀ∇log h + ∫_{|z|≤1} (h(t,x+γ)/h − 1) γ ν(dz)` and Lévy
//! measure `ν^h(t,x;dz) = h(t,x+γ)/h(t,x) ν(dz)`. The zero set `{h ≤ η}` is
//! handled by a single threshold `η`: kernel rows are zeroed, paths stopped,
//! weights set to 0.

use crate::error::{Error, Result};
use crate::model::{levy_integrability, Grid, LevyMeasure, MarginalVector, Model};
use crate::operator::{Field, GridField};
use crate::sim::{
    large_marks, simulate_with, weighted_histogram, InitialLaw, KernelMatrix, PathEnsemble,
    SimOptions, StopReason, Tilt, TimeMesh,
};
use ndarray::Array2;
use rayon::prelude::*;
use std::sync::atomic::{AtomicUsize, Ordering};

pub const DEFAULT_ETA: f64 = 1e-12;

/// Largest admissible dominating jump rate for transformed simulation.
pub const MAX_DOMINATING_RATE: f64 = 1e6;

/// `H[t_j][i]` from backward kernel products applied to a terminal vector.
#[derive(Clone, Debug, PartialEq)]
pub struct HField {
    field: GridField,
    eta: f64,
    terminal: Vec<f64>,
}

impl HField {
    pub fn mesh(&self) -> &TimeMesh {
        self.field.mesh()
    }

    pub fn grid(&self) -> &Grid {
        self.field.grid()
    }

    /// `(nodes, cells)` array.
    pub fn values(&self) -> &Array2<f64> {
        self.field.values()
    }

    pub fn node(&self, j: usize) -> Vec<f64> {
        self.field.node(j)
    }

    pub fn eta(&self) -> f64 {
        self.eta
    }

    pub fn terminal(&self) -> &[f64] {
        &self.terminal
    }

    pub fn with_threshold(mut self, eta: f64) -> Result<Self> {
        if !(eta > 0.0) {
            return Err(Error::InvalidParameter("eta must be positive".into()));
        }
        self.eta = eta;
        Ok(self)
    }

    pub fn grid_field(&self) -> &GridField {
        &self.field
    }

    pub fn field(&self) -> Field {
        Field::Grid(self.field.clone())
    }
}

/// Checks that `chain` is a contiguous sequence of square kernels on one grid
/// starting at time 0, and returns its mesh.
pub(crate) fn chain_mesh(chain: &[KernelMatrix]) -> Result<TimeMesh> {
    let first = chain
        .first()
        .ok_or_else(|| Error::InvalidParameter("empty kernel chain".into()))?;
    let mut times = vec![first.s];
    for (k, ker) in chain.iter().enumerate() {
        if ker.source != first.source || ker.target != first.source {
            return Err(Error::GridMismatch(format!("kernel {k} is not on the chain grid")));
        }
        if (ker.s - times[k]).abs() > 1e-12 * ker.s.abs().max(1.0) {
            return Err(Error::GridMismatch(format!("kernel {k} does not start where kernel {} ends", k.max(1) - 1)));
        }
        times.push(ker.t);
    }
    TimeMesh::from_times(times)
}

/// Backward recursion `H[t_J] = g`, `H[t_j] = P_{t_j,t_{j+1}} H[t_{j+1}]`.
pub fn h_field(g_terminal: &[f64], chain: &[KernelMatrix]) -> Result<HField> {
    let mesh = chain_mesh(chain)?;
    let grid = chain[0].source.clone();
    if g_terminal.len() != grid.len() {
        return Err(Error::ShapeMismatch(format!(
            "terminal vector has {} entries, grid {}",
            g_terminal.len(),
            grid.len()
        )));
    }
    if let Some(i) = g_terminal.iter().position(|v| *v < 0.0) {
        return Err(Error::NegativeTerminal(i));
    }
    if g_terminal.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidParameter("terminal vector must be finite".into()));
    }
    let steps = chain.len();
    let mut values = Array2::zeros((steps + 1, grid.len()));
    values.row_mut(steps).assign(&ndarray::ArrayView1::from(g_terminal));
    let mut cur = g_terminal.to_vec();
    for j in (0..steps).rev() {
        cur = chain[j].apply(&cur);
        values.row_mut(j).assign(&ndarray::ArrayView1::from(&cur[..]));
    }
    Ok(HField {
        field: GridField::new(mesh, grid, values)?,
        eta: DEFAULT_ETA,
        terminal: g_terminal.to_vec(),
    })
}

/// Bounded approximation `g_k` of an arbitrary nonnegative terminal vector:
/// cap at `k`, zero outside the window `{|x| ≤ k}`, then smooth.
///
/// Smoothing is the 3-cell geometric mean `g_{i−1}^{1/4} g_i^{1/2} g_{i+1}^{1/4}`
/// along each axis. Cells with a zero or missing neighbor are left unchanged,
/// which is the same as extrapolating `log g` linearly past the edge.
pub fn approx_sequence(g_raw: &[f64], grid: &Grid, k: usize) -> Result<Vec<f64>> {
    if k == 0 {
        return Err(Error::InvalidParameter("approximation level must be >= 1".into()));
    }
    if g_raw.len() != grid.len() {
        return Err(Error::ShapeMismatch("terminal vector vs grid".into()));
    }
    let cap = k as f64;
    let mut g: Vec<f64> = (0..grid.len())
        .map(|i| {
            let c = grid.center(i);
            let r = c.iter().map(|v| v * v).sum::<f64>().sqrt();
            if r <= cap {
                g_raw[i].max(0.0).min(cap)
            } else {
                0.0
            }
        })
        .collect();
    for d in 0..grid.dim() {
        let src = g.clone();
        for (i, out) in g.iter_mut().enumerate() {
            let idx = grid.unravel(i);
            if src[i] == 0.0 || idx[d] == 0 || idx[d] + 1 == grid.cells()[d] {
                continue;
            }
            let mut lo = idx.clone();
            lo[d] -= 1;
            let mut hi = idx.clone();
            hi[d] += 1;
            let (a, b) = (src[grid.ravel(&lo)], src[grid.ravel(&hi)]);
            if a > 0.0 && b > 0.0 {
                *out = (0.25 * a.ln() + 0.5 * src[i].ln() + 0.25 * b.ln()).exp().min(cap);
            }
        }
    }
    Ok(g)
}

fn norm(z: &[f64]) -> f64 {
    z.iter().map(|v| v * v).sum::<f64>().sqrt()
}

fn h_at(h: &Field, t: f64, x: &[f64], eta: f64) -> Result<f64> {
    let v = h.value(t, x)?;
    if v > eta {
        Ok(v)
    } else {
        Err(Error::OutsideSupport { t, x: x.to_vec() })
    }
}

/// `h(t, x+γ(t,x,z))/h(t, x)` for every node of the Lévy measure.
pub fn tilt_ratios(model: &Model, h: &Field, t: f64, x: &[f64], eta: f64) -> Result<Vec<f64>> {
    let hx = h_at(h, t, x, eta)?;
    let n = model.state_dim();
    let mut g = vec![0.0; n];
    let mut y = vec![0.0; n];
    model
        .levy()
        .nodes()
        .into_iter()
        .map(|(z, w)| {
            if w == 0.0 {
                return Ok(1.0);
            }
            model.jump_into(t, x, z, &mut g);
            for i in 0..n {
                y[i] = x[i] + g[i];
            }
            Ok(h.value(t, &y)? / hx)
        })
        .collect()
}

fn diffusion_tilt(model: &Model, h: &Field, t: f64, x: &[f64], eta: f64, out: &mut [f64]) -> Result<()> {
    if model.noise_dim() == 0 {
        return Ok(());
    }
    let a = model.diffusion(t, x);
    if a.iter().all(|v| *v == 0.0) {
        return Ok(());
    }
    let gl = h.log_gradient(t, x, eta)?;
    let n = model.state_dim();
    for i in 0..n {
        out[i] += (0..n).map(|j| a[i * n + j] * gl[j]).sum::<f64>();
    }
    Ok(())
}

/// `b^h(t, x)`.
pub fn transformed_drift(model: &Model, h: &Field, t: f64, x: &[f64], eta: f64) -> Result<Vec<f64>> {
    let ratios = tilt_ratios(model, h, t, x, eta)?;
    let mut b = model.drift(t, x);
    diffusion_tilt(model, h, t, x, eta, &mut b)?;
    let mut g = vec![0.0; b.len()];
    for ((z, w), r) in model.levy().nodes().into_iter().zip(&ratios) {
        if w == 0.0 || norm(z) > 1.0 {
            continue;
        }
        model.jump_into(t, x, z, &mut g);
        for (bi, gi) in b.iter_mut().zip(&g) {
            *bi += (r - 1.0) * gi * w;
        }
    }
    Ok(b)
}

/// `ν^h(t, x; ·)`, same support points with tilted weights.
pub fn transformed_levy(model: &Model, h: &Field, t: f64, x: &[f64], eta: f64) -> Result<LevyMeasure> {
    let ratios = tilt_ratios(model, h, t, x, eta)?;
    if let Some(r) = ratios.iter().find(|r| !(r.is_finite() && **r >= 0.0)) {
        return Err(Error::Evaluation {
            t,
            x: x.to_vec(),
            z: Vec::new(),
            what: format!("tilt factor {r}"),
        });
    }
    let w: Vec<f64> = model
        .levy()
        .nodes()
        .iter()
        .zip(&ratios)
        .map(|((_, w), r)| w * r)
        .collect();
    let tilted = model.levy().reweighted(&w)?;
    let integ = levy_integrability(&tilted)?;
    if !integ.is_finite() {
        return Err(Error::Evaluation {
            t,
            x: x.to_vec(),
            z: Vec::new(),
            what: "tilted Lévy measure is not integrable".into(),
        });
    }
    Ok(tilted)
}

/// Drift used to simulate the tilted SDE with jumps `|z| ≤ ε` dropped:
/// `b^h − Σ_{ε<|z|≤1} γ w r`.
fn effective_drift(model: &Model, h: &Field, t: f64, x: &[f64], eta: f64, out: &mut [f64]) -> Result<()> {
    let ratios = tilt_ratios(model, h, t, x, eta)?;
    model.drift_into(t, x, out);
    diffusion_tilt(model, h, t, x, eta, out)?;
    let eps = model.levy().cutoff();
    let mut g = vec![0.0; out.len()];
    let mut corr = vec![0.0; out.len()];
    for ((z, w), r) in model.levy().nodes().into_iter().zip(&ratios) {
        let nz = norm(z);
        if w == 0.0 || nz > 1.0 {
            continue;
        }
        model.jump_into(t, x, z, &mut g);
        for (c, gi) in corr.iter_mut().zip(&g) {
            if nz > eps {
                *c -= gi * w;
            } else {
                *c += (r - 1.0) * gi * w;
            }
        }
    }
    for (o, c) in out.iter_mut().zip(&corr) {
        *o += c;
    }
    Ok(())
}

/// A reference model bundled with an h-function and threshold.
#[derive(Clone)]
pub struct TransformedModel {
    pub base: Model,
    pub h: Field,
    pub eta: f64,
}

/// Transformed coefficients at one point.
#[derive(Clone, Debug, PartialEq)]
pub struct CoefficientRow {
    pub t: f64,
    pub x: Vec<f64>,
    /// `None` outside `{h > η}`.
    pub drift: Option<Vec<f64>>,
    pub tilts: Option<Vec<f64>>,
}

impl TransformedModel {
    pub fn new(base: Model, h: Field, eta: f64) -> Self {
        Self { base, h, eta }
    }

    pub fn drift(&self, t: f64, x: &[f64]) -> Result<Vec<f64>> {
        transformed_drift(&self.base, &self.h, t, x, self.eta)
    }

    pub fn levy(&self, t: f64, x: &[f64]) -> Result<LevyMeasure> {
        transformed_levy(&self.base, &self.h, t, x, self.eta)
    }

    pub fn tilts(&self, t: f64, x: &[f64]) -> Result<Vec<f64>> {
        tilt_ratios(&self.base, &self.h, t, x, self.eta)
    }

    /// Coefficients at each sample; points outside `{h > η}` or whose jump
    /// targets leave the field's domain are flagged with `None`.
    pub fn dump(&self, samples: &[(f64, Vec<f64>)]) -> Result<Vec<CoefficientRow>> {
        samples
            .iter()
            .map(|(t, x)| {
                let row = |drift, tilts| CoefficientRow {
                    t: *t,
                    x: x.clone(),
                    drift,
                    tilts,
                };
                match (self.drift(*t, x), self.tilts(*t, x)) {
                    (Ok(d), Ok(r)) => Ok(row(Some(d), Some(r))),
                    (Err(Error::OutsideSupport { .. }), _)
                    | (Err(Error::Domain { .. }), _)
                    | (_, Err(Error::Domain { .. })) => Ok(row(None, None)),
                    (Err(e), _) | (_, Err(e)) => Err(e),
                }
            })
            .collect()
    }
}

/// `P^h[i][j] = h_t[j]·P[i][j]/h_s[i]` on rows with `h_s[i] > η`, renormalized;
/// other rows are zero and their indices returned.
pub fn transformed_transition(
    kernel: &KernelMatrix,
    h_s: &[f64],
    h_t: &[f64],
    eta: f64,
) -> Result<(KernelMatrix, Vec<usize>)> {
    if h_s.len() != kernel.source.len() || h_t.len() != kernel.target.len() {
        return Err(Error::ShapeMismatch("h vectors vs kernel grids".into()));
    }
    let mut p = kernel.p.clone();
    let mut flagged = Vec::new();
    let mut slack: f64 = 0.0;
    for (i, mut row) in p.rows_mut().into_iter().enumerate() {
        if !(h_s[i] > eta) {
            row.fill(0.0);
            flagged.push(i);
            continue;
        }
        for (v, ht) in row.iter_mut().zip(h_t) {
            *v *= ht / h_s[i];
        }
        let s = row.sum();
        slack = slack.max((s - 1.0).abs());
        if s > 0.0 {
            row /= s;
        }
    }
    let warning = (slack > 1e-10).then(|| {
        format!("h does not satisfy the mean-value identity on this step (row slack {slack:.3e})")
    });
    Ok((
        KernelMatrix {
            p,
            leakage: None,
            warning,
            ..kernel.clone()
        },
        flagged,
    ))
}

/// Log Girsanov density of the tilted law along one path.
#[derive(Clone, Debug, PartialEq)]
pub struct GirsanovWeight {
    pub path_id: usize,
    /// `log Z_{t_j}` at every mesh node; meaningful only before `exit_node`.
    pub log_z: Vec<f64>,
    /// `Σ (σᵀ∇log h)·ΔB`.
    pub brownian: f64,
    /// `−½ Σ |σᵀ∇log h|² Δt`.
    pub quadratic: f64,
    /// `Σ_jumps log(h(s, X_s)/h(s, X_{s−}))`.
    pub jump: f64,
    /// `∫∫ (1 − h(·+γ)/h) ν(dz) dt`.
    pub compensation: f64,
    /// First mesh step at which the path left `{h > η}` (or the field's domain).
    pub exit_node: Option<usize>,
    /// Initial-law mass of `{h(0,·) > η}`.
    pub r0: f64,
}

impl GirsanovWeight {
    pub fn valid(&self) -> bool {
        self.exit_node.is_none()
    }

    pub fn log_weight(&self) -> f64 {
        *self.log_z.last().unwrap()
    }

    /// `Z_T / r0` for valid paths, 0 otherwise.
    pub fn weight(&self) -> f64 {
        self.weight_at(self.log_z.len() - 1)
    }

    /// `Z_{t_j} / r0` if the path is still in `{h > η}` at node `j`, else 0.
    pub fn weight_at(&self, j: usize) -> f64 {
        match self.exit_node {
            Some(e) if e <= j => 0.0,
            _ => self.log_z[j].exp() / self.r0,
        }
    }
}

/// Initial-law mass of `{h(0,·) > η}`.
pub fn retained_mass(h: &Field, initial: &MarginalVector, eta: f64) -> Result<f64> {
    let g = initial.grid();
    let mut r = 0.0;
    for (i, m) in initial.mass().iter().enumerate() {
        if *m == 0.0 {
            continue;
        }
        if h.value(0.0, &g.center(i))? > eta {
            r += m;
        }
    }
    Ok(r)
}

struct Exit;

fn lift<T>(r: Result<T>) -> Result<std::result::Result<T, Exit>> {
    match r {
        Ok(v) => Ok(Ok(v)),
        Err(Error::Domain { .. }) | Err(Error::OutsideSupport { .. }) => Ok(Err(Exit)),
        Err(e) => Err(e),
    }
}

/// `Σ_k w_k (1 − h(s, x+γ_k)/h(s, x))` over marks with `|z| > ε`.
fn theta_rate(
    model: &Model,
    h: &Field,
    s: f64,
    x: &[f64],
    eta: f64,
    large: &[(usize, Vec<f64>, f64)],
) -> Result<f64> {
    let hx = h_at(h, s, x, eta)?;
    let n = x.len();
    let mut g = vec![0.0; n];
    let mut y = vec![0.0; n];
    let mut acc = 0.0;
    for (_, z, w) in large {
        model.jump_into(s, x, z, &mut g);
        for i in 0..n {
            y[i] = x[i] + g[i];
        }
        acc += w * (1.0 - h.value(s, &y)? / hx);
    }
    Ok(acc)
}

fn weight_one(
    model: &Model,
    paths: &PathEnsemble,
    p: usize,
    h: &Field,
    eta: f64,
    r0: f64,
    large: &[(usize, Vec<f64>, f64)],
) -> Result<GirsanovWeight> {
    let mesh = paths.mesh();
    let steps = mesh.steps();
    let n = model.state_dim();
    let m = model.noise_dim();
    let mut w = GirsanovWeight {
        path_id: paths.ids()[p],
        log_z: vec![0.0; steps + 1],
        brownian: 0.0,
        quadratic: 0.0,
        jump: 0.0,
        compensation: 0.0,
        exit_node: None,
        r0,
    };
    let jumps = paths.jumps(p);
    let mut next_jump = 0;
    let mut sig = vec![0.0; n * m];
    for j in 0..steps {
        let (t0, t1) = (mesh.time(j), mesh.time(j + 1));
        let x0 = paths.state(p, j);
        if lift(h_at(h, t0, &x0, eta))?.is_err() {
            w.exit_node = Some(j);
            break;
        }
        if m > 0 {
            model.dispersion_into(t0, &x0, &mut sig);
            if sig.iter().any(|v| *v != 0.0) {
                let inc = paths.increments().ok_or(Error::MissingIncrements)?;
                let gl = match lift(h.log_gradient(t0, &x0, eta))? {
                    Ok(g) => g,
                    Err(_) => {
                        w.exit_node = Some(j);
                        break;
                    }
                };
                let dt = t1 - t0;
                for k in 0..m {
                    let v: f64 = (0..n).map(|i| sig[i * m + k] * gl[i]).sum();
                    w.brownian += v * inc.brownian[[p, j, k]];
                    w.quadratic -= 0.5 * v * v * dt;
                }
            }
        }
        let mut seg = t0;
        let mut x = x0;
        let mut exited = false;
        let integrate = |w: &mut GirsanovWeight, a: f64, b: f64, x: &[f64]| -> Result<bool> {
            if large.is_empty() || b <= a {
                return Ok(true);
            }
            let ta = lift(theta_rate(model, h, a, x, eta, large))?;
            let tb = lift(theta_rate(model, h, b, x, eta, large))?;
            match (ta, tb) {
                (Ok(ta), Ok(tb)) => {
                    w.compensation += 0.5 * (b - a) * (ta + tb);
                    Ok(true)
                }
                _ => Ok(false),
            }
        };
        while next_jump < jumps.len() && jumps[next_jump].time <= t1 {
            let jr = &jumps[next_jump];
            next_jump += 1;
            if !integrate(&mut w, seg, jr.time, &x)? {
                exited = true;
                break;
            }
            let post: Vec<f64> = jr
                .pre_state
                .iter()
                .zip(&jr.displacement)
                .map(|(a, b)| a + b)
                .collect();
            match (
                lift(h_at(h, jr.time, &jr.pre_state, eta))?,
                lift(h_at(h, jr.time, &post, eta))?,
            ) {
                (Ok(a), Ok(b)) => w.jump += (b / a).ln(),
                _ => {
                    exited = true;
                    break;
                }
            }
            seg = jr.time;
            x = post;
        }
        if exited || !integrate(&mut w, seg, t1, &x)? {
            w.exit_node = Some(j + 1);
            break;
        }
        w.log_z[j + 1] = w.brownian + w.quadratic + w.jump + w.compensation;
    }
    if w.exit_node.is_none() {
        let xt = paths.state(p, steps);
        if lift(h_at(h, mesh.horizon(), &xt, eta))?.is_err() {
            w.exit_node = Some(steps);
        }
    }
    Ok(w)
}

/// Girsanov weights of every path in a reference ensemble.
///
/// `u = −σᵀ∇log h` is taken at the left end of each mesh step. The jump
/// compensator uses the marks with `|z| > ε` (the ones the simulation
/// draws) and the trapezoid rule in time between jumps at the current state.
pub fn girsanov_weights(
    model: &Model,
    paths: &PathEnsemble,
    h: &Field,
    eta: f64,
    r0: f64,
) -> Result<Vec<GirsanovWeight>> {
    if !(r0 > 0.0) {
        return Err(Error::InvalidParameter("r0 must be positive".into()));
    }
    let (large, _) = large_marks(model);
    (0..paths.len())
        .into_par_iter()
        .map(|p| weight_one(model, paths, p, h, eta, r0, &large))
        .collect()
}

/// Weight of a single path (row `p` of the ensemble).
pub fn girsanov_weight(
    model: &Model,
    paths: &PathEnsemble,
    p: usize,
    h: &Field,
    eta: f64,
    r0: f64,
) -> Result<GirsanovWeight> {
    let (large, _) = large_marks(model);
    weight_one(model, paths, p, h, eta, r0, &large)
}

/// Self-normalized weighted histogram of `X_t`, using `Z_t`.
pub fn reweighted_marginal(
    paths: &PathEnsemble,
    weights: &[GirsanovWeight],
    t: f64,
    grid: &Grid,
) -> Result<MarginalVector> {
    if weights.len() != paths.len() {
        return Err(Error::ShapeMismatch("one weight per path required".into()));
    }
    let node = paths.mesh().index_of(t)?;
    let w: Vec<f64> = weights.iter().map(|w| w.weight_at(node)).collect();
    weighted_histogram(paths, node, grid, Some(&w))?.normalized()
}

/// First mesh time with `h(t_j, X_{t_j}) < η` (or outside the field's
/// domain); `+∞` if there is none.
pub fn support_exit(paths: &PathEnsemble, p: usize, h: &Field, eta: f64) -> Result<f64> {
    let mesh = paths.mesh();
    for j in 0..=mesh.steps() {
        let t = mesh.time(j);
        match h.value(t, &paths.state(p, j)) {
            Ok(v) if v >= eta => {}
            Ok(_) | Err(Error::Domain { .. }) => return Ok(t),
            Err(e) => return Err(e),
        }
    }
    Ok(f64::INFINITY)
}

struct HTilt<'a> {
    h: &'a Field,
    eta: f64,
    bound: f64,
    model: &'a Model,
    exceed: AtomicUsize,
}

fn stop_reason(e: &Error) -> StopReason {
    match e {
        Error::OutsideSupport { .. } => StopReason::LeftSupport,
        Error::Domain { .. } => StopReason::LeftDomain,
        _ => StopReason::NonFinite,
    }
}

impl Tilt for HTilt<'_> {
    fn check(&self, t: f64, x: &[f64]) -> std::result::Result<(), StopReason> {
        match self.h.value(t, x) {
            Ok(v) if v > self.eta => Ok(()),
            Ok(v) if v.is_nan() => Err(StopReason::NonFinite),
            Ok(_) => Err(StopReason::LeftSupport),
            Err(e) => Err(stop_reason(&e)),
        }
    }

    fn drift(&self, model: &Model, t: f64, x: &[f64], out: &mut [f64]) -> std::result::Result<(), StopReason> {
        effective_drift(model, self.h, t, x, self.eta, out).map_err(|e| stop_reason(&e))
    }

    fn bound(&self) -> f64 {
        self.bound
    }

    fn ratio(&self, t: f64, x: &[f64], node: usize) -> std::result::Result<f64, StopReason> {
        let (z, _) = self.model.levy().nodes()[node];
        let hx = h_at(self.h, t, x, self.eta).map_err(|e| stop_reason(&e))?;
        let g = self.model.jump(t, x, z);
        let y: Vec<f64> = x.iter().zip(&g).map(|(a, b)| a + b).collect();
        let r = self.h.value(t, &y).map_err(|e| stop_reason(&e))? / hx;
        if r > self.bound {
            self.exceed.fetch_add(1, Ordering::Relaxed);
        }
        Ok(r)
    }
}

/// Result of a transformed simulation.
#[derive(Debug)]
pub struct TransformedRun {
    pub paths: PathEnsemble,
    /// Thinning bound `R̄ ≥ h(t,x+γ)/h(t,x)` over the box and mesh nodes.
    pub rate_bound: f64,
    /// Candidate jumps whose tilt exceeded `R̄` (accepted with probability 1).
    pub exceedances: usize,
}

/// Largest tilt factor over box centers × mesh nodes × marks with `|z| > ε`.
fn dominating_ratio(model: &Model, h: &Field, box_grid: &Grid, mesh: &TimeMesh, eta: f64) -> f64 {
    let (large, _) = large_marks(model);
    if large.is_empty() {
        return 1.0;
    }
    let per_time: Vec<f64> = mesh
        .times()
        .par_iter()
        .map(|&t| {
            let mut best: f64 = 0.0;
            for c in 0..box_grid.len() {
                let x = box_grid.center(c);
                let hx = match h.value(t, &x) {
                    Ok(v) if v > eta => v,
                    _ => continue,
                };
                for (_, z, _) in &large {
                    let g = model.jump(t, &x, z);
                    let y: Vec<f64> = x.iter().zip(&g).map(|(a, b)| a + b).collect();
                    if let Ok(v) = h.value(t, &y) {
                        let r = v / hx;
                        best = if r.is_nan() { f64::NAN } else { best.max(r) };
                    }
                }
            }
            best
        })
        .collect();
    per_time.into_iter().fold(0.0, |a, b| if b.is_nan() { f64::NAN } else { a.max(b) })
}

/// Simulates the tilted SDE: drift `b^h`, jumps thinned from the reference
/// marks at rate `Λ·R̄` with acceptance `r/R̄`. Paths that enter `{h ≤ η}` or
/// leave the field's domain are dropped and listed in `excluded`.
///
/// The thinning box is the grid of `h` when it is grid-backed, else the grid
/// of `initial`.
#[allow(clippy::too_many_arguments)]
pub fn simulate_transformed(
    model: &Model,
    h: &Field,
    initial: &MarginalVector,
    mesh: &TimeMesh,
    n_paths: usize,
    seed: u64,
    eta: f64,
    opts: &SimOptions,
) -> Result<TransformedRun> {
    let box_grid = h.as_grid().map_or(initial.grid(), |g| g.grid());
    let (_, rate) = large_marks(model);
    let bound = dominating_ratio(model, h, box_grid, mesh, eta);
    if !bound.is_finite() || !(rate * bound).is_finite() || rate * bound > MAX_DOMINATING_RATE {
        return Err(Error::RateOverflow { rate: rate * bound });
    }
    let tilt = HTilt {
        h,
        eta,
        bound: if bound > 0.0 { bound } else { 1.0 },
        model,
        exceed: AtomicUsize::new(0),
    };
    let paths = simulate_with(
        model,
        &tilt,
        &InitialLaw::Marginal(initial.clone()),
        0.0,
        mesh,
        n_paths,
        seed,
        opts,
    )?;
    Ok(TransformedRun {
        paths,
        rate_bound: tilt.bound,
        exceedances: tilt.exceed.load(Ordering::Relaxed),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::tv_distance;
    use crate::model::{builtin_model, Atom, Builtin};
    use crate::numerics::poisson_pmf;
    use crate::operator::mean_value_residual;
    use crate::sim::{closed_form_kernel, empirical_marginal, reference_chain, simulate_paths, KernelMethod};
    use proptest::{prop_assert, proptest};
    use std::sync::Arc;

    fn poisson() -> Model {
        builtin_model(&Builtin::Poisson { rate: 1.0, cutoff: 1e-3 }).unwrap()
    }

    fn brownian() -> Model {
        builtin_model(&Builtin::Brownian { drift: 0.0, sigma: 1.0 }).unwrap()
    }

    fn frak_h() -> Field {
        Field::closed(|t, x| (-t + x[0] * 2f64.ln()).exp())
    }

    fn exp_mart(th: f64) -> Field {
        Field::closed(move |t, x| (th * x[0] - th * th * t / 2.0).exp())
            .with_gradient(move |t, x, g| g[0] = th * (th * x[0] - th * th * t / 2.0).exp())
    }

    fn golden_chain() -> (Grid, TimeMesh, Vec<KernelMatrix>) {
        let g = Grid::integers(0, 40).unwrap();
        let mesh = TimeMesh::uniform(1.0, 64).unwrap();
        let chain = reference_chain(&poisson(), &mesh, &g, &KernelMethod::ClosedForm).unwrap();
        (g, mesh, chain)
    }

    fn golden_terminal() -> Vec<f64> {
        (0..41).map(|y| (-1.0f64).exp() * 2f64.powi(y)).collect()
    }

    #[test]
    fn golden_h_field_matches_closed_form() {
        let (_, mesh, chain) = golden_chain();
        let hf = h_field(&golden_terminal(), &chain).unwrap();
        for j in 0..=64 {
            let t = mesh.time(j);
            for x in 0..=20 {
                let exp = (-t + x as f64 * 2f64.ln()).exp();
                let got = hf.values()[[j, x]];
                assert!((got / exp - 1.0).abs() < 1e-6, "t={t} x={x}");
            }
        }
        assert!(mean_value_residual(&chain, hf.grid_field()).unwrap().max_abs <= 1e-12 * 2f64.powi(40));
        let rel = chain
            .iter()
            .enumerate()
            .flat_map(|(j, k)| {
                let next = k.apply(&hf.node(j + 1));
                let cur = hf.node(j);
                (0..41).map(move |i| ((cur[i] - next[i]) / cur[i]).abs()).collect::<Vec<_>>()
            })
            .fold(0.0, f64::max);
        assert!(rel <= 1e-12);
    }

    #[test]
    fn constant_and_indicator_terminals() {
        let (_, _, chain) = golden_chain();
        let ones = h_field(&[1.0; 41], &chain).unwrap();
        assert!(ones.values().iter().all(|v| (v - 1.0).abs() < 1e-12));
        assert!(mean_value_residual(&chain, ones.grid_field()).unwrap().max_abs <= 1e-12);
        let mut e = vec![0.0; 41];
        e[5] = 1.0;
        let ind = h_field(&e, &chain).unwrap();
        let full = crate::sim::compose(&chain[10..]).unwrap();
        for x in 0..41 {
            assert!((ind.values()[[10, x]] - full.p[[x, 5]]).abs() < 1e-15);
        }
        e[3] = -1.0;
        assert!(matches!(h_field(&e, &chain), Err(Error::NegativeTerminal(3))));
    }

    #[test]
    fn approx_sequence_examples() {
        let g = Grid::integers(0, 40).unwrap();
        assert!(approx_sequence(&vec![0.0; 41], &g, 3).unwrap().iter().all(|v| *v == 0.0));
        let gk = approx_sequence(&golden_terminal(), &g, 4).unwrap();
        assert!(gk.iter().all(|v| *v <= 4.0));
        // the cap binds from the first cell with e^{-1}2^j > 4, j = ⌈log2(4e)⌉ = 4
        let first = golden_terminal().iter().position(|v| *v > 4.0).unwrap();
        assert_eq!(first, (4.0 * std::f64::consts::E).log2().ceil() as usize);
        assert_eq!(gk[4], 4.0);
        assert!(gk[5..].iter().all(|v| *v == 0.0));
        // the exponential part is left unchanged by the log-linear smoothing
        for j in 1..3 {
            assert!((gk[j] / golden_terminal()[j] - 1.0).abs() < 1e-14);
        }
        let s = Grid::integers(-20, 20).unwrap();
        let bounded: Vec<f64> = (0..41)
            .map(|i| {
                let x = s.center_coord(0, i);
                if x.abs() <= 10.0 {
                    1.0 + 4.0 * (-x * x / 8.0).exp()
                } else {
                    0.0
                }
            })
            .collect();
        let k10 = approx_sequence(&bounded, &s, 10).unwrap();
        for k in [11, 20, 64] {
            assert_eq!(approx_sequence(&bounded, &s, k).unwrap(), k10);
        }
        assert!(approx_sequence(&bounded, &s, 0).is_err());
    }

    #[test]
    fn transformed_coefficient_examples() {
        let b = brownian();
        for (t, x) in [(0.0, -1.0), (0.4, 0.3), (0.9, 2.0)] {
            let d = transformed_drift(&b, &exp_mart(0.7), t, &[x], DEFAULT_ETA).unwrap();
            assert!((d[0] - 0.7).abs() < 1e-12);
        }
        let jd = builtin_model(&Builtin::JumpDiffusionMixed {
            drift: 0.3,
            sigma: 0.8,
            rate: 1.5,
            jump_mean: 0.2,
            jump_sd: 0.4,
            nodes: 9,
            cutoff: 1e-3,
        })
        .unwrap();
        let d = transformed_drift(&jd, &Field::constant(2.0), 0.1, &[0.5], DEFAULT_ETA).unwrap();
        assert_eq!(d, jd.drift(0.1, &[0.5]));
        let l = transformed_levy(&jd, &Field::constant(1.0), 0.1, &[0.5], DEFAULT_ETA).unwrap();
        assert_eq!(&l, jd.levy());
        let p = poisson();
        let fh = frak_h();
        for (t, x) in [(0.0, 0.0), (0.5, 7.0), (1.0, 19.0)] {
            let d = transformed_drift(&p, &fh, t, &[x], DEFAULT_ETA).unwrap();
            assert!((d[0] - 2.0).abs() < 1e-12);
            let l = transformed_levy(&p, &fh, t, &[x], DEFAULT_ETA).unwrap();
            assert_eq!(l.atoms().len(), 1);
            assert_eq!(l.atoms()[0].z, vec![1.0]);
            assert!((l.atoms()[0].weight - 2.0).abs() < 1e-12);
        }
        let atom = crate::model::LevyMeasure::new(
            1,
            vec![Atom {
                z: vec![0.5],
                weight: 1.0,
            }],
            None,
            1e-3,
        )
        .unwrap();
        let m = p.with_levy(atom);
        let th = 1.3;
        let l = transformed_levy(&m, &Field::closed(move |_, x| (th * x[0]).exp()), 0.0, &[0.2], DEFAULT_ETA).unwrap();
        assert!((l.atoms()[0].weight - (0.5 * th).exp()).abs() < 1e-12);
        let zero = Field::closed(|_, _| 0.0);
        assert!(matches!(
            transformed_drift(&p, &zero, 0.0, &[1.0], DEFAULT_ETA),
            Err(Error::OutsideSupport { .. })
        ));
    }

    #[test]
    fn transformed_transition_examples() {
        let g = Grid::integers(0, 40).unwrap();
        let p = poisson();
        let k = closed_form_kernel(&p, 0.25, 0.75, &g, &g).unwrap();
        let (same, flagged) = transformed_transition(&k, &[1.0; 41], &[1.0; 41], DEFAULT_ETA).unwrap();
        assert!(flagged.is_empty());
        assert!((&same.p - &k.p).iter().all(|v| v.abs() < 1e-15));
        let hv = |t: f64| (0..41).map(|x| (-t + x as f64 * 2f64.ln()).exp()).collect::<Vec<_>>();
        let (ph, _) = transformed_transition(&k, &hv(0.25), &hv(0.75), DEFAULT_ETA).unwrap();
        for x in 0..=20 {
            for j in x..41 {
                let exp = poisson_pmf((j - x) as u64, 2.0 * 0.5);
                assert!((ph.p[[x, j]] - exp).abs() < 1e-8, "x={x} j={j}");
            }
        }
        let mut ind = vec![0.0; 41];
        ind[7] = 1.0;
        let hs = k.apply(&ind);
        let (pin, flagged) = transformed_transition(&k, &hs, &ind, DEFAULT_ETA).unwrap();
        assert_eq!(flagged, (8..41).collect::<Vec<_>>());
        for x in 0..=7 {
            assert!((pin.p[[x, 7]] - 1.0).abs() < 1e-12);
        }
    }

    fn sample_path(model: &Model, n: usize, seed: u64, x0: f64, steps: usize, store: bool) -> PathEnsemble {
        simulate_paths(
            model,
            &InitialLaw::Point(vec![x0]),
            &TimeMesh::uniform(1.0, steps).unwrap(),
            n,
            seed,
            &SimOptions {
                store_increments: store,
            },
        )
        .unwrap()
    }

    #[test]
    fn poisson_path_with_three_jumps() {
        let paths = sample_path(&poisson(), 2000, 3, 0.0, 64, false);
        let p = (0..paths.len()).find(|&p| paths.jumps(p).len() == 3).unwrap();
        let w = girsanov_weight(&poisson(), &paths, p, &frak_h(), DEFAULT_ETA, 1.0).unwrap();
        assert!(w.valid());
        assert!((w.weight() - 8.0 * (-1.0f64).exp()).abs() < 1e-12);
        assert!((8.0 * (-1.0f64).exp() - 2.943036).abs() < 1e-6);
    }

    #[test]
    fn unit_h_gives_unit_weights() {
        let jd = builtin_model(&Builtin::JumpDiffusionMixed {
            drift: 0.1,
            sigma: 1.0,
            rate: 2.0,
            jump_mean: 0.0,
            jump_sd: 0.5,
            nodes: 9,
            cutoff: 1e-3,
        })
        .unwrap();
        let paths = sample_path(&jd, 50, 1, 0.0, 32, true);
        let ws = girsanov_weights(&jd, &paths, &Field::constant(1.0), DEFAULT_ETA, 1.0).unwrap();
        assert!(ws.iter().all(|w| w.weight() == 1.0));
        let plain = sample_path(&jd, 50, 1, 0.0, 32, false);
        assert!(matches!(
            girsanov_weights(&jd, &plain, &exp_mart(0.5), DEFAULT_ETA, 1.0),
            Err(Error::MissingIncrements)
        ));
    }

    #[test]
    fn brownian_exponential_martingale_pathwise() {
        let th = 0.7;
        let paths = sample_path(&brownian(), 200, 5, 0.0, 1000, true);
        let ws = girsanov_weights(&brownian(), &paths, &exp_mart(th), DEFAULT_ETA, 1.0).unwrap();
        for (p, w) in ws.iter().enumerate() {
            let xt = paths.state(p, 1000)[0];
            let exact = th * xt - th * th / 2.0;
            assert!((w.log_weight() - exact).abs() < 1e-9, "{}", w.log_weight() - exact);
        }
    }

    #[test]
    fn support_exit_examples() {
        let paths = sample_path(&poisson(), 100, 2, 0.0, 16, false);
        for p in 0..paths.len() {
            assert_eq!(support_exit(&paths, p, &frak_h(), DEFAULT_ETA).unwrap(), f64::INFINITY);
        }
        let bm = sample_path(&brownian(), 200, 9, 0.5, 100, false);
        let step = Field::closed(|_, x| if x[0] < 0.0 { 0.0 } else { 1.0 });
        for p in 0..bm.len() {
            let exit = support_exit(&bm, p, &step, DEFAULT_ETA).unwrap();
            let first = (0..=100).find(|&j| bm.state(p, j)[0] < 0.0);
            match first {
                Some(j) => assert_eq!(exit, bm.mesh().time(j)),
                None => assert_eq!(exit, f64::INFINITY),
            }
        }
        let soft = Field::closed(|_, x| (-x[0] * x[0] * 10.0).exp());
        for p in 0..bm.len() {
            let e: Vec<f64> = [1e-2, 1e-4, 1e-6]
                .iter()
                .map(|eta| support_exit(&bm, p, &soft, *eta).unwrap())
                .collect();
            assert!(e[0] <= e[1] && e[1] <= e[2]);
        }
    }

    #[test]
    fn unit_tilt_simulation_is_identical_to_reference() {
        let jd = builtin_model(&Builtin::CompoundPoissonGaussian {
            rate: 3.0,
            jump_mean: 0.5,
            jump_sd: 0.3,
            drift: 0.2,
            nodes: 11,
            cutoff: 1e-3,
        })
        .unwrap();
        let g = Grid::uniform(-8.0, 8.0, 64).unwrap();
        let init = MarginalVector::gaussian(g, 0.0, 1.0).unwrap();
        let mesh = TimeMesh::uniform(1.0, 20).unwrap();
        let run = simulate_transformed(&jd, &Field::constant(1.0), &init, &mesh, 500, 4, DEFAULT_ETA, &SimOptions::default()).unwrap();
        let plain = simulate_paths(&jd, &InitialLaw::Marginal(init), &mesh, 500, 4, &SimOptions::default()).unwrap();
        assert_eq!(run.rate_bound, 1.0);
        assert_eq!(run.paths.states(), plain.states());
    }

    #[test]
    fn poisson_transformed_simulation() {
        let g = Grid::integers(0, 40).unwrap();
        let mesh = TimeMesh::uniform(1.0, 64).unwrap();
        let init = MarginalVector::point(g.clone(), &[0.0]).unwrap();
        let run = simulate_transformed(&poisson(), &frak_h(), &init, &mesh, 20_000, 7, DEFAULT_ETA, &SimOptions::default()).unwrap();
        assert!((run.rate_bound - 2.0).abs() < 1e-12);
        let hist = empirical_marginal(&run.paths, 1.0, &g).unwrap().normalized().unwrap();
        let target = MarginalVector::poisson(g.clone(), 2.0).unwrap();
        assert!(tv_distance(hist.mass(), target.mass()) < 0.03);
        // reweighted reference agrees
        let refp = sample_path(&poisson(), 20_000, 8, 0.0, 64, false);
        let ws = girsanov_weights(&poisson(), &refp, &frak_h(), DEFAULT_ETA, 1.0).unwrap();
        let rw = reweighted_marginal(&refp, &ws, 1.0, &g).unwrap();
        assert!(tv_distance(rw.mass(), target.mass()) < 0.04);
        let unit: Vec<GirsanovWeight> = girsanov_weights(&poisson(), &refp, &Field::constant(1.0), DEFAULT_ETA, 1.0).unwrap();
        let plain = empirical_marginal(&refp, 0.5, &g).unwrap().normalized().unwrap();
        assert_eq!(reweighted_marginal(&refp, &unit, 0.5, &g).unwrap(), plain);
    }

    #[test]
    fn brownian_transformed_terminal_law() {
        let g = Grid::uniform(-6.0, 6.0, 401).unwrap();
        let init = MarginalVector::point(g, &[0.0]).unwrap();
        let mesh = TimeMesh::uniform(1.0, 64).unwrap();
        let run = simulate_transformed(&brownian(), &exp_mart(0.7), &init, &mesh, 20_000, 3, DEFAULT_ETA, &SimOptions::default()).unwrap();
        let xs: Vec<f64> = (0..run.paths.len()).map(|p| run.paths.state(p, 64)[0]).collect();
        let x0 = init_center();
        let mean = xs.iter().sum::<f64>() / xs.len() as f64 - x0;
        let var = xs.iter().map(|x| (x - x0 - mean).powi(2)).sum::<f64>() / (xs.len() - 1) as f64;
        assert!((mean - 0.7).abs() < 4.0 / (xs.len() as f64).sqrt());
        assert!((var - 1.0).abs() < 0.05);
    }

    fn init_center() -> f64 {
        // the point law sits at the center of the cell containing 0
        Grid::uniform(-6.0, 6.0, 401).unwrap().center(200)[0]
    }

    #[test]
    fn rate_overflow_is_reported() {
        let g = Grid::integers(0, 40).unwrap();
        let init = MarginalVector::point(g.clone(), &[0.0]).unwrap();
        let mesh = TimeMesh::uniform(1.0, 4).unwrap();
        let steep = Field::closed(|_, x| (40.0 * x[0]).exp());
        assert!(matches!(
            simulate_transformed(&poisson(), &steep, &init, &mesh, 10, 0, DEFAULT_ETA, &SimOptions::default()),
            Err(Error::RateOverflow { .. })
        ));
    }

    #[test]
    fn leaving_support_marks_weights_invalid() {
        let bm = sample_path(&brownian(), 300, 11, 0.5, 50, true);
        let h = Field::closed(|_, x| if x[0] < 0.0 { 0.0 } else { 1.0 })
            .with_gradient(|_, _, g| g[0] = 0.0);
        let ws = girsanov_weights(&brownian(), &bm, &h, DEFAULT_ETA, 1.0).unwrap();
        for (p, w) in ws.iter().enumerate() {
            let crossed = (0..=50).any(|j| bm.state(p, j)[0] < 0.0);
            assert_eq!(w.valid(), !crossed);
            if crossed {
                assert_eq!(w.weight(), 0.0);
            }
        }
    }

    proptest! {
        #[test]
        fn transformed_rows_are_stochastic(seed in 0u64..500, j in 0usize..64) {
            let (_, _, chain) = golden_chain();
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let g: Vec<f64> = (0..41).map(|_| if rng.random::<f64>() < 0.3 { 0.0 } else { rng.random::<f64>() }).collect();
            let hf = h_field(&g, &chain).unwrap();
            let (ph, flagged) = transformed_transition(&chain[j], &hf.node(j), &hf.node(j + 1), DEFAULT_ETA).unwrap();
            for (i, row) in ph.p.rows().into_iter().enumerate() {
                if flagged.contains(&i) {
                    prop_assert!(row.iter().all(|v| *v == 0.0));
                } else {
                    prop_assert!((row.sum() - 1.0).abs() < 1e-10);
                }
            }
            prop_assert!(mean_value_residual(&chain, hf.grid_field()).unwrap().max_abs <= 1e-12);
        }

        #[test]
        fn tilted_measure_is_levy(x in -3.0f64..3.0, t in 0.0f64..1.0, th in -2.0f64..2.0) {
            let m = builtin_model(&Builtin::CompoundPoissonGaussian {
                rate: 2.0, jump_mean: 0.0, jump_sd: 0.7, drift: 0.0, nodes: 15, cutoff: 1e-3,
            }).unwrap();
            let h = Field::closed(move |_, x| (th * x[0]).exp() + 0.1);
            let l = transformed_levy(&m, &h, t, &[x], DEFAULT_ETA).unwrap();
            let v = levy_integrability(&l).unwrap();
            prop_assert!(v.is_finite() && v >= 0.0);
        }
    }

    #[test]
    fn grid_field_tilt_matches_closed_form() {
        let (_, _, chain) = golden_chain();
        let hf = h_field(&golden_terminal(), &chain).unwrap();
        let f = hf.field();
        for (t, x) in [(0.0, 0.0), (0.37, 5.0), (0.5, 12.0), (1.0, 20.0)] {
            let d = transformed_drift(&poisson(), &f, t, &[x], DEFAULT_ETA).unwrap();
            assert!((d[0] - 2.0).abs() < 1e-10);
        }
        let _ = Arc::new(0);
    }
}
