//! Generator, adjoint and residual diagnostics.
//!
//! For `f ∈ C^{1,2}`,
//!
//! `Lf = b·∇f + ½ Σ (σσᵀ)_{ij} ∂²_{ij} f + ∫ [f(x+γ) − f(x) − 1_{|z|≤1} γ·∇f] ν(dz)`
//!
//! and the adjoint uses the pre-image `φ⁻¹` of the jump map with its Jacobian.
//! The ν-integral is an exact sum over atoms and quadrature nodes.

use crate::error::{Error, Result};
use crate::model::{Grid, Model};
use crate::numerics::trapezoid_weights;
use crate::sim::{KernelMatrix, TimeMesh};
use ndarray::Array2;
use std::sync::Arc;

pub type ScalarFn = Arc<dyn Fn(f64, &[f64]) -> f64 + Send + Sync>;
pub type VectorFn = Arc<dyn Fn(f64, &[f64], &mut [f64]) + Send + Sync>;

/// A function of `(t, x)`, given in closed form or as values on a mesh × grid.
#[derive(Clone)]
pub enum Field {
    Closed(ClosedField),
    Grid(GridField),
}

/// Closed-form field. Missing derivatives fall back to central differences.
#[derive(Clone)]
pub struct ClosedField {
    value: ScalarFn,
    dt: Option<ScalarFn>,
    grad: Option<VectorFn>,
    hess: Option<VectorFn>,
}

/// Values `H[j][k]` at mesh node `j` and cell center `k`. Multilinear in
/// space between centers, linear in time between nodes; derivatives use
/// second-order stencils at the surrounding nodes, interpolated the same way.
#[derive(Clone, Debug, PartialEq)]
pub struct GridField {
    mesh: TimeMesh,
    grid: Grid,
    values: Array2<f64>,
}

impl Field {
    pub fn closed<F>(f: F) -> Self
    where
        F: Fn(f64, &[f64]) -> f64 + Send + Sync + 'static,
    {
        Field::Closed(ClosedField {
            value: Arc::new(f),
            dt: None,
            grad: None,
            hess: None,
        })
    }

    pub fn constant(c: f64) -> Self {
        Field::closed(move |_, _| c)
            .with_time_derivative(|_, _| 0.0)
            .with_gradient(|_, _, g| g.fill(0.0))
            .with_hessian(|_, _, h| h.fill(0.0))
    }

    /// Supplies `∂_t f`. No effect on grid fields.
    pub fn with_time_derivative<F>(self, f: F) -> Self
    where
        F: Fn(f64, &[f64]) -> f64 + Send + Sync + 'static,
    {
        match self {
            Field::Closed(mut c) => {
                c.dt = Some(Arc::new(f));
                Field::Closed(c)
            }
            g => g,
        }
    }

    /// Supplies `∇f`. No effect on grid fields.
    pub fn with_gradient<F>(self, f: F) -> Self
    where
        F: Fn(f64, &[f64], &mut [f64]) + Send + Sync + 'static,
    {
        match self {
            Field::Closed(mut c) => {
                c.grad = Some(Arc::new(f));
                Field::Closed(c)
            }
            g => g,
        }
    }

    /// Supplies `∇²f` as a row-major `n × n` vector. No effect on grid fields.
    pub fn with_hessian<F>(self, f: F) -> Self
    where
        F: Fn(f64, &[f64], &mut [f64]) + Send + Sync + 'static,
    {
        match self {
            Field::Closed(mut c) => {
                c.hess = Some(Arc::new(f));
                Field::Closed(c)
            }
            g => g,
        }
    }

    pub fn grid(mesh: TimeMesh, grid: Grid, values: Array2<f64>) -> Result<Self> {
        Ok(Field::Grid(GridField::new(mesh, grid, values)?))
    }

    pub fn as_grid(&self) -> Option<&GridField> {
        match self {
            Field::Grid(g) => Some(g),
            Field::Closed(_) => None,
        }
    }

    pub fn value(&self, t: f64, x: &[f64]) -> Result<f64> {
        match self {
            Field::Closed(c) => Ok((c.value)(t, x)),
            Field::Grid(g) => g.value(t, x),
        }
    }

    pub fn time_derivative(&self, t: f64, x: &[f64]) -> Result<f64> {
        match self {
            Field::Closed(c) => Ok(match &c.dt {
                Some(d) => d(t, x),
                None => {
                    let h = 1e-6 * t.abs().max(1.0);
                    ((c.value)(t + h, x) - (c.value)(t - h, x)) / (2.0 * h)
                }
            }),
            Field::Grid(g) => g.time_derivative(t, x),
        }
    }

    pub fn gradient(&self, t: f64, x: &[f64]) -> Result<Vec<f64>> {
        self.gradient_mapped(t, x, None)
    }

    /// Gradient of `log(max(f, floor))`; grid fields difference the logarithm
    /// directly, closed fields use `∇f / f`.
    pub fn log_gradient(&self, t: f64, x: &[f64], floor: f64) -> Result<Vec<f64>> {
        match self {
            Field::Closed(_) => {
                let v = self.value(t, x)?.max(floor);
                Ok(self.gradient(t, x)?.iter().map(|g| g / v).collect())
            }
            Field::Grid(_) => self.gradient_mapped(t, x, Some(floor)),
        }
    }

    fn gradient_mapped(&self, t: f64, x: &[f64], log_floor: Option<f64>) -> Result<Vec<f64>> {
        let n = x.len();
        match self {
            Field::Closed(c) => {
                let mut out = vec![0.0; n];
                match &c.grad {
                    Some(g) => g(t, x, &mut out),
                    None => {
                        let mut y = x.to_vec();
                        for d in 0..n {
                            let h = 6e-6 * x[d].abs().max(1.0);
                            y[d] = x[d] + h;
                            let up = (c.value)(t, &y);
                            y[d] = x[d] - h;
                            let dn = (c.value)(t, &y);
                            y[d] = x[d];
                            out[d] = (up - dn) / (2.0 * h);
                        }
                    }
                }
                Ok(out)
            }
            Field::Grid(g) => g.gradient(t, x, log_floor),
        }
    }

    /// Row-major `n × n` Hessian.
    pub fn hessian(&self, t: f64, x: &[f64]) -> Result<Vec<f64>> {
        let n = x.len();
        match self {
            Field::Closed(c) => {
                let mut out = vec![0.0; n * n];
                match &c.hess {
                    Some(h) => h(t, x, &mut out),
                    None => {
                        let f = |y: &[f64]| (c.value)(t, y);
                        let mut y = x.to_vec();
                        let f0 = f(x);
                        for d in 0..n {
                            let hd = 1e-4 * x[d].abs().max(1.0);
                            for e in d..n {
                                let v = if d == e {
                                    y[d] = x[d] + hd;
                                    let up = f(&y);
                                    y[d] = x[d] - hd;
                                    let dn = f(&y);
                                    y[d] = x[d];
                                    (up - 2.0 * f0 + dn) / (hd * hd)
                                } else {
                                    let he = 1e-4 * x[e].abs().max(1.0);
                                    let mut acc = 0.0;
                                    for (sd, se, sign) in
                                        [(1.0, 1.0, 1.0), (1.0, -1.0, -1.0), (-1.0, 1.0, -1.0), (-1.0, -1.0, 1.0)]
                                    {
                                        y[d] = x[d] + sd * hd;
                                        y[e] = x[e] + se * he;
                                        acc += sign * f(&y);
                                    }
                                    y[d] = x[d];
                                    y[e] = x[e];
                                    acc / (4.0 * hd * he)
                                };
                                out[d * n + e] = v;
                                out[e * n + d] = v;
                            }
                        }
                    }
                }
                Ok(out)
            }
            Field::Grid(g) => g.hessian(t, x),
        }
    }
}

impl GridField {
    pub fn new(mesh: TimeMesh, grid: Grid, values: Array2<f64>) -> Result<Self> {
        if values.shape() != [mesh.steps() + 1, grid.len()] {
            return Err(Error::ShapeMismatch(format!(
                "grid field values {:?}, expected [{}, {}]",
                values.shape(),
                mesh.steps() + 1,
                grid.len()
            )));
        }
        Ok(Self { mesh, grid, values })
    }

    pub fn mesh(&self) -> &TimeMesh {
        &self.mesh
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    /// `(nodes, cells)` array of nodal values.
    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn node(&self, j: usize) -> Vec<f64> {
        self.values.row(j).to_vec()
    }

    fn time_weights(&self, t: f64, x: &[f64]) -> Result<[(usize, f64); 2]> {
        let tol = 1e-12 * self.mesh.horizon().max(1.0);
        if !(t >= -tol && t <= self.mesh.horizon() + tol) {
            return Err(Error::Domain { t, x: x.to_vec() });
        }
        let j = self.mesh.floor_index(t.max(0.0));
        if j == self.mesh.steps() {
            return Ok([(j, 1.0), (j, 0.0)]);
        }
        let w = ((t - self.mesh.time(j)) / self.mesh.dt(j)).clamp(0.0, 1.0);
        Ok([(j, 1.0 - w), (j + 1, w)])
    }

    /// Multilinear corners `(flat index, weight)` around `x`.
    fn space_weights(&self, t: f64, x: &[f64]) -> Result<Vec<(usize, f64)>> {
        let g = &self.grid;
        if x.len() != g.dim() {
            return Err(Error::ShapeMismatch("point dimension vs grid".into()));
        }
        let mut per_dim = Vec::with_capacity(g.dim());
        for d in 0..g.dim() {
            let h = g.spacing(d);
            let c0 = g.center_coord(d, 0);
            let s = (x[d] - c0) / h;
            let last = (g.cells()[d] - 1) as f64;
            let tol = 1e-9;
            if !(s >= -tol && s <= last + tol) {
                return Err(Error::Domain { t, x: x.to_vec() });
            }
            let s = s.clamp(0.0, last);
            if g.cells()[d] == 1 {
                per_dim.push([(0usize, 1.0), (0usize, 0.0)]);
                continue;
            }
            let i = (s.floor() as usize).min(g.cells()[d] - 2);
            let w = s - i as f64;
            per_dim.push([(i, 1.0 - w), (i + 1, w)]);
        }
        let mut out = Vec::with_capacity(1 << g.dim());
        let mut idx = vec![0usize; g.dim()];
        for corner in 0..(1usize << g.dim()) {
            let mut w = 1.0;
            for d in 0..g.dim() {
                let (i, wd) = per_dim[d][(corner >> d) & 1];
                idx[d] = i;
                w *= wd;
            }
            if w != 0.0 {
                out.push((g.ravel(&idx), w));
            }
        }
        Ok(out)
    }

    fn interpolate<F>(&self, t: f64, x: &[f64], mut nodal: F) -> Result<f64>
    where
        F: FnMut(usize, usize) -> f64,
    {
        let tw = self.time_weights(t, x)?;
        let sw = self.space_weights(t, x)?;
        let mut acc = 0.0;
        for &(j, wt) in &tw {
            if wt == 0.0 {
                continue;
            }
            for &(k, ws) in &sw {
                acc += wt * ws * nodal(j, k);
            }
        }
        Ok(acc)
    }

    pub fn value(&self, t: f64, x: &[f64]) -> Result<f64> {
        self.interpolate(t, x, |j, k| self.values[[j, k]])
    }

    /// Neighbor of flat index `k` shifted by `off` cells along `d`, if inside.
    fn shift(&self, k: usize, d: usize, off: isize) -> Option<usize> {
        let mut idx = self.grid.unravel(k);
        let v = idx[d] as isize + off;
        if v < 0 || v >= self.grid.cells()[d] as isize {
            return None;
        }
        idx[d] = v as usize;
        Some(self.grid.ravel(&idx))
    }

    fn nodal_first<F: Fn(usize) -> f64>(&self, k: usize, d: usize, v: &F) -> f64 {
        let h = self.grid.spacing(d);
        let (m, p) = (self.shift(k, d, -1), self.shift(k, d, 1));
        match (m, p) {
            (Some(m), Some(p)) => (v(p) - v(m)) / (2.0 * h),
            (None, Some(p)) => match self.shift(k, d, 2) {
                Some(p2) => (-3.0 * v(k) + 4.0 * v(p) - v(p2)) / (2.0 * h),
                None => (v(p) - v(k)) / h,
            },
            (Some(m), None) => match self.shift(k, d, -2) {
                Some(m2) => (3.0 * v(k) - 4.0 * v(m) + v(m2)) / (2.0 * h),
                None => (v(k) - v(m)) / h,
            },
            (None, None) => 0.0,
        }
    }

    fn nodal_second<F: Fn(usize) -> f64>(&self, k: usize, d: usize, v: &F) -> f64 {
        let h = self.grid.spacing(d);
        let (m, p) = (self.shift(k, d, -1), self.shift(k, d, 1));
        match (m, p) {
            (Some(m), Some(p)) => (v(p) - 2.0 * v(k) + v(m)) / (h * h),
            (None, Some(_)) | (Some(_), None) => {
                let dir: isize = if m.is_none() { 1 } else { -1 };
                let s: Vec<Option<usize>> = (1..=3).map(|o| self.shift(k, d, dir * o)).collect();
                match (s[0], s[1], s[2]) {
                    (Some(a), Some(b), Some(c)) => {
                        (2.0 * v(k) - 5.0 * v(a) + 4.0 * v(b) - v(c)) / (h * h)
                    }
                    (Some(a), Some(b), None) => (v(k) - 2.0 * v(a) + v(b)) / (h * h),
                    _ => 0.0,
                }
            }
            (None, None) => 0.0,
        }
    }

    fn nodal_dt(&self, j: usize, k: usize) -> f64 {
        let m = &self.mesh;
        let v = |jj: usize| self.values[[jj, k]];
        let last = m.steps();
        if last == 0 {
            return 0.0;
        }
        let three = |a: usize, b: usize, c: usize, at: usize| {
            // derivative at t_at of the quadratic through nodes a, b, c
            let (ta, tb, tc, t) = (m.time(a), m.time(b), m.time(c), m.time(at));
            v(a) * ((t - tb) + (t - tc)) / ((ta - tb) * (ta - tc))
                + v(b) * ((t - ta) + (t - tc)) / ((tb - ta) * (tb - tc))
                + v(c) * ((t - ta) + (t - tb)) / ((tc - ta) * (tc - tb))
        };
        if last == 1 {
            return (v(1) - v(0)) / m.dt(0);
        }
        if j == 0 {
            three(0, 1, 2, 0)
        } else if j == last {
            three(last - 2, last - 1, last, last)
        } else {
            three(j - 1, j, j + 1, j)
        }
    }

    pub fn time_derivative(&self, t: f64, x: &[f64]) -> Result<f64> {
        self.interpolate(t, x, |j, k| self.nodal_dt(j, k))
    }

    fn gradient(&self, t: f64, x: &[f64], log_floor: Option<f64>) -> Result<Vec<f64>> {
        (0..self.grid.dim())
            .map(|d| {
                self.interpolate(t, x, |j, k| {
                    let v = |kk: usize| {
                        let raw = self.values[[j, kk]];
                        match log_floor {
                            Some(f) => raw.max(f).ln(),
                            None => raw,
                        }
                    };
                    self.nodal_first(k, d, &v)
                })
            })
            .collect()
    }

    fn hessian(&self, t: f64, x: &[f64]) -> Result<Vec<f64>> {
        let n = self.grid.dim();
        let mut out = vec![0.0; n * n];
        for d in 0..n {
            for e in d..n {
                let h = self.interpolate(t, x, |j, k| {
                    let v = |kk: usize| self.values[[j, kk]];
                    if d == e {
                        self.nodal_second(k, d, &v)
                    } else {
                        let ge = |kk: usize| self.nodal_first(kk, e, &v);
                        self.nodal_first(k, d, &ge)
                    }
                })?;
                out[d * n + e] = h;
                out[e * n + d] = h;
            }
        }
        Ok(out)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(z: &[f64]) -> f64 {
    dot(z, z).sqrt()
}

/// `Lf(t, x)`.
pub fn apply_generator(model: &Model, f: &Field, t: f64, x: &[f64]) -> Result<f64> {
    let n = model.state_dim();
    let grad = f.gradient(t, x)?;
    let b = model.drift(t, x);
    let mut val = dot(&b, &grad);
    let a = model.diffusion(t, x);
    if a.iter().any(|v| *v != 0.0) {
        let hs = f.hessian(t, x)?;
        val += 0.5 * dot(&a, &hs);
    }
    let nodes = model.levy().nodes();
    if !nodes.is_empty() {
        let fx = f.value(t, x)?;
        let mut y = vec![0.0; n];
        let mut g = vec![0.0; n];
        for (z, w) in nodes {
            if w == 0.0 {
                continue;
            }
            model.jump_into(t, x, z, &mut g);
            for i in 0..n {
                y[i] = x[i] + g[i];
            }
            let mut term = f.value(t, &y)? - fx;
            if norm(z) <= 1.0 {
                term -= dot(&g, &grad);
            }
            val += w * term;
        }
    }
    Ok(val)
}

/// `𝓛f = ∂_t f + Lf`.
pub fn apply_space_time(model: &Model, f: &Field, t: f64, x: &[f64]) -> Result<f64> {
    Ok(f.time_derivative(t, x)? + apply_generator(model, f, t, x)?)
}

fn coef_first<F: Fn(&[f64]) -> f64>(c: &F, x: &[f64], d: usize) -> f64 {
    let h = 1e-5 * x[d].abs().max(1.0);
    let mut y = x.to_vec();
    y[d] = x[d] + h;
    let up = c(&y);
    y[d] = x[d] - h;
    let dn = c(&y);
    (up - dn) / (2.0 * h)
}

fn coef_second<F: Fn(&[f64]) -> f64>(c: &F, x: &[f64], d: usize, e: usize) -> f64 {
    let hd = 1e-4 * x[d].abs().max(1.0);
    let mut y = x.to_vec();
    if d == e {
        y[d] = x[d] + hd;
        let up = c(&y);
        y[d] = x[d] - hd;
        let dn = c(&y);
        return (up - 2.0 * c(x) + dn) / (hd * hd);
    }
    let he = 1e-4 * x[e].abs().max(1.0);
    let mut acc = 0.0;
    for (sd, se, sign) in [(1.0, 1.0, 1.0), (1.0, -1.0, -1.0), (-1.0, 1.0, -1.0), (-1.0, -1.0, 1.0)] {
        y[d] = x[d] + sd * hd;
        y[e] = x[e] + se * he;
        acc += sign * c(&y);
    }
    acc / (4.0 * hd * he)
}

/// `L*f(t, x)`, with coefficient derivatives taken by central differences.
pub fn apply_adjoint(model: &Model, f: &Field, t: f64, x: &[f64]) -> Result<f64> {
    let n = model.state_dim();
    let nodes = model.levy().nodes();
    if !nodes.is_empty() && !model.translation_jump() && model.inverse_jump().is_none() {
        return Err(Error::AdjointUnavailable);
    }
    let fx = f.value(t, x)?;
    let grad = f.gradient(t, x)?;
    let b = model.drift(t, x);
    // −∇·(b f)
    let mut val = 0.0;
    for i in 0..n {
        let db = coef_first(&|y: &[f64]| model.drift(t, y)[i], x, i);
        val -= db * fx + b[i] * grad[i];
    }
    // ½ Σ ∂²_{ij} (a_ij f)
    let a = model.diffusion(t, x);
    if model.noise_dim() > 0 {
        let hs = f.hessian(t, x)?;
        let mut acc = 0.0;
        for i in 0..n {
            for j in 0..n {
                let aij = |y: &[f64]| model.diffusion(t, y)[i * n + j];
                let d2 = coef_second(&aij, x, i, j);
                let di = coef_first(&aij, x, i);
                let dj = coef_first(&aij, x, j);
                acc += d2 * fx + di * grad[j] + dj * grad[i] + a[i * n + j] * hs[i * n + j];
            }
        }
        val += 0.5 * acc;
    }
    let mut g = vec![0.0; n];
    for (z, w) in nodes {
        if w == 0.0 {
            continue;
        }
        let (pre, jac) = model.inverse_jump_point(t, x, z)?;
        let mut term = jac * f.value(t, &pre)? - fx;
        if norm(z) <= 1.0 {
            // ∇·(γ f)
            model.jump_into(t, x, z, &mut g);
            let mut div = dot(&g, &grad);
            if !model.translation_jump() {
                for i in 0..n {
                    let gi = |y: &[f64]| model.jump(t, y, z)[i];
                    div += coef_first(&gi, x, i) * fx;
                }
            }
            term += div;
        }
        val += w * term;
    }
    Ok(val)
}

/// `𝓛*f = −∂_t f + L*f`.
pub fn apply_adjoint_space_time(model: &Model, f: &Field, t: f64, x: &[f64]) -> Result<f64> {
    Ok(apply_adjoint(model, f, t, x)? - f.time_derivative(t, x)?)
}

/// Largest absolute residual over a set of points, with the full table.
#[derive(Clone, Debug, PartialEq)]
pub struct OperatorResidual {
    pub max_abs: f64,
    pub location: (f64, Vec<f64>),
    pub table: Vec<(f64, Vec<f64>, f64)>,
}

impl OperatorResidual {
    pub(crate) fn from_table(table: Vec<(f64, Vec<f64>, f64)>) -> Self {
        let mut max_abs = 0.0;
        let mut location = (f64::NAN, Vec::new());
        for (t, x, r) in &table {
            if location.1.is_empty() || !(r.abs() <= max_abs) {
                max_abs = r.abs();
                location = (*t, x.clone());
            }
        }
        Self {
            max_abs,
            location,
            table,
        }
    }
}

/// `max |𝓛h|` over the sample points.
pub fn harmonicity_residual(
    model: &Model,
    h: &Field,
    samples: &[(f64, Vec<f64>)],
) -> Result<OperatorResidual> {
    let table = samples
        .iter()
        .map(|(t, x)| Ok((*t, x.clone(), apply_space_time(model, h, *t, x)?)))
        .collect::<Result<Vec<_>>>()?;
    Ok(OperatorResidual::from_table(table))
}

/// `max_{j,i} |H[t_j][i] − (P_{t_j,t_{j+1}} H[t_{j+1}])[i]|`.
pub fn mean_value_residual(kernels: &[KernelMatrix], h: &GridField) -> Result<OperatorResidual> {
    if kernels.len() != h.mesh().steps() {
        return Err(Error::GridMismatch(format!(
            "{} kernels for {} mesh steps",
            kernels.len(),
            h.mesh().steps()
        )));
    }
    let mut table = Vec::with_capacity(kernels.len() * h.grid().len());
    for (j, k) in kernels.iter().enumerate() {
        if &k.source != h.grid() || &k.target != h.grid() {
            return Err(Error::GridMismatch(format!("kernel {j} grid differs from H grid")));
        }
        let next = k.apply(&h.node(j + 1));
        let t = h.mesh().time(j);
        for (i, v) in next.iter().enumerate() {
            table.push((t, h.grid().center(i), h.values()[[j, i]] - v));
        }
    }
    Ok(OperatorResidual::from_table(table))
}

/// Duality check result.
#[derive(Clone, Debug, PartialEq)]
pub struct DualityReport {
    pub gap: f64,
    pub lhs: f64,
    pub rhs: f64,
    /// Largest `|f·g|` over boundary cells of the box.
    pub boundary_mass: f64,
    pub warning: Option<String>,
}

/// `|⟨Lf, g⟩ − ⟨f, L*g⟩|` with the trapezoid product rule over the cell
/// centers of `grid` and the nodes of `mesh`.
pub fn duality_gap(
    model: &Model,
    f: &Field,
    g: &Field,
    grid: &Grid,
    mesh: &TimeMesh,
) -> Result<DualityReport> {
    let mut space_w = vec![1.0; grid.len()];
    for d in 0..grid.dim() {
        let w = trapezoid_weights(grid.cells()[d], grid.spacing(d));
        for (k, sw) in space_w.iter_mut().enumerate() {
            *sw *= w[grid.unravel(k)[d]];
        }
    }
    let times = mesh.times();
    let time_w: Vec<f64> = if times.len() == 1 {
        vec![1.0]
    } else {
        (0..times.len())
            .map(|j| {
                let l = if j > 0 { times[j] - times[j - 1] } else { 0.0 };
                let r = if j + 1 < times.len() { times[j + 1] - times[j] } else { 0.0 };
                0.5 * (l + r)
            })
            .collect()
    };
    let (mut lhs, mut rhs, mut boundary) = (0.0, 0.0, 0.0f64);
    for (j, &t) in times.iter().enumerate() {
        for k in 0..grid.len() {
            let x = grid.center(k);
            let w = time_w[j] * space_w[k];
            let fx = f.value(t, &x)?;
            let gx = g.value(t, &x)?;
            lhs += w * apply_generator(model, f, t, &x)? * gx;
            rhs += w * fx * apply_adjoint(model, g, t, &x)?;
            let idx = grid.unravel(k);
            if idx.iter().zip(grid.cells()).any(|(i, c)| *i == 0 || *i + 1 == *c) {
                boundary = boundary.max((fx * gx).abs());
            }
        }
    }
    let warning = (boundary > 1e-8).then(|| {
        format!("test functions are not negligible on the box boundary (|fg| up to {boundary:.3e})")
    });
    Ok(DualityReport {
        gap: (lhs - rhs).abs(),
        lhs,
        rhs,
        boundary_mass: boundary,
        warning,
    })
}
