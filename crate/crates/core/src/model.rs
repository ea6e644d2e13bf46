//! Reference-process description: coefficients of the Lévy–Itô SDE
//!
//! `dX = b dt + σ dB + ∫_{|z|≤1} γ Ñ(dt,dz) + ∫_{|z|>1} γ N(dt,dz)`,
//!
//! its Lévy measure, the state grid and probability vectors on that grid.

use crate::error::{Error, Result};
use crate::numerics::{gauss_hermite, normal_interval_mass, poisson_pmf};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;
use std::f64::consts::{PI, SQRT_2};
use std::fmt;
use std::sync::Arc;

/// Uniform tensor grid. Cells partition `[lower, upper]` in every dimension;
/// flat indices are row-major with the last dimension fastest.
#[derive(Clone, Debug, PartialEq)]
pub struct Grid {
    lower: Vec<f64>,
    upper: Vec<f64>,
    cells: Vec<usize>,
}

impl Grid {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>, cells: Vec<usize>) -> Result<Self> {
        if lower.is_empty() || lower.len() != upper.len() || lower.len() != cells.len() {
            return Err(Error::InvalidParameter(
                "grid bounds and cell counts must have the same nonzero length".into(),
            ));
        }
        for d in 0..lower.len() {
            if !(lower[d].is_finite() && upper[d].is_finite() && lower[d] < upper[d]) {
                return Err(Error::InvalidParameter(format!(
                    "grid dimension {d}: need finite lower < upper"
                )));
            }
            if cells[d] == 0 {
                return Err(Error::InvalidParameter(format!(
                    "grid dimension {d}: cell count must be positive"
                )));
            }
        }
        Ok(Self {
            lower,
            upper,
            cells,
        })
    }

    /// One-dimensional grid of `cells` cells on `[lower, upper]`.
    pub fn uniform(lower: f64, upper: f64, cells: usize) -> Result<Self> {
        Self::new(vec![lower], vec![upper], vec![cells])
    }

    /// One-dimensional grid whose cell centers are the integers `lo..=hi`.
    pub fn integers(lo: i64, hi: i64) -> Result<Self> {
        if hi < lo {
            return Err(Error::InvalidParameter("empty integer range".into()));
        }
        Self::uniform(lo as f64 - 0.5, hi as f64 + 0.5, (hi - lo + 1) as usize)
    }

    pub fn dim(&self) -> usize {
        self.cells.len()
    }

    /// Total number of cells.
    pub fn len(&self) -> usize {
        self.cells.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn lower(&self) -> &[f64] {
        &self.lower
    }

    pub fn upper(&self) -> &[f64] {
        &self.upper
    }

    pub fn cells(&self) -> &[usize] {
        &self.cells
    }

    pub fn spacing(&self, d: usize) -> f64 {
        (self.upper[d] - self.lower[d]) / self.cells[d] as f64
    }

    pub fn cell_volume(&self) -> f64 {
        (0..self.dim()).map(|d| self.spacing(d)).product()
    }

    /// Center coordinate of cell `i` along dimension `d`.
    pub fn center_coord(&self, d: usize, i: usize) -> f64 {
        self.lower[d] + (i as f64 + 0.5) * self.spacing(d)
    }

    pub fn centers_along(&self, d: usize) -> Vec<f64> {
        (0..self.cells[d]).map(|i| self.center_coord(d, i)).collect()
    }

    pub fn unravel(&self, flat: usize) -> Vec<usize> {
        let mut idx = vec![0; self.dim()];
        let mut rem = flat;
        for d in (0..self.dim()).rev() {
            idx[d] = rem % self.cells[d];
            rem /= self.cells[d];
        }
        idx
    }

    pub fn ravel(&self, idx: &[usize]) -> usize {
        idx.iter()
            .zip(&self.cells)
            .fold(0, |acc, (&i, &c)| acc * c + i)
    }

    pub fn center(&self, flat: usize) -> Vec<f64> {
        self.unravel(flat)
            .iter()
            .enumerate()
            .map(|(d, &i)| self.center_coord(d, i))
            .collect()
    }

    pub fn centers(&self) -> Vec<Vec<f64>> {
        (0..self.len()).map(|k| self.center(k)).collect()
    }

    /// Cell containing `x`; the upper boundary belongs to the last cell.
    pub fn locate(&self, x: &[f64]) -> Option<usize> {
        if x.len() != self.dim() {
            return None;
        }
        let mut idx = Vec::with_capacity(self.dim());
        for d in 0..self.dim() {
            if !(x[d] >= self.lower[d] && x[d] <= self.upper[d]) {
                return None;
            }
            let k = ((x[d] - self.lower[d]) / self.spacing(d)).floor() as usize;
            idx.push(k.min(self.cells[d] - 1));
        }
        Some(self.ravel(&idx))
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        self.locate(x).is_some()
    }
}

/// Probability vector over the cells of a grid.
#[derive(Clone, Debug, PartialEq)]
pub struct MarginalVector {
    grid: Grid,
    mass: Vec<f64>,
}

impl MarginalVector {
    /// Wraps cell masses that already sum to one (within 1e-12).
    pub fn new(grid: Grid, mass: Vec<f64>) -> Result<Self> {
        if mass.len() != grid.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} masses for {} cells",
                mass.len(),
                grid.len()
            )));
        }
        if let Some(i) = mass.iter().position(|m| !(m.is_finite() && *m >= 0.0)) {
            return Err(Error::InvalidParameter(format!(
                "cell {i} has invalid mass {}",
                mass[i]
            )));
        }
        let total: f64 = mass.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidParameter(format!(
                "masses sum to {total}, expected 1"
            )));
        }
        Ok(Self { grid, mass })
    }

    /// Normalizes nonnegative weights into a probability vector.
    pub fn from_weights(grid: Grid, weights: Vec<f64>) -> Result<Self> {
        if weights.len() != grid.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} weights for {} cells",
                weights.len(),
                grid.len()
            )));
        }
        if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::InvalidParameter(
                "weights must be finite and nonnegative".into(),
            ));
        }
        let total: f64 = weights.iter().sum();
        if total <= 0.0 {
            return Err(Error::InvalidParameter("weights have zero total".into()));
        }
        let mass = weights.iter().map(|w| w / total).collect();
        Ok(Self { grid, mass })
    }

    /// Unit mass in the cell containing `x`.
    pub fn point(grid: Grid, x: &[f64]) -> Result<Self> {
        let k = grid.locate(x).ok_or_else(|| Error::Domain {
            t: 0.0,
            x: x.to_vec(),
        })?;
        let mut mass = vec![0.0; grid.len()];
        mass[k] = 1.0;
        Ok(Self { grid, mass })
    }

    /// Cell masses of `N(mean, var)` on a one-dimensional grid, renormalized.
    pub fn gaussian(grid: Grid, mean: f64, var: f64) -> Result<Self> {
        require_1d(&grid)?;
        if !(var > 0.0) {
            return Err(Error::InvalidParameter("variance must be positive".into()));
        }
        let sd = var.sqrt();
        let h = grid.spacing(0);
        let w = (0..grid.len())
            .map(|i| {
                let a = grid.lower()[0] + i as f64 * h;
                normal_interval_mass((a - mean) / sd, (a + h - mean) / sd)
            })
            .collect();
        Self::from_weights(grid, w)
    }

    /// Poisson(mean) mass of the integers lying in each cell, renormalized.
    pub fn poisson(grid: Grid, mean: f64) -> Result<Self> {
        require_1d(&grid)?;
        if !(mean >= 0.0 && mean.is_finite()) {
            return Err(Error::InvalidParameter("Poisson mean must be >= 0".into()));
        }
        let h = grid.spacing(0);
        let w = (0..grid.len())
            .map(|i| {
                let a = grid.lower()[0] + i as f64 * h;
                let last = i + 1 == grid.len();
                let mut s = 0.0;
                let mut k = a.ceil().max(0.0);
                while k < a + h || (last && k <= a + h) {
                    s += poisson_pmf(k as u64, mean);
                    k += 1.0;
                }
                s
            })
            .collect();
        Self::from_weights(grid, w)
    }

    pub fn uniform(grid: Grid) -> Self {
        let n = grid.len();
        Self {
            grid,
            mass: vec![1.0 / n as f64; n],
        }
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn mass(&self) -> &[f64] {
        &self.mass
    }

    pub fn into_mass(self) -> Vec<f64> {
        self.mass
    }

    pub fn len(&self) -> usize {
        self.mass.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mass.is_empty()
    }

    /// Mean of the cell centers under this law.
    pub fn mean(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.grid.dim()];
        for (k, p) in self.mass.iter().enumerate() {
            if *p > 0.0 {
                for (d, c) in self.grid.center(k).iter().enumerate() {
                    m[d] += p * c;
                }
            }
        }
        m
    }
}

fn require_1d(grid: &Grid) -> Result<()> {
    if grid.dim() != 1 {
        return Err(Error::InvalidParameter(
            "this family is only defined on one-dimensional grids".into(),
        ));
    }
    Ok(())
}

fn norm(z: &[f64]) -> f64 {
    z.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// A weighted point of a Lévy measure.
#[derive(Clone, Debug, PartialEq)]
pub struct Atom {
    pub z: Vec<f64>,
    pub weight: f64,
}

/// Quadrature discretization of the absolutely continuous part of ν:
/// `∫ φ dν ≈ Σ weights[i]·φ(nodes[i])`.
#[derive(Clone, Debug, PartialEq)]
pub struct QuadratureDensity {
    pub nodes: Vec<Vec<f64>>,
    pub weights: Vec<f64>,
}

/// Lévy measure as atoms plus an optional quadrature-discretized density.
/// Marks with `|z| <= cutoff` are not simulated.
#[derive(Clone, Debug, PartialEq)]
pub struct LevyMeasure {
    dim: usize,
    atoms: Vec<Atom>,
    density: Option<QuadratureDensity>,
    cutoff: f64,
}

impl LevyMeasure {
    pub fn new(
        dim: usize,
        atoms: Vec<Atom>,
        density: Option<QuadratureDensity>,
        cutoff: f64,
    ) -> Result<Self> {
        if !(cutoff > 0.0 && cutoff <= 1.0) {
            return Err(Error::InvalidParameter(format!(
                "small-jump cutoff {cutoff} outside (0, 1]"
            )));
        }
        for a in &atoms {
            if a.z.len() != dim {
                return Err(Error::ShapeMismatch("atom mark dimension".into()));
            }
            if !(a.weight.is_finite() && a.weight >= 0.0) {
                return Err(Error::InvalidParameter(format!(
                    "atom weight {} is not a finite nonnegative number",
                    a.weight
                )));
            }
            if norm(&a.z) == 0.0 && a.weight > 0.0 {
                return Err(Error::InvalidParameter(
                    "a Lévy measure cannot charge z = 0".into(),
                ));
            }
        }
        if let Some(d) = &density {
            if d.nodes.len() != d.weights.len() {
                return Err(Error::ShapeMismatch("quadrature nodes vs weights".into()));
            }
            if d.nodes.iter().any(|z| z.len() != dim) {
                return Err(Error::ShapeMismatch("quadrature node dimension".into()));
            }
            if d.weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
                return Err(Error::InvalidParameter(
                    "quadrature weights must be finite and nonnegative".into(),
                ));
            }
        }
        Ok(Self {
            dim,
            atoms,
            density,
            cutoff,
        })
    }

    /// The zero measure on `ℝ^dim`.
    pub fn empty(dim: usize) -> Self {
        Self {
            dim,
            atoms: Vec::new(),
            density: None,
            cutoff: 1.0,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn atoms(&self) -> &[Atom] {
        &self.atoms
    }

    pub fn density(&self) -> Option<&QuadratureDensity> {
        self.density.as_ref()
    }

    pub fn cutoff(&self) -> f64 {
        self.cutoff
    }

    /// All support points with their weights: atoms first, then quadrature nodes.
    pub fn nodes(&self) -> Vec<(&[f64], f64)> {
        let mut out: Vec<(&[f64], f64)> =
            self.atoms.iter().map(|a| (a.z.as_slice(), a.weight)).collect();
        if let Some(d) = &self.density {
            out.extend(d.nodes.iter().map(|z| z.as_slice()).zip(d.weights.iter().copied()));
        }
        out
    }

    pub fn node_count(&self) -> usize {
        self.atoms.len() + self.density.as_ref().map_or(0, |d| d.nodes.len())
    }

    /// Total weight, `ν(ℝ^ℓ)` of the discretization.
    pub fn total_weight(&self) -> f64 {
        self.nodes().iter().map(|(_, w)| w).sum()
    }

    /// Rate of simulated jumps, `ν({|z| > cutoff})`.
    pub fn simulated_rate(&self) -> f64 {
        self.nodes()
            .iter()
            .filter(|(z, _)| norm(z) > self.cutoff)
            .map(|(_, w)| w)
            .sum()
    }

    /// Same support points with new weights, given in [`LevyMeasure::nodes`] order.
    pub fn reweighted(&self, weights: &[f64]) -> Result<Self> {
        if weights.len() != self.node_count() {
            return Err(Error::ShapeMismatch("reweighting length".into()));
        }
        let na = self.atoms.len();
        let atoms = self
            .atoms
            .iter()
            .zip(&weights[..na])
            .map(|(a, &w)| Atom {
                z: a.z.clone(),
                weight: w,
            })
            .collect();
        let density = self.density.as_ref().map(|d| QuadratureDensity {
            nodes: d.nodes.clone(),
            weights: weights[na..].to_vec(),
        });
        Self::new(self.dim, atoms, density, self.cutoff)
    }
}

/// `Σ (1 ∧ |z|²)·w` over atoms and quadrature nodes.
pub fn levy_integrability(levy: &LevyMeasure) -> Result<f64> {
    let v: f64 = levy
        .nodes()
        .iter()
        .map(|(z, w)| w * norm(z).powi(2).min(1.0))
        .sum();
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::UnsupportedModel(
            "Lévy measure fails the integrability condition".into(),
        ))
    }
}

/// `(t, x, out)` coefficient callable.
pub type VecFn = Arc<dyn Fn(f64, &[f64], &mut [f64]) + Send + Sync>;
/// `(t, x, z, out)` jump-coefficient callable.
pub type JumpFn = Arc<dyn Fn(f64, &[f64], &[f64], &mut [f64]) + Send + Sync>;
/// `(t, y, z) -> det ∇φ⁻¹` for the jump map `φ(x) = x + γ(t,x,z)`.
pub type JacobianFn = Arc<dyn Fn(f64, &[f64], &[f64]) -> f64 + Send + Sync>;

/// Inverse of the jump map `φ(x) = x + γ(t,x,z)`: `map` writes `φ⁻¹(y) − y`.
#[derive(Clone)]
pub struct InverseJump {
    pub map: JumpFn,
    pub jacobian: JacobianFn,
}

/// Built-in model families with their parameters.
#[derive(Clone, Debug, PartialEq)]
pub enum Builtin {
    Brownian {
        drift: f64,
        sigma: f64,
    },
    Poisson {
        rate: f64,
        cutoff: f64,
    },
    /// Pure compound Poisson with Gaussian marks, `X_t = drift·t + Σ jumps`.
    CompoundPoissonGaussian {
        rate: f64,
        jump_mean: f64,
        jump_sd: f64,
        drift: f64,
        nodes: usize,
        cutoff: f64,
    },
    /// Brownian motion with drift plus an independent Gaussian compound Poisson part.
    JumpDiffusionMixed {
        drift: f64,
        sigma: f64,
        rate: f64,
        jump_mean: f64,
        jump_sd: f64,
        nodes: usize,
        cutoff: f64,
    },
}

const DEFAULT_CUTOFF: f64 = 1e-3;
const DEFAULT_NODES: usize = 33;

impl Builtin {
    /// Parses a family name and a parameter map. Unknown keys are rejected.
    pub fn from_params(name: &str, params: &BTreeMap<String, f64>) -> Result<Self> {
        let allowed: &[&str] = match name {
            "brownian" => &["drift", "sigma"],
            "poisson" => &["rate", "cutoff"],
            "compound_poisson_gaussian" => {
                &["rate", "jump_mean", "jump_sd", "drift", "nodes", "cutoff"]
            }
            "jump_diffusion_mixed" => &[
                "drift", "sigma", "rate", "jump_mean", "jump_sd", "nodes", "cutoff",
            ],
            other => return Err(Error::UnknownFamily(other.to_string())),
        };
        if let Some(k) = params.keys().find(|k| !allowed.contains(&k.as_str())) {
            return Err(Error::InvalidParameter(format!(
                "unknown parameter `{k}` for family `{name}`"
            )));
        }
        let get = |key: &str, default: Option<f64>| -> Result<f64> {
            match params.get(key) {
                Some(v) => Ok(*v),
                None => default.ok_or_else(|| Error::MissingParameter {
                    family: name.to_string(),
                    name: key.to_string(),
                }),
            }
        };
        let nodes = |default: usize| -> Result<usize> {
            let v = get("nodes", Some(default as f64))?;
            if v >= 1.0 && v.fract() == 0.0 {
                Ok(v as usize)
            } else {
                Err(Error::InvalidParameter(format!("nodes = {v}")))
            }
        };
        let b = match name {
            "brownian" => Builtin::Brownian {
                drift: get("drift", Some(0.0))?,
                sigma: get("sigma", Some(1.0))?,
            },
            "poisson" => Builtin::Poisson {
                rate: get("rate", None)?,
                cutoff: get("cutoff", Some(DEFAULT_CUTOFF))?,
            },
            "compound_poisson_gaussian" => Builtin::CompoundPoissonGaussian {
                rate: get("rate", None)?,
                jump_mean: get("jump_mean", Some(0.0))?,
                jump_sd: get("jump_sd", None)?,
                drift: get("drift", Some(0.0))?,
                nodes: nodes(DEFAULT_NODES)?,
                cutoff: get("cutoff", Some(DEFAULT_CUTOFF))?,
            },
            _ => Builtin::JumpDiffusionMixed {
                drift: get("drift", Some(0.0))?,
                sigma: get("sigma", Some(1.0))?,
                rate: get("rate", None)?,
                jump_mean: get("jump_mean", Some(0.0))?,
                jump_sd: get("jump_sd", None)?,
                nodes: nodes(DEFAULT_NODES)?,
                cutoff: get("cutoff", Some(DEFAULT_CUTOFF))?,
            },
        };
        b.check()?;
        Ok(b)
    }

    pub fn name(&self) -> &'static str {
        match self {
            Builtin::Brownian { .. } => "brownian",
            Builtin::Poisson { .. } => "poisson",
            Builtin::CompoundPoissonGaussian { .. } => "compound_poisson_gaussian",
            Builtin::JumpDiffusionMixed { .. } => "jump_diffusion_mixed",
        }
    }

    fn check(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::InvalidParameter(what.to_string()));
        let finite = |v: f64| v.is_finite();
        match *self {
            Builtin::Brownian { drift, sigma } => {
                if !finite(drift) || !(sigma >= 0.0 && finite(sigma)) {
                    return bad("brownian needs finite drift and sigma >= 0");
                }
            }
            Builtin::Poisson { rate, cutoff } => {
                if !(rate > 0.0 && finite(rate)) {
                    return bad("poisson rate must be positive");
                }
                if !(cutoff > 0.0 && cutoff < 1.0) {
                    return bad("poisson cutoff must lie in (0, 1)");
                }
            }
            Builtin::CompoundPoissonGaussian {
                rate,
                jump_mean,
                jump_sd,
                drift,
                cutoff,
                ..
            }
            | Builtin::JumpDiffusionMixed {
                rate,
                jump_mean,
                jump_sd,
                drift,
                cutoff,
                ..
            } => {
                if !(rate > 0.0 && finite(rate)) {
                    return bad("jump rate must be positive");
                }
                if !(jump_sd > 0.0 && finite(jump_sd)) || !finite(jump_mean) || !finite(drift) {
                    return bad("jump_sd must be positive; jump_mean and drift finite");
                }
                if !(cutoff > 0.0 && cutoff <= 1.0) {
                    return bad("cutoff must lie in (0, 1]");
                }
                if let Builtin::JumpDiffusionMixed { sigma, .. } = *self {
                    if !(sigma >= 0.0 && finite(sigma)) {
                        return bad("sigma must be >= 0");
                    }
                }
            }
        }
        Ok(())
    }
}

/// Lévy–Itô reference model.
#[derive(Clone)]
pub struct Model {
    state_dim: usize,
    noise_dim: usize,
    drift: VecFn,
    dispersion: VecFn,
    jump: JumpFn,
    levy: LevyMeasure,
    inverse_jump: Option<InverseJump>,
    translation_jump: bool,
    builtin: Option<Builtin>,
}

impl fmt::Debug for Model {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Model")
            .field("state_dim", &self.state_dim)
            .field("noise_dim", &self.noise_dim)
            .field("levy", &self.levy)
            .field("translation_jump", &self.translation_jump)
            .field("has_inverse_jump", &self.inverse_jump.is_some())
            .field("builtin", &self.builtin)
            .finish()
    }
}

impl Model {
    /// `dispersion` writes the `state_dim × noise_dim` matrix σ row-major.
    pub fn new(
        state_dim: usize,
        noise_dim: usize,
        drift: VecFn,
        dispersion: VecFn,
        jump: JumpFn,
        levy: LevyMeasure,
    ) -> Result<Self> {
        if state_dim == 0 {
            return Err(Error::InvalidParameter("state dimension must be >= 1".into()));
        }
        Ok(Self {
            state_dim,
            noise_dim,
            drift,
            dispersion,
            jump,
            levy,
            inverse_jump: None,
            translation_jump: false,
            builtin: None,
        })
    }

    /// Declares that γ(t,x,z) does not depend on x, so φ⁻¹(y) = y − γ(t,·,z).
    pub fn with_translation_jump(mut self, yes: bool) -> Self {
        self.translation_jump = yes;
        self
    }

    pub fn with_inverse_jump(mut self, inverse: InverseJump) -> Self {
        self.inverse_jump = Some(inverse);
        self
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn noise_dim(&self) -> usize {
        self.noise_dim
    }

    pub fn levy(&self) -> &LevyMeasure {
        &self.levy
    }

    pub fn translation_jump(&self) -> bool {
        self.translation_jump
    }

    pub fn inverse_jump(&self) -> Option<&InverseJump> {
        self.inverse_jump.as_ref()
    }

    pub fn builtin(&self) -> Option<&Builtin> {
        self.builtin.as_ref()
    }

    pub fn drift_into(&self, t: f64, x: &[f64], out: &mut [f64]) {
        (self.drift)(t, x, out)
    }

    pub fn drift(&self, t: f64, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.state_dim];
        (self.drift)(t, x, &mut out);
        out
    }

    pub fn dispersion_into(&self, t: f64, x: &[f64], out: &mut [f64]) {
        (self.dispersion)(t, x, out)
    }

    /// σ(t,x) as a row-major `n × m` vector.
    pub fn dispersion(&self, t: f64, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.state_dim * self.noise_dim];
        (self.dispersion)(t, x, &mut out);
        out
    }

    /// σσᵀ(t,x) as a row-major `n × n` vector.
    pub fn diffusion(&self, t: f64, x: &[f64]) -> Vec<f64> {
        let (n, m) = (self.state_dim, self.noise_dim);
        let s = self.dispersion(t, x);
        let mut a = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                a[i * n + j] = (0..m).map(|k| s[i * m + k] * s[j * m + k]).sum();
            }
        }
        a
    }

    pub fn jump_into(&self, t: f64, x: &[f64], z: &[f64], out: &mut [f64]) {
        (self.jump)(t, x, z, out)
    }

    pub fn jump(&self, t: f64, x: &[f64], z: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.state_dim];
        (self.jump)(t, x, z, &mut out);
        out
    }

    /// Pre-image `φ⁻¹(y)` of the jump map for mark `z`, with `det ∇φ⁻¹(y)`.
    pub fn inverse_jump_point(&self, t: f64, y: &[f64], z: &[f64]) -> Result<(Vec<f64>, f64)> {
        if let Some(inv) = &self.inverse_jump {
            let mut d = vec![0.0; self.state_dim];
            (inv.map)(t, y, z, &mut d);
            let pre = y.iter().zip(&d).map(|(a, b)| a + b).collect();
            return Ok((pre, (inv.jacobian)(t, y, z)));
        }
        if self.translation_jump {
            let g = self.jump(t, y, z);
            return Ok((y.iter().zip(&g).map(|(a, b)| a - b).collect(), 1.0));
        }
        Err(Error::AdjointUnavailable)
    }

    /// A copy of this model with a different Lévy measure on the same marks.
    pub fn with_levy(&self, levy: LevyMeasure) -> Self {
        let mut m = self.clone();
        m.levy = levy;
        m.builtin = None;
        m
    }
}

/// Constructs a built-in model.
pub fn builtin_model(family: &Builtin) -> Result<Model> {
    family.check()?;
    let translation: JumpFn = Arc::new(|_t, _x, z, out| out[0] = z[0]);
    let inverse = InverseJump {
        map: Arc::new(|_t, _y, z, out| out[0] = -z[0]),
        jacobian: Arc::new(|_t, _y, _z| 1.0),
    };
    let zero_jump: JumpFn = Arc::new(|_t, _x, _z, out| out.iter_mut().for_each(|o| *o = 0.0));
    let model = match *family {
        Builtin::Brownian { drift, sigma } => Model::new(
            1,
            1,
            Arc::new(move |_t, _x, out| out[0] = drift),
            Arc::new(move |_t, _x, out| out[0] = sigma),
            zero_jump,
            LevyMeasure::empty(1),
        )?
        .with_translation_jump(true)
        .with_inverse_jump(inverse),
        Builtin::Poisson { rate, cutoff } => {
            let levy = LevyMeasure::new(
                1,
                vec![Atom {
                    z: vec![1.0],
                    weight: rate,
                }],
                None,
                cutoff,
            )?;
            Model::new(
                1,
                0,
                Arc::new(move |_t, _x, out| out[0] = rate),
                Arc::new(|_t, _x, _out| {}),
                translation,
                levy,
            )?
            .with_translation_jump(true)
            .with_inverse_jump(inverse)
        }
        Builtin::CompoundPoissonGaussian {
            rate,
            jump_mean,
            jump_sd,
            drift,
            nodes,
            cutoff,
        }
        | Builtin::JumpDiffusionMixed {
            rate,
            jump_mean,
            jump_sd,
            drift,
            nodes,
            cutoff,
            ..
        } => {
            let density = gaussian_mark_quadrature(rate, jump_mean, jump_sd, nodes);
            // b absorbs the compensator of the marks in |z| <= 1 so the
            // path is drift·t plus an uncompensated jump sum.
            let b = drift
                + density
                    .nodes
                    .iter()
                    .zip(&density.weights)
                    .filter(|(z, _)| z[0].abs() <= 1.0)
                    .map(|(z, w)| z[0] * w)
                    .sum::<f64>();
            let levy = LevyMeasure::new(1, Vec::new(), Some(density), cutoff)?;
            let (m, sigma) = match *family {
                Builtin::JumpDiffusionMixed { sigma, .. } => (1, sigma),
                _ => (0, 0.0),
            };
            Model::new(
                1,
                m,
                Arc::new(move |_t, _x, out| out[0] = b),
                Arc::new(move |_t, _x, out| {
                    if let Some(o) = out.first_mut() {
                        *o = sigma
                    }
                }),
                translation,
                levy,
            )?
            .with_translation_jump(true)
            .with_inverse_jump(inverse)
        }
    };
    let mut model = model;
    model.builtin = Some(family.clone());
    Ok(model)
}

/// Gauss–Hermite discretization of `rate·N(mean, sd²)`; weights sum to `rate`.
pub fn gaussian_mark_quadrature(rate: f64, mean: f64, sd: f64, n: usize) -> QuadratureDensity {
    let (x, w) = gauss_hermite(n);
    QuadratureDensity {
        nodes: x.iter().map(|xi| vec![mean + SQRT_2 * sd * xi]).collect(),
        weights: w.iter().map(|wi| rate * wi / PI.sqrt()).collect(),
    }
}

/// `−Σ_{ε<|z|≤1} γ(t,x,z)·w` over atoms and quadrature nodes.
pub fn compensator_drift(model: &Model, t: f64, x: &[f64]) -> Result<Vec<f64>> {
    let levy = model.levy();
    let eps = levy.cutoff();
    let mut out = vec![0.0; model.state_dim()];
    let mut g = vec![0.0; model.state_dim()];
    for (z, w) in levy.nodes() {
        let r = norm(z);
        if r > eps && r <= 1.0 {
            model.jump_into(t, x, z, &mut g);
            for (o, gi) in out.iter_mut().zip(&g) {
                *o -= gi * w;
            }
        }
    }
    if out.iter().any(|v| !v.is_finite()) {
        return Err(Error::UnsupportedModel(
            "compensator over (cutoff, 1] is not finite".into(),
        ));
    }
    Ok(out)
}

/// Sampling configuration for [`validate_coefficients`].
#[derive(Clone, Debug)]
pub struct ValidationOptions {
    pub n_points: usize,
    pub seed: u64,
    /// Relative tolerance for the positive-semidefiniteness check.
    pub psd_tol: f64,
    /// Absolute tolerance for `γ(t,x,0) = 0`.
    pub zero_mark_tol: f64,
}

impl Default for ValidationOptions {
    fn default() -> Self {
        Self {
            n_points: 1000,
            seed: 0,
            psd_tol: 1e-10,
            zero_mark_tol: 1e-12,
        }
    }
}

/// Location where a clause failed.
#[derive(Clone, Debug, PartialEq)]
pub struct Witness {
    pub t: f64,
    pub x: Vec<f64>,
    pub z: Option<Vec<f64>>,
    pub value: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClauseResult {
    pub name: &'static str,
    pub passed: bool,
    pub witness: Option<Witness>,
}

/// `sup_z |γ(t,x,z)|/(1∧|z|)` over the support points of ν at one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct JumpRatio {
    pub t: f64,
    pub x: Vec<f64>,
    pub sup: f64,
}

#[derive(Clone, Debug)]
pub struct ValidationReport {
    pub clauses: Vec<ClauseResult>,
    pub jump_ratio: Vec<JumpRatio>,
}

impl ValidationReport {
    pub fn passed(&self) -> bool {
        self.clauses.iter().all(|c| c.passed)
    }

    pub fn clause(&self, name: &str) -> Option<&ClauseResult> {
        self.clauses.iter().find(|c| c.name == name)
    }
}

pub const CLAUSE_LEVY: &str = "levy measure: no mass at 0, finite (1∧|z|²) integral";
pub const CLAUSE_DRIFT: &str = "b locally bounded";
pub const CLAUSE_DISPERSION: &str = "σ locally bounded";
pub const CLAUSE_PSD: &str = "σσᵀ positive semidefinite";
pub const CLAUSE_ZERO_MARK: &str = "γ(t,x,0) ≡ 0";
pub const CLAUSE_JUMP_RATIO: &str = "|γ(t,x,z)|/(1∧|z|) locally bounded";

/// Sample-based check of the standing coefficient assumptions on the bounding
/// box of `sample_box`, at every time in `t_samples`.
pub fn validate_coefficients(
    model: &Model,
    sample_box: &Grid,
    t_samples: &[f64],
    opts: &ValidationOptions,
) -> Result<ValidationReport> {
    let n = model.state_dim();
    if sample_box.dim() != n {
        return Err(Error::GridMismatch(format!(
            "sample box has dimension {}, model {}",
            sample_box.dim(),
            n
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let points: Vec<Vec<f64>> = (0..opts.n_points)
        .map(|_| {
            (0..n)
                .map(|d| rng.random_range(sample_box.lower()[d]..=sample_box.upper()[d]))
                .collect()
        })
        .collect();

    let fail = |slot: &mut Option<Witness>, w: Witness| {
        if slot.is_none() {
            *slot = Some(w);
        }
    };
    let mut levy_fail = None;
    if levy_integrability(model.levy()).is_err() {
        fail(
            &mut levy_fail,
            Witness {
                t: f64::NAN,
                x: vec![],
                z: None,
                value: f64::INFINITY,
            },
        );
    }
    for a in model.levy().atoms() {
        if norm(&a.z) == 0.0 && a.weight > 0.0 {
            fail(
                &mut levy_fail,
                Witness {
                    t: f64::NAN,
                    x: vec![],
                    z: Some(a.z.clone()),
                    value: a.weight,
                },
            );
        }
    }

    let (mut drift_fail, mut disp_fail, mut psd_fail, mut zero_fail, mut ratio_fail) =
        (None, None, None, None, None);
    let mut jump_ratio = Vec::with_capacity(points.len() * t_samples.len());
    let nodes = model.levy().nodes();
    let zero = vec![0.0; model.levy().dim()];
    for &t in t_samples {
        for x in &points {
            let b = model.drift(t, x);
            if let Some(v) = b.iter().find(|v| !v.is_finite()) {
                fail(&mut drift_fail, wit(t, x, None, *v));
            }
            let s = model.dispersion(t, x);
            if let Some(v) = s.iter().find(|v| !v.is_finite()) {
                fail(&mut disp_fail, wit(t, x, None, *v));
            } else if n > 1 {
                let a = DMatrix::from_row_slice(n, n, &model.diffusion(t, x));
                let scale = a.amax().max(1.0);
                let lmin = a.symmetric_eigenvalues().min();
                if lmin < -opts.psd_tol * scale {
                    fail(&mut psd_fail, wit(t, x, None, lmin));
                }
            }
            if !nodes.is_empty() {
                let g0 = model.jump(t, x, &zero);
                let g0n = norm(&g0);
                if !(g0n <= opts.zero_mark_tol) {
                    fail(&mut zero_fail, wit(t, x, Some(zero.clone()), g0n));
                }
            }
            let mut sup: f64 = 0.0;
            for (z, _) in &nodes {
                let r = norm(z);
                if r == 0.0 {
                    continue;
                }
                let q = norm(&model.jump(t, x, z)) / r.min(1.0);
                if !q.is_finite() {
                    fail(&mut ratio_fail, wit(t, x, Some(z.to_vec()), q));
                }
                sup = sup.max(q);
            }
            jump_ratio.push(JumpRatio {
                t,
                x: x.clone(),
                sup,
            });
        }
    }
    let clause = |name, w: Option<Witness>| ClauseResult {
        name,
        passed: w.is_none(),
        witness: w,
    };
    Ok(ValidationReport {
        clauses: vec![
            clause(CLAUSE_LEVY, levy_fail),
            clause(CLAUSE_DRIFT, drift_fail),
            clause(CLAUSE_DISPERSION, disp_fail),
            clause(CLAUSE_PSD, psd_fail),
            clause(CLAUSE_ZERO_MARK, zero_fail),
            clause(CLAUSE_JUMP_RATIO, ratio_fail),
        ],
        jump_ratio,
    })
}

fn wit(t: f64, x: &[f64], z: Option<Vec<f64>>, value: f64) -> Witness {
    Witness {
        t,
        x: x.to_vec(),
        z,
        value,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn params(kv: &[(&str, f64)]) -> BTreeMap<String, f64> {
        kv.iter().map(|(k, v)| (k.to_string(), *v)).collect()
    }

    fn all_builtins() -> Vec<Model> {
        [
            ("brownian", params(&[("sigma", 1.0)])),
            ("poisson", params(&[("rate", 1.0)])),
            (
                "compound_poisson_gaussian",
                params(&[("rate", 2.0), ("jump_sd", 0.5)]),
            ),
            (
                "jump_diffusion_mixed",
                params(&[("rate", 1.5), ("jump_sd", 0.3), ("sigma", 0.8), ("drift", 0.2)]),
            ),
        ]
        .iter()
        .map(|(n, p)| builtin_model(&Builtin::from_params(n, p).unwrap()).unwrap())
        .collect()
    }

    #[test]
    fn grid_geometry() {
        let g = Grid::integers(0, 40).unwrap();
        assert_eq!(g.len(), 41);
        assert_eq!(g.center(0), vec![0.0]);
        assert_eq!(g.center(40), vec![40.0]);
        assert_eq!(g.locate(&[3.2]), Some(3));
        assert_eq!(g.locate(&[40.5]), Some(40));
        assert_eq!(g.locate(&[41.0]), None);
        let b = Grid::uniform(-6.0, 6.0, 401).unwrap();
        assert!(b.center(200)[0].abs() < 1e-14);
        let g2 = Grid::new(vec![0.0, 0.0], vec![1.0, 2.0], vec![2, 4]).unwrap();
        assert_eq!(g2.len(), 8);
        assert_eq!(g2.unravel(g2.ravel(&[1, 3])), vec![1, 3]);
        assert_eq!(g2.center(g2.ravel(&[1, 3])), vec![0.75, 1.75]);
        assert!(Grid::uniform(1.0, 0.0, 3).is_err());
    }

    #[test]
    fn marginal_constructors_sum_to_one() {
        let g = Grid::integers(0, 40).unwrap();
        let p = MarginalVector::poisson(g.clone(), 2.0).unwrap();
        assert!((p.mass()[3] - 8.0 / 6.0 * (-2f64).exp()).abs() < 1e-15);
        assert!((p.mean()[0] - 2.0).abs() < 1e-12);
        let b = Grid::uniform(-6.0, 6.0, 401).unwrap();
        let n = MarginalVector::gaussian(b, -1.0, 0.25).unwrap();
        assert!((n.mass().iter().sum::<f64>() - 1.0).abs() < 1e-14);
        assert!((n.mean()[0] + 1.0).abs() < 1e-6);
        assert!(MarginalVector::new(g.clone(), vec![0.5; 41]).is_err());
        let pt = MarginalVector::point(g, &[0.0]).unwrap();
        assert_eq!(pt.mass()[0], 1.0);
    }

    #[test]
    fn poisson_builtin_has_single_unit_atom() {
        let m = builtin_model(&Builtin::from_params("poisson", &params(&[("rate", 1.0)])).unwrap())
            .unwrap();
        assert_eq!(m.levy().atoms().len(), 1);
        assert_eq!(m.levy().atoms()[0].z, vec![1.0]);
        assert_eq!(m.levy().atoms()[0].weight, 1.0);
        assert_eq!(m.drift(0.3, &[2.0]), vec![1.0]);
        assert_eq!(m.jump(0.0, &[5.0], &[1.0]), vec![1.0]);
    }

    #[test]
    fn brownian_builtin_has_no_jumps() {
        let m = builtin_model(&Builtin::from_params("brownian", &params(&[("sigma", 1.0)])).unwrap())
            .unwrap();
        assert_eq!(m.levy().node_count(), 0);
        assert_eq!(m.diffusion(0.0, &[0.0]), vec![1.0]);
        assert_eq!(compensator_drift(&m, 0.0, &[0.0]).unwrap(), vec![0.0]);
    }

    #[test]
    fn gaussian_marks_weights_sum_to_rate() {
        let m = builtin_model(
            &Builtin::from_params(
                "compound_poisson_gaussian",
                &params(&[("rate", 2.0), ("jump_sd", 0.5)]),
            )
            .unwrap(),
        )
        .unwrap();
        let d = m.levy().density().unwrap();
        assert_eq!(d.nodes.len(), 33);
        assert!((d.weights.iter().sum::<f64>() - 2.0).abs() < 1e-12);
        // second moment of rate·N(0, 0.25)
        let m2: f64 = d.nodes.iter().zip(&d.weights).map(|(z, w)| w * z[0] * z[0]).sum();
        assert!((m2 - 0.5).abs() < 1e-12);
        // integrability by direct summation
        let direct: f64 = d
            .nodes
            .iter()
            .zip(&d.weights)
            .map(|(z, w)| w * (z[0] * z[0]).min(1.0))
            .sum();
        assert!((levy_integrability(m.levy()).unwrap() - direct).abs() < 1e-15);
    }

    #[test]
    fn builtin_parameter_errors() {
        assert!(matches!(
            Builtin::from_params("poisson", &params(&[])),
            Err(Error::MissingParameter { .. })
        ));
        assert!(Builtin::from_params("poisson", &params(&[("rate", -1.0)])).is_err());
        assert!(Builtin::from_params("poisson", &params(&[("rate", 1.0), ("typo", 1.0)])).is_err());
        assert!(matches!(
            Builtin::from_params("stable", &params(&[])),
            Err(Error::UnknownFamily(_))
        ));
    }

    #[test]
    fn compensator_examples() {
        let p = builtin_model(&Builtin::Poisson {
            rate: 1.0,
            cutoff: 0.5,
        })
        .unwrap();
        assert_eq!(compensator_drift(&p, 0.0, &[0.0]).unwrap(), vec![-1.0]);
        let effective = p.drift(0.0, &[0.0])[0] + compensator_drift(&p, 0.0, &[0.0]).unwrap()[0];
        assert_eq!(effective, 0.0);
        let far = p.with_levy(
            LevyMeasure::new(
                1,
                vec![Atom {
                    z: vec![1.5],
                    weight: 3.0,
                }],
                None,
                0.5,
            )
            .unwrap(),
        );
        assert_eq!(compensator_drift(&far, 0.0, &[0.0]).unwrap(), vec![0.0]);
    }

    #[test]
    fn integrability_examples() {
        let unit = LevyMeasure::new(
            1,
            vec![Atom {
                z: vec![1.0],
                weight: 1.0,
            }],
            None,
            0.1,
        )
        .unwrap();
        assert_eq!(levy_integrability(&unit).unwrap(), 1.0);
        let half = LevyMeasure::new(
            1,
            vec![Atom {
                z: vec![0.5],
                weight: 2.0,
            }],
            None,
            0.1,
        )
        .unwrap();
        assert_eq!(levy_integrability(&half).unwrap(), 0.5);
        assert!(LevyMeasure::new(
            1,
            vec![Atom {
                z: vec![0.0],
                weight: 1.0
            }],
            None,
            0.1
        )
        .is_err());
    }

    #[test]
    fn builtins_pass_validation_at_random_points() {
        let box1 = Grid::uniform(-10.0, 10.0, 10).unwrap();
        for m in all_builtins() {
            let r = validate_coefficients(&m, &box1, &[0.0, 0.5, 1.0], &ValidationOptions::default())
                .unwrap();
            assert!(r.passed(), "{:?}: {:?}", m.builtin(), r.clauses);
            assert_eq!(r.jump_ratio.len(), 3000);
        }
    }

    #[test]
    fn nonzero_jump_at_zero_mark_is_reported() {
        let levy = LevyMeasure::new(
            1,
            vec![Atom {
                z: vec![0.5],
                weight: 1.0,
            }],
            None,
            0.1,
        )
        .unwrap();
        let m = Model::new(
            1,
            0,
            Arc::new(|_t, _x, o| o[0] = 0.0),
            Arc::new(|_t, _x, _o| {}),
            Arc::new(|_t, _x, z, o| o[0] = 1.0 + z[0]),
            levy,
        )
        .unwrap();
        let r = validate_coefficients(
            &m,
            &Grid::uniform(0.0, 1.0, 4).unwrap(),
            &[0.0],
            &ValidationOptions {
                n_points: 10,
                ..Default::default()
            },
        )
        .unwrap();
        let c = r.clause(CLAUSE_ZERO_MARK).unwrap();
        assert!(!c.passed);
        let w = c.witness.as_ref().unwrap();
        assert_eq!(w.value, 1.0);
        assert!(r.clause(CLAUSE_DRIFT).unwrap().passed);
    }

    #[test]
    fn nonfinite_drift_is_reported_and_gram_matrix_is_psd() {
        let m = Model::new(
            2,
            2,
            Arc::new(|_t, x, o| {
                o[0] = 1.0 / x[0].signum().max(0.0);
                o[1] = 0.0
            }),
            Arc::new(|_t, _x, o| o.copy_from_slice(&[1.0, 0.5, 0.5, 1.0])),
            Arc::new(|_t, _x, _z, o| o.fill(0.0)),
            LevyMeasure::empty(2),
        )
        .unwrap();
        let r = validate_coefficients(
            &m,
            &Grid::new(vec![-1.0, -1.0], vec![1.0, 1.0], vec![2, 2]).unwrap(),
            &[0.0],
            &ValidationOptions::default(),
        )
        .unwrap();
        assert!(!r.clause(CLAUSE_DRIFT).unwrap().passed);
        assert!(r.clause(CLAUSE_PSD).unwrap().passed);
    }

    proptest! {
        #[test]
        fn compensator_is_additive_over_atom_partitions(
            zs in proptest::collection::vec((-2.0f64..2.0, 0.0f64..3.0), 1..8),
            split in 0usize..8,
        ) {
            let atoms: Vec<Atom> = zs
                .iter()
                .filter(|(z, _)| z.abs() > 1e-6)
                .map(|(z, w)| Atom { z: vec![*z], weight: *w })
                .collect();
            let k = split.min(atoms.len());
            let base = builtin_model(&Builtin::Poisson { rate: 1.0, cutoff: 0.1 }).unwrap();
            let mk = |a: &[Atom]| base.with_levy(LevyMeasure::new(1, a.to_vec(), None, 0.1).unwrap());
            let whole = compensator_drift(&mk(&atoms), 0.2, &[1.0]).unwrap()[0];
            let left = compensator_drift(&mk(&atoms[..k]), 0.2, &[1.0]).unwrap()[0];
            let right = compensator_drift(&mk(&atoms[k..]), 0.2, &[1.0]).unwrap()[0];
            prop_assert!((whole - left - right).abs() < 1e-12);
        }

        #[test]
        fn inverse_jump_round_trip(t in 0.0f64..1.0, x in -50.0f64..50.0, zi in 0usize..33) {
            for m in all_builtins() {
                let nodes = m.levy().nodes();
                if nodes.is_empty() { continue; }
                let z = nodes[zi % nodes.len()].0.to_vec();
                let g = m.jump(t, &[x], &z);
                let y = [x + g[0]];
                let (back, jac) = m.inverse_jump_point(t, &y, &z).unwrap();
                prop_assert!((back[0] - x).abs() <= 1e-12 * x.abs().max(1.0));
                prop_assert_eq!(jac, 1.0);
            }
        }
    }
}
