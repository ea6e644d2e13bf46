//! CSV tables for paths, kernels, potentials, couplings, fields and weights.
//!
//! Floats are written with 17 significant digits (`{:.16e}`), which
//! round-trips every `f64`. Column order is fixed per table.

use crate::bridge::BridgeSolution;
use crate::error::{Error, Result};
use crate::htransform::{CoefficientRow, GirsanovWeight, HField};
use crate::model::{Grid, MarginalVector};
use crate::operator::OperatorResidual;
use crate::schrodinger::{Coupling, Potentials, SolveTrace};
use crate::sim::{KernelMatrix, PathEnsemble, TimeMesh};
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

pub fn fmt_float(v: f64) -> String {
    format!("{v:.16e}")
}

fn csv_err(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}

fn writer<W: Write>(w: W) -> csv::Writer<W> {
    csv::WriterBuilder::new().has_headers(false).from_writer(w)
}

fn axis_names(prefix: &str, dim: usize) -> Vec<String> {
    (0..dim).map(|d| format!("{prefix}{d}")).collect()
}

fn row<W: Write>(w: &mut csv::Writer<W>, fields: Vec<String>) -> Result<()> {
    w.write_record(&fields).map_err(csv_err)
}

fn floats(v: &[f64]) -> impl Iterator<Item = String> + '_ {
    v.iter().map(|x| fmt_float(*x))
}

/// `cell, x0.., f, g`, preceded by a `# normalization:` comment line.
pub fn write_potentials<W: Write>(mut out: W, grid: &Grid, pot: &Potentials) -> Result<()> {
    writeln!(out, "# normalization: {}", pot.tag)?;
    let mut w = writer(out);
    let mut head = vec!["cell".to_string()];
    head.extend(axis_names("x", grid.dim()));
    head.extend(["f".to_string(), "g".to_string()]);
    row(&mut w, head)?;
    for i in 0..grid.len() {
        let mut r = vec![i.to_string()];
        r.extend(floats(&grid.center(i)));
        r.push(fmt_float(pot.f[i]));
        r.push(fmt_float(pot.g[i]));
        row(&mut w, r)?;
    }
    w.flush()?;
    Ok(())
}

/// `source, target, mass` for every entry.
pub fn write_coupling<W: Write>(out: W, coupling: &Coupling) -> Result<()> {
    write_matrix(out, ["source", "target", "mass"], &coupling.pi)
}

/// `source, target, p` for every entry; `s` and `t` in a comment line.
pub fn write_kernel<W: Write>(mut out: W, kernel: &KernelMatrix) -> Result<()> {
    writeln!(out, "# s = {}, t = {}", fmt_float(kernel.s), fmt_float(kernel.t))?;
    write_matrix(out, ["source", "target", "p"], &kernel.p)
}

fn write_matrix<W: Write>(out: W, head: [&str; 3], m: &ndarray::Array2<f64>) -> Result<()> {
    let mut w = writer(out);
    row(&mut w, head.iter().map(|s| s.to_string()).collect())?;
    for ((i, j), v) in m.indexed_iter() {
        row(&mut w, vec![i.to_string(), j.to_string(), fmt_float(*v)])?;
    }
    w.flush()?;
    Ok(())
}

/// One row per mesh node: `node, t, c0, c1, ..`.
pub fn write_node_table<W: Write>(out: W, mesh: &TimeMesh, rows: &[Vec<f64>]) -> Result<()> {
    let mut w = writer(out);
    let cells = rows.first().map_or(0, |r| r.len());
    let mut head = vec!["node".to_string(), "t".to_string()];
    head.extend(axis_names("c", cells));
    row(&mut w, head)?;
    for (j, r) in rows.iter().enumerate() {
        let mut rec = vec![j.to_string(), fmt_float(mesh.time(j))];
        rec.extend(floats(r));
        row(&mut w, rec)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_marginals<W: Write>(out: W, mesh: &TimeMesh, marginals: &[MarginalVector]) -> Result<()> {
    let rows: Vec<Vec<f64>> = marginals.iter().map(|m| m.mass().to_vec()).collect();
    write_node_table(out, mesh, &rows)
}

pub fn write_hfield<W: Write>(out: W, h: &HField) -> Result<()> {
    let rows: Vec<Vec<f64>> = (0..=h.mesh().steps()).map(|j| h.node(j)).collect();
    write_node_table(out, h.mesh(), &rows)
}

/// `iteration, residual`.
pub fn write_trace<W: Write>(out: W, trace: &SolveTrace) -> Result<()> {
    write_residual_series(out, &trace.residuals)
}

pub fn write_residual_series<W: Write>(out: W, residuals: &[f64]) -> Result<()> {
    let mut w = writer(out);
    row(&mut w, vec!["iteration".into(), "residual".into()])?;
    for (k, r) in residuals.iter().enumerate() {
        row(&mut w, vec![(k + 1).to_string(), fmt_float(*r)])?;
    }
    w.flush()?;
    Ok(())
}

/// `path, node, t, x0..`; dropped paths are absent.
pub fn write_paths<W: Write>(out: W, paths: &PathEnsemble) -> Result<()> {
    let mut w = writer(out);
    let mut head = vec!["path".to_string(), "node".to_string(), "t".to_string()];
    head.extend(axis_names("x", paths.dim()));
    row(&mut w, head)?;
    let mesh = paths.mesh();
    for p in 0..paths.len() {
        for j in 0..=mesh.steps() {
            let mut rec = vec![paths.ids()[p].to_string(), j.to_string(), fmt_float(mesh.time(j))];
            rec.extend(floats(&paths.state(p, j)));
            row(&mut w, rec)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// `path, time, z0.., pre0.., dx0..`.
pub fn write_jumps<W: Write>(out: W, paths: &PathEnsemble) -> Result<()> {
    let mut w = writer(out);
    let n = paths.dim();
    let mut head = vec!["path".to_string(), "time".to_string()];
    let mark_dim = (0..paths.len())
        .flat_map(|p| paths.jumps(p).iter().map(|j| j.mark.len()))
        .next()
        .unwrap_or(n);
    head.extend(axis_names("z", mark_dim));
    head.extend(axis_names("pre", n));
    head.extend(axis_names("dx", n));
    row(&mut w, head)?;
    for p in 0..paths.len() {
        for jr in paths.jumps(p) {
            let mut rec = vec![paths.ids()[p].to_string(), fmt_float(jr.time)];
            rec.extend(floats(&jr.mark));
            rec.extend(floats(&jr.pre_state));
            rec.extend(floats(&jr.displacement));
            row(&mut w, rec)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// One row per path; `exit_node` is empty for valid paths.
pub fn write_weights<W: Write>(out: W, weights: &[GirsanovWeight]) -> Result<()> {
    let mut w = writer(out);
    row(
        &mut w,
        [
            "path", "log_z", "weight", "brownian", "quadratic", "jump", "compensation", "exit_node",
        ]
        .iter()
        .map(|s| s.to_string())
        .collect(),
    )?;
    for g in weights {
        row(
            &mut w,
            vec![
                g.path_id.to_string(),
                fmt_float(g.log_weight()),
                fmt_float(g.weight()),
                fmt_float(g.brownian),
                fmt_float(g.quadratic),
                fmt_float(g.jump),
                fmt_float(g.compensation),
                g.exit_node.map_or(String::new(), |e| e.to_string()),
            ],
        )?;
    }
    w.flush()?;
    Ok(())
}

/// `t, x0.., residual`.
pub fn write_residual_table<W: Write>(out: W, res: &OperatorResidual) -> Result<()> {
    let mut w = writer(out);
    let dim = res.table.first().map_or(1, |(_, x, _)| x.len());
    let mut head = vec!["t".to_string()];
    head.extend(axis_names("x", dim));
    head.push("residual".into());
    row(&mut w, head)?;
    for (t, x, r) in &res.table {
        let mut rec = vec![fmt_float(*t)];
        rec.extend(floats(x));
        rec.push(fmt_float(*r));
        row(&mut w, rec)?;
    }
    w.flush()?;
    Ok(())
}

/// `t, x0.., b0.., r0..`; coefficient cells are empty outside the support.
pub fn write_coefficients<W: Write>(out: W, rows: &[CoefficientRow]) -> Result<()> {
    let mut w = writer(out);
    let dim = rows.first().map_or(1, |r| r.x.len());
    let ratios = rows
        .iter()
        .find_map(|r| r.tilts.as_ref().map(|v| v.len()))
        .unwrap_or(0);
    let mut head = vec!["t".to_string()];
    head.extend(axis_names("x", dim));
    head.extend(axis_names("b", dim));
    head.extend(axis_names("ratio", ratios));
    row(&mut w, head)?;
    for r in rows {
        let mut rec = vec![fmt_float(r.t)];
        rec.extend(floats(&r.x));
        match &r.drift {
            Some(b) => rec.extend(floats(b)),
            None => rec.extend(std::iter::repeat_n(String::new(), dim)),
        }
        match &r.tilts {
            Some(q) => rec.extend(floats(q)),
            None => rec.extend(std::iter::repeat_n(String::new(), ratios)),
        }
        row(&mut w, rec)?;
    }
    w.flush()?;
    Ok(())
}

fn create(dir: &Path, name: &str) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(dir.join(name))?))
}

/// Names of the CSV tables written by [`write_solution_tables`].
pub const SOLUTION_TABLES: [&str; 3] = ["potentials.csv", "coupling.csv", "marginals.csv"];

/// Writes `potentials.csv`, `coupling.csv` and `marginals.csv` into `dir`.
pub fn write_solution_tables(dir: &Path, sol: &BridgeSolution) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut f = create(dir, SOLUTION_TABLES[0])?;
    write_potentials(&mut f, &sol.grid, &sol.potentials)?;
    f.flush()?;
    let mut f = create(dir, SOLUTION_TABLES[1])?;
    write_coupling(&mut f, &sol.coupling)?;
    f.flush()?;
    let mut f = create(dir, SOLUTION_TABLES[2])?;
    write_marginals(&mut f, &sol.mesh, &sol.marginals)?;
    f.flush()?;
    Ok(())
}
