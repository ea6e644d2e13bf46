//! Bundle directory layout and re-export.
//!
//! A bundle holds `potentials.csv`, `coupling.csv`, `marginals.csv`,
//! `trace.csv`, `residuals.json` and `provenance.json`. Nothing in it
//! depends on wall time, thread count or the output location.

use crate::config::ScenarioConfig;
use crate::scenario::{estimator_distances, Outcome};
use jumpbridge::bridge::kl_path_budget;
use jumpbridge::export::{fmt_float, write_residual_series, write_solution_tables, SOLUTION_TABLES};
use jumpbridge::metrics::{linf_distance, tv_distance};
use jumpbridge::operator::OperatorResidual;
use serde_json::{json, Map, Value};
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

pub const TRACE_FILE: &str = "trace.csv";
pub const RESIDUALS_FILE: &str = "residuals.json";
pub const PROVENANCE_FILE: &str = "provenance.json";

/// Every file of a bundle, in a fixed order.
pub fn bundle_files() -> Vec<&'static str> {
    let mut v = SOLUTION_TABLES.to_vec();
    v.extend([TRACE_FILE, RESIDUALS_FILE, PROVENANCE_FILE]);
    v
}

#[derive(Debug, thiserror::Error)]
pub enum BundleError {
    #[error("no bundle at {0} (missing {1})")]
    Missing(PathBuf, &'static str),
    #[error("malformed {file}: {why}")]
    Malformed { file: PathBuf, why: String },
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Core(#[from] jumpbridge::Error),
}

pub struct Bundle<'a> {
    outcome: &'a Outcome,
    residuals: Value,
    provenance: Value,
}

impl<'a> Bundle<'a> {
    /// `extra` is merged into the provenance document (e.g. the golden name).
    pub fn from_outcome(outcome: &'a Outcome, extra: Option<Value>) -> Self {
        Self {
            outcome,
            residuals: residuals_json(outcome),
            provenance: provenance_json(&outcome.config, extra),
        }
    }

    pub fn residuals(&self) -> &Value {
        &self.residuals
    }

    pub fn write(&self, dir: &Path) -> Result<(), std::io::Error> {
        std::fs::create_dir_all(dir)?;
        write_solution_tables(dir, &self.outcome.solution).map_err(into_io)?;
        write_trace_file(dir, &self.outcome.solution.trace.residuals)?;
        write_json(&dir.join(RESIDUALS_FILE), &self.residuals)?;
        write_json(&dir.join(PROVENANCE_FILE), &self.provenance)?;
        Ok(())
    }
}

fn into_io(e: jumpbridge::Error) -> std::io::Error {
    match e {
        jumpbridge::Error::Io(e) => e,
        other => std::io::Error::other(other),
    }
}

pub fn write_trace_file(dir: &Path, residuals: &[f64]) -> Result<(), std::io::Error> {
    let mut f = BufWriter::new(File::create(dir.join(TRACE_FILE))?);
    write_residual_series(&mut f, residuals).map_err(into_io)?;
    f.flush()
}

pub fn write_json(path: &Path, v: &Value) -> Result<(), std::io::Error> {
    let mut f = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut f, v)?;
    f.write_all(b"\n")?;
    f.flush()
}

/// The config as it must be given to `run` to reproduce the bundle. The
/// output directory is left out so that bundles compare equal across
/// locations.
pub fn provenance_json(config: &ScenarioConfig, extra: Option<Value>) -> Value {
    let mut echo = config.clone();
    echo.output_dir = None;
    let mut doc = json!({
        "tool": "jumpbridge",
        "version": env!("CARGO_PKG_VERSION"),
        "config": serde_json::to_value(&echo).expect("config serializes"),
        "config_toml": echo.to_toml(),
    });
    if let (Some(Value::Object(extra)), Value::Object(map)) = (extra, &mut doc) {
        map.extend(extra);
    }
    doc
}

fn residual_json(r: &OperatorResidual) -> Value {
    json!({
        "max_abs": r.max_abs,
        "at_t": r.location.0,
        "at_x": r.location.1,
        "points": r.table.len(),
    })
}

pub fn residuals_json(out: &Outcome) -> Value {
    let sol = &out.solution;
    let d = &sol.diagnostics;
    let steps = sol.mesh.steps();
    let mut doc = Map::new();
    doc.insert(
        "solver".into(),
        json!({
            "iterations": sol.trace.iterations,
            "converged": sol.trace.converged,
            "log_domain": sol.trace.log_domain,
            "tol": out.config.solver.tol,
            "max_iter": out.config.solver.max_iter,
            "final_residual": sol.trace.residuals.last().copied(),
            "normalization": sol.potentials.tag,
        }),
    );
    doc.insert(
        "system_residual".into(),
        json!({ "source": d.system_residual.0, "target": d.system_residual.1 }),
    );
    doc.insert("kl_coupling".into(), json!(d.kl));
    doc.insert("kl_path".into(), json!(kl_path_budget(sol)));
    doc.insert("mean_value_residual".into(), json!(d.mean_value_residual));
    doc.insert("mass_defect".into(), json!(d.mass_defect));
    doc.insert("kernel_row_defect".into(), json!(d.kernel_row_defect));
    doc.insert("kernel_warnings".into(), json!(d.kernel_warnings));
    doc.insert(
        "endpoint_error".into(),
        json!({
            "source": linf_distance(sol.marginals[0].mass(), sol.rho0.mass()),
            "target": linf_distance(sol.marginals[steps].mass(), sol.rho_t.mass()),
        }),
    );
    doc.insert(
        "dynamic".into(),
        json!({
            "excluded_pairs": out.dynamic.excluded_pairs.len(),
            "excluded_mass": out.dynamic.excluded_mass,
            "max_tv_to_product": (0..=steps)
                .map(|j| tv_distance(sol.marginals[j].mass(), out.dynamic.marginals[j].mass()))
                .fold(0.0, f64::max),
        }),
    );
    doc.insert(
        "transformed_coefficients".into(),
        Value::Array(
            sol.coefficients
                .iter()
                .map(|r| json!({ "t": r.t, "x": r.x, "drift": r.drift, "ratios": r.tilts }))
                .collect(),
        ),
    );
    if let Some(p) = &out.pide {
        doc.insert(
            "pide".into(),
            json!({
                "backward": residual_json(&p.backward),
                "forward": residual_json(&p.forward),
                "skipped": p.skipped,
            }),
        );
    }
    if !out.convergence.is_empty() {
        doc.insert(
            "convergence".into(),
            Value::Array(
                out.convergence
                    .iter()
                    .map(|r| {
                        json!({ "k": r.k, "tv_terminal": r.tv_terminal, "tv_mid": r.tv_mid, "r_k": r.r_k })
                    })
                    .collect(),
            ),
        );
    }
    if let (Some(s), Some(cfg)) = (&out.simulation, &out.config.simulation) {
        let (mean, se) = s.weight_mean();
        let [ab, ac, bc] = estimator_distances(out).expect("simulation present");
        doc.insert(
            "simulation".into(),
            json!({
                "seed": cfg.seed,
                "n_paths": cfg.n_paths,
                "reference_kept": s.reference.len(),
                "transformed_kept": s.transformed.paths.len(),
                "rate_bound": s.transformed.rate_bound,
                "exceedances": s.transformed.exceedances,
                "r0": s.r0,
                "weight_mean": mean,
                "weight_se": se,
                "invalid_weights": s.invalid(),
                "mid_node": s.mid,
                "t_mid": sol.mesh.time(s.mid),
                "tv": {
                    "product_vs_mixture": ab,
                    "product_vs_reweighted": ac,
                    "mixture_vs_reweighted": bc,
                    "transformed_mid_vs_product": tv_distance(s.transformed_mid.mass(), sol.marginals[s.mid].mass()),
                    "transformed_terminal_vs_rho_t": tv_distance(s.transformed_terminal.mass(), sol.rho_t.mass()),
                    "reweighted_terminal_vs_transformed_terminal":
                        tv_distance(s.reweighted_terminal.mass(), s.transformed_terminal.mass()),
                },
            }),
        );
    }
    doc.insert(
        "seeds".into(),
        json!({
            "summary": out.config.solver.summary_seed,
            "kernel": out.config.solver.kernel_seed,
            "simulation": out.config.simulation.as_ref().map(|s| s.seed),
        }),
    );
    Value::Object(doc)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum Format {
    Csv,
    Json,
}

/// A CSV table as read back from a bundle.
struct Table {
    comments: Vec<String>,
    columns: Vec<String>,
    rows: Vec<Vec<String>>,
}

fn read_table(path: &Path) -> Result<Table, BundleError> {
    let text = std::fs::read_to_string(path)?;
    let comments = text
        .lines()
        .take_while(|l| l.starts_with('#'))
        .map(|l| l.to_string())
        .collect();
    let mut rdr = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_reader(text.as_bytes());
    let bad = |e: csv::Error| BundleError::Malformed {
        file: path.to_path_buf(),
        why: e.to_string(),
    };
    let columns = rdr.headers().map_err(bad)?.iter().map(|s| s.to_string()).collect();
    let rows = rdr
        .records()
        .map(|r| r.map(|r| r.iter().map(|s| s.to_string()).collect()).map_err(bad))
        .collect::<Result<_, _>>()?;
    Ok(Table {
        comments,
        columns,
        rows,
    })
}

enum Cell {
    Int(i64),
    Float(f64),
    Empty,
}

fn parse_cell(s: &str, path: &Path) -> Result<Cell, BundleError> {
    if s.is_empty() {
        return Ok(Cell::Empty);
    }
    if let Ok(i) = s.parse::<i64>() {
        return Ok(Cell::Int(i));
    }
    s.parse::<f64>().map(Cell::Float).map_err(|_| BundleError::Malformed {
        file: path.to_path_buf(),
        why: format!("`{s}` is not a number"),
    })
}

fn tables() -> Vec<&'static str> {
    let mut v = SOLUTION_TABLES.to_vec();
    v.push(TRACE_FILE);
    v
}

fn read_json(path: &Path) -> Result<Value, BundleError> {
    let text = std::fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| BundleError::Malformed {
        file: path.to_path_buf(),
        why: e.to_string(),
    })
}

/// Re-emits a bundle into `dest` (default `<bundle>/export`). CSV gives one
/// file per table; JSON gives a single `bundle.json`. Running it twice
/// yields identical bytes.
pub fn export(bundle: &Path, format: Format, dest: Option<&Path>) -> Result<Vec<PathBuf>, BundleError> {
    for f in bundle_files() {
        if !bundle.join(f).is_file() {
            return Err(BundleError::Missing(bundle.to_path_buf(), f));
        }
    }
    let dest = dest.map_or_else(|| bundle.join("export"), Path::to_path_buf);
    std::fs::create_dir_all(&dest)?;
    let mut written = Vec::new();
    match format {
        Format::Csv => {
            for name in tables() {
                let src = bundle.join(name);
                let t = read_table(&src)?;
                let mut out = String::new();
                for c in &t.comments {
                    out.push_str(c);
                    out.push('\n');
                }
                out.push_str(&t.columns.join(","));
                out.push('\n');
                for r in &t.rows {
                    let cells = r
                        .iter()
                        .map(|s| {
                            Ok(match parse_cell(s, &src)? {
                                Cell::Int(i) => i.to_string(),
                                Cell::Float(v) => fmt_float(v),
                                Cell::Empty => String::new(),
                            })
                        })
                        .collect::<Result<Vec<_>, BundleError>>()?;
                    out.push_str(&cells.join(","));
                    out.push('\n');
                }
                let path = dest.join(name);
                std::fs::write(&path, out)?;
                written.push(path);
            }
        }
        Format::Json => {
            let mut by_name = Map::new();
            for name in tables() {
                let src = bundle.join(name);
                let t = read_table(&src)?;
                let rows = t
                    .rows
                    .iter()
                    .map(|r| {
                        r.iter()
                            .map(|s| {
                                Ok(match parse_cell(s, &src)? {
                                    Cell::Int(i) => json!(i),
                                    Cell::Float(v) => json!(v),
                                    Cell::Empty => Value::Null,
                                })
                            })
                            .collect::<Result<Vec<_>, BundleError>>()
                            .map(Value::Array)
                    })
                    .collect::<Result<Vec<_>, _>>()?;
                let key = name.trim_end_matches(".csv");
                by_name.insert(
                    key.into(),
                    json!({ "comments": t.comments, "columns": t.columns, "rows": rows }),
                );
            }
            let doc = json!({
                "provenance": read_json(&bundle.join(PROVENANCE_FILE))?,
                "residuals": read_json(&bundle.join(RESIDUALS_FILE))?,
                "tables": Value::Object(by_name),
            });
            let path = dest.join("bundle.json");
            write_json(&path, &doc)?;
            written.push(path);
        }
    }
    Ok(written)
}
