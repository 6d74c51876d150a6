//! CSV readers and writers for the command-line file formats.

use std::fmt::Write as _;
use std::path::Path;

use anyhow::{bail, Context, Result};
use dynident_core::dynamics::{DynamicParameters, JointState};
use dynident_core::kinematics::RobotModel;
use dynident_core::sim::StaticSample;
use nalgebra::DVector;

pub fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

pub fn read_params(model: &RobotModel, path: &Path) -> Result<DynamicParameters> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    DynamicParameters::from_csv(model, &text).with_context(|| format!("parsing parameters {}", path.display()))
}

/// Numeric rows of a headed CSV, each exactly `width` wide.
fn read_table(path: &Path, width: usize) -> Result<Vec<Vec<f64>>> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .with_context(|| format!("reading {}", path.display()))?;
    let header = rdr.headers()?.len();
    if header != width {
        bail!("{}: expected {width} columns, header has {header}", path.display());
    }
    let mut rows = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.with_context(|| format!("{}: row {}", path.display(), i + 2))?;
        let row: Vec<f64> = rec
            .iter()
            .map(|f| f.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .with_context(|| format!("{}: row {} is not numeric", path.display(), i + 2))?;
        if row.iter().any(|v| !v.is_finite()) {
            bail!("{}: row {} has a non-finite value", path.display(), i + 2);
        }
        rows.push(row);
    }
    if rows.is_empty() {
        bail!("{}: no data rows", path.display());
    }
    Ok(rows)
}

pub fn read_rows(path: &Path, dof: usize) -> Result<Vec<DVector<f64>>> {
    Ok(read_table(path, dof)?.into_iter().map(DVector::from_vec).collect())
}

pub fn read_static_samples(path: &Path, dof: usize) -> Result<Vec<StaticSample>> {
    Ok(read_table(path, 2 * dof)?
        .into_iter()
        .map(|r| StaticSample {
            q: DVector::from_row_slice(&r[..dof]),
            tau: DVector::from_row_slice(&r[dof..]),
        })
        .collect())
}

pub fn read_states(path: &Path, dof: usize) -> Result<Vec<(f64, JointState)>> {
    Ok(read_table(path, 1 + 3 * dof)?
        .into_iter()
        .map(|r| {
            let v = |k: usize| DVector::from_row_slice(&r[1 + k * dof..1 + (k + 1) * dof]);
            (r[0], JointState::new(v(0), v(1), v(2)))
        })
        .collect())
}

fn header(out: &mut String, first: Option<&str>, groups: &[&str], dof: usize) {
    let mut cols: Vec<String> = first.into_iter().map(String::from).collect();
    for g in groups {
        cols.extend((1..=dof).map(|i| format!("{g}{i}")));
    }
    out.push_str(&cols.join(","));
    out.push('\n');
}

fn row(out: &mut String, first: Option<f64>, groups: &[&DVector<f64>]) {
    let mut sep = "";
    if let Some(t) = first {
        let _ = write!(out, "{t}");
        sep = ",";
    }
    for g in groups {
        for v in g.iter() {
            let _ = write!(out, "{sep}{v}");
            sep = ",";
        }
    }
    out.push('\n');
}

pub fn states_csv(dof: usize, states: &[(f64, JointState)]) -> String {
    let mut out = String::new();
    header(&mut out, Some("t"), &["q", "qd", "qdd"], dof);
    for (t, s) in states {
        row(&mut out, Some(*t), &[&s.q, &s.qd, &s.qdd]);
    }
    out
}

pub fn pairs_csv(dof: usize, name: &str, rows: &[(DVector<f64>, DVector<f64>)]) -> String {
    let mut out = String::new();
    header(&mut out, None, &["q", name], dof);
    for (q, tau) in rows {
        row(&mut out, None, &[q, tau]);
    }
    out
}

pub fn torque_csv(dof: usize, rows: &[(f64, DVector<f64>)]) -> String {
    let mut out = String::new();
    header(&mut out, Some("t"), &["tau"], dof);
    for (t, tau) in rows {
        row(&mut out, Some(*t), &[tau]);
    }
    out
}
