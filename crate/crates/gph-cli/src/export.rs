//! Snapshot and table export.

use std::path::Path;

use gph_core::io::{fmt_f64, parse_csv, read_marginal, to_csv, to_json, write_text};
use gph_core::state::partial_trace;
use gph_core::GphError;

use crate::error::CliError;
use crate::Format;

/// One-particle density ρ(x) = γ^{(1)}(x; x) of a GPH1 snapshot, with grid coordinates.
fn density_table(path: &Path) -> Result<(Vec<String>, Vec<Vec<String>>), GphError> {
    let m = read_marginal(path)?;
    let g1 = if m.k > 1 {
        partial_trace(&m, m.k - 1)?
    } else {
        m
    };
    let grid = g1.grid;
    let npts = grid.points();
    let dense = g1.to_dense()?;
    let axes = ["x", "y", "z"];
    let mut columns: Vec<String> = axes[..grid.d].iter().map(|s| s.to_string()).collect();
    columns.extend(["rho".to_string(), "rho_im".to_string()]);
    let rows = (0..npts)
        .map(|p| {
            let mut r: Vec<String> = grid.unflatten(p)[..grid.d]
                .iter()
                .map(|&i| fmt_f64(grid.coord(i)))
                .collect();
            let v = dense[p * npts + p];
            r.push(fmt_f64(v.re));
            r.push(fmt_f64(v.im));
            r
        })
        .collect();
    Ok((columns, rows))
}

pub fn cmd_export(input: &Path, out: &Path, format: Format) -> Result<(), CliError> {
    let (columns, rows) = match input.extension().and_then(|e| e.to_str()) {
        Some("gph") => density_table(input)?,
        Some("csv") => parse_csv(&std::fs::read_to_string(input)?)?,
        _ => {
            return Err(CliError::Usage(format!(
                "{}: expected a .gph snapshot or a .csv table",
                input.display()
            )))
        }
    };
    let text = match format {
        Format::Csv => to_csv(&columns, &rows),
        Format::Json => to_json(&columns, &rows)? + "\n",
    };
    write_text(out, &text)?;
    Ok(())
}
