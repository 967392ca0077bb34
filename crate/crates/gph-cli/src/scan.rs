//! Parameter sweeps. Each sweep is a list of keys; rows for a key already present in the
//! output table are kept, so an interrupted scan resumes where it stopped.

use std::collections::BTreeMap;
use std::path::Path;

use gph_core::appendix::{iterated_bound_probe, j1_threshold_scan, threshold_bracket, J1Row};
use gph_core::boardgame::echelon_table;
use gph_core::grid::GridSpec;
use gph_core::io::{fmt_f64, parse_csv, to_csv, to_json, write_text};
use gph_core::nls::ground_state_quintic_1d;
use gph_core::transforms::{blowup_rate_fit, pc_soliton_av, PCConvention, TimeMap};
use gph_core::GphError;

use crate::config::Doc;
use crate::error::CliError;
use crate::setup::{initial_state, model_and_grid};
use crate::Format;

type Rows = Vec<Vec<String>>;

struct Sweep<'a> {
    columns: Vec<String>,
    keys: Vec<String>,
    compute: Box<dyn Fn(&str) -> Result<Rows, GphError> + 'a>,
}

fn cols(names: &[&str]) -> Vec<String> {
    names.iter().map(|s| s.to_string()).collect()
}

fn j1_sweep(doc: &Doc) -> Result<Sweep<'static>, CliError> {
    let d = doc.usize("scan", "d", None)?;
    let p = doc.usize("scan", "p", None)?;
    let alphas = doc.f64_list("scan", "alphas")?;
    let lambdas = doc.usize_list("scan", "lambdas")?;
    if alphas.is_empty() {
        return Err(doc.error("scan", Some("alphas"), "empty grid").into());
    }
    if lambdas.len() < 3
        || lambdas.iter().any(|l| *l < 8)
        || lambdas.windows(2).any(|w| w[1] != 2 * w[0])
    {
        return Err(doc
            .error(
                "scan",
                Some("lambdas"),
                "need a doubling ladder of at least three cutoffs, each >= 8",
            )
            .into());
    }
    Ok(Sweep {
        columns: cols(&["alpha", "lambda", "value", "exponent"]),
        keys: alphas.iter().map(|a| fmt_f64(*a)).collect(),
        compute: Box::new(move |key| {
            let a: f64 = key.parse().unwrap();
            let rows = j1_threshold_scan(d, p, &[a], &lambdas)?;
            Ok(rows
                .iter()
                .map(|r| {
                    vec![
                        fmt_f64(r.alpha),
                        r.lambda.to_string(),
                        fmt_f64(r.value),
                        fmt_f64(r.exponent),
                    ]
                })
                .collect())
        }),
    })
}

fn echelon_sweep(doc: &Doc) -> Result<Sweep<'static>, CliError> {
    let jmax = doc.usize("scan", "jmax", None)?;
    let kmax = doc.usize("scan", "kmax", None)?;
    if jmax == 0 || kmax == 0 {
        return Err(doc.error("scan", Some("jmax"), "empty grid").into());
    }
    Ok(Sweep {
        columns: cols(&["j", "k", "count", "c_min"]),
        keys: (1..=jmax).map(|j| j.to_string()).collect(),
        compute: Box::new(move |key| {
            let j: usize = key.parse().unwrap();
            let rows = echelon_table(j, kmax)?;
            Ok(rows
                .iter()
                .filter(|r| r.j == j)
                .map(|r| {
                    vec![
                        r.j.to_string(),
                        r.k.to_string(),
                        r.count.to_string(),
                        fmt_f64(r.c_min),
                    ]
                })
                .collect())
        }),
    })
}

fn blowup_sweep(doc: &Doc) -> Result<Sweep<'static>, CliError> {
    let b = doc.f64("scan", "b", Some(-1.0))?;
    if !(b < 0.0) {
        return Err(doc.error("scan", Some("b"), "blowup needs b < 0").into());
    }
    let n = doc.usize("scan", "n", Some(1024))?;
    let l = doc.f64("scan", "l", Some(48.0))?;
    let n_target = doc.usize("scan", "n_target", Some(2048))?;
    let points = doc.usize("scan", "points", Some(12))?;
    if points == 0 {
        return Err(doc.error("scan", Some("points"), "empty grid").into());
    }
    let src = GridSpec::new(1, n, l).map_err(|e| doc.error("scan", Some("n"), e.to_string()))?;
    let q = ground_state_quintic_1d(&src)?;
    let t_star = -1.0 / b;
    let conv = PCConvention::new(1, TimeMap::Ratio, -0.25);
    // last decade before T*: 1 + bt from 0.1 down to 0.01
    let keys = (0..points)
        .map(|i| {
            let a = 0.1 * 10f64.powf(-(i as f64) / (points.max(2) - 1) as f64);
            fmt_f64((a - 1.0) / b)
        })
        .collect();
    Ok(Sweep {
        columns: cols(&["t", "gap", "av_h1"]),
        keys,
        compute: Box::new(move |key| {
            let t: f64 = key.parse().unwrap();
            let target = GridSpec::new(1, n_target, l * (1.0 + b * t))?;
            let av = pc_soliton_av(&q, b, &[t], &conv, &target)?[0];
            Ok(vec![vec![fmt_f64(t), fmt_f64(t_star - t), fmt_f64(av)]])
        }),
    })
}

fn bound_sweep(doc: &Doc) -> Result<Sweep<'_>, CliError> {
    let seed = doc.usize("", "seed", Some(0))? as u64;
    let (model, grid) = model_and_grid(doc)?;
    let (state, _) = initial_state(doc, model, &grid, seed)?;
    let k = doc.usize("scan", "k", Some(1))?;
    let js = doc.usize_list("scan", "js")?;
    let ts = doc.f64_list("scan", "ts")?;
    let alpha = doc.f64("scan", "alpha", Some(1.0))?;
    let qn = doc.usize("scan", "qn", Some(8))?;
    if js.is_empty() || ts.is_empty() {
        return Err(doc.error("scan", Some("ts"), "empty grid").into());
    }
    Ok(Sweep {
        columns: cols(&["j", "k", "t", "value", "exponent"]),
        keys: js.iter().map(|j| j.to_string()).collect(),
        compute: Box::new(move |key| {
            let j: usize = key.parse().unwrap();
            let probe = iterated_bound_probe(&state, k, j, &ts, alpha, qn)?;
            Ok(probe
                .rows
                .iter()
                .map(|r| {
                    vec![
                        j.to_string(),
                        r.k.to_string(),
                        fmt_f64(r.t),
                        fmt_f64(r.value),
                        fmt_f64(probe.exponent),
                    ]
                })
                .collect())
        }),
    })
}

/// Keeps complete groups of an existing table whose columns match.
fn existing_groups(out: &Path, columns: &[String]) -> BTreeMap<String, Rows> {
    let mut groups: BTreeMap<String, Rows> = BTreeMap::new();
    let Ok(text) = std::fs::read_to_string(out) else {
        return groups;
    };
    let Ok((c, rows)) = parse_csv(&text) else {
        return groups;
    };
    if c != columns {
        return groups;
    }
    for r in rows {
        groups.entry(r[0].clone()).or_default().push(r);
    }
    groups
}

fn summary(kind: &str, rows: &Rows) -> Option<String> {
    let num = |r: &Vec<String>, i: usize| r[i].parse::<f64>().unwrap_or(f64::NAN);
    match kind {
        "j1" => {
            let j1: Vec<J1Row> = rows
                .iter()
                .map(|r| J1Row {
                    alpha: num(r, 0),
                    lambda: r[1].parse().unwrap_or(0),
                    value: num(r, 2),
                    exponent: num(r, 3),
                })
                .collect();
            threshold_bracket(&j1).map(|(a, b)| format!("threshold bracket ({a}, {b})"))
        }
        "blowup" => {
            let ts: Vec<f64> = rows.iter().map(|r| num(r, 0)).collect();
            let t_star = rows.first().map(|r| num(r, 0) + num(r, 1))?;
            let av: Vec<f64> = rows.iter().map(|r| num(r, 2)).collect();
            blowup_rate_fit(&ts, &av, t_star)
                .ok()
                .map(|f| format!("blowup slope {} over {} points", f.slope, f.points))
        }
        _ => None,
    }
}

pub fn cmd_scan(config: &Path, out: &Path, format: Format) -> Result<(), CliError> {
    let doc = Doc::load(config)?;
    let kind = doc.choice("scan", "kind", None, &["j1", "echelon", "blowup", "bound"])?;
    let sweep = match kind.as_str() {
        "j1" => j1_sweep(&doc)?,
        "echelon" => echelon_sweep(&doc)?,
        "blowup" => blowup_sweep(&doc)?,
        _ => bound_sweep(&doc)?,
    };
    doc.finish()?;
    let mut have = if format == Format::Csv {
        existing_groups(out, &sweep.columns)
    } else {
        BTreeMap::new()
    };
    let mut rows = Rows::new();
    let mut computed = 0;
    for key in &sweep.keys {
        let group = match have.remove(key) {
            Some(g) => g,
            None => {
                computed += 1;
                let g = (sweep.compute)(key)?;
                rows.extend(g);
                // checkpoint so an interrupted scan can resume
                if format == Format::Csv {
                    let partial: Rows = rows
                        .iter()
                        .chain(have.values().flatten())
                        .cloned()
                        .collect();
                    write_text(out, &to_csv(&sweep.columns, &partial))?;
                }
                continue;
            }
        };
        rows.extend(group);
    }
    let text = match format {
        Format::Csv => to_csv(&sweep.columns, &rows),
        Format::Json => to_json(&sweep.columns, &rows)? + "\n",
    };
    write_text(out, &text)?;
    println!(
        "{kind}: {} rows ({} groups computed, {} reused)",
        rows.len(),
        computed,
        sweep.keys.len() - computed
    );
    if let Some(s) = summary(&kind, &rows) {
        println!("{s}");
    }
    Ok(())
}
