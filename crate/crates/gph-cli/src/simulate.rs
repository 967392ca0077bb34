use std::fs;
use std::path::Path;

use gph_core::engine::{prepare, run};
use gph_core::io::{
    content_hash, parse_csv, series_csv, state_hash, to_json, write_json, write_marginal,
    write_text,
};
use serde_json::json;

use crate::config::Doc;
use crate::error::CliError;
use crate::setup::build;
use crate::Format;

pub fn cmd_simulate(
    config: &Path,
    out: &Path,
    seed: Option<u64>,
    threads: usize,
    format: Format,
) -> Result<(), CliError> {
    let doc = Doc::load(config)?;
    let setup = build(&doc, seed)?;
    let horizon = setup.run.dt * setup.run.steps as f64;
    let (state0, basis) = prepare(&setup.state, setup.backend.clone(), horizon)?;
    let traj = run(&state0, &setup.run)?;

    fs::create_dir_all(out)?;
    write_text(&out.join("config.toml"), &doc.text)?;
    let series = series_csv(&traj);
    write_text(&out.join("series.csv"), &series)?;
    if format == Format::Json {
        let (cols, rows) = parse_csv(&series)?;
        write_text(&out.join("series.json"), &(to_json(&cols, &rows)? + "\n"))?;
    }
    let mut snapshot_files = Vec::new();
    if !traj.snapshots.is_empty() {
        let dir = out.join("snapshots");
        fs::create_dir_all(&dir)?;
        let every = setup.run.snapshot_every;
        for (i, snap) in traj.snapshots.iter().enumerate() {
            for m in &snap.marginals {
                let name = format!("step{:06}_k{}.gph", i * every, m.k);
                write_marginal(&dir.join(&name), m)?;
                snapshot_files.push(format!("snapshots/{name}"));
            }
        }
    }
    let header = json!({
        "format": "gph-run/1",
        "inputs": setup.summary,
        "backend": match &basis { Some(_) => "reduced", None => if state0.marginals.iter().any(|m| m.tucker_form().is_some()) { "reduced" } else { "dense" } },
        "basis": basis,
        "threads": threads,
        "steps": setup.run.steps,
        "t_final": traj.final_state.t,
        "hashes": {
            "config": content_hash(doc.text.as_bytes()),
            "initial_state": state_hash(&state0)?,
            "series": content_hash(series.as_bytes()),
        },
        "snapshots": snapshot_files,
    });
    write_json(&out.join("header.json"), &header)?;
    println!(
        "{} steps to t = {}; wrote {}",
        setup.run.steps,
        traj.final_state.t,
        out.display()
    );
    Ok(())
}
