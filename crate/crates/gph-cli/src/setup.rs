//! Model, grid, initial hierarchy and run parameters from a configuration document.

use gph_core::appendix::random_field;
use gph_core::boardgame::product_mixture;
use gph_core::engine::{Backend, RunConfig};
use gph_core::grid::GridSpec;
use gph_core::reduced::ReducedConfig;
use gph_core::state::{Closure, HierarchyState, Model, ReprKind, WaveFunction};
use serde_json::{json, Value};

use gph_core::GphError;

use crate::config::Doc;
use crate::error::CliError;

pub struct Setup {
    pub state: HierarchyState,
    pub backend: Backend,
    pub run: RunConfig,
    /// normalized description of the inputs for the run header
    pub summary: Value,
}

type CResult<T> = std::result::Result<T, CliError>;

/// Capacity and state failures keep their own exit codes; anything else is a config error.
fn anchor(doc: &Doc, section: &str, key: Option<&str>, e: GphError) -> CliError {
    match e {
        GphError::Capacity { .. } | GphError::State(_) => CliError::Core(e),
        e => doc.error(section, key, e.to_string()).into(),
    }
}

pub fn model_and_grid(doc: &Doc) -> CResult<(Model, GridSpec)> {
    let d = doc.usize("model", "d", None)?;
    let p = doc.usize("model", "p", None)?;
    let mu = doc.f64("model", "mu", Some(1.0))?;
    let model = Model::new(p, mu, d).map_err(|e| anchor(doc, "model", Some("p"), e))?;
    let n = doc.usize("grid", "n", None)?;
    let l = doc.f64("grid", "l", None)?;
    let grid = GridSpec::new(d, n, l).map_err(|e| anchor(doc, "grid", Some("n"), e))?;
    Ok((model, grid))
}

fn one_body(doc: &Doc, grid: &GridSpec, kind: &str, seed: u64) -> CResult<WaveFunction> {
    let wrap = |key: &str, e: GphError| anchor(doc, "state", Some(key), e);
    match kind {
        "gaussian" => {
            let sigma = doc.f64("state", "sigma", Some(1.0))?;
            let k0 = doc.f64("state", "k0", Some(0.0))?;
            let x0 = doc.f64("state", "x0", Some(0.0))?;
            WaveFunction::gaussian(grid, sigma, k0, x0).map_err(|e| wrap("sigma", e))
        }
        "random" => {
            let decay = doc.f64("state", "decay", Some(2.0))?;
            let draw = doc.usize("state", "draw", Some(0))? as u64;
            random_field(grid, seed, draw, decay)
                .and_then(|f| f.normalized())
                .map_err(|e| wrap("decay", e))
        }
        _ => unreachable!(),
    }
}

pub fn initial_state(
    doc: &Doc,
    model: Model,
    grid: &GridSpec,
    seed: u64,
) -> CResult<(HierarchyState, Value)> {
    let kind = doc.choice(
        "state",
        "kind",
        Some("gaussian"),
        &["gaussian", "random", "mixture"],
    )?;
    let depth = doc.usize("state", "depth", None)?;
    if depth == 0 {
        return Err(doc
            .error("state", Some("depth"), "must be at least 1")
            .into());
    }
    let closure_kind = doc.choice(
        "closure",
        "kind",
        Some("zero"),
        &["zero", "free", "factorized"],
    )?;
    let repr = match doc
        .choice("state", "repr", Some("dense"), &["dense", "separable"])?
        .as_str()
    {
        "dense" => ReprKind::Dense,
        _ => ReprKind::Separable,
    };
    let closure_for = |phi: Option<&WaveFunction>| -> CResult<Closure> {
        match closure_kind.as_str() {
            "zero" => Ok(Closure::Zero),
            "factorized" => Ok(Closure::Factorized),
            _ => {
                let phi = phi.ok_or_else(|| {
                    CliError::from(doc.error(
                        "closure",
                        Some("kind"),
                        "free closure needs a single-component state",
                    ))
                })?;
                HierarchyState::free_closure_from(phi, depth, model.q())
                    .map_err(|e| anchor(doc, "closure", Some("kind"), e))
            }
        }
    };
    let state = if kind == "mixture" {
        let sigmas = doc.f64_list("state", "sigmas")?;
        let k0s = doc.f64_list("state", "k0s")?;
        let x0s = doc.f64_list("state", "x0s")?;
        let weights = doc.f64_list("state", "weights")?;
        if sigmas.len() != k0s.len() || sigmas.len() != x0s.len() || sigmas.len() != weights.len() {
            return Err(doc
                .error("state", Some("weights"), "component lists differ in length")
                .into());
        }
        let phis = sigmas
            .iter()
            .zip(&k0s)
            .zip(&x0s)
            .map(|((s, k), x)| WaveFunction::gaussian(grid, *s, *k, *x))
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| anchor(doc, "state", Some("sigmas"), e))?;
        let mut st = product_mixture(&phis, &weights, depth, model)
            .map_err(|e| anchor(doc, "state", Some("weights"), e))?;
        st.closure = closure_for(None)?;
        st
    } else {
        let phi = one_body(doc, grid, &kind, seed)?;
        let closure = closure_for(Some(&phi))?;
        HierarchyState::factorized(&phi, depth, model, closure, repr)
            .map_err(|e| anchor(doc, "state", None, e))?
    };
    let summary = json!({ "kind": kind, "depth": depth, "closure": closure_kind });
    Ok((state, summary))
}

pub fn run_config(doc: &Doc) -> CResult<(RunConfig, Backend)> {
    let dt = doc.f64("run", "dt", None)?;
    let steps = match (doc.opt_usize("run", "steps")?, doc.opt_f64("run", "t_end")?) {
        (Some(s), None) => s,
        (None, Some(t)) => {
            let s = (t / dt).round();
            if !(s >= 1.0) || ((s * dt - t).abs() > 1e-9 * t.abs().max(1.0)) {
                return Err(doc
                    .error(
                        "run",
                        Some("t_end"),
                        format!("{t} is not a whole number of steps of {dt}"),
                    )
                    .into());
            }
            s as usize
        }
        _ => {
            return Err(doc
                .error("run", None, "give exactly one of steps and t_end")
                .into())
        }
    };
    let def = RunConfig::default();
    let run = RunConfig {
        dt,
        steps,
        alpha: doc.f64("run", "alpha", Some(def.alpha))?,
        xi1: doc.f64("run", "xi1", Some(def.xi1))?,
        eta: doc.f64("run", "eta", Some(def.eta))?,
        norm_every: doc.usize("run", "norm_every", Some(def.norm_every))?,
        snapshot_every: doc.usize("run", "snapshot_every", Some(def.snapshot_every))?,
        snapshot_levels: doc.usize("run", "snapshot_levels", Some(def.snapshot_levels))?,
        coupling: doc.bool("run", "coupling", def.coupling)?,
    };
    run.validate().map_err(|e| anchor(doc, "run", None, e))?;
    let backend = match doc
        .choice(
            "run",
            "backend",
            Some("auto"),
            &["auto", "dense", "reduced"],
        )?
        .as_str()
    {
        "auto" => Backend::Auto,
        "dense" => Backend::Dense,
        _ => {
            let def = ReducedConfig::default();
            Backend::Reduced(ReducedConfig {
                tol: doc.f64("run", "basis_tol", Some(def.tol))?,
                r_max: doc.usize("run", "basis_rank", Some(def.r_max))?,
                ..def
            })
        }
    };
    Ok((run, backend))
}

pub fn build(doc: &Doc, seed_override: Option<u64>) -> CResult<Setup> {
    let seed = match seed_override {
        Some(s) => {
            doc.usize("", "seed", Some(0))?;
            s
        }
        None => doc.usize("", "seed", Some(0))? as u64,
    };
    let (model, grid) = model_and_grid(doc)?;
    let (state, state_summary) = initial_state(doc, model, &grid, seed)?;
    let (run, backend) = run_config(doc)?;
    doc.finish()?;
    let summary =
        json!({ "model": model, "grid": grid, "state": state_summary, "run": run, "seed": seed });
    Ok(Setup {
        state,
        backend,
        run,
        summary,
    })
}
