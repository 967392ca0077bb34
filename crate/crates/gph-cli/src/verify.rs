//! Quick invariant suites with a machine-readable report.

use std::path::Path;

use gph_core::appendix::{j1_threshold_scan, threshold_bracket};
use gph_core::boardgame::{
    cardinality_growth_fit, enumerate_echelon, product_mixture, verify_collapse, CURVATURE_LIMIT,
};
use gph_core::contraction::{apply_b_full, apply_b_hat, trace_of_b_hat};
use gph_core::grid::GridSpec;
use gph_core::io::write_text;
use gph_core::norms::{alpha_set_check, estimate_av, h_alpha_norm, AvKind};
use gph_core::state::{from_factorized, Closure, HierarchyState, Model, ReprKind, WaveFunction};
use gph_core::transforms::{
    calibrate_pc_convention, pseudoconformal_marginal, pseudoconformal_wave, TimeMap,
};
use gph_core::{GphError, C64};
use serde::Serialize;

use crate::error::CliError;

pub const SUITES: [&str; 5] = [
    "norms",
    "contraction",
    "transforms",
    "boardgame",
    "appendix",
];

#[derive(Serialize)]
struct Check {
    name: String,
    value: f64,
    tolerance: f64,
    pass: bool,
}

#[derive(Serialize)]
struct SuiteReport {
    suite: String,
    pass: bool,
    checks: Vec<Check>,
}

#[derive(Serialize)]
struct Report {
    pass: bool,
    suites: Vec<SuiteReport>,
}

fn at_most(name: &str, value: f64, tolerance: f64) -> Check {
    Check {
        name: name.into(),
        value,
        tolerance,
        pass: value <= tolerance,
    }
}

fn max_abs_diff(a: &[C64], b: &[C64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).norm())
        .fold(0.0, f64::max)
}

fn gaussian(g: &GridSpec) -> Result<WaveFunction, GphError> {
    WaveFunction::gaussian(g, 1.0, 0.7, 0.2)
}

fn norms_suite() -> Result<Vec<Check>, GphError> {
    let g = GridSpec::new(1, 32, 16.0)?;
    let phi = gaussian(&g)?;
    let model = Model::new(2, 1.0, 1)?;
    let st = HierarchyState::factorized(&phi, 3, model, Closure::Zero, ReprKind::Separable)?;
    let h = phi.h_alpha_norm(1.0);
    let mut worst: f64 = 0.0;
    for (i, m) in st.marginals.iter().enumerate() {
        let want = h.powi(2 * (i as i32 + 1));
        worst = worst.max((h_alpha_norm(m, 1.0)? - want).abs() / want);
    }
    let av = estimate_av(&st, AvKind::HAlpha(1.0))?;
    let set_ok = alpha_set_check(2, 2, 0.8) && !alpha_set_check(2, 2, 0.4);
    Ok(vec![
        at_most("factorized H^1 norms equal ‖φ‖^{2k}", worst, 1e-12),
        at_most(
            "Av_{H^1} of factorized data equals ‖φ‖²_{H^1}",
            (av - h * h).abs() / (h * h),
            1e-12,
        ),
        Check {
            name: "admissible α set membership".into(),
            value: set_ok as u8 as f64,
            tolerance: 1.0,
            pass: set_ok,
        },
    ])
}

fn contraction_suite() -> Result<Vec<Check>, GphError> {
    let g = GridSpec::new(1, 16, 8.0)?;
    let phi = gaussian(&g)?;
    let dense = from_factorized(&phi, 2, ReprKind::Dense)?;
    let sep = from_factorized(&phi, 2, ReprKind::Separable)?;
    let a = apply_b_full(&dense, 2)?.to_dense()?;
    let b = apply_b_full(&sep, 2)?.to_dense()?;
    let st = HierarchyState::factorized(
        &phi,
        3,
        Model::new(2, 1.0, 1)?,
        Closure::Factorized,
        ReprKind::Dense,
    )?;
    let bh = apply_b_hat(&st)?;
    Ok(vec![
        at_most("dense and separable B agree", max_abs_diff(&a, &b), 1e-12),
        at_most("trace of B̂Γ vanishes", trace_of_b_hat(&bh), 1e-13),
    ])
}

fn transforms_suite() -> Result<Vec<Check>, GphError> {
    let cg = GridSpec::new(1, 128, 40.0)?;
    let conv = calibrate_pc_convention(&cg, 0.5, 0.5)?;
    let selected = conv.time_map == TimeMap::Ratio && conv.c_phi == -0.25;
    let g = GridSpec::new(1, 16, 12.0)?;
    let phi = gaussian(&g)?;
    let pw = pseudoconformal_wave(&phi, 0.5, 0.3, &conv)?;
    let got =
        pseudoconformal_marginal(&from_factorized(&phi, 2, ReprKind::Dense)?, 0.5, 0.3, &conv)?;
    let want = from_factorized(&pw, 2, ReprKind::Dense)?;
    let sel = conv
        .calibration
        .iter()
        .map(|c| c.residual)
        .fold(f64::INFINITY, f64::min);
    Ok(vec![
        Check {
            name: "calibration selects a unique convention".into(),
            value: sel,
            tolerance: 1e-6,
            pass: selected && sel <= 1e-6,
        },
        at_most(
            "marginal transform factorizes",
            max_abs_diff(&got.to_dense()?, &want.to_dense()?),
            1e-12,
        ),
    ])
}

fn boardgame_suite() -> Result<Vec<Check>, GphError> {
    // nonincreasing length-j sequences over {1..k+1} number C(j+k, j)
    let binom = |n: usize, r: usize| (0..r).fold(1usize, |acc, i| acc * (n - i) / (i + 1));
    let mut mismatches = 0;
    for j in 1..=5 {
        for k in 1..=5 {
            if enumerate_echelon(j, k)?.len() != binom(j + k, j) {
                mismatches += 1;
            }
        }
    }
    let fit = cardinality_growth_fit(2..=12)?;
    let g = GridSpec::new(1, 8, 8.0)?;
    let phis = [
        WaveFunction::gaussian(&g, 1.0, 0.7, 0.0)?,
        WaveFunction::gaussian(&g, 0.6, -1.0, 0.5)?,
    ];
    let st = product_mixture(&phis, &[0.6, 0.4], 5, Model::new(2, 1.0, 1)?)?;
    let c1 = verify_collapse(&st, 1, 1, 8, 0.5)?;
    Ok(vec![
        at_most(
            "echelon counts off the binomial closed form (j, k ≤ 5)",
            mismatches as f64,
            0.0,
        ),
        at_most(
            "echelon growth curvature ratio",
            fit.curvature_ratio,
            CURVATURE_LIMIT,
        ),
        at_most("single-step collapse is exact", c1.discrepancy, 1e-12),
    ])
}

fn appendix_suite() -> Result<Vec<Check>, GphError> {
    let alphas: Vec<f64> = (0..=6).map(|i| 0.35 + 0.05 * i as f64).collect();
    let rows = j1_threshold_scan(2, 2, &alphas, &[8, 16, 32, 64])?;
    let (lo, hi) = threshold_bracket(&rows).unwrap_or((f64::NAN, f64::NAN));
    let pass = lo >= 0.45 - 1e-9 && hi <= 0.55 + 1e-9;
    Ok(vec![Check {
        name: "cubic d=2 J1 threshold bracket within [0.45, 0.55]".into(),
        value: 0.5 * (lo + hi),
        tolerance: 0.05,
        pass,
    }])
}

fn run_suite(name: &str) -> Result<Vec<Check>, GphError> {
    match name {
        "norms" => norms_suite(),
        "contraction" => contraction_suite(),
        "transforms" => transforms_suite(),
        "boardgame" => boardgame_suite(),
        _ => appendix_suite(),
    }
}

pub fn cmd_verify(suites: &[String], out: Option<&Path>) -> Result<(), CliError> {
    for s in suites {
        if !SUITES.contains(&s.as_str()) {
            return Err(CliError::Usage(format!(
                "unknown suite \"{s}\"; known: {}",
                SUITES.join(", ")
            )));
        }
    }
    let names: Vec<&str> = if suites.is_empty() {
        SUITES.to_vec()
    } else {
        SUITES
            .iter()
            .copied()
            .filter(|s| suites.iter().any(|x| x == s))
            .collect()
    };
    let mut report = Report {
        pass: true,
        suites: Vec::new(),
    };
    for name in names {
        let checks = match run_suite(name) {
            Ok(c) => c,
            Err(e) => vec![Check {
                name: format!("suite raised: {e}"),
                value: f64::NAN,
                tolerance: 0.0,
                pass: false,
            }],
        };
        let pass = checks.iter().all(|c| c.pass);
        report.pass &= pass;
        report.suites.push(SuiteReport {
            suite: name.into(),
            pass,
            checks,
        });
    }
    let text =
        serde_json::to_string_pretty(&report).map_err(|e| GphError::Format(e.to_string()))? + "\n";
    match out {
        Some(p) => write_text(p, &text)?,
        None => print!("{text}"),
    }
    if report.pass {
        Ok(())
    } else {
        Err(CliError::Failed("verification failed".into()))
    }
}
