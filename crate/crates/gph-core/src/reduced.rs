//! Reduced one-body bases for hierarchy evolution: mean-field pilot, POD, projection.

use std::sync::Arc;

use num_complex::Complex64 as C64;
use serde::{Deserialize, Serialize};

use crate::contraction::TuckerCtx;
use crate::error::{GphError, Result};
use crate::grid::{free_propagate, propagate_fn, GridSpec};
use crate::linalg::{self, ZERO};
use crate::state::{
    check_dense, Closure, CoreData, DensityMatrix, HierarchyState, Model, ReducedBasis, Repr,
    TuckerForm,
};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReducedConfig {
    /// relative singular-value cutoff for the POD
    pub tol: f64,
    pub r_max: usize,
    pub pilot_dt: f64,
    pub max_snapshots: usize,
}

impl Default for ReducedConfig {
    fn default() -> Self {
        ReducedConfig {
            tol: 1e-11,
            r_max: 20,
            pilot_dt: 5e-4,
            max_snapshots: 200,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct BasisInfo {
    pub rank: usize,
    pub cutoff_ratio: f64,
    pub next_ratio: f64,
    pub snapshots: usize,
    /// ‖γ₁ − Pγ₁P‖ / ‖γ₁‖ at t = 0
    pub projection_defect: f64,
}

/// One-body mean-field flow i∂γ = [−Δ + μρ^q, γ] sampled along [0, horizon].
pub fn mean_field_pilot(
    g1: &DensityMatrix,
    model: Model,
    horizon: f64,
    dt: f64,
    max_snapshots: usize,
) -> Result<Vec<(f64, Vec<C64>)>> {
    if g1.k != 1 {
        return Err(GphError::Shape(
            "pilot needs a one-particle marginal".into(),
        ));
    }
    let grid = g1.grid;
    let npts = grid.points();
    let q = model.q() as i32;
    let steps = ((horizon / dt).ceil() as usize).max(1);
    let dt = horizon / steps as f64;
    let stride = steps.div_ceil(max_snapshots.max(1)).max(1);
    let mut g = DensityMatrix::from_dense_flags(1, grid, g1.to_dense()?, true, true);
    let mut snaps = vec![(0.0, g.to_dense()?)];
    let coupling = |m: &DensityMatrix| -> Vec<C64> {
        let d = m.dense().expect("dense pilot");
        let rho: Vec<f64> = (0..npts).map(|x| d[x * npts + x].re.powi(q)).collect();
        let c = C64::new(0.0, -model.mu);
        let mut out = vec![ZERO; npts * npts];
        for x in 0..npts {
            for y in 0..npts {
                out[x * npts + y] = c * (rho[x] - rho[y]) * d[x * npts + y];
            }
        }
        out
    };
    for s in 1..=steps {
        let half = free_propagate(&g, 0.5 * dt)?;
        let f1 = coupling(&half);
        let mut mid = half.dense().unwrap().clone();
        linalg::axpy(&mut mid, C64::new(0.5 * dt, 0.0), &f1);
        let f2 = coupling(&DensityMatrix::from_dense_flags(1, grid, mid, true, true));
        let mut next = half.dense().unwrap().clone();
        linalg::axpy(&mut next, C64::new(dt, 0.0), &f2);
        g = free_propagate(
            &DensityMatrix::from_dense_flags(1, grid, next, true, true),
            0.5 * dt,
        )?;
        if s % stride == 0 || s == steps {
            snaps.push((s as f64 * dt, g.dense().unwrap().clone()));
        }
    }
    Ok(snaps)
}

/// POD basis from pilot snapshots (eigenfunctions and their ρ^q images, pulled back
/// to the interaction frame) plus `extra` frame functions.
pub fn pilot_basis(
    state: &HierarchyState,
    horizon: f64,
    cfg: &ReducedConfig,
    extra: &[Vec<C64>],
) -> Result<(ReducedBasis, BasisInfo)> {
    let grid = state.grid();
    let npts = grid.points();
    let q = state.model.q() as i32;
    let snaps = mean_field_pilot(
        &state.marginals[0],
        state.model,
        horizon.max(cfg.pilot_dt),
        cfg.pilot_dt,
        cfg.max_snapshots,
    )?;
    let sq = grid.cell().sqrt();
    let mut cols: Vec<Vec<C64>> = Vec::new();
    for (t, g) in &snaps {
        let rho: Vec<f64> = (0..npts).map(|x| g[x * npts + x].re.powi(q)).collect();
        let (w, v) = linalg::herm_eig(npts, g);
        let wmax = w.iter().cloned().fold(0.0, f64::max);
        for (wi, vi) in w.iter().zip(&v) {
            if *wi <= 1e-9 * wmax {
                continue;
            }
            // eigenvectors are unit in the plain l² sense; rescale to carry the weight
            let s = (wi / grid.cell()).sqrt();
            let f: Vec<C64> = vi.iter().map(|x| x * s).collect();
            let rf: Vec<C64> = f.iter().zip(&rho).map(|(a, b)| a * b).collect();
            cols.push(propagate_fn(&grid, &f, -t));
            cols.push(propagate_fn(&grid, &rf, -t));
        }
    }
    cols.extend(extra.iter().cloned());
    let ncols = cols.len();
    let a = nalgebra::DMatrix::from_fn(npts, ncols, |i, j| cols[j][i] * sq);
    let svd = a.svd(true, false);
    let u = svd
        .u
        .ok_or_else(|| GphError::Numeric("POD failed".into()))?;
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&i, &j| svd.singular_values[j].total_cmp(&svd.singular_values[i]));
    let s: Vec<f64> = order.iter().map(|&i| svd.singular_values[i]).collect();
    let s0 = s[0];
    let rank = s
        .iter()
        .take_while(|v| **v > cfg.tol * s0)
        .count()
        .clamp(1, cfg.r_max.min(npts));
    let mut modes = Vec::with_capacity(rank * npts);
    for &c in order.iter().take(rank) {
        modes.extend(u.column(c).iter().map(|v| v / sq));
    }
    let basis = ReducedBasis::new(grid, rank, modes)?;
    let defect = {
        let g1 = &state.marginals[0];
        let ctx = TuckerCtx::new(&basis, state.t);
        let core = ctx.project_dense(&g1.to_dense()?, 1);
        let back = DensityMatrix::tucker(
            1,
            TuckerForm {
                basis: Arc::new(basis.clone()),
                tau: state.t,
                core: CoreData::Full(core),
            },
            true,
            true,
        );
        back.l2_distance(g1)? / g1.l2_norm().max(f64::MIN_POSITIVE)
    };
    let info = BasisInfo {
        rank,
        cutoff_ratio: s[rank - 1] / s0,
        next_ratio: s.get(rank).map_or(0.0, |v| v / s0),
        snapshots: snaps.len(),
        projection_defect: defect,
    };
    Ok((basis, info))
}

/// Galerkin projection of every marginal onto `basis` (basis time = state time).
pub fn to_reduced(state: &HierarchyState, basis: Arc<ReducedBasis>) -> Result<HierarchyState> {
    if !basis.grid.same(&state.grid()) {
        return Err(GphError::Shape("basis grid differs from state grid".into()));
    }
    let ctx = TuckerCtx::new(&basis, state.t);
    let marginals = state
        .marginals
        .iter()
        .map(|m| {
            let core = match &m.repr {
                Repr::Separable(t) => CoreData::Kron(ctx.project_separable(t, m.k)),
                Repr::Dense(d) => CoreData::Full(ctx.project_dense(d, m.k)),
                Repr::Tucker(_) => {
                    return Err(GphError::Shape("marginal is already reduced".into()))
                }
            };
            let form = TuckerForm {
                basis: basis.clone(),
                tau: state.t,
                core,
            };
            Ok(DensityMatrix::tucker(m.k, form, m.hermitian, m.symmetric))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(HierarchyState {
        marginals,
        ..state.clone()
    })
}

/// Dense copy of every marginal (subject to the memory budget).
pub fn to_dense_state(state: &HierarchyState) -> Result<HierarchyState> {
    let marginals = state
        .marginals
        .iter()
        .map(|m| {
            check_dense(&m.grid, m.k)?;
            Ok(DensityMatrix::from_dense_flags(
                m.k,
                m.grid,
                m.to_dense()?,
                m.hermitian,
                m.symmetric,
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(HierarchyState {
        marginals,
        ..state.clone()
    })
}

/// Frame functions carried by separable marginals and free-closure tops.
pub fn factor_functions(state: &HierarchyState) -> Vec<Vec<C64>> {
    let grid: GridSpec = state.grid();
    let mut out = Vec::new();
    let mut push = |m: &DensityMatrix, t0: f64| {
        if let Repr::Separable(terms) = &m.repr {
            for t in terms {
                for f in t.f.iter().chain(&t.g) {
                    out.push(propagate_fn(&grid, f, -t0));
                }
            }
        }
    };
    for m in &state.marginals {
        push(m, state.t);
    }
    if let Closure::Free { t0, tops } = &state.closure {
        for m in tops {
            push(m, *t0);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::state::{ReprKind, WaveFunction};

    #[test]
    fn pilot_basis_spans_initial_state() {
        let g = GridSpec::new(1, 32, 12.0).unwrap();
        let phi = WaveFunction::gaussian(&g, 1.0, 0.5, 0.0).unwrap();
        let model = Model::new(2, 1.0, 1).unwrap();
        let st =
            HierarchyState::factorized(&phi, 2, model, Closure::Factorized, ReprKind::Separable)
                .unwrap();
        let (b, info) = pilot_basis(&st, 0.05, &ReducedConfig::default(), &[]).unwrap();
        assert!(info.projection_defect < 1e-10, "{info:?}");
        assert!(b.rank >= 2 && b.rank <= 20);
        let red = to_reduced(&st, Arc::new(b)).unwrap();
        for (a, m) in red.marginals.iter().zip(&st.marginals) {
            assert!(a.l2_distance(m).unwrap() < 1e-9);
            assert!((a.compute_trace() - 1.0).norm() < 1e-10);
        }
    }

    #[test]
    fn mean_field_pilot_tracks_nls() {
        let g = GridSpec::new(1, 32, 12.0).unwrap();
        let phi = WaveFunction::gaussian(&g, 1.0, 0.5, 0.0).unwrap();
        let model = Model::new(2, 1.0, 1).unwrap();
        let g1 = crate::state::from_factorized(&phi, 1, ReprKind::Dense).unwrap();
        let snaps = mean_field_pilot(&g1, model, 0.1, 1e-3, 10).unwrap();
        let tr = crate::nls::split_step(&phi, 2, 1.0, 1e-3, 100).unwrap();
        let want = crate::state::from_factorized(&tr.states[100], 1, ReprKind::Dense).unwrap();
        let (t, last) = snaps.last().unwrap();
        assert!((t - 0.1).abs() < 1e-12);
        assert!(linalg::dist(last, want.dense().unwrap()) * g.cell() < 1e-4);
    }
}
