//! Time evolution of truncated hierarchies: direct split-step, Picard fixed point, Duhamel iterates.

use std::sync::Arc;

use num_complex::Complex64 as C64;
use serde::{Deserialize, Serialize};

use crate::contraction::{apply_b_full, b_hat_unchecked, trace_of_b_hat};
use crate::error::{arg, GphError, Result};
use crate::grid::{free_propagate, free_propagate_owned};
use crate::norms::{h_alpha_norm, trapezoid, NormReport};
use crate::quad::gauss_legendre;
use crate::reduced::{
    factor_functions, pilot_basis, to_dense_state, to_reduced, BasisInfo, ReducedConfig,
};
use crate::state::{check_admissible, Closure, DensityMatrix, HierarchyState, Repr};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Backend {
    /// dense when level K fits `AUTO_DENSE_ELEMS`, reduced otherwise
    Auto,
    Dense,
    Reduced(ReducedConfig),
}

pub const AUTO_DENSE_ELEMS: u128 = 1 << 22;

/// Re-express Γ for evolution; returns basis diagnostics for reduced runs.
pub fn prepare(
    state: &HierarchyState,
    backend: Backend,
    horizon: f64,
) -> Result<(HierarchyState, Option<BasisInfo>)> {
    if matches!(state.closure, Closure::Factorized) {
        state.check_rank_one()?;
    }
    let backend = match backend {
        Backend::Auto => {
            let elems = (state.grid().points() as u128).pow(2 * state.depth() as u32);
            if elems <= AUTO_DENSE_ELEMS {
                Backend::Dense
            } else {
                Backend::Reduced(ReducedConfig::default())
            }
        }
        b => b,
    };
    match backend {
        Backend::Dense => Ok((to_dense_state(state)?, None)),
        Backend::Reduced(cfg) => {
            if state.marginals.iter().any(|m| m.tucker_form().is_some()) {
                return Ok((state.clone(), None));
            }
            let (basis, info) = pilot_basis(state, horizon, &cfg, &factor_functions(state))?;
            Ok((to_reduced(state, Arc::new(basis))?, Some(info)))
        }
        Backend::Auto => unreachable!(),
    }
}

/// Pin the basis time of reduced marginals to `t` (free flow is exact in the frame).
fn retime(mut m: DensityMatrix, t: f64) -> DensityMatrix {
    if let Repr::Tucker(tk) = &mut m.repr {
        tk.tau = t;
    }
    m
}

fn set_time(mut state: HierarchyState, t: f64) -> HierarchyState {
    state.t = t;
    state.marginals = state.marginals.into_iter().map(|m| retime(m, t)).collect();
    state
}

pub fn free_state(state: &HierarchyState, t: f64) -> Result<HierarchyState> {
    free_state_owned(state.clone(), t)
}

fn free_state_owned(state: HierarchyState, t: f64) -> Result<HierarchyState> {
    let t1 = state.t + t;
    let HierarchyState {
        model,
        closure,
        marginals,
        ..
    } = state;
    let marginals = marginals
        .into_iter()
        .map(|m| free_propagate_owned(m, t).map(|x| retime(x, t1)))
        .collect::<Result<Vec<_>>>()?;
    Ok(HierarchyState {
        model,
        closure,
        t: t1,
        marginals,
    })
}

/// Γ += c·F in place, keeping Γ's structural flags.
fn combine_mut(state: &mut HierarchyState, f: &[DensityMatrix], c: C64) -> Result<()> {
    for (m, x) in state.marginals.iter_mut().zip(f) {
        let (h, s) = (m.hermitian, m.symmetric);
        m.axpy_mut(c, x)?;
        m.hermitian = h;
        m.symmetric = s;
    }
    Ok(())
}

/// One Strang step; also returns B̂Γ sampled at the midpoint stage.
pub fn step_with(
    state: &HierarchyState,
    dt: f64,
    coupling: bool,
) -> Result<(HierarchyState, Option<Vec<DensityMatrix>>)> {
    step_owned(state.clone(), dt, coupling)
}

fn step_owned(
    state: HierarchyState,
    dt: f64,
    coupling: bool,
) -> Result<(HierarchyState, Option<Vec<DensityMatrix>>)> {
    if dt == 0.0 {
        return Ok((state, None));
    }
    let t1 = state.t + dt;
    let mu = state.model.mu;
    let mut s = free_state_owned(state, 0.5 * dt)?;
    if !coupling || mu == 0.0 {
        return Ok((set_time(free_state_owned(s, 0.5 * dt)?, t1), None));
    }
    // midpoint rule in place: s + dt/2·f1, then + dt·f2 − dt/2·f1
    let c = C64::new(0.0, -mu);
    let f1 = b_hat_unchecked(&s)?;
    combine_mut(&mut s, &f1, c * (0.5 * dt))?;
    let f2 = b_hat_unchecked(&s)?;
    let corr = f2
        .iter()
        .zip(&f1)
        .map(|(a, b)| a.add_scaled(C64::new(-0.5, 0.0), b))
        .collect::<Result<Vec<_>>>()?;
    drop(f1);
    combine_mut(&mut s, &corr, c * dt)?;
    let out = free_state_owned(s, 0.5 * dt)?;
    Ok((set_time(out, t1), Some(f2)))
}

pub fn step_direct(state: &HierarchyState, dt: f64) -> Result<HierarchyState> {
    Ok(step_with(state, dt, true)?.0)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunConfig {
    pub dt: f64,
    pub steps: usize,
    pub alpha: f64,
    pub xi1: f64,
    pub eta: f64,
    /// H^α norms every this many steps (0: first and last only)
    pub norm_every: usize,
    /// keep a state snapshot every this many steps (0: none)
    pub snapshot_every: usize,
    /// levels kept in snapshots (0: all)
    pub snapshot_levels: usize,
    pub coupling: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            dt: 1e-3,
            steps: 100,
            alpha: 1.0,
            xi1: 0.5,
            eta: 0.25,
            norm_every: 10,
            snapshot_every: 0,
            snapshot_levels: 0,
            coupling: true,
        }
    }
}

impl RunConfig {
    pub fn xi2(&self) -> f64 {
        self.eta * self.xi1
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return arg(format!("dt = {} must be positive", self.dt));
        }
        if !(0.0 < self.eta && self.eta <= 1.0 && 0.0 < self.xi1 && self.xi1 < 1.0) {
            return arg(format!(
                "need 0 < xi2 = eta·xi1 <= xi1 < 1 (xi1 = {}, eta = {})",
                self.xi1, self.eta
            ));
        }
        if self.alpha < 0.0 {
            return arg("alpha must be nonnegative");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct StepRecord {
    pub t: f64,
    pub traces: Vec<f64>,
    pub h_norms: Option<Vec<f64>>,
    pub norm_xi1: Option<f64>,
    pub norm_xi2: Option<f64>,
    pub admissibility: Vec<f64>,
    pub hermiticity: f64,
    /// ‖B̂Γ‖ at ξ₁ from the step's midpoint evaluation (t = 0: initial state)
    pub b_hat_norm: f64,
    pub b_hat_trace: f64,
}

#[derive(Clone, Debug)]
pub struct Trajectory {
    pub dt: f64,
    pub times: Vec<f64>,
    pub records: Vec<StepRecord>,
    pub snapshots: Vec<HierarchyState>,
    pub final_state: HierarchyState,
}

fn level_norms(levels: &[DensityMatrix], alpha: f64) -> Result<Vec<f64>> {
    levels.iter().map(|m| h_alpha_norm(m, alpha)).collect()
}

fn record(
    state: &HierarchyState,
    bh: &[DensityMatrix],
    with_norms: bool,
    cfg: &RunConfig,
) -> Result<StepRecord> {
    let h_norms = if with_norms {
        Some(level_norms(&state.marginals, cfg.alpha)?)
    } else {
        None
    };
    let norm_at = |xi: f64| {
        h_norms
            .as_ref()
            .map(|v| NormReport::from_values(v.clone(), xi).total)
    };
    let bn = NormReport::from_values(level_norms(bh, cfg.alpha)?, cfg.xi1).total;
    Ok(StepRecord {
        t: state.t,
        traces: state
            .marginals
            .iter()
            .map(|m| m.compute_trace().re)
            .collect(),
        norm_xi1: norm_at(cfg.xi1),
        norm_xi2: norm_at(cfg.xi2()),
        h_norms: h_norms.clone(),
        admissibility: check_admissible(state, f64::INFINITY)?.residuals,
        hermiticity: state
            .marginals
            .iter()
            .map(|m| m.hermiticity_residual())
            .fold(0.0, f64::max),
        b_hat_norm: bn,
        b_hat_trace: trace_of_b_hat(bh),
    })
}

fn snapshot(state: &HierarchyState, levels: usize) -> HierarchyState {
    let mut s = state.clone();
    if levels > 0 && levels < s.marginals.len() {
        s.marginals.truncate(levels);
    }
    s
}

/// Direct integration for `cfg.steps` steps of size `cfg.dt` from a prepared state.
pub fn run(state0: &HierarchyState, cfg: &RunConfig) -> Result<Trajectory> {
    cfg.validate()?;
    if matches!(state0.closure, Closure::Factorized) {
        state0.check_rank_one()?;
    }
    let mut state = state0.clone();
    let bh0 = if cfg.coupling {
        b_hat_unchecked(&state)?
    } else {
        zero_like(&state)?
    };
    let mut records = vec![record(&state, &bh0, true, cfg)?];
    let mut snapshots = Vec::new();
    if cfg.snapshot_every > 0 {
        snapshots.push(snapshot(&state, cfg.snapshot_levels));
    }
    let mut times = vec![state.t];
    for s in 1..=cfg.steps {
        let (next, bh) = step_owned(state, cfg.dt, cfg.coupling)?;
        state = set_time(next, state0.t + s as f64 * cfg.dt);
        let bh = match bh {
            Some(b) => b,
            None => zero_like(&state)?,
        };
        let with_norms = s == cfg.steps || (cfg.norm_every > 0 && s % cfg.norm_every == 0);
        records.push(record(&state, &bh, with_norms, cfg)?);
        times.push(state.t);
        if cfg.snapshot_every > 0 && s % cfg.snapshot_every == 0 {
            snapshots.push(snapshot(&state, cfg.snapshot_levels));
        }
    }
    Ok(Trajectory {
        dt: cfg.dt,
        times,
        records,
        snapshots,
        final_state: state,
    })
}

fn zero_like(state: &HierarchyState) -> Result<Vec<DensityMatrix>> {
    state
        .marginals
        .iter()
        .map(|m| Ok(m.scaled(C64::new(0.0, 0.0))))
        .collect()
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PicardConfig {
    pub t_end: f64,
    pub m: usize,
    pub max_iters: usize,
    pub tol: f64,
    pub xi1: f64,
    pub eta: f64,
    pub alpha: f64,
}

impl PicardConfig {
    pub fn xi2(&self) -> f64 {
        self.eta * self.xi1
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.t_end > 0.0) || self.m == 0 {
            return arg("need T > 0 and M > 0");
        }
        if !(self.tol > 0.0) {
            return arg("tol must be positive");
        }
        if !(0.0 < self.eta && self.eta <= 1.0 && 0.0 < self.xi1 && self.xi1 < 1.0) {
            return arg(format!(
                "need 0 < xi2 = eta·xi1 <= xi1 < 1 (xi1 = {}, eta = {})",
                self.xi1, self.eta
            ));
        }
        Ok(())
    }

    pub fn times(&self) -> Vec<f64> {
        (0..=self.m)
            .map(|i| self.t_end * i as f64 / self.m as f64)
            .collect()
    }
}

#[derive(Clone, Debug)]
pub struct XiSolution {
    pub times: Vec<f64>,
    pub xi: Vec<Vec<DensityMatrix>>,
    /// ‖Ξ_{n+1} − Ξ_n‖ in discrete L¹_t ℋ^α_{ξ₂}
    pub distances: Vec<f64>,
    /// ratios of successive distances
    pub factors: Vec<f64>,
}

/// Stream Γ(t_i) = e^{it_iΔ̂}Γ₀ − iμ Σ trapezoid e^{i(t_i−s)Δ̂}Ξ(s) through `visit`.
fn stream_gamma(
    g0: &HierarchyState,
    times: &[f64],
    xi: Option<&[Vec<DensityMatrix>]>,
    mut visit: impl FnMut(usize, &HierarchyState) -> Result<()>,
) -> Result<()> {
    let c = C64::new(0.0, -g0.model.mu);
    let mut acc = set_time(g0.clone(), times[0]);
    for (i, &t) in times.iter().enumerate() {
        if i > 0 {
            let h = t - times[i - 1];
            let mut next = set_time(free_state_owned(acc, h)?, t);
            if let Some(xi) = xi {
                let prev: Vec<DensityMatrix> = xi[i - 1]
                    .iter()
                    .map(|m| free_propagate(m, h).map(|x| retime(x, t)))
                    .collect::<Result<_>>()?;
                combine_mut(&mut next, &prev, c * (0.5 * h))?;
                combine_mut(&mut next, &xi[i], c * (0.5 * h))?;
            }
            acc = next;
        }
        visit(i, &acc)?;
    }
    Ok(())
}

fn xi_distance(
    a: &[DensityMatrix],
    b: Option<&[DensityMatrix]>,
    xi: f64,
    alpha: f64,
) -> Result<f64> {
    let mut s = 0.0;
    let mut w = 1.0;
    for (k, m) in a.iter().enumerate() {
        w *= xi;
        let d = match b {
            Some(b) => m.add_scaled(C64::new(-1.0, 0.0), &b[k])?,
            None => m.clone(),
        };
        s += w * h_alpha_norm(&d, alpha)?;
    }
    Ok(s)
}

/// Picard iteration Ξ_{n+1}(t_i) = B̂Γ_n(t_i), Γ_n integrated from Ξ_n, Ξ_0 = 0.
pub fn solve_xi_fixed_point(g0: &HierarchyState, cfg: &PicardConfig) -> Result<XiSolution> {
    cfg.validate()?;
    if matches!(g0.closure, Closure::Factorized) {
        g0.check_rank_one()?;
    }
    let times: Vec<f64> = cfg.times().iter().map(|t| g0.t + t).collect();
    let mut old: Option<Vec<Vec<DensityMatrix>>> = None;
    let mut distances = Vec::new();
    let mut factors = Vec::new();
    for _ in 0..cfg.max_iters {
        let mut new = Vec::with_capacity(times.len());
        let mut dists = Vec::with_capacity(times.len());
        stream_gamma(g0, &times, old.as_deref(), |i, g| {
            let x = b_hat_unchecked(g)?;
            dists.push(xi_distance(
                &x,
                old.as_ref().map(|o| &o[i][..]),
                cfg.xi2(),
                cfg.alpha,
            )?);
            new.push(x);
            Ok(())
        })?;
        let d = trapezoid(&times, &dists)?;
        if let Some(prev) = distances.last() {
            factors.push(if *prev > 0.0 { d / prev } else { 0.0 });
        }
        distances.push(d);
        old = Some(new);
        if d < cfg.tol {
            return Ok(XiSolution {
                times,
                xi: old.unwrap(),
                distances,
                factors,
            });
        }
        if !d.is_finite() {
            break;
        }
    }
    Err(GphError::NonConvergence { factors, distances })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Keep {
    All,
    Final,
    Every(usize),
}

/// Γ(t_i) from Γ₀ and Ξ samples on the same grid.
pub fn integrate_gamma_from_xi(
    g0: &HierarchyState,
    times: &[f64],
    xi: &[Vec<DensityMatrix>],
    keep: Keep,
) -> Result<Vec<HierarchyState>> {
    if times.len() != xi.len() || times.is_empty() {
        return arg("Xi samples do not match the time grid");
    }
    if xi.iter().any(|x| x.len() != g0.depth()) {
        return arg("Xi samples do not match the hierarchy depth");
    }
    if (times[0] - g0.t).abs() > 1e-14 {
        return arg("time grid must start at the initial time");
    }
    let last = times.len() - 1;
    let mut out = Vec::new();
    stream_gamma(g0, times, Some(xi), |i, g| {
        let take = match keep {
            Keep::All => true,
            Keep::Final => i == last,
            Keep::Every(s) => i % s.max(1) == 0 || i == last,
        };
        if take {
            out.push(g.clone());
        }
        Ok(())
    })?;
    Ok(out)
}

/// Duh_j(Γ₀)^{(k+1)}(t) by nested Gauss–Legendre quadrature (collapsed tensor rule over the simplex).
pub fn duhamel_term(
    g0: &HierarchyState,
    j: usize,
    k: usize,
    t: f64,
    qn: usize,
) -> Result<DensityMatrix> {
    if j > 3 {
        return arg(format!("depth j = {j} > 3"));
    }
    if j > 0 && qn < 4 {
        return arg(format!("Q = {qn} < 4"));
    }
    let q = g0.model.q();
    let top = k + 1 + j * q;
    if top > g0.depth() {
        return arg(format!(
            "needs level {top} but the state has depth {}",
            g0.depth()
        ));
    }
    duh(g0, j, k + 1, t, qn)
}

fn duh(g0: &HierarchyState, j: usize, level: usize, t: f64, qn: usize) -> Result<DensityMatrix> {
    let base = g0.t;
    if j == 0 {
        return free_propagate(&g0.marginals[level - 1], t).map(|m| retime(m, base + t));
    }
    if t == 0.0 {
        return Ok(g0.marginals[level - 1].scaled(C64::new(0.0, 0.0)));
    }
    let c = C64::new(0.0, -g0.model.mu);
    let (nodes, weights) = gauss_legendre(qn, 0.0, t)?;
    let mut acc: Option<DensityMatrix> = None;
    for (s, w) in nodes.iter().zip(&weights) {
        let inner = duh(g0, j - 1, level + g0.model.q(), *s, qn)?;
        let b = apply_b_full(&inner, g0.model.p)?;
        let term = retime(free_propagate(&b, t - s)?, base + t);
        acc = Some(match acc {
            None => term.scaled(c * w),
            Some(a) => a.add_scaled(c * w, &term)?,
        });
    }
    Ok(acc.unwrap())
}

/// Slope of log(err) against log(dt) by least squares.
pub fn order_fit(dts: &[f64], errs: &[f64]) -> Result<f64> {
    if dts.len() != errs.len() || dts.len() < 2 {
        return Err(GphError::InsufficientData(
            "order fit needs two or more points".into(),
        ));
    }
    if errs.iter().chain(dts).any(|v| !(*v > 0.0)) {
        return Err(GphError::Domain("order fit needs positive data".into()));
    }
    let x: Vec<f64> = dts.iter().map(|v| v.ln()).collect();
    let y: Vec<f64> = errs.iter().map(|v| v.ln()).collect();
    let n = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let sxy: f64 = x.iter().zip(&y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    Ok(sxy / sxx)
}
