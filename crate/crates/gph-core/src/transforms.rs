//! Pseudoconformal transform and rescaling of wavefunctions and marginals, convention
//! calibration, transformed-hierarchy residuals and blowup-rate fits.

use num_complex::Complex64 as C64;
use serde::{Deserialize, Serialize};

use crate::contraction::apply_b_full;
use crate::engine::order_fit;
use crate::error::{arg, GphError, Result};
use crate::grid::{GridSpec, Spectral};
use crate::linalg;
use crate::state::{
    check_dense, DensityMatrix, HierarchyState, Model, Repr, SepTerm, WaveFunction,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum TimeMap {
    /// s = t / (1 + bt)
    Ratio,
    /// s = 1 / (1 + bt)
    Reciprocal,
}

impl TimeMap {
    pub fn eval(self, b: f64, t: f64) -> f64 {
        match self {
            TimeMap::Ratio => t / (1.0 + b * t),
            TimeMap::Reciprocal => 1.0 / (1.0 + b * t),
        }
    }

    /// Transformed time t with eval(b, t) = s.
    pub fn inverse(self, b: f64, s: f64) -> Result<f64> {
        let t = match self {
            TimeMap::Ratio => s / (1.0 - b * s),
            TimeMap::Reciprocal => {
                if b == 0.0 || s == 0.0 {
                    return Err(GphError::Domain(
                        "reciprocal time map is not invertible here".into(),
                    ));
                }
                (1.0 / s - 1.0) / b
            }
        };
        if !t.is_finite() || 1.0 + b * t <= 0.0 {
            return Err(GphError::Domain(format!(
                "source time {s} has no preimage with 1 + bt > 0"
            )));
        }
        Ok(t)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CandidateResidual {
    pub time_map: TimeMap,
    pub c_phi: f64,
    pub residual: f64,
}

/// Wavefunction transform (1+bt)^{-d/2} e^{-i c_φ b|x|²/(1+bt)} φ_{s(t)}(x/(1+bt)); marginals
/// carry (1+bt)^{-d} per (x; x') pair and the phase difference.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PCConvention {
    pub time_map: TimeMap,
    pub c_phi: f64,
    pub wave_exponent: f64,
    pub pair_exponent: f64,
    pub calibration: Vec<CandidateResidual>,
}

impl PCConvention {
    pub fn new(d: usize, time_map: TimeMap, c_phi: f64) -> PCConvention {
        PCConvention {
            time_map,
            c_phi,
            wave_exponent: 0.5 * d as f64,
            pair_exponent: d as f64,
            calibration: Vec::new(),
        }
    }
}

pub const CALIBRATION_PASS: f64 = 1e-6;
pub const CALIBRATION_FAIL: f64 = 1e-2;
pub const PHASE_CANDIDATES: [f64; 4] = [1.0, -1.0, 0.25, -0.25];

fn laplacian_fn(grid: &GridSpec, f: &[C64]) -> Vec<C64> {
    let sp = Spectral::new(grid);
    let mut g = f.to_vec();
    sp.fft1(&mut g, true);
    g.iter_mut()
        .zip(grid.q2_table())
        .for_each(|(v, q)| *v *= -q);
    sp.fft1(&mut g, false);
    g
}

/// Exact free Gaussian (1+4is)^{-d/2} exp(-|x|²/(1+4is)) of i∂u + Δu = 0 on ℝ^d.
fn free_gaussian(d: usize, s: f64, x2: f64) -> C64 {
    let z = C64::new(1.0, 4.0 * s);
    z.powf(-0.5 * d as f64) * (-x2 / z).exp()
}

fn candidate_wave(grid: &GridSpec, map: TimeMap, c: f64, b: f64, t: f64) -> Vec<C64> {
    let a = 1.0 + b * t;
    let s = map.eval(b, t);
    grid.x2_table()
        .iter()
        .map(|&x2| {
            C64::from_polar(a.powf(-0.5 * grid.d as f64), -c * b * x2 / a)
                * free_gaussian(grid.d, s, x2 / (a * a))
        })
        .collect()
}

/// Relative free-equation residual of one candidate on the exact Gaussian, maximized over
/// four interior times of [0, t_end] (fourth-order centered differences, step 1e-3).
pub fn candidate_residual(
    grid: &GridSpec,
    map: TimeMap,
    c_phi: f64,
    b: f64,
    t_end: f64,
) -> Result<f64> {
    if !(t_end > 0.0) || 1.0 + b * t_end <= 0.0 {
        return Err(GphError::Domain(
            "calibration window must keep 1 + bt > 0".into(),
        ));
    }
    let tau = 1e-3;
    let mut worst: f64 = 0.0;
    for frac in [0.2, 0.4, 0.6, 0.8] {
        let t = frac * t_end;
        let at = |o: f64| candidate_wave(grid, map, c_phi, b, t + o * tau);
        let (p2, p1, m1, m2) = (at(2.0), at(1.0), at(-1.0), at(-2.0));
        let lap = laplacian_fn(grid, &at(0.0));
        let r: Vec<C64> = (0..lap.len())
            .map(|i| {
                C64::new(0.0, 1.0) * (-p2[i] + 8.0 * p1[i] - 8.0 * m1[i] + m2[i]) / (12.0 * tau)
                    + lap[i]
            })
            .collect();
        worst = worst.max(linalg::frob(&r) / linalg::frob(&lap));
    }
    Ok(worst)
}

/// Selects the unique (time map, c_φ) under which transformed exact free solutions solve
/// the free equation.
pub fn calibrate_pc_convention(grid: &GridSpec, b: f64, t_end: f64) -> Result<PCConvention> {
    if !(1..=2).contains(&grid.d) {
        return arg("calibration needs d in {1, 2}");
    }
    let mut cands = Vec::new();
    for map in [TimeMap::Ratio, TimeMap::Reciprocal] {
        for c in PHASE_CANDIDATES {
            cands.push(CandidateResidual {
                time_map: map,
                c_phi: c,
                residual: candidate_residual(grid, map, c, b, t_end)?,
            });
        }
    }
    let pass: Vec<&CandidateResidual> = cands
        .iter()
        .filter(|c| c.residual <= CALIBRATION_PASS)
        .collect();
    let others_fail = cands
        .iter()
        .filter(|c| c.residual > CALIBRATION_PASS)
        .all(|c| c.residual > CALIBRATION_FAIL);
    if pass.len() != 1 || !others_fail {
        return Err(GphError::Calibration(format!(
            "{} candidates pass; residuals {:?}",
            pass.len(),
            cands.iter().map(|c| c.residual).collect::<Vec<_>>()
        )));
    }
    let mut conv = PCConvention::new(grid.d, pass[0].time_map, pass[0].c_phi);
    conv.calibration = cands;
    Ok(conv)
}

/// Weights of the band-limited periodic interpolant (symmetric Nyquist mode) at y; points
/// outside the box get 0.
fn dilation_weights(n: usize, l: f64, y: f64) -> Vec<f64> {
    let h = l / n as f64;
    if y < -0.5 * l - 1e-12 || y >= 0.5 * l - 1e-12 {
        return vec![0.0; n];
    }
    (0..n)
        .map(|j| {
            let r = (y + 0.5 * l) / h - j as f64;
            if (r - r.round()).abs() < 1e-12 {
                return if (r.round() as i64).rem_euclid(n as i64) == 0 {
                    1.0
                } else {
                    0.0
                };
            }
            let mut th = 2.0 * std::f64::consts::PI * r / n as f64;
            th -= 2.0 * std::f64::consts::PI * (th / (2.0 * std::f64::consts::PI)).round();
            (0.5 * n as f64 * th).sin() / (n as f64 * (0.5 * th).tan())
        })
        .collect()
}

/// f(x / scale) at the points of `target`, from samples of f on `source`. The target box may
/// differ from the source box.
pub fn dilate(source: &GridSpec, f: &[C64], scale: f64, target: &GridSpec) -> Result<Vec<C64>> {
    if source.d != target.d {
        return Err(GphError::Shape("dilation needs matching dimension".into()));
    }
    if !(scale > 0.0) {
        return Err(GphError::Domain(format!(
            "dilation scale {scale} must be positive"
        )));
    }
    let (ns, nt, d) = (source.n, target.n, source.d);
    let mats: Vec<Vec<f64>> = (0..nt)
        .map(|i| dilation_weights(ns, source.l, target.coord(i) / scale))
        .collect();
    // contract axis by axis: shape goes from ns^d to nt^d
    let mut cur = f.to_vec();
    let mut dims = vec![ns; d];
    for a in 0..d {
        let outer: usize = dims[..a].iter().product();
        let inner: usize = dims[a + 1..].iter().product();
        let mut next = vec![C64::new(0.0, 0.0); outer * nt * inner];
        for o in 0..outer {
            for (i, w) in mats.iter().enumerate() {
                let dst = &mut next[(o * nt + i) * inner..(o * nt + i + 1) * inner];
                for (j, wj) in w.iter().enumerate() {
                    if *wj == 0.0 {
                        continue;
                    }
                    let src = &cur[(o * ns + j) * inner..(o * ns + j + 1) * inner];
                    dst.iter_mut().zip(src).for_each(|(v, s)| *v += s * wj);
                }
            }
        }
        cur = next;
        dims[a] = nt;
    }
    Ok(cur)
}

fn check_factor(b: f64, t: f64) -> Result<f64> {
    let a = 1.0 + b * t;
    if !(a > 0.0) {
        return Err(GphError::Domain(format!("1 + bt = {a} must be positive")));
    }
    Ok(a)
}

fn pc_factor(
    grid: &GridSpec,
    f: &[C64],
    a: f64,
    b: f64,
    c: f64,
    weight: f64,
    target: &GridSpec,
) -> Result<Vec<C64>> {
    let mut g = dilate(grid, f, a, target)?;
    g.iter_mut()
        .zip(target.x2_table())
        .for_each(|(v, x2)| *v *= C64::from_polar(weight, -c * b * x2 / a));
    Ok(g)
}

/// 𝒫φ at time t from the source state φ at the mapped time, evaluated on `target`.
pub fn pseudoconformal_wave_on(
    phi_s: &WaveFunction,
    b: f64,
    t: f64,
    conv: &PCConvention,
    target: &GridSpec,
) -> Result<WaveFunction> {
    let a = check_factor(b, t)?;
    let vals = pc_factor(
        &phi_s.grid,
        &phi_s.values,
        a,
        b,
        conv.c_phi,
        a.powf(-conv.wave_exponent),
        target,
    )?;
    WaveFunction::new(*target, vals)
}

pub fn pseudoconformal_wave(
    phi_s: &WaveFunction,
    b: f64,
    t: f64,
    conv: &PCConvention,
) -> Result<WaveFunction> {
    pseudoconformal_wave_on(phi_s, b, t, conv, &phi_s.grid)
}

fn dense_slot_map(
    data: &[C64],
    grid: &GridSpec,
    k: usize,
    slot_fn: &dyn Fn(&[C64], bool) -> Result<Vec<C64>>,
) -> Result<Vec<C64>> {
    // apply a linear one-body map to each of the 2k slots; `true` marks a primed slot
    let npts = grid.points();
    let mut cur = data.to_vec();
    for s in 0..2 * k {
        let stride = npts.pow((2 * k - 1 - s) as u32);
        let mut line = vec![C64::new(0.0, 0.0); npts];
        for block in cur.chunks_mut(npts * stride) {
            for i0 in 0..stride {
                for p in 0..npts {
                    line[p] = block[p * stride + i0];
                }
                let out = slot_fn(&line, s >= k)?;
                for p in 0..npts {
                    block[p * stride + i0] = out[p];
                }
            }
        }
    }
    Ok(cur)
}

/// 𝒫γ^{(k)} at time t from the source marginal at the mapped time.
pub fn pseudoconformal_marginal(
    gamma_s: &DensityMatrix,
    b: f64,
    t: f64,
    conv: &PCConvention,
) -> Result<DensityMatrix> {
    let a = check_factor(b, t)?;
    let grid = gamma_s.grid;
    let w = a.powf(-0.5 * conv.pair_exponent);
    let one = |f: &[C64], primed: bool| -> Result<Vec<C64>> {
        let mut g = dilate(&grid, f, a, &grid)?;
        let sign = if primed { 1.0 } else { -1.0 };
        g.iter_mut()
            .zip(grid.x2_table())
            .for_each(|(v, x2)| *v *= C64::from_polar(w, sign * conv.c_phi * b * x2 / a));
        Ok(g)
    };
    transform_marginal(gamma_s, &one)
}

fn transform_marginal(
    gamma: &DensityMatrix,
    one: &dyn Fn(&[C64], bool) -> Result<Vec<C64>>,
) -> Result<DensityMatrix> {
    let grid = gamma.grid;
    match &gamma.repr {
        Repr::Separable(terms) => {
            let terms = terms
                .iter()
                .map(|t| {
                    Ok(SepTerm {
                        coef: t.coef,
                        f: t.f.iter().map(|f| one(f, false)).collect::<Result<_>>()?,
                        // g enters conjugated; the primed map acts on conj(g)
                        g: t.g
                            .iter()
                            .map(|g| {
                                let c: Vec<C64> = g.iter().map(|v| v.conj()).collect();
                                Ok(one(&c, true)?.iter().map(|v| v.conj()).collect())
                            })
                            .collect::<Result<_>>()?,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            DensityMatrix::separable(gamma.k, grid, terms, gamma.hermitian, gamma.symmetric)
        }
        Repr::Dense(d) => {
            check_dense(&grid, gamma.k)?;
            // primed slots hold kernel values directly, so the primed map is applied as is
            let out = dense_slot_map(d, &grid, gamma.k, one)?;
            Ok(DensityMatrix::from_dense_flags(
                gamma.k,
                grid,
                out,
                gamma.hermitian,
                gamma.symmetric,
            ))
        }
        Repr::Tucker(_) => Err(GphError::Shape(
            "transforms need dense or separable marginals".into(),
        )),
    }
}

/// λ^{-2/p} φ(x/λ).
pub fn rescale_wave(phi: &WaveFunction, lambda: f64, p: usize) -> Result<WaveFunction> {
    if !(lambda > 0.0) {
        return Err(GphError::Domain(format!("λ = {lambda} must be positive")));
    }
    let mut v = dilate(&phi.grid, &phi.values, lambda, &phi.grid)?;
    let w = lambda.powf(-2.0 / p as f64);
    v.iter_mut().for_each(|x| *x *= w);
    WaveFunction::new(phi.grid, v)
}

/// λ^{-4k/p} γ^{(k)}(x/λ; x'/λ) (static part of the rescaling; the time map is τ ↦ t + λ^{-2}τ).
pub fn rescale_marginal(gamma: &DensityMatrix, lambda: f64, p: usize) -> Result<DensityMatrix> {
    if !(lambda > 0.0) {
        return Err(GphError::Domain(format!("λ = {lambda} must be positive")));
    }
    if p != 2 && p != 4 {
        return arg(format!("p = {p} must be 2 or 4"));
    }
    let grid = gamma.grid;
    let w = lambda.powf(-2.0 / p as f64);
    let one = |f: &[C64], _primed: bool| -> Result<Vec<C64>> {
        let mut g = dilate(&grid, f, lambda, &grid)?;
        g.iter_mut().for_each(|v| *v *= w);
        Ok(g)
    };
    transform_marginal(gamma, &one)
}

/// (Δ_x − Δ_x') γ.
pub fn laplacian_pm(gamma: &DensityMatrix) -> Result<DensityMatrix> {
    let grid = gamma.grid;
    let k = gamma.k;
    match &gamma.repr {
        Repr::Separable(terms) => {
            let mut out = Vec::with_capacity(2 * k * terms.len());
            for t in terms {
                for j in 0..k {
                    let mut f = t.f.clone();
                    f[j] = laplacian_fn(&grid, &t.f[j]);
                    out.push(SepTerm {
                        coef: t.coef,
                        f,
                        g: t.g.clone(),
                    });
                    let mut g = t.g.clone();
                    g[j] = laplacian_fn(&grid, &t.g[j]);
                    out.push(SepTerm {
                        coef: -t.coef,
                        f: t.f.clone(),
                        g,
                    });
                }
            }
            DensityMatrix::separable(k, grid, out, false, gamma.symmetric)
        }
        Repr::Dense(d) => {
            let npts = grid.points();
            let q2 = grid.q2_table();
            let mut v = d.clone();
            let sp = Spectral::new(&grid);
            sp.transform(&mut v, 2 * k, true);
            let mut digits = vec![0usize; 2 * k];
            for (idx, x) in v.iter_mut().enumerate() {
                let mut rem = idx;
                for s in (0..2 * k).rev() {
                    digits[s] = rem % npts;
                    rem /= npts;
                }
                let w: f64 = (0..k).map(|s| q2[digits[k + s]] - q2[digits[s]]).sum();
                *x *= w;
            }
            sp.transform(&mut v, 2 * k, false);
            Ok(DensityMatrix::from_dense_flags(
                k,
                grid,
                v,
                false,
                gamma.symmetric,
            ))
        }
        Repr::Tucker(_) => Err(GphError::Shape(
            "laplacian needs dense or separable marginals".into(),
        )),
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct ResidualReport {
    pub times: Vec<f64>,
    pub residuals: Vec<f64>,
    pub max: f64,
}

/// Relative residual ‖i∂_tγ + Δ±γ − μBγ^{(k+p/2)}‖ / (‖i∂_tγ‖ + ‖Δ±γ‖ + ‖μBγ^{(k+p/2)}‖) at
/// the middle of three (possibly non-uniform) nodes, with a three-point derivative.
pub fn node_residual(
    times: [f64; 3],
    lower: [&DensityMatrix; 3],
    upper: &DensityMatrix,
    model: &Model,
    coupling: bool,
) -> Result<f64> {
    let (h1, h2) = (times[1] - times[0], times[2] - times[1]);
    if !(h1 > 0.0 && h2 > 0.0) {
        return arg("residual nodes must be strictly increasing");
    }
    let c = [
        -h2 / (h1 * (h1 + h2)),
        (h2 - h1) / (h1 * h2),
        h1 / (h2 * (h1 + h2)),
    ];
    let i = C64::new(0.0, 1.0);
    let mut dt = lower[0].scaled(i * c[0]);
    dt = dt.add_scaled(i * c[1], lower[1])?;
    dt = dt.add_scaled(i * c[2], lower[2])?;
    let lap = laplacian_pm(lower[1])?;
    let mut r = dt.add_scaled(C64::new(1.0, 0.0), &lap)?;
    let mut scale = dt.l2_norm() + lap.l2_norm();
    if coupling {
        let bterm = apply_b_full(upper, model.p)?.scaled(C64::new(model.mu, 0.0));
        scale += bterm.l2_norm();
        r = r.add_scaled(C64::new(-1.0, 0.0), &bterm)?;
    }
    Ok(if scale == 0.0 {
        0.0
    } else {
        r.l2_norm() / scale
    })
}

fn find_sample(traj: &[HierarchyState], s: f64) -> Result<usize> {
    let j = traj
        .iter()
        .position(|st| (st.t - s).abs() <= 1e-9 * s.abs().max(1.0))
        .ok_or_else(|| GphError::Argument(format!("no trajectory sample at t = {s}")))?;
    if j == 0 || j + 1 >= traj.len() {
        return arg(format!("sample at t = {s} has no neighbours"));
    }
    Ok(j)
}

/// Hierarchy residual at level k of a transformed trajectory. `time_of` maps source sample
/// times to transformed times (monotone); `apply` transforms a marginal to the given time.
pub fn transformed_residual(
    traj: &[HierarchyState],
    k: usize,
    at: &[f64],
    coupling: bool,
    time_of: &dyn Fn(f64) -> Result<f64>,
    apply: &dyn Fn(&DensityMatrix, f64) -> Result<DensityMatrix>,
) -> Result<ResidualReport> {
    if traj.is_empty() || at.is_empty() {
        return arg("empty trajectory or evaluation set");
    }
    let model = traj[0].model;
    let top = k + model.q();
    if top > traj[0].depth() {
        return arg(format!("trajectory lacks level {top}"));
    }
    let mut times = Vec::new();
    let mut residuals = Vec::new();
    for &s in at {
        let j = find_sample(traj, s)?;
        let mut ts = [
            time_of(traj[j - 1].t)?,
            time_of(traj[j].t)?,
            time_of(traj[j + 1].t)?,
        ];
        let mut idx = [j - 1, j, j + 1];
        if ts[0] > ts[2] {
            ts.reverse();
            idx.reverse();
        }
        let lower = [
            apply(&traj[idx[0]].marginals[k - 1], ts[0])?,
            apply(&traj[idx[1]].marginals[k - 1], ts[1])?,
            apply(&traj[idx[2]].marginals[k - 1], ts[2])?,
        ];
        let upper = apply(&traj[j].marginals[top - 1], ts[1])?;
        times.push(ts[1]);
        residuals.push(node_residual(
            ts,
            [&lower[0], &lower[1], &lower[2]],
            &upper,
            &model,
            coupling,
        )?);
    }
    let max = residuals.iter().cloned().fold(0.0, f64::max);
    Ok(ResidualReport {
        times,
        residuals,
        max,
    })
}

fn is_l2_critical(model: &Model) -> bool {
    (model.d == 2 && model.p == 2) || (model.d == 1 && model.p == 4)
}

/// Residual of the hierarchy on 𝒫Γ, evaluated at the transformed images of the source
/// sample times `at`. Non-critical models are rejected unless `diagnostic` is set.
pub fn pc_invariance_residual(
    traj: &[HierarchyState],
    b: f64,
    conv: &PCConvention,
    k: usize,
    at: &[f64],
    diagnostic: bool,
) -> Result<ResidualReport> {
    let model = traj
        .first()
        .ok_or_else(|| GphError::Argument("empty trajectory".into()))?
        .model;
    if !diagnostic && !is_l2_critical(&model) {
        return Err(GphError::Precondition(format!(
            "pseudoconformal invariance needs (d,p) in {{(2,2),(1,4)}}, got ({},{})",
            model.d, model.p
        )));
    }
    let map = conv.time_map;
    transformed_residual(traj, k, at, true, &|s| map.inverse(b, s), &|g, t| {
        pseudoconformal_marginal(g, b, t, conv)
    })
}

/// Residual of the hierarchy on R_λΓ with τ = λ²(s − t0).
pub fn rescaled_residual(
    traj: &[HierarchyState],
    lambda: f64,
    t0: f64,
    k: usize,
    at: &[f64],
) -> Result<ResidualReport> {
    let p = traj
        .first()
        .ok_or_else(|| GphError::Argument("empty trajectory".into()))?
        .model
        .p;
    transformed_residual(
        traj,
        k,
        at,
        true,
        &|s| Ok(lambda * lambda * (s - t0)),
        &|g, _| rescale_marginal(g, lambda, p),
    )
}

/// Residual of the untransformed trajectory.
pub fn hierarchy_residual(traj: &[HierarchyState], k: usize, at: &[f64]) -> Result<ResidualReport> {
    transformed_residual(traj, k, at, true, &|s| Ok(s), &|g, _| Ok(g.clone()))
}

#[derive(Clone, Debug, Serialize)]
pub struct BlowupFit {
    pub slope: f64,
    pub intercept: f64,
    pub points: usize,
}

/// Log-log fit of Av^{1/2} against (T*−t)^{-1} over the samples in the last decade of T*−t.
pub fn blowup_rate_fit(ts: &[f64], av: &[f64], t_star: f64) -> Result<BlowupFit> {
    if ts.len() != av.len() || ts.is_empty() {
        return arg("time and value counts differ");
    }
    if ts.iter().any(|t| *t >= t_star) {
        return arg("T* must exceed every sample time");
    }
    let gaps: Vec<f64> = ts.iter().map(|t| t_star - t).collect();
    let dmin = gaps.iter().cloned().fold(f64::INFINITY, f64::min);
    let sel: Vec<usize> = (0..ts.len())
        .filter(|&i| gaps[i] <= 10.0 * dmin * (1.0 + 1e-12))
        .collect();
    if sel.len() < 8 {
        return Err(GphError::InsufficientData(format!(
            "{} points in the last decade, need 8",
            sel.len()
        )));
    }
    let x: Vec<f64> = sel.iter().map(|&i| 1.0 / gaps[i]).collect();
    let y: Vec<f64> = sel.iter().map(|&i| av[i].sqrt()).collect();
    let slope = order_fit(&x, &y)?;
    let n = x.len() as f64;
    let mx = x.iter().map(|v| v.ln()).sum::<f64>() / n;
    let my = y.iter().map(|v| v.ln()).sum::<f64>() / n;
    Ok(BlowupFit {
        slope,
        intercept: my - slope * mx,
        points: sel.len(),
    })
}

/// Lower-bound exponent (2α − d + 4/p)/4 for Av_{H^α}^{1/2}.
pub fn blowup_exponent_h(d: usize, p: usize, alpha: f64) -> f64 {
    (2.0 * alpha - d as f64 + 4.0 / p as f64) / 4.0
}

/// Lower-bound exponent 1/p − d/(2r) for Av_{L^r}^{1/2}.
pub fn blowup_exponent_lr(d: usize, p: usize, r: f64) -> f64 {
    1.0 / p as f64 - d as f64 / (2.0 * r)
}

/// Av_{H¹} = ‖𝒫φ_t‖²_{H¹} of the factorized pseudoconformal image of the soliton e^{is}Q,
/// evaluated on `target`, for each t (b < 0 gives blowup at T* = −1/b).
pub fn pc_soliton_av(
    q: &WaveFunction,
    b: f64,
    ts: &[f64],
    conv: &PCConvention,
    target: &GridSpec,
) -> Result<Vec<f64>> {
    ts.iter()
        .map(|&t| {
            let s = conv.time_map.eval(b, check_factor(b, t).map(|_| t)?);
            let phi_s = q.clone().scaled(C64::from_polar(1.0, s));
            let w = pseudoconformal_wave_on(&phi_s, b, t, conv, target)?;
            Ok(w.h_alpha_norm(1.0).powi(2))
        })
        .collect()
}

/// Order of convergence of residual maxima under refinement.
pub fn residual_order(dts: &[f64], maxima: &[f64]) -> Result<f64> {
    order_fit(dts, maxima)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nls::{factorized_trajectory, ground_state_quintic_1d, split_step_sampled};
    use crate::norms::estimate_av_levels;
    use crate::state::{from_factorized, ReprKind};
    use proptest::prelude::*;

    fn calib_grid() -> GridSpec {
        GridSpec::new(1, 128, 40.0).unwrap()
    }

    #[test]
    fn calibration_selects_one_candidate() {
        let conv = calibrate_pc_convention(&calib_grid(), 0.5, 0.5).unwrap();
        assert_eq!(conv.time_map, TimeMap::Ratio);
        assert_eq!(conv.c_phi, -0.25);
        let sel = conv
            .calibration
            .iter()
            .find(|c| c.time_map == TimeMap::Ratio && c.c_phi == -0.25)
            .unwrap();
        assert!(sel.residual <= 1e-6, "{sel:?}");
        for c in conv
            .calibration
            .iter()
            .filter(|c| c.time_map == TimeMap::Reciprocal)
        {
            assert!(c.residual > 1e-2, "{c:?}");
        }
        let g2 = GridSpec::new(2, 64, 20.0).unwrap();
        let conv2 = calibrate_pc_convention(&g2, 0.5, 0.5).unwrap();
        assert_eq!((conv2.time_map, conv2.c_phi), (TimeMap::Ratio, -0.25));
    }

    #[test]
    fn b_zero_ratio_map_is_identity() {
        let g = calib_grid();
        for c in PHASE_CANDIDATES {
            let v = candidate_wave(&g, TimeMap::Ratio, c, 0.0, 0.3);
            let u: Vec<C64> = g
                .x2_table()
                .iter()
                .map(|&x2| free_gaussian(1, 0.3, x2))
                .collect();
            assert_eq!(v, u);
            assert!(candidate_residual(&g, TimeMap::Ratio, c, 0.0, 0.5).unwrap() < 1e-6);
        }
        // the reciprocal map freezes the source time at 1, which is not the identity
        assert!(candidate_residual(&g, TimeMap::Reciprocal, 1.0, 0.0, 0.5).unwrap() > 1e-2);
        assert!(calibrate_pc_convention(&g, 0.0, 0.5).is_err());
        assert!(calibrate_pc_convention(&g, -4.0, 0.5).is_err());
    }

    #[test]
    fn dilation_matches_closed_form() {
        let g = GridSpec::new(1, 128, 32.0).unwrap();
        let f: Vec<C64> = (0..128)
            .map(|i| C64::new((-g.coord(i).powi(2) / 2.0).exp(), 0.0))
            .collect();
        for s in [0.7, 1.0, 1.3, 2.0] {
            let got = dilate(&g, &f, s, &g).unwrap();
            let want: Vec<C64> = (0..128)
                .map(|i| C64::new((-(g.coord(i) / s).powi(2) / 2.0).exp(), 0.0))
                .collect();
            assert!(linalg::dist(&got, &want) < 1e-10, "s = {s}");
        }
        assert_eq!(dilate(&g, &f, 1.0, &g).unwrap(), f);
        assert!(dilate(&g, &f, 0.0, &g).is_err());
    }

    fn conv1() -> PCConvention {
        PCConvention::new(1, TimeMap::Ratio, -0.25)
    }

    #[test]
    fn marginal_transform_factorizes() {
        let g = GridSpec::new(1, 32, 16.0).unwrap();
        let phi = WaveFunction::gaussian(&g, 1.0, 0.8, 0.3).unwrap();
        for (b, t) in [(0.5, 0.0), (0.5, 0.3), (-0.8, 0.4)] {
            let pw = pseudoconformal_wave(&phi, b, t, &conv1()).unwrap();
            for k in 1..=2 {
                let want = from_factorized(&pw, k, ReprKind::Dense)
                    .unwrap()
                    .to_dense()
                    .unwrap();
                let dense = from_factorized(&phi, k, ReprKind::Dense).unwrap();
                let got = pseudoconformal_marginal(&dense, b, t, &conv1())
                    .unwrap()
                    .to_dense()
                    .unwrap();
                let diff = got
                    .iter()
                    .zip(&want)
                    .map(|(a, b)| (a - b).norm())
                    .fold(0.0, f64::max);
                assert!(diff <= 1e-12, "b={b} t={t} k={k}: {diff:e}");
                let sep = from_factorized(&phi, k, ReprKind::Separable).unwrap();
                let got = pseudoconformal_marginal(&sep, b, t, &conv1())
                    .unwrap()
                    .to_dense()
                    .unwrap();
                let diff = got
                    .iter()
                    .zip(&want)
                    .map(|(a, b)| (a - b).norm())
                    .fold(0.0, f64::max);
                assert!(diff <= 1e-12, "separable b={b} t={t} k={k}: {diff:e}");
            }
        }
        // t = 0: quadratic phase only
        let dense = from_factorized(&phi, 1, ReprKind::Dense).unwrap();
        let got = pseudoconformal_marginal(&dense, 0.5, 0.0, &conv1())
            .unwrap()
            .to_dense()
            .unwrap();
        let src = dense.to_dense().unwrap();
        let x2 = g.x2_table();
        for i in 0..32 {
            for j in 0..32 {
                let ph = C64::from_polar(1.0, 0.25 * 0.5 * (x2[i] - x2[j]));
                assert!((got[i * 32 + j] - src[i * 32 + j] * ph).norm() < 1e-14);
            }
        }
        assert!(pseudoconformal_marginal(&dense, -1.0, 1.0, &conv1()).is_err());
    }

    #[test]
    fn transforms_preserve_l2_norm() {
        let g = GridSpec::new(1, 128, 32.0).unwrap();
        let phi = WaveFunction::gaussian(&g, 1.0, 0.5, 0.0).unwrap();
        for (k, kind) in [
            (1, ReprKind::Dense),
            (2, ReprKind::Separable),
            (3, ReprKind::Separable),
        ] {
            let src = from_factorized(&phi, k, kind).unwrap();
            let out = pseudoconformal_marginal(&src, 0.5, 0.6, &conv1()).unwrap();
            assert!((out.l2_norm() - src.l2_norm()).abs() <= 1e-6, "k = {k}");
        }
        // cubic d = 2 rescaling is L²-critical: exponent −2k + 2k = 0
        let g2 = GridSpec::new(2, 32, 24.0).unwrap();
        let phi2 = WaveFunction::gaussian(&g2, 1.0, 0.0, 0.0).unwrap();
        for k in 1..=2 {
            let sep = from_factorized(&phi2, k, ReprKind::Separable).unwrap();
            let r = rescale_marginal(&sep, 2.0, 2).unwrap();
            assert!(
                (r.l2_norm() - sep.l2_norm()).abs() <= 1e-6 * sep.l2_norm(),
                "k = {k}"
            );
            // quintic: λ^{-k}·λ^{2k}
            let r4 = rescale_marginal(&sep, 2.0, 4).unwrap();
            assert!(
                (r4.l2_norm() - 2f64.powi(k as i32) * sep.l2_norm()).abs() <= 1e-6 * r4.l2_norm()
            );
        }
    }

    #[test]
    fn rescaling_group_and_factorization() {
        let g = GridSpec::new(1, 128, 40.0).unwrap();
        let phi = WaveFunction::gaussian(&g, 1.0, 0.0, 0.0).unwrap();
        assert!(linalg::dist(&rescale_wave(&phi, 1.0, 2).unwrap().values, &phi.values) < 1e-14);
        let a = rescale_wave(&rescale_wave(&phi, 1.5, 2).unwrap(), 1.2, 2).unwrap();
        let b = rescale_wave(&phi, 1.8, 2).unwrap();
        assert!(linalg::dist(&a.values, &b.values) < 1e-8);
        let gs = GridSpec::new(1, 32, 16.0).unwrap();
        let phi = WaveFunction::gaussian(&gs, 1.0, 0.4, 0.0).unwrap();
        let sep = from_factorized(&phi, 2, ReprKind::Dense).unwrap();
        let got = rescale_marginal(&sep, 1.7, 4).unwrap().to_dense().unwrap();
        let want = from_factorized(&rescale_wave(&phi, 1.7, 4).unwrap(), 2, ReprKind::Dense)
            .unwrap()
            .to_dense()
            .unwrap();
        assert!(
            got.iter()
                .zip(&want)
                .map(|(a, b)| (a - b).norm())
                .fold(0.0, f64::max)
                <= 1e-12
        );
        assert!(rescale_marginal(&sep, -1.0, 2).is_err());
    }

    #[test]
    fn laplacian_forms_agree() {
        let g = GridSpec::new(1, 16, 8.0).unwrap();
        let phi = WaveFunction::gaussian(&g, 1.0, 0.8, 0.3).unwrap();
        let psi = WaveFunction::gaussian(&g, 0.7, -0.5, -0.4).unwrap();
        let t = SepTerm {
            coef: C64::new(0.3, 0.2),
            f: vec![phi.values.clone(), psi.values.clone()],
            g: vec![psi.values.clone(), phi.values.clone()],
        };
        let sep = DensityMatrix::separable(2, g, vec![t], false, false).unwrap();
        let dense = DensityMatrix::from_dense(2, g, sep.to_dense().unwrap());
        let a = laplacian_pm(&sep).unwrap().to_dense().unwrap();
        let b = laplacian_pm(&dense).unwrap().to_dense().unwrap();
        assert!(linalg::dist(&a, &b) < 1e-10 * linalg::frob(&a));
    }

    fn quintic_traj(dt: f64, t_end: f64, mu: f64, p: usize) -> Vec<HierarchyState> {
        let g = GridSpec::new(1, 256, 32.0).unwrap();
        let phi = WaveFunction::gaussian(&g, 1.0, 0.5, 0.0)
            .unwrap()
            .scaled(C64::new(1.2, 0.0));
        let steps = (t_end / dt).round() as usize;
        let tr = split_step_sampled(&phi, p, mu, dt, steps, 1).unwrap();
        factorized_trajectory(&tr, 1 + p / 2, 1, Model::new(p, mu, 1).unwrap()).unwrap()
    }

    #[test]
    fn embedded_trajectory_residual_is_second_order() {
        let at = [0.05, 0.1];
        let dts = [2e-3, 1e-3, 5e-4];
        let r: Vec<f64> = dts
            .iter()
            .map(|&dt| {
                hierarchy_residual(&quintic_traj(dt, 0.11, 1.0, 2), 1, &at)
                    .unwrap()
                    .max
            })
            .collect();
        let order = residual_order(&dts, &r).unwrap();
        assert!(order >= 1.8, "{r:?} {order}");
    }

    #[test]
    fn pc_residual_quintic_and_negative_control() {
        let conv = calibrate_pc_convention(&calib_grid(), 0.5, 0.5).unwrap();
        let at = [0.05, 0.1];
        let dts = [2e-3, 1e-3, 5e-4];
        let r: Vec<f64> = dts
            .iter()
            .map(|&dt| {
                pc_invariance_residual(&quintic_traj(dt, 0.11, -1.0, 4), 0.5, &conv, 1, &at, false)
                    .unwrap()
                    .max
            })
            .collect();
        let order = residual_order(&dts, &r).unwrap();
        assert!(order >= 1.8, "{r:?} {order}");
        let cubic = quintic_traj(1e-3, 0.11, -1.0, 2);
        assert!(matches!(
            pc_invariance_residual(&cubic, 0.5, &conv, 1, &at, false),
            Err(GphError::Precondition(_))
        ));
        let neg: Vec<f64> = dts
            .iter()
            .map(|&dt| {
                pc_invariance_residual(
                    &quintic_traj(dt, 0.21, -1.0, 2),
                    2.0,
                    &conv,
                    1,
                    &[0.1, 0.2],
                    true,
                )
                .unwrap()
                .max
            })
            .collect();
        assert!(neg.iter().all(|v| *v > 1e-2), "{neg:?}");
    }

    #[test]
    fn rescaled_residual_cubic_2d() {
        let g = GridSpec::new(2, 80, 24.0).unwrap();
        let phi = WaveFunction::gaussian(&g, 1.0, 0.5, 0.0).unwrap();
        let at = [0.02, 0.04];
        let dts = [4e-3, 2e-3, 1e-3];
        for k in 1..=2 {
            let r: Vec<f64> = dts
                .iter()
                .map(|&dt| {
                    let tr = split_step_sampled(&phi, 2, 1.0, dt, (0.05 / dt).round() as usize, 1)
                        .unwrap();
                    let traj = factorized_trajectory(&tr, k + 1, 1, Model::new(2, 1.0, 2).unwrap())
                        .unwrap();
                    rescaled_residual(&traj, 2.0, 0.0, k, &at).unwrap().max
                })
                .collect();
            let order = residual_order(&dts, &r).unwrap();
            assert!(order >= 1.8, "k={k} {r:?} {order}");
        }
    }

    #[test]
    fn blowup_fits() {
        let ts: Vec<f64> = (0..12)
            .map(|i| 1.0 - 0.5 * 10f64.powf(-(i as f64) / 11.0))
            .collect();
        let av: Vec<f64> = ts.iter().map(|t| 1.0 / (1.0 - t)).collect();
        let f = blowup_rate_fit(&ts, &av, 1.0).unwrap();
        assert!((f.slope - 0.5).abs() < 1e-6);
        assert!(blowup_rate_fit(&ts, &av, 0.9).is_err());
        assert!(blowup_rate_fit(&ts[..5], &av[..5], 1.0).is_err());
        assert_eq!(blowup_exponent_lr(1, 4, 4.0), 0.125);
        assert_eq!(blowup_exponent_h(1, 4, 1.0), 0.5);
    }

    #[test]
    fn pseudoconformal_soliton_blowup_rate() {
        let src = GridSpec::new(1, 1024, 48.0).unwrap();
        let q = ground_state_quintic_1d(&src).unwrap();
        let b = -1.0;
        // last decade before T* = 1: 1 + bt from 0.1 down to 0.01, on boxes shrinking with it
        let zoom = |t: f64| GridSpec::new(1, 2048, 48.0 * (1.0 + b * t)).unwrap();
        let ts: Vec<f64> = (0..12)
            .map(|i| 1.0 - 0.1 * 10f64.powf(-(i as f64) / 11.0))
            .collect();
        let av: Vec<f64> = ts
            .iter()
            .map(|&t| pc_soliton_av(&q, b, &[t], &conv1(), &zoom(t)).unwrap()[0])
            .collect();
        let f = blowup_rate_fit(&ts, &av, 1.0).unwrap();
        assert!((f.slope - 1.0).abs() <= 0.1, "{f:?}");
        assert!(f.slope >= blowup_exponent_h(1, 4, 1.0) - 0.05);
        // Av from the marginal sequence agrees with the one-body value
        let t = ts[5];
        let phase = C64::from_polar(1.0, conv1().time_map.eval(b, t));
        let w =
            pseudoconformal_wave_on(&q.clone().scaled(phase), b, t, &conv1(), &zoom(t)).unwrap();
        let levels: Vec<DensityMatrix> = (1..=3)
            .map(|k| from_factorized(&w, k, ReprKind::Separable).unwrap())
            .collect();
        let av_h = estimate_av_levels(&levels, crate::norms::AvKind::HAlpha(1.0)).unwrap();
        assert!((av_h - av[5]).abs() <= 1e-8 * av[5], "{av_h} {}", av[5]);
        // real Q: ‖Q‖² + a^{-2}‖Q'‖² + (b²/4)‖yQ‖²
        let a = 1.0 + b * t;
        let h = src.h();
        let y2: f64 = q
            .values
            .iter()
            .enumerate()
            .map(|(i, v)| src.coord(i).powi(2) * v.norm_sqr())
            .sum::<f64>()
            * h;
        let n2 = q.l2_norm().powi(2);
        let grad = q.h_alpha_norm(1.0).powi(2) - n2;
        let want = n2 + grad / (a * a) + 0.25 * b * b * y2;
        assert!((av[5] - want).abs() <= 1e-6 * want, "{} {want}", av[5]);
    }

    #[test]
    fn rescaling_maps_argmax_time() {
        // synthetic trajectory: widths w(t) with a minimum at t* = 0.3
        let g = GridSpec::new(1, 256, 40.0).unwrap();
        let ts: Vec<f64> = (0..=12).map(|i| 0.05 * i as f64).collect();
        let width = |t: f64| 0.6 + (t - 0.3f64).powi(2);
        let (lambda, t0) = (1.5, 0.1);
        let av: Vec<f64> = ts
            .iter()
            .map(|&t| {
                WaveFunction::gaussian(&g, width(t), 0.0, 0.0)
                    .unwrap()
                    .h_alpha_norm(1.0)
            })
            .collect();
        let av_r: Vec<f64> = ts
            .iter()
            .map(|&t| {
                rescale_wave(
                    &WaveFunction::gaussian(&g, width(t), 0.0, 0.0).unwrap(),
                    lambda,
                    2,
                )
                .unwrap()
                .h_alpha_norm(1.0)
            })
            .collect();
        let arg = |v: &[f64]| {
            v.iter()
                .enumerate()
                .fold(
                    (0, f64::MIN),
                    |m, (i, x)| if *x > m.1 { (i, *x) } else { m },
                )
                .0
        };
        let tau: Vec<f64> = ts.iter().map(|t| lambda * lambda * (t - t0)).collect();
        assert_eq!(tau[arg(&av_r)], lambda * lambda * (ts[arg(&av)] - t0));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn factorization_commutes(seed in 0u64..1000, b in -0.8f64..0.8, t in 0.0f64..0.5) {
            let g = GridSpec::new(1, 16, 12.0).unwrap();
            let sigma = 0.8 + (seed % 7) as f64 * 0.05;
            let phi = WaveFunction::gaussian(&g, sigma, (seed % 5) as f64 * 0.3 - 0.6, 0.0).unwrap();
            let pw = pseudoconformal_wave(&phi, b, t, &conv1()).unwrap();
            let got = pseudoconformal_marginal(&from_factorized(&phi, 2, ReprKind::Dense).unwrap(), b, t, &conv1()).unwrap();
            let want = from_factorized(&pw, 2, ReprKind::Dense).unwrap();
            let diff = got.to_dense().unwrap().iter().zip(want.to_dense().unwrap()).map(|(a, b)| (a - b).norm()).fold(0.0, f64::max);
            prop_assert!(diff <= 1e-12);
        }
    }
}
