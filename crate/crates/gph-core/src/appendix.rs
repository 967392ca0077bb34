//! Windowed spacetime ratios, J1 threshold scans and iterated Duhamel bound probes.

use num_complex::Complex64 as C64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rustfft::FftPlanner;
use serde::Serialize;

use crate::contraction::{apply_b_full, apply_b_single};
use crate::engine::{duhamel_term, order_fit};
use crate::error::{arg, GphError, Result};
use crate::grid::{free_propagate, GridSpec, Spectral};
use crate::norms::{alpha_set_check, h_alpha_norm, trapezoid};
use crate::quad::gauss_legendre;
use crate::state::{
    check_dense, mem_budget, DensityMatrix, HierarchyState, Repr, SepTerm, WaveFunction,
};

#[derive(Clone, Copy, Debug, Serialize)]
pub struct StrichartzRatio {
    pub ratio: f64,
    pub numerator: f64,
    pub denominator: f64,
    /// False when α lies outside the admissible set; the ratio is still reported.
    pub in_alpha_set: bool,
}

/// ‖S^{(k,α)} B_{slot;k+1..k+p/2} e^{itΔ±} γ₀‖_{L²_t([0,T]) L²} / ‖S^{(k+p/2,α)} γ₀‖_{L²},
/// time integral by the trapezoid rule on `samples` equispaced nodes.
pub fn strichartz_ratio(
    g0: &DensityMatrix,
    p: usize,
    slot: usize,
    alpha: f64,
    window: f64,
    samples: usize,
) -> Result<StrichartzRatio> {
    if !(window > 0.0) || samples < 2 {
        return arg("need a positive window and at least two samples");
    }
    if let Repr::Dense(_) = g0.repr {
        check_dense(&g0.grid, g0.k)?;
    }
    let denominator = h_alpha_norm(g0, alpha)?;
    if denominator == 0.0 {
        return Err(GphError::Domain("zero initial marginal: ratio 0/0".into()));
    }
    let times: Vec<f64> = (0..samples)
        .map(|i| window * i as f64 / (samples - 1) as f64)
        .collect();
    let vals = times
        .iter()
        .map(|t| {
            let b = apply_b_single(&free_propagate(g0, *t)?, slot, p)?;
            Ok(h_alpha_norm(&b, alpha)?.powi(2))
        })
        .collect::<Result<Vec<f64>>>()?;
    let numerator = trapezoid(&times, &vals)?.sqrt();
    Ok(StrichartzRatio {
        ratio: numerator / denominator,
        numerator,
        denominator,
        in_alpha_set: alpha_set_check(g0.grid.d, p, alpha),
    })
}

fn mode_seed(seed: u64, draw: u64, m: [i64; 3]) -> u64 {
    // splitmix64 over the packed key
    let mut z = seed;
    for v in [draw, m[0] as u64, m[1] as u64, m[2] as u64] {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_add(v);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^= z >> 31;
    }
    z
}

/// Complex Gaussian random field with Fourier amplitudes ⟨q⟩^{-decay}. Each mode's
/// coefficient depends only on (seed, draw, mode index), so refined grids nest coarser ones.
pub fn random_field(grid: &GridSpec, seed: u64, draw: u64, decay: f64) -> Result<WaveFunction> {
    let npts = grid.points();
    let mut coef = vec![C64::new(0.0, 0.0); npts];
    for (p, c) in coef.iter_mut().enumerate() {
        let idx = grid.unflatten(p);
        let mut m = [0i64; 3];
        let mut q2 = 0.0;
        for a in 0..grid.d {
            m[a] = grid.freq_index(idx[a]);
            q2 += grid.wavenumber(m[a]).powi(2);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(mode_seed(seed, draw, m));
        let (re, im): (f64, f64) = (
            StandardNormal.sample(&mut rng),
            StandardNormal.sample(&mut rng),
        );
        *c = C64::new(re, im) * (1.0 + q2).powf(-decay / 2.0);
    }
    // f(x) = Σ_m c_m e^{iq·x}, independent of the grid size
    let sp = Spectral::new(grid);
    sp.transform(&mut coef, 1, false);
    let s = (npts as f64).sqrt();
    coef.iter_mut().for_each(|v| *v *= s);
    WaveFunction::new(*grid, coef)
}

/// |f⟩⟨f|^{⊗m} in separable form.
pub fn product_marginal(f: &WaveFunction, m: usize) -> Result<DensityMatrix> {
    let term = SepTerm {
        coef: C64::new(1.0, 0.0),
        f: vec![f.values.clone(); m],
        g: vec![f.values.clone(); m],
    };
    DensityMatrix::separable(m, f.grid, vec![term], true, true)
}

#[derive(Clone, Debug, Serialize)]
pub struct EnsembleConfig {
    pub d: usize,
    pub l: f64,
    pub ns: Vec<usize>,
    pub p: usize,
    pub k: usize,
    pub alpha: f64,
    pub window: f64,
    pub samples: usize,
    pub draws: u64,
    pub seed: u64,
    pub decay: f64,
}

impl Default for EnsembleConfig {
    fn default() -> Self {
        EnsembleConfig {
            d: 2,
            l: 2.0 * std::f64::consts::PI,
            ns: vec![8, 16, 24],
            p: 2,
            k: 1,
            alpha: 0.8,
            window: 0.5,
            samples: 65,
            draws: 100,
            seed: 7,
            decay: 2.0,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct EnsembleRow {
    pub n: usize,
    pub max_ratio: f64,
    pub mean_ratio: f64,
    pub in_alpha_set: bool,
}

/// Ensemble of factorized random-field data |f⟩⟨f|^{⊗(k+p/2)} across grid refinements.
pub fn strichartz_ensemble(cfg: &EnsembleConfig) -> Result<Vec<EnsembleRow>> {
    if cfg.draws == 0 || cfg.ns.is_empty() {
        return arg("empty ensemble");
    }
    let order = cfg.k + cfg.p / 2;
    cfg.ns
        .iter()
        .map(|&n| {
            let grid = GridSpec::new(cfg.d, n, cfg.l)?;
            let mut ratios = Vec::with_capacity(cfg.draws as usize);
            let mut in_set = true;
            for draw in 0..cfg.draws {
                let f = random_field(&grid, cfg.seed, draw, cfg.decay)?;
                let r = strichartz_ratio(
                    &product_marginal(&f, order)?,
                    cfg.p,
                    1,
                    cfg.alpha,
                    cfg.window,
                    cfg.samples,
                )?;
                in_set = r.in_alpha_set;
                ratios.push(r.ratio);
            }
            Ok(EnsembleRow {
                n,
                max_ratio: ratios.iter().cloned().fold(0.0, f64::max),
                mean_ratio: ratios.iter().sum::<f64>() / ratios.len() as f64,
                in_alpha_set: in_set,
            })
        })
        .collect()
}

#[derive(Clone, Debug, Serialize)]
pub struct J1Row {
    pub alpha: f64,
    pub lambda: usize,
    pub value: f64,
    /// Fitted growth exponent of the cutoff increments; repeated on every row of one α.
    pub exponent: f64,
}

fn nd_fft(data: &mut [C64], m: usize, d: usize, forward: bool) {
    let mut planner = FftPlanner::new();
    let fft = if forward {
        planner.plan_fft_forward(m)
    } else {
        planner.plan_fft_inverse(m)
    };
    let total = data.len();
    let mut line = vec![C64::new(0.0, 0.0); m];
    for axis in 0..d {
        let stride = m.pow((d - 1 - axis) as u32);
        for base in 0..total {
            if (base / stride) % m != 0 {
                continue;
            }
            for i in 0..m {
                line[i] = data[base + i * stride];
            }
            fft.process(&mut line);
            for i in 0..m {
                data[base + i * stride] = line[i];
            }
        }
    }
}

/// Lattice sum over (Z + 1/2)^d ∩ [-Λ, Λ)^d of f^{*(p-1)}(w) / |e1 + w| with f = ⟨q⟩^{-2α}.
pub fn j1_lattice_value(d: usize, p: usize, alpha: f64, lambda: usize) -> Result<f64> {
    if !(1..=3).contains(&d) || (p != 2 && p != 4) {
        return arg("j1 scan needs d in 1..=3 and p in {2, 4}");
    }
    let nside = 2 * lambda;
    let coord = |i: usize| i as f64 - lambda as f64 + 0.5;
    let f = |idx: &[usize]| {
        let q2: f64 = idx.iter().map(|&i| coord(i).powi(2)).sum();
        (1.0 + q2).powf(-alpha)
    };
    let index = |mut p: usize, side: usize| {
        let mut idx = [0usize; 3];
        for a in (0..d).rev() {
            idx[a] = p % side;
            p /= side;
        }
        idx
    };
    if p == 2 {
        let total = nside.pow(d as u32);
        let mut s = 0.0;
        for pt in 0..total {
            let idx = index(pt, nside);
            let den: f64 = (0..d)
                .map(|a| (coord(idx[a]) + if a == 0 { 1.0 } else { 0.0 }).powi(2))
                .sum::<f64>()
                .sqrt();
            s += f(&idx[..d]) / den;
        }
        return Ok(s);
    }
    let folds = p - 1;
    let span = folds * (nside - 1) + 1;
    let m = span.next_power_of_two().max(span);
    let bytes = (m as u128).pow(d as u32) * 16;
    if bytes > mem_budget() {
        return Err(GphError::Capacity {
            needed: bytes,
            budget: mem_budget(),
        });
    }
    let mut buf = vec![C64::new(0.0, 0.0); m.pow(d as u32)];
    for pt in 0..nside.pow(d as u32) {
        let idx = index(pt, nside);
        let flat = (0..d).fold(0, |acc, a| acc * m + idx[a]);
        buf[flat] = C64::new(f(&idx[..d]), 0.0);
    }
    nd_fft(&mut buf, m, d, true);
    buf.iter_mut().for_each(|v| *v = v.powu(folds as u32));
    nd_fft(&mut buf, m, d, false);
    let scale = 1.0 / (m.pow(d as u32) as f64);
    // index sum i1+..+i_f maps to coordinate (sum) - f·Λ + f/2
    let offset = folds as f64 * (0.5 - lambda as f64);
    let mut s = 0.0;
    for pt in 0..span.pow(d as u32) {
        let idx = index(pt, span);
        let flat = (0..d).fold(0, |acc, a| acc * m + idx[a]);
        let den: f64 = (0..d)
            .map(|a| (idx[a] as f64 + offset + if a == 0 { 1.0 } else { 0.0 }).powi(2))
            .sum::<f64>()
            .sqrt();
        s += buf[flat].re * scale / den;
    }
    Ok(s)
}

/// Growth exponent of increments D_i = I(Λ_{i+1}) - I(Λ_i) on a doubling ladder, fitted
/// with a leading power plus a correction suppressed by Λ^{-(d-2α)}; falls back to the
/// plain log-log slope of the last two increments when that model does not apply.
pub fn increment_exponent(values: &[f64], d: usize, alpha: f64) -> Result<f64> {
    if values.len() < 3 {
        return Err(GphError::InsufficientData(
            "need at least three cutoffs".into(),
        ));
    }
    let inc: Vec<f64> = values.windows(2).map(|w| w[1] - w[0]).collect();
    let m = inc.len();
    let plain = (inc[m - 1] / inc[m - 2]).log2();
    let delta = d as f64 - 2.0 * alpha;
    if m < 3 || delta <= 0.05 || inc.iter().any(|v| !(*v > 0.0)) {
        return Ok(plain);
    }
    let (d1, d2, d3) = (inc[m - 3], inc[m - 2], inc[m - 1]);
    let rho = 2f64.powf(-delta);
    let (a, b, c) = (rho * d1, -(1.0 + rho) * d2, d3);
    let disc = b * b - 4.0 * a * c;
    if disc < 0.0 {
        return Ok(plain);
    }
    let sq = disc.sqrt();
    let roots = [(-b + sq) / (2.0 * a), (-b - sq) / (2.0 * a)];
    // D_i = A x^i + B (ρx)^i; keep the root whose correction share of the last increment is smaller
    let mut best: Option<(f64, f64)> = None;
    for x in roots {
        if !(x > 0.0) {
            continue;
        }
        let y = rho * x;
        if (x - y).abs() < 1e-300 {
            continue;
        }
        let big_a = (d2 - y * d1) / (x * (x - y));
        let corr = ((d3 - big_a * x.powi(3)) / d3).abs();
        if best.is_none_or(|(_, c0)| corr < c0) {
            best = Some((x.log2(), corr));
        }
    }
    Ok(best.map_or(plain, |(e, _)| e))
}

pub fn j1_threshold_scan(
    d: usize,
    p: usize,
    alphas: &[f64],
    lambdas: &[usize],
) -> Result<Vec<J1Row>> {
    if alphas.is_empty() {
        return arg("empty α grid");
    }
    if lambdas.len() < 3
        || lambdas.iter().any(|l| *l < 8)
        || lambdas.windows(2).any(|w| w[1] != 2 * w[0])
    {
        return arg("cutoffs must be a doubling ladder of at least three values, each ≥ 8");
    }
    let mut rows = Vec::new();
    for &alpha in alphas {
        let vals = lambdas
            .iter()
            .map(|&l| j1_lattice_value(d, p, alpha, l))
            .collect::<Result<Vec<_>>>()?;
        let e = increment_exponent(&vals, d, alpha)?;
        rows.extend(lambdas.iter().zip(&vals).map(|(&lambda, &value)| J1Row {
            alpha,
            lambda,
            value,
            exponent: e,
        }));
    }
    Ok(rows)
}

/// First α interval on which the fitted exponent changes from positive to non-positive.
pub fn threshold_bracket(rows: &[J1Row]) -> Option<(f64, f64)> {
    let mut per: Vec<(f64, f64)> = Vec::new();
    for r in rows {
        if per.last().is_none_or(|(a, _)| *a != r.alpha) {
            per.push((r.alpha, r.exponent));
        }
    }
    per.windows(2)
        .find(|w| w[0].1 > 0.0 && w[1].1 <= 0.0)
        .map(|w| (w[0].0, w[1].0))
}

#[derive(Clone, Debug, Serialize)]
pub struct BoundRow {
    pub k: usize,
    pub j: usize,
    pub t: f64,
    pub value: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct BoundProbe {
    pub rows: Vec<BoundRow>,
    pub exponent: f64,
}

/// ∫_0^T ‖B_{k+1} Duh_j(Γ₀)^{(k+1)}(t)‖_{H^α_k} dt on each T, and the fitted T-exponent.
pub fn iterated_bound_probe(
    g0: &HierarchyState,
    k: usize,
    j: usize,
    ts: &[f64],
    alpha: f64,
    qn: usize,
) -> Result<BoundProbe> {
    if j > 2 || k == 0 {
        return arg("need k ≥ 1 and j ≤ 2");
    }
    if ts.len() < 2 || ts.iter().any(|t| !(*t > 0.0)) {
        return arg("need at least two positive horizons");
    }
    let top = k + 1 + j * g0.model.q();
    if top > g0.depth() {
        return arg(format!(
            "needs level {top} but the state has depth {}",
            g0.depth()
        ));
    }
    if let Repr::Dense(_) = g0.marginals[top - 1].repr {
        check_dense(&g0.grid(), top)?;
    }
    let mut rows = Vec::new();
    for &t_end in ts {
        let (nodes, weights) = gauss_legendre(qn, 0.0, t_end)?;
        let mut value = 0.0;
        for (t, w) in nodes.iter().zip(&weights) {
            let duh = duhamel_term(g0, j, k, *t, qn)?;
            value += w * h_alpha_norm(&apply_b_full(&duh, g0.model.p)?, alpha)?;
        }
        rows.push(BoundRow {
            k,
            j,
            t: t_end,
            value,
        });
    }
    let vals: Vec<f64> = rows.iter().map(|r| r.value).collect();
    let exponent = if vals.iter().all(|v| *v == 0.0) {
        0.0
    } else {
        order_fit(ts, &vals)?
    };
    Ok(BoundProbe { rows, exponent })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::state::{Closure, Model, ReprKind};
    use proptest::prelude::*;

    fn field_state(n: usize, draw: u64) -> DensityMatrix {
        let g = GridSpec::new(2, n, 2.0 * std::f64::consts::PI).unwrap();
        product_marginal(&random_field(&g, 11, draw, 2.0).unwrap(), 2).unwrap()
    }

    #[test]
    fn ratio_guards_and_homogeneity() {
        let g0 = field_state(8, 0);
        let r = strichartz_ratio(&g0, 2, 1, 0.8, 0.5, 33).unwrap();
        assert!(r.in_alpha_set && r.ratio.is_finite() && r.ratio > 0.0);
        let r2 = strichartz_ratio(&g0.scaled(C64::new(-3.5, 1.25)), 2, 1, 0.8, 0.5, 33).unwrap();
        assert!((r.ratio - r2.ratio).abs() <= 1e-12 * r.ratio);
        let zero = g0.scaled(C64::new(0.0, 0.0));
        assert!(matches!(
            strichartz_ratio(&zero, 2, 1, 0.8, 0.5, 33),
            Err(GphError::Domain(_))
        ));
        let out = strichartz_ratio(&g0, 2, 1, 0.3, 0.5, 33).unwrap();
        assert!(!out.in_alpha_set && out.ratio.is_finite());
    }

    #[test]
    fn random_fields_nest() {
        let (gc, gf) = (
            GridSpec::new(2, 8, 6.0).unwrap(),
            GridSpec::new(2, 16, 6.0).unwrap(),
        );
        let spc = Spectral::new(&gc);
        let spf = Spectral::new(&gf);
        let mut c = random_field(&gc, 3, 5, 2.0).unwrap().values;
        let mut f = random_field(&gf, 3, 5, 2.0).unwrap().values;
        spc.transform(&mut c, 1, true);
        spf.transform(&mut f, 1, true);
        for p in 0..gc.points() {
            let idx = gc.unflatten(p);
            let (m0, m1) = (gc.freq_index(idx[0]), gc.freq_index(idx[1]));
            let fi = |m: i64| m.rem_euclid(16) as usize;
            let pf = fi(m0) * 16 + fi(m1);
            // unitary transforms differ by the point-count normalization
            let ratio = (gf.points() as f64 / gc.points() as f64).sqrt();
            assert!((c[p] * ratio - f[pf]).norm() < 1e-12 * f[pf].norm().max(1e-300));
        }
        let a = random_field(&gc, 3, 5, 2.0).unwrap().values;
        let b = random_field(&gc, 3, 6, 2.0).unwrap().values;
        assert!(a != b);
    }

    #[test]
    fn ratio_free_flow_covariance() {
        for draw in 0..4 {
            let g0 = field_state(16, draw);
            let base = strichartz_ratio(&g0, 2, 1, 0.8, 0.5, 65).unwrap().ratio;
            for s in [0.02, 0.05] {
                let shifted =
                    strichartz_ratio(&free_propagate(&g0, s).unwrap(), 2, 1, 0.8, 0.5, 65)
                        .unwrap()
                        .ratio;
                assert!(
                    (shifted / base - 1.0).abs() <= 0.1,
                    "draw {draw} s {s}: {base} {shifted}"
                );
            }
        }
    }

    #[test]
    fn endpoint_ratio_sweep_runs() {
        let g = GridSpec::new(3, 8, 2.0 * std::f64::consts::PI).unwrap();
        let f = random_field(&g, 1, 0, 2.0).unwrap();
        let r = strichartz_ratio(&product_marginal(&f, 2).unwrap(), 2, 1, 1.0, 0.5, 17).unwrap();
        assert!(r.in_alpha_set && r.ratio.is_finite());
    }

    #[test]
    fn j1_power_counting() {
        // α = 0: ∫|q|^{-1} d^2q grows like Λ
        let rows = j1_threshold_scan(2, 2, &[0.0], &[8, 16, 32, 64]).unwrap();
        assert!(
            (rows[0].exponent - 1.0).abs() < 0.05,
            "{}",
            rows[0].exponent
        );
        // α = d: increments shrink past Λ = 16
        let rows = j1_threshold_scan(2, 2, &[2.0], &[8, 16, 32, 64]).unwrap();
        let inc: Vec<f64> = rows.windows(2).map(|w| w[1].value - w[0].value).collect();
        assert!(inc[2] < inc[1] && inc[1] < inc[0]);
        assert!(rows[0].exponent < 0.0);
        assert!(j1_threshold_scan(2, 2, &[0.5], &[4, 8, 16]).is_err());
        assert!(j1_threshold_scan(2, 2, &[], &[8, 16, 32]).is_err());
    }

    #[test]
    fn j1_quintic_convolution_matches_direct_sum() {
        // d = 1, small cutoff: compare the FFT triple convolution with an explicit triple loop
        let (alpha, lambda) = (0.4, 8usize);
        let n = 2 * lambda;
        let c = |i: usize| i as f64 - lambda as f64 + 0.5;
        let f = |i: usize| (1.0 + c(i).powi(2)).powf(-alpha);
        let mut s = 0.0;
        for a in 0..n {
            for b in 0..n {
                for e in 0..n {
                    s += f(a) * f(b) * f(e) / (1.0 + c(a) + c(b) - c(e)).abs();
                }
            }
        }
        let v = j1_lattice_value(1, 4, alpha, lambda).unwrap();
        assert!((v - s).abs() < 1e-10 * s, "{v} {s}");
    }

    #[test]
    fn j1_increment_model_recovers_synthetic_exponent() {
        // I(Λ) with increments A x^i + B (ρx)^i exactly
        let (d, alpha, e) = (2usize, 0.3, 0.4);
        let rho = 2f64.powf(-(d as f64 - 2.0 * alpha));
        let x = 2f64.powf(e);
        let mut vals = vec![1.0];
        for i in 1..4 {
            let inc = 3.0 * x.powi(i) - 5.0 * (rho * x).powi(i);
            vals.push(vals[i as usize - 1] + inc);
        }
        assert!((increment_exponent(&vals, d, alpha).unwrap() - e).abs() < 1e-10);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(6))]
        #[test]
        fn j1_exponent_decreases_in_alpha(a in 0.3f64..0.65) {
            let rows = j1_threshold_scan(2, 2, &[a, a + 0.05], &[8, 16, 32, 64]).unwrap();
            prop_assert!(rows[4].exponent < rows[0].exponent);
        }
    }

    fn bound_state(zero: bool) -> HierarchyState {
        let g = GridSpec::new(1, 16, 8.0).unwrap();
        let phi = WaveFunction::gaussian(&g, 1.0, 0.5, 0.0).unwrap();
        let phi = if zero {
            phi.scaled(C64::new(0.0, 0.0))
        } else {
            phi
        };
        HierarchyState::factorized(
            &phi,
            4,
            Model::new(2, 1.0, 1).unwrap(),
            Closure::Zero,
            ReprKind::Separable,
        )
        .unwrap()
    }

    #[test]
    fn iterated_bound_exponents() {
        let st = bound_state(false);
        let ts = [0.01, 0.02, 0.04];
        let e: Vec<f64> = (0..=2)
            .map(|j| {
                iterated_bound_probe(&st, 1, j, &ts, 1.0, 6)
                    .unwrap()
                    .exponent
            })
            .collect();
        for (j, ej) in e.iter().enumerate() {
            assert!(*ej >= (j as f64 + 1.0) / 2.0 - 0.25, "j={j} {e:?}");
        }
        assert!(e.windows(2).all(|w| w[1] >= w[0]), "{e:?}");
        // L¹ in time of an O(t) integrand
        assert!((e[1] - 2.0).abs() < 0.1, "{e:?}");
        let z = iterated_bound_probe(&bound_state(true), 1, 2, &ts, 1.0, 6).unwrap();
        assert!(z.rows.iter().all(|r| r.value == 0.0));
        assert!(iterated_bound_probe(&st, 1, 3, &ts, 1.0, 6).is_err());
    }
}
