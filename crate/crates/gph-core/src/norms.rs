//! Marginal and hierarchy norms, per-particle averages, time-integrated norms.

use num_complex::Complex64 as C64;
use serde::Serialize;

use crate::error::{arg, GphError, Result};
use crate::grid::Spectral;
use crate::linalg;
use crate::state::{CoreData, DensityMatrix, HierarchyState, Repr, SepTerm};

fn bracket_fn(sp: &Spectral, q2: &[f64], f: &[C64], alpha: f64) -> Vec<C64> {
    let mut g = f.to_vec();
    sp.fft1(&mut g, true);
    g.iter_mut()
        .zip(q2)
        .for_each(|(v, q)| *v *= (1.0 + q).powf(alpha / 2.0));
    sp.fft1(&mut g, false);
    g
}

/// Core weighted by S^{(k,α)} in the basis metric (R on unprimed axes, conj R on primed).
pub(crate) fn weighted_core(core: &[C64], k: usize, r: usize, rmat: &[C64]) -> Vec<C64> {
    let rc: Vec<C64> = rmat.iter().map(|v| v.conj()).collect();
    let mats: Vec<&[C64]> = (0..2 * k)
        .map(|ax| if ax < k { rmat } else { &rc[..] })
        .collect();
    linalg::mode_mul_all(core, r, &mats)
}

/// ‖S^{(k,α)} γ‖_{L²}.
pub fn h_alpha_norm(gamma: &DensityMatrix, alpha: f64) -> Result<f64> {
    if alpha < 0.0 {
        return arg(format!("alpha = {alpha} < 0"));
    }
    let k = gamma.k;
    match &gamma.repr {
        Repr::Dense(d) => {
            let mut v = d.clone();
            let sp = Spectral::new(&gamma.grid);
            sp.transform(&mut v, 2 * k, true);
            let q2 = gamma.grid.q2_table();
            let w: Vec<C64> = q2
                .iter()
                .map(|q| C64::new((1.0 + q).powf(alpha / 2.0), 0.0))
                .collect();
            for s in 0..2 * k {
                Spectral::weight_slot(&mut v, w.len(), 2 * k, s, &w);
            }
            Ok(linalg::frob(&v) * gamma.grid.cell().powf(k as f64))
        }
        Repr::Separable(terms) => {
            let sp = Spectral::new(&gamma.grid);
            let q2 = gamma.grid.q2_table();
            let t: Vec<SepTerm> = terms
                .iter()
                .map(|t| t.map_factors(|f| bracket_fn(&sp, &q2, f, alpha)))
                .collect();
            let m = DensityMatrix::separable(k, gamma.grid, t, gamma.hermitian, gamma.symmetric)?;
            Ok(m.l2_norm())
        }
        Repr::Tucker(tk) => {
            let r = tk.basis.rank;
            let rmat = tk.basis.bracket_factor(alpha)?;
            Ok(match &tk.core {
                CoreData::Full(c) => linalg::frob(&weighted_core(c, k, r, &rmat)),
                CoreData::Kron(ks) => {
                    let w = ks.weighted(&rmat);
                    w.inner(&w).re.max(0.0).sqrt()
                }
            })
        }
    }
}

/// Discrete L^r norm of the kernel with mesh weight h^{2dk}.
pub fn lr_norm(gamma: &DensityMatrix, r: f64) -> Result<f64> {
    if r < 1.0 {
        return arg(format!("r = {r} < 1"));
    }
    let d = gamma.to_dense()?;
    let w = gamma.grid.cell().powi(2 * gamma.k as i32);
    Ok((w * d.iter().map(|v| v.norm().powf(r)).sum::<f64>()).powf(1.0 / r))
}

#[derive(Clone, Debug, Serialize)]
pub struct NormReport {
    pub values: Vec<f64>,
    pub xi: f64,
    pub partial_sums: Vec<f64>,
    pub total: f64,
    pub ratios: Vec<f64>,
    pub radius_estimate: f64,
    pub tail_converges: bool,
}

impl NormReport {
    pub fn from_values(values: Vec<f64>, xi: f64) -> NormReport {
        let mut partial_sums = Vec::with_capacity(values.len());
        let mut acc = 0.0;
        for (i, a) in values.iter().enumerate() {
            acc += xi.powi(i as i32 + 1) * a;
            partial_sums.push(acc);
        }
        let ratios: Vec<f64> = values
            .windows(2)
            .map(|w| if w[0] > 0.0 { w[1] / w[0] } else { 0.0 })
            .collect();
        let tail_converges = ratios.iter().all(|r| xi * r < 1.0);
        let radius_estimate = match trailing_geo_mean(&ratios, values.len()) {
            Some(g) if g > 0.0 => 1.0 / g,
            _ => f64::INFINITY,
        };
        NormReport {
            values,
            xi,
            total: acc,
            partial_sums,
            ratios,
            radius_estimate,
            tail_converges,
        }
    }
}

fn trailing_geo_mean(ratios: &[f64], depth: usize) -> Option<f64> {
    let take = depth.div_ceil(2).min(ratios.len());
    if take == 0 {
        return None;
    }
    let tail = &ratios[ratios.len() - take..];
    if tail.iter().any(|&r| r <= 0.0) {
        return Some(0.0);
    }
    Some((tail.iter().map(|r| r.ln()).sum::<f64>() / take as f64).exp())
}

pub fn sequence_h_norm(levels: &[DensityMatrix], xi: f64, alpha: f64) -> Result<NormReport> {
    let values = levels
        .iter()
        .map(|g| h_alpha_norm(g, alpha))
        .collect::<Result<Vec<_>>>()?;
    Ok(NormReport::from_values(values, xi))
}

pub fn hierarchy_norm(state: &HierarchyState, xi: f64, alpha: f64) -> Result<NormReport> {
    if !(xi > 0.0 && xi < 1.0) {
        return arg(format!("xi = {xi} outside (0, 1)"));
    }
    sequence_h_norm(&state.marginals, xi, alpha)
}

pub fn lr_hierarchy_norm(state: &HierarchyState, xi: f64, r: f64) -> Result<NormReport> {
    if !(xi > 0.0 && xi < 1.0) {
        return arg(format!("xi = {xi} outside (0, 1)"));
    }
    let values = state
        .marginals
        .iter()
        .map(|g| lr_norm(g, r))
        .collect::<Result<Vec<_>>>()?;
    Ok(NormReport::from_values(values, xi))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub enum AvKind {
    HAlpha(f64),
    Lr(f64),
}

/// Per-particle average: geometric mean of the trailing ⌈K/2⌉ ratios a_{k+1}/a_k.
pub fn estimate_av(state: &HierarchyState, which: AvKind) -> Result<f64> {
    estimate_av_levels(&state.marginals, which)
}

pub fn estimate_av_levels(levels: &[DensityMatrix], which: AvKind) -> Result<f64> {
    if levels.len() < 3 {
        return Err(GphError::InsufficientData(format!(
            "{} levels, need at least 3",
            levels.len()
        )));
    }
    let values = levels
        .iter()
        .map(|g| match which {
            AvKind::HAlpha(a) => h_alpha_norm(g, a),
            AvKind::Lr(r) => lr_norm(g, r),
        })
        .collect::<Result<Vec<_>>>()?;
    av_from_values(&values)
}

pub fn av_from_values(values: &[f64]) -> Result<f64> {
    if values.len() < 3 {
        return Err(GphError::InsufficientData(format!(
            "{} levels, need at least 3",
            values.len()
        )));
    }
    let ratios: Vec<f64> = values.windows(2).map(|w| w[1] / w[0]).collect();
    if ratios.iter().any(|r| !r.is_finite()) {
        return Err(GphError::Numeric(
            "zero marginal in average estimate".into(),
        ));
    }
    Ok(trailing_geo_mean(&ratios, values.len()).unwrap_or(0.0))
}

/// Trapezoid L¹_t of ‖·‖_{ℋ^α_ξ} over time-indexed samples.
pub fn strichartz_l1_norm(
    times: &[f64],
    samples: &[Vec<DensityMatrix>],
    xi: f64,
    alpha: f64,
) -> Result<f64> {
    let values = samples
        .iter()
        .map(|s| sequence_h_norm(s, xi, alpha).map(|r| r.total))
        .collect::<Result<Vec<_>>>()?;
    trapezoid(times, &values)
}

pub fn trapezoid(times: &[f64], values: &[f64]) -> Result<f64> {
    if times.len() != values.len() {
        return arg("time and value counts differ");
    }
    if times.len() < 2 {
        return arg("need at least two time samples");
    }
    if times.windows(2).any(|w| w[1] <= w[0]) {
        return arg("time samples are not strictly increasing");
    }
    Ok(times
        .windows(2)
        .zip(values.windows(2))
        .map(|(t, v)| 0.5 * (t[1] - t[0]) * (v[0] + v[1]))
        .sum())
}

pub fn alpha_set_check(d: usize, p: usize, alpha: f64) -> bool {
    match (d, p) {
        (1, _) => alpha > 0.5,
        (3, 2) => alpha >= 1.0,
        _ => alpha > d as f64 / 2.0 - 1.0 / (2.0 * (p as f64 - 1.0)),
    }
}

/// Tr(S^{(k,1)} γ) computed in frequency space.
pub fn trace_energy_bound(gamma: &DensityMatrix) -> Result<f64> {
    if !gamma.hermitian {
        return Err(GphError::State(
            "trace energy needs a hermitian marginal".into(),
        ));
    }
    let k = gamma.k;
    match &gamma.repr {
        Repr::Tucker(tk) => {
            let r = tk.basis.rank;
            let g = tk.basis.bracket_gram(1.0);
            if k != 1 {
                return trace_energy_bound(&gamma.materialized()?);
            }
            let c = tk.core.full();
            Ok((0..r)
                .flat_map(|a| (0..r).map(move |b| (a, b)))
                .map(|(a, b)| c[a * r + b] * g[b * r + a])
                .sum::<C64>()
                .re)
        }
        Repr::Separable(terms) => {
            let sp = Spectral::new(&gamma.grid);
            let q2 = gamma.grid.q2_table();
            let h = gamma.grid.cell();
            Ok(terms
                .iter()
                .map(|t| {
                    t.f.iter().zip(&t.g).fold(t.coef, |acc, (f, g)| {
                        acc * linalg::dot(
                            &bracket_fn(&sp, &q2, g, 1.0),
                            &bracket_fn(&sp, &q2, f, 1.0),
                        ) * h
                    })
                })
                .sum::<C64>()
                .re)
        }
        Repr::Dense(d) => {
            let mut v = d.clone();
            let sp = Spectral::new(&gamma.grid);
            for s in 0..2 * k {
                sp.transform_slot(&mut v, 2 * k, s, s < k);
            }
            let q2 = gamma.grid.q2_table();
            let npts = q2.len();
            let nk = npts.pow(k as u32);
            let mut s = C64::new(0.0, 0.0);
            for x in 0..nk {
                let mut w = 1.0;
                let mut rem = x;
                for _ in 0..k {
                    w *= 1.0 + q2[rem % npts];
                    rem /= npts;
                }
                s += v[x * nk + x] * w;
            }
            Ok((s * gamma.grid.cell().powi(k as i32)).re)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::GridSpec;
    use crate::state::*;
    use crate::testutil::*;
    use std::f64::consts::PI;

    #[test]
    fn alpha_zero_is_l2() {
        let g = GridSpec::new(1, 8, 5.0).unwrap();
        let m = random_dense(2, &g, 2);
        assert!((h_alpha_norm(&m, 0.0).unwrap() - m.l2_norm()).abs() < 1e-12 * m.l2_norm());
        assert!(h_alpha_norm(&m, -1.0).is_err());
    }

    #[test]
    fn factorized_h_alpha() {
        let g = GridSpec::new(1, 16, 6.0).unwrap();
        let phi = random_wave(3, &g);
        for k in 1..=2 {
            for repr in [ReprKind::Dense, ReprKind::Separable] {
                let m = from_factorized(&phi, k, repr).unwrap();
                let want = phi.h_alpha_norm(0.7).powi(2 * k as i32);
                assert!((h_alpha_norm(&m, 0.7).unwrap() - want).abs() < 1e-12 * want);
            }
        }
    }

    #[test]
    fn plane_wave_kernel() {
        let g = GridSpec::new(1, 8, 2.0 * PI).unwrap();
        let n = 8;
        let mut d = vec![C64::new(0.0, 0.0); n * n];
        for i in 0..n {
            for j in 0..n {
                d[i * n + j] = C64::from_polar(1.0, g.coord(i));
            }
        }
        let m = DensityMatrix::from_dense(1, g, d);
        // ‖e^{ix}‖² · ‖1‖² = (2π)²
        let want = 2f64.sqrt() * (2.0 * PI) * 1.0 * (2.0 * PI).sqrt() / (2.0 * PI).sqrt();
        assert!((h_alpha_norm(&m, 1.0).unwrap() - want).abs() < 1e-12 * want);
    }

    #[test]
    fn geometric_partial_sum() {
        let g = GridSpec::new(1, 8, 6.0).unwrap();
        let phi = WaveFunction::gaussian(&g, 1.0, 0.0, 0.0).unwrap();
        let s = phi.h_alpha_norm(1.0).powi(2);
        let xi = 0.5 / s;
        let model = Model::new(2, 1.0, 1).unwrap();
        let st = HierarchyState::factorized(&phi, 10, model, Closure::Zero, ReprKind::Separable)
            .unwrap();
        let rep = hierarchy_norm(&st, xi, 1.0).unwrap();
        assert!((rep.total - 0.9990234375).abs() < 1e-12);
        assert!(rep.partial_sums.windows(2).all(|w| w[1] >= w[0]));
        assert!(rep.tail_converges);
        let av = estimate_av(&st, AvKind::HAlpha(1.0)).unwrap();
        assert!((av - s).abs() < 1e-10 * s);
    }

    #[test]
    fn unit_energy_average_is_one() {
        let g = GridSpec::new(1, 8, 2.0 * PI).unwrap();
        // constant state: ‖φ‖_{H^α} = ‖φ‖_{L²} = 1
        let phi = WaveFunction::new(g, vec![C64::new(1.0, 0.0); 8])
            .unwrap()
            .normalized()
            .unwrap();
        let model = Model::new(2, 1.0, 1).unwrap();
        let st =
            HierarchyState::factorized(&phi, 4, model, Closure::Zero, ReprKind::Separable).unwrap();
        assert!((estimate_av(&st, AvKind::HAlpha(1.3)).unwrap() - 1.0).abs() < 1e-10);
        let short =
            HierarchyState::factorized(&phi, 2, model, Closure::Zero, ReprKind::Separable).unwrap();
        assert!(matches!(
            estimate_av(&short, AvKind::HAlpha(1.0)),
            Err(GphError::InsufficientData(_))
        ));
    }

    #[test]
    fn mixture_average_dominant() {
        let g = GridSpec::new(1, 32, 12.0).unwrap();
        let phi = WaveFunction::gaussian(&g, 1.0, 0.0, 0.0).unwrap();
        let psi = WaveFunction::gaussian(&g, 0.8, 1.0, 0.0).unwrap();
        let (sp, sq) = (phi.h_alpha_norm(1.0).powi(2), psi.h_alpha_norm(1.0).powi(2));
        let levels: Vec<DensityMatrix> = (1..=8)
            .map(|k| {
                let a = from_factorized(&phi, k, ReprKind::Separable).unwrap();
                let b = from_factorized(&psi, k, ReprKind::Separable).unwrap();
                a.scaled(C64::new(0.5, 0.0))
                    .add_scaled(C64::new(0.5, 0.0), &b)
                    .unwrap()
            })
            .collect();
        let av = estimate_av_levels(&levels, AvKind::HAlpha(1.0)).unwrap();
        let want = sp.max(sq);
        assert!((av - want).abs() < 0.05 * want, "{av} vs {want}");
    }

    #[test]
    fn lr_examples() {
        let g = GridSpec::new(1, 8, 5.0).unwrap();
        let m = random_dense(7, &g, 1);
        assert!((lr_norm(&m, 2.0).unwrap() - m.l2_norm()).abs() < 1e-12);
        let phi = random_wave(5, &g);
        let f = from_factorized(&phi, 2, ReprKind::Dense).unwrap();
        let want = phi.lr_norm(3.0).powi(4);
        assert!((lr_norm(&f, 3.0).unwrap() - want).abs() < 1e-12 * want);
        let model = Model::new(2, 1.0, 1).unwrap();
        let st = HierarchyState::new(
            model,
            Closure::Zero,
            0.0,
            vec![DensityMatrix::zeros(1, g).unwrap()],
        )
        .unwrap();
        assert_eq!(lr_hierarchy_norm(&st, 0.5, 3.0).unwrap().total, 0.0);
        assert_eq!(hierarchy_norm(&st, 0.5, 1.0).unwrap().total, 0.0);
    }

    #[test]
    fn hierarchy_norm_recomputes() {
        let g = GridSpec::new(1, 4, 3.0).unwrap();
        let ms: Vec<DensityMatrix> = (1..=3).map(|k| random_dense(k as u64, &g, k)).collect();
        let model = Model::new(2, 1.0, 1).unwrap();
        let st = HierarchyState::new(model, Closure::Zero, 0.0, ms.clone()).unwrap();
        let rep = hierarchy_norm(&st, 0.3, 0.5).unwrap();
        // independent path: bracket via the multiplier then plain L²
        let mut want = 0.0;
        for (i, m) in ms.iter().enumerate() {
            let p = crate::grid::MultiplierProfile::new(
                &g,
                crate::grid::MultiplierKind::Bracket { alpha: 0.5 },
            )
            .unwrap();
            want +=
                0.3f64.powi(i as i32 + 1) * crate::grid::apply_multiplier(m, &p).unwrap().l2_norm();
        }
        assert!((rep.total - want).abs() < 1e-12 * want);
        assert!(hierarchy_norm(&st, 0.4, 0.5).unwrap().total > rep.total);
        assert!(hierarchy_norm(&st, 0.3, 0.9).unwrap().total > rep.total);
    }

    #[test]
    fn l1_norm_examples() {
        let g = GridSpec::new(1, 4, 3.0).unwrap();
        let z = DensityMatrix::zeros(1, g).unwrap();
        let times = [0.0, 0.1, 0.2];
        let zs = vec![vec![z.clone()]; 3];
        assert_eq!(strichartz_l1_norm(&times, &zs, 0.5, 1.0).unwrap(), 0.0);
        let m = random_dense(1, &g, 1);
        let c = 0.5 * h_alpha_norm(&m, 1.0).unwrap();
        let ms = vec![vec![m.clone()]; 3];
        assert!((strichartz_l1_norm(&times, &ms, 0.5, 1.0).unwrap() - c * 0.2).abs() < 1e-14);
        assert!(strichartz_l1_norm(&[0.0, 0.2, 0.1], &ms, 0.5, 1.0).is_err());
    }

    #[test]
    fn alpha_set_examples() {
        assert!(alpha_set_check(3, 2, 1.0));
        assert!(!alpha_set_check(3, 2, 0.99));
        assert!(!alpha_set_check(2, 2, 0.5));
        assert!(alpha_set_check(2, 2, 0.51));
        assert!(alpha_set_check(1, 4, 0.6));
        assert!(!alpha_set_check(1, 2, 0.5));
        assert!(alpha_set_check(2, 4, 0.84));
        assert!(!alpha_set_check(2, 4, 0.83));
    }

    #[test]
    fn trace_energy_examples() {
        let g = GridSpec::new(1, 16, 8.0).unwrap();
        let phi = random_wave(2, &g);
        for repr in [ReprKind::Dense, ReprKind::Separable] {
            let m = from_factorized(&phi, 1, repr).unwrap();
            let want = phi.h_alpha_norm(1.0).powi(2);
            assert!((trace_energy_bound(&m).unwrap() - want).abs() < 1e-12 * want);
        }
        let g = GridSpec::new(1, 8, 2.0 * PI).unwrap();
        let c = WaveFunction::new(g, vec![C64::new(1.0, 0.0); 8])
            .unwrap()
            .normalized()
            .unwrap();
        let m = from_factorized(&c, 1, ReprKind::Dense).unwrap();
        assert!((trace_energy_bound(&m).unwrap() - 1.0).abs() < 1e-12);
        let nh = random_dense(1, &g, 1);
        assert!(trace_energy_bound(&nh).is_err());
    }

    #[test]
    fn trace_energy_against_eigendecomposition() {
        let g = GridSpec::new(1, 16, 5.0).unwrap();
        let m = random_psd(11, &g, 1);
        let w = g.cell();
        let (vals, vecs) = linalg::herm_eig(
            16,
            &m.dense().unwrap().iter().map(|v| v * w).collect::<Vec<_>>(),
        );
        let mut want = 0.0;
        for (l, v) in vals.iter().zip(&vecs) {
            let f = WaveFunction::new(g, v.iter().map(|x| x / w.sqrt()).collect()).unwrap();
            want += l * f.h_alpha_norm(1.0).powi(2);
        }
        let tr = trace_energy_bound(&m).unwrap();
        assert!((tr - want).abs() < 1e-10 * want);
        assert!(h_alpha_norm(&m, 1.0).unwrap() <= tr);
    }
}
