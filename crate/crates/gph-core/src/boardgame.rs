//! Echelon-class combinatorics and small-instance checks of the Duhamel collapse.

use num_complex::Complex64 as C64;
use serde::Serialize;

use crate::contraction::apply_b_single;
use crate::error::{arg, GphError, Result};
use crate::grid::free_propagate;
use crate::linalg;
use crate::quad::gauss_legendre;
use crate::state::{check_dense, DensityMatrix, HierarchyState, Repr};

pub const ENUM_GUARD: usize = 24;

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize)]
pub struct EchelonSequence {
    pub j: usize,
    pub k: usize,
    pub mu: Vec<usize>,
}

impl EchelonSequence {
    pub fn is_valid(&self) -> bool {
        self.mu.len() == self.j
            && self
                .mu
                .iter()
                .enumerate()
                .all(|(i, &m)| m >= 1 && m <= self.k + i + 1)
            && self.mu.windows(2).all(|w| w[0] >= w[1])
    }
}

/// All nonincreasing sequences with μ(i) ∈ {1..k+i}, lexicographically sorted.
pub fn enumerate_echelon(j: usize, k: usize) -> Result<Vec<EchelonSequence>> {
    if j == 0 || k == 0 {
        return arg("j and k must be at least 1");
    }
    if j + k > ENUM_GUARD {
        return Err(GphError::Capacity {
            needed: (j + k) as u128,
            budget: ENUM_GUARD as u128,
        });
    }
    let mut out = Vec::new();
    let mut cur = Vec::with_capacity(j);
    fill(j, k, &mut cur, &mut out);
    Ok(out)
}

fn fill(j: usize, k: usize, cur: &mut Vec<usize>, out: &mut Vec<EchelonSequence>) {
    let i = cur.len();
    if i == j {
        out.push(EchelonSequence {
            j,
            k,
            mu: cur.clone(),
        });
        return;
    }
    let hi = cur.last().map_or(k + 1, |&m| m.min(k + i + 1));
    for m in 1..=hi {
        cur.push(m);
        fill(j, k, cur, out);
        cur.pop();
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct EchelonRow {
    pub j: usize,
    pub k: usize,
    pub count: usize,
    pub c_min: f64,
}

pub fn echelon_table(jmax: usize, kmax: usize) -> Result<Vec<EchelonRow>> {
    let mut rows = Vec::new();
    for j in 1..=jmax {
        for k in 1..=kmax {
            let count = enumerate_echelon(j, k)?.len();
            rows.push(EchelonRow {
                j,
                k,
                count,
                c_min: (count as f64).powf(1.0 / (j + k) as f64),
            });
        }
    }
    Ok(rows)
}

#[derive(Clone, Debug, Serialize)]
pub struct GrowthFit {
    pub c_min: f64,
    pub slope: f64,
    pub intercept: f64,
    /// Leading coefficient of a quadratic least-squares fit of log(max count) in j+k.
    pub quadratic_coef: f64,
    pub curvature_ratio: f64,
    pub at_most_exponential: bool,
}

/// Smallest C with count ≤ C^{j+k} over all j, k ≥ 1 with j+k in `s_range`, plus a
/// log-linear fit of the largest count per j+k.
pub fn cardinality_growth_fit(s_range: std::ops::RangeInclusive<usize>) -> Result<GrowthFit> {
    let (lo, hi) = (*s_range.start().max(&2), *s_range.end());
    if hi < lo || hi - lo + 1 < 5 {
        return Err(GphError::InsufficientData(
            "need at least five values of j+k".into(),
        ));
    }
    let mut c_min: f64 = 0.0;
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for s in lo..=hi {
        let mut best = 0usize;
        for j in 1..s {
            let c = enumerate_echelon(j, s - j)?.len();
            c_min = c_min.max((c as f64).powf(1.0 / s as f64));
            best = best.max(c);
        }
        xs.push(s as f64);
        ys.push((best as f64).ln());
    }
    let (slope, intercept, quadratic_coef, ratio) = growth_shape(&xs, &ys)?;
    Ok(GrowthFit {
        c_min,
        slope,
        intercept,
        quadratic_coef,
        curvature_ratio: ratio,
        at_most_exponential: slope.is_finite() && ratio <= CURVATURE_LIMIT,
    })
}

/// Largest admissible ratio of the quadratic to the linear part of log(count) across the range.
pub const CURVATURE_LIMIT: f64 = 0.25;

/// Linear fit (slope, intercept) of ys against xs, the quadratic coefficient of a centred
/// quadratic fit, and the size of that quadratic term across the range relative to the linear one.
pub fn growth_shape(xs: &[f64], ys: &[f64]) -> Result<(f64, f64, f64, f64)> {
    let n = xs.len() as f64;
    let (mx, my) = (xs.iter().sum::<f64>() / n, ys.iter().sum::<f64>() / n);
    let sxy: f64 = xs.iter().zip(ys).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = xs.iter().map(|a| (a - mx).powi(2)).sum();
    let slope = sxy / sxx;
    let v = nalgebra::DMatrix::from_fn(xs.len(), 3, |i, c| (xs[i] - mx).powi(c as i32));
    let coef = v
        .svd(true, true)
        .solve(&nalgebra::DVector::from_column_slice(ys), 1e-14)
        .map_err(|e| GphError::Numeric(e.to_string()))?;
    let width = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
        - xs.iter().cloned().fold(f64::INFINITY, f64::min);
    let ratio = coef[2] * width / coef[1].abs();
    Ok((slope, my - slope * mx, coef[2], ratio))
}

/// Number of raw collision-label sequences of a depth-j Duhamel term with output level `level`.
pub fn raw_term_count(level: usize, j: usize) -> u128 {
    (0..j).map(|i| (level + i) as u128).product()
}

/// All raw label sequences μ(i) ∈ {1..level+i-1}, i = 1..j.
pub fn raw_labels(level: usize, j: usize) -> Vec<Vec<usize>> {
    let mut out = vec![Vec::new()];
    for i in 0..j {
        out = out
            .into_iter()
            .flat_map(|s| {
                (1..=level + i).map(move |m| {
                    let mut v = s.clone();
                    v.push(m);
                    v
                })
            })
            .collect();
    }
    out
}

/// U(t - t1) B_{μ1} U(t1 - t2) ... B_{μj} U(tj) γ₀ at output level `level`.
fn raw_integrand(
    g0: &HierarchyState,
    labels: &[usize],
    level: usize,
    t: f64,
    times: &[f64],
) -> Result<DensityMatrix> {
    let p = g0.model.p;
    let q = g0.model.q();
    let j = labels.len();
    let mut g = free_propagate(
        &g0.marginals[level + j * q - 1],
        *times.last().unwrap_or(&t),
    )?;
    for i in (0..j).rev() {
        g = apply_b_single(&g, labels[i], p)?;
        let prev = if i == 0 { t } else { times[i - 1] };
        g = free_propagate(&g, prev - times[i])?;
    }
    Ok(g)
}

/// One raw Duhamel term with nested Gauss-Legendre rules, matching the engine's quadrature.
pub fn raw_duhamel_term(
    g0: &HierarchyState,
    labels: &[usize],
    level: usize,
    t: f64,
    qn: usize,
) -> Result<DensityMatrix> {
    let q = g0.model.q();
    if level + labels.len() * q > g0.depth() {
        return arg("state too shallow for the requested term");
    }
    let c = C64::new(0.0, -g0.model.mu);
    let mut acc: Option<DensityMatrix> = None;
    let mut times = Vec::with_capacity(labels.len());
    nested(
        g0,
        labels,
        level,
        t,
        qn,
        t,
        C64::new(1.0, 0.0),
        c,
        &mut times,
        &mut acc,
    )?;
    Ok(acc.unwrap_or(free_propagate(&g0.marginals[level - 1], t)?))
}

#[allow(clippy::too_many_arguments)]
fn nested(
    g0: &HierarchyState,
    labels: &[usize],
    level: usize,
    t: f64,
    qn: usize,
    upper: f64,
    w: C64,
    c: C64,
    times: &mut Vec<f64>,
    acc: &mut Option<DensityMatrix>,
) -> Result<()> {
    if times.len() == labels.len() {
        let term = raw_integrand(g0, labels, level, t, times)?;
        *acc = Some(match acc.take() {
            None => term.scaled(w),
            Some(a) => a.add_scaled(w, &term)?,
        });
        return Ok(());
    }
    if upper == 0.0 {
        return Ok(());
    }
    let (nodes, weights) = gauss_legendre(qn, 0.0, upper)?;
    for (s, ws) in nodes.iter().zip(&weights) {
        times.push(*s);
        nested(g0, labels, level, t, qn, *s, w * c * ws, c, times, acc)?;
        times.pop();
    }
    Ok(())
}

#[derive(Clone, Debug, Serialize)]
pub struct CollapseReport {
    pub k: usize,
    pub j: usize,
    pub q: usize,
    pub raw_terms: usize,
    pub classes: usize,
    pub raw_norm: f64,
    pub class_norm: f64,
    pub discrepancy: f64,
}

/// Canonical class of a raw label sequence (depth ≤ 2) and whether its domain is the full square.
fn canonical(labels: &[usize], k: usize) -> (Vec<usize>, bool) {
    if let [a, b] = *labels {
        if a != b && b <= k + 1 {
            return (vec![a.min(b), a.max(b)], true);
        }
    }
    (labels.to_vec(), false)
}

fn unit_rule(m: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    gauss_legendre(m, 0.0, 1.0)
}

/// Integral over the ordered simplex t > t1 > ... > 0, Duffy-mapped to the unit cube.
fn simplex_integral(
    g0: &HierarchyState,
    labels: &[usize],
    level: usize,
    t: f64,
    m: usize,
) -> Result<Vec<C64>> {
    let (x, w) = unit_rule(m)?;
    let npts = g0.grid().points();
    let mut acc = vec![C64::new(0.0, 0.0); npts.pow(2 * level as u32)];
    match labels.len() {
        1 => {
            for (u, wu) in x.iter().zip(&w) {
                let g = raw_integrand(g0, labels, level, t, &[t * u])?;
                linalg::axpy(&mut acc, C64::new(t * wu, 0.0), &g.to_dense()?);
            }
        }
        2 => {
            for (u, wu) in x.iter().zip(&w) {
                for (v, wv) in x.iter().zip(&w) {
                    let g = raw_integrand(g0, labels, level, t, &[t * u, t * u * v])?;
                    linalg::axpy(&mut acc, C64::new(t * t * u * wu * wv, 0.0), &g.to_dense()?);
                }
            }
        }
        _ => return arg("collapse check supports j ≤ 2"),
    }
    Ok(acc)
}

fn square_integral(
    g0: &HierarchyState,
    labels: &[usize],
    level: usize,
    t: f64,
    m: usize,
) -> Result<Vec<C64>> {
    let (x, w) = unit_rule(m)?;
    let npts = g0.grid().points();
    let mut acc = vec![C64::new(0.0, 0.0); npts.pow(2 * level as u32)];
    for (u, wu) in x.iter().zip(&w) {
        for (v, wv) in x.iter().zip(&w) {
            let g = raw_integrand(g0, labels, level, t, &[t * u, t * v])?;
            linalg::axpy(&mut acc, C64::new(t * t * wu * wv, 0.0), &g.to_dense()?);
        }
    }
    Ok(acc)
}

/// Compares the sum of all raw depth-j terms over the ordered simplex with the sum over
/// swap classes, each represented by its nondecreasing label sequence and integrated
/// over the union of its time orderings. Uses Q-point Gauss-Legendre tensor rules (Duffy
/// map on the simplex); output level is k+1, evaluated at time t. The coupling constant
/// is omitted.
pub fn verify_collapse(
    g0: &HierarchyState,
    k: usize,
    j: usize,
    qn: usize,
    t: f64,
) -> Result<CollapseReport> {
    if g0.model.p != 2 {
        return arg("collapse check is cubic only");
    }
    if !(1..=2).contains(&j) || k == 0 {
        return arg("need k ≥ 1 and 1 ≤ j ≤ 2");
    }
    if qn < 6 {
        return arg(format!("Q = {qn} < 6"));
    }
    let level = k + 1;
    if level + j > g0.depth() {
        return arg("state too shallow for the requested depth");
    }
    let grid = g0.grid();
    for m in &g0.marginals[level - 1..level + j] {
        if matches!(m.repr, Repr::Dense(_)) {
            check_dense(&grid, m.k)?;
        }
    }
    check_dense(&grid, level)?;
    let labels = raw_labels(level, j);
    let npts = grid.points();
    let size = npts.pow(2 * level as u32);
    let mut raw = vec![C64::new(0.0, 0.0); size];
    for l in &labels {
        linalg::axpy(
            &mut raw,
            C64::new(1.0, 0.0),
            &simplex_integral(g0, l, level, t, qn)?,
        );
    }
    let mut classes: Vec<(Vec<usize>, bool)> = labels.iter().map(|l| canonical(l, k)).collect();
    classes.sort();
    classes.dedup();
    let mut col = vec![C64::new(0.0, 0.0); size];
    for (rep, square) in &classes {
        let part = if *square {
            square_integral(g0, rep, level, t, qn)?
        } else {
            simplex_integral(g0, rep, level, t, qn)?
        };
        linalg::axpy(&mut col, C64::new(1.0, 0.0), &part);
    }
    let raw_norm = linalg::frob(&raw);
    let class_norm = linalg::frob(&col);
    let diff = linalg::dist(&raw, &col);
    Ok(CollapseReport {
        k,
        j,
        q: qn,
        raw_terms: labels.len(),
        classes: classes.len(),
        raw_norm,
        class_norm,
        discrepancy: if raw_norm == 0.0 {
            diff
        } else {
            diff / raw_norm
        },
    })
}

/// Bosonic-symmetric separable mixture Σ_i w_i |φ_i⟩⟨φ_i|^{⊗m}, m = 1..depth.
pub fn product_mixture(
    phis: &[crate::state::WaveFunction],
    weights: &[f64],
    depth: usize,
    model: crate::state::Model,
) -> Result<HierarchyState> {
    use crate::state::{Closure, SepTerm};
    if phis.is_empty() || phis.len() != weights.len() {
        return arg("mixture needs matching non-empty components and weights");
    }
    let grid = phis[0].grid;
    let marginals = (1..=depth)
        .map(|m| {
            let terms = phis
                .iter()
                .zip(weights)
                .map(|(p, w)| SepTerm {
                    coef: C64::new(*w, 0.0),
                    f: vec![p.values.clone(); m],
                    g: vec![p.values.clone(); m],
                })
                .collect();
            DensityMatrix::separable(m, grid, terms, true, true)
        })
        .collect::<Result<Vec<_>>>()?;
    HierarchyState::new(model, Closure::Zero, 0.0, marginals)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::duhamel_term;
    use crate::grid::GridSpec;
    use crate::state::{Model, WaveFunction};
    use proptest::prelude::*;

    fn dp_count(j: usize, k: usize) -> u64 {
        // ways[m] = number of valid prefixes ending in value m
        let mut ways = vec![0u64; k + j + 2];
        for m in 1..=k + 1 {
            ways[m] = 1;
        }
        for i in 1..j {
            let cap = k + i + 1;
            let mut next = vec![0u64; k + j + 2];
            for m in 1..=cap {
                next[m] = (m..ways.len()).map(|v| ways[v]).sum();
            }
            ways = next;
        }
        ways.iter().sum()
    }

    fn box_filter(j: usize, k: usize) -> Vec<Vec<usize>> {
        let mut out = Vec::new();
        let hi: Vec<usize> = (0..j).map(|i| k + i + 1).collect();
        let mut cur = vec![1usize; j];
        loop {
            if cur.windows(2).all(|w| w[0] >= w[1]) {
                out.push(cur.clone());
            }
            let mut i = j;
            loop {
                if i == 0 {
                    return out;
                }
                i -= 1;
                if cur[i] < hi[i] {
                    cur[i] += 1;
                    cur[i + 1..].iter_mut().for_each(|v| *v = 1);
                    break;
                }
            }
        }
    }

    #[test]
    fn small_counts() {
        for k in 1..=7 {
            assert_eq!(enumerate_echelon(1, k).unwrap().len(), k + 1);
        }
        let mut oracle = 0;
        for m1 in 1..=2 {
            for m2 in 1..=3 {
                if m1 >= m2 {
                    oracle += 1;
                }
            }
        }
        assert_eq!(enumerate_echelon(2, 1).unwrap().len(), oracle);
        assert!(matches!(
            enumerate_echelon(13, 12),
            Err(GphError::Capacity { .. })
        ));
        assert!(enumerate_echelon(0, 3).is_err());
    }

    #[test]
    fn counts_match_dp_oracle() {
        for j in 1..=6 {
            for k in 1..=6 {
                assert_eq!(
                    enumerate_echelon(j, k).unwrap().len() as u64,
                    dp_count(j, k),
                    "j={j} k={k}"
                );
            }
        }
    }

    #[test]
    fn enumeration_matches_box_filter() {
        for j in 1..=4 {
            for k in 1..=4 {
                let e = enumerate_echelon(j, k).unwrap();
                let mus: Vec<Vec<usize>> = e.iter().map(|s| s.mu.clone()).collect();
                assert_eq!(mus, box_filter(j, k));
                assert!(e.iter().all(|s| s.is_valid()));
                assert!(mus.windows(2).all(|w| w[0] < w[1]));
            }
        }
    }

    #[test]
    fn growth_fit() {
        let f = cardinality_growth_fit(2..=12).unwrap();
        assert!(f.at_most_exponential);
        let t = echelon_table(6, 6).unwrap();
        let cmax = t.iter().map(|r| r.c_min).fold(0.0, f64::max);
        assert!((f.c_min - cmax).abs() < 1e-12 || f.c_min >= cmax);
        let r = t.iter().find(|r| r.j == 3 && r.k == 2).unwrap();
        assert!((r.c_min - (r.count as f64).powf(0.2)).abs() < 1e-15);
        // j = 1 row decreases toward 1
        let row: Vec<f64> = (1..=6)
            .map(|k| ((k + 1) as f64).powf(1.0 / (k + 1) as f64))
            .collect();
        for k in 1..=6 {
            assert!(
                (t.iter().find(|r| r.j == 1 && r.k == k).unwrap().c_min - row[k - 1]).abs() < 1e-15
            );
        }
        assert!(row.windows(2).skip(1).all(|w| w[1] < w[0]));
        assert!(cardinality_growth_fit(2..=5).is_err());
        // factorial raw counts fail the same shape test
        let xs: Vec<f64> = (2..=12).map(|s| s as f64).collect();
        let ys: Vec<f64> = (2..=12usize)
            .map(|s| {
                (1..s)
                    .map(|j| raw_term_count(s - j + 1, j) as f64)
                    .fold(0.0, f64::max)
                    .ln()
            })
            .collect();
        assert!(growth_shape(&xs, &ys).unwrap().3 > CURVATURE_LIMIT);
    }

    #[test]
    fn raw_count_matches_engine_expansion() {
        let g = GridSpec::new(1, 8, 8.0).unwrap();
        let phi = WaveFunction::gaussian(&g, 1.0, 0.7, 0.0)
            .unwrap()
            .normalized()
            .unwrap();
        let psi = WaveFunction::gaussian(&g, 0.6, -1.0, 0.5)
            .unwrap()
            .normalized()
            .unwrap();
        let model = Model::new(2, 1.0, 1).unwrap();
        let st = product_mixture(&[phi, psi], &[0.7, 0.3], 5, model).unwrap();
        for (level, j) in [(1, 1), (2, 1), (1, 2), (2, 2), (1, 3), (2, 3)] {
            let labels = raw_labels(level, j);
            assert_eq!(labels.len() as u128, raw_term_count(level, j));
            assert_eq!(
                raw_term_count(level, j),
                (0..j).map(|i| (level + i) as u128).product::<u128>()
            );
            let reference = duhamel_term(&st, j, level - 1, 0.2, 4)
                .unwrap()
                .to_dense()
                .unwrap();
            let mut sum = vec![C64::new(0.0, 0.0); reference.len()];
            for l in &labels {
                let term = raw_duhamel_term(&st, l, level, 0.2, 4).unwrap();
                linalg::axpy(&mut sum, C64::new(1.0, 0.0), &term.to_dense().unwrap());
            }
            assert!(
                linalg::dist(&sum, &reference) <= 1e-12 * linalg::frob(&reference),
                "level={level} j={j}"
            );
        }
    }

    fn collapse_state(zero: bool) -> HierarchyState {
        let g = GridSpec::new(1, 8, 8.0).unwrap();
        let a = if zero { 0.0 } else { 1.0 };
        let phi = WaveFunction::gaussian(&g, 1.0, 0.7, 0.0)
            .unwrap()
            .normalized()
            .unwrap();
        let psi = WaveFunction::gaussian(&g, 0.6, -1.0, 0.5)
            .unwrap()
            .normalized()
            .unwrap();
        product_mixture(
            &[phi, psi],
            &[0.6 * a, 0.4 * a],
            5,
            Model::new(2, 1.0, 1).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn collapse_depth_one_is_exact() {
        let st = collapse_state(false);
        for k in 1..=2 {
            let r = verify_collapse(&st, k, 1, 8, 0.5).unwrap();
            assert_eq!(r.raw_terms, k + 1);
            assert_eq!(r.classes, k + 1);
            assert!(r.discrepancy < 1e-14, "{r:?}");
        }
    }

    #[test]
    fn collapse_depth_two_refines() {
        let st = collapse_state(false);
        let r8 = verify_collapse(&st, 1, 2, 8, 0.5).unwrap();
        let r16 = verify_collapse(&st, 1, 2, 16, 0.5).unwrap();
        assert_eq!(r8.raw_terms, 6);
        assert_eq!(r8.classes, 5);
        assert!(r8.discrepancy <= 1e-3, "{r8:?}");
        assert!(r16.discrepancy <= 0.5 * r8.discrepancy, "{r8:?} {r16:?}");
        let r = verify_collapse(&st, 2, 2, 8, 0.5).unwrap();
        assert_eq!(r.raw_terms, 12);
        assert!(r.discrepancy <= 1e-3, "{r:?}");
    }

    #[test]
    fn collapse_zero_data() {
        let r = verify_collapse(&collapse_state(true), 1, 2, 6, 0.5).unwrap();
        assert_eq!(r.raw_norm, 0.0);
        assert_eq!(r.class_norm, 0.0);
        assert_eq!(r.discrepancy, 0.0);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn enumerated_sequences_are_valid(j in 1usize..7, k in 1usize..7) {
            let e = enumerate_echelon(j, k).unwrap();
            prop_assert!(e.iter().all(|s| s.is_valid() && s.j == j && s.k == k));
            let mut d = e.clone();
            d.dedup();
            prop_assert_eq!(d.len(), e.len());
        }
    }
}
