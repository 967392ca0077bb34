//! Marginal density matrices, hierarchies, and the one-body wavefunction.

use std::sync::Arc;

use nalgebra::DMatrix;
use num_complex::Complex64 as C64;
use serde::{Deserialize, Serialize};

use crate::error::{arg, shape, GphError, Result};
use crate::grid::{propagate_rows, GridSpec, Spectral};
use crate::linalg::{self, mode_mul, permute, ZERO};

pub const DEFAULT_MEM_BUDGET: u128 = 2 << 30;

/// Dense-tensor cap in bytes; `GPH_MEM_BUDGET` accepts plain bytes or a K/M/G suffix.
pub fn mem_budget() -> u128 {
    std::env::var("GPH_MEM_BUDGET")
        .ok()
        .and_then(|s| parse_bytes(&s))
        .unwrap_or(DEFAULT_MEM_BUDGET)
}

pub fn parse_bytes(s: &str) -> Option<u128> {
    let s = s.trim();
    let (num, mult) = match s.chars().last()? {
        'k' | 'K' => (&s[..s.len() - 1], 1u128 << 10),
        'm' | 'M' => (&s[..s.len() - 1], 1 << 20),
        'g' | 'G' => (&s[..s.len() - 1], 1 << 30),
        _ => (s, 1),
    };
    num.trim().parse::<u128>().ok().map(|v| v * mult)
}

pub fn dense_bytes(grid: &GridSpec, k: usize) -> u128 {
    (grid.points() as u128).pow(2 * k as u32) * 16
}

pub fn check_dense(grid: &GridSpec, k: usize) -> Result<()> {
    let needed = dense_bytes(grid, k);
    let budget = mem_budget();
    if needed > budget {
        return Err(GphError::Capacity { needed, budget });
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub struct WaveFunction {
    pub grid: GridSpec,
    pub values: Vec<C64>,
}

impl WaveFunction {
    pub fn new(grid: GridSpec, values: Vec<C64>) -> Result<Self> {
        if values.len() != grid.points() {
            return shape(format!(
                "{} values for {} grid points",
                values.len(),
                grid.points()
            ));
        }
        if values
            .iter()
            .any(|v| !v.re.is_finite() || !v.im.is_finite())
        {
            return Err(GphError::Numeric("non-finite wavefunction value".into()));
        }
        Ok(WaveFunction { grid, values })
    }

    /// Unit-L² Gaussian of width `sigma` with momentum `k0` along the first axis.
    pub fn gaussian(grid: &GridSpec, sigma: f64, k0: f64, x0: f64) -> Result<Self> {
        let vals = (0..grid.points())
            .map(|p| {
                let x = grid.position(p);
                let r2: f64 = (0..grid.d)
                    .map(|a| {
                        if a == 0 {
                            (x[0] - x0).powi(2)
                        } else {
                            x[a] * x[a]
                        }
                    })
                    .sum();
                C64::from_polar((-r2 / (2.0 * sigma * sigma)).exp(), k0 * x[0])
            })
            .collect();
        WaveFunction::new(*grid, vals)?.normalized()
    }

    pub fn l2_norm(&self) -> f64 {
        (self.grid.cell() * self.values.iter().map(|v| v.norm_sqr()).sum::<f64>()).sqrt()
    }

    pub fn normalized(self) -> Result<Self> {
        let n = self.l2_norm();
        if n == 0.0 {
            return Err(GphError::Numeric("cannot normalize a zero state".into()));
        }
        Ok(self.scaled(C64::new(1.0 / n, 0.0)))
    }

    pub fn scaled(mut self, c: C64) -> Self {
        self.values.iter_mut().for_each(|v| *v *= c);
        self
    }

    /// ‖⟨∇⟩^α φ‖_{L²}.
    pub fn h_alpha_norm(&self, alpha: f64) -> f64 {
        let mut f = self.values.clone();
        Spectral::new(&self.grid).fft1(&mut f, true);
        let q2 = self.grid.q2_table();
        let s: f64 = f
            .iter()
            .zip(&q2)
            .map(|(v, q)| v.norm_sqr() * (1.0 + q).powf(alpha))
            .sum();
        (self.grid.cell() * s).sqrt()
    }

    pub fn lr_norm(&self, r: f64) -> f64 {
        (self.grid.cell() * self.values.iter().map(|v| v.norm().powf(r)).sum::<f64>()).powf(1.0 / r)
    }

    pub fn inner(&self, o: &WaveFunction) -> C64 {
        linalg::dot(&self.values, &o.values) * self.grid.cell()
    }
}

/// One separable term c · Π f_j(x_j) conj(g_j(x'_j)).
#[derive(Clone, Debug)]
pub struct SepTerm {
    pub coef: C64,
    pub f: Vec<Vec<C64>>,
    pub g: Vec<Vec<C64>>,
}

impl SepTerm {
    pub fn map_factors(&self, mut m: impl FnMut(&[C64]) -> Vec<C64>) -> SepTerm {
        SepTerm {
            coef: self.coef,
            f: self.f.iter().map(|v| m(v)).collect(),
            g: self.g.iter().map(|v| m(v)).collect(),
        }
    }
}

/// Orthonormal one-body modes in the interaction frame; the Schrödinger-picture
/// modes at basis time τ are e^{iτΔ} applied to these rows.
#[derive(Clone, Debug)]
pub struct ReducedBasis {
    pub grid: GridSpec,
    pub rank: usize,
    pub modes: Vec<C64>,
}

impl ReducedBasis {
    pub fn new(grid: GridSpec, rank: usize, modes: Vec<C64>) -> Result<Self> {
        if modes.len() != rank * grid.points() {
            return shape("basis modes do not match rank x points");
        }
        let b = ReducedBasis { grid, rank, modes };
        let w = grid.cell();
        let npts = grid.points();
        for a in 0..rank {
            for c in 0..rank {
                let ip = linalg::dot(
                    &b.modes[a * npts..(a + 1) * npts],
                    &b.modes[c * npts..(c + 1) * npts],
                ) * w;
                let want = if a == c { 1.0 } else { 0.0 };
                if (ip - want).norm() > 1e-9 {
                    return Err(GphError::Numeric("basis is not orthonormal".into()));
                }
            }
        }
        Ok(b)
    }

    pub fn modes_at(&self, tau: f64) -> Vec<C64> {
        propagate_rows(&self.grid, &self.modes, tau)
    }

    /// Coefficients ⟨u_a(τ), f⟩ for a one-body function.
    pub fn project_fn(&self, modes_tau: &[C64], f: &[C64]) -> Vec<C64> {
        let npts = self.grid.points();
        let w = self.grid.cell();
        (0..self.rank)
            .map(|a| linalg::dot(&modes_tau[a * npts..(a + 1) * npts], f) * w)
            .collect()
    }

    /// Gram matrix G[a,b] = ⟨⟨∇⟩^α u_a, ⟨∇⟩^α u_b⟩ (time independent).
    pub fn bracket_gram(&self, alpha: f64) -> Vec<C64> {
        let npts = self.grid.points();
        let sp = Spectral::new(&self.grid);
        let q2 = self.grid.q2_table();
        let wts: Vec<f64> = q2.iter().map(|q| (1.0 + q).powf(alpha / 2.0)).collect();
        let mut hat = self.modes.clone();
        for row in hat.chunks_mut(npts) {
            sp.fft1(row, true);
            row.iter_mut().zip(&wts).for_each(|(v, w)| *v *= w);
        }
        let r = self.rank;
        let w = self.grid.cell();
        let mut g = vec![ZERO; r * r];
        for a in 0..r {
            for b in 0..r {
                g[a * r + b] = linalg::dot(
                    &hat[a * npts..(a + 1) * npts],
                    &hat[b * npts..(b + 1) * npts],
                ) * w;
            }
        }
        g
    }

    /// Upper factor R with G = R^H R.
    pub fn bracket_factor(&self, alpha: f64) -> Result<Vec<C64>> {
        let r = self.rank;
        let g = linalg::to_na(r, r, &self.bracket_gram(alpha));
        let ch = g
            .cholesky()
            .ok_or_else(|| GphError::Numeric("bracket Gram matrix not positive definite".into()))?;
        Ok(linalg::from_na(&ch.l().adjoint()))
    }
}

/// Kronecker sums longer than this are materialized when added.
pub const KRON_TERM_CAP: usize = 16;

/// Sum of Kronecker products of r x r one-slot cores.
#[derive(Clone, Debug)]
pub struct KronSum {
    pub r: usize,
    pub k: usize,
    pub terms: Vec<(C64, Vec<Vec<C64>>)>,
}

impl KronSum {
    pub fn materialize(&self) -> Vec<C64> {
        let mut out = vec![ZERO; self.r.pow(2 * self.k as u32)];
        self.add_into(&mut out, linalg::ONE);
        out
    }

    /// out += c·Σ coef ⊗F, written in (a1..ak, b1..bk) layout.
    pub fn add_into(&self, out: &mut [C64], c: C64) {
        let (r, k) = (self.r, self.k);
        assert_eq!(out.len(), r.pow(2 * k as u32), "kron target size");
        for (coef, fs) in &self.terms {
            // Kronecker product of the leading factors as an (r^{k-1})² matrix
            let mut lead = vec![*coef * c];
            let mut side = 1;
            for f in &fs[..k - 1] {
                let ns = side * r;
                let mut next = vec![ZERO; ns * ns];
                for i in 0..side {
                    for j in 0..side {
                        let v = lead[i * side + j];
                        for a in 0..r {
                            let row =
                                &mut next[(i * r + a) * ns + j * r..(i * r + a) * ns + j * r + r];
                            row.iter_mut()
                                .zip(&f[a * r..a * r + r])
                                .for_each(|(o, x)| *o = v * x);
                        }
                    }
                }
                lead = next;
                side = ns;
            }
            let last = &fs[k - 1];
            let ns = side * r;
            for i in 0..side {
                for j in 0..side {
                    let v = lead[i * side + j];
                    if v == ZERO {
                        continue;
                    }
                    for a in 0..r {
                        let row = &mut out[(i * r + a) * ns + j * r..(i * r + a) * ns + j * r + r];
                        row.iter_mut()
                            .zip(&last[a * r..a * r + r])
                            .for_each(|(o, x)| *o += v * x);
                    }
                }
            }
        }
    }

    pub fn inner(&self, o: &KronSum) -> C64 {
        let mut s = ZERO;
        for (c1, f1) in &self.terms {
            for (c2, f2) in &o.terms {
                let mut p = c1.conj() * c2;
                for (a, b) in f1.iter().zip(f2) {
                    p *= linalg::dot(a, b);
                }
                s += p;
            }
        }
        s
    }

    pub fn scaled(&self, a: C64) -> KronSum {
        KronSum {
            terms: self.terms.iter().map(|(c, f)| (c * a, f.clone())).collect(),
            ..self.clone()
        }
    }

    /// F -> R F R^H on each factor.
    pub fn weighted(&self, rmat: &[C64]) -> KronSum {
        let r = self.r;
        let rh: Vec<C64> = (0..r * r)
            .map(|i| rmat[(i % r) * r + i / r].conj())
            .collect();
        let terms = self
            .terms
            .iter()
            .map(|(c, fs)| {
                let fs = fs
                    .iter()
                    .map(|f| linalg::matmul(r, r, r, &linalg::matmul(r, r, r, rmat, f), &rh))
                    .collect();
                (*c, fs)
            })
            .collect();
        KronSum {
            terms,
            ..self.clone()
        }
    }

    pub fn trace(&self) -> C64 {
        let r = self.r;
        self.terms
            .iter()
            .map(|(c, fs)| {
                fs.iter()
                    .fold(*c, |acc, f| acc * (0..r).map(|a| f[a * r + a]).sum::<C64>())
            })
            .sum()
    }
}

#[derive(Clone, Debug)]
pub enum CoreData {
    Full(Vec<C64>),
    Kron(KronSum),
}

impl CoreData {
    pub fn full(&self) -> std::borrow::Cow<'_, Vec<C64>> {
        match self {
            CoreData::Full(v) => std::borrow::Cow::Borrowed(v),
            CoreData::Kron(ks) => std::borrow::Cow::Owned(ks.materialize()),
        }
    }

    pub fn into_full(self) -> Vec<C64> {
        match self {
            CoreData::Full(v) => v,
            CoreData::Kron(ks) => ks.materialize(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct TuckerForm {
    pub basis: Arc<ReducedBasis>,
    pub tau: f64,
    pub core: CoreData,
}

impl TuckerForm {
    pub fn with_core(&self, core: CoreData) -> TuckerForm {
        TuckerForm {
            basis: self.basis.clone(),
            tau: self.tau,
            core,
        }
    }
}

#[derive(Clone, Debug)]
pub enum Repr {
    Dense(Vec<C64>),
    Separable(Vec<SepTerm>),
    Tucker(TuckerForm),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReprKind {
    Dense,
    Separable,
}

#[derive(Clone, Debug)]
pub struct DensityMatrix {
    pub k: usize,
    pub grid: GridSpec,
    pub repr: Repr,
    pub hermitian: bool,
    pub symmetric: bool,
    pub trace: C64,
}

impl DensityMatrix {
    /// Same metadata, new payload (trace copied, not recomputed).
    pub fn with_repr(&self, repr: Repr) -> DensityMatrix {
        DensityMatrix {
            k: self.k,
            grid: self.grid,
            repr,
            hermitian: self.hermitian,
            symmetric: self.symmetric,
            trace: self.trace,
        }
    }

    /// Dense marginal; hermiticity detected, symmetry flag left unset.
    pub fn from_dense(k: usize, grid: GridSpec, data: Vec<C64>) -> Self {
        let mut m = Self::from_dense_flags(k, grid, data, false, false);
        m.hermitian = m.hermiticity_residual() <= 1e-10;
        m
    }

    pub fn from_dense_flags(
        k: usize,
        grid: GridSpec,
        data: Vec<C64>,
        hermitian: bool,
        symmetric: bool,
    ) -> Self {
        assert_eq!(
            data.len(),
            grid.points().pow(2 * k as u32),
            "dense data size"
        );
        let mut m = DensityMatrix {
            k,
            grid,
            repr: Repr::Dense(data),
            hermitian,
            symmetric,
            trace: ZERO,
        };
        m.trace = m.compute_trace();
        m
    }

    pub fn separable(
        k: usize,
        grid: GridSpec,
        terms: Vec<SepTerm>,
        hermitian: bool,
        symmetric: bool,
    ) -> Result<Self> {
        for t in &terms {
            if t.f.len() != k || t.g.len() != k {
                return shape("separable term has wrong slot count");
            }
            if t.f.iter().chain(&t.g).any(|v| v.len() != grid.points()) {
                return shape("separable factor has wrong length");
            }
        }
        let mut m = DensityMatrix {
            k,
            grid,
            repr: Repr::Separable(terms),
            hermitian,
            symmetric,
            trace: ZERO,
        };
        m.trace = m.compute_trace();
        Ok(m)
    }

    pub fn tucker(k: usize, form: TuckerForm, hermitian: bool, symmetric: bool) -> Self {
        let grid = form.basis.grid;
        let mut m = DensityMatrix {
            k,
            grid,
            repr: Repr::Tucker(form),
            hermitian,
            symmetric,
            trace: ZERO,
        };
        m.trace = m.compute_trace();
        m
    }

    pub fn zeros(k: usize, grid: GridSpec) -> Result<Self> {
        check_dense(&grid, k)?;
        Ok(Self::from_dense_flags(
            k,
            grid,
            vec![ZERO; grid.points().pow(2 * k as u32)],
            true,
            true,
        ))
    }

    pub fn dense(&self) -> Option<&Vec<C64>> {
        match &self.repr {
            Repr::Dense(d) => Some(d),
            _ => None,
        }
    }

    pub fn tucker_form(&self) -> Option<&TuckerForm> {
        match &self.repr {
            Repr::Tucker(t) => Some(t),
            _ => None,
        }
    }

    pub fn repr_name(&self) -> &'static str {
        match self.repr {
            Repr::Dense(_) => "dense",
            Repr::Separable(_) => "separable",
            Repr::Tucker(_) => "reduced",
        }
    }

    pub fn compute_trace(&self) -> C64 {
        let npts = self.grid.points();
        let w = self.grid.cell().powi(self.k as i32);
        match &self.repr {
            Repr::Dense(d) => {
                let nk = npts.pow(self.k as u32);
                (0..nk).map(|x| d[x * nk + x]).sum::<C64>() * w
            }
            Repr::Separable(terms) => {
                let h = self.grid.cell();
                terms
                    .iter()
                    .map(|t| {
                        t.f.iter()
                            .zip(&t.g)
                            .fold(t.coef, |acc, (f, g)| acc * linalg::dot(g, f) * h)
                    })
                    .sum()
            }
            Repr::Tucker(tk) => match &tk.core {
                CoreData::Full(c) => {
                    let rk = tk.basis.rank.pow(self.k as u32);
                    (0..rk).map(|a| c[a * rk + a]).sum()
                }
                CoreData::Kron(ks) => ks.trace(),
            },
        }
    }

    /// Materialize as a dense tensor (subject to the memory budget).
    pub fn to_dense(&self) -> Result<Vec<C64>> {
        match &self.repr {
            Repr::Dense(d) => Ok(d.clone()),
            Repr::Separable(terms) => {
                check_dense(&self.grid, self.k)?;
                let total = self.grid.points().pow(2 * self.k as u32);
                let mut out = vec![ZERO; total];
                for t in terms {
                    let mut acc = vec![t.coef];
                    let conjg: Vec<Vec<C64>> =
                        t.g.iter()
                            .map(|g| g.iter().map(|v| v.conj()).collect())
                            .collect();
                    for v in t.f.iter().chain(conjg.iter()) {
                        let mut next = Vec::with_capacity(acc.len() * v.len());
                        for a in &acc {
                            next.extend(v.iter().map(|x| a * x));
                        }
                        acc = next;
                    }
                    linalg::axpy(&mut out, linalg::ONE, &acc);
                }
                Ok(out)
            }
            Repr::Tucker(tk) => {
                check_dense(&self.grid, self.k)?;
                let r = tk.basis.rank;
                let npts = self.grid.points();
                let u = tk.basis.modes_at(tk.tau);
                let ut: Vec<C64> = (0..npts * r).map(|i| u[(i % r) * npts + i / r]).collect();
                let utc: Vec<C64> = ut.iter().map(|v| v.conj()).collect();
                let mut data = tk.core.full().into_owned();
                let mut dims = vec![r; 2 * self.k];
                for ax in 0..2 * self.k {
                    data = mode_mul(&data, &dims, ax, if ax < self.k { &ut } else { &utc }, npts);
                    dims[ax] = npts;
                }
                Ok(data)
            }
        }
    }

    pub fn materialized(&self) -> Result<DensityMatrix> {
        Ok(self.with_repr(Repr::Dense(self.to_dense()?)))
    }

    /// L² norm of the kernel over the doubled space.
    pub fn l2_norm(&self) -> f64 {
        match &self.repr {
            Repr::Dense(d) => linalg::frob(d) * self.grid.cell().powf(self.k as f64),
            Repr::Separable(terms) => Self::separable_core_norm(terms, self.k, self.grid.cell())
                .unwrap_or_else(|| self.inner(self).re.max(0.0).sqrt()),
            Repr::Tucker(tk) => match &tk.core {
                CoreData::Full(c) => linalg::frob(c),
                CoreData::Kron(ks) => ks.inner(ks).re.max(0.0).sqrt(),
            },
        }
    }

    /// Frobenius norm through per-slot QR coordinates, which avoids the cancellation of the
    /// Gram expansion when the sum is small compared with its terms. None if the core is too large.
    fn separable_core_norm(terms: &[SepTerm], k: usize, cell: f64) -> Option<f64> {
        const CORE_LIMIT: usize = 1 << 22;
        if terms.is_empty() {
            return Some(0.0);
        }
        let mut coords: Vec<Vec<Vec<C64>>> = Vec::with_capacity(2 * k);
        let mut dims = Vec::with_capacity(2 * k);
        for s in 0..2 * k {
            let vecs: Vec<&Vec<C64>> = terms
                .iter()
                .map(|t| if s < k { &t.f[s] } else { &t.g[s - k] })
                .collect();
            let mut uniq: Vec<&Vec<C64>> = Vec::new();
            let mut which = Vec::with_capacity(vecs.len());
            for v in &vecs {
                match uniq.iter().position(|u| *u == *v) {
                    Some(i) => which.push(i),
                    None => {
                        which.push(uniq.len());
                        uniq.push(v);
                    }
                }
            }
            let npts = vecs[0].len();
            let m = DMatrix::from_fn(npts, uniq.len(), |i, j| uniq[j][i]);
            let r = m.qr().r();
            dims.push(r.nrows());
            let per_term: Vec<Vec<C64>> = which
                .iter()
                .map(|&j| {
                    let c: Vec<C64> = r.column(j).iter().copied().collect();
                    if s < k {
                        c
                    } else {
                        c.iter().map(|v| v.conj()).collect()
                    }
                })
                .collect();
            coords.push(per_term);
        }
        let size = dims.iter().try_fold(1usize, |a, &d| a.checked_mul(d))?;
        if size > CORE_LIMIT {
            return None;
        }
        let mut core = vec![ZERO; size];
        let mut buf = vec![ZERO; size];
        for (t, term) in terms.iter().enumerate() {
            buf[0] = term.coef;
            let mut len = 1;
            for s in 0..2 * k {
                let c = &coords[s][t];
                for i in (0..len).rev() {
                    let v = buf[i];
                    for (j, cj) in c.iter().enumerate() {
                        buf[i * c.len() + j] = v * cj;
                    }
                }
                len *= c.len();
            }
            core.iter_mut().zip(&buf).for_each(|(a, b)| *a += b);
        }
        Some(linalg::frob(&core) * cell.powf(k as f64))
    }

    /// L² inner product ⟨self, o⟩ of kernels sharing a representation family.
    pub fn inner(&self, o: &DensityMatrix) -> C64 {
        let w = self.grid.cell();
        match (&self.repr, &o.repr) {
            (Repr::Separable(a), Repr::Separable(b)) => {
                let mut s = ZERO;
                for t1 in a {
                    for t2 in b {
                        let mut p = t1.coef.conj() * t2.coef;
                        for i in 0..self.k {
                            p *= linalg::dot(&t1.f[i], &t2.f[i])
                                * w
                                * (linalg::dot(&t1.g[i], &t2.g[i]) * w).conj();
                        }
                        s += p;
                    }
                }
                s
            }
            (Repr::Dense(a), Repr::Dense(b)) => linalg::dot(a, b) * w.powi(2 * self.k as i32),
            (Repr::Tucker(a), Repr::Tucker(b)) => match (&a.core, &b.core) {
                (CoreData::Kron(x), CoreData::Kron(y)) => x.inner(y),
                _ => linalg::dot(&a.core.full(), &b.core.full()),
            },
            _ => {
                let a = self.to_dense().expect("materialize for inner product");
                let b = o.to_dense().expect("materialize for inner product");
                linalg::dot(&a, &b) * w.powi(2 * self.k as i32)
            }
        }
    }

    /// ‖self − o‖_{L²}.
    pub fn l2_distance(&self, o: &DensityMatrix) -> Result<f64> {
        if self.k != o.k || !self.grid.same(&o.grid) {
            return shape("distance between marginals of different shape");
        }
        match (&self.repr, &o.repr) {
            (Repr::Dense(a), Repr::Dense(b)) => {
                Ok(linalg::dist(a, b) * self.grid.cell().powf(self.k as f64))
            }
            (Repr::Tucker(a), Repr::Tucker(b))
                if Arc::ptr_eq(&a.basis, &b.basis) && a.tau == b.tau =>
            {
                Ok(linalg::dist(&a.core.full(), &b.core.full()))
            }
            (Repr::Separable(_), Repr::Separable(_)) => {
                Ok(self.add_scaled(C64::new(-1.0, 0.0), o)?.l2_norm())
            }
            _ => {
                let a = self.to_dense()?;
                let b = o.to_dense()?;
                Ok(linalg::dist(&a, &b) * self.grid.cell().powf(self.k as f64))
            }
        }
    }

    pub fn scaled(&self, c: C64) -> DensityMatrix {
        let repr = match &self.repr {
            Repr::Dense(d) => Repr::Dense(d.iter().map(|v| v * c).collect()),
            Repr::Separable(t) => Repr::Separable(
                t.iter()
                    .map(|t| SepTerm {
                        coef: t.coef * c,
                        ..t.clone()
                    })
                    .collect(),
            ),
            Repr::Tucker(tk) => Repr::Tucker(tk.with_core(match &tk.core {
                CoreData::Full(v) => CoreData::Full(v.iter().map(|x| x * c).collect()),
                CoreData::Kron(ks) => CoreData::Kron(ks.scaled(c)),
            })),
        };
        DensityMatrix {
            trace: self.trace * c,
            hermitian: self.hermitian && c.im == 0.0,
            ..self.with_repr(repr)
        }
    }

    /// self + c·o for matching representations.
    pub fn add_scaled(&self, c: C64, o: &DensityMatrix) -> Result<DensityMatrix> {
        if self.k != o.k || !self.grid.same(&o.grid) {
            return shape("adding marginals of different shape");
        }
        let repr = match (&self.repr, &o.repr) {
            (Repr::Dense(a), Repr::Dense(b)) => {
                let mut v = a.clone();
                linalg::axpy(&mut v, c, b);
                Repr::Dense(v)
            }
            (Repr::Separable(a), Repr::Separable(b)) => {
                let mut v = a.clone();
                v.extend(b.iter().map(|t| SepTerm {
                    coef: t.coef * c,
                    ..t.clone()
                }));
                Repr::Separable(v)
            }
            (Repr::Tucker(a), Repr::Tucker(b))
                if Arc::ptr_eq(&a.basis, &b.basis) && a.tau == b.tau =>
            {
                match (&a.core, &b.core) {
                    (CoreData::Kron(x), CoreData::Kron(y))
                        if x.terms.len() + y.terms.len() <= KRON_TERM_CAP =>
                    {
                        let mut ks = x.clone();
                        ks.terms.extend(y.scaled(c).terms);
                        Repr::Tucker(a.with_core(CoreData::Kron(ks)))
                    }
                    _ => {
                        let mut v = a.core.full().into_owned();
                        linalg::axpy(&mut v, c, &b.core.full());
                        Repr::Tucker(a.with_core(CoreData::Full(v)))
                    }
                }
            }
            _ => {
                let mut v = self.to_dense()?;
                linalg::axpy(&mut v, c, &o.to_dense()?);
                Repr::Dense(v)
            }
        };
        let mut m = DensityMatrix {
            hermitian: self.hermitian && o.hermitian && c.im == 0.0,
            symmetric: self.symmetric && o.symmetric,
            ..self.with_repr(repr)
        };
        m.trace = m.compute_trace();
        Ok(m)
    }

    /// In-place self += c·o; falls back to `add_scaled` across representations.
    pub fn axpy_mut(&mut self, c: C64, o: &DensityMatrix) -> Result<()> {
        if self.k != o.k || !self.grid.same(&o.grid) {
            return shape("adding marginals of different shape");
        }
        let done = match (&mut self.repr, &o.repr) {
            (Repr::Dense(a), Repr::Dense(b)) => {
                linalg::axpy(a, c, b);
                true
            }
            (Repr::Tucker(a), Repr::Tucker(b))
                if Arc::ptr_eq(&a.basis, &b.basis) && a.tau == b.tau =>
            {
                match (&mut a.core, &b.core) {
                    (CoreData::Full(v), CoreData::Kron(ks)) => {
                        ks.add_into(v, c);
                        true
                    }
                    (CoreData::Full(v), CoreData::Full(w)) => {
                        linalg::axpy(v, c, w);
                        true
                    }
                    (CoreData::Kron(_), _) => false,
                }
            }
            _ => false,
        };
        if done {
            self.hermitian = self.hermitian && o.hermitian && c.im == 0.0;
            self.symmetric = self.symmetric && o.symmetric;
            self.trace = self.compute_trace();
        } else {
            *self = self.add_scaled(c, o)?;
        }
        Ok(())
    }

    /// max |γ(x;x') − conj γ(x';x)| (core entries for reduced marginals).
    pub fn hermiticity_residual(&self) -> f64 {
        let k = self.k as u32;
        let (data, side) = match &self.repr {
            Repr::Dense(d) => (std::borrow::Cow::Borrowed(d), self.grid.points()),
            Repr::Tucker(tk) => (tk.core.full(), tk.basis.rank),
            Repr::Separable(_) => match self.to_dense() {
                Ok(d) => (std::borrow::Cow::Owned(d), self.grid.points()),
                Err(_) => return f64::NAN,
            },
        };
        let n = side.pow(k);
        const TILE: usize = 32;
        let mut worst: f64 = 0.0;
        for bi in (0..n).step_by(TILE) {
            for bj in (bi..n).step_by(TILE) {
                for i in bi..(bi + TILE).min(n) {
                    for j in bj.max(i)..(bj + TILE).min(n) {
                        worst = worst.max((data[i * n + j] - data[j * n + i].conj()).norm_sqr());
                    }
                }
            }
        }
        worst.sqrt()
    }

    /// max deviation under adjacent slot transpositions (unprimed and primed).
    pub fn symmetry_residual(&self) -> f64 {
        let k = self.k;
        let (data, side) = match &self.repr {
            Repr::Dense(d) => (std::borrow::Cow::Borrowed(d), self.grid.points()),
            Repr::Tucker(tk) => (tk.core.full(), tk.basis.rank),
            Repr::Separable(_) => match self.to_dense() {
                Ok(d) => (std::borrow::Cow::Owned(d), self.grid.points()),
                Err(_) => return f64::NAN,
            },
        };
        let dims = vec![side; 2 * k];
        let mut worst: f64 = 0.0;
        for base in [0, k] {
            for i in 0..k.saturating_sub(1) {
                let mut perm: Vec<usize> = (0..2 * k).collect();
                perm.swap(base + i, base + i + 1);
                let p = permute(&data, &dims, &perm);
                worst = worst.max(
                    data.iter()
                        .zip(&p)
                        .map(|(a, b)| (a - b).norm())
                        .fold(0.0, f64::max),
                );
            }
        }
        worst
    }
}

pub fn from_factorized(phi: &WaveFunction, k: usize, repr: ReprKind) -> Result<DensityMatrix> {
    if k == 0 {
        return arg("k must be at least 1");
    }
    let term = SepTerm {
        coef: C64::new(1.0, 0.0),
        f: vec![phi.values.clone(); k],
        g: vec![phi.values.clone(); k],
    };
    let sep = DensityMatrix::separable(k, phi.grid, vec![term], true, true)?;
    match repr {
        ReprKind::Separable => Ok(sep),
        ReprKind::Dense => {
            check_dense(&phi.grid, k)?;
            let data = sep.to_dense()?;
            let mut m = DensityMatrix::from_dense_flags(k, phi.grid, data, true, true);
            m.trace = sep.trace;
            Ok(m)
        }
    }
}

pub fn partial_trace(gamma: &DensityMatrix, q: usize) -> Result<DensityMatrix> {
    let k = gamma.k;
    if q >= k {
        return arg(format!("cannot trace {q} of {k} particles"));
    }
    let ko = k - q;
    let repr = match &gamma.repr {
        Repr::Dense(d) => {
            let npts = gamma.grid.points();
            let (nx, ny) = (npts.pow(ko as u32), npts.pow(q as u32));
            let w = gamma.grid.cell().powi(q as i32);
            let mut out = vec![ZERO; nx * nx];
            let nk = nx * ny;
            for x in 0..nx {
                for xp in 0..nx {
                    let mut s = ZERO;
                    for y in 0..ny {
                        s += d[(x * ny + y) * nk + xp * ny + y];
                    }
                    out[x * nx + xp] = s * w;
                }
            }
            Repr::Dense(out)
        }
        Repr::Separable(terms) => {
            let h = gamma.grid.cell();
            Repr::Separable(
                terms
                    .iter()
                    .map(|t| {
                        let c =
                            (ko..k).fold(t.coef, |acc, i| acc * linalg::dot(&t.g[i], &t.f[i]) * h);
                        SepTerm {
                            coef: c,
                            f: t.f[..ko].to_vec(),
                            g: t.g[..ko].to_vec(),
                        }
                    })
                    .collect(),
            )
        }
        Repr::Tucker(tk) => {
            let r = tk.basis.rank;
            let core = match &tk.core {
                CoreData::Full(c) => {
                    let (nx, ny) = (r.pow(ko as u32), r.pow(q as u32));
                    let nk = nx * ny;
                    let mut out = vec![ZERO; nx * nx];
                    for x in 0..nx {
                        for xp in 0..nx {
                            out[x * nx + xp] =
                                (0..ny).map(|y| c[(x * ny + y) * nk + xp * ny + y]).sum();
                        }
                    }
                    CoreData::Full(out)
                }
                CoreData::Kron(ks) => CoreData::Kron(KronSum {
                    r,
                    k: ko,
                    terms: ks
                        .terms
                        .iter()
                        .map(|(c, fs)| {
                            let tr = fs[ko..]
                                .iter()
                                .fold(*c, |acc, f| acc * (0..r).map(|a| f[a * r + a]).sum::<C64>());
                            (tr, fs[..ko].to_vec())
                        })
                        .collect(),
                }),
            };
            Repr::Tucker(tk.with_core(core))
        }
    };
    let mut out = DensityMatrix {
        k: ko,
        ..gamma.with_repr(repr)
    };
    out.trace = out.compute_trace();
    Ok(out)
}

pub fn bosonic_symmetrize(gamma: &DensityMatrix) -> Result<DensityMatrix> {
    let data = gamma
        .dense()
        .ok_or_else(|| GphError::Shape("bosonic_symmetrize needs a dense marginal".into()))?;
    let k = gamma.k;
    if k > 4 {
        return Err(GphError::Capacity {
            needed: (1..=k as u128).product(),
            budget: 24,
        });
    }
    let dims = vec![gamma.grid.points(); 2 * k];
    let perms = permutations(k);
    let mut cur = data.clone();
    for primed in [false, true] {
        let mut acc = vec![ZERO; cur.len()];
        for p in &perms {
            let full: Vec<usize> = if primed {
                (0..k).chain(p.iter().map(|&i| k + i)).collect()
            } else {
                p.iter().copied().chain(k..2 * k).collect()
            };
            linalg::axpy(&mut acc, linalg::ONE, &permute(&cur, &dims, &full));
        }
        let s = 1.0 / perms.len() as f64;
        acc.iter_mut().for_each(|v| *v *= s);
        cur = acc;
    }
    let mut out = DensityMatrix::from_dense_flags(k, gamma.grid, cur, gamma.hermitian, true);
    out.hermitian = gamma.hermitian;
    Ok(out)
}

pub fn permutations(k: usize) -> Vec<Vec<usize>> {
    if k == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for p in permutations(k - 1) {
        for pos in 0..k {
            let mut q = p.clone();
            q.insert(pos, k - 1);
            out.push(q);
        }
    }
    out.sort();
    out
}

/// Singular values of a one-particle marginal as an operator on L².
pub fn one_body_singular_values(gamma: &DensityMatrix) -> Result<Vec<f64>> {
    if gamma.k != 1 {
        return arg("singular values need k = 1");
    }
    let npts = gamma.grid.points();
    let w = gamma.grid.cell();
    match &gamma.repr {
        Repr::Dense(d) => Ok(linalg::singular_values(npts, npts, d)
            .into_iter()
            .map(|s| s * w)
            .collect()),
        Repr::Tucker(tk) => {
            let r = tk.basis.rank;
            Ok(linalg::singular_values(r, r, &tk.core.full()))
        }
        Repr::Separable(terms) => {
            // orthonormalize the f and g spans, then take the small core
            let m = terms.len();
            let fm = nalgebra::DMatrix::from_fn(npts, m, |x, j| terms[j].f[0][x] * w.sqrt());
            let gm = nalgebra::DMatrix::from_fn(npts, m, |x, j| terms[j].g[0][x] * w.sqrt());
            let rf = fm.qr().r();
            let rg = gm.qr().r();
            let c =
                nalgebra::DMatrix::from_fn(m, m, |i, j| if i == j { terms[i].coef } else { ZERO });
            let core = &rf * c * rg.adjoint();
            let mut s: Vec<f64> = core.singular_values().iter().copied().collect();
            s.sort_by(|a, b| b.total_cmp(a));
            Ok(s)
        }
    }
}

/// Smallest eigenvalue of a hermitian one-particle marginal, by power iteration
/// on the shifted operator λ_max − γ.
pub fn min_eigenvalue_probe(gamma: &DensityMatrix, iters: usize) -> Result<f64> {
    if gamma.k != 1 {
        return arg("positivity probe is defined for k = 1 only");
    }
    let d = gamma.to_dense()?;
    let npts = gamma.grid.points();
    let w = gamma.grid.cell();
    let apply = |v: &[C64]| -> Vec<C64> {
        (0..npts)
            .map(|x| {
                d[x * npts..(x + 1) * npts]
                    .iter()
                    .zip(v)
                    .map(|(a, b)| a * b)
                    .sum::<C64>()
                    * w
            })
            .collect()
    };
    let power = |shift: f64| -> f64 {
        let mut v: Vec<C64> = (0..npts)
            .map(|i| C64::new(1.0 + (i as f64 * 0.37).sin(), (i as f64 * 0.11).cos()))
            .collect();
        let mut lam = 0.0;
        for _ in 0..iters {
            let mut y = apply(&v);
            for (yi, vi) in y.iter_mut().zip(&v) {
                *yi = shift * vi - *yi;
            }
            let nv = linalg::frob(&v);
            lam = linalg::dot(&v, &y).re / (nv * nv);
            let ny = linalg::frob(&y);
            if ny == 0.0 {
                return 0.0;
            }
            v = y.iter().map(|z| z / ny).collect();
        }
        lam
    };
    // with shift 0 the iteration converges to -γ's dominant eigenvalue in modulus
    let top = power(0.0).abs();
    let shifted = power(top);
    Ok(top - shifted)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub p: usize,
    pub mu: f64,
    pub d: usize,
}

impl Model {
    pub fn new(p: usize, mu: f64, d: usize) -> Result<Self> {
        if p != 2 && p != 4 {
            return arg(format!("p = {p} must be 2 or 4"));
        }
        if mu != 1.0 && mu != -1.0 {
            return arg(format!("mu = {mu} must be +1 or -1"));
        }
        if !(1..=3).contains(&d) {
            return arg(format!("d = {d} must be 1, 2 or 3"));
        }
        Ok(Model { p, mu, d })
    }

    pub fn q(&self) -> usize {
        self.p / 2
    }
}

#[derive(Clone, Debug)]
pub enum Closure {
    Zero,
    /// Levels K+1..K+p/2 taken at time `t0` and freely evolved.
    Free {
        t0: f64,
        tops: Vec<DensityMatrix>,
    },
    Factorized,
}

impl Closure {
    pub fn name(&self) -> &'static str {
        match self {
            Closure::Zero => "zero",
            Closure::Free { .. } => "free",
            Closure::Factorized => "factorized",
        }
    }
}

#[derive(Clone, Debug)]
pub struct HierarchyState {
    pub model: Model,
    pub closure: Closure,
    pub t: f64,
    pub marginals: Vec<DensityMatrix>,
}

pub const RANK_ONE_RATIO: f64 = 1e6;

impl HierarchyState {
    pub fn new(
        model: Model,
        closure: Closure,
        t: f64,
        marginals: Vec<DensityMatrix>,
    ) -> Result<Self> {
        if marginals.is_empty() {
            return arg("hierarchy needs at least one marginal");
        }
        let grid = marginals[0].grid;
        if grid.d != model.d {
            return shape("model dimension differs from grid dimension");
        }
        for (i, m) in marginals.iter().enumerate() {
            if m.k != i + 1 {
                return shape(format!("marginal {} has k = {}", i + 1, m.k));
            }
            if !m.grid.same(&grid) {
                return shape("marginals live on different grids");
            }
        }
        if let Closure::Free { tops, .. } = &closure {
            let kk = marginals.len();
            if tops.len() != model.q()
                || tops
                    .iter()
                    .enumerate()
                    .any(|(i, m)| m.k != kk + 1 + i || !m.grid.same(&grid))
            {
                return shape("free closure needs the p/2 levels above the truncation");
            }
        }
        let st = HierarchyState {
            model,
            closure,
            t,
            marginals,
        };
        if matches!(st.closure, Closure::Factorized) && t == 0.0 {
            st.check_rank_one()?;
        }
        Ok(st)
    }

    pub fn depth(&self) -> usize {
        self.marginals.len()
    }

    pub fn grid(&self) -> GridSpec {
        self.marginals[0].grid
    }

    pub fn check_rank_one(&self) -> Result<()> {
        let s = one_body_singular_values(&self.marginals[0])?;
        let ratio = if s.len() < 2 || s[1] == 0.0 {
            f64::INFINITY
        } else {
            s[0] / s[1]
        };
        if ratio < RANK_ONE_RATIO {
            return Err(GphError::State(format!(
                "factorized closure needs a rank-one one-particle marginal (singular value ratio {ratio:.3e})"
            )));
        }
        Ok(())
    }

    /// Factorized hierarchy (|φ⟩⟨φ|^{⊗k})_{k≤K}.
    pub fn factorized(
        phi: &WaveFunction,
        depth: usize,
        model: Model,
        closure: Closure,
        repr: ReprKind,
    ) -> Result<Self> {
        let marginals = (1..=depth)
            .map(|k| from_factorized(phi, k, repr))
            .collect::<Result<Vec<_>>>()?;
        HierarchyState::new(model, closure, 0.0, marginals)
    }

    /// Free closure built from the factorized levels above the truncation.
    pub fn free_closure_from(phi: &WaveFunction, depth: usize, q: usize) -> Result<Closure> {
        let tops = (depth + 1..=depth + q)
            .map(|k| from_factorized(phi, k, ReprKind::Separable))
            .collect::<Result<Vec<_>>>()?;
        Ok(Closure::Free { t0: 0.0, tops })
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct AdmissibilityReport {
    pub residuals: Vec<f64>,
    pub pass: Vec<bool>,
}

impl AdmissibilityReport {
    pub fn all_pass(&self) -> bool {
        self.pass.iter().all(|&p| p)
    }

    pub fn max(&self) -> f64 {
        self.residuals.iter().copied().fold(0.0, f64::max)
    }
}

pub fn check_admissible(state: &HierarchyState, tol: f64) -> Result<AdmissibilityReport> {
    let q = state.model.q();
    let kk = state.depth();
    let mut residuals = Vec::new();
    for k in 1..=kk.saturating_sub(q) {
        let tr = partial_trace(&state.marginals[k + q - 1], q)?;
        residuals.push(tr.l2_distance(&state.marginals[k - 1])?);
    }
    let pass = residuals.iter().map(|&r| r <= tol).collect();
    Ok(AdmissibilityReport { residuals, pass })
}
