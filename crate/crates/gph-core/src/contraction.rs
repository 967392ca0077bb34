//! The delta contraction B and the hierarchy map B̂ with truncation closures.

use std::sync::Arc;

use num_complex::Complex64 as C64;

use crate::error::{arg, shape, Result};
use crate::grid::free_propagate;
use crate::linalg::{self, gemm, permute, ONE, ZERO};
use crate::state::{
    Closure, CoreData, DensityMatrix, HierarchyState, KronSum, ReducedBasis, Repr, SepTerm,
};

fn check_order(gamma: &DensityMatrix, p: usize) -> Result<usize> {
    if p != 2 && p != 4 {
        return arg(format!("p = {p} must be 2 or 4"));
    }
    let q = p / 2;
    if gamma.k <= q {
        return shape(format!("order {} too small for p = {p}", gamma.k));
    }
    Ok(gamma.k - q)
}

/// B_{j;k+1..k+p/2} γ with 1-based `j`.
pub fn apply_b_single(gamma: &DensityMatrix, j: usize, p: usize) -> Result<DensityMatrix> {
    let k = check_order(gamma, p)?;
    if j == 0 || j > k {
        return arg(format!("slot {j} outside 1..={k}"));
    }
    let q = p / 2;
    let repr = match &gamma.repr {
        Repr::Dense(d) => Repr::Dense(dense_b_single(d, gamma.grid.points(), k, q, j - 1)),
        Repr::Separable(terms) => Repr::Separable(sep_b_single(terms, k, q, j - 1)),
        Repr::Tucker(tk) => {
            let ctx = TuckerCtx::new(&tk.basis, tk.tau);
            let core = tk.core.full();
            let t1 = ctx.term1(&core, k, q, j - 1);
            let t2 = herm(&ctx.term1(&herm(&core, k + q), k, q, j - 1), k);
            let mut out = t1;
            linalg::axpy(&mut out, -ONE, &t2);
            Repr::Tucker(tk.with_core(CoreData::Full(out)))
        }
    };
    Ok(finish(gamma, k, repr, false))
}

/// Σ_j B_{j;k+1..k+p/2} γ.
pub fn apply_b_full(gamma: &DensityMatrix, p: usize) -> Result<DensityMatrix> {
    let k = check_order(gamma, p)?;
    let q = p / 2;
    let repr = match &gamma.repr {
        Repr::Dense(d) => {
            let npts = gamma.grid.points();
            let mut out = dense_b_single(d, npts, k, q, 0);
            for j in 1..k {
                linalg::axpy(&mut out, ONE, &dense_b_single(d, npts, k, q, j));
            }
            Repr::Dense(out)
        }
        Repr::Separable(terms) => {
            Repr::Separable((0..k).flat_map(|j| sep_b_single(terms, k, q, j)).collect())
        }
        Repr::Tucker(tk) => {
            let ctx = TuckerCtx::new(&tk.basis, tk.tau);
            let core = tk.core.full();
            let fast = gamma.hermitian && gamma.symmetric;
            Repr::Tucker(tk.with_core(CoreData::Full(ctx.b_full(&core, k, q, fast))))
        }
    };
    Ok(finish(gamma, k, repr, gamma.symmetric))
}

fn finish(gamma: &DensityMatrix, k: usize, repr: Repr, symmetric: bool) -> DensityMatrix {
    let mut out = DensityMatrix {
        k,
        grid: gamma.grid,
        repr,
        hermitian: false,
        symmetric,
        trace: ZERO,
    };
    out.trace = out.compute_trace();
    out
}

fn dense_b_single(d: &[C64], npts: usize, k: usize, q: usize, j: usize) -> Vec<C64> {
    let m = k + q;
    let st = linalg::strides(&vec![npts; 2 * m]);
    let top_u: usize = st[k..m].iter().sum();
    let top_p: usize = st[m + k..2 * m].iter().sum();
    let total = npts.pow(2 * k as u32);
    let mut out = Vec::with_capacity(total);
    let mut digits = vec![0usize; 2 * k];
    for o in 0..total {
        let mut rem = o;
        for s in (0..2 * k).rev() {
            digits[s] = rem % npts;
            rem /= npts;
        }
        let mut base = 0;
        for i in 0..k {
            base += digits[i] * st[i] + digits[k + i] * st[m + i];
        }
        let (xj, xpj) = (digits[j], digits[k + j]);
        out.push(d[base + xj * (top_u + top_p)] - d[base + xpj * (top_u + top_p)]);
    }
    out
}

fn sep_b_single(terms: &[SepTerm], k: usize, q: usize, j: usize) -> Vec<SepTerm> {
    let mut out = Vec::with_capacity(2 * terms.len());
    for t in terms {
        let mut prod = vec![ONE; t.f[0].len()];
        for l in k..k + q {
            for (p, (f, g)) in prod.iter_mut().zip(t.f[l].iter().zip(&t.g[l])) {
                *p *= f * g.conj();
            }
        }
        let mut f = t.f[..k].to_vec();
        f[j] = f[j].iter().zip(&prod).map(|(a, b)| a * b).collect();
        out.push(SepTerm {
            coef: t.coef,
            f,
            g: t.g[..k].to_vec(),
        });
        let mut g = t.g[..k].to_vec();
        g[j] = g[j].iter().zip(&prod).map(|(a, b)| a * b.conj()).collect();
        out.push(SepTerm {
            coef: -t.coef,
            f: t.f[..k].to_vec(),
            g,
        });
    }
    out
}

/// Hermitian conjugate of a core or dense kernel: swap unprimed/primed and conjugate.
pub(crate) fn herm(data: &[C64], k: usize) -> Vec<C64> {
    let side = (data.len() as f64).powf(1.0 / (2 * k) as f64).round() as usize;
    let dims = vec![side; 2 * k];
    let perm: Vec<usize> = (k..2 * k).chain(0..k).collect();
    let mut out = permute(data, &dims, &perm);
    out.iter_mut().for_each(|v| *v = v.conj());
    out
}

const STAGE_ELEMS: usize = 1 << 22;

/// Basis modes at one basis time with the products needed by the reduced contractions.
pub struct TuckerCtx {
    pub r: usize,
    pub npts: usize,
    pub w: f64,
    /// r x N, u_a(x) at the basis time
    pub u: Vec<C64>,
    /// N x r, w · conj u_e(x)
    pub ucw_t: Vec<C64>,
    /// r² x N, u_c(x) conj u_d(x)
    pub pair: Vec<C64>,
    tmat: std::sync::OnceLock<Vec<C64>>,
}

impl TuckerCtx {
    pub fn new(basis: &ReducedBasis, tau: f64) -> Self {
        Self::from_modes(
            basis.rank,
            basis.grid.points(),
            basis.grid.cell(),
            basis.modes_at(tau),
        )
    }

    pub fn from_modes(r: usize, npts: usize, w: f64, u: Vec<C64>) -> Self {
        let ucw_t = (0..npts * r)
            .map(|i| u[(i % r) * npts + i / r].conj() * w)
            .collect();
        let mut pair = vec![ZERO; r * r * npts];
        for c in 0..r {
            for d in 0..r {
                let row = &mut pair[(c * r + d) * npts..(c * r + d + 1) * npts];
                for x in 0..npts {
                    row[x] = u[c * npts + x] * u[d * npts + x].conj();
                }
            }
        }
        TuckerCtx {
            r,
            npts,
            w,
            u,
            ucw_t,
            pair,
            tmat: std::sync::OnceLock::new(),
        }
    }

    /// T[e; a, c, d] = w Σ_x conj u_e u_a u_c conj u_d, as an r x r³ matrix.
    fn tmat(&self) -> &Vec<C64> {
        self.tmat.get_or_init(|| {
            let (r, n) = (self.r, self.npts);
            let mut z = vec![ZERO; n * r * r * r];
            for x in 0..n {
                for a in 0..r {
                    let ua = self.u[a * n + x];
                    for cd in 0..r * r {
                        z[x * r * r * r + a * r * r + cd] = ua * self.pair[cd * n + x];
                    }
                }
            }
            let mut t = vec![ZERO; r * r * r * r];
            // T = (ucw_t)^T · z
            gemm(
                r,
                n,
                r * r * r,
                ONE,
                &self.ucw_t,
                1,
                r,
                &z,
                r * r * r,
                1,
                ZERO,
                &mut t,
                r * r * r,
                1,
            );
            t
        })
    }

    /// First delta term for slot `j` (0-based), projected onto the basis.
    pub fn term1(&self, core: &[C64], k: usize, q: usize, j: usize) -> Vec<C64> {
        let r = self.r;
        let m = k + q;
        let dims = vec![r; 2 * m];
        // rest = unprimed slots except j, then primed 0..k
        let mut perm: Vec<usize> = (0..k).filter(|&i| i != j).chain(m..m + k).collect();
        let rest: usize = r.pow(2 * k as u32 - 1);
        perm.push(j);
        for l in 0..q {
            perm.push(k + l);
            perm.push(m + k + l);
        }
        let dp = permute(core, &dims, &perm);
        let out_re = if q == 1 {
            self.term1_tmat(&dp, rest)
        } else {
            self.term1_staged(&dp, rest, q)
        };
        // out_re axes: [unprimed except j, primed, e]; move e into slot j
        let mut back: Vec<usize> = Vec::with_capacity(2 * k);
        for i in 0..k {
            back.push(match i.cmp(&j) {
                std::cmp::Ordering::Less => i,
                std::cmp::Ordering::Equal => 2 * k - 1,
                std::cmp::Ordering::Greater => i - 1,
            });
        }
        for i in 0..k {
            back.push(k - 1 + i);
        }
        permute(&out_re, &vec![r; 2 * k], &back)
    }

    fn term1_tmat(&self, dp: &[C64], rest: usize) -> Vec<C64> {
        let r = self.r;
        let z = r * r * r;
        let t = self.tmat();
        let mut out = vec![ZERO; rest * r];
        gemm(rest, z, r, ONE, dp, z, 1, t, 1, z, ZERO, &mut out, r, 1);
        out
    }

    /// Grid-staged route: contract the outermost (c, d) pair through x, then the
    /// remaining pairs and a_j pointwise in x, then project onto conj u_e.
    pub fn term1_staged(&self, dp: &[C64], rest: usize, q: usize) -> Vec<C64> {
        let (r, n) = (self.r, self.npts);
        let r2 = r * r;
        let inner = r * r2.pow(q as u32 - 1);
        let row_len = inner * r2;
        let chunk = (STAGE_ELEMS / (inner * n)).max(1);
        let mut out = vec![ZERO; rest * r];
        let mut e = vec![ZERO; chunk * inner * n];
        let mut h = vec![ZERO; chunk * n];
        let mut start = 0;
        while start < rest {
            let c = chunk.min(rest - start);
            let rows = c * inner;
            let src = &dp[start * row_len..(start + c) * row_len];
            gemm(
                rows,
                r2,
                n,
                ONE,
                src,
                r2,
                1,
                &self.pair,
                n,
                1,
                ZERO,
                &mut e[..rows * n],
                n,
                1,
            );
            let mut width = inner;
            for _ in 1..q {
                let nw = width / r2;
                for blk in 0..c * nw {
                    let base = blk * r2 * n;
                    let mut acc = vec![ZERO; n];
                    for cd in 0..r2 {
                        let src = &e[base + cd * n..base + (cd + 1) * n];
                        let p = &self.pair[cd * n..(cd + 1) * n];
                        for x in 0..n {
                            acc[x] += src[x] * p[x];
                        }
                    }
                    e[blk * n..(blk + 1) * n].copy_from_slice(&acc);
                }
                width = nw;
            }
            debug_assert_eq!(width, r);
            for b in 0..c {
                let hrow = &mut h[b * n..(b + 1) * n];
                hrow.iter_mut().for_each(|v| *v = ZERO);
                for a in 0..r {
                    let src = &e[(b * r + a) * n..(b * r + a + 1) * n];
                    let ua = &self.u[a * n..(a + 1) * n];
                    for x in 0..n {
                        hrow[x] += src[x] * ua[x];
                    }
                }
            }
            gemm(
                c,
                n,
                r,
                ONE,
                &h,
                n,
                1,
                &self.ucw_t,
                r,
                1,
                ZERO,
                &mut out[start * r..(start + c) * r],
                r,
                1,
            );
            start += c;
        }
        out
    }

    /// First delta term of a hermitian, symmetric level-3 quintic core, using the
    /// (a1,c1), (b1,d1) pair symmetries and the pair-swap conjugation.
    fn term1_quintic_packed(&self, core: &[C64]) -> Vec<C64> {
        let (r, n) = (self.r, self.npts);
        let r2 = r * r;
        let pairs: Vec<(usize, usize)> = (0..r).flat_map(|a| (a..r).map(move |c| (a, c))).collect();
        let np = pairs.len();
        let mut pidx = vec![0usize; r2];
        for (i, &(a, c)) in pairs.iter().enumerate() {
            pidx[a * r + c] = i;
            pidx[c * r + a] = i;
        }
        let rows: Vec<(usize, usize)> =
            (0..np).flat_map(|a| (a..np).map(move |b| (a, b))).collect();
        let mut epk = vec![ZERO; rows.len() * n];
        let chunk = (STAGE_ELEMS / r2).max(1);
        let mut buf = vec![ZERO; chunk * r2];
        let st = [r.pow(5), r.pow(4), r.pow(3), r * r, r, 1];
        let mut start = 0;
        while start < rows.len() {
            let c = chunk.min(rows.len() - start);
            for (i, &(pa, pb)) in rows[start..start + c].iter().enumerate() {
                let (a1, c1) = pairs[pa];
                let (b1, d1) = pairs[pb];
                let base = a1 * st[0] + c1 * st[1] + b1 * st[3] + d1 * st[4];
                let dst = &mut buf[i * r2..(i + 1) * r2];
                for c2 in 0..r {
                    for d2 in 0..r {
                        dst[c2 * r + d2] = core[base + c2 * st[2] + d2];
                    }
                }
            }
            gemm(
                c,
                r2,
                n,
                ONE,
                &buf,
                r2,
                1,
                &self.pair,
                n,
                1,
                ZERO,
                &mut epk[start * n..(start + c) * n],
                n,
                1,
            );
            start += c;
        }
        let row_of = |pa: usize, pb: usize| -> (usize, bool) {
            let (lo, hi, conj) = if pa <= pb {
                (pa, pb, false)
            } else {
                (pb, pa, true)
            };
            (lo * np - lo * (lo + 1) / 2 + hi, conj)
        };
        // H[b1, x] = Σ_{a1,c1,d1} u_{a1} E[{a1,c1},{b1,d1}] P[c1,d1]
        let mut h = vec![ZERO; r * n];
        for b1 in 0..r {
            let hrow = &mut h[b1 * n..(b1 + 1) * n];
            for a1 in 0..r {
                let ua = &self.u[a1 * n..(a1 + 1) * n];
                let mut f = vec![ZERO; n];
                for c1 in 0..r {
                    for d1 in 0..r {
                        let (row, conj) = row_of(pidx[a1 * r + c1], pidx[b1 * r + d1]);
                        let e = &epk[row * n..(row + 1) * n];
                        let p = &self.pair[(c1 * r + d1) * n..(c1 * r + d1 + 1) * n];
                        if conj {
                            for x in 0..n {
                                f[x] += e[x].conj() * p[x];
                            }
                        } else {
                            for x in 0..n {
                                f[x] += e[x] * p[x];
                            }
                        }
                    }
                }
                for x in 0..n {
                    hrow[x] += f[x] * ua[x];
                }
            }
        }
        // out[e, b1] = Σ_x w conj u_e H[b1, x]
        let mut out = vec![ZERO; r * r];
        gemm(
            r,
            n,
            r,
            ONE,
            &self.ucw_t,
            1,
            r,
            &h,
            1,
            n,
            ZERO,
            &mut out,
            r,
            1,
        );
        out
    }

    /// Σ_j (term1_j − term2_j); `fast` assumes a hermitian, bosonic-symmetric core.
    pub fn b_full(&self, core: &[C64], k: usize, q: usize, fast: bool) -> Vec<C64> {
        let r = self.r;
        if fast && k == 1 && q == 2 {
            let mut t1 = self.term1_quintic_packed(core);
            let hs = herm(&t1, 1);
            linalg::axpy(&mut t1, -ONE, &hs);
            return t1;
        }
        if fast {
            let t1 = self.term1(core, k, q, 0);
            let dims = vec![r; 2 * k];
            let mut sum = t1.clone();
            for j in 1..k {
                let mut perm: Vec<usize> = (0..2 * k).collect();
                perm.swap(0, j);
                linalg::axpy(&mut sum, ONE, &permute(&t1, &dims, &perm));
            }
            let hs = herm(&sum, k);
            linalg::axpy(&mut sum, -ONE, &hs);
            sum
        } else {
            let hc = herm(core, k + q);
            let mut out = vec![ZERO; r.pow(2 * k as u32)];
            for j in 0..k {
                linalg::axpy(&mut out, ONE, &self.term1(core, k, q, j));
                linalg::axpy(&mut out, -ONE, &herm(&self.term1(&hc, k, q, j), k));
            }
            out
        }
    }

    /// Projected one-slot operator ρ^q γ₁ − γ₁ ρ^q for the factorized closure.
    pub fn closure_slot(&self, c1: &[C64], q: usize) -> Vec<C64> {
        let (r, n) = (self.r, self.npts);
        let mut rho = vec![ZERO; n];
        for a in 0..r {
            for b in 0..r {
                let c = c1[a * r + b];
                if c == ZERO {
                    continue;
                }
                let p = &self.pair[(a * r + b) * n..(a * r + b + 1) * n];
                rho.iter_mut().zip(p).for_each(|(v, x)| *v += c * x);
            }
        }
        let rq: Vec<C64> = rho.iter().map(|v| v.powi(q as i32)).collect();
        // M[e,a] = w Σ conj u_e ρ^q u_a ; M2[e,b] = w Σ u_e conj u_b ρ^q
        let mut m1 = vec![ZERO; r * r];
        let mut m2 = vec![ZERO; r * r];
        for e in 0..r {
            for a in 0..r {
                let mut s1 = ZERO;
                let mut s2 = ZERO;
                for x in 0..n {
                    s1 += self.ucw_t[x * r + e] * rq[x] * self.u[a * n + x];
                    s2 += self.ucw_t[x * r + a] * rq[x] * self.u[e * n + x];
                }
                m1[e * r + a] = s1;
                m2[e * r + a] = s2;
            }
        }
        let left = linalg::matmul(r, r, r, &m1, c1);
        let m2t: Vec<C64> = (0..r * r).map(|i| m2[(i % r) * r + i / r]).collect();
        let right = linalg::matmul(r, r, r, c1, &m2t);
        left.iter().zip(&right).map(|(a, b)| a - b).collect()
    }

    /// Galerkin coefficients of a dense kernel.
    pub fn project_dense(&self, data: &[C64], k: usize) -> Vec<C64> {
        let (r, n) = (self.r, self.npts);
        let left: Vec<C64> = (0..r * n)
            .map(|i| self.ucw_t[(i % n) * r + i / n])
            .collect();
        let right: Vec<C64> = left.iter().map(|v| v.conj()).collect();
        let mut dims = vec![n; 2 * k];
        let mut out = data.to_vec();
        for ax in 0..2 * k {
            out = linalg::mode_mul(&out, &dims, ax, if ax < k { &left } else { &right }, r);
            dims[ax] = r;
        }
        out
    }

    /// Rank-one projection of a separable marginal onto the basis (Kronecker form).
    pub fn project_separable(&self, terms: &[SepTerm], k: usize) -> KronSum {
        let (r, n) = (self.r, self.npts);
        let proj = |f: &[C64]| -> Vec<C64> {
            (0..r)
                .map(|a| (0..n).map(|x| self.ucw_t[x * r + a] * f[x]).sum())
                .collect()
        };
        let terms = terms
            .iter()
            .map(|t| {
                let fs =
                    t.f.iter()
                        .zip(&t.g)
                        .map(|(f, g)| {
                            let (pf, pg) = (proj(f), proj(g));
                            let mut m = vec![ZERO; r * r];
                            for a in 0..r {
                                for b in 0..r {
                                    m[a * r + b] = pf[a] * pg[b].conj();
                                }
                            }
                            m
                        })
                        .collect();
                (t.coef, fs)
            })
            .collect();
        KronSum { r, k, terms }
    }
}

/// Σ_j ⊗(γ₁,…,X at j,…,γ₁) in Kronecker form.
pub(crate) fn closure_kron(c1: &[C64], x: &[C64], r: usize, k: usize) -> KronSum {
    let terms = (0..k)
        .map(|j| {
            let fs = (0..k)
                .map(|i| if i == j { x.to_vec() } else { c1.to_vec() })
                .collect();
            (ONE, fs)
        })
        .collect();
    KronSum { r, k, terms }
}

/// Dense factorized-closure slot operator ρ^q γ₁ − γ₁ ρ^q.
pub(crate) fn dense_closure_slot(g1: &[C64], npts: usize, q: usize) -> Vec<C64> {
    let rho: Vec<C64> = (0..npts).map(|x| g1[x * npts + x].powi(q as i32)).collect();
    let mut out = vec![ZERO; npts * npts];
    for x in 0..npts {
        for y in 0..npts {
            out[x * npts + y] = (rho[x] - rho[y]) * g1[x * npts + y];
        }
    }
    out
}

/// Closure output at level k (whose source level k + q lies above the truncation).
pub fn closure_level(state: &HierarchyState, k: usize) -> Result<DensityMatrix> {
    let q = state.model.q();
    let g1 = &state.marginals[0];
    let grid = state.grid();
    let like = |repr: Repr, symmetric: bool| -> DensityMatrix {
        let mut m = DensityMatrix {
            k,
            grid,
            repr,
            hermitian: false,
            symmetric,
            trace: ZERO,
        };
        m.trace = m.compute_trace();
        m
    };
    match &state.closure {
        Closure::Zero => Ok(like(zero_repr(g1, k)?, true)),
        Closure::Factorized => match &g1.repr {
            Repr::Dense(d) => {
                let npts = grid.points();
                let x = dense_closure_slot(d, npts, q);
                let ks = closure_kron(d, &x, npts, k);
                crate::state::check_dense(&grid, k)?;
                Ok(like(Repr::Dense(ks.materialize()), true))
            }
            Repr::Tucker(tk) => {
                let ctx = TuckerCtx::new(&tk.basis, tk.tau);
                let c1 = tk.core.full();
                let x = ctx.closure_slot(&c1, q);
                let ks = closure_kron(&c1, &x, ctx.r, k);
                Ok(like(Repr::Tucker(tk.with_core(CoreData::Kron(ks))), true))
            }
            Repr::Separable(terms) => {
                // γ₁^{⊗(k+q)} expanded term by term
                let top = tensor_power(terms, k + q);
                let src = DensityMatrix::separable(k + q, grid, top, g1.hermitian, true)?;
                Ok(like(apply_b_full(&src, state.model.p)?.repr, true))
            }
        },
        Closure::Free { t0, tops } => {
            let top = &tops[k + q - state.depth() - 1];
            let evolved = free_propagate(top, state.t - t0)?;
            let b = apply_b_full(&evolved, state.model.p)?;
            Ok(like(convert_like(&b, g1)?, top.symmetric))
        }
    }
}

fn zero_repr(like: &DensityMatrix, k: usize) -> Result<Repr> {
    Ok(match &like.repr {
        Repr::Dense(_) => {
            crate::state::check_dense(&like.grid, k)?;
            Repr::Dense(vec![ZERO; like.grid.points().pow(2 * k as u32)])
        }
        Repr::Separable(_) => Repr::Separable(vec![]),
        Repr::Tucker(tk) => Repr::Tucker(tk.with_core(CoreData::Kron(KronSum {
            r: tk.basis.rank,
            k,
            terms: vec![],
        }))),
    })
}

/// Re-express `m` in the representation family of `like`.
pub(crate) fn convert_like(m: &DensityMatrix, like: &DensityMatrix) -> Result<Repr> {
    Ok(match (&like.repr, &m.repr) {
        (Repr::Dense(_), _) => Repr::Dense(m.to_dense()?),
        (Repr::Separable(_), Repr::Separable(t)) => Repr::Separable(t.clone()),
        (Repr::Separable(_), _) => return shape("cannot convert to separable form"),
        (Repr::Tucker(tk), Repr::Separable(t)) => {
            let ctx = TuckerCtx::new(&tk.basis, tk.tau);
            Repr::Tucker(tk.with_core(CoreData::Kron(ctx.project_separable(t, m.k))))
        }
        (Repr::Tucker(tk), Repr::Tucker(src))
            if Arc::ptr_eq(&tk.basis, &src.basis) && tk.tau == src.tau =>
        {
            m.repr.clone()
        }
        (Repr::Tucker(_), _) => return shape("cannot project onto a different reduced basis"),
    })
}

fn tensor_power(terms: &[SepTerm], m: usize) -> Vec<SepTerm> {
    let mut acc: Vec<SepTerm> = vec![SepTerm {
        coef: ONE,
        f: vec![],
        g: vec![],
    }];
    for _ in 0..m {
        let mut next = Vec::with_capacity(acc.len() * terms.len());
        for a in &acc {
            for t in terms {
                let mut f = a.f.clone();
                f.push(t.f[0].clone());
                let mut g = a.g.clone();
                g.push(t.g[0].clone());
                next.push(SepTerm {
                    coef: a.coef * t.coef,
                    f,
                    g,
                });
            }
        }
        acc = next;
    }
    acc
}

/// (B_{k+p/2} γ^{(k+p/2)})_{k=1..K} with closure-supplied top levels.
pub fn apply_b_hat(state: &HierarchyState) -> Result<Vec<DensityMatrix>> {
    if matches!(state.closure, Closure::Factorized) {
        state.check_rank_one()?;
    }
    b_hat_unchecked(state)
}

/// B̂Γ without the rank-one precondition (callers check it once at the start of a run).
pub(crate) fn b_hat_unchecked(state: &HierarchyState) -> Result<Vec<DensityMatrix>> {
    let q = state.model.q();
    let kk = state.depth();
    (1..=kk)
        .map(|k| {
            if k + q <= kk {
                apply_b_full(&state.marginals[k + q - 1], state.model.p)
            } else {
                closure_level(state, k)
            }
        })
        .collect()
}

pub fn trace_of_b_hat(out: &[DensityMatrix]) -> f64 {
    out.iter()
        .map(|m| m.compute_trace().norm())
        .fold(0.0, f64::max)
}
