use num_complex::Complex64 as C64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::grid::GridSpec;
use crate::linalg;
use crate::state::{DensityMatrix, WaveFunction};

pub fn random_vec(seed: u64, n: usize) -> Vec<C64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| C64::new(rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5))
        .collect()
}

pub fn random_dense(seed: u64, g: &GridSpec, k: usize) -> DensityMatrix {
    DensityMatrix::from_dense(k, *g, random_vec(seed, g.points().pow(2 * k as u32)))
}

pub fn random_wave(seed: u64, g: &GridSpec) -> WaveFunction {
    WaveFunction::new(*g, random_vec(seed, g.points()))
        .unwrap()
        .normalized()
        .unwrap()
}

/// Hermitian positive marginal with unit trace (not bosonic-symmetric).
pub fn random_psd(seed: u64, g: &GridSpec, k: usize) -> DensityMatrix {
    let m = g.points().pow(k as u32);
    let a = random_vec(seed, m * m);
    let ah: Vec<C64> = (0..m * m).map(|i| a[(i % m) * m + i / m].conj()).collect();
    let p = linalg::matmul(m, m, m, &a, &ah);
    let mut d = DensityMatrix::from_dense(k, *g, p);
    let tr = d.trace.re;
    d = d.scaled(C64::new(1.0 / tr, 0.0));
    d.hermitian = true;
    d
}

/// a ⊗ b for dense marginals (slots of a first).
pub fn kron_dense(a: &DensityMatrix, b: &DensityMatrix) -> DensityMatrix {
    let (ka, kb) = (a.k, b.k);
    let npts = a.grid.points();
    let (na, nb) = (npts.pow(ka as u32), npts.pow(kb as u32));
    let (da, db) = (a.dense().unwrap(), b.dense().unwrap());
    let nn = na * nb;
    let mut out = vec![C64::new(0.0, 0.0); nn * nn];
    for x in 0..na {
        for y in 0..nb {
            for xp in 0..na {
                for yp in 0..nb {
                    out[(x * nb + y) * nn + xp * nb + yp] = da[x * na + xp] * db[y * nb + yp];
                }
            }
        }
    }
    DensityMatrix::from_dense(ka + kb, a.grid, out)
}

/// Orthonormal (h-weighted) basis from a random unitary; complete when r = N.
pub fn random_basis(
    seed: u64,
    g: &GridSpec,
    r: usize,
) -> std::sync::Arc<crate::state::ReducedBasis> {
    let n = g.points();
    let a = nalgebra::DMatrix::from_row_slice(n, n, &random_vec(seed, n * n));
    let q = a.qr().q();
    let s = 1.0 / g.cell().sqrt();
    let modes: Vec<C64> = (0..r)
        .flat_map(|j| (0..n).map(move |x| (j, x)))
        .map(|(j, x)| q[(x, j)] * s)
        .collect();
    std::sync::Arc::new(crate::state::ReducedBasis::new(*g, r, modes).unwrap())
}

pub fn to_tucker(
    m: &DensityMatrix,
    basis: &std::sync::Arc<crate::state::ReducedBasis>,
    tau: f64,
) -> DensityMatrix {
    let ctx = crate::contraction::TuckerCtx::new(basis, tau);
    let core = ctx.project_dense(m.dense().unwrap(), m.k);
    let form = crate::state::TuckerForm {
        basis: basis.clone(),
        tau,
        core: crate::state::CoreData::Full(core),
    };
    DensityMatrix::tucker(m.k, form, m.hermitian, m.symmetric)
}
