//! One-body split-step NLS oracle, ground state, factorized embeddings.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64 as C64;

use crate::error::{GphError, Result};
use crate::grid::{GridSpec, Spectral};
use crate::state::{from_factorized, Closure, HierarchyState, Model, ReprKind, WaveFunction};

#[derive(Clone, Debug)]
pub struct NlsTrajectory {
    pub dt: f64,
    pub times: Vec<f64>,
    pub states: Vec<WaveFunction>,
}

struct Kinetic {
    sp: Spectral,
    half: Vec<C64>,
}

impl Kinetic {
    fn new(grid: &GridSpec, dt: f64) -> Self {
        let half = grid
            .q2_table()
            .iter()
            .map(|q| C64::from_polar(1.0, -0.5 * dt * q))
            .collect();
        Kinetic {
            sp: Spectral::new(grid),
            half,
        }
    }

    fn apply(&self, f: &mut [C64]) {
        self.sp.fft1(f, true);
        f.iter_mut().zip(&self.half).for_each(|(v, w)| *v *= w);
        self.sp.fft1(f, false);
    }
}

/// Strang split-step for i∂φ + Δφ − μ|φ|^p φ = 0, keeping every `stride`-th state.
pub fn split_step_sampled(
    phi0: &WaveFunction,
    p: usize,
    mu: f64,
    dt: f64,
    steps: usize,
    stride: usize,
) -> Result<NlsTrajectory> {
    let stride = stride.max(1);
    let kin = Kinetic::new(&phi0.grid, dt);
    let mut f = phi0.values.clone();
    let mut times = vec![0.0];
    let mut states = vec![phi0.clone()];
    for s in 1..=steps {
        let peak = f
            .iter()
            .map(|v| v.norm())
            .fold(0.0, f64::max)
            .powi(p as i32);
        if dt * peak * mu.abs() > 0.5 {
            return Err(GphError::Stability(format!(
                "dt·max|φ|^p = {:.3e} exceeds 0.5",
                dt * peak
            )));
        }
        kin.apply(&mut f);
        for v in f.iter_mut() {
            *v *= C64::from_polar(1.0, -dt * mu * v.norm().powi(p as i32));
        }
        kin.apply(&mut f);
        if s % stride == 0 || s == steps {
            times.push(s as f64 * dt);
            states.push(WaveFunction {
                grid: phi0.grid,
                values: f.clone(),
            });
        }
    }
    Ok(NlsTrajectory { dt, times, states })
}

pub fn split_step(
    phi0: &WaveFunction,
    p: usize,
    mu: f64,
    dt: f64,
    steps: usize,
) -> Result<NlsTrajectory> {
    split_step_sampled(phi0, p, mu, dt, steps, 1)
}

/// E[φ] = ∫ |∇φ|² + 2μ/(p+2) |φ|^{p+2}.
pub fn energy(phi: &WaveFunction, p: usize, mu: f64) -> f64 {
    let mut f = phi.values.clone();
    Spectral::new(&phi.grid).fft1(&mut f, true);
    let kin: f64 = f
        .iter()
        .zip(phi.grid.q2_table())
        .map(|(v, q)| v.norm_sqr() * q)
        .sum();
    let pot: f64 = phi.values.iter().map(|v| v.norm().powi(p as i32 + 2)).sum();
    phi.grid.cell() * (kin + 2.0 * mu / (p as f64 + 2.0) * pot)
}

fn ode_rhs(q: f64) -> f64 {
    q - q.powi(5)
}

/// Shoot from Q(0) = a, Q'(0) = 0; +1 if Q crosses zero, −1 if it turns back up, 0 otherwise.
fn shoot(a: f64, xmax: f64, h: f64, samples: Option<(&mut Vec<f64>, f64)>) -> i32 {
    let (mut q, mut dq) = (a, 0.0);
    let mut x = 0.0;
    let mut samples = samples;
    let mut next_sample = 0.0;
    while x < xmax {
        if let Some((buf, dx)) = samples.as_mut() {
            while next_sample <= x + 1e-12 {
                buf.push(q);
                next_sample += *dx;
            }
        }
        let k1 = (dq, ode_rhs(q));
        let k2 = (dq + 0.5 * h * k1.1, ode_rhs(q + 0.5 * h * k1.0));
        let k3 = (dq + 0.5 * h * k2.1, ode_rhs(q + 0.5 * h * k2.0));
        let k4 = (dq + h * k3.1, ode_rhs(q + h * k3.0));
        q += h / 6.0 * (k1.0 + 2.0 * k2.0 + 2.0 * k3.0 + k4.0);
        dq += h / 6.0 * (k1.1 + 2.0 * k2.1 + 2.0 * k3.1 + k4.1);
        x += h;
        if q < 0.0 {
            return 1;
        }
        if dq > 0.0 {
            return -1;
        }
    }
    0
}

/// Positive even solution of Q'' − Q + Q⁵ = 0 on the periodic grid, centered at x = 0.
pub fn ground_state_quintic_1d(grid: &GridSpec) -> Result<WaveFunction> {
    if grid.d != 1 {
        return Err(GphError::Argument("ground state is one-dimensional".into()));
    }
    if grid.l < 16.0 {
        return Err(GphError::Argument(format!("period {} < 16", grid.l)));
    }
    let n = grid.n;
    let half = grid.l / 2.0;
    let hs = (grid.h() / 8.0).min(1e-3);
    let (mut lo, mut hi) = (0.5, 3.0);
    if shoot(lo, half, hs, None) != -1 || shoot(hi, half, hs, None) != 1 {
        return Err(GphError::Numeric("shooting failed to bracket Q(0)".into()));
    }
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        match shoot(mid, half, hs, None) {
            1 => hi = mid,
            -1 => lo = mid,
            _ => break,
        }
    }
    let a = 0.5 * (lo + hi);
    let mut prof = Vec::new();
    shoot(a, half, hs, Some((&mut prof, grid.h())));
    let mut q: Vec<f64> = (0..n)
        .map(|i| {
            let x = grid.coord(i).abs();
            let j = (x / grid.h()).round() as usize;
            // the shooting profile departs exponentially late; use its decaying part only
            prof.get(j).copied().filter(|v| *v > 1e-6).unwrap_or(0.0)
        })
        .collect();

    // Newton refinement in the even subspace: (J − P_odd) δ = −F.
    let d2 = second_derivative_matrix(grid);
    let parity = |i: usize| (n - i) % n;
    for _ in 0..40 {
        let f = residual_vec(&d2, &q);
        let res = f.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if res < 1e-13 {
            break;
        }
        let mut j = d2.clone();
        for i in 0..n {
            j[(i, i)] += -1.0 + 5.0 * q[i].powi(4);
        }
        for i in 0..n {
            j[(i, i)] -= 0.5;
            j[(i, parity(i))] += 0.5;
        }
        let rhs = DVector::from_iterator(n, f.iter().map(|v| -v));
        let delta = j
            .lu()
            .solve(&rhs)
            .ok_or_else(|| GphError::Numeric("singular Newton system".into()))?;
        for i in 0..n {
            q[i] += 0.5 * (delta[i] + delta[parity(i)]);
        }
    }
    let res = residual_vec(&d2, &q)
        .iter()
        .fold(0.0f64, |m, v| m.max(v.abs()));
    if res > 1e-10 {
        return Err(GphError::Numeric(format!(
            "ground state residual {res:.3e}"
        )));
    }
    WaveFunction::new(*grid, q.into_iter().map(|v| C64::new(v, 0.0)).collect())
}

fn second_derivative_matrix(grid: &GridSpec) -> DMatrix<f64> {
    let n = grid.n;
    let sp = Spectral::new(grid);
    let q2 = grid.q2_table();
    let mut m = DMatrix::zeros(n, n);
    for j in 0..n {
        let mut e = vec![C64::new(0.0, 0.0); n];
        e[j] = C64::new(1.0, 0.0);
        sp.fft1(&mut e, true);
        e.iter_mut().zip(&q2).for_each(|(v, q)| *v *= -q);
        sp.fft1(&mut e, false);
        for i in 0..n {
            m[(i, j)] = e[i].re;
        }
    }
    m
}

fn residual_vec(d2: &DMatrix<f64>, q: &[f64]) -> Vec<f64> {
    let v = DVector::from_column_slice(q);
    let lap = d2 * &v;
    (0..q.len()).map(|i| lap[i] - q[i] + q[i].powi(5)).collect()
}

/// Spectral residual max|Q'' − Q + Q⁵|.
pub fn ground_state_residual(q: &WaveFunction) -> f64 {
    let mut f = q.values.clone();
    let sp = Spectral::new(&q.grid);
    sp.fft1(&mut f, true);
    f.iter_mut()
        .zip(q.grid.q2_table())
        .for_each(|(v, k)| *v *= -k);
    sp.fft1(&mut f, false);
    f.iter()
        .zip(&q.values)
        .map(|(l, v)| (l - v + v.powi(5)).norm())
        .fold(0.0, f64::max)
}

/// Embed sampled NLS states as factorized hierarchies (separable form).
pub fn factorized_trajectory(
    traj: &NlsTrajectory,
    depth: usize,
    stride: usize,
    model: Model,
) -> Result<Vec<HierarchyState>> {
    let stride = stride.max(1);
    let grid = traj.states[0].grid;
    let mut out = Vec::new();
    for (i, (t, phi)) in traj.times.iter().zip(&traj.states).enumerate() {
        if i % stride != 0 {
            continue;
        }
        if !phi.grid.same(&grid) {
            return Err(GphError::Shape("trajectory grids differ".into()));
        }
        let marginals = (1..=depth)
            .map(|k| from_factorized(phi, k, ReprKind::Separable))
            .collect::<Result<Vec<_>>>()?;
        out.push(HierarchyState {
            model,
            closure: Closure::Factorized,
            t: *t,
            marginals,
        });
    }
    Ok(out)
}
