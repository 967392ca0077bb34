//! Periodic grid geometry and spectral multipliers on slot-structured tensors.

use std::f64::consts::PI;
use std::sync::Arc;

use num_complex::Complex64 as C64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{GphError, Result};
use crate::state::{DensityMatrix, Repr};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub d: usize,
    pub n: usize,
    pub l: f64,
}

impl GridSpec {
    pub fn new(d: usize, n: usize, l: f64) -> Result<Self> {
        if !(1..=3).contains(&d) {
            return Err(GphError::Argument(format!("dimension {d} not in 1..=3")));
        }
        if n < 4 || n % 2 != 0 {
            return Err(GphError::Argument(format!("n = {n} must be even and >= 4")));
        }
        if !(l > 0.0 && l.is_finite()) {
            return Err(GphError::Argument(format!("period {l} must be positive")));
        }
        Ok(GridSpec { d, n, l })
    }

    pub fn h(&self) -> f64 {
        self.l / self.n as f64
    }

    /// Points per slot, n^d.
    pub fn points(&self) -> usize {
        self.n.pow(self.d as u32)
    }

    /// Cell volume h^d.
    pub fn cell(&self) -> f64 {
        self.h().powi(self.d as i32)
    }

    pub fn freq_index(&self, i: usize) -> i64 {
        let n = self.n as i64;
        let i = i as i64;
        if i < n / 2 {
            i
        } else {
            i - n
        }
    }

    pub fn freq_indices(&self) -> Vec<i64> {
        (0..self.n).map(|i| self.freq_index(i)).collect()
    }

    pub fn wavenumber(&self, m: i64) -> f64 {
        2.0 * PI * m as f64 / self.l
    }

    pub fn coord(&self, i: usize) -> f64 {
        -0.5 * self.l + i as f64 * self.h()
    }

    /// Per-axis indices of a flattened slot point.
    pub fn unflatten(&self, mut p: usize) -> [usize; 3] {
        let mut out = [0; 3];
        for a in (0..self.d).rev() {
            out[a] = p % self.n;
            p /= self.n;
        }
        out
    }

    pub fn position(&self, p: usize) -> [f64; 3] {
        let ix = self.unflatten(p);
        let mut x = [0.0; 3];
        for a in 0..self.d {
            x[a] = self.coord(ix[a]);
        }
        x
    }

    pub fn x2_table(&self) -> Vec<f64> {
        (0..self.points())
            .map(|p| self.position(p).iter().map(|v| v * v).sum())
            .collect()
    }

    /// |q|^2 at each flattened frequency point.
    pub fn q2_table(&self) -> Vec<f64> {
        (0..self.points())
            .map(|p| {
                let ix = self.unflatten(p);
                (0..self.d)
                    .map(|a| self.wavenumber(self.freq_index(ix[a])).powi(2))
                    .sum()
            })
            .collect()
    }

    pub(crate) fn same(&self, o: &GridSpec) -> bool {
        self.d == o.d && self.n == o.n && self.l == o.l
    }
}

pub fn bracket_weight(grid: &GridSpec, alpha: f64, m: i64) -> Result<f64> {
    let half = grid.n as i64 / 2;
    if m < -half || m >= half {
        return Err(GphError::Index(format!(
            "frequency index {m} outside [-{half}, {half})"
        )));
    }
    let q = grid.wavenumber(m);
    Ok((1.0 + q * q).powf(alpha / 2.0))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum MultiplierKind {
    Identity,
    Bracket { alpha: f64 },
    FreePhase { t: f64 },
}

/// Weight table over the flattened frequency points of one slot. Primed slots
/// receive the conjugate weight.
#[derive(Clone, Debug)]
pub struct MultiplierProfile {
    pub grid: GridSpec,
    pub kind: MultiplierKind,
    pub table: Vec<C64>,
}

impl MultiplierProfile {
    pub fn new(grid: &GridSpec, kind: MultiplierKind) -> Result<Self> {
        let q2 = grid.q2_table();
        let table = match kind {
            MultiplierKind::Identity => vec![C64::new(1.0, 0.0); q2.len()],
            MultiplierKind::Bracket { alpha } => {
                if alpha < 0.0 {
                    return Err(GphError::Argument(format!("alpha = {alpha} < 0")));
                }
                q2.iter()
                    .map(|&v| C64::new((1.0 + v).powf(alpha / 2.0), 0.0))
                    .collect()
            }
            MultiplierKind::FreePhase { t } => {
                q2.iter().map(|&v| C64::from_polar(1.0, -t * v)).collect()
            }
        };
        Ok(MultiplierProfile {
            grid: *grid,
            kind,
            table,
        })
    }

    pub fn alpha(&self) -> f64 {
        match self.kind {
            MultiplierKind::Bracket { alpha } => alpha,
            _ => 0.0,
        }
    }
}

/// FFT plans for one grid; cheap to build, owned per call site.
pub struct Spectral {
    n: usize,
    d: usize,
    fwd: Arc<dyn Fft<f64>>,
    inv: Arc<dyn Fft<f64>>,
}

const LINE_BATCH: usize = 1 << 14;

impl Spectral {
    pub fn new(grid: &GridSpec) -> Self {
        let mut planner = FftPlanner::new();
        Spectral {
            n: grid.n,
            d: grid.d,
            fwd: planner.plan_fft_forward(grid.n),
            inv: planner.plan_fft_inverse(grid.n),
        }
    }

    /// Unitary transform over every axis of a tensor with `slots` slots.
    pub fn transform(&self, data: &mut [C64], slots: usize, forward: bool) {
        let naxes = slots * self.d;
        for a in 0..naxes {
            self.axis(data, naxes, a, forward);
        }
        let s = (self.n as f64).powf(-0.5 * naxes as f64);
        data.iter_mut().for_each(|v| *v *= s);
    }

    /// Unitary transform over the axes of one slot.
    pub fn transform_slot(&self, data: &mut [C64], slots: usize, slot: usize, forward: bool) {
        let naxes = slots * self.d;
        for a in slot * self.d..(slot + 1) * self.d {
            self.axis(data, naxes, a, forward);
        }
        let s = (self.n as f64).powf(-0.5 * self.d as f64);
        data.iter_mut().for_each(|v| *v *= s);
    }

    fn axis(&self, data: &mut [C64], naxes: usize, axis: usize, forward: bool) {
        let n = self.n;
        let fft = if forward { &self.fwd } else { &self.inv };
        let mut scratch = vec![C64::new(0.0, 0.0); fft.get_inplace_scratch_len()];
        let stride = n.pow((naxes - 1 - axis) as u32);
        if stride == 1 {
            fft.process_with_scratch(data, &mut scratch);
            return;
        }
        let cols = (LINE_BATCH / n).max(1).min(stride);
        let mut buf = vec![C64::new(0.0, 0.0); cols * n];
        for block in data.chunks_mut(n * stride) {
            let mut i0 = 0;
            while i0 < stride {
                let c = cols.min(stride - i0);
                for j in 0..n {
                    let row = &block[j * stride + i0..j * stride + i0 + c];
                    for (i, v) in row.iter().enumerate() {
                        buf[i * n + j] = *v;
                    }
                }
                fft.process_with_scratch(&mut buf[..c * n], &mut scratch);
                for j in 0..n {
                    let row = &mut block[j * stride + i0..j * stride + i0 + c];
                    for (i, v) in row.iter_mut().enumerate() {
                        *v = buf[i * n + j];
                    }
                }
                i0 += c;
            }
        }
    }

    /// Multiply slot `slot` (out of `slots`) pointwise by `w`.
    pub fn weight_slot(data: &mut [C64], npts: usize, slots: usize, slot: usize, w: &[C64]) {
        let stride = npts.pow((slots - 1 - slot) as u32);
        for chunk in data.chunks_mut(stride * npts) {
            for (p, wp) in w.iter().enumerate() {
                chunk[p * stride..(p + 1) * stride]
                    .iter_mut()
                    .for_each(|v| *v *= wp);
            }
        }
    }

    /// Forward transform, per-slot weights (conjugated on the primed half), inverse.
    pub fn multiply(&self, data: &mut [C64], k: usize, table: &[C64]) {
        let npts = table.len();
        let conj: Vec<C64> = table.iter().map(|w| w.conj()).collect();
        self.transform(data, 2 * k, true);
        for s in 0..2 * k {
            Self::weight_slot(data, npts, 2 * k, s, if s < k { table } else { &conj });
        }
        self.transform(data, 2 * k, false);
    }

    /// One-body function transform.
    pub fn fft1(&self, f: &mut [C64], forward: bool) {
        self.transform(f, 1, forward);
    }
}

/// e^{itΔ} applied to a one-body grid function.
pub fn propagate_fn(grid: &GridSpec, f: &[C64], t: f64) -> Vec<C64> {
    if t == 0.0 {
        return f.to_vec();
    }
    let sp = Spectral::new(grid);
    let q2 = grid.q2_table();
    let mut g = f.to_vec();
    sp.fft1(&mut g, true);
    for (v, q) in g.iter_mut().zip(&q2) {
        *v *= C64::from_polar(1.0, -t * q);
    }
    sp.fft1(&mut g, false);
    g
}

/// Apply e^{itΔ} to each function of a batch stored as consecutive rows.
pub fn propagate_rows(grid: &GridSpec, rows: &[C64], t: f64) -> Vec<C64> {
    let npts = grid.points();
    let mut out = rows.to_vec();
    if t == 0.0 {
        return out;
    }
    let sp = Spectral::new(grid);
    let phase: Vec<C64> = grid
        .q2_table()
        .iter()
        .map(|q| C64::from_polar(1.0, -t * q))
        .collect();
    for r in out.chunks_mut(npts) {
        sp.fft1(r, true);
        r.iter_mut().zip(&phase).for_each(|(v, w)| *v *= w);
        sp.fft1(r, false);
    }
    out
}

pub fn apply_multiplier(
    gamma: &DensityMatrix,
    profile: &MultiplierProfile,
) -> Result<DensityMatrix> {
    if !gamma.grid.same(&profile.grid) {
        return Err(GphError::Shape(
            "multiplier grid differs from state grid".into(),
        ));
    }
    let data = match &gamma.repr {
        Repr::Dense(d) => d,
        _ => {
            return Err(GphError::Shape(
                "apply_multiplier needs a dense marginal".into(),
            ))
        }
    };
    let mut out = data.clone();
    Spectral::new(&gamma.grid).multiply(&mut out, gamma.k, &profile.table);
    Ok(DensityMatrix::from_dense_flags(
        gamma.k,
        gamma.grid,
        out,
        gamma.hermitian,
        gamma.symmetric,
    ))
}

/// e^{itΔ^{(k)}_±} on a dense, separable or reduced marginal.
pub fn free_propagate(gamma: &DensityMatrix, t: f64) -> Result<DensityMatrix> {
    if t == 0.0 {
        return Ok(gamma.clone());
    }
    match &gamma.repr {
        Repr::Dense(_) => {
            let prof = MultiplierProfile::new(&gamma.grid, MultiplierKind::FreePhase { t })?;
            let mut out = apply_multiplier(gamma, &prof)?;
            out.trace = gamma.trace;
            Ok(out)
        }
        Repr::Separable(terms) => {
            let terms = terms
                .iter()
                .map(|tm| tm.map_factors(|f| propagate_fn(&gamma.grid, f, t)))
                .collect();
            Ok(gamma.with_repr(Repr::Separable(terms)))
        }
        Repr::Tucker(tk) => {
            let mut tk = tk.clone();
            tk.tau += t;
            Ok(gamma.with_repr(Repr::Tucker(tk)))
        }
    }
}

/// By-value variant; reduced marginals only shift their basis time.
pub fn free_propagate_owned(mut gamma: DensityMatrix, t: f64) -> Result<DensityMatrix> {
    if let Repr::Tucker(tk) = &mut gamma.repr {
        tk.tau += t;
        return Ok(gamma);
    }
    free_propagate(&gamma, t)
}
