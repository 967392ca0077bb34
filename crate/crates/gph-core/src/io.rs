//! GPH1 tensor snapshots, run headers and CSV series.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::sync::Arc;

use num_complex::Complex64 as C64;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::engine::{StepRecord, Trajectory};
use crate::error::{GphError, Result};
use crate::grid::GridSpec;
use crate::state::{
    CoreData, DensityMatrix, HierarchyState, KronSum, ReducedBasis, Repr, SepTerm, TuckerForm,
};

pub const MAGIC: &[u8; 4] = b"GPH1";
pub const TAG_DENSE: u32 = 0;
pub const TAG_SEPARABLE: u32 = 1;
pub const TAG_REDUCED: u32 = 2;

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v =
        u32::try_from(v).map_err(|_| GphError::Format(format!("{v} does not fit in 32 bits")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn put_c(out: &mut Vec<u8>, z: C64) {
    out.extend_from_slice(&z.re.to_le_bytes());
    out.extend_from_slice(&z.im.to_le_bytes());
}

fn put_vec(out: &mut Vec<u8>, v: &[C64]) {
    out.reserve(16 * v.len());
    v.iter().for_each(|z| put_c(out, *z));
}

/// Encodes one marginal. Reduced payload: rank, basis time, rank×points modes, then a core
/// kind (0 full, 1 Kronecker sum) and its entries.
pub fn encode_marginal(m: &DensityMatrix) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    let tag = match &m.repr {
        Repr::Dense(_) => TAG_DENSE,
        Repr::Separable(_) => TAG_SEPARABLE,
        Repr::Tucker(_) => TAG_REDUCED,
    };
    put_u32(&mut out, m.grid.d)?;
    put_u32(&mut out, m.grid.n)?;
    put_u32(&mut out, m.k)?;
    put_u32(&mut out, tag as usize)?;
    out.extend_from_slice(&m.grid.l.to_le_bytes());
    match &m.repr {
        Repr::Dense(d) => put_vec(&mut out, d),
        Repr::Separable(terms) => {
            put_u32(&mut out, terms.len())?;
            for t in terms {
                put_c(&mut out, t.coef);
                t.f.iter().chain(&t.g).for_each(|v| put_vec(&mut out, v));
            }
        }
        Repr::Tucker(tk) => {
            put_u32(&mut out, tk.basis.rank)?;
            out.extend_from_slice(&tk.tau.to_le_bytes());
            put_vec(&mut out, &tk.basis.modes);
            match &tk.core {
                CoreData::Full(c) => {
                    put_u32(&mut out, 0)?;
                    put_vec(&mut out, c);
                }
                CoreData::Kron(ks) => {
                    put_u32(&mut out, 1)?;
                    put_u32(&mut out, ks.terms.len())?;
                    for (c, fs) in &ks.terms {
                        put_c(&mut out, *c);
                        fs.iter().for_each(|f| put_vec(&mut out, f));
                    }
                }
            }
        }
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self.pos.checked_add(n).filter(|e| *e <= self.buf.len());
        let end = end
            .ok_or_else(|| GphError::Format(format!("truncated snapshot at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn c(&mut self) -> Result<C64> {
        Ok(C64::new(self.f64()?, self.f64()?))
    }

    fn vec(&mut self, n: usize) -> Result<Vec<C64>> {
        if n.saturating_mul(16) > self.buf.len() - self.pos {
            return Err(GphError::Format(format!(
                "truncated snapshot: need {n} values"
            )));
        }
        (0..n).map(|_| self.c()).collect()
    }
}

pub fn decode_marginal(buf: &[u8]) -> Result<DensityMatrix> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(GphError::Format("bad magic".into()));
    }
    let (d, n, k, tag) = (r.u32()?, r.u32()?, r.u32()?, r.u32()?);
    let l = r.f64()?;
    let grid = GridSpec::new(d, n, l)?;
    if k == 0 {
        return Err(GphError::Format("level 0 snapshot".into()));
    }
    let npts = grid.points();
    let m = match tag as u32 {
        TAG_DENSE => {
            let len = npts
                .checked_pow(2 * k as u32)
                .ok_or_else(|| GphError::Format("dense size overflows".into()))?;
            DensityMatrix::from_dense(k, grid, r.vec(len)?)
        }
        TAG_SEPARABLE => {
            let count = r.u32()?;
            let mut terms = Vec::with_capacity(count.min(1 << 16));
            for _ in 0..count {
                let coef = r.c()?;
                let f = (0..k).map(|_| r.vec(npts)).collect::<Result<_>>()?;
                let g = (0..k).map(|_| r.vec(npts)).collect::<Result<_>>()?;
                terms.push(SepTerm { coef, f, g });
            }
            DensityMatrix::separable(k, grid, terms, false, false)?
        }
        TAG_REDUCED => {
            let rank = r.u32()?;
            let tau = r.f64()?;
            let modes = r.vec(rank * npts)?;
            let basis = Arc::new(ReducedBasis::new(grid, rank, modes)?);
            let core = match r.u32()? {
                0 => CoreData::Full(r.vec(rank.pow(2 * k as u32))?),
                1 => {
                    let count = r.u32()?;
                    let mut terms = Vec::with_capacity(count.min(1 << 16));
                    for _ in 0..count {
                        let c = r.c()?;
                        terms.push((
                            c,
                            (0..k).map(|_| r.vec(rank * rank)).collect::<Result<_>>()?,
                        ));
                    }
                    CoreData::Kron(KronSum { r: rank, k, terms })
                }
                other => return Err(GphError::Format(format!("unknown core kind {other}"))),
            };
            DensityMatrix::tucker(k, TuckerForm { basis, tau, core }, false, false)
        }
        other => {
            return Err(GphError::Format(format!(
                "unknown representation tag {other}"
            )))
        }
    };
    if r.pos != buf.len() {
        return Err(GphError::Format(format!(
            "{} trailing bytes",
            buf.len() - r.pos
        )));
    }
    Ok(m)
}

fn io_err(path: &Path, e: std::io::Error) -> GphError {
    GphError::Io(std::io::Error::new(
        e.kind(),
        format!("{}: {e}", path.display()),
    ))
}

pub fn write_marginal(path: &Path, m: &DensityMatrix) -> Result<()> {
    fs::write(path, encode_marginal(m)?).map_err(|e| io_err(path, e))
}

pub fn read_marginal(path: &Path) -> Result<DensityMatrix> {
    let buf = fs::read(path).map_err(|e| io_err(path, e))?;
    decode_marginal(&buf)
}

/// Git-style object hash: sha256 of "blob <len>\0" followed by the content.
pub fn content_hash(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// Hash of the concatenated GPH1 encodings of every level.
pub fn state_hash(state: &HierarchyState) -> Result<String> {
    let mut all = Vec::new();
    for m in &state.marginals {
        all.extend(encode_marginal(m)?);
    }
    Ok(content_hash(&all))
}

/// Deterministic float text: shortest round-trip scientific form, empty for missing values.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:e}")
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(fmt_f64).unwrap_or_default()
}

pub fn series_columns(depth: usize) -> Vec<String> {
    let mut cols = vec!["t".to_string()];
    cols.extend((1..=depth).map(|k| format!("trace_{k}")));
    cols.extend((1..=depth).map(|k| format!("h_norm_{k}")));
    cols.extend(["norm_xi1", "norm_xi2"].map(String::from));
    cols.extend((1..depth).map(|k| format!("admissibility_{k}")));
    cols.extend(["hermiticity", "b_hat_norm", "b_hat_trace"].map(String::from));
    cols
}

fn series_row(r: &StepRecord, depth: usize) -> Vec<String> {
    let mut row = vec![fmt_f64(r.t)];
    row.extend((0..depth).map(|i| fmt_opt(r.traces.get(i).copied())));
    row.extend((0..depth).map(|i| fmt_opt(r.h_norms.as_ref().and_then(|h| h.get(i).copied()))));
    row.push(fmt_opt(r.norm_xi1));
    row.push(fmt_opt(r.norm_xi2));
    row.extend((0..depth.saturating_sub(1)).map(|i| fmt_opt(r.admissibility.get(i).copied())));
    row.push(fmt_f64(r.hermiticity));
    row.push(fmt_f64(r.b_hat_norm));
    row.push(fmt_f64(r.b_hat_trace));
    row
}

pub fn series_csv(traj: &Trajectory) -> String {
    let depth = traj.final_state.depth();
    let rows: Vec<Vec<String>> = traj.records.iter().map(|r| series_row(r, depth)).collect();
    to_csv(&series_columns(depth), &rows)
}

pub fn to_csv(columns: &[String], rows: &[Vec<String>]) -> String {
    let mut s = columns.join(",");
    s.push('\n');
    for r in rows {
        let _ = writeln!(s, "{}", r.join(","));
    }
    s
}

/// Rows as a JSON array of objects keyed by column.
pub fn to_json(columns: &[String], rows: &[Vec<String>]) -> Result<String> {
    let objs: Vec<serde_json::Map<String, serde_json::Value>> = rows
        .iter()
        .map(|r| {
            columns
                .iter()
                .zip(r)
                .map(|(c, v)| {
                    let val = v
                        .parse::<f64>()
                        .ok()
                        .and_then(serde_json::Number::from_f64)
                        .map(serde_json::Value::Number)
                        .unwrap_or_else(|| {
                            if v.is_empty() {
                                serde_json::Value::Null
                            } else {
                                serde_json::Value::String(v.clone())
                            }
                        });
                    (c.clone(), val)
                })
                .collect()
        })
        .collect();
    serde_json::to_string_pretty(&objs).map_err(|e| GphError::Format(e.to_string()))
}

/// Parses CSV text written by `to_csv`.
pub fn parse_csv(text: &str) -> Result<(Vec<String>, Vec<Vec<String>>)> {
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| GphError::Format("empty table".into()))?;
    let cols: Vec<String> = header.split(',').map(String::from).collect();
    let rows = lines
        .filter(|l| !l.is_empty())
        .enumerate()
        .map(|(i, l)| {
            let r: Vec<String> = l.split(',').map(String::from).collect();
            if r.len() != cols.len() {
                return Err(GphError::Format(format!(
                    "row {} has {} fields, expected {}",
                    i + 2,
                    r.len(),
                    cols.len()
                )));
            }
            Ok(r)
        })
        .collect::<Result<_>>()?;
    Ok((cols, rows))
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| io_err(path, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| GphError::Format(e.to_string()))?;
    write_text(path, &(text + "\n"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::state::{from_factorized, Closure, Model, ReprKind, WaveFunction};
    use proptest::prelude::*;

    fn phi(g: &GridSpec) -> WaveFunction {
        WaveFunction::gaussian(g, 1.0, 0.7, 0.2).unwrap()
    }

    fn bitwise(a: &[C64], b: &[C64]) -> bool {
        a.len() == b.len()
            && a.iter()
                .zip(b)
                .all(|(x, y)| x.re.to_bits() == y.re.to_bits() && x.im.to_bits() == y.im.to_bits())
    }

    #[test]
    fn header_layout() {
        let g = GridSpec::new(1, 8, 6.0).unwrap();
        let m = from_factorized(&phi(&g), 1, ReprKind::Dense).unwrap();
        let b = encode_marginal(&m).unwrap();
        assert_eq!(&b[..4], b"GPH1");
        assert_eq!(&b[4..8], &1u32.to_le_bytes());
        assert_eq!(&b[8..12], &8u32.to_le_bytes());
        assert_eq!(&b[12..16], &1u32.to_le_bytes());
        assert_eq!(&b[16..20], &0u32.to_le_bytes());
        assert_eq!(&b[20..28], &6.0f64.to_le_bytes());
        assert_eq!(b.len(), 28 + 16 * 64);
        let Repr::Dense(d) = &m.repr else {
            unreachable!()
        };
        assert_eq!(&b[28..36], &d[0].re.to_le_bytes());
    }

    #[test]
    fn round_trips_are_bitwise() {
        let g = GridSpec::new(1, 8, 6.0).unwrap();
        for k in 1..=2 {
            let dense = from_factorized(&phi(&g), k, ReprKind::Dense).unwrap();
            let back = decode_marginal(&encode_marginal(&dense).unwrap()).unwrap();
            assert!(bitwise(
                &back.to_dense().unwrap(),
                &dense.to_dense().unwrap()
            ));
            let sep = from_factorized(&phi(&g), k, ReprKind::Separable).unwrap();
            let bytes = encode_marginal(&sep).unwrap();
            assert_eq!(
                encode_marginal(&decode_marginal(&bytes).unwrap()).unwrap(),
                bytes
            );
        }
        let w = 1.0 / g.cell().sqrt();
        let modes = (0..16)
            .map(|i| {
                if i == 0 || i == 9 {
                    C64::new(w, 0.0)
                } else {
                    C64::new(0.0, 0.0)
                }
            })
            .collect();
        let basis = Arc::new(ReducedBasis::new(g, 2, modes).unwrap());
        let core = CoreData::Full((0..16).map(|i| C64::new(0.1 * i as f64, 1.0)).collect());
        let tk = DensityMatrix::tucker(
            2,
            TuckerForm {
                basis: basis.clone(),
                tau: 0.25,
                core,
            },
            false,
            false,
        );
        let bytes = encode_marginal(&tk).unwrap();
        assert_eq!(&bytes[16..20], &2u32.to_le_bytes());
        assert_eq!(
            encode_marginal(&decode_marginal(&bytes).unwrap()).unwrap(),
            bytes
        );
        let ks = KronSum {
            r: 2,
            k: 2,
            terms: vec![(
                C64::new(0.5, 0.1),
                vec![vec![C64::new(1.0, 0.0); 4], vec![C64::new(0.0, 2.0); 4]],
            )],
        };
        let tk = DensityMatrix::tucker(
            2,
            TuckerForm {
                basis,
                tau: 0.0,
                core: CoreData::Kron(ks),
            },
            false,
            false,
        );
        let bytes = encode_marginal(&tk).unwrap();
        assert_eq!(
            encode_marginal(&decode_marginal(&bytes).unwrap()).unwrap(),
            bytes
        );
    }

    #[test]
    fn malformed_input_is_rejected() {
        let g = GridSpec::new(1, 8, 6.0).unwrap();
        let b = encode_marginal(&from_factorized(&phi(&g), 1, ReprKind::Dense).unwrap()).unwrap();
        assert!(matches!(
            decode_marginal(&b[..b.len() - 1]),
            Err(GphError::Format(_))
        ));
        let mut bad = b.clone();
        bad[0] = b'X';
        assert!(matches!(decode_marginal(&bad), Err(GphError::Format(_))));
        let mut bad = b.clone();
        bad[16] = 9;
        assert!(matches!(decode_marginal(&bad), Err(GphError::Format(_))));
        let mut long = b;
        long.push(0);
        assert!(decode_marginal(&long).is_err());
        assert!(decode_marginal(b"GPH1").is_err());
    }

    #[test]
    fn hashes_are_content_addressed() {
        // git's sha256 object id of an empty blob
        assert_eq!(
            content_hash(b""),
            "473a0f4c3be8a93681a267e3b1e9a7dcda1185436fe141f7749120a303721813"
        );
        let g = GridSpec::new(1, 8, 6.0).unwrap();
        let s = crate::state::HierarchyState::factorized(
            &phi(&g),
            2,
            Model::new(2, 1.0, 1).unwrap(),
            Closure::Zero,
            ReprKind::Dense,
        )
        .unwrap();
        let h1 = state_hash(&s).unwrap();
        assert_eq!(h1, state_hash(&s.clone()).unwrap());
        let s2 = crate::state::HierarchyState::factorized(
            &WaveFunction::gaussian(&g, 0.9, 0.7, 0.2).unwrap(),
            2,
            s.model,
            Closure::Zero,
            ReprKind::Dense,
        )
        .unwrap();
        assert_ne!(h1, state_hash(&s2).unwrap());
    }

    #[test]
    fn csv_and_json_tables() {
        let cols: Vec<String> = ["a", "b"].map(String::from).to_vec();
        let rows = vec![
            vec![fmt_f64(0.1), String::new()],
            vec![fmt_f64(1e-300), fmt_f64(-2.5)],
        ];
        let text = to_csv(&cols, &rows);
        assert_eq!(text, "a,b\n1e-1,\n1e-300,-2.5e0\n");
        assert_eq!(parse_csv(&text).unwrap(), (cols.clone(), rows.clone()));
        let js: serde_json::Value = serde_json::from_str(&to_json(&cols, &rows).unwrap()).unwrap();
        assert_eq!(js[0]["a"], 0.1);
        assert!(js[0]["b"].is_null());
        assert!(parse_csv("a,b\n1\n").is_err());
        assert_eq!(series_columns(2).len(), 1 + 2 + 2 + 2 + 1 + 3);
    }

    proptest! {
        #[test]
        fn float_text_round_trips(v in proptest::num::f64::NORMAL | proptest::num::f64::SUBNORMAL | proptest::num::f64::ZERO) {
            prop_assert_eq!(fmt_f64(v).parse::<f64>().unwrap().to_bits(), v.to_bits());
        }
    }
}
