//! On-disk formats: Q-tables (binary, with the quantizer and action grid
//! they were learned on) and finite MDPs (CSV).
//!
//! Q-table layout, all integers and floats little-endian:
//!
//! ```text
//! "QDQT"  u32 version
//! u32 d   f64 N   u32 k   d×f64 center   d×f64 overflow representative
//! u32 action dim   u32 n_u per axis   (f64 lo, f64 hi) per action axis
//! u64 n_states   u64 n_actions
//! n_states·n_actions × f64 values (row-major), then the same count of u64 visits
//! ```

use std::fmt::Write as _;
use std::fs;
use std::io::{self, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::mdp::FiniteMdp;
use crate::qlearn::QTable;
use crate::quantize::{ActionGrid, StateQuantizer};
use crate::sde::Interval;

pub const QTABLE_MAGIC: &[u8; 4] = b"QDQT";
pub const QTABLE_VERSION: u32 = 1;
/// First line of every CSV this crate writes.
pub const CSV_MAGIC: &str = "# qdiff-csv v1";

/// A Q-table together with the discretization it indexes.
#[derive(Clone, Debug, PartialEq)]
pub struct StoredQTable {
    pub quantizer: StateQuantizer,
    pub grid: ActionGrid,
    pub table: QTable,
}

fn put_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(buf: &mut Vec<u8>, v: u64) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn put_f64(buf: &mut Vec<u8>, v: f64) {
    buf.extend_from_slice(&v.to_le_bytes());
}

pub fn encode_qtable(quantizer: &StateQuantizer, grid: &ActionGrid, table: &QTable) -> Result<Vec<u8>> {
    if table.n_states() != quantizer.n_bins() {
        return Err(Error::invalid(format!(
            "table has {} states but the quantizer has {} bins",
            table.n_states(),
            quantizer.n_bins()
        )));
    }
    if table.n_actions() != grid.len() {
        return Err(Error::invalid(format!(
            "table has {} actions but the grid has {}",
            table.n_actions(),
            grid.len()
        )));
    }
    let n = table.values().len();
    let mut buf = Vec::with_capacity(64 + 16 * n);
    buf.extend_from_slice(QTABLE_MAGIC);
    put_u32(&mut buf, QTABLE_VERSION);
    put_u32(&mut buf, quantizer.dim() as u32);
    put_f64(&mut buf, quantizer.side());
    put_u32(&mut buf, quantizer.bins_per_axis() as u32);
    for &c in quantizer.center() {
        put_f64(&mut buf, c);
    }
    for c in quantizer.representative(quantizer.overflow_index()) {
        put_f64(&mut buf, c);
    }
    put_u32(&mut buf, grid.bounds().len() as u32);
    put_u32(&mut buf, grid.per_axis() as u32);
    for b in grid.bounds() {
        put_f64(&mut buf, b.lo);
        put_f64(&mut buf, b.hi);
    }
    put_u64(&mut buf, table.n_states() as u64);
    put_u64(&mut buf, table.n_actions() as u64);
    for &v in table.values() {
        put_f64(&mut buf, v);
    }
    for &v in table.visits() {
        put_u64(&mut buf, v);
    }
    Ok(buf)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::format(format!(
                "truncated Q-table file: {what} needs {n} bytes at offset {}, {} left",
                self.pos,
                self.bytes.len() - self.pos
            )));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn f64s(&mut self, n: usize, what: &str) -> Result<Vec<f64>> {
        (0..n).map(|_| self.f64(what)).collect()
    }
}

pub fn decode_qtable(bytes: &[u8]) -> Result<StoredQTable> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != QTABLE_MAGIC {
        return Err(Error::format("not a Q-table file (bad magic)"));
    }
    let version = r.u32("version")?;
    if version != QTABLE_VERSION {
        return Err(Error::format(format!(
            "unsupported Q-table version {version}, expected {QTABLE_VERSION}"
        )));
    }
    let dim = r.u32("quantizer dimension")? as usize;
    let side = r.f64("quantizer side")?;
    let k = r.u32("bins per axis")? as usize;
    if dim == 0 || dim > 64 {
        return Err(Error::format(format!("implausible quantizer dimension {dim}")));
    }
    let center = r.f64s(dim, "quantizer center")?;
    let overflow = r.f64s(dim, "overflow representative")?;
    let quantizer = StateQuantizer::with_center(center, side, k, Some(overflow))
        .map_err(|e| Error::format(format!("bad quantizer descriptor: {e}")))?;
    let adim = r.u32("action dimension")? as usize;
    let n_u = r.u32("actions per axis")? as usize;
    if adim == 0 || adim > 64 {
        return Err(Error::format(format!("implausible action dimension {adim}")));
    }
    let mut bounds = Vec::with_capacity(adim);
    for _ in 0..adim {
        let lo = r.f64("action bound")?;
        let hi = r.f64("action bound")?;
        bounds.push(Interval::new(lo, hi));
    }
    let grid = ActionGrid::uniform(&bounds, n_u).map_err(|e| Error::format(format!("bad action grid descriptor: {e}")))?;
    let ns = r.u64("state count")? as usize;
    let na = r.u64("action count")? as usize;
    if ns != quantizer.n_bins() {
        return Err(Error::format(format!(
            "state dimension mismatch: table has {ns} states, quantizer descriptor has {} bins",
            quantizer.n_bins()
        )));
    }
    if na != grid.len() {
        return Err(Error::format(format!(
            "action dimension mismatch: table has {na} actions, grid descriptor has {}",
            grid.len()
        )));
    }
    let n = ns * na;
    let values = r.f64s(n, "Q values")?;
    let visits = (0..n).map(|_| r.u64("visit counts")).collect::<Result<Vec<_>>>()?;
    if r.pos != bytes.len() {
        return Err(Error::format(format!("{} trailing bytes after Q-table", bytes.len() - r.pos)));
    }
    let table = QTable::from_parts(ns, na, values, visits).map_err(|e| Error::format(e.to_string()))?;
    Ok(StoredQTable { quantizer, grid, table })
}

pub fn save_qtable(path: &Path, quantizer: &StateQuantizer, grid: &ActionGrid, table: &QTable) -> Result<()> {
    let bytes = encode_qtable(quantizer, grid, table)?;
    fs::write(path, bytes)?;
    Ok(())
}

pub fn load_qtable(path: &Path) -> Result<StoredQTable> {
    decode_qtable(&fs::read(path)?)
}

/// Loads a table and checks it was learned on `quantizer` and `grid`.
pub fn load_qtable_for(path: &Path, quantizer: &StateQuantizer, grid: &ActionGrid) -> Result<StoredQTable> {
    let stored = load_qtable(path)?;
    check_descriptor(&stored, quantizer, grid)?;
    Ok(stored)
}

fn check_descriptor(stored: &StoredQTable, quantizer: &StateQuantizer, grid: &ActionGrid) -> Result<()> {
    let q = &stored.quantizer;
    let mismatch = |what: &str, file: String, expected: String| {
        Err(Error::format(format!("{what} mismatch: file has {file}, expected {expected}")))
    };
    if q.dim() != quantizer.dim() {
        return mismatch("state dimension d", q.dim().to_string(), quantizer.dim().to_string());
    }
    if q.bins_per_axis() != quantizer.bins_per_axis() {
        return mismatch("bins per axis k", q.bins_per_axis().to_string(), quantizer.bins_per_axis().to_string());
    }
    if q.side() != quantizer.side() {
        return mismatch("cube side N", q.side().to_string(), quantizer.side().to_string());
    }
    if q.center() != quantizer.center() {
        return mismatch("cube center", format!("{:?}", q.center()), format!("{:?}", quantizer.center()));
    }
    let (a, b) = (q.overflow_index(), quantizer.overflow_index());
    if q.representative(a) != quantizer.representative(b) {
        return mismatch(
            "overflow representative",
            format!("{:?}", q.representative(a)),
            format!("{:?}", quantizer.representative(b)),
        );
    }
    if stored.grid.bounds().len() != grid.bounds().len() {
        return mismatch("action dimension", stored.grid.bounds().len().to_string(), grid.bounds().len().to_string());
    }
    if stored.grid.per_axis() != grid.per_axis() {
        return mismatch("actions per axis n_u", stored.grid.per_axis().to_string(), grid.per_axis().to_string());
    }
    if stored.grid.bounds() != grid.bounds() {
        return mismatch("action box", format!("{:?}", stored.grid.bounds()), format!("{:?}", grid.bounds()));
    }
    Ok(())
}

/// Human-readable summary of a stored table.
pub fn inspect_qtable(stored: &StoredQTable) -> String {
    let q = &stored.quantizer;
    let t = &stored.table;
    let mut s = String::new();
    let _ = writeln!(s, "format      QDQT v{QTABLE_VERSION}");
    let _ = writeln!(
        s,
        "quantizer   d={} N={} k={} center={:?} bins={} (+overflow)",
        q.dim(),
        q.side(),
        q.bins_per_axis(),
        q.center(),
        q.interior_bins()
    );
    let _ = writeln!(
        s,
        "actions     n_u={} per axis, {} points, box={:?}",
        stored.grid.per_axis(),
        stored.grid.len(),
        stored.grid.bounds().iter().map(|b| (b.lo, b.hi)).collect::<Vec<_>>()
    );
    let min_visits = t.visits().iter().copied().min().unwrap_or(0);
    let _ = writeln!(
        s,
        "table       {}x{} sup|Q|={:.6e} visits={} min_pair_visits={}",
        t.n_states(),
        t.n_actions(),
        t.sup_norm(),
        t.total_visits(),
        min_visits
    );
    let policy = crate::qlearn::greedy_policy(t);
    let _ = writeln!(s, "greedy      {:?}", policy.actions);
    s
}

/// Round-trip float formatting.
fn fmt_f64(v: f64) -> String {
    format!("{v:?}")
}

/// MDP as CSV: magic line, header `M,n_actions,h`, then one `P` line per
/// (state, action) pair holding the next-state row, then one `C` line per
/// state holding the stage costs of every action.
pub fn write_mdp_csv<W: Write>(mdp: &FiniteMdp, mut w: W) -> io::Result<()> {
    writeln!(w, "{CSV_MAGIC} mdp")?;
    writeln!(w, "M,n_actions,h")?;
    writeln!(w, "{},{},{}", mdp.n_states(), mdp.n_actions(), fmt_f64(mdp.h()))?;
    for s in 0..mdp.n_states() {
        for a in 0..mdp.n_actions() {
            let row: Vec<String> = mdp.transition_row(s, a).iter().map(|&p| fmt_f64(p)).collect();
            writeln!(w, "P,{s},{a},{}", row.join(","))?;
        }
    }
    for s in 0..mdp.n_states() {
        let row: Vec<String> = (0..mdp.n_actions()).map(|a| fmt_f64(mdp.cost(s, a))).collect();
        writeln!(w, "C,{s},{}", row.join(","))?;
    }
    Ok(())
}

pub fn read_mdp_csv(text: &str) -> Result<FiniteMdp> {
    let mut lines = text.lines().enumerate();
    let mut next = |what: &str| {
        lines
            .next()
            .ok_or_else(|| Error::format(format!("MDP CSV ends before {what}")))
    };
    let (_, magic) = next("the magic line")?;
    if !magic.starts_with(CSV_MAGIC) {
        return Err(Error::format("MDP CSV lacks the version line"));
    }
    let (_, header) = next("the header")?;
    if header.trim() != "M,n_actions,h" {
        return Err(Error::format(format!("unexpected MDP CSV header `{header}`")));
    }
    let (_, dims) = next("the dimensions")?;
    let f: Vec<&str> = dims.split(',').collect();
    if f.len() != 3 {
        return Err(Error::format("MDP CSV dimension line needs M,n_actions,h"));
    }
    let parse_usize = |s: &str, what: &str| s.trim().parse::<usize>().map_err(|_| Error::format(format!("bad {what} `{s}`")));
    let parse_f64 = |s: &str, line: usize| s.trim().parse::<f64>().map_err(|_| Error::format(format!("line {}: bad number `{s}`", line + 1)));
    let (ns, na) = (parse_usize(f[0], "M")?, parse_usize(f[1], "n_actions")?);
    let h = parse_f64(f[2], 2)?;
    let mut p = Vec::with_capacity(ns * na * ns);
    for s in 0..ns {
        for a in 0..na {
            let (i, line) = next("a transition row")?;
            let cells: Vec<&str> = line.split(',').collect();
            if cells.len() != 3 + ns || cells[0] != "P" || parse_usize(cells[1], "state")? != s || parse_usize(cells[2], "action")? != a {
                return Err(Error::format(format!("line {}: expected P row for ({s}, {a}) with {ns} entries", i + 1)));
            }
            for c in &cells[3..] {
                p.push(parse_f64(c, i)?);
            }
        }
    }
    let mut c = Vec::with_capacity(ns * na);
    for s in 0..ns {
        let (i, line) = next("a cost row")?;
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != 2 + na || cells[0] != "C" || parse_usize(cells[1], "state")? != s {
            return Err(Error::format(format!("line {}: expected C row for state {s} with {na} entries", i + 1)));
        }
        for v in &cells[2..] {
            c.push(parse_f64(v, i)?);
        }
    }
    FiniteMdp::new(ns, na, h, p, c)
}

pub fn save_mdp_csv(path: &Path, mdp: &FiniteMdp) -> Result<()> {
    let mut buf = Vec::new();
    write_mdp_csv(mdp, &mut buf)?;
    fs::write(path, buf)?;
    Ok(())
}

pub fn load_mdp_csv(path: &Path) -> Result<FiniteMdp> {
    read_mdp_csv(&fs::read_to_string(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quantize::build_action_grid;

    fn sample() -> (StateQuantizer, ActionGrid, QTable) {
        let q = StateQuantizer::with_center(vec![1.0], 2.0, 4, None).unwrap();
        let g = build_action_grid(&[Interval::new(-5.0, 5.0)], 3).unwrap();
        let values: Vec<f64> = (0..15).map(|i| (i as f64 * 0.37).sin()).collect();
        let visits: Vec<u64> = (0..15).collect();
        let t = QTable::from_parts(5, 3, values, visits).unwrap();
        (q, g, t)
    }

    #[test]
    fn roundtrip_is_bitwise() {
        let (q, g, t) = sample();
        let bytes = encode_qtable(&q, &g, &t).unwrap();
        let back = decode_qtable(&bytes).unwrap();
        assert_eq!(back.table, t);
        assert_eq!(back.quantizer, q);
        assert_eq!(back.grid, g);
        assert!(back.table.values().iter().zip(t.values()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn truncated_and_corrupt_files() {
        let (q, g, t) = sample();
        let bytes = encode_qtable(&q, &g, &t).unwrap();
        for cut in [0, 3, 8, 20, bytes.len() - 1] {
            assert!(matches!(decode_qtable(&bytes[..cut]), Err(Error::Format(_))), "cut {cut}");
        }
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_qtable(&bad), Err(Error::Format(_))));
        let mut bad = bytes.clone();
        bad[4] = 9;
        let err = decode_qtable(&bad).unwrap_err().to_string();
        assert!(err.contains("version"));
        let mut long = bytes;
        long.push(0);
        assert!(matches!(decode_qtable(&long), Err(Error::Format(_))));
    }

    #[test]
    fn descriptor_mismatch_names_dimension() {
        let (q, g, t) = sample();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("q.bin");
        save_qtable(&path, &q, &g, &t).unwrap();
        let other_q = StateQuantizer::with_center(vec![1.0], 2.0, 5, None).unwrap();
        let err = load_qtable_for(&path, &other_q, &g).unwrap_err().to_string();
        assert!(err.contains("bins per axis k"), "{err}");
        let q2 = StateQuantizer::new(2, 2.0, 4, None).unwrap();
        let err = load_qtable_for(&path, &q2, &g).unwrap_err().to_string();
        assert!(err.contains("state dimension d"), "{err}");
        let g2 = build_action_grid(&[Interval::new(-5.0, 5.0)], 4).unwrap();
        let err = load_qtable_for(&path, &q, &g2).unwrap_err().to_string();
        assert!(err.contains("n_u"), "{err}");
        assert!(load_qtable_for(&path, &q, &g).is_ok());
    }

    #[test]
    fn mdp_csv_roundtrip() {
        let p = vec![0.25, 0.75, 1.0 / 3.0, 2.0 / 3.0, 1.0, 0.0, 0.1, 0.9];
        let mdp = FiniteMdp::new(2, 2, 0.1, p, vec![0.1, 1e-17, 3.0, 7.0 / 9.0]).unwrap();
        let mut buf = Vec::new();
        write_mdp_csv(&mdp, &mut buf).unwrap();
        let back = read_mdp_csv(std::str::from_utf8(&buf).unwrap()).unwrap();
        assert_eq!(back.transitions(), mdp.transitions());
        assert_eq!(back.costs(), mdp.costs());
        assert_eq!(back.h(), mdp.h());
        let text = String::from_utf8(buf).unwrap();
        let short: String = text.lines().take(4).collect::<Vec<_>>().join("\n");
        assert!(matches!(read_mdp_csv(&short), Err(Error::Format(_))));
    }
}
