//! File writers: legacy ASCII VTK snapshots, receiver CSV series and the run
//! log.

use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::dg::{Discretization, Solution};
use crate::geometry::{LevelSet, PhaseSign, Point};
use crate::{Error, Result};

/// Elements of one level to include in a snapshot.
pub struct SnapshotPart<'a> {
    pub disc: &'a Discretization,
    pub sol: &'a Solution,
    /// Per element; `None` includes all.
    pub include: Option<Vec<bool>>,
    pub level: usize,
}

/// Sampled field: duplicated points per element cell and quads between them.
#[derive(Clone, Debug, Default)]
pub struct SampledField {
    pub points: Vec<Point>,
    /// `(v1, v2, s11, s22, s12)` per point.
    pub values: Vec<[f64; 5]>,
    pub quads: Vec<[usize; 4]>,
    pub quad_level: Vec<usize>,
    pub quad_phase: Vec<PhaseSign>,
}

/// Samples every included element on a `(p+2)²` lattice over each of its
/// cells, keeping sub-quads whose centers lie in the element's phase.
pub fn sample_fields(ls: &LevelSet, parts: &[SnapshotPart<'_>]) -> SampledField {
    let mut out = SampledField::default();
    for part in parts {
        let disc = part.disc;
        let ns = disc.degree + 2;
        for (e, el) in disc.mesh.elements.iter().enumerate() {
            if part.include.as_ref().is_some_and(|inc| !inc[e]) {
                continue;
            }
            let mat = disc.material_of(e);
            for c in el.cells() {
                let cell = disc.mesh.grid.cell(c);
                let at = |i: usize, j: usize| {
                    let s = [i as f64 / (ns - 1) as f64, j as f64 / (ns - 1) as f64];
                    [
                        cell.lo[0] + s[0] * (cell.hi[0] - cell.lo[0]),
                        cell.lo[1] + s[1] * (cell.hi[1] - cell.lo[1]),
                    ]
                };
                let mut kept = Vec::new();
                for j in 0..ns - 1 {
                    for i in 0..ns - 1 {
                        let (a, b) = (at(i, j), at(i + 1, j + 1));
                        let mid = [0.5 * (a[0] + b[0]), 0.5 * (a[1] + b[1])];
                        if el.phase.contains(ls.value(mid)) {
                            kept.push([i, j]);
                        }
                    }
                }
                if kept.is_empty() {
                    continue;
                }
                let base = out.points.len();
                for j in 0..ns {
                    for i in 0..ns {
                        let x = at(i, j);
                        let u = disc.evaluate(part.sol, e, x);
                        let s = mat.stress([u[2], u[3], u[4]]);
                        out.points.push(x);
                        out.values.push([u[0] / mat.rho, u[1] / mat.rho, s[0], s[1], s[2]]);
                    }
                }
                for [i, j] in kept {
                    let id = |i: usize, j: usize| base + j * ns + i;
                    out.quads.push([id(i, j), id(i + 1, j), id(i + 1, j + 1), id(i, j + 1)]);
                    out.quad_level.push(part.level);
                    out.quad_phase.push(el.phase);
                }
            }
        }
    }
    out
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path).map(BufWriter::new).map_err(|e| Error::io(path, e))
}

/// Legacy ASCII VTK unstructured grid with point data
/// `v1, v2, s11, s22, s12` and cell data `level, phase`.
pub fn write_vtk(path: &Path, title: &str, field: &SampledField) -> Result<()> {
    let mut s = String::new();
    let title: String = title.chars().filter(|c| *c != '\n').take(255).collect();
    let _ = writeln!(
        s,
        "# vtk DataFile Version 3.0\n{title}\nASCII\nDATASET UNSTRUCTURED_GRID"
    );
    let _ = writeln!(s, "POINTS {} double", field.points.len());
    for p in &field.points {
        let _ = writeln!(s, "{:e} {:e} 0", p[0], p[1]);
    }
    let nq = field.quads.len();
    let _ = writeln!(s, "CELLS {nq} {}", 5 * nq);
    for q in &field.quads {
        let _ = writeln!(s, "4 {} {} {} {}", q[0], q[1], q[2], q[3]);
    }
    let _ = writeln!(s, "CELL_TYPES {nq}");
    for _ in 0..nq {
        s.push_str("9\n");
    }
    let _ = writeln!(s, "CELL_DATA {nq}\nSCALARS level int 1\nLOOKUP_TABLE default");
    for l in &field.quad_level {
        let _ = writeln!(s, "{l}");
    }
    s.push_str("SCALARS phase int 1\nLOOKUP_TABLE default\n");
    for p in &field.quad_phase {
        s.push_str(if *p == PhaseSign::Negative { "0\n" } else { "1\n" });
    }
    let _ = writeln!(s, "POINT_DATA {}", field.points.len());
    for (k, name) in ["v1", "v2", "s11", "s22", "s12"].iter().enumerate() {
        let _ = writeln!(s, "SCALARS {name} double 1\nLOOKUP_TABLE default");
        for v in &field.values {
            let _ = writeln!(s, "{:e}", v[k]);
        }
    }
    let mut w = create(path)?;
    w.write_all(s.as_bytes())
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(path, e))
}

pub const RECEIVER_HEADER: &str = "t,v1,v2";

/// Receiver series as CSV rows `t,v1,v2`.
pub fn write_receiver_csv(path: &Path, samples: &[[f64; 3]]) -> Result<()> {
    let mut s = String::with_capacity(64 * (samples.len() + 1));
    s.push_str(RECEIVER_HEADER);
    s.push('\n');
    for r in samples {
        let _ = writeln!(s, "{:e},{:e},{:e}", r[0], r[1], r[2]);
    }
    let mut w = create(path)?;
    w.write_all(s.as_bytes())
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(path, e))
}

/// Reads back a receiver CSV written by [`write_receiver_csv`].
pub fn read_receiver_csv(path: &Path) -> Result<Vec<[f64; 3]>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    if lines.next() != Some(RECEIVER_HEADER) {
        return Err(Error::Config(format!("{}: unexpected receiver header", path.display())));
    }
    lines
        .map(|l| {
            let v: Vec<f64> = l
                .split(',')
                .map(str::parse)
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::Config(format!("{}: bad receiver row '{l}': {e}", path.display())))?;
            match v.as_slice() {
                [t, a, b] => Ok([*t, *a, *b]),
                _ => Err(Error::Config(format!("{}: bad receiver row '{l}'", path.display()))),
            }
        })
        .collect()
}

/// Writes `text` to `path`.
pub fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}
