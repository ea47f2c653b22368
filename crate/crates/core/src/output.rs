//! CSV writers. Floats are written as `{:.16e}` (17 significant digits), so
//! every value round-trips exactly and output is byte-stable.

use std::io::{self, Write};

use crate::kernel::KernelGrid;
use crate::simulate::{GirsanovWeights, PathEnsemble};
use crate::solver::{AffineSolution, SolutionTriplet};

fn num(x: f64) -> String {
    format!("{x:.16e}")
}

/// `t,a,b,c`: `Y(t) = a(t) + b(t) B(t) + c(t) J(t)`.
pub fn write_y<W: Write>(mut w: W, y: &AffineSolution) -> io::Result<()> {
    writeln!(w, "t,a,b,c")?;
    for i in 0..y.grid.len() {
        writeln!(
            w,
            "{},{},{},{}",
            num(y.grid.node(i)),
            num(y.a[i]),
            num(y.b[i]),
            num(y.c[i])
        )?;
    }
    w.flush()
}

/// `t,s,Z` over the upper triangle `t <= s`.
pub fn write_z<W: Write>(mut w: W, z: &KernelGrid) -> io::Result<()> {
    writeln!(w, "t,s,Z")?;
    let g = z.grid();
    for (i, j, v) in z.iter() {
        writeln!(w, "{},{},{}", num(g.node(i)), num(g.node(j)), num(v))?;
    }
    w.flush()
}

/// `t,s,mark,K` over the upper triangle, marks given by their value.
pub fn write_k<W: Write>(mut w: W, k: &[KernelGrid], marks: &[f64]) -> io::Result<()> {
    writeln!(w, "t,s,mark,K")?;
    for (grid, &mark) in k.iter().zip(marks) {
        let g = grid.grid();
        for (i, j, v) in grid.iter() {
            writeln!(
                w,
                "{},{},{},{}",
                num(g.node(i)),
                num(g.node(j)),
                num(mark),
                num(v)
            )?;
        }
    }
    w.flush()
}

/// `i,j,t_i,t_j,psi`.
pub fn write_psi<W: Write>(mut w: W, psi: &KernelGrid) -> io::Result<()> {
    writeln!(w, "i,j,t_i,t_j,psi")?;
    let g = psi.grid();
    for (i, j, v) in psi.iter() {
        writeln!(
            w,
            "{i},{j},{},{},{}",
            num(g.node(i)),
            num(g.node(j)),
            num(v)
        )?;
    }
    w.flush()
}

/// `path,node,t,B,J,M` for the first `limit` paths.
pub fn write_paths<W: Write>(
    mut w: W,
    paths: &PathEnsemble,
    weights: &GirsanovWeights,
    limit: usize,
) -> io::Result<()> {
    writeln!(w, "path,node,t,B,J,M")?;
    let g = paths.grid();
    for p in 0..paths.n_paths().min(limit) {
        let b = paths.brownian_path(p);
        let j = paths.jump_path(p);
        for i in 0..g.len() {
            writeln!(
                w,
                "{p},{i},{},{},{},{}",
                num(g.node(i)),
                num(b[i]),
                num(j[i]),
                num(weights.at(p, i))
            )?;
        }
    }
    w.flush()
}

/// The three solution files as in-memory byte buffers, keyed by file name.
pub fn solution_files(
    t: &SolutionTriplet,
    marks: &[f64],
) -> io::Result<Vec<(&'static str, Vec<u8>)>> {
    let mut y = Vec::new();
    write_y(&mut y, &t.y)?;
    let mut z = Vec::new();
    write_z(&mut z, &t.z)?;
    let mut k = Vec::new();
    write_k(&mut k, &t.k, marks)?;
    Ok(vec![("y.csv", y), ("z.csv", z), ("k.csv", k)])
}
