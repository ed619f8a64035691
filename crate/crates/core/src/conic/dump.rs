//! Text dump in the Conic Benchmark Format (CBF, version 3) for
//! cross-checking programs against external solvers.
//!
//! Sections are written in the order OBJSENSE, VAR, CON, PSDCON, OBJACOORD,
//! OBJBCOORD, ACOORD, BCOORD, HCOORD, DCOORD. Linear and second-order blocks
//! become `L=`, `L+` and `Q` cones over the affine rows `A x + b`; PSD blocks
//! become `PSDCON` entries with lower-triangle coordinates.

use std::fmt::Write;

use super::program::{ConicProgram, Constraint, Sense};

pub fn to_cbf(p: &ConicProgram) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "VER\n3\n");
    let sense = match p.objective().sense {
        Sense::Minimize => "MIN",
        Sense::Maximize => "MAX",
    };
    let _ = writeln!(out, "OBJSENSE\n{sense}\n");
    let _ = writeln!(out, "VAR\n{} 1\nF {}\n", p.num_vars(), p.num_vars());

    let scalar_blocks: Vec<&Constraint> = p
        .constraints()
        .iter()
        .filter(|c| !matches!(c, Constraint::Psd(_)))
        .collect();
    let psd_blocks: Vec<&Constraint> = p
        .constraints()
        .iter()
        .filter(|c| matches!(c, Constraint::Psd(_)))
        .collect();

    let rows: usize = scalar_blocks.iter().map(|c| c.rows()).sum();
    if !scalar_blocks.is_empty() {
        let _ = writeln!(out, "CON\n{rows} {}", scalar_blocks.len());
        for c in &scalar_blocks {
            let tag = match c {
                Constraint::Zero(_) => "L=",
                Constraint::Nonneg(_) => "L+",
                Constraint::SecondOrder(_) => "Q",
                Constraint::Psd(_) => unreachable!(),
            };
            let _ = writeln!(out, "{tag} {}", c.rows());
        }
        out.push('\n');
    }
    if !psd_blocks.is_empty() {
        let _ = writeln!(out, "PSDCON\n{}", psd_blocks.len());
        for c in &psd_blocks {
            if let Constraint::Psd(b) = c {
                let _ = writeln!(out, "{}", b.dim);
            }
        }
        out.push('\n');
    }

    let obj = &p.objective().expr;
    let _ = writeln!(out, "OBJACOORD\n{}", obj.terms.len());
    for (v, a) in &obj.terms {
        let _ = writeln!(out, "{} {a:e}", v.index());
    }
    let _ = writeln!(out, "\nOBJBCOORD\n{:e}\n", obj.constant);

    let mut acoord = Vec::new();
    let mut bcoord = Vec::new();
    let mut row = 0;
    for c in &scalar_blocks {
        if let Constraint::Zero(es) | Constraint::Nonneg(es) | Constraint::SecondOrder(es) = c {
            for e in es {
                for (v, a) in &e.terms {
                    acoord.push(format!("{row} {} {a:e}", v.index()));
                }
                if e.constant != 0.0 {
                    bcoord.push(format!("{row} {:e}", e.constant));
                }
                row += 1;
            }
        }
    }
    let _ = writeln!(out, "ACOORD\n{}", acoord.len());
    for l in &acoord {
        let _ = writeln!(out, "{l}");
    }
    let _ = writeln!(out, "\nBCOORD\n{}", bcoord.len());
    for l in &bcoord {
        let _ = writeln!(out, "{l}");
    }

    if !psd_blocks.is_empty() {
        let mut hcoord = Vec::new();
        let mut dcoord = Vec::new();
        for (k, c) in psd_blocks.iter().enumerate() {
            if let Constraint::Psd(b) = c {
                for i in 0..b.dim {
                    for j in 0..=i {
                        let e = b.get(j, i);
                        for (v, a) in &e.terms {
                            hcoord.push(format!("{k} {} {i} {j} {a:e}", v.index()));
                        }
                        if e.constant != 0.0 {
                            dcoord.push(format!("{k} {i} {j} {:e}", e.constant));
                        }
                    }
                }
            }
        }
        let _ = writeln!(out, "\nHCOORD\n{}", hcoord.len());
        for l in &hcoord {
            let _ = writeln!(out, "{l}");
        }
        let _ = writeln!(out, "\nDCOORD\n{}", dcoord.len());
        for l in &dcoord {
            let _ = writeln!(out, "{l}");
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conic::{LinExpr, PsdBlock};

    #[test]
    fn sections_in_documented_order() {
        let mut p = ConicProgram::new();
        let x = p.add_scalar("x");
        p.minimize(x.expr());
        p.nonneg(x.expr() + 1.0);
        let mut blk = PsdBlock::new(2);
        blk.set(0, 0, LinExpr::constant(1.0));
        blk.set(0, 1, x.expr());
        blk.set(1, 1, LinExpr::constant(1.0));
        p.psd(blk);
        let s = to_cbf(&p);
        let order = ["OBJSENSE", "VAR", "CON", "PSDCON", "OBJACOORD", "ACOORD", "BCOORD", "HCOORD", "DCOORD"];
        let pos: Vec<usize> = order.iter().map(|k| s.find(&format!("\n{k}\n")).unwrap()).collect();
        assert!(pos.windows(2).all(|w| w[0] < w[1]), "{s}");
        assert!(s.contains("L+ 1"));
        assert!(s.contains("0 0 1 0 1e0"));
    }
}
