//! Number formatting shared by every report.

/// Four decimals, or the shortest string that parses back to `v`.
pub fn value(v: f64, full: bool) -> String {
    if full {
        format!("{v}")
    } else {
        format!("{v:.4}")
    }
}

pub fn estimate(e: f64, full: bool) -> String {
    if full {
        format!("{e:e}")
    } else {
        format!("{e:.1e}")
    }
}

pub fn density(v: f64, full: bool) -> String {
    if full {
        format!("{v}")
    } else {
        format!("{v:.6e}")
    }
}

pub fn abscissa(x: f64, full: bool) -> String {
    if full {
        format!("{x}")
    } else {
        format!("{x:.6}")
    }
}

/// Emitted GTFK, PDE, Abs.Diff and Rel.Diff cells; both differences are
/// recomputed from the emitted prices, and Rel.Diff is relative to PDE.
pub fn table_cells(gtfk: f64, pde: f64, full: bool) -> [String; 4] {
    let (g, p) = (value(gtfk, full), value(pde, full));
    let (gv, pv): (f64, f64) = (g.parse().unwrap(), p.parse().unwrap());
    let abs = (gv - pv).abs();
    let rel = 100.0 * abs / pv;
    [g, p, value(abs, full), format!("{rel:.2}%")]
}
