//! Quadrature rules: Gauss-Legendre panels with a cumulative (collocation)
//! matrix, Gauss-Kronrod 7/15 and Gauss-Hermite.

use std::f64::consts::PI;

use crate::error::{Error, Result};
use std::sync::OnceLock;

/// Gauss-Legendre rule mapped to [0, 1].
///
/// `cumulative[i][j]` integrates the j-th Lagrange basis polynomial from 0 to
/// `nodes[i]`, so `sum_j cumulative[i][j] * f(nodes[j])` approximates the
/// running integral of `f` at each node.
#[derive(Clone, Debug)]
pub struct GaussRule {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
    pub cumulative: Vec<Vec<f64>>,
}

impl GaussRule {
    pub fn new(n: usize) -> Self {
        let (x, w) = gauss_legendre(n);
        let nodes: Vec<f64> = x.iter().map(|t| 0.5 * (t + 1.0)).collect();
        let weights: Vec<f64> = w.iter().map(|v| 0.5 * v).collect();
        let lagrange = |j: usize, s: f64| -> f64 {
            let mut p = 1.0;
            for (k, &tk) in nodes.iter().enumerate() {
                if k != j {
                    p *= (s - tk) / (nodes[j] - tk);
                }
            }
            p
        };
        let cumulative = nodes
            .iter()
            .map(|&ti| {
                (0..n)
                    .map(|j| {
                        ti * nodes
                            .iter()
                            .zip(&weights)
                            .map(|(&tk, &wk)| wk * lagrange(j, ti * tk))
                            .sum::<f64>()
                    })
                    .collect()
            })
            .collect();
        GaussRule {
            nodes,
            weights,
            cumulative,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Integral of `f` over [a, b].
    pub fn integrate(&self, a: f64, b: f64, f: impl Fn(f64) -> f64) -> f64 {
        let h = b - a;
        h * self
            .nodes
            .iter()
            .zip(&self.weights)
            .map(|(&t, &w)| w * f(a + h * t))
            .sum::<f64>()
    }
}

/// The shared four-point rule used by the kernel sweeps.
pub fn rule4() -> &'static GaussRule {
    static RULE: OnceLock<GaussRule> = OnceLock::new();
    RULE.get_or_init(|| GaussRule::new(4))
}

pub fn rule8() -> &'static GaussRule {
    static RULE: OnceLock<GaussRule> = OnceLock::new();
    RULE.get_or_init(|| GaussRule::new(8))
}

/// Gauss-Legendre nodes and weights on [-1, 1], ascending.
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(n >= 1);
    let mut x = vec![0.0; n];
    let mut w = vec![0.0; n];
    let m = n.div_ceil(2);
    for i in 0..m {
        let mut z = (PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut pp = 0.0;
        for _ in 0..100 {
            let (mut p1, mut p2) = (1.0, 0.0);
            for j in 1..=n {
                let p3 = p2;
                p2 = p1;
                p1 = ((2 * j - 1) as f64 * z * p2 - (j - 1) as f64 * p3) / j as f64;
            }
            pp = n as f64 * (z * p1 - p2) / (z * z - 1.0);
            let dz = p1 / pp;
            z -= dz;
            if dz.abs() < 1e-16 {
                break;
            }
        }
        x[i] = -z;
        x[n - 1 - i] = z;
        w[i] = 2.0 / ((1.0 - z * z) * pp * pp);
        w[n - 1 - i] = w[i];
    }
    (x, w)
}

/// Gauss-Hermite nodes and weights for the weight `exp(-x^2)`.
pub fn gauss_hermite(n: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(n >= 1);
    let pim4 = PI.powf(-0.25);
    let mut x = vec![0.0; n];
    let mut w = vec![0.0; n];
    let m = n.div_ceil(2);
    let nf = n as f64;
    let mut z = 0.0;
    for i in 0..m {
        z = match i {
            0 => (2.0 * nf + 1.0).sqrt() - 1.85575 * (2.0 * nf + 1.0).powf(-1.0 / 6.0),
            1 => z - 1.14 * nf.powf(0.426) / z,
            2 => 1.86 * z - 0.86 * x[0],
            3 => 1.91 * z - 0.91 * x[1],
            _ => 2.0 * z - x[i - 2],
        };
        let mut pp = 0.0;
        for _ in 0..200 {
            let mut p1 = pim4;
            let mut p2 = 0.0;
            for j in 1..=n {
                let p3 = p2;
                p2 = p1;
                let jf = j as f64;
                p1 = z * (2.0 / jf).sqrt() * p2 - ((jf - 1.0) / jf).sqrt() * p3;
            }
            pp = (2.0 * nf).sqrt() * p2;
            let dz = p1 / pp;
            z -= dz;
            if dz.abs() < 1e-15 * z.abs().max(1.0) {
                break;
            }
        }
        x[i] = z;
        x[n - 1 - i] = -z;
        w[i] = 2.0 / (pp * pp);
        w[n - 1 - i] = w[i];
    }
    x.reverse();
    w.reverse();
    (x, w)
}

/// Expectation of `f(X)` for `X ~ N(mean, var)` by Gauss-Hermite.
pub fn normal_expectation(mean: f64, var: f64, n: usize, f: impl Fn(f64) -> f64) -> f64 {
    if var <= 0.0 {
        return f(mean);
    }
    let (x, w) = gauss_hermite(n);
    let s = (2.0 * var).sqrt();
    x.iter()
        .zip(&w)
        .map(|(&xi, &wi)| wi * f(mean + s * xi))
        .sum::<f64>()
        / PI.sqrt()
}

const XGK: [f64; 8] = [
    0.991_455_371_120_812_6,
    0.949_107_912_342_758_5,
    0.864_864_423_359_769_1,
    0.741_531_185_599_394_4,
    0.586_087_235_467_691_1,
    0.405_845_151_377_397_2,
    0.207_784_955_007_898_5,
    0.0,
];
const WGK: [f64; 8] = [
    0.022_935_322_010_529_22,
    0.063_092_092_629_978_55,
    0.104_790_010_322_250_2,
    0.140_653_259_715_525_9,
    0.169_004_726_639_267_9,
    0.190_350_578_064_785_4,
    0.204_432_940_075_298_9,
    0.209_482_141_084_727_8,
];
const WG: [f64; 4] = [
    0.129_484_966_168_869_7,
    0.279_705_391_489_276_7,
    0.381_830_050_505_118_9,
    0.417_959_183_673_469_4,
];

/// The 15 Kronrod abscissae on [a, b].
pub fn gk15_nodes(a: f64, b: f64) -> [f64; 15] {
    let c = 0.5 * (a + b);
    let h = 0.5 * (b - a);
    let mut out = [0.0; 15];
    for i in 0..7 {
        out[i] = c - h * XGK[i];
        out[14 - i] = c + h * XGK[i];
    }
    out[7] = c;
    out
}

/// Kronrod estimate and error estimate for values at [`gk15_nodes`].
///
/// The error is |K − G| rescaled as in QUADPACK's qk15.
pub fn gk15_combine(a: f64, b: f64, f: &[f64]) -> (f64, f64) {
    let h = 0.5 * (b - a);
    let mut k = WGK[7] * f[7];
    let mut g = WG[3] * f[7];
    let mut kabs = WGK[7] * f[7].abs();
    for i in 0..7 {
        let pair = f[i] + f[14 - i];
        k += WGK[i] * pair;
        kabs += WGK[i] * (f[i].abs() + f[14 - i].abs());
        if i % 2 == 1 {
            g += WG[i / 2] * pair;
        }
    }
    let mean = 0.5 * k;
    let mut asc = WGK[7] * (f[7] - mean).abs();
    for i in 0..7 {
        asc += WGK[i] * ((f[i] - mean).abs() + (f[14 - i] - mean).abs());
    }
    let (asc, kabs) = (asc * h.abs(), kabs * h.abs());
    let mut err = (h * (k - g)).abs();
    if asc != 0.0 && err != 0.0 {
        err = asc * (200.0 * err / asc).powf(1.5).min(1.0);
    }
    err = err.max(50.0 * f64::EPSILON * kabs);
    (h * k, err)
}

/// Globally adaptive Gauss-Kronrod integration of a cheap scalar function.
pub fn adaptive_gk(
    f: impl Fn(f64) -> f64,
    a: f64,
    b: f64,
    abs_tol: f64,
    rel_tol: f64,
) -> (f64, f64) {
    let eval = |lo: f64, hi: f64| {
        let xs = gk15_nodes(lo, hi);
        let ys: Vec<f64> = xs.iter().map(|&x| f(x)).collect();
        let (v, e) = gk15_combine(lo, hi, &ys);
        (lo, hi, v, e)
    };
    let mut panels = vec![eval(a, b)];
    for _ in 0..2000 {
        let total: f64 = panels.iter().map(|p| p.2).sum();
        let err: f64 = panels.iter().map(|p| p.3).sum();
        if err <= abs_tol.max(rel_tol * total.abs()) {
            break;
        }
        let worst = panels
            .iter()
            .enumerate()
            .max_by(|x, y| x.1 .3.total_cmp(&y.1 .3))
            .map(|(i, _)| i)
            .unwrap();
        let (lo, hi, _, _) = panels.swap_remove(worst);
        let mid = 0.5 * (lo + hi);
        panels.push(eval(lo, mid));
        panels.push(eval(mid, hi));
    }
    panels.sort_by(|x, y| x.0.total_cmp(&y.0));
    (
        panels.iter().map(|p| p.2).sum(),
        panels.iter().map(|p| p.3).sum(),
    )
}

/// Result of [`integrate_line`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LineIntegral {
    pub value: f64,
    pub error: f64,
    pub evaluations: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LineOptions {
    pub abs_tol: f64,
    pub rel_tol: f64,
    pub max_panels: usize,
}

impl Default for LineOptions {
    fn default() -> Self {
        LineOptions {
            abs_tol: 1e-12,
            rel_tol: 1e-9,
            max_panels: 4000,
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct Panel {
    lo: f64,
    hi: f64,
    value: f64,
    error: f64,
    /// consecutive bisections that failed to reduce the error
    stalls: u8,
}

/// Bisections without error reduction after which a panel is taken to be
/// at its rounding floor and left alone.
const MAX_STALLS: u8 = 3;

/// Refinement rounds in a row that fail to halve the total error before the
/// integral is returned as noise-limited.
const MAX_PLATEAU: u8 = 3;

/// Adaptive Gauss-Kronrod integral over the real line of an integrand that
/// decays at both ends.
///
/// Starts from four panels of width `scale` around `center`, appends
/// panels of width `scale` at either end until the outermost one
/// contributes less than a tenth of the tolerance and is no larger than its
/// neighbour, and bisects panels whose error exceeds their share of the
/// tolerance; panels at their rounding floor, and the whole integral once
/// refinement stops paying, are kept with their error in the estimate. `batch` receives the abscissae of a whole refinement round in
/// panel order, 15 per panel, and returns the integrand values in the same
/// order.
pub fn integrate_line<F>(
    mut batch: F,
    center: f64,
    scale: f64,
    opts: &LineOptions,
) -> Result<LineIntegral>
where
    F: FnMut(&[f64]) -> Result<Vec<f64>>,
{
    if !(scale > 0.0 && scale.is_finite() && center.is_finite()) {
        return Err(Error::validation(format!(
            "bad quadrature window: center {center}, scale {scale}"
        )));
    }
    let mut evaluations = 0usize;
    let mut eval = |spans: &[(f64, f64)]| -> Result<Vec<Panel>> {
        let xs: Vec<f64> = spans
            .iter()
            .flat_map(|&(lo, hi)| gk15_nodes(lo, hi))
            .collect();
        let ys = batch(&xs)?;
        if ys.len() != xs.len() {
            return Err(Error::numerical(
                "integrand batch returned the wrong number of values",
            ));
        }
        evaluations += xs.len();
        spans
            .iter()
            .enumerate()
            .map(|(i, &(lo, hi))| {
                let f = &ys[15 * i..15 * i + 15];
                if f.iter().any(|v| !v.is_finite()) {
                    return Err(Error::numerical(format!(
                        "non-finite integrand on [{lo}, {hi}]"
                    )));
                }
                let (value, error) = gk15_combine(lo, hi, f);
                Ok(Panel {
                    lo,
                    hi,
                    value,
                    error,
                    stalls: 0,
                })
            })
            .collect()
    };
    let start: Vec<(f64, f64)> = (-2..2)
        .map(|i| (center + i as f64 * scale, center + (i + 1) as f64 * scale))
        .collect();
    let mut panels = eval(&start)?;
    let (mut left_done, mut right_done) = (false, false);
    // running outermost extension panels (value) for the decay test
    let mut left_edge = panels[0].value.abs();
    let mut right_edge = panels[3].value.abs();
    let (mut plateau, mut last_split_err) = (0u8, f64::INFINITY);
    loop {
        let total: f64 = panels.iter().map(|p| p.value).sum();
        let tol = opts.abs_tol.max(opts.rel_tol * total.abs());
        let mut spans = Vec::new();
        let lo = panels[0].lo;
        let hi = panels.last().unwrap().hi;
        if !left_done {
            spans.push((lo - scale, lo));
        }
        if !right_done {
            spans.push((hi, hi + scale));
        }
        let err: f64 = panels.iter().map(|p| p.error).sum();
        let share = tol / panels.len() as f64;
        let split: Vec<usize> = if err > tol {
            (0..panels.len())
                .filter(|&i| panels[i].error > share && panels[i].stalls < MAX_STALLS)
                .collect()
        } else {
            Vec::new()
        };
        if left_done && right_done && !split.is_empty() {
            plateau = if err > 0.5 * last_split_err {
                plateau + 1
            } else {
                0
            };
            last_split_err = err;
        }
        if (spans.is_empty() && split.is_empty()) || plateau >= MAX_PLATEAU {
            return Ok(LineIntegral {
                value: total,
                error: err,
                evaluations,
            });
        }
        if panels.len() + spans.len() + split.len() > opts.max_panels {
            return Err(Error::NotConverged {
                iterations: panels.len(),
                residual: err,
            });
        }
        for &i in &split {
            let p = panels[i];
            let mid = 0.5 * (p.lo + p.hi);
            spans.push((p.lo, mid));
            spans.push((mid, p.hi));
        }
        let fresh = eval(&spans)?;
        let mut k = 0;
        let mut next = Vec::with_capacity(panels.len() + fresh.len());
        if !left_done {
            let p = fresh[k];
            k += 1;
            left_done = p.value.abs() + p.error < 0.1 * tol && p.value.abs() <= left_edge;
            left_edge = p.value.abs();
            next.push(p);
        }
        let right = if !right_done {
            let p = fresh[k];
            k += 1;
            right_done = p.value.abs() + p.error < 0.1 * tol && p.value.abs() <= right_edge;
            right_edge = p.value.abs();
            Some(p)
        } else {
            None
        };
        let mut s = 0;
        for (i, p) in panels.iter().enumerate() {
            if s < split.len() && split[s] == i {
                let (mut a, mut b) = (fresh[k], fresh[k + 1]);
                let stalls = if a.error + b.error > 0.5 * p.error {
                    p.stalls + 1
                } else {
                    0
                };
                a.stalls = stalls;
                b.stalls = stalls;
                next.push(a);
                next.push(b);
                k += 2;
                s += 1;
            } else {
                next.push(*p);
            }
        }
        next.extend(right);
        panels = next;
    }
}
