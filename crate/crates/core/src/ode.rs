//! Bernoulli-Riccati form of the Pinney equation, integrated with the
//! Bogacki-Shampine 3(2) pair and its cubic Hermite dense output.
//!
//! State y = (h, g, ν) with
//!
//! ```text
//! ḣ = 1/h − (k + g)h,   ġ = g² + 2kg − q,   ν̇ = 1/h²
//! ```
//!
//! which is equivalent to ḧ = (k² − k̇ + q)h − 1/h³.

use std::io::Write;

use crate::error::{Error, Result};
use crate::model::Func;

#[derive(Clone)]
pub struct OdeSystemSpec {
    /// Drift k(u) of the Bernoulli equation for h.
    pub kappa_eff: Func,
    /// Forcing q(u) of the Riccati equation for g.
    pub forcing: Func,
    pub u_a: f64,
    pub u_b: f64,
    /// Step endpoints always land on these times.
    pub knots: Vec<f64>,
    pub rel_tol: f64,
    pub abs_tol: f64,
    /// Largest phase increment Δν allowed in one step.
    pub max_phase_step: f64,
}

impl OdeSystemSpec {
    pub fn new(kappa_eff: Func, forcing: Func, u_a: f64, u_b: f64, knots: Vec<f64>) -> Self {
        OdeSystemSpec {
            kappa_eff,
            forcing,
            u_a,
            u_b,
            knots,
            rel_tol: 5e-12,
            abs_tol: 5e-14,
            max_phase_step: 0.5,
        }
    }

    pub fn with_tolerances(mut self, rel_tol: f64, abs_tol: f64) -> Self {
        self.rel_tol = rel_tol;
        self.abs_tol = abs_tol;
        self
    }

    fn rhs(&self, u: f64, y: &[f64; 3]) -> [f64; 3] {
        let k = (self.kappa_eff)(u);
        let q = (self.forcing)(u);
        let (h, g) = (y[0], y[1]);
        [
            1.0 / h - (k + g) * h,
            g * g + 2.0 * k * g - q,
            1.0 / (h * h),
        ]
    }
}

/// (h0, g0) with h0 = ω_a^{-1/2} and ḣ(u_a) = 0.
///
/// For ω_a² ≤ 0 the seed uses |ω_a²|; any positive seed gives a valid
/// Pinney solution.
pub fn initial_conditions(kappa_eff_a: f64, omega_sq_a: f64) -> Result<(f64, f64)> {
    if !(kappa_eff_a.is_finite() && omega_sq_a.is_finite()) {
        return Err(Error::validation("initial frequency data must be finite"));
    }
    let w2 = omega_sq_a.abs();
    let h0 = if w2 > 1e-300 { w2.powf(-0.25) } else { 1.0 };
    Ok((h0, 1.0 / (h0 * h0) - kappa_eff_a))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Node {
    pub u: f64,
    pub y: [f64; 3],
    pub dy: [f64; 3],
}

/// Accepted steps with their Hermite data.
#[derive(Clone, Debug)]
pub struct DenseOutput {
    pub nodes: Vec<Node>,
    /// Scaled local error norm of each accepted step.
    pub errors: Vec<f64>,
    pub rejected: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Quantity {
    H,
    G,
    Nu,
    NuDot,
    NuDdot,
}

/// Interpolated state at one time.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NuPoint {
    pub h: f64,
    pub h_dot: f64,
    pub g: f64,
    pub nu: f64,
    pub nu_dot: f64,
    pub nu_ddot: f64,
}

/// Solved Pinney system on [u_a, u_b].
#[derive(Clone)]
pub struct NuSolution {
    pub dense: DenseOutput,
    kappa_eff: Func,
}

fn hermite(t: f64, dt: f64, y0: f64, f0: f64, y1: f64, f1: f64) -> f64 {
    let t2 = t * t;
    let t3 = t2 * t;
    (2.0 * t3 - 3.0 * t2 + 1.0) * y0
        + (t3 - 2.0 * t2 + t) * dt * f0
        + (3.0 * t2 - 2.0 * t3) * y1
        + (t3 - t2) * dt * f1
}

fn hermite_slope(t: f64, dt: f64, y0: f64, f0: f64, y1: f64, f1: f64) -> f64 {
    let t2 = t * t;
    ((6.0 * t2 - 6.0 * t) * (y0 - y1)) / dt
        + (3.0 * t2 - 4.0 * t + 1.0) * f0
        + (3.0 * t2 - 2.0 * t) * f1
}

impl std::fmt::Debug for NuSolution {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("NuSolution")
            .field("u_a", &self.u_a())
            .field("u_b", &self.u_b())
            .field("steps", &self.steps())
            .finish()
    }
}

impl NuSolution {
    /// Build from externally computed nodes (h, g, ν and their derivatives).
    pub fn from_nodes(nodes: Vec<Node>, kappa_eff: Func) -> Result<Self> {
        if nodes.len() < 2 || nodes.windows(2).any(|w| w[1].u <= w[0].u) {
            return Err(Error::validation("need at least two increasing nodes"));
        }
        let n = nodes.len() - 1;
        Ok(NuSolution {
            dense: DenseOutput {
                nodes,
                errors: vec![0.0; n],
                rejected: 0,
            },
            kappa_eff,
        })
    }

    pub fn nodes(&self) -> &[Node] {
        &self.dense.nodes
    }

    pub fn u_a(&self) -> f64 {
        self.dense.nodes[0].u
    }

    pub fn u_b(&self) -> f64 {
        self.dense.nodes.last().unwrap().u
    }

    pub fn steps(&self) -> usize {
        self.dense.nodes.len() - 1
    }

    fn point_from(&self, u: f64, y: [f64; 3]) -> NuPoint {
        let k = (self.kappa_eff)(u);
        let (h, g) = (y[0], y[1]);
        let h_dot = 1.0 / h - (k + g) * h;
        let nu_dot = 1.0 / (h * h);
        NuPoint {
            h,
            h_dot,
            g,
            nu: y[2],
            nu_dot,
            nu_ddot: -2.0 * h_dot / h * nu_dot,
        }
    }

    /// State at the node with index `i`.
    pub fn at_node(&self, i: usize) -> NuPoint {
        let n = &self.dense.nodes[i];
        let mut p = self.point_from(n.u, n.y);
        p.h_dot = n.dy[0];
        p.nu_ddot = -2.0 * n.dy[0] / n.y[0] * p.nu_dot;
        p
    }

    /// Interpolated (h, g, ν) inside step `i` at fraction `t` ∈ [0, 1].
    pub fn interp_in_step(&self, i: usize, t: f64) -> [f64; 3] {
        let n0 = &self.dense.nodes[i];
        let n1 = &self.dense.nodes[i + 1];
        let dt = n1.u - n0.u;
        let mut y = [0.0; 3];
        for (c, out) in y.iter_mut().enumerate() {
            *out = hermite(t, dt, n0.y[c], n0.dy[c], n1.y[c], n1.dy[c]);
        }
        y
    }

    pub fn eval(&self, u: f64) -> Result<NuPoint> {
        let (ua, ub) = (self.u_a(), self.u_b());
        if !(u >= ua && u <= ub) {
            return Err(Error::Domain {
                value: u,
                domain: format!("[{ua}, {ub}]"),
            });
        }
        let nodes = &self.dense.nodes;
        let i = nodes
            .partition_point(|n| n.u <= u)
            .saturating_sub(1)
            .min(nodes.len() - 2);
        if u == nodes[i].u {
            return Ok(self.at_node(i));
        }
        if u == nodes[i + 1].u {
            return Ok(self.at_node(i + 1));
        }
        let t = (u - nodes[i].u) / (nodes[i + 1].u - nodes[i].u);
        let y = self.interp_in_step(i, t);
        Ok(self.point_from(u, y))
    }

    pub fn dense_eval(&self, u: f64, quantity: Quantity) -> Result<f64> {
        let p = self.eval(u)?;
        Ok(match quantity {
            Quantity::H => p.h,
            Quantity::G => p.g,
            Quantity::Nu => p.nu,
            Quantity::NuDot => p.nu_dot,
            Quantity::NuDdot => p.nu_ddot,
        })
    }

    pub fn start(&self) -> NuPoint {
        self.at_node(0)
    }

    pub fn end(&self) -> NuPoint {
        self.at_node(self.dense.nodes.len() - 1)
    }

    /// Max-norm defect of the dense output in the Bernoulli-Riccati system,
    /// sampled at step midpoints: |ẏ − f(u, y)| / max(1, |f|) over h and g.
    pub fn pinney_residual(&self, forcing: &Func) -> f64 {
        let nodes = &self.dense.nodes;
        let mut worst: f64 = 0.0;
        for i in 0..self.steps() {
            let (n0, n1) = (&nodes[i], &nodes[i + 1]);
            let dt = n1.u - n0.u;
            let u = n0.u + 0.5 * dt;
            let y = self.interp_in_step(i, 0.5);
            let slope = |c: usize| hermite_slope(0.5, dt, n0.y[c], n0.dy[c], n1.y[c], n1.dy[c]);
            let k = (self.kappa_eff)(u);
            let (h, g) = (y[0], y[1]);
            let fh = 1.0 / h - (k + g) * h;
            let fg = g * g + 2.0 * k * g - forcing(u);
            worst = worst
                .max((slope(0) - fh).abs() / fh.abs().max(1.0))
                .max((slope(1) - fg).abs() / fg.abs().max(1.0));
        }
        worst
    }

    /// CSV trace `u,h,g,nu,nu_dot` of the accepted steps.
    pub fn write_trace_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "u,h,g,nu,nu_dot")?;
        for n in &self.dense.nodes {
            let h = n.y[0];
            writeln!(w, "{},{},{},{},{}", n.u, h, n.y[1], n.y[2], 1.0 / (h * h))?;
        }
        Ok(())
    }
}

const MAX_STEPS: usize = 2_000_000;

/// Accepted points of one Bogacki-Shampine integration.
struct Track<const N: usize> {
    u: Vec<f64>,
    y: Vec<[f64; N]>,
    dy: Vec<[f64; N]>,
    errors: Vec<f64>,
    rejected: usize,
}

/// Integrate from `u0` towards `u1` (either direction), landing on every
/// knot strictly between them. `max_step` caps |Δu| given the current state;
/// `valid` rejects states outside the domain of the system.
#[allow(clippy::too_many_arguments)]
fn bs23<const N: usize>(
    rhs: impl Fn(f64, &[f64; N]) -> [f64; N],
    u0: f64,
    u1: f64,
    y0: [f64; N],
    knots: &[f64],
    rel_tol: f64,
    abs_tol: f64,
    max_step: impl Fn(&[f64; N]) -> f64,
    valid: impl Fn(&[f64; N]) -> bool,
) -> Result<Track<N>> {
    let dir = if u1 >= u0 { 1.0 } else { -1.0 };
    let mut targets: Vec<f64> = knots
        .iter()
        .copied()
        .filter(|&k| (k - u0) * dir > 0.0 && (u1 - k) * dir > 0.0)
        .collect();
    targets.push(u1);
    targets.sort_by(|a, b| (dir * a).total_cmp(&(dir * b)));
    targets.dedup();

    let span = (u1 - u0).abs();
    let mut step = (targets[0] - u0).abs().min(span / 100.0);
    let mut u = u0;
    let mut y = y0;
    let mut f = rhs(u, &y);
    let mut tr = Track {
        u: vec![u],
        y: vec![y],
        dy: vec![f],
        errors: Vec::new(),
        rejected: 0,
    };
    let mut prev_err: f64 = 1.0;
    let mut next = 0usize;
    let min_step = 1e-14 * (1.0 + u0.abs().max(u1.abs()));

    while next < targets.len() {
        if tr.u.len() > MAX_STEPS {
            return Err(Error::numerical(format!(
                "Pinney solve exceeded {MAX_STEPS} steps"
            )));
        }
        let target = targets[next];
        let remaining = (target - u).abs();
        let mut dt = step.min(max_step(&y));
        let hits = dt >= remaining - min_step || 1.01 * dt >= remaining;
        if hits {
            dt = remaining;
        } else if 2.0 * dt > remaining {
            // no slivers in front of a target
            dt = 0.5 * remaining;
        }
        let h = dir * dt;
        let k1 = f;
        let mut ys = [0.0; N];
        for i in 0..N {
            ys[i] = y[i] + 0.5 * h * k1[i];
        }
        let k2 = rhs(u + 0.5 * h, &ys);
        for i in 0..N {
            ys[i] = y[i] + 0.75 * h * k2[i];
        }
        let k3 = rhs(u + 0.75 * h, &ys);
        let mut yn = [0.0; N];
        for i in 0..N {
            yn[i] = y[i] + h * (2.0 / 9.0 * k1[i] + 1.0 / 3.0 * k2[i] + 4.0 / 9.0 * k3[i]);
        }
        let u_new = if hits { target } else { u + h };
        let ok = valid(&yn) && yn.iter().all(|v| v.is_finite());
        let (k4, err) = if ok {
            let k4 = rhs(u_new, &yn);
            let mut err: f64 = 0.0;
            for i in 0..N {
                let e = h
                    * (-5.0 / 72.0 * k1[i] + 1.0 / 12.0 * k2[i] + 1.0 / 9.0 * k3[i]
                        - 0.125 * k4[i]);
                let sc = abs_tol + rel_tol * y[i].abs().max(yn[i].abs());
                err = err.max(e.abs() / sc);
            }
            (k4, if err.is_finite() { err } else { f64::INFINITY })
        } else {
            ([0.0; N], f64::INFINITY)
        };
        if err <= 1.0 {
            u = u_new;
            y = yn;
            f = k4;
            tr.u.push(u);
            tr.y.push(y);
            tr.dy.push(f);
            tr.errors.push(err);
            if hits {
                next += 1;
            }
            let e = err.max(1e-10);
            let factor = 0.9 * e.powf(-0.7 / 3.0) * prev_err.max(1e-10).powf(0.4 / 3.0);
            // a step shortened to land on a target carries no PI memory
            prev_err = if hits { 1.0 } else { e };
            let base = if hits { step.max(dt) } else { dt };
            step = base * factor.clamp(0.2, 5.0);
        } else {
            tr.rejected += 1;
            let factor = if err.is_finite() {
                (0.9 * err.powf(-1.0 / 3.0)).max(0.1)
            } else {
                0.25
            };
            step = dt * factor;
            if step < min_step {
                return Err(if ok {
                    Error::StepUnderflow { u }
                } else {
                    Error::Singular { u }
                });
            }
        }
    }
    Ok(tr)
}

/// Integrate the Pinney system forward from `(h0, g0, nu0)` at `spec.u_a`.
///
/// The Riccati equation for g is unstable in the forward direction, so this
/// is only robust over short horizons; [`solve_pinney_stable`] is the
/// production path.
pub fn solve_pinney_system(spec: &OdeSystemSpec, h0: f64, g0: f64, nu0: f64) -> Result<NuSolution> {
    if !(h0 > 0.0 && h0.is_finite() && g0.is_finite() && nu0.is_finite()) {
        return Err(Error::validation(
            "h0 must be positive and the initial state finite",
        ));
    }
    check_spec(spec)?;
    let cap = spec.max_phase_step;
    let tr = bs23(
        |u, y| spec.rhs(u, y),
        spec.u_a,
        spec.u_b,
        [h0, g0, nu0],
        &spec.knots,
        spec.rel_tol,
        spec.abs_tol,
        |y| cap * y[0] * y[0],
        |y| y[0] > 0.0,
    )?;
    let nodes = (0..tr.u.len())
        .map(|i| Node {
            u: tr.u[i],
            y: tr.y[i],
            dy: tr.dy[i],
        })
        .collect();
    Ok(NuSolution {
        dense: DenseOutput {
            nodes,
            errors: tr.errors,
            rejected: tr.rejected,
        },
        kappa_eff: spec.kappa_eff.clone(),
    })
}

fn check_spec(spec: &OdeSystemSpec) -> Result<()> {
    if !(spec.rel_tol > 0.0 && spec.abs_tol > 0.0) {
        return Err(Error::validation("tolerances must be positive"));
    }
    if !(spec.u_b > spec.u_a) {
        return Err(Error::validation("need u_b > u_a"));
    }
    Ok(())
}

/// Pinney solution by two stable sweeps.
///
/// g is integrated backwards from its attracting equilibrium
/// g = −k + √(k² + q) at `u_b`; then h and ν are integrated forwards from
/// h(u_a) = (k + g)^{-1/2}(u_a), which makes ḣ(u_a) = 0.
pub fn solve_pinney_stable(spec: &OdeSystemSpec, nu0: f64) -> Result<NuSolution> {
    check_spec(spec)?;
    let (k, q) = (&spec.kappa_eff, &spec.forcing);
    let kb = k(spec.u_b);
    let rad = kb * kb + q(spec.u_b);
    let g_b = if rad >= 0.0 { -kb + rad.sqrt() } else { -kb };
    let cap = spec.max_phase_step;
    let back = bs23(
        |u, y: &[f64; 1]| {
            let kv = k(u);
            [y[0] * y[0] + 2.0 * kv * y[0] - q(u)]
        },
        spec.u_b,
        spec.u_a,
        [g_b],
        &spec.knots,
        spec.rel_tol,
        spec.abs_tol,
        |y| cap / (y[0].abs() + 1e-300),
        |_| true,
    )?;
    // ascending copy of the backward track
    let gu: Vec<f64> = back.u.iter().rev().copied().collect();
    let gy: Vec<f64> = back.y.iter().rev().map(|v| v[0]).collect();
    let gd: Vec<f64> = back.dy.iter().rev().map(|v| v[0]).collect();
    let g_val = |u: f64| -> f64 {
        let i = gu
            .partition_point(|&t| t <= u)
            .saturating_sub(1)
            .min(gu.len() - 2);
        let dt = gu[i + 1] - gu[i];
        let t = ((u - gu[i]) / dt).clamp(0.0, 1.0);
        hermite(t, dt, gy[i], gd[i], gy[i + 1], gd[i + 1])
    };
    // value and slope of the g track's own cubic
    let g_at = |u: f64| -> (f64, f64) {
        let i = gu
            .partition_point(|&t| t <= u)
            .saturating_sub(1)
            .min(gu.len() - 2);
        let dt = gu[i + 1] - gu[i];
        let t = ((u - gu[i]) / dt).clamp(0.0, 1.0);
        (
            hermite(t, dt, gy[i], gd[i], gy[i + 1], gd[i + 1]),
            hermite_slope(t, dt, gy[i], gd[i], gy[i + 1], gd[i + 1]),
        )
    };
    let big_g_a = k(spec.u_a) + gy[0];
    if !(big_g_a > 0.0) {
        return Err(Error::numerical(format!(
            "no positive Pinney seed at u = {} (k + g = {big_g_a})",
            spec.u_a
        )));
    }
    let h0 = big_g_a.powf(-0.5);
    let fwd = bs23(
        |u, y: &[f64; 2]| {
            let g = g_val(u);
            let h = y[0];
            [1.0 / h - (k(u) + g) * h, 1.0 / (h * h)]
        },
        spec.u_a,
        spec.u_b,
        [h0, nu0],
        &gu,
        spec.rel_tol,
        spec.abs_tol,
        |y| cap * y[0] * y[0],
        |y| y[0] > 0.0,
    )?;
    let nodes = (0..fwd.u.len())
        .map(|i| {
            let u = fwd.u[i];
            let (g, gdot) = g_at(u);
            Node {
                u,
                y: [fwd.y[i][0], g, fwd.y[i][1]],
                dy: [fwd.dy[i][0], gdot, fwd.dy[i][1]],
            }
        })
        .collect();
    Ok(NuSolution {
        dense: DenseOutput {
            nodes,
            errors: fwd.errors,
            rejected: fwd.rejected + back.rejected,
        },
        kappa_eff: spec.kappa_eff.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::func;

    fn flat_spec(k: f64, q: f64, t: f64) -> OdeSystemSpec {
        OdeSystemSpec::new(func(move |_| k), func(move |_| q), 0.0, t, vec![])
    }

    #[test]
    fn constant_frequency_keeps_h_fixed() {
        let (k, q): (f64, f64) = (0.3, 0.7);
        let w = (k * k + q).sqrt();
        let (h0, g0) = initial_conditions(k, w * w).unwrap();
        let sol = solve_pinney_system(&flat_spec(k, q, 5.0), h0, g0, 0.0).unwrap();
        for i in 0..=50 {
            let p = sol.eval(i as f64 * 0.1).unwrap();
            assert!((p.h - w.powf(-0.5)).abs() < 1e-12);
            assert!((p.nu_dot - w).abs() < 1e-11);
            assert!((p.nu - w * i as f64 * 0.1).abs() < 1e-10);
        }
    }

    #[test]
    fn initial_conditions_examples() {
        let (h0, g0) = initial_conditions(0.02, 0.02 * 0.02).unwrap();
        assert!(g0.abs() < 1e-15);
        assert!((h0 - 0.02f64.powf(-0.5)).abs() < 1e-12);
        let lam = (0.06f64).ln().exp();
        let w2 = 0.02f64.powi(2) + 0.25 * lam;
        let (_, g0) = initial_conditions(0.02, w2).unwrap();
        assert!((g0 - (w2.sqrt() - 0.02)).abs() < 1e-15);
    }

    #[test]
    fn nodes_are_exact_and_knots_hit() {
        let knots = vec![0.3, 0.30001, 1.7];
        let spec = OdeSystemSpec::new(
            func(|u| 0.2 + 0.1 * u.sin()),
            func(|u| 1.0 + 0.5 * u.cos()),
            0.0,
            2.0,
            knots.clone(),
        );
        let sol = solve_pinney_stable(&spec, 0.0).unwrap();
        for k in knots {
            assert!(sol.nodes().iter().any(|n| n.u == k));
        }
        for (i, n) in sol.nodes().iter().enumerate() {
            let p = sol.eval(n.u).unwrap();
            assert_eq!(p.h, n.y[0]);
            assert_eq!(p.nu, n.y[2]);
            assert_eq!(p.h_dot, sol.at_node(i).h_dot);
        }
        assert!(sol.eval(2.1).is_err());
        let mut prev = -1.0;
        for i in 0..=400 {
            let nu = sol.dense_eval(i as f64 * 0.005, Quantity::Nu).unwrap();
            assert!(nu > prev);
            prev = nu;
        }
    }

    #[test]
    fn trace_csv_has_header_and_rows() {
        let (h0, g0) = initial_conditions(0.1, 1.0).unwrap();
        let sol = solve_pinney_system(&flat_spec(0.1, 0.99, 1.0), h0, g0, 0.0).unwrap();
        let mut buf = Vec::new();
        sol.write_trace_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("u,h,g,nu,nu_dot\n"));
        assert_eq!(text.lines().count(), sol.nodes().len() + 1);
    }

    #[test]
    fn collapse_is_reported() {
        // g seeded far above equilibrium drives h to zero in finite time
        let spec = flat_spec(0.0, 0.0, 50.0);
        let r = solve_pinney_system(&spec, 1.0, 50.0, 0.0);
        assert!(
            matches!(
                r,
                Err(Error::Singular { .. }) | Err(Error::StepUnderflow { .. })
            ),
            "{r:?}"
        );
    }

    #[test]
    fn stable_solution_satisfies_pinney() {
        let k = |u: f64| 0.2 + 0.1 * u.sin();
        let kd = |u: f64| 0.1 * u.cos();
        let q = |u: f64| 1.0 + 0.5 * u.cos();
        let spec = OdeSystemSpec::new(func(k), func(q), 0.0, 12.0, vec![]);
        let sol = solve_pinney_stable(&spec, 0.0).unwrap();
        assert!(sol.start().h_dot.abs() < 1e-12);
        let eps = 1e-3;
        for i in 1..24 {
            let u = i as f64 * 0.5;
            let h = |u| sol.eval(u).unwrap().h;
            let hdd = (h(u + eps) - 2.0 * h(u) + h(u - eps)) / (eps * eps);
            let rhs = (k(u) * k(u) - kd(u) + q(u)) * h(u) - h(u).powi(-3);
            assert!(
                (hdd - rhs).abs() < 1e-5 * (1.0 + rhs.abs()),
                "u={u} {hdd} {rhs}"
            );
        }
    }

    #[test]
    fn stable_solution_without_forcing_is_bernoulli() {
        // q = 0 gives g = 0 and H = h² solving Ḣ = 2 − 2kH, H(0) = 1/k(0)
        let spec = OdeSystemSpec::new(func(|_| 0.5), func(|_| 0.0), 0.0, 3.0, vec![]);
        let sol = solve_pinney_stable(&spec, 0.0).unwrap();
        for i in 0..=30 {
            let p = sol.eval(i as f64 * 0.1).unwrap();
            assert!(p.g.abs() < 1e-14);
            assert!((p.h * p.h - 2.0).abs() < 1e-10);
        }
    }

    fn smooth_spec(t: f64) -> OdeSystemSpec {
        OdeSystemSpec::new(
            func(|u| 0.2 + 0.1 * u.sin()),
            func(|u| 1.0 + 0.5 * u.cos()),
            0.0,
            t,
            vec![1.0, 2.5],
        )
    }

    #[test]
    fn dense_output_identities() {
        let sol = solve_pinney_stable(&smooth_spec(4.0), 0.0).unwrap();
        for i in 0..=97 {
            let p = sol.eval(i as f64 * 4.0 / 97.0).unwrap();
            assert!((p.h * p.h * p.nu_dot - 1.0).abs() < 1e-14);
            assert!(
                (p.nu_ddot / p.nu_dot + 2.0 * p.h_dot / p.h).abs()
                    < 1e-12 * (1.0 + p.nu_ddot.abs())
            );
        }
        assert!(sol.pinney_residual(&func(|u| 1.0 + 0.5 * u.cos())) < 1e-8);
    }

    #[test]
    fn tighter_tolerance_is_self_consistent() {
        let tol = 1e-8;
        let a =
            solve_pinney_stable(&smooth_spec(4.0).with_tolerances(tol, tol * 1e-2), 0.0).unwrap();
        let b = solve_pinney_stable(
            &smooth_spec(4.0).with_tolerances(tol / 2.0, tol * 5e-3),
            0.0,
        )
        .unwrap();
        for i in 0..=40 {
            let (p, q) = (
                a.eval(i as f64 * 0.1).unwrap(),
                b.eval(i as f64 * 0.1).unwrap(),
            );
            assert!((p.h - q.h).abs() < 10.0 * tol * p.h.abs().max(1.0));
            assert!((p.nu - q.nu).abs() < 10.0 * tol * p.nu.abs().max(1.0));
        }
    }

    #[test]
    fn global_error_is_third_order() {
        let spec = |tol: f64| flat_spec(0.3, 0.7, 3.0).with_tolerances(tol, tol * 1e-2);
        let exact = solve_pinney_system(&spec(1e-14), 1.0, 0.2, 0.0)
            .unwrap()
            .end();
        let (mut steps, mut errs) = (Vec::new(), Vec::new());
        for tol in [1e-6, 1e-7, 1e-8, 1e-9] {
            let sol = solve_pinney_system(&spec(tol), 1.0, 0.2, 0.0).unwrap();
            steps.push(sol.steps() as f64);
            errs.push((sol.end().h - exact.h).abs() + (sol.end().nu - exact.nu).abs());
        }
        let n = steps.len() as f64;
        let (lx, ly): (Vec<f64>, Vec<f64>) = (
            steps.iter().map(|s| s.ln()).collect(),
            errs.iter().map(|e| e.ln()).collect(),
        );
        let (mx, my) = (lx.iter().sum::<f64>() / n, ly.iter().sum::<f64>() / n);
        let slope = lx
            .iter()
            .zip(&ly)
            .map(|(x, y)| (x - mx) * (y - my))
            .sum::<f64>()
            / lx.iter().map(|x| (x - mx).powi(2)).sum::<f64>();
        assert!(
            (slope + 3.0).abs() < 0.3,
            "slope {slope}: {steps:?} {errs:?}"
        );
    }

    #[test]
    fn gaussian_configuration_has_closed_form_h() {
        let kappa = |u: f64| 0.3 + 0.2 * u.sin();
        let sigma = |u: f64| 0.02 * (1.0 + 0.3 * u);
        let mu = move |u: f64| 1.0 / sigma(u);
        let spec = OdeSystemSpec::new(
            func(move |u| kappa(u) + 0.3 / (1.0 + 0.3 * u)),
            func(|_| 0.0),
            0.0,
            5.0,
            vec![],
        );
        let sol = solve_pinney_stable(&spec, 0.0).unwrap();
        let a = sol.start();
        for i in 0..=50 {
            let u = i as f64 * 0.1;
            let p = sol.eval(u).unwrap();
            let int_k = 0.3 * u + 0.2 * (1.0 - u.cos());
            let h = mu(u) / (mu(0.0) * a.nu_dot.sqrt()) * (p.nu - a.nu - int_k).exp();
            assert!((p.h - h).abs() < 1e-8 * h, "u={u} {} {h}", p.h);
        }
    }

    #[test]
    fn black_karasinski_first_pass_has_imaginary_frequency() {
        let (kappa, sigma, lambda, x_bar) = (0.02f64, 0.5f64, 1.0f64, 0.06f64.ln());
        let radicand = kappa * kappa - sigma * sigma * lambda * x_bar.exp();
        assert!(radicand < 0.0);
        let (h0, g0) = initial_conditions(kappa, radicand).unwrap();
        assert!((h0 - radicand.abs().powf(-0.25)).abs() < 1e-12 * h0);
        assert!((g0 - (radicand.abs().sqrt() - kappa)).abs() < 1e-12);
    }
}
