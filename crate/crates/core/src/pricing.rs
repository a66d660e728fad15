//! Arrow-Debreu densities, bonds and European payoffs from the GTFK
//! reduced density, plus closed forms for the Gaussian model.

use std::f64::consts::{PI, SQRT_2};
use std::sync::Arc;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::gtfk::{
    log_reduced_density, GtfkProblem, GtfkSolver, SelfConsistentState, SolveOptions, SolvedPoint,
};
use crate::kernels::{kernel_integrals, EndPoint, FhoParams, KernelIntegrals};
use crate::model::{Func, RateMap, ShortRateModelSpec};
use crate::ode::{Node, NuSolution};
use crate::par::Execution;
use crate::quad::{integrate_line, normal_expectation, rule8, LineIntegral, LineOptions};

/// W(b, a) = ½[mκx²]_a^b − [mκθx]_a^b.
pub fn endpoint_weight(spec: &ShortRateModelSpec, a: (f64, f64), b: (f64, f64)) -> f64 {
    let part = |u: f64, x: f64| {
        let mk = spec.mass(u) * spec.kappa.value(u);
        0.5 * mk * x * x - mk * spec.theta.value(u) * x
    };
    part(b.0, b.1) - part(a.0, a.1)
}

/// Coefficients of e^{−W}ρ̄₀ as a Gaussian in x_b: exp(−A x_b² + B x_b + C).
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct PricingCoeffs {
    pub a: f64,
    pub b: f64,
    /// ln N(x̄).
    pub log_n: f64,
    pub c_exp: f64,
}

impl PricingCoeffs {
    pub fn n(&self) -> f64 {
        self.log_n.exp()
    }

    /// Mean and variance of the x_b Gaussian.
    pub fn terminal_law(&self) -> (f64, f64) {
        (self.b / (2.0 * self.a), 0.5 / self.a)
    }
}

pub fn pricing_coeffs(
    state: &SelfConsistentState,
    params: &FhoParams,
    nu: &NuSolution,
    k: &KernelIntegrals,
    spec: &ShortRateModelSpec,
    x_bar: f64,
    x_a: f64,
) -> Result<PricingCoeffs> {
    debug_assert_eq!(state.x_bar, x_bar);
    let (u_a, u_b) = (nu.u_a(), nu.u_b());
    let ea = EndPoint::at(params, nu, true);
    let eb = EndPoint::at(params, nu, false);
    let (sa, sb) = (ea.scale(), eb.scale());
    let (sh, ch) = (k.sinh_scaled(), k.cosh_scaled());
    let e = (-k.delta_nu).exp();
    let isum = k.i1 + k.i2;
    let (kb, tb) = (spec.kappa.value(u_b), spec.theta.value(u_b));
    let (ka, ta) = (spec.kappa.value(u_a), spec.theta.value(u_a));
    let xbb = sb * x_bar;
    let xta = sa * (x_a - x_bar);
    let a = 0.5
        * sb
        * sb
        * (kb / eb.nu_dot - eb.boundary + (ch + k.omega_a * k.omega_a / (2.0 * k.omega_ab)) / sh);
    if !(a > 0.0) || !a.is_finite() {
        return Err(Error::numerical(format!(
            "pricing curvature A = {a} at x̄ = {x_bar}"
        )));
    }
    let b = sb
        * (eb.mu * kb * tb / eb.nu_dot.sqrt() - eb.boundary * xbb
            + (xbb * ch + xta * e - k.gamma_a) / sh
            + k.omega_a * (xbb * k.omega_a - xta * k.omega_b + isum) / (2.0 * k.omega_ab * sh));
    let p = xta * k.omega_b - xbb * k.omega_a - isum;
    let c = 0.5 * (eb.boundary * xbb * xbb - ea.boundary * xta * xta)
        - 0.5 / sh
            * ((xbb * xbb + xta * xta) * ch + 2.0 * xbb * xta * e - 2.0 * xbb * k.gamma_a
                + 2.0 * xta * k.gamma_b
                - 2.0 * k.gamma_ab
                + p * p / (2.0 * k.omega_ab))
        + ea.mu * ea.mu * ka * x_a * (0.5 * x_a - ta)
        - k.w_integral;
    let log_n = (u_b - u_a).ln()
        + 0.5 * ((sb * sa / (8.0 * PI * a)).ln() - k.omega_ab.ln() - k.delta_nu)
        + c
        + b * b / (4.0 * a);
    Ok(PricingCoeffs {
        a,
        b,
        log_n,
        c_exp: c,
    })
}

/// European payoff at expiry. `Call` and `Put` are struck on the short rate
/// r(x); `Custom` is a function of the state x.
#[derive(Clone)]
pub enum Payoff {
    UnitBond,
    Call(f64),
    Put(f64),
    Custom(Func),
}

impl std::fmt::Debug for Payoff {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Payoff::UnitBond => write!(f, "UnitBond"),
            Payoff::Call(k) => write!(f, "Call({k})"),
            Payoff::Put(k) => write!(f, "Put({k})"),
            Payoff::Custom(_) => write!(f, "Custom"),
        }
    }
}

pub fn normal_cdf(z: f64) -> f64 {
    0.5 * libm::erfc(-z / SQRT_2)
}

fn normal_pdf(z: f64) -> f64 {
    (-0.5 * z * z).exp() / (2.0 * PI).sqrt()
}

impl Payoff {
    pub fn value(&self, rate_map: RateMap, x: f64) -> f64 {
        match self {
            Payoff::UnitBond => 1.0,
            Payoff::Call(k) => (rate_map.rate(x) - k).max(0.0),
            Payoff::Put(k) => (k - rate_map.rate(x)).max(0.0),
            Payoff::Custom(f) => f(x),
        }
    }

    /// E[P(X)] for X ~ N(mean, var): the smoothing operator e^{(var/2)∂²}.
    pub fn smoothed(&self, rate_map: RateMap, mean: f64, var: f64) -> f64 {
        if var <= 0.0 {
            return self.value(rate_map, mean);
        }
        let sd = var.sqrt();
        let call = |k: f64| match rate_map {
            RateMap::Exponential => {
                let fwd = (mean + 0.5 * var).exp();
                if k <= 0.0 {
                    return fwd - k;
                }
                let d2 = (mean - k.ln()) / sd;
                fwd * normal_cdf(d2 + sd) - k * normal_cdf(d2)
            }
            RateMap::Linear => {
                let d = (mean - k) / sd;
                (mean - k) * normal_cdf(d) + sd * normal_pdf(d)
            }
        };
        match self {
            Payoff::UnitBond => 1.0,
            Payoff::Call(k) => call(*k),
            Payoff::Put(k) => {
                let fwd = match rate_map {
                    RateMap::Exponential => (mean + 0.5 * var).exp(),
                    RateMap::Linear => mean,
                };
                call(*k) - fwd + k
            }
            Payoff::Custom(f) => normal_expectation(mean, var, 64, |x| f(x)),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct PriceResult {
    pub value: f64,
    pub abs_error_estimate: f64,
    pub abscissae_used: usize,
    pub non_converged_abscissae: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PricingOptions {
    pub solve: SolveOptions,
    pub line: LineOptions,
    pub exec: Execution,
}

impl Default for PricingOptions {
    fn default() -> Self {
        PricingOptions {
            solve: SolveOptions::default(),
            line: LineOptions {
                abs_tol: 1e-13,
                rel_tol: 1e-8,
                max_panels: 4000,
            },
            exec: Execution::default(),
        }
    }
}

/// Adaptive x̄ quadrature of a batch integrand; see [`integrate_line`].
pub fn outer_quadrature<F>(
    integrand: F,
    center_hint: f64,
    scale: f64,
    opts: &LineOptions,
) -> Result<LineIntegral>
where
    F: FnMut(&[f64]) -> Result<Vec<f64>>,
{
    integrate_line(integrand, center_hint, scale, opts)
}

/// Replace the values of non-converged abscissae by linear interpolation
/// between converged neighbours in the same Kronrod panel.
fn patch_non_converged(xs: &[f64], pts: &[Arc<SolvedPoint>], vals: &mut [f64]) -> Result<usize> {
    let mut count = 0;
    for (p0, chunk) in pts.chunks(15).enumerate() {
        for i in 0..chunk.len() {
            if chunk[i].state.converged {
                continue;
            }
            count += 1;
            let g = p0 * 15 + i;
            let ok = |j: usize| chunk[j].state.converged;
            if i == 0 || i + 1 >= chunk.len() || !ok(i - 1) || !ok(i + 1) {
                return Err(Error::NotConverged {
                    iterations: chunk[i].state.iterations,
                    residual: chunk[i].state.residual,
                });
            }
            let t = (xs[g] - xs[g - 1]) / (xs[g + 1] - xs[g - 1]);
            vals[g] = vals[g - 1] + t * (vals[g + 1] - vals[g - 1]);
        }
    }
    Ok(count)
}

/// λ = 0 moments of the state started from `x_a` at `u_a`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct StateMoments {
    pub terminal_mean: f64,
    pub terminal_sd: f64,
    pub average_mean: f64,
    pub average_sd: f64,
}

/// Gauss panels on the knot partition, none wider than `max_width`.
fn fine_edges(spec: &ShortRateModelSpec, u_a: f64, u_b: f64, max_width: f64) -> Vec<f64> {
    let knots = spec.knot_partition(u_a, u_b);
    let mut edges = vec![u_a];
    for w in knots.windows(2) {
        let n = ((w[1] - w[0]) / max_width).ceil().max(1.0) as usize;
        for i in 1..=n {
            edges.push(if i == n {
                w[1]
            } else {
                w[0] + (w[1] - w[0]) * i as f64 / n as f64
            });
        }
    }
    edges
}

/// Per-panel Gauss nodes with cumulative integrals of a function.
struct Cumulative {
    /// value at the left edge of each panel, plus the final total
    edge: Vec<f64>,
    /// value at each Gauss node
    node: Vec<[f64; 8]>,
}

fn cumulate(edges: &[f64], f: impl Fn(usize, usize, f64) -> f64) -> Cumulative {
    let rule = rule8();
    let mut edge = vec![0.0; edges.len()];
    let mut node = vec![[0.0; 8]; edges.len() - 1];
    for i in 0..edges.len() - 1 {
        let du = edges[i + 1] - edges[i];
        let vals: Vec<f64> = (0..8)
            .map(|c| f(i, c, edges[i] + du * rule.nodes[c]))
            .collect();
        for c in 0..8 {
            node[i][c] =
                edge[i] + du * (0..8).map(|e| rule.cumulative[c][e] * vals[e]).sum::<f64>();
        }
        edge[i + 1] = edge[i] + du * (0..8).map(|c| rule.weights[c] * vals[c]).sum::<f64>();
    }
    Cumulative { edge, node }
}

const FINE_WIDTH: f64 = 1.0 / 64.0;

/// Moments of X(u_b) and of (1/T)∫X du under λ = 0.
pub fn state_moments(spec: &ShortRateModelSpec, u_a: f64, u_b: f64, x_a: f64) -> StateMoments {
    let edges = fine_edges(spec, u_a, u_b, FINE_WIDTH);
    let rule = rule8();
    let t = u_b - u_a;
    let kk = cumulate(&edges, |_, _, u| spec.kappa.value(u));
    let kt = cumulate(&edges, |i, c, u| {
        (kk.node[i][c]).exp() * spec.kappa.value(u) * spec.theta.value(u)
    });
    let mean = |i: usize, c: usize| (-kk.node[i][c]).exp() * (x_a + kt.node[i][c]);
    let n = edges.len() - 1;
    let k_end = kk.edge[n];
    let terminal_mean = (-k_end).exp() * (x_a + kt.edge[n]);
    let var = cumulate(&edges, |i, c, u| {
        (2.0 * kk.node[i][c]).exp() * spec.sigma.value(u).powi(2)
    });
    let terminal_sd = ((-2.0 * k_end).exp() * var.edge[n]).sqrt();
    // G(v, u_b) = e^{K(v)} ∫_v^{u_b} e^{−K}
    let lk = cumulate(&edges, |i, c, _| (-kk.node[i][c]).exp());
    let total = lk.edge[n];
    let mut avg = 0.0;
    let mut avg_var = 0.0;
    for i in 0..n {
        let du = edges[i + 1] - edges[i];
        for c in 0..8 {
            let u = edges[i] + du * rule.nodes[c];
            let g = kk.node[i][c].exp() * (total - lk.node[i][c]);
            avg += rule.weights[c] * du * mean(i, c);
            avg_var += rule.weights[c] * du * (spec.sigma.value(u) * g).powi(2);
        }
    }
    StateMoments {
        terminal_mean,
        terminal_sd,
        average_mean: avg / t,
        average_sd: avg_var.sqrt() / t,
    }
}

/// Memoised GTFK solves for a short-rate spec on [u_a, u_b].
///
/// The solves run in the frame X − x0 (the approximation is invariant under
/// constant shifts); this keeps the Gaussian coefficients small when σ is.
pub struct ShortRateSolver {
    pub gtfk: GtfkSolver,
    pub spec: ShortRateModelSpec,
    /// Spec of X − shift.
    pub frame: ShortRateModelSpec,
    pub shift: f64,
}

impl ShortRateSolver {
    pub fn u_a(&self) -> f64 {
        self.gtfk.u_a
    }

    pub fn u_b(&self) -> f64 {
        self.gtfk.u_b
    }

    /// e^{−λc(u_b − u_a)}, the discount removed by the shift.
    fn shift_discount(&self) -> f64 {
        (-self.spec.shift_rate(self.shift) * (self.u_b() - self.u_a())).exp()
    }

    /// Solved points in increasing x̄, in the shifted frame.
    pub fn solved(&self) -> Vec<Arc<SolvedPoint>> {
        self.gtfk.solved()
    }

    /// Per-abscissa CSV with x̄ in the original frame.
    pub fn write_diagnostics_csv<W: std::io::Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(
            w,
            "x_bar,C,D,alpha,delta_gamma,iterations,converged,residual"
        )?;
        for p in self.solved() {
            let s = p.state;
            writeln!(
                w,
                "{},{},{},{},{},{},{},{}",
                s.x_bar + self.shift,
                s.c,
                s.d,
                s.alpha,
                s.delta_gamma,
                s.iterations,
                s.converged,
                s.residual
            )?;
        }
        Ok(())
    }
}

pub fn short_rate_solver(
    spec: &ShortRateModelSpec,
    u_a: f64,
    u_b: f64,
    opts: &PricingOptions,
) -> Result<ShortRateSolver> {
    if !(u_b > u_a && u_a >= 0.0) {
        return Err(Error::validation(format!(
            "need 0 <= u_a < u_b, got [{u_a}, {u_b}]"
        )));
    }
    let shift = spec.x0;
    let frame = spec.shifted(shift);
    Ok(ShortRateSolver {
        gtfk: GtfkSolver::new(GtfkProblem::short_rate(&frame), u_a, u_b, opts.solve)?
            .with_execution(opts.exec),
        spec: spec.clone(),
        frame,
        shift,
    })
}

pub fn price_european_gtfk(
    spec: &ShortRateModelSpec,
    payoff: &Payoff,
    u_a: f64,
    u_b: f64,
    x_a: f64,
) -> Result<PriceResult> {
    price_european_gtfk_with(spec, payoff, u_a, u_b, x_a, &PricingOptions::default())
}

pub fn price_european_gtfk_with(
    spec: &ShortRateModelSpec,
    payoff: &Payoff,
    u_a: f64,
    u_b: f64,
    x_a: f64,
    opts: &PricingOptions,
) -> Result<PriceResult> {
    let solver = short_rate_solver(spec, u_a, u_b, opts)?;
    price_with_solver(&solver, payoff, x_a, opts)
}

pub fn price_with_solver(
    solver: &ShortRateSolver,
    payoff: &Payoff,
    x_a: f64,
    opts: &PricingOptions,
) -> Result<PriceResult> {
    let (frame, c) = (&solver.frame, solver.shift);
    let xa = x_a - c;
    let mom = state_moments(frame, solver.u_a(), solver.u_b(), xa);
    let scale = mom.average_sd.max(1e-14 * (1.0 + x_a.abs()));
    let mut skipped = 0;
    let r = outer_quadrature(
        |xs| {
            let pts = solver.gtfk.solve_batch(xs)?;
            let mut vals = pts
                .iter()
                .map(|p| {
                    let pc = pricing_coeffs(
                        &p.state,
                        &p.params,
                        &p.nu,
                        &p.integrals,
                        frame,
                        p.state.x_bar,
                        xa,
                    )?;
                    let (m, v) = pc.terminal_law();
                    Ok(pc.n() * payoff.smoothed(solver.spec.rate_map, m + c, v))
                })
                .collect::<Result<Vec<f64>>>()?;
            skipped += patch_non_converged(xs, &pts, &mut vals)?;
            Ok(vals)
        },
        mom.average_mean,
        scale,
        &opts.line,
    )?;
    let d = solver.shift_discount();
    let value = r.value * d;
    let fp = 10.0 * opts.solve.tol.max(opts.solve.ode_rel_tol) * value.abs();
    Ok(PriceResult {
        value,
        abs_error_estimate: r.error * d + fp,
        abscissae_used: r.evaluations,
        non_converged_abscissae: skipped,
    })
}

/// Zero-coupon bond: the unit payoff with the model's λ.
pub fn price_zcb_gtfk(
    spec: &ShortRateModelSpec,
    u_a: f64,
    u_b: f64,
    x_a: f64,
) -> Result<PriceResult> {
    price_european_gtfk(spec, &Payoff::UnitBond, u_a, u_b, x_a)
}

/// ψ_λ(b, a) = e^{−W}∫ρ̄₀(b, a; x̄)dx̄.
pub fn ad_density_gtfk(
    spec: &ShortRateModelSpec,
    u_a: f64,
    u_b: f64,
    x_a: f64,
    x_b: f64,
) -> Result<f64> {
    let solver = short_rate_solver(spec, u_a, u_b, &PricingOptions::default())?;
    Ok(ad_density_profile(&solver, x_a, &[x_b], &PricingOptions::default())?[0])
}

/// ψ_λ at several terminal points, sharing one memoised solver.
pub fn ad_density_profile(
    solver: &ShortRateSolver,
    x_a: f64,
    x_bs: &[f64],
    opts: &PricingOptions,
) -> Result<Vec<f64>> {
    let (u_a, u_b) = (solver.u_a(), solver.u_b());
    let (frame, c) = (&solver.frame, solver.shift);
    let xa = x_a - c;
    let edges = fine_edges(frame, u_a, u_b, FINE_WIDTH);
    let s2 = cumulate(&edges, |_, _, u| frame.sigma.value(u).powi(2));
    let bridge_sd = (s2.edge[edges.len() - 1] / 12.0).sqrt();
    let d = solver.shift_discount();
    x_bs.iter()
        .map(|&x_b| {
            let xb = x_b - c;
            let w = endpoint_weight(frame, (u_a, xa), (u_b, xb));
            let gtfk = solver.gtfk.fork();
            let r = outer_quadrature(
                |xs| {
                    let pts = gtfk.solve_batch(xs)?;
                    let mut vals = pts
                        .iter()
                        .map(|p| {
                            Ok((log_reduced_density(
                                &p.state,
                                &p.params,
                                &p.nu,
                                &p.integrals,
                                xa,
                                xb,
                            )? - w)
                                .exp())
                        })
                        .collect::<Result<Vec<f64>>>()?;
                    patch_non_converged(xs, &pts, &mut vals)?;
                    Ok(vals)
                },
                0.5 * (xa + xb),
                bridge_sd.max(1e-14 * (1.0 + x_a.abs())),
                &opts.line,
            )?;
            Ok(r.value * d)
        })
        .collect()
}

/// FHO parameters of the Gaussian short-rate Hamiltonian.
fn gaussian_fho(spec: &ShortRateModelSpec) -> FhoParams {
    let p = GtfkProblem::short_rate(spec);
    FhoParams {
        mu: p.mu,
        mu_dot: p.mu_dot,
        omega_sq: p.omega_sq,
        gamma: p.gamma,
        w: p.w,
        kappa_eff: p.kappa_eff,
        forcing: p.forcing,
        hbar: 1.0,
        knots: p.knots,
        bundle: None,
    }
}

/// Knot partition refined to the local rate scale of k.
fn rate_adapted_edges(spec: &ShortRateModelSpec, k: &Func, u_a: f64, u_b: f64) -> Vec<f64> {
    const SAMPLES: usize = 32;
    const PHASE: f64 = 0.0005;
    let knots = spec.knot_partition(u_a, u_b);
    let mut edges = vec![u_a];
    for w in knots.windows(2) {
        let len = w[1] - w[0];
        let vals: Vec<f64> = (0..=SAMPLES)
            .map(|i| k(w[0] + len * i as f64 / SAMPLES as f64))
            .collect();
        let size = vals.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let slope = vals
            .windows(2)
            .fold(0.0f64, |m, v| m.max((v[1] - v[0]).abs()))
            * SAMPLES as f64
            / len;
        let rate = size + slope.sqrt();
        let width = (FINE_WIDTH / 2.0).min(PHASE / rate.max(1e-300));
        let n = (len / width).ceil().max(1.0) as usize;
        for i in 1..=n {
            edges.push(if i == n {
                w[1]
            } else {
                w[0] + len * i as f64 / n as f64
            });
        }
    }
    edges
}

/// Bernoulli solution h² = H, Ḣ = 2 − 2kH with H(u_a) = 1/k(u_a) (or 1
/// when k(u_a) ≤ 0), tabulated as a Pinney solution with g = 0.
pub fn bernoulli_nu(spec: &ShortRateModelSpec, u_a: f64, u_b: f64) -> Result<NuSolution> {
    let fho = gaussian_fho(spec);
    let k = fho.kappa_eff.clone();
    let edges = rate_adapted_edges(spec, &k, u_a, u_b);
    let ka = k(u_a);
    let h_a = if ka > 0.0 { 1.0 / ka } else { 1.0 };
    let e = cumulate(&edges, |_, _, u| k(u));
    let i2 = cumulate(&edges, |i, c, _| 2.0 * (2.0 * e.node[i][c]).exp());
    let big_h = |ev: f64, iv: f64| (-2.0 * ev).exp() * (h_a + iv);
    let nu = cumulate(&edges, |i, c, _| 1.0 / big_h(e.node[i][c], i2.node[i][c]));
    let nodes = (0..edges.len())
        .map(|i| {
            let u = edges[i];
            let hh = big_h(e.edge[i], i2.edge[i]);
            let h = hh.sqrt();
            Node {
                u,
                y: [h, 0.0, nu.edge[i]],
                dy: [(1.0 - k(u) * hh) / h, 0.0, 1.0 / hh],
            }
        })
        .collect();
    NuSolution::from_nodes(nodes, k)
}

fn require_linear(spec: &ShortRateModelSpec) -> Result<()> {
    if spec.rate_map != RateMap::Linear {
        return Err(Error::validation("closed forms need the linear rate map"));
    }
    Ok(())
}

/// Gaussian-model Green's function ψ_λ(b, a) in closed form.
pub fn hw_green_function(spec: &ShortRateModelSpec, a: (f64, f64), b: (f64, f64)) -> Result<f64> {
    require_linear(spec)?;
    let (u_a, u_b) = (a.0, b.0);
    if !(u_b > u_a && u_a >= 0.0) {
        return Err(Error::validation("need 0 <= u_a < u_b"));
    }
    let nu = bernoulli_nu(spec, u_a, u_b)?;
    let fho = gaussian_fho(spec);
    let k = kernel_integrals(&fho, &nu, u_a, u_b)?;
    let ea = EndPoint::at(&fho, &nu, true);
    let eb = EndPoint::at(&fho, &nu, false);
    let (xa, xb) = (ea.scale() * a.1, eb.scale() * b.1);
    let (sh, ch) = (k.sinh_scaled(), k.cosh_scaled());
    let e = (-k.delta_nu).exp();
    let coth = ch / sh;
    let (ka, ta) = (spec.kappa.value(u_a), spec.theta.value(u_a));
    let (kb, tb) = (spec.kappa.value(u_b), spec.theta.value(u_b));
    let expo = 0.5 * ((1.0 - coth) * xa * xa - (1.0 + coth) * xb * xb)
        - (ka * ta / ea.nu_dot.sqrt() * ea.mu + k.gamma_b / sh) * xa
        + (kb * tb / eb.nu_dot.sqrt() * eb.mu - (k.gamma_a - xa * e) / sh) * xb
        + k.gamma_ab / sh
        - k.w_integral;
    let ln_pref = 0.5 * ((ea.scale() * eb.scale() / (2.0 * PI)).ln() - k.delta_nu - sh.ln());
    Ok((ln_pref + expo).exp())
}

/// Gaussian-model bond exp{−λx_aG − λ∫κθG + (λ²/2)∫σ²G²}, G = G(u, u_b).
pub fn hw_zcb_closed_form(spec: &ShortRateModelSpec, u_a: f64, u_b: f64, x_a: f64) -> Result<f64> {
    require_linear(spec)?;
    if !(u_b >= u_a && u_a >= 0.0) {
        return Err(Error::validation("need 0 <= u_a <= u_b"));
    }
    if u_b == u_a {
        return Ok(1.0);
    }
    let edges = fine_edges(spec, u_a, u_b, FINE_WIDTH);
    let rule = rule8();
    let kk = cumulate(&edges, |_, _, u| spec.kappa.value(u));
    let lk = cumulate(&edges, |i, c, _| (-kk.node[i][c]).exp());
    let n = edges.len() - 1;
    let total = lk.edge[n];
    let (mut drift, mut var) = (0.0, 0.0);
    for i in 0..n {
        let du = edges[i + 1] - edges[i];
        for c in 0..8 {
            let u = edges[i] + du * rule.nodes[c];
            let g = kk.node[i][c].exp() * (total - lk.node[i][c]);
            let wt = rule.weights[c] * du;
            drift += wt * spec.kappa.value(u) * spec.theta.value(u) * g;
            var += wt * (spec.sigma.value(u) * g).powi(2);
        }
    }
    let l = spec.lambda;
    Ok((-l * x_a * total - l * drift + 0.5 * l * l * var).exp())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::{general_gaussian_density, path_integral_oracle};
    use crate::model::{func, hamiltonian_coeffs, ModelDocument, ParamCurve};
    use crate::quad::adaptive_gk;

    fn rel(a: f64, b: f64) -> f64 {
        (a - b).abs() / b.abs()
    }

    fn table1(high: bool) -> ShortRateModelSpec {
        ModelDocument::table1(high).to_spec().unwrap()
    }

    /// Linear model with three steps in each curve.
    fn stepped_linear(k: [f64; 3], t: [f64; 3], s: [f64; 3], lambda: f64) -> ShortRateModelSpec {
        let times = [0.5, 1.0, 2.0];
        let c = |v: [f64; 3]| ParamCurve::from_steps(&times, &v, 1.0 / 64.0).unwrap();
        ShortRateModelSpec::new(c(k), c(t), c(s), RateMap::Linear, 0.03, lambda).unwrap()
    }

    fn constant_linear(kappa: f64, theta: f64, sigma: f64, lambda: f64) -> ShortRateModelSpec {
        let c = ParamCurve::constant;
        ShortRateModelSpec::new(c(kappa), c(theta), c(sigma), RateMap::Linear, 0.02, lambda)
            .unwrap()
    }

    #[test]
    fn endpoint_weight_examples() {
        let spec = table1(false);
        assert_eq!(endpoint_weight(&spec, (0.0, 0.0), (1.0, 0.0)), 0.0);
        let flat = constant_linear(0.3, 0.05, 0.01, 1.0);
        assert!(endpoint_weight(&flat, (0.0, 0.7), (2.0, 0.7)).abs() < 1e-9);
        let x = 0.06f64.ln();
        let theta1 = 0.04f64.ln() + (0.06f64.ln() - 0.04f64.ln()) * (1.0 - 0.25) / 29.75;
        let kappa1 = 0.02 - 0.01 * (1.0 - 0.25) / 29.75;
        let (m0, m1) = (1.0 / 0.25, 1.0 / 0.5f64.powi(2));
        let m1 = m1 * (0.5f64 / (0.5 - 0.1 * 0.75 / 29.75)).powi(2);
        let expected = 0.5 * (m1 * kappa1 - m0 * 0.02) * x * x
            - (m1 * kappa1 * theta1 - m0 * 0.02 * 0.04f64.ln()) * x;
        assert!(rel(endpoint_weight(&spec, (0.0, x), (1.0, x)), expected) < 1e-12);
    }

    #[test]
    fn normalisation_coefficient_matches_terminal_integral() {
        let spec = table1(true);
        let solver = short_rate_solver(&spec, 0.0, 1.0, &PricingOptions::default()).unwrap();
        let xa = spec.x0 - solver.shift;
        for x_bar in [-0.3, 0.0, 0.2] {
            let p = solver.gtfk.solve(x_bar).unwrap();
            let pc = pricing_coeffs(
                &p.state,
                &p.params,
                &p.nu,
                &p.integrals,
                &solver.frame,
                x_bar,
                xa,
            )
            .unwrap();
            assert!(pc.a > 0.0);
            let (m, v) = pc.terminal_law();
            let f = |xb: f64| {
                let w = endpoint_weight(&solver.frame, (0.0, xa), (1.0, xb));
                (log_reduced_density(&p.state, &p.params, &p.nu, &p.integrals, xa, xb).unwrap() - w)
                    .exp()
            };
            let sd = v.sqrt();
            let (num, _) = adaptive_gk(f, m - 14.0 * sd, m + 14.0 * sd, 0.0, 1e-12);
            assert!(rel(pc.n(), num) < 1e-8, "x̄={x_bar}: {} {num}", pc.n());
        }
    }

    #[test]
    fn smoothed_payoffs_match_quadrature() {
        for map in [RateMap::Exponential, RateMap::Linear] {
            for (m, v) in [(-2.8, 0.04), (0.03, 1e-4), (-3.1, 0.3)] {
                for k in [0.02, 0.05, 0.08] {
                    let call = Payoff::Call(k).smoothed(map, m, v);
                    let put = Payoff::Put(k).smoothed(map, m, v);
                    let sd = v.sqrt();
                    let (c, _) = adaptive_gk(
                        |x| (map.rate(x) - k).max(0.0) * normal_pdf((x - m) / sd) / sd,
                        m - 12.0 * sd,
                        m + 12.0 * sd,
                        1e-15,
                        1e-12,
                    );
                    let (p, _) = adaptive_gk(
                        |x| (k - map.rate(x)).max(0.0) * normal_pdf((x - m) / sd) / sd,
                        m - 12.0 * sd,
                        m + 12.0 * sd,
                        1e-15,
                        1e-12,
                    );
                    assert!(
                        (call - c).abs() < 1e-10 && (put - p).abs() < 1e-10,
                        "{map:?} {m} {v} {k}"
                    );
                }
            }
        }
        let custom = Payoff::Custom(func(|x| x * x));
        assert!((custom.smoothed(RateMap::Linear, 0.5, 0.2) - 0.45).abs() < 1e-12);
        assert_eq!(
            Payoff::UnitBond.smoothed(RateMap::Exponential, 1.0, 4.0),
            1.0
        );
    }

    #[test]
    fn state_moments_of_ornstein_uhlenbeck() {
        let (k, th, s, t, x) = (0.7, 0.05, 0.02, 3.0, 0.01);
        let mom = state_moments(&constant_linear(k, th, s, 1.0), 0.0, t, x);
        let e = (-k * t).exp();
        assert!(rel(mom.terminal_mean, th + (x - th) * e) < 1e-12);
        assert!(rel(mom.terminal_sd, (s * s * (1.0 - e * e) / (2.0 * k)).sqrt()) < 1e-12);
        assert!(rel(mom.average_mean, th + (x - th) * (1.0 - e) / (k * t)) < 1e-12);
    }

    #[test]
    fn unit_payoff_without_discount_is_one() {
        let bk = table1(true).with_lambda(0.0);
        assert!((price_zcb_gtfk(&bk, 0.0, 1.0, bk.x0).unwrap().value - 1.0).abs() < 1e-6);
        let lin = stepped_linear(
            [0.3, 0.1, 0.5],
            [0.02, 0.05, 0.04],
            [0.01, 0.02, 0.015],
            0.0,
        );
        assert!((price_zcb_gtfk(&lin, 0.0, 2.5, lin.x0).unwrap().value - 1.0).abs() < 1e-6);
    }

    fn ou_density(k: f64, th: f64, s: f64, t: f64, xa: f64, xb: f64) -> f64 {
        let mean = th + (xa - th) * (-k * t).exp();
        let var = s * s * (1.0 - (-2.0 * k * t).exp()) / (2.0 * k);
        (-(xb - mean).powi(2) / (2.0 * var)).exp() / (2.0 * PI * var).sqrt()
    }

    #[test]
    fn green_function_is_the_ou_density() {
        let (k, th, s, t) = (0.4, 0.05, 0.015, 2.0);
        let spec = constant_linear(k, th, s, 0.0);
        for xb in [0.0, 0.03, 0.045, 0.07] {
            let g = hw_green_function(&spec, (0.0, 0.02), (t, xb)).unwrap();
            assert!(rel(g, ou_density(k, th, s, t, 0.02, xb)) < 1e-9, "{xb}");
        }
        let (total, _) = adaptive_gk(
            |xb| hw_green_function(&spec, (0.0, 0.02), (t, xb)).unwrap(),
            -0.2,
            0.3,
            0.0,
            1e-12,
        );
        assert!((total - 1.0).abs() < 1e-9);
    }

    #[test]
    fn green_function_matches_general_gaussian_oracle() {
        let spec = stepped_linear(
            [0.3, 0.1, 0.5],
            [0.02, 0.05, 0.04],
            [0.01, 0.02, 0.015],
            0.7,
        );
        let q = hamiltonian_coeffs(&spec);
        for (ua, ub, xa, xb) in [
            (0.0, 1.5, 0.03, 0.04),
            (0.2, 2.5, 0.01, 0.06),
            (0.0, 0.3, 0.03, 0.028),
        ] {
            let g = hw_green_function(&spec, (ua, xa), (ub, xb)).unwrap();
            let o = general_gaussian_density(&q, (ua, xa), (ub, xb)).unwrap();
            assert!(rel(g, o) < 1e-8, "{g} {o}");
        }
        assert!(hw_green_function(&table1(false), (0.0, 0.0), (1.0, 0.0)).is_err());
    }

    #[test]
    fn closed_form_bond_examples() {
        let spec = stepped_linear(
            [0.3, 0.1, 0.5],
            [0.02, 0.05, 0.04],
            [0.01, 0.02, 0.015],
            0.0,
        );
        assert_eq!(hw_zcb_closed_form(&spec, 0.0, 3.0, 0.03).unwrap(), 1.0);
        let frozen = constant_linear(0.0, 0.04, 1e-9, 1.0);
        assert!(
            rel(
                hw_zcb_closed_form(&frozen, 0.0, 4.0, 0.04).unwrap(),
                (-0.16f64).exp()
            ) < 1e-14
        );
        let (total, _) = adaptive_gk(
            |xb| hw_green_function(&spec.with_lambda(1.0), (0.0, 0.03), (3.0, xb)).unwrap(),
            -0.3,
            0.4,
            0.0,
            1e-12,
        );
        assert!(
            rel(
                total,
                hw_zcb_closed_form(&spec.with_lambda(1.0), 0.0, 3.0, 0.03).unwrap()
            ) < 1e-9
        );
        assert!(hw_zcb_closed_form(&table1(false), 0.0, 1.0, -2.8).is_err());
    }

    #[test]
    fn gtfk_is_exact_for_the_gaussian_model() {
        let spec = stepped_linear(
            [0.3, 0.1, 0.5],
            [0.02, 0.05, 0.04],
            [0.01, 0.02, 0.015],
            1.0,
        );
        let p = price_zcb_gtfk(&spec, 0.0, 3.0, 0.03).unwrap();
        let z = hw_zcb_closed_form(&spec, 0.0, 3.0, 0.03).unwrap();
        assert!(rel(p.value, z) < 1e-7, "{} {z}", p.value);
        assert!(p.abs_error_estimate >= 0.0 && p.non_converged_abscissae == 0);
        for xb in [0.0, 0.04, 0.07] {
            let g = ad_density_gtfk(&spec, 0.0, 3.0, 0.03, xb).unwrap();
            let e = hw_green_function(&spec, (0.0, 0.03), (3.0, xb)).unwrap();
            assert!(rel(g, e) < 1e-7, "{xb}: {g} {e}");
        }
    }

    #[test]
    fn noiseless_limit_is_the_deterministic_bond() {
        let mut doc = ModelDocument::table1(false);
        doc.sigma.low *= 1e-6;
        doc.sigma.high *= 1e-6;
        let spec = doc.to_spec().unwrap();
        let t = 1.0;
        let n = 20_000;
        let h = t / n as f64;
        let drift = |u: f64, x: f64| spec.kappa.value(u) * (spec.theta.value(u) - x);
        let (mut x, mut integral) = (spec.x0, 0.0);
        for i in 0..n {
            let u = i as f64 * h;
            let k1 = drift(u, x);
            let k2 = drift(u + 0.5 * h, x + 0.5 * h * k1);
            let k3 = drift(u + 0.5 * h, x + 0.5 * h * k2);
            let k4 = drift(u + h, x + h * k3);
            let r0 = x.exp();
            x += h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
            integral += 0.5 * h * (r0 + x.exp());
        }
        let p = price_zcb_gtfk(&spec, 0.0, t, spec.x0).unwrap();
        assert!(
            (p.value - (-integral).exp()).abs() < 1e-5,
            "{} {}",
            p.value,
            (-integral).exp()
        );
    }

    #[test]
    fn short_horizon_bk_density_matches_time_slicing() {
        let spec = table1(false);
        let q = hamiltonian_coeffs(&spec);
        let kin = q.clone();
        let lam = spec.lambda;
        let h = move |x: f64, v: f64, u: f64| q.hamiltonian(x, v, u) + lam * x.exp();
        let kinetic = move |u: f64| (kin.a)(u);
        let (t, xa) = (0.1, spec.x0);
        let grid: Vec<f64> = (0..400)
            .map(|i| xa - 1.5 + 3.0 * i as f64 / 399.0)
            .collect();
        for xb in [xa - 0.2, xa + 0.15] {
            let coarse = path_integral_oracle(&h, &kinetic, (0.0, xa), (t, xb), 32, &grid).unwrap();
            let fine = path_integral_oracle(&h, &kinetic, (0.0, xa), (t, xb), 64, &grid).unwrap();
            let g = ad_density_gtfk(&spec, 0.0, t, xa, xb).unwrap();
            assert!(rel(g, 2.0 * fine - coarse) < 1e-3, "{g} {fine}");
        }
    }

    #[test]
    fn outer_quadrature_examples() {
        let opts = LineOptions {
            abs_tol: 0.0,
            rel_tol: 1e-10,
            max_panels: 1000,
        };
        let r = outer_quadrature(
            |xs| Ok(xs.iter().map(|&x| normal_pdf(x)).collect()),
            0.3,
            0.5,
            &opts,
        )
        .unwrap();
        assert!((r.value - 1.0).abs() < 1e-10 && r.error >= 0.0);

        // ln N(x̄) is exactly quadratic for the Gaussian model
        let spec = stepped_linear(
            [0.3, 0.1, 0.5],
            [0.02, 0.05, 0.04],
            [0.01, 0.02, 0.015],
            1.0,
        );
        let solver = short_rate_solver(&spec, 0.0, 2.5, &PricingOptions::default()).unwrap();
        let xa = spec.x0 - solver.shift;
        let log_n = |x: f64| {
            let p = solver.gtfk.solve(x).unwrap();
            pricing_coeffs(
                &p.state,
                &p.params,
                &p.nu,
                &p.integrals,
                &solver.frame,
                x,
                xa,
            )
            .unwrap()
            .log_n
        };
        let hstep = 0.01;
        let (l0, lp, lm) = (log_n(0.0), log_n(hstep), log_n(-hstep));
        let curv = -(lp - 2.0 * l0 + lm) / (2.0 * hstep * hstep);
        let slope = (lp - lm) / (2.0 * hstep);
        let exact = (PI / curv).sqrt() * (l0 + slope * slope / (4.0 * curv)).exp();
        let r = outer_quadrature(
            |xs| Ok(xs.iter().map(|&x| log_n(x).exp()).collect()),
            slope / (2.0 * curv),
            (0.5 / curv).sqrt(),
            &opts,
        )
        .unwrap();
        assert!(rel(r.value, exact) < 1e-9, "{} {exact}", r.value);
    }

    #[test]
    fn tighter_tolerance_costs_at_most_twice_the_abscissae() {
        let spec = table1(false);
        let base = PricingOptions::default();
        let tight = PricingOptions {
            line: LineOptions {
                rel_tol: 0.5 * base.line.rel_tol,
                ..base.line
            },
            ..base
        };
        let a =
            price_european_gtfk_with(&spec, &Payoff::UnitBond, 0.0, 1.0, spec.x0, &base).unwrap();
        let b =
            price_european_gtfk_with(&spec, &Payoff::UnitBond, 0.0, 1.0, spec.x0, &tight).unwrap();
        assert!(
            b.abscissae_used <= 2 * a.abscissae_used,
            "{} {}",
            a.abscissae_used,
            b.abscissae_used
        );
    }

    #[test]
    fn put_call_parity_under_the_density() {
        let spec = table1(false);
        let opts = PricingOptions::default();
        let solver = short_rate_solver(&spec, 0.0, 0.5, &opts).unwrap();
        let k = 0.06;
        let price = |p: &Payoff| price_with_solver(&solver, p, spec.x0, &opts).unwrap().value;
        let call = price(&Payoff::Call(k));
        let put = price(&Payoff::Put(k));
        let fwd = price(&Payoff::Custom(func(f64::exp)));
        let bond = price(&Payoff::UnitBond);
        assert!(call > 0.0 && put > 0.0);
        assert!((call - put - (fwd - k * bond)).abs() < 1e-9);
    }

    #[test]
    fn short_horizon_yield_is_the_spot_rate() {
        for spec in [
            table1(false),
            table1(true),
            stepped_linear(
                [0.3, 0.1, 0.5],
                [0.02, 0.05, 0.04],
                [0.01, 0.02, 0.015],
                1.0,
            ),
        ] {
            let t = 1e-3;
            let z = price_zcb_gtfk(&spec, 0.0, t, spec.x0).unwrap().value;
            assert!((-z.ln() / t - spec.rate(spec.x0)).abs() < 1e-4);
        }
    }

    #[test]
    fn shifted_frame_keeps_diagnostics_in_original_units() {
        let spec = table1(false);
        let solver = short_rate_solver(&spec, 0.0, 0.25, &PricingOptions::default()).unwrap();
        solver.gtfk.solve(0.1).unwrap();
        let mut buf = Vec::new();
        solver.write_diagnostics_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let x: f64 = text
            .lines()
            .nth(1)
            .unwrap()
            .split(',')
            .next()
            .unwrap()
            .parse()
            .unwrap();
        assert!((x - (spec.x0 + 0.1)).abs() < 1e-15);
    }
}
