//! Self-consistent Gaussian smearing (GTFK) of a time-dependent potential
//! around the path average x̄.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::io::Write;
use std::sync::{Arc, Mutex, OnceLock};

use serde::Serialize;

use crate::error::{Error, Result};
use crate::kernels::{
    fho_density_matrix, kernel_integrals, Bundle, EndPoint, FhoParams, KernelIntegrals,
};
use crate::model::{func, Func, QuadraticCoeffs, RateMap, ShortRateModelSpec};
use crate::ode::NuSolution;
use crate::par::{self, Execution};
use crate::quad::{integrate_line, normal_expectation, LineOptions};

const HERMITE_POINTS: usize = 48;

/// A potential with first and second x-derivatives.
pub trait Potential {
    /// (V, V′, V″) at x.
    fn derivatives(&self, x: f64) -> [f64; 3];

    /// Gaussian moments in closed form, when available.
    fn smeared_exact(&self, _center: f64, _alpha: f64) -> Option<[f64; 3]> {
        None
    }
}

/// c2·x² + c1·x + c0 + ce·eˣ.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct QuadExpPotential {
    pub c2: f64,
    pub c1: f64,
    pub c0: f64,
    pub ce: f64,
}

impl Potential for QuadExpPotential {
    fn derivatives(&self, x: f64) -> [f64; 3] {
        let e = if self.ce == 0.0 {
            0.0
        } else {
            self.ce * x.exp()
        };
        [
            self.c2 * x * x + self.c1 * x + self.c0 + e,
            2.0 * self.c2 * x + self.c1 + e,
            2.0 * self.c2 + e,
        ]
    }

    fn smeared_exact(&self, c: f64, alpha: f64) -> Option<[f64; 3]> {
        let e = if self.ce == 0.0 {
            0.0
        } else {
            self.ce * (c + 0.5 * alpha).exp()
        };
        Some([
            self.c2 * (c * c + alpha) + self.c1 * c + self.c0 + e,
            2.0 * self.c2 * c + self.c1 + e,
            2.0 * self.c2 + e,
        ])
    }
}

/// Potential given only pointwise; smeared by Gauss-Hermite.
pub struct FnPotential<F>(pub F);

impl<F: Fn(f64) -> [f64; 3]> Potential for FnPotential<F> {
    fn derivatives(&self, x: f64) -> [f64; 3] {
        (self.0)(x)
    }
}

/// ⟨⟨V⟩⟩, ⟨⟨V′⟩⟩, ⟨⟨V″⟩⟩ under a normal law with mean `center` and
/// variance `alpha`.
pub fn gaussian_smeared(v: &dyn Potential, center: f64, alpha: f64) -> Result<[f64; 3]> {
    if !(alpha >= 0.0) {
        return Err(Error::validation(format!(
            "smearing variance must be non-negative, got {alpha}"
        )));
    }
    if alpha == 0.0 {
        return Ok(v.derivatives(center));
    }
    if let Some(m) = v.smeared_exact(center, alpha) {
        return Ok(m);
    }
    let mut out = [0.0; 3];
    for (k, o) in out.iter_mut().enumerate() {
        *o = normal_expectation(center, alpha, HERMITE_POINTS, |x| v.derivatives(x)[k]);
    }
    Ok(out)
}

/// Trial curves ω²(u; x̄), γ(u; x̄), w(u; x̄) of V₀ = mω²x′²/2 + γx′ + w.
#[derive(Clone)]
pub struct TrialPotentialParams {
    pub omega_sq_trial: Func,
    pub gamma_trial: Func,
    pub w_trial: Func,
    /// λ·exp(x̄ − δγ + α/2).
    pub lambda_eff: f64,
}

impl std::fmt::Debug for TrialPotentialParams {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("TrialPotentialParams")
            .field("lambda_eff", &self.lambda_eff)
            .finish_non_exhaustive()
    }
}

/// Potential V(x, u) = m(u)ω²(u)x²/2 + γ(u)x + w(u) + λ·eˣ with mass
/// m = μ², together with the Pinney split of its quadratic part.
#[derive(Clone)]
pub struct GtfkProblem {
    pub mu: Func,
    pub mu_dot: Func,
    pub omega_sq: Func,
    pub gamma: Func,
    pub w: Func,
    pub kappa_eff: Func,
    /// Riccati forcing q of the quadratic part; the trial adds λ_eff/m.
    pub forcing: Func,
    pub exp_coeff: f64,
    pub hbar: f64,
    pub knots: Vec<f64>,
    /// Optional fused evaluation of [μ, ω², γ, w].
    pub base: Option<BaseSampler>,
}

pub type BaseSampler = Arc<dyn Fn(f64) -> [f64; 4] + Send + Sync>;

impl std::fmt::Debug for GtfkProblem {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("GtfkProblem")
            .field("exp_coeff", &self.exp_coeff)
            .field("hbar", &self.hbar)
            .field("knots", &self.knots.len())
            .finish_non_exhaustive()
    }
}

impl GtfkProblem {
    /// Path-integral potential of a short-rate model (end-point factor
    /// excluded), split with k = κ + σ̇/σ.
    pub fn short_rate(spec: &ShortRateModelSpec) -> Self {
        let s = Arc::new(spec.clone());
        let f = |g: fn(&ShortRateModelSpec, f64) -> f64| -> Func {
            let s = Arc::clone(&s);
            Arc::new(move |u| g(&s, u))
        };
        GtfkProblem {
            mu: f(|s, u| 1.0 / s.sigma.value(u)),
            mu_dot: f(|s, u| {
                let [v, d, _] = s.sigma.eval_all(u);
                -d / (v * v)
            }),
            omega_sq: f(|s, u| s.omega_sq(u)),
            gamma: f(|s, u| s.gamma(u)),
            w: f(|s, u| s.w(u)),
            kappa_eff: f(|s, u| {
                let [v, d, _] = s.sigma.eval_all(u);
                s.kappa.value(u) + d / v
            }),
            forcing: func(|_| 0.0),
            exp_coeff: match spec.rate_map {
                RateMap::Exponential => spec.lambda,
                RateMap::Linear => 0.0,
            },
            hbar: 1.0,
            knots: spec.all_knots(),
            base: Some(Arc::new(move |u| s.quadratic_sample(u))),
        }
    }

    /// FHO part of a general quadratic Hamiltonian.
    pub fn quadratic(coeffs: &QuadraticCoeffs) -> Self {
        GtfkProblem::from_fho(&FhoParams::from_quadratic(coeffs))
    }

    pub fn from_fho(p: &FhoParams) -> Self {
        GtfkProblem {
            mu: p.mu.clone(),
            mu_dot: p.mu_dot.clone(),
            omega_sq: p.omega_sq.clone(),
            gamma: p.gamma.clone(),
            w: p.w.clone(),
            kappa_eff: p.kappa_eff.clone(),
            forcing: p.forcing.clone(),
            exp_coeff: 0.0,
            hbar: p.hbar,
            knots: p.knots.clone(),
            base: None,
        }
    }

    pub fn m(&self, u: f64) -> f64 {
        let mu = (self.mu)(u);
        mu * mu
    }

    pub fn potential_at(&self, u: f64) -> QuadExpPotential {
        QuadExpPotential {
            c2: 0.5 * self.m(u) * (self.omega_sq)(u),
            c1: (self.gamma)(u),
            c0: (self.w)(u),
            ce: self.exp_coeff,
        }
    }

    /// True when the trial oscillator does not depend on (α, δγ).
    pub fn is_quadratic(&self) -> bool {
        self.exp_coeff == 0.0
    }

    /// Trial potential matching the smeared value, slope and curvature of V
    /// at x̄ − δγ, and the FHO parameters it defines in x′ = x − x̄.
    pub fn trial(
        &self,
        x_bar: f64,
        alpha: f64,
        delta_gamma: f64,
    ) -> (TrialPotentialParams, FhoParams) {
        self.trial_with(self.exp_coeff, x_bar, alpha, delta_gamma)
    }

    fn trial_with(
        &self,
        lambda: f64,
        x_bar: f64,
        alpha: f64,
        dg: f64,
    ) -> (TrialPotentialParams, FhoParams) {
        let lam = if lambda == 0.0 {
            0.0
        } else {
            lambda * (x_bar - dg + 0.5 * alpha).exp()
        };
        let c = x_bar - dg;
        let (mu1, mu2, mu3, mu4) = (
            self.mu.clone(),
            self.mu.clone(),
            self.mu.clone(),
            self.mu.clone(),
        );
        let (om1, om2) = (self.omega_sq.clone(), self.omega_sq.clone());
        let (ga1, ga2) = (self.gamma.clone(), self.gamma.clone());
        let w = self.w.clone();
        let om3 = self.omega_sq.clone();
        let q = self.forcing.clone();
        let omega_t: Func = Arc::new(move |u| {
            let mu = mu1(u);
            om1(u) + lam / (mu * mu)
        });
        let gamma_t: Func = Arc::new(move |u| {
            let mu = mu2(u);
            mu * mu * om2(u) * x_bar + ga1(u) + lam * (1.0 + dg)
        });
        let g3 = gamma_t.clone();
        let w_t: Func = Arc::new(move |u| {
            let mu = mu3(u);
            let m = mu * mu;
            let om = om3(u);
            let om_t = om + lam / m;
            0.5 * m * om * c * c + ga2(u) * c + w(u) + lam * (1.0 - 0.5 * alpha)
                - 0.5 * m * om_t * dg * dg
                + g3(u) * dg
        });
        let forcing: Func = if lam == 0.0 {
            q
        } else {
            Arc::new(move |u| {
                let mu = mu4(u);
                q(u) + lam / (mu * mu)
            })
        };
        let fho = FhoParams {
            mu: self.mu.clone(),
            mu_dot: self.mu_dot.clone(),
            omega_sq: omega_t.clone(),
            gamma: gamma_t.clone(),
            w: w_t.clone(),
            kappa_eff: self.kappa_eff.clone(),
            forcing,
            hbar: self.hbar,
            knots: self.knots.clone(),
            bundle: self.base.clone().map(|b| -> Bundle {
                Arc::new(move |u| {
                    let [mu, om, ga, w] = b(u);
                    let m = mu * mu;
                    let om_t = om + lam / m;
                    let g_t = m * om * x_bar + ga + lam * (1.0 + dg);
                    let w_t = 0.5 * m * om * c * c + ga * c + w + lam * (1.0 - 0.5 * alpha)
                        - 0.5 * m * om_t * dg * dg
                        + g_t * dg;
                    [mu, g_t, w_t]
                })
            }),
        };
        (
            TrialPotentialParams {
                omega_sq_trial: omega_t,
                gamma_trial: gamma_t,
                w_trial: w_t,
                lambda_eff: lam,
            },
            fho,
        )
    }
}

/// Trial parameters of the Black-Karasinski potential at (x̄, α, δγ).
pub fn bk_trial_params(
    spec: &ShortRateModelSpec,
    x_bar: f64,
    alpha: f64,
    delta_gamma: f64,
) -> Result<TrialPotentialParams> {
    if spec.rate_map != RateMap::Exponential {
        return Err(Error::validation(
            "trial parameters of this form need the exponential rate map",
        ));
    }
    Ok(GtfkProblem::short_rate(spec)
        .trial(x_bar, alpha, delta_gamma)
        .0)
}

/// Curvature C and slope D of the diagonal reduced density in x′.
pub fn cd_constants(
    params: &FhoParams,
    nu: &NuSolution,
    k: &KernelIntegrals,
    u_a: f64,
    u_b: f64,
) -> Result<(f64, f64)> {
    check_interval(nu, u_a, u_b)?;
    if !(k.delta_nu > 0.0) {
        return Err(Error::numerical("sinh(ν_b − ν_a) vanishes"));
    }
    let ea = EndPoint::at(params, nu, true);
    let eb = EndPoint::at(params, nu, false);
    let (sa, sb) = (ea.scale(), eb.scale());
    let (sh, ch) = (k.sinh_scaled(), k.cosh_scaled());
    let e = (-k.delta_nu).exp();
    let hbar = params.hbar;
    let om = sb * k.omega_a + sa * k.omega_b;
    let c = -0.5 / hbar * (eb.boundary * sb * sb - ea.boundary * sa * sa)
        + 0.5 / (hbar * sh)
            * ((sb * sb + sa * sa) * ch - 2.0 * sa * sb * e + om * om / (2.0 * k.omega_ab));
    let d =
        (sb * k.gamma_a + sa * k.gamma_b - (k.i1 + k.i2) * om / (2.0 * k.omega_ab)) / (hbar * sh);
    Ok((c, d))
}

fn check_interval(nu: &NuSolution, u_a: f64, u_b: f64) -> Result<()> {
    let tol = 1e-12 * (1.0 + u_b.abs());
    if (nu.u_a() - u_a).abs() > tol || (nu.u_b() - u_b).abs() > tol {
        return Err(Error::validation(
            "Pinney solution does not cover the requested interval",
        ));
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct SelfConsistentState {
    pub x_bar: f64,
    pub c: f64,
    pub d: f64,
    pub alpha: f64,
    pub delta_gamma: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Max-norm displacement of (C, D) on the last map application.
    pub residual: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SolveOptions {
    /// Fixed-point tolerance, relative to max(1, |C|).
    pub tol: f64,
    pub max_iter: usize,
    pub ode_rel_tol: f64,
    pub ode_abs_tol: f64,
}

impl Default for SolveOptions {
    fn default() -> Self {
        SolveOptions {
            tol: 1e-10,
            max_iter: 60,
            ode_rel_tol: 5e-12,
            ode_abs_tol: 5e-14,
        }
    }
}

/// Everything produced by the final pass of a self-consistent solve.
#[derive(Clone, Debug)]
pub struct SolvedPoint {
    pub state: SelfConsistentState,
    pub nu: NuSolution,
    pub params: FhoParams,
    pub trial: TrialPotentialParams,
    pub integrals: KernelIntegrals,
}

struct Pass {
    trial: TrialPotentialParams,
    params: FhoParams,
    nu: NuSolution,
    integrals: KernelIntegrals,
    cd: (f64, f64),
}

fn run_pass(
    problem: &GtfkProblem,
    lambda: f64,
    x_bar: f64,
    alpha: f64,
    dg: f64,
    u_a: f64,
    u_b: f64,
    opts: &SolveOptions,
    fixed_nu: Option<&NuSolution>,
) -> Result<Pass> {
    let (trial, params) = problem.trial_with(lambda, x_bar, alpha, dg);
    let nu = match fixed_nu {
        Some(n) => n.clone(),
        None => params.solve_nu(u_a, u_b, opts.ode_rel_tol, opts.ode_abs_tol)?,
    };
    let integrals = kernel_integrals(&params, &nu, u_a, u_b)?;
    let cd = cd_constants(&params, &nu, &integrals, u_a, u_b)?;
    Ok(Pass {
        trial,
        params,
        nu,
        integrals,
        cd,
    })
}

/// (C, D) of the λ = 0 trial, the default starting point.
pub fn lambda_zero_seed(
    problem: &GtfkProblem,
    x_bar: f64,
    u_a: f64,
    u_b: f64,
    opts: &SolveOptions,
) -> Result<(f64, f64)> {
    Ok(run_pass(problem, 0.0, x_bar, 0.0, 0.0, u_a, u_b, opts, None)?.cd)
}

/// Fixed point of (C, D) → (α, δγ) → trial → Pinney → integrals → (C, D).
pub fn self_consistent_solve(
    problem: &GtfkProblem,
    x_bar: f64,
    u_a: f64,
    u_b: f64,
    seed: Option<(f64, f64)>,
    opts: &SolveOptions,
) -> Result<SolvedPoint> {
    solve_point(problem, x_bar, u_a, u_b, seed, opts, None)
}

fn finish(
    x_bar: f64,
    z: (f64, f64),
    it: usize,
    converged: bool,
    residual: f64,
    p: Pass,
) -> SolvedPoint {
    SolvedPoint {
        state: SelfConsistentState {
            x_bar,
            c: z.0,
            d: z.1,
            alpha: 0.5 / z.0,
            delta_gamma: 0.5 * z.1 / z.0,
            iterations: it,
            converged,
            residual,
        },
        nu: p.nu,
        params: p.params,
        trial: p.trial,
        integrals: p.integrals,
    }
}

fn solve_point(
    problem: &GtfkProblem,
    x_bar: f64,
    u_a: f64,
    u_b: f64,
    seed: Option<(f64, f64)>,
    opts: &SolveOptions,
    fixed_nu: Option<&NuSolution>,
) -> Result<SolvedPoint> {
    if !(opts.tol > 0.0) || opts.max_iter == 0 {
        return Err(Error::validation(
            "fixed-point tolerance and iteration budget must be positive",
        ));
    }
    if !(u_b > u_a) {
        return Err(Error::validation("need u_b > u_a"));
    }
    if problem.is_quadratic() {
        let p = run_pass(problem, 0.0, x_bar, 0.0, 0.0, u_a, u_b, opts, fixed_nu)?;
        let z = p.cd;
        return Ok(finish(x_bar, z, 1, true, 0.0, p));
    }
    let mut z = match seed {
        Some(s) => s,
        None => lambda_zero_seed(problem, x_bar, u_a, u_b, opts)?,
    };
    let mut prev_res = f64::INFINITY;
    // Broyden inverse Jacobian of F(z) = G(z) − z; −I is plain iteration
    let mut h = [[-1.0, 0.0], [0.0, -1.0]];
    let mut damping = 1.0;
    let mut last: Option<((f64, f64), [f64; 2])> = None;
    let mut out = None;
    for it in 1..=opts.max_iter {
        if !(z.0 > 0.0 && z.0.is_finite() && z.1.is_finite()) {
            return Err(Error::numerical(format!(
                "fixed point left the domain C > 0 at x̄ = {x_bar}: C = {}",
                z.0
            )));
        }
        let p = run_pass(
            problem,
            problem.exp_coeff,
            x_bar,
            0.5 / z.0,
            0.5 * z.1 / z.0,
            u_a,
            u_b,
            opts,
            None,
        )?;
        let f = [p.cd.0 - z.0, p.cd.1 - z.1];
        let res = f[0].abs().max(f[1].abs());
        if res < opts.tol * z.0.abs().max(1.0) {
            return Ok(finish(x_bar, z, it, true, res, p));
        }
        if res > prev_res {
            damping *= 0.5;
            h = [[-damping, 0.0], [0.0, -damping]];
        } else if let Some((zp, fp)) = last {
            let s = [z.0 - zp.0, z.1 - zp.1];
            let y = [f[0] - fp[0], f[1] - fp[1]];
            let hy = [
                h[0][0] * y[0] + h[0][1] * y[1],
                h[1][0] * y[0] + h[1][1] * y[1],
            ];
            let sth = [
                s[0] * h[0][0] + s[1] * h[1][0],
                s[0] * h[0][1] + s[1] * h[1][1],
            ];
            let den = s[0] * hy[0] + s[1] * hy[1];
            if den.abs() > 1e-300 {
                for r in 0..2 {
                    for c in 0..2 {
                        h[r][c] += (s[r] - hy[r]) * sth[c] / den;
                    }
                }
            }
        }
        prev_res = res;
        last = Some((z, f));
        z = (
            z.0 - (h[0][0] * f[0] + h[0][1] * f[1]),
            z.1 - (h[1][0] * f[0] + h[1][1] * f[1]),
        );
        out = Some((it, res, p, last.unwrap().0));
    }
    let (it, res, p, zl) = out.unwrap();
    Ok(finish(x_bar, zl, it, false, res, p))
}

/// Off-diagonal reduced density ρ̄₀(b, a; x̄) of the trial oscillator.
pub fn reduced_density_matrix(
    state: &SelfConsistentState,
    params: &FhoParams,
    nu: &NuSolution,
    integrals: &KernelIntegrals,
    x_a: f64,
    x_b: f64,
) -> Result<f64> {
    Ok(log_reduced_density(state, params, nu, integrals, x_a, x_b)?.exp())
}

pub fn log_reduced_density(
    state: &SelfConsistentState,
    params: &FhoParams,
    nu: &NuSolution,
    k: &KernelIntegrals,
    x_a: f64,
    x_b: f64,
) -> Result<f64> {
    if !(k.omega_ab > 0.0) {
        return Err(Error::numerical(format!(
            "non-positive Omega_ab = {}",
            k.omega_ab
        )));
    }
    let ea = EndPoint::at(params, nu, true);
    let eb = EndPoint::at(params, nu, false);
    let (sa, sb) = (ea.scale(), eb.scale());
    let xta = sa * (x_a - state.x_bar);
    let xtb = sb * (x_b - state.x_bar);
    let (sh, ch) = (k.sinh_scaled(), k.cosh_scaled());
    let e = (-k.delta_nu).exp();
    let hbar = params.hbar;
    let t = nu.u_b() - nu.u_a();
    let p = xtb * k.omega_a + xta * k.omega_b - (k.i1 + k.i2);
    let bracket = ((xtb * xtb + xta * xta) * ch - 2.0 * xtb * xta * e
        + 2.0 * xtb * k.gamma_a
        + 2.0 * xta * k.gamma_b
        - 2.0 * k.gamma_ab
        + p * p / (2.0 * k.omega_ab))
        / sh;
    Ok((t / (2.0 * PI * hbar)).ln()
        + 0.5 * ((0.5 * sa * sb).ln() - k.omega_ab.ln() - k.delta_nu)
        + 0.5 / hbar * (eb.boundary * xtb * xtb - ea.boundary * xta * xta)
        - 0.5 / hbar * bracket
        - k.w_integral / hbar)
}

/// Diagonal ρ̄₀(x, x; x̄) in its Gaussian form; α and δγ are taken from
/// the (C, D) of the supplied pass.
pub fn reduced_density_diagonal(
    state: &SelfConsistentState,
    params: &FhoParams,
    nu: &NuSolution,
    k: &KernelIntegrals,
    x: f64,
) -> Result<f64> {
    let (c, d) = cd_constants(params, nu, k, nu.u_a(), nu.u_b())?;
    if !(c > 0.0) {
        return Err(Error::numerical("diagonal curvature C must be positive"));
    }
    let alpha = 0.5 / c;
    let dg = 0.5 * d / c;
    let ea = EndPoint::at(params, nu, true);
    let eb = EndPoint::at(params, nu, false);
    let hbar = params.hbar;
    let t = nu.u_b() - nu.u_a();
    let isum = k.i1 + k.i2;
    let xp = x - state.x_bar;
    let log = (t / hbar).ln()
        + 0.5
            * ((alpha * ea.scale() * eb.scale() / (4.0 * PI)).ln() - k.omega_ab.ln() - k.delta_nu)
        + (k.gamma_ab - isum * isum / (4.0 * k.omega_ab)) / (hbar * k.sinh_scaled())
        + dg * dg / (2.0 * alpha)
        - k.w_integral / hbar
        - 0.5 * (2.0 * PI * alpha).ln()
        - (xp + dg) * (xp + dg) / (2.0 * alpha);
    Ok(log.exp())
}

/// Memoised self-consistent solves for one problem and interval.
///
/// Each solve starts from the (C, D) of the nearest x̄ solved before the
/// current batch, or from the λ = 0 pass when none exists, so results do not
/// depend on the execution mode.
pub struct GtfkSolver {
    pub problem: GtfkProblem,
    pub u_a: f64,
    pub u_b: f64,
    pub opts: SolveOptions,
    pub exec: Execution,
    cache: Mutex<BTreeMap<i64, Arc<SolvedPoint>>>,
    fixed_nu: OnceLock<NuSolution>,
}

fn key(x: f64) -> i64 {
    let b = x.to_bits() as i64;
    b ^ (((b >> 63) as u64) >> 1) as i64
}

/// Abscissae are solved sequentially in chunks of this size; chunks run in
/// parallel.
const CHUNK: usize = 15;

impl GtfkSolver {
    pub fn new(problem: GtfkProblem, u_a: f64, u_b: f64, opts: SolveOptions) -> Result<Self> {
        if !(u_b > u_a) {
            return Err(Error::validation("need u_b > u_a"));
        }
        Ok(GtfkSolver {
            problem,
            u_a,
            u_b,
            opts,
            exec: Execution::default(),
            cache: Mutex::new(BTreeMap::new()),
            fixed_nu: OnceLock::new(),
        })
    }

    pub fn with_execution(mut self, exec: Execution) -> Self {
        self.exec = exec;
        self
    }

    /// Same problem with an empty cache; a solved shared ν is kept.
    pub fn fork(&self) -> GtfkSolver {
        let fixed_nu = OnceLock::new();
        if let Some(n) = self.fixed_nu.get() {
            let _ = fixed_nu.set(n.clone());
        }
        GtfkSolver {
            problem: self.problem.clone(),
            u_a: self.u_a,
            u_b: self.u_b,
            opts: self.opts,
            exec: self.exec,
            cache: Mutex::new(BTreeMap::new()),
            fixed_nu,
        }
    }

    fn shared_nu(&self) -> Result<Option<&NuSolution>> {
        if !self.problem.is_quadratic() {
            return Ok(None);
        }
        if let Some(n) = self.fixed_nu.get() {
            return Ok(Some(n));
        }
        let (_, p) = self.problem.trial(0.0, 0.0, 0.0);
        let n = p.solve_nu(
            self.u_a,
            self.u_b,
            self.opts.ode_rel_tol,
            self.opts.ode_abs_tol,
        )?;
        Ok(Some(self.fixed_nu.get_or_init(|| n)))
    }

    fn nearest(map: &BTreeMap<i64, Arc<SolvedPoint>>, x: f64) -> Option<&Arc<SolvedPoint>> {
        let k = key(x);
        let above = map.range(k..).next().map(|(_, v)| v);
        let below = map.range(..k).next_back().map(|(_, v)| v);
        match (below, above) {
            (Some(b), Some(a)) => Some(if (x - b.state.x_bar).abs() <= (a.state.x_bar - x).abs() {
                b
            } else {
                a
            }),
            (b, a) => b.or(a),
        }
    }

    fn seed_from(p: Option<&Arc<SolvedPoint>>) -> Option<(f64, f64)> {
        p.filter(|p| p.state.converged)
            .map(|p| (p.state.c, p.state.d))
    }

    pub fn solve(&self, x_bar: f64) -> Result<Arc<SolvedPoint>> {
        Ok(self.solve_batch(&[x_bar])?.pop().unwrap())
    }

    pub fn solve_batch(&self, xs: &[f64]) -> Result<Vec<Arc<SolvedPoint>>> {
        let fixed = self.shared_nu()?;
        let snapshot = self.cache.lock().unwrap().clone();
        let chunks: Vec<&[f64]> = xs.chunks(CHUNK).collect();
        let solved = par::map(
            self.exec,
            &chunks,
            |chunk| -> Result<Vec<Arc<SolvedPoint>>> {
                let mut local: BTreeMap<i64, Arc<SolvedPoint>> = BTreeMap::new();
                let mut out: Vec<Option<Arc<SolvedPoint>>> = vec![None; chunk.len()];
                let mut order: Vec<usize> = (0..chunk.len()).collect();
                let anchor = |x: f64| match Self::nearest(&snapshot, x) {
                    Some(p) => (x - p.state.x_bar).abs(),
                    None => (x - chunk[chunk.len() / 2]).abs(),
                };
                order.sort_by(|&i, &j| {
                    anchor(chunk[i])
                        .total_cmp(&anchor(chunk[j]))
                        .then(i.cmp(&j))
                });
                for i in order {
                    let x = chunk[i];
                    if let Some(p) = snapshot.get(&key(x)).or_else(|| local.get(&key(x))) {
                        out[i] = Some(p.clone());
                        continue;
                    }
                    let near = match (Self::nearest(&snapshot, x), Self::nearest(&local, x)) {
                        (Some(a), Some(b)) => {
                            Some(if (a.state.x_bar - x).abs() <= (b.state.x_bar - x).abs() {
                                a
                            } else {
                                b
                            })
                        }
                        (a, b) => a.or(b),
                    };
                    let seed = Self::seed_from(near);
                    let p = Arc::new(solve_point(
                        &self.problem,
                        x,
                        self.u_a,
                        self.u_b,
                        seed,
                        &self.opts,
                        fixed,
                    )?);
                    local.insert(key(x), p.clone());
                    out[i] = Some(p);
                }
                Ok(out.into_iter().map(Option::unwrap).collect())
            },
        );
        let mut all = Vec::with_capacity(xs.len());
        for r in solved {
            all.extend(r?);
        }
        let mut cache = self.cache.lock().unwrap();
        for p in &all {
            cache.entry(key(p.state.x_bar)).or_insert_with(|| p.clone());
        }
        Ok(all)
    }

    /// Solved points in increasing x̄.
    pub fn solved(&self) -> Vec<Arc<SolvedPoint>> {
        self.cache.lock().unwrap().values().cloned().collect()
    }

    pub fn write_diagnostics_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(
            w,
            "x_bar,C,D,alpha,delta_gamma,iterations,converged,residual"
        )?;
        for p in self.solved() {
            let s = p.state;
            writeln!(
                w,
                "{},{},{},{},{},{},{},{}",
                s.x_bar, s.c, s.d, s.alpha, s.delta_gamma, s.iterations, s.converged, s.residual
            )?;
        }
        Ok(())
    }
}

/// Full GTFK density (x̄ integrated) and the exact kernel of a quadratic
/// Hamiltonian H = aẋ² + 2bẋx + cx² + 2dẋ + 2ex + f, ℏ = 1.
pub fn quadratic_exactness_check(
    coeffs: &QuadraticCoeffs,
    a: (f64, f64),
    b: (f64, f64),
) -> Result<(f64, f64)> {
    let (u_a, u_b) = (a.0, b.0);
    let boundary = |u: f64, x: f64| (coeffs.b)(u) * x * x + 2.0 * (coeffs.d)(u) * x;
    let end_factor = (boundary(u_a, a.1) - boundary(u_b, b.1)).exp();
    let problem = GtfkProblem::quadratic(coeffs);
    let solver = GtfkSolver::new(problem, u_a, u_b, SolveOptions::default())?;
    let nu = solver.shared_nu()?.unwrap().clone();
    let fho = FhoParams::from_quadratic(coeffs);
    let exact =
        fho_density_matrix(&fho, &nu, &kernel_integrals(&fho, &nu, u_a, u_b)?, a, b)? * end_factor;
    // the x̄ profile is Gaussian with precision sinh(Δν)T²/(2Ω_ab)
    let p0 = solver.solve(0.5 * (a.1 + b.1))?;
    let k = p0.integrals;
    let t = u_b - u_a;
    let scale = (2.0 * k.omega_ab / (k.sinh_scaled() * t * t)).sqrt();
    let opts = LineOptions {
        abs_tol: 0.0,
        rel_tol: 1e-11,
        ..Default::default()
    };
    let r = integrate_line(
        |xs| {
            let pts = solver.solve_batch(xs)?;
            pts.iter()
                .map(|p| reduced_density_matrix(&p.state, &p.params, &p.nu, &p.integrals, a.1, b.1))
                .collect()
        },
        p0.state.x_bar,
        scale,
        &opts,
    )?;
    Ok((r.value * end_factor, exact))
}

/// Closed forms for constant μ and ω, with f = ω(u_b − u_a)/2.
pub mod limits {
    fn f(omega: f64, t: f64) -> f64 {
        0.5 * omega * t
    }

    pub fn omega_a(mu: f64, omega: f64, t: f64) -> f64 {
        let f = f(omega, t);
        ((2.0 * f).cosh() - 1.0) / (mu * omega.powf(1.5))
    }

    pub fn omega_ab(m: f64, omega: f64, t: f64) -> f64 {
        let f = f(omega, t);
        (f * (2.0 * f).sinh() - ((2.0 * f).cosh() - 1.0)) / (m * omega.powi(3))
    }

    /// I₁ + I₂ from ∫γ̃ du and the unscaled Γ̃_a, Γ̃_b.
    pub fn i_sum(
        mu: f64,
        omega: f64,
        t: f64,
        gamma_tilde_integral: f64,
        gamma_a: f64,
        gamma_b: f64,
    ) -> f64 {
        let f = f(omega, t);
        ((2.0 * f).sinh() * gamma_tilde_integral - gamma_a - gamma_b) / (mu * omega.powf(1.5))
    }

    pub fn alpha(m: f64, omega: f64, t: f64, hbar: f64) -> f64 {
        let f = f(omega, t);
        hbar / (2.0 * m * omega) * (1.0 / f.tanh() - 1.0 / f)
    }

    /// δγ from Γ_a = μ√ω Γ̃_a, Γ_b = μ√ω Γ̃_b and γ̂ = ∫γ du.
    pub fn delta_gamma(
        m: f64,
        omega: f64,
        t: f64,
        big_gamma_a: f64,
        big_gamma_b: f64,
        gamma_hat: f64,
    ) -> f64 {
        let f = f(omega, t);
        1.0 / (2.0 * m * omega)
            * ((big_gamma_a + big_gamma_b) / (2.0 * f).sinh() / f.tanh() - gamma_hat / f)
    }

    /// Inputs of the constant-μ, ω reduced density.
    #[derive(Clone, Copy, Debug, PartialEq)]
    pub struct ConstantCase {
        pub m: f64,
        pub omega: f64,
        pub t: f64,
        pub hbar: f64,
        /// Unscaled Γ̃_a, Γ̃_b, Γ̃_ab.
        pub gamma_a: f64,
        pub gamma_b: f64,
        pub gamma_ab: f64,
        pub gamma_hat: f64,
        pub w_integral: f64,
    }

    /// ρ̄₀(b, a; x̄) for constant μ and ω with arbitrary γ(u).
    pub fn reduced_density(c: &ConstantCase, x_a: f64, x_b: f64, x_bar: f64) -> f64 {
        let (m, w, hbar) = (c.m, c.omega, c.hbar);
        let f = f(w, c.t);
        let s2 = (2.0 * f).sinh();
        let mu_sw = m.sqrt() * w.sqrt();
        let (ga, gb, gab) = (mu_sw * c.gamma_a, mu_sw * c.gamma_b, m * w * c.gamma_ab);
        let alpha = alpha(m, w, c.t, hbar);
        let delta = 1.0 / (2.0 * m * w * f) * ((ga + gb) / s2 - c.gamma_hat);
        let mid = 0.5 * (x_b + x_a) - (x_bar - delta);
        let expo = -mid * mid / (2.0 * alpha)
            - m * w / f.tanh() / (4.0 * hbar) * (x_b - x_a).powi(2)
            - c.w_integral / hbar
            - (x_b - x_bar) * ga / (hbar * s2)
            - (x_a - x_bar) * gb / (hbar * s2)
            + 1.0 / (hbar * m * w)
                * (gab / s2 - 1.0 / (4.0 * f) * ((ga + gb) / s2 - c.gamma_hat).powi(2));
        (m / (2.0 * std::f64::consts::PI * hbar * c.t)).sqrt() * f
            / f.sinh()
            / (2.0 * std::f64::consts::PI * alpha).sqrt()
            * expo.exp()
    }

    /// ρ̄₀(b, a; x̄) when γ is constant too: the standard GTFK form.
    pub fn reduced_density_const_gamma(
        m: f64,
        omega: f64,
        t: f64,
        hbar: f64,
        w_integral: f64,
        x_a: f64,
        x_b: f64,
        x_bar: f64,
    ) -> f64 {
        let f = f(omega, t);
        let alpha = alpha(m, omega, t, hbar);
        let mid = 0.5 * (x_b + x_a) - x_bar;
        let expo = -mid * mid / (2.0 * alpha)
            - m * omega / f.tanh() / (4.0 * hbar) * (x_b - x_a).powi(2)
            - w_integral / hbar;
        (m / (2.0 * std::f64::consts::PI * hbar * t)).sqrt() * f
            / f.sinh()
            / (2.0 * std::f64::consts::PI * alpha).sqrt()
            * expo.exp()
    }
}
