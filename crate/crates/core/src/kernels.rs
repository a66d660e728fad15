//! Gaussian path integrals: the forced harmonic oscillator (FHO) with
//! time-dependent parameters, the general quadratic Hamiltonian solved by
//! direct integration, and a brute-force time-sliced oracle.

use std::f64::consts::PI;
use std::sync::Arc;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{func, merge_knots, Func, QuadraticCoeffs};
use crate::ode::{solve_pinney_stable, NuSolution, OdeSystemSpec};
use crate::quad::rule4;

/// ∫exp(A x² + B x) dx for A < 0.
pub fn gaussian_integral(a: f64, b: f64) -> Result<f64> {
    if !(a < 0.0) {
        return Err(Error::validation(format!(
            "Gaussian integral needs A < 0, got {a}"
        )));
    }
    Ok((PI / -a).sqrt() * (-b * b / (4.0 * a)).exp())
}

/// H = m(u)ẋ²/2 + m(u)ω²(u)x²/2 + γ(u)x + w(u), with μ = √m.
///
/// `kappa_eff` and `forcing` choose how the Pinney equation is split into
/// the Bernoulli-Riccati system; they must satisfy
/// k² − k̇ + q = ω² + μ̈/μ.
#[derive(Clone)]
pub struct FhoParams {
    pub mu: Func,
    pub mu_dot: Func,
    pub omega_sq: Func,
    pub gamma: Func,
    pub w: Func,
    pub kappa_eff: Func,
    pub forcing: Func,
    pub hbar: f64,
    pub knots: Vec<f64>,
    /// Optional fused evaluation of [μ, γ, w].
    pub bundle: Option<Bundle>,
}

pub type Bundle = Arc<dyn Fn(f64) -> [f64; 3] + Send + Sync>;

impl std::fmt::Debug for FhoParams {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("FhoParams")
            .field("hbar", &self.hbar)
            .field("knots", &self.knots.len())
            .finish_non_exhaustive()
    }
}

impl FhoParams {
    /// Parameters with the split k = −μ̇/μ, q = ω².
    pub fn new(mu: Func, mu_dot: Func, omega_sq: Func, gamma: Func, w: Func) -> Self {
        let (m, md) = (mu.clone(), mu_dot.clone());
        FhoParams {
            kappa_eff: Arc::new(move |u| -md(u) / m(u)),
            forcing: omega_sq.clone(),
            mu,
            mu_dot,
            omega_sq,
            gamma,
            w,
            hbar: 1.0,
            knots: Vec::new(),
            bundle: None,
        }
    }

    pub fn constant(m: f64, omega: f64, gamma: f64, w: f64) -> Self {
        let mu = m.sqrt();
        FhoParams::new(
            func(move |_| mu),
            func(|_| 0.0),
            func(move |_| omega * omega),
            func(move |_| gamma),
            func(move |_| w),
        )
    }

    /// FHO form of a general quadratic Hamiltonian (the end-point factor is
    /// handled separately).
    pub fn from_quadratic(q: &QuadraticCoeffs) -> Self {
        let (q1, q2, q3, q4, q5) = (q.clone(), q.clone(), q.clone(), q.clone(), q.clone());
        let mut p = FhoParams::new(
            func(move |u| q1.mu(u)),
            func(move |u| q2.mu_dot(u)),
            func(move |u| q3.omega_sq(u)),
            func(move |u| q4.gamma(u)),
            func(move |u| q5.w(u)),
        );
        p.knots = q.knots.clone();
        p
    }

    pub fn with_hbar(mut self, hbar: f64) -> Self {
        self.hbar = hbar;
        self
    }

    pub fn with_knots(mut self, knots: Vec<f64>) -> Self {
        self.knots = knots;
        self
    }

    pub fn m(&self, u: f64) -> f64 {
        let mu = (self.mu)(u);
        mu * mu
    }

    /// [μ, γ, w] at `u`.
    pub fn mu_gamma_w(&self, u: f64) -> [f64; 3] {
        match &self.bundle {
            Some(b) => b(u),
            None => [(self.mu)(u), (self.gamma)(u), (self.w)(u)],
        }
    }

    pub fn ode_spec(&self, u_a: f64, u_b: f64, rel_tol: f64, abs_tol: f64) -> OdeSystemSpec {
        let knots = merge_knots(u_a, u_b, self.knots.iter().copied());
        OdeSystemSpec::new(
            self.kappa_eff.clone(),
            self.forcing.clone(),
            u_a,
            u_b,
            knots,
        )
        .with_tolerances(rel_tol, abs_tol)
    }

    /// Solve the Pinney system on [u_a, u_b] with the two-sweep scheme.
    pub fn solve_nu(&self, u_a: f64, u_b: f64, rel_tol: f64, abs_tol: f64) -> Result<NuSolution> {
        solve_pinney_stable(&self.ode_spec(u_a, u_b, rel_tol, abs_tol), 0.0)
    }
}

/// Kernel functionals, each stored multiplied by `exp(−Δν)` with
/// Δν = ν_b − ν_a; finite at any horizon.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct KernelIntegrals {
    pub delta_nu: f64,
    pub gamma_a: f64,
    pub gamma_b: f64,
    pub gamma_ab: f64,
    pub omega_a: f64,
    pub omega_b: f64,
    pub omega_ab: f64,
    pub i1: f64,
    pub i2: f64,
    /// ∫w du (not scaled).
    pub w_integral: f64,
    /// ∫γ̃ du (not scaled).
    pub gamma_tilde_integral: f64,
}

/// The same functionals without the `exp(−Δν)` scaling.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct UnscaledIntegrals {
    pub gamma_a: f64,
    pub gamma_b: f64,
    pub gamma_ab: f64,
    pub omega_a: f64,
    pub omega_b: f64,
    pub omega_ab: f64,
    pub i1: f64,
    pub i2: f64,
}

impl KernelIntegrals {
    pub fn unscaled(&self) -> UnscaledIntegrals {
        let s = self.delta_nu.exp();
        UnscaledIntegrals {
            gamma_a: self.gamma_a * s,
            gamma_b: self.gamma_b * s,
            gamma_ab: self.gamma_ab * s,
            omega_a: self.omega_a * s,
            omega_b: self.omega_b * s,
            omega_ab: self.omega_ab * s,
            i1: self.i1 * s,
            i2: self.i2 * s,
        }
    }

    /// sinh(Δν)·exp(−Δν).
    pub fn sinh_scaled(&self) -> f64 {
        -0.5 * (-2.0 * self.delta_nu).exp_m1()
    }

    /// cosh(Δν)·exp(−Δν).
    pub fn cosh_scaled(&self) -> f64 {
        0.5 * (1.0 + (-2.0 * self.delta_nu).exp())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("integrals serialize")
    }
}

/// Largest phase increment ν₁ − ν₀ covered by one Gauss panel.
const MAX_PANEL_PHASE: f64 = 0.125;

/// All kernel functionals in one sweep over the accepted ODE steps.
pub fn kernel_integrals(
    params: &FhoParams,
    nu: &NuSolution,
    u_a: f64,
    u_b: f64,
) -> Result<KernelIntegrals> {
    if (nu.u_a() - u_a).abs() > 1e-12 * (1.0 + u_a.abs())
        || (nu.u_b() - u_b).abs() > 1e-12 * (1.0 + u_b.abs())
    {
        return Err(Error::validation(
            "Pinney solution does not cover the requested interval",
        ));
    }
    let rule = rule4();
    let nodes = nu.nodes();
    let nu_a = nodes[0].y[2];
    let nu_b = nodes.last().unwrap().y[2];
    let dnu = nu_b - nu_a;
    let mut k = KernelIntegrals {
        delta_nu: dnu,
        ..Default::default()
    };
    // scaled running inner integrals: J = ∫p sinh(ν'−ν_a), K = ∫γp sinh(ν'−ν_a),
    // each times exp(−(ν − ν_a))
    let (mut j_run, mut k_run) = (0.0, 0.0);
    let n = rule.len();
    let mut p = [0.0; 8];
    let mut g = [0.0; 8];
    let mut ah = [0.0; 8];
    // e^{±(ν − ν0)} at the panel nodes
    let mut up = [0.0; 8];
    let mut dn = [0.0; 8];
    let panels = (0..nu.steps()).flat_map(|i| {
        let sub = ((nodes[i + 1].y[2] - nodes[i].y[2]) / MAX_PANEL_PHASE)
            .ceil()
            .max(1.0) as usize;
        (0..sub).map(move |s| (i, s as f64 / sub as f64, (s + 1) as f64 / sub as f64))
    });
    for (i, t0, t1) in panels {
        let (s0, s1) = (nodes[i].u, nodes[i + 1].u);
        let (u0, du) = (s0 + (s1 - s0) * t0, (s1 - s0) * (t1 - t0));
        let nu0 = if t0 == 0.0 {
            nodes[i].y[2]
        } else {
            nu.interp_in_step(i, t0)[2]
        };
        let nu1 = if t1 == 1.0 {
            nodes[i + 1].y[2]
        } else {
            nu.interp_in_step(i, t1)[2]
        };
        let mut bh = [0.0; 8];
        for c in 0..n {
            let t = t0 + (t1 - t0) * rule.nodes[c];
            let u = u0 + du * rule.nodes[c];
            let y = nu.interp_in_step(i, t);
            let [mu, gam, w] = params.mu_gamma_w(u);
            p[c] = y[0] / mu;
            g[c] = gam;
            up[c] = (y[2] - nu0).exp();
            dn[c] = 1.0 / up[c];
            ah[c] = -0.5 * (-2.0 * (y[2] - nu_a)).exp_m1();
            bh[c] = -0.5 * (-2.0 * (nu_b - y[2])).exp_m1();
            let wa = (-(nu_b - y[2])).exp();
            let wb = (-(y[2] - nu_a)).exp();
            let wt = rule.weights[c] * du;
            k.omega_a += wt * p[c] * ah[c] * wa;
            k.gamma_a += wt * g[c] * p[c] * ah[c] * wa;
            k.omega_b += wt * p[c] * bh[c] * wb;
            k.gamma_b += wt * g[c] * p[c] * bh[c] * wb;
            k.w_integral += wt * w;
            k.gamma_tilde_integral += wt * g[c] * p[c];
        }
        // nested integrals need every node of the panel
        for c in 0..n {
            let mut jc = dn[c] * j_run;
            let mut kc = dn[c] * k_run;
            for e in 0..n {
                let f = rule.cumulative[c][e] * du * p[e] * ah[e] * up[e] * dn[c];
                jc += f;
                kc += f * g[e];
            }
            let wt = rule.weights[c] * du;
            k.omega_ab += wt * p[c] * bh[c] * jc;
            k.i1 += wt * g[c] * p[c] * bh[c] * jc;
            k.i2 += wt * p[c] * bh[c] * kc;
            k.gamma_ab += wt * g[c] * p[c] * bh[c] * kc;
        }
        let decay = (-(nu1 - nu0)).exp();
        j_run *= decay;
        k_run *= decay;
        for c in 0..n {
            let f = rule.weights[c] * du * p[c] * ah[c] * up[c] * decay;
            j_run += f;
            k_run += f * g[c];
        }
    }
    if !(k.omega_ab > 0.0) || !k.omega_ab.is_finite() {
        return Err(Error::numerical(format!(
            "non-positive Omega_ab = {}",
            k.omega_ab
        )));
    }
    Ok(k)
}

/// Γ̃ functionals only (the Ω/I fields are left at zero).
pub fn gamma_integrals(
    params: &FhoParams,
    nu: &NuSolution,
    u_a: f64,
    u_b: f64,
) -> Result<KernelIntegrals> {
    let k = kernel_integrals(params, nu, u_a, u_b)?;
    Ok(KernelIntegrals {
        omega_a: 0.0,
        omega_b: 0.0,
        omega_ab: 0.0,
        i1: 0.0,
        i2: 0.0,
        ..k
    })
}

/// Ω and I functionals only (the Γ̃ fields are left at zero).
pub fn omega_i_integrals(
    params: &FhoParams,
    nu: &NuSolution,
    u_a: f64,
    u_b: f64,
) -> Result<KernelIntegrals> {
    let k = kernel_integrals(params, nu, u_a, u_b)?;
    Ok(KernelIntegrals {
        gamma_a: 0.0,
        gamma_b: 0.0,
        gamma_ab: 0.0,
        ..k
    })
}

/// End-point data entering the FHO formulas.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EndPoint {
    pub mu: f64,
    pub nu_dot: f64,
    /// ν̈/(2ν̇²) + μ̇/(μν̇).
    pub boundary: f64,
}

impl EndPoint {
    pub fn at(params: &FhoParams, nu: &NuSolution, start: bool) -> Self {
        let (u, p) = if start {
            (nu.u_a(), nu.start())
        } else {
            (nu.u_b(), nu.end())
        };
        let mu = (params.mu)(u);
        let mu_dot = (params.mu_dot)(u);
        EndPoint {
            mu,
            nu_dot: p.nu_dot,
            boundary: p.nu_ddot / (2.0 * p.nu_dot * p.nu_dot) + mu_dot / (mu * p.nu_dot),
        }
    }

    /// μ√ν̇.
    pub fn scale(&self) -> f64 {
        self.mu * self.nu_dot.sqrt()
    }
}

/// Classical action S_cl(b, a) of the FHO.
pub fn fho_classical_action(
    params: &FhoParams,
    nu: &NuSolution,
    k: &KernelIntegrals,
    a: (f64, f64),
    b: (f64, f64),
) -> Result<f64> {
    check_ends(nu, a.0, b.0)?;
    let ea = EndPoint::at(params, nu, true);
    let eb = EndPoint::at(params, nu, false);
    let xa = ea.scale() * a.1;
    let xb = eb.scale() * b.1;
    let (sh, ch) = (k.sinh_scaled(), k.cosh_scaled());
    let inv_s = (-k.delta_nu).exp() / sh;
    Ok(-0.5 * (eb.boundary * xb * xb - ea.boundary * xa * xa)
        + 0.5 * ((xb * xb + xa * xa) * ch / sh - 2.0 * xb * xa * inv_s)
        + (xb * k.gamma_a + xa * k.gamma_b - k.gamma_ab) / sh
        + k.w_integral)
}

fn check_ends(nu: &NuSolution, u_a: f64, u_b: f64) -> Result<()> {
    if !(u_b > u_a) {
        return Err(Error::validation("need u_b > u_a"));
    }
    let tol = 1e-12 * (1.0 + u_b.abs());
    if (nu.u_a() - u_a).abs() > tol || (nu.u_b() - u_b).abs() > tol {
        return Err(Error::validation(
            "end points differ from the Pinney solution interval",
        ));
    }
    Ok(())
}

/// FHO density matrix ρ(b, a) from a solved Pinney system.
pub fn fho_density_matrix(
    params: &FhoParams,
    nu: &NuSolution,
    k: &KernelIntegrals,
    a: (f64, f64),
    b: (f64, f64),
) -> Result<f64> {
    Ok(fho_log_density(params, nu, k, a, b)?.exp())
}

pub fn fho_log_density(
    params: &FhoParams,
    nu: &NuSolution,
    k: &KernelIntegrals,
    a: (f64, f64),
    b: (f64, f64),
) -> Result<f64> {
    if !(k.delta_nu > 0.0) {
        return Err(Error::validation("sinh(ν_b − ν_a) must be positive"));
    }
    let s = fho_classical_action(params, nu, k, a, b)?;
    let ea = EndPoint::at(params, nu, true);
    let eb = EndPoint::at(params, nu, false);
    let hbar = params.hbar;
    // ln sinh Δν = Δν + ln(sinh Δν e^{−Δν})
    let ln_sinh = k.delta_nu + k.sinh_scaled().ln();
    Ok(0.5 * ((eb.scale() * ea.scale()).ln() - (2.0 * PI * hbar).ln() - ln_sinh) - s / hbar)
}

/// Convenience: solve and evaluate the FHO density in one call.
pub fn fho_density(params: &FhoParams, a: (f64, f64), b: (f64, f64), rel_tol: f64) -> Result<f64> {
    let nu = params.solve_nu(a.0, b.0, rel_tol, rel_tol * 1e-2)?;
    let k = kernel_integrals(params, &nu, a.0, b.0)?;
    fho_density_matrix(params, &nu, &k, a, b)
}

/// Homogeneous and particular solutions of the Euler-Lagrange equation of a
/// general quadratic Hamiltonian, tabulated at both ends.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GeneralGaussianSolution {
    pub y1: [f64; 2],
    pub y1_dot: [f64; 2],
    pub y2: [f64; 2],
    pub y2_dot: [f64; 2],
    pub z: [f64; 2],
    pub z_dot: [f64; 2],
    /// R(u_b, u_a) = y2(u_b)y1(u_a) − y1(u_b)y2(u_a).
    pub r: f64,
    pub c1: f64,
    pub c2: f64,
    /// ∫(e − ḋ)x_cl du + ∫f du over [u_a, u_b].
    pub bulk: f64,
    /// a(u)(ẏ2 y1 − ẏ1 y2) at both ends.
    pub abel: [f64; 2],
}

const RK4_MAX_STEP: f64 = 5e-4;
const RK4_MIN_STEPS: usize = 512;

/// Density of a general quadratic Hamiltonian by direct integration of the
/// classical equations of motion with fixed-step RK4 (ℏ = 1).
pub fn general_gaussian_density(
    coeffs: &QuadraticCoeffs,
    a: (f64, f64),
    b: (f64, f64),
) -> Result<f64> {
    let (rho, _) = general_gaussian_solve(coeffs, a, b)?;
    Ok(rho)
}

pub fn general_gaussian_solve(
    q: &QuadraticCoeffs,
    a: (f64, f64),
    b: (f64, f64),
) -> Result<(f64, GeneralGaussianSolution)> {
    let (u_a, u_b) = (a.0, b.0);
    if !(u_b > u_a && u_a >= 0.0) {
        return Err(Error::validation("need 0 <= u_a < u_b"));
    }
    let s_fn = |u: f64| (q.e)(u) + 0.5 * q.lambda_linear - (q.d_dot)(u);
    // state: y1, p1 = a ẏ1, I = ∫1/(a y1²), S1 = ∫s y1, S2 = ∫s y2, Z = ∫s z, F = ∫f
    let deriv = |u: f64, y: &[f64; 7]| -> [f64; 7] {
        let av = (q.a)(u);
        let s = s_fn(u);
        let y2 = y[0] * y[2];
        let z = y2 * y[3] - y[0] * y[4];
        [
            y[1] / av,
            ((q.c)(u) - (q.b_dot)(u)) * y[0],
            1.0 / (av * y[0] * y[0]),
            s * y[0],
            s * y2,
            s * z,
            (q.f)(u),
        ]
    };
    let mut grid = merge_knots(0.0, u_b, q.knots.iter().copied());
    if u_a > 0.0 {
        grid = merge_knots(0.0, u_b, grid.into_iter().chain(std::iter::once(u_a)));
    }
    let mut y = [1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0];
    let mut at_a = if u_a == 0.0 { Some(y) } else { None };
    for w in grid.windows(2) {
        let n = (((w[1] - w[0]) / RK4_MAX_STEP).ceil() as usize).max(RK4_MIN_STEPS);
        let h = (w[1] - w[0]) / n as f64;
        for i in 0..n {
            let u = w[0] + i as f64 * h;
            let k1 = deriv(u, &y);
            let k2 = deriv(u + 0.5 * h, &add(&y, &k1, 0.5 * h));
            let k3 = deriv(u + 0.5 * h, &add(&y, &k2, 0.5 * h));
            let k4 = deriv(u + h, &add(&y, &k3, h));
            for c in 0..7 {
                y[c] += h / 6.0 * (k1[c] + 2.0 * k2[c] + 2.0 * k3[c] + k4[c]);
            }
            if !(y[0] > 0.0) || !y.iter().all(|v| v.is_finite()) {
                return Err(Error::numerical("homogeneous solution lost positivity"));
            }
        }
        if w[1] == u_a {
            at_a = Some(y);
        }
    }
    let ya = at_a.ok_or_else(|| Error::numerical("start point not on grid"))?;
    let yb = y;
    let ends = [(u_a, ya), (u_b, yb)];
    let mut sol = GeneralGaussianSolution {
        y1: [0.0; 2],
        y1_dot: [0.0; 2],
        y2: [0.0; 2],
        y2_dot: [0.0; 2],
        z: [0.0; 2],
        z_dot: [0.0; 2],
        r: 0.0,
        c1: 0.0,
        c2: 0.0,
        bulk: 0.0,
        abel: [0.0; 2],
    };
    for (i, (u, st)) in ends.iter().enumerate() {
        let av = (q.a)(*u);
        let y1 = st[0];
        let y1d = st[1] / av;
        let y2 = y1 * st[2];
        let y2d = y1d * st[2] + 1.0 / (av * y1);
        sol.y1[i] = y1;
        sol.y1_dot[i] = y1d;
        sol.y2[i] = y2;
        sol.y2_dot[i] = y2d;
        sol.z[i] = y2 * st[3] - y1 * st[4];
        sol.z_dot[i] = y2d * st[3] - y1d * st[4];
        sol.abel[i] = av * (y2d * y1 - y1d * y2);
    }
    sol.r = sol.y2[1] * sol.y1[0] - sol.y1[1] * sol.y2[0];
    if !(sol.r > 0.0) {
        return Err(Error::numerical("R(u_b, u_a) must be positive"));
    }
    // C1 y1 + C2 y2 = x − z at both ends
    let (ra, rb) = (a.1 - sol.z[0], b.1 - sol.z[1]);
    let det = sol.y1[0] * sol.y2[1] - sol.y2[0] * sol.y1[1];
    sol.c1 = (ra * sol.y2[1] - rb * sol.y2[0]) / det;
    sol.c2 = (sol.y1[0] * rb - sol.y1[1] * ra) / det;
    let s_int = |st: &[f64; 7]| sol.c1 * st[3] + sol.c2 * st[4] + st[5];
    sol.bulk = s_int(&yb) - s_int(&ya) + yb[6] - ya[6];
    let boundary = |i: usize, u: f64, x: f64| {
        let xdot = sol.c1 * sol.y1_dot[i] + sol.c2 * sol.y2_dot[i] + sol.z_dot[i];
        ((q.a)(u) * xdot + (q.b)(u) * x + 2.0 * (q.d)(u)) * x
    };
    let s_cl = boundary(1, u_b, b.1) - boundary(0, u_a, a.1) + sol.bulk;
    Ok(((PI * sol.r).powf(-0.5) * (-s_cl).exp(), sol))
}

fn add(y: &[f64; 7], k: &[f64; 7], h: f64) -> [f64; 7] {
    let mut o = *y;
    for c in 0..7 {
        o[c] += h * k[c];
    }
    o
}

/// Time-sliced transfer-matrix evaluation of the path integral
/// ∫exp(−∫H du) over paths from `a` to `b` (ℏ = 1).
///
/// `kinetic(u)` is the coefficient of ẋ² in H; `x_grid` must be uniform.
pub fn path_integral_oracle(
    hamiltonian: &(dyn Fn(f64, f64, f64) -> f64 + Sync),
    kinetic: &(dyn Fn(f64) -> f64 + Sync),
    a: (f64, f64),
    b: (f64, f64),
    n_slices: usize,
    x_grid: &[f64],
) -> Result<f64> {
    if n_slices == 0 || !(b.0 > a.0) {
        return Err(Error::validation("need at least one slice and u_b > u_a"));
    }
    let eps = (b.0 - a.0) / n_slices as f64;
    let kernel = |k: usize, x_to: f64, x_from: f64| {
        let u = a.0 + (k as f64 + 0.5) * eps;
        let xm = 0.5 * (x_to + x_from);
        let v = (x_to - x_from) / eps;
        (kinetic(u) / (PI * eps)).sqrt() * (-eps * hamiltonian(xm, v, u)).exp()
    };
    if n_slices == 1 {
        return Ok(kernel(0, b.1, a.1));
    }
    if x_grid.len() < 3 {
        return Err(Error::validation("x grid too small"));
    }
    let dx = x_grid[1] - x_grid[0];
    let mut v: Vec<f64> = x_grid.iter().map(|&x| kernel(0, x, a.1)).collect();
    for k in 1..n_slices - 1 {
        let next: Vec<f64> = x_grid
            .iter()
            .map(|&xt| {
                dx * x_grid
                    .iter()
                    .zip(&v)
                    .map(|(&xf, &vf)| kernel(k, xt, xf) * vf)
                    .sum::<f64>()
            })
            .collect();
        v = next;
    }
    Ok(dx
        * x_grid
            .iter()
            .zip(&v)
            .map(|(&xf, &vf)| kernel(n_slices - 1, b.1, xf) * vf)
            .sum::<f64>())
}
