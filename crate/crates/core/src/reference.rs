//! Finite-difference and Monte Carlo oracles for the pricing equation
//! ∂V/∂u + κ(θ−x)V′ + ½σ²V″ = λ r(x)V.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ShortRateModelSpec;
use crate::par::{self, Execution};
use crate::pricing::{state_moments, Payoff};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PdeGrid {
    pub x_min: f64,
    pub x_max: f64,
    pub n_x: usize,
    pub n_t: usize,
    /// Crank-Nicolson weight; 1/2 is the trapezoidal scheme.
    pub theta_cn: f64,
}

impl PdeGrid {
    pub fn new(x_min: f64, x_max: f64, n_x: usize, n_t: usize) -> Result<Self> {
        let g = PdeGrid {
            x_min,
            x_max,
            n_x,
            n_t,
            theta_cn: 0.5,
        };
        g.validate()?;
        Ok(g)
    }

    /// Symmetric grid with `x0` on the middle node, spanning 12 terminal
    /// standard deviations beyond the λ = 0 mean path; `n_x` is rounded up
    /// to an odd count.
    pub fn around(
        spec: &ShortRateModelSpec,
        u_a: f64,
        u_b: f64,
        x0: f64,
        n_x: usize,
        n_t: usize,
    ) -> Result<Self> {
        let m = state_moments(spec, u_a, u_b, x0);
        let half = (m.terminal_mean - x0).abs() + 12.0 * m.terminal_sd.max(1e-8);
        PdeGrid::new(x0 - half, x0 + half, n_x | 1, n_t)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_x < 3 || self.n_t < 1 {
            return Err(Error::validation(format!(
                "PDE grid needs n_x >= 3 and n_t >= 1, got {} and {}",
                self.n_x, self.n_t
            )));
        }
        if !(self.x_min < self.x_max) || !self.x_min.is_finite() || !self.x_max.is_finite() {
            return Err(Error::validation("PDE grid needs finite x_min < x_max"));
        }
        if !(self.theta_cn >= 0.5 && self.theta_cn <= 1.0) {
            return Err(Error::validation(
                "Crank-Nicolson weight must lie in [1/2, 1]",
            ));
        }
        Ok(())
    }

    pub fn dx(&self) -> f64 {
        (self.x_max - self.x_min) / (self.n_x - 1) as f64
    }

    pub fn xs(&self) -> Vec<f64> {
        let dx = self.dx();
        (0..self.n_x).map(|i| self.x_min + dx * i as f64).collect()
    }

    /// Same domain with twice the resolution in space and time.
    pub fn refined(&self) -> Self {
        PdeGrid {
            n_x: 2 * (self.n_x - 1) + 1,
            n_t: 2 * self.n_t,
            ..*self
        }
    }
}

/// One time step (u_lo, u_hi) with its implicitness weight.
#[derive(Clone, Copy, Debug)]
struct Step {
    lo: f64,
    hi: f64,
    theta: f64,
}

/// Steps uniform within knot intervals; the first and last steps are
/// replaced by two implicit half steps.
fn schedule(spec: &ShortRateModelSpec, u_a: f64, u_b: f64, n_t: usize, theta_cn: f64) -> Vec<Step> {
    let knots = spec.knot_partition(u_a, u_b);
    let t = u_b - u_a;
    let mut edges = vec![u_a];
    for w in knots.windows(2) {
        let n = ((n_t as f64 * (w[1] - w[0]) / t).round() as usize).max(1);
        for i in 1..=n {
            edges.push(if i == n {
                w[1]
            } else {
                w[0] + (w[1] - w[0]) * i as f64 / n as f64
            });
        }
    }
    let n = edges.len() - 1;
    let mut steps = Vec::with_capacity(n + 2);
    for i in 0..n {
        let (lo, hi) = (edges[i], edges[i + 1]);
        if (i == 0 || i == n - 1) && theta_cn < 1.0 {
            let mid = 0.5 * (lo + hi);
            steps.push(Step {
                lo,
                hi: mid,
                theta: 1.0,
            });
            steps.push(Step {
                lo: mid,
                hi,
                theta: 1.0,
            });
        } else {
            steps.push(Step {
                lo,
                hi,
                theta: theta_cn,
            });
        }
    }
    steps
}

/// Tridiagonal operator on interior nodes: (lower, diag, upper).
struct Tri {
    lo: Vec<f64>,
    di: Vec<f64>,
    up: Vec<f64>,
}

impl Tri {
    fn apply(&self, v: &[f64], out: &mut [f64]) {
        let n = v.len();
        for i in 0..n {
            let mut s = self.di[i] * v[i];
            if i > 0 {
                s += self.lo[i] * v[i - 1];
            }
            if i + 1 < n {
                s += self.up[i] * v[i + 1];
            }
            out[i] = s;
        }
    }

    fn apply_transpose(&self, v: &[f64], out: &mut [f64]) {
        let n = v.len();
        for i in 0..n {
            let mut s = self.di[i] * v[i];
            if i > 0 {
                s += self.up[i - 1] * v[i - 1];
            }
            if i + 1 < n {
                s += self.lo[i + 1] * v[i + 1];
            }
            out[i] = s;
        }
    }

    /// Thomas algorithm, in place on `rhs`.
    fn solve(&self, rhs: &mut [f64], scratch: &mut [f64]) {
        let n = rhs.len();
        scratch[0] = self.up[0] / self.di[0];
        rhs[0] /= self.di[0];
        for i in 1..n {
            let den = self.di[i] - self.lo[i] * scratch[i - 1];
            scratch[i] = if i + 1 < n { self.up[i] / den } else { 0.0 };
            rhs[i] = (rhs[i] - self.lo[i] * rhs[i - 1]) / den;
        }
        for i in (0..n - 1).rev() {
            rhs[i] -= scratch[i] * rhs[i + 1];
        }
    }

    fn solve_transpose(&self, rhs: &mut [f64], scratch: &mut [f64]) {
        let t = Tri {
            lo: std::iter::once(0.0)
                .chain(self.up[..self.up.len() - 1].iter().copied())
                .collect(),
            di: self.di.clone(),
            up: self.lo[1..]
                .iter()
                .copied()
                .chain(std::iter::once(0.0))
                .collect(),
        };
        t.solve(rhs, scratch);
    }
}

/// Interior discretisation of L at time u, full rows including the two
/// boundary couplings (row 0 couples to node 0, the last row to n_x − 1).
fn generator(spec: &ShortRateModelSpec, xs: &[f64], rates: &[f64], u: f64) -> (Tri, f64, f64) {
    let dx = xs[1] - xs[0];
    let s = spec.sample(u);
    let (k, th, sg) = (s.kappa[0], s.theta[0], s.sigma[0]);
    let diff = 0.5 * sg * sg / (dx * dx);
    let n = xs.len() - 2;
    let mut tri = Tri {
        lo: vec![0.0; n],
        di: vec![0.0; n],
        up: vec![0.0; n],
    };
    let mut first = 0.0;
    let mut last = 0.0;
    for j in 0..n {
        let x = xs[j + 1];
        let adv = k * (th - x) / (2.0 * dx);
        let l = diff - adv;
        let r = diff + adv;
        tri.di[j] = -2.0 * diff - spec.lambda * rates[j + 1];
        if j == 0 {
            first = l;
        } else {
            tri.lo[j] = l;
        }
        if j + 1 == n {
            last = r;
        } else {
            tri.up[j] = r;
        }
    }
    (tri, first, last)
}

/// (I − θΔtL, I + (1−θ)ΔtL) for one step, plus boundary couplings.
struct StepOps {
    implicit: Tri,
    explicit: Tri,
    first: f64,
    last: f64,
}

fn step_ops(spec: &ShortRateModelSpec, xs: &[f64], rates: &[f64], st: &Step) -> StepOps {
    let dt = st.hi - st.lo;
    let u = if st.theta == 1.0 {
        st.lo
    } else {
        0.5 * (st.lo + st.hi)
    };
    let (l, first, last) = generator(spec, xs, rates, u);
    let scale = |tri: &Tri, c: f64| Tri {
        lo: tri.lo.iter().map(|v| c * v).collect(),
        di: tri.di.iter().map(|v| 1.0 + c * v).collect(),
        up: tri.up.iter().map(|v| c * v).collect(),
    };
    StepOps {
        implicit: scale(&l, -st.theta * dt),
        explicit: scale(&l, (1.0 - st.theta) * dt),
        first,
        last,
    }
}

fn check_finite(v: &[f64], what: &str) -> Result<()> {
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::numerical(format!(
            "{what}: non-finite values on the PDE grid"
        )));
    }
    Ok(())
}

/// Backward Crank-Nicolson solution V(u_a, ·) on the grid nodes.
pub fn pde_backward(
    spec: &ShortRateModelSpec,
    payoff: &Payoff,
    u_a: f64,
    u_b: f64,
    grid: &PdeGrid,
) -> Result<Vec<f64>> {
    grid.validate()?;
    if !(u_b > u_a) {
        return Err(Error::validation("need u_b > u_a"));
    }
    let xs = grid.xs();
    let rates: Vec<f64> = xs.iter().map(|&x| spec.rate(x)).collect();
    let boundary = |i: usize, u: f64| {
        payoff.value(spec.rate_map, xs[i]) * (-spec.lambda * rates[i] * (u_b - u)).exp()
    };
    let nx = xs.len();
    let mut v: Vec<f64> = xs.iter().map(|&x| payoff.value(spec.rate_map, x)).collect();
    let mut rhs = vec![0.0; nx - 2];
    let mut scratch = vec![0.0; nx - 2];
    for st in schedule(spec, u_a, u_b, grid.n_t, grid.theta_cn)
        .iter()
        .rev()
    {
        let ops = step_ops(spec, &xs, &rates, st);
        let dt = st.hi - st.lo;
        ops.explicit.apply(&v[1..nx - 1], &mut rhs);
        let (b0_old, b1_old) = (v[0], v[nx - 1]);
        let (b0, b1) = (boundary(0, st.lo), boundary(nx - 1, st.lo));
        rhs[0] += dt * ops.first * ((1.0 - st.theta) * b0_old + st.theta * b0);
        rhs[nx - 3] += dt * ops.last * ((1.0 - st.theta) * b1_old + st.theta * b1);
        ops.implicit.solve(&mut rhs, &mut scratch);
        v[1..nx - 1].copy_from_slice(&rhs);
        v[0] = b0;
        v[nx - 1] = b1;
    }
    check_finite(&v, "backward sweep")?;
    if payoff_is_nonnegative(payoff) && v.iter().any(|&x| x < -1e-12) {
        return Err(Error::numerical(
            "negative values in backward sweep: grid too coarse",
        ));
    }
    Ok(v)
}

fn payoff_is_nonnegative(p: &Payoff) -> bool {
    !matches!(p, Payoff::Custom(_))
}

fn interpolate(xs: &[f64], v: &[f64], x: f64) -> Result<f64> {
    let dx = xs[1] - xs[0];
    let t = (x - xs[0]) / dx;
    if !(t >= 0.0 && t <= (xs.len() - 1) as f64) {
        return Err(Error::validation(format!("x = {x} outside the PDE grid")));
    }
    let i = (t.floor() as usize).min(xs.len() - 2);
    let f = t - i as f64;
    Ok(v[i] * (1.0 - f) + v[i + 1] * f)
}

pub fn pde_price(
    spec: &ShortRateModelSpec,
    payoff: &Payoff,
    u_a: f64,
    u_b: f64,
    x_a: f64,
    grid: &PdeGrid,
) -> Result<f64> {
    let v = pde_backward(spec, payoff, u_a, u_b, grid)?;
    interpolate(&grid.xs(), &v, x_a)
}

/// Bond value at (u_a, spec.x0).
pub fn pde_zcb(spec: &ShortRateModelSpec, u_a: f64, u_b: f64, grid: &PdeGrid) -> Result<f64> {
    pde_price(spec, &Payoff::UnitBond, u_a, u_b, spec.x0, grid)
}

/// Richardson extrapolation (4V_h/2 − V_h)/3 of [`pde_price`].
pub fn pde_price_richardson(
    spec: &ShortRateModelSpec,
    payoff: &Payoff,
    u_a: f64,
    u_b: f64,
    x_a: f64,
    grid: &PdeGrid,
) -> Result<f64> {
    let coarse = pde_price(spec, payoff, u_a, u_b, x_a, grid)?;
    let fine = pde_price(spec, payoff, u_a, u_b, x_a, &grid.refined())?;
    Ok((4.0 * fine - coarse) / 3.0)
}

/// Default Table-grade bond grid: 64 nodes per terminal sd and 512 steps
/// per year, then one Richardson refinement.
pub fn pde_zcb_refined(spec: &ShortRateModelSpec, u_a: f64, u_b: f64) -> Result<f64> {
    let grid = default_grid(spec, u_a, u_b, spec.x0)?;
    pde_price_richardson(spec, &Payoff::UnitBond, u_a, u_b, spec.x0, &grid)
}

pub fn default_grid(spec: &ShortRateModelSpec, u_a: f64, u_b: f64, x0: f64) -> Result<PdeGrid> {
    let n_t = ((u_b - u_a) * 512.0).ceil() as usize;
    PdeGrid::around(spec, u_a, u_b, x0, 24 * 32 + 1, n_t.max(16))
}

/// Forward evolution of a unit mass at `x_a`: the exact transpose of the
/// backward scheme with zero Dirichlet data. Returns ψ on the grid nodes.
pub fn pde_density(
    spec: &ShortRateModelSpec,
    u_a: f64,
    u_b: f64,
    grid: &PdeGrid,
    x_a: f64,
) -> Result<Vec<f64>> {
    grid.validate()?;
    if !(u_b > u_a) {
        return Err(Error::validation("need u_b > u_a"));
    }
    let xs = grid.xs();
    let dx = grid.dx();
    let nx = xs.len();
    let t = (x_a - xs[0]) / dx;
    if !(t >= 1.0 && t <= (nx - 2) as f64) {
        return Err(Error::validation(format!(
            "x_a = {x_a} must lie strictly inside the PDE grid"
        )));
    }
    let rates: Vec<f64> = xs.iter().map(|&x| spec.rate(x)).collect();
    // p holds interior nodal weights; density = p/dx
    let mut p = vec![0.0; nx - 2];
    let i = (t.floor() as usize).min(nx - 2);
    let f = t - i as f64;
    if i >= 1 {
        p[i - 1] += 1.0 - f;
    }
    if f > 0.0 && i < nx - 2 {
        p[i] += f;
    }
    let mut q = vec![0.0; nx - 2];
    let mut scratch = vec![0.0; nx - 2];
    for st in schedule(spec, u_a, u_b, grid.n_t, grid.theta_cn).iter() {
        let ops = step_ops(spec, &xs, &rates, st);
        ops.implicit.solve_transpose(&mut p, &mut scratch);
        ops.explicit.apply_transpose(&p, &mut q);
        std::mem::swap(&mut p, &mut q);
    }
    check_finite(&p, "forward sweep")?;
    let mut out = vec![0.0; nx];
    for (j, v) in p.iter().enumerate() {
        out[j + 1] = v / dx;
    }
    Ok(out)
}

pub fn write_profile_csv<W: std::io::Write>(
    xs: &[f64],
    psi: &[f64],
    mut w: W,
) -> std::io::Result<()> {
    writeln!(w, "x,psi")?;
    for (x, p) in xs.iter().zip(psi) {
        writeln!(w, "{x:.17e},{p:.17e}")?;
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct McConfig {
    pub n_paths: usize,
    pub n_steps: usize,
    pub seed: u64,
    pub antithetic: bool,
}

impl McConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_paths < 2 || self.n_steps < 1 {
            return Err(Error::validation(
                "Monte Carlo needs n_paths >= 2 and n_steps >= 1",
            ));
        }
        if self.antithetic && !self.n_paths.is_multiple_of(2) {
            return Err(Error::validation(
                "antithetic sampling needs an even path count",
            ));
        }
        Ok(())
    }
}

impl Default for McConfig {
    fn default() -> Self {
        McConfig {
            n_paths: 100_000,
            n_steps: 512,
            seed: 42,
            antithetic: false,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct McEstimate {
    pub estimate: f64,
    pub std_error: f64,
}

const MC_CHUNK: usize = 4096;

/// Euler-Maruyama estimate of E[exp(−λ∫r du) P(X(u_b))].
pub fn mc_price(
    spec: &ShortRateModelSpec,
    payoff: &Payoff,
    u_a: f64,
    u_b: f64,
    x_a: f64,
    config: &McConfig,
    exec: Execution,
) -> Result<McEstimate> {
    config.validate()?;
    if !(u_b > u_a) {
        return Err(Error::validation("need u_b > u_a"));
    }
    let n = config.n_steps;
    let dt = (u_b - u_a) / n as f64;
    let sqdt = dt.sqrt();
    let coeffs: Vec<(f64, f64, f64)> = (0..n)
        .map(|i| {
            let s = spec.sample(u_a + dt * i as f64);
            (s.kappa[0], s.theta[0], s.sigma[0])
        })
        .collect();
    let lambda = spec.lambda;
    let run = |stream: u64, sign: f64| -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(stream);
        let mut x = x_a;
        let mut r = spec.rate(x);
        let mut integral = 0.0;
        for &(k, th, sg) in &coeffs {
            let z: f64 = rng.sample(StandardNormal);
            x += k * (th - x) * dt + sg * sqdt * sign * z;
            let r1 = spec.rate(x);
            integral += 0.5 * (r + r1) * dt;
            r = r1;
        }
        (-lambda * integral).exp() * payoff.value(spec.rate_map, x)
    };
    // samples are path values, or antithetic pair means
    let samples = if config.antithetic {
        config.n_paths / 2
    } else {
        config.n_paths
    };
    let chunks = samples.div_ceil(MC_CHUNK);
    let sums = par::map_range(exec, chunks, |c| {
        let (mut s, mut s2) = (0.0, 0.0);
        for i in c * MC_CHUNK..((c + 1) * MC_CHUNK).min(samples) {
            let v = if config.antithetic {
                0.5 * (run(i as u64, 1.0) + run(i as u64, -1.0))
            } else {
                run(i as u64, 1.0)
            };
            s += v;
            s2 += v * v;
        }
        (s, s2)
    });
    let (s, s2) = sums.iter().fold((0.0, 0.0), |a, b| (a.0 + b.0, a.1 + b.1));
    let m = samples as f64;
    let mean = s / m;
    let var = ((s2 / m - mean * mean) * m / (m - 1.0)).max(0.0);
    Ok(McEstimate {
        estimate: mean,
        std_error: (var / m).sqrt(),
    })
}

pub fn mc_zcb(
    spec: &ShortRateModelSpec,
    u_a: f64,
    u_b: f64,
    config: &McConfig,
) -> Result<McEstimate> {
    mc_price(
        spec,
        &Payoff::UnitBond,
        u_a,
        u_b,
        spec.x0,
        config,
        Execution::default(),
    )
}
