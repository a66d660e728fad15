//! Parameter curves, the short-rate model specification, and the map from a
//! short-rate model to the coefficients of a quadratic Hamiltonian.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Shared, thread-safe scalar function of time.
pub type Func = Arc<dyn Fn(f64) -> f64 + Send + Sync>;

pub fn func(f: impl Fn(f64) -> f64 + Send + Sync + 'static) -> Func {
    Arc::new(f)
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Piece {
    Flat(f64),
    Cubic {
        start: f64,
        width: f64,
        from: f64,
        to: f64,
    },
}

impl Piece {
    fn eval(&self, u: f64) -> [f64; 3] {
        match *self {
            Piece::Flat(v) => [v, 0.0, 0.0],
            Piece::Cubic {
                start,
                width,
                from,
                to,
            } => {
                let s = (u - start) / width;
                let jump = to - from;
                [
                    from + jump * s * s * (3.0 - 2.0 * s),
                    jump * 6.0 * s * (1.0 - s) / width,
                    jump * (6.0 - 12.0 * s) / (width * width),
                ]
            }
        }
    }
}

/// Piecewise-constant curve whose steps are replaced by C¹ cubics.
///
/// The value `v_i` holds up to the benchmark time `u_i`; on
/// `[u_i, u_i + δu]` a cubic carries it to `v_{i+1}`. After the last step the
/// curve is flat.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamCurve {
    benchmark_times: Vec<f64>,
    benchmark_values: Vec<f64>,
    smoothing_width: f64,
    breaks: Vec<f64>,
    pieces: Vec<Piece>,
}

impl ParamCurve {
    /// Curve with an arbitrary value per benchmark.
    pub fn from_steps(times: &[f64], values: &[f64], delta_u: f64) -> Result<Self> {
        if times.is_empty() || times.len() != values.len() {
            return Err(Error::validation(
                "benchmark times and values must be non-empty and of equal length",
            ));
        }
        if !(delta_u.is_finite() && delta_u > 0.0) {
            return Err(Error::validation(format!(
                "smoothing width must be positive, got {delta_u}"
            )));
        }
        if times.iter().chain(values).any(|v| !v.is_finite()) {
            return Err(Error::validation("benchmark data must be finite"));
        }
        if times[0] < 0.0 {
            return Err(Error::validation("benchmark times must be non-negative"));
        }
        for w in times.windows(2) {
            if w[1] <= w[0] {
                return Err(Error::validation(
                    "benchmark times must be strictly increasing",
                ));
            }
            if w[1] - w[0] <= delta_u {
                return Err(Error::validation(format!(
                    "smoothing width {delta_u} must be smaller than the gap {}",
                    w[1] - w[0]
                )));
            }
        }
        let mut breaks = vec![0.0];
        let mut pieces = vec![Piece::Flat(values[0])];
        for i in 0..times.len() - 1 {
            breaks.push(times[i]);
            pieces.push(Piece::Cubic {
                start: times[i],
                width: delta_u,
                from: values[i],
                to: values[i + 1],
            });
            breaks.push(times[i] + delta_u);
            pieces.push(Piece::Flat(values[i + 1]));
        }
        Ok(ParamCurve {
            benchmark_times: times.to_vec(),
            benchmark_values: values.to_vec(),
            smoothing_width: delta_u,
            breaks,
            pieces,
        })
    }

    pub fn constant(v: f64) -> Self {
        ParamCurve {
            benchmark_times: vec![0.0],
            benchmark_values: vec![v],
            smoothing_width: 1.0,
            breaks: vec![0.0],
            pieces: vec![Piece::Flat(v)],
        }
    }

    pub fn benchmark_times(&self) -> &[f64] {
        &self.benchmark_times
    }

    pub fn benchmark_values(&self) -> &[f64] {
        &self.benchmark_values
    }

    pub fn smoothing_width(&self) -> f64 {
        self.smoothing_width
    }

    /// Times where the active polynomial changes.
    pub fn knots(&self) -> &[f64] {
        &self.breaks[1..]
    }

    fn piece(&self, u: f64) -> &Piece {
        let i = self.breaks.partition_point(|&b| b <= u);
        &self.pieces[i.saturating_sub(1)]
    }

    /// Value, first and second derivative at `u` (no domain check).
    pub fn eval_all(&self, u: f64) -> [f64; 3] {
        self.piece(u).eval(u)
    }

    pub fn value(&self, u: f64) -> f64 {
        self.eval_all(u)[0]
    }

    pub fn derivative(&self, u: f64) -> f64 {
        self.eval_all(u)[1]
    }

    /// Value (`order = 0`) or first derivative (`order = 1`).
    pub fn eval(&self, u: f64, order: u8) -> Result<f64> {
        if !(u.is_finite() && u >= 0.0) {
            return Err(Error::Domain {
                value: u,
                domain: "[0, inf)".into(),
            });
        }
        match order {
            0 | 1 => Ok(self.eval_all(u)[order as usize]),
            _ => Err(Error::validation(format!(
                "derivative order {order} not supported"
            ))),
        }
    }

    /// The same curve moved up by `c`.
    pub fn offset(&self, c: f64) -> Self {
        let mut out = self.clone();
        out.benchmark_values.iter_mut().for_each(|v| *v += c);
        for p in &mut out.pieces {
            match p {
                Piece::Flat(v) => *v += c,
                Piece::Cubic { from, to, .. } => {
                    *from += c;
                    *to += c;
                }
            }
        }
        out
    }

    pub fn min_value(&self) -> f64 {
        self.benchmark_values
            .iter()
            .copied()
            .fold(f64::INFINITY, f64::min)
    }
}

/// Curve through linearly interpolated benchmark values, stepped and smoothed.
pub fn build_curve(
    benchmark_times: &[f64],
    value_at_shortest: f64,
    value_at_longest: f64,
    delta_u: f64,
) -> Result<ParamCurve> {
    let n = benchmark_times.len();
    if n == 1 && value_at_shortest != value_at_longest {
        return Err(Error::validation(
            "a single benchmark needs equal end values",
        ));
    }
    let values: Vec<f64> = match n {
        0 => return Err(Error::validation("at least one benchmark time is required")),
        1 => vec![value_at_shortest],
        _ => {
            let (t0, t1) = (benchmark_times[0], benchmark_times[n - 1]);
            benchmark_times
                .iter()
                .map(|&t| {
                    value_at_shortest
                        + (value_at_longest - value_at_shortest) * (t - t0) / (t1 - t0)
                })
                .collect()
        }
    };
    ParamCurve::from_steps(benchmark_times, &values, delta_u)
}

pub fn eval_curve(curve: &ParamCurve, u: f64, order: u8) -> Result<f64> {
    curve.eval(u, order)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RateMap {
    /// r = x (Gaussian model).
    Linear,
    /// r = e^x (Black-Karasinski).
    Exponential,
}

impl RateMap {
    pub fn rate(self, x: f64) -> f64 {
        match self {
            RateMap::Linear => x,
            RateMap::Exponential => x.exp(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EndValues {
    pub low: f64,
    pub high: f64,
}

/// JSON form of a model specification.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelDocument {
    pub benchmarks: Vec<f64>,
    pub delta_u: f64,
    pub kappa: EndValues,
    pub theta: EndValues,
    pub sigma: EndValues,
    pub rate_map: RateMap,
    pub x0: f64,
    pub lambda: f64,
}

pub const TABLE1_BENCHMARKS: [f64; 9] = [0.25, 0.5, 1.0, 2.0, 5.0, 10.0, 15.0, 20.0, 30.0];
pub const TABLE1_MATURITIES: [f64; 9] = [0.1, 0.5, 1.0, 2.0, 3.0, 5.0, 10.0, 20.0, 30.0];

impl ModelDocument {
    /// Black-Karasinski benchmark setup; `high_vol` doubles the volatility.
    pub fn table1(high_vol: bool) -> Self {
        let scale = if high_vol { 2.0 } else { 1.0 };
        ModelDocument {
            benchmarks: TABLE1_BENCHMARKS.to_vec(),
            delta_u: 1.0 / 512.0,
            kappa: EndValues {
                low: 0.02,
                high: 0.01,
            },
            theta: EndValues {
                low: 0.04f64.ln(),
                high: 0.06f64.ln(),
            },
            sigma: EndValues {
                low: 0.5 * scale,
                high: 0.4 * scale,
            },
            rate_map: RateMap::Exponential,
            x0: 0.06f64.ln(),
            lambda: 1.0,
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::validation(format!("model document: {e}")))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("model document serializes")
    }

    pub fn to_spec(&self) -> Result<ShortRateModelSpec> {
        let t = &self.benchmarks;
        ShortRateModelSpec::new(
            build_curve(t, self.kappa.low, self.kappa.high, self.delta_u)?,
            build_curve(t, self.theta.low, self.theta.high, self.delta_u)?,
            build_curve(t, self.sigma.low, self.sigma.high, self.delta_u)?,
            self.rate_map,
            self.x0,
            self.lambda,
        )
    }
}

/// Model parameters and their first two derivatives at one time.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ModelSample {
    pub kappa: [f64; 3],
    pub theta: [f64; 3],
    pub sigma: [f64; 3],
}

/// dX = κ(u)(θ(u) − X)du + σ(u)dW with short rate r(X).
#[derive(Clone, Debug, PartialEq)]
pub struct ShortRateModelSpec {
    pub kappa: ParamCurve,
    pub theta: ParamCurve,
    pub sigma: ParamCurve,
    pub rate_map: RateMap,
    pub x0: f64,
    pub lambda: f64,
}

impl ShortRateModelSpec {
    pub fn new(
        kappa: ParamCurve,
        theta: ParamCurve,
        sigma: ParamCurve,
        rate_map: RateMap,
        x0: f64,
        lambda: f64,
    ) -> Result<Self> {
        if sigma.min_value() <= 0.0 {
            return Err(Error::validation("sigma must be positive"));
        }
        if !(x0.is_finite() && lambda.is_finite()) {
            return Err(Error::validation("x0 and lambda must be finite"));
        }
        Ok(ShortRateModelSpec {
            kappa,
            theta,
            sigma,
            rate_map,
            x0,
            lambda,
        })
    }

    pub fn with_lambda(&self, lambda: f64) -> Self {
        ShortRateModelSpec {
            lambda,
            ..self.clone()
        }
    }

    /// The model for X − c. For the linear map the rate loses the constant
    /// `c`, which [`ShortRateModelSpec::shift_rate`] returns; for the
    /// exponential map λ absorbs e^c.
    pub fn shifted(&self, c: f64) -> Self {
        ShortRateModelSpec {
            theta: self.theta.offset(-c),
            x0: self.x0 - c,
            lambda: match self.rate_map {
                RateMap::Linear => self.lambda,
                RateMap::Exponential => self.lambda * c.exp(),
            },
            ..self.clone()
        }
    }

    /// λ-weighted rate removed by [`ShortRateModelSpec::shifted`].
    pub fn shift_rate(&self, c: f64) -> f64 {
        match self.rate_map {
            RateMap::Linear => self.lambda * c,
            RateMap::Exponential => 0.0,
        }
    }

    pub fn sample(&self, u: f64) -> ModelSample {
        ModelSample {
            kappa: self.kappa.eval_all(u),
            theta: self.theta.eval_all(u),
            sigma: self.sigma.eval_all(u),
        }
    }

    pub fn rate(&self, x: f64) -> f64 {
        self.rate_map.rate(x)
    }

    /// Mass m = 1/σ².
    pub fn mass(&self, u: f64) -> f64 {
        let s = self.sigma.value(u);
        1.0 / (s * s)
    }

    /// ω² = κ² − κ̇ + 2κσ̇/σ.
    pub fn omega_sq(&self, u: f64) -> f64 {
        let s = self.sample(u);
        s.kappa[0] * s.kappa[0] - s.kappa[1] + 2.0 * s.kappa[0] * s.sigma[1] / s.sigma[0]
    }

    /// Linear force γ of the quadratic part, including λ for the Linear map.
    pub fn gamma(&self, u: f64) -> f64 {
        let s = self.sample(u);
        let (k, t, sg) = (s.kappa, s.theta, s.sigma);
        let q = k[0] * t[0] / (sg[0] * sg[0]);
        let q_dot = (k[1] * t[0] + k[0] * t[1]) / (sg[0] * sg[0])
            - 2.0 * k[0] * t[0] * sg[1] / (sg[0] * sg[0] * sg[0]);
        let linear = match self.rate_map {
            RateMap::Linear => self.lambda,
            RateMap::Exponential => 0.0,
        };
        -k[0] * q + q_dot + linear
    }

    /// Constant term w = κ²θ²/2σ² − κ/2.
    pub fn w(&self, u: f64) -> f64 {
        let s = self.sample(u);
        let (k, t, sg) = (s.kappa[0], s.theta[0], s.sigma[0]);
        0.5 * k * k * t * t / (sg * sg) - 0.5 * k
    }

    /// [μ, ω², γ, w] from a single evaluation of the three curves.
    pub fn quadratic_sample(&self, u: f64) -> [f64; 4] {
        let s = self.sample(u);
        let (k, t, sg) = (s.kappa, s.theta, s.sigma);
        let inv = 1.0 / sg[0];
        let q = k[0] * t[0] * inv * inv;
        let q_dot =
            (k[1] * t[0] + k[0] * t[1]) * inv * inv - 2.0 * k[0] * t[0] * sg[1] * inv * inv * inv;
        let linear = match self.rate_map {
            RateMap::Linear => self.lambda,
            RateMap::Exponential => 0.0,
        };
        [
            inv,
            k[0] * k[0] - k[1] + 2.0 * k[0] * sg[1] * inv,
            -k[0] * q + q_dot + linear,
            0.5 * k[0] * k[0] * t[0] * t[0] * inv * inv - 0.5 * k[0],
        ]
    }

    /// Every time at which some curve switches polynomial, sorted.
    pub fn all_knots(&self) -> Vec<f64> {
        let mut k: Vec<f64> = self
            .kappa
            .knots()
            .iter()
            .chain(self.theta.knots())
            .chain(self.sigma.knots())
            .copied()
            .collect();
        k.sort_by(f64::total_cmp);
        k.dedup();
        k
    }

    /// Times in (u_a, u_b) where any curve switches polynomial, plus the ends.
    pub fn knot_partition(&self, u_a: f64, u_b: f64) -> Vec<f64> {
        knot_partition(self, u_a, u_b)
    }
}

pub fn knot_partition(spec: &ShortRateModelSpec, u_a: f64, u_b: f64) -> Vec<f64> {
    let inner = spec
        .kappa
        .knots()
        .iter()
        .chain(spec.theta.knots())
        .chain(spec.sigma.knots())
        .copied();
    merge_knots(u_a, u_b, inner)
}

/// Sorted, de-duplicated `{u_a, u_b} ∪ (knots ∩ (u_a, u_b))`.
pub fn merge_knots(u_a: f64, u_b: f64, knots: impl IntoIterator<Item = f64>) -> Vec<f64> {
    let eps = 1e-13 * (1.0 + u_b.abs());
    let mut out: Vec<f64> = knots
        .into_iter()
        .filter(|&k| k > u_a + eps && k < u_b - eps)
        .collect();
    out.push(u_a);
    out.push(u_b);
    out.sort_by(f64::total_cmp);
    out.dedup_by(|a, b| (*a - *b).abs() <= eps);
    out
}

/// Coefficients of H = aẋ² + 2bẋx + cx² + 2dẋ + 2ex + f (+ λx for the
/// linear short-rate map, kept separately in `lambda_linear`).
#[derive(Clone)]
pub struct QuadraticCoeffs {
    pub a: Func,
    pub a_dot: Func,
    pub b: Func,
    pub b_dot: Func,
    pub c: Func,
    pub d: Func,
    pub d_dot: Func,
    pub e: Func,
    pub f: Func,
    pub lambda_linear: f64,
    /// Times where the coefficients switch polynomial pieces.
    pub knots: Vec<f64>,
}

impl QuadraticCoeffs {
    pub fn m(&self, u: f64) -> f64 {
        2.0 * (self.a)(u)
    }

    pub fn mu(&self, u: f64) -> f64 {
        self.m(u).sqrt()
    }

    /// μ̇ for μ = √(2a).
    pub fn mu_dot(&self, u: f64) -> f64 {
        (self.a_dot)(u) / self.mu(u)
    }

    pub fn omega_sq(&self, u: f64) -> f64 {
        2.0 * ((self.c)(u) - (self.b_dot)(u)) / self.m(u)
    }

    pub fn gamma(&self, u: f64) -> f64 {
        2.0 * ((self.e)(u) - (self.d_dot)(u)) + self.lambda_linear
    }

    pub fn w(&self, u: f64) -> f64 {
        (self.f)(u)
    }

    /// Hamiltonian value at (x, ẋ, u), including the λx term.
    pub fn hamiltonian(&self, x: f64, xdot: f64, u: f64) -> f64 {
        (self.a)(u) * xdot * xdot
            + 2.0 * (self.b)(u) * xdot * x
            + (self.c)(u) * x * x
            + 2.0 * (self.d)(u) * xdot
            + 2.0 * (self.e)(u) * x
            + (self.f)(u)
            + self.lambda_linear * x
    }
}

impl std::fmt::Debug for QuadraticCoeffs {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("QuadraticCoeffs")
            .field("lambda_linear", &self.lambda_linear)
            .field("knots", &self.knots)
            .finish_non_exhaustive()
    }
}

/// Quadratic part of the path-integral Hamiltonian of a short-rate model.
pub fn hamiltonian_coeffs(spec: &ShortRateModelSpec) -> QuadraticCoeffs {
    let s = Arc::new(spec.clone());
    let mk = |g: fn(&ModelSample) -> f64| -> Func {
        let s = Arc::clone(&s);
        Arc::new(move |u| g(&s.sample(u)))
    };
    QuadraticCoeffs {
        a: mk(|p| 0.5 / (p.sigma[0] * p.sigma[0])),
        a_dot: mk(|p| -p.sigma[1] / p.sigma[0].powi(3)),
        b: mk(|p| 0.5 * p.kappa[0] / (p.sigma[0] * p.sigma[0])),
        b_dot: mk(|p| {
            0.5 * p.kappa[1] / (p.sigma[0] * p.sigma[0])
                - p.kappa[0] * p.sigma[1] / p.sigma[0].powi(3)
        }),
        c: mk(|p| 0.5 * p.kappa[0] * p.kappa[0] / (p.sigma[0] * p.sigma[0])),
        d: mk(|p| -0.5 * p.kappa[0] * p.theta[0] / (p.sigma[0] * p.sigma[0])),
        d_dot: mk(|p| {
            let (k, t, s) = (p.kappa, p.theta, p.sigma);
            -0.5 * (k[1] * t[0] + k[0] * t[1]) / (s[0] * s[0]) + k[0] * t[0] * s[1] / s[0].powi(3)
        }),
        e: mk(|p| -0.5 * p.kappa[0] * p.kappa[0] * p.theta[0] / (p.sigma[0] * p.sigma[0])),
        f: mk(|p| 0.5 * (p.kappa[0] * p.theta[0] / p.sigma[0]).powi(2) - 0.5 * p.kappa[0]),
        lambda_linear: match spec.rate_map {
            RateMap::Linear => spec.lambda,
            RateMap::Exponential => 0.0,
        },
        knots: spec.all_knots(),
    }
}
