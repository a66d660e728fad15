use std::fs::File;
use std::io::{BufWriter, Write};
use std::time::Instant;

use gtfk::model::{ModelDocument, RateMap, ShortRateModelSpec};
use gtfk::par::{self, Execution};
use gtfk::pricing::{
    ad_density_profile, hw_green_function, hw_zcb_closed_form, price_with_solver,
    short_rate_solver, state_moments, Payoff, PricingOptions,
};
use gtfk::reference::{
    default_grid, mc_price, pde_density, pde_price, pde_zcb_refined, McConfig, PdeGrid,
};

use crate::format;
use crate::{Cli, CliError, Command, Common, DensityArgs, Method, Numerics, PriceArgs, TableArgs};

type Result<T> = std::result::Result<T, CliError>;

pub fn run(cli: &Cli) -> Result<()> {
    let doc = load_model(&cli.common)?;
    match &cli.command {
        Command::Price(args) => price(&cli.common, &doc, args, &[cli.common.method]),
        Command::Compare(args) => {
            let mut methods = vec![Method::Gtfk, Method::Pde, Method::Mc];
            if doc.rate_map == RateMap::Linear && parse_payoff(&args.payoff)? == PayoffKind::Bond {
                methods.push(Method::ClosedForm);
            }
            price(&cli.common, &doc, args, &methods)
        }
        Command::Density(args) => density(&cli.common, &doc, args),
        Command::Table1(args) => table1(&cli.common, &doc, args),
    }
}

fn load_model(common: &Common) -> Result<ModelDocument> {
    let doc = match &common.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| CliError::validation(format!("{}: {e}", path.display())))?;
            ModelDocument::from_json(&text)?
        }
        None => ModelDocument::table1(false),
    };
    if let Some(path) = &common.echo_model {
        std::fs::write(path, doc.to_json())?;
    }
    Ok(doc)
}

fn output(common: &Common) -> Result<Box<dyn Write>> {
    Ok(match &common.out {
        Some(path) => Box::new(BufWriter::new(File::create(path)?)),
        None => Box::new(std::io::stdout().lock()),
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum PayoffKind {
    Bond,
    Call(f64),
    Put(f64),
}

fn parse_payoff(s: &str) -> Result<PayoffKind> {
    let bad = || CliError::validation(format!("payoff `{s}`: expected bond, call:K or put:K"));
    let strike = |k: &str| {
        k.parse::<f64>()
            .ok()
            .filter(|k| k.is_finite())
            .ok_or_else(bad)
    };
    match s.split_once(':') {
        None if s == "bond" => Ok(PayoffKind::Bond),
        Some(("call", k)) => Ok(PayoffKind::Call(strike(k)?)),
        Some(("put", k)) => Ok(PayoffKind::Put(strike(k)?)),
        _ => Err(bad()),
    }
}

impl PayoffKind {
    fn payoff(self) -> Payoff {
        match self {
            PayoffKind::Bond => Payoff::UnitBond,
            PayoffKind::Call(k) => Payoff::Call(k),
            PayoffKind::Put(k) => Payoff::Put(k),
        }
    }
}

fn check_maturities(ts: &[f64]) -> Result<()> {
    if ts.is_empty() || ts.iter().any(|t| !(t.is_finite() && *t > 0.0)) {
        return Err(CliError::validation(
            "maturities must be positive and finite",
        ));
    }
    Ok(())
}

fn pricing_options(n: &Numerics) -> Result<PricingOptions> {
    let mut opts = PricingOptions::default();
    if let Some(r) = n.rel_tol {
        if !(r > 0.0 && r < 1.0) {
            return Err(CliError::validation("--rel-tol must lie in (0, 1)"));
        }
        opts.line.rel_tol = r;
    }
    Ok(opts)
}

fn pde_grid(spec: &ShortRateModelSpec, t: f64, n: &Numerics) -> gtfk::Result<PdeGrid> {
    let base = default_grid(spec, 0.0, t, spec.x0)?;
    let n_x = n.pde_nx.unwrap_or(base.n_x);
    let n_t = n
        .pde_steps_per_year
        .map(|s| ((s as f64 * t).ceil() as usize).max(1))
        .unwrap_or(base.n_t);
    PdeGrid::around(spec, 0.0, t, spec.x0, n_x, n_t)
}

struct Row {
    t: f64,
    value: f64,
    error: f64,
    method: Method,
    ms: f64,
    trace: Option<String>,
}

fn price_one(
    spec: &ShortRateModelSpec,
    payoff: &Payoff,
    t: f64,
    method: Method,
    n: &Numerics,
    trace: bool,
) -> Result<Row> {
    let start = Instant::now();
    let mut diag = None;
    let (value, error) = match method {
        Method::Gtfk => {
            let opts = pricing_options(n)?;
            let solver = short_rate_solver(spec, 0.0, t, &opts)?;
            let r = price_with_solver(&solver, payoff, spec.x0, &opts)?;
            if trace {
                let mut buf = format!("# gtfk diagnostics T={t}\n").into_bytes();
                solver.write_diagnostics_csv(&mut buf)?;
                diag = Some(String::from_utf8_lossy(&buf).into_owned());
            }
            (r.value, r.abs_error_estimate)
        }
        Method::Pde => {
            let grid = pde_grid(spec, t, n)?;
            let coarse = pde_price(spec, payoff, 0.0, t, spec.x0, &grid)?;
            let fine = pde_price(spec, payoff, 0.0, t, spec.x0, &grid.refined())?;
            ((4.0 * fine - coarse) / 3.0, (fine - coarse).abs() / 3.0)
        }
        Method::Mc => {
            let config = McConfig {
                n_paths: n.paths,
                n_steps: ((n.steps_per_year as f64 * t).ceil() as usize).max(1),
                seed: n.seed,
                antithetic: n.antithetic,
            };
            let e = mc_price(spec, payoff, 0.0, t, spec.x0, &config, Execution::default())?;
            (e.estimate, e.std_error)
        }
        Method::ClosedForm => {
            if !matches!(payoff, Payoff::UnitBond) {
                return Err(CliError::validation("closed_form prices bonds only"));
            }
            (hw_zcb_closed_form(spec, 0.0, t, spec.x0)?, 0.0)
        }
    };
    Ok(Row {
        t,
        value,
        error,
        method,
        ms: start.elapsed().as_secs_f64() * 1e3,
        trace: diag,
    })
}

fn price(common: &Common, doc: &ModelDocument, args: &PriceArgs, methods: &[Method]) -> Result<()> {
    check_maturities(&args.maturities)?;
    let payoff = parse_payoff(&args.payoff)?.payoff();
    let spec = doc.to_spec()?;
    if methods == [Method::ClosedForm] && spec.rate_map != RateMap::Linear {
        return Err(CliError::validation(
            "closed_form needs the linear rate map",
        ));
    }
    let jobs: Vec<(f64, Method)> = args
        .maturities
        .iter()
        .flat_map(|&t| methods.iter().map(move |&m| (t, m)))
        .collect();
    let rows = par::map(Execution::default(), &jobs, |&(t, m)| {
        price_one(&spec, &payoff, t, m, &args.numerics, common.debug_trace)
    });
    let mut w = csv::Writer::from_writer(output(common)?);
    w.write_record(["T", "value", "error_estimate", "method", "wall_time_ms"])?;
    for r in rows {
        let r = r?;
        if let Some(t) = &r.trace {
            eprint!("{t}");
        }
        let full = common.full_precision;
        w.write_record([
            format!("{}", r.t),
            format::value(r.value, full),
            format::estimate(r.error, full),
            r.method.name().to_string(),
            format!("{:.1}", r.ms),
        ])?;
    }
    w.flush()?;
    Ok(())
}

fn density(common: &Common, doc: &ModelDocument, args: &DensityArgs) -> Result<()> {
    let t = args.maturity;
    check_maturities(&[t])?;
    if args.points < 2 {
        return Err(CliError::validation("--points must be at least 2"));
    }
    let spec = doc.to_spec()?;
    let m = state_moments(&spec, 0.0, t, spec.x0);
    let lo = args.x_min.unwrap_or(m.terminal_mean - 6.0 * m.terminal_sd);
    let hi = args.x_max.unwrap_or(m.terminal_mean + 6.0 * m.terminal_sd);
    if !(lo < hi) {
        return Err(CliError::validation("need x_min < x_max"));
    }
    let xs: Vec<f64> = (0..args.points)
        .map(|i| lo + (hi - lo) * i as f64 / (args.points - 1) as f64)
        .collect();
    let psi = match common.method {
        Method::Gtfk => {
            let opts = pricing_options(&args.numerics)?;
            let solver = short_rate_solver(&spec, 0.0, t, &opts)?;
            let psi = ad_density_profile(&solver, spec.x0, &xs, &opts)?;
            if common.debug_trace {
                eprintln!("# gtfk diagnostics T={t}");
                solver.write_diagnostics_csv(std::io::stderr().lock())?;
            }
            psi
        }
        Method::Pde => {
            let grid = pde_grid(&spec, t, &args.numerics)?;
            let nodes = pde_density(&spec, 0.0, t, &grid, spec.x0)?;
            let (x0, dx) = (grid.x_min, grid.dx());
            xs.iter()
                .map(|&x| {
                    let s = (x - x0) / dx;
                    if !(s >= 0.0 && s <= (nodes.len() - 1) as f64) {
                        return Err(CliError::validation(format!(
                            "x = {x} outside the PDE grid"
                        )));
                    }
                    let i = (s.floor() as usize).min(nodes.len() - 2);
                    let f = s - i as f64;
                    Ok(nodes[i] * (1.0 - f) + nodes[i + 1] * f)
                })
                .collect::<Result<Vec<f64>>>()?
        }
        Method::ClosedForm => xs
            .iter()
            .map(|&x| hw_green_function(&spec, (0.0, spec.x0), (t, x)))
            .collect::<gtfk::Result<Vec<f64>>>()?,
        Method::Mc => {
            return Err(CliError::validation(
                "densities are available from gtfk, pde and closed_form",
            ))
        }
    };
    let mut w = csv::Writer::from_writer(output(common)?);
    w.write_record(["x", "psi"])?;
    for (x, p) in xs.iter().zip(&psi) {
        w.write_record([
            format::abscissa(*x, common.full_precision),
            format::density(*p, common.full_precision),
        ])?;
    }
    w.flush()?;
    Ok(())
}

fn table1(common: &Common, doc: &ModelDocument, args: &TableArgs) -> Result<()> {
    check_maturities(&args.maturities)?;
    let mut high = doc.clone();
    high.sigma.low *= 2.0;
    high.sigma.high *= 2.0;
    let specs = [("typical", doc.to_spec()?), ("high", high.to_spec()?)];
    let jobs: Vec<(usize, f64)> = (0..2)
        .flat_map(|v| args.maturities.iter().map(move |&t| (v, t)))
        .collect();
    let opts = pricing_options(&args.numerics)?;
    let rows = par::map(
        Execution::default(),
        &jobs,
        |&(v, t)| -> Result<(f64, f64)> {
            let spec = &specs[v].1;
            let solver = short_rate_solver(spec, 0.0, t, &opts)?;
            let g = price_with_solver(&solver, &Payoff::UnitBond, spec.x0, &opts)?.value;
            Ok((g, pde_zcb_refined(spec, 0.0, t)?))
        },
    );
    let mut w = csv::Writer::from_writer(output(common)?);
    w.write_record(["volatility", "T", "GTFK", "PDE", "Abs.Diff", "Rel.Diff"])?;
    for (&(v, t), r) in jobs.iter().zip(rows) {
        let (g, p) = r?;
        let [gs, ps, abs, rel] = format::table_cells(g, p, common.full_precision);
        w.write_record([specs[v].0.to_string(), format!("{t:.1}"), gs, ps, abs, rel])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn payoff_parsing() {
        assert_eq!(parse_payoff("bond").unwrap(), PayoffKind::Bond);
        assert_eq!(parse_payoff("call:0.05").unwrap(), PayoffKind::Call(0.05));
        assert_eq!(parse_payoff("put:0.1").unwrap(), PayoffKind::Put(0.1));
        for bad in ["swap", "call", "call:x", "put:inf", "bond:1"] {
            assert_eq!(parse_payoff(bad).unwrap_err().code, 2, "{bad}");
        }
    }

    #[test]
    fn maturities_must_be_positive() {
        assert!(check_maturities(&[0.5, 1.0]).is_ok());
        assert!(check_maturities(&[]).is_err());
        assert!(check_maturities(&[0.0]).is_err());
        assert!(check_maturities(&[f64::NAN]).is_err());
    }
}
