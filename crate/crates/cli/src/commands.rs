use std::fs::{self, File};
use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use ouexec::closed_form::{brownian_a, MertonSolution};
use ouexec::estimation::{fit_bachelier, fit_var1, johansen_trace, var1_to_ou};
use ouexec::io::{fmt_f64, read_market_path, read_riccati, write_histogram, write_market_path, write_riccati, write_trace, PathReadOptions};
use ouexec::model::{terminal_wealth, validate_spec};
use ouexec::riccati::{check_bounds, solve_backward, RiccatiSolution};
use ouexec::simulation::{monte_carlo_pnl, path_rng, rollout, simulate_path, McConfig};
use ouexec::strategy::{build_strategy, Mode, Strategy, StrategyInputs, StrategyKind};
use ouexec::{Error, ExecutionSpec, ExecutionState, MarketPath, OuParams, Result, TimeGrid};
use serde_json::{json, Value};

use crate::manifest::{io_context, Command, RunManifest};

/// Tolerance handed to the bound certificate, relative to the spectral
/// radius of the bounds.
const BOUNDS_TOL: f64 = 1e-6;

struct Out {
    dir: PathBuf,
    written: Vec<String>,
}

impl Out {
    fn create(dir: &str) -> Result<Self> {
        let dir = PathBuf::from(dir);
        fs::create_dir_all(&dir).map_err(|e| io_context(e, &dir))?;
        Ok(Out { dir, written: Vec::new() })
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    fn file(&mut self, name: &str) -> Result<File> {
        let p = self.path(name);
        self.written.push(name.to_string());
        File::create(&p).map_err(|e| io_context(e, &p))
    }

    fn json(&mut self, name: &str, value: &impl serde::Serialize) -> Result<()> {
        let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::Parse(e.to_string()))?;
        text.push('\n');
        let p = self.path(name);
        self.written.push(name.to_string());
        fs::write(&p, text).map_err(|e| io_context(e, &p))
    }

    fn text(&mut self, name: &str, text: &str) -> Result<()> {
        let p = self.path(name);
        self.written.push(name.to_string());
        fs::write(&p, text).map_err(|e| io_context(e, &p))
    }
}

/// Runs the manifest and writes its outputs, the manifest itself and
/// `timing.json` into the manifest's output directory. Every file except
/// `timing.json` is a deterministic function of the manifest and its input
/// files.
pub fn execute(m: &RunManifest) -> Result<()> {
    let start = Instant::now();
    let mut out = Out::create(&m.out_dir)?;
    let mut timing = serde_json::Map::new();
    match m.command {
        Command::Estimate => estimate(m, &mut out)?,
        Command::Solve => solve(m, &mut out, &mut timing)?,
        Command::Schedule => schedule(m, &mut out, &mut timing)?,
        Command::Montecarlo => montecarlo(m, &mut out, &mut timing)?,
        Command::Merton => merton(m, &mut out)?,
    }
    out.json("manifest.json", m)?;
    timing.insert("total_seconds".into(), json!(start.elapsed().as_secs_f64()));
    out.json("timing.json", &Value::Object(timing))?;
    println!("{}: wrote {} to {}", m.command.name(), out.written.join(", "), out.dir.display());
    Ok(())
}

fn input<'a>(m: &'a RunManifest, role: &str) -> Option<&'a Path> {
    m.inputs.get(role).map(Path::new)
}

fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path).map(BufReader::new).map_err(|e| io_context(e, path))
}

fn read_prices(path: &Path, bars_per_day: Option<f64>) -> Result<(MarketPath, ouexec::io::TimeFormat)> {
    read_market_path(open(path)?, PathReadOptions { bars_per_day })
        .map_err(|e| match e {
            Error::Parse(msg) => Error::Parse(format!("{}: {msg}", path.display())),
            other => other,
        })
}

fn spec(m: &RunManifest) -> Result<(OuParams, ExecutionSpec)> {
    let ou = m.params.clone().ok_or_else(|| Error::Validation("manifest has no params".into()))?;
    let exec = m.exec.clone().ok_or_else(|| Error::Validation("manifest has no exec".into()))?;
    let violations = validate_spec(&ou, &exec);
    if !violations.is_empty() {
        let msgs: Vec<String> = violations.iter().map(|v| v.message.clone()).collect();
        return Err(Error::Validation(msgs.join("; ")));
    }
    Ok((ou, exec))
}

fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

fn from_rows(r: &[Vec<f64>], what: &str) -> Result<DMatrix<f64>> {
    let n = r.len();
    let c = r.first().map_or(0, Vec::len);
    if r.iter().any(|x| x.len() != c) {
        return Err(Error::Validation(format!("{what}: ragged rows")));
    }
    Ok(DMatrix::from_fn(n, c, |i, j| r[i][j]))
}

fn vector(v: &Option<Vec<f64>>, d: usize, what: &str) -> Result<Option<DVector<f64>>> {
    match v {
        Some(x) if x.len() != d => Err(Error::Validation(format!("{what} has {} entries, expected {d}", x.len()))),
        Some(x) => Ok(Some(DVector::from_column_slice(x))),
        None => Ok(None),
    }
}

fn estimate(m: &RunManifest, out: &mut Out) -> Result<()> {
    let prices = input(m, "prices").ok_or_else(|| Error::Validation("estimate needs a price file".into()))?;
    let (path, format) = read_prices(prices, m.bars_per_day)?;
    let fit = fit_var1(&path)?;
    let ou = var1_to_ou(&fit)?;
    let sigma_ac = fit_bachelier(&path)?;
    let d = path.dim();
    let johansen = if (2..=5).contains(&d) { Some(johansen_trace(&path)?) } else { None };

    out.json("params.json", &ou)?;
    let mut diag = json!({
        "assets": path.names,
        "time_format": format,
        "var1": fit,
        "sigmaAC": rows(&sigma_ac),
    });
    if let Some(j) = &johansen {
        let table: Vec<Value> = j
            .table()
            .into_iter()
            .map(|(hypothesis, stat, crit, verdict)| {
                json!({
                    "null_hypothesis": hypothesis,
                    "trace_statistic": stat,
                    "critical_value": crit,
                    "conclusion": verdict,
                })
            })
            .collect();
        diag["johansen"] = json!({
            "table": table,
            "selected_rank": j.selected_rank,
            "eigenvalues": j.eigenvalues,
            "coint_vectors": rows(&j.coint_vectors),
            "n_obs": j.n_obs,
        });
        println!("{:<16} {:>18} {:>15}  Conclusion", "Null Hypothesis", "Trace statistics", "Critical Value");
        for (hypothesis, stat, crit, verdict) in j.table() {
            println!("{hypothesis:<16} {stat:>18.3} {crit:>15.3}  {verdict}");
        }
    }
    out.json("diagnostics.json", &diag)
}

fn solve(m: &RunManifest, out: &mut Out, timing: &mut serde_json::Map<String, Value>) -> Result<()> {
    let (ou, exec) = spec(m)?;
    let cfg = m.strategy.clone().ok_or_else(|| Error::Validation("manifest has no strategy".into()))?;
    let (resolved, _) = cfg.resolve(&exec, &DVector::zeros(ou.dim()))?;
    let steps = m.steps.unwrap_or(5000);
    let t0 = Instant::now();
    let sol = solve_backward(&ou, &resolved, &TimeGrid::new(resolved.horizon, steps)?)?;
    timing.insert("solve_seconds".into(), json!(t0.elapsed().as_secs_f64()));

    write_riccati(out.file("riccati.csv")?, &sol)?;
    let cert = check_bounds(&sol, &ou, &resolved, BOUNDS_TOL).ok();
    let closed_form = if ou.r.iter().all(|&x| x == 0.0) {
        let mut worst = 0.0f64;
        for (k, s) in sol.states.iter().enumerate() {
            let want = brownian_a(&ou, &resolved, sol.grid.time(k))?;
            worst = worst.max((&s.a - &want).amax() / want.amax().max(f64::MIN_POSITIVE));
        }
        Some(json!({ "max_relative_error_A": worst }))
    } else {
        None
    };
    let s0 = &sol.states[0];
    let report = json!({
        "mode": cfg.mode,
        "horizon": resolved.horizon,
        "steps": steps,
        "boundsOk": sol.bounds_ok,
        "bounds_margin": sol.bounds_margin,
        "bounds_note": sol.bounds_note,
        "bounds_certificate": cert,
        "closed_form_check": closed_form,
        "stats": sol.stats,
        "at_t0": {
            "A": rows(&s0.a),
            "B": rows(&s0.b),
            "C": rows(&s0.c),
            "D": s0.d.as_slice(),
            "E": s0.e.as_slice(),
            "F": s0.f,
        },
    });
    out.json("solution.json", &report)
}

fn root_kind(k: &StrategyKind) -> &StrategyKind {
    match k {
        StrategyKind::Scaled { base, .. } => root_kind(base),
        other => other,
    }
}

/// Resolves the strategy a manifest describes, solving the coefficient
/// equations when the control needs them and no solution file is given.
fn prepare(m: &RunManifest, timing: &mut serde_json::Map<String, Value>) -> Result<(OuParams, Strategy)> {
    let (ou, exec) = spec(m)?;
    let d = ou.dim();
    let cfg = m.strategy.clone().ok_or_else(|| Error::Validation("manifest has no strategy".into()))?;
    let q0 = vector(&m.q0, d, "q0")?;
    if cfg.mode == Mode::Liquidation && q0.is_none() && cfg.overrides.q0.is_none() {
        return Err(Error::Validation("liquidation needs an initial inventory (--q0)".into()));
    }
    let q0 = q0.unwrap_or_else(|| DVector::zeros(d));
    let (resolved, _) = cfg.resolve(&exec, &q0)?;

    let solution: Option<RiccatiSolution> = if *root_kind(&cfg.kind) == StrategyKind::OptimalOU {
        Some(match input(m, "solution") {
            Some(p) => read_riccati(open(p)?).map_err(|e| match e {
                Error::Parse(msg) => Error::Parse(format!("{}: {msg}", p.display())),
                other => other,
            })?,
            None => {
                let t0 = Instant::now();
                let sol = solve_backward(&ou, &resolved, &TimeGrid::new(resolved.horizon, m.steps.unwrap_or(5000))?)?;
                timing.insert("solve_seconds".into(), json!(t0.elapsed().as_secs_f64()));
                sol
            }
        })
    } else {
        None
    };
    let sigma_ac = m.sigma_ac.as_deref().map(|r| from_rows(r, "sigmaAC")).transpose()?;
    let inputs = StrategyInputs {
        ou: &ou,
        sigma_ac: sigma_ac.as_ref(),
        solution: solution.as_ref(),
    };
    let strategy = build_strategy(&cfg, inputs, &exec, &q0)?;
    Ok((ou, strategy))
}

fn schedule(m: &RunManifest, out: &mut Out, timing: &mut serde_json::Map<String, Value>) -> Result<()> {
    let (ou, strategy) = prepare(m, timing)?;
    let exec = &strategy.exec;
    let path = match input(m, "prices") {
        Some(p) => read_prices(p, m.bars_per_day)?.0,
        None => {
            let s0 = vector(&m.s0, ou.dim(), "s0")?.unwrap_or_else(|| ou.sbar.clone());
            let grid = TimeGrid::new(exec.horizon, m.bars.unwrap_or(840))?;
            let path = simulate_path(&ou, &grid, &s0, &mut path_rng(m.seed.unwrap_or(42), 0))?;
            write_market_path(out.file("prices.csv")?, &path)?;
            path
        }
    };
    let initial = ExecutionState::initial(strategy.q0.clone(), path.price(0), 0.0);
    let t0 = Instant::now();
    let trace = rollout(&strategy, exec, &initial, &path)?;
    timing.insert("rollout_seconds".into(), json!(t0.elapsed().as_secs_f64()));
    write_trace(out.file("trace.csv")?, &trace)?;

    let n = trace.steps();
    let last = trace.state(n);
    let start_wealth = terminal_wealth(&trace.state(0), exec, true) + initial.q.dot(&(&exec.gamma_tilde * &initial.q));
    let summary = json!({
        "strategy": strategy.config,
        "q0": strategy.q0.as_slice(),
        "bars": n,
        "terminal_inventory": last.q.as_slice(),
        "execution_cost": trace.execution_cost(exec),
        "pnl": trace.pnl[n],
        "penalized_pnl": terminal_wealth(&last, exec, true) - start_wealth,
        "terminal_wealth_market": terminal_wealth(&last, exec, true),
        "terminal_wealth_fundamental": terminal_wealth(&trace.final_fundamental_state(), exec, false),
    });
    out.json("summary.json", &summary)
}

fn montecarlo(m: &RunManifest, out: &mut Out, timing: &mut serde_json::Map<String, Value>) -> Result<()> {
    let (ou, strategy) = prepare(m, timing)?;
    let s0 = vector(&m.s0, ou.dim(), "s0")?.unwrap_or_else(|| ou.sbar.clone());
    let cfg = McConfig {
        n_paths: m.paths.unwrap_or(1500),
        seed: m.seed.unwrap_or(42),
        steps: m.bars.unwrap_or(840),
        bins: m.bins.unwrap_or(60),
        workers: m.workers,
    };
    let initial = ExecutionState::initial(strategy.q0.clone(), s0, 0.0);
    let t0 = Instant::now();
    let summary = monte_carlo_pnl(&strategy, &ou, &strategy.exec, &initial, &cfg)?;
    timing.insert("simulation_seconds".into(), json!(t0.elapsed().as_secs_f64()));
    out.json("pnl_summary.json", &summary)?;
    write_histogram(out.file("histogram.csv")?, &summary.histogram)?;
    println!(
        "montecarlo: {} paths, mean {:.2}, stdev {:.2}, skewness {:.3}",
        summary.n_paths, summary.mean, summary.stdev, summary.skewness
    );
    Ok(())
}

fn merton(m: &RunManifest, out: &mut Out) -> Result<()> {
    let ou = m.params.clone().ok_or_else(|| Error::Validation("manifest has no params".into()))?;
    let exec = m.exec.clone().ok_or_else(|| Error::Validation("manifest has no exec".into()))?;
    let d = ou.dim();
    let sol = MertonSolution::new(&ou, exec.risk_aversion, exec.horizon)?;
    let (times, prices): (Vec<f64>, Vec<DVector<f64>>) = match input(m, "prices") {
        Some(p) => {
            let (path, _) = read_prices(p, m.bars_per_day)?;
            let t0 = path.times[0];
            ((0..path.len()).map(|k| path.times[k] - t0).collect(), (0..path.len()).map(|k| path.price(k)).collect())
        }
        None => {
            let s = vector(&m.s0, d, "s0")?.unwrap_or_else(|| ou.sbar.clone());
            let grid = TimeGrid::new(exec.horizon, m.steps.unwrap_or(100))?;
            (grid.times(), vec![s; grid.steps() + 1])
        }
    };
    let mut csv = String::from("t");
    for i in 1..=d {
        csv.push_str(&format!(",S_{i}"));
    }
    for i in 1..=d {
        csv.push_str(&format!(",qstar_{i}"));
    }
    csv.push_str(",theta\n");
    for (t, s) in times.iter().zip(&prices) {
        let q = sol.position(*t, s)?;
        let mut row = vec![fmt_f64(*t)];
        row.extend(s.iter().map(|&x| fmt_f64(x)));
        row.extend(q.iter().map(|&x| fmt_f64(x)));
        row.push(fmt_f64(sol.theta(*t, s)?));
        csv.push_str(&row.join(","));
        csv.push('\n');
    }
    out.text("merton.csv", &csv)?;
    let report = json!({
        "gamma": exec.risk_aversion,
        "horizon": exec.horizon,
        "M": rows(sol.m()),
        "Chat_t0": rows(&sol.chat(0.0)?),
        "Ehat_t0": sol.ehat(0.0)?.as_slice(),
        "Fhat_t0": sol.fhat(0.0)?,
    });
    out.json("merton.json", &report)
}
