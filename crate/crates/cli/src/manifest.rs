use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use ouexec::strategy::{Mode, StrategyConfig, StrategyKind};
use ouexec::{Error, ExecutionSpec, OuParams, Result};
use serde::{Deserialize, Serialize};

use crate::{Cmd, KindArg, ModeArg, SpecArgs, StrategyArgs};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Command {
    Estimate,
    Solve,
    Schedule,
    Montecarlo,
    Merton,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Estimate => "estimate",
            Command::Solve => "solve",
            Command::Schedule => "schedule",
            Command::Montecarlo => "montecarlo",
            Command::Merton => "merton",
        }
    }
}

/// Everything a run depends on. Parameters are stored inline so the manifest
/// alone reproduces the outputs; price and solution files are referenced by
/// path.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: Command,
    pub tool_version: String,
    /// Input files by role (`prices`, `params`, `exec`, `solution`, ...).
    pub inputs: BTreeMap<String, String>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub params: Option<OuParams>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub exec: Option<ExecutionSpec>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub strategy: Option<StrategyConfig>,
    #[serde(rename = "sigmaAC", skip_serializing_if = "Option::is_none", default)]
    pub sigma_ac: Option<Vec<Vec<f64>>>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub q0: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub s0: Option<Vec<f64>>,
    /// Riccati grid steps, or Merton report steps.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub steps: Option<usize>,
    /// Bars per simulated path.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub bars: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub bars_per_day: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub paths: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub seed: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub bins: Option<usize>,
    /// Recorded for reference; outputs do not depend on it.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub workers: Option<usize>,
    pub out_dir: String,
}

impl RunManifest {
    fn new(command: Command, out: &Path) -> Self {
        RunManifest {
            command,
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            inputs: BTreeMap::new(),
            params: None,
            exec: None,
            strategy: None,
            sigma_ac: None,
            q0: None,
            s0: None,
            steps: None,
            bars: None,
            bars_per_day: None,
            paths: None,
            seed: None,
            bins: None,
            workers: None,
            out_dir: out.to_string_lossy().into_owned(),
        }
    }

    fn input(&mut self, role: &str, path: &Path) {
        self.inputs.insert(role.to_string(), path.to_string_lossy().into_owned());
    }

    fn load_spec(&mut self, spec: &SpecArgs) -> Result<()> {
        self.input("params", &spec.params);
        self.input("exec", &spec.exec);
        self.params = Some(read_json(&spec.params)?);
        self.exec = Some(read_json(&spec.exec)?);
        Ok(())
    }

    fn load_strategy(&mut self, s: &StrategyArgs, mode: ModeArg) -> Result<()> {
        let cfg = match &s.strategy_file {
            Some(path) => {
                self.input("strategy", path);
                read_json(path)?
            }
            None => {
                let base = match s.strategy {
                    KindArg::Optimal => StrategyKind::OptimalOU,
                    KindArg::Ac => StrategyKind::AlmgrenChriss,
                    KindArg::Merton => StrategyKind::Merton,
                    KindArg::Twap => StrategyKind::Twap,
                };
                let kind = match s.scale {
                    Some(factor) => StrategyKind::Scaled {
                        base: Box::new(base),
                        factor,
                    },
                    None => base,
                };
                let mut cfg = StrategyConfig::new(kind, mode_of(mode));
                cfg.max_rate = s.max_rate;
                cfg
            }
        };
        self.strategy = Some(cfg);
        if let Some(path) = &s.sigma_ac {
            self.input("sigma_ac", path);
            self.sigma_ac = Some(read_json(path)?);
        }
        if let Some(path) = &s.solution {
            self.input("solution", path);
        } else {
            self.steps = Some(s.steps);
        }
        self.q0 = s.q0.clone();
        self.s0 = s.s0.clone();
        Ok(())
    }
}

fn mode_of(m: ModeArg) -> Mode {
    match m {
        ModeArg::Liquidation => Mode::Liquidation,
        ModeArg::Statarb => Mode::StatArb,
    }
}

pub(crate) fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| io_context(e, path))?;
    serde_json::from_str(&text).map_err(|e| match e.classify() {
        serde_json::error::Category::Data => {
            Error::Validation(format!("{}: {e}", path.display()))
        }
        _ => Error::Parse(format!("{}: line {}: {e}", path.display(), e.line())),
    })
}

pub(crate) fn io_context(e: std::io::Error, path: &Path) -> Error {
    Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))
}

pub(crate) fn read(path: &Path) -> Result<RunManifest> {
    read_json(path)
}

pub(crate) fn from_command(cmd: Cmd) -> Result<RunManifest> {
    Ok(match cmd {
        Cmd::Estimate(a) => {
            let mut m = RunManifest::new(Command::Estimate, &a.out);
            m.input("prices", &a.prices);
            m.bars_per_day = a.bars_per_day;
            m
        }
        Cmd::Solve(a) => {
            let mut m = RunManifest::new(Command::Solve, &a.spec.out);
            m.load_spec(&a.spec)?;
            m.strategy = Some(StrategyConfig::new(StrategyKind::OptimalOU, mode_of(a.spec.mode)));
            m.steps = Some(a.steps);
            m
        }
        Cmd::Schedule(a) => {
            let mut m = RunManifest::new(Command::Schedule, &a.spec.out);
            m.load_spec(&a.spec)?;
            m.load_strategy(&a.strategy, a.spec.mode)?;
            match &a.prices {
                Some(p) => {
                    m.input("prices", p);
                    m.bars_per_day = a.bars_per_day;
                }
                None if a.simulate => {
                    m.bars = Some(a.bars);
                    m.seed = Some(a.seed);
                }
                None => return Err(Error::Validation("schedule needs --prices FILE or --simulate".into())),
            }
            m
        }
        Cmd::Montecarlo(a) => {
            let mut m = RunManifest::new(Command::Montecarlo, &a.spec.out);
            m.load_spec(&a.spec)?;
            m.load_strategy(&a.strategy, a.spec.mode)?;
            m.paths = Some(a.paths);
            m.seed = Some(a.seed);
            m.bars = Some(a.bars);
            m.bins = Some(a.bins);
            m.workers = a.workers;
            m
        }
        Cmd::Merton(a) => {
            let mut m = RunManifest::new(Command::Merton, &a.out);
            m.input("params", &a.params);
            m.input("exec", &a.exec);
            m.params = Some(read_json(&a.params)?);
            m.exec = Some(read_json(&a.exec)?);
            match &a.prices {
                Some(p) => {
                    m.input("prices", p);
                    m.bars_per_day = a.bars_per_day;
                }
                None => {
                    m.steps = Some(a.steps);
                    m.s0 = a.s0.clone();
                }
            }
            m
        }
        Cmd::Rerun(_) => unreachable!("rerun is handled by the caller"),
    })
}
