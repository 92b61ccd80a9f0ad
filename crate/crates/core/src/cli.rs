//! Experiment runner behind the `salt-mpc` binary.
//!
//! A run is described by a TOML [`RunConfig`]; flags and `--set key=value`
//! overrides are applied on top. Each seed writes `trace.csv` and
//! `summary.json` into its own directory under the output root.

use std::path::{Path, PathBuf};

use clap::Parser;
use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::bench::{
    benchmark_model, brute_force_close_to_opt, calibrate, Benchmark, CalibrationConfig, TinyInstance,
};
use crate::dynamics::ModelFile;
use crate::error::{Error, Result};
use crate::orchestrator::{run, AlgoConfig, Mode, RunLog, Scenario};
use crate::sweep;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum RunMode {
    Learn,
    Omniscient,
    Rule,
    Calibrate,
    Oracle,
}

impl RunMode {
    fn closed_loop(self) -> Option<Mode> {
        match self {
            RunMode::Learn => Some(Mode::Learn),
            RunMode::Omniscient => Some(Mode::Omniscient),
            RunMode::Rule => Some(Mode::Rule),
            RunMode::Calibrate | RunMode::Oracle => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BenchmarkId {
    /// The six-state heating plant with an economic cost.
    Heating,
    /// The two-state enumeration instance with a quadratic cost.
    Tiny,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub mode: RunMode,
    pub benchmark: BenchmarkId,
    /// Model file replacing the shipped one of the chosen benchmark.
    pub model: Option<PathBuf>,
    pub seeds: Vec<u64>,
    /// Closed-loop steps; the benchmark's own length when absent.
    pub steps: Option<usize>,
    pub out: PathBuf,
    pub heating: Benchmark,
    pub tiny: TinyInstance,
    pub calibration: CalibrationConfig,
    /// Overrides merged over the benchmark's algorithm settings.
    pub algo: Table,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            mode: RunMode::Learn,
            benchmark: BenchmarkId::Heating,
            model: None,
            seeds: vec![1],
            steps: None,
            out: PathBuf::from("runs"),
            heating: Benchmark::default(),
            tiny: TinyInstance::default(),
            calibration: CalibrationConfig::default(),
            algo: Table::new(),
        }
    }
}

/// Everything a closed-loop run needs, resolved from a [`RunConfig`].
pub struct Resolved {
    pub scenario: Scenario,
    pub algo: AlgoConfig,
    pub steps: usize,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        Self::from_table(text.parse::<Table>().map_err(|e| Error::Config(format!("config: {e}")))?)
    }

    fn from_table(t: Table) -> Result<Self> {
        Value::Table(t).try_into().map_err(|e| Error::Config(format!("config: {e}")))
    }

    /// Apply `key=value` overrides with dotted keys, e.g. `algo.eps=0.2`.
    /// Values are read as TOML and fall back to plain strings.
    pub fn with_overrides(&self, sets: &[String]) -> Result<Self> {
        let mut root = Table::try_from(self).map_err(|e| Error::Config(format!("config: {e}")))?;
        for s in sets {
            let (key, raw) = s
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override `{s}` is not key=value")))?;
            let value = format!("v = {raw}")
                .parse::<Table>()
                .ok()
                .and_then(|mut t| t.remove("v"))
                .unwrap_or_else(|| Value::String(raw.to_string()));
            let parts: Vec<&str> = key.trim().split('.').collect();
            let mut cur = &mut root;
            for p in &parts[..parts.len() - 1] {
                cur = cur
                    .entry(p.to_string())
                    .or_insert_with(|| Value::Table(Table::new()))
                    .as_table_mut()
                    .ok_or_else(|| Error::Config(format!("override `{key}`: `{p}` is not a section")))?;
            }
            cur.insert(parts[parts.len() - 1].to_string(), value);
        }
        Self::from_table(root)
    }

    fn model_file(&self) -> Result<ModelFile> {
        match (&self.model, self.benchmark) {
            (Some(p), _) => {
                if !p.exists() {
                    return Err(Error::Config(format!("model file {} does not exist", p.display())));
                }
                ModelFile::load(p)
            }
            (None, BenchmarkId::Heating) => Ok(benchmark_model()),
            (None, BenchmarkId::Tiny) => Ok(crate::bench::tiny_model()),
        }
    }

    pub fn resolve(&self) -> Result<Resolved> {
        let model = self.model_file()?;
        let (scenario, base, default_steps) = match self.benchmark {
            BenchmarkId::Heating => {
                let b = &self.heating;
                let base = b.algo_config(&model);
                b.validate(base.horizon)?;
                (b.scenario(&model)?, base, b.steps)
            }
            BenchmarkId::Tiny => (self.tiny.scenario(&model)?, self.tiny.algo_config(), self.tiny.steps),
        };
        let mut merged = Table::try_from(&base).map_err(|e| Error::Config(format!("algo: {e}")))?;
        merge(&mut merged, &self.algo);
        let algo: AlgoConfig =
            Value::Table(merged).try_into().map_err(|e| Error::Config(format!("algo: {e}")))?;
        algo.validate()?;
        if let BenchmarkId::Heating = self.benchmark {
            self.heating.validate(algo.horizon)?;
        }
        Ok(Resolved {
            scenario,
            algo,
            steps: self.steps.unwrap_or(default_steps),
        })
    }
}

fn merge(base: &mut Table, over: &Table) {
    for (k, v) in over {
        match (base.get_mut(k), v) {
            (Some(Value::Table(b)), Value::Table(o)) => merge(b, o),
            _ => {
                base.insert(k.clone(), v.clone());
            }
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "salt-mpc", version, about = "Safe active-learning MPC experiments")]
pub struct Args {
    /// TOML run configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub mode: Option<RunMode>,
    /// Seed to run; repeat for a sweep.
    #[arg(long = "seed")]
    pub seeds: Vec<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub steps: Option<usize>,
    /// Dotted override, e.g. `--set algo.eps=0.2`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub sets: Vec<String>,
}

impl Args {
    pub fn run_config(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => {
                if !p.exists() {
                    return Err(Error::Config(format!("config file {} does not exist", p.display())));
                }
                RunConfig::parse(&std::fs::read_to_string(p)?)?
            }
            None => RunConfig::default(),
        };
        if let Some(m) = self.mode {
            cfg.mode = m;
        }
        if !self.seeds.is_empty() {
            cfg.seeds = self.seeds.clone();
        }
        if let Some(o) = &self.out {
            cfg.out = o.clone();
        }
        if self.steps.is_some() {
            cfg.steps = self.steps;
        }
        cfg.with_overrides(&self.sets)
    }
}

#[derive(Serialize)]
struct SummaryFile<'a> {
    summary: &'a crate::orchestrator::RunSummary,
    exploration_windows: Vec<(usize, usize)>,
    config: &'a RunConfig,
    algo: &'a AlgoConfig,
}

fn write_json<T: Serialize>(path: &Path, v: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(v).map_err(|e| Error::Config(format!("json: {e}")))?;
    std::fs::write(path, text + "\n")?;
    Ok(())
}

/// Write `trace.csv` and `summary.json` for one seed.
pub fn write_run(dir: &Path, log: &RunLog, cfg: &RunConfig, algo: &AlgoConfig) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let file = std::fs::File::create(dir.join("trace.csv"))?;
    log.write_csv(std::io::BufWriter::new(file))?;
    write_json(
        &dir.join("summary.json"),
        &SummaryFile {
            summary: &log.summary,
            exploration_windows: log.exploration_windows(),
            config: cfg,
            algo,
        },
    )
}

/// Exit codes: 0 success, 1 failed statistical or oracle check, 2 bad
/// configuration, 3 infeasibility fault.
pub fn execute(cfg: &RunConfig) -> Result<i32> {
    if let Some(mode) = cfg.mode.closed_loop() {
        let r = cfg.resolve()?;
        let logs = sweep::map(&cfg.seeds, |s| run(&r.scenario, &r.algo, mode, r.steps, *s));
        let mut code = 0;
        for (seed, log) in cfg.seeds.iter().zip(logs) {
            let log = log?;
            let dir = cfg.out.join(format!("seed-{seed}"));
            write_run(&dir, &log, cfg, &r.algo)?;
            let s = &log.summary;
            println!(
                "seed {seed}: {} steps, cost {:.2}, output violations {}, exploration steps {}, θ error {:.3} -> {:.3}",
                s.steps, s.realized_cost, s.output_violations, s.exploration_steps, s.theta_err_initial, s.theta_err_final
            );
            if let Some(f) = &s.fault {
                eprintln!("seed {seed}: infeasibility fault at step {} in {} problem: {}", f.step, f.problem, f.detail);
                code = 3;
            }
        }
        return Ok(code);
    }
    std::fs::create_dir_all(&cfg.out)?;
    match cfg.mode {
        RunMode::Calibrate => {
            let model = cfg.model_file()?;
            let scenario = match cfg.benchmark {
                BenchmarkId::Heating => cfg.heating.scenario(&model)?,
                BenchmarkId::Tiny => cfg.tiny.scenario(&model)?,
            };
            let rep = calibrate(&scenario, &cfg.calibration)?;
            println!("{}", rep.render());
            write_json(&cfg.out.join("calibration.json"), &rep)?;
            Ok(if rep.passed { 0 } else { 1 })
        }
        RunMode::Oracle => {
            let cert = brute_force_close_to_opt(&cfg.tiny)?;
            println!("{}", cert.render());
            write_json(&cfg.out.join("oracle.json"), &cert)?;
            Ok(if cert.passed { 0 } else { 1 })
        }
        _ => unreachable!("closed-loop modes handled above"),
    }
}

/// Map an error to its exit code, printing it.
pub fn report(e: &Error) -> i32 {
    eprintln!("error: {e}");
    match e {
        Error::Infeasible { dump, .. } => {
            eprintln!("{}", serde_json::to_string_pretty(dump).unwrap_or_default());
            3
        }
        Error::Io(_) => 1,
        _ => 2,
    }
}

pub fn main_with(args: &Args) -> i32 {
    match args.run_config().and_then(|c| execute(&c)) {
        Ok(code) => code,
        Err(e) => report(&e),
    }
}
