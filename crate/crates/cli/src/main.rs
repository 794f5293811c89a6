use std::path::{Path, PathBuf};
use std::process::ExitCode;

use agc_core::harness::{
    certify, delta2_field, emit_results, run_pipeline, validate, with_threads, PipelineOutput, ScenarioConfig,
    StageLog,
};
use agc_core::gmdp::case_study_with;
use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "agc", about = "Certified controller synthesis for the lane-change scenario")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Scenario config (JSON); built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Worker threads.
    #[arg(long)]
    threads: Option<usize>,
    /// Grid refinement level.
    #[arg(long)]
    level: Option<u32>,
    /// Monte Carlo runs per initial state and θ.
    #[arg(long)]
    runs: Option<usize>,
}

impl Common {
    fn load(&self) -> Result<ScenarioConfig> {
        let mut cfg = match &self.config {
            Some(p) => ScenarioConfig::load(p)?,
            None => ScenarioConfig::default(),
        };
        if self.threads.is_some() {
            cfg.threads = self.threads;
        }
        if let Some(l) = self.level {
            cfg.grid.level = l;
        }
        if let Some(r) = self.runs {
            cfg.monte_carlo.runs = r;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Build the certificate chain and print each (ε, δ).
    Certify {
        #[command(flatten)]
        common: Common,
        /// Write the certificates as JSON here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Build the grid abstraction and report its size.
    Abstract {
        #[command(flatten)]
        common: Common,
        /// Export the finite model as CSV tables (small grids only).
        #[arg(long)]
        export: Option<PathBuf>,
    },
    /// Synthesize and write value slices, the DFA and a manifest.
    Synthesize {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Synthesize, then validate by closed-loop Monte Carlo.
    Simulate {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Every stage plus the δ₂ field; fails if any bound is contradicted.
    Pipeline {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Write the δ₂ field over agent and environment speeds.
    Delta2Field {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "delta2.csv")]
        out: PathBuf,
    },
}

fn print_stages(stages: &[StageLog]) {
    println!("{:<16} {:>12} {:>12}  detail", "stage", "epsilon", "delta_max");
    for s in stages {
        println!("{:<16} {:>12.6} {:>12.6}  {}", s.stage, s.epsilon, s.delta_max, s.detail);
    }
}

fn print_initial(cfg: &ScenarioConfig, out: &PipelineOutput) {
    for z in &cfg.monte_carlo.initial_states {
        println!("robust value at {z:?}: {:.6}", out.robust_value(z));
    }
}

fn synthesize(cfg: &ScenarioConfig) -> Result<PipelineOutput> {
    let out = run_pipeline(cfg)?;
    print_stages(&out.stages);
    print_initial(cfg, &out);
    Ok(out)
}

fn simulate(cfg: &ScenarioConfig, dir: &Path, with_delta2: bool) -> Result<bool> {
    let out = synthesize(cfg)?;
    let v = validate(cfg, &out)?;
    for r in &v.rows {
        let s = &r.summary;
        println!(
            "init {:?} theta {:?}: p_hat {} ci {} discarded {} robust {:.4} {}",
            s.initial_state,
            s.theta,
            s.p_hat.map_or("undefined".into(), |p| format!("{p:.4}")),
            s.ci.map_or("-".into(), |c| format!("[{:.4}, {:.4}]", c.0, c.1)),
            s.discarded,
            r.robust_value,
            if r.consistent { "ok" } else { "CONTRADICTED" }
        );
    }
    let d2 = if with_delta2 { Some(delta2_field(cfg)?) } else { None };
    let art = emit_results(cfg, &out, Some(&v), d2.as_ref(), dir)?;
    println!("manifest: {}", art.manifest.display());
    Ok(v.all_consistent())
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Certify { common, out } => {
            let cfg = common.load()?;
            let threads = cfg.threads;
            with_threads(threads, || -> Result<bool> {
                let cs = case_study_with(&cfg.case_study)?;
                let grid = cfg.grid_for(&cs)?;
                let c = certify(&cfg, &cs, &grid)?;
                for (name, cert) in [
                    ("reduction", &c.reduction),
                    ("ambiguity", &c.ambiguity),
                    ("discretization", &c.discretization),
                    ("composition", &c.chain),
                ] {
                    println!(
                        "{name:<16} {} <= {}: epsilon {:.6} delta_max {:.6}",
                        cert.abstract_system,
                        cert.concrete_system,
                        cert.epsilon,
                        cert.delta_max()
                    );
                }
                if let Some(p) = out {
                    let json = serde_json::to_string_pretty(&c)?;
                    std::fs::write(&p, json).with_context(|| format!("writing {}", p.display()))?;
                }
                Ok(true)
            })?
        }
        Command::Abstract { common, export } => {
            let cfg = common.load()?;
            with_threads(cfg.threads, || -> Result<bool> {
                let cs = case_study_with(&cfg.case_study)?;
                let grid = cfg.grid_for(&cs)?;
                let nominal = cs.nominal()?;
                let abs = agc_core::abstraction::build_abstraction(&nominal, &grid)?;
                let cert = agc_core::abstraction::discretization_certificate(&nominal, &grid, cfg.norm_mode)?;
                println!(
                    "{} cells x {} inputs, factored {}, epsilon {:.6}, delta {:.6}, window tail {:.3e}",
                    abs.n_cells(),
                    abs.n_inputs(),
                    abs.is_factored(),
                    cert.epsilon,
                    cert.delta_max(),
                    abs.window_tail
                );
                if let Some(dir) = export {
                    abs.to_finite_gmdp()?.write_columnar(&dir)?;
                }
                Ok(true)
            })?
        }
        Command::Synthesize { common, out } => {
            let cfg = common.load()?;
            with_threads(cfg.threads, || -> Result<bool> {
                let o = synthesize(&cfg)?;
                let art = emit_results(&cfg, &o, None, None, &out)?;
                println!("manifest: {}", art.manifest.display());
                Ok(true)
            })?
        }
        Command::Simulate { common, out } => {
            let cfg = common.load()?;
            with_threads(cfg.threads, || simulate(&cfg, &out, false))?
        }
        Command::Pipeline { common, out } => {
            let cfg = common.load()?;
            with_threads(cfg.threads, || simulate(&cfg, &out, true))?
        }
        Command::Delta2Field { common, out } => {
            let cfg = common.load()?;
            let d = delta2_field(&cfg)?;
            d.write_csv(&out)?;
            println!("max delta2 {:.6} ({} norm)", d.max, cfg.norm_mode);
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("a certified bound was contradicted by simulation");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
