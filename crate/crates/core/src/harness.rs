//! End-to-end pipeline on the lane-change scenario: certificates, grid
//! abstraction, robust synthesis, closed-loop Monte Carlo and artifacts.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::abstraction::{build_abstraction, case_study_grid, discretization_certificate, FiniteAbstraction, GridSpec};
use crate::compensators::{
    ambiguity_certificate, case_study_delta2_field, partial_mor_certificate, Aggregation, Delta2Grid, MorMethod,
    PartialMorSpec, SupStrategy,
};
use crate::error::{Error, Result};
use crate::gmdp::{case_study_with, AmbiguitySet, CaseStudy, CaseStudyParams};
use crate::measures::{clopper_pearson, AxisBox, NormMode, SeedStream};
use crate::relations::{apply_proxy_theorem, compose_transitive, BiAssumption, SimRelationCert};
use crate::synthesis::{
    delta_table, parse_scltl, refine_controller, robust_labeling, robust_value_iteration, Controller, Dfa,
    LabelingMap, SynthesisResult, ViOptions,
};

pub const DEFAULT_FORMULA: &str = "(P_S & !P_C) U P_T";

/// The two reference initial states `(v_A, s_A, v_E, s_E)`.
pub const REFERENCE_INITIAL_STATES: [[f64; 4]; 2] = [[2.960, 1.387, 2.296, 0.014], [1.122, 0.794, 3.520, 1.065]];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GridConfig {
    /// Refinement level of the reference grid: cell width 0.5 / 2^level.
    pub level: u32,
    /// Explicit cell counts per axis, overriding `level`.
    pub counts: Option<Vec<usize>>,
    pub input_levels: usize,
}

impl Default for GridConfig {
    fn default() -> Self {
        GridConfig {
            level: 2,
            counts: None,
            input_levels: 5,
        }
    }
}

/// Which θ drives the concrete rollouts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThetaTrue {
    /// Every corner of Θ is simulated; the lowest estimate is the headline.
    Adversarial,
    /// Every corner of Θ, each reported.
    Sweep,
    Nominal,
    Fixed(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MonteCarloConfig {
    pub runs: usize,
    pub max_steps: usize,
    pub seed: u64,
    /// `(v_A, s_A, v_E, s_E)`; the other coordinates start at zero.
    pub initial_states: Vec<[f64; 4]>,
    pub theta_true: ThetaTrue,
    /// Number of rollouts per scenario written out in full.
    pub trajectories: usize,
}

impl Default for MonteCarloConfig {
    fn default() -> Self {
        MonteCarloConfig {
            runs: 1000,
            max_steps: 200,
            seed: 2024,
            initial_states: REFERENCE_INITIAL_STATES.to_vec(),
            theta_true: ThetaTrue::Adversarial,
            trajectories: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScenarioConfig {
    pub case_study: CaseStudyParams,
    pub grid: GridConfig,
    pub formula: String,
    /// Atom regions on the output `(v_A, s_A, v_E, s_E)`; defaults to the
    /// reference collision, target and safe regions.
    pub regions: Option<BTreeMap<String, AxisBox>>,
    /// Atom that additionally requires the concrete state to stay in the
    /// agent domain and the region of validity.
    pub safe_atom: Option<String>,
    pub norm_mode: NormMode,
    pub sup_strategy: SupStrategy,
    pub vi: ViOptions,
    pub monte_carlo: MonteCarloConfig,
    pub delta2_grid: [usize; 2],
    pub fallback_input: Option<usize>,
    /// Worker threads; results do not depend on it.
    pub threads: Option<usize>,
    pub write_policy: bool,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        ScenarioConfig {
            case_study: CaseStudyParams::default(),
            grid: GridConfig::default(),
            formula: DEFAULT_FORMULA.into(),
            regions: None,
            safe_atom: Some("P_S".into()),
            norm_mode: NormMode::Weighted,
            sup_strategy: SupStrategy::Corner,
            vi: ViOptions::default(),
            monte_carlo: MonteCarloConfig::default(),
            delta2_grid: [64, 64],
            fallback_input: None,
            threads: None,
            write_policy: false,
        }
    }
}

/// Reference regions for the scenario's output space.
pub fn reference_regions(cs: &CaseStudy) -> Result<BTreeMap<String, AxisBox>> {
    let d = cs.output_domain();
    let (env_v, env_s) = (d.interval(2), d.interval(3));
    let mut r = BTreeMap::new();
    r.insert(
        "P_C".to_string(),
        AxisBox::new(vec![0.0, 1.5, env_v.lo, 1.5], vec![3.0, 2.5, env_v.hi, 2.5])?,
    );
    r.insert(
        "P_T".to_string(),
        AxisBox::new(vec![0.0, 2.5, env_v.lo, env_s.lo], vec![3.0, 3.5, env_v.hi, env_s.hi])?,
    );
    r.insert("P_S".to_string(), d);
    Ok(r)
}

impl ScenarioConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ScenarioConfig =
            serde_json::from_str(text).map_err(|e| Error::invalid(format!("scenario config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if self.monte_carlo.runs == 0 {
            return Err(Error::invalid("monte carlo needs at least one run"));
        }
        if self.grid.input_levels == 0 {
            return Err(Error::invalid("at least one input level is required"));
        }
        let f = parse_scltl(&self.formula)?;
        if let Some(regions) = &self.regions {
            for a in f.atoms() {
                if !regions.contains_key(&a) {
                    return Err(Error::invalid(format!("atom {a} has no region")));
                }
            }
        }
        if let ThetaTrue::Fixed(t) = &self.monte_carlo.theta_true {
            if t.len() != 2 {
                return Err(Error::invalid("theta_true needs two components"));
            }
        }
        Ok(())
    }

    /// Canonical JSON without the thread count.
    pub fn canonical_json(&self) -> String {
        let mut c = self.clone();
        c.threads = None;
        serde_json::to_string(&c).expect("config serializes")
    }

    pub fn regions_for(&self, cs: &CaseStudy) -> Result<BTreeMap<String, AxisBox>> {
        match &self.regions {
            Some(r) => Ok(r.clone()),
            None => reference_regions(cs),
        }
    }

    pub fn grid_for(&self, cs: &CaseStudy) -> Result<GridSpec> {
        let nominal = cs.nominal()?;
        let g = case_study_grid(&nominal, self.grid.level)?;
        let u = nominal.input_space.interval(0);
        GridSpec::new(
            self.grid.counts.clone().unwrap_or(g.counts),
            g.domain,
            GridSpec::scalar_levels(u.lo, u.hi, self.grid.input_levels),
        )
    }
}

/// Runs `f` on a pool with the configured thread count.
pub fn with_threads<T: Send>(threads: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T> {
    match threads {
        None => Ok(f()),
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| Error::invalid(format!("thread pool: {e}")))?;
            Ok(pool.install(f))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageLog {
    pub stage: String,
    pub epsilon: f64,
    pub delta_max: f64,
    pub detail: String,
}

/// The certificate chain from the concrete interconnection to the grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Certificates {
    pub reduction: SimRelationCert,
    pub reduction_method: MorMethod,
    pub ambiguity: SimRelationCert,
    pub discretization: SimRelationCert,
    pub chain: SimRelationCert,
}

/// Certificates for the configured scenario; errors carry the stage name.
pub fn certify(cfg: &ScenarioConfig, cs: &CaseStudy, grid: &GridSpec) -> Result<Certificates> {
    let full = cs.full_composite().map_err(|e| e.at_stage("reduction"))?;
    let reduced = cs.reduced_composite().map_err(|e| e.at_stage("reduction"))?;
    let mor = partial_mor_certificate(
        &full,
        &reduced,
        &PartialMorSpec::new(vec![1, 2, 3, 4]),
        &cs.theta,
        &grid.inputs,
        Some(&cs.adversaries.embedded(3, 5)),
    )
    .map_err(|e| e.at_stage("reduction"))?;
    let bi = BiAssumption {
        surrogate: cs.simulator.name.clone(),
        environment: cs.environment.name.clone(),
        agent_dim: cs.agent.dim(),
        map_p: cs.map_p.clone(),
        consequent_concrete: format!("{} x {}", cs.agent.name, cs.environment.name),
        consequent_abstract: format!("{} (ambiguous)", reduced.name),
        note: "environment within the surrogate on its region of validity".into(),
    };
    let reduction = apply_proxy_theorem(&mor.cert, &bi).map_err(|e| e.at_stage("proxy"))?;
    let nominal = cs.nominal().map_err(|e| e.at_stage("ambiguity"))?;
    let ambiguity = ambiguity_certificate(
        &reduced,
        &AmbiguitySet {
            theta: cs.theta.clone(),
            adversary: cs.composite_adversaries(),
        },
        cfg.norm_mode,
        match cfg.norm_mode {
            NormMode::Weighted => Aggregation::Vector,
            NormMode::Unweighted => Aggregation::ComponentSum,
        },
        cfg.sup_strategy,
        &nominal.name,
    )
    .map_err(|e| e.at_stage("ambiguity"))?;
    let discretization =
        discretization_certificate(&nominal, grid, NormMode::Weighted).map_err(|e| e.at_stage("discretization"))?;
    let chain = compose_transitive(&[reduction.clone(), ambiguity.clone(), discretization.clone()])
        .map_err(|e| e.at_stage("composition"))?;
    Ok(Certificates {
        reduction,
        reduction_method: mor.method,
        ambiguity,
        discretization,
        chain,
    })
}

#[derive(Debug, Clone)]
pub struct PipelineOutput {
    pub case_study: CaseStudy,
    pub certificates: Certificates,
    pub grid: GridSpec,
    pub abstraction: FiniteAbstraction,
    pub dfa: Dfa,
    pub labeling: LabelingMap,
    /// Robust letters per cell.
    pub labels: Vec<u32>,
    pub result: SynthesisResult,
    pub controller: Controller,
    pub stages: Vec<StageLog>,
}

impl PipelineOutput {
    /// Certified bound at a point `(v_A, s_A, v_E, s_E)`; 0 off the grid.
    pub fn robust_value(&self, z: &[f64]) -> f64 {
        self.grid
            .locate(z)
            .map_or(0.0, |c| self.result.initial_value(&self.dfa, &self.labels, c))
    }
}

fn log_stage(stages: &mut Vec<StageLog>, stage: &str, c: &SimRelationCert, detail: String) {
    stages.push(StageLog {
        stage: stage.into(),
        epsilon: c.epsilon,
        delta_max: c.delta_max(),
        detail,
    });
}

/// Certificates, abstraction and robust synthesis for a scenario.
pub fn run_pipeline(cfg: &ScenarioConfig) -> Result<PipelineOutput> {
    cfg.validate()?;
    let cs = case_study_with(&cfg.case_study).map_err(|e| e.at_stage("model"))?;
    let grid = cfg.grid_for(&cs).map_err(|e| e.at_stage("grid"))?;
    let certificates = certify(cfg, &cs, &grid)?;
    let mut stages = Vec::new();
    log_stage(
        &mut stages,
        "reduction",
        &certificates.reduction,
        format!("{:?}", certificates.reduction_method),
    );
    log_stage(&mut stages, "ambiguity", &certificates.ambiguity, format!("{} norm", cfg.norm_mode));
    log_stage(
        &mut stages,
        "discretization",
        &certificates.discretization,
        format!("grid {:?}", grid.counts),
    );
    log_stage(&mut stages, "composition", &certificates.chain, String::new());

    let nominal = cs.nominal().map_err(|e| e.at_stage("abstraction"))?;
    let abstraction = build_abstraction(&nominal, &grid).map_err(|e| e.at_stage("abstraction"))?;
    let formula = parse_scltl(&cfg.formula).map_err(|e| e.at_stage("specification"))?;
    let dfa = crate::synthesis::to_dfa(&formula).map_err(|e| e.at_stage("specification"))?;
    let labeling = LabelingMap {
        regions: cfg.regions_for(&cs)?,
        weights: nominal.output.weights.clone(),
    };
    let eps = certificates.chain.epsilon;
    let outputs: Vec<Vec<f64>> = (0..abstraction.n_cells()).map(|c| abstraction.representative_output(c)).collect();
    let labels =
        robust_labeling(&labeling, &formula, &dfa.atoms, &outputs, eps).map_err(|e| e.at_stage("labeling"))?;
    let delta = delta_table(&certificates.chain.delta, &abstraction).map_err(|e| e.at_stage("synthesis"))?;
    let result = robust_value_iteration(&abstraction, &dfa, &labels, &delta, eps, &cfg.vi)
        .map_err(|e| e.at_stage("synthesis"))?;
    let controller = refine_controller(&result, &certificates.chain, &abstraction, &dfa, cfg.fallback_input)
        .map_err(|e| e.at_stage("refinement"))?;
    stages.push(StageLog {
        stage: "synthesis".into(),
        epsilon: eps,
        delta_max: result.delta_used,
        detail: format!("{} iterations, converged {}", result.iterations, result.converged),
    });
    Ok(PipelineOutput {
        case_study: cs,
        certificates,
        grid,
        abstraction,
        dfa,
        labeling,
        labels,
        result,
        controller,
        stages,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Satisfied,
    Violated,
    /// The environment left its region of validity; the run is excluded.
    DiscardedRov,
    /// The step cap was hit first; counted as unsatisfied.
    CensoredHorizon,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryStep {
    pub agent: Vec<f64>,
    pub env: Vec<f64>,
    pub output: Vec<f64>,
    pub letter: u32,
    pub dfa_state: usize,
    /// Input applied after this step, if the run continued.
    pub input: Option<f64>,
    pub fallback: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutRecord {
    pub verdict: Verdict,
    pub exit_step: usize,
    pub trajectory: Option<Vec<TrajectoryStep>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonteCarloSummary {
    pub initial_state: [f64; 4],
    pub theta: Vec<f64>,
    pub runs: usize,
    pub satisfied: usize,
    pub violated: usize,
    pub discarded: usize,
    pub censored: usize,
    /// `None` when every run was discarded.
    pub p_hat: Option<f64>,
    /// Two-sided 95% Clopper–Pearson interval.
    pub ci: Option<(f64, f64)>,
}

impl MonteCarloSummary {
    /// `bound ≤ p̂ + upper CI margin`.
    pub fn is_consistent_with(&self, bound: f64) -> bool {
        match self.ci {
            Some((_, hi)) => bound <= hi + 1e-12,
            None => true,
        }
    }
}

/// Letter of a concrete state: plain membership on the output, with the
/// safe atom also requiring the full state inside its domains.
pub fn concrete_letter(cfg: &ScenarioConfig, cs: &CaseStudy, labeling: &LabelingMap, dfa: &Dfa, xa: &[f64], xe: &[f64]) -> Result<u32> {
    let y = cs.concrete_output(xa, xe);
    let mut l = labeling.letter(&dfa.atoms, &y)?;
    if let Some(safe) = &cfg.safe_atom {
        if let Some(i) = dfa.atoms.iter().position(|a| a == safe) {
            if !(cs.agent.state_space.contains(xa) && cs.environment.state_space.contains(xe)) {
                l &= !(1 << i);
            }
        }
    }
    Ok(l)
}

fn initial_concrete(z: &[f64; 4]) -> (Vec<f64>, Vec<f64>) {
    (vec![0.0, z[0], z[1]], vec![0.0, 0.0, 0.0, z[2], z[3], 0.0])
}

/// One closed-loop rollout of the controller on `A x E`.
#[allow(clippy::too_many_arguments)]
pub fn rollout(
    cfg: &ScenarioConfig,
    out: &PipelineOutput,
    z0: &[f64; 4],
    theta: &[f64],
    seed: u64,
    keep: bool,
) -> Result<RolloutRecord> {
    use rand::SeedableRng;
    let cs = &out.case_study;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let (mut xa, mut xe) = initial_concrete(z0);
    let mut q = out.dfa.initial;
    let mut trail = keep.then(Vec::new);
    let max_steps = cfg.monte_carlo.max_steps;
    for t in 0..=max_steps {
        let in_rov = cs.environment.state_space.contains(&xe);
        let letter = concrete_letter(cfg, cs, &out.labeling, &out.dfa, &xa, &xe)?;
        if in_rov {
            q = out.dfa.step(q, letter);
        }
        let verdict = if !in_rov {
            Some(Verdict::DiscardedRov)
        } else if out.dfa.accepting[q] {
            Some(Verdict::Satisfied)
        } else if out.dfa.rejecting[q] || !cs.agent.state_space.contains(&xa) {
            Some(Verdict::Violated)
        } else if t == max_steps {
            Some(Verdict::CensoredHorizon)
        } else {
            None
        };
        let mut x = xa.clone();
        x.extend_from_slice(&xe);
        let action = match verdict {
            None => Some(out.controller.action(&x, q)?),
            Some(_) => None,
        };
        if let Some(tr) = trail.as_mut() {
            tr.push(TrajectoryStep {
                agent: xa.clone(),
                env: xe.clone(),
                output: cs.concrete_output(&xa, &xe),
                letter,
                dfa_state: q,
                input: action.as_ref().map(|a| a.input[0]),
                fallback: action.as_ref().is_some_and(|a| a.fallback),
            });
        }
        if let Some(verdict) = verdict {
            return Ok(RolloutRecord {
                verdict,
                exit_step: t,
                trajectory: trail,
            });
        }
        let a = action.expect("continuing runs have an action");
        let next_a = cs.agent.step(&xa, &a.input, &[], &theta[..1], &[], &mut rng)?;
        let next_e = cs.environment.step(&xe, &[], &xa, &theta[1..], &[], &mut rng)?;
        xa = next_a;
        xe = next_e;
    }
    unreachable!("the loop returns at the step cap")
}

/// Concrete θ values the configuration asks to simulate.
pub fn thetas_to_simulate(cfg: &ScenarioConfig, cs: &CaseStudy) -> Vec<Vec<f64>> {
    match &cfg.monte_carlo.theta_true {
        ThetaTrue::Adversarial | ThetaTrue::Sweep => cs.theta.corners(),
        ThetaTrue::Nominal => vec![cs.theta.nominal.clone()],
        ThetaTrue::Fixed(t) => vec![t.clone()],
    }
}

/// Rollouts from one initial state at one θ; seeds derive from the
/// configured seed, the scenario indices and the run index.
pub fn monte_carlo(
    cfg: &ScenarioConfig,
    out: &PipelineOutput,
    z0: &[f64; 4],
    theta: &[f64],
    stream: SeedStream,
) -> Result<(MonteCarloSummary, Vec<RolloutRecord>)> {
    if !out.case_study.theta.contains(theta) {
        return Err(Error::OutOfDomain(format!("theta {theta:?} outside the parameter box")));
    }
    let keep = cfg.monte_carlo.trajectories;
    let records: Result<Vec<RolloutRecord>> = (0..cfg.monte_carlo.runs)
        .into_par_iter()
        .map(|k| rollout(cfg, out, z0, theta, stream.derive(k as u64), k < keep))
        .collect();
    let records = records?;
    let count = |v: Verdict| records.iter().filter(|r| r.verdict == v).count();
    let (satisfied, violated, discarded, censored) = (
        count(Verdict::Satisfied),
        count(Verdict::Violated),
        count(Verdict::DiscardedRov),
        count(Verdict::CensoredHorizon),
    );
    let kept = records.len() - discarded;
    let (p_hat, ci) = if kept == 0 {
        (None, None)
    } else {
        (
            Some(satisfied as f64 / kept as f64),
            Some(clopper_pearson(satisfied as u64, kept as u64, 0.95)),
        )
    };
    Ok((
        MonteCarloSummary {
            initial_state: *z0,
            theta: theta.to_vec(),
            runs: records.len(),
            satisfied,
            violated,
            discarded,
            censored,
            p_hat,
            ci,
        },
        records,
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationRow {
    pub summary: MonteCarloSummary,
    pub robust_value: f64,
    pub consistent: bool,
}

#[derive(Debug, Clone)]
pub struct Validation {
    pub rows: Vec<ValidationRow>,
    /// `(initial index, θ index, records)` for rollouts kept in full.
    pub trajectories: Vec<(usize, usize, Vec<RolloutRecord>)>,
}

impl Validation {
    pub fn all_consistent(&self) -> bool {
        self.rows.iter().all(|r| r.consistent)
    }

    /// Worst-case rows per initial state under the adversarial choice.
    pub fn headline(&self, cfg: &ScenarioConfig) -> Vec<&ValidationRow> {
        let mut by_init: BTreeMap<usize, &ValidationRow> = BTreeMap::new();
        let n_theta = self.rows.len() / cfg.monte_carlo.initial_states.len().max(1);
        for (k, r) in self.rows.iter().enumerate() {
            let i = k / n_theta.max(1);
            let worse = |a: &ValidationRow, b: &ValidationRow| a.summary.p_hat.unwrap_or(1.0) < b.summary.p_hat.unwrap_or(1.0);
            match by_init.get(&i) {
                Some(cur) if !worse(r, cur) => {}
                _ => {
                    by_init.insert(i, r);
                }
            }
        }
        match cfg.monte_carlo.theta_true {
            ThetaTrue::Adversarial => by_init.into_values().collect(),
            _ => self.rows.iter().collect(),
        }
    }
}

/// Monte Carlo for every configured initial state and θ.
pub fn validate(cfg: &ScenarioConfig, out: &PipelineOutput) -> Result<Validation> {
    let root = SeedStream::new(cfg.monte_carlo.seed);
    let thetas = thetas_to_simulate(cfg, &out.case_study);
    let mut rows = Vec::new();
    let mut trajectories = Vec::new();
    for (i, z0) in cfg.monte_carlo.initial_states.iter().enumerate() {
        let bound = out.robust_value(z0);
        for (j, th) in thetas.iter().enumerate() {
            let stream = root.child(i as u64).child(j as u64);
            let (summary, records) = monte_carlo(cfg, out, z0, th, stream).map_err(|e| e.at_stage("simulation"))?;
            let consistent = summary.is_consistent_with(bound);
            rows.push(ValidationRow {
                summary,
                robust_value: bound,
                consistent,
            });
            let kept: Vec<RolloutRecord> = records.into_iter().filter(|r| r.trajectory.is_some()).collect();
            if !kept.is_empty() {
                trajectories.push((i, j, kept));
            }
        }
    }
    Ok(Validation { rows, trajectories })
}

fn csv_writer(path: &Path) -> Result<csv::Writer<std::fs::File>> {
    csv::Writer::from_path(path).map_err(|e| Error::io(path, e))
}

fn write_rows<I, R>(path: &Path, header: &[&str], rows: I) -> Result<()>
where
    I: IntoIterator<Item = R>,
    R: IntoIterator<Item = String>,
{
    let mut w = csv_writer(path)?;
    w.write_record(header).map_err(|e| Error::io(path, e))?;
    for r in rows {
        w.write_record(r).map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Value field over positions with both velocities fixed at the initial
/// state's cell, one file per initial state.
pub fn write_value_slice(out: &PipelineOutput, z0: &[f64; 4], path: &Path) -> Result<()> {
    let g = &out.grid;
    let (Some(ka), Some(ke)) = (g.locate_1d(0, z0[0]), g.locate_1d(2, z0[2])) else {
        return Err(Error::OutOfDomain(format!("initial velocities {z0:?} outside the grid")));
    };
    let rows = (0..g.counts[1]).flat_map(|i| {
        (0..g.counts[3]).map(move |j| {
            let cell = g.ravel(&[ka, i, ke, j]);
            vec![
                g.center_1d(0, ka).to_string(),
                g.center_1d(1, i).to_string(),
                g.center_1d(2, ke).to_string(),
                g.center_1d(3, j).to_string(),
                out.result.initial_value(&out.dfa, &out.labels, cell).to_string(),
            ]
        })
    });
    write_rows(path, &["v_agent", "s_agent", "v_env", "s_env", "value"], rows)
}

fn atoms_text(dfa: &Dfa, letter: u32) -> String {
    let names: Vec<&str> = dfa
        .atoms
        .iter()
        .enumerate()
        .filter(|(i, _)| letter >> i & 1 == 1)
        .map(|(_, a)| a.as_str())
        .collect();
    names.join("|")
}

pub fn write_trajectories(out: &PipelineOutput, v: &Validation, path: &Path) -> Result<()> {
    let mut rows = Vec::new();
    for (i, j, records) in &v.trajectories {
        for (k, r) in records.iter().enumerate() {
            let Some(tr) = &r.trajectory else { continue };
            for (t, s) in tr.iter().enumerate() {
                let mut row = vec![i.to_string(), j.to_string(), k.to_string(), t.to_string()];
                row.extend(s.agent.iter().map(|x| x.to_string()));
                row.extend(s.env.iter().map(|x| x.to_string()));
                row.push(s.input.map_or(String::new(), |u| u.to_string()));
                row.push(atoms_text(&out.dfa, s.letter));
                row.push(s.dfa_state.to_string());
                row.push(format!("{:?}", r.verdict).to_lowercase());
                rows.push(row);
            }
        }
    }
    write_rows(
        path,
        &[
            "initial", "theta", "run", "step", "xi", "v_agent", "s_agent", "beta", "yaw_rate", "yaw", "v_env", "s_env",
            "s_env_lateral", "input", "atoms", "dfa_state", "verdict",
        ],
        rows,
    )
}

pub fn write_policy(out: &PipelineOutput, path: &Path) -> Result<()> {
    let r = &out.result;
    let rows = (0..out.dfa.n_states)
        .filter(|&q| !out.dfa.is_terminal(q))
        .flat_map(|q| {
            (0..r.n_states).map(move |c| {
                vec![
                    c.to_string(),
                    q.to_string(),
                    r.value[q][c].to_string(),
                    r.policy[q][c].to_string(),
                ]
            })
        });
    write_rows(path, &["cell", "dfa_state", "value", "input_index"], rows)
}

/// Artifacts of a full run, written into `dir`.
#[derive(Debug, Clone)]
pub struct Artifacts {
    pub files: Vec<PathBuf>,
    pub manifest: PathBuf,
}

fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(format!("{:x}", Sha256::digest(&bytes)))
}

/// Writes value slices, trajectories, the δ₂ field, the DFA, optionally the
/// policy, and a manifest with every constant and file digest.
pub fn emit_results(
    cfg: &ScenarioConfig,
    out: &PipelineOutput,
    validation: Option<&Validation>,
    delta2: Option<&Delta2Grid>,
    dir: &Path,
) -> Result<Artifacts> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut files = Vec::new();
    for (i, z0) in cfg.monte_carlo.initial_states.iter().enumerate() {
        let p = dir.join(format!("value_slice_{i}.csv"));
        write_value_slice(out, z0, &p)?;
        files.push(p);
    }
    if let Some(v) = validation {
        let p = dir.join("trajectories.csv");
        write_trajectories(out, v, &p)?;
        files.push(p);
        let p = dir.join("monte_carlo.csv");
        let rows = v.rows.iter().map(|r| {
            let s = &r.summary;
            vec![
                s.initial_state.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(" "),
                s.theta.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(" "),
                s.runs.to_string(),
                s.satisfied.to_string(),
                s.violated.to_string(),
                s.discarded.to_string(),
                s.censored.to_string(),
                s.p_hat.map_or(String::new(), |p| p.to_string()),
                s.ci.map_or(String::new(), |c| c.0.to_string()),
                s.ci.map_or(String::new(), |c| c.1.to_string()),
                r.robust_value.to_string(),
                r.consistent.to_string(),
            ]
        });
        write_rows(
            &p,
            &[
                "initial_state", "theta", "runs", "satisfied", "violated", "discarded", "censored", "p_hat", "ci_low",
                "ci_high", "robust_value", "consistent",
            ],
            rows,
        )?;
        files.push(p);
    }
    if let Some(d) = delta2 {
        let p = dir.join("delta2.csv");
        d.write_csv(&p)?;
        files.push(p);
    }
    let p = dir.join("dfa.txt");
    std::fs::write(&p, out.dfa.dump()).map_err(|e| Error::io(&p, e))?;
    files.push(p);
    if cfg.write_policy {
        let p = dir.join("policy.csv");
        write_policy(out, &p)?;
        files.push(p);
    }

    let mut m = String::new();
    let cfg_json = cfg.canonical_json();
    let _ = writeln!(m, "config_sha256 = {:x}", Sha256::digest(cfg_json.as_bytes()));
    let _ = writeln!(m, "formula = {}", cfg.formula);
    let _ = writeln!(m, "norm_mode = {}", cfg.norm_mode);
    let _ = writeln!(m, "seed = {}", cfg.monte_carlo.seed);
    let _ = writeln!(m, "grid_counts = {:?}", out.grid.counts);
    let _ = writeln!(m, "grid_cells = {}", out.grid.n_cells());
    let _ = writeln!(m, "inputs = {:?}", out.grid.inputs.iter().map(|u| u[0]).collect::<Vec<_>>());
    for s in &out.stages {
        let _ = writeln!(m, "stage.{}.epsilon = {}", s.stage, s.epsilon);
        let _ = writeln!(m, "stage.{}.delta_max = {}", s.stage, s.delta_max);
        if !s.detail.is_empty() {
            let _ = writeln!(m, "stage.{}.detail = {}", s.stage, s.detail);
        }
    }
    if let crate::relations::DeltaField::PerInput(v) = &out.certificates.reduction.delta {
        let _ = writeln!(m, "reduction.delta_per_input = {v:?}");
    }
    let _ = writeln!(m, "window_tail = {}", out.abstraction.window_tail);
    let _ = writeln!(m, "dfa_states = {}", out.dfa.n_states);
    for (i, z0) in cfg.monte_carlo.initial_states.iter().enumerate() {
        let _ = writeln!(m, "initial.{i} = {z0:?}");
        let _ = writeln!(m, "initial.{i}.robust_value = {}", out.robust_value(z0));
    }
    if let Some(v) = validation {
        for (k, r) in v.rows.iter().enumerate() {
            let s = &r.summary;
            let _ = writeln!(
                m,
                "mc.{k} = theta {:?} satisfied {} violated {} discarded {} censored {} p_hat {:?} ci {:?} consistent {}",
                s.theta, s.satisfied, s.violated, s.discarded, s.censored, s.p_hat, s.ci, r.consistent
            );
        }
    }
    for f in &files {
        let name = f.file_name().map(|n| n.to_string_lossy().to_string()).unwrap_or_default();
        let _ = writeln!(m, "file.{name}.sha256 = {}", sha256_file(f)?);
    }
    let manifest = dir.join("manifest.txt");
    std::fs::write(&manifest, m).map_err(|e| Error::io(&manifest, e))?;
    Ok(Artifacts { files, manifest })
}

/// δ₂ field of the configured scenario on the configured velocity grid.
pub fn delta2_field(cfg: &ScenarioConfig) -> Result<Delta2Grid> {
    let cs = case_study_with(&cfg.case_study)?;
    case_study_delta2_field(&cs, cfg.norm_mode, (cfg.delta2_grid[0], cfg.delta2_grid[1]))
}
