//! Certificates that absorb the gap between a model and its surrogate:
//! truncation of decoupled coordinates, full order reduction with a noise
//! shift, and parametric plus adversarial ambiguity around a nominal.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::gmdp::{mat_mul, AdversaryFamily, AmbiguitySet, CaseStudy, GmdpModel, LinearMap, Matrix, ParameterBox};
use crate::interval::Interval;
use crate::measures::{
    clopper_pearson_lower, deficiency_from_norm, shift_norm, std_normal_interval, AxisBox, NormMode, SeedStream,
};
use crate::relations::{
    BaseRelation, ConcreteMap, DeltaField, InterfaceDesc, ProvenanceEntry, RelationDesc, SimRelationCert,
};

const STRUCT_TOL: f64 = 1e-15;

/// How per-component error magnitudes are aggregated into one shift norm
/// when the norm is unweighted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    /// Euclidean norm of the bounding vector.
    #[default]
    Vector,
    /// Magnitude of the signed sum of all components.
    ComponentSum,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SupStrategy {
    /// Exact vertex enumeration; valid because every registered error term
    /// is multilinear in its independent variables.
    #[default]
    Corner,
    /// Interval evaluation; an over-approximation.
    Interval,
}

/// `Δ[row] += (θ[param] − θ̂[param]) · x[col]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThetaTerm {
    pub row: usize,
    pub col: usize,
    pub param: usize,
}

/// One-step drift error `f(x̂; θ, 𝔞) − f(x̂; θ̂, 𝔞̂)` of an affine model with
/// parametrized matrix entries and an additive adversary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorDynamics {
    pub dim: usize,
    pub terms: Vec<ThetaTerm>,
    pub theta: ParameterBox,
    pub adversary: Option<AdversaryFamily>,
}

/// Corner- or interval-bounded magnitudes of the error over a state box.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorBound {
    pub component_mags: Vec<f64>,
    pub sum_mag: f64,
}

impl ErrorDynamics {
    /// Registry lookup: affine drift with θ-slots plus a registered adversary.
    pub fn from_model(model: &GmdpModel, ambiguity: &AmbiguitySet) -> Result<ErrorDynamics> {
        let a = model.affine().ok_or_else(|| {
            Error::refused(format!("{}: no closed-form error dynamics for a non-affine drift", model.name))
        })?;
        check_dim("parameter box", model.n_params, ambiguity.theta.dim())?;
        if model.disturbance_dim != 0 {
            check_dim("adversary state", model.dim(), ambiguity.adversary.state_dim)?;
        }
        Ok(ErrorDynamics {
            dim: model.dim(),
            terms: a
                .theta_slots
                .iter()
                .map(|s| ThetaTerm {
                    row: s.row,
                    col: s.col,
                    param: s.param,
                })
                .collect(),
            theta: ambiguity.theta.clone(),
            adversary: (model.disturbance_dim != 0).then(|| ambiguity.adversary.clone()),
        })
    }

    fn eval(&self, x: &[f64], dtheta: &[f64], dcos: f64) -> Vec<f64> {
        let mut d = vec![0.0; self.dim];
        for t in &self.terms {
            d[t.row] += dtheta[t.param] * x[t.col];
        }
        if let Some(f) = &self.adversary {
            d[f.target_coord()] += f.tau() * x[f.speed_coord()] * dcos;
        }
        d
    }

    pub fn bound(&self, x_box: &AxisBox, strategy: SupStrategy) -> Result<ErrorBound> {
        check_dim("error state box", self.dim, x_box.dim())?;
        let mut state_cols: Vec<usize> = self.terms.iter().map(|t| t.col).collect();
        if let Some(f) = &self.adversary {
            state_cols.push(f.speed_coord());
        }
        state_cols.sort_unstable();
        state_cols.dedup();
        if state_cols.iter().any(|&c| !x_box.interval(c).is_finite()) {
            return Err(Error::invalid("error bound needs bounded state coordinates"));
        }
        let dtheta: Vec<Interval> = (0..self.theta.dim())
            .map(|k| self.theta.bounds.interval(k) - Interval::point(self.theta.nominal[k]))
            .collect();
        let dcos = self
            .adversary
            .as_ref()
            .map_or(Interval::point(0.0), |f| f.cosine_deviation());
        match strategy {
            SupStrategy::Corner => {
                let nvar = state_cols.len() + dtheta.len() + 1;
                let mut mags = vec![0.0f64; self.dim];
                let mut sum_mag = 0.0f64;
                let mut x = x_box.center();
                let mut th = vec![0.0; dtheta.len()];
                for mask in 0u64..(1u64 << nvar) {
                    let pick = |iv: Interval, bit: usize| if mask >> bit & 1 == 1 { iv.hi } else { iv.lo };
                    for (b, &c) in state_cols.iter().enumerate() {
                        x[c] = pick(x_box.interval(c), b);
                    }
                    for (k, iv) in dtheta.iter().enumerate() {
                        th[k] = pick(*iv, state_cols.len() + k);
                    }
                    let c = pick(dcos, nvar - 1);
                    let d = self.eval(&x, &th, c);
                    for (m, v) in mags.iter_mut().zip(&d) {
                        *m = m.max(v.abs());
                    }
                    sum_mag = sum_mag.max(d.iter().sum::<f64>().abs());
                }
                Ok(ErrorBound {
                    component_mags: mags,
                    sum_mag,
                })
            }
            SupStrategy::Interval => {
                let mut comp = vec![Interval::point(0.0); self.dim];
                for t in &self.terms {
                    comp[t.row] = comp[t.row] + dtheta[t.param] * x_box.interval(t.col);
                }
                if let Some(f) = &self.adversary {
                    let i = f.target_coord();
                    comp[i] = comp[i] + x_box.interval(f.speed_coord()).scale(f.tau()) * dcos;
                }
                let sum = comp.iter().fold(Interval::point(0.0), |s, c| s + *c);
                Ok(ErrorBound {
                    component_mags: comp.iter().map(Interval::mag).collect(),
                    sum_mag: sum.mag(),
                })
            }
        }
    }
}

/// δ field of an ambiguity certificate, evaluated per nominal state box.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AmbiguityField {
    pub error: ErrorDynamics,
    pub variance: Vec<f64>,
    pub mode: NormMode,
    /// Used only in unweighted mode.
    pub aggregation: Aggregation,
    pub strategy: SupStrategy,
    pub domain: AxisBox,
}

impl AmbiguityField {
    pub fn sup_over_box(&self, x_box: &AxisBox) -> Result<f64> {
        let b = self.error.bound(x_box, self.strategy)?;
        let c = match (self.mode, self.aggregation) {
            (NormMode::Weighted, _) => shift_norm(&b.component_mags, &self.variance, NormMode::Weighted)?,
            (NormMode::Unweighted, Aggregation::Vector) => {
                shift_norm(&b.component_mags, &self.variance, NormMode::Unweighted)?
            }
            (NormMode::Unweighted, Aggregation::ComponentSum) => b.sum_mag,
        };
        Ok(deficiency_from_norm(c))
    }

    pub fn at(&self, x: &[f64]) -> Result<f64> {
        self.sup_over_box(&AxisBox::point(x))
    }

    pub fn max(&self) -> f64 {
        self.sup_over_box(&self.domain).unwrap_or(1.0)
    }

    pub fn is_over_approximation(&self) -> bool {
        self.strategy == SupStrategy::Interval
    }
}

/// Certificate of the nominal surrogate against the whole ambiguity set;
/// the relation is the identity and ε is zero.
pub fn ambiguity_certificate(
    parametric: &GmdpModel,
    ambiguity: &AmbiguitySet,
    mode: NormMode,
    aggregation: Aggregation,
    strategy: SupStrategy,
    nominal_name: &str,
) -> Result<SimRelationCert> {
    let error = ErrorDynamics::from_model(parametric, ambiguity)?;
    let field = AmbiguityField {
        error,
        variance: parametric.noise.base.variance.clone(),
        mode,
        aggregation,
        strategy,
        domain: parametric.state_space.clone(),
    };
    let delta_max = field.max();
    let n = parametric.dim();
    Ok(SimRelationCert {
        abstract_system: nominal_name.to_string(),
        concrete_system: format!("{} (ambiguous)", parametric.name),
        epsilon: 0.0,
        delta: DeltaField::Ambiguity(field),
        relation: RelationDesc::Simple {
            base: BaseRelation::Equality,
            concrete_map: ConcreteMap::Linear(LinearMap::Identity(n)),
        },
        interface: InterfaceDesc::Identity,
        uniform_over_adversaries: true,
        provenance: vec![ProvenanceEntry {
            kind: "ambiguity".into(),
            detail: format!("{mode} norm, {strategy:?} bound"),
            epsilon: 0.0,
            delta_max,
        }],
    })
}

/// δ₂ over a grid of the two velocities, other coordinates irrelevant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Delta2Grid {
    pub agent_speeds: Vec<f64>,
    pub env_speeds: Vec<f64>,
    /// `values[i][j]` at `(agent_speeds[i], env_speeds[j])`.
    pub values: Vec<Vec<f64>>,
    pub max: f64,
    pub mode: NormMode,
}

impl Delta2Grid {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::io(path, e))?;
        let io = |e: csv::Error| Error::io(path, e);
        w.write_record(["v_agent", "v_env", "delta2"]).map_err(io)?;
        for (i, va) in self.agent_speeds.iter().enumerate() {
            for (j, vs) in self.env_speeds.iter().enumerate() {
                w.write_record([va.to_string(), vs.to_string(), self.values[i][j].to_string()])
                    .map_err(io)?;
            }
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }
}

fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![0.5 * (lo + hi)];
    }
    (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect()
}

/// Ambiguity field of the scenario on a velocity grid. Unweighted mode uses
/// the scalar component sum.
pub fn case_study_ambiguity_field(cs: &CaseStudy, mode: NormMode) -> Result<AmbiguityField> {
    let model = cs.reduced_composite()?;
    let amb = AmbiguitySet {
        theta: cs.theta.clone(),
        adversary: cs.composite_adversaries(),
    };
    Ok(AmbiguityField {
        error: ErrorDynamics::from_model(&model, &amb)?,
        variance: model.noise.base.variance.clone(),
        mode,
        aggregation: match mode {
            NormMode::Weighted => Aggregation::Vector,
            NormMode::Unweighted => Aggregation::ComponentSum,
        },
        strategy: SupStrategy::Corner,
        domain: model.state_space.clone(),
    })
}

pub fn case_study_delta2_field(cs: &CaseStudy, mode: NormMode, counts: (usize, usize)) -> Result<Delta2Grid> {
    if counts.0 == 0 || counts.1 == 0 {
        return Err(Error::invalid("delta2 grid needs at least one point per axis"));
    }
    let field = case_study_ambiguity_field(cs, mode)?;
    let d = &field.domain;
    let agent_speeds = linspace(d.lower[0], d.upper[0], counts.0);
    let env_speeds = linspace(d.lower[2], d.upper[2], counts.1);
    let mut values = Vec::with_capacity(counts.0);
    let mut max: f64 = 0.0;
    for &va in &agent_speeds {
        let mut row = Vec::with_capacity(counts.1);
        for &vs in &env_speeds {
            let v = field.at(&[va, 0.0, vs, 0.0])?;
            max = max.max(v);
            row.push(v);
        }
        values.push(row);
    }
    Ok(Delta2Grid {
        agent_speeds,
        env_speeds,
        values,
        max,
        mode,
    })
}

/// Truncation of coordinates that do not feed back into the retained ones.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartialMorSpec {
    /// Coordinates of the full state kept by F, in reduced order.
    pub retained: Vec<usize>,
    /// Radius of the weighted ball around F(x); zero for strict equality.
    pub epsilon_r: f64,
    /// Diagonal of D_r; `None` is the identity.
    pub weights: Option<Vec<f64>>,
    pub mc_samples: usize,
    pub mc_seed: u64,
    /// Grid points per truncated axis for the Monte Carlo fallback.
    pub mc_grid: usize,
    /// One-sided error level of the Monte Carlo bound.
    pub mc_alpha: f64,
}

impl PartialMorSpec {
    pub fn new(retained: Vec<usize>) -> Self {
        PartialMorSpec {
            retained,
            epsilon_r: 0.0,
            weights: None,
            mc_samples: 100_000,
            mc_seed: 0x5eed,
            mc_grid: 5,
            mc_alpha: 0.01,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MorMethod {
    ClosedForm,
    /// Clopper–Pearson upper bound; `radius` is the largest gap between the
    /// bound and the point estimate.
    MonteCarlo { samples: usize, confidence: f64, radius: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MorCertificate {
    pub cert: SimRelationCert,
    pub delta_per_input: Vec<f64>,
    pub method: MorMethod,
}

fn rows_cols(m: &Matrix, rows: &[usize], cols: &[usize]) -> Matrix {
    rows.iter().map(|&i| cols.iter().map(|&j| m[i][j]).collect()).collect()
}

fn nearly_equal(a: &Matrix, b: &Matrix) -> bool {
    a.len() == b.len()
        && a.iter().zip(b).all(|(r, s)| {
            r.len() == s.len() && r.iter().zip(s).all(|(x, y)| (x - y).abs() <= STRUCT_TOL)
        })
}

/// Certificate `reduced ≼ full` for a truncation of decoupled coordinates.
/// `inputs` are the abstract input levels δ is reported at; `adversary`, in
/// full-state coordinates, must act on retained coordinates only.
pub fn partial_mor_certificate(
    full: &GmdpModel,
    reduced: &GmdpModel,
    spec: &PartialMorSpec,
    theta: &ParameterBox,
    inputs: &[Vec<f64>],
    adversary: Option<&AdversaryFamily>,
) -> Result<MorCertificate> {
    let n = full.dim();
    let r = &spec.retained;
    check_dim("reduced state", r.len(), reduced.dim())?;
    check_dim("reduced input", full.input_dim(), reduced.input_dim())?;
    check_dim("parameters", full.n_params, theta.dim())?;
    check_dim("reduced parameters", full.n_params, reduced.n_params)?;
    if r.iter().any(|&i| i >= n) {
        return Err(Error::invalid("retained coordinate out of range"));
    }
    let t: Vec<usize> = (0..n).filter(|i| !r.contains(i)).collect();
    if t.is_empty() {
        return Err(Error::invalid("nothing to truncate"));
    }
    let (fa, ra) = match (full.affine(), reduced.affine()) {
        (Some(a), Some(b)) => (a, b),
        _ => return Err(Error::refused("truncation needs affine drifts")),
    };
    if full.observation_dim != 0 || reduced.observation_dim != 0 {
        return Err(Error::refused("truncation expects closed interconnections"));
    }
    if let Some(f) = adversary {
        if !r.contains(&f.speed_coord()) || !r.contains(&f.target_coord()) {
            return Err(Error::refused("adversary acts on a truncated coordinate"));
        }
    }
    for (k, &i) in r.iter().enumerate() {
        let same = full.noise.base.variance[i] == reduced.noise.base.variance[k]
            && full.noise.support.lower[i] == reduced.noise.support.lower[k]
            && full.noise.support.upper[i] == reduced.noise.support.upper[k];
        if !same {
            return Err(Error::refused(format!("noise of retained coordinate {i} differs")));
        }
    }
    let all: Vec<usize> = (0..full.input_dim()).collect();
    if !nearly_equal(&rows_cols(&fa.b, r, &all), &ra.b) {
        return Err(Error::refused("input matrices differ on retained coordinates"));
    }
    if r.iter().enumerate().any(|(k, &i)| (fa.c[i] - ra.c[k]).abs() > STRUCT_TOL) {
        return Err(Error::refused("drift offsets differ on retained coordinates"));
    }

    let corners = theta.corners();
    let mut feed = Vec::with_capacity(corners.len());
    let mut trunc_a = Vec::with_capacity(corners.len());
    for th in &corners {
        let af = fa.a_at(th);
        if !nearly_equal(&rows_cols(&af, r, r), &ra.a_at(th)) {
            return Err(Error::refused("retained dynamics differ from the reduced model"));
        }
        if rows_cols(&af, &t, r).iter().flatten().any(|v| v.abs() > STRUCT_TOL) {
            return Err(Error::refused(
                "unregistered coupling structure: truncated coordinates depend on retained ones",
            ));
        }
        feed.push(rows_cols(&af, r, &t));
        trunc_a.push(rows_cols(&af, &t, &t));
    }
    let x_t = AxisBox {
        lower: t.iter().map(|&i| full.state_space.lower[i]).collect(),
        upper: t.iter().map(|&i| full.state_space.upper[i]).collect(),
    };
    if !x_t.is_bounded() {
        return Err(Error::invalid("truncated coordinates need a bounded domain"));
    }
    let b_t = rows_cols(&fa.b, &t, &all);
    let stay = |k: usize, xi: &[f64], u: &[f64]| -> f64 {
        let mut p = 1.0;
        for (q, &ti) in t.iter().enumerate() {
            let mean: f64 = fa.c[ti]
                + trunc_a[k][q].iter().zip(xi).map(|(a, x)| a * x).sum::<f64>()
                + b_t[q].iter().zip(u).map(|(b, v)| b * v).sum::<f64>();
            p *= full.noise.marginal_mass(ti, x_t.lower[q] - mean, x_t.upper[q] - mean);
        }
        p
    };
    for u in inputs {
        check_dim("input level", full.input_dim(), u.len())?;
    }
    let decoupled = feed.iter().flatten().flatten().all(|v| v.abs() <= STRUCT_TOL);

    let (delta_per_input, method) = if decoupled {
        // The stay mass is log-concave in the mean, which is affine in ξ for
        // each θ and in θ for each ξ; its minimum sits on a vertex pair.
        let xi_corners = x_t.corners();
        let d = inputs
            .iter()
            .map(|u| {
                let mut worst: f64 = 1.0;
                for k in 0..corners.len() {
                    for xi in &xi_corners {
                        worst = worst.min(stay(k, xi, u));
                    }
                }
                (1.0 - worst).clamp(0.0, 1.0)
            })
            .collect();
        (d, MorMethod::ClosedForm)
    } else {
        monte_carlo_truncation(full, r, &x_t, &feed, &stay, inputs, corners.len(), spec)?
    };

    let epsilon = truncation_output_bound(full, reduced, r, spec)?;
    let dmax = delta_per_input.iter().copied().fold(0.0, f64::max);
    let relation = RelationDesc::Simple {
        base: if spec.epsilon_r > 0.0 {
            BaseRelation::Ball {
                radius: spec.epsilon_r,
                weights: spec.weights.clone().unwrap_or_else(|| vec![1.0; r.len()]),
            }
        } else {
            BaseRelation::Equality
        },
        concrete_map: ConcreteMap::Linear(LinearMap::projection(n, r.clone())),
    };
    Ok(MorCertificate {
        cert: SimRelationCert {
            abstract_system: reduced.name.clone(),
            concrete_system: full.name.clone(),
            epsilon,
            delta: DeltaField::PerInput(delta_per_input.clone()),
            relation,
            interface: InterfaceDesc::Identity,
            uniform_over_adversaries: true,
            provenance: vec![ProvenanceEntry {
                kind: "partial-order-reduction".into(),
                detail: format!("truncated coordinates {t:?}, {method:?}"),
                epsilon,
                delta_max: dmax,
            }],
        },
        delta_per_input,
        method,
    })
}

#[allow(clippy::too_many_arguments)]
fn monte_carlo_truncation(
    full: &GmdpModel,
    r: &[usize],
    x_t: &AxisBox,
    feed: &[Matrix],
    stay: &dyn Fn(usize, &[f64], &[f64]) -> f64,
    inputs: &[Vec<f64>],
    n_theta: usize,
    spec: &PartialMorSpec,
) -> Result<(Vec<f64>, MorMethod)> {
    if spec.mc_samples == 0 || spec.mc_grid == 0 {
        return Err(Error::invalid("Monte Carlo fallback needs samples and grid points"));
    }
    let axes: Vec<Vec<f64>> = (0..x_t.dim())
        .map(|q| linspace(x_t.lower[q], x_t.upper[q], spec.mc_grid.max(2)))
        .collect();
    let mut grid: Vec<Vec<f64>> = vec![Vec::new()];
    for ax in &axes {
        grid = grid
            .into_iter()
            .flat_map(|p| {
                ax.iter().map(move |v| {
                    let mut q = p.clone();
                    q.push(*v);
                    q
                })
            })
            .collect();
    }
    let var: Vec<f64> = r.iter().map(|&i| full.noise.base.variance[i]).collect();
    let lo: Vec<f64> = r.iter().map(|&i| full.noise.support.lower[i]).collect();
    let hi: Vec<f64> = r.iter().map(|&i| full.noise.support.upper[i]).collect();
    let seeds = SeedStream::new(spec.mc_seed);
    let mut radius: f64 = 0.0;
    let mut out = Vec::with_capacity(inputs.len());
    for (ui, u) in inputs.iter().enumerate() {
        let mut worst: f64 = 0.0;
        for k in 0..n_theta {
            for (gi, xi) in grid.iter().enumerate() {
                let s = stay(k, xi, u);
                let shift: Vec<f64> = feed[k]
                    .iter()
                    .map(|row| row.iter().zip(xi).map(|(c, x)| c * x).sum())
                    .collect();
                let idx = ((ui * n_theta + k) * grid.len() + gi) as u64;
                let mut rng = seeds.rng(idx);
                let mut hits = 0u64;
                for _ in 0..spec.mc_samples {
                    let w = full.noise.sample(&mut rng);
                    let mut log_ratio = 0.0;
                    let mut inside = true;
                    for (q, &i) in r.iter().enumerate() {
                        let wr = w[i];
                        let wf = wr - shift[q];
                        inside &= wf >= lo[q] && wf <= hi[q];
                        log_ratio -= 0.5 * (wf * wf - wr * wr) / var[q];
                    }
                    if inside && rng.random::<f64>() < s * log_ratio.exp() {
                        hits += 1;
                    }
                }
                let n = spec.mc_samples as u64;
                let bound = 1.0 - clopper_pearson_lower(hits, n, spec.mc_alpha);
                radius = radius.max(bound - (1.0 - hits as f64 / n as f64));
                worst = worst.max(bound);
            }
        }
        out.push(worst.clamp(0.0, 1.0));
    }
    Ok((
        out,
        MorMethod::MonteCarlo {
            samples: spec.mc_samples,
            confidence: 1.0 - spec.mc_alpha,
            radius,
        },
    ))
}

fn truncation_output_bound(full: &GmdpModel, reduced: &GmdpModel, r: &[usize], spec: &PartialMorSpec) -> Result<f64> {
    check_dim("outputs", full.output.coords.len(), reduced.output.coords.len())?;
    let mut mags = Vec::with_capacity(full.output.coords.len());
    for (&a, &k) in full.output.coords.iter().zip(&reduced.output.coords) {
        let b = r[k];
        let base = if a == b {
            0.0
        } else {
            (full.state_space.interval(a) - full.state_space.interval(b)).mag()
        };
        let w = spec.weights.as_ref().map_or(1.0, |w| w[k]);
        let ball = if spec.epsilon_r == 0.0 {
            0.0
        } else if w > 0.0 {
            spec.epsilon_r / w.sqrt()
        } else {
            f64::INFINITY
        };
        mags.push(base + ball);
    }
    Ok(full.output.norm_of_magnitudes(&mags))
}

/// Order reduction with an ε-ball relation `‖x − F′x_r‖_D ≤ ε_r` and a
/// noise shift γ: `w = γ + w_r`, both standard normal channels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FullMorSpec {
    /// F′, n × n_r.
    pub lift: Matrix,
    /// Diagonal of D.
    pub weights: Vec<f64>,
    pub epsilon_r: f64,
    /// Admissible shifts Γ on the noise channel.
    pub gamma: AxisBox,
    /// B_w, n × k (diagonal, k = n).
    pub b_w: Matrix,
    /// B_{w,r}, n_r × k.
    pub b_wr: Matrix,
    pub interface: InterfaceDesc,
    /// Half-width, in standard deviations, of the box the reduced noise is
    /// truncated to when it enters the error dynamics.
    pub truncation: f64,
}

fn affine_interface(iface: &InterfaceDesc, m: usize, m_r: usize) -> Result<(Matrix, Vec<f64>)> {
    match iface {
        InterfaceDesc::Identity => {
            check_dim("identity interface", m, m_r)?;
            Ok((crate::gmdp::identity(m), vec![0.0; m]))
        }
        InterfaceDesc::Affine { matrix, offset } => {
            check_dim("interface rows", m, matrix.len())?;
            check_dim("interface offset", m, offset.len())?;
            Ok((matrix.clone(), offset.clone()))
        }
        InterfaceDesc::Chain(_) => Err(Error::invalid("chained interfaces are not supported here")),
    }
}

fn sub(a: &Matrix, b: &Matrix) -> Matrix {
    a.iter().zip(b).map(|(r, s)| r.iter().zip(s).map(|(x, y)| x - y).collect()).collect()
}

/// Interval of `Σ_j m[j] · iv[j]`, skipping zero coefficients so unbounded
/// variables with no influence stay harmless.
fn dot_interval(row: &[f64], ivs: &[Interval]) -> Interval {
    row.iter()
        .zip(ivs)
        .filter(|(c, _)| **c != 0.0)
        .fold(Interval::point(0.0), |acc, (c, iv)| acc + iv.scale(*c))
}

/// Certificate `reduced ≼ full` by controlled invariance of the ε-ball
/// under one-step interval propagation of the error dynamics.
pub fn full_mor_certificate(
    full: &GmdpModel,
    reduced: &GmdpModel,
    theta: &[f64],
    theta_r: &[f64],
    spec: &FullMorSpec,
) -> Result<SimRelationCert> {
    let (n, nr) = (full.dim(), reduced.dim());
    let (fa, ra) = match (full.affine(), reduced.affine()) {
        (Some(a), Some(b)) => (a, b),
        _ => return Err(Error::refused("order reduction needs affine drifts")),
    };
    check_dim("parameters", full.n_params, theta.len())?;
    check_dim("reduced parameters", reduced.n_params, theta_r.len())?;
    check_dim("lift rows", n, spec.lift.len())?;
    check_dim("weights", n, spec.weights.len())?;
    check_dim("B_w rows", n, spec.b_w.len())?;
    check_dim("B_wr rows", nr, spec.b_wr.len())?;
    let k = spec.b_w.first().map_or(0, |r| r.len());
    check_dim("noise channel", k, spec.gamma.dim())?;
    for row in &spec.lift {
        check_dim("lift cols", nr, row.len())?;
    }
    for row in spec.b_w.iter().chain(&spec.b_wr) {
        check_dim("noise channel", k, row.len())?;
    }
    if k != n || (0..n).any(|i| (0..k).any(|j| i != j && spec.b_w[i][j] != 0.0)) {
        return Err(Error::refused("noise channel of the full model must be diagonal"));
    }
    if full.observation_dim != 0 || reduced.observation_dim != 0 {
        return Err(Error::refused("order reduction expects closed models"));
    }
    let (m, mr) = (full.input_dim(), reduced.input_dim());
    let (imat, ioff) = affine_interface(&spec.interface, m, mr)?;

    let a = fa.a_at(theta);
    let a_r = ra.a_at(theta_r);
    let fp = &spec.lift;
    let g_x = sub(&mat_mul(&a, fp), &mat_mul(fp, &a_r));
    let g_u = if mr > 0 { sub(&mat_mul(&fa.b, &imat), &mat_mul(fp, &ra.b)) } else { vec![Vec::new(); n] };
    let g_w = sub(&spec.b_w, &mat_mul(fp, &spec.b_wr));
    let mut offset = fa.c.clone();
    for i in 0..n {
        offset[i] += fa.b[i].iter().zip(&ioff).map(|(b, c)| b * c).sum::<f64>();
        offset[i] -= fp[i].iter().zip(&ra.c).map(|(f, c)| f * c).sum::<f64>();
    }

    let e_box: Vec<Interval> = spec
        .weights
        .iter()
        .map(|&d| {
            let h = if d > 0.0 { spec.epsilon_r / d.sqrt() } else { f64::INFINITY };
            Interval::new(-h, h)
        })
        .collect();
    let used_w: Vec<bool> = (0..k).map(|j| g_w.iter().any(|row| row[j].abs() > STRUCT_TOL)).collect();
    let w_box: Vec<Interval> = used_w
        .iter()
        .map(|&u| if u { Interval::new(-spec.truncation, spec.truncation) } else { Interval::point(0.0) })
        .collect();
    let trunc_mass = std_normal_interval(-spec.truncation, spec.truncation);
    let delta_trunc = 1.0 - used_w.iter().filter(|u| **u).fold(1.0, |p, _| p * trunc_mass);
    let xr_box = reduced.state_space.intervals();
    let ur_box = reduced.input_space.intervals();

    let mut residuals = Vec::with_capacity(n);
    let mut worst_corner = Vec::with_capacity(n);
    for i in 0..n {
        let h = Interval::point(offset[i])
            + dot_interval(&a[i], &e_box)
            + dot_interval(&g_x[i], &xr_box)
            + dot_interval(&g_u[i], &ur_box)
            + dot_interval(&g_w[i], &w_box);
        if !h.is_finite() {
            return Err(Error::refused(format!("error coordinate {i} is unbounded over the relation")));
        }
        let reach = spec.gamma.interval(i).scale(-spec.b_w[i][i]);
        let dist = |p: f64| {
            if p < reach.lo {
                reach.lo - p
            } else if p > reach.hi {
                p - reach.hi
            } else {
                0.0
            }
        };
        let (dl, dh) = (dist(h.lo), dist(h.hi));
        residuals.push(dl.max(dh));
        worst_corner.push(if dl >= dh { h.lo } else { h.hi });
    }
    let res_norm: f64 = residuals
        .iter()
        .zip(&spec.weights)
        .map(|(r, d)| d * r * r)
        .sum::<f64>()
        .sqrt();
    if res_norm > spec.epsilon_r + 1e-12 {
        return Err(Error::refused(format!(
            "controlled invariance fails: worst error corner {worst_corner:?} leaves the ball by residual {res_norm} > {}",
            spec.epsilon_r
        )));
    }
    let gamma_norm = spec
        .gamma
        .corners()
        .iter()
        .map(|g| g.iter().map(|v| v * v).sum::<f64>().sqrt())
        .fold(0.0, f64::max);
    let delta = (deficiency_from_norm(gamma_norm) + delta_trunc).min(1.0);

    check_dim("outputs", full.output.coords.len(), reduced.output.coords.len())?;
    let mut mags = Vec::with_capacity(full.output.coords.len());
    for (&ci, &cr) in full.output.coords.iter().zip(&reduced.output.coords) {
        let mut row = fp[ci].clone();
        row[cr] -= 1.0;
        let mut e_row = vec![0.0; n];
        e_row[ci] = 1.0;
        let iv = dot_interval(&row, &xr_box) + dot_interval(&e_row, &e_box);
        mags.push(iv.mag());
    }
    let epsilon = full.output.norm_of_magnitudes(&mags);

    Ok(SimRelationCert {
        abstract_system: reduced.name.clone(),
        concrete_system: full.name.clone(),
        epsilon,
        delta: DeltaField::Scalar(delta),
        relation: RelationDesc::Simple {
            base: BaseRelation::LiftedBall {
                radius: spec.epsilon_r,
                weights: spec.weights.clone(),
                lift: spec.lift.clone(),
            },
            concrete_map: ConcreteMap::Linear(LinearMap::Identity(n)),
        },
        interface: spec.interface.clone(),
        uniform_over_adversaries: full.disturbance_dim == 0 && reduced.disturbance_dim == 0,
        provenance: vec![ProvenanceEntry {
            kind: "order-reduction".into(),
            detail: format!("noise shift bound {gamma_norm}, truncation loss {delta_trunc}"),
            epsilon,
            delta_max: delta,
        }],
    })
}
