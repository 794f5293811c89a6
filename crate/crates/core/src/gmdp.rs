//! Parametrized stochastic difference equations with outputs.
//!
//! A [`GmdpModel`] is `x₊ = f(x, u, o; θ) + d + w` with a drift drawn from
//! a small registry of closed forms, an additive disturbance `d` supplied by
//! an adversary, and diagonal (optionally truncated) Gaussian noise `w`.
//! Affine models can be interconnected into joint affine models, which is
//! what the compensators and the abstraction operate on.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::interval::Interval;
use crate::measures::{AxisBox, GaussianMeasure, TruncatedGaussian};

pub type Matrix = Vec<Vec<f64>>;

pub fn zeros(rows: usize, cols: usize) -> Matrix {
    vec![vec![0.0; cols]; rows]
}

pub fn identity(n: usize) -> Matrix {
    let mut m = zeros(n, n);
    for (i, row) in m.iter_mut().enumerate() {
        row[i] = 1.0;
    }
    m
}

fn mat_vec(m: &Matrix, x: &[f64], out: &mut [f64]) {
    for (o, row) in out.iter_mut().zip(m) {
        *o += row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
    }
}

pub fn mat_mul(a: &Matrix, b: &Matrix) -> Matrix {
    let cols = b.first().map_or(0, |r| r.len());
    a.iter()
        .map(|row| {
            (0..cols)
                .map(|j| row.iter().zip(b).map(|(x, br)| x * br[j]).sum())
                .collect()
        })
        .collect()
}

/// Linear maps between state spaces, used for `F`, `P` and wiring.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LinearMap {
    Identity(usize),
    /// Selects `coords` from a `dim_in`-vector.
    Projection { dim_in: usize, coords: Vec<usize> },
    Matrix(Matrix),
}

impl LinearMap {
    pub fn projection(dim_in: usize, coords: Vec<usize>) -> Self {
        LinearMap::Projection { dim_in, coords }
    }

    pub fn dim_in(&self) -> usize {
        match self {
            LinearMap::Identity(n) => *n,
            LinearMap::Projection { dim_in, .. } => *dim_in,
            LinearMap::Matrix(m) => m.first().map_or(0, |r| r.len()),
        }
    }

    pub fn dim_out(&self) -> usize {
        match self {
            LinearMap::Identity(n) => *n,
            LinearMap::Projection { coords, .. } => coords.len(),
            LinearMap::Matrix(m) => m.len(),
        }
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        match self {
            LinearMap::Identity(_) => x.to_vec(),
            LinearMap::Projection { coords, .. } => coords.iter().map(|&i| x[i]).collect(),
            LinearMap::Matrix(m) => {
                let mut out = vec![0.0; m.len()];
                mat_vec(m, x, &mut out);
                out
            }
        }
    }

    pub fn to_matrix(&self) -> Matrix {
        match self {
            LinearMap::Identity(n) => identity(*n),
            LinearMap::Projection { dim_in, coords } => coords
                .iter()
                .map(|&c| {
                    let mut row = vec![0.0; *dim_in];
                    row[c] = 1.0;
                    row
                })
                .collect(),
            LinearMap::Matrix(m) => m.clone(),
        }
    }

    /// Block-diagonal map acting on concatenated vectors.
    pub fn block_diag(a: &LinearMap, b: &LinearMap) -> LinearMap {
        let (ma, mb) = (a.to_matrix(), b.to_matrix());
        let (ia, ib) = (a.dim_in(), b.dim_in());
        let mut rows = Vec::with_capacity(ma.len() + mb.len());
        for r in &ma {
            let mut row = r.clone();
            row.extend(std::iter::repeat_n(0.0, ib));
            rows.push(row);
        }
        for r in &mb {
            let mut row = vec![0.0; ia];
            row.extend_from_slice(r);
            rows.push(row);
        }
        LinearMap::Matrix(rows)
    }

    pub fn is_identity(&self) -> bool {
        let m = self.to_matrix();
        m.len() == self.dim_in() && m == identity(m.len())
    }
}

/// `A[row][col] = θ[param]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThetaSlot {
    pub row: usize,
    pub col: usize,
    pub param: usize,
}

/// `f(x, u, o; θ) = A(θ)x + Bu + No + c`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AffineDrift {
    pub a: Matrix,
    pub b: Matrix,
    pub n: Matrix,
    pub c: Vec<f64>,
    pub theta_slots: Vec<ThetaSlot>,
}

impl AffineDrift {
    pub fn dim(&self) -> usize {
        self.a.len()
    }

    /// System matrix with parameters substituted.
    pub fn a_at(&self, theta: &[f64]) -> Matrix {
        let mut a = self.a.clone();
        for s in &self.theta_slots {
            a[s.row][s.col] = theta[s.param];
        }
        a
    }

    pub fn eval(&self, x: &[f64], u: &[f64], o: &[f64], theta: &[f64]) -> Vec<f64> {
        let mut out = self.c.clone();
        mat_vec(&self.a_at(theta), x, &mut out);
        mat_vec(&self.b, u, &mut out);
        mat_vec(&self.n, o, &mut out);
        out
    }

    fn n_params(&self) -> usize {
        self.theta_slots.iter().map(|s| s.param + 1).max().unwrap_or(0)
    }
}

/// Single-track vehicle with linearized tire forces, advanced by one
/// explicit Euler step. State order is (β, dΨ, Ψ, v, s_x, s_y); the
/// observation is the other vehicle's state, entering through `a4`, `a5`
/// on its first coordinate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BicycleDrift {
    pub tau: f64,
    pub c: f64,
    pub g: f64,
    pub mu: f64,
    pub l: f64,
    pub m: f64,
    pub iz: f64,
    pub a4: f64,
    pub a5: f64,
}

impl BicycleDrift {
    pub fn beta_rate(&self, beta: f64, dpsi: f64, v: f64) -> f64 {
        -self.c * self.g * self.mu * beta / v - dpsi
    }

    pub fn yaw_accel(&self, dpsi: f64, v: f64) -> f64 {
        -self.c * self.g * self.l * self.mu * self.m * dpsi / (self.iz * v)
    }

    pub fn eval(&self, x: &[f64], o: &[f64], theta: f64) -> Result<Vec<f64>> {
        let (beta, dpsi, psi, v, sx, sy) = (x[0], x[1], x[2], x[3], x[4], x[5]);
        if !(v > 0.0) {
            return Err(Error::OutOfDomain(format!(
                "bicycle drift needs a positive speed, got {v}"
            )));
        }
        let obs = o.first().copied().unwrap_or(0.0);
        let heading = beta + psi;
        Ok(vec![
            beta + self.tau * self.beta_rate(beta, dpsi, v),
            dpsi + self.tau * self.yaw_accel(dpsi, v),
            psi + self.tau * dpsi,
            theta * v + self.a4 * obs,
            sx + self.tau * v * heading.cos() + self.a5 * obs,
            sy + self.tau * v * heading.sin(),
        ])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Drift {
    Affine(AffineDrift),
    Bicycle(BicycleDrift),
}

/// Output map `h`; only coordinate projections are supported.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutputMap {
    pub coords: Vec<usize>,
    /// Diagonal weights of the output metric; `None` is plain L2.
    pub weights: Option<Vec<f64>>,
}

impl OutputMap {
    pub fn projection(coords: Vec<usize>) -> Self {
        OutputMap {
            coords,
            weights: None,
        }
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        self.coords.iter().map(|&i| x[i]).collect()
    }

    pub fn distance(&self, a: &[f64], b: &[f64]) -> f64 {
        let s: f64 = a
            .iter()
            .zip(b)
            .enumerate()
            .map(|(i, (x, y))| {
                let w = self.weights.as_ref().map_or(1.0, |w| w[i]);
                w * (x - y) * (x - y)
            })
            .sum();
        s.sqrt()
    }

    /// Largest metric value over a box of per-coordinate magnitudes.
    pub fn norm_of_magnitudes(&self, mags: &[f64]) -> f64 {
        let zero = vec![0.0; mags.len()];
        self.distance(mags, &zero)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GmdpModel {
    pub name: String,
    pub state_space: AxisBox,
    pub initial_set: AxisBox,
    /// Zero-dimensional when the model is autonomous.
    pub input_space: AxisBox,
    pub observation_dim: usize,
    /// Zero when the model takes no disturbance; otherwise equal to the
    /// state dimension (disturbances are additive).
    pub disturbance_dim: usize,
    pub n_params: usize,
    pub drift: Drift,
    pub noise: TruncatedGaussian,
    pub output: OutputMap,
}

impl GmdpModel {
    pub fn dim(&self) -> usize {
        self.state_space.dim()
    }

    pub fn input_dim(&self) -> usize {
        self.input_space.dim()
    }

    pub fn affine(&self) -> Option<&AffineDrift> {
        match &self.drift {
            Drift::Affine(a) => Some(a),
            Drift::Bicycle(_) => None,
        }
    }

    pub(crate) fn validate(&self) -> Result<()> {
        let n = self.dim();
        check_dim("initial set", n, self.initial_set.dim())?;
        check_dim("noise", n, self.noise.dim())?;
        if self.disturbance_dim != 0 {
            check_dim("disturbance", n, self.disturbance_dim)?;
        }
        for &c in &self.output.coords {
            if c >= n {
                return Err(Error::invalid(format!(
                    "{}: output coordinate {c} outside a {n}-dimensional state",
                    self.name
                )));
            }
        }
        match &self.drift {
            Drift::Affine(a) => {
                check_dim("drift A rows", n, a.a.len())?;
                check_dim("drift B rows", n, a.b.len())?;
                check_dim("drift N rows", n, a.n.len())?;
                check_dim("drift offset", n, a.c.len())?;
                for row in &a.a {
                    check_dim("drift A cols", n, row.len())?;
                }
                for row in &a.b {
                    check_dim("drift B cols", self.input_dim(), row.len())?;
                }
                for row in &a.n {
                    check_dim("drift N cols", self.observation_dim, row.len())?;
                }
                if a.n_params() > self.n_params {
                    return Err(Error::invalid(format!(
                        "{}: drift uses {} parameters, model declares {}",
                        self.name,
                        a.n_params(),
                        self.n_params
                    )));
                }
            }
            Drift::Bicycle(_) => {
                check_dim("bicycle state", 6, n)?;
                if self.n_params != 1 {
                    return Err(Error::invalid("bicycle drift takes exactly one parameter"));
                }
            }
        }
        Ok(())
    }

    pub fn drift_at(&self, x: &[f64], u: &[f64], o: &[f64], theta: &[f64]) -> Result<Vec<f64>> {
        check_dim("state", self.dim(), x.len())?;
        check_dim("input", self.input_dim(), u.len())?;
        check_dim("observation", self.observation_dim, o.len())?;
        check_dim("parameters", self.n_params, theta.len())?;
        match &self.drift {
            Drift::Affine(a) => Ok(a.eval(x, u, o, theta)),
            Drift::Bicycle(b) => b.eval(x, o, theta[0]),
        }
    }

    /// One transition `f(x, u, o; θ) + d + w` with `w` drawn from the noise.
    pub fn step<R: Rng + ?Sized>(
        &self,
        x: &[f64],
        u: &[f64],
        o: &[f64],
        theta: &[f64],
        disturbance: &[f64],
        rng: &mut R,
    ) -> Result<Vec<f64>> {
        if !self.state_space.contains(x) {
            return Err(Error::OutOfDomain(format!("{}: state {x:?}", self.name)));
        }
        if !self.input_space.contains(u) {
            return Err(Error::OutOfDomain(format!("{}: input {u:?}", self.name)));
        }
        let w = self.noise.sample(rng);
        self.step_with_noise(x, u, o, theta, disturbance, &w)
    }

    /// Transition with an explicit noise realization; no domain checks.
    pub fn step_with_noise(
        &self,
        x: &[f64],
        u: &[f64],
        o: &[f64],
        theta: &[f64],
        disturbance: &[f64],
        w: &[f64],
    ) -> Result<Vec<f64>> {
        let mut next = self.drift_at(x, u, o, theta)?;
        if !disturbance.is_empty() {
            check_dim("disturbance", self.dim(), disturbance.len())?;
            for (n, d) in next.iter_mut().zip(disturbance) {
                *n += d;
            }
        }
        check_dim("noise sample", self.dim(), w.len())?;
        for (n, w) in next.iter_mut().zip(w) {
            *n += w;
        }
        Ok(next)
    }

    /// Test hook: replaces every noise variance by `floor`.
    pub fn with_noise_floor(&self, floor: f64) -> Result<GmdpModel> {
        let base = GaussianMeasure::new(vec![0.0; self.dim()], vec![floor; self.dim()])?;
        let mut m = self.clone();
        m.noise = TruncatedGaussian::untruncated(base);
        Ok(m)
    }

    pub fn output_of(&self, x: &[f64]) -> Vec<f64> {
        self.output.apply(x)
    }

    /// Bakes parameter values into the system matrix.
    pub fn fix_parameters(&self, theta: &[f64]) -> Result<GmdpModel> {
        check_dim("parameters", self.n_params, theta.len())?;
        let a = self
            .affine()
            .ok_or_else(|| Error::invalid("only affine drifts can be specialized"))?;
        let mut m = self.clone();
        m.drift = Drift::Affine(AffineDrift {
            a: a.a_at(theta),
            b: a.b.clone(),
            n: a.n.clone(),
            c: a.c.clone(),
            theta_slots: Vec::new(),
        });
        m.n_params = 0;
        Ok(m)
    }

    /// Absorbs an adversary at fixed parameters into the affine drift; the
    /// resulting model has no disturbance channel.
    pub fn fold_adversary(&self, family: &AdversaryFamily, params: &[f64]) -> Result<GmdpModel> {
        check_dim("adversary parameters", family.param_box.dim(), params.len())?;
        let a = self
            .affine()
            .ok_or_else(|| Error::invalid("only affine drifts can absorb an adversary"))?;
        if self.disturbance_dim == 0 {
            return Err(Error::invalid(format!("{} takes no disturbance", self.name)));
        }
        let mut drift = a.clone();
        for (row, col, k) in family.linear_entries(params)? {
            if drift.theta_slots.iter().any(|s| s.row == row && s.col == col) {
                return Err(Error::invalid(
                    "adversary overlaps a parametrized matrix entry",
                ));
            }
            drift.a[row][col] += k;
        }
        let mut m = self.clone();
        m.drift = Drift::Affine(drift);
        m.disturbance_dim = 0;
        Ok(m)
    }
}

/// Box Θ of uncertain parameters together with the nominal estimate θ̂.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterBox {
    pub names: Vec<String>,
    pub bounds: AxisBox,
    pub nominal: Vec<f64>,
}

impl ParameterBox {
    pub fn new(names: Vec<String>, bounds: AxisBox, nominal: Vec<f64>) -> Result<Self> {
        check_dim("parameter names", bounds.dim(), names.len())?;
        check_dim("nominal parameters", bounds.dim(), nominal.len())?;
        if !bounds.contains(&nominal) {
            return Err(Error::invalid(format!(
                "nominal parameters {nominal:?} lie outside the parameter box"
            )));
        }
        Ok(ParameterBox {
            names,
            bounds,
            nominal,
        })
    }

    pub fn singleton(names: Vec<String>, nominal: Vec<f64>) -> Result<Self> {
        let b = AxisBox::point(&nominal);
        ParameterBox::new(names, b, nominal)
    }

    pub fn dim(&self) -> usize {
        self.bounds.dim()
    }

    pub fn contains(&self, theta: &[f64]) -> bool {
        self.bounds.contains(theta)
    }

    pub fn corners(&self) -> Vec<Vec<f64>> {
        self.bounds.corners()
    }

    /// Same nominal, half-widths scaled by `k` (clamped so the nominal stays inside).
    pub fn scaled(&self, k: f64) -> ParameterBox {
        let lower = self
            .nominal
            .iter()
            .zip(&self.bounds.lower)
            .map(|(n, l)| n - k * (n - l))
            .collect();
        let upper = self
            .nominal
            .iter()
            .zip(&self.bounds.upper)
            .map(|(n, u)| n + k * (u - n))
            .collect();
        ParameterBox {
            names: self.names.clone(),
            bounds: AxisBox { lower, upper },
            nominal: self.nominal.clone(),
        }
    }
}

/// Registered adversary forms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdversaryForm {
    /// `g(x; p)[target] = τ · x[speed] · cos(Σ p)`, zero elsewhere.
    CosineSpeed {
        tau: f64,
        speed_coord: usize,
        target_coord: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdversaryFamily {
    pub form: AdversaryForm,
    pub state_dim: usize,
    pub param_box: AxisBox,
    pub nominal_params: Vec<f64>,
}

impl AdversaryFamily {
    pub fn new(
        form: AdversaryForm,
        state_dim: usize,
        param_box: AxisBox,
        nominal_params: Vec<f64>,
    ) -> Result<Self> {
        check_dim("adversary nominal", param_box.dim(), nominal_params.len())?;
        let AdversaryForm::CosineSpeed {
            speed_coord,
            target_coord,
            ..
        } = &form;
        if *speed_coord >= state_dim || *target_coord >= state_dim {
            return Err(Error::invalid("adversary coordinate out of range"));
        }
        if !param_box.is_bounded() {
            return Err(Error::invalid("adversary parameter box must be bounded"));
        }
        Ok(AdversaryFamily {
            form,
            state_dim,
            param_box,
            nominal_params,
        })
    }

    /// Family re-indexed for a state embedded at `offset` in a joint state
    /// of dimension `joint_dim`.
    pub fn embedded(&self, offset: usize, joint_dim: usize) -> AdversaryFamily {
        let AdversaryForm::CosineSpeed {
            tau,
            speed_coord,
            target_coord,
        } = self.form;
        AdversaryFamily {
            form: AdversaryForm::CosineSpeed {
                tau,
                speed_coord: speed_coord + offset,
                target_coord: target_coord + offset,
            },
            state_dim: joint_dim,
            param_box: self.param_box.clone(),
            nominal_params: self.nominal_params.clone(),
        }
    }

    /// Same family with the parameter box collapsed onto the nominal.
    pub fn nominal_only(&self) -> AdversaryFamily {
        let mut f = self.clone();
        f.param_box = AxisBox::point(&self.nominal_params);
        f
    }

    pub fn tau(&self) -> f64 {
        let AdversaryForm::CosineSpeed { tau, .. } = self.form;
        tau
    }

    pub fn speed_coord(&self) -> usize {
        let AdversaryForm::CosineSpeed { speed_coord, .. } = self.form;
        speed_coord
    }

    pub fn target_coord(&self) -> usize {
        let AdversaryForm::CosineSpeed { target_coord, .. } = self.form;
        target_coord
    }

    /// Range of the angle sum `Σ p` over the parameter box.
    pub fn angle_range(&self) -> Interval {
        self.param_box
            .intervals()
            .into_iter()
            .fold(Interval::point(0.0), |acc, iv| acc + iv)
    }

    pub fn disturbance(&self, x: &[f64], params: &[f64]) -> Vec<f64> {
        let mut d = vec![0.0; self.state_dim];
        d[self.target_coord()] = self.tau() * x[self.speed_coord()] * params.iter().sum::<f64>().cos();
        d
    }

    /// Entries `(row, col, coefficient)` of the disturbance as a linear map
    /// of the state, at fixed parameters.
    pub fn linear_entries(&self, params: &[f64]) -> Result<Vec<(usize, usize, f64)>> {
        check_dim("adversary parameters", self.param_box.dim(), params.len())?;
        Ok(vec![(
            self.target_coord(),
            self.speed_coord(),
            self.tau() * params.iter().sum::<f64>().cos(),
        )])
    }

    /// Range of `cos(Σp) − cos(Σp̂)` over the parameter box.
    pub fn cosine_deviation(&self) -> Interval {
        let nominal = self.nominal_params.iter().sum::<f64>().cos();
        self.angle_range().cos() - Interval::point(nominal)
    }
}

/// Axis-aligned over-approximation of `{g(x; p) − g(x; p̂)}` over states in
/// `x_box` and all parameters in the family's box. The observation box is
/// accepted for interface symmetry; the registered forms ignore it.
pub fn adversary_disturbance_hull(
    fam: &AdversaryFamily,
    x_box: &AxisBox,
    _o_box: &AxisBox,
) -> Result<AxisBox> {
    check_dim("adversary state box", fam.state_dim, x_box.dim())?;
    let speed = x_box.interval(fam.speed_coord());
    if !speed.is_finite() {
        return Err(Error::invalid(
            "adversary hull needs a bounded speed coordinate",
        ));
    }
    let dev = speed.scale(fam.tau()) * fam.cosine_deviation();
    let mut lower = vec![0.0; fam.state_dim];
    let mut upper = vec![0.0; fam.state_dim];
    lower[fam.target_coord()] = dev.lo;
    upper[fam.target_coord()] = dev.hi;
    AxisBox::new(lower, upper)
}

/// Parameter box plus adversary family: the ambiguity the contract absorbs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AmbiguitySet {
    pub theta: ParameterBox,
    pub adversary: AdversaryFamily,
}

/// Observation wiring of a two-model interconnection: each model's
/// observation is a linear map of the joint state `(x_left, x_right)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Wiring {
    pub left_obs: LinearMap,
    pub right_obs: LinearMap,
}

impl Wiring {
    /// `o_left = x_right`, `o_right = x_left` (the plain product).
    pub fn full(left_dim: usize, right_dim: usize) -> Wiring {
        let n = left_dim + right_dim;
        Wiring {
            left_obs: LinearMap::projection(n, (left_dim..n).collect()),
            right_obs: LinearMap::projection(n, (0..left_dim).collect()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Interconnection {
    pub left: GmdpModel,
    pub right: GmdpModel,
    pub wiring: Wiring,
    /// Reduction map on the left model's state.
    pub state_map_f: LinearMap,
    /// Surrogate map on the right model's state.
    pub state_map_p: LinearMap,
}

impl Interconnection {
    /// Joint affine model. Inputs come from the left model, the disturbance
    /// channel from the right, parameters are concatenated left then right,
    /// outputs likewise.
    pub fn compose(&self) -> Result<GmdpModel> {
        let (l, r) = (&self.left, &self.right);
        let (la, ra) = match (l.affine(), r.affine()) {
            (Some(a), Some(b)) => (a, b),
            _ => return Err(Error::invalid("only affine models compose into affine models")),
        };
        if r.input_dim() != 0 {
            return Err(Error::invalid("right model must be autonomous"));
        }
        if l.disturbance_dim != 0 {
            return Err(Error::invalid("left model must not take disturbances"));
        }
        let (nl, nr) = (l.dim(), r.dim());
        let n = nl + nr;
        check_dim("left observation wiring", l.observation_dim, self.wiring.left_obs.dim_out())?;
        check_dim("right observation wiring", r.observation_dim, self.wiring.right_obs.dim_out())?;
        if l.observation_dim > 0 {
            check_dim("wiring input", n, self.wiring.left_obs.dim_in())?;
        }
        if r.observation_dim > 0 {
            check_dim("wiring input", n, self.wiring.right_obs.dim_in())?;
        }

        let mut a = zeros(n, n);
        for i in 0..nl {
            a[i][..nl].copy_from_slice(&la.a[i]);
        }
        for i in 0..nr {
            a[nl + i][nl..].copy_from_slice(&ra.a[i]);
        }
        if l.observation_dim > 0 {
            let coupling = mat_mul(&la.n, &self.wiring.left_obs.to_matrix());
            for i in 0..nl {
                for j in 0..n {
                    a[i][j] += coupling[i][j];
                }
            }
        }
        if r.observation_dim > 0 {
            let coupling = mat_mul(&ra.n, &self.wiring.right_obs.to_matrix());
            for i in 0..nr {
                for j in 0..n {
                    a[nl + i][j] += coupling[i][j];
                }
            }
        }
        let m = l.input_dim();
        let mut b = zeros(n, m);
        for i in 0..nl {
            b[i].copy_from_slice(&la.b[i]);
        }
        let mut c = la.c.clone();
        c.extend_from_slice(&ra.c);
        let mut slots = la.theta_slots.clone();
        for s in &ra.theta_slots {
            slots.push(ThetaSlot {
                row: s.row + nl,
                col: s.col + nl,
                param: s.param + l.n_params,
            });
        }
        for s in &slots {
            if a[s.row][s.col] != 0.0 {
                return Err(Error::invalid(
                    "observation coupling overlaps a parametrized matrix entry",
                ));
            }
        }

        let cat = |a: &AxisBox, b: &AxisBox| AxisBox {
            lower: [a.lower.clone(), b.lower.clone()].concat(),
            upper: [a.upper.clone(), b.upper.clone()].concat(),
        };
        let noise_base = GaussianMeasure::new(
            [l.noise.base.mean.clone(), r.noise.base.mean.clone()].concat(),
            [l.noise.base.variance.clone(), r.noise.base.variance.clone()].concat(),
        )?;
        let noise = TruncatedGaussian::new(noise_base, cat(&l.noise.support, &r.noise.support))?;
        let mut out_coords = l.output.coords.clone();
        out_coords.extend(r.output.coords.iter().map(|c| c + nl));
        let weights = match (&l.output.weights, &r.output.weights) {
            (None, None) => None,
            (lw, rw) => {
                let mut w = lw.clone().unwrap_or_else(|| vec![1.0; l.output.coords.len()]);
                w.extend(rw.clone().unwrap_or_else(|| vec![1.0; r.output.coords.len()]));
                Some(w)
            }
        };
        let model = GmdpModel {
            name: format!("{} x {}", l.name, r.name),
            state_space: cat(&l.state_space, &r.state_space),
            initial_set: cat(&l.initial_set, &r.initial_set),
            input_space: l.input_space.clone(),
            observation_dim: 0,
            disturbance_dim: if r.disturbance_dim > 0 { n } else { 0 },
            n_params: l.n_params + r.n_params,
            drift: Drift::Affine(AffineDrift {
                a,
                b,
                n: vec![Vec::new(); n],
                c,
                theta_slots: slots,
            }),
            noise,
            output: OutputMap {
                coords: out_coords,
                weights,
            },
        };
        model.validate()?;
        Ok(model)
    }
}

fn box_from(pairs: &[[f64; 2]]) -> AxisBox {
    AxisBox {
        lower: pairs.iter().map(|p| p[0]).collect(),
        upper: pairs.iter().map(|p| p[1]).collect(),
    }
}

/// Bicycle-model constants of the environment vehicle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BicycleParams {
    pub c: f64,
    pub g: f64,
    pub mu: f64,
    pub l: f64,
    pub m: f64,
    pub iz: f64,
}

impl Default for BicycleParams {
    fn default() -> Self {
        BicycleParams {
            c: 1.0,
            g: 9.81,
            mu: 0.9,
            l: 2.579,
            m: 1093.0,
            iz: 1792.0,
        }
    }
}

/// Noise variances of the agent and environment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NoiseParams {
    /// (ξ, v, s) of the agent.
    pub agent: Vec<f64>,
    /// (β, dΨ, Ψ, v, s_x, s_y) of the environment.
    pub env: Vec<f64>,
}

impl Default for NoiseParams {
    fn default() -> Self {
        NoiseParams {
            agent: vec![1e-3, 0.2, 0.1],
            env: vec![0.01, 0.01, 0.01, 0.2, 0.1, 0.01],
        }
    }
}

/// Every constant of the lane-change scenario. All fields
/// default to the reference values and can be overridden from JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CaseStudyParams {
    pub tau: f64,
    /// a1..a5: lateral-offset coupling coefficients.
    pub a: [f64; 5],
    pub b: f64,
    /// Rows are (θ_A, θ_E) intervals.
    pub theta_box: [[f64; 2]; 2],
    pub theta_hat: [f64; 2],
    pub sigma: NoiseParams,
    /// Agent state domain (ξ, v, s).
    pub agent_domain: [[f64; 2]; 3],
    pub input_domain: [f64; 2],
    /// Environment region of validity (β, dΨ, Ψ, v, s_x, s_y).
    pub rov: [[f64; 2]; 6],
    /// Support of the truncated environment noise.
    pub env_noise_support: [[f64; 2]; 6],
    pub bicycle: BicycleParams,
}

impl Default for CaseStudyParams {
    fn default() -> Self {
        CaseStudyParams {
            tau: 0.5,
            a: [0.2, 0.0, 0.0, 0.0, 0.0],
            b: 0.001,
            theta_box: [[0.79, 0.81], [0.79, 0.81]],
            theta_hat: [0.8, 0.8],
            sigma: NoiseParams::default(),
            agent_domain: [[-0.05, 0.05], [0.0, 3.0], [0.0, 3.5]],
            input_domain: [-5.0, 5.0],
            rov: [
                [-0.05, 0.05],
                [-0.05, 0.05],
                [-0.05, 0.05],
                [0.75, 3.75],
                [0.0, 5.5],
                [-0.5, 0.5],
            ],
            env_noise_support: [
                [-0.05, 0.05],
                [-0.05, 0.05],
                [-0.05, 0.05],
                [-1e3, 1e3],
                [-1e3, 1e3],
                [-0.5, 0.5],
            ],
            bicycle: BicycleParams::default(),
        }
    }
}

/// The systems of the two-vehicle scenario.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseStudy {
    pub params: CaseStudyParams,
    /// Agent A, state (ξ, v, s), parameter θ_A.
    pub agent: GmdpModel,
    /// Environment E, state (β, dΨ, Ψ, v, s_x, s_y), parameter θ_E.
    pub environment: GmdpModel,
    /// Simulator S, state (v, s), parameter θ_E, cosine adversary.
    pub simulator: GmdpModel,
    /// Reduced agent A_r, state (v, s), parameter θ_A.
    pub reduced_agent: GmdpModel,
    pub theta: ParameterBox,
    /// Adversary family on the simulator state.
    pub adversaries: AdversaryFamily,
    /// F: agent state → reduced agent state.
    pub map_f: LinearMap,
    /// P: environment state → simulator state.
    pub map_p: LinearMap,
}

pub fn builtin_case_study() -> CaseStudy {
    case_study_with(&CaseStudyParams::default()).expect("reference parameters are valid")
}

pub fn case_study_with(p: &CaseStudyParams) -> Result<CaseStudy> {
    let tau = p.tau;
    let [a1, a2, a3, a4, a5] = p.a;
    check_dim("agent noise", 3, p.sigma.agent.len())?;
    check_dim("environment noise", 6, p.sigma.env.len())?;

    let agent_box = box_from(&p.agent_domain);
    let input_box = box_from(&[p.input_domain]);
    let agent = GmdpModel {
        name: "A".into(),
        state_space: agent_box.clone(),
        initial_set: agent_box.clone(),
        input_space: input_box.clone(),
        observation_dim: 0,
        disturbance_dim: 0,
        n_params: 1,
        drift: Drift::Affine(AffineDrift {
            a: vec![
                vec![a1, 0.0, 0.0],
                vec![a2, 0.0, 0.0],
                vec![a3, tau, 1.0],
            ],
            b: vec![vec![p.b], vec![tau], vec![0.0]],
            n: vec![Vec::new(); 3],
            c: vec![0.0; 3],
            theta_slots: vec![ThetaSlot {
                row: 1,
                col: 1,
                param: 0,
            }],
        }),
        noise: TruncatedGaussian::untruncated(GaussianMeasure::new(
            vec![0.0; 3],
            p.sigma.agent.clone(),
        )?),
        output: OutputMap::projection(vec![1, 2]),
    };
    agent.validate()?;

    let rov = box_from(&p.rov);
    let env_noise = TruncatedGaussian::new(
        GaussianMeasure::new(vec![0.0; 6], p.sigma.env.clone())?,
        box_from(&p.env_noise_support),
    )?;
    let bp = &p.bicycle;
    let environment = GmdpModel {
        name: "E".into(),
        state_space: rov.clone(),
        initial_set: rov.clone(),
        input_space: AxisBox::empty_dim(),
        observation_dim: 3,
        disturbance_dim: 0,
        n_params: 1,
        drift: Drift::Bicycle(BicycleDrift {
            tau,
            c: bp.c,
            g: bp.g,
            mu: bp.mu,
            l: bp.l,
            m: bp.m,
            iz: bp.iz,
            a4,
            a5,
        }),
        noise: env_noise.clone(),
        output: OutputMap::projection(vec![3, 4]),
    };
    environment.validate()?;

    let map_p = LinearMap::projection(6, vec![3, 4]);
    let sim_box = AxisBox {
        lower: map_p.apply(&rov.lower),
        upper: map_p.apply(&rov.upper),
    };
    let sim_noise = TruncatedGaussian::new(
        GaussianMeasure::new(vec![0.0; 2], map_p.apply(&p.sigma.env))?,
        AxisBox {
            lower: map_p.apply(&env_noise.support.lower),
            upper: map_p.apply(&env_noise.support.upper),
        },
    )?;
    let simulator = GmdpModel {
        name: "S".into(),
        state_space: sim_box.clone(),
        initial_set: sim_box,
        input_space: AxisBox::empty_dim(),
        observation_dim: 3,
        disturbance_dim: 2,
        n_params: 1,
        drift: Drift::Affine(AffineDrift {
            // The τ·v term of the position update is carried by the adversary.
            a: vec![vec![0.0, 0.0], vec![0.0, 1.0]],
            b: vec![Vec::new(); 2],
            n: vec![vec![a4, 0.0, 0.0], vec![a5, 0.0, 0.0]],
            c: vec![0.0; 2],
            theta_slots: vec![ThetaSlot {
                row: 0,
                col: 0,
                param: 0,
            }],
        }),
        noise: sim_noise,
        output: OutputMap::projection(vec![0, 1]),
    };
    simulator.validate()?;

    let map_f = LinearMap::projection(3, vec![1, 2]);
    let red_box = AxisBox {
        lower: map_f.apply(&agent_box.lower),
        upper: map_f.apply(&agent_box.upper),
    };
    let reduced_agent = GmdpModel {
        name: "Ar".into(),
        state_space: red_box.clone(),
        initial_set: red_box,
        input_space: input_box,
        observation_dim: 0,
        disturbance_dim: 0,
        n_params: 1,
        drift: Drift::Affine(AffineDrift {
            a: vec![vec![0.0, 0.0], vec![tau, 1.0]],
            b: vec![vec![tau], vec![0.0]],
            n: vec![Vec::new(); 2],
            c: vec![0.0; 2],
            theta_slots: vec![ThetaSlot {
                row: 0,
                col: 0,
                param: 0,
            }],
        }),
        noise: TruncatedGaussian::untruncated(GaussianMeasure::new(
            vec![0.0; 2],
            map_f.apply(&p.sigma.agent),
        )?),
        output: OutputMap::projection(vec![0, 1]),
    };
    reduced_agent.validate()?;

    let theta = ParameterBox::new(
        vec!["theta_A".into(), "theta_E".into()],
        box_from(&p.theta_box),
        p.theta_hat.to_vec(),
    )?;
    let adversaries = AdversaryFamily::new(
        AdversaryForm::CosineSpeed {
            tau,
            speed_coord: 0,
            target_coord: 1,
        },
        2,
        box_from(&[p.rov[0], p.rov[2]]),
        vec![0.0, 0.0],
    )?;

    Ok(CaseStudy {
        params: p.clone(),
        agent,
        environment,
        simulator,
        reduced_agent,
        theta,
        adversaries,
        map_f,
        map_p,
    })
}

impl CaseStudy {
    /// A ×ₐ S: state (ξ, v_A, s_A, v_S, s_S); the simulator observes the
    /// full agent state.
    pub fn agent_sim_interconnection(&self) -> Interconnection {
        Interconnection {
            left: self.agent.clone(),
            right: self.simulator.clone(),
            wiring: Wiring {
                left_obs: LinearMap::Matrix(Vec::new()),
                right_obs: LinearMap::projection(5, vec![0, 1, 2]),
            },
            state_map_f: self.map_f.clone(),
            state_map_p: LinearMap::Identity(2),
        }
    }

    /// A_r × S: state (v_A, s_A, v_S, s_S); the simulator observes F(x_A),
    /// padded with a zero lateral offset.
    pub fn reduced_sim_interconnection(&self) -> Interconnection {
        Interconnection {
            left: self.reduced_agent.clone(),
            right: self.simulator.clone(),
            wiring: Wiring {
                left_obs: LinearMap::Matrix(Vec::new()),
                right_obs: LinearMap::Matrix(vec![
                    vec![0.0; 4],
                    vec![1.0, 0.0, 0.0, 0.0],
                    vec![0.0, 1.0, 0.0, 0.0],
                ]),
            },
            state_map_f: LinearMap::Identity(2),
            state_map_p: LinearMap::Identity(2),
        }
    }

    pub fn full_composite(&self) -> Result<GmdpModel> {
        let mut m = self.agent_sim_interconnection().compose()?;
        m.name = "A x_a S".into();
        Ok(m)
    }

    pub fn reduced_composite(&self) -> Result<GmdpModel> {
        let mut m = self.reduced_sim_interconnection().compose()?;
        m.name = "Ar x S".into();
        Ok(m)
    }

    /// Adversary family re-indexed on the 4D reduced composite.
    pub fn composite_adversaries(&self) -> AdversaryFamily {
        self.adversaries.embedded(2, 4)
    }

    /// The nominal surrogate: reduced composite at θ̂ with the nominal
    /// adversary absorbed into the drift.
    pub fn nominal(&self) -> Result<GmdpModel> {
        let fam = self.composite_adversaries();
        let mut m = self
            .reduced_composite()?
            .fix_parameters(&self.theta.nominal)?
            .fold_adversary(&fam, &fam.nominal_params)?;
        m.name = "Ar x S (nominal)".into();
        Ok(m)
    }

    /// F ⊕ P: concrete (x_A, x_E) to the nominal state (v_A, s_A, v_E, s_x).
    pub fn concrete_to_nominal(&self, xa: &[f64], xe: &[f64]) -> Vec<f64> {
        let mut z = self.map_f.apply(xa);
        z.extend(self.map_p.apply(xe));
        z
    }

    /// Concrete outputs (h_A, h_E) in the nominal output order.
    pub fn concrete_output(&self, xa: &[f64], xe: &[f64]) -> Vec<f64> {
        let mut y = self.agent.output_of(xa);
        y.extend(self.environment.output_of(xe));
        y
    }

    /// Output domain of the composite, (v_A, s_A, v_S, s_S).
    pub fn output_domain(&self) -> AxisBox {
        let d = &self.params;
        box_from(&[d.agent_domain[1], d.agent_domain[2], d.rov[3], d.rov[4]])
    }
}
