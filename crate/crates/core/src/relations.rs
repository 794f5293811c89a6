//! Finite gMDPs, δ-lifted couplings, sub-simulation checks and the
//! certificate algebra (transitive composition, proxy rebasing, situation
//! mixtures).

use std::collections::{BTreeSet, VecDeque};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::compensators::AmbiguityField;
use crate::error::{check_dim, Error, Result};
use crate::gmdp::LinearMap;
use crate::measures::AxisBox;

const PROB_TOL: f64 = 1e-9;

/// Sparse distribution: `(state, probability)` with unique states.
pub type SparseDist = Vec<(usize, f64)>;

/// Finite gMDP with rows indexed by `(state, input, adversary)`. Rows are
/// sub-stochastic; the missing mass is the probability of leaving the model.
/// Autonomous models with observations use the input axis for observations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FiniteGmdp {
    pub n_states: usize,
    pub n_inputs: usize,
    pub n_adversaries: usize,
    rows: Vec<SparseDist>,
    pub outputs: Vec<Vec<f64>>,
    pub initial: Vec<usize>,
}

impl FiniteGmdp {
    /// Model with every row empty, to be filled by [`FiniteGmdp::set_row`].
    pub fn new(
        n_states: usize,
        n_inputs: usize,
        n_adversaries: usize,
        outputs: Vec<Vec<f64>>,
        initial: Vec<usize>,
    ) -> Result<Self> {
        check_dim("finite outputs", n_states, outputs.len())?;
        if n_inputs == 0 || n_adversaries == 0 {
            return Err(Error::invalid("finite gMDP needs at least one input and one adversary choice"));
        }
        if let Some(&bad) = initial.iter().find(|&&s| s >= n_states) {
            return Err(Error::invalid(format!("initial state {bad} out of range")));
        }
        Ok(FiniteGmdp {
            n_states,
            n_inputs,
            n_adversaries,
            rows: vec![Vec::new(); n_states * n_inputs * n_adversaries],
            outputs,
            initial,
        })
    }

    fn index(&self, s: usize, u: usize, a: usize) -> usize {
        (s * self.n_inputs + u) * self.n_adversaries + a
    }

    pub fn row(&self, s: usize, u: usize, a: usize) -> &SparseDist {
        &self.rows[self.index(s, u, a)]
    }

    pub fn set_row(&mut self, s: usize, u: usize, a: usize, mut row: SparseDist) -> Result<()> {
        row.retain(|(_, p)| *p != 0.0);
        row.sort_by_key(|(t, _)| *t);
        let mut total = 0.0;
        for w in row.windows(2) {
            if w[0].0 == w[1].0 {
                return Err(Error::invalid(format!("duplicate successor {} in row", w[0].0)));
            }
        }
        for &(t, p) in &row {
            if t >= self.n_states {
                return Err(Error::invalid(format!("successor {t} out of range")));
            }
            if !(p >= 0.0) {
                return Err(Error::invalid(format!("negative probability {p}")));
            }
            total += p;
        }
        if total > 1.0 + PROB_TOL {
            return Err(Error::invalid(format!("row mass {total} exceeds one")));
        }
        let i = self.index(s, u, a);
        self.rows[i] = row;
        Ok(())
    }

    /// Copy with only adversary choice `a` kept.
    pub fn restrict_adversary(&self, a: usize) -> Result<FiniteGmdp> {
        if a >= self.n_adversaries {
            return Err(Error::invalid(format!("adversary {a} out of range")));
        }
        let mut m = FiniteGmdp::new(self.n_states, self.n_inputs, 1, self.outputs.clone(), self.initial.clone())?;
        for s in 0..self.n_states {
            for u in 0..self.n_inputs {
                let i = m.index(s, u, 0);
                m.rows[i] = self.row(s, u, a).clone();
            }
        }
        Ok(m)
    }

    /// Writes `meta.csv`, `transitions.csv`, `outputs.csv` and `initial.csv`.
    pub fn write_columnar(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let open = |name: &str| {
            let p = dir.join(name);
            csv::Writer::from_path(&p).map_err(|e| Error::io(&p, e))
        };
        let io = |name: &str, e: csv::Error| Error::io(&dir.join(name), e);

        let mut w = open("meta.csv")?;
        w.write_record(["n_states", "n_inputs", "n_adversaries"]).map_err(|e| io("meta.csv", e))?;
        w.write_record([self.n_states.to_string(), self.n_inputs.to_string(), self.n_adversaries.to_string()])
            .map_err(|e| io("meta.csv", e))?;
        w.flush().map_err(|e| Error::io(&dir.join("meta.csv"), e))?;

        let mut w = open("transitions.csv")?;
        w.write_record(["state", "input", "adversary", "next", "probability"])
            .map_err(|e| io("transitions.csv", e))?;
        for s in 0..self.n_states {
            for u in 0..self.n_inputs {
                for a in 0..self.n_adversaries {
                    for &(t, p) in self.row(s, u, a) {
                        w.write_record([s.to_string(), u.to_string(), a.to_string(), t.to_string(), p.to_string()])
                            .map_err(|e| io("transitions.csv", e))?;
                    }
                }
            }
        }
        w.flush().map_err(|e| Error::io(&dir.join("transitions.csv"), e))?;

        let mut w = open("outputs.csv")?;
        let k = self.outputs.first().map_or(0, |y| y.len());
        let mut header = vec!["state".to_string()];
        header.extend((0..k).map(|i| format!("y{i}")));
        w.write_record(&header).map_err(|e| io("outputs.csv", e))?;
        for (s, y) in self.outputs.iter().enumerate() {
            let mut rec = vec![s.to_string()];
            rec.extend(y.iter().map(|v| v.to_string()));
            w.write_record(&rec).map_err(|e| io("outputs.csv", e))?;
        }
        w.flush().map_err(|e| Error::io(&dir.join("outputs.csv"), e))?;

        let mut w = open("initial.csv")?;
        w.write_record(["state"]).map_err(|e| io("initial.csv", e))?;
        for s in &self.initial {
            w.write_record([s.to_string()]).map_err(|e| io("initial.csv", e))?;
        }
        w.flush().map_err(|e| Error::io(&dir.join("initial.csv"), e))?;
        Ok(())
    }

    pub fn read_columnar(dir: &Path) -> Result<FiniteGmdp> {
        fn records(dir: &Path, name: &str) -> Result<Vec<Vec<String>>> {
            let p = dir.join(name);
            let mut r = csv::Reader::from_path(&p).map_err(|e| Error::io(&p, e))?;
            r.records()
                .map(|rec| {
                    rec.map(|r| r.iter().map(str::to_string).collect())
                        .map_err(|e| Error::io(&p, e))
                })
                .collect()
        }
        fn num<T: std::str::FromStr>(s: &str) -> Result<T> {
            s.parse().map_err(|_| Error::invalid(format!("malformed number {s:?}")))
        }
        let meta = records(dir, "meta.csv")?;
        let m = meta.first().ok_or_else(|| Error::invalid("empty meta.csv"))?;
        if m.len() != 3 {
            return Err(Error::invalid("meta.csv needs three columns"));
        }
        let (n, ni, na) = (num(&m[0])?, num(&m[1])?, num(&m[2])?);
        let mut outputs = vec![Vec::new(); n];
        for rec in records(dir, "outputs.csv")? {
            let s: usize = num(&rec[0])?;
            if s >= n {
                return Err(Error::invalid(format!("output row for state {s} out of range")));
            }
            outputs[s] = rec[1..].iter().map(|v| num(v)).collect::<Result<_>>()?;
        }
        let initial = records(dir, "initial.csv")?
            .iter()
            .map(|r| num(&r[0]))
            .collect::<Result<_>>()?;
        let mut model = FiniteGmdp::new(n, ni, na, outputs, initial)?;
        let mut pending: Vec<SparseDist> = vec![Vec::new(); n * ni * na];
        for rec in records(dir, "transitions.csv")? {
            if rec.len() != 5 {
                return Err(Error::invalid("transitions.csv needs five columns"));
            }
            let (s, u, a, t): (usize, usize, usize, usize) = (num(&rec[0])?, num(&rec[1])?, num(&rec[2])?, num(&rec[3])?);
            if s >= n || u >= ni || a >= na {
                return Err(Error::invalid(format!("transition ({s}, {u}, {a}) out of range")));
            }
            pending[model.index(s, u, a)].push((t, num(&rec[4])?));
        }
        for s in 0..n {
            for u in 0..ni {
                for a in 0..na {
                    let row = std::mem::take(&mut pending[model.index(s, u, a)]);
                    model.set_row(s, u, a, row)?;
                }
            }
        }
        Ok(model)
    }
}

/// Dense boolean relation between abstract and concrete finite states.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FiniteRelation {
    pub n_abstract: usize,
    pub n_concrete: usize,
    bits: Vec<bool>,
}

impl FiniteRelation {
    pub fn empty(n_abstract: usize, n_concrete: usize) -> Self {
        FiniteRelation {
            n_abstract,
            n_concrete,
            bits: vec![false; n_abstract * n_concrete],
        }
    }

    pub fn from_fn(n_abstract: usize, n_concrete: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut r = FiniteRelation::empty(n_abstract, n_concrete);
        for i in 0..n_abstract {
            for j in 0..n_concrete {
                r.bits[i * n_concrete + j] = f(i, j);
            }
        }
        r
    }

    pub fn insert(&mut self, abs: usize, conc: usize) {
        self.bits[abs * self.n_concrete + conc] = true;
    }

    pub fn related(&self, abs: usize, conc: usize) -> bool {
        self.bits[abs * self.n_concrete + conc]
    }

    pub fn pairs(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (0..self.n_abstract)
            .flat_map(move |i| (0..self.n_concrete).map(move |j| (i, j)))
            .filter(move |&(i, j)| self.related(i, j))
    }
}

/// Joint sub-probability on abstract × concrete states.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Coupling {
    pub mass: Vec<(usize, usize, f64)>,
}

impl Coupling {
    pub fn total(&self) -> f64 {
        self.mass.iter().map(|(_, _, m)| m).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CouplingCheck {
    pub valid: bool,
    pub total_mass: f64,
    pub violations: Vec<String>,
}

/// Checks that `witness` is a δ-lifting of `(p_hat, p)` supported on `rel`:
/// non-negative, marginals dominated by the two distributions, mass at
/// least `1 − δ`.
pub fn verify_coupling(
    witness: &Coupling,
    p_hat: &SparseDist,
    p: &SparseDist,
    rel: &FiniteRelation,
    delta: f64,
) -> CouplingCheck {
    let mut violations = Vec::new();
    let mut row = vec![0.0; rel.n_abstract];
    let mut col = vec![0.0; rel.n_concrete];
    for &(i, j, m) in &witness.mass {
        if i >= rel.n_abstract || j >= rel.n_concrete {
            violations.push(format!("pair ({i}, {j}) out of range"));
            continue;
        }
        if m < -PROB_TOL {
            violations.push(format!("negative mass {m} on ({i}, {j})"));
        }
        if m > PROB_TOL && !rel.related(i, j) {
            violations.push(format!("mass {m} on unrelated pair ({i}, {j})"));
        }
        row[i] += m;
        col[j] += m;
    }
    let dense = |d: &SparseDist, n: usize| {
        let mut v = vec![0.0; n];
        for &(s, q) in d {
            if s < n {
                v[s] += q;
            }
        }
        v
    };
    let (ph, pc) = (dense(p_hat, rel.n_abstract), dense(p, rel.n_concrete));
    for i in 0..rel.n_abstract {
        if row[i] > ph[i] + PROB_TOL {
            violations.push(format!("abstract marginal {} exceeds {} at {i}", row[i], ph[i]));
        }
    }
    for j in 0..rel.n_concrete {
        if col[j] > pc[j] + PROB_TOL {
            violations.push(format!("concrete marginal {} exceeds {} at {j}", col[j], pc[j]));
        }
    }
    let total = witness.total();
    if total < 1.0 - delta - PROB_TOL {
        violations.push(format!("coupled mass {total} below 1 - {delta}"));
    }
    CouplingCheck {
        valid: violations.is_empty(),
        total_mass: total,
        violations,
    }
}

struct FlowEdge {
    to: usize,
    cap: f64,
}

/// Dinic max-flow on a small dense-ish graph with float capacities.
struct FlowNet {
    edges: Vec<FlowEdge>,
    adj: Vec<Vec<usize>>,
    level: Vec<i64>,
    iter: Vec<usize>,
}

const FLOW_EPS: f64 = 1e-15;

impl FlowNet {
    fn new(n: usize) -> Self {
        FlowNet {
            edges: Vec::new(),
            adj: vec![Vec::new(); n],
            level: vec![0; n],
            iter: vec![0; n],
        }
    }

    fn add_edge(&mut self, from: usize, to: usize, cap: f64) -> usize {
        let id = self.edges.len();
        self.edges.push(FlowEdge { to, cap });
        self.edges.push(FlowEdge { to: from, cap: 0.0 });
        self.adj[from].push(id);
        self.adj[to].push(id + 1);
        id
    }

    fn bfs(&mut self, s: usize, t: usize) -> bool {
        self.level.iter_mut().for_each(|l| *l = -1);
        self.level[s] = 0;
        let mut q = VecDeque::from([s]);
        while let Some(v) = q.pop_front() {
            for &e in &self.adj[v] {
                let to = self.edges[e].to;
                if self.edges[e].cap > FLOW_EPS && self.level[to] < 0 {
                    self.level[to] = self.level[v] + 1;
                    q.push_back(to);
                }
            }
        }
        self.level[t] >= 0
    }

    fn dfs(&mut self, v: usize, t: usize, f: f64) -> f64 {
        if v == t {
            return f;
        }
        while self.iter[v] < self.adj[v].len() {
            let e = self.adj[v][self.iter[v]];
            let to = self.edges[e].to;
            if self.edges[e].cap > FLOW_EPS && self.level[to] == self.level[v] + 1 {
                let d = self.dfs(to, t, f.min(self.edges[e].cap));
                if d > FLOW_EPS {
                    self.edges[e].cap -= d;
                    self.edges[e ^ 1].cap += d;
                    return d;
                }
            }
            self.iter[v] += 1;
        }
        0.0
    }

    fn max_flow(&mut self, s: usize, t: usize) -> f64 {
        let mut flow = 0.0;
        while self.bfs(s, t) {
            self.iter.iter_mut().for_each(|i| *i = 0);
            loop {
                let f = self.dfs(s, t, f64::INFINITY);
                if f <= FLOW_EPS {
                    break;
                }
                flow += f;
            }
        }
        flow
    }
}

/// Largest mass of a coupling of `p_hat` and `p` supported on `rel`, with
/// a witness attaining it.
pub fn max_coupling_mass(p_hat: &SparseDist, p: &SparseDist, rel: &FiniteRelation) -> (f64, Coupling) {
    let (na, nc) = (p_hat.len(), p.len());
    let src = na + nc;
    let sink = src + 1;
    let mut net = FlowNet::new(na + nc + 2);
    for (i, &(_, m)) in p_hat.iter().enumerate() {
        net.add_edge(src, i, m);
    }
    for (j, &(_, m)) in p.iter().enumerate() {
        net.add_edge(na + j, sink, m);
    }
    let mut middle = Vec::new();
    for (i, &(si, _)) in p_hat.iter().enumerate() {
        for (j, &(sj, _)) in p.iter().enumerate() {
            if si < rel.n_abstract && sj < rel.n_concrete && rel.related(si, sj) {
                let id = net.add_edge(i, na + j, f64::INFINITY);
                middle.push((si, sj, id));
            }
        }
    }
    let flow = net.max_flow(src, sink);
    let mass = middle
        .into_iter()
        .filter_map(|(si, sj, id)| {
            let f = net.edges[id ^ 1].cap;
            (f > FLOW_EPS).then_some((si, sj, f))
        })
        .collect();
    (flow, Coupling { mass })
}

/// Outcome of a finite sub-simulation check.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SsrReport {
    pub holds: bool,
    pub initial_ok: bool,
    /// Smallest δ for which the transition condition holds.
    pub required_delta: f64,
    /// Largest output distance over related pairs.
    pub required_epsilon: f64,
    pub failures: Vec<String>,
}

/// Checks `abstract ≼^δ_ε concrete` under `rel` and the input interface
/// `interface[û] = u`. Adversary choices of the concrete model are treated
/// universally, those of the abstract model existentially.
pub fn verify_ssr_finite(
    abs: &FiniteGmdp,
    conc: &FiniteGmdp,
    rel: &FiniteRelation,
    interface: &[usize],
    epsilon: f64,
    delta: f64,
) -> Result<SsrReport> {
    check_dim("relation rows", abs.n_states, rel.n_abstract)?;
    check_dim("relation cols", conc.n_states, rel.n_concrete)?;
    check_dim("interface", abs.n_inputs, interface.len())?;
    if interface.iter().any(|&u| u >= conc.n_inputs) {
        return Err(Error::invalid("interface maps to a missing concrete input"));
    }
    let mut failures = Vec::new();
    let initial_ok = conc.initial.iter().all(|&x| {
        let ok = abs.initial.iter().any(|&xh| rel.related(xh, x));
        if !ok {
            failures.push(format!("concrete initial state {x} has no related abstract initial state"));
        }
        ok
    });
    let mut req_delta: f64 = 0.0;
    let mut req_eps: f64 = 0.0;
    for (xh, x) in rel.pairs() {
        let d = euclid(&abs.outputs[xh], &conc.outputs[x]);
        req_eps = req_eps.max(d);
        for (uh, &u) in interface.iter().enumerate() {
            for a in 0..conc.n_adversaries {
                let p = conc.row(x, u, a);
                let best = (0..abs.n_adversaries)
                    .map(|ah| max_coupling_mass(abs.row(xh, uh, ah), p, rel).0)
                    .fold(0.0, f64::max);
                req_delta = req_delta.max(1.0 - best);
            }
        }
    }
    req_delta = req_delta.max(0.0);
    if req_delta > delta + PROB_TOL {
        failures.push(format!("transition condition needs delta {req_delta} > {delta}"));
    }
    if req_eps > epsilon + PROB_TOL {
        failures.push(format!("output condition needs epsilon {req_eps} > {epsilon}"));
    }
    Ok(SsrReport {
        holds: failures.is_empty(),
        initial_ok,
        required_delta: req_delta,
        required_epsilon: req_eps,
        failures,
    })
}

fn euclid(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiReport {
    pub holds: bool,
    pub initial_ok: bool,
    pub transitions_ok: bool,
    pub outputs_ok: bool,
    pub failures: Vec<String>,
}

/// Checks that the surrogate, with its adversary menu, reproduces every
/// lumped transition of the concrete model. Observations live on the input
/// axis; `f_map` sends concrete observations to surrogate observations.
pub fn verify_behavioral_inclusion_finite(
    surrogate: &FiniteGmdp,
    concrete: &FiniteGmdp,
    p_map: &[usize],
    f_map: &[usize],
) -> Result<BiReport> {
    check_dim("P map", concrete.n_states, p_map.len())?;
    check_dim("F map", concrete.n_inputs, f_map.len())?;
    if p_map.iter().any(|&s| s >= surrogate.n_states) || f_map.iter().any(|&o| o >= surrogate.n_inputs) {
        return Err(Error::invalid("state or observation map out of range"));
    }
    let mut failures = Vec::new();
    let lumped_init: BTreeSet<usize> = concrete.initial.iter().map(|&x| p_map[x]).collect();
    let sur_init: BTreeSet<usize> = surrogate.initial.iter().copied().collect();
    let initial_ok = lumped_init == sur_init;
    if !initial_ok {
        failures.push(format!("initial sets differ: P(X0) = {lumped_init:?}, surrogate {sur_init:?}"));
    }
    let mut transitions_ok = true;
    for x in 0..concrete.n_states {
        for o in 0..concrete.n_inputs {
            let mut lumped = vec![0.0; surrogate.n_states];
            for &(t, p) in concrete.row(x, o, 0) {
                lumped[p_map[t]] += p;
            }
            let matched = (0..surrogate.n_adversaries).any(|a| {
                let mut diff = lumped.clone();
                for &(t, p) in surrogate.row(p_map[x], f_map[o], a) {
                    diff[t] -= p;
                }
                diff.iter().all(|d| d.abs() <= PROB_TOL)
            });
            if !matched {
                transitions_ok = false;
                failures.push(format!("no adversary reproduces the lumped row of state {x}, observation {o}"));
            }
        }
    }
    let mut outputs_ok = true;
    for x in 0..concrete.n_states {
        if euclid(&concrete.outputs[x], &surrogate.outputs[p_map[x]]) > PROB_TOL {
            outputs_ok = false;
            failures.push(format!("output of state {x} differs from its surrogate"));
        }
    }
    Ok(BiReport {
        holds: failures.is_empty(),
        initial_ok,
        transitions_ok,
        outputs_ok,
        failures,
    })
}

/// State-indexed deficiency of a certificate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DeltaField {
    Scalar(f64),
    /// One value per abstract input level.
    PerInput(Vec<f64>),
    /// Closed-form ambiguity deficiency, bounded per state box.
    Ambiguity(AmbiguityField),
    /// Weighted sum of fields, clipped to one.
    Sum(Vec<(f64, DeltaField)>),
}

impl DeltaField {
    /// Bound on the field over abstract states in `cell` at input `input`.
    pub fn sup_over(&self, cell: &AxisBox, input: usize) -> Result<f64> {
        Ok(match self {
            DeltaField::Scalar(d) => *d,
            DeltaField::PerInput(v) => *v.get(input).ok_or_else(|| {
                Error::invalid(format!("delta field has {} input levels, asked for {input}", v.len()))
            })?,
            DeltaField::Ambiguity(f) => f.sup_over_box(cell)?,
            DeltaField::Sum(terms) => {
                let mut s = 0.0;
                for (w, f) in terms {
                    s += w * f.sup_over(cell, input)?;
                }
                s.min(1.0)
            }
        })
    }

    /// [`sup_over`](Self::sup_over) at every input level at once, sharing
    /// input-independent terms.
    pub fn sup_over_inputs(&self, cell: &AxisBox, n_inputs: usize) -> Result<Vec<f64>> {
        Ok(match self {
            DeltaField::Scalar(d) => vec![*d; n_inputs],
            DeltaField::PerInput(v) => {
                check_dim("delta field input levels", n_inputs, v.len())?;
                v.clone()
            }
            DeltaField::Ambiguity(f) => vec![f.sup_over_box(cell)?; n_inputs],
            DeltaField::Sum(terms) => {
                let mut s = vec![0.0; n_inputs];
                for (w, f) in terms {
                    for (acc, d) in s.iter_mut().zip(f.sup_over_inputs(cell, n_inputs)?) {
                        *acc += w * d;
                    }
                }
                s.into_iter().map(|v| v.min(1.0)).collect()
            }
        })
    }

    /// Global supremum, using each term's own domain.
    pub fn max(&self) -> f64 {
        match self {
            DeltaField::Scalar(d) => *d,
            DeltaField::PerInput(v) => v.iter().copied().fold(0.0, f64::max),
            DeltaField::Ambiguity(f) => f.max(),
            DeltaField::Sum(terms) => terms.iter().fold(0.0, |s, (w, f)| s + w * f.max()).min(1.0),
        }
    }

    /// Number of input levels the field is tied to, if any.
    pub fn input_levels(&self) -> Option<usize> {
        match self {
            DeltaField::PerInput(v) => Some(v.len()),
            DeltaField::Sum(terms) => terms.iter().find_map(|(_, f)| f.input_levels()),
            _ => None,
        }
    }
}

/// Map from concrete states into the space the base relation is stated on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConcreteMap {
    Linear(LinearMap),
    /// Agent and environment parts mapped separately.
    Product { agent: LinearMap, env: LinearMap },
}

impl ConcreteMap {
    pub fn dim_in(&self) -> usize {
        match self {
            ConcreteMap::Linear(m) => m.dim_in(),
            ConcreteMap::Product { agent, env } => agent.dim_in() + env.dim_in(),
        }
    }

    /// Applies the map; product maps split `x` after the agent block.
    pub fn apply(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_dim("concrete map input", self.dim_in(), x.len())?;
        Ok(match self {
            ConcreteMap::Linear(m) => m.apply(x),
            ConcreteMap::Product { agent, env } => {
                let (xa, xe) = x.split_at(agent.dim_in());
                let mut z = agent.apply(xa);
                z.extend(env.apply(xe));
                z
            }
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaseRelation {
    /// `x̂ = M(x)`.
    Equality,
    /// `‖x̂ − M(x)‖_D ≤ radius`.
    Ball { radius: f64, weights: Vec<f64> },
    /// `M(x)` lies in the grid cell whose representative is `x̂`.
    GridCell { counts: Vec<usize>, domain: AxisBox },
    /// `‖M(x) − L x̂‖_D ≤ radius`.
    LiftedBall { radius: f64, weights: Vec<f64>, lift: Vec<Vec<f64>> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RelationDesc {
    Simple { base: BaseRelation, concrete_map: ConcreteMap },
    /// Relational composition, concrete end first.
    Chain(Vec<RelationDesc>),
}

impl RelationDesc {
    /// The abstract point a concrete state is paired with: `M(x)` through
    /// every link. Grid relations leave the point continuous; locating the
    /// cell is up to the caller.
    pub fn canonical_abstract(&self, x: &[f64]) -> Result<Vec<f64>> {
        match self {
            RelationDesc::Simple { base, concrete_map } => {
                if let BaseRelation::LiftedBall { .. } = base {
                    return Err(Error::refused("lifted relations have no canonical abstract point"));
                }
                concrete_map.apply(x)
            }
            RelationDesc::Chain(links) => links.iter().try_fold(x.to_vec(), |z, r| r.canonical_abstract(&z)),
        }
    }
}

impl InterfaceDesc {
    pub fn is_identity(&self) -> bool {
        match self {
            InterfaceDesc::Identity => true,
            InterfaceDesc::Affine { .. } => false,
            InterfaceDesc::Chain(links) => links.iter().all(InterfaceDesc::is_identity),
        }
    }
}

/// Input interface from abstract to concrete inputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InterfaceDesc {
    Identity,
    /// `u = M û + c`.
    Affine { matrix: Vec<Vec<f64>>, offset: Vec<f64> },
    Chain(Vec<InterfaceDesc>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProvenanceEntry {
    pub kind: String,
    pub detail: String,
    pub epsilon: f64,
    pub delta_max: f64,
}

/// An (ε, δ) sub-simulation certificate `abstract ≼ concrete`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimRelationCert {
    pub abstract_system: String,
    pub concrete_system: String,
    pub epsilon: f64,
    pub delta: DeltaField,
    pub relation: RelationDesc,
    pub interface: InterfaceDesc,
    /// The bound holds for every adversary in the family with the same
    /// relation and interface.
    pub uniform_over_adversaries: bool,
    pub provenance: Vec<ProvenanceEntry>,
}

impl SimRelationCert {
    pub fn delta_max(&self) -> f64 {
        self.delta.max()
    }
}

/// Composes certificates ordered concrete end first: each certificate's
/// abstract system must be the next one's concrete system.
pub fn compose_transitive(certs: &[SimRelationCert]) -> Result<SimRelationCert> {
    let first = certs.first().ok_or_else(|| Error::invalid("nothing to compose"))?;
    for w in certs.windows(2) {
        if w[0].abstract_system != w[1].concrete_system {
            return Err(Error::invalid(format!(
                "chain break: '{}' is not the concrete side '{}' of the next link",
                w[0].abstract_system, w[1].concrete_system
            )));
        }
    }
    let epsilon = certs.iter().fold(0.0, |s, c| s + c.epsilon);
    let delta = DeltaField::Sum(certs.iter().map(|c| (1.0, c.delta.clone())).collect());
    let mut provenance: Vec<ProvenanceEntry> = certs.iter().flat_map(|c| c.provenance.clone()).collect();
    let delta_max = delta.max();
    provenance.push(ProvenanceEntry {
        kind: "composition".into(),
        detail: format!("{} links", certs.len()),
        epsilon,
        delta_max,
    });
    Ok(SimRelationCert {
        abstract_system: certs.last().map(|c| c.abstract_system.clone()).unwrap_or_default(),
        concrete_system: first.concrete_system.clone(),
        epsilon,
        delta,
        relation: RelationDesc::Chain(certs.iter().map(|c| c.relation.clone()).collect()),
        interface: InterfaceDesc::Chain(certs.iter().map(|c| c.interface.clone()).collect()),
        uniform_over_adversaries: certs.iter().all(|c| c.uniform_over_adversaries),
        provenance,
    })
}

/// User-asserted behavioral inclusion of an environment in a surrogate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiAssumption {
    pub surrogate: String,
    pub environment: String,
    /// Dimension of the agent block of the antecedent's concrete state.
    pub agent_dim: usize,
    /// P: environment state → surrogate state.
    pub map_p: LinearMap,
    /// Name of the concrete interconnection the rebased certificate covers.
    pub consequent_concrete: String,
    /// Name of the abstract side once the adversary is left free.
    pub consequent_abstract: String,
    pub note: String,
}

/// Rebases a certificate against the surrogate interconnection onto the
/// real environment. Requires a certificate uniform over adversaries whose
/// relation maps the surrogate part by the identity.
pub fn apply_proxy_theorem(antecedent: &SimRelationCert, bi: &BiAssumption) -> Result<SimRelationCert> {
    if !antecedent.uniform_over_adversaries {
        return Err(Error::refused(
            "antecedent certificate is not uniform over the adversary family",
        ));
    }
    let RelationDesc::Simple { base, concrete_map } = &antecedent.relation else {
        return Err(Error::refused("antecedent relation is a chain, not a single product relation"));
    };
    let (agent, env) = match concrete_map {
        ConcreteMap::Product { agent, env } => (agent.clone(), env.clone()),
        ConcreteMap::Linear(m) => split_block_diagonal(m, bi.agent_dim).ok_or_else(|| {
            Error::refused("antecedent relation map is not block diagonal over agent and surrogate")
        })?,
    };
    if !env.is_identity() || env.dim_out() != bi.map_p.dim_out() {
        return Err(Error::refused(
            "antecedent relation does not map the surrogate state by the identity",
        ));
    }
    let mut cert = antecedent.clone();
    cert.relation = RelationDesc::Simple {
        base: base.clone(),
        concrete_map: ConcreteMap::Product {
            agent,
            env: bi.map_p.clone(),
        },
    };
    cert.concrete_system = bi.consequent_concrete.clone();
    cert.abstract_system = bi.consequent_abstract.clone();
    cert.provenance.push(ProvenanceEntry {
        kind: "behavioral-inclusion".into(),
        detail: format!("{} within {} (asserted: {})", bi.environment, bi.surrogate, bi.note),
        epsilon: cert.epsilon,
        delta_max: cert.delta_max(),
    });
    Ok(cert)
}

/// Splits `[M_a 0; 0 M_e]` with `agent_dim` agent columns.
fn split_block_diagonal(m: &LinearMap, agent_dim: usize) -> Option<(LinearMap, LinearMap)> {
    let mat = m.to_matrix();
    let cols = m.dim_in();
    if agent_dim > cols {
        return None;
    }
    let split_row = mat.iter().position(|r| r[..agent_dim].iter().all(|v| *v == 0.0)).unwrap_or(mat.len());
    let (top, bottom) = mat.split_at(split_row);
    if top.iter().any(|r| r[agent_dim..].iter().any(|v| *v != 0.0))
        || bottom.iter().any(|r| r[..agent_dim].iter().any(|v| *v != 0.0))
    {
        return None;
    }
    let a = top.iter().map(|r| r[..agent_dim].to_vec()).collect();
    let e = bottom.iter().map(|r| r[agent_dim..].to_vec()).collect();
    Some((LinearMap::Matrix(a), LinearMap::Matrix(e)))
}

/// Mixes certificates over a distribution of situations: ε is the largest
/// situation ε, δ the probability-weighted deficiency.
pub fn combine_situations(weighted: &[(f64, SimRelationCert)]) -> Result<SimRelationCert> {
    let first = &weighted.first().ok_or_else(|| Error::invalid("no situations"))?.1;
    let total: f64 = weighted.iter().map(|(w, _)| w).sum();
    if weighted.iter().any(|(w, _)| !(*w >= 0.0)) || (total - 1.0).abs() > 1e-9 {
        return Err(Error::invalid(format!("situation weights must be a distribution (sum {total})")));
    }
    for (_, c) in weighted {
        if c.abstract_system != first.abstract_system || c.concrete_system != first.concrete_system {
            return Err(Error::invalid("situations must relate the same pair of systems"));
        }
    }
    let epsilon = weighted.iter().fold(0.0, |m, (_, c)| f64::max(m, c.epsilon));
    let delta = DeltaField::Sum(weighted.iter().map(|(w, c)| (*w, c.delta.clone())).collect());
    let mut cert = first.clone();
    cert.epsilon = epsilon;
    cert.delta = delta;
    cert.uniform_over_adversaries = weighted.iter().all(|(_, c)| c.uniform_over_adversaries);
    cert.provenance.push(ProvenanceEntry {
        kind: "situations".into(),
        detail: format!("{} situations", weighted.len()),
        epsilon,
        delta_max: cert.delta.max(),
    });
    Ok(cert)
}

/// Sizes of a random lumping instance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LumpingSizes {
    pub reduced_agent: usize,
    pub agent_copies: usize,
    pub surrogate: usize,
    pub env_copies: usize,
    pub inputs: usize,
    pub adversaries: usize,
}

impl Default for LumpingSizes {
    fn default() -> Self {
        LumpingSizes {
            reduced_agent: 3,
            agent_copies: 2,
            surrogate: 3,
            env_copies: 2,
            inputs: 2,
            adversaries: 2,
        }
    }
}

/// A finite agent/surrogate/environment instance in which the environment
/// lumps onto the surrogate by construction.
#[derive(Debug, Clone)]
pub struct LumpingInstance {
    /// A_r × S with the full adversary menu.
    pub abstract_system: FiniteGmdp,
    /// (A ×ₐ S)(𝔞), one per adversary choice.
    pub antecedents: Vec<FiniteGmdp>,
    /// A × E.
    pub consequent: FiniteGmdp,
    /// S with observations F(x_A) on the input axis.
    pub surrogate: FiniteGmdp,
    /// E with observations x_A on the input axis.
    pub environment: FiniteGmdp,
    pub relation_antecedent: FiniteRelation,
    pub relation_consequent: FiniteRelation,
    pub map_f: Vec<usize>,
    pub map_p: Vec<usize>,
}

fn random_dist<R: Rng>(rng: &mut R, n: usize, mass: f64) -> Vec<f64> {
    let support = rng.random_range(1..=n);
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    let mut w = vec![0.0; n];
    for &i in &idx[..support] {
        w[i] = rng.random_range(0.05..1.0);
    }
    let s: f64 = w.iter().sum();
    w.iter().map(|x| mass * x / s).collect()
}

fn sparse(dense: &[f64]) -> SparseDist {
    dense.iter().enumerate().filter(|(_, p)| **p > 0.0).map(|(i, p)| (i, *p)).collect()
}

/// Splits each mass of `coarse` among the preimages `copies` with random
/// proportions.
fn split_mass<R: Rng>(rng: &mut R, coarse: &[f64], copies: usize) -> Vec<f64> {
    let mut fine = vec![0.0; coarse.len() * copies];
    for (k, &m) in coarse.iter().enumerate() {
        if m > 0.0 {
            let w = random_dist(rng, copies, m);
            fine[k * copies..(k + 1) * copies].copy_from_slice(&w);
        }
    }
    fine
}

pub fn lumping_instance(seed: u64, sz: LumpingSizes) -> Result<LumpingInstance> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (nr, ca, ns, ce, nu, nadv) = (
        sz.reduced_agent,
        sz.agent_copies,
        sz.surrogate,
        sz.env_copies,
        sz.inputs,
        sz.adversaries,
    );
    let na = nr * ca;
    let ne = ns * ce;
    let map_f: Vec<usize> = (0..na).map(|a| a / ca).collect();
    let map_p: Vec<usize> = (0..ne).map(|e| e / ce).collect();

    // t_Ar(·|ar, s, u) and t_S(·|s, ar, adv); rows may leak a little mass.
    let mut t_ar = vec![vec![vec![Vec::new(); nu]; ns]; nr];
    for row in t_ar.iter_mut().flatten().flatten() {
        let leak = rng.random_range(0.0..0.05);
        *row = random_dist(&mut rng, nr, 1.0 - leak);
    }
    let mut t_s = vec![vec![vec![Vec::new(); nadv]; nr]; ns];
    for row in t_s.iter_mut().flatten().flatten() {
        *row = random_dist(&mut rng, ns, 1.0);
    }
    // A lumps onto A_r up to a small perturbation.
    let mut t_a = vec![vec![vec![Vec::new(); nu]; ns]; na];
    for a in 0..na {
        for s in 0..ns {
            for u in 0..nu {
                let lumped = split_mass(&mut rng, &t_ar[map_f[a]][s][u], ca);
                let eta = rng.random_range(0.0..0.1);
                let noise = random_dist(&mut rng, na, lumped.iter().sum());
                t_a[a][s][u] = lumped.iter().zip(&noise).map(|(l, z)| (1.0 - eta) * l + eta * z).collect();
            }
        }
    }
    // E lumps exactly onto S under an adversary chosen per (e, a).
    let mut t_e = vec![vec![Vec::new(); na]; ne];
    for e in 0..ne {
        for a in 0..na {
            let choice = rng.random_range(0..nadv);
            t_e[e][a] = split_mass(&mut rng, &t_s[map_p[e]][map_f[a]][choice], ce);
        }
    }
    let h_ar: Vec<f64> = (0..nr).map(|_| rng.random_range(-1.0..1.0)).collect();
    let h_a: Vec<f64> = (0..na).map(|a| h_ar[map_f[a]] + rng.random_range(-0.05..0.05)).collect();
    let h_s: Vec<f64> = (0..ns).map(|_| rng.random_range(-1.0..1.0)).collect();

    let joint_out = |ha: f64, hs: f64| vec![ha, hs];
    let abs_n = nr * ns;
    let mut abstract_system = FiniteGmdp::new(
        abs_n,
        nu,
        nadv,
        (0..abs_n).map(|i| joint_out(h_ar[i / ns], h_s[i % ns])).collect(),
        (0..abs_n).collect(),
    )?;
    for ar in 0..nr {
        for s in 0..ns {
            for u in 0..nu {
                for adv in 0..nadv {
                    let mut row = vec![0.0; abs_n];
                    for ar2 in 0..nr {
                        for s2 in 0..ns {
                            row[ar2 * ns + s2] = t_ar[ar][s][u][ar2] * t_s[s][ar][adv][s2];
                        }
                    }
                    abstract_system.set_row(ar * ns + s, u, adv, sparse(&row))?;
                }
            }
        }
    }

    let ant_n = na * ns;
    let mut antecedents = Vec::with_capacity(nadv);
    for adv in 0..nadv {
        let mut m = FiniteGmdp::new(
            ant_n,
            nu,
            1,
            (0..ant_n).map(|i| joint_out(h_a[i / ns], h_s[i % ns])).collect(),
            (0..ant_n).collect(),
        )?;
        for a in 0..na {
            for s in 0..ns {
                for u in 0..nu {
                    let mut row = vec![0.0; ant_n];
                    for a2 in 0..na {
                        for s2 in 0..ns {
                            row[a2 * ns + s2] = t_a[a][s][u][a2] * t_s[s][map_f[a]][adv][s2];
                        }
                    }
                    m.set_row(a * ns + s, u, 0, sparse(&row))?;
                }
            }
        }
        antecedents.push(m);
    }

    let con_n = na * ne;
    let mut consequent = FiniteGmdp::new(
        con_n,
        nu,
        1,
        (0..con_n).map(|i| joint_out(h_a[i / ne], h_s[map_p[i % ne]])).collect(),
        (0..con_n).collect(),
    )?;
    for a in 0..na {
        for e in 0..ne {
            for u in 0..nu {
                let mut row = vec![0.0; con_n];
                for a2 in 0..na {
                    for e2 in 0..ne {
                        row[a2 * ne + e2] = t_a[a][map_p[e]][u][a2] * t_e[e][a][e2];
                    }
                }
                consequent.set_row(a * ne + e, u, 0, sparse(&row))?;
            }
        }
    }

    let mut surrogate = FiniteGmdp::new(ns, nr, nadv, h_s.iter().map(|h| vec![*h]).collect(), (0..ns).collect())?;
    for s in 0..ns {
        for ar in 0..nr {
            for adv in 0..nadv {
                surrogate.set_row(s, ar, adv, sparse(&t_s[s][ar][adv]))?;
            }
        }
    }
    let mut environment = FiniteGmdp::new(
        ne,
        na,
        1,
        (0..ne).map(|e| vec![h_s[map_p[e]]]).collect(),
        (0..ne).collect(),
    )?;
    for e in 0..ne {
        for a in 0..na {
            environment.set_row(e, a, 0, sparse(&t_e[e][a]))?;
        }
    }

    // Base relation on A_r × S: the diagonal plus a few random pairs.
    let mut base = FiniteRelation::from_fn(abs_n, abs_n, |i, j| i == j);
    for i in 0..abs_n {
        for j in 0..abs_n {
            if rng.random_bool(0.1) {
                base.insert(i, j);
            }
        }
    }
    let relation_antecedent =
        FiniteRelation::from_fn(abs_n, ant_n, |i, j| base.related(i, map_f[j / ns] * ns + j % ns));
    let relation_consequent = FiniteRelation::from_fn(abs_n, con_n, |i, j| {
        base.related(i, map_f[j / ne] * ns + map_p[j % ne])
    });

    Ok(LumpingInstance {
        abstract_system,
        antecedents,
        consequent,
        surrogate,
        environment,
        relation_antecedent,
        relation_consequent,
        map_f,
        map_p,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProxyCheck {
    pub behavioral_inclusion: bool,
    pub antecedent_holds: bool,
    pub consequent_holds: bool,
    pub epsilon: f64,
    pub delta: f64,
    pub consequent_required_delta: f64,
}

/// Certifies the antecedent at its tightest (ε, δ), then checks the
/// consequent against the same pair.
pub fn check_proxy_instance(inst: &LumpingInstance) -> Result<ProxyCheck> {
    let bi = verify_behavioral_inclusion_finite(&inst.surrogate, &inst.environment, &inst.map_p, &inst.map_f)?;
    let iface: Vec<usize> = (0..inst.abstract_system.n_inputs).collect();
    let mut eps: f64 = 0.0;
    let mut delta: f64 = 0.0;
    for (adv, conc) in inst.antecedents.iter().enumerate() {
        let abs = inst.abstract_system.restrict_adversary(adv)?;
        let r = verify_ssr_finite(&abs, conc, &inst.relation_antecedent, &iface, f64::INFINITY, 1.0)?;
        eps = eps.max(r.required_epsilon);
        delta = delta.max(r.required_delta);
    }
    let mut antecedent_holds = true;
    for (adv, conc) in inst.antecedents.iter().enumerate() {
        let abs = inst.abstract_system.restrict_adversary(adv)?;
        antecedent_holds &= verify_ssr_finite(&abs, conc, &inst.relation_antecedent, &iface, eps, delta)?.holds;
    }
    let cons = verify_ssr_finite(
        &inst.abstract_system,
        &inst.consequent,
        &inst.relation_consequent,
        &iface,
        eps,
        delta,
    )?;
    Ok(ProxyCheck {
        behavioral_inclusion: bi.holds,
        antecedent_holds,
        consequent_holds: cons.holds,
        epsilon: eps,
        delta,
        consequent_required_delta: cons.required_delta,
    })
}
