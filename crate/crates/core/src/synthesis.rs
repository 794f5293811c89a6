//! Co-safe LTL front end and robust controller synthesis on the product of
//! a finite model with a DFA.

use std::collections::{BTreeMap, BTreeSet, HashMap, VecDeque};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::abstraction::{FiniteAbstraction, GridSpec};
use crate::error::{check_dim, Error, Result};
use crate::measures::AxisBox;
use crate::relations::{DeltaField, FiniteGmdp, SimRelationCert};

/// Reachable DFA states beyond this are refused.
pub const DFA_STATE_LIMIT: usize = 10_000;

/// Atoms beyond this make the alphabet too large to tabulate.
pub const MAX_ATOMS: usize = 16;

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Formula {
    True,
    False,
    Atom(String),
    NotAtom(String),
    And(Vec<Formula>),
    Or(Vec<Formula>),
    Next(Box<Formula>),
    Until(Box<Formula>, Box<Formula>),
}

impl Formula {
    pub fn atom(name: &str) -> Formula {
        Formula::Atom(name.into())
    }

    pub fn eventually(f: Formula) -> Formula {
        Formula::Until(Box::new(Formula::True), Box::new(f))
    }

    /// Atom names in sorted order.
    pub fn atoms(&self) -> Vec<String> {
        let mut set = BTreeSet::new();
        self.collect_atoms(&mut set);
        set.into_iter().collect()
    }

    fn collect_atoms(&self, set: &mut BTreeSet<String>) {
        match self {
            Formula::True | Formula::False => {}
            Formula::Atom(p) | Formula::NotAtom(p) => {
                set.insert(p.clone());
            }
            Formula::And(fs) | Formula::Or(fs) => fs.iter().for_each(|f| f.collect_atoms(set)),
            Formula::Next(f) => f.collect_atoms(set),
            Formula::Until(a, b) => {
                a.collect_atoms(set);
                b.collect_atoms(set);
            }
        }
    }

    /// Sign each atom occurs with; an atom seen with both signs is refused.
    pub fn polarities(&self) -> Result<BTreeMap<String, Polarity>> {
        let mut seen: BTreeMap<String, (bool, bool)> = BTreeMap::new();
        self.collect_signs(&mut seen);
        seen.into_iter()
            .map(|(p, signs)| match signs {
                (true, true) => Err(Error::refused(format!(
                    "atom {p} occurs both plain and negated; no sound robust labeling"
                ))),
                (_, true) => Ok((p, Polarity::Negative)),
                _ => Ok((p, Polarity::Positive)),
            })
            .collect()
    }

    fn collect_signs(&self, seen: &mut BTreeMap<String, (bool, bool)>) {
        match self {
            Formula::True | Formula::False => {}
            Formula::Atom(p) => seen.entry(p.clone()).or_default().0 = true,
            Formula::NotAtom(p) => seen.entry(p.clone()).or_default().1 = true,
            Formula::And(fs) | Formula::Or(fs) => fs.iter().for_each(|f| f.collect_signs(seen)),
            Formula::Next(f) => f.collect_signs(seen),
            Formula::Until(a, b) => {
                a.collect_signs(seen);
                b.collect_signs(seen);
            }
        }
    }

    /// Flattened, sorted and simplified form used as DFA state identity.
    pub fn normalized(&self) -> Formula {
        match self {
            Formula::And(fs) => junction(fs.iter().map(Formula::normalized), true),
            Formula::Or(fs) => junction(fs.iter().map(Formula::normalized), false),
            Formula::Next(f) => match f.normalized() {
                Formula::False => Formula::False,
                g => Formula::Next(Box::new(g)),
            },
            Formula::Until(a, b) => {
                let (a, b) = (a.normalized(), b.normalized());
                match (&a, &b) {
                    (_, Formula::True) => Formula::True,
                    (_, Formula::False) => Formula::False,
                    (Formula::False, _) => b,
                    _ => Formula::Until(Box::new(a), Box::new(b)),
                }
            }
            f => f.clone(),
        }
    }

    /// Residual obligation after reading one letter.
    fn progress(&self, holds: &dyn Fn(&str) -> bool) -> Formula {
        match self {
            Formula::True => Formula::True,
            Formula::False => Formula::False,
            Formula::Atom(p) => bool_formula(holds(p)),
            Formula::NotAtom(p) => bool_formula(!holds(p)),
            Formula::And(fs) => Formula::And(fs.iter().map(|f| f.progress(holds)).collect()),
            Formula::Or(fs) => Formula::Or(fs.iter().map(|f| f.progress(holds)).collect()),
            Formula::Next(f) => (**f).clone(),
            Formula::Until(a, b) => Formula::Or(vec![
                b.progress(holds),
                Formula::And(vec![a.progress(holds), self.clone()]),
            ]),
        }
    }

    /// Satisfaction by the empty remainder of a trace.
    fn holds_on_empty(&self) -> bool {
        match self {
            Formula::True => true,
            Formula::And(fs) => fs.iter().all(Formula::holds_on_empty),
            Formula::Or(fs) => fs.iter().any(Formula::holds_on_empty),
            _ => false,
        }
    }
}

fn bool_formula(b: bool) -> Formula {
    if b {
        Formula::True
    } else {
        Formula::False
    }
}

fn junction(parts: impl Iterator<Item = Formula>, conj: bool) -> Formula {
    let (unit, zero) = if conj {
        (Formula::True, Formula::False)
    } else {
        (Formula::False, Formula::True)
    };
    let mut set = BTreeSet::new();
    for p in parts {
        let flat = match (p, conj) {
            (Formula::And(fs), true) | (Formula::Or(fs), false) => fs,
            (p, _) => vec![p],
        };
        for f in flat {
            if f == zero {
                return zero;
            }
            if f != unit {
                set.insert(f);
            }
        }
    }
    match set.len() {
        0 => unit,
        1 => set.into_iter().next().expect("one element"),
        _ if conj => Formula::And(set.into_iter().collect()),
        _ => Formula::Or(set.into_iter().collect()),
    }
}

impl std::fmt::Display for Formula {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let join = |f: &mut std::fmt::Formatter<'_>, fs: &[Formula], op: &str| {
            write!(f, "(")?;
            for (i, g) in fs.iter().enumerate() {
                if i > 0 {
                    write!(f, " {op} ")?;
                }
                write!(f, "{g}")?;
            }
            write!(f, ")")
        };
        match self {
            Formula::True => write!(f, "true"),
            Formula::False => write!(f, "false"),
            Formula::Atom(p) => write!(f, "{p}"),
            Formula::NotAtom(p) => write!(f, "!{p}"),
            Formula::And(fs) => join(f, fs, "&"),
            Formula::Or(fs) => join(f, fs, "|"),
            Formula::Next(g) => write!(f, "X {g}"),
            Formula::Until(a, b) => write!(f, "({a} U {b})"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Polarity {
    /// Must be guaranteed to hold: labeled under contraction.
    Positive,
    /// Only occurs negated: labeled under expansion.
    Negative,
}

#[derive(Debug, Clone, PartialEq)]
enum Token {
    Ident(String),
    And,
    Or,
    Not,
    LParen,
    RParen,
}

fn tokenize(text: &str) -> Result<Vec<(usize, Token)>> {
    let mut out = Vec::new();
    let chars: Vec<(usize, char)> = text.char_indices().collect();
    let mut k = 0;
    while k < chars.len() {
        let (pos, c) = chars[k];
        let tok = match c {
            c if c.is_whitespace() => {
                k += 1;
                continue;
            }
            '&' => Token::And,
            '|' => Token::Or,
            '!' => Token::Not,
            '(' => Token::LParen,
            ')' => Token::RParen,
            c if c.is_ascii_alphabetic() || c == '_' => {
                let mut end = k;
                while end < chars.len() && (chars[end].1.is_ascii_alphanumeric() || chars[end].1 == '_') {
                    end += 1;
                }
                let name: String = chars[k..end].iter().map(|(_, c)| c).collect();
                out.push((pos, Token::Ident(name)));
                k = end;
                continue;
            }
            other => {
                return Err(Error::Parse {
                    position: pos,
                    message: format!("unexpected character '{other}'"),
                })
            }
        };
        out.push((pos, tok));
        k += 1;
    }
    Ok(out)
}

struct Parser {
    tokens: Vec<(usize, Token)>,
    at: usize,
    end: usize,
}

fn is_keyword(s: &str) -> bool {
    matches!(s, "U" | "X" | "F" | "G" | "true" | "false")
}

impl Parser {
    fn peek(&self) -> Option<&Token> {
        self.tokens.get(self.at).map(|(_, t)| t)
    }

    fn pos(&self) -> usize {
        self.tokens.get(self.at).map_or(self.end, |(p, _)| *p)
    }

    fn err<T>(&self, message: impl Into<String>) -> Result<T> {
        Err(Error::Parse {
            position: self.pos(),
            message: message.into(),
        })
    }

    fn is_ident(&self, s: &str) -> bool {
        matches!(self.peek(), Some(Token::Ident(n)) if n == s)
    }

    fn or(&mut self) -> Result<Formula> {
        let mut parts = vec![self.and()?];
        while self.peek() == Some(&Token::Or) {
            self.at += 1;
            parts.push(self.and()?);
        }
        Ok(if parts.len() == 1 { parts.pop().expect("one") } else { Formula::Or(parts) })
    }

    fn and(&mut self) -> Result<Formula> {
        let mut parts = vec![self.until()?];
        while self.peek() == Some(&Token::And) {
            self.at += 1;
            parts.push(self.until()?);
        }
        Ok(if parts.len() == 1 { parts.pop().expect("one") } else { Formula::And(parts) })
    }

    fn until(&mut self) -> Result<Formula> {
        let lhs = self.unary()?;
        if self.is_ident("U") {
            self.at += 1;
            let rhs = self.until()?;
            return Ok(Formula::Until(Box::new(lhs), Box::new(rhs)));
        }
        Ok(lhs)
    }

    fn unary(&mut self) -> Result<Formula> {
        match self.peek() {
            Some(Token::Not) => {
                self.at += 1;
                match self.peek() {
                    Some(Token::Ident(n)) if n == "true" => {
                        self.at += 1;
                        Ok(Formula::False)
                    }
                    Some(Token::Ident(n)) if n == "false" => {
                        self.at += 1;
                        Ok(Formula::True)
                    }
                    Some(Token::Ident(n)) if !is_keyword(n) => {
                        let n = n.clone();
                        self.at += 1;
                        Ok(Formula::NotAtom(n))
                    }
                    _ => self.err("negation applies only to atoms"),
                }
            }
            Some(Token::Ident(n)) if n == "X" => {
                self.at += 1;
                Ok(Formula::Next(Box::new(self.unary()?)))
            }
            Some(Token::Ident(n)) if n == "F" => {
                self.at += 1;
                Ok(Formula::eventually(self.unary()?))
            }
            Some(Token::Ident(n)) if n == "G" => self.err("'G' is not co-safe"),
            _ => self.primary(),
        }
    }

    fn primary(&mut self) -> Result<Formula> {
        match self.peek().cloned() {
            Some(Token::LParen) => {
                self.at += 1;
                let f = self.or()?;
                if self.peek() != Some(&Token::RParen) {
                    return self.err("expected ')'");
                }
                self.at += 1;
                Ok(f)
            }
            Some(Token::Ident(n)) if n == "true" => {
                self.at += 1;
                Ok(Formula::True)
            }
            Some(Token::Ident(n)) if n == "false" => {
                self.at += 1;
                Ok(Formula::False)
            }
            Some(Token::Ident(n)) if !is_keyword(&n) => {
                self.at += 1;
                Ok(Formula::Atom(n))
            }
            Some(_) => self.err("expected an atom, 'true', 'false' or '('"),
            None => self.err("unexpected end of formula"),
        }
    }
}

/// Parses `&`, `|`, `!`, `U` (right associative), `X` and `F` over named
/// atoms. Binding from loosest: `|`, `&`, `U`, then the prefix operators.
pub fn parse_scltl(text: &str) -> Result<Formula> {
    let mut p = Parser {
        tokens: tokenize(text)?,
        at: 0,
        end: text.len(),
    };
    let f = p.or()?;
    if p.at != p.tokens.len() {
        return p.err("trailing input");
    }
    Ok(f)
}

/// Finite-trace satisfaction with strong next and until. `trace[k]` is a
/// bitmask over `atoms`.
pub fn satisfies(f: &Formula, atoms: &[String], trace: &[u32]) -> bool {
    fn bit(atoms: &[String], p: &str) -> u32 {
        atoms.iter().position(|a| a == p).map_or(0, |i| 1 << i)
    }
    fn sat(f: &Formula, atoms: &[String], trace: &[u32], i: usize) -> bool {
        match f {
            Formula::True => true,
            Formula::False => false,
            Formula::Atom(p) => i < trace.len() && trace[i] & bit(atoms, p) != 0,
            Formula::NotAtom(p) => i < trace.len() && trace[i] & bit(atoms, p) == 0,
            Formula::And(fs) => fs.iter().all(|g| sat(g, atoms, trace, i)),
            Formula::Or(fs) => fs.iter().any(|g| sat(g, atoms, trace, i)),
            Formula::Next(g) => i + 1 < trace.len() && sat(g, atoms, trace, i + 1),
            Formula::Until(a, b) => (i..trace.len())
                .find(|&j| sat(b, atoms, trace, j))
                .is_some_and(|j| (i..j).all(|k| sat(a, atoms, trace, k))),
        }
    }
    sat(f, atoms, trace, 0)
}

/// Deterministic, total automaton over letters `2^atoms`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dfa {
    pub atoms: Vec<String>,
    pub n_states: usize,
    pub initial: usize,
    pub accepting: Vec<bool>,
    /// Absorbing non-accepting states.
    pub rejecting: Vec<bool>,
    /// `transitions[q * n_letters + letter]`.
    pub transitions: Vec<usize>,
    /// Residual formula of each state, for dumps.
    pub labels: Vec<String>,
}

impl Dfa {
    pub fn n_letters(&self) -> usize {
        1 << self.atoms.len()
    }

    pub fn step(&self, q: usize, letter: u32) -> usize {
        self.transitions[q * self.n_letters() + letter as usize]
    }

    pub fn run(&self, trace: &[u32]) -> usize {
        trace.iter().fold(self.initial, |q, &l| self.step(q, l))
    }

    pub fn accepts(&self, trace: &[u32]) -> bool {
        self.accepting[self.run(trace)]
    }

    pub fn is_terminal(&self, q: usize) -> bool {
        self.accepting[q] || self.rejecting[q]
    }

    pub fn validate(&self) -> Result<()> {
        check_dim("dfa accepting flags", self.n_states, self.accepting.len())?;
        check_dim("dfa rejecting flags", self.n_states, self.rejecting.len())?;
        check_dim("dfa transitions", self.n_states * self.n_letters(), self.transitions.len())?;
        if self.initial >= self.n_states || self.transitions.iter().any(|&t| t >= self.n_states) {
            return Err(Error::invalid("dfa state index out of range"));
        }
        for q in 0..self.n_states {
            if self.accepting[q] && self.rejecting[q] {
                return Err(Error::invalid(format!("dfa state {q} both accepting and rejecting")));
            }
            if self.is_terminal(q) && (0..self.n_letters()).any(|l| self.step(q, l as u32) != q) {
                return Err(Error::invalid(format!("terminal dfa state {q} is not absorbing")));
            }
        }
        Ok(())
    }

    /// One line per state, then one line per transition `q letter q'`.
    pub fn dump(&self) -> String {
        let mut s = format!("atoms {}\ninitial {}\n", self.atoms.join(" "), self.initial);
        for q in 0..self.n_states {
            let kind = if self.accepting[q] {
                "accepting"
            } else if self.rejecting[q] {
                "rejecting"
            } else {
                "pending"
            };
            s += &format!("state {q} {kind} {}\n", self.labels[q]);
        }
        for q in 0..self.n_states {
            for l in 0..self.n_letters() {
                s += &format!("{q} {l:0width$b} {}\n", self.step(q, l as u32), width = self.atoms.len().max(1));
            }
        }
        s
    }
}

/// DFA by formula progression; states are normalized residual formulas.
/// All accepting residuals are merged into one absorbing state.
pub fn to_dfa(f: &Formula) -> Result<Dfa> {
    let atoms = f.atoms();
    if atoms.len() > MAX_ATOMS {
        return Err(Error::refused(format!("{} atoms exceed the alphabet limit", atoms.len())));
    }
    let n_letters = 1usize << atoms.len();
    let accept_key = Formula::True;
    let mut ids: HashMap<Formula, usize> = HashMap::new();
    let mut forms: Vec<Formula> = Vec::new();
    let mut queue = VecDeque::new();
    let intern = |g: Formula, ids: &mut HashMap<Formula, usize>, forms: &mut Vec<Formula>, queue: &mut VecDeque<usize>| -> Result<usize> {
        let g = if g.holds_on_empty() { accept_key.clone() } else { g };
        if let Some(&q) = ids.get(&g) {
            return Ok(q);
        }
        if forms.len() >= DFA_STATE_LIMIT {
            return Err(Error::refused(format!("dfa exceeds {DFA_STATE_LIMIT} states")));
        }
        let q = forms.len();
        ids.insert(g.clone(), q);
        forms.push(g);
        queue.push_back(q);
        Ok(q)
    };
    let initial = intern(f.normalized(), &mut ids, &mut forms, &mut queue)?;
    let mut table: Vec<Vec<usize>> = Vec::new();
    while let Some(q) = queue.pop_front() {
        let g = forms[q].clone();
        let mut row = Vec::with_capacity(n_letters);
        for letter in 0..n_letters {
            let holds = |p: &str| atoms.iter().position(|a| a == p).is_some_and(|i| letter >> i & 1 == 1);
            let next = g.progress(&holds).normalized();
            row.push(intern(next, &mut ids, &mut forms, &mut queue)?);
        }
        if table.len() <= q {
            table.resize(q + 1, Vec::new());
        }
        table[q] = row;
    }
    let n_states = forms.len();
    let dfa = Dfa {
        atoms,
        n_states,
        initial,
        accepting: forms.iter().map(|g| *g == Formula::True).collect(),
        rejecting: forms.iter().map(|g| *g == Formula::False).collect(),
        transitions: table.into_iter().flatten().collect(),
        labels: forms.iter().map(|g| g.to_string()).collect(),
    };
    dfa.validate()?;
    Ok(dfa)
}

/// Regions of the output space attached to atoms, with the output metric
/// weights used for robust labeling.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelingMap {
    pub regions: BTreeMap<String, AxisBox>,
    #[serde(default)]
    pub weights: Option<Vec<f64>>,
}

impl LabelingMap {
    pub fn new(regions: BTreeMap<String, AxisBox>) -> Self {
        LabelingMap { regions, weights: None }
    }

    fn region(&self, atom: &str) -> Result<&AxisBox> {
        self.regions
            .get(atom)
            .ok_or_else(|| Error::invalid(format!("no region for atom {atom}")))
    }

    fn weight(&self, i: usize) -> f64 {
        self.weights.as_ref().map_or(1.0, |w| w[i])
    }

    fn check(&self, atoms: &[String], dim: usize) -> Result<()> {
        for a in atoms {
            let d = self.region(a)?.dim();
            if d != dim {
                return Err(Error::invalid(format!("region {a} has dimension {d}, outputs have {dim}")));
            }
        }
        if let Some(w) = &self.weights {
            check_dim("label weights", dim, w.len())?;
        }
        Ok(())
    }

    /// Plain membership letter of an output.
    pub fn letter(&self, atoms: &[String], y: &[f64]) -> Result<u32> {
        self.check(atoms, y.len())?;
        let mut l = 0;
        for (i, a) in atoms.iter().enumerate() {
            if self.region(a)?.contains(y) {
                l |= 1 << i;
            }
        }
        Ok(l)
    }

    fn robust_holds(&self, region: &AxisBox, y: &[f64], eps: f64, pol: Polarity) -> bool {
        match pol {
            Polarity::Positive => (0..y.len()).all(|i| {
                let r = eps / self.weight(i).sqrt();
                y[i] - region.lower[i] >= r && region.upper[i] - y[i] >= r
            }),
            Polarity::Negative => {
                let w: Vec<f64> = (0..y.len()).map(|i| self.weight(i)).collect();
                region.weighted_dist2(y, &w) <= eps * eps
            }
        }
    }
}

/// Letters for each output under ε-robust labeling: atoms that must hold
/// need the whole ε-ball inside their region, atoms that only occur negated
/// are set when the ball touches theirs.
pub fn robust_labeling(
    map: &LabelingMap,
    formula: &Formula,
    atoms: &[String],
    outputs: &[Vec<f64>],
    eps: f64,
) -> Result<Vec<u32>> {
    if !(eps >= 0.0) {
        return Err(Error::invalid("labeling radius must be non-negative"));
    }
    let pol = formula.polarities()?;
    let Some(dim) = outputs.first().map(Vec::len) else {
        return Ok(Vec::new());
    };
    map.check(atoms, dim)?;
    let per_atom: Vec<(&AxisBox, Polarity)> = atoms
        .iter()
        .map(|a| Ok((map.region(a)?, pol.get(a).copied().unwrap_or(Polarity::Positive))))
        .collect::<Result<_>>()?;
    outputs
        .par_iter()
        .map(|y| {
            check_dim("labeled output", dim, y.len())?;
            let mut l = 0;
            for (i, (region, p)) in per_atom.iter().enumerate() {
                if map.robust_holds(region, y, eps, *p) {
                    l |= 1 << i;
                }
            }
            Ok(l)
        })
        .collect()
}

/// Finite models value iteration can run on.
pub trait TransitionModel: Sync {
    fn n_states(&self) -> usize;
    fn n_inputs(&self) -> usize;
    /// `E[w(next) | s, u]` at `[s * n_inputs + u]`; mass leaving the model
    /// contributes 0.
    fn expectation(&self, w: &[f64]) -> Result<Vec<f64>>;
}

impl TransitionModel for FiniteAbstraction {
    fn n_states(&self) -> usize {
        self.n_cells()
    }

    fn n_inputs(&self) -> usize {
        FiniteAbstraction::n_inputs(self)
    }

    fn expectation(&self, w: &[f64]) -> Result<Vec<f64>> {
        FiniteAbstraction::expectation(self, w)
    }
}

/// The adversary resolves against the controller: the worst row counts.
impl TransitionModel for FiniteGmdp {
    fn n_states(&self) -> usize {
        self.n_states
    }

    fn n_inputs(&self) -> usize {
        self.n_inputs
    }

    fn expectation(&self, w: &[f64]) -> Result<Vec<f64>> {
        check_dim("value vector", self.n_states, w.len())?;
        Ok((0..self.n_states * self.n_inputs)
            .into_par_iter()
            .map(|k| {
                let (s, u) = (k / self.n_inputs, k % self.n_inputs);
                (0..self.n_adversaries)
                    .map(|a| self.row(s, u, a).iter().map(|&(t, p)| p * w[t]).sum::<f64>())
                    .fold(f64::INFINITY, f64::min)
            })
            .collect())
    }
}

/// Evaluates a delta field on every cell at every input level, laid out as
/// `[cell * n_inputs + input]`.
pub fn delta_table(field: &DeltaField, abs: &FiniteAbstraction) -> Result<Vec<f64>> {
    let nu = abs.n_inputs();
    if let Some(levels) = field.input_levels() {
        if levels != nu {
            return Err(Error::DimensionMismatch {
                context: "delta field input levels",
                expected: nu,
                got: levels,
            });
        }
    }
    let per_cell: Result<Vec<Vec<f64>>> = (0..abs.n_cells())
        .into_par_iter()
        .map(|c| {
            let b = abs.grid.cell_box(c);
            Ok(field.sup_over_inputs(&b, nu)?.into_iter().map(|d| d.clamp(0.0, 1.0)).collect())
        })
        .collect();
    Ok(per_cell?.into_iter().flatten().collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViOptions {
    /// Sup-norm change below which iteration stops.
    pub tolerance: f64,
    pub max_iterations: usize,
    /// Fixed number of backups instead of iterating to a fixed point.
    pub horizon: Option<usize>,
}

impl Default for ViOptions {
    fn default() -> Self {
        ViOptions {
            tolerance: 1e-6,
            max_iterations: 100_000,
            horizon: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthesisResult {
    pub n_states: usize,
    pub n_inputs: usize,
    /// `value[q][s]`: probability bound with DFA state `q` already
    /// accounting for the label of `s`.
    pub value: Vec<Vec<f64>>,
    pub policy: Vec<Vec<u32>>,
    pub epsilon_used: f64,
    pub delta_used: f64,
    pub iterations: usize,
    pub converged: bool,
}

impl SynthesisResult {
    /// Bound from state `s` before its label has been read.
    pub fn initial_value(&self, dfa: &Dfa, labels: &[u32], s: usize) -> f64 {
        self.value[dfa.step(dfa.initial, labels[s])][s]
    }
}

/// Robust Bellman iteration on the product of a finite model with a DFA:
/// `V(s, q) = max_u clamp(E[V(s', q(s'))] - δ(s, u), 0, 1)` with `V = 1` on
/// accepting states. Ties go to the lowest input index.
pub fn robust_value_iteration<M: TransitionModel + ?Sized>(
    model: &M,
    dfa: &Dfa,
    labels: &[u32],
    delta: &[f64],
    epsilon: f64,
    opts: &ViOptions,
) -> Result<SynthesisResult> {
    let (n, nu) = (model.n_states(), model.n_inputs());
    check_dim("labels", n, labels.len())?;
    check_dim("delta table", n * nu, delta.len())?;
    dfa.validate()?;
    if labels.iter().any(|&l| l as usize >= dfa.n_letters()) {
        return Err(Error::invalid("label outside the dfa alphabet"));
    }
    let nq = dfa.n_states;
    let mut value: Vec<Vec<f64>> = (0..nq)
        .map(|q| vec![if dfa.accepting[q] { 1.0 } else { 0.0 }; n])
        .collect();
    let mut policy = vec![vec![0u32; n]; nq];
    let pending: Vec<usize> = (0..nq).filter(|&q| !dfa.is_terminal(q)).collect();
    let budget = opts.horizon.unwrap_or(opts.max_iterations);
    let mut iterations = 0;
    let mut converged = false;
    while iterations < budget {
        iterations += 1;
        let mut change: f64 = 0.0;
        let mut next = value.clone();
        for &q in &pending {
            let w: Vec<f64> = (0..n).map(|s| value[dfa.step(q, labels[s])][s]).collect();
            let ev = model.expectation(&w)?;
            let backed: Vec<(f64, u32)> = (0..n)
                .into_par_iter()
                .map(|s| {
                    let mut best = (f64::NEG_INFINITY, 0u32);
                    for u in 0..nu {
                        let k = s * nu + u;
                        let v = (ev[k] - delta[k]).clamp(0.0, 1.0);
                        if v > best.0 {
                            best = (v, u as u32);
                        }
                    }
                    best
                })
                .collect();
            for (s, (v, u)) in backed.into_iter().enumerate() {
                let old = value[q][s];
                if v < old - 1e-12 {
                    return Err(Error::invalid(format!(
                        "value iteration lost monotonicity at state {s}, dfa state {q}: {old} -> {v}"
                    )));
                }
                change = change.max((v - old).abs());
                next[q][s] = v;
                policy[q][s] = u;
            }
        }
        value = next;
        if opts.horizon.is_none() && change < opts.tolerance {
            converged = true;
            break;
        }
    }
    if opts.horizon.is_some() {
        converged = true;
    }
    Ok(SynthesisResult {
        n_states: n,
        n_inputs: nu,
        value,
        policy,
        epsilon_used: epsilon,
        delta_used: delta.iter().copied().fold(0.0, f64::max),
        iterations,
        converged,
    })
}

/// Chosen abstract input for a concrete state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlAction {
    pub input: Vec<f64>,
    pub index: usize,
    /// The concrete state mapped outside the grid and the fallback was used.
    pub fallback: bool,
}

/// Policy refined to concrete states through the relation chain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Controller {
    pub grid: GridSpec,
    pub dfa: Dfa,
    pub policy: Vec<Vec<u32>>,
    pub chain: crate::relations::RelationDesc,
    pub fallback_input: usize,
}

impl Controller {
    /// Abstract point of a concrete state.
    pub fn abstract_point(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.chain.canonical_abstract(x)
    }

    /// Input for concrete state `x` with the automaton in state `q`.
    pub fn action(&self, x: &[f64], q: usize) -> Result<ControlAction> {
        let z = self.abstract_point(x)?;
        let (index, fallback) = match self.grid.locate(&z) {
            Some(c) => (self.policy[q][c] as usize, false),
            None => (self.fallback_input, true),
        };
        Ok(ControlAction {
            input: self.grid.inputs[index].clone(),
            index,
            fallback,
        })
    }
}

/// Controller for the concrete end of `chain`. States mapping outside the
/// grid get `fallback_input`, by default the level closest to zero.
pub fn refine_controller(
    result: &SynthesisResult,
    chain: &SimRelationCert,
    abs: &FiniteAbstraction,
    dfa: &Dfa,
    fallback_input: Option<usize>,
) -> Result<Controller> {
    check_dim("policy states", abs.n_cells(), result.n_states)?;
    check_dim("policy dfa states", dfa.n_states, result.policy.len())?;
    if !chain.interface.is_identity() {
        return Err(Error::refused("only identity input interfaces are refined"));
    }
    let fallback = match fallback_input {
        Some(i) if i < abs.n_inputs() => i,
        Some(i) => return Err(Error::invalid(format!("fallback input {i} out of range"))),
        None => (0..abs.n_inputs())
            .min_by(|&a, &b| {
                let na: f64 = abs.grid.inputs[a].iter().map(|v| v * v).sum();
                let nb: f64 = abs.grid.inputs[b].iter().map(|v| v * v).sum();
                na.total_cmp(&nb)
            })
            .unwrap_or(0),
    };
    Ok(Controller {
        grid: abs.grid.clone(),
        dfa: dfa.clone(),
        policy: result.policy.clone(),
        chain: chain.relation.clone(),
        fallback_input: fallback,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn f(s: &str) -> Formula {
        parse_scltl(s).unwrap()
    }

    #[test]
    fn parses_reach_avoid() {
        assert_eq!(
            f("(P_S & !P_C) U P_T"),
            Formula::Until(
                Box::new(Formula::And(vec![Formula::atom("P_S"), Formula::NotAtom("P_C".into())])),
                Box::new(Formula::atom("P_T"))
            )
        );
        assert_eq!(f("true"), Formula::True);
        assert_eq!(f("X P"), Formula::Next(Box::new(Formula::atom("P"))));
        assert_eq!(f("a | b & c"), Formula::Or(vec![Formula::atom("a"), Formula::And(vec![Formula::atom("b"), Formula::atom("c")])]));
    }

    #[test]
    fn parse_errors_carry_positions() {
        match parse_scltl("a & !(b | c)") {
            Err(Error::Parse { position, .. }) => assert_eq!(position, 5),
            other => panic!("{other:?}"),
        }
        assert!(matches!(parse_scltl("G a"), Err(Error::Parse { position: 0, .. })));
        assert!(matches!(parse_scltl("(a U b"), Err(Error::Parse { position: 6, .. })));
        assert!(matches!(parse_scltl("a $ b"), Err(Error::Parse { position: 2, .. })));
    }

    #[test]
    fn mixed_polarity_is_refused() {
        assert!(matches!(f("a U (b & !a)").polarities(), Err(Error::Refused(_))));
        let p = f("(a & !b) U c").polarities().unwrap();
        assert_eq!(p["b"], Polarity::Negative);
        assert_eq!(p["c"], Polarity::Positive);
    }

    #[test]
    fn reach_avoid_dfa_by_hand() {
        let d = to_dfa(&f("(a & !b) U c")).unwrap();
        assert_eq!(d.n_states, 3);
        assert_eq!(d.atoms, vec!["a", "b", "c"]);
        let q0 = d.initial;
        for letter in 0..8u32 {
            let (a, b, c) = (letter & 1 != 0, letter & 2 != 0, letter & 4 != 0);
            let q = d.step(q0, letter);
            if c {
                assert!(d.accepting[q]);
            } else if a && !b {
                assert_eq!(q, q0);
            } else {
                assert!(d.rejecting[q]);
            }
        }
    }

    #[test]
    fn trivial_formula_is_one_accepting_state() {
        let d = to_dfa(&Formula::True).unwrap();
        assert_eq!(d.n_states, 1);
        assert!(d.accepting[d.initial]);
    }

    #[test]
    fn p_until_p_accepts_like_p() {
        let (a, b) = (to_dfa(&f("P U P")).unwrap(), to_dfa(&f("P")).unwrap());
        let mut pairs = vec![(a.initial, b.initial)];
        let mut seen = BTreeSet::new();
        while let Some((p, q)) = pairs.pop() {
            if !seen.insert((p, q)) {
                continue;
            }
            assert_eq!(a.accepting[p], b.accepting[q]);
            for l in 0..2 {
                pairs.push((a.step(p, l), b.step(q, l)));
            }
        }
    }

    #[test]
    fn robust_labels_shrink_and_grow() {
        let mut regions = BTreeMap::new();
        regions.insert("T".to_string(), AxisBox::new(vec![0.0], vec![1.0]).unwrap());
        regions.insert("C".to_string(), AxisBox::new(vec![0.0], vec![1.0]).unwrap());
        let map = LabelingMap::new(regions);
        let phi = f("!C U T");
        let atoms = phi.atoms();
        let outs = vec![vec![0.5], vec![1.1], vec![0.1]];
        let l = robust_labeling(&map, &phi, &atoms, &outs, 0.2).unwrap();
        // atoms sorted: C = bit 0, T = bit 1
        assert_eq!(l, vec![0b11, 0b01, 0b01]);
        let exact = robust_labeling(&map, &phi, &atoms, &outs, 0.0).unwrap();
        for (k, y) in outs.iter().enumerate() {
            assert_eq!(exact[k], map.letter(&atoms, y).unwrap());
        }
    }

    fn chain_model(p_goal: f64) -> FiniteGmdp {
        let mut m = FiniteGmdp::new(2, 1, 1, vec![vec![0.0], vec![1.0]], vec![0]).unwrap();
        m.set_row(0, 0, 0, vec![(1, p_goal)]).unwrap();
        m.set_row(1, 0, 0, vec![(1, 1.0)]).unwrap();
        m
    }

    #[test]
    fn two_state_chain_by_hand() {
        let dfa = to_dfa(&f("F g")).unwrap();
        let labels = vec![0, 1];
        let r = robust_value_iteration(&chain_model(0.9), &dfa, &labels, &[0.05, 0.05], 0.0, &ViOptions::default())
            .unwrap();
        assert!((r.initial_value(&dfa, &labels, 0) - 0.85).abs() < 1e-12);
        assert_eq!(r.initial_value(&dfa, &labels, 1), 1.0);
    }

    #[test]
    fn full_deficiency_zeroes_values() {
        let dfa = to_dfa(&f("F g")).unwrap();
        let labels = vec![0, 1];
        let r = robust_value_iteration(&chain_model(0.9), &dfa, &labels, &[1.0, 1.0], 0.0, &ViOptions::default())
            .unwrap();
        assert_eq!(r.initial_value(&dfa, &labels, 0), 0.0);
    }

    #[test]
    fn accepting_everywhere_takes_one_iteration() {
        let mut m = FiniteGmdp::new(1, 1, 1, vec![vec![0.0]], vec![0]).unwrap();
        m.set_row(0, 0, 0, vec![(0, 1.0)]).unwrap();
        let dfa = to_dfa(&Formula::True).unwrap();
        let r = robust_value_iteration(&m, &dfa, &[0], &[0.0], 0.0, &ViOptions::default()).unwrap();
        assert_eq!(r.iterations, 1);
        assert_eq!(r.initial_value(&dfa, &[0], 0), 1.0);
        // a state carrying the goal label is accepted on reading it
        let dfa = to_dfa(&f("g")).unwrap();
        let r = robust_value_iteration(&m, &dfa, &[1], &[0.0], 0.0, &ViOptions::default()).unwrap();
        assert_eq!(r.initial_value(&dfa, &[1], 0), 1.0);
    }

    #[test]
    fn adversary_takes_the_worst_row() {
        let dfa = to_dfa(&f("F g")).unwrap();
        let mut m = FiniteGmdp::new(2, 1, 2, vec![vec![0.0], vec![1.0]], vec![0]).unwrap();
        m.set_row(0, 0, 0, vec![(1, 0.9)]).unwrap();
        m.set_row(0, 0, 1, vec![(1, 0.6)]).unwrap();
        for a in 0..2 {
            m.set_row(1, 0, a, vec![(1, 1.0)]).unwrap();
        }
        let r = robust_value_iteration(&m, &dfa, &[0, 1], &[0.0, 0.0], 0.0, &ViOptions::default()).unwrap();
        assert!((r.value[dfa.initial][0] - 0.6).abs() < 1e-12);
    }
}
