//! Independent oracles shared by the integration tests and the acceptance
//! target. Nothing here calls into the numerical routines under test.

#![allow(dead_code)]

use agc_core::relations::FiniteGmdp;
use agc_core::synthesis::Dfa;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn gauss_density(x: f64, mean: f64, sd: f64) -> f64 {
    let z = (x - mean) / sd;
    (-0.5 * z * z).exp() / (sd * (2.0 * std::f64::consts::PI).sqrt())
}

/// Composite Simpson rule with `n` (even) panels.
pub fn simpson(f: impl Fn(f64) -> f64, lo: f64, hi: f64, n: usize) -> f64 {
    let n = n + n % 2;
    let h = (hi - lo) / n as f64;
    let mut s = f(lo) + f(hi);
    for k in 1..n {
        s += f(lo + k as f64 * h) * if k % 2 == 1 { 4.0 } else { 2.0 };
    }
    s * h / 3.0
}

/// Mass of `N(mean, sd²)` on `[lo, hi]` by quadrature of the density.
pub fn normal_mass_quadrature(mean: f64, sd: f64, lo: f64, hi: f64) -> f64 {
    let lo = lo.max(mean - 12.0 * sd);
    let hi = hi.min(mean + 12.0 * sd);
    if lo >= hi {
        return 0.0;
    }
    let panels = (((hi - lo) / sd) * 400.0).ceil().max(200.0) as usize;
    simpson(|x| gauss_density(x, mean, sd), lo, hi, panels)
}

/// `1 − ∫ min(N(0, σ²), N(c, σ²))` by quadrature.
pub fn overlap_deficiency(shift: f64, sd: f64) -> f64 {
    let lo = shift.min(0.0) - 12.0 * sd;
    let hi = shift.max(0.0) + 12.0 * sd;
    let overlap = simpson(
        |x| gauss_density(x, 0.0, sd).min(gauss_density(x, shift, sd)),
        lo,
        hi,
        200_000,
    );
    1.0 - overlap
}

/// Total variation of two distributions on `0..n`.
pub fn total_variation(p: &[f64], q: &[f64]) -> f64 {
    0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>()
}

/// Random sub-stochastic finite model with random letters over 3 atoms.
pub fn random_product(seed: u64, n: usize, nu: usize) -> (FiniteGmdp, Vec<u32>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut m = FiniteGmdp::new(n, nu, 1, vec![vec![0.0]; n], vec![0]).unwrap();
    for s in 0..n {
        for u in 0..nu {
            let k = rng.random_range(1..=n.min(4));
            let mut succ: Vec<usize> = (0..n).collect();
            for i in 0..k {
                let j = rng.random_range(i..n);
                succ.swap(i, j);
            }
            let raw: Vec<f64> = (0..k).map(|_| rng.random_range(0.05..1.0)).collect();
            let total: f64 = raw.iter().sum();
            let mass = rng.random_range(0.7..=1.0);
            let row = succ[..k].iter().zip(&raw).map(|(&t, w)| (t, mass * w / total)).collect();
            m.set_row(s, u, 0, row).unwrap();
        }
    }
    let labels = (0..n).map(|_| rng.random_range(0..8u32)).collect();
    (m, labels)
}

/// Dense Gaussian elimination with partial pivoting.
pub fn solve(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Vec<f64> {
    let n = b.len();
    for col in 0..n {
        let piv = (col..n)
            .max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))
            .unwrap();
        a.swap(col, piv);
        b.swap(col, piv);
        let d = a[col][col];
        assert!(d.abs() > 1e-14, "singular system");
        for r in col + 1..n {
            let f = a[r][col] / d;
            if f != 0.0 {
                for c in col..n {
                    a[r][c] -= f * a[col][c];
                }
                b[r] -= f * b[col];
            }
        }
    }
    let mut x = vec![0.0; n];
    for r in (0..n).rev() {
        let s: f64 = (r + 1..n).map(|c| a[r][c] * x[c]).sum();
        x[r] = (b[r] - s) / a[r][r];
    }
    x
}

/// Product of a finite model with a DFA, restricted to pending states.
pub struct Product {
    /// `(state, dfa state)` of each pending product state.
    pub states: Vec<(usize, usize)>,
    /// `moves[i][u]`: pending successors with probabilities, plus the
    /// probability of moving straight into acceptance.
    pub moves: Vec<Vec<(Vec<(usize, f64)>, f64)>>,
    pub nu: usize,
}

pub fn product(m: &FiniteGmdp, dfa: &Dfa, labels: &[u32]) -> Product {
    let pending: Vec<usize> = (0..dfa.n_states).filter(|&q| !dfa.accepting[q] && !dfa.rejecting[q]).collect();
    let mut states = Vec::new();
    for &q in &pending {
        for s in 0..m.n_states {
            states.push((s, q));
        }
    }
    let index = |s: usize, q: usize| states.iter().position(|&x| x == (s, q));
    let mut moves = Vec::new();
    for &(s, q) in &states {
        let mut per_u = Vec::new();
        for u in 0..m.n_inputs {
            let mut succ = Vec::new();
            let mut reward = 0.0;
            for &(t, p) in m.row(s, u, 0) {
                let q2 = dfa.step(q, labels[t]);
                if dfa.accepting[q2] {
                    reward += p;
                } else if !dfa.rejecting[q2] {
                    succ.push((index(t, q2).unwrap(), p));
                }
            }
            per_u.push((succ, reward));
        }
        moves.push(per_u);
    }
    Product {
        states,
        moves,
        nu: m.n_inputs,
    }
}

/// Exact reach probability of a stationary policy.
pub fn evaluate_policy(p: &Product, policy: &[usize]) -> Vec<f64> {
    let n = p.states.len();
    // States that can reach a rewarding move under the policy.
    let mut live = vec![false; n];
    loop {
        let mut changed = false;
        for i in 0..n {
            if live[i] {
                continue;
            }
            let (succ, r) = &p.moves[i][policy[i]];
            if *r > 0.0 || succ.iter().any(|&(j, pr)| pr > 0.0 && live[j]) {
                live[i] = true;
                changed = true;
            }
        }
        if !changed {
            break;
        }
    }
    let idx: Vec<usize> = (0..n).filter(|&i| live[i]).collect();
    let pos = |i: usize| idx.iter().position(|&k| k == i);
    let k = idx.len();
    let mut a = vec![vec![0.0; k]; k];
    let mut b = vec![0.0; k];
    for (r, &i) in idx.iter().enumerate() {
        a[r][r] = 1.0;
        let (succ, rew) = &p.moves[i][policy[i]];
        b[r] = *rew;
        for &(j, pr) in succ {
            if let Some(c) = pos(j) {
                a[r][c] -= pr;
            }
        }
    }
    let x = if k > 0 { solve(a, b) } else { Vec::new() };
    let mut v = vec![0.0; n];
    for (r, &i) in idx.iter().enumerate() {
        v[i] = x[r];
    }
    v
}

/// Pointwise maximum over every stationary deterministic policy.
pub fn exhaustive_values(p: &Product) -> Vec<f64> {
    let n = p.states.len();
    let total = (p.nu as u64).pow(n as u32);
    assert!(total <= 2_000_000, "too many policies to enumerate");
    let mut best = vec![0.0f64; n];
    let mut policy = vec![0usize; n];
    for code in 0..total {
        let mut c = code;
        for slot in policy.iter_mut() {
            *slot = (c % p.nu as u64) as usize;
            c /= p.nu as u64;
        }
        let v = evaluate_policy(p, &policy);
        for (b, x) in best.iter_mut().zip(v) {
            *b = b.max(x);
        }
    }
    best
}

/// Policy iteration from an attractor policy, switching only on strict
/// improvement.
pub fn policy_iteration_values(p: &Product) -> Vec<f64> {
    let n = p.states.len();
    // Attractor layers towards acceptance.
    let mut layer = vec![usize::MAX; n];
    let mut policy = vec![0usize; n];
    let mut k = 0;
    loop {
        let mut changed = false;
        let snapshot = layer.clone();
        for i in 0..n {
            if snapshot[i] != usize::MAX {
                continue;
            }
            for u in 0..p.nu {
                let (succ, r) = &p.moves[i][u];
                if *r > 0.0 || succ.iter().any(|&(j, pr)| pr > 0.0 && snapshot[j] < k + 1 && snapshot[j] != usize::MAX) {
                    layer[i] = k + 1;
                    policy[i] = u;
                    changed = true;
                    break;
                }
            }
        }
        k += 1;
        if !changed {
            break;
        }
    }
    loop {
        let v = evaluate_policy(p, &policy);
        let mut switched = false;
        for i in 0..n {
            let q = |u: usize| {
                let (succ, r) = &p.moves[i][u];
                r + succ.iter().map(|&(j, pr)| pr * v[j]).sum::<f64>()
            };
            let cur = q(policy[i]);
            let (bu, bq) = (0..p.nu).map(|u| (u, q(u))).fold((policy[i], cur), |a, b| if b.1 > a.1 + 1e-13 { b } else { a });
            if bq > cur + 1e-13 {
                policy[i] = bu;
                switched = true;
            }
        }
        if !switched {
            return v;
        }
    }
}
