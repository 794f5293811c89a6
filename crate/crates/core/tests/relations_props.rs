mod common;

use agc_core::gmdp::LinearMap;
use agc_core::relations::{
    check_proxy_instance, compose_transitive, lumping_instance, max_coupling_mass, verify_coupling, verify_ssr_finite,
    BaseRelation, ConcreteMap, DeltaField, FiniteGmdp, FiniteRelation, InterfaceDesc, LumpingSizes, RelationDesc,
    SimRelationCert, SparseDist,
};
use common::total_variation;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_dense<R: Rng>(rng: &mut R, n: usize) -> Vec<f64> {
    let w: Vec<f64> = (0..n)
        .map(|_| if rng.random_bool(0.7) { rng.random_range(0.0..1.0) } else { 0.0 })
        .collect();
    let s: f64 = w.iter().sum();
    if s == 0.0 {
        let mut e = vec![0.0; n];
        e[rng.random_range(0..n)] = 1.0;
        return e;
    }
    w.iter().map(|x| x / s).collect()
}

fn sparse(d: &[f64]) -> SparseDist {
    d.iter().enumerate().filter(|(_, p)| **p > 0.0).map(|(i, p)| (i, *p)).collect()
}

#[test]
fn identity_coupling_is_one_minus_total_variation() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..200 {
        let n = rng.random_range(1..12);
        let (p, q) = (random_dense(&mut rng, n), random_dense(&mut rng, n));
        let rel = FiniteRelation::from_fn(n, n, |i, j| i == j);
        let (mass, witness) = max_coupling_mass(&sparse(&p), &sparse(&q), &rel);
        assert!((mass - (1.0 - total_variation(&p, &q))).abs() < 1e-9);
        assert!(verify_coupling(&witness, &sparse(&p), &sparse(&q), &rel, 1.0 - mass + 1e-12).valid);
    }
}

#[test]
fn full_relation_coupling_moves_all_mass() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for _ in 0..50 {
        let (n, m) = (rng.random_range(1..8), rng.random_range(1..8));
        let p: Vec<f64> = random_dense(&mut rng, n).iter().map(|x| 0.9 * x).collect();
        let q = random_dense(&mut rng, m);
        let rel = FiniteRelation::from_fn(n, m, |_, _| true);
        let (mass, _) = max_coupling_mass(&sparse(&p), &sparse(&q), &rel);
        assert!((mass - 0.9).abs() < 1e-9);
    }
}

fn random_stochastic(seed: u64, n: usize, nu: usize) -> FiniteGmdp {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let outputs = (0..n).map(|_| vec![rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]).collect();
    let mut m = FiniteGmdp::new(n, nu, 1, outputs, vec![0]).unwrap();
    for s in 0..n {
        for u in 0..nu {
            m.set_row(s, u, 0, sparse(&random_dense(&mut rng, n))).unwrap();
        }
    }
    m
}

#[test]
fn every_model_simulates_itself_exactly() {
    for seed in 0..50 {
        let n = 2 + seed as usize % 7;
        let m = random_stochastic(seed, n, 2);
        let rel = FiniteRelation::from_fn(n, n, |i, j| i == j);
        let r = verify_ssr_finite(&m, &m, &rel, &[0, 1], 0.0, 0.0).unwrap();
        assert!(r.holds, "{:?}", r.failures);
        assert!(r.required_delta < 1e-12);
        assert_eq!(r.required_epsilon, 0.0);
    }
}

#[test]
fn perturbed_model_needs_its_total_variation() {
    for seed in 0..20 {
        let n = 3 + seed as usize % 4;
        let a = random_stochastic(seed, n, 1);
        let b = random_stochastic(seed + 1000, n, 1);
        let mut b2 = FiniteGmdp::new(n, 1, 1, a.outputs.clone(), vec![0]).unwrap();
        for s in 0..n {
            b2.set_row(s, 0, 0, b.row(s, 0, 0).clone()).unwrap();
        }
        let rel = FiniteRelation::from_fn(n, n, |i, j| i == j);
        let r = verify_ssr_finite(&a, &b2, &rel, &[0], 0.0, 1.0).unwrap();
        let dense = |row: &SparseDist| {
            let mut d = vec![0.0; n];
            for &(t, p) in row {
                d[t] = p;
            }
            d
        };
        let worst = (0..n)
            .map(|s| total_variation(&dense(a.row(s, 0, 0)), &dense(b.row(s, 0, 0))))
            .fold(0.0, f64::max);
        assert!((r.required_delta - worst).abs() < 1e-9);
    }
}

#[test]
fn proxy_consequent_holds_on_lumping_instances() {
    for seed in 0..100 {
        let sz = LumpingSizes {
            reduced_agent: 2 + seed as usize % 3,
            agent_copies: 1 + seed as usize % 2,
            surrogate: 2 + (seed as usize / 3) % 3,
            env_copies: 1 + (seed as usize / 2) % 3,
            inputs: 1 + seed as usize % 3,
            adversaries: 1 + (seed as usize / 5) % 3,
        };
        let inst = lumping_instance(seed, sz).unwrap();
        let c = check_proxy_instance(&inst).unwrap();
        assert!(c.behavioral_inclusion && c.antecedent_holds && c.consequent_holds, "seed {seed}: {c:?}");
        assert!(c.consequent_required_delta <= c.delta + 1e-9);
    }
}

fn cert(name_abs: &str, name_conc: &str, eps: f64, delta: f64) -> SimRelationCert {
    SimRelationCert {
        abstract_system: name_abs.into(),
        concrete_system: name_conc.into(),
        epsilon: eps,
        delta: DeltaField::Scalar(delta),
        relation: RelationDesc::Simple {
            base: BaseRelation::Equality,
            concrete_map: ConcreteMap::Linear(LinearMap::Identity(2)),
        },
        interface: InterfaceDesc::Identity,
        uniform_over_adversaries: true,
        provenance: Vec::new(),
    }
}

#[test]
fn composition_rejects_mismatched_links() {
    let a = cert("B", "A", 0.1, 0.1);
    let b = cert("C", "X", 0.1, 0.1);
    assert!(compose_transitive(&[a, b]).is_err());
    assert!(compose_transitive(&[]).is_err());
}

proptest! {
    #[test]
    fn composition_is_associative(
        e in proptest::collection::vec(0.0f64..0.5, 3),
        d in proptest::collection::vec(0.0f64..0.5, 3),
    ) {
        let (a, b, c) = (cert("B", "A", e[0], d[0]), cert("C", "B", e[1], d[1]), cert("D", "C", e[2], d[2]));
        let flat = compose_transitive(&[a.clone(), b.clone(), c.clone()]).unwrap();
        let left = compose_transitive(&[compose_transitive(&[a.clone(), b.clone()]).unwrap(), c.clone()]).unwrap();
        let right = compose_transitive(&[a, compose_transitive(&[b, c]).unwrap()]).unwrap();
        for x in [&left, &right] {
            prop_assert!((x.epsilon - flat.epsilon).abs() < 1e-15);
            prop_assert!((x.delta_max() - flat.delta_max()).abs() < 1e-15);
            prop_assert_eq!(&x.abstract_system, "D");
            prop_assert_eq!(&x.concrete_system, "A");
        }
        prop_assert!((flat.delta_max() - (d[0] + d[1] + d[2]).min(1.0)).abs() < 1e-15);
    }
}
