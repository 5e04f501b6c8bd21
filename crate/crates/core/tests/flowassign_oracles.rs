mod common;

use hetserve::costmodel::CapacityTable;
use hetserve::flowassign::{
    build_network, max_flow, normalize, push_relabel, solve, AssignmentMatrix,
};
use hetserve::TraceSpan;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn preflow_push_matches_augmenting_paths() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..500 {
        let (n, edges) = common::random_network(&mut rng);
        let t = n - 1;
        let got = push_relabel(n, 0, t, &edges);
        assert_eq!(
            got.value,
            common::edmonds_karp(n, 0, t, &edges),
            "{edges:?}"
        );
        // conservation and capacity
        let mut balance = vec![0i128; n];
        for (&(u, v, c), &f) in edges.iter().zip(&got.edge_flow) {
            assert!(f <= c);
            balance[u] -= i128::from(f);
            balance[v] += i128::from(f);
        }
        for (node, b) in balance.iter().enumerate() {
            if node != 0 && node != t {
                assert_eq!(*b, 0);
            }
        }
        assert_eq!(balance[t], i128::from(got.value));
    }
}

#[test]
fn assignment_is_optimal_on_small_instances() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..200 {
        let (demand, n, e) = common::random_instance(&mut rng);
        let table = CapacityTable::from_rows(n.clone(), e.clone());
        let a = solve(&TraceSpan::new(0, demand.clone()), &table).unwrap();
        let opt = common::brute_force_optimum(&demand, &n, &e);
        assert_eq!(
            a.objective, opt,
            "demand {demand:?} n {n:?} e {e:?} x {:?}",
            a.x
        );
    }
}

fn check_constraints(a: &AssignmentMatrix, demand: &[u64], n: &[Vec<u64>], e: &[Vec<u64>]) {
    for (j, &lam) in demand.iter().enumerate() {
        let served: u64 = a.x.iter().map(|row| row[j]).sum();
        assert!(served <= lam, "C1 type {j}");
    }
    for (k, row) in a.x.iter().enumerate() {
        for (j, &x) in row.iter().enumerate() {
            assert!(x <= e[k][j], "C2 ({k},{j})");
        }
        assert!(
            common::budget_ok(row, &n[k]),
            "C3 replica {k}: {row:?} vs {:?}",
            n[k]
        );
    }
    assert_eq!(a.objective, a.x.iter().flatten().sum::<u64>());
}

fn instance_strategy() -> impl Strategy<Value = (Vec<u64>, Vec<Vec<u64>>, Vec<Vec<u64>>)> {
    (1usize..=6, 1usize..=4).prop_flat_map(|(r, j)| {
        (
            prop::collection::vec(0u64..=3000, j),
            prop::collection::vec(prop::collection::vec((0u64..=2000, 0u64..=100), j), r),
        )
            .prop_map(|(demand, cells)| {
                let n: Vec<Vec<u64>> = cells
                    .iter()
                    .map(|row| row.iter().map(|c| c.0).collect())
                    .collect();
                let e = cells
                    .iter()
                    .map(|row| row.iter().map(|&(nv, pct)| nv * pct / 100).collect())
                    .collect();
                (demand, n, e)
            })
    })
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 1000, ..ProptestConfig::default() })]

    #[test]
    fn solved_assignments_satisfy_constraints((demand, n, e) in instance_strategy()) {
        let table = CapacityTable::from_rows(n.clone(), e.clone());
        let a = solve(&TraceSpan::new(0, demand.clone()), &table).unwrap();
        check_constraints(&a, &demand, &n, &e);
        prop_assert!(a.violation(&demand, &table).is_none());
    }

    #[test]
    fn network_flow_is_conserved((demand, n, e) in instance_strategy()) {
        let table = CapacityTable::from_rows(n, e);
        let net = build_network(&TraceSpan::new(0, demand), &table).unwrap();
        let flow = max_flow(&net);
        let edges: Vec<_> = net.edges.iter().map(|e| (e.from, e.to, e.capacity)).collect();
        prop_assert_eq!(flow.value, common::edmonds_karp(net.nodes.len(), net.source, net.sink, &edges));
        // determinism
        prop_assert_eq!(max_flow(&net), flow);
    }
}

fn lcm_by_factorization(values: &[u64]) -> u64 {
    let mut exps: std::collections::BTreeMap<u64, u32> = Default::default();
    for &v in values {
        let mut v = v;
        let mut p = 2;
        while v > 1 {
            let mut c = 0;
            while v % p == 0 {
                v /= p;
                c += 1;
            }
            if c > 0 {
                let entry = exps.entry(p).or_default();
                *entry = (*entry).max(c);
            }
            p += 1;
        }
    }
    exps.iter().map(|(p, e)| p.pow(*e)).product()
}

#[test]
fn lcm_agrees_with_prime_factorization() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..300 {
        let len = rng.random_range(1..=4);
        let row: Vec<u64> = (0..len).map(|_| rng.random_range(1..=120)).collect();
        let norm = normalize(&row).unwrap();
        assert_eq!(norm.m, lcm_by_factorization(&row));
        for (u, &v) in norm.units.iter().zip(&row) {
            assert_eq!(u.unwrap() * v, norm.m);
        }
    }
    assert_eq!(lcm_by_factorization(&[12, 18, 30]), 180);
}

/// Minimum span (in hundredths of a second) over which the solver serves
/// the whole demand, for per-second rates.
fn min_makespan_centis(demand: &[u64], rates: &[Vec<u64>]) -> u64 {
    let served_all = |centis: u64| {
        let n: Vec<Vec<u64>> = rates
            .iter()
            .map(|row| row.iter().map(|&r| r * centis / 100).collect())
            .collect();
        let table = CapacityTable::from_rows(n.clone(), n);
        let a = solve(&TraceSpan::new(0, demand.to_vec()), &table).unwrap();
        a.objective == demand.iter().sum::<u64>()
    };
    let (mut lo, mut hi) = (0u64, 10_000u64);
    while lo + 1 < hi {
        let mid = (lo + hi) / 2;
        if served_all(mid) {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    hi
}

#[test]
fn two_replica_split_example() {
    // lambda = (100, 50); two replicas each rated 10/s and 5/s. Sending
    // type 1 to the first replica and type 2 to the second is feasible and
    // finishes in max(100/10, 50/5) seconds.
    let demand = [100, 50];
    let span = 10u64;
    let n = vec![vec![10 * span, 5 * span]; 2];
    let table = CapacityTable::from_rows(n.clone(), n.clone());
    let split = AssignmentMatrix::new(vec![vec![100, 0], vec![0, 50]]);
    assert!(split.violation(&demand, &table).is_none());
    let bound = f64::max(100.0 / 10.0, 50.0 / 5.0);
    assert_eq!(bound, 10.0);
    // a single replica running the whole mix needs 100/10 + 50/5 = 20 s
    assert_eq!(100.0 / 10.0 + 50.0 / 5.0, 20.0);
    assert_eq!(
        min_makespan_centis(&demand, &n.iter().map(|_| vec![10, 5]).collect::<Vec<_>>()),
        1000
    );
}

#[test]
fn mixed_deployment_finishes_no_later() {
    let demand = [100, 50];
    let case1 = min_makespan_centis(&demand, &[vec![10, 5], vec![10, 5]]);
    let rates2 = [vec![10, 5], vec![5, 3], vec![5, 3]];
    let optimized = min_makespan_centis(&demand, &rates2);
    // hand assignment: type 1 on replica 1, type 2 split across 2 and 3
    let hand = f64::max(100.0 / 10.0, 25.0 / 3.0);
    assert!(
        optimized as f64 / 100.0 <= hand + 1e-9,
        "{optimized} vs {hand}"
    );
    assert!(hand <= case1 as f64 / 100.0 + 1e-9);
    assert!(optimized < case1);
}
