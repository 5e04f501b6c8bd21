//! Independent reference implementations used as test oracles.
#![allow(dead_code)]

use std::collections::VecDeque;

use hetserve::costmodel::{capacity, ProfileParams};
use hetserve::deploysearch::{init_uniform, Instance};
use hetserve::switchplan::{Fragment, LinkLoad};
use hetserve::workload::SpanSeries;
use hetserve::{
    ClusterSpec, Deployment, ModelSpec, ReplicaConfig, TraceRecord, TraceSpan, WorkloadType, GB,
};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Edmonds-Karp over a dense residual matrix.
pub fn edmonds_karp(n: usize, s: usize, t: usize, edges: &[(usize, usize, u64)]) -> u64 {
    let mut res = vec![vec![0u128; n]; n];
    for &(u, v, c) in edges {
        res[u][v] += u128::from(c);
    }
    let mut total = 0u128;
    loop {
        let mut prev = vec![usize::MAX; n];
        prev[s] = s;
        let mut q = VecDeque::from([s]);
        while let Some(u) = q.pop_front() {
            for v in 0..n {
                if prev[v] == usize::MAX && res[u][v] > 0 {
                    prev[v] = u;
                    q.push_back(v);
                }
            }
        }
        if s == t || prev[t] == usize::MAX {
            break;
        }
        let mut push = u128::MAX;
        let mut v = t;
        while v != s {
            push = push.min(res[prev[v]][v]);
            v = prev[v];
        }
        let mut v = t;
        while v != s {
            res[prev[v]][v] -= push;
            res[v][prev[v]] += push;
            v = prev[v];
        }
        total += push;
    }
    total as u64
}

/// Exact check of `sum_j x_j / n_j <= 1` by cross-multiplication.
pub fn budget_ok(x: &[u64], n: &[u64]) -> bool {
    if x.iter().zip(n).any(|(&xj, &nj)| xj > 0 && nj == 0) {
        return false;
    }
    let p: u128 = n
        .iter()
        .filter(|&&v| v > 0)
        .map(|&v| u128::from(v))
        .product();
    let load: u128 = x
        .iter()
        .zip(n)
        .filter(|(_, &nj)| nj > 0)
        .map(|(&xj, &nj)| u128::from(xj) * (p / u128::from(nj)))
        .sum();
    load <= p
}

/// Brute-force integer optimum of the assignment program.
///
/// Enumerates every feasible row for all replicas but the last; the last
/// replica takes the remaining demand cheapest-first, which is optimal for a
/// single budget with unit values.
pub fn brute_force_optimum(demand: &[u64], n: &[Vec<u64>], e: &[Vec<u64>]) -> u64 {
    fn rows(demand: &[u64], n: &[u64], e: &[u64]) -> Vec<Vec<u64>> {
        let j = demand.len();
        let caps: Vec<u64> = (0..j).map(|t| e[t].min(n[t]).min(demand[t])).collect();
        let mut out = Vec::new();
        let mut cur = vec![0u64; j];
        fn rec(t: usize, caps: &[u64], n: &[u64], cur: &mut Vec<u64>, out: &mut Vec<Vec<u64>>) {
            if t == caps.len() {
                out.push(cur.clone());
                return;
            }
            for v in 0..=caps[t] {
                cur[t] = v;
                if !budget_ok(cur, n) {
                    break;
                }
                rec(t + 1, caps, n, cur, out);
            }
            cur[t] = 0;
        }
        rec(0, &caps, n, &mut cur, &mut out);
        out
    }
    fn greedy_last(left: &[u64], n: &[u64], e: &[u64]) -> u64 {
        let mut order: Vec<usize> = (0..left.len()).filter(|&t| n[t] > 0).collect();
        order.sort_by(|&a, &b| n[b].cmp(&n[a]));
        let mut x = vec![0u64; left.len()];
        let mut total = 0;
        for t in order {
            let cap = e[t].min(n[t]).min(left[t]);
            while x[t] < cap {
                x[t] += 1;
                if !budget_ok(&x, n) {
                    x[t] -= 1;
                    break;
                }
            }
            total += x[t];
        }
        total
    }
    fn go(k: usize, left: &mut Vec<u64>, n: &[Vec<u64>], e: &[Vec<u64>]) -> u64 {
        if k + 1 == n.len() {
            return greedy_last(left, &n[k], &e[k]);
        }
        let mut best = 0;
        for row in rows(left, &n[k], &e[k]) {
            let here: u64 = row.iter().sum();
            for (l, r) in left.iter_mut().zip(&row) {
                *l -= r;
            }
            best = best.max(here + go(k + 1, left, n, e));
            for (l, r) in left.iter_mut().zip(&row) {
                *l += r;
            }
        }
        best
    }
    if n.is_empty() {
        return 0;
    }
    go(0, &mut demand.to_vec(), n, e)
}

/// A seeded scheduling instance on a 2 x 4 cluster of 80 GB devices.
pub struct SearchFixture {
    pub cluster: ClusterSpec,
    pub model: ModelSpec,
    pub params: ProfileParams,
    pub types: Vec<WorkloadType>,
    pub span: TraceSpan,
}

impl SearchFixture {
    pub fn instance(&self) -> Instance<'_> {
        Instance {
            cluster: &self.cluster,
            model: &self.model,
            params: &self.params,
            types: &self.types,
            span_seconds: 60.0,
        }
    }
}

pub fn dense_model(gb: u64) -> ModelSpec {
    ModelSpec {
        name: format!("dense-{gb}gb"),
        param_bytes: gb * GB,
        num_layers: 48,
        bytes_per_token_kv: 400_000,
        flops_per_token_prefill: 2 * gb,
        min_mem_bytes: gb * GB,
    }
}

/// Two types (short and long outputs) with demand between 0.3x and 1.6x
/// of what the uniform deployment could serve of each type alone.
pub fn search_fixture(seed: u64, machines: usize) -> SearchFixture {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cluster = ClusterSpec::uniform(machines, 4, 80 * GB, 400e9, 200e9);
    let gb = [30u64, 60, 140][rng.random_range(0..3)];
    let model = dense_model(gb);
    let params = ProfileParams::default();
    let types = vec![
        WorkloadType::new(0, rng.random_range(200..2000), rng.random_range(10..200)),
        WorkloadType::new(1, rng.random_range(100..1000), rng.random_range(500..3000)),
    ];
    let init = init_uniform(&cluster, &model).unwrap();
    let counts = types
        .iter()
        .map(|t| {
            let per: u64 = init
                .replicas
                .iter()
                .map(|r| capacity(r, &model, t, 60.0, &params, &cluster).unwrap())
                .sum();
            (per as f64 * rng.random_range(0.3..1.6)) as u64
        })
        .collect();
    SearchFixture {
        cluster,
        model,
        params,
        types,
        span: TraceSpan::new(0, counts),
    }
}

/// Random directed network with up to 12 nodes; source 0, sink `n - 1`.
pub fn random_network(rng: &mut ChaCha8Rng) -> (usize, Vec<(usize, usize, u64)>) {
    let n = rng.random_range(2..=12);
    let m = rng.random_range(0..=n * 3);
    let edges = (0..m)
        .map(|_| {
            let u = rng.random_range(0..n);
            let v = rng.random_range(0..n);
            (u, v, rng.random_range(0..=50))
        })
        .filter(|(u, v, _)| u != v)
        .collect();
    (n, edges)
}

/// Random assignment instance with `R, J <= 3` and demand up to 60.
pub fn random_instance(rng: &mut ChaCha8Rng) -> (Vec<u64>, Vec<Vec<u64>>, Vec<Vec<u64>>) {
    let r = rng.random_range(1..=3);
    let j = rng.random_range(1..=3);
    let demand = (0..j).map(|_| rng.random_range(0..=60)).collect();
    let mut n = vec![vec![0; j]; r];
    let mut e = vec![vec![0; j]; r];
    for k in 0..r {
        for t in 0..j {
            if rng.random_bool(0.1) {
                continue;
            }
            n[k][t] = rng.random_range(1..=24);
            e[k][t] = if rng.random_bool(0.3) {
                rng.random_range(0..=n[k][t])
            } else {
                n[k][t]
            };
        }
    }
    (demand, n, e)
}

/// A model that is only its parameter bytes.
pub fn flat_model(bytes: u64) -> ModelSpec {
    ModelSpec {
        name: "m".into(),
        param_bytes: bytes,
        num_layers: 8,
        bytes_per_token_kv: 1000,
        flops_per_token_prefill: 1,
        min_mem_bytes: bytes,
    }
}

/// Random valid deployment covering every device of `cluster`.
pub fn random_deployment(rng: &mut ChaCha8Rng, cluster: &ClusterSpec) -> Deployment {
    let mut devs = cluster.devices();
    if rng.random_bool(0.3) {
        devs.shuffle(rng);
    }
    let mut replicas = Vec::new();
    let mut i = 0;
    while i < devs.len() {
        let sizes: Vec<usize> = [1, 2, 4]
            .into_iter()
            .filter(|&s| i + s <= devs.len())
            .collect();
        let size = sizes[rng.random_range(0..sizes.len())];
        let group = devs[i..i + size].to_vec();
        let tp = [1u32, 2, 4][rng.random_range(0..3)].min(size as u32);
        let tp = if size as u32 % tp == 0 { tp } else { 1 };
        let cfg = ReplicaConfig::new(group.clone(), tp, size as u32 / tp);
        replicas.push(if cfg.is_valid(cluster) {
            cfg
        } else {
            ReplicaConfig::new(group, 1, size as u32)
        });
        i += size;
    }
    Deployment::new(replicas)
}

/// Smallest achievable maximum link time over every choice of holder per
/// fragment, by enumeration.
pub fn min_max_link_time(frags: &[Fragment], cluster: &ClusterSpec) -> f64 {
    let mut best = f64::INFINITY;
    let mut choice = vec![0usize; frags.len()];
    loop {
        let mut load = LinkLoad::new();
        for (f, &c) in frags.iter().zip(&choice) {
            *load.entry((f.holders[c], f.target)).or_default() += f.range.len();
        }
        let t = load
            .iter()
            .map(|(&(s, d), &b)| b as f64 / cluster.link_bw(s, d))
            .fold(0.0, f64::max);
        best = best.min(t);
        let mut i = 0;
        while i < choice.len() {
            choice[i] += 1;
            if choice[i] < frags[i].holders.len() {
                break;
            }
            choice[i] = 0;
            i += 1;
        }
        if i == choice.len() {
            return best;
        }
    }
}

pub fn jittered(rng: &mut ChaCha8Rng, centre: (f64, f64), n: usize, t0: u64) -> Vec<TraceRecord> {
    (0..n)
        .map(|i| TraceRecord {
            arrival_ms: t0 + i as u64 * 37,
            input_len: (centre.0 * rng.random_range(0.95..=1.05)).round() as u64,
            output_len: (centre.1 * rng.random_range(0.95..=1.05)).round() as u64,
        })
        .collect()
}

/// Two well-separated blobs and their true labels.
pub fn blobs(seed: u64) -> (Vec<TraceRecord>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a = jittered(&mut rng, (100.0, 50.0), 300, 0);
    let b = jittered(&mut rng, (2000.0, 4000.0), 200, 5);
    let labels = std::iter::repeat_n(0, a.len())
        .chain(std::iter::repeat_n(1, b.len()))
        .collect();
    (a.into_iter().chain(b).collect(), labels)
}

/// Two noisy sinusoids with a 120-span period.
pub fn sinusoid_series(seed: u64, len: usize) -> SpanSeries {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let spans = (0..len)
        .map(|i| {
            let t = i as f64;
            let counts = (0..2)
                .map(|j| {
                    let base = 400.0 + 250.0 * (t * std::f64::consts::TAU / 120.0 + j as f64).sin();
                    (base + rng.random_range(-40.0..40.0)).max(0.0).round() as u64
                })
                .collect();
            TraceSpan::new(i as u64, counts)
        })
        .collect();
    SpanSeries {
        spans,
        span_seconds: 60.0,
    }
}
