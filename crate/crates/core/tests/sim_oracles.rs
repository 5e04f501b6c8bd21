use hetserve::costmodel::ProfileParams;
use hetserve::flowassign::AssignmentMatrix;
use hetserve::sim::*;
use hetserve::switchplan::{LinkLoad, SwitchPlan};
use hetserve::*;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Fixture {
    cluster: ClusterSpec,
    model: ModelSpec,
    params: ProfileParams,
    types: Vec<WorkloadType>,
}

impl Fixture {
    fn new(devices: usize) -> Self {
        Fixture {
            cluster: ClusterSpec::uniform(1, devices, 80 * GB, 400e9, 200e9),
            model: ModelSpec {
                name: "dense-60gb".into(),
                param_bytes: 60 * GB,
                num_layers: 48,
                bytes_per_token_kv: 400_000,
                flops_per_token_prefill: 120,
                min_mem_bytes: 60 * GB,
            },
            params: ProfileParams::default(),
            types: vec![
                WorkloadType::new(0, 1200, 30),
                WorkloadType::new(1, 400, 2500),
            ],
        }
    }

    fn ctx(&self) -> SimContext<'_> {
        SimContext {
            model: &self.model,
            params: &self.params,
            cluster: &self.cluster,
            types: &self.types,
            span_seconds: 60.0,
        }
    }
}

fn plan(est_seconds: f64) -> SwitchPlan {
    SwitchPlan {
        transfers: Vec::new(),
        link_load: LinkLoad::new(),
        est_seconds,
    }
}

fn entry(
    start_span: u64,
    replicas: Vec<ReplicaConfig>,
    x: Vec<Vec<u64>>,
    est: f64,
) -> TimelineEntry {
    TimelineEntry {
        start_span,
        deployment: Deployment::new(replicas),
        assignment: AssignmentMatrix::new(x),
        switch: plan(est),
    }
}

fn requests(seed: u64, count: usize, spans: u64) -> Vec<SimRequest> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count as u64)
        .map(|id| {
            let type_id = usize::from(rng.random_bool(0.3));
            let (i, o) = if type_id == 0 {
                (1200, 30)
            } else {
                (400, 2500)
            };
            SimRequest {
                id,
                arrival_ms: rng.random_range(0..spans * 60_000),
                input_len: rng.random_range(i * 9 / 10..=i * 11 / 10),
                output_len: rng.random_range(o * 9 / 10..=o * 11 / 10),
                type_id,
            }
        })
        .collect()
}

/// Two tp1 replicas, then one tp2 replica from span 1 on.
fn switching_timeline(est: f64) -> StrategyTimeline {
    StrategyTimeline {
        entries: vec![
            entry(
                0,
                vec![
                    ReplicaConfig::new(vec![0], 1, 1),
                    ReplicaConfig::new(vec![1], 1, 1),
                ],
                vec![vec![200, 5], vec![200, 5]],
                0.0,
            ),
            entry(
                1,
                vec![ReplicaConfig::new(vec![0, 1], 2, 1)],
                vec![vec![400, 20]],
                est,
            ),
        ],
    }
}

#[test]
fn one_request_latency_is_its_service_time() {
    let f = Fixture::new(1);
    let t = StrategyTimeline {
        entries: vec![entry(
            0,
            vec![ReplicaConfig::new(vec![0], 1, 1)],
            vec![vec![1, 0]],
            0.0,
        )],
    };
    let r = SimRequest {
        id: 0,
        arrival_ms: 1500,
        input_len: 1000,
        output_len: 200,
        type_id: 0,
    };
    let sim = run(&[r], &t, f.ctx()).unwrap();
    // tp = pp = 1: in * L * prefill + out * L * decode
    let p = &f.params;
    let service = 1000.0 * 48.0 * p.prefill_coeff + 200.0 * 48.0 * p.decode_coeff;
    let o = sim.outcomes[0];
    assert!(
        (o.latency - service).abs() < 2e-6,
        "{} vs {service}",
        o.latency
    );
    assert_eq!(o.start, 1.5);
    assert_eq!(sim.report.throughput, 1.0 / 60.0);
    assert!(sim.report.percentiles().iter().all(|&v| v == o.latency));
}

#[test]
fn identical_runs_are_byte_identical() {
    let f = Fixture::new(2);
    let reqs = requests(3, 800, 3);
    let t = switching_timeline(4.0);
    let a = serde_json::to_string(&run(&reqs, &t, f.ctx()).unwrap()).unwrap();
    let b = serde_json::to_string(&run(&reqs, &t, f.ctx()).unwrap()).unwrap();
    assert_eq!(a, b);
}

#[test]
fn causality_and_downtime() {
    let f = Fixture::new(2);
    let reqs = requests(11, 900, 3);
    let est = 7.5;
    let sim = run(&reqs, &switching_timeline(est), f.ctx()).unwrap();
    assert_eq!(sim.outcomes.len(), reqs.len());
    for o in &sim.outcomes {
        assert!(o.start >= o.arrival && o.finish >= o.start, "{o:?}");
        assert!((o.latency - (o.finish - o.arrival)).abs() < 1e-9);
        // the tp2 replica is new, so it is down until 60 + est
        if o.entry == 1 {
            assert!(o.start >= 60.0 + est, "{o:?}");
        }
    }
    assert!(sim.outcomes.iter().any(|o| o.entry == 1));
}

#[test]
fn unchanged_replicas_do_not_pause() {
    let f = Fixture::new(2);
    let a = ReplicaConfig::new(vec![0], 1, 1);
    let t = StrategyTimeline {
        entries: vec![
            entry(
                0,
                vec![a.clone(), ReplicaConfig::new(vec![1], 1, 1)],
                vec![vec![100, 0], vec![0, 10]],
                0.0,
            ),
            entry(
                1,
                vec![a, ReplicaConfig::new(vec![1], 1, 1)],
                vec![vec![0, 10], vec![100, 0]],
                30.0,
            ),
        ],
    };
    let r = SimRequest {
        id: 0,
        arrival_ms: 61_000,
        input_len: 1200,
        output_len: 30,
        type_id: 0,
    };
    let sim = run(&[r], &t, f.ctx()).unwrap();
    assert_eq!(sim.outcomes[0].start, 61.0);
}

#[test]
fn longer_downtime_never_lowers_percentiles() {
    let f = Fixture::new(2);
    for seed in 0..6 {
        let reqs = requests(seed, 600, 3);
        let mut prev: Option<MetricsReport> = None;
        for est in [0.0, 1.0, 5.0, 20.0, 50.0, 120.0] {
            let r = run(&reqs, &switching_timeline(est), f.ctx())
                .unwrap()
                .report;
            if let Some(p) = &prev {
                for (a, b) in p.percentiles().iter().zip(r.percentiles()) {
                    assert!(b >= *a, "seed {seed} est {est}: {a} -> {b}");
                }
            }
            prev = Some(r);
        }
    }
}

#[test]
fn timeline_must_cover_the_first_span() {
    let f = Fixture::new(1);
    let t = StrategyTimeline {
        entries: vec![entry(
            2,
            vec![ReplicaConfig::new(vec![0], 1, 1)],
            vec![vec![1, 1]],
            0.0,
        )],
    };
    let r = SimRequest {
        id: 0,
        arrival_ms: 10,
        input_len: 10,
        output_len: 10,
        type_id: 0,
    };
    assert_eq!(
        run(&[r], &t, f.ctx()).unwrap_err(),
        Error::TimelineGap { span: 0 }
    );
}

#[test]
fn hundred_latencies_closed_form() {
    let outcomes: Vec<RequestOutcome> = (1..=100)
        .map(|i| RequestOutcome {
            id: i,
            type_id: 0,
            arrival: 0.0,
            start: 0.0,
            finish: i as f64,
            entry: 0,
            replica: 0,
            latency: i as f64,
        })
        .collect();
    let m = metrics(&outcomes, 0.0, 100.0, 60.0).unwrap();
    assert_eq!(
        (m.p99, m.p90, m.avg, m.throughput),
        (100.0, 91.0, 50.5, 1.0)
    );
    let v: Vec<f64> = (1..=200).map(f64::from).collect();
    assert_eq!(nearest_rank(&v, 99), 199.0);
    assert_eq!(nearest_rank(&v[..99], 99), 99.0);
}

/// Smallest 1-based rank `i` with `100 * i > p * n`, found by scanning.
fn rank_oracle(sorted: &[f64], p: u32) -> f64 {
    let n = sorted.len();
    let i = (1..=n).find(|&i| 100 * i > p as usize * n).unwrap_or(n);
    sorted[i - 1]
}

proptest! {
    #[test]
    fn percentiles_match_sort_and_index(lat in prop::collection::vec(0.0f64..1e4, 1..400)) {
        let outcomes: Vec<RequestOutcome> = lat.iter().enumerate().map(|(i, &l)| RequestOutcome {
            id: i as u64, type_id: 0, arrival: 0.0, start: 0.0, finish: l, entry: 0, replica: 0, latency: l,
        }).collect();
        let m = metrics(&outcomes, 0.0, 60.0, 60.0).unwrap();
        let mut sorted = lat.clone();
        sorted.sort_by(f64::total_cmp);
        for (p, v) in PERCENTILES.iter().zip(m.percentiles()) {
            prop_assert_eq!(v, rank_oracle(&sorted, *p));
        }
        prop_assert!(m.percentiles().windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn spill_routes_every_request(
        types in prop::collection::vec(0usize..3, 0..300),
        x in prop::collection::vec(prop::collection::vec(0u64..20, 3), 1..4),
    ) {
        let n: Vec<Vec<u64>> = x.iter().map(|r| r.iter().map(|v| v + 1).collect()).collect();
        let q = dispatch(&types, &x, &n);
        let mut seen: Vec<usize> = q.iter().flatten().copied().collect();
        seen.sort_unstable();
        prop_assert_eq!(seen, (0..types.len()).collect::<Vec<_>>());
        // each replica gets at least its planned share when enough arrive
        for j in 0..3 {
            let arrived = types.iter().filter(|&&t| t == j).count() as u64;
            let planned: u64 = x.iter().map(|r| r[j]).sum();
            if arrived >= planned {
                for (k, row) in x.iter().enumerate() {
                    let got = q[k].iter().filter(|&&i| types[i] == j).count() as u64;
                    prop_assert!(got >= row[j]);
                }
            }
        }
    }

    #[test]
    fn runs_keep_ordering_and_conservation(seed in 0u64..1000, count in 1usize..300) {
        let f = Fixture::new(2);
        let reqs = requests(seed, count, 3);
        let sim = run(&reqs, &switching_timeline(3.0), f.ctx()).unwrap();
        prop_assert_eq!(sim.outcomes.len(), count);
        let r = &sim.report;
        prop_assert!(r.percentiles().windows(2).all(|w| w[0] <= w[1]));
        prop_assert!(r.completed_in_horizon <= count);
        prop_assert_eq!(r.per_span.iter().map(|s| s.requests).sum::<usize>(), count);
    }
}
