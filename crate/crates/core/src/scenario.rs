//! Synthetic traces with a known workload shift.
//!
//! The mixed-shift trace has two request types, a prompt-heavy one with
//! short outputs and a generation-heavy one with long outputs. For the
//! first half of the trace nine tenths of the offered load belongs to one
//! type, for the second half to the other. Each phase's arrival rate is a
//! fixed fraction of what the best deployment for that phase's mix can
//! serve, so the cluster stays busy without being overloaded when
//! provisioned well.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};

use crate::costmodel::ProfileParams;
use crate::deploysearch::{exhaustive, Instance};
use crate::error::Result;
use crate::types::{ClusterSpec, ModelSpec, TraceRecord, TraceSpan, WorkloadType, GB};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScenarioOptions {
    pub seed: u64,
    pub spans: usize,
    /// Arrival rate as a fraction of each phase's best capacity.
    pub load: f64,
    /// Share of the offered load on the first type in each half.
    pub first_share: f64,
    pub second_share: f64,
    /// Relative spread of request lengths around their type's centroid.
    pub jitter: f64,
    pub span_seconds: f64,
}

impl Default for ScenarioOptions {
    fn default() -> Self {
        ScenarioOptions {
            seed: 7,
            spans: 30,
            load: 0.9,
            first_share: 0.1,
            second_share: 0.9,
            jitter: 0.1,
            span_seconds: 60.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub cluster: ClusterSpec,
    pub model: ModelSpec,
    pub params: ProfileParams,
    /// The generating types; the short-output type first.
    pub types: Vec<WorkloadType>,
    /// Expected arrivals per span and type in each half.
    pub phase_rates: Vec<Vec<f64>>,
    pub records: Vec<TraceRecord>,
    pub span_seconds: f64,
}

/// Two machines of four 80 GB devices.
pub fn scenario_cluster() -> ClusterSpec {
    ClusterSpec::uniform(2, 4, 80 * GB, 400e9, 200e9)
}

/// A 60 GB dense model.
pub fn scenario_model() -> ModelSpec {
    ModelSpec {
        name: "dense-60gb".into(),
        param_bytes: 60 * GB,
        num_layers: 48,
        bytes_per_token_kv: 400_000,
        flops_per_token_prefill: 60,
        min_mem_bytes: 60 * GB,
    }
}

pub fn scenario_types() -> Vec<WorkloadType> {
    vec![
        WorkloadType::new(0, 1200, 30),
        WorkloadType::new(1, 400, 2500),
    ]
}

/// Largest `s` such that the best deployment serves all of `s * direction`
/// in one span, to within `1e-4` relative.
pub fn mix_capacity(inst: Instance, direction: &[f64]) -> Result<f64> {
    let served_all = |s: f64| -> Result<bool> {
        let counts: Vec<u64> = direction.iter().map(|&p| (s * p).floor() as u64).collect();
        let want: u64 = counts.iter().sum();
        let best = exhaustive(inst, &TraceSpan::new(0, counts), 0)?;
        Ok(best.throughput >= want)
    };
    let (mut lo, mut hi) = (0.0, 1.0);
    while served_all(hi)? {
        lo = hi;
        hi *= 2.0;
    }
    while hi - lo > 1e-4 * hi {
        let mid = 0.5 * (lo + hi);
        if served_all(mid)? {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(lo)
}

/// The mixed-shift trace.
pub fn mixed_shift(opts: &ScenarioOptions) -> Result<Scenario> {
    let cluster = scenario_cluster();
    let model = scenario_model();
    let params = ProfileParams::default();
    let types = scenario_types();
    let inst = Instance {
        cluster: &cluster,
        model: &model,
        params: &params,
        types: &types,
        span_seconds: opts.span_seconds,
    };
    // per-type capacity when serving that type alone
    let single: Vec<f64> = (0..types.len())
        .map(|j| {
            let dir: Vec<f64> = (0..types.len())
                .map(|i| f64::from(u8::from(i == j)))
                .collect();
            mix_capacity(inst, &dir)
        })
        .collect::<Result<_>>()?;
    let mut phase_rates = Vec::new();
    for share in [opts.first_share, opts.second_share] {
        let dir = vec![share * single[0], (1.0 - share) * single[1]];
        let s = mix_capacity(inst, &dir)?;
        phase_rates.push(dir.iter().map(|d| d * s * opts.load).collect::<Vec<f64>>());
    }

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let span_ms = (opts.span_seconds * 1000.0) as u64;
    let mut records = Vec::new();
    for span in 0..opts.spans {
        let rates = &phase_rates[usize::from(span >= opts.spans / 2)];
        for (t, &rate) in types.iter().zip(rates) {
            let n = if rate > 0.0 {
                Poisson::new(rate).map_or(0.0, |p| p.sample(&mut rng)) as u64
            } else {
                0
            };
            for _ in 0..n {
                let jitter = |c: u64, rng: &mut ChaCha8Rng| {
                    ((c as f64) * rng.random_range(1.0 - opts.jitter..=1.0 + opts.jitter))
                        .round()
                        .max(1.0) as u64
                };
                records.push(TraceRecord {
                    arrival_ms: span as u64 * span_ms + rng.random_range(0..span_ms),
                    input_len: jitter(t.centroid_in, &mut rng),
                    output_len: jitter(t.centroid_out, &mut rng),
                });
            }
        }
    }
    records.sort_by_key(|r| r.arrival_ms);
    Ok(Scenario {
        cluster,
        model,
        params,
        types,
        phase_rates,
        records,
        span_seconds: opts.span_seconds,
    })
}
