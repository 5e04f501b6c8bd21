//! Discrete-event replay of a trace against a timeline of deployments.
//!
//! Time is kept in integer microseconds. Each replica admits requests FIFO
//! while it has a free batch slot (`max_batch * pp`) and room in its KV
//! pool; an admitted request occupies its slot for its full latency under
//! the cost model. When the timeline switches deployment, replicas that
//! survive unchanged keep their state; new or reshaped replicas stay idle
//! for the switch plan's estimated time. Requests still queued on a removed
//! replica move to the new replica sharing the most devices with it, and
//! requests already running finish where they are.

use std::cmp::Reverse;
use std::collections::{BinaryHeap, VecDeque};

use serde::{Deserialize, Serialize};

use crate::costmodel::{build_capacity_table, ProfileParams, ReplicaShape};
use crate::error::{Error, Result};
use crate::flowassign::AssignmentMatrix;
use crate::switchplan::SwitchPlan;
use crate::types::{ClusterSpec, Deployment, ModelSpec, ReplicaConfig, TraceRecord, WorkloadType};
use crate::workload::{assign_type, TypeModel};

/// Percentiles reported besides the mean.
pub const PERCENTILES: [u32; 6] = [90, 95, 96, 97, 98, 99];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimelineEntry {
    pub start_span: u64,
    pub deployment: Deployment,
    pub assignment: AssignmentMatrix,
    /// Plan from the previous entry's deployment; empty for the first.
    pub switch: SwitchPlan,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategyTimeline {
    pub entries: Vec<TimelineEntry>,
}

impl StrategyTimeline {
    pub fn validate(&self) -> Result<()> {
        for w in self.entries.windows(2) {
            if w[1].start_span <= w[0].start_span {
                return Err(Error::InvalidDeployment(format!(
                    "timeline spans not increasing at span {}",
                    w[1].start_span
                )));
            }
        }
        if let Some(first) = self.entries.first() {
            if !first.switch.transfers.is_empty() {
                return Err(Error::InvalidDeployment(
                    "first timeline entry carries a switch plan".into(),
                ));
            }
        }
        Ok(())
    }

    /// Same timeline with every switch charged `seconds` of downtime.
    pub fn with_switch_time(&self, seconds: f64) -> StrategyTimeline {
        let mut t = self.clone();
        for e in t.entries.iter_mut().skip(1) {
            e.switch.est_seconds = seconds;
        }
        t
    }
}

/// A trace record with its workload type.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SimRequest {
    pub id: u64,
    pub arrival_ms: u64,
    pub input_len: u64,
    pub output_len: u64,
    pub type_id: usize,
}

/// Labels records with their nearest type, keeping the given order as ids.
pub fn label_requests(records: &[TraceRecord], types: &TypeModel) -> Vec<SimRequest> {
    records
        .iter()
        .enumerate()
        .map(|(i, r)| SimRequest {
            id: i as u64,
            arrival_ms: r.arrival_ms,
            input_len: r.input_len,
            output_len: r.output_len,
            type_id: assign_type(types, r),
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RequestOutcome {
    pub id: u64,
    pub type_id: usize,
    pub arrival: f64,
    pub start: f64,
    pub finish: f64,
    /// Timeline entry and replica index within it that served the request.
    pub entry: usize,
    pub replica: usize,
    pub latency: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpanMetrics {
    pub span: u64,
    pub requests: usize,
    pub avg: f64,
    pub p99: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub requests: usize,
    pub avg: f64,
    pub p90: f64,
    pub p95: f64,
    pub p96: f64,
    pub p97: f64,
    pub p98: f64,
    pub p99: f64,
    pub horizon_seconds: f64,
    /// Requests finished before the horizon ends.
    pub completed_in_horizon: usize,
    /// `completed_in_horizon / horizon_seconds`.
    pub throughput: f64,
    pub per_span: Vec<SpanMetrics>,
}

impl MetricsReport {
    pub fn percentiles(&self) -> [f64; 6] {
        [self.p90, self.p95, self.p96, self.p97, self.p98, self.p99]
    }
}

/// Nearest-rank percentile of ascending `sorted`: the smallest sample with
/// strictly more than `p` percent of the samples at or below it, so the
/// 99th percentile of `1..=100` is 100.
pub fn nearest_rank(sorted: &[f64], p: u32) -> f64 {
    if sorted.is_empty() {
        return 0.0;
    }
    let rank = (u64::from(p) * sorted.len() as u64 / 100 + 1).min(sorted.len() as u64) as usize;
    sorted[rank - 1]
}

fn summarize(latencies: &mut [f64]) -> (f64, [f64; 6]) {
    latencies.sort_by(f64::total_cmp);
    let avg = latencies.iter().sum::<f64>() / latencies.len().max(1) as f64;
    (avg, PERCENTILES.map(|p| nearest_rank(latencies, p)))
}

/// Latency statistics over `outcomes`. The horizon starts at `origin` and
/// lasts `horizon_seconds`; spans are `span_seconds` long from `origin`.
pub fn metrics(
    outcomes: &[RequestOutcome],
    origin: f64,
    horizon_seconds: f64,
    span_seconds: f64,
) -> Result<MetricsReport> {
    if outcomes.is_empty() {
        return Err(Error::NoCompletions);
    }
    let mut lat: Vec<f64> = outcomes.iter().map(|o| o.latency).collect();
    let (avg, p) = summarize(&mut lat);
    let end = origin + horizon_seconds;
    let completed_in_horizon = outcomes.iter().filter(|o| o.finish <= end).count();

    let mut by_span: std::collections::BTreeMap<u64, Vec<f64>> = Default::default();
    for o in outcomes {
        let s = ((o.arrival - origin) / span_seconds).floor().max(0.0) as u64;
        by_span.entry(s).or_default().push(o.latency);
    }
    let per_span = by_span
        .into_iter()
        .map(|(span, mut l)| {
            let (avg, p) = summarize(&mut l);
            SpanMetrics {
                span,
                requests: l.len(),
                avg,
                p99: p[5],
            }
        })
        .collect();
    Ok(MetricsReport {
        requests: outcomes.len(),
        avg,
        p90: p[0],
        p95: p[1],
        p96: p[2],
        p97: p[3],
        p98: p[4],
        p99: p[5],
        horizon_seconds,
        completed_in_horizon,
        throughput: completed_in_horizon as f64 / horizon_seconds,
        per_span,
    })
}

/// Routes one span's requests of each type: replica `k` takes `x[k][j]`
/// type-`j` requests by smooth weighted round-robin in arrival order, and
/// anything beyond the planned counts goes to the replica with the lowest
/// routed load relative to its capacities `n`.
#[derive(Debug, Clone)]
pub struct Dispatcher {
    x: Vec<Vec<u64>>,
    n: Vec<Vec<u64>>,
    remaining: Vec<Vec<u64>>,
    weight: Vec<Vec<i64>>,
    routed: Vec<Vec<u64>>,
}

impl Dispatcher {
    pub fn new(x: Vec<Vec<u64>>, n: Vec<Vec<u64>>) -> Self {
        let weight = x.iter().map(|r| vec![0; r.len()]).collect();
        let routed = x.iter().map(|r| vec![0; r.len()]).collect();
        Dispatcher {
            remaining: x.clone(),
            x,
            n,
            weight,
            routed,
        }
    }

    /// Starts a new span.
    pub fn reset(&mut self) {
        *self = Dispatcher::new(std::mem::take(&mut self.x), std::mem::take(&mut self.n));
    }

    pub fn route(&mut self, j: usize) -> usize {
        let r = self.x.len();
        let planned: Vec<usize> = (0..r)
            .filter(|&k| self.remaining[k].get(j).copied().unwrap_or(0) > 0)
            .collect();
        let k = if planned.is_empty() {
            self.spill(j)
        } else {
            let total: i64 = planned.iter().map(|&k| self.x[k][j] as i64).sum();
            for &k in &planned {
                self.weight[k][j] += self.x[k][j] as i64;
            }
            let pick = *planned
                .iter()
                .max_by_key(|&&k| (self.weight[k][j], Reverse(k)))
                .expect("non-empty");
            self.weight[pick][j] -= total;
            self.remaining[pick][j] -= 1;
            pick
        };
        if let Some(c) = self.routed.get_mut(k).and_then(|row| row.get_mut(j)) {
            *c += 1;
        }
        k
    }

    fn spill(&self, j: usize) -> usize {
        let util = |k: usize| -> f64 {
            self.routed[k]
                .iter()
                .zip(&self.n[k])
                .filter(|(_, &n)| n > 0)
                .map(|(&c, &n)| c as f64 / n as f64)
                .sum()
        };
        (0..self.x.len())
            .filter(|&k| self.n[k].get(j).copied().unwrap_or(0) > 0)
            .map(|k| (util(k) + 1.0 / self.n[k][j] as f64, k))
            .min_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)))
            .map_or(0, |(_, k)| k)
    }
}

/// Per-replica lists of request positions for one span's arrivals.
pub fn dispatch(type_ids: &[usize], x: &[Vec<u64>], n: &[Vec<u64>]) -> Vec<Vec<usize>> {
    let mut d = Dispatcher::new(x.to_vec(), n.to_vec());
    let mut out = vec![Vec::new(); x.len().max(1)];
    for (i, &j) in type_ids.iter().enumerate() {
        out[d.route(j)].push(i);
    }
    out
}

/// Everything a run needs besides the trace and timeline.
#[derive(Debug, Clone, Copy)]
pub struct SimContext<'a> {
    pub model: &'a ModelSpec,
    pub params: &'a ProfileParams,
    pub cluster: &'a ClusterSpec,
    pub types: &'a [WorkloadType],
    pub span_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Simulation {
    pub report: MetricsReport,
    pub outcomes: Vec<RequestOutcome>,
}

struct Server {
    cfg: ReplicaConfig,
    shape: ReplicaShape,
    slots: u64,
    kv_pool: u64,
    queue: VecDeque<usize>,
    running: u64,
    kv_used: u64,
    available_at: u64,
    entry: usize,
    index: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum Event {
    Completion { server: usize, req: usize },
    Boundary { entry: usize },
    Available { server: usize },
    Arrival { req: usize },
}

const US: f64 = 1e6;

fn to_us(seconds: f64) -> u64 {
    (seconds * US).round().max(0.0) as u64
}

/// Replays `requests` (any order) against `timeline`.
pub fn run(
    requests: &[SimRequest],
    timeline: &StrategyTimeline,
    ctx: SimContext,
) -> Result<Simulation> {
    timeline.validate()?;
    if requests.is_empty() {
        return Err(Error::NoCompletions);
    }
    let span_us = to_us(ctx.span_seconds).max(1);
    let mut order: Vec<usize> = (0..requests.len()).collect();
    order.sort_by_key(|&i| (requests[i].arrival_ms, requests[i].id));
    let span_of = |i: usize| requests[i].arrival_ms * 1000 / span_us;
    let first_span = span_of(order[0]);
    let last_span = span_of(order[order.len() - 1]);
    match timeline.entries.first() {
        Some(e) if e.start_span <= first_span => {}
        _ => return Err(Error::TimelineGap { span: first_span }),
    }

    // capacity rows, for spill routing, per entry
    let mut tables = Vec::with_capacity(timeline.entries.len());
    for e in &timeline.entries {
        let t = build_capacity_table(
            &e.deployment,
            ctx.types,
            ctx.model,
            ctx.params,
            ctx.span_seconds,
            ctx.cluster,
        )?;
        if e.assignment.x.len() != e.deployment.len()
            || e.assignment.x.iter().any(|r| r.len() != ctx.types.len())
        {
            return Err(Error::DimensionMismatch(format!(
                "assignment for span {} does not match its deployment",
                e.start_span
            )));
        }
        tables.push(t.n);
    }
    if let Some(r) = requests.iter().find(|r| r.type_id >= ctx.types.len()) {
        return Err(Error::DimensionMismatch(format!(
            "request {} has type {} of {}",
            r.id,
            r.type_id,
            ctx.types.len()
        )));
    }

    let mut heap: BinaryHeap<Reverse<(u64, Event, u64)>> = BinaryHeap::new();
    let mut seq = 0u64;
    let mut push = |heap: &mut BinaryHeap<_>, t: u64, ev: Event| {
        heap.push(Reverse((t, ev, seq)));
        seq += 1;
    };
    for &i in &order {
        push(
            &mut heap,
            requests[i].arrival_ms * 1000,
            Event::Arrival { req: i },
        );
    }
    // the first entry is active from the start; later ones switch in
    let first_active = timeline
        .entries
        .iter()
        .rposition(|e| e.start_span <= first_span)
        .unwrap_or(0);
    for (k, e) in timeline.entries.iter().enumerate().skip(first_active + 1) {
        if e.start_span <= last_span {
            push(
                &mut heap,
                e.start_span * span_us,
                Event::Boundary { entry: k },
            );
        }
    }

    let kv_of = |r: &SimRequest| (r.input_len + r.output_len) * ctx.model.bytes_per_token_kv;
    let make_server = |cfg: &ReplicaConfig, entry: usize, index: usize, available_at: u64| {
        let shape = ReplicaShape::of(cfg, ctx.cluster);
        Server {
            cfg: cfg.clone(),
            shape,
            slots: ctx.params.batch_slots(cfg.pp),
            kv_pool: shape.kv_pool(ctx.model),
            queue: VecDeque::new(),
            running: 0,
            kv_used: 0,
            available_at,
            entry,
            index,
        }
    };
    let mut servers: Vec<Server> = timeline.entries[first_active]
        .deployment
        .replicas
        .iter()
        .enumerate()
        .map(|(i, c)| make_server(c, first_active, i, 0))
        .collect();
    let mut active: Vec<usize> = (0..servers.len()).collect();
    let mut current = first_active;
    let mut dispatcher = Dispatcher::new(
        timeline.entries[current].assignment.x.clone(),
        tables[current].clone(),
    );
    let mut dispatch_span = u64::MAX;

    let mut starts = vec![u64::MAX; requests.len()];
    let mut served_by = vec![(0usize, 0usize); requests.len()];
    let mut outcomes = Vec::with_capacity(requests.len());
    let (mut arrived, mut completed, mut running_total, mut queued_total) =
        (0u64, 0u64, 0u64, 0u64);

    // admits queue heads on `s` while resources allow
    let admit = |s: usize,
                 now: u64,
                 servers: &mut Vec<Server>,
                 heap: &mut BinaryHeap<Reverse<(u64, Event, u64)>>,
                 push: &mut dyn FnMut(&mut BinaryHeap<Reverse<(u64, Event, u64)>>, u64, Event),
                 starts: &mut Vec<u64>,
                 served_by: &mut Vec<(usize, usize)>|
     -> u64 {
        let sv = &mut servers[s];
        let mut admitted = 0;
        if now < sv.available_at {
            return 0;
        }
        while let Some(&i) = sv.queue.front() {
            let r = &requests[i];
            let kv = kv_of(r);
            let fits = sv.running == 0 || (sv.running < sv.slots && sv.kv_used + kv <= sv.kv_pool);
            if !fits {
                break;
            }
            sv.queue.pop_front();
            sv.running += 1;
            sv.kv_used += kv;
            starts[i] = now;
            served_by[i] = (sv.entry, sv.index);
            let service =
                to_us(
                    sv.shape
                        .request_latency(ctx.model, r.input_len, r.output_len, ctx.params),
                )
                .max(1);
            push(heap, now + service, Event::Completion { server: s, req: i });
            admitted += 1;
        }
        admitted
    };

    while let Some(Reverse((now, ev, _))) = heap.pop() {
        match ev {
            Event::Arrival { req } => {
                arrived += 1;
                let span = span_of(req);
                if span != dispatch_span {
                    dispatcher.reset();
                    dispatch_span = span;
                }
                let k = dispatcher
                    .route(requests[req].type_id)
                    .min(active.len() - 1);
                let s = active[k];
                servers[s].queue.push_back(req);
                queued_total += 1;
                let n = admit(
                    s,
                    now,
                    &mut servers,
                    &mut heap,
                    &mut push,
                    &mut starts,
                    &mut served_by,
                );
                queued_total -= n;
                running_total += n;
            }
            Event::Completion { server, req } => {
                let r = &requests[req];
                let sv = &mut servers[server];
                sv.running -= 1;
                sv.kv_used -= kv_of(r);
                running_total -= 1;
                completed += 1;
                let start = starts[req];
                let (entry, replica) = served_by[req];
                let arrival = r.arrival_ms as f64 / 1000.0;
                outcomes.push(RequestOutcome {
                    id: r.id,
                    type_id: r.type_id,
                    arrival,
                    start: start as f64 / US,
                    finish: now as f64 / US,
                    entry,
                    replica,
                    latency: (now - r.arrival_ms * 1000) as f64 / US,
                });
                let n = admit(
                    server,
                    now,
                    &mut servers,
                    &mut heap,
                    &mut push,
                    &mut starts,
                    &mut served_by,
                );
                queued_total -= n;
                running_total += n;
            }
            Event::Available { server } => {
                let n = admit(
                    server,
                    now,
                    &mut servers,
                    &mut heap,
                    &mut push,
                    &mut starts,
                    &mut served_by,
                );
                queued_total -= n;
                running_total += n;
            }
            Event::Boundary { entry } => {
                let e = &timeline.entries[entry];
                let downtime = to_us(e.switch.est_seconds);
                let mut next = Vec::with_capacity(e.deployment.len());
                let mut kept = vec![false; active.len()];
                for (idx, cfg) in e.deployment.replicas.iter().enumerate() {
                    let old = active
                        .iter()
                        .enumerate()
                        .find(|(o, &s)| !kept[*o] && servers[s].cfg == *cfg);
                    match old {
                        Some((o, &s)) => {
                            kept[o] = true;
                            servers[s].entry = entry;
                            servers[s].index = idx;
                            next.push(s);
                        }
                        None => {
                            servers.push(make_server(cfg, entry, idx, now + downtime));
                            let s = servers.len() - 1;
                            next.push(s);
                            push(&mut heap, now + downtime, Event::Available { server: s });
                        }
                    }
                }
                // queued work on removed replicas follows the device overlap
                for (o, &s) in active.iter().enumerate() {
                    if kept[o] || servers[s].queue.is_empty() {
                        continue;
                    }
                    let moved: Vec<usize> = servers[s].queue.drain(..).collect();
                    let overlap = |t: usize| {
                        servers[t]
                            .cfg
                            .device_ids
                            .iter()
                            .filter(|d| servers[s].cfg.device_ids.contains(d))
                            .count()
                    };
                    let t = *next
                        .iter()
                        .max_by_key(|&&t| (overlap(t), Reverse(t)))
                        .expect("deployment has replicas");
                    let mut merged: Vec<usize> = servers[t].queue.drain(..).chain(moved).collect();
                    merged.sort_by_key(|&i| (requests[i].arrival_ms, requests[i].id));
                    servers[t].queue = merged.into();
                }
                active = next;
                current = entry;
                dispatcher = Dispatcher::new(e.assignment.x.clone(), tables[current].clone());
                dispatch_span = u64::MAX;
                for &s in &active {
                    let n = admit(
                        s,
                        now,
                        &mut servers,
                        &mut heap,
                        &mut push,
                        &mut starts,
                        &mut served_by,
                    );
                    queued_total -= n;
                    running_total += n;
                }
            }
        }
        debug_assert_eq!(arrived, completed + running_total + queued_total);
    }

    outcomes.sort_by_key(|o| o.id);
    let origin = (first_span * span_us) as f64 / US;
    let horizon = ((last_span + 1 - first_span) * span_us) as f64 / US;
    let report = metrics(&outcomes, origin, horizon, ctx.span_seconds)?;
    Ok(Simulation { report, outcomes })
}
