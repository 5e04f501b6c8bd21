//! The predict, schedule, switch loop over a whole trace, and the
//! comparison runs against static and reload-on-switch baselines.

use serde::{Deserialize, Serialize};

use crate::costmodel::{build_capacity_table, memory_feasible, ProfileParams};
use crate::deploysearch::{
    init_uniform, search_from, Evaluator, Instance, SearchOptions, SearchState,
};
use crate::error::{Error, Result};
use crate::flowassign::{solve_with_budget, AssignmentMatrix};
use crate::sim::{run, MetricsReport, SimContext, SimRequest, StrategyTimeline, TimelineEntry};
use crate::switchplan::{plan_switch, LinkLoad, SwitchPlan};
use crate::types::{ClusterSpec, Deployment, ModelSpec, ReplicaConfig, TraceSpan, WorkloadType};
use crate::workload::{rolling_forecasts, Forecast, Predictor, SpanSeries};

/// Downtime charged per switch by the reload baseline, in seconds.
pub const DEFAULT_RELOAD_SECONDS: f64 = 50.0;

#[derive(Debug, Clone, Copy)]
pub struct Setup<'a> {
    pub cluster: &'a ClusterSpec,
    pub model: &'a ModelSpec,
    pub params: &'a ProfileParams,
    pub types: &'a [WorkloadType],
    pub span_seconds: f64,
}

impl<'a> Setup<'a> {
    pub fn instance(&self) -> Instance<'a> {
        Instance {
            cluster: self.cluster,
            model: self.model,
            params: self.params,
            types: self.types,
            span_seconds: self.span_seconds,
        }
    }

    pub fn sim_context(&self) -> SimContext<'a> {
        SimContext {
            model: self.model,
            params: self.params,
            cluster: self.cluster,
            types: self.types,
            span_seconds: self.span_seconds,
        }
    }
}

fn empty_plan() -> SwitchPlan {
    SwitchPlan {
        transfers: Vec::new(),
        link_load: LinkLoad::new(),
        est_seconds: 0.0,
    }
}

/// Appends an entry unless it repeats the last one.
fn push_entry(
    entries: &mut Vec<TimelineEntry>,
    span: u64,
    deployment: Deployment,
    assignment: AssignmentMatrix,
    setup: &Setup,
) -> Result<()> {
    let switch = match entries.last() {
        None => empty_plan(),
        Some(last) if last.deployment == deployment && last.assignment == assignment => {
            return Ok(())
        }
        Some(last) if last.deployment == deployment => empty_plan(),
        Some(last) => plan_switch(&last.deployment, &deployment, setup.model, setup.cluster)?,
    };
    entries.push(TimelineEntry {
        start_span: span,
        deployment,
        assignment,
        switch,
    });
    Ok(())
}

/// Cold starts per span, each with its own seed.
pub const DEFAULT_RESTARTS: u64 = 4;

/// Picks a deployment for `forecast`, starting from `prev` when given.
/// `restarts` cold starts from the uniform deployment also run with seeds
/// `opts.seed..opts.seed + restarts`; the warm result is kept unless a cold
/// one serves strictly more.
pub fn schedule_span(
    setup: &Setup,
    forecast: &TraceSpan,
    prev: Option<&Deployment>,
    opts: &SearchOptions,
    restarts: u64,
) -> Result<SearchState> {
    let inst = setup.instance();
    let mut best = match prev {
        Some(p) => Some(search_from(inst, forecast, p, opts)?),
        None => None,
    };
    let uniform = init_uniform(setup.cluster, setup.model)?;
    for i in 0..restarts.max(u64::from(best.is_none())) {
        let o = SearchOptions {
            seed: opts.seed.wrapping_add(i),
            ..*opts
        };
        let cold = search_from(inst, forecast, &uniform, &o)?;
        if best.as_ref().is_none_or(|b| cold.throughput > b.throughput) {
            best = Some(cold);
        }
    }
    best.ok_or(Error::NoCompletions)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlannedTimeline {
    pub timeline: StrategyTimeline,
    pub forecasts: Vec<Forecast>,
    /// Forecast objective per span.
    pub planned_throughput: Vec<u64>,
}

/// Forecast, schedule and plan switches for every span of `series`.
pub fn plan_timeline(
    setup: &Setup,
    series: &SpanSeries,
    predictor: &dyn Predictor,
    opts: &SearchOptions,
    restarts: u64,
) -> Result<PlannedTimeline> {
    let forecasts = rolling_forecasts(series, predictor);
    let mut entries: Vec<TimelineEntry> = Vec::new();
    let mut planned = Vec::with_capacity(forecasts.len());
    let mut prev: Option<Deployment> = None;
    for f in &forecasts {
        let state = schedule_span(setup, &f.as_span(), prev.as_ref(), opts, restarts)?;
        planned.push(state.throughput);
        push_entry(
            &mut entries,
            f.span_index,
            state.deployment.clone(),
            state.assignment,
            setup,
        )?;
        prev = Some(state.deployment);
    }
    Ok(PlannedTimeline {
        timeline: StrategyTimeline { entries },
        forecasts,
        planned_throughput: planned,
    })
}

/// A fixed deployment with per-span assignments solved on the forecasts.
pub fn static_timeline(
    setup: &Setup,
    deployment: &Deployment,
    forecasts: &[Forecast],
    exact_budget: u64,
) -> Result<StrategyTimeline> {
    let table = build_capacity_table(
        deployment,
        setup.types,
        setup.model,
        setup.params,
        setup.span_seconds,
        setup.cluster,
    )?;
    let mut entries = Vec::new();
    for f in forecasts {
        let a = solve_with_budget(&f.as_span(), &table, exact_budget)?;
        push_entry(&mut entries, f.span_index, deployment.clone(), a, setup)?;
    }
    Ok(StrategyTimeline { entries })
}

/// Every deployment made of identical `(tp, pp)` replicas that tiles the
/// cluster, with devices grouped in ascending order.
pub fn homogeneous_deployments(cluster: &ClusterSpec, model: &ModelSpec) -> Vec<Deployment> {
    let devices = cluster.devices();
    let d = devices.len();
    let mut out = Vec::new();
    for size in 1..=d {
        if d % size != 0 {
            continue;
        }
        for tp in (1..=size).rev() {
            if size % tp != 0 {
                continue;
            }
            let replicas: Vec<ReplicaConfig> = devices
                .chunks(size)
                .map(|c| ReplicaConfig::new(c.to_vec(), tp as u32, (size / tp) as u32))
                .collect();
            if replicas
                .iter()
                .all(|r| r.is_valid(cluster) && memory_feasible(r, model, cluster))
            {
                out.push(Deployment::new(replicas));
            }
        }
    }
    out
}

/// `tp{tp}pp{pp}x{replicas}` for homogeneous deployments, `mixed` otherwise.
pub fn deployment_label(d: &Deployment) -> String {
    match d.replicas.first() {
        Some(f) if d.replicas.iter().all(|r| (r.tp, r.pp) == (f.tp, f.pp)) => {
            format!("tp{}pp{}x{}", f.tp, f.pp, d.len())
        }
        Some(_) => "mixed".into(),
        None => "empty".into(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub name: String,
    pub deployment: String,
    pub switches: usize,
    pub report: MetricsReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Orchestration {
    pub planned: PlannedTimeline,
    /// Orchestrated, best static homogeneous, reload baseline.
    pub rows: Vec<ComparisonRow>,
    /// Every static candidate that was simulated.
    pub statics: Vec<ComparisonRow>,
}

#[derive(Debug, Clone, Copy)]
pub struct OrchestrateOptions {
    pub search: SearchOptions,
    pub restarts: u64,
    pub reload_seconds: f64,
}

impl Default for OrchestrateOptions {
    fn default() -> Self {
        OrchestrateOptions {
            search: SearchOptions::default(),
            restarts: DEFAULT_RESTARTS,
            reload_seconds: DEFAULT_RELOAD_SECONDS,
        }
    }
}

fn switches(t: &StrategyTimeline) -> usize {
    t.entries
        .windows(2)
        .filter(|w| w[0].deployment != w[1].deployment)
        .count()
}

/// Plans a timeline for `series`, then simulates it next to the best
/// static homogeneous deployment (lowest p99, then highest throughput)
/// and a copy of the timeline charged `reload_seconds` per switch.
pub fn orchestrate(
    setup: &Setup,
    series: &SpanSeries,
    requests: &[SimRequest],
    predictor: &dyn Predictor,
    opts: &OrchestrateOptions,
) -> Result<Orchestration> {
    if series.is_empty() {
        return Err(Error::NoCompletions);
    }
    let planned = plan_timeline(setup, series, predictor, &opts.search, opts.restarts)?;
    let ctx = setup.sim_context();
    let ours = run(requests, &planned.timeline, ctx)?;

    let mut statics = Vec::new();
    for dep in homogeneous_deployments(setup.cluster, setup.model) {
        let t = static_timeline(setup, &dep, &planned.forecasts, opts.search.exact_budget)?;
        let sim = run(requests, &t, ctx)?;
        statics.push(ComparisonRow {
            name: "static".into(),
            deployment: deployment_label(&dep),
            switches: 0,
            report: sim.report,
        });
    }
    let best = statics
        .iter()
        .min_by(|a, b| {
            a.report
                .p99
                .total_cmp(&b.report.p99)
                .then(b.report.throughput.total_cmp(&a.report.throughput))
        })
        .cloned()
        .ok_or(Error::ModelTooLarge {
            devices: setup.cluster.device_count(),
        })?;

    let reload_timeline = planned.timeline.with_switch_time(opts.reload_seconds);
    let reload = run(requests, &reload_timeline, ctx)?;
    let n = switches(&planned.timeline);
    let rows = vec![
        ComparisonRow {
            name: "orchestrated".into(),
            deployment: "adaptive".into(),
            switches: n,
            report: ours.report,
        },
        ComparisonRow {
            name: "static-best".into(),
            ..best
        },
        ComparisonRow {
            name: "reload".into(),
            deployment: "adaptive".into(),
            switches: n,
            report: reload.report,
        },
    ];
    Ok(Orchestration {
        planned,
        rows,
        statics,
    })
}

/// Objective of `deployment` on `span`, for reporting.
pub fn objective(
    setup: &Setup,
    deployment: &Deployment,
    span: &TraceSpan,
    exact_budget: u64,
) -> u64 {
    Evaluator::new(setup.instance(), span, exact_budget)
        .evaluate(deployment)
        .0
}
