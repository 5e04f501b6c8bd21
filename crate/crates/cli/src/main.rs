mod io;

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use hetserve::costmodel::{build_capacity_table, ProfileParams};
use hetserve::deploysearch::{exhaustive, SearchOptions, SearchState, EXHAUSTIVE_LIMIT};
use hetserve::pipeline::{
    deployment_label, orchestrate, schedule_span, static_timeline, ComparisonRow,
    OrchestrateOptions, Setup, DEFAULT_RELOAD_SECONDS, DEFAULT_RESTARTS,
};
use hetserve::scenario::{mixed_shift, ScenarioOptions};
use hetserve::sim::{label_requests, run, MetricsReport, Simulation, StrategyTimeline};
use hetserve::switchplan::{greedy_plan, layout, naive_plan};
use hetserve::workload::{
    bucketize, fit_types_traced, forecast_next, rolling_forecasts, rrmse, Holt, LastValue,
    Predictor, SpanSeries, TypeModel, DEFAULT_K,
};
use hetserve::{write_trace, ClusterSpec, ModelSpec, TraceRecord, TraceSpan, DEFAULT_SPAN_SECONDS};
use serde::Serialize;

use crate::io::{OutDir, TimelineFile, TypesFile, SCHEMA_VERSION};

/// Workload-aware scheduling and switching for multi-replica LLM serving.
#[derive(Debug, Parser)]
#[command(name = "hetserve", version, about)]
struct Cli {
    /// Cluster spec (JSON). Defaults to two machines of four 80 GB devices.
    #[arg(long, global = true)]
    cluster: Option<PathBuf>,
    /// Model spec (JSON). Defaults to a 60 GB dense model.
    #[arg(long, global = true)]
    model: Option<PathBuf>,
    /// Latency profile (JSON). Defaults to the built-in profile.
    #[arg(long, global = true)]
    profile: Option<PathBuf>,
    /// Request trace (JSONL: arrival_ms, input_len, output_len).
    #[arg(long, global = true)]
    trace: Option<PathBuf>,
    /// Workload types written by `fit`.
    #[arg(long, global = true)]
    types: Option<PathBuf>,
    /// Seed for k-means, the deployment search and trace generation.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, default_value_t = DEFAULT_SPAN_SECONDS)]
    span_seconds: f64,
    #[arg(long, global = true, default_value = "out")]
    out_dir: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum PredictorKind {
    Holt,
    LastValue,
}

impl PredictorKind {
    fn build(self) -> Box<dyn Predictor> {
        match self {
            PredictorKind::Holt => Box::new(Holt::default()),
            PredictorKind::LastValue => Box::new(LastValue),
        }
    }
}

#[derive(Debug, clap::Args)]
struct SearchArgs {
    #[arg(long, default_value_t = 500)]
    max_iters: usize,
    #[arg(long, default_value_t = 20)]
    stale_limit: usize,
    /// Searches from the uniform deployment, each with its own seed.
    #[arg(long, default_value_t = DEFAULT_RESTARTS)]
    restarts: u64,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Cluster the trace into workload types (types.json).
    Fit {
        #[arg(long, default_value_t = DEFAULT_K)]
        k: usize,
    },
    /// Per-span forecasts over the trace and for the span after it.
    Predict {
        #[arg(long, value_enum, default_value = "holt")]
        predictor: PredictorKind,
    },
    /// Deployment and assignment for one span's counts.
    Schedule {
        /// Requests per type; defaults to the forecast after the trace.
        #[arg(long, value_delimiter = ',')]
        counts: Option<Vec<u64>>,
        /// Enumerate every deployment instead of searching.
        #[arg(long)]
        exhaustive: bool,
        #[command(flatten)]
        search: SearchArgs,
        /// Write the search trace to search_log.csv.
        #[arg(long)]
        search_log: bool,
    },
    /// Parameter transfers between two deployments.
    SwitchPlan {
        #[arg(long)]
        from: PathBuf,
        #[arg(long)]
        to: PathBuf,
        /// Use the lowest-id-holder baseline instead of the greedy plan.
        #[arg(long)]
        naive: bool,
    },
    /// Replay the trace against a timeline or a fixed deployment.
    Simulate {
        #[arg(long, conflicts_with = "deployment")]
        timeline: Option<PathBuf>,
        #[arg(long)]
        deployment: Option<PathBuf>,
        /// Also write per-request outcomes.
        #[arg(long)]
        outcomes: bool,
    },
    /// Forecast, schedule and switch over the whole trace, then compare
    /// against static and reload baselines.
    Orchestrate {
        #[arg(long, default_value_t = DEFAULT_RELOAD_SECONDS)]
        reload_seconds: f64,
        #[arg(long, value_enum, default_value = "holt")]
        predictor: PredictorKind,
        /// Types to fit when --types is not given.
        #[arg(long, default_value_t = DEFAULT_K)]
        k: usize,
        #[command(flatten)]
        search: SearchArgs,
    },
    /// Write the synthetic mixed-shift trace with its cluster and model.
    GenTrace {
        #[arg(long, default_value_t = 30)]
        spans: usize,
        #[arg(long, default_value_t = 0.9)]
        load: f64,
        #[arg(long, default_value_t = 0.1)]
        first_share: f64,
        #[arg(long, default_value_t = 0.9)]
        second_share: f64,
    },
}

struct Env {
    cluster: ClusterSpec,
    model: ModelSpec,
    params: ProfileParams,
}

impl Cli {
    fn env(&self) -> Result<Env> {
        Ok(Env {
            cluster: io::cluster(self.cluster.as_deref())?,
            model: io::model(self.model.as_deref())?,
            params: io::profile(self.profile.as_deref())?,
        })
    }

    fn type_model(&self, records: &[TraceRecord], k: usize) -> Result<TypeModel> {
        match &self.types {
            Some(p) => io::types(p),
            None => Ok(fit_types_traced(records, k, self.seed.unwrap_or(0))?.model),
        }
    }

    fn search_options(&self, s: &SearchArgs) -> SearchOptions {
        SearchOptions {
            seed: self.seed.unwrap_or(0),
            max_iters: s.max_iters,
            stale_limit: s.stale_limit,
            ..SearchOptions::default()
        }
    }
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    if !(cli.span_seconds > 0.0) {
        bail!("--span-seconds must be positive");
    }
    let mut out = OutDir::create(&cli.out_dir)?;
    match &cli.command {
        Command::Fit { k } => cmd_fit(&cli, *k, &mut out)?,
        Command::Predict { predictor } => cmd_predict(&cli, *predictor, &mut out)?,
        Command::Schedule {
            counts,
            exhaustive,
            search,
            search_log,
        } => cmd_schedule(
            &cli,
            counts.as_deref(),
            *exhaustive,
            search,
            *search_log,
            &mut out,
        )?,
        Command::SwitchPlan { from, to, naive } => {
            cmd_switch_plan(&cli, from, to, *naive, &mut out)?
        }
        Command::Simulate {
            timeline,
            deployment,
            outcomes,
        } => cmd_simulate(
            &cli,
            timeline.as_deref(),
            deployment.as_deref(),
            *outcomes,
            &mut out,
        )?,
        Command::Orchestrate {
            reload_seconds,
            predictor,
            k,
            search,
        } => {
            let opts = OrchestrateOptions {
                search: cli.search_options(search),
                restarts: search.restarts,
                reload_seconds: *reload_seconds,
            };
            cmd_orchestrate(&cli, opts, *predictor, *k, &mut out)?
        }
        Command::GenTrace {
            spans,
            load,
            first_share,
            second_share,
        } => {
            let opts = ScenarioOptions {
                seed: cli.seed.unwrap_or(ScenarioOptions::default().seed),
                spans: *spans,
                load: *load,
                first_share: *first_share,
                second_share: *second_share,
                span_seconds: cli.span_seconds,
                ..ScenarioOptions::default()
            };
            cmd_gen_trace(&opts, &mut out)?
        }
    }
    for p in out.written() {
        println!("wrote {}", p.display());
    }
    Ok(())
}

fn cmd_fit(cli: &Cli, k: usize, out: &mut OutDir) -> Result<()> {
    let records = io::trace(cli.trace.as_deref())?;
    let fit = fit_types_traced(&records, k, cli.seed.unwrap_or(0))?;
    println!(
        "{} types from {} records, {} iterations, sse {:.6}",
        fit.model.k,
        records.len(),
        fit.iterations,
        fit.sse.last().copied().unwrap_or(0.0)
    );
    out.json(
        "types.json",
        &TypesFile {
            schema_version: SCHEMA_VERSION,
            types: fit.model.workload_types(),
            model: fit.model,
        },
    )
}

fn series_for(cli: &Cli, k: usize) -> Result<(Vec<TraceRecord>, TypeModel, SpanSeries)> {
    let records = io::trace(cli.trace.as_deref())?;
    let tm = cli.type_model(&records, k)?;
    let series = bucketize(&records, &tm, cli.span_seconds);
    Ok((records, tm, series))
}

#[derive(Serialize)]
struct ForecastRow {
    schema_version: u32,
    span: u64,
    type_id: usize,
    predicted: f64,
    actual: Option<u64>,
}

#[derive(Serialize)]
struct PredictSummary<'a> {
    schema_version: u32,
    predictor: &'a str,
    next_span: u64,
    next: Vec<f64>,
    /// Over spans after the first; absent when a type never arrives.
    rrmse: Option<f64>,
    rrmse_last_value: Option<f64>,
}

fn cmd_predict(cli: &Cli, kind: PredictorKind, out: &mut OutDir) -> Result<()> {
    let (_, _, series) = series_for(cli, DEFAULT_K)?;
    let predictor = kind.build();
    let forecasts = rolling_forecasts(&series, predictor.as_ref());
    let next = forecast_next(&series, predictor.as_ref());
    let mut rows = Vec::new();
    for (f, s) in forecasts.iter().zip(&series.spans) {
        for (j, &p) in f.predicted.iter().enumerate() {
            rows.push(ForecastRow {
                schema_version: SCHEMA_VERSION,
                span: f.span_index,
                type_id: j,
                predicted: p,
                actual: Some(s.counts[j]),
            });
        }
    }
    for (j, &p) in next.predicted.iter().enumerate() {
        rows.push(ForecastRow {
            schema_version: SCHEMA_VERSION,
            span: next.span_index,
            type_id: j,
            predicted: p,
            actual: None,
        });
    }
    let actual: Vec<Vec<u64>> = series
        .spans
        .iter()
        .skip(1)
        .map(|s| s.counts.clone())
        .collect();
    let score = |p: &dyn Predictor| {
        let f: Vec<Vec<f64>> = rolling_forecasts(&series, p)
            .into_iter()
            .skip(1)
            .map(|f| f.predicted)
            .collect();
        rrmse(&f, &actual).ok()
    };
    let summary = PredictSummary {
        schema_version: SCHEMA_VERSION,
        predictor: predictor.name(),
        next_span: next.span_index,
        next: next.predicted.clone(),
        rrmse: score(predictor.as_ref()),
        rrmse_last_value: score(&LastValue),
    };
    println!("next span {}: {:?}", next.span_index, next.counts());
    out.csv("forecasts.csv", &rows)?;
    out.json("forecast.json", &summary)
}

#[derive(Serialize)]
struct AssignmentRow {
    schema_version: u32,
    replica: usize,
    devices: String,
    tp: u32,
    pp: u32,
    type_id: usize,
    x: u64,
    n: u64,
    e: u64,
}

#[derive(Serialize)]
struct ScheduleSummary<'a> {
    schema_version: u32,
    method: &'a str,
    span_index: u64,
    counts: &'a [u64],
    objective: u64,
    iterations: usize,
    label: String,
}

#[derive(Serialize)]
struct SearchLogRow<'a> {
    schema_version: u32,
    iteration: usize,
    op: &'a str,
    accepted: bool,
    throughput: u64,
}

fn cmd_schedule(
    cli: &Cli,
    counts: Option<&[u64]>,
    use_exhaustive: bool,
    search: &SearchArgs,
    search_log: bool,
    out: &mut OutDir,
) -> Result<()> {
    let env = cli.env()?;
    let (types, span) = match counts {
        Some(c) => {
            let Some(p) = &cli.types else {
                bail!("--counts needs --types to say which type each count belongs to");
            };
            let tm = io::types(p)?;
            if c.len() != tm.k {
                bail!(
                    "{} counts given for {} types in {}",
                    c.len(),
                    tm.k,
                    p.display()
                );
            }
            (tm.workload_types(), TraceSpan::new(0, c.to_vec()))
        }
        None => {
            let (_, tm, series) = series_for(cli, DEFAULT_K)?;
            let f = forecast_next(&series, &Holt::default());
            (tm.workload_types(), f.as_span())
        }
    };
    let setup = Setup {
        cluster: &env.cluster,
        model: &env.model,
        params: &env.params,
        types: &types,
        span_seconds: cli.span_seconds,
    };
    let opts = cli.search_options(search);
    let state: SearchState = if use_exhaustive {
        let d = env.cluster.device_count();
        if d > EXHAUSTIVE_LIMIT {
            bail!("--exhaustive supports at most {EXHAUSTIVE_LIMIT} devices, cluster has {d}");
        }
        exhaustive(setup.instance(), &span, opts.exact_budget)?
    } else {
        schedule_span(&setup, &span, None, &opts, search.restarts)?
    };
    let table = build_capacity_table(
        &state.deployment,
        &types,
        &env.model,
        &env.params,
        cli.span_seconds,
        &env.cluster,
    )?;
    let mut rows = Vec::new();
    for (k, r) in state.deployment.replicas.iter().enumerate() {
        let devices = r
            .device_ids
            .iter()
            .map(u32::to_string)
            .collect::<Vec<_>>()
            .join(" ");
        for j in 0..types.len() {
            rows.push(AssignmentRow {
                schema_version: SCHEMA_VERSION,
                replica: k,
                devices: devices.clone(),
                tp: r.tp,
                pp: r.pp,
                type_id: j,
                x: state.assignment.x[k][j],
                n: table.n[k][j],
                e: table.e[k][j],
            });
        }
    }
    println!(
        "objective {} of {} requests on {} replicas ({})",
        state.throughput,
        span.total(),
        state.deployment.len(),
        deployment_label(&state.deployment)
    );
    out.json("deployment.json", &state.deployment)?;
    out.csv("assignment.csv", &rows)?;
    out.json(
        "schedule.json",
        &ScheduleSummary {
            schema_version: SCHEMA_VERSION,
            method: if use_exhaustive {
                "exhaustive"
            } else {
                "search"
            },
            span_index: span.span_index,
            counts: &span.counts,
            objective: state.throughput,
            iterations: state.iterations,
            label: deployment_label(&state.deployment),
        },
    )?;
    if search_log {
        let log: Vec<SearchLogRow> = state
            .log
            .iter()
            .map(|s| SearchLogRow {
                schema_version: SCHEMA_VERSION,
                iteration: s.iteration,
                op: &s.op,
                accepted: s.accepted,
                throughput: s.throughput,
            })
            .collect();
        out.csv("search_log.csv", &log)?;
    }
    Ok(())
}

#[derive(Serialize)]
struct SwitchSummary<'a> {
    schema_version: u32,
    method: &'a str,
    est_seconds: f64,
    bytes_moved: u64,
    #[serde(flatten)]
    plan: &'a hetserve::switchplan::SwitchPlan,
}

fn cmd_switch_plan(cli: &Cli, from: &Path, to: &Path, naive: bool, out: &mut OutDir) -> Result<()> {
    let env = cli.env()?;
    let src = io::deployment(from, &env.cluster)?;
    let dst = io::deployment(to, &env.cluster)?;
    let (a, b) = (layout(&src, &env.model), layout(&dst, &env.model));
    let plan = if naive {
        naive_plan(&a, &b, &env.cluster)?
    } else {
        greedy_plan(&a, &b, &env.cluster)?
    };
    let bytes_moved = plan.transfers.iter().map(|t| t.range.len()).sum();
    println!(
        "{} transfers, {} bytes, est {:.3} s",
        plan.transfers.len(),
        bytes_moved,
        plan.est_seconds
    );
    out.json(
        "switch_plan.json",
        &SwitchSummary {
            schema_version: SCHEMA_VERSION,
            method: if naive { "naive" } else { "greedy" },
            est_seconds: plan.est_seconds,
            bytes_moved,
            plan: &plan,
        },
    )
}

#[derive(Serialize)]
struct MetricsRow<'a> {
    schema_version: u32,
    name: &'a str,
    deployment: &'a str,
    switches: usize,
    requests: usize,
    avg: f64,
    p90: f64,
    p95: f64,
    p96: f64,
    p97: f64,
    p98: f64,
    p99: f64,
    throughput: f64,
    completed_in_horizon: usize,
    horizon_seconds: f64,
}

impl<'a> MetricsRow<'a> {
    fn new(name: &'a str, deployment: &'a str, switches: usize, r: &MetricsReport) -> Self {
        MetricsRow {
            schema_version: SCHEMA_VERSION,
            name,
            deployment,
            switches,
            requests: r.requests,
            avg: r.avg,
            p90: r.p90,
            p95: r.p95,
            p96: r.p96,
            p97: r.p97,
            p98: r.p98,
            p99: r.p99,
            throughput: r.throughput,
            completed_in_horizon: r.completed_in_horizon,
            horizon_seconds: r.horizon_seconds,
        }
    }

    fn of(row: &'a ComparisonRow) -> Self {
        MetricsRow::new(&row.name, &row.deployment, row.switches, &row.report)
    }
}

#[derive(Serialize)]
struct SpanRow<'a> {
    schema_version: u32,
    name: &'a str,
    span: u64,
    requests: usize,
    avg: f64,
    p99: f64,
}

fn span_rows<'a>(name: &'a str, r: &MetricsReport) -> Vec<SpanRow<'a>> {
    r.per_span
        .iter()
        .map(|s| SpanRow {
            schema_version: SCHEMA_VERSION,
            name,
            span: s.span,
            requests: s.requests,
            avg: s.avg,
            p99: s.p99,
        })
        .collect()
}

#[derive(Serialize)]
struct OutcomeRow {
    schema_version: u32,
    id: u64,
    type_id: usize,
    arrival: f64,
    start: f64,
    finish: f64,
    latency: f64,
    entry: usize,
    replica: usize,
}

fn cmd_simulate(
    cli: &Cli,
    timeline: Option<&Path>,
    deployment: Option<&Path>,
    outcomes: bool,
    out: &mut OutDir,
) -> Result<()> {
    let env = cli.env()?;
    let (records, tm, series) = series_for(cli, DEFAULT_K)?;
    let types = tm.workload_types();
    let setup = Setup {
        cluster: &env.cluster,
        model: &env.model,
        params: &env.params,
        types: &types,
        span_seconds: cli.span_seconds,
    };
    let (t, label): (StrategyTimeline, String) = match (timeline, deployment) {
        (Some(p), _) => (io::timeline(p)?, "timeline".into()),
        (None, Some(p)) => {
            let d = io::deployment(p, &env.cluster)?;
            let forecasts = rolling_forecasts(&series, &Holt::default());
            let label = deployment_label(&d);
            (
                static_timeline(
                    &setup,
                    &d,
                    &forecasts,
                    SearchOptions::default().exact_budget,
                )?,
                label,
            )
        }
        (None, None) => bail!("simulate needs --timeline or --deployment"),
    };
    let reqs = label_requests(&records, &tm);
    let sim: Simulation = run(&reqs, &t, setup.sim_context()).context("simulating the trace")?;
    let r = &sim.report;
    println!(
        "{} requests, avg {:.3} s, p99 {:.3} s, throughput {:.4} req/s",
        r.requests, r.avg, r.p99, r.throughput
    );
    let switches = t
        .entries
        .windows(2)
        .filter(|w| w[0].deployment != w[1].deployment)
        .count();
    out.csv(
        "metrics.csv",
        &[MetricsRow::new("simulated", &label, switches, r)],
    )?;
    out.csv("per_span.csv", &span_rows("simulated", r))?;
    if outcomes {
        let rows: Vec<OutcomeRow> = sim
            .outcomes
            .iter()
            .map(|o| OutcomeRow {
                schema_version: SCHEMA_VERSION,
                id: o.id,
                type_id: o.type_id,
                arrival: o.arrival,
                start: o.start,
                finish: o.finish,
                latency: o.latency,
                entry: o.entry,
                replica: o.replica,
            })
            .collect();
        out.csv("outcomes.csv", &rows)?;
    }
    Ok(())
}

fn cmd_orchestrate(
    cli: &Cli,
    opts: OrchestrateOptions,
    kind: PredictorKind,
    k: usize,
    out: &mut OutDir,
) -> Result<()> {
    let env = cli.env()?;
    let (records, tm, series) = series_for(cli, k)?;
    let types = tm.workload_types();
    let setup = Setup {
        cluster: &env.cluster,
        model: &env.model,
        params: &env.params,
        types: &types,
        span_seconds: cli.span_seconds,
    };
    let reqs = label_requests(&records, &tm);
    let predictor = kind.build();
    let o = orchestrate(&setup, &series, &reqs, predictor.as_ref(), &opts)?;

    for r in &o.rows {
        println!(
            "{:<13} {:<10} p99 {:>9.3} s  avg {:>9.3} s  throughput {:.4} req/s",
            r.name, r.deployment, r.report.p99, r.report.avg, r.report.throughput
        );
    }
    let rows: Vec<MetricsRow> = o
        .rows
        .iter()
        .chain(&o.statics)
        .map(MetricsRow::of)
        .collect();
    out.json(
        "timeline.json",
        &TimelineFile {
            schema_version: SCHEMA_VERSION,
            timeline: o.planned.timeline.clone(),
        },
    )?;
    out.csv("metrics.csv", &rows)?;
    let mut per_span = Vec::new();
    for r in &o.rows {
        per_span.extend(span_rows(&r.name, &r.report));
    }
    out.csv("per_span.csv", &per_span)?;
    let mut fc = Vec::new();
    for (f, planned) in o
        .planned
        .forecasts
        .iter()
        .zip(&o.planned.planned_throughput)
    {
        for (j, &p) in f.predicted.iter().enumerate() {
            let actual = series
                .spans
                .iter()
                .find(|s| s.span_index == f.span_index)
                .map(|s| s.counts[j]);
            fc.push(PlanRow {
                schema_version: SCHEMA_VERSION,
                span: f.span_index,
                type_id: j,
                predicted: p,
                actual,
                planned_objective: *planned,
            });
        }
    }
    out.csv("forecasts.csv", &fc)
}

#[derive(Serialize)]
struct PlanRow {
    schema_version: u32,
    span: u64,
    type_id: usize,
    predicted: f64,
    actual: Option<u64>,
    planned_objective: u64,
}

#[derive(Serialize)]
struct ScenarioFile<'a> {
    schema_version: u32,
    options: &'a ScenarioOptions,
    phase_rates: &'a [Vec<f64>],
    generating_types: &'a [hetserve::WorkloadType],
    records: usize,
}

fn cmd_gen_trace(opts: &ScenarioOptions, out: &mut OutDir) -> Result<()> {
    let sc = mixed_shift(opts)?;
    println!("{} records over {} spans", sc.records.len(), opts.spans);
    out.text("trace.jsonl", &write_trace(&sc.records))?;
    out.json("cluster.json", &Versioned::new(&sc.cluster))?;
    out.json("model.json", &Versioned::new(&sc.model))?;
    out.text("profile.json", &(sc.params.to_json("default") + "\n"))?;
    out.json(
        "scenario.json",
        &ScenarioFile {
            schema_version: SCHEMA_VERSION,
            options: opts,
            phase_rates: &sc.phase_rates,
            generating_types: &sc.types,
            records: sc.records.len(),
        },
    )
}

#[derive(Serialize)]
struct Versioned<'a, T: Serialize> {
    schema_version: u32,
    #[serde(flatten)]
    inner: &'a T,
}

impl<'a, T: Serialize> Versioned<'a, T> {
    fn new(inner: &'a T) -> Self {
        Versioned {
            schema_version: SCHEMA_VERSION,
            inner,
        }
    }
}
