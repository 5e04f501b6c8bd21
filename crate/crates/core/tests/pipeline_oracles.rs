use hetserve::pipeline::*;
use hetserve::scenario::*;
use hetserve::sim::label_requests;
use hetserve::workload::*;
use hetserve::*;

fn constant_records(spans: u64, per_span: u64) -> Vec<TraceRecord> {
    let mut out = Vec::new();
    for s in 0..spans {
        for i in 0..per_span {
            let long = i % 5 == 0;
            out.push(TraceRecord {
                arrival_ms: s * 60_000 + i * 60_000 / per_span,
                input_len: if long { 400 } else { 1200 },
                output_len: if long { 2500 } else { 30 },
            });
        }
    }
    out
}

#[test]
fn constant_trace_collapses_to_one_entry() {
    let records = constant_records(6, 200);
    let tm = fit_types(&records, 2, 0).unwrap();
    let types = tm.workload_types();
    let (cluster, model, params) = (scenario_cluster(), scenario_model(), Default::default());
    let setup = Setup {
        cluster: &cluster,
        model: &model,
        params: &params,
        types: &types,
        span_seconds: 60.0,
    };
    let series = bucketize(&records, &tm, 60.0);
    assert!(series
        .spans
        .iter()
        .all(|s| s.counts == series.spans[0].counts));
    let reqs = label_requests(&records, &tm);
    let o = orchestrate(
        &setup,
        &series,
        &reqs,
        &Holt::default(),
        &OrchestrateOptions::default(),
    )
    .unwrap();
    assert_eq!(o.planned.timeline.entries.len(), 1);
    assert_eq!(o.rows[0].switches, 0);
    // with no switches the reload baseline is the same run
    assert_eq!(o.rows[0].report, o.rows[2].report);
}

#[test]
fn comparison_has_three_rows_and_every_static() {
    let records = constant_records(3, 100);
    let tm = fit_types(&records, 2, 0).unwrap();
    let types = tm.workload_types();
    let (cluster, model, params) = (scenario_cluster(), scenario_model(), Default::default());
    let setup = Setup {
        cluster: &cluster,
        model: &model,
        params: &params,
        types: &types,
        span_seconds: 60.0,
    };
    let series = bucketize(&records, &tm, 60.0);
    let reqs = label_requests(&records, &tm);
    let o = orchestrate(
        &setup,
        &series,
        &reqs,
        &LastValue,
        &OrchestrateOptions::default(),
    )
    .unwrap();
    let names: Vec<&str> = o.rows.iter().map(|r| r.name.as_str()).collect();
    assert_eq!(names, ["orchestrated", "static-best", "reload"]);
    assert_eq!(
        o.statics.len(),
        homogeneous_deployments(&cluster, &model).len()
    );
    let best = o
        .statics
        .iter()
        .map(|r| r.report.p99)
        .fold(f64::INFINITY, f64::min);
    assert_eq!(o.rows[1].report.p99, best);
}

#[test]
fn homogeneous_deployments_tile_the_cluster() {
    let (cluster, model) = (scenario_cluster(), scenario_model());
    let deps = homogeneous_deployments(&cluster, &model);
    let labels: Vec<String> = deps.iter().map(deployment_label).collect();
    // a 60 GB model fits on one 80 GB device; tp8 would cross machines
    assert_eq!(
        labels,
        [
            "tp1pp1x8", "tp2pp1x4", "tp1pp2x4", "tp4pp1x2", "tp2pp2x2", "tp1pp4x2", "tp4pp2x1",
            "tp2pp4x1", "tp1pp8x1"
        ]
    );
    for d in &deps {
        assert_eq!(d.device_count(), 8);
        d.validate(&cluster).unwrap();
    }
}

#[test]
fn scenario_phases_flip_the_mix() {
    let sc = mixed_shift(&ScenarioOptions {
        spans: 4,
        ..Default::default()
    })
    .unwrap();
    let (a, b) = (&sc.phase_rates[0], &sc.phase_rates[1]);
    assert!(a[1] > 0.0 && b[0] > 0.0);
    // the long type's share of arrivals rises sharply in the first half
    assert!(a[1] / (a[0] + a[1]) > 3.0 * b[1] / (b[0] + b[1]));
    assert!(sc
        .records
        .windows(2)
        .all(|w| w[0].arrival_ms <= w[1].arrival_ms));
    assert!(sc.records.iter().all(|r| r.arrival_ms < 4 * 60_000));
}
