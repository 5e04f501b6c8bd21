//! Upper-level optimization: choose the device partition and the (tp, pp)
//! strategy of every replica.
//!
//! The heuristic starts from a uniform pure-tensor-parallel deployment and
//! repeatedly mutates it using the flow assignment as feedback: replicas
//! that are bottlenecks merge or take devices, idle ones split or give
//! devices away. A candidate is kept only if its best strategy combination
//! strictly raises the served-request objective. [`exhaustive`] enumerates
//! every shape multiset for small clusters and serves as the reference.

use std::collections::HashMap;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::costmodel::{table_for_shapes, ProfileParams, ReplicaShape};
use crate::error::{Error, Result};
use crate::flowassign::{normalize_or_scale, solve_with_budget, AssignmentMatrix};
use crate::types::{
    ClusterSpec, Deployment, DeviceId, ModelSpec, ReplicaConfig, TraceSpan, WorkloadType,
};

/// Everything the objective depends on besides the deployment itself.
#[derive(Debug, Clone, Copy)]
pub struct Instance<'a> {
    pub cluster: &'a ClusterSpec,
    pub model: &'a ModelSpec,
    pub params: &'a ProfileParams,
    pub types: &'a [WorkloadType],
    pub span_seconds: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SearchOptions {
    pub seed: u64,
    pub max_iters: usize,
    pub stale_limit: usize,
    /// DP budget handed to the assignment solver for each evaluation.
    pub exact_budget: u64,
}

impl Default for SearchOptions {
    fn default() -> Self {
        SearchOptions {
            seed: 0,
            max_iters: 500,
            stale_limit: 20,
            exact_budget: 200_000,
        }
    }
}

/// Retries per iteration before a mutation is declared infeasible.
pub const MUTATION_RETRIES: usize = 8;

/// Strategy grids larger than this are optimized one replica at a time.
pub const MAX_GRID: usize = 4096;

/// Device-count guard for [`exhaustive`].
pub const EXHAUSTIVE_LIMIT: usize = 16;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SearchStep {
    pub iteration: usize,
    /// Operations of the round, `none` when no feasible mutation was found.
    pub op: String,
    pub ops: Vec<Op>,
    pub accepted: bool,
    /// Objective of the deployment held after this iteration.
    pub throughput: u64,
    /// Replica and device counts of that deployment.
    pub replicas: usize,
    pub devices: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchState {
    pub deployment: Deployment,
    pub assignment: AssignmentMatrix,
    /// Requests served per span under the best assignment.
    pub throughput: u64,
    pub rng_seed: u64,
    pub stale_iters: usize,
    pub iterations: usize,
    pub log: Vec<SearchStep>,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct UtilizationReport {
    pub overutilized: Vec<usize>,
    pub underutilized: Vec<usize>,
}

/// Scores deployments, memoized by their multiset of replica shapes.
pub struct Evaluator<'a> {
    inst: Instance<'a>,
    span: TraceSpan,
    budget: u64,
    cache: HashMap<Vec<ReplicaShape>, u64>,
    pub evaluations: usize,
}

impl<'a> Evaluator<'a> {
    pub fn new(inst: Instance<'a>, span: &TraceSpan, exact_budget: u64) -> Self {
        Evaluator {
            inst,
            span: span.clone(),
            budget: exact_budget,
            cache: HashMap::new(),
            evaluations: 0,
        }
    }

    fn solve_sorted(&self, shapes: &[ReplicaShape]) -> AssignmentMatrix {
        let table = table_for_shapes(
            shapes,
            self.inst.types,
            self.inst.model,
            self.inst.params,
            self.inst.span_seconds,
        );
        solve_with_budget(&self.span, &table, self.budget)
            .unwrap_or_else(|_| AssignmentMatrix::zeros(shapes.len(), self.span.counts.len()))
    }

    /// Objective for a multiset of shapes.
    pub fn phi_shapes(&mut self, shapes: &[ReplicaShape]) -> u64 {
        let mut key = shapes.to_vec();
        key.sort();
        if let Some(&v) = self.cache.get(&key) {
            return v;
        }
        self.evaluations += 1;
        let v = if key.is_empty() {
            0
        } else {
            self.solve_sorted(&key).objective
        };
        self.cache.insert(key, v);
        v
    }

    pub fn phi(&mut self, dep: &Deployment) -> u64 {
        let shapes: Vec<_> = dep
            .replicas
            .iter()
            .map(|r| ReplicaShape::of(r, self.inst.cluster))
            .collect();
        self.phi_shapes(&shapes)
    }

    /// Objective and assignment for a deployment, in its replica order. The
    /// solve runs in shape order so the objective matches [`Self::phi`].
    pub fn evaluate(&mut self, dep: &Deployment) -> (u64, AssignmentMatrix) {
        let shapes: Vec<_> = dep
            .replicas
            .iter()
            .map(|r| ReplicaShape::of(r, self.inst.cluster))
            .collect();
        let mut order: Vec<usize> = (0..shapes.len()).collect();
        order.sort_by(|&a, &b| shapes[a].cmp(&shapes[b]).then(a.cmp(&b)));
        let sorted: Vec<_> = order.iter().map(|&i| shapes[i]).collect();
        let solved = if sorted.is_empty() {
            AssignmentMatrix::zeros(0, self.span.counts.len())
        } else {
            self.solve_sorted(&sorted)
        };
        let mut x = vec![Vec::new(); shapes.len()];
        for (pos, &i) in order.iter().enumerate() {
            x[i] = solved.x[pos].clone();
        }
        let a = AssignmentMatrix::new(x);
        let key = {
            let mut k = sorted;
            k.sort();
            k
        };
        self.cache.insert(key, a.objective);
        (a.objective, a)
    }
}

/// Valid, memory-feasible strategies for a device set: tp descending.
pub fn candidate_strategies(
    devices: &[DeviceId],
    cluster: &ClusterSpec,
    model: &ModelSpec,
) -> Vec<ReplicaConfig> {
    let d = devices.len() as u32;
    let mut out = Vec::new();
    for tp in (1..=d).rev() {
        if d % tp != 0 {
            continue;
        }
        let cfg = ReplicaConfig::new(devices.to_vec(), tp, d / tp);
        if cfg.is_valid(cluster) && crate::costmodel::memory_feasible(&cfg, model, cluster) {
            out.push(cfg);
        }
    }
    out
}

/// Smallest replica size that can host the model.
pub fn min_replica_devices(cluster: &ClusterSpec, model: &ModelSpec) -> Result<usize> {
    let devices = cluster.devices();
    for g in 1..=devices.len() {
        // the first g devices in id order are as good a probe as any on a
        // uniform cluster; try every machine-aligned window to be safe
        for start in 0..=devices.len() - g {
            if !candidate_strategies(&devices[start..start + g], cluster, model).is_empty() {
                return Ok(g);
            }
        }
    }
    Err(Error::ModelTooLarge {
        devices: devices.len(),
    })
}

/// `floor(c_m / g)` pure-tensor-parallel replicas of `g = g_min` devices on
/// each machine (or, when one machine is too small, contiguous cross-machine
/// replicas). Devices that do not fill a replica stay unassigned.
pub fn init_uniform(cluster: &ClusterSpec, model: &ModelSpec) -> Result<Deployment> {
    let g = min_replica_devices(cluster, model)?;
    let mut replicas = Vec::new();
    if g <= cluster.max_devices_per_machine() {
        for m in &cluster.machines {
            let mut ids = m.device_ids.clone();
            ids.sort_unstable();
            for chunk in ids.chunks_exact(g) {
                if let Some(cfg) = candidate_strategies(chunk, cluster, model)
                    .into_iter()
                    .next()
                {
                    replicas.push(cfg);
                }
            }
        }
    }
    if replicas.is_empty() {
        let devices = cluster.devices();
        for chunk in devices.chunks_exact(g) {
            if let Some(cfg) = candidate_strategies(chunk, cluster, model)
                .into_iter()
                .next()
            {
                replicas.push(cfg);
            }
        }
    }
    if replicas.is_empty() {
        return Err(Error::ModelTooLarge {
            devices: cluster.device_count(),
        });
    }
    Ok(Deployment::new(replicas).canonical())
}

/// Hands unassigned devices to replicas so that every device is used. Each
/// leftover joins the smallest replica on its machine that stays feasible,
/// else any replica, else forms a replica with other leftovers.
pub fn absorb_leftovers(dep: &Deployment, cluster: &ClusterSpec, model: &ModelSpec) -> Deployment {
    let used = dep.devices();
    let leftovers: Vec<DeviceId> = cluster
        .devices()
        .into_iter()
        .filter(|d| !used.contains(d))
        .collect();
    if leftovers.is_empty() {
        return dep.clone();
    }
    let mut sets: Vec<Vec<DeviceId>> = dep.replicas.iter().map(|r| r.device_ids.clone()).collect();
    let mut stranded = Vec::new();
    for d in leftovers {
        let machine = cluster.machine_of(d);
        let mut order: Vec<usize> = (0..sets.len()).collect();
        order.sort_by_key(|&i| {
            let same = sets[i].iter().any(|&x| cluster.machine_of(x) == machine);
            (!same, sets[i].len(), i)
        });
        let target = order.into_iter().find(|&i| {
            let mut s = sets[i].clone();
            s.push(d);
            s.sort_unstable();
            !candidate_strategies(&s, cluster, model).is_empty()
        });
        match target {
            Some(i) => {
                sets[i].push(d);
                sets[i].sort_unstable();
            }
            None => stranded.push(d),
        }
    }
    if !stranded.is_empty() && !candidate_strategies(&stranded, cluster, model).is_empty() {
        sets.push(stranded);
    }
    let replicas = sets
        .iter()
        .map(|s| {
            candidate_strategies(s, cluster, model)
                .into_iter()
                .next()
                .expect("absorbed sets stay feasible")
        })
        .collect();
    Deployment::new(replicas).canonical()
}

/// Splits replicas into bottlenecks and the rest.
///
/// A replica with traffic is overutilized when its joint budget is spent
/// (no type it serves fits one more request), or when it is blocked on a
/// type whose demand is not fully served. Everything else, including
/// replicas that carry nothing, is underutilized.
pub fn classify(
    assignment: &AssignmentMatrix,
    n: &[Vec<u64>],
    e: &[Vec<u64>],
    demand: &[u64],
) -> UtilizationReport {
    let served = assignment.served_per_type();
    let mut report = UtilizationReport::default();
    for (k, row) in assignment.x.iter().enumerate() {
        let norm = normalize_or_scale(&n[k]);
        let used = norm.load(row).unwrap_or(u128::MAX);
        let slack = u128::from(norm.m).saturating_sub(used);
        let blocked = |j: usize| match norm.units[j] {
            None => true,
            Some(u) => row[j] >= e[k][j].min(n[k][j]) || slack < u128::from(u),
        };
        let serves: Vec<usize> = (0..row.len())
            .filter(|&j| norm.units[j].is_some() && e[k][j] > 0)
            .collect();
        let busy = row.iter().sum::<u64>() > 0;
        let full = !serves.is_empty() && serves.iter().all(|&j| blocked(j));
        let bottleneck = serves.iter().any(|&j| served[j] < demand[j] && blocked(j));
        if busy && (full || bottleneck) {
            report.overutilized.push(k);
        } else {
            report.underutilized.push(k);
        }
    }
    report
}

/// Best strategy per device set, by enumerating the product grid of each
/// set's candidates (deduplicated as shape multisets). Ties prefer fewer
/// pipeline stages in total, then larger tp in replica order. Returns
/// `None` when some set admits no feasible strategy.
pub fn enumerate_strategies(
    sets: &[Vec<DeviceId>],
    eval: &mut Evaluator,
) -> Option<(Deployment, u64)> {
    let cluster = eval.inst.cluster;
    let model = eval.inst.model;
    let mut sets: Vec<Vec<DeviceId>> = sets.to_vec();
    sets.iter_mut().for_each(|s| s.sort_unstable());
    sets.sort();
    let cands: Vec<Vec<ReplicaConfig>> = sets
        .iter()
        .map(|s| candidate_strategies(s, cluster, model))
        .collect();
    if cands.iter().any(Vec::is_empty) {
        return None;
    }
    let shapes: Vec<Vec<ReplicaShape>> = cands
        .iter()
        .map(|c| c.iter().map(|r| ReplicaShape::of(r, cluster)).collect())
        .collect();
    let grid: usize = cands
        .iter()
        .try_fold(1usize, |acc, c| acc.checked_mul(c.len()))
        .unwrap_or(usize::MAX);

    // preference key: higher phi, then fewer total pp, then tp vector desc
    let better = |phi: u64, pick: &[usize], best: &Option<(u64, Vec<usize>)>| -> bool {
        let Some((bphi, bpick)) = best else {
            return true;
        };
        if phi != *bphi {
            return phi > *bphi;
        }
        let pp = |p: &[usize]| -> u32 { p.iter().zip(&cands).map(|(&i, c)| c[i].pp).sum() };
        let (a, b) = (pp(pick), pp(bpick));
        if a != b {
            return a < b;
        }
        let tps =
            |p: &[usize]| -> Vec<u32> { p.iter().zip(&cands).map(|(&i, c)| c[i].tp).collect() };
        tps(pick) > tps(bpick)
    };

    let mut best: Option<(u64, Vec<usize>)> = None;
    if grid <= MAX_GRID {
        let mut pick = vec![0usize; cands.len()];
        loop {
            let s: Vec<ReplicaShape> = pick.iter().zip(&shapes).map(|(&i, sh)| sh[i]).collect();
            let phi = eval.phi_shapes(&s);
            if better(phi, &pick, &best) {
                best = Some((phi, pick.clone()));
            }
            let mut i = 0;
            while i < pick.len() {
                pick[i] += 1;
                if pick[i] < cands[i].len() {
                    break;
                }
                pick[i] = 0;
                i += 1;
            }
            if i == pick.len() {
                break;
            }
        }
    } else {
        // coordinate ascent from the pure-tp pick
        let mut pick = vec![0usize; cands.len()];
        let s: Vec<ReplicaShape> = pick.iter().zip(&shapes).map(|(&i, sh)| sh[i]).collect();
        best = Some((eval.phi_shapes(&s), pick.clone()));
        for _pass in 0..3 {
            let mut moved = false;
            for r in 0..cands.len() {
                for c in 0..cands[r].len() {
                    if c == pick[r] {
                        continue;
                    }
                    let mut trial = pick.clone();
                    trial[r] = c;
                    let s: Vec<ReplicaShape> =
                        trial.iter().zip(&shapes).map(|(&i, sh)| sh[i]).collect();
                    let phi = eval.phi_shapes(&s);
                    if better(phi, &trial, &best) {
                        best = Some((phi, trial.clone()));
                        pick = trial;
                        moved = true;
                    }
                }
            }
            if !moved {
                break;
            }
        }
    }
    let (phi, pick) = best?;
    let replicas = pick
        .iter()
        .zip(&cands)
        .map(|(&i, c)| c[i].clone())
        .collect();
    Some((Deployment::new(replicas), phi))
}

/// One device-set operation. Indices refer to replicas of the deployment
/// the round started from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Op {
    /// Replica `into` absorbs all devices of `from`.
    Merge { into: usize, from: usize },
    /// `delta` devices move from replica `from` to `to`.
    Swap {
        from: usize,
        to: usize,
        delta: usize,
    },
    /// The replica splits into two halves in device-id order.
    Split { replica: usize },
}

impl std::fmt::Display for Op {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Op::Merge { into, from } => write!(f, "merge({into}<{from})"),
            Op::Swap { from, to, delta } => write!(f, "swap({from}>{to}:{delta})"),
            Op::Split { replica } => write!(f, "split({replica})"),
        }
    }
}

/// Device sets after applying `ops` in order to `deployment`'s replicas.
/// Operations that refer to an emptied replica or cannot apply are skipped.
pub fn apply_ops(deployment: &Deployment, ops: &[Op], cluster: &ClusterSpec) -> Vec<Vec<DeviceId>> {
    let mut sets: Vec<Option<Vec<DeviceId>>> = deployment
        .replicas
        .iter()
        .map(|r| Some(r.device_ids.clone()))
        .collect();
    let mut extra = Vec::new();
    for &op in ops {
        apply_op(&mut sets, &mut extra, op, cluster);
    }
    let mut out: Vec<Vec<DeviceId>> = sets
        .into_iter()
        .flatten()
        .filter(|s| !s.is_empty())
        .collect();
    out.extend(extra);
    out
}

fn apply_op(
    sets: &mut [Option<Vec<DeviceId>>],
    extra: &mut Vec<Vec<DeviceId>>,
    op: Op,
    cluster: &ClusterSpec,
) -> bool {
    match op {
        Op::Merge { into, from } => {
            if into == from || sets[into].is_none() || sets[from].is_none() {
                return false;
            }
            let taken = sets[from].take().unwrap_or_default();
            let s = sets[into].as_mut().expect("checked");
            s.extend(taken);
            s.sort_unstable();
            true
        }
        Op::Swap { from, to, delta } => {
            if from == to || sets[from].is_none() || sets[to].is_none() {
                return false;
            }
            move_devices(sets, from, to, delta, cluster);
            true
        }
        Op::Split { replica } => match sets[replica].as_mut() {
            Some(s) if s.len() >= 2 => {
                let tail = s.split_off(s.len() / 2);
                extra.push(tail);
                true
            }
            _ => false,
        },
    }
}

/// Applies one round of merge/split/swap operations against the snapshot
/// `report`: each overutilized replica merges with another overutilized one
/// or takes a stage's worth of devices from an underutilized one; each
/// underutilized replica splits or gives a stage's worth of devices to an
/// overutilized one. Rounds that change nothing or leave a device set
/// without a feasible strategy are redrawn, up to [`MUTATION_RETRIES`]
/// times. Returns the new device sets and the operations applied.
pub fn mutate(
    deployment: &Deployment,
    report: &UtilizationReport,
    cluster: &ClusterSpec,
    model: &ModelSpec,
    rng: &mut ChaCha8Rng,
) -> Result<(Vec<Vec<DeviceId>>, Vec<Op>)> {
    let before: Vec<Vec<DeviceId>> = {
        let mut v: Vec<_> = deployment
            .replicas
            .iter()
            .map(|r| r.device_ids.clone())
            .collect();
        v.sort();
        v
    };
    for _ in 0..MUTATION_RETRIES {
        let ops = draw_ops(deployment, report, cluster, rng);
        let mut sets = apply_ops(deployment, &ops, cluster);
        sets.sort();
        if ops.is_empty() || sets == before {
            continue;
        }
        if sets
            .iter()
            .all(|s| !candidate_strategies(s, cluster, model).is_empty())
        {
            return Ok((sets, ops));
        }
    }
    Err(Error::NoFeasibleMutation)
}

fn draw_ops(
    deployment: &Deployment,
    report: &UtilizationReport,
    cluster: &ClusterSpec,
    rng: &mut ChaCha8Rng,
) -> Vec<Op> {
    let mut sets: Vec<Option<Vec<DeviceId>>> = deployment
        .replicas
        .iter()
        .map(|r| Some(r.device_ids.clone()))
        .collect();
    let tp: Vec<usize> = deployment
        .replicas
        .iter()
        .map(|r| r.tp.max(1) as usize)
        .collect();
    let mut extra = Vec::new();
    let mut ops = Vec::new();
    let alive = |sets: &[Option<Vec<DeviceId>>], ids: &[usize], skip: usize| -> Vec<usize> {
        ids.iter()
            .copied()
            .filter(|&i| i != skip && sets[i].is_some())
            .collect()
    };
    let mut push = |sets: &mut [Option<Vec<DeviceId>>], extra: &mut Vec<Vec<DeviceId>>, op: Op| {
        if apply_op(sets, extra, op, cluster) {
            ops.push(op);
        }
    };

    for &r in &report.overutilized {
        if sets[r].is_none() {
            continue;
        }
        if rng.random_bool(0.5) {
            if let Some(&from) = alive(&sets, &report.overutilized, r).choose(rng) {
                push(&mut sets, &mut extra, Op::Merge { into: r, from });
            }
        } else if let Some(&u) = alive(&sets, &report.underutilized, r).choose(rng) {
            push(
                &mut sets,
                &mut extra,
                Op::Swap {
                    from: u,
                    to: r,
                    delta: tp[u],
                },
            );
        }
    }
    for &r in &report.underutilized {
        if sets[r].is_none() {
            continue;
        }
        if rng.random_bool(0.5) {
            push(&mut sets, &mut extra, Op::Split { replica: r });
        } else if let Some(&o) = alive(&sets, &report.overutilized, r).choose(rng) {
            push(
                &mut sets,
                &mut extra,
                Op::Swap {
                    from: r,
                    to: o,
                    delta: tp[r],
                },
            );
        }
    }
    ops
}

/// Moves `delta` devices from replica `from` to `to`, preferring devices on
/// machines `to` already uses, then the highest ids.
fn move_devices(
    sets: &mut [Option<Vec<DeviceId>>],
    from: usize,
    to: usize,
    delta: usize,
    cluster: &ClusterSpec,
) {
    let to_machines: Vec<Option<usize>> = sets[to]
        .as_ref()
        .map(|s| s.iter().map(|&d| cluster.machine_of(d)).collect())
        .unwrap_or_default();
    let Some(src) = sets[from].as_mut() else {
        return;
    };
    let mut order = src.clone();
    order.sort_by_key(|&d| {
        let shared = to_machines.contains(&cluster.machine_of(d));
        (!shared, std::cmp::Reverse(d))
    });
    let moved: Vec<DeviceId> = order.into_iter().take(delta.min(src.len())).collect();
    src.retain(|d| !moved.contains(d));
    if src.is_empty() {
        sets[from] = None;
    }
    if let Some(dst) = sets[to].as_mut() {
        dst.extend(moved);
        dst.sort_unstable();
    }
}

/// Heuristic search from the uniform initial deployment.
pub fn search(inst: Instance, span: &TraceSpan, opts: &SearchOptions) -> Result<SearchState> {
    let init = init_uniform(inst.cluster, inst.model)?;
    search_from(inst, span, &init, opts)
}

/// Heuristic search from a given deployment (warm start). Unused devices
/// are absorbed before the first iteration.
pub fn search_from(
    inst: Instance,
    span: &TraceSpan,
    start: &Deployment,
    opts: &SearchOptions,
) -> Result<SearchState> {
    let mut eval = Evaluator::new(inst, span, opts.exact_budget);
    search_with(&mut eval, span, start, opts)
}

/// [`search_from`] with a caller-owned evaluator, so its cache can be
/// shared across calls.
pub fn search_with(
    eval: &mut Evaluator,
    span: &TraceSpan,
    start: &Deployment,
    opts: &SearchOptions,
) -> Result<SearchState> {
    let inst = eval.inst;
    let full = absorb_leftovers(start, inst.cluster, inst.model);
    let sets: Vec<Vec<DeviceId>> = full.replicas.iter().map(|r| r.device_ids.clone()).collect();
    let (mut deployment, _) = enumerate_strategies(&sets, eval).ok_or(Error::ModelTooLarge {
        devices: inst.cluster.device_count(),
    })?;
    let (mut throughput, mut assignment) = eval.evaluate(&deployment);
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut stale = 0;
    let mut iterations = 0;
    let mut log = Vec::new();

    while iterations < opts.max_iters && stale < opts.stale_limit {
        iterations += 1;
        let shapes: Vec<_> = deployment
            .replicas
            .iter()
            .map(|r| ReplicaShape::of(r, inst.cluster))
            .collect();
        let table = table_for_shapes(
            &shapes,
            inst.types,
            inst.model,
            inst.params,
            inst.span_seconds,
        );
        let report = classify(&assignment, &table.n, &table.e, &span.counts);
        let step = match mutate(&deployment, &report, inst.cluster, inst.model, &mut rng) {
            Err(_) => {
                stale += 1;
                SearchStep {
                    iteration: iterations,
                    op: "none".into(),
                    ops: Vec::new(),
                    accepted: false,
                    throughput,
                    replicas: deployment.len(),
                    devices: deployment.device_count(),
                }
            }
            Ok((sets, ops)) => {
                let op = ops.iter().map(Op::to_string).collect::<Vec<_>>().join("+");
                let accepted = match enumerate_strategies(&sets, eval) {
                    Some((cand, phi)) if phi > throughput => {
                        deployment = cand;
                        let (t, a) = eval.evaluate(&deployment);
                        throughput = t;
                        assignment = a;
                        stale = 0;
                        true
                    }
                    _ => {
                        stale += 1;
                        false
                    }
                };
                SearchStep {
                    iteration: iterations,
                    op,
                    ops,
                    accepted,
                    throughput,
                    replicas: deployment.len(),
                    devices: deployment.device_count(),
                }
            }
        };
        log.push(step);
    }
    Ok(SearchState {
        deployment,
        assignment,
        throughput,
        rng_seed: opts.seed,
        stale_iters: stale,
        iterations,
        log,
    })
}

/// Every multiset of (tp, pp) replica shapes that tiles the cluster,
/// scored exactly; returns the best.
pub fn exhaustive(inst: Instance, span: &TraceSpan, exact_budget: u64) -> Result<SearchState> {
    let d = inst.cluster.device_count();
    if d > EXHAUSTIVE_LIMIT {
        return Err(Error::TooLarge {
            devices: d,
            limit: EXHAUSTIVE_LIMIT,
        });
    }
    let g_min = min_replica_devices(inst.cluster, inst.model)?;
    let mut eval = Evaluator::new(inst, span, exact_budget);
    let configs = enumerate_deployments(inst.cluster, inst.model, g_min);
    let mut best: Option<(u64, u32, Deployment)> = None;
    for dep in configs {
        let phi = eval.phi(&dep);
        let pp: u32 = dep.replicas.iter().map(|r| r.pp).sum();
        let replace = match &best {
            None => true,
            Some((b, bpp, _)) => phi > *b || (phi == *b && pp < *bpp),
        };
        if replace {
            best = Some((phi, pp, dep));
        }
    }
    let (_, _, deployment) = best.ok_or(Error::ModelTooLarge { devices: d })?;
    let (throughput, assignment) = eval.evaluate(&deployment);
    Ok(SearchState {
        deployment,
        assignment,
        throughput,
        rng_seed: 0,
        stale_iters: 0,
        iterations: 0,
        log: Vec::new(),
    })
}

/// One canonical placement for each shape multiset that tiles the cluster
/// and passes the memory check.
pub fn enumerate_deployments(
    cluster: &ClusterSpec,
    model: &ModelSpec,
    g_min: usize,
) -> Vec<Deployment> {
    let d = cluster.device_count();
    let per_machine = cluster.max_devices_per_machine();
    let mut kinds: Vec<(u32, u32)> = Vec::new();
    for size in g_min.max(1)..=d {
        for tp in (1..=size).rev() {
            if size % tp == 0 && tp <= per_machine {
                kinds.push((tp as u32, (size / tp) as u32));
            }
        }
    }
    let mut out = Vec::new();
    let mut chosen = Vec::new();
    multisets(&kinds, 0, d, &mut chosen, &mut |ms| {
        if let Some(dep) = place(ms, cluster) {
            let ok = dep
                .replicas
                .iter()
                .all(|r| crate::costmodel::memory_feasible(r, model, cluster));
            if ok {
                out.push(dep);
            }
        }
    });
    out
}

fn multisets(
    kinds: &[(u32, u32)],
    from: usize,
    left: usize,
    chosen: &mut Vec<(u32, u32)>,
    visit: &mut dyn FnMut(&[(u32, u32)]),
) {
    if left == 0 {
        visit(chosen);
        return;
    }
    for i in from..kinds.len() {
        let size = (kinds[i].0 * kinds[i].1) as usize;
        if size <= left {
            chosen.push(kinds[i]);
            multisets(kinds, i, left - size, chosen, visit);
            chosen.pop();
        }
    }
}

/// Packs each replica's tp-groups onto machines (largest groups first) and
/// assigns device ids; `None` if no packing exists.
fn place(shapes: &[(u32, u32)], cluster: &ClusterSpec) -> Option<Deployment> {
    let mut groups: Vec<(usize, usize)> = Vec::new(); // (replica, tp)
    for (r, &(tp, pp)) in shapes.iter().enumerate() {
        for _ in 0..pp {
            groups.push((r, tp as usize));
        }
    }
    groups.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    let mut free: Vec<usize> = cluster
        .machines
        .iter()
        .map(|m| m.device_ids.len())
        .collect();
    let mut slot = vec![0usize; groups.len()];
    fn dfs(i: usize, groups: &[(usize, usize)], free: &mut [usize], slot: &mut [usize]) -> bool {
        if i == groups.len() {
            return true;
        }
        let mut tried = Vec::new();
        for m in 0..free.len() {
            // machines with equal free space are interchangeable here
            if free[m] >= groups[i].1 && !tried.contains(&free[m]) {
                tried.push(free[m]);
                free[m] -= groups[i].1;
                slot[i] = m;
                if dfs(i + 1, groups, free, slot) {
                    return true;
                }
                free[m] += groups[i].1;
            }
        }
        false
    }
    if !dfs(0, &groups, &mut free, &mut slot) {
        return None;
    }
    let mut next: Vec<Vec<DeviceId>> = cluster
        .machines
        .iter()
        .map(|m| {
            let mut ids = m.device_ids.clone();
            ids.sort_unstable();
            ids.reverse();
            ids
        })
        .collect();
    let mut devices: Vec<Vec<DeviceId>> = vec![Vec::new(); shapes.len()];
    for (g, &(r, tp)) in groups.iter().enumerate() {
        for _ in 0..tp {
            devices[r].push(next[slot[g]].pop()?);
        }
    }
    let replicas: Vec<ReplicaConfig> = shapes
        .iter()
        .zip(devices)
        .map(|(&(tp, pp), ids)| ReplicaConfig::new(ids, tp, pp))
        .collect();
    let dep = Deployment::new(replicas).canonical();
    dep.validate(cluster).ok()?;
    Some(dep)
}
