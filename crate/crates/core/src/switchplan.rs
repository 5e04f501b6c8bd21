//! Parameter and KV-cache movement when the serving deployment changes.
//!
//! Each deployment implies a shard layout: every replica splits the model's
//! bytes into `pp` contiguous stage ranges and each stage into `tp` equal
//! slices. A switch moves, for every target device, the bytes it lacks from
//! some source holder. Sources on the target's machine are preferred; among
//! them, the link with the least bytes already scheduled wins.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{ClusterSpec, Deployment, DeviceId, ModelSpec};

/// Generated-token count at or below which in-flight requests drain.
pub const DEFAULT_DRAIN_THRESHOLD: u64 = 256;

/// Extra KV buffer reserved on targets for migrated requests.
pub const DEFAULT_HEADROOM: f64 = 0.15;

/// A byte range `[start, end)` of the model parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ByteRange {
    pub start: u64,
    pub end: u64,
}

impl ByteRange {
    pub fn len(&self) -> u64 {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end <= self.start
    }

    pub fn contains(&self, other: &ByteRange) -> bool {
        self.start <= other.start && other.end <= self.end
    }
}

/// `total * i / parts`, without overflow.
fn cut(total: u64, i: u64, parts: u64) -> u64 {
    (u128::from(total) * u128::from(i) / u128::from(parts)) as u64
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Shard {
    pub shard_id: usize,
    pub range: ByteRange,
    /// Devices holding this range, ascending.
    pub holders: Vec<DeviceId>,
}

/// Which bytes each device of a deployment holds.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShardLayout {
    pub param_bytes: u64,
    /// Distinct ranges, sorted by (start, end).
    pub shards: Vec<Shard>,
    /// The range held by each device.
    pub device_range: BTreeMap<DeviceId, ByteRange>,
}

impl ShardLayout {
    /// Devices whose range covers all of `r`.
    pub fn holders_of(&self, r: &ByteRange) -> Vec<DeviceId> {
        self.device_range
            .iter()
            .filter(|(_, h)| h.contains(r))
            .map(|(&d, _)| d)
            .collect()
    }
}

/// Device `i` (in ascending order) of a `tp x pp` replica holds slice
/// `i % tp` of stage `i / tp`.
pub fn replica_ranges(
    device_ids: &[DeviceId],
    tp: u32,
    pp: u32,
    bytes: u64,
) -> Vec<(DeviceId, ByteRange)> {
    let mut ids = device_ids.to_vec();
    ids.sort_unstable();
    let (tp, pp) = (u64::from(tp.max(1)), u64::from(pp.max(1)));
    ids.iter()
        .enumerate()
        .map(|(i, &d)| {
            let (stage, slice) = (i as u64 / tp, i as u64 % tp);
            let (s0, s1) = (cut(bytes, stage, pp), cut(bytes, stage + 1, pp));
            let len = s1 - s0;
            let range = ByteRange {
                start: s0 + cut(len, slice, tp),
                end: s0 + cut(len, slice + 1, tp),
            };
            (d, range)
        })
        .collect()
}

pub fn layout(deployment: &Deployment, model: &ModelSpec) -> ShardLayout {
    let mut device_range = BTreeMap::new();
    let mut by_range: BTreeMap<ByteRange, Vec<DeviceId>> = BTreeMap::new();
    for r in &deployment.replicas {
        for (d, range) in replica_ranges(&r.device_ids, r.tp, r.pp, model.param_bytes) {
            device_range.insert(d, range);
            by_range.entry(range).or_default().push(d);
        }
    }
    let shards = by_range
        .into_iter()
        .enumerate()
        .map(|(shard_id, (range, mut holders))| {
            holders.sort_unstable();
            Shard {
                shard_id,
                range,
                holders,
            }
        })
        .collect();
    ShardLayout {
        param_bytes: model.param_bytes,
        shards,
        device_range,
    }
}

/// Bytes a target device lacks, cut into maximal pieces with a constant
/// set of source holders.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fragment {
    pub range: ByteRange,
    pub target: DeviceId,
    pub holders: Vec<DeviceId>,
}

/// Missing pieces for every target device, in (target, start) order.
pub fn fragments(src: &ShardLayout, dst: &ShardLayout) -> Vec<Fragment> {
    let mut cuts: Vec<u64> = src
        .device_range
        .values()
        .flat_map(|r| [r.start, r.end])
        .collect();
    cuts.sort_unstable();
    cuts.dedup();
    let mut out = Vec::new();
    for (&target, want) in &dst.device_range {
        let have = src.device_range.get(&target);
        let mut points: Vec<u64> = cuts
            .iter()
            .copied()
            .filter(|&c| c > want.start && c < want.end)
            .collect();
        if let Some(h) = have {
            points.extend(
                [h.start, h.end]
                    .into_iter()
                    .filter(|&c| c > want.start && c < want.end),
            );
        }
        points.extend([want.start, want.end]);
        points.sort_unstable();
        points.dedup();
        let mut pending: Option<Fragment> = None;
        for w in points.windows(2) {
            let piece = ByteRange {
                start: w[0],
                end: w[1],
            };
            if piece.is_empty() || have.is_some_and(|h| h.contains(&piece)) {
                if let Some(f) = pending.take() {
                    out.push(f);
                }
                continue;
            }
            let holders = src.holders_of(&piece);
            match &mut pending {
                Some(f) if f.holders == holders && f.range.end == piece.start => {
                    f.range.end = piece.end
                }
                _ => {
                    if let Some(f) = pending.replace(Fragment {
                        range: piece,
                        target,
                        holders,
                    }) {
                        out.push(f);
                    }
                }
            }
        }
        if let Some(f) = pending {
            out.push(f);
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Transfer {
    pub range: ByteRange,
    pub src: DeviceId,
    pub dst: DeviceId,
}

/// Bytes scheduled per directed link.
pub type LinkLoad = BTreeMap<(DeviceId, DeviceId), u64>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SwitchPlan {
    pub transfers: Vec<Transfer>,
    #[serde(with = "link_load_serde")]
    pub link_load: LinkLoad,
    pub est_seconds: f64,
}

mod link_load_serde {
    use super::*;
    use serde::{Deserializer, Serializer};

    #[derive(Serialize, Deserialize)]
    struct Entry {
        src: DeviceId,
        dst: DeviceId,
        bytes: u64,
    }

    pub fn serialize<S: Serializer>(m: &LinkLoad, s: S) -> std::result::Result<S::Ok, S::Error> {
        let v: Vec<Entry> = m
            .iter()
            .map(|(&(src, dst), &bytes)| Entry { src, dst, bytes })
            .collect();
        v.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<LinkLoad, D::Error> {
        let v = Vec::<Entry>::deserialize(d)?;
        Ok(v.into_iter().map(|e| ((e.src, e.dst), e.bytes)).collect())
    }
}

/// Picks a source among `holders` for `target`: intra-machine first, then
/// least loaded link, then lowest id.
pub fn choose_source(
    holders: &[DeviceId],
    target: DeviceId,
    load: &LinkLoad,
    cluster: &ClusterSpec,
) -> Option<DeviceId> {
    let pick = |intra: bool| {
        holders
            .iter()
            .copied()
            .filter(|&s| cluster.same_machine(s, target) == intra)
            .min_by_key(|&s| (load.get(&(s, target)).copied().unwrap_or(0), s))
    };
    pick(true).or_else(|| pick(false))
}

fn plan_with(
    src: &ShardLayout,
    dst: &ShardLayout,
    cluster: &ClusterSpec,
    mut choose: impl FnMut(&Fragment, &LinkLoad) -> Option<DeviceId>,
) -> Result<SwitchPlan> {
    let mut load = LinkLoad::new();
    let mut transfers = Vec::new();
    for f in fragments(src, dst) {
        let s = choose(&f, &load).ok_or(Error::UnsourcedFragment {
            start: f.range.start,
            end: f.range.end,
            target: f.target,
        })?;
        *load.entry((s, f.target)).or_default() += f.range.len();
        transfers.push(Transfer {
            range: f.range,
            src: s,
            dst: f.target,
        });
    }
    let est_seconds = estimate_load_time(&load, cluster);
    Ok(SwitchPlan {
        transfers,
        link_load: load,
        est_seconds,
    })
}

/// Greedy intra-machine-first, least-loaded-link transfer plan.
pub fn greedy_plan(
    src: &ShardLayout,
    dst: &ShardLayout,
    cluster: &ClusterSpec,
) -> Result<SwitchPlan> {
    plan_with(src, dst, cluster, |f, load| {
        choose_source(&f.holders, f.target, load, cluster)
    })
}

/// Baseline that always takes the lowest-id holder.
pub fn naive_plan(
    src: &ShardLayout,
    dst: &ShardLayout,
    cluster: &ClusterSpec,
) -> Result<SwitchPlan> {
    plan_with(src, dst, cluster, |f, _| f.holders.first().copied())
}

fn estimate_load_time(load: &LinkLoad, cluster: &ClusterSpec) -> f64 {
    load.iter()
        .map(|(&(s, t), &bytes)| bytes as f64 / cluster.link_bw(s, t))
        .fold(0.0, f64::max)
}

/// Links run concurrently; each serializes its own transfers.
pub fn estimate_time(plan: &SwitchPlan, cluster: &ClusterSpec) -> f64 {
    let mut load = LinkLoad::new();
    for t in &plan.transfers {
        *load.entry((t.src, t.dst)).or_default() += t.range.len();
    }
    estimate_load_time(&load, cluster)
}

/// Plan for switching from one deployment to another.
pub fn plan_switch(
    src: &Deployment,
    dst: &Deployment,
    model: &ModelSpec,
    cluster: &ClusterSpec,
) -> Result<SwitchPlan> {
    greedy_plan(&layout(src, model), &layout(dst, model), cluster)
}

/// A request still generating when the switch starts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct InflightRequest {
    pub id: u64,
    pub generated: u64,
    pub kv_bytes: u64,
    /// Replica index in the source deployment.
    pub source: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Migration {
    pub id: u64,
    pub kv_bytes: u64,
    pub source: usize,
    pub target: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KvPlan {
    pub drained: Vec<u64>,
    pub migrated: Vec<Migration>,
    /// KV transfers; byte ranges are offsets into each request's cache.
    pub transfers: Vec<Transfer>,
    pub buffer_bytes: u64,
}

/// Drains short requests and migrates the rest.
///
/// Each migrated cache has a single holder per byte, so the only choice is
/// the target replica.
///
/// A request's cache is spread evenly over its replica's devices in device
/// order and lands the same way on the target replica: the target replica
/// with the most devices in common, then the least KV assigned so far, then
/// the lowest index. Transfers share `load` with the parameter plan.
pub fn kv_plan(
    inflight: &[InflightRequest],
    threshold_tokens: u64,
    src: &Deployment,
    dst: &Deployment,
    headroom: f64,
    load: &mut LinkLoad,
) -> Result<KvPlan> {
    if !(0.0..=0.5).contains(&headroom) {
        return Err(Error::InvalidHeadroom(headroom));
    }
    let mut drained = Vec::new();
    let mut migrated = Vec::new();
    let mut transfers = Vec::new();
    let mut assigned = vec![0u64; dst.len()];
    for req in inflight {
        if req.generated <= threshold_tokens {
            drained.push(req.id);
            continue;
        }
        let from = src.replicas.get(req.source).ok_or_else(|| {
            Error::DimensionMismatch(format!(
                "request {} on replica {} of {}",
                req.id,
                req.source,
                src.len()
            ))
        })?;
        if dst.is_empty() {
            return Err(Error::EmptyDeployment);
        }
        let overlap = |k: usize| {
            dst.replicas[k]
                .device_ids
                .iter()
                .filter(|d| from.device_ids.contains(d))
                .count()
        };
        let target = (0..dst.len())
            .min_by_key(|&k| (std::cmp::Reverse(overlap(k)), assigned[k], k))
            .unwrap_or(0);
        assigned[target] += req.kv_bytes;
        let to = &dst.replicas[target];
        let held = slices(&from.device_ids, req.kv_bytes);
        for (t, want) in slices(&to.device_ids, req.kv_bytes) {
            for &(s, have) in &held {
                let piece = ByteRange {
                    start: want.start.max(have.start),
                    end: want.end.min(have.end),
                };
                if piece.is_empty() || s == t {
                    continue;
                }
                *load.entry((s, t)).or_default() += piece.len();
                transfers.push(Transfer {
                    range: piece,
                    src: s,
                    dst: t,
                });
            }
        }
        migrated.push(Migration {
            id: req.id,
            kv_bytes: req.kv_bytes,
            source: req.source,
            target,
        });
    }
    let total: u64 = migrated.iter().map(|m| m.kv_bytes).sum();
    Ok(KvPlan {
        drained,
        migrated,
        transfers,
        buffer_bytes: (total as f64 * (1.0 + headroom)).ceil() as u64,
    })
}

fn slices(devices: &[DeviceId], bytes: u64) -> Vec<(DeviceId, ByteRange)> {
    let n = devices.len().max(1) as u64;
    let mut ids = devices.to_vec();
    ids.sort_unstable();
    ids.iter()
        .enumerate()
        .map(|(i, &d)| {
            (
                d,
                ByteRange {
                    start: cut(bytes, i as u64, n),
                    end: cut(bytes, i as u64 + 1, n),
                },
            )
        })
        .collect()
}
