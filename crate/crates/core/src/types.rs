//! Domain types shared by every stage of the pipeline.
//!
//! All values are plain data: construct them, validate them once, then share
//! them freely. Byte and token quantities are unsigned integers; rates and
//! bandwidths are `f64`.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type DeviceId = u32;

/// Bytes in a (decimal) gigabyte, the unit used throughout the fixtures.
pub const GB: u64 = 1_000_000_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MachineSpec {
    pub machine_id: String,
    pub device_ids: Vec<DeviceId>,
    /// Memory of each device on this machine, in bytes.
    pub device_mem: u64,
}

/// Physical substrate: machines, their devices, and the two link classes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterSpec {
    pub machines: Vec<MachineSpec>,
    /// Intra-machine (NVLink-class) bandwidth in bytes/second.
    pub intra_bw: f64,
    /// Inter-machine (InfiniBand-class) bandwidth in bytes/second.
    pub inter_bw: f64,
}

impl ClusterSpec {
    /// `machines` machines with `per_machine` devices each; device ids are
    /// assigned sequentially, machine by machine.
    pub fn uniform(
        machines: usize,
        per_machine: usize,
        device_mem: u64,
        intra_bw: f64,
        inter_bw: f64,
    ) -> Self {
        let machines = (0..machines)
            .map(|m| MachineSpec {
                machine_id: format!("m{m}"),
                device_ids: (0..per_machine)
                    .map(|d| (m * per_machine + d) as DeviceId)
                    .collect(),
                device_mem,
            })
            .collect();
        ClusterSpec {
            machines,
            intra_bw,
            inter_bw,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.machines.is_empty() {
            return Err(Error::InvalidCluster("no machines".into()));
        }
        let mut seen = BTreeSet::new();
        for m in &self.machines {
            if m.device_ids.is_empty() {
                return Err(Error::InvalidCluster(format!(
                    "machine {} has no devices",
                    m.machine_id
                )));
            }
            if m.device_mem == 0 {
                return Err(Error::InvalidCluster(format!(
                    "machine {} has zero device memory",
                    m.machine_id
                )));
            }
            for &d in &m.device_ids {
                if !seen.insert(d) {
                    return Err(Error::InvalidCluster(format!("duplicate device id {d}")));
                }
            }
        }
        if !(self.inter_bw > 0.0 && self.intra_bw >= self.inter_bw) {
            return Err(Error::InvalidCluster(format!(
                "need intra_bw >= inter_bw > 0, got {} / {}",
                self.intra_bw, self.inter_bw
            )));
        }
        Ok(())
    }

    pub fn device_count(&self) -> usize {
        self.machines.iter().map(|m| m.device_ids.len()).sum()
    }

    /// All device ids in ascending order.
    pub fn devices(&self) -> Vec<DeviceId> {
        let mut all: Vec<DeviceId> = self
            .machines
            .iter()
            .flat_map(|m| m.device_ids.iter().copied())
            .collect();
        all.sort_unstable();
        all
    }

    /// Index of the machine holding `device`.
    pub fn machine_of(&self, device: DeviceId) -> Option<usize> {
        self.machines
            .iter()
            .position(|m| m.device_ids.contains(&device))
    }

    pub fn device_mem(&self, device: DeviceId) -> Option<u64> {
        self.machine_of(device).map(|m| self.machines[m].device_mem)
    }

    pub fn same_machine(&self, a: DeviceId, b: DeviceId) -> bool {
        match (self.machine_of(a), self.machine_of(b)) {
            (Some(x), Some(y)) => x == y,
            _ => false,
        }
    }

    pub fn max_devices_per_machine(&self) -> usize {
        self.machines
            .iter()
            .map(|m| m.device_ids.len())
            .max()
            .unwrap_or(0)
    }

    /// Bandwidth of the link from `src` to `dst`.
    pub fn link_bw(&self, src: DeviceId, dst: DeviceId) -> f64 {
        if self.same_machine(src, dst) {
            self.intra_bw
        } else {
            self.inter_bw
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub name: String,
    pub param_bytes: u64,
    pub num_layers: u32,
    /// KV-cache bytes per token, summed over all layers.
    pub bytes_per_token_kv: u64,
    /// Abstract compute units per prompt token (informational; the latency
    /// model folds compute into the profile coefficients).
    pub flops_per_token_prefill: u64,
    /// Minimum aggregate device memory needed to serve the model.
    pub min_mem_bytes: u64,
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        if self.param_bytes == 0
            || self.num_layers == 0
            || self.bytes_per_token_kv == 0
            || self.flops_per_token_prefill == 0
            || self.min_mem_bytes == 0
        {
            return Err(Error::InvalidModel(format!(
                "{}: all numeric fields must be positive",
                self.name
            )));
        }
        if self.min_mem_bytes < self.param_bytes {
            return Err(Error::InvalidModel(format!(
                "{}: min_mem_bytes below param_bytes",
                self.name
            )));
        }
        Ok(())
    }
}

/// One model replica: a device set and its (tp, pp) strategy.
///
/// Placement rule: devices are taken in ascending id order; stage `s` owns
/// devices `[s*tp, (s+1)*tp)` of that order, and every stage's tensor group
/// must sit on a single machine. Pipeline stages may span machines.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ReplicaConfig {
    #[serde(rename = "devices")]
    pub device_ids: Vec<DeviceId>,
    pub tp: u32,
    pub pp: u32,
}

impl ReplicaConfig {
    /// Builds a replica, sorting the device list.
    pub fn new(mut device_ids: Vec<DeviceId>, tp: u32, pp: u32) -> Self {
        device_ids.sort_unstable();
        ReplicaConfig { device_ids, tp, pp }
    }

    pub fn degree(&self) -> u32 {
        self.tp * self.pp
    }

    /// Device groups of each pipeline stage, in stage order.
    pub fn stages(&self) -> impl Iterator<Item = &[DeviceId]> {
        self.device_ids.chunks(self.tp.max(1) as usize)
    }

    /// Checks the structural invariants against `cluster`. `index` only
    /// labels the error.
    pub fn validate(&self, cluster: &ClusterSpec, index: usize) -> Result<()> {
        let fail = |reason: String| Error::InvalidReplica { index, reason };
        if self.tp == 0 || self.pp == 0 {
            return Err(fail("tp and pp must be positive".into()));
        }
        if self.device_ids.len() != (self.tp * self.pp) as usize {
            return Err(fail(format!(
                "tp {} x pp {} != {} devices",
                self.tp,
                self.pp,
                self.device_ids.len()
            )));
        }
        if self.device_ids.windows(2).any(|w| w[0] >= w[1]) {
            return Err(fail("device ids must be unique and ascending".into()));
        }
        for stage in self.stages() {
            let machines: BTreeSet<_> = stage
                .iter()
                .map(|&d| cluster.machine_of(d).ok_or(d))
                .collect::<std::result::Result<_, _>>()
                .map_err(|d| fail(format!("unknown device {d}")))?;
            if machines.len() != 1 {
                return Err(fail(format!("tensor group {stage:?} spans machines")));
            }
        }
        Ok(())
    }

    pub fn is_valid(&self, cluster: &ClusterSpec) -> bool {
        self.validate(cluster, 0).is_ok()
    }

    /// Aggregate device memory of the replica.
    pub fn total_mem(&self, cluster: &ClusterSpec) -> u64 {
        self.device_ids
            .iter()
            .filter_map(|&d| cluster.device_mem(d))
            .sum()
    }
}

/// A set of replicas with pairwise-disjoint device sets.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Deployment {
    pub replicas: Vec<ReplicaConfig>,
}

impl Deployment {
    pub fn new(replicas: Vec<ReplicaConfig>) -> Self {
        Deployment { replicas }
    }

    pub fn len(&self) -> usize {
        self.replicas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.replicas.is_empty()
    }

    pub fn device_count(&self) -> usize {
        self.replicas.iter().map(|r| r.device_ids.len()).sum()
    }

    pub fn devices(&self) -> BTreeSet<DeviceId> {
        self.replicas
            .iter()
            .flat_map(|r| r.device_ids.iter().copied())
            .collect()
    }

    /// Structural validation: each replica is valid and device sets are
    /// disjoint. Memory feasibility is checked by the cost model.
    pub fn validate(&self, cluster: &ClusterSpec) -> Result<()> {
        let mut seen = BTreeSet::new();
        for (i, r) in self.replicas.iter().enumerate() {
            r.validate(cluster, i)?;
            for &d in &r.device_ids {
                if !seen.insert(d) {
                    return Err(Error::InvalidDeployment(format!(
                        "device {d} used by more than one replica"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Replicas sorted by their device lists, for order-insensitive comparison.
    pub fn canonical(&self) -> Deployment {
        let mut replicas = self.replicas.clone();
        replicas.sort();
        Deployment { replicas }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkloadType {
    pub type_id: usize,
    /// Mean prompt length in tokens.
    pub centroid_in: u64,
    /// Mean generated length in tokens.
    pub centroid_out: u64,
}

impl WorkloadType {
    pub fn new(type_id: usize, centroid_in: u64, centroid_out: u64) -> Self {
        WorkloadType {
            type_id,
            centroid_in: centroid_in.max(1),
            centroid_out: centroid_out.max(1),
        }
    }
}

/// One request of a trace; a line of the JSONL trace format.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub arrival_ms: u64,
    pub input_len: u64,
    pub output_len: u64,
}

/// Parses a JSONL trace. Blank lines are skipped; line numbers in errors
/// are 1-based.
pub fn parse_trace(text: &str) -> Result<Vec<TraceRecord>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::TraceParse {
                line: i + 1,
                reason: e.to_string(),
            })
        })
        .collect()
}

/// One JSON object per line, newline-terminated.
pub fn write_trace(records: &[TraceRecord]) -> String {
    let mut out = String::with_capacity(records.len() * 56);
    for r in records {
        out.push_str(&serde_json::to_string(r).expect("record serializes"));
        out.push('\n');
    }
    out
}

/// Per-type arrival counts for one span.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceSpan {
    pub span_index: u64,
    pub counts: Vec<u64>,
}

impl TraceSpan {
    pub fn new(span_index: u64, counts: Vec<u64>) -> Self {
        TraceSpan { span_index, counts }
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }
}

/// Default span length, one minute.
pub const DEFAULT_SPAN_SECONDS: f64 = 60.0;
