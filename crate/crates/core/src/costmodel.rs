//! Analytical latency and capacity model.
//!
//! Stands in for one-time hardware profiling. Per-request latency is split
//! into a compute-bound prefill term and a memory-bound decode term:
//!
//! ```text
//! prefill(tp, pp) = in  * layers * prefill_coeff / speedup(tp)           + (pp - 1) * pp_comm_cost
//! decode(tp, pp)  = out * layers * decode_coeff * penalty(tp) / tp       + (pp - 1) * pp_comm_cost * out
//! speedup(tp)     = tp * tp_efficiency ^ log2(tp)
//! penalty(tp)     = 1 + mem_bw_penalty * (tp - 1)
//! ```
//!
//! Each pipeline stage keeps up to `max_batch` requests in flight, so a
//! replica holds `max_batch * pp` requests, each for its full latency. The
//! amortized service time is `latency / (max_batch * pp)` and the per-span
//! capacity `n = floor(span / service_time)`.
//!
//! KV memory caps concurrency further: a replica whose free memory holds
//! only `slots` copies of a type's KV cache can admit at most
//! `slots * span / latency` such requests per span. That cap is the edge
//! capacity `e`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{ClusterSpec, Deployment, ModelSpec, ReplicaConfig, WorkloadType};

const DEFAULT_PROFILE: &str = include_str!("../profiles/default.json");

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProfileParams {
    /// Seconds per (prompt token x layer) at tp = 1.
    pub prefill_coeff: f64,
    /// Seconds per (decode step x layer) at tp = 1.
    pub decode_coeff: f64,
    /// Per-doubling tensor-parallel efficiency, in (0, 1].
    pub tp_efficiency: f64,
    /// Seconds per pipeline-stage boundary per microbatch.
    pub pp_comm_cost: f64,
    /// Slope of the decode memory-bandwidth penalty under tensor parallelism.
    pub mem_bw_penalty: f64,
    /// Requests a replica keeps in flight when memory allows.
    pub max_batch: u32,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ProfileFile {
    schema_version: u32,
    #[serde(default)]
    name: String,
    #[serde(flatten)]
    params: ProfileParams,
}

impl Default for ProfileParams {
    fn default() -> Self {
        ProfileParams::from_json(DEFAULT_PROFILE).expect("embedded profile parses")
    }
}

impl ProfileParams {
    /// Parses a profile document (the shipped `default.json` layout).
    pub fn from_json(text: &str) -> Result<Self> {
        let file: ProfileFile =
            serde_json::from_str(text).map_err(|e| Error::InvalidProfile(e.to_string()))?;
        if file.schema_version != 1 {
            return Err(Error::InvalidProfile(format!(
                "unsupported schema_version {}",
                file.schema_version
            )));
        }
        file.params.validate()?;
        Ok(file.params)
    }

    pub fn to_json(&self, name: &str) -> String {
        serde_json::to_string_pretty(&ProfileFile {
            schema_version: 1,
            name: name.to_string(),
            params: *self,
        })
        .expect("profile serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            self.prefill_coeff,
            self.decode_coeff,
            self.tp_efficiency,
            self.pp_comm_cost,
        ];
        if positive.iter().any(|v| !(*v > 0.0)) || self.max_batch == 0 {
            return Err(Error::InvalidProfile(
                "coefficients must be positive".into(),
            ));
        }
        if self.tp_efficiency > 1.0 {
            return Err(Error::InvalidProfile("tp_efficiency must be <= 1".into()));
        }
        if !(self.mem_bw_penalty >= 0.0) {
            return Err(Error::InvalidProfile("mem_bw_penalty must be >= 0".into()));
        }
        Ok(())
    }

    pub fn speedup(&self, tp: u32) -> f64 {
        let tp = f64::from(tp);
        tp * self.tp_efficiency.powf(tp.log2())
    }

    pub fn decode_penalty(&self, tp: u32) -> f64 {
        1.0 + self.mem_bw_penalty * f64::from(tp.saturating_sub(1))
    }

    /// Requests a replica with `pp` stages keeps in flight.
    pub fn batch_slots(&self, pp: u32) -> u64 {
        u64::from(self.max_batch) * u64::from(pp.max(1))
    }
}

/// Per-type capacities of every replica in a deployment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CapacityTable {
    /// `n[k][j]`: type-j requests replica k completes per span when serving
    /// only that type.
    pub n: Vec<Vec<u64>>,
    /// `e[k][j]`: cap on type-j requests routed to replica k per span.
    pub e: Vec<Vec<u64>>,
    /// Expected latency in seconds of one type-j request on replica k.
    pub latency: Vec<Vec<f64>>,
}

impl CapacityTable {
    pub fn replicas(&self) -> usize {
        self.n.len()
    }

    pub fn types(&self) -> usize {
        self.n.first().map_or(0, Vec::len)
    }

    /// A table from explicit rows, with no latency information.
    pub fn from_rows(n: Vec<Vec<u64>>, e: Vec<Vec<u64>>) -> Self {
        let latency = n.iter().map(|row| vec![0.0; row.len()]).collect();
        CapacityTable { n, e, latency }
    }
}

/// Placement-independent view of a replica: everything the cost model
/// needs, so callers can cache rows by shape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ReplicaShape {
    pub tp: u32,
    pub pp: u32,
    pub total_mem: u64,
    pub min_device_mem: u64,
}

impl ReplicaShape {
    pub fn of(cfg: &ReplicaConfig, cluster: &ClusterSpec) -> Self {
        let min_device_mem = cfg
            .device_ids
            .iter()
            .filter_map(|&d| cluster.device_mem(d))
            .min()
            .unwrap_or(0);
        ReplicaShape {
            tp: cfg.tp,
            pp: cfg.pp,
            total_mem: cfg.total_mem(cluster),
            min_device_mem,
        }
    }

    pub fn memory_feasible(&self, model: &ModelSpec) -> bool {
        let degree = u64::from(self.tp * self.pp).max(1);
        self.total_mem >= model.min_mem_bytes
            && model.param_bytes.div_ceil(degree) <= self.min_device_mem
    }

    /// Free memory left for KV caches once parameters are resident.
    pub fn kv_pool(&self, model: &ModelSpec) -> u64 {
        self.total_mem.saturating_sub(model.param_bytes)
    }

    pub fn prefill_latency(
        &self,
        model: &ModelSpec,
        input_len: u64,
        params: &ProfileParams,
    ) -> f64 {
        let compute = input_len as f64 * f64::from(model.num_layers) * params.prefill_coeff
            / params.speedup(self.tp);
        compute + f64::from(self.pp - 1) * params.pp_comm_cost
    }

    pub fn decode_latency(
        &self,
        model: &ModelSpec,
        output_len: u64,
        params: &ProfileParams,
    ) -> f64 {
        let steps = output_len as f64;
        let compute = steps
            * f64::from(model.num_layers)
            * params.decode_coeff
            * params.decode_penalty(self.tp)
            / f64::from(self.tp);
        compute + f64::from(self.pp - 1) * params.pp_comm_cost * steps
    }

    pub fn request_latency(
        &self,
        model: &ModelSpec,
        input_len: u64,
        output_len: u64,
        params: &ProfileParams,
    ) -> f64 {
        self.prefill_latency(model, input_len, params)
            + self.decode_latency(model, output_len, params)
    }

    /// `(n, e, latency)` for one type with the given KV budget.
    pub fn rates(
        &self,
        model: &ModelSpec,
        wtype: &WorkloadType,
        span_s: f64,
        params: &ProfileParams,
        kv_budget: u64,
    ) -> (u64, u64, f64) {
        let latency = self.request_latency(model, wtype.centroid_in, wtype.centroid_out, params);
        let n = floor_rate(span_s * params.batch_slots(self.pp) as f64 / latency);
        let slots = kv_budget / kv_bytes_per_request(model, wtype).max(1);
        let kv_cap = floor_rate(span_s * slots as f64 / latency);
        (n, n.min(kv_cap), latency)
    }
}

/// `floor(x)` tolerant of representation error just below an integer.
fn floor_rate(x: f64) -> u64 {
    if !x.is_finite() {
        return u64::MAX;
    }
    let r = x.round();
    if (x - r).abs() <= 1e-9 * r.abs().max(1.0) {
        r.max(0.0) as u64
    } else {
        x.floor().max(0.0) as u64
    }
}

pub fn prefill_latency(
    cfg: &ReplicaConfig,
    model: &ModelSpec,
    input_len: u64,
    params: &ProfileParams,
) -> f64 {
    shape_without_memory(cfg).prefill_latency(model, input_len, params)
}

pub fn decode_latency(
    cfg: &ReplicaConfig,
    model: &ModelSpec,
    output_len: u64,
    params: &ProfileParams,
) -> f64 {
    shape_without_memory(cfg).decode_latency(model, output_len, params)
}

fn shape_without_memory(cfg: &ReplicaConfig) -> ReplicaShape {
    ReplicaShape {
        tp: cfg.tp,
        pp: cfg.pp,
        total_mem: 0,
        min_device_mem: 0,
    }
}

/// Amortized replica time per request: latency divided by the in-flight
/// request slots.
pub fn service_time(
    cfg: &ReplicaConfig,
    model: &ModelSpec,
    wtype: &WorkloadType,
    params: &ProfileParams,
) -> f64 {
    (prefill_latency(cfg, model, wtype.centroid_in, params)
        + decode_latency(cfg, model, wtype.centroid_out, params))
        / params.batch_slots(cfg.pp) as f64
}

/// KV-cache bytes one request of `wtype` holds at completion.
pub fn kv_bytes_per_request(model: &ModelSpec, wtype: &WorkloadType) -> u64 {
    (wtype.centroid_in + wtype.centroid_out) * model.bytes_per_token_kv
}

pub fn memory_feasible(cfg: &ReplicaConfig, model: &ModelSpec, cluster: &ClusterSpec) -> bool {
    !cfg.device_ids.is_empty() && ReplicaShape::of(cfg, cluster).memory_feasible(model)
}

/// `n_{k,j}`: requests per span under exclusive use.
pub fn capacity(
    cfg: &ReplicaConfig,
    model: &ModelSpec,
    wtype: &WorkloadType,
    span_s: f64,
    params: &ProfileParams,
    cluster: &ClusterSpec,
) -> Result<u64> {
    if !memory_feasible(cfg, model, cluster) {
        return Err(Error::InfeasibleReplica { index: 0 });
    }
    let shape = ReplicaShape::of(cfg, cluster);
    Ok(shape.rates(model, wtype, span_s, params, u64::MAX).0)
}

/// `e_{k,j}`: `n` capped by what `kv_budget` bytes of KV memory can admit
/// per span.
pub fn edge_capacity(
    cfg: &ReplicaConfig,
    model: &ModelSpec,
    wtype: &WorkloadType,
    span_s: f64,
    params: &ProfileParams,
    kv_budget: u64,
    cluster: &ClusterSpec,
) -> Result<u64> {
    if !memory_feasible(cfg, model, cluster) {
        return Err(Error::InfeasibleReplica { index: 0 });
    }
    let shape = ReplicaShape::of(cfg, cluster);
    Ok(shape.rates(model, wtype, span_s, params, kv_budget).1)
}

pub fn build_capacity_table(
    deployment: &Deployment,
    types: &[WorkloadType],
    model: &ModelSpec,
    params: &ProfileParams,
    span_s: f64,
    cluster: &ClusterSpec,
) -> Result<CapacityTable> {
    let shapes = deployment
        .replicas
        .iter()
        .enumerate()
        .map(|(index, cfg)| {
            let shape = ReplicaShape::of(cfg, cluster);
            if cfg.device_ids.is_empty() || !shape.memory_feasible(model) {
                Err(Error::InfeasibleReplica { index })
            } else {
                Ok(shape)
            }
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(table_for_shapes(&shapes, types, model, params, span_s))
}

/// Capacity table for replicas given only by shape. Shapes are assumed
/// memory-feasible.
pub fn table_for_shapes(
    shapes: &[ReplicaShape],
    types: &[WorkloadType],
    model: &ModelSpec,
    params: &ProfileParams,
    span_s: f64,
) -> CapacityTable {
    let mut table = CapacityTable {
        n: Vec::with_capacity(shapes.len()),
        e: Vec::with_capacity(shapes.len()),
        latency: Vec::with_capacity(shapes.len()),
    };
    for shape in shapes {
        let pool = shape.kv_pool(model);
        let (mut n, mut e, mut lat) = (Vec::new(), Vec::new(), Vec::new());
        for t in types {
            let (nk, ek, l) = shape.rates(model, t, span_s, params, pool);
            n.push(nk);
            e.push(ek);
            lat.push(l);
        }
        table.n.push(n);
        table.e.push(e);
        table.latency.push(lat);
    }
    table
}
