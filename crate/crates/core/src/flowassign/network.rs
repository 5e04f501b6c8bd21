use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::{normalize_or_scale, Normalized};
use crate::costmodel::CapacityTable;
use crate::error::{Error, Result};
use crate::types::TraceSpan;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Node {
    Source,
    Workload(usize),
    /// `i_{k,j}`: the gate from workload `j` into replica `k`.
    Intermediate {
        replica: usize,
        wtype: usize,
    },
    Replica(usize),
    Sink,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Edge {
    pub from: usize,
    pub to: usize,
    pub capacity: u64,
}

/// Request-routing network for one span.
///
/// Node order is fixed: `S`, then `w_j`, then `i_{k,j}` (replica-major),
/// then `c_k`, then `T`. Flow is measured in requests. Edge classes:
///
/// * `S -> w_j` with capacity `lambda_j`;
/// * `w_j -> i_{k,j} -> c_k` with capacity `e_{k,j}`;
/// * `c_k -> T` with capacity `max_j n_{k,j}`, the largest request count the
///   replica could complete in the span.
///
/// The joint capacity of a replica is a weighted budget (`M_k` units, one
/// type-`j` request costing `unit_cost[k][j]`), which a plain flow edge
/// cannot express. The `c_k -> T` edge is its request-count relaxation; the
/// exact budget is enforced when the assignment is extracted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowNetwork {
    pub nodes: Vec<Node>,
    pub edges: Vec<Edge>,
    pub source: usize,
    pub sink: usize,
    pub replicas: usize,
    pub types: usize,
    /// `M_k` per replica.
    pub m: Vec<u64>,
    /// `M_k / n_{k,j}`; `None` where the replica cannot serve the type.
    pub unit_cost: Vec<Vec<Option<u64>>>,
    pub demand: Vec<u64>,
    pub e: Vec<Vec<u64>>,
    pub n: Vec<Vec<u64>>,
}

impl FlowNetwork {
    pub fn workload_node(&self, j: usize) -> usize {
        1 + j
    }

    pub fn intermediate_node(&self, k: usize, j: usize) -> usize {
        1 + self.types + k * self.types + j
    }

    pub fn replica_node(&self, k: usize) -> usize {
        1 + self.types + self.replicas * self.types + k
    }

    /// Index of the `i_{k,j} -> c_k` edge.
    pub fn gate_edge(&self, k: usize, j: usize) -> usize {
        self.types + 2 * (k * self.types + j) + 1
    }

    /// Index of the `c_k -> T` edge.
    pub fn replica_edge(&self, k: usize) -> usize {
        self.types + 2 * self.replicas * self.types + k
    }

    pub fn normalized(&self, k: usize) -> Normalized {
        Normalized {
            m: self.m[k],
            units: self.unit_cost[k].clone(),
        }
    }

    /// Graphviz rendering; edge labels read `flow | capacity` when a flow is
    /// given, else just the capacity.
    pub fn to_dot(&self, flow: Option<&[u64]>) -> String {
        let mut out = String::from("digraph flow {\n  rankdir=LR;\n");
        for (idx, node) in self.nodes.iter().enumerate() {
            let label = match node {
                Node::Source => "S".to_string(),
                Node::Sink => "T".to_string(),
                Node::Workload(j) => format!("w{j}"),
                Node::Intermediate { replica, wtype } => format!("i{replica},{wtype}"),
                Node::Replica(k) => format!("c{k} (M={})", self.m[*k]),
            };
            let _ = writeln!(out, "  n{idx} [label=\"{label}\"];");
        }
        for (idx, edge) in self.edges.iter().enumerate() {
            let label = match flow {
                Some(f) => format!("{} | {}", f[idx], edge.capacity),
                None => edge.capacity.to_string(),
            };
            let _ = writeln!(out, "  n{} -> n{} [label=\"{label}\"];", edge.from, edge.to);
        }
        out.push_str("}\n");
        out
    }
}

pub fn build_network(span: &TraceSpan, table: &CapacityTable) -> Result<FlowNetwork> {
    let replicas = table.n.len();
    if replicas == 0 {
        return Err(Error::EmptyDeployment);
    }
    let types = span.counts.len();
    for (k, (nrow, erow)) in table.n.iter().zip(&table.e).enumerate() {
        if nrow.len() != types || erow.len() != types {
            return Err(Error::DimensionMismatch(format!(
                "replica {k} has {} capacities for {types} types",
                nrow.len()
            )));
        }
    }
    if table.e.len() != replicas {
        return Err(Error::DimensionMismatch("n and e row counts differ".into()));
    }

    let mut nodes = vec![Node::Source];
    nodes.extend((0..types).map(Node::Workload));
    for k in 0..replicas {
        nodes.extend((0..types).map(|j| Node::Intermediate {
            replica: k,
            wtype: j,
        }));
    }
    nodes.extend((0..replicas).map(Node::Replica));
    nodes.push(Node::Sink);

    let mut m = Vec::with_capacity(replicas);
    let mut unit_cost = Vec::with_capacity(replicas);
    for row in &table.n {
        let norm = normalize_or_scale(row);
        m.push(norm.m);
        unit_cost.push(norm.units);
    }
    // e is clamped to n so a malformed table cannot admit more than the
    // replica's exclusive-use rate.
    let e: Vec<Vec<u64>> = table
        .e
        .iter()
        .zip(&table.n)
        .map(|(er, nr)| er.iter().zip(nr).map(|(&e, &n)| e.min(n)).collect())
        .collect();

    let mut net = FlowNetwork {
        nodes,
        edges: Vec::with_capacity(types + 2 * replicas * types + replicas),
        source: 0,
        sink: 0,
        replicas,
        types,
        m,
        unit_cost,
        demand: span.counts.clone(),
        e,
        n: table.n.clone(),
    };
    net.sink = net.nodes.len() - 1;
    for j in 0..types {
        net.edges.push(Edge {
            from: net.source,
            to: net.workload_node(j),
            capacity: span.counts[j],
        });
    }
    for k in 0..replicas {
        for j in 0..types {
            let cap = net.e[k][j];
            let (w, i, c) = (
                net.workload_node(j),
                net.intermediate_node(k, j),
                net.replica_node(k),
            );
            net.edges.push(Edge {
                from: w,
                to: i,
                capacity: cap,
            });
            net.edges.push(Edge {
                from: i,
                to: c,
                capacity: cap,
            });
        }
    }
    for k in 0..replicas {
        let cap = table.n[k].iter().copied().max().unwrap_or(0);
        net.edges.push(Edge {
            from: net.replica_node(k),
            to: net.sink,
            capacity: cap,
        });
    }
    Ok(net)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn table(n: Vec<Vec<u64>>) -> CapacityTable {
        CapacityTable::from_rows(n.clone(), n)
    }

    #[test]
    fn minimal_network() {
        let net = build_network(&TraceSpan::new(0, vec![10]), &table(vec![vec![80]])).unwrap();
        assert_eq!(net.nodes.len(), 5);
        let caps: Vec<u64> = net.edges.iter().map(|e| e.capacity).collect();
        assert_eq!(caps, vec![10, 80, 80, 80]);
        assert_eq!(net.unit_cost, vec![vec![Some(1)]]);
    }

    #[test]
    fn two_by_two_counts() {
        let net = build_network(
            &TraceSpan::new(0, vec![5, 5]),
            &table(vec![vec![80, 50], vec![10, 20]]),
        )
        .unwrap();
        // J + R*J + R + 2 nodes, J + 2*R*J + R edges
        assert_eq!(net.nodes.len(), 2 + 4 + 2 + 2);
        assert_eq!(net.edges.len(), 2 + 8 + 2);
    }

    #[test]
    fn every_workload_reaches_every_replica() {
        let (r, j) = (3, 4);
        let n = vec![vec![7; j]; r];
        let net = build_network(&TraceSpan::new(0, vec![1; j]), &table(n)).unwrap();
        for k in 0..r {
            for t in 0..j {
                let i = net.intermediate_node(k, t);
                let c = net.replica_node(k);
                assert!(net
                    .edges
                    .iter()
                    .any(|e| e.from == net.workload_node(t) && e.to == i));
                let g = net.gate_edge(k, t);
                assert_eq!((net.edges[g].from, net.edges[g].to), (i, c));
            }
            let re = net.replica_edge(k);
            assert_eq!(net.edges[re].to, net.sink);
        }
    }

    #[test]
    fn empty_and_mismatched_inputs() {
        let empty = CapacityTable::from_rows(vec![], vec![]);
        assert_eq!(
            build_network(&TraceSpan::new(0, vec![1]), &empty).unwrap_err(),
            Error::EmptyDeployment
        );
        assert!(matches!(
            build_network(&TraceSpan::new(0, vec![1, 2]), &table(vec![vec![3]])),
            Err(Error::DimensionMismatch(_))
        ));
    }

    #[test]
    fn dot_labels_flow_and_capacity() {
        let net = build_network(&TraceSpan::new(0, vec![10]), &table(vec![vec![80]])).unwrap();
        let dot = net.to_dot(Some(&[10, 10, 10, 10]));
        assert!(dot.starts_with("digraph"));
        assert!(dot.contains("\"10 | 80\""));
    }
}
