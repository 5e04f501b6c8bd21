//! Lower-level optimization: route each span's per-type demand onto the
//! replicas of a fixed deployment so that the number of served requests is
//! maximal.
//!
//! For replica `k` with per-type capacities `n_{k,j}`, `M_k = lcm_j n_{k,j}`
//! and one type-`j` request costs `M_k / n_{k,j}` units of the replica's
//! `M_k`-unit budget. An assignment `x` must satisfy
//!
//! * C1: `sum_k x[k][j] <= lambda_j`;
//! * C2: `x[k][j] <= e[k][j]`;
//! * C3: `sum_j x[k][j] * M_k / n_{k,j} <= M_k`.
//!
//! [`solve`] runs preflow-push on the routing network, extracts a feasible
//! assignment, improves it locally, and, when the instance is small enough,
//! refines it to the exact integer optimum.

mod assign;
mod lp;
mod network;
mod preflow;

pub use assign::{exact_assignment, extract_assignment, improve_assignment, ExactBudget};
pub use lp::{fractional_relaxation, FractionalAssignment};
pub use network::{build_network, Edge, FlowNetwork, Node};
pub use preflow::{max_flow, push_relabel, FlowResult};

use num_integer::Integer;
use serde::{Deserialize, Serialize};

use crate::costmodel::CapacityTable;
use crate::error::{Error, Result};
use crate::types::TraceSpan;

/// Budget `M` used when the exact LCM does not fit.
pub const SCALED_BUDGET: u64 = 1 << 40;

/// LCMs above this are treated as overflow.
pub const LCM_LIMIT: u64 = 1 << 62;

/// A replica's normalized budget: `M` units in total, `units[j]` per type-j
/// request, `None` for types the replica cannot serve.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Normalized {
    pub m: u64,
    pub units: Vec<Option<u64>>,
}

impl Normalized {
    /// Units consumed by a row of request counts, or `None` if the row
    /// uses a type the replica cannot serve.
    pub fn load(&self, x: &[u64]) -> Option<u128> {
        let mut total = 0u128;
        for (&xj, u) in x.iter().zip(&self.units) {
            if xj > 0 {
                total += u128::from(xj) * u128::from((*u)?);
            }
        }
        Some(total)
    }

    pub fn fits(&self, x: &[u64]) -> bool {
        self.load(x).is_some_and(|l| l <= u128::from(self.m))
    }
}

/// Exact LCM normalization of one replica's capacity row. Zero entries are
/// excluded from the LCM and get no unit cost.
pub fn normalize(n_row: &[u64]) -> Result<Normalized> {
    let mut m: u64 = 1;
    for &n in n_row.iter().filter(|&&n| n > 0) {
        let g = m.gcd(&n);
        m = (m / g).checked_mul(n).ok_or(Error::Overflow)?;
        if m > LCM_LIMIT {
            return Err(Error::Overflow);
        }
    }
    let units = n_row.iter().map(|&n| (n > 0).then(|| m / n)).collect();
    Ok(Normalized { m, units })
}

/// [`normalize`], falling back to a fixed `2^40`-unit budget with unit
/// costs rounded up when the LCM overflows. Rounding up keeps every
/// assignment that fits the scaled budget feasible for the exact one; each
/// type loses less than one request of headroom.
pub fn normalize_or_scale(n_row: &[u64]) -> Normalized {
    normalize(n_row).unwrap_or_else(|_| Normalized {
        m: SCALED_BUDGET,
        units: n_row
            .iter()
            .map(|&n| (n > 0).then(|| SCALED_BUDGET.div_ceil(n)))
            .collect(),
    })
}

/// `x[k][j]`, requests of type `j` routed to replica `k` in one span.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AssignmentMatrix {
    pub x: Vec<Vec<u64>>,
    pub objective: u64,
}

impl AssignmentMatrix {
    pub fn new(x: Vec<Vec<u64>>) -> Self {
        let objective = x.iter().flatten().sum();
        AssignmentMatrix { x, objective }
    }

    pub fn zeros(replicas: usize, types: usize) -> Self {
        AssignmentMatrix::new(vec![vec![0; types]; replicas])
    }

    /// Requests of each type that are routed somewhere.
    pub fn served_per_type(&self) -> Vec<u64> {
        let types = self.x.first().map_or(0, Vec::len);
        (0..types)
            .map(|j| self.x.iter().map(|row| row[j]).sum())
            .collect()
    }

    /// First violated constraint, if any.
    pub fn violation(&self, demand: &[u64], table: &CapacityTable) -> Option<String> {
        for (j, (&served, &lam)) in self.served_per_type().iter().zip(demand).enumerate() {
            if served > lam {
                return Some(format!("C1: type {j} serves {served} > demand {lam}"));
            }
        }
        for (k, row) in self.x.iter().enumerate() {
            for (j, &x) in row.iter().enumerate() {
                if x > table.e[k][j] {
                    return Some(format!("C2: x[{k}][{j}] = {x} > e = {}", table.e[k][j]));
                }
            }
            if !normalize_or_scale(&table.n[k]).fits(row) {
                return Some(format!("C3: replica {k} over budget"));
            }
        }
        None
    }
}

/// Ops allowed for the exact refinement inside [`solve`].
pub const DEFAULT_EXACT_BUDGET: u64 = 10_000_000;

/// Maximum-throughput assignment for one span.
pub fn solve(span: &TraceSpan, table: &CapacityTable) -> Result<AssignmentMatrix> {
    solve_with_budget(span, table, DEFAULT_EXACT_BUDGET)
}

/// As [`solve`], with an explicit work budget for the exact refinement.
/// A budget of zero skips it.
pub fn solve_with_budget(
    span: &TraceSpan,
    table: &CapacityTable,
    budget: u64,
) -> Result<AssignmentMatrix> {
    let net = build_network(span, table)?;
    let flow = max_flow(&net);
    let mut best = extract_assignment(&net, &flow);
    improve_assignment(&net, &mut best);
    if budget > 0 {
        if let Some(exact) = exact_assignment(&net, ExactBudget(budget)) {
            if exact.objective > best.objective {
                best = exact;
            }
        }
    }
    Ok(best)
}
