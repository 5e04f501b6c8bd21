//! Fractional relaxation of the assignment program, solved with a dense
//! simplex (Bland's rule). Requests become divisible, which matches the
//! fraction-of-workload view used when reasoning about completion times.

use crate::costmodel::CapacityTable;

#[derive(Debug, Clone, PartialEq)]
pub struct FractionalAssignment {
    pub x: Vec<Vec<f64>>,
    pub objective: f64,
}

const EPS: f64 = 1e-9;

/// Maximizes `sum x` subject to demand, per-edge caps and the joint
/// replica budget `sum_j x[k][j] / n[k][j] <= 1`, with real-valued `x`.
pub fn fractional_relaxation(demand: &[u64], table: &CapacityTable) -> FractionalAssignment {
    let r = table.n.len();
    let j_count = demand.len();
    let vars: Vec<(usize, usize)> = (0..r)
        .flat_map(|k| (0..j_count).map(move |j| (k, j)))
        .filter(|&(k, j)| table.n[k][j] > 0 && table.e[k][j] > 0)
        .collect();
    let nv = vars.len();

    // rows: demand per type, cap per var, budget per replica
    let mut rows: Vec<(Vec<f64>, f64)> = Vec::new();
    for (j, &lam) in demand.iter().enumerate() {
        let coeffs = vars
            .iter()
            .map(|&(_, t)| if t == j { 1.0 } else { 0.0 })
            .collect();
        rows.push((coeffs, lam as f64));
    }
    for (v, &(k, j)) in vars.iter().enumerate() {
        let mut coeffs = vec![0.0; nv];
        coeffs[v] = 1.0;
        rows.push((coeffs, table.e[k][j].min(table.n[k][j]) as f64));
    }
    for k in 0..r {
        let coeffs = vars
            .iter()
            .map(|&(kk, j)| {
                if kk == k {
                    1.0 / table.n[k][j] as f64
                } else {
                    0.0
                }
            })
            .collect();
        rows.push((coeffs, 1.0));
    }

    let values = simplex_max(&vec![1.0; nv], &rows);
    let mut x = vec![vec![0.0; j_count]; r];
    for (v, &(k, j)) in vars.iter().enumerate() {
        x[k][j] = values[v];
    }
    let objective = values.iter().sum();
    FractionalAssignment { x, objective }
}

/// `max c.x` s.t. `A x <= b`, `x >= 0`, with `b >= 0`.
fn simplex_max(c: &[f64], rows: &[(Vec<f64>, f64)]) -> Vec<f64> {
    let nv = c.len();
    let m = rows.len();
    let width = nv + m + 1;
    let mut t = vec![vec![0.0; width]; m + 1];
    for (i, (coeffs, b)) in rows.iter().enumerate() {
        t[i][..nv].copy_from_slice(coeffs);
        t[i][nv + i] = 1.0;
        t[i][width - 1] = *b;
    }
    for (v, &cv) in c.iter().enumerate() {
        t[m][v] = -cv;
    }
    let mut basis: Vec<usize> = (nv..nv + m).collect();

    loop {
        let Some(col) = (0..width - 1).find(|&v| t[m][v] < -EPS) else {
            break;
        };
        let mut pivot: Option<(usize, f64)> = None;
        for i in 0..m {
            if t[i][col] > EPS {
                let ratio = t[i][width - 1] / t[i][col];
                let better = match pivot {
                    None => true,
                    Some((pi, pr)) => {
                        ratio < pr - EPS || (ratio <= pr + EPS && basis[i] < basis[pi])
                    }
                };
                if better {
                    pivot = Some((i, ratio));
                }
            }
        }
        let Some((row, _)) = pivot else {
            break; // unbounded; cannot happen with finite caps
        };
        let p = t[row][col];
        for v in 0..width {
            t[row][v] /= p;
        }
        for i in 0..=m {
            if i != row && t[i][col].abs() > 0.0 {
                let f = t[i][col];
                for v in 0..width {
                    t[i][v] -= f * t[row][v];
                }
            }
        }
        basis[row] = col;
    }

    let mut x = vec![0.0; nv];
    for (i, &b) in basis.iter().enumerate() {
        if b < nv {
            x[b] = t[i][width - 1].max(0.0);
        }
    }
    x
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_replica_prefers_cheap_type() {
        // n = [80, 50]: a full budget of type 0 gives 80 requests
        let table = CapacityTable::from_rows(vec![vec![80, 50]], vec![vec![80, 50]]);
        let f = fractional_relaxation(&[100, 50], &table);
        assert!((f.objective - 80.0).abs() < 1e-6);
        assert!((f.x[0][0] - 80.0).abs() < 1e-6);
    }

    #[test]
    fn demand_limited() {
        let table = CapacityTable::from_rows(vec![vec![80, 50]], vec![vec![80, 50]]);
        let f = fractional_relaxation(&[20, 10], &table);
        assert!((f.objective - 30.0).abs() < 1e-6);
    }
}
