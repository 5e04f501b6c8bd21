use super::network::FlowNetwork;
use super::preflow::FlowResult;
use super::{AssignmentMatrix, Normalized};

/// Work allowance, in DP transitions, for [`exact_assignment`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ExactBudget(pub u64);

/// Largest DP table the exact refinement will allocate.
const MAX_STATES: u64 = 4_000_000;

struct Problem<'a> {
    demand: &'a [u64],
    e: &'a [Vec<u64>],
    n: &'a [Vec<u64>],
    norms: Vec<Normalized>,
}

impl<'a> Problem<'a> {
    fn of(net: &'a FlowNetwork) -> Self {
        Problem {
            demand: &net.demand,
            e: &net.e,
            n: &net.n,
            norms: (0..net.replicas).map(|k| net.normalized(k)).collect(),
        }
    }

    fn used(&self, k: usize, row: &[u64]) -> u64 {
        self.norms[k].load(row).unwrap_or(u128::MAX) as u64
    }

    /// Requests of type `j` replica `k` can still take.
    fn room(&self, k: usize, j: usize, x: &[Vec<u64>], served: &[u64]) -> u64 {
        let Some(u) = self.norms[k].units[j] else {
            return 0;
        };
        let slack = self.norms[k].m.saturating_sub(self.used(k, &x[k]));
        (slack / u)
            .min(self.e[k][j].saturating_sub(x[k][j]))
            .min(self.demand[j].saturating_sub(served[j]))
    }

    fn served(&self, x: &[Vec<u64>]) -> Vec<u64> {
        (0..self.demand.len())
            .map(|j| x.iter().map(|r| r[j]).sum())
            .collect()
    }

    /// Tops up every (replica, type) pair, best exclusive-use rate first.
    fn fill(&self, x: &mut [Vec<u64>]) {
        let mut served = self.served(x);
        let mut pairs: Vec<(usize, usize)> = (0..x.len())
            .flat_map(|k| (0..self.demand.len()).map(move |j| (k, j)))
            .filter(|&(k, j)| self.norms[k].units[j].is_some() && self.e[k][j] > 0)
            .collect();
        pairs.sort_by(|a, b| self.n[b.0][b.1].cmp(&self.n[a.0][a.1]).then(a.cmp(b)));
        for (k, j) in pairs {
            let add = self.room(k, j, x, &served);
            x[k][j] += add;
            served[j] += add;
        }
    }
}

/// Reads the per-gate flows as request counts and drops the most expensive
/// requests of any replica whose joint budget the relaxed flow overran.
pub fn extract_assignment(net: &FlowNetwork, flow: &FlowResult) -> AssignmentMatrix {
    let p = Problem::of(net);
    let mut x: Vec<Vec<u64>> = (0..net.replicas)
        .map(|k| {
            (0..net.types)
                .map(|j| flow.edge_flow[net.gate_edge(k, j)])
                .collect()
        })
        .collect();
    for (k, row) in x.iter_mut().enumerate() {
        let norm = &p.norms[k];
        for (j, v) in row.iter_mut().enumerate() {
            if norm.units[j].is_none() {
                *v = 0;
            }
        }
        let mut order: Vec<usize> = (0..net.types).filter(|&j| row[j] > 0).collect();
        // most expensive first
        order.sort_by(|&a, &b| norm.units[b].cmp(&norm.units[a]).then(a.cmp(&b)));
        for j in order {
            let load = norm.load(row).unwrap_or(0);
            if load <= u128::from(norm.m) {
                break;
            }
            let u = u128::from(norm.units[j].unwrap_or(1));
            let drop = (load - u128::from(norm.m))
                .div_ceil(u)
                .min(u128::from(row[j]));
            row[j] -= drop as u64;
        }
    }
    AssignmentMatrix::new(x)
}

/// Greedy fill followed by pairwise shifts: move type-`j` requests from one
/// replica to another that has room for them, and keep the move only if
/// refilling the freed budget serves more requests.
pub fn improve_assignment(net: &FlowNetwork, a: &mut AssignmentMatrix) {
    let p = Problem::of(net);
    let mut x = a.x.clone();
    p.fill(&mut x);
    let mut best: u64 = x.iter().flatten().sum();
    let r = net.replicas;
    for _round in 0..32 {
        let mut improved = false;
        for from in 0..r {
            for j in 0..net.types {
                for to in 0..r {
                    if to == from || x[from][j] == 0 {
                        continue;
                    }
                    let served = p.served(&x);
                    // the shift keeps served[j] fixed, so demand is not the limit
                    let mut relaxed = served.clone();
                    relaxed[j] = relaxed[j].saturating_sub(x[from][j]);
                    let q = p.room(to, j, &x, &relaxed).min(x[from][j]);
                    if q == 0 {
                        continue;
                    }
                    let mut trial = x.clone();
                    trial[from][j] -= q;
                    trial[to][j] += q;
                    p.fill(&mut trial);
                    let total: u64 = trial.iter().flatten().sum();
                    if total > best {
                        best = total;
                        x = trial;
                        improved = true;
                    }
                }
            }
        }
        if !improved {
            break;
        }
    }
    *a = AssignmentMatrix::new(x);
}

/// Exact integer optimum by dynamic programming over replicas.
///
/// One type (the one with the largest demand) is kept out of the state: once
/// the other types are fixed on every replica, each replica's remaining
/// budget admits a known number of that type, and the total is simply the
/// sum of those slacks capped by its demand. The state is therefore the
/// vector of served counts of the remaining types. Returns `None` if the
/// instance needs more than `budget` transitions.
pub fn exact_assignment(net: &FlowNetwork, budget: ExactBudget) -> Option<AssignmentMatrix> {
    let p = Problem::of(net);
    let types = net.types;
    let r = net.replicas;
    if types == 0 {
        return Some(AssignmentMatrix::zeros(r, 0));
    }
    let last = (0..types).max_by_key(|&j| (p.demand[j], std::cmp::Reverse(j)))?;
    let others: Vec<usize> = (0..types).filter(|&j| j != last).collect();

    let mut states: u64 = 1;
    let mut strides = Vec::with_capacity(others.len());
    for &j in &others {
        strides.push(states);
        states = states.checked_mul(p.demand[j] + 1)?;
    }
    if states > MAX_STATES {
        return None;
    }
    let mut bound_ops: u64 = 0;
    for k in 0..r {
        let mut b: u64 = 1;
        for &j in &others {
            b = b.checked_mul(p.e[k][j].min(p.demand[j]) + 1)?;
        }
        bound_ops = bound_ops.checked_add(b.checked_mul(states)?)?;
    }
    // the box bound overcounts the budget simplex by up to J!; allow for it
    if bound_ops / 8 > budget.0 {
        return None;
    }

    // per replica: feasible choices for the other types, with the slack
    // they leave for the last type
    struct Choice {
        counts: Vec<u64>,
        offset: u64,
        slack: u64,
    }
    let mut choices: Vec<Vec<Choice>> = Vec::with_capacity(r);
    let mut ops: u64 = 0;
    for k in 0..r {
        let norm = &p.norms[k];
        let caps: Vec<u64> = others
            .iter()
            .map(|&j| {
                if norm.units[j].is_some() {
                    p.e[k][j].min(p.demand[j])
                } else {
                    0
                }
            })
            .collect();
        let mut list = Vec::new();
        let mut counts = vec![0u64; others.len()];
        loop {
            let mut row = vec![0u64; types];
            for (i, &j) in others.iter().enumerate() {
                row[j] = counts[i];
            }
            if let Some(load) = norm.load(&row) {
                if load <= u128::from(norm.m) {
                    let slack = match norm.units[last] {
                        Some(u) => ((u128::from(norm.m) - load) / u128::from(u))
                            .min(u128::from(p.e[k][last]))
                            as u64,
                        None => 0,
                    };
                    let offset = counts.iter().zip(&strides).map(|(c, s)| c * s).sum();
                    list.push(Choice {
                        counts: counts.clone(),
                        offset,
                        slack,
                    });
                }
            }
            // odometer increment
            let mut i = 0;
            loop {
                if i == counts.len() {
                    break;
                }
                if counts[i] < caps[i] {
                    counts[i] += 1;
                    break;
                }
                counts[i] = 0;
                i += 1;
            }
            if i == counts.len() {
                break;
            }
        }
        ops = ops.saturating_add(states.saturating_mul(list.len() as u64));
        choices.push(list);
    }
    if ops > budget.0 {
        return None;
    }

    let states = states as usize;
    let decode = |s: usize| -> Vec<u64> {
        others
            .iter()
            .zip(&strides)
            .map(|(&j, &st)| (s as u64 / st) % (p.demand[j] + 1))
            .collect()
    };
    let mut value = vec![-1i64; states];
    value[0] = 0;
    let mut parent: Vec<Vec<u32>> = Vec::with_capacity(r);
    for list in &choices {
        let mut next = vec![-1i64; states];
        let mut par = vec![u32::MAX; states];
        for s in 0..states {
            if value[s] < 0 {
                continue;
            }
            let digits = decode(s);
            for (ci, c) in list.iter().enumerate() {
                if c.counts
                    .iter()
                    .zip(&digits)
                    .zip(&others)
                    .any(|((&add, &have), &j)| have + add > p.demand[j])
                {
                    continue;
                }
                let ns = s + c.offset as usize;
                let v = value[s] + c.slack as i64;
                if v > next[ns] {
                    next[ns] = v;
                    par[ns] = ci as u32;
                }
            }
        }
        value = next;
        parent.push(par);
    }

    let mut best: Option<(u64, usize)> = None;
    for (s, &v) in value.iter().enumerate() {
        if v < 0 {
            continue;
        }
        let total = decode(s).iter().sum::<u64>() + (v as u64).min(p.demand[last]);
        if best.is_none_or(|(b, _)| total > b) {
            best = Some((total, s));
        }
    }
    let (_, mut s) = best?;
    let mut x = vec![vec![0u64; types]; r];
    let mut slacks = vec![0u64; r];
    for k in (0..r).rev() {
        let c = &choices[k][parent[k][s] as usize];
        for (i, &j) in others.iter().enumerate() {
            x[k][j] = c.counts[i];
        }
        slacks[k] = c.slack;
        s -= c.offset as usize;
    }
    let mut left = p.demand[last];
    for k in 0..r {
        let take = slacks[k].min(left);
        x[k][last] = take;
        left -= take;
    }
    Some(AssignmentMatrix::new(x))
}
