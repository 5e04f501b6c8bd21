//! FIFO preflow-push (push-relabel) maximum flow with the gap heuristic.

use std::collections::VecDeque;

use super::network::FlowNetwork;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FlowResult {
    pub value: u64,
    /// Flow on each edge, indexed like the input edge list.
    pub edge_flow: Vec<u64>,
}

pub fn max_flow(net: &FlowNetwork) -> FlowResult {
    let edges: Vec<(usize, usize, u64)> = net
        .edges
        .iter()
        .map(|e| (e.from, e.to, e.capacity))
        .collect();
    push_relabel(net.nodes.len(), net.source, net.sink, &edges)
}

/// Maximum `s`-`t` flow over an arbitrary edge list `(from, to, capacity)`.
pub fn push_relabel(n: usize, s: usize, t: usize, edges: &[(usize, usize, u64)]) -> FlowResult {
    if s == t || n == 0 {
        return FlowResult {
            value: 0,
            edge_flow: vec![0; edges.len()],
        };
    }
    // arc 2i is edge i, arc 2i+1 its reverse
    let mut head = vec![0usize; 2 * edges.len()];
    let mut cap = vec![0u64; 2 * edges.len()];
    let mut adj: Vec<Vec<usize>> = vec![Vec::new(); n];
    for (i, &(u, v, c)) in edges.iter().enumerate() {
        head[2 * i] = v;
        cap[2 * i] = c;
        head[2 * i + 1] = u;
        adj[u].push(2 * i);
        adj[v].push(2 * i + 1);
    }

    let mut height = vec![0usize; n];
    let mut excess = vec![0u128; n];
    let mut current = vec![0usize; n];
    // count[h] = nodes at height h, for the gap heuristic
    let mut count = vec![0usize; 2 * n + 1];
    let mut queue = VecDeque::new();
    let mut queued = vec![false; n];

    height[s] = n;
    count[0] = n - 1;
    count[n] = 1;
    for &a in &adj[s] {
        let c = cap[a];
        if c == 0 {
            continue;
        }
        let v = head[a];
        cap[a] -= c;
        cap[a ^ 1] += c;
        excess[v] += u128::from(c);
        if v != t && v != s && !queued[v] {
            queued[v] = true;
            queue.push_back(v);
        }
    }

    while let Some(u) = queue.pop_front() {
        queued[u] = false;
        // discharge u
        while excess[u] > 0 {
            if current[u] == adj[u].len() {
                // relabel
                let old = height[u];
                let mut best = usize::MAX;
                for &a in &adj[u] {
                    if cap[a] > 0 {
                        best = best.min(height[head[a]] + 1);
                    }
                }
                let new = best.min(2 * n);
                count[old] -= 1;
                height[u] = new;
                count[new] += 1;
                current[u] = 0;
                if count[old] == 0 && old < n {
                    // gap: nodes above `old` and below n can no longer reach t
                    for v in 0..n {
                        if v != s && height[v] > old && height[v] < n {
                            count[height[v]] -= 1;
                            height[v] = n + 1;
                            count[n + 1] += 1;
                            current[v] = 0;
                        }
                    }
                }
                if new >= 2 * n {
                    break;
                }
                continue;
            }
            let a = adj[u][current[u]];
            let v = head[a];
            if cap[a] > 0 && height[u] == height[v] + 1 {
                let pushed = excess[u].min(u128::from(cap[a])) as u64;
                cap[a] -= pushed;
                cap[a ^ 1] += pushed;
                excess[u] -= u128::from(pushed);
                excess[v] += u128::from(pushed);
                if v != s && v != t && !queued[v] {
                    queued[v] = true;
                    queue.push_back(v);
                }
            } else {
                current[u] += 1;
            }
        }
    }

    let edge_flow: Vec<u64> = edges
        .iter()
        .enumerate()
        .map(|(i, &(_, _, c))| c - cap[2 * i])
        .collect();
    let value = excess[t] as u64;
    FlowResult { value, edge_flow }
}
