//! Hopcroft–Karp maximum bipartite matching.

use std::collections::VecDeque;

const FREE: usize = usize::MAX;
const INF: usize = usize::MAX;

/// Maximum matching of a bipartite graph with `adj.len()` left vertices and
/// `n_right` right vertices. Returns `match_left[u] = Some(v)`.
///
/// Neighbours are tried in the order given, so for a fixed adjacency the
/// result is fully deterministic.
pub fn hopcroft_karp(adj: &[Vec<usize>], n_right: usize) -> Vec<Option<usize>> {
    let n_left = adj.len();
    let mut match_left = vec![FREE; n_left];
    let mut match_right = vec![FREE; n_right];
    let mut dist = vec![INF; n_left];

    while bfs(adj, &match_left, &match_right, &mut dist) {
        for u in 0..n_left {
            if match_left[u] == FREE {
                dfs(u, adj, &mut match_left, &mut match_right, &mut dist);
            }
        }
    }
    match_left
        .into_iter()
        .map(|v| (v != FREE).then_some(v))
        .collect()
}

/// Layers free left vertices at distance 0; true if some augmenting path exists.
fn bfs(adj: &[Vec<usize>], match_left: &[usize], match_right: &[usize], dist: &mut [usize]) -> bool {
    let mut queue = VecDeque::new();
    for (u, d) in dist.iter_mut().enumerate() {
        if match_left[u] == FREE {
            *d = 0;
            queue.push_back(u);
        } else {
            *d = INF;
        }
    }
    let mut found = false;
    while let Some(u) = queue.pop_front() {
        for &v in &adj[u] {
            let w = match_right[v];
            if w == FREE {
                found = true;
            } else if dist[w] == INF {
                dist[w] = dist[u] + 1;
                queue.push_back(w);
            }
        }
    }
    found
}

fn dfs(
    u: usize,
    adj: &[Vec<usize>],
    match_left: &mut [usize],
    match_right: &mut [usize],
    dist: &mut [usize],
) -> bool {
    for &v in &adj[u] {
        let w = match_right[v];
        if w == FREE || (dist[w] == dist[u] + 1 && dfs(w, adj, match_left, match_right, dist)) {
            match_left[u] = v;
            match_right[v] = u;
            return true;
        }
    }
    dist[u] = INF;
    false
}
