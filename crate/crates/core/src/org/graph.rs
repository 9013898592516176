use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Neighbors of every agent ranked by Euclidean distance, ties by id.
/// Agents flagged dead in `alive` neither list nor get listed.
pub fn nearest_neighbors(positions: &[(f64, f64)], alive: Option<&[bool]>, m: usize) -> Vec<Vec<usize>> {
    let n = positions.len();
    let live = |i: usize| alive.is_none_or(|a| a[i]);
    (0..n)
        .map(|i| {
            if !live(i) {
                return Vec::new();
            }
            let mut others: Vec<(f64, usize)> = (0..n)
                .filter(|&j| j != i && live(j))
                .map(|j| {
                    let dx = positions[i].0 - positions[j].0;
                    let dy = positions[i].1 - positions[j].1;
                    (dx * dx + dy * dy, j)
                })
                .collect();
            others.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            others.into_iter().take(m).map(|(_, j)| j).collect()
        })
        .collect()
}

/// Bit `r` of `id` is the decision toward the rank-`r` neighbor.
pub fn decode_org_action(id: usize, m: usize) -> Result<Vec<bool>> {
    if m >= usize::BITS as usize || id >= 1 << m {
        return Err(Error::usage(format!(
            "organization action {id} outside 0..2^{m}"
        )));
    }
    Ok((0..m).map(|r| id >> r & 1 == 1).collect())
}

pub fn encode_org_action(bits: &[bool]) -> usize {
    bits.iter()
        .enumerate()
        .fold(0, |acc, (r, &b)| acc | (usize::from(b) << r))
}

/// Directed connection requests plus their OR-symmetrized edge set.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AgentGraph {
    pub n: usize,
    pub neighbors: Vec<Vec<usize>>,
    pub decisions: Vec<Vec<bool>>,
    /// Undirected edges stored as `(min, max)`.
    pub edges: BTreeSet<(usize, usize)>,
}

impl AgentGraph {
    pub fn empty(n: usize) -> Self {
        Self {
            n,
            neighbors: vec![Vec::new(); n],
            decisions: vec![Vec::new(); n],
            edges: BTreeSet::new(),
        }
    }

    pub fn has_edge(&self, i: usize, j: usize) -> bool {
        self.edges.contains(&(i.min(j), i.max(j)))
    }

    pub fn adjacency(&self) -> Vec<Vec<usize>> {
        let mut adj = vec![Vec::new(); self.n];
        for &(a, b) in &self.edges {
            adj[a].push(b);
            adj[b].push(a);
        }
        adj
    }
}

/// Edge `(i, j)` exists iff `i` requested `j` or `j` requested `i`; a
/// direction that is not listed contributes nothing.
pub fn build_team_graph(decisions: &[Vec<bool>], neighbors: &[Vec<usize>]) -> Result<AgentGraph> {
    let n = neighbors.len();
    if decisions.len() != n {
        return Err(Error::usage(format!(
            "{} decision rows for {n} agents",
            decisions.len()
        )));
    }
    let mut edges = BTreeSet::new();
    for (i, (d, nb)) in decisions.iter().zip(neighbors).enumerate() {
        if d.len() != nb.len() {
            return Err(Error::usage(format!(
                "agent {i}: {} decisions for {} neighbors",
                d.len(),
                nb.len()
            )));
        }
        for (&on, &j) in d.iter().zip(nb) {
            if j >= n || j == i {
                return Err(Error::usage(format!("agent {i}: invalid neighbor {j}")));
            }
            if on {
                edges.insert((i.min(j), i.max(j)));
            }
        }
    }
    Ok(AgentGraph {
        n,
        neighbors: neighbors.to_vec(),
        decisions: decisions.to_vec(),
        edges,
    })
}

/// Agents grouped into connected components. Team ids are ordered by the
/// smallest member; excluded agents carry no team.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TeamPartition {
    pub team_of: Vec<Option<usize>>,
    pub teams: Vec<Vec<usize>>,
}

impl TeamPartition {
    pub fn singletons(n: usize) -> Self {
        Self {
            team_of: (0..n).map(Some).collect(),
            teams: (0..n).map(|i| vec![i]).collect(),
        }
    }

    pub fn team_count(&self) -> usize {
        self.teams.len()
    }

    /// Builds a partition from arbitrary labels (`None` = excluded).
    pub fn from_labels(labels: &[Option<usize>]) -> Self {
        let mut first: Vec<(usize, usize)> = Vec::new();
        for (i, l) in labels.iter().enumerate() {
            if let Some(l) = *l {
                if !first.iter().any(|&(lab, _)| lab == l) {
                    first.push((l, i));
                }
            }
        }
        let mut teams: Vec<Vec<usize>> = first
            .iter()
            .map(|&(lab, _)| {
                (0..labels.len())
                    .filter(|&i| labels[i] == Some(lab))
                    .collect()
            })
            .collect();
        teams.sort_by_key(|t| t[0]);
        let mut team_of = vec![None; labels.len()];
        for (k, t) in teams.iter().enumerate() {
            for &i in t {
                team_of[i] = Some(k);
            }
        }
        Self { team_of, teams }
    }

    /// Drops agents whose flag is false, renumbering teams.
    pub fn restrict(&self, keep: &[bool]) -> Self {
        let labels: Vec<Option<usize>> = self
            .team_of
            .iter()
            .zip(keep)
            .map(|(t, &k)| if k { *t } else { None })
            .collect();
        Self::from_labels(&labels)
    }

    pub fn same_as(&self, other: &TeamPartition) -> bool {
        self.teams == other.teams
    }
}

/// Connected components by iterative depth-first search, linear in nodes
/// plus edges.
pub fn find_teams(graph: &AgentGraph) -> TeamPartition {
    let adj = graph.adjacency();
    let mut team_of = vec![None; graph.n];
    let mut teams = Vec::new();
    let mut stack = Vec::new();
    for root in 0..graph.n {
        if team_of[root].is_some() {
            continue;
        }
        let id = teams.len();
        let mut members = vec![root];
        team_of[root] = Some(id);
        stack.push(root);
        while let Some(v) = stack.pop() {
            for &w in &adj[v] {
                if team_of[w].is_none() {
                    team_of[w] = Some(id);
                    members.push(w);
                    stack.push(w);
                }
            }
        }
        members.sort_unstable();
        teams.push(members);
    }
    TeamPartition { team_of, teams }
}

fn local_edges(graph: &AgentGraph, nodes: &[usize]) -> BTreeSet<(usize, usize)> {
    graph
        .edges
        .iter()
        .filter(|(a, b)| nodes.contains(a) && nodes.contains(b))
        .copied()
        .collect()
}

/// Edit distance between the local subgraphs around `i` (node set from
/// `before`), divided by the neighbor count. With a shared labeled node set
/// and unit-cost edge edits this is the symmetric difference size.
pub fn structural_reward(before: &AgentGraph, after: &AgentGraph, i: usize) -> Result<f64> {
    if before.n != after.n {
        return Err(Error::usage(format!(
            "graphs over {} and {} agents",
            before.n, after.n
        )));
    }
    let nb = &before.neighbors[i];
    if nb.is_empty() {
        return Ok(0.0);
    }
    let mut nodes = nb.clone();
    nodes.push(i);
    let eb = local_edges(before, &nodes);
    let ea = local_edges(after, &nodes);
    Ok(eb.symmetric_difference(&ea).count() as f64 / nb.len() as f64)
}

pub fn total_org_reward(r_e: f64, r_u: f64, alpha_u: f64) -> f64 {
    r_e + alpha_u * r_u
}

/// One line of the team-trace JSONL export.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TeamTrace {
    pub episode: usize,
    pub t: usize,
    pub edges: Vec<(usize, usize)>,
    pub teams: Vec<Vec<usize>>,
}

impl TeamTrace {
    pub fn new(episode: usize, t: usize, graph: &AgentGraph, teams: &TeamPartition) -> Self {
        Self {
            episode,
            t,
            edges: graph.edges.iter().copied().collect(),
            teams: teams.teams.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn single_agent_has_no_neighbors() {
        assert_eq!(nearest_neighbors(&[(0.3, 0.3)], None, 2), vec![Vec::<usize>::new()]);
    }

    #[test]
    fn distance_tie_broken_by_id() {
        let nb = nearest_neighbors(&[(0.0, 0.0), (1.0, 0.0), (0.0, 1.0)], None, 2);
        assert_eq!(nb[0], vec![1, 2]);
    }

    #[test]
    fn dead_agents_are_skipped() {
        let pos = [(0.0, 0.0), (1.0, 0.0), (2.0, 0.0)];
        let nb = nearest_neighbors(&pos, Some(&[true, false, true]), 2);
        assert_eq!(nb, vec![vec![2], vec![], vec![0]]);
    }

    #[test]
    fn action_codes() {
        assert_eq!(decode_org_action(0, 2).unwrap(), vec![false, false]);
        assert_eq!(decode_org_action(3, 2).unwrap(), vec![true, true]);
        assert_eq!(decode_org_action(1, 2).unwrap(), vec![true, false]);
        for id in 0..16 {
            assert_eq!(encode_org_action(&decode_org_action(id, 4).unwrap()), id);
        }
        assert!(matches!(decode_org_action(4, 2), Err(Error::Usage(_))));
    }

    #[test]
    fn zero_decisions_give_singletons() {
        let nb = vec![vec![1], vec![0], vec![1]];
        let g = build_team_graph(&[vec![false], vec![false], vec![false]], &nb).unwrap();
        assert!(g.edges.is_empty());
        assert_eq!(find_teams(&g).team_count(), 3);
    }

    #[test]
    fn one_sided_request_creates_edge() {
        let nb = vec![vec![1], vec![0]];
        let g = build_team_graph(&[vec![true], vec![false]], &nb).unwrap();
        assert!(g.has_edge(0, 1) && g.has_edge(1, 0));
    }

    #[test]
    fn chain_and_isolated() {
        let mut g = AgentGraph::empty(4);
        g.edges.extend([(0, 1), (1, 2)]);
        let p = find_teams(&g);
        assert_eq!(p.teams, vec![vec![0, 1, 2], vec![3]]);
        assert_eq!(find_teams(&AgentGraph::empty(5)).team_count(), 5);
    }

    #[test]
    fn structural_reward_examples() {
        let mut before = AgentGraph::empty(3);
        before.neighbors[0] = vec![1, 2];
        before.edges.extend([(0, 1), (0, 2)]);
        let mut after = before.clone();
        assert_eq!(structural_reward(&before, &after, 0).unwrap(), 0.0);
        after.edges.remove(&(0, 2));
        assert_eq!(structural_reward(&before, &after, 0).unwrap(), 0.5);
        assert_eq!(structural_reward(&before, &after, 1).unwrap(), 0.0);
    }

    #[test]
    fn combined_reward() {
        assert_eq!(total_org_reward(3.0, 0.7, 0.0), 3.0);
        assert!((total_org_reward(5.0, 0.5, -0.1) - 4.95).abs() < 1e-12);
        assert_eq!(total_org_reward(0.0, 1.0, -1.0), -1.0);
    }

    #[test]
    fn restrict_renumbers() {
        let p = TeamPartition::from_labels(&[Some(0), Some(0), Some(1), Some(2)]);
        let r = p.restrict(&[false, true, true, true]);
        assert_eq!(r.teams, vec![vec![1], vec![2], vec![3]]);
        assert_eq!(r.team_of[0], None);
    }

    fn brute_neighbors(pos: &[(f64, f64)], m: usize) -> Vec<Vec<usize>> {
        (0..pos.len())
            .map(|i| {
                let mut all: Vec<usize> = (0..pos.len()).filter(|&j| j != i).collect();
                // stable sort by exact squared distance keeps id order on ties
                all.sort_by(|&a, &b| {
                    let da = (pos[i].0 - pos[a].0).powi(2) + (pos[i].1 - pos[a].1).powi(2);
                    let db = (pos[i].0 - pos[b].0).powi(2) + (pos[i].1 - pos[b].1).powi(2);
                    da.partial_cmp(&db).unwrap()
                });
                all.truncate(m);
                all
            })
            .collect()
    }

    /// Transitive closure by Floyd-Warshall style relaxation.
    fn closure_partition(n: usize, edges: &BTreeSet<(usize, usize)>) -> Vec<Vec<usize>> {
        let mut reach = vec![vec![false; n]; n];
        for i in 0..n {
            reach[i][i] = true;
        }
        for &(a, b) in edges {
            reach[a][b] = true;
            reach[b][a] = true;
        }
        for k in 0..n {
            for i in 0..n {
                for j in 0..n {
                    if reach[i][k] && reach[k][j] {
                        reach[i][j] = true;
                    }
                }
            }
        }
        let mut teams: Vec<Vec<usize>> = Vec::new();
        for i in 0..n {
            if !teams.iter().any(|t| t.contains(&i)) {
                teams.push((0..n).filter(|&j| reach[i][j]).collect());
            }
        }
        teams
    }

    /// Shortest edit path by breadth-first search over edge sets, using unit
    /// edge insertions and deletions on a fixed labeled node set.
    fn edit_path_length(n: usize, from: &BTreeSet<(usize, usize)>, to: &BTreeSet<(usize, usize)>) -> usize {
        let pairs: Vec<(usize, usize)> = (0..n)
            .flat_map(|a| (a + 1..n).map(move |b| (a, b)))
            .collect();
        let encode = |s: &BTreeSet<(usize, usize)>| {
            pairs
                .iter()
                .enumerate()
                .filter(|(_, p)| s.contains(p))
                .fold(0u32, |acc, (k, _)| acc | 1 << k)
        };
        let (start, goal) = (encode(from), encode(to));
        let mut dist = vec![usize::MAX; 1 << pairs.len()];
        let mut queue = std::collections::VecDeque::from([start]);
        dist[start as usize] = 0;
        while let Some(s) = queue.pop_front() {
            if s == goal {
                return dist[s as usize];
            }
            for k in 0..pairs.len() {
                let t = s ^ (1 << k);
                if dist[t as usize] == usize::MAX {
                    dist[t as usize] = dist[s as usize] + 1;
                    queue.push_back(t);
                }
            }
        }
        unreachable!()
    }

    proptest! {
        #[test]
        fn neighbors_match_full_sort(pos in prop::collection::vec((0i32..20, 0i32..20), 12), m in 1usize..4) {
            let pos: Vec<(f64, f64)> = pos.into_iter().map(|(x, y)| (x as f64, y as f64)).collect();
            prop_assert_eq!(nearest_neighbors(&pos, None, m), brute_neighbors(&pos, m));
        }

        #[test]
        fn graph_is_or_of_requests(
            pos in prop::collection::vec((0i32..10, 0i32..10), 8),
            bits in prop::collection::vec(0usize..4, 8),
        ) {
            let pos: Vec<(f64, f64)> = pos.into_iter().map(|(x, y)| (x as f64, y as f64)).collect();
            let nb = nearest_neighbors(&pos, None, 2);
            let d: Vec<Vec<bool>> = bits.iter().map(|&b| decode_org_action(b, 2).unwrap()).collect();
            let g = build_team_graph(&d, &nb).unwrap();
            for i in 0..8 {
                for j in 0..8 {
                    if i == j { continue; }
                    let req = |a: usize, b: usize| nb[a].iter().position(|&x| x == b).is_some_and(|r| d[a][r]);
                    prop_assert_eq!(g.has_edge(i, j), req(i, j) || req(j, i));
                    prop_assert_eq!(g.has_edge(i, j), g.has_edge(j, i));
                }
            }
        }

        #[test]
        fn extra_bit_never_adds_teams(
            pos in prop::collection::vec((0i32..10, 0i32..10), 8),
            bits in prop::collection::vec(0usize..4, 8),
            who in 0usize..8, rank in 0usize..2,
        ) {
            let pos: Vec<(f64, f64)> = pos.into_iter().map(|(x, y)| (x as f64, y as f64)).collect();
            let nb = nearest_neighbors(&pos, None, 2);
            let mut d: Vec<Vec<bool>> = bits.iter().map(|&b| decode_org_action(b, 2).unwrap()).collect();
            let before = find_teams(&build_team_graph(&d, &nb).unwrap()).team_count();
            d[who][rank] = true;
            let after = find_teams(&build_team_graph(&d, &nb).unwrap()).team_count();
            prop_assert!(after <= before);
        }

        #[test]
        fn teams_match_closure(n in 1usize..=12, raw in prop::collection::vec((0usize..12, 0usize..12), 0..20)) {
            let mut g = AgentGraph::empty(n);
            for (a, b) in raw {
                let (a, b) = (a % n, b % n);
                if a != b {
                    g.edges.insert((a.min(b), a.max(b)));
                }
            }
            let p = find_teams(&g);
            prop_assert_eq!(&p.teams, &closure_partition(n, &g.edges));
            for i in 0..n {
                for j in 0..n {
                    let same = p.team_of[i] == p.team_of[j];
                    prop_assert_eq!(same, p.teams.iter().any(|t| t.contains(&i) && t.contains(&j)));
                }
            }
        }

        #[test]
        fn reward_equals_edit_path(eb in prop::collection::vec(any::<bool>(), 10), ea in prop::collection::vec(any::<bool>(), 10)) {
            let pairs: Vec<(usize, usize)> = (0..5).flat_map(|a| (a + 1..5).map(move |b| (a, b))).collect();
            let mut before = AgentGraph::empty(5);
            before.neighbors[0] = vec![1, 2, 3, 4];
            let mut after = before.clone();
            for (k, p) in pairs.iter().enumerate() {
                if eb[k] { before.edges.insert(*p); }
                if ea[k] { after.edges.insert(*p); }
            }
            let r = structural_reward(&before, &after, 0).unwrap();
            let expect = edit_path_length(5, &before.edges, &after.edges) as f64 / 4.0;
            prop_assert_eq!(r, expect);
            prop_assert!(r >= 0.0);
            prop_assert_eq!(r == 0.0, before.edges == after.edges);
            prop_assert!(total_org_reward(1.0, r, -0.1) <= 1.0);
        }
    }
}
