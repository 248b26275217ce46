//! Multi-class user-equilibrium and system-optimal traffic assignment via
//! Frank-Wolfe: BPR costs on the PCE-weighted total flow, per-class
//! all-or-nothing shortest-path directions, and bisection line search.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::net::{ClassFlows, Link, OdMatrix, RoadNetwork, VehicleClass};

#[derive(Debug, Error)]
pub enum SolveError {
    #[error("class {class}: no path for od pair ({origin}, {dest})")]
    Unreachable { class: usize, origin: usize, dest: usize },
    #[error("non-finite link cost encountered at iteration {0}")]
    NonFiniteCost(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Objective {
    Ue,
    So,
}

impl std::fmt::Display for Objective {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Objective::Ue => write!(f, "ue"),
            Objective::So => write!(f, "so"),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SolveConfig {
    pub objective: Objective,
    /// Convergence threshold on ||v_k - v_{k-1}||_2 / sum(v_k).
    pub threshold: f64,
    pub max_iterations: usize,
    /// Interval tolerance of the line-search bisection.
    pub line_search_tol: f64,
}

impl Default for SolveConfig {
    fn default() -> Self {
        Self { objective: Objective::Ue, threshold: 1e-5, max_iterations: 50_000, line_search_tol: 1e-8 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SolveReport {
    pub flows: ClassFlows,
    pub iterations: usize,
    pub converged: bool,
    /// ||v_k - v_{k-1}||_2 / sum(v_k), per iteration from the second on.
    pub convergence_trace: Vec<f64>,
    pub gap_trace: Vec<f64>,
    /// Beckmann value for UE runs, total system travel time for SO runs.
    pub objective_trace: Vec<f64>,
}

/// BPR travel time: t0 * (1 + alpha * (v / cap)^beta).
pub fn bpr_time(link: &Link, effective_flow: f64) -> f64 {
    link.free_flow_time * (1.0 + link.bpr_alpha * (effective_flow / link.capacity).powf(link.bpr_beta))
}

/// Integral of `bpr_time` from 0 to v:
/// t0 * (v + alpha * v^(beta+1) / ((beta+1) * cap^beta)).
pub fn beckmann_term(link: &Link, effective_flow: f64) -> f64 {
    let b = link.bpr_beta;
    link.free_flow_time
        * (effective_flow
            + link.bpr_alpha * effective_flow.powf(b + 1.0) / ((b + 1.0) * link.capacity.powf(b)))
}

/// Marginal link cost t(v) + v t'(v) = t0 * (1 + alpha * (beta+1) * (v/cap)^beta).
pub fn marginal_cost(link: &Link, effective_flow: f64) -> f64 {
    link.free_flow_time
        * (1.0 + link.bpr_alpha * (link.bpr_beta + 1.0) * (effective_flow / link.capacity).powf(link.bpr_beta))
}

fn link_costs(net: &RoadNetwork, v: &[f64], objective: Objective) -> Vec<f64> {
    net.links
        .iter()
        .zip(v)
        .map(|(l, &x)| match objective {
            Objective::Ue => bpr_time(l, x),
            Objective::So => marginal_cost(l, x),
        })
        .collect()
}

/// Beckmann objective over PCE-weighted flows.
pub fn beckmann_objective(net: &RoadNetwork, v: &[f64]) -> f64 {
    net.links.iter().zip(v).map(|(l, &x)| beckmann_term(l, x)).sum()
}

/// Total system travel time sum_e v_e * t_e(v_e).
pub fn total_travel_time(net: &RoadNetwork, v: &[f64]) -> f64 {
    net.links.iter().zip(v).map(|(l, &x)| x * bpr_time(l, x)).sum()
}

/// Adjacency restricted to one class's edge mask.
pub struct ClassAdjacency {
    /// per node: (head node, link index)
    pub out: Vec<Vec<(usize, usize)>>,
}

impl ClassAdjacency {
    pub fn build(net: &RoadNetwork, class: &VehicleClass) -> Self {
        let mut out = vec![Vec::new(); net.num_nodes()];
        for (i, l) in net.links.iter().enumerate() {
            if class.accessible(i) {
                out[l.tail].push((l.head, i));
            }
        }
        Self { out }
    }
}

#[derive(PartialEq)]
struct HeapItem {
    dist: f64,
    node: usize,
}

impl Eq for HeapItem {}
impl Ord for HeapItem {
    fn cmp(&self, other: &Self) -> Ordering {
        // min-heap on dist
        other.dist.partial_cmp(&self.dist).unwrap_or(Ordering::Equal)
    }
}
impl PartialOrd for HeapItem {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

pub struct ShortestPathTree {
    pub dist: Vec<f64>,
    /// Predecessor (node, link index); usize::MAX sentinels at the origin
    /// and unreachable nodes.
    pub pred: Vec<(usize, usize)>,
}

/// Dijkstra from `origin` over the class adjacency with the given per-link
/// costs. Unreachable nodes keep dist = +inf.
pub fn shortest_path_tree(adj: &ClassAdjacency, costs: &[f64], origin: usize) -> ShortestPathTree {
    let n = adj.out.len();
    let mut dist = vec![f64::INFINITY; n];
    let mut pred = vec![(usize::MAX, usize::MAX); n];
    let mut done = vec![false; n];
    let mut heap = BinaryHeap::new();
    dist[origin] = 0.0;
    heap.push(HeapItem { dist: 0.0, node: origin });
    while let Some(HeapItem { dist: d, node: u }) = heap.pop() {
        if done[u] {
            continue;
        }
        done[u] = true;
        for &(v, e) in &adj.out[u] {
            let nd = d + costs[e];
            if nd < dist[v] {
                dist[v] = nd;
                pred[v] = (u, e);
                heap.push(HeapItem { dist: nd, node: v });
            }
        }
    }
    ShortestPathTree { dist, pred }
}

/// Loads each class's entire demand on its current shortest paths.
pub fn all_or_nothing(
    net: &RoadNetwork,
    adjacency: &[ClassAdjacency],
    costs: &[f64],
    od: &OdMatrix,
) -> Result<ClassFlows, SolveError> {
    let mut flows = ClassFlows::zeros(od.num_classes(), net.num_links());
    for (c, demands) in od.demands.iter().enumerate() {
        let mut origins: Vec<usize> = demands.keys().map(|&(r, _)| r).collect();
        origins.sort_unstable();
        origins.dedup();
        for r in origins {
            let tree = shortest_path_tree(&adjacency[c], costs, r);
            for (&(o, s), &q) in demands.iter().filter(|(&(o, _), _)| o == r) {
                if q <= 0.0 {
                    continue;
                }
                if !tree.dist[s].is_finite() {
                    return Err(SolveError::Unreachable { class: c, origin: o, dest: s });
                }
                let mut node = s;
                while node != r {
                    let (p, e) = tree.pred[node];
                    flows.flows[c][e] += q;
                    node = p;
                }
            }
        }
    }
    Ok(flows)
}

/// Exact line search along the segment from `current` to `target`:
/// bisection on the directional derivative of the convex objective.
pub fn line_search(
    net: &RoadNetwork,
    classes: &[VehicleClass],
    current: &ClassFlows,
    target: &ClassFlows,
    objective: Objective,
    tol: f64,
) -> f64 {
    let v0 = current.effective(classes);
    let v1 = target.effective(classes);
    let dir: Vec<f64> = v1.iter().zip(&v0).map(|(a, b)| a - b).collect();
    if dir.iter().all(|&d| d == 0.0) {
        return 0.0;
    }
    let deriv = |lam: f64| -> f64 {
        let mut g = 0.0;
        for (e, l) in net.links.iter().enumerate() {
            let v = v0[e] + lam * dir[e];
            let c = match objective {
                Objective::Ue => bpr_time(l, v),
                Objective::So => marginal_cost(l, v),
            };
            g += c * dir[e];
        }
        g
    };
    if deriv(0.0) >= 0.0 {
        return 0.0;
    }
    if deriv(1.0) <= 0.0 {
        return 1.0;
    }
    let (mut lo, mut hi) = (0.0_f64, 1.0_f64);
    for _ in 0..60 {
        if hi - lo <= tol {
            break;
        }
        let mid = 0.5 * (lo + hi);
        if deriv(mid) < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// UE optimality certificate: (sum_e v_e t_e - sum_c pce_c sum_rs q * sp) / sum_e v_e t_e.
pub fn relative_gap(net: &RoadNetwork, classes: &[VehicleClass], flows: &ClassFlows, od: &OdMatrix) -> f64 {
    let v = flows.effective(classes);
    let costs = link_costs(net, &v, Objective::Ue);
    relative_gap_at_costs(net, classes, flows, od, &costs)
}

fn relative_gap_at_costs(
    net: &RoadNetwork,
    classes: &[VehicleClass],
    flows: &ClassFlows,
    od: &OdMatrix,
    costs: &[f64],
) -> f64 {
    let mut total = 0.0;
    for (c, class) in classes.iter().enumerate() {
        for (e, &f) in flows.flows[c].iter().enumerate() {
            total += class.pce * f * costs[e];
        }
    }
    if total <= 0.0 {
        return 0.0;
    }
    let mut bound = 0.0;
    for (c, class) in classes.iter().enumerate() {
        let adj = ClassAdjacency::build(net, class);
        let mut origins: Vec<usize> = od.demands[c].keys().map(|&(r, _)| r).collect();
        origins.sort_unstable();
        origins.dedup();
        for r in origins {
            let tree = shortest_path_tree(&adj, costs, r);
            for (&(_, s), &q) in od.demands[c].iter().filter(|(&(o, _), _)| o == r) {
                if tree.dist[s].is_finite() {
                    bound += class.pce * q * tree.dist[s];
                }
            }
        }
    }
    (total - bound) / total
}

/// Frank-Wolfe driver for UE or SO assignment.
pub fn solve(
    net: &RoadNetwork,
    classes: &[VehicleClass],
    od: &OdMatrix,
    config: &SolveConfig,
) -> Result<SolveReport, SolveError> {
    let adjacency: Vec<ClassAdjacency> =
        classes.iter().map(|c| ClassAdjacency::build(net, c)).collect();

    let objective_value = |v: &[f64]| match config.objective {
        Objective::Ue => beckmann_objective(net, v),
        Objective::So => total_travel_time(net, v),
    };

    // initial solution: AON at free-flow costs
    let zero = vec![0.0; net.num_links()];
    let costs = link_costs(net, &zero, config.objective);
    let mut flows = all_or_nothing(net, &adjacency, &costs, od)?;
    let mut v = flows.effective(classes);

    let mut convergence_trace = Vec::new();
    let mut gap_trace = Vec::new();
    let mut objective_trace = vec![objective_value(&v)];
    let mut converged = od.total() == 0.0;
    let mut iterations = 0;

    for iter in 1..=config.max_iterations {
        if converged {
            break;
        }
        iterations = iter;
        let costs = link_costs(net, &v, config.objective);
        if costs.iter().any(|c| !c.is_finite()) {
            return Err(SolveError::NonFiniteCost(iter));
        }
        let target = all_or_nothing(net, &adjacency, &costs, od)?;
        gap_trace.push(relative_gap_at_costs(net, classes, &flows, od, &costs));

        let lam = line_search(net, classes, &flows, &target, config.objective, config.line_search_tol);
        for (c, f) in flows.flows.iter_mut().enumerate() {
            for (e, x) in f.iter_mut().enumerate() {
                *x += lam * (target.flows[c][e] - *x);
            }
        }
        let v_new = flows.effective(classes);
        let total: f64 = v_new.iter().sum();
        let delta: f64 = v_new.iter().zip(&v).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        let metric = if total > 0.0 { delta / total } else { 0.0 };
        convergence_trace.push(metric);
        objective_trace.push(objective_value(&v_new));
        v = v_new;
        if metric < config.threshold {
            converged = true;
        }
    }

    Ok(SolveReport { flows, iterations, converged, convergence_trace, gap_trace, objective_trace })
}

pub mod oracle {
    //! Path-enumeration equilibrium oracle, independent of the Frank-Wolfe
    //! path: pairwise flow equalization on enumerated simple paths.

    use super::*;

    #[derive(Debug, Error)]
    pub enum OracleError {
        #[error("od pair ({origin}, {dest}) exceeds {max} simple paths")]
        PathBound { origin: usize, dest: usize, max: usize },
        #[error("no path for od pair ({origin}, {dest})")]
        NoPath { origin: usize, dest: usize },
    }

    /// All simple paths r -> s within the class mask, as link-index lists.
    pub fn enumerate_paths(
        net: &RoadNetwork,
        class: &VehicleClass,
        origin: usize,
        dest: usize,
        max_paths: usize,
    ) -> Result<Vec<Vec<usize>>, OracleError> {
        let adj = ClassAdjacency::build(net, class);
        let mut paths = Vec::new();
        let mut stack = vec![origin];
        let mut edges: Vec<usize> = Vec::new();
        let mut on_path = vec![false; net.num_nodes()];
        on_path[origin] = true;

        fn dfs(
            u: usize,
            dest: usize,
            adj: &ClassAdjacency,
            on_path: &mut Vec<bool>,
            stack: &mut Vec<usize>,
            edges: &mut Vec<usize>,
            paths: &mut Vec<Vec<usize>>,
            max_paths: usize,
        ) -> bool {
            if u == dest {
                paths.push(edges.clone());
                return paths.len() <= max_paths;
            }
            for &(v, e) in &adj.out[u] {
                if on_path[v] {
                    continue;
                }
                on_path[v] = true;
                stack.push(v);
                edges.push(e);
                let ok = dfs(v, dest, adj, on_path, stack, edges, paths, max_paths);
                edges.pop();
                stack.pop();
                on_path[v] = false;
                if !ok {
                    return false;
                }
            }
            true
        }

        if !dfs(origin, dest, &adj, &mut on_path, &mut stack, &mut edges, &mut paths, max_paths) {
            return Err(OracleError::PathBound { origin, dest, max: max_paths });
        }
        if paths.is_empty() {
            return Err(OracleError::NoPath { origin, dest });
        }
        Ok(paths)
    }

    struct OdPaths {
        class: usize,
        demand: f64,
        /// per path: link indices
        paths: Vec<Vec<usize>>,
        /// per path: current flow
        flows: Vec<f64>,
    }

    /// Wardrop equilibrium by repeated pairwise equalization between the
    /// costliest used path and the cheapest path of every OD pair.
    pub fn brute_force_ue(
        net: &RoadNetwork,
        classes: &[VehicleClass],
        od: &OdMatrix,
        max_paths: usize,
    ) -> Result<ClassFlows, OracleError> {
        let mut groups: Vec<OdPaths> = Vec::new();
        for (c, demands) in od.demands.iter().enumerate() {
            for (&(r, s), &q) in demands {
                if q <= 0.0 {
                    continue;
                }
                let paths = enumerate_paths(net, &classes[c], r, s, max_paths)?;
                let mut flows = vec![0.0; paths.len()];
                flows[0] = q;
                groups.push(OdPaths { class: c, demand: q, paths, flows });
            }
        }

        let num_links = net.num_links();
        let link_flow = |groups: &[OdPaths]| -> Vec<f64> {
            let mut v = vec![0.0; num_links];
            for g in groups {
                let pce = classes[g.class].pce;
                for (p, &h) in g.paths.iter().zip(&g.flows) {
                    for &e in p {
                        v[e] += pce * h;
                    }
                }
            }
            v
        };

        for _sweep in 0..200_000 {
            let mut worst = 0.0_f64;
            for gi in 0..groups.len() {
                let v = link_flow(&groups);
                let times: Vec<f64> = groups[gi]
                    .paths
                    .iter()
                    .map(|p| p.iter().map(|&e| bpr_time(&net.links[e], v[e])).sum())
                    .collect();
                let min_i = (0..times.len())
                    .min_by(|&a, &b| times[a].partial_cmp(&times[b]).unwrap())
                    .unwrap();
                let max_i = (0..times.len())
                    .filter(|&k| groups[gi].flows[k] > 1e-12 * groups[gi].demand)
                    .max_by(|&a, &b| times[a].partial_cmp(&times[b]).unwrap())
                    .unwrap();
                if max_i == min_i {
                    continue;
                }
                let spread = (times[max_i] - times[min_i]) / times[min_i].max(1e-12);
                worst = worst.max(spread);
                if spread <= 1e-10 {
                    continue;
                }
                // move delta from max_i to min_i; cost difference is monotone in delta
                let pce = classes[groups[gi].class].pce;
                let cap = groups[gi].flows[max_i];
                let diff_at = |delta: f64| -> f64 {
                    let mut t_max = 0.0;
                    let mut t_min = 0.0;
                    for &e in &groups[gi].paths[max_i] {
                        let shared = groups[gi].paths[min_i].contains(&e);
                        let dv = if shared { 0.0 } else { -pce * delta };
                        t_max += bpr_time(&net.links[e], v[e] + dv);
                    }
                    for &e in &groups[gi].paths[min_i] {
                        let shared = groups[gi].paths[max_i].contains(&e);
                        let dv = if shared { 0.0 } else { pce * delta };
                        t_min += bpr_time(&net.links[e], v[e] + dv);
                    }
                    t_max - t_min
                };
                let delta = if diff_at(cap) > 0.0 {
                    cap
                } else {
                    let (mut lo, mut hi) = (0.0, cap);
                    for _ in 0..100 {
                        let mid = 0.5 * (lo + hi);
                        if diff_at(mid) > 0.0 {
                            lo = mid;
                        } else {
                            hi = mid;
                        }
                    }
                    0.5 * (lo + hi)
                };
                groups[gi].flows[max_i] -= delta;
                groups[gi].flows[min_i] += delta;
            }
            if worst <= 1e-9 {
                break;
            }
        }

        let mut out = ClassFlows::zeros(classes.len(), num_links);
        for g in &groups {
            for (p, &h) in g.paths.iter().zip(&g.flows) {
                for &e in p {
                    out.flows[g.class][e] += h;
                }
            }
        }
        Ok(out)
    }

    /// Worst relative Wardrop violation across OD pairs: spread between the
    /// costliest used path and the cheapest path. A path counts as used when
    /// every one of its links carries at least `min_flow` class flow (a
    /// sound proxy on small enumeration-friendly instances).
    pub fn wardrop_violation(
        net: &RoadNetwork,
        classes: &[VehicleClass],
        od: &OdMatrix,
        flows: &ClassFlows,
        max_paths: usize,
        min_flow: f64,
    ) -> Result<f64, OracleError> {
        let v = flows.effective(classes);
        let mut worst = 0.0_f64;
        for (c, demands) in od.demands.iter().enumerate() {
            for (&(r, s), &q) in demands {
                if q <= 0.0 {
                    continue;
                }
                let paths = enumerate_paths(net, &classes[c], r, s, max_paths)?;
                let times: Vec<f64> = paths
                    .iter()
                    .map(|p| p.iter().map(|&e| bpr_time(&net.links[e], v[e])).sum())
                    .collect();
                let t_min = times.iter().cloned().fold(f64::INFINITY, f64::min);
                for (p, &t) in paths.iter().zip(&times) {
                    let used = p.iter().all(|&e| flows.flows[c][e] >= min_flow);
                    if used {
                        worst = worst.max((t - t_min) / t_min.max(1e-12));
                    }
                }
            }
        }
        Ok(worst)
    }
}
