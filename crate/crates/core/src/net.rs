//! Road network domain model, multi-view graph construction, and flow
//! conservation accounting.

use std::collections::{BTreeMap, VecDeque};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum NetError {
    #[error("link {tail}->{head}: {reason}")]
    BadLink { tail: usize, head: usize, reason: String },
    #[error("od pair ({origin}, {dest}) references unknown node")]
    UnknownOdNode { origin: usize, dest: usize },
    #[error("class {0} has an empty edge mask")]
    EmptyEdgeMask(String),
    #[error("{0}")]
    Invalid(String),
}

/// A node with its external id and plane coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Node {
    pub id: usize,
    pub x: f64,
    pub y: f64,
}

/// A directed link. `tail` and `head` are 0-based node indices.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Link {
    pub tail: usize,
    pub head: usize,
    pub free_flow_time: f64,
    pub capacity: f64,
    pub bpr_alpha: f64,
    pub bpr_beta: f64,
}

/// Immutable base graph. Links are kept sorted by (tail, head).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoadNetwork {
    pub nodes: Vec<Node>,
    pub links: Vec<Link>,
}

impl RoadNetwork {
    pub fn new(nodes: Vec<Node>, mut links: Vec<Link>) -> Result<Self, NetError> {
        if nodes.is_empty() {
            return Err(NetError::Invalid("network has no nodes".into()));
        }
        links.sort_by_key(|l| (l.tail, l.head));
        for pair in links.windows(2) {
            if pair[0].tail == pair[1].tail && pair[0].head == pair[1].head {
                return Err(NetError::BadLink {
                    tail: pair[0].tail,
                    head: pair[0].head,
                    reason: "duplicate (tail, head) pair".into(),
                });
            }
        }
        for l in &links {
            if l.tail == l.head {
                return Err(NetError::BadLink { tail: l.tail, head: l.head, reason: "self-loop".into() });
            }
            if l.tail >= nodes.len() || l.head >= nodes.len() {
                return Err(NetError::BadLink {
                    tail: l.tail,
                    head: l.head,
                    reason: "endpoint outside node set".into(),
                });
            }
            if !(l.capacity > 0.0) || !(l.free_flow_time > 0.0) {
                return Err(NetError::BadLink {
                    tail: l.tail,
                    head: l.head,
                    reason: "capacity and free-flow time must be positive".into(),
                });
            }
        }
        Ok(Self { nodes, links })
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn num_links(&self) -> usize {
        self.links.len()
    }

    /// Network with the given link indices removed (indices into `self.links`).
    pub fn without_links(&self, removed: &[usize]) -> Self {
        let links = self
            .links
            .iter()
            .enumerate()
            .filter(|(i, _)| !removed.contains(i))
            .map(|(_, l)| *l)
            .collect();
        Self { nodes: self.nodes.clone(), links }
    }

    /// Coordinates min-max normalized to [0, 1] per axis.
    pub fn normalized_coords(&self) -> Vec<(f64, f64)> {
        let (mut x_min, mut x_max) = (f64::INFINITY, f64::NEG_INFINITY);
        let (mut y_min, mut y_max) = (f64::INFINITY, f64::NEG_INFINITY);
        for n in &self.nodes {
            x_min = x_min.min(n.x);
            x_max = x_max.max(n.x);
            y_min = y_min.min(n.y);
            y_max = y_max.max(n.y);
        }
        let span = |lo: f64, hi: f64| if hi > lo { hi - lo } else { 1.0 };
        let (xs, ys) = (span(x_min, x_max), span(y_min, y_max));
        self.nodes.iter().map(|n| ((n.x - x_min) / xs, (n.y - y_min) / ys)).collect()
    }
}

/// A vehicle class with its passenger-car-equivalent factor and the set of
/// links it may use (indices into the network's link list).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VehicleClass {
    pub name: String,
    pub pce: f64,
    /// None means all links are accessible.
    pub edge_mask: Option<Vec<usize>>,
}

impl VehicleClass {
    pub fn new(name: impl Into<String>, pce: f64) -> Self {
        Self { name: name.into(), pce, edge_mask: None }
    }

    pub fn accessible(&self, link_idx: usize) -> bool {
        match &self.edge_mask {
            None => true,
            Some(m) => m.contains(&link_idx),
        }
    }

    pub fn mask_indices(&self, num_links: usize) -> Vec<usize> {
        match &self.edge_mask {
            None => (0..num_links).collect(),
            Some(m) => {
                let mut v = m.clone();
                v.sort_unstable();
                v.dedup();
                v
            }
        }
    }
}

/// Per-class OD demand in class-native vehicle units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OdMatrix {
    /// One map per class, keyed by (origin, destination) node indices.
    pub demands: Vec<BTreeMap<(usize, usize), f64>>,
}

impl OdMatrix {
    pub fn new(num_classes: usize) -> Self {
        Self { demands: vec![BTreeMap::new(); num_classes] }
    }

    pub fn set(&mut self, class: usize, origin: usize, dest: usize, demand: f64) {
        assert!(origin != dest, "od entry with origin == destination");
        assert!(demand >= 0.0, "negative demand");
        if demand > 0.0 {
            self.demands[class].insert((origin, dest), demand);
        }
    }

    pub fn demand(&self, class: usize, origin: usize, dest: usize) -> f64 {
        *self.demands[class].get(&(origin, dest)).unwrap_or(&0.0)
    }

    pub fn class_total(&self, class: usize) -> f64 {
        self.demands[class].values().sum()
    }

    pub fn total(&self) -> f64 {
        (0..self.demands.len()).map(|c| self.class_total(c)).sum()
    }

    pub fn num_classes(&self) -> usize {
        self.demands.len()
    }

    /// Validates all referenced nodes exist.
    pub fn check_nodes(&self, num_nodes: usize) -> Result<(), NetError> {
        for class in &self.demands {
            for &(r, s) in class.keys() {
                if r >= num_nodes || s >= num_nodes {
                    return Err(NetError::UnknownOdNode { origin: r, dest: s });
                }
            }
        }
        Ok(())
    }
}

/// Simple dense row-major f64 matrix used for feature blocks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl FeatureMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }
}

/// One vehicle class's view of the network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct View {
    /// Indices into the network's link list, sorted by (tail, head).
    pub real_links: Vec<usize>,
    /// (tail, head) endpoints of the real links, aligned with `real_links`.
    pub real_edges: Vec<(usize, usize)>,
    /// Directed origin -> destination pairs with positive demand.
    pub virtual_edges: Vec<(usize, usize)>,
    /// |V| x (|V|+2): demand row of the class OD matrix plus coordinates.
    pub node_features: FeatureMatrix,
    /// |real_edges| x 2: raw free-flow time and capacity.
    pub edge_features: FeatureMatrix,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultiViewGraph {
    pub num_nodes: usize,
    pub views: Vec<View>,
}

/// Builds the per-class views: masked real edges, virtual OD edges, and the
/// node/edge feature matrices.
pub fn build_views(
    net: &RoadNetwork,
    classes: &[VehicleClass],
    od: &OdMatrix,
) -> Result<MultiViewGraph, NetError> {
    let n = net.num_nodes();
    od.check_nodes(n)?;
    let coords = net.normalized_coords();
    let mut views = Vec::with_capacity(classes.len());
    for (c, class) in classes.iter().enumerate() {
        let real_links = class.mask_indices(net.num_links());
        if real_links.is_empty() {
            return Err(NetError::EmptyEdgeMask(class.name.clone()));
        }
        if let Some(&bad) = real_links.iter().find(|&&i| i >= net.num_links()) {
            return Err(NetError::Invalid(format!(
                "class {} edge mask references link index {bad} out of range",
                class.name
            )));
        }
        let real_edges: Vec<(usize, usize)> =
            real_links.iter().map(|&i| (net.links[i].tail, net.links[i].head)).collect();
        let virtual_edges: Vec<(usize, usize)> =
            od.demands[c].iter().filter(|(_, &d)| d > 0.0).map(|(&rs, _)| rs).collect();

        let mut node_features = FeatureMatrix::zeros(n, n + 2);
        for (&(r, s), &d) in &od.demands[c] {
            node_features.set(r, s, d);
        }
        for (u, &(x, y)) in coords.iter().enumerate() {
            node_features.set(u, n, x);
            node_features.set(u, n + 1, y);
        }
        let mut edge_features = FeatureMatrix::zeros(real_links.len(), 2);
        for (row, &i) in real_links.iter().enumerate() {
            edge_features.set(row, 0, net.links[i].free_flow_time);
            edge_features.set(row, 1, net.links[i].capacity);
        }
        views.push(View { real_links, real_edges, virtual_edges, node_features, edge_features });
    }
    Ok(MultiViewGraph { num_nodes: n, views })
}

/// Per-class per-link flows in class-native vehicle units, indexed by the
/// network's link list. Zero outside each class's edge mask.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassFlows {
    pub flows: Vec<Vec<f64>>,
}

impl ClassFlows {
    pub fn zeros(num_classes: usize, num_links: usize) -> Self {
        Self { flows: vec![vec![0.0; num_links]; num_classes] }
    }

    pub fn num_classes(&self) -> usize {
        self.flows.len()
    }

    /// PCE-weighted total flow per link: v_e = sum_c pce_c * f^c_e.
    pub fn effective(&self, classes: &[VehicleClass]) -> Vec<f64> {
        let num_links = self.flows[0].len();
        let mut v = vec![0.0; num_links];
        for (c, f) in self.flows.iter().enumerate() {
            for (e, &x) in f.iter().enumerate() {
                v[e] += classes[c].pce * x;
            }
        }
        v
    }

    /// Per-class flow-capacity ratios: pce_c * f^c_e / capacity_e.
    pub fn ratios(&self, net: &RoadNetwork, classes: &[VehicleClass]) -> Vec<Vec<f64>> {
        self.flows
            .iter()
            .enumerate()
            .map(|(c, f)| {
                f.iter()
                    .enumerate()
                    .map(|(e, &x)| classes[c].pce * x / net.links[e].capacity)
                    .collect()
            })
            .collect()
    }
}

/// Signed per-node conservation residual for one class:
/// inflow - outflow - (demand into node - demand out of node).
pub fn conservation_residual(
    net: &RoadNetwork,
    flows: &ClassFlows,
    od: &OdMatrix,
    class: usize,
) -> Vec<f64> {
    let mut residual = vec![0.0; net.num_nodes()];
    for (e, link) in net.links.iter().enumerate() {
        let f = flows.flows[class][e];
        residual[link.head] += f;
        residual[link.tail] -= f;
    }
    for (&(r, s), &d) in &od.demands[class] {
        // delta f_i = sum_v O_{v,i} - sum_v O_{i,v}
        residual[s] -= d;
        residual[r] += d;
    }
    residual
}

/// Every positive-demand OD pair of the class with no directed path inside
/// the class's edge mask.
pub fn check_od_connectivity(
    net: &RoadNetwork,
    class: &VehicleClass,
    od_demand: &BTreeMap<(usize, usize), f64>,
) -> Vec<(usize, usize)> {
    let n = net.num_nodes();
    let mut adj: Vec<Vec<usize>> = vec![Vec::new(); n];
    for (i, l) in net.links.iter().enumerate() {
        if class.accessible(i) {
            adj[l.tail].push(l.head);
        }
    }
    let mut origins: Vec<usize> = od_demand
        .iter()
        .filter(|(_, &d)| d > 0.0)
        .map(|(&(r, _), _)| r)
        .collect();
    origins.sort_unstable();
    origins.dedup();

    let mut unreachable = Vec::new();
    let mut seen = vec![false; n];
    for &r in &origins {
        seen.iter_mut().for_each(|s| *s = false);
        let mut queue = VecDeque::new();
        seen[r] = true;
        queue.push_back(r);
        while let Some(u) = queue.pop_front() {
            for &v in &adj[u] {
                if !seen[v] {
                    seen[v] = true;
                    queue.push_back(v);
                }
            }
        }
        for (&(o, s), &d) in od_demand {
            if o == r && d > 0.0 && !seen[s] {
                unreachable.push((r, s));
            }
        }
    }
    unreachable.sort_unstable();
    unreachable
}

#[cfg(test)]
pub mod tests {
    use super::*;

    pub fn line_network() -> RoadNetwork {
        // a -> b -> c
        RoadNetwork::new(
            vec![
                Node { id: 1, x: 0.0, y: 0.0 },
                Node { id: 2, x: 1.0, y: 0.0 },
                Node { id: 3, x: 2.0, y: 0.0 },
            ],
            vec![
                Link { tail: 0, head: 1, free_flow_time: 1.0, capacity: 100.0, bpr_alpha: 0.15, bpr_beta: 4.0 },
                Link { tail: 1, head: 2, free_flow_time: 1.0, capacity: 100.0, bpr_alpha: 0.15, bpr_beta: 4.0 },
            ],
        )
        .unwrap()
    }

    #[test]
    fn rejects_self_loop_and_duplicates() {
        let nodes = vec![Node { id: 1, x: 0.0, y: 0.0 }, Node { id: 2, x: 1.0, y: 0.0 }];
        let l = Link { tail: 0, head: 0, free_flow_time: 1.0, capacity: 1.0, bpr_alpha: 0.15, bpr_beta: 4.0 };
        assert!(RoadNetwork::new(nodes.clone(), vec![l]).is_err());
        let l2 = Link { tail: 0, head: 1, ..l };
        assert!(RoadNetwork::new(nodes, vec![l2, l2]).is_err());
    }

    #[test]
    fn build_views_line_network_virtual_edges() {
        let net = line_network();
        let classes = vec![VehicleClass::new("car", 1.0), VehicleClass::new("truck", 1.9)];
        let mut od = OdMatrix::new(2);
        od.set(0, 0, 2, 10.0);
        let mv = build_views(&net, &classes, &od).unwrap();
        assert_eq!(mv.views[0].virtual_edges, vec![(0, 2)]);
        assert!(mv.views[1].virtual_edges.is_empty());
        assert_eq!(mv.views[0].node_features.cols, 5);
        assert_eq!(mv.views[0].node_features.get(0, 2), 10.0);
    }

    #[test]
    fn build_views_zero_demand_has_no_virtual_edges() {
        let net = line_network();
        let classes = vec![VehicleClass::new("car", 1.0)];
        let od = OdMatrix::new(1);
        let mv = build_views(&net, &classes, &od).unwrap();
        assert!(mv.views[0].virtual_edges.is_empty());
    }

    #[test]
    fn build_views_rejects_unknown_node_and_empty_mask() {
        let net = line_network();
        let classes = vec![VehicleClass::new("car", 1.0)];
        let mut od = OdMatrix::new(1);
        od.set(0, 0, 7, 1.0);
        assert!(matches!(
            build_views(&net, &classes, &od),
            Err(NetError::UnknownOdNode { origin: 0, dest: 7 })
        ));

        let mut masked = VehicleClass::new("truck", 1.9);
        masked.edge_mask = Some(vec![]);
        let od = OdMatrix::new(1);
        assert!(matches!(
            build_views(&net, &[masked], &od),
            Err(NetError::EmptyEdgeMask(_))
        ));
    }

    #[test]
    fn build_views_is_deterministic() {
        let net = line_network();
        let classes = vec![VehicleClass::new("car", 1.0)];
        let mut od = OdMatrix::new(1);
        od.set(0, 0, 2, 3.0);
        od.set(0, 1, 2, 4.0);
        let a = build_views(&net, &classes, &od).unwrap();
        let b = build_views(&net, &classes, &od).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn residual_single_link_exact_and_excess() {
        let nodes = vec![Node { id: 1, x: 0.0, y: 0.0 }, Node { id: 2, x: 1.0, y: 0.0 }];
        let links = vec![Link {
            tail: 0, head: 1, free_flow_time: 1.0, capacity: 10.0, bpr_alpha: 0.15, bpr_beta: 4.0,
        }];
        let net = RoadNetwork::new(nodes, links).unwrap();
        let mut od = OdMatrix::new(1);
        od.set(0, 0, 1, 10.0);

        let mut flows = ClassFlows::zeros(1, 1);
        flows.flows[0][0] = 10.0;
        assert_eq!(conservation_residual(&net, &flows, &od, 0), vec![0.0, 0.0]);

        flows.flows[0][0] = 12.0;
        assert_eq!(conservation_residual(&net, &flows, &od, 0), vec![-2.0, 2.0]);
    }

    #[test]
    fn residual_sums_to_zero() {
        let net = line_network();
        let mut od = OdMatrix::new(1);
        od.set(0, 0, 2, 5.0);
        od.set(0, 1, 2, 2.0);
        let mut flows = ClassFlows::zeros(1, 2);
        flows.flows[0][0] = 3.0;
        flows.flows[0][1] = 9.0;
        let r = conservation_residual(&net, &flows, &od, 0);
        assert!(r.iter().sum::<f64>().abs() < 1e-12);
    }

    #[test]
    fn connectivity_reports_unreachable_pairs() {
        let net = line_network();
        let class = VehicleClass::new("car", 1.0);
        let mut od = OdMatrix::new(1);
        od.set(0, 0, 2, 1.0);
        assert!(check_od_connectivity(&net, &class, &od.demands[0]).is_empty());

        // reverse direction has no path
        let mut od_rev = OdMatrix::new(1);
        od_rev.set(0, 2, 0, 1.0);
        assert_eq!(check_od_connectivity(&net, &class, &od_rev.demands[0]), vec![(2, 0)]);

        // masking out the bridge link 1->2 cuts (0, 2)
        let mut masked = VehicleClass::new("car", 1.0);
        masked.edge_mask = Some(vec![0]);
        assert_eq!(check_od_connectivity(&net, &masked, &od.demands[0]), vec![(0, 2)]);
    }
}
