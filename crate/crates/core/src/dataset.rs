//! Dataset files: line-delimited scenario records (`.jsonl`) plus a sidecar
//! manifest (`.manifest.json`) carrying the format version, a hash of the
//! base network, and normalization statistics computed on the training split.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::net::{OdMatrix, RoadNetwork};
use crate::solver::Objective;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("record {line}: {source}")]
    Malformed { line: usize, source: serde_json::Error },
    #[error("manifest: {0}")]
    Manifest(serde_json::Error),
    #[error("unsupported format version {found} (supported: {supported})")]
    Version { found: u32, supported: u32 },
    #[error("dataset was generated for a different base network (hash {found} vs {expected})")]
    NetworkHash { found: String, expected: String },
}

/// One solved scenario: the perturbation that produced it plus per-class
/// ground-truth labels. Link-indexed vectors (`flows`, `ratios`) follow the
/// scenario's link order, i.e. the base order with `removed_links` dropped;
/// `capacity_factors` is indexed by base link.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetRecord {
    pub index: usize,
    pub seed: u64,
    pub objective: Objective,
    pub removed_links: Vec<usize>,
    pub capacity_factors: Vec<f64>,
    /// Mean demand scale factor per class (full factors are reproducible
    /// from `seed`).
    pub demand_factor_mean: Vec<f64>,
    /// Per class: (origin, destination, scaled demand) triples, sorted.
    pub demand: Vec<Vec<(usize, usize, f64)>>,
    /// Per class, per scenario link: equilibrium flow in class-native units.
    pub flows: Vec<Vec<f64>>,
    /// Per class, per scenario link: pce-weighted flow-to-capacity ratio.
    pub ratios: Vec<Vec<f64>>,
    pub iterations: usize,
    pub relative_gap: f64,
}

impl DatasetRecord {
    pub fn num_classes(&self) -> usize {
        self.demand.len()
    }

    /// Scenario network: capacity factors applied to the base, removed
    /// links dropped.
    pub fn scenario_network(&self, base: &RoadNetwork) -> RoadNetwork {
        let mut scaled = base.clone();
        for (l, f) in scaled.links.iter_mut().zip(&self.capacity_factors) {
            l.capacity *= f;
        }
        scaled.without_links(&self.removed_links)
    }

    pub fn od_matrix(&self) -> OdMatrix {
        let demands = self
            .demand
            .iter()
            .map(|class| class.iter().map(|&(r, s, d)| ((r, s), d)).collect::<BTreeMap<_, _>>())
            .collect();
        OdMatrix { demands }
    }
}

pub fn od_to_triples(od: &OdMatrix) -> Vec<Vec<(usize, usize, f64)>> {
    od.demands
        .iter()
        .map(|class| class.iter().map(|(&(r, s), &d)| (r, s, d)).collect())
        .collect()
}

/// SHA-256 of the base network's canonical JSON form, hex-encoded.
pub fn network_hash(net: &RoadNetwork) -> String {
    let bytes = serde_json::to_vec(net).expect("network serializes");
    let digest = Sha256::digest(&bytes);
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

/// Sidecar metadata. Normalization statistics are computed on the training
/// split only and applied unchanged everywhere else.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub network_hash: String,
    pub num_records: usize,
    pub class_names: Vec<String>,
    pub class_pces: Vec<f64>,
    pub objective: Objective,
    /// Mean/std of the raw per-edge features (free-flow time, capacity)
    /// over all scenario links of the training records.
    pub edge_feature_mean: Vec<f64>,
    pub edge_feature_std: Vec<f64>,
    /// Scale divisor for the demand columns of node features.
    pub node_demand_scale: f64,
}

impl DatasetManifest {
    pub fn compute(
        base: &RoadNetwork,
        class_names: &[String],
        class_pces: &[f64],
        objective: Objective,
        records: &[DatasetRecord],
        train_indices: &[usize],
    ) -> Self {
        let mut sums = [0.0_f64; 2];
        let mut sq = [0.0_f64; 2];
        let mut n_edges = 0.0_f64;
        let mut demand_sum = 0.0_f64;
        let mut demand_n = 0.0_f64;
        for &i in train_indices {
            let rec = &records[i];
            let net = rec.scenario_network(base);
            for l in &net.links {
                let feats = [l.free_flow_time, l.capacity];
                for (k, f) in feats.iter().enumerate() {
                    sums[k] += f;
                    sq[k] += f * f;
                }
                n_edges += 1.0;
            }
            for class in &rec.demand {
                for &(_, _, d) in class {
                    demand_sum += d;
                    demand_n += 1.0;
                }
            }
        }
        let n = n_edges.max(1.0);
        let mean: Vec<f64> = sums.iter().map(|s| s / n).collect();
        let std: Vec<f64> = sq
            .iter()
            .zip(&mean)
            .map(|(s, m)| ((s / n - m * m).max(0.0)).sqrt().max(1e-12))
            .collect();
        Self {
            format_version: FORMAT_VERSION,
            network_hash: network_hash(base),
            num_records: records.len(),
            class_names: class_names.to_vec(),
            class_pces: class_pces.to_vec(),
            objective,
            edge_feature_mean: mean,
            edge_feature_std: std,
            node_demand_scale: if demand_n > 0.0 { (demand_sum / demand_n).max(1e-12) } else { 1.0 },
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, DatasetError> {
        let m: Self = serde_json::from_str(text).map_err(DatasetError::Manifest)?;
        if m.format_version != FORMAT_VERSION {
            return Err(DatasetError::Version { found: m.format_version, supported: FORMAT_VERSION });
        }
        Ok(m)
    }

    pub fn check_network(&self, base: &RoadNetwork) -> Result<(), DatasetError> {
        let found = network_hash(base);
        if found != self.network_hash {
            return Err(DatasetError::NetworkHash { found, expected: self.network_hash.clone() });
        }
        Ok(())
    }
}

/// One JSON object per line. serde_json prints floats in shortest
/// round-trip form, so numeric fields survive bit-exactly.
pub fn write_dataset(records: &[DatasetRecord]) -> String {
    let mut out = String::new();
    for rec in records {
        out.push_str(&serde_json::to_string(rec).expect("record serializes"));
        out.push('\n');
    }
    out
}

pub fn read_dataset(text: &str) -> Result<Vec<DatasetRecord>, DatasetError> {
    let mut records = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: DatasetRecord =
            serde_json::from_str(line).map_err(|source| DatasetError::Malformed { line: i + 1, source })?;
        records.push(rec);
    }
    Ok(records)
}
