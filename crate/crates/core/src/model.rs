//! Multi-view graph attention model for link-flow surrogate prediction:
//! feature encoder, stacked attention layers (intra-view with adaptive
//! per-edge weights applied virtual-then-real, inter-view over concatenated
//! class embeddings), residual head fusion, and an edge-level ratio decoder.
//! Also houses the message-passing baselines that replace the attention
//! stack (gat / gcn / graphsage).

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::autodiff::{Matrix, SegmentMap, Tape, TensorId};
use crate::dataset::DatasetManifest;
use crate::net::{build_views, MultiViewGraph, OdMatrix, RoadNetwork, VehicleClass};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("feature width mismatch: expected {expected}, got {got}")]
    FeatureWidth { expected: usize, got: usize },
    #[error("od pair ({0}, {1}) has no adaptive weight slot (absent from the base demand)")]
    UnknownOdPair(usize, usize),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Net(#[from] crate::net::NetError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Full,
    /// Zero the edge features fed to the decoder.
    NoLinkFeat,
    /// Drop virtual (origin-destination) edges everywhere.
    NoOdLink,
    /// Skip the intra-view branch; fuse the inter-view branch only.
    NoIntraView,
    /// One attention head at the full hidden width.
    SingleHead,
    /// Architecture identical to full; the conservation loss weight is
    /// zeroed at training time.
    NoConservation,
}

impl std::str::FromStr for Variant {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "full" => Ok(Self::Full),
            "no_link_feat" => Ok(Self::NoLinkFeat),
            "no_od_link" => Ok(Self::NoOdLink),
            "no_intra_view" => Ok(Self::NoIntraView),
            "single_head" => Ok(Self::SingleHead),
            "no_conservation" => Ok(Self::NoConservation),
            other => Err(format!("unknown variant '{other}'")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Baseline {
    None,
    Gat,
    Gcn,
    Graphsage,
}

impl std::str::FromStr for Baseline {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "none" => Ok(Self::None),
            "gat" => Ok(Self::Gat),
            "gcn" => Ok(Self::Gcn),
            "graphsage" => Ok(Self::Graphsage),
            other => Err(format!("unknown baseline '{other}'")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub num_nodes: usize,
    pub num_classes: usize,
    /// Encoder output width before the projection to `hidden_dim`.
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub variant: Variant,
    pub baseline: Baseline,
}

impl ModelConfig {
    pub fn new(num_nodes: usize, num_classes: usize) -> Self {
        Self {
            num_nodes,
            num_classes,
            embed_dim: 32,
            hidden_dim: 64,
            layers: 4,
            heads: 8,
            variant: Variant::Full,
            baseline: Baseline::None,
        }
    }

    /// Effective head count (the single_head variant keeps total width).
    pub fn num_heads(&self) -> usize {
        if self.variant == Variant::SingleHead {
            1
        } else {
            self.heads
        }
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_dim / self.num_heads()
    }

    pub fn feature_width(&self) -> usize {
        self.num_nodes + 2
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.layers == 0 {
            return Err(ModelError::InvalidConfig("layers must be >= 1".into()));
        }
        if self.hidden_dim % self.num_heads() != 0 {
            return Err(ModelError::InvalidConfig(format!(
                "hidden dim {} not divisible by {} heads",
                self.hidden_dim,
                self.num_heads()
            )));
        }
        if self.num_classes == 0 || self.num_nodes == 0 {
            return Err(ModelError::InvalidConfig("empty node or class set".into()));
        }
        if self.baseline != Baseline::None && self.variant != Variant::Full {
            return Err(ModelError::InvalidConfig(format!(
                "baseline {:?} cannot be combined with variant {:?}",
                self.baseline, self.variant
            )));
        }
        Ok(())
    }
}

/// Per-layer attention parameters. Query/key/value projections are per
/// head; the fusion feed-forward and layer-norm affine are shared across
/// heads within the layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerParams {
    pub wq: Vec<Matrix>,
    pub wk: Vec<Matrix>,
    pub wv: Vec<Matrix>,
    pub wq_inter: Vec<Matrix>,
    pub wk_inter: Vec<Matrix>,
    pub wv_inter: Vec<Matrix>,
    pub w_z: Matrix,
    pub b_z: Matrix,
    pub w_zt: Matrix,
    pub b_zt: Matrix,
    pub ln_gain: Matrix,
    pub ln_bias: Matrix,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub config: ModelConfig,
    /// w0, b0, w1, b1, w2, b2 (three-layer encoder), proj_w, proj_b
    /// (projection from embed_dim to hidden_dim).
    pub encoder: Vec<Matrix>,
    pub attn_layers: Vec<LayerParams>,
    /// Per class: one adaptive scalar per base virtual edge, shared across
    /// layers and heads.
    pub alpha_virtual: Vec<Matrix>,
    /// Per class: one adaptive scalar per base link.
    pub beta_real: Vec<Matrix>,
    /// Per message-passing layer when a baseline is selected.
    pub baseline_layers: Vec<Vec<Matrix>>,
    /// Three dense ReLU layers after the baseline stack: (w, b) pairs.
    pub baseline_dense: Vec<Matrix>,
    /// w1, b1, w2, b2 of the edge decoder.
    pub decoder: Vec<Matrix>,
    /// Per class: base virtual edge (origin, destination) -> row in
    /// `alpha_virtual`. Serialized as pair lists (JSON maps need string keys).
    #[serde(with = "virtual_index_serde")]
    pub virtual_index: Vec<BTreeMap<(usize, usize), usize>>,
    pub num_base_links: usize,
}

impl ModelParams {
    /// Glorot-uniform dense weights, zero biases, unit adaptive scalars.
    /// The virtual edge set is fixed by the base demand pattern (demand
    /// perturbations are multiplicative and keep the support).
    pub fn init(
        config: &ModelConfig,
        base: &RoadNetwork,
        base_od: &OdMatrix,
        seed: u64,
    ) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let h = config.hidden_dim;
        let d = config.head_dim();
        let e = config.embed_dim;
        let fw = config.feature_width();
        let c = config.num_classes;

        let encoder = vec![
            Matrix::glorot(fw, e, &mut rng),
            Matrix::zeros(1, e),
            Matrix::glorot(e, e, &mut rng),
            Matrix::zeros(1, e),
            Matrix::glorot(e, e, &mut rng),
            Matrix::zeros(1, e),
            Matrix::glorot(e, h, &mut rng),
            Matrix::zeros(1, h),
        ];

        let mut attn_layers = Vec::new();
        let mut baseline_layers = Vec::new();
        let mut baseline_dense = Vec::new();
        if config.baseline == Baseline::None {
            for _ in 0..config.layers {
                let heads = config.num_heads();
                let per_head = |rng: &mut ChaCha8Rng, rows: usize| -> Vec<Matrix> {
                    (0..heads).map(|_| Matrix::glorot(rows, d, rng)).collect()
                };
                attn_layers.push(LayerParams {
                    wq: per_head(&mut rng, h),
                    wk: per_head(&mut rng, h),
                    wv: per_head(&mut rng, h),
                    wq_inter: per_head(&mut rng, c * h),
                    wk_inter: per_head(&mut rng, c * h),
                    wv_inter: per_head(&mut rng, c * h),
                    w_z: Matrix::glorot(d, d, &mut rng),
                    b_z: Matrix::zeros(1, d),
                    w_zt: Matrix::glorot(d, d, &mut rng),
                    b_zt: Matrix::zeros(1, d),
                    ln_gain: Matrix::filled(1, d, 1.0),
                    ln_bias: Matrix::zeros(1, d),
                });
            }
        } else {
            for _ in 0..config.layers {
                baseline_layers.push(match config.baseline {
                    Baseline::Gat => vec![Matrix::glorot(h, h, &mut rng), Matrix::glorot(2 * h, 1, &mut rng)],
                    Baseline::Gcn => vec![Matrix::glorot(h, h, &mut rng), Matrix::zeros(1, h)],
                    Baseline::Graphsage => vec![Matrix::glorot(2 * h, h, &mut rng), Matrix::zeros(1, h)],
                    Baseline::None => unreachable!(),
                });
            }
            for _ in 0..3 {
                baseline_dense.push(Matrix::glorot(h, h, &mut rng));
                baseline_dense.push(Matrix::zeros(1, h));
            }
        }

        let mut alpha_virtual = Vec::new();
        let mut beta_real = Vec::new();
        let mut virtual_index = Vec::new();
        if config.baseline == Baseline::None {
            for class in 0..c {
                let mut index = BTreeMap::new();
                for (&pair, &dem) in &base_od.demands[class] {
                    if dem > 0.0 {
                        let next = index.len();
                        index.insert(pair, next);
                    }
                }
                alpha_virtual.push(Matrix::filled(index.len().max(1), 1, 1.0));
                beta_real.push(Matrix::filled(base.num_links(), 1, 1.0));
                virtual_index.push(index);
            }
        } else {
            virtual_index = vec![BTreeMap::new(); c];
        }

        // The output layer starts at zero so untrained predictions sit at
        // the origin instead of inheriting the (layer-stacked) embedding
        // scale; the first optimizer step makes it trainable.
        let decoder = vec![
            Matrix::glorot(2 * h + 2, h, &mut rng),
            Matrix::zeros(1, h),
            Matrix::zeros(h, 1),
            Matrix::zeros(1, 1),
        ];

        Ok(Self {
            config: config.clone(),
            encoder,
            attn_layers,
            alpha_virtual,
            beta_real,
            baseline_layers,
            baseline_dense,
            decoder,
            virtual_index,
            num_base_links: base.num_links(),
        })
    }

    /// Visits every learnable tensor in a fixed, documented order:
    /// encoder, attention layers (q/k/v intra, q/k/v inter, fusion),
    /// adaptive scalars, baseline layers, baseline dense, decoder.
    pub fn for_each(&self, f: &mut impl FnMut(&Matrix)) {
        for m in &self.encoder {
            f(m);
        }
        for l in &self.attn_layers {
            for group in [&l.wq, &l.wk, &l.wv, &l.wq_inter, &l.wk_inter, &l.wv_inter] {
                for m in group {
                    f(m);
                }
            }
            for m in [&l.w_z, &l.b_z, &l.w_zt, &l.b_zt, &l.ln_gain, &l.ln_bias] {
                f(m);
            }
        }
        for m in self.alpha_virtual.iter().chain(&self.beta_real) {
            f(m);
        }
        for layer in &self.baseline_layers {
            for m in layer {
                f(m);
            }
        }
        for m in &self.baseline_dense {
            f(m);
        }
        for m in &self.decoder {
            f(m);
        }
    }

    pub fn for_each_mut(&mut self, f: &mut impl FnMut(&mut Matrix)) {
        for m in &mut self.encoder {
            f(m);
        }
        for l in &mut self.attn_layers {
            for group in [&mut l.wq, &mut l.wk, &mut l.wv, &mut l.wq_inter, &mut l.wk_inter, &mut l.wv_inter]
            {
                for m in group {
                    f(m);
                }
            }
            for m in [&mut l.w_z, &mut l.b_z, &mut l.w_zt, &mut l.b_zt, &mut l.ln_gain, &mut l.ln_bias] {
                f(m);
            }
        }
        for m in self.alpha_virtual.iter_mut().chain(self.beta_real.iter_mut()) {
            f(m);
        }
        for layer in &mut self.baseline_layers {
            for m in layer {
                f(m);
            }
        }
        for m in &mut self.baseline_dense {
            f(m);
        }
        for m in &mut self.decoder {
            f(m);
        }
    }

    /// Adds small uniform noise to every parameter. Gradient checks use
    /// this to leave the zero-output initialization (where most exact
    /// gradients vanish and a finite-difference comparison proves nothing).
    pub fn jitter(&mut self, scale: f64, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut flat = self.flatten();
        for m in &mut flat {
            for v in &mut m.data {
                *v += rng.gen_range(-scale..=scale);
            }
        }
        self.assign(&flat);
    }

    pub fn flatten(&self) -> Vec<Matrix> {
        let mut out = Vec::new();
        self.for_each(&mut |m| out.push(m.clone()));
        out
    }

    pub fn assign(&mut self, flat: &[Matrix]) {
        let mut i = 0;
        self.for_each_mut(&mut |m| {
            *m = flat[i].clone();
            i += 1;
        });
        assert_eq!(i, flat.len(), "parameter count mismatch");
    }

    pub fn num_tensors(&self) -> usize {
        let mut n = 0;
        self.for_each(&mut |_| n += 1);
        n
    }

    pub fn num_scalars(&self) -> usize {
        let mut n = 0;
        self.for_each(&mut |m| n += m.data.len());
        n
    }
}

mod virtual_index_serde {
    use super::BTreeMap;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    type Index = Vec<BTreeMap<(usize, usize), usize>>;

    pub fn serialize<S: Serializer>(v: &Index, s: S) -> Result<S::Ok, S::Error> {
        let flat: Vec<Vec<((usize, usize), usize)>> =
            v.iter().map(|m| m.iter().map(|(&k, &r)| (k, r)).collect()).collect();
        flat.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Index, D::Error> {
        let flat: Vec<Vec<((usize, usize), usize)>> = Vec::deserialize(d)?;
        Ok(flat.into_iter().map(|m| m.into_iter().collect()).collect())
    }
}

/// Normalization constants, fixed on the training split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureNorm {
    pub edge_mean: Vec<f64>,
    pub edge_std: Vec<f64>,
    pub demand_scale: f64,
}

impl FeatureNorm {
    pub fn identity() -> Self {
        Self { edge_mean: vec![0.0, 0.0], edge_std: vec![1.0, 1.0], demand_scale: 1.0 }
    }
}

impl From<&DatasetManifest> for FeatureNorm {
    fn from(m: &DatasetManifest) -> Self {
        Self {
            edge_mean: m.edge_feature_mean.clone(),
            edge_std: m.edge_feature_std.clone(),
            demand_scale: m.node_demand_scale,
        }
    }
}

/// One scenario, preprocessed for the model: per-class views plus the
/// index plumbing that ties scenario edges back to base-edge parameter rows.
#[derive(Debug, Clone)]
pub struct ModelInput {
    pub graph: MultiViewGraph,
    /// Per class: normalized node features, |V| x (|V|+2).
    pub node_features: Vec<Matrix>,
    /// Per class: normalized (free-flow time, capacity) per real edge.
    pub edge_features: Vec<Matrix>,
    /// Per class: base-link index of each real edge row.
    pub base_real_rows: Vec<Vec<usize>>,
    /// Per class: row into `alpha_virtual` for each virtual edge.
    pub virtual_rows: Vec<Vec<usize>>,
    /// Per class: capacity_e / pce_c per real edge (ratio -> flow factor).
    pub cap_over_pce: Vec<Matrix>,
}

/// `kept_base_links` maps scenario link index -> base link index (identity
/// when nothing was removed).
pub fn prepare_input(
    net: &RoadNetwork,
    od: &OdMatrix,
    classes: &[VehicleClass],
    kept_base_links: &[usize],
    params: &ModelParams,
    norm: &FeatureNorm,
) -> Result<ModelInput, ModelError> {
    let graph = build_views(net, classes, od)?;
    let n = graph.num_nodes;
    let mut node_features = Vec::new();
    let mut edge_features = Vec::new();
    let mut base_real_rows = Vec::new();
    let mut virtual_rows = Vec::new();
    let mut cap_over_pce = Vec::new();
    for (c, view) in graph.views.iter().enumerate() {
        let nf = &view.node_features;
        if nf.cols != n + 2 {
            return Err(ModelError::FeatureWidth { expected: n + 2, got: nf.cols });
        }
        let mut node = Matrix::from_vec(nf.rows, nf.cols, nf.data.clone());
        for r in 0..n {
            for s in 0..n {
                let v = node.get(r, s);
                if v != 0.0 {
                    node.set(r, s, v / norm.demand_scale);
                }
            }
        }
        node_features.push(node);

        let ef = &view.edge_features;
        let mut edge = Matrix::zeros(ef.rows, 2);
        for r in 0..ef.rows {
            for k in 0..2 {
                edge.set(r, k, (ef.get(r, k) - norm.edge_mean[k]) / norm.edge_std[k]);
            }
        }
        edge_features.push(edge);

        base_real_rows.push(view.real_links.iter().map(|&i| kept_base_links[i]).collect());
        if params.config.baseline == Baseline::None && params.config.variant != Variant::NoOdLink {
            let index = &params.virtual_index[c];
            let mut rows = Vec::with_capacity(view.virtual_edges.len());
            for &(r, s) in &view.virtual_edges {
                match index.get(&(r, s)) {
                    Some(&row) => rows.push(row),
                    None => return Err(ModelError::UnknownOdPair(r, s)),
                }
            }
            virtual_rows.push(rows);
        } else {
            virtual_rows.push(Vec::new());
        }

        let mut f = Matrix::zeros(view.real_links.len(), 1);
        for (row, &i) in view.real_links.iter().enumerate() {
            f.set(row, 0, net.links[i].capacity / classes[c].pce);
        }
        cap_over_pce.push(f);
    }
    Ok(ModelInput {
        graph,
        node_features,
        edge_features,
        base_real_rows,
        virtual_rows,
        cap_over_pce,
    })
}

/// Tape handles of all parameters, in `for_each` order, plus structured
/// access mirrors.
pub struct BoundParams {
    pub leaves: Vec<TensorId>,
    encoder: Vec<TensorId>,
    attn_layers: Vec<BoundLayer>,
    alpha_virtual: Vec<TensorId>,
    beta_real: Vec<TensorId>,
    baseline_layers: Vec<Vec<TensorId>>,
    baseline_dense: Vec<TensorId>,
    decoder: Vec<TensorId>,
}

struct BoundLayer {
    wq: Vec<TensorId>,
    wk: Vec<TensorId>,
    wv: Vec<TensorId>,
    wq_inter: Vec<TensorId>,
    wk_inter: Vec<TensorId>,
    wv_inter: Vec<TensorId>,
    w_z: TensorId,
    b_z: TensorId,
    w_zt: TensorId,
    b_zt: TensorId,
    ln_gain: TensorId,
    ln_bias: TensorId,
}

/// Creates tape leaves for every parameter and returns the structured view.
pub fn bind(params: &ModelParams, tape: &mut Tape) -> BoundParams {
    let mut leaves = Vec::new();
    params.for_each(&mut |m| leaves.push(tape.leaf(m)));
    bind_existing(params, &leaves)
}

/// Builds the structured view over already-created leaves (in `for_each`
/// order); used when another component owns leaf creation.
pub fn bind_existing(params: &ModelParams, leaves: &[TensorId]) -> BoundParams {
    let mut it = leaves.iter().copied();
    let mut take = |n: usize| -> Vec<TensorId> { (0..n).map(|_| it.next().unwrap()).collect() };

    let encoder = take(params.encoder.len());
    let heads = params.config.num_heads();
    let mut attn_layers = Vec::new();
    for _ in 0..params.attn_layers.len() {
        attn_layers.push(BoundLayer {
            wq: take(heads),
            wk: take(heads),
            wv: take(heads),
            wq_inter: take(heads),
            wk_inter: take(heads),
            wv_inter: take(heads),
            w_z: take(1)[0],
            b_z: take(1)[0],
            w_zt: take(1)[0],
            b_zt: take(1)[0],
            ln_gain: take(1)[0],
            ln_bias: take(1)[0],
        });
    }
    let alpha_virtual = take(params.alpha_virtual.len());
    let beta_real = take(params.beta_real.len());
    let baseline_layers: Vec<Vec<TensorId>> =
        params.baseline_layers.iter().map(|l| take(l.len())).collect();
    let baseline_dense = take(params.baseline_dense.len());
    let decoder = take(params.decoder.len());
    assert!(it.next().is_none(), "parameter count mismatch in bind");
    BoundParams {
        leaves: leaves.to_vec(),
        encoder,
        attn_layers,
        alpha_virtual,
        beta_real,
        baseline_layers,
        baseline_dense,
        decoder,
    }
}

fn affine(tape: &mut Tape, x: TensorId, w: TensorId, b: TensorId) -> TensorId {
    let xw = tape.matmul(x, w);
    tape.add_row_broadcast(xw, b)
}

/// Initial embeddings x^{c,0}: three dense layers at `embed_dim` with ReLU
/// on the first two, then a linear projection to `hidden_dim`.
pub fn encode(tape: &mut Tape, bound: &BoundParams, node_features: TensorId) -> TensorId {
    let e = &bound.encoder;
    let h1 = affine(tape, node_features, e[0], e[1]);
    let h1 = tape.relu(h1);
    let h2 = affine(tape, h1, e[2], e[3]);
    let h2 = tape.relu(h2);
    let h3 = affine(tape, h2, e[4], e[5]);
    affine(tape, h3, e[6], e[7])
}

/// One adaptive-attention aggregation stage: per edge (u, v),
/// w_e = exp(clamp(query_u . key_v / sqrt(d) * adaptive_e)), output_u =
/// weighted mean of value_v over u's outgoing edges, `fallback` where u has
/// none. Returns (aggregated embeddings [n x d], edge weights [E x 1]).
#[allow(clippy::too_many_arguments)]
pub fn attention_stage(
    tape: &mut Tape,
    query: TensorId,
    key: TensorId,
    value: TensorId,
    edges: &[(usize, usize)],
    adaptive: TensorId,
    map: &SegmentMap,
    fallback: TensorId,
) -> (TensorId, TensorId) {
    let d = tape.shape(query).1 as f64;
    if edges.is_empty() {
        // no edges at all: every segment empty, output is the fallback
        let zero_w = tape.leaf(&Matrix::zeros(0, 1));
        let empty_vals = tape.leaf(&Matrix::zeros(0, tape.shape(value).1));
        let out = tape.segment_weighted_mean(empty_vals, zero_w, fallback, map);
        return (out, zero_w);
    }
    let tails: Vec<usize> = edges.iter().map(|&(u, _)| u).collect();
    let heads: Vec<usize> = edges.iter().map(|&(_, v)| v).collect();
    let q_e = tape.row_gather(query, &tails);
    let k_e = tape.row_gather(key, &heads);
    let qk = tape.hadamard(q_e, k_e);
    let logits = tape.row_sum(qk);
    let logits = tape.scale(logits, 1.0 / d.sqrt());
    let logits = tape.hadamard(logits, adaptive);
    let weights = tape.exp(logits);
    let v_e = tape.row_gather(value, &heads);
    let out = tape.segment_weighted_mean(v_e, weights, fallback, map);
    (out, weights)
}

struct ClassEdges {
    real: Vec<(usize, usize)>,
    real_map: SegmentMap,
    virt: Vec<(usize, usize)>,
    virt_map: SegmentMap,
}

fn class_edges(input: &ModelInput, c: usize, drop_virtual: bool) -> ClassEdges {
    let n = input.graph.num_nodes;
    let view = &input.graph.views[c];
    let real = view.real_edges.clone();
    let real_tails: Vec<usize> = real.iter().map(|&(u, _)| u).collect();
    let virt = if drop_virtual { Vec::new() } else { view.virtual_edges.clone() };
    let virt_tails: Vec<usize> = virt.iter().map(|&(u, _)| u).collect();
    ClassEdges {
        real_map: SegmentMap::from_edge_keys(&real_tails, n),
        real,
        virt_map: SegmentMap::from_edge_keys(&virt_tails, n),
        virt,
    }
}

/// Virtual-then-real adaptive attention for one head over one class's edge
/// sets. `q`, `k`, `v` are the projected embeddings; the virtual stage
/// falls back to the node's value vector, the real stage to the
/// virtual-stage output.
#[allow(clippy::too_many_arguments)]
fn view_attention(
    tape: &mut Tape,
    q: TensorId,
    k: TensorId,
    v: TensorId,
    edges: &ClassEdges,
    alpha_gathered: TensorId,
    beta_gathered: TensorId,
) -> TensorId {
    let (r, _) = attention_stage(tape, q, k, v, &edges.virt, alpha_gathered, &edges.virt_map, v);
    let (z, _) = attention_stage(tape, r, k, v, &edges.real, beta_gathered, &edges.real_map, r);
    z
}

/// Column-selector constant for taking head `i`'s slice of a hidden-width
/// matrix via matmul.
fn head_selector(tape: &mut Tape, hidden: usize, d: usize, head: usize) -> TensorId {
    let sel = Matrix::from_fn(hidden, d, |r, c| if r == head * d + c { 1.0 } else { 0.0 });
    tape.leaf(&sel)
}

pub struct ForwardOutput {
    /// Per class: predicted flow-capacity ratios, one row per real edge.
    pub ratios: Vec<TensorId>,
    /// Per class: predicted flows in class-native units.
    pub flows: Vec<TensorId>,
}

/// Full forward pass: encode, `layers` rounds of intra+inter attention
/// with residual head fusion (or the configured baseline stack), then the
/// edge decoder.
pub fn forward(
    tape: &mut Tape,
    params: &ModelParams,
    bound: &BoundParams,
    input: &ModelInput,
) -> ForwardOutput {
    let cfg = &params.config;
    let c_count = cfg.num_classes;

    let mut x: Vec<TensorId> = Vec::with_capacity(c_count);
    for c in 0..c_count {
        let nf = tape.leaf(&input.node_features[c]);
        x.push(encode(tape, bound, nf));
    }

    if cfg.baseline != Baseline::None {
        x = baseline_stack(tape, params, bound, input, x);
    } else {
        let drop_virtual = cfg.variant == Variant::NoOdLink;
        let skip_intra = cfg.variant == Variant::NoIntraView;
        let heads = cfg.num_heads();
        let d = cfg.head_dim();
        let edges: Vec<ClassEdges> = (0..c_count).map(|c| class_edges(input, c, drop_virtual)).collect();
        let gathered: Vec<(TensorId, TensorId)> = (0..c_count)
            .map(|c| {
                let a = if edges[c].virt.is_empty() {
                    tape.leaf(&Matrix::zeros(0, 1))
                } else {
                    tape.row_gather(bound.alpha_virtual[c], &input.virtual_rows[c])
                };
                let b = tape.row_gather(bound.beta_real[c], &input.base_real_rows[c]);
                (a, b)
            })
            .collect();

        for layer in &bound.attn_layers {
            let concat = tape.concat_cols(&x);
            let mut next = vec![Vec::with_capacity(heads); c_count];
            for i in 0..heads {
                // intra-view: per-class q/k/v from the class embedding
                let mut z_heads = vec![None; c_count];
                if !skip_intra {
                    for c in 0..c_count {
                        let q = tape.matmul(x[c], layer.wq[i]);
                        let k = tape.matmul(x[c], layer.wk[i]);
                        let v = tape.matmul(x[c], layer.wv[i]);
                        z_heads[c] =
                            Some(view_attention(tape, q, k, v, &edges[c], gathered[c].0, gathered[c].1));
                    }
                }
                // inter-view: q/k/v from the C-way concatenation, shared
                // across classes, aggregated per class edge set
                let qt = tape.matmul(concat, layer.wq_inter[i]);
                let kt = tape.matmul(concat, layer.wk_inter[i]);
                let vt = tape.matmul(concat, layer.wv_inter[i]);
                for c in 0..c_count {
                    let zt = view_attention(tape, qt, kt, vt, &edges[c], gathered[c].0, gathered[c].1);
                    let ff_zt = affine(tape, zt, layer.w_zt, layer.b_zt);
                    let pre_norm = match z_heads[c] {
                        Some(z) => {
                            let ff_z = affine(tape, z, layer.w_z, layer.b_z);
                            tape.add(ff_z, ff_zt)
                        }
                        None => ff_zt,
                    };
                    let normed = tape.layer_norm(pre_norm);
                    let normed = tape.mul_row_broadcast(normed, layer.ln_gain);
                    let normed = tape.add_row_broadcast(normed, layer.ln_bias);
                    let sel = head_selector(tape, cfg.hidden_dim, d, i);
                    let x_head = tape.matmul(x[c], sel);
                    next[c].push(tape.add(x_head, normed));
                }
            }
            for c in 0..c_count {
                x[c] = tape.concat_cols(&next[c]);
            }
        }
    }

    decode_edges(tape, params, bound, input, &x)
}

/// Message-passing baselines: `layers` rounds of gat / gcn / graphsage over
/// each class's real edges, then three dense ReLU layers.
fn baseline_stack(
    tape: &mut Tape,
    params: &ModelParams,
    bound: &BoundParams,
    input: &ModelInput,
    mut x: Vec<TensorId>,
) -> Vec<TensorId> {
    let cfg = &params.config;
    let n = input.graph.num_nodes;
    for layer in &bound.baseline_layers {
        let mut next = Vec::with_capacity(x.len());
        for (c, &xc) in x.iter().enumerate() {
            let edges = &input.graph.views[c].real_edges;
            let tails: Vec<usize> = edges.iter().map(|&(u, _)| u).collect();
            let heads: Vec<usize> = edges.iter().map(|&(_, v)| v).collect();
            // messages flow tail -> head; aggregate at the head node
            let map = SegmentMap::from_edge_keys(&heads, n);
            let out = match cfg.baseline {
                Baseline::Gat => {
                    let h = tape.matmul(xc, layer[0]);
                    let h_t = tape.row_gather(h, &tails);
                    let h_h = tape.row_gather(h, &heads);
                    let pair = tape.concat_cols(&[h_h, h_t]);
                    let logit = tape.matmul(pair, layer[1]);
                    // leaky relu, slope 0.2
                    let pos = tape.relu(logit);
                    let negl = tape.scale(logit, -1.0);
                    let neg = tape.relu(negl);
                    let neg = tape.scale(neg, 0.2);
                    let leaky = tape.sub(pos, neg);
                    let w = tape.exp(leaky);
                    let agg = tape.segment_weighted_mean(h_t, w, h, &map);
                    tape.relu(agg)
                }
                Baseline::Gcn => {
                    // mean over incoming neighbors and self
                    let mut keys: Vec<usize> = heads.clone();
                    keys.extend(0..n);
                    let mut srcs: Vec<usize> = tails.clone();
                    srcs.extend(0..n);
                    let map = SegmentMap::from_edge_keys(&keys, n);
                    let vals = tape.row_gather(xc, &srcs);
                    let ones = tape.leaf(&Matrix::filled(srcs.len(), 1, 1.0));
                    let agg = tape.segment_weighted_mean(vals, ones, xc, &map);
                    let h = affine(tape, agg, layer[0], layer[1]);
                    tape.relu(h)
                }
                Baseline::Graphsage => {
                    let vals = tape.row_gather(xc, &tails);
                    let ones = tape.leaf(&Matrix::filled(tails.len(), 1, 1.0));
                    let neigh = tape.segment_weighted_mean(vals, ones, xc, &map);
                    let pair = tape.concat_cols(&[xc, neigh]);
                    let h = affine(tape, pair, layer[0], layer[1]);
                    tape.relu(h)
                }
                Baseline::None => unreachable!(),
            };
            next.push(out);
        }
        x = next;
    }
    for pair in bound.baseline_dense.chunks(2) {
        x = x
            .iter()
            .map(|&xc| {
                let h = affine(tape, xc, pair[0], pair[1]);
                tape.relu(h)
            })
            .collect();
    }
    x
}

/// Edge decoder: [h_u | h_v | y_e] through a two-layer feed-forward net
/// with identity output; flows are reconstructed as capacity * ratio / pce.
pub fn decode_edges(
    tape: &mut Tape,
    params: &ModelParams,
    bound: &BoundParams,
    input: &ModelInput,
    embeddings: &[TensorId],
) -> ForwardOutput {
    let mut ratios = Vec::with_capacity(embeddings.len());
    let mut flows = Vec::with_capacity(embeddings.len());
    for (c, &h) in embeddings.iter().enumerate() {
        let edges = &input.graph.views[c].real_edges;
        let tails: Vec<usize> = edges.iter().map(|&(u, _)| u).collect();
        let heads: Vec<usize> = edges.iter().map(|&(_, v)| v).collect();
        let h_u = tape.row_gather(h, &tails);
        let h_v = tape.row_gather(h, &heads);
        let y = if params.config.variant == Variant::NoLinkFeat {
            tape.leaf(&Matrix::zeros(edges.len(), 2))
        } else {
            tape.leaf(&input.edge_features[c])
        };
        let cat = tape.concat_cols(&[h_u, h_v, y]);
        let d1 = affine(tape, cat, bound.decoder[0], bound.decoder[1]);
        let d1 = tape.relu(d1);
        let ratio = affine(tape, d1, bound.decoder[2], bound.decoder[3]);
        let factor = tape.leaf(&input.cap_over_pce[c]);
        let flow = tape.hadamard(ratio, factor);
        ratios.push(ratio);
        flows.push(flow);
    }
    ForwardOutput { ratios, flows }
}

/// Runs the model without keeping the tape; returns per-class (ratios,
/// flows) with flows clamped at zero for reporting.
pub fn predict(
    params: &ModelParams,
    input: &ModelInput,
) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let mut tape = Tape::new();
    let bound = bind(params, &mut tape);
    let out = forward(&mut tape, params, &bound, input);
    let ratios: Vec<Vec<f64>> = out.ratios.iter().map(|&t| tape.values(t).to_vec()).collect();
    let flows: Vec<Vec<f64>> = out
        .flows
        .iter()
        .map(|&t| tape.values(t).iter().map(|&f| f.max(0.0)).collect())
        .collect();
    (ratios, flows)
}

/// Self-describing checkpoint: config header, parameters, and a content
/// hash over the parameter payload.
#[derive(Debug, Serialize, Deserialize)]
struct CheckpointFile {
    format_version: u32,
    config: ModelConfig,
    content_hash: String,
    params: ModelParams,
    norm: FeatureNorm,
}

pub const CHECKPOINT_VERSION: u32 = 1;

fn params_hash(params: &ModelParams) -> String {
    let bytes = serde_json::to_vec(params).expect("params serialize");
    Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn save_checkpoint(params: &ModelParams, norm: &FeatureNorm) -> String {
    let file = CheckpointFile {
        format_version: CHECKPOINT_VERSION,
        config: params.config.clone(),
        content_hash: params_hash(params),
        params: params.clone(),
        norm: norm.clone(),
    };
    serde_json::to_string(&file).expect("checkpoint serializes")
}

pub fn load_checkpoint(text: &str) -> Result<(ModelParams, FeatureNorm), ModelError> {
    let file: CheckpointFile =
        serde_json::from_str(text).map_err(|e| ModelError::Checkpoint(e.to_string()))?;
    if file.format_version != CHECKPOINT_VERSION {
        return Err(ModelError::Checkpoint(format!(
            "unsupported checkpoint version {}",
            file.format_version
        )));
    }
    let hash = params_hash(&file.params);
    if hash != file.content_hash {
        return Err(ModelError::Checkpoint(format!(
            "content hash mismatch ({hash} vs recorded {})",
            file.content_hash
        )));
    }
    if file.params.config != file.config {
        return Err(ModelError::Checkpoint("config header disagrees with parameters".into()));
    }
    Ok((file.params, file.norm))
}
