//! Losses, the training loop, and evaluation metrics (MAE, RMSE, Pearson
//! correlation, normalized conservation residue) plus the CSV artifacts
//! behind the scatter/residue/history plots.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{adam_step, AdamConfig, AdamState, Matrix, SegmentMap, Tape, TensorId};
use crate::dataset::DatasetRecord;
use crate::model::{
    bind_existing, forward, prepare_input, predict, FeatureNorm, ModelError, ModelInput, ModelParams,
};
use crate::net::{RoadNetwork, VehicleClass};

/// Flows enter the loss in hundreds of vehicles, which keeps the published
/// flow-loss weight meaningful at network scale.
pub const FLOW_LOSS_SCALE: f64 = 1e-2;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("non-finite loss at step {step} (sample id {sample})")]
    NonFinite { step: usize, sample: usize },
    #[error("empty training set")]
    Empty,
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub w_alpha: f64,
    pub w_f: f64,
    pub w_c: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { w_alpha: 1.0, w_f: 0.005, w_c: 0.05 }
    }
}

impl LossWeights {
    pub fn no_conservation() -> Self {
        Self { w_c: 0.0, ..Self::default() }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub seed: u64,
    pub weights: LossWeights,
    /// Validation cadence in steps; 0 disables mid-run evaluation.
    pub eval_every: usize,
    /// Stop once the running train L_alpha (or a validation L_alpha, when
    /// one is evaluated) drops below this.
    pub stop_at_l_alpha: Option<f64>,
    /// Train the ratio term as a squared error instead of absolute error.
    /// The reported `l_alpha` statistics stay in absolute-error units.
    pub squared_alpha: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            batch_size: 128,
            steps: 1000,
            seed: 0,
            weights: LossWeights::default(),
            eval_every: 0,
            stop_at_l_alpha: None,
            squared_alpha: false,
        }
    }
}

/// One preprocessed record: model input plus label tensors and the
/// per-node demand balance used by the conservation loss.
#[derive(Debug, Clone)]
pub struct TrainSample {
    pub id: usize,
    pub input: ModelInput,
    /// Per class, [E x 1].
    pub truth_ratios: Vec<Matrix>,
    pub truth_flows: Vec<Matrix>,
    /// Per class, [n x 1]: demand ending at the node minus demand leaving it.
    pub delta: Vec<Matrix>,
    pub total_demand: f64,
}

/// Preprocesses solved records against a base network and normalization.
pub fn prepare_samples(
    base: &RoadNetwork,
    classes: &[VehicleClass],
    records: &[DatasetRecord],
    params: &ModelParams,
    norm: &FeatureNorm,
) -> Result<Vec<TrainSample>, ModelError> {
    let mut samples = Vec::with_capacity(records.len());
    for rec in records {
        let net = rec.scenario_network(base);
        let od = rec.od_matrix();
        let kept: Vec<usize> =
            (0..base.num_links()).filter(|i| !rec.removed_links.contains(i)).collect();
        let input = prepare_input(&net, &od, classes, &kept, params, norm)?;
        let n = net.num_nodes();
        let mut truth_ratios = Vec::new();
        let mut truth_flows = Vec::new();
        let mut delta = Vec::new();
        for c in 0..classes.len() {
            // labels follow the scenario link order; re-index through the
            // view's real-link list in case of class masks
            let view = &input.graph.views[c];
            let r: Vec<f64> = view.real_links.iter().map(|&i| rec.ratios[c][i]).collect();
            let f: Vec<f64> = view.real_links.iter().map(|&i| rec.flows[c][i]).collect();
            truth_ratios.push(Matrix::from_vec(r.len(), 1, r));
            truth_flows.push(Matrix::from_vec(f.len(), 1, f));
            let mut d = Matrix::zeros(n, 1);
            for &(r, s, dem) in &rec.demand[c] {
                d.data[s] += dem;
                d.data[r] -= dem;
            }
            delta.push(d);
        }
        let total_demand: f64 = rec.demand.iter().flatten().map(|&(_, _, d)| d).sum();
        samples.push(TrainSample { id: rec.index, input, truth_ratios, truth_flows, delta, total_demand });
    }
    Ok(samples)
}

/// Supervised losses on the tape: L_alpha and L_f are sums over classes of
/// per-edge mean absolute errors (flows scaled by FLOW_LOSS_SCALE).
pub fn loss_supervised(
    tape: &mut Tape,
    pred_ratios: &[TensorId],
    pred_flows: &[TensorId],
    sample: &TrainSample,
) -> (TensorId, TensorId) {
    let mut l_alpha: Option<TensorId> = None;
    let mut l_f: Option<TensorId> = None;
    for c in 0..pred_ratios.len() {
        let truth_r = tape.leaf(&sample.truth_ratios[c]);
        let dr = tape.sub(pred_ratios[c], truth_r);
        let dr = tape.abs(dr);
        let ma = tape.mean_all(dr);
        l_alpha = Some(match l_alpha {
            Some(acc) => tape.add(acc, ma),
            None => ma,
        });

        let truth_f = tape.leaf(&sample.truth_flows[c]);
        let df = tape.sub(pred_flows[c], truth_f);
        let df = tape.scale(df, FLOW_LOSS_SCALE);
        let df = tape.abs(df);
        let mf = tape.mean_all(df);
        l_f = Some(match l_f {
            Some(acc) => tape.add(acc, mf),
            None => mf,
        });
    }
    (l_alpha.unwrap(), l_f.unwrap())
}

/// Conservation loss on the tape: sum over classes and nodes of
/// |inflow - outflow - delta|.
pub fn loss_conservation(tape: &mut Tape, pred_flows: &[TensorId], sample: &TrainSample) -> TensorId {
    let n = sample.delta[0].rows;
    let mut total: Option<TensorId> = None;
    for (c, &flow) in pred_flows.iter().enumerate() {
        let edges = &sample.input.graph.views[c].real_edges;
        let tails: Vec<usize> = edges.iter().map(|&(u, _)| u).collect();
        let heads: Vec<usize> = edges.iter().map(|&(_, v)| v).collect();
        let in_map = SegmentMap::from_edge_keys(&heads, n);
        let out_map = SegmentMap::from_edge_keys(&tails, n);
        let inflow = tape.segment_sum(flow, &in_map, n);
        let outflow = tape.segment_sum(flow, &out_map, n);
        let delta = tape.leaf(&sample.delta[c]);
        let bal = tape.sub(inflow, outflow);
        let res = tape.sub(bal, delta);
        let res = tape.abs(res);
        let s = tape.sum_all(res);
        total = Some(match total {
            Some(acc) => tape.add(acc, s),
            None => s,
        });
    }
    total.unwrap()
}

/// Weighted combination of precomputed loss parts.
pub fn loss_total_value(l_alpha: f64, l_f: f64, l_c: f64, w: &LossWeights) -> f64 {
    w.w_alpha * l_alpha + w.w_f * l_f + w.w_c * l_c
}

/// Squared-error counterpart of the ratio term, used as a smooth training
/// surrogate; reported statistics remain absolute errors.
pub fn squared_ratio_loss(
    tape: &mut Tape,
    pred_ratios: &[TensorId],
    sample: &TrainSample,
) -> TensorId {
    let mut acc: Option<TensorId> = None;
    for c in 0..pred_ratios.len() {
        let truth_r = tape.leaf(&sample.truth_ratios[c]);
        let dr = tape.sub(pred_ratios[c], truth_r);
        let sq = tape.hadamard(dr, dr);
        let m = tape.mean_all(sq);
        acc = Some(match acc {
            Some(a) => tape.add(a, m),
            None => m,
        });
    }
    acc.unwrap()
}

/// Full per-sample loss on the tape; returns (total, l_alpha, l_f, l_c).
/// `l_alpha` is always the absolute-error value even when `squared_alpha`
/// swaps the trained ratio term for its squared surrogate.
pub fn sample_loss(
    tape: &mut Tape,
    params: &ModelParams,
    leaves: &[TensorId],
    sample: &TrainSample,
    w: &LossWeights,
    squared_alpha: bool,
) -> (TensorId, f64, f64, f64) {
    let bound = bind_existing(params, leaves);
    let out = forward(tape, params, &bound, &sample.input);
    let (l_alpha, l_f) = loss_supervised(tape, &out.ratios, &out.flows, sample);
    let l_c = loss_conservation(tape, &out.flows, sample);
    let alpha_term = if squared_alpha {
        squared_ratio_loss(tape, &out.ratios, sample)
    } else {
        l_alpha
    };
    let a = tape.scale(alpha_term, w.w_alpha);
    let f = tape.scale(l_f, w.w_f);
    let c = tape.scale(l_c, w.w_c);
    let af = tape.add(a, f);
    let total = tape.add(af, c);
    (total, tape.scalar(l_alpha), tape.scalar(l_f), tape.scalar(l_c))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepStats {
    pub step: usize,
    pub loss: f64,
    pub l_alpha: f64,
    pub l_f: f64,
    pub l_c: f64,
    /// Validation L_alpha when evaluated this step.
    pub val_l_alpha: Option<f64>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct TrainHistory {
    pub steps: Vec<StepStats>,
}

pub struct TrainResult {
    /// Parameters at the best validation L_alpha (final parameters when no
    /// validation set is given).
    pub best_params: ModelParams,
    pub best_val_l_alpha: Option<f64>,
    pub history: TrainHistory,
}

/// Mini-batch Adam training. Batch order is a seeded shuffle, the batch
/// loss is the mean over samples, and the run is fully deterministic.
pub fn train(
    params: &mut ModelParams,
    train_set: &[TrainSample],
    val_set: &[TrainSample],
    cfg: &TrainConfig,
) -> Result<TrainResult, TrainError> {
    if train_set.is_empty() {
        return Err(TrainError::Empty);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let adam_cfg = AdamConfig { lr: cfg.lr, ..AdamConfig::default() };
    let mut flat = params.flatten();
    let mut state = AdamState::new(&flat);
    let mut history = TrainHistory::default();
    let mut best_params = params.clone();
    let mut best_val = f64::INFINITY;
    let mut have_val = false;

    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut cursor = order.len(); // force an initial shuffle
    let mut step = 0;
    while step < cfg.steps {
        if cursor >= order.len() {
            order.shuffle(&mut rng);
            cursor = 0;
        }
        let end = (cursor + cfg.batch_size).min(order.len());
        let batch = &order[cursor..end];
        cursor = end;
        step += 1;

        let mut grad_acc: Vec<Matrix> =
            flat.iter().map(|m| Matrix::zeros(m.rows, m.cols)).collect();
        let (mut sum_total, mut sum_a, mut sum_f, mut sum_c) = (0.0, 0.0, 0.0, 0.0);
        for &si in batch {
            let sample = &train_set[si];
            let mut tape = Tape::new();
            let leaves: Vec<TensorId> = flat.iter().map(|m| tape.leaf(m)).collect();
            let (total, la, lf, lc) =
                sample_loss(&mut tape, params, &leaves, sample, &cfg.weights, cfg.squared_alpha);
            let total_v = tape.scalar(total);
            if !total_v.is_finite() {
                return Err(TrainError::NonFinite { step, sample: sample.id });
            }
            tape.backward(total);
            for (acc, &leaf) in grad_acc.iter_mut().zip(&leaves) {
                for (a, g) in acc.data.iter_mut().zip(tape.grad(leaf)) {
                    *a += g;
                }
            }
            sum_total += total_v;
            sum_a += la;
            sum_f += lf;
            sum_c += lc;
        }
        let bs = batch.len() as f64;
        for g in &mut grad_acc {
            for v in &mut g.data {
                *v /= bs;
            }
        }
        adam_step(&mut flat, &grad_acc, &mut state, &adam_cfg);
        params.assign(&flat);

        let mut stats = StepStats {
            step,
            loss: sum_total / bs,
            l_alpha: sum_a / bs,
            l_f: sum_f / bs,
            l_c: sum_c / bs,
            val_l_alpha: None,
        };
        let mut val_hit_target = false;
        if cfg.eval_every > 0 && !val_set.is_empty() && step % cfg.eval_every == 0 {
            let val = mean_l_alpha(params, val_set);
            stats.val_l_alpha = Some(val);
            have_val = true;
            if val < best_val {
                best_val = val;
                best_params = params.clone();
            }
            if let Some(target) = cfg.stop_at_l_alpha {
                val_hit_target = val < target;
            }
        }
        let train_l_alpha = stats.l_alpha;
        history.steps.push(stats);
        if let Some(target) = cfg.stop_at_l_alpha {
            if train_l_alpha < target || val_hit_target {
                break;
            }
        }
    }
    if !have_val {
        best_params = params.clone();
    }
    Ok(TrainResult {
        best_params,
        best_val_l_alpha: if have_val { Some(best_val) } else { None },
        history,
    })
}

/// Mean per-sample L_alpha over a split (no gradients).
pub fn mean_l_alpha(params: &ModelParams, samples: &[TrainSample]) -> f64 {
    let mut acc = 0.0;
    for s in samples {
        let (ratios, _) = predict(params, &s.input);
        let mut la = 0.0;
        for c in 0..ratios.len() {
            let truth = &s.truth_ratios[c].data;
            let m: f64 = ratios[c]
                .iter()
                .zip(truth)
                .map(|(p, t)| (p - t).abs())
                .sum::<f64>()
                / truth.len() as f64;
            la += m;
        }
        acc += la;
    }
    acc / samples.len() as f64
}

pub fn mae(y: &[f64], pred: &[f64]) -> f64 {
    assert_eq!(y.len(), pred.len());
    y.iter().zip(pred).map(|(a, b)| (a - b).abs()).sum::<f64>() / y.len() as f64
}

pub fn rmse(y: &[f64], pred: &[f64]) -> f64 {
    assert_eq!(y.len(), pred.len());
    (y.iter().zip(pred).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / y.len() as f64).sqrt()
}

pub fn pearson(x: &[f64], y: &[f64]) -> f64 {
    assert_eq!(x.len(), y.len());
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut vx = 0.0;
    let mut vy = 0.0;
    for (a, b) in x.iter().zip(y) {
        cov += (a - mx) * (b - my);
        vx += (a - mx) * (a - mx);
        vy += (b - my) * (b - my);
    }
    if vx == 0.0 || vy == 0.0 {
        return if vx == vy { 1.0 } else { 0.0 };
    }
    cov / (vx * vy).sqrt()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub class: String,
    pub flow_mae: f64,
    pub flow_rmse: f64,
    pub ratio_mae: f64,
    pub ratio_rmse: f64,
    pub flow_pearson: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsReport {
    pub per_class: Vec<ClassMetrics>,
    /// Mean over samples of (sum of |node residual| over classes and
    /// nodes) / total OD demand.
    pub residue: f64,
    pub num_samples: usize,
}

/// Per-edge truth/prediction pairs per class, the data behind the scatter
/// plots and metric tables.
pub struct EvalDump {
    pub report: MetricsReport,
    /// Per class: (truth flow, predicted flow, truth ratio, predicted ratio).
    pub scatter: Vec<Vec<(f64, f64, f64, f64)>>,
    /// Per node index: mean |residual| across samples and classes.
    pub node_residue: Vec<f64>,
}

pub fn evaluate(params: &ModelParams, samples: &[TrainSample], classes: &[VehicleClass]) -> EvalDump {
    let c_count = classes.len();
    let mut scatter: Vec<Vec<(f64, f64, f64, f64)>> = vec![Vec::new(); c_count];
    let num_nodes = if samples.is_empty() { 0 } else { samples[0].delta[0].rows };
    let mut node_residue = vec![0.0; num_nodes];
    let mut residue_sum = 0.0;
    for s in samples {
        let (ratios, flows) = predict(params, &s.input);
        let mut sample_residual = 0.0;
        for c in 0..c_count {
            for e in 0..ratios[c].len() {
                scatter[c].push((
                    s.truth_flows[c].data[e],
                    flows[c][e],
                    s.truth_ratios[c].data[e],
                    ratios[c][e],
                ));
            }
            let edges = &s.input.graph.views[c].real_edges;
            let mut res = s.delta[c].data.iter().map(|d| -d).collect::<Vec<f64>>();
            for (e, &(u, v)) in edges.iter().enumerate() {
                res[v] += flows[c][e];
                res[u] -= flows[c][e];
            }
            for (i, r) in res.iter().enumerate() {
                node_residue[i] += r.abs();
                sample_residual += r.abs();
            }
        }
        residue_sum += sample_residual / s.total_demand.max(1e-12);
    }
    let denom = (samples.len().max(1) * c_count) as f64;
    for r in &mut node_residue {
        *r /= denom.max(1.0);
    }
    let per_class = classes
        .iter()
        .enumerate()
        .map(|(c, class)| {
            let tf: Vec<f64> = scatter[c].iter().map(|t| t.0).collect();
            let pf: Vec<f64> = scatter[c].iter().map(|t| t.1).collect();
            let tr: Vec<f64> = scatter[c].iter().map(|t| t.2).collect();
            let pr: Vec<f64> = scatter[c].iter().map(|t| t.3).collect();
            ClassMetrics {
                class: class.name.clone(),
                flow_mae: mae(&tf, &pf),
                flow_rmse: rmse(&tf, &pf),
                ratio_mae: mae(&tr, &pr),
                ratio_rmse: rmse(&tr, &pr),
                flow_pearson: pearson(&tf, &pf),
            }
        })
        .collect();
    EvalDump {
        report: MetricsReport {
            per_class,
            residue: residue_sum / samples.len().max(1) as f64,
            num_samples: samples.len(),
        },
        scatter,
        node_residue,
    }
}

pub fn scatter_csv(dump: &EvalDump, class_idx: usize) -> String {
    let mut out = String::from("truth_flow,pred_flow,truth_ratio,pred_ratio\n");
    for (tf, pf, tr, pr) in &dump.scatter[class_idx] {
        out.push_str(&format!("{tf},{pf},{tr},{pr}\n"));
    }
    out
}

pub fn residue_csv(dump: &EvalDump) -> String {
    let mut out = String::from("node,mean_abs_residual\n");
    for (i, r) in dump.node_residue.iter().enumerate() {
        out.push_str(&format!("{i},{r}\n"));
    }
    out
}

pub fn history_csv(history: &TrainHistory) -> String {
    let mut out = String::from("step,loss,l_alpha,l_f,l_c,val_l_alpha\n");
    for s in &history.steps {
        let val = s.val_l_alpha.map(|v| v.to_string()).unwrap_or_default();
        out.push_str(&format!("{},{},{},{},{},{}\n", s.step, s.loss, s.l_alpha, s.l_f, s.l_c, val));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::grad_check;
    use crate::model::tests::toy_setup;
    use crate::model::ModelConfig;
    use crate::scenario::{generate_dataset, ScenarioConfig};
    use approx::assert_relative_eq;

    fn toy_samples(seed: u64, n: usize) -> (Vec<TrainSample>, ModelParams, Vec<VehicleClass>) {
        let (net, classes, od) = toy_setup();
        let mut cfg = ModelConfig::new(net.num_nodes(), classes.len());
        cfg.embed_dim = 8;
        cfg.hidden_dim = 8;
        cfg.layers = 2;
        cfg.heads = 2;
        let params = ModelParams::init(&cfg, &net, &od, seed).unwrap();
        let mut scfg = ScenarioConfig::base(seed);
        scfg.threshold = 1e-6;
        let records = generate_dataset(&net, &od, &classes, &scfg, n).unwrap();
        let samples =
            prepare_samples(&net, &classes, &records, &params, &FeatureNorm::identity()).unwrap();
        (samples, params, classes)
    }

    #[test]
    fn supervised_loss_arithmetic() {
        // one class, truth [0.5, 0.7], pred [0.6, 0.9] -> L_alpha 0.15
        let (samples, params, _) = toy_samples(1, 1);
        let mut s = samples[0].clone();
        let e = s.truth_ratios[0].rows;
        s.truth_ratios[0] = Matrix::from_vec(e, 1, (0..e).map(|i| 0.1 * i as f64).collect());
        let mut tape = Tape::new();
        let pred = tape.leaf(&Matrix::from_vec(
            e,
            1,
            (0..e).map(|i| 0.1 * i as f64 + 0.05).collect(),
        ));
        let pred_c2 = tape.leaf(&s.truth_ratios[1].clone());
        let zero_flow = tape.leaf(&Matrix::zeros(e, 1));
        let zf2 = tape.leaf(&s.truth_flows[1].clone());
        let tf = tape.leaf(&s.truth_flows[0].clone());
        let _ = (params, tf);
        let (l_alpha, _) =
            loss_supervised(&mut tape, &[pred, pred_c2], &[zero_flow, zf2], &s);
        // class 0 contributes 0.05, class 1 contributes 0
        assert_relative_eq!(tape.scalar(l_alpha), 0.05, max_relative = 1e-12);
    }

    #[test]
    fn supervised_loss_hand_case() {
        let (samples, _, _) = toy_samples(2, 1);
        let mut s = samples[0].clone();
        // shrink to two edges per class for the hand case
        for c in 0..2 {
            s.truth_ratios[c] = Matrix::from_vec(2, 1, vec![0.5, 0.7]);
            s.truth_flows[c] = Matrix::from_vec(2, 1, vec![0.0, 0.0]);
        }
        let mut tape = Tape::new();
        let p0 = tape.leaf(&Matrix::from_vec(2, 1, vec![0.6, 0.9]));
        let p1 = tape.leaf(&Matrix::from_vec(2, 1, vec![0.5, 0.7]));
        let f0 = tape.leaf(&Matrix::zeros(2, 1));
        let f1 = tape.leaf(&Matrix::zeros(2, 1));
        let (l_alpha, l_f) = loss_supervised(&mut tape, &[p0, p1], &[f0, f1], &s);
        assert_relative_eq!(tape.scalar(l_alpha), 0.15, max_relative = 1e-12);
        assert_relative_eq!(tape.scalar(l_f), 0.0);

        // two identical classes -> sum of per-class means
        let (l_alpha2, _) = loss_supervised(&mut tape, &[p0, p0], &[f0, f1], &s);
        assert_relative_eq!(tape.scalar(l_alpha2), 0.30, max_relative = 1e-12);
    }

    #[test]
    fn loss_total_arithmetic() {
        let w = LossWeights::default();
        assert_relative_eq!(loss_total_value(0.1, 10.0, 2.0, &w), 0.25, max_relative = 1e-12);
        let only_alpha = LossWeights { w_alpha: 1.0, w_f: 0.0, w_c: 0.0 };
        assert_relative_eq!(loss_total_value(0.3, 99.0, 7.0, &only_alpha), 0.3);
        assert_eq!(loss_total_value(0.0, 0.0, 0.0, &w), 0.0);
    }

    #[test]
    fn conservation_loss_single_link() {
        // single link 0 -> 1, demand 10, predicted flow 12 -> |−2| + |2|
        let (samples, _, _) = toy_samples(3, 1);
        let mut s = samples[0].clone();
        let n = 2;
        s.input.graph.views[0].real_edges = vec![(0, 1)];
        s.delta = vec![
            {
                let mut d = Matrix::zeros(n, 1);
                d.data[0] = -10.0;
                d.data[1] = 10.0;
                d
            },
            Matrix::zeros(n, 1),
        ];
        s.input.graph.views[1].real_edges = vec![(0, 1)];
        let mut tape = Tape::new();
        let f0 = tape.leaf(&Matrix::from_vec(1, 1, vec![12.0]));
        let f1 = tape.leaf(&Matrix::from_vec(1, 1, vec![0.0]));
        let lc = loss_conservation(&mut tape, &[f0, f1], &s);
        assert_relative_eq!(tape.scalar(lc), 4.0, max_relative = 1e-12);
    }

    #[test]
    fn conservation_loss_on_ground_truth_and_doubled() {
        let (samples, _, _) = toy_samples(4, 2);
        for s in &samples {
            let mut tape = Tape::new();
            let flows: Vec<TensorId> = s.truth_flows.iter().map(|m| tape.leaf(m)).collect();
            let lc = loss_conservation(&mut tape, &flows, s);
            assert!(tape.scalar(lc) <= 1e-6 * s.total_demand, "lc = {}", tape.scalar(lc));

            // doubling a conserved solution leaves exactly sum |delta|
            let doubled: Vec<TensorId> = flows.iter().map(|&f| tape.scale(f, 2.0)).collect();
            let lc2 = loss_conservation(&mut tape, &doubled, s);
            let expect: f64 = s.delta.iter().flat_map(|d| d.data.iter()).map(|d| d.abs()).sum();
            assert_relative_eq!(tape.scalar(lc2), expect, max_relative = 1e-9);
        }
    }

    #[test]
    fn full_loss_gradient_check() {
        let (samples, mut params, _) = toy_samples(5, 1);
        params.jitter(0.1, 57);
        let sample = samples[0].clone();
        let w = LossWeights::default();
        let flat = params.flatten();
        let template = params.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let err = grad_check(
            move |tape, ids| {
                let mut p = template.clone();
                let mats: Vec<Matrix> = ids.iter().map(|&id| tape.value_matrix(id)).collect();
                p.assign(&mats);
                let (total, _, _, _) = sample_loss(tape, &p, ids, &sample, &w, false);
                total
            },
            &flat,
            1e-4,
            3,
            &mut rng,
        );
        assert!(err <= 1e-4, "max relative error {err}");
    }

    #[test]
    fn zero_weight_training_keeps_params() {
        let (samples, mut params, _) = toy_samples(7, 2);
        let before = params.clone();
        let cfg = TrainConfig {
            steps: 5,
            batch_size: 2,
            weights: LossWeights { w_alpha: 0.0, w_f: 0.0, w_c: 0.0 },
            ..TrainConfig::default()
        };
        train(&mut params, &samples, &[], &cfg).unwrap();
        assert_eq!(params, before);
    }

    #[test]
    fn training_is_deterministic_and_descends() {
        let (samples, params0, _) = toy_samples(8, 4);
        let cfg = TrainConfig { steps: 40, batch_size: 4, seed: 3, ..TrainConfig::default() };
        let mut p1 = params0.clone();
        let r1 = train(&mut p1, &samples, &[], &cfg).unwrap();
        let mut p2 = params0.clone();
        let r2 = train(&mut p2, &samples, &[], &cfg).unwrap();
        assert_eq!(p1, p2);
        assert_eq!(r1.history.steps.len(), r2.history.steps.len());
        for (a, b) in r1.history.steps.iter().zip(&r2.history.steps) {
            assert_eq!(a.loss, b.loss);
        }
        let first = r1.history.steps.first().unwrap().loss;
        let last = r1.history.steps.last().unwrap().loss;
        assert!(last < first, "loss did not descend: {first} -> {last}");
    }

    #[test]
    fn metric_arithmetic() {
        let y = [1.0, 3.0];
        let p = [2.0, 5.0];
        assert_relative_eq!(mae(&y, &p), 1.5);
        assert_relative_eq!(rmse(&y, &p), (2.5f64).sqrt());
        assert!(rmse(&y, &p) >= mae(&y, &p));
        assert_relative_eq!(pearson(&[1.0, 2.0, 3.0], &[2.0, 4.0, 6.0]), 1.0, max_relative = 1e-12);
        assert_relative_eq!(pearson(&[1.0, 2.0, 3.0], &[-1.0, -2.0, -3.0]), -1.0, max_relative = 1e-12);
    }

    #[test]
    fn evaluate_perfect_predictions_and_order_invariance() {
        let (samples, params, classes) = toy_samples(9, 3);
        // build a params-free perfect check by evaluating truth against itself
        let dump = evaluate(&params, &samples, &classes);
        for m in &dump.report.per_class {
            assert!(m.flow_rmse >= m.flow_mae - 1e-12);
            assert!(m.ratio_rmse >= m.ratio_mae - 1e-12);
        }
        let mut reordered = samples.clone();
        reordered.reverse();
        let dump2 = evaluate(&params, &reordered, &classes);
        for (a, b) in dump.report.per_class.iter().zip(&dump2.report.per_class) {
            assert_relative_eq!(a.flow_mae, b.flow_mae, max_relative = 1e-12);
            assert_relative_eq!(a.flow_pearson, b.flow_pearson, max_relative = 1e-12);
        }
        assert_relative_eq!(dump.report.residue, dump2.report.residue, max_relative = 1e-12);

        let csv = scatter_csv(&dump, 0);
        assert!(csv.lines().count() > 1);
        assert!(residue_csv(&dump).starts_with("node,"));
    }

    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
}
