//! Minimal dense reverse-mode automatic differentiation over rank-2 f64
//! tensors: enough for the attention model (matmul, elementwise ops,
//! concatenation, gather, exp/normalized weighted means, layer norm,
//! segment aggregation) plus Adam and a finite-difference gradient checker.

use rand::Rng;
use serde::{Deserialize, Serialize};

pub const LAYER_NORM_EPS: f64 = 1e-5;
/// Attention logits are clamped to this range before exponentiation.
pub const EXP_CLAMP: f64 = 30.0;

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(rows * cols, data.len(), "shape/value count mismatch");
        Self { rows, cols, data }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
    }

    pub fn filled(rows: usize, cols: usize, v: f64) -> Self {
        Self { rows, cols, data: vec![v; rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        Self::from_fn(n, n, |r, c| if r == c { 1.0 } else { 0.0 })
    }

    /// Glorot-uniform initialization in +/- sqrt(6 / (fan_in + fan_out)).
    pub fn glorot(rows: usize, cols: usize, rng: &mut impl Rng) -> Self {
        let bound = (6.0 / (rows + cols) as f64).sqrt();
        Self::from_fn(rows, cols, |_, _| rng.gen_range(-bound..bound))
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TensorId(usize);

/// Per-destination lists of incident edge indices for segment aggregation.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentMap {
    pub segments: Vec<Vec<usize>>,
}

impl SegmentMap {
    /// Groups `edge_keys[i]` (a segment/row index per edge) into segments.
    pub fn from_edge_keys(edge_keys: &[usize], num_segments: usize) -> Self {
        let mut segments = vec![Vec::new(); num_segments];
        for (e, &k) in edge_keys.iter().enumerate() {
            segments[k].push(e);
        }
        Self { segments }
    }

    pub fn num_edges(&self) -> usize {
        self.segments.iter().map(|s| s.len()).sum()
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Matmul(TensorId, TensorId),
    Add(TensorId, TensorId),
    Sub(TensorId, TensorId),
    Hadamard(TensorId, TensorId),
    Scale(TensorId, f64),
    ConcatCols(Vec<TensorId>),
    RowGather(TensorId, Vec<usize>),
    Relu(TensorId),
    /// exp with input clamped to [-EXP_CLAMP, EXP_CLAMP]
    Exp(TensorId),
    Abs(TensorId),
    RowSum(TensorId),
    SumAll(TensorId),
    LayerNorm(TensorId),
    AddRowBroadcast(TensorId, TensorId),
    MulRowBroadcast(TensorId, TensorId),
    SegmentWeightedMean { values: TensorId, weights: TensorId, fallback: TensorId, map: SegmentMap },
    SegmentSum { values: TensorId, map: SegmentMap },
}

struct Node {
    op: Op,
    rows: usize,
    cols: usize,
    values: Vec<f64>,
    grad: Vec<f64>,
}

/// A single-use computation graph. Build forward, then call `backward` on a
/// scalar node; gradients accumulate into every reachable leaf.
pub struct Tape {
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    fn push(&mut self, op: Op, rows: usize, cols: usize, values: Vec<f64>) -> TensorId {
        debug_assert_eq!(values.len(), rows * cols);
        let grad = vec![0.0; values.len()];
        self.nodes.push(Node { op, rows, cols, values, grad });
        TensorId(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, m: &Matrix) -> TensorId {
        self.push(Op::Leaf, m.rows, m.cols, m.data.clone())
    }

    pub fn shape(&self, t: TensorId) -> (usize, usize) {
        let n = &self.nodes[t.0];
        (n.rows, n.cols)
    }

    pub fn values(&self, t: TensorId) -> &[f64] {
        &self.nodes[t.0].values
    }

    pub fn value_matrix(&self, t: TensorId) -> Matrix {
        let n = &self.nodes[t.0];
        Matrix { rows: n.rows, cols: n.cols, data: n.values.clone() }
    }

    pub fn grad(&self, t: TensorId) -> &[f64] {
        &self.nodes[t.0].grad
    }

    pub fn scalar(&self, t: TensorId) -> f64 {
        let n = &self.nodes[t.0];
        assert_eq!((n.rows, n.cols), (1, 1), "scalar() on non-scalar tensor");
        n.values[0]
    }

    fn expect_same_shape(&self, op: &str, a: TensorId, b: TensorId) {
        let (ar, ac) = self.shape(a);
        let (br, bc) = self.shape(b);
        assert!(
            ar == br && ac == bc,
            "{op}: shape mismatch {ar}x{ac} vs {br}x{bc}"
        );
    }

    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> TensorId {
        let (ar, ac) = self.shape(a);
        let (br, bc) = self.shape(b);
        assert_eq!(ac, br, "matmul: shape mismatch {ar}x{ac} * {br}x{bc}");
        let mut out = vec![0.0; ar * bc];
        {
            let av = &self.nodes[a.0].values;
            let bv = &self.nodes[b.0].values;
            for i in 0..ar {
                for k in 0..ac {
                    let aik = av[i * ac + k];
                    if aik == 0.0 {
                        continue;
                    }
                    let brow = &bv[k * bc..(k + 1) * bc];
                    let orow = &mut out[i * bc..(i + 1) * bc];
                    for (o, &bv) in orow.iter_mut().zip(brow) {
                        *o += aik * bv;
                    }
                }
            }
        }
        self.push(Op::Matmul(a, b), ar, bc, out)
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> TensorId {
        self.expect_same_shape("add", a, b);
        let (r, c) = self.shape(a);
        let out = self.nodes[a.0]
            .values
            .iter()
            .zip(&self.nodes[b.0].values)
            .map(|(x, y)| x + y)
            .collect();
        self.push(Op::Add(a, b), r, c, out)
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> TensorId {
        self.expect_same_shape("sub", a, b);
        let (r, c) = self.shape(a);
        let out = self.nodes[a.0]
            .values
            .iter()
            .zip(&self.nodes[b.0].values)
            .map(|(x, y)| x - y)
            .collect();
        self.push(Op::Sub(a, b), r, c, out)
    }

    pub fn hadamard(&mut self, a: TensorId, b: TensorId) -> TensorId {
        self.expect_same_shape("hadamard", a, b);
        let (r, c) = self.shape(a);
        let out = self.nodes[a.0]
            .values
            .iter()
            .zip(&self.nodes[b.0].values)
            .map(|(x, y)| x * y)
            .collect();
        self.push(Op::Hadamard(a, b), r, c, out)
    }

    pub fn scale(&mut self, a: TensorId, k: f64) -> TensorId {
        let (r, c) = self.shape(a);
        let out = self.nodes[a.0].values.iter().map(|x| x * k).collect();
        self.push(Op::Scale(a, k), r, c, out)
    }

    pub fn concat_cols(&mut self, parts: &[TensorId]) -> TensorId {
        assert!(!parts.is_empty(), "concat_cols: empty input");
        let rows = self.shape(parts[0]).0;
        let mut cols = 0;
        for &p in parts {
            let (r, c) = self.shape(p);
            assert_eq!(r, rows, "concat_cols: row mismatch {r} vs {rows}");
            cols += c;
        }
        let mut out = vec![0.0; rows * cols];
        let mut offset = 0;
        for &p in parts {
            let (_, c) = self.shape(p);
            let pv = &self.nodes[p.0].values;
            for i in 0..rows {
                out[i * cols + offset..i * cols + offset + c].copy_from_slice(&pv[i * c..(i + 1) * c]);
            }
            offset += c;
        }
        self.push(Op::ConcatCols(parts.to_vec()), rows, cols, out)
    }

    pub fn row_gather(&mut self, a: TensorId, indices: &[usize]) -> TensorId {
        let (rows, cols) = self.shape(a);
        for &i in indices {
            assert!(i < rows, "row_gather: index {i} out of range 0..{rows}");
        }
        let av = &self.nodes[a.0].values;
        let mut out = Vec::with_capacity(indices.len() * cols);
        for &i in indices {
            out.extend_from_slice(&av[i * cols..(i + 1) * cols]);
        }
        self.push(Op::RowGather(a, indices.to_vec()), indices.len(), cols, out)
    }

    pub fn relu(&mut self, a: TensorId) -> TensorId {
        let (r, c) = self.shape(a);
        let out = self.nodes[a.0].values.iter().map(|&x| x.max(0.0)).collect();
        self.push(Op::Relu(a), r, c, out)
    }

    pub fn exp(&mut self, a: TensorId) -> TensorId {
        let (r, c) = self.shape(a);
        let out = self.nodes[a.0]
            .values
            .iter()
            .map(|&x| x.clamp(-EXP_CLAMP, EXP_CLAMP).exp())
            .collect();
        self.push(Op::Exp(a), r, c, out)
    }

    pub fn abs(&mut self, a: TensorId) -> TensorId {
        let (r, c) = self.shape(a);
        let out = self.nodes[a.0].values.iter().map(|x| x.abs()).collect();
        self.push(Op::Abs(a), r, c, out)
    }

    pub fn row_sum(&mut self, a: TensorId) -> TensorId {
        let (r, c) = self.shape(a);
        let av = &self.nodes[a.0].values;
        let out = (0..r).map(|i| av[i * c..(i + 1) * c].iter().sum()).collect();
        self.push(Op::RowSum(a), r, 1, out)
    }

    pub fn sum_all(&mut self, a: TensorId) -> TensorId {
        let s = self.nodes[a.0].values.iter().sum();
        self.push(Op::SumAll(a), 1, 1, vec![s])
    }

    /// Row-wise layer normalization without affine terms.
    pub fn layer_norm(&mut self, a: TensorId) -> TensorId {
        let (r, c) = self.shape(a);
        let av = &self.nodes[a.0].values;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &av[i * c..(i + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / c as f64;
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            for j in 0..c {
                out[i * c + j] = (row[j] - mean) * inv;
            }
        }
        self.push(Op::LayerNorm(a), r, c, out)
    }

    /// a[r x c] + b[1 x c] broadcast over rows (bias add).
    pub fn add_row_broadcast(&mut self, a: TensorId, b: TensorId) -> TensorId {
        let (r, c) = self.shape(a);
        let (br, bc) = self.shape(b);
        assert!(br == 1 && bc == c, "add_row_broadcast: {r}x{c} vs {br}x{bc}");
        let av = &self.nodes[a.0].values;
        let bv = &self.nodes[b.0].values;
        let out = av.iter().enumerate().map(|(i, x)| x + bv[i % c]).collect();
        self.push(Op::AddRowBroadcast(a, b), r, c, out)
    }

    /// a[r x c] * b[1 x c] broadcast over rows (per-column gain).
    pub fn mul_row_broadcast(&mut self, a: TensorId, b: TensorId) -> TensorId {
        let (r, c) = self.shape(a);
        let (br, bc) = self.shape(b);
        assert!(br == 1 && bc == c, "mul_row_broadcast: {r}x{c} vs {br}x{bc}");
        let av = &self.nodes[a.0].values;
        let bv = &self.nodes[b.0].values;
        let out = av.iter().enumerate().map(|(i, x)| x * bv[i % c]).collect();
        self.push(Op::MulRowBroadcast(a, b), r, c, out)
    }

    /// Normalized weighted mean over segments. Segment u of the output is
    /// sum_{e in seg(u)} w_e * values_e / sum w_e; empty segments copy the
    /// fallback row (identity fallback rule).
    pub fn segment_weighted_mean(
        &mut self,
        values: TensorId,
        weights: TensorId,
        fallback: TensorId,
        map: &SegmentMap,
    ) -> TensorId {
        let (er, c) = self.shape(values);
        let (wr, wc) = self.shape(weights);
        assert!(wr == er && wc == 1, "segment_weighted_mean: weights {wr}x{wc} vs {er} edges");
        let (fr, fc) = self.shape(fallback);
        let n = map.segments.len();
        assert!(fr == n && fc == c, "segment_weighted_mean: fallback {fr}x{fc} vs {n}x{c}");
        assert_eq!(map.num_edges(), er, "segment_weighted_mean: map covers {} edges, values have {er}", map.num_edges());

        let vv = &self.nodes[values.0].values;
        let wv = &self.nodes[weights.0].values;
        let fv = &self.nodes[fallback.0].values;
        let mut out = vec![0.0; n * c];
        for (u, seg) in map.segments.iter().enumerate() {
            if seg.is_empty() {
                out[u * c..(u + 1) * c].copy_from_slice(&fv[u * c..(u + 1) * c]);
                continue;
            }
            let wsum: f64 = seg.iter().map(|&e| wv[e]).sum();
            for &e in seg {
                let w = wv[e] / wsum;
                for j in 0..c {
                    out[u * c + j] += w * vv[e * c + j];
                }
            }
        }
        self.push(
            Op::SegmentWeightedMean { values, weights, fallback, map: map.clone() },
            n,
            c,
            out,
        )
    }

    /// Unnormalized per-segment sum; empty segments produce zero rows.
    pub fn segment_sum(&mut self, values: TensorId, map: &SegmentMap, num_rows: usize) -> TensorId {
        let (er, c) = self.shape(values);
        assert_eq!(map.num_edges(), er, "segment_sum: map covers {} edges, values have {er}", map.num_edges());
        assert!(map.segments.len() <= num_rows || map.segments.len() == num_rows);
        let vv = &self.nodes[values.0].values;
        let mut out = vec![0.0; num_rows * c];
        for (u, seg) in map.segments.iter().enumerate() {
            for &e in seg {
                for j in 0..c {
                    out[u * c + j] += vv[e * c + j];
                }
            }
        }
        self.push(Op::SegmentSum { values, map: map.clone() }, num_rows, c, out)
    }

    /// Mean of all entries as a 1x1 tensor.
    pub fn mean_all(&mut self, a: TensorId) -> TensorId {
        let (r, c) = self.shape(a);
        let s = self.sum_all(a);
        self.scale(s, 1.0 / (r * c) as f64)
    }

    /// Reverse pass seeded at a scalar tensor.
    pub fn backward(&mut self, loss: TensorId) {
        {
            let n = &self.nodes[loss.0];
            assert_eq!((n.rows, n.cols), (1, 1), "backward: loss must be scalar");
        }
        self.nodes[loss.0].grad[0] = 1.0;
        for idx in (0..=loss.0).rev() {
            let (op, rows, cols) = {
                let n = &self.nodes[idx];
                (n.op.clone(), n.rows, n.cols)
            };
            let grad = self.nodes[idx].grad.clone();
            if grad.iter().all(|&g| g == 0.0) {
                continue;
            }
            match op {
                Op::Leaf => {}
                Op::Matmul(a, b) => {
                    let (ar, ac) = self.shape(a);
                    let (_, bc) = self.shape(b);
                    // dA = G B^T ; dB = A^T G
                    let bv = self.nodes[b.0].values.clone();
                    let av = self.nodes[a.0].values.clone();
                    {
                        let ga = &mut self.nodes[a.0].grad;
                        for i in 0..ar {
                            for k in 0..ac {
                                let mut s = 0.0;
                                let grow = &grad[i * bc..(i + 1) * bc];
                                let brow = &bv[k * bc..(k + 1) * bc];
                                for (g, b) in grow.iter().zip(brow) {
                                    s += g * b;
                                }
                                ga[i * ac + k] += s;
                            }
                        }
                    }
                    {
                        let gb = &mut self.nodes[b.0].grad;
                        for i in 0..ar {
                            for k in 0..ac {
                                let aik = av[i * ac + k];
                                if aik == 0.0 {
                                    continue;
                                }
                                let grow = &grad[i * bc..(i + 1) * bc];
                                let gbrow = &mut gb[k * bc..(k + 1) * bc];
                                for (gb, g) in gbrow.iter_mut().zip(grow) {
                                    *gb += aik * g;
                                }
                            }
                        }
                    }
                }
                Op::Add(a, b) => {
                    for (g, d) in self.nodes[a.0].grad.iter_mut().zip(&grad) {
                        *g += d;
                    }
                    for (g, d) in self.nodes[b.0].grad.iter_mut().zip(&grad) {
                        *g += d;
                    }
                }
                Op::Sub(a, b) => {
                    for (g, d) in self.nodes[a.0].grad.iter_mut().zip(&grad) {
                        *g += d;
                    }
                    for (g, d) in self.nodes[b.0].grad.iter_mut().zip(&grad) {
                        *g -= d;
                    }
                }
                Op::Hadamard(a, b) => {
                    let av = self.nodes[a.0].values.clone();
                    let bv = self.nodes[b.0].values.clone();
                    for ((g, d), y) in self.nodes[a.0].grad.iter_mut().zip(&grad).zip(&bv) {
                        *g += d * y;
                    }
                    for ((g, d), x) in self.nodes[b.0].grad.iter_mut().zip(&grad).zip(&av) {
                        *g += d * x;
                    }
                }
                Op::Scale(a, k) => {
                    for (g, d) in self.nodes[a.0].grad.iter_mut().zip(&grad) {
                        *g += d * k;
                    }
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let (_, c) = self.shape(p);
                        let gp = &mut self.nodes[p.0].grad;
                        for i in 0..rows {
                            for j in 0..c {
                                gp[i * c + j] += grad[i * cols + offset + j];
                            }
                        }
                        offset += c;
                    }
                }
                Op::RowGather(a, indices) => {
                    let ga = &mut self.nodes[a.0].grad;
                    for (out_row, &src) in indices.iter().enumerate() {
                        for j in 0..cols {
                            ga[src * cols + j] += grad[out_row * cols + j];
                        }
                    }
                }
                Op::Relu(a) => {
                    let av = self.nodes[a.0].values.clone();
                    for ((g, d), &x) in self.nodes[a.0].grad.iter_mut().zip(&grad).zip(&av) {
                        if x > 0.0 {
                            *g += d;
                        }
                    }
                }
                Op::Exp(a) => {
                    let out = self.nodes[idx].values.clone();
                    let av = self.nodes[a.0].values.clone();
                    for (((g, d), &y), &x) in
                        self.nodes[a.0].grad.iter_mut().zip(&grad).zip(&out).zip(&av)
                    {
                        // zero slope outside the clamp window
                        if x.abs() < EXP_CLAMP {
                            *g += d * y;
                        }
                    }
                }
                Op::Abs(a) => {
                    let av = self.nodes[a.0].values.clone();
                    for ((g, d), &x) in self.nodes[a.0].grad.iter_mut().zip(&grad).zip(&av) {
                        *g += d * x.signum() * if x == 0.0 { 0.0 } else { 1.0 };
                    }
                }
                Op::RowSum(a) => {
                    let (_, ac) = self.shape(a);
                    let ga = &mut self.nodes[a.0].grad;
                    for i in 0..rows {
                        for j in 0..ac {
                            ga[i * ac + j] += grad[i];
                        }
                    }
                }
                Op::SumAll(a) => {
                    for g in self.nodes[a.0].grad.iter_mut() {
                        *g += grad[0];
                    }
                }
                Op::LayerNorm(a) => {
                    let av = self.nodes[a.0].values.clone();
                    let out = self.nodes[idx].values.clone();
                    let ga = &mut self.nodes[a.0].grad;
                    let c = cols as f64;
                    for i in 0..rows {
                        let row = &av[i * cols..(i + 1) * cols];
                        let y = &out[i * cols..(i + 1) * cols];
                        let g = &grad[i * cols..(i + 1) * cols];
                        let mean = row.iter().sum::<f64>() / c;
                        let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / c;
                        let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
                        let g_mean = g.iter().sum::<f64>() / c;
                        let gy_mean = g.iter().zip(y).map(|(a, b)| a * b).sum::<f64>() / c;
                        for j in 0..cols {
                            ga[i * cols + j] += inv * (g[j] - g_mean - y[j] * gy_mean);
                        }
                    }
                }
                Op::AddRowBroadcast(a, b) => {
                    for (g, d) in self.nodes[a.0].grad.iter_mut().zip(&grad) {
                        *g += d;
                    }
                    let gb = &mut self.nodes[b.0].grad;
                    for (i, d) in grad.iter().enumerate() {
                        gb[i % cols] += d;
                    }
                }
                Op::MulRowBroadcast(a, b) => {
                    let av = self.nodes[a.0].values.clone();
                    let bv = self.nodes[b.0].values.clone();
                    for ((g, d), i) in self.nodes[a.0].grad.iter_mut().zip(&grad).zip(0..) {
                        *g += d * bv[i % cols];
                    }
                    let gb = &mut self.nodes[b.0].grad;
                    for (i, d) in grad.iter().enumerate() {
                        gb[i % cols] += d * av[i];
                    }
                }
                Op::SegmentWeightedMean { values, weights, fallback, map } => {
                    let vv = self.nodes[values.0].values.clone();
                    let wv = self.nodes[weights.0].values.clone();
                    let out = self.nodes[idx].values.clone();
                    for (u, seg) in map.segments.iter().enumerate() {
                        let gu = &grad[u * cols..(u + 1) * cols];
                        if seg.is_empty() {
                            let gf = &mut self.nodes[fallback.0].grad;
                            for j in 0..cols {
                                gf[u * cols + j] += gu[j];
                            }
                            continue;
                        }
                        let wsum: f64 = seg.iter().map(|&e| wv[e]).sum();
                        let m = &out[u * cols..(u + 1) * cols];
                        for &e in seg {
                            let w = wv[e] / wsum;
                            {
                                let gv = &mut self.nodes[values.0].grad;
                                for j in 0..cols {
                                    gv[e * cols + j] += gu[j] * w;
                                }
                            }
                            let mut dot = 0.0;
                            for j in 0..cols {
                                dot += gu[j] * (vv[e * cols + j] - m[j]);
                            }
                            self.nodes[weights.0].grad[e] += dot / wsum;
                        }
                    }
                }
                Op::SegmentSum { values, map } => {
                    let gv = &mut self.nodes[values.0].grad;
                    for (u, seg) in map.segments.iter().enumerate() {
                        for &e in seg {
                            for j in 0..cols {
                                gv[e * cols + j] += grad[u * cols + j];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Adam optimizer state: first/second moments per parameter tensor.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<Matrix>,
    pub v: Vec<Matrix>,
    pub step: usize,
}

impl AdamState {
    pub fn new(params: &[Matrix]) -> Self {
        Self {
            m: params.iter().map(|p| Matrix::zeros(p.rows, p.cols)).collect(),
            v: params.iter().map(|p| Matrix::zeros(p.rows, p.cols)).collect(),
            step: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Standard Adam update with bias correction.
pub fn adam_step(params: &mut [Matrix], grads: &[Matrix], state: &mut AdamState, cfg: &AdamConfig) {
    assert_eq!(params.len(), grads.len());
    assert_eq!(params.len(), state.m.len());
    state.step += 1;
    let t = state.step as f64;
    let bc1 = 1.0 - cfg.beta1.powf(t);
    let bc2 = 1.0 - cfg.beta2.powf(t);
    for ((p, g), (m, v)) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        assert_eq!(p.data.len(), g.data.len(), "adam: shape mismatch");
        for i in 0..p.data.len() {
            m.data[i] = cfg.beta1 * m.data[i] + (1.0 - cfg.beta1) * g.data[i];
            v.data[i] = cfg.beta2 * v.data[i] + (1.0 - cfg.beta2) * g.data[i] * g.data[i];
            let m_hat = m.data[i] / bc1;
            let v_hat = v.data[i] / bc2;
            p.data[i] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
}

/// Compares reverse-mode gradients against central finite differences on up
/// to `max_coords` randomly chosen coordinates per parameter. Returns the
/// maximum relative error.
pub fn grad_check<F>(
    build: F,
    params: &[Matrix],
    eps: f64,
    max_coords: usize,
    rng: &mut impl Rng,
) -> f64
where
    F: Fn(&mut Tape, &[TensorId]) -> TensorId,
{
    let mut tape = Tape::new();
    let ids: Vec<TensorId> = params.iter().map(|p| tape.leaf(p)).collect();
    let loss = build(&mut tape, &ids);
    assert!(tape.scalar(loss).is_finite(), "grad_check: non-finite loss");
    tape.backward(loss);
    let analytic: Vec<Vec<f64>> = ids.iter().map(|&id| tape.grad(id).to_vec()).collect();

    let eval = |params: &[Matrix]| -> f64 {
        let mut tape = Tape::new();
        let ids: Vec<TensorId> = params.iter().map(|p| tape.leaf(p)).collect();
        let loss = build(&mut tape, &ids);
        tape.scalar(loss)
    };

    let mut worst = 0.0_f64;
    let mut work = params.to_vec();
    for (pi, p) in params.iter().enumerate() {
        let total = p.data.len();
        let coords: Vec<usize> = if total <= max_coords {
            (0..total).collect()
        } else {
            (0..max_coords).map(|_| rng.gen_range(0..total)).collect()
        };
        for ci in coords {
            let orig = work[pi].data[ci];
            work[pi].data[ci] = orig + eps;
            let fp = eval(&work);
            work[pi].data[ci] = orig - eps;
            let fm = eval(&work);
            work[pi].data[ci] = orig;
            let numeric = (fp - fm) / (2.0 * eps);
            let exact = analytic[pi][ci];
            let denom = exact.abs().max(numeric.abs()).max(1.0);
            worst = worst.max((numeric - exact).abs() / denom);
        }
    }
    worst
}
