//! Graph structure learning layer.
//!
//! Learns a sparse directed adjacency matrix from trainable node embeddings:
//!
//! ```text
//! M1 = tanh(alpha · E1 Θ1)
//! M2 = tanh(alpha · E2 Θ2)
//! A  = ReLU(tanh(alpha · (M1 M2ᵀ − M2 M1ᵀ)))     (uni-directed mode)
//! ```
//!
//! followed by per-row top-k sparsification that keeps the k largest entries
//! of every row and zeroes the rest. The subtraction makes the pre-activation
//! antisymmetric, so `A[i][j] > 0` forces `A[j][i] == 0`: at most one
//! direction of every pair survives.
//!
//! Convention: `A[i][j] > 0` is the edge `j -> i`. Row `i` holds node `i`'s
//! incoming neighbors — the top-k step selects the sources each node listens
//! to, and the first graph-convolution branch propagates along exactly these
//! rows. Export files transpose to a row-per-source layout (see
//! [`write_adjacency_csv`]).
//!
//! Alternative constructions are available as modes: `global` (a free
//! parameter matrix under ReLU), `undirected`, `directed`, `dynamic`
//! (input-conditioned, one adjacency per batch window), and `predefined`
//! (a fixed user-supplied matrix).

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::io::Write;

use crate::error::{Error, Result};
use crate::tensor::{Param, ParamRef, Tape, TensorId};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GraphMode {
    UniDirected,
    Directed,
    Undirected,
    Global,
    Dynamic,
    Predefined,
}

impl GraphMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "uni_directed" => Ok(GraphMode::UniDirected),
            "directed" => Ok(GraphMode::Directed),
            "undirected" => Ok(GraphMode::Undirected),
            "global" => Ok(GraphMode::Global),
            "dynamic" => Ok(GraphMode::Dynamic),
            "predefined" => Ok(GraphMode::Predefined),
            other => Err(Error::Config(format!("unknown graph mode `{other}`"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            GraphMode::UniDirected => "uni_directed",
            GraphMode::Directed => "directed",
            GraphMode::Undirected => "undirected",
            GraphMode::Global => "global",
            GraphMode::Dynamic => "dynamic",
            GraphMode::Predefined => "predefined",
        }
    }
}

/// Learned adjacency recorded on a tape. `id` refers either to an `[n,n]`
/// tensor (static modes) or `[b,1,n,n]` (dynamic mode, one graph per window).
/// Gradients flow only through the retained (top-k) entries.
#[derive(Debug, Clone, Copy)]
pub struct Adjacency {
    pub id: TensorId,
    pub n: usize,
    pub k: usize,
}

impl Adjacency {
    /// Copy the adjacency values out of the tape (static modes only).
    pub fn materialize(&self, tape: &Tape) -> Vec<f64> {
        tape.data(self.id).to_vec()
    }
}

pub struct GraphLearner {
    pub mode: GraphMode,
    pub num_nodes: usize,
    /// Node embedding width s1.
    pub embed_dim: usize,
    /// Hidden width s2 after the linear maps.
    pub hidden_dim: usize,
    pub alpha: f64,
    pub k: usize,
    pub e1: ParamRef,
    pub e2: ParamRef,
    pub theta1: ParamRef,
    pub theta2: ParamRef,
    /// Free adjacency parameter, global mode only.
    pub w_global: Option<ParamRef>,
    /// Input projections, dynamic mode only.
    pub w_dyn1: Option<ParamRef>,
    pub w_dyn2: Option<ParamRef>,
    /// Fixed matrix, predefined mode only (row-major n×n).
    pub predefined: Option<Vec<f64>>,
}

impl GraphLearner {
    /// `in_dim` is the per-node input feature width, used by dynamic mode.
    pub fn new(
        mode: GraphMode,
        num_nodes: usize,
        embed_dim: usize,
        hidden_dim: usize,
        alpha: f64,
        k: usize,
        in_dim: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if num_nodes == 0 || embed_dim == 0 || hidden_dim == 0 {
            return Err(Error::Config("graph learner dimensions must be positive".into()));
        }
        if alpha <= 0.0 {
            return Err(Error::Config(format!("saturation rate alpha must be > 0, got {alpha}")));
        }
        if k == 0 || k > num_nodes {
            return Err(Error::Config(format!(
                "neighbor count k must satisfy 1 <= k <= {num_nodes}, got {k}"
            )));
        }
        // Small linear-map init keeps the initial pairwise scores inside the
        // mobile region of tanh(alpha·...); with the saturation rate at its
        // usual 3 the scores would otherwise start pinned at ±1 and the
        // structure would barely move early in training.
        let theta_bound = 0.3 / (embed_dim as f64).sqrt();
        let learner = GraphLearner {
            mode,
            num_nodes,
            embed_dim,
            hidden_dim,
            alpha,
            k,
            e1: Param::uniform("graph.e1", &[num_nodes, embed_dim], -0.5, 0.5, rng),
            e2: Param::uniform("graph.e2", &[num_nodes, embed_dim], -0.5, 0.5, rng),
            theta1: Param::uniform(
                "graph.theta1",
                &[embed_dim, hidden_dim],
                -theta_bound,
                theta_bound,
                rng,
            ),
            theta2: Param::uniform(
                "graph.theta2",
                &[embed_dim, hidden_dim],
                -theta_bound,
                theta_bound,
                rng,
            ),
            w_global: match mode {
                GraphMode::Global => {
                    Some(Param::uniform("graph.w_global", &[num_nodes, num_nodes], -0.5, 0.5, rng))
                }
                _ => None,
            },
            w_dyn1: match mode {
                GraphMode::Dynamic => {
                    let b = 1.0 / (in_dim.max(1) as f64).sqrt();
                    Some(Param::uniform("graph.w_dyn1", &[in_dim, embed_dim], -b, b, rng))
                }
                _ => None,
            },
            w_dyn2: match mode {
                GraphMode::Dynamic => {
                    let b = 1.0 / (in_dim.max(1) as f64).sqrt();
                    Some(Param::uniform("graph.w_dyn2", &[in_dim, embed_dim], -b, b, rng))
                }
                _ => None,
            },
            predefined: None,
        };
        Ok(learner)
    }

    /// Freeze both embedding tables to a static node feature matrix Z.
    /// Θ1 and Θ2 remain trainable.
    pub fn set_static_features(&mut self, z: &[f64], rows: usize, cols: usize) -> Result<()> {
        if rows != self.num_nodes {
            return Err(Error::Dimension(format!(
                "static feature matrix has {rows} rows, expected {}",
                self.num_nodes
            )));
        }
        if cols != self.embed_dim {
            return Err(Error::Dimension(format!(
                "static feature matrix has {cols} columns, expected embedding width {}",
                self.embed_dim
            )));
        }
        if z.len() != rows * cols {
            return Err(Error::Dimension("static feature matrix data/shape mismatch".into()));
        }
        self.e1 = Param::frozen("graph.e1", z.to_vec(), vec![rows, cols]);
        self.e2 = Param::frozen("graph.e2", z.to_vec(), vec![rows, cols]);
        Ok(())
    }

    pub fn set_predefined(&mut self, matrix: Vec<f64>, n: usize) -> Result<()> {
        if matrix.len() != n * n || n != self.num_nodes {
            return Err(Error::Dimension(format!(
                "predefined adjacency must be {0}x{0}",
                self.num_nodes
            )));
        }
        if matrix.iter().any(|&v| v < 0.0 || !v.is_finite()) {
            return Err(Error::Config("predefined adjacency entries must be finite and >= 0".into()));
        }
        self.predefined = Some(matrix);
        Ok(())
    }

    /// Parameters used by the current mode, in a stable order.
    pub fn params(&self) -> Vec<ParamRef> {
        match self.mode {
            GraphMode::Global => vec![self.w_global.clone().expect("global weight")],
            GraphMode::Dynamic => vec![
                self.w_dyn1.clone().expect("dynamic weight 1"),
                self.w_dyn2.clone().expect("dynamic weight 2"),
            ],
            GraphMode::Predefined => vec![],
            GraphMode::Undirected => vec![self.e1.clone(), self.theta1.clone()],
            GraphMode::UniDirected | GraphMode::Directed => vec![
                self.e1.clone(),
                self.e2.clone(),
                self.theta1.clone(),
                self.theta2.clone(),
            ],
        }
    }

    /// Compute the adjacency for the full node set or a sampled subset.
    /// Differentiable through the retained entries; the dropped entries of
    /// the top-k step receive zero gradient.
    pub fn compute_adjacency(&self, tape: &mut Tape, subset: Option<&[usize]>) -> Result<Adjacency> {
        let n = subset.map_or(self.num_nodes, |s| s.len());
        if self.k > self.num_nodes {
            return Err(Error::Config(format!(
                "k={} exceeds node count {}",
                self.k, self.num_nodes
            )));
        }
        let scores = match self.mode {
            GraphMode::UniDirected => {
                let (m1, m2) = self.hidden_features(tape, subset)?;
                let m2t = tape.transpose_last2(m2)?;
                let m1t = tape.transpose_last2(m1)?;
                let fwd = tape.matmul(m1, m2t)?;
                let rev = tape.matmul(m2, m1t)?;
                let diff = tape.sub(fwd, rev)?;
                let scaled = tape.mul_scalar(diff, self.alpha);
                let th = tape.tanh(scaled);
                tape.relu(th)
            }
            GraphMode::Directed => {
                let (m1, m2) = self.hidden_features(tape, subset)?;
                let m2t = tape.transpose_last2(m2)?;
                let prod = tape.matmul(m1, m2t)?;
                let scaled = tape.mul_scalar(prod, self.alpha);
                let th = tape.tanh(scaled);
                tape.relu(th)
            }
            GraphMode::Undirected => {
                let (m1, _) = self.hidden_features(tape, subset)?;
                let m1t = tape.transpose_last2(m1)?;
                let prod = tape.matmul(m1, m1t)?;
                let scaled = tape.mul_scalar(prod, self.alpha);
                let th = tape.tanh(scaled);
                tape.relu(th)
            }
            GraphMode::Global => {
                let w = self.w_global.as_ref().expect("global weight");
                let mut wid = tape.watch(w);
                if let Some(idx) = subset {
                    wid = tape.index_select(wid, 0, idx)?;
                    wid = tape.index_select(wid, 1, idx)?;
                }
                tape.relu(wid)
            }
            GraphMode::Predefined => {
                let full = self.predefined.as_ref().ok_or_else(|| {
                    Error::MissingInput("predefined graph mode requires a supplied matrix".into())
                })?;
                let data = match subset {
                    None => full.clone(),
                    Some(idx) => {
                        let mut out = Vec::with_capacity(idx.len() * idx.len());
                        for &i in idx {
                            for &j in idx {
                                out.push(full[i * self.num_nodes + j]);
                            }
                        }
                        out
                    }
                };
                tape.constant(data, &[n, n])
            }
            GraphMode::Dynamic => {
                return Err(Error::Contract(
                    "dynamic mode computes adjacency from window inputs; use compute_adjacency_dynamic".into(),
                ))
            }
        };
        self.sparsify(tape, scores, n)
    }

    /// Dynamic mode: `x_last` holds the final-step node features of each
    /// window, shaped `[b, n, in_dim]`. One adjacency per batch element,
    /// normalized over the destination axis so each row sums to 1.
    pub fn compute_adjacency_dynamic(&self, tape: &mut Tape, x_last: TensorId) -> Result<Adjacency> {
        let shape = tape.shape(x_last).to_vec();
        if shape.len() != 3 {
            return Err(Error::Dimension(format!(
                "dynamic adjacency expects [b,n,in_dim] inputs, got rank {}",
                shape.len()
            )));
        }
        let (b, n) = (shape[0], shape[1]);
        let w1 = self.w_dyn1.as_ref().ok_or_else(|| {
            Error::Contract("dynamic projections missing; learner not built in dynamic mode".into())
        })?;
        let w2 = self.w_dyn2.as_ref().expect("dynamic weight 2");
        let w1id = tape.watch(w1);
        let w2id = tape.watch(w2);
        let left = tape.matmul(x_last, w1id)?; // [b,n,s]
        let left = tape.tanh(left);
        let right = tape.matmul(x_last, w2id)?; // [b,n,s]
        let right = tape.tanh(right);
        let right_t = tape.transpose_last2(right)?; // [b,s,n]
        let logits = tape.matmul(left, right_t)?; // [b,n,n]
        let soft = tape.softmax(logits, 2)?;
        let a = tape.reshape(soft, &[b, 1, n, n])?;
        self.sparsify(tape, a, n)
    }

    /// Apply per-row top-k masking over the trailing `[n,n]` slices.
    fn sparsify(&self, tape: &mut Tape, scores: TensorId, n: usize) -> Result<Adjacency> {
        let k = self.k.min(n);
        let id = if k >= n {
            scores
        } else {
            let data = tape.data(scores);
            let mut mask = vec![0.0; data.len()];
            for (row, mrow) in data.chunks(n).zip(mask.chunks_mut(n)) {
                for idx in topk_indices(row, k) {
                    mrow[idx] = 1.0;
                }
            }
            let shape = tape.shape(scores).to_vec();
            let mask = tape.constant(mask, &shape);
            tape.hadamard(scores, mask)?
        };
        Ok(Adjacency { id, n, k })
    }

    fn hidden_features(
        &self,
        tape: &mut Tape,
        subset: Option<&[usize]>,
    ) -> Result<(TensorId, TensorId)> {
        let mut e1 = tape.watch(&self.e1);
        let mut e2 = tape.watch(&self.e2);
        if let Some(idx) = subset {
            e1 = tape.index_select(e1, 0, idx)?;
            e2 = tape.index_select(e2, 0, idx)?;
        }
        let t1 = tape.watch(&self.theta1);
        let t2 = tape.watch(&self.theta2);
        let p1 = tape.matmul(e1, t1)?;
        let p1 = tape.mul_scalar(p1, self.alpha);
        let m1 = tape.tanh(p1);
        let p2 = tape.matmul(e2, t2)?;
        let p2 = tape.mul_scalar(p2, self.alpha);
        let m2 = tape.tanh(p2);
        Ok((m1, m2))
    }
}

/// Indices of the k largest entries, ties broken toward the lowest index.
pub fn topk_indices(row: &[f64], k: usize) -> Vec<usize> {
    let k = k.min(row.len());
    let mut order: Vec<usize> = (0..row.len()).collect();
    order.sort_by(|&a, &b| {
        row[b].partial_cmp(&row[a]).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b))
    });
    order.truncate(k);
    order
}

/// Keep the k largest entries of a row (ties toward the lowest index),
/// zero the rest; retained weights are unchanged. `k >= len` is the identity.
pub fn topk_sparsify(row: &[f64], k: usize) -> Vec<f64> {
    if k == 0 {
        return vec![0.0; row.len()];
    }
    if k >= row.len() {
        return row.to_vec();
    }
    let mut out = vec![0.0; row.len()];
    for idx in topk_indices(row, k) {
        out[idx] = row[idx];
    }
    out
}

// ── export ───────────────────────────────────────────────────────────
//
// The in-memory matrix keeps receivers on rows; files are written in the
// row-per-source layout, i.e. transposed, so `adjacency.csv` row `s` column
// `d` is the learned weight of the edge `s -> d`.

/// Write the adjacency as CSV, one row per source node, 12 significant digits.
pub fn write_adjacency_csv(w: &mut impl Write, values: &[f64], n: usize) -> Result<()> {
    for src in 0..n {
        let row: Vec<String> =
            (0..n).map(|dst| format!("{:.11e}", values[dst * n + src])).collect();
        writeln!(w, "{}", row.join(","))?;
    }
    Ok(())
}

/// Directed edge list `src,dst,weight` sorted by weight descending
/// (ties by source then destination index).
pub fn write_edge_list(w: &mut impl Write, values: &[f64], n: usize) -> Result<()> {
    writeln!(w, "src,dst,weight")?;
    for (src, dst, weight) in sorted_edges(values, n) {
        writeln!(w, "{src},{dst},{weight:.11e}")?;
    }
    Ok(())
}

/// All positive edges as `(src, dst, weight)`, weight-descending
/// (ties by source then destination index).
pub fn sorted_edges(values: &[f64], n: usize) -> Vec<(usize, usize, f64)> {
    let mut edges: Vec<(usize, usize, f64)> = Vec::new();
    for dst in 0..n {
        for src in 0..n {
            let v = values[dst * n + src];
            if v > 0.0 {
                edges.push((src, dst, v));
            }
        }
    }
    edges.sort_by(|a, b| {
        b.2.partial_cmp(&a.2)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.0.cmp(&b.0))
            .then(a.1.cmp(&b.1))
    });
    edges
}

/// A node's learned neighbor set: the strongest sources feeding it
/// (its retained row entries).
pub fn top_neighbors(values: &[f64], n: usize, node: usize, count: usize) -> Vec<(usize, f64)> {
    let row = &values[node * n..(node + 1) * n];
    topk_indices(row, count)
        .into_iter()
        .filter(|&j| row[j] > 0.0)
        .map(|j| (j, row[j]))
        .collect()
}

/// A node's strongest claimed targets (its retained column entries).
pub fn top_targets(values: &[f64], n: usize, node: usize, count: usize) -> Vec<(usize, f64)> {
    let col: Vec<f64> = (0..n).map(|dst| values[dst * n + node]).collect();
    topk_indices(&col, count)
        .into_iter()
        .filter(|&j| col[j] > 0.0)
        .map(|j| (j, col[j]))
        .collect()
}

/// Deterministic learner factory for tests and tools.
pub fn seeded_learner(
    mode: GraphMode,
    n: usize,
    embed: usize,
    alpha: f64,
    k: usize,
    seed: u64,
) -> Result<GraphLearner> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    GraphLearner::new(mode, n, embed, embed, alpha, k, 1, &mut rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    /// Brute-force scalar-loop evaluation of the uni-directed construction,
    /// independent of the tensor ops.
    fn oracle_uni_directed(
        e1: &[f64],
        e2: &[f64],
        th1: &[f64],
        th2: &[f64],
        n: usize,
        s1: usize,
        s2: usize,
        alpha: f64,
        k: usize,
    ) -> Vec<f64> {
        let lin = |e: &[f64], th: &[f64]| -> Vec<f64> {
            let mut m = vec![0.0; n * s2];
            for i in 0..n {
                for j in 0..s2 {
                    let mut acc = 0.0;
                    for p in 0..s1 {
                        acc += e[i * s1 + p] * th[p * s2 + j];
                    }
                    m[i * s2 + j] = (alpha * acc).tanh();
                }
            }
            m
        };
        let m1 = lin(e1, th1);
        let m2 = lin(e2, th2);
        let mut a = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                let mut fwd = 0.0;
                let mut rev = 0.0;
                for p in 0..s2 {
                    fwd += m1[i * s2 + p] * m2[j * s2 + p];
                    rev += m2[i * s2 + p] * m1[j * s2 + p];
                }
                let v = (alpha * (fwd - rev)).tanh();
                a[i * n + j] = if v > 0.0 { v } else { 0.0 };
            }
        }
        let mut out = vec![0.0; n * n];
        for i in 0..n {
            let sparse = topk_sparsify(&a[i * n..(i + 1) * n], k);
            out[i * n..(i + 1) * n].copy_from_slice(&sparse);
        }
        out
    }

    #[test]
    fn matches_scalar_loop_oracle() {
        // N=3, s1=s2=2, alpha=1, thetas = identity.
        let mut learner = seeded_learner(GraphMode::UniDirected, 3, 2, 1.0, 3, 0).unwrap();
        let e1 = vec![1.0, 0.0, 0.0, 1.0, 1.0, 1.0];
        let e2 = vec![0.0, 1.0, 1.0, 0.0, 0.5, 0.5];
        let eye = vec![1.0, 0.0, 0.0, 1.0];
        learner.e1.borrow_mut().data = e1.clone();
        learner.e2.borrow_mut().data = e2.clone();
        learner.theta1.borrow_mut().data = eye.clone();
        learner.theta2.borrow_mut().data = eye.clone();

        let mut tape = Tape::new();
        let adj = learner.compute_adjacency(&mut tape, None).unwrap();
        let got = adj.materialize(&tape);
        let want = oracle_uni_directed(&e1, &e2, &eye, &eye, 3, 2, 2, 1.0, 3);
        for (g, w) in got.iter().zip(&want) {
            assert!((g - w).abs() <= 1e-12, "{g} vs {w}");
        }
        assert!(got.iter().any(|&v| v > 0.0));
    }

    #[test]
    fn oracle_agreement_on_random_draws() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for trial in 0..20 {
            let n = rng.random_range(2..8);
            let s = rng.random_range(1..5usize);
            let k = rng.random_range(1..=n);
            let learner = {
                let mut l = seeded_learner(GraphMode::UniDirected, n, s, 3.0, k, trial).unwrap();
                l.hidden_dim = s;
                l
            };
            let mut tape = Tape::new();
            let adj = learner.compute_adjacency(&mut tape, None).unwrap();
            let got = adj.materialize(&tape);
            let want = oracle_uni_directed(
                &learner.e1.borrow().data,
                &learner.e2.borrow().data,
                &learner.theta1.borrow().data,
                &learner.theta2.borrow().data,
                n,
                s,
                s,
                3.0,
                k,
            );
            for (g, w) in got.iter().zip(&want) {
                assert!((g - w).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn uni_directed_is_asymmetric() {
        for seed in 0..50 {
            let n = 6;
            let learner = seeded_learner(GraphMode::UniDirected, n, 4, 3.0, n, seed).unwrap();
            let mut tape = Tape::new();
            let adj = learner.compute_adjacency(&mut tape, None).unwrap();
            let a = adj.materialize(&tape);
            for i in 0..n {
                for j in 0..n {
                    if a[i * n + j] > 0.0 {
                        assert_eq!(a[j * n + i], 0.0, "seed {seed}: both directions alive");
                    }
                }
            }
        }
    }

    #[test]
    fn symmetric_parameters_give_zero_matrix() {
        let mut learner = seeded_learner(GraphMode::UniDirected, 5, 3, 3.0, 5, 9).unwrap();
        let e = learner.e1.borrow().data.clone();
        let th = learner.theta1.borrow().data.clone();
        learner.e2.borrow_mut().data = e;
        learner.theta2.borrow_mut().data = th;
        let mut tape = Tape::new();
        let adj = learner.compute_adjacency(&mut tape, None).unwrap();
        assert!(adj.materialize(&tape).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn topk_examples() {
        assert_eq!(topk_sparsify(&[0.5, 0.1, 0.9], 1), vec![0.0, 0.0, 0.9]);
        let row = [0.4, 0.2, 0.7];
        assert_eq!(topk_sparsify(&row, 3), row.to_vec());
        assert_eq!(topk_sparsify(&row, 10), row.to_vec());
        // Tie broken toward the lowest index.
        assert_eq!(topk_sparsify(&[0.3, 0.3, 0.2], 1), vec![0.3, 0.0, 0.0]);
    }

    #[test]
    fn topk_scale_equivariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let row: Vec<f64> = (0..10).map(|_| rng.random_range(-1.0..1.0)).collect();
            let k = rng.random_range(1..10);
            let c = rng.random_range(0.1..10.0);
            let scaled: Vec<f64> = row.iter().map(|v| v * c).collect();
            assert_eq!(topk_indices(&row, k), topk_indices(&scaled, k));
        }
    }

    #[test]
    fn static_features_freeze_embeddings() {
        let n = 4;
        let mut learner = seeded_learner(GraphMode::UniDirected, n, n, 1.0, n, 3).unwrap();
        // Z = identity, so M1 = tanh(alpha · Θ1) row for row.
        let mut z = vec![0.0; n * n];
        for i in 0..n {
            z[i * n + i] = 1.0;
        }
        learner.set_static_features(&z, n, n).unwrap();
        assert!(!learner.e1.borrow().trainable);

        let mut tape = Tape::new();
        let (m1, _) = learner.hidden_features(&mut tape, None).unwrap();
        let th1 = learner.theta1.borrow().data.clone();
        for (got, th) in tape.data(m1).iter().zip(&th1) {
            assert!((got - th.tanh()).abs() < 1e-12);
        }

        // Frozen leaves receive no gradient buffer.
        let adj = learner.compute_adjacency(&mut tape, None).unwrap();
        let s = tape.sum(adj.id);
        tape.backward(s).unwrap();
        assert!(learner.e1.borrow().grad.is_none());
        assert!(learner.e2.borrow().grad.is_none());
        // With Θ1 != Θ2 the output is generally nonzero even though E1 == E2.
        let a = adj.materialize(&tape);
        assert!(a.iter().any(|&v| v > 0.0));
    }

    #[test]
    fn static_features_with_equal_thetas_vanish() {
        let n = 4;
        let mut learner = seeded_learner(GraphMode::UniDirected, n, n, 1.0, n, 3).unwrap();
        let z: Vec<f64> = (0..n * n).map(|i| (i % 3) as f64).collect();
        learner.set_static_features(&z, n, n).unwrap();
        let th = learner.theta1.borrow().data.clone();
        learner.theta2.borrow_mut().data = th;
        let mut tape = Tape::new();
        let adj = learner.compute_adjacency(&mut tape, None).unwrap();
        assert!(adj.materialize(&tape).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn k_out_of_range_is_config_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(
            GraphLearner::new(GraphMode::UniDirected, 3, 2, 2, 1.0, 4, 1, &mut rng),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            GraphLearner::new(GraphMode::UniDirected, 3, 2, 2, 1.0, 0, 1, &mut rng),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn predefined_without_matrix_is_missing_input() {
        let learner = seeded_learner(GraphMode::Predefined, 3, 2, 1.0, 3, 0).unwrap();
        let mut tape = Tape::new();
        assert!(matches!(
            learner.compute_adjacency(&mut tape, None),
            Err(Error::MissingInput(_))
        ));
    }

    #[test]
    fn sparsity_bound_holds_per_row() {
        for seed in 0..20 {
            let n = 8;
            let k = 3;
            let learner = seeded_learner(GraphMode::UniDirected, n, 5, 3.0, k, seed).unwrap();
            let mut tape = Tape::new();
            let adj = learner.compute_adjacency(&mut tape, None).unwrap();
            let a = adj.materialize(&tape);
            for i in 0..n {
                let nnz = (0..n).filter(|&j| a[i * n + j] != 0.0).count();
                assert!(nnz <= k);
            }
            assert!(a.iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn global_mode_is_relu_of_parameter() {
        let learner = seeded_learner(GraphMode::Global, 4, 2, 1.0, 4, 7).unwrap();
        let w = learner.w_global.as_ref().unwrap().borrow().data.clone();
        let mut tape = Tape::new();
        let adj = learner.compute_adjacency(&mut tape, None).unwrap();
        let a = adj.materialize(&tape);
        for (av, wv) in a.iter().zip(&w) {
            assert_eq!(*av, wv.max(0.0));
        }
    }

    #[test]
    fn subset_restricts_before_scoring() {
        let n = 6;
        let learner = seeded_learner(GraphMode::UniDirected, n, 4, 3.0, 2, 21).unwrap();
        let subset = vec![1usize, 3, 4];
        let mut tape = Tape::new();
        let adj = learner.compute_adjacency(&mut tape, Some(&subset)).unwrap();
        assert_eq!(adj.n, 3);
        assert_eq!(tape.shape(adj.id), &[3, 3]);
        // Scores over the subset equal the oracle on the restricted embeddings.
        let pick =
            |p: &ParamRef, s1: usize| -> Vec<f64> {
                let d = &p.borrow().data;
                subset.iter().flat_map(|&i| d[i * s1..(i + 1) * s1].to_vec()).collect()
            };
        let want = oracle_uni_directed(
            &pick(&learner.e1, 4),
            &pick(&learner.e2, 4),
            &learner.theta1.borrow().data,
            &learner.theta2.borrow().data,
            3,
            4,
            4,
            3.0,
            2,
        );
        for (g, w) in adj.materialize(&tape).iter().zip(&want) {
            assert!((g - w).abs() <= 1e-12);
        }
    }

    #[test]
    fn dynamic_mode_rows_are_normalized() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let learner = GraphLearner::new(GraphMode::Dynamic, 5, 4, 4, 3.0, 5, 2, &mut rng).unwrap();
        let mut tape = Tape::new();
        let x: Vec<f64> = (0..3 * 5 * 2).map(|_| rng.random_range(-1.0..1.0)).collect();
        let xid = tape.constant(x, &[3, 5, 2]);
        let adj = learner.compute_adjacency_dynamic(&mut tape, xid).unwrap();
        assert_eq!(tape.shape(adj.id), &[3, 1, 5, 5]);
        for row in tape.data(adj.id).chunks(5) {
            let s: f64 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
            assert!(row.iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn edge_list_sorted_descending() {
        // Row = receiver internally: values[dst*n + src].
        let a = vec![0.0, 0.9, 0.2, 0.0, 0.0, 0.5, 0.0, 0.0, 0.0];
        let edges = sorted_edges(&a, 3);
        assert_eq!(edges.len(), 3);
        assert_eq!((edges[0].0, edges[0].1), (1, 0));
        assert_eq!((edges[1].0, edges[1].1), (2, 1));
        assert_eq!((edges[2].0, edges[2].1), (2, 0));
    }

    #[test]
    fn export_transposes_to_source_rows() {
        // Internal entry [dst=0][src=1] = 0.7 must appear on exported row 1.
        let a = vec![0.0, 0.7, 0.0, 0.0];
        let mut buf = Vec::new();
        write_adjacency_csv(&mut buf, &a, 2).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let rows: Vec<&str> = text.lines().collect();
        let row1: Vec<f64> = rows[1].split(',').map(|v| v.parse().unwrap()).collect();
        assert_eq!(row1[0], 0.7);
        let row0: Vec<f64> = rows[0].split(',').map(|v| v.parse().unwrap()).collect();
        assert_eq!(row0, vec![0.0, 0.0]);
    }
}
