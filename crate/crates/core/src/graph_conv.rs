//! Mix-hop propagation and the two-branch graph convolution module.
//!
//! A mix-hop layer runs two steps over a row-normalized adjacency
//! `Ã = D̃⁻¹(A + I)`:
//!
//! * information propagation: `H(k) = β·H_in + (1−β)·Ã·H(k−1)`, keeping a
//!   β fraction of every node's own state to avoid over-smoothing;
//! * information selection: `H_out = Σ_{k=0..K} H(k)·W(k)`, with one learned
//!   selector per hop depth.
//!
//! Propagation acts on the node axis independently at every time step. The
//! graph convolution module runs one mix-hop layer on `Ã` and one on the
//! normalization of `Aᵀ` (the two edge directions) and adds their outputs.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph_learning::Adjacency;
use crate::tensor::{Param, ParamRef, Tape, TensorId};

pub struct MixHopLayer {
    /// Propagation depth K; the layer owns K+1 selectors for hops 0..=K.
    pub depth: usize,
    /// Retain ratio β in [0,1].
    pub beta: f64,
    /// Hop selectors stored as 1x1 conv kernels `[d_out, d_in, 1, 1]`.
    pub selectors: Vec<ParamRef>,
    /// When false (the no-selection ablation) the layer returns H(K) directly
    /// and `d_in` must equal `d_out`.
    pub select: bool,
    pub d_in: usize,
    pub d_out: usize,
}

impl MixHopLayer {
    pub fn new(
        name: &str,
        d_in: usize,
        d_out: usize,
        depth: usize,
        beta: f64,
        select: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if depth == 0 {
            return Err(Error::Config("mix-hop depth must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&beta) {
            return Err(Error::Config(format!("retain ratio beta must be in [0,1], got {beta}")));
        }
        if !select && d_in != d_out {
            return Err(Error::Config(format!(
                "mix-hop without selection needs equal channel widths, got {d_in} -> {d_out}"
            )));
        }
        let bound = 1.0 / (d_in as f64).sqrt();
        let selectors = (0..=depth)
            .map(|k| {
                Param::uniform(format!("{name}.w{k}"), &[d_out, d_in, 1, 1], -bound, bound, rng)
            })
            .collect();
        Ok(MixHopLayer { depth, beta, selectors, select, d_in, d_out })
    }

    pub fn params(&self) -> Vec<ParamRef> {
        if self.select {
            self.selectors.clone()
        } else {
            vec![]
        }
    }

    /// `h_in` is `[b, d_in, n, t]`; `a_tilde` is a row-normalized adjacency,
    /// `[n, n]` or `[b, 1, n, n]` for per-window graphs.
    pub fn forward(&self, tape: &mut Tape, h_in: TensorId, a_tilde: TensorId) -> Result<TensorId> {
        let shape = tape.shape(h_in).to_vec();
        if shape.len() != 4 || shape[1] != self.d_in {
            return Err(Error::Dimension(format!(
                "mix-hop expects [b,{},n,t] inputs, got {:?}",
                self.d_in, shape
            )));
        }
        let mut h_k = h_in;
        let mut out = if self.select {
            let w0 = tape.watch(&self.selectors[0]);
            Some(tape.conv1d_dilated(h_in, w0, 1)?)
        } else {
            None
        };
        for k in 1..=self.depth {
            let propagated = tape.matmul(a_tilde, h_k)?;
            let scaled = tape.mul_scalar(propagated, 1.0 - self.beta);
            let retained = tape.mul_scalar(h_in, self.beta);
            h_k = tape.add(retained, scaled)?;
            if self.select {
                let wk = tape.watch(&self.selectors[k]);
                let term = tape.conv1d_dilated(h_k, wk, 1)?;
                out = Some(tape.add(out.unwrap(), term)?);
            }
        }
        Ok(if self.select { out.unwrap() } else { h_k })
    }
}

/// Two mix-hop layers processing the two edge directions of a learned graph.
pub struct GcModule {
    pub inflow: MixHopLayer,
    pub outflow: MixHopLayer,
}

impl GcModule {
    pub fn new(
        name: &str,
        d_in: usize,
        d_out: usize,
        depth: usize,
        beta: f64,
        select: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        Ok(GcModule {
            inflow: MixHopLayer::new(&format!("{name}.in"), d_in, d_out, depth, beta, select, rng)?,
            outflow: MixHopLayer::new(&format!("{name}.out"), d_in, d_out, depth, beta, select, rng)?,
        })
    }

    pub fn params(&self) -> Vec<ParamRef> {
        let mut p = self.inflow.params();
        p.extend(self.outflow.params());
        p
    }

    /// `normalize(A)` drives one branch, `normalize(Aᵀ)` the other; outputs add.
    pub fn forward(&self, tape: &mut Tape, h_in: TensorId, adj: &Adjacency) -> Result<TensorId> {
        let a_fwd = tape.normalize_adjacency(adj.id)?;
        let a_rev_raw = tape.transpose_last2(adj.id)?;
        let a_rev = tape.normalize_adjacency(a_rev_raw)?;
        let x1 = self.inflow.forward(tape, h_in, a_fwd)?;
        let x2 = self.outflow.forward(tape, h_in, a_rev)?;
        tape.add(x1, x2)
    }
}

/// Pure row normalization used outside tapes (exports, inspection):
/// `Ã = D̃⁻¹(A + I)` with `D̃ᵢᵢ = 1 + Σⱼ Aᵢⱼ`.
pub fn normalize_rows(a: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        let mut d = 1.0;
        for j in 0..n {
            d += a[i * n + j];
        }
        for j in 0..n {
            let v = a[i * n + j] + if i == j { 1.0 } else { 0.0 };
            out[i * n + j] = v / d;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph_learning::{seeded_learner, GraphMode};
    use rand::{Rng, SeedableRng};

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    /// Scalar-loop oracle for one mix-hop layer on a single (batch, time)
    /// slice layout [b,d,n,t], written directly from the two defining
    /// equations and the selector-kernel layout.
    #[allow(clippy::too_many_arguments)]
    fn oracle_mixhop(
        h: &[f64],
        b: usize,
        d_in: usize,
        n: usize,
        t: usize,
        a_tilde: &[f64],
        selectors: &[Vec<f64>],
        d_out: usize,
        depth: usize,
        beta: f64,
    ) -> Vec<f64> {
        let idx = |bi: usize, c: usize, v: usize, ti: usize, ch: usize| ((bi * ch + c) * n + v) * t + ti;
        let mut hops: Vec<Vec<f64>> = vec![h.to_vec()];
        for _ in 1..=depth {
            let prev = hops.last().unwrap();
            let mut next = vec![0.0; h.len()];
            for bi in 0..b {
                for c in 0..d_in {
                    for v in 0..n {
                        for ti in 0..t {
                            let mut acc = 0.0;
                            for u in 0..n {
                                acc += a_tilde[v * n + u] * prev[idx(bi, c, u, ti, d_in)];
                            }
                            next[idx(bi, c, v, ti, d_in)] =
                                beta * h[idx(bi, c, v, ti, d_in)] + (1.0 - beta) * acc;
                        }
                    }
                }
            }
            hops.push(next);
        }
        let mut out = vec![0.0; b * d_out * n * t];
        for (k, hk) in hops.iter().enumerate() {
            let w = &selectors[k]; // [d_out, d_in, 1, 1]
            for bi in 0..b {
                for o in 0..d_out {
                    for v in 0..n {
                        for ti in 0..t {
                            let mut acc = 0.0;
                            for c in 0..d_in {
                                acc += w[o * d_in + c] * hk[idx(bi, c, v, ti, d_in)];
                            }
                            out[idx(bi, o, v, ti, d_out)] += acc;
                        }
                    }
                }
            }
        }
        out
    }

    #[test]
    fn normalize_examples() {
        // Empty graph normalizes to the identity.
        let z = normalize_rows(&[0.0; 9], 3);
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!(z[i * 3 + j], if i == j { 1.0 } else { 0.0 });
            }
        }
        // Hand case.
        let a = normalize_rows(&[0.0, 1.0, 0.0, 0.0], 2);
        assert_eq!(a, vec![0.5, 0.5, 0.0, 1.0]);
    }

    #[test]
    fn normalized_rows_sum_to_one() {
        let mut r = rng(3);
        for _ in 0..100 {
            let n = r.random_range(1..12);
            let a: Vec<f64> = (0..n * n).map(|_| r.random_range(0.0..2.0)).collect();
            let norm = normalize_rows(&a, n);
            for row in norm.chunks(n) {
                assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn beta_one_keeps_input_through_all_hops() {
        let mut r = rng(11);
        let layer = MixHopLayer::new("mh", 3, 2, 3, 1.0, true, &mut r).unwrap();
        let mut tape = Tape::new();
        let h: Vec<f64> = (0..2 * 3 * 4 * 5).map(|_| r.random_range(-1.0..1.0)).collect();
        let hid = tape.constant(h.clone(), &[2, 3, 4, 5]);
        let a: Vec<f64> = (0..16).map(|_| r.random_range(0.0..1.0)).collect();
        let aid = tape.constant(normalize_rows(&a, 4), &[4, 4]);
        let out = layer.forward(&mut tape, hid, aid).unwrap();
        // With beta = 1 every hop equals H_in, so the result is H_in · ΣW(k).
        let mut wsum = vec![0.0; 2 * 3];
        for s in &layer.selectors {
            for (acc, v) in wsum.iter_mut().zip(&s.borrow().data) {
                *acc += v;
            }
        }
        let want = oracle_mixhop(&h, 2, 3, 4, 5, &normalize_rows(&a, 4), &[wsum], 2, 0, 1.0);
        for (g, w) in tape.data(out).iter().zip(&want) {
            assert!((g - w).abs() <= 1e-10);
        }
    }

    #[test]
    fn delta_difference_assignment() {
        // K=2, W0=0, W1=-I, W2=I reproduces H(2) - H(1) to machine precision.
        let d = 3;
        let mut r = rng(17);
        let layer = MixHopLayer::new("mh", d, d, 2, 0.05, true, &mut r).unwrap();
        let zeros = vec![0.0; d * d];
        let mut neg_eye = vec![0.0; d * d];
        let mut eye = vec![0.0; d * d];
        for i in 0..d {
            neg_eye[i * d + i] = -1.0;
            eye[i * d + i] = 1.0;
        }
        layer.selectors[0].borrow_mut().data = zeros;
        layer.selectors[1].borrow_mut().data = neg_eye;
        layer.selectors[2].borrow_mut().data = eye;

        let n = 4;
        let t = 2;
        let mut tape = Tape::new();
        let h: Vec<f64> = (0..d * n * t).map(|_| r.random_range(-1.0..1.0)).collect();
        let hid = tape.constant(h.clone(), &[1, d, n, t]);
        let a: Vec<f64> = (0..n * n).map(|_| r.random_range(0.0..1.0)).collect();
        let a_tilde = normalize_rows(&a, n);
        let aid = tape.constant(a_tilde.clone(), &[n, n]);
        let out = layer.forward(&mut tape, hid, aid).unwrap();

        // Independent hop recursion.
        let beta = 0.05;
        let idx = |c: usize, v: usize, ti: usize| (c * n + v) * t + ti;
        let mut h1 = vec![0.0; h.len()];
        let mut h2 = vec![0.0; h.len()];
        for c in 0..d {
            for v in 0..n {
                for ti in 0..t {
                    let mut acc = 0.0;
                    for u in 0..n {
                        acc += a_tilde[v * n + u] * h[idx(c, u, ti)];
                    }
                    h1[idx(c, v, ti)] = beta * h[idx(c, v, ti)] + (1.0 - beta) * acc;
                }
            }
        }
        for c in 0..d {
            for v in 0..n {
                for ti in 0..t {
                    let mut acc = 0.0;
                    for u in 0..n {
                        acc += a_tilde[v * n + u] * h1[idx(c, u, ti)];
                    }
                    h2[idx(c, v, ti)] = beta * h[idx(c, v, ti)] + (1.0 - beta) * acc;
                }
            }
        }
        for i in 0..h.len() {
            assert!((tape.data(out)[i] - (h2[i] - h1[i])).abs() <= 1e-12);
        }
    }

    #[test]
    fn hop_zero_selector_preserves_input() {
        // W(0)=I and W(k)=0 for k>0 passes node-self information through
        // regardless of the graph.
        let d = 2;
        let mut r = rng(23);
        let layer = MixHopLayer::new("mh", d, d, 2, 0.3, true, &mut r).unwrap();
        let mut eye = vec![0.0; d * d];
        for i in 0..d {
            eye[i * d + i] = 1.0;
        }
        layer.selectors[0].borrow_mut().data = eye;
        layer.selectors[1].borrow_mut().data = vec![0.0; d * d];
        layer.selectors[2].borrow_mut().data = vec![0.0; d * d];
        let mut tape = Tape::new();
        let h: Vec<f64> = (0..d * 3 * 2).map(|_| r.random_range(-1.0..1.0)).collect();
        let hid = tape.constant(h.clone(), &[1, d, 3, 2]);
        let a: Vec<f64> = (0..9).map(|_| r.random_range(0.0..1.0)).collect();
        let aid = tape.constant(normalize_rows(&a, 3), &[3, 3]);
        let out = layer.forward(&mut tape, hid, aid).unwrap();
        for (g, w) in tape.data(out).iter().zip(&h) {
            assert!((g - w).abs() <= 1e-12);
        }
    }

    #[test]
    fn gc_forward_matches_brute_force() {
        let n = 4;
        let mut r = rng(31);
        let gc = GcModule::new("gc", 3, 2, 2, 0.05, true, &mut r).unwrap();
        let learner = seeded_learner(GraphMode::UniDirected, n, 3, 3.0, n, 5).unwrap();
        let mut tape = Tape::new();
        let adj = learner.compute_adjacency(&mut tape, None).unwrap();
        let a = adj.materialize(&tape);
        let h: Vec<f64> = (0..2 * 3 * n * 3).map(|_| r.random_range(-1.0..1.0)).collect();
        let hid = tape.constant(h.clone(), &[2, 3, n, 3]);
        let out = gc.forward(&mut tape, hid, &adj).unwrap();

        let mut at = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                at[j * n + i] = a[i * n + j];
            }
        }
        let sel = |l: &MixHopLayer| -> Vec<Vec<f64>> {
            l.selectors.iter().map(|s| s.borrow().data.clone()).collect()
        };
        let want_in = oracle_mixhop(
            &h, 2, 3, n, 3, &normalize_rows(&a, n), &sel(&gc.inflow), 2, 2, 0.05,
        );
        let want_out = oracle_mixhop(
            &h, 2, 3, n, 3, &normalize_rows(&at, n), &sel(&gc.outflow), 2, 2, 0.05,
        );
        for i in 0..want_in.len() {
            assert!((tape.data(out)[i] - (want_in[i] + want_out[i])).abs() <= 1e-10);
        }
    }

    #[test]
    fn empty_graph_uses_self_loops_only() {
        let mut r = rng(37);
        let gc = GcModule::new("gc", 2, 2, 2, 0.05, true, &mut r).unwrap();
        let mut tape = Tape::new();
        let a = tape.constant(vec![0.0; 9], &[3, 3]);
        let adj = Adjacency { id: a, n: 3, k: 3 };
        let h: Vec<f64> = (0..2 * 3 * 2).map(|_| r.random_range(-1.0..1.0)).collect();
        let hid = tape.constant(h.clone(), &[1, 2, 3, 2]);
        let out = gc.forward(&mut tape, hid, &adj).unwrap();
        // Both branches see the identity; the output is a pure per-node
        // feature map, so node v's output depends only on node v's input.
        let eye = normalize_rows(&[0.0; 9], 3);
        let sel = |l: &MixHopLayer| -> Vec<Vec<f64>> {
            l.selectors.iter().map(|s| s.borrow().data.clone()).collect()
        };
        let want_a = oracle_mixhop(&h, 1, 2, 3, 2, &eye, &sel(&gc.inflow), 2, 2, 0.05);
        let want_b = oracle_mixhop(&h, 1, 2, 3, 2, &eye, &sel(&gc.outflow), 2, 2, 0.05);
        for i in 0..want_a.len() {
            assert!((tape.data(out)[i] - (want_a[i] + want_b[i])).abs() <= 1e-12);
        }
    }

    #[test]
    fn symmetric_adjacency_with_tied_weights_doubles_one_branch() {
        let mut r = rng(41);
        let gc = GcModule::new("gc", 2, 2, 2, 0.1, true, &mut r).unwrap();
        // Tie the two branches' weights.
        for (a, b) in gc.inflow.selectors.iter().zip(&gc.outflow.selectors) {
            b.borrow_mut().data = a.borrow().data.clone();
        }
        let n = 3;
        let mut sym = vec![0.0; n * n];
        sym[1] = 0.7;
        sym[3] = 0.7;
        sym[5] = 0.2;
        sym[7] = 0.2;
        let mut tape = Tape::new();
        let aid = tape.constant(sym, &[n, n]);
        let adj = Adjacency { id: aid, n, k: n };
        let h: Vec<f64> = (0..2 * n * 2).map(|_| r.random_range(-1.0..1.0)).collect();
        let hid = tape.constant(h, &[1, 2, n, 2]);
        let out = gc.forward(&mut tape, hid, &adj).unwrap();
        let norm = tape.normalize_adjacency(aid).unwrap();
        let single = gc.inflow.forward(&mut tape, hid, norm).unwrap();
        for (o, s) in tape.data(out).iter().zip(tape.data(single)) {
            assert!((o - 2.0 * s).abs() <= 1e-12);
        }
    }

    #[test]
    fn mixhop_is_linear_in_input() {
        let mut r = rng(43);
        let layer = MixHopLayer::new("mh", 2, 3, 2, 0.05, true, &mut r).unwrap();
        let a: Vec<f64> = (0..16).map(|_| r.random_range(0.0..1.0)).collect();
        let an = normalize_rows(&a, 4);
        let h1: Vec<f64> = (0..2 * 4 * 3).map(|_| r.random_range(-1.0..1.0)).collect();
        let h2: Vec<f64> = (0..2 * 4 * 3).map(|_| r.random_range(-1.0..1.0)).collect();
        let (ca, cb) = (1.7, -0.4);
        let mix: Vec<f64> = h1.iter().zip(&h2).map(|(x, y)| ca * x + cb * y).collect();
        let eval = |h: &[f64]| -> Vec<f64> {
            let mut tape = Tape::new();
            let aid = tape.constant(an.clone(), &[4, 4]);
            let hid = tape.constant(h.to_vec(), &[1, 2, 4, 3]);
            let out = layer.forward(&mut tape, hid, aid).unwrap();
            tape.data(out).to_vec()
        };
        let (y1, y2, ym) = (eval(&h1), eval(&h2), eval(&mix));
        for i in 0..ym.len() {
            assert!((ym[i] - (ca * y1[i] + cb * y2[i])).abs() <= 1e-10);
        }
    }

    #[test]
    fn locality_one_hop_no_retain() {
        // K=1, beta=0: node v's output depends only on v and its neighbors.
        let mut r = rng(47);
        let layer = MixHopLayer::new("mh", 2, 2, 1, 0.0, true, &mut r).unwrap();
        let n = 4;
        // Graph: only edge 0 -> 1 (row 0 reaches node 1). Node 3 is isolated.
        let mut a = vec![0.0; n * n];
        a[1] = 1.0;
        let an = normalize_rows(&a, n);
        let base: Vec<f64> = (0..2 * n * 2).map(|_| r.random_range(-1.0..1.0)).collect();
        let mut poked = base.clone();
        // Perturb node 2 (not a neighbor of node 0).
        for c in 0..2 {
            for ti in 0..2 {
                poked[(c * n + 2) * 2 + ti] += 5.0;
            }
        }
        let eval = |h: &[f64]| -> Vec<f64> {
            let mut tape = Tape::new();
            let aid = tape.constant(an.clone(), &[n, n]);
            let hid = tape.constant(h.to_vec(), &[1, 2, n, 2]);
            let out = layer.forward(&mut tape, hid, aid).unwrap();
            tape.data(out).to_vec()
        };
        let (y0, y1) = (eval(&base), eval(&poked));
        // Node 0's output is unchanged by the perturbation at node 2.
        for c in 0..2 {
            for ti in 0..2 {
                let at = (c * n) * 2 + ti;
                assert!((y0[at] - y1[at]).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn retain_ratio_prevents_row_collapse() {
        // With beta > 0 and distinct inputs, deep propagation keeps node
        // rows distinct (min pairwise distance stays positive) up to K=6.
        let mut r = rng(53);
        let n = 5;
        let t = 1;
        let d = 3;
        let a: Vec<f64> = (0..n * n).map(|_| r.random_range(0.0..1.0)).collect();
        let an = normalize_rows(&a, n);
        let h: Vec<f64> = (0..d * n * t).map(|_| r.random_range(-1.0..1.0)).collect();
        let layer = MixHopLayer::new("mh", d, d, 6, 0.05, false, &mut r).unwrap();
        let mut tape = Tape::new();
        let aid = tape.constant(an, &[n, n]);
        let hid = tape.constant(h, &[1, d, n, t]);
        let out = layer.forward(&mut tape, hid, aid).unwrap();
        let y = tape.data(out);
        let node_vec = |v: usize| -> Vec<f64> { (0..d).map(|c| y[(c * n + v) * t]).collect() };
        let mut min_dist = f64::INFINITY;
        for u in 0..n {
            for v in (u + 1)..n {
                let dist: f64 = node_vec(u)
                    .iter()
                    .zip(node_vec(v))
                    .map(|(x, y)| (x - y) * (x - y))
                    .sum::<f64>()
                    .sqrt();
                min_dist = min_dist.min(dist);
            }
        }
        assert!(min_dist > 1e-6, "rows collapsed: min distance {min_dist}");
    }

    #[test]
    fn channel_mismatch_is_dimension_error() {
        let mut r = rng(59);
        let layer = MixHopLayer::new("mh", 3, 2, 2, 0.05, true, &mut r).unwrap();
        let mut tape = Tape::new();
        let aid = tape.constant(vec![1.0], &[1, 1]);
        let hid = tape.constant(vec![0.0; 4], &[1, 4, 1, 1]);
        assert!(matches!(layer.forward(&mut tape, hid, aid), Err(Error::Dimension(_))));
    }
}
