//! Finite-difference verification of every differentiable operation and of
//! the fully composed network.
//!
//! Each check builds a scalar loss from parameter leaves, runs one backward
//! pass, then compares every analytic gradient entry against central finite
//! differences `(f(θ+h) − f(θ−h)) / 2h` with `h = 1e-5` on f64 values. The
//! per-entry relative error is `|a − n| / max(|a|, |n|, 1e-3)`; the floor
//! turns near-zero gradients into an absolute comparison at 1e-7 scale.
//!
//! Instances are sampled away from kinks: relu/abs inputs keep a margin from
//! zero, and top-k checks resample until the kth/(k+1)th score gap is well
//! above the probe step so the retained index set is locally constant.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph_conv::{GcModule, MixHopLayer};
use crate::graph_learning::{GraphLearner, GraphMode};
use crate::model::{seeded_model, small_config};
use crate::temporal_conv::TcModule;
use crate::tensor::{numel, Param, ParamRef, Tape, TensorId};

pub const DEFAULT_H: f64 = 1e-5;
pub const DEFAULT_TOL: f64 = 1e-4;
pub const DEFAULT_INSTANCES: usize = 20;

/// Every op name accepted by [`run_suite`]'s filter, in report order.
pub const ALL_OPS: &[&str] = &[
    "matmul",
    "conv1d_dilated",
    "tanh",
    "sigmoid",
    "relu",
    "abs",
    "add",
    "sub",
    "mul_scalar",
    "hadamard",
    "add_bias",
    "concat",
    "slice_last_steps",
    "transpose",
    "softmax",
    "dropout",
    "layer_norm",
    "normalize_adjacency",
    "index_select",
    "affine_axis",
    "sum",
    "mean",
    "mixhop",
    "graph_conv",
    "temporal_conv",
    "graph_learning",
    "mtgnn_forward",
];

#[derive(Debug, Clone)]
pub struct OpReport {
    pub op: String,
    pub max_rel_err: f64,
    pub instances: usize,
}

/// Compare analytic and finite-difference gradients of `loss_fn` with
/// respect to every trainable parameter. `loss_fn` must be deterministic:
/// repeated calls with the same parameter values build the same loss.
pub fn fd_max_rel_err<F>(loss_fn: F, params: &[ParamRef], h: f64) -> Result<f64>
where
    F: Fn(&mut Tape) -> Result<TensorId>,
{
    let eval = |f: &F| -> Result<f64> {
        let mut tape = Tape::new();
        let loss = f(&mut tape)?;
        if tape.data(loss).len() != 1 {
            return Err(Error::Contract("gradient check loss must be scalar".into()));
        }
        Ok(tape.data(loss)[0])
    };
    // Analytic pass.
    let mut tape = Tape::new();
    let loss = loss_fn(&mut tape)?;
    tape.backward(loss)?;
    let analytic: Vec<Vec<f64>> = params
        .iter()
        .map(|p| {
            let p = p.borrow();
            p.grad.clone().unwrap_or_else(|| vec![0.0; p.numel()])
        })
        .collect();
    // Numeric probes.
    let mut worst = 0.0f64;
    for (pi, pref) in params.iter().enumerate() {
        let count = pref.borrow().numel();
        for j in 0..count {
            let orig = pref.borrow().data[j];
            pref.borrow_mut().data[j] = orig + h;
            let up = eval(&loss_fn)?;
            pref.borrow_mut().data[j] = orig - h;
            let down = eval(&loss_fn)?;
            pref.borrow_mut().data[j] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic[pi][j];
            let denom = a.abs().max(numeric.abs()).max(1e-3);
            worst = worst.max((a - numeric).abs() / denom);
        }
    }
    Ok(worst)
}

fn leaf(rng: &mut ChaCha8Rng, name: &str, shape: &[usize], lo: f64, hi: f64) -> ParamRef {
    Param::uniform(name, shape, lo, hi, rng)
}

/// Values bounded away from zero (for relu/abs kinks).
fn leaf_off_zero(rng: &mut ChaCha8Rng, name: &str, shape: &[usize]) -> ParamRef {
    let data: Vec<f64> = (0..numel(shape))
        .map(|_| {
            let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
            sign * rng.random_range(0.05..1.0)
        })
        .collect();
    Param::new(name, data, shape.to_vec())
}

fn weighted_sum(tape: &mut Tape, out: TensorId, weights: &[f64]) -> Result<TensorId> {
    let shape = tape.shape(out).to_vec();
    let w = tape.constant(weights.to_vec(), &shape);
    let prod = tape.hadamard(out, w)?;
    Ok(tape.sum(prod))
}

fn rand_weights(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

/// One random instance of one op; returns its max relative error.
fn check_instance(op: &str, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let h = DEFAULT_H;
    match op {
        "matmul" => {
            let (b, m, k, n) = (
                rng.random_range(1..3usize),
                rng.random_range(1..4usize),
                rng.random_range(1..4usize),
                rng.random_range(1..4usize),
            );
            let a = leaf(&mut rng, "a", &[b, m, k], -1.0, 1.0);
            let bb = leaf(&mut rng, "b", &[k, n], -1.0, 1.0);
            let w = rand_weights(&mut rng, b * m * n);
            let params = vec![a.clone(), bb.clone()];
            fd_max_rel_err(
                move |t| {
                    let ai = t.watch(&a);
                    let bi = t.watch(&bb);
                    let o = t.matmul(ai, bi)?;
                    weighted_sum(t, o, &w)
                },
                &params,
                h,
            )
        }
        "conv1d_dilated" => {
            let (bs, ci, co, nn, k) = (
                rng.random_range(1..3usize),
                rng.random_range(1..3usize),
                rng.random_range(1..3usize),
                rng.random_range(1..3usize),
                rng.random_range(1..4usize),
            );
            let d = rng.random_range(1..3usize);
            let t_len = d * (k - 1) + rng.random_range(1..4usize);
            let x = leaf(&mut rng, "x", &[bs, ci, nn, t_len], -1.0, 1.0);
            let kern = leaf(&mut rng, "k", &[co, ci, 1, k], -1.0, 1.0);
            let w = rand_weights(&mut rng, bs * co * nn * (t_len - d * (k - 1)));
            let params = vec![x.clone(), kern.clone()];
            fd_max_rel_err(
                move |t| {
                    let xi = t.watch(&x);
                    let ki = t.watch(&kern);
                    let o = t.conv1d_dilated(xi, ki, d)?;
                    weighted_sum(t, o, &w)
                },
                &params,
                h,
            )
        }
        "tanh" | "sigmoid" | "relu" | "abs" => {
            let shape = vec![rng.random_range(1..4usize), rng.random_range(1..5usize)];
            let x = if op == "relu" || op == "abs" {
                leaf_off_zero(&mut rng, "x", &shape)
            } else {
                leaf(&mut rng, "x", &shape, -2.0, 2.0)
            };
            let w = rand_weights(&mut rng, numel(&shape));
            let name = op.to_string();
            let params = vec![x.clone()];
            fd_max_rel_err(
                move |t| {
                    let xi = t.watch(&x);
                    let o = match name.as_str() {
                        "tanh" => t.tanh(xi),
                        "sigmoid" => t.sigmoid(xi),
                        "relu" => t.relu(xi),
                        _ => t.abs(xi),
                    };
                    weighted_sum(t, o, &w)
                },
                &params,
                h,
            )
        }
        "add" | "sub" | "hadamard" => {
            let shape = vec![rng.random_range(1..4usize), rng.random_range(1..4usize)];
            let a = leaf(&mut rng, "a", &shape, -1.0, 1.0);
            let b = leaf(&mut rng, "b", &shape, -1.0, 1.0);
            let w = rand_weights(&mut rng, numel(&shape));
            let name = op.to_string();
            let params = vec![a.clone(), b.clone()];
            fd_max_rel_err(
                move |t| {
                    let ai = t.watch(&a);
                    let bi = t.watch(&b);
                    let o = match name.as_str() {
                        "add" => t.add(ai, bi)?,
                        "sub" => t.sub(ai, bi)?,
                        _ => t.hadamard(ai, bi)?,
                    };
                    weighted_sum(t, o, &w)
                },
                &params,
                h,
            )
        }
        "mul_scalar" => {
            let shape = vec![rng.random_range(1..5usize)];
            let c = rng.random_range(-2.0..2.0);
            let x = leaf(&mut rng, "x", &shape, -1.0, 1.0);
            let w = rand_weights(&mut rng, numel(&shape));
            let params = vec![x.clone()];
            fd_max_rel_err(
                move |t| {
                    let xi = t.watch(&x);
                    let o = t.mul_scalar(xi, c);
                    weighted_sum(t, o, &w)
                },
                &params,
                h,
            )
        }
        "add_bias" => {
            let (b, c, n, tl) =
                (1usize, rng.random_range(1..4usize), rng.random_range(1..3usize), 2usize);
            let x = leaf(&mut rng, "x", &[b, c, n, tl], -1.0, 1.0);
            let bias = leaf(&mut rng, "bias", &[c], -1.0, 1.0);
            let w = rand_weights(&mut rng, b * c * n * tl);
            let params = vec![x.clone(), bias.clone()];
            fd_max_rel_err(
                move |t| {
                    let xi = t.watch(&x);
                    let bi = t.watch(&bias);
                    let o = t.add_bias(xi, bi, 1)?;
                    weighted_sum(t, o, &w)
                },
                &params,
                h,
            )
        }
        "concat" => {
            let axis = rng.random_range(0..2usize);
            let mut s1 = vec![rng.random_range(1..3usize), rng.random_range(1..3usize)];
            let mut s2 = s1.clone();
            s1[axis] = rng.random_range(1..3usize);
            s2[axis] = rng.random_range(1..3usize);
            let a = leaf(&mut rng, "a", &s1, -1.0, 1.0);
            let b = leaf(&mut rng, "b", &s2, -1.0, 1.0);
            let w = rand_weights(&mut rng, numel(&s1) + numel(&s2));
            let params = vec![a.clone(), b.clone()];
            fd_max_rel_err(
                move |t| {
                    let ai = t.watch(&a);
                    let bi = t.watch(&b);
                    let o = t.concat(&[ai, bi], axis)?;
                    weighted_sum(t, o, &w)
                },
                &params,
                h,
            )
        }
        "slice_last_steps" => {
            let tl = rng.random_range(2..6usize);
            let keep = rng.random_range(1..=tl);
            let x = leaf(&mut rng, "x", &[2, tl], -1.0, 1.0);
            let w = rand_weights(&mut rng, 2 * keep);
            let params = vec![x.clone()];
            fd_max_rel_err(
                move |t| {
                    let xi = t.watch(&x);
                    let o = t.slice_last_steps(xi, keep)?;
                    weighted_sum(t, o, &w)
                },
                &params,
                h,
            )
        }
        "transpose" => {
            let shape = vec![
                rng.random_range(1..3usize),
                rng.random_range(1..3usize),
                rng.random_range(1..3usize),
            ];
            let mut perm = vec![0usize, 1, 2];
            for i in (1..3).rev() {
                perm.swap(i, rng.random_range(0..=i));
            }
            let x = leaf(&mut rng, "x", &shape, -1.0, 1.0);
            let w = rand_weights(&mut rng, numel(&shape));
            let params = vec![x.clone()];
            fd_max_rel_err(
                move |t| {
                    let xi = t.watch(&x);
                    let o = t.transpose(xi, &perm)?;
                    weighted_sum(t, o, &w)
                },
                &params,
                h,
            )
        }
        "softmax" => {
            let shape = vec![rng.random_range(1..3usize), rng.random_range(2..5usize)];
            let axis = rng.random_range(0..2usize);
            let x = leaf(&mut rng, "x", &shape, -2.0, 2.0);
            let w = rand_weights(&mut rng, numel(&shape));
            let params = vec![x.clone()];
            fd_max_rel_err(
                move |t| {
                    let xi = t.watch(&x);
                    let o = t.softmax(xi, axis)?;
                    weighted_sum(t, o, &w)
                },
                &params,
                h,
            )
        }
        "dropout" => {
            let shape = vec![rng.random_range(2..5usize), 3];
            let x = leaf(&mut rng, "x", &shape, -1.0, 1.0);
            let w = rand_weights(&mut rng, numel(&shape));
            let mask_seed = rng.random::<u64>();
            let params = vec![x.clone()];
            fd_max_rel_err(
                move |t| {
                    // The mask must be frozen across probes: reseed per call.
                    let mut mask_rng = ChaCha8Rng::seed_from_u64(mask_seed);
                    let xi = t.watch(&x);
                    let o = t.dropout(xi, 0.3, true, &mut mask_rng)?;
                    weighted_sum(t, o, &w)
                },
                &params,
                h,
            )
        }
        "layer_norm" => {
            let (b, c, n, tl) = (2usize, 3usize, 2usize, 2usize);
            let x = leaf(&mut rng, "x", &[b, c, n, tl], -1.0, 1.0);
            let gamma = leaf(&mut rng, "gamma", &[c, n], 0.5, 1.5);
            let beta = leaf(&mut rng, "beta", &[c, n], -0.5, 0.5);
            let w = rand_weights(&mut rng, b * c * n * tl);
            let params = vec![x.clone(), gamma.clone(), beta.clone()];
            fd_max_rel_err(
                move |t| {
                    let xi = t.watch(&x);
                    let gi = t.watch(&gamma);
                    let bi = t.watch(&beta);
                    let o = t.layer_norm(xi, gi, bi, &[1, 2], 1e-5)?;
                    weighted_sum(t, o, &w)
                },
                &params,
                h,
            )
        }
        "normalize_adjacency" => {
            let n = rng.random_range(2..5usize);
            let a = leaf(&mut rng, "a", &[n, n], 0.0, 1.0);
            let w = rand_weights(&mut rng, n * n);
            let params = vec![a.clone()];
            fd_max_rel_err(
                move |t| {
                    let ai = t.watch(&a);
                    let o = t.normalize_adjacency(ai)?;
                    weighted_sum(t, o, &w)
                },
                &params,
                h,
            )
        }
        "index_select" => {
            let rows = rng.random_range(2..5usize);
            let x = leaf(&mut rng, "x", &[rows, 3], -1.0, 1.0);
            let picks: Vec<usize> =
                (0..rng.random_range(1..4usize)).map(|_| rng.random_range(0..rows)).collect();
            let w = rand_weights(&mut rng, picks.len() * 3);
            let params = vec![x.clone()];
            fd_max_rel_err(
                move |t| {
                    let xi = t.watch(&x);
                    let o = t.index_select(xi, 0, &picks)?;
                    weighted_sum(t, o, &w)
                },
                &params,
                h,
            )
        }
        "affine_axis" => {
            let (b, q, n) = (2usize, 2usize, rng.random_range(1..4usize));
            let x = leaf(&mut rng, "x", &[b, q, n], -1.0, 1.0);
            let scale: Vec<f64> = (0..n).map(|_| rng.random_range(0.5..2.0)).collect();
            let shift: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
            let w = rand_weights(&mut rng, b * q * n);
            let params = vec![x.clone()];
            fd_max_rel_err(
                move |t| {
                    let xi = t.watch(&x);
                    let o = t.affine_axis(xi, 2, &scale, &shift)?;
                    weighted_sum(t, o, &w)
                },
                &params,
                h,
            )
        }
        "sum" | "mean" => {
            let shape = vec![rng.random_range(1..5usize), 2];
            let x = leaf(&mut rng, "x", &shape, -1.0, 1.0);
            let is_sum = op == "sum";
            let params = vec![x.clone()];
            fd_max_rel_err(
                move |t| {
                    let xi = t.watch(&x);
                    Ok(if is_sum { t.sum(xi) } else { t.mean(xi) })
                },
                &params,
                h,
            )
        }
        "mixhop" => {
            let layer = MixHopLayer::new("mh", 2, 2, 2, 0.05, true, &mut rng)?;
            let n = 3;
            let a: Vec<f64> = (0..n * n).map(|_| rng.random_range(0.0..1.0)).collect();
            let an = crate::graph_conv::normalize_rows(&a, n);
            let x = leaf(&mut rng, "x", &[1, 2, n, 2], -1.0, 1.0);
            let w = rand_weights(&mut rng, 2 * n * 2);
            let mut params = vec![x.clone()];
            params.extend(layer.params());
            fd_max_rel_err(
                move |t| {
                    let ai = t.constant(an.clone(), &[n, n]);
                    let xi = t.watch(&x);
                    let o = layer.forward(t, xi, ai)?;
                    weighted_sum(t, o, &w)
                },
                &params,
                h,
            )
        }
        "graph_conv" => {
            let gc = GcModule::new("gc", 2, 2, 2, 0.05, true, &mut rng)?;
            let n = 3;
            let a: Vec<f64> = (0..n * n)
                .map(|_| if rng.random::<f64>() < 0.5 { 0.0 } else { rng.random_range(0.2..1.0) })
                .collect();
            let x = leaf(&mut rng, "x", &[1, 2, n, 2], -1.0, 1.0);
            let aent = Param::new("a", a, vec![n, n]);
            let w = rand_weights(&mut rng, 2 * n * 2);
            let mut params = vec![x.clone(), aent.clone()];
            params.extend(gc.params());
            fd_max_rel_err(
                move |t| {
                    let ai = t.watch(&aent);
                    let adj = crate::graph_learning::Adjacency { id: ai, n, k: n };
                    let xi = t.watch(&x);
                    let o = gc.forward(t, xi, &adj)?;
                    weighted_sum(t, o, &w)
                },
                &params,
                h,
            )
        }
        "temporal_conv" => {
            let tc = TcModule::new("tc", 2, 4, 1, true, &mut rng)?;
            let tl = 8;
            let x = leaf(&mut rng, "x", &[1, 2, 2, tl], -1.0, 1.0);
            let w = rand_weights(&mut rng, 4 * 2 * (tl - 6));
            let mut params = vec![x.clone()];
            params.extend(tc.params());
            fd_max_rel_err(
                move |t| {
                    let xi = t.watch(&x);
                    let o = tc.forward(t, xi)?;
                    weighted_sum(t, o, &w)
                },
                &params,
                h,
            )
        }
        "graph_learning" => {
            // Resample until the per-row top-k margin is comfortably larger
            // than the probe step, so the retained index set is constant.
            let n = 4;
            let k = 2;
            for attempt in 0..50u64 {
                let mut lrng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(31).wrapping_add(attempt));
                let learner =
                    GraphLearner::new(GraphMode::UniDirected, n, 3, 3, 1.0, k, 1, &mut lrng)?;
                let mut probe = Tape::new();
                let scores = {
                    let adj_full = GraphLearner {
                        k: n,
                        ..clone_learner(&learner)
                    };
                    let adj = adj_full.compute_adjacency(&mut probe, None)?;
                    probe.data(adj.id).to_vec()
                };
                let mut stable = true;
                for row in scores.chunks(n) {
                    let mut sorted: Vec<f64> = row.to_vec();
                    sorted.sort_by(|a, b| b.partial_cmp(a).unwrap());
                    // Ties among exact zeros are harmless: a zero entry
                    // contributes nothing whichever index the mask keeps.
                    if sorted[k - 1] == 0.0 && sorted[k] == 0.0 {
                        continue;
                    }
                    if (sorted[k - 1] - sorted[k]).abs() < 1e-3 {
                        stable = false;
                        break;
                    }
                }
                if !stable {
                    continue;
                }
                let w = rand_weights(&mut lrng, n * n);
                let params =
                    vec![learner.e1.clone(), learner.e2.clone(), learner.theta1.clone(), learner.theta2.clone()];
                return fd_max_rel_err(
                    move |t| {
                        let adj = learner.compute_adjacency(t, None)?;
                        weighted_sum(t, adj.id, &w)
                    },
                    &params,
                    h,
                );
            }
            Err(Error::Contract("no stable top-k instance found".into()))
        }
        "mtgnn_forward" => {
            // Composed network: quadratic loss of the full forward pass with
            // respect to every trainable parameter, dropout mask frozen.
            let mut cfg = small_config(4);
            cfg.input_len = 14;
            cfg.output_len = 2;
            cfg.channels.start = 4;
            cfg.channels.conv = 4;
            cfg.channels.skip = 4;
            cfg.channels.end = 4;
            cfg.embed_dim = 3;
            cfg.graph_k = 4; // full retention keeps the loss smooth
            cfg.dropout = 0.2;
            let model = seeded_model(cfg, seed)?;
            let x: Vec<f64> = (0..4 * 14).map(|_| rng.random_range(-1.0..1.0)).collect();
            let y: Vec<f64> = (0..2 * 4).map(|_| rng.random_range(-1.0..1.0)).collect();
            let mask_seed = rng.random::<u64>();
            let params = model.params();
            fd_max_rel_err(
                move |t| {
                    let mut drop_rng = ChaCha8Rng::seed_from_u64(mask_seed);
                    let xi = t.constant(x.clone(), &[1, 1, 4, 14]);
                    let adj = model.graph.compute_adjacency(t, None)?;
                    let out = model.forward(t, xi, Some(&adj), None, true, &mut drop_rng)?;
                    let yi = t.constant(y.clone(), &[1, 2, 4]);
                    let d = t.sub(out, yi)?;
                    let sq = t.hadamard(d, d)?;
                    Ok(t.mean(sq))
                },
                &params,
                h,
            )
        }
        other => Err(Error::Config(format!("unknown gradcheck op `{other}`"))),
    }
}

fn clone_learner(l: &GraphLearner) -> GraphLearner {
    GraphLearner {
        mode: l.mode,
        num_nodes: l.num_nodes,
        embed_dim: l.embed_dim,
        hidden_dim: l.hidden_dim,
        alpha: l.alpha,
        k: l.k,
        e1: l.e1.clone(),
        e2: l.e2.clone(),
        theta1: l.theta1.clone(),
        theta2: l.theta2.clone(),
        w_global: l.w_global.clone(),
        w_dyn1: l.w_dyn1.clone(),
        w_dyn2: l.w_dyn2.clone(),
        predefined: l.predefined.clone(),
    }
}

/// Run `instances` random checks per op. `filter` restricts to ops whose
/// name contains the given substring. The composed `mtgnn_forward` check is
/// expensive and runs `instances/4 + 1` times.
pub fn run_suite(seed: u64, filter: Option<&str>, instances: usize) -> Result<Vec<OpReport>> {
    let mut out = Vec::new();
    for &op in ALL_OPS {
        if let Some(f) = filter {
            if !op.contains(f) {
                continue;
            }
        }
        let reps = if op == "mtgnn_forward" { instances / 4 + 1 } else { instances };
        let mut worst = 0.0f64;
        for i in 0..reps {
            let err = check_instance(op, seed.wrapping_add(i as u64 * 7919))?;
            worst = worst.max(err);
        }
        out.push(OpReport { op: op.to_string(), max_rel_err: worst, instances: reps });
    }
    if out.is_empty() {
        return Err(Error::Config(format!(
            "no gradcheck op matches `{}`",
            filter.unwrap_or_default()
        )));
    }
    Ok(out)
}
