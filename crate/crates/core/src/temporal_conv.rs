//! Gated temporal convolution built from dilated inception layers.
//!
//! A dilated inception layer runs four parallel valid (no padding) causal
//! convolutions with temporal widths 2, 3, 6 and 7 sharing one dilation
//! factor. Branch outputs are truncated to the length produced by the
//! widest filter (the last `t − 6d` steps, keeping causality toward the
//! forecast end) and concatenated over channels. The temporal convolution
//! module gates a tanh filter branch with a sigmoid gate branch.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{Param, ParamRef, Tape, TensorId};

/// Temporal widths of the four inception branches.
pub const INCEPTION_WIDTHS: [usize; 4] = [2, 3, 6, 7];

/// Largest branch width; the layer shrinks sequences by `(MAX_WIDTH-1)·d`.
pub const MAX_WIDTH: usize = 7;

pub struct DilatedInceptionLayer {
    /// One kernel per branch, `[c_branch, c_in, 1, width]`.
    pub kernels: Vec<ParamRef>,
    /// One bias per branch, `[c_branch]`.
    pub biases: Vec<ParamRef>,
    pub dilation: usize,
    pub c_in: usize,
    pub c_out: usize,
    /// When false (the no-inception ablation) a single width-7 filter bank
    /// carries the full channel count.
    pub inception: bool,
}

impl DilatedInceptionLayer {
    pub fn new(
        name: &str,
        c_in: usize,
        c_out: usize,
        dilation: usize,
        inception: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if dilation == 0 {
            return Err(Error::Config("dilation must be >= 1".into()));
        }
        let widths: Vec<usize> = if inception {
            if c_out % 4 != 0 {
                return Err(Error::Config(format!(
                    "inception output channels must be divisible by 4, got {c_out}"
                )));
            }
            INCEPTION_WIDTHS.to_vec()
        } else {
            vec![MAX_WIDTH]
        };
        let c_branch = if inception { c_out / 4 } else { c_out };
        let mut kernels = Vec::new();
        let mut biases = Vec::new();
        for w in widths {
            let bound = 1.0 / ((c_in * w) as f64).sqrt();
            kernels.push(Param::uniform(
                format!("{name}.k{w}.weight"),
                &[c_branch, c_in, 1, w],
                -bound,
                bound,
                rng,
            ));
            biases.push(Param::zeros(format!("{name}.k{w}.bias"), &[c_branch]));
        }
        Ok(DilatedInceptionLayer { kernels, biases, dilation, c_in, c_out, inception })
    }

    pub fn params(&self) -> Vec<ParamRef> {
        self.kernels.iter().cloned().chain(self.biases.iter().cloned()).collect()
    }

    /// Minimum input length: the width-7 branch must produce one step.
    pub fn min_input_len(&self) -> usize {
        self.dilation * (MAX_WIDTH - 1) + 1
    }

    /// `z` is `[b, c_in, n, t]`; the output is `[b, c_out, n, t − 6d]`.
    pub fn forward(&self, tape: &mut Tape, z: TensorId) -> Result<TensorId> {
        let shape = tape.shape(z).to_vec();
        if shape.len() != 4 || shape[1] != self.c_in {
            return Err(Error::Dimension(format!(
                "dilated inception expects [b,{},n,t], got {:?}",
                self.c_in, shape
            )));
        }
        let t = shape[3];
        let keep = t
            .checked_sub(self.dilation * (MAX_WIDTH - 1))
            .filter(|&k| k > 0)
            .ok_or(Error::Length { required: self.min_input_len(), got: t })?;
        let mut branches = Vec::with_capacity(self.kernels.len());
        for (kernel, bias) in self.kernels.iter().zip(&self.biases) {
            let kid = tape.watch(kernel);
            let bid = tape.watch(bias);
            let conv = tape.conv1d_dilated(z, kid, self.dilation)?;
            let conv = tape.add_bias(conv, bid, 1)?;
            branches.push(tape.slice_last_steps(conv, keep)?);
        }
        if branches.len() == 1 {
            Ok(branches[0])
        } else {
            tape.concat(&branches, 1)
        }
    }
}

/// Filter/gate pair: `tanh(inception_f(x)) ⊙ sigmoid(inception_g(x))`.
pub struct TcModule {
    pub filter: DilatedInceptionLayer,
    pub gate: DilatedInceptionLayer,
}

impl TcModule {
    pub fn new(
        name: &str,
        c_in: usize,
        c_out: usize,
        dilation: usize,
        inception: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        Ok(TcModule {
            filter: DilatedInceptionLayer::new(
                &format!("{name}.filter"),
                c_in,
                c_out,
                dilation,
                inception,
                rng,
            )?,
            gate: DilatedInceptionLayer::new(
                &format!("{name}.gate"),
                c_in,
                c_out,
                dilation,
                inception,
                rng,
            )?,
        })
    }

    pub fn params(&self) -> Vec<ParamRef> {
        let mut p = self.filter.params();
        p.extend(self.gate.params());
        p
    }

    pub fn forward(&self, tape: &mut Tape, x: TensorId) -> Result<TensorId> {
        let f = self.filter.forward(tape, x)?;
        let f = tape.tanh(f);
        let g = self.gate.forward(tape, x)?;
        let g = tape.sigmoid(g);
        tape.hadamard(f, g)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FieldMode {
    /// Constant dilation 1 across layers.
    Linear,
    /// Dilation grows by a factor q per layer.
    Exponential,
}

/// Receptive field of a stack of `m` width-`c` convolution layers.
/// Linear: `R = m(c−1)+1`. Exponential with rate `q > 1`:
/// `R = 1 + (c−1)(qᵐ−1)/(q−1)`.
pub fn receptive_field(m: usize, c: usize, q: usize, mode: FieldMode) -> Result<usize> {
    if q == 0 {
        return Err(Error::Config("dilation rate q must be >= 1".into()));
    }
    if m == 0 || c < 2 {
        return Err(Error::Config(format!(
            "receptive field needs m >= 1 layers of width c >= 2, got m={m}, c={c}"
        )));
    }
    match mode {
        FieldMode::Linear => Ok(m * (c - 1) + 1),
        FieldMode::Exponential => {
            if q == 1 {
                // q = 1 degenerates to the linear formula.
                return Ok(m * (c - 1) + 1);
            }
            let qm = q.checked_pow(m as u32).ok_or_else(|| {
                Error::Config(format!("receptive field overflow: q={q}, m={m}"))
            })?;
            Ok(1 + (c - 1) * (qm - 1) / (q - 1))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    /// Scalar-loop oracle of the dilated inception layer: four valid dilated
    /// convolutions, right-truncated, concatenated over channels.
    fn oracle_inception(
        z: &[f64],
        b: usize,
        c_in: usize,
        n: usize,
        t: usize,
        kernels: &[Vec<f64>],
        biases: &[Vec<f64>],
        c_branch: usize,
        d: usize,
    ) -> Vec<f64> {
        let keep = t - d * 6;
        let widths = INCEPTION_WIDTHS;
        let c_out = c_branch * 4;
        let mut out = vec![0.0; b * c_out * n * keep];
        for (bi, (kern, bias)) in kernels.iter().zip(biases).enumerate() {
            let w = widths[bi];
            let branch_len = t - d * (w - 1);
            for bb in 0..b {
                for o in 0..c_branch {
                    for v in 0..n {
                        for j in 0..keep {
                            // Right-aligned truncation: drop the first
                            // branch_len - keep outputs.
                            let jj = j + (branch_len - keep);
                            let mut acc = bias[o];
                            for c in 0..c_in {
                                for s in 0..w {
                                    // y(τ) = Σ f(s)·z(τ − d·s), τ = jj + d(w−1)
                                    let tau = jj + d * (w - 1) - d * s;
                                    acc += kern[(o * c_in + c) * w + s]
                                        * z[((bb * c_in + c) * n + v) * t + tau];
                                }
                            }
                            let oc = bi * c_branch + o;
                            out[((bb * c_out + oc) * n + v) * keep + j] = acc;
                        }
                    }
                }
            }
        }
        out
    }

    #[test]
    fn identity_kernels_return_truncated_input() {
        // Width-1 behaviour is modelled by a delta at s=0: set each branch's
        // kernel to weight 1 on the current step and 0 elsewhere.
        let mut r = rng(1);
        let layer = DilatedInceptionLayer::new("tc", 1, 4, 1, true, &mut r).unwrap();
        for (kernel, w) in layer.kernels.iter().zip(INCEPTION_WIDTHS) {
            let mut data = vec![0.0; w];
            data[0] = 1.0; // f(0) = 1 taps the current step
            kernel.borrow_mut().data = data;
        }
        let mut tape = Tape::new();
        let x: Vec<f64> = (1..=8).map(|v| v as f64).collect();
        let xid = tape.constant(x, &[1, 1, 1, 8]);
        let out = layer.forward(&mut tape, xid).unwrap();
        assert_eq!(tape.shape(out), &[1, 4, 1, 2]);
        // All four channel groups equal the last 2 input steps.
        for g in 0..4 {
            assert_eq!(&tape.data(out)[g * 2..(g + 1) * 2], &[7.0, 8.0]);
        }
    }

    #[test]
    fn output_length_formula() {
        let mut r = rng(2);
        let layer = DilatedInceptionLayer::new("tc", 1, 4, 2, true, &mut r).unwrap();
        let mut tape = Tape::new();
        let xid = tape.constant(vec![0.5; 13], &[1, 1, 1, 13]);
        let out = layer.forward(&mut tape, xid).unwrap();
        assert_eq!(tape.shape(out)[3], 1); // 13 − 2·6 = 1
    }

    #[test]
    fn too_short_reports_required_minimum() {
        let mut r = rng(3);
        let layer = DilatedInceptionLayer::new("tc", 1, 4, 2, true, &mut r).unwrap();
        let mut tape = Tape::new();
        let xid = tape.constant(vec![0.0; 12], &[1, 1, 1, 12]);
        match layer.forward(&mut tape, xid) {
            Err(Error::Length { required, got }) => {
                assert_eq!(required, 13);
                assert_eq!(got, 12);
            }
            other => panic!("expected length error, got {other:?}"),
        }
    }

    #[test]
    fn matches_scalar_loop_oracle() {
        let mut r = rng(5);
        for trial in 0..5 {
            let d = 1 + trial % 2;
            let layer = DilatedInceptionLayer::new("tc", 3, 8, d, true, &mut r).unwrap();
            let (b, n, t) = (2, 2, 6 * d + 4);
            let z: Vec<f64> = (0..b * 3 * n * t).map(|_| r.random_range(-1.0..1.0)).collect();
            let mut tape = Tape::new();
            let zid = tape.constant(z.clone(), &[b, 3, n, t]);
            let out = layer.forward(&mut tape, zid).unwrap();
            let kernels: Vec<Vec<f64>> =
                layer.kernels.iter().map(|k| k.borrow().data.clone()).collect();
            let biases: Vec<Vec<f64>> =
                layer.biases.iter().map(|k| k.borrow().data.clone()).collect();
            let want = oracle_inception(&z, b, 3, n, t, &kernels, &biases, 2, d);
            for (g, w) in tape.data(out).iter().zip(&want) {
                assert!((g - w).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn gate_limits() {
        let mut r = rng(7);
        let tc = TcModule::new("tc", 1, 4, 1, true, &mut r).unwrap();
        // Strongly negative gate bias closes the gate: output ~ 0.
        for b in &tc.gate.biases {
            b.borrow_mut().data.fill(-40.0);
        }
        for k in &tc.gate.kernels {
            k.borrow_mut().data.fill(0.0);
        }
        let mut tape = Tape::new();
        let x: Vec<f64> = (0..10).map(|_| r.random_range(-1.0..1.0)).collect();
        let xid = tape.constant(x.clone(), &[1, 1, 1, 10]);
        let out = tc.forward(&mut tape, xid).unwrap();
        assert!(tape.data(out).iter().all(|&v| v.abs() < 1e-12));

        // Zero gate pre-activation: output = 0.5 · tanh(filter branch).
        for b in &tc.gate.biases {
            b.borrow_mut().data.fill(0.0);
        }
        let mut tape = Tape::new();
        let xid = tape.constant(x, &[1, 1, 1, 10]);
        let out = tc.forward(&mut tape, xid).unwrap();
        let f = tc.filter.forward(&mut tape, xid).unwrap();
        let want: Vec<f64> = tape.data(f).iter().map(|v| 0.5 * v.tanh()).collect();
        for (g, w) in tape.data(out).iter().zip(&want) {
            assert!((g - w).abs() <= 1e-12);
        }
    }

    #[test]
    fn output_bounded_by_one() {
        let mut r = rng(11);
        let tc = TcModule::new("tc", 2, 4, 1, true, &mut r).unwrap();
        for _ in 0..5 {
            let mut tape = Tape::new();
            let x: Vec<f64> = (0..2 * 2 * 9).map(|_| r.random_range(-50.0..50.0)).collect();
            let xid = tape.constant(x, &[1, 2, 2, 9]);
            let out = tc.forward(&mut tape, xid).unwrap();
            assert!(tape.data(out).iter().all(|&v| v.abs() <= 1.0));
        }
    }

    #[test]
    fn receptive_field_examples() {
        // Single small layer.
        assert_eq!(receptive_field(1, 2, 1, FieldMode::Linear).unwrap(), 2);
        assert_eq!(receptive_field(1, 2, 2, FieldMode::Exponential).unwrap(), 2);
        // Deep dilated stack covers the 168-step single-step window.
        assert_eq!(receptive_field(5, 7, 2, FieldMode::Exponential).unwrap(), 187);
        assert!(receptive_field(5, 7, 2, FieldMode::Exponential).unwrap() >= 168);
        // Undilated stack covers the 12-step multi-step window.
        assert_eq!(receptive_field(3, 7, 1, FieldMode::Linear).unwrap(), 19);
        assert!(receptive_field(3, 7, 1, FieldMode::Linear).unwrap() >= 12);
    }

    #[test]
    fn receptive_field_grid_is_exact() {
        for m in 1..=6usize {
            for c in 2..=7usize {
                assert_eq!(receptive_field(m, c, 1, FieldMode::Linear).unwrap(), m * (c - 1) + 1);
                for q in 2..=3usize {
                    let mut want = 1usize;
                    let mut d = 1usize;
                    for _ in 0..m {
                        want += (c - 1) * d;
                        d *= q;
                    }
                    assert_eq!(
                        receptive_field(m, c, q, FieldMode::Exponential).unwrap(),
                        want,
                        "m={m} c={c} q={q}"
                    );
                }
            }
        }
    }

    #[test]
    fn zero_rate_is_config_error() {
        assert!(matches!(
            receptive_field(3, 7, 0, FieldMode::Exponential),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn causality_perturbation() {
        // Output at position τ depends only on input positions <= τ.
        let mut r = rng(13);
        let tc = TcModule::new("tc", 1, 4, 1, true, &mut r).unwrap();
        let t = 10;
        let base: Vec<f64> = (0..t).map(|_| r.random_range(-1.0..1.0)).collect();
        let eval = |x: &[f64]| -> Vec<f64> {
            let mut tape = Tape::new();
            let xid = tape.constant(x.to_vec(), &[1, 1, 1, t]);
            let out = tc.forward(&mut tape, xid).unwrap();
            tape.data(out).to_vec()
        };
        let y0 = eval(&base);
        let keep = t - 6;
        // Perturbing the final input step must leave all earlier outputs
        // unchanged (output j corresponds to input position j + 6).
        let mut poked = base.clone();
        poked[t - 1] += 3.0;
        let y1 = eval(&poked);
        for ch in 0..4 {
            for j in 0..keep - 1 {
                assert_eq!(y0[ch * keep + j], y1[ch * keep + j]);
            }
        }
    }

    #[test]
    fn two_layer_stack_covers_lag_twelve() {
        // A width-7 layer followed by a width-6 layer has a temporal
        // footprint reaching lag 12: the gradient of the final output w.r.t.
        // the input 12 steps back is nonzero.
        let mut r = rng(17);
        let l7 = DilatedInceptionLayer::new("l7", 1, 4, 1, true, &mut r).unwrap();
        let l6 = DilatedInceptionLayer::new("l6", 4, 4, 1, true, &mut r).unwrap();
        let t = 13;
        let mut tape = Tape::new();
        let x: Vec<f64> = (0..t).map(|_| r.random_range(-1.0..1.0)).collect();
        let xid = tape.leaf(x, &[1, 1, 1, t]);
        let h = l7.forward(&mut tape, xid).unwrap();
        let out = l6.forward(&mut tape, h).unwrap();
        assert_eq!(tape.shape(out)[3], 1);
        let s = tape.sum(out);
        tape.backward(s).unwrap();
        let g = tape.grad(xid).unwrap();
        // Final output sits at input position t-1 = 12; lag 12 is position 0.
        assert!(g[0].abs() > 0.0, "no gradient at lag 12");
    }

    #[test]
    fn no_inception_uses_single_width7_bank() {
        let mut r = rng(19);
        let layer = DilatedInceptionLayer::new("tc", 2, 6, 1, false, &mut r).unwrap();
        assert_eq!(layer.kernels.len(), 1);
        assert_eq!(layer.kernels[0].borrow().shape, vec![6, 2, 1, 7]);
        let mut tape = Tape::new();
        let xid = tape.constant(vec![0.25; 2 * 8], &[1, 2, 1, 8]);
        let out = layer.forward(&mut tape, xid).unwrap();
        assert_eq!(tape.shape(out), &[1, 6, 1, 2]);
    }

    #[test]
    fn odd_channels_rejected_with_inception() {
        let mut r = rng(23);
        assert!(matches!(
            DilatedInceptionLayer::new("tc", 2, 6, 1, true, &mut r),
            Err(Error::Config(_))
        ));
    }
}
