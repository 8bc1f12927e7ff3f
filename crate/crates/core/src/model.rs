//! The assembled forecasting network.
//!
//! A 1x1 convolution projects inputs into a latent space, then `m` blocks
//! interleave a gated temporal convolution with a graph convolution. Each
//! block adds a residual connection from its input to the graph convolution
//! output (right-truncated to the shrunken sequence length), taps a skip
//! connection after the temporal convolution, and applies layer
//! normalization over the (channel, time) axes per node. Skip
//! connections are 1xL convolutions that standardize every tap to temporal
//! length one; a terminal tap after the last block keeps the final graph
//! convolution on the loss path. Their sum feeds two 1x1 output convolutions
//! separated by ReLU, producing one value per forecast step and node.
//!
//! Inputs shorter than the stack's receptive field are left-padded with
//! zeros by default (`pad_input`); with padding disabled such inputs are
//! rejected.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph_conv::GcModule;
use crate::graph_learning::{Adjacency, GraphLearner, GraphMode};
use crate::temporal_conv::{receptive_field, FieldMode, TcModule, MAX_WIDTH};
use crate::tensor::{Param, ParamRef, Tape, TensorId};

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Channels {
    /// Width after the start convolution; also the residual width.
    pub start: usize,
    /// Output width of each temporal convolution.
    pub conv: usize,
    /// Width of every skip connection tap.
    pub skip: usize,
    /// Hidden width of the output module.
    pub end: usize,
}

#[derive(Debug, Clone)]
pub struct MtgnnConfig {
    pub num_nodes: usize,
    pub in_dim: usize,
    pub input_len: usize,
    pub output_len: usize,
    pub layers: usize,
    pub dilation_rate: usize,
    pub channels: Channels,
    pub mixhop_depth: usize,
    pub mixhop_beta: f64,
    pub graph_mode: GraphMode,
    pub graph_k: usize,
    pub graph_alpha: f64,
    pub embed_dim: usize,
    pub dropout: f64,
    pub use_gc: bool,
    pub use_mixhop_selection: bool,
    pub use_inception: bool,
    pub use_curriculum: bool,
    pub pad_input: bool,
}

impl MtgnnConfig {
    /// Structural checks that do not need the node count bound yet.
    pub fn validate(&self) -> Result<()> {
        if self.input_len == 0 || self.output_len == 0 {
            return Err(Error::Config("input_len and output_len must be >= 1".into()));
        }
        if self.layers == 0 {
            return Err(Error::Config("layers must be >= 1".into()));
        }
        if self.dilation_rate == 0 {
            return Err(Error::Config("dilation_rate must be >= 1".into()));
        }
        if self.use_inception && self.channels.conv % 4 != 0 {
            return Err(Error::Config(format!(
                "conv_channels must be divisible by 4 with inception, got {}",
                self.channels.conv
            )));
        }
        if !self.use_mixhop_selection && self.channels.conv != self.channels.start {
            return Err(Error::Config(format!(
                "without mix-hop selection the propagated states feed the residual path \
                 directly, so conv_channels ({}) must equal start_channels ({})",
                self.channels.conv, self.channels.start
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout must be in [0,1), got {}", self.dropout)));
        }
        if !(0.0..=1.0).contains(&self.mixhop_beta) {
            return Err(Error::Config(format!(
                "mixhop_beta must be in [0,1], got {}",
                self.mixhop_beta
            )));
        }
        if self.mixhop_depth == 0 {
            return Err(Error::Config("mixhop_depth must be >= 1".into()));
        }
        if self.graph_alpha <= 0.0 {
            return Err(Error::Config(format!(
                "graph_alpha must be > 0, got {}",
                self.graph_alpha
            )));
        }
        if [self.channels.start, self.channels.conv, self.channels.skip, self.channels.end]
            .iter()
            .any(|&c| c == 0)
        {
            return Err(Error::Config("channel widths must be >= 1".into()));
        }
        Ok(())
    }

    /// Checks that require the node count to be bound.
    pub fn validate_bound(&self) -> Result<()> {
        self.validate()?;
        if self.num_nodes == 0 {
            return Err(Error::Config("num_nodes must be bound before building a model".into()));
        }
        if self.graph_k > self.num_nodes {
            return Err(Error::Config(format!(
                "graph_k ({}) exceeds the node count ({})",
                self.graph_k, self.num_nodes
            )));
        }
        if !self.pad_input && self.input_len < self.receptive_field()? {
            return Err(Error::Length {
                required: self.receptive_field()?,
                got: self.input_len,
            });
        }
        Ok(())
    }

    /// Receptive field of the configured temporal stack (max filter width 7).
    pub fn receptive_field(&self) -> Result<usize> {
        let mode = if self.dilation_rate == 1 { FieldMode::Linear } else { FieldMode::Exponential };
        receptive_field(self.layers, MAX_WIDTH, self.dilation_rate, mode)
    }

    /// Temporal length fed to the first block: the input length, left-padded
    /// up to the receptive field when padding is enabled.
    pub fn effective_input_len(&self) -> Result<usize> {
        let r = self.receptive_field()?;
        if self.input_len >= r {
            Ok(self.input_len)
        } else if self.pad_input {
            Ok(r)
        } else {
            Err(Error::Length { required: r, got: self.input_len })
        }
    }
}

/// A bias-carrying convolution wrapper (1x1 projections and 1xL skip taps).
pub struct ConvLayer {
    pub kernel: ParamRef,
    pub bias: ParamRef,
}

impl ConvLayer {
    fn new(name: &str, c_out: usize, c_in: usize, width: usize, rng: &mut ChaCha8Rng) -> ConvLayer {
        let bound = 1.0 / ((c_in * width) as f64).sqrt();
        ConvLayer {
            kernel: Param::uniform(
                format!("{name}.weight"),
                &[c_out, c_in, 1, width],
                -bound,
                bound,
                rng,
            ),
            bias: Param::zeros(format!("{name}.bias"), &[c_out]),
        }
    }

    fn forward(&self, tape: &mut Tape, x: TensorId) -> Result<TensorId> {
        let k = tape.watch(&self.kernel);
        let b = tape.watch(&self.bias);
        let y = tape.conv1d_dilated(x, k, 1)?;
        tape.add_bias(y, b, 1)
    }

    fn params(&self) -> Vec<ParamRef> {
        vec![self.kernel.clone(), self.bias.clone()]
    }
}

/// Spatial stage of one block: mix-hop graph convolution, or a 1x1 linear
/// map when the graph convolution is ablated.
enum SpatialStage {
    Graph(GcModule),
    Linear(ConvLayer),
}

pub struct MtgnnBlock {
    pub tc: TcModule,
    spatial: SpatialStage,
    pub skip: ConvLayer,
    pub ln_gamma: ParamRef,
    pub ln_beta: ParamRef,
    pub dilation: usize,
    /// Temporal length of this block's output (and of its skip tap input).
    pub out_len: usize,
}

pub struct MtgnnModel {
    pub cfg: MtgnnConfig,
    pub graph: GraphLearner,
    pub start: ConvLayer,
    pub blocks: Vec<MtgnnBlock>,
    /// Terminal skip tap on the final block output.
    pub skip_end: ConvLayer,
    pub end1: ConvLayer,
    pub end2: ConvLayer,
}

impl MtgnnModel {
    pub fn new(cfg: MtgnnConfig, rng: &mut ChaCha8Rng) -> Result<MtgnnModel> {
        cfg.validate_bound()?;
        let ch = cfg.channels;
        let graph = GraphLearner::new(
            cfg.graph_mode,
            cfg.num_nodes,
            cfg.embed_dim,
            cfg.embed_dim,
            cfg.graph_alpha,
            cfg.graph_k,
            cfg.in_dim,
            rng,
        )?;
        let start = ConvLayer::new("start_conv", ch.start, cfg.in_dim, 1, rng);
        let mut blocks = Vec::with_capacity(cfg.layers);
        let mut len = cfg.effective_input_len()?;
        let mut dilation = 1usize;
        for i in 0..cfg.layers {
            let name = format!("block{i}");
            let tc = TcModule::new(&format!("{name}.tc"), ch.start, ch.conv, dilation, cfg.use_inception, rng)?;
            let out_len = len
                .checked_sub(dilation * (MAX_WIDTH - 1))
                .filter(|&l| l > 0)
                .ok_or(Error::Length { required: dilation * (MAX_WIDTH - 1) + 1, got: len })?;
            let spatial = if cfg.use_gc {
                SpatialStage::Graph(GcModule::new(
                    &format!("{name}.gc"),
                    ch.conv,
                    ch.start,
                    cfg.mixhop_depth,
                    cfg.mixhop_beta,
                    cfg.use_mixhop_selection,
                    rng,
                )?)
            } else {
                SpatialStage::Linear(ConvLayer::new(&format!("{name}.gc_linear"), ch.start, ch.conv, 1, rng))
            };
            let skip = ConvLayer::new(&format!("{name}.skip"), ch.skip, ch.conv, out_len, rng);
            blocks.push(MtgnnBlock {
                tc,
                spatial,
                skip,
                ln_gamma: Param::ones(format!("{name}.norm.gamma"), &[ch.start, out_len]),
                ln_beta: Param::zeros(format!("{name}.norm.beta"), &[ch.start, out_len]),
                dilation,
                out_len,
            });
            len = out_len;
            dilation *= cfg.dilation_rate;
        }
        let skip_end = ConvLayer::new("skip_end", ch.skip, ch.start, len, rng);
        let end1 = ConvLayer::new("end_conv1", ch.end, ch.skip, 1, rng);
        let end2 = ConvLayer::new("end_conv2", cfg.output_len, ch.end, 1, rng);
        Ok(MtgnnModel { cfg, graph, start, blocks, skip_end, end1, end2 })
    }

    /// All parameters of the current configuration, in a stable order.
    pub fn params(&self) -> Vec<ParamRef> {
        let mut out = self.graph.params();
        out.extend(self.start.params());
        for b in &self.blocks {
            out.extend(b.tc.params());
            match &b.spatial {
                SpatialStage::Graph(gc) => out.extend(gc.params()),
                SpatialStage::Linear(l) => out.extend(l.params()),
            }
            out.extend(b.skip.params());
            out.push(b.ln_gamma.clone());
            out.push(b.ln_beta.clone());
        }
        out.extend(self.skip_end.params());
        out.extend(self.end1.params());
        out.extend(self.end2.params());
        out
    }

    /// Trainable scalar count per parameter plus the total.
    pub fn count_parameters(&self) -> (Vec<(String, usize)>, usize) {
        let mut per = Vec::new();
        let mut total = 0usize;
        for p in self.params() {
            let p = p.borrow();
            if p.trainable {
                per.push((p.name.clone(), p.numel()));
                total += p.numel();
            }
        }
        (per, total)
    }

    /// Forward pass. `x` is `[b, in_dim, n, input_len]` where `n` is the
    /// full node count or the length of `nodes` when training on a sampled
    /// subset. Static-mode adjacencies are computed by the caller once per
    /// iteration; dynamic mode derives one graph per window internally.
    pub fn forward(
        &self,
        tape: &mut Tape,
        x: TensorId,
        adjacency: Option<&Adjacency>,
        nodes: Option<&[usize]>,
        training: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<TensorId> {
        let shape = tape.shape(x).to_vec();
        if shape.len() != 4 || shape[1] != self.cfg.in_dim {
            return Err(Error::Dimension(format!(
                "model input must be [b,{},n,t], got {:?}",
                self.cfg.in_dim, shape
            )));
        }
        let n = shape[2];
        if let Some(idx) = nodes {
            if idx.len() != n {
                return Err(Error::Dimension(format!(
                    "node subset has {} entries but input carries {n} nodes",
                    idx.len()
                )));
            }
        } else if n != self.cfg.num_nodes {
            return Err(Error::Dimension(format!(
                "input carries {n} nodes, model expects {}",
                self.cfg.num_nodes
            )));
        }
        if shape[3] != self.cfg.input_len {
            return Err(Error::Length { required: self.cfg.input_len, got: shape[3] });
        }
        let eff = self.cfg.effective_input_len()?;
        let mut h = if eff > shape[3] {
            let pad = tape.constant(
                vec![0.0; shape[0] * shape[1] * n * (eff - shape[3])],
                &[shape[0], shape[1], n, eff - shape[3]],
            );
            tape.concat(&[pad, x], 3)?
        } else {
            x
        };

        let adjacency = match (self.cfg.graph_mode, adjacency) {
            (GraphMode::Dynamic, _) => {
                let last = tape.slice_last_steps(x, 1)?; // [b,D,n,1]
                let squeezed = tape.reshape(last, &[shape[0], shape[1], n])?;
                let feats = tape.transpose(squeezed, &[0, 2, 1])?; // [b,n,D]
                self.graph.compute_adjacency_dynamic(tape, feats)?
            }
            (_, Some(a)) => *a,
            (_, None) => {
                return Err(Error::MissingInput(
                    "static graph modes need a precomputed adjacency".into(),
                ))
            }
        };

        h = self.start.forward(tape, h)?;
        let mut skip_sum: Option<TensorId> = None;
        for block in &self.blocks {
            let residual = h;
            h = block.tc.forward(tape, h)?;
            h = tape.dropout(h, self.cfg.dropout, training, rng)?;
            let tap = block.skip.forward(tape, h)?;
            skip_sum = Some(match skip_sum {
                None => tap,
                Some(acc) => tape.add(acc, tap)?,
            });
            h = match &block.spatial {
                SpatialStage::Graph(gc) => gc.forward(tape, h, &adjacency)?,
                SpatialStage::Linear(l) => l.forward(tape, h)?,
            };
            let res = tape.slice_last_steps(residual, block.out_len)?;
            h = tape.add(h, res)?;
            // Normalization statistics pool over (channel, time) per node,
            // never across nodes: temporal structure survives and ablating
            // the graph convolution truly severs spatial information flow.
            let gamma = tape.watch(&block.ln_gamma);
            let beta = tape.watch(&block.ln_beta);
            h = tape.layer_norm(h, gamma, beta, &[1, 3], LAYER_NORM_EPS)?;
        }
        let tap_end = self.skip_end.forward(tape, h)?;
        let s = tape.add(skip_sum.expect("at least one block"), tap_end)?;
        let s = tape.relu(s);
        let s = self.end1.forward(tape, s)?;
        let s = tape.relu(s);
        let out = self.end2.forward(tape, s)?; // [b, Q, n, 1]
        tape.reshape(out, &[shape[0], self.cfg.output_len, n])
    }
}

/// Convenience container for tests and tools: deterministic model factory.
pub fn seeded_model(cfg: MtgnnConfig, seed: u64) -> Result<MtgnnModel> {
    use rand::SeedableRng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    MtgnnModel::new(cfg, &mut rng)
}

/// A small configuration used across tests; callers override fields.
pub fn small_config(num_nodes: usize) -> MtgnnConfig {
    MtgnnConfig {
        num_nodes,
        in_dim: 1,
        input_len: 16,
        output_len: 3,
        layers: 2,
        dilation_rate: 1,
        channels: Channels { start: 16, conv: 16, skip: 16, end: 32 },
        mixhop_depth: 2,
        mixhop_beta: 0.05,
        graph_mode: GraphMode::UniDirected,
        graph_k: 3.min(num_nodes),
        graph_alpha: 3.0,
        embed_dim: 8,
        dropout: 0.3,
        use_gc: true,
        use_mixhop_selection: true,
        use_inception: true,
        use_curriculum: true,
        pad_input: true,
    }
}
