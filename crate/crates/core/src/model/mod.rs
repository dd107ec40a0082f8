//! The detector: a token encoder, a paired-query instance decoder with box
//! heads, the dual hypergraph bridge, and an interaction decoder.
//!
//! ```
//! use nvidehr::model::{Model, ModelConfig};
//! use nvidehr::{Tape, Tensor};
//!
//! let cfg = ModelConfig::tiny();
//! let model = Model::new(cfg.clone()).unwrap();
//! let tokens = Tensor::zeros(&[cfg.token_count(), cfg.token_dim]);
//! let mut tape = Tape::new();
//! let out = model.forward(&mut tape, &tokens).unwrap();
//! assert_eq!(tape.value(out.logits).shape(), &[4, 22]);
//! ```

mod config;
mod output;
mod weights;

use std::f64::consts::PI;
use std::path::Path;

pub use config::ModelConfig;
pub use output::ModelOutput;
pub use weights::{Weights, CHECKPOINT_MAGIC};

use crate::error::{Error, Result, ResultExt};
use crate::hypergraph::{multi_scale_forward, BranchParams, MlpParams, MultiScaleHypergraph};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use weights::{Attention, Block, Branch, Layout, Linear, Norm};

/// Test hooks for the forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ForwardOptions {
    /// Add the sinusoidal position signal to encoder tokens.
    pub positions: bool,
    /// Replace every attention distribution with the uniform one.
    pub uniform_attention: bool,
}

impl Default for ForwardOptions {
    fn default() -> Self {
        ForwardOptions {
            positions: true,
            uniform_attention: false,
        }
    }
}

/// Which of the paired query sets.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    Individual,
    Group,
}

#[derive(Debug, Clone)]
pub struct Model {
    config: ModelConfig,
    layout: Layout,
    weights: Weights,
}

/// Intermediate results of one forward pass.
#[derive(Debug, Clone)]
pub struct Trace {
    pub output: ModelOutput,
    pub memory: Var,
    pub instance_h: Var,
    pub instance_g: Var,
    pub graphs_h: MultiScaleHypergraph,
    pub graphs_g: MultiScaleHypergraph,
    pub fused: Var,
}

/// Fixed 2-D sinusoidal signal: the first half of the channels encodes the
/// column, the second half the row.
pub fn position_signal(grid_w: usize, grid_h: usize, channels: usize) -> Tensor {
    let half = channels / 2;
    let mut t = Tensor::zeros(&[grid_w * grid_h, channels]);
    for y in 0..grid_h {
        for x in 0..grid_w {
            let row = y * grid_w + x;
            let coords = [(x as f64 + 0.5) / grid_w as f64, (y as f64 + 0.5) / grid_h as f64];
            for (part, coord) in coords.iter().enumerate() {
                for i in 0..half {
                    let freq = 10000f64.powf((2 * (i / 2)) as f64 / half as f64);
                    let a = coord * 2.0 * PI / freq;
                    t.set(row, part * half + i, if i % 2 == 0 { a.sin() } else { a.cos() });
                }
            }
        }
    }
    t
}

/// `Q_n = (F_h + F_g) / 2`.
pub fn fuse_queries(tape: &mut Tape, f_h: Var, f_g: Var) -> Result<Var> {
    let sum = tape.add(f_h, f_g)?;
    tape.scale(sum, 0.5)
}

impl Model {
    /// Freshly initialized weights from `config.seed`.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let (layout, weights) = weights::build(&config);
        Ok(Model {
            config,
            layout,
            weights,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn weights(&self) -> &Weights {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut Weights {
        &mut self.weights
    }

    pub fn write_to(&self, w: impl std::io::Write) -> Result<()> {
        self.weights.write_to(&self.config, w)
    }

    /// Reads a checkpoint. Architecture comes from the file; objective
    /// settings and seed from `base`.
    pub fn read_from(base: &ModelConfig, r: impl std::io::Read) -> Result<Self> {
        let (config, layout, weights) = Weights::read_from(base, r)?;
        Ok(Model {
            config,
            layout,
            weights,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        self.weights
            .save(&self.config, path)
            .map_err(|e| e.context(format!("writing checkpoint {}", path.display())))
    }

    pub fn load(base: &ModelConfig, path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let open = || -> Result<Self> {
            let f = std::io::BufReader::new(std::fs::File::open(path)?);
            Self::read_from(base, f)
        };
        open().map_err(|e| e.context(format!("reading checkpoint {}", path.display())))
    }

    /// Places every weight on the tape, as gradient leaves if `trainable`.
    pub fn bind(&self, tape: &mut Tape, trainable: bool, options: ForwardOptions) -> Bound<'_> {
        let vars = self
            .weights
            .tensors()
            .iter()
            .map(|t| tape.leaf(t.clone(), trainable))
            .collect();
        Bound {
            model: self,
            vars,
            options,
        }
    }

    /// Uses caller-supplied variables (one per weight, layout order) in
    /// place of the stored weights.
    pub fn bind_vars(&self, tape: &Tape, vars: Vec<Var>, options: ForwardOptions) -> Result<Bound<'_>> {
        if vars.len() != self.weights.len() {
            return Err(Error::contract(format!("expected {} weight variables, got {}", self.weights.len(), vars.len())));
        }
        for ((v, w), name) in vars.iter().zip(self.weights.tensors()).zip(self.weights.names()) {
            if tape.value(*v).shape() != w.shape() {
                return Err(Error::contract(format!("variable for {name} has shape {:?}", tape.value(*v).shape())));
            }
        }
        Ok(Bound {
            model: self,
            vars,
            options,
        })
    }

    /// Inference forward pass with default options.
    pub fn forward(&self, tape: &mut Tape, tokens: &Tensor) -> Result<ModelOutput> {
        self.bind(tape, false, ForwardOptions::default()).forward(tape, tokens)
    }
}

/// A model whose weights live on a particular tape.
#[derive(Debug, Clone)]
pub struct Bound<'m> {
    model: &'m Model,
    vars: Vec<Var>,
    options: ForwardOptions,
}

impl Bound<'_> {
    /// Weight variables in layout order (matching [`Weights::names`]).
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    pub fn var(&self, name: &str) -> Option<Var> {
        self.model.weights.names().iter().position(|n| n == name).map(|i| self.vars[i])
    }

    /// The learnable `(Q_h, Q_g, P_pos)` tables.
    pub fn queries(&self) -> (Var, Var, Var) {
        let l = &self.model.layout;
        (self.vars[l.query_h], self.vars[l.query_g], self.vars[l.position])
    }

    fn linear(&self, tape: &mut Tape, x: Var, l: Linear) -> Result<Var> {
        let y = tape.matmul(x, self.vars[l.w])?;
        tape.add_row(y, self.vars[l.b])
    }

    fn norm(&self, tape: &mut Tape, x: Var, n: Norm) -> Result<Var> {
        tape.layer_norm(x, self.vars[n.gain], self.vars[n.bias])
    }

    fn attention(&self, tape: &mut Tape, x: Var, memory: Var, a: &Attention) -> Result<Var> {
        let cfg = &self.model.config;
        let dh = cfg.head_dim();
        let q = self.linear(tape, x, a.q)?;
        let k = self.linear(tape, memory, a.k)?;
        let v = self.linear(tape, memory, a.v)?;
        let rows = tape.value(x).rows();
        let keys = tape.value(memory).rows();
        let mut heads = Vec::with_capacity(cfg.heads);
        for h in 0..cfg.heads {
            let range = (h * dh, (h + 1) * dh);
            let vh = tape.slice_cols(v, range.0, range.1)?;
            let weights = if self.options.uniform_attention {
                tape.constant(Tensor::full(&[rows, keys], 1.0 / keys as f64))
            } else {
                let qh = tape.slice_cols(q, range.0, range.1)?;
                let kh = tape.slice_cols(k, range.0, range.1)?;
                let kt = tape.transpose(kh)?;
                let scores = tape.matmul(qh, kt)?;
                let scores = tape.scale(scores, 1.0 / (dh as f64).sqrt())?;
                tape.softmax(scores, 1)?
            };
            heads.push(tape.matmul(weights, vh)?);
        }
        let joined = if heads.len() == 1 { heads[0] } else { tape.concat(&heads, 1)? };
        self.linear(tape, joined, a.out)
    }

    /// Self-attention over `x`, or over each of `groups` row ranges alone.
    fn self_attention(&self, tape: &mut Tape, x: Var, a: &Attention, groups: Option<usize>) -> Result<Var> {
        match groups {
            None => self.attention(tape, x, x, a),
            Some(split) => {
                let n = tape.value(x).rows();
                let first: Vec<usize> = (0..split).collect();
                let second: Vec<usize> = (split..n).collect();
                let top = tape.select_rows(x, &first)?;
                let bottom = tape.select_rows(x, &second)?;
                let top = self.attention(tape, top, top, a)?;
                let bottom = self.attention(tape, bottom, bottom, a)?;
                tape.concat(&[top, bottom], 0)
            }
        }
    }

    fn block(&self, tape: &mut Tape, x: Var, memory: Option<Var>, b: &Block, split: Option<usize>) -> Result<Var> {
        let h = self.norm(tape, x, b.self_norm)?;
        let h = self.self_attention(tape, h, &b.self_attn, split)?;
        let mut x = tape.add(x, h)?;
        if let (Some((norm, attn)), Some(mem)) = (&b.cross, memory) {
            let h = self.norm(tape, x, *norm)?;
            let h = self.attention(tape, h, mem, attn)?;
            x = tape.add(x, h)?;
        }
        let h = self.norm(tape, x, b.ffn_norm)?;
        let h = self.linear(tape, h, b.ffn_in)?;
        let h = tape.relu(h)?;
        let h = self.linear(tape, h, b.ffn_out)?;
        tape.add(x, h)
    }

    /// `T×D_in` tokens → `T×C` memory.
    pub fn encode(&self, tape: &mut Tape, tokens: &Tensor) -> Result<Var> {
        let cfg = &self.model.config;
        let expected = [cfg.token_count(), cfg.token_dim];
        if tokens.shape() != expected {
            return Err(Error::contract(format!(
                "encoder expects {}x{} tokens, got {:?}",
                expected[0],
                expected[1],
                tokens.shape()
            )));
        }
        let x = tape.constant(tokens.clone());
        let mut x = self.linear(tape, x, self.model.layout.input)?;
        if self.options.positions {
            let pos = tape.constant(position_signal(cfg.grid_w, cfg.grid_h, cfg.channels));
            x = tape.add(x, pos)?;
        }
        for b in &self.model.layout.encoder {
            x = self.block(tape, x, None, b, None)?;
        }
        self.norm(tape, x, self.model.layout.enc_norm)
    }

    /// Decodes both query sets against `memory`; pair `i` shares `P_pos[i]`.
    pub fn instance_decode(&self, tape: &mut Tape, memory: Var, q_h: Var, q_g: Var, p_pos: Var) -> Result<(Var, Var)> {
        let shape = tape.value(q_h).shape().to_vec();
        for v in [q_g, p_pos] {
            if tape.value(v).shape() != shape.as_slice() {
                return Err(Error::Dimension {
                    op: "instance_decode",
                    left: shape,
                    right: tape.value(v).shape().to_vec(),
                });
            }
        }
        let n = shape[0];
        let a = tape.add(q_h, p_pos)?;
        let b = tape.add(q_g, p_pos)?;
        let mut x = tape.concat(&[a, b], 0)?;
        let split = (!self.model.config.joint_attention).then_some(n);
        for blk in &self.model.layout.instance {
            x = self.block(tape, x, Some(memory), blk, split)?;
        }
        let x = self.norm(tape, x, self.model.layout.inst_norm)?;
        let top: Vec<usize> = (0..n).collect();
        let bottom: Vec<usize> = (n..2 * n).collect();
        Ok((tape.select_rows(x, &top)?, tape.select_rows(x, &bottom)?))
    }

    /// Three-layer head with a sigmoid: `N×4` boxes `(cx, cy, w, h)`.
    pub fn predict_boxes(&self, tape: &mut Tape, q: Var, side: Side) -> Result<Var> {
        let head = match side {
            Side::Individual => self.model.layout.box_h,
            Side::Group => self.model.layout.box_g,
        };
        let mut x = q;
        for (i, l) in head.iter().enumerate() {
            x = self.linear(tape, x, *l)?;
            if i < 2 {
                x = tape.relu(x)?;
            }
        }
        tape.sigmoid(x)
    }

    fn branch(&self, side: Side) -> BranchParams {
        let b: &Branch = match side {
            Side::Individual => &self.model.layout.branch_h,
            Side::Group => &self.model.layout.branch_g,
        };
        BranchParams {
            theta: b.theta.iter().map(|s| s.iter().map(|&i| self.vars[i]).collect()).collect(),
            mlp: MlpParams {
                w1: self.vars[b.mlp_in.w],
                b1: self.vars[b.mlp_in.b],
                w2: self.vars[b.mlp_out.w],
                b2: self.vars[b.mlp_out.b],
            },
        }
    }

    /// Builds the multi-scale hypergraph on the (detached) decoder output
    /// and runs that side's convolution branch over it.
    pub fn hypergraph_branch(&self, tape: &mut Tape, q: Var, side: Side) -> Result<(Var, MultiScaleHypergraph)> {
        let cfg = &self.model.config;
        let graphs = MultiScaleHypergraph::from_embeddings(tape.value(q), cfg.scales)
            .map_err(|e| e.context(format!("{side:?} hypergraph")))?;
        let f = multi_scale_forward(tape, q, &graphs, &self.branch(side), cfg.layers)?;
        Ok((f, graphs))
    }

    /// Decodes fused queries against `memory` into `N×K` class logits.
    pub fn interaction_decode(&self, tape: &mut Tape, memory: Var, q_n: Var) -> Result<Var> {
        let (qc, mc) = (tape.value(q_n).cols(), tape.value(memory).cols());
        if qc != mc {
            return Err(Error::Dimension {
                op: "interaction_decode",
                left: tape.value(q_n).shape().to_vec(),
                right: tape.value(memory).shape().to_vec(),
            });
        }
        let mut x = q_n;
        for blk in &self.model.layout.interaction {
            x = self.block(tape, x, Some(memory), blk, None)?;
        }
        let x = self.norm(tape, x, self.model.layout.int_norm)?;
        self.linear(tape, x, self.model.layout.classes)
    }

    pub fn forward_traced(&self, tape: &mut Tape, tokens: &Tensor) -> Result<Trace> {
        let memory = self.encode(tape, tokens).context("encoder")?;
        let (q_h, q_g, p) = self.queries();
        let (instance_h, instance_g) = self.instance_decode(tape, memory, q_h, q_g, p).context("instance decoder")?;
        let boxes_h = self.predict_boxes(tape, instance_h, Side::Individual)?;
        let boxes_g = self.predict_boxes(tape, instance_g, Side::Group)?;
        let (f_h, graphs_h) = self.hypergraph_branch(tape, instance_h, Side::Individual)?;
        let (f_g, graphs_g) = self.hypergraph_branch(tape, instance_g, Side::Group)?;
        let fused = fuse_queries(tape, f_h, f_g)?;
        let logits = self.interaction_decode(tape, memory, fused).context("interaction decoder")?;
        Ok(Trace {
            output: ModelOutput {
                boxes_h,
                boxes_g,
                logits,
            },
            memory,
            instance_h,
            instance_g,
            graphs_h,
            graphs_g,
            fused,
        })
    }

    pub fn forward(&self, tape: &mut Tape, tokens: &Tensor) -> Result<ModelOutput> {
        Ok(self.forward_traced(tape, tokens)?.output)
    }
}
