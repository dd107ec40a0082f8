//! Named weight tensors, their layout, and the checkpoint format.
//!
//! The layout is rebuilt from the config on every load, so tensor order in
//! a checkpoint is simply creation order below: input projection, encoder
//! blocks, encoder norm, the three query tables, instance decoder blocks and
//! norm, both box heads, both hypergraph branches, interaction decoder
//! blocks and norm, then the class head.

use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::config::ModelConfig;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"NVIDEHR1";

const RELU_GAIN: f64 = std::f64::consts::SQRT_2;

/// Prior probability behind the initial class-head bias.
const CLASS_PRIOR: f64 = 0.01;

#[derive(Debug, Clone, Copy)]
pub(crate) struct Linear {
    pub w: usize,
    pub b: usize,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct Norm {
    pub gain: usize,
    pub bias: usize,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
}

/// Pre-norm block: self-attention, optional cross-attention, feed-forward.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Block {
    pub self_norm: Norm,
    pub self_attn: Attention,
    pub cross: Option<(Norm, Attention)>,
    pub ffn_norm: Norm,
    pub ffn_in: Linear,
    pub ffn_out: Linear,
}

#[derive(Debug, Clone)]
pub(crate) struct Branch {
    pub theta: Vec<Vec<usize>>,
    pub mlp_in: Linear,
    pub mlp_out: Linear,
}

#[derive(Debug, Clone)]
pub(crate) struct Layout {
    pub input: Linear,
    pub encoder: Vec<Block>,
    pub enc_norm: Norm,
    pub query_h: usize,
    pub query_g: usize,
    pub position: usize,
    pub instance: Vec<Block>,
    pub inst_norm: Norm,
    pub box_h: [Linear; 3],
    pub box_g: [Linear; 3],
    pub branch_h: Branch,
    pub branch_g: Branch,
    pub interaction: Vec<Block>,
    pub int_norm: Norm,
    pub classes: Linear,
}

enum Init {
    /// Kaiming uniform: `bound = gain * sqrt(3 / fan_in)`.
    FanIn(usize, f64),
    Const(f64),
    Unit,
}

struct Builder {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    seed: u64,
}

/// Each tensor draws from its own stream keyed by `(seed, name)`, so adding
/// or removing a tensor leaves every other initial value unchanged.
fn tensor_rng(seed: u64, name: &str) -> ChaCha8Rng {
    // FNV-1a over the name, folded with the seed
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(h);
    rng
}

impl Builder {
    fn tensor(&mut self, name: String, shape: &[usize], init: Init) -> usize {
        let n: usize = shape.iter().product();
        let mut rng = tensor_rng(self.seed, &name);
        let data = match init {
            Init::FanIn(fan_in, gain) => {
                let bound = gain * (3.0 / fan_in as f64).sqrt();
                (0..n).map(|_| rng.gen_range(-bound..bound)).collect()
            }
            Init::Const(c) => vec![c; n],
            // unit variance
            Init::Unit => (0..n).map(|_| rng.gen_range(-3f64.sqrt()..3f64.sqrt())).collect(),
        };
        self.names.push(name);
        self.tensors.push(Tensor::new(shape.to_vec(), data).expect("shape matches data"));
        self.tensors.len() - 1
    }

    fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize) -> Linear {
        self.linear_gain(name, fan_in, fan_out, 1.0)
    }

    /// A layer whose output feeds a relu.
    fn linear_relu(&mut self, name: &str, fan_in: usize, fan_out: usize) -> Linear {
        self.linear_gain(name, fan_in, fan_out, RELU_GAIN)
    }

    fn linear_gain(&mut self, name: &str, fan_in: usize, fan_out: usize, gain: f64) -> Linear {
        Linear {
            w: self.tensor(format!("{name}.weight"), &[fan_in, fan_out], Init::FanIn(fan_in, gain)),
            b: self.tensor(format!("{name}.bias"), &[1, fan_out], Init::Const(0.0)),
        }
    }

    fn norm(&mut self, name: &str, c: usize) -> Norm {
        Norm {
            gain: self.tensor(format!("{name}.gain"), &[1, c], Init::Const(1.0)),
            bias: self.tensor(format!("{name}.bias"), &[1, c], Init::Const(0.0)),
        }
    }

    fn attention(&mut self, name: &str, c: usize) -> Attention {
        Attention {
            q: self.linear(&format!("{name}.q"), c, c),
            k: self.linear(&format!("{name}.k"), c, c),
            v: self.linear(&format!("{name}.v"), c, c),
            out: self.linear(&format!("{name}.out"), c, c),
        }
    }

    fn block(&mut self, name: &str, cfg: &ModelConfig, cross: bool) -> Block {
        let c = cfg.channels;
        Block {
            self_norm: self.norm(&format!("{name}.self_norm"), c),
            self_attn: self.attention(&format!("{name}.self_attn"), c),
            cross: cross.then(|| {
                (
                    self.norm(&format!("{name}.cross_norm"), c),
                    self.attention(&format!("{name}.cross_attn"), c),
                )
            }),
            ffn_norm: self.norm(&format!("{name}.ffn_norm"), c),
            ffn_in: self.linear_relu(&format!("{name}.ffn_in"), c, cfg.ffn_dim),
            ffn_out: self.linear(&format!("{name}.ffn_out"), cfg.ffn_dim, c),
        }
    }

    fn box_head(&mut self, name: &str, c: usize) -> [Linear; 3] {
        [
            self.linear_relu(&format!("{name}.0"), c, c),
            self.linear_relu(&format!("{name}.1"), c, c),
            self.linear(&format!("{name}.2"), c, 4),
        ]
    }

    fn branch(&mut self, name: &str, cfg: &ModelConfig) -> Branch {
        let c = cfg.channels;
        let theta = (0..cfg.scales)
            .map(|s| {
                (0..cfg.layers)
                    .map(|l| self.tensor(format!("{name}.theta.{}.{l}", s + 1), &[c, c], Init::FanIn(c, RELU_GAIN)))
                    .collect()
            })
            .collect();
        Branch {
            theta,
            mlp_in: self.linear_relu(&format!("{name}.mlp_in"), cfg.scales * c, c),
            mlp_out: self.linear(&format!("{name}.mlp_out"), c, c),
        }
    }
}

pub(crate) fn build(cfg: &ModelConfig) -> (Layout, Weights) {
    let c = cfg.channels;
    let mut b = Builder {
        names: Vec::new(),
        tensors: Vec::new(),
        seed: cfg.seed,
    };
    let input = b.linear("input", cfg.token_dim, c);
    let encoder = (0..cfg.enc_layers).map(|i| b.block(&format!("encoder.{i}"), cfg, false)).collect();
    let enc_norm = b.norm("encoder.norm", c);
    let query_h = b.tensor("query.individual".into(), &[cfg.queries, c], Init::Unit);
    let query_g = b.tensor("query.group".into(), &[cfg.queries, c], Init::Unit);
    let position = b.tensor("query.position".into(), &[cfg.queries, c], Init::Unit);
    let instance = (0..cfg.dec_layers).map(|i| b.block(&format!("instance.{i}"), cfg, true)).collect();
    let inst_norm = b.norm("instance.norm", c);
    let box_h = b.box_head("box_individual", c);
    let box_g = b.box_head("box_group", c);
    let branch_h = b.branch("hypergraph_individual", cfg);
    let branch_g = b.branch("hypergraph_group", cfg);
    let interaction = (0..cfg.dec_layers).map(|i| b.block(&format!("interaction.{i}"), cfg, true)).collect();
    let int_norm = b.norm("interaction.norm", c);
    let classes = b.linear("classes", c, cfg.num_classes);
    let prior_bias = -((1.0 - CLASS_PRIOR) / CLASS_PRIOR).ln();
    b.tensors[classes.b] = Tensor::full(&[1, cfg.num_classes], prior_bias);
    let layout = Layout {
        input,
        encoder,
        enc_norm,
        query_h,
        query_g,
        position,
        instance,
        inst_norm,
        box_h,
        box_g,
        branch_h,
        branch_g,
        interaction,
        int_norm,
        classes,
    };
    (
        layout,
        Weights {
            names: b.names,
            tensors: b.tensors,
        },
    )
}

/// Every learnable tensor, by name, in layout order.
#[derive(Debug, Clone, PartialEq)]
pub struct Weights {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl Weights {
    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &mut self.tensors[i])
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Largest absolute entry difference; `None` if the layouts differ.
    pub fn max_abs_diff(&self, other: &Weights) -> Option<f64> {
        if self.names != other.names {
            return None;
        }
        let mut m: f64 = 0.0;
        for (a, b) in self.tensors.iter().zip(&other.tensors) {
            m = m.max(a.max_abs_diff(b).ok()?);
        }
        Some(m)
    }

    pub(crate) fn write_to(&self, cfg: &ModelConfig, mut w: impl Write) -> Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        for v in cfg.header() {
            w.write_all(&v.to_le_bytes())?;
        }
        for (name, t) in self.names.iter().zip(&self.tensors) {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&(t.rank() as u32).to_le_bytes())?;
            for &d in t.shape() {
                w.write_all(&(d as u32).to_le_bytes())?;
            }
            for v in t.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    /// Reads a checkpoint, checking it against the layout that `base`
    /// (after applying the stored header) implies.
    pub(crate) fn read_from(base: &ModelConfig, mut r: impl Read) -> Result<(ModelConfig, Layout, Weights)> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)
            .map_err(|_| Error::Checkpoint("file too short for the header".into()))?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let mut header = [0i32; 13];
        for h in &mut header {
            *h = i32::from_le_bytes(read_array(&mut r)?);
        }
        let cfg = base.with_header(header)?;
        let (layout, mut weights) = build(&cfg);
        for i in 0..weights.len() {
            let len = u32::from_le_bytes(read_array(&mut r)?) as usize;
            if len > 4096 {
                return Err(Error::Checkpoint(format!("tensor name length {len} is implausible")));
            }
            let mut name = vec![0u8; len];
            r.read_exact(&mut name).map_err(truncated)?;
            let name = String::from_utf8(name).map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
            if name != weights.names[i] {
                return Err(Error::Checkpoint(format!(
                    "tensor {i} is {name:?}, expected {:?}",
                    weights.names[i]
                )));
            }
            let rank = u32::from_le_bytes(read_array(&mut r)?) as usize;
            let mut shape = Vec::with_capacity(rank.min(8));
            for _ in 0..rank {
                shape.push(u32::from_le_bytes(read_array(&mut r)?) as usize);
            }
            if shape != weights.tensors[i].shape() {
                return Err(Error::Checkpoint(format!(
                    "{name} has shape {shape:?}, expected {:?}",
                    weights.tensors[i].shape()
                )));
            }
            for v in weights.tensors[i].data_mut() {
                *v = f64::from_le_bytes(read_array(&mut r)?);
            }
        }
        let mut rest = [0u8; 1];
        if r.read(&mut rest)? != 0 {
            return Err(Error::Checkpoint("trailing bytes after the last tensor".into()));
        }
        Ok((cfg, layout, weights))
    }

    pub(crate) fn save(&self, cfg: &ModelConfig, path: &Path) -> Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(cfg, &mut w)?;
        w.flush()?;
        Ok(())
    }
}

fn truncated(_: std::io::Error) -> Error {
    Error::Checkpoint("unexpected end of file".into())
}

fn read_array<const N: usize>(r: &mut impl Read) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf).map_err(truncated)?;
    Ok(buf)
}
