//! Model configuration and the flat parameter store.
//!
//! Every learnable matrix lives in one `Vec<Array2<f64>>` with a parallel
//! list of names. Typed "slot" structs record which entry plays which role,
//! so the optimizer and the checkpoint writer can treat parameters as a
//! flat list while the forward pass reads them by role.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::N_TYPES;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Patch feature width `d`.
    pub d_in: usize,
    /// Encoder output and block width when an encoder is enabled.
    pub hidden: usize,
    pub gat_layers: usize,
    /// Propagation steps `S`.
    pub hops: usize,
    pub n_blocks: usize,
    /// Number of discrete time bins `T`.
    pub n_bins: usize,
    /// Stabilizer in the linear-attention denominator.
    pub eps: f64,
    pub layer_norm_eps: f64,
    pub leaky_slope: f64,
    /// Feed-forward hidden width as a multiple of the stream width.
    pub ffn_mult: usize,
    /// Residual + layer norm + feed-forward after each attention step.
    /// When off, a block's output is the raw attention output.
    pub residual_ffn: bool,
    pub tie_enabled: bool,
    pub hie_enabled: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_in: 768,
            hidden: 256,
            gat_layers: 3,
            hops: 3,
            n_blocks: 5,
            n_bins: 4,
            eps: 1e-6,
            layer_norm_eps: 1e-5,
            leaky_slope: crate::autodiff::DEFAULT_LEAKY_SLOPE,
            ffn_mult: 2,
            residual_ffn: true,
            tie_enabled: true,
            hie_enabled: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_in == 0 || self.hidden == 0 || self.ffn_mult == 0 {
            return Err(Error::Config("model widths must be positive".into()));
        }
        if self.n_blocks == 0 {
            return Err(Error::Config("need at least one transformer block".into()));
        }
        if self.n_bins == 0 {
            return Err(Error::Config("need at least one time bin".into()));
        }
        if (self.tie_enabled || self.hie_enabled) && self.gat_layers == 0 {
            return Err(Error::Config("an enabled encoder needs at least one GAT layer".into()));
        }
        if !(self.eps > 0.0 && self.layer_norm_eps > 0.0) {
            return Err(Error::Config("stability constants must be positive".into()));
        }
        Ok(())
    }

    /// Width of the LOW stream after the topology encoder.
    pub fn low_width(&self) -> usize {
        if self.tie_enabled {
            self.hidden
        } else {
            self.d_in
        }
    }

    /// Width of the HIGH stream after the heterogeneous encoder.
    pub fn high_width(&self) -> usize {
        if self.hie_enabled {
            self.hidden
        } else {
            self.d_in
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GatLayerSlots {
    /// `d_in × d_out` projection.
    pub w: usize,
    /// `2·d_out × 1` attention vector; the first half scores the receiving
    /// node, the second half the sending node.
    pub a: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StreamSlots {
    pub wq: usize,
    pub wk: usize,
    pub wv: usize,
    pub ffn_w1: usize,
    pub ffn_b1: usize,
    pub ffn_w2: usize,
    pub ffn_b2: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockSlots {
    pub low: StreamSlots,
    pub high: StreamSlots,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout {
    pub tie: Vec<GatLayerSlots>,
    pub hie: Vec<GatLayerSlots>,
    /// `(S+1) × 1` propagation coefficients per scale.
    pub beta_low: usize,
    pub beta_high: usize,
    pub blocks: Vec<BlockSlots>,
    pub head_w: usize,
    pub head_b: usize,
    /// `1 × T` hazard offsets.
    pub bin_offsets: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub names: Vec<String>,
    pub values: Vec<Array2<f64>>,
    pub layout: Layout,
}

struct Builder<'r> {
    rng: &'r mut ChaCha8Rng,
    names: Vec<String>,
    values: Vec<Array2<f64>>,
}

impl Builder<'_> {
    fn push(&mut self, name: String, value: Array2<f64>) -> usize {
        self.names.push(name);
        self.values.push(value);
        self.values.len() - 1
    }

    /// Uniform in `±1/√fan_in`.
    fn uniform(&mut self, name: String, rows: usize, cols: usize, fan_in: usize) -> usize {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let value = Array2::from_shape_simple_fn((rows, cols), || self.rng.random_range(-bound..=bound));
        self.push(name, value)
    }

    fn gat_stack(&mut self, prefix: &str, d_in: usize, hidden: usize, layers: usize) -> Vec<GatLayerSlots> {
        (0..layers)
            .map(|l| {
                let fan = if l == 0 { d_in } else { hidden };
                GatLayerSlots {
                    w: self.uniform(format!("{prefix}.{l}.w"), fan, hidden, fan),
                    a: self.uniform(format!("{prefix}.{l}.a"), 2 * hidden, 1, 2 * hidden),
                }
            })
            .collect()
    }

    fn stream(&mut self, prefix: &str, width: usize, ffn: usize) -> StreamSlots {
        StreamSlots {
            wq: self.uniform(format!("{prefix}.wq"), width, width, width),
            wk: self.uniform(format!("{prefix}.wk"), width, width, width),
            wv: self.uniform(format!("{prefix}.wv"), width, width, width),
            ffn_w1: self.uniform(format!("{prefix}.ffn_w1"), width, ffn, width),
            ffn_b1: self.push(format!("{prefix}.ffn_b1"), Array2::zeros((1, ffn))),
            ffn_w2: self.uniform(format!("{prefix}.ffn_w2"), ffn, width, ffn),
            ffn_b2: self.push(format!("{prefix}.ffn_b2"), Array2::zeros((1, width))),
        }
    }
}

impl ModelParams {
    /// Freshly initialized parameters.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = Builder {
            rng: &mut rng,
            names: Vec::new(),
            values: Vec::new(),
        };
        let c = config;
        let tie = if c.tie_enabled {
            b.gat_stack("tie", c.d_in, c.hidden, c.gat_layers)
        } else {
            Vec::new()
        };
        let hie = if c.hie_enabled {
            b.gat_stack("hie", c.d_in + N_TYPES, c.hidden, c.gat_layers)
        } else {
            Vec::new()
        };
        let beta = Array2::from_elem((c.hops + 1, 1), 1.0 / (c.hops + 1) as f64);
        let beta_low = b.push("beta_low".into(), beta.clone());
        let beta_high = b.push("beta_high".into(), beta);
        let (wl, wh) = (c.low_width(), c.high_width());
        let blocks = (0..c.n_blocks)
            .map(|k| BlockSlots {
                low: b.stream(&format!("block{k}.low"), wl, c.ffn_mult * wl),
                high: b.stream(&format!("block{k}.high"), wh, c.ffn_mult * wh),
            })
            .collect();
        let head_w = b.uniform("head.w".into(), wl, 1, wl);
        let head_b = b.push("head.b".into(), Array2::zeros((1, 1)));
        let bin_offsets = b.push("bin_offsets".into(), Array2::zeros((1, c.n_bins)));
        let Builder { names, values, .. } = b;
        Ok(ModelParams {
            config: config.clone(),
            names,
            values,
            layout: Layout {
                tie,
                hie,
                beta_low,
                beta_high,
                blocks,
                head_w,
                head_b,
                bin_offsets,
            },
        })
    }

    pub fn n_scalars(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    /// Rebuilds a parameter set for `config` from named values, checking
    /// that names and shapes match a fresh initialization.
    pub fn from_named(config: &ModelConfig, named: Vec<(String, Array2<f64>)>) -> Result<Self> {
        let mut params = ModelParams::init(config, 0)?;
        if named.len() != params.values.len() {
            return Err(Error::Invalid(format!(
                "expected {} parameter tensors, found {}",
                params.values.len(),
                named.len()
            )));
        }
        for (k, (name, value)) in named.into_iter().enumerate() {
            if name != params.names[k] || value.dim() != params.values[k].dim() {
                return Err(Error::Invalid(format!(
                    "parameter {k}: expected {} {:?}, found {name} {:?}",
                    params.names[k],
                    params.values[k].dim(),
                    value.dim()
                )));
            }
            params.values[k] = value;
        }
        Ok(params)
    }
}
