//! Variant assembly and forward pass.
//!
//! The full cascade (STAGNN) on a `[B, w, S]` window batch:
//!
//! 1. transpose to node-major `[B, S, w]`;
//! 2. per GCN width: GCN layer, then spatial attention;
//! 3. reinterpret `[B, S, n]` as a channel-major sequence (S channels,
//!    length n = last GCN width);
//! 4. per TCN width: residual TCN block (dilation doubling), then temporal
//!    attention;
//! 5. flatten and apply one linear layer to get a scalar RUL.
//!
//! Ablation variants drop the absent stages. TCN-only variants consume the
//! transposed window directly as an S-channel sequence of length w.

mod config;
pub mod layers;
mod state;

use std::collections::BTreeMap;
use std::rc::Rc;

use rand::distributions::{Distribution, Uniform};
use rand::Rng;

pub use config::{ModelConfig, Variant};
pub use state::{Checkpoint, CHECKPOINT_VERSION};

use crate::error::{Error, Result};
use crate::graph::AdjacencyMatrix;
use crate::seeding;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use layers::TcnBlockVars;

/// Named parameter tensors, ordered by name.
pub type ParamStore = BTreeMap<String, Tensor>;

/// How a parameter is initialized.
enum Init {
    /// Uniform in `±sqrt(1 / fan_in)`.
    FanIn(usize),
    Zeros,
}

/// Expected parameter names and shapes for a configuration.
fn parameter_layout(cfg: &ModelConfig) -> Vec<(String, Vec<usize>, Init)> {
    let mut out = Vec::new();
    if cfg.variant.uses_graph() {
        let mut d_in = cfg.window;
        for (l, &d) in cfg.gcn_dims.iter().enumerate() {
            out.push((format!("gcn.{l}.weight"), vec![d_in, d], Init::FanIn(d_in)));
            if cfg.variant.spatial_attention() {
                for m in 0..cfg.heads_spatial {
                    out.push((
                        format!("spatial.{l}.head{m}.weight"),
                        vec![2 * d, 1],
                        Init::FanIn(2 * d),
                    ));
                }
            }
            d_in = d;
        }
    }
    if cfg.variant.uses_tcn() {
        let k = cfg.kernel_size;
        let mut c_in = cfg.nodes;
        for (l, &c) in cfg.tcn_dims.iter().enumerate() {
            out.push((format!("tcn.{l}.conv1.weight"), vec![c, c_in, k], Init::FanIn(c_in * k)));
            out.push((format!("tcn.{l}.conv1.bias"), vec![c, 1], Init::Zeros));
            out.push((format!("tcn.{l}.conv2.weight"), vec![c, c, k], Init::FanIn(c * k)));
            out.push((format!("tcn.{l}.conv2.bias"), vec![c, 1], Init::Zeros));
            if c_in != c {
                out.push((format!("tcn.{l}.downsample.weight"), vec![c, c_in, 1], Init::FanIn(c_in)));
                out.push((format!("tcn.{l}.downsample.bias"), vec![c, 1], Init::Zeros));
            }
            if cfg.variant.temporal_attention() {
                for m in 0..cfg.heads_temporal {
                    out.push((format!("temporal.{l}.head{m}.weight"), vec![1, c], Init::FanIn(c)));
                    out.push((format!("temporal.{l}.head{m}.bias"), vec![1], Init::Zeros));
                }
            }
            c_in = c;
        }
    }
    let f = cfg.feature_len();
    out.push(("head.weight".into(), vec![f, 1], Init::FanIn(f)));
    out.push(("head.bias".into(), vec![1], Init::Zeros));
    out
}

/// Initializes every parameter from its own stream derived from
/// `(cfg.seed, name)`, so variants sharing a parameter name share its value.
pub fn init_params(cfg: &ModelConfig) -> ParamStore {
    parameter_layout(cfg)
        .into_iter()
        .map(|(name, shape, init)| {
            let numel: usize = shape.iter().product();
            let data = match init {
                Init::Zeros => vec![0.0; numel],
                Init::FanIn(fan_in) => {
                    let bound = (1.0 / fan_in as f64).sqrt();
                    let dist = Uniform::new_inclusive(-bound, bound);
                    let mut rng = seeding::rng_for(cfg.seed, &format!("init/{name}"));
                    (0..numel).map(|_| dist.sample(&mut rng)).collect()
                }
            };
            let t = Tensor::new(shape, data).expect("layout shapes are positive");
            (name, t)
        })
        .collect()
}

/// Tape handles produced by one forward pass.
#[derive(Debug)]
pub struct ForwardOutput {
    /// `[B]` RUL predictions.
    pub prediction: Var,
    /// `[B, F]` pre-head features.
    pub features: Var,
    /// Spatial coefficients per GCN layer and head, each `[B, S, S]`.
    pub spatial: Vec<Vec<Var>>,
    /// Temporal weights per TCN layer and head, each `[B, 1, L]`.
    pub temporal: Vec<Vec<Var>>,
    /// Parameter leaves bound for this pass.
    pub params: BTreeMap<String, Var>,
}

/// Concrete attention and feature values for one batch.
#[derive(Clone, Debug)]
pub struct Inspection {
    pub prediction: Vec<f64>,
    pub features: Tensor,
    pub spatial: Vec<Vec<Tensor>>,
    pub temporal: Vec<Vec<Tensor>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    config: ModelConfig,
    adjacency: Option<AdjacencyMatrix>,
    params: ParamStore,
}

impl Model {
    /// Validates the configuration against the graph and initializes
    /// parameters.
    pub fn assemble(config: ModelConfig, adjacency: Option<AdjacencyMatrix>) -> Result<Self> {
        let params = init_params(&config);
        Self::from_parts(config, adjacency, params)
    }

    /// Rebuilds a model from stored parameters, checking every shape.
    pub fn from_parts(
        config: ModelConfig,
        adjacency: Option<AdjacencyMatrix>,
        params: ParamStore,
    ) -> Result<Self> {
        config.validate()?;
        if config.variant.uses_graph() {
            match &adjacency {
                None => {
                    return Err(Error::Config(format!(
                        "variant {} needs a sensor graph",
                        config.variant
                    )))
                }
                Some(a) if a.nodes() != config.nodes => {
                    return Err(Error::Config(format!(
                        "graph has {} nodes but the model expects {}",
                        a.nodes(),
                        config.nodes
                    )))
                }
                Some(_) => {}
            }
        }
        let layout = parameter_layout(&config);
        if layout.len() != params.len() {
            return Err(Error::Dimension(format!(
                "expected {} parameter tensors, found {}",
                layout.len(),
                params.len()
            )));
        }
        for (name, shape, _) in &layout {
            match params.get(name) {
                Some(t) if t.shape() == shape.as_slice() => {}
                Some(t) => {
                    return Err(Error::Dimension(format!(
                        "parameter {name} has shape {:?}, expected {shape:?}",
                        t.shape()
                    )))
                }
                None => return Err(Error::Dimension(format!("missing parameter {name}"))),
            }
        }
        Ok(Self {
            config,
            adjacency,
            params,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn adjacency(&self) -> Option<&AdjacencyMatrix> {
        self.adjacency.as_ref()
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn parameter_count(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    /// Records a forward pass over `x: [B, w, S]` on `tape`.
    pub fn forward<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape,
        x: &Tensor,
        training: bool,
        rng: &mut R,
    ) -> Result<ForwardOutput> {
        let cfg = &self.config;
        let expected = [cfg.window, cfg.nodes];
        if x.rank() != 3 || x.shape()[1..] != expected {
            return Err(Error::Dimension(format!(
                "input batch {:?} does not match [B, {}, {}]",
                x.shape(),
                cfg.window,
                cfg.nodes
            )));
        }
        let params: BTreeMap<String, Var> = self
            .params
            .iter()
            .map(|(name, t)| (name.clone(), tape.leaf(t.clone())))
            .collect();
        let p = |name: &str| params[name];

        let input = tape.constant(x.clone());
        let mut h = tape.transpose(input)?;
        let mut spatial = Vec::new();
        let mut temporal = Vec::new();

        if cfg.variant.uses_graph() {
            let graph = self.adjacency.as_ref().expect("checked at assembly");
            let a_hat = tape.constant(graph.propagation().clone());
            let mask: Rc<[bool]> = Rc::from(graph.neighbor_mask());
            for l in 0..cfg.gcn_dims.len() {
                h = layers::gcn_layer(tape, h, a_hat, p(&format!("gcn.{l}.weight")))?;
                if cfg.spatial_attention_active() {
                    let heads: Vec<Var> = (0..cfg.heads_spatial)
                        .map(|m| p(&format!("spatial.{l}.head{m}.weight")))
                        .collect();
                    let (out, alphas) =
                        layers::spatial_attention(tape, h, &mask, &heads, cfg.leaky_slope)?;
                    h = out;
                    spatial.push(alphas);
                }
            }
        }

        if cfg.variant.uses_tcn() {
            for l in 0..cfg.tcn_dims.len() {
                let block = TcnBlockVars {
                    conv1_w: p(&format!("tcn.{l}.conv1.weight")),
                    conv1_b: p(&format!("tcn.{l}.conv1.bias")),
                    conv2_w: p(&format!("tcn.{l}.conv2.weight")),
                    conv2_b: p(&format!("tcn.{l}.conv2.bias")),
                    downsample: params
                        .get(&format!("tcn.{l}.downsample.weight"))
                        .map(|&w| (w, p(&format!("tcn.{l}.downsample.bias")))),
                };
                let dilation = 1usize << l;
                h = layers::tcn_block(tape, h, &block, dilation, cfg.dropout, training, rng)?;
                if cfg.temporal_attention_active() {
                    let heads: Vec<(Var, Var)> = (0..cfg.heads_temporal)
                        .map(|m| {
                            (
                                p(&format!("temporal.{l}.head{m}.weight")),
                                p(&format!("temporal.{l}.head{m}.bias")),
                            )
                        })
                        .collect();
                    let (out, betas) = layers::temporal_attention(tape, h, &heads)?;
                    h = out;
                    temporal.push(betas);
                }
            }
        }

        let (prediction, features) = layers::linear_head(tape, h, p("head.weight"), p("head.bias"))?;
        Ok(ForwardOutput {
            prediction,
            features,
            spatial,
            temporal,
            params,
        })
    }

    /// Evaluation-mode predictions for a `[B, w, S]` batch.
    pub fn predict(&self, x: &Tensor) -> Result<Vec<f64>> {
        Ok(self.inspect(x)?.prediction)
    }

    /// Evaluation-mode forward pass returning attention and feature values.
    pub fn inspect(&self, x: &Tensor) -> Result<Inspection> {
        let mut tape = Tape::new();
        // Dropout is inactive in evaluation mode; the generator is unused.
        let mut rng = seeding::rng_for(0, "eval");
        let out = self.forward(&mut tape, x, false, &mut rng)?;
        let grab = |vars: &Vec<Vec<Var>>| -> Vec<Vec<Tensor>> {
            vars.iter()
                .map(|heads| heads.iter().map(|&v| tape.value(v).clone()).collect())
                .collect()
        };
        let prediction = tape.value(out.prediction).data().to_vec();
        if prediction.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("model prediction".into()));
        }
        Ok(Inspection {
            prediction,
            features: tape.value(out.features).clone(),
            spatial: grab(&out.spatial),
            temporal: grab(&out.temporal),
        })
    }
}
