//! Small trainable models partitioned into blocks.
//!
//! Two architectures: a plain MLP (partitioned per layer) and a residual MLP
//! ("mini-resnet": stem, >= 2 residual blocks, head) partitioned either per
//! residual block or per layer. Blocks are the unit of quantization,
//! curvature probing, and fine-tuning.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quant::ActQuantState;
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Granularity {
    PerLayer,
    PerResidualBlock,
}

/// Architecture description. The arch tag is the serialized discriminator.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "arch", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ModelSpec {
    /// Fully-connected net; `layers` lists widths input..=classes.
    Mlp {
        layers: Vec<usize>,
        #[serde(default)]
        granularity: Option<Granularity>,
    },
    /// Residual MLP: stem to `width`, `residual_blocks` two-layer residual
    /// blocks at `width`, linear head to `classes`.
    MiniResnet {
        input_dim: usize,
        width: usize,
        residual_blocks: usize,
        classes: usize,
        #[serde(default)]
        granularity: Option<Granularity>,
    },
}

impl ModelSpec {
    pub fn granularity(&self) -> Granularity {
        match self {
            ModelSpec::Mlp { granularity, .. } => granularity.unwrap_or(Granularity::PerLayer),
            ModelSpec::MiniResnet { granularity, .. } => {
                granularity.unwrap_or(Granularity::PerResidualBlock)
            }
        }
    }

    pub fn classes(&self) -> usize {
        match self {
            ModelSpec::Mlp { layers, .. } => *layers.last().unwrap_or(&0),
            ModelSpec::MiniResnet { classes, .. } => *classes,
        }
    }

    pub fn input_dim(&self) -> usize {
        match self {
            ModelSpec::Mlp { layers, .. } => *layers.first().unwrap_or(&0),
            ModelSpec::MiniResnet { input_dim, .. } => *input_dim,
        }
    }

    fn validate(&self) -> Result<()> {
        match self {
            ModelSpec::Mlp { layers, granularity } => {
                if layers.len() < 2 {
                    return Err(Error::InvalidSpec(
                        "mlp needs at least input and output widths".into(),
                    ));
                }
                if layers.contains(&0) {
                    return Err(Error::InvalidSpec("mlp widths must be positive".into()));
                }
                if *layers.last().unwrap() < 2 {
                    return Err(Error::InvalidSpec("need at least 2 classes".into()));
                }
                if granularity == &Some(Granularity::PerResidualBlock) {
                    return Err(Error::InvalidSpec(
                        "per-residual-block granularity requires the mini-resnet architecture"
                            .into(),
                    ));
                }
            }
            ModelSpec::MiniResnet {
                input_dim,
                width,
                residual_blocks,
                classes,
                ..
            } => {
                if *input_dim == 0 || *width == 0 {
                    return Err(Error::InvalidSpec("widths must be positive".into()));
                }
                if *residual_blocks < 2 {
                    return Err(Error::InvalidSpec(
                        "mini-resnet needs at least 2 residual blocks".into(),
                    ));
                }
                if *classes < 2 {
                    return Err(Error::InvalidSpec("need at least 2 classes".into()));
                }
            }
        }
        Ok(())
    }
}

/// A named parameter tensor. During quantization-aware training this holds
/// the full-precision shadow values; the forward pass sees Q(value).
#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
}

/// One quantization block: a set of parameter tensors treated as a unit.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Block {
    pub name: String,
    /// Indices into the model's parameter list.
    pub params: Vec<usize>,
    /// Total scalar parameter count n_i.
    pub n: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BlockPartition {
    pub blocks: Vec<Block>,
}

impl BlockPartition {
    pub fn num_blocks(&self) -> usize {
        self.blocks.len()
    }

    pub fn total_params(&self) -> usize {
        self.blocks.iter().map(|b| b.n).sum()
    }

    /// Check cover and disjointness against a parameter list.
    pub fn validate(&self, params: &[Param]) -> Result<()> {
        let mut seen = vec![false; params.len()];
        for b in &self.blocks {
            if b.n == 0 {
                return Err(Error::InvalidSpec(format!("block {} is empty", b.name)));
            }
            let mut n = 0;
            for &pi in &b.params {
                if pi >= params.len() || seen[pi] {
                    return Err(Error::InvalidSpec(format!(
                        "block {} references parameter {pi} twice or out of range",
                        b.name
                    )));
                }
                seen[pi] = true;
                n += params[pi].value.numel();
            }
            if n != b.n {
                return Err(Error::InvalidSpec(format!(
                    "block {} claims n={} but holds {n} parameters",
                    b.name, b.n
                )));
            }
        }
        if !seen.iter().all(|&s| s) {
            return Err(Error::InvalidSpec("partition does not cover all parameters".into()));
        }
        Ok(())
    }
}

/// One minibatch: features [m, ...] plus class labels.
#[derive(Debug, Clone)]
pub struct Batch {
    pub features: Tensor,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Activation treatment at each site during a forward build.
pub enum ActHook<'a> {
    /// Full-precision activations.
    Off,
    /// Record ranges into the calibration state.
    Calibrate(&'a mut ActQuantState),
    /// Insert fake-quant nodes using calibrated ranges; sites with >= 32
    /// bits pass through unquantized.
    Quantize {
        state: &'a ActQuantState,
        bits: &'a [u32],
    },
}

impl ActHook<'_> {
    pub fn site(&mut self, tape: &mut Tape, site: usize, node: NodeId) -> Result<NodeId> {
        match self {
            ActHook::Off => Ok(node),
            ActHook::Calibrate(state) => {
                state.observe(site, tape.value(node).elems());
                Ok(node)
            }
            ActHook::Quantize { state, bits } => {
                let b = bits[site];
                if b >= 32 {
                    Ok(node)
                } else {
                    let q = state.quantizer_for(site, b)?;
                    tape.fake_quant(node, q)
                }
            }
        }
    }
}

/// Anything with parameters and a scalar loss buildable on a tape.
///
/// `pnodes` are the tape handles standing in for the parameters, positionally
/// matching [`LossModel::params`]; the trainer passes fake-quant wrappers
/// here so the forward pass sees quantized weights while gradients flow to
/// the shadow leaves.
pub trait LossModel {
    fn params(&self) -> &[Param];
    fn params_mut(&mut self) -> &mut [Param];
    fn build_loss(&self, tape: &mut Tape, pnodes: &[NodeId], batch: &Batch) -> Result<NodeId>;
}

/// Classification models additionally expose logits and activation sites.
pub trait ClassifierModel: LossModel {
    fn num_act_sites(&self) -> usize;
    fn build_logits(
        &self,
        tape: &mut Tape,
        pnodes: &[NodeId],
        features: NodeId,
        act: &mut ActHook,
    ) -> Result<NodeId>;
}

/// A zoo model: spec plus its parameter tensors.
#[derive(Debug, Clone)]
pub struct Model {
    spec: ModelSpec,
    params: Vec<Param>,
}

impl Model {
    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    fn flatten_features(&self, tape: &mut Tape, features: NodeId) -> Result<NodeId> {
        let rank = tape.value(features).shape().len();
        let x = if rank > 2 { tape.batch_flatten(features)? } else { features };
        let got = tape.value(x).shape()[1];
        let want = self.spec.input_dim();
        if got != want {
            return Err(Error::ShapeMismatch {
                op: "model_forward",
                detail: format!("model expects input dim {want}, batch has {got}"),
            });
        }
        Ok(x)
    }
}

impl LossModel for Model {
    fn params(&self) -> &[Param] {
        &self.params
    }

    fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    fn build_loss(&self, tape: &mut Tape, pnodes: &[NodeId], batch: &Batch) -> Result<NodeId> {
        let feats = tape.constant(batch.features.clone())?;
        let logits = self.build_logits(tape, pnodes, feats, &mut ActHook::Off)?;
        tape.softmax_cross_entropy(logits, &batch.labels)
    }
}

impl ClassifierModel for Model {
    /// One site per structural output: each layer for the MLP; stem, each
    /// residual block, and the head logits for the mini-resnet.
    fn num_act_sites(&self) -> usize {
        match &self.spec {
            ModelSpec::Mlp { layers, .. } => layers.len() - 1,
            ModelSpec::MiniResnet { residual_blocks, .. } => residual_blocks + 2,
        }
    }

    fn build_logits(
        &self,
        tape: &mut Tape,
        pnodes: &[NodeId],
        features: NodeId,
        act: &mut ActHook,
    ) -> Result<NodeId> {
        let mut h = self.flatten_features(tape, features)?;
        match &self.spec {
            ModelSpec::Mlp { layers, .. } => {
                let num_layers = layers.len() - 1;
                for l in 0..num_layers {
                    let z = tape.matmul(h, pnodes[2 * l])?;
                    let mut out = tape.add_bias(z, pnodes[2 * l + 1])?;
                    if l + 1 < num_layers {
                        out = tape.relu(out)?;
                    }
                    h = act.site(tape, l, out)?;
                }
                Ok(h)
            }
            ModelSpec::MiniResnet { residual_blocks, .. } => {
                let r = *residual_blocks;
                let z = tape.matmul(h, pnodes[0])?;
                let z = tape.add_bias(z, pnodes[1])?;
                let stem = tape.relu(z)?;
                h = act.site(tape, 0, stem)?;
                for i in 0..r {
                    let base = 2 + 4 * i;
                    let t = tape.matmul(h, pnodes[base])?;
                    let t = tape.add_bias(t, pnodes[base + 1])?;
                    let t = tape.relu(t)?;
                    let f = tape.matmul(t, pnodes[base + 2])?;
                    let f = tape.add_bias(f, pnodes[base + 3])?;
                    let s = tape.add(h, f)?;
                    let out = tape.relu(s)?;
                    h = act.site(tape, 1 + i, out)?;
                }
                let base = 2 + 4 * r;
                let z = tape.matmul(h, pnodes[base])?;
                let logits = tape.add_bias(z, pnodes[base + 1])?;
                act.site(tape, r + 1, logits)
            }
        }
    }
}

fn init_linear(
    rng: &mut ChaCha8Rng,
    params: &mut Vec<Param>,
    name: &str,
    fan_in: usize,
    fan_out: usize,
) {
    let bound = (1.0 / fan_in as f64).sqrt();
    let w: Vec<f64> = (0..fan_in * fan_out)
        .map(|_| rng.gen::<f64>() * 2.0 * bound - bound)
        .collect();
    params.push(Param {
        name: format!("{name}.w"),
        value: Tensor::new(vec![fan_in, fan_out], w).expect("sized"),
    });
    params.push(Param {
        name: format!("{name}.b"),
        value: Tensor::zeros(vec![fan_out]),
    });
}

/// Build an initialized model and its block partition.
///
/// Initialization is scaled-uniform fan-in (U(-a, a), a = 1/sqrt(fan_in))
/// from a ChaCha8 stream, so the same seed reproduces identical parameters.
pub fn build_model(spec: &ModelSpec, seed: u64) -> Result<(Model, BlockPartition)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = Vec::new();
    let mut blocks = Vec::new();

    let mut push_block = |name: String, param_ids: Vec<usize>, params: &[Param]| {
        let n = param_ids.iter().map(|&i| params[i].value.numel()).sum();
        blocks.push(Block {
            name,
            params: param_ids,
            n,
        });
    };

    match spec {
        ModelSpec::Mlp { layers, .. } => {
            for l in 0..layers.len() - 1 {
                init_linear(&mut rng, &mut params, &format!("layer{l}"), layers[l], layers[l + 1]);
                push_block(format!("layer{l}"), vec![2 * l, 2 * l + 1], &params);
            }
        }
        ModelSpec::MiniResnet {
            input_dim,
            width,
            residual_blocks,
            classes,
            ..
        } => {
            let per_layer = spec.granularity() == Granularity::PerLayer;
            init_linear(&mut rng, &mut params, "stem", *input_dim, *width);
            push_block("stem".into(), vec![0, 1], &params);
            for i in 0..*residual_blocks {
                let base = 2 + 4 * i;
                init_linear(&mut rng, &mut params, &format!("res{i}.fc0"), *width, *width);
                init_linear(&mut rng, &mut params, &format!("res{i}.fc1"), *width, *width);
                if per_layer {
                    push_block(format!("res{i}.fc0"), vec![base, base + 1], &params);
                    push_block(format!("res{i}.fc1"), vec![base + 2, base + 3], &params);
                } else {
                    push_block(
                        format!("res{i}"),
                        vec![base, base + 1, base + 2, base + 3],
                        &params,
                    );
                }
            }
            let base = 2 + 4 * residual_blocks;
            init_linear(&mut rng, &mut params, "head", *width, *classes);
            push_block("head".into(), vec![base, base + 1], &params);
        }
    }

    let model = Model {
        spec: spec.clone(),
        params,
    };
    let partition = BlockPartition { blocks };
    partition.validate(model.params())?;
    Ok((model, partition))
}

/// Register all model parameters on a tape, as differentiable leaves or as
/// constants (evaluation-only forward passes).
pub fn register_params(
    tape: &mut Tape,
    model: &impl LossModel,
    requires_grad: bool,
) -> Result<Vec<NodeId>> {
    model
        .params()
        .iter()
        .map(|p| {
            if requires_grad {
                tape.leaf(p.value.clone())
            } else {
                tape.constant(p.value.clone())
            }
        })
        .collect()
}

/// Mean loss over a batch with parameters held constant.
pub fn forward_loss(model: &impl LossModel, batch: &Batch) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::MalformedData("empty batch".into()));
    }
    let mut tape = Tape::new();
    let pnodes = register_params(&mut tape, model, false)?;
    let loss = model.build_loss(&mut tape, &pnodes, batch)?;
    Ok(tape.value(loss).scalar_value())
}

/// Concatenate a block's parameters into one flat vector (param order, row-major).
pub fn block_weights(model: &impl LossModel, block: &Block) -> Vec<f64> {
    let mut out = Vec::with_capacity(block.n);
    for &pi in &block.params {
        out.extend_from_slice(model.params()[pi].value.elems());
    }
    out
}

/// Write a flat vector back into a block's parameters.
pub fn set_block_weights(model: &mut impl LossModel, block: &Block, values: &[f64]) -> Result<()> {
    if values.len() != block.n {
        return Err(Error::ShapeMismatch {
            op: "set_block_weights",
            detail: format!("block {} has {} params, got {}", block.name, block.n, values.len()),
        });
    }
    let mut offset = 0;
    for &pi in &block.params {
        let p = &mut model.params_mut()[pi];
        let numel = p.value.numel();
        p.value.elems_mut().copy_from_slice(&values[offset..offset + numel]);
        offset += numel;
    }
    Ok(())
}
