//! Full-precision training and multi-stage quantization-aware fine-tuning.
//!
//! hawq_finetune quantizes one block per stage in the given order (shadow
//! weights + straight-through fake-quant) and trains until the train loss
//! stops improving; previously quantized blocks stay fake-quantized and by
//! default keep training. direct_quantize is the baseline that quantizes
//! every block at once and fine-tunes the whole network a single time.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::hessian::{HessianProbe, ProbeConfig};
use crate::model::{
    register_params, ActHook, Batch, BlockPartition, ClassifierModel, Model,
};
use crate::planner::{
    assign_bits, finetune_order, omega_scores, reverse_precision_plan, reverse_tuning_order,
    sensitivity_scores, ActBitsPolicy, BitPalette, Budget, PrecisionPlan, FULL_PRECISION_BITS,
};
use crate::quant::{fit_weight_quantizer, ActQuantState, Quantizer};
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;

const EVAL_CHUNK: usize = 512;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub momentum: f64,
    pub batch_size: usize,
    /// Epoch cap per stage.
    pub max_epochs: usize,
    /// Epochs without a >= min_delta train-loss improvement before a stage ends.
    pub patience: usize,
    pub min_delta: f64,
    /// Freeze shadow weights of already-quantized blocks in later stages.
    pub freeze_quantized: bool,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            lr: 1e-3,
            momentum: 0.9,
            batch_size: 128,
            max_epochs: 30,
            patience: 3,
            min_delta: 1e-4,
            freeze_quantized: false,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return Err(Error::InvalidSpec(format!("lr must be >= 0, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidSpec(format!(
                "momentum must be in [0, 1), got {}",
                self.momentum
            )));
        }
        if self.batch_size == 0 || self.max_epochs == 0 {
            return Err(Error::InvalidSpec("batch_size and max_epochs must be >= 1".into()));
        }
        if self.patience < 1 {
            return Err(Error::InvalidSpec("patience must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochRecord {
    pub stage: usize,
    pub epoch: usize,
    pub train_loss: f64,
    pub eval_acc: f64,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct TrainLog {
    pub records: Vec<EpochRecord>,
    /// Epochs-to-converge per stage.
    pub stage_epochs: Vec<usize>,
}

impl TrainLog {
    pub fn total_epochs(&self) -> usize {
        self.records.len()
    }

    pub fn final_accuracy(&self) -> f64 {
        self.records.last().map_or(0.0, |r| r.eval_acc)
    }

    /// First cumulative epoch whose accuracy is within `band` of the final
    /// accuracy (1-based count).
    pub fn epochs_to_band(&self, band: f64) -> usize {
        let target = self.final_accuracy() - band;
        self.records
            .iter()
            .position(|r| r.eval_acc >= target)
            .map_or(self.records.len(), |p| p + 1)
    }

    /// CSV with columns stage,epoch,loss,acc, written atomically.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["stage", "epoch", "loss", "acc"])
            .map_err(|e| Error::MalformedData(e.to_string()))?;
        for r in &self.records {
            w.write_record([
                r.stage.to_string(),
                r.epoch.to_string(),
                format!("{}", r.train_loss),
                format!("{}", r.eval_acc),
            ])
            .map_err(|e| Error::MalformedData(e.to_string()))?;
        }
        let bytes = w.into_inner().map_err(|e| Error::MalformedData(e.to_string()))?;
        crate::checkpoint::atomic_write(path, &bytes)
    }
}

/// Per-block quantization state. The model's parameters are the
/// full-precision shadow weights; the forward pass sees Q(shadow) while this
/// state's block is active.
#[derive(Debug, Clone)]
pub struct QuantizedBlockState {
    pub block: usize,
    pub bits: u32,
    /// None when bits >= 32 (quantization bypassed).
    pub quantizer: Option<Quantizer>,
    pub active: bool,
}

/// Quantization state of a whole model under (or after) fine-tuning.
#[derive(Debug, Clone)]
pub struct QuantState {
    pub partition: BlockPartition,
    pub blocks: Vec<QuantizedBlockState>,
    pub act: ActQuantState,
    /// Activation bits per site.
    pub a_bits: Vec<u32>,
}

impl QuantState {
    fn new(partition: &BlockPartition, plan: &PrecisionPlan, act_sites: usize) -> Result<Self> {
        let a_bits = plan.a_bits.resolve(act_sites)?;
        let blocks = plan
            .w_bits
            .iter()
            .enumerate()
            .map(|(i, &bits)| QuantizedBlockState {
                block: i,
                bits,
                quantizer: None,
                active: false,
            })
            .collect();
        Ok(QuantState {
            partition: partition.clone(),
            blocks,
            act: ActQuantState::new(act_sites),
            a_bits,
        })
    }

    /// Fit the block's quantizer to its current shadow weights and activate it.
    fn activate_block(&mut self, model: &impl ClassifierModel, block: usize) -> Result<()> {
        let bits = self.blocks[block].bits;
        self.blocks[block].quantizer = if bits >= FULL_PRECISION_BITS {
            None
        } else {
            let w = crate::model::block_weights(model, &self.partition.blocks[block]);
            Some(fit_weight_quantizer(&w, bits)?)
        };
        self.blocks[block].active = true;
        Ok(())
    }

    /// Wrap parameter nodes of active quantized blocks in fake-quant ops.
    fn effective_nodes(&self, tape: &mut Tape, pnodes: &[NodeId]) -> Result<Vec<NodeId>> {
        let mut eff = pnodes.to_vec();
        for st in &self.blocks {
            if !st.active {
                continue;
            }
            let Some(q) = &st.quantizer else { continue };
            for &pi in &self.partition.blocks[st.block].params {
                eff[pi] = tape.fake_quant(pnodes[pi], q.clone())?;
            }
        }
        Ok(eff)
    }

    /// Checkpoint-facing quantizer table rows (block, bits, scale).
    pub fn quantizer_table(&self) -> Vec<(u32, u32, f64)> {
        self.blocks
            .iter()
            .map(|st| {
                (
                    st.block as u32,
                    st.bits,
                    st.quantizer.as_ref().map_or(1.0, |q| q.scale()),
                )
            })
            .collect()
    }
}

struct Sgd {
    lr: f64,
    momentum: f64,
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    fn new(model: &impl ClassifierModel, opt: &OptimizerConfig) -> Self {
        Sgd {
            lr: opt.lr,
            momentum: opt.momentum,
            velocity: model.params().iter().map(|p| vec![0.0; p.value.numel()]).collect(),
        }
    }

    fn step(&mut self, model: &mut impl ClassifierModel, grads: &[Tensor], trainable: &[bool]) {
        for (i, p) in model.params_mut().iter_mut().enumerate() {
            if !trainable[i] {
                continue;
            }
            let vel = &mut self.velocity[i];
            let g = grads[i].elems();
            for ((w, v), &gi) in p.value.elems_mut().iter_mut().zip(vel.iter_mut()).zip(g) {
                *v = self.momentum * *v + gi;
                *w -= self.lr * *v;
            }
        }
    }
}

fn batch_loss_and_grads<M: ClassifierModel>(
    model: &M,
    batch: &Batch,
    qs: Option<&QuantState>,
) -> Result<(f64, Vec<Tensor>)> {
    let mut tape = Tape::new();
    let pnodes = register_params(&mut tape, model, true)?;
    let eff = match qs {
        Some(qs) => qs.effective_nodes(&mut tape, &pnodes)?,
        None => pnodes.clone(),
    };
    let feats = tape.constant(batch.features.clone())?;
    let logits = match qs {
        Some(qs) => {
            let mut hook = ActHook::Quantize {
                state: &qs.act,
                bits: &qs.a_bits,
            };
            model.build_logits(&mut tape, &eff, feats, &mut hook)?
        }
        None => model.build_logits(&mut tape, &eff, feats, &mut ActHook::Off)?,
    };
    let loss = tape.softmax_cross_entropy(logits, &batch.labels)?;
    let loss_value = tape.value(loss).scalar_value();
    let gmap = tape.backward(loss)?;
    let grads = gmap
        .entries()
        .iter()
        .map(|&(_, g)| tape.value(g).clone())
        .collect();
    Ok((loss_value, grads))
}

fn run_epoch<M: ClassifierModel>(
    model: &mut M,
    data: &Dataset,
    opt: &OptimizerConfig,
    sgd: &mut Sgd,
    qs: Option<&QuantState>,
    trainable: &[bool],
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let mut indices: Vec<usize> = (0..data.len()).collect();
    indices.shuffle(rng);
    let mut loss_sum = 0.0;
    let mut steps = 0usize;
    for chunk in indices.chunks(opt.batch_size) {
        let batch = data.gather(chunk);
        let (loss, grads) = batch_loss_and_grads(model, &batch, qs)?;
        sgd.step(model, &grads, trainable);
        loss_sum += loss;
        steps += 1;
    }
    Ok(loss_sum / steps.max(1) as f64)
}

/// Classification accuracy; ties in the argmax go to the lowest class index.
pub fn eval_accuracy<M: ClassifierModel>(
    model: &M,
    data: &Dataset,
    qs: Option<&QuantState>,
) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::MalformedData("empty evaluation dataset".into()));
    }
    let mut correct = 0usize;
    let all: Vec<usize> = (0..data.len()).collect();
    for chunk in all.chunks(EVAL_CHUNK) {
        let batch = data.gather(chunk);
        let mut tape = Tape::new();
        let pnodes = register_params(&mut tape, model, false)?;
        let eff = match qs {
            Some(qs) => qs.effective_nodes(&mut tape, &pnodes)?,
            None => pnodes.clone(),
        };
        let feats = tape.constant(batch.features.clone())?;
        let logits = match qs {
            Some(qs) => {
                let mut hook = ActHook::Quantize {
                    state: &qs.act,
                    bits: &qs.a_bits,
                };
                model.build_logits(&mut tape, &eff, feats, &mut hook)?
            }
            None => model.build_logits(&mut tape, &eff, feats, &mut ActHook::Off)?,
        };
        let t = tape.value(logits);
        let classes = t.shape()[1];
        for (i, &label) in batch.labels.iter().enumerate() {
            let row = &t.elems()[i * classes..(i + 1) * classes];
            let mut best = 0usize;
            for (c, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = c;
                }
            }
            if best == label {
                correct += 1;
            }
        }
    }
    Ok(correct as f64 / data.len() as f64)
}

fn map_divergence(err: Error, stage: usize, epoch: usize) -> Error {
    match err {
        Error::NonFinite { .. } => Error::Diverged { stage, epoch },
        other => other,
    }
}

/// Train until the loss stops improving by min_delta for `patience` epochs
/// or the epoch cap is reached. Returns epochs used.
#[allow(clippy::too_many_arguments)]
fn train_until_patience<M: ClassifierModel>(
    model: &mut M,
    data: &Dataset,
    eval: &Dataset,
    opt: &OptimizerConfig,
    sgd: &mut Sgd,
    qs: Option<&QuantState>,
    trainable: &[bool],
    rng: &mut ChaCha8Rng,
    stage: usize,
    log: &mut TrainLog,
) -> Result<usize> {
    let mut best = f64::INFINITY;
    let mut stale = 0usize;
    let mut epochs = 0usize;
    for epoch in 0..opt.max_epochs {
        let loss = run_epoch(model, data, opt, sgd, qs, trainable, rng)
            .map_err(|e| map_divergence(e, stage, epoch))?;
        if !loss.is_finite() {
            return Err(Error::Diverged { stage, epoch });
        }
        let acc = eval_accuracy(model, eval, qs).map_err(|e| map_divergence(e, stage, epoch))?;
        log.records.push(EpochRecord {
            stage,
            epoch,
            train_loss: loss,
            eval_acc: acc,
        });
        epochs = epoch + 1;
        if best - loss >= opt.min_delta {
            best = loss;
            stale = 0;
        } else {
            stale += 1;
            if stale >= opt.patience {
                break;
            }
        }
    }
    log.stage_epochs.push(epochs);
    Ok(epochs)
}

/// Full-precision SGD+momentum training of the base model.
pub fn train_fp<M: ClassifierModel>(
    model: &mut M,
    data: &Dataset,
    eval: &Dataset,
    opt: &OptimizerConfig,
    seed: u64,
) -> Result<TrainLog> {
    opt.validate()?;
    if data.is_empty() {
        return Err(Error::MalformedData("empty training dataset".into()));
    }
    let mut sgd = Sgd::new(model, opt);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let trainable = vec![true; model.params().len()];
    let mut log = TrainLog::default();
    train_until_patience(
        model, data, eval, opt, &mut sgd, None, &trainable, &mut rng, 0, &mut log,
    )?;
    Ok(log)
}

/// One pass over the training data (natural order) recording activation
/// ranges, then mark the state calibrated.
fn calibrate_activations<M: ClassifierModel>(
    model: &M,
    data: &Dataset,
    batch_size: usize,
    act: &mut ActQuantState,
) -> Result<()> {
    let all: Vec<usize> = (0..data.len()).collect();
    for chunk in all.chunks(batch_size) {
        let batch = data.gather(chunk);
        let mut tape = Tape::new();
        let pnodes = register_params(&mut tape, model, false)?;
        let feats = tape.constant(batch.features.clone())?;
        let mut hook = ActHook::Calibrate(act);
        model.build_logits(&mut tape, &pnodes, feats, &mut hook)?;
    }
    act.finish_calibration()
}

fn check_plan_order(
    partition: &BlockPartition,
    plan: &PrecisionPlan,
    order: &[usize],
) -> Result<()> {
    let b = partition.num_blocks();
    if plan.w_bits.len() != b {
        return Err(Error::InvalidSpec(format!(
            "plan covers {} blocks, partition has {b}",
            plan.w_bits.len()
        )));
    }
    let mut sorted = order.to_vec();
    sorted.sort_unstable();
    if sorted != (0..b).collect::<Vec<_>>() {
        return Err(Error::InvalidSpec(format!(
            "fine-tuning order {order:?} is not a permutation of 0..{b}"
        )));
    }
    Ok(())
}

/// Multi-stage Hessian-aware fine-tuning: stage t quantizes block order[t]
/// and trains until patience, with earlier blocks still fake-quantized and
/// activations quantized from the first stage after one calibration pass.
#[allow(clippy::too_many_arguments)]
pub fn hawq_finetune<M: ClassifierModel>(
    model: &mut M,
    partition: &BlockPartition,
    plan: &PrecisionPlan,
    order: &[usize],
    opt: &OptimizerConfig,
    data: &Dataset,
    eval: &Dataset,
    seed: u64,
) -> Result<(QuantState, TrainLog)> {
    opt.validate()?;
    check_plan_order(partition, plan, order)?;
    let mut qs = QuantState::new(partition, plan, model.num_act_sites())?;
    calibrate_activations(model, data, opt.batch_size, &mut qs.act)?;

    let mut sgd = Sgd::new(model, opt);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut log = TrainLog::default();
    for (stage, &blk) in order.iter().enumerate() {
        qs.activate_block(model, blk)?;
        let trainable = trainable_mask(model, partition, &qs, opt, blk);
        train_until_patience(
            model, data, eval, opt, &mut sgd, Some(&qs), &trainable, &mut rng, stage, &mut log,
        )?;
    }
    Ok((qs, log))
}

fn trainable_mask<M: ClassifierModel>(
    model: &M,
    partition: &BlockPartition,
    qs: &QuantState,
    opt: &OptimizerConfig,
    current_block: usize,
) -> Vec<bool> {
    let mut mask = vec![true; model.params().len()];
    if opt.freeze_quantized {
        for st in &qs.blocks {
            if st.active && st.block != current_block {
                for &pi in &partition.blocks[st.block].params {
                    mask[pi] = false;
                }
            }
        }
    }
    mask
}

/// Baseline: quantize every block at once, then fine-tune the whole network
/// a single time until patience.
#[allow(clippy::too_many_arguments)]
pub fn direct_quantize<M: ClassifierModel>(
    model: &mut M,
    partition: &BlockPartition,
    plan: &PrecisionPlan,
    opt: &OptimizerConfig,
    data: &Dataset,
    eval: &Dataset,
    seed: u64,
) -> Result<(QuantState, TrainLog)> {
    opt.validate()?;
    if plan.w_bits.len() != partition.num_blocks() {
        return Err(Error::InvalidSpec(format!(
            "plan covers {} blocks, partition has {}",
            plan.w_bits.len(),
            partition.num_blocks()
        )));
    }
    let mut qs = QuantState::new(partition, plan, model.num_act_sites())?;
    calibrate_activations(model, data, opt.batch_size, &mut qs.act)?;
    for blk in 0..partition.num_blocks() {
        qs.activate_block(model, blk)?;
    }
    let mut sgd = Sgd::new(model, opt);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut log = TrainLog::default();
    let trainable = vec![true; model.params().len()];
    train_until_patience(
        model, data, eval, opt, &mut sgd, Some(&qs), &trainable, &mut rng, 0, &mut log,
    )?;
    Ok((qs, log))
}

/// Configuration for the ablation harness.
#[derive(Debug, Clone)]
pub struct AblateConfig {
    pub probe: ProbeConfig,
    pub palette: BitPalette,
    pub budget: Budget,
    pub act_policy: ActBitsPolicy,
    pub opt: OptimizerConfig,
    pub seed: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblateOutcome {
    pub variant: String,
    pub accuracy: f64,
    pub w_comp: f64,
    pub size_bits: u64,
    pub total_epochs: usize,
    pub stage_epochs: Vec<usize>,
    /// First cumulative epoch within 0.5 accuracy points of the final value.
    pub epochs_to_band: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationReport {
    pub schema: String,
    pub seed: u64,
    pub w_bits: Vec<u32>,
    pub reverse_w_bits: Vec<u32>,
    pub order: Vec<usize>,
    pub variants: Vec<AblateOutcome>,
}

pub struct AblationRun {
    pub report: AblationReport,
    pub logs: Vec<(String, TrainLog)>,
}

fn outcome(
    variant: &str,
    partition: &BlockPartition,
    plan: &PrecisionPlan,
    accuracy: f64,
    log: &TrainLog,
) -> AblateOutcome {
    let total = partition.total_params() as f64;
    AblateOutcome {
        variant: variant.to_string(),
        accuracy,
        w_comp: 32.0 * total / plan.size_bits as f64,
        size_bits: plan.size_bits,
        total_epochs: log.total_epochs(),
        stage_epochs: log.stage_epochs.clone(),
        epochs_to_band: log.epochs_to_band(0.005),
    }
}

/// Run {HAWQ, reverse-precision, reverse-tuning, direct} from one pretrained
/// model with shared seeds and report accuracy, compression, and
/// epochs-to-converge per variant.
///
/// Reverse-precision retrains the whole network at once under the reversed
/// bit assignment (no block-wise schedule); reverse-tuning keeps the HAWQ
/// plan but visits blocks in ascending Ω order; direct applies the HAWQ plan
/// all at once.
pub fn ablate(
    model: &Model,
    partition: &BlockPartition,
    data: &Dataset,
    eval: &Dataset,
    cfg: &AblateConfig,
) -> Result<AblationRun> {
    let estimates: Vec<_> = {
        let mut probe = HessianProbe::new(model, partition, data, &cfg.probe)?;
        probe.top_eigen_all(&cfg.probe)?.iter().map(|e| e.record()).collect()
    };
    let records = sensitivity_scores(&estimates, partition)?;
    let mut plan = assign_bits(&records, &cfg.palette, cfg.budget)?;
    plan.a_bits = cfg.act_policy.resolve(model.num_act_sites());
    let omegas = omega_scores(model, partition, &plan, &estimates)?;
    let order = finetune_order(&omegas);
    let rev_plan = reverse_precision_plan(&plan, partition)?;
    let rev_order = reverse_tuning_order(&order);

    let mut variants = Vec::new();
    let mut logs = Vec::new();

    {
        let mut m = model.clone();
        let (qs, log) =
            hawq_finetune(&mut m, partition, &plan, &order, &cfg.opt, data, eval, cfg.seed)?;
        let acc = eval_accuracy(&m, eval, Some(&qs))?;
        variants.push(outcome("hawq", partition, &plan, acc, &log));
        logs.push(("hawq".to_string(), log));
    }
    {
        let mut m = model.clone();
        let (qs, log) =
            direct_quantize(&mut m, partition, &rev_plan, &cfg.opt, data, eval, cfg.seed)?;
        let acc = eval_accuracy(&m, eval, Some(&qs))?;
        variants.push(outcome("reverse-precision", partition, &rev_plan, acc, &log));
        logs.push(("reverse-precision".to_string(), log));
    }
    {
        let mut m = model.clone();
        let (qs, log) =
            hawq_finetune(&mut m, partition, &plan, &rev_order, &cfg.opt, data, eval, cfg.seed)?;
        let acc = eval_accuracy(&m, eval, Some(&qs))?;
        variants.push(outcome("reverse-tuning", partition, &plan, acc, &log));
        logs.push(("reverse-tuning".to_string(), log));
    }
    {
        let mut m = model.clone();
        let (qs, log) =
            direct_quantize(&mut m, partition, &plan, &cfg.opt, data, eval, cfg.seed)?;
        let acc = eval_accuracy(&m, eval, Some(&qs))?;
        variants.push(outcome("direct", partition, &plan, acc, &log));
        logs.push(("direct".to_string(), log));
    }

    Ok(AblationRun {
        report: AblationReport {
            schema: "hawqkit-ablate/1".to_string(),
            seed: cfg.seed,
            w_bits: plan.w_bits.clone(),
            reverse_w_bits: rev_plan.w_bits.clone(),
            order,
            variants,
        },
        logs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth_blobs;
    use crate::model::{build_model, LossModel, ModelSpec};
    use crate::planner::ActivationBits;
    use crate::quant::quantize;

    fn blobs(n: usize, seed: u64) -> Dataset {
        synth_blobs(n, 3, 4, seed).unwrap()
    }

    fn mlp() -> ModelSpec {
        ModelSpec::Mlp {
            layers: vec![4, 8, 3],
            granularity: None,
        }
    }

    fn resnet() -> ModelSpec {
        ModelSpec::MiniResnet {
            input_dim: 4,
            width: 8,
            residual_blocks: 2,
            classes: 3,
            granularity: None,
        }
    }

    fn quick_opt() -> OptimizerConfig {
        OptimizerConfig {
            lr: 0.05,
            batch_size: 64,
            max_epochs: 25,
            patience: 25,
            ..OptimizerConfig::default()
        }
    }

    fn uniform_plan(partition: &BlockPartition, bits: u32, a_bits: u32) -> PrecisionPlan {
        PrecisionPlan {
            w_bits: vec![bits; partition.num_blocks()],
            a_bits: ActivationBits::Global(a_bits),
            size_bits: partition.total_params() as u64 * bits as u64,
            s_rank: (0..partition.num_blocks()).collect(),
        }
    }

    #[test]
    fn fp_training_solves_separable_blobs() {
        let data = blobs(300, 3);
        let (mut model, _) = build_model(&mlp(), 0).unwrap();
        train_fp(&mut model, &data, &data, &quick_opt(), 1).unwrap();
        let acc = eval_accuracy(&model, &data, None).unwrap();
        assert!(acc >= 0.99, "train accuracy {acc}");
    }

    #[test]
    fn zero_learning_rate_leaves_parameters_unchanged() {
        let data = blobs(100, 4);
        let (mut model, _) = build_model(&mlp(), 0).unwrap();
        let before: Vec<Vec<u64>> = model
            .params()
            .iter()
            .map(|p| p.value.elems().iter().map(|v| v.to_bits()).collect())
            .collect();
        let opt = OptimizerConfig {
            lr: 0.0,
            max_epochs: 2,
            ..OptimizerConfig::default()
        };
        train_fp(&mut model, &data, &data, &opt, 1).unwrap();
        let after: Vec<Vec<u64>> = model
            .params()
            .iter()
            .map(|p| p.value.elems().iter().map(|v| v.to_bits()).collect())
            .collect();
        assert_eq!(before, after);
    }

    #[test]
    fn training_is_bit_deterministic() {
        let data = blobs(150, 6);
        let run = || {
            let (mut model, _) = build_model(&mlp(), 2).unwrap();
            let log = train_fp(&mut model, &data, &data, &quick_opt(), 7).unwrap();
            log.records.last().unwrap().train_loss.to_bits()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn single_block_finetune_reduces_to_direct() {
        let spec = ModelSpec::Mlp {
            layers: vec![4, 3],
            granularity: None,
        };
        let data = blobs(120, 8);
        let (mut m1, part) = build_model(&spec, 3).unwrap();
        let mut m2 = m1.clone();
        assert_eq!(part.num_blocks(), 1);
        let plan = uniform_plan(&part, 4, 8);
        let opt = OptimizerConfig {
            lr: 0.05,
            max_epochs: 6,
            ..OptimizerConfig::default()
        };
        let (_, log1) = hawq_finetune(&mut m1, &part, &plan, &[0], &opt, &data, &data, 5).unwrap();
        let (_, log2) = direct_quantize(&mut m2, &part, &plan, &opt, &data, &data, 5).unwrap();
        assert_eq!(log1.records.len(), log2.records.len());
        for (a, b) in log1.records.iter().zip(&log2.records) {
            assert_eq!(a.train_loss.to_bits(), b.train_loss.to_bits());
            assert_eq!(a.eval_acc, b.eval_acc);
        }
        for (pa, pb) in m1.params().iter().zip(m2.params()) {
            assert_eq!(pa.value.elems(), pb.value.elems());
        }
    }

    #[test]
    fn thirty_two_bit_plan_is_identity() {
        let data = blobs(100, 9);
        let (mut model, part) = build_model(&resnet(), 4).unwrap();
        train_fp(&mut model, &data, &data, &quick_opt(), 2).unwrap();
        let acc_fp = eval_accuracy(&model, &data, None).unwrap();
        let plan = uniform_plan(&part, 32, 32);
        let opt = OptimizerConfig {
            lr: 0.0,
            max_epochs: 1,
            ..OptimizerConfig::default()
        };
        let (qs, _) = direct_quantize(&mut model, &part, &plan, &opt, &data, &data, 5).unwrap();
        let acc_q = eval_accuracy(&model, &data, Some(&qs)).unwrap();
        assert_eq!(acc_fp, acc_q);
    }

    #[test]
    fn finetune_quantizes_every_block_onto_its_grid() {
        let data = blobs(200, 10);
        let (mut model, part) = build_model(&resnet(), 5).unwrap();
        train_fp(&mut model, &data, &data, &quick_opt(), 3).unwrap();
        let plan = uniform_plan(&part, 4, 8);
        let order: Vec<usize> = (0..part.num_blocks()).collect();
        let opt = OptimizerConfig {
            lr: 0.02,
            max_epochs: 3,
            ..OptimizerConfig::default()
        };
        let (qs, log) =
            hawq_finetune(&mut model, &part, &plan, &order, &opt, &data, &data, 6).unwrap();
        assert_eq!(log.stage_epochs.len(), part.num_blocks());
        assert!(log.stage_epochs.iter().all(|&e| e >= 1 && e <= opt.max_epochs));
        for st in &qs.blocks {
            assert!(st.active);
            let q = st.quantizer.as_ref().unwrap();
            // effective weights Q(shadow) sit on the level grid
            for &pi in &part.blocks[st.block].params {
                let quantized = quantize(&model.params()[pi].value, q);
                assert!(quantized.elems().iter().all(|&v| q.is_on_grid(v)));
            }
            // shadow weights stay full precision (generically off-grid)
            let shadow = crate::model::block_weights(&model, &part.blocks[st.block]);
            assert!(shadow.iter().any(|&w| !q.is_on_grid(w)));
        }
        // disabling fake-quant recovers a usable fp model
        let acc = eval_accuracy(&model, &data, None).unwrap();
        assert!(acc.is_finite());
    }

    #[test]
    fn finetune_log_is_reproducible() {
        let data = blobs(150, 11);
        let run = || {
            let (mut model, part) = build_model(&resnet(), 6).unwrap();
            let plan = uniform_plan(&part, 4, 8);
            let order: Vec<usize> = (0..part.num_blocks()).collect();
            let opt = OptimizerConfig {
                lr: 0.02,
                max_epochs: 2,
                ..OptimizerConfig::default()
            };
            let (_, log) =
                hawq_finetune(&mut model, &part, &plan, &order, &opt, &data, &data, 13).unwrap();
            log.records
                .iter()
                .map(|r| (r.train_loss.to_bits(), r.eval_acc.to_bits()))
                .collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn freeze_flag_masks_previously_quantized_blocks() {
        let (model, part) = build_model(&resnet(), 7).unwrap();
        let plan = uniform_plan(&part, 4, 8);
        let mut qs = QuantState::new(&part, &plan, model.num_act_sites()).unwrap();
        qs.activate_block(&model, 0).unwrap();
        qs.activate_block(&model, 2).unwrap();
        let opt = OptimizerConfig {
            freeze_quantized: true,
            ..OptimizerConfig::default()
        };
        let mask = trainable_mask(&model, &part, &qs, &opt, 2);
        for &pi in &part.blocks[0].params {
            assert!(!mask[pi], "block 0 should be frozen");
        }
        for &pi in &part.blocks[2].params {
            assert!(mask[pi], "current block must stay trainable");
        }
        for &pi in &part.blocks[1].params {
            assert!(mask[pi], "untouched blocks stay trainable");
        }
        let unfrozen = trainable_mask(&model, &part, &qs, &OptimizerConfig::default(), 2);
        assert!(unfrozen.iter().all(|&m| m));
    }

    #[test]
    fn freeze_flag_changes_training_outcome() {
        let data = blobs(150, 12);
        let run = |freeze: bool| {
            let (mut model, part) = build_model(&resnet(), 8).unwrap();
            train_fp(&mut model, &data, &data, &quick_opt(), 1).unwrap();
            let plan = uniform_plan(&part, 3, 8);
            let order: Vec<usize> = (0..part.num_blocks()).collect();
            let opt = OptimizerConfig {
                lr: 0.02,
                max_epochs: 2,
                freeze_quantized: freeze,
                ..OptimizerConfig::default()
            };
            let (_, _) =
                hawq_finetune(&mut model, &part, &plan, &order, &opt, &data, &data, 3).unwrap();
            crate::model::block_weights(&model, &part.blocks[order[0]])
        };
        assert_ne!(run(true), run(false));
    }

    #[test]
    fn divergence_is_reported_with_stage_and_epoch() {
        let data = blobs(100, 13);
        let (mut model, _) = build_model(&mlp(), 0).unwrap();
        let opt = OptimizerConfig {
            lr: 1e200,
            max_epochs: 5,
            patience: 5,
            ..OptimizerConfig::default()
        };
        let err = train_fp(&mut model, &data, &data, &opt, 1).unwrap_err();
        assert!(matches!(err, Error::Diverged { .. }), "got {err}");
    }

    #[test]
    fn eight_bit_plan_stays_close_to_fp_on_easy_task() {
        let data = blobs(400, 14);
        let eval = blobs(200, 15);
        let (mut model, part) = build_model(&mlp(), 1).unwrap();
        train_fp(&mut model, &data, &eval, &quick_opt(), 2).unwrap();
        let acc_fp = eval_accuracy(&model, &eval, None).unwrap();
        let plan = uniform_plan(&part, 8, 8);
        let order: Vec<usize> = (0..part.num_blocks()).collect();
        let opt = OptimizerConfig {
            lr: 0.02,
            max_epochs: 5,
            ..OptimizerConfig::default()
        };
        let (qs, _) =
            hawq_finetune(&mut model, &part, &plan, &order, &opt, &data, &eval, 3).unwrap();
        let acc_q = eval_accuracy(&model, &eval, Some(&qs)).unwrap();
        assert!(
            acc_q >= acc_fp - 0.005,
            "8-bit accuracy {acc_q} fell more than half a point below fp {acc_fp}"
        );
    }

    #[test]
    fn uncalibrated_activation_state_errors_in_eval() {
        let data = blobs(50, 16);
        let (model, part) = build_model(&mlp(), 1).unwrap();
        let plan = uniform_plan(&part, 8, 4);
        let qs = QuantState::new(&part, &plan, model.num_act_sites()).unwrap();
        assert!(eval_accuracy(&model, &data, Some(&qs)).is_err());
    }

    #[test]
    fn plan_order_validation() {
        let data = blobs(50, 17);
        let (mut model, part) = build_model(&resnet(), 1).unwrap();
        let plan = uniform_plan(&part, 4, 8);
        let opt = quick_opt();
        let bad_order = vec![0usize; part.num_blocks()];
        assert!(hawq_finetune(&mut model, &part, &plan, &bad_order, &opt, &data, &data, 0).is_err());
        let mut short_plan = plan.clone();
        short_plan.w_bits.pop();
        let order: Vec<usize> = (0..part.num_blocks()).collect();
        assert!(hawq_finetune(&mut model, &part, &short_plan, &order, &opt, &data, &data, 0).is_err());
    }

    #[test]
    fn train_log_csv_and_band() {
        let dir = tempfile::tempdir().unwrap();
        let mut log = TrainLog::default();
        for (i, acc) in [0.3, 0.8, 0.96, 0.97, 0.969].iter().enumerate() {
            log.records.push(EpochRecord {
                stage: 0,
                epoch: i,
                train_loss: 1.0 / (i + 1) as f64,
                eval_acc: *acc,
            });
        }
        log.stage_epochs.push(5);
        // final 0.969; band 0.005 -> first epoch with acc >= 0.964 is epoch 4 (1-based)
        assert_eq!(log.epochs_to_band(0.005), 4);
        let path = dir.path().join("log.csv");
        log.write_csv(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("stage,epoch,loss,acc\n"));
        assert_eq!(text.lines().count(), 6);
    }
}
