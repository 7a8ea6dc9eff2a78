//! Shared setup for the benchmark targets.

use hawq_core::data::{synth_blobs, Dataset};
use hawq_core::model::{build_model, BlockPartition, Model, ModelSpec};
use hawq_core::trainer::{train_fp, OptimizerConfig};

/// A small trained mini-resnet plus its training data, sized so one Hessian
/// matvec is measurable but quick.
pub fn trained_fixture() -> (Model, BlockPartition, Dataset) {
    let spec = ModelSpec::MiniResnet {
        input_dim: 8,
        width: 32,
        residual_blocks: 2,
        classes: 4,
        granularity: None,
    };
    let data = synth_blobs(1000, 4, 8, 77).unwrap();
    let (mut model, part) = build_model(&spec, 3).unwrap();
    let opt = OptimizerConfig {
        lr: 0.05,
        batch_size: 128,
        max_epochs: 5,
        patience: 5,
        ..OptimizerConfig::default()
    };
    train_fp(&mut model, &data, &data, &opt, 3).unwrap();
    (model, part, data)
}
