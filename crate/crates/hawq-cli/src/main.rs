//! hawqkit: Hessian-aware mixed-precision quantization pipeline.
//!
//! Stages compose through files in the configured output directory:
//! train -> fp.ckpt, probe -> eigen.json, plan -> plan.json + scores.csv,
//! finetune -> quant.ckpt + finetune_summary.json, report -> report.json.
//! Errors leave a machine-readable JSON object on stderr and a nonzero exit.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use hawq_core::checkpoint::{Checkpoint, QuantTableEntry};
use hawq_core::config::RunConfig;
use hawq_core::data::Dataset;
use hawq_core::hessian::{EigenRecord, HessianProbe};
use hawq_core::landscape;
use hawq_core::model::{build_model, BlockPartition, ClassifierModel, Model};
use hawq_core::planner::{
    assign_bits, finetune_order, omega_scores, reverse_tuning_order, score_table,
    sensitivity_scores, write_scores_csv, OmegaRecord, PrecisionPlan,
};
use hawq_core::report::{compression_report, verify_fixture, write_json};
use hawq_core::trainer::{
    ablate, direct_quantize, eval_accuracy, hawq_finetune, train_fp, AblateConfig, QuantState,
    TrainLog,
};

#[derive(Parser)]
#[command(name = "hawqkit", version, about = "Hessian-aware mixed-precision quantization")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct ConfigArg {
    /// TOML run configuration.
    #[arg(long, short)]
    config: PathBuf,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train the full-precision base model.
    Train {
        #[command(flatten)]
        cfg: ConfigArg,
    },
    /// Estimate each block's top Hessian eigenvalue on a checkpoint.
    Probe {
        #[command(flatten)]
        cfg: ConfigArg,
        /// Checkpoint to probe (default: <out_dir>/fp.ckpt).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Rank blocks by S_i = lambda/n and assign bit widths under the budget.
    Plan {
        #[command(flatten)]
        cfg: ConfigArg,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Eigenvalue records (default: <out_dir>/eigen.json).
        #[arg(long)]
        eigen: Option<PathBuf>,
    },
    /// Multi-stage quantization-aware fine-tuning following the plan.
    Finetune {
        #[command(flatten)]
        cfg: ConfigArg,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Plan file (default: <out_dir>/plan.json).
        #[arg(long)]
        plan: Option<PathBuf>,
        /// Quantize all blocks at once and fine-tune a single time.
        #[arg(long)]
        direct: bool,
        /// Visit blocks in ascending omega order instead of descending.
        #[arg(long)]
        reverse_order: bool,
    },
    /// Compare HAWQ with reverse-precision, reverse-tuning, and direct.
    Ablate {
        #[command(flatten)]
        cfg: ConfigArg,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Loss-landscape scans along dominant Hessian eigenvectors.
    Landscape {
        #[command(flatten)]
        cfg: ConfigArg,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Scan a single block (default: every block).
        #[arg(long)]
        block: Option<usize>,
        /// Scan the eps1 x eps2 surface along the two dominant eigenvectors.
        #[arg(long)]
        two_d: bool,
        /// Grid points per axis (default: 41 for 1-D, 21 for 2-D).
        #[arg(long)]
        points: Option<usize>,
        /// Half-width of the scan interval.
        #[arg(long, default_value_t = 0.5)]
        span: f64,
    },
    /// Compression report from a plan, or fixture verification.
    Report {
        /// Verify a fixture CSV (block,n,w_bits,expected_wcomp) and exit.
        #[arg(long, value_name = "CSV")]
        verify_fixture: Option<PathBuf>,
        #[arg(long, short)]
        config: Option<PathBuf>,
        #[arg(long)]
        plan: Option<PathBuf>,
        /// Fine-tune summary supplying the accuracy field.
        #[arg(long)]
        summary: Option<PathBuf>,
    },
}

const FP_CKPT: &str = "fp.ckpt";
const QUANT_CKPT: &str = "quant.ckpt";
const EIGEN_JSON: &str = "eigen.json";
const PLAN_JSON: &str = "plan.json";

#[derive(Serialize, Deserialize)]
struct EigenFile {
    schema: String,
    records: Vec<EigenRecord>,
}

#[derive(Serialize, Deserialize)]
struct PlanFile {
    schema: String,
    plan: PrecisionPlan,
    /// Blocks in descending omega order.
    order: Vec<usize>,
    omega: Vec<OmegaRecord>,
    w_comp: f64,
}

#[derive(Serialize, Deserialize)]
struct TrainSummary {
    schema: String,
    final_loss: f64,
    accuracy: f64,
    epochs: usize,
}

#[derive(Serialize, Deserialize)]
struct FinetuneSummary {
    schema: String,
    strategy: String,
    accuracy: f64,
    w_comp: f64,
    size_bits: u64,
    total_epochs: usize,
    stage_epochs: Vec<usize>,
    order: Vec<usize>,
}

fn load_setup(cfg_path: &Path) -> Result<(RunConfig, Model, BlockPartition, Dataset, Dataset)> {
    let cfg = RunConfig::load(cfg_path)?;
    let (model, partition) = build_model(&cfg.model, cfg.seed)?;
    let train = cfg.data.load_train()?;
    let eval = cfg.data.load_eval()?.unwrap_or_else(|| train.clone());
    if train.classes() != cfg.model.classes() {
        bail!(
            "dataset has {} classes but the model outputs {}",
            train.classes(),
            cfg.model.classes()
        );
    }
    Ok((cfg, model, partition, train, eval))
}

fn load_model_from(
    cfg: &RunConfig,
    model: &mut Model,
    explicit: &Option<PathBuf>,
    default_name: &str,
) -> Result<Vec<QuantTableEntry>> {
    let path = explicit
        .clone()
        .unwrap_or_else(|| cfg.out_dir.join(default_name));
    let ck = Checkpoint::load(&path).with_context(|| format!("loading {}", path.display()))?;
    ck.load_into(model)?;
    Ok(ck.quantizers)
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

/// Pipeline files carry a versioned schema tag; reject mismatches so stages
/// can't silently consume the wrong artifact.
fn check_schema(path: &Path, got: &str, want: &str) -> Result<()> {
    if got != want {
        bail!(
            "{} has schema {got:?}, expected {want:?}",
            path.display()
        );
    }
    Ok(())
}

fn cmd_train(cfg_path: &Path) -> Result<()> {
    let (cfg, mut model, _partition, train, eval) = load_setup(cfg_path)?;
    let log = train_fp(&mut model, &train, &eval, &cfg.optimizer, cfg.seed)?;
    let accuracy = eval_accuracy(&model, &eval, None)?;
    Checkpoint::from_model(&model, vec![]).save(&cfg.out_dir.join(FP_CKPT))?;
    log.write_csv(&cfg.out_dir.join("train_log.csv"))?;
    let summary = TrainSummary {
        schema: "hawqkit-train/1".into(),
        final_loss: log.records.last().map_or(f64::NAN, |r| r.train_loss),
        accuracy,
        epochs: log.total_epochs(),
    };
    write_json(&cfg.out_dir.join("train_summary.json"), &summary)?;
    println!(
        "trained {} epochs, accuracy {:.4}; wrote {}",
        summary.epochs,
        accuracy,
        cfg.out_dir.join(FP_CKPT).display()
    );
    Ok(())
}

fn cmd_probe(cfg_path: &Path, checkpoint: &Option<PathBuf>) -> Result<()> {
    let (cfg, mut model, partition, train, _eval) = load_setup(cfg_path)?;
    load_model_from(&cfg, &mut model, checkpoint, FP_CKPT)?;
    let mut probe = HessianProbe::new(&model, &partition, &train, &cfg.probe)?;
    let estimates = probe.top_eigen_all(&cfg.probe)?;
    let file = EigenFile {
        schema: "hawqkit-eigen/1".into(),
        records: estimates.iter().map(|e| e.record()).collect(),
    };
    let path = cfg.out_dir.join(EIGEN_JSON);
    write_json(&path, &file)?;
    println!(
        "probed {} blocks ({} backward passes); wrote {}",
        partition.num_blocks(),
        probe.backward_passes,
        path.display()
    );
    Ok(())
}

fn cmd_plan(cfg_path: &Path, checkpoint: &Option<PathBuf>, eigen: &Option<PathBuf>) -> Result<()> {
    let (cfg, mut model, partition, _train, _eval) = load_setup(cfg_path)?;
    load_model_from(&cfg, &mut model, checkpoint, FP_CKPT)?;
    let eigen_path = eigen.clone().unwrap_or_else(|| cfg.out_dir.join(EIGEN_JSON));
    let eigen_file: EigenFile = read_json(&eigen_path)?;
    check_schema(&eigen_path, &eigen_file.schema, "hawqkit-eigen/1")?;
    let records = sensitivity_scores(&eigen_file.records, &partition)?;
    let mut plan = assign_bits(&records, &cfg.plan.palette()?, cfg.plan.budget()?)?;
    plan.a_bits = cfg.plan.act_policy().resolve(model.num_act_sites());
    let omega = omega_scores(&model, &partition, &plan, &eigen_file.records)?;
    let order = finetune_order(&omega);
    let w_comp = 32.0 * partition.total_params() as f64 / plan.size_bits as f64;
    write_scores_csv(
        &cfg.out_dir.join("scores.csv"),
        &score_table(&records, &plan, &omega),
    )?;
    let file = PlanFile {
        schema: "hawqkit-plan/1".into(),
        plan,
        order,
        omega,
        w_comp,
    };
    let path = cfg.out_dir.join(PLAN_JSON);
    write_json(&path, &file)?;
    println!(
        "assigned bits {:?} (W-Comp {:.2}); wrote {}",
        file.plan.w_bits,
        w_comp,
        path.display()
    );
    Ok(())
}

fn quant_table(qs: &QuantState) -> Vec<QuantTableEntry> {
    qs.quantizer_table()
        .into_iter()
        .map(|(block, bits, scale)| QuantTableEntry { block, bits, scale })
        .collect()
}

fn cmd_finetune(
    cfg_path: &Path,
    checkpoint: &Option<PathBuf>,
    plan: &Option<PathBuf>,
    direct: bool,
    reverse_order: bool,
) -> Result<()> {
    let (cfg, mut model, partition, train, eval) = load_setup(cfg_path)?;
    load_model_from(&cfg, &mut model, checkpoint, FP_CKPT)?;
    let plan_path = plan.clone().unwrap_or_else(|| cfg.out_dir.join(PLAN_JSON));
    let plan_file: PlanFile = read_json(&plan_path)?;
    check_schema(&plan_path, &plan_file.schema, "hawqkit-plan/1")?;
    let order = if reverse_order {
        reverse_tuning_order(&plan_file.order)
    } else {
        plan_file.order.clone()
    };
    let strategy = if direct {
        "direct"
    } else if reverse_order {
        "reverse-tuning"
    } else {
        "hawq"
    };
    let (qs, log): (QuantState, TrainLog) = if direct {
        direct_quantize(
            &mut model,
            &partition,
            &plan_file.plan,
            &cfg.optimizer,
            &train,
            &eval,
            cfg.seed,
        )?
    } else {
        hawq_finetune(
            &mut model,
            &partition,
            &plan_file.plan,
            &order,
            &cfg.optimizer,
            &train,
            &eval,
            cfg.seed,
        )?
    };
    let accuracy = eval_accuracy(&model, &eval, Some(&qs))?;
    Checkpoint::from_model(&model, quant_table(&qs)).save(&cfg.out_dir.join(QUANT_CKPT))?;
    log.write_csv(&cfg.out_dir.join("finetune_log.csv"))?;
    let summary = FinetuneSummary {
        schema: "hawqkit-finetune/1".into(),
        strategy: strategy.into(),
        accuracy,
        w_comp: plan_file.w_comp,
        size_bits: plan_file.plan.size_bits,
        total_epochs: log.total_epochs(),
        stage_epochs: log.stage_epochs.clone(),
        order,
    };
    write_json(&cfg.out_dir.join("finetune_summary.json"), &summary)?;
    println!(
        "{strategy} fine-tuning done in {} epochs, accuracy {:.4}; wrote {}",
        summary.total_epochs,
        accuracy,
        cfg.out_dir.join(QUANT_CKPT).display()
    );
    Ok(())
}

fn cmd_ablate(cfg_path: &Path, checkpoint: &Option<PathBuf>) -> Result<()> {
    let (cfg, mut model, partition, train, eval) = load_setup(cfg_path)?;
    load_model_from(&cfg, &mut model, checkpoint, FP_CKPT)?;
    let ab = AblateConfig {
        probe: cfg.probe.clone(),
        palette: cfg.plan.palette()?,
        budget: cfg.plan.budget()?,
        act_policy: cfg.plan.act_policy(),
        opt: cfg.optimizer.clone(),
        seed: cfg.seed,
    };
    let run = ablate(&model, &partition, &train, &eval, &ab)?;
    for (name, log) in &run.logs {
        log.write_csv(&cfg.out_dir.join(format!("ablate_log_{name}.csv")))?;
    }
    let path = cfg.out_dir.join("ablate.json");
    write_json(&path, &run.report)?;
    for v in &run.report.variants {
        println!(
            "{:<18} accuracy {:.4}  W-Comp {:>6.2}  epochs {}",
            v.variant, v.accuracy, v.w_comp, v.total_epochs
        );
    }
    println!("wrote {}", path.display());
    Ok(())
}

fn cmd_landscape(
    cfg_path: &Path,
    checkpoint: &Option<PathBuf>,
    block: Option<usize>,
    two_d: bool,
    points: Option<usize>,
    span: f64,
) -> Result<()> {
    if !(span > 0.0) {
        bail!("--span must be positive");
    }
    let points = points.unwrap_or(if two_d { 21 } else { 41 });
    if points < 2 || points.is_multiple_of(2) {
        bail!("--points must be an odd number >= 3 so the grid contains 0");
    }
    let (cfg, mut model, partition, train, _eval) = load_setup(cfg_path)?;
    load_model_from(&cfg, &mut model, checkpoint, FP_CKPT)?;
    let grid = landscape::linspace(-span, span, points);
    let blocks: Vec<usize> = match block {
        Some(b) if b < partition.num_blocks() => vec![b],
        Some(b) => bail!("block {b} out of range ({} blocks)", partition.num_blocks()),
        None => (0..partition.num_blocks()).collect(),
    };

    // eigenvectors come from a fresh probe of the checkpointed model; scans
    // need converged directions (deflation requires residual < 1e-2·|lambda|),
    // so the probe runs tighter here than the planning default
    let probe_cfg = {
        let mut p = cfg.probe.clone();
        p.max_iters = p.max_iters.max(200);
        p.rel_tol = p.rel_tol.min(1e-7);
        p
    };
    let mut pairs = Vec::new();
    {
        let mut probe = HessianProbe::new(&model, &partition, &train, &probe_cfg)?;
        for &b in &blocks {
            let top = probe.power_iteration(b, &probe_cfg)?;
            let second = if two_d {
                Some(probe.second_eigenpair(b, &top, &probe_cfg)?)
            } else {
                None
            };
            pairs.push((b, top, second));
        }
    }
    let batch = {
        let probe = HessianProbe::new(&model, &partition, &train, &cfg.probe)?;
        probe.batch().clone()
    };

    let mut samples = Vec::new();
    for (b, top, second) in &pairs {
        let blk = &partition.blocks[*b];
        if let Some(second) = second {
            samples.extend(landscape::landscape_2d(
                &mut model,
                *b,
                blk,
                &top.eigenvector,
                &second.eigenvector,
                &grid,
                &grid,
                &batch,
            )?);
        } else {
            samples.extend(landscape::landscape_1d(
                &mut model,
                *b,
                blk,
                &top.eigenvector,
                &grid,
                &batch,
            )?);
        }
    }
    let path = cfg.out_dir.join("landscape.csv");
    landscape::write_csv(&path, &samples)?;
    println!("scanned {} blocks, {} samples; wrote {}", blocks.len(), samples.len(), path.display());
    Ok(())
}

fn cmd_report(
    fixture: &Option<PathBuf>,
    config: &Option<PathBuf>,
    plan: &Option<PathBuf>,
    summary: &Option<PathBuf>,
) -> Result<()> {
    if let Some(fixture_path) = fixture {
        let out = verify_fixture(fixture_path)?;
        println!("{}", serde_json::to_string_pretty(&out)?);
        if !out.pass {
            bail!(
                "fixture mismatch: computed {:.4}, expected {:.4}",
                out.computed_w_comp,
                out.expected_w_comp
            );
        }
        return Ok(());
    }
    let cfg_path = config
        .as_ref()
        .context("report needs --config (or --verify-fixture)")?;
    let cfg = RunConfig::load(cfg_path)?;
    let (_, partition) = build_model(&cfg.model, cfg.seed)?;
    let plan_path = plan.clone().unwrap_or_else(|| cfg.out_dir.join(PLAN_JSON));
    let plan_file: PlanFile = read_json(&plan_path)?;
    check_schema(&plan_path, &plan_file.schema, "hawqkit-plan/1")?;
    let accuracy = match summary {
        Some(path) => {
            let s: FinetuneSummary = read_json(path)?;
            Some(s.accuracy)
        }
        None => {
            let default = cfg.out_dir.join("finetune_summary.json");
            if default.exists() {
                let s: FinetuneSummary = read_json(&default)?;
                Some(s.accuracy)
            } else {
                None
            }
        }
    };
    let report = compression_report(&partition, &plan_file.plan, accuracy)?;
    let path = cfg.out_dir.join("report.json");
    write_json(&path, &report)?;
    println!(
        "W-Comp {:.2}  A-Comp {:.2}  size {} bytes{}; wrote {}",
        report.w_comp_rounded,
        report.a_comp_rounded,
        report.size_bytes,
        report
            .accuracy
            .map_or(String::new(), |a| format!("  accuracy {a:.4}")),
        path.display()
    );
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match &cli.cmd {
        Cmd::Train { cfg } => cmd_train(&cfg.config),
        Cmd::Probe { cfg, checkpoint } => cmd_probe(&cfg.config, checkpoint),
        Cmd::Plan {
            cfg,
            checkpoint,
            eigen,
        } => cmd_plan(&cfg.config, checkpoint, eigen),
        Cmd::Finetune {
            cfg,
            checkpoint,
            plan,
            direct,
            reverse_order,
        } => cmd_finetune(&cfg.config, checkpoint, plan, *direct, *reverse_order),
        Cmd::Ablate { cfg, checkpoint } => cmd_ablate(&cfg.config, checkpoint),
        Cmd::Landscape {
            cfg,
            checkpoint,
            block,
            two_d,
            points,
            span,
        } => cmd_landscape(&cfg.config, checkpoint, *block, *two_d, *points, *span),
        Cmd::Report {
            verify_fixture,
            config,
            plan,
            summary,
        } => cmd_report(verify_fixture, config, plan, summary),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            let payload = serde_json::json!({
                "error": format!("{err:#}"),
                "kind": err
                    .downcast_ref::<hawq_core::Error>()
                    .map(|e| format!("{e:?}").split(['{', '(']).next().unwrap_or("Error").trim().to_string())
                    .unwrap_or_else(|| "cli".to_string()),
            });
            eprintln!("{payload}");
            ExitCode::FAILURE
        }
    }
}
