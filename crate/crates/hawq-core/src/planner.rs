//! From eigenvalues to a concrete precision plan and fine-tuning order.
//!
//! Blocks are ranked by the size-weighted sensitivity S_i = λ_i/n_i; the bit
//! allocator enumerates every monotone (non-increasing along descending S)
//! assignment from the palette and keeps the largest one that fits the
//! budget, turning "relative ordering only" into a deterministic allocation.
//! Fine-tuning order descends Ω_i = λ_i·||Q(W_i)-W_i||².

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hessian::EigenRecord;
use crate::model::{block_weights, BlockPartition, LossModel};
use crate::quant::quant_perturbation;

/// |λ| floor applied before forming S_i and Ω_i.
pub const LAMBDA_FLOOR: f64 = 1e-12;

/// Weight bit widths at or above this bypass quantization entirely.
pub const FULL_PRECISION_BITS: u32 = 32;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SensitivityRecord {
    pub block: usize,
    /// |λ_i|, floored at [`LAMBDA_FLOOR`].
    pub lambda: f64,
    pub n: usize,
    /// S_i = lambda / n.
    pub s: f64,
}

/// S_i = λ_i/n_i per block, in block order.
pub fn sensitivity_scores(
    estimates: &[EigenRecord],
    partition: &BlockPartition,
) -> Result<Vec<SensitivityRecord>> {
    let b = partition.num_blocks();
    let mut by_block: Vec<Option<&EigenRecord>> = vec![None; b];
    for e in estimates {
        if e.block >= b {
            return Err(Error::Planner(format!("estimate for unknown block {}", e.block)));
        }
        if by_block[e.block].replace(e).is_some() {
            return Err(Error::Planner(format!("duplicate estimate for block {}", e.block)));
        }
    }
    let mut out = Vec::with_capacity(b);
    for (i, slot) in by_block.iter().enumerate() {
        let e = slot.ok_or_else(|| Error::Planner(format!("missing estimate for block {i}")))?;
        let n = partition.blocks[i].n;
        let lambda = e.lambda.abs().max(LAMBDA_FLOOR);
        out.push(SensitivityRecord {
            block: i,
            lambda,
            n,
            s: lambda / n as f64,
        });
    }
    Ok(out)
}

/// Allowed bit widths, strictly descending.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BitPalette(Vec<u32>);

impl BitPalette {
    pub fn new(levels: Vec<u32>) -> Result<Self> {
        if levels.is_empty() {
            return Err(Error::Planner("palette must not be empty".into()));
        }
        if levels.iter().any(|&b| b < 1) {
            return Err(Error::Planner("palette bits must be >= 1".into()));
        }
        if !levels.windows(2).all(|w| w[0] > w[1]) {
            return Err(Error::Planner(format!(
                "palette must be strictly descending, got {levels:?}"
            )));
        }
        Ok(BitPalette(levels))
    }

    pub fn levels(&self) -> &[u32] {
        &self.0
    }
}

impl Default for BitPalette {
    fn default() -> Self {
        BitPalette(vec![8, 6, 4, 3, 2])
    }
}

/// Weight-size budget for the plan.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Budget {
    /// Total weight size must not exceed this many bits.
    MaxSizeBits(u64),
    /// 32·Σn_i / Σ(n_i·k_i) must reach at least this ratio.
    MinWeightCompression(f64),
}

impl Budget {
    fn allows(&self, total_params: u64, size_bits: u64) -> bool {
        match *self {
            Budget::MaxSizeBits(max) => size_bits <= max,
            Budget::MinWeightCompression(ratio) => {
                32.0 * total_params as f64 >= ratio * size_bits as f64
            }
        }
    }
}

/// Activation bit widths: one global value or one per activation site.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ActivationBits {
    Global(u32),
    PerSite(Vec<u32>),
}

impl ActivationBits {
    pub fn resolve(&self, sites: usize) -> Result<Vec<u32>> {
        match self {
            ActivationBits::Global(b) => Ok(vec![*b; sites]),
            ActivationBits::PerSite(v) => {
                if v.len() != sites {
                    return Err(Error::Planner(format!(
                        "{} activation bit entries for {sites} sites",
                        v.len()
                    )));
                }
                Ok(v.clone())
            }
        }
    }
}

/// Global activation bits plus optional first/last-site overrides.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ActBitsPolicy {
    pub bits: u32,
    pub first: Option<u32>,
    pub last: Option<u32>,
}

impl Default for ActBitsPolicy {
    fn default() -> Self {
        ActBitsPolicy {
            bits: 4,
            first: None,
            last: None,
        }
    }
}

impl ActBitsPolicy {
    pub fn resolve(&self, sites: usize) -> ActivationBits {
        if self.first.is_none() && self.last.is_none() {
            return ActivationBits::Global(self.bits);
        }
        let mut v = vec![self.bits; sites];
        if let (Some(f), true) = (self.first, sites > 0) {
            v[0] = f;
        }
        if let (Some(l), true) = (self.last, sites > 0) {
            v[sites - 1] = l;
        }
        ActivationBits::PerSite(v)
    }
}

/// A concrete assignment of bit widths to blocks.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PrecisionPlan {
    /// Weight bits per block, in block order.
    pub w_bits: Vec<u32>,
    pub a_bits: ActivationBits,
    /// Total weight size Σ n_i·k_i in bits.
    pub size_bits: u64,
    /// Blocks sorted by descending S (ties broken by ascending block index).
    pub s_rank: Vec<usize>,
}

/// Visit all monotone non-decreasing palette-index sequences of length `b`.
fn for_each_monotone(b: usize, p: usize, f: &mut impl FnMut(&[usize])) {
    fn rec(buf: &mut Vec<usize>, b: usize, p: usize, min_idx: usize, f: &mut impl FnMut(&[usize])) {
        if buf.len() == b {
            f(buf);
            return;
        }
        for idx in min_idx..p {
            buf.push(idx);
            rec(buf, b, p, idx, f);
            buf.pop();
        }
    }
    let mut buf = Vec::with_capacity(b);
    rec(&mut buf, b, p, 0, f);
}

/// Number of monotone plans for `b` blocks over `p` palette levels,
/// counted by brute enumeration (equals C(b+p-1, p-1)).
pub fn count_monotone_assignments(b: usize, p: usize) -> u64 {
    let mut count = 0u64;
    for_each_monotone(b, p, &mut |_| count += 1);
    count
}

/// Exhaustive search over monotone plans: maximize weight size (precision)
/// subject to the budget; ties prefer higher bits on higher-S blocks.
pub fn assign_bits(
    records: &[SensitivityRecord],
    palette: &BitPalette,
    budget: Budget,
) -> Result<PrecisionPlan> {
    if records.is_empty() {
        return Err(Error::Planner("no sensitivity records".into()));
    }
    let b = records.len();
    let p = palette.levels().len();
    let mut s_rank: Vec<usize> = (0..b).collect();
    s_rank.sort_by(|&i, &j| {
        records[j]
            .s
            .partial_cmp(&records[i].s)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(i.cmp(&j))
    });
    let n_sorted: Vec<u64> = s_rank.iter().map(|&i| records[i].n as u64).collect();
    let total_params: u64 = n_sorted.iter().sum();

    let min_bits = *palette.levels().last().unwrap() as u64;
    let min_size: u64 = total_params * min_bits;
    if !budget.allows(total_params, min_size) {
        return Err(Error::Planner(format!(
            "budget unachievable: all-minimum-bits plan needs {min_size} bits"
        )));
    }

    let mut best: Option<(u64, Vec<usize>)> = None;
    for_each_monotone(b, p, &mut |idxs| {
        let size: u64 = idxs
            .iter()
            .zip(&n_sorted)
            .map(|(&idx, &n)| n * palette.levels()[idx] as u64)
            .sum();
        if !budget.allows(total_params, size) {
            return;
        }
        let better = match &best {
            None => true,
            Some((bs, bi)) => {
                // lower palette indices mean higher bits, so lexicographically
                // smaller index sequences put more precision on high-S blocks
                size > *bs || (size == *bs && idxs < bi.as_slice())
            }
        };
        if better {
            best = Some((size, idxs.to_vec()));
        }
    });

    let (size_bits, idxs) = best.expect("all-minimum plan is feasible");
    let mut w_bits = vec![0u32; b];
    for (pos, &blk) in s_rank.iter().enumerate() {
        w_bits[blk] = palette.levels()[idxs[pos]];
    }
    Ok(PrecisionPlan {
        w_bits,
        a_bits: ActivationBits::Global(ActBitsPolicy::default().bits),
        size_bits,
        s_rank,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OmegaRecord {
    pub block: usize,
    pub lambda: f64,
    /// ||Q(W_i) - W_i||² at the block's planned bits.
    pub perturbation: f64,
    /// Ω_i = lambda · perturbation.
    pub omega: f64,
}

/// Ω_i per block at the plan's bit widths, in block order.
pub fn omega_scores(
    model: &impl LossModel,
    partition: &BlockPartition,
    plan: &PrecisionPlan,
    estimates: &[EigenRecord],
) -> Result<Vec<OmegaRecord>> {
    if plan.w_bits.len() != partition.num_blocks() {
        return Err(Error::Planner(format!(
            "plan covers {} blocks, partition has {}",
            plan.w_bits.len(),
            partition.num_blocks()
        )));
    }
    let records = sensitivity_scores(estimates, partition)?;
    let mut out = Vec::with_capacity(records.len());
    for rec in &records {
        let bits = plan.w_bits[rec.block];
        let perturbation = if bits >= FULL_PRECISION_BITS {
            0.0
        } else {
            let w = block_weights(model, &partition.blocks[rec.block]);
            quant_perturbation(&w, bits)?
        };
        out.push(OmegaRecord {
            block: rec.block,
            lambda: rec.lambda,
            perturbation,
            omega: rec.lambda * perturbation,
        });
    }
    Ok(out)
}

/// Blocks in descending Ω order; ties keep ascending block index.
pub fn finetune_order(omegas: &[OmegaRecord]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..omegas.len()).collect();
    order.sort_by(|&i, &j| {
        omegas[j]
            .omega
            .partial_cmp(&omegas[i].omega)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(omegas[i].block.cmp(&omegas[j].block))
    });
    order.into_iter().map(|i| omegas[i].block).collect()
}

/// Remap bits so the ascending-S ranking receives the descending-bit
/// sequence (the reverse-precision ablation arm).
pub fn reverse_precision_plan(
    plan: &PrecisionPlan,
    partition: &BlockPartition,
) -> Result<PrecisionPlan> {
    let b = plan.w_bits.len();
    if partition.num_blocks() != b || plan.s_rank.len() != b {
        return Err(Error::Planner("plan does not match partition".into()));
    }
    let bits_desc: Vec<u32> = plan.s_rank.iter().map(|&blk| plan.w_bits[blk]).collect();
    let mut w_bits = vec![0u32; b];
    for (j, &bits) in bits_desc.iter().enumerate() {
        w_bits[plan.s_rank[b - 1 - j]] = bits;
    }
    let size_bits = w_bits
        .iter()
        .zip(&partition.blocks)
        .map(|(&k, blk)| blk.n as u64 * k as u64)
        .sum();
    Ok(PrecisionPlan {
        w_bits,
        a_bits: plan.a_bits.clone(),
        size_bits,
        s_rank: plan.s_rank.clone(),
    })
}

/// Reverse a fine-tuning order (the reverse-tuning ablation arm).
pub fn reverse_tuning_order(order: &[usize]) -> Vec<usize> {
    order.iter().rev().copied().collect()
}

/// One row of the scores table (CSV columns: block,n,lambda,S,bits,omega).
#[derive(Debug, Clone, Serialize)]
pub struct ScoreRow {
    pub block: usize,
    pub n: usize,
    pub lambda: f64,
    pub s: f64,
    pub bits: u32,
    pub omega: f64,
}

pub fn score_table(
    records: &[SensitivityRecord],
    plan: &PrecisionPlan,
    omegas: &[OmegaRecord],
) -> Vec<ScoreRow> {
    records
        .iter()
        .zip(omegas)
        .map(|(r, o)| ScoreRow {
            block: r.block,
            n: r.n,
            lambda: r.lambda,
            s: r.s,
            bits: plan.w_bits[r.block],
            omega: o.omega,
        })
        .collect()
}

pub fn write_scores_csv(path: &Path, rows: &[ScoreRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["block", "n", "lambda", "S", "bits", "omega"])
        .map_err(|e| Error::Planner(e.to_string()))?;
    for r in rows {
        w.write_record([
            r.block.to_string(),
            r.n.to_string(),
            format!("{}", r.lambda),
            format!("{}", r.s),
            r.bits.to_string(),
            format!("{}", r.omega),
        ])
        .map_err(|e| Error::Planner(e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Planner(e.to_string()))?;
    crate::checkpoint::atomic_write(path, &bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Block, Param};
    use crate::tensor::Tensor;
    use proptest::prelude::*;

    fn est(block: usize, lambda: f64) -> EigenRecord {
        EigenRecord {
            block,
            lambda,
            residual: 0.0,
            iterations: 1,
        }
    }

    fn partition(sizes: &[usize]) -> BlockPartition {
        BlockPartition {
            blocks: sizes
                .iter()
                .enumerate()
                .map(|(i, &n)| Block {
                    name: format!("b{i}"),
                    params: vec![i],
                    n,
                })
                .collect(),
        }
    }

    fn records(lambdas: &[f64], sizes: &[usize]) -> Vec<SensitivityRecord> {
        lambdas
            .iter()
            .zip(sizes)
            .enumerate()
            .map(|(i, (&l, &n))| SensitivityRecord {
                block: i,
                lambda: l,
                n,
                s: l / n as f64,
            })
            .collect()
    }

    #[test]
    fn sensitivity_arithmetic_and_floor() {
        let part = partition(&[5, 10]);
        let out = sensitivity_scores(&[est(0, 10.0), est(1, 0.0)], &part).unwrap();
        assert_eq!(out[0].s, 2.0);
        assert_eq!(out[1].lambda, LAMBDA_FLOOR);
        assert_eq!(out[1].s, LAMBDA_FLOOR / 10.0);
        // S·n == lambda
        for r in &out {
            assert!((r.s * r.n as f64 - r.lambda).abs() <= 1e-12 * r.lambda);
        }
    }

    #[test]
    fn larger_blocks_rank_lower_at_equal_lambda() {
        let part = partition(&[100, 10]);
        let out = sensitivity_scores(&[est(0, 3.0), est(1, 3.0)], &part).unwrap();
        assert!((out[0].s - out[1].s / 10.0).abs() < 1e-15);
    }

    #[test]
    fn sensitivity_requires_exactly_one_estimate_per_block() {
        let part = partition(&[5, 10]);
        assert!(sensitivity_scores(&[est(0, 1.0)], &part).is_err());
        assert!(sensitivity_scores(&[est(0, 1.0), est(0, 2.0)], &part).is_err());
        assert!(sensitivity_scores(&[est(0, 1.0), est(5, 2.0)], &part).is_err());
    }

    #[test]
    fn assign_bits_rank_order_example() {
        // S = [5, 1, 3], palette {8,4,2}, budget = size of (8,2,4) -> (8,2,4)
        let recs = records(&[5.0, 1.0, 3.0], &[1, 1, 1]);
        let palette = BitPalette::new(vec![8, 4, 2]).unwrap();
        let plan = assign_bits(&recs, &palette, Budget::MaxSizeBits(8 + 2 + 4)).unwrap();
        assert_eq!(plan.w_bits, vec![8, 2, 4]);
        assert_eq!(plan.size_bits, 14);
        assert_eq!(plan.s_rank, vec![0, 2, 1]);
    }

    #[test]
    fn tight_budget_forces_all_minimum() {
        let recs = records(&[5.0, 1.0, 3.0], &[10, 10, 10]);
        let palette = BitPalette::default();
        let plan = assign_bits(&recs, &palette, Budget::MaxSizeBits(60)).unwrap();
        assert_eq!(plan.w_bits, vec![2, 2, 2]);
        assert!(assign_bits(&recs, &palette, Budget::MaxSizeBits(59)).is_err());
    }

    #[test]
    fn unbounded_budget_gives_maximum_precision() {
        let recs = records(&[5.0, 1.0, 3.0], &[10, 10, 10]);
        let plan = assign_bits(&recs, &BitPalette::default(), Budget::MaxSizeBits(u64::MAX)).unwrap();
        assert_eq!(plan.w_bits, vec![8, 8, 8]);
    }

    #[test]
    fn compression_budget_is_respected() {
        let recs = records(&[8.0, 0.4, 2.0, 0.1], &[100, 5000, 400, 8000]);
        let plan = assign_bits(
            &recs,
            &BitPalette::default(),
            Budget::MinWeightCompression(10.0),
        )
        .unwrap();
        let total: u64 = recs.iter().map(|r| r.n as u64).sum();
        assert!(32.0 * total as f64 / plan.size_bits as f64 >= 10.0);
    }

    fn binomial(n: u64, k: u64) -> u64 {
        let k = k.min(n - k);
        let mut acc = 1u64;
        for i in 0..k {
            acc = acc * (n - i) / (i + 1);
        }
        acc
    }

    #[test]
    fn candidate_count_is_stars_and_bars() {
        // b=10 blocks, p=5 levels -> C(14,4) = 1001 candidates
        assert_eq!(count_monotone_assignments(10, 5), 1001);
        assert_eq!(count_monotone_assignments(10, 5), binomial(14, 4));
        assert_eq!(count_monotone_assignments(3, 2), binomial(4, 1));
    }

    #[test]
    fn omega_arithmetic_by_hand() {
        // weights [0.75, 0.5, -0.25] at 2 bits: clip 0.75, levels {-1,0,1}·0.75
        // errors: 0, 0.25², 0.25² -> perturbation 0.125; lambda 2 -> omega 0.25
        struct M(Vec<Param>);
        impl crate::model::LossModel for M {
            fn params(&self) -> &[Param] {
                &self.0
            }
            fn params_mut(&mut self) -> &mut [Param] {
                &mut self.0
            }
            fn build_loss(
                &self,
                _: &mut crate::tape::Tape,
                _: &[crate::tape::NodeId],
                _: &crate::model::Batch,
            ) -> crate::error::Result<crate::tape::NodeId> {
                unreachable!("omega only reads weights")
            }
        }
        let model = M(vec![Param {
            name: "w".into(),
            value: Tensor::from_vec(vec![0.75, 0.5, -0.25]),
        }]);
        let part = partition(&[3]);
        let plan = PrecisionPlan {
            w_bits: vec![2],
            a_bits: ActivationBits::Global(4),
            size_bits: 6,
            s_rank: vec![0],
        };
        let omegas = omega_scores(&model, &part, &plan, &[est(0, 2.0)]).unwrap();
        assert!((omegas[0].perturbation - 0.125).abs() < 1e-15);
        assert!((omegas[0].omega - 0.25).abs() < 1e-15);

        // on-grid weights quantize exactly -> omega 0
        let model = M(vec![Param {
            name: "w".into(),
            value: Tensor::from_vec(vec![0.75, -0.75, 0.0]),
        }]);
        let omegas = omega_scores(&model, &part, &plan, &[est(0, 2.0)]).unwrap();
        assert_eq!(omegas[0].omega, 0.0);

        // >= 32 bits bypasses quantization entirely
        let plan32 = PrecisionPlan {
            w_bits: vec![32],
            a_bits: ActivationBits::Global(4),
            size_bits: 96,
            s_rank: vec![0],
        };
        let omegas = omega_scores(&model, &part, &plan32, &[est(0, 2.0)]).unwrap();
        assert_eq!(omegas[0].perturbation, 0.0);
    }

    #[test]
    fn finetune_order_sorts_descending_with_stable_ties() {
        let o = |block, omega| OmegaRecord {
            block,
            lambda: 1.0,
            perturbation: omega,
            omega,
        };
        assert_eq!(finetune_order(&[o(0, 0.1), o(1, 5.0), o(2, 2.0)]), vec![1, 2, 0]);
        assert_eq!(finetune_order(&[o(0, 1.0), o(1, 1.0), o(2, 1.0)]), vec![0, 1, 2]);
        // value-driven, not input-order-driven
        assert_eq!(finetune_order(&[o(0, 2.0), o(1, 5.0), o(2, 0.1)]), vec![1, 0, 2]);
    }

    #[test]
    fn reverse_precision_and_tuning() {
        let recs = records(&[5.0, 1.0, 3.0], &[1, 1, 1]);
        let palette = BitPalette::new(vec![8, 4, 2]).unwrap();
        let plan = assign_bits(&recs, &palette, Budget::MaxSizeBits(14)).unwrap();
        assert_eq!(plan.w_bits, vec![8, 2, 4]);
        let part = partition(&[1, 1, 1]);
        let rev = reverse_precision_plan(&plan, &part).unwrap();
        assert_eq!(rev.w_bits, vec![2, 8, 4]);
        let back = reverse_precision_plan(&rev, &part).unwrap();
        assert_eq!(back.w_bits, plan.w_bits);

        assert_eq!(reverse_tuning_order(&[1, 2, 0]), vec![0, 2, 1]);
        assert_eq!(reverse_tuning_order(&reverse_tuning_order(&[1, 2, 0])), vec![1, 2, 0]);
    }

    #[test]
    fn act_bits_policy_resolution() {
        let policy = ActBitsPolicy {
            bits: 4,
            first: Some(8),
            last: Some(8),
        };
        assert_eq!(
            policy.resolve(5),
            ActivationBits::PerSite(vec![8, 4, 4, 4, 8])
        );
        let global = ActBitsPolicy::default();
        assert_eq!(global.resolve(3), ActivationBits::Global(4));
        assert_eq!(ActivationBits::Global(4).resolve(3).unwrap(), vec![4, 4, 4]);
        assert!(ActivationBits::PerSite(vec![4, 4]).resolve(3).is_err());
    }

    #[test]
    fn palette_validation() {
        assert!(BitPalette::new(vec![]).is_err());
        assert!(BitPalette::new(vec![8, 8]).is_err());
        assert!(BitPalette::new(vec![4, 8]).is_err());
        assert!(BitPalette::new(vec![4, 0]).is_err());
        assert_eq!(BitPalette::default().levels(), &[8, 6, 4, 3, 2]);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn ordering_is_scale_invariant(
            lambdas in proptest::collection::vec(1e-6..1e3f64, 2..8),
            sizes in proptest::collection::vec(1..5000usize, 2..8),
            scale in 1e-3..1e3f64,
        ) {
            let b = lambdas.len().min(sizes.len());
            let recs = records(&lambdas[..b], &sizes[..b]);
            let scaled: Vec<f64> = lambdas[..b].iter().map(|l| l * scale).collect();
            let recs2 = records(&scaled, &sizes[..b]);
            let palette = BitPalette::default();
            let total: u64 = sizes[..b].iter().map(|&n| n as u64).sum();
            let budget = Budget::MaxSizeBits(total * 4);
            let p1 = assign_bits(&recs, &palette, budget).unwrap();
            let p2 = assign_bits(&recs2, &palette, budget).unwrap();
            prop_assert_eq!(&p1.w_bits, &p2.w_bits);
            prop_assert_eq!(&p1.s_rank, &p2.s_rank);
        }

        #[test]
        fn plans_are_monotone_and_within_budget(
            lambdas in proptest::collection::vec(1e-6..1e3f64, 2..8),
            sizes in proptest::collection::vec(1..5000usize, 2..8),
            budget_per_param in 2..9u64,
        ) {
            let b = lambdas.len().min(sizes.len());
            let recs = records(&lambdas[..b], &sizes[..b]);
            let palette = BitPalette::default();
            let total: u64 = sizes[..b].iter().map(|&n| n as u64).sum();
            let budget = Budget::MaxSizeBits(total * budget_per_param);
            let plan = assign_bits(&recs, &palette, budget).unwrap();
            // budget satisfied
            prop_assert!(plan.size_bits <= total * budget_per_param);
            // sorted by descending S -> non-increasing bits
            let sorted_bits: Vec<u32> = plan.s_rank.iter().map(|&i| plan.w_bits[i]).collect();
            prop_assert!(sorted_bits.windows(2).all(|w| w[0] >= w[1]));
            // all bits from the palette
            prop_assert!(plan.w_bits.iter().all(|b| palette.levels().contains(b)));
            // no feasible plan is larger: bumping any block to the next level
            // breaks the budget or monotonicity
            for pos in 0..b {
                let cur = sorted_bits[pos];
                let cur_idx = palette.levels().iter().position(|&x| x == cur).unwrap();
                if cur_idx == 0 { continue; }
                let bumped = palette.levels()[cur_idx - 1];
                let monotone_ok = pos == 0 || sorted_bits[pos - 1] >= bumped;
                let new_size = plan.size_bits
                    + (bumped - cur) as u64 * recs[plan.s_rank[pos]].n as u64;
                prop_assert!(!monotone_ok || new_size > total * budget_per_param);
            }
        }

        #[test]
        fn omega_order_is_a_permutation(
            omegas in proptest::collection::vec(0.0..1e6f64, 1..12),
        ) {
            let recs: Vec<OmegaRecord> = omegas.iter().enumerate().map(|(i, &o)| OmegaRecord {
                block: i, lambda: 1.0, perturbation: o, omega: o,
            }).collect();
            let order = finetune_order(&recs);
            let mut sorted = order.clone();
            sorted.sort_unstable();
            prop_assert_eq!(sorted, (0..omegas.len()).collect::<Vec<_>>());
        }
    }
}
