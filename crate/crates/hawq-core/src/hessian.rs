//! Matrix-free per-block Hessian eigenvalue estimation.
//!
//! The Hessian is never formed: Hv comes from differentiating gᵀv a second
//! time on the tape, restricted to one block (the block-diagonal
//! approximation). Power iteration on that matvec yields the top eigenpair;
//! deflating the top eigencomponent and iterating again yields the second.
//! One power step costs exactly two backward passes over the probe batch.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{Batch, BlockPartition, LossModel};
use crate::tape::Tape;
use crate::tensor::{dot, l2_norm};

/// Matvec norms below this are treated as a zero-curvature block.
const DEGENERATE_NORM: f64 = 1e-30;

/// Rayleigh residuals below `EXACT_RESIDUAL_TOL * max(|lambda|, 1)` stop the
/// iteration immediately (the start vector was already an eigenvector).
const EXACT_RESIDUAL_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeConfig {
    pub max_iters: usize,
    /// Relative Rayleigh-quotient change below which iteration stops.
    pub rel_tol: f64,
    pub seed: u64,
    /// Fixed subsample size for Hessian evaluation (full dataset if smaller).
    pub probe_batch: usize,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            max_iters: 20,
            rel_tol: 1e-3,
            seed: 0,
            probe_batch: 1000,
        }
    }
}

impl ProbeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iters < 1 {
            return Err(Error::Probe("max_iters must be >= 1".into()));
        }
        if !(self.rel_tol > 0.0 && self.rel_tol < 1.0) {
            return Err(Error::Probe(format!(
                "rel_tol must be in (0, 1), got {}",
                self.rel_tol
            )));
        }
        Ok(())
    }
}

/// Converged (or best-effort) eigenpair for one block.
#[derive(Debug, Clone)]
pub struct EigenEstimate {
    pub block: usize,
    /// Signed Rayleigh quotient at the reported eigenvector.
    pub lambda: f64,
    /// Unit vector of length n_i.
    pub eigenvector: Vec<f64>,
    pub iterations: usize,
    /// ||Hv - lambda·v||₂ at the reported pair.
    pub residual: f64,
    /// Set when ||Hv|| collapsed below the degenerate threshold.
    pub degenerate: bool,
    /// Rayleigh quotient per iteration (convergence metadata).
    pub rayleigh_history: Vec<f64>,
}

/// JSON-facing record (the eigenvector stays in memory).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EigenRecord {
    pub block: usize,
    pub lambda: f64,
    pub residual: f64,
    pub iterations: usize,
}

impl EigenEstimate {
    pub fn record(&self) -> EigenRecord {
        EigenRecord {
            block: self.block,
            lambda: self.lambda,
            residual: self.residual,
            iterations: self.iterations,
        }
    }

    fn converged(&self) -> bool {
        self.residual < 1e-2 * self.lambda.abs()
    }
}

/// Probe session: model + partition + a fixed, seeded probe batch.
pub struct HessianProbe<'a, M: LossModel> {
    model: &'a M,
    partition: &'a BlockPartition,
    batch: Batch,
    /// Hessian matvecs issued so far.
    pub matvecs: usize,
    /// Backward passes issued so far (2 per matvec).
    pub backward_passes: usize,
}

impl<'a, M: LossModel> HessianProbe<'a, M> {
    /// Subsample `cfg.probe_batch` examples (seeded, without replacement);
    /// datasets at or below that size are used whole in natural order.
    pub fn new(
        model: &'a M,
        partition: &'a BlockPartition,
        data: &Dataset,
        cfg: &ProbeConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        if data.is_empty() {
            return Err(Error::Probe("probe dataset is empty".into()));
        }
        let indices: Vec<usize> = if data.len() <= cfg.probe_batch {
            (0..data.len()).collect()
        } else {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            let mut all: Vec<usize> = (0..data.len()).collect();
            rand::seq::SliceRandom::shuffle(&mut all[..], &mut rng);
            let mut picked: Vec<usize> = all.into_iter().take(cfg.probe_batch).collect();
            picked.sort_unstable();
            picked
        };
        Ok(HessianProbe {
            model,
            partition,
            batch: data.gather(&indices),
            matvecs: 0,
            backward_passes: 0,
        })
    }

    /// Probe with an explicit batch (tests and toy losses).
    pub fn with_batch(model: &'a M, partition: &'a BlockPartition, batch: Batch) -> Self {
        HessianProbe {
            model,
            partition,
            batch,
            matvecs: 0,
            backward_passes: 0,
        }
    }

    pub fn batch(&self) -> &Batch {
        &self.batch
    }

    pub fn partition(&self) -> &BlockPartition {
        self.partition
    }

    fn block_size(&self, block: usize) -> Result<usize> {
        self.partition
            .blocks
            .get(block)
            .map(|b| b.n)
            .ok_or_else(|| Error::Probe(format!("no block {block} in partition")))
    }

    /// Exact H_i·v on the probe batch via double backprop.
    pub fn matvec(&mut self, block: usize, v: &[f64]) -> Result<Vec<f64>> {
        let n = self.block_size(block)?;
        if v.len() != n {
            return Err(Error::ShapeMismatch {
                op: "hessian_matvec",
                detail: format!("block {block} has {n} parameters, v has {}", v.len()),
            });
        }
        if v.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite { op: "hessian_matvec" });
        }
        let blk = &self.partition.blocks[block];
        let mut tape = Tape::new();
        // Only the probed block needs gradients; everything else is constant,
        // which keeps both backward passes on the block-relevant subgraph.
        let in_block: Vec<bool> = {
            let mut f = vec![false; self.model.params().len()];
            for &pi in &blk.params {
                f[pi] = true;
            }
            f
        };
        let pnodes: Vec<_> = self
            .model
            .params()
            .iter()
            .enumerate()
            .map(|(i, p)| {
                if in_block[i] {
                    tape.leaf(p.value.clone())
                } else {
                    tape.constant(p.value.clone())
                }
            })
            .collect::<Result<_>>()?;
        let loss = self.model.build_loss(&mut tape, &pnodes, &self.batch)?;
        let grads = tape.backward(loss)?;
        let block_nodes: Vec<_> = blk.params.iter().map(|&i| pnodes[i]).collect();
        let hv = tape.grad_dot_v_backward(&grads, &block_nodes, v)?;
        self.matvecs += 1;
        self.backward_passes += 2;
        Ok(hv.into_parts().1)
    }

    fn seed_vector(&self, block: usize, n: usize, seed: u64, stream: u64) -> Vec<f64> {
        let mixed = seed
            ^ (block as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
            ^ stream.wrapping_mul(0x517C_C1B7_2722_0A95);
        let mut rng = ChaCha8Rng::seed_from_u64(mixed);
        let normal = StandardNormal;
        let mut v: Vec<f64> = (0..n).map(|_| normal.sample(&mut rng)).collect();
        let norm = l2_norm(&v);
        if norm > 0.0 {
            v.iter_mut().for_each(|x| *x /= norm);
        } else {
            v[0] = 1.0;
        }
        v
    }

    /// Top eigenpair of the block Hessian by power iteration.
    pub fn power_iteration(&mut self, block: usize, cfg: &ProbeConfig) -> Result<EigenEstimate> {
        cfg.validate()?;
        let n = self.block_size(block)?;
        let v0 = self.seed_vector(block, n, cfg.seed, 0);
        self.power_iterate_operator(block, v0, cfg, |probe, v| probe.matvec(block, v))
    }

    /// Second eigenpair via deflation: iterate v -> Hv - λ₁(v₁ᵀv)v₁.
    pub fn second_eigenpair(
        &mut self,
        block: usize,
        top: &EigenEstimate,
        cfg: &ProbeConfig,
    ) -> Result<EigenEstimate> {
        cfg.validate()?;
        let n = self.block_size(block)?;
        if top.block != block || top.eigenvector.len() != n {
            return Err(Error::Probe(format!(
                "top estimate does not belong to block {block}"
            )));
        }
        if !top.converged() {
            return Err(Error::Probe(format!(
                "top estimate for block {block} not converged (residual {} vs |lambda| {})",
                top.residual,
                top.lambda.abs()
            )));
        }
        let lambda1 = top.lambda;
        let v1 = top.eigenvector.clone();
        let mut v0 = self.seed_vector(block, n, cfg.seed, 1);
        orthogonalize(&mut v0, &v1);
        let norm = l2_norm(&v0);
        if norm > 0.0 {
            v0.iter_mut().for_each(|x| *x /= norm);
        }
        let mut est = self.power_iterate_operator(block, v0, cfg, |probe, v| {
            let mut w = probe.matvec(block, v)?;
            let c = lambda1 * dot(&v1, v);
            for (wi, v1i) in w.iter_mut().zip(&v1) {
                *wi -= c * v1i;
            }
            Ok(w)
        })?;
        // keep the returned vector numerically orthogonal to v1
        orthogonalize(&mut est.eigenvector, &v1);
        let norm = l2_norm(&est.eigenvector);
        if norm > 0.0 {
            est.eigenvector.iter_mut().for_each(|x| *x /= norm);
        }
        Ok(est)
    }

    fn power_iterate_operator(
        &mut self,
        block: usize,
        mut v: Vec<f64>,
        cfg: &ProbeConfig,
        mut apply: impl FnMut(&mut Self, &[f64]) -> Result<Vec<f64>>,
    ) -> Result<EigenEstimate> {
        let mut lambda_prev: Option<f64> = None;
        let mut history = Vec::new();
        let mut last: Option<EigenEstimate> = None;
        for t in 1..=cfg.max_iters {
            let w = apply(self, &v)?;
            let wnorm = l2_norm(&w);
            if wnorm < DEGENERATE_NORM {
                return Ok(EigenEstimate {
                    block,
                    lambda: 0.0,
                    eigenvector: v,
                    iterations: t,
                    residual: wnorm,
                    degenerate: true,
                    rayleigh_history: history,
                });
            }
            let lambda = dot(&v, &w);
            history.push(lambda);
            let residual = {
                let mut acc = 0.0;
                for (wi, vi) in w.iter().zip(&v) {
                    let r = wi - lambda * vi;
                    acc += r * r;
                }
                acc.sqrt()
            };
            let exact = residual <= EXACT_RESIDUAL_TOL * lambda.abs().max(1.0);
            let settled = lambda_prev
                .map(|lp| (lambda - lp).abs() / lambda.abs().max(1e-12) < cfg.rel_tol)
                .unwrap_or(false);
            if exact || settled {
                return Ok(EigenEstimate {
                    block,
                    lambda,
                    eigenvector: v,
                    iterations: t,
                    residual,
                    degenerate: false,
                    rayleigh_history: history,
                });
            }
            last = Some(EigenEstimate {
                block,
                lambda,
                eigenvector: v.clone(),
                iterations: t,
                residual,
                degenerate: false,
                rayleigh_history: Vec::new(),
            });
            lambda_prev = Some(lambda);
            v = w.into_iter().map(|x| x / wnorm).collect();
        }
        let mut est = last.expect("max_iters >= 1");
        est.rayleigh_history = history;
        Ok(est)
    }

    /// Dense block Hessian, column by column. Test oracle; capped at 400
    /// parameters because it costs n_i matvecs.
    pub fn dense_hessian(&mut self, block: usize) -> Result<Vec<f64>> {
        let n = self.block_size(block)?;
        if n > 400 {
            return Err(Error::Probe(format!(
                "dense oracle capped at 400 parameters, block {block} has {n}"
            )));
        }
        let mut h = vec![0.0; n * n];
        let mut e = vec![0.0; n];
        for j in 0..n {
            e[j] = 1.0;
            let col = self.matvec(block, &e)?;
            e[j] = 0.0;
            for i in 0..n {
                h[i * n + j] = col[i];
            }
        }
        for i in 0..n {
            for j in (i + 1)..n {
                let (a, b) = (h[i * n + j], h[j * n + i]);
                if (a - b).abs() > 1e-8 * a.abs().max(b.abs()).max(1.0) {
                    return Err(Error::Probe(format!(
                        "dense Hessian asymmetry at ({i},{j}): {a} vs {b}"
                    )));
                }
            }
        }
        Ok(h)
    }

    /// Top eigenpair of every block, in block order.
    pub fn top_eigen_all(&mut self, cfg: &ProbeConfig) -> Result<Vec<EigenEstimate>> {
        (0..self.partition.num_blocks())
            .map(|b| self.power_iteration(b, cfg))
            .collect()
    }
}

fn orthogonalize(v: &mut [f64], against: &[f64]) {
    let c = dot(against, v);
    for (vi, ai) in v.iter_mut().zip(against) {
        *vi -= c * ai;
    }
}

/// Serialize eigen estimates as JSON records {block, lambda, residual, iterations}.
pub fn records_json(estimates: &[EigenEstimate]) -> Vec<EigenRecord> {
    estimates.iter().map(|e| e.record()).collect()
}
