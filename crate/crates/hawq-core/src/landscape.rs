//! Loss-landscape scans along dominant Hessian eigenvectors.
//!
//! Perturb one block's weights by ε·v (plus ε₂·v₂ for surfaces), evaluate
//! the full-model loss on the probe batch, and restore the weights
//! bit-identically afterward.

use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{block_weights, forward_loss, set_block_weights, Batch, Block, LossModel};

#[derive(Debug, Clone)]
pub struct LandscapeSample {
    pub block: usize,
    pub eps1: f64,
    pub eps2: f64,
    pub loss: f64,
}

/// Evenly spaced grid; the default scan uses linspace(-0.5, 0.5, 41).
pub fn linspace(lo: f64, hi: f64, points: usize) -> Vec<f64> {
    if points == 1 {
        return vec![lo];
    }
    (0..points)
        .map(|i| lo + (hi - lo) * i as f64 / (points - 1) as f64)
        .collect()
}

pub fn default_grid() -> Vec<f64> {
    linspace(-0.5, 0.5, 41)
}

fn check_unit(name: &'static str, v: &[f64], n: usize) -> Result<()> {
    if v.len() != n {
        return Err(Error::Landscape(format!(
            "{name} has length {}, block has {n} parameters",
            v.len()
        )));
    }
    let norm = crate::tensor::l2_norm(v);
    if (norm - 1.0).abs() > 1e-6 {
        return Err(Error::Landscape(format!("{name} must be unit length, got ||v||={norm}")));
    }
    Ok(())
}

struct Restore<'m, M: LossModel> {
    model: &'m mut M,
    block: &'m Block,
    saved: Vec<f64>,
}

impl<'m, M: LossModel> Restore<'m, M> {
    fn new(model: &'m mut M, block: &'m Block) -> Self {
        let saved = block_weights(model, block);
        Restore { model, block, saved }
    }

    fn eval_at(&mut self, offset: &[f64], batch: &Batch) -> Result<f64> {
        if offset.iter().all(|&o| o == 0.0) {
            // exact baseline, no perturbation arithmetic
            set_block_weights(self.model, self.block, &self.saved.clone())?;
        } else {
            let perturbed: Vec<f64> =
                self.saved.iter().zip(offset).map(|(&w, &o)| w + o).collect();
            set_block_weights(self.model, self.block, &perturbed)?;
        }
        forward_loss(&*self.model, batch)
    }
}

impl<M: LossModel> Drop for Restore<'_, M> {
    fn drop(&mut self) {
        let saved = self.saved.clone();
        let _ = set_block_weights(self.model, self.block, &saved);
    }
}

/// Loss along W_i + ε·v1 for each ε in `grid` (which must contain 0).
pub fn landscape_1d<M: LossModel>(
    model: &mut M,
    block_idx: usize,
    block: &Block,
    v1: &[f64],
    grid: &[f64],
    batch: &Batch,
) -> Result<Vec<LandscapeSample>> {
    if grid.is_empty() {
        return Err(Error::Landscape("empty grid".into()));
    }
    if !grid.contains(&0.0) {
        return Err(Error::Landscape("grid must contain 0".into()));
    }
    check_unit("v1", v1, block.n)?;
    let mut scan = Restore::new(model, block);
    let mut out = Vec::with_capacity(grid.len());
    let mut offset = vec![0.0; v1.len()];
    for &eps in grid {
        for (o, &vi) in offset.iter_mut().zip(v1) {
            *o = eps * vi;
        }
        let loss = scan.eval_at(&offset, batch)?;
        out.push(LandscapeSample {
            block: block_idx,
            eps1: eps,
            eps2: 0.0,
            loss,
        });
    }
    Ok(out)
}

/// Loss over the ε₁×ε₂ grid along two orthogonal directions, row-major
/// (ε₁ outer, ε₂ inner).
#[allow(clippy::too_many_arguments)]
pub fn landscape_2d<M: LossModel>(
    model: &mut M,
    block_idx: usize,
    block: &Block,
    v1: &[f64],
    v2: &[f64],
    grid1: &[f64],
    grid2: &[f64],
    batch: &Batch,
) -> Result<Vec<LandscapeSample>> {
    if grid1.is_empty() || grid2.is_empty() {
        return Err(Error::Landscape("empty grid".into()));
    }
    check_unit("v1", v1, block.n)?;
    check_unit("v2", v2, block.n)?;
    let ip = crate::tensor::dot(v1, v2);
    if ip.abs() > 1e-6 {
        return Err(Error::Landscape(format!(
            "directions must be orthogonal, got v1·v2 = {ip}"
        )));
    }
    let mut scan = Restore::new(model, block);
    let mut out = Vec::with_capacity(grid1.len() * grid2.len());
    let mut offset = vec![0.0; v1.len()];
    for &e1 in grid1 {
        for &e2 in grid2 {
            for (i, o) in offset.iter_mut().enumerate() {
                *o = e1 * v1[i] + e2 * v2[i];
            }
            let loss = scan.eval_at(&offset, batch)?;
            out.push(LandscapeSample {
                block: block_idx,
                eps1: e1,
                eps2: e2,
                loss,
            });
        }
    }
    Ok(out)
}

/// CSV with columns block,eps1,eps2,loss (1-D scans carry eps2 = 0),
/// written atomically.
pub fn write_csv(path: &Path, samples: &[LandscapeSample]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["block", "eps1", "eps2", "loss"])
        .map_err(|e| Error::Landscape(e.to_string()))?;
    for s in samples {
        w.write_record([
            s.block.to_string(),
            format!("{}", s.eps1),
            format!("{}", s.eps2),
            format!("{}", s.loss),
        ])
        .map_err(|e| Error::Landscape(e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Landscape(e.to_string()))?;
    crate::checkpoint::atomic_write(path, &bytes)
}
