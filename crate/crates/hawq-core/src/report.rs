//! Compression accounting and fixture-table verification.
//!
//! Ratios are carried as exact integer numerator/denominator pairs and only
//! rounded to two decimals at presentation.

use std::fs::File;
use std::io::BufReader;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::BlockPartition;
use crate::planner::{ActivationBits, PrecisionPlan};

pub const REPORT_SCHEMA: &str = "hawqkit-report/1";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BlockRow {
    pub block: usize,
    pub name: String,
    pub n: u64,
    pub w_bits: u32,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CompressionReport {
    pub schema: String,
    pub blocks: Vec<BlockRow>,
    pub total_params: u64,
    /// Σ n_i·k_i.
    pub size_bits: u64,
    /// ceil(size_bits / 8).
    pub size_bytes: u64,
    pub w_comp: f64,
    /// w_comp rounded to 2 decimals (presentation value).
    pub w_comp_rounded: f64,
    pub a_comp: f64,
    pub a_comp_rounded: f64,
    pub a_bits: Vec<u32>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub accuracy: Option<f64>,
}

fn round2(x: f64) -> f64 {
    (x * 100.0).round() / 100.0
}

/// Exact weight-compression ratio terms: (32·Σn_i, Σ n_i·k_i).
pub fn weight_compression_terms(n: &[u64], bits: &[u32]) -> Result<(u64, u64)> {
    if n.len() != bits.len() || n.is_empty() {
        return Err(Error::MalformedData(format!(
            "{} block sizes vs {} bit widths",
            n.len(),
            bits.len()
        )));
    }
    if bits.contains(&0) {
        return Err(Error::MalformedData("bit widths must be positive".into()));
    }
    let total: u64 = n.iter().sum();
    let size: u64 = n.iter().zip(bits).map(|(&ni, &ki)| ni * ki as u64).sum();
    Ok((32 * total, size))
}

/// Build the compression report for a plan over a partition.
///
/// A-Comp is 32/a exactly when the activation bits are uniform; mixed
/// per-site bits use the unweighted mean 32·sites/Σa_i (per-site activation
/// element counts are not tracked at this scale).
pub fn compression_report(
    partition: &BlockPartition,
    plan: &PrecisionPlan,
    accuracy: Option<f64>,
) -> Result<CompressionReport> {
    let n: Vec<u64> = partition.blocks.iter().map(|b| b.n as u64).collect();
    let (num, size_bits) = weight_compression_terms(&n, &plan.w_bits)?;
    let w_comp = num as f64 / size_bits as f64;
    let a_bits = match &plan.a_bits {
        ActivationBits::Global(b) => vec![*b],
        ActivationBits::PerSite(v) => v.clone(),
    };
    if a_bits.contains(&0) {
        return Err(Error::MalformedData("activation bits must be positive".into()));
    }
    let a_num = 32u64 * a_bits.len() as u64;
    let a_den: u64 = a_bits.iter().map(|&b| b as u64).sum();
    let a_comp = a_num as f64 / a_den as f64;
    let blocks = partition
        .blocks
        .iter()
        .enumerate()
        .map(|(i, b)| BlockRow {
            block: i,
            name: b.name.clone(),
            n: b.n as u64,
            w_bits: plan.w_bits[i],
        })
        .collect();
    Ok(CompressionReport {
        schema: REPORT_SCHEMA.to_string(),
        blocks,
        total_params: num / 32,
        size_bits,
        size_bytes: size_bits.div_ceil(8),
        w_comp,
        w_comp_rounded: round2(w_comp),
        a_comp,
        a_comp_rounded: round2(a_comp),
        a_bits,
        accuracy,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FixtureOutcome {
    pub rows: usize,
    pub computed_w_comp: f64,
    pub expected_w_comp: f64,
    pub pass: bool,
}

/// Verify a fixture CSV (columns block,n,w_bits,expected_wcomp): recompute
/// W-Comp from the table and compare against the expected column within
/// 0.005. Parse errors name the offending line.
pub fn verify_fixture(path: &Path) -> Result<FixtureOutcome> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = csv::Reader::from_reader(BufReader::new(f));
    {
        let headers = r.headers().map_err(|e| Error::Fixture(e.to_string()))?;
        let want = ["block", "n", "w_bits", "expected_wcomp"];
        if headers.len() != want.len() || headers.iter().zip(want).any(|(h, w)| h != w) {
            return Err(Error::Fixture(format!(
                "header must be block,n,w_bits,expected_wcomp; got {headers:?}"
            )));
        }
    }
    let mut n = Vec::new();
    let mut bits = Vec::new();
    let mut expected: Option<f64> = None;
    for (idx, rec) in r.records().enumerate() {
        let line = idx + 2; // header is line 1
        let rec = rec.map_err(|e| Error::Fixture(format!("line {line}: {e}")))?;
        if rec.len() != 4 {
            return Err(Error::Fixture(format!(
                "line {line}: expected 4 fields, got {}",
                rec.len()
            )));
        }
        let parse_u64 = |s: &str, what: &str| {
            s.trim().parse::<u64>().map_err(|e| {
                Error::Fixture(format!("line {line}: bad {what} {s:?}: {e}"))
            })
        };
        let _block = parse_u64(&rec[0], "block")?;
        n.push(parse_u64(&rec[1], "n")?);
        let b = parse_u64(&rec[2], "w_bits")?;
        if b == 0 || b > 32 {
            return Err(Error::Fixture(format!("line {line}: w_bits {b} out of range")));
        }
        bits.push(b as u32);
        let e: f64 = rec[3].trim().parse().map_err(|err| {
            Error::Fixture(format!("line {line}: bad expected_wcomp {:?}: {err}", &rec[3]))
        })?;
        match expected {
            None => expected = Some(e),
            Some(prev) if prev == e => {}
            Some(prev) => {
                return Err(Error::Fixture(format!(
                    "line {line}: expected_wcomp {e} disagrees with earlier value {prev}"
                )))
            }
        }
    }
    let expected = expected.ok_or_else(|| Error::Fixture("fixture has no data rows".into()))?;
    let (num, den) = weight_compression_terms(&n, &bits)?;
    let computed = num as f64 / den as f64;
    Ok(FixtureOutcome {
        rows: n.len(),
        computed_w_comp: computed,
        expected_w_comp: expected,
        pass: (computed - expected).abs() <= 0.005,
    })
}

/// Serialize a value as pretty JSON, written atomically (temp + rename).
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let json = serde_json::to_string_pretty(value)
        .map_err(|e| Error::MalformedData(e.to_string()))?;
    crate::checkpoint::atomic_write(path, json.as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Block;
    use crate::planner::ActivationBits;
    use std::io::Write;

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

    fn plan(bits: Vec<u32>, part: &BlockPartition) -> PrecisionPlan {
        let size = bits
            .iter()
            .zip(&part.blocks)
            .map(|(&k, b)| b.n as u64 * k as u64)
            .sum();
        PrecisionPlan {
            w_bits: bits,
            a_bits: ActivationBits::Global(4),
            size_bits: size,
            s_rank: (0..part.num_blocks()).collect(),
        }
    }

    #[test]
    fn identity_and_single_block_ratios() {
        let part = partition(&[100, 50]);
        let rep = compression_report(&part, &plan(vec![32, 32], &part), None).unwrap();
        assert_eq!(rep.w_comp_rounded, 1.00);
        assert_eq!(rep.w_comp, 1.0);

        let part = partition(&[777]);
        let rep = compression_report(&part, &plan(vec![4], &part), Some(0.9)).unwrap();
        assert_eq!(rep.w_comp, 8.0);
        assert_eq!(rep.a_comp, 8.0);
        assert_eq!(rep.size_bytes, (777u64 * 4).div_ceil(8));
        assert_eq!(rep.accuracy, Some(0.9));
    }

    #[test]
    fn size_decreases_as_bits_decrease() {
        let part = partition(&[100, 50]);
        let hi = compression_report(&part, &plan(vec![8, 8], &part), None).unwrap();
        let lo = compression_report(&part, &plan(vec![8, 4], &part), None).unwrap();
        assert!(lo.size_bits < hi.size_bits);
        assert!(lo.w_comp > hi.w_comp);
        assert!(hi.w_comp >= 1.0);
    }

    #[test]
    fn resnet20_fixture_reproduces_published_ratio() {
        let path = std::path::Path::new(env!("CARGO_MANIFEST_DIR"))
            .join("fixtures/resnet20_cifar10.csv");
        let out = verify_fixture(&path).unwrap();
        assert_eq!(out.rows, 11);
        assert!(out.pass, "computed {} vs expected {}", out.computed_w_comp, out.expected_w_comp);
        assert!((out.computed_w_comp - 13.11).abs() <= 0.005);
    }

    #[test]
    fn inception_fixture_reproduces_derived_ratio() {
        let path = std::path::Path::new(env!("CARGO_MANIFEST_DIR"))
            .join("fixtures/inception_v3_imagenet.csv");
        let out = verify_fixture(&path).unwrap();
        assert_eq!(out.rows, 17);
        assert!(out.pass, "computed {} vs expected {}", out.computed_w_comp, out.expected_w_comp);
        assert!((out.computed_w_comp - 12.05).abs() <= 0.005);
    }

    #[test]
    fn doubling_bits_halves_the_ratio() {
        let dir = tempfile::tempdir().unwrap();
        let orig = std::path::Path::new(env!("CARGO_MANIFEST_DIR"))
            .join("fixtures/resnet20_cifar10.csv");
        let base = verify_fixture(&orig).unwrap();

        let doubled = dir.path().join("doubled.csv");
        let text = std::fs::read_to_string(&orig).unwrap();
        let mut out = String::from("block,n,w_bits,expected_wcomp\n");
        for line in text.lines().skip(1) {
            let f: Vec<&str> = line.split(',').collect();
            let bits: u32 = f[2].parse().unwrap();
            out.push_str(&format!(
                "{},{},{},{}\n",
                f[0],
                f[1],
                bits * 2,
                base.computed_w_comp / 2.0
            ));
        }
        std::fs::write(&doubled, out).unwrap();
        let half = verify_fixture(&doubled).unwrap();
        assert!((half.computed_w_comp - base.computed_w_comp / 2.0).abs() < 1e-12);
    }

    #[test]
    fn corrupted_fixture_names_the_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.csv");
        let mut f = std::fs::File::create(&path).unwrap();
        writeln!(f, "block,n,w_bits,expected_wcomp").unwrap();
        writeln!(f, "0,100,8,4.0").unwrap();
        writeln!(f, "1,oops,8,4.0").unwrap();
        drop(f);
        let err = verify_fixture(&path).unwrap_err();
        assert!(err.to_string().contains("line 3"), "got: {err}");

        // short row
        let path = dir.path().join("short.csv");
        let mut f = std::fs::File::create(&path).unwrap();
        writeln!(f, "block,n,w_bits,expected_wcomp").unwrap();
        writeln!(f, "0,100,8").unwrap();
        drop(f);
        let err = verify_fixture(&path).unwrap_err();
        assert!(err.to_string().contains("line 2"), "got: {err}");

        // wrong header
        let path = dir.path().join("hdr.csv");
        std::fs::write(&path, "a,b,c,d\n1,2,3,4\n").unwrap();
        assert!(verify_fixture(&path).is_err());
    }

    #[test]
    fn zero_bits_rejected() {
        assert!(weight_compression_terms(&[10], &[0]).is_err());
        assert!(weight_compression_terms(&[], &[]).is_err());
    }

    #[test]
    fn mixed_activation_bits_use_mean() {
        let part = partition(&[10, 10]);
        let mut p = plan(vec![8, 8], &part);
        p.a_bits = ActivationBits::PerSite(vec![8, 4, 4, 8]);
        let rep = compression_report(&part, &p, None).unwrap();
        assert_eq!(rep.a_comp, 32.0 * 4.0 / 24.0);
    }
}
