//! Dataset ingestion: IDX image/label files, synthetic Gaussian blobs, CSV.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::model::Batch;
use crate::tensor::Tensor;

/// An immutable labeled dataset. Features are stored as [N, ...] with values
/// normalized into [0, 1] by the loaders.
#[derive(Debug, Clone)]
pub struct Dataset {
    features: Tensor,
    labels: Vec<usize>,
    classes: usize,
}

impl Dataset {
    pub fn new(features: Tensor, labels: Vec<usize>, classes: usize) -> Result<Self> {
        if features.shape().is_empty() || features.shape()[0] != labels.len() {
            return Err(Error::MalformedData(format!(
                "{} feature rows vs {} labels",
                features.shape().first().copied().unwrap_or(0),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::LabelOutOfRange { label: bad, classes });
        }
        Ok(Dataset {
            features,
            labels,
            classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn features(&self) -> &Tensor {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// Feature element count per example.
    pub fn example_numel(&self) -> usize {
        self.features.shape()[1..].iter().product()
    }

    /// Per-example feature shape.
    pub fn example_shape(&self) -> &[usize] {
        &self.features.shape()[1..]
    }

    /// Copy the rows at `indices` into a batch, preserving order.
    pub fn gather(&self, indices: &[usize]) -> Batch {
        let stride = self.example_numel();
        let src = self.features.elems();
        let mut elems = Vec::with_capacity(indices.len() * stride);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            elems.extend_from_slice(&src[i * stride..(i + 1) * stride]);
            labels.push(self.labels[i]);
        }
        let mut shape = vec![indices.len()];
        shape.extend_from_slice(self.example_shape());
        Batch {
            features: Tensor::new(shape, elems).expect("sized"),
            labels,
        }
    }
}

/// Deterministic Gaussian blobs with class means ~6 sigma apart.
pub fn synth_blobs(n: usize, classes: usize, dim: usize, seed: u64) -> Result<Dataset> {
    synth_blobs_with_separation(n, classes, dim, seed, 6.0)
}

/// Gaussian blobs with configurable class-mean separation (in units of the
/// unit noise sigma). Class means sit at (sep/sqrt(2)) * (+/- e_{c mod dim}),
/// so any two distinct means are at least `sep` apart; labels cycle i % C.
pub fn synth_blobs_with_separation(
    n: usize,
    classes: usize,
    dim: usize,
    seed: u64,
    separation: f64,
) -> Result<Dataset> {
    if n == 0 || classes == 0 || dim == 0 {
        return Err(Error::MalformedData("n, classes, dim must be positive".into()));
    }
    if classes > 2 * dim {
        return Err(Error::MalformedData(format!(
            "classes ({classes}) must be <= 2*dim ({}) for separated means",
            2 * dim
        )));
    }
    if !(separation > 0.0) {
        return Err(Error::MalformedData("separation must be positive".into()));
    }
    let mut means = vec![vec![0.0; dim]; classes];
    let radius = separation / std::f64::consts::SQRT_2;
    for (c, mean) in means.iter_mut().enumerate() {
        let sign = if (c / dim).is_multiple_of(2) { 1.0 } else { -1.0 };
        mean[c % dim] = sign * radius;
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = StandardNormal;
    let mut elems = Vec::with_capacity(n * dim);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let label = i % classes;
        labels.push(label);
        for d in 0..dim {
            let noise: f64 = normal.sample(&mut rng);
            elems.push(means[label][d] + noise);
        }
    }

    // min-max normalize each dimension into [0, 1]
    for d in 0..dim {
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for i in 0..n {
            let v = elems[i * dim + d];
            lo = lo.min(v);
            hi = hi.max(v);
        }
        let span = hi - lo;
        for i in 0..n {
            let v = &mut elems[i * dim + d];
            *v = if span > 1e-12 { (*v - lo) / span } else { 0.0 };
        }
    }

    Dataset::new(Tensor::new(vec![n, dim], elems)?, labels, classes)
}

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

fn read_u32_be(r: &mut impl Read, path: &Path) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)
        .map_err(|e| Error::io(path, e))?;
    Ok(u32::from_be_bytes(buf))
}

/// Load an IDX image file plus its IDX label file into a dataset with
/// features scaled to [0, 1].
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let f = File::open(images_path).map_err(|e| Error::io(images_path, e))?;
    let mut r = BufReader::new(f);
    let magic = read_u32_be(&mut r, images_path)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::MalformedData(format!(
            "bad IDX image magic {magic:#010x}, expected {IDX_IMAGES_MAGIC:#010x}"
        )));
    }
    let n = read_u32_be(&mut r, images_path)? as usize;
    let rows = read_u32_be(&mut r, images_path)? as usize;
    let cols = read_u32_be(&mut r, images_path)? as usize;
    if n == 0 || rows == 0 || cols == 0 {
        return Err(Error::MalformedData("IDX image header has zero dimension".into()));
    }
    let mut raw = vec![0u8; n * rows * cols];
    r.read_exact(&mut raw).map_err(|_| {
        Error::MalformedData(format!("truncated IDX image file {}", images_path.display()))
    })?;
    if r.read(&mut [0u8; 1]).map_err(|e| Error::io(images_path, e))? != 0 {
        return Err(Error::MalformedData(format!(
            "trailing bytes in IDX image file {}",
            images_path.display()
        )));
    }
    let elems: Vec<f64> = raw.iter().map(|&b| b as f64 / 255.0).collect();
    let features = Tensor::new(vec![n, rows, cols], elems)?;

    let f = File::open(labels_path).map_err(|e| Error::io(labels_path, e))?;
    let mut r = BufReader::new(f);
    let magic = read_u32_be(&mut r, labels_path)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::MalformedData(format!(
            "bad IDX label magic {magic:#010x}, expected {IDX_LABELS_MAGIC:#010x}"
        )));
    }
    let ln = read_u32_be(&mut r, labels_path)? as usize;
    if ln != n {
        return Err(Error::MalformedData(format!(
            "{n} images but {ln} labels"
        )));
    }
    let mut raw = vec![0u8; ln];
    r.read_exact(&mut raw).map_err(|_| {
        Error::MalformedData(format!("truncated IDX label file {}", labels_path.display()))
    })?;
    let labels: Vec<usize> = raw.iter().map(|&b| b as usize).collect();
    let classes = labels.iter().copied().max().unwrap_or(0) + 1;
    Dataset::new(features, labels, classes)
}

/// Write a dataset as RFC-4180 CSV: header f0..f{d-1},label.
pub fn write_csv(ds: &Dataset, path: &Path) -> Result<()> {
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(BufWriter::new(f));
    let d = ds.example_numel();
    let mut header: Vec<String> = (0..d).map(|i| format!("f{i}")).collect();
    header.push("label".into());
    w.write_record(&header).map_err(|e| Error::MalformedData(e.to_string()))?;
    let src = ds.features().elems();
    for i in 0..ds.len() {
        let mut rec: Vec<String> = src[i * d..(i + 1) * d].iter().map(|v| format!("{v}")).collect();
        rec.push(ds.labels()[i].to_string());
        w.write_record(&rec).map_err(|e| Error::MalformedData(e.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Read a dataset written by [`write_csv`].
pub fn read_csv(path: &Path) -> Result<Dataset> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = csv::Reader::from_reader(BufReader::new(f));
    let headers = r.headers().map_err(|e| Error::MalformedData(e.to_string()))?.clone();
    if headers.is_empty() || headers.iter().next_back() != Some("label") {
        return Err(Error::MalformedData("CSV must end with a 'label' column".into()));
    }
    let d = headers.len() - 1;
    let mut elems = Vec::new();
    let mut labels = Vec::new();
    for (line, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| Error::MalformedData(format!("line {}: {e}", line + 2)))?;
        if rec.len() != d + 1 {
            return Err(Error::MalformedData(format!(
                "line {}: expected {} fields, got {}",
                line + 2,
                d + 1,
                rec.len()
            )));
        }
        for v in rec.iter().take(d) {
            elems.push(v.parse::<f64>().map_err(|e| {
                Error::MalformedData(format!("line {}: bad float {v:?}: {e}", line + 2))
            })?);
        }
        labels.push(rec[d].parse::<usize>().map_err(|e| {
            Error::MalformedData(format!("line {}: bad label: {e}", line + 2))
        })?);
    }
    if labels.is_empty() {
        return Err(Error::MalformedData("CSV has no data rows".into()));
    }
    let n = labels.len();
    let classes = labels.iter().copied().max().unwrap_or(0) + 1;
    Dataset::new(Tensor::new(vec![n, d], elems)?, labels, classes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    #[test]
    fn blobs_are_deterministic() {
        let a = synth_blobs(100, 2, 2, 1).unwrap();
        let b = synth_blobs(100, 2, 2, 1).unwrap();
        assert_eq!(a.features().elems(), b.features().elems());
        assert_eq!(a.labels(), b.labels());
        let c = synth_blobs(100, 2, 2, 2).unwrap();
        assert!(a.features().elems() != c.features().elems());
    }

    #[test]
    fn blobs_are_normalized_and_labeled() {
        let ds = synth_blobs(200, 3, 4, 7).unwrap();
        assert_eq!(ds.len(), 200);
        assert_eq!(ds.classes(), 3);
        assert!(ds.features().elems().iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert!(ds.labels().iter().all(|&l| l < 3));
        assert!(synth_blobs(0, 2, 2, 0).is_err());
        assert!(synth_blobs(10, 9, 2, 0).is_err()); // classes > 2*dim
    }

    /// Independent oracle: multinomial logistic regression on raw arrays.
    fn logistic_train_accuracy(ds: &Dataset, epochs: usize, lr: f64) -> f64 {
        let (n, d, c) = (ds.len(), ds.example_numel(), ds.classes());
        let x = ds.features().elems();
        let mut w = vec![0.0f64; d * c];
        let mut b = vec![0.0f64; c];
        for _ in 0..epochs {
            let mut gw = vec![0.0; d * c];
            let mut gb = vec![0.0; c];
            for i in 0..n {
                let xi = &x[i * d..(i + 1) * d];
                let mut z: Vec<f64> = (0..c)
                    .map(|j| b[j] + xi.iter().enumerate().map(|(k, &v)| v * w[k * c + j]).sum::<f64>())
                    .collect();
                let mx = z.iter().fold(f64::NEG_INFINITY, |a, &v| a.max(v));
                z.iter_mut().for_each(|v| *v = (*v - mx).exp());
                let s: f64 = z.iter().sum();
                for j in 0..c {
                    let p = z[j] / s - if j == ds.labels()[i] { 1.0 } else { 0.0 };
                    gb[j] += p;
                    for (k, &v) in xi.iter().enumerate() {
                        gw[k * c + j] += p * v;
                    }
                }
            }
            for (wi, gi) in w.iter_mut().zip(&gw) {
                *wi -= lr * gi / n as f64;
            }
            for (bi, gi) in b.iter_mut().zip(&gb) {
                *bi -= lr * gi / n as f64;
            }
        }
        let mut correct = 0;
        for i in 0..n {
            let xi = &x[i * d..(i + 1) * d];
            let mut best = 0;
            let mut best_z = f64::NEG_INFINITY;
            for j in 0..c {
                let z = b[j] + xi.iter().enumerate().map(|(k, &v)| v * w[k * c + j]).sum::<f64>();
                if z > best_z {
                    best_z = z;
                    best = j;
                }
            }
            if best == ds.labels()[i] {
                correct += 1;
            }
        }
        correct as f64 / n as f64
    }

    #[test]
    fn separated_blobs_are_linearly_separable() {
        // class means >= 6 sigma apart -> a linear classifier gets >= 99%
        let ds = synth_blobs(400, 3, 3, 5).unwrap();
        let acc = logistic_train_accuracy(&ds, 300, 4.0);
        assert!(acc >= 0.99, "logistic oracle accuracy {acc}");
    }

    #[test]
    fn gather_preserves_order() {
        let ds = synth_blobs(10, 2, 3, 0).unwrap();
        let batch = ds.gather(&[7, 2]);
        assert_eq!(batch.len(), 2);
        assert_eq!(batch.labels[0], ds.labels()[7]);
        assert_eq!(
            &batch.features.elems()[0..3],
            &ds.features().elems()[7 * 3..8 * 3]
        );
    }

    fn write_idx_pair(dir: &std::path::Path, n: u32, rows: u32, cols: u32) -> (std::path::PathBuf, std::path::PathBuf) {
        let images = dir.join("img.idx");
        let labels = dir.join("lbl.idx");
        let mut f = File::create(&images).unwrap();
        f.write_all(&0x0000_0803u32.to_be_bytes()).unwrap();
        f.write_all(&n.to_be_bytes()).unwrap();
        f.write_all(&rows.to_be_bytes()).unwrap();
        f.write_all(&cols.to_be_bytes()).unwrap();
        let payload: Vec<u8> = (0..(n * rows * cols) as usize).map(|i| (i % 256) as u8).collect();
        f.write_all(&payload).unwrap();
        let mut f = File::create(&labels).unwrap();
        f.write_all(&0x0000_0801u32.to_be_bytes()).unwrap();
        f.write_all(&n.to_be_bytes()).unwrap();
        let payload: Vec<u8> = (0..n as usize).map(|i| (i % 4) as u8).collect();
        f.write_all(&payload).unwrap();
        (images, labels)
    }

    #[test]
    fn idx_round_trip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let (images, labels) = write_idx_pair(dir.path(), 10, 28, 28);
        let ds = load_idx(&images, &labels).unwrap();
        assert_eq!(ds.len(), 10);
        assert_eq!(ds.example_shape(), &[28, 28]);
        assert!(ds.features().elems().iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert_eq!(ds.features().elems()[1], 1.0 / 255.0);

        // bad magic
        let bad = dir.path().join("bad.idx");
        let mut f = File::create(&bad).unwrap();
        f.write_all(&0xdead_beefu32.to_be_bytes()).unwrap();
        f.write_all(&[0u8; 12]).unwrap();
        assert!(matches!(load_idx(&bad, &labels), Err(Error::MalformedData(_))));

        // truncated payload
        let trunc = dir.path().join("trunc.idx");
        let mut f = File::create(&trunc).unwrap();
        f.write_all(&0x0000_0803u32.to_be_bytes()).unwrap();
        f.write_all(&10u32.to_be_bytes()).unwrap();
        f.write_all(&28u32.to_be_bytes()).unwrap();
        f.write_all(&28u32.to_be_bytes()).unwrap();
        f.write_all(&[0u8; 100]).unwrap();
        let err = load_idx(&trunc, &labels).unwrap_err();
        assert!(err.to_string().contains("truncated"));
    }

    #[test]
    fn csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ds.csv");
        let ds = synth_blobs(25, 3, 4, 9).unwrap();
        write_csv(&ds, &path).unwrap();
        let back = read_csv(&path).unwrap();
        assert_eq!(back.len(), ds.len());
        assert_eq!(back.labels(), ds.labels());
        for (a, b) in back.features().elems().iter().zip(ds.features().elems()) {
            assert!((a - b).abs() < 1e-15);
        }
    }
}
