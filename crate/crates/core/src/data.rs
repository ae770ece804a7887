//! Datasets: toy generators, IDX files and seeded batching.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const IDX_IMAGES_MAGIC: u32 = 2051;
pub const IDX_LABELS_MAGIC: u32 = 2049;

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    /// `N×...` samples.
    pub inputs: Tensor,
    pub labels: Vec<usize>,
    pub classes: usize,
}

/// One minibatch with one-hot targets.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub x: Tensor,
    pub y: Tensor,
    pub labels: Vec<usize>,
}

pub fn one_hot(labels: &[usize], classes: usize) -> Tensor {
    let mut y = Tensor::zeros(&[labels.len(), classes]);
    for (r, &l) in labels.iter().enumerate() {
        y.row_mut(r)[l] = 1.0;
    }
    y
}

impl Dataset {
    pub fn new(inputs: Tensor, labels: Vec<usize>, classes: usize) -> Result<Self> {
        if inputs.ndim() < 2 || inputs.rows() != labels.len() {
            return Err(Error::DimMismatch {
                images: inputs.shape().first().copied().unwrap_or(0),
                labels: labels.len(),
            });
        }
        if let Some(&l) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::InvalidArgument(format!(
                "label {l} out of range for {classes} classes"
            )));
        }
        Ok(Self {
            inputs,
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

    pub fn sample_shape(&self) -> &[usize] {
        &self.inputs.shape()[1..]
    }

    pub fn targets(&self) -> Tensor {
        one_hot(&self.labels, self.classes)
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let d = self.inputs.row_len();
        let mut data = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            data.extend_from_slice(self.inputs.row(i));
        }
        let mut shape = self.inputs.shape().to_vec();
        shape[0] = indices.len();
        Dataset {
            inputs: Tensor::new(shape, data).expect("row-aligned"),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            classes: self.classes,
        }
    }

    /// First `n` samples.
    pub fn take(&self, n: usize) -> Dataset {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.subset(&idx)
    }

    /// Disjoint seeded split with `round(test_fraction·N)` test samples.
    pub fn split(&self, test_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
        if !(0.0..1.0).contains(&test_fraction) {
            return Err(Error::InvalidArgument(format!(
                "test fraction must lie in [0,1), got {test_fraction}"
            )));
        }
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let n_test = (test_fraction * self.len() as f64).round() as usize;
        let (test, train) = idx.split_at(n_test);
        Ok((self.subset(train), self.subset(test)))
    }

    /// Batches over a seeded permutation; the last batch may be smaller.
    pub fn batches(&self, batch_size: usize, seed: u64) -> Result<Batches<'_>> {
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        Batches::new(self, order, batch_size)
    }

    /// Batches in dataset order.
    pub fn ordered_batches(&self, batch_size: usize) -> Result<Batches<'_>> {
        Batches::new(self, (0..self.len()).collect(), batch_size)
    }

    /// Write `x1,x2,label` rows for two-feature datasets.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        if self.sample_shape() != [2] {
            return Err(Error::InvalidArgument("CSV export needs two features".into()));
        }
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["x1", "x2", "label"])?;
        for i in 0..self.len() {
            let r = self.inputs.row(i);
            w.write_record([r[0].to_string(), r[1].to_string(), self.labels[i].to_string()])?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

pub struct Batches<'a> {
    ds: &'a Dataset,
    order: Vec<usize>,
    batch_size: usize,
    pos: usize,
}

impl<'a> Batches<'a> {
    fn new(ds: &'a Dataset, order: Vec<usize>, batch_size: usize) -> Result<Self> {
        if batch_size == 0 {
            return Err(Error::InvalidArgument("batch size must be >= 1".into()));
        }
        Ok(Self {
            ds,
            order,
            batch_size,
            pos: 0,
        })
    }
}

impl Iterator for Batches<'_> {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let sub = self.ds.subset(&self.order[self.pos..end]);
        self.pos = end;
        Some(Batch {
            y: sub.targets(),
            x: sub.inputs,
            labels: sub.labels,
        })
    }
}

fn from_points(points: Vec<[f64; 2]>, labels: Vec<usize>, classes: usize, seed: u64) -> Dataset {
    let mut idx: Vec<usize> = (0..points.len()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x5eed));
    let data = idx.iter().flat_map(|&i| points[i]).collect();
    Dataset {
        inputs: Tensor::new(vec![points.len(), 2], data).expect("two features"),
        labels: idx.iter().map(|&i| labels[i]).collect(),
        classes,
    }
}

fn check_n(n: usize, min: usize) -> Result<()> {
    if n < min {
        return Err(Error::InvalidArgument(format!("need at least {min} samples, got {n}")));
    }
    Ok(())
}

/// Two isotropic Gaussian clusters at `[1,1]` and `[2,2]` with std 0.2.
pub fn make_blobs(n: usize, seed: u64) -> Result<Dataset> {
    check_n(n, 2)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 0.2).expect("valid std");
    let centers = [[1.0, 1.0], [2.0, 2.0]];
    let mut points = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let c = usize::from(i >= n.div_ceil(2));
        points.push([
            centers[c][0] + normal.sample(&mut rng),
            centers[c][1] + normal.sample(&mut rng),
        ]);
        labels.push(c);
    }
    Ok(from_points(points, labels, 2, seed))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CirclesParams {
    /// Inner radius relative to the unit outer circle.
    pub factor: f64,
    pub noise: f64,
}

impl Default for CirclesParams {
    fn default() -> Self {
        Self {
            factor: 0.05,
            noise: 0.2,
        }
    }
}

/// Outer unit circle (class 0) and inner circle (class 1), evenly spaced
/// angles, Gaussian noise on both coordinates.
pub fn make_circles(n: usize, seed: u64) -> Result<Dataset> {
    make_circles_with(n, CirclesParams::default(), seed)
}

pub fn make_circles_with(n: usize, p: CirclesParams, seed: u64) -> Result<Dataset> {
    check_n(n, 2)?;
    if !(p.noise >= 0.0) || !(p.factor > 0.0 && p.factor < 1.0) {
        return Err(Error::InvalidArgument(format!("invalid circle parameters {p:?}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_out = n / 2;
    let n_in = n - n_out;
    let mut points = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for (count, radius, label) in [(n_out, 1.0, 0), (n_in, p.factor, 1)] {
        for i in 0..count {
            let t = 2.0 * PI * i as f64 / count as f64;
            points.push([radius * t.cos(), radius * t.sin()]);
            labels.push(label);
        }
    }
    if p.noise > 0.0 {
        let normal = Normal::new(0.0, p.noise).expect("valid std");
        for pt in &mut points {
            pt[0] += normal.sample(&mut rng);
            pt[1] += normal.sample(&mut rng);
        }
    }
    Ok(from_points(points, labels, 2, seed))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SwirlParams {
    /// Revolutions of each arm between the inner and outer radius.
    pub turns: f64,
    /// Std of the Gaussian radial noise.
    pub noise: f64,
    /// Radius where the arms start; the outer radius is 1.
    pub inner_radius: f64,
}

impl Default for SwirlParams {
    fn default() -> Self {
        Self {
            turns: 1.0,
            noise: 0.03,
            inner_radius: 0.15,
        }
    }
}

/// Point on arm `k` at parameter `s ∈ [0,1]`: radius `r0 + (1-r0)·s`,
/// angle `2π·turns·s + 2πk/3`.
pub fn swirl_point(p: &SwirlParams, k: usize, s: f64, radial_noise: f64) -> [f64; 2] {
    let r = p.inner_radius + (1.0 - p.inner_radius) * s + radial_noise;
    let a = 2.0 * PI * p.turns * s + 2.0 * PI * k as f64 / 3.0;
    [r * a.cos(), r * a.sin()]
}

/// Three interleaved Archimedean spiral arms.
pub fn make_swirl(n: usize, seed: u64) -> Result<Dataset> {
    make_swirl_with(n, SwirlParams::default(), seed)
}

pub fn make_swirl_with(n: usize, p: SwirlParams, seed: u64) -> Result<Dataset> {
    check_n(n, 3)?;
    if !(p.noise >= 0.0) || !(p.turns > 0.0) || !(0.0..1.0).contains(&p.inner_radius) {
        return Err(Error::InvalidArgument(format!("invalid swirl parameters {p:?}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, p.noise.max(f64::MIN_POSITIVE)).expect("valid std");
    let mut points = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let k = i % 3;
        let s: f64 = rng.random();
        let noise = if p.noise > 0.0 { normal.sample(&mut rng) } else { 0.0 };
        points.push(swirl_point(&p, k, s, noise));
        labels.push(k);
    }
    Ok(from_points(points, labels, 3, seed))
}

/// Magic number and dimensions of an IDX file.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IdxHeader {
    pub magic: u32,
    pub dims: Vec<usize>,
}

impl IdxHeader {
    pub fn payload_len(&self) -> usize {
        self.dims.iter().product()
    }
}

fn read_u32(bytes: &[u8], at: usize) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or(Error::Truncated {
            needed: at + 4,
            have: bytes.len(),
        })
}

/// Parse an unsigned-byte IDX file, checking the magic against `expected`.
pub fn parse_idx(bytes: &[u8], expected: u32) -> Result<(IdxHeader, &[u8])> {
    let magic = read_u32(bytes, 0)?;
    if magic != expected {
        return Err(Error::WrongMagic {
            found: magic,
            expected,
        });
    }
    let ndims = (magic & 0xff) as usize;
    let dims = (0..ndims)
        .map(|i| read_u32(bytes, 4 + 4 * i).map(|d| d as usize))
        .collect::<Result<Vec<_>>>()?;
    let header = IdxHeader { magic, dims };
    let start = 4 + 4 * ndims;
    let needed = start + header.payload_len();
    if bytes.len() < needed {
        return Err(Error::Truncated {
            needed,
            have: bytes.len(),
        });
    }
    Ok((header, &bytes[start..needed]))
}

pub fn read_idx(path: &Path, expected: u32) -> Result<(IdxHeader, Vec<u8>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (h, payload) = parse_idx(&bytes, expected)?;
    Ok((h, payload.to_vec()))
}

pub fn encode_idx(header: &IdxHeader, payload: &[u8]) -> Result<Vec<u8>> {
    if payload.len() != header.payload_len() || header.dims.len() != (header.magic & 0xff) as usize {
        return Err(Error::InvalidArgument("IDX header does not match payload".into()));
    }
    let mut out = Vec::with_capacity(4 + 4 * header.dims.len() + payload.len());
    out.extend(header.magic.to_be_bytes());
    for &d in &header.dims {
        out.extend((d as u32).to_be_bytes());
    }
    out.extend_from_slice(payload);
    Ok(out)
}

pub fn write_idx(path: &Path, header: &IdxHeader, payload: &[u8]) -> Result<()> {
    fs::write(path, encode_idx(header, payload)?).map_err(|e| Error::io(path, e))
}

/// Images scaled by 1/255 with shape `N×rows×cols` flattened to `N×(rows·cols)`.
pub fn load_idx(images: &Path, labels: &Path) -> Result<Dataset> {
    let (ih, ibytes) = read_idx(images, IDX_IMAGES_MAGIC)?;
    let (lh, lbytes) = read_idx(labels, IDX_LABELS_MAGIC)?;
    if ih.dims[0] != lh.dims[0] {
        return Err(Error::DimMismatch {
            images: ih.dims[0],
            labels: lh.dims[0],
        });
    }
    let n = ih.dims[0];
    let d = ih.payload_len() / n.max(1);
    let inputs = Tensor::new(
        vec![n, d],
        ibytes.iter().map(|&b| f64::from(b) / 255.0).collect(),
    )?;
    let labels: Vec<usize> = lbytes.iter().map(|&b| b as usize).collect();
    let classes = labels.iter().max().map_or(0, |m| m + 1).max(10);
    Dataset::new(inputs, labels, classes)
}

/// `train` or `t10k` split from a directory holding the four MNIST files.
pub fn load_mnist(dir: &Path, train: bool) -> Result<Dataset> {
    let prefix = if train { "train" } else { "t10k" };
    let images = dir.join(format!("{prefix}-images-idx3-ubyte"));
    let labels = dir.join(format!("{prefix}-labels-idx1-ubyte"));
    if !images.exists() || !labels.exists() {
        return Err(Error::DatasetNotFound(dir.to_path_buf()));
    }
    load_idx(&images, &labels)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn blobs_balanced_and_deterministic() {
        let a = make_blobs(1000, 3).unwrap();
        assert_eq!(a, make_blobs(1000, 3).unwrap());
        assert_eq!(a.labels.iter().filter(|&&l| l == 0).count(), 500);
        let two = make_blobs(2, 0).unwrap();
        let mut l = two.labels.clone();
        l.sort();
        assert_eq!(l, vec![0, 1]);
    }

    #[test]
    fn blob_means_near_centers() {
        let ds = make_blobs(1000, 9).unwrap();
        let tol = 3.0 * 0.2 / (500f64).sqrt();
        for (c, center) in [(0usize, 1.0), (1, 2.0)] {
            let rows: Vec<&[f64]> = (0..ds.len())
                .filter(|&i| ds.labels[i] == c)
                .map(|i| ds.inputs.row(i))
                .collect();
            for f in 0..2 {
                let m = rows.iter().map(|r| r[f]).sum::<f64>() / rows.len() as f64;
                assert!((m - center).abs() < tol, "class {c} feature {f} mean {m}");
            }
        }
    }

    #[test]
    fn noiseless_circles() {
        let p = CirclesParams {
            factor: 0.05,
            noise: 0.0,
        };
        let ds = make_circles_with(100, p, 1).unwrap();
        for i in 0..ds.len() {
            let r = ds.inputs.row(i);
            let radius = r[0].hypot(r[1]);
            let expect = if ds.labels[i] == 1 { 0.05 } else { 1.0 };
            assert!((radius - expect).abs() < 1e-12);
        }
        assert_eq!(ds.labels.iter().filter(|&&l| l == 1).count(), 50);
    }

    #[test]
    fn swirl_arms() {
        let p = SwirlParams {
            noise: 0.0,
            ..SwirlParams::default()
        };
        let ds = make_swirl_with(300, p, 2).unwrap();
        for c in 0..3 {
            assert_eq!(ds.labels.iter().filter(|&&l| l == c).count(), 100);
        }
        // arm k starts at angle 2πk/3
        for k in 0..3 {
            let [x, y] = swirl_point(&p, k, 0.0, 0.0);
            let a = y.atan2(x).rem_euclid(2.0 * PI);
            assert!((a - 2.0 * PI * k as f64 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn split_is_disjoint() {
        let ds = make_blobs(50, 1).unwrap();
        let marked = Dataset {
            inputs: Tensor::from_fn(&[50, 1], |i| i as f64),
            labels: ds.labels.clone(),
            classes: 2,
        };
        let (tr, te) = marked.split(0.2, 4).unwrap();
        assert_eq!((tr.len(), te.len()), (40, 10));
        let mut all: Vec<f64> = tr.inputs.data().iter().chain(te.inputs.data()).copied().collect();
        all.sort_by(f64::total_cmp);
        assert_eq!(all, (0..50).map(|i| i as f64).collect::<Vec<_>>());
    }

    #[test]
    fn batches_cover_once() {
        let ds = Dataset::new(Tensor::from_fn(&[10, 1], |i| i as f64), vec![0; 10], 1).unwrap();
        let b: Vec<Batch> = ds.batches(4, 7).unwrap().collect();
        assert_eq!(b.iter().map(|b| b.labels.len()).collect::<Vec<_>>(), vec![4, 4, 2]);
        let mut seen: Vec<f64> = b.iter().flat_map(|b| b.x.data().to_vec()).collect();
        let again: Vec<f64> = ds.batches(4, 7).unwrap().flat_map(|b| b.x.data().to_vec()).collect();
        assert_eq!(seen, again);
        seen.sort_by(f64::total_cmp);
        assert_eq!(seen, (0..10).map(f64::from).collect::<Vec<_>>());
        assert_eq!(ds.batches(10, 0).unwrap().count(), 1);
        assert!(ds.batches(0, 0).is_err());
    }

    #[test]
    fn idx_errors() {
        let h = IdxHeader {
            magic: IDX_IMAGES_MAGIC,
            dims: vec![2, 2, 2],
        };
        let bytes = encode_idx(&h, &[0, 1, 2, 3, 4, 5, 6, 7]).unwrap();
        let (back, payload) = parse_idx(&bytes, IDX_IMAGES_MAGIC).unwrap();
        assert_eq!(back, h);
        assert_eq!(payload, &[0, 1, 2, 3, 4, 5, 6, 7]);
        assert!(matches!(
            parse_idx(&bytes, IDX_LABELS_MAGIC),
            Err(Error::WrongMagic { found: 2051, expected: 2049 })
        ));
        assert!(matches!(
            parse_idx(&bytes[..bytes.len() - 1], IDX_IMAGES_MAGIC),
            Err(Error::Truncated { .. })
        ));
        assert!(matches!(parse_idx(&bytes[..3], IDX_IMAGES_MAGIC), Err(Error::Truncated { .. })));
    }
}
