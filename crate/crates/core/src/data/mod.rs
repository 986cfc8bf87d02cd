//! Datasets: IDX image files, synthetic generators, seeded batching.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::Tensor;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub x: Tensor,
    pub labels: Option<Vec<u8>>,
    pub name: String,
    /// Generator seed for synthetic data.
    pub origin_seed: Option<u64>,
    /// `(rows, cols)` when rows of `x` are flattened images.
    pub image_shape: Option<(usize, usize)>,
}

impl Dataset {
    pub fn new(x: Tensor, name: impl Into<String>) -> Result<Self> {
        if !x.is_matrix() {
            return Err(Error::Contract(format!("dataset must be [n × D], got {:?}", x.shape())));
        }
        x.check_finite("dataset")?;
        Ok(Self {
            x,
            labels: None,
            name: name.into(),
            origin_seed: None,
            image_shape: None,
        })
    }

    pub fn len(&self) -> usize {
        self.x.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.x.cols()
    }

    pub fn select(&self, idx: &[usize]) -> Result<Self> {
        Ok(Self {
            x: self.x.select_rows(idx)?,
            labels: self.labels.as_ref().map(|l| idx.iter().map(|&i| l[i]).collect()),
            name: self.name.clone(),
            origin_seed: self.origin_seed,
            image_shape: self.image_shape,
        })
    }

    /// The first `n` rows (all of them if `n` is larger).
    pub fn head(&self, n: usize) -> Result<Self> {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.select(&idx)
    }

    /// Pixels mapped to `{0, 1}` at `threshold`.
    pub fn binarize(&self, threshold: f64) -> Self {
        let mut out = self.clone();
        out.x = self.x.map(|v| if v > threshold { 1.0 } else { 0.0 });
        out
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IdxHeader {
    pub magic: u32,
    pub dims: Vec<u32>,
}

impl IdxHeader {
    pub fn byte_len(&self) -> usize {
        4 + 4 * self.dims.len()
    }

    pub fn payload_len(&self) -> usize {
        self.dims.iter().map(|&d| d as usize).product()
    }
}

fn be_u32(bytes: &[u8], at: usize) -> Option<u32> {
    bytes.get(at..at + 4).map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
}

/// Parses and validates an IDX header whose magic must equal `expected`.
pub fn parse_idx_header(bytes: &[u8], expected: u32, what: &str) -> Result<IdxHeader> {
    let magic = be_u32(bytes, 0).ok_or_else(|| Error::Length {
        what: format!("{what} header"),
        expected: 4,
        actual: bytes.len(),
    })?;
    if magic != expected {
        return Err(Error::Format(format!(
            "{what}: IDX magic 0x{magic:08x}, expected 0x{expected:08x}"
        )));
    }
    let ndim = (magic & 0xff) as usize;
    let dims = (0..ndim)
        .map(|i| be_u32(bytes, 4 + 4 * i))
        .collect::<Option<Vec<_>>>()
        .ok_or_else(|| Error::Length {
            what: format!("{what} header"),
            expected: 4 + 4 * ndim,
            actual: bytes.len(),
        })?;
    Ok(IdxHeader { magic, dims })
}

fn idx_payload<'a>(bytes: &'a [u8], header: &IdxHeader, what: &str) -> Result<&'a [u8]> {
    let expected = header.byte_len() + header.payload_len();
    if bytes.len() != expected {
        return Err(Error::Length {
            what: what.to_string(),
            expected,
            actual: bytes.len(),
        });
    }
    Ok(&bytes[header.byte_len()..])
}

/// Decodes an in-memory IDX image file (u8 pixels scaled by 1/255).
pub fn parse_idx_images(bytes: &[u8], name: &str) -> Result<Dataset> {
    let header = parse_idx_header(bytes, IDX_IMAGES_MAGIC, name)?;
    let payload = idx_payload(bytes, &header, name)?;
    let (n, rows, cols) = (header.dims[0] as usize, header.dims[1] as usize, header.dims[2] as usize);
    if n == 0 || rows * cols == 0 {
        return Err(Error::Format(format!("{name}: IDX file declares an empty dataset")));
    }
    let x = Tensor::new(&[n, rows * cols], payload.iter().map(|&p| p as f64 / 255.0).collect())?;
    let mut ds = Dataset::new(x, name)?;
    ds.image_shape = Some((rows, cols));
    Ok(ds)
}

pub fn parse_idx_labels(bytes: &[u8], name: &str) -> Result<Vec<u8>> {
    let header = parse_idx_header(bytes, IDX_LABELS_MAGIC, name)?;
    Ok(idx_payload(bytes, &header, name)?.to_vec())
}

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn load_idx(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    parse_idx_images(&read(path)?, &path.display().to_string())
}

pub fn load_idx_labels(path: impl AsRef<Path>) -> Result<Vec<u8>> {
    let path = path.as_ref();
    parse_idx_labels(&read(path)?, &path.display().to_string())
}

/// Images plus a matching label file.
pub fn load_idx_with_labels(images: impl AsRef<Path>, labels: impl AsRef<Path>) -> Result<Dataset> {
    let mut ds = load_idx(images)?;
    let labels = load_idx_labels(labels)?;
    if labels.len() != ds.len() {
        return Err(Error::Contract(format!(
            "{} images but {} labels",
            ds.len(),
            labels.len()
        )));
    }
    ds.labels = Some(labels);
    Ok(ds)
}

/// Serializes images as IDX (`0x803`), rounding pixels to u8.
pub fn encode_idx_images(x: &Tensor, rows: usize, cols: usize) -> Result<Vec<u8>> {
    if x.cols() != rows * cols {
        return Err(Error::shape("encode_idx_images", x.shape(), &[x.rows(), rows * cols]));
    }
    let mut out = Vec::with_capacity(16 + x.len());
    for v in [IDX_IMAGES_MAGIC, x.rows() as u32, rows as u32, cols as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out.extend(x.data().iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub enum SyntheticSpec {
    /// Uniform choice of component, then `N(mean, scale² I)`.
    GaussianMixture { means: Vec<Vec<f64>>, scales: Vec<f64> },
    /// 2-D spiral arms.
    Pinwheel {
        arms: usize,
        radial_std: f64,
        tangential_std: f64,
        rate: f64,
    },
}

impl SyntheticSpec {
    /// `k` components; component `j` sits at `spread·(cos θ, −sin θ, cos 2θ, −sin 2θ, …)` with `θ = 2πj/k`.
    pub fn mixture(k: usize, dim: usize, spread: f64, scale: f64) -> Self {
        let means = (0..k)
            .map(|j| {
                let angle = 2.0 * std::f64::consts::PI * j as f64 / k as f64;
                (0..dim)
                    .map(|d| {
                        let t = angle * (d / 2 + 1) as f64;
                        spread * if d % 2 == 0 { t.cos() } else { -t.sin() }
                    })
                    .collect()
            })
            .collect();
        SyntheticSpec::GaussianMixture {
            means,
            scales: vec![scale; k],
        }
    }

    pub fn pinwheel(arms: usize) -> Self {
        SyntheticSpec::Pinwheel {
            arms,
            radial_std: 0.3,
            tangential_std: 0.05,
            rate: 0.25,
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            SyntheticSpec::GaussianMixture { means, .. } => means.first().map_or(0, |m| m.len()),
            SyntheticSpec::Pinwheel { .. } => 2,
        }
    }

    fn validate(&self) -> Result<()> {
        match self {
            SyntheticSpec::GaussianMixture { means, scales } => {
                let d = self.dim();
                if means.is_empty() || d == 0 || scales.len() != means.len() {
                    return Err(Error::Spec("mixture needs >= 1 component with matching scales".into()));
                }
                if means.iter().any(|m| m.len() != d) || scales.iter().any(|&s| !(s >= 0.0)) {
                    return Err(Error::Spec("mixture means must share a dimension; scales >= 0".into()));
                }
            }
            SyntheticSpec::Pinwheel { arms, .. } if *arms == 0 => {
                return Err(Error::Spec("pinwheel needs >= 1 arm".into()));
            }
            _ => {}
        }
        Ok(())
    }
}

/// Compact text form used by the CLI: `mixture:K:DIM[:SPREAD[:SCALE]]` or `pinwheel:ARMS`.
impl FromStr for SyntheticSpec {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split(':').collect();
        let num = |i: usize, default: Option<f64>| -> Result<f64> {
            match parts.get(i) {
                Some(p) => p.parse().map_err(|_| Error::Config(format!("bad number {p:?} in synthetic spec {s:?}"))),
                None => default.ok_or_else(|| Error::Config(format!("synthetic spec {s:?} is missing fields"))),
            }
        };
        match parts[0] {
            "mixture" => Ok(SyntheticSpec::mixture(
                num(1, None)? as usize,
                num(2, None)? as usize,
                num(3, Some(2.0))?,
                num(4, Some(0.3))?,
            )),
            "pinwheel" => Ok(SyntheticSpec::pinwheel(num(1, Some(5.0))? as usize)),
            other => Err(Error::Config(format!("unknown synthetic family {other:?}"))),
        }
    }
}

impl fmt::Display for SyntheticSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SyntheticSpec::GaussianMixture { means, scales } => {
                write!(f, "mixture(k={}, dim={}, scale={})", means.len(), self.dim(), scales[0])
            }
            SyntheticSpec::Pinwheel { arms, .. } => write!(f, "pinwheel(arms={arms})"),
        }
    }
}

pub fn gen_synthetic(spec: &SyntheticSpec, n: usize, seed: u64) -> Result<Dataset> {
    spec.validate()?;
    if n == 0 {
        return Err(Error::Contract("synthetic dataset needs n >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = spec.dim();
    let mut x = Vec::with_capacity(n * d);
    let mut labels = Vec::with_capacity(n);
    match spec {
        SyntheticSpec::GaussianMixture { means, scales } => {
            for _ in 0..n {
                let k = rng.random_range(0..means.len());
                for &m in &means[k] {
                    let e: f64 = rng.sample(StandardNormal);
                    x.push(m + scales[k] * e);
                }
                labels.push(k as u8);
            }
        }
        SyntheticSpec::Pinwheel {
            arms,
            radial_std,
            tangential_std,
            rate,
        } => {
            for i in 0..n {
                let arm = i % arms;
                let r0: f64 = rng.sample(StandardNormal);
                let t0: f64 = rng.sample(StandardNormal);
                let (r, t) = (1.0 + radial_std * r0, tangential_std * t0);
                let angle = 2.0 * std::f64::consts::PI * arm as f64 / *arms as f64 + rate * r.exp();
                let (s, c) = angle.sin_cos();
                x.push(c * r - s * t);
                x.push(s * r + c * t);
                labels.push(arm as u8);
            }
        }
    }
    let mut ds = Dataset::new(Tensor::new(&[n, d], x)?, spec.to_string())?;
    ds.labels = Some(labels);
    ds.origin_seed = Some(seed);
    Ok(ds)
}

pub(crate) fn shuffle<R: Rng>(order: &mut [usize], rng: &mut R) {
    order.shuffle(rng);
}

/// A seeded permutation of `0..n` for `(seed, epoch)`, chunked into batches.
pub fn batch_iter(n: usize, batch_size: usize, seed: u64, epoch: usize) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(Error::Contract("batch_size must be >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    Ok(order.chunks(batch_size).map(<[usize]>::to_vec).collect())
}

/// First 90% / last 10% of a seeded shuffle. Both parts keep original row order.
pub fn train_val_split(ds: &Dataset, seed: u64) -> Result<(Dataset, Dataset)> {
    if ds.len() < 2 {
        return Err(Error::Contract("need at least two rows to split".into()));
    }
    let mut order: Vec<usize> = (0..ds.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // a stream no epoch of batch_iter uses
    rng.set_stream(u64::MAX);
    order.shuffle(&mut rng);
    let n_train = ((ds.len() * 9) / 10).clamp(1, ds.len() - 1);
    let (mut train, mut val) = (order[..n_train].to_vec(), order[n_train..].to_vec());
    train.sort_unstable();
    val.sort_unstable();
    Ok((ds.select(&train)?, ds.select(&val)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fixture(n_declared: u32, pixels: &[u8]) -> Vec<u8> {
        let mut b = Vec::new();
        for v in [IDX_IMAGES_MAGIC, n_declared, 2, 2] {
            b.extend_from_slice(&v.to_be_bytes());
        }
        b.extend_from_slice(pixels);
        b
    }

    #[test]
    fn handcrafted_idx_parses() {
        let bytes = fixture(2, &[0, 0, 0, 0, 255, 255, 255, 255]);
        assert_eq!(bytes.len(), 24);
        let ds = parse_idx_images(&bytes, "fixture").unwrap();
        assert_eq!(ds.x.shape(), &[2, 4]);
        assert_eq!(ds.x.data(), &[0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 1.0]);
        assert_eq!(ds.image_shape, Some((2, 2)));
    }

    #[test]
    fn bad_magic() {
        let mut bytes = fixture(2, &[0; 8]);
        bytes[..4].copy_from_slice(&0xDEAD_BEEFu32.to_be_bytes());
        match parse_idx_images(&bytes, "f") {
            Err(Error::Format(msg)) => assert!(msg.contains("0xdeadbeef")),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn truncated_payload() {
        let bytes = fixture(3, &[0; 8]);
        match parse_idx_images(&bytes, "f") {
            Err(Error::Length { expected, actual, .. }) => assert_eq!((expected, actual), (28, 24)),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn labels_and_round_trip() {
        let mut lb = Vec::new();
        lb.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
        lb.extend_from_slice(&3u32.to_be_bytes());
        lb.extend_from_slice(&[7, 0, 9]);
        assert_eq!(parse_idx_labels(&lb, "l").unwrap(), vec![7, 0, 9]);

        let bytes = fixture(2, &[0, 17, 128, 255, 3, 4, 5, 6]);
        let ds = parse_idx_images(&bytes, "f").unwrap();
        assert_eq!(encode_idx_images(&ds.x, 2, 2).unwrap(), bytes);
    }

    #[test]
    fn synthetic_is_deterministic() {
        let spec = SyntheticSpec::mixture(3, 4, 2.0, 0.5);
        let a = gen_synthetic(&spec, 100, 7).unwrap();
        assert_eq!(a, gen_synthetic(&spec, 100, 7).unwrap());
        assert_eq!(a.x.shape(), &[100, 4]);
        let p = gen_synthetic(&SyntheticSpec::pinwheel(5), 50, 1).unwrap();
        assert_eq!(p.x.shape(), &[50, 2]);
    }

    #[test]
    fn single_component_mean_within_clt_bound() {
        let spec = SyntheticSpec::GaussianMixture {
            means: vec![vec![1.5, -2.0, 0.25]],
            scales: vec![0.7],
        };
        let n = 4000;
        let ds = gen_synthetic(&spec, n, 3).unwrap();
        for (j, &m) in [1.5, -2.0, 0.25].iter().enumerate() {
            let mean = (0..n).map(|i| ds.x.at(i, j)).sum::<f64>() / n as f64;
            assert!((mean - m).abs() <= 4.0 * 0.7 / (n as f64).sqrt());
        }
    }

    #[test]
    fn batches_partition_indices() {
        for (n, bs) in [(10, 3), (7, 7), (5, 9), (1000, 128)] {
            let batches = batch_iter(n, bs, 4, 2).unwrap();
            assert!(batches[..batches.len() - 1].iter().all(|b| b.len() == bs));
            let mut all: Vec<usize> = batches.concat();
            all.sort_unstable();
            assert_eq!(all, (0..n).collect::<Vec<_>>());
        }
        assert_eq!(batch_iter(50, 8, 1, 3).unwrap(), batch_iter(50, 8, 1, 3).unwrap());
        assert_ne!(batch_iter(1000, 1000, 1, 0).unwrap(), batch_iter(1000, 1000, 1, 1).unwrap());
    }

    #[test]
    fn split_is_ninety_ten() {
        let ds = gen_synthetic(&SyntheticSpec::pinwheel(3), 100, 0).unwrap();
        let (tr, va) = train_val_split(&ds, 5).unwrap();
        assert_eq!((tr.len(), va.len()), (90, 10));
        assert_eq!(train_val_split(&ds, 5).unwrap().1, va);
    }

    #[test]
    fn binarize_threshold() {
        let ds = Dataset::new(Tensor::from_rows(&[vec![0.2, 0.5, 0.51, 1.0]]).unwrap(), "t").unwrap();
        assert_eq!(ds.binarize(0.5).x.data(), &[0.0, 0.0, 1.0, 1.0]);
    }
}
