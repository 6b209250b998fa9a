//! Image datasets: a procedural two-blob set, the 10-class 32x32 binary
//! batch format, and a raw little-endian tensor format.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, DgError, Result};
use crate::tensor::FeatureMap;

pub const CIFAR_RECORD: usize = 1 + 3 * 32 * 32;
pub const CIFAR_MEAN: [f32; 3] = [0.4914, 0.4822, 0.4465];
pub const CIFAR_STD: [f32; 3] = [0.2470, 0.2435, 0.2616];
pub const RAW_MAGIC: &[u8; 4] = b"DGRT";

/// An in-memory labelled image set, `(N, C, S, S)` row-major f32.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    images: Vec<f32>,
    labels: Vec<u32>,
    channels: usize,
    size: usize,
    classes: usize,
}

impl Dataset {
    pub fn new(images: Vec<f32>, labels: Vec<u32>, channels: usize, size: usize, classes: usize) -> Result<Self> {
        let per = channels * size * size;
        if per == 0 || images.len() != labels.len() * per {
            return Err(DgError::Data(format!(
                "{} image values for {} labels of shape ({channels}, {size}, {size})",
                images.len(),
                labels.len()
            )));
        }
        if let Some((i, &l)) = labels.iter().enumerate().find(|(_, &l)| l as usize >= classes) {
            return Err(DgError::Data(format!("record {i}: label {l} out of range for {classes} classes")));
        }
        Ok(Self {
            images,
            labels,
            channels,
            size,
            classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn images(&self) -> &[f32] {
        &self.images
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let per = self.channels * self.size * self.size;
        &self.images[i * per..(i + 1) * per]
    }

    /// Keeps the first `n` records.
    pub fn truncate(&mut self, n: usize) {
        if n < self.len() {
            self.labels.truncate(n);
            self.images.truncate(n * self.channels * self.size * self.size);
        }
    }

    /// `(x - mean[c]) / std[c]` per channel.
    pub fn normalize(&mut self, norm: &Normalization) -> Result<()> {
        if norm.mean.len() != self.channels || norm.std.len() != self.channels {
            return Err(DgError::Dimension(format!(
                "normalization for {} channels applied to {}",
                norm.mean.len(),
                self.channels
            )));
        }
        let plane = self.size * self.size;
        for (i, v) in self.images.iter_mut().enumerate() {
            let c = (i / plane) % self.channels;
            *v = (*v - norm.mean[c]) / norm.std[c];
        }
        Ok(())
    }

    /// Gathers `indices` into a batch, optionally with random crop and flip.
    pub fn batch(&self, indices: &[usize], augment: Option<&mut ChaCha8Rng>) -> Result<(FeatureMap<f32>, Vec<u32>)> {
        let (c, s) = (self.channels, self.size);
        let per = c * s * s;
        let mut data = Vec::with_capacity(indices.len() * per);
        let mut labels = Vec::with_capacity(indices.len());
        let mut augment = augment;
        for &i in indices {
            if i >= self.len() {
                return Err(DgError::Index { index: i, len: self.len() });
            }
            let img = self.image(i);
            match augment.as_deref_mut() {
                None => data.extend_from_slice(img),
                Some(rng) => {
                    let dy = rng.random_range(0..=8) as isize - 4;
                    let dx = rng.random_range(0..=8) as isize - 4;
                    let flip = rng.random_bool(0.5);
                    for ch in 0..c {
                        for y in 0..s {
                            for x in 0..s {
                                let sy = y as isize + dy;
                                let sx0 = if flip { s - 1 - x } else { x } as isize + dx;
                                let v = if sy < 0 || sx0 < 0 || sy >= s as isize || sx0 >= s as isize {
                                    0.0
                                } else {
                                    img[ch * s * s + sy as usize * s + sx0 as usize]
                                };
                                data.push(v);
                            }
                        }
                    }
                }
            }
            labels.push(self.labels[i]);
        }
        Ok((FeatureMap::from_vec(indices.len(), c, s, s, data)?, labels))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

impl Normalization {
    pub fn cifar() -> Self {
        Self {
            mean: CIFAR_MEAN.to_vec(),
            std: CIFAR_STD.to_vec(),
        }
    }
}

/// Where a dataset comes from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum DataSource {
    /// Procedural images; needs no files.
    Synthetic {
        #[serde(default = "default_synthetic_train")]
        train: usize,
        #[serde(default = "default_synthetic_test")]
        test: usize,
        #[serde(default = "default_size")]
        size: usize,
        #[serde(default = "default_classes")]
        classes: usize,
        #[serde(default)]
        seed: u64,
    },
    /// Directory holding `data_batch_{1..5}.bin` and `test_batch.bin`.
    Cifar10 { path: PathBuf },
    /// Two raw tensor files.
    Raw { train: PathBuf, test: PathBuf },
}

fn default_synthetic_train() -> usize {
    512
}
fn default_synthetic_test() -> usize {
    256
}
fn default_size() -> usize {
    32
}
fn default_classes() -> usize {
    10
}

impl DataSource {
    pub fn synthetic(train: usize, test: usize, size: usize, classes: usize, seed: u64) -> Self {
        DataSource::Synthetic {
            train,
            test,
            size,
            classes,
            seed,
        }
    }
}

/// Command-line form: `synthetic[:train[:test[:size[:seed]]]]`, `cifar10:<dir>`,
/// `raw:<train>,<test>`.
impl FromStr for DataSource {
    type Err = DgError;

    fn from_str(s: &str) -> Result<Self> {
        let (kind, rest) = s.split_once(':').unwrap_or((s, ""));
        match kind {
            "synthetic" => {
                let nums = rest
                    .split(':')
                    .filter(|p| !p.is_empty())
                    .map(|p| p.parse::<usize>().map_err(|_| config_err!("bad number {p:?} in data spec {s:?}")))
                    .collect::<Result<Vec<_>>>()?;
                if nums.len() > 4 {
                    return Err(config_err!("too many fields in data spec {s:?}"));
                }
                Ok(DataSource::synthetic(
                    nums.first().copied().unwrap_or(default_synthetic_train()),
                    nums.get(1).copied().unwrap_or(default_synthetic_test()),
                    nums.get(2).copied().unwrap_or(default_size()),
                    default_classes(),
                    nums.get(3).copied().unwrap_or(0) as u64,
                ))
            }
            "cifar10" if !rest.is_empty() => Ok(DataSource::Cifar10 { path: rest.into() }),
            "raw" => {
                let (train, test) = rest
                    .split_once(',')
                    .ok_or_else(|| config_err!("raw data spec needs <train>,<test>: {s:?}"))?;
                Ok(DataSource::Raw {
                    train: train.into(),
                    test: test.into(),
                })
            }
            _ => Err(config_err!("unknown data spec {s:?} (synthetic | cifar10:<dir> | raw:<train>,<test>)")),
        }
    }
}

impl fmt::Display for DataSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DataSource::Synthetic {
                train, test, size, seed, ..
            } => write!(f, "synthetic:{train}:{test}:{size}:{seed}"),
            DataSource::Cifar10 { path } => write!(f, "cifar10:{}", path.display()),
            DataSource::Raw { train, test } => write!(f, "raw:{},{}", train.display(), test.display()),
        }
    }
}

/// A source plus subsetting; `load` yields normalized train and test sets.
/// Keys the source does not know are rejected by the source itself.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    #[serde(flatten)]
    pub source: DataSource,
    #[serde(default)]
    pub train_subset: Option<usize>,
    #[serde(default)]
    pub test_subset: Option<usize>,
    #[serde(default = "yes")]
    pub augment: bool,
}

fn yes() -> bool {
    true
}

impl Default for DataConfig {
    fn default() -> Self {
        Self::from(DataSource::synthetic(512, 256, 32, 10, 0))
    }
}

impl From<DataSource> for DataConfig {
    fn from(source: DataSource) -> Self {
        Self {
            source,
            train_subset: None,
            test_subset: None,
            augment: true,
        }
    }
}

pub struct Splits {
    pub train: Dataset,
    pub test: Dataset,
}

impl DataConfig {
    pub fn load(&self) -> Result<Splits> {
        let (mut train, mut test) = match &self.source {
            DataSource::Synthetic {
                train,
                test,
                size,
                classes,
                seed,
            } => (
                two_blobs(*train, *size, *classes, *seed, 0)?,
                two_blobs(*test, *size, *classes, *seed, 1)?,
            ),
            DataSource::Cifar10 { path } => {
                let limit = self.train_subset.unwrap_or(usize::MAX);
                let mut parts = Vec::new();
                let mut have = 0;
                for i in 1..=5 {
                    if have >= limit {
                        break;
                    }
                    let part = read_cifar_file(&path.join(format!("data_batch_{i}.bin")))?;
                    have += part.len();
                    parts.push(part);
                }
                let mut train = concat(parts)?;
                let mut test = read_cifar_file(&path.join("test_batch.bin"))?;
                let norm = Normalization::cifar();
                train.normalize(&norm)?;
                test.normalize(&norm)?;
                (train, test)
            }
            DataSource::Raw { train, test } => (read_raw(train)?, read_raw(test)?),
        };
        if let Some(n) = self.train_subset {
            train.truncate(n);
        }
        if let Some(n) = self.test_subset {
            test.truncate(n);
        }
        if train.is_empty() || test.is_empty() {
            return Err(DgError::Data("empty dataset split".into()));
        }
        Ok(Splits { train, test })
    }
}

fn concat(parts: Vec<Dataset>) -> Result<Dataset> {
    let first = parts.first().ok_or_else(|| DgError::Data("no dataset files".into()))?;
    let (c, s, k) = (first.channels, first.size, first.classes);
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for p in parts {
        images.extend(p.images);
        labels.extend(p.labels);
    }
    Dataset::new(images, labels, c, s, k)
}

/// Procedural images: two Gaussian blobs whose placement and colour encode
/// the class, plus a distractor blob of random colour, over uniform noise.
/// Values are roughly zero-mean and unit-scale.
pub fn two_blobs(n: usize, size: usize, classes: usize, seed: u64, split: u64) -> Result<Dataset> {
    if size < 4 || classes == 0 {
        return Err(config_err!("synthetic images need size >= 4 and at least one class"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ split);
    let s = size as f32;
    let tau = std::f32::consts::TAU;
    let mut images = Vec::with_capacity(n * 3 * size * size);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let label = rng.random_range(0..classes as u32);
        let angle = tau * label as f32 / classes as f32;
        let r = 0.28 * s;
        let jitter = 0.1 * s;
        let mut centre = |radius: f32, a: f32| {
            (
                0.5 * s + radius * a.cos() + rng.random_range(-jitter..jitter),
                0.5 * s + radius * a.sin() + rng.random_range(-jitter..jitter),
            )
        };
        let c1 = centre(r, angle);
        let c2 = centre(0.5 * r, angle + std::f32::consts::PI * (0.5 + (label % 2) as f32 * 0.5));
        let c3 = (rng.random_range(0.0..s), rng.random_range(0.0..s));
        let sigma = rng.random_range(0.07..0.13) * s;
        let two_s2 = 2.0 * sigma * sigma;
        let hue = rng.random_range(0.0..tau);
        let colour = [angle.cos(), (angle + 2.1).cos(), (angle + 4.2).cos()];
        let distractor = [hue.cos(), (hue + 2.1).cos(), (hue + 4.2).cos()];
        for ch in 0..3 {
            for y in 0..size {
                for x in 0..size {
                    let (fx, fy) = (x as f32 + 0.5, y as f32 + 0.5);
                    let bump = |c: (f32, f32)| (-((fx - c.0).powi(2) + (fy - c.1).powi(2)) / two_s2).exp();
                    let v = colour[ch] * (1.5 * bump(c1) + (1.0 - ch as f32 * 0.5) * bump(c2))
                        + distractor[ch] * bump(c3)
                        + rng.random_range(-0.5..0.5);
                    images.push(v);
                }
            }
        }
        labels.push(label);
    }
    Dataset::new(images, labels, 3, size, classes)
}

/// Parses 10-class 32x32 binary batch records: one label byte then 3072
/// channel-planar pixel bytes. Pixels are scaled to [0, 1].
pub fn parse_cifar(bytes: &[u8]) -> Result<Dataset> {
    let whole = bytes.len() / CIFAR_RECORD * CIFAR_RECORD;
    if whole != bytes.len() {
        return Err(DgError::Parse {
            offset: whole as u64,
            msg: format!("truncated record: {} trailing bytes of {CIFAR_RECORD}", bytes.len() - whole),
        });
    }
    let n = bytes.len() / CIFAR_RECORD;
    let mut images = Vec::with_capacity(n * (CIFAR_RECORD - 1));
    let mut labels = Vec::with_capacity(n);
    for (i, rec) in bytes.chunks_exact(CIFAR_RECORD).enumerate() {
        if rec[0] > 9 {
            return Err(DgError::Data(format!(
                "record {i} at byte offset {}: label {} out of range for 10 classes",
                i * CIFAR_RECORD,
                rec[0]
            )));
        }
        labels.push(rec[0] as u32);
        images.extend(rec[1..].iter().map(|&b| b as f32 / 255.0));
    }
    Dataset::new(images, labels, 3, 32, 10)
}

pub fn read_cifar_file(path: &Path) -> Result<Dataset> {
    let bytes = fs::read(path).map_err(|e| DgError::Data(format!("{}: {e}", path.display())))?;
    parse_cifar(&bytes).map_err(|e| match e {
        DgError::Parse { offset, msg } => DgError::Parse {
            offset,
            msg: format!("{}: {msg}", path.display()),
        },
        DgError::Data(msg) => DgError::Data(format!("{}: {msg}", path.display())),
        other => other,
    })
}

/// Raw tensor file: `DGRT`, u32 rank (= 4), u32 dims `N C H W`, u32 class
/// count, then `N*C*H*W` f32 pixels and `N` f32 labels, all little-endian.
pub fn encode_raw(ds: &Dataset) -> Vec<u8> {
    let mut out = Vec::with_capacity(28 + 4 * (ds.images.len() + ds.labels.len()));
    out.extend_from_slice(RAW_MAGIC);
    for v in [4, ds.len(), ds.channels, ds.size, ds.size, ds.classes] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    for v in &ds.images {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for &l in &ds.labels {
        out.extend_from_slice(&(l as f32).to_le_bytes());
    }
    out
}

pub fn parse_raw(bytes: &[u8]) -> Result<Dataset> {
    let mut r = crate::io::Reader::new(bytes);
    let magic = r.bytes(4)?;
    if magic != RAW_MAGIC {
        return Err(DgError::Parse {
            offset: 0,
            msg: "bad magic, expected DGRT".into(),
        });
    }
    let rank_at = r.offset();
    let rank = r.u32()?;
    if rank != 4 {
        return Err(DgError::Parse {
            offset: rank_at,
            msg: format!("rank {rank}, expected 4"),
        });
    }
    let dims_at = r.offset();
    let (n, c, h, w) = (r.u32()? as usize, r.u32()? as usize, r.u32()? as usize, r.u32()? as usize);
    let classes = r.u32()? as usize;
    if h != w {
        return Err(DgError::Parse {
            offset: dims_at,
            msg: format!("non-square images {h}x{w}"),
        });
    }
    let count = n
        .checked_mul(c)
        .and_then(|v| v.checked_mul(h * w))
        .ok_or_else(|| DgError::Parse {
            offset: dims_at,
            msg: "dimension overflow".into(),
        })?;
    let images = r.f32s(count)?;
    let label_at = r.offset();
    let raw_labels = r.f32s(n)?;
    r.finish()?;
    let mut labels = Vec::with_capacity(n);
    for (i, &l) in raw_labels.iter().enumerate() {
        if !(l >= 0.0 && l.fract() == 0.0 && (l as usize) < classes) {
            return Err(DgError::Data(format!(
                "record {i} at byte offset {}: label {l} out of range for {classes} classes",
                label_at + 4 * i as u64
            )));
        }
        labels.push(l as u32);
    }
    Dataset::new(images, labels, c, h, classes)
}

pub fn read_raw(path: &Path) -> Result<Dataset> {
    let bytes = fs::read(path).map_err(|e| DgError::Data(format!("{}: {e}", path.display())))?;
    parse_raw(&bytes)
}

/// Deterministic permutation of `0..n` for one epoch.
pub fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (epoch as u64).wrapping_mul(0xd1b5_4a32_d192_ed03));
    order.shuffle(&mut rng);
    order
}
