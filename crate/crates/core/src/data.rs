//! Labelled datasets: IDX ingestion, synthetic second modalities and splits.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// `N` items of one modality, each a row of `items` with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub items: Tensor,
    pub labels: Vec<usize>,
    pub class_names: Vec<String>,
    pub modality_id: String,
    /// `(rows, cols)` when items are flattened images.
    pub image_shape: Option<(usize, usize)>,
}

impl Dataset {
    pub fn new(
        modality_id: &str,
        items: Tensor,
        labels: Vec<usize>,
        class_names: Vec<String>,
        image_shape: Option<(usize, usize)>,
    ) -> Result<Self> {
        if items.rank() != 2 {
            return Err(Error::InvalidDims(format!("items must be [N, D], got {:?}", items.shape())));
        }
        if items.rows() != labels.len() {
            return Err(Error::CountMismatch {
                images: items.rows(),
                labels: labels.len(),
            });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= class_names.len()) {
            return Err(Error::InvalidArgument(format!(
                "label {bad} out of range for {} classes",
                class_names.len()
            )));
        }
        if let Some((r, c)) = image_shape {
            if r * c != items.cols() {
                return Err(Error::InvalidDims(format!("image {r}x{c} vs width {}", items.cols())));
            }
        }
        if let Some(v) = items.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidArgument(format!("item value {v} outside [0, 1]")));
        }
        Ok(Self {
            items,
            labels,
            class_names,
            modality_id: modality_id.to_string(),
            image_shape,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.items.cols()
    }

    pub fn class_count(&self) -> usize {
        self.class_names.len()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.class_count()];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    /// Indices of every item, grouped by class.
    pub fn indices_by_class(&self) -> Vec<Vec<usize>> {
        let mut by = vec![Vec::new(); self.class_count()];
        for (i, &l) in self.labels.iter().enumerate() {
            by[l].push(i);
        }
        by
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            items: self.items.select_rows(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            class_names: self.class_names.clone(),
            modality_id: self.modality_id.clone(),
            image_shape: self.image_shape,
        }
    }

    /// The first `n` items (all of them if `n` is larger).
    pub fn head(&self, n: usize) -> Dataset {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.subset(&idx)
    }

    pub fn with_modality(mut self, modality_id: &str) -> Dataset {
        self.modality_id = modality_id.to_string();
        self
    }
}

/// Class correspondence from a source modality to a target modality.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    pairs: BTreeMap<usize, usize>,
}

impl LabelMap {
    pub fn new(pairs: impl IntoIterator<Item = (usize, usize)>) -> Result<Self> {
        let mut map = BTreeMap::new();
        let mut seen = BTreeMap::new();
        for (s, t) in pairs {
            if map.insert(s, t).is_some() {
                return Err(Error::InvalidArgument(format!("source class {s} mapped twice")));
            }
            if let Some(prev) = seen.insert(t, s) {
                return Err(Error::InvalidArgument(format!(
                    "classes {prev} and {s} both map to {t}"
                )));
            }
        }
        Ok(Self { pairs: map })
    }

    pub fn identity(classes: usize) -> Self {
        Self {
            pairs: (0..classes).map(|c| (c, c)).collect(),
        }
    }

    pub fn get(&self, source: usize) -> Option<usize> {
        self.pairs.get(&source).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.pairs.iter().map(|(&s, &t)| (s, t))
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
    what: &'static str,
}

impl Cursor<'_> {
    fn u32(&mut self) -> Result<u32> {
        let b = self.buf.get(self.pos..self.pos + 4).ok_or(Error::Truncated(self.what))?;
        self.pos += 4;
        Ok(u32::from_be_bytes(b.try_into().unwrap()))
    }

    fn rest(&self, n: usize) -> Result<&[u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Truncated(self.what));
        }
        Ok(&self.buf[self.pos..self.pos + n])
    }
}

/// Raw images of an IDX3 file: `(count, rows, cols, pixels)`.
pub fn parse_idx_images(buf: &[u8]) -> Result<(usize, usize, usize, Vec<u8>)> {
    let mut c = Cursor { buf, pos: 0, what: "image file" };
    let magic = c.u32()?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::BadMagic { what: "image file", found: magic });
    }
    let (n, r, k) = (c.u32()? as usize, c.u32()? as usize, c.u32()? as usize);
    let pixels = c.rest(n * r * k)?.to_vec();
    Ok((n, r, k, pixels))
}

pub fn parse_idx_labels(buf: &[u8]) -> Result<Vec<u8>> {
    let mut c = Cursor { buf, pos: 0, what: "label file" };
    let magic = c.u32()?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::BadMagic { what: "label file", found: magic });
    }
    let n = c.u32()? as usize;
    Ok(c.rest(n)?.to_vec())
}

pub fn encode_idx_images(rows: usize, cols: usize, pixels: &[u8]) -> Vec<u8> {
    let n = pixels.len() / (rows * cols).max(1);
    let mut out = Vec::with_capacity(16 + pixels.len());
    for v in [IDX_IMAGES_MAGIC, n as u32, rows as u32, cols as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out.extend_from_slice(pixels);
    out
}

pub fn encode_idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

/// Builds a dataset from the contents of an image and a label file.
pub fn dataset_from_idx(images: &[u8], labels: &[u8], modality_id: &str) -> Result<Dataset> {
    let (n, r, c, pixels) = parse_idx_images(images)?;
    let labels = parse_idx_labels(labels)?;
    if labels.len() != n {
        return Err(Error::CountMismatch { images: n, labels: labels.len() });
    }
    let classes = labels.iter().copied().max().map_or(0, |m| m as usize + 1);
    let items = Tensor::matrix(n, r * c, pixels.iter().map(|&p| p as f64 / 255.0).collect())?;
    Dataset::new(
        modality_id,
        items,
        labels.iter().map(|&l| l as usize).collect(),
        (0..classes).map(|c| c.to_string()).collect(),
        Some((r, c)),
    )
}

/// Reads an IDX image/label file pair. Pixels are scaled to `v / 255`.
pub fn read_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let images = fs::read(images_path).map_err(Error::file(images_path))?;
    let labels = fs::read(labels_path).map_err(Error::file(labels_path))?;
    dataset_from_idx(&images, &labels, "mnist")
}

/// Inverse of [`read_idx`] for datasets whose values are multiples of 1/255.
pub fn write_idx(ds: &Dataset, images_path: &Path, labels_path: &Path) -> Result<()> {
    let (r, c) = ds
        .image_shape
        .ok_or_else(|| Error::InvalidArgument("dataset has no image shape".into()))?;
    let pixels: Vec<u8> = ds.items.data().iter().map(|v| (v * 255.0).round() as u8).collect();
    let labels = ds
        .labels
        .iter()
        .map(|&l| u8::try_from(l).map_err(|_| Error::InvalidArgument(format!("label {l} exceeds u8"))))
        .collect::<Result<Vec<u8>>>()?;
    fs::write(images_path, encode_idx_images(r, c, &pixels)).map_err(Error::file(images_path))?;
    fs::write(labels_path, encode_idx_labels(&labels)).map_err(Error::file(labels_path))?;
    Ok(())
}

/// Which half of an MNIST-style directory to read.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IdxPart {
    Train,
    Test,
}

/// Loads `train-*` or `t10k-*` files from an MNIST-layout directory.
pub fn load_mnist_dir(dir: &Path, part: IdxPart, modality_id: &str) -> Result<Dataset> {
    let prefix = match part {
        IdxPart::Train => "train",
        IdxPart::Test => "t10k",
    };
    let ds = read_idx(
        &dir.join(format!("{prefix}-images-idx3-ubyte")),
        &dir.join(format!("{prefix}-labels-idx1-ubyte")),
    )?;
    Ok(ds.with_modality(modality_id))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Transform {
    /// Quarter turn counter-clockwise.
    Rotate90,
    Invert,
    Rotate90Invert,
    /// Fixed pixel shuffle drawn from the given seed.
    PermutePixels(u64),
}

impl Transform {
    pub fn suffix(self) -> &'static str {
        match self {
            Transform::Rotate90 => "rot90",
            Transform::Invert => "invert",
            Transform::Rotate90Invert => "rotinv",
            Transform::PermutePixels(_) => "perm",
        }
    }
}

/// Seed of the fixed pixel shuffle behind `mnist-perm`.
pub const PERM_SEED: u64 = 0x5EED;

/// The transform deriving `id` from plain MNIST, if `id` names a derived
/// modality.
pub fn mnist_transform(id: &str) -> Option<Transform> {
    match id {
        "mnist-rot90" => Some(Transform::Rotate90),
        "mnist-invert" => Some(Transform::Invert),
        "mnist-rotinv" => Some(Transform::Rotate90Invert),
        "mnist-perm" => Some(Transform::PermutePixels(PERM_SEED)),
        _ => None,
    }
}

impl fmt::Display for Transform {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Transform::PermutePixels(s) => write!(f, "permute-pixels({s})"),
            Transform::Rotate90 => f.write_str("rotate90"),
            Transform::Invert => f.write_str("invert"),
            Transform::Rotate90Invert => f.write_str("rotate90+invert"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SyntheticSpec {
    pub transform: Transform,
    pub noise_sigma: f64,
}

impl SyntheticSpec {
    pub fn new(transform: Transform) -> Self {
        Self {
            transform,
            noise_sigma: 0.0,
        }
    }
}

/// A fixed permutation of `0..n` drawn from `seed`.
pub fn pixel_permutation(n: usize, seed: u64) -> Vec<usize> {
    let mut p: Vec<usize> = (0..n).collect();
    p.shuffle(&mut rng::stream(seed, "permute-pixels"));
    p
}

fn rotate90(img: &[f64], side: usize, out: &mut [f64]) {
    for r in 0..side {
        for c in 0..side {
            out[r * side + c] = img[c * side + (side - 1 - r)];
        }
    }
}

/// Derives a second modality from `base`, item by item. Labels are copied
/// unchanged; the modality id gains the transform's suffix.
pub fn gen_synthetic_modality(base: &Dataset, spec: SyntheticSpec, seed: u64) -> Result<Dataset> {
    if !(spec.noise_sigma >= 0.0 && spec.noise_sigma.is_finite()) {
        return Err(Error::InvalidArgument(format!("noise sigma {}", spec.noise_sigma)));
    }
    let d = base.dim();
    let side = (d as f64).sqrt().round() as usize;
    let rotates = matches!(spec.transform, Transform::Rotate90 | Transform::Rotate90Invert);
    if rotates && side * side != d {
        return Err(Error::NotSquare(d));
    }
    let perm = match spec.transform {
        Transform::PermutePixels(s) => Some(pixel_permutation(d, s)),
        _ => None,
    };
    let id = format!("{}-{}", base.modality_id, spec.transform.suffix());
    let mut noise_rng = rng::stream(seed, &format!("synthetic/{id}"));
    let noise = (spec.noise_sigma > 0.0).then(|| Normal::new(0.0, spec.noise_sigma).unwrap());

    let mut out = vec![0.0; base.len() * d];
    let mut tmp = vec![0.0; d];
    for i in 0..base.len() {
        let src = base.items.row(i);
        let dst = &mut out[i * d..(i + 1) * d];
        match spec.transform {
            Transform::Rotate90 => rotate90(src, side, dst),
            Transform::Invert => dst.iter_mut().zip(src).for_each(|(o, v)| *o = 1.0 - v),
            Transform::Rotate90Invert => {
                rotate90(src, side, &mut tmp);
                dst.iter_mut().zip(&tmp).for_each(|(o, v)| *o = 1.0 - v);
            }
            Transform::PermutePixels(_) => {
                let p = perm.as_ref().unwrap();
                dst.iter_mut().zip(p).for_each(|(o, &k)| *o = src[k]);
            }
        }
        if let Some(n) = &noise {
            for v in dst.iter_mut() {
                *v = (*v + n.sample(&mut noise_rng)).clamp(0.0, 1.0);
            }
        }
    }
    let image_shape = if perm.is_some() { base.image_shape } else { base.image_shape.map(|_| (side, side)) };
    Dataset::new(
        &id,
        Tensor::matrix(base.len(), d, out)?,
        base.labels.clone(),
        base.class_names.clone(),
        image_shape,
    )
}

/// Seeded shuffle then contiguous cut into train/validation/test.
///
/// The first two sizes are `round(ratio · N)`, the test split takes the rest.
pub fn split(ds: &Dataset, ratios: (f64, f64, f64), seed: u64) -> Result<(Dataset, Dataset, Dataset)> {
    let (a, b, c) = ratios;
    if [a, b, c].iter().any(|r| !(r.is_finite() && *r > 0.0)) || ((a + b + c) - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidRatios(format!("{a}/{b}/{c}")));
    }
    let n = ds.len();
    let n_train = (a * n as f64).round() as usize;
    let n_val = ((b * n as f64).round() as usize).min(n - n_train.min(n));
    let n_train = n_train.min(n);
    let n_test = n - n_train - n_val;
    for (size, name) in [(n_train, "train"), (n_val, "validation"), (n_test, "test")] {
        if size == 0 {
            return Err(Error::EmptySplit(name));
        }
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng::stream(seed, "split"));
    Ok((
        ds.subset(&idx[..n_train]),
        ds.subset(&idx[n_train..n_train + n_val]),
        ds.subset(&idx[n_train + n_val..]),
    ))
}
