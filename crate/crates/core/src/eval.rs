//! Reconstruction accuracy: recognizers trained on original data score
//! reconstructions and cross-modal generations.

use std::collections::BTreeMap;
use std::fmt;
use std::io;
use std::path::Path;

use rand::seq::SliceRandom;

use crate::associator::{generate_along, AssociationPath, PathMode};
use crate::autodiff::{Optimizer, Param, Parameterized, Tape};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::nets::{Activation, Mlp};
use crate::rng::{self, Rng};
use crate::tensor::Tensor;
use crate::training::{ModelRegistry, TrainConfig};
use crate::vae::{reparameterize, ModalityAutoEncoder, INFER_CHUNK};

/// MLP classifier for one modality; predictions are the argmax of its logits.
#[derive(Debug, Clone, PartialEq)]
pub struct RecognitionNet {
    modality_id: String,
    net: Mlp,
}

impl RecognitionNet {
    pub const DEFAULT_HIDDEN: usize = 256;

    pub fn new(modality_id: &str, input_dim: usize, hidden: &[usize], classes: usize, seed: u64) -> Result<Self> {
        crate::vae::validate_id(modality_id)?;
        let mut dims = vec![input_dim];
        dims.extend_from_slice(hidden);
        dims.push(classes);
        let net = Mlp::new(&format!("recog/{modality_id}"), &dims, Activation::Relu, Activation::Identity, seed)?;
        Ok(Self {
            modality_id: modality_id.to_string(),
            net,
        })
    }

    pub fn from_mlp(modality_id: &str, net: Mlp) -> Result<Self> {
        crate::vae::validate_id(modality_id)?;
        Ok(Self {
            modality_id: modality_id.to_string(),
            net,
        })
    }

    pub fn modality_id(&self) -> &str {
        &self.modality_id
    }

    pub fn input_dim(&self) -> usize {
        self.net.in_dim()
    }

    pub fn class_count(&self) -> usize {
        self.net.out_dim()
    }

    pub fn logits(&self, x: &Tensor) -> Result<Tensor> {
        let parts = (0..x.rows())
            .step_by(INFER_CHUNK)
            .map(|s| self.net.infer(&x.slice_rows(s, (s + INFER_CHUNK).min(x.rows()))))
            .collect::<Result<Vec<_>>>()?;
        if parts.is_empty() {
            return Ok(Tensor::zeros(&[0, self.class_count()]));
        }
        Tensor::vstack(&parts)
    }

    pub fn predict(&self, x: &Tensor) -> Result<Vec<usize>> {
        if x.rank() != 2 || x.cols() != self.input_dim() {
            return Err(Error::InvalidDims(format!(
                "recognizer `{}` expects [n, {}], got {:?}",
                self.modality_id,
                self.input_dim(),
                x.shape()
            )));
        }
        Ok(self.logits(x)?.argmax_rows())
    }
}

impl Parameterized for RecognitionNet {
    fn params(&self) -> Vec<&Param> {
        self.net.params()
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        self.net.params_mut()
    }
}

/// Exact count of correct predictions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Accuracy {
    pub correct: usize,
    pub n: usize,
}

impl Accuracy {
    pub fn value(&self) -> f64 {
        if self.n == 0 {
            0.0
        } else {
            self.correct as f64 / self.n as f64
        }
    }
}

/// Fraction of rows of `gen` that `recog` assigns to the matching label.
pub fn reconstruction_accuracy(gen: &Tensor, labels: &[usize], recog: &RecognitionNet) -> Result<Accuracy> {
    if gen.rank() != 2 || gen.rows() != labels.len() {
        return Err(Error::InvalidDims(format!(
            "{} labels for generated batch {:?}",
            labels.len(),
            gen.shape()
        )));
    }
    let pred = recog.predict(gen)?;
    Ok(Accuracy {
        correct: pred.iter().zip(labels).filter(|(p, l)| p == l).count(),
        n: labels.len(),
    })
}

/// Trains a recognizer with softmax cross-entropy and scores it on `held_out`.
pub fn train_recognizer(train: &Dataset, held_out: &Dataset, cfg: &TrainConfig) -> Result<(RecognitionNet, Accuracy)> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::EmptyDataset(train.modality_id.clone()));
    }
    let present = train.class_counts().iter().filter(|&&c| c > 0).count();
    if present < 2 {
        return Err(Error::SingleClass(train.modality_id.clone()));
    }
    let mut net = RecognitionNet::new(
        &train.modality_id,
        train.dim(),
        &[RecognitionNet::DEFAULT_HIDDEN],
        train.class_count(),
        cfg.seed,
    )?;
    let mut order = rng::stream(cfg.seed, &format!("recog/{}/order", train.modality_id));
    let mut opt = Optimizer::new(cfg.optimizer, cfg.lr);
    let mut idx: Vec<usize> = (0..train.len()).collect();
    for _ in 0..cfg.epochs {
        idx.shuffle(&mut order);
        for chunk in idx.chunks(cfg.batch_size) {
            let x = train.items.select_rows(chunk);
            let y: Vec<usize> = chunk.iter().map(|&i| train.labels[i]).collect();
            let tape = Tape::new();
            let xv = tape.constant(x);
            let loss = net.net.forward(&tape, xv)?.softmax_cross_entropy(&y)?;
            let grads = tape.backward(loss)?;
            opt.step(net.net.trainable_params_mut(), &grads)?;
        }
    }
    net.net.set_frozen(true);
    let acc = reconstruction_accuracy(&held_out.items, &held_out.labels, &net)?;
    Ok((net, acc))
}

/// Encodes and decodes `x` through one auto-encoder.
pub fn intra_reconstruct(ae: &ModalityAutoEncoder, x: &Tensor, rng: &mut Rng, mode: PathMode) -> Result<Tensor> {
    let q = ae.encode_values(x)?;
    let z = match mode {
        PathMode::Mean => q.mu,
        PathMode::Sampled => {
            let tape = Tape::new();
            (*reparameterize(&tape, q.bind(&tape), rng).value()).clone()
        }
    };
    ae.decode_mean_values(&z)
}

/// What a metrics row measures.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Direction {
    /// Reconstruction through one auto-encoder.
    Intra(String),
    /// Generation along a chain of modalities (two or more).
    Path(Vec<String>),
}

impl Direction {
    pub fn cross(src: &str, tgt: &str) -> Self {
        Direction::Path(vec![src.to_string(), tgt.to_string()])
    }

    pub fn source(&self) -> &str {
        match self {
            Direction::Intra(m) => m,
            Direction::Path(p) => &p[0],
        }
    }

    pub fn target(&self) -> &str {
        match self {
            Direction::Intra(m) => m,
            Direction::Path(p) => p.last().unwrap(),
        }
    }
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Direction::Intra(m) => write!(f, "intra:{m}"),
            Direction::Path(p) => f.write_str(&p.join("->")),
        }
    }
}

impl std::str::FromStr for Direction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if let Some(m) = s.strip_prefix("intra:") {
            return Ok(Direction::Intra(m.to_string()));
        }
        let hops: Vec<String> = s.split("->").map(str::to_string).collect();
        if hops.len() < 2 || hops.iter().any(String::is_empty) {
            return Err(Error::InvalidArgument(format!("bad direction `{s}`")));
        }
        Ok(Direction::Path(hops))
    }
}

/// One evaluated direction.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub scenario: String,
    pub direction: String,
    pub seed: u64,
    pub paired_fraction: f64,
    pub n: usize,
    pub accuracy: f64,
}

pub const CSV_HEADER: [&str; 6] = ["scenario", "direction", "seed", "paired_fraction", "n", "accuracy"];

/// The directions to score and the metadata stamped on their rows.
#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioSpec {
    pub id: String,
    pub directions: Vec<Direction>,
    pub paired_fraction: f64,
    pub path_mode: PathMode,
}

impl ScenarioSpec {
    /// Intra for both modalities and cross in both directions.
    pub fn pair(id: &str, a: &str, b: &str) -> Self {
        Self {
            id: id.to_string(),
            directions: vec![
                Direction::Intra(a.to_string()),
                Direction::Intra(b.to_string()),
                Direction::cross(a, b),
                Direction::cross(b, a),
            ],
            paired_fraction: 1.0,
            path_mode: PathMode::Mean,
        }
    }
}

/// Scores every direction of `spec` once per seed. Inputs come from
/// `test_sets[direction.source()]`; labels are the source labels.
pub fn evaluate_scenario(
    registry: &ModelRegistry,
    spec: &ScenarioSpec,
    test_sets: &BTreeMap<String, Dataset>,
    seeds: &[u64],
) -> Result<Vec<MetricsRow>> {
    let mut rows = Vec::new();
    for &seed in seeds {
        for dir in &spec.directions {
            let ds = test_sets
                .get(dir.source())
                .ok_or_else(|| Error::MissingComponent(format!("test data for `{}`", dir.source())))?;
            let recog = registry.recognizer(dir.target())?;
            let mut r = rng::stream(seed, &format!("eval/{}/{dir}", spec.id));
            let gen = match dir {
                Direction::Intra(m) => intra_reconstruct(registry.autoencoder(m)?, &ds.items, &mut r, spec.path_mode)?,
                Direction::Path(ids) => {
                    let ids: Vec<&str> = ids.iter().map(String::as_str).collect();
                    let path = AssociationPath::through(registry, &ids)?;
                    generate_along(
                        &path,
                        registry.autoencoder(path.source_id())?,
                        registry.autoencoder(path.target_id())?,
                        &ds.items,
                        &mut r,
                        spec.path_mode,
                    )?
                }
            };
            let acc = reconstruction_accuracy(&gen, &ds.labels, recog)?;
            rows.push(MetricsRow {
                scenario: spec.id.clone(),
                direction: dir.to_string(),
                seed,
                paired_fraction: spec.paired_fraction,
                n: acc.n,
                accuracy: acc.value(),
            });
        }
    }
    Ok(rows)
}

pub fn write_metrics<W: io::Write>(w: W, rows: &[MetricsRow]) -> Result<()> {
    let mut out = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(w);
    out.write_record(CSV_HEADER)?;
    for r in rows {
        out.write_record([
            r.scenario.clone(),
            r.direction.clone(),
            r.seed.to_string(),
            format!("{:?}", r.paired_fraction),
            r.n.to_string(),
            format!("{:?}", r.accuracy),
        ])?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_metrics<R: io::Read>(r: R) -> Result<Vec<MetricsRow>> {
    let mut rdr = csv::Reader::from_reader(r);
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    if header != CSV_HEADER {
        return Err(Error::InvalidArgument(format!("unexpected CSV header {header:?}")));
    }
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let field = |i: usize| rec.get(i).unwrap_or_default();
        let num = |i: usize| -> Result<f64> {
            field(i)
                .parse()
                .map_err(|_| Error::InvalidArgument(format!("bad number `{}`", field(i))))
        };
        rows.push(MetricsRow {
            scenario: field(0).to_string(),
            direction: field(1).to_string(),
            seed: field(2)
                .parse()
                .map_err(|_| Error::InvalidArgument(format!("bad seed `{}`", field(2))))?,
            paired_fraction: num(3)?,
            n: field(4)
                .parse()
                .map_err(|_| Error::InvalidArgument(format!("bad count `{}`", field(4))))?,
            accuracy: num(5)?,
        });
    }
    Ok(rows)
}

pub fn write_metrics_file(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    let f = std::fs::File::create(path).map_err(Error::file(path))?;
    write_metrics(f, rows)
}

pub fn read_metrics_file(path: &Path) -> Result<Vec<MetricsRow>> {
    read_metrics(std::fs::File::open(path).map_err(Error::file(path))?)
}

/// Mean accuracy per direction, in first-seen order.
pub fn summarize(rows: &[MetricsRow]) -> Vec<(String, f64)> {
    let mut order: Vec<String> = Vec::new();
    let mut acc: BTreeMap<String, (f64, usize)> = BTreeMap::new();
    for r in rows {
        let e = acc.entry(r.direction.clone()).or_insert_with(|| {
            order.push(r.direction.clone());
            (0.0, 0)
        });
        e.0 += r.accuracy;
        e.1 += 1;
    }
    order
        .into_iter()
        .map(|d| {
            let (s, n) = acc[&d];
            (d, s / n as f64)
        })
        .collect()
}
