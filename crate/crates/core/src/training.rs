//! Two-phase training: auto-encoders first, then associators against frozen
//! auto-encoders, plus class-correlated pairing and the model registry.

use std::collections::{BTreeMap, VecDeque};
use std::fmt::Write as _;
use std::path::Path;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::Rng as _;
use sha2::{Digest, Sha256};

use crate::associator::{cross_loss_from_posterior, require_frozen, Associator, CrossOptions, SourceLatent};
use crate::autodiff::{OptimizerKind, Optimizer, Param, Parameterized, Tape};
use crate::checkpoint;
use crate::data::{Dataset, LabelMap};
use crate::error::{Error, Result};
use crate::eval::RecognitionNet;
use crate::nets::{Activation, DenseLayer, GaussianHead, GaussianMlp, Mlp};
use crate::rng;
use crate::tensor::Tensor;
use crate::vae::{intra_loss, LossWeights, ModalityAutoEncoder, ReconMode};

/// Default weight of both KL terms.
pub const DEFAULT_LAMBDA: f64 = 5e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lambda_int: f64,
    pub lambda_crs: f64,
    pub seed: u64,
    pub recon_mode: ReconMode,
    pub optimizer: OptimizerKind,
    pub paired_fraction: f64,
    /// Associator input during the cross phase.
    pub assoc_input: SourceLatent,
    /// Source-latent draws averaged per cross step.
    pub mc_samples: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 64,
            lr: 1e-3,
            lambda_int: DEFAULT_LAMBDA,
            lambda_crs: DEFAULT_LAMBDA,
            seed: 0,
            recon_mode: ReconMode::Mean,
            optimizer: OptimizerKind::Adam,
            paired_fraction: 1.0,
            assoc_input: SourceLatent::Sampled,
            mc_samples: 1,
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("`{key}`: cannot parse `{v}`")))
}

impl TrainConfig {
    pub const KEYS: [&'static str; 11] = [
        "epochs",
        "batch_size",
        "lr",
        "lambda_int",
        "lambda_crs",
        "seed",
        "recon_mode",
        "optimizer",
        "paired_fraction",
        "assoc_input",
        "mc_samples",
    ];

    /// Sets one key from its textual value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key.trim() {
            "epochs" => self.epochs = parse_num(key, v)?,
            "batch_size" => self.batch_size = parse_num(key, v)?,
            "lr" => self.lr = parse_num(key, v)?,
            "lambda_int" => self.lambda_int = parse_num(key, v)?,
            "lambda_crs" => self.lambda_crs = parse_num(key, v)?,
            "seed" => self.seed = parse_num(key, v)?,
            "recon_mode" => self.recon_mode = v.parse()?,
            "optimizer" => self.optimizer = v.parse()?,
            "paired_fraction" => self.paired_fraction = parse_num(key, v)?,
            "assoc_input" => self.assoc_input = v.parse()?,
            "mc_samples" => self.mc_samples = parse_num(key, v)?,
            other => return Err(Error::Config(format!("unknown key `{other}`"))),
        }
        Ok(())
    }

    /// Parses `key = value` lines over the defaults. Blank lines and lines
    /// starting with `#` are ignored.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path).map_err(Error::file(path))?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if !(self.paired_fraction > 0.0 && self.paired_fraction <= 1.0) {
            return Err(Error::Config(format!(
                "paired_fraction must be in (0, 1], got {}",
                self.paired_fraction
            )));
        }
        if self.mc_samples == 0 {
            return Err(Error::Config("mc_samples must be positive".into()));
        }
        LossWeights::new(self.lambda_int, self.lambda_crs)?;
        Ok(())
    }

    pub fn weights(&self) -> Result<LossWeights> {
        LossWeights::new(self.lambda_int, self.lambda_crs)
    }

    /// The config as `key = value` lines, in [`TrainConfig::KEYS`] order.
    /// [`TrainConfig::parse`] reads it back unchanged.
    pub fn echo(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.entries() {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let vals = [
            self.epochs.to_string(),
            self.batch_size.to_string(),
            format!("{:?}", self.lr),
            format!("{:?}", self.lambda_int),
            format!("{:?}", self.lambda_crs),
            self.seed.to_string(),
            self.recon_mode.to_string(),
            self.optimizer.to_string(),
            format!("{:?}", self.paired_fraction),
            self.assoc_input.to_string(),
            self.mc_samples.to_string(),
        ];
        Self::KEYS.into_iter().zip(vals).collect()
    }

    fn optimizer(&self) -> Optimizer {
        Optimizer::new(self.optimizer, self.lr)
    }
}

/// Mean loss terms over one epoch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochLoss {
    pub total: f64,
    pub recon: f64,
    pub kl: f64,
}

#[derive(Debug, Clone)]
pub struct PhaseReport {
    pub curves: Vec<EpochLoss>,
    pub wall_time: Duration,
    /// SHA-256 of the trained component's checkpoint bytes.
    pub checksum: String,
    pub config: TrainConfig,
}

impl PhaseReport {
    /// `epoch,total,recon,kl` rows with a header.
    pub fn curves_csv(&self) -> String {
        let mut s = String::from("epoch,total,recon,kl\n");
        for (i, e) in self.curves.iter().enumerate() {
            let _ = writeln!(s, "{},{:?},{:?},{:?}", i + 1, e.total, e.recon, e.kl);
        }
        s
    }
}

/// SHA-256 over the `CMAS` encoding of `params`, hex encoded.
pub fn params_checksum(params: &[&Param]) -> String {
    let bytes = checkpoint::encode(params.iter().map(|p| (p.name(), p.value())));
    hex(&Sha256::digest(bytes))
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Default)]
struct Accum {
    total: f64,
    recon: f64,
    kl: f64,
    n: usize,
}

impl Accum {
    fn add(&mut self, (t, r, k): (f64, f64, f64), rows: usize) {
        self.total += t * rows as f64;
        self.recon += r * rows as f64;
        self.kl += k * rows as f64;
        self.n += rows;
    }

    fn finish(&self) -> EpochLoss {
        let n = self.n.max(1) as f64;
        EpochLoss {
            total: self.total / n,
            recon: self.recon / n,
            kl: self.kl / n,
        }
    }
}

/// Phase one: fits one auto-encoder to its own unpaired data.
///
/// The auto-encoder is left unfrozen; callers freeze it before phase two.
pub fn train_intra(ae: &mut ModalityAutoEncoder, ds: &Dataset, cfg: &TrainConfig) -> Result<PhaseReport> {
    cfg.validate()?;
    if ds.is_empty() {
        return Err(Error::EmptyDataset(ds.modality_id.clone()));
    }
    if ds.modality_id != ae.modality_id() {
        return Err(Error::ModalityMismatch {
            expected: ae.modality_id().to_string(),
            found: ds.modality_id.clone(),
        });
    }
    if ds.dim() != ae.input_dim() {
        return Err(Error::InvalidDims(format!(
            "`{}` expects width {}, dataset has {}",
            ae.modality_id(),
            ae.input_dim(),
            ds.dim()
        )));
    }
    if ae.is_frozen() {
        return Err(Error::PhaseViolation(format!(
            "auto-encoder `{}` is frozen",
            ae.modality_id()
        )));
    }
    let start = Instant::now();
    let weights = cfg.weights()?;
    let id = ae.modality_id().to_string();
    let mut order_rng = rng::stream(cfg.seed, &format!("intra/{id}/order"));
    let mut noise_rng = rng::stream(cfg.seed, &format!("intra/{id}/noise"));
    let mut opt = cfg.optimizer();
    let mut idx: Vec<usize> = (0..ds.len()).collect();
    let mut curves = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        idx.shuffle(&mut order_rng);
        let mut acc = Accum::default();
        for chunk in idx.chunks(cfg.batch_size) {
            let x = ds.items.select_rows(chunk);
            let tape = Tape::new();
            let terms = intra_loss(&tape, ae, &x, weights, cfg.recon_mode, &mut noise_rng)?;
            acc.add(terms.values(), chunk.len());
            let grads = tape.backward(terms.total)?;
            opt.step(ae.trainable_params_mut(), &grads)?;
        }
        curves.push(acc.finish());
    }
    Ok(PhaseReport {
        curves,
        wall_time: start.elapsed(),
        checksum: params_checksum(&ae.params()),
        config: cfg.clone(),
    })
}

/// Class-correlated pairing between two labelled datasets.
///
/// For each mapped class a fixed, seeded subset of `⌊fraction · N_c⌋` source
/// items takes part. Each of them is paired with a uniformly drawn target
/// item of the mapped class; with `epoch_resample` the partner is redrawn for
/// every pass.
#[derive(Debug, Clone)]
pub struct PairingSampler<'a> {
    pub source: &'a Dataset,
    pub target: &'a Dataset,
    pub label_map: LabelMap,
    pub fraction: f64,
    pub seed: u64,
    pub epoch_resample: bool,
    /// Retained source indices with their target class.
    retained: Vec<(usize, usize)>,
    target_by_class: Vec<Vec<usize>>,
}

impl<'a> PairingSampler<'a> {
    pub fn new(
        source: &'a Dataset,
        target: &'a Dataset,
        label_map: LabelMap,
        fraction: f64,
        seed: u64,
    ) -> Result<Self> {
        if !(fraction > 0.0 && fraction <= 1.0) {
            return Err(Error::Config(format!("paired fraction must be in (0, 1], got {fraction}")));
        }
        let src_by_class = source.indices_by_class();
        let target_by_class = target.indices_by_class();
        let mut r = rng::stream(seed, "pairs/retain");
        let mut retained = Vec::new();
        for (sc, tc) in label_map.iter() {
            let pool = src_by_class.get(sc).filter(|v| !v.is_empty()).ok_or_else(|| {
                Error::MissingClass(sc, source.modality_id.clone())
            })?;
            if target_by_class.get(tc).is_none_or(|v| v.is_empty()) {
                return Err(Error::MissingClass(tc, target.modality_id.clone()));
            }
            let keep = (fraction * pool.len() as f64 + 1e-9).floor() as usize;
            let mut pool = pool.clone();
            pool.shuffle(&mut r);
            pool.truncate(keep);
            pool.sort_unstable();
            retained.extend(pool.into_iter().map(|i| (i, tc)));
        }
        Ok(Self {
            source,
            target,
            label_map,
            fraction,
            seed,
            epoch_resample: true,
            retained,
            target_by_class,
        })
    }

    pub fn with_epoch_resample(mut self, on: bool) -> Self {
        self.epoch_resample = on;
        self
    }

    /// Source indices taking part in pairing, ascending within each class.
    pub fn retained_sources(&self) -> Vec<usize> {
        self.retained.iter().map(|&(i, _)| i).collect()
    }

    pub fn len(&self) -> usize {
        self.retained.len()
    }

    pub fn is_empty(&self) -> bool {
        self.retained.is_empty()
    }

    /// One `(source, target)` pair per retained source item.
    pub fn pairs(&self, pass: u64) -> Vec<(usize, usize)> {
        let pass = if self.epoch_resample { pass } else { 0 };
        let mut r = rng::stream(self.seed, &format!("pairs/pass{pass}"));
        self.retained
            .iter()
            .map(|&(i, tc)| {
                let pool = &self.target_by_class[tc];
                (i, pool[r.random_range(0..pool.len())])
            })
            .collect()
    }
}

/// Seeded class-correlated pairs, `Σ_c ⌊fraction · N_c⌋` of them.
pub fn make_pairs(
    source: &Dataset,
    target: &Dataset,
    label_map: &LabelMap,
    fraction: f64,
    seed: u64,
) -> Result<Vec<(usize, usize)>> {
    Ok(PairingSampler::new(source, target, label_map.clone(), fraction, seed)?.pairs(0))
}

/// Phase two: fits `assoc` with both auto-encoders frozen.
///
/// Each epoch runs `⌈N_source / batch⌉` steps regardless of the paired
/// fraction, cycling through reshuffled passes over the retained pairs.
pub fn train_cross(
    assoc: &mut Associator,
    ae_src: &ModalityAutoEncoder,
    ae_tgt: &ModalityAutoEncoder,
    sampler: &PairingSampler<'_>,
    cfg: &TrainConfig,
) -> Result<PhaseReport> {
    cfg.validate()?;
    require_frozen(ae_src)?;
    require_frozen(ae_tgt)?;
    for (want, ds) in [(ae_src.modality_id(), sampler.source), (ae_tgt.modality_id(), sampler.target)] {
        if ds.modality_id != want {
            return Err(Error::ModalityMismatch {
                expected: want.to_string(),
                found: ds.modality_id.clone(),
            });
        }
    }
    for (want, got) in [(assoc.source_id(), ae_src.modality_id()), (assoc.target_id(), ae_tgt.modality_id())] {
        if want != got {
            return Err(Error::ModalityMismatch {
                expected: want.to_string(),
                found: got.to_string(),
            });
        }
    }
    if sampler.is_empty() {
        return Err(Error::EmptyDataset(format!(
            "no pairs at fraction {} between `{}` and `{}`",
            sampler.fraction,
            ae_src.modality_id(),
            ae_tgt.modality_id()
        )));
    }
    if assoc.is_frozen() {
        return Err(Error::PhaseViolation("associator is frozen".into()));
    }
    let start = Instant::now();
    let weights = cfg.weights()?;
    let opts = CrossOptions {
        recon_mode: cfg.recon_mode,
        source_latent: cfg.assoc_input,
        samples: cfg.mc_samples,
    };
    let label = format!("cross/{}->{}", assoc.source_id(), assoc.target_id());
    let mut order_rng = rng::stream(cfg.seed, &format!("{label}/order"));
    let mut noise_rng = rng::stream(cfg.seed, &format!("{label}/noise"));

    // The source encoder is frozen, so its posterior is computed once.
    let retained = sampler.retained_sources();
    let posterior = ae_src.encode_values(&sampler.source.items.select_rows(&retained))?;
    let row_of: BTreeMap<usize, usize> = retained.iter().enumerate().map(|(r, &i)| (i, r)).collect();

    let steps = sampler.source.len().div_ceil(cfg.batch_size);
    let mut opt = cfg.optimizer();
    let mut pass = 0u64;
    let mut queue: VecDeque<(usize, usize)> = VecDeque::new();
    let mut curves = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        let mut acc = Accum::default();
        for _ in 0..steps {
            while queue.len() < cfg.batch_size {
                let mut fresh = sampler.pairs(pass);
                pass += 1;
                fresh.shuffle(&mut order_rng);
                queue.extend(fresh);
            }
            let (rows, tgt_idx): (Vec<usize>, Vec<usize>) =
                queue.drain(..cfg.batch_size).map(|(i, j)| (row_of[&i], j)).unzip();
            let x_j = sampler.target.items.select_rows(&tgt_idx);
            let tape = Tape::new();
            let q = posterior.rows(&rows).bind(&tape);
            let terms = cross_loss_from_posterior(&tape, assoc, ae_tgt, q, &x_j, weights, opts, &mut noise_rng)?;
            acc.add(terms.values(), rows.len());
            let grads = tape.backward(terms.total)?;
            opt.step(assoc.trainable_params_mut(), &grads)?;
        }
        curves.push(acc.finish());
    }
    Ok(PhaseReport {
        curves,
        wall_time: start.elapsed(),
        checksum: params_checksum(&assoc.params()),
        config: cfg.clone(),
    })
}

/// Every trained component of a run, addressed by modality ids.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ModelRegistry {
    autoencoders: BTreeMap<String, ModalityAutoEncoder>,
    associators: BTreeMap<(String, String), Associator>,
    recognizers: BTreeMap<String, RecognitionNet>,
}

impl ModelRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert_autoencoder(&mut self, ae: ModalityAutoEncoder) {
        self.autoencoders.insert(ae.modality_id().to_string(), ae);
    }

    pub fn insert_associator(&mut self, a: Associator) {
        self.associators
            .insert((a.source_id().to_string(), a.target_id().to_string()), a);
    }

    pub fn insert_recognizer(&mut self, r: RecognitionNet) {
        self.recognizers.insert(r.modality_id().to_string(), r);
    }

    /// Moves every component of `other` into `self`, replacing duplicates.
    pub fn merge(&mut self, other: ModelRegistry) {
        self.autoencoders.extend(other.autoencoders);
        self.associators.extend(other.associators);
        self.recognizers.extend(other.recognizers);
    }

    pub fn autoencoder(&self, id: &str) -> Result<&ModalityAutoEncoder> {
        self.autoencoders
            .get(id)
            .ok_or_else(|| Error::MissingComponent(format!("ae/{id}")))
    }

    pub fn autoencoder_mut(&mut self, id: &str) -> Result<&mut ModalityAutoEncoder> {
        self.autoencoders
            .get_mut(id)
            .ok_or_else(|| Error::MissingComponent(format!("ae/{id}")))
    }

    pub fn associator(&self, src: &str, tgt: &str) -> Result<&Associator> {
        self.associators
            .get(&(src.to_string(), tgt.to_string()))
            .ok_or_else(|| Error::MissingComponent(Associator::prefix_for(src, tgt)))
    }

    pub fn associator_mut(&mut self, src: &str, tgt: &str) -> Result<&mut Associator> {
        self.associators
            .get_mut(&(src.to_string(), tgt.to_string()))
            .ok_or_else(|| Error::MissingComponent(Associator::prefix_for(src, tgt)))
    }

    pub fn recognizer(&self, id: &str) -> Result<&RecognitionNet> {
        self.recognizers
            .get(id)
            .ok_or_else(|| Error::MissingComponent(format!("recog/{id}")))
    }

    pub fn autoencoders(&self) -> impl Iterator<Item = &ModalityAutoEncoder> {
        self.autoencoders.values()
    }

    pub fn associators(&self) -> impl Iterator<Item = &Associator> {
        self.associators.values()
    }

    pub fn recognizers(&self) -> impl Iterator<Item = &RecognitionNet> {
        self.recognizers.values()
    }

    /// Freezes or unfreezes every auto-encoder.
    pub fn set_autoencoders_frozen(&mut self, frozen: bool) {
        for ae in self.autoencoders.values_mut() {
            ae.set_frozen(frozen);
        }
    }

    /// `ae/<id>`, `assoc/<src>-><tgt>` and `recog/<id>` for every component.
    pub fn component_prefixes(&self) -> Vec<String> {
        let mut out: Vec<String> = self.autoencoders.keys().map(|id| format!("ae/{id}")).collect();
        out.extend(self.associators.keys().map(|(s, t)| Associator::prefix_for(s, t)));
        out.extend(self.recognizers.keys().map(|id| format!("recog/{id}")));
        out
    }

    fn all_params(&self) -> Vec<&Param> {
        let mut p: Vec<&Param> = self.autoencoders.values().flat_map(|a| a.params()).collect();
        p.extend(self.associators.values().flat_map(|a| a.params()));
        p.extend(self.recognizers.values().flat_map(|r| r.params()));
        p
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        checkpoint::encode(self.all_params().into_iter().map(|p| (p.name(), p.value())))
    }

    pub fn checksum(&self) -> String {
        hex(&Sha256::digest(self.to_bytes()))
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        Self::from_records(checkpoint::decode(bytes)?)
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(Error::file(path))
    }

    /// Loads a registry. Architecture is rebuilt from record names and
    /// shapes; every component comes back unfrozen.
    pub fn load_checkpoint(path: &Path) -> Result<Self> {
        Self::from_records(checkpoint::read_file(path)?)
    }

    fn from_records(records: Vec<(String, Tensor)>) -> Result<Self> {
        let mut groups: BTreeMap<String, BTreeMap<String, Tensor>> = BTreeMap::new();
        for (name, t) in records {
            let (prefix, rest) = split_component(&name)?;
            groups.entry(prefix).or_default().insert(rest, t);
        }
        let mut reg = ModelRegistry::new();
        for (prefix, mut recs) in groups {
            if let Some(id) = prefix.strip_prefix("ae/") {
                let enc = load_gaussian_mlp(&format!("{prefix}/enc"), &mut recs, "enc/")?;
                let dec = load_gaussian_mlp(&format!("{prefix}/dec"), &mut recs, "dec/")?;
                reg.insert_autoencoder(ModalityAutoEncoder::from_parts(id, enc, dec)?);
            } else if let Some(pair) = prefix.strip_prefix("assoc/") {
                let (s, t) = pair
                    .split_once("->")
                    .ok_or_else(|| Error::MalformedCheckpoint(format!("bad associator prefix `{prefix}`")))?;
                let net = load_gaussian_mlp(&prefix, &mut recs, "")?;
                reg.insert_associator(Associator::from_net(s, t, net)?);
            } else if let Some(id) = prefix.strip_prefix("recog/") {
                let mlp = load_mlp(&prefix, &mut recs, "")?;
                reg.insert_recognizer(RecognitionNet::from_mlp(id, mlp)?);
            }
            if let Some(extra) = recs.keys().next() {
                return Err(Error::MalformedCheckpoint(format!("unexpected record `{prefix}/{extra}`")));
            }
        }
        Ok(reg)
    }
}

fn split_component(name: &str) -> Result<(String, String)> {
    let mut parts = name.splitn(3, '/');
    let (kind, id, rest) = (parts.next(), parts.next(), parts.next());
    match (kind, id, rest) {
        (Some(k @ ("ae" | "assoc" | "recog")), Some(id), Some(rest)) if !id.is_empty() => {
            Ok((format!("{k}/{id}"), rest.to_string()))
        }
        _ => Err(Error::MalformedCheckpoint(format!("unrecognized record `{name}`"))),
    }
}

fn take_layer(
    name: &str,
    recs: &mut BTreeMap<String, Tensor>,
    key: &str,
    act: Activation,
) -> Result<Option<DenseLayer>> {
    let (wk, bk) = (format!("{key}/weight"), format!("{key}/bias"));
    match (recs.remove(&wk), recs.remove(&bk)) {
        (Some(w), Some(b)) => Ok(Some(DenseLayer::from_params(
            Param::new(format!("{name}/weight"), w),
            Param::new(format!("{name}/bias"), b),
            act,
        )?)),
        (None, None) => Ok(None),
        _ => Err(Error::MalformedCheckpoint(format!("layer `{name}` is incomplete"))),
    }
}

/// Numbered layers `<key>0`, `<key>1`, … under `prefix`.
fn take_layers(
    prefix: &str,
    recs: &mut BTreeMap<String, Tensor>,
    key: &str,
    hidden: Activation,
    last: Activation,
) -> Result<Vec<DenseLayer>> {
    let mut layers = Vec::new();
    while let Some(l) = take_layer(&format!("{prefix}/{}", layers.len()), recs, &format!("{key}{}", layers.len()), hidden)? {
        layers.push(l);
    }
    if let Some(l) = layers.last_mut() {
        l.activation = last;
    }
    if layers.is_empty() {
        return Err(Error::MalformedCheckpoint(format!("`{prefix}` has no layers")));
    }
    Ok(layers)
}

fn load_gaussian_mlp(prefix: &str, recs: &mut BTreeMap<String, Tensor>, key: &str) -> Result<GaussianMlp> {
    let trunk = Mlp::from_layers(take_layers(prefix, recs, key, Activation::Relu, Activation::Relu)?)?;
    let mut head_layer = |h: &str| -> Result<DenseLayer> {
        take_layer(&format!("{prefix}/{h}"), recs, &format!("{key}{h}"), Activation::Identity)?
            .ok_or_else(|| Error::MalformedCheckpoint(format!("`{prefix}` lacks its {h} head")))
    };
    let head = GaussianHead {
        mu: head_layer("mu")?,
        logvar: head_layer("logvar")?,
    };
    GaussianMlp::from_parts(trunk, head)
}

fn load_mlp(prefix: &str, recs: &mut BTreeMap<String, Tensor>, key: &str) -> Result<Mlp> {
    Mlp::from_layers(take_layers(prefix, recs, key, Activation::Relu, Activation::Identity)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Parameterized;

    fn toy_ds(id: &str, per_class: usize, classes: usize, dim: usize) -> Dataset {
        let n = per_class * classes;
        let labels: Vec<usize> = (0..n).map(|i| i % classes).collect();
        let items = Tensor::matrix(
            n,
            dim,
            (0..n * dim)
                .map(|k| {
                    let (i, f) = (k / dim, k % dim);
                    if f % classes == labels[i] { 0.9 } else { 0.1 * ((k * 7) % 5) as f64 / 5.0 }
                })
                .collect(),
        )
        .unwrap();
        Dataset::new(id, items, labels, (0..classes).map(|c| c.to_string()).collect(), None).unwrap()
    }

    fn quick(epochs: usize) -> TrainConfig {
        TrainConfig {
            epochs,
            batch_size: 8,
            lr: 1e-2,
            seed: 4,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn config_round_trips_through_echo() {
        let mut cfg = TrainConfig::default();
        cfg.set("lr", "0.0025").unwrap();
        cfg.set("recon_mode", "sample").unwrap();
        cfg.set("paired_fraction", "0.05").unwrap();
        cfg.set("assoc_input", "mean").unwrap();
        let back = TrainConfig::parse(&cfg.echo()).unwrap();
        assert_eq!(back, cfg);
        assert!(cfg.echo().contains("paired_fraction = 0.05\n"));
    }

    #[test]
    fn config_rejects_unknown_keys_and_bad_values() {
        assert!(TrainConfig::parse("epoch = 3").is_err());
        assert!(TrainConfig::parse("lr = -1").is_err());
        assert!(TrainConfig::parse("paired_fraction = 0").is_err());
        assert!(TrainConfig::parse("batch_size = 0").is_err());
        assert!(TrainConfig::parse("just words").is_err());
        let cfg = TrainConfig::parse("# note\n\nepochs = 2\n").unwrap();
        assert_eq!(cfg.epochs, 2);
    }

    #[test]
    fn zero_epochs_leave_parameters() {
        let ds = toy_ds("a", 4, 2, 6);
        let mut ae = ModalityAutoEncoder::new("a", 6, 2, &[4], 0).unwrap();
        let before = ae.clone();
        let rep = train_intra(&mut ae, &ds, &quick(0)).unwrap();
        assert_eq!(ae, before);
        assert!(rep.curves.is_empty());
    }

    #[test]
    fn intra_training_is_deterministic_and_learns() {
        let ds = toy_ds("a", 16, 2, 6);
        let run = || {
            let mut ae = ModalityAutoEncoder::new("a", 6, 2, &[8], 1).unwrap();
            train_intra(&mut ae, &ds, &quick(30)).unwrap()
        };
        let (a, b) = (run(), run());
        assert_eq!(a.checksum, b.checksum);
        assert_eq!(a.curves.len(), 30);
        assert!(a.curves[29].total < a.curves[0].total / 3.0, "{:?}", a.curves);
        assert!(!a.checksum.is_empty());
    }

    #[test]
    fn intra_rejects_empty_and_mismatched_data() {
        let ds = toy_ds("a", 4, 2, 6);
        let mut ae = ModalityAutoEncoder::new("a", 6, 2, &[4], 0).unwrap();
        let empty = ds.subset(&[]);
        assert!(matches!(train_intra(&mut ae, &empty, &quick(1)), Err(Error::EmptyDataset(_))));
        let mut wide = ModalityAutoEncoder::new("a", 7, 2, &[4], 0).unwrap();
        assert!(train_intra(&mut wide, &ds, &quick(1)).is_err());
    }

    #[test]
    fn pairs_respect_classes_and_fraction() {
        let a = toy_ds("a", 100, 3, 4);
        let b = toy_ds("b", 7, 3, 5);
        let map = LabelMap::identity(3);
        let pairs = make_pairs(&a, &b, &map, 0.5, 9).unwrap();
        assert_eq!(pairs.len(), 150);
        for &(i, j) in &pairs {
            assert_eq!(a.labels[i], b.labels[j]);
        }
        for c in 0..3 {
            assert_eq!(pairs.iter().filter(|&&(i, _)| a.labels[i] == c).count(), 50);
        }
        assert_eq!(pairs, make_pairs(&a, &b, &map, 0.5, 9).unwrap());
        assert_ne!(pairs, make_pairs(&a, &b, &map, 0.5, 10).unwrap());
    }

    #[test]
    fn single_class_full_pairing() {
        let a = toy_ds("a", 10, 1, 4);
        let pairs = make_pairs(&a, &a, &LabelMap::identity(1), 1.0, 0).unwrap();
        assert_eq!(pairs.len(), 10);
        assert!(pairs.iter().all(|&(i, j)| a.labels[i] == a.labels[j]));
    }

    #[test]
    fn missing_class_is_named() {
        let a = toy_ds("a", 5, 3, 4);
        let b = toy_ds("b", 5, 2, 4);
        let err = make_pairs(&a, &b, &LabelMap::identity(3), 1.0, 0).unwrap_err();
        assert!(matches!(err, Error::MissingClass(2, ref m) if m == "b"), "{err}");
    }

    #[test]
    fn remapped_classes() {
        let a = toy_ds("a", 5, 2, 4);
        let b = toy_ds("b", 5, 2, 4);
        let map = LabelMap::new([(0, 1), (1, 0)]).unwrap();
        for (i, j) in make_pairs(&a, &b, &map, 1.0, 0).unwrap() {
            assert_eq!(map.get(a.labels[i]), Some(b.labels[j]));
        }
    }

    #[test]
    fn retained_sources_are_stable_across_passes() {
        let a = toy_ds("a", 20, 2, 4);
        let s = PairingSampler::new(&a, &a, LabelMap::identity(2), 0.25, 3).unwrap();
        let p0: Vec<usize> = s.pairs(0).iter().map(|p| p.0).collect();
        let p5: Vec<usize> = s.pairs(5).iter().map(|p| p.0).collect();
        assert_eq!(p0, p5);
        assert_eq!(p0.len(), 10);
        let fixed = s.clone().with_epoch_resample(false);
        assert_eq!(fixed.pairs(0), fixed.pairs(7));
    }

    fn trained_pair() -> (ModalityAutoEncoder, ModalityAutoEncoder, Dataset, Dataset) {
        let a = toy_ds("a", 12, 2, 6);
        let b = toy_ds("b", 12, 2, 5);
        let mut ae_a = ModalityAutoEncoder::new("a", 6, 2, &[4], 0).unwrap();
        let mut ae_b = ModalityAutoEncoder::new("b", 5, 3, &[4], 1).unwrap();
        train_intra(&mut ae_a, &a, &quick(2)).unwrap();
        train_intra(&mut ae_b, &b, &quick(2)).unwrap();
        (ae_a, ae_b, a, b)
    }

    #[test]
    fn cross_refuses_unfrozen_autoencoders() {
        let (ae_a, ae_b, a, b) = trained_pair();
        let mut assoc = Associator::between(&ae_a, &ae_b, 0).unwrap();
        let s = PairingSampler::new(&a, &b, LabelMap::identity(2), 1.0, 0).unwrap();
        let err = train_cross(&mut assoc, &ae_a, &ae_b, &s, &quick(1)).unwrap_err();
        assert!(matches!(err, Error::PhaseViolation(_)));
    }

    #[test]
    fn cross_updates_only_the_associator() {
        let (mut ae_a, mut ae_b, a, b) = trained_pair();
        ae_a.set_frozen(true);
        ae_b.set_frozen(true);
        let (ca, cb) = (params_checksum(&ae_a.params()), params_checksum(&ae_b.params()));
        let mut assoc = Associator::between(&ae_a, &ae_b, 0).unwrap();
        let before = assoc.clone();
        let s = PairingSampler::new(&a, &b, LabelMap::identity(2), 1.0, 0).unwrap();
        let rep0 = train_cross(&mut assoc, &ae_a, &ae_b, &s, &quick(0)).unwrap();
        assert_eq!(assoc, before);
        assert!(rep0.curves.is_empty());
        let rep = train_cross(&mut assoc, &ae_a, &ae_b, &s, &quick(3)).unwrap();
        assert_ne!(assoc, before);
        assert_eq!(rep.curves.len(), 3);
        assert_eq!(params_checksum(&ae_a.params()), ca);
        assert_eq!(params_checksum(&ae_b.params()), cb);

        let mut again = before.clone();
        let rep2 = train_cross(&mut again, &ae_a, &ae_b, &s, &quick(3)).unwrap();
        assert_eq!(rep.checksum, rep2.checksum);
    }

    #[test]
    fn reverse_direction_is_independent() {
        let (mut ae_a, mut ae_b, a, b) = trained_pair();
        ae_a.set_frozen(true);
        ae_b.set_frozen(true);
        let mut ab = Associator::between(&ae_a, &ae_b, 0).unwrap();
        let ba = Associator::between(&ae_b, &ae_a, 0).unwrap();
        let snapshot = ba.clone();
        let s = PairingSampler::new(&a, &b, LabelMap::identity(2), 1.0, 0).unwrap();
        train_cross(&mut ab, &ae_a, &ae_b, &s, &quick(2)).unwrap();
        assert_eq!(ba, snapshot);
    }

    #[test]
    fn registry_round_trip_and_prefixes() {
        let mut reg = ModelRegistry::new();
        for (id, h) in [("a", 2), ("b", 3), ("c", 4)] {
            reg.insert_autoencoder(ModalityAutoEncoder::new(id, 6, h, &[5, 4], 1).unwrap());
        }
        let ab = Associator::new("a", "b", 2, 3, &[4, 4], 2).unwrap();
        let bc = Associator::new("b", "c", 3, 4, &[7], 3).unwrap();
        reg.insert_associator(ab);
        reg.insert_associator(bc);
        assert_eq!(
            reg.component_prefixes(),
            vec!["ae/a", "ae/b", "ae/c", "assoc/a->b", "assoc/b->c"]
        );
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("reg.cmas");
        reg.save_checkpoint(&path).unwrap();
        let back = ModelRegistry::load_checkpoint(&path).unwrap();
        assert_eq!(back, reg);
        assert_eq!(back.to_bytes(), reg.to_bytes());
        assert_eq!(back.autoencoder("c").unwrap().latent_dim(), 4);
    }

    #[test]
    fn registry_rejects_bad_magic_and_unknown_records() {
        let mut bytes = ModelRegistry::new().to_bytes();
        bytes[1] = b'!';
        let err = ModelRegistry::from_bytes(&bytes).unwrap_err();
        assert!(err.to_string().contains("bad magic"));
        let t = Tensor::scalar(1.0);
        let odd = checkpoint::encode([("zz/x/w", &t)]);
        assert!(matches!(ModelRegistry::from_bytes(&odd), Err(Error::MalformedCheckpoint(_))));
    }

    #[test]
    fn missing_component_is_named() {
        let reg = ModelRegistry::new();
        let err = reg.associator("a", "b").unwrap_err();
        assert!(err.to_string().contains("assoc/a->b"));
    }
}
