//! Latent-to-latent translators between modalities and their composition.
//!
//! An [`Associator`] maps a code `z_i` of the source modality to a diagonal
//! Gaussian over the target latent space. It is trained with the
//! auto-encoders frozen: the translated code is decoded by the target decoder
//! and compared against a class-correlated target sample, while the
//! translated Gaussian is pulled toward the target's standard-normal prior.

use std::fmt;
use std::str::FromStr;

use crate::autodiff::{Param, Parameterized, Tape, Var};
use crate::error::{Error, Result};
use crate::nets::GaussianMlp;
use crate::rng::Rng;
use crate::tensor::Tensor;
use crate::training::ModelRegistry;
use crate::vae::{
    kl_to_standard_normal, reparameterize, squared_error, validate_id, GaussianParams,
    GaussianValues, LossTerms, LossWeights, ModalityAutoEncoder, ReconMode, INFER_CHUNK,
};

/// One-way translator from the latent space of `source` to that of `target`.
#[derive(Debug, Clone, PartialEq)]
pub struct Associator {
    source_id: String,
    target_id: String,
    pub net: GaussianMlp,
}

impl Associator {
    pub const DEFAULT_HIDDEN: [usize; 2] = [128, 128];

    pub fn new(
        source_id: &str,
        target_id: &str,
        source_dim: usize,
        target_dim: usize,
        hidden: &[usize],
        seed: u64,
    ) -> Result<Self> {
        validate_id(source_id)?;
        validate_id(target_id)?;
        let mut dims = vec![source_dim];
        dims.extend_from_slice(hidden);
        let net = GaussianMlp::new(&Self::prefix_for(source_id, target_id), &dims, target_dim, seed)?;
        Ok(Self {
            source_id: source_id.to_string(),
            target_id: target_id.to_string(),
            net,
        })
    }

    /// Associator between two auto-encoders with the default hidden widths.
    pub fn between(src: &ModalityAutoEncoder, tgt: &ModalityAutoEncoder, seed: u64) -> Result<Self> {
        Self::new(
            src.modality_id(),
            tgt.modality_id(),
            src.latent_dim(),
            tgt.latent_dim(),
            &Self::DEFAULT_HIDDEN,
            seed,
        )
    }

    pub fn from_net(source_id: &str, target_id: &str, net: GaussianMlp) -> Result<Self> {
        validate_id(source_id)?;
        validate_id(target_id)?;
        Ok(Self {
            source_id: source_id.to_string(),
            target_id: target_id.to_string(),
            net,
        })
    }

    /// Checkpoint prefix, `assoc/<src>-><tgt>`.
    pub fn prefix_for(source_id: &str, target_id: &str) -> String {
        format!("assoc/{source_id}->{target_id}")
    }

    pub fn source_id(&self) -> &str {
        &self.source_id
    }

    pub fn target_id(&self) -> &str {
        &self.target_id
    }

    pub fn source_dim(&self) -> usize {
        self.net.in_dim()
    }

    pub fn target_dim(&self) -> usize {
        self.net.out_dim()
    }

    pub fn set_frozen(&mut self, frozen: bool) {
        self.net.set_frozen(frozen);
    }

    pub fn is_frozen(&self) -> bool {
        self.net.is_frozen()
    }

    /// Parameters of the Gaussian over the target latent given `z`.
    pub fn associate<'t>(&self, tape: &'t Tape, z: Var<'t>) -> Result<GaussianParams<'t>> {
        self.net.forward(tape, z)
    }

    pub fn trainable_params_mut(&mut self) -> Vec<&mut Param> {
        self.net.trainable_params_mut()
    }

    fn check_endpoints(&self, src: &ModalityAutoEncoder, tgt: &ModalityAutoEncoder) -> Result<()> {
        for (want, ae) in [(&self.source_id, src), (&self.target_id, tgt)] {
            if ae.modality_id() != want {
                return Err(Error::ModalityMismatch {
                    expected: want.clone(),
                    found: ae.modality_id().to_string(),
                });
            }
        }
        if src.latent_dim() != self.source_dim() || tgt.latent_dim() != self.target_dim() {
            return Err(Error::InvalidDims(format!(
                "associator {}→{} does not fit latent widths {}→{}",
                self.source_dim(),
                self.target_dim(),
                src.latent_dim(),
                tgt.latent_dim()
            )));
        }
        Ok(())
    }
}

impl Parameterized for Associator {
    fn params(&self) -> Vec<&Param> {
        self.net.params()
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        self.net.params_mut()
    }
}

/// What the associator sees from the source encoder during training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SourceLatent {
    /// A reparameterized draw from q(z_i|x_i).
    #[default]
    Sampled,
    /// The encoder mean.
    Mean,
}

impl fmt::Display for SourceLatent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SourceLatent::Sampled => "sampled",
            SourceLatent::Mean => "mean",
        })
    }
}

impl FromStr for SourceLatent {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "sampled" => Ok(SourceLatent::Sampled),
            "mean" => Ok(SourceLatent::Mean),
            other => Err(Error::Config(format!("unknown associator input `{other}`"))),
        }
    }
}

/// Knobs of the cross loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CrossOptions {
    pub recon_mode: ReconMode,
    pub source_latent: SourceLatent,
    /// Monte-Carlo draws of `z_i` averaged per step.
    pub samples: usize,
}

impl Default for CrossOptions {
    fn default() -> Self {
        Self {
            recon_mode: ReconMode::Mean,
            source_latent: SourceLatent::Sampled,
            samples: 1,
        }
    }
}

/// `‖x_j - x̂_ji‖² + λ_crs · kl_to_standard_normal(q(z_ji|x_i))`.
///
/// Both auto-encoders must be frozen; only the associator's parameters are
/// bound as trainable, so the gradient reaches nothing else.
#[allow(clippy::too_many_arguments)]
pub fn cross_loss<'t>(
    tape: &'t Tape,
    assoc: &Associator,
    ae_src: &ModalityAutoEncoder,
    ae_tgt: &ModalityAutoEncoder,
    x_i: &Tensor,
    x_j: &Tensor,
    weights: LossWeights,
    opts: CrossOptions,
    rng: &mut Rng,
) -> Result<LossTerms<'t>> {
    require_frozen(ae_src)?;
    require_frozen(ae_tgt)?;
    assoc.check_endpoints(ae_src, ae_tgt)?;
    let xi = tape.constant(x_i.clone());
    let q = ae_src.encode(tape, xi)?;
    cross_loss_from_posterior(tape, assoc, ae_tgt, q, x_j, weights, opts, rng)
}

pub(crate) fn require_frozen(ae: &ModalityAutoEncoder) -> Result<()> {
    if ae.is_frozen() {
        Ok(())
    } else {
        Err(Error::PhaseViolation(format!(
            "auto-encoder `{}` must be frozen before cross-modal training",
            ae.modality_id()
        )))
    }
}

/// Cross loss starting from an already computed source posterior. Used by the
/// trainer, which encodes the (frozen) source data once up front.
#[allow(clippy::too_many_arguments)]
pub fn cross_loss_from_posterior<'t>(
    tape: &'t Tape,
    assoc: &Associator,
    ae_tgt: &ModalityAutoEncoder,
    q: GaussianParams<'t>,
    x_j: &Tensor,
    weights: LossWeights,
    opts: CrossOptions,
    rng: &mut Rng,
) -> Result<LossTerms<'t>> {
    if x_j.rank() != 2 || x_j.cols() != ae_tgt.input_dim() || x_j.rows() != q.mu.shape()[0] {
        return Err(Error::InvalidDims(format!(
            "target batch {:?} does not match `{}` input width {} and {} source rows",
            x_j.shape(),
            ae_tgt.modality_id(),
            ae_tgt.input_dim(),
            q.mu.shape()[0]
        )));
    }
    let samples = opts.samples.max(1);
    let xj = tape.constant(x_j.clone());
    let mut acc: Option<(Var<'t>, Var<'t>)> = None;
    for _ in 0..samples {
        let z_i = match opts.source_latent {
            SourceLatent::Sampled => reparameterize(tape, q, rng),
            SourceLatent::Mean => q.mu,
        };
        let p = assoc.associate(tape, z_i)?;
        let z_ji = reparameterize(tape, p, rng);
        let x_hat = ae_tgt.reconstruct(tape, z_ji, opts.recon_mode, rng)?;
        let recon = squared_error(xj, x_hat)?;
        let kl = kl_to_standard_normal(p)?;
        acc = Some(match acc {
            None => (recon, kl),
            Some((r, k)) => (r.add(recon)?, k.add(kl)?),
        });
    }
    let (mut recon, mut kl) = acc.expect("at least one sample");
    if samples > 1 {
        recon = recon.scale(1.0 / samples as f64);
        kl = kl.scale(1.0 / samples as f64);
    }
    let total = recon.add(kl.scale(weights.lambda_crs))?;
    Ok(LossTerms { total, recon, kl })
}

/// Whether generation follows means or draws samples at each latent.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PathMode {
    /// Encoder and associator means all the way; deterministic.
    #[default]
    Mean,
    /// Reparameterized draws at the source latent and after every hop.
    Sampled,
}

impl fmt::Display for PathMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PathMode::Mean => "mean",
            PathMode::Sampled => "sampled",
        })
    }
}

impl FromStr for PathMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "mean" => Ok(PathMode::Mean),
            "sampled" | "sample" => Ok(PathMode::Sampled),
            other => Err(Error::Config(format!("unknown path mode `{other}`"))),
        }
    }
}

/// A chain of associators, each feeding the next.
#[derive(Debug, Clone)]
pub struct AssociationPath<'a> {
    hops: Vec<&'a Associator>,
}

impl<'a> AssociationPath<'a> {
    pub fn new(hops: Vec<&'a Associator>) -> Result<Self> {
        if hops.is_empty() {
            return Err(Error::InvalidArgument("empty association path".into()));
        }
        for pair in hops.windows(2) {
            if pair[0].target_id() != pair[1].source_id() {
                return Err(Error::BrokenChain(
                    format!("{}->{}", pair[0].source_id(), pair[0].target_id()),
                    format!("{}->{}", pair[1].source_id(), pair[1].target_id()),
                ));
            }
        }
        Ok(Self { hops })
    }

    /// Resolves `ids[0] → ids[1] → …` against the associators in `registry`.
    pub fn through(registry: &'a ModelRegistry, ids: &[&str]) -> Result<Self> {
        if ids.len() < 2 {
            return Err(Error::InvalidArgument(format!(
                "a path needs at least two modalities, got {ids:?}"
            )));
        }
        let hops = ids
            .windows(2)
            .map(|w| registry.associator(w[0], w[1]))
            .collect::<Result<Vec<_>>>()?;
        Self::new(hops)
    }

    pub fn hops(&self) -> &[&'a Associator] {
        &self.hops
    }

    pub fn source_id(&self) -> &str {
        self.hops[0].source_id()
    }

    pub fn target_id(&self) -> &str {
        self.hops.last().unwrap().target_id()
    }

    /// `src->mid->…->tgt`.
    pub fn label(&self) -> String {
        let mut s = self.source_id().to_string();
        for h in &self.hops {
            s.push_str("->");
            s.push_str(h.target_id());
        }
        s
    }
}

fn step_latent<'t>(tape: &'t Tape, p: GaussianParams<'t>, mode: PathMode, rng: &mut Rng) -> Var<'t> {
    match mode {
        PathMode::Mean => p.mu,
        PathMode::Sampled => reparameterize(tape, p, rng),
    }
}

/// Generates target-modality samples from source inputs along `path`.
pub fn generate_along(
    path: &AssociationPath<'_>,
    ae_src: &ModalityAutoEncoder,
    ae_tgt: &ModalityAutoEncoder,
    x: &Tensor,
    rng: &mut Rng,
    mode: PathMode,
) -> Result<Tensor> {
    for (want, ae) in [(path.source_id(), ae_src), (path.target_id(), ae_tgt)] {
        if ae.modality_id() != want {
            return Err(Error::ModalityMismatch {
                expected: want.to_string(),
                found: ae.modality_id().to_string(),
            });
        }
    }
    if x.rank() != 2 || x.cols() != ae_src.input_dim() {
        return Err(Error::InvalidDims(format!(
            "`{}` expects [n, {}], got {:?}",
            ae_src.modality_id(),
            ae_src.input_dim(),
            x.shape()
        )));
    }
    let mut enc = ae_src.encoder.clone();
    enc.set_frozen(true);
    let mut dec = ae_tgt.decoder.clone();
    dec.set_frozen(true);
    let hops: Vec<GaussianMlp> = path
        .hops()
        .iter()
        .map(|a| {
            let mut n = a.net.clone();
            n.set_frozen(true);
            n
        })
        .collect();

    let mut out = Vec::new();
    for start in (0..x.rows()).step_by(INFER_CHUNK) {
        let end = (start + INFER_CHUNK).min(x.rows());
        let tape = Tape::new();
        let xv = tape.constant(x.slice_rows(start, end));
        let mut z = step_latent(&tape, enc.forward(&tape, xv)?, mode, rng);
        for net in &hops {
            z = step_latent(&tape, net.forward(&tape, z)?, mode, rng);
        }
        out.push((*dec.forward_mean(&tape, z)?.value()).clone());
    }
    Tensor::vstack(&out)
}

/// `x̂_ji` for every row of `x_i`.
pub fn cross_generate(
    assoc: &Associator,
    ae_src: &ModalityAutoEncoder,
    ae_tgt: &ModalityAutoEncoder,
    x_i: &Tensor,
    rng: &mut Rng,
    mode: PathMode,
) -> Result<Tensor> {
    assoc.check_endpoints(ae_src, ae_tgt)?;
    generate_along(&AssociationPath::new(vec![assoc])?, ae_src, ae_tgt, x_i, rng, mode)
}

/// Encodes at the path's source, applies every hop and decodes at its target.
pub fn cascade_generate(
    path: &AssociationPath<'_>,
    registry: &ModelRegistry,
    x: &Tensor,
    rng: &mut Rng,
    mode: PathMode,
) -> Result<Tensor> {
    let src = registry.autoencoder(path.source_id())?;
    let tgt = registry.autoencoder(path.target_id())?;
    for hop in path.hops() {
        let (a, b) = (registry.autoencoder(hop.source_id())?, registry.autoencoder(hop.target_id())?);
        hop.check_endpoints(a, b)?;
    }
    generate_along(path, src, tgt, x, rng, mode)
}

/// Posterior parameters of the associator for a batch of source codes.
pub fn associate_values(assoc: &Associator, z: &Tensor) -> Result<GaussianValues> {
    let mut net = assoc.net.clone();
    net.set_frozen(true);
    let tape = Tape::new();
    let zv = tape.constant(z.clone());
    Ok(net.forward(&tape, zv)?.values())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{grad_check_param, Optimizer};
    use crate::rng;

    fn frozen_ae(id: &str, d: usize, h: usize, seed: u64) -> ModalityAutoEncoder {
        let mut ae = ModalityAutoEncoder::new(id, d, h, &[4], seed).unwrap();
        ae.set_frozen(true);
        ae
    }

    fn batch(rows: usize, cols: usize, k: usize) -> Tensor {
        Tensor::matrix(
            rows,
            cols,
            (0..rows * cols).map(|i| ((i * k + 3) % 11) as f64 / 11.0).collect(),
        )
        .unwrap()
    }

    #[test]
    fn zero_head_emits_standard_normal() {
        let mut a = Associator::new("a", "b", 3, 2, &[4], 0).unwrap();
        a.net.head.zero();
        let v = associate_values(&a, &batch(2, 3, 5)).unwrap();
        assert!(v.mu.data().iter().all(|&x| x == 0.0));
        assert!(v.logvar.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn associate_is_deterministic() {
        let a = Associator::new("a", "b", 3, 2, &[4], 1).unwrap();
        let z = batch(2, 3, 7);
        assert_eq!(associate_values(&a, &z).unwrap(), associate_values(&a, &z).unwrap());
    }

    #[test]
    fn associate_rejects_wrong_width() {
        let a = Associator::new("a", "b", 3, 2, &[4], 1).unwrap();
        assert!(associate_values(&a, &batch(2, 4, 1)).is_err());
    }

    #[test]
    fn cross_loss_requires_frozen_autoencoders() {
        let src = ModalityAutoEncoder::new("a", 5, 2, &[4], 0).unwrap();
        let tgt = frozen_ae("b", 6, 3, 1);
        let a = Associator::between(&src, &tgt, 2).unwrap();
        let tape = Tape::new();
        let mut r = rng::stream(0, "t");
        let err = cross_loss(
            &tape, &a, &src, &tgt, &batch(2, 5, 1), &batch(2, 6, 2),
            LossWeights::default(), CrossOptions::default(), &mut r,
        )
        .unwrap_err();
        assert!(matches!(err, Error::PhaseViolation(_)));
    }

    #[test]
    fn cross_loss_checks_modalities() {
        let src = frozen_ae("a", 5, 2, 0);
        let tgt = frozen_ae("b", 6, 3, 1);
        let other = frozen_ae("c", 6, 3, 1);
        let a = Associator::between(&src, &tgt, 2).unwrap();
        let tape = Tape::new();
        let mut r = rng::stream(0, "t");
        let err = cross_loss(
            &tape, &a, &src, &other, &batch(2, 5, 1), &batch(2, 6, 2),
            LossWeights::default(), CrossOptions::default(), &mut r,
        )
        .unwrap_err();
        assert!(matches!(err, Error::ModalityMismatch { .. }));
    }

    #[test]
    fn zero_lambda_is_pure_cross_reconstruction() {
        let src = frozen_ae("a", 5, 2, 0);
        let tgt = frozen_ae("b", 6, 3, 1);
        let a = Associator::between(&src, &tgt, 2).unwrap();
        let tape = Tape::new();
        let mut r = rng::stream(0, "t");
        let w = LossWeights::new(0.0, 0.0).unwrap();
        let t = cross_loss(
            &tape, &a, &src, &tgt, &batch(2, 5, 1), &batch(2, 6, 2), w,
            CrossOptions::default(), &mut r,
        )
        .unwrap();
        let (total, recon, _) = t.values();
        assert_eq!(total, recon);
    }

    #[test]
    fn standard_normal_output_has_zero_kl() {
        let src = frozen_ae("a", 5, 2, 0);
        let tgt = frozen_ae("b", 6, 3, 1);
        let mut a = Associator::between(&src, &tgt, 2).unwrap();
        a.net.head.zero();
        let tape = Tape::new();
        let mut r = rng::stream(0, "t");
        let t = cross_loss(
            &tape, &a, &src, &tgt, &batch(2, 5, 1), &batch(2, 6, 2),
            LossWeights::default(), CrossOptions::default(), &mut r,
        )
        .unwrap();
        assert_eq!(t.kl.value().item(), 0.0);
    }

    #[test]
    fn gradient_reaches_only_the_associator() {
        let src = frozen_ae("a", 5, 2, 0);
        let tgt = frozen_ae("b", 6, 3, 1);
        let mut a = Associator::between(&src, &tgt, 2).unwrap();
        let tape = Tape::new();
        let mut r = rng::stream(0, "t");
        let t = cross_loss(
            &tape, &a, &src, &tgt, &batch(2, 5, 1), &batch(2, 6, 2),
            LossWeights::default(), CrossOptions::default(), &mut r,
        )
        .unwrap();
        let g = tape.backward(t.total).unwrap();
        let names: Vec<&str> = g.param_names().collect();
        assert!(names.iter().all(|n| n.starts_with("assoc/a->b/")), "{names:?}");
        let nonzero = a
            .params()
            .iter()
            .any(|p| g.param(p.name()).unwrap().data().iter().any(|&v| v != 0.0));
        assert!(nonzero);
        Optimizer::adam(1e-3).step(a.trainable_params_mut(), &g).unwrap();
    }

    #[test]
    fn cross_loss_gradient_matches_finite_differences() {
        let src = frozen_ae("a", 5, 2, 0);
        let tgt = frozen_ae("b", 6, 2, 1);
        let mut a = Associator::new("a", "b", 2, 2, &[3], 3).unwrap();
        let (xi, xj) = (batch(3, 5, 1), batch(3, 6, 4));
        let names: Vec<String> = a.params().iter().map(|p| p.name().to_string()).collect();
        for samples in [1, 3] {
            let opts = CrossOptions { samples, ..Default::default() };
            for name in &names {
                let err = grad_check_param(
                    &mut a,
                    name,
                    |tape, a| {
                        let mut r = rng::stream(9, "eps");
                        Ok(cross_loss(tape, a, &src, &tgt, &xi, &xj, LossWeights::new(0.1, 0.2)?, opts, &mut r)?.total)
                    },
                    1e-5,
                )
                .unwrap();
                assert!(err < 1e-5, "{name}: {err}");
            }
        }
    }

    #[test]
    fn broken_chain_is_rejected() {
        let ab = Associator::new("a", "b", 2, 2, &[3], 0).unwrap();
        let cd = Associator::new("c", "d", 2, 2, &[3], 0).unwrap();
        let err = AssociationPath::new(vec![&ab, &cd]).unwrap_err();
        assert!(matches!(err, Error::BrokenChain(..)));
        let bc = Associator::new("b", "c", 2, 2, &[3], 0).unwrap();
        let ok = AssociationPath::new(vec![&ab, &bc]).unwrap();
        assert_eq!(ok.label(), "a->b->c");
    }

    #[test]
    fn mean_path_generation_is_deterministic_and_shaped() {
        let src = frozen_ae("a", 5, 2, 0);
        let tgt = frozen_ae("b", 6, 3, 1);
        let a = Associator::between(&src, &tgt, 2).unwrap();
        let x = batch(4, 5, 3);
        let mut r1 = rng::stream(0, "g");
        let mut r2 = rng::stream(1, "g");
        let g1 = cross_generate(&a, &src, &tgt, &x, &mut r1, PathMode::Mean).unwrap();
        let g2 = cross_generate(&a, &src, &tgt, &x, &mut r2, PathMode::Mean).unwrap();
        assert_eq!(g1, g2);
        assert_eq!(g1.shape(), &[4, 6]);
        let s = cross_generate(&a, &src, &tgt, &x, &mut r1, PathMode::Sampled).unwrap();
        assert_ne!(s, g1);
    }
}
