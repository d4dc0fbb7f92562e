//! Per-modality variational auto-encoder: encoder q(z|x), reparameterized
//! sampling, decoder p(x|z) and the intra-modal loss.

use std::fmt;
use std::str::FromStr;

use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::{Param, Parameterized, Tape, Var};
use crate::error::{Error, Result};
use crate::nets::GaussianMlp;
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Rows per chunk for off-tape inference over whole datasets.
pub const INFER_CHUNK: usize = 500;

/// Diagonal Gaussian as recorded on a tape.
#[derive(Debug, Clone, Copy)]
pub struct GaussianParams<'t> {
    pub mu: Var<'t>,
    pub logvar: Var<'t>,
}

impl GaussianParams<'_> {
    pub fn values(&self) -> GaussianValues {
        GaussianValues {
            mu: (*self.mu.value()).clone(),
            logvar: (*self.logvar.value()).clone(),
        }
    }
}

/// Diagonal Gaussian as plain tensors, `[batch, H]` each.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianValues {
    pub mu: Tensor,
    pub logvar: Tensor,
}

impl GaussianValues {
    pub fn rows(&self, indices: &[usize]) -> GaussianValues {
        GaussianValues {
            mu: self.mu.select_rows(indices),
            logvar: self.logvar.select_rows(indices),
        }
    }

    pub fn bind<'t>(&self, tape: &'t Tape) -> GaussianParams<'t> {
        GaussianParams {
            mu: tape.constant(self.mu.clone()),
            logvar: tape.constant(self.logvar.clone()),
        }
    }
}

/// Standard-normal prior over an `H`-dimensional latent space.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PriorSpec {
    pub dim: usize,
}

/// Weights of the KL terms in the intra and cross losses.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub lambda_int: f64,
    pub lambda_crs: f64,
}

impl LossWeights {
    pub fn new(lambda_int: f64, lambda_crs: f64) -> Result<Self> {
        for (name, v) in [("lambda_int", lambda_int), ("lambda_crs", lambda_crs)] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Config(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        Ok(Self {
            lambda_int,
            lambda_crs,
        })
    }
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_int: crate::training::DEFAULT_LAMBDA,
            lambda_crs: crate::training::DEFAULT_LAMBDA,
        }
    }
}

/// How a decoder output becomes a reconstruction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ReconMode {
    /// Use the decoder mean.
    #[default]
    Mean,
    /// Draw `x̂ = μ + σ·ε` from the decoder Gaussian.
    Sample,
}

impl fmt::Display for ReconMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ReconMode::Mean => "mean",
            ReconMode::Sample => "sample",
        })
    }
}

impl FromStr for ReconMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "mean" => Ok(ReconMode::Mean),
            "sample" => Ok(ReconMode::Sample),
            other => Err(Error::Config(format!("unknown reconstruction mode `{other}`"))),
        }
    }
}

pub(crate) fn validate_id(id: &str) -> Result<()> {
    if id.is_empty() || id.contains(['/', ',', ' ', '\n']) || id.contains("->") {
        return Err(Error::InvalidArgument(format!("invalid modality id `{id}`")));
    }
    Ok(())
}

/// Encoder and decoder for one modality with its own latent width.
#[derive(Debug, Clone, PartialEq)]
pub struct ModalityAutoEncoder {
    modality_id: String,
    input_dim: usize,
    latent_dim: usize,
    pub encoder: GaussianMlp,
    pub decoder: GaussianMlp,
}

impl ModalityAutoEncoder {
    pub const DEFAULT_HIDDEN: usize = 256;

    /// Encoder `input → hidden… → (H, H)`, decoder `H → …hidden → (input, input)`.
    pub fn new(
        modality_id: &str,
        input_dim: usize,
        latent_dim: usize,
        hidden: &[usize],
        seed: u64,
    ) -> Result<Self> {
        validate_id(modality_id)?;
        if input_dim == 0 || latent_dim == 0 {
            return Err(Error::InvalidDims(format!(
                "`{modality_id}`: input {input_dim}, latent {latent_dim}"
            )));
        }
        let mut enc_dims = vec![input_dim];
        enc_dims.extend_from_slice(hidden);
        let mut dec_dims = vec![latent_dim];
        dec_dims.extend(hidden.iter().rev());
        let encoder = GaussianMlp::new(&format!("ae/{modality_id}/enc"), &enc_dims, latent_dim, seed)?;
        let decoder = GaussianMlp::new(&format!("ae/{modality_id}/dec"), &dec_dims, input_dim, seed)?;
        Ok(Self {
            modality_id: modality_id.to_string(),
            input_dim,
            latent_dim,
            encoder,
            decoder,
        })
    }

    pub fn with_default_shape(modality_id: &str, input_dim: usize, latent_dim: usize, seed: u64) -> Result<Self> {
        Self::new(modality_id, input_dim, latent_dim, &[Self::DEFAULT_HIDDEN], seed)
    }

    pub fn from_parts(modality_id: &str, encoder: GaussianMlp, decoder: GaussianMlp) -> Result<Self> {
        validate_id(modality_id)?;
        if encoder.out_dim() != decoder.in_dim() || encoder.in_dim() != decoder.out_dim() {
            return Err(Error::InvalidDims(format!(
                "`{modality_id}`: encoder {}→{} does not mirror decoder {}→{}",
                encoder.in_dim(),
                encoder.out_dim(),
                decoder.in_dim(),
                decoder.out_dim()
            )));
        }
        Ok(Self {
            modality_id: modality_id.to_string(),
            input_dim: encoder.in_dim(),
            latent_dim: encoder.out_dim(),
            encoder,
            decoder,
        })
    }

    pub fn modality_id(&self) -> &str {
        &self.modality_id
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn latent_dim(&self) -> usize {
        self.latent_dim
    }

    pub fn prior(&self) -> PriorSpec {
        PriorSpec {
            dim: self.latent_dim,
        }
    }

    pub fn is_frozen(&self) -> bool {
        self.encoder.is_frozen() && self.decoder.is_frozen()
    }

    pub fn set_frozen(&mut self, frozen: bool) {
        self.encoder.set_frozen(frozen);
        self.decoder.set_frozen(frozen);
    }

    /// Parameters of q(z|x).
    pub fn encode<'t>(&self, tape: &'t Tape, x: Var<'t>) -> Result<GaussianParams<'t>> {
        self.encoder.forward(tape, x)
    }

    /// Parameters of p(x|z).
    pub fn decode<'t>(&self, tape: &'t Tape, z: Var<'t>) -> Result<GaussianParams<'t>> {
        self.decoder.forward(tape, z)
    }

    pub fn decode_mean<'t>(&self, tape: &'t Tape, z: Var<'t>) -> Result<Var<'t>> {
        self.decoder.forward_mean(tape, z)
    }

    /// Decoder output turned into a reconstruction according to `mode`.
    pub fn reconstruct<'t>(&self, tape: &'t Tape, z: Var<'t>, mode: ReconMode, rng: &mut Rng) -> Result<Var<'t>> {
        match mode {
            // A frozen decoder has nothing to learn from its log-variance
            // head, so only the mean branch is evaluated.
            ReconMode::Mean if self.decoder.is_frozen() => self.decode_mean(tape, z),
            ReconMode::Mean => Ok(self.decode(tape, z)?.mu),
            ReconMode::Sample => Ok(reparameterize(tape, self.decode(tape, z)?, rng)),
        }
    }

    /// q(z|x) for every row of `x`, off-tape.
    pub fn encode_values(&self, x: &Tensor) -> Result<GaussianValues> {
        let mut mus = Vec::new();
        let mut lvs = Vec::new();
        for start in (0..x.rows()).step_by(INFER_CHUNK) {
            let end = (start + INFER_CHUNK).min(x.rows());
            let tape = Tape::new();
            let xv = tape.constant(x.slice_rows(start, end));
            let p = self.encoder_const(&tape, xv)?;
            mus.push((*p.mu.value()).clone());
            lvs.push((*p.logvar.value()).clone());
        }
        Ok(GaussianValues {
            mu: Tensor::vstack(&mus)?,
            logvar: Tensor::vstack(&lvs)?,
        })
    }

    fn encoder_const<'t>(&self, tape: &'t Tape, x: Var<'t>) -> Result<GaussianParams<'t>> {
        let mut frozen = self.encoder.clone();
        frozen.set_frozen(true);
        frozen.forward(tape, x)
    }

    /// Decoder means for every row of `z`, off-tape.
    pub fn decode_mean_values(&self, z: &Tensor) -> Result<Tensor> {
        let mut out = Vec::new();
        let mut frozen = self.decoder.clone();
        frozen.set_frozen(true);
        for start in (0..z.rows()).step_by(INFER_CHUNK) {
            let end = (start + INFER_CHUNK).min(z.rows());
            let tape = Tape::new();
            let zv = tape.constant(z.slice_rows(start, end));
            out.push((*frozen.forward_mean(&tape, zv)?.value()).clone());
        }
        Tensor::vstack(&out)
    }

    pub fn trainable_params_mut(&mut self) -> Vec<&mut Param> {
        let mut p = self.encoder.trainable_params_mut();
        p.extend(self.decoder.trainable_params_mut());
        p
    }
}

impl Parameterized for ModalityAutoEncoder {
    fn params(&self) -> Vec<&Param> {
        let mut p = self.encoder.params();
        p.extend(self.decoder.params());
        p
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut p = self.encoder.params_mut();
        p.extend(self.decoder.params_mut());
        p
    }
}

/// Standard-normal noise of the given shape.
pub fn standard_normal(shape: &[usize], rng: &mut Rng) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| StandardNormal.sample(rng)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape and length agree")
}

/// `z = μ + exp(logvar / 2) ⊙ ε` with `ε ~ N(0, I)` drawn from `rng`.
pub fn reparameterize<'t>(tape: &'t Tape, p: GaussianParams<'t>, rng: &mut Rng) -> Var<'t> {
    let eps = standard_normal(&p.mu.shape(), rng);
    reparameterize_with_noise(tape, p, eps).expect("noise drawn with the mean's shape")
}

/// Reparameterization with caller-supplied noise. `ε` is a constant, so the
/// gradient reaches only μ and the log-variance.
pub fn reparameterize_with_noise<'t>(tape: &'t Tape, p: GaussianParams<'t>, eps: Tensor) -> Result<Var<'t>> {
    let eps = tape.constant(eps);
    let sigma = p.logvar.scale(0.5).exp();
    p.mu.add(sigma.mul(eps)?)
}

/// `-Σ_k (1 + logvar_k - μ_k² - exp(logvar_k))`, summed over latent
/// dimensions and averaged over the batch.
///
/// This is the unhalved form, i.e. twice the KL divergence from the standard
/// normal; the missing ½ lives in the loss weight.
pub fn kl_to_standard_normal(p: GaussianParams<'_>) -> Result<Var<'_>> {
    let batch = p.mu.shape()[0] as f64;
    let inner = p
        .logvar
        .add_scalar(1.0)
        .sub(p.mu.square())?
        .sub(p.logvar.exp())?;
    Ok(inner.sum().scale(-1.0 / batch))
}

/// The same quantity for plain vectors of one sample.
pub fn kl_closed_form(mu: &[f64], logvar: &[f64]) -> f64 {
    -mu.iter()
        .zip(logvar)
        .map(|(m, lv)| 1.0 + lv - m * m - lv.exp())
        .sum::<f64>()
}

/// `Σ (x - x̂)²` over features, averaged over the batch.
pub fn squared_error<'t>(target: Var<'t>, recon: Var<'t>) -> Result<Var<'t>> {
    let batch = target.shape()[0] as f64;
    Ok(target.sub(recon)?.square().sum().scale(1.0 / batch))
}

/// Scalar loss terms of one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct LossTerms<'t> {
    pub total: Var<'t>,
    pub recon: Var<'t>,
    pub kl: Var<'t>,
}

impl LossTerms<'_> {
    pub fn values(&self) -> (f64, f64, f64) {
        (
            self.total.value().item(),
            self.recon.value().item(),
            self.kl.value().item(),
        )
    }
}

/// `‖x - x̂‖² + λ_int · kl_to_standard_normal(q(z|x))`.
pub fn intra_loss<'t>(
    tape: &'t Tape,
    ae: &ModalityAutoEncoder,
    x: &Tensor,
    weights: LossWeights,
    mode: ReconMode,
    rng: &mut Rng,
) -> Result<LossTerms<'t>> {
    if x.rank() != 2 || x.cols() != ae.input_dim() {
        return Err(Error::InvalidDims(format!(
            "`{}` expects [batch, {}], got {:?}",
            ae.modality_id(),
            ae.input_dim(),
            x.shape()
        )));
    }
    let xv = tape.constant(x.clone());
    let q = ae.encode(tape, xv)?;
    let z = reparameterize(tape, q, rng);
    let x_hat = ae.reconstruct(tape, z, mode, rng)?;
    let recon = squared_error(xv, x_hat)?;
    let kl = kl_to_standard_normal(q)?;
    let total = recon.add(kl.scale(weights.lambda_int))?;
    Ok(LossTerms { total, recon, kl })
}
