//! Dense layers, MLPs and Gaussian output heads.

use rand::Rng as _;

use crate::autodiff::{Param, Parameterized, Tape, Var};
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;
use crate::vae::GaussianParams;

/// Bounds applied to every emitted log-variance.
pub const LOGVAR_MIN: f64 = -10.0;
pub const LOGVAR_MAX: f64 = 10.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Tanh,
    Identity,
}

impl Activation {
    fn apply(self, x: Var<'_>) -> Var<'_> {
        match self {
            Activation::Relu => x.relu(),
            Activation::Tanh => x.tanh(),
            Activation::Identity => x,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    pub weight: Param,
    pub bias: Param,
    pub activation: Activation,
}

impl DenseLayer {
    /// Glorot-uniform weights, zero bias.
    pub fn new(name: &str, fan_in: usize, fan_out: usize, activation: Activation, seed: u64) -> Self {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let mut r = rng::stream(seed, name);
        let w = (0..fan_in * fan_out)
            .map(|_| r.random_range(-limit..limit))
            .collect();
        Self {
            weight: Param::new(format!("{name}/weight"), Tensor::matrix(fan_in, fan_out, w).unwrap()),
            bias: Param::new(format!("{name}/bias"), Tensor::zeros(&[fan_out])),
            activation,
        }
    }

    /// Builds a layer around existing tensors (checkpoint loading).
    pub fn from_params(weight: Param, bias: Param, activation: Activation) -> Result<Self> {
        let ws = weight.value().shape();
        if ws.len() != 2 || bias.value().shape() != [ws[1]] {
            return Err(Error::InvalidDims(format!(
                "layer `{}`: weight {:?} and bias {:?} do not chain",
                weight.name(),
                ws,
                bias.value().shape()
            )));
        }
        Ok(Self {
            weight,
            bias,
            activation,
        })
    }

    pub fn in_dim(&self) -> usize {
        self.weight.value().shape()[0]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.value().shape()[1]
    }

    pub fn forward<'t>(&self, tape: &'t Tape, x: Var<'t>, trainable: bool) -> Result<Var<'t>> {
        let w = tape.bind(&self.weight, trainable);
        let b = tape.bind(&self.bias, trainable);
        Ok(self.activation.apply(x.matmul(w)?.add_row(b)?))
    }

    pub fn zero(&mut self) {
        let (i, o) = (self.in_dim(), self.out_dim());
        self.weight.set_value(Tensor::zeros(&[i, o]));
        self.bias.set_value(Tensor::zeros(&[o]));
    }
}

/// Stack of dense layers with a freeze switch.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<DenseLayer>,
    frozen: bool,
}

/// `init_mlp`: every layer uses `activation`.
pub fn init_mlp(name: &str, dims: &[usize], activation: Activation, seed: u64) -> Result<Mlp> {
    Mlp::new(name, dims, activation, activation, seed)
}

impl Mlp {
    /// Layers `dims[0] → dims[1] → … → dims[n]`; the last layer uses
    /// `output`, the others `hidden`.
    pub fn new(
        name: &str,
        dims: &[usize],
        hidden: Activation,
        output: Activation,
        seed: u64,
    ) -> Result<Self> {
        if dims.len() < 2 || dims.contains(&0) {
            return Err(Error::InvalidDims(format!("`{name}`: {dims:?}")));
        }
        let n = dims.len() - 1;
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                let act = if i + 1 == n { output } else { hidden };
                DenseLayer::new(&format!("{name}/{i}"), w[0], w[1], act, seed)
            })
            .collect();
        Ok(Self {
            layers,
            frozen: false,
        })
    }

    pub fn from_layers(layers: Vec<DenseLayer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::InvalidDims("empty layer list".into()));
        }
        for pair in layers.windows(2) {
            if pair[0].out_dim() != pair[1].in_dim() {
                return Err(Error::InvalidDims(format!(
                    "`{}` emits {} but `{}` expects {}",
                    pair[0].weight.name(),
                    pair[0].out_dim(),
                    pair[1].weight.name(),
                    pair[1].in_dim()
                )));
            }
        }
        Ok(Self {
            layers,
            frozen: false,
        })
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().unwrap().out_dim()
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    /// Frozen parameters are bound as constants: they receive no gradient and
    /// are skipped by [`Mlp::trainable_params_mut`], but gradients still pass
    /// through them to upstream inputs.
    pub fn set_frozen(&mut self, frozen: bool) {
        self.frozen = frozen;
    }

    pub fn forward<'t>(&self, tape: &'t Tape, x: Var<'t>) -> Result<Var<'t>> {
        check_width(&x, self.in_dim(), self.layers[0].weight.name())?;
        let mut h = x;
        for layer in &self.layers {
            h = layer.forward(tape, h, !self.frozen)?;
        }
        Ok(h)
    }

    /// Forward pass on a plain tensor, off any caller tape.
    pub fn infer(&self, x: &Tensor) -> Result<Tensor> {
        let tape = Tape::new();
        let xv = tape.constant(x.clone());
        let mut h = xv;
        check_width(&h, self.in_dim(), self.layers[0].weight.name())?;
        for layer in &self.layers {
            h = layer.forward(&tape, h, false)?;
        }
        let out = (*h.value()).clone();
        Ok(out)
    }

    pub fn trainable_params_mut(&mut self) -> Vec<&mut Param> {
        if self.frozen {
            Vec::new()
        } else {
            self.params_mut()
        }
    }
}

impl Parameterized for Mlp {
    fn params(&self) -> Vec<&Param> {
        self.layers
            .iter()
            .flat_map(|l| [&l.weight, &l.bias])
            .collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect()
    }
}

fn check_width(x: &Var<'_>, want: usize, who: &str) -> Result<()> {
    let shape = x.shape();
    if shape.len() != 2 || shape[1] != want {
        return Err(Error::InvalidDims(format!(
            "`{who}` expects input [batch, {want}], got {shape:?}"
        )));
    }
    Ok(())
}

/// Two parallel identity-activation layers emitting a diagonal Gaussian.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianHead {
    pub mu: DenseLayer,
    pub logvar: DenseLayer,
}

impl GaussianHead {
    pub fn new(name: &str, fan_in: usize, width: usize, seed: u64) -> Self {
        Self {
            mu: DenseLayer::new(&format!("{name}/mu"), fan_in, width, Activation::Identity, seed),
            logvar: DenseLayer::new(&format!("{name}/logvar"), fan_in, width, Activation::Identity, seed),
        }
    }

    pub fn width(&self) -> usize {
        self.mu.out_dim()
    }

    pub fn forward<'t>(&self, tape: &'t Tape, h: Var<'t>, trainable: bool) -> Result<GaussianParams<'t>> {
        let mu = self.mu.forward(tape, h, trainable)?;
        let logvar = self
            .logvar
            .forward(tape, h, trainable)?
            .clamp(LOGVAR_MIN, LOGVAR_MAX);
        Ok(GaussianParams { mu, logvar })
    }

    /// Zeroes both heads so they emit μ = 0 and log σ² = 0.
    pub fn zero(&mut self) {
        self.mu.zero();
        self.logvar.zero();
    }
}

/// An MLP trunk followed by a [`GaussianHead`]; the shape of every encoder,
/// decoder and associator.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianMlp {
    pub trunk: Mlp,
    pub head: GaussianHead,
}

impl GaussianMlp {
    /// `dims` lists the trunk widths (input first); the head maps the last
    /// trunk width to `out`. Hidden layers use ReLU.
    pub fn new(name: &str, dims: &[usize], out: usize, seed: u64) -> Result<Self> {
        if out == 0 {
            return Err(Error::InvalidDims(format!("`{name}`: zero output width")));
        }
        let trunk = Mlp::new(name, dims, Activation::Relu, Activation::Relu, seed)?;
        let head = GaussianHead::new(name, trunk.out_dim(), out, seed);
        Ok(Self { trunk, head })
    }

    pub fn from_parts(trunk: Mlp, head: GaussianHead) -> Result<Self> {
        if trunk.out_dim() != head.mu.in_dim() || head.mu.in_dim() != head.logvar.in_dim()
            || head.mu.out_dim() != head.logvar.out_dim()
        {
            return Err(Error::InvalidDims(format!(
                "head `{}` does not fit its trunk",
                head.mu.weight.name()
            )));
        }
        Ok(Self { trunk, head })
    }

    pub fn in_dim(&self) -> usize {
        self.trunk.in_dim()
    }

    pub fn out_dim(&self) -> usize {
        self.head.width()
    }

    pub fn is_frozen(&self) -> bool {
        self.trunk.is_frozen()
    }

    pub fn set_frozen(&mut self, frozen: bool) {
        self.trunk.set_frozen(frozen);
    }

    pub fn forward<'t>(&self, tape: &'t Tape, x: Var<'t>) -> Result<GaussianParams<'t>> {
        let h = self.trunk.forward(tape, x)?;
        self.head.forward(tape, h, !self.is_frozen())
    }

    /// Mean head only; skips the log-variance branch.
    pub fn forward_mean<'t>(&self, tape: &'t Tape, x: Var<'t>) -> Result<Var<'t>> {
        let h = self.trunk.forward(tape, x)?;
        self.head.mu.forward(tape, h, !self.is_frozen())
    }

    pub fn trainable_params_mut(&mut self) -> Vec<&mut Param> {
        if self.is_frozen() {
            Vec::new()
        } else {
            self.params_mut()
        }
    }
}

impl Parameterized for GaussianMlp {
    fn params(&self) -> Vec<&Param> {
        let mut p = self.trunk.params();
        p.extend([
            &self.head.mu.weight,
            &self.head.mu.bias,
            &self.head.logvar.weight,
            &self.head.logvar.bias,
        ]);
        p
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut p = self.trunk.params_mut();
        let GaussianHead { mu, logvar } = &mut self.head;
        p.extend([&mut mu.weight, &mut mu.bias, &mut logvar.weight, &mut logvar.bias]);
        p
    }
}
