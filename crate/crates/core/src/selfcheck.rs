//! Finite-difference verification of every differentiable operation and of
//! the two training losses on small networks.

use crate::associator::{cross_loss, Associator, CrossOptions};
use crate::autodiff::{grad_check, grad_check_param, OpArg, OpKind, Parameterized, Tape, Var};
use crate::error::Result;
use crate::rng;
use crate::tensor::Tensor;
use crate::vae::{intra_loss, LossWeights, ModalityAutoEncoder, ReconMode};

/// Tolerance for single operations.
pub const PRIMITIVE_TOLERANCE: f64 = 1e-5;
/// Tolerance for the composite losses.
pub const COMPOSITE_TOLERANCE: f64 = 1e-4;
pub const EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub max_rel_error: f64,
    pub tolerance: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance
    }
}

fn grid(rows: usize, cols: usize, lo: f64, hi: f64, salt: usize) -> Tensor {
    let n = rows * cols;
    let data = (0..n)
        .map(|i| {
            let t = ((i * 7 + salt * 3) % (n + 3)) as f64 / (n + 2) as f64;
            lo + (hi - lo) * t
        })
        .collect();
    Tensor::matrix(rows, cols, data).unwrap()
}

/// Reduces `v` to a scalar with fixed, uneven weights so every output
/// coordinate contributes a distinct gradient.
fn weighted<'t>(tape: &'t Tape, v: Var<'t>) -> Result<Var<'t>> {
    let value = v.value();
    if value.is_scalar() {
        return Ok(v);
    }
    let w = Tensor::new(
        value.shape().to_vec(),
        (0..value.numel()).map(|i| 0.3 + 0.17 * (i % 5) as f64).collect(),
    )?;
    Ok(v.mul(tape.constant(w))?.sum())
}

/// Inputs for `kind` away from kinks and clamp bounds.
fn inputs(kind: OpKind) -> Vec<Tensor> {
    // Magnitudes in [0.2, 1.0] with mixed signs, never near zero.
    let mut signed = grid(3, 4, 0.2, 1.0, 1);
    for (i, v) in signed.data_mut().iter_mut().enumerate() {
        if i % 3 == 1 {
            *v = -*v;
        }
    }
    match kind {
        OpKind::MatMul => vec![grid(3, 4, -1.0, 1.0, 1), grid(4, 2, -1.0, 1.0, 2)],
        OpKind::Add | OpKind::Sub | OpKind::Mul => vec![grid(3, 4, -1.0, 1.0, 1), grid(3, 4, -1.0, 1.0, 2)],
        OpKind::AddRow => vec![grid(3, 4, -1.0, 1.0, 1), Tensor::vector(vec![0.1, -0.2, 0.3, 0.4])],
        OpKind::Log => vec![grid(3, 4, 0.2, 2.0, 1)],
        OpKind::Relu => vec![signed],
        // Bounds sit at ±0.6; no value within 0.05 of them.
        OpKind::Clamp => vec![Tensor::matrix(2, 3, vec![-0.9, -0.3, 0.0, 0.25, 0.5, 0.95]).unwrap()],
        OpKind::SoftmaxCrossEntropy => vec![grid(4, 3, -2.0, 2.0, 1)],
        _ => vec![grid(3, 4, -1.0, 1.0, 1)],
    }
}

fn arg(kind: OpKind) -> OpArg<'static> {
    match kind {
        OpKind::Scale => OpArg::Scalar(-1.7),
        OpKind::AddScalar => OpArg::Scalar(0.6),
        OpKind::Clamp => OpArg::Range(-0.6, 0.6),
        OpKind::SoftmaxCrossEntropy => OpArg::Labels(&[2, 0, 1, 2]),
        _ => OpArg::None,
    }
}

/// Largest relative error over all inputs of one operation.
pub fn check_op(kind: OpKind) -> Result<f64> {
    let ins = inputs(kind);
    let mut worst = 0.0_f64;
    for k in 0..ins.len() {
        let err = grad_check(
            |tape, x| {
                let vars: Vec<Var<'_>> = ins
                    .iter()
                    .enumerate()
                    .map(|(i, t)| if i == k { x } else { tape.constant(t.clone()) })
                    .collect();
                let out = tape.apply(kind, &vars, arg(kind))?;
                weighted(tape, out)
            },
            &ins[k],
            EPS,
        )?;
        worst = worst.max(err);
    }
    Ok(worst)
}

fn toy_batch(rows: usize, cols: usize, salt: usize) -> Tensor {
    grid(rows, cols, 0.0, 1.0, salt)
}

/// Worst error over every parameter of the 6-4-2-4-6 auto-encoder under the
/// intra loss, in both reconstruction modes.
pub fn check_intra_loss() -> Result<f64> {
    let mut ae = ModalityAutoEncoder::new("toy", 6, 2, &[4], 5)?;
    let x = toy_batch(3, 6, 1);
    let w = LossWeights::new(0.3, 0.0)?;
    let names: Vec<String> = ae.params().iter().map(|p| p.name().to_string()).collect();
    let mut worst = 0.0_f64;
    for mode in [ReconMode::Mean, ReconMode::Sample] {
        for name in &names {
            let err = grad_check_param(
                &mut ae,
                name,
                |tape, ae| {
                    let mut r = rng::stream(1, "selfcheck");
                    Ok(intra_loss(tape, ae, &x, w, mode, &mut r)?.total)
                },
                EPS,
            )?;
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

/// Worst error over every associator parameter under the cross loss, with
/// frozen auto-encoders of different latent widths.
pub fn check_cross_loss() -> Result<f64> {
    let mut src = ModalityAutoEncoder::new("src", 6, 2, &[4], 6)?;
    let mut tgt = ModalityAutoEncoder::new("tgt", 5, 3, &[4], 7)?;
    src.set_frozen(true);
    tgt.set_frozen(true);
    let mut assoc = Associator::new("src", "tgt", 2, 3, &[4], 8)?;
    let (xi, xj) = (toy_batch(3, 6, 2), toy_batch(3, 5, 3));
    let w = LossWeights::new(0.0, 0.3)?;
    let names: Vec<String> = assoc.params().iter().map(|p| p.name().to_string()).collect();
    let mut worst = 0.0_f64;
    for recon_mode in [ReconMode::Mean, ReconMode::Sample] {
        let opts = CrossOptions {
            recon_mode,
            ..CrossOptions::default()
        };
        for name in &names {
            let err = grad_check_param(
                &mut assoc,
                name,
                |tape, a| {
                    let mut r = rng::stream(2, "selfcheck");
                    Ok(cross_loss(tape, a, &src, &tgt, &xi, &xj, w, opts, &mut r)?.total)
                },
                EPS,
            )?;
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

/// The full suite: one line per operation kind, then the two losses.
pub fn run_suite() -> Result<Vec<CheckResult>> {
    let mut out = Vec::new();
    for kind in OpKind::DIFFERENTIABLE {
        out.push(CheckResult {
            name: kind.name().to_string(),
            max_rel_error: check_op(kind)?,
            tolerance: PRIMITIVE_TOLERANCE,
        });
    }
    out.push(CheckResult {
        name: "intra-loss".into(),
        max_rel_error: check_intra_loss()?,
        tolerance: COMPOSITE_TOLERANCE,
    });
    out.push(CheckResult {
        name: "cross-loss".into(),
        max_rel_error: check_cross_loss()?,
        tolerance: COMPOSITE_TOLERANCE,
    });
    Ok(out)
}
