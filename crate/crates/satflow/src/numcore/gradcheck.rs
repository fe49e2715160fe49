//! Central finite-difference verification of tape gradients.
//!
//! The harness only drives forward passes, so it stays independent of the
//! backward implementation it checks. Functions under test build a graph
//! to an arbitrary output tensor; the harness reduces that output against
//! a fixed random probe, computing the finite-difference quotient with an
//! f64 reduction so the check is not polluted by quantizing the scalar
//! loss to f32.

use super::tape::{NodeId, Tape};
use super::tensor::{Real, Tensor};
use crate::error::Result;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Perturbation size, pass tolerance and the denominator floor of the
/// relative-error comparison. The floor turns the check absolute for
/// tiny gradient entries, where central differences carry roundoff of
/// about eps(T)/h.
#[derive(Clone, Copy, Debug)]
pub struct GradCheckCfg {
    pub h: f64,
    pub tol: f64,
    pub floor: f64,
}

impl GradCheckCfg {
    pub fn for_f32() -> Self {
        GradCheckCfg {
            h: 1e-3,
            tol: 1e-3,
            floor: 0.25,
        }
    }

    pub fn for_f64() -> Self {
        GradCheckCfg {
            h: 1e-6,
            tol: 1e-6,
            floor: 1e-2,
        }
    }
}

/// A differentiable function of leaf tensors: builds the graph on a fresh
/// tape and returns (leaf ids in input order, output id). The output may
/// have any shape; the harness supplies the scalar reduction.
pub trait OutputFn<T: Real> {
    fn build(&self, tape: &mut Tape<T>, inputs: &[Tensor<T>]) -> Result<(Vec<NodeId>, NodeId)>;
}

impl<T: Real, F> OutputFn<T> for F
where
    F: Fn(&mut Tape<T>, &[Tensor<T>]) -> Result<(Vec<NodeId>, NodeId)>,
{
    fn build(&self, tape: &mut Tape<T>, inputs: &[Tensor<T>]) -> Result<(Vec<NodeId>, NodeId)> {
        self(tape, inputs)
    }
}

fn probe_for(shape: &[usize]) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(0xBEEF);
    Tensor::randn(shape, &mut rng)
}

/// 0.5 * mean((y - probe)^2) reduced in f64 from the T-precision output.
fn fd_loss<T: Real>(f: &impl OutputFn<T>, inputs: &[Tensor<T>], probe: &Tensor<f64>) -> Result<f64> {
    let mut tape = Tape::new();
    let (_, out) = f.build(&mut tape, inputs)?;
    let y = tape.value(out);
    let mut acc = 0.0f64;
    for (&v, &p) in y.data().iter().zip(probe.data()) {
        let d = v.f64() - p;
        acc += d * d;
    }
    Ok(0.5 * acc / y.numel() as f64)
}

/// Worst relative error between tape gradients and central differences,
/// across every element of every requires-grad input.
pub fn max_grad_error<T: Real>(
    f: &impl OutputFn<T>,
    inputs: &[Tensor<T>],
    cfg: GradCheckCfg,
) -> Result<f64> {
    // Autodiff pass: probe reduction in T, as production code would run.
    let mut tape = Tape::new();
    let (ids, out) = f.build(&mut tape, inputs)?;
    let probe = probe_for(tape.value(out).shape());
    let probe_leaf = tape.leaf(probe.cast::<T>(), false);
    let loss = tape.half_mse(out, probe_leaf)?;
    let grads = tape.backward(loss)?;

    let mut worst = 0.0f64;
    for (slot, id) in ids.iter().enumerate() {
        let Some(g) = grads.get(*id) else { continue };
        for elem in 0..inputs[slot].numel() {
            let mut plus = inputs.to_vec();
            plus[slot].data_mut()[elem] += T::c(cfg.h);
            let mut minus = inputs.to_vec();
            minus[slot].data_mut()[elem] -= T::c(cfg.h);
            let fd = (fd_loss(f, &plus, &probe)? - fd_loss(f, &minus, &probe)?) / (2.0 * cfg.h);
            let ad = g.data()[elem].f64();
            let denom = ad.abs().max(fd.abs()).max(cfg.floor);
            let err = (ad - fd).abs() / denom;
            if err > worst {
                worst = err;
            }
        }
    }
    Ok(worst)
}

/// Assert-style wrapper used by the test suites.
pub fn check_grads<T: Real>(
    f: &impl OutputFn<T>,
    inputs: &[Tensor<T>],
    cfg: GradCheckCfg,
    label: &str,
) -> Result<()> {
    let worst = max_grad_error(f, inputs, cfg)?;
    if worst > cfg.tol {
        return Err(crate::error::Error::InvalidArg(format!(
            "gradient check failed for {label} ({}): max relative error {worst:.3e} > {:.1e}",
            T::LABEL,
            cfg.tol
        )));
    }
    Ok(())
}
