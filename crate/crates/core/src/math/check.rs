//! Vector-Jacobian products and finite-difference gradient checking.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Central-difference step used by [`grad_check`].
pub const FD_STEP: f64 = 1e-5;

/// Denominator floor for relative errors: below this gradient magnitude the
/// comparison degrades to an absolute one.
pub const REL_ERROR_FLOOR: f64 = 1e-4;

const COTANGENT_SEED: u64 = 0x6a09_e667_f3bc_c908;

/// `uᵀ · ∂f/∂x` evaluated at `x`, without materialising the Jacobian.
///
/// Anything `f` pulls in through [`Tape::constant`] (policy parameters, in
/// particular) is held fixed.
pub fn vjp_wrt_input<F>(f: F, x: &Tensor, u: &Tensor) -> Result<Tensor>
where
    F: for<'t> Fn(&'t Tape, Var<'t>) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let xv = tape.leaf(x.clone());
    let y = f(&tape, xv)?;
    if y.shape() != u.shape() {
        return Err(Error::shape(
            "vjp_wrt_input",
            format!("cotangent {:?} vs output {:?}", u.shape(), y.shape()),
        ));
    }
    Ok(tape.backward(y, u)?.wrt(xv))
}

/// Outcome of comparing an analytic gradient to finite differences.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub tolerance: f64,
    pub passed: bool,
}

/// Central differences of a scalar function, one coordinate at a time.
pub fn numeric_gradient(
    phi: impl Fn(&Tensor) -> Result<f64>,
    x: &Tensor,
    h: f64,
) -> Result<Tensor> {
    let mut grad = Vec::with_capacity(x.len());
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = x.data()[i];
        probe.data_mut()[i] = orig + h;
        let plus = phi(&probe)?;
        probe.data_mut()[i] = orig - h;
        let minus = phi(&probe)?;
        probe.data_mut()[i] = orig;
        grad.push((plus - minus) / (2.0 * h));
    }
    Tensor::new(x.shape().to_vec(), grad)
}

/// Element-wise relative error `|a - n| / max(|a|, |n|, floor)`.
pub fn compare_gradients(
    analytic: &Tensor,
    numeric: &Tensor,
    tolerance: f64,
) -> Result<GradCheckReport> {
    if analytic.shape() != numeric.shape() {
        return Err(Error::shape(
            "compare_gradients",
            format!("{:?} vs {:?}", analytic.shape(), numeric.shape()),
        ));
    }
    let mut worst = (0.0_f64, 0usize);
    for (i, (&a, &n)) in analytic.data().iter().zip(numeric.data()).enumerate() {
        let err = (a - n).abs() / a.abs().max(n.abs()).max(REL_ERROR_FLOOR);
        if err > worst.0 {
            worst = (err, i);
        }
    }
    Ok(GradCheckReport {
        max_rel_error: worst.0,
        worst_index: worst.1,
        tolerance,
        passed: worst.0 < tolerance,
    })
}

/// Checks reverse-mode gradients of `f` at `x` against central differences.
///
/// Non-scalar outputs are reduced with a fixed pseudo-random cotangent, so
/// the check covers every output component at once.
pub fn grad_check<F>(f: F, x: &Tensor, tolerance: f64) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape, Var<'t>) -> Result<Var<'t>>,
{
    let out_shape = {
        let tape = Tape::new();
        let xv = tape.constant(x.clone());
        f(&tape, xv)?.shape()
    };
    let numel: usize = out_shape.iter().product();
    let cotangent = if numel == 1 {
        Tensor::full(out_shape, 1.0)
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(COTANGENT_SEED);
        let data = (0..numel).map(|_| StandardNormal.sample(&mut rng)).collect();
        Tensor::new(out_shape, data)?
    };
    let analytic = vjp_wrt_input(&f, x, &cotangent)?;
    let phi = |probe: &Tensor| -> Result<f64> {
        let tape = Tape::new();
        let xv = tape.constant(probe.clone());
        let y = f(&tape, xv)?.value();
        Ok(y.data().iter().zip(cotangent.data()).map(|(a, b)| a * b).sum())
    };
    let numeric = numeric_gradient(phi, x, FD_STEP)?;
    compare_gradients(&analytic, &numeric, tolerance)
}
