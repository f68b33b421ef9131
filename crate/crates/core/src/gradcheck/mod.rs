//! Central finite-difference checks of tape adjoints.

use crate::autodiff::{NodeId, Tape};
use crate::error::{Error, Result};
use crate::volume::ChannelVolume;

/// Default step for central differences.
pub const STEP: f64 = 1e-6;

/// Pass threshold on [`rel_error`].
pub const TOLERANCE: f64 = 1e-5;

/// `max_i |a_i - n_i| / (|a_i| + 1e-8)`.
pub fn rel_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / (a.abs() + 1e-8))
        .fold(0.0, f64::max)
}

/// Forward-only evaluation of a scalar function of one volume.
pub fn evaluate<F>(input: &ChannelVolume, f: &F) -> Result<f64>
where
    F: Fn(&mut Tape, NodeId) -> Result<NodeId>,
{
    let mut tape = Tape::new();
    let x = tape.constant(input.clone());
    let root = f(&mut tape, x)?;
    let v = tape.scalar(root);
    if !v.is_finite() {
        return Err(Error::Numeric("objective is not finite".into()));
    }
    Ok(v)
}

/// Adjoint of `f` at `input` via [`Tape::backward`].
pub fn analytic_gradient<F>(input: &ChannelVolume, f: &F) -> Result<Vec<f64>>
where
    F: Fn(&mut Tape, NodeId) -> Result<NodeId>,
{
    let mut tape = Tape::new();
    let x = tape.leaf(input.clone());
    let root = f(&mut tape, x)?;
    let mut grads = tape.backward(root)?;
    Ok(grads.take(x).expect("leaf adjoint"))
}

/// Central-difference gradient, one entry at a time.
pub fn numeric_gradient<F>(input: &ChannelVolume, h: f64, f: &F) -> Result<Vec<f64>>
where
    F: Fn(&mut Tape, NodeId) -> Result<NodeId>,
{
    let mut probe = input.clone();
    let mut out = Vec::with_capacity(input.len());
    for i in 0..input.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let plus = evaluate(&probe, f)?;
        probe.data_mut()[i] = orig - h;
        let minus = evaluate(&probe, f)?;
        probe.data_mut()[i] = orig;
        out.push((plus - minus) / (2.0 * h));
    }
    Ok(out)
}

/// Maximum relative disagreement between the tape adjoint and central
/// differences with step `h`.
pub fn check_gradient<F>(input: &ChannelVolume, h: f64, f: F) -> Result<f64>
where
    F: Fn(&mut Tape, NodeId) -> Result<NodeId>,
{
    let analytic = analytic_gradient(input, &f)?;
    let numeric = numeric_gradient(input, h, &f)?;
    Ok(rel_error(&analytic, &numeric))
}

pub mod suite;
