//! The selector → gate → reconstructor forward pass on a tape.

use rand::RngCore;

use crate::gating::{
    apply_gate, hard_concrete, stochastic_gate, stochastic_gate_with_noise, topm_mask, GateConfig,
};
use crate::nets::Network;
use crate::scalar::Scalar;
use crate::tensor::{Tape, Tensor, Var};

use super::TrainError;

/// Where the gate's logistic noise comes from.
pub enum GateNoise<'a, S> {
    /// No noise: the deterministic hard concrete gate.
    Off,
    /// Uniform draws taken from the generator (train-mode configs only).
    Sampled(&'a mut dyn RngCore),
    /// Explicit uniform draws, one per gated feature.
    Fixed(&'a Tensor<S>),
}

/// How the binary mask is obtained.
pub enum MaskSource<'a, S> {
    /// Top-M of the scores, with one budget per instance.
    TopM(&'a [usize]),
    /// A precomputed mask in the score layout.
    Fixed(&'a Tensor<S>),
}

/// Handles produced by one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct DdsForward {
    pub logits: Var,
    pub scores: Var,
    /// Constant binary mask, same shape as `scores`.
    pub mask: Var,
    pub gated: Var,
    pub output: Var,
}

/// Gate settings for one pass.
pub struct Gating<'a, S: Scalar> {
    pub config: &'a GateConfig<S>,
    pub noise: GateNoise<'a, S>,
    pub mask: MaskSource<'a, S>,
}

/// A network with its parameter handles on the current tape.
pub struct Bound<'a, S> {
    pub net: &'a Network<S>,
    pub params: &'a [Var],
}

/// Selector logits and gate scores, `tau(g(x_sel) + delta)`.
pub fn gate_scores<S: Scalar>(
    tape: &mut Tape<S>,
    selector: Bound<'_, S>,
    selector_input: Var,
    gate: &GateConfig<S>,
    noise: GateNoise<'_, S>,
) -> Result<(Var, Var), TrainError> {
    let logits = selector
        .net
        .forward(tape, selector.params, selector_input)?;
    let shifted = tape.add_scalar(logits, gate.delta)?;
    let scores = match noise {
        GateNoise::Off => hard_concrete(tape, shifted, gate)?,
        GateNoise::Sampled(rng) => stochastic_gate(tape, shifted, gate, Some(rng))?,
        GateNoise::Fixed(u) => stochastic_gate_with_noise(tape, shifted, u, gate)?,
    };
    Ok((logits, scores))
}

/// Records the binary mask for `scores` as a constant of the same shape.
pub fn mask_for<S: Scalar>(
    tape: &mut Tape<S>,
    scores: Var,
    source: MaskSource<'_, S>,
) -> Result<Var, TrainError> {
    let shape = tape.shape(scores).to_vec();
    let value = match source {
        MaskSource::TopM(budgets) => {
            let rows = tape
                .value(scores)
                .clone()
                .reshaped(vec![shape[0], shape[1..].iter().product()])?;
            topm_mask(&rows, budgets)?.reshaped(shape)?
        }
        MaskSource::Fixed(m) => m.clone().reshaped(shape)?,
    };
    Ok(tape.constant(value))
}

/// Runs `f(mask * tau(g(x_sel) + delta) * x)`.
///
/// `x` is the operand multiplied by the gate; `selector_input` is what the
/// selector reads. Passing a constant copy of the data as `selector_input`
/// makes the gradient with respect to `x` vanish on masked features.
pub fn dds_forward<S: Scalar>(
    tape: &mut Tape<S>,
    selector: Bound<'_, S>,
    reconstructor: Bound<'_, S>,
    x: Var,
    selector_input: Var,
    gating: Gating<'_, S>,
) -> Result<DdsForward, TrainError> {
    let (logits, scores) =
        gate_scores(tape, selector, selector_input, gating.config, gating.noise)?;
    let mask = mask_for(tape, scores, gating.mask)?;
    let gated = apply_gate(tape, x, scores, mask)?;
    let output = reconstructor
        .net
        .forward(tape, reconstructor.params, gated)?;
    Ok(DdsForward {
        logits,
        scores,
        mask,
        gated,
        output,
    })
}
