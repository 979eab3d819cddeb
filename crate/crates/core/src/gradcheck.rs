//! Finite-difference gradient checking for the full training objective.
//!
//! Builds the regularized batch loss of a soft-mode personalized model,
//! computes analytic gradients with the tape, and compares them against
//! central differences of the loss evaluated through the forward pass only.

use crate::autodiff::Tape;
use crate::dataset::Instance;
use crate::error::Result;
use crate::model::{regularized_loss, DynamicPersonalizedModel, RouteMode, RouteOverride};
use crate::tensor::Tensor;

/// The three trainable groups of a personalized model.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamGroup {
    Policy,
    Global,
    Local,
}

pub const ALL_GROUPS: [ParamGroup; 3] = [ParamGroup::Policy, ParamGroup::Global, ParamGroup::Local];

/// The regularized mean loss of a batch under the blended forward pass.
pub fn batch_loss(
    model: &DynamicPersonalizedModel,
    batch: &[Instance],
    gamma: f64,
) -> Result<f64> {
    assert_eq!(model.mode, RouteMode::Soft);
    let mut tape = Tape::new();
    let binding = model.bind(&mut tape);
    let mut losses = Vec::new();
    let mut r1s = Vec::new();
    for inst in batch {
        match inst {
            Instance::Sequence(tokens) => {
                assert!(tokens.len() >= 2, "gradcheck sequences need a target");
                let inputs = &tokens[..tokens.len() - 1];
                let fwd = model.forward_sequence(&mut tape, &binding, inputs, RouteOverride::Learned)?;
                for (j, &l) in fwd.step_logits.iter().enumerate() {
                    losses.push(tape.cross_entropy(l, tokens[j + 1] as usize));
                    r1s.push(fwd.step_r1[j]);
                }
            }
            Instance::Classify { features, label } => {
                let x = Tensor::vector(features.clone())?;
                let fwd = model.forward_classify(&mut tape, &binding, &x, RouteOverride::Learned);
                losses.push(tape.cross_entropy(fwd.logits, *label));
                r1s.push(fwd.r1);
            }
        }
    }
    let loss = regularized_loss(&mut tape, &losses, &r1s, gamma);
    Ok(tape.value(loss).as_scalar())
}

/// Compute analytic gradients of [`batch_loss`] into the `grad` buffers of
/// every parameter in the model. Returns the loss value.
pub fn compute_gradients(
    model: &mut DynamicPersonalizedModel,
    batch: &[Instance],
    gamma: f64,
) -> Result<f64> {
    let mut tape = Tape::new();
    let binding = model.bind(&mut tape);
    let mut losses = Vec::new();
    let mut r1s = Vec::new();
    for inst in batch {
        match inst {
            Instance::Sequence(tokens) => {
                let inputs = &tokens[..tokens.len() - 1];
                let fwd = model.forward_sequence(&mut tape, &binding, inputs, RouteOverride::Learned)?;
                for (j, &l) in fwd.step_logits.iter().enumerate() {
                    losses.push(tape.cross_entropy(l, tokens[j + 1] as usize));
                    r1s.push(fwd.step_r1[j]);
                }
            }
            Instance::Classify { features, label } => {
                let x = Tensor::vector(features.clone())?;
                let fwd = model.forward_classify(&mut tape, &binding, &x, RouteOverride::Learned);
                losses.push(tape.cross_entropy(fwd.logits, *label));
                r1s.push(fwd.r1);
            }
        }
    }
    let loss = regularized_loss(&mut tape, &losses, &r1s, gamma);
    let value = tape.value(loss).as_scalar();
    let grads = tape.backward(loss);
    model.policy.accumulate(&binding.policy, &grads);
    if let (Some(emb), Some(nodes)) = (
        model.global.embedding.as_mut(),
        binding.global.embedding.as_ref(),
    ) {
        emb.accumulate(nodes, &grads);
    }
    model.global.encoder.accumulate(&binding.global.encoder, &grads);
    model.global.decoder.accumulate(&binding.global.decoder, &grads);
    model.local.encoder.accumulate(&binding.local, &grads);
    Ok(value)
}

fn group_params(model: &DynamicPersonalizedModel, group: ParamGroup) -> Vec<&crate::autodiff::Parameter> {
    match group {
        ParamGroup::Policy => model.policy.params(),
        ParamGroup::Global => model.global.params(),
        ParamGroup::Local => model.local.encoder.params(),
    }
}

fn perturb(model: &mut DynamicPersonalizedModel, group: ParamGroup, p: usize, e: usize, by: f64) {
    let mut params = match group {
        ParamGroup::Policy => model.policy.params_mut(),
        ParamGroup::Global => model.global.params_mut(),
        ParamGroup::Local => model.local.encoder.params_mut(),
    };
    params[p].tensor.data_mut()[e] += by;
}

/// Worst guarded relative error between analytic and central-difference
/// gradients over every parameter of every group.
///
/// The guard keeps the comparison meaningful for near-zero gradients: the
/// denominator is `max(|analytic| + |numeric|, guard)`, so entries below the
/// guard are compared absolutely at the guard scale.
pub fn max_relative_error(
    model: &DynamicPersonalizedModel,
    batch: &[Instance],
    gamma: f64,
    eps: f64,
    guard: f64,
) -> Result<f64> {
    let mut with_grads = model.clone();
    compute_gradients(&mut with_grads, batch, gamma)?;

    let mut worst: f64 = 0.0;
    for group in ALL_GROUPS {
        let grads: Vec<Tensor> = group_params(&with_grads, group)
            .iter()
            .map(|p| p.grad.clone())
            .collect();
        for (p, grad) in grads.iter().enumerate() {
            for e in 0..grad.len() {
                let mut probe = model.clone();
                perturb(&mut probe, group, p, e, eps);
                let up = batch_loss(&probe, batch, gamma)?;
                perturb(&mut probe, group, p, e, -2.0 * eps);
                let down = batch_loss(&probe, batch, gamma)?;
                let numeric = (up - down) / (2.0 * eps);
                let analytic = grad.data()[e];
                let denom = (analytic.abs() + numeric.abs()).max(guard);
                worst = worst.max((analytic - numeric).abs() / denom);
            }
        }
    }
    Ok(worst)
}
