//! AdamW with decoupled weight decay, and parameter grouping.

use super::tensor::Tensor;
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// Named collection of tensors that freeze and update together.
#[derive(Clone, Debug)]
pub struct ParamGroup {
    /// Dotted path, e.g. `student.state_encoder`.
    pub name: String,
    /// Per-tensor sub-names aligned with `tensors` (used by checkpoints).
    pub tensor_names: Vec<String>,
    pub tensors: Vec<Tensor<f32>>,
    pub trainable: bool,
}

impl ParamGroup {
    pub fn new(name: &str) -> Self {
        ParamGroup {
            name: name.to_string(),
            tensor_names: Vec::new(),
            tensors: Vec::new(),
            trainable: true,
        }
    }

    pub fn push(&mut self, sub: &str, t: Tensor<f32>) {
        self.tensor_names.push(format!("{}.{}", self.name, sub));
        self.tensors.push(t);
    }

    pub fn num_params(&self) -> usize {
        self.tensors.iter().map(|t| t.numel()).sum()
    }
}

/// Ordered set of parameter groups with unique names.
#[derive(Clone, Debug, Default)]
pub struct ParamSet {
    pub groups: Vec<ParamGroup>,
}

impl ParamSet {
    pub fn add(&mut self, group: ParamGroup) -> Result<()> {
        if self.groups.iter().any(|g| g.name == group.name) {
            return Err(Error::config(
                "params",
                format!("duplicate parameter group `{}`", group.name),
            ));
        }
        self.groups.push(group);
        Ok(())
    }

    pub fn group(&self, name: &str) -> Option<&ParamGroup> {
        self.groups.iter().find(|g| g.name == name)
    }

    pub fn group_mut(&mut self, name: &str) -> Option<&mut ParamGroup> {
        self.groups.iter_mut().find(|g| g.name == name)
    }

    pub fn num_params(&self) -> usize {
        self.groups.iter().map(|g| g.num_params()).sum()
    }

    pub fn num_trainable(&self) -> usize {
        self.groups
            .iter()
            .filter(|g| g.trainable)
            .map(|g| g.num_params())
            .sum()
    }

    /// Set trainable flags: groups whose name ends with one of `trainable`
    /// become trainable, everything else freezes.
    pub fn set_trainable_by_suffix(&mut self, trainable: &[&str]) {
        for g in self.groups.iter_mut() {
            g.trainable = trainable
                .iter()
                .any(|t| g.name == *t || g.name.ends_with(&format!(".{t}")));
        }
    }

    /// Flat snapshot of all tensor bits, used for freeze checks.
    pub fn snapshot_bits(&self) -> Vec<Vec<u32>> {
        self.groups
            .iter()
            .flat_map(|g| {
                g.tensors
                    .iter()
                    .map(|t| t.data().iter().map(|v| v.to_bits()).collect())
            })
            .collect()
    }
}

/// Gradient accumulation buffers mirroring a [`ParamSet`].
pub struct GradBuffer {
    /// grads[group][tensor] aligned with the set.
    pub grads: Vec<Vec<Vec<f32>>>,
    /// Number of samples accumulated since the last reset.
    pub samples: usize,
}

impl GradBuffer {
    pub fn zeros_like(set: &ParamSet) -> Self {
        GradBuffer {
            grads: set
                .groups
                .iter()
                .map(|g| g.tensors.iter().map(|t| vec![0.0; t.numel()]).collect())
                .collect(),
            samples: 0,
        }
    }

    pub fn reset(&mut self) {
        for g in self.grads.iter_mut() {
            for t in g.iter_mut() {
                t.iter_mut().for_each(|v| *v = 0.0);
            }
        }
        self.samples = 0;
    }

    /// Add another buffer in place (fixed order merge).
    pub fn merge(&mut self, other: &GradBuffer) {
        for (g, og) in self.grads.iter_mut().zip(other.grads.iter()) {
            for (t, ot) in g.iter_mut().zip(og.iter()) {
                for (v, ov) in t.iter_mut().zip(ot.iter()) {
                    *v += ov;
                }
            }
        }
        self.samples += other.samples;
    }
}

/// AdamW hyperparameters and moment state.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub weight_decay: f32,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// Optimizer state: first/second moments per tensor plus a step count.
pub struct AdamWState {
    pub step: u64,
    pub config: AdamWConfig,
    /// m[group][tensor] mirroring the ParamSet.
    m: Vec<Vec<Vec<f32>>>,
    v: Vec<Vec<Vec<f32>>>,
}

impl AdamWState {
    pub fn new(set: &ParamSet, config: AdamWConfig) -> Self {
        let zeros: Vec<Vec<Vec<f32>>> = set
            .groups
            .iter()
            .map(|g| g.tensors.iter().map(|t| vec![0.0; t.numel()]).collect())
            .collect();
        AdamWState {
            step: 0,
            config,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// One decoupled-weight-decay Adam step over all trainable groups.
    ///
    /// `grads` must hold mean gradients aligned with `set`. A NaN gradient
    /// on any trainable tensor rejects the whole step and leaves both the
    /// parameters and this state untouched.
    pub fn step(&mut self, set: &mut ParamSet, grads: &GradBuffer, lr: f32) -> Result<()> {
        if lr < 0.0 || !lr.is_finite() {
            return Err(Error::Optimizer(format!("invalid learning rate {lr}")));
        }
        for (gi, group) in set.groups.iter().enumerate() {
            if !group.trainable {
                continue;
            }
            for (ti, _) in group.tensors.iter().enumerate() {
                if grads.grads[gi][ti].iter().any(|v| !v.is_finite()) {
                    return Err(Error::Optimizer(format!(
                        "non-finite gradient on `{}`",
                        group.tensor_names[ti]
                    )));
                }
            }
        }
        self.step += 1;
        let t = self.step as f64;
        let c = &self.config;
        let bc1 = 1.0 - (c.beta1 as f64).powi(t as i32);
        let bc2 = 1.0 - (c.beta2 as f64).powi(t as i32);
        for (gi, group) in set.groups.iter_mut().enumerate() {
            if !group.trainable {
                continue;
            }
            for (ti, tensor) in group.tensors.iter_mut().enumerate() {
                let g = &grads.grads[gi][ti];
                let m = &mut self.m[gi][ti];
                let v = &mut self.v[gi][ti];
                let data = tensor.data_mut();
                for i in 0..data.len() {
                    m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g[i];
                    v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g[i] * g[i];
                    let mhat = m[i] / bc1 as f32;
                    let vhat = v[i] / bc2 as f32;
                    // decoupled decay, independent of the moment update
                    data[i] -= lr * c.weight_decay * data[i];
                    data[i] -= lr * mhat / (vhat.sqrt() + c.eps);
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single_param_set(value: f32) -> ParamSet {
        let mut set = ParamSet::default();
        let mut g = ParamGroup::new("p");
        g.push("w", Tensor::from_vec(vec![1], vec![value]).unwrap());
        set.add(g).unwrap();
        set
    }

    #[test]
    fn decay_only_update() {
        let mut set = single_param_set(1.0);
        let mut state = AdamWState::new(
            &set,
            AdamWConfig {
                weight_decay: 0.1,
                ..Default::default()
            },
        );
        let grads = GradBuffer::zeros_like(&set);
        state.step(&mut set, &grads, 0.01).unwrap();
        let p = set.groups[0].tensors[0].data()[0];
        assert!((p - 0.999).abs() < 1e-7);
        assert_eq!(state.step, 1);
    }

    #[test]
    fn zero_grad_zero_decay_is_identity() {
        let mut set = single_param_set(0.37);
        let mut state = AdamWState::new(
            &set,
            AdamWConfig {
                weight_decay: 0.0,
                ..Default::default()
            },
        );
        let grads = GradBuffer::zeros_like(&set);
        state.step(&mut set, &grads, 0.01).unwrap();
        assert_eq!(set.groups[0].tensors[0].data()[0], 0.37);
    }

    #[test]
    fn first_step_magnitude_is_lr_signed() {
        // With eps -> 0, the first update is exactly lr * sign(g).
        let mut set = single_param_set(0.0);
        let mut state = AdamWState::new(
            &set,
            AdamWConfig {
                weight_decay: 0.0,
                eps: 0.0,
                ..Default::default()
            },
        );
        let mut grads = GradBuffer::zeros_like(&set);
        grads.grads[0][0][0] = -3.2;
        grads.samples = 1;
        state.step(&mut set, &grads, 0.01).unwrap();
        let p = set.groups[0].tensors[0].data()[0];
        assert!((p - 0.01).abs() < 1e-6);
    }

    #[test]
    fn nan_grad_rejected_state_unchanged() {
        let mut set = single_param_set(1.0);
        let mut state = AdamWState::new(&set, AdamWConfig::default());
        let mut grads = GradBuffer::zeros_like(&set);
        grads.grads[0][0][0] = f32::NAN;
        let err = state.step(&mut set, &grads, 0.01);
        assert!(err.is_err());
        assert_eq!(state.step, 0);
        assert_eq!(set.groups[0].tensors[0].data()[0], 1.0);
    }

    #[test]
    fn frozen_group_is_bit_identical_after_steps() {
        let mut set = single_param_set(1.25);
        set.groups[0].trainable = false;
        let before = set.snapshot_bits();
        let mut state = AdamWState::new(&set, AdamWConfig::default());
        let mut grads = GradBuffer::zeros_like(&set);
        grads.grads[0][0][0] = 5.0;
        for _ in 0..10 {
            state.step(&mut set, &grads, 0.1).unwrap();
        }
        assert_eq!(set.snapshot_bits(), before);
    }
}
