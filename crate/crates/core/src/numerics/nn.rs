//! Parameterized building blocks over `(channels, length)` activations.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::Result;
use crate::numerics::params::{ParamId, ParamStore};
use crate::numerics::rng::Rng;
use crate::numerics::tape::{Tape, Var};
use crate::numerics::tensor::Tensor;

pub const NORM_EPS: f64 = 1e-5;

/// Position-wise affine map `W x + b`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        output: usize,
        rng: &mut Rng,
    ) -> Self {
        let weight = store.add_uniform(
            &alloc::format!("{name}.weight"),
            &[output, input],
            input,
            rng,
        );
        let bias = store.add_uniform(&alloc::format!("{name}.bias"), &[output], input, rng);
        Self { weight, bias }
    }

    /// Starts as the zero map.
    pub fn zeroed(store: &mut ParamStore, name: &str, input: usize, output: usize) -> Self {
        let weight = store.add(
            &alloc::format!("{name}.weight"),
            Tensor::zeros(&[output, input]),
        );
        let bias = store.add(&alloc::format!("{name}.bias"), Tensor::zeros(&[output]));
        Self { weight, bias }
    }

    pub fn forward(&self, tape: &mut Tape<'_>, x: Var) -> Result<Var> {
        let w = tape.param(self.weight)?;
        let b = tape.param(self.bias)?;
        let y = tape.matmul(w, x)?;
        tape.add_bias(y, b)
    }

    pub fn params(&self) -> Vec<ParamId> {
        vec![self.weight, self.bias]
    }
}

#[derive(Clone, Debug)]
pub struct Conv1d {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Conv1d {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        output: usize,
        kernel: usize,
        rng: &mut Rng,
    ) -> Self {
        let fan_in = input * kernel;
        let weight = store.add_uniform(
            &alloc::format!("{name}.weight"),
            &[output, input, kernel],
            fan_in,
            rng,
        );
        let bias = store.add_uniform(&alloc::format!("{name}.bias"), &[output], fan_in, rng);
        Self { weight, bias }
    }

    pub fn forward(&self, tape: &mut Tape<'_>, x: Var) -> Result<Var> {
        let w = tape.param(self.weight)?;
        let b = tape.param(self.bias)?;
        tape.conv1d(x, w, Some(b))
    }

    pub fn params(&self) -> Vec<ParamId> {
        vec![self.weight, self.bias]
    }
}

/// Layer norm over channels with learnable gain and shift.
#[derive(Clone, Debug)]
pub struct ChannelNorm {
    pub gain: ParamId,
    pub shift: ParamId,
}

impl ChannelNorm {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Self {
        let gain = store.add(
            &alloc::format!("{name}.gain"),
            Tensor::full(&[channels], 1.0),
        );
        let shift = store.add(&alloc::format!("{name}.shift"), Tensor::zeros(&[channels]));
        Self { gain, shift }
    }

    pub fn forward(&self, tape: &mut Tape<'_>, x: Var) -> Result<Var> {
        let g = tape.param(self.gain)?;
        let b = tape.param(self.shift)?;
        let n = tape.layer_norm(x, 0, NORM_EPS)?;
        let n = tape.scale_rows(n, g)?;
        tape.add_bias(n, b)
    }

    pub fn params(&self) -> Vec<ParamId> {
        vec![self.gain, self.shift]
    }
}

/// A `(1, len)` row of 0/1 validity flags, repeated over `channels` rows.
pub fn mask_rows(mask: &[bool], channels: usize) -> Tensor {
    let row: Vec<f64> = mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect();
    let mut data = Vec::with_capacity(row.len() * channels);
    for _ in 0..channels {
        data.extend_from_slice(&row);
    }
    Tensor::new(&[channels, mask.len()], data).expect("mask shape")
}

/// Zeroes the columns of `x (C, T)` where `mask` is false.
pub fn apply_mask(tape: &mut Tape<'_>, x: Var, mask: &[bool]) -> Result<Var> {
    if mask.iter().all(|m| *m) {
        return Ok(x);
    }
    let c = tape.shape(x)[0];
    let m = tape.constant(mask_rows(mask, c));
    tape.mul(x, m)
}
