//! Affine coupling flows with a residual self-attention block.
//!
//! Each layer keeps the first half of the channels and maps the second half
//! through `x2 * exp(s) + t`, where `(s, t)` are computed from the first half
//! by a pointwise projection, a single-head attention block over time with a
//! residual connection, a kernel-3 convolution and a zero-initialized
//! projection. Layers in a [`FlowStack`] are separated by a channel flip.

use alloc::vec::Vec;

use crate::error::{contract, Result};
use crate::numerics::nn::{ChannelNorm, Conv1d, Linear};
use crate::numerics::{ParamId, ParamStore, Rng, Tape, Tensor, Var};

/// Bound on the log-scale before exponentiation.
pub const LOG_SCALE_LIMIT: f64 = 8.0;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CouplingConfig {
    /// Total channel count; must be even.
    pub channels: usize,
    pub hidden: usize,
    pub key_width: usize,
    pub kernel: usize,
    /// Width of an optional global conditioning vector.
    pub condition_width: Option<usize>,
    /// Whether the attention block is present at all.
    pub attention: bool,
}

impl Default for CouplingConfig {
    fn default() -> Self {
        Self {
            channels: 4,
            hidden: 16,
            key_width: 8,
            kernel: 3,
            condition_width: None,
            attention: true,
        }
    }
}

#[derive(Clone, Debug)]
struct AttentionBlock {
    norm: ChannelNorm,
    query: Linear,
    key: Linear,
    value: Linear,
    output: Linear,
}

#[derive(Clone, Debug)]
pub struct CouplingLayer {
    config: CouplingConfig,
    pre: Linear,
    condition: Option<Linear>,
    attention: Option<AttentionBlock>,
    conv: Conv1d,
    head: Linear,
    /// Multiplier on the attention branch before the residual add.
    pub attention_scale: f64,
}

/// Intermediate results of the `(s, t)` network.
struct Coefficients {
    log_scale: Var,
    shift: Var,
    attention: Option<Var>,
}

impl CouplingLayer {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        config: CouplingConfig,
        rng: &mut Rng,
    ) -> Result<Self> {
        if !config.channels.is_multiple_of(2) || config.channels == 0 {
            return Err(contract(alloc::format!(
                "coupling layers need an even channel count, got {}",
                config.channels
            )));
        }
        let half = config.channels / 2;
        let h = config.hidden;
        let pre = Linear::new(store, &alloc::format!("{name}.pre"), half, h, rng);
        let condition = config
            .condition_width
            .map(|w| Linear::new(store, &alloc::format!("{name}.cond"), w, h, rng));
        let attention = config.attention.then(|| AttentionBlock {
            norm: ChannelNorm::new(store, &alloc::format!("{name}.attn.norm"), h),
            query: Linear::new(
                store,
                &alloc::format!("{name}.attn.query"),
                h,
                config.key_width,
                rng,
            ),
            key: Linear::new(
                store,
                &alloc::format!("{name}.attn.key"),
                h,
                config.key_width,
                rng,
            ),
            value: Linear::new(store, &alloc::format!("{name}.attn.value"), h, h, rng),
            output: Linear::new(store, &alloc::format!("{name}.attn.output"), h, h, rng),
        });
        let conv = Conv1d::new(
            store,
            &alloc::format!("{name}.conv"),
            h,
            h,
            config.kernel,
            rng,
        );
        let head = Linear::zeroed(store, &alloc::format!("{name}.head"), h, config.channels);
        Ok(Self {
            config,
            pre,
            condition,
            attention,
            conv,
            head,
            attention_scale: 1.0,
        })
    }

    pub fn config(&self) -> &CouplingConfig {
        &self.config
    }

    pub fn has_attention(&self) -> bool {
        self.attention.is_some()
    }

    /// Projection producing `(s, t)`; rows `0..C/2` are `s`, the rest `t`.
    pub fn head(&self) -> &Linear {
        &self.head
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut ids = self.pre.params();
        if let Some(c) = &self.condition {
            ids.extend(c.params());
        }
        if let Some(a) = &self.attention {
            for part in [&a.query, &a.key, &a.value, &a.output] {
                ids.extend(part.params());
            }
            ids.extend(a.norm.params());
        }
        ids.extend(self.conv.params());
        ids.extend(self.head.params());
        ids
    }

    fn check_input(&self, tape: &Tape<'_>, x: Var) -> Result<()> {
        let shape = tape.shape(x);
        if shape.len() != 2 || shape[0] != self.config.channels {
            return Err(contract(alloc::format!(
                "coupling layer expects ({}, T) input, got {:?}",
                self.config.channels,
                shape
            )));
        }
        Ok(())
    }

    fn coefficients(
        &self,
        tape: &mut Tape<'_>,
        kept: Var,
        condition: Option<Var>,
    ) -> Result<Coefficients> {
        let mut h = self.pre.forward(tape, kept)?;
        match (&self.condition, condition) {
            (Some(proj), Some(g)) => {
                let g = proj.forward(tape, g)?;
                let width = tape.shape(g)[0];
                let g = tape.reshape(g, &[width])?;
                h = tape.add_bias(h, g)?;
            }
            (None, None) | (Some(_), None) => {}
            (None, Some(_)) => return Err(contract("layer was built without a condition input")),
        }
        let mut attention = None;
        if let Some(block) = &self.attention {
            let n = block.norm.forward(tape, h)?;
            let q = block.query.forward(tape, n)?;
            let k = block.key.forward(tape, n)?;
            let v = block.value.forward(tape, n)?;
            let qt = tape.transpose(q)?;
            let scores = tape.matmul(qt, k)?;
            let scores = tape.scale(scores, 1.0 / libm::sqrt(self.config.key_width as f64))?;
            let weights = tape.softmax(scores, 1)?;
            let wt = tape.transpose(weights)?;
            let mixed = tape.matmul(v, wt)?;
            let out = block.output.forward(tape, mixed)?;
            let out = tape.scale(out, self.attention_scale)?;
            h = tape.add(h, out)?;
            attention = Some(weights);
        }
        let c = self.conv.forward(tape, h)?;
        let c = tape.relu(c)?;
        let st = self.head.forward(tape, c)?;
        let half = self.config.channels / 2;
        let s = tape.rows(st, 0, half)?;
        let log_scale = tape.clamp(s, -LOG_SCALE_LIMIT, LOG_SCALE_LIMIT)?;
        let shift = tape.rows(st, half, 2 * half)?;
        Ok(Coefficients {
            log_scale,
            shift,
            attention,
        })
    }

    /// Differentiable forward map; returns `(y, logdet)`.
    pub fn forward_on(
        &self,
        tape: &mut Tape<'_>,
        x: Var,
        condition: Option<Var>,
    ) -> Result<(Var, Var)> {
        self.check_input(tape, x)?;
        let half = self.config.channels / 2;
        let kept = tape.rows(x, 0, half)?;
        let moved = tape.rows(x, half, 2 * half)?;
        let co = self.coefficients(tape, kept, condition)?;
        let scale = tape.exp(co.log_scale)?;
        let y2 = tape.mul(moved, scale)?;
        let y2 = tape.add(y2, co.shift)?;
        let y = tape.concat_rows(kept, y2)?;
        let logdet = tape.sum(co.log_scale)?;
        Ok((y, logdet))
    }

    /// Exact inverse: `x2 = (y2 - t) * exp(-s)`.
    pub fn inverse_on(&self, tape: &mut Tape<'_>, y: Var, condition: Option<Var>) -> Result<Var> {
        self.check_input(tape, y)?;
        let half = self.config.channels / 2;
        let kept = tape.rows(y, 0, half)?;
        let moved = tape.rows(y, half, 2 * half)?;
        let co = self.coefficients(tape, kept, condition)?;
        let neg = tape.scale(co.log_scale, -1.0)?;
        let inv_scale = tape.exp(neg)?;
        let centred = tape.sub(moved, co.shift)?;
        let x2 = tape.mul(centred, inv_scale)?;
        tape.concat_rows(kept, x2)
    }
}

/// Evaluates a layer outside any training tape.
pub fn coupling_forward(
    layer: &CouplingLayer,
    store: &ParamStore,
    x: &Tensor,
    condition: Option<&Tensor>,
) -> Result<(Tensor, f64)> {
    let mut tape = Tape::with_params(store);
    let xv = tape.constant(x.clone());
    let cv = condition.map(|c| tape.constant(c.clone()));
    let (y, ld) = layer.forward_on(&mut tape, xv, cv)?;
    Ok((tape.value(y).clone(), tape.value(ld).item()?))
}

pub fn coupling_inverse(
    layer: &CouplingLayer,
    store: &ParamStore,
    y: &Tensor,
    condition: Option<&Tensor>,
) -> Result<Tensor> {
    let mut tape = Tape::with_params(store);
    let yv = tape.constant(y.clone());
    let cv = condition.map(|c| tape.constant(c.clone()));
    let x = layer.inverse_on(&mut tape, yv, cv)?;
    Ok(tape.value(x).clone())
}

/// The `(T, T)` row-stochastic attention matrix a layer applies to `x`,
/// rows indexing queries. `None` for layers without attention.
pub fn extract_attention(
    layer: &CouplingLayer,
    store: &ParamStore,
    x: &Tensor,
    condition: Option<&Tensor>,
) -> Result<Option<Tensor>> {
    let mut tape = Tape::with_params(store);
    let xv = tape.constant(x.clone());
    layer.check_input(&tape, xv)?;
    let cv = condition.map(|c| tape.constant(c.clone()));
    let kept = tape.rows(xv, 0, layer.config.channels / 2)?;
    let co = layer.coefficients(&mut tape, kept, cv)?;
    Ok(co.attention.map(|a| tape.value(a).clone()))
}

fn flip_matrix(channels: usize) -> Tensor {
    let mut t = Tensor::zeros(&[channels, channels]);
    for c in 0..channels {
        t.data_mut()[c * channels + (channels - 1 - c)] = 1.0;
    }
    t
}

/// Coupling layers, each followed by a reversal of the channel order.
#[derive(Clone, Debug)]
pub struct FlowStack {
    layers: Vec<CouplingLayer>,
}

impl FlowStack {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        depth: usize,
        config: CouplingConfig,
        rng: &mut Rng,
    ) -> Result<Self> {
        if depth < 2 {
            return Err(contract("a flow stack needs at least two layers"));
        }
        let layers = (0..depth)
            .map(|k| CouplingLayer::new(store, &alloc::format!("{name}.{k}"), config, rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { layers })
    }

    pub fn layers(&self) -> &[CouplingLayer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [CouplingLayer] {
        &mut self.layers
    }

    pub fn channels(&self) -> usize {
        self.layers[0].config.channels
    }

    pub fn params(&self) -> Vec<ParamId> {
        self.layers.iter().flat_map(CouplingLayer::params).collect()
    }

    /// Differentiable forward map; returns `(z, per-layer logdets)`.
    pub fn forward_on(
        &self,
        tape: &mut Tape<'_>,
        x: Var,
        condition: Option<Var>,
    ) -> Result<(Var, Vec<Var>)> {
        let flip = tape.constant(flip_matrix(self.channels()));
        let mut h = x;
        let mut logdets = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let (y, ld) = layer.forward_on(tape, h, condition)?;
            h = tape.matmul(flip, y)?;
            logdets.push(ld);
        }
        Ok((h, logdets))
    }

    pub fn inverse_on(&self, tape: &mut Tape<'_>, z: Var, condition: Option<Var>) -> Result<Var> {
        let flip = tape.constant(flip_matrix(self.channels()));
        let mut h = z;
        for layer in self.layers.iter().rev() {
            let y = tape.matmul(flip, h)?;
            h = layer.inverse_on(tape, y, condition)?;
        }
        Ok(h)
    }

    /// Sums per-layer logdets on the tape, first layer first.
    pub fn total_logdet(tape: &mut Tape<'_>, logdets: &[Var]) -> Result<Var> {
        let mut total = logdets[0];
        for ld in &logdets[1..] {
            total = tape.add(total, *ld)?;
        }
        Ok(total)
    }
}

/// Returns `(z, total logdet, per-layer logdets)`.
pub fn stack_forward(
    stack: &FlowStack,
    store: &ParamStore,
    x: &Tensor,
    condition: Option<&Tensor>,
) -> Result<(Tensor, f64, Vec<f64>)> {
    let mut tape = Tape::with_params(store);
    let xv = tape.constant(x.clone());
    let cv = condition.map(|c| tape.constant(c.clone()));
    let (z, lds) = stack.forward_on(&mut tape, xv, cv)?;
    let per_layer = lds
        .iter()
        .map(|v| tape.value(*v).item())
        .collect::<Result<Vec<_>>>()?;
    let total = per_layer.iter().sum();
    Ok((tape.value(z).clone(), total, per_layer))
}

pub fn stack_inverse(
    stack: &FlowStack,
    store: &ParamStore,
    z: &Tensor,
    condition: Option<&Tensor>,
) -> Result<Tensor> {
    let mut tape = Tape::with_params(store);
    let zv = tape.constant(z.clone());
    let cv = condition.map(|c| tape.constant(c.clone()));
    let x = stack.inverse_on(&mut tape, zv, cv)?;
    Ok(tape.value(x).clone())
}

/// Attention map of every layer, each evaluated on that layer's own input.
pub fn stack_attention(
    stack: &FlowStack,
    store: &ParamStore,
    x: &Tensor,
    condition: Option<&Tensor>,
) -> Result<Vec<Option<Tensor>>> {
    let flip = flip_matrix(stack.channels());
    let mut h = x.clone();
    let mut maps = Vec::with_capacity(stack.layers.len());
    for layer in &stack.layers {
        maps.push(extract_attention(layer, store, &h, condition)?);
        let (y, _) = coupling_forward(layer, store, &h, condition)?;
        let mut tape = Tape::new();
        let f = tape.constant(flip.clone());
        let yv = tape.constant(y);
        let out = tape.matmul(f, yv)?;
        h = tape.value(out).clone();
    }
    Ok(maps)
}

/// Half-width of the window the post-attention convolution sees, in frames.
pub fn conv_receptive_radius(layer: &CouplingLayer) -> usize {
    (layer.config.kernel - 1) / 2
}

/// Standard-normal log density of `z` plus the flow logdet: `log p(x)`.
pub fn log_likelihood(z: &Tensor, logdet: f64) -> f64 {
    const HALF_LOG_2PI: f64 = 0.918_938_533_204_672_7;
    z.data()
        .iter()
        .map(|v| -HALF_LOG_2PI - 0.5 * v * v)
        .sum::<f64>()
        + logdet
}

/// Fills the `(s, t)` projection with uniform noise so a layer is no
/// longer the identity.
pub fn randomize_head(layer: &CouplingLayer, store: &mut ParamStore, bound: f64, rng: &mut Rng) {
    for id in layer.head.params() {
        let n = store.get(id).len();
        let vals: Vec<f64> = (0..n).map(|_| rng.uniform_range(-bound, bound)).collect();
        store.set(id, &vals).expect("same length");
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn layer(config: CouplingConfig, seed: u64) -> (ParamStore, CouplingLayer) {
        let mut store = ParamStore::new();
        let mut rng = Rng::new(seed);
        let l = CouplingLayer::new(&mut store, "l", config, &mut rng).unwrap();
        (store, l)
    }

    #[test]
    fn odd_channels_rejected() {
        let mut store = ParamStore::new();
        let cfg = CouplingConfig {
            channels: 3,
            ..CouplingConfig::default()
        };
        assert!(CouplingLayer::new(&mut store, "l", cfg, &mut Rng::new(0)).is_err());
    }

    #[test]
    fn zero_head_is_identity() {
        let (store, l) = layer(CouplingConfig::default(), 1);
        let x = Tensor::standard_normal(&[4, 6], &mut Rng::new(2));
        let (y, ld) = coupling_forward(&l, &store, &x, None).unwrap();
        assert_eq!(y, x);
        assert_eq!(ld, 0.0);
        assert_eq!(coupling_inverse(&l, &store, &x, None).unwrap(), x);
    }

    #[test]
    fn forced_affine_coefficients() {
        let cfg = CouplingConfig {
            channels: 2,
            ..CouplingConfig::default()
        };
        let (mut store, l) = layer(cfg, 3);
        store
            .set(l.head().bias, &[core::f64::consts::LN_2, 3.0])
            .unwrap();
        let x = Tensor::new(&[2, 1], vec![0.7, -1.25]).unwrap();
        let (y, ld) = coupling_forward(&l, &store, &x, None).unwrap();
        assert_eq!(y.data()[0], 0.7);
        assert!((y.data()[1] - (2.0 * -1.25 + 3.0)).abs() < 1e-15);
        assert_eq!(ld, core::f64::consts::LN_2);
        let back = coupling_inverse(&l, &store, &y, None).unwrap();
        assert!((back.data()[1] + 1.25).abs() < 1e-15);
    }

    #[test]
    fn single_position_attends_to_itself() {
        let (store, l) = layer(CouplingConfig::default(), 4);
        let x = Tensor::standard_normal(&[4, 1], &mut Rng::new(5));
        let a = extract_attention(&l, &store, &x, None).unwrap().unwrap();
        assert_eq!(a.data(), &[1.0]);
    }

    #[test]
    fn zero_query_and_key_give_uniform_rows() {
        let (mut store, l) = layer(CouplingConfig::default(), 6);
        let block = l.attention.as_ref().unwrap();
        for id in block.query.params().into_iter().chain(block.key.params()) {
            store.fill(id, 0.0);
        }
        let x = Tensor::standard_normal(&[4, 5], &mut Rng::new(7));
        let a = extract_attention(&l, &store, &x, None).unwrap().unwrap();
        for v in a.data() {
            assert!((v - 0.2).abs() < 1e-15);
        }
    }

    #[test]
    fn stack_of_identities_only_flips() {
        let mut store = ParamStore::new();
        let stack = FlowStack::new(
            &mut store,
            "f",
            3,
            CouplingConfig::default(),
            &mut Rng::new(8),
        )
        .unwrap();
        let x = Tensor::standard_normal(&[4, 3], &mut Rng::new(9));
        let (z, ld, _) = stack_forward(&stack, &store, &x, None).unwrap();
        assert_eq!(ld, 0.0);
        // odd number of flips reverses the channels
        for c in 0..4 {
            for t in 0..3 {
                assert_eq!(z.at(c, t), x.at(3 - c, t));
            }
        }
    }

    #[test]
    fn shallow_stack_rejected() {
        let mut store = ParamStore::new();
        assert!(FlowStack::new(
            &mut store,
            "f",
            1,
            CouplingConfig::default(),
            &mut Rng::new(0)
        )
        .is_err());
    }
}
