//! Stochastic duration generator, time-step-wise discriminator and the
//! least-squares adversarial training loop.
//!
//! Durations are handled in log scale throughout. Every instance is a
//! `(H, I)` block of token features with a validity mask over its `I`
//! columns; losses are means over all valid positions of a batch.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{contract, Error, Result};
use crate::numerics::nn::{apply_mask, ChannelNorm, Conv1d, Linear};
use crate::numerics::{AdamW, AdamWConfig, ParamId, ParamStore, Rng, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DurationConfig {
    /// Width of `h_text`.
    pub text_width: usize,
    /// Width of `z_d`; zero gives the deterministic predictor.
    pub noise_width: usize,
    pub filters: usize,
    pub kernel: usize,
    /// Width of an optional speaker vector added to `h_text`.
    pub condition_width: Option<usize>,
}

impl Default for DurationConfig {
    fn default() -> Self {
        Self {
            text_width: 32,
            noise_width: 2,
            filters: 32,
            kernel: 3,
            condition_width: None,
        }
    }
}

/// Two masked conv layers with relu and channel norm, then a pointwise head.
#[derive(Clone, Debug)]
struct ConvBody {
    conv1: Conv1d,
    norm1: ChannelNorm,
    conv2: Conv1d,
    norm2: ChannelNorm,
    head: Linear,
}

impl ConvBody {
    fn new(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        filters: usize,
        kernel: usize,
        rng: &mut Rng,
    ) -> Self {
        Self {
            conv1: Conv1d::new(store, &format!("{name}.conv1"), input, filters, kernel, rng),
            norm1: ChannelNorm::new(store, &format!("{name}.norm1"), filters),
            conv2: Conv1d::new(
                store,
                &format!("{name}.conv2"),
                filters,
                filters,
                kernel,
                rng,
            ),
            norm2: ChannelNorm::new(store, &format!("{name}.norm2"), filters),
            head: Linear::new(store, &format!("{name}.head"), filters, 1, rng),
        }
    }

    fn params(&self) -> Vec<ParamId> {
        let mut ids = self.conv1.params();
        ids.extend(self.norm1.params());
        ids.extend(self.conv2.params());
        ids.extend(self.norm2.params());
        ids.extend(self.head.params());
        ids
    }

    fn forward(&self, tape: &mut Tape<'_>, x: Var, mask: &[bool]) -> Result<Var> {
        let x = apply_mask(tape, x, mask)?;
        let h = self.conv1.forward(tape, x)?;
        let h = tape.relu(h)?;
        let h = self.norm1.forward(tape, h)?;
        let h = apply_mask(tape, h, mask)?;
        let h = self.conv2.forward(tape, h)?;
        let h = tape.relu(h)?;
        let h = self.norm2.forward(tape, h)?;
        let h = apply_mask(tape, h, mask)?;
        let out = self.head.forward(tape, h)?;
        apply_mask(tape, out, mask)
    }
}

/// `G(z_d, h_text)`: one log duration per token.
#[derive(Clone, Debug)]
pub struct DurationGenerator {
    config: DurationConfig,
    condition: Option<Linear>,
    body: ConvBody,
}

impl DurationGenerator {
    pub fn new(store: &mut ParamStore, name: &str, config: DurationConfig, rng: &mut Rng) -> Self {
        let condition = config
            .condition_width
            .map(|w| Linear::new(store, &format!("{name}.cond"), w, config.text_width, rng));
        let input = config.text_width + config.noise_width;
        let body = ConvBody::new(store, name, input, config.filters, config.kernel, rng);
        Self {
            config,
            condition,
            body,
        }
    }

    pub fn config(&self) -> &DurationConfig {
        &self.config
    }

    pub fn is_stochastic(&self) -> bool {
        self.config.noise_width > 0
    }

    /// The pointwise output projection.
    pub fn head(&self) -> &Linear {
        &self.body.head
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut ids = self
            .condition
            .as_ref()
            .map(Linear::params)
            .unwrap_or_default();
        ids.extend(self.body.params());
        ids
    }

    /// `h_text (H, I)`, `z_d (Z, I)` (absent when `Z = 0`), optional
    /// `(E, 1)` condition; returns `(1, I)` masked log durations.
    pub fn forward(
        &self,
        tape: &mut Tape<'_>,
        h_text: Var,
        z_d: Option<Var>,
        condition: Option<Var>,
        mask: &[bool],
    ) -> Result<Var> {
        check_features(
            tape,
            h_text,
            self.config.text_width,
            mask,
            "generator h_text",
        )?;
        let mut x = h_text;
        match (&self.condition, condition) {
            (Some(proj), Some(g)) => {
                let g = proj.forward(tape, g)?;
                let g = tape.reshape(g, &[self.config.text_width])?;
                x = tape.add_bias(x, g)?;
            }
            (_, None) => {}
            (None, Some(_)) => {
                return Err(contract("generator was built without a condition input"))
            }
        }
        match (self.config.noise_width, z_d) {
            (0, None) => {}
            (0, Some(_)) => return Err(contract("deterministic generator takes no z_d")),
            (_, None) => return Err(contract("stochastic generator needs z_d")),
            (z, Some(noise)) => {
                let shape = tape.shape(noise);
                if shape.len() != 2 || shape[0] != z || shape[1] != mask.len() {
                    return Err(Error::ShapeMismatch {
                        op: "generator z_d",
                        lhs: tape.shape(h_text).to_vec(),
                        rhs: shape.to_vec(),
                    });
                }
                x = tape.concat_rows(x, noise)?;
            }
        }
        self.body.forward(tape, x, mask)
    }
}

/// `D(d, h_text)`: one unbounded score per token.
#[derive(Clone, Debug)]
pub struct DurationDiscriminator {
    text_width: usize,
    kernel: usize,
    body: ConvBody,
}

impl DurationDiscriminator {
    pub fn new(store: &mut ParamStore, name: &str, config: DurationConfig, rng: &mut Rng) -> Self {
        let body = ConvBody::new(
            store,
            name,
            config.text_width + 1,
            config.filters,
            config.kernel,
            rng,
        );
        Self {
            text_width: config.text_width,
            kernel: config.kernel,
            body,
        }
    }

    pub fn head(&self) -> &Linear {
        &self.body.head
    }

    pub fn params(&self) -> Vec<ParamId> {
        self.body.params()
    }

    /// Tokens that can influence the score at one position on either side.
    pub fn receptive_radius(&self) -> usize {
        2 * (self.kernel - 1).div_ceil(2)
    }

    /// `h_text (H, I)`, `d (1, I)`; returns `(1, I)` masked scores.
    pub fn forward(&self, tape: &mut Tape<'_>, h_text: Var, d: Var, mask: &[bool]) -> Result<Var> {
        check_features(tape, h_text, self.text_width, mask, "discriminator h_text")?;
        if tape.shape(d) != [1, mask.len()] {
            return Err(Error::ShapeMismatch {
                op: "discriminator durations",
                lhs: tape.shape(h_text).to_vec(),
                rhs: tape.shape(d).to_vec(),
            });
        }
        let x = tape.concat_rows(h_text, d)?;
        self.body.forward(tape, x, mask)
    }
}

fn check_features(
    tape: &Tape<'_>,
    x: Var,
    width: usize,
    mask: &[bool],
    op: &'static str,
) -> Result<()> {
    let shape = tape.shape(x);
    if shape.len() != 2 || shape[0] != width || shape[1] != mask.len() {
        return Err(Error::ShapeMismatch {
            op,
            lhs: alloc::vec![width, mask.len()],
            rhs: shape.to_vec(),
        });
    }
    Ok(())
}

/// Padded instances sharing one token length.
#[derive(Clone, Debug, PartialEq)]
pub struct DurationBatch {
    /// `(H, I)` per instance.
    pub h_text: Vec<Tensor>,
    /// Log target durations, length `I` per instance.
    pub d: Vec<Vec<f64>>,
    pub mask: Vec<Vec<bool>>,
    /// Optional `(E, 1)` speaker vector per instance.
    pub conditions: Option<Vec<Tensor>>,
}

impl DurationBatch {
    pub fn new(h_text: Vec<Tensor>, d: Vec<Vec<f64>>, mask: Vec<Vec<bool>>) -> Result<Self> {
        let batch = Self {
            h_text,
            d,
            mask,
            conditions: None,
        };
        batch.validate()?;
        Ok(batch)
    }

    /// Builds a batch from integer durations (log taken here).
    pub fn from_durations(
        h_text: Vec<Tensor>,
        durations: &[Vec<usize>],
        mask: Vec<Vec<bool>>,
    ) -> Result<Self> {
        let d = durations
            .iter()
            .zip(&mask)
            .map(|(ds, m)| {
                ds.iter()
                    .zip(m)
                    .map(|(&n, &valid)| if valid { libm::log(n as f64) } else { 0.0 })
                    .collect()
            })
            .collect();
        Self::new(h_text, d, mask)
    }

    pub fn with_conditions(mut self, conditions: Vec<Tensor>) -> Result<Self> {
        if conditions.len() != self.len() {
            return Err(contract("one condition vector per instance is required"));
        }
        self.conditions = Some(conditions);
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.h_text.len()
    }

    pub fn is_empty(&self) -> bool {
        self.h_text.is_empty()
    }

    pub fn tokens(&self) -> usize {
        self.mask.first().map_or(0, Vec::len)
    }

    pub fn valid_count(&self) -> usize {
        self.mask.iter().flatten().filter(|m| **m).count()
    }

    fn validate(&self) -> Result<()> {
        let b = self.h_text.len();
        if b == 0 || self.d.len() != b || self.mask.len() != b {
            return Err(contract(
                "batch needs matching, non-empty h_text, d and mask lists",
            ));
        }
        let i = self.mask[0].len();
        for k in 0..b {
            let shape = self.h_text[k].shape();
            if shape.len() != 2 || shape[1] != i || self.d[k].len() != i || self.mask[k].len() != i
            {
                return Err(Error::ShapeMismatch {
                    op: "duration batch",
                    lhs: alloc::vec![i],
                    rhs: shape.to_vec(),
                });
            }
            for (t, &valid) in self.mask[k].iter().enumerate() {
                let v = self.d[k][t];
                if valid && !(v.is_finite() && v >= 0.0) {
                    return Err(contract(format!(
                        "invalid log duration {v} at instance {k}, token {t}"
                    )));
                }
            }
        }
        if self.valid_count() == 0 {
            return Err(contract("batch has no valid token"));
        }
        Ok(())
    }

    fn target_row(&self, k: usize) -> Tensor {
        Tensor::new(&[1, self.tokens()], self.d[k].clone()).expect("validated length")
    }
}

/// Standard-normal `z_d`, `(Z, I)` per instance; empty for a deterministic generator.
pub fn sample_noise(gen: &DurationGenerator, batch: &DurationBatch, rng: &mut Rng) -> Vec<Tensor> {
    if !gen.is_stochastic() {
        return Vec::new();
    }
    let shape = [gen.config.noise_width, batch.tokens()];
    (0..batch.len())
        .map(|_| Tensor::standard_normal(&shape, rng))
        .collect()
}

/// Sum over valid positions of `(x - target)^2`.
fn masked_sq_sum(tape: &mut Tape<'_>, x: Var, target: f64, mask: &[bool]) -> Result<Var> {
    let diff = tape.add_scalar(x, -target)?;
    let sq = tape.mul(diff, diff)?;
    let sq = apply_mask(tape, sq, mask)?;
    tape.sum(sq)
}

fn valid_total(masks: &[Vec<bool>]) -> Result<f64> {
    let n = masks.iter().flatten().filter(|m| **m).count();
    if n == 0 {
        return Err(contract("loss over zero valid positions"));
    }
    Ok(n as f64)
}

fn sum_all(tape: &mut Tape<'_>, terms: Vec<Var>) -> Result<Var> {
    let mut it = terms.into_iter();
    let mut acc = it.next().ok_or_else(|| contract("empty batch"))?;
    for t in it {
        acc = tape.add(acc, t)?;
    }
    Ok(acc)
}

/// Discriminator objective from scores: mean of `(D(d)-1)^2 + D(d̂)^2`.
pub fn lsgan_d(
    tape: &mut Tape<'_>,
    real: &[Var],
    fake: &[Var],
    masks: &[Vec<bool>],
) -> Result<Var> {
    let mut terms = Vec::with_capacity(2 * real.len());
    for ((r, f), m) in real.iter().zip(fake).zip(masks) {
        terms.push(masked_sq_sum(tape, *r, 1.0, m)?);
        terms.push(masked_sq_sum(tape, *f, 0.0, m)?);
    }
    let total = sum_all(tape, terms)?;
    tape.scale(total, 1.0 / valid_total(masks)?)
}

/// Generator objective from scores: mean of `(D(d̂)-1)^2`.
pub fn lsgan_g(tape: &mut Tape<'_>, fake: &[Var], masks: &[Vec<bool>]) -> Result<Var> {
    let terms = fake
        .iter()
        .zip(masks)
        .map(|(f, m)| masked_sq_sum(tape, *f, 1.0, m))
        .collect::<Result<Vec<_>>>()?;
    let total = sum_all(tape, terms)?;
    tape.scale(total, 1.0 / valid_total(masks)?)
}

/// Mean squared error over valid positions.
pub fn masked_mse(
    tape: &mut Tape<'_>,
    pred: &[Var],
    target: &[Var],
    masks: &[Vec<bool>],
) -> Result<Var> {
    let mut terms = Vec::with_capacity(pred.len());
    for ((p, t), m) in pred.iter().zip(target).zip(masks) {
        let diff = tape.sub(*p, *t)?;
        terms.push(masked_sq_sum(tape, diff, 0.0, m)?);
    }
    let total = sum_all(tape, terms)?;
    tape.scale(total, 1.0 / valid_total(masks)?)
}

/// Tape handles for a whole batch.
struct BatchVars {
    h_text: Vec<Var>,
    d: Vec<Var>,
    conditions: Vec<Option<Var>>,
}

fn bind_batch(tape: &mut Tape<'_>, batch: &DurationBatch) -> BatchVars {
    let h_text = batch
        .h_text
        .iter()
        .map(|h| tape.constant(h.clone()))
        .collect();
    let d = (0..batch.len())
        .map(|k| tape.constant(batch.target_row(k)))
        .collect();
    let conditions = match &batch.conditions {
        Some(cs) => cs.iter().map(|c| Some(tape.constant(c.clone()))).collect(),
        None => alloc::vec![None; batch.len()],
    };
    BatchVars {
        h_text,
        d,
        conditions,
    }
}

fn generate_on(
    tape: &mut Tape<'_>,
    gen: &DurationGenerator,
    batch: &DurationBatch,
    vars: &BatchVars,
    z_d: &[Tensor],
) -> Result<Vec<Var>> {
    if gen.is_stochastic() && z_d.len() != batch.len() {
        return Err(contract("one z_d per instance is required"));
    }
    (0..batch.len())
        .map(|k| {
            let z = z_d.get(k).map(|z| tape.constant(z.clone()));
            gen.forward(tape, vars.h_text[k], z, vars.conditions[k], &batch.mask[k])
        })
        .collect()
}

fn scores_on(
    tape: &mut Tape<'_>,
    disc: &DurationDiscriminator,
    batch: &DurationBatch,
    h_text: &[Var],
    d: &[Var],
) -> Result<Vec<Var>> {
    (0..batch.len())
        .map(|k| disc.forward(tape, h_text[k], d[k], &batch.mask[k]))
        .collect()
}

/// `d̂` per instance as `(1, I)` tensors.
pub fn generate(
    gen: &DurationGenerator,
    store: &ParamStore,
    batch: &DurationBatch,
    z_d: &[Tensor],
) -> Result<Vec<Tensor>> {
    let mut tape = Tape::with_params(store);
    let vars = bind_batch(&mut tape, batch);
    let out = generate_on(&mut tape, gen, batch, &vars, z_d)?;
    Ok(out.into_iter().map(|v| tape.value(v).clone()).collect())
}

/// Discriminator loss with `d̂` given as plain values.
pub fn adv_loss_d(
    disc: &DurationDiscriminator,
    store: &ParamStore,
    batch: &DurationBatch,
    d_hat: &[Tensor],
) -> Result<f64> {
    let mut tape = Tape::with_params(store);
    let vars = bind_batch(&mut tape, batch);
    let fake: Vec<Var> = d_hat.iter().map(|t| tape.constant(t.clone())).collect();
    let real_scores = scores_on(&mut tape, disc, batch, &vars.h_text, &vars.d)?;
    let fake_scores = scores_on(&mut tape, disc, batch, &vars.h_text, &fake)?;
    let loss = lsgan_d(&mut tape, &real_scores, &fake_scores, &batch.mask)?;
    tape.value(loss).item()
}

pub fn adv_loss_g(
    disc: &DurationDiscriminator,
    store: &ParamStore,
    batch: &DurationBatch,
    d_hat: &[Tensor],
) -> Result<f64> {
    let mut tape = Tape::with_params(store);
    let vars = bind_batch(&mut tape, batch);
    let fake: Vec<Var> = d_hat.iter().map(|t| tape.constant(t.clone())).collect();
    let fake_scores = scores_on(&mut tape, disc, batch, &vars.h_text, &fake)?;
    let loss = lsgan_g(&mut tape, &fake_scores, &batch.mask)?;
    tape.value(loss).item()
}

pub fn mse_loss(batch: &DurationBatch, d_hat: &[Tensor]) -> Result<f64> {
    let mut tape = Tape::new();
    let vars = bind_batch(&mut tape, batch);
    let pred: Vec<Var> = d_hat.iter().map(|t| tape.constant(t.clone())).collect();
    let loss = masked_mse(&mut tape, &pred, &vars.d, &batch.mask)?;
    tape.value(loss).item()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DurationTrainConfig {
    pub steps: usize,
    pub optimizer: AdamWConfig,
    /// `false` trains the generator with the MSE term only and never
    /// evaluates the discriminator.
    pub adversarial: bool,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DurationRecord {
    pub step: usize,
    pub loss_d: f64,
    pub loss_g_adv: f64,
    pub loss_g_mse: f64,
    /// Whether each update left the other network's gradients exactly zero.
    pub isolated: bool,
}

/// Alternating LSGAN training over `corpus`, cycling through batches.
/// One pass over the corpus counts as one optimizer epoch.
pub fn train_duration(
    gen: &DurationGenerator,
    disc: &DurationDiscriminator,
    store: &mut ParamStore,
    corpus: &[DurationBatch],
    config: &DurationTrainConfig,
    rng: &mut Rng,
) -> Result<Vec<DurationRecord>> {
    if config.steps > 0 && corpus.is_empty() {
        return Err(contract("duration training needs at least one batch"));
    }
    let g_ids = gen.params();
    let d_ids = disc.params();
    let mut opt = AdamW::new(config.optimizer);
    let mut history = Vec::with_capacity(config.steps);

    for step in 0..config.steps {
        let batch = &corpus[step % corpus.len()];
        opt.set_epoch((step / corpus.len()) as u64);
        let z_d = sample_noise(gen, batch, rng);
        let mut isolated = true;

        let loss_d = if config.adversarial {
            store.zero_grad();
            let (value, grads) = {
                let mut tape = Tape::with_params(store);
                tape.freeze(&g_ids);
                let vars = bind_batch(&mut tape, batch);
                let fake = generate_on(&mut tape, gen, batch, &vars, &z_d)?;
                let real_s = scores_on(&mut tape, disc, batch, &vars.h_text, &vars.d)?;
                let fake_s = scores_on(&mut tape, disc, batch, &vars.h_text, &fake)?;
                let loss = lsgan_d(&mut tape, &real_s, &fake_s, &batch.mask)?;
                tape.backward(loss)?;
                (tape.value(loss).item()?, tape.param_grads())
            };
            finite(step, "loss_d", value)?;
            store.accumulate(&grads)?;
            isolated &= store.grad_is_zero(&g_ids);
            opt.step(store, &d_ids);
            value
        } else {
            0.0
        };

        store.zero_grad();
        let (adv, mse, grads) = {
            let mut tape = Tape::with_params(store);
            tape.freeze(&d_ids);
            let vars = bind_batch(&mut tape, batch);
            let fake = generate_on(&mut tape, gen, batch, &vars, &z_d)?;
            let mse = masked_mse(&mut tape, &fake, &vars.d, &batch.mask)?;
            let (total, adv) = if config.adversarial {
                let fake_s = scores_on(&mut tape, disc, batch, &vars.h_text, &fake)?;
                let adv = lsgan_g(&mut tape, &fake_s, &batch.mask)?;
                (tape.add(adv, mse)?, tape.value(adv).item()?)
            } else {
                (mse, 0.0)
            };
            tape.backward(total)?;
            (adv, tape.value(mse).item()?, tape.param_grads())
        };
        finite(step, "loss_g_adv", adv)?;
        finite(step, "loss_g_mse", mse)?;
        store.accumulate(&grads)?;
        isolated &= store.grad_is_zero(&d_ids);
        opt.step(store, &g_ids);
        store.zero_grad();

        history.push(DurationRecord {
            step,
            loss_d,
            loss_g_adv: adv,
            loss_g_mse: mse,
            isolated,
        });
    }
    Ok(history)
}

fn finite(step: usize, name: &str, value: f64) -> Result<()> {
    if value.is_finite() {
        Ok(())
    } else {
        Err(Error::Diverged {
            step,
            detail: format!("{name} = {value}"),
        })
    }
}
