//! Main-phase likelihood training with alignment search, followed by the
//! separate duration phase.

use alloc::format;
use alloc::vec::Vec;

use crate::alignment::{log_prob_grid, mas_search, noise_scale_at, Alignment};
use crate::duration::{train_duration, DurationBatch, DurationRecord, DurationTrainConfig};
use crate::error::{contract, Error, Result};
use crate::harness::config::TrainConfig;
use crate::harness::corpus::{Instance, ToyCorpus};
use crate::harness::model::ToyModel;
use crate::numerics::{AdamW, Rng, Tape, Tensor, Var};

const HALF_LOG_2PI: f64 = 0.918_938_533_204_672_7;

/// Instances from the training set scored at each periodic evaluation.
pub const MONITOR_INSTANCES: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AlignmentScore {
    /// Fraction of tokens whose duration is exactly right.
    pub exact_match: f64,
    /// Mean absolute duration error in frames.
    pub mae: f64,
    pub tokens: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MainRecord {
    pub step: usize,
    pub loss: f64,
    pub noise_scale: f64,
    pub eval: Option<AlignmentScore>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainHistory {
    pub main: Vec<MainRecord>,
    pub duration: Vec<DurationRecord>,
}

fn transposed(t: &Tensor) -> Tensor {
    let (r, c) = (t.rows(), t.cols());
    let mut data = alloc::vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            data[j * r + i] = t.data()[i * c + j];
        }
    }
    Tensor::new(&[c, r], data).expect("transposed shape")
}

/// Search grid of `z (C, J)` under the prior `mean`, `log_std` (both `(C, I)`).
fn search(
    z: &Tensor,
    mean: &Tensor,
    log_std: &Tensor,
    noise_scale: f64,
    rng: &mut Rng,
) -> Result<Alignment> {
    let std = Tensor::new(
        log_std.shape(),
        log_std.data().iter().map(|v| libm::exp(*v)).collect(),
    )?;
    let grid = log_prob_grid(&transposed(z), &transposed(mean), &transposed(&std))?;
    Ok(mas_search(&grid, noise_scale, rng)?.0)
}

/// Per-element negative log-likelihood of one instance at its searched
/// alignment, differentiable through encoder and flows.
fn instance_loss(
    model: &ToyModel,
    tape: &mut Tape<'_>,
    inst: &Instance,
    frames: Tensor,
    noise_scale: f64,
    rng: &mut Rng,
) -> Result<Var> {
    let speaker = model.speaker_vector(tape, inst.speaker)?;
    let prior = model.encode_on(tape, &inst.tokens, speaker)?;
    let x = tape.constant(frames);
    let (z, logdets) = model
        .flows
        .forward_on(tape, x, model.flow_condition(speaker))?;
    let alignment = search(
        tape.value(z),
        tape.value(prior.mean),
        tape.value(prior.log_std),
        noise_scale,
        rng,
    )?;

    let a = tape.constant(alignment.to_matrix(inst.tokens.len()));
    let mean = tape.matmul(prior.mean, a)?;
    let log_std = tape.matmul(prior.log_std, a)?;
    let diff = tape.sub(z, mean)?;
    let neg = tape.scale(log_std, -1.0)?;
    let inv = tape.exp(neg)?;
    let scaled = tape.mul(diff, inv)?;
    let sq = tape.mul(scaled, scaled)?;
    let quad = tape.sum(sq)?;
    let quad = tape.scale(quad, 0.5)?;
    let norm = tape.sum(log_std)?;
    let logdet = crate::flows::FlowStack::total_logdet(tape, &logdets)?;
    let nll = tape.add(quad, norm)?;
    let nll = tape.sub(nll, logdet)?;
    let elements = inst.frames.len() as f64;
    let nll = tape.add_scalar(nll, HALF_LOG_2PI * elements)?;
    tape.scale(nll, 1.0 / elements)
}

/// Alignment search with noise 0 on clean frames.
pub fn align_instance(model: &ToyModel, inst: &Instance) -> Result<Alignment> {
    let mut tape = Tape::with_params(&model.store);
    let speaker = model.speaker_vector(&mut tape, inst.speaker)?;
    let prior = model.encode_on(&mut tape, &inst.tokens, speaker)?;
    let x = tape.constant(inst.frames.clone());
    let (z, _) = model
        .flows
        .forward_on(&mut tape, x, model.flow_condition(speaker))?;
    // Noise 0 never draws from the generator.
    let mut unused = Rng::new(0);
    search(
        tape.value(z),
        tape.value(prior.mean),
        tape.value(prior.log_std),
        0.0,
        &mut unused,
    )
}

/// Exact-match rate and mean absolute error of searched durations against
/// the ground truth.
pub fn eval_alignment(model: &ToyModel, instances: &[Instance]) -> Result<AlignmentScore> {
    let found = instances
        .iter()
        .map(|inst| align_instance(model, inst))
        .collect::<Result<Vec<_>>>()?;
    score_durations(
        found
            .iter()
            .map(Alignment::durations)
            .zip(instances.iter().map(|i| i.durations.as_slice())),
    )
}

/// Token-level comparison of `(found, truth)` duration pairs.
pub fn score_durations<'a>(
    pairs: impl Iterator<Item = (&'a [usize], &'a [usize])>,
) -> Result<AlignmentScore> {
    let (mut exact, mut abs, mut tokens) = (0usize, 0usize, 0usize);
    for (found, truth) in pairs {
        if found.len() != truth.len() {
            return Err(contract("duration lists of different lengths"));
        }
        for (a, b) in found.iter().zip(truth) {
            exact += usize::from(a == b);
            abs += a.abs_diff(*b);
            tokens += 1;
        }
    }
    if tokens == 0 {
        return Err(contract("cannot evaluate an empty instance set"));
    }
    Ok(AlignmentScore {
        exact_match: exact as f64 / tokens as f64,
        mae: abs as f64 / tokens as f64,
        tokens,
    })
}

fn diverged(step: usize, e: Error) -> Error {
    match e {
        Error::NonFinite { op } => Error::Diverged {
            step,
            detail: format!("non-finite value from {op} in the likelihood pass"),
        },
        other => other,
    }
}

/// Main phase: encoder, speaker table and flows learn to maximize the
/// likelihood of the frames at the searched alignment.
pub fn train_main(
    model: &mut ToyModel,
    config: &TrainConfig,
    corpus: &ToyCorpus,
) -> Result<Vec<MainRecord>> {
    let data = &corpus.instances;
    if data.is_empty() {
        return Err(contract("training needs at least one instance"));
    }
    let root = Rng::new(config.seed);
    let mut jitter_rng = root.fork(20);
    let mut search_rng = root.fork(21);
    let trained = model.main_params();
    let frozen = model.main_frozen();
    let monitor = &data[..data.len().min(MONITOR_INSTANCES)];
    let mut opt = AdamW::new(config.optimizer);
    let mut history = Vec::with_capacity(config.steps_main);

    for step in 0..config.steps_main {
        let first = step * config.batch_size;
        opt.set_epoch((first / data.len()) as u64);
        let noise_scale = if config.alignment_noise {
            noise_scale_at(step as u64)
        } else {
            0.0
        };
        let (loss, grads) = {
            let mut tape = Tape::with_params(&model.store);
            tape.freeze(&frozen);
            let mut terms = Vec::with_capacity(config.batch_size);
            for b in 0..config.batch_size {
                let inst = &data[(first + b) % data.len()];
                let mut frames = inst.frames.clone();
                if config.jitter > 0.0 {
                    for v in frames.data_mut() {
                        *v += config.jitter * jitter_rng.normal();
                    }
                }
                let term =
                    instance_loss(model, &mut tape, inst, frames, noise_scale, &mut search_rng)
                        .map_err(|e| diverged(step, e))?;
                terms.push(term);
            }
            let mut total = terms[0];
            for t in &terms[1..] {
                total = tape.add(total, *t).map_err(|e| diverged(step, e))?;
            }
            let loss = tape
                .scale(total, 1.0 / config.batch_size as f64)
                .map_err(|e| diverged(step, e))?;
            tape.backward(loss).map_err(|e| diverged(step, e))?;
            (tape.value(loss).item()?, tape.param_grads())
        };
        if !loss.is_finite() {
            return Err(Error::Diverged {
                step,
                detail: format!("main loss = {loss}, noise scale = {noise_scale}"),
            });
        }
        model.store.zero_grad();
        model.store.accumulate(&grads)?;
        opt.step(&mut model.store, &trained);
        model.store.zero_grad();

        let due = (step + 1) % config.eval_every == 0 || step + 1 == config.steps_main;
        let eval = if due {
            Some(eval_alignment(model, monitor)?)
        } else {
            None
        };
        history.push(MainRecord {
            step,
            loss,
            noise_scale,
            eval,
        });
    }
    Ok(history)
}

/// Frozen encoder states and noise-free searched durations, grouped into
/// padded batches of `batch_size` consecutive instances.
pub fn duration_batches(
    model: &ToyModel,
    instances: &[Instance],
    batch_size: usize,
) -> Result<Vec<DurationBatch>> {
    let targets = instances
        .iter()
        .map(|inst| align_instance(model, inst).map(|a| a.durations().to_vec()))
        .collect::<Result<Vec<_>>>()?;
    duration_batches_from(model, instances, &targets, batch_size)
}

/// [`duration_batches`] with the duration targets supplied by the caller.
pub fn duration_batches_from(
    model: &ToyModel,
    instances: &[Instance],
    targets: &[Vec<usize>],
    batch_size: usize,
) -> Result<Vec<DurationBatch>> {
    if targets.len() != instances.len() {
        return Err(contract("one duration list per instance is required"));
    }
    let hidden = model.encoder.config().hidden;
    let conditioned = model.generator.config().condition_width.is_some();
    let size = batch_size.max(1);
    let mut batches = Vec::new();
    for (group, group_targets) in instances.chunks(size).zip(targets.chunks(size)) {
        let width = group.iter().map(|i| i.tokens.len()).max().unwrap_or(0);
        let (mut hs, mut ds, mut masks, mut conds) =
            (Vec::new(), Vec::new(), Vec::new(), Vec::new());
        for (inst, target) in group.iter().zip(group_targets) {
            let n = inst.tokens.len();
            if target.len() != n {
                return Err(contract(
                    "duration list length differs from the token count",
                ));
            }
            let mut tape = Tape::with_params(&model.store);
            let speaker = model.speaker_vector(&mut tape, inst.speaker)?;
            let prior = model.encode_on(&mut tape, &inst.tokens, speaker)?;
            let h = tape.value(prior.hidden);
            let mut padded = Tensor::zeros(&[hidden, width]);
            for r in 0..hidden {
                padded.data_mut()[r * width..r * width + n]
                    .copy_from_slice(&h.data()[r * n..(r + 1) * n]);
            }
            let mut durations = target.clone();
            durations.resize(width, 1);
            let mut mask = alloc::vec![true; n];
            mask.resize(width, false);
            hs.push(padded);
            ds.push(durations);
            masks.push(mask);
            if conditioned {
                if let Some(s) = speaker {
                    conds.push(tape.value(s).clone());
                }
            }
        }
        let batch = DurationBatch::from_durations(hs, &ds, masks)?;
        batches.push(if conditioned {
            batch.with_conditions(conds)?
        } else {
            batch
        });
    }
    Ok(batches)
}

/// Duration phase on prepared batches.
pub fn train_duration_phase(
    model: &mut ToyModel,
    config: &TrainConfig,
    batches: &[DurationBatch],
) -> Result<Vec<DurationRecord>> {
    let mut rng = Rng::new(config.seed).fork(22);
    let gen = model.generator.clone();
    let disc = model.discriminator.clone();
    train_duration(
        &gen,
        &disc,
        &mut model.store,
        batches,
        &DurationTrainConfig {
            steps: config.steps_duration,
            optimizer: config.optimizer,
            adversarial: config.adversarial,
        },
        &mut rng,
    )
}

/// Both phases in order.
pub fn train_toy(
    model: &mut ToyModel,
    config: &TrainConfig,
    corpus: &ToyCorpus,
) -> Result<TrainHistory> {
    config.validate()?;
    let main = train_main(model, config, corpus)?;
    let batches = duration_batches(model, &corpus.instances, config.batch_size)?;
    let duration = train_duration_phase(model, config, &batches)?;
    Ok(TrainHistory { main, duration })
}
