//! Named finite-difference checks for every tape op and the composed
//! modules, shared by the test suite and the `check-grad` command.

use alloc::vec;
use alloc::vec::Vec;

use crate::duration::{DurationConfig, DurationDiscriminator, DurationGenerator};
use crate::encoder::{EncoderConfig, SpeakerTable, TextEncoder};
use crate::error::{contract, Result};
use crate::flows::{randomize_head, CouplingConfig, CouplingLayer};
use crate::numerics::{
    check_grad_inputs, check_grad_params, ParamId, ParamStore, Rng, Tape, Tensor, Var, DEFAULT_STEP,
};

pub const TOLERANCE: f64 = 1e-4;
pub const SEEDS: u64 = 20;

fn rand_t(shape: &[usize], rng: &mut Rng) -> Tensor {
    Tensor::standard_normal(shape, rng)
}

pub type OpCase = (
    &'static str,
    fn(&mut Rng) -> Vec<Tensor>,
    fn(&mut Tape<'_>, &[Var]) -> Result<Var>,
);

fn dims(rng: &mut Rng) -> (usize, usize) {
    (1 + rng.below(4), 1 + rng.below(5))
}

/// Every differentiable op, each reduced to a scalar through a random
/// weighting so no gradient is trivially uniform.
pub fn op_cases() -> Vec<OpCase> {
    fn two(rng: &mut Rng) -> Vec<Tensor> {
        let (r, c) = dims(rng);
        vec![
            rand_t(&[r, c], rng),
            rand_t(&[r, c], rng),
            rand_t(&[r, c], rng),
        ]
    }
    fn one(rng: &mut Rng) -> Vec<Tensor> {
        let (r, c) = dims(rng);
        vec![rand_t(&[r, c], rng), rand_t(&[r, c], rng)]
    }
    fn weighted(tape: &mut Tape<'_>, y: Var, w: Var) -> Result<Var> {
        let p = tape.mul(y, w)?;
        tape.sum(p)
    }
    vec![
        ("add", two, |t, v| {
            let y = t.add(v[0], v[1])?;
            weighted(t, y, v[2])
        }),
        ("sub", two, |t, v| {
            let y = t.sub(v[0], v[1])?;
            weighted(t, y, v[2])
        }),
        ("mul", two, |t, v| {
            let y = t.mul(v[0], v[1])?;
            weighted(t, y, v[2])
        }),
        ("scale", one, |t, v| {
            let y = t.scale(v[0], -1.7)?;
            weighted(t, y, v[1])
        }),
        ("add_scalar", one, |t, v| {
            let y = t.add_scalar(v[0], 0.3)?;
            weighted(t, y, v[1])
        }),
        ("tanh", one, |t, v| {
            let y = t.tanh(v[0])?;
            weighted(t, y, v[1])
        }),
        ("sigmoid", one, |t, v| {
            let y = t.sigmoid(v[0])?;
            weighted(t, y, v[1])
        }),
        ("exp", one, |t, v| {
            let y = t.exp(v[0])?;
            weighted(t, y, v[1])
        }),
        ("log", one, |t, v| {
            let e = t.exp(v[0])?;
            let e = t.add_scalar(e, 0.5)?;
            let y = t.log(e)?;
            weighted(t, y, v[1])
        }),
        ("relu", one, |t, v| {
            let y = t.relu(v[0])?;
            weighted(t, y, v[1])
        }),
        ("clamp", one, |t, v| {
            let y = t.clamp(v[0], -0.5, 0.5)?;
            weighted(t, y, v[1])
        }),
        ("softmax0", one, |t, v| {
            let y = t.softmax(v[0], 0)?;
            weighted(t, y, v[1])
        }),
        ("softmax1", one, |t, v| {
            let y = t.softmax(v[0], 1)?;
            weighted(t, y, v[1])
        }),
        (
            "layer_norm0",
            |rng| {
                let (r, c) = dims(rng);
                vec![rand_t(&[r + 1, c], rng), rand_t(&[r + 1, c], rng)]
            },
            |t, v| {
                let y = t.layer_norm(v[0], 0, 1e-5)?;
                weighted(t, y, v[1])
            },
        ),
        (
            "layer_norm1",
            |rng| {
                let (r, c) = dims(rng);
                vec![rand_t(&[r, c + 1], rng), rand_t(&[r, c + 1], rng)]
            },
            |t, v| {
                let y = t.layer_norm(v[0], 1, 1e-5)?;
                weighted(t, y, v[1])
            },
        ),
        ("mean", one, |t, v| {
            let y = t.mul(v[0], v[1])?;
            t.mean(y)
        }),
        ("sum", one, |t, v| {
            let y = t.mul(v[0], v[1])?;
            t.sum(y)
        }),
        ("mse", one, |t, v| t.mse(v[0], v[1])),
        (
            "transpose",
            |rng| {
                let (r, c) = dims(rng);
                vec![rand_t(&[r, c], rng), rand_t(&[c, r], rng)]
            },
            |t, v| {
                let y = t.transpose(v[0])?;
                weighted(t, y, v[1])
            },
        ),
        (
            "matmul",
            |rng| {
                let (m, k) = dims(rng);
                let n = 1 + rng.below(4);
                vec![
                    rand_t(&[m, k], rng),
                    rand_t(&[k, n], rng),
                    rand_t(&[m, n], rng),
                ]
            },
            |t, v| {
                let y = t.matmul(v[0], v[1])?;
                weighted(t, y, v[2])
            },
        ),
        (
            "add_bias",
            |rng| {
                let (r, c) = dims(rng);
                vec![
                    rand_t(&[r, c], rng),
                    rand_t(&[r], rng),
                    rand_t(&[r, c], rng),
                ]
            },
            |t, v| {
                let y = t.add_bias(v[0], v[1])?;
                weighted(t, y, v[2])
            },
        ),
        (
            "scale_rows",
            |rng| {
                let (r, c) = dims(rng);
                vec![
                    rand_t(&[r, c], rng),
                    rand_t(&[r], rng),
                    rand_t(&[r, c], rng),
                ]
            },
            |t, v| {
                let y = t.scale_rows(v[0], v[1])?;
                weighted(t, y, v[2])
            },
        ),
        (
            "conv1d",
            |rng| {
                let (cin, len) = dims(rng);
                let cout = 1 + rng.below(3);
                let k = 1 + rng.below(4);
                vec![
                    rand_t(&[cin, len], rng),
                    rand_t(&[cout, cin, k], rng),
                    rand_t(&[cout], rng),
                    rand_t(&[cout, len], rng),
                ]
            },
            |t, v| {
                let y = t.conv1d(v[0], v[1], Some(v[2]))?;
                weighted(t, y, v[3])
            },
        ),
        (
            "rows_concat",
            |rng| {
                let (r, c) = dims(rng);
                vec![rand_t(&[r + 1, c], rng), rand_t(&[r + 1, c], rng)]
            },
            |t, v| {
                let n = t.shape(v[0])[0];
                let top = t.rows(v[0], 0, 1)?;
                let rest = t.rows(v[0], 1, n)?;
                let sq = t.mul(rest, rest)?;
                let y = t.concat_rows(sq, top)?;
                weighted(t, y, v[1])
            },
        ),
        (
            "gather_rows",
            |rng| {
                let (v, h) = dims(rng);
                vec![rand_t(&[v, h], rng), rand_t(&[4, h], rng)]
            },
            |t, v| {
                let n = t.shape(v[0])[0];
                let ids = [0, n - 1, 0, n / 2];
                let y = t.gather_rows(v[0], &ids)?;
                weighted(t, y, v[1])
            },
        ),
        ("reshape", one, |t, v| {
            let s = t.shape(v[0]).to_vec();
            let n = s[0] * s[1];
            let y = t.reshape(v[0], &[n])?;
            let y = t.tanh(y)?;
            let w = t.reshape(v[1], &[n])?;
            weighted(t, y, w)
        }),
    ]
}

/// A composed module checked through its parameters.
pub type ModuleCase = (&'static str, fn(u64) -> Result<f64>);

pub fn module_cases() -> Vec<ModuleCase> {
    vec![
        ("duration_generator", generator_check),
        ("duration_discriminator", discriminator_check),
        ("coupling_layer", coupling_check),
        ("encoder_block", encoder_block_check),
    ]
}

fn weighted_sum(tape: &mut Tape<'_>, y: Var, rng: &mut Rng) -> Result<Var> {
    let w = tape.constant(rand_t(tape.shape(y), rng));
    let p = tape.mul(y, w)?;
    tape.sum(p)
}

fn ragged_mask(len: usize) -> Vec<bool> {
    (0..len).map(|t| t + 1 < len).collect()
}

fn duration_config() -> DurationConfig {
    DurationConfig {
        text_width: 4,
        noise_width: 2,
        filters: 5,
        kernel: 3,
        condition_width: Some(3),
    }
}

fn generator_check(seed: u64) -> Result<f64> {
    let mut rng = Rng::new(seed);
    let mut store = ParamStore::new();
    let gen = DurationGenerator::new(&mut store, "gen", duration_config(), &mut rng);
    let len = 5;
    let (h, z, c) = (
        rand_t(&[4, len], &mut rng),
        rand_t(&[2, len], &mut rng),
        rand_t(&[3, 1], &mut rng),
    );
    let mask = ragged_mask(len);
    let ids = gen.params();
    check_grad_params(
        |tape| {
            let mut w = Rng::new(seed ^ 0x5eed);
            let (hv, zv, cv) = (
                tape.constant(h.clone()),
                tape.constant(z.clone()),
                tape.constant(c.clone()),
            );
            let y = gen.forward(tape, hv, Some(zv), Some(cv), &mask)?;
            weighted_sum(tape, y, &mut w)
        },
        &store,
        &ids,
        DEFAULT_STEP,
    )
}

fn discriminator_check(seed: u64) -> Result<f64> {
    let mut rng = Rng::new(seed);
    let mut store = ParamStore::new();
    let disc = DurationDiscriminator::new(&mut store, "disc", duration_config(), &mut rng);
    let len = 5;
    let h = rand_t(&[4, len], &mut rng);
    // The duration input is checked too: the generator learns through it.
    let d = store.add("probe.d", rand_t(&[1, len], &mut rng));
    let mask = ragged_mask(len);
    let mut ids = disc.params();
    ids.push(d);
    check_grad_params(
        |tape| {
            let mut w = Rng::new(seed ^ 0x5eed);
            let hv = tape.constant(h.clone());
            let dv = tape.param(d)?;
            let y = disc.forward(tape, hv, dv, &mask)?;
            weighted_sum(tape, y, &mut w)
        },
        &store,
        &ids,
        DEFAULT_STEP,
    )
}

fn coupling_check(seed: u64) -> Result<f64> {
    let mut rng = Rng::new(seed);
    let mut store = ParamStore::new();
    let config = CouplingConfig {
        channels: 4,
        hidden: 6,
        key_width: 4,
        kernel: 3,
        condition_width: Some(3),
        attention: true,
    };
    let layer = CouplingLayer::new(&mut store, "flow", config, &mut rng)?;
    randomize_head(&layer, &mut store, 0.5, &mut rng);
    let x = store.add("probe.x", rand_t(&[4, 5], &mut rng));
    let c = rand_t(&[3, 1], &mut rng);
    let mut ids = layer.params();
    ids.push(x);
    check_grad_params(
        |tape| {
            let mut w = Rng::new(seed ^ 0x5eed);
            let xv = tape.param(x)?;
            let cv = tape.constant(c.clone());
            let (y, logdet) = layer.forward_on(tape, xv, Some(cv))?;
            let s = weighted_sum(tape, y, &mut w)?;
            tape.add(s, logdet)
        },
        &store,
        &ids,
        DEFAULT_STEP,
    )
}

/// The speaker-conditioned block and the projection feeding it, checked
/// inside a full encoder pass with a padded position.
fn encoder_block_check(seed: u64) -> Result<f64> {
    let mut rng = Rng::new(seed);
    let mut store = ParamStore::new();
    let config = EncoderConfig {
        vocab: 5,
        hidden: 8,
        heads: 2,
        blocks: 3,
        ffn: 8,
        latent_channels: 2,
        speaker_width: Some(3),
        speaker_block: 2,
    };
    let enc = TextEncoder::new(&mut store, "enc", config, &mut rng)?;
    let speakers = SpeakerTable::new(&mut store, "spk", 2, 3, &mut rng);
    for id in enc.params() {
        if store.name(id).starts_with("enc.log_std") {
            let n = store.get(id).len();
            let vals: Vec<f64> = (0..n).map(|_| rng.uniform_range(-0.3, 0.3)).collect();
            store.set(id, &vals)?;
        }
    }
    let tokens: Vec<usize> = (0..5).map(|_| rng.below(5)).collect();
    let mask = ragged_mask(tokens.len());
    let speaker = rng.below(2);
    let block = enc
        .blocks()
        .get(2)
        .ok_or_else(|| contract("encoder lacks a third block"))?;
    let mut ids: Vec<ParamId> = block.params();
    ids.extend(
        enc.speaker_projection()
            .map(|p| p.params())
            .unwrap_or_default(),
    );
    ids.extend(speakers.params());
    check_grad_params(
        |tape| {
            let mut w = Rng::new(seed ^ 0x5eed);
            let s = speakers.lookup(tape, speaker)?;
            let out = enc.forward(tape, &tokens, Some(s), &mask)?;
            let a = weighted_sum(tape, out.mean, &mut w)?;
            let sigma = tape.exp(out.log_std)?;
            let b = weighted_sum(tape, sigma, &mut w)?;
            tape.add(a, b)
        },
        &store,
        &ids,
        DEFAULT_STEP,
    )
}

/// Worst relative error per named check over `seeds` seeds.
#[derive(Clone, Debug, PartialEq)]
pub struct CheckReport {
    pub name: &'static str,
    pub worst: f64,
}

impl CheckReport {
    pub fn passed(&self) -> bool {
        self.worst <= TOLERANCE
    }
}

pub fn run_op(case: &OpCase, seed: u64) -> Result<f64> {
    let (_, make, f) = case;
    let mut rng = Rng::new(1000 + seed);
    let inputs = make(&mut rng);
    check_grad_inputs(f, &inputs, DEFAULT_STEP)
}

/// Every op and module check, each over seeds `0..seeds`.
pub fn run_all(seeds: u64) -> Result<Vec<CheckReport>> {
    let mut reports = Vec::new();
    for case in op_cases() {
        let mut worst = 0.0f64;
        for seed in 0..seeds {
            worst = worst.max(run_op(&case, seed)?);
        }
        reports.push(CheckReport {
            name: case.0,
            worst,
        });
    }
    for (name, check) in module_cases() {
        let mut worst = 0.0f64;
        for seed in 0..seeds {
            worst = worst.max(check(seed)?);
        }
        reports.push(CheckReport { name, worst });
    }
    Ok(reports)
}
