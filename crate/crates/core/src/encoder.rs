//! Transformer text encoder with speaker conditioning at the third block.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{contract, Error, Result};
use crate::numerics::nn::{apply_mask, ChannelNorm, Linear};
use crate::numerics::{ParamId, ParamStore, Rng, Tape, Tensor, Var};

/// Added to attention scores of padded keys; `exp` of it underflows to 0.
const MASKED_SCORE: f64 = -1e9;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EncoderConfig {
    pub vocab: usize,
    pub hidden: usize,
    pub heads: usize,
    pub blocks: usize,
    pub ffn: usize,
    /// Channels of the prior statistics.
    pub latent_channels: usize,
    /// Width of speaker embeddings; `None` for a single-speaker encoder.
    pub speaker_width: Option<usize>,
    /// Zero-based index of the block whose input receives the speaker vector.
    pub speaker_block: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            vocab: 8,
            hidden: 32,
            heads: 2,
            blocks: 4,
            ffn: 64,
            latent_channels: 4,
            speaker_width: None,
            speaker_block: 2,
        }
    }
}

/// Learnable `(speakers, width)` embedding table.
#[derive(Clone, Debug)]
pub struct SpeakerTable {
    pub table: ParamId,
    count: usize,
    width: usize,
}

impl SpeakerTable {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        count: usize,
        width: usize,
        rng: &mut Rng,
    ) -> Self {
        let table = store.add_uniform(&alloc::format!("{name}.table"), &[count, width], width, rng);
        Self {
            table,
            count,
            width,
        }
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// Row `id` as a `(width, 1)` column.
    pub fn lookup(&self, tape: &mut Tape<'_>, id: usize) -> Result<Var> {
        if id >= self.count {
            return Err(Error::OutOfRange {
                what: "speaker",
                index: id,
                len: self.count,
            });
        }
        let t = tape.param(self.table)?;
        let row = tape.gather_rows(t, &[id])?;
        tape.transpose(row)
    }

    pub fn params(&self) -> Vec<ParamId> {
        vec![self.table]
    }
}

#[derive(Clone, Debug)]
struct Head {
    query: Linear,
    key: Linear,
    value: Linear,
}

#[derive(Clone, Debug)]
pub struct EncoderBlock {
    heads: Vec<Head>,
    output: Linear,
    norm1: ChannelNorm,
    ffn_in: Linear,
    ffn_out: Linear,
    norm2: ChannelNorm,
}

impl EncoderBlock {
    fn new(store: &mut ParamStore, name: &str, config: &EncoderConfig, rng: &mut Rng) -> Self {
        let h = config.hidden;
        let dk = h / config.heads;
        let heads = (0..config.heads)
            .map(|k| Head {
                query: Linear::new(store, &alloc::format!("{name}.head{k}.query"), h, dk, rng),
                key: Linear::new(store, &alloc::format!("{name}.head{k}.key"), h, dk, rng),
                value: Linear::new(store, &alloc::format!("{name}.head{k}.value"), h, dk, rng),
            })
            .collect();
        Self {
            heads,
            output: Linear::new(store, &alloc::format!("{name}.output"), h, h, rng),
            norm1: ChannelNorm::new(store, &alloc::format!("{name}.norm1"), h),
            ffn_in: Linear::new(store, &alloc::format!("{name}.ffn_in"), h, config.ffn, rng),
            ffn_out: Linear::new(store, &alloc::format!("{name}.ffn_out"), config.ffn, h, rng),
            norm2: ChannelNorm::new(store, &alloc::format!("{name}.norm2"), h),
        }
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut ids = Vec::new();
        for head in &self.heads {
            ids.extend(head.query.params());
            ids.extend(head.key.params());
            ids.extend(head.value.params());
        }
        for part in [&self.output, &self.ffn_in, &self.ffn_out] {
            ids.extend(part.params());
        }
        ids.extend(self.norm1.params());
        ids.extend(self.norm2.params());
        ids
    }

    /// Post-norm block over `x (H, I)`; padded columns come out zero.
    pub fn forward(&self, tape: &mut Tape<'_>, x: Var, mask: &[bool]) -> Result<Var> {
        let len = mask.len();
        let key_bias = (!mask.iter().all(|m| *m)).then(|| {
            let mut bias = Tensor::zeros(&[len, len]);
            for q in 0..len {
                for (k, valid) in mask.iter().enumerate() {
                    if !valid {
                        bias.data_mut()[q * len + k] = MASKED_SCORE;
                    }
                }
            }
            tape.constant(bias)
        });

        let mut mixed: Option<Var> = None;
        for head in &self.heads {
            let q = head.query.forward(tape, x)?;
            let k = head.key.forward(tape, x)?;
            let v = head.value.forward(tape, x)?;
            let dk = tape.shape(q)[0];
            let qt = tape.transpose(q)?;
            let scores = tape.matmul(qt, k)?;
            let mut scores = tape.scale(scores, 1.0 / libm::sqrt(dk as f64))?;
            if let Some(b) = key_bias {
                scores = tape.add(scores, b)?;
            }
            let weights = tape.softmax(scores, 1)?;
            let wt = tape.transpose(weights)?;
            let out = tape.matmul(v, wt)?;
            mixed = Some(match mixed {
                None => out,
                Some(prev) => tape.concat_rows(prev, out)?,
            });
        }
        let attn = self
            .output
            .forward(tape, mixed.expect("at least one head"))?;
        let x = tape.add(x, attn)?;
        let x = self.norm1.forward(tape, x)?;
        let x = apply_mask(tape, x, mask)?;

        let f = self.ffn_in.forward(tape, x)?;
        let f = tape.relu(f)?;
        let f = apply_mask(tape, f, mask)?;
        let f = self.ffn_out.forward(tape, f)?;
        let x = tape.add(x, f)?;
        let x = self.norm2.forward(tape, x)?;
        apply_mask(tape, x, mask)
    }
}

#[derive(Clone, Debug)]
pub struct TextEncoder {
    config: EncoderConfig,
    embedding: ParamId,
    blocks: Vec<EncoderBlock>,
    speaker_projection: Option<Linear>,
    mean_head: Linear,
    log_std_head: Linear,
}

/// Tape handles of one encoder pass.
#[derive(Clone, Debug)]
pub struct EncoderOutput {
    /// `(H, I)` token-aligned hidden states.
    pub hidden: Var,
    /// `(C, I)` prior means.
    pub mean: Var,
    /// `(C, I)` prior log standard deviations.
    pub log_std: Var,
    /// Output of every block, in order.
    pub block_outputs: Vec<Var>,
}

/// Sinusoidal position code, `(hidden, len)`.
pub fn positional_encoding(hidden: usize, len: usize) -> Tensor {
    let mut t = Tensor::zeros(&[hidden, len]);
    for c in 0..hidden {
        let pair = (c / 2) as f64;
        let rate = libm::pow(10_000.0, -2.0 * pair / hidden as f64);
        for p in 0..len {
            let angle = p as f64 * rate;
            t.data_mut()[c * len + p] = if c % 2 == 0 {
                libm::sin(angle)
            } else {
                libm::cos(angle)
            };
        }
    }
    t
}

impl TextEncoder {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        config: EncoderConfig,
        rng: &mut Rng,
    ) -> Result<Self> {
        if config.blocks <= config.speaker_block || config.blocks < 3 {
            return Err(contract(
                "encoder needs at least three blocks and a valid speaker block",
            ));
        }
        if config.heads == 0 || !config.hidden.is_multiple_of(config.heads) {
            return Err(contract("hidden width must split evenly across heads"));
        }
        let embedding = store.add_uniform(
            &alloc::format!("{name}.embedding"),
            &[config.vocab, config.hidden],
            config.hidden,
            rng,
        );
        let blocks = (0..config.blocks)
            .map(|k| EncoderBlock::new(store, &alloc::format!("{name}.block{k}"), &config, rng))
            .collect();
        let speaker_projection = config.speaker_width.map(|w| {
            Linear::new(
                store,
                &alloc::format!("{name}.speaker"),
                w,
                config.hidden,
                rng,
            )
        });
        let mean_head = Linear::new(
            store,
            &alloc::format!("{name}.mean"),
            config.hidden,
            config.latent_channels,
            rng,
        );
        let log_std_head = Linear::zeroed(
            store,
            &alloc::format!("{name}.log_std"),
            config.hidden,
            config.latent_channels,
        );
        Ok(Self {
            config,
            embedding,
            blocks,
            speaker_projection,
            mean_head,
            log_std_head,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn blocks(&self) -> &[EncoderBlock] {
        &self.blocks
    }

    pub fn speaker_projection(&self) -> Option<&Linear> {
        self.speaker_projection.as_ref()
    }

    pub fn mean_head(&self) -> &Linear {
        &self.mean_head
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut ids = vec![self.embedding];
        for b in &self.blocks {
            ids.extend(b.params());
        }
        if let Some(p) = &self.speaker_projection {
            ids.extend(p.params());
        }
        ids.extend(self.mean_head.params());
        ids.extend(self.log_std_head.params());
        ids
    }

    /// Encodes `tokens`; `speaker` is a `(E, 1)` column from a
    /// [`SpeakerTable`], required iff the encoder was built with a speaker width.
    pub fn forward(
        &self,
        tape: &mut Tape<'_>,
        tokens: &[usize],
        speaker: Option<Var>,
        mask: &[bool],
    ) -> Result<EncoderOutput> {
        if tokens.len() != mask.len() {
            return Err(contract("token and mask lengths differ"));
        }
        if tokens.is_empty() {
            return Err(contract("cannot encode an empty token sequence"));
        }
        if speaker.is_some() != self.speaker_projection.is_some() {
            return Err(contract(
                "speaker vector must be given exactly when the encoder is multi-speaker",
            ));
        }
        let h = self.config.hidden;
        let table = tape.param(self.embedding)?;
        let emb = tape.gather_rows(table, tokens)?;
        let x = tape.transpose(emb)?;
        let x = tape.scale(x, libm::sqrt(h as f64))?;
        let pe = tape.constant(positional_encoding(h, tokens.len()));
        let x = tape.add(x, pe)?;
        let mut x = apply_mask(tape, x, mask)?;

        let mut block_outputs = Vec::with_capacity(self.blocks.len());
        for (k, block) in self.blocks.iter().enumerate() {
            if k == self.config.speaker_block {
                if let (Some(proj), Some(s)) = (&self.speaker_projection, speaker) {
                    let g = proj.forward(tape, s)?;
                    let g = tape.reshape(g, &[h])?;
                    x = tape.add_bias(x, g)?;
                    x = apply_mask(tape, x, mask)?;
                }
            }
            x = block.forward(tape, x, mask)?;
            block_outputs.push(x);
        }
        let mean = self.mean_head.forward(tape, x)?;
        let mean = apply_mask(tape, mean, mask)?;
        let log_std = self.log_std_head.forward(tape, x)?;
        let log_std = apply_mask(tape, log_std, mask)?;
        Ok(EncoderOutput {
            hidden: x,
            mean,
            log_std,
            block_outputs,
        })
    }
}

/// Plain values of an encoder pass: `(h_text, mean, std)`, all `(·, I)`.
pub fn encode(
    encoder: &TextEncoder,
    speakers: Option<&SpeakerTable>,
    store: &ParamStore,
    tokens: &[usize],
    speaker: Option<usize>,
    mask: &[bool],
) -> Result<(Tensor, Tensor, Tensor)> {
    let mut tape = Tape::with_params(store);
    let s = match (speakers, speaker) {
        (Some(table), Some(id)) => Some(table.lookup(&mut tape, id)?),
        (None, None) => None,
        _ => {
            return Err(contract(
                "speaker id requires a speaker table and vice versa",
            ))
        }
    };
    let out = encoder.forward(&mut tape, tokens, s, mask)?;
    let std = tape.exp(out.log_std)?;
    Ok((
        tape.value(out.hidden).clone(),
        tape.value(out.mean).clone(),
        tape.value(std).clone(),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_ids() {
        let mut store = ParamStore::new();
        let mut rng = Rng::new(0);
        let cfg = EncoderConfig {
            speaker_width: Some(4),
            ..EncoderConfig::default()
        };
        let enc = TextEncoder::new(&mut store, "enc", cfg, &mut rng).unwrap();
        let spk = SpeakerTable::new(&mut store, "spk", 3, 4, &mut rng);
        let err = encode(&enc, Some(&spk), &store, &[0, 8], Some(0), &[true, true]).unwrap_err();
        assert!(matches!(
            err,
            Error::OutOfRange {
                what: "embedding",
                ..
            }
        ));
        let err = encode(&enc, Some(&spk), &store, &[0, 1], Some(3), &[true, true]).unwrap_err();
        assert!(matches!(
            err,
            Error::OutOfRange {
                what: "speaker",
                ..
            }
        ));
    }

    #[test]
    fn positional_code_starts_at_sin_zero_cos_zero() {
        let pe = positional_encoding(4, 3);
        assert_eq!(pe.at(0, 0), 0.0);
        assert_eq!(pe.at(1, 0), 1.0);
    }

    #[test]
    fn too_few_blocks_rejected() {
        let mut store = ParamStore::new();
        let cfg = EncoderConfig {
            blocks: 2,
            ..EncoderConfig::default()
        };
        assert!(TextEncoder::new(&mut store, "enc", cfg, &mut Rng::new(0)).is_err());
    }
}
