//! Synthetic corpora with known alignments.
//!
//! Every token owns a frame prototype and an integer duration range. An
//! instance repeats each token's prototype for its sampled duration, shifts
//! it by the speaker's offset and adds Gaussian observation noise.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{contract, Result};
use crate::numerics::{Rng, Tensor};

/// Inclusive range of frame counts for one token.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DurationLaw {
    pub min: usize,
    pub max: usize,
}

impl DurationLaw {
    pub fn fixed(frames: usize) -> Self {
        Self {
            min: frames,
            max: frames,
        }
    }

    pub fn sample(&self, rng: &mut Rng) -> usize {
        if self.min == self.max {
            self.min
        } else {
            rng.int_inclusive(self.min as u64, self.max as u64) as usize
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CorpusSpec {
    pub vocab: usize,
    pub channels: usize,
    pub speakers: usize,
    pub min_tokens: usize,
    pub max_tokens: usize,
    /// Training instances.
    pub instances: usize,
    pub held_out: usize,
    /// One law per token; empty selects [`CorpusSpec::default_laws`].
    pub laws: Vec<DurationLaw>,
    /// Standard deviation of the observation noise.
    pub noise: f64,
    /// Standard deviation of prototype coordinates.
    pub prototype_scale: f64,
    /// Standard deviation of per-speaker offsets.
    pub speaker_scale: f64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self {
            vocab: 6,
            channels: 4,
            speakers: 1,
            min_tokens: 3,
            max_tokens: 7,
            instances: 64,
            held_out: 32,
            laws: Vec::new(),
            noise: 0.0,
            prototype_scale: 1.0,
            speaker_scale: 0.5,
        }
    }
}

impl CorpusSpec {
    /// Token `v` takes between `1 + v % 3` and `3 + v % 3` frames.
    pub fn default_laws(vocab: usize) -> Vec<DurationLaw> {
        (0..vocab)
            .map(|v| DurationLaw {
                min: 1 + v % 3,
                max: 3 + v % 3,
            })
            .collect()
    }

    pub fn resolved_laws(&self) -> Vec<DurationLaw> {
        if self.laws.is_empty() {
            Self::default_laws(self.vocab)
        } else {
            self.laws.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab < 2 {
            return Err(contract("corpus vocabulary needs at least two tokens"));
        }
        if self.channels == 0 || self.speakers == 0 {
            return Err(contract(
                "corpus needs at least one channel and one speaker",
            ));
        }
        if self.min_tokens == 0 || self.min_tokens > self.max_tokens {
            return Err(contract(
                "token counts must satisfy 1 <= min_tokens <= max_tokens",
            ));
        }
        if !self.laws.is_empty() && self.laws.len() != self.vocab {
            return Err(contract(format!(
                "{} duration laws given for a vocabulary of {}",
                self.laws.len(),
                self.vocab
            )));
        }
        if self
            .resolved_laws()
            .iter()
            .any(|l| l.min == 0 || l.min > l.max)
        {
            return Err(contract("duration laws must satisfy 1 <= min <= max"));
        }
        for (name, v) in [
            ("noise", self.noise),
            ("prototype_scale", self.prototype_scale),
            ("speaker_scale", self.speaker_scale),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(contract(format!(
                    "corpus {name} must be finite and non-negative"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Instance {
    pub tokens: Vec<usize>,
    pub speaker: usize,
    /// `(C, J)` frames.
    pub frames: Tensor,
    pub durations: Vec<usize>,
}

impl Instance {
    pub fn frame_count(&self) -> usize {
        self.frames.cols()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ToyCorpus {
    pub spec: CorpusSpec,
    /// `(V, C)`.
    pub prototypes: Tensor,
    /// `(S, C)`; all zero for a single speaker.
    pub speaker_offsets: Tensor,
    pub instances: Vec<Instance>,
    pub held_out: Vec<Instance>,
}

impl ToyCorpus {
    /// Builds frames for a given token sequence and durations.
    pub fn render(
        &self,
        tokens: &[usize],
        speaker: usize,
        durations: &[usize],
        rng: &mut Rng,
    ) -> Result<Instance> {
        if tokens.is_empty() || tokens.len() != durations.len() || durations.contains(&0) {
            return Err(contract("render needs one positive duration per token"));
        }
        if speaker >= self.spec.speakers || tokens.iter().any(|t| *t >= self.spec.vocab) {
            return Err(contract("token or speaker outside the corpus"));
        }
        let c = self.spec.channels;
        let total: usize = durations.iter().sum();
        let mut frames = Tensor::zeros(&[c, total]);
        let mut j = 0;
        for (&tok, &d) in tokens.iter().zip(durations) {
            for _ in 0..d {
                for ch in 0..c {
                    let mut v = self.prototypes.at(tok, ch) + self.speaker_offsets.at(speaker, ch);
                    if self.spec.noise > 0.0 {
                        v += self.spec.noise * rng.normal();
                    }
                    frames.data_mut()[ch * total + j] = v;
                }
                j += 1;
            }
        }
        Ok(Instance {
            tokens: tokens.to_vec(),
            speaker,
            frames,
            durations: durations.to_vec(),
        })
    }

    fn sample_instance(&self, laws: &[DurationLaw], rng: &mut Rng) -> Result<Instance> {
        let spec = &self.spec;
        let n = spec.min_tokens + rng.below(spec.max_tokens - spec.min_tokens + 1);
        let mut tokens = Vec::with_capacity(n);
        let mut prev: Option<usize> = None;
        for _ in 0..n {
            // Equal neighbours would make the boundary between them unobservable.
            let tok = match prev {
                None => rng.below(spec.vocab),
                Some(p) => {
                    let k = rng.below(spec.vocab - 1);
                    if k >= p {
                        k + 1
                    } else {
                        k
                    }
                }
            };
            tokens.push(tok);
            prev = Some(tok);
        }
        let durations: Vec<usize> = tokens.iter().map(|t| laws[*t].sample(rng)).collect();
        let speaker = if spec.speakers > 1 {
            rng.below(spec.speakers)
        } else {
            0
        };
        self.render(&tokens, speaker, &durations, rng)
    }
}

/// Samples prototypes, speaker offsets, training and held-out instances,
/// each from its own sub-stream of `rng`.
pub fn generate_corpus(spec: &CorpusSpec, rng: &Rng) -> Result<ToyCorpus> {
    spec.validate()?;
    let mut proto_rng = rng.fork(1);
    let prototypes = Tensor::standard_normal(&[spec.vocab, spec.channels], &mut proto_rng);
    let prototypes = Tensor::new(
        prototypes.shape(),
        prototypes
            .data()
            .iter()
            .map(|v| v * spec.prototype_scale)
            .collect(),
    )?;
    let speaker_offsets = if spec.speakers > 1 {
        let mut spk_rng = rng.fork(2);
        let raw = Tensor::standard_normal(&[spec.speakers, spec.channels], &mut spk_rng);
        Tensor::new(
            raw.shape(),
            raw.data().iter().map(|v| v * spec.speaker_scale).collect(),
        )?
    } else {
        Tensor::zeros(&[1, spec.channels])
    };
    let mut corpus = ToyCorpus {
        spec: spec.clone(),
        prototypes,
        speaker_offsets,
        instances: Vec::new(),
        held_out: Vec::new(),
    };
    let laws = spec.resolved_laws();
    let mut train_rng = rng.fork(3);
    let instances = (0..spec.instances)
        .map(|_| corpus.sample_instance(&laws, &mut train_rng))
        .collect::<Result<Vec<_>>>()?;
    let mut held_rng = rng.fork(4);
    let held_out = (0..spec.held_out)
        .map(|_| corpus.sample_instance(&laws, &mut held_rng))
        .collect::<Result<Vec<_>>>()?;
    corpus.instances = instances;
    corpus.held_out = held_out;
    Ok(corpus)
}
