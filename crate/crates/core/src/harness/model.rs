use alloc::vec::Vec;

use crate::duration::{DurationConfig, DurationDiscriminator, DurationGenerator};
use crate::encoder::{EncoderConfig, EncoderOutput, SpeakerTable, TextEncoder};
use crate::error::Result;
use crate::flows::{CouplingConfig, FlowStack};
use crate::harness::config::ExperimentConfig;
use crate::numerics::{ParamId, ParamStore, Rng, Tape, Tensor, Var};

/// Encoder, prior heads, flows, duration networks and speaker table, with
/// the parameters they share.
#[derive(Clone, Debug)]
pub struct ToyModel {
    pub store: ParamStore,
    pub encoder: TextEncoder,
    pub speakers: Option<SpeakerTable>,
    pub flows: FlowStack,
    pub generator: DurationGenerator,
    pub discriminator: DurationDiscriminator,
    transformer: bool,
}

impl ToyModel {
    /// Parameter names and initial values depend only on `config`.
    pub fn new(config: &ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let t = &config.train;
        let d = &t.dims;
        let c = &config.corpus;
        let mut rng = Rng::new(t.seed).fork(10);
        let mut store = ParamStore::new();
        let multi = c.speakers > 1;
        let speaker_width = multi.then_some(d.speaker_width);
        let conditioned = if t.speaker_conditioning {
            speaker_width
        } else {
            None
        };

        let encoder = TextEncoder::new(
            &mut store,
            "encoder",
            EncoderConfig {
                vocab: c.vocab,
                hidden: d.hidden,
                heads: d.heads,
                blocks: d.blocks,
                ffn: d.ffn,
                latent_channels: c.channels,
                speaker_width,
                speaker_block: 2,
            },
            &mut rng,
        )?;
        let speakers = multi.then(|| {
            SpeakerTable::new(
                &mut store,
                "speakers",
                c.speakers,
                d.speaker_width,
                &mut rng,
            )
        });
        let mut flows = FlowStack::new(
            &mut store,
            "flow",
            d.flow_layers,
            CouplingConfig {
                channels: c.channels,
                hidden: d.flow_hidden,
                key_width: d.key_width,
                kernel: 3,
                condition_width: conditioned,
                attention: true,
            },
            &mut rng,
        )?;
        if !t.transformer {
            for layer in flows.layers_mut() {
                layer.attention_scale = 0.0;
            }
        }
        let duration = DurationConfig {
            text_width: d.hidden,
            noise_width: if t.adversarial { d.noise_width } else { 0 },
            filters: d.duration_filters,
            kernel: 3,
            condition_width: conditioned,
        };
        let generator =
            DurationGenerator::new(&mut store, "duration.generator", duration, &mut rng);
        let discriminator =
            DurationDiscriminator::new(&mut store, "duration.discriminator", duration, &mut rng);
        Ok(Self {
            store,
            encoder,
            speakers,
            flows,
            generator,
            discriminator,
            transformer: t.transformer,
        })
    }

    pub fn has_transformer(&self) -> bool {
        self.transformer
    }

    pub fn channels(&self) -> usize {
        self.flows.channels()
    }

    pub fn flows_conditioned(&self) -> bool {
        self.flows.layers()[0].config().condition_width.is_some()
    }

    /// Parameters of the attention blocks inside the flows.
    pub fn attention_params(&self) -> Vec<ParamId> {
        self.flows
            .params()
            .into_iter()
            .filter(|id| self.store.name(*id).contains(".attn."))
            .collect()
    }

    /// Parameters trained in the main phase.
    pub fn main_params(&self) -> Vec<ParamId> {
        let frozen = if self.transformer {
            Vec::new()
        } else {
            self.attention_params()
        };
        let mut ids = self.encoder.params();
        if let Some(s) = &self.speakers {
            ids.extend(s.params());
        }
        ids.extend(
            self.flows
                .params()
                .into_iter()
                .filter(|id| !frozen.contains(id)),
        );
        ids
    }

    /// Parameters that must not move in the main phase.
    pub fn main_frozen(&self) -> Vec<ParamId> {
        let mut ids = self.generator.params();
        ids.extend(self.discriminator.params());
        if !self.transformer {
            ids.extend(self.attention_params());
        }
        ids
    }

    /// `(E, 1)` speaker column, or `None` for a single-speaker model.
    pub fn speaker_vector(&self, tape: &mut Tape<'_>, speaker: usize) -> Result<Option<Var>> {
        self.speakers
            .as_ref()
            .map(|s| s.lookup(tape, speaker))
            .transpose()
    }

    /// Speaker row as a plain `(E, 1)` tensor.
    pub fn speaker_value(&self, speaker: usize) -> Result<Option<Tensor>> {
        let mut tape = Tape::with_params(&self.store);
        Ok(self
            .speaker_vector(&mut tape, speaker)?
            .map(|v| tape.value(v).clone()))
    }

    pub fn encode_on(
        &self,
        tape: &mut Tape<'_>,
        tokens: &[usize],
        speaker: Option<Var>,
    ) -> Result<EncoderOutput> {
        let mask = alloc::vec![true; tokens.len()];
        self.encoder.forward(tape, tokens, speaker, &mask)
    }

    /// The condition the flows receive for `speaker`, if any.
    pub fn flow_condition(&self, speaker: Option<Var>) -> Option<Var> {
        if self.flows_conditioned() {
            speaker
        } else {
            None
        }
    }
}
