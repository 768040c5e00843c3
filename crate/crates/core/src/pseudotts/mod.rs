//! Parametric text-to-features synthesizer conditioned on speaker and prosody latents.

pub mod acoustic;
mod lexicon;

pub use lexicon::{
    g2p, normalize, wordpiece_char, wordpiece_id, wordpieces, wordpieces_to_text, Lexicon,
    TOY_INVENTORY, WORDPIECE_VOCAB, WORD_BOUNDARY,
};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Exp1, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{logmel, FeatureMatrix};
use crate::losses::{LabelSeq, Source, Vocab};

/// Frames per second of the feature front end.
pub const FRAME_RATE: f64 = 100.0;
const CHUNK_S: f64 = 2.0;
const CHUNK_HOP_S: f64 = 1.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LatentPrior {
    pub n_speakers: usize,
    pub global_dim: usize,
    pub local_dim: usize,
    /// Maximum relative duration change.
    pub duration_scale: f64,
    /// Log-energy change per unit of local latent.
    pub energy_scale: f64,
    /// Std of the per-speaker spectral slope.
    pub tilt_scale: f64,
}

impl Default for LatentPrior {
    fn default() -> Self {
        Self {
            n_speakers: 8,
            global_dim: 4,
            local_dim: 2,
            duration_scale: 0.3,
            energy_scale: 0.5,
            tilt_scale: 0.5,
        }
    }
}

impl LatentPrior {
    pub fn validate(&self) -> Result<()> {
        if self.n_speakers == 0 || self.global_dim == 0 || self.local_dim == 0 {
            return Err(Error::Config("latent prior sizes must be positive".into()));
        }
        if [self.duration_scale, self.energy_scale, self.tilt_scale]
            .iter()
            .any(|s| !(s.is_finite() && *s > 0.0))
        {
            return Err(Error::Config("latent prior scales must be positive".into()));
        }
        if self.duration_scale >= 1.0 {
            return Err(Error::Config("duration_scale must be below 1".into()));
        }
        Ok(())
    }
}

/// `z`: speaker, utterance-level latent and one local latent per 2 s chunk (1 s hop).
#[derive(Clone, Debug, PartialEq)]
pub struct SynthesisLatent {
    pub speaker_id: usize,
    pub global: Vec<f64>,
    pub local: Vec<Vec<f64>>,
    pub noise_seed: u64,
}

impl SynthesisLatent {
    /// All-zero latents for speaker `speaker_id`.
    pub fn neutral(prior: &LatentPrior, speaker_id: usize, chunks: usize) -> Self {
        Self {
            speaker_id,
            global: vec![0.0; prior.global_dim],
            local: vec![vec![0.0; prior.local_dim]; chunks.max(1)],
            noise_seed: 0,
        }
    }
}

pub fn chunk_count(duration_s: f64) -> usize {
    (((duration_s - CHUNK_S) / CHUNK_HOP_S).floor() + 1.0).max(1.0) as usize
}

pub fn sample_latent<R: Rng + ?Sized>(
    prior: &LatentPrior,
    duration_s: f64,
    rng: &mut R,
) -> Result<SynthesisLatent> {
    if !(duration_s.is_finite() && duration_s > 0.0) {
        return Err(Error::arg(format!(
            "duration must be positive, got {duration_s}"
        )));
    }
    let mut normal = |n: usize| {
        (0..n)
            .map(|_| rng.sample(StandardNormal))
            .collect::<Vec<f64>>()
    };
    let global = normal(prior.global_dim);
    let local = (0..chunk_count(duration_s))
        .map(|_| normal(prior.local_dim))
        .collect();
    Ok(SynthesisLatent {
        speaker_id: rng.gen_range(0..prior.n_speakers),
        global,
        local,
        noise_seed: rng.gen(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    /// Frames per phoneme before jitter.
    pub base_duration: usize,
    /// Frames of linear cross-fade at the start of each phoneme.
    pub crossfade: usize,
    /// Noise floor relative to frame energy, in dB; `None` disables it.
    pub noise_floor_db: Option<f64>,
    pub n_mels: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            base_duration: 8,
            crossfade: 2,
            noise_floor_db: Some(-40.0),
            n_mels: 80,
        }
    }
}

/// Output of [`Synthesizer::synth_on_the_fly`].
#[derive(Clone, Debug)]
pub struct SynthesizedUtterance {
    pub features: FeatureMatrix,
    pub phonemes: LabelSeq,
    pub wordpieces: LabelSeq,
    pub latent: SynthesisLatent,
}

#[derive(Clone, Debug)]
pub struct Synthesizer {
    pub lexicon: Lexicon,
    pub prior: LatentPrior,
    pub cfg: SynthConfig,
    /// Row `id − 1` is the mel template of phoneme `id`.
    templates: Vec<Vec<f32>>,
}

impl Synthesizer {
    pub fn new(lexicon: Lexicon, prior: LatentPrior, cfg: SynthConfig) -> Result<Self> {
        prior.validate()?;
        if cfg.base_duration == 0 || cfg.n_mels == 0 {
            return Err(Error::Config(
                "base_duration and n_mels must be positive".into(),
            ));
        }
        let templates = (1..=lexicon.n_phonemes())
            .map(|id| canonical_template(&lexicon, id, cfg.n_mels))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            lexicon,
            prior,
            cfg,
            templates,
        })
    }

    pub fn template(&self, id: usize) -> &[f32] {
        &self.templates[id - 1]
    }

    /// Fixed spectral slope and level offset for a speaker.
    pub fn speaker_tilt(&self, speaker_id: usize) -> Vec<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(0x7117_0000 ^ speaker_id as u64);
        let slope: f64 = rng.sample::<f64, _>(StandardNormal) * self.prior.tilt_scale;
        let level: f64 = rng.sample::<f64, _>(StandardNormal) * 0.5 * self.prior.tilt_scale;
        let d = self.cfg.n_mels;
        (0..d)
            .map(|j| (level + slope * (j as f64 / (d.max(2) - 1) as f64 - 0.5)) as f32)
            .collect()
    }

    /// Frames per phoneme: `max(1, round(d·(1 + s·tanh(·))))` driven by the global latent.
    pub fn durations(&self, n: usize, z: &SynthesisLatent) -> Vec<usize> {
        let g = &z.global;
        (0..n)
            .map(|i| {
                let drive = if g.len() > 1 {
                    0.5 * (g[0] + g[1 + i % (g.len() - 1)])
                } else {
                    g[0]
                };
                let jitter = 1.0 + self.prior.duration_scale * drive.tanh();
                ((self.cfg.base_duration as f64 * jitter).round() as usize).max(1)
            })
            .collect()
    }

    pub fn synthesize(&self, phonemes: &LabelSeq, z: &SynthesisLatent) -> Result<FeatureMatrix> {
        if phonemes.is_empty() {
            return Err(Error::arg("cannot synthesize an empty phoneme sequence"));
        }
        phonemes.validate(self.lexicon.n_phonemes() + 1)?;
        if z.speaker_id >= self.prior.n_speakers || z.global.is_empty() || z.local.is_empty() {
            return Err(Error::arg("latent does not match the prior"));
        }
        let d = self.cfg.n_mels;
        let tilt = self.speaker_tilt(z.speaker_id);
        let durs = self.durations(phonemes.len(), z);
        let total: usize = durs.iter().sum();
        let mut values = Vec::with_capacity(total * d);
        for (i, (&id, &frames)) in phonemes.ids.iter().zip(&durs).enumerate() {
            let cur = self.template(id);
            for o in 0..frames {
                if i > 0 && o < self.cfg.crossfade {
                    let prev = self.template(phonemes.ids[i - 1]);
                    let a = (o + 1) as f32 / (self.cfg.crossfade + 1) as f32;
                    values.extend(cur.iter().zip(prev).map(|(c, p)| a * c + (1.0 - a) * p));
                } else {
                    values.extend_from_slice(cur);
                }
            }
        }
        let chunk = (CHUNK_S * FRAME_RATE) as usize;
        let hop = (CHUNK_HOP_S * FRAME_RATE) as usize;
        let mut noise_rng = ChaCha8Rng::seed_from_u64(z.noise_seed);
        for (t, row) in values.chunks_mut(d).enumerate() {
            let covering: Vec<&Vec<f64>> = z
                .local
                .iter()
                .enumerate()
                .filter(|(c, _)| c * hop <= t && t < c * hop + chunk)
                .map(|(_, l)| l)
                .collect();
            let covering = if covering.is_empty() {
                vec![z.local.last().unwrap()]
            } else {
                covering
            };
            let mean = |k: usize| {
                covering
                    .iter()
                    .map(|l| l.get(k).copied().unwrap_or(0.0))
                    .sum::<f64>()
                    / covering.len() as f64
            };
            let (energy, slope) = (mean(0), mean(1));
            for (j, v) in row.iter_mut().enumerate() {
                let pos = j as f64 / (d.max(2) - 1) as f64 - 0.5;
                *v += tilt[j] + (self.prior.energy_scale * (energy + 0.5 * slope * pos)) as f32;
            }
            if let Some(db) = self.cfg.noise_floor_db {
                let power = row.iter().map(|&v| (v as f64).exp()).sum::<f64>() / d as f64;
                let level = 10f64.powf(db / 10.0) * power;
                for v in row.iter_mut() {
                    let e: f64 = noise_rng.sample(Exp1);
                    *v = ((*v as f64).exp() + level * e).ln() as f32;
                }
            }
        }
        FeatureMatrix::new(total, d, values, Source::Synthesized)
    }

    /// Fresh latent per call; labels are the front-end outputs for `text`.
    pub fn synth_on_the_fly<R: Rng + ?Sized>(
        &self,
        text: &str,
        rng: &mut R,
    ) -> Result<SynthesizedUtterance> {
        let phonemes = g2p(text, &self.lexicon)?;
        let wordpieces = wordpieces(text)?;
        let duration_s = (phonemes.len() * self.cfg.base_duration) as f64 / FRAME_RATE;
        let latent = sample_latent(&self.prior, duration_s, rng)?;
        let features = self.synthesize(&phonemes, &latent)?;
        Ok(SynthesizedUtterance {
            features,
            phonemes,
            wordpieces,
            latent,
        })
    }

    pub fn phoneme_vocab_size(&self) -> usize {
        self.lexicon.n_phonemes() + 1
    }
}

/// Mean log-mel frame of a clean neutral-voice rendering of one phoneme.
fn canonical_template(lex: &Lexicon, id: usize, n_mels: usize) -> Result<Vec<f32>> {
    const FRAMES: usize = 30;
    let mut rng = ChaCha8Rng::seed_from_u64(0x7e41_0000 + id as u64);
    let wav = acoustic::render(
        lex,
        &[(id, FRAMES)],
        &acoustic::Voice::NEUTRAL,
        1e-4,
        &mut rng,
    );
    let f = logmel(&wav, acoustic::SAMPLE_RATE, n_mels)?;
    Ok((0..n_mels)
        .map(|j| (0..f.frames()).map(|t| f.get(t, j)).sum::<f32>() / f.frames() as f32)
        .collect())
}

/// Label sequences for both auxiliary vocabularies.
pub fn labels_for(text: &str, lex: &Lexicon) -> Result<(LabelSeq, LabelSeq)> {
    Ok((g2p(text, lex)?, wordpieces(text)?))
}

pub fn vocab_size(vocab: Vocab, lex: &Lexicon) -> usize {
    match vocab {
        Vocab::Phoneme => lex.n_phonemes() + 1,
        Vocab::Wordpiece => WORDPIECE_VOCAB,
    }
}
