//! Toy language, "real" speech rendering, and manifest files.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::derive_seed;
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::features::{logmel, read_features, read_wav, write_features, FeatureMatrix};
use crate::losses::{min_frames, Source};
use crate::pseudotts::acoustic::{self, Voice, SAMPLE_RATE};
use crate::pseudotts::{g2p, wordpieces, Lexicon};

const CONSONANTS: [char; 10] = ['b', 'd', 'g', 'k', 'l', 'm', 'n', 'p', 's', 't'];
const VOWELS: [char; 5] = ['a', 'e', 'i', 'o', 'u'];

/// Word-level Markov language over CV-syllable words.
#[derive(Clone, Debug, PartialEq)]
pub struct ToyLanguage {
    pub words: Vec<String>,
    start: Vec<f64>,
    successors: Vec<Vec<(usize, f64)>>,
    pub min_words: usize,
    pub max_words: usize,
}

fn pick<R: Rng + ?Sized>(weights: &[f64], rng: &mut R) -> usize {
    let total: f64 = weights.iter().sum();
    let mut u = rng.gen::<f64>() * total;
    for (i, w) in weights.iter().enumerate() {
        if u < *w {
            return i;
        }
        u -= w;
    }
    weights.len() - 1
}

impl ToyLanguage {
    pub fn generate(
        vocab_size: usize,
        branching: usize,
        min_words: usize,
        max_words: usize,
        seed: u64,
    ) -> Result<Self> {
        if vocab_size < 2 || branching == 0 || min_words == 0 || max_words < min_words {
            return Err(Error::Config(
                "toy language needs vocab ≥ 2, branching ≥ 1, 1 ≤ min ≤ max words".into(),
            ));
        }
        if vocab_size > 2000 {
            return Err(Error::Config(
                "toy vocabulary is limited to 2000 words".into(),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut seen = BTreeSet::new();
        let mut words = Vec::with_capacity(vocab_size);
        while words.len() < vocab_size {
            let syl = [1, 2, 2, 3][rng.gen_range(0..4)];
            let w: String = (0..syl)
                .flat_map(|_| {
                    [
                        *CONSONANTS.choose(&mut rng).unwrap(),
                        *VOWELS.choose(&mut rng).unwrap(),
                    ]
                })
                .collect();
            if seen.insert(w.clone()) {
                words.push(w);
            }
        }
        let start = (0..vocab_size).map(|r| 1.0 / (r + 1) as f64).collect();
        let successors = (0..vocab_size)
            .map(|_| {
                let mut idx: Vec<usize> = (0..vocab_size).collect();
                idx.shuffle(&mut rng);
                idx.truncate(branching.min(vocab_size));
                idx.into_iter()
                    .map(|j| (j, (rng.gen::<f64>() * 2.0).exp()))
                    .collect()
            })
            .collect();
        Ok(Self {
            words,
            start,
            successors,
            min_words,
            max_words,
        })
    }

    pub fn sentence<R: Rng + ?Sized>(&self, rng: &mut R) -> String {
        let n = rng.gen_range(self.min_words..=self.max_words);
        let mut w = pick(&self.start, rng);
        let mut out = vec![self.words[w].as_str()];
        for _ in 1..n {
            let succ = &self.successors[w];
            let weights: Vec<f64> = succ.iter().map(|s| s.1).collect();
            w = succ[pick(&weights, rng)].0;
            out.push(&self.words[w]);
        }
        out.join(" ")
    }
}

/// Lexicon with irregular pronunciations for a fraction of words (first vowel shifted).
pub fn toy_lexicon(lang: &ToyLanguage, exception_rate: f64, seed: u64) -> Result<Lexicon> {
    let mut lex = Lexicon::toy();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shift = |c: char| match c {
        'a' => 'o',
        'e' => 'i',
        'i' => 'e',
        'o' => 'u',
        _ => 'a',
    };
    for w in &lang.words {
        if rng.gen::<f64>() < exception_rate {
            let mut done = false;
            let irregular: String = w
                .chars()
                .map(|c| {
                    if !done && VOWELS.contains(&c) {
                        done = true;
                        shift(c)
                    } else {
                        c
                    }
                })
                .collect();
            let ids = lex.apply_rules(&irregular)?;
            lex.add_entry(w, &ids)?;
        }
    }
    Ok(lex)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusConfig {
    pub vocab_size: usize,
    pub branching: usize,
    pub min_words: usize,
    pub max_words: usize,
    pub exception_rate: f64,
    pub n_pretrain: usize,
    pub n_finetune: usize,
    pub n_test: usize,
    pub n_unspoken: usize,
    pub n_train_speakers: usize,
    pub n_test_speakers: usize,
    pub seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            vocab_size: 60,
            branching: 4,
            min_words: 2,
            max_words: 4,
            exception_rate: 0.1,
            n_pretrain: 2000,
            n_finetune: 100,
            n_test: 200,
            n_unspoken: 2000,
            n_train_speakers: 12,
            n_test_speakers: 4,
            seed: 1,
        }
    }
}

/// Speaker of the rendered "real" corpus.
#[derive(Clone, Debug, PartialEq)]
pub struct RealSpeaker {
    pub name: String,
    pub voice: Voice,
    pub noise_rms: f64,
    /// Multiplies phone durations.
    pub rate: f64,
}

impl RealSpeaker {
    pub fn sample<R: Rng + ?Sized>(name: String, rng: &mut R) -> Self {
        Self {
            name,
            voice: Voice {
                period: rng.gen_range(40..=80),
                formant_scale: rng.gen_range(0.9..1.1),
                gain: rng.gen_range(0.5..1.5),
            },
            noise_rms: rng.gen_range(0.001..0.004),
            rate: rng.gen_range(0.85..1.15),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Utterance {
    pub id: String,
    pub speaker: String,
    pub text: Option<String>,
    pub features: FeatureMatrix,
}

/// Renders `text` through the waveform path with per-phone timing jitter, lead/trail silence,
/// and background noise. Durations grow until both label sequences are CTC-feasible after subsampling.
pub fn render_real<R: Rng + ?Sized>(
    text: &str,
    lex: &Lexicon,
    spk: &RealSpeaker,
    rng: &mut R,
) -> Result<FeatureMatrix> {
    let phones = g2p(text, lex)?;
    let chars = wordpieces(text)?;
    let sil = lex.boundary_id();
    let vowel_ids: Vec<usize> = VOWELS
        .iter()
        .filter_map(|v| lex.id_of(&v.to_string()))
        .collect();
    let mut segs: Vec<(usize, usize)> = Vec::with_capacity(phones.len() + 2);
    segs.push((sil, rng.gen_range(1..=4)));
    for &p in &phones.ids {
        let base = if p == sil {
            3.0
        } else if vowel_ids.contains(&p) {
            8.0
        } else {
            6.0
        };
        let d = (base * spk.rate * rng.gen_range(0.8..1.2)).round().max(2.0) as usize;
        segs.push((p, d));
    }
    segs.push((sil, rng.gen_range(1..=4)));
    let need = min_frames(&phones.ids).max(min_frames(&chars.ids));
    while EncoderConfig::subsampled_len(segs.iter().map(|s| s.1).sum()) < need {
        for s in segs.iter_mut() {
            s.1 += 1;
        }
    }
    let wav = acoustic::render(lex, &segs, &spk.voice, spk.noise_rms, rng);
    let mut f = logmel(&wav, SAMPLE_RATE, crate::features::DEFAULT_MEL_DIMS)?;
    f.source = Source::Real;
    Ok(f)
}

#[derive(Clone, Debug)]
pub struct ToyCorpus {
    pub language: ToyLanguage,
    pub lexicon: Lexicon,
    /// Unlabeled speech.
    pub pretrain: Vec<Utterance>,
    pub finetune: Vec<Utterance>,
    pub test: Vec<Utterance>,
    /// Text without audio.
    pub unspoken: Vec<String>,
}

fn render_split(
    prefix: &str,
    n: usize,
    speakers: &[RealSpeaker],
    lang: &ToyLanguage,
    lex: &Lexicon,
    labeled: bool,
    seed: u64,
    workers: usize,
) -> Result<Vec<Utterance>> {
    let one = |i: usize| -> Result<Utterance> {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[i as u64]));
        let text = lang.sentence(&mut rng);
        let spk = &speakers[rng.gen_range(0..speakers.len())];
        let features = render_real(&text, lex, spk, &mut rng)?;
        Ok(Utterance {
            id: format!("{prefix}-{}-{i:05}", spk.name),
            speaker: spk.name.clone(),
            text: labeled.then_some(text),
            features,
        })
    };
    super::parallel_map(n, workers, one)
}

impl ToyCorpus {
    pub fn generate(cfg: &CorpusConfig, workers: usize) -> Result<Self> {
        let language = ToyLanguage::generate(
            cfg.vocab_size,
            cfg.branching,
            cfg.min_words,
            cfg.max_words,
            cfg.seed,
        )?;
        let lexicon = toy_lexicon(&language, cfg.exception_rate, derive_seed(cfg.seed, &[1]))?;
        if cfg.n_train_speakers == 0 || cfg.n_test_speakers == 0 {
            return Err(Error::Config("speaker counts must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[2]));
        let train_spk: Vec<RealSpeaker> = (0..cfg.n_train_speakers)
            .map(|i| RealSpeaker::sample(format!("spk{i:03}"), &mut rng))
            .collect();
        let test_spk: Vec<RealSpeaker> = (0..cfg.n_test_speakers)
            .map(|i| RealSpeaker::sample(format!("spk{:03}", cfg.n_train_speakers + i), &mut rng))
            .collect();
        let pretrain = render_split(
            "pre",
            cfg.n_pretrain,
            &train_spk,
            &language,
            &lexicon,
            false,
            derive_seed(cfg.seed, &[3]),
            workers,
        )?;
        let finetune = render_split(
            "ft",
            cfg.n_finetune,
            &train_spk,
            &language,
            &lexicon,
            true,
            derive_seed(cfg.seed, &[4]),
            workers,
        )?;
        let test = render_split(
            "test",
            cfg.n_test,
            &test_spk,
            &language,
            &lexicon,
            true,
            derive_seed(cfg.seed, &[5]),
            workers,
        )?;
        let mut text_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[6]));
        let unspoken = (0..cfg.n_unspoken)
            .map(|_| language.sentence(&mut text_rng))
            .collect();
        Ok(Self {
            language,
            lexicon,
            pretrain,
            finetune,
            test,
            unspoken,
        })
    }

    /// Writes lexicon, inventory, unspoken text, feature files and one manifest per split.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir.join("features"))?;
        self.lexicon
            .save(dir.join("lexicon.tsv"), dir.join("phones.txt"))?;
        std::fs::write(dir.join("unspoken.txt"), self.unspoken.join("\n") + "\n")?;
        for (name, split) in [
            ("pretrain", &self.pretrain),
            ("finetune", &self.finetune),
            ("test", &self.test),
        ] {
            let mut lines = String::new();
            for u in split {
                let rel = format!("features/{}.melf", u.id);
                write_features(dir.join(&rel), &u.features)?;
                let entry = ManifestEntry {
                    id: u.id.clone(),
                    features: Some(rel),
                    audio: None,
                    text: u.text.clone(),
                };
                lines.push_str(
                    &serde_json::to_string(&entry).map_err(|e| Error::Data(e.to_string()))?,
                );
                lines.push('\n');
            }
            std::fs::write(dir.join(format!("{name}.jsonl")), lines)?;
        }
        Ok(())
    }
}

/// One manifest line. Paths are relative to the manifest's directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub id: String,
    pub features: Option<String>,
    pub audio: Option<String>,
    pub text: Option<String>,
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<ManifestEntry>> {
    let text = std::fs::read_to_string(path.as_ref())
        .map_err(|e| Error::Data(format!("{}: {e}", path.as_ref().display())))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, l)| {
            serde_json::from_str(l)
                .map_err(|e| Error::Data(format!("manifest line {}: {e}", n + 1)))
        })
        .collect()
}

/// Loads every manifest entry, computing log-mel features from audio when no feature file is given.
pub fn load_utterances(manifest: impl AsRef<Path>) -> Result<Vec<Utterance>> {
    let base: PathBuf = manifest
        .as_ref()
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_default();
    read_manifest(&manifest)?
        .into_iter()
        .map(|e| {
            let features = match (&e.features, &e.audio) {
                (Some(f), _) => read_features(base.join(f), Source::Real)?,
                (None, Some(a)) => {
                    let (samples, sr) = read_wav(base.join(a))?;
                    logmel(&samples, sr, crate::features::DEFAULT_MEL_DIMS)?
                }
                (None, None) => {
                    return Err(Error::Data(format!("{}: neither features nor audio", e.id)))
                }
            };
            Ok(Utterance {
                speaker: e.id.split('-').nth(1).unwrap_or("").to_string(),
                id: e.id,
                text: e.text,
                features,
            })
        })
        .collect()
}
