//! Batch construction, optimization, pretraining and fine-tuning loops, decoding and scoring.

pub mod corpus;
pub mod decode;
pub mod experiment;
pub mod optim;
mod train;

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use decode::{
    corpus_wer, decode_ctc, greedy_ctc, prefix_beam_search, wer, DecodeConfig, DecodeMode,
};
pub use optim::{clip_global_norm, ema_update, lr_schedule, Adam};
pub use train::{
    evaluate, finetune_head, finetune_step, init_pretrain_params, labeled_item, pretrain_step,
    run_finetuning, run_pretraining, start_finetuning, transcribe, transcribe_all, AuxConfig,
    MetricsLog, MetricsRow, StepReport, TrainState, EVAL_HEADER, METRICS_HEADER,
};

use crate::error::{Error, Result};
use crate::features::FeatureMatrix;
use crate::losses::{LabelSeq, Objective, Source, Vocab};
use crate::pseudotts::Synthesizer;

/// SplitMix64 over `base` and each part in turn.
pub fn derive_seed(base: u64, parts: &[u64]) -> u64 {
    let mix = |mut z: u64| {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    };
    parts.iter().fold(mix(base), |acc, &p| mix(acc ^ mix(p)))
}

/// Maps `f` over `0..n` on up to `workers` threads; output order is index order.
pub(crate) fn parallel_map<T, F>(n: usize, workers: usize, f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(usize) -> Result<T> + Sync,
{
    if workers <= 1 || n <= 1 {
        return (0..n).map(f).collect();
    }
    let chunk = n.div_ceil(workers);
    let f = &f;
    let parts: Vec<Result<Vec<T>>> = std::thread::scope(|s| {
        let handles: Vec<_> = (0..n)
            .step_by(chunk)
            .map(|lo| s.spawn(move || (lo..(lo + chunk).min(n)).map(f).collect::<Result<Vec<T>>>()))
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("worker panicked"))
            .collect()
    });
    let mut out = Vec::with_capacity(n);
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    PretrainSpeechOnly,
    PretrainJoint,
    Finetune,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::PretrainSpeechOnly => "pretrain_speech_only",
            Phase::PretrainJoint => "pretrain_joint",
            Phase::Finetune => "finetune",
        }
    }

    fn tag(self) -> u64 {
        self as u64 + 1
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ContrastiveConfig {
    pub mask_fraction: f64,
    pub mask_span: usize,
    pub distractors: usize,
    pub temperature: f64,
}

impl Default for ContrastiveConfig {
    fn default() -> Self {
        Self {
            mask_fraction: 0.5,
            mask_span: 10,
            distractors: 100,
            temperature: 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub phase: Phase,
    pub steps: usize,
    pub batch_size: usize,
    pub synth_ratio: f64,
    pub peak_lr: f64,
    /// Multiplies `peak_lr` in the joint phase.
    pub joint_lr_factor: f64,
    pub warmup_steps: usize,
    pub clip_norm: f64,
    pub ema_decay: f64,
    pub use_ema: bool,
    pub lambda_aux: f64,
    pub contrastive: ContrastiveConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            phase: Phase::PretrainSpeechOnly,
            steps: 1000,
            batch_size: 8,
            synth_ratio: 0.5,
            peak_lr: 2e-3,
            joint_lr_factor: 0.2,
            warmup_steps: 25000,
            clip_norm: 20.0,
            ema_decay: 0.9999,
            use_ema: true,
            lambda_aux: 1.0,
            contrastive: ContrastiveConfig::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.warmup_steps < 1 {
            return Err(Error::Config("warmup_steps must be at least 1".into()));
        }
        if !(self.ema_decay > 0.0 && self.ema_decay < 1.0) {
            return Err(Error::Config("ema_decay must lie in (0, 1)".into()));
        }
        if !(0.0..=1.0).contains(&self.synth_ratio) {
            return Err(Error::Config("synth_ratio must lie in [0, 1]".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.phase == Phase::Finetune {
            return Err(Error::Config(
                "pretraining config cannot use the finetune phase".into(),
            ));
        }
        if self.lambda_aux < 0.0 || self.peak_lr <= 0.0 || self.joint_lr_factor <= 0.0 {
            return Err(Error::Config(
                "lambda_aux, peak_lr and joint_lr_factor must be non-negative".into(),
            ));
        }
        Ok(())
    }

    pub fn effective_peak_lr(&self) -> f64 {
        match self.phase {
            Phase::PretrainJoint => self.peak_lr * self.joint_lr_factor,
            _ => self.peak_lr,
        }
    }

    pub fn effective_synth_ratio(&self) -> f64 {
        match self.phase {
            Phase::PretrainSpeechOnly => 0.0,
            _ => self.synth_ratio,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FinetuneConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub encoder_lr: f64,
    pub encoder_warmup: usize,
    pub decoder_lr: f64,
    pub decoder_warmup: usize,
    /// Multiplies both warmups (desk-scale step budget).
    pub warmup_scale: f64,
    pub clip_norm: f64,
    pub ema_decay: f64,
    pub use_ema: bool,
    pub freeze_encoder: bool,
    pub objective: Objective,
    pub joint_dim: usize,
    /// SpecAugment on fine-tuning inputs.
    pub augment: bool,
    pub seed: u64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 8,
            encoder_lr: 3e-4,
            encoder_warmup: 5000,
            decoder_lr: 1e-3,
            decoder_warmup: 1500,
            warmup_scale: 0.02,
            clip_norm: 20.0,
            ema_decay: 0.999,
            use_ema: true,
            freeze_encoder: false,
            objective: Objective::Ctc,
            joint_dim: 32,
            augment: true,
            seed: 0,
        }
    }
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.ema_decay > 0.0 && self.ema_decay < 1.0) {
            return Err(Error::Config("ema_decay must lie in (0, 1)".into()));
        }
        if self.warmup_scale <= 0.0 || self.encoder_lr < 0.0 || self.decoder_lr <= 0.0 {
            return Err(Error::Config(
                "learning rates and warmup_scale must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn warmups(&self) -> (usize, usize) {
        let s = |w: usize| ((w as f64 * self.warmup_scale).round() as usize).max(1);
        (s(self.encoder_warmup), s(self.decoder_warmup))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BatchItem {
    pub features: FeatureMatrix,
    pub source: Source,
    /// Present for synthesized items and for fine-tuning items.
    pub labels: Option<BTreeMap<Vocab, LabelSeq>>,
    /// Seeds item-level masking, augmentation and dropout.
    pub seed: u64,
}

impl BatchItem {
    pub fn validate(&self) -> Result<()> {
        if self.features.source != self.source {
            return Err(Error::Data(
                "item source disagrees with its features".into(),
            ));
        }
        if self.source == Source::Synthesized && self.labels.is_none() {
            return Err(Error::Data("synthesized item without labels".into()));
        }
        Ok(())
    }
}

/// `round(batch_size·synth_ratio)` synthesized items rendered on the fly from `text_pool`,
/// the rest drawn from `real_pool`, in shuffled order. Per-item randomness derives from
/// `(seed, step, item index)`, so results do not depend on `workers`.
#[allow(clippy::too_many_arguments)]
pub fn make_batch(
    real_pool: &[FeatureMatrix],
    text_pool: &[String],
    synth: &Synthesizer,
    batch_size: usize,
    synth_ratio: f64,
    seed: u64,
    step: u64,
    workers: usize,
) -> Result<Vec<BatchItem>> {
    if real_pool.is_empty() && text_pool.is_empty() {
        return Err(Error::Data("both speech and text pools are empty".into()));
    }
    let n_synth = (batch_size as f64 * synth_ratio).round() as usize;
    let n_real = batch_size - n_synth.min(batch_size);
    if n_synth > 0 && text_pool.is_empty() {
        return Err(Error::Data(
            "synthesized items requested but the text pool is empty".into(),
        ));
    }
    if n_real > 0 && real_pool.is_empty() {
        return Err(Error::Data(
            "real items requested but the speech pool is empty".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[step]));
    let mut kinds: Vec<bool> = (0..batch_size).map(|i| i < n_synth).collect();
    kinds.shuffle(&mut rng);
    let picks: Vec<usize> = kinds
        .iter()
        .map(|&s| rng.gen_range(0..if s { text_pool.len() } else { real_pool.len() }))
        .collect();
    parallel_map(batch_size, workers, |i| {
        let item_seed = derive_seed(seed, &[step, i as u64]);
        if kinds[i] {
            let mut r = ChaCha8Rng::seed_from_u64(derive_seed(item_seed, &[0x5e]));
            let u = synth.synth_on_the_fly(&text_pool[picks[i]], &mut r)?;
            let labels = BTreeMap::from([
                (Vocab::Phoneme, u.phonemes),
                (Vocab::Wordpiece, u.wordpieces),
            ]);
            Ok(BatchItem {
                features: u.features,
                source: Source::Synthesized,
                labels: Some(labels),
                seed: item_seed,
            })
        } else {
            let mut f = real_pool[picks[i]].clone();
            f.source = Source::Real;
            Ok(BatchItem {
                features: f,
                source: Source::Real,
                labels: None,
                seed: item_seed,
            })
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pseudotts::{LatentPrior, Lexicon, SynthConfig};
    use std::sync::OnceLock;

    fn synth() -> &'static Synthesizer {
        static S: OnceLock<Synthesizer> = OnceLock::new();
        S.get_or_init(|| {
            Synthesizer::new(
                Lexicon::toy(),
                LatentPrior::default(),
                SynthConfig::default(),
            )
            .unwrap()
        })
    }

    fn pool() -> Vec<FeatureMatrix> {
        (1..4)
            .map(|t| FeatureMatrix::new(t * 10, 80, vec![0.5; t * 800], Source::Real).unwrap())
            .collect()
    }

    fn texts() -> Vec<String> {
        vec!["ba ka".into(), "tomi".into()]
    }

    #[test]
    fn ratio_counts() {
        for (ratio, want) in [(0.0, 0), (1.0, 8), (0.5, 4), (0.3, 2)] {
            let b = make_batch(&pool(), &texts(), synth(), 8, ratio, 1, 0, 1).unwrap();
            let n = b.iter().filter(|i| i.source == Source::Synthesized).count();
            assert_eq!(n, want, "ratio {ratio}");
            for item in &b {
                item.validate().unwrap();
                assert_eq!(item.labels.is_some(), item.source == Source::Synthesized);
            }
        }
    }

    #[test]
    fn pools_checked() {
        assert!(make_batch(&[], &[], synth(), 4, 0.5, 0, 0, 1).is_err());
        assert!(make_batch(&pool(), &[], synth(), 4, 0.5, 0, 0, 1).is_err());
        assert!(make_batch(&[], &texts(), synth(), 4, 1.0, 0, 0, 1).is_ok());
    }

    #[test]
    fn batch_independent_of_workers() {
        let a = make_batch(&pool(), &texts(), synth(), 7, 0.5, 3, 9, 1).unwrap();
        let b = make_batch(&pool(), &texts(), synth(), 7, 0.5, 3, 9, 3).unwrap();
        assert_eq!(a, b);
        let c = make_batch(&pool(), &texts(), synth(), 7, 0.5, 3, 10, 1).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn seeds_are_distinct() {
        let s: std::collections::BTreeSet<u64> = (0..1000).map(|i| derive_seed(5, &[i])).collect();
        assert_eq!(s.len(), 1000);
        assert_ne!(derive_seed(1, &[2, 3]), derive_seed(1, &[3, 2]));
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig {
            warmup_steps: 0,
            ..TrainConfig::default()
        }
        .validate()
        .is_err());
        assert!(TrainConfig {
            ema_decay: 1.0,
            ..TrainConfig::default()
        }
        .validate()
        .is_err());
        let j = TrainConfig {
            phase: Phase::PretrainJoint,
            ..TrainConfig::default()
        };
        assert!((j.effective_peak_lr() - 4e-4).abs() < 1e-15);
        assert_eq!(TrainConfig::default().effective_synth_ratio(), 0.0);
        assert_eq!(FinetuneConfig::default().warmups(), (100, 30));
    }
}
