//! Experiment configuration and end-to-end runs over a toy corpus.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::corpus::{CorpusConfig, ToyCorpus, Utterance};
use super::decode::DecodeConfig;
use super::train::{
    evaluate, finetune_head, init_pretrain_params, run_finetuning, run_pretraining,
    start_finetuning, AuxConfig, MetricsLog, TrainState,
};
use super::{FinetuneConfig, Phase, TrainConfig};
use crate::encoder::{Encoder, EncoderConfig};
use crate::error::{Error, Result};
use crate::features::{AugmentPolicy, FeatureMatrix};
use crate::lm::Tokenization;
use crate::numerics::{ModelParams, Partition};
use crate::pseudotts::{LatentPrior, Lexicon, SynthConfig, Synthesizer};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LmConfig {
    pub select_order: usize,
    pub fusion_order: usize,
    pub fusion_tokenization: Tokenization,
    pub min_count: usize,
}

impl Default for LmConfig {
    fn default() -> Self {
        Self {
            select_order: 3,
            fusion_order: 2,
            fusion_tokenization: Tokenization::Words,
            min_count: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    pub data_dir: String,
    pub out_dir: String,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self {
            data_dir: "data".into(),
            out_dir: "runs".into(),
        }
    }
}

/// Everything a run needs. `seed` is copied into every phase by [`ExperimentConfig::resolved`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub encoder: EncoderConfig,
    pub pretrain: TrainConfig,
    pub joint: TrainConfig,
    pub finetune: FinetuneConfig,
    pub aux: AuxConfig,
    pub augment: AugmentPolicy,
    pub prior: LatentPrior,
    pub synth: SynthConfig,
    pub decode: DecodeConfig,
    pub lm: LmConfig,
    pub corpus: CorpusConfig,
    pub paths: PathsConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            encoder: EncoderConfig::default(),
            pretrain: TrainConfig::default(),
            joint: TrainConfig {
                phase: Phase::PretrainJoint,
                ..TrainConfig::default()
            },
            finetune: FinetuneConfig::default(),
            aux: AuxConfig::default(),
            augment: AugmentPolicy::default(),
            prior: LatentPrior::default(),
            synth: SynthConfig::default(),
            decode: DecodeConfig::default(),
            lm: LmConfig::default(),
            corpus: CorpusConfig::default(),
            paths: PathsConfig::default(),
        }
    }
}

impl ExperimentConfig {
    /// Small model and step budget that trains in minutes on one CPU.
    pub fn desk() -> Self {
        let mut c = Self::default();
        c.encoder = EncoderConfig {
            d_model: 32,
            n_layers: 2,
            n_heads: 2,
            conv_kernel: 7,
            subsample_channels: 4,
            ..EncoderConfig::default()
        };
        for t in [&mut c.pretrain, &mut c.joint] {
            t.steps = 600;
            t.batch_size = 8;
            t.peak_lr = 5e-3;
            t.joint_lr_factor = 1.0;
            t.warmup_steps = 50;
            t.ema_decay = 0.99;
            t.contrastive.mask_span = 3;
            t.contrastive.distractors = 20;
        }
        c.finetune.steps = 1500;
        c.finetune.encoder_lr = 2e-3;
        c.finetune.decoder_lr = 5e-3;
        c.finetune.ema_decay = 0.99;
        c
    }

    /// Copies the top-level seed into each phase and pins phase tags.
    pub fn resolved(mut self) -> Self {
        self.pretrain.phase = Phase::PretrainSpeechOnly;
        self.joint.phase = Phase::PretrainJoint;
        self.pretrain.seed = self.seed;
        self.joint.seed = self.seed;
        self.finetune.seed = self.seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.pretrain.validate()?;
        self.joint.validate()?;
        self.finetune.validate()?;
        self.augment.validate()?;
        self.prior.validate()?;
        self.decode.validate()?;
        if self.lm.select_order == 0 || self.lm.fusion_order == 0 {
            return Err(Error::Config("n-gram orders must be at least 1".into()));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Default < file < overrides < `seed_override`; the result is resolved and validated.
    pub fn load(
        base: Self,
        file: Option<&Path>,
        overrides: &[String],
        seed_override: Option<u64>,
    ) -> Result<Self> {
        let mut v = serde_json::to_value(&base).expect("config serializes");
        if let Some(p) = file {
            let text = std::fs::read_to_string(p)
                .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
            let f: Value = serde_json::from_str(&text)
                .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
            merge_json(&mut v, f, "")?;
        }
        for o in overrides {
            let (k, raw) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override {o:?} is not key=value")))?;
            set_dotted(&mut v, k.trim(), raw.trim())?;
        }
        let mut cfg: Self = serde_json::from_value(v).map_err(|e| Error::Config(e.to_string()))?;
        if let Some(s) = seed_override {
            cfg.seed = s;
        }
        let cfg = cfg.resolved();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn encoder(&self) -> Result<Encoder> {
        Encoder::new(self.encoder.clone())
    }

    pub fn synthesizer(&self, lex: Lexicon) -> Result<Synthesizer> {
        Synthesizer::new(lex, self.prior.clone(), self.synth.clone())
    }
}

/// Recursively overlays `src` onto `dst`, rejecting keys `dst` lacks.
fn merge_json(dst: &mut Value, src: Value, path: &str) -> Result<()> {
    match (dst, src) {
        (Value::Object(d), Value::Object(s)) => {
            for (k, v) in s {
                let sub = if path.is_empty() {
                    k.clone()
                } else {
                    format!("{path}.{k}")
                };
                match d.get_mut(&k) {
                    Some(slot) => merge_json(slot, v, &sub)?,
                    None => return Err(Error::Config(format!("unknown config key {sub}"))),
                }
            }
            Ok(())
        }
        (d, s) => {
            *d = s;
            Ok(())
        }
    }
}

/// Sets `a.b.c` to `raw` parsed as JSON, or as a string when it does not parse.
pub fn set_dotted(v: &mut Value, key: &str, raw: &str) -> Result<()> {
    let mut cur = v;
    for part in key.split('.') {
        cur = cur
            .as_object_mut()
            .and_then(|o| o.get_mut(part))
            .ok_or_else(|| Error::Config(format!("unknown config key {key}")))?;
    }
    *cur = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    Ok(())
}

/// Pretraining recipe used to produce a starting point for fine-tuning.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Variant {
    NoPretrain,
    SpeechOnly,
    Joint,
    /// Joint pretraining with `λ_aux = 0`.
    JointNoAux,
}

impl Variant {
    pub const ALL: [Variant; 4] = [
        Variant::NoPretrain,
        Variant::SpeechOnly,
        Variant::Joint,
        Variant::JointNoAux,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::NoPretrain => "none",
            Variant::SpeechOnly => "speech_only",
            Variant::Joint => "joint",
            Variant::JointNoAux => "joint_noaux",
        }
    }
}

/// Pretrained checkpoints (training weights and, when enabled, their moving average).
#[derive(Clone, Debug, Default)]
pub struct Pretrained {
    pub checkpoints: BTreeMap<Variant, TrainState>,
    pub logs: BTreeMap<Variant, MetricsLog>,
}

/// Speech-only pretraining, then joint pretraining initialized from it.
pub fn pretrain_variants(
    cfg: &ExperimentConfig,
    corpus: &ToyCorpus,
    variants: &[Variant],
    workers: usize,
) -> Result<Pretrained> {
    let encoder = cfg.encoder()?;
    let synth = cfg.synthesizer(corpus.lexicon.clone())?;
    let heads = cfg.aux.heads(&corpus.lexicon);
    let real: Vec<FeatureMatrix> = corpus.pretrain.iter().map(|u| u.features.clone()).collect();
    let mut out = Pretrained::default();
    let wants = |v: Variant| variants.contains(&v);
    if !(wants(Variant::SpeechOnly) || wants(Variant::Joint) || wants(Variant::JointNoAux)) {
        return Ok(out);
    }
    let mut state = TrainState::new(
        init_pretrain_params(&encoder, &[], cfg.seed)?,
        cfg.pretrain.use_ema,
    );
    let mut log = MetricsLog::default();
    run_pretraining(
        &mut state,
        &real,
        &corpus.unspoken,
        &synth,
        &encoder,
        &[],
        &cfg.augment,
        &cfg.pretrain,
        workers,
        &mut log,
    )?;
    for (v, lambda) in [
        (Variant::Joint, cfg.joint.lambda_aux),
        (Variant::JointNoAux, 0.0),
    ] {
        if !wants(v) {
            continue;
        }
        let jc = TrainConfig {
            lambda_aux: lambda,
            ..cfg.joint.clone()
        };
        let h = if lambda > 0.0 { heads.as_slice() } else { &[] };
        let mut js = TrainState::continue_from(&state.params, &encoder, h, jc.use_ema, cfg.seed)?;
        if let (Some(e), Some(prev)) = (js.ema.as_mut(), state.ema.as_ref()) {
            e.merge(prev);
        }
        let mut jl = log.clone();
        run_pretraining(
            &mut js,
            &real,
            &corpus.unspoken,
            &synth,
            &encoder,
            h,
            &cfg.augment,
            &jc,
            workers,
            &mut jl,
        )?;
        out.checkpoints.insert(v, js);
        out.logs.insert(v, jl);
    }
    if wants(Variant::SpeechOnly) {
        out.checkpoints.insert(Variant::SpeechOnly, state);
        out.logs.insert(Variant::SpeechOnly, log);
    }
    Ok(out)
}

/// Result of fine-tuning one variant.
#[derive(Clone, Debug)]
pub struct FinetuneRun {
    pub state: TrainState,
    pub log: MetricsLog,
    pub test_wer: f64,
}

/// Fine-tunes from the variant's training weights (or from scratch) and scores `test`.
#[allow(clippy::too_many_arguments)]
pub fn finetune_variant(
    cfg: &ExperimentConfig,
    pretrained: &Pretrained,
    variant: Variant,
    data: &[Utterance],
    test: &[Utterance],
    workers: usize,
) -> Result<FinetuneRun> {
    let encoder = cfg.encoder()?;
    let head = finetune_head(cfg.finetune.objective, cfg.finetune.joint_dim);
    let init: Option<&ModelParams> = match variant {
        Variant::NoPretrain => None,
        v => Some(
            &pretrained
                .checkpoints
                .get(&v)
                .ok_or_else(|| Error::Config(format!("variant {} was not pretrained", v.as_str())))?
                .params,
        ),
    };
    let mut state = start_finetuning(init, &encoder, &head, &cfg.finetune)?;
    let mut log = pretrained.logs.get(&variant).cloned().unwrap_or_default();
    run_finetuning(
        &mut state,
        data,
        &encoder,
        &head,
        &cfg.augment,
        &cfg.finetune,
        workers,
        &mut log,
    )?;
    let test_wer = evaluate(
        state.eval_params(),
        &encoder,
        &head,
        test,
        &cfg.decode,
        None,
        workers,
    )?;
    log.push_eval(variant.as_str(), "test", test_wer);
    Ok(FinetuneRun {
        state,
        log,
        test_wer,
    })
}

/// Pretrains and fine-tunes every requested variant.
pub fn run_variants(
    cfg: &ExperimentConfig,
    corpus: &ToyCorpus,
    variants: &[Variant],
    workers: usize,
) -> Result<BTreeMap<Variant, FinetuneRun>> {
    let pre = pretrain_variants(cfg, corpus, variants, workers)?;
    variants
        .iter()
        .map(|&v| {
            Ok((
                v,
                finetune_variant(cfg, &pre, v, &corpus.finetune, &corpus.test, workers)?,
            ))
        })
        .collect()
}

/// Encoder weights of a fine-tuned or pretrained state, for reuse.
pub fn encoder_weights(state: &TrainState) -> ModelParams {
    state.params.subset(Partition::Encoder)
}
