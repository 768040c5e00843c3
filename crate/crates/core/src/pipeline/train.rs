use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::corpus::Utterance;
use super::decode::{corpus_wer, decode_ctc, DecodeConfig};
use super::optim::{clip_global_norm, ema_update, lr_schedule, Adam};
use super::{derive_seed, make_batch, parallel_map, BatchItem, FinetuneConfig, Phase, TrainConfig};
use crate::encoder::{Encoder, MaskPlan};
use crate::error::{Error, Result};
use crate::features::{specaugment, AugmentPolicy, FeatureMatrix};
use crate::lm::NGramLM;
use crate::losses::{
    contrastive_loss, HeadSpec, LabelSeq, LossBreakdown, Objective, Source, Vocab,
};
use crate::numerics::{Graph, ModelParams, Partition, Tensor};
use crate::pseudotts::{
    vocab_size, wordpieces, wordpieces_to_text, Lexicon, Synthesizer, WORDPIECE_VOCAB,
};

/// Which auxiliary heads sit on top of the encoder during joint pretraining.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AuxConfig {
    pub phoneme: bool,
    pub wordpiece: bool,
    pub objective: Objective,
    pub joint_dim: usize,
}

impl Default for AuxConfig {
    fn default() -> Self {
        Self {
            phoneme: true,
            wordpiece: true,
            objective: Objective::Ctc,
            joint_dim: 32,
        }
    }
}

impl AuxConfig {
    pub fn heads(&self, lex: &Lexicon) -> Vec<HeadSpec> {
        let mut out = Vec::new();
        for (on, vocab, name) in [
            (self.phoneme, Vocab::Phoneme, "aux.phoneme"),
            (self.wordpiece, Vocab::Wordpiece, "aux.wordpiece"),
        ] {
            if on {
                out.push(HeadSpec {
                    name: name.into(),
                    vocab,
                    vocab_size: vocab_size(vocab, lex),
                    objective: self.objective,
                    joint_dim: self.joint_dim,
                });
            }
        }
        out
    }
}

/// Character-level head used for fine-tuning and decoding.
pub fn finetune_head(objective: Objective, joint_dim: usize) -> HeadSpec {
    HeadSpec {
        name: "ft.wordpiece".into(),
        vocab: Vocab::Wordpiece,
        vocab_size: WORDPIECE_VOCAB,
        objective,
        joint_dim,
    }
}

/// Fresh encoder plus auxiliary heads.
pub fn init_pretrain_params(
    encoder: &Encoder,
    heads: &[HeadSpec],
    seed: u64,
) -> Result<ModelParams> {
    let mut params = ModelParams::new();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[0xE0]));
    encoder.init_params(&mut params, &mut rng)?;
    add_heads(&mut params, encoder, heads, Partition::AuxDecoder, seed)?;
    Ok(params)
}

fn add_heads(
    params: &mut ModelParams,
    encoder: &Encoder,
    heads: &[HeadSpec],
    part: Partition,
    seed: u64,
) -> Result<()> {
    for (i, h) in heads.iter().enumerate() {
        if params.contains(&format!("{}.w", h.name))
            || params.contains(&format!("{}.enc_w", h.name))
        {
            continue;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[0xD0, i as u64]));
        h.init_params(encoder.cfg.d_model, part, params, &mut rng)?;
    }
    Ok(())
}

/// Weights, their moving average and optimizer state. Fine-tuning uses
/// `opt` for the encoder and `decoder_opt` for the head.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub params: ModelParams,
    pub ema: Option<ModelParams>,
    pub opt: Adam,
    pub decoder_opt: Adam,
    pub step: usize,
}

impl TrainState {
    pub fn new(params: ModelParams, use_ema: bool) -> Self {
        Self {
            ema: use_ema.then(|| params.clone()),
            params,
            opt: Adam::default(),
            decoder_opt: Adam::default(),
            step: 0,
        }
    }

    /// Weights used for evaluation.
    pub fn eval_params(&self) -> &ModelParams {
        self.ema.as_ref().unwrap_or(&self.params)
    }

    /// Continues from `params` (e.g. a speech-only checkpoint) with fresh optimizer state,
    /// adding any heads not yet present.
    pub fn continue_from(
        params: &ModelParams,
        encoder: &Encoder,
        heads: &[HeadSpec],
        use_ema: bool,
        seed: u64,
    ) -> Result<Self> {
        let mut p = params.clone();
        add_heads(&mut p, encoder, heads, Partition::AuxDecoder, seed)?;
        Ok(Self::new(p, use_ema))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepReport {
    pub step: usize,
    pub phase: Phase,
    pub breakdown: LossBreakdown,
    pub lr: f64,
    /// Before clipping.
    pub grad_norm: f64,
    /// False when the batch produced no loss term.
    pub updated: bool,
}

type Grads = Vec<(String, Tensor<f32>)>;

struct ItemResult {
    source: Source,
    contrastive: Option<f64>,
    aux: Vec<(Vocab, f64)>,
    grads: Grads,
}

fn collect_grads(g: &Graph<f32>, root: crate::numerics::Var) -> Result<Grads> {
    let grads = g.backward(root)?;
    Ok(g.bound_params()
        .iter()
        .filter_map(|(name, &v)| grads.get(v).map(|t| (name.clone(), t.clone())))
        .collect())
}

/// Sums per-item gradients in item order.
fn sum_grads(parts: impl Iterator<Item = Grads>) -> Grads {
    let mut acc: indexmap::IndexMap<String, Tensor<f32>> = indexmap::IndexMap::new();
    for part in parts {
        for (name, t) in part {
            match acc.get_mut(&name) {
                Some(a) => a.add_assign(&t),
                None => {
                    acc.insert(name, t);
                }
            }
        }
    }
    let mut out: Grads = acc.into_iter().collect();
    out.sort_by(|a, b| a.0.cmp(&b.0));
    out
}

fn check_finite(grads: &Grads, what: &str) -> Result<()> {
    match grads.iter().find(|(_, t)| !t.all_finite()) {
        Some((name, _)) => Err(Error::Numeric(format!(
            "non-finite gradient for {name} in {what}"
        ))),
        None => Ok(()),
    }
}

fn item_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Per-item pretraining loss. Every item contributes its contrastive term with weight `1/n`;
/// synthesized items add their auxiliary losses (computed on a SpecAugmented, unmasked pass)
/// with weight `λ/n_synth`. Summing these per-item graphs gives exactly the batch objective.
#[allow(clippy::too_many_arguments)]
fn pretrain_item(
    item: &BatchItem,
    params: &ModelParams,
    encoder: &Encoder,
    heads: &[HeadSpec],
    augment: &AugmentPolicy,
    cfg: &TrainConfig,
    n: usize,
    n_synth: usize,
) -> Result<ItemResult> {
    let mut rng = item_rng(item.seed);
    let mut g = Graph::<f32>::new();
    let c = &cfg.contrastive;
    let plan = MaskPlan::Spans {
        fraction: c.mask_fraction,
        span: c.mask_span,
    };
    let enc = encoder.encode(&mut g, params, &item.features, &plan, &mut rng, true)?;
    let contrastive = contrastive_loss(
        &mut g,
        enc.contexts,
        enc.targets,
        &enc.mask,
        c.distractors,
        c.temperature,
        &mut rng,
    )?;
    let mut terms = Vec::new();
    if let Some(v) = contrastive {
        terms.push(g.scale(v, 1.0 / n as f32));
    }
    let mut aux = Vec::new();
    if item.source == Source::Synthesized && cfg.lambda_aux > 0.0 && !heads.is_empty() {
        let labels = item
            .labels
            .as_ref()
            .ok_or_else(|| Error::Data("synthesized item without labels".into()))?;
        let feats = specaugment(&item.features, augment, &mut rng)?;
        let enc2 = encoder.encode(&mut g, params, &feats, &MaskPlan::None, &mut rng, true)?;
        let losses = crate::losses::aux_loss(&mut g, params, enc2.contexts, heads, labels)?;
        let w = (cfg.lambda_aux / n_synth as f64) as f32;
        for (vocab, v) in losses {
            aux.push((vocab, g.value(v).item() as f64));
            terms.push(g.scale(v, w));
        }
    }
    let contrastive = contrastive.map(|v| g.value(v).item() as f64);
    let grads = if terms.is_empty() {
        Vec::new()
    } else {
        let root = g.add_all(&terms)?;
        collect_grads(&g, root)?
    };
    Ok(ItemResult {
        source: item.source,
        contrastive,
        aux,
        grads,
    })
}

fn breakdown(items: &[ItemResult], lambda: f64) -> LossBreakdown {
    let mut bd = LossBreakdown::default();
    let (mut speech, mut text) = (0.0, 0.0);
    for it in items {
        match it.source {
            Source::Real => {
                bd.n_real += 1;
                speech += it.contrastive.unwrap_or(0.0);
            }
            Source::Synthesized => {
                bd.n_synth += 1;
                text += it.contrastive.unwrap_or(0.0);
                for &(v, x) in &it.aux {
                    *bd.j_aux_heads.entry(v).or_default() += x;
                }
            }
        }
    }
    if bd.n_real > 0 {
        bd.j_speech = speech / bd.n_real as f64;
    }
    if bd.n_synth > 0 {
        bd.j_text = text / bd.n_synth as f64;
        for v in bd.j_aux_heads.values_mut() {
            *v /= bd.n_synth as f64;
        }
        bd.j_aux = bd.j_aux_heads.values().sum();
    }
    bd.total = (speech + text) / items.len() as f64 + lambda * bd.j_aux;
    bd
}

/// One optimizer step of contrastive (+ auxiliary) pretraining.
///
/// In the speech-only phase every item is treated as real. Per-item graphs run on up to
/// `workers` threads; gradients are summed in item order, so results do not depend on `workers`.
#[allow(clippy::too_many_arguments)]
pub fn pretrain_step(
    state: &mut TrainState,
    batch: &[BatchItem],
    encoder: &Encoder,
    heads: &[HeadSpec],
    augment: &AugmentPolicy,
    cfg: &TrainConfig,
    workers: usize,
) -> Result<StepReport> {
    if batch.is_empty() {
        return Err(Error::arg("empty batch"));
    }
    let batch: Vec<BatchItem> = match cfg.phase {
        Phase::PretrainSpeechOnly => batch
            .iter()
            .map(|b| {
                let mut features = b.features.clone();
                features.source = Source::Real;
                BatchItem {
                    features,
                    source: Source::Real,
                    labels: None,
                    seed: b.seed,
                }
            })
            .collect(),
        Phase::PretrainJoint => batch.to_vec(),
        Phase::Finetune => {
            return Err(Error::Config(
                "pretrain_step called in the finetune phase".into(),
            ))
        }
    };
    for b in &batch {
        b.validate()?;
    }
    let n = batch.len();
    let n_synth = batch
        .iter()
        .filter(|b| b.source == Source::Synthesized)
        .count();
    let params = &state.params;
    let results = parallel_map(n, workers, |i| {
        pretrain_item(&batch[i], params, encoder, heads, augment, cfg, n, n_synth)
    })?;
    let bd = breakdown(&results, cfg.lambda_aux);
    if !bd.total.is_finite() {
        return Err(Error::Numeric(format!(
            "non-finite pretraining loss at step {}",
            state.step + 1
        )));
    }
    let mut grads = sum_grads(results.into_iter().map(|r| r.grads));
    check_finite(&grads, "pretraining")?;
    let step = state.step + 1;
    let lr = lr_schedule(step, cfg.effective_peak_lr(), cfg.warmup_steps);
    let updated = !grads.is_empty();
    let grad_norm = clip_global_norm(&mut grads, cfg.clip_norm);
    if updated {
        state.opt.step(&mut state.params, &grads, lr)?;
    }
    if let Some(ema) = state.ema.as_mut() {
        ema_update(ema, &state.params, cfg.ema_decay)?;
    }
    state.step = step;
    Ok(StepReport {
        step,
        phase: cfg.phase,
        breakdown: bd,
        lr,
        grad_norm,
        updated,
    })
}

/// Runs `cfg.steps` pretraining steps, logging one metrics row per step.
#[allow(clippy::too_many_arguments)]
pub fn run_pretraining(
    state: &mut TrainState,
    real_pool: &[FeatureMatrix],
    text_pool: &[String],
    synth: &Synthesizer,
    encoder: &Encoder,
    heads: &[HeadSpec],
    augment: &AugmentPolicy,
    cfg: &TrainConfig,
    workers: usize,
    log: &mut MetricsLog,
) -> Result<()> {
    cfg.validate()?;
    let seed = derive_seed(cfg.seed, &[cfg.phase.tag()]);
    for s in 0..cfg.steps {
        let batch = make_batch(
            real_pool,
            text_pool,
            synth,
            cfg.batch_size,
            cfg.effective_synth_ratio(),
            seed,
            s as u64,
            workers,
        )?;
        let r = pretrain_step(state, &batch, encoder, heads, augment, cfg, workers)?;
        log.push(&r);
    }
    Ok(())
}

/// Drops pretraining heads and attaches a fresh fine-tuning head. Without `pretrained`
/// the encoder is initialized from scratch.
pub fn start_finetuning(
    pretrained: Option<&ModelParams>,
    encoder: &Encoder,
    head: &HeadSpec,
    cfg: &FinetuneConfig,
) -> Result<TrainState> {
    let mut params = match pretrained {
        Some(p) => {
            let mut p = p.subset(Partition::Encoder);
            if p.is_empty() {
                return Err(Error::Data("checkpoint holds no encoder weights".into()));
            }
            p.remove_partition(Partition::FinetuneDecoder);
            p
        }
        None => {
            let mut p = ModelParams::new();
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[0xF0]));
            encoder.init_params(&mut p, &mut rng)?;
            p
        }
    };
    add_heads(
        &mut params,
        encoder,
        std::slice::from_ref(head),
        Partition::FinetuneDecoder,
        derive_seed(cfg.seed, &[0xF1]),
    )?;
    Ok(TrainState::new(params, cfg.use_ema))
}

/// One fine-tuning step: mean head loss over labeled items, encoder and decoder updated by
/// separate optimizers with their own schedules.
pub fn finetune_step(
    state: &mut TrainState,
    batch: &[BatchItem],
    encoder: &Encoder,
    head: &HeadSpec,
    augment: &AugmentPolicy,
    cfg: &FinetuneConfig,
    workers: usize,
) -> Result<StepReport> {
    if batch.is_empty() {
        return Err(Error::arg("empty batch"));
    }
    let mut targets = Vec::with_capacity(batch.len());
    for b in batch {
        let t = b
            .labels
            .as_ref()
            .and_then(|l| l.get(&head.vocab))
            .ok_or_else(|| Error::Data("unlabeled item in fine-tuning batch".into()))?;
        targets.push(t);
    }
    let n = batch.len();
    let params = &state.params;
    let results = parallel_map(n, workers, |i| -> Result<(f64, Grads)> {
        let mut rng = item_rng(batch[i].seed);
        let feats = if cfg.augment {
            specaugment(&batch[i].features, augment, &mut rng)?
        } else {
            batch[i].features.clone()
        };
        let mut g = Graph::<f32>::new();
        let enc = encoder.encode(&mut g, params, &feats, &MaskPlan::None, &mut rng, true)?;
        let contexts = if cfg.freeze_encoder {
            g.detach(enc.contexts)
        } else {
            enc.contexts
        };
        let loss = head.loss(&mut g, params, contexts, targets[i])?;
        let v = g.value(loss).item() as f64;
        let root = g.scale(loss, 1.0 / n as f32);
        Ok((v, collect_grads(&g, root)?))
    })?;
    let loss = results.iter().map(|r| r.0).sum::<f64>() / n as f64;
    if !loss.is_finite() {
        return Err(Error::Numeric(format!(
            "non-finite fine-tuning loss at step {}",
            state.step + 1
        )));
    }
    let mut grads = sum_grads(results.into_iter().map(|r| r.1));
    if cfg.freeze_encoder {
        grads.retain(|(name, _)| state.params.partition(name) != Some(Partition::Encoder));
    }
    check_finite(&grads, "fine-tuning")?;
    let grad_norm = clip_global_norm(&mut grads, cfg.clip_norm);
    let step = state.step + 1;
    let (enc_warm, dec_warm) = cfg.warmups();
    let enc_lr = lr_schedule(step, cfg.encoder_lr, enc_warm);
    let dec_lr = lr_schedule(step, cfg.decoder_lr, dec_warm);
    let (enc_grads, dec_grads): (Grads, Grads) = grads
        .into_iter()
        .partition(|(name, _)| state.params.partition(name) == Some(Partition::Encoder));
    if !enc_grads.is_empty() && enc_lr > 0.0 {
        state.opt.step(&mut state.params, &enc_grads, enc_lr)?;
    }
    state
        .decoder_opt
        .step(&mut state.params, &dec_grads, dec_lr)?;
    if let Some(ema) = state.ema.as_mut() {
        ema_update(ema, &state.params, cfg.ema_decay)?;
    }
    state.step = step;
    Ok(StepReport {
        step,
        phase: Phase::Finetune,
        breakdown: LossBreakdown {
            total: loss,
            n_real: n,
            ..LossBreakdown::default()
        },
        lr: dec_lr,
        grad_norm,
        updated: true,
    })
}

/// Labeled fine-tuning item for `text`.
pub fn labeled_item(features: FeatureMatrix, text: &str, seed: u64) -> Result<BatchItem> {
    let labels = BTreeMap::from([(Vocab::Wordpiece, wordpieces(text)?)]);
    Ok(BatchItem {
        source: features.source,
        features,
        labels: Some(labels),
        seed,
    })
}

/// Runs `cfg.steps` fine-tuning steps on batches drawn uniformly from `data`.
#[allow(clippy::too_many_arguments)]
pub fn run_finetuning(
    state: &mut TrainState,
    data: &[Utterance],
    encoder: &Encoder,
    head: &HeadSpec,
    augment: &AugmentPolicy,
    cfg: &FinetuneConfig,
    workers: usize,
    log: &mut MetricsLog,
) -> Result<()> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Data("no labeled utterances for fine-tuning".into()));
    }
    let labels: Vec<LabelSeq> = data
        .iter()
        .map(|u| {
            let text = u
                .text
                .as_deref()
                .ok_or_else(|| Error::Data(format!("utterance {} has no text", u.id)))?;
            wordpieces(text)
        })
        .collect::<Result<_>>()?;
    let seed = derive_seed(cfg.seed, &[Phase::Finetune.tag()]);
    for s in 0..cfg.steps {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[s as u64]));
        let batch: Vec<BatchItem> = (0..cfg.batch_size)
            .map(|i| {
                let k = rng.gen_range(0..data.len());
                BatchItem {
                    features: data[k].features.clone(),
                    source: data[k].features.source,
                    labels: Some(BTreeMap::from([(Vocab::Wordpiece, labels[k].clone())])),
                    seed: derive_seed(seed, &[s as u64, i as u64]),
                }
            })
            .collect();
        let r = finetune_step(state, &batch, encoder, head, augment, cfg, workers)?;
        log.push(&r);
    }
    Ok(())
}

/// Decodes one utterance to text.
pub fn transcribe(
    params: &ModelParams,
    encoder: &Encoder,
    head: &HeadSpec,
    features: &FeatureMatrix,
    dcfg: &DecodeConfig,
    lm: Option<&NGramLM>,
) -> Result<String> {
    let enc = encoder.encode_eval(params, features)?;
    let ids = match head.objective {
        Objective::Ctc => {
            let mut g = Graph::<f32>::new();
            let c = g.constant(enc.contexts);
            let logits = head.ctc_logits(&mut g, params, c)?;
            decode_ctc(&g.value(logits).log_softmax(), dcfg, lm)?
        }
        Objective::Rnnt => head.rnnt_greedy(params, &enc.contexts, 4)?,
    };
    Ok(wordpieces_to_text(&ids)
        .split_whitespace()
        .collect::<Vec<_>>()
        .join(" "))
}

/// Hypotheses for each utterance, in order.
pub fn transcribe_all(
    params: &ModelParams,
    encoder: &Encoder,
    head: &HeadSpec,
    utts: &[Utterance],
    dcfg: &DecodeConfig,
    lm: Option<&NGramLM>,
    workers: usize,
) -> Result<Vec<String>> {
    parallel_map(utts.len(), workers, |i| {
        transcribe(params, encoder, head, &utts[i].features, dcfg, lm)
    })
}

/// Corpus WER over labeled utterances.
pub fn evaluate(
    params: &ModelParams,
    encoder: &Encoder,
    head: &HeadSpec,
    utts: &[Utterance],
    dcfg: &DecodeConfig,
    lm: Option<&NGramLM>,
    workers: usize,
) -> Result<f64> {
    let hyps = transcribe_all(params, encoder, head, utts, dcfg, lm, workers)?;
    let pairs: Vec<(String, String)> = utts
        .iter()
        .zip(hyps)
        .map(|(u, h)| {
            let r = u
                .text
                .clone()
                .ok_or_else(|| Error::Data(format!("utterance {} has no text", u.id)))?;
            Ok((r, h))
        })
        .collect::<Result<_>>()?;
    corpus_wer(&pairs)
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub step: usize,
    pub phase: Phase,
    pub j_speech: f64,
    pub j_text: f64,
    pub j_aux: f64,
    pub total: f64,
    pub lr: f64,
    pub grad_norm: f64,
}

/// Per-step training metrics and per-checkpoint evaluation results.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricsLog {
    pub rows: Vec<MetricsRow>,
    pub evals: Vec<(String, String, f64)>,
}

pub const METRICS_HEADER: &str = "step,phase,j_speech,j_text,j_aux,total,lr,grad_norm";
pub const EVAL_HEADER: &str = "checkpoint,set,wer";

impl MetricsLog {
    pub fn push(&mut self, r: &StepReport) {
        self.rows.push(MetricsRow {
            step: r.step,
            phase: r.phase,
            j_speech: r.breakdown.j_speech,
            j_text: r.breakdown.j_text,
            j_aux: r.breakdown.j_aux,
            total: r.breakdown.total,
            lr: r.lr,
            grad_norm: r.grad_norm,
        });
    }

    pub fn push_eval(&mut self, checkpoint: &str, set: &str, wer: f64) {
        self.evals.push((checkpoint.into(), set.into(), wer));
    }

    pub fn to_csv(&self) -> String {
        let mut s = format!("{METRICS_HEADER}\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{}",
                r.step,
                r.phase.as_str(),
                r.j_speech,
                r.j_text,
                r.j_aux,
                r.total,
                r.lr,
                r.grad_norm
            );
        }
        s
    }

    pub fn eval_csv(&self) -> String {
        let mut s = format!("{EVAL_HEADER}\n");
        for (c, set, w) in &self.evals {
            let _ = writeln!(s, "{c},{set},{w}");
        }
        s
    }

    /// Appends rows to `path`, writing the header when the file is new.
    pub fn append_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        append(path.as_ref(), METRICS_HEADER, self.to_csv().lines().skip(1))
    }

    pub fn append_eval_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        append(path.as_ref(), EVAL_HEADER, self.eval_csv().lines().skip(1))
    }
}

fn append<'a>(path: &Path, header: &str, lines: impl Iterator<Item = &'a str>) -> Result<()> {
    use std::io::Write;
    let fresh = !path.exists();
    let mut f = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)?;
    if fresh {
        writeln!(f, "{header}")?;
    }
    for l in lines {
        writeln!(f, "{l}")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::EncoderConfig;
    use crate::losses::{aux_loss, total_loss, ItemLoss};
    use crate::pseudotts::{LatentPrior, SynthConfig};
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

    fn tiny() -> Encoder {
        Encoder::new(EncoderConfig {
            d_model: 16,
            n_layers: 1,
            n_heads: 2,
            conv_kernel: 3,
            subsample_channels: 2,
            ..EncoderConfig::default()
        })
        .unwrap()
    }

    fn cfg(phase: Phase) -> TrainConfig {
        TrainConfig {
            phase,
            batch_size: 4,
            warmup_steps: 1,
            peak_lr: 1e-3,
            joint_lr_factor: 1.0,
            contrastive: super::super::ContrastiveConfig {
                mask_span: 2,
                distractors: 4,
                ..Default::default()
            },
            ..TrainConfig::default()
        }
    }

    fn real(seed: u64, frames: usize) -> FeatureMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let v = (0..frames * 80).map(|_| rng.gen_range(-3.0..3.0)).collect();
        FeatureMatrix::new(frames, 80, v, Source::Real).unwrap()
    }

    fn joint_batch() -> Vec<BatchItem> {
        let texts = vec!["ba ti".to_string(), "kumo".to_string()];
        let pool: Vec<FeatureMatrix> = (0..3).map(|i| real(i, 40)).collect();
        make_batch(&pool, &texts, synth(), 4, 0.5, 7, 0, 1).unwrap()
    }

    #[test]
    fn per_item_sum_matches_batch_objective() {
        let enc = tiny();
        let heads = AuxConfig::default().heads(&synth().lexicon);
        let params = init_pretrain_params(&enc, &heads, 1).unwrap();
        let batch = joint_batch();
        let c = cfg(Phase::PretrainJoint);
        let aug = AugmentPolicy::default();
        let n_synth = batch
            .iter()
            .filter(|b| b.source == Source::Synthesized)
            .count();
        let items: Vec<ItemResult> = batch
            .iter()
            .map(|b| {
                pretrain_item(b, &params, &enc, &heads, &aug, &c, batch.len(), n_synth).unwrap()
            })
            .collect();
        let bd = breakdown(&items, c.lambda_aux);
        let grads = sum_grads(items.into_iter().map(|r| r.grads));

        // Same randomness in one shared graph through total_loss.
        let mut g = Graph::<f32>::new();
        let mut losses = Vec::new();
        for b in &batch {
            let mut rng = item_rng(b.seed);
            let plan = MaskPlan::Spans {
                fraction: 0.5,
                span: 2,
            };
            let e = enc
                .encode(&mut g, &params, &b.features, &plan, &mut rng, true)
                .unwrap();
            let cl =
                contrastive_loss(&mut g, e.contexts, e.targets, &e.mask, 4, 0.1, &mut rng).unwrap();
            let mut aux = Vec::new();
            if b.source == Source::Synthesized {
                let f = specaugment(&b.features, &aug, &mut rng).unwrap();
                let e2 = enc
                    .encode(&mut g, &params, &f, &MaskPlan::None, &mut rng, true)
                    .unwrap();
                aux = aux_loss(
                    &mut g,
                    &params,
                    e2.contexts,
                    &heads,
                    b.labels.as_ref().unwrap(),
                )
                .unwrap();
            }
            losses.push(ItemLoss {
                source: b.source,
                contrastive: cl,
                aux,
            });
        }
        let (root, want) = total_loss(&mut g, &losses, c.lambda_aux).unwrap();
        assert!((bd.total - want.total).abs() < 1e-4 * want.total.abs().max(1.0));
        assert!((bd.j_aux - want.j_aux).abs() < 1e-4 * want.j_aux.abs().max(1.0));
        let full = collect_grads(&g, root.unwrap()).unwrap();
        let full: BTreeMap<_, _> = full.into_iter().collect();
        assert_eq!(full.len(), grads.len());
        for (name, t) in &grads {
            let o = &full[name];
            for (a, b) in t.data().iter().zip(o.data()) {
                assert!(
                    (a - b).abs() <= 1e-4 * (1.0 + b.abs()),
                    "{name}: {a} vs {b}"
                );
            }
        }
    }

    #[test]
    fn speech_only_overfits_one_batch() {
        let enc = tiny();
        let params = init_pretrain_params(&enc, &[], 2).unwrap();
        let mut state = TrainState::new(params, true);
        let pool: Vec<FeatureMatrix> = (0..4).map(|i| real(10 + i, 48)).collect();
        let batch = make_batch(&pool, &[], synth(), 4, 0.0, 3, 0, 1).unwrap();
        let c = cfg(Phase::PretrainSpeechOnly);
        let aug = AugmentPolicy::none();
        let first = pretrain_step(&mut state, &batch, &enc, &[], &aug, &c, 1)
            .unwrap()
            .breakdown
            .total;
        let mut last = first;
        for _ in 0..5 {
            last = pretrain_step(&mut state, &batch, &enc, &[], &aug, &c, 1)
                .unwrap()
                .breakdown
                .total;
        }
        assert!(last < first, "{first} -> {last}");
    }

    #[test]
    fn real_items_leave_decoder_untouched() {
        let enc = tiny();
        let heads = AuxConfig::default().heads(&synth().lexicon);
        let params = init_pretrain_params(&enc, &heads, 3).unwrap();
        let pool: Vec<FeatureMatrix> = (0..2).map(|i| real(20 + i, 120)).collect();
        let batch = make_batch(&pool, &[], synth(), 3, 0.0, 3, 0, 1).unwrap();
        let c = cfg(Phase::PretrainJoint);
        let n = batch.len();
        for b in &batch {
            let r = pretrain_item(
                b,
                &params,
                &enc,
                &heads,
                &AugmentPolicy::default(),
                &c,
                n,
                0,
            )
            .unwrap();
            assert!(!r.grads.is_empty());
            for (name, t) in &r.grads {
                if params.partition(name) == Some(Partition::AuxDecoder) {
                    assert_eq!(t.max_abs(), 0.0, "{name}");
                }
            }
        }
        // And with synthesized items the heads do receive gradient.
        let r = pretrain_item(
            &joint_batch()
                .into_iter()
                .find(|b| b.source == Source::Synthesized)
                .unwrap(),
            &params,
            &enc,
            &heads,
            &AugmentPolicy::default(),
            &c,
            4,
            2,
        )
        .unwrap();
        assert!(r
            .grads
            .iter()
            .any(|(n, t)| n.starts_with("aux.") && t.max_abs() > 0.0));
    }

    #[test]
    fn one_frame_utterance_is_finite() {
        let enc = tiny();
        let mut state = TrainState::new(init_pretrain_params(&enc, &[], 4).unwrap(), true);
        let batch = vec![BatchItem {
            features: real(1, 1),
            source: Source::Real,
            labels: None,
            seed: 9,
        }];
        let r = pretrain_step(
            &mut state,
            &batch,
            &enc,
            &[],
            &AugmentPolicy::none(),
            &cfg(Phase::PretrainSpeechOnly),
            1,
        )
        .unwrap();
        assert!(r.breakdown.total.is_finite());
    }

    #[test]
    fn clipping_and_workers() {
        let enc = tiny();
        let heads = AuxConfig::default().heads(&synth().lexicon);
        let params = init_pretrain_params(&enc, &heads, 5).unwrap();
        let batch = joint_batch();
        let c = TrainConfig {
            clip_norm: 0.5,
            ..cfg(Phase::PretrainJoint)
        };
        let mut a = TrainState::new(params.clone(), true);
        let mut b = TrainState::new(params, true);
        let ra = pretrain_step(
            &mut a,
            &batch,
            &enc,
            &heads,
            &AugmentPolicy::default(),
            &c,
            1,
        )
        .unwrap();
        let rb = pretrain_step(
            &mut b,
            &batch,
            &enc,
            &heads,
            &AugmentPolicy::default(),
            &c,
            3,
        )
        .unwrap();
        assert_eq!(ra, rb);
        assert_eq!(a.params, b.params);
        assert_eq!(a.ema, b.ema);
        assert!(ra.grad_norm > 0.5);
    }

    fn labeled(n: usize) -> Vec<Utterance> {
        let texts = ["ba", "ti", "ko", "mu", "se"];
        (0..n)
            .map(|i| {
                let z = crate::pseudotts::SynthesisLatent::neutral(&synth().prior, 0, 1);
                let (ph, _) = crate::pseudotts::labels_for(texts[i], &synth().lexicon).unwrap();
                let mut f = synth().synthesize(&ph, &z).unwrap();
                f.source = Source::Real;
                Utterance {
                    id: format!("u-s-{i}"),
                    speaker: "s".into(),
                    text: Some(texts[i].into()),
                    features: f,
                }
            })
            .collect()
    }

    #[test]
    fn frozen_encoder_is_bit_identical() {
        let enc = tiny();
        let head = finetune_head(Objective::Ctc, 8);
        let fc = FinetuneConfig {
            freeze_encoder: true,
            steps: 3,
            batch_size: 2,
            ..FinetuneConfig::default()
        };
        let pre = init_pretrain_params(&enc, &[], 6).unwrap();
        let mut state = start_finetuning(Some(&pre), &enc, &head, &fc).unwrap();
        let before = state.params.subset(Partition::Encoder);
        let mut log = MetricsLog::default();
        run_finetuning(
            &mut state,
            &labeled(3),
            &enc,
            &head,
            &AugmentPolicy::default(),
            &fc,
            1,
            &mut log,
        )
        .unwrap();
        assert_eq!(state.params.subset(Partition::Encoder), before);
        assert_ne!(
            state.params.subset(Partition::FinetuneDecoder),
            start_finetuning(Some(&pre), &enc, &head, &fc)
                .unwrap()
                .params
                .subset(Partition::FinetuneDecoder)
        );
        assert_eq!(log.rows.len(), 3);
    }

    #[test]
    fn finetune_rejects_unlabeled() {
        let enc = tiny();
        let head = finetune_head(Objective::Ctc, 8);
        let fc = FinetuneConfig::default();
        let mut state = start_finetuning(None, &enc, &head, &fc).unwrap();
        let batch = vec![BatchItem {
            features: real(1, 30),
            source: Source::Real,
            labels: None,
            seed: 0,
        }];
        assert!(matches!(
            finetune_step(
                &mut state,
                &batch,
                &enc,
                &head,
                &AugmentPolicy::none(),
                &fc,
                1
            ),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn pretraining_heads_are_discarded() {
        let enc = tiny();
        let heads = AuxConfig::default().heads(&synth().lexicon);
        let pre = init_pretrain_params(&enc, &heads, 7).unwrap();
        let st = start_finetuning(
            Some(&pre),
            &enc,
            &finetune_head(Objective::Rnnt, 8),
            &FinetuneConfig::default(),
        )
        .unwrap();
        assert!(st.params.names().all(|n| !n.starts_with("aux.")));
        assert!(st.params.contains("ft.wordpiece.enc_w"));
    }

    #[test]
    fn overfits_five_utterances() {
        let enc = tiny();
        let head = finetune_head(Objective::Ctc, 8);
        let fc = FinetuneConfig {
            steps: 400,
            batch_size: 5,
            encoder_lr: 3e-3,
            decoder_lr: 1e-2,
            warmup_scale: 0.01,
            augment: false,
            use_ema: false,
            ..FinetuneConfig::default()
        };
        let data = labeled(5);
        let mut state = start_finetuning(None, &enc, &head, &fc).unwrap();
        let mut log = MetricsLog::default();
        run_finetuning(
            &mut state,
            &data,
            &enc,
            &head,
            &AugmentPolicy::none(),
            &fc,
            2,
            &mut log,
        )
        .unwrap();
        let w = evaluate(
            state.eval_params(),
            &enc,
            &head,
            &data,
            &DecodeConfig::default(),
            None,
            1,
        )
        .unwrap();
        assert_eq!(w, 0.0, "final loss {}", log.rows.last().unwrap().total);
    }

    #[test]
    fn metrics_csv_layout() {
        let mut log = MetricsLog::default();
        log.push(&StepReport {
            step: 1,
            phase: Phase::PretrainJoint,
            breakdown: LossBreakdown {
                j_speech: 1.5,
                total: 2.0,
                ..Default::default()
            },
            lr: 0.25,
            grad_norm: 3.0,
            updated: true,
        });
        log.push_eval("ckpt", "test", 0.125);
        assert_eq!(
            log.to_csv(),
            format!("{METRICS_HEADER}\n1,pretrain_joint,1.5,0,0,2,0.25,3\n")
        );
        assert_eq!(log.eval_csv(), "checkpoint,set,wer\nckpt,test,0.125\n");
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.csv");
        log.append_csv(&p).unwrap();
        log.append_csv(&p).unwrap();
        assert_eq!(std::fs::read_to_string(&p).unwrap().lines().count(), 3);
    }
}
