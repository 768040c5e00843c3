//! Training objectives: contrastive, CTC, transducer, and the σ-mixed total.

pub mod aux;
pub mod contrastive;
pub mod ctc;
pub mod rnnt;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Graph, Real, Tensor, Var};

pub use aux::{aux_loss, HeadSpec, Objective};
pub use contrastive::{contrastive_loss, info_nce, sample_candidates};
pub use ctc::{ctc_forward_backward, ctc_loss, min_frames};
pub use rnnt::{rnnt_forward_backward, rnnt_loss};

/// Reserved blank id in every vocabulary.
pub const BLANK: usize = 0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Vocab {
    Phoneme,
    Wordpiece,
}

impl Vocab {
    pub fn as_str(self) -> &'static str {
        match self {
            Vocab::Phoneme => "phoneme",
            Vocab::Wordpiece => "wordpiece",
        }
    }
}

/// Target token ids; never contains the blank.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct LabelSeq {
    pub ids: Vec<usize>,
    pub vocab: Vocab,
}

impl LabelSeq {
    pub fn new(ids: Vec<usize>, vocab: Vocab) -> Self {
        Self { ids, vocab }
    }

    pub fn validate(&self, vocab_size: usize) -> Result<()> {
        match self.ids.iter().find(|&&i| i == BLANK || i >= vocab_size) {
            Some(bad) => Err(Error::arg(format!(
                "{} label {bad} outside [1, {vocab_size})",
                self.vocab.as_str()
            ))),
            None => Ok(()),
        }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Whether an item is real speech (σ = 0) or synthesized from text (σ = 1).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Real,
    Synthesized,
}

impl Source {
    pub fn sigma(self) -> f64 {
        match self {
            Source::Real => 0.0,
            Source::Synthesized => 1.0,
        }
    }
}

/// Per-utterance loss nodes feeding [`total_loss`].
#[derive(Clone, Debug)]
pub struct ItemLoss {
    pub source: Source,
    /// Contrastive term; `None` when the utterance had too few masked frames.
    pub contrastive: Option<Var>,
    /// Auxiliary head losses; only synthesized items carry them.
    pub aux: Vec<(Vocab, Var)>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct LossBreakdown {
    /// Mean contrastive loss over real items.
    pub j_speech: f64,
    /// Mean contrastive loss over synthesized items.
    pub j_text: f64,
    /// Summed auxiliary loss averaged over synthesized items.
    pub j_aux: f64,
    pub j_aux_heads: BTreeMap<Vocab, f64>,
    pub total: f64,
    pub n_real: usize,
    pub n_synth: usize,
}

/// `J = mean_i[σ_i·J_text,i + (1−σ_i)·J_speech,i] + λ_aux·Σσ_i·J_aux,i / Σσ_i`.
///
/// Items without a contrastive term contribute zero to the first mean but
/// still count toward its denominator. Returns `None` for the node when no
/// item produced any loss term.
pub fn total_loss<F: Real>(
    g: &mut Graph<F>,
    items: &[ItemLoss],
    lambda_aux: f64,
) -> Result<(Option<Var>, LossBreakdown)> {
    if items.is_empty() {
        return Err(Error::arg("empty batch"));
    }
    let n = items.len() as f64;
    let mut bd = LossBreakdown::default();
    let mut speech_sum = 0.0;
    let mut text_sum = 0.0;
    let mut terms = Vec::new();
    let mut aux_terms = Vec::new();
    for item in items {
        match item.source {
            Source::Real => bd.n_real += 1,
            Source::Synthesized => bd.n_synth += 1,
        }
        if let Some(c) = item.contrastive {
            let v = g.value(c).item().f64();
            match item.source {
                Source::Real => speech_sum += v,
                Source::Synthesized => text_sum += v,
            }
            terms.push(c);
        }
        if item.source == Source::Synthesized {
            for &(vocab, a) in &item.aux {
                *bd.j_aux_heads.entry(vocab).or_default() += g.value(a).item().f64();
                aux_terms.push(a);
            }
        } else if !item.aux.is_empty() {
            return Err(Error::arg("auxiliary loss attached to a real item"));
        }
    }
    if bd.n_real > 0 {
        bd.j_speech = speech_sum / bd.n_real as f64;
    }
    if bd.n_synth > 0 {
        bd.j_text = text_sum / bd.n_synth as f64;
        for v in bd.j_aux_heads.values_mut() {
            *v /= bd.n_synth as f64;
        }
        bd.j_aux = bd.j_aux_heads.values().sum();
    }
    bd.total = (speech_sum + text_sum) / n + lambda_aux * bd.j_aux;

    let mut parts = Vec::new();
    if !terms.is_empty() {
        let s = g.add_all(&terms)?;
        parts.push(g.scale(s, F::of(1.0 / n)));
    }
    if !aux_terms.is_empty() && lambda_aux != 0.0 {
        let s = g.add_all(&aux_terms)?;
        parts.push(g.scale(s, F::of(lambda_aux / bd.n_synth as f64)));
    }
    let node = if parts.is_empty() {
        None
    } else {
        Some(g.add_all(&parts)?)
    };
    Ok((node, bd))
}

/// Scalar zero node, used where an objective is absent.
pub fn zero<F: Real>(g: &mut Graph<F>) -> Var {
    g.constant(Tensor::scalar(F::zero()))
}
