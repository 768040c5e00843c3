use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lm::{NGramLM, Tokenization, EOS, SPACE_TOKEN};
use crate::losses::BLANK;
use crate::numerics::Tensor;
use crate::pseudotts::{wordpiece_char, wordpiece_id};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecodeMode {
    Greedy,
    Beam,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecodeConfig {
    pub mode: DecodeMode,
    pub beam_width: usize,
    /// Shallow-fusion weight on the external LM.
    pub beta: f64,
    /// Per-frame candidates must lie within this many nats of the best label.
    pub prune: f64,
    /// ARPA file for fusion.
    pub lm: Option<String>,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            mode: DecodeMode::Greedy,
            beam_width: 8,
            beta: 0.0,
            prune: 8.0,
            lm: None,
        }
    }
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.beam_width < 1 {
            return Err(Error::Config("beam_width must be at least 1".into()));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(Error::Config("fusion beta must be non-negative".into()));
        }
        Ok(())
    }
}

/// Per-frame argmax with repeats merged and blanks removed.
pub fn greedy_ctc(log_probs: &Tensor<f32>) -> Vec<usize> {
    let (t, v) = log_probs.rows_cols();
    let mut out = Vec::new();
    let mut prev = BLANK;
    for i in 0..t {
        let row = &log_probs.data()[i * v..(i + 1) * v];
        let mut best = 0;
        for (j, &x) in row.iter().enumerate() {
            if x > row[best] {
                best = j;
            }
        }
        if best != BLANK && best != prev {
            out.push(best);
        }
        prev = best;
    }
    out
}

#[derive(Clone, Debug)]
struct Hyp {
    b: f64,
    nb: f64,
    lm: f64,
}

impl Hyp {
    fn acoustic(&self) -> f64 {
        self.b.max(self.nb)
    }

    fn score(&self) -> f64 {
        self.acoustic() + self.lm
    }
}

fn words_of(prefix: &[usize]) -> Vec<String> {
    let text: String = prefix.iter().filter_map(|&i| wordpiece_char(i)).collect();
    text.split(' ').map(String::from).collect()
}

/// LM score added when `c` extends `prefix`.
fn fusion_increment(lm: &NGramLM, prefix: &[usize], c: usize, beta: f64) -> f64 {
    if beta == 0.0 {
        return 0.0;
    }
    match lm.tokenization() {
        Tokenization::Words => {
            if wordpiece_char(c) != Some(' ') {
                return 0.0;
            }
            let words = words_of(prefix);
            let (last, prev) = words.split_last().unwrap();
            if last.is_empty() {
                return 0.0;
            }
            let hist: Vec<&str> = prev
                .iter()
                .filter(|w| !w.is_empty())
                .map(String::as_str)
                .collect();
            beta * lm.next_logprob(&hist, last)
        }
        Tokenization::Chars => {
            let toks: Vec<String> = prefix.iter().map(|&i| char_token(i)).collect();
            let refs: Vec<&str> = toks.iter().map(String::as_str).collect();
            beta * lm.next_logprob(&refs, &char_token(c))
        }
    }
}

fn char_token(id: usize) -> String {
    match wordpiece_char(id) {
        Some(' ') => SPACE_TOKEN.to_string(),
        Some(c) => c.to_string(),
        None => "<unk>".into(),
    }
}

/// LM score for closing a hypothesis: pending word plus `</s>`.
fn fusion_final(lm: &NGramLM, prefix: &[usize], beta: f64) -> f64 {
    if beta == 0.0 {
        return 0.0;
    }
    match lm.tokenization() {
        Tokenization::Words => {
            let words: Vec<String> = words_of(prefix)
                .into_iter()
                .filter(|w| !w.is_empty())
                .collect();
            let refs: Vec<&str> = words.iter().map(String::as_str).collect();
            let ends_with_space = prefix.last().and_then(|&i| wordpiece_char(i)) == Some(' ');
            let mut s = 0.0;
            if !ends_with_space && !refs.is_empty() {
                s += lm.next_logprob(&refs[..refs.len() - 1], refs[refs.len() - 1]);
            }
            beta * (s + lm.next_logprob(&refs, EOS))
        }
        Tokenization::Chars => {
            let toks: Vec<String> = prefix.iter().map(|&i| char_token(i)).collect();
            let refs: Vec<&str> = toks.iter().map(String::as_str).collect();
            beta * lm.next_logprob(&refs, EOS)
        }
    }
}

/// Prefix beam search over CTC log-posteriors `[T×V]`. Prefix scores use the best
/// alignment (max over paths), so a width-1 beam without LM reproduces greedy decoding.
/// With an LM, `β·ln p` is added per emitted token (word LMs score at word ends).
pub fn prefix_beam_search(
    log_probs: &Tensor<f32>,
    beam_width: usize,
    prune: f64,
    lm: Option<&NGramLM>,
    beta: f64,
) -> Result<Vec<usize>> {
    if beam_width < 1 {
        return Err(Error::arg("beam_width must be at least 1"));
    }
    let (t_len, v) = log_probs.rows_cols();
    let mut beam: Vec<(Vec<usize>, Hyp)> = vec![(
        Vec::new(),
        Hyp {
            b: 0.0,
            nb: f64::NEG_INFINITY,
            lm: 0.0,
        },
    )];
    for t in 0..t_len {
        let row: Vec<f64> = log_probs.data()[t * v..(t + 1) * v]
            .iter()
            .map(|&x| x as f64)
            .collect();
        let top = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let cands: Vec<usize> = (0..v)
            .filter(|&c| c != BLANK && row[c] >= top - prune)
            .collect();
        let mut next: HashMap<Vec<usize>, Hyp> = HashMap::new();
        let touch = |next: &mut HashMap<Vec<usize>, Hyp>,
                     prefix: Vec<usize>,
                     lm_score: f64,
                     b: f64,
                     nb: f64| {
            let h = next.entry(prefix).or_insert(Hyp {
                b: f64::NEG_INFINITY,
                nb: f64::NEG_INFINITY,
                lm: lm_score,
            });
            h.b = h.b.max(b);
            h.nb = h.nb.max(nb);
        };
        for (prefix, h) in &beam {
            let total = h.acoustic();
            touch(
                &mut next,
                prefix.clone(),
                h.lm,
                total + row[BLANK],
                f64::NEG_INFINITY,
            );
            let last = prefix.last().copied();
            if let Some(l) = last {
                touch(
                    &mut next,
                    prefix.clone(),
                    h.lm,
                    f64::NEG_INFINITY,
                    h.nb + row[l],
                );
            }
            for &c in &cands {
                let from = if Some(c) == last { h.b } else { total };
                if from == f64::NEG_INFINITY {
                    continue;
                }
                let lm_score = h.lm + lm.map_or(0.0, |m| fusion_increment(m, prefix, c, beta));
                let mut p = prefix.clone();
                p.push(c);
                touch(&mut next, p, lm_score, f64::NEG_INFINITY, from + row[c]);
            }
        }
        let mut ranked: Vec<(Vec<usize>, Hyp)> = next.into_iter().collect();
        ranked.sort_by(|a, b| {
            b.1.score()
                .total_cmp(&a.1.score())
                .then_with(|| a.0.cmp(&b.0))
        });
        ranked.truncate(beam_width);
        beam = ranked;
    }
    let best = beam
        .into_iter()
        .map(|(p, h)| {
            let s = h.score() + lm.map_or(0.0, |m| fusion_final(m, &p, beta));
            (p, s)
        })
        .max_by(|a, b| a.1.total_cmp(&b.1).then_with(|| b.0.cmp(&a.0)))
        .map(|(p, _)| p)
        .unwrap_or_default();
    Ok(best)
}

pub fn decode_ctc(
    log_probs: &Tensor<f32>,
    cfg: &DecodeConfig,
    lm: Option<&NGramLM>,
) -> Result<Vec<usize>> {
    cfg.validate()?;
    match cfg.mode {
        DecodeMode::Greedy => Ok(greedy_ctc(log_probs)),
        DecodeMode::Beam => prefix_beam_search(log_probs, cfg.beam_width, cfg.prune, lm, cfg.beta),
    }
}

/// Word-level Levenshtein distance with unit costs.
pub fn edit_distance<S: AsRef<str>>(reference: &[S], hyp: &[S]) -> usize {
    let mut prev: Vec<usize> = (0..=hyp.len()).collect();
    for (i, r) in reference.iter().enumerate() {
        let mut cur = vec![i + 1; hyp.len() + 1];
        for (j, h) in hyp.iter().enumerate() {
            let sub = prev[j] + usize::from(r.as_ref() != h.as_ref());
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        prev = cur;
    }
    prev[hyp.len()]
}

pub fn wer<S: AsRef<str>>(reference: &[S], hyp: &[S]) -> Result<f64> {
    if reference.is_empty() {
        return Err(Error::arg("reference is empty"));
    }
    Ok(edit_distance(reference, hyp) as f64 / reference.len() as f64)
}

/// Total edits over total reference words.
pub fn corpus_wer<S: AsRef<str>>(pairs: &[(S, S)]) -> Result<f64> {
    let mut edits = 0;
    let mut words = 0;
    for (r, h) in pairs {
        let r: Vec<&str> = r.as_ref().split_whitespace().collect();
        let h: Vec<&str> = h.as_ref().split_whitespace().collect();
        if r.is_empty() {
            return Err(Error::arg("reference is empty"));
        }
        edits += edit_distance(&r, &h);
        words += r.len();
    }
    if words == 0 {
        return Err(Error::arg("no references"));
    }
    Ok(edits as f64 / words as f64)
}

/// Character ids for `text`, skipping characters outside the vocabulary.
pub fn text_to_ids(text: &str) -> Vec<usize> {
    text.chars().filter_map(wordpiece_id).collect()
}
