//! Witten-Bell n-gram language models, contrastive text selection, and fusion scores.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use indexmap::IndexSet;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const UNK: &str = "<unk>";
pub const BOS: &str = "<s>";
pub const EOS: &str = "</s>";
/// Character-level stand-in for a space.
pub const SPACE_TOKEN: &str = "_";

const UNK_ID: u32 = 0;
const EOS_ID: u32 = 1;
const BOS_ID: u32 = 2;
/// Log-probability written for `<s>`, which is never predicted.
const BOS_LOGPROB: f64 = -99.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Tokenization {
    Words,
    Chars,
}

impl Tokenization {
    pub fn tokenize(self, line: &str) -> Vec<String> {
        match self {
            Tokenization::Words => line.split_whitespace().map(String::from).collect(),
            Tokenization::Chars => {
                let words: Vec<&str> = line.split_whitespace().collect();
                let mut out = Vec::new();
                for (i, w) in words.iter().enumerate() {
                    if i > 0 {
                        out.push(SPACE_TOKEN.to_string());
                    }
                    out.extend(w.chars().map(String::from));
                }
                out
            }
        }
    }

    fn name(self) -> &'static str {
        match self {
            Tokenization::Words => "words",
            Tokenization::Chars => "chars",
        }
    }
}

/// Backoff n-gram model. Probabilities of seen n-grams are stored fully interpolated,
/// so unseen events back off as `γ(h)·p(w | h')`.
#[derive(Clone, Debug, PartialEq)]
pub struct NGramLM {
    order: usize,
    tokenization: Tokenization,
    vocab: IndexSet<String>,
    /// Natural-log probabilities keyed by n-gram (history then word).
    logprob: HashMap<Vec<u32>, f64>,
    /// Natural-log backoff weights keyed by history.
    backoff: HashMap<Vec<u32>, f64>,
}

#[derive(Default)]
struct HistCounts {
    total: u64,
    next: HashMap<u32, u64>,
}

impl NGramLM {
    pub fn order(&self) -> usize {
        self.order
    }

    pub fn tokenization(&self) -> Tokenization {
        self.tokenization
    }

    /// Number of predictable symbols: vocabulary plus `</s>` and `<unk>`.
    pub fn effective_vocab(&self) -> usize {
        self.vocab.len() - 1
    }

    /// Predictable symbols, including `</s>` and `<unk>`.
    pub fn symbols(&self) -> impl Iterator<Item = &str> {
        self.vocab.iter().filter(|s| *s != BOS).map(String::as_str)
    }

    fn id(&self, token: &str) -> u32 {
        self.vocab
            .get_index_of(token)
            .map(|i| i as u32)
            .unwrap_or(UNK_ID)
    }

    pub fn train<S: AsRef<str>>(
        lines: &[S],
        order: usize,
        vocab_min_count: usize,
        tokenization: Tokenization,
    ) -> Result<Self> {
        if order == 0 {
            return Err(Error::arg("n-gram order must be at least 1"));
        }
        let sents: Vec<Vec<String>> = lines
            .iter()
            .map(|l| tokenization.tokenize(l.as_ref()))
            .filter(|t| !t.is_empty())
            .collect();
        if sents.is_empty() {
            return Err(Error::Data("language model corpus is empty".into()));
        }
        let mut freq: HashMap<&str, usize> = HashMap::new();
        for s in &sents {
            for t in s {
                *freq.entry(t.as_str()).or_default() += 1;
            }
        }
        let mut words: Vec<&str> = freq
            .iter()
            .filter(|(w, &c)| c >= vocab_min_count.max(1) && ![UNK, BOS, EOS].contains(w))
            .map(|(w, _)| *w)
            .collect();
        words.sort_unstable();
        let mut vocab: IndexSet<String> = [UNK, EOS, BOS].iter().map(|s| s.to_string()).collect();
        vocab.extend(words.into_iter().map(String::from));
        let mut lm = Self {
            order,
            tokenization,
            vocab,
            logprob: HashMap::new(),
            backoff: HashMap::new(),
        };

        // counts[k] maps histories of length k to successor counts
        let mut counts: Vec<HashMap<Vec<u32>, HistCounts>> =
            (0..order).map(|_| HashMap::new()).collect();
        for s in &sents {
            let mut seq = vec![BOS_ID];
            seq.extend(s.iter().map(|t| lm.id(t)));
            seq.push(EOS_ID);
            for i in 1..seq.len() {
                for (k, table) in counts.iter_mut().enumerate() {
                    if k > i {
                        break;
                    }
                    let h = seq[i - k..i].to_vec();
                    let e = table.entry(h).or_default();
                    e.total += 1;
                    *e.next.entry(seq[i]).or_default() += 1;
                }
            }
        }

        let v_eff = lm.effective_vocab() as f64;
        let uniform = 1.0 / v_eff;
        let predictable: Vec<u32> = (0..lm.vocab.len() as u32)
            .filter(|&i| i != BOS_ID)
            .collect();
        let root = &counts[0][&Vec::new()];
        let types = root.next.len() as f64;
        let denom = root.total as f64 + types;
        for &w in &predictable {
            let c = root.next.get(&w).copied().unwrap_or(0) as f64;
            lm.logprob
                .insert(vec![w], ((c + types * uniform) / denom).ln());
        }
        lm.logprob.insert(vec![BOS_ID], BOS_LOGPROB);
        for table in counts.iter().skip(1) {
            let mut hists: Vec<&Vec<u32>> = table.keys().collect();
            hists.sort_unstable();
            for h in hists {
                let hc = &table[h];
                let types = hc.next.len() as f64;
                let denom = hc.total as f64 + types;
                let gamma = types / denom;
                let mut next: Vec<(&u32, &u64)> = hc.next.iter().collect();
                next.sort_unstable();
                for (&w, &c) in next {
                    let lower = lm.cond_logprob(&h[1..], w).exp();
                    let mut key = h.clone();
                    key.push(w);
                    lm.logprob
                        .insert(key, ((c as f64 + types * lower) / denom).ln());
                }
                lm.backoff.insert(h.clone(), gamma.ln());
            }
        }
        Ok(lm)
    }

    /// `ln p(w | h)` with `h` truncated to the model order.
    fn cond_logprob(&self, h: &[u32], w: u32) -> f64 {
        let h = &h[h.len().saturating_sub(self.order - 1)..];
        let mut key = h.to_vec();
        key.push(w);
        if let Some(&lp) = self.logprob.get(&key) {
            return lp;
        }
        if h.is_empty() {
            // unigram tables list every predictable symbol
            return self.logprob[&vec![UNK_ID]];
        }
        self.backoff.get(h).copied().unwrap_or(0.0) + self.cond_logprob(&h[1..], w)
    }

    /// `ln p(next | <s> prefix)`.
    pub fn next_logprob(&self, prefix: &[&str], next: &str) -> f64 {
        let mut h = vec![BOS_ID];
        h.extend(prefix.iter().map(|t| self.id(t)));
        let w = if next == EOS { EOS_ID } else { self.id(next) };
        self.cond_logprob(&h, w)
    }

    /// Natural-log probability of a tokenized sentence including `</s>`.
    pub fn logprob_tokens(&self, tokens: &[&str]) -> f64 {
        self.content_logprob(tokens) + self.next_logprob(tokens, EOS)
    }

    /// Sum over content tokens only, excluding `</s>`.
    pub fn content_logprob(&self, tokens: &[&str]) -> f64 {
        (0..tokens.len())
            .map(|i| self.next_logprob(&tokens[..i], tokens[i]))
            .sum()
    }

    pub fn logprob(&self, sentence: &str) -> f64 {
        let toks = self.tokenization.tokenize(sentence);
        self.logprob_tokens(&toks.iter().map(String::as_str).collect::<Vec<_>>())
    }

    /// Histories with an explicit distribution (seen during training).
    pub fn histories(&self) -> Vec<Vec<String>> {
        let mut hs: Vec<Vec<String>> = std::iter::once(Vec::new())
            .chain(
                self.backoff
                    .keys()
                    .map(|h| h.iter().map(|&i| self.vocab[i as usize].clone()).collect()),
            )
            .collect();
        hs.sort();
        hs
    }

    /// Conditional distribution mass over all predictable symbols after `history`.
    pub fn mass(&self, history: &[&str]) -> f64 {
        let h: Vec<u32> = history.iter().map(|t| self.id(t)).collect();
        (0..self.vocab.len() as u32)
            .filter(|&w| w != BOS_ID)
            .map(|w| self.cond_logprob(&h, w).exp())
            .sum()
    }

    pub fn to_arpa(&self) -> String {
        let mut by_order: Vec<Vec<(&Vec<u32>, f64)>> = vec![Vec::new(); self.order];
        for (k, &lp) in &self.logprob {
            by_order[k.len() - 1].push((k, lp));
        }
        let name = |k: &[u32]| {
            k.iter()
                .map(|&i| self.vocab[i as usize].as_str())
                .collect::<Vec<_>>()
                .join(" ")
        };
        for v in &mut by_order {
            v.sort_by_key(|a| name(a.0));
        }
        let mut s = String::new();
        writeln!(s, "# tokenization={}", self.tokenization.name()).unwrap();
        s.push_str("\\data\\\n");
        for (n, v) in by_order.iter().enumerate() {
            writeln!(s, "ngram {}={}", n + 1, v.len()).unwrap();
        }
        for (n, v) in by_order.iter().enumerate() {
            write!(s, "\n\\{}-grams:\n", n + 1).unwrap();
            for (k, lp) in v {
                match self.backoff.get(*k) {
                    Some(b) => writeln!(s, "{lp}\t{}\t{b}", name(k)).unwrap(),
                    None => writeln!(s, "{lp}\t{}", name(k)).unwrap(),
                }
            }
        }
        s.push_str("\n\\end\\\n");
        s
    }

    pub fn from_arpa(text: &str) -> Result<Self> {
        let bad = |m: String| Error::Format(format!("arpa: {m}"));
        let mut tokenization = Tokenization::Words;
        let mut order = 0usize;
        let mut current = 0usize;
        let mut rows: Vec<(f64, Vec<String>, Option<f64>)> = Vec::new();
        let mut ended = false;
        for line in text.lines() {
            let line = line.trim_end();
            if let Some(t) = line.strip_prefix("# tokenization=") {
                tokenization = match t {
                    "words" => Tokenization::Words,
                    "chars" => Tokenization::Chars,
                    o => return Err(bad(format!("unknown tokenization {o}"))),
                };
            } else if line.is_empty() || line == "\\data\\" {
                continue;
            } else if let Some(rest) = line.strip_prefix("ngram ") {
                let n: usize = rest
                    .split('=')
                    .next()
                    .and_then(|n| n.parse().ok())
                    .ok_or_else(|| bad(line.into()))?;
                order = order.max(n);
            } else if line == "\\end\\" {
                ended = true;
                break;
            } else if let Some(n) = line
                .strip_prefix('\\')
                .and_then(|l| l.strip_suffix("-grams:"))
            {
                current = n.parse().map_err(|_| bad(line.into()))?;
            } else {
                let cols: Vec<&str> = line.split('\t').collect();
                if current == 0 || !(2..=3).contains(&cols.len()) {
                    return Err(bad(format!("unexpected line {line:?}")));
                }
                let lp: f64 = cols[0]
                    .parse()
                    .map_err(|_| bad(format!("bad logprob in {line:?}")))?;
                let gram: Vec<String> = cols[1].split(' ').map(String::from).collect();
                if gram.len() != current {
                    return Err(bad(format!("{line:?} is not a {current}-gram")));
                }
                let bo = match cols.get(2) {
                    Some(b) => Some(
                        b.parse()
                            .map_err(|_| bad(format!("bad backoff in {line:?}")))?,
                    ),
                    None => None,
                };
                rows.push((lp, gram, bo));
            }
        }
        if !ended || order == 0 {
            return Err(bad("missing \\data\\ counts or \\end\\".into()));
        }
        let mut vocab: IndexSet<String> = [UNK, EOS, BOS].iter().map(|s| s.to_string()).collect();
        let mut unigrams: Vec<&String> = rows
            .iter()
            .filter(|r| r.1.len() == 1)
            .map(|r| &r.1[0])
            .collect();
        unigrams.sort();
        for u in unigrams {
            vocab.insert(u.clone());
        }
        let mut lm = Self {
            order,
            tokenization,
            vocab,
            logprob: HashMap::new(),
            backoff: HashMap::new(),
        };
        for (lp, gram, bo) in rows {
            let key: Vec<u32> = gram
                .iter()
                .map(|t| {
                    lm.vocab
                        .get_index_of(t.as_str())
                        .map(|i| i as u32)
                        .ok_or_else(|| bad(format!("token {t} not in unigrams")))
                })
                .collect::<Result<_>>()?;
            if let Some(b) = bo {
                lm.backoff.insert(key.clone(), b);
            }
            lm.logprob.insert(key, lp);
        }
        if !lm.logprob.contains_key(&vec![UNK_ID]) || !lm.logprob.contains_key(&vec![EOS_ID]) {
            return Err(bad("unigram table lacks <unk> or </s>".into()));
        }
        Ok(lm)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_arpa())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_arpa(&std::fs::read_to_string(path)?)
    }
}

pub fn train_ngram<S: AsRef<str>>(
    lines: &[S],
    order: usize,
    vocab_min_count: usize,
) -> Result<NGramLM> {
    NGramLM::train(lines, order, vocab_min_count, Tokenization::Words)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ScoredSentence {
    pub text: String,
    /// Content tokens, at least 1.
    pub n_tokens: usize,
    pub score: f64,
}

/// Ranks `pool` by `(ln P_D(w) − ln P_B(w)) / #(w)` over content tokens, descending,
/// ties kept in input order.
pub fn select_text<S: AsRef<str>>(
    pool: &[S],
    lm_d: &NGramLM,
    lm_b: &NGramLM,
    top_k: usize,
) -> Result<Vec<ScoredSentence>> {
    if lm_d.tokenization != lm_b.tokenization {
        return Err(Error::arg(
            "in-domain and background models use different tokenizations",
        ));
    }
    let mut scored: Vec<ScoredSentence> = pool
        .iter()
        .map(|line| {
            let toks = lm_d.tokenization.tokenize(line.as_ref());
            let refs: Vec<&str> = toks.iter().map(String::as_str).collect();
            let n = refs.len().max(1);
            let diff = lm_d.content_logprob(&refs) - lm_b.content_logprob(&refs);
            ScoredSentence {
                text: line.as_ref().to_string(),
                n_tokens: n,
                score: diff / n as f64,
            }
        })
        .collect();
    scored.sort_by(|a, b| b.score.total_cmp(&a.score));
    scored.truncate(top_k);
    Ok(scored)
}

/// "score<TAB>sentence" lines.
pub fn format_selection(sel: &[ScoredSentence]) -> String {
    sel.iter()
        .map(|s| format!("{:.6}\t{}\n", s.score, s.text))
        .collect()
}

/// `β·ln p(next | prefix)`; zero when β is zero.
pub fn fusion_score(lm: &NGramLM, prefix: &[&str], next: &str, beta: f64) -> f64 {
    if beta == 0.0 {
        return 0.0;
    }
    beta * lm.next_logprob(prefix, next)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn unigram_sum_to_one() {
        let lm = train_ngram(&["a a"], 1, 1).unwrap();
        assert_eq!(lm.effective_vocab(), 3);
        assert!(close(lm.mass(&[]), 1.0, 1e-12));
        // c(a)=2, c(</s>)=1, N1+=2, V=3
        assert!(close(
            lm.next_logprob(&[], "a"),
            ((2.0 + 2.0 / 3.0) / 5.0f64).ln(),
            1e-12
        ));
        assert!(close(
            lm.next_logprob(&[], UNK),
            ((2.0 / 3.0) / 5.0f64).ln(),
            1e-12
        ));
    }

    #[test]
    fn unseen_word_is_unk() {
        let lm = train_ngram(&["a b", "b c"], 2, 1).unwrap();
        let p = lm.next_logprob(&["a"], "zzz");
        assert!(p.is_finite() && p < 0.0);
        assert_eq!(p, lm.next_logprob(&["a"], UNK));
    }

    #[test]
    fn bigram_prefers_seen_continuation() {
        let lm = train_ngram(&["a b"], 2, 1).unwrap();
        assert!(lm.next_logprob(&["a"], "b") > lm.next_logprob(&["q"], "b"));
    }

    #[test]
    fn min_count_maps_to_unk() {
        let lm = train_ngram(&["a a b"], 1, 2).unwrap();
        assert_eq!(lm.effective_vocab(), 3);
        assert_eq!(lm.next_logprob(&[], "b"), lm.next_logprob(&[], UNK));
    }

    #[test]
    fn empty_corpus_rejected() {
        assert!(matches!(
            train_ngram(&["", "  "], 2, 1),
            Err(Error::Data(_))
        ));
        assert!(train_ngram::<&str>(&[], 2, 1).is_err());
    }

    fn uniform_unigram(words: &[&str]) -> NGramLM {
        // every symbol seen once per line, so c(w) equal for all including </s>
        let lines: Vec<String> = words.iter().map(|w| w.to_string()).collect();
        let mut lm = train_ngram(&lines, 1, 1).unwrap();
        let v = lm.effective_vocab() as f64;
        for lp in lm.logprob.values_mut() {
            if *lp != BOS_LOGPROB {
                *lp = (1.0 / v).ln();
            }
        }
        lm
    }

    #[test]
    fn closed_form_uniform() {
        let lm = uniform_unigram(&["a", "b", "c"]);
        let v = lm.effective_vocab() as f64;
        assert_eq!(v, 5.0);
        assert!(close(lm.logprob("a b b c"), 5.0 * (1.0 / v).ln(), 1e-12));
        assert!(close(lm.logprob(""), lm.next_logprob(&[], EOS), 0.0));
        assert!(close(
            fusion_score(&lm, &["a"], "c", 1.0),
            (1.0 / v).ln(),
            1e-12
        ));
        assert_eq!(fusion_score(&lm, &["a"], "c", 0.0), 0.0);
    }

    #[test]
    fn unigram_order_invariant() {
        let lm = train_ngram(&["a b c a", "b b d"], 1, 1).unwrap();
        assert!(close(lm.logprob("a b d"), lm.logprob("d a b"), 1e-12));
    }

    #[test]
    fn fusion_telescopes_to_logprob() {
        let lm = train_ngram(&["a b c", "b c a", "c a b b"], 3, 1).unwrap();
        let toks = ["a", "b", "b", "q"];
        let beta = 0.3;
        let mut total: f64 = (0..toks.len())
            .map(|i| fusion_score(&lm, &toks[..i], toks[i], beta))
            .sum();
        total += fusion_score(&lm, &toks, EOS, beta);
        assert!(close(total, beta * lm.logprob("a b b q"), 1e-12));
    }

    fn random_corpus(seed: u64, lines: usize) -> Vec<String> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let words = ["a", "b", "c", "d", "e"];
        (0..lines)
            .map(|_| {
                let n = rng.gen_range(1..6);
                (0..n)
                    .map(|_| words[rng.gen_range(0..words.len())])
                    .collect::<Vec<_>>()
                    .join(" ")
            })
            .collect()
    }

    #[test]
    fn sum_to_one_over_all_histories() {
        for (seed, order) in [(1, 2), (2, 3), (3, 4)] {
            let lm = train_ngram(&random_corpus(seed, 12), order, 1).unwrap();
            for h in lm.histories() {
                let refs: Vec<&str> = h.iter().map(String::as_str).collect();
                let m = lm.mass(&refs);
                assert!(close(m, 1.0, 1e-9), "{h:?}: {m}");
            }
        }
    }

    #[test]
    fn probabilities_in_unit_interval() {
        let lm = train_ngram(&random_corpus(4, 10), 3, 1).unwrap();
        for (k, &lp) in &lm.logprob {
            if k != &vec![BOS_ID] {
                assert!(lp <= 0.0 && lp.is_finite());
            }
        }
    }

    #[test]
    fn arpa_round_trip_exact() {
        for tok in [Tokenization::Words, Tokenization::Chars] {
            let lm = NGramLM::train(&random_corpus(5, 20), 3, 1, tok).unwrap();
            let back = NGramLM::from_arpa(&lm.to_arpa()).unwrap();
            assert_eq!(back, lm);
        }
        let dir = tempfile::tempdir().unwrap();
        let lm = train_ngram(&["x y z"], 2, 1).unwrap();
        lm.save(dir.path().join("lm.arpa")).unwrap();
        assert_eq!(NGramLM::load(dir.path().join("lm.arpa")).unwrap(), lm);
        assert!(NGramLM::from_arpa("\\data\\\nngram 1=1\n\n\\1-grams:\nx\n").is_err());
    }

    #[test]
    fn arpa_header_lists_counts() {
        let lm = train_ngram(&["a b"], 2, 1).unwrap();
        let text = lm.to_arpa();
        assert!(text.contains("\\data\\\nngram 1=5\nngram 2=3\n"), "{text}");
        assert!(text.contains("\\2-grams:\n"));
    }

    #[test]
    fn char_tokenization() {
        assert_eq!(
            Tokenization::Chars.tokenize(" ab  c "),
            ["a", "b", "_", "c"]
        );
    }

    #[test]
    fn selection_closed_form() {
        let d = uniform_unigram(&["a"]);
        let b = uniform_unigram(&["a", "b", "c"]);
        // effective vocab 3 → p=1/3 and 5 → p=1/5
        for s in ["a", "a a a", "a b c a b"] {
            let got = select_text(&[s], &d, &b, 1).unwrap();
            assert!(close(got[0].score, (5.0f64 / 3.0).ln(), 1e-12));
        }
    }

    #[test]
    fn identical_models_keep_input_order() {
        let lm = train_ngram(&random_corpus(6, 10), 2, 1).unwrap();
        let pool = random_corpus(7, 8);
        let sel = select_text(&pool, &lm, &lm, 100).unwrap();
        assert_eq!(sel.len(), 8);
        assert!(sel.iter().all(|s| s.score == 0.0));
        assert_eq!(sel.iter().map(|s| s.text.clone()).collect::<Vec<_>>(), pool);
    }

    #[test]
    fn in_domain_ranked_first() {
        let d = train_ngram(&["the cat sat", "a cat ran", "the cat ran"], 2, 1).unwrap();
        let b = train_ngram(&["stocks fell today", "the market rose", "a cat sat"], 2, 1).unwrap();
        let sel = select_text(&["stocks rose today", "the cat sat"], &d, &b, 2).unwrap();
        assert_eq!(sel[0].text, "the cat sat");
        assert_eq!(select_text(&["x"], &d, &b, 0).unwrap().len(), 0);
    }

    #[test]
    fn duplicated_pool_stays_adjacent() {
        let d = train_ngram(&random_corpus(8, 10), 2, 1).unwrap();
        let b = train_ngram(&random_corpus(9, 10), 2, 1).unwrap();
        let pool = random_corpus(10, 6);
        let once = select_text(&pool, &d, &b, 100).unwrap();
        let doubled: Vec<String> = pool.iter().flat_map(|s| [s.clone(), s.clone()]).collect();
        let twice = select_text(&doubled, &d, &b, 100).unwrap();
        let want: Vec<String> = once
            .iter()
            .flat_map(|s| [s.text.clone(), s.text.clone()])
            .collect();
        let got: Vec<String> = twice.iter().map(|s| s.text.clone()).collect();
        assert_eq!(got, want);
    }

    #[test]
    fn mismatched_tokenization_rejected() {
        let w = train_ngram(&["a b"], 2, 1).unwrap();
        let c = NGramLM::train(&["a b"], 2, 1, Tokenization::Chars).unwrap();
        assert!(select_text(&["a"], &w, &c, 1).is_err());
    }

    #[test]
    fn selection_output_format() {
        let s = ScoredSentence {
            text: "a b".into(),
            n_tokens: 2,
            score: 0.5,
        };
        assert_eq!(format_selection(&[s]), "0.500000\ta b\n");
    }

    proptest! {
        #[test]
        fn length_normalized_under_unigrams(seed in any::<u64>(), reps in 2usize..5) {
            let d = train_ngram(&random_corpus(seed, 8), 1, 1).unwrap();
            let b = train_ngram(&random_corpus(seed ^ 1, 8), 1, 1).unwrap();
            let s = random_corpus(seed ^ 2, 1).remove(0);
            let long = vec![s.as_str(); reps].join(" ");
            let a = select_text(&[&s], &d, &b, 1).unwrap()[0].score;
            let z = select_text(&[&long], &d, &b, 1).unwrap()[0].score;
            prop_assert!((a - z).abs() <= 1e-9);
        }
    }
}
