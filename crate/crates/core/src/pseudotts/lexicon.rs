use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::losses::{LabelSeq, Vocab};

/// Symbol placed between words.
pub const WORD_BOUNDARY: &str = "_";

/// Default phoneme inventory; id = position + 1.
pub const TOY_INVENTORY: [&str; 27] = [
    "a",
    "e",
    "i",
    "o",
    "u",
    "b",
    "d",
    "g",
    "p",
    "t",
    "k",
    "m",
    "n",
    "l",
    "r",
    "w",
    "j",
    "f",
    "v",
    "s",
    "z",
    "h",
    "S",
    "C",
    "T",
    "N",
    WORD_BOUNDARY,
];

const TOY_RULES: [(&str, &str); 30] = [
    ("sh", "S"),
    ("ch", "C"),
    ("th", "T"),
    ("ng", "N"),
    ("a", "a"),
    ("b", "b"),
    ("c", "k"),
    ("d", "d"),
    ("e", "e"),
    ("f", "f"),
    ("g", "g"),
    ("h", "h"),
    ("i", "i"),
    ("j", "j"),
    ("k", "k"),
    ("l", "l"),
    ("m", "m"),
    ("n", "n"),
    ("o", "o"),
    ("p", "p"),
    ("q", "k"),
    ("r", "r"),
    ("s", "s"),
    ("t", "t"),
    ("u", "u"),
    ("v", "v"),
    ("w", "w"),
    ("x", "k s"),
    ("y", "j"),
    ("z", "z"),
];

/// Lowercase, drop punctuation, collapse whitespace.
pub fn normalize(text: &str) -> String {
    let cleaned: String = text
        .chars()
        .flat_map(char::to_lowercase)
        .filter(|c| c.is_alphanumeric() || c.is_whitespace())
        .collect();
    cleaned.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Word → phoneme mapping with letter-to-sound fallback rules.
#[derive(Clone, Debug, PartialEq)]
pub struct Lexicon {
    inventory: Vec<String>,
    entries: BTreeMap<String, Vec<usize>>,
    /// Longest grapheme first.
    rules: Vec<(String, Vec<usize>)>,
    boundary: usize,
}

impl Lexicon {
    pub fn new(inventory: Vec<String>, rules: &[(&str, &str)]) -> Result<Self> {
        let boundary = inventory
            .iter()
            .position(|p| p == WORD_BOUNDARY)
            .map(|i| i + 1)
            .ok_or_else(|| {
                Error::Data(format!(
                    "inventory lacks the word-boundary symbol {WORD_BOUNDARY:?}"
                ))
            })?;
        let mut lex = Self {
            inventory,
            entries: BTreeMap::new(),
            rules: Vec::new(),
            boundary,
        };
        for (graph, phones) in rules {
            let ids = lex.parse_phones(phones)?;
            lex.rules.push((graph.to_string(), ids));
        }
        lex.rules
            .sort_by(|a, b| b.0.chars().count().cmp(&a.0.chars().count()));
        Ok(lex)
    }

    pub fn toy() -> Self {
        let inv = TOY_INVENTORY.iter().map(|s| s.to_string()).collect();
        Self::new(inv, &TOY_RULES).expect("built-in rules are consistent")
    }

    /// Inventory size P; ids lie in `[1, P]`.
    pub fn n_phonemes(&self) -> usize {
        self.inventory.len()
    }

    pub fn inventory(&self) -> &[String] {
        &self.inventory
    }

    pub fn boundary_id(&self) -> usize {
        self.boundary
    }

    pub fn symbol(&self, id: usize) -> Option<&str> {
        id.checked_sub(1)
            .and_then(|i| self.inventory.get(i))
            .map(String::as_str)
    }

    pub fn id_of(&self, symbol: &str) -> Option<usize> {
        self.inventory
            .iter()
            .position(|p| p == symbol)
            .map(|i| i + 1)
    }

    fn parse_phones(&self, phones: &str) -> Result<Vec<usize>> {
        let ids = phones
            .split_whitespace()
            .map(|p| {
                self.id_of(p)
                    .ok_or_else(|| Error::Data(format!("unknown phoneme {p:?}")))
            })
            .collect::<Result<Vec<_>>>()?;
        if ids.is_empty() {
            return Err(Error::Data("empty pronunciation".into()));
        }
        Ok(ids)
    }

    pub fn add_entry(&mut self, word: &str, phones: &[usize]) -> Result<()> {
        if phones.is_empty() || phones.iter().any(|&p| p == 0 || p > self.n_phonemes()) {
            return Err(Error::Data(format!("bad pronunciation for {word:?}")));
        }
        self.entries.insert(normalize(word), phones.to_vec());
        Ok(())
    }

    pub fn entries(&self) -> impl Iterator<Item = (&str, &[usize])> {
        self.entries.iter().map(|(w, p)| (w.as_str(), p.as_slice()))
    }

    /// Rule-based pronunciation, ignoring lexicon entries.
    pub fn apply_rules(&self, word: &str) -> Result<Vec<usize>> {
        let chars: Vec<char> = word.chars().collect();
        let mut out = Vec::new();
        let mut bad = Vec::new();
        let mut i = 0;
        while i < chars.len() {
            let hit = self.rules.iter().find(|(g, _)| {
                let n = g.chars().count();
                i + n <= chars.len() && g.chars().eq(chars[i..i + n].iter().copied())
            });
            match hit {
                Some((g, ids)) => {
                    out.extend_from_slice(ids);
                    i += g.chars().count();
                }
                None => {
                    if !bad.contains(&chars[i]) {
                        bad.push(chars[i]);
                    }
                    i += 1;
                }
            }
        }
        if bad.is_empty() {
            Ok(out)
        } else {
            Err(Error::G2p(bad))
        }
    }

    pub fn pronounce(&self, word: &str) -> Result<Vec<usize>> {
        match self.entries.get(word) {
            Some(p) => Ok(p.clone()),
            None => self.apply_rules(word),
        }
    }

    /// "word<TAB>ph1 ph2 ..." lines.
    pub fn entries_to_string(&self) -> String {
        let mut s = String::new();
        for (w, ids) in &self.entries {
            let phones: Vec<&str> = ids.iter().map(|&i| self.symbol(i).unwrap()).collect();
            s.push_str(&format!("{w}\t{}\n", phones.join(" ")));
        }
        s
    }

    pub fn parse_entries(&mut self, text: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let (w, phones) = line
                .split_once('\t')
                .ok_or_else(|| Error::Format(format!("lexicon line {}: missing tab", n + 1)))?;
            let ids = self
                .parse_phones(phones)
                .map_err(|e| Error::Format(format!("lexicon line {}: {e}", n + 1)))?;
            self.add_entry(w, &ids)?;
        }
        Ok(())
    }

    pub fn save(
        &self,
        lexicon_path: impl AsRef<Path>,
        inventory_path: impl AsRef<Path>,
    ) -> Result<()> {
        std::fs::write(inventory_path, self.inventory.join("\n") + "\n")?;
        std::fs::write(lexicon_path, self.entries_to_string())?;
        Ok(())
    }

    /// Loads an inventory file plus lexicon, with the toy letter rules as fallback.
    pub fn load(lexicon_path: impl AsRef<Path>, inventory_path: impl AsRef<Path>) -> Result<Self> {
        let inv: Vec<String> = std::fs::read_to_string(inventory_path)?
            .lines()
            .map(|l| l.trim().to_string())
            .filter(|l| !l.is_empty())
            .collect();
        let rules: Vec<(&str, &str)> = TOY_RULES
            .iter()
            .copied()
            .filter(|(_, p)| p.split_whitespace().all(|s| inv.iter().any(|i| i == s)))
            .collect();
        let mut lex = Self::new(inv, &rules)?;
        lex.parse_entries(&std::fs::read_to_string(lexicon_path)?)?;
        Ok(lex)
    }
}

/// Phoneme sequence for `text`: per-word pronunciations joined by the boundary phoneme.
pub fn g2p(text: &str, lex: &Lexicon) -> Result<LabelSeq> {
    let norm = normalize(text);
    if norm.is_empty() {
        return Err(Error::arg("text is empty after normalization"));
    }
    let mut ids = Vec::new();
    let mut bad: Vec<char> = Vec::new();
    for (k, word) in norm.split(' ').enumerate() {
        if k > 0 {
            ids.push(lex.boundary_id());
        }
        match lex.pronounce(word) {
            Ok(p) => ids.extend(p),
            Err(Error::G2p(chars)) => {
                for c in chars {
                    if !bad.contains(&c) {
                        bad.push(c);
                    }
                }
            }
            Err(e) => return Err(e),
        }
    }
    if !bad.is_empty() {
        return Err(Error::G2p(bad));
    }
    Ok(LabelSeq::new(ids, Vocab::Phoneme))
}

/// Character vocabulary: blank 0, space 1, `a..z` 2..=27.
pub const WORDPIECE_VOCAB: usize = 28;

pub fn wordpiece_id(c: char) -> Option<usize> {
    match c {
        ' ' => Some(1),
        'a'..='z' => Some(2 + (c as usize - 'a' as usize)),
        _ => None,
    }
}

pub fn wordpiece_char(id: usize) -> Option<char> {
    match id {
        1 => Some(' '),
        2..=27 => Some((b'a' + (id - 2) as u8) as char),
        _ => None,
    }
}

pub fn wordpieces(text: &str) -> Result<LabelSeq> {
    let norm = normalize(text);
    if norm.is_empty() {
        return Err(Error::arg("text is empty after normalization"));
    }
    let mut bad = Vec::new();
    let ids = norm
        .chars()
        .filter_map(|c| {
            let id = wordpiece_id(c);
            if id.is_none() && !bad.contains(&c) {
                bad.push(c);
            }
            id
        })
        .collect();
    if !bad.is_empty() {
        return Err(Error::G2p(bad));
    }
    Ok(LabelSeq::new(ids, Vocab::Wordpiece))
}

pub fn wordpieces_to_text(ids: &[usize]) -> String {
    ids.iter().filter_map(|&i| wordpiece_char(i)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn syms(lex: &Lexicon, seq: &LabelSeq) -> Vec<String> {
        seq.ids
            .iter()
            .map(|&i| lex.symbol(i).unwrap().to_string())
            .collect()
    }

    #[test]
    fn rule_application() {
        let lex = Lexicon::toy();
        assert_eq!(syms(&lex, &g2p("ba", &lex).unwrap()), ["b", "a"]);
        assert_eq!(
            syms(&lex, &g2p("shin thing", &lex).unwrap()),
            ["S", "i", "n", "_", "T", "i", "N"]
        );
        assert_eq!(syms(&lex, &g2p("ax", &lex).unwrap()), ["a", "k", "s"]);
    }

    #[test]
    fn lexicon_overrides_rules() {
        let mut lex = Lexicon::toy();
        let k = lex.id_of("k").unwrap();
        let o = lex.id_of("o").unwrap();
        lex.add_entry("ba", &[k, o]).unwrap();
        assert_eq!(g2p("ba", &lex).unwrap().ids, vec![k, o]);
        assert_eq!(syms(&lex, &g2p("bab", &lex).unwrap()), ["b", "a", "b"]);
    }

    #[test]
    fn unmappable_characters_listed() {
        let lex = Lexicon::toy();
        match g2p("ab 9é b9", &lex) {
            Err(Error::G2p(chars)) => assert_eq!(chars, vec!['9', 'é']),
            other => panic!("{other:?}"),
        }
        assert!(matches!(g2p(" ,.!", &lex), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn ids_within_inventory() {
        let lex = Lexicon::toy();
        let s = g2p("the quick brown fox jumps over the lazy dog", &lex).unwrap();
        assert!(s.ids.iter().all(|&i| (1..=lex.n_phonemes()).contains(&i)));
        s.validate(lex.n_phonemes() + 1).unwrap();
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut lex = Lexicon::toy();
        lex.add_entry("kata", &[10, 1, 11, 1]).unwrap();
        lex.add_entry("bo", &[6, 4, 4]).unwrap();
        let (lp, ip) = (dir.path().join("lex.tsv"), dir.path().join("phones.txt"));
        lex.save(&lp, &ip).unwrap();
        let back = Lexicon::load(&lp, &ip).unwrap();
        assert_eq!(back, lex);
        std::fs::write(&lp, "kata\tk a zz\n").unwrap();
        assert!(matches!(Lexicon::load(&lp, &ip), Err(Error::Format(_))));
    }

    #[test]
    fn wordpiece_mapping() {
        let w = wordpieces("Ab, c!").unwrap();
        assert_eq!(w.ids, vec![2, 3, 1, 4]);
        assert_eq!(wordpieces_to_text(&w.ids), "ab c");
        assert!(matches!(wordpieces("a1"), Err(Error::G2p(_))));
    }

    proptest! {
        #[test]
        fn idempotent_under_renormalization(text in "[A-Za-z ,.!?']{1,40}") {
            let lex = Lexicon::toy();
            let a = g2p(&text, &lex);
            let b = g2p(&normalize(&text), &lex);
            match (a, b) {
                (Ok(x), Ok(y)) => prop_assert_eq!(x, y),
                (Err(_), Err(_)) => {}
                (x, y) => prop_assert!(false, "{:?} vs {:?}", x, y),
            }
            prop_assert_eq!(normalize(&normalize(&text)), normalize(&text));
        }
    }
}
