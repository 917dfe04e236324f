//! Lower-cased byte-level BPE with `[SOS]`, `[EOS]` and `[PAD]` specials.
//!
//! Ids `0..256` are raw bytes, `256..256+merges` are merge results in
//! acquisition order, and the three specials follow. Text is split into
//! chunks (a run of letters, digits or other symbols, optionally led by one
//! space; or a whitespace run) and merges never cross a chunk boundary.

use std::collections::HashMap;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const SOS: &str = "[SOS]";
pub const EOS: &str = "[EOS]";
pub const PAD: &str = "[PAD]";
pub const DEFAULT_MAX_LEN: usize = 76;
/// Vocabulary size of the full-scale bilingual tokenizer.
pub const FULL_VOCAB_SIZE: usize = 98_816;

const BYTE_ALPHABET: usize = 256;
const NUM_SPECIALS: usize = 3;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    merges: Vec<(u32, u32)>,
    tokens: Vec<Vec<u8>>,
    token_to_id: HashMap<Vec<u8>, u32>,
    ranks: HashMap<(u32, u32), u32>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSequence {
    pub ids: Vec<u32>,
    pub eos_position: usize,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Checks the `[SOS] content [EOS] [PAD]*` layout against `vocab`.
    pub fn validate(&self, vocab: &Vocabulary) -> Result<()> {
        if self.ids.first() != Some(&vocab.sos_id()) {
            return Err(Error::Data("token sequence does not start with [SOS]".into()));
        }
        if self.ids.get(self.eos_position) != Some(&vocab.eos_id()) {
            return Err(Error::Data("eos_position does not hold [EOS]".into()));
        }
        if self.ids.iter().filter(|&&i| i == vocab.eos_id()).count() != 1 {
            return Err(Error::Data("token sequence must hold exactly one [EOS]".into()));
        }
        if self.ids[self.eos_position + 1..].iter().any(|&i| i != vocab.pad_id()) {
            return Err(Error::Data("non-[PAD] token after [EOS]".into()));
        }
        if let Some(&bad) = self.ids.iter().find(|&&i| i as usize >= vocab.vocab_size()) {
            return Err(Error::Data(format!("token id {bad} outside vocabulary")));
        }
        Ok(())
    }
}

/// Accumulates chunk frequencies from one or more corpora before training.
#[derive(Debug, Default, Clone)]
pub struct BpeTrainer {
    chunks: HashMap<String, u64>,
    texts: usize,
}

impl BpeTrainer {
    pub fn new() -> Self {
        Self::default()
    }

    /// Add texts, each counted `weight` times. Weights let a small corpus
    /// mirror a target language ratio.
    pub fn add_texts<I, S>(&mut self, texts: I, weight: u64) -> &mut Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        for text in texts {
            let lower = text.as_ref().to_lowercase();
            for chunk in pretokenize(&lower) {
                *self.chunks.entry(chunk.to_string()).or_default() += weight;
            }
            self.texts += 1;
        }
        self
    }

    pub fn train(&self, target_vocab: usize) -> Result<Vocabulary> {
        if self.texts == 0 {
            return Err(Error::InvalidArgument("cannot train BPE on an empty corpus".into()));
        }
        let floor = BYTE_ALPHABET + NUM_SPECIALS;
        if target_vocab <= floor {
            return Err(Error::InvalidArgument(format!(
                "target vocabulary {target_vocab} must exceed {floor} (bytes + specials)"
            )));
        }
        let mut vocab = Vocabulary::bytes_only();
        let mut words: Vec<(Vec<u32>, u64)> = {
            let mut keys: Vec<(&String, &u64)> = self.chunks.iter().filter(|(_, &c)| c > 0).collect();
            keys.sort();
            keys.into_iter()
                .map(|(w, &c)| (w.bytes().map(u32::from).collect(), c))
                .collect()
        };
        while vocab.vocab_size() < target_vocab {
            let mut counts: HashMap<(u32, u32), u64> = HashMap::new();
            for (syms, c) in &words {
                for pair in syms.windows(2) {
                    *counts.entry((pair[0], pair[1])).or_default() += c;
                }
            }
            let best = counts
                .into_iter()
                .filter(|&((a, b), _)| !vocab.token_to_id.contains_key(&vocab.concat(a, b)))
                .min_by(|&(pa, ca), &(pb, cb)| {
                    cb.cmp(&ca)
                        .then_with(|| vocab.tokens[pa.0 as usize].cmp(&vocab.tokens[pb.0 as usize]))
                        .then_with(|| vocab.tokens[pa.1 as usize].cmp(&vocab.tokens[pb.1 as usize]))
                });
            let Some((pair, _)) = best else { break };
            let new_id = vocab.push_merge(pair);
            for (syms, _) in &mut words {
                merge_in_place(syms, pair, new_id);
            }
        }
        Ok(vocab)
    }
}

/// Convenience wrapper: train on a single corpus with unit weights.
pub fn train_bpe<I, S>(corpus: I, target_vocab: usize) -> Result<Vocabulary>
where
    I: IntoIterator<Item = S>,
    S: AsRef<str>,
{
    BpeTrainer::new().add_texts(corpus, 1).train(target_vocab)
}

fn merge_in_place(syms: &mut Vec<u32>, pair: (u32, u32), new_id: u32) {
    if syms.len() < 2 {
        return;
    }
    let mut out = Vec::with_capacity(syms.len());
    let mut i = 0;
    while i < syms.len() {
        if i + 1 < syms.len() && syms[i] == pair.0 && syms[i + 1] == pair.1 {
            out.push(new_id);
            i += 2;
        } else {
            out.push(syms[i]);
            i += 1;
        }
    }
    *syms = out;
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum CharClass {
    Letter,
    Digit,
    Other,
}

fn class_of(c: char) -> CharClass {
    if c.is_alphabetic() {
        CharClass::Letter
    } else if c.is_numeric() {
        CharClass::Digit
    } else {
        CharClass::Other
    }
}

/// Split text into merge domains. Concatenating the chunks gives back `text`.
pub fn pretokenize(text: &str) -> Vec<&str> {
    let chars: Vec<(usize, char)> = text.char_indices().collect();
    let n = chars.len();
    let byte_at = |i: usize| if i < n { chars[i].0 } else { text.len() };
    let mut out = Vec::new();
    let mut i = 0;
    while i < n {
        let c = chars[i].1;
        if c.is_whitespace() {
            let mut j = i;
            while j < n && chars[j].1.is_whitespace() {
                j += 1;
            }
            // A trailing single space before a word is kept as that word's prefix.
            let end = if j < n && chars[j - 1].1 == ' ' { j - 1 } else { j };
            if end > i {
                out.push(&text[byte_at(i)..byte_at(end)]);
                i = end;
                continue;
            }
        }
        let start = i;
        if chars[i].1 == ' ' {
            i += 1;
        }
        let cls = class_of(chars[i].1);
        while i < n && !chars[i].1.is_whitespace() && class_of(chars[i].1) == cls {
            i += 1;
        }
        out.push(&text[byte_at(start)..byte_at(i)]);
    }
    out
}

impl Vocabulary {
    fn bytes_only() -> Self {
        let tokens: Vec<Vec<u8>> = (0..=255u8).map(|b| vec![b]).collect();
        let token_to_id = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i as u32)).collect();
        Self {
            merges: Vec::new(),
            tokens,
            token_to_id,
            ranks: HashMap::new(),
        }
    }

    fn concat(&self, a: u32, b: u32) -> Vec<u8> {
        let mut t = self.tokens[a as usize].clone();
        t.extend_from_slice(&self.tokens[b as usize]);
        t
    }

    fn push_merge(&mut self, pair: (u32, u32)) -> u32 {
        let id = self.tokens.len() as u32;
        let bytes = self.concat(pair.0, pair.1);
        self.ranks.insert(pair, self.merges.len() as u32);
        self.merges.push(pair);
        self.token_to_id.insert(bytes.clone(), id);
        self.tokens.push(bytes);
        id
    }

    pub fn num_merges(&self) -> usize {
        self.merges.len()
    }

    pub fn merges(&self) -> &[(u32, u32)] {
        &self.merges
    }

    /// Byte string of a non-special token.
    pub fn token_bytes(&self, id: u32) -> Option<&[u8]> {
        self.tokens.get(id as usize).map(Vec::as_slice)
    }

    pub fn token_id(&self, bytes: &[u8]) -> Option<u32> {
        self.token_to_id.get(bytes).copied()
    }

    pub fn sos_id(&self) -> u32 {
        self.tokens.len() as u32
    }

    pub fn eos_id(&self) -> u32 {
        self.tokens.len() as u32 + 1
    }

    pub fn pad_id(&self) -> u32 {
        self.tokens.len() as u32 + 2
    }

    pub fn vocab_size(&self) -> usize {
        self.tokens.len() + NUM_SPECIALS
    }

    pub fn is_special(&self, id: u32) -> bool {
        id >= self.sos_id() && (id as usize) < self.vocab_size()
    }

    /// Content token ids of `text` (lower-cased), without specials or truncation.
    pub fn encode_content(&self, text: &str) -> Vec<u32> {
        let lower = text.to_lowercase();
        let mut out = Vec::new();
        for chunk in pretokenize(&lower) {
            let mut syms: Vec<u32> = chunk.bytes().map(u32::from).collect();
            loop {
                let best = syms
                    .windows(2)
                    .filter_map(|w| self.ranks.get(&(w[0], w[1])).map(|&r| (r, (w[0], w[1]))))
                    .min();
                let Some((rank, pair)) = best else { break };
                merge_in_place(&mut syms, pair, BYTE_ALPHABET as u32 + rank);
            }
            out.extend(syms);
        }
        out
    }

    /// `[SOS] content [EOS] [PAD]...` of exactly `max_len` ids. Content is
    /// truncated so `[EOS]` always fits.
    pub fn encode(&self, text: &str, max_len: usize) -> TokenSequence {
        assert!(max_len >= 2, "max_len must leave room for [SOS] and [EOS]");
        let mut content = self.encode_content(text);
        content.truncate(max_len - 2);
        let mut ids = Vec::with_capacity(max_len);
        ids.push(self.sos_id());
        ids.extend(content);
        let eos_position = ids.len();
        ids.push(self.eos_id());
        ids.resize(max_len, self.pad_id());
        TokenSequence { ids, eos_position }
    }

    pub fn decode(&self, seq: &TokenSequence) -> Result<String> {
        if let Some(&bad) = seq.ids.iter().find(|&&i| i as usize >= self.vocab_size()) {
            return Err(Error::Data(format!("token id {bad} outside vocabulary")));
        }
        let eos = seq
            .ids
            .iter()
            .position(|&i| i == self.eos_id())
            .ok_or_else(|| Error::Data("token sequence has no [EOS]".into()))?;
        let bytes: Vec<u8> = seq.ids[..eos]
            .iter()
            .filter(|&&i| !self.is_special(i))
            .flat_map(|&i| self.tokens[i as usize].iter().copied())
            .collect();
        Ok(String::from_utf8_lossy(&bytes).into_owned())
    }

    pub fn to_json(&self) -> Result<String> {
        let table = byte_to_unicode();
        let show = |id: u32| -> String { self.tokens[id as usize].iter().map(|&b| table[b as usize]).collect() };
        let file = VocabFile {
            merges: self.merges.iter().map(|&(a, b)| [show(a), show(b)]).collect(),
            specials: [
                (SOS.to_string(), self.sos_id()),
                (EOS.to_string(), self.eos_id()),
                (PAD.to_string(), self.pad_id()),
            ]
            .into_iter()
            .collect(),
            vocab_size: self.vocab_size(),
        };
        Ok(serde_json::to_string_pretty(&file)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: VocabFile = serde_json::from_str(text)?;
        let rev: HashMap<char, u8> = byte_to_unicode().iter().enumerate().map(|(b, &c)| (c, b as u8)).collect();
        let mut vocab = Vocabulary::bytes_only();
        for [a, b] in &file.merges {
            let mut ids = [0u32; 2];
            for (slot, s) in ids.iter_mut().zip([a, b]) {
                let bytes = s
                    .chars()
                    .map(|c| rev.get(&c).copied())
                    .collect::<Option<Vec<u8>>>()
                    .ok_or_else(|| Error::Data(format!("merge token {s:?} has unmapped characters")))?;
                *slot = vocab
                    .token_id(&bytes)
                    .ok_or_else(|| Error::Data(format!("merge references unknown token {s:?}")))?;
            }
            if vocab.token_to_id.contains_key(&vocab.concat(ids[0], ids[1])) {
                return Err(Error::Data(format!("merge {a:?}+{b:?} duplicates an existing token")));
            }
            vocab.push_merge((ids[0], ids[1]));
        }
        let expect = [(SOS, vocab.sos_id()), (EOS, vocab.eos_id()), (PAD, vocab.pad_id())];
        for (name, id) in expect {
            if file.specials.get(name) != Some(&id) {
                return Err(Error::Data(format!("special {name} must have id {id}")));
            }
        }
        if file.specials.len() != NUM_SPECIALS || file.vocab_size != vocab.vocab_size() {
            return Err(Error::Data(format!(
                "vocab_size {} inconsistent with {} merges",
                file.vocab_size,
                vocab.num_merges()
            )));
        }
        Ok(vocab)
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct VocabFile {
    merges: Vec<[String; 2]>,
    specials: std::collections::BTreeMap<String, u32>,
    vocab_size: usize,
}

/// Reversible byte -> printable char table (the usual byte-level BPE mapping).
fn byte_to_unicode() -> &'static [char; 256] {
    static TABLE: OnceLock<[char; 256]> = OnceLock::new();
    TABLE.get_or_init(|| {
        let printable = |b: u32| (0x21..=0x7e).contains(&b) || (0xa1..=0xac).contains(&b) || (0xae..=0xff).contains(&b);
        let mut table = ['\0'; 256];
        let mut extra = 0;
        for b in 0..256u32 {
            table[b as usize] = if printable(b) {
                char::from_u32(b).unwrap()
            } else {
                extra += 1;
                char::from_u32(255 + extra).unwrap()
            };
        }
        table
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample_vocab() -> Vocabulary {
        let corpus = [
            "Hello world",
            "hello there, world!",
            "안녕하세요 세계",
            "안녕 hello 123",
            "a photo of a dog",
            "개 사진",
        ];
        train_bpe(corpus, 400).unwrap()
    }

    #[test]
    fn first_merge_is_most_frequent_pair() {
        let v = train_bpe(["aaab", "aaab"], 260).unwrap();
        assert_eq!(v.num_merges(), 1);
        assert_eq!(v.merges()[0], (b'a' as u32, b'a' as u32));
    }

    #[test]
    fn ties_break_lexicographically() {
        // "ab" and "cd" each occur once; ("a","b") sorts first.
        let v = train_bpe(["cd|ab"], 260).unwrap();
        assert_eq!(v.merges()[0], (b'a' as u32, b'b' as u32));
    }

    #[test]
    fn empty_corpus_and_tiny_target_rejected() {
        assert!(train_bpe(Vec::<String>::new(), 300).is_err());
        assert!(train_bpe(["abc"], 259).is_err());
    }

    #[test]
    fn bilingual_training_succeeds() {
        let v = sample_vocab();
        assert!(v.num_merges() > 0);
        let seq = v.encode("hello 안녕", 76);
        assert_eq!(v.decode(&seq).unwrap(), "hello 안녕");
    }

    #[test]
    fn training_stops_when_pairs_run_out() {
        let v = train_bpe(["ab"], 10_000).unwrap();
        assert_eq!(v.num_merges(), 1);
    }

    #[test]
    fn empty_text_layout() {
        let v = sample_vocab();
        let seq = v.encode("", 76);
        assert_eq!(seq.ids.len(), 76);
        assert_eq!(seq.ids[0], v.sos_id());
        assert_eq!(seq.ids[1], v.eos_id());
        assert!(seq.ids[2..].iter().all(|&i| i == v.pad_id()));
        assert_eq!(v.decode(&seq).unwrap(), "");
        seq.validate(&v).unwrap();
    }

    #[test]
    fn truncation_keeps_eos() {
        let v = sample_vocab();
        let long = "zq ".repeat(200);
        let seq = v.encode(&long, 76);
        assert_eq!(seq.eos_position, 75);
        assert_eq!(seq.ids[75], v.eos_id());
        seq.validate(&v).unwrap();
    }

    #[test]
    fn decode_errors() {
        let v = sample_vocab();
        let mut seq = v.encode("hi", 8);
        seq.ids[seq.eos_position] = v.pad_id();
        assert!(v.decode(&seq).is_err());
        let mut seq = v.encode("hi", 8);
        seq.ids[1] = v.vocab_size() as u32;
        assert!(v.decode(&seq).is_err());
    }

    #[test]
    fn specials_distinct_and_not_merges() {
        let v = sample_vocab();
        let s = [v.sos_id(), v.eos_id(), v.pad_id()];
        assert!(s[0] != s[1] && s[1] != s[2] && s[0] != s[2]);
        assert!(s.iter().all(|&id| v.token_bytes(id).is_none()));
        for (i, t) in v.tokens.iter().enumerate() {
            assert_eq!(v.token_id(t), Some(i as u32));
        }
    }

    #[test]
    fn json_roundtrip_is_exact() {
        let v = sample_vocab();
        let text = v.to_json().unwrap();
        let back = Vocabulary::from_json(&text).unwrap();
        assert_eq!(back, v);
        assert_eq!(back.to_json().unwrap(), text);
        assert!(text.contains("\"vocab_size\""));
    }

    #[test]
    fn weighted_corpora_shift_merges() {
        let mut t = BpeTrainer::new();
        t.add_texts(["xy"], 1).add_texts(["ab"], 5);
        let v = t.train(260).unwrap();
        assert_eq!(v.merges()[0], (b'a' as u32, b'b' as u32));
    }

    #[test]
    fn pretokenize_covers_input() {
        let s = "  Hello,  world\t안녕 123abc ";
        assert_eq!(pretokenize(s).concat(), s);
        assert_eq!(pretokenize("a photo"), vec!["a", " photo"]);
    }

    proptest! {
        #[test]
        fn roundtrip_lowercase(s in "[a-zA-Z가-힣0-9 ,.!?]{0,30}") {
            let v = sample_vocab();
            let seq = v.encode(&s, 200);
            prop_assert_eq!(v.decode(&seq).unwrap(), s.to_lowercase());
        }

        #[test]
        fn prefix_stable(a in "[a-z가-힣]{1,8}( [a-z가-힣]{1,8}){0,3}", b in "[a-z가-힣]{1,8}") {
            let v = sample_vocab();
            let left = v.encode_content(&a);
            let joined = v.encode_content(&format!("{a} {b}"));
            prop_assert_eq!(&joined[..left.len()], &left[..]);
        }
    }
}
