//! Greedy pair-merge subword tokenizer over raw bytes.
//!
//! Training splits text into word pieces where a single space is glued to the
//! front of the following alphanumeric run, then repeatedly merges the most
//! frequent adjacent pair inside those pieces. Encoding is greedy
//! longest-match against the resulting vocabulary; the 256 single-byte tokens
//! make it total.

use std::collections::HashMap;
use std::fmt;
use std::io::{BufRead, Write};
use std::ops::Deref;
use std::path::Path;

use sha2::{Digest, Sha256};
use thiserror::Error;

pub type TokenId = u32;

/// Header line of the on-disk vocabulary format.
pub const VOCAB_HEADER: &str = "unlearn-forge-vocab v1";

/// Vocabulary size used when nothing else is configured.
pub const DEFAULT_VOCAB_SIZE: usize = 4096;

#[derive(Debug, Error)]
pub enum TokenizerError {
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("vocab too small: {0} < 257")]
    VocabTooSmall(usize),
    #[error("unknown token id {0}")]
    UnknownTokenId(TokenId),
    #[error("empty term")]
    EmptyTerm,
    #[error("malformed vocab file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// A sequence of token ids.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(transparent)]
pub struct TokenSeq(Vec<TokenId>);

impl TokenSeq {
    pub fn new(ids: Vec<TokenId>) -> Self {
        TokenSeq(ids)
    }

    pub fn ids(&self) -> &[TokenId] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<TokenId> {
        self.0
    }
}

impl Deref for TokenSeq {
    type Target = [TokenId];

    fn deref(&self) -> &[TokenId] {
        &self.0
    }
}

impl From<Vec<TokenId>> for TokenSeq {
    fn from(ids: Vec<TokenId>) -> Self {
        TokenSeq(ids)
    }
}

impl From<&[TokenId]> for TokenSeq {
    fn from(ids: &[TokenId]) -> Self {
        TokenSeq(ids.to_vec())
    }
}

#[derive(Clone, Debug, Default)]
struct TrieNode {
    children: Vec<(u8, u32)>,
    token: Option<TokenId>,
}

/// Byte trie over the vocabulary, used for longest-match encoding.
#[derive(Clone, Debug)]
struct ByteTrie {
    nodes: Vec<TrieNode>,
}

impl ByteTrie {
    fn build(tokens: &[Vec<u8>]) -> Self {
        let mut nodes = vec![TrieNode::default()];
        for (id, bytes) in tokens.iter().enumerate() {
            let mut cur = 0usize;
            for &b in bytes {
                cur = match nodes[cur].children.iter().find(|(k, _)| *k == b) {
                    Some(&(_, next)) => next as usize,
                    None => {
                        let next = nodes.len();
                        nodes.push(TrieNode::default());
                        nodes[cur].children.push((b, next as u32));
                        next
                    }
                };
            }
            nodes[cur].token = Some(id as TokenId);
        }
        ByteTrie { nodes }
    }

    /// Longest token that is a prefix of `bytes`, as (id, length).
    fn longest_prefix(&self, bytes: &[u8]) -> Option<(TokenId, usize)> {
        let mut cur = 0usize;
        let mut best = None;
        for (i, &b) in bytes.iter().enumerate() {
            match self.nodes[cur].children.iter().find(|(k, _)| *k == b) {
                Some(&(_, next)) => cur = next as usize,
                None => break,
            }
            if let Some(id) = self.nodes[cur].token {
                best = Some((id, i + 1));
            }
        }
        best
    }
}

/// Token vocabulary: id ↔ byte-string bijection plus an encoding trie.
#[derive(Clone)]
pub struct Vocab {
    tokens: Vec<Vec<u8>>,
    ids: HashMap<Vec<u8>, TokenId>,
    trie: ByteTrie,
}

impl fmt::Debug for Vocab {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Vocab").field("size", &self.size()).finish()
    }
}

impl PartialEq for Vocab {
    fn eq(&self, other: &Self) -> bool {
        self.tokens == other.tokens
    }
}

impl Eq for Vocab {}

impl Vocab {
    /// Builds a vocabulary from an ordered token list. Fails if any token is
    /// duplicated or if the single-byte tokens are missing.
    pub fn from_tokens(tokens: Vec<Vec<u8>>) -> Result<Self, TokenizerError> {
        let mut ids = HashMap::with_capacity(tokens.len());
        for (id, t) in tokens.iter().enumerate() {
            if t.is_empty() {
                return Err(TokenizerError::Format(format!("empty token at id {id}")));
            }
            if ids.insert(t.clone(), id as TokenId).is_some() {
                return Err(TokenizerError::Format(format!(
                    "duplicate token at id {id}"
                )));
            }
        }
        for b in 0..=255u8 {
            if !ids.contains_key([b].as_slice()) {
                return Err(TokenizerError::Format(format!(
                    "missing byte token {b:#04x}"
                )));
            }
        }
        let trie = ByteTrie::build(&tokens);
        Ok(Vocab { tokens, ids, trie })
    }

    pub fn size(&self) -> usize {
        self.tokens.len()
    }

    pub fn token_bytes(&self, id: TokenId) -> Option<&[u8]> {
        self.tokens.get(id as usize).map(Vec::as_slice)
    }

    pub fn id_of(&self, bytes: &[u8]) -> Option<TokenId> {
        self.ids.get(bytes).copied()
    }

    pub fn tokens(&self) -> &[Vec<u8>] {
        &self.tokens
    }

    pub fn to_text(&self) -> String {
        let mut out = String::with_capacity(self.tokens.len() * 8);
        out.push_str(VOCAB_HEADER);
        out.push('\n');
        for t in &self.tokens {
            out.push_str(&hex::encode(t));
            out.push('\n');
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self, TokenizerError> {
        let mut lines = text.lines();
        match lines.next() {
            Some(h) if h == VOCAB_HEADER => {}
            other => {
                return Err(TokenizerError::Format(format!("bad header {other:?}")));
            }
        }
        let tokens = lines
            .enumerate()
            .map(|(i, l)| {
                hex::decode(l.trim())
                    .map_err(|e| TokenizerError::Format(format!("line {}: {e}", i + 2)))
            })
            .collect::<Result<Vec<_>, _>>()?;
        Vocab::from_tokens(tokens)
    }

    pub fn save(&self, path: &Path) -> Result<(), TokenizerError> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        f.write_all(self.to_text().as_bytes())?;
        f.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, TokenizerError> {
        let f = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut text = String::new();
        for line in f.lines() {
            text.push_str(&line?);
            text.push('\n');
        }
        Vocab::from_text(&text)
    }

    /// SHA-256 of the serialized vocabulary, hex encoded.
    pub fn content_hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_text().as_bytes()))
    }
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum ByteClass {
    Word,
    Space,
    Other,
}

fn class_of(b: u8) -> ByteClass {
    if b.is_ascii_alphanumeric() || b >= 0x80 {
        ByteClass::Word
    } else if b == b' ' {
        ByteClass::Space
    } else {
        ByteClass::Other
    }
}

/// Splits text into merge domains: `[ ]?word-run`, a lone space, or a single
/// other byte.
pub(crate) fn word_pieces(text: &[u8]) -> Vec<&[u8]> {
    let mut out = Vec::new();
    let mut i = 0;
    while i < text.len() {
        let start = i;
        match class_of(text[i]) {
            ByteClass::Space => {
                i += 1;
                while i < text.len() && class_of(text[i]) == ByteClass::Word {
                    i += 1;
                }
            }
            ByteClass::Word => {
                while i < text.len() && class_of(text[i]) == ByteClass::Word {
                    i += 1;
                }
            }
            ByteClass::Other => i += 1,
        }
        out.push(&text[start..i]);
    }
    out
}

/// Trains a vocabulary of at most `target_vocab_size` tokens.
///
/// Pairs are only merged when they occur at least twice. Among the most
/// frequent pairs the one whose merged bytes sort first wins.
pub fn train_tokenizer(corpus: &str, target_vocab_size: usize) -> Result<Vocab, TokenizerError> {
    if corpus.is_empty() {
        return Err(TokenizerError::EmptyCorpus);
    }
    if target_vocab_size < 257 {
        return Err(TokenizerError::VocabTooSmall(target_vocab_size));
    }

    let mut counts: HashMap<&[u8], usize> = HashMap::new();
    for piece in word_pieces(corpus.as_bytes()) {
        *counts.entry(piece).or_default() += 1;
    }
    // Sorted so that every later step is independent of hash order.
    let mut words: Vec<(Vec<TokenId>, usize)> = counts
        .into_iter()
        .map(|(w, c)| (w.iter().map(|&b| b as TokenId).collect(), c))
        .collect();
    words.sort();

    let mut tokens: Vec<Vec<u8>> = (0..=255u8).map(|b| vec![b]).collect();
    let mut ids: HashMap<Vec<u8>, TokenId> = tokens
        .iter()
        .enumerate()
        .map(|(i, t)| (t.clone(), i as TokenId))
        .collect();

    while tokens.len() < target_vocab_size {
        let mut pairs: HashMap<(TokenId, TokenId), usize> = HashMap::new();
        for (w, c) in &words {
            for p in w.windows(2) {
                *pairs.entry((p[0], p[1])).or_default() += c;
            }
        }
        let mut best: Option<((TokenId, TokenId), usize, Vec<u8>)> = None;
        for (&pair, &count) in &pairs {
            if count < 2 {
                continue;
            }
            let merged = [
                tokens[pair.0 as usize].as_slice(),
                tokens[pair.1 as usize].as_slice(),
            ]
            .concat();
            let better = match &best {
                None => true,
                Some((bp, bc, bm)) => {
                    count > *bc || (count == *bc && (merged < *bm || (merged == *bm && pair < *bp)))
                }
            };
            if better {
                best = Some((pair, count, merged));
            }
        }
        let Some((pair, _, merged)) = best else { break };
        let new_id = match ids.get(&merged) {
            Some(&id) => id,
            None => {
                let id = tokens.len() as TokenId;
                ids.insert(merged.clone(), id);
                tokens.push(merged);
                id
            }
        };
        for (w, _) in words.iter_mut() {
            if w.len() < 2 {
                continue;
            }
            let mut out = Vec::with_capacity(w.len());
            let mut i = 0;
            while i < w.len() {
                if i + 1 < w.len() && w[i] == pair.0 && w[i + 1] == pair.1 {
                    out.push(new_id);
                    i += 2;
                } else {
                    out.push(w[i]);
                    i += 1;
                }
            }
            *w = out;
        }
    }
    Vocab::from_tokens(tokens)
}

/// Greedy longest-match encoding. Total thanks to the byte tokens.
pub fn encode(vocab: &Vocab, text: &str) -> TokenSeq {
    encode_bytes(vocab, text.as_bytes())
}

pub fn encode_bytes(vocab: &Vocab, bytes: &[u8]) -> TokenSeq {
    let mut out = Vec::with_capacity(bytes.len() / 3 + 1);
    let mut i = 0;
    while i < bytes.len() {
        let (id, len) = vocab
            .trie
            .longest_prefix(&bytes[i..])
            .expect("byte tokens are always present");
        out.push(id);
        i += len;
    }
    TokenSeq(out)
}

pub fn decode_bytes(vocab: &Vocab, seq: &[TokenId]) -> Result<Vec<u8>, TokenizerError> {
    let mut out = Vec::new();
    for &id in seq {
        let t = vocab
            .token_bytes(id)
            .ok_or(TokenizerError::UnknownTokenId(id))?;
        out.extend_from_slice(t);
    }
    Ok(out)
}

/// Concatenates token bytes; invalid UTF-8 is replaced lossily.
pub fn decode(vocab: &Vocab, seq: &[TokenId]) -> Result<String, TokenizerError> {
    decode_bytes(vocab, seq).map(|b| String::from_utf8_lossy(&b).into_owned())
}

/// The encodings of `term` at the start of a text and after a space, deduplicated.
pub fn tokenize_variants(vocab: &Vocab, term: &str) -> Result<Vec<TokenSeq>, TokenizerError> {
    if term.is_empty() {
        return Err(TokenizerError::EmptyTerm);
    }
    let bare = encode(vocab, term);
    let spaced = encode(vocab, &format!(" {term}"));
    let mut out = vec![bare];
    if !out.contains(&spaced) {
        out.push(spaced);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn small_vocab() -> Vocab {
        let corpus = "Harry went home. Then Harry met Ron. Harry and Ron walked to Hogwarts. \
                      Hogwarts is big. Harry likes Hogwarts."
            .repeat(4);
        train_tokenizer(&corpus, 400).unwrap()
    }

    #[test]
    fn aaaa_merges_aa() {
        let v = train_tokenizer("aaaa", 300).unwrap();
        assert_eq!(v.size(), 257);
        assert_eq!(v.id_of(b"aa"), Some(256));
    }

    #[test]
    fn unique_bytes_give_no_merges() {
        let v = train_tokenizer("abcdefg", 300).unwrap();
        assert_eq!(v.size(), 256);
    }

    #[test]
    fn training_is_deterministic() {
        let corpus = "the cat sat on the mat with the other cat";
        let a = train_tokenizer(corpus, 300).unwrap();
        let b = train_tokenizer(corpus, 300).unwrap();
        assert_eq!(a.to_text(), b.to_text());
    }

    #[test]
    fn merge_ties_break_lexicographically() {
        // pieces: "ab", " ab", " cd", " cd". Pairs seen twice: "ab", " c", "cd".
        let v = train_tokenizer("ab ab cd cd", 257).unwrap();
        assert_eq!(v.size(), 257);
        assert_eq!(v.token_bytes(256).unwrap(), b" c");
    }

    #[test]
    fn training_errors() {
        assert!(matches!(
            train_tokenizer("", 300),
            Err(TokenizerError::EmptyCorpus)
        ));
        assert!(matches!(
            train_tokenizer("abc", 256),
            Err(TokenizerError::VocabTooSmall(256))
        ));
    }

    #[test]
    fn whitespace_variants_differ() {
        let v = small_vocab();
        let bare = encode(&v, "Harry");
        let spaced = encode(&v, " Harry");
        assert!(v.id_of(b" Harry").is_some());
        assert_eq!(spaced.ids(), &[v.id_of(b" Harry").unwrap()]);
        assert_ne!(bare[0], spaced[0]);
    }

    #[test]
    fn empty_roundtrips() {
        let v = small_vocab();
        assert!(encode(&v, "").is_empty());
        assert_eq!(decode(&v, &[]).unwrap(), "");
    }

    #[test]
    fn decode_rejects_out_of_range() {
        let v = small_vocab();
        let bad = v.size() as TokenId;
        assert!(matches!(decode(&v, &[bad]), Err(TokenizerError::UnknownTokenId(id)) if id == bad));
    }

    #[test]
    fn decode_encode_mystic_academy() {
        let v = small_vocab();
        assert_eq!(
            decode(&v, &encode(&v, "Mystic Academy")).unwrap(),
            "Mystic Academy"
        );
    }

    #[test]
    fn variants_of_single_byte() {
        let v = train_tokenizer("abcdefg", 300).unwrap();
        let vars = tokenize_variants(&v, "q").unwrap();
        assert_eq!(
            vars,
            vec![
                TokenSeq::new(vec![b'q' as u32]),
                TokenSeq::new(vec![b' ' as u32, b'q' as u32])
            ]
        );
        assert!(matches!(
            tokenize_variants(&v, ""),
            Err(TokenizerError::EmptyTerm)
        ));
    }

    #[test]
    fn variants_decode_to_term() {
        let v = small_vocab();
        let vars = tokenize_variants(&v, "Hogwarts").unwrap();
        assert_eq!(vars.len(), 2);
        for s in vars {
            let d = decode(&v, &s).unwrap();
            assert!(d == "Hogwarts" || d == " Hogwarts", "{d:?}");
        }
    }

    #[test]
    fn vocab_file_roundtrip() {
        let v = small_vocab();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("vocab.txt");
        v.save(&p).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.starts_with("unlearn-forge-vocab v1\n"));
        assert_eq!(text.lines().nth(1 + b'a' as usize), Some("61"));
        assert_eq!(Vocab::load(&p).unwrap(), v);
        assert!(Vocab::from_text("nope\n").is_err());
    }

    proptest! {
        #[test]
        fn roundtrip_any_bytes(bytes in proptest::collection::vec(any::<u8>(), 0..200)) {
            let v = small_vocab();
            let seq = encode_bytes(&v, &bytes);
            prop_assert!(seq.iter().all(|&id| (id as usize) < v.size()));
            prop_assert_eq!(decode_bytes(&v, &seq).unwrap(), bytes);
        }

        #[test]
        fn variants_are_sound(term in "[A-Za-z ]{1,12}") {
            let v = small_vocab();
            for s in tokenize_variants(&v, &term).unwrap() {
                let d = decode(&v, &s).unwrap();
                let spaced = format!(" {}", term);
                prop_assert!(d == term || d == spaced);
            }
        }
    }
}
