//! Anchored-term dictionaries and their matching over token streams.

use std::fmt;
use std::path::Path;

use serde::de::{Deserializer, MapAccess, Visitor};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::tokenizer::{encode, tokenize_variants, TokenId, TokenSeq, Vocab};

#[derive(Debug, Error)]
pub enum AnchorError {
    #[error("dictionary parse error: {0}")]
    Parse(String),
    #[error("duplicate anchor {0:?}")]
    DuplicateAnchor(String),
    #[error("empty anchor")]
    EmptyAnchor,
    #[error("empty translation for anchor {0:?}")]
    EmptyTranslation(String),
    #[error("anchor equals translation: {0:?}")]
    AnchorEqualsTranslation(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// One dictionary entry with its token forms under a particular vocabulary.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AnchorEntry {
    pub anchor: String,
    pub translation: String,
    /// `tokenize_variants(anchor)`: the bare form first, then the space-prefixed form.
    pub anchor_forms: Vec<TokenSeq>,
    /// Translation encoded bare and with a leading space.
    pub translation_bare: TokenSeq,
    pub translation_spaced: TokenSeq,
}

impl AnchorEntry {
    /// Translation tokens to emit in place of the given anchor variant. The
    /// space-prefixed variant (index 1) is replaced by the space-prefixed
    /// translation so the surrounding whitespace survives.
    pub fn translation_for_variant(&self, variant_index: usize) -> &TokenSeq {
        if variant_index == 0 {
            &self.translation_bare
        } else {
            &self.translation_spaced
        }
    }

    /// First token of each translation form.
    pub fn translation_heads(&self) -> impl Iterator<Item = TokenId> + '_ {
        self.translation_bare
            .first()
            .into_iter()
            .chain(self.translation_spaced.first())
            .copied()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct AnchorMatch {
    pub start: usize,
    pub length: usize,
    pub entry_index: usize,
    pub variant_index: usize,
}

impl AnchorMatch {
    pub fn end(&self) -> usize {
        self.start + self.length
    }
}

#[derive(Clone, Debug, Default)]
struct TrieNode {
    children: Vec<(TokenId, u32)>,
    /// (entry_index, variant_index) of the lowest entry ending here.
    terminal: Option<(usize, usize)>,
}

/// Token-level trie over every anchor variant.
#[derive(Clone, Debug)]
struct TokenTrie {
    nodes: Vec<TrieNode>,
}

impl TokenTrie {
    fn build(entries: &[AnchorEntry]) -> Self {
        let mut nodes = vec![TrieNode::default()];
        for (ei, e) in entries.iter().enumerate() {
            for (vi, form) in e.anchor_forms.iter().enumerate() {
                let mut cur = 0usize;
                for &t in form.iter() {
                    cur = match nodes[cur].children.iter().find(|(k, _)| *k == t) {
                        Some(&(_, next)) => next as usize,
                        None => {
                            let next = nodes.len();
                            nodes.push(TrieNode::default());
                            nodes[cur].children.push((t, next as u32));
                            next
                        }
                    };
                }
                // Entries are inserted in order, so the first writer is the lowest index.
                nodes[cur].terminal.get_or_insert((ei, vi));
            }
        }
        TokenTrie { nodes }
    }

    fn longest_at(&self, tokens: &[TokenId]) -> Option<(usize, usize, usize)> {
        let mut cur = 0usize;
        let mut best = None;
        for (i, &t) in tokens.iter().enumerate() {
            match self.nodes[cur].children.iter().find(|(k, _)| *k == t) {
                Some(&(_, next)) => cur = next as usize,
                None => break,
            }
            if let Some((ei, vi)) = self.nodes[cur].terminal {
                best = Some((i + 1, ei, vi));
            }
        }
        best
    }
}

/// The dictionary of anchored terms and generic translations, tokenized
/// against one vocabulary.
#[derive(Clone, Debug)]
pub struct AnchorDictionary {
    entries: Vec<AnchorEntry>,
    trie: TokenTrie,
}

impl AnchorDictionary {
    pub fn empty() -> Self {
        AnchorDictionary {
            entries: Vec::new(),
            trie: TokenTrie::build(&[]),
        }
    }

    /// Validates and tokenizes `(anchor, translation)` pairs, keeping their order.
    pub fn from_pairs<S: AsRef<str>>(pairs: &[(S, S)], vocab: &Vocab) -> Result<Self, AnchorError> {
        let mut entries: Vec<AnchorEntry> = Vec::with_capacity(pairs.len());
        for (a, t) in pairs {
            let (anchor, translation) = (a.as_ref(), t.as_ref());
            if anchor.is_empty() {
                return Err(AnchorError::EmptyAnchor);
            }
            if translation.is_empty() {
                return Err(AnchorError::EmptyTranslation(anchor.to_string()));
            }
            if anchor == translation {
                return Err(AnchorError::AnchorEqualsTranslation(anchor.to_string()));
            }
            if entries.iter().any(|e| e.anchor == anchor) {
                return Err(AnchorError::DuplicateAnchor(anchor.to_string()));
            }
            let anchor_forms = tokenize_variants(vocab, anchor).expect("anchor is non-empty");
            entries.push(AnchorEntry {
                anchor: anchor.to_string(),
                translation: translation.to_string(),
                anchor_forms,
                translation_bare: encode(vocab, translation),
                translation_spaced: encode(vocab, &format!(" {translation}")),
            });
        }
        let trie = TokenTrie::build(&entries);
        Ok(AnchorDictionary { entries, trie })
    }

    pub fn from_json(json: &str, vocab: &Vocab) -> Result<Self, AnchorError> {
        let pairs = parse_pairs(json)?;
        AnchorDictionary::from_pairs(&pairs, vocab)
    }

    pub fn entries(&self) -> &[AnchorEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn pairs(&self) -> Vec<(String, String)> {
        self.entries
            .iter()
            .map(|e| (e.anchor.clone(), e.translation.clone()))
            .collect()
    }

    /// SHA-256 over the ordered pairs, hex encoded.
    pub fn content_hash(&self) -> String {
        hex::encode(Sha256::digest(pairs_to_json(&self.pairs()).as_bytes()))
    }
}

/// Reads a flat JSON object of anchor → translation strings.
pub fn load_dictionary(path: &Path, vocab: &Vocab) -> Result<AnchorDictionary, AnchorError> {
    let text = std::fs::read_to_string(path)?;
    AnchorDictionary::from_json(&text, vocab)
}

/// Renders pairs as a pretty flat JSON object in the given order.
pub fn pairs_to_json(pairs: &[(String, String)]) -> String {
    let mut out = String::from("{\n");
    for (i, (a, t)) in pairs.iter().enumerate() {
        let sep = if i + 1 == pairs.len() { "" } else { "," };
        out.push_str(&format!(
            "  {}: {}{sep}\n",
            serde_json::to_string(a).expect("string serializes"),
            serde_json::to_string(t).expect("string serializes")
        ));
    }
    out.push('}');
    out.push('\n');
    out
}

struct PairsVisitor;

impl<'de> Visitor<'de> for PairsVisitor {
    type Value = Vec<(String, String)>;

    fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
        f.write_str("a flat object of string to string")
    }

    fn visit_map<M: MapAccess<'de>>(self, mut map: M) -> Result<Self::Value, M::Error> {
        let mut out = Vec::new();
        while let Some((k, v)) = map.next_entry::<String, String>()? {
            out.push((k, v));
        }
        Ok(out)
    }
}

/// Parses a flat JSON object keeping file order and duplicate keys, so that
/// duplicates can be reported instead of silently collapsed.
pub fn parse_pairs(json: &str) -> Result<Vec<(String, String)>, AnchorError> {
    let mut de = serde_json::Deserializer::from_str(json);
    let pairs = de
        .deserialize_map(PairsVisitor)
        .map_err(|e| AnchorError::Parse(e.to_string()))?;
    de.end().map_err(|e| AnchorError::Parse(e.to_string()))?;
    Ok(pairs)
}

/// Leftmost-longest, non-overlapping matches of any anchor variant.
/// Equal-length candidates resolve to the lower entry index.
pub fn find_matches(tokens: &[TokenId], dict: &AnchorDictionary) -> Vec<AnchorMatch> {
    let mut out = Vec::new();
    if dict.is_empty() {
        return out;
    }
    let mut pos = 0;
    while pos < tokens.len() {
        match dict.trie.longest_at(&tokens[pos..]) {
            Some((length, entry_index, variant_index)) => {
                out.push(AnchorMatch {
                    start: pos,
                    length,
                    entry_index,
                    variant_index,
                });
                pos += length;
            }
            None => pos += 1,
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokenizer::train_tokenizer;

    fn vocab() -> Vocab {
        let corpus =
            "Harry Potter studies at Hogwarts. Harry met Ron at Hogwarts, Hogwarts is old. \
                      Jon studies at Mystic Academy. Tom and Jon are friends."
                .repeat(3);
        train_tokenizer(&corpus, 600).unwrap()
    }

    #[test]
    fn loads_listing_shape() {
        let v = vocab();
        let d = AnchorDictionary::from_json(
            r#"{ "Hogwarts": "Mystic Academy", "Ron": "Tom", "Harry": "Jon" }"#,
            &v,
        )
        .unwrap();
        assert_eq!(d.len(), 3);
        assert_eq!(d.entries()[0].anchor, "Hogwarts");
        assert_eq!(d.entries()[2].translation, "Jon");
    }

    #[test]
    fn empty_object_is_valid() {
        let d = AnchorDictionary::from_json("{}", &vocab()).unwrap();
        assert!(d.is_empty());
        assert!(find_matches(&encode(&vocab(), "Harry"), &d).is_empty());
    }

    #[test]
    fn validation_errors() {
        let v = vocab();
        assert!(matches!(
            AnchorDictionary::from_json(r#"{"X": "X"}"#, &v),
            Err(AnchorError::AnchorEqualsTranslation(_))
        ));
        assert!(matches!(
            AnchorDictionary::from_json(r#"{"X": "a", "X": "b"}"#, &v),
            Err(AnchorError::DuplicateAnchor(_))
        ));
        assert!(matches!(
            AnchorDictionary::from_json(r#"{"": "a"}"#, &v),
            Err(AnchorError::EmptyAnchor)
        ));
        assert!(matches!(
            AnchorDictionary::from_json(r#"{"a": ""}"#, &v),
            Err(AnchorError::EmptyTranslation(_))
        ));
        assert!(matches!(
            AnchorDictionary::from_json(r#"{"a": 1}"#, &v),
            Err(AnchorError::Parse(_))
        ));
        assert!(matches!(
            AnchorDictionary::from_json(r#"["a"]"#, &v),
            Err(AnchorError::Parse(_))
        ));
    }

    #[test]
    fn longest_anchor_wins() {
        let v = vocab();
        let d =
            AnchorDictionary::from_pairs(&[("Harry Potter", "Jon Smith"), ("Harry", "Jon")], &v)
                .unwrap();
        let toks = encode(&v, "Harry Potter studies");
        let m = find_matches(&toks, &d);
        assert_eq!(m.len(), 1);
        assert_eq!(m[0].start, 0);
        assert_eq!(m[0].entry_index, 0);
        assert_eq!(m[0].length, d.entries()[0].anchor_forms[0].len());
    }

    #[test]
    fn repeated_anchor_matches_twice() {
        let v = vocab();
        let d = AnchorDictionary::from_pairs(&[("Hogwarts", "Mystic Academy")], &v).unwrap();
        let toks = encode(&v, "Hogwarts, Hogwarts");
        let m = find_matches(&toks, &d);
        assert_eq!(m.len(), 2);
        assert_eq!((m[0].start, m[0].variant_index), (0, 0));
        assert_eq!(m[1].variant_index, 1);
        assert_eq!(m[1].end(), toks.len());
    }

    #[test]
    fn equal_length_prefers_lower_entry() {
        let v = vocab();
        // " Harry" as its own anchor collides with the spaced form of "Harry".
        let d = AnchorDictionary::from_pairs(&[(" Harry", "x"), ("Harry", "y")], &v).unwrap();
        let m = find_matches(&encode(&v, "a Harry"), &d);
        assert_eq!(m.len(), 1);
        assert_eq!(m[0].entry_index, 0);
    }

    #[test]
    fn dictionary_json_roundtrip() {
        let pairs = vec![
            ("Vexhall Keep".to_string(), "the old castle".to_string()),
            ("a\"b".into(), "c".into()),
        ];
        assert_eq!(parse_pairs(&pairs_to_json(&pairs)).unwrap(), pairs);
    }
}
