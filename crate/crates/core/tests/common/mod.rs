#![allow(dead_code)]

use std::collections::BTreeSet;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;

use unlearn_forge::anchors::{AnchorDictionary, AnchorMatch};
use unlearn_forge::tokenizer::{decode, encode, tokenize_variants, TokenSeq, Vocab};

/// A configuration small enough to run every stage in seconds.
pub fn tiny_config(work_dir: &Path) -> String {
    format!(
        r#"seed = 11

[paths]
work_dir = "{}"

[corpus]
n_characters = 4
n_places = 3
n_artifacts = 3
story_count = 20
canon_tokens = 3000
canon_holdout_tokens = 400
generic_tokens = 12000
generic_holdout_tokens = 1500
vocab_size = 400

[model]
layers = 1
heads = 2
embed_dim = 16
context_len = 32

[pretrain]
epochs = 1
batch_size = 8

[reinforce]
epochs = 1
batch_size = 8

[unlearn]
epochs = 1
batch_size = 4
max_steps = 6

[eval]
every = 3
max_tokens = 4
"#,
        work_dir.display()
    )
}

pub const WORDS: &[&str] = &[
    "Harry", "Potter", "Ron", "Hogwarts", "Hermione", "Granger", "wand", "the", "at", "went",
    "Jon", "Tom", "Mystic", "Academy", "Smith", "Ha", "rry", "Pot",
];

/// Byte tokens plus every word, bare and space-prefixed, and a few longer
/// merges so that some anchors span several tokens and some share prefixes.
pub fn oracle_vocab() -> Vocab {
    let mut tokens: Vec<Vec<u8>> = (0..=255u8).map(|b| vec![b]).collect();
    let mut seen: BTreeSet<Vec<u8>> = tokens.iter().cloned().collect();
    let mut add = |t: String| {
        if seen.insert(t.clone().into_bytes()) {
            tokens.push(t.into_bytes());
        }
    };
    for w in WORDS {
        add(w.to_string());
        add(format!(" {w}"));
    }
    add(" Harry Potter".into());
    add("Mystic Academy".into());
    add(". ".into());
    Vocab::from_tokens(tokens).unwrap()
}

pub fn random_term<R: Rng>(rng: &mut R) -> String {
    let n = rng.gen_range(1..=3);
    (0..n)
        .map(|_| *WORDS.choose(rng).unwrap())
        .collect::<Vec<_>>()
        .join(" ")
}

pub fn random_dict<R: Rng>(
    rng: &mut R,
    vocab: &Vocab,
) -> (Vec<(String, String)>, AnchorDictionary) {
    let n = rng.gen_range(1..=8);
    let mut pairs: Vec<(String, String)> = Vec::new();
    let mut anchors = BTreeSet::new();
    while pairs.len() < n {
        let a = random_term(rng);
        let t = random_term(rng);
        if a != t && anchors.insert(a.clone()) {
            pairs.push((a, t));
        }
    }
    // Nested anchors on purpose.
    if rng.gen_bool(0.5) && !anchors.contains("Harry") && !anchors.contains("Harry Potter") {
        pairs.push(("Harry Potter".into(), "Jon Smith".into()));
        pairs.push(("Harry".into(), "Jon".into()));
    }
    let dict = AnchorDictionary::from_pairs(&pairs, vocab).unwrap();
    (pairs, dict)
}

/// Text built from dictionary anchors and filler words, then encoded.
pub fn random_block<R: Rng>(
    rng: &mut R,
    vocab: &Vocab,
    pairs: &[(String, String)],
    max_len: usize,
) -> Vec<u32> {
    let mut text = String::new();
    loop {
        let piece = if rng.gen_bool(0.5) {
            pairs.choose(rng).unwrap().0.clone()
        } else {
            random_term(rng)
        };
        let sep = match rng.gen_range(0..4) {
            0 => "",
            1 => ". ",
            _ => " ",
        };
        let next = format!("{text}{sep}{piece}");
        if encode(vocab, &next).len() > max_len {
            break;
        }
        text = next;
    }
    let mut ids = encode(vocab, &text).into_inner();
    // Occasionally splice raw tokens to get encodings no text would produce.
    if !ids.is_empty() && rng.gen_bool(0.3) {
        let k = rng.gen_range(0..ids.len());
        ids[k] = rng.gen_range(0..vocab.size() as u32);
    }
    ids
}

/// Brute-force leftmost-longest: at each position try every entry and
/// variant in order, keep the strictly longest.
pub fn brute_matches(tokens: &[u32], forms: &[Vec<Vec<u32>>]) -> Vec<AnchorMatch> {
    let mut out = Vec::new();
    let mut pos = 0;
    while pos < tokens.len() {
        let mut best: Option<AnchorMatch> = None;
        for (ei, variants) in forms.iter().enumerate() {
            for (vi, f) in variants.iter().enumerate() {
                if !f.is_empty()
                    && tokens[pos..].starts_with(f)
                    && best.is_none_or(|b| f.len() > b.length)
                {
                    best = Some(AnchorMatch {
                        start: pos,
                        length: f.len(),
                        entry_index: ei,
                        variant_index: vi,
                    });
                }
            }
        }
        match best {
            Some(m) => {
                out.push(m);
                pos += m.length;
            }
            None => pos += 1,
        }
    }
    out
}

pub fn variant_forms(vocab: &Vocab, pairs: &[(String, String)]) -> Vec<Vec<Vec<u32>>> {
    pairs
        .iter()
        .map(|(a, _)| {
            tokenize_variants(vocab, a)
                .unwrap()
                .into_iter()
                .map(TokenSeq::into_inner)
                .collect()
        })
        .collect()
}

/// String-level reference translation: each matched span's text replaced by
/// its translation (keeping a leading space), re-encoded piecewise. Returns
/// the translated text, tokens and the per-source-token mapping.
pub fn reference_translation(
    vocab: &Vocab,
    pairs: &[(String, String)],
    block: &[u32],
    matches: &[AnchorMatch],
) -> (String, Vec<u32>, Vec<usize>) {
    let mut text = String::new();
    let mut tokens: Vec<u32> = Vec::new();
    let mut mapping = Vec::new();
    let mut pos = 0;
    let mut mi = 0;
    while pos < block.len() {
        if mi < matches.len() && matches[mi].start == pos {
            let m = matches[mi];
            let (anchor, translation) = &pairs[m.entry_index];
            let span_text = decode(vocab, &block[pos..m.end()]).unwrap();
            assert_eq!(span_text.trim_start(), anchor);
            let rep_text = if span_text.starts_with(' ') {
                format!(" {translation}")
            } else {
                translation.clone()
            };
            let rep = encode(vocab, &rep_text).into_inner();
            let base = tokens.len();
            for j in 0..m.length {
                mapping.push(if j + 1 == m.length {
                    base + rep.len()
                } else {
                    base + (j + 1).min(rep.len())
                });
            }
            text.push_str(&rep_text);
            tokens.extend(rep);
            pos = m.end();
            mi += 1;
        } else {
            text.push_str(&decode(vocab, &block[pos..pos + 1]).unwrap());
            tokens.push(block[pos]);
            pos += 1;
            mapping.push(tokens.len());
        }
    }
    (text, tokens, mapping)
}
