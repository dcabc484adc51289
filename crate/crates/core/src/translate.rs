//! Block translation: anchors replaced by their generic translations, with a
//! per-source-token alignment into the translated stream and the
//! repeated-anchor bookkeeping used for loss masking.

use thiserror::Error;

use crate::anchors::{find_matches, AnchorDictionary, AnchorMatch};
use crate::tokenizer::{decode, TokenId, TokenSeq, Vocab};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TranslateError {
    #[error("no label for first position")]
    FirstPosition,
    #[error("position {0} out of range for block of length {1}")]
    OutOfRange(usize, usize),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TranslationResult {
    pub translated: TokenSeq,
    /// `mapping[i]` is the number of translated tokens emitted once source
    /// token `i` has been consumed.
    pub mapping: Vec<usize>,
    pub matches: Vec<AnchorMatch>,
    /// One flag per match; false once the same entry already matched earlier in the block.
    pub first_occurrence: Vec<bool>,
}

#[derive(Clone, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(transparent)]
pub struct LossMask {
    pub mask: Vec<u8>,
}

impl LossMask {
    pub fn len(&self) -> usize {
        self.mask.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mask.is_empty()
    }
}

/// Translates one block. Inside a span of `k` source tokens replaced by `m`
/// translated tokens, the mapping advances by one per source token until
/// `min(k, m)` tokens are attributed, and the last source token of the span
/// always lands on the span total.
pub fn translate_block(block: &[TokenId], dict: &AnchorDictionary) -> TranslationResult {
    let matches = find_matches(block, dict);
    let mut translated = Vec::with_capacity(block.len() + block.len() / 4);
    let mut mapping = Vec::with_capacity(block.len());
    let mut first_occurrence = Vec::with_capacity(matches.len());
    let mut seen = vec![false; dict.len()];

    let mut next_match = matches.iter().peekable();
    let mut i = 0;
    while i < block.len() {
        match next_match.peek() {
            Some(m) if m.start == i => {
                let entry = &dict.entries()[m.entry_index];
                first_occurrence.push(!std::mem::replace(&mut seen[m.entry_index], true));
                let base = translated.len();
                let replacement = entry.translation_for_variant(m.variant_index);
                translated.extend_from_slice(replacement);
                let total = replacement.len();
                for j in 0..m.length {
                    let c = if j + 1 == m.length {
                        total
                    } else {
                        (j + 1).min(total)
                    };
                    mapping.push(base + c);
                }
                i += m.length;
                next_match.next();
            }
            _ => {
                translated.push(block[i]);
                mapping.push(translated.len());
                i += 1;
            }
        }
    }
    TranslationResult {
        translated: TokenSeq::new(translated),
        mapping,
        matches,
        first_occurrence,
    }
}

/// Ones everywhere except inside spans of repeated anchors.
pub fn build_loss_mask(result: &TranslationResult) -> LossMask {
    let mut mask = vec![1u8; result.mapping.len()];
    for (m, &first) in result.matches.iter().zip(&result.first_occurrence) {
        if !first {
            mask[m.start..m.end()].fill(0);
        }
    }
    LossMask { mask }
}

/// Row of the translated logits whose next-token prediction labels source
/// position `i`: the row of the last translated token emitted before `i`.
pub fn label_row_index(mapping: &[usize], i: usize) -> Result<usize, TranslateError> {
    if i == 0 {
        return Err(TranslateError::FirstPosition);
    }
    if i >= mapping.len() {
        return Err(TranslateError::OutOfRange(i, mapping.len()));
    }
    Ok(mapping[i - 1] - 1)
}

/// Two-column dump: each source token next to the label token for its
/// position. Position 0 has no label and shows an empty cell.
pub fn render_label_view(
    vocab: &Vocab,
    source: &[TokenId],
    labels: &[TokenId],
    mask: &[u8],
) -> String {
    let show = |id: TokenId| {
        let s = decode(vocab, &[id]).unwrap_or_else(|_| format!("<{id}>"));
        s.replace('\n', "\\n").replace('\t', "\\t")
    };
    let mut out = String::from("source\tlabel\n");
    for (i, &s) in source.iter().enumerate() {
        let label = if i == 0 {
            String::new()
        } else if mask.get(i) == Some(&0) {
            format!("[masked] {}", show(labels[i]))
        } else {
            show(labels[i])
        };
        out.push_str(&format!("{}\t{}\n", show(s), label));
    }
    out
}
