//! Generic-label generation.
//!
//! For every position of a target block the label is the argmax of
//! `v_baseline − α·ReLU(v_reinforced − v_baseline)`, where `v_baseline` comes
//! from the baseline model reading the translated block and `v_reinforced`
//! from the reinforced model reading the original block, after translation
//! heads of anchors already seen in the block have been pushed down.

use std::collections::BTreeSet;
use std::io::{BufRead, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::anchors::AnchorDictionary;
use crate::model::{forward, Checkpoint, LogitMatrix, ModelError};
use crate::parallel::par_map;
use crate::tokenizer::{TokenId, TokenSeq};
use crate::translate::{build_loss_mask, label_row_index, translate_block, LossMask};

pub const DEFAULT_ALPHA: f64 = 5.0;
pub const DEFAULT_CONSISTENCY_PENALTY: f32 = 1e4;
pub const DATASET_FORMAT: &str = "unlearn-forge-dataset v1";

#[derive(Debug, Error)]
pub enum LabelError {
    #[error("score vectors differ in length: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("alpha must be a non-negative finite number, got {0}")]
    InvalidAlpha(f64),
    #[error("vocab mismatch: baseline has {baseline}, reinforced has {reinforced}")]
    VocabMismatch { baseline: usize, reinforced: usize },
    #[error("alpha > 0 needs a reinforced checkpoint")]
    MissingReinforced,
    #[error("block {index} has {len} tokens, context length is {context_len}")]
    OverLength {
        index: usize,
        len: usize,
        context_len: usize,
    },
    #[error("malformed dataset: {0}")]
    Format(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenericCombineParams {
    pub alpha: f64,
    /// Subtracted from the score of every translation head already used in the block.
    pub consistency_penalty: f32,
}

impl Default for GenericCombineParams {
    fn default() -> Self {
        GenericCombineParams {
            alpha: DEFAULT_ALPHA,
            consistency_penalty: DEFAULT_CONSISTENCY_PENALTY,
        }
    }
}

impl GenericCombineParams {
    pub fn validate(&self) -> Result<(), LabelError> {
        if !(self.alpha.is_finite() && self.alpha >= 0.0) {
            return Err(LabelError::InvalidAlpha(self.alpha));
        }
        Ok(())
    }
}

/// `v_baseline − α·max(v_reinforced − v_baseline, 0)`, elementwise.
pub fn combine_logits(
    v_baseline: &[f32],
    v_reinforced: &[f32],
    alpha: f32,
) -> Result<Vec<f32>, LabelError> {
    if v_baseline.len() != v_reinforced.len() {
        return Err(LabelError::LengthMismatch(
            v_baseline.len(),
            v_reinforced.len(),
        ));
    }
    Ok(v_baseline
        .iter()
        .zip(v_reinforced)
        .map(|(&b, &r)| b - alpha * (r - b).max(0.0))
        .collect())
}

/// Block-local record of translation heads already emitted.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ConsistencyState {
    pub used_translation_heads: BTreeSet<TokenId>,
    pub penalty: f32,
}

impl ConsistencyState {
    pub fn new(penalty: f32) -> Self {
        ConsistencyState {
            used_translation_heads: BTreeSet::new(),
            penalty,
        }
    }
}

pub fn apply_consistency_penalty(v: &[f32], state: &ConsistencyState) -> Vec<f32> {
    let mut out = v.to_vec();
    for &t in &state.used_translation_heads {
        if let Some(x) = out.get_mut(t as usize) {
            *x -= state.penalty;
        }
    }
    out
}

/// Index of the maximum; the lowest index wins ties.
pub fn argmax(v: &[f32]) -> TokenId {
    let mut best = 0usize;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best as TokenId
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinetuneExample {
    pub source: TokenSeq,
    /// Generic label per source position; position 0 has no label and holds the source token.
    pub labels: Vec<TokenId>,
    pub mask: LossMask,
}

/// Labels one block. Positions whose label row falls beyond the context
/// window (the translation grew past it) keep their own token and are masked.
fn label_block(
    baseline: &Checkpoint,
    reinforced: Option<&Checkpoint>,
    block: &[TokenId],
    dict: &AnchorDictionary,
    params: &GenericCombineParams,
) -> Result<FinetuneExample, LabelError> {
    let result = translate_block(block, dict);
    let mut mask = build_loss_mask(&result);
    let n = block.len();
    let mut labels = block.to_vec();
    if n < 2 {
        return Ok(FinetuneExample {
            source: block.into(),
            labels,
            mask,
        });
    }

    let ctx = baseline.config.context_len;
    let visible = result.translated.len().min(ctx);
    let v_base = forward(baseline, &result.translated[..visible])?;
    let v_reinf: Option<LogitMatrix> = match reinforced {
        Some(r) if params.alpha > 0.0 => Some(forward(r, block)?),
        _ => None,
    };
    let alpha = params.alpha as f32;

    let mut state = ConsistencyState::new(params.consistency_penalty);
    let mut pending = result
        .matches
        .iter()
        .zip(&result.first_occurrence)
        .peekable();
    for i in 1..n {
        while let Some((m, &first)) = pending.peek() {
            if m.end() > i {
                break;
            }
            if first {
                state
                    .used_translation_heads
                    .extend(dict.entries()[m.entry_index].translation_heads());
            }
            pending.next();
        }
        let row = label_row_index(&result.mapping, i).expect("1 <= i < n");
        if row >= v_base.rows {
            mask.mask[i] = 0;
            continue;
        }
        let combined = match &v_reinf {
            Some(vr) => combine_logits(v_base.row(row), vr.row(i - 1), alpha)?,
            None => v_base.row(row).to_vec(),
        };
        labels[i] = argmax(&apply_consistency_penalty(&combined, &state));
    }
    Ok(FinetuneExample {
        source: block.into(),
        labels,
        mask,
    })
}

/// Builds the fine-tuning dataset for `target` blocks. `reinforced` may be
/// omitted only when `alpha == 0`.
pub fn generate_dataset(
    baseline: &Checkpoint,
    reinforced: Option<&Checkpoint>,
    target: &[TokenSeq],
    dict: &AnchorDictionary,
    params: &GenericCombineParams,
) -> Result<Vec<FinetuneExample>, LabelError> {
    params.validate()?;
    if params.alpha > 0.0 && reinforced.is_none() {
        return Err(LabelError::MissingReinforced);
    }
    if let Some(r) = reinforced {
        if r.config.vocab_size != baseline.config.vocab_size {
            return Err(LabelError::VocabMismatch {
                baseline: baseline.config.vocab_size,
                reinforced: r.config.vocab_size,
            });
        }
    }
    for (index, b) in target.iter().enumerate() {
        if b.len() > baseline.config.context_len {
            return Err(LabelError::OverLength {
                index,
                len: b.len(),
                context_len: baseline.config.context_len,
            });
        }
    }
    par_map(target, |b| {
        label_block(baseline, reinforced, b, dict, params)
    })
    .into_iter()
    .collect()
}

/// First line of a dataset file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub format: String,
    pub vocab_hash: String,
    pub alpha: f64,
    pub dictionary_hash: String,
}

#[derive(Serialize, Deserialize)]
struct DatasetRecord {
    source: Vec<TokenId>,
    labels: Vec<TokenId>,
    mask: Vec<u8>,
}

pub fn write_dataset(
    path: &Path,
    header: &DatasetHeader,
    examples: &[FinetuneExample],
) -> Result<(), LabelError> {
    let mut f = BufWriter::new(std::fs::File::create(path)?);
    writeln!(
        f,
        "{}",
        serde_json::to_string(header).map_err(|e| LabelError::Format(e.to_string()))?
    )?;
    for ex in examples {
        let rec = DatasetRecord {
            source: ex.source.to_vec(),
            labels: ex.labels.clone(),
            mask: ex.mask.mask.clone(),
        };
        writeln!(
            f,
            "{}",
            serde_json::to_string(&rec).map_err(|e| LabelError::Format(e.to_string()))?
        )?;
    }
    f.flush()?;
    Ok(())
}

pub fn read_dataset(path: &Path) -> Result<(DatasetHeader, Vec<FinetuneExample>), LabelError> {
    let f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut lines = f.lines();
    let header: DatasetHeader = match lines.next() {
        Some(l) => {
            serde_json::from_str(&l?).map_err(|e| LabelError::Format(format!("header: {e}")))?
        }
        None => return Err(LabelError::Format("missing header".into())),
    };
    if header.format != DATASET_FORMAT {
        return Err(LabelError::Format(format!(
            "unknown format {:?}",
            header.format
        )));
    }
    let mut out = Vec::new();
    for (i, l) in lines.enumerate() {
        let l = l?;
        if l.trim().is_empty() {
            continue;
        }
        let rec: DatasetRecord = serde_json::from_str(&l)
            .map_err(|e| LabelError::Format(format!("record {}: {e}", i + 1)))?;
        if rec.labels.len() != rec.source.len() || rec.mask.len() != rec.source.len() {
            return Err(LabelError::Format(format!(
                "record {}: array lengths differ",
                i + 1
            )));
        }
        out.push(FinetuneExample {
            source: rec.source.into(),
            labels: rec.labels,
            mask: LossMask { mask: rec.mask },
        });
    }
    Ok((header, out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn alpha_zero_is_identity() {
        let b = [0.5f32, -1.0, 3.0];
        let r = [9.0f32, 9.0, -9.0];
        assert_eq!(combine_logits(&b, &r, 0.0).unwrap(), b.to_vec());
    }

    #[test]
    fn worked_example() {
        let out = combine_logits(&[2.0, 1.0, 0.0], &[1.0, 3.0, 0.0], 2.0).unwrap();
        assert_eq!(out, vec![2.0, -3.0, 0.0]);
        assert!(matches!(
            combine_logits(&[1.0], &[1.0, 2.0], 1.0),
            Err(LabelError::LengthMismatch(1, 2))
        ));
    }

    #[test]
    fn default_alpha_is_five() {
        assert_eq!(GenericCombineParams::default().alpha, 5.0);
        assert!(GenericCombineParams {
            alpha: -1.0,
            ..Default::default()
        }
        .validate()
        .is_err());
    }

    #[test]
    fn penalty_semantics() {
        let v = [1.0f32, 2.0, 3.0, 4.0];
        assert_eq!(
            apply_consistency_penalty(&v, &ConsistencyState::new(1e4)),
            v.to_vec()
        );
        let mut s = ConsistencyState::new(1e4);
        s.used_translation_heads.extend([1, 3]);
        let out = apply_consistency_penalty(&v, &s);
        let changed = out.iter().zip(&v).filter(|(a, b)| a != b).count();
        assert_eq!(changed, 2);
        assert_ne!(argmax(&out), 3);
        assert_ne!(argmax(&out), 1);
    }

    #[test]
    fn huge_penalty_excludes_head() {
        let mut s = ConsistencyState::new(1e4);
        s.used_translation_heads.insert(0);
        let v = [50.0f32, -30.0, -40.0];
        assert_eq!(argmax(&apply_consistency_penalty(&v, &s)), 1);
    }

    #[test]
    fn argmax_prefers_lowest_id_on_ties() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0, 2.0]), 1);
        assert_eq!(argmax(&[0.0]), 0);
    }

    proptest! {
        #[test]
        fn increasing_alpha_never_raises_boosted_tokens(
            pairs in proptest::collection::vec((-10.0f32..10.0, -10.0f32..10.0), 1..32),
            a1 in 0.0f32..8.0,
            extra in 0.0f32..8.0,
        ) {
            let (b, r): (Vec<f32>, Vec<f32>) = pairs.into_iter().unzip();
            let lo = combine_logits(&b, &r, a1).unwrap();
            let hi = combine_logits(&b, &r, a1 + extra).unwrap();
            for j in 0..b.len() {
                if r[j] > b[j] {
                    prop_assert!(hi[j] <= lo[j]);
                } else {
                    prop_assert_eq!(hi[j], b[j]);
                    prop_assert_eq!(lo[j], b[j]);
                }
            }
        }

        #[test]
        fn shifting_both_inputs_keeps_argmax(
            pairs in proptest::collection::vec((-4i32..4, -4i32..4), 1..32),
            shift in -8i32..8,
            alpha in 0u8..6,
        ) {
            // Small integers keep every intermediate exact, so the shift is exact too.
            let b: Vec<f32> = pairs.iter().map(|p| p.0 as f32).collect();
            let r: Vec<f32> = pairs.iter().map(|p| p.1 as f32).collect();
            let bs: Vec<f32> = b.iter().map(|x| x + shift as f32).collect();
            let rs: Vec<f32> = r.iter().map(|x| x + shift as f32).collect();
            let base = combine_logits(&b, &r, alpha as f32).unwrap();
            let moved = combine_logits(&bs, &rs, alpha as f32).unwrap();
            for (x, y) in base.iter().zip(&moved) {
                prop_assert_eq!(*x + shift as f32, *y);
            }
            prop_assert_eq!(argmax(&base), argmax(&moved));
        }
    }

    #[test]
    fn dataset_file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("ds.jsonl");
        let header = DatasetHeader {
            format: DATASET_FORMAT.into(),
            vocab_hash: "abc".into(),
            alpha: 5.0,
            dictionary_hash: "def".into(),
        };
        let ex = vec![FinetuneExample {
            source: vec![1, 2, 3].into(),
            labels: vec![1, 7, 8],
            mask: LossMask {
                mask: vec![1, 0, 1],
            },
        }];
        write_dataset(&p, &header, &ex).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.lines().nth(1).unwrap().contains("\"mask\":[1,0,1]"));
        assert_eq!(read_dataset(&p).unwrap(), (header, ex));
    }
}
