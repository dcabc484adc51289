//! Familiarity and preservation measurement.
//!
//! Probability familiarity is the next-token mass a model puts on
//! canon-specific continuations of short prompts. Completion familiarity
//! judges greedy continuations of longer prompts. Preservation is tracked as
//! perplexity on held-out generic text.

use std::collections::BTreeSet;
use std::io::{BufRead, BufWriter, Write};
use std::path::Path;
use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::labels::argmax;
use crate::model::{forward, Checkpoint, ModelError};
use crate::parallel::par_map;
use crate::tokenizer::{decode_bytes, encode, TokenId, TokenSeq, Vocab};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("no probes")]
    NoProbes,
    #[error("probe {0:?}: {1}")]
    BadProbe(String, String),
    #[error("no verdicts")]
    NoVerdicts,
    #[error("empty lexicon")]
    EmptyLexicon,
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("max_tokens must be at least 1")]
    ZeroMaxTokens,
    #[error("prompt has {len} tokens, context length is {context_len}")]
    OverLength { len: usize, context_len: usize },
    #[error("subtlety {0} outside 1..=10")]
    BadSubtlety(u8),
    #[error("judge unavailable: {0}")]
    JudgeUnavailable(String),
    #[error("malformed file {path}: {msg}")]
    Format { path: String, msg: String },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Probe as stored on disk. Each idiosyncratic or generic string names a
/// continuation of the prompt; it contributes the first token of its
/// space-prefixed encoding.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProbeSpec {
    pub prompt: String,
    pub idiosyncratic: Vec<String>,
    pub generic: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ProbabilityProbe {
    pub prompt: String,
    pub prompt_tokens: TokenSeq,
    pub idiosyncratic_tokens: BTreeSet<TokenId>,
    pub generic_tokens: BTreeSet<TokenId>,
}

/// First token of `s` as it would appear after a space.
pub fn continuation_token(vocab: &Vocab, s: &str) -> Option<TokenId> {
    let spaced = if s.starts_with(' ') {
        s.to_string()
    } else {
        format!(" {s}")
    };
    encode(vocab, &spaced).first().copied()
}

impl ProbabilityProbe {
    pub fn new(
        prompt: String,
        prompt_tokens: TokenSeq,
        idiosyncratic_tokens: BTreeSet<TokenId>,
        generic_tokens: BTreeSet<TokenId>,
    ) -> Result<Self, EvalError> {
        let bad = |msg: &str| EvalError::BadProbe(prompt.clone(), msg.to_string());
        if idiosyncratic_tokens.is_empty() || generic_tokens.is_empty() {
            return Err(bad("token sets must be non-empty"));
        }
        if !idiosyncratic_tokens.is_disjoint(&generic_tokens) {
            return Err(bad("idiosyncratic and generic tokens overlap"));
        }
        if prompt_tokens.is_empty() {
            return Err(bad("empty prompt"));
        }
        Ok(ProbabilityProbe {
            prompt,
            prompt_tokens,
            idiosyncratic_tokens,
            generic_tokens,
        })
    }

    pub fn from_spec(spec: &ProbeSpec, vocab: &Vocab) -> Result<Self, EvalError> {
        let tokens = |xs: &[String]| -> BTreeSet<TokenId> {
            xs.iter()
                .filter_map(|s| continuation_token(vocab, s))
                .collect()
        };
        ProbabilityProbe::new(
            spec.prompt.clone(),
            encode(vocab, &spec.prompt),
            tokens(&spec.idiosyncratic),
            tokens(&spec.generic),
        )
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CompletionPrompt {
    pub prompt: String,
    /// Canon strings that already appear in the prompt.
    pub references: Vec<String>,
    pub subtlety: u8,
}

impl CompletionPrompt {
    pub fn validate(&self) -> Result<(), EvalError> {
        if !(1..=10).contains(&self.subtlety) {
            return Err(EvalError::BadSubtlety(self.subtlety));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct JudgeVerdict {
    pub category: u8,
    pub evidence: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FamiliarityReport {
    pub step: u64,
    pub completion_score: f64,
    pub probability_score: f64,
    pub holdout_perplexity: f64,
}

/// Mean over probes of the probability mass the last prompt row assigns to
/// the probe's idiosyncratic tokens.
pub fn probability_familiarity(
    model: &Checkpoint,
    probes: &[ProbabilityProbe],
) -> Result<f64, EvalError> {
    if probes.is_empty() {
        return Err(EvalError::NoProbes);
    }
    let per_probe = par_map(probes, |p| -> Result<f64, EvalError> {
        if p.idiosyncratic_tokens.is_empty() {
            return Err(EvalError::BadProbe(
                p.prompt.clone(),
                "empty idiosyncratic set".into(),
            ));
        }
        let logits = forward(model, &p.prompt_tokens)?;
        let probs = logits.softmax_row(logits.rows - 1);
        Ok(p.idiosyncratic_tokens
            .iter()
            .filter_map(|&t| probs.get(t as usize))
            .sum())
    });
    let mut total = 0.0;
    for v in per_probe {
        total += v?;
    }
    Ok(total / probes.len() as f64)
}

/// Continues `prompt` for up to `max_tokens` tokens, stopping early at a
/// newline. Temperature 0 is greedy; otherwise tokens are sampled with a
/// generator seeded from `seed`.
pub fn generate_completion(
    model: &Checkpoint,
    vocab: &Vocab,
    prompt: &str,
    max_tokens: usize,
    temperature: f64,
    seed: u64,
) -> Result<String, EvalError> {
    if max_tokens == 0 {
        return Err(EvalError::ZeroMaxTokens);
    }
    let ctx = model.config.context_len;
    let mut tokens = encode(vocab, prompt).into_inner();
    if tokens.len() > ctx {
        return Err(EvalError::OverLength {
            len: tokens.len(),
            context_len: ctx,
        });
    }
    let end_of_text = vocab.id_of(b"\n");
    if tokens.is_empty() {
        // An empty prompt is conditioned on a line start.
        tokens.push(end_of_text.unwrap_or(0));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let start = tokens.len();
    while tokens.len() - start < max_tokens && tokens.len() < ctx {
        let logits = forward(model, &tokens)?;
        let row = logits.row(logits.rows - 1);
        let next = if temperature > 0.0 {
            sample(row, temperature, &mut rng)
        } else {
            argmax(row)
        };
        if Some(next) == end_of_text {
            break;
        }
        tokens.push(next);
    }
    let bytes = decode_bytes(vocab, &tokens[start..])
        .map_err(|e| EvalError::BadProbe(prompt.into(), e.to_string()))?;
    Ok(String::from_utf8_lossy(&bytes).into_owned())
}

fn sample(row: &[f32], temperature: f64, rng: &mut ChaCha8Rng) -> TokenId {
    let max = row.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x as f64));
    let weights: Vec<f64> = row
        .iter()
        .map(|&x| ((x as f64 - max) / temperature).exp())
        .collect();
    let total: f64 = weights.iter().sum();
    let mut u = rng.gen::<f64>() * total;
    for (i, w) in weights.iter().enumerate() {
        if u < *w {
            return i as TokenId;
        }
        u -= w;
    }
    (row.len() - 1) as TokenId
}

/// Occurrences of `needle` in `haystack` that are not glued to other
/// alphanumeric characters.
pub fn contains_word(haystack: &str, needle: &str) -> bool {
    if needle.is_empty() {
        return false;
    }
    let hb = haystack.as_bytes();
    haystack.match_indices(needle).any(|(i, _)| {
        let before = i.checked_sub(1).map(|j| hb[j]);
        let after = hb.get(i + needle.len()).copied();
        !before.is_some_and(|b| b.is_ascii_alphanumeric())
            && !after.is_some_and(|b| b.is_ascii_alphanumeric())
    })
}

/// Category 3 when the completion names a lexicon string the prompt does
/// not already contain, 0 otherwise. Categories 1 and 2 need an external
/// judge.
pub fn judge_completion_rulebased(
    completion: &str,
    prompt: &CompletionPrompt,
    canon_lexicon: &[String],
) -> Result<JudgeVerdict, EvalError> {
    if canon_lexicon.is_empty() {
        return Err(EvalError::EmptyLexicon);
    }
    let mut evidence: Vec<String> = Vec::new();
    for s in canon_lexicon {
        if evidence.contains(s) || !contains_word(completion, s) {
            continue;
        }
        if contains_word(&prompt.prompt, s) || prompt.references.contains(s) {
            continue;
        }
        evidence.push(s.clone());
    }
    let category = if evidence.is_empty() { 0 } else { 3 };
    Ok(JudgeVerdict { category, evidence })
}

/// `(5·#3 + #2) / (5·n)`: an all-3 run scores 1.
pub fn completion_familiarity(verdicts: &[JudgeVerdict]) -> Result<f64, EvalError> {
    if verdicts.is_empty() {
        return Err(EvalError::NoVerdicts);
    }
    let points: u64 = verdicts
        .iter()
        .map(|v| match v.category {
            3 => 5,
            2 => 1,
            _ => 0,
        })
        .sum();
    Ok(points as f64 / (5 * verdicts.len()) as f64)
}

/// Mean next-token log-likelihood over every position of every block.
pub fn mean_log_likelihood(model: &Checkpoint, corpus: &[TokenSeq]) -> Result<f64, EvalError> {
    let sums = par_map(corpus, |b| -> Result<(f64, usize), EvalError> {
        if b.len() < 2 {
            return Ok((0.0, 0));
        }
        let logits = forward(model, b)?;
        let mut s = 0.0;
        for r in 0..b.len() - 1 {
            s += logits.log_prob(r, b[r + 1]);
        }
        Ok((s, b.len() - 1))
    });
    let (mut total, mut n) = (0.0, 0usize);
    for r in sums {
        let (s, k) = r?;
        total += s;
        n += k;
    }
    if n == 0 {
        return Err(EvalError::EmptyCorpus);
    }
    Ok(total / n as f64)
}

/// `exp` of the mean next-token cross-entropy.
pub fn holdout_perplexity(model: &Checkpoint, corpus: &[TokenSeq]) -> Result<f64, EvalError> {
    Ok((-mean_log_likelihood(model, corpus)?).exp())
}

pub trait Judge: Sync {
    fn judge(&self, prompt: &CompletionPrompt, completion: &str)
        -> Result<JudgeVerdict, EvalError>;
}

pub struct RuleJudge {
    pub lexicon: Vec<String>,
}

impl Judge for RuleJudge {
    fn judge(
        &self,
        prompt: &CompletionPrompt,
        completion: &str,
    ) -> Result<JudgeVerdict, EvalError> {
        judge_completion_rulebased(completion, prompt, &self.lexicon)
    }
}

#[derive(Serialize)]
struct JudgeRequest<'a> {
    prompt: &'a str,
    references: &'a [String],
    completion: &'a str,
}

/// Client for an external judge answering `POST /judge`.
pub struct HttpJudge {
    endpoint: String,
    agent: ureq::Agent,
}

impl HttpJudge {
    pub fn new(base_url: &str, timeout: Duration) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .build()
            .into();
        HttpJudge {
            endpoint: format!("{}/judge", base_url.trim_end_matches('/')),
            agent,
        }
    }
}

impl Judge for HttpJudge {
    fn judge(
        &self,
        prompt: &CompletionPrompt,
        completion: &str,
    ) -> Result<JudgeVerdict, EvalError> {
        let req = JudgeRequest {
            prompt: &prompt.prompt,
            references: &prompt.references,
            completion,
        };
        let unavailable =
            |e: ureq::Error| EvalError::JudgeUnavailable(format!("{}: {e}", self.endpoint));
        let verdict: JudgeVerdict = self
            .agent
            .post(&self.endpoint)
            .send_json(&req)
            .map_err(unavailable)?
            .body_mut()
            .read_json()
            .map_err(unavailable)?;
        if verdict.category > 3 || (verdict.category == 3 && verdict.evidence.is_empty()) {
            return Err(EvalError::JudgeUnavailable(format!(
                "invalid verdict {verdict:?}"
            )));
        }
        Ok(verdict)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompletionSettings {
    pub max_tokens: usize,
    pub temperature: f64,
    pub seed: u64,
}

impl Default for CompletionSettings {
    fn default() -> Self {
        CompletionSettings {
            max_tokens: 16,
            temperature: 0.0,
            seed: 0,
        }
    }
}

/// Generates a completion for every prompt and judges it. Prompt `k` samples
/// with seed `settings.seed + k`.
pub fn judge_completions(
    model: &Checkpoint,
    vocab: &Vocab,
    prompts: &[CompletionPrompt],
    judge: &dyn Judge,
    settings: &CompletionSettings,
) -> Result<Vec<(String, JudgeVerdict)>, EvalError> {
    let indexed: Vec<(usize, &CompletionPrompt)> = prompts.iter().enumerate().collect();
    let completions = par_map(&indexed, |&(k, p)| {
        generate_completion(
            model,
            vocab,
            &p.prompt,
            settings.max_tokens,
            settings.temperature,
            settings.seed.wrapping_add(k as u64),
        )
    });
    let mut out = Vec::with_capacity(prompts.len());
    for (p, c) in prompts.iter().zip(completions) {
        let c = c?;
        let v = judge.judge(p, &c)?;
        out.push((c, v));
    }
    Ok(out)
}

/// Everything a familiarity report is computed from.
pub struct EvalSet {
    pub probes: Vec<ProbabilityProbe>,
    pub prompts: Vec<CompletionPrompt>,
    pub holdout: Vec<TokenSeq>,
}

pub fn evaluate(
    model: &Checkpoint,
    vocab: &Vocab,
    set: &EvalSet,
    judge: &dyn Judge,
    settings: &CompletionSettings,
    step: u64,
) -> Result<FamiliarityReport, EvalError> {
    let probability_score = probability_familiarity(model, &set.probes)?;
    let completion_score = if set.prompts.is_empty() {
        0.0
    } else {
        let judged = judge_completions(model, vocab, &set.prompts, judge, settings)?;
        let verdicts: Vec<JudgeVerdict> = judged.into_iter().map(|(_, v)| v).collect();
        completion_familiarity(&verdicts)?
    };
    let holdout_perplexity = holdout_perplexity(model, &set.holdout)?;
    Ok(FamiliarityReport {
        step,
        completion_score,
        probability_score,
        holdout_perplexity,
    })
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<(), EvalError> {
    let mut f = BufWriter::new(std::fs::File::create(path)?);
    for it in items {
        let line = serde_json::to_string(it).map_err(|e| EvalError::Format {
            path: path.display().to_string(),
            msg: e.to_string(),
        })?;
        writeln!(f, "{line}")?;
    }
    f.flush()?;
    Ok(())
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, EvalError> {
    let f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in f.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| EvalError::Format {
            path: path.display().to_string(),
            msg: format!("line {}: {e}", i + 1),
        })?);
    }
    Ok(out)
}

pub fn load_probes(path: &Path, vocab: &Vocab) -> Result<Vec<ProbabilityProbe>, EvalError> {
    read_jsonl::<ProbeSpec>(path)?
        .iter()
        .map(|s| ProbabilityProbe::from_spec(s, vocab))
        .collect()
}

pub fn load_prompts(path: &Path) -> Result<Vec<CompletionPrompt>, EvalError> {
    let prompts: Vec<CompletionPrompt> = read_jsonl(path)?;
    for p in &prompts {
        p.validate()?;
    }
    Ok(prompts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_model, ModelConfig};
    use crate::tokenizer::train_tokenizer;
    use proptest::prelude::*;

    fn vocab() -> Vocab {
        train_tokenizer(
            "Zorvin studies at Vexhall Keep. Jon studies at Stone Hall.\n"
                .repeat(4)
                .as_str(),
            320,
        )
        .unwrap()
    }

    fn tiny_model(vocab_size: usize) -> Checkpoint {
        init_model(ModelConfig {
            layers: 1,
            heads: 2,
            embed_dim: 8,
            context_len: 24,
            vocab_size,
            seed: 3,
        })
        .unwrap()
    }

    fn prompt(text: &str) -> CompletionPrompt {
        CompletionPrompt {
            prompt: text.into(),
            references: vec![],
            subtlety: 3,
        }
    }

    #[test]
    fn whole_vocab_probe_scores_one() {
        let v = vocab();
        let m = tiny_model(v.size());
        let all: BTreeSet<TokenId> = (1..v.size() as TokenId).collect();
        let p = ProbabilityProbe::new(
            "Zorvin studies at".into(),
            encode(&v, "Zorvin studies at"),
            all,
            [0].into(),
        )
        .unwrap();
        let s = probability_familiarity(&m, &[p]).unwrap();
        let probs = forward(&m, &encode(&v, "Zorvin studies at")).unwrap();
        let p0 = probs.softmax_row(probs.rows - 1)[0];
        assert!((s + p0 - 1.0).abs() < 1e-9);
    }

    #[test]
    fn probe_validation() {
        let v = vocab();
        let t = encode(&v, "x");
        assert!(ProbabilityProbe::new("x".into(), t.clone(), [1].into(), [1].into()).is_err());
        assert!(ProbabilityProbe::new("x".into(), t.clone(), BTreeSet::new(), [1].into()).is_err());
        let spec = ProbeSpec {
            prompt: "Zorvin studies at".into(),
            idiosyncratic: vec!["Vexhall".into()],
            generic: vec!["Stone".into()],
        };
        let p = ProbabilityProbe::from_spec(&spec, &v).unwrap();
        let idio = *p.idiosyncratic_tokens.iter().next().unwrap();
        assert!(crate::tokenizer::decode(&v, &[idio])
            .unwrap()
            .starts_with(" V"));
        assert!(probability_familiarity(&tiny_model(v.size()), &[]).is_err());
    }

    #[test]
    fn probability_familiarity_ignores_probe_order() {
        let v = vocab();
        let m = tiny_model(v.size());
        let mk = |s: &str, idio: &str| {
            ProbabilityProbe::from_spec(
                &ProbeSpec {
                    prompt: s.into(),
                    idiosyncratic: vec![idio.into()],
                    generic: vec!["Jon".into()],
                },
                &v,
            )
            .unwrap()
        };
        let a = vec![
            mk("Zorvin studies", "at"),
            mk("Jon studies at", "Vexhall"),
            mk("Stone", "Hall"),
        ];
        let mut b = a.clone();
        b.reverse();
        let sa = probability_familiarity(&m, &a).unwrap();
        let sb = probability_familiarity(&m, &b).unwrap();
        assert!((sa - sb).abs() < 1e-12);
        assert!((0.0..=1.0).contains(&sa));
    }

    #[test]
    fn greedy_and_seeded_generation_repeat() {
        let v = vocab();
        let m = tiny_model(v.size());
        let a = generate_completion(&m, &v, "Zorvin studies", 5, 0.0, 1).unwrap();
        assert_eq!(
            a,
            generate_completion(&m, &v, "Zorvin studies", 5, 0.0, 99).unwrap()
        );
        let s1 = generate_completion(&m, &v, "Zorvin studies", 5, 0.8, 7).unwrap();
        assert_eq!(
            s1,
            generate_completion(&m, &v, "Zorvin studies", 5, 0.8, 7).unwrap()
        );
    }

    #[test]
    fn max_tokens_one_emits_one_token() {
        let v = vocab();
        let m = tiny_model(v.size());
        let out = generate_completion(&m, &v, "Jon", 1, 0.0, 0).unwrap();
        let newline = v.id_of(b"\n").unwrap();
        let greedy = {
            let l = forward(&m, &encode(&v, "Jon")).unwrap();
            argmax(l.row(l.rows - 1))
        };
        if greedy == newline {
            assert!(out.is_empty());
        } else {
            assert_eq!(
                encode(&v, &format!("Jon{out}")).len(),
                encode(&v, "Jon").len() + 1
            );
        }
        assert!(matches!(
            generate_completion(&m, &v, "Jon", 0, 0.0, 0),
            Err(EvalError::ZeroMaxTokens)
        ));
        let long = "Jon ".repeat(40);
        assert!(matches!(
            generate_completion(&m, &v, &long, 1, 0.0, 0),
            Err(EvalError::OverLength { .. })
        ));
    }

    #[test]
    fn rule_judge() {
        let lex = vec!["Mystic Academy".to_string(), "Zorvin".to_string()];
        let v = judge_completion_rulebased(
            " he went to Mystic Academy.",
            &prompt("Zorvin studies at"),
            &lex,
        )
        .unwrap();
        assert_eq!(
            v,
            JudgeVerdict {
                category: 3,
                evidence: vec!["Mystic Academy".into()]
            }
        );
        let v = judge_completion_rulebased(" Zorvin again", &prompt("Zorvin studies at"), &lex)
            .unwrap();
        assert_eq!(v.category, 0);
        assert_eq!(
            judge_completion_rulebased("", &prompt("x"), &lex)
                .unwrap()
                .category,
            0
        );
        assert_eq!(
            judge_completion_rulebased(" Zorvinish", &prompt("x"), &lex)
                .unwrap()
                .category,
            0
        );
        assert!(judge_completion_rulebased("x", &prompt("x"), &[]).is_err());
    }

    #[test]
    fn completion_score_weights() {
        let v = |c| JudgeVerdict {
            category: c,
            evidence: if c == 3 { vec!["a".into()] } else { vec![] },
        };
        assert_eq!(completion_familiarity(&vec![v(0); 4]).unwrap(), 0.0);
        assert_eq!(completion_familiarity(&vec![v(3); 4]).unwrap(), 1.0);
        let mut ten = vec![v(0); 8];
        ten.push(v(3));
        ten.push(v(2));
        assert!((completion_familiarity(&ten).unwrap() - 0.12).abs() < 1e-12);
        assert!(completion_familiarity(&[]).is_err());
    }

    #[test]
    fn uniform_model_perplexity_is_vocab_size() {
        let v = vocab();
        let mut m = tiny_model(v.size());
        m.parameters.iter_mut().for_each(|p| *p = 0.0);
        let blocks = vec![encode(&v, "Zorvin studies at Vexhall Keep.")];
        let ppl = holdout_perplexity(&m, &blocks).unwrap();
        assert!((ppl / v.size() as f64 - 1.0).abs() < 0.05, "{ppl}");
        assert!(holdout_perplexity(&m, &[]).is_err());
    }

    #[test]
    fn single_position_perplexity_is_inverse_probability() {
        let v = vocab();
        let m = tiny_model(v.size());
        let block: TokenSeq = vec![5, 9].into();
        let p = forward(&m, &block[..1]).unwrap().softmax_row(0)[9];
        let ppl = holdout_perplexity(&m, &[block]).unwrap();
        assert!((ppl - 1.0 / p).abs() / ppl < 1e-5);
    }

    #[test]
    fn report_and_prompt_files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let reports = vec![
            FamiliarityReport {
                step: 0,
                completion_score: 0.5,
                probability_score: 0.25,
                holdout_perplexity: 12.0,
            },
            FamiliarityReport {
                step: 20,
                completion_score: 0.1,
                probability_score: 0.01,
                holdout_perplexity: 12.5,
            },
        ];
        let p = dir.path().join("r.jsonl");
        write_jsonl(&p, &reports).unwrap();
        assert_eq!(read_jsonl::<FamiliarityReport>(&p).unwrap(), reports);
        let prompts = vec![
            prompt("a"),
            CompletionPrompt {
                prompt: "b".into(),
                references: vec!["Zorvin".into()],
                subtlety: 10,
            },
        ];
        let q = dir.path().join("p.jsonl");
        write_jsonl(&q, &prompts).unwrap();
        assert_eq!(load_prompts(&q).unwrap(), prompts);
        write_jsonl(
            &q,
            &[CompletionPrompt {
                prompt: "c".into(),
                references: vec![],
                subtlety: 11,
            }],
        )
        .unwrap();
        assert!(load_prompts(&q).is_err());
    }

    proptest! {
        #[test]
        fn completion_score_is_order_free_and_monotone(cats in proptest::collection::vec(0u8..4, 1..20), k in 0usize..20) {
            let vs: Vec<JudgeVerdict> = cats.iter().map(|&c| JudgeVerdict { category: c, evidence: vec![] }).collect();
            let mut rev = vs.clone();
            rev.reverse();
            let s = completion_familiarity(&vs).unwrap();
            prop_assert_eq!(s, completion_familiarity(&rev).unwrap());
            let k = k % vs.len();
            if vs[k].category < 3 {
                let mut up = vs.clone();
                up[k].category += 1;
                prop_assert!(completion_familiarity(&up).unwrap() >= s);
            }
        }

        #[test]
        fn rule_judge_never_reports_prompt_strings(words in proptest::collection::vec("[a-c]{1,3}", 1..6), split in 0usize..6) {
            let lex: Vec<String> = words.clone();
            let split = split.min(words.len());
            let p = prompt(&words[..split].join(" "));
            let completion = words.join(" ");
            let v = judge_completion_rulebased(&completion, &p, &lex).unwrap();
            for e in &v.evidence {
                prop_assert!(!contains_word(&p.prompt, e));
            }
            prop_assert_eq!(v.category == 3, !v.evidence.is_empty());
        }
    }
}
