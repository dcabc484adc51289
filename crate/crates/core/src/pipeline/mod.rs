//! End-to-end orchestration: canon generation, tokenizer, baseline
//! pretraining, reinforcement, label generation and unlearning with periodic
//! evaluation.
//!
//! Every stage records a key (a hash of its parameters and input files) next
//! to its outputs. A stage whose key matches and whose outputs exist is
//! skipped, so an interrupted run resumes where it stopped.

mod config;

use std::path::{Path, PathBuf};
use std::time::Duration;

use log::info;
use sha2::{Digest, Sha256};
use thiserror::Error;

pub use config::{
    sub_seed, Ablation, CorpusConfig, EvalConfig, ModelShape, Paths, PipelineConfig, PlanConfig,
};

use crate::anchors::{AnchorDictionary, AnchorError};
use crate::corpus::{
    chunk_blocks, clean_text, generate_canon, generate_generic, mix_pretraining_corpus,
    read_lexicon, write_bundle, CANON_FILE, CANON_HOLDOUT_FILE, DICTIONARY_FILE, LEXICON_FILE,
    PROBES_FILE, PROMPTS_FILE,
};
use crate::eval::{
    evaluate, load_probes, load_prompts, write_jsonl, CompletionSettings, EvalError, EvalSet,
    FamiliarityReport, HttpJudge, Judge, RuleJudge,
};
use crate::labels::{generate_dataset, read_dataset, write_dataset, DatasetHeader, DATASET_FORMAT};
use crate::model::{init_model, Checkpoint, ModelError, RoleTag, TrainExample, Trainer};
use crate::tokenizer::{encode, train_tokenizer, TokenSeq, Vocab};

type BoxError = Box<dyn std::error::Error + Send + Sync>;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("config error: {0}")]
    Config(String),
    #[error("stage {stage} failed: {source}")]
    Stage { stage: String, source: BoxError },
    #[error("judge unavailable: {0}")]
    JudgeUnavailable(String),
}

impl PipelineError {
    /// Process exit code for this error.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Config(_) => 2,
            PipelineError::Stage { .. } => 3,
            PipelineError::JudgeUnavailable(_) => 4,
        }
    }
}

fn stage_err<E: Into<BoxError>>(stage: &str) -> impl FnOnce(E) -> PipelineError + '_ {
    move |e| {
        let stage = stage.to_string();
        let e: BoxError = e.into();
        match e.downcast::<EvalError>() {
            Ok(ev) => match *ev {
                EvalError::JudgeUnavailable(m) => PipelineError::JudgeUnavailable(m),
                other => PipelineError::Stage {
                    stage,
                    source: Box::new(other),
                },
            },
            Err(e) => PipelineError::Stage { stage, source: e },
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StageOutcome {
    Ran,
    Skipped,
}

/// Artifact locations below the work directory.
#[derive(Clone, Debug)]
pub struct Layout {
    pub root: PathBuf,
    pub ablation: Ablation,
}

impl Layout {
    pub fn new(cfg: &PipelineConfig) -> Self {
        Layout {
            root: cfg.paths.work_dir.clone(),
            ablation: cfg.ablation,
        }
    }
    pub fn bundle(&self) -> PathBuf {
        self.root.join("bundle")
    }
    pub fn generic(&self) -> PathBuf {
        self.root.join("generic.txt")
    }
    pub fn generic_holdout(&self) -> PathBuf {
        self.root.join("generic_holdout.txt")
    }
    pub fn vocab(&self) -> PathBuf {
        self.root.join("vocab.txt")
    }
    pub fn baseline(&self) -> PathBuf {
        self.root.join("baseline.ckpt")
    }
    pub fn reinforced(&self) -> PathBuf {
        self.root.join("reinforced.ckpt")
    }
    pub fn ablation_dir(&self) -> PathBuf {
        self.root.join(self.ablation.name())
    }
    pub fn dataset(&self) -> PathBuf {
        self.ablation_dir().join("dataset.jsonl")
    }
    pub fn unlearned(&self) -> PathBuf {
        self.ablation_dir().join("unlearned.ckpt")
    }
    pub fn reports(&self) -> PathBuf {
        self.ablation_dir().join("reports.jsonl")
    }
    fn key_file(&self, stage: &str) -> PathBuf {
        self.root.join("stages").join(format!("{stage}.key"))
    }
}

fn file_hash(path: &Path) -> std::io::Result<String> {
    Ok(hex::encode(Sha256::digest(std::fs::read(path)?)))
}

/// Runs `body` unless the stored key for `stage` equals the key computed
/// from `params` and `inputs` and all `outputs` exist.
fn run_stage<F>(
    layout: &Layout,
    stage: &str,
    params: serde_json::Value,
    inputs: &[PathBuf],
    outputs: &[PathBuf],
    body: F,
) -> Result<StageOutcome, PipelineError>
where
    F: FnOnce() -> Result<(), PipelineError>,
{
    let mut h = Sha256::new();
    h.update(stage.as_bytes());
    h.update(params.to_string().as_bytes());
    for p in inputs {
        let d = file_hash(p).map_err(|e| PipelineError::Stage {
            stage: stage.to_string(),
            source: format!("missing input {}: {e}", p.display()).into(),
        })?;
        h.update(d.as_bytes());
    }
    let key = hex::encode(h.finalize());
    let key_file = layout.key_file(stage);
    let stored = std::fs::read_to_string(&key_file).ok();
    if stored.as_deref() == Some(key.as_str()) && outputs.iter().all(|o| o.exists()) {
        info!("{stage}: up to date, skipping");
        return Ok(StageOutcome::Skipped);
    }
    info!("{stage}: running");
    let _ = std::fs::remove_file(&key_file);
    body()?;
    std::fs::create_dir_all(key_file.parent().expect("key file has a parent"))
        .map_err(stage_err(stage))?;
    std::fs::write(&key_file, key).map_err(stage_err(stage))?;
    Ok(StageOutcome::Ran)
}

fn bundle_file(layout: &Layout, name: &str) -> PathBuf {
    layout.bundle().join(name)
}

/// Writes the generic corpora and the canon bundle.
pub fn stage_generate_canon(cfg: &PipelineConfig) -> Result<StageOutcome, PipelineError> {
    const STAGE: &str = "generate-canon";
    let layout = Layout::new(cfg);
    let inputs: Vec<PathBuf> = cfg.paths.generic_corpus.iter().cloned().collect();
    let params = serde_json::json!({ "seed": cfg.seed, "corpus": cfg.corpus });
    let outputs = [
        layout.generic(),
        layout.generic_holdout(),
        bundle_file(&layout, CANON_FILE),
        bundle_file(&layout, CANON_HOLDOUT_FILE),
        bundle_file(&layout, DICTIONARY_FILE),
        bundle_file(&layout, PROBES_FILE),
        bundle_file(&layout, PROMPTS_FILE),
        bundle_file(&layout, LEXICON_FILE),
    ];
    run_stage(&layout, STAGE, params, &inputs, &outputs, || {
        let (generic, holdout) = match &cfg.paths.generic_corpus {
            Some(p) => split_generic(
                &clean_text(&std::fs::read(p).map_err(stage_err(STAGE))?),
                cfg,
            ),
            None => (
                generate_generic(sub_seed(cfg.seed, "generic"), cfg.corpus.generic_tokens),
                generate_generic(
                    sub_seed(cfg.seed, "generic_holdout"),
                    cfg.corpus.generic_holdout_tokens,
                ),
            ),
        };
        let bundle = generate_canon(&cfg.canon_spec(), &format!("{generic}{holdout}"))
            .map_err(stage_err(STAGE))?;
        std::fs::create_dir_all(&layout.root).map_err(stage_err(STAGE))?;
        std::fs::write(layout.generic(), generic).map_err(stage_err(STAGE))?;
        std::fs::write(layout.generic_holdout(), holdout).map_err(stage_err(STAGE))?;
        write_bundle(&layout.bundle(), &bundle).map_err(stage_err(STAGE))?;
        Ok(())
    })
}

/// Splits a user-supplied corpus by lines, the tail holding roughly the
/// configured held-out share.
fn split_generic(text: &str, cfg: &PipelineConfig) -> (String, String) {
    let lines: Vec<&str> = text.lines().filter(|l| !l.trim().is_empty()).collect();
    let share = cfg.corpus.generic_holdout_tokens as f64
        / (cfg.corpus.generic_tokens + cfg.corpus.generic_holdout_tokens) as f64;
    let cut = ((lines.len() as f64) * (1.0 - share)).round() as usize;
    let cut = cut.clamp(
        1.min(lines.len()),
        lines.len().saturating_sub(1).max(1.min(lines.len())),
    );
    let join = |xs: &[&str]| xs.iter().map(|l| format!("{l}\n")).collect::<String>();
    (join(&lines[..cut]), join(&lines[cut..]))
}

/// Trains the tokenizer on the generic corpus and the canon together.
pub fn stage_tokenize(cfg: &PipelineConfig) -> Result<StageOutcome, PipelineError> {
    const STAGE: &str = "tokenize";
    let layout = Layout::new(cfg);
    let inputs = [layout.generic(), bundle_file(&layout, CANON_FILE)];
    let params = serde_json::json!({ "vocab_size": cfg.corpus.vocab_size });
    run_stage(&layout, STAGE, params, &inputs, &[layout.vocab()], || {
        let generic = read_text(&layout.generic(), STAGE)?;
        let canon = read_text(&bundle_file(&layout, CANON_FILE), STAGE)?;
        let vocab = train_tokenizer(&format!("{generic}{canon}"), cfg.corpus.vocab_size)
            .map_err(stage_err(STAGE))?;
        vocab.save(&layout.vocab()).map_err(stage_err(STAGE))?;
        Ok(())
    })
}

fn read_text(path: &Path, stage: &str) -> Result<String, PipelineError> {
    std::fs::read_to_string(path).map_err(|e| PipelineError::Stage {
        stage: stage.to_string(),
        source: format!("{}: {e}", path.display()).into(),
    })
}

fn load_vocab(layout: &Layout, stage: &str) -> Result<Vocab, PipelineError> {
    Vocab::load(&layout.vocab()).map_err(stage_err(stage))
}

fn load_ckpt(path: &Path, stage: &str) -> Result<Checkpoint, PipelineError> {
    Checkpoint::load(path).map_err(stage_err(stage))
}

fn blocks_of(vocab: &Vocab, text: &str, context_len: usize) -> Vec<TokenSeq> {
    chunk_blocks(&encode(vocab, text), context_len)
}

fn train_stage(
    stage: &str,
    model: Checkpoint,
    corpus: &[TrainExample],
    plan: &PlanConfig,
    context_len: usize,
    seed: u64,
) -> Result<Checkpoint, PipelineError> {
    let mut trainer =
        Trainer::new(model, plan.plan(context_len), seed).map_err(stage_err(stage))?;
    let total = plan.plan(context_len).steps_per_epoch(corpus.len()) as u64 * plan.epochs as u64;
    let total = plan.max_steps.map_or(total, |m| total.min(m));
    trainer
        .run_limited(corpus, plan.max_steps, |_, step, loss| {
            if step == 1 || step % 10 == 0 || step == total {
                info!("{stage}: step {step}/{total} loss {loss:.4}");
            }
            Ok::<(), ModelError>(())
        })
        .map_err(stage_err(stage))?;
    Ok(trainer.into_model())
}

/// Trains the baseline from scratch on generic text mixed with the canon.
pub fn stage_pretrain(cfg: &PipelineConfig) -> Result<StageOutcome, PipelineError> {
    const STAGE: &str = "pretrain";
    let layout = Layout::new(cfg);
    let inputs = [
        layout.vocab(),
        layout.generic(),
        bundle_file(&layout, CANON_FILE),
    ];
    let params = serde_json::json!({
        "seed": cfg.seed, "model": cfg.model, "plan": cfg.pretrain, "mix_ratio": cfg.corpus.mix_ratio,
    });
    run_stage(
        &layout,
        STAGE,
        params,
        &inputs,
        &[layout.baseline()],
        || {
            let vocab = load_vocab(&layout, STAGE)?;
            let ctx = cfg.model.context_len;
            let generic = blocks_of(&vocab, &read_text(&layout.generic(), STAGE)?, ctx);
            let canon = blocks_of(
                &vocab,
                &read_text(&bundle_file(&layout, CANON_FILE), STAGE)?,
                ctx,
            );
            let mixed = mix_pretraining_corpus(
                &generic,
                &canon,
                cfg.corpus.mix_ratio,
                sub_seed(cfg.seed, "mix"),
            )
            .map_err(stage_err(STAGE))?;
            info!(
                "{STAGE}: {} generic + {} canon blocks -> {} mixed",
                generic.len(),
                canon.len(),
                mixed.len()
            );
            let examples: Vec<TrainExample> =
                mixed.iter().map(|b| TrainExample::next_token(b)).collect();
            let mut mc = cfg.model_config();
            mc.vocab_size = vocab.size();
            let model = init_model(mc).map_err(stage_err(STAGE))?;
            let mut model = train_stage(
                STAGE,
                model,
                &examples,
                &cfg.pretrain,
                ctx,
                sub_seed(cfg.seed, "pretrain"),
            )?;
            model.role = RoleTag::Baseline;
            model.save(&layout.baseline()).map_err(stage_err(STAGE))?;
            Ok(())
        },
    )
}

/// Continues training the baseline on the canon alone.
pub fn stage_reinforce(cfg: &PipelineConfig) -> Result<StageOutcome, PipelineError> {
    const STAGE: &str = "reinforce";
    let layout = Layout::new(cfg);
    let inputs = [
        layout.vocab(),
        layout.baseline(),
        bundle_file(&layout, CANON_FILE),
    ];
    let params = serde_json::json!({ "seed": cfg.seed, "plan": cfg.reinforce });
    run_stage(
        &layout,
        STAGE,
        params,
        &inputs,
        &[layout.reinforced()],
        || {
            let vocab = load_vocab(&layout, STAGE)?;
            let baseline = load_ckpt(&layout.baseline(), STAGE)?;
            let ctx = baseline.config.context_len;
            let canon = blocks_of(
                &vocab,
                &read_text(&bundle_file(&layout, CANON_FILE), STAGE)?,
                ctx,
            );
            let examples: Vec<TrainExample> =
                canon.iter().map(|b| TrainExample::next_token(b)).collect();
            let mut model = train_stage(
                STAGE,
                baseline,
                &examples,
                &cfg.reinforce,
                ctx,
                sub_seed(cfg.seed, "reinforce"),
            )?;
            model.role = RoleTag::Reinforced;
            model.save(&layout.reinforced()).map_err(stage_err(STAGE))?;
            Ok(())
        },
    )
}

fn dictionary_path(cfg: &PipelineConfig, layout: &Layout) -> PathBuf {
    cfg.paths
        .dictionary
        .clone()
        .unwrap_or_else(|| bundle_file(layout, DICTIONARY_FILE))
}

/// Loads the anchor dictionary the ablation calls for.
pub fn load_run_dictionary(
    cfg: &PipelineConfig,
    vocab: &Vocab,
) -> Result<AnchorDictionary, AnchorError> {
    if !cfg.dictionary_enabled() {
        return Ok(AnchorDictionary::empty());
    }
    crate::anchors::load_dictionary(&dictionary_path(cfg, &Layout::new(cfg)), vocab)
}

/// Builds the generic-label dataset over the canon blocks.
pub fn stage_gen_labels(cfg: &PipelineConfig) -> Result<StageOutcome, PipelineError> {
    const STAGE: &str = "gen-labels";
    let layout = Layout::new(cfg);
    if cfg.ablation == Ablation::ReversedLoss {
        info!("{STAGE}: not used by the reversed_loss ablation");
        return Ok(StageOutcome::Skipped);
    }
    let mut inputs = vec![
        layout.vocab(),
        layout.baseline(),
        bundle_file(&layout, CANON_FILE),
    ];
    if cfg.dictionary_enabled() {
        inputs.push(dictionary_path(cfg, &layout));
    }
    if cfg.needs_reinforced() {
        inputs.push(layout.reinforced());
    }
    let params = serde_json::json!({
        "ablation": cfg.ablation, "alpha": cfg.alpha, "penalty": cfg.consistency_penalty,
    });
    let stage_key = format!("{}.{STAGE}", cfg.ablation.name());
    run_stage(
        &layout,
        &stage_key,
        params,
        &inputs,
        &[layout.dataset()],
        || {
            let vocab = load_vocab(&layout, STAGE)?;
            let baseline = load_ckpt(&layout.baseline(), STAGE)?;
            let reinforced = if cfg.needs_reinforced() {
                Some(load_ckpt(&layout.reinforced(), STAGE)?)
            } else {
                None
            };
            let dict = load_run_dictionary(cfg, &vocab).map_err(stage_err(STAGE))?;
            let canon = blocks_of(
                &vocab,
                &read_text(&bundle_file(&layout, CANON_FILE), STAGE)?,
                baseline.config.context_len,
            );
            let examples = generate_dataset(
                &baseline,
                reinforced.as_ref(),
                &canon,
                &dict,
                &cfg.combine_params(),
            )
            .map_err(stage_err(STAGE))?;
            let changed: usize = examples
                .iter()
                .map(|e| {
                    e.labels
                        .iter()
                        .zip(e.source.iter())
                        .skip(1)
                        .filter(|(l, s)| l != s)
                        .count()
                })
                .sum();
            info!(
                "{STAGE}: {} blocks, {changed} labels differ from the source",
                examples.len()
            );
            let header = DatasetHeader {
                format: DATASET_FORMAT.into(),
                vocab_hash: vocab.content_hash(),
                alpha: cfg.alpha,
                dictionary_hash: dict.content_hash(),
            };
            std::fs::create_dir_all(layout.ablation_dir()).map_err(stage_err(STAGE))?;
            write_dataset(&layout.dataset(), &header, &examples).map_err(stage_err(STAGE))?;
            Ok(())
        },
    )
}

/// Loads the probes, prompts and held-out generic blocks used for evaluation.
pub fn load_eval_set(
    layout: &Layout,
    vocab: &Vocab,
    context_len: usize,
) -> Result<EvalSet, EvalError> {
    let holdout_text = std::fs::read_to_string(layout.generic_holdout())?;
    Ok(EvalSet {
        probes: load_probes(&bundle_file(layout, PROBES_FILE), vocab)?,
        prompts: load_prompts(&bundle_file(layout, PROMPTS_FILE))?,
        holdout: blocks_of(vocab, &holdout_text, context_len),
    })
}

pub fn make_judge(cfg: &PipelineConfig, layout: &Layout) -> Result<Box<dyn Judge>, EvalError> {
    Ok(match &cfg.eval.judge_url {
        Some(url) => Box::new(HttpJudge::new(
            url,
            Duration::from_secs(cfg.eval.judge_timeout_secs),
        )),
        None => Box::new(RuleJudge {
            lexicon: read_lexicon(&bundle_file(layout, LEXICON_FILE)).map_err(|e| {
                EvalError::Format {
                    path: LEXICON_FILE.into(),
                    msg: e.to_string(),
                }
            })?,
        }),
    })
}

pub fn completion_settings(cfg: &PipelineConfig) -> CompletionSettings {
    CompletionSettings {
        max_tokens: cfg.eval.max_tokens,
        temperature: cfg.eval.temperature,
        seed: sub_seed(cfg.seed, "eval"),
    }
}

/// Fine-tunes the baseline toward the generic labels (or, for the
/// reversed_loss ablation, away from the canon text), evaluating at step 0,
/// every `eval.every` steps and after the last step.
pub fn stage_unlearn(cfg: &PipelineConfig) -> Result<StageOutcome, PipelineError> {
    const STAGE: &str = "unlearn";
    let layout = Layout::new(cfg);
    let mut inputs = vec![
        layout.vocab(),
        layout.baseline(),
        layout.generic_holdout(),
        bundle_file(&layout, PROBES_FILE),
        bundle_file(&layout, PROMPTS_FILE),
        bundle_file(&layout, LEXICON_FILE),
    ];
    if cfg.ablation == Ablation::ReversedLoss {
        inputs.push(bundle_file(&layout, CANON_FILE));
    } else {
        inputs.push(layout.dataset());
    }
    let params = serde_json::json!({
        "seed": cfg.seed, "ablation": cfg.ablation, "plan": cfg.unlearn, "eval": cfg.eval,
    });
    let stage_key = format!("{}.{STAGE}", cfg.ablation.name());
    run_stage(
        &layout,
        &stage_key,
        params,
        &inputs,
        &[layout.unlearned(), layout.reports()],
        || {
            let vocab = load_vocab(&layout, STAGE)?;
            let baseline = load_ckpt(&layout.baseline(), STAGE)?;
            let ctx = baseline.config.context_len;
            let examples: Vec<TrainExample> = if cfg.ablation == Ablation::ReversedLoss {
                let canon = blocks_of(
                    &vocab,
                    &read_text(&bundle_file(&layout, CANON_FILE), STAGE)?,
                    ctx,
                );
                canon.iter().map(|b| TrainExample::reversed(b)).collect()
            } else {
                let (_, data) = read_dataset(&layout.dataset()).map_err(stage_err(STAGE))?;
                data.iter()
                    .map(|e| TrainExample::from_labels(&e.source, &e.labels, &e.mask.mask))
                    .collect::<Result<_, _>>()
                    .map_err(stage_err(STAGE))?
            };
            let set = load_eval_set(&layout, &vocab, ctx).map_err(stage_err(STAGE))?;
            let judge = make_judge(cfg, &layout).map_err(stage_err(STAGE))?;
            let settings = completion_settings(cfg);
            let eval_at =
                |model: &Checkpoint, step: u64| -> Result<FamiliarityReport, PipelineError> {
                    let r = evaluate(model, &vocab, &set, judge.as_ref(), &settings, step)
                        .map_err(stage_err(STAGE))?;
                    info!(
                        "{STAGE}: step {step} probability {:.4} completion {:.4} perplexity {:.3}",
                        r.probability_score, r.completion_score, r.holdout_perplexity
                    );
                    Ok(r)
                };

            let plan = cfg.unlearn.plan(ctx);
            let per_epoch = plan.steps_per_epoch(examples.len()) as u64;
            let total = cfg
                .unlearn
                .max_steps
                .map_or(per_epoch * plan.epochs as u64, |m| {
                    m.min(per_epoch * plan.epochs as u64)
                });
            let mut reports = vec![eval_at(&baseline, 0)?];
            let mut trainer = Trainer::new(baseline, plan, sub_seed(cfg.seed, "unlearn"))
                .map_err(stage_err(STAGE))?;
            trainer.run_limited(&examples, cfg.unlearn.max_steps, |model, step, loss| {
                if step % 10 == 0 {
                    info!("{STAGE}: step {step}/{total} loss {loss:.4}");
                }
                if step % cfg.eval.every == 0 || step == total {
                    reports.push(eval_at(model, step)?);
                }
                Ok::<(), PipelineError>(())
            })?;
            let mut model = trainer.into_model();
            model.role = RoleTag::Unlearned;
            std::fs::create_dir_all(layout.ablation_dir()).map_err(stage_err(STAGE))?;
            model.save(&layout.unlearned()).map_err(stage_err(STAGE))?;
            write_jsonl(&layout.reports(), &reports).map_err(stage_err(STAGE))?;
            Ok(())
        },
    )
}

impl From<ModelError> for PipelineError {
    fn from(e: ModelError) -> Self {
        PipelineError::Stage {
            stage: "unlearn".into(),
            source: Box::new(e),
        }
    }
}

/// Runs every stage the ablation needs and returns the report series.
pub fn run_all(cfg: &PipelineConfig) -> Result<Vec<FamiliarityReport>, PipelineError> {
    stage_generate_canon(cfg)?;
    stage_tokenize(cfg)?;
    stage_pretrain(cfg)?;
    if cfg.needs_reinforced() {
        stage_reinforce(cfg)?;
    }
    stage_gen_labels(cfg)?;
    stage_unlearn(cfg)?;
    read_reports(&Layout::new(cfg).reports())
}

pub fn read_reports(path: &Path) -> Result<Vec<FamiliarityReport>, PipelineError> {
    crate::eval::read_jsonl(path).map_err(stage_err("report"))
}
