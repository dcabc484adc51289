use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use unlearn_forge::labels::read_dataset;
use unlearn_forge::model::Checkpoint;
use unlearn_forge::pipeline::{
    completion_settings, load_eval_set, make_judge, run_all, stage_gen_labels,
    stage_generate_canon, stage_pretrain, stage_reinforce, stage_tokenize, stage_unlearn, Layout,
    PipelineConfig, PipelineError, StageOutcome,
};
use unlearn_forge::tokenizer::Vocab;
use unlearn_forge::translate::render_label_view;

#[derive(Parser)]
#[command(
    name = "unlearn-forge",
    version,
    about = "Approximate unlearning for a small from-scratch language model"
)]
struct Cli {
    /// TOML config file; every field has a default.
    #[arg(long, short, global = true)]
    config: Option<PathBuf>,
    /// Override a config field, e.g. `--set model.embed_dim=64`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the generic corpora and the canon bundle.
    GenerateCanon,
    /// Train the tokenizer.
    Tokenize,
    /// Train the baseline model on the mixed corpus.
    Pretrain,
    /// Train the reinforced model on the canon.
    Reinforce,
    /// Build the generic-label dataset.
    GenLabels,
    /// Fine-tune on the generic labels, evaluating along the way.
    Unlearn,
    /// Evaluate one checkpoint and print its report line.
    Eval {
        /// Defaults to the unlearned checkpoint of the configured ablation.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        step: u64,
    },
    /// Run every stage and print the report series.
    RunAll,
    /// Print one dataset block as source/label columns.
    DumpTranslation {
        #[arg(long, default_value_t = 0)]
        block: usize,
    },
    /// Print the effective configuration.
    ShowConfig,
}

fn stage_failure(stage: &str, e: impl std::fmt::Display) -> PipelineError {
    PipelineError::Stage {
        stage: stage.into(),
        source: e.to_string().into(),
    }
}

fn report_stage(name: &str, r: Result<StageOutcome, PipelineError>) -> Result<(), PipelineError> {
    match r? {
        StageOutcome::Ran => println!("{name}: done"),
        StageOutcome::Skipped => println!("{name}: up to date"),
    }
    Ok(())
}

fn run(cli: Cli) -> Result<(), PipelineError> {
    let cfg = PipelineConfig::load(cli.config.as_deref(), &cli.overrides)?;
    let layout = Layout::new(&cfg);
    match cli.command {
        Command::GenerateCanon => report_stage("generate-canon", stage_generate_canon(&cfg)),
        Command::Tokenize => report_stage("tokenize", stage_tokenize(&cfg)),
        Command::Pretrain => report_stage("pretrain", stage_pretrain(&cfg)),
        Command::Reinforce => report_stage("reinforce", stage_reinforce(&cfg)),
        Command::GenLabels => report_stage("gen-labels", stage_gen_labels(&cfg)),
        Command::Unlearn => report_stage("unlearn", stage_unlearn(&cfg)),
        Command::Eval { checkpoint, step } => {
            let path = checkpoint.unwrap_or_else(|| layout.unlearned());
            let model = Checkpoint::load(&path).map_err(|e| stage_failure("eval", e))?;
            let vocab = Vocab::load(&layout.vocab()).map_err(|e| stage_failure("eval", e))?;
            let set = load_eval_set(&layout, &vocab, model.config.context_len)
                .map_err(|e| stage_failure("eval", e))?;
            let judge = make_judge(&cfg, &layout).map_err(|e| stage_failure("eval", e))?;
            let report = unlearn_forge::eval::evaluate(
                &model,
                &vocab,
                &set,
                judge.as_ref(),
                &completion_settings(&cfg),
                step,
            )
            .map_err(|e| match e {
                unlearn_forge::eval::EvalError::JudgeUnavailable(m) => {
                    PipelineError::JudgeUnavailable(m)
                }
                other => stage_failure("eval", other),
            })?;
            println!(
                "{}",
                serde_json::to_string(&report).expect("report serializes")
            );
            Ok(())
        }
        Command::RunAll => {
            for r in run_all(&cfg)? {
                println!("{}", serde_json::to_string(&r).expect("report serializes"));
            }
            Ok(())
        }
        Command::DumpTranslation { block } => {
            let vocab =
                Vocab::load(&layout.vocab()).map_err(|e| stage_failure("dump-translation", e))?;
            let (_, data) = read_dataset(&layout.dataset())
                .map_err(|e| stage_failure("dump-translation", e))?;
            let ex = data.get(block).ok_or_else(|| {
                stage_failure(
                    "dump-translation",
                    format!("no block {block}; dataset has {}", data.len()),
                )
            })?;
            print!(
                "{}",
                render_label_view(&vocab, &ex.source, &ex.labels, &ex.mask.mask)
            );
            Ok(())
        }
        Command::ShowConfig => {
            print!("{}", cfg.to_toml());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
