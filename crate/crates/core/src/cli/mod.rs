//! Command-line entry point: `prepare`, `train`, `eval`, `predict` and
//! `inspect-alignment`, all driven by one [`RunConfig`].
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 internal
//! invariant violation. Failures are reported on stderr as a single JSON
//! record `{"error", "category", "message", "exit_code"}`.

mod commands;
mod config;

use std::ffi::OsString;
use std::io::Write;
use std::path::PathBuf;

use clap::{Parser, Subcommand};
use serde::Serialize;

use crate::corpus::CorpusError;
use crate::evaluator::EvalError;
use crate::model::ModelError;
use crate::spanprep::PreparedIoError;
use crate::tokenizer::TokenizerError;
use crate::trainer::TrainError;

pub use commands::{
    cmd_eval, cmd_inspect_alignment, cmd_predict, cmd_prepare, cmd_train, AlignmentAudit, AuditLine,
    EvalOutput, SplitAudit, SplitEval,
};
pub use config::{ModelSection, Paths, RunConfig, TrainSection};

#[derive(Debug, Parser)]
#[command(name = "sentispan", version, about = "Extract the sentiment-bearing span of a text")]
pub struct Cli {
    /// TOML run configuration.
    #[arg(short, long, global = true)]
    pub config: Option<PathBuf>,
    /// Override a config key, e.g. `--set train.learning_rate=0.001`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub overrides: Vec<String>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build the vocabulary and write aligned line-delimited JSON datasets.
    Prepare {
        /// Also write per-row validation findings to `findings.jsonl`.
        #[arg(long)]
        findings: bool,
    },
    /// Train from the prepared datasets and write checkpoints and a log.
    Train,
    /// Score a checkpoint on every prepared split.
    Eval {
        /// Defaults to `{checkpoint_dir}/best.json`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Print the predicted span for one text.
    Predict {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        text: String,
        #[arg(long)]
        sentiment: String,
    },
    /// Decode every prepared gold span and compare it with the annotation.
    InspectAlignment,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Category {
    Usage,
    Data,
    Internal,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CliError {
    pub category: Category,
    /// Stable machine-readable name such as `MissingColumn`.
    pub code: String,
    pub message: String,
}

impl CliError {
    pub fn new(category: Category, code: &str, message: impl Into<String>) -> Self {
        CliError {
            category,
            code: code.to_string(),
            message: message.into(),
        }
    }

    pub fn usage(code: &str, message: impl Into<String>) -> Self {
        Self::new(Category::Usage, code, message)
    }

    pub fn data(code: &str, message: impl Into<String>) -> Self {
        Self::new(Category::Data, code, message)
    }

    pub fn internal(code: &str, message: impl Into<String>) -> Self {
        Self::new(Category::Internal, code, message)
    }

    pub fn exit_code(&self) -> i32 {
        match self.category {
            Category::Usage => 1,
            Category::Data => 2,
            Category::Internal => 3,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::json!({
            "error": self.code,
            "category": self.category,
            "message": self.message,
            "exit_code": self.exit_code(),
        })
        .to_string()
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}: {}", self.code, self.message)
    }
}

impl std::error::Error for CliError {}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::data("Io", e.to_string())
    }
}

impl From<CorpusError> for CliError {
    fn from(e: CorpusError) -> Self {
        let msg = e.to_string();
        match e {
            CorpusError::Io { .. } => CliError::data("Io", msg),
            CorpusError::MissingColumn(_) => CliError::data("MissingColumn", msg),
            CorpusError::MalformedCsv(_) => CliError::data("MalformedCsv", msg),
            CorpusError::BadRatios(_) => CliError::usage("BadRatios", msg),
        }
    }
}

impl From<TokenizerError> for CliError {
    fn from(e: TokenizerError) -> Self {
        let msg = e.to_string();
        match e {
            TokenizerError::VocabTooSmall(_) => CliError::usage("VocabTooSmall", msg),
            TokenizerError::IdOutOfRange { .. } => CliError::data("IdOutOfRange", msg),
            TokenizerError::Io { .. } => CliError::data("Io", msg),
            TokenizerError::InvalidVocabFile(_) => CliError::data("InvalidVocabFile", msg),
        }
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        let msg = e.to_string();
        match e {
            ModelError::ShapeMismatch(_) => CliError::data("ShapeMismatch", msg),
            ModelError::InvalidConfig(_) => CliError::usage("InvalidModelConfig", msg),
            ModelError::Io { .. } => CliError::data("Io", msg),
            ModelError::InvalidCheckpoint(_) => CliError::data("InvalidCheckpoint", msg),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        let msg = e.to_string();
        match e {
            EvalError::EmptyDataset => CliError::data("EmptyDataset", msg),
            EvalError::MissingSentiment(_) => CliError::data("MissingSentiment", msg),
            EvalError::BadBatchSize => CliError::usage("BadBatchSize", msg),
            EvalError::AllMasked => CliError::internal("AllMasked", msg),
            EvalError::Loss(_) => CliError::internal("LossInvariant", msg),
            EvalError::Model(e) => e.into(),
            EvalError::Tokenizer(e) => e.into(),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        let msg = e.to_string();
        match e {
            TrainError::EmptyDataset => CliError::data("EmptyDataset", msg),
            TrainError::InvalidConfig(_) => CliError::usage("InvalidTrainConfig", msg),
            TrainError::Loss(_) => CliError::internal("LossInvariant", msg),
            TrainError::Callback(_) => CliError::data("Io", msg),
            TrainError::Model(e) => e.into(),
            TrainError::Eval(e) => e.into(),
        }
    }
}

impl From<PreparedIoError> for CliError {
    fn from(e: PreparedIoError) -> Self {
        let msg = e.to_string();
        match e {
            PreparedIoError::Io(_) => CliError::data("Io", msg),
            PreparedIoError::Corrupt { .. } => CliError::data("CorruptPreparedFile", msg),
        }
    }
}

/// Parses `args`, runs the command and returns the process exit code.
/// Normal output goes to `out`, error records to `err`.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = write!(out, "{e}");
                return 0;
            }
            let record = CliError::usage("InvalidArguments", e.to_string().trim_end());
            let _ = writeln!(err, "{}", record.to_json());
            return record.exit_code();
        }
    };
    match dispatch(cli, out) {
        Ok(()) => 0,
        Err(e) => {
            log::error!("{e}");
            let _ = writeln!(err, "{}", e.to_json());
            e.exit_code()
        }
    }
}

fn dispatch(cli: Cli, out: &mut dyn Write) -> Result<(), CliError> {
    let cfg = RunConfig::load(cli.config.as_deref(), &cli.overrides)?;
    match cli.command {
        Command::Prepare { findings } => cmd_prepare(&cfg, findings, out).map(drop),
        Command::Train => cmd_train(&cfg, out).map(drop),
        Command::Eval { checkpoint } => cmd_eval(&cfg, checkpoint.as_deref(), out).map(drop),
        Command::Predict {
            checkpoint,
            text,
            sentiment,
        } => cmd_predict(&cfg, checkpoint.as_deref(), &text, &sentiment, out).map(drop),
        Command::InspectAlignment => cmd_inspect_alignment(&cfg, out).map(drop),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run_capture(args: &[&str]) -> (i32, String, String) {
        let (mut out, mut err) = (Vec::new(), Vec::new());
        let code = run(args.iter().copied(), &mut out, &mut err);
        (code, String::from_utf8(out).unwrap(), String::from_utf8(err).unwrap())
    }

    #[test]
    fn bad_arguments_exit_with_usage_code() {
        let (code, _, err) = run_capture(&["sentispan", "frobnicate"]);
        assert_eq!(code, 1);
        let v: serde_json::Value = serde_json::from_str(err.trim()).unwrap();
        assert_eq!(v["error"], "InvalidArguments");
        assert_eq!(v["exit_code"], 1);
    }

    #[test]
    fn help_exits_zero() {
        let (code, out, _) = run_capture(&["sentispan", "--help"]);
        assert_eq!(code, 0);
        assert!(out.contains("inspect-alignment"));
    }

    #[test]
    fn error_categories_map_to_exit_codes() {
        assert_eq!(CliError::from(CorpusError::MissingColumn("sentiment")).exit_code(), 2);
        assert_eq!(CliError::from(ModelError::InvalidConfig("x".into())).exit_code(), 1);
        assert_eq!(CliError::from(EvalError::AllMasked).exit_code(), 3);
        let e = CliError::from(TrainError::Model(ModelError::ShapeMismatch("d".into())));
        assert_eq!((e.code.as_str(), e.exit_code()), ("ShapeMismatch", 2));
    }
}
