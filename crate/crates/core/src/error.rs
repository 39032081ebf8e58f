use std::io;
use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum VocabError {
    #[error("vocabulary is empty")]
    Empty,
    #[error("vocabulary entry with empty name")]
    EmptyName,
    #[error("duplicate vocabulary entry `{0}`")]
    Duplicate(String),
    #[error("alias target `{0}` is not a class")]
    UnknownAliasTarget(String),
    #[error("dual pair names unknown relation `{0}`")]
    UnknownDual(String),
    #[error("relation `{0}` appears in more than one dual pair or is its own dual")]
    BadDual(String),
    #[error("relation `{0}` has no dual")]
    MissingDual(String),
}

/// A scene-graph document failed to parse. `line`/`column` are 1-based and
/// zero when the error is semantic (then `path` locates the offending value).
#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("{}", render_parse_error(.line, .column, .path, .message))]
pub struct ParseError {
    pub line: usize,
    pub column: usize,
    pub path: String,
    pub message: String,
}

fn render_parse_error(line: &usize, column: &usize, path: &str, message: &str) -> String {
    match (line, path.is_empty()) {
        (0, true) => message.to_string(),
        (0, false) => format!("at {path}: {message}"),
        _ => format!("line {line} column {column}: {message}"),
    }
}

impl ParseError {
    pub fn syntax(e: &serde_json::Error) -> Self {
        Self {
            line: e.line(),
            column: e.column(),
            path: String::new(),
            message: e.to_string(),
        }
    }

    pub fn at(path: impl Into<String>, message: impl Into<String>) -> Self {
        Self {
            line: 0,
            column: 0,
            path: path.into(),
            message: message.into(),
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum EditError {
    #[error("node {0} does not exist")]
    MissingNode(usize),
    #[error("edge {0} does not exist")]
    MissingEdge(usize),
    #[error("edge ({0}, {1}, {2}) already exists")]
    DuplicateEdge(usize, usize, usize),
    #[error("edit produces an invalid graph: {0}")]
    Invalid(String),
    #[error("not a permutation of 0..{0}")]
    NotAPermutation(usize),
}

#[derive(Debug, Error)]
pub enum DeriveError {
    #[error("negative depth {0}")]
    NegativeDepth(f64),
    #[error("empty mask")]
    EmptyMask,
    #[error("invalid annotation record: {0}")]
    InvalidRecord(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("requested {k} graphs from a corpus of {n}")]
    SubsampleTooLarge { k: usize, n: usize },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },
}

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("index out of range: {0}")]
    Index(String),
    #[error("missing parameter `{0}`")]
    MissingParam(String),
    #[error("invalid configuration: {0}")]
    Config(String),
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("non-finite loss at step {step}")]
    Diverged { step: usize },
    #[error("empty training set")]
    EmptyCorpus,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error: {0}")]
    Io(#[from] io::Error),
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("checkpoint incompatible with configuration: {0}")]
    Incompatible(String),
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("config parse error: {0}")]
    Parse(String),
    #[error("inconsistent configuration: {0}")]
    Inconsistent(String),
}

/// Pipeline step of an experiment run, used to label failures.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Config,
    Sample,
    TrainProcessor,
    Compose,
    TrainGenerator,
    Eval,
    Write,
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Stage::Config => "config",
            Stage::Sample => "sample",
            Stage::TrainProcessor => "train-processor",
            Stage::Compose => "compose",
            Stage::TrainGenerator => "train-generator",
            Stage::Eval => "eval",
            Stage::Write => "write",
        })
    }
}

#[derive(Debug, Error)]
#[error("{stage} stage: {source}")]
pub struct ExperimentError {
    pub stage: Stage,
    #[source]
    pub source: Box<dyn std::error::Error + Send + Sync>,
}

impl ExperimentError {
    pub fn new(stage: Stage, source: impl Into<Box<dyn std::error::Error + Send + Sync>>) -> Self {
        Self {
            stage,
            source: source.into(),
        }
    }
}
