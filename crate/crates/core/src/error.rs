use thiserror::Error;

use crate::datagen::Group;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in `{op}`: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid tensor: {0}")]
    InvalidTensor(String),

    #[error("backward needs a scalar root, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),

    #[error("non-finite gradient in parameter tensor #{index}")]
    NonFiniteGradient { index: usize },

    #[error("infeasible joint for domain {domain}: {reason}")]
    InfeasibleJoint { domain: u32, reason: String },

    #[error("invalid generator input: {0}")]
    Generator(String),

    #[error("quartet sampling needs at least two training domains, got {0}")]
    TooFewDomains(usize),

    #[error("no instances available for quartet cell (domain {domain}, y={y})")]
    EmptyCell { domain: u32, y: u8 },

    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("degenerate mixture: {0}")]
    DegenerateMixture(String),

    #[error("empty sensitive group a={}", .0.sign())]
    EmptyGroup(Group),

    #[error("group a={} has {n} points, needs more than K={k}", .group.sign())]
    TooFewPoints { group: Group, n: usize, k: usize },

    #[error("lambda2={lambda2} makes the weight denominator N-lambda2 non-positive for group a={} (N={n})", .group.sign())]
    NegativeDenominator { group: Group, n: usize, lambda2: f64 },

    #[error("metric `{0}` is undefined: a sensitive group is absent")]
    UndefinedMetric(&'static str),

    #[error("domain {domain} has {n} instances, consistency with k={k} needs more")]
    DomainTooSmall { domain: u32, n: usize, k: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("non-finite loss at step {step} ({what}); last good checkpoint is step {last_good}")]
    NonFiniteLoss {
        step: usize,
        what: String,
        last_good: usize,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
