use thiserror::Error;

/// Errors raised by the laboratory. Non-convergence of a solve is not an
/// error; it is reported through [`crate::solver::SolveResult::converged`].
#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("resolution error: {0}")]
    Resolution(String),
    #[error("input error: {0}")]
    Input(String),
    #[error("operator error: {0}")]
    Operator(String),
    #[error("stencil error: node {node} is missing a neighbor")]
    Stencil { node: usize },
    #[error("domain error: {0}")]
    Domain(String),
    #[error("invariant violation: {0}")]
    Invariant(String),
    #[error("geometry error: {0}")]
    Geometry(String),
    #[error("no interface: {0}")]
    NoInterface(String),
    #[error("degenerate interface gradient at node {node}")]
    DegenerateInterface { node: usize },
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("parse error: {0}")]
    Parse(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
