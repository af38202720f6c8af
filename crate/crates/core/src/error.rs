use thiserror::Error;

use crate::config::Violation;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {}", format_violations(.0))]
    InvalidConfig(Vec<Violation>),

    #[error("invalid stage schedule: {0}")]
    InvalidSchedule(String),

    #[error("group index {index} out of range for {groups} groups")]
    GroupOutOfRange { index: usize, groups: usize },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("invalid allocation problem: {0}")]
    InvalidProblem(String),

    #[error("invalid data-generating process: {0}")]
    InvalidDgp(String),

    #[error("design `{0}` requires true outcome parameters")]
    MissingTrueParams(&'static str),

    #[error("invalid design: {0}")]
    InvalidDesign(String),

    #[error("no participants enrolled")]
    NoEnrollment,

    #[error("csv output failed: {0}")]
    Csv(#[from] csv::Error),
}

fn format_violations(violations: &[Violation]) -> String {
    violations
        .iter()
        .map(|v| format!("{}: {}", v.field, v.message))
        .collect::<Vec<_>>()
        .join("; ")
}
