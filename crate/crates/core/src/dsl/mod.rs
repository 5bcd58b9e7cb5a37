//! The building-block language: AST, concrete syntax, validation and the
//! equivalence-preserving rewrites.

mod ast;
mod parse;
mod render;
mod rewrite;
mod validate;

use thiserror::Error;

pub use ast::{
    BlockExpr, CondDecl, DistPolicy, GatherPolicy, NodeSetDecl, Program, Selector, SourceMap, Span,
};
pub use parse::parse;
pub use render::{render, render_expr};
pub use rewrite::{rewrite, RewriteError, RuleId};
pub use validate::{validate, validate_with, Diagnostic, Severity, BUILTIN_REDUCERS};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ParseError {
    #[error("{line}:{column}: {message}")]
    Syntax { line: u32, column: u32, message: String },
    #[error("{line}:{column}: undeclared {kind} `{name}`")]
    Undeclared {
        kind: &'static str,
        name: String,
        line: u32,
        column: u32,
    },
    #[error("{line}:{column}: `{name}` is declared twice")]
    Duplicate { name: String, line: u32, column: u32 },
    #[error("{line}:{column}: {message}")]
    InvalidDecl { line: u32, column: u32, message: String },
}

impl ParseError {
    pub fn position(&self) -> (u32, u32) {
        match self {
            ParseError::Syntax { line, column, .. }
            | ParseError::Undeclared { line, column, .. }
            | ParseError::Duplicate { line, column, .. }
            | ParseError::InvalidDecl { line, column, .. } => (*line, *column),
        }
    }
}
