use thiserror::Error;

use super::ast::Span;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum FrontendError {
    #[error("{span}: syntax error: expected {}, found {found}", .expected.join(" or "))]
    Syntax {
        span: Span,
        expected: Vec<String>,
        found: String,
    },
    #[error("{span}: unknown identifier `{name}`")]
    UnknownIdentifier { span: Span, name: String },
    #[error("{span}: type mismatch: {message}")]
    TypeMismatch { span: Span, message: String },
    #[error("{span}: call to undefined function `{name}`")]
    UnresolvedCall { span: Span, name: String },
    #[error("recursive call cycle: {}", .cycle.join(" -> "))]
    Recursion { cycle: Vec<String> },
    #[error("{span}: `{name}` is defined more than once")]
    DuplicateDefinition { span: Span, name: String },
    #[error("{span}: `{name}` is already declared in this scope")]
    Redeclared { span: Span, name: String },
    #[error("{span}: goto target `{label}` is not a label in this body")]
    UndefinedLabel { span: Span, label: String },
    #[error("{span}: label `{label}` is defined more than once")]
    DuplicateLabel { span: Span, label: String },
    #[error("{span}: {message}")]
    Invalid { span: Span, message: String },
}

impl FrontendError {
    pub fn span(&self) -> Option<super::ast::Span> {
        use FrontendError::*;
        match self {
            Syntax { span, .. }
            | UnknownIdentifier { span, .. }
            | TypeMismatch { span, .. }
            | UnresolvedCall { span, .. }
            | DuplicateDefinition { span, .. }
            | Redeclared { span, .. }
            | UndefinedLabel { span, .. }
            | DuplicateLabel { span, .. }
            | Invalid { span, .. } => Some(*span),
            Recursion { .. } => None,
        }
    }

    pub(crate) fn mismatch(span: Span, message: impl Into<String>) -> Self {
        FrontendError::TypeMismatch {
            span,
            message: message.into(),
        }
    }
}
