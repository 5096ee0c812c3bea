//! Mini-Kernel frontend: lexing, parsing, checking and normalization.

pub mod ast;
mod check;
mod error;
mod inline;
mod lexer;
mod lift;
mod lint;
mod names;
mod parser;
mod printer;
mod rename;

pub use ast::*;
pub use check::{assignable, binary_type, check_kernel, check_program, operand_type};
pub use error::FrontendError;
pub use inline::{check_acyclic, inline_calls};
pub use lift::{is_lifted, lift_declarations};
pub use lint::{goto_over_decl, lint_program, LintWarning};
pub use names::NameGen;
pub use parser::{const_eval, parse_unchecked, RESERVED};
pub use printer::{print_expr, print_kernel, print_program, Dialect, Printer};
pub use rename::{rename_locals, RenameMap};

/// Parses and checks a whole program, rejecting recursive call graphs.
pub fn parse_program(src: &str) -> Result<Program, FrontendError> {
    let p = parse_unchecked(src)?;
    check_program(&p)?;
    check_acyclic(&p.functions)?;
    Ok(p)
}

/// Inlines, lifts and renames a kernel, ready for fusion.
pub fn normalize(
    k: &Kernel,
    funcs: &[FuncDef],
    prefix: &str,
) -> Result<(Kernel, RenameMap), FrontendError> {
    let inlined = inline_calls(k, funcs)?;
    let lifted = lift_declarations(&inlined);
    Ok(rename_locals(&lifted, prefix))
}
