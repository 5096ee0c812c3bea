//! Source lints that do not make a program invalid.

use std::collections::HashMap;
use std::fmt;

use super::ast::*;

#[derive(Debug, Clone, PartialEq)]
pub struct LintWarning {
    pub span: Span,
    pub message: String,
}

impl fmt::Display for LintWarning {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: warning: {}", self.span, self.message)
    }
}

enum Event<'a> {
    Decl(&'a str),
    Label(&'a str),
    Goto(&'a str, Span),
}

/// Statements in source order, each tagged with the id of its enclosing scope.
struct Flat<'a> {
    events: Vec<(usize, Event<'a>)>,
    parent: Vec<Option<usize>>,
}

impl<'a> Flat<'a> {
    fn new_scope(&mut self, parent: usize) -> usize {
        self.parent.push(Some(parent));
        self.parent.len() - 1
    }

    fn block(&mut self, b: &'a [Stmt], scope: usize) {
        for s in b {
            self.stmt(s, scope);
        }
    }

    fn stmt(&mut self, s: &'a Stmt, scope: usize) {
        match &s.kind {
            StmtKind::Decl(d) => self.events.push((scope, Event::Decl(&d.name))),
            StmtKind::Label(l) => self.events.push((scope, Event::Label(l))),
            StmtKind::Goto(l) => self.events.push((scope, Event::Goto(l, s.span))),
            StmtKind::If {
                then_block,
                else_block,
                ..
            } => {
                let t = self.new_scope(scope);
                self.block(then_block, t);
                if let Some(e) = else_block {
                    let e_scope = self.new_scope(scope);
                    self.block(e, e_scope);
                }
            }
            StmtKind::For { init, body, .. } => {
                let f = self.new_scope(scope);
                if let Some(i) = init {
                    self.stmt(i, f);
                }
                let b = self.new_scope(f);
                self.block(body, b);
            }
            StmtKind::While { body, .. } => {
                let b = self.new_scope(scope);
                self.block(body, b);
            }
            _ => {}
        }
    }

    fn encloses(&self, outer: usize, mut inner: usize) -> bool {
        loop {
            if inner == outer {
                return true;
            }
            match self.parent[inner] {
                Some(p) => inner = p,
                None => return false,
            }
        }
    }
}

/// Flags forward gotos that jump over a declaration still in scope at the
/// target label.
pub fn goto_over_decl(body: &[Stmt]) -> Vec<LintWarning> {
    let mut flat = Flat {
        events: Vec::new(),
        parent: vec![None],
    };
    flat.block(body, 0);
    let labels: HashMap<&str, usize> = flat
        .events
        .iter()
        .enumerate()
        .filter_map(|(i, (_, e))| match e {
            Event::Label(l) => Some((*l, i)),
            _ => None,
        })
        .collect();
    let mut out = Vec::new();
    for (g, (_, e)) in flat.events.iter().enumerate() {
        let Event::Goto(l, span) = e else { continue };
        let Some(&target) = labels.get(l) else { continue };
        if target <= g {
            continue;
        }
        let label_scope = flat.events[target].0;
        for (scope, e) in &flat.events[g + 1..target] {
            if let Event::Decl(name) = e {
                if flat.encloses(*scope, label_scope) {
                    out.push(LintWarning {
                        span: *span,
                        message: format!("goto `{l}` jumps over the declaration of `{name}`"),
                    });
                }
            }
        }
    }
    out
}

pub fn lint_program(p: &Program) -> Vec<LintWarning> {
    let mut out = Vec::new();
    for f in &p.functions {
        out.extend(goto_over_decl(&f.body));
    }
    for k in &p.kernels {
        out.extend(goto_over_decl(&k.body));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::frontend::parse_program;

    fn warnings(src: &str) -> Vec<LintWarning> {
        lint_program(&parse_program(src).unwrap())
    }

    #[test]
    fn jump_over_decl_in_same_scope() {
        let w = warnings("kernel k() { goto end; int x = 1; end: }");
        assert_eq!(w.len(), 1);
        assert!(w[0].message.contains("`x`"));
    }

    #[test]
    fn decl_in_inner_scope_is_fine() {
        let w = warnings("kernel k() { goto end; if (1) { int x = 1; } end: }");
        assert!(w.is_empty());
    }

    #[test]
    fn backward_jump_is_fine() {
        let w = warnings("kernel k() { int i = 0; top: i = i + 1; if (i < 3) { goto top; } }");
        assert!(w.is_empty());
    }

    #[test]
    fn jump_into_nested_scope_past_outer_decl() {
        let w = warnings("kernel k() { goto inner; int y; if (1) { inner: } }");
        assert_eq!(w.len(), 1);
        assert!(w[0].message.contains("`y`"));
    }

    #[test]
    fn decl_before_goto_is_fine() {
        let w = warnings("kernel k() { int x = 1; goto end; x = 2; end: }");
        assert!(w.is_empty());
    }
}
