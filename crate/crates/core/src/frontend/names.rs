//! Fresh-name generation and capture-free identifier substitution.

use std::collections::{HashMap, HashSet};

use super::ast::*;

/// Hands out identifiers that do not clash with anything seen so far.
#[derive(Debug, Clone, Default)]
pub struct NameGen {
    used: HashSet<String>,
}

impl NameGen {
    pub fn new() -> Self {
        NameGen::default()
    }

    /// Seeds the generator with every identifier and label used by a kernel.
    pub fn for_kernel(k: &Kernel) -> Self {
        let mut g = NameGen::new();
        g.reserve(&k.name);
        for p in &k.params {
            g.reserve(&p.name);
        }
        g.reserve_block(&k.body);
        g
    }

    pub fn reserve(&mut self, name: &str) {
        self.used.insert(name.to_string());
    }

    pub fn reserve_block(&mut self, block: &[Stmt]) {
        walk_stmts(block, &mut |s| match &s.kind {
            StmtKind::Decl(d) => {
                self.used.insert(d.name.clone());
            }
            StmtKind::Label(l) | StmtKind::Goto(l) => {
                self.used.insert(l.clone());
            }
            StmtKind::Assign { target, .. } | StmtKind::AtomicAdd { target, .. } => {
                self.used.insert(target.name().to_string());
            }
            _ => {}
        });
        walk_exprs(block, &mut |e| match &e.kind {
            ExprKind::Var(n) | ExprKind::Index(n, _) => {
                self.used.insert(n.clone());
            }
            _ => {}
        });
    }

    pub fn is_used(&self, name: &str) -> bool {
        self.used.contains(name)
    }

    /// `base` if unused, else `base_1`, `base_2`, ...
    pub fn fresh(&mut self, base: &str) -> String {
        let mut candidate = base.to_string();
        let mut n = 1;
        while self.used.contains(&candidate) {
            candidate = format!("{base}_{n}");
            n += 1;
        }
        self.used.insert(candidate.clone());
        candidate
    }
}

fn rename_expr(e: &mut Expr, vars: &HashMap<String, String>) {
    e.walk_mut(&mut |e| match &mut e.kind {
        ExprKind::Var(n) | ExprKind::Index(n, _) => {
            if let Some(m) = vars.get(n) {
                *n = m.clone();
            }
        }
        _ => {}
    });
}

/// Substitutes variable names and labels throughout a block.
pub fn rename_block(
    block: &mut [Stmt],
    vars: &HashMap<String, String>,
    labels: &HashMap<String, String>,
) {
    walk_exprs_mut(block, &mut |e| rename_expr(e, vars));
    walk_stmts_mut(block, &mut |s| match &mut s.kind {
        StmtKind::Decl(d) => {
            if let Some(m) = vars.get(&d.name) {
                d.name = m.clone();
            }
        }
        StmtKind::Assign { target, .. } | StmtKind::AtomicAdd { target, .. } => {
            let n = match target {
                LValue::Var(n) | LValue::Index(n, _) => n,
            };
            if let Some(m) = vars.get(n) {
                *n = m.clone();
            }
        }
        StmtKind::Label(l) | StmtKind::Goto(l) => {
            if let Some(m) = labels.get(l) {
                *l = m.clone();
            }
        }
        _ => {}
    });
}

/// Names of all declarations in a block, in first-appearance order.
pub fn declared_names(block: &[Stmt]) -> Vec<String> {
    let mut out: Vec<String> = Vec::new();
    walk_stmts(block, &mut |s| {
        if let StmtKind::Decl(d) = &s.kind {
            if !out.contains(&d.name) {
                out.push(d.name.clone());
            }
        }
    });
    out
}

pub fn label_names(block: &[Stmt]) -> Vec<String> {
    let mut out = Vec::new();
    walk_stmts(block, &mut |s| {
        if let StmtKind::Label(l) = &s.kind {
            out.push(l.clone());
        }
    });
    out
}
