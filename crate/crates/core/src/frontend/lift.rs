//! Declaration lifting.
//!
//! Every declaration moves to the start of the kernel body. Initializers stay
//! behind as assignments at the original position. Declarations that reuse a
//! name already lifted get a numbered variant so sibling scopes stay distinct.

use std::collections::{HashMap, HashSet};

use super::ast::*;
use super::names::NameGen;

struct Lifter {
    names: NameGen,
    lifted: HashSet<String>,
    decls: Vec<Stmt>,
    scopes: Vec<HashMap<String, String>>,
}

impl Lifter {
    fn resolve(&self, name: &str) -> Option<&String> {
        self.scopes.iter().rev().find_map(|s| s.get(name))
    }

    fn subst_name(&self, n: &mut String) {
        if let Some(m) = self.resolve(n) {
            *n = m.clone();
        }
    }

    fn subst(&self, e: &mut Expr) {
        e.walk_mut(&mut |e| match &mut e.kind {
            ExprKind::Var(n) | ExprKind::Index(n, _) => self.subst_name(n),
            _ => {}
        });
    }

    fn subst_lvalue(&self, lv: &mut LValue) {
        match lv {
            LValue::Var(n) => self.subst_name(n),
            LValue::Index(n, i) => {
                self.subst_name(n);
                self.subst(i);
            }
        }
    }

    fn scoped<T>(&mut self, f: impl FnOnce(&mut Self) -> T) -> T {
        self.scopes.push(HashMap::new());
        let r = f(self);
        self.scopes.pop();
        r
    }

    fn block(&mut self, b: Block) -> Block {
        let mut out = Vec::with_capacity(b.len());
        for s in b {
            if let Some(s) = self.stmt(s) {
                out.push(s);
            }
        }
        out
    }

    /// Returns the statement left in place, if any.
    fn stmt(&mut self, mut s: Stmt) -> Option<Stmt> {
        let span = s.span;
        match &mut s.kind {
            StmtKind::Decl(d) => {
                let mut init = d.init.take();
                if let Some(e) = &mut init {
                    self.subst(e);
                }
                let name = if self.lifted.contains(&d.name) {
                    self.names.fresh(&d.name)
                } else {
                    self.names.reserve(&d.name);
                    d.name.clone()
                };
                self.lifted.insert(name.clone());
                self.scopes
                    .last_mut()
                    .expect("scope")
                    .insert(d.name.clone(), name.clone());
                self.decls.push(Stmt::new(
                    StmtKind::Decl(Decl {
                        name: name.clone(),
                        init: None,
                        ..d.clone()
                    }),
                    span,
                ));
                return init.map(|value| {
                    Stmt::new(
                        StmtKind::Assign {
                            target: LValue::Var(name),
                            value,
                        },
                        span,
                    )
                });
            }
            StmtKind::Assign { target, value } | StmtKind::AtomicAdd { target, value } => {
                self.subst_lvalue(target);
                self.subst(value);
            }
            StmtKind::If {
                cond,
                then_block,
                else_block,
            } => {
                self.subst(cond);
                *then_block = self.scoped(|l| l.block(std::mem::take(then_block)));
                if let Some(e) = else_block {
                    *e = self.scoped(|l| l.block(std::mem::take(e)));
                }
            }
            StmtKind::While { cond, body } => {
                self.subst(cond);
                *body = self.scoped(|l| l.block(std::mem::take(body)));
            }
            StmtKind::For {
                init,
                cond,
                step,
                body,
            } => {
                self.scopes.push(HashMap::new());
                *init = init.take().and_then(|i| self.stmt(*i)).map(Box::new);
                self.subst(cond);
                *step = step.take().and_then(|st| self.stmt(*st)).map(Box::new);
                *body = self.scoped(|l| l.block(std::mem::take(body)));
                self.scopes.pop();
            }
            StmtKind::Return(Some(e)) => self.subst(e),
            StmtKind::Call { args, .. } => {
                for a in args {
                    self.subst(a);
                }
            }
            _ => {}
        }
        Some(s)
    }
}

/// Moves all declarations to a leading prefix of the kernel body.
pub fn lift_declarations(k: &Kernel) -> Kernel {
    let mut l = Lifter {
        names: NameGen::for_kernel(k),
        lifted: k.params.iter().map(|p| p.name.clone()).collect(),
        decls: Vec::new(),
        scopes: vec![HashMap::new()],
    };
    let rest = l.block(k.body.clone());
    let mut body = l.decls;
    body.extend(rest);
    Kernel {
        body,
        ..k.clone()
    }
}

/// True when no declaration follows the first non-declaration statement and
/// no declaration carries an initializer.
pub fn is_lifted(body: &[Stmt]) -> bool {
    let prefix = body
        .iter()
        .take_while(|s| matches!(s.kind, StmtKind::Decl(_)))
        .count();
    let prefix_ok = body[..prefix]
        .iter()
        .all(|s| matches!(&s.kind, StmtKind::Decl(d) if d.init.is_none()));
    prefix_ok && count_stmts(&body[prefix..], |k| matches!(k, StmtKind::Decl(_))) == 0
}
