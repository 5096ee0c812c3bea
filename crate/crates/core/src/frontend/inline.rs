//! Call inlining.
//!
//! Calls are hoisted out of expressions into preceding statements. A callee
//! body is spliced in with fresh names; `return e;` becomes an assignment to a
//! result variable followed by a jump to a label at the end of the expansion.
//! Loops whose condition or step contains a call are rewritten into
//! label/goto form so the hoisted statements re-run on every iteration.

use std::collections::HashMap;

use super::ast::*;
use super::error::FrontendError;
use super::names::{declared_names, label_names, rename_block, NameGen};

/// Rejects call cycles among `funcs`, reporting the first cycle found.
pub fn check_acyclic(funcs: &[FuncDef]) -> Result<(), FrontendError> {
    let index: HashMap<&str, usize> = funcs
        .iter()
        .enumerate()
        .map(|(i, f)| (f.name.as_str(), i))
        .collect();
    let callees: Vec<Vec<usize>> = funcs
        .iter()
        .map(|f| {
            called_names(&f.body)
                .iter()
                .filter_map(|n| index.get(n.as_str()).copied())
                .collect()
        })
        .collect();

    #[derive(Clone, Copy, PartialEq)]
    enum Mark {
        New,
        OnStack,
        Done,
    }
    fn dfs(
        v: usize,
        callees: &[Vec<usize>],
        marks: &mut [Mark],
        stack: &mut Vec<usize>,
    ) -> Option<Vec<usize>> {
        marks[v] = Mark::OnStack;
        stack.push(v);
        for &w in &callees[v] {
            match marks[w] {
                Mark::OnStack => {
                    let start = stack.iter().position(|&s| s == w).expect("on stack");
                    return Some(stack[start..].to_vec());
                }
                Mark::New => {
                    if let Some(c) = dfs(w, callees, marks, stack) {
                        return Some(c);
                    }
                }
                Mark::Done => {}
            }
        }
        stack.pop();
        marks[v] = Mark::Done;
        None
    }

    let mut marks = vec![Mark::New; funcs.len()];
    for v in 0..funcs.len() {
        if marks[v] == Mark::New {
            if let Some(cycle) = dfs(v, &callees, &mut marks, &mut Vec::new()) {
                return Err(FrontendError::Recursion {
                    cycle: cycle.iter().map(|&i| funcs[i].name.clone()).collect(),
                });
            }
        }
    }
    Ok(())
}

/// Names of all functions called anywhere in a block.
pub fn called_names(block: &[Stmt]) -> Vec<String> {
    let mut out = Vec::new();
    walk_stmts(block, &mut |s| {
        if let StmtKind::Call { name, .. } = &s.kind {
            out.push(name.clone());
        }
    });
    walk_exprs(block, &mut |e| {
        if let ExprKind::Call(name, _) = &e.kind {
            out.push(name.clone());
        }
    });
    out
}

pub fn has_calls(block: &[Stmt]) -> bool {
    !called_names(block).is_empty()
}

struct Inliner<'a> {
    funcs: HashMap<&'a str, &'a FuncDef>,
    names: NameGen,
}

fn stmt(kind: StmtKind, span: Span) -> Stmt {
    Stmt::new(kind, span)
}

fn goto(l: &str, span: Span) -> Stmt {
    stmt(StmtKind::Goto(l.to_string()), span)
}

fn label(l: &str, span: Span) -> Stmt {
    stmt(StmtKind::Label(l.to_string()), span)
}

/// `if (1) { ... }`, used to give desugared loops their own scope.
fn scoped(body: Block, span: Span) -> Stmt {
    stmt(
        StmtKind::If {
            cond: Expr::new(ExprKind::Lit(Literal::Int(1)), span),
            then_block: body,
            else_block: None,
        },
        span,
    )
}

fn exit_unless(cond: Expr, exit: &str, span: Span) -> Stmt {
    stmt(
        StmtKind::If {
            cond: Expr::new(ExprKind::Unary(UnaryOp::Not, Box::new(cond)), span),
            then_block: vec![goto(exit, span)],
            else_block: None,
        },
        span,
    )
}

impl<'a> Inliner<'a> {
    fn func(&self, name: &str, span: Span) -> Result<&'a FuncDef, FrontendError> {
        self.funcs
            .get(name)
            .copied()
            .ok_or_else(|| FrontendError::UnresolvedCall {
                span,
                name: name.to_string(),
            })
    }

    fn block(&mut self, b: &[Stmt]) -> Result<Block, FrontendError> {
        let mut out = Vec::with_capacity(b.len());
        for s in b {
            self.stmt(s, &mut out)?;
        }
        Ok(out)
    }

    fn hoist_lvalue(&mut self, lv: &LValue, pre: &mut Block) -> Result<LValue, FrontendError> {
        Ok(match lv {
            LValue::Var(n) => LValue::Var(n.clone()),
            LValue::Index(n, i) => LValue::Index(n.clone(), Box::new(self.hoist(i, pre)?)),
        })
    }

    fn stmt(&mut self, s: &Stmt, out: &mut Block) -> Result<(), FrontendError> {
        let span = s.span;
        match &s.kind {
            StmtKind::Decl(d) => {
                let init = match &d.init {
                    Some(e) => Some(self.hoist(e, out)?),
                    None => None,
                };
                out.push(stmt(
                    StmtKind::Decl(Decl {
                        init,
                        ..d.clone()
                    }),
                    span,
                ));
            }
            StmtKind::Assign { target, value } => {
                let target = self.hoist_lvalue(target, out)?;
                let value = self.hoist(value, out)?;
                out.push(stmt(StmtKind::Assign { target, value }, span));
            }
            StmtKind::AtomicAdd { target, value } => {
                let target = self.hoist_lvalue(target, out)?;
                let value = self.hoist(value, out)?;
                out.push(stmt(StmtKind::AtomicAdd { target, value }, span));
            }
            StmtKind::If {
                cond,
                then_block,
                else_block,
            } => {
                let cond = self.hoist(cond, out)?;
                let then_block = self.block(then_block)?;
                let else_block = match else_block {
                    Some(e) => Some(self.block(e)?),
                    None => None,
                };
                out.push(stmt(
                    StmtKind::If {
                        cond,
                        then_block,
                        else_block,
                    },
                    span,
                ));
            }
            StmtKind::While { cond, body } if cond.contains_call() => {
                let top = self.names.fresh("while_top");
                let exit = self.names.fresh("while_exit");
                let mut inner = vec![label(&top, span)];
                let c = self.hoist(cond, &mut inner)?;
                inner.push(exit_unless(c, &exit, span));
                inner.extend(self.block(body)?);
                inner.push(goto(&top, span));
                inner.push(label(&exit, span));
                out.push(scoped(inner, span));
            }
            StmtKind::While { cond, body } => {
                let body = self.block(body)?;
                out.push(stmt(
                    StmtKind::While {
                        cond: cond.clone(),
                        body,
                    },
                    span,
                ));
            }
            StmtKind::For {
                init,
                cond,
                step,
                body,
            } => {
                let step_has_call = step.as_ref().is_some_and(|s| has_calls(std::slice::from_ref(s.as_ref())));
                if cond.contains_call() || step_has_call {
                    let top = self.names.fresh("for_top");
                    let exit = self.names.fresh("for_exit");
                    let mut inner = Vec::new();
                    if let Some(i) = init {
                        self.stmt(i, &mut inner)?;
                    }
                    inner.push(label(&top, span));
                    let c = self.hoist(cond, &mut inner)?;
                    inner.push(exit_unless(c, &exit, span));
                    inner.extend(self.block(body)?);
                    if let Some(st) = step {
                        self.stmt(st, &mut inner)?;
                    }
                    inner.push(goto(&top, span));
                    inner.push(label(&exit, span));
                    out.push(scoped(inner, span));
                } else {
                    let init = match init {
                        Some(i) => {
                            let mut v = Vec::new();
                            self.stmt(i, &mut v)?;
                            let last = v.pop().expect("init statement");
                            out.extend(v);
                            Some(Box::new(last))
                        }
                        None => None,
                    };
                    let body = self.block(body)?;
                    out.push(stmt(
                        StmtKind::For {
                            init,
                            cond: cond.clone(),
                            step: step.clone(),
                            body,
                        },
                        span,
                    ));
                }
            }
            StmtKind::Call { name, args } => {
                self.expand(name, args, span, out)?;
            }
            StmtKind::Return(Some(e)) => {
                let e = self.hoist(e, out)?;
                out.push(stmt(StmtKind::Return(Some(e)), span));
            }
            _ => out.push(s.clone()),
        }
        Ok(())
    }

    /// Moves calls out of `e` into `pre`, returning the call-free expression.
    fn hoist(&mut self, e: &Expr, pre: &mut Block) -> Result<Expr, FrontendError> {
        if !e.contains_call() {
            return Ok(e.clone());
        }
        let span = e.span;
        let kind = match &e.kind {
            ExprKind::Call(name, args) => {
                let result = self.expand(name, args, span, pre)?;
                return result.ok_or_else(|| {
                    FrontendError::mismatch(span, format!("void function `{name}` used as a value"))
                });
            }
            ExprKind::Binary(op @ (BinaryOp::And | BinaryOp::Or), l, r) if r.contains_call() => {
                // Keep short-circuiting: the right operand runs only when needed.
                let l = self.hoist(l, pre)?;
                let t = self.names.fresh("cond");
                let zero = Expr::new(ExprKind::Lit(Literal::Int(0)), span);
                let truthy = |x: Expr| Expr::new(ExprKind::Binary(BinaryOp::Ne, Box::new(x), Box::new(zero.clone())), span);
                pre.push(stmt(
                    StmtKind::Decl(Decl {
                        name: t.clone(),
                        ty: Ty::Int,
                        storage: Storage::Local,
                        init: Some(truthy(l)),
                    }),
                    span,
                ));
                let mut rhs = Vec::new();
                let r = self.hoist(r, &mut rhs)?;
                rhs.push(stmt(
                    StmtKind::Assign {
                        target: LValue::Var(t.clone()),
                        value: truthy(r),
                    },
                    span,
                ));
                let tv = Expr::new(ExprKind::Var(t.clone()), span);
                let cond = if *op == BinaryOp::And {
                    tv.clone()
                } else {
                    Expr::new(ExprKind::Unary(UnaryOp::Not, Box::new(tv.clone())), span)
                };
                pre.push(stmt(
                    StmtKind::If {
                        cond,
                        then_block: rhs,
                        else_block: None,
                    },
                    span,
                ));
                return Ok(tv);
            }
            ExprKind::Binary(op, l, r) => {
                let l = self.hoist(l, pre)?;
                let r = self.hoist(r, pre)?;
                ExprKind::Binary(*op, Box::new(l), Box::new(r))
            }
            ExprKind::Unary(op, a) => ExprKind::Unary(*op, Box::new(self.hoist(a, pre)?)),
            ExprKind::Cast(t, a) => ExprKind::Cast(*t, Box::new(self.hoist(a, pre)?)),
            ExprKind::ShflXor(a, m) => ExprKind::ShflXor(Box::new(self.hoist(a, pre)?), *m),
            ExprKind::Index(n, i) => ExprKind::Index(n.clone(), Box::new(self.hoist(i, pre)?)),
            ExprKind::Intrinsic(i, args) => ExprKind::Intrinsic(
                *i,
                args.iter()
                    .map(|a| self.hoist(a, pre))
                    .collect::<Result<_, _>>()?,
            ),
            ExprKind::Lit(_) | ExprKind::Var(_) | ExprKind::Builtin(_) => unreachable!("no call"),
        };
        Ok(Expr::new(kind, span))
    }

    /// Splices the body of `name` into `out`; returns the result expression
    /// for non-void callees.
    fn expand(
        &mut self,
        name: &str,
        args: &[Expr],
        span: Span,
        out: &mut Block,
    ) -> Result<Option<Expr>, FrontendError> {
        let f = self.func(name, span)?;
        if f.params.len() != args.len() {
            return Err(FrontendError::mismatch(
                span,
                format!("`{name}` expects {} arguments, got {}", f.params.len(), args.len()),
            ));
        }
        let mut vars: HashMap<String, String> = HashMap::new();
        for (p, a) in f.params.iter().zip(args) {
            match p.ty {
                ParamTy::Array(_) => match &a.kind {
                    ExprKind::Var(arr) => {
                        vars.insert(p.name.clone(), arr.clone());
                    }
                    _ => {
                        return Err(FrontendError::mismatch(
                            a.span,
                            format!("argument for `{}` must name an array", p.name),
                        ))
                    }
                },
                ParamTy::Scalar(t) => {
                    let v = self.hoist(a, out)?;
                    let fresh = self.names.fresh(&format!("{name}_{}", p.name));
                    out.push(stmt(
                        StmtKind::Decl(Decl {
                            name: fresh.clone(),
                            ty: t,
                            storage: Storage::Local,
                            init: Some(v),
                        }),
                        span,
                    ));
                    vars.insert(p.name.clone(), fresh);
                }
            }
        }
        for local in declared_names(&f.body) {
            let fresh = self.names.fresh(&format!("{name}_{local}"));
            vars.insert(local, fresh);
        }
        let labels: HashMap<String, String> = label_names(&f.body)
            .into_iter()
            .map(|l| {
                let fresh = self.names.fresh(&format!("{name}_{l}"));
                (l, fresh)
            })
            .collect();
        let mut body = f.body.clone();
        rename_block(&mut body, &vars, &labels);

        let ret_var = match f.ret {
            RetTy::Value(t) => {
                let r = self.names.fresh(&format!("{name}_ret"));
                out.push(stmt(
                    StmtKind::Decl(Decl {
                        name: r.clone(),
                        ty: t,
                        storage: Storage::Local,
                        init: None,
                    }),
                    span,
                ));
                Some(r)
            }
            RetTy::Void => None,
        };
        let end = self.names.fresh(&format!("{name}_end"));
        let mut jumped = false;
        let body = lower_returns(body, ret_var.as_deref(), &end, true, &mut jumped);
        out.extend(self.block(&body)?);
        if jumped {
            out.push(label(&end, span));
        }
        Ok(ret_var.map(|r| Expr::new(ExprKind::Var(r), span)))
    }
}

/// Rewrites returns in an inlined body into result assignments and jumps.
fn lower_returns(block: Block, ret: Option<&str>, end: &str, top: bool, jumped: &mut bool) -> Block {
    let n = block.len();
    let mut out = Vec::with_capacity(n);
    for (i, s) in block.into_iter().enumerate() {
        let span = s.span;
        let last_at_top = top && i + 1 == n;
        match s.kind {
            StmtKind::Return(value) => {
                if let (Some(r), Some(v)) = (ret, value) {
                    out.push(stmt(
                        StmtKind::Assign {
                            target: LValue::Var(r.to_string()),
                            value: v,
                        },
                        span,
                    ));
                }
                if !last_at_top {
                    *jumped = true;
                    out.push(goto(end, span));
                }
            }
            StmtKind::If {
                cond,
                then_block,
                else_block,
            } => out.push(stmt(
                StmtKind::If {
                    cond,
                    then_block: lower_returns(then_block, ret, end, false, jumped),
                    else_block: else_block.map(|b| lower_returns(b, ret, end, false, jumped)),
                },
                span,
            )),
            StmtKind::For {
                init,
                cond,
                step,
                body,
            } => out.push(stmt(
                StmtKind::For {
                    init,
                    cond,
                    step,
                    body: lower_returns(body, ret, end, false, jumped),
                },
                span,
            )),
            StmtKind::While { cond, body } => out.push(stmt(
                StmtKind::While {
                    cond,
                    body: lower_returns(body, ret, end, false, jumped),
                },
                span,
            )),
            kind => out.push(stmt(kind, span)),
        }
    }
    out
}

/// Inlines every call in the kernel body. The result contains no calls.
pub fn inline_calls(k: &Kernel, funcs: &[FuncDef]) -> Result<Kernel, FrontendError> {
    check_acyclic(funcs)?;
    if !has_calls(&k.body) {
        return Ok(k.clone());
    }
    let mut names = NameGen::for_kernel(k);
    for f in funcs {
        names.reserve(&f.name);
    }
    let mut inl = Inliner {
        funcs: funcs.iter().map(|f| (f.name.as_str(), f)).collect(),
        names,
    };
    let body = inl.block(&k.body)?;
    Ok(Kernel {
        body,
        ..k.clone()
    })
}
