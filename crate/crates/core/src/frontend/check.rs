//! Name resolution and type checking.

use std::collections::{HashMap, HashSet};

use super::ast::*;
use super::error::FrontendError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Sym {
    Scalar(Ty),
    Array(Ty),
}

/// Result type of a binary operator, or a description of the mismatch.
pub fn binary_type(op: BinaryOp, l: Ty, r: Ty) -> Result<Ty, String> {
    if op.is_integral() && (l == Ty::Float || r == Ty::Float) {
        return Err(format!("operator `{}` requires int operands", op.symbol()));
    }
    if op.is_comparison() || op.is_logical() {
        return Ok(Ty::Int);
    }
    Ok(if l == Ty::Float || r == Ty::Float {
        Ty::Float
    } else {
        Ty::Int
    })
}

/// Operand type at which a binary operator evaluates (after promotion).
pub fn operand_type(op: BinaryOp, l: Ty, r: Ty) -> Ty {
    if op.is_logical() {
        return Ty::Int;
    }
    if l == Ty::Float || r == Ty::Float {
        Ty::Float
    } else {
        Ty::Int
    }
}

pub fn assignable(target: Ty, value: Ty) -> bool {
    target == value || (target == Ty::Float && value == Ty::Int)
}

struct Scopes<'a> {
    stack: Vec<HashMap<String, Sym>>,
    funcs: &'a HashMap<&'a str, &'a FuncDef>,
}

impl<'a> Scopes<'a> {
    fn lookup(&self, name: &str) -> Option<Sym> {
        self.stack.iter().rev().find_map(|s| s.get(name).copied())
    }

    fn declare(&mut self, name: &str, sym: Sym, span: Span) -> Result<(), FrontendError> {
        let top = self.stack.last_mut().expect("scope");
        if top.insert(name.to_string(), sym).is_some() {
            return Err(FrontendError::Redeclared {
                span,
                name: name.to_string(),
            });
        }
        Ok(())
    }

    fn expr(&self, e: &Expr) -> Result<Ty, FrontendError> {
        match &e.kind {
            ExprKind::Lit(l) => Ok(l.ty()),
            ExprKind::Var(n) => match self.lookup(n) {
                Some(Sym::Scalar(t)) => Ok(t),
                Some(Sym::Array(_)) => Err(FrontendError::mismatch(
                    e.span,
                    format!("array `{n}` used as a scalar"),
                )),
                None => Err(FrontendError::UnknownIdentifier {
                    span: e.span,
                    name: n.clone(),
                }),
            },
            ExprKind::Builtin(_) => Ok(Ty::Int),
            ExprKind::Unary(op, a) => {
                let t = self.expr(a)?;
                match op {
                    UnaryOp::Neg => Ok(t),
                    UnaryOp::Not => Ok(Ty::Int),
                    UnaryOp::BitNot if t == Ty::Int => Ok(Ty::Int),
                    UnaryOp::BitNot => Err(FrontendError::mismatch(
                        e.span,
                        "operator `~` requires an int operand",
                    )),
                }
            }
            ExprKind::Binary(op, l, r) => {
                let (lt, rt) = (self.expr(l)?, self.expr(r)?);
                binary_type(*op, lt, rt).map_err(|m| FrontendError::mismatch(e.span, m))
            }
            ExprKind::Index(n, idx) => {
                let t = match self.lookup(n) {
                    Some(Sym::Array(t)) => t,
                    Some(Sym::Scalar(_)) => {
                        return Err(FrontendError::mismatch(
                            e.span,
                            format!("scalar `{n}` cannot be indexed"),
                        ))
                    }
                    None => {
                        return Err(FrontendError::UnknownIdentifier {
                            span: e.span,
                            name: n.clone(),
                        })
                    }
                };
                self.index(idx)?;
                Ok(t)
            }
            ExprKind::Cast(t, a) => {
                self.expr(a)?;
                Ok(*t)
            }
            ExprKind::Intrinsic(i, args) => {
                let ts = args
                    .iter()
                    .map(|a| self.expr(a))
                    .collect::<Result<Vec<_>, _>>()?;
                Ok(match i {
                    Intrinsic::Fmaxf => Ty::Float,
                    _ if ts.contains(&Ty::Float) => Ty::Float,
                    _ => Ty::Int,
                })
            }
            ExprKind::ShflXor(v, _) => self.expr(v),
            ExprKind::Call(name, args) => match self.call(name, args, e.span)? {
                RetTy::Value(t) => Ok(t),
                RetTy::Void => Err(FrontendError::mismatch(
                    e.span,
                    format!("void function `{name}` used as a value"),
                )),
            },
        }
    }

    fn index(&self, idx: &Expr) -> Result<(), FrontendError> {
        if self.expr(idx)? != Ty::Int {
            return Err(FrontendError::mismatch(idx.span, "array index must be int"));
        }
        Ok(())
    }

    fn call(&self, name: &str, args: &[Expr], span: Span) -> Result<RetTy, FrontendError> {
        let f = self
            .funcs
            .get(name)
            .ok_or_else(|| FrontendError::UnresolvedCall {
                span,
                name: name.to_string(),
            })?;
        if f.params.len() != args.len() {
            return Err(FrontendError::mismatch(
                span,
                format!(
                    "`{name}` expects {} arguments, got {}",
                    f.params.len(),
                    args.len()
                ),
            ));
        }
        for (p, a) in f.params.iter().zip(args) {
            match p.ty {
                ParamTy::Array(t) => {
                    let ok = matches!(&a.kind, ExprKind::Var(n) if self.lookup(n) == Some(Sym::Array(t)));
                    if !ok {
                        return Err(FrontendError::mismatch(
                            a.span,
                            format!("argument for `{}` must be a {t} array", p.name),
                        ));
                    }
                }
                ParamTy::Scalar(t) => {
                    let at = self.expr(a)?;
                    if !assignable(t, at) {
                        return Err(FrontendError::mismatch(
                            a.span,
                            format!("cannot pass {at} as {t} parameter `{}`", p.name),
                        ));
                    }
                }
            }
        }
        Ok(f.ret)
    }

    fn lvalue(&self, lv: &LValue, span: Span) -> Result<Ty, FrontendError> {
        match lv {
            LValue::Var(n) => match self.lookup(n) {
                Some(Sym::Scalar(t)) => Ok(t),
                Some(Sym::Array(_)) => Err(FrontendError::mismatch(
                    span,
                    format!("array `{n}` used as a scalar"),
                )),
                None => Err(FrontendError::UnknownIdentifier {
                    span,
                    name: n.clone(),
                }),
            },
            LValue::Index(n, idx) => {
                let t = match self.lookup(n) {
                    Some(Sym::Array(t)) => t,
                    Some(Sym::Scalar(_)) => {
                        return Err(FrontendError::mismatch(
                            span,
                            format!("scalar `{n}` cannot be indexed"),
                        ))
                    }
                    None => {
                        return Err(FrontendError::UnknownIdentifier {
                            span,
                            name: n.clone(),
                        })
                    }
                };
                self.index(idx)?;
                Ok(t)
            }
        }
    }
}

struct BodyCtx {
    ret: Option<RetTy>,
    in_function: bool,
}

fn check_block(sc: &mut Scopes, block: &[Stmt], ctx: &BodyCtx, new_scope: bool) -> Result<(), FrontendError> {
    if new_scope {
        sc.stack.push(HashMap::new());
    }
    for s in block {
        check_stmt(sc, s, ctx)?;
    }
    if new_scope {
        sc.stack.pop();
    }
    Ok(())
}

fn check_stmt(sc: &mut Scopes, s: &Stmt, ctx: &BodyCtx) -> Result<(), FrontendError> {
    match &s.kind {
        StmtKind::Decl(d) => {
            if let Some(init) = &d.init {
                let t = sc.expr(init)?;
                if !assignable(d.ty, t) {
                    return Err(FrontendError::mismatch(
                        init.span,
                        format!("cannot initialize {} `{}` with {t}", d.ty, d.name),
                    ));
                }
            }
            let sym = match d.storage {
                Storage::Local => Sym::Scalar(d.ty),
                Storage::Shared { .. } => {
                    if ctx.in_function {
                        return Err(FrontendError::Invalid {
                            span: s.span,
                            message: "shared arrays may only be declared in kernels".into(),
                        });
                    }
                    Sym::Array(d.ty)
                }
            };
            sc.declare(&d.name, sym, s.span)
        }
        StmtKind::Assign { target, value } => {
            let tt = sc.lvalue(target, s.span)?;
            let vt = sc.expr(value)?;
            if !assignable(tt, vt) {
                return Err(FrontendError::mismatch(
                    value.span,
                    format!("cannot assign {vt} to {tt} `{}`", target.name()),
                ));
            }
            Ok(())
        }
        StmtKind::AtomicAdd { target, value } => {
            if matches!(target, LValue::Var(_)) {
                return Err(FrontendError::mismatch(
                    s.span,
                    "atomic_add target must be an array element",
                ));
            }
            let tt = sc.lvalue(target, s.span)?;
            let vt = sc.expr(value)?;
            if !assignable(tt, vt) {
                return Err(FrontendError::mismatch(
                    value.span,
                    format!("cannot atomically add {vt} to {tt} element"),
                ));
            }
            Ok(())
        }
        StmtKind::If {
            cond,
            then_block,
            else_block,
        } => {
            sc.expr(cond)?;
            check_block(sc, then_block, ctx, true)?;
            if let Some(e) = else_block {
                check_block(sc, e, ctx, true)?;
            }
            Ok(())
        }
        StmtKind::For {
            init,
            cond,
            step,
            body,
        } => {
            sc.stack.push(HashMap::new());
            if let Some(i) = init {
                check_stmt(sc, i, ctx)?;
            }
            sc.expr(cond)?;
            if let Some(st) = step {
                if matches!(st.kind, StmtKind::Decl(_)) {
                    return Err(FrontendError::Invalid {
                        span: st.span,
                        message: "a declaration cannot be a loop step".into(),
                    });
                }
                check_stmt(sc, st, ctx)?;
            }
            check_block(sc, body, ctx, true)?;
            sc.stack.pop();
            Ok(())
        }
        StmtKind::While { cond, body } => {
            sc.expr(cond)?;
            check_block(sc, body, ctx, true)
        }
        StmtKind::Barrier | StmtKind::Label(_) | StmtKind::Goto(_) => Ok(()),
        StmtKind::PartialBarrier { id, .. } => {
            if *id > 15 {
                return Err(FrontendError::Invalid {
                    span: s.span,
                    message: format!("barrier id {id} is outside 0..=15"),
                });
            }
            Ok(())
        }
        StmtKind::Return(value) => match (ctx.ret, value) {
            (None, None) | (Some(RetTy::Void), None) => Ok(()),
            (None, Some(v)) | (Some(RetTy::Void), Some(v)) => Err(FrontendError::mismatch(
                v.span,
                "cannot return a value here",
            )),
            (Some(RetTy::Value(t)), None) => Err(FrontendError::mismatch(
                s.span,
                format!("missing {t} return value"),
            )),
            (Some(RetTy::Value(t)), Some(v)) => {
                let vt = sc.expr(v)?;
                if !assignable(t, vt) {
                    return Err(FrontendError::mismatch(
                        v.span,
                        format!("cannot return {vt} from a function returning {t}"),
                    ));
                }
                Ok(())
            }
        },
        StmtKind::Call { name, args } => sc.call(name, args, s.span).map(|_| ()),
    }
}

/// Labels must be unique and every goto must name one of them.
pub fn check_labels(body: &[Stmt]) -> Result<(), FrontendError> {
    let mut labels = HashSet::new();
    let mut err = None;
    walk_stmts(body, &mut |s| {
        if let StmtKind::Label(l) = &s.kind {
            if !labels.insert(l.clone()) && err.is_none() {
                err = Some(FrontendError::DuplicateLabel {
                    span: s.span,
                    label: l.clone(),
                });
            }
        }
    });
    if let Some(e) = err {
        return Err(e);
    }
    walk_stmts(body, &mut |s| {
        if let StmtKind::Goto(l) = &s.kind {
            if !labels.contains(l) && err.is_none() {
                err = Some(FrontendError::UndefinedLabel {
                    span: s.span,
                    label: l.clone(),
                });
            }
        }
    });
    err.map_or(Ok(()), Err)
}

fn param_scope(params: &[Param]) -> Result<HashMap<String, Sym>, FrontendError> {
    let mut scope = HashMap::new();
    for p in params {
        let sym = match p.ty {
            ParamTy::Scalar(t) => Sym::Scalar(t),
            ParamTy::Array(t) => Sym::Array(t),
        };
        if scope.insert(p.name.clone(), sym).is_some() {
            return Err(FrontendError::Redeclared {
                span: p.span,
                name: p.name.clone(),
            });
        }
        if let (ParamTy::Scalar(t), Some(d)) = (p.ty, p.default) {
            if !assignable(t, d.ty()) {
                return Err(FrontendError::mismatch(
                    p.span,
                    format!("default for {t} parameter `{}` has type {}", p.name, d.ty()),
                ));
            }
        }
    }
    Ok(scope)
}

/// Checks a kernel against the given helper functions.
pub fn check_kernel(k: &Kernel, funcs: &[FuncDef]) -> Result<(), FrontendError> {
    let fmap: HashMap<&str, &FuncDef> = funcs.iter().map(|f| (f.name.as_str(), f)).collect();
    let mut sc = Scopes {
        stack: vec![param_scope(&k.params)?],
        funcs: &fmap,
    };
    check_labels(&k.body)?;
    let ctx = BodyCtx {
        ret: None,
        in_function: false,
    };
    check_block(&mut sc, &k.body, &ctx, false)
}

fn check_function(f: &FuncDef, fmap: &HashMap<&str, &FuncDef>) -> Result<(), FrontendError> {
    let mut sc = Scopes {
        stack: vec![param_scope(&f.params)?],
        funcs: fmap,
    };
    check_labels(&f.body)?;
    let ctx = BodyCtx {
        ret: Some(f.ret),
        in_function: true,
    };
    check_block(&mut sc, &f.body, &ctx, false)
}

/// Checks a whole program: distinct top-level names, then every body.
pub fn check_program(p: &Program) -> Result<(), FrontendError> {
    let mut seen = HashSet::new();
    for (name, span) in p
        .functions
        .iter()
        .map(|f| (&f.name, f.span))
        .chain(p.kernels.iter().map(|k| (&k.name, k.span)))
    {
        if !seen.insert(name.as_str()) {
            return Err(FrontendError::DuplicateDefinition {
                span,
                name: name.clone(),
            });
        }
    }
    let fmap: HashMap<&str, &FuncDef> = p.functions.iter().map(|f| (f.name.as_str(), f)).collect();
    for f in &p.functions {
        check_function(f, &fmap)?;
    }
    for k in &p.kernels {
        check_kernel(k, &p.functions)?;
    }
    Ok(())
}
