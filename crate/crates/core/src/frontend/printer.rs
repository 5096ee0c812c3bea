//! Source printing in two dialects: Mini-Kernel (reparseable) and CUDA-flavored text.

use std::fmt::Write;

use super::ast::*;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dialect {
    MiniKernel,
    Cuda,
}

pub struct Printer {
    pub out: String,
    pub dialect: Dialect,
    indent: usize,
}

const UNARY_PREC: u8 = 11;

impl Printer {
    pub fn new(dialect: Dialect) -> Self {
        Printer {
            out: String::new(),
            dialect,
            indent: 0,
        }
    }

    pub fn line(&mut self, text: &str) {
        for _ in 0..self.indent {
            self.out.push_str("    ");
        }
        self.out.push_str(text);
        self.out.push('\n');
    }

    /// A line at one indentation level less than the current one.
    pub fn outdented_line(&mut self, text: &str) {
        self.indent = self.indent.saturating_sub(1);
        self.line(text);
        self.indent += 1;
    }

    pub fn indented(&mut self, f: impl FnOnce(&mut Self)) {
        self.indent += 1;
        f(self);
        self.indent -= 1;
    }

    pub fn literal(&self, l: Literal) -> String {
        match l {
            Literal::Int(v) if v == i32::MIN => "(-2147483647 - 1)".to_string(),
            Literal::Int(v) if v < 0 => format!("(-{})", -v),
            Literal::Int(v) => v.to_string(),
            Literal::Float(v) => {
                let s = if v < 0.0 {
                    format!("(-{:?})", -v)
                } else {
                    format!("{v:?}")
                };
                match self.dialect {
                    Dialect::MiniKernel => s,
                    Dialect::Cuda if s.ends_with(')') => format!("{}f)", &s[..s.len() - 1]),
                    Dialect::Cuda => format!("{s}f"),
                }
            }
        }
    }

    pub fn expr(&self, e: &Expr) -> String {
        let mut s = String::new();
        self.expr_into(e, 0, &mut s);
        s
    }

    fn expr_into(&self, e: &Expr, min_prec: u8, out: &mut String) {
        match &e.kind {
            ExprKind::Lit(l) => out.push_str(&self.literal(*l)),
            ExprKind::Var(n) => out.push_str(n),
            ExprKind::Builtin(b) => out.push_str(&b.source_name()),
            ExprKind::Unary(op, a) => {
                out.push(match op {
                    UnaryOp::Neg => '-',
                    UnaryOp::Not => '!',
                    UnaryOp::BitNot => '~',
                });
                self.expr_into(a, UNARY_PREC, out);
            }
            ExprKind::Cast(t, a) => {
                let _ = write!(out, "({t})");
                self.expr_into(a, UNARY_PREC, out);
            }
            ExprKind::Binary(op, l, r) => {
                let p = op.precedence();
                let paren = p < min_prec;
                if paren {
                    out.push('(');
                }
                self.expr_into(l, p, out);
                let _ = write!(out, " {} ", op.symbol());
                self.expr_into(r, p + 1, out);
                if paren {
                    out.push(')');
                }
            }
            ExprKind::Index(n, i) => {
                let _ = write!(out, "{n}[");
                self.expr_into(i, 0, out);
                out.push(']');
            }
            ExprKind::Intrinsic(i, args) => self.call_into(i.name(), args, out),
            ExprKind::Call(n, args) => self.call_into(n, args, out),
            ExprKind::ShflXor(v, m) => {
                match self.dialect {
                    Dialect::MiniKernel => out.push_str("warp_shfl_xor("),
                    Dialect::Cuda => out.push_str("__shfl_xor_sync(0xffffffff, "),
                }
                self.expr_into(v, 0, out);
                let _ = write!(out, ", {m})");
            }
        }
    }

    fn call_into(&self, name: &str, args: &[Expr], out: &mut String) {
        out.push_str(name);
        out.push('(');
        for (i, a) in args.iter().enumerate() {
            if i > 0 {
                out.push_str(", ");
            }
            self.expr_into(a, 0, out);
        }
        out.push(')');
    }

    pub fn lvalue(&self, lv: &LValue) -> String {
        match lv {
            LValue::Var(n) => n.clone(),
            LValue::Index(n, i) => format!("{n}[{}]", self.expr(i)),
        }
    }

    pub fn decl(&self, d: &Decl) -> String {
        match d.storage {
            Storage::Shared { len } => match self.dialect {
                Dialect::MiniKernel => format!("shared {} {}[{len}]", d.ty, d.name),
                Dialect::Cuda => format!("__shared__ {} {}[{len}]", d.ty, d.name),
            },
            Storage::Local => match &d.init {
                Some(e) => format!("{} {} = {}", d.ty, d.name, self.expr(e)),
                None => format!("{} {}", d.ty, d.name),
            },
        }
    }

    /// A statement usable in a `for` header (no trailing semicolon).
    fn simple(&self, s: &Stmt) -> String {
        match &s.kind {
            StmtKind::Decl(d) => self.decl(d),
            StmtKind::Assign { target, value } => {
                format!("{} = {}", self.lvalue(target), self.expr(value))
            }
            _ => {
                let mut p = Printer::new(self.dialect);
                p.stmt(s);
                p.out.trim().trim_end_matches(';').to_string()
            }
        }
    }

    pub fn block_body(&mut self, b: &[Stmt]) {
        self.indented(|p| {
            for s in b {
                p.stmt(s);
            }
        });
    }

    pub fn stmt(&mut self, s: &Stmt) {
        match &s.kind {
            StmtKind::Decl(d) => {
                let t = self.decl(d);
                self.line(&format!("{t};"));
            }
            StmtKind::Assign { target, value } => {
                let t = format!("{} = {};", self.lvalue(target), self.expr(value));
                self.line(&t);
            }
            StmtKind::If {
                cond,
                then_block,
                else_block,
            } => {
                let t = format!("if ({}) {{", self.expr(cond));
                self.line(&t);
                self.block_body(then_block);
                if let Some(e) = else_block {
                    self.line("} else {");
                    self.block_body(e);
                }
                self.line("}");
            }
            StmtKind::For {
                init,
                cond,
                step,
                body,
            } => {
                let i = init.as_ref().map(|s| self.simple(s)).unwrap_or_default();
                let st = step.as_ref().map(|s| self.simple(s)).unwrap_or_default();
                let t = format!("for ({i}; {}; {st}) {{", self.expr(cond));
                self.line(&t);
                self.block_body(body);
                self.line("}");
            }
            StmtKind::While { cond, body } => {
                let t = format!("while ({}) {{", self.expr(cond));
                self.line(&t);
                self.block_body(body);
                self.line("}");
            }
            StmtKind::Barrier => match self.dialect {
                Dialect::MiniKernel => self.line("syncthreads();"),
                Dialect::Cuda => self.line("__syncthreads();"),
            },
            StmtKind::PartialBarrier { id, count } => match self.dialect {
                Dialect::MiniKernel => self.line(&format!("bar_sync({id}, {count});")),
                Dialect::Cuda => self.line(&format!("asm(\"bar.sync {id}, {count};\");")),
            },
            StmtKind::AtomicAdd { target, value } => {
                let t = match self.dialect {
                    Dialect::MiniKernel => {
                        format!("atomic_add({}, {});", self.lvalue(target), self.expr(value))
                    }
                    Dialect::Cuda => {
                        format!("atomicAdd(&{}, {});", self.lvalue(target), self.expr(value))
                    }
                };
                self.line(&t);
            }
            StmtKind::Return(None) => self.line("return;"),
            StmtKind::Return(Some(e)) => {
                let t = format!("return {};", self.expr(e));
                self.line(&t);
            }
            StmtKind::Call { name, args } => {
                let mut t = String::new();
                self.call_into(name, args, &mut t);
                self.line(&format!("{t};"));
            }
            StmtKind::Label(l) => self.outdented_line(&format!("{l}:")),
            StmtKind::Goto(l) => self.line(&format!("goto {l};")),
        }
    }

    pub fn param(&self, p: &Param) -> String {
        match (self.dialect, p.ty) {
            (Dialect::MiniKernel, ParamTy::Array(t)) => match p.len {
                Some(n) => format!("{t} {}[{n}]", p.name),
                None => format!("{t} {}[]", p.name),
            },
            (Dialect::MiniKernel, ParamTy::Scalar(t)) => match p.default {
                Some(d) => {
                    let lit = match d {
                        Literal::Int(v) => v.to_string(),
                        Literal::Float(v) => format!("{v:?}"),
                    };
                    format!("{t} {} = {lit}", p.name)
                }
                None => format!("{t} {}", p.name),
            },
            (Dialect::Cuda, ParamTy::Array(t)) => format!("{t}* {}", p.name),
            (Dialect::Cuda, ParamTy::Scalar(t)) => format!("{t} {}", p.name),
        }
    }

    pub fn params(&self, ps: &[Param]) -> String {
        ps.iter().map(|p| self.param(p)).collect::<Vec<_>>().join(", ")
    }

    pub fn kernel(&mut self, k: &Kernel) {
        let mut head = match self.dialect {
            Dialect::MiniKernel => format!(
                "kernel {}({}) dims({}, {}, {})",
                k.name,
                self.params(&k.params),
                k.block_dims.x,
                k.block_dims.y,
                k.block_dims.z
            ),
            Dialect::Cuda => format!("__global__ void {}({})", k.name, self.params(&k.params)),
        };
        if self.dialect == Dialect::MiniKernel {
            if !k.tunable {
                head.push_str(" fixed");
            }
            if k.grid_dim != 1 {
                let _ = write!(head, " grid({})", k.grid_dim);
            }
            if let Some(r) = k.regs {
                let _ = write!(head, " regs({r})");
            }
        }
        head.push_str(" {");
        self.line(&head);
        self.block_body(&k.body);
        self.line("}");
    }

    pub fn function(&mut self, f: &FuncDef) {
        let ret = match f.ret {
            RetTy::Void => "void",
            RetTy::Value(t) => t.keyword(),
        };
        let prefix = if self.dialect == Dialect::Cuda {
            "__device__ "
        } else {
            ""
        };
        let t = format!("{prefix}{ret} {}({}) {{", f.name, self.params(&f.params));
        self.line(&t);
        self.block_body(&f.body);
        self.line("}");
    }
}

/// Prints a whole program in Mini-Kernel syntax.
pub fn print_program(p: &Program) -> String {
    let mut pr = Printer::new(Dialect::MiniKernel);
    let mut first = true;
    for f in &p.functions {
        if !first {
            pr.out.push('\n');
        }
        first = false;
        pr.function(f);
    }
    for k in &p.kernels {
        if !first {
            pr.out.push('\n');
        }
        first = false;
        pr.kernel(k);
    }
    pr.out
}

pub fn print_kernel(k: &Kernel) -> String {
    let mut pr = Printer::new(Dialect::MiniKernel);
    pr.kernel(k);
    pr.out
}

pub fn print_expr(e: &Expr) -> String {
    Printer::new(Dialect::MiniKernel).expr(e)
}
