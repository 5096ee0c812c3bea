//! Recursive-descent parser for Mini-Kernel.

use super::ast::*;
use super::error::FrontendError;
use super::lexer::{tokenize, Tok, Token};

/// Words that can never be used as identifiers.
pub const RESERVED: &[&str] = &[
    "kernel",
    "int",
    "float",
    "void",
    "shared",
    "if",
    "else",
    "for",
    "while",
    "syncthreads",
    "bar_sync",
    "atomic_add",
    "goto",
    "return",
    "warp_shfl_xor",
    "threadIdx",
    "blockIdx",
    "blockDim",
    "gridDim",
    "min",
    "max",
    "fmaxf",
];

/// Block dimensions assumed when a kernel omits `dims(...)`.
pub const DEFAULT_DIMS: Dims = Dims::linear(32);

pub struct Parser {
    toks: Vec<Token>,
    pos: usize,
}

type PResult<T> = Result<T, FrontendError>;

impl Parser {
    pub fn new(src: &str) -> PResult<Self> {
        Ok(Parser {
            toks: tokenize(src)?,
            pos: 0,
        })
    }

    fn peek(&self) -> &Tok {
        &self.toks[self.pos].tok
    }

    fn peek_at(&self, n: usize) -> &Tok {
        let i = (self.pos + n).min(self.toks.len() - 1);
        &self.toks[i].tok
    }

    fn span(&self) -> Span {
        self.toks[self.pos].span
    }

    fn advance(&mut self) -> Token {
        let t = self.toks[self.pos].clone();
        if self.pos + 1 < self.toks.len() {
            self.pos += 1;
        }
        t
    }

    fn error<T>(&self, expected: &[&str]) -> PResult<T> {
        Err(FrontendError::Syntax {
            span: self.span(),
            expected: expected.iter().map(|s| s.to_string()).collect(),
            found: self.peek().describe(),
        })
    }

    fn is_punct(&self, p: &str) -> bool {
        matches!(self.peek(), Tok::Punct(q) if *q == p)
    }

    fn is_word(&self, w: &str) -> bool {
        matches!(self.peek(), Tok::Ident(s) if s == w)
    }

    fn eat_punct(&mut self, p: &str) -> bool {
        if self.is_punct(p) {
            self.advance();
            true
        } else {
            false
        }
    }

    fn eat_word(&mut self, w: &str) -> bool {
        if self.is_word(w) {
            self.advance();
            true
        } else {
            false
        }
    }

    fn expect_punct(&mut self, p: &str) -> PResult<Span> {
        if self.is_punct(p) {
            Ok(self.advance().span)
        } else {
            self.error(&[&format!("`{p}`")])
        }
    }

    fn expect_word(&mut self, w: &str) -> PResult<Span> {
        if self.is_word(w) {
            Ok(self.advance().span)
        } else {
            self.error(&[&format!("`{w}`")])
        }
    }

    fn ident(&mut self) -> PResult<(String, Span)> {
        match self.peek().clone() {
            Tok::Ident(s) if !RESERVED.contains(&s.as_str()) => {
                let span = self.advance().span;
                Ok((s, span))
            }
            _ => self.error(&["an identifier"]),
        }
    }

    fn int_lit(&mut self) -> PResult<u32> {
        match *self.peek() {
            Tok::Int(v) if v <= u32::MAX as i64 => {
                self.advance();
                Ok(v as u32)
            }
            _ => self.error(&["an integer constant"]),
        }
    }

    fn positive(&mut self) -> PResult<u32> {
        let span = self.span();
        let v = self.int_lit()?;
        if v == 0 {
            return Err(FrontendError::Invalid {
                span,
                message: "expected a positive integer".into(),
            });
        }
        Ok(v)
    }

    pub fn program(&mut self) -> PResult<Program> {
        let mut prog = Program::default();
        loop {
            match self.peek() {
                Tok::Eof => return Ok(prog),
                Tok::Ident(w) if w == "kernel" => prog.kernels.push(self.kernel()?),
                Tok::Ident(w) if w == "int" || w == "float" || w == "void" => {
                    prog.functions.push(self.funcdef()?)
                }
                _ => return self.error(&["`kernel`", "a function definition"]),
            }
        }
    }

    fn kernel(&mut self) -> PResult<Kernel> {
        let span = self.expect_word("kernel")?;
        let (name, _) = self.ident()?;
        let params = self.params()?;
        let mut k = Kernel {
            name,
            params,
            block_dims: DEFAULT_DIMS,
            grid_dim: 1,
            tunable: true,
            regs: None,
            body: Vec::new(),
            span,
        };
        if self.eat_word("dims") {
            self.expect_punct("(")?;
            let x = self.positive()?;
            self.expect_punct(",")?;
            let y = self.positive()?;
            self.expect_punct(",")?;
            let z = self.positive()?;
            self.expect_punct(")")?;
            k.block_dims = Dims::new(x, y, z);
        }
        loop {
            if self.eat_word("fixed") {
                k.tunable = false;
            } else if self.eat_word("grid") {
                self.expect_punct("(")?;
                k.grid_dim = self.positive()?;
                self.expect_punct(")")?;
            } else if self.eat_word("regs") {
                self.expect_punct("(")?;
                k.regs = Some(self.positive()?);
                self.expect_punct(")")?;
            } else {
                break;
            }
        }
        if !self.is_punct("{") {
            return self.error(&["`fixed`", "`grid`", "`regs`", "`{`"]);
        }
        k.body = self.block()?;
        Ok(k)
    }

    fn funcdef(&mut self) -> PResult<FuncDef> {
        let span = self.span();
        let ret = match self.advance().tok {
            Tok::Ident(w) if w == "int" => RetTy::Value(Ty::Int),
            Tok::Ident(w) if w == "float" => RetTy::Value(Ty::Float),
            _ => RetTy::Void,
        };
        let (name, _) = self.ident()?;
        let params = self.params()?;
        let body = self.block()?;
        Ok(FuncDef {
            name,
            ret,
            params,
            body,
            span,
        })
    }

    fn scalar_ty(&mut self) -> PResult<Ty> {
        if self.eat_word("int") {
            Ok(Ty::Int)
        } else if self.eat_word("float") {
            Ok(Ty::Float)
        } else {
            self.error(&["`int`", "`float`"])
        }
    }

    fn params(&mut self) -> PResult<Vec<Param>> {
        self.expect_punct("(")?;
        let mut out = Vec::new();
        if self.eat_punct(")") {
            return Ok(out);
        }
        loop {
            let span = self.span();
            let ty = self.scalar_ty()?;
            let (name, _) = self.ident()?;
            let mut p = Param {
                name,
                ty: ParamTy::Scalar(ty),
                len: None,
                default: None,
                span,
            };
            if self.eat_punct("[") {
                p.ty = ParamTy::Array(ty);
                if !self.is_punct("]") {
                    p.len = Some(self.positive()?);
                }
                self.expect_punct("]")?;
            } else if self.eat_punct("=") {
                let neg = self.eat_punct("-");
                let lit = match *self.peek() {
                    Tok::Int(v) => Literal::Int(if neg { (-v) as i32 } else { v as i32 }),
                    Tok::Float(v) => Literal::Float(if neg { -v } else { v }),
                    _ => return self.error(&["a literal"]),
                };
                self.advance();
                p.default = Some(lit);
            }
            out.push(p);
            if self.eat_punct(")") {
                return Ok(out);
            }
            self.expect_punct(",")?;
        }
    }

    fn block(&mut self) -> PResult<Block> {
        self.expect_punct("{")?;
        let mut out = Vec::new();
        while !self.eat_punct("}") {
            if matches!(self.peek(), Tok::Eof) {
                return self.error(&["`}`"]);
            }
            out.push(self.stmt()?);
        }
        Ok(out)
    }

    fn local_decl(&mut self) -> PResult<Stmt> {
        let span = self.span();
        let ty = self.scalar_ty()?;
        let (name, _) = self.ident()?;
        let init = if self.eat_punct("=") {
            Some(self.expr()?)
        } else {
            None
        };
        Ok(Stmt::new(
            StmtKind::Decl(Decl {
                name,
                ty,
                storage: Storage::Local,
                init,
            }),
            span,
        ))
    }

    fn lvalue(&mut self) -> PResult<LValue> {
        let (name, _) = self.ident()?;
        if self.eat_punct("[") {
            let idx = self.expr()?;
            self.expect_punct("]")?;
            Ok(LValue::Index(name, Box::new(idx)))
        } else {
            Ok(LValue::Var(name))
        }
    }

    fn assign(&mut self) -> PResult<Stmt> {
        let span = self.span();
        let target = self.lvalue()?;
        self.expect_punct("=")?;
        let value = self.expr()?;
        Ok(Stmt::new(StmtKind::Assign { target, value }, span))
    }

    /// `for` header statement: a declaration or an assignment.
    fn simple_stmt(&mut self) -> PResult<Option<Box<Stmt>>> {
        if self.is_punct(";") || self.is_punct(")") {
            return Ok(None);
        }
        let s = if self.is_word("int") || self.is_word("float") {
            self.local_decl()?
        } else {
            self.assign()?
        };
        Ok(Some(Box::new(s)))
    }

    fn stmt(&mut self) -> PResult<Stmt> {
        let span = self.span();
        let word = match self.peek() {
            Tok::Ident(w) => w.clone(),
            _ => return self.error(&["a statement"]),
        };
        match word.as_str() {
            "int" | "float" => {
                let s = self.local_decl()?;
                self.expect_punct(";")?;
                Ok(s)
            }
            "shared" => {
                self.advance();
                let ty = self.scalar_ty()?;
                let (name, _) = self.ident()?;
                self.expect_punct("[")?;
                let len = self.positive()?;
                self.expect_punct("]")?;
                self.expect_punct(";")?;
                Ok(Stmt::new(
                    StmtKind::Decl(Decl {
                        name,
                        ty,
                        storage: Storage::Shared { len },
                        init: None,
                    }),
                    span,
                ))
            }
            "if" => {
                self.advance();
                self.expect_punct("(")?;
                let cond = self.expr()?;
                self.expect_punct(")")?;
                let then_block = self.block()?;
                let else_block = if self.eat_word("else") {
                    Some(self.block()?)
                } else {
                    None
                };
                Ok(Stmt::new(
                    StmtKind::If {
                        cond,
                        then_block,
                        else_block,
                    },
                    span,
                ))
            }
            "for" => {
                self.advance();
                self.expect_punct("(")?;
                let init = self.simple_stmt()?;
                self.expect_punct(";")?;
                let cond = self.expr()?;
                self.expect_punct(";")?;
                let step = self.simple_stmt()?;
                self.expect_punct(")")?;
                let body = self.block()?;
                Ok(Stmt::new(
                    StmtKind::For {
                        init,
                        cond,
                        step,
                        body,
                    },
                    span,
                ))
            }
            "while" => {
                self.advance();
                self.expect_punct("(")?;
                let cond = self.expr()?;
                self.expect_punct(")")?;
                let body = self.block()?;
                Ok(Stmt::new(StmtKind::While { cond, body }, span))
            }
            "syncthreads" => {
                self.advance();
                self.expect_punct("(")?;
                self.expect_punct(")")?;
                self.expect_punct(";")?;
                Ok(Stmt::new(StmtKind::Barrier, span))
            }
            "bar_sync" => {
                self.advance();
                self.expect_punct("(")?;
                let id = self.int_lit()?;
                self.expect_punct(",")?;
                let count = self.positive()?;
                self.expect_punct(")")?;
                self.expect_punct(";")?;
                if id > 15 {
                    return Err(FrontendError::Invalid {
                        span,
                        message: format!("barrier id {id} is outside 0..=15"),
                    });
                }
                Ok(Stmt::new(StmtKind::PartialBarrier { id, count }, span))
            }
            "atomic_add" => {
                self.advance();
                self.expect_punct("(")?;
                let target = self.lvalue()?;
                self.expect_punct(",")?;
                let value = self.expr()?;
                self.expect_punct(")")?;
                self.expect_punct(";")?;
                Ok(Stmt::new(StmtKind::AtomicAdd { target, value }, span))
            }
            "goto" => {
                self.advance();
                let (label, _) = self.ident()?;
                self.expect_punct(";")?;
                Ok(Stmt::new(StmtKind::Goto(label), span))
            }
            "return" => {
                self.advance();
                let value = if self.is_punct(";") {
                    None
                } else {
                    Some(self.expr()?)
                };
                self.expect_punct(";")?;
                Ok(Stmt::new(StmtKind::Return(value), span))
            }
            _ => {
                if matches!(self.peek_at(1), Tok::Punct(":")) {
                    let (label, _) = self.ident()?;
                    self.advance();
                    return Ok(Stmt::new(StmtKind::Label(label), span));
                }
                if matches!(self.peek_at(1), Tok::Punct("(")) {
                    let (name, _) = self.ident()?;
                    let args = self.args()?;
                    self.expect_punct(";")?;
                    return Ok(Stmt::new(StmtKind::Call { name, args }, span));
                }
                let s = self.assign()?;
                self.expect_punct(";")?;
                Ok(s)
            }
        }
    }

    fn args(&mut self) -> PResult<Vec<Expr>> {
        self.expect_punct("(")?;
        let mut out = Vec::new();
        if self.eat_punct(")") {
            return Ok(out);
        }
        loop {
            out.push(self.expr()?);
            if self.eat_punct(")") {
                return Ok(out);
            }
            self.expect_punct(",")?;
        }
    }

    pub fn expr(&mut self) -> PResult<Expr> {
        self.binary(1)
    }

    fn binary_op(&self) -> Option<BinaryOp> {
        use BinaryOp::*;
        let Tok::Punct(p) = self.peek() else {
            return None;
        };
        Some(match *p {
            "+" => Add,
            "-" => Sub,
            "*" => Mul,
            "/" => Div,
            "%" => Rem,
            "<<" => Shl,
            ">>" => Shr,
            "&" => BitAnd,
            "|" => BitOr,
            "^" => BitXor,
            "<" => Lt,
            "<=" => Le,
            ">" => Gt,
            ">=" => Ge,
            "==" => Eq,
            "!=" => Ne,
            "&&" => And,
            "||" => Or,
            _ => return None,
        })
    }

    fn binary(&mut self, min_prec: u8) -> PResult<Expr> {
        let mut lhs = self.unary()?;
        while let Some(op) = self.binary_op() {
            let prec = op.precedence();
            if prec < min_prec {
                break;
            }
            let span = self.advance().span;
            let rhs = self.binary(prec + 1)?;
            lhs = Expr::new(ExprKind::Binary(op, Box::new(lhs), Box::new(rhs)), span);
        }
        Ok(lhs)
    }

    fn unary(&mut self) -> PResult<Expr> {
        let span = self.span();
        let op = match self.peek() {
            Tok::Punct("-") => Some(UnaryOp::Neg),
            Tok::Punct("!") => Some(UnaryOp::Not),
            Tok::Punct("~") => Some(UnaryOp::BitNot),
            _ => None,
        };
        if let Some(op) = op {
            self.advance();
            let e = self.unary()?;
            return Ok(Expr::new(ExprKind::Unary(op, Box::new(e)), span));
        }
        if self.is_punct("(")
            && matches!(self.peek_at(1), Tok::Ident(w) if w == "int" || w == "float")
            && matches!(self.peek_at(2), Tok::Punct(")"))
        {
            self.advance();
            let ty = self.scalar_ty()?;
            self.advance();
            let e = self.unary()?;
            return Ok(Expr::new(ExprKind::Cast(ty, Box::new(e)), span));
        }
        self.primary()
    }

    fn primary(&mut self) -> PResult<Expr> {
        let span = self.span();
        match self.peek().clone() {
            Tok::Int(v) => {
                if v > i32::MAX as i64 {
                    return self.error(&["an integer literal within 32 bits"]);
                }
                self.advance();
                Ok(Expr::new(ExprKind::Lit(Literal::Int(v as i32)), span))
            }
            Tok::Float(v) => {
                self.advance();
                Ok(Expr::new(ExprKind::Lit(Literal::Float(v)), span))
            }
            Tok::Punct("(") => {
                self.advance();
                let e = self.expr()?;
                self.expect_punct(")")?;
                Ok(e)
            }
            Tok::Ident(w) => match w.as_str() {
                "threadIdx" | "blockIdx" | "blockDim" | "gridDim" => self.builtin(&w),
                "warp_shfl_xor" => {
                    self.advance();
                    self.expect_punct("(")?;
                    let value = self.expr()?;
                    self.expect_punct(",")?;
                    let mask_span = self.span();
                    let mask_expr = self.expr()?;
                    self.expect_punct(")")?;
                    let mask = const_eval(&mask_expr)
                        .filter(|m| (1..=31).contains(m))
                        .ok_or_else(|| FrontendError::Invalid {
                            span: mask_span,
                            message: "warp_shfl_xor lane mask must be a constant in 1..=31".into(),
                        })?;
                    Ok(Expr::new(ExprKind::ShflXor(Box::new(value), mask as u32), span))
                }
                "min" | "max" | "fmaxf" => {
                    self.advance();
                    let args = self.args()?;
                    let intr = Intrinsic::from_name(&w).expect("intrinsic name");
                    if args.len() != 2 {
                        return Err(FrontendError::Invalid {
                            span,
                            message: format!("`{w}` takes exactly 2 arguments"),
                        });
                    }
                    Ok(Expr::new(ExprKind::Intrinsic(intr, args), span))
                }
                _ => {
                    let (name, _) = self.ident()?;
                    if self.is_punct("(") {
                        let args = self.args()?;
                        Ok(Expr::new(ExprKind::Call(name, args), span))
                    } else if self.eat_punct("[") {
                        let idx = self.expr()?;
                        self.expect_punct("]")?;
                        Ok(Expr::new(ExprKind::Index(name, Box::new(idx)), span))
                    } else {
                        Ok(Expr::new(ExprKind::Var(name), span))
                    }
                }
            },
            _ => self.error(&["an expression"]),
        }
    }

    fn builtin(&mut self, base: &str) -> PResult<Expr> {
        let span = self.advance().span;
        self.expect_punct(".")?;
        let (axis_span, axis) = match self.advance() {
            Token {
                tok: Tok::Ident(a),
                span,
            } => (span, a),
            t => {
                return Err(FrontendError::Syntax {
                    span: t.span,
                    expected: vec!["`x`".into(), "`y`".into(), "`z`".into()],
                    found: t.tok.describe(),
                })
            }
        };
        let axis_v = match axis.as_str() {
            "x" => Axis::X,
            "y" => Axis::Y,
            "z" => Axis::Z,
            _ => {
                return Err(FrontendError::UnknownIdentifier {
                    span: axis_span,
                    name: format!("{base}.{axis}"),
                })
            }
        };
        let b = match base {
            "threadIdx" => Builtin::ThreadIdx(axis_v),
            "blockIdx" => Builtin::BlockIdx(axis_v),
            "blockDim" => Builtin::BlockDim(axis_v),
            _ if axis_v == Axis::X => Builtin::GridDimX,
            _ => {
                return Err(FrontendError::UnknownIdentifier {
                    span: axis_span,
                    name: format!("{base}.{axis}"),
                })
            }
        };
        Ok(Expr::new(ExprKind::Builtin(b), span))
    }
}

/// Folds an integer constant expression.
pub fn const_eval(e: &Expr) -> Option<i32> {
    use BinaryOp::*;
    Some(match &e.kind {
        ExprKind::Lit(Literal::Int(v)) => *v,
        ExprKind::Unary(UnaryOp::Neg, a) => const_eval(a)?.wrapping_neg(),
        ExprKind::Unary(UnaryOp::BitNot, a) => !const_eval(a)?,
        ExprKind::Unary(UnaryOp::Not, a) => (const_eval(a)? == 0) as i32,
        ExprKind::Binary(op, a, b) => {
            let (a, b) = (const_eval(a)?, const_eval(b)?);
            match op {
                Add => a.wrapping_add(b),
                Sub => a.wrapping_sub(b),
                Mul => a.wrapping_mul(b),
                Div => a.checked_div(b)?,
                Rem => a.checked_rem(b)?,
                Shl => a.wrapping_shl(b as u32),
                Shr => a.wrapping_shr(b as u32),
                BitAnd => a & b,
                BitOr => a | b,
                BitXor => a ^ b,
                Lt => (a < b) as i32,
                Le => (a <= b) as i32,
                Gt => (a > b) as i32,
                Ge => (a >= b) as i32,
                Eq => (a == b) as i32,
                Ne => (a != b) as i32,
                And => (a != 0 && b != 0) as i32,
                Or => (a != 0 || b != 0) as i32,
            }
        }
        _ => return None,
    })
}

/// Parses source text without semantic checks.
pub fn parse_unchecked(src: &str) -> PResult<Program> {
    Parser::new(src)?.program()
}
