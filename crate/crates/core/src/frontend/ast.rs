//! Abstract syntax tree for Mini-Kernel programs.
//!
//! Every node carries a [`Span`]. Spans never take part in structural
//! equality, so two trees that differ only in source positions compare equal.

use std::fmt;

/// A source position (1-based line and column).
#[derive(Debug, Clone, Copy, Default, Eq)]
pub struct Span {
    pub line: u32,
    pub col: u32,
}

impl Span {
    pub fn new(line: u32, col: u32) -> Self {
        Span { line, col }
    }
}

impl PartialEq for Span {
    fn eq(&self, _other: &Span) -> bool {
        true
    }
}

impl fmt::Display for Span {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.line, self.col)
    }
}

/// Scalar element type.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Ty {
    Int,
    Float,
}

impl Ty {
    pub fn keyword(self) -> &'static str {
        match self {
            Ty::Int => "int",
            Ty::Float => "float",
        }
    }

    pub fn size_bytes(self) -> u32 {
        4
    }
}

impl fmt::Display for Ty {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.keyword())
    }
}

/// Semantic type of a kernel or function parameter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ParamTy {
    Scalar(Ty),
    /// A global-memory array.
    Array(Ty),
}

impl ParamTy {
    pub fn elem(self) -> Ty {
        match self {
            ParamTy::Scalar(t) | ParamTy::Array(t) => t,
        }
    }

    pub fn is_array(self) -> bool {
        matches!(self, ParamTy::Array(_))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Literal {
    Int(i32),
    Float(f32),
}

impl Literal {
    pub fn ty(self) -> Ty {
        match self {
            Literal::Int(_) => Ty::Int,
            Literal::Float(_) => Ty::Float,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub ty: ParamTy,
    /// Declared length of an array parameter, used to size generated inputs.
    pub len: Option<u32>,
    /// Default value of a scalar parameter.
    pub default: Option<Literal>,
    pub span: Span,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Dims {
    pub x: u32,
    pub y: u32,
    pub z: u32,
}

impl Dims {
    pub const fn new(x: u32, y: u32, z: u32) -> Self {
        Dims { x, y, z }
    }

    pub const fn linear(x: u32) -> Self {
        Dims { x, y: 1, z: 1 }
    }

    pub fn product(self) -> u32 {
        self.x * self.y * self.z
    }

    pub fn is_linear(self) -> bool {
        self.y == 1 && self.z == 1
    }
}

impl fmt::Display for Dims {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {})", self.x, self.y, self.z)
    }
}

pub type Block = Vec<Stmt>;

#[derive(Debug, Clone, PartialEq)]
pub struct Kernel {
    pub name: String,
    pub params: Vec<Param>,
    pub block_dims: Dims,
    pub grid_dim: u32,
    /// Whether the block dimensions may be repartitioned by the fuser.
    pub tunable: bool,
    /// Explicit per-thread register count, overriding the estimator.
    pub regs: Option<u32>,
    pub body: Block,
    pub span: Span,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RetTy {
    Void,
    Value(Ty),
}

#[derive(Debug, Clone, PartialEq)]
pub struct FuncDef {
    pub name: String,
    pub ret: RetTy,
    pub params: Vec<Param>,
    pub body: Block,
    pub span: Span,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Program {
    pub functions: Vec<FuncDef>,
    pub kernels: Vec<Kernel>,
}

impl Program {
    pub fn kernel(&self, name: &str) -> Option<&Kernel> {
        self.kernels.iter().find(|k| k.name == name)
    }

    pub fn function(&self, name: &str) -> Option<&FuncDef> {
        self.functions.iter().find(|f| f.name == name)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Storage {
    Local,
    /// Block-shared array with a constant length.
    Shared { len: u32 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Decl {
    pub name: String,
    pub ty: Ty,
    pub storage: Storage,
    pub init: Option<Expr>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum LValue {
    Var(String),
    Index(String, Box<Expr>),
}

impl LValue {
    pub fn name(&self) -> &str {
        match self {
            LValue::Var(n) | LValue::Index(n, _) => n,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Stmt {
    pub kind: StmtKind,
    pub span: Span,
}

impl Stmt {
    pub fn new(kind: StmtKind, span: Span) -> Self {
        Stmt { kind, span }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum StmtKind {
    Decl(Decl),
    Assign {
        target: LValue,
        value: Expr,
    },
    If {
        cond: Expr,
        then_block: Block,
        else_block: Option<Block>,
    },
    For {
        init: Option<Box<Stmt>>,
        cond: Expr,
        step: Option<Box<Stmt>>,
        body: Block,
    },
    While {
        cond: Expr,
        body: Block,
    },
    /// Full-block barrier.
    Barrier,
    /// Named barrier releasing once `count` threads have arrived.
    PartialBarrier {
        id: u32,
        count: u32,
    },
    AtomicAdd {
        target: LValue,
        value: Expr,
    },
    Return(Option<Expr>),
    Call {
        name: String,
        args: Vec<Expr>,
    },
    Label(String),
    Goto(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Axis {
    X,
    Y,
    Z,
}

impl Axis {
    pub const ALL: [Axis; 3] = [Axis::X, Axis::Y, Axis::Z];

    pub fn suffix(self) -> &'static str {
        match self {
            Axis::X => "x",
            Axis::Y => "y",
            Axis::Z => "z",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Builtin {
    ThreadIdx(Axis),
    BlockIdx(Axis),
    BlockDim(Axis),
    GridDimX,
}

impl Builtin {
    pub fn source_name(self) -> String {
        match self {
            Builtin::ThreadIdx(a) => format!("threadIdx.{}", a.suffix()),
            Builtin::BlockIdx(a) => format!("blockIdx.{}", a.suffix()),
            Builtin::BlockDim(a) => format!("blockDim.{}", a.suffix()),
            Builtin::GridDimX => "gridDim.x".to_string(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UnaryOp {
    Neg,
    Not,
    BitNot,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
    Div,
    Rem,
    Shl,
    Shr,
    BitAnd,
    BitOr,
    BitXor,
    Lt,
    Le,
    Gt,
    Ge,
    Eq,
    Ne,
    And,
    Or,
}

impl BinaryOp {
    pub fn symbol(self) -> &'static str {
        use BinaryOp::*;
        match self {
            Add => "+",
            Sub => "-",
            Mul => "*",
            Div => "/",
            Rem => "%",
            Shl => "<<",
            Shr => ">>",
            BitAnd => "&",
            BitOr => "|",
            BitXor => "^",
            Lt => "<",
            Le => "<=",
            Gt => ">",
            Ge => ">=",
            Eq => "==",
            Ne => "!=",
            And => "&&",
            Or => "||",
        }
    }

    /// Binding strength, higher binds tighter (C precedence).
    pub fn precedence(self) -> u8 {
        use BinaryOp::*;
        match self {
            Or => 1,
            And => 2,
            BitOr => 3,
            BitXor => 4,
            BitAnd => 5,
            Eq | Ne => 6,
            Lt | Le | Gt | Ge => 7,
            Shl | Shr => 8,
            Add | Sub => 9,
            Mul | Div | Rem => 10,
        }
    }

    pub fn is_comparison(self) -> bool {
        use BinaryOp::*;
        matches!(self, Lt | Le | Gt | Ge | Eq | Ne)
    }

    pub fn is_logical(self) -> bool {
        matches!(self, BinaryOp::And | BinaryOp::Or)
    }

    /// Operators defined on integers only.
    pub fn is_integral(self) -> bool {
        use BinaryOp::*;
        matches!(self, Rem | Shl | Shr | BitAnd | BitOr | BitXor)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Intrinsic {
    Min,
    Max,
    Fmaxf,
}

impl Intrinsic {
    pub fn from_name(name: &str) -> Option<Intrinsic> {
        match name {
            "min" => Some(Intrinsic::Min),
            "max" => Some(Intrinsic::Max),
            "fmaxf" => Some(Intrinsic::Fmaxf),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Intrinsic::Min => "min",
            Intrinsic::Max => "max",
            Intrinsic::Fmaxf => "fmaxf",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Expr {
    pub kind: ExprKind,
    pub span: Span,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ExprKind {
    Lit(Literal),
    Var(String),
    Builtin(Builtin),
    Unary(UnaryOp, Box<Expr>),
    Binary(BinaryOp, Box<Expr>, Box<Expr>),
    Index(String, Box<Expr>),
    Cast(Ty, Box<Expr>),
    Intrinsic(Intrinsic, Vec<Expr>),
    /// Butterfly shuffle; the lane mask is a constant in `1..=31`.
    ShflXor(Box<Expr>, u32),
    Call(String, Vec<Expr>),
}

impl Expr {
    pub fn new(kind: ExprKind, span: Span) -> Self {
        Expr { kind, span }
    }

    pub fn int(v: i32) -> Self {
        Expr::new(ExprKind::Lit(Literal::Int(v)), Span::default())
    }

    pub fn var(name: impl Into<String>) -> Self {
        Expr::new(ExprKind::Var(name.into()), Span::default())
    }

    pub fn builtin(b: Builtin) -> Self {
        Expr::new(ExprKind::Builtin(b), Span::default())
    }

    pub fn binary(op: BinaryOp, l: Expr, r: Expr) -> Self {
        Expr::new(ExprKind::Binary(op, Box::new(l), Box::new(r)), Span::default())
    }

    pub fn not(e: Expr) -> Self {
        Expr::new(ExprKind::Unary(UnaryOp::Not, Box::new(e)), Span::default())
    }

    /// Visits this expression and all subexpressions in pre-order.
    pub fn walk<'a>(&'a self, f: &mut impl FnMut(&'a Expr)) {
        f(self);
        match &self.kind {
            ExprKind::Lit(_) | ExprKind::Var(_) | ExprKind::Builtin(_) => {}
            ExprKind::Unary(_, e) | ExprKind::Cast(_, e) | ExprKind::ShflXor(e, _) => e.walk(f),
            ExprKind::Index(_, e) => e.walk(f),
            ExprKind::Binary(_, l, r) => {
                l.walk(f);
                r.walk(f);
            }
            ExprKind::Intrinsic(_, args) | ExprKind::Call(_, args) => {
                for a in args {
                    a.walk(f);
                }
            }
        }
    }

    pub fn walk_mut(&mut self, f: &mut impl FnMut(&mut Expr)) {
        f(self);
        match &mut self.kind {
            ExprKind::Lit(_) | ExprKind::Var(_) | ExprKind::Builtin(_) => {}
            ExprKind::Unary(_, e) | ExprKind::Cast(_, e) | ExprKind::ShflXor(e, _) => e.walk_mut(f),
            ExprKind::Index(_, e) => e.walk_mut(f),
            ExprKind::Binary(_, l, r) => {
                l.walk_mut(f);
                r.walk_mut(f);
            }
            ExprKind::Intrinsic(_, args) | ExprKind::Call(_, args) => {
                for a in args {
                    a.walk_mut(f);
                }
            }
        }
    }

    pub fn contains_call(&self) -> bool {
        let mut found = false;
        self.walk(&mut |e| {
            if matches!(e.kind, ExprKind::Call(..)) {
                found = true;
            }
        });
        found
    }
}

impl Stmt {
    /// Direct child blocks of this statement.
    pub fn child_blocks(&self) -> Vec<&Block> {
        match &self.kind {
            StmtKind::If {
                then_block,
                else_block,
                ..
            } => {
                let mut v = vec![then_block];
                if let Some(e) = else_block {
                    v.push(e);
                }
                v
            }
            StmtKind::For { body, .. } | StmtKind::While { body, .. } => vec![body],
            _ => Vec::new(),
        }
    }

    /// Expressions appearing directly in this statement (not in child blocks
    /// or in the init/step statements of a `for`).
    pub fn exprs(&self) -> Vec<&Expr> {
        fn lv(l: &LValue) -> Option<&Expr> {
            match l {
                LValue::Var(_) => None,
                LValue::Index(_, e) => Some(e),
            }
        }
        match &self.kind {
            StmtKind::Decl(d) => d.init.iter().collect(),
            StmtKind::Assign { target, value } | StmtKind::AtomicAdd { target, value } => {
                lv(target).into_iter().chain(std::iter::once(value)).collect()
            }
            StmtKind::If { cond, .. } | StmtKind::While { cond, .. } => vec![cond],
            StmtKind::For { cond, .. } => vec![cond],
            StmtKind::Return(e) => e.iter().collect(),
            StmtKind::Call { args, .. } => args.iter().collect(),
            StmtKind::Barrier
            | StmtKind::PartialBarrier { .. }
            | StmtKind::Label(_)
            | StmtKind::Goto(_) => Vec::new(),
        }
    }
}

/// Visits every statement of a block in pre-order, including `for` init/step.
pub fn walk_stmts<'a>(block: &'a [Stmt], f: &mut impl FnMut(&'a Stmt)) {
    for s in block {
        f(s);
        if let StmtKind::For { init, step, .. } = &s.kind {
            if let Some(i) = init {
                walk_stmts(std::slice::from_ref(i.as_ref()), f);
            }
            if let Some(st) = step {
                walk_stmts(std::slice::from_ref(st.as_ref()), f);
            }
        }
        for b in s.child_blocks() {
            walk_stmts(b, f);
        }
    }
}

/// Mutable pre-order statement walk, including `for` init/step.
pub fn walk_stmts_mut(block: &mut [Stmt], f: &mut impl FnMut(&mut Stmt)) {
    for s in block.iter_mut() {
        f(s);
        match &mut s.kind {
            StmtKind::If {
                then_block,
                else_block,
                ..
            } => {
                walk_stmts_mut(then_block, f);
                if let Some(e) = else_block {
                    walk_stmts_mut(e, f);
                }
            }
            StmtKind::For {
                init, step, body, ..
            } => {
                if let Some(i) = init {
                    walk_stmts_mut(std::slice::from_mut(i.as_mut()), f);
                }
                if let Some(st) = step {
                    walk_stmts_mut(std::slice::from_mut(st.as_mut()), f);
                }
                walk_stmts_mut(body, f);
            }
            StmtKind::While { body, .. } => walk_stmts_mut(body, f),
            _ => {}
        }
    }
}

/// Applies `f` to every expression in the block, including lvalue indices.
pub fn walk_exprs_mut(block: &mut [Stmt], f: &mut impl FnMut(&mut Expr)) {
    walk_stmts_mut(block, &mut |s| match &mut s.kind {
        StmtKind::Decl(d) => {
            if let Some(e) = &mut d.init {
                e.walk_mut(f);
            }
        }
        StmtKind::Assign { target, value } | StmtKind::AtomicAdd { target, value } => {
            if let LValue::Index(_, e) = target {
                e.walk_mut(f);
            }
            value.walk_mut(f);
        }
        StmtKind::If { cond, .. } | StmtKind::While { cond, .. } | StmtKind::For { cond, .. } => {
            cond.walk_mut(f)
        }
        StmtKind::Return(Some(e)) => e.walk_mut(f),
        StmtKind::Call { args, .. } => {
            for a in args {
                a.walk_mut(f);
            }
        }
        _ => {}
    });
}

/// Applies `f` to every expression in the block, including lvalue indices.
pub fn walk_exprs<'a>(block: &'a [Stmt], f: &mut impl FnMut(&'a Expr)) {
    walk_stmts(block, &mut |s| {
        for e in s.exprs() {
            e.walk(f);
        }
    });
}

impl Kernel {
    /// Shared-memory declarations as (name, element type, length).
    pub fn shared_decls(&self) -> Vec<(&str, Ty, u32)> {
        let mut out = Vec::new();
        walk_stmts(&self.body, &mut |s| {
            if let StmtKind::Decl(Decl {
                name,
                ty,
                storage: Storage::Shared { len },
                ..
            }) = &s.kind
            {
                out.push((name.as_str(), *ty, *len));
            }
        });
        out
    }

    /// Static shared memory per block in bytes.
    pub fn shared_bytes(&self) -> u32 {
        self.shared_decls()
            .iter()
            .map(|(_, t, len)| t.size_bytes() * len)
            .sum()
    }

    pub fn param(&self, name: &str) -> Option<&Param> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn threads_per_block(&self) -> u32 {
        self.block_dims.product()
    }
}

/// Counts statements matching a predicate anywhere in the block.
pub fn count_stmts(block: &[Stmt], pred: impl Fn(&StmtKind) -> bool) -> usize {
    let mut n = 0;
    walk_stmts(block, &mut |s| {
        if pred(&s.kind) {
            n += 1;
        }
    });
    n
}
