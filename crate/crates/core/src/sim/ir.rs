//! Three-address IR executed by the simulator.
//!
//! Every value lives in a per-lane 32-bit register slot. Builtins and scalar
//! parameters occupy pre-seeded slots. Helper functions get static frames:
//! their parameters, locals and result each own a fixed slot, which is sound
//! because call graphs are acyclic.

use std::collections::HashMap;

use crate::frontend::*;

use super::SimError;

pub type Slot = u32;

/// Array ids at or above this bit refer to block-shared arrays.
pub const SHARED_BIT: u32 = 1 << 31;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Operand {
    Slot(Slot),
    Imm(u32),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ArrRef {
    Static(u32),
    /// Array id held in a slot (array parameters of helper functions).
    Dynamic(Slot),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IOp {
    Add,
    Sub,
    Mul,
    Div,
    Rem,
    Shl,
    Shr,
    And,
    Or,
    Xor,
    Lt,
    Le,
    Gt,
    Ge,
    Eq,
    Ne,
    Min,
    Max,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FOp {
    Add,
    Sub,
    Mul,
    Div,
    Lt,
    Le,
    Gt,
    Ge,
    Eq,
    Ne,
    Min,
    Max,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UOp {
    INeg,
    FNeg,
    INot,
    FNot,
    BitNot,
    IToF,
    FToI,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Inst {
    Mov { dst: Slot, src: Operand },
    IBin { op: IOp, dst: Slot, a: Operand, b: Operand },
    FBin { op: FOp, dst: Slot, a: Operand, b: Operand },
    Un { op: UOp, dst: Slot, a: Operand },
    Load { dst: Slot, arr: ArrRef, idx: Operand },
    Store { arr: ArrRef, idx: Operand, val: Operand },
    Atomic { arr: ArrRef, idx: Operand, val: Operand, ty: Ty },
    Shfl { dst: Slot, src: Slot, mask: u32 },
    Jump { target: usize },
    /// Jumps when the condition is zero.
    BranchZero { cond: Operand, target: usize },
    /// `count == None` waits for every live thread of the block.
    Barrier { id: u32, count: Option<u32> },
    Call { target: usize },
    Ret,
    Exit,
    SpillLoad { slot: Slot },
    SpillStore { slot: Slot },
}

impl Inst {
    /// Slots read by the instruction.
    pub fn uses(&self) -> Vec<Slot> {
        fn op(o: &Operand, v: &mut Vec<Slot>) {
            if let Operand::Slot(s) = o {
                v.push(*s);
            }
        }
        fn arr(a: &ArrRef, v: &mut Vec<Slot>) {
            if let ArrRef::Dynamic(s) = a {
                v.push(*s);
            }
        }
        let mut v = Vec::new();
        match self {
            Inst::Mov { src, .. } => op(src, &mut v),
            Inst::IBin { a, b, .. } | Inst::FBin { a, b, .. } => {
                op(a, &mut v);
                op(b, &mut v);
            }
            Inst::Un { a, .. } => op(a, &mut v),
            Inst::Load { arr: r, idx, .. } => {
                arr(r, &mut v);
                op(idx, &mut v);
            }
            Inst::Store { arr: r, idx, val } | Inst::Atomic { arr: r, idx, val, .. } => {
                arr(r, &mut v);
                op(idx, &mut v);
                op(val, &mut v);
            }
            Inst::Shfl { src, .. } => v.push(*src),
            Inst::BranchZero { cond, .. } => op(cond, &mut v),
            Inst::SpillStore { slot } => v.push(*slot),
            Inst::Jump { .. }
            | Inst::Barrier { .. }
            | Inst::Call { .. }
            | Inst::Ret
            | Inst::Exit
            | Inst::SpillLoad { .. } => {}
        }
        v
    }

    /// Slot written by the instruction.
    pub fn def(&self) -> Option<Slot> {
        match self {
            Inst::Mov { dst, .. }
            | Inst::IBin { dst, .. }
            | Inst::FBin { dst, .. }
            | Inst::Un { dst, .. }
            | Inst::Load { dst, .. }
            | Inst::Shfl { dst, .. } => Some(*dst),
            Inst::SpillLoad { slot } => Some(*slot),
            _ => None,
        }
    }

    fn set_def(&mut self, new: Slot) {
        match self {
            Inst::Mov { dst, .. }
            | Inst::IBin { dst, .. }
            | Inst::FBin { dst, .. }
            | Inst::Un { dst, .. }
            | Inst::Load { dst, .. }
            | Inst::Shfl { dst, .. } => *dst = new,
            _ => unreachable!("instruction without destination"),
        }
    }

    fn targets_mut(&mut self) -> Option<&mut usize> {
        match self {
            Inst::Jump { target } | Inst::BranchZero { target, .. } | Inst::Call { target } => {
                Some(target)
            }
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SlotKind {
    Builtin(Builtin),
    Param,
    /// A declared scalar variable, in the kernel or a helper.
    Local,
    Temp,
    /// Helper-function array parameter.
    ArrayRef,
    Result,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ArrayInfo {
    pub name: String,
    pub ty: Ty,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SharedInfo {
    pub name: String,
    pub ty: Ty,
    pub len: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScalarParam {
    pub name: String,
    pub ty: Ty,
    pub slot: Slot,
    pub default: Option<Literal>,
}

/// Instruction range of one lowered body; `ret_sites` lists the instruction
/// indices following calls into it.
#[derive(Debug, Clone, PartialEq)]
pub struct FuncRange {
    pub name: String,
    pub start: usize,
    pub end: usize,
    pub ret_sites: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IrProgram {
    pub insts: Vec<Inst>,
    pub slots: Vec<SlotKind>,
    pub globals: Vec<ArrayInfo>,
    pub shared: Vec<SharedInfo>,
    pub scalars: Vec<ScalarParam>,
    /// Slot of each builtin, indexed by [`builtin_index`].
    pub builtin_slots: [Slot; 10],
    /// The kernel body first, then helpers in lowering order.
    pub funcs: Vec<FuncRange>,
}

pub fn builtin_index(b: Builtin) -> usize {
    let axis = |a: Axis| match a {
        Axis::X => 0,
        Axis::Y => 1,
        Axis::Z => 2,
    };
    match b {
        Builtin::ThreadIdx(a) => axis(a),
        Builtin::BlockIdx(a) => 3 + axis(a),
        Builtin::BlockDim(a) => 6 + axis(a),
        Builtin::GridDimX => 9,
    }
}

pub const ALL_BUILTINS: [Builtin; 10] = [
    Builtin::ThreadIdx(Axis::X),
    Builtin::ThreadIdx(Axis::Y),
    Builtin::ThreadIdx(Axis::Z),
    Builtin::BlockIdx(Axis::X),
    Builtin::BlockIdx(Axis::Y),
    Builtin::BlockIdx(Axis::Z),
    Builtin::BlockDim(Axis::X),
    Builtin::BlockDim(Axis::Y),
    Builtin::BlockDim(Axis::Z),
    Builtin::GridDimX,
];

#[derive(Debug, Clone, Copy)]
enum Binding {
    Scalar(Slot, Ty),
    Array(ArrRef, Ty),
}

struct FnInfo {
    entry: usize,
    params: Vec<Binding>,
    ret: Option<(Slot, Ty)>,
}

struct Body {
    scopes: Vec<HashMap<String, Binding>>,
    labels: HashMap<String, usize>,
    ret: Option<(Slot, Ty)>,
    is_kernel: bool,
    temps: Vec<Slot>,
    next_temp: usize,
}

struct Lowerer<'a> {
    insts: Vec<Inst>,
    slots: Vec<SlotKind>,
    /// Label id to bound instruction index.
    label_pos: Vec<Option<usize>>,
    funcs: HashMap<&'a str, &'a FuncDef>,
    fn_info: HashMap<String, FnInfo>,
    pending: Vec<&'a FuncDef>,
    shared: Vec<SharedInfo>,
    /// Index of an instruction whose destination temp may be retargeted.
    retarget: Option<usize>,
    body: Body,
    call_sites: Vec<(usize, String)>,
}

fn lit_bits(l: Literal) -> u32 {
    match l {
        Literal::Int(v) => v as u32,
        Literal::Float(v) => v.to_bits(),
    }
}

fn err(span: Span, message: impl Into<String>) -> SimError {
    SimError::Lowering {
        span,
        message: message.into(),
    }
}

impl<'a> Lowerer<'a> {
    fn slot(&mut self, kind: SlotKind) -> Slot {
        self.slots.push(kind);
        (self.slots.len() - 1) as Slot
    }

    fn emit(&mut self, i: Inst) {
        self.insts.push(i);
        self.retarget = None;
    }

    /// Emits an instruction whose destination is a fresh temp.
    fn emit_temp(&mut self, i: Inst) {
        self.insts.push(i);
        self.retarget = Some(self.insts.len() - 1);
    }

    fn new_label(&mut self) -> usize {
        self.label_pos.push(None);
        self.label_pos.len() - 1
    }

    fn bind(&mut self, l: usize) {
        self.label_pos[l] = Some(self.insts.len());
        self.retarget = None;
    }

    fn temp(&mut self) -> Slot {
        let b = &mut self.body;
        if b.next_temp < b.temps.len() {
            let t = b.temps[b.next_temp];
            b.next_temp += 1;
            return t;
        }
        let t = self.slot(SlotKind::Temp);
        self.body.temps.push(t);
        self.body.next_temp += 1;
        t
    }

    fn lookup(&self, name: &str, span: Span) -> Result<Binding, SimError> {
        self.body
            .scopes
            .iter()
            .rev()
            .find_map(|s| s.get(name).copied())
            .ok_or_else(|| err(span, format!("unbound identifier `{name}`")))
    }

    fn declare(&mut self, name: &str, b: Binding) {
        self.body
            .scopes
            .last_mut()
            .expect("scope")
            .insert(name.to_string(), b);
    }

    fn user_label(&mut self, name: &str) -> usize {
        if let Some(&l) = self.body.labels.get(name) {
            return l;
        }
        let l = self.new_label();
        self.body.labels.insert(name.to_string(), l);
        l
    }

    fn convert(&mut self, o: Operand, from: Ty, to: Ty) -> Operand {
        if from == to {
            return o;
        }
        match o {
            Operand::Imm(bits) => Operand::Imm(match to {
                Ty::Float => (bits as i32 as f32).to_bits(),
                Ty::Int => f32::from_bits(bits) as i32 as u32,
            }),
            Operand::Slot(_) => {
                let t = self.temp();
                let op = match to {
                    Ty::Float => UOp::IToF,
                    Ty::Int => UOp::FToI,
                };
                self.emit_temp(Inst::Un { op, dst: t, a: o });
                Operand::Slot(t)
            }
        }
    }

    fn array(&self, name: &str, span: Span) -> Result<(ArrRef, Ty), SimError> {
        match self.lookup(name, span)? {
            Binding::Array(r, t) => Ok((r, t)),
            Binding::Scalar(..) => Err(err(span, format!("`{name}` is not an array"))),
        }
    }

    fn expr(&mut self, e: &Expr) -> Result<(Operand, Ty), SimError> {
        let span = e.span;
        Ok(match &e.kind {
            ExprKind::Lit(l) => (Operand::Imm(lit_bits(*l)), l.ty()),
            ExprKind::Var(n) => match self.lookup(n, span)? {
                Binding::Scalar(s, t) => (Operand::Slot(s), t),
                Binding::Array(..) => return Err(err(span, format!("array `{n}` used as a value"))),
            },
            ExprKind::Builtin(b) => (Operand::Slot(self.builtin_slot(*b)), Ty::Int),
            ExprKind::Unary(op, a) => {
                let (a, t) = self.expr(a)?;
                let (uop, rt) = match (op, t) {
                    (UnaryOp::Neg, Ty::Int) => (UOp::INeg, Ty::Int),
                    (UnaryOp::Neg, Ty::Float) => (UOp::FNeg, Ty::Float),
                    (UnaryOp::Not, Ty::Int) => (UOp::INot, Ty::Int),
                    (UnaryOp::Not, Ty::Float) => (UOp::FNot, Ty::Int),
                    (UnaryOp::BitNot, _) => (UOp::BitNot, Ty::Int),
                };
                let d = self.temp();
                self.emit_temp(Inst::Un { op: uop, dst: d, a });
                (Operand::Slot(d), rt)
            }
            ExprKind::Cast(to, a) => {
                let (a, t) = self.expr(a)?;
                (self.convert(a, t, *to), *to)
            }
            ExprKind::Binary(op @ (BinaryOp::And | BinaryOp::Or), l, r) => {
                self.short_circuit(*op, l, r)?
            }
            ExprKind::Binary(op, l, r) => {
                let (lo, lt) = self.expr(l)?;
                let (ro, rt) = self.expr(r)?;
                let result = binary_type(*op, lt, rt).map_err(|m| err(span, m))?;
                let at = operand_type(*op, lt, rt);
                let lo = self.convert(lo, lt, at);
                let ro = self.convert(ro, rt, at);
                let d = self.temp();
                let inst = match at {
                    Ty::Int => Inst::IBin {
                        op: int_op(*op),
                        dst: d,
                        a: lo,
                        b: ro,
                    },
                    Ty::Float => Inst::FBin {
                        op: float_op(*op).ok_or_else(|| err(span, "operator requires int operands"))?,
                        dst: d,
                        a: lo,
                        b: ro,
                    },
                };
                self.emit_temp(inst);
                (Operand::Slot(d), result)
            }
            ExprKind::Index(n, i) => {
                let (arr, t) = self.array(n, span)?;
                let (io, it) = self.expr(i)?;
                if it != Ty::Int {
                    return Err(err(span, "array index must be int"));
                }
                let d = self.temp();
                self.emit_temp(Inst::Load { dst: d, arr, idx: io });
                (Operand::Slot(d), t)
            }
            ExprKind::Intrinsic(which, args) => {
                if args.len() != 2 {
                    return Err(err(span, format!("`{}` takes two arguments", which.name())));
                }
                let (a, at) = self.expr(&args[0])?;
                let (b, bt) = self.expr(&args[1])?;
                let t = match which {
                    Intrinsic::Fmaxf => Ty::Float,
                    _ if at == Ty::Float || bt == Ty::Float => Ty::Float,
                    _ => Ty::Int,
                };
                let a = self.convert(a, at, t);
                let b = self.convert(b, bt, t);
                let d = self.temp();
                let max = !matches!(which, Intrinsic::Min);
                let inst = match t {
                    Ty::Int => Inst::IBin {
                        op: if max { IOp::Max } else { IOp::Min },
                        dst: d,
                        a,
                        b,
                    },
                    Ty::Float => Inst::FBin {
                        op: if max { FOp::Max } else { FOp::Min },
                        dst: d,
                        a,
                        b,
                    },
                };
                self.emit_temp(inst);
                (Operand::Slot(d), t)
            }
            ExprKind::ShflXor(v, mask) => {
                let (o, t) = self.expr(v)?;
                let src = match o {
                    Operand::Slot(s) => s,
                    Operand::Imm(_) => {
                        let s = self.temp();
                        self.emit(Inst::Mov { dst: s, src: o });
                        s
                    }
                };
                let d = self.temp();
                self.emit_temp(Inst::Shfl {
                    dst: d,
                    src,
                    mask: *mask,
                });
                (Operand::Slot(d), t)
            }
            ExprKind::Call(name, args) => {
                let ret = self.call(name, args, span)?;
                let (r, t) = ret.ok_or_else(|| err(span, format!("void function `{name}` used as a value")))?;
                let d = self.temp();
                self.emit_temp(Inst::Mov {
                    dst: d,
                    src: Operand::Slot(r),
                });
                (Operand::Slot(d), t)
            }
        })
    }

    fn short_circuit(&mut self, op: BinaryOp, l: &Expr, r: &Expr) -> Result<(Operand, Ty), SimError> {
        let t = self.temp();
        let end = self.new_label();
        let (lo, lt) = self.expr(l)?;
        self.truthy(t, lo, lt);
        if op == BinaryOp::And {
            self.emit(Inst::BranchZero {
                cond: Operand::Slot(t),
                target: end,
            });
        } else {
            let skip = self.temp();
            self.emit(Inst::Un {
                op: UOp::INot,
                dst: skip,
                a: Operand::Slot(t),
            });
            self.emit(Inst::BranchZero {
                cond: Operand::Slot(skip),
                target: end,
            });
        }
        let (ro, rt) = self.expr(r)?;
        self.truthy(t, ro, rt);
        self.bind(end);
        Ok((Operand::Slot(t), Ty::Int))
    }

    fn truthy(&mut self, dst: Slot, o: Operand, t: Ty) {
        let inst = match t {
            Ty::Int => Inst::IBin {
                op: IOp::Ne,
                dst,
                a: o,
                b: Operand::Imm(0),
            },
            Ty::Float => Inst::FBin {
                op: FOp::Ne,
                dst,
                a: o,
                b: Operand::Imm(0f32.to_bits()),
            },
        };
        self.emit(inst);
    }

    fn builtin_slot(&self, b: Builtin) -> Slot {
        builtin_index(b) as Slot
    }

    /// Lowers a call; returns the callee's result slot.
    fn call(&mut self, name: &str, args: &[Expr], span: Span) -> Result<Option<(Slot, Ty)>, SimError> {
        let f = *self
            .funcs
            .get(name)
            .ok_or_else(|| err(span, format!("call to undefined function `{name}`")))?;
        if f.params.len() != args.len() {
            return Err(err(span, format!("`{name}` expects {} arguments", f.params.len())));
        }
        if !self.fn_info.contains_key(name) {
            let entry = self.new_label();
            let mut params = Vec::new();
            for p in &f.params {
                params.push(match p.ty {
                    ParamTy::Scalar(t) => Binding::Scalar(self.slot(SlotKind::Local), t),
                    ParamTy::Array(t) => Binding::Array(ArrRef::Dynamic(self.slot(SlotKind::ArrayRef)), t),
                });
            }
            let ret = match f.ret {
                RetTy::Value(t) => Some((self.slot(SlotKind::Result), t)),
                RetTy::Void => None,
            };
            self.fn_info.insert(name.to_string(), FnInfo { entry, params, ret });
            self.pending.push(f);
        }
        let params = self.fn_info[name].params.clone();
        let mut moves = Vec::new();
        for (p, a) in params.iter().zip(args) {
            match p {
                Binding::Scalar(slot, t) => {
                    let (o, at) = self.expr(a)?;
                    let o = self.convert(o, at, *t);
                    // The callee frame is written only after every argument
                    // is evaluated, since an argument may call the same helper.
                    moves.push(Inst::Mov { dst: *slot, src: o });
                }
                Binding::Array(ArrRef::Dynamic(slot), _) => {
                    let ExprKind::Var(an) = &a.kind else {
                        return Err(err(a.span, "array argument must name an array"));
                    };
                    let src = match self.array(an, a.span)?.0 {
                        ArrRef::Static(id) => Operand::Imm(id),
                        ArrRef::Dynamic(s) => Operand::Slot(s),
                    };
                    moves.push(Inst::Mov { dst: *slot, src });
                }
                Binding::Array(ArrRef::Static(_), _) => unreachable!("helper array params are dynamic"),
            }
        }
        for m in moves {
            self.emit(m);
        }
        let info = &self.fn_info[name];
        let (entry, ret) = (info.entry, info.ret);
        self.emit(Inst::Call { target: entry });
        self.call_sites.push((self.insts.len(), name.to_string()));
        Ok(ret)
    }

    fn lvalue_store(&mut self, target: &LValue, value: &Expr, span: Span) -> Result<(), SimError> {
        match target {
            LValue::Var(n) => {
                let (slot, t) = match self.lookup(n, span)? {
                    Binding::Scalar(s, t) => (s, t),
                    Binding::Array(..) => return Err(err(span, format!("cannot assign to array `{n}`"))),
                };
                let (o, vt) = self.expr(value)?;
                let o = self.convert(o, vt, t);
                self.assign_slot(slot, o);
            }
            LValue::Index(n, i) => {
                let (arr, t) = self.array(n, span)?;
                let (io, _) = self.expr(i)?;
                let (o, vt) = self.expr(value)?;
                let o = self.convert(o, vt, t);
                self.emit(Inst::Store { arr, idx: io, val: o });
            }
        }
        Ok(())
    }

    /// `slot = o`, folding into the producing instruction when possible.
    fn assign_slot(&mut self, slot: Slot, o: Operand) {
        if let (Some(idx), Operand::Slot(s)) = (self.retarget, o) {
            if self.insts[idx].def() == Some(s) && self.slots[s as usize] == SlotKind::Temp {
                self.insts[idx].set_def(slot);
                self.retarget = None;
                return;
            }
        }
        self.emit(Inst::Mov { dst: slot, src: o });
    }

    fn scoped<T>(&mut self, f: impl FnOnce(&mut Self) -> T) -> T {
        self.body.scopes.push(HashMap::new());
        let r = f(self);
        self.body.scopes.pop();
        r
    }

    fn block(&mut self, b: &[Stmt]) -> Result<(), SimError> {
        self.scoped(|l| {
            for s in b {
                l.stmt(s)?;
            }
            Ok(())
        })
    }

    fn cond_branch(&mut self, cond: &Expr, target: usize) -> Result<(), SimError> {
        let (c, t) = self.expr(cond)?;
        let c = if t == Ty::Float {
            let d = self.temp();
            self.truthy(d, c, t);
            Operand::Slot(d)
        } else {
            c
        };
        self.emit(Inst::BranchZero { cond: c, target });
        Ok(())
    }

    fn stmt(&mut self, s: &Stmt) -> Result<(), SimError> {
        self.body.next_temp = 0;
        let span = s.span;
        match &s.kind {
            StmtKind::Decl(d) => match d.storage {
                Storage::Local => {
                    let slot = self.slot(SlotKind::Local);
                    if let Some(init) = &d.init {
                        let (o, t) = self.expr(init)?;
                        let o = self.convert(o, t, d.ty);
                        self.assign_slot(slot, o);
                    }
                    self.declare(&d.name, Binding::Scalar(slot, d.ty));
                }
                Storage::Shared { len } => {
                    if !self.body.is_kernel {
                        return Err(err(span, "shared arrays may only be declared in kernels"));
                    }
                    let id = SHARED_BIT | self.shared.len() as u32;
                    self.shared.push(SharedInfo {
                        name: d.name.clone(),
                        ty: d.ty,
                        len,
                    });
                    self.declare(&d.name, Binding::Array(ArrRef::Static(id), d.ty));
                }
            },
            StmtKind::Assign { target, value } => self.lvalue_store(target, value, span)?,
            StmtKind::AtomicAdd { target, value } => {
                let LValue::Index(n, i) = target else {
                    return Err(err(span, "atomic_add target must be an array element"));
                };
                let (arr, t) = self.array(n, span)?;
                let (io, _) = self.expr(i)?;
                let (o, vt) = self.expr(value)?;
                let o = self.convert(o, vt, t);
                self.emit(Inst::Atomic {
                    arr,
                    idx: io,
                    val: o,
                    ty: t,
                });
            }
            StmtKind::If {
                cond,
                then_block,
                else_block,
            } => {
                let else_l = self.new_label();
                self.cond_branch(cond, else_l)?;
                self.block(then_block)?;
                match else_block {
                    Some(e) => {
                        let end = self.new_label();
                        self.emit(Inst::Jump { target: end });
                        self.bind(else_l);
                        self.block(e)?;
                        self.bind(end);
                    }
                    None => self.bind(else_l),
                }
            }
            StmtKind::While { cond, body } => {
                let top = self.new_label();
                let exit = self.new_label();
                self.bind(top);
                self.cond_branch(cond, exit)?;
                self.block(body)?;
                self.emit(Inst::Jump { target: top });
                self.bind(exit);
            }
            StmtKind::For {
                init,
                cond,
                step,
                body,
            } => {
                self.scoped(|l| -> Result<(), SimError> {
                    if let Some(i) = init {
                        l.stmt(i)?;
                    }
                    let top = l.new_label();
                    let exit = l.new_label();
                    l.bind(top);
                    l.body.next_temp = 0;
                    l.cond_branch(cond, exit)?;
                    l.block(body)?;
                    if let Some(st) = step {
                        l.stmt(st)?;
                    }
                    l.emit(Inst::Jump { target: top });
                    l.bind(exit);
                    Ok(())
                })?;
            }
            StmtKind::Barrier => self.emit(Inst::Barrier { id: 0, count: None }),
            StmtKind::PartialBarrier { id, count } => self.emit(Inst::Barrier {
                id: *id,
                count: Some(*count),
            }),
            StmtKind::Return(v) => {
                if self.body.is_kernel {
                    self.emit(Inst::Exit);
                } else {
                    if let (Some(e), Some((slot, t))) = (v, self.body.ret) {
                        let (o, vt) = self.expr(e)?;
                        let o = self.convert(o, vt, t);
                        self.assign_slot(slot, o);
                    }
                    self.emit(Inst::Ret);
                }
            }
            StmtKind::Call { name, args } => {
                self.call(name, args, span)?;
            }
            StmtKind::Label(n) => {
                let l = self.user_label(n);
                self.bind(l);
            }
            StmtKind::Goto(n) => {
                let l = self.user_label(n);
                self.emit(Inst::Jump { target: l });
            }
        }
        Ok(())
    }

    fn check_labels(&self, span: Span) -> Result<(), SimError> {
        for (name, &l) in &self.body.labels {
            if self.label_pos[l].is_none() {
                return Err(err(span, format!("goto target `{name}` is not defined")));
            }
        }
        Ok(())
    }
}

fn int_op(op: BinaryOp) -> IOp {
    use BinaryOp as B;
    match op {
        B::Add => IOp::Add,
        B::Sub => IOp::Sub,
        B::Mul => IOp::Mul,
        B::Div => IOp::Div,
        B::Rem => IOp::Rem,
        B::Shl => IOp::Shl,
        B::Shr => IOp::Shr,
        B::BitAnd => IOp::And,
        B::BitOr => IOp::Or,
        B::BitXor => IOp::Xor,
        B::Lt => IOp::Lt,
        B::Le => IOp::Le,
        B::Gt => IOp::Gt,
        B::Ge => IOp::Ge,
        B::Eq => IOp::Eq,
        B::Ne => IOp::Ne,
        B::And | B::Or => unreachable!("logical operators short-circuit"),
    }
}

fn float_op(op: BinaryOp) -> Option<FOp> {
    use BinaryOp as B;
    Some(match op {
        B::Add => FOp::Add,
        B::Sub => FOp::Sub,
        B::Mul => FOp::Mul,
        B::Div => FOp::Div,
        B::Lt => FOp::Lt,
        B::Le => FOp::Le,
        B::Gt => FOp::Gt,
        B::Ge => FOp::Ge,
        B::Eq => FOp::Eq,
        B::Ne => FOp::Ne,
        _ => return None,
    })
}

/// Lowers a kernel and the helpers it reaches.
pub fn lower(k: &Kernel, funcs: &[FuncDef]) -> Result<IrProgram, SimError> {
    let mut l = Lowerer {
        insts: Vec::new(),
        slots: Vec::new(),
        label_pos: Vec::new(),
        funcs: funcs.iter().map(|f| (f.name.as_str(), f)).collect(),
        fn_info: HashMap::new(),
        pending: Vec::new(),
        shared: Vec::new(),
        retarget: None,
        body: Body {
            scopes: vec![HashMap::new()],
            labels: HashMap::new(),
            ret: None,
            is_kernel: true,
            temps: Vec::new(),
            next_temp: 0,
        },
        call_sites: Vec::new(),
    };
    let mut builtin_slots = [0; 10];
    for (i, b) in ALL_BUILTINS.iter().enumerate() {
        builtin_slots[i] = l.slot(SlotKind::Builtin(*b));
    }
    let mut globals = Vec::new();
    let mut scalars = Vec::new();
    for p in &k.params {
        let b = match p.ty {
            ParamTy::Array(t) => {
                globals.push(ArrayInfo {
                    name: p.name.clone(),
                    ty: t,
                });
                Binding::Array(ArrRef::Static(globals.len() as u32 - 1), t)
            }
            ParamTy::Scalar(t) => {
                let slot = l.slot(SlotKind::Param);
                scalars.push(ScalarParam {
                    name: p.name.clone(),
                    ty: t,
                    slot,
                    default: p.default,
                });
                Binding::Scalar(slot, t)
            }
        };
        l.declare(&p.name, b);
    }
    for s in &k.body {
        l.stmt(s)?;
    }
    l.emit(Inst::Exit);
    l.check_labels(k.span)?;
    let mut ranges = vec![FuncRange {
        name: k.name.clone(),
        start: 0,
        end: l.insts.len(),
        ret_sites: Vec::new(),
    }];

    let mut next = 0;
    while next < l.pending.len() {
        let f = l.pending[next];
        next += 1;
        let info = &l.fn_info[&f.name];
        let (entry, params, ret) = (info.entry, info.params.clone(), info.ret);
        let mut scope = HashMap::new();
        for (p, b) in f.params.iter().zip(params) {
            scope.insert(p.name.clone(), b);
        }
        l.body = Body {
            scopes: vec![scope],
            labels: HashMap::new(),
            ret,
            is_kernel: false,
            temps: Vec::new(),
            next_temp: 0,
        };
        let start = l.insts.len();
        l.bind(entry);
        for s in &f.body {
            l.stmt(s)?;
        }
        l.emit(Inst::Ret);
        l.check_labels(f.span)?;
        ranges.push(FuncRange {
            name: f.name.clone(),
            start,
            end: l.insts.len(),
            ret_sites: Vec::new(),
        });
    }
    for (site, name) in &l.call_sites {
        if let Some(r) = ranges.iter_mut().find(|r| &r.name == name) {
            r.ret_sites.push(*site);
        }
    }
    let mut insts = l.insts;
    for i in insts.iter_mut() {
        if let Some(t) = i.targets_mut() {
            *t = l.label_pos[*t].expect("label bound");
        }
    }
    Ok(IrProgram {
        insts,
        slots: l.slots,
        globals,
        shared: l.shared,
        scalars,
        builtin_slots,
        funcs: ranges,
    })
}

impl IrProgram {
    pub fn n_slots(&self) -> usize {
        self.slots.len()
    }

    pub fn local_slots(&self) -> Vec<Slot> {
        (0..self.slots.len() as Slot)
            .filter(|&s| self.slots[s as usize] == SlotKind::Local)
            .collect()
    }

    fn range_of(&self, pc: usize) -> &FuncRange {
        self.funcs
            .iter()
            .find(|r| r.start <= pc && pc < r.end)
            .expect("instruction belongs to a body")
    }

    /// Control-flow successors; returns flow to every call site of the body.
    pub fn successors(&self, pc: usize) -> Vec<usize> {
        match self.insts[pc] {
            Inst::Jump { target } | Inst::Call { target } => vec![target],
            Inst::BranchZero { target, .. } => vec![pc + 1, target],
            Inst::Exit => Vec::new(),
            Inst::Ret => self.range_of(pc).ret_sites.clone(),
            _ => vec![pc + 1],
        }
    }

    /// Maximum number of declared scalar locals simultaneously live at any
    /// instruction, by backward dataflow.
    pub fn max_live_locals(&self) -> u32 {
        let n = self.insts.len();
        if n == 0 {
            return 0;
        }
        let words = self.slots.len().div_ceil(64);
        let is_local: Vec<bool> = self.slots.iter().map(|k| *k == SlotKind::Local).collect();
        let succs: Vec<Vec<usize>> = (0..n).map(|pc| self.successors(pc)).collect();
        let uses: Vec<Vec<Slot>> = self.insts.iter().map(|i| i.uses()).collect();
        let defs: Vec<Option<Slot>> = self.insts.iter().map(|i| i.def()).collect();
        let mut live_in = vec![vec![0u64; words]; n];
        let mut changed = true;
        while changed {
            changed = false;
            for pc in (0..n).rev() {
                let mut out = vec![0u64; words];
                for &s in &succs[pc] {
                    if s < n {
                        for (o, x) in out.iter_mut().zip(&live_in[s]) {
                            *o |= x;
                        }
                    }
                }
                if let Some(d) = defs[pc] {
                    out[d as usize / 64] &= !(1u64 << (d % 64));
                }
                for &u in &uses[pc] {
                    out[u as usize / 64] |= 1u64 << (u % 64);
                }
                if out != live_in[pc] {
                    live_in[pc] = out;
                    changed = true;
                }
            }
        }
        live_in
            .iter()
            .map(|set| {
                (0..self.slots.len())
                    .filter(|&s| is_local[s] && set[s / 64] >> (s % 64) & 1 == 1)
                    .count() as u32
            })
            .max()
            .unwrap_or(0)
    }

    /// Number of instructions reading or writing each slot.
    pub fn use_counts(&self) -> Vec<u32> {
        let mut c = vec![0u32; self.slots.len()];
        for i in &self.insts {
            for u in i.uses() {
                c[u as usize] += 1;
            }
            if let Some(d) = i.def() {
                c[d as usize] += 1;
            }
        }
        c
    }

    /// Marks `spilled` slots as memory-resident: each read is preceded by a
    /// spill load and each write followed by a spill store.
    pub fn with_spills(&self, spilled: &[Slot]) -> IrProgram {
        if spilled.is_empty() {
            return self.clone();
        }
        let is_spilled = |s: Slot| spilled.contains(&s);
        let mut insts = Vec::with_capacity(self.insts.len() * 2);
        let mut new_pos = Vec::with_capacity(self.insts.len() + 1);
        for i in &self.insts {
            new_pos.push(insts.len());
            let mut loaded = Vec::new();
            for u in i.uses() {
                if is_spilled(u) && !loaded.contains(&u) {
                    loaded.push(u);
                    insts.push(Inst::SpillLoad { slot: u });
                }
            }
            insts.push(*i);
            if let Some(d) = i.def() {
                if is_spilled(d) {
                    insts.push(Inst::SpillStore { slot: d });
                }
            }
        }
        new_pos.push(insts.len());
        // A jump to an instruction lands on its spill loads.
        for i in insts.iter_mut() {
            if let Some(t) = i.targets_mut() {
                *t = new_pos[*t];
            }
        }
        // Return sites follow the call and any spill stores after it.
        let after_call = |site: usize| -> usize {
            let call = new_pos[site - 1];
            let mut p = call + 1;
            while matches!(insts.get(p), Some(Inst::SpillStore { .. })) {
                p += 1;
            }
            p
        };
        let funcs = self
            .funcs
            .iter()
            .map(|r| FuncRange {
                name: r.name.clone(),
                start: new_pos[r.start],
                end: new_pos[r.end],
                ret_sites: r.ret_sites.iter().map(|&s| after_call(s)).collect(),
            })
            .collect();
        IrProgram {
            insts,
            funcs,
            ..self.clone()
        }
    }

    /// Locals to spill when `regs` registers are squeezed into `cap`: the
    /// `ceil(n * (regs - cap) / regs)` least-used locals, higher slot first
    /// on ties.
    pub fn spill_choice(&self, regs: u32, cap: u32) -> Vec<Slot> {
        if cap >= regs || regs == 0 {
            return Vec::new();
        }
        let locals = self.local_slots();
        let n = locals.len() as u64;
        let count = (n * u64::from(regs - cap)).div_ceil(u64::from(regs)) as usize;
        let uses = self.use_counts();
        let mut order = locals;
        order.sort_by(|a, b| uses[*a as usize].cmp(&uses[*b as usize]).then(b.cmp(a)));
        order.truncate(count);
        order
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lower_src(src: &str) -> IrProgram {
        let p = parse_program(src).unwrap();
        lower(&p.kernels[0], &p.functions).unwrap()
    }

    #[test]
    fn assignment_folds_into_producer() {
        let ir = lower_src("kernel k(int a[4]) { int x; x = threadIdx.x + 1; a[0] = x; }");
        let movs = ir.insts.iter().filter(|i| matches!(i, Inst::Mov { .. })).count();
        assert_eq!(movs, 0, "{:?}", ir.insts);
    }

    #[test]
    fn single_local_is_live() {
        let ir = lower_src("kernel k(int a[64]) { int i; i = threadIdx.x; a[i] = i; }");
        assert_eq!(ir.max_live_locals(), 1);
    }

    #[test]
    fn liveness_sees_loop_carried_values() {
        let ir = lower_src(
            "kernel k(int a[64]) { int s = 0; int i; for (i = 0; i < 4; i = i + 1) { s = s + i; } a[0] = s; }",
        );
        assert_eq!(ir.max_live_locals(), 2);
    }

    #[test]
    fn liveness_through_calls() {
        let ir = lower_src(
            "int twice(int v) { int w = v + v; return w; }
             kernel k(int a[64]) { int x = threadIdx.x; int y = twice(x); a[x] = y; }",
        );
        // x stays live across the call while v and w are live inside it.
        assert_eq!(ir.max_live_locals(), 2);
    }

    #[test]
    fn spill_pass_keeps_jump_targets_consistent() {
        let ir = lower_src(
            "kernel k(int a[64]) { int s = 0; int i; for (i = 0; i < 4; i = i + 1) { s = s + i; } a[0] = s; }",
        );
        let locals = ir.local_slots();
        let sp = ir.with_spills(&locals);
        for (pc, i) in sp.insts.iter().enumerate() {
            if let Inst::Jump { target } | Inst::BranchZero { target, .. } = i {
                assert!(*target <= sp.insts.len(), "{pc}");
            }
        }
        let loads = sp.insts.iter().filter(|i| matches!(i, Inst::SpillLoad { .. })).count();
        assert!(loads > 0);
    }

    #[test]
    fn spill_choice_prefers_rarely_used() {
        let ir = lower_src(
            "kernel k(int a[64]) { int hot = threadIdx.x; int cold = 1; a[hot] = hot + hot + hot; a[0] = cold; }",
        );
        let chosen = ir.spill_choice(64, 48);
        // ceil(2 * 16 / 64) = 1
        assert_eq!(chosen.len(), 1);
        let uses = ir.use_counts();
        let other = ir.local_slots().into_iter().find(|s| *s != chosen[0]).unwrap();
        assert!(uses[chosen[0] as usize] <= uses[other as usize]);
    }
}
