//! Lock-step warp execution shared by the functional and timed drivers.
//!
//! Lanes of a warp that diverge keep their own program counters. Each step
//! runs the lanes whose position is minimal, where a position is the call
//! return stack (outermost first) followed by the pc, and a lane deeper in a
//! call orders before one that has already returned to the same point. Lanes
//! therefore reconverge wherever their paths meet again, gotos included.

use std::cmp::Ordering;

use crate::frontend::{Dims, Ty};

use super::ir::*;
use super::SimError;

pub const LANES: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WarpState {
    Ready,
    AtBarrier(u32),
    Done,
}

/// Timing class of an issued instruction.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Class {
    Compute,
    /// Shared-memory access; compute latency.
    Shared,
    GlobalLoad,
    GlobalStore,
    Atomic,
    Shuffle,
    SpillLoad,
    SpillStore,
    Control,
}

impl Class {
    pub fn is_memory(self) -> bool {
        matches!(
            self,
            Class::GlobalLoad | Class::GlobalStore | Class::Atomic | Class::SpillLoad | Class::SpillStore
        )
    }
}

pub struct Warp {
    pub block: usize,
    /// Slot-major: `regs[slot * 32 + lane]`.
    pub regs: Vec<u32>,
    pc: [u32; LANES],
    stacks: Vec<Vec<u32>>,
    deep_lanes: u32,
    /// Lanes that exist and have not exited.
    pub live: u32,
    pub state: WarpState,
    /// Lanes executing the next instruction, and its pc.
    pub cur_mask: u32,
    pub cur_pc: usize,
    // Timing state.
    pub ready_at: Vec<u64>,
    pub mem_pending: Vec<bool>,
    pub busy_until: u64,
    pub drain_at: u64,
}

pub struct Barrier {
    pub arrived: u32,
    pub expected: u32,
    pub waiting: Vec<usize>,
}

pub struct BlockRt {
    pub id: u32,
    pub shared: Vec<Vec<u32>>,
    pub barriers: Vec<Barrier>,
    pub live_threads: u32,
    pub warps: Vec<usize>,
    pub done_warps: usize,
}

/// Everything a running kernel can touch.
pub struct Machine<'p> {
    pub prog: &'p IrProgram,
    pub globals: Vec<Vec<u32>>,
    pub block_dims: Dims,
    pub grid_dim: u32,
    pub scalar_values: Vec<u32>,
    pub warps: Vec<Warp>,
    pub blocks: Vec<BlockRt>,
    uses: Vec<Vec<Slot>>,
}

fn cmp_pos(sa: &[u32], pa: u32, sb: &[u32], pb: u32) -> Ordering {
    let a = sa.iter().copied().chain(std::iter::once(pa));
    let b = sb.iter().copied().chain(std::iter::once(pb));
    let (la, lb) = (sa.len(), sb.len());
    for (x, y) in a.zip(b) {
        match x.cmp(&y) {
            Ordering::Equal => continue,
            o => return o,
        }
    }
    // Equal prefix: the deeper lane goes first.
    lb.cmp(&la)
}

#[inline]
fn rd(regs: &[u32], o: Operand, lane: usize) -> u32 {
    match o {
        Operand::Slot(s) => regs[s as usize * LANES + lane],
        Operand::Imm(v) => v,
    }
}

#[inline]
fn lanes(mask: u32) -> impl Iterator<Item = usize> {
    let mut m = mask;
    std::iter::from_fn(move || {
        if m == 0 {
            None
        } else {
            let l = m.trailing_zeros() as usize;
            m &= m - 1;
            Some(l)
        }
    })
}

fn ibin(op: IOp, a: u32, b: u32) -> Option<u32> {
    let (x, y) = (a as i32, b as i32);
    Some(match op {
        IOp::Add => x.wrapping_add(y) as u32,
        IOp::Sub => x.wrapping_sub(y) as u32,
        IOp::Mul => x.wrapping_mul(y) as u32,
        IOp::Div => {
            if y == 0 {
                return None;
            }
            x.wrapping_div(y) as u32
        }
        IOp::Rem => {
            if y == 0 {
                return None;
            }
            x.wrapping_rem(y) as u32
        }
        IOp::Shl => x.wrapping_shl(b) as u32,
        IOp::Shr => x.wrapping_shr(b) as u32,
        IOp::And => a & b,
        IOp::Or => a | b,
        IOp::Xor => a ^ b,
        IOp::Lt => (x < y) as u32,
        IOp::Le => (x <= y) as u32,
        IOp::Gt => (x > y) as u32,
        IOp::Ge => (x >= y) as u32,
        IOp::Eq => (x == y) as u32,
        IOp::Ne => (x != y) as u32,
        IOp::Min => x.min(y) as u32,
        IOp::Max => x.max(y) as u32,
    })
}

fn fbin(op: FOp, a: u32, b: u32) -> u32 {
    let (x, y) = (f32::from_bits(a), f32::from_bits(b));
    match op {
        FOp::Add => (x + y).to_bits(),
        FOp::Sub => (x - y).to_bits(),
        FOp::Mul => (x * y).to_bits(),
        FOp::Div => (x / y).to_bits(),
        FOp::Lt => (x < y) as u32,
        FOp::Le => (x <= y) as u32,
        FOp::Gt => (x > y) as u32,
        FOp::Ge => (x >= y) as u32,
        FOp::Eq => (x == y) as u32,
        FOp::Ne => (x != y) as u32,
        FOp::Min => x.min(y).to_bits(),
        FOp::Max => x.max(y).to_bits(),
    }
}

fn unop(op: UOp, a: u32) -> u32 {
    match op {
        UOp::INeg => (a as i32).wrapping_neg() as u32,
        UOp::FNeg => (-f32::from_bits(a)).to_bits(),
        UOp::INot => (a == 0) as u32,
        UOp::FNot => (f32::from_bits(a) == 0.0) as u32,
        UOp::BitNot => !a,
        UOp::IToF => (a as i32 as f32).to_bits(),
        UOp::FToI => f32::from_bits(a) as i32 as u32,
    }
}

/// What an executed instruction did, for the timing model.
pub struct Issued {

    pub def: Option<Slot>,
}

impl<'p> Machine<'p> {
    pub fn new(
        prog: &'p IrProgram,
        globals: Vec<Vec<u32>>,
        block_dims: Dims,
        grid_dim: u32,
        scalar_values: Vec<u32>,
    ) -> Self {
        Machine {
            prog,
            globals,
            block_dims,
            grid_dim,
            scalar_values,
            warps: Vec::new(),
            blocks: Vec::new(),
            uses: prog.insts.iter().map(|i| i.uses()).collect(),
        }
    }

    pub fn uses(&self, pc: usize) -> &[Slot] {
        &self.uses[pc]
    }

    /// Creates a block and its warps; returns the block index.
    pub fn launch_block(&mut self, id: u32) -> usize {
        let prog = self.prog;
        let threads = self.block_dims.product();
        let n_warps = threads.div_ceil(LANES as u32) as usize;
        let n_slots = prog.n_slots();
        let bidx = self.blocks.len();
        let mut warp_ids = Vec::with_capacity(n_warps);
        for w in 0..n_warps {
            let mut regs = vec![0u32; n_slots * LANES];
            let mut live = 0u32;
            for lane in 0..LANES {
                let t = (w * LANES + lane) as u32;
                if t >= threads {
                    continue;
                }
                live |= 1 << lane;
                let (bx, by) = (self.block_dims.x, self.block_dims.y);
                let vals = [
                    t % bx,
                    (t / bx) % by,
                    t / (bx * by),
                    id,
                    0,
                    0,
                    bx,
                    by,
                    self.block_dims.z,
                    self.grid_dim,
                ];
                for (i, v) in vals.iter().enumerate() {
                    regs[prog.builtin_slots[i] as usize * LANES + lane] = *v;
                }
                for (p, v) in prog.scalars.iter().zip(&self.scalar_values) {
                    regs[p.slot as usize * LANES + lane] = *v;
                }
            }
            let mut warp = Warp {
                block: bidx,
                regs,
                pc: [0; LANES],
                stacks: vec![Vec::new(); LANES],
                deep_lanes: 0,
                live,
                state: WarpState::Ready,
                cur_mask: 0,
                cur_pc: 0,
                ready_at: vec![0; n_slots],
                mem_pending: vec![false; n_slots],
                busy_until: 0,
                drain_at: 0,
            };
            warp.regroup();
            warp_ids.push(self.warps.len());
            self.warps.push(warp);
        }
        self.blocks.push(BlockRt {
            id,
            shared: prog.shared.iter().map(|s| vec![0; s.len as usize]).collect(),
            barriers: (0..16)
                .map(|_| Barrier {
                    arrived: 0,
                    expected: 0,
                    waiting: Vec::new(),
                })
                .collect(),
            live_threads: threads,
            warps: warp_ids,
            done_warps: 0,
        });
        bidx
    }

    pub fn array_name(&self, id: u32) -> String {
        if id & SHARED_BIT != 0 {
            self.prog
                .shared
                .get((id & !SHARED_BIT) as usize)
                .map_or_else(|| format!("<shared {id}>"), |s| s.name.clone())
        } else {
            self.prog
                .globals
                .get(id as usize)
                .map_or_else(|| format!("<global {id}>"), |g| g.name.clone())
        }
    }

    fn arr_id(regs: &[u32], r: ArrRef, lane: usize) -> u32 {
        match r {
            ArrRef::Static(id) => id,
            ArrRef::Dynamic(s) => regs[s as usize * LANES + lane],
        }
    }

    /// Timing class of the warp's next instruction.
    pub fn class_of(&self, w: usize) -> Class {
        let warp = &self.warps[w];
        let mem_class = |r: ArrRef, load: bool| {
            let lane = warp.cur_mask.trailing_zeros() as usize;
            let id = Self::arr_id(&warp.regs, r, lane.min(LANES - 1));
            if id & SHARED_BIT != 0 {
                Class::Shared
            } else if load {
                Class::GlobalLoad
            } else {
                Class::GlobalStore
            }
        };
        match self.prog.insts[warp.cur_pc] {
            Inst::Mov { .. } | Inst::IBin { .. } | Inst::FBin { .. } | Inst::Un { .. } => Class::Compute,
            Inst::Load { arr, .. } => mem_class(arr, true),
            Inst::Store { arr, .. } => mem_class(arr, false),
            Inst::Atomic { arr, .. } => match mem_class(arr, false) {
                Class::Shared => Class::Shared,
                _ => Class::Atomic,
            },
            Inst::Shfl { .. } => Class::Shuffle,
            Inst::SpillLoad { .. } => Class::SpillLoad,
            Inst::SpillStore { .. } => Class::SpillStore,
            Inst::Jump { .. }
            | Inst::BranchZero { .. }
            | Inst::Barrier { .. }
            | Inst::Call { .. }
            | Inst::Ret
            | Inst::Exit => Class::Control,
        }
    }

    fn oob(&self, id: u32, index: u32) -> SimError {
        let len = if id & SHARED_BIT != 0 {
            self.prog.shared[(id & !SHARED_BIT) as usize].len as usize
        } else {
            self.globals[id as usize].len()
        };
        SimError::OutOfBounds {
            array: self.array_name(id),
            index: i64::from(index as i32),
            len,
        }
    }

    fn element(&mut self, block: usize, id: u32, index: u32) -> Result<&mut u32, SimError> {
        let i = index as i32;
        let store = if id & SHARED_BIT != 0 {
            self.blocks[block].shared.get_mut((id & !SHARED_BIT) as usize)
        } else {
            self.globals.get_mut(id as usize)
        };
        let Some(store) = store else {
            return Err(SimError::Internal(format!("bad array id {id}")));
        };
        if i < 0 || i as usize >= store.len() {
            return Err(self.oob(id, index));
        }
        let store = if id & SHARED_BIT != 0 {
            &mut self.blocks[block].shared[(id & !SHARED_BIT) as usize]
        } else {
            &mut self.globals[id as usize]
        };
        Ok(&mut store[i as usize])
    }

    fn elem_ty(&self, id: u32) -> Ty {
        if id & SHARED_BIT != 0 {
            self.prog.shared[(id & !SHARED_BIT) as usize].ty
        } else {
            self.prog.globals[id as usize].ty
        }
    }

    /// Executes the warp's next instruction for its current lane group.
    pub fn step(&mut self, w: usize) -> Result<Issued, SimError> {
        let pc = self.warps[w].cur_pc;
        let mask = self.warps[w].cur_mask;
        let inst = self.prog.insts[pc];
        let block = self.warps[w].block;
        let def = inst.def();
        let next = |warp: &mut Warp| {
            for l in lanes(mask) {
                warp.pc[l] = pc as u32 + 1;
            }
        };
        match inst {
            Inst::Mov { dst, src } => {
                let warp = &mut self.warps[w];
                for l in lanes(mask) {
                    warp.regs[dst as usize * LANES + l] = rd(&warp.regs, src, l);
                }
                next(warp);
            }
            Inst::IBin { op, dst, a, b } => {
                let warp = &mut self.warps[w];
                for l in lanes(mask) {
                    let v = ibin(op, rd(&warp.regs, a, l), rd(&warp.regs, b, l))
                        .ok_or(SimError::DivisionByZero { pc })?;
                    warp.regs[dst as usize * LANES + l] = v;
                }
                next(warp);
            }
            Inst::FBin { op, dst, a, b } => {
                let warp = &mut self.warps[w];
                for l in lanes(mask) {
                    warp.regs[dst as usize * LANES + l] = fbin(op, rd(&warp.regs, a, l), rd(&warp.regs, b, l));
                }
                next(warp);
            }
            Inst::Un { op, dst, a } => {
                let warp = &mut self.warps[w];
                for l in lanes(mask) {
                    warp.regs[dst as usize * LANES + l] = unop(op, rd(&warp.regs, a, l));
                }
                next(warp);
            }
            Inst::Load { dst, arr, idx } => {
                for l in lanes(mask) {
                    let (id, i) = {
                        let warp = &self.warps[w];
                        (Self::arr_id(&warp.regs, arr, l), rd(&warp.regs, idx, l))
                    };
                    let v = *self.element(block, id, i)?;
                    self.warps[w].regs[dst as usize * LANES + l] = v;
                }
                next(&mut self.warps[w]);
            }
            Inst::Store { arr, idx, val } => {
                for l in lanes(mask) {
                    let (id, i, v) = {
                        let warp = &self.warps[w];
                        (
                            Self::arr_id(&warp.regs, arr, l),
                            rd(&warp.regs, idx, l),
                            rd(&warp.regs, val, l),
                        )
                    };
                    *self.element(block, id, i)? = v;
                }
                next(&mut self.warps[w]);
            }
            Inst::Atomic { arr, idx, val, ty } => {
                for l in lanes(mask) {
                    let (id, i, v) = {
                        let warp = &self.warps[w];
                        (
                            Self::arr_id(&warp.regs, arr, l),
                            rd(&warp.regs, idx, l),
                            rd(&warp.regs, val, l),
                        )
                    };
                    let ety = self.elem_ty(id);
                    debug_assert_eq!(ety, ty);
                    let e = self.element(block, id, i)?;
                    *e = match ety {
                        Ty::Int => (*e as i32).wrapping_add(v as i32) as u32,
                        Ty::Float => (f32::from_bits(*e) + f32::from_bits(v)).to_bits(),
                    };
                }
                next(&mut self.warps[w]);
            }
            Inst::Shfl { dst, src, mask: m } => {
                let warp = &mut self.warps[w];
                let mut vals = [0u32; LANES];
                for l in lanes(mask) {
                    let s = l ^ m as usize;
                    let from = if s < LANES && mask >> s & 1 == 1 { s } else { l };
                    vals[l] = warp.regs[src as usize * LANES + from];
                }
                for l in lanes(mask) {
                    warp.regs[dst as usize * LANES + l] = vals[l];
                }
                next(warp);
            }
            Inst::Jump { target } => {
                let warp = &mut self.warps[w];
                for l in lanes(mask) {
                    warp.pc[l] = target as u32;
                }
            }
            Inst::BranchZero { cond, target } => {
                let warp = &mut self.warps[w];
                for l in lanes(mask) {
                    warp.pc[l] = if rd(&warp.regs, cond, l) == 0 {
                        target as u32
                    } else {
                        pc as u32 + 1
                    };
                }
            }
            Inst::Call { target } => {
                let warp = &mut self.warps[w];
                for l in lanes(mask) {
                    if warp.stacks[l].is_empty() {
                        warp.deep_lanes += 1;
                    }
                    warp.stacks[l].push(pc as u32 + 1);
                    warp.pc[l] = target as u32;
                }
            }
            Inst::Ret => {
                let warp = &mut self.warps[w];
                for l in lanes(mask) {
                    let r = warp.stacks[l]
                        .pop()
                        .ok_or_else(|| SimError::Internal("return with empty call stack".into()))?;
                    if warp.stacks[l].is_empty() {
                        warp.deep_lanes -= 1;
                    }
                    warp.pc[l] = r;
                }
            }
            Inst::SpillLoad { .. } | Inst::SpillStore { .. } => next(&mut self.warps[w]),
            Inst::Barrier { id, count } => {
                let warp = &mut self.warps[w];
                if mask != warp.live {
                    return Err(SimError::DivergentBarrier {
                        id,
                        block: self.blocks[block].id,
                        active: mask.count_ones(),
                        live: warp.live.count_ones(),
                    });
                }
                if id > 15 {
                    return Err(SimError::Internal(format!("barrier id {id} out of range")));
                }
                next(warp);
                warp.state = WarpState::AtBarrier(id);
                let b = &mut self.blocks[block];
                let bar = &mut b.barriers[id as usize];
                bar.arrived += mask.count_ones();
                bar.expected = count.unwrap_or(b.live_threads);
                bar.waiting.push(w);
                self.try_release(block, id);
                return Ok(Issued { def: None });
            }
            Inst::Exit => {
                let n = mask.count_ones();
                let warp = &mut self.warps[w];
                warp.live &= !mask;
                self.blocks[block].live_threads -= n;
                if self.warps[w].live == 0 {
                    self.warps[w].state = WarpState::Done;
                    self.blocks[block].done_warps += 1;
                }
                if self.blocks[block].barriers[0].arrived > 0 {
                    self.blocks[block].barriers[0].expected = self.blocks[block].live_threads;
                    self.try_release(block, 0);
                }
                if self.warps[w].state != WarpState::Done {
                    self.warps[w].regroup();
                }
                return Ok(Issued { def: None });
            }
        }
        self.warps[w].regroup();
        Ok(Issued { def })
    }

    fn try_release(&mut self, block: usize, id: u32) {
        let bar = &mut self.blocks[block].barriers[id as usize];
        if bar.arrived < bar.expected {
            return;
        }
        bar.arrived = 0;
        let waiting = std::mem::take(&mut bar.waiting);
        for w in waiting {
            self.warps[w].state = WarpState::Ready;
            self.warps[w].regroup();
        }
    }

    /// When every unfinished warp of the block waits at a barrier, no
    /// arrival can ever release them.
    pub fn deadlock_in(&self, block: usize) -> Option<SimError> {
        let b = &self.blocks[block];
        let stuck = b
            .warps
            .iter()
            .all(|&w| matches!(self.warps[w].state, WarpState::AtBarrier(_) | WarpState::Done));
        if !stuck || b.done_warps == b.warps.len() {
            return None;
        }
        let (id, bar) = b
            .barriers
            .iter()
            .enumerate()
            .find(|(_, bar)| !bar.waiting.is_empty())
            .expect("a waiting barrier");
        Some(SimError::BarrierDeadlock {
            id: id as u32,
            block: b.id,
            arrived: bar.arrived,
            expected: bar.expected,
        })
    }

    pub fn block_done(&self, block: usize) -> bool {
        let b = &self.blocks[block];
        b.done_warps == b.warps.len()
    }
}

impl Warp {
    /// Recomputes the lane group that runs next.
    pub fn regroup(&mut self) {
        if self.live == 0 {
            self.cur_mask = 0;
            return;
        }
        if self.deep_lanes == 0 {
            let mut min = u32::MAX;
            for l in lanes(self.live) {
                min = min.min(self.pc[l]);
            }
            let mut m = 0;
            for l in lanes(self.live) {
                if self.pc[l] == min {
                    m |= 1 << l;
                }
            }
            self.cur_pc = min as usize;
            self.cur_mask = m;
            return;
        }
        let mut best = self.live.trailing_zeros() as usize;
        for l in lanes(self.live) {
            if cmp_pos(&self.stacks[l], self.pc[l], &self.stacks[best], self.pc[best]) == Ordering::Less {
                best = l;
            }
        }
        let mut m = 0;
        for l in lanes(self.live) {
            if cmp_pos(&self.stacks[l], self.pc[l], &self.stacks[best], self.pc[best]) == Ordering::Equal {
                m |= 1 << l;
            }
        }
        self.cur_pc = self.pc[best] as usize;
        self.cur_mask = m;
    }
}
