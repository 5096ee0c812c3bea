//! Deterministic lock-step SM simulation: a functional interpreter used as
//! the equivalence oracle, and a cycle-level scheduler used as the profiler.

mod engine;
pub mod ir;
pub mod memory;
mod timed;

use std::fmt;

use thiserror::Error;

use crate::frontend::{Dims, FuncDef, Kernel, ParamTy, Span};
use crate::machine::{MachineError, SMConfig};

use engine::{Machine, WarpState};
pub use memory::{ArrayData, MemoryImage};
pub use timed::run_timed;

/// Instructions executed by one functional run before it is declared
/// non-terminating.
pub const STEP_LIMIT: u64 = 1 << 32;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SimError {
    #[error("{span}: cannot lower: {message}")]
    Lowering { span: Span, message: String },
    #[error("out-of-bounds access {array}[{index}] (length {len})")]
    OutOfBounds { array: String, index: i64, len: usize },
    #[error("integer division by zero at instruction {pc}")]
    DivisionByZero { pc: usize },
    #[error("barrier deadlock at barrier {id} in block {block}: {arrived} of {expected} threads arrived")]
    BarrierDeadlock {
        id: u32,
        block: u32,
        arrived: u32,
        expected: u32,
    },
    #[error("divergent barrier {id} in block {block}: {active} of {live} live lanes of a warp arrived")]
    DivergentBarrier { id: u32, block: u32, active: u32, live: u32 },
    #[error("memory image has no array `{0}`")]
    MissingArray(String),
    #[error("no value for scalar parameter `{0}`")]
    MissingScalar(String),
    #[error("array parameter `{0}` has no declared length")]
    UnknownLength(String),
    #[error("array `{name}` is {found} in the memory image but {expected} in the kernel")]
    ArrayTypeMismatch {
        name: String,
        expected: String,
        found: String,
    },
    #[error(transparent)]
    Machine(#[from] MachineError),
    #[error("invalid launch: {0}")]
    InvalidLaunch(String),
    #[error("memory image line {line}: {message}")]
    MemoryFormat { line: usize, message: String },
    #[error("execution exceeded {0} instructions")]
    StepLimit(u64),
    #[error("internal simulator error: {0}")]
    Internal(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LaunchConfig {
    pub grid_dim: u32,
    pub block_dims: Dims,
    /// Per-thread register limit; registers beyond it are spilled.
    pub reg_cap: Option<u32>,
}

impl LaunchConfig {
    /// The kernel's own grid and block dimensions, uncapped.
    pub fn of(k: &Kernel) -> Self {
        LaunchConfig {
            grid_dim: k.grid_dim,
            block_dims: k.block_dims,
            reg_cap: None,
        }
    }

    pub fn with_cap(self, reg_cap: Option<u32>) -> Self {
        LaunchConfig { reg_cap, ..self }
    }

    fn validate(&self, max_threads: u32) -> Result<(), SimError> {
        let n = u64::from(self.block_dims.x) * u64::from(self.block_dims.y) * u64::from(self.block_dims.z);
        if n == 0 || self.grid_dim == 0 {
            return Err(SimError::InvalidLaunch("empty grid or block".into()));
        }
        if n > u64::from(max_threads) {
            return Err(SimError::InvalidLaunch(format!(
                "{n} threads per block exceeds the limit of {max_threads}"
            )));
        }
        Ok(())
    }
}

/// Metrics of one timed run.
#[derive(Debug, Clone, PartialEq)]
pub struct ProfileResult {
    /// Cycles until the slowest SM drains.
    pub elapsed_cycles: u64,
    /// Issued instructions over available issue slots, averaged over the
    /// SMs' busy time.
    pub issue_slot_utilization: f64,
    /// Share of stalled issue slots whose dominant cause is an outstanding
    /// memory operation.
    pub meminst_stall_fraction: f64,
    /// Mean resident warps over the SM warp limit.
    pub achieved_occupancy: f64,
    pub spill_loads_stores: u64,
    pub issued_instructions: u64,
    pub blocks_per_sm: u32,
    pub regs_per_thread: u32,
}

impl fmt::Display for ProfileResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "elapsed_cycles = {}", self.elapsed_cycles)?;
        writeln!(f, "issue_slot_utilization = {:.6}", self.issue_slot_utilization)?;
        writeln!(f, "meminst_stall_fraction = {:.6}", self.meminst_stall_fraction)?;
        writeln!(f, "achieved_occupancy = {:.6}", self.achieved_occupancy)?;
        writeln!(f, "spill_loads_stores = {}", self.spill_loads_stores)?;
        writeln!(f, "issued_instructions = {}", self.issued_instructions)?;
        writeln!(f, "blocks_per_sm = {}", self.blocks_per_sm)?;
        writeln!(f, "regs_per_thread = {}", self.regs_per_thread)
    }
}

/// Outcome of a deadlock probe.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum DeadlockReport {
    Clean,
    Deadlock {
        id: u32,
        block: u32,
        arrived: u32,
        expected: u32,
    },
}

impl fmt::Display for DeadlockReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DeadlockReport::Clean => writeln!(f, "deadlock = none"),
            DeadlockReport::Deadlock {
                id,
                block,
                arrived,
                expected,
            } => {
                writeln!(f, "deadlock = barrier {id}")?;
                writeln!(f, "block = {block}")?;
                writeln!(f, "arrived = {arrived}")?;
                writeln!(f, "expected = {expected}")
            }
        }
    }
}

/// Global array contents and scalar values in the program's binding order.
fn bind_memory(prog: &ir::IrProgram, mem: &MemoryImage) -> Result<(Vec<Vec<u32>>, Vec<u32>), SimError> {
    let mut globals = Vec::with_capacity(prog.globals.len());
    for g in &prog.globals {
        let a = mem.arrays.get(&g.name).ok_or_else(|| SimError::MissingArray(g.name.clone()))?;
        if a.ty != g.ty {
            return Err(SimError::ArrayTypeMismatch {
                name: g.name.clone(),
                expected: g.ty.to_string(),
                found: a.ty.to_string(),
            });
        }
        globals.push(a.data.clone());
    }
    let mut scalars = Vec::with_capacity(prog.scalars.len());
    for p in &prog.scalars {
        let bits = match (mem.scalars.get(&p.name), p.default) {
            (Some((ty, bits)), _) => {
                if *ty == p.ty {
                    *bits
                } else {
                    match p.ty {
                        crate::frontend::Ty::Float => (*bits as i32 as f32).to_bits(),
                        crate::frontend::Ty::Int => f32::from_bits(*bits) as i32 as u32,
                    }
                }
            }
            (None, Some(d)) => match d {
                crate::frontend::Literal::Int(v) => v as u32,
                crate::frontend::Literal::Float(v) => v.to_bits(),
            },
            (None, None) => return Err(SimError::MissingScalar(p.name.clone())),
        };
        scalars.push(bits);
    }
    Ok((globals, scalars))
}

fn write_back(prog: &ir::IrProgram, mut mem: MemoryImage, globals: Vec<Vec<u32>>) -> MemoryImage {
    for (g, data) in prog.globals.iter().zip(globals) {
        if let Some(a) = mem.arrays.get_mut(&g.name) {
            a.data = data;
        }
    }
    mem
}

/// Cycle-weighted issue-slot utilization of running `p1` then `p2`.
pub fn combined_utilization(p1: &ProfileResult, p2: &ProfileResult) -> f64 {
    crate::machine::combined_utilization(
        p1.issue_slot_utilization,
        p1.elapsed_cycles as f64,
        p2.issue_slot_utilization,
        p2.elapsed_cycles as f64,
    )
}

/// Fills any missing array parameters with seeded data so a kernel can be
/// run without an explicit image.
pub fn image_for(k: &Kernel, seed: u64) -> Result<MemoryImage, SimError> {
    MemoryImage::seeded(&k.params, seed)
}

/// Names of the kernel's array parameters.
pub fn array_params(k: &Kernel) -> Vec<&str> {
    k.params
        .iter()
        .filter(|p| matches!(p.ty, ParamTy::Array(_)))
        .map(|p| p.name.as_str())
        .collect()
}

fn run_blocks(m: &mut Machine<'_>) -> Result<(), SimError> {
    let mut steps: u64 = 0;
    for b in 0..m.grid_dim {
        let bi = m.launch_block(b);
        loop {
            let mut progressed = false;
            let warps = m.blocks[bi].warps.clone();
            for w in warps {
                while m.warps[w].state == WarpState::Ready {
                    m.step(w)?;
                    steps += 1;
                    if steps > STEP_LIMIT {
                        return Err(SimError::StepLimit(STEP_LIMIT));
                    }
                    progressed = true;
                }
            }
            if m.block_done(bi) {
                break;
            }
            if !progressed {
                return Err(m.deadlock_in(bi).unwrap_or_else(|| {
                    SimError::Internal("block made no progress without a deadlock".into())
                }));
            }
        }
        // Finished blocks hold no state worth keeping.
        let warps = std::mem::take(&mut m.blocks[bi].warps);
        for w in warps {
            m.warps[w].regs = Vec::new();
        }
    }
    Ok(())
}

/// Executes a lowered program functionally.
pub fn run_program(
    prog: &ir::IrProgram,
    launch: &LaunchConfig,
    mem: &MemoryImage,
) -> Result<MemoryImage, SimError> {
    launch.validate(SMConfig::default().max_threads_per_block)?;
    let (globals, scalars) = bind_memory(prog, mem)?;
    let mut m = Machine::new(prog, globals, launch.block_dims, launch.grid_dim, scalars);
    run_blocks(&mut m)?;
    let globals = std::mem::take(&mut m.globals);
    Ok(write_back(prog, mem.clone(), globals))
}

/// Runs every block to completion in ascending block order; within a block
/// warps run round-robin, each until it waits at a barrier or exits.
pub fn run_functional(
    k: &Kernel,
    funcs: &[FuncDef],
    launch: &LaunchConfig,
    mem: &MemoryImage,
) -> Result<MemoryImage, SimError> {
    let prog = ir::lower(k, funcs)?;
    run_program(&prog, launch, mem)
}

/// Runs `k1` then `k2` back to back on one memory image.
pub fn run_sequential(
    kernels: &[(&Kernel, LaunchConfig)],
    funcs: &[FuncDef],
    mem: &MemoryImage,
) -> Result<MemoryImage, SimError> {
    let mut cur = mem.clone();
    for (k, launch) in kernels {
        cur = run_functional(k, funcs, launch, &cur)?;
    }
    Ok(cur)
}

/// Runs the kernel functionally and reports a barrier deadlock as data.
pub fn detect_deadlock(
    k: &Kernel,
    funcs: &[FuncDef],
    launch: &LaunchConfig,
    mem: &MemoryImage,
) -> Result<DeadlockReport, SimError> {
    match run_functional(k, funcs, launch, mem) {
        Ok(_) => Ok(DeadlockReport::Clean),
        Err(SimError::BarrierDeadlock {
            id,
            block,
            arrived,
            expected,
        }) => Ok(DeadlockReport::Deadlock {
            id,
            block,
            arrived,
            expected,
        }),
        Err(e) => Err(e),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::frontend::{parse_program, Literal, Program, Ty};

    fn prog(src: &str) -> Program {
        parse_program(src).unwrap()
    }

    fn run(p: &Program, mem: &MemoryImage) -> Result<MemoryImage, SimError> {
        let k = &p.kernels[0];
        run_functional(k, &p.functions, &LaunchConfig::of(k), mem)
    }

    #[test]
    fn vector_add_sums_elementwise() {
        let p = prog(
            "kernel add(int a[64], int b[64], int c[64]) dims(64,1,1) { int i = threadIdx.x; a[i] = b[i] + c[i]; }",
        );
        let b: Vec<i32> = (0..64).collect();
        let c: Vec<i32> = (0..64).map(|i| 1000 - 3 * i).collect();
        let mem = MemoryImage::new()
            .with_array("a", ArrayData::zeros(Ty::Int, 64))
            .with_array("b", ArrayData::ints(&b))
            .with_array("c", ArrayData::ints(&c));
        let out = run(&p, &mem).unwrap();
        let want: Vec<i32> = (0..64).map(|i| b[i] + c[i]).collect();
        assert_eq!(out.arrays["a"].as_ints(), want);
    }

    #[test]
    fn xor_shuffle_swaps_neighbours() {
        let p = prog("kernel s(int o[32]) { int v = threadIdx.x; o[threadIdx.x] = warp_shfl_xor(v, 1); }");
        let mem = MemoryImage::new().with_array("o", ArrayData::zeros(Ty::Int, 32));
        let out = run(&p, &mem).unwrap().arrays["o"].as_ints();
        for (i, v) in out.iter().enumerate() {
            assert_eq!(*v, (i ^ 1) as i32);
        }
    }

    #[test]
    fn divergent_paths_reconverge() {
        let p = prog(
            "kernel d(int o[32]) {
                int i = threadIdx.x; int v = 0;
                if (i % 2 == 0) { v = 10; } else { if (i < 9) { v = 20; } else { goto odd; } }
                v = v + 1;
                odd:
                v = v + warp_shfl_xor(i, 16);
                o[i] = v;
             }",
        );
        let mem = MemoryImage::new().with_array("o", ArrayData::zeros(Ty::Int, 32));
        let out = run(&p, &mem).unwrap().arrays["o"].as_ints();
        for i in 0..32i32 {
            let base = if i % 2 == 0 {
                11
            } else if i < 9 {
                21
            } else {
                0
            };
            assert_eq!(out[i as usize], base + (i ^ 16), "lane {i}");
        }
    }

    #[test]
    fn helper_calls_under_divergence() {
        let p = prog(
            "int f(int x) { if (x > 3) { return x * 2; } return x + 100; }
             kernel k(int o[32]) { int i = threadIdx.x; if (i < 8) { o[i] = f(i); } else { o[i] = f(f(i)); } }",
        );
        let mem = MemoryImage::new().with_array("o", ArrayData::zeros(Ty::Int, 32));
        let out = run(&p, &mem).unwrap().arrays["o"].as_ints();
        let f = |x: i32| if x > 3 { x * 2 } else { x + 100 };
        for i in 0..32 {
            let want = if i < 8 { f(i) } else { f(f(i)) };
            assert_eq!(out[i as usize], want);
        }
    }

    #[test]
    fn shared_memory_and_barrier() {
        let p = prog(
            "kernel r(int o[64]) dims(64,1,1) {
                shared int s[64];
                int i = threadIdx.x;
                s[i] = i;
                syncthreads();
                o[i] = s[63 - i];
             }",
        );
        let mem = MemoryImage::new().with_array("o", ArrayData::zeros(Ty::Int, 64));
        let out = run(&p, &mem).unwrap().arrays["o"].as_ints();
        assert_eq!(out, (0..64).rev().collect::<Vec<_>>());
    }

    #[test]
    fn out_of_bounds_is_reported() {
        let p = prog("kernel o(int a[4]) { a[threadIdx.x] = 1; }");
        let mem = MemoryImage::new().with_array("a", ArrayData::zeros(Ty::Int, 4));
        let e = run(&p, &mem).unwrap_err();
        assert_eq!(
            e,
            SimError::OutOfBounds {
                array: "a".into(),
                index: 4,
                len: 4
            }
        );
    }

    #[test]
    fn partial_barrier_short_of_count_deadlocks() {
        let p = prog(
            "kernel d(int a[64]) dims(64,1,1) {
                if (threadIdx.x < 32) { bar_sync(1, 64); }
                a[threadIdx.x] = 1;
             }",
        );
        let k = &p.kernels[0];
        let mem = MemoryImage::new().with_array("a", ArrayData::zeros(Ty::Int, 64));
        let r = detect_deadlock(k, &p.functions, &LaunchConfig::of(k), &mem).unwrap();
        assert_eq!(
            r,
            DeadlockReport::Deadlock {
                id: 1,
                block: 0,
                arrived: 32,
                expected: 64
            }
        );
    }

    #[test]
    fn full_block_sync_is_clean() {
        let p = prog("kernel d(int a[64]) dims(64,1,1) { a[threadIdx.x] = 1; syncthreads(); }");
        let k = &p.kernels[0];
        let mem = MemoryImage::new().with_array("a", ArrayData::zeros(Ty::Int, 64));
        let r = detect_deadlock(k, &p.functions, &LaunchConfig::of(k), &mem).unwrap();
        assert_eq!(r, DeadlockReport::Clean);
    }

    #[test]
    fn divergent_barrier_is_an_error() {
        let p = prog("kernel d(int a[32]) { if (threadIdx.x < 16) { syncthreads(); } a[threadIdx.x] = 1; }");
        let mem = MemoryImage::new().with_array("a", ArrayData::zeros(Ty::Int, 32));
        assert!(matches!(run(&p, &mem), Err(SimError::DivergentBarrier { .. })));
    }

    #[test]
    fn scalar_defaults_and_overrides() {
        let p = prog("kernel s(int a[32], int n = 5) { a[threadIdx.x] = n; }");
        let mem = MemoryImage::new().with_array("a", ArrayData::zeros(Ty::Int, 32));
        assert_eq!(run(&p, &mem).unwrap().arrays["a"].as_ints()[0], 5);
        let mem = mem.with_scalar("n", Literal::Int(9));
        assert_eq!(run(&p, &mem).unwrap().arrays["a"].as_ints()[31], 9);
    }

    #[test]
    fn division_by_zero_traps() {
        let p = prog("kernel z(int a[32]) { a[threadIdx.x] = 1 / (threadIdx.x - 3); }");
        let mem = MemoryImage::new().with_array("a", ArrayData::zeros(Ty::Int, 32));
        assert!(matches!(run(&p, &mem), Err(SimError::DivisionByZero { .. })));
    }
}
