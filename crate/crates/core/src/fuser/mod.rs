//! Horizontal fusion: two kernels share one thread block, split by linear
//! thread id into `[0, d1)` and `[d1, d1 + d2)`.

mod emit;
mod prologue;

use std::collections::BTreeSet;
use std::fmt;

use thiserror::Error;

use crate::frontend::*;
use crate::machine::{estimate_registers, SMConfig};

pub use emit::{emit_source, Style};
pub use prologue::{
    build_prologue, count_thread_builtins, global_tid_expr, guard_first, guard_second,
    replace_barriers, rewrite_builtins, GLOBAL_TID, PROLOGUE_VARS,
};

pub const WARP: u32 = 32;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum FuseError {
    #[error("grid dimensions differ: `{k1}` has grid({g1}) but `{k2}` has grid({g2})")]
    GridMismatch {
        k1: String,
        g1: u32,
        k2: String,
        g2: u32,
    },
    #[error("fused block of {d0} threads exceeds the limit of {limit}")]
    ThreadBudgetExceeded { d0: u32, limit: u32 },
    #[error("fused kernel needs {bytes} bytes of shared memory but an SM has {limit}")]
    SharedMemoryOverflow { bytes: u32, limit: u32 },
    #[error("partition size {0} is not a positive multiple of the warp size")]
    Misaligned(u32),
    #[error("`{kernel}` has fixed block dimensions {dims} but was given {threads} threads")]
    FixedDims {
        kernel: String,
        dims: Dims,
        threads: u32,
    },
    #[error("block dimensions {dims} do not hold {threads} threads")]
    DimensionMismatch { dims: Dims, threads: u32 },
    #[error("`{0}` is not normalized (calls must be inlined and declarations lifted)")]
    NotNormalized(String),
    #[error("`{0}` already uses named barriers")]
    NamedBarrierInInput(String),
    #[error("name `{0}` is defined differently by the two kernels")]
    NameCollision(String),
    #[error("barrier id {0} is outside 0..=15")]
    BadBarrierId(u32),
    #[error("barrier count {0} is not a positive multiple of the warp size")]
    MisalignedCount(u32),
    #[error(transparent)]
    Frontend(#[from] FrontendError),
}

/// A point in the fusion search space.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct FusionConfig {
    pub d1: u32,
    pub d2: u32,
    pub d0: u32,
    pub reg_cap: Option<u32>,
}

impl FusionConfig {
    pub fn new(d1: u32, d2: u32) -> Self {
        FusionConfig {
            d1,
            d2,
            d0: d1 + d2,
            reg_cap: None,
        }
    }

    pub fn with_cap(self, reg_cap: Option<u32>) -> Self {
        FusionConfig { reg_cap, ..self }
    }

    pub fn validate(&self, sm: &SMConfig) -> Result<(), FuseError> {
        for d in [self.d1, self.d2] {
            if d < WARP || d % WARP != 0 {
                return Err(FuseError::Misaligned(d));
            }
        }
        let limit = sm.max_threads_per_block.min(sm.max_threads_per_sm);
        if self.d0 != self.d1 + self.d2 || self.d0 > limit {
            return Err(FuseError::ThreadBudgetExceeded { d0: self.d0, limit });
        }
        if self.reg_cap == Some(0) {
            return Err(FuseError::Frontend(FrontendError::Invalid {
                span: Span::default(),
                message: "register cap must be positive".into(),
            }));
        }
        Ok(())
    }
}

impl fmt::Display for FusionConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "d1={} d2={} d0={} reg_cap=", self.d1, self.d2, self.d0)?;
        match self.reg_cap {
            Some(r) => write!(f, "{r}"),
            None => f.write_str("none"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BarrierEntry {
    pub id: u32,
    pub count: u32,
    /// 1 or 2.
    pub owner: usize,
    /// Barrier statements lowered to this id.
    pub sites: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct BarrierTable {
    pub entries: Vec<BarrierEntry>,
}

impl fmt::Display for BarrierTable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.entries.is_empty() {
            return writeln!(f, "barriers = none");
        }
        for e in &self.entries {
            writeln!(
                f,
                "barrier {} count {} owner k{} sites {}",
                e.id, e.count, e.owner, e.sites
            )?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GuardedBlock {
    pub guard: Expr,
    pub body: Block,
    /// The constituent's block shape inside the fused block.
    pub dims: Dims,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusedKernel {
    pub name: String,
    pub params: Vec<Param>,
    pub prologue: Block,
    /// Lifted declarations of both constituents.
    pub decls: Block,
    pub blocks: [GuardedBlock; 2],
    pub barriers: BarrierTable,
    pub config: FusionConfig,
    pub grid_dim: u32,
    /// Register annotation carried over when either input has one.
    pub regs: Option<u32>,
    pub constituents: [String; 2],
}

impl FusedKernel {
    /// The fused kernel as a lifted Mini-Kernel kernel with a 1-D block of
    /// `d0` threads.
    pub fn to_kernel(&self) -> Kernel {
        let split = self
            .prologue
            .iter()
            .position(|s| !matches!(s.kind, StmtKind::Decl(_)))
            .unwrap_or(self.prologue.len());
        let mut body: Block = self.prologue[..split].to_vec();
        body.extend(self.decls.iter().cloned());
        body.extend(self.prologue[split..].iter().cloned());
        for g in &self.blocks {
            body.push(Stmt::new(
                StmtKind::If {
                    cond: g.guard.clone(),
                    then_block: g.body.clone(),
                    else_block: None,
                },
                Span::default(),
            ));
        }
        Kernel {
            name: self.name.clone(),
            params: self.params.clone(),
            block_dims: Dims::linear(self.config.d0),
            grid_dim: self.grid_dim,
            tunable: true,
            regs: self.regs,
            body,
            span: Span::default(),
        }
    }

    pub fn shared_bytes(&self) -> u32 {
        self.to_kernel().shared_bytes()
    }
}

/// Block shape for `threads` threads: the kernel's own shape when fixed,
/// otherwise its y·z rows kept when they divide `threads`, else 1-D.
pub fn repartition(k: &Kernel, threads: u32) -> Result<Dims, FuseError> {
    let d = k.block_dims;
    if !k.tunable {
        if d.product() != threads {
            return Err(FuseError::FixedDims {
                kernel: k.name.clone(),
                dims: d,
                threads,
            });
        }
        return Ok(d);
    }
    let rows = d.y * d.z;
    if threads % rows == 0 {
        Ok(Dims::new(threads / rows, d.y, d.z))
    } else {
        Ok(Dims::linear(threads))
    }
}

/// The kernel with its block shape set for `threads` threads.
pub fn with_threads(k: &Kernel, threads: u32) -> Result<Kernel, FuseError> {
    let mut k = k.clone();
    k.block_dims = repartition(&k, threads)?;
    Ok(k)
}

fn is_normalized(k: &Kernel) -> bool {
    let mut calls = false;
    walk_stmts(&k.body, &mut |s| calls |= matches!(s.kind, StmtKind::Call { .. }));
    walk_exprs(&k.body, &mut |e| calls |= matches!(e.kind, ExprKind::Call(..)));
    !calls && is_lifted(&k.body)
}

fn merge_params(k1: &Kernel, k2: &Kernel) -> Result<Vec<Param>, FuseError> {
    let mut out = k1.params.clone();
    for p in &k2.params {
        match out.iter().find(|q| q.name == p.name) {
            Some(q) if q.ty == p.ty && q.len == p.len && q.default == p.default => {}
            Some(_) => return Err(FuseError::NameCollision(p.name.clone())),
            None => out.push(p.clone()),
        }
    }
    Ok(out)
}

/// Fuses two normalized kernels at the partition `(d1, d2)`.
pub fn generate_fused(
    k1: &Kernel,
    k2: &Kernel,
    d1: u32,
    d2: u32,
    sm: &SMConfig,
) -> Result<FusedKernel, FuseError> {
    if k1.grid_dim != k2.grid_dim {
        return Err(FuseError::GridMismatch {
            k1: k1.name.clone(),
            g1: k1.grid_dim,
            k2: k2.name.clone(),
            g2: k2.grid_dim,
        });
    }
    let config = FusionConfig::new(d1, d2);
    config.validate(sm)?;
    for k in [k1, k2] {
        if !is_normalized(k) {
            return Err(FuseError::NotNormalized(k.name.clone()));
        }
        if count_stmts(&k.body, |s| matches!(s, StmtKind::PartialBarrier { .. })) > 0 {
            return Err(FuseError::NamedBarrierInInput(k.name.clone()));
        }
    }
    let dims1 = repartition(k1, d1)?;
    let dims2 = repartition(k2, d2)?;
    let params = merge_params(k1, k2)?;

    let split = |k: &Kernel| {
        let n = k.body.iter().take_while(|s| matches!(s.kind, StmtKind::Decl(_))).count();
        (k.body[..n].to_vec(), k.body[n..].to_vec())
    };
    let (decls1, body1) = split(k1);
    let (decls2, body2) = split(k2);

    let mut seen: BTreeSet<String> = PROLOGUE_VARS.iter().map(|s| s.to_string()).collect();
    for p in &params {
        if !seen.insert(p.name.clone()) {
            return Err(FuseError::NameCollision(p.name.clone()));
        }
    }
    for s in decls1.iter().chain(&decls2) {
        if let StmtKind::Decl(d) = &s.kind {
            if !seen.insert(d.name.clone()) {
                return Err(FuseError::NameCollision(d.name.clone()));
            }
        }
    }

    let mut decls = decls1;
    decls.extend(decls2);
    let fused_shmem: u32 = decls
        .iter()
        .filter_map(|s| match &s.kind {
            StmtKind::Decl(Decl {
                ty,
                storage: Storage::Shared { len },
                ..
            }) => Some(ty.size_bytes() * len),
            _ => None,
        })
        .sum();
    if fused_shmem > sm.shmem_per_sm {
        return Err(FuseError::SharedMemoryOverflow {
            bytes: fused_shmem,
            limit: sm.shmem_per_sm,
        });
    }

    let mut entries = Vec::new();
    let mut lower = |body: Block, id: u32, count: u32, owner: usize| -> Result<Block, FuseError> {
        let sites = count_stmts(&body, |s| *s == StmtKind::Barrier);
        if sites > 0 {
            entries.push(BarrierEntry {
                id,
                count,
                owner,
                sites,
            });
        }
        replace_barriers(&rewrite_builtins(&body), id, count)
    };
    let body1 = lower(body1, 1, d1, 1)?;
    let body2 = lower(body2, 2, d2, 2)?;

    let regs = if k1.regs.is_some() || k2.regs.is_some() {
        Some(estimate_registers(k1).max(estimate_registers(k2)))
    } else {
        None
    };

    Ok(FusedKernel {
        name: format!("fused_{}_{}", k1.name, k2.name),
        params,
        prologue: build_prologue(dims1, dims2, d1)?,
        decls,
        blocks: [
            GuardedBlock {
                guard: guard_first(d1),
                body: body1,
                dims: dims1,
            },
            GuardedBlock {
                guard: guard_second(d1),
                body: body2,
                dims: dims2,
            },
        ],
        barriers: BarrierTable { entries },
        config,
        grid_dim: k1.grid_dim,
        regs,
        constituents: [k1.name.clone(), k2.name.clone()],
    })
}

/// Normalizes both kernels with the `k1_`/`k2_` prefixes and fuses them.
pub fn fuse(
    k1: &Kernel,
    k2: &Kernel,
    funcs: &[FuncDef],
    d1: u32,
    d2: u32,
    sm: &SMConfig,
) -> Result<FusedKernel, FuseError> {
    let (n1, _) = normalize(k1, funcs, "k1_")?;
    let (n2, _) = normalize(k2, funcs, "k2_")?;
    generate_fused(&n1, &n2, d1, d2, sm)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::{run_functional, run_sequential, LaunchConfig, MemoryImage};

    fn kernels(src: &str) -> Program {
        parse_program(src).unwrap()
    }

    const ADDS: &str = "
        kernel va(int a[128], int b[128], int c[128]) dims(64,1,1) grid(2) {
            int i = blockIdx.x * blockDim.x + threadIdx.x; c[i] = a[i] + b[i]; }
        kernel vb(int x[128], int y[128]) dims(64,1,1) grid(2) {
            int i = blockIdx.x * blockDim.x + threadIdx.x; y[i] = x[i] * 3; }
        kernel e() dims(32,1,1) grid(2) {}";

    fn equivalent(p: &Program, a: usize, b: usize, d1: u32, d2: u32, seeds: u64) {
        let sm = SMConfig::default();
        let (k1, k2) = (&p.kernels[a], &p.kernels[b]);
        let f = fuse(k1, k2, &p.functions, d1, d2, &sm).unwrap();
        let fk = f.to_kernel();
        let s1 = with_threads(k1, d1).unwrap();
        let s2 = with_threads(k2, d2).unwrap();
        for seed in 0..seeds {
            let mut mem = MemoryImage::seeded(&k1.params, seed).unwrap();
            mem.fill_params(&k2.params, seed).unwrap();
            let fused = run_functional(&fk, &[], &LaunchConfig::of(&fk), &mem).unwrap();
            let seq = run_sequential(
                &[(&s1, LaunchConfig::of(&s1)), (&s2, LaunchConfig::of(&s2))],
                &p.functions,
                &mem,
            )
            .unwrap();
            assert_eq!(fused.digest(), seq.digest(), "seed {seed}");
        }
    }

    #[test]
    fn vector_adds_fuse_equivalently() {
        equivalent(&kernels(ADDS), 0, 1, 64, 64, 20);
    }

    #[test]
    fn empty_partner_is_neutral() {
        equivalent(&kernels(ADDS), 0, 2, 64, 32, 5);
    }

    #[test]
    fn guards_and_barrier_table() {
        let p = kernels(
            "kernel a(int x[1024]) dims(32,1,1) { x[threadIdx.x] = 1; syncthreads(); x[threadIdx.x] = 2; syncthreads(); }
             kernel b(int y[1024]) dims(32,1,1) { syncthreads(); y[threadIdx.x] = 1; }",
        );
        let f = fuse(&p.kernels[0], &p.kernels[1], &[], 896, 128, &SMConfig::default()).unwrap();
        assert_eq!(
            f.barriers.entries,
            vec![
                BarrierEntry { id: 1, count: 896, owner: 1, sites: 2 },
                BarrierEntry { id: 2, count: 128, owner: 2, sites: 1 },
            ]
        );
        assert_eq!(f.blocks[0].guard, guard_first(896));
        assert_eq!(f.blocks[1].guard, guard_second(896));
        assert!(is_lifted(&f.to_kernel().body));
    }

    #[test]
    fn grid_mismatch_names_both_grids() {
        let p = kernels("kernel a() grid(4) {} kernel b() grid(8) {}");
        let e = fuse(&p.kernels[0], &p.kernels[1], &[], 32, 32, &SMConfig::default()).unwrap_err();
        let msg = e.to_string();
        assert!(msg.contains("grid(4)") && msg.contains("grid(8)"), "{msg}");
    }

    #[test]
    fn partition_checks() {
        let p = kernels("kernel a() {} kernel b() {} kernel f() dims(512,1,1) fixed {}");
        let sm = SMConfig::default();
        let (a, b) = (&p.kernels[0], &p.kernels[1]);
        assert_eq!(fuse(a, b, &[], 48, 32, &sm).unwrap_err(), FuseError::Misaligned(48));
        assert!(matches!(
            fuse(a, b, &[], 1024, 32, &sm).unwrap_err(),
            FuseError::ThreadBudgetExceeded { d0: 1056, .. }
        ));
        assert!(matches!(
            fuse(&p.kernels[2], b, &[], 256, 256, &sm).unwrap_err(),
            FuseError::FixedDims { .. }
        ));
        let raw = parse_program("kernel c() { int x = 1; }").unwrap();
        assert_eq!(
            generate_fused(&raw.kernels[0], b, 32, 32, &sm).unwrap_err(),
            FuseError::NotNormalized("c".into())
        );
    }

    #[test]
    fn shared_memory_overflow() {
        let p = kernels(
            "kernel a() { shared float s[16384]; s[0] = 1.0; } kernel b() { shared float t[16384]; t[0] = 1.0; }",
        );
        let e = fuse(&p.kernels[0], &p.kernels[1], &[], 32, 32, &SMConfig::default()).unwrap_err();
        assert_eq!(e, FuseError::SharedMemoryOverflow { bytes: 131072, limit: 98304 });
    }

    #[test]
    fn repartition_keeps_rows_when_they_divide() {
        let p = kernels("kernel bn() dims(56,16,1) {}");
        assert_eq!(repartition(&p.kernels[0], 896).unwrap(), Dims::new(56, 16, 1));
        assert_eq!(repartition(&p.kernels[0], 864).unwrap(), Dims::new(54, 16, 1));
        assert_eq!(repartition(&p.kernels[0], 200).unwrap(), Dims::linear(200));
    }

    #[test]
    fn shared_parameters_merge_and_conflicts_fail() {
        let p = kernels(
            "kernel a(int n = 4, int o[64]) { o[threadIdx.x] = n; }
             kernel b(int n = 4, int q[64]) { q[threadIdx.x] = n; }
             kernel c(float n = 4.0) { }",
        );
        let sm = SMConfig::default();
        let f = fuse(&p.kernels[0], &p.kernels[1], &[], 32, 32, &sm).unwrap();
        let names: Vec<_> = f.params.iter().map(|p| p.name.as_str()).collect();
        assert_eq!(names, ["n", "o", "q"]);
        assert_eq!(
            fuse(&p.kernels[0], &p.kernels[2], &[], 32, 32, &sm).unwrap_err(),
            FuseError::NameCollision("n".into())
        );
    }
}
